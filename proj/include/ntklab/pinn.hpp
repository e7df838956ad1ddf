#pragma once

#include <cmath>
#include <cstddef>
#include <fstream>
#include <stdexcept>
#include <string>
#include <utility>
#include <vector>

#include "ntklab/data.hpp"
#include "ntklab/eigen.hpp"
#include "ntklab/kernels.hpp"
#include "ntklab/matrix.hpp"
#include "ntklab/net.hpp"
#include "ntklab/pde.hpp"
#include "ntklab/rng.hpp"
#include "ntklab/trainer.hpp"

namespace ntklab {

// ---------------------------------------------------------------------------
// Problem description.
// ---------------------------------------------------------------------------

// Boundary-value problem for L u = du/dt - Laplace u + u on (0, T) x Gamma,
// Gamma the open unit ball. Collocation points carry time first, y = (t, x) in
// R^{1+spatial_dim}: `interior` points sit in (0, T) x Gamma and pin the PDE
// residual against `source_values` (f there), `boundary` points sit on the
// parabolic boundary {0} x Gamma union [0, T] x dGamma and pin the solution
// against `boundary_values` (g there). Input functions are not part of the
// problem; they come with the dataset.
struct PdeProblem {
    std::size_t spatial_dim = 0;
    double horizon = 1.0;  // T
    std::vector<std::vector<double>> interior;  // n2 x (spatial_dim + 1)
    std::vector<std::vector<double>> boundary;  // n3 x (spatial_dim + 1)
    std::vector<double> source_values;          // f at interior points, n2 entries
    std::vector<double> boundary_values;        // g at boundary points, n3 entries

    std::size_t n2() const { return interior.size(); }
    std::size_t n3() const { return boundary.size(); }
    std::size_t ydim() const { return spatial_dim + 1; }

    // Evaluate a callable at the stored points to fill the data vectors.
    template <typename F>
    void set_source(F&& f) {
        source_values.resize(interior.size());
        for (std::size_t j = 0; j < interior.size(); ++j) source_values[j] = f(interior[j]);
    }
    template <typename F>
    void set_boundary_data(F&& g) {
        boundary_values.resize(boundary.size());
        for (std::size_t j = 0; j < boundary.size(); ++j) boundary_values[j] = g(boundary[j]);
    }
};

// Geometric contract of a problem: dimensions agree, interior points are
// strictly inside the space-time cylinder, boundary points lie on its parabolic
// boundary, and no two collocation points are (near-)parallel, which is what
// keeps the limit kernels nonsingular. Data vectors, when present, must match
// the point counts.
inline void validate_pde_problem(const PdeProblem& prob) {
    if (prob.spatial_dim < 1)
        throw std::invalid_argument("pde problem: spatial dimension must be at least 1");
    if (!(prob.horizon > 0.0))
        throw std::invalid_argument("pde problem: time horizon must be positive");
    if (prob.interior.empty() || prob.boundary.empty())
        throw std::invalid_argument("pde problem: needs interior and boundary points");
    const std::size_t yd = prob.ydim();
    for (std::size_t j = 0; j < prob.interior.size(); ++j) {
        const auto& y = prob.interior[j];
        if (y.size() != yd)
            throw std::invalid_argument("pde problem: interior point " + std::to_string(j) +
                                        " has wrong dimension");
        double xsq = 0.0;
        for (std::size_t c = 1; c < yd; ++c) xsq += y[c] * y[c];
        if (!(y[0] > 0.0 && y[0] < prob.horizon) || !(xsq < 1.0))
            throw std::invalid_argument("pde problem: interior point " + std::to_string(j) +
                                        " is not strictly inside (0,T) x Gamma");
    }
    for (std::size_t j = 0; j < prob.boundary.size(); ++j) {
        const auto& y = prob.boundary[j];
        if (y.size() != yd)
            throw std::invalid_argument("pde problem: boundary point " + std::to_string(j) +
                                        " has wrong dimension");
        double xsq = 0.0;
        for (std::size_t c = 1; c < yd; ++c) xsq += y[c] * y[c];
        const bool initial_face = std::fabs(y[0]) <= 1e-9 && xsq < 1.0;
        const bool lateral_face = y[0] >= -1e-9 && y[0] <= prob.horizon + 1e-9 &&
                                  std::fabs(std::sqrt(xsq) - 1.0) <= 1e-9;
        if (!initial_face && !lateral_face)
            throw std::invalid_argument("pde problem: boundary point " + std::to_string(j) +
                                        " is not on {0} x Gamma or [0,T] x dGamma");
    }
    std::vector<std::vector<double>> combined = prob.interior;
    combined.insert(combined.end(), prob.boundary.begin(), prob.boundary.end());
    if (auto [i, j] = find_parallel_pair(combined); i >= 0)
        throw std::invalid_argument(
            "pde problem: collocation points " + std::to_string(i) + " and " + std::to_string(j) +
            " (interior first, then boundary) are (near-)parallel");
    if (!prob.source_values.empty() && prob.source_values.size() != prob.n2())
        throw std::invalid_argument("pde problem: source values do not match interior points");
    if (!prob.boundary_values.empty() && prob.boundary_values.size() != prob.n3())
        throw std::invalid_argument("pde problem: boundary values do not match boundary points");
}

namespace detail {

inline void require_problem_data(const PdeProblem& prob, const char* who) {
    if (prob.source_values.size() != prob.n2() || prob.boundary_values.size() != prob.n3())
        throw std::invalid_argument(std::string(who) +
                                    ": problem carries no source/boundary data; fill "
                                    "source_values and boundary_values first");
}

inline void check_pinn_compat(const OperatorWeights& w, const PdeProblem& prob,
                              const OperatorDataset& data, const char* who) {
    if (w.activation != Activation::Relu3)
        throw std::invalid_argument(std::string(who) +
                                    ": physics-informed operators use the cubed trunk");
    if (w.d != prob.ydim())
        throw std::invalid_argument(std::string(who) +
                                    ": trunk dimension must equal spatial_dim + 1");
    if (prob.interior.empty() || prob.boundary.empty())
        throw std::invalid_argument(std::string(who) + ": problem has no collocation points");
    if (data.inputs.empty())
        throw std::invalid_argument(std::string(who) + ": dataset has no input functions");
    for (const auto& u : data.inputs)
        if (u.size() != w.q)
            throw std::invalid_argument(std::string(who) +
                                        ": input sensor dimension does not match weights");
}

}  // namespace detail

// ---------------------------------------------------------------------------
// Collocation sampling and manufactured data.
// ---------------------------------------------------------------------------

namespace detail {

inline std::vector<double> sample_unit_sphere(Rng& rng, std::size_t dim) {
    std::vector<double> v(dim);
    double n = 0.0;
    do {
        for (double& c : v) c = rng.gaussian();
        n = norm2(v);
    } while (n == 0.0);
    for (double& c : v) c /= n;
    return v;
}

inline std::vector<double> sample_unit_ball(Rng& rng, std::size_t dim) {
    std::vector<double> v = sample_unit_sphere(rng, dim);
    const double r = std::pow(rng.uniform01(), 1.0 / static_cast<double>(dim));
    for (double& c : v) c *= r;
    return v;
}

}  // namespace detail

// Collocation sampler for the unit-ball domain. Interior points are uniform in
// (0, T) x Gamma; boundary points split as evenly as possible between the
// initial face {0} x Gamma and the lateral face [0, T] x dGamma. Two rejection
// rules keep the Gram factors well conditioned: points with norm below 0.3 are
// resampled (they would contribute numerically negligible rows), and a point
// with |cos| > 0.95 against an earlier one is redrawn. Retries are bounded and
// followed by a full restart of the draw, never an unbounded spin.
inline PdeProblem make_ball_problem(std::size_t spatial_dim, std::size_t n2, std::size_t n3,
                                    Rng& rng, double horizon = 1.0) {
    if (spatial_dim < 1)
        throw std::invalid_argument("make_ball_problem: spatial dimension must be at least 1");
    if (n2 == 0 || n3 == 0)
        throw std::invalid_argument("make_ball_problem: need interior and boundary points");
    if (!(horizon > 0.0))
        throw std::invalid_argument("make_ball_problem: horizon must be positive");

    constexpr double max_abs_cos = 0.95;
    constexpr double min_norm = 0.3;
    const std::size_t n_initial = (n3 + 1) / 2;

    for (int restart = 0; restart < 50; ++restart) {
        PdeProblem prob;
        prob.spatial_dim = spatial_dim;
        prob.horizon = horizon;
        std::vector<std::vector<double>> accepted;
        bool ok = true;

        auto try_place = [&](auto&& draw) {
            for (int attempt = 0; attempt < 200; ++attempt) {
                std::vector<double> y = draw();
                if (norm2(y) < min_norm) continue;
                bool separated = true;
                for (const auto& prev : accepted)
                    if (std::fabs(cosine_angle(prev, y)) > max_abs_cos) {
                        separated = false;
                        break;
                    }
                if (!separated) continue;
                accepted.push_back(y);
                return true;
            }
            return false;
        };

        for (std::size_t j = 0; ok && j < n2; ++j)
            ok = try_place([&] {
                std::vector<double> y(spatial_dim + 1);
                y[0] = horizon * rng.uniform01();
                const std::vector<double> x = detail::sample_unit_ball(rng, spatial_dim);
                for (std::size_t c = 0; c < spatial_dim; ++c) y[c + 1] = x[c];
                return y;
            });
        for (std::size_t j = 0; ok && j < n3; ++j)
            ok = try_place([&] {
                std::vector<double> y(spatial_dim + 1);
                if (j < n_initial) {
                    y[0] = 0.0;
                    const std::vector<double> x = detail::sample_unit_ball(rng, spatial_dim);
                    for (std::size_t c = 0; c < spatial_dim; ++c) y[c + 1] = x[c];
                } else {
                    y[0] = horizon * rng.uniform01();
                    const std::vector<double> x = detail::sample_unit_sphere(rng, spatial_dim);
                    for (std::size_t c = 0; c < spatial_dim; ++c) y[c + 1] = x[c];
                }
                return y;
            });
        if (!ok) continue;

        prob.interior.assign(accepted.begin(), accepted.begin() + static_cast<long>(n2));
        prob.boundary.assign(accepted.begin() + static_cast<long>(n2), accepted.end());
        validate_pde_problem(prob);
        return prob;
    }
    throw std::runtime_error(
        "make_ball_problem: could not place separated collocation points; the requested count "
        "does not fit the domain at the built-in separation level");
}

// u*(y) = exp(a t + b.x), a handy exact solution: L u* = (a - |b|^2 + 1) u*.
inline double exp_solution(double a, const std::vector<double>& b, const std::vector<double>& y) {
    if (y.size() != b.size() + 1)
        throw std::invalid_argument("exp_solution: point dimension must be spatial dim + 1");
    double e = a * y[0];
    for (std::size_t c = 0; c < b.size(); ++c) e += b[c] * y[c + 1];
    return std::exp(e);
}

// Manufactured data from the closed-form solution above: f = (a - |b|^2 + 1) u*
// at the interior points and g = u* on the boundary.
inline void set_closed_form_data(PdeProblem& prob, double a, const std::vector<double>& b) {
    if (b.size() != prob.spatial_dim)
        throw std::invalid_argument("set_closed_form_data: b must have spatial_dim entries");
    const double factor = a - dot(b, b) + 1.0;
    prob.set_source([&](const std::vector<double>& y) { return factor * exp_solution(a, b, y); });
    prob.set_boundary_data([&](const std::vector<double>& y) { return exp_solution(a, b, y); });
}

// Manufactured data from a frozen reference network: f and g are the exact
// interior and boundary images of the reference output for one probe input, so
// (f, g) is consistent with an actual solution of the problem.
inline void set_teacher_data(PdeProblem& prob, const OperatorWeights& teacher,
                             const std::vector<double>& probe) {
    if (teacher.activation != Activation::Relu3)
        throw std::invalid_argument("set_teacher_data: reference network needs the cubed trunk");
    if (teacher.d != prob.ydim())
        throw std::invalid_argument("set_teacher_data: reference trunk dimension mismatch");
    std::vector<double> bv(teacher.m);
    for (std::size_t r = 0; r < teacher.m; ++r) bv[r] = branch_value(teacher, r, probe);
    const double inv_sqrt_m = 1.0 / std::sqrt(static_cast<double>(teacher.m));
    std::vector<double> wr(teacher.d);
    prob.source_values.assign(prob.n2(), 0.0);
    for (std::size_t r = 0; r < teacher.m; ++r) {
        const double* row = teacher.trunk_at(r);
        wr.assign(row, row + teacher.d);
        for (std::size_t j = 0; j < prob.n2(); ++j)
            prob.source_values[j] += bv[r] * apply_L_to_trunk(wr, prob.interior[j]);
    }
    for (double& v : prob.source_values) v *= inv_sqrt_m;
    prob.set_boundary_data(
        [&](const std::vector<double>& y) { return forward(teacher, probe, y); });
}

// ---------------------------------------------------------------------------
// Residuals.
// ---------------------------------------------------------------------------

// Scaled residuals of an iterate, stacked input-major with the n2 interior
// entries ahead of the n3 boundary entries for every input:
//   interior (i,j): (L G(u_i)(y_j) - f(y_j)) / sqrt(n2)
//   boundary (i,j): (G(u_i)(y~_j) - g(y~_j)) / sqrt(n3)
// The squared norm of the stacked vector IS the training loss; no 1/2 here.
struct PinnResidualVector {
    std::size_t n1 = 0, n2 = 0, n3 = 0;
    std::vector<double> values;  // n1 * (n2 + n3)

    std::size_t dim() const { return n1 * (n2 + n3); }
    std::size_t interior_index(std::size_t i, std::size_t j) const { return i * (n2 + n3) + j; }
    std::size_t boundary_index(std::size_t i, std::size_t j) const {
        return i * (n2 + n3) + n2 + j;
    }
    double loss() const { return dot(values, values); }
    double interior_norm() const {
        double s = 0.0;
        for (std::size_t i = 0; i < n1; ++i)
            for (std::size_t j = 0; j < n2; ++j) {
                const double v = values[interior_index(i, j)];
                s += v * v;
            }
        return std::sqrt(s);
    }
    double boundary_norm() const {
        double s = 0.0;
        for (std::size_t i = 0; i < n1; ++i)
            for (std::size_t j = 0; j < n3; ++j) {
                const double v = values[boundary_index(i, j)];
                s += v * v;
            }
        return std::sqrt(s);
    }
};

inline PinnResidualVector pinn_residuals(const OperatorWeights& w, const PdeProblem& prob,
                                         const OperatorDataset& data) {
    detail::check_pinn_compat(w, prob, data, "pinn_residuals");
    detail::require_problem_data(prob, "pinn_residuals");
    const std::size_t n1 = data.n1(), n2 = prob.n2(), n3 = prob.n3(), block = n2 + n3;

    PinnResidualVector out;
    out.n1 = n1;
    out.n2 = n2;
    out.n3 = n3;
    out.values.assign(n1 * block, 0.0);

    const DenseMatrix bt = branch_table(w, data.inputs);
    std::vector<double> tv(block);
    std::vector<double> wr(w.d);
    for (std::size_t r = 0; r < w.m; ++r) {
        const double* row = w.trunk_at(r);
        wr.assign(row, row + w.d);
        for (std::size_t j = 0; j < n2; ++j) tv[j] = apply_L_to_trunk(wr, prob.interior[j]);
        for (std::size_t j = 0; j < n3; ++j) tv[n2 + j] = relu3(dot(wr, prob.boundary[j]));
        for (std::size_t i = 0; i < n1; ++i) {
            const double b = bt(r, i);
            if (b == 0.0) continue;
            double* vi = &out.values[i * block];
            for (std::size_t s = 0; s < block; ++s) vi[s] += b * tv[s];
        }
    }

    const double inv_sqrt_m = 1.0 / std::sqrt(static_cast<double>(w.m));
    const double a2 = 1.0 / std::sqrt(static_cast<double>(n2));
    const double a3 = 1.0 / std::sqrt(static_cast<double>(n3));
    for (std::size_t i = 0; i < n1; ++i) {
        double* vi = &out.values[i * block];
        for (std::size_t j = 0; j < n2; ++j)
            vi[j] = (vi[j] * inv_sqrt_m - prob.source_values[j]) * a2;
        for (std::size_t j = 0; j < n3; ++j)
            vi[n2 + j] = (vi[n2 + j] * inv_sqrt_m - prob.boundary_values[j]) * a3;
    }
    return out;
}

// ---------------------------------------------------------------------------
// Gram matrices.
// ---------------------------------------------------------------------------

namespace detail {

// Normalized trunk features of one neuron over all collocation slots: interior
// slots first (operator-applied trunk, 1/sqrt(n2) scale), then boundary slots
// (plain cubed trunk, 1/sqrt(n3) scale). `value[s]` and rows of `grad` are the
// per-slot factors of the residual's value and trunk Jacobian for this neuron.
inline void trunk_slot_features(const std::vector<double>& wr, const PdeProblem& prob,
                                std::vector<double>& value, std::vector<double>& grad) {
    const std::size_t n2 = prob.n2(), n3 = prob.n3(), yd = prob.ydim();
    value.assign(n2 + n3, 0.0);
    grad.assign((n2 + n3) * yd, 0.0);
    const double a2 = 1.0 / std::sqrt(static_cast<double>(n2));
    const double a3 = 1.0 / std::sqrt(static_cast<double>(n3));
    for (std::size_t j = 0; j < n2; ++j) {
        const auto& y = prob.interior[j];
        value[j] = a2 * apply_L_to_trunk(wr, y);
        const std::vector<double> g = grad_L_trunk(wr, y);
        for (std::size_t c = 0; c < yd; ++c) grad[j * yd + c] = a2 * g[c];
    }
    for (std::size_t j = 0; j < n3; ++j) {
        const auto& y = prob.boundary[j];
        value[n2 + j] = a3 * relu3(dot(wr, y));
        const std::vector<double> g = grad_relu3_trunk(wr, y);
        for (std::size_t c = 0; c < yd; ++c) grad[(n2 + j) * yd + c] = a3 * g[c];
    }
}

}  // namespace detail

// Empirical Gram pair of the physics-informed residual map, blocks of size
// n2 + n3 over input pairs. First element (trunk side): entry ((i,a),(j,b)) =
// (1/m) sum_r branch_r(u_i) branch_r(u_j) <phi_r[a], phi_r[b]> with phi the
// normalized trunk feature gradients. Second element (branch side): entry =
// (1/m) sum_r kappa_r(i,j) u_i.u_j c_r[a] c_r[b] with kappa the shared-
// indicator fraction and c the normalized trunk feature values. Both equal
// Jt J of the residual map restricted to their weight group.
inline std::pair<BlockGram, BlockGram> pinn_gram(const OperatorWeights& w, const PdeProblem& prob,
                                                 const OperatorDataset& data) {
    detail::check_pinn_compat(w, prob, data, "pinn_gram");
    const std::size_t n1 = data.n1(), n2 = prob.n2(), n3 = prob.n3(), block = n2 + n3;
    const std::size_t dim = n1 * block;

    const DenseMatrix uu = detail::gram_of_points(data.inputs);
    const DenseMatrix bt = branch_table(w, data.inputs);

    BlockGram H;
    H.n1 = n1;
    H.block = block;
    H.provenance = GramProvenance::Empirical;
    H.mat = DenseMatrix(dim, dim);
    BlockGram Ht = H;

    std::vector<double> wr(w.d), value, grad;
    DenseMatrix pg(block, block), vg(block, block);
    std::vector<char> bits(w.p * n1);
    DenseMatrix kappa(n1, n1);
    const double inv_p = 1.0 / static_cast<double>(w.p);
    const std::size_t yd = w.d;

    for (std::size_t r = 0; r < w.m; ++r) {
        const double* row = w.trunk_at(r);
        wr.assign(row, row + w.d);
        detail::trunk_slot_features(wr, prob, value, grad);
        for (std::size_t a = 0; a < block; ++a)
            for (std::size_t b = a; b < block; ++b) {
                double s = 0.0;
                for (std::size_t c = 0; c < yd; ++c) s += grad[a * yd + c] * grad[b * yd + c];
                pg(a, b) = s;
                pg(b, a) = s;
                const double v = value[a] * value[b];
                vg(a, b) = v;
                vg(b, a) = v;
            }
        for (std::size_t k = 0; k < w.p; ++k) {
            const double* wt = w.branch_at(r, k);
            for (std::size_t i = 0; i < n1; ++i)
                bits[k * n1 + i] = detail::dot_n(wt, data.inputs[i].data(), w.q) >= 0.0 ? 1 : 0;
        }
        for (std::size_t i = 0; i < n1; ++i)
            for (std::size_t j = i; j < n1; ++j) {
                double hits = 0.0;
                for (std::size_t k = 0; k < w.p; ++k)
                    hits += static_cast<double>(bits[k * n1 + i] & bits[k * n1 + j]);
                kappa(i, j) = hits * inv_p;
                kappa(j, i) = kappa(i, j);
            }
        for (std::size_t i = 0; i < n1; ++i)
            for (std::size_t j = 0; j < n1; ++j) {
                const double cb = bt(r, i) * bt(r, j);
                if (cb != 0.0) {
                    for (std::size_t a = 0; a < block; ++a) {
                        double* hrow = &H.mat(i * block + a, j * block);
                        for (std::size_t b = 0; b < block; ++b) hrow[b] += cb * pg(a, b);
                    }
                }
                const double ck = uu(i, j) * kappa(i, j);
                if (ck != 0.0) {
                    for (std::size_t a = 0; a < block; ++a) {
                        double* trow = &Ht.mat(i * block + a, j * block);
                        for (std::size_t b = 0; b < block; ++b) trow[b] += ck * vg(a, b);
                    }
                }
            }
    }
    H.mat *= 1.0 / static_cast<double>(w.m);
    Ht.mat *= 1.0 / static_cast<double>(w.m);
    return {std::move(H), std::move(Ht)};
}

// ---------------------------------------------------------------------------
// Training.
// ---------------------------------------------------------------------------

// Gradient of HALF the training loss at the given residuals; the update rule
// is theta <- theta - eta * this. (The loss itself carries no 1/2, the update
// does, so one eta here is worth two in the supervised convention.)
inline LossGradient pinn_loss_gradient(const OperatorWeights& w, const PdeProblem& prob,
                                       const OperatorDataset& data,
                                       const PinnResidualVector& res) {
    detail::check_pinn_compat(w, prob, data, "pinn_loss_gradient");
    const std::size_t n1 = data.n1(), n2 = prob.n2(), n3 = prob.n3(), block = n2 + n3;
    if (res.n1 != n1 || res.n2 != n2 || res.n3 != n3 || res.values.size() != n1 * block)
        throw std::invalid_argument("pinn_loss_gradient: residual vector shape mismatch");

    LossGradient g;
    g.trunk.assign(w.m * w.d, 0.0);
    g.branch.assign(w.m * w.p * w.q, 0.0);

    const DenseMatrix bt = branch_table(w, data.inputs);
    const double inv_sqrt_m = 1.0 / std::sqrt(static_cast<double>(w.m));
    const double inv_sqrt_p = 1.0 / std::sqrt(static_cast<double>(w.p));
    const std::size_t yd = w.d;

    std::vector<double> wr(w.d), value, grad, beta(block), alpha(n1);
    for (std::size_t r = 0; r < w.m; ++r) {
        const double* row = w.trunk_at(r);
        wr.assign(row, row + w.d);
        detail::trunk_slot_features(wr, prob, value, grad);

        // beta[s] = sum_i branch_r(u_i) res(i,s) drives the trunk row;
        // alpha[i] = sum_s res(i,s) c_r[s] drives the branch rows.
        for (std::size_t s = 0; s < block; ++s) {
            double acc = 0.0;
            for (std::size_t i = 0; i < n1; ++i) acc += bt(r, i) * res.values[i * block + s];
            beta[s] = acc;
        }
        double* gw = &g.trunk[r * w.d];
        for (std::size_t s = 0; s < block; ++s) {
            if (beta[s] == 0.0) continue;
            const double coef = inv_sqrt_m * beta[s];
            for (std::size_t c = 0; c < yd; ++c) gw[c] += coef * grad[s * yd + c];
        }
        for (std::size_t i = 0; i < n1; ++i) {
            double acc = 0.0;
            for (std::size_t s = 0; s < block; ++s) acc += res.values[i * block + s] * value[s];
            alpha[i] = acc;
        }
        for (std::size_t k = 0; k < w.p; ++k) {
            const double* wt = w.branch_at(r, k);
            double* gb = &g.branch[(r * w.p + k) * w.q];
            const double base = inv_sqrt_m * inv_sqrt_p * w.sign(r, k);
            for (std::size_t i = 0; i < n1; ++i) {
                if (detail::dot_n(wt, data.inputs[i].data(), w.q) < 0.0) continue;
                const double coef = base * alpha[i];
                const double* ui = data.inputs[i].data();
                for (std::size_t c = 0; c < w.q; ++c) gb[c] += coef * ui[c];
            }
        }
    }
    return g;
}

// One full-batch step of the physics-informed update. Gradients are evaluated
// at the incoming weights and applied simultaneously; signs never move.
inline OperatorWeights pinn_gd_step(const OperatorWeights& w, const PdeProblem& prob,
                                    const OperatorDataset& data, double eta) {
    if (eta < 0.0) throw std::invalid_argument("pinn_gd_step: learning rate must be nonnegative");
    const PinnResidualVector res = pinn_residuals(w, prob, data);
    const LossGradient g = pinn_loss_gradient(w, prob, data, res);
    detail::require_finite_gradient(g);
    OperatorWeights out = w;
    for (std::size_t i = 0; i < out.trunk.size(); ++i) out.trunk[i] -= eta * g.trunk[i];
    for (std::size_t i = 0; i < out.branch.size(); ++i) out.branch[i] -= eta * g.branch[i];
    return out;
}

// I(t) of the one-step expansion: component (i,s) is
//   rho_b(i,s) - rho_a(i,s) - <d rho_a(i,s)/d theta, theta_b - theta_a>,
// the part of the residual change beyond first order in the weight motion.
inline std::vector<double> pinn_residual_term(const OperatorWeights& wa,
                                              const OperatorWeights& wb, const PdeProblem& prob,
                                              const OperatorDataset& data) {
    if (wa.m != wb.m || wa.p != wb.p || wa.q != wb.q || wa.d != wb.d ||
        wa.activation != wb.activation)
        throw std::invalid_argument("pinn_residual_term: weight snapshots have different shapes");
    if (wa.signs != wb.signs)
        throw std::invalid_argument("pinn_residual_term: sign patterns differ; not the same run");
    detail::check_pinn_compat(wa, prob, data, "pinn_residual_term");
    detail::require_problem_data(prob, "pinn_residual_term");

    const std::size_t n1 = data.n1(), n2 = prob.n2(), n3 = prob.n3(), block = n2 + n3;
    const PinnResidualVector ra = pinn_residuals(wa, prob, data);
    const PinnResidualVector rb = pinn_residuals(wb, prob, data);
    std::vector<double> out = rb.values;
    for (std::size_t s = 0; s < out.size(); ++s) out[s] -= ra.values[s];

    const DenseMatrix bt = branch_table(wa, data.inputs);
    const double inv_sqrt_m = 1.0 / std::sqrt(static_cast<double>(wa.m));
    const double inv_sqrt_p = 1.0 / std::sqrt(static_cast<double>(wa.p));
    const std::size_t yd = wa.d;

    std::vector<double> wr(wa.d), value, grad, dw(wa.d), dwt(wa.q), tdot(block), gamma(n1);
    for (std::size_t r = 0; r < wa.m; ++r) {
        const double* rowa = wa.trunk_at(r);
        const double* rowb = wb.trunk_at(r);
        wr.assign(rowa, rowa + wa.d);
        detail::trunk_slot_features(wr, prob, value, grad);
        for (std::size_t c = 0; c < wa.d; ++c) dw[c] = rowb[c] - rowa[c];
        for (std::size_t s = 0; s < block; ++s) {
            double acc = 0.0;
            for (std::size_t c = 0; c < yd; ++c) acc += grad[s * yd + c] * dw[c];
            tdot[s] = acc;
        }
        for (std::size_t i = 0; i < n1; ++i) {
            const double cb = inv_sqrt_m * bt(r, i);
            if (cb == 0.0) continue;
            double* oi = &out[i * block];
            for (std::size_t s = 0; s < block; ++s) oi[s] -= cb * tdot[s];
        }
        for (std::size_t i = 0; i < n1; ++i) gamma[i] = 0.0;
        for (std::size_t k = 0; k < wa.p; ++k) {
            const double* wta = wa.branch_at(r, k);
            const double* wtb = wb.branch_at(r, k);
            for (std::size_t c = 0; c < wa.q; ++c) dwt[c] = wtb[c] - wta[c];
            const double base = inv_sqrt_p * wa.sign(r, k);
            for (std::size_t i = 0; i < n1; ++i) {
                if (detail::dot_n(wta, data.inputs[i].data(), wa.q) < 0.0) continue;
                gamma[i] += base * detail::dot_n(dwt.data(), data.inputs[i].data(), wa.q);
            }
        }
        for (std::size_t i = 0; i < n1; ++i) {
            const double cg = inv_sqrt_m * gamma[i];
            if (cg == 0.0) continue;
            double* oi = &out[i * block];
            for (std::size_t s = 0; s < block; ++s) oi[s] -= cg * value[s];
        }
    }
    return out;
}

namespace detail {

// Initialization diagnostics of a physics-informed run. The drift and defect
// scales follow the cubed-trunk analysis: with B1 a cap on initial neuron
// norms and B2 a cap on initial preactivations over all collocation points,
//   trunk radius   ~ sqrt(n1) B1 B2 |rho0| sqrt(log(m n1 / delta)) / (sqrt(m) lambda)
//   branch radius  ~ sqrt(n1) B1^2 B2 |rho0| / (sqrt(m p) lambda)
//   defect scale   ~ eta n1^{3/2} B1^6 B2^3 |rho0| / (sqrt(m) lambda)
// with lambda the measured lam0_H + lam0_Ht.
inline void fill_pinn_init_diagnostics(TrainingTrace& trace, const OperatorWeights& w,
                                       const PdeProblem& prob, const OperatorDataset& data,
                                       const BlockGram& h0, const BlockGram& ht0,
                                       double res0_norm2) {
    trace.lam0_H = min_eigenvalue(h0.mat);
    trace.lam0_Ht = min_eigenvalue(ht0.mat);
    trace.lambda_hat = trace.lam0_H + trace.lam0_Ht;
    DenseMatrix sum = h0.mat;
    sum += ht0.mat;
    trace.lam0_sum = min_eigenvalue(sum);
    trace.spec_H0 = spectral_norm_sym(h0.mat);
    trace.spec_Ht0 = spectral_norm_sym(ht0.mat);
    trace.res0_norm2 = res0_norm2;

    const double m = static_cast<double>(w.m);
    const double n1 = static_cast<double>(data.n1());
    const double res0 = std::sqrt(res0_norm2);
    const double b1 =
        2.0 * std::sqrt(static_cast<double>(prob.spatial_dim) * std::log(m / trace.delta));
    const double b2 = 2.0 * std::sqrt(
        std::log(m * static_cast<double>(prob.n2() + prob.n3()) / trace.delta));
    trace.weight_norm_bound = b1;
    trace.preact_bound = b2;
    trace.radius_trunk = std::sqrt(n1) * b1 * b2 * res0 *
                         std::sqrt(std::log(m * n1 / trace.delta)) /
                         (std::sqrt(m) * trace.lambda_hat);
    trace.radius_branch = std::sqrt(n1) * b1 * b1 * b2 * res0 /
                          (std::sqrt(m * static_cast<double>(w.p)) * trace.lambda_hat);
    trace.recursion_radius = trace.eta * n1 * std::sqrt(n1) * std::pow(b1, 6) *
                             std::pow(b2, 3) * res0 / (std::sqrt(m) * trace.lambda_hat);
}

}  // namespace detail

// Full-batch physics-informed training with diagnostics at the given cadence
// (plus the final iterate). Weights are trained in place. The loss column of
// the trace is the unhalved residual norm squared, and each logged row also
// splits it into interior (s_norm) and boundary (h_norm) parts.
inline TrainingTrace pinn_train(OperatorWeights& w, const PdeProblem& prob,
                                const OperatorDataset& data, const TrainOptions& opt) {
    detail::check_pinn_compat(w, prob, data, "pinn_train");
    detail::require_problem_data(prob, "pinn_train");
    validate_pde_problem(prob);
    if (opt.steps < 0) throw std::invalid_argument("pinn_train: steps must be nonnegative");
    if (opt.cadence < 1) throw std::invalid_argument("pinn_train: cadence must be at least 1");

    const OperatorWeights init = w;
    TrainingTrace trace;
    trace.kind = TraceKind::GradientDescent;
    trace.delta = opt.delta;

    auto [h0, ht0] = pinn_gram(w, prob, data);
    h0.iteration = 0;
    ht0.iteration = 0;

    PinnResidualVector res = pinn_residuals(w, prob, data);
    const double res0_norm2 = res.loss();
    trace.eta = opt.eta > 0.0 ? opt.eta
                              : 1.0 / (spectral_norm_sym(h0.mat) + spectral_norm_sym(ht0.mat));
    detail::fill_pinn_init_diagnostics(trace, w, prob, data, h0, ht0, res0_norm2);
    trace.recursion_checked = opt.check_recursion;

    const double res0_norm = std::sqrt(res0_norm2);
    for (long t = 0; t <= opt.steps; ++t) {
        const double rn2 = res.loss();
        const double rn = std::sqrt(rn2);
        if (!std::isfinite(rn))
            throw std::runtime_error("pinn_train: residual became non-finite at iteration " +
                                     std::to_string(t));
        if (t > 0 && rn > opt.divergence_factor * res0_norm)
            throw std::runtime_error(
                "pinn_train: residual norm " + format_g17(rn) + " at iteration " +
                std::to_string(t) + " exceeds " + format_g17(opt.divergence_factor) +
                " times its initial value; the step size is too large for this instance");

        const bool logged = (t % opt.cadence == 0) || t == opt.steps;
        TraceRow row;
        BlockGram ht, htt;
        if (logged) {
            row.iter = t;
            row.time = static_cast<double>(t);
            row.loss = rn2;
            row.res_norm = rn;
            row.s_norm = res.interior_norm();
            row.h_norm = res.boundary_norm();
            const auto drift = detail::max_drift(w, init);
            row.drift_w = drift.first;
            row.drift_wt = drift.second;
            if (t == 0) {
                ht = h0;
                htt = ht0;
            } else {
                auto grams = pinn_gram(w, prob, data);
                ht = std::move(grams.first);
                htt = std::move(grams.second);
            }
            ht.iteration = t;
            htt.iteration = t;
            row.lam_H = min_eigenvalue(ht.mat);
            row.lam_Ht = min_eigenvalue(htt.mat);
            // (1 - 0.9 eta lambda_hat / 2)^t, the linear rate with a 0.9 slack
            // absorbing the finite-width gap between measured and limit spectra.
            row.bound =
                std::pow(1.0 - 0.45 * trace.eta * trace.lambda_hat, static_cast<double>(t)) *
                res0_norm2;
        }

        if (t == opt.steps) {
            if (logged) {
                row.I_norm = 0.0;
                detail::require_finite_row(row);
                trace.rows.push_back(row);
            }
            break;
        }

        OperatorWeights next = pinn_gd_step(w, prob, data, trace.eta);
        PinnResidualVector res_next = pinn_residuals(next, prob, data);
        if (logged) {
            const std::vector<double> defect = pinn_residual_term(w, next, prob, data);
            row.I_norm = std::sqrt(dot(defect, defect));
            if (opt.check_recursion) {
                // rho^{t+1} = (I - eta (H + Htilde)) rho^t + I(t), entrywise.
                DenseMatrix k = ht.mat;
                k += htt.mat;
                const std::vector<double> kres = k.matvec(res.values);
                double worst = 0.0;
                for (std::size_t s = 0; s < res.values.size(); ++s) {
                    const double rhs = res.values[s] - trace.eta * kres[s] + defect[s];
                    worst = std::max(worst, std::fabs(res_next.values[s] - rhs));
                }
                trace.max_recursion_defect = std::max(trace.max_recursion_defect, worst);
            }
            detail::require_finite_row(row);
            trace.rows.push_back(row);
        }
        w = std::move(next);
        res = std::move(res_next);
    }
    return trace;
}

// ---------------------------------------------------------------------------
// Width limit by Monte Carlo.
// ---------------------------------------------------------------------------

// Width limits of the two Grams, estimated factor-wise. The trunk-side limit
// is kron(K1, Phi) with K1 the order-1 arc-cosine kernel on inputs and
// Phi[a,b] = E<phi_a(w), phi_b(w)> over w ~ N(0, I); the branch-side limit is
// kron(K0, C) with K0 the order-0 kernel on inputs and C[a,b] = E[c_a(w) c_b(w)].
// No closed form is known for Phi and C, hence the sampling oracle. max_se is
// the largest per-entry standard error across both estimated factors.
struct PinnLimit {
    BlockGram H;
    BlockGram Htilde;
    double max_se = 0.0;
};

inline PinnLimit pinn_infinite_width_mc(const PdeProblem& prob, const OperatorDataset& data,
                                        std::size_t samples, Rng& rng) {
    validate_pde_problem(prob);
    if (data.inputs.empty())
        throw std::invalid_argument("pinn_infinite_width_mc: dataset has no input functions");
    detail::require_no_parallel(data.inputs, "inputs", "pinn_infinite_width_mc");

    const std::size_t n1 = data.n1(), n2 = prob.n2(), n3 = prob.n3(), block = n2 + n3;
    std::vector<const std::vector<double>*> pts(block);
    std::vector<McPointRole> roles(block);
    std::vector<double> scale(block);
    for (std::size_t j = 0; j < n2; ++j) {
        pts[j] = &prob.interior[j];
        roles[j] = McPointRole::Interior;
        scale[j] = 1.0 / std::sqrt(static_cast<double>(n2));
    }
    for (std::size_t j = 0; j < n3; ++j) {
        pts[n2 + j] = &prob.boundary[j];
        roles[n2 + j] = McPointRole::Boundary;
        scale[n2 + j] = 1.0 / std::sqrt(static_cast<double>(n3));
    }

    DenseMatrix phi(block, block), cval(block, block);
    double max_se = 0.0;
    for (std::size_t a = 0; a < block; ++a)
        for (std::size_t b = a; b < block; ++b) {
            ExpectationSpec spec;
            spec.a = *pts[a];
            spec.b = *pts[b];
            spec.role_a = roles[a];
            spec.role_b = roles[b];
            spec.kind = McKernelKind::PinnTrunkGrad;
            const McEstimate eg = mc_kernel(spec, samples, rng);
            phi(a, b) = eg.mean * scale[a] * scale[b];
            phi(b, a) = phi(a, b);
            max_se = std::max(max_se, eg.se * scale[a] * scale[b]);
            spec.kind = McKernelKind::PinnTrunkValue;
            const McEstimate ev = mc_kernel(spec, samples, rng);
            cval(a, b) = ev.mean * scale[a] * scale[b];
            cval(b, a) = cval(a, b);
            max_se = std::max(max_se, ev.se * scale[a] * scale[b]);
        }

    PinnLimit out;
    out.max_se = max_se;
    out.H.n1 = n1;
    out.H.block = block;
    out.H.provenance = GramProvenance::MonteCarlo;
    out.H.mat = kron(kernel_matrix_order1(data.inputs), phi);
    out.Htilde.n1 = n1;
    out.Htilde.block = block;
    out.Htilde.provenance = GramProvenance::MonteCarlo;
    out.Htilde.mat = kron(kernel_matrix_order0(data.inputs), cval);
    return out;
}

// ---------------------------------------------------------------------------
// CSV export.
// ---------------------------------------------------------------------------

// Same schema as the supervised trace plus the residual split columns.
inline void write_pinn_trace_csv(const TrainingTrace& trace, const std::string& path) {
    std::ofstream out(path, std::ios::binary);
    if (!out) throw std::runtime_error("write_pinn_trace_csv: cannot open " + path);
    out << "iter,loss,res_norm,drift_w,drift_wt,lam_H,lam_Ht,I_norm,bound,s_norm,h_norm\n";
    for (const TraceRow& row : trace.rows) {
        out << row.iter << ',' << format_g17(row.loss) << ',' << format_g17(row.res_norm) << ','
            << format_g17(row.drift_w) << ',' << format_g17(row.drift_wt) << ','
            << format_g17(row.lam_H) << ',' << format_g17(row.lam_Ht) << ','
            << format_g17(row.I_norm) << ',' << format_g17(row.bound) << ','
            << format_g17(row.s_norm) << ',' << format_g17(row.h_norm) << '\n';
    }
    if (!out) throw std::runtime_error("write_pinn_trace_csv: write failed for " + path);
}

}  // namespace ntklab
