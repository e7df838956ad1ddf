#pragma once

#include <cmath>
#include <cstddef>
#include <cstdint>
#include <stdexcept>
#include <string>
#include <vector>

#include "ntklab/data.hpp"
#include "ntklab/matrix.hpp"
#include "ntklab/net.hpp"
#include "ntklab/pde.hpp"
#include "ntklab/rng.hpp"

namespace ntklab {

enum class GramProvenance : std::uint8_t { Empirical, InfiniteWidth, MonteCarlo };

// A Gram matrix over flattened sample pairs, organized as n1 x n1 blocks of
// size `block` (n2 for supervised training, n2+n3 for the PINN residuals).
// Row (i, a) of block row i corresponds to flat index i*block + a.
struct BlockGram {
    std::size_t n1 = 0;
    std::size_t block = 0;
    GramProvenance provenance = GramProvenance::Empirical;
    long iteration = -1;  // training step for empirical Grams; -1 when not tied to one
    DenseMatrix mat;

    std::size_t dim() const { return n1 * block; }
};

namespace detail {

// Pairwise inner products with bitwise-symmetric storage, so Gram assembly
// that reads entry (a,b) and (b,a) produces exactly symmetric output.
inline DenseMatrix gram_of_points(const std::vector<std::vector<double>>& pts) {
    const std::size_t n = pts.size();
    DenseMatrix g(n, n);
    for (std::size_t a = 0; a < n; ++a) {
        for (std::size_t b = a; b < n; ++b) {
            const double v = dot(pts[a], pts[b]);
            g(a, b) = v;
            g(b, a) = v;
        }
    }
    return g;
}

}  // namespace detail

// ---------------------------------------------------------------------------
// Empirical Gram matrices at the current weights.
// ---------------------------------------------------------------------------

// Trunk-side Gram: entry ((i,a),(j,b)) =
//   (1/m) sum_r branch_r(u_i) branch_r(u_j) y_a.y_b 1{w_r.y_a >= 0} 1{w_r.y_b >= 0}.
// Equals Jt J for the Jacobian of predictions with respect to trunk weights.
inline BlockGram empirical_H(const OperatorWeights& w, const OperatorDataset& data) {
    if (w.activation != Activation::Relu)
        throw std::invalid_argument("empirical_H: trunk activation must be ReLU");
    if (w.q != data.q() || w.d != data.d())
        throw std::invalid_argument("empirical_H: weight dimensions do not match dataset");
    const std::size_t n1 = data.n1(), n2 = data.n2(), dim = n1 * n2;

    const DenseMatrix yy = detail::gram_of_points(data.queries);
    const DenseMatrix bt = branch_table(w, data.inputs);  // m x n1

    BlockGram out;
    out.n1 = n1;
    out.block = n2;
    out.provenance = GramProvenance::Empirical;
    out.mat = DenseMatrix(dim, dim);

    std::vector<char> active(n2);
    for (std::size_t r = 0; r < w.m; ++r) {
        const double* wr = w.trunk_at(r);
        for (std::size_t a = 0; a < n2; ++a)
            active[a] = detail::dot_n(wr, data.queries[a].data(), w.d) >= 0.0 ? 1 : 0;
        for (std::size_t i = 0; i < n1; ++i) {
            for (std::size_t a = 0; a < n2; ++a) {
                if (!active[a]) continue;
                double* row = &out.mat(i * n2 + a, 0);
                const double bi = bt(r, i);
                for (std::size_t j = 0; j < n1; ++j) {
                    const double c = bi * bt(r, j);
                    for (std::size_t b = 0; b < n2; ++b)
                        if (active[b]) row[j * n2 + b] += c * yy(a, b);
                }
            }
        }
    }
    out.mat *= 1.0 / static_cast<double>(w.m);
    return out;
}

// Branch-side Gram: entry ((i,a),(j,b)) =
//   (1/(m p)) sum_{r,k} u_i.u_j 1{wt_rk.u_i >= 0} 1{wt_rk.u_j >= 0}
//                       relu(w_r.y_a) relu(w_r.y_b).
// Equals Jt J for the Jacobian with respect to branch weights.
inline BlockGram empirical_Htilde(const OperatorWeights& w, const OperatorDataset& data) {
    if (w.activation != Activation::Relu)
        throw std::invalid_argument("empirical_Htilde: trunk activation must be ReLU");
    if (w.q != data.q() || w.d != data.d())
        throw std::invalid_argument("empirical_Htilde: weight dimensions do not match dataset");
    const std::size_t n1 = data.n1(), n2 = data.n2(), dim = n1 * n2;

    const DenseMatrix uu = detail::gram_of_points(data.inputs);

    BlockGram out;
    out.n1 = n1;
    out.block = n2;
    out.provenance = GramProvenance::Empirical;
    out.mat = DenseMatrix(dim, dim);

    std::vector<double> s(n2);
    std::vector<char> bits(w.p * n1);
    DenseMatrix kappa(n1, n1);
    const double inv_p = 1.0 / static_cast<double>(w.p);
    for (std::size_t r = 0; r < w.m; ++r) {
        const double* wr = w.trunk_at(r);
        for (std::size_t a = 0; a < n2; ++a)
            s[a] = relu(detail::dot_n(wr, data.queries[a].data(), w.d));
        for (std::size_t k = 0; k < w.p; ++k) {
            const double* wt = w.branch_at(r, k);
            for (std::size_t i = 0; i < n1; ++i)
                bits[k * n1 + i] = detail::dot_n(wt, data.inputs[i].data(), w.q) >= 0.0 ? 1 : 0;
        }
        for (std::size_t i = 0; i < n1; ++i) {
            for (std::size_t j = i; j < n1; ++j) {
                double hits = 0.0;
                for (std::size_t k = 0; k < w.p; ++k)
                    hits += static_cast<double>(bits[k * n1 + i] & bits[k * n1 + j]);
                const double v = hits * inv_p;
                kappa(i, j) = v;
                kappa(j, i) = v;
            }
        }
        for (std::size_t i = 0; i < n1; ++i) {
            for (std::size_t j = 0; j < n1; ++j) {
                const double c = uu(i, j) * kappa(i, j);
                if (c == 0.0) continue;
                for (std::size_t a = 0; a < n2; ++a) {
                    const double ca = c * s[a];
                    if (ca == 0.0) continue;
                    double* row = &out.mat(i * n2 + a, j * n2);
                    for (std::size_t b = 0; b < n2; ++b) row[b] += ca * s[b];
                }
            }
        }
    }
    out.mat *= 1.0 / static_cast<double>(w.m);
    return out;
}

// ---------------------------------------------------------------------------
// Infinite-width kernels (arc-cosine closed forms).
// ---------------------------------------------------------------------------

namespace detail {

// Angle between a and b via atan2(:sin:, :cos:), where the sine comes from the
// orthogonal residual of the normalized pair. Clamping the cosine keeps acos
// and the residual finite at numerically (anti)parallel inputs.
inline double stable_angle(const std::vector<double>& a, const std::vector<double>& b,
                           double na, double nb) {
    double d = dot(a, b);
    double c = d / (na * nb);
    if (c > 1.0) c = 1.0;
    if (c < -1.0) c = -1.0;
    double rsq = 0.0;
    for (std::size_t i = 0; i < a.size(); ++i) {
        const double ri = a[i] / na - c * (b[i] / nb);
        rsq += ri * ri;
    }
    return std::atan2(std::sqrt(rsq), c);
}

inline void require_kernel_args(const std::vector<double>& a, const std::vector<double>& b,
                                double na, double nb, const char* who) {
    if (a.size() != b.size() || a.empty())
        throw std::invalid_argument(std::string(who) + ": vectors must share a nonzero dimension");
    if (na == 0.0 || nb == 0.0)
        throw std::invalid_argument(std::string(who) + ": zero vector has no kernel angle");
}

}  // namespace detail

// E[relu(w.a) relu(w.b)] over w ~ N(0, I): |a||b| (sin t + (pi - t) cos t) / (2 pi).
inline double arccos_kernel_order1(const std::vector<double>& a, const std::vector<double>& b) {
    const double na = norm2(a), nb = norm2(b);
    detail::require_kernel_args(a, b, na, nb, "arccos_kernel_order1");
    const double t = detail::stable_angle(a, b, na, nb);
    constexpr double two_pi = 6.283185307179586476925286766559;
    return na * nb * (std::sin(t) + (M_PI - t) * std::cos(t)) / two_pi;
}

// E[a.b 1{w.a >= 0} 1{w.b >= 0}] over w ~ N(0, I): (a.b) (pi - t) / (2 pi).
inline double arccos_kernel_order0(const std::vector<double>& a, const std::vector<double>& b) {
    const double na = norm2(a), nb = norm2(b);
    detail::require_kernel_args(a, b, na, nb, "arccos_kernel_order0");
    const double t = detail::stable_angle(a, b, na, nb);
    constexpr double two_pi = 6.283185307179586476925286766559;
    return dot(a, b) * (M_PI - t) / two_pi;
}

// Factor-matrix builders. No parallel-pair screening here: these are also the
// probes used to demonstrate what degenerate geometry does to the spectrum.
inline DenseMatrix kernel_matrix_order0(const std::vector<std::vector<double>>& pts) {
    const std::size_t n = pts.size();
    DenseMatrix k(n, n);
    for (std::size_t a = 0; a < n; ++a)
        for (std::size_t b = a; b < n; ++b) {
            const double v = arccos_kernel_order0(pts[a], pts[b]);
            k(a, b) = v;
            k(b, a) = v;
        }
    return k;
}

inline DenseMatrix kernel_matrix_order1(const std::vector<std::vector<double>>& pts) {
    const std::size_t n = pts.size();
    DenseMatrix k(n, n);
    for (std::size_t a = 0; a < n; ++a)
        for (std::size_t b = a; b < n; ++b) {
            const double v = arccos_kernel_order1(pts[a], pts[b]);
            k(a, b) = v;
            k(b, a) = v;
        }
    return k;
}

namespace detail {

inline void require_no_parallel(const std::vector<std::vector<double>>& pts, const char* what,
                                const char* who) {
    const auto pair = find_parallel_pair(pts);
    if (pair.first >= 0)
        throw std::invalid_argument(std::string(who) + ": " + what + " " +
                                    std::to_string(pair.first) + " and " +
                                    std::to_string(pair.second) +
                                    " are parallel; the limit kernel would be singular");
}

}  // namespace detail

// Infinite-width trunk Gram: kron(K1, K2) with K1 the order-1 kernel on inputs
// and K2 the order-0 kernel on queries.
inline BlockGram analytic_Hinf(const OperatorDataset& data) {
    detail::require_no_parallel(data.inputs, "inputs", "analytic_Hinf");
    detail::require_no_parallel(data.queries, "queries", "analytic_Hinf");
    BlockGram out;
    out.n1 = data.n1();
    out.block = data.n2();
    out.provenance = GramProvenance::InfiniteWidth;
    out.mat = kron(kernel_matrix_order1(data.inputs), kernel_matrix_order0(data.queries));
    return out;
}

// Infinite-width branch Gram: kernel orders swap sides relative to analytic_Hinf.
inline BlockGram analytic_Htilde_inf(const OperatorDataset& data) {
    detail::require_no_parallel(data.inputs, "inputs", "analytic_Htilde_inf");
    detail::require_no_parallel(data.queries, "queries", "analytic_Htilde_inf");
    BlockGram out;
    out.n1 = data.n1();
    out.block = data.n2();
    out.provenance = GramProvenance::InfiniteWidth;
    out.mat = kron(kernel_matrix_order0(data.inputs), kernel_matrix_order1(data.queries));
    return out;
}

// ---------------------------------------------------------------------------
// Monte Carlo kernel oracle.
// ---------------------------------------------------------------------------

enum class McKernelKind : std::uint8_t {
    Order0,         // a.b 1{w.a >= 0} 1{w.b >= 0}
    Order1,         // relu(w.a) relu(w.b)
    PinnTrunkGrad,  // <g_a(w), g_b(w)>, g per role below
    PinnTrunkValue  // v_a(w) v_b(w), v per role below
};

// For the PINN kinds each point contributes through its residual role:
// Interior uses the differential operator applied to the relu3 trunk
// (value apply_L_to_trunk, gradient grad_L_trunk), Boundary uses the plain
// relu3 trunk (value relu3(w.y), gradient 3 relu2(w.y) y).
enum class McPointRole : std::uint8_t { Interior, Boundary };

struct ExpectationSpec {
    McKernelKind kind = McKernelKind::Order1;
    std::vector<double> a, b;
    McPointRole role_a = McPointRole::Interior;
    McPointRole role_b = McPointRole::Interior;
};

struct McEstimate {
    double mean = 0.0;
    double se = 0.0;
    std::size_t samples = 0;
};

inline McEstimate mc_kernel(const ExpectationSpec& spec, std::size_t samples, Rng& rng) {
    if (samples < 10000)
        throw std::invalid_argument("mc_kernel: need at least 10^4 samples for a usable error bar");
    if (spec.a.size() != spec.b.size() || spec.a.empty())
        throw std::invalid_argument("mc_kernel: a and b must share a nonzero dimension");
    const std::size_t dim = spec.a.size();
    const double ab = dot(spec.a, spec.b);

    double sum = 0.0, sumsq = 0.0;
    std::vector<double> w(dim);
    for (std::size_t s = 0; s < samples; ++s) {
        for (std::size_t i = 0; i < dim; ++i) w[i] = rng.gaussian();
        double v = 0.0;
        switch (spec.kind) {
            case McKernelKind::Order0: {
                const double za = dot(w, spec.a), zb = dot(w, spec.b);
                v = (za >= 0.0 && zb >= 0.0) ? ab : 0.0;
                break;
            }
            case McKernelKind::Order1:
                v = relu(dot(w, spec.a)) * relu(dot(w, spec.b));
                break;
            case McKernelKind::PinnTrunkGrad: {
                const std::vector<double> ga = spec.role_a == McPointRole::Interior
                                                   ? grad_L_trunk(w, spec.a)
                                                   : grad_relu3_trunk(w, spec.a);
                const std::vector<double> gb = spec.role_b == McPointRole::Interior
                                                   ? grad_L_trunk(w, spec.b)
                                                   : grad_relu3_trunk(w, spec.b);
                v = dot(ga, gb);
                break;
            }
            case McKernelKind::PinnTrunkValue: {
                const double va = spec.role_a == McPointRole::Interior
                                      ? apply_L_to_trunk(w, spec.a)
                                      : relu3(dot(w, spec.a));
                const double vb = spec.role_b == McPointRole::Interior
                                      ? apply_L_to_trunk(w, spec.b)
                                      : relu3(dot(w, spec.b));
                v = va * vb;
                break;
            }
        }
        sum += v;
        sumsq += v * v;
    }
    McEstimate est;
    est.samples = samples;
    const double n = static_cast<double>(samples);
    est.mean = sum / n;
    const double var = (sumsq - n * est.mean * est.mean) / (n - 1.0);
    est.se = std::sqrt((var > 0.0 ? var : 0.0) / n);
    return est;
}

// ---------------------------------------------------------------------------
// Indicator diagnostics.
// ---------------------------------------------------------------------------

// For each query y_j, the fraction of trunk neurons whose preactivation at y_j
// lies within |w_r.y_j| < |y_j| * radius. This is the empirical probability of
// the activation-pattern flip event that drives the drift analysis.
inline std::vector<double> indicator_flip_fraction(const OperatorWeights& w,
                                                   const OperatorDataset& data, double radius) {
    if (!(radius > 0.0 && radius < 1.0))
        throw std::invalid_argument("indicator_flip_fraction: radius must lie in (0,1)");
    if (w.d != data.d())
        throw std::invalid_argument("indicator_flip_fraction: query dimension mismatch");
    const std::size_t n2 = data.n2();
    std::vector<double> frac(n2, 0.0);
    for (std::size_t j = 0; j < n2; ++j) {
        const double bound = norm2(data.queries[j]) * radius;
        std::size_t count = 0;
        for (std::size_t r = 0; r < w.m; ++r) {
            const double z = detail::dot_n(w.trunk_at(r), data.queries[j].data(), w.d);
            if (std::fabs(z) < bound) ++count;
        }
        frac[j] = static_cast<double>(count) / static_cast<double>(w.m);
    }
    return frac;
}

}  // namespace ntklab
