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

namespace ntklab {

// Predictions over the full sample grid, flattened as flat_index(i, j, n2).
inline std::vector<double> predictions(const OperatorWeights& w, const OperatorDataset& data) {
    const std::size_t n1 = data.n1(), n2 = data.n2();
    std::vector<double> out(n1 * n2);
    for (std::size_t i = 0; i < n1; ++i)
        for (std::size_t j = 0; j < n2; ++j)
            out[flat_index(i, j, n2)] = forward(w, data.inputs[i], data.queries[j]);
    return out;
}

// z - G(u), the residual the convergence theory tracks.
inline std::vector<double> residual_vector(const OperatorWeights& w, const OperatorDataset& data) {
    if (!data.has_targets())
        throw std::invalid_argument("residual_vector: dataset carries no targets");
    std::vector<double> res = predictions(w, data);
    for (std::size_t s = 0; s < res.size(); ++s) res[s] = data.targets[s] - res[s];
    return res;
}

inline double loss(const OperatorWeights& w, const OperatorDataset& data) {
    const std::vector<double> res = residual_vector(w, data);
    return 0.5 * dot(res, res);
}

struct LossGradient {
    std::vector<double> trunk;   // m x d, laid out like OperatorWeights::trunk
    std::vector<double> branch;  // m x p x q, laid out like OperatorWeights::branch
};

namespace detail {

// Gradient of the loss given err = G - z. One pass per neuron: the (r,k,i)
// preactivations feed both the branch values (for trunk gradients) and the
// branch indicators (for branch gradients).
inline LossGradient loss_gradient_from_err(const OperatorWeights& w, const OperatorDataset& data,
                                           const std::vector<double>& err) {
    const std::size_t n1 = data.n1(), n2 = data.n2();
    LossGradient g;
    g.trunk.assign(w.m * w.d, 0.0);
    g.branch.assign(w.m * w.p * w.q, 0.0);

    const double inv_sqrt_m = 1.0 / std::sqrt(static_cast<double>(w.m));
    const double inv_sqrt_p = 1.0 / std::sqrt(static_cast<double>(w.p));

    std::vector<double> tval(n2), act(n2);
    std::vector<double> bval(n1), csum(n1);
    std::vector<char> ubit(w.p * n1);
    for (std::size_t r = 0; r < w.m; ++r) {
        const double* wr = w.trunk_at(r);
        for (std::size_t j = 0; j < n2; ++j) {
            tval[j] = dot_n(wr, data.queries[j].data(), w.d);
            act[j] = tval[j] >= 0.0 ? 1.0 : 0.0;
        }
        for (std::size_t i = 0; i < n1; ++i) bval[i] = 0.0;
        for (std::size_t k = 0; k < w.p; ++k) {
            const double* wt = w.branch_at(r, k);
            const double sg = static_cast<double>(w.sign(r, k));
            for (std::size_t i = 0; i < n1; ++i) {
                const double z = dot_n(wt, data.inputs[i].data(), w.q);
                ubit[k * n1 + i] = z >= 0.0 ? 1 : 0;
                if (z >= 0.0) bval[i] += sg * z;
            }
        }
        for (std::size_t i = 0; i < n1; ++i) bval[i] *= inv_sqrt_p;

        // c_i = sum_j err_ij relu(w_r.y_j) feeds branch gradients;
        // d_j = sum_i err_ij branch_i feeds trunk gradients.
        for (std::size_t i = 0; i < n1; ++i) {
            double acc = 0.0;
            for (std::size_t j = 0; j < n2; ++j)
                if (act[j] > 0.0) acc += err[i * n2 + j] * tval[j];
            csum[i] = acc;
        }
        double* gw = &g.trunk[r * w.d];
        for (std::size_t j = 0; j < n2; ++j) {
            if (act[j] == 0.0) continue;
            double dj = 0.0;
            for (std::size_t i = 0; i < n1; ++i) dj += err[i * n2 + j] * bval[i];
            const double coef = inv_sqrt_m * dj;
            const double* yj = data.queries[j].data();
            for (std::size_t c = 0; c < w.d; ++c) gw[c] += coef * yj[c];
        }
        for (std::size_t k = 0; k < w.p; ++k) {
            double* gb = &g.branch[(r * w.p + k) * w.q];
            const double base = inv_sqrt_m * inv_sqrt_p * static_cast<double>(w.sign(r, k));
            for (std::size_t i = 0; i < n1; ++i) {
                if (!ubit[k * n1 + i]) continue;
                const double coef = base * csum[i];
                const double* ui = data.inputs[i].data();
                for (std::size_t c = 0; c < w.q; ++c) gb[c] += coef * ui[c];
            }
        }
    }
    return g;
}

inline void require_finite_gradient(const LossGradient& g) {
    for (std::size_t i = 0; i < g.trunk.size(); ++i)
        if (!std::isfinite(g.trunk[i]))
            throw std::runtime_error("gd_step: non-finite trunk gradient at flat index " +
                                     std::to_string(i) + " (value " + format_g17(g.trunk[i]) +
                                     "); the run is numerically broken");
    for (std::size_t i = 0; i < g.branch.size(); ++i)
        if (!std::isfinite(g.branch[i]))
            throw std::runtime_error("gd_step: non-finite branch gradient at flat index " +
                                     std::to_string(i) + " (value " + format_g17(g.branch[i]) +
                                     "); the run is numerically broken");
}

inline void require_trainable(const OperatorWeights& w, const OperatorDataset& data,
                              const char* who) {
    if (w.activation != Activation::Relu)
        throw std::invalid_argument(std::string(who) + ": supervised training uses a ReLU trunk");
    if (w.q != data.q() || w.d != data.d())
        throw std::invalid_argument(std::string(who) + ": weight dimensions do not match dataset");
    if (!data.has_targets())
        throw std::invalid_argument(std::string(who) + ": dataset carries no targets");
}

}  // namespace detail

inline LossGradient loss_gradient(const OperatorWeights& w, const OperatorDataset& data) {
    detail::require_trainable(w, data, "loss_gradient");
    std::vector<double> err = predictions(w, data);
    for (std::size_t s = 0; s < err.size(); ++s) err[s] -= data.targets[s];
    return detail::loss_gradient_from_err(w, data, err);
}

// One full-batch step. All gradients are evaluated at the incoming weights and
// applied simultaneously; signs never move.
inline OperatorWeights gd_step(const OperatorWeights& w, const OperatorDataset& data, double eta) {
    detail::require_trainable(w, data, "gd_step");
    if (eta < 0.0) throw std::invalid_argument("gd_step: learning rate must be nonnegative");
    const LossGradient g = loss_gradient(w, data);
    detail::require_finite_gradient(g);
    OperatorWeights out = w;
    for (std::size_t i = 0; i < out.trunk.size(); ++i) out.trunk[i] -= eta * g.trunk[i];
    for (std::size_t i = 0; i < out.branch.size(); ++i) out.branch[i] -= eta * g.branch[i];
    return out;
}

// I(t): the part of the prediction change one step of training produces beyond
// the first-order term in the weight motion. Component (i,j) is
//   G_b(u_i)(y_j) - G_a(u_i)(y_j) - <dG_a/dw, w_b - w_a> - <dG_a/dwt, wt_b - wt_a>.
inline std::vector<double> residual_term(const OperatorWeights& wa, const OperatorWeights& wb,
                                         const OperatorDataset& data) {
    if (wa.m != wb.m || wa.p != wb.p || wa.q != wb.q || wa.d != wb.d ||
        wa.activation != wb.activation)
        throw std::invalid_argument("residual_term: weight snapshots have different shapes");
    if (wa.signs != wb.signs)
        throw std::invalid_argument("residual_term: sign patterns differ; not the same run");
    if (wa.activation != Activation::Relu)
        throw std::invalid_argument("residual_term: supervised form needs a ReLU trunk");
    if (wa.q != data.q() || wa.d != data.d())
        throw std::invalid_argument("residual_term: weight dimensions do not match dataset");

    const std::size_t n1 = data.n1(), n2 = data.n2();
    std::vector<double> out = predictions(wb, data);
    const std::vector<double> base = predictions(wa, data);
    for (std::size_t s = 0; s < out.size(); ++s) out[s] -= base[s];

    const double inv_sqrt_m = 1.0 / std::sqrt(static_cast<double>(wa.m));
    const double inv_sqrt_p = 1.0 / std::sqrt(static_cast<double>(wa.p));

    std::vector<double> tval(n2), sig(n2), tdot(n2), bval(n1);
    std::vector<double> dw(wa.d), dwt(wa.q);
    for (std::size_t r = 0; r < wa.m; ++r) {
        const double* wra = wa.trunk_at(r);
        const double* wrb = wb.trunk_at(r);
        for (std::size_t c = 0; c < wa.d; ++c) dw[c] = wrb[c] - wra[c];
        for (std::size_t j = 0; j < n2; ++j) {
            tval[j] = detail::dot_n(wra, data.queries[j].data(), wa.d);
            sig[j] = relu(tval[j]);
            tdot[j] = detail::dot_n(dw.data(), data.queries[j].data(), wa.d);
        }
        for (std::size_t i = 0; i < n1; ++i) bval[i] = 0.0;
        for (std::size_t k = 0; k < wa.p; ++k) {
            const double* wta = wa.branch_at(r, k);
            const double* wtb = wb.branch_at(r, k);
            for (std::size_t c = 0; c < wa.q; ++c) dwt[c] = wtb[c] - wta[c];
            const double base_k = inv_sqrt_m * inv_sqrt_p * static_cast<double>(wa.sign(r, k));
            for (std::size_t i = 0; i < n1; ++i) {
                const double z = detail::dot_n(wta, data.inputs[i].data(), wa.q);
                if (z >= 0.0) {
                    bval[i] += static_cast<double>(wa.sign(r, k)) * z;
                    const double ud = detail::dot_n(dwt.data(), data.inputs[i].data(), wa.q);
                    for (std::size_t j = 0; j < n2; ++j)
                        out[i * n2 + j] -= base_k * ud * sig[j];
                }
            }
        }
        for (std::size_t i = 0; i < n1; ++i) bval[i] *= inv_sqrt_p;
        for (std::size_t j = 0; j < n2; ++j) {
            if (tval[j] < 0.0) continue;
            for (std::size_t i = 0; i < n1; ++i)
                out[i * n2 + j] -= inv_sqrt_m * bval[i] * tdot[j];
        }
    }
    return out;
}

// ---------------------------------------------------------------------------
// Training traces.
// ---------------------------------------------------------------------------

enum class TraceKind : std::uint8_t { GradientDescent, GradientFlow };

struct TraceRow {
    long iter = 0;
    double time = 0.0;  // iter for descent, iter*dt for flow; not exported
    double loss = 0.0;
    double res_norm = 0.0;
    double drift_w = 0.0;
    double drift_wt = 0.0;
    double lam_H = 0.0;
    double lam_Ht = 0.0;
    double I_norm = 0.0;  // linearization defect of the step leaving this iterate; 0 on the last row
    double bound = 0.0;   // theoretical envelope on the squared residual norm at this iterate
    double s_norm = 0.0;  // physics-informed runs only: interior residual norm
    double h_norm = 0.0;  // physics-informed runs only: boundary residual norm
};

struct TrainingTrace {
    TraceKind kind = TraceKind::GradientDescent;
    std::vector<TraceRow> rows;

    // Run-level diagnostics, all evaluated at initialization.
    double eta = 0.0;  // step size (dt for flow)
    double delta = 0.05;
    double lam0_H = 0.0;        // lambda_min(H(0))
    double lam0_Ht = 0.0;       // lambda_min(Htilde(0))
    double lambda_hat = 0.0;    // lam0_H + lam0_Ht, the measured rate surrogate
    double lam0_sum = 0.0;      // lambda_min(H(0) + Htilde(0))
    double spec_H0 = 0.0;       // spectral norm of H(0)
    double spec_Ht0 = 0.0;      // spectral norm of Htilde(0)
    double res0_norm2 = 0.0;    // squared residual norm at initialization
    double radius_trunk = 0.0;  // predicted trunk drift scale R'
    double radius_branch = 0.0; // predicted branch drift scale R' / sqrt(p)
    double preact_bound = 0.0;  // predicted trunk preactivation bound B
    double weight_norm_bound = 0.0;  // physics-informed runs only: cap on ||w_r(0)||
    double recursion_radius = 0.0;  // predicted ||I|| / ||residual|| scale

    bool recursion_checked = false;
    double max_recursion_defect = 0.0;  // worst entrywise defect of the one-step identity
};

struct TrainOptions {
    double eta = 0.0;  // <= 0 requests auto: 1 / (|H(0)|_2 + |Htilde(0)|_2)
    long steps = 200;
    long cadence = 10;
    double delta = 0.05;
    bool check_recursion = false;
    double divergence_factor = 10.0;
};

namespace detail {

inline std::pair<double, double> max_drift(const OperatorWeights& now,
                                           const OperatorWeights& init) {
    double dw = 0.0;
    for (std::size_t r = 0; r < now.m; ++r) {
        double s = 0.0;
        for (std::size_t c = 0; c < now.d; ++c) {
            const double diff = now.trunk[r * now.d + c] - init.trunk[r * now.d + c];
            s += diff * diff;
        }
        dw = std::max(dw, s);
    }
    double dwt = 0.0;
    for (std::size_t rk = 0; rk < now.m * now.p; ++rk) {
        double s = 0.0;
        for (std::size_t c = 0; c < now.q; ++c) {
            const double diff = now.branch[rk * now.q + c] - init.branch[rk * now.q + c];
            s += diff * diff;
        }
        dwt = std::max(dwt, s);
    }
    return {std::sqrt(dw), std::sqrt(dwt)};
}

// Shared preamble of train and flow_integrate: spectra at initialization plus
// the drift/defect scales the induction argument predicts.
inline void fill_init_diagnostics(TrainingTrace& trace, const OperatorWeights& w,
                                  const OperatorDataset& data, const BlockGram& h0,
                                  const BlockGram& ht0, double res0_norm2) {
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
    const double n12 = static_cast<double>(data.n1() * data.n2());
    const double res0 = std::sqrt(res0_norm2);
    const double logmd = std::log(m / trace.delta);
    trace.radius_trunk =
        std::sqrt(n12) * res0 * std::sqrt(logmd) / (std::sqrt(m) * trace.lambda_hat);
    trace.radius_branch = trace.radius_trunk / std::sqrt(static_cast<double>(w.p));
    trace.preact_bound =
        2.0 * std::sqrt(std::log(m * static_cast<double>(data.n2()) / trace.delta));
    trace.recursion_radius = trace.eta * n12 * std::sqrt(n12) * res0 * logmd * std::sqrt(logmd) /
                             (std::sqrt(m) * trace.lambda_hat);
}

inline void require_finite_row(const TraceRow& row) {
    if (!(std::isfinite(row.loss) && std::isfinite(row.res_norm) && std::isfinite(row.drift_w) &&
          std::isfinite(row.drift_wt) && std::isfinite(row.I_norm)))
        throw std::runtime_error("training produced a non-finite diagnostic at iteration " +
                                 std::to_string(row.iter));
}

}  // namespace detail

// Full-batch gradient descent with diagnostics at the given cadence (plus the
// final iterate). The weights are trained in place; the returned trace carries
// the measured spectra, drifts, defects, and the envelope curve.
inline TrainingTrace train(OperatorWeights& w, const OperatorDataset& data,
                           const TrainOptions& opt) {
    detail::require_trainable(w, data, "train");
    if (opt.steps < 0) throw std::invalid_argument("train: steps must be nonnegative");
    if (opt.cadence < 1) throw std::invalid_argument("train: cadence must be at least 1");

    const OperatorWeights init = w;
    TrainingTrace trace;
    trace.kind = TraceKind::GradientDescent;
    trace.delta = opt.delta;

    BlockGram h0 = empirical_H(w, data);
    BlockGram ht0 = empirical_Htilde(w, data);
    h0.iteration = 0;
    ht0.iteration = 0;

    std::vector<double> res = residual_vector(w, data);
    const double res0_norm2 = dot(res, res);
    trace.eta = opt.eta > 0.0 ? opt.eta
                              : 1.0 / (spectral_norm_sym(h0.mat) + spectral_norm_sym(ht0.mat));
    detail::fill_init_diagnostics(trace, w, data, h0, ht0, res0_norm2);
    trace.recursion_checked = opt.check_recursion;

    const double res0_norm = std::sqrt(res0_norm2);
    for (long t = 0; t <= opt.steps; ++t) {
        const double rn2 = dot(res, res);
        const double rn = std::sqrt(rn2);
        if (!std::isfinite(rn))
            throw std::runtime_error("train: residual became non-finite at iteration " +
                                     std::to_string(t));
        if (t > 0 && rn > opt.divergence_factor * res0_norm)
            throw std::runtime_error(
                "train: residual norm " + format_g17(rn) + " at iteration " + std::to_string(t) +
                " exceeds " + format_g17(opt.divergence_factor) +
                " times its initial value; the step size is too large for this instance");

        const bool logged = (t % opt.cadence == 0) || t == opt.steps;
        TraceRow row;
        BlockGram ht, htt;
        if (logged) {
            row.iter = t;
            row.time = static_cast<double>(t);
            row.loss = 0.5 * rn2;
            row.res_norm = rn;
            const auto drift = detail::max_drift(w, init);
            row.drift_w = drift.first;
            row.drift_wt = drift.second;
            ht = t == 0 ? h0 : empirical_H(w, data);
            htt = t == 0 ? ht0 : empirical_Htilde(w, data);
            ht.iteration = t;
            htt.iteration = t;
            row.lam_H = min_eigenvalue(ht.mat);
            row.lam_Ht = min_eigenvalue(htt.mat);
            // (1 - 0.9 eta lambda_hat / 2)^t: the linear rate with a 0.9 slack
            // absorbing the finite-width gap between measured and limit spectra.
            row.bound = std::pow(1.0 - 0.45 * trace.eta * trace.lambda_hat,
                                 static_cast<double>(t)) *
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

        OperatorWeights next = gd_step(w, data, trace.eta);
        std::vector<double> res_next = residual_vector(next, data);
        if (logged) {
            const std::vector<double> defect = residual_term(w, next, data);
            row.I_norm = std::sqrt(dot(defect, defect));
            if (opt.check_recursion) {
                // z - G^{t+1} = (I - eta (H + Htilde)) (z - G^t) - I(t), entrywise.
                DenseMatrix k = ht.mat;
                k += htt.mat;
                const std::vector<double> kres = k.matvec(res);
                double worst = 0.0;
                for (std::size_t s = 0; s < res.size(); ++s) {
                    const double rhs = res[s] - trace.eta * kres[s] - defect[s];
                    worst = std::max(worst, std::fabs(res_next[s] - rhs));
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

// Explicit Euler integration of the gradient flow. Each step is a descent step
// of size dt; the envelope is the continuous-time rate at time iter*dt.
inline TrainingTrace flow_integrate(OperatorWeights& w, const OperatorDataset& data,
                                    double duration, double dt, long cadence = 1,
                                    double delta = 0.05) {
    detail::require_trainable(w, data, "flow_integrate");
    if (dt <= 0.0) throw std::invalid_argument("flow_integrate: dt must be positive");
    if (duration < 0.0) throw std::invalid_argument("flow_integrate: duration must be nonnegative");
    if (cadence < 1) throw std::invalid_argument("flow_integrate: cadence must be at least 1");
    const long steps = std::lround(duration / dt);

    const OperatorWeights init = w;
    TrainingTrace trace;
    trace.kind = TraceKind::GradientFlow;
    trace.delta = delta;
    trace.eta = dt;

    BlockGram h0 = empirical_H(w, data);
    BlockGram ht0 = empirical_Htilde(w, data);
    std::vector<double> res = residual_vector(w, data);
    const double res0_norm2 = dot(res, res);
    detail::fill_init_diagnostics(trace, w, data, h0, ht0, res0_norm2);

    for (long t = 0; t <= steps; ++t) {
        const double rn2 = dot(res, res);
        const double rn = std::sqrt(rn2);
        if (!std::isfinite(rn))
            throw std::runtime_error("flow_integrate: residual became non-finite at step " +
                                     std::to_string(t));

        const bool logged = (t % cadence == 0) || t == steps;
        TraceRow row;
        BlockGram ht, htt;
        if (logged) {
            row.iter = t;
            row.time = static_cast<double>(t) * dt;
            row.loss = 0.5 * rn2;
            row.res_norm = rn;
            const auto drift = detail::max_drift(w, init);
            row.drift_w = drift.first;
            row.drift_wt = drift.second;
            ht = t == 0 ? h0 : empirical_H(w, data);
            htt = t == 0 ? ht0 : empirical_Htilde(w, data);
            row.lam_H = min_eigenvalue(ht.mat);
            row.lam_Ht = min_eigenvalue(htt.mat);
            row.bound = std::exp(-0.9 * trace.lambda_hat * row.time) * res0_norm2;
        }

        if (t == steps) {
            if (logged) {
                row.I_norm = 0.0;
                detail::require_finite_row(row);
                trace.rows.push_back(row);
            }
            break;
        }

        OperatorWeights next = gd_step(w, data, dt);
        std::vector<double> res_next = residual_vector(next, data);
        const double rn_next = std::sqrt(dot(res_next, res_next));
        if (rn_next > 10.0 * rn)
            throw std::runtime_error(
                "flow_integrate: residual grew from " + format_g17(rn) + " to " +
                format_g17(rn_next) + " in one step at t = " +
                format_g17(static_cast<double>(t) * dt) + "; reduce dt (try dt/10 = " +
                format_g17(dt / 10.0) + ")");
        if (logged) {
            const std::vector<double> defect = residual_term(w, next, data);
            row.I_norm = std::sqrt(dot(defect, defect));
            detail::require_finite_row(row);
            trace.rows.push_back(row);
        }
        w = std::move(next);
        res = std::move(res_next);
    }
    return trace;
}

// ---------------------------------------------------------------------------
// CSV export.
// ---------------------------------------------------------------------------

inline void write_trace_csv(const TrainingTrace& trace, const std::string& path) {
    std::ofstream out(path, std::ios::binary);
    if (!out) throw std::runtime_error("write_trace_csv: cannot open " + path);
    out << "iter,loss,res_norm,drift_w,drift_wt,lam_H,lam_Ht,I_norm,bound\n";
    for (const TraceRow& row : trace.rows) {
        out << row.iter << ',' << format_g17(row.loss) << ',' << format_g17(row.res_norm) << ','
            << format_g17(row.drift_w) << ',' << format_g17(row.drift_wt) << ','
            << format_g17(row.lam_H) << ',' << format_g17(row.lam_Ht) << ','
            << format_g17(row.I_norm) << ',' << format_g17(row.bound) << '\n';
    }
    if (!out) throw std::runtime_error("write_trace_csv: write failed for " + path);
}

}  // namespace ntklab
