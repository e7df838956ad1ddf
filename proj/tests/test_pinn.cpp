#include <catch2/catch_amalgamated.hpp>

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <fstream>
#include <sstream>
#include <string>
#include <vector>

#include "ntklab/data.hpp"
#include "ntklab/eigen.hpp"
#include "ntklab/kernels.hpp"
#include "ntklab/matrix.hpp"
#include "ntklab/net.hpp"
#include "ntklab/pinn.hpp"
#include "ntklab/rng.hpp"
#include "ntklab/trainer.hpp"

#include "helpers.hpp"

using namespace ntklab;
using Catch::Matchers::ContainsSubstring;

namespace {

// Input functions for physics-informed runs: unit sensors with pairwise
// separation, stream disjoint from weight and problem streams.
OperatorDataset pinn_inputs(std::uint64_t seed, std::size_t n1, std::size_t q) {
    Rng rng(seed, 311);
    OperatorDataset ds;
    ds.inputs = testutil::separated_units(rng, n1, q, 0.6);
    return ds;
}

PdeProblem pinn_problem(std::uint64_t seed, std::size_t spatial_dim, std::size_t n2,
                        std::size_t n3) {
    Rng rng(seed, 401);
    return make_ball_problem(spatial_dim, n2, n3, rng);
}

// Teacher-manufactured (f, g) for the problem, as the convergence tests use.
void add_teacher_problem_data(PdeProblem& prob, std::uint64_t seed, std::size_t q) {
    Rng rng(seed, 555);
    const OperatorWeights teacher = init_weights(32, 4, q, prob.ydim(), rng, Activation::Relu3);
    const std::vector<double> probe = testutil::random_unit(rng, q);
    set_teacher_data(prob, teacher, probe);
}

OperatorWeights pinn_weights(std::uint64_t seed, std::size_t m, std::size_t p, std::size_t q,
                             std::size_t ydim) {
    Rng rng(seed, m);
    return init_weights(m, p, q, ydim, rng, Activation::Relu3);
}

double frob(const DenseMatrix& m) {
    double s = 0.0;
    for (std::size_t r = 0; r < m.rows(); ++r)
        for (std::size_t c = 0; c < m.cols(); ++c) s += m(r, c) * m(r, c);
    return std::sqrt(s);
}

// Single-neuron, single-input instance with hand-checkable residuals:
// trunk (1,0,0), branch (2,0) with sign +1, u = (1,0), so the branch value is
// relu(2) = 2 and G(u)(y) = 2 relu3(y0 + ...) at any query.
struct HandInstance {
    OperatorWeights w;
    PdeProblem prob;
    OperatorDataset data;
};

HandInstance hand_instance() {
    HandInstance h;
    h.w.m = 1;
    h.w.p = 1;
    h.w.q = 2;
    h.w.d = 3;
    h.w.activation = Activation::Relu3;
    h.w.trunk = {1.0, 0.0, 0.0};
    h.w.branch = {2.0, 0.0};
    h.w.signs = {1.0};
    h.prob.spatial_dim = 2;
    h.prob.horizon = 1.0;
    h.prob.interior = {{0.5, 0.2, 0.1}};
    h.prob.boundary = {{0.0, 0.3, 0.4}};
    h.prob.source_values = {0.5};
    h.prob.boundary_values = {0.1};
    h.data.inputs = {{1.0, 0.0}};
    return h;
}

}  // namespace

TEST_CASE("trunk calculus hand values and rejections") {
    // L relu3(w.y) = 3 w0 relu2(z) - 6 |w_s|^2 relu(z) + relu3(z), z = w.y.
    // w = (1,0,0), y = (2,*,*): z = 2, spatial block zero: 3*4 - 0 + 8 = 20.
    CHECK(apply_L_to_trunk({1.0, 0.0, 0.0}, {2.0, 0.3, 0.1}) == Catch::Approx(20.0).margin(1e-12));
    CHECK(apply_L_to_trunk({1.0, 0.0}, {-2.0, 5.0}) == 0.0);

    // Time-only weight, d = 1: L relu3(w0 y0) = 3 w0 (w0 y0)^2 + (w0 y0)^3 at
    // y = (2, 0) equals 12 w0^3 + 8 w0^3 = 20 w0^3, so d/dw0 = 60 w0^2 = 60
    // and d/dw1 = -12 w0 y0 w1 = 0.
    const std::vector<double> g = grad_L_trunk({1.0, 0.0}, {2.0, 0.0});
    CHECK(g[0] == Catch::Approx(60.0).margin(1e-12));
    CHECK(g[1] == 0.0);
    const std::vector<double> gz = grad_L_trunk({1.0, 0.0}, {-2.0, 0.0});
    CHECK(gz[0] == 0.0);
    CHECK(gz[1] == 0.0);

    const std::vector<double> g3 = grad_relu3_trunk({1.0, 0.0}, {2.0, 0.0});
    CHECK(g3[0] == Catch::Approx(24.0).margin(1e-12));
    CHECK(g3[1] == 0.0);

    CHECK_THROWS_AS(apply_L_to_trunk({1.0, 2.0}, {1.0}), std::invalid_argument);
    CHECK_THROWS_AS(grad_L_trunk({}, {}), std::invalid_argument);
    CHECK_THROWS_AS(grad_relu3_trunk({1.0}, {1.0, 2.0}), std::invalid_argument);
}

TEST_CASE("trunk calculus matches finite differences away from kinks") {
    // Oracle: centered differences of y -> relu3(w.y) build the differential
    // operator directly; w-derivatives difference apply_L_to_trunk itself.
    // Points with |w.y| < 0.05 |w| |y| are resampled so every stencil stays
    // well inside one smooth piece (the contract only promises 1e-3 clearance;
    // the margin here is deliberately wider than the stencil width).
    Rng rng(3, 123);
    double worst_l = 0.0, worst_g = 0.0, worst_r = 0.0;
    int found = 0;
    while (found < 100) {
        const std::size_t n = 2 + (rng.next_u64() % 3);
        std::vector<double> w(n), y(n);
        for (double& c : w) c = rng.gaussian();
        for (double& c : y) c = rng.gaussian();
        double z = 0.0;
        for (std::size_t i = 0; i < n; ++i) z += w[i] * y[i];
        if (std::fabs(z) < 0.05 * norm2(w) * norm2(y)) continue;
        ++found;

        auto value_at = [&](const std::vector<double>& yy) {
            double zz = 0.0;
            for (std::size_t i = 0; i < n; ++i) zz += w[i] * yy[i];
            return relu3(zz);
        };
        const double h = 1e-4;
        std::vector<double> yp = y, ym = y;
        yp[0] += h;
        ym[0] -= h;
        double lfd = (value_at(yp) - value_at(ym)) / (2 * h);
        for (std::size_t c = 1; c < n; ++c) {
            yp = y;
            ym = y;
            yp[c] += h;
            ym[c] -= h;
            lfd -= (value_at(yp) - 2 * value_at(y) + value_at(ym)) / (h * h);
        }
        lfd += value_at(y);
        const double lex = apply_L_to_trunk(w, y);
        worst_l = std::max(worst_l, std::fabs(lfd - lex) / std::max(1.0, std::fabs(lex)));

        const double hw = 1e-5;
        const std::vector<double> gl = grad_L_trunk(w, y);
        const std::vector<double> gr = grad_relu3_trunk(w, y);
        for (std::size_t c = 0; c < n; ++c) {
            std::vector<double> wp = w, wm = w;
            wp[c] += hw;
            wm[c] -= hw;
            const double gfd = (apply_L_to_trunk(wp, y) - apply_L_to_trunk(wm, y)) / (2 * hw);
            worst_g = std::max(worst_g, std::fabs(gfd - gl[c]) / std::max(1.0, std::fabs(gl[c])));
            auto trunk_at = [&](const std::vector<double>& ww) {
                double zz = 0.0;
                for (std::size_t i = 0; i < n; ++i) zz += ww[i] * y[i];
                return relu3(zz);
            };
            const double rfd = (trunk_at(wp) - trunk_at(wm)) / (2 * hw);
            worst_r = std::max(worst_r, std::fabs(rfd - gr[c]) / std::max(1.0, std::fabs(gr[c])));
        }
    }
    CHECK(worst_l < 1e-4);
    CHECK(worst_g < 1e-5);
    CHECK(worst_r < 1e-5);
}

TEST_CASE("problem sampler geometry and validation") {
    Rng rng(5, 401);
    const PdeProblem prob = make_ball_problem(2, 4, 4, rng);
    REQUIRE(prob.n2() == 4);
    REQUIRE(prob.n3() == 4);
    REQUIRE(prob.ydim() == 3);
    CHECK_NOTHROW(validate_pde_problem(prob));
    for (const auto& y : prob.interior) {
        CHECK(y[0] > 0.0);
        CHECK(y[0] < 1.0);
        CHECK(y[1] * y[1] + y[2] * y[2] < 1.0);
        CHECK(norm2(y) >= 0.3);
    }
    // First half of the boundary sits on the initial face, the rest on the
    // lateral face.
    for (std::size_t j = 0; j < 2; ++j) {
        CHECK(prob.boundary[j][0] == 0.0);
        CHECK(prob.boundary[j][1] * prob.boundary[j][1] +
                  prob.boundary[j][2] * prob.boundary[j][2] <
              1.0);
    }
    for (std::size_t j = 2; j < 4; ++j) {
        const double r = std::sqrt(prob.boundary[j][1] * prob.boundary[j][1] +
                                   prob.boundary[j][2] * prob.boundary[j][2]);
        CHECK(std::fabs(r - 1.0) <= 1e-9);
        CHECK(prob.boundary[j][0] >= 0.0);
        CHECK(prob.boundary[j][0] <= 1.0);
    }

    Rng rng2(5, 401);
    const PdeProblem again = make_ball_problem(2, 4, 4, rng2);
    CHECK(again.interior == prob.interior);
    CHECK(again.boundary == prob.boundary);

    Rng rng3(6, 401);
    CHECK_THROWS_AS(make_ball_problem(0, 4, 4, rng3), std::invalid_argument);
    CHECK_THROWS_AS(make_ball_problem(2, 0, 4, rng3), std::invalid_argument);
    CHECK_THROWS_AS(make_ball_problem(2, 4, 4, rng3, -1.0), std::invalid_argument);

    PdeProblem bad = prob;
    bad.interior[0][0] = 0.0;  // on the initial face, not strictly interior
    CHECK_THROWS_WITH(validate_pde_problem(bad), ContainsSubstring("interior"));
    bad = prob;
    bad.interior[0][1] = 2.0;  // outside the unit ball
    CHECK_THROWS_WITH(validate_pde_problem(bad), ContainsSubstring("interior"));
    bad = prob;
    bad.boundary[0] = {0.5, 0.2, 0.1};  // strictly inside the cylinder
    CHECK_THROWS_WITH(validate_pde_problem(bad), ContainsSubstring("boundary"));
    bad = prob;
    for (std::size_t c = 0; c < 3; ++c) bad.interior[1][c] = 0.5 * bad.interior[0][c];
    CHECK_THROWS_WITH(validate_pde_problem(bad), ContainsSubstring("parallel"));
    bad = prob;
    bad.source_values = {1.0, 2.0};  // wrong length
    CHECK_THROWS_WITH(validate_pde_problem(bad), ContainsSubstring("source"));
}

TEST_CASE("manufactured data fills consistent sources") {
    Rng rng(9, 401);
    PdeProblem prob = make_ball_problem(2, 4, 4, rng);

    SECTION("closed form") {
        // u* = exp(a t + b.x) has L u* = (a - |b|^2 + 1) u*.
        const double a = 0.5;
        const std::vector<double> b = {1.0, -2.0};
        CHECK(exp_solution(a, b, {0.2, 0.3, 0.1}) ==
              Catch::Approx(std::exp(0.5 * 0.2 + 0.3 - 0.2)).epsilon(1e-15));
        set_closed_form_data(prob, a, b);
        REQUIRE(prob.source_values.size() == 4);
        REQUIRE(prob.boundary_values.size() == 4);
        for (std::size_t j = 0; j < 4; ++j) {
            CHECK(prob.source_values[j] ==
                  Catch::Approx(-3.5 * exp_solution(a, b, prob.interior[j])).epsilon(1e-14));
            CHECK(prob.boundary_values[j] ==
                  Catch::Approx(exp_solution(a, b, prob.boundary[j])).epsilon(1e-14));
        }
        CHECK_THROWS_AS(set_closed_form_data(prob, a, {1.0}), std::invalid_argument);
        CHECK_THROWS_AS(exp_solution(a, b, {1.0, 2.0}), std::invalid_argument);
    }

    SECTION("teacher network, cross-checked by finite differences") {
        Rng trng(9, 555);
        const OperatorWeights teacher = init_weights(32, 4, 16, 3, trng, Activation::Relu3);
        const std::vector<double> probe = testutil::random_unit(trng, 16);
        set_teacher_data(prob, teacher, probe);
        REQUIRE(prob.source_values.size() == 4);
        REQUIRE(prob.boundary_values.size() == 4);
        for (std::size_t j = 0; j < 4; ++j)
            CHECK(prob.boundary_values[j] ==
                  Catch::Approx(forward(teacher, probe, prob.boundary[j])).margin(1e-15));

        // f at each interior point must equal the differential operator applied
        // to y -> G_teacher(probe)(y), evaluated by centered differences. Skip
        // points where some neuron sits near its kink.
        const double h = 1e-4;
        for (std::size_t j = 0; j < 4; ++j) {
            const auto& y = prob.interior[j];
            bool near_kink = false;
            for (std::size_t r = 0; r < teacher.m; ++r) {
                const double z = detail::dot_n(teacher.trunk_at(r), y.data(), 3);
                std::vector<double> wr(teacher.trunk_at(r), teacher.trunk_at(r) + 3);
                if (std::fabs(z) < 1e-3 * norm2(wr) * norm2(y)) near_kink = true;
            }
            if (near_kink) continue;
            auto val = [&](const std::vector<double>& yy) { return forward(teacher, probe, yy); };
            std::vector<double> yp = y, ym = y;
            yp[0] += h;
            ym[0] -= h;
            double lfd = (val(yp) - val(ym)) / (2 * h);
            for (std::size_t c = 1; c < 3; ++c) {
                yp = y;
                ym = y;
                yp[c] += h;
                ym[c] -= h;
                lfd -= (val(yp) - 2 * val(y) + val(ym)) / (h * h);
            }
            lfd += val(y);
            CHECK(std::fabs(lfd - prob.source_values[j]) <
                  1e-4 * std::max(1.0, std::fabs(prob.source_values[j])));
        }

        Rng bad_rng(1, 1);
        const OperatorWeights relu_teacher = init_weights(8, 4, 16, 3, bad_rng, Activation::Relu);
        CHECK_THROWS_AS(set_teacher_data(prob, relu_teacher, probe), std::invalid_argument);
        const OperatorWeights wrong_dim = init_weights(8, 4, 16, 5, bad_rng, Activation::Relu3);
        CHECK_THROWS_AS(set_teacher_data(prob, wrong_dim, probe), std::invalid_argument);
    }
}

TEST_CASE("residual vector layout and hand values") {
    const HandInstance h = hand_instance();
    const PinnResidualVector res = pinn_residuals(h.w, h.prob, h.data);
    REQUIRE(res.dim() == 2);
    REQUIRE(res.values.size() == 2);
    // Interior: z = w.y = 0.5, L relu3 = 3*0.25 - 0 + 0.125 = 0.875, branch 2:
    // s = (2*0.875 - 0.5)/sqrt(1) = 1.25. Boundary: z = 0, G = 0, h = -0.1.
    CHECK(res.values[res.interior_index(0, 0)] == Catch::Approx(1.25).margin(1e-15));
    CHECK(res.values[res.boundary_index(0, 0)] == Catch::Approx(-0.1).margin(1e-15));
    CHECK(res.loss() == Catch::Approx(1.25 * 1.25 + 0.01).margin(1e-15));
    CHECK(res.interior_norm() == Catch::Approx(1.25).margin(1e-15));
    CHECK(res.boundary_norm() == Catch::Approx(0.1).margin(1e-15));

    OperatorWeights relu_w = h.w;
    relu_w.activation = Activation::Relu;
    CHECK_THROWS_WITH(pinn_residuals(relu_w, h.prob, h.data), ContainsSubstring("cubed trunk"));
    OperatorWeights short_w = h.w;
    short_w.d = 2;
    short_w.trunk = {1.0, 0.0};
    CHECK_THROWS_AS(pinn_residuals(short_w, h.prob, h.data), std::invalid_argument);
    PdeProblem no_data = h.prob;
    no_data.source_values.clear();
    CHECK_THROWS_WITH(pinn_residuals(h.w, no_data, h.data), ContainsSubstring("data"));
    OperatorDataset bad_inputs = h.data;
    bad_inputs.inputs[0] = {1.0, 0.0, 0.0};
    CHECK_THROWS_AS(pinn_residuals(h.w, h.prob, bad_inputs), std::invalid_argument);
}

TEST_CASE("loss identity against direct re-summation") {
    PdeProblem prob = pinn_problem(21, 2, 4, 4);
    add_teacher_problem_data(prob, 21, 16);
    const OperatorDataset data = pinn_inputs(21, 4, 16);
    const OperatorWeights w = pinn_weights(21, 64, 16, 16, 3);
    const PinnResidualVector res = pinn_residuals(w, prob, data);

    // Independent path: per-sample loops with branch_value and per-point trunk
    // evaluation, i-major accumulation instead of neuron-major.
    const double inv_sqrt_m = 1.0 / std::sqrt(64.0);
    double direct = 0.0;
    for (std::size_t i = 0; i < 4; ++i) {
        for (std::size_t j = 0; j < 4; ++j) {
            double acc = 0.0;
            for (std::size_t r = 0; r < w.m; ++r) {
                std::vector<double> wr(w.trunk_at(r), w.trunk_at(r) + w.d);
                acc += branch_value(w, r, data.inputs[i]) *
                       apply_L_to_trunk(wr, prob.interior[j]);
            }
            const double s = (acc * inv_sqrt_m - prob.source_values[j]) / 2.0;
            direct += s * s;
        }
        for (std::size_t j = 0; j < 4; ++j) {
            const double hv =
                (forward(w, data.inputs[i], prob.boundary[j]) - prob.boundary_values[j]) / 2.0;
            direct += hv * hv;
        }
    }
    CHECK(std::fabs(res.loss() - direct) <= 1e-12 * std::max(1.0, res.loss()));

    const double split = res.interior_norm() * res.interior_norm() +
                         res.boundary_norm() * res.boundary_norm();
    CHECK(std::fabs(res.loss() - split) <= 1e-12 * std::max(1.0, res.loss()));
}

TEST_CASE("manufactured exact fit gives exactly zero residuals") {
    // With n2 = n3 = 4 the normalizations are exact powers of two, so data
    // copied from the network's own image reproduces bitwise zero residuals.
    PdeProblem prob = pinn_problem(31, 2, 4, 4);
    const OperatorDataset data = pinn_inputs(31, 1, 16);
    const OperatorWeights w = pinn_weights(31, 32, 8, 16, 3);

    prob.source_values.assign(4, 0.0);
    prob.boundary_values.assign(4, 0.0);
    const PinnResidualVector probe = pinn_residuals(w, prob, data);
    for (std::size_t j = 0; j < 4; ++j) {
        prob.source_values[j] = probe.values[probe.interior_index(0, j)] * 2.0;
        prob.boundary_values[j] = probe.values[probe.boundary_index(0, j)] * 2.0;
    }

    const PinnResidualVector res = pinn_residuals(w, prob, data);
    for (const double v : res.values) CHECK(v == 0.0);
    CHECK(res.loss() == 0.0);

    // Zero residual means zero gradient: a positive step leaves every weight
    // bit untouched.
    const OperatorWeights stepped = pinn_gd_step(w, prob, data, 0.3);
    CHECK(stepped.trunk == w.trunk);
    CHECK(stepped.branch == w.branch);
    CHECK_THROWS_AS(pinn_gd_step(w, prob, data, -0.1), std::invalid_argument);
}

TEST_CASE("gram matrices are symmetric, PSD, and correctly blocked") {
    PdeProblem prob = pinn_problem(41, 2, 3, 2);
    add_teacher_problem_data(prob, 41, 8);
    const OperatorDataset data = pinn_inputs(41, 3, 8);
    const OperatorWeights w = pinn_weights(41, 64, 8, 8, 3);

    const auto [h, ht] = pinn_gram(w, prob, data);
    REQUIRE(h.n1 == 3);
    REQUIRE(h.block == 5);
    REQUIRE(h.dim() == 15);
    REQUIRE(ht.block == 5);
    CHECK(h.provenance == GramProvenance::Empirical);
    CHECK(h.iteration == -1);

    double asym = 0.0;
    for (std::size_t a = 0; a < 15; ++a)
        for (std::size_t b = 0; b < 15; ++b) {
            asym = std::max(asym, std::fabs(h.mat(a, b) - h.mat(b, a)));
            asym = std::max(asym, std::fabs(ht.mat(a, b) - ht.mat(b, a)));
        }
    CHECK(asym <= 1e-12);
    CHECK(min_eigenvalue(h.mat) >= -1e-9 * spectral_norm_sym(h.mat));
    CHECK(min_eigenvalue(ht.mat) >= -1e-9 * spectral_norm_sym(ht.mat));

    OperatorWeights relu_w = w;
    relu_w.activation = Activation::Relu;
    CHECK_THROWS_AS(pinn_gram(relu_w, prob, data), std::invalid_argument);
}

TEST_CASE("gram equals the explicit Jacobian stack") {
    PdeProblem prob = pinn_problem(51, 2, 2, 2);
    add_teacher_problem_data(prob, 51, 5);
    const OperatorDataset data = pinn_inputs(51, 3, 5);
    const OperatorWeights w = pinn_weights(51, 6, 3, 5, 3);
    const std::size_t n1 = 3, block = 4, dim = n1 * block;

    // Row (i,s) of the residual Jacobian, assembled sample by sample from the
    // library's per-neuron gradients and branch values.
    const double ism = 1.0 / std::sqrt(6.0);
    const double isp = 1.0 / std::sqrt(3.0);
    const double a2 = 1.0 / std::sqrt(2.0), a3 = 1.0 / std::sqrt(2.0);
    DenseMatrix jw(dim, w.m * w.d), jwt(dim, w.m * w.p * w.q);
    for (std::size_t i = 0; i < n1; ++i)
        for (std::size_t s = 0; s < block; ++s) {
            const std::size_t row = i * block + s;
            const bool interior = s < 2;
            const std::vector<double>& y = interior ? prob.interior[s] : prob.boundary[s - 2];
            const double norm = interior ? a2 : a3;
            for (std::size_t r = 0; r < w.m; ++r) {
                std::vector<double> wr(w.trunk_at(r), w.trunk_at(r) + w.d);
                const std::vector<double> phi =
                    interior ? grad_L_trunk(wr, y) : grad_relu3_trunk(wr, y);
                const double b = branch_value(w, r, data.inputs[i]);
                for (std::size_t c = 0; c < w.d; ++c)
                    jw(row, r * w.d + c) = ism * b * norm * phi[c];
                const double cval =
                    norm * (interior ? apply_L_to_trunk(wr, y) : relu3(dot(wr, y)));
                for (std::size_t k = 0; k < w.p; ++k) {
                    const double z = detail::dot_n(w.branch_at(r, k), data.inputs[i].data(), w.q);
                    if (z < 0.0) continue;
                    const double coef = ism * isp * w.sign(r, k) * cval;
                    for (std::size_t c = 0; c < w.q; ++c)
                        jwt(row, (r * w.p + k) * w.q + c) = coef * data.inputs[i][c];
                }
            }
        }

    const auto [h, ht] = pinn_gram(w, prob, data);
    double worst_h = 0.0, worst_ht = 0.0;
    for (std::size_t a = 0; a < dim; ++a)
        for (std::size_t b = 0; b < dim; ++b) {
            double sw = 0.0;
            for (std::size_t c = 0; c < w.m * w.d; ++c) sw += jw(a, c) * jw(b, c);
            worst_h = std::max(worst_h, std::fabs(sw - h.mat(a, b)));
            double st = 0.0;
            for (std::size_t c = 0; c < w.m * w.p * w.q; ++c) st += jwt(a, c) * jwt(b, c);
            worst_ht = std::max(worst_ht, std::fabs(st - ht.mat(a, b)));
        }
    CHECK(worst_h <= 1e-10);
    CHECK(worst_ht <= 1e-10);

    // Close the chain: spot-check Jacobian entries against finite differences
    // of the residual map itself, skipping coordinates whose preactivation
    // sits near a kink.
    const PinnResidualVector base = pinn_residuals(w, prob, data);
    const double h_fd = 1e-6;
    int checked = 0;
    for (std::size_t r = 0; r < w.m && checked < 8; ++r) {
        std::vector<double> wr(w.trunk_at(r), w.trunk_at(r) + w.d);
        bool safe = true;
        for (const auto& y : prob.interior)
            if (std::fabs(dot(wr, y)) < 1e-3 * norm2(wr) * norm2(y)) safe = false;
        for (const auto& y : prob.boundary)
            if (std::fabs(dot(wr, y)) < 1e-3 * norm2(wr) * norm2(y)) safe = false;
        if (!safe) continue;
        ++checked;
        OperatorWeights wp = w, wm = w;
        wp.trunk[r * w.d] += h_fd;
        wm.trunk[r * w.d] -= h_fd;
        const PinnResidualVector rp = pinn_residuals(wp, prob, data);
        const PinnResidualVector rm = pinn_residuals(wm, prob, data);
        for (std::size_t row = 0; row < dim; ++row) {
            const double fd = (rp.values[row] - rm.values[row]) / (2 * h_fd);
            CHECK(std::fabs(fd - jw(row, r * w.d)) <=
                  1e-4 * std::max(1.0, std::fabs(jw(row, r * w.d))));
        }
    }
    REQUIRE(checked > 0);
}

TEST_CASE("gram approaches the Monte Carlo width limit") {
    // Fixed geometry; factor entries estimated with 4e6 samples so the
    // sampling floor sits well below the m = 4096 finite-width gap. Medians
    // over 7 seeds tame the heavy-tailed neuron sums.
    PdeProblem prob = pinn_problem(7, 2, 3, 2);
    prob.set_source([](const std::vector<double>&) { return 0.0; });
    prob.set_boundary_data([](const std::vector<double>&) { return 0.0; });
    const OperatorDataset data = pinn_inputs(7, 3, 16);

    Rng mcr(11, 99);
    const PinnLimit lim = pinn_infinite_width_mc(prob, data, 4000000, mcr);
    REQUIRE(lim.H.provenance == GramProvenance::MonteCarlo);
    REQUIRE(lim.H.dim() == 15);
    for (std::size_t a = 0; a < 15; ++a) {
        CHECK(lim.H.mat(a, a) > 0.0);
        CHECK(lim.Htilde.mat(a, a) > 0.0);
    }
    const double fh = frob(lim.H.mat), fht = frob(lim.Htilde.mat);

    std::vector<double> lx, ly_h, ly_ht;
    for (const std::size_t m : {256u, 512u, 1024u, 2048u, 4096u}) {
        std::vector<double> rel_h, rel_ht;
        for (int s = 0; s < 7; ++s) {
            const OperatorWeights w = pinn_weights(100 + s, m, 16, 16, 3);
            const auto [h, ht] = pinn_gram(w, prob, data);
            double dh = 0.0, dt = 0.0;
            for (std::size_t a = 0; a < 15; ++a)
                for (std::size_t b = 0; b < 15; ++b) {
                    const double eh = h.mat(a, b) - lim.H.mat(a, b);
                    const double et = ht.mat(a, b) - lim.Htilde.mat(a, b);
                    dh += eh * eh;
                    dt += et * et;
                }
            rel_h.push_back(std::sqrt(dh) / fh);
            rel_ht.push_back(std::sqrt(dt) / fht);
        }
        std::sort(rel_h.begin(), rel_h.end());
        std::sort(rel_ht.begin(), rel_ht.end());
        lx.push_back(std::log(static_cast<double>(m)));
        ly_h.push_back(std::log(rel_h[3]));
        ly_ht.push_back(std::log(rel_ht[3]));
    }
    const double slope_h = testutil::ls_slope(lx, ly_h);
    const double slope_ht = testutil::ls_slope(lx, ly_ht);
    INFO("H slope " << slope_h << ", Htilde slope " << slope_ht);
    CHECK(slope_h > -0.7);
    CHECK(slope_h < -0.3);
    CHECK(slope_ht > -0.7);
    CHECK(slope_ht < -0.3);

    // The positive-definiteness hypothesis, checked on the empirical side
    // where no sampling noise interferes.
    for (const std::size_t m : {256u, 1024u, 4096u}) {
        const OperatorWeights w = pinn_weights(100, m, 16, 16, 3);
        const auto [h, ht] = pinn_gram(w, prob, data);
        CHECK(min_eigenvalue(h.mat) > 0.0);
        CHECK(min_eigenvalue(ht.mat) > 0.0);
    }

    Rng few(1, 1);
    CHECK_THROWS_AS(pinn_infinite_width_mc(prob, data, 100, few), std::invalid_argument);
}

TEST_CASE("one-step expansion reproduces the residual recursion") {
    PdeProblem prob = pinn_problem(61, 2, 3, 2);
    add_teacher_problem_data(prob, 61, 8);
    const OperatorDataset data = pinn_inputs(61, 3, 8);
    OperatorWeights w = pinn_weights(61, 512, 8, 8, 3);

    SECTION("no motion, no defect") {
        const std::vector<double> i0 = pinn_residual_term(w, w, prob, data);
        for (const double v : i0) CHECK(v == 0.0);
        OperatorWeights flipped = w;
        flipped.signs[0] = -flipped.signs[0];
        CHECK_THROWS_WITH(pinn_residual_term(w, flipped, prob, data),
                          ContainsSubstring("sign"));
        OperatorWeights other = pinn_weights(62, 256, 8, 8, 3);
        CHECK_THROWS_WITH(pinn_residual_term(w, other, prob, data),
                          ContainsSubstring("shapes"));
    }

    SECTION("entrywise identity over twenty steps") {
        // rho^{t+1} = (I - eta (H + Htilde)) rho^t + I(t) must close to 1e-8
        // with every piece evaluated independently at the current iterate.
        auto [h0, ht0] = pinn_gram(w, prob, data);
        const double eta =
            1.0 / (spectral_norm_sym(h0.mat) + spectral_norm_sym(ht0.mat));
        double worst = 0.0, max_defect = 0.0;
        for (int t = 0; t < 20; ++t) {
            const auto [h, ht] = pinn_gram(w, prob, data);
            const PinnResidualVector res = pinn_residuals(w, prob, data);
            const OperatorWeights next = pinn_gd_step(w, prob, data, eta);
            const PinnResidualVector res_next = pinn_residuals(next, prob, data);
            const std::vector<double> defect = pinn_residual_term(w, next, prob, data);
            DenseMatrix k = h.mat;
            k += ht.mat;
            const std::vector<double> kres = k.matvec(res.values);
            for (std::size_t s = 0; s < res.values.size(); ++s) {
                const double rhs = res.values[s] - eta * kres[s] + defect[s];
                worst = std::max(worst, std::fabs(res_next.values[s] - rhs));
            }
            max_defect = std::max(max_defect, norm2(defect));
            w = next;
        }
        INFO("worst recursion gap " << worst);
        CHECK(worst <= 1e-8);
        CHECK(worst > 0.0);
        CHECK(max_defect > 0.0);
    }

    SECTION("training loop records the same identity") {
        OperatorWeights w2 = pinn_weights(63, 256, 8, 8, 3);
        TrainOptions opt;
        opt.steps = 30;
        opt.cadence = 1;
        opt.check_recursion = true;
        const TrainingTrace trace = pinn_train(w2, prob, data, opt);
        CHECK(trace.recursion_checked);
        CHECK(trace.max_recursion_defect <= 1e-8);
        CHECK(trace.max_recursion_defect > 0.0);
    }
}

TEST_CASE("training contracts the residual under the rate envelope") {
    // Width 4096 at the default geometry; the envelope uses the measured
    // lambda_hat with the 0.9 slack, and the run must shed at least three
    // orders of magnitude of squared residual within 200 steps.
    PdeProblem prob = pinn_problem(1, 2, 4, 4);
    add_teacher_problem_data(prob, 1, 16);
    const OperatorDataset data = pinn_inputs(1, 4, 16);
    OperatorWeights w = pinn_weights(1, 4096, 16, 16, 3);

    TrainOptions opt;
    opt.steps = 200;
    opt.cadence = 10;
    opt.check_recursion = true;
    const TrainingTrace trace = pinn_train(w, prob, data, opt);

    REQUIRE(trace.rows.size() == 21);
    CHECK(trace.eta == 1.0 / (trace.spec_H0 + trace.spec_Ht0));
    CHECK(trace.lambda_hat > 0.0);
    CHECK(trace.max_recursion_defect <= 1e-8);

    long prev = -1;
    for (const TraceRow& row : trace.rows) {
        CHECK(row.iter > prev);
        prev = row.iter;
        CHECK(row.loss <= row.bound * (1.0 + 1e-12));
        CHECK(std::fabs(row.loss - row.res_norm * row.res_norm) <= 1e-12 * row.loss);
        const double split = row.s_norm * row.s_norm + row.h_norm * row.h_norm;
        CHECK(std::fabs(row.loss - split) <= 1e-12 * std::max(1.0, row.loss));
        CHECK(row.lam_H > 0.0);
        CHECK(row.lam_Ht > 0.0);
    }
    CHECK(trace.rows.back().loss <= 1e-3 * trace.res0_norm2);

    // Measured drift never leaves the predicted radii (loose at this width,
    // but the comparison is the contract).
    CHECK(trace.rows.back().drift_w <= trace.radius_trunk);
    CHECK(trace.rows.back().drift_wt <= trace.radius_branch);
    CHECK(trace.radius_trunk > 0.0);
    CHECK(trace.radius_branch > 0.0);
    CHECK(trace.weight_norm_bound > 0.0);
    CHECK(trace.preact_bound > 0.0);
    CHECK(trace.recursion_radius > 0.0);
}

TEST_CASE("training edge cases") {
    PdeProblem prob = pinn_problem(71, 2, 3, 2);
    add_teacher_problem_data(prob, 71, 8);
    const OperatorDataset data = pinn_inputs(71, 2, 8);

    SECTION("zero steps gives a single diagnostic row") {
        OperatorWeights w = pinn_weights(71, 64, 8, 8, 3);
        TrainOptions opt;
        opt.steps = 0;
        const TrainingTrace trace = pinn_train(w, prob, data, opt);
        REQUIRE(trace.rows.size() == 1);
        CHECK(trace.rows[0].iter == 0);
        CHECK(trace.rows[0].I_norm == 0.0);
        CHECK(trace.rows[0].loss == trace.res0_norm2);
        CHECK(trace.rows[0].bound == trace.res0_norm2);
    }

    SECTION("cadence beyond the horizon still logs first and last") {
        OperatorWeights w = pinn_weights(72, 64, 8, 8, 3);
        TrainOptions opt;
        opt.steps = 7;
        opt.cadence = 100;
        const TrainingTrace trace = pinn_train(w, prob, data, opt);
        REQUIRE(trace.rows.size() == 2);
        CHECK(trace.rows[0].iter == 0);
        CHECK(trace.rows[1].iter == 7);
    }

    SECTION("bad options and missing data are rejected") {
        OperatorWeights w = pinn_weights(73, 64, 8, 8, 3);
        TrainOptions opt;
        opt.steps = -1;
        CHECK_THROWS_AS(pinn_train(w, prob, data, opt), std::invalid_argument);
        opt.steps = 1;
        opt.cadence = 0;
        CHECK_THROWS_AS(pinn_train(w, prob, data, opt), std::invalid_argument);
        PdeProblem empty = prob;
        empty.source_values.clear();
        TrainOptions ok;
        CHECK_THROWS_AS(pinn_train(w, empty, data, ok), std::invalid_argument);
    }

    SECTION("a wild step size trips the divergence guard") {
        // Hand-built overshoot: f = 10 makes the interior residual negative,
        // so the step grows the preactivation and the cubed trunk explodes.
        HandInstance h = hand_instance();
        h.prob.source_values = {10.0};
        TrainOptions opt;
        opt.eta = 10.0;
        opt.steps = 5;
        CHECK_THROWS_WITH(pinn_train(h.w, h.prob, h.data, opt),
                          ContainsSubstring("step size is too large"));
    }
}

TEST_CASE("defect ratio and initial residual scale with width") {
    PdeProblem prob = pinn_problem(7, 2, 3, 2);
    add_teacher_problem_data(prob, 7, 16);
    const OperatorDataset data = pinn_inputs(7, 3, 16);

    SECTION("defect-to-residual ratio shrinks like the width root") {
        std::vector<double> lx, ly;
        for (const std::size_t m : {256u, 512u, 1024u, 2048u, 4096u}) {
            double acc = 0.0;
            const int seeds = 3;
            for (int s = 0; s < seeds; ++s) {
                OperatorWeights w = pinn_weights(40 + s, m, 16, 16, 3);
                const auto [h, ht] = pinn_gram(w, prob, data);
                const double eta =
                    1.0 / (spectral_norm_sym(h.mat) + spectral_norm_sym(ht.mat));
                double run = 0.0;
                for (int t = 0; t < 25; ++t) {
                    const PinnResidualVector res = pinn_residuals(w, prob, data);
                    OperatorWeights next = pinn_gd_step(w, prob, data, eta);
                    const std::vector<double> defect =
                        pinn_residual_term(w, next, prob, data);
                    run += norm2(defect) / std::sqrt(res.loss());
                    w = std::move(next);
                }
                acc += run / 25.0;
            }
            lx.push_back(std::log(static_cast<double>(m)));
            ly.push_back(std::log(acc / seeds));
        }
        const double slope = testutil::ls_slope(lx, ly);
        INFO("defect ratio slope " << slope);
        CHECK(slope > -0.7);
        CHECK(slope < -0.3);
    }

    SECTION("initial residual scale is stable across the sweep") {
        // Median of |rho0|^2 / (n1 (d+1)) over nine seeds per width; the
        // medians across widths must stay within a factor of three.
        double lo = 1e300, hi = 0.0;
        for (const std::size_t m : {256u, 512u, 1024u, 2048u, 4096u, 8192u}) {
            std::vector<double> vals;
            for (int s = 0; s < 9; ++s) {
                const OperatorWeights w = pinn_weights(700 + s, m, 16, 16, 3);
                const PinnResidualVector res = pinn_residuals(w, prob, data);
                vals.push_back(res.loss() / (3.0 * 3.0));
            }
            std::sort(vals.begin(), vals.end());
            lo = std::min(lo, vals[4]);
            hi = std::max(hi, vals[4]);
        }
        INFO("median variation factor " << hi / lo);
        CHECK(hi / lo < 3.0);
    }
}

TEST_CASE("trace CSV export with residual split columns") {
    PdeProblem prob = pinn_problem(81, 2, 3, 2);
    add_teacher_problem_data(prob, 81, 8);
    const OperatorDataset data = pinn_inputs(81, 2, 8);
    OperatorWeights w = pinn_weights(81, 64, 8, 8, 3);
    TrainOptions opt;
    opt.steps = 20;
    opt.cadence = 5;
    const TrainingTrace trace = pinn_train(w, prob, data, opt);

    const std::string path = "pinn_trace_test_tmp.csv";
    write_pinn_trace_csv(trace, path);
    std::ifstream in(path);
    REQUIRE(in.good());
    std::string line;
    REQUIRE(std::getline(in, line));
    CHECK(line == "iter,loss,res_norm,drift_w,drift_wt,lam_H,lam_Ht,I_norm,bound,s_norm,h_norm");
    std::size_t rows = 0;
    while (std::getline(in, line)) {
        std::vector<std::string> fields;
        std::stringstream ss(line);
        std::string field;
        while (std::getline(ss, field, ',')) fields.push_back(field);
        REQUIRE(fields.size() == 11);
        CHECK(std::stod(fields[1]) == trace.rows[rows].loss);
        CHECK(std::stod(fields[9]) == trace.rows[rows].s_norm);
        CHECK(std::stod(fields[10]) == trace.rows[rows].h_norm);
        ++rows;
    }
    CHECK(rows == trace.rows.size());
    std::remove(path.c_str());
}
