#pragma once

#include <cmath>
#include <stdexcept>
#include <vector>

#include "ntklab/data.hpp"
#include "ntklab/net.hpp"
#include "ntklab/rng.hpp"

namespace testutil {

inline std::vector<double> random_unit(ntklab::Rng& rng, std::size_t dim) {
    std::vector<double> v = ntklab::sample_gaussian_vector(rng, dim);
    const double n = ntklab::norm2(v);
    for (double& x : v) x /= n;
    return v;
}

// Unit-norm samples with pairwise |cos| bounded away from 1, so the analytic
// limit kernels are strictly positive definite. Greedy rejection can paint
// itself into a corner in low dimension, so exhausted attempts restart the
// whole draw instead of spinning on the last point.
inline std::vector<std::vector<double>> separated_units(ntklab::Rng& rng, std::size_t count,
                                                        std::size_t dim, double max_cos) {
    for (int restart = 0; restart < 1000; ++restart) {
        std::vector<std::vector<double>> pts;
        bool stuck = false;
        while (pts.size() < count && !stuck) {
            int attempts = 0;
            for (;;) {
                std::vector<double> v = random_unit(rng, dim);
                bool ok = true;
                for (const auto& u : pts)
                    if (std::fabs(ntklab::cosine_angle(u, v)) > max_cos) {
                        ok = false;
                        break;
                    }
                if (ok) {
                    pts.push_back(std::move(v));
                    break;
                }
                if (++attempts >= 200) {
                    stuck = true;
                    break;
                }
            }
        }
        if (pts.size() == count) return pts;
    }
    throw std::runtime_error("separated_units: could not satisfy the separation constraint");
}

inline ntklab::OperatorDataset test_dataset(std::uint64_t seed, std::size_t n1, std::size_t n2,
                                            std::size_t q, std::size_t d) {
    ntklab::Rng rng(seed, 991);
    ntklab::OperatorDataset ds;
    ds.inputs = separated_units(rng, n1, q, 0.6);
    ds.queries = separated_units(rng, n2, d, 0.8);
    return ds;
}

// Targets from a small independent teacher network, so the regression problem
// has realizable scale without being trivially solvable by the student.
inline void add_teacher_targets(ntklab::OperatorDataset& ds, std::uint64_t seed,
                                std::size_t m_teacher = 32) {
    ntklab::Rng rng(seed, 777);
    const ntklab::OperatorWeights teacher =
        ntklab::init_weights(m_teacher, 4, ds.q(), ds.d(), rng);
    ds.targets.resize(ds.n1() * ds.n2());
    for (std::size_t i = 0; i < ds.n1(); ++i)
        for (std::size_t j = 0; j < ds.n2(); ++j)
            ds.targets[ntklab::flat_index(i, j, ds.n2())] =
                ntklab::forward(teacher, ds.inputs[i], ds.queries[j]);
}

inline double ls_slope(const std::vector<double>& x, const std::vector<double>& y) {
    const double n = static_cast<double>(x.size());
    double mx = 0.0, my = 0.0;
    for (std::size_t i = 0; i < x.size(); ++i) {
        mx += x[i];
        my += y[i];
    }
    mx /= n;
    my /= n;
    double sxx = 0.0, sxy = 0.0;
    for (std::size_t i = 0; i < x.size(); ++i) {
        sxx += (x[i] - mx) * (x[i] - mx);
        sxy += (x[i] - mx) * (y[i] - my);
    }
    return sxy / sxx;
}

}  // namespace testutil
