#pragma once

#include <cmath>
#include <sstream>
#include <stdexcept>
#include <string>
#include <vector>

#include "ntklab/matrix.hpp"

namespace ntklab {

// Flat index of sample (i, j): predictions, targets, residuals, and Gram rows
// all order as (u_1 at every query), (u_2 at every query), ...
inline std::size_t flat_index(std::size_t i, std::size_t j, std::size_t n2) {
    return i * n2 + j;
}

// Input functions identified with their sensor-value vectors u_i in R^q,
// query points y_j in R^d, optional boundary queries (physics-informed runs),
// optional supervised targets z[i*n2+j] = G*(u_i)(y_j).
struct OperatorDataset {
    std::vector<std::vector<double>> inputs;    // n1 x q
    std::vector<std::vector<double>> queries;   // n2 x d
    std::vector<std::vector<double>> boundary;  // n3 x d, empty unless PINN
    std::vector<double> targets;                // n1*n2 or empty

    std::size_t n1() const { return inputs.size(); }
    std::size_t n2() const { return queries.size(); }
    std::size_t n3() const { return boundary.size(); }
    std::size_t q() const { return inputs.empty() ? 0 : inputs[0].size(); }
    std::size_t d() const { return queries.empty() ? 0 : queries[0].size(); }
    bool has_targets() const { return !targets.empty(); }
};

inline double cosine_angle(const std::vector<double>& a, const std::vector<double>& b) {
    const double na = norm2(a), nb = norm2(b);
    if (na == 0.0 || nb == 0.0) throw std::invalid_argument("cosine_angle: zero vector");
    double c = dot(a, b) / (na * nb);
    if (c > 1.0) c = 1.0;
    if (c < -1.0) c = -1.0;
    return c;
}

// Index pair of the first (near-)parallel pair, |cos| > 1 - 1e-6; (-1,-1) if none.
inline std::pair<long, long> find_parallel_pair(const std::vector<std::vector<double>>& pts,
                                                double tol = 1e-6) {
    for (std::size_t i = 0; i < pts.size(); ++i)
        for (std::size_t j = i + 1; j < pts.size(); ++j)
            if (std::abs(cosine_angle(pts[i], pts[j])) > 1.0 - tol)
                return {long(i), long(j)};
    return {-1, -1};
}

// Hypothesis checks behind the positive-definiteness lemmas: O(1) norms and no
// two parallel samples in either family. Norm bounds apply to normalized data
// only; physics-informed collocation points live on their domain instead and
// are validated by their own problem type.
inline void validate_dataset(const OperatorDataset& data, bool check_norms = true) {
    if (data.inputs.empty() || data.queries.empty())
        throw std::invalid_argument("dataset needs at least one input and one query");
    for (const auto& u : data.inputs)
        if (u.size() != data.q()) throw std::invalid_argument("ragged input vectors");
    for (const auto& y : data.queries)
        if (y.size() != data.d()) throw std::invalid_argument("ragged query vectors");
    for (const auto& y : data.boundary)
        if (y.size() != data.d()) throw std::invalid_argument("ragged boundary vectors");
    if (data.has_targets() && data.targets.size() != data.n1() * data.n2())
        throw std::invalid_argument("targets must have n1*n2 entries");
    if (check_norms) {
        for (const auto& u : data.inputs) {
            const double n = norm2(u);
            if (n < 0.5 || n > 2.0)
                throw std::invalid_argument("input norm outside [0.5, 2.0]: " +
                                            std::to_string(n));
        }
        for (const auto& y : data.queries) {
            const double n = norm2(y);
            if (n < 0.5 || n > 2.0)
                throw std::invalid_argument("query norm outside [0.5, 2.0]: " +
                                            std::to_string(n));
        }
    }
    if (auto [i, j] = find_parallel_pair(data.inputs); i >= 0) {
        std::ostringstream os;
        os << "inputs " << i << " and " << j << " are (near-)parallel";
        throw std::invalid_argument(os.str());
    }
    if (auto [i, j] = find_parallel_pair(data.queries); i >= 0) {
        std::ostringstream os;
        os << "queries " << i << " and " << j << " are (near-)parallel";
        throw std::invalid_argument(os.str());
    }
}

}  // namespace ntklab
