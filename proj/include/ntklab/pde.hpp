#pragma once

#include <stdexcept>
#include <vector>

#include "ntklab/net.hpp"

namespace ntklab {

// The differential operator of the physics-informed problem,
//   L u = du/dy0 - sum_{i=1..d} d2u/dyi2 + u,
// applied analytically to the trunk feature y -> relu3(w.y). Query vectors carry
// the time coordinate first, so w[0] pairs with y0 and w[1..d] is the spatial
// block. Exact constants matter here: relu3' = 3 relu2 and relu3'' = 6 relu, so
//   L relu3(w.y) = 3 w0 relu2(z) - 6 |w_spatial|^2 relu(z) + relu3(z),  z = w.y.
inline double apply_L_to_trunk(const std::vector<double>& w, const std::vector<double>& y) {
    if (w.size() != y.size() || w.empty())
        throw std::invalid_argument("apply_L_to_trunk: w and y must share dimension d+1 >= 1");
    double z = 0.0;
    for (std::size_t i = 0; i < w.size(); ++i) z += w[i] * y[i];
    if (z < 0.0) return 0.0;
    double spatial_sq = 0.0;
    for (std::size_t i = 1; i < w.size(); ++i) spatial_sq += w[i] * w[i];
    return 3.0 * w[0] * z * z - 6.0 * spatial_sq * z + z * z * z;
}

// Gradient of apply_L_to_trunk with respect to w (product rule on each term):
//   d/dw [3 w0 relu2]   = 3 relu2(z) e0 + 6 w0 relu(z) y
//   d/dw [-6|ws|^2 relu] = -12 relu(z) (0, ws) - 6 |ws|^2 1{z>=0} y
//   d/dw [relu3]        = 3 relu2(z) y
inline std::vector<double> grad_L_trunk(const std::vector<double>& w,
                                        const std::vector<double>& y) {
    if (w.size() != y.size() || w.empty())
        throw std::invalid_argument("grad_L_trunk: w and y must share dimension d+1 >= 1");
    const std::size_t n = w.size();
    std::vector<double> g(n, 0.0);
    double z = 0.0;
    for (std::size_t i = 0; i < n; ++i) z += w[i] * y[i];
    if (z < 0.0) return g;
    double spatial_sq = 0.0;
    for (std::size_t i = 1; i < n; ++i) spatial_sq += w[i] * w[i];
    const double r1 = z, r2 = z * z;
    const double ycoef = 6.0 * w[0] * r1 - 6.0 * spatial_sq + 3.0 * r2;
    for (std::size_t i = 0; i < n; ++i) g[i] = ycoef * y[i];
    g[0] += 3.0 * r2;
    for (std::size_t i = 1; i < n; ++i) g[i] -= 12.0 * r1 * w[i];
    return g;
}

// d relu3(w.y)/dw = 3 relu2(w.y) y; the boundary-residual trunk gradient.
inline std::vector<double> grad_relu3_trunk(const std::vector<double>& w,
                                            const std::vector<double>& y) {
    if (w.size() != y.size() || w.empty())
        throw std::invalid_argument("grad_relu3_trunk: w and y must share dimension");
    double z = 0.0;
    for (std::size_t i = 0; i < w.size(); ++i) z += w[i] * y[i];
    std::vector<double> g(w.size(), 0.0);
    if (z < 0.0) return g;
    const double c = 3.0 * z * z;
    for (std::size_t i = 0; i < w.size(); ++i) g[i] = c * y[i];
    return g;
}

}  // namespace ntklab
