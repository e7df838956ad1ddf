#pragma once

#include <algorithm>
#include <cmath>
#include <sstream>
#include <stdexcept>

#include "ntklab/matrix.hpp"

namespace ntklab {

struct EigenDecomposition {
    std::vector<double> values;  // ascending
    DenseMatrix vectors;         // column k pairs with values[k]; empty if not requested
};

namespace detail {

inline double offdiag_frobenius(const DenseMatrix& a) {
    double s = 0.0;
    for (std::size_t i = 0; i < a.rows(); ++i)
        for (std::size_t j = 0; j < a.cols(); ++j)
            if (i != j) s += a(i, j) * a(i, j);
    return std::sqrt(s);
}

}  // namespace detail

inline void require_symmetric(const DenseMatrix& a, const char* who) {
    if (a.rows() != a.cols()) {
        std::ostringstream os;
        os << who << ": matrix is " << a.rows() << "x" << a.cols() << ", not square";
        throw std::invalid_argument(os.str());
    }
    if (!is_symmetric(a)) {
        const AsymmetryReport rep = worst_asymmetry(a);
        std::ostringstream os;
        os << who << ": matrix not symmetric; worst |A[" << rep.i << "," << rep.j
           << "]-A[" << rep.j << "," << rep.i << "]| = " << rep.deviation;
        throw std::invalid_argument(os.str());
    }
}

// Cyclic Jacobi eigensolver for symmetric matrices. Sweeps row-by-row until the
// off-diagonal Frobenius norm falls below 1e-12 relative to ||A||_F. Matrices in
// this library stay small (a few hundred rows at most), where Jacobi's robustness
// and the tight residual it delivers beat anything fancier.
inline EigenDecomposition jacobi_eigensystem(const DenseMatrix& input, bool want_vectors = true) {
    require_symmetric(input, "jacobi_eigensystem");
    const std::size_t n = input.rows();
    DenseMatrix a = input;
    DenseMatrix v = want_vectors ? DenseMatrix::identity(n) : DenseMatrix();

    const double scale = std::max(a.frobenius_norm(), 1e-300);
    const double threshold = 1e-12 * scale;
    const int max_sweeps = 64;

    for (int sweep = 0; sweep < max_sweeps; ++sweep) {
        if (detail::offdiag_frobenius(a) <= threshold) break;
        for (std::size_t p = 0; p + 1 < n; ++p) {
            for (std::size_t q = p + 1; q < n; ++q) {
                const double apq = a(p, q);
                if (std::abs(apq) <= 1e-18 * scale) continue;
                const double tau = (a(q, q) - a(p, p)) / (2.0 * apq);
                const double t = (tau >= 0.0 ? 1.0 : -1.0) /
                                 (std::abs(tau) + std::sqrt(1.0 + tau * tau));
                const double c = 1.0 / std::sqrt(1.0 + t * t);
                const double s = t * c;

                for (std::size_t k = 0; k < n; ++k) {
                    const double akp = a(k, p), akq = a(k, q);
                    a(k, p) = c * akp - s * akq;
                    a(k, q) = s * akp + c * akq;
                }
                for (std::size_t k = 0; k < n; ++k) {
                    const double apk = a(p, k), aqk = a(q, k);
                    a(p, k) = c * apk - s * aqk;
                    a(q, k) = s * apk + c * aqk;
                }
                if (want_vectors) {
                    for (std::size_t k = 0; k < n; ++k) {
                        const double vkp = v(k, p), vkq = v(k, q);
                        v(k, p) = c * vkp - s * vkq;
                        v(k, q) = s * vkp + c * vkq;
                    }
                }
            }
        }
    }

    std::vector<std::size_t> order(n);
    for (std::size_t i = 0; i < n; ++i) order[i] = i;
    std::sort(order.begin(), order.end(),
              [&](std::size_t x, std::size_t y) { return a(x, x) < a(y, y); });

    EigenDecomposition out;
    out.values.resize(n);
    for (std::size_t i = 0; i < n; ++i) out.values[i] = a(order[i], order[i]);
    if (want_vectors) {
        out.vectors = DenseMatrix(n, n);
        for (std::size_t j = 0; j < n; ++j)
            for (std::size_t i = 0; i < n; ++i) out.vectors(i, j) = v(i, order[j]);
    }
    return out;
}

inline double min_eigenvalue(const DenseMatrix& a) {
    return jacobi_eigensystem(a, /*want_vectors=*/false).values.front();
}

// Spectral norm of a symmetric matrix: max |eigenvalue|.
inline double spectral_norm_sym(const DenseMatrix& a) {
    const EigenDecomposition e = jacobi_eigensystem(a, /*want_vectors=*/false);
    return std::max(std::abs(e.values.front()), std::abs(e.values.back()));
}

}  // namespace ntklab
