#pragma once

#include <cmath>
#include <cstddef>
#include <cstdio>
#include <fstream>
#include <sstream>
#include <stdexcept>
#include <string>
#include <vector>

namespace ntklab {

// Dense row-major matrix of doubles. Everything in this library is 64-bit:
// the identity checks downstream run at 1e-8 and float32 noise would drown them.
class DenseMatrix {
public:
    DenseMatrix() = default;
    DenseMatrix(std::size_t rows, std::size_t cols, double fill = 0.0)
        : rows_(rows), cols_(cols), data_(rows * cols, fill) {}

    static DenseMatrix identity(std::size_t n) {
        DenseMatrix m(n, n);
        for (std::size_t i = 0; i < n; ++i) m(i, i) = 1.0;
        return m;
    }

    std::size_t rows() const { return rows_; }
    std::size_t cols() const { return cols_; }

    double& operator()(std::size_t i, std::size_t j) { return data_[i * cols_ + j]; }
    double operator()(std::size_t i, std::size_t j) const { return data_[i * cols_ + j]; }

    std::vector<double>& data() { return data_; }
    const std::vector<double>& data() const { return data_; }

    DenseMatrix& operator+=(const DenseMatrix& o) {
        require_same_shape(o);
        for (std::size_t k = 0; k < data_.size(); ++k) data_[k] += o.data_[k];
        return *this;
    }
    DenseMatrix& operator-=(const DenseMatrix& o) {
        require_same_shape(o);
        for (std::size_t k = 0; k < data_.size(); ++k) data_[k] -= o.data_[k];
        return *this;
    }
    DenseMatrix& operator*=(double s) {
        for (double& v : data_) v *= s;
        return *this;
    }

    friend DenseMatrix operator+(DenseMatrix a, const DenseMatrix& b) { return a += b; }
    friend DenseMatrix operator-(DenseMatrix a, const DenseMatrix& b) { return a -= b; }
    friend DenseMatrix operator*(DenseMatrix a, double s) { return a *= s; }
    friend DenseMatrix operator*(double s, DenseMatrix a) { return a *= s; }

    std::vector<double> matvec(const std::vector<double>& x) const {
        if (x.size() != cols_) throw std::invalid_argument("matvec: dimension mismatch");
        std::vector<double> y(rows_, 0.0);
        for (std::size_t i = 0; i < rows_; ++i) {
            double acc = 0.0;
            const double* row = &data_[i * cols_];
            for (std::size_t j = 0; j < cols_; ++j) acc += row[j] * x[j];
            y[i] = acc;
        }
        return y;
    }

    DenseMatrix matmul(const DenseMatrix& b) const {
        if (cols_ != b.rows_) throw std::invalid_argument("matmul: dimension mismatch");
        DenseMatrix c(rows_, b.cols_);
        for (std::size_t i = 0; i < rows_; ++i)
            for (std::size_t k = 0; k < cols_; ++k) {
                const double aik = (*this)(i, k);
                if (aik == 0.0) continue;
                for (std::size_t j = 0; j < b.cols_; ++j) c(i, j) += aik * b(k, j);
            }
        return c;
    }

    DenseMatrix transposed() const {
        DenseMatrix t(cols_, rows_);
        for (std::size_t i = 0; i < rows_; ++i)
            for (std::size_t j = 0; j < cols_; ++j) t(j, i) = (*this)(i, j);
        return t;
    }

    double frobenius_norm() const {
        double s = 0.0;
        for (double v : data_) s += v * v;
        return std::sqrt(s);
    }

    double max_abs() const {
        double s = 0.0;
        for (double v : data_) s = std::max(s, std::abs(v));
        return s;
    }

private:
    void require_same_shape(const DenseMatrix& o) const {
        if (rows_ != o.rows_ || cols_ != o.cols_)
            throw std::invalid_argument("matrix shape mismatch");
    }

    std::size_t rows_ = 0;
    std::size_t cols_ = 0;
    std::vector<double> data_;
};

// Worst |A[i,j]-A[j,i]| deviation, for symmetry diagnostics.
struct AsymmetryReport {
    std::size_t i = 0;
    std::size_t j = 0;
    double deviation = 0.0;
};

inline AsymmetryReport worst_asymmetry(const DenseMatrix& a) {
    AsymmetryReport rep;
    for (std::size_t i = 0; i < a.rows(); ++i)
        for (std::size_t j = i + 1; j < a.cols(); ++j) {
            const double d = std::abs(a(i, j) - a(j, i));
            if (d > rep.deviation) rep = {i, j, d};
        }
    return rep;
}

// Symmetric within |A[i,j]-A[j,i]| <= tol*max(1, |A[i,j]|).
inline bool is_symmetric(const DenseMatrix& a, double tol = 1e-12) {
    if (a.rows() != a.cols()) return false;
    for (std::size_t i = 0; i < a.rows(); ++i)
        for (std::size_t j = i + 1; j < a.cols(); ++j)
            if (std::abs(a(i, j) - a(j, i)) > tol * std::max(1.0, std::abs(a(i, j))))
                return false;
    return true;
}

// Kronecker product; block (i,j) of the result is a[i,j]*b. This is the layout
// convention under which the (i,j)-th n2 x n2 block of the infinite-width Gram
// equals H1[i,j]*H2.
inline DenseMatrix kron(const DenseMatrix& a, const DenseMatrix& b) {
    DenseMatrix c(a.rows() * b.rows(), a.cols() * b.cols());
    for (std::size_t i = 0; i < a.rows(); ++i)
        for (std::size_t j = 0; j < a.cols(); ++j) {
            const double aij = a(i, j);
            for (std::size_t k = 0; k < b.rows(); ++k)
                for (std::size_t l = 0; l < b.cols(); ++l)
                    c(i * b.rows() + k, j * b.cols() + l) = aij * b(k, l);
        }
    return c;
}

inline std::string format_g17(double v) {
    char buf[40];
    std::snprintf(buf, sizeof(buf), "%.17g", v);
    return buf;
}

// Plain-text matrix exchange format: first line "rows cols", then one row per
// line, entries separated by single spaces, 17 significant digits.
inline void write_matrix_text(const std::string& path, const DenseMatrix& m) {
    std::ofstream out(path);
    if (!out) throw std::runtime_error("cannot open for write: " + path);
    out << m.rows() << ' ' << m.cols() << '\n';
    for (std::size_t i = 0; i < m.rows(); ++i) {
        for (std::size_t j = 0; j < m.cols(); ++j) {
            if (j) out << ' ';
            out << format_g17(m(i, j));
        }
        out << '\n';
    }
    if (!out) throw std::runtime_error("write failed: " + path);
}

inline DenseMatrix read_matrix_text(const std::string& path) {
    std::ifstream in(path);
    if (!in) throw std::runtime_error("cannot open for read: " + path);
    std::size_t rows = 0, cols = 0;
    if (!(in >> rows >> cols)) throw std::runtime_error("bad matrix header: " + path);
    DenseMatrix m(rows, cols);
    for (std::size_t k = 0; k < rows * cols; ++k)
        if (!(in >> m.data()[k])) throw std::runtime_error("truncated matrix file: " + path);
    return m;
}

inline double dot(const std::vector<double>& a, const std::vector<double>& b) {
    if (a.size() != b.size()) throw std::invalid_argument("dot: dimension mismatch");
    double s = 0.0;
    for (std::size_t i = 0; i < a.size(); ++i) s += a[i] * b[i];
    return s;
}

inline double norm2(const std::vector<double>& a) { return std::sqrt(dot(a, a)); }

}  // namespace ntklab
