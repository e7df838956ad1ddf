#pragma once

#include <cstdint>
#include <cstring>
#include <fstream>
#include <sstream>
#include <stdexcept>
#include <string>
#include <vector>

#include "ntklab/matrix.hpp"
#include "ntklab/rng.hpp"

namespace ntklab {

// ReLU and its powers. The derivative convention at the kink is the closed
// indicator 1{x >= 0} throughout the library.
inline double relu(double x) { return x > 0.0 ? x : 0.0; }
inline double relu2(double x) { return x > 0.0 ? x * x : 0.0; }
inline double relu3(double x) { return x > 0.0 ? x * x * x : 0.0; }
inline double step_indicator(double x) { return x >= 0.0 ? 1.0 : 0.0; }

enum class Activation : std::uint8_t { Relu = 0, Relu3 = 1 };

inline double trunk_activation(Activation act, double x) {
    return act == Activation::Relu ? relu(x) : relu3(x);
}

// G(u)(y) = (1/sqrt(m)) sum_r [ (1/sqrt(p)) sum_k a_rk relu(wt_rk . u) ] act(w_r . y).
// Trunk weights w_r live in R^d, branch weights wt_rk in R^q, signs a_rk in {-1,+1}
// and stay frozen after initialization.
struct OperatorWeights {
    std::size_t m = 0;
    std::size_t p = 0;
    std::size_t q = 0;
    std::size_t d = 0;
    Activation activation = Activation::Relu;
    std::vector<double> trunk;   // m*d, row r = w_r
    std::vector<double> branch;  // m*p*q, row (r,k) = wt_rk
    std::vector<double> signs;   // m*p

    const double* trunk_at(std::size_t r) const { return &trunk[r * d]; }
    double* trunk_at(std::size_t r) { return &trunk[r * d]; }
    const double* branch_at(std::size_t r, std::size_t k) const {
        return &branch[(r * p + k) * q];
    }
    double* branch_at(std::size_t r, std::size_t k) { return &branch[(r * p + k) * q]; }
    double sign(std::size_t r, std::size_t k) const { return signs[r * p + k]; }
};

inline OperatorWeights init_weights(std::size_t m, std::size_t p, std::size_t q,
                                    std::size_t d, Rng& rng,
                                    Activation activation = Activation::Relu) {
    if (m == 0 || p == 0 || q == 0 || d == 0)
        throw std::invalid_argument("init_weights: all dimensions must be >= 1");
    OperatorWeights w;
    w.m = m;
    w.p = p;
    w.q = q;
    w.d = d;
    w.activation = activation;
    w.trunk.resize(m * d);
    w.branch.resize(m * p * q);
    w.signs.resize(m * p);
    for (double& v : w.trunk) v = rng.gaussian();
    for (double& v : w.branch) v = rng.gaussian();
    for (double& v : w.signs) v = rng.rademacher();
    return w;
}

namespace detail {

inline double dot_n(const double* a, const double* b, std::size_t n) {
    double s = 0.0;
    for (std::size_t i = 0; i < n; ++i) s += a[i] * b[i];
    return s;
}

inline void check_input_dims(const OperatorWeights& w, std::size_t u_dim, std::size_t y_dim) {
    if (u_dim != w.q || y_dim != w.d) {
        std::ostringstream os;
        os << "operator input dims (" << u_dim << "," << y_dim << ") do not match weights (q="
           << w.q << ", d=" << w.d << ")";
        throw std::invalid_argument(os.str());
    }
}

}  // namespace detail

inline double branch_value(const OperatorWeights& w, std::size_t r,
                           const std::vector<double>& u) {
    if (r >= w.m) throw std::out_of_range("branch_value: r >= m");
    if (u.size() != w.q) throw std::invalid_argument("branch_value: u dimension mismatch");
    double s = 0.0;
    for (std::size_t k = 0; k < w.p; ++k)
        s += w.sign(r, k) * relu(detail::dot_n(w.branch_at(r, k), u.data(), w.q));
    return s / std::sqrt(double(w.p));
}

inline double forward(const OperatorWeights& w, const std::vector<double>& u,
                      const std::vector<double>& y) {
    detail::check_input_dims(w, u.size(), y.size());
    double s = 0.0;
    for (std::size_t r = 0; r < w.m; ++r)
        s += branch_value(w, r, u) *
             trunk_activation(w.activation, detail::dot_n(w.trunk_at(r), y.data(), w.d));
    return s / std::sqrt(double(w.m));
}

// dG(u)(y)/dw_r for the ReLU trunk. The cubed trunk has its own calculus in the
// physics-informed module.
inline std::vector<double> grad_trunk(const OperatorWeights& w, const std::vector<double>& u,
                                      const std::vector<double>& y, std::size_t r) {
    if (w.activation != Activation::Relu)
        throw std::logic_error("grad_trunk: defined for the ReLU trunk only");
    detail::check_input_dims(w, u.size(), y.size());
    std::vector<double> g(w.d, 0.0);
    const double z = detail::dot_n(w.trunk_at(r), y.data(), w.d);
    if (z < 0.0) return g;
    const double c = branch_value(w, r, u) / std::sqrt(double(w.m));
    for (std::size_t i = 0; i < w.d; ++i) g[i] = c * y[i];
    return g;
}

// dG(u)(y)/dwt_rk; the trunk factor uses whichever activation the weights carry.
inline std::vector<double> grad_branch(const OperatorWeights& w, const std::vector<double>& u,
                                       const std::vector<double>& y, std::size_t r,
                                       std::size_t k) {
    detail::check_input_dims(w, u.size(), y.size());
    std::vector<double> g(w.q, 0.0);
    if (detail::dot_n(w.branch_at(r, k), u.data(), w.q) < 0.0) return g;
    const double t = trunk_activation(w.activation, detail::dot_n(w.trunk_at(r), y.data(), w.d));
    if (t == 0.0) return g;
    const double c = w.sign(r, k) * t / std::sqrt(double(w.m) * double(w.p));
    for (std::size_t i = 0; i < w.q; ++i) g[i] = c * u[i];
    return g;
}

// Branch outputs for a batch of inputs: entry (r, i) = branch_value(r, u_i).
// Hot paths assemble everything from this table.
inline DenseMatrix branch_table(const OperatorWeights& w,
                                const std::vector<std::vector<double>>& inputs) {
    DenseMatrix t(w.m, inputs.size());
    const double invsp = 1.0 / std::sqrt(double(w.p));
    for (std::size_t r = 0; r < w.m; ++r)
        for (std::size_t i = 0; i < inputs.size(); ++i) {
            double s = 0.0;
            for (std::size_t k = 0; k < w.p; ++k)
                s += w.sign(r, k) * relu(detail::dot_n(w.branch_at(r, k), inputs[i].data(), w.q));
            t(r, i) = s * invsp;
        }
    return t;
}

// --- serialization ---------------------------------------------------------
// Flat little-endian binary record (layout documented in README.md):
//   bytes 0..3   magic "NTKW"
//   u32          format version (1)
//   u64 x 4      m, p, q, d
//   u8           activation (0 = relu, 1 = relu3)
//   f64 x m*d    trunk weights, row-major
//   f64 x m*p*q  branch weights, (r,k)-major
//   i8  x m*p    signs
// Doubles are stored bit-exactly, so a round trip is lossless.

namespace detail {

template <typename T>
void put_le(std::string& out, T v) {
    static_assert(std::is_integral_v<T>);
    for (std::size_t i = 0; i < sizeof(T); ++i)
        out.push_back(char((std::make_unsigned_t<T>(v) >> (8 * i)) & 0xFF));
}

inline void put_f64(std::string& out, double v) {
    std::uint64_t bits;
    std::memcpy(&bits, &v, 8);
    put_le(out, bits);
}

template <typename T>
T get_le(const std::string& in, std::size_t& pos) {
    if (pos + sizeof(T) > in.size()) throw std::runtime_error("weights record truncated");
    std::make_unsigned_t<T> v = 0;
    for (std::size_t i = 0; i < sizeof(T); ++i)
        v |= std::make_unsigned_t<T>(std::uint8_t(in[pos + i])) << (8 * i);
    pos += sizeof(T);
    return T(v);
}

inline double get_f64(const std::string& in, std::size_t& pos) {
    const std::uint64_t bits = get_le<std::uint64_t>(in, pos);
    double v;
    std::memcpy(&v, &bits, 8);
    return v;
}

}  // namespace detail

inline void save_weights(const std::string& path, const OperatorWeights& w) {
    std::string out;
    out.reserve(29 + 8 * (w.trunk.size() + w.branch.size()) + w.signs.size());
    out += "NTKW";
    detail::put_le<std::uint32_t>(out, 1);
    detail::put_le<std::uint64_t>(out, w.m);
    detail::put_le<std::uint64_t>(out, w.p);
    detail::put_le<std::uint64_t>(out, w.q);
    detail::put_le<std::uint64_t>(out, w.d);
    out.push_back(char(std::uint8_t(w.activation)));
    for (double v : w.trunk) detail::put_f64(out, v);
    for (double v : w.branch) detail::put_f64(out, v);
    for (double v : w.signs) out.push_back(v > 0.0 ? char(1) : char(-1));
    std::ofstream f(path, std::ios::binary);
    if (!f) throw std::runtime_error("cannot open for write: " + path);
    f.write(out.data(), std::streamsize(out.size()));
    if (!f) throw std::runtime_error("write failed: " + path);
}

inline OperatorWeights load_weights(const std::string& path) {
    std::ifstream f(path, std::ios::binary);
    if (!f) throw std::runtime_error("cannot open for read: " + path);
    std::stringstream ss;
    ss << f.rdbuf();
    const std::string in = ss.str();
    if (in.size() < 4 || in.compare(0, 4, "NTKW") != 0)
        throw std::runtime_error("not a weights record: " + path);
    std::size_t pos = 4;
    const auto version = detail::get_le<std::uint32_t>(in, pos);
    if (version != 1) throw std::runtime_error("unsupported weights record version");
    OperatorWeights w;
    w.m = detail::get_le<std::uint64_t>(in, pos);
    w.p = detail::get_le<std::uint64_t>(in, pos);
    w.q = detail::get_le<std::uint64_t>(in, pos);
    w.d = detail::get_le<std::uint64_t>(in, pos);
    const auto act = detail::get_le<std::uint8_t>(in, pos);
    if (act > 1) throw std::runtime_error("bad activation tag in weights record");
    w.activation = Activation(act);
    w.trunk.resize(w.m * w.d);
    w.branch.resize(w.m * w.p * w.q);
    w.signs.resize(w.m * w.p);
    for (double& v : w.trunk) v = detail::get_f64(in, pos);
    for (double& v : w.branch) v = detail::get_f64(in, pos);
    for (double& v : w.signs) {
        const auto s = detail::get_le<std::int8_t>(in, pos);
        if (s != 1 && s != -1) throw std::runtime_error("bad sign entry in weights record");
        v = double(s);
    }
    if (pos != in.size()) throw std::runtime_error("trailing bytes in weights record");
    return w;
}

}  // namespace ntklab
