#pragma once

#include <algorithm>
#include <array>
#include <cctype>
#include <cmath>
#include <cstdint>
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <map>
#include <stdexcept>
#include <string>
#include <utility>
#include <vector>

#include <json.hpp>

#include "ntklab/data.hpp"
#include "ntklab/eigen.hpp"
#include "ntklab/kernels.hpp"
#include "ntklab/matrix.hpp"
#include "ntklab/net.hpp"
#include "ntklab/pinn.hpp"
#include "ntklab/rng.hpp"
#include "ntklab/trainer.hpp"

namespace ntklab {

// ---------------------------------------------------------------------------
// Configuration.
// ---------------------------------------------------------------------------

enum class LabMode : std::uint8_t { Supervised, Pinn, KernelOnly };

inline const char* mode_name(LabMode mode) {
    switch (mode) {
        case LabMode::Supervised: return "supervised";
        case LabMode::Pinn: return "pinn";
        case LabMode::KernelOnly: return "kernel-only";
    }
    return "supervised";
}

inline LabMode parse_mode(const std::string& text) {
    if (text == "supervised") return LabMode::Supervised;
    if (text == "pinn") return LabMode::Pinn;
    if (text == "kernel-only") return LabMode::KernelOnly;
    throw std::invalid_argument("config: mode must be supervised, pinn, or kernel-only, got '" +
                                text + "'");
}

// One experiment description. `d` is the query dimension in supervised and
// kernel-only runs and the spatial dimension in physics-informed runs (where
// points carry time first, so trunks see d + 1 coordinates). `eta <= 0` asks
// every run to use the measured step size 1 / (|H(0)|_2 + |Htilde(0)|_2).
struct ExperimentConfig {
    LabMode mode = LabMode::Supervised;
    std::size_t n1 = 4;
    std::size_t n2 = 4;
    std::size_t n3 = 4;
    std::size_t d = 2;
    std::size_t q = 16;
    std::size_t p = 16;
    std::vector<std::size_t> widths = {2048};
    double eta = 0.0;
    long steps = 200;
    std::vector<std::uint64_t> seeds = {1};
    double delta = 0.05;
    std::string out_dir = "runs";
    long cadence = 10;
    std::size_t mc_samples = 1000000;
    bool export_grams = false;
};

inline void validate_config(const ExperimentConfig& cfg) {
    if (cfg.n1 < 1 || cfg.n2 < 1 || cfg.n3 < 1 || cfg.d < 1 || cfg.q < 1 || cfg.p < 1)
        throw std::invalid_argument("config: all counts must be at least 1");
    if (cfg.widths.empty()) throw std::invalid_argument("config: width list must be nonempty");
    for (const std::size_t m : cfg.widths)
        if (m < 1) throw std::invalid_argument("config: widths must be at least 1");
    if (cfg.seeds.empty()) throw std::invalid_argument("config: seed list must be nonempty");
    if (!(cfg.delta > 0.0 && cfg.delta < 1.0))
        throw std::invalid_argument("config: delta must lie in (0, 1)");
    if (cfg.steps < 0) throw std::invalid_argument("config: steps must be nonnegative");
    if (cfg.cadence < 1) throw std::invalid_argument("config: cadence must be at least 1");
    if (cfg.mc_samples < 1) throw std::invalid_argument("config: mc_samples must be at least 1");
    if (cfg.out_dir.empty()) throw std::invalid_argument("config: output directory must be set");
}

namespace detail {

inline std::string trim(const std::string& s) {
    std::size_t b = 0, e = s.size();
    while (b < e && std::isspace(static_cast<unsigned char>(s[b]))) ++b;
    while (e > b && std::isspace(static_cast<unsigned char>(s[e - 1]))) --e;
    return s.substr(b, e - b);
}

inline double parse_double(const std::string& key, const std::string& value) {
    std::size_t pos = 0;
    double v = 0.0;
    try {
        v = std::stod(value, &pos);
    } catch (const std::exception&) {
        throw std::invalid_argument("config: " + key + " expects a number, got '" + value + "'");
    }
    if (pos != value.size())
        throw std::invalid_argument("config: " + key + " expects a number, got '" + value + "'");
    return v;
}

inline long parse_long(const std::string& key, const std::string& value) {
    std::size_t pos = 0;
    long v = 0;
    try {
        v = std::stol(value, &pos);
    } catch (const std::exception&) {
        throw std::invalid_argument("config: " + key + " expects an integer, got '" + value +
                                    "'");
    }
    if (pos != value.size())
        throw std::invalid_argument("config: " + key + " expects an integer, got '" + value +
                                    "'");
    return v;
}

inline std::uint64_t parse_u64(const std::string& key, const std::string& value) {
    if (!value.empty() && value[0] == '-')
        throw std::invalid_argument("config: " + key + " expects a nonnegative integer, got '" +
                                    value + "'");
    std::size_t pos = 0;
    unsigned long long v = 0;
    try {
        v = std::stoull(value, &pos);
    } catch (const std::exception&) {
        throw std::invalid_argument("config: " + key + " expects a nonnegative integer, got '" +
                                    value + "'");
    }
    if (pos != value.size())
        throw std::invalid_argument("config: " + key + " expects a nonnegative integer, got '" +
                                    value + "'");
    return static_cast<std::uint64_t>(v);
}

template <typename T>
std::vector<T> parse_list(const std::string& key, const std::string& value,
                          T (*one)(const std::string&, const std::string&)) {
    std::vector<T> out;
    std::size_t start = 0;
    while (start <= value.size()) {
        const std::size_t comma = value.find(',', start);
        const std::string item =
            trim(value.substr(start, comma == std::string::npos ? comma : comma - start));
        if (item.empty())
            throw std::invalid_argument("config: " + key + " has an empty list entry");
        out.push_back(one(key, item));
        if (comma == std::string::npos) break;
        start = comma + 1;
    }
    return out;
}

inline std::size_t parse_size(const std::string& key, const std::string& value) {
    return static_cast<std::size_t>(parse_u64(key, value));
}

}  // namespace detail

// Apply one `key = value` entry. The same function backs config files and CLI
// overrides, so precedence is purely application order: file first, flags after.
inline void apply_config_entry(ExperimentConfig& cfg, const std::string& key,
                               const std::string& value) {
    if (key == "mode") {
        cfg.mode = parse_mode(value);
    } else if (key == "n1") {
        cfg.n1 = detail::parse_size(key, value);
    } else if (key == "n2") {
        cfg.n2 = detail::parse_size(key, value);
    } else if (key == "n3") {
        cfg.n3 = detail::parse_size(key, value);
    } else if (key == "d") {
        cfg.d = detail::parse_size(key, value);
    } else if (key == "q") {
        cfg.q = detail::parse_size(key, value);
    } else if (key == "p") {
        cfg.p = detail::parse_size(key, value);
    } else if (key == "m") {
        cfg.widths = detail::parse_list<std::size_t>(key, value, detail::parse_size);
    } else if (key == "eta") {
        cfg.eta = value == "auto" ? 0.0 : detail::parse_double(key, value);
    } else if (key == "steps") {
        cfg.steps = detail::parse_long(key, value);
    } else if (key == "seeds") {
        cfg.seeds = detail::parse_list<std::uint64_t>(key, value, detail::parse_u64);
    } else if (key == "delta") {
        cfg.delta = detail::parse_double(key, value);
    } else if (key == "out") {
        cfg.out_dir = value;
    } else if (key == "cadence") {
        cfg.cadence = detail::parse_long(key, value);
    } else if (key == "mc_samples") {
        cfg.mc_samples = detail::parse_size(key, value);
    } else if (key == "export_grams") {
        if (value == "1" || value == "true")
            cfg.export_grams = true;
        else if (value == "0" || value == "false")
            cfg.export_grams = false;
        else
            throw std::invalid_argument("config: export_grams expects 0/1/true/false, got '" +
                                        value + "'");
    } else {
        throw std::invalid_argument("config: unknown key '" + key + "'");
    }
}

// Flat key = value text, one entry per line, '#' starts a comment. Unknown keys
// are errors, not warnings: a typo must not silently fall back to a default.
inline ExperimentConfig parse_config_text(const std::string& text) {
    ExperimentConfig cfg;
    std::size_t line_start = 0, line_no = 0;
    while (line_start <= text.size()) {
        const std::size_t nl = text.find('\n', line_start);
        std::string line =
            text.substr(line_start, nl == std::string::npos ? nl : nl - line_start);
        ++line_no;
        const std::size_t hash = line.find('#');
        if (hash != std::string::npos) line = line.substr(0, hash);
        line = detail::trim(line);
        if (!line.empty()) {
            const std::size_t eq = line.find('=');
            if (eq == std::string::npos)
                throw std::invalid_argument("config: line " + std::to_string(line_no) +
                                            " is not a key = value entry");
            apply_config_entry(cfg, detail::trim(line.substr(0, eq)),
                               detail::trim(line.substr(eq + 1)));
        }
        if (nl == std::string::npos) break;
        line_start = nl + 1;
    }
    return cfg;
}

inline ExperimentConfig load_config_file(const std::string& path) {
    std::ifstream in(path, std::ios::binary);
    if (!in) throw std::invalid_argument("config: cannot open " + path);
    std::string text((std::istreambuf_iterator<char>(in)), std::istreambuf_iterator<char>());
    return parse_config_text(text);
}

// ---------------------------------------------------------------------------
// Dataset synthesis.
// ---------------------------------------------------------------------------

// Everything one run consumes: input functions (plus queries and teacher
// targets in supervised mode) and, in physics-informed mode, the collocation
// problem with manufactured data.
struct LabData {
    OperatorDataset dataset;
    PdeProblem problem;  // untouched unless the config mode is pinn
};

namespace detail {

constexpr double kPi = 3.14159265358979323846;
constexpr double kInputMaxCos = 0.95;
constexpr double kQueryMaxCos = 0.85;
constexpr int kSampleAttempts = 1000;
constexpr std::size_t kTeacherWidth = 32;
constexpr std::size_t kTeacherBranch = 4;

// Smooth random input functions: a truncated cosine series with independent
// Gaussian coefficients, evaluated at q equispaced sensors on [0, 1], then
// unit-normalized. Pairs too close to parallel are redrawn so the limit
// kernels on inputs stay positive definite.
inline std::vector<std::vector<double>> sample_input_functions(Rng& rng, std::size_t n1,
                                                               std::size_t q) {
    const std::size_t modes = std::min<std::size_t>(q, 8);
    std::vector<std::vector<double>> inputs;
    std::vector<double> coef(modes), u(q);
    for (std::size_t i = 0; i < n1; ++i) {
        bool placed = false;
        for (int attempt = 0; attempt < kSampleAttempts && !placed; ++attempt) {
            for (double& a : coef) a = rng.gaussian();
            for (std::size_t s = 0; s < q; ++s) {
                const double x = (static_cast<double>(s) + 0.5) / static_cast<double>(q);
                double acc = 0.0;
                for (std::size_t k = 0; k < modes; ++k)
                    acc += coef[k] * std::cos(kPi * static_cast<double>(k) * x);
                u[s] = acc;
            }
            const double n = norm2(u);
            if (n == 0.0) continue;
            for (double& c : u) c /= n;
            bool separated = true;
            for (const auto& prev : inputs)
                if (std::fabs(cosine_angle(prev, u)) > kInputMaxCos) {
                    separated = false;
                    break;
                }
            if (!separated) continue;
            inputs.push_back(u);
            placed = true;
        }
        if (!placed)
            throw std::runtime_error(
                "synthesize_dataset: could not place input function " + std::to_string(i) +
                " after 1000 attempts; the requested count does not fit the separation level");
    }
    return inputs;
}

// Unit query directions. In the plane, greedy rejection can corner itself, so
// directions come from stratified jittered angles, which separate by
// construction. In three or more dimensions plain rejection has room to work.
inline std::vector<std::vector<double>> sample_query_directions(Rng& rng, std::size_t n2,
                                                                std::size_t d) {
    std::vector<std::vector<double>> queries;
    if (d == 2) {
        for (std::size_t j = 0; j < n2; ++j) {
            const double jitter = 0.15 + 0.7 * rng.uniform01();
            const double theta = kPi * (static_cast<double>(j) + jitter) / static_cast<double>(n2);
            queries.push_back({std::cos(theta), std::sin(theta)});
        }
    } else {
        for (std::size_t j = 0; j < n2; ++j) {
            bool placed = false;
            for (int attempt = 0; attempt < kSampleAttempts && !placed; ++attempt) {
                std::vector<double> y = sample_gaussian_vector(rng, d);
                const double n = norm2(y);
                if (n == 0.0) continue;
                for (double& c : y) c /= n;
                bool separated = true;
                for (const auto& prev : queries)
                    if (std::fabs(cosine_angle(prev, y)) > kQueryMaxCos) {
                        separated = false;
                        break;
                    }
                if (!separated) continue;
                queries.push_back(std::move(y));
                placed = true;
            }
            if (!placed)
                throw std::runtime_error(
                    "synthesize_dataset: could not place query direction " + std::to_string(j) +
                    " after 1000 attempts; the requested count does not fit the separation "
                    "level");
        }
    }
    if (auto [i, j] = find_parallel_pair(queries); i >= 0)
        throw std::runtime_error("synthesize_dataset: query directions " + std::to_string(i) +
                                 " and " + std::to_string(j) +
                                 " came out parallel; this should be unreachable");
    return queries;
}

inline std::vector<double> unit_vector_from(Rng& rng, std::size_t dim) {
    std::vector<double> v;
    double n = 0.0;
    do {
        v = sample_gaussian_vector(rng, dim);
        n = norm2(v);
    } while (n == 0.0);
    for (double& c : v) c /= n;
    return v;
}

}  // namespace detail

// Draw the run's data. Sub-streams for inputs, queries, the frozen teacher,
// and collocation points are derived from `rng` in a fixed order, so the
// teacher is independent of the student data and every mode consumes the
// stream identically.
inline LabData synthesize_dataset(const ExperimentConfig& cfg, Rng& rng) {
    validate_config(cfg);
    const std::uint64_t input_seed = rng.next_u64();
    const std::uint64_t query_seed = rng.next_u64();
    const std::uint64_t teacher_seed = rng.next_u64();
    const std::uint64_t collocation_seed = rng.next_u64();

    LabData out;
    Rng irng(input_seed, 1);
    out.dataset.inputs = detail::sample_input_functions(irng, cfg.n1, cfg.q);
    if (auto [i, j] = find_parallel_pair(out.dataset.inputs); i >= 0)
        throw std::runtime_error("synthesize_dataset: inputs " + std::to_string(i) + " and " +
                                 std::to_string(j) +
                                 " came out parallel; this should be unreachable");

    if (cfg.mode == LabMode::Pinn) {
        Rng crng(collocation_seed, 4);
        out.problem = make_ball_problem(cfg.d, cfg.n2, cfg.n3, crng);
        Rng trng(teacher_seed, 3);
        const OperatorWeights teacher = init_weights(detail::kTeacherWidth,
                                                     detail::kTeacherBranch, cfg.q, cfg.d + 1,
                                                     trng, Activation::Relu3);
        const std::vector<double> probe = detail::unit_vector_from(trng, cfg.q);
        set_teacher_data(out.problem, teacher, probe);
        return out;
    }

    Rng qrng(query_seed, 2);
    out.dataset.queries = detail::sample_query_directions(qrng, cfg.n2, cfg.d);
    if (cfg.mode == LabMode::Supervised) {
        Rng trng(teacher_seed, 3);
        const OperatorWeights teacher = init_weights(detail::kTeacherWidth,
                                                     detail::kTeacherBranch, cfg.q, cfg.d, trng);
        out.dataset.targets.resize(cfg.n1 * cfg.n2);
        for (std::size_t i = 0; i < cfg.n1; ++i)
            for (std::size_t j = 0; j < cfg.n2; ++j)
                out.dataset.targets[flat_index(i, j, cfg.n2)] =
                    forward(teacher, out.dataset.inputs[i], out.dataset.queries[j]);
    }
    return out;
}

// ---------------------------------------------------------------------------
// Scaling-law fits.
// ---------------------------------------------------------------------------

struct SlopeFit {
    double slope = 0.0;
    double se = 0.0;       // standard error of the slope
    double ci_half = 0.0;  // 1.96 * se, the 95 percent half-width
    std::size_t count = 0;
};

// Least-squares slope of log value against log m. Needs at least four distinct
// widths so the residual variance (and hence the interval) is meaningful.
inline SlopeFit fit_scaling_slope(const std::vector<std::pair<double, double>>& points) {
    std::vector<double> distinct;
    for (const auto& [m, value] : points) {
        if (!(m > 0.0) || !(value > 0.0))
            throw std::invalid_argument("fit_scaling_slope: widths and values must be positive");
        distinct.push_back(m);
    }
    std::sort(distinct.begin(), distinct.end());
    distinct.erase(std::unique(distinct.begin(), distinct.end()), distinct.end());
    if (distinct.size() < 4)
        throw std::invalid_argument("fit_scaling_slope: need at least 4 distinct widths");

    const double n = static_cast<double>(points.size());
    double mx = 0.0, my = 0.0;
    for (const auto& [m, value] : points) {
        mx += std::log(m);
        my += std::log(value);
    }
    mx /= n;
    my /= n;
    double sxx = 0.0, sxy = 0.0;
    for (const auto& [m, value] : points) {
        const double dx = std::log(m) - mx;
        sxx += dx * dx;
        sxy += dx * (std::log(value) - my);
    }
    SlopeFit fit;
    fit.count = points.size();
    fit.slope = sxy / sxx;
    const double intercept = my - fit.slope * mx;
    double rss = 0.0;
    for (const auto& [m, value] : points) {
        const double r = std::log(value) - (intercept + fit.slope * std::log(m));
        rss += r * r;
    }
    fit.se = std::sqrt(rss / (n - 2.0) / sxx);
    fit.ci_half = 1.96 * fit.se;
    return fit;
}

// ---------------------------------------------------------------------------
// Run orchestration.
// ---------------------------------------------------------------------------

enum class RunKind : std::uint8_t { Kernel, Train, PinnTrain, SweepM };

namespace detail {

// Slope acceptance bands: concentration and drift scale like 1 / sqrt(m), the
// linearization defect band is looser on purpose. Both reflect finite-width
// and finite-seed noise at desk scale and are deliberate constants, not
// config.
constexpr double kSqrtBandLo = -0.65;
constexpr double kSqrtBandHi = -0.35;
constexpr double kDefectBandLo = -0.7;
constexpr double kDefectBandHi = -0.3;
constexpr double kLamStableFactor = 0.5;
constexpr std::size_t kLamStableMinWidth = 2048;

inline std::string format_g6(double v) {
    char buf[64];
    std::snprintf(buf, sizeof(buf), "%.6g", v);
    return buf;
}

inline const char* provenance_name(GramProvenance p) {
    switch (p) {
        case GramProvenance::Empirical: return "empirical";
        case GramProvenance::InfiniteWidth: return "infinite-width";
        case GramProvenance::MonteCarlo: return "monte-carlo";
    }
    return "empirical";
}

inline void write_gram_text(const std::filesystem::path& path, const char* name,
                            const BlockGram& gram) {
    std::ofstream out(path, std::ios::binary);
    if (!out) throw std::runtime_error("gram export: cannot open " + path.string());
    out << "# ntklab gram: " << name << " provenance=" << provenance_name(gram.provenance)
        << " n1=" << gram.n1 << " block=" << gram.block << '\n';
    out << gram.mat.rows() << ' ' << gram.mat.cols() << '\n';
    for (std::size_t r = 0; r < gram.mat.rows(); ++r) {
        for (std::size_t c = 0; c < gram.mat.cols(); ++c)
            out << format_g17(gram.mat(r, c)) << (c + 1 < gram.mat.cols() ? ' ' : '\n');
    }
    if (!out) throw std::runtime_error("gram export: write failed for " + path.string());
}

inline double frob_gap(const DenseMatrix& a, const DenseMatrix& b) {
    double s = 0.0;
    for (std::size_t r = 0; r < a.rows(); ++r)
        for (std::size_t c = 0; c < a.cols(); ++c) {
            const double d = a(r, c) - b(r, c);
            s += d * d;
        }
    return std::sqrt(s);
}

inline nlohmann::ordered_json config_json(const ExperimentConfig& cfg) {
    nlohmann::ordered_json c;
    c["mode"] = mode_name(cfg.mode);
    c["n1"] = cfg.n1;
    c["n2"] = cfg.n2;
    c["n3"] = cfg.n3;
    c["d"] = cfg.d;
    c["q"] = cfg.q;
    c["p"] = cfg.p;
    c["m"] = cfg.widths;
    if (cfg.eta > 0.0)
        c["eta"] = cfg.eta;
    else
        c["eta"] = "auto";
    c["steps"] = cfg.steps;
    c["seeds"] = cfg.seeds;
    c["delta"] = cfg.delta;
    c["cadence"] = cfg.cadence;
    c["mc_samples"] = cfg.mc_samples;
    c["export_grams"] = cfg.export_grams;
    c["out"] = cfg.out_dir;
    return c;
}

inline nlohmann::ordered_json summary_skeleton(const ExperimentConfig& cfg, const char* kind) {
    nlohmann::ordered_json j;
    j["schema_version"] = 1;
    j["kind"] = kind;
    j["mode"] = mode_name(cfg.mode);
    j["complete"] = false;
    j["config"] = config_json(cfg);
    j["results"] = nlohmann::ordered_json::object();
    return j;
}

inline void write_summary_file(const std::filesystem::path& path,
                               const nlohmann::ordered_json& j) {
    std::ofstream out(path, std::ios::binary);
    if (!out) throw std::runtime_error("summary: cannot open " + path.string());
    out << j.dump(2) << '\n';
    if (!out) throw std::runtime_error("summary: write failed for " + path.string());
}

// Shared run envelope: validate, run the body, and write the summary whether
// or not the body survives. A summary with "complete": false plus "error" is
// the incomplete-output flag; the original exception continues upward.
template <typename Body>
nlohmann::ordered_json run_guarded(const ExperimentConfig& cfg, const char* kind,
                                   const char* summary_name, Body&& body) {
    validate_config(cfg);
    std::filesystem::create_directories(cfg.out_dir);
    nlohmann::ordered_json j = summary_skeleton(cfg, kind);
    const std::filesystem::path path = std::filesystem::path(cfg.out_dir) / summary_name;
    try {
        body(j["results"]);
    } catch (const std::exception& e) {
        j["error"] = e.what();
        write_summary_file(path, j);
        throw;
    }
    j["complete"] = true;
    write_summary_file(path, j);
    return j;
}

// Weight streams are keyed off the width so every (seed, m) cell is its own
// reproducible draw; the offset keeps them clear of the data sub-streams.
inline Rng weight_rng(std::uint64_t seed, std::size_t m) { return Rng(seed, 1000 + m); }

struct TraceMetrics {
    double final_loss = 0.0;
    double drift_w = 0.0;
    double drift_wt = 0.0;
    double defect_ratio_mean = 0.0;  // mean over stepped rows of |I| / |residual|
    double lam_ratio_min = 0.0;      // min_t lam_H(t) / lam_H(0)
    bool envelope_ok = true;
};

inline TraceMetrics trace_metrics(const TrainingTrace& trace, long steps) {
    TraceMetrics m;
    m.final_loss = trace.rows.back().loss;
    m.drift_w = trace.rows.back().drift_w;
    m.drift_wt = trace.rows.back().drift_wt;
    double acc = 0.0;
    std::size_t cnt = 0;
    const double lam0 = trace.rows.front().lam_H;
    double ratio = lam0 > 0.0 ? 1.0 : 0.0;
    for (const TraceRow& row : trace.rows) {
        if (row.iter < steps && row.res_norm > 0.0) {
            acc += row.I_norm / row.res_norm;
            ++cnt;
        }
        if (lam0 > 0.0) ratio = std::min(ratio, row.lam_H / lam0);
        if (row.loss > row.bound * (1.0 + 1e-12)) m.envelope_ok = false;
    }
    m.defect_ratio_mean = cnt > 0 ? acc / static_cast<double>(cnt) : 0.0;
    m.lam_ratio_min = ratio;
    return m;
}

inline nlohmann::ordered_json slope_json(const SlopeFit& fit, double band_lo, double band_hi) {
    nlohmann::ordered_json s;
    s["slope"] = fit.slope;
    s["se"] = fit.se;
    s["ci_half"] = fit.ci_half;
    s["points"] = fit.count;
    s["band"] = {band_lo, band_hi};
    s["in_band"] = fit.slope >= band_lo && fit.slope <= band_hi;
    return s;
}

}  // namespace detail

// Kernel-only run: the width-limit Grams of the synthesized data and their
// least eigenvalues. Supervised and kernel-only configs use the closed forms;
// physics-informed configs use the sampling estimator, whose error bar is
// reported alongside.
inline nlohmann::ordered_json run_kernel(const ExperimentConfig& cfg) {
    return detail::run_guarded(cfg, "kernel", "summary_kernel.json",
                               [&](nlohmann::ordered_json& res) {
        const std::uint64_t seed = cfg.seeds.front();
        Rng master(seed, 1);
        const LabData lab = synthesize_dataset(cfg, master);
        const std::filesystem::path dir(cfg.out_dir);
        res["seed"] = seed;
        if (cfg.mode == LabMode::Pinn) {
            Rng mcr(seed, 2);
            const PinnLimit lim =
                pinn_infinite_width_mc(lab.problem, lab.dataset, cfg.mc_samples, mcr);
            detail::write_gram_text(dir / "gram_Hinf.txt", "Hinf", lim.H);
            detail::write_gram_text(dir / "gram_Htinf.txt", "Htinf", lim.Htilde);
            res["dim"] = lim.H.dim();
            res["lambda0"] = min_eigenvalue(lim.H.mat);
            res["lambda0_tilde"] = min_eigenvalue(lim.Htilde.mat);
            res["mc_samples"] = cfg.mc_samples;
            res["mc_max_se"] = lim.max_se;
        } else {
            const BlockGram hinf = analytic_Hinf(lab.dataset);
            const BlockGram htinf = analytic_Htilde_inf(lab.dataset);
            detail::write_gram_text(dir / "gram_Hinf.txt", "Hinf", hinf);
            detail::write_gram_text(dir / "gram_Htinf.txt", "Htinf", htinf);
            res["dim"] = hinf.dim();
            res["lambda0"] = min_eigenvalue(hinf.mat);
            res["lambda0_tilde"] = min_eigenvalue(htinf.mat);
        }
        res["files"] = {"gram_Hinf.txt", "gram_Htinf.txt"};
    });
}

namespace detail {

inline void fill_train_results(nlohmann::ordered_json& res, const TrainingTrace& trace,
                               std::size_t m, std::uint64_t seed, const std::string& trace_file) {
    const TraceMetrics tm = trace_metrics(trace, trace.rows.back().iter);
    res["m"] = m;
    res["seed"] = seed;
    res["eta"] = trace.eta;
    res["steps"] = trace.rows.back().iter;
    res["res0_norm2"] = trace.res0_norm2;
    res["final_loss"] = tm.final_loss;
    if (tm.final_loss > 0.0)
        res["reduction"] = trace.res0_norm2 / tm.final_loss;
    else
        res["reduction"] = nullptr;
    res["lam0_H"] = trace.lam0_H;
    res["lam0_Ht"] = trace.lam0_Ht;
    res["lambda_hat"] = trace.lambda_hat;
    res["spec_H0"] = trace.spec_H0;
    res["spec_Ht0"] = trace.spec_Ht0;
    res["envelope_ok"] = tm.envelope_ok;
    res["max_recursion_defect"] = trace.max_recursion_defect;
    res["drift_w_final"] = tm.drift_w;
    res["drift_wt_final"] = tm.drift_wt;
    res["radius_trunk"] = trace.radius_trunk;
    res["radius_branch"] = trace.radius_branch;
    res["trace_file"] = trace_file;
}

}  // namespace detail

// Supervised descent at the first configured width and seed, with the one-step
// identity checked at every logged row.
inline nlohmann::ordered_json run_train(const ExperimentConfig& cfg) {
    if (cfg.mode != LabMode::Supervised)
        throw std::invalid_argument("train: config mode must be supervised");
    return detail::run_guarded(cfg, "train", "summary_train.json",
                               [&](nlohmann::ordered_json& res) {
        const std::uint64_t seed = cfg.seeds.front();
        const std::size_t m = cfg.widths.front();
        Rng master(seed, 1);
        const LabData lab = synthesize_dataset(cfg, master);
        Rng wrng = detail::weight_rng(seed, m);
        OperatorWeights w = init_weights(m, cfg.p, cfg.q, cfg.d, wrng);
        const std::filesystem::path dir(cfg.out_dir);
        if (cfg.export_grams) {
            detail::write_gram_text(dir / "gram_H0.txt", "H0", empirical_H(w, lab.dataset));
            detail::write_gram_text(dir / "gram_Ht0.txt", "Ht0",
                                    empirical_Htilde(w, lab.dataset));
        }
        TrainOptions opt;
        opt.eta = cfg.eta;
        opt.steps = cfg.steps;
        opt.cadence = cfg.cadence;
        opt.delta = cfg.delta;
        opt.check_recursion = true;
        const TrainingTrace trace = train(w, lab.dataset, opt);
        const std::string trace_file =
            "trace_train_m" + std::to_string(m) + "_s" + std::to_string(seed) + ".csv";
        write_trace_csv(trace, (dir / trace_file).string());
        detail::fill_train_results(res, trace, m, seed, trace_file);
    });
}

// Physics-informed descent at the first configured width and seed.
inline nlohmann::ordered_json run_pinn_train(const ExperimentConfig& cfg) {
    if (cfg.mode != LabMode::Pinn)
        throw std::invalid_argument("pinn-train: config mode must be pinn");
    return detail::run_guarded(cfg, "pinn-train", "summary_pinn_train.json",
                               [&](nlohmann::ordered_json& res) {
        const std::uint64_t seed = cfg.seeds.front();
        const std::size_t m = cfg.widths.front();
        Rng master(seed, 1);
        const LabData lab = synthesize_dataset(cfg, master);
        Rng wrng = detail::weight_rng(seed, m);
        OperatorWeights w = init_weights(m, cfg.p, cfg.q, cfg.d + 1, wrng, Activation::Relu3);
        const std::filesystem::path dir(cfg.out_dir);
        if (cfg.export_grams) {
            const auto [h0, ht0] = pinn_gram(w, lab.problem, lab.dataset);
            detail::write_gram_text(dir / "gram_H0.txt", "H0", h0);
            detail::write_gram_text(dir / "gram_Ht0.txt", "Ht0", ht0);
        }
        TrainOptions opt;
        opt.eta = cfg.eta;
        opt.steps = cfg.steps;
        opt.cadence = cfg.cadence;
        opt.delta = cfg.delta;
        opt.check_recursion = true;
        const TrainingTrace trace = pinn_train(w, lab.problem, lab.dataset, opt);
        const std::string trace_file =
            "trace_pinn_m" + std::to_string(m) + "_s" + std::to_string(seed) + ".csv";
        write_pinn_trace_csv(trace, (dir / trace_file).string());
        detail::fill_train_results(res, trace, m, seed, trace_file);
        res["final_interior_norm"] = trace.rows.back().s_norm;
        res["final_boundary_norm"] = trace.rows.back().h_norm;
        res["weight_norm_bound"] = trace.weight_norm_bound;
    });
}

// Width sweep: one trace per (width, seed) cell, per-width means of the
// concentration gaps, final drifts, and defect ratios, and fitted scaling
// slopes with confidence intervals when at least four distinct widths are
// swept. Cells are computed in a fixed order and consumed by a single
// aggregation pass, so the sweep is deterministic end to end.
inline nlohmann::ordered_json run_sweep(const ExperimentConfig& cfg) {
    if (cfg.mode == LabMode::KernelOnly)
        throw std::invalid_argument("sweep-m: config mode must be supervised or pinn");
    return detail::run_guarded(cfg, "sweep-m", "summary_sweep.json",
                               [&](nlohmann::ordered_json& res) {
        const std::filesystem::path dir(cfg.out_dir);
        struct Cell {
            std::size_t m = 0;
            std::uint64_t seed = 0;
            double gap_h = 0.0, gap_ht = 0.0;
            detail::TraceMetrics tm;
            double res0_norm2 = 0.0;
            std::string trace_file;
        };
        std::vector<Cell> cells;

        for (const std::uint64_t seed : cfg.seeds) {
            Rng master(seed, 1);
            const LabData lab = synthesize_dataset(cfg, master);
            DenseMatrix hinf_mat, htinf_mat;
            if (cfg.mode == LabMode::Pinn) {
                Rng mcr(seed, 2);
                PinnLimit lim =
                    pinn_infinite_width_mc(lab.problem, lab.dataset, cfg.mc_samples, mcr);
                hinf_mat = std::move(lim.H.mat);
                htinf_mat = std::move(lim.Htilde.mat);
            } else {
                hinf_mat = analytic_Hinf(lab.dataset).mat;
                htinf_mat = analytic_Htilde_inf(lab.dataset).mat;
            }
            for (const std::size_t m : cfg.widths) {
                Cell cell;
                cell.m = m;
                cell.seed = seed;
                Rng wrng = detail::weight_rng(seed, m);
                TrainOptions opt;
                opt.eta = cfg.eta;
                opt.steps = cfg.steps;
                opt.cadence = cfg.cadence;
                opt.delta = cfg.delta;
                cell.trace_file = "trace_sweep_m" + std::to_string(m) + "_s" +
                                  std::to_string(seed) + ".csv";
                TrainingTrace trace;
                if (cfg.mode == LabMode::Pinn) {
                    OperatorWeights w =
                        init_weights(m, cfg.p, cfg.q, cfg.d + 1, wrng, Activation::Relu3);
                    const auto [h0, ht0] = pinn_gram(w, lab.problem, lab.dataset);
                    cell.gap_h = detail::frob_gap(h0.mat, hinf_mat);
                    cell.gap_ht = detail::frob_gap(ht0.mat, htinf_mat);
                    trace = pinn_train(w, lab.problem, lab.dataset, opt);
                    write_pinn_trace_csv(trace, (dir / cell.trace_file).string());
                } else {
                    OperatorWeights w = init_weights(m, cfg.p, cfg.q, cfg.d, wrng);
                    cell.gap_h = detail::frob_gap(empirical_H(w, lab.dataset).mat, hinf_mat);
                    cell.gap_ht =
                        detail::frob_gap(empirical_Htilde(w, lab.dataset).mat, htinf_mat);
                    trace = train(w, lab.dataset, opt);
                    write_trace_csv(trace, (dir / cell.trace_file).string());
                }
                cell.tm = detail::trace_metrics(trace, trace.rows.back().iter);
                cell.res0_norm2 = trace.res0_norm2;
                cells.push_back(std::move(cell));
            }
        }

        res["cells"] = nlohmann::ordered_json::array();
        for (const Cell& cell : cells) {
            nlohmann::ordered_json c;
            c["m"] = cell.m;
            c["seed"] = cell.seed;
            c["gap_H"] = cell.gap_h;
            c["gap_Ht"] = cell.gap_ht;
            c["res0_norm2"] = cell.res0_norm2;
            c["final_loss"] = cell.tm.final_loss;
            c["drift_w_final"] = cell.tm.drift_w;
            c["drift_wt_final"] = cell.tm.drift_wt;
            c["defect_ratio_mean"] = cell.tm.defect_ratio_mean;
            c["lam_ratio_min"] = cell.tm.lam_ratio_min;
            c["trace_file"] = cell.trace_file;
            res["cells"].push_back(std::move(c));
        }

        // Per-width means over seeds, in ascending width order.
        std::map<std::size_t, std::array<double, 5>> sums;
        std::map<std::size_t, double> counts;
        for (const Cell& cell : cells) {
            auto& s = sums[cell.m];
            s[0] += cell.gap_h;
            s[1] += cell.gap_ht;
            s[2] += cell.tm.drift_w;
            s[3] += cell.tm.drift_wt;
            s[4] += cell.tm.defect_ratio_mean;
            counts[cell.m] += 1.0;
        }
        res["per_m"] = nlohmann::ordered_json::array();
        std::vector<std::pair<double, double>> pts_gap_h, pts_gap_ht, pts_drift_w, pts_drift_wt,
            pts_defect;
        for (const auto& [m, s] : sums) {
            const double c = counts[m];
            nlohmann::ordered_json row;
            row["m"] = m;
            row["gap_H_mean"] = s[0] / c;
            row["gap_Ht_mean"] = s[1] / c;
            row["drift_w_mean"] = s[2] / c;
            row["drift_wt_mean"] = s[3] / c;
            row["defect_ratio_mean"] = s[4] / c;
            res["per_m"].push_back(std::move(row));
            const double md = static_cast<double>(m);
            pts_gap_h.emplace_back(md, s[0] / c);
            pts_gap_ht.emplace_back(md, s[1] / c);
            pts_drift_w.emplace_back(md, s[2] / c);
            pts_drift_wt.emplace_back(md, s[3] / c);
            pts_defect.emplace_back(md, s[4] / c);
        }

        bool positive = true;
        for (const auto& series : {pts_gap_h, pts_gap_ht, pts_drift_w, pts_drift_wt, pts_defect})
            for (const auto& [m, v] : series)
                if (!(v > 0.0)) positive = false;
        if (sums.size() >= 4 && positive) {
            nlohmann::ordered_json slopes;
            slopes["fitted"] = true;
            slopes["gap_H"] = detail::slope_json(fit_scaling_slope(pts_gap_h),
                                                 detail::kSqrtBandLo, detail::kSqrtBandHi);
            slopes["gap_Ht"] = detail::slope_json(fit_scaling_slope(pts_gap_ht),
                                                  detail::kSqrtBandLo, detail::kSqrtBandHi);
            slopes["drift_w"] = detail::slope_json(fit_scaling_slope(pts_drift_w),
                                                   detail::kSqrtBandLo, detail::kSqrtBandHi);
            slopes["drift_wt"] = detail::slope_json(fit_scaling_slope(pts_drift_wt),
                                                    detail::kSqrtBandLo, detail::kSqrtBandHi);
            slopes["defect_ratio"] = detail::slope_json(fit_scaling_slope(pts_defect),
                                                        detail::kDefectBandLo,
                                                        detail::kDefectBandHi);
            res["slopes"] = std::move(slopes);
        } else {
            nlohmann::ordered_json slopes;
            slopes["fitted"] = false;
            slopes["reason"] = sums.size() < 4 ? "fewer than 4 distinct widths"
                                               : "a per-width mean was not positive";
            res["slopes"] = std::move(slopes);
        }

        // Spectrum stability across training, judged on the wide cells only.
        std::size_t stable_cells = 0;
        bool stable = true;
        for (const Cell& cell : cells)
            if (cell.m >= detail::kLamStableMinWidth) {
                ++stable_cells;
                if (cell.tm.lam_ratio_min < detail::kLamStableFactor) stable = false;
            }
        res["lam_stability"] = {{"cells", stable_cells},
                                {"threshold", detail::kLamStableFactor},
                                {"stable", stable_cells > 0 ? stable : false}};
    });
}

inline nlohmann::ordered_json run(const ExperimentConfig& cfg, RunKind kind) {
    switch (kind) {
        case RunKind::Kernel: return run_kernel(cfg);
        case RunKind::Train: return run_train(cfg);
        case RunKind::PinnTrain: return run_pinn_train(cfg);
        case RunKind::SweepM: return run_sweep(cfg);
    }
    throw std::invalid_argument("run: unknown kind");
}

// ---------------------------------------------------------------------------
// Report consolidation.
// ---------------------------------------------------------------------------

// Read every summary_*.json in the output directory (sorted by name), one
// line each, and write the consolidated report.txt next to them. Returns the
// report text.
inline std::string run_report(const ExperimentConfig& cfg) {
    validate_config(cfg);
    const std::filesystem::path dir(cfg.out_dir);
    if (!std::filesystem::is_directory(dir))
        throw std::runtime_error("report: no such directory: " + cfg.out_dir);

    std::vector<std::filesystem::path> files;
    for (const auto& entry : std::filesystem::directory_iterator(dir)) {
        const std::string name = entry.path().filename().string();
        if (name.rfind("summary_", 0) == 0 && name.size() > 5 &&
            name.substr(name.size() - 5) == ".json")
            files.push_back(entry.path());
    }
    std::sort(files.begin(), files.end());

    std::string text = "ntklab report: " + cfg.out_dir + "\n";
    if (files.empty()) text += "no summaries found\n";
    for (const auto& file : files) {
        std::ifstream in(file, std::ios::binary);
        std::string raw((std::istreambuf_iterator<char>(in)), std::istreambuf_iterator<char>());
        std::string line = file.filename().string() + ": ";
        try {
            const nlohmann::json j = nlohmann::json::parse(raw);
            const std::string kind = j.value("kind", "?");
            line += kind + " (" + j.value("mode", std::string("?")) + ")";
            const auto& r = j.contains("results") ? j["results"] : nlohmann::json::object();
            if (kind == "kernel") {
                if (r.contains("lambda0"))
                    line += " lambda0=" + detail::format_g6(r["lambda0"].get<double>()) +
                            " lambda0_tilde=" +
                            detail::format_g6(r["lambda0_tilde"].get<double>());
            } else if (kind == "train" || kind == "pinn-train") {
                if (r.contains("final_loss"))
                    line += " m=" + r["m"].dump() + " seed=" + r["seed"].dump() +
                            " final_loss=" + detail::format_g6(r["final_loss"].get<double>());
                if (r.contains("reduction") && r["reduction"].is_number())
                    line += " reduction=" + detail::format_g6(r["reduction"].get<double>());
            } else if (kind == "sweep-m") {
                if (r.contains("slopes") && r["slopes"].value("fitted", false)) {
                    const auto& s = r["slopes"];
                    line += " slopes: gap_H=" +
                            detail::format_g6(s["gap_H"]["slope"].get<double>()) + " gap_Ht=" +
                            detail::format_g6(s["gap_Ht"]["slope"].get<double>()) + " drift_w=" +
                            detail::format_g6(s["drift_w"]["slope"].get<double>()) +
                            " drift_wt=" +
                            detail::format_g6(s["drift_wt"]["slope"].get<double>()) +
                            " defect=" +
                            detail::format_g6(s["defect_ratio"]["slope"].get<double>());
                } else {
                    line += " slopes not fitted";
                }
            }
            if (!j.value("complete", false)) line += " INCOMPLETE";
        } catch (const std::exception&) {
            line += "unreadable";
        }
        text += line + "\n";
    }

    const std::filesystem::path out_path = dir / "report.txt";
    std::ofstream out(out_path, std::ios::binary);
    if (!out) throw std::runtime_error("report: cannot open " + out_path.string());
    out << text;
    if (!out) throw std::runtime_error("report: write failed for " + out_path.string());
    return text;
}

}  // namespace ntklab
