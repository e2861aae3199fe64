#ifndef XMODNET_ANALYSIS_HPP
#define XMODNET_ANALYSIS_HPP

#include <algorithm>
#include <array>
#include <cmath>
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <set>
#include <sstream>
#include <string>
#include <vector>

#include "json.hpp"

#include "xmodnet/model.hpp"
#include "xmodnet/train.hpp"

namespace xmodnet {

// ---------------------------------------------------------------------------
// noise ablation
// ---------------------------------------------------------------------------

/// Multiplicative distortion of the post-multipliers: for every targeted
/// block, each channel of gamma0 and beta0 is multiplied by a fresh draw from
/// N(mean, stddev^2) on every forward pass.
struct NoiseSpec {
    std::set<int> target_blocks;  // subset of {2,3,4}
    double mean = 1.0;
    double stddev = 0.3;
    std::uint64_t seed = 0;
};

inline FilmNoiseDraw make_noise_draw(const NoiseSpec& spec, std::uint64_t pass_index) {
    FilmNoiseDraw draw;
    Rng rng = Rng::for_stream(spec.seed ^ 0x6e6f697365ULL, pass_index);
    for (int block : {2, 3, 4}) {
        if (!spec.target_blocks.count(block)) continue;
        auto& g = draw.gamma_mul[block - 2];
        auto& b = draw.beta_mul[block - 2];
        g.resize(kFilters);
        b.resize(kFilters);
        for (auto& v : g) v = float(rng.normal(spec.mean, spec.stddev));
        for (auto& v : b) v = float(rng.normal(spec.mean, spec.stddev));
    }
    return draw;
}

/// Evaluation with the modulation mechanism distorted. Stored parameters are
/// never touched; the noise multiplies per-pass copies.
template <typename T>
EvalReport ablate_with_noise(Network<T>& net, const DatasetSplit& split, const NoiseSpec& spec,
                             const EvalOptions& opts) {
    if (net.kind != ModelKind::CrossMod)
        throw std::invalid_argument("ablate_with_noise: baseline model has no modulation to perturb");
    for (int b : spec.target_blocks)
        if (b < 2 || b > 4)
            throw std::invalid_argument("ablate_with_noise: block " + std::to_string(b) +
                                        " outside {2,3,4}");
    if (spec.stddev < 0) throw std::invalid_argument("ablate_with_noise: negative stddev");
    return evaluate_with(
        [&](std::size_t i, const Episode& ep) {
            const FilmNoiseDraw draw = make_noise_draw(spec, i);
            Tape<T> tape(false);
            return classify_episode(tape, net, ep, opts.bn_mode, &draw);
        },
        split, opts);
}

// ---------------------------------------------------------------------------
// post-multiplier statistics (per-block |gamma0| / |beta0| distributions)
// ---------------------------------------------------------------------------

struct ParamSummary {
    double min = 0, q1 = 0, median = 0, q3 = 0, max = 0, mean = 0;
    std::vector<double> values;  // absolute values, channel order
};

struct PostMultiplierStats {
    // index 0..2 = blocks 2..4
    std::array<ParamSummary, 3> gamma0, beta0;
};

inline double quantile_sorted(const std::vector<double>& sorted, double q) {
    if (sorted.empty()) return 0;
    const double pos = q * double(sorted.size() - 1);
    const std::size_t lo = std::size_t(pos);
    const std::size_t hi = std::min(lo + 1, sorted.size() - 1);
    const double frac = pos - double(lo);
    return sorted[lo] * (1.0 - frac) + sorted[hi] * frac;
}

template <typename T>
ParamSummary summarize_abs(const Tensor<T>& t) {
    ParamSummary s;
    s.values.reserve(t.size());
    for (T v : t.values()) s.values.push_back(std::abs(double(v)));
    std::vector<double> sorted = s.values;
    std::sort(sorted.begin(), sorted.end());
    s.min = sorted.front();
    s.max = sorted.back();
    s.q1 = quantile_sorted(sorted, 0.25);
    s.median = quantile_sorted(sorted, 0.5);
    s.q3 = quantile_sorted(sorted, 0.75);
    double acc = 0;
    for (double v : sorted) acc += v;
    s.mean = acc / double(sorted.size());
    return s;
}

template <typename T>
PostMultiplierStats postmultiplier_stats(const Network<T>& net) {
    if (net.kind != ModelKind::CrossMod)
        throw std::invalid_argument("postmultiplier_stats: baseline model has no post-multipliers");
    PostMultiplierStats stats;
    for (std::size_t g = 0; g < 3; ++g) {
        stats.gamma0[g] = summarize_abs(net.generators[g].gamma0);
        stats.beta0[g] = summarize_abs(net.generators[g].beta0);
    }
    return stats;
}

// ---------------------------------------------------------------------------
// generator weight decomposition (self- vs cross-modulation submatrices)
// ---------------------------------------------------------------------------

/// Mean L2 norm of the outgoing weight vectors, split by input half. With the
/// generator input ordered (self, other), rows 0..C-1 of W carry
/// self-modulation and rows C..2C-1 carry cross-modulation.
struct NormReport {
    std::array<double, 3> self_norm_mean{};   // blocks 2..4
    std::array<double, 3> cross_norm_mean{};
};

template <typename T>
NormReport generator_norm_decomposition(const Network<T>& net) {
    if (net.kind != ModelKind::CrossMod)
        throw std::invalid_argument("generator_norm_decomposition: baseline model has no generators");
    NormReport report;
    for (std::size_t g = 0; g < 3; ++g) {
        const auto& w = net.generators[g].W;
        const std::size_t rows = w.dim(0), cols = w.dim(1);
        const std::size_t c = rows / 2;
        double self_acc = 0, cross_acc = 0;
        for (std::size_t r = 0; r < rows; ++r) {
            double sq = 0;
            for (std::size_t j = 0; j < cols; ++j) {
                const double v = double(w[r * cols + j]);
                sq += v * v;
            }
            (r < c ? self_acc : cross_acc) += std::sqrt(sq);
        }
        report.self_norm_mean[g] = self_acc / double(c);
        report.cross_norm_mean[g] = cross_acc / double(c);
    }
    return report;
}

// ---------------------------------------------------------------------------
// report export
// ---------------------------------------------------------------------------

namespace detail {

inline std::string fmt_full(double v) {
    char buf[64];
    std::snprintf(buf, sizeof buf, "%.17g", v);
    return buf;
}

inline std::ofstream open_out(const std::filesystem::path& path) {
    std::ofstream out(path);
    if (!out) throw std::runtime_error("cannot write: " + path.string());
    return out;
}

} // namespace detail

inline void export_eval_report_json(const EvalReport& report, const std::filesystem::path& path) {
    nlohmann::json j;
    j["mean_accuracy"] = report.mean_accuracy;
    j["ci95_halfwidth"] = report.ci95_halfwidth;
    j["episode_count"] = report.episode_count;
    j["seed"] = report.seed;
    j["per_episode_accuracies"] = report.per_episode_accuracies;
    auto out = detail::open_out(path);
    out << j.dump(2) << '\n';
}

inline EvalReport parse_eval_report_json(const std::filesystem::path& path) {
    std::ifstream in(path);
    if (!in) throw std::runtime_error("cannot read: " + path.string());
    nlohmann::json j = nlohmann::json::parse(in);
    EvalReport r;
    r.mean_accuracy = j.at("mean_accuracy").get<double>();
    r.ci95_halfwidth = j.at("ci95_halfwidth").get<double>();
    r.episode_count = j.at("episode_count").get<std::size_t>();
    r.seed = j.at("seed").get<std::uint64_t>();
    r.per_episode_accuracies = j.at("per_episode_accuracies").get<std::vector<double>>();
    return r;
}

inline void export_norm_report_csv(const NormReport& report, const std::filesystem::path& path) {
    auto out = detail::open_out(path);
    out << "block,self_norm_mean,cross_norm_mean\n";
    for (std::size_t g = 0; g < 3; ++g)
        out << (g + 2) << ',' << detail::fmt_full(report.self_norm_mean[g]) << ','
            << detail::fmt_full(report.cross_norm_mean[g]) << '\n';
}

inline NormReport parse_norm_report_csv(const std::filesystem::path& path) {
    std::ifstream in(path);
    if (!in) throw std::runtime_error("cannot read: " + path.string());
    std::string line;
    std::getline(in, line);  // header
    NormReport r;
    while (std::getline(in, line)) {
        if (line.empty()) continue;
        std::istringstream ss(line);
        std::string block, self_s, cross_s;
        std::getline(ss, block, ',');
        std::getline(ss, self_s, ',');
        std::getline(ss, cross_s, ',');
        const int b = std::stoi(block);
        if (b < 2 || b > 4) throw std::runtime_error("bad block in " + path.string());
        r.self_norm_mean[b - 2] = std::stod(self_s);
        r.cross_norm_mean[b - 2] = std::stod(cross_s);
    }
    return r;
}

inline void export_postmultiplier_csv(const PostMultiplierStats& stats,
                                      const std::filesystem::path& path) {
    auto out = detail::open_out(path);
    out << "block,param,min,q1,median,q3,max,mean\n";
    for (std::size_t g = 0; g < 3; ++g) {
        const auto row = [&](const char* name, const ParamSummary& s) {
            out << (g + 2) << ',' << name << ',' << detail::fmt_full(s.min) << ','
                << detail::fmt_full(s.q1) << ',' << detail::fmt_full(s.median) << ','
                << detail::fmt_full(s.q3) << ',' << detail::fmt_full(s.max) << ','
                << detail::fmt_full(s.mean) << '\n';
        };
        row("gamma0", stats.gamma0[g]);
        row("beta0", stats.beta0[g]);
    }
}

/// One row per configuration: blocks_noised is "+"-joined block ids or "none".
struct AblationRow {
    std::set<int> blocks;
    EvalReport report;
};

inline void export_ablation_csv(const std::vector<AblationRow>& rows,
                                const std::filesystem::path& path) {
    auto out = detail::open_out(path);
    out << "blocks_noised,mean_acc,ci95,n,seed\n";
    for (const auto& row : rows) {
        if (row.blocks.empty()) {
            out << "none";
        } else {
            bool first = true;
            for (int b : row.blocks) {
                if (!first) out << '+';
                out << b;
                first = false;
            }
        }
        out << ',' << detail::fmt_full(row.report.mean_accuracy) << ','
            << detail::fmt_full(row.report.ci95_halfwidth) << ',' << row.report.episode_count << ','
            << row.report.seed << '\n';
    }
}

} // namespace xmodnet

#endif // XMODNET_ANALYSIS_HPP
