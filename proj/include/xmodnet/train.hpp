#ifndef XMODNET_TRAIN_HPP
#define XMODNET_TRAIN_HPP

#include <atomic>
#include <cmath>
#include <cstdint>
#include <filesystem>
#include <fstream>
#include <functional>
#include <optional>
#include <string>
#include <thread>
#include <vector>

#include "json.hpp"

#include "xmodnet/checkpoint.hpp"
#include "xmodnet/data.hpp"
#include "xmodnet/model.hpp"
#include "xmodnet/rng.hpp"

namespace xmodnet {

// ---------------------------------------------------------------------------
// loss
// ---------------------------------------------------------------------------

inline constexpr double kLogClamp = 1e-12;

/// Mean negative log-likelihood of the true classes, log clamped at 1e-12.
template <typename T>
Tensor<T> nll_loss(Tape<T>& tape, const Tensor<T>& probs, const std::vector<std::size_t>& labels) {
    if (probs.rank() != 2 || probs.dim(0) != labels.size())
        throw ShapeError("nll_loss: probs " + shape_str(probs.shape()) + " vs " +
                         std::to_string(labels.size()) + " labels");
    const std::size_t t = probs.dim(0), n = probs.dim(1);
    for (std::size_t l : labels)
        if (l >= n) throw std::invalid_argument("nll_loss: label " + std::to_string(l) + " out of range");
    double acc = 0;
    for (std::size_t j = 0; j < t; ++j)
        acc -= std::log(std::max(double(probs[j * n + labels[j]]), kLogClamp));
    Tensor<T> out = Tensor<T>::scalar_of(T(acc / double(t)));
    if (tape.recording() && probs.requires_grad()) {
        out.set_requires_grad(true);
        Tensor<T> pc = probs, oc = out;
        tape.record(out, [pc, oc, labels, t, n]() mutable {
            const T g = oc.grad()[0];
            auto gp = pc.grad();
            for (std::size_t j = 0; j < t; ++j) {
                const double p = double(pc[j * n + labels[j]]);
                if (p > kLogClamp)  // clamped region has zero slope
                    gp[j * n + labels[j]] += T(-double(g) / (double(t) * p));
            }
        });
    }
    return out;
}

/// Episode loss: mean per-query cross-entropy of the matching distribution
/// plus the L1 penalty on the post-multipliers (zero for baseline models).
template <typename T>
Tensor<T> episode_loss(Tape<T>& tape, Network<T>& net, const Episode& episode, double l1_factor,
                       BnMode bn_mode) {
    auto probs = classify_episode(tape, net, episode, bn_mode);
    std::vector<std::size_t> labels(episode.query.size());
    for (std::size_t j = 0; j < labels.size(); ++j) labels[j] = episode.query[j].label;
    Tensor<T> loss = nll_loss(tape, probs, labels);
    if (l1_factor != 0.0 && !net.generators.empty()) {
        Tensor<T> penalty = Tensor<T>::scalar_of(T(0));
        for (auto& gen : net.generators) {
            penalty = add(tape, penalty, l1_norm(tape, gen.gamma0));
            penalty = add(tape, penalty, l1_norm(tape, gen.beta0));
        }
        loss = add(tape, loss, scale(tape, penalty, T(l1_factor)));
    }
    return loss;
}

// ---------------------------------------------------------------------------
// optimizer
// ---------------------------------------------------------------------------

struct TrainConfig {
    std::size_t way = 5;
    std::size_t shot = 1;
    std::size_t queries_per_class = 15;
    double lr_initial = 1e-3;
    std::size_t lr_halving_period = 100000;
    double l1_factor = 1e-3;
    std::size_t max_episodes = 300000;
    std::size_t eval_every = 5000;
    std::size_t val_episodes = 200;
    std::size_t val_queries_per_class = 15;
    std::uint64_t seed = 0;
    ModelKind model_kind = ModelKind::Baseline;
};

inline double lr_schedule(std::size_t episode_index, const TrainConfig& cfg) {
    const auto halvings = episode_index / cfg.lr_halving_period;
    return cfg.lr_initial * std::pow(0.5, double(halvings));
}

/// Adam moment buffers, one slot per parameter tensor.
template <typename T>
struct AdamState {
    static constexpr double kBeta1 = 0.9;
    static constexpr double kBeta2 = 0.999;
    static constexpr double kEps = 1e-8;

    std::size_t t = 0;
    std::vector<std::vector<T>> m, v;

    void ensure_initialized(const std::vector<std::pair<std::string, Tensor<T>>>& params) {
        if (!m.empty()) return;
        for (const auto& [_, p] : params) {
            m.emplace_back(p.size(), T(0));
            v.emplace_back(p.size(), T(0));
        }
    }
};

/// Bias-corrected Adam update. Gradients are validated (NaN aborts with the
/// parameter name) and zeroed after the step.
template <typename T>
void adam_step(std::vector<std::pair<std::string, Tensor<T>>>& params, AdamState<T>& state,
               double lr) {
    state.ensure_initialized(params);
    for (auto& [name, p] : params) {
        if (!p.has_grad()) continue;
        for (T g : p.grad_view())
            if (std::isnan(double(g)))
                throw std::runtime_error("adam_step: NaN gradient in parameter '" + name + "'");
    }
    state.t++;
    const double bc1 = 1.0 - std::pow(AdamState<T>::kBeta1, double(state.t));
    const double bc2 = 1.0 - std::pow(AdamState<T>::kBeta2, double(state.t));
    for (std::size_t i = 0; i < params.size(); ++i) {
        auto& p = params[i].second;
        auto& m = state.m[i];
        auto& v = state.v[i];
        const auto gv = p.grad_view();
        for (std::size_t j = 0; j < p.size(); ++j) {
            const double g = gv.empty() ? 0.0 : double(gv[j]);
            m[j] = T(AdamState<T>::kBeta1 * double(m[j]) + (1.0 - AdamState<T>::kBeta1) * g);
            v[j] = T(AdamState<T>::kBeta2 * double(v[j]) + (1.0 - AdamState<T>::kBeta2) * g * g);
            const double mhat = double(m[j]) / bc1;
            const double vhat = double(v[j]) / bc2;
            p[j] = T(double(p[j]) - lr * mhat / (std::sqrt(vhat) + AdamState<T>::kEps));
        }
        p.zero_grad();
    }
}

// ---------------------------------------------------------------------------
// evaluation
// ---------------------------------------------------------------------------

struct EvalReport {
    double mean_accuracy = 0;
    double ci95_halfwidth = 0;
    std::size_t episode_count = 0;
    std::vector<double> per_episode_accuracies;
    std::uint64_t seed = 0;
};

/// mean and 1.96 * stddev / sqrt(n) over per-episode accuracies
/// (sample stddev, n-1 denominator).
inline EvalReport make_eval_report(std::vector<double> accuracies, std::uint64_t seed) {
    EvalReport r;
    r.seed = seed;
    r.episode_count = accuracies.size();
    r.per_episode_accuracies = std::move(accuracies);
    if (r.episode_count == 0) return r;
    double sum = 0;
    for (double a : r.per_episode_accuracies) sum += a;
    r.mean_accuracy = sum / double(r.episode_count);
    if (r.episode_count > 1) {
        double sq = 0;
        for (double a : r.per_episode_accuracies) {
            const double d = a - r.mean_accuracy;
            sq += d * d;
        }
        const double stddev = std::sqrt(sq / double(r.episode_count - 1));
        r.ci95_halfwidth = 1.96 * stddev / std::sqrt(double(r.episode_count));
    }
    return r;
}

struct EvalOptions {
    std::size_t episodes = 1000;
    std::size_t way = 5;
    std::size_t shot = 1;
    std::size_t queries_per_class = 15;
    std::uint64_t seed = 0;
    std::size_t workers = 1;
    BnMode bn_mode = BnMode::Eval;
};

/// Episode accuracy: fraction of queries whose argmax class (first-index
/// tie-break) is the true one.
template <typename T>
double episode_accuracy(const Tensor<T>& probs, const Episode& episode) {
    const std::size_t t = episode.query.size(), n = episode.way;
    std::size_t correct = 0;
    for (std::size_t j = 0; j < t; ++j) {
        std::size_t best = 0;
        for (std::size_t c = 1; c < n; ++c)
            if (probs[j * n + c] > probs[j * n + best]) best = c;
        if (best == episode.query[j].label) ++correct;
    }
    return double(correct) / double(t);
}

/// Generic evaluation driver: `classify(episode_index, episode)` returns the
/// [T,N] distribution. Episode content depends only on (seed, index), and
/// per-episode accuracies are aggregated in index order, so the report is
/// identical for any worker count.
template <typename ClassifyFn>
EvalReport evaluate_with(ClassifyFn&& classify, const DatasetSplit& split, const EvalOptions& opts) {
    std::vector<double> acc(opts.episodes, 0.0);
    const auto run_one = [&](std::size_t i) {
        Rng rng = Rng::for_stream(opts.seed, i);
        Episode ep = sample_episode(split, opts.way, opts.shot, opts.queries_per_class, rng);
        acc[i] = episode_accuracy(classify(i, ep), ep);
    };
    const std::size_t workers = std::max<std::size_t>(1, opts.workers);
    if (workers == 1) {
        for (std::size_t i = 0; i < opts.episodes; ++i) run_one(i);
    } else {
        std::atomic<std::size_t> next{0};
        std::vector<std::thread> threads;
        std::vector<std::exception_ptr> errors(workers);
        for (std::size_t w = 0; w < workers; ++w)
            threads.emplace_back([&, w] {
                try {
                    for (std::size_t i = next++; i < opts.episodes; i = next++) run_one(i);
                } catch (...) {
                    errors[w] = std::current_exception();
                }
            });
        for (auto& th : threads) th.join();
        for (auto& e : errors)
            if (e) std::rethrow_exception(e);
    }
    return make_eval_report(std::move(acc), opts.seed);
}

/// Model evaluation over `opts.episodes` fresh episodes.
template <typename T>
EvalReport evaluate(Network<T>& net, const DatasetSplit& split, const EvalOptions& opts) {
    if (opts.bn_mode == BnMode::Train)
        throw std::invalid_argument("evaluate: train-mode batch norm would corrupt running stats");
    return evaluate_with(
        [&](std::size_t, const Episode& ep) {
            Tape<T> tape(false);
            return classify_episode(tape, net, ep, opts.bn_mode);
        },
        split, opts);
}

// ---------------------------------------------------------------------------
// training loop
// ---------------------------------------------------------------------------

struct TrainResult {
    double best_val_accuracy = -1.0;
    std::size_t episodes_run = 0;
    std::vector<float> losses;  // one per episode, in order
};

struct TrainArtifacts {
    std::filesystem::path checkpoint_final;   // model at the last episode
    std::filesystem::path checkpoint_best;    // model at the best val accuracy
    std::filesystem::path optimizer_state;    // sibling of checkpoint_final
    std::filesystem::path log;                // JSONL: {episode, loss, lr, val_acc?}
};

inline TrainArtifacts train_artifact_paths(const std::filesystem::path& output_dir) {
    return {output_dir / "checkpoint_final.xmn", output_dir / "checkpoint_best.xmn",
            output_dir / "checkpoint_final.opt.xmn", output_dir / "train_log.jsonl"};
}

template <typename T>
void save_optimizer_state(const std::filesystem::path& path, const AdamState<T>& state,
                          const std::vector<std::pair<std::string, Tensor<T>>>& params,
                          std::size_t next_episode, double best_val_accuracy) {
    std::vector<NamedTensorF> records;
    records.push_back({"adam.t", {1}, {float(state.t)}});
    records.push_back({"train.next_episode", {1}, {float(next_episode)}});
    records.push_back({"train.best_val_acc", {1}, {float(best_val_accuracy)}});
    for (std::size_t i = 0; i < params.size(); ++i) {
        NamedTensorF m{"adam.m." + params[i].first, params[i].second.shape(), {}};
        NamedTensorF v{"adam.v." + params[i].first, params[i].second.shape(), {}};
        for (T x : state.m[i]) m.values.push_back(float(x));
        for (T x : state.v[i]) v.values.push_back(float(x));
        records.push_back(std::move(m));
        records.push_back(std::move(v));
    }
    write_tensor_container(path, records);
}

/// Returns {next_episode, best_val_accuracy}.
template <typename T>
std::pair<std::size_t, double> load_optimizer_state(
    const std::filesystem::path& path, AdamState<T>& state,
    const std::vector<std::pair<std::string, Tensor<T>>>& params) {
    const auto records = read_tensor_container(path);
    std::map<std::string, const NamedTensorF*> by_name;
    for (const auto& r : records) by_name[r.name] = &r;
    state.m.clear();
    state.v.clear();
    const auto need = [&](const std::string& n) -> const NamedTensorF& {
        auto it = by_name.find(n);
        if (it == by_name.end())
            throw CheckpointError("missing record '" + n + "' in " + path.string());
        return *it->second;
    };
    state.t = std::size_t(need("adam.t").values.at(0));
    for (const auto& [name, p] : params) {
        const auto& m = need("adam.m." + name);
        const auto& v = need("adam.v." + name);
        if (m.values.size() != p.size() || v.values.size() != p.size())
            throw CheckpointError("optimizer state size mismatch for '" + name + "'");
        state.m.emplace_back(m.values.begin(), m.values.end());
        state.v.emplace_back(v.values.begin(), v.values.end());
    }
    return {std::size_t(need("train.next_episode").values.at(0)),
            double(need("train.best_val_acc").values.at(0))};
}

/// Episodic training. Deterministic given the seed: episode e is sampled from
/// Rng::for_stream(seed, e), so a resumed run continues the exact sequence.
/// Checkpoints at the best validation accuracy and at the end.
template <typename T>
TrainResult train(Network<T>& net, const TrainConfig& cfg, const DatasetSplit& train_split,
                  const DatasetSplit* val_split, const std::filesystem::path& output_dir,
                  std::size_t start_episode = 0, double best_val_accuracy = -1.0,
                  AdamState<T>* resumed_state = nullptr) {
    namespace fs = std::filesystem;
    const bool with_artifacts = !output_dir.empty();
    TrainArtifacts paths;
    std::ofstream log;
    if (with_artifacts) {
        fs::create_directories(output_dir);
        paths = train_artifact_paths(output_dir);
        log.open(paths.log, start_episode == 0 ? std::ios::trunc : std::ios::app);
        if (!log) throw std::runtime_error("cannot write training log: " + paths.log.string());
    }

    auto params = net.parameters();
    AdamState<T> local_state;
    AdamState<T>& state = resumed_state ? *resumed_state : local_state;
    state.ensure_initialized(params);

    TrainResult result;
    result.best_val_accuracy = best_val_accuracy;
    for (std::size_t e = start_episode; e < cfg.max_episodes; ++e) {
        Rng rng = Rng::for_stream(cfg.seed, e);
        Episode ep = sample_episode(train_split, cfg.way, cfg.shot, cfg.queries_per_class, rng);
        const double lr = lr_schedule(e, cfg);
        Tape<T> tape;
        Tensor<T> loss = episode_loss(tape, net, ep, cfg.l1_factor, BnMode::Train);
        const double loss_v = double(loss.item());
        if (!std::isfinite(loss_v))
            throw std::runtime_error("train: non-finite loss at episode " + std::to_string(e));
        backward(loss, tape);
        adam_step(params, state, lr);
        result.losses.push_back(float(loss_v));
        result.episodes_run++;

        nlohmann::json line;
        line["episode"] = e;
        line["loss"] = loss_v;
        line["lr"] = lr;
        const bool eval_now = val_split && cfg.eval_every > 0 && (e + 1) % cfg.eval_every == 0;
        if (eval_now) {
            EvalOptions vopts;
            vopts.episodes = cfg.val_episodes;
            vopts.way = cfg.way;
            vopts.shot = cfg.shot;
            vopts.queries_per_class = cfg.val_queries_per_class;
            vopts.seed = splitmix64(cfg.seed ^ 0x76616cULL) + e;
            const EvalReport rep = evaluate(net, *val_split, vopts);
            line["val_acc"] = rep.mean_accuracy;
            if (rep.mean_accuracy > result.best_val_accuracy) {
                result.best_val_accuracy = rep.mean_accuracy;
                if (with_artifacts) save_checkpoint(net, paths.checkpoint_best);
            }
        }
        if (with_artifacts) log << line.dump() << '\n';
    }

    if (with_artifacts) {
        save_checkpoint(net, paths.checkpoint_final);
        save_optimizer_state(paths.optimizer_state, state, params, cfg.max_episodes,
                             result.best_val_accuracy);
        if (result.best_val_accuracy < 0) save_checkpoint(net, paths.checkpoint_best);
        log.flush();
    }
    return result;
}

} // namespace xmodnet

#endif // XMODNET_TRAIN_HPP
