// xmodnet command line: train / eval / ablate / analyze / gradcheck / synth-data.
//
// Exit codes: 0 success, 1 runtime failure, 2 usage or config error.

#include <cstdio>
#include <filesystem>
#include <iostream>
#include <memory>
#include <set>
#include <sstream>
#include <string>
#include <vector>

#include "CLI11.hpp"

#include "xmodnet/analysis.hpp"
#include "xmodnet/checkpoint.hpp"
#include "xmodnet/config.hpp"
#include "xmodnet/dataset_io.hpp"
#include "xmodnet/gradcheck_suite.hpp"
#include "xmodnet/train.hpp"

using namespace xmodnet;
namespace fs = std::filesystem;

namespace {

// Defers CLI flag values so that precedence is defaults < config file < flags.
class ConfigBinder {
public:
    explicit ConfigBinder(CLI::App* app) : app_(app) {}

    template <typename T, typename F>
    void bind(const std::string& flag, const std::string& desc, F setter) {
        auto staged = std::make_shared<T>();
        CLI::Option* opt = app_->add_option(flag, *staged, desc);
        appliers_.push_back([staged, opt, setter](RunConfig& cfg) {
            if (opt->count() > 0) setter(cfg, *staged);
        });
        if (flag.find("--seed") == 0) seed_opt_ = opt;
        if (flag.find("--queries-per-class") == 0) queries_opt_ = opt;
    }

    void add_common(bool with_train_flags) {
        bind<std::string>("--model", "baseline | crossmod",
                          [](RunConfig& c, const std::string& v) { c.model = v; });
        bind<std::size_t>("--way", "classes per episode",
                          [](RunConfig& c, std::size_t v) { c.way = v; });
        bind<std::size_t>("--shot", "support examples per class",
                          [](RunConfig& c, std::size_t v) { c.shot = v; });
        if (with_train_flags) {
            bind<std::size_t>("--queries-per-class", "training query examples per class",
                              [](RunConfig& c, std::size_t v) { c.queries_per_class = v; });
            bind<bool>("--queries-total", "read the query count as an episode total",
                       [](RunConfig& c, bool v) { c.queries_total = v; });
        }
        bind<std::uint64_t>("--seed", "run seed (XMODNET_SEED is the fallback)",
                            [](RunConfig& c, std::uint64_t v) { c.seed = v; });
        bind<std::string>("--bn-mode", "running | batch (transductive evaluation)",
                          [](RunConfig& c, const std::string& v) { c.bn_mode = v; });
        bind<std::size_t>("--workers", "parallel evaluation episodes",
                          [](RunConfig& c, std::size_t v) { c.workers = v; });
        bind<std::string>("--output", "output directory",
                          [](RunConfig& c, const std::string& v) { c.output_dir = v; });
        bind<std::string>("--dataset", "synthetic | miniimagenet",
                          [](RunConfig& c, const std::string& v) { c.dataset_kind = v; });
        bind<std::string>("--root", "miniImageNet layout root",
                          [](RunConfig& c, const std::string& v) { c.dataset_root = v; });
        bind<std::size_t>("--synth-classes", "synthetic classes per split",
                          [](RunConfig& c, std::size_t v) { c.synthetic_classes = v; });
        bind<std::size_t>("--synth-per-class", "synthetic examples per class",
                          [](RunConfig& c, std::size_t v) { c.synthetic_per_class = v; });
        bind<std::size_t>("--synth-resolution", "synthetic image resolution",
                          [](RunConfig& c, std::size_t v) { c.synthetic_resolution = v; });
        bind<std::string>("--synth-mode", "separable | pairwise",
                          [](RunConfig& c, const std::string& v) { c.synthetic_mode = v; });
        bind<std::uint64_t>("--synth-seed", "synthetic dataset content seed",
                            [](RunConfig& c, std::uint64_t v) { c.synthetic_seed = v; });
        if (with_train_flags) {
            bind<double>("--lr", "initial learning rate",
                         [](RunConfig& c, double v) { c.lr_initial = v; });
            bind<std::size_t>("--lr-halving-period", "episodes between halvings",
                              [](RunConfig& c, std::size_t v) { c.lr_halving_period = v; });
            bind<double>("--l1", "L1 factor for the post-multipliers",
                         [](RunConfig& c, double v) { c.l1_factor = v; });
            bind<std::size_t>("--episodes", "training episodes",
                              [](RunConfig& c, std::size_t v) { c.max_episodes = v; });
            bind<std::size_t>("--eval-every", "validation period in episodes (0 = never)",
                              [](RunConfig& c, std::size_t v) { c.eval_every = v; });
            bind<std::size_t>("--val-episodes", "episodes per validation pass",
                              [](RunConfig& c, std::size_t v) { c.val_episodes = v; });
            bind<std::size_t>("--val-queries-per-class", "query examples per class at validation",
                              [](RunConfig& c, std::size_t v) { c.val_queries_per_class = v; });
        } else {
            bind<std::size_t>("--episodes", "evaluation episodes",
                              [](RunConfig& c, std::size_t v) { c.eval_episodes = v; });
            bind<std::string>("--split", "train | val | test",
                              [](RunConfig& c, const std::string& v) { c.eval_split = v; });
            bind<std::size_t>("--queries-per-class,--eval-queries-per-class",
                              "query examples per class at evaluation",
                              [](RunConfig& c, std::size_t v) { c.eval_queries_per_class = v; });
        }
        app_->add_option("--config", config_file_, "flat key=value config file");
    }

    RunConfig resolve() const {
        RunConfig cfg;
        bool seed_set = false, queries_set = false;
        if (!config_file_.empty()) {
            const auto keys = apply_config_file(cfg, config_file_);
            seed_set = keys.count("seed") > 0;
            queries_set = keys.count("queries_per_class") > 0;
        }
        for (const auto& f : appliers_) f(cfg);
        if (seed_opt_ && seed_opt_->count() > 0) seed_set = true;
        if (queries_opt_ && queries_opt_->count() > 0) queries_set = true;
        // training query count defaults to 15 for the baseline and 5 for the
        // heavier cross-modulated model unless set explicitly
        if (!queries_set && cfg.model == "crossmod") cfg.queries_per_class = 5;
        apply_env_seed(cfg, seed_set);
        validate_config(cfg);
        return cfg;
    }

private:
    CLI::App* app_;
    std::string config_file_;
    std::vector<std::function<void(RunConfig&)>> appliers_;
    CLI::Option* seed_opt_ = nullptr;
    CLI::Option* queries_opt_ = nullptr;
};

DatasetSplit load_split(const RunConfig& cfg, const std::string& split_name) {
    if (cfg.dataset_kind == "synthetic") {
        const auto mode = synthetic_mode_from_string(cfg.synthetic_mode);
        auto splits = make_synthetic_splits(cfg.synthetic_classes, cfg.synthetic_per_class,
                                            cfg.synthetic_resolution, mode, cfg.synthetic_seed);
        if (split_name == "train") return std::move(splits.train);
        if (split_name == "val") return std::move(splits.val);
        return std::move(splits.test);
    }
    if (!fs::exists(cfg.dataset_root))
        throw ConfigError("dataset root not found: " + cfg.dataset_root);
    return load_miniimagenet(cfg.dataset_root, split_name);
}

Network<float> load_model(const std::string& checkpoint) {
    if (checkpoint.empty()) throw ConfigError("--checkpoint is required");
    return load_checkpoint<float>(checkpoint);
}

void print_report(const std::string& tag, const EvalReport& rep) {
    std::printf("%s: %.2f%% +- %.2f%% (n=%zu, seed=%llu)\n", tag.c_str(),
                100.0 * rep.mean_accuracy, 100.0 * rep.ci95_halfwidth, rep.episode_count,
                static_cast<unsigned long long>(rep.seed));
}

BnMode eval_bn_mode(const RunConfig& cfg) {
    return cfg.bn_mode == "batch" ? BnMode::Batch : BnMode::Eval;
}

int cmd_train(const ConfigBinder& binder, bool resume) {
    const RunConfig cfg = binder.resolve();
    const fs::path out_dir = cfg.output_dir;
    write_resolved_config(cfg, out_dir);

    const auto train_split = load_split(cfg, "train");
    const auto val_split = load_split(cfg, "val");

    TrainConfig tc;
    tc.way = cfg.way;
    tc.shot = cfg.shot;
    tc.queries_per_class = cfg.resolved_train_queries();
    tc.lr_initial = cfg.lr_initial;
    tc.lr_halving_period = cfg.lr_halving_period;
    tc.l1_factor = cfg.l1_factor;
    tc.max_episodes = cfg.max_episodes;
    tc.eval_every = cfg.eval_every;
    tc.val_episodes = cfg.val_episodes;
    tc.val_queries_per_class = cfg.val_queries_per_class;
    tc.seed = cfg.seed;
    tc.model_kind = model_kind_from_string(cfg.model);

    Network<float> net;
    AdamState<float> state;
    std::size_t start_episode = 0;
    double best = -1.0;
    if (resume) {
        const auto paths = train_artifact_paths(out_dir);
        net = load_checkpoint<float>(paths.checkpoint_final);
        auto params = net.parameters();
        std::tie(start_episode, best) =
            load_optimizer_state(paths.optimizer_state, state, params);
        std::printf("resuming at episode %zu\n", start_episode);
    } else {
        net = make_network<float>(tc.model_kind, cfg.seed);
    }

    const auto result =
        train(net, tc, train_split, &val_split, out_dir, start_episode, best, &state);
    const auto paths = train_artifact_paths(out_dir);
    std::printf("trained %zu episodes, final loss %.4f, best val acc %.2f%%\n",
                result.episodes_run, result.losses.empty() ? 0.f : double(result.losses.back()),
                100.0 * std::max(0.0, result.best_val_accuracy));
    std::printf("checkpoint: %s\n", paths.checkpoint_final.string().c_str());
    return 0;
}

int cmd_eval(const ConfigBinder& binder, const std::string& checkpoint) {
    const RunConfig cfg = binder.resolve();
    auto net = load_model(checkpoint);
    const auto split = load_split(cfg, cfg.eval_split);
    EvalOptions opts;
    opts.episodes = cfg.eval_episodes;
    opts.way = cfg.way;
    opts.shot = cfg.shot;
    opts.queries_per_class = cfg.eval_queries_per_class;
    opts.seed = cfg.seed;
    opts.workers = cfg.workers;
    opts.bn_mode = eval_bn_mode(cfg);
    const EvalReport rep = evaluate(net, split, opts);
    print_report("accuracy", rep);
    const fs::path out_dir = cfg.output_dir;
    write_resolved_config(cfg, out_dir);
    export_eval_report_json(rep, out_dir / "eval_report.json");
    return 0;
}

std::set<int> parse_blocks(const std::string& blocks_arg) {
    std::set<int> blocks;
    std::stringstream ss(blocks_arg);
    std::string tok;
    while (std::getline(ss, tok, ',')) {
        if (tok.empty()) continue;
        try {
            blocks.insert(std::stoi(tok));
        } catch (...) {
            throw ConfigError("bad --blocks entry: " + tok);
        }
    }
    return blocks;
}

int cmd_ablate(const ConfigBinder& binder, const std::string& checkpoint,
               const std::string& blocks_arg, double noise_std, double noise_mean,
               std::uint64_t noise_seed) {
    const RunConfig cfg = binder.resolve();
    auto net = load_model(checkpoint);
    if (net.kind != ModelKind::CrossMod)
        throw ConfigError("ablate: checkpoint is a baseline model, no modulation to perturb");
    const auto split = load_split(cfg, cfg.eval_split);
    EvalOptions opts;
    opts.episodes = cfg.eval_episodes;
    opts.way = cfg.way;
    opts.shot = cfg.shot;
    opts.queries_per_class = cfg.eval_queries_per_class;
    opts.seed = cfg.seed;
    opts.workers = cfg.workers;
    opts.bn_mode = eval_bn_mode(cfg);

    NoiseSpec spec;
    spec.target_blocks = parse_blocks(blocks_arg);
    spec.stddev = noise_std;
    spec.mean = noise_mean;
    spec.seed = noise_seed;

    const EvalReport clean = evaluate(net, split, opts);
    const EvalReport noised = ablate_with_noise(net, split, spec, opts);
    print_report("clean", clean);
    print_report("noised", noised);

    const fs::path out_dir = cfg.output_dir;
    write_resolved_config(cfg, out_dir);
    export_ablation_csv({{std::set<int>{}, clean}, {spec.target_blocks, noised}},
                        out_dir / "ablation.csv");
    export_eval_report_json(noised, out_dir / "ablation_report.json");
    return 0;
}

int cmd_analyze(const ConfigBinder& binder, const std::string& checkpoint) {
    const RunConfig cfg = binder.resolve();
    auto net = load_model(checkpoint);
    if (net.kind != ModelKind::CrossMod)
        throw ConfigError("analyze: checkpoint is a baseline model, nothing to decompose");
    const auto stats = postmultiplier_stats(net);
    const auto norms = generator_norm_decomposition(net);
    for (std::size_t g = 0; g < 3; ++g)
        std::printf("block %zu: |gamma0| mean %.4f, |beta0| mean %.4f, self norm %.4f, cross norm %.4f\n",
                    g + 2, stats.gamma0[g].mean, stats.beta0[g].mean, norms.self_norm_mean[g],
                    norms.cross_norm_mean[g]);
    const fs::path out_dir = cfg.output_dir;
    write_resolved_config(cfg, out_dir);
    export_postmultiplier_csv(stats, out_dir / "postmultipliers.csv");
    export_norm_report_csv(norms, out_dir / "generator_norms.csv");
    return 0;
}

int cmd_gradcheck(std::size_t precision, std::uint64_t seed, double tolerance) {
    if (precision != 32 && precision != 64)
        throw ConfigError("--precision must be 32 or 64");
    if (tolerance <= 0) tolerance = precision == 64 ? 1e-4 : 1e-2;
    const GradCheckSummary summary = precision == 64
                                         ? run_gradcheck_suite<double>(tolerance, seed)
                                         : run_gradcheck_suite<float>(tolerance, seed);
    for (const auto& item : summary.items)
        std::printf("%-28s %12.3e  %s\n", item.name.c_str(), item.max_rel_err,
                    item.pass ? "ok" : "FAIL");
    std::printf("max relative error %.3e (tolerance %.0e, %zu checks)\n", summary.worst(),
                summary.tolerance, summary.items.size());
    return summary.all_pass() ? 0 : 1;
}

int cmd_synth_data(const ConfigBinder& binder) {
    const RunConfig cfg = binder.resolve();
    const auto mode = synthetic_mode_from_string(cfg.synthetic_mode);
    auto splits = make_synthetic_splits(cfg.synthetic_classes, cfg.synthetic_per_class,
                                        cfg.synthetic_resolution, mode, cfg.synthetic_seed);
    const fs::path root = cfg.output_dir;
    save_split_as_images(splits.train, root);
    save_split_as_images(splits.val, root);
    save_split_as_images(splits.test, root);
    write_resolved_config(cfg, root);
    std::printf("wrote %zu train / %zu val / %zu test images under %s\n",
                splits.train.num_examples(), splits.val.num_examples(),
                splits.test.num_examples(), root.string().c_str());
    return 0;
}

} // namespace

int main(int argc, char** argv) {
    CLI::App app{"Matching Networks with cross-modulation: training, evaluation and analysis"};
    app.require_subcommand(1);

    auto* sc_train = app.add_subcommand("train", "train a model episodically");
    ConfigBinder train_binder(sc_train);
    train_binder.add_common(true);
    bool resume = false;
    sc_train->add_flag("--resume", resume, "continue from output_dir's final checkpoint");

    auto* sc_eval = app.add_subcommand("eval", "evaluate a checkpoint with confidence intervals");
    ConfigBinder eval_binder(sc_eval);
    eval_binder.add_common(false);
    std::string eval_ckpt;
    sc_eval->add_option("--checkpoint", eval_ckpt, "model checkpoint")->required();

    auto* sc_ablate = app.add_subcommand("ablate", "evaluate with noise-distorted modulation");
    ConfigBinder ablate_binder(sc_ablate);
    ablate_binder.add_common(false);
    std::string ablate_ckpt, blocks = "2,3,4";
    double noise_std = 0.3, noise_mean = 1.0;
    std::uint64_t noise_seed = 0;
    sc_ablate->add_option("--checkpoint", ablate_ckpt, "model checkpoint")->required();
    sc_ablate->add_option("--blocks", blocks, "comma-separated blocks to noise (of 2,3,4)");
    sc_ablate->add_option("--noise-std", noise_std, "noise standard deviation");
    sc_ablate->add_option("--noise-mean", noise_mean, "noise mean");
    sc_ablate->add_option("--noise-seed", noise_seed, "noise draw seed");

    auto* sc_analyze = app.add_subcommand("analyze", "post-multiplier and generator-norm reports");
    ConfigBinder analyze_binder(sc_analyze);
    analyze_binder.add_common(false);
    std::string analyze_ckpt;
    sc_analyze->add_option("--checkpoint", analyze_ckpt, "model checkpoint")->required();

    auto* sc_gradcheck = app.add_subcommand("gradcheck", "finite-difference gradient verification");
    std::size_t precision = 64;
    std::uint64_t gc_seed = 17;
    double gc_tol = 0;
    sc_gradcheck->add_option("--precision", precision, "32 or 64");
    sc_gradcheck->add_option("--seed", gc_seed, "random tensor seed");
    sc_gradcheck->add_option("--tolerance", gc_tol, "override the default tolerance");

    auto* sc_synth = app.add_subcommand("synth-data", "materialize a synthetic dataset to disk");
    ConfigBinder synth_binder(sc_synth);
    synth_binder.add_common(false);

    try {
        app.parse(argc, argv);
    } catch (const CLI::CallForHelp& e) {
        return app.exit(e);
    } catch (const CLI::ParseError& e) {
        app.exit(e);
        return 2;
    }

    try {
        if (sc_train->parsed()) return cmd_train(train_binder, resume);
        if (sc_eval->parsed()) return cmd_eval(eval_binder, eval_ckpt);
        if (sc_ablate->parsed())
            return cmd_ablate(ablate_binder, ablate_ckpt, blocks, noise_std, noise_mean, noise_seed);
        if (sc_analyze->parsed()) return cmd_analyze(analyze_binder, analyze_ckpt);
        if (sc_gradcheck->parsed()) return cmd_gradcheck(precision, gc_seed, gc_tol);
        if (sc_synth->parsed()) return cmd_synth_data(synth_binder);
    } catch (const ConfigError& e) {
        std::fprintf(stderr, "config error: %s\n", e.what());
        return 2;
    } catch (const CheckpointError& e) {
        std::fprintf(stderr, "checkpoint error: %s\n", e.what());
        return 2;
    } catch (const std::exception& e) {
        std::fprintf(stderr, "error: %s\n", e.what());
        return 1;
    }
    return 2;
}
