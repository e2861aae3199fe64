// Loss, Adam, schedule, evaluation statistics, and the training loop.

#include "catch_amalgamated.hpp"

#include <algorithm>
#include <cmath>
#include <filesystem>
#include <fstream>
#include <sstream>

#include "xmodnet/gradcheck.hpp"
#include "xmodnet/train.hpp"

using namespace xmodnet;
namespace fs = std::filesystem;

namespace {

Episode tiny_episode(std::size_t way, std::size_t shot, std::size_t q, std::uint64_t seed) {
    auto split = synthetic_dataset(way + 1, shot + q + 1, 16, SyntheticMode::Separable, seed);
    Rng rng(seed);
    return sample_episode(split, way, shot, q, rng);
}

std::string slurp(const fs::path& p) {
    std::ifstream in(p, std::ios::binary);
    std::ostringstream ss;
    ss << in.rdbuf();
    return ss.str();
}

double median_abs(const Tensor<float>& t) {
    std::vector<float> v;
    for (float x : t.values()) v.push_back(std::abs(x));
    std::sort(v.begin(), v.end());
    const std::size_t n = v.size();
    return n % 2 ? v[n / 2] : 0.5 * (v[n / 2 - 1] + v[n / 2]);
}

double median(std::vector<float> v) {
    std::sort(v.begin(), v.end());
    const std::size_t n = v.size();
    return n % 2 ? v[n / 2] : 0.5 * (v[n / 2 - 1] + v[n / 2]);
}

} // namespace

TEST_CASE("nll_loss closed forms") {
    Tape<float> tape(false);
    SECTION("certainty gives zero loss") {
        auto probs = Tensor<float>::from_data({2, 3}, {1.f, 0.f, 0.f, 0.f, 0.f, 1.f});
        REQUIRE(nll_loss(tape, probs, {0, 2}).item() == 0.f);
    }
    SECTION("uniform 5-way predictions give ln 5") {
        auto probs = Tensor<float>::full({4, 5}, 0.2f);
        REQUIRE_THAT(nll_loss(tape, probs, {0, 1, 2, 3}).item(),
                     Catch::Matchers::WithinAbs(std::log(5.0), 1e-6));
    }
    SECTION("clamped at 1e-12") {
        auto probs = Tensor<float>::from_data({1, 2}, {0.f, 1.f});
        REQUIRE_THAT(nll_loss(tape, probs, {0}).item(),
                     Catch::Matchers::WithinAbs(-std::log(1e-12), 1e-3));
    }
}

TEST_CASE("episode_loss penalty") {
    auto ep = tiny_episode(2, 1, 1, 40);
    SECTION("baseline models pay no penalty") {
        auto net = make_network<float>(ModelKind::Baseline, 41);
        Tape<float> t1(false), t2(false);
        const float a = episode_loss(t1, net, ep, 0.0, BnMode::Batch).item();
        const float b = episode_loss(t2, net, ep, 7.0, BnMode::Batch).item();
        REQUIRE(a == b);
    }
    SECTION("crossmod penalty is l1_factor * sum |gamma0| + |beta0|") {
        auto net = make_network<float>(ModelKind::CrossMod, 42);
        for (auto& gen : net.generators) {
            for (auto& v : gen.gamma0.values()) v = 0.1f;
            for (auto& v : gen.beta0.values()) v = -0.05f;
        }
        Tape<float> t1(false), t2(false);
        const double base = episode_loss(t1, net, ep, 0.0, BnMode::Batch).item();
        const double with_pen = episode_loss(t2, net, ep, 0.01, BnMode::Batch).item();
        const double expected = 0.01 * 3 * kFilters * (0.1 + 0.05);
        REQUIRE_THAT(with_pen - base, Catch::Matchers::WithinAbs(expected, 1e-5));
    }
}

TEST_CASE("lr_schedule halves every period") {
    TrainConfig cfg;
    REQUIRE(lr_schedule(0, cfg) == 0.001);
    REQUIRE(lr_schedule(99999, cfg) == 0.001);
    REQUIRE(lr_schedule(100000, cfg) == 0.0005);
    REQUIRE(lr_schedule(250000, cfg) == 0.00025);
}

TEST_CASE("adam_step") {
    SECTION("zero gradients leave parameters unchanged") {
        auto p = Tensor<float>::from_data({3}, {1.f, -2.f, 0.5f}, true);
        std::vector<std::pair<std::string, Tensor<float>>> params{{"p", p}};
        AdamState<float> state;
        adam_step(params, state, 0.01);
        REQUIRE(p[0] == 1.f);
        REQUIRE(p[1] == -2.f);
        REQUIRE(p[2] == 0.5f);
    }
    SECTION("first step moves by about lr") {
        auto p = Tensor<float>::from_data({1}, {1.f}, true);
        p.grad()[0] = 1.f;
        std::vector<std::pair<std::string, Tensor<float>>> params{{"p", p}};
        AdamState<float> state;
        adam_step(params, state, 0.001);
        REQUIRE_THAT(p[0], Catch::Matchers::WithinAbs(0.999, 1e-6));
        REQUIRE(p.grad_view()[0] == 0.f);  // gradients zeroed after the step
    }
    SECTION("constant gradient sign drives the parameter monotonically") {
        auto p = Tensor<float>::from_data({1}, {0.3f}, true);
        std::vector<std::pair<std::string, Tensor<float>>> params{{"p", p}};
        AdamState<float> state;
        float prev = p[0];
        for (int i = 0; i < 100; ++i) {
            p.grad()[0] = 0.5f;
            adam_step(params, state, 0.01);
            REQUIRE(p[0] < prev);
            prev = p[0];
        }
    }
    SECTION("NaN gradients abort with the parameter name") {
        auto p = Tensor<float>::from_data({2}, {1.f, 1.f}, true);
        p.grad()[1] = std::nanf("");
        std::vector<std::pair<std::string, Tensor<float>>> params{{"weird_param", p}};
        AdamState<float> state;
        REQUIRE_THROWS_WITH(adam_step(params, state, 0.01),
                            Catch::Matchers::ContainsSubstring("weird_param"));
    }
}

TEST_CASE("full-model gradients match central differences in double precision") {
    auto ep = tiny_episode(2, 1, 1, 43);
    auto net = make_network<double>(ModelKind::CrossMod, 44);
    Rng rng(45);
    for (auto& gen : net.generators) {  // make the modulation path live
        for (auto& v : gen.gamma0.values()) v = rng.uniform(0.1, 0.4);
        for (auto& v : gen.beta0.values()) v = rng.uniform(0.1, 0.4);
    }
    auto fn = [&](Tape<double>& t, Tensor<double>&) {
        return episode_loss(t, net, ep, 0.001, BnMode::Batch);
    };
    const auto subset_of = [&](std::size_t n, std::size_t k) {
        Rng r(46);
        return r.sample_without_replacement(n, k);
    };
    auto& gen2 = net.generators[0];
    REQUIRE(grad_check<double>(fn, gen2.W, 1e-3, subset_of(gen2.W.size(), 8)) < 1e-4);
    REQUIRE(grad_check<double>(fn, gen2.gamma0, 1e-3, subset_of(gen2.gamma0.size(), 8)) < 1e-4);
    REQUIRE(grad_check<double>(fn, gen2.beta0, 1e-3, subset_of(gen2.beta0.size(), 8)) < 1e-4);
    auto& kern = net.blocks[1].kernels;
    REQUIRE(grad_check<double>(fn, kern, 1e-3, subset_of(kern.size(), 8)) < 1e-4);
}

TEST_CASE("eval report statistics") {
    SECTION("halfwidth equals the closed form") {
        std::vector<double> acc;
        Rng rng(47);
        for (int i = 0; i < 1000; ++i) acc.push_back(rng.uniform(0.3, 0.7));
        auto rep = make_eval_report(acc, 0);
        double mean = 0;
        for (double a : acc) mean += a;
        mean /= double(acc.size());
        double sq = 0;
        for (double a : acc) sq += (a - mean) * (a - mean);
        const double want = 1.96 * std::sqrt(sq / double(acc.size() - 1)) /
                            std::sqrt(double(acc.size()));
        REQUIRE_THAT(rep.ci95_halfwidth, Catch::Matchers::WithinAbs(want, 1e-12));
        REQUIRE_THAT(rep.mean_accuracy, Catch::Matchers::WithinAbs(mean, 1e-12));
    }
    SECTION("stddev 0.1 over 1000 episodes gives about 0.0062") {
        std::vector<double> acc(1000);
        for (int i = 0; i < 1000; ++i) acc[i] = 0.5 + (i % 2 ? 0.1 : -0.1);
        auto rep = make_eval_report(acc, 0);
        REQUIRE_THAT(rep.ci95_halfwidth, Catch::Matchers::WithinAbs(0.0062, 1e-4));
    }
}

TEST_CASE("evaluate_with: perfect and random-guess classifiers") {
    auto split = synthetic_dataset(8, 6, 16, SyntheticMode::Separable, 48);
    SECTION("always-correct classifier reports 1.0 +- 0") {
        EvalOptions opts;
        opts.episodes = 50;
        opts.way = 5;
        opts.queries_per_class = 2;
        opts.seed = 49;
        auto rep = evaluate_with(
            [](std::size_t, const Episode& ep) {
                Tensor<float> probs({ep.query.size(), ep.way});
                for (std::size_t j = 0; j < ep.query.size(); ++j)
                    probs[j * ep.way + ep.query[j].label] = 1.f;
                return probs;
            },
            split, opts);
        REQUIRE(rep.mean_accuracy == 1.0);
        REQUIRE(rep.ci95_halfwidth == 0.0);
    }
    SECTION("random guessing on 5-way lands near 20%") {
        EvalOptions opts;
        opts.episodes = 1000;
        opts.way = 5;
        opts.queries_per_class = 3;
        opts.seed = 50;
        auto rep = evaluate_with(
            [](std::size_t i, const Episode& ep) {
                Rng r = Rng::for_stream(0xabcdef, i);
                Tensor<float> probs({ep.query.size(), ep.way});
                for (std::size_t j = 0; j < ep.query.size(); ++j)
                    probs[j * ep.way + r.uniform_index(ep.way)] = 1.f;
                return probs;
            },
            split, opts);
        REQUIRE(std::abs(rep.mean_accuracy - 0.2) <= 3.0 * rep.ci95_halfwidth);
    }
}

TEST_CASE("evaluate is worker-count independent") {
    auto split = synthetic_dataset(6, 8, 16, SyntheticMode::Separable, 51);
    auto net = make_network<float>(ModelKind::Baseline, 52);
    EvalOptions opts;
    opts.episodes = 16;
    opts.way = 3;
    opts.queries_per_class = 2;
    opts.seed = 53;
    opts.bn_mode = BnMode::Batch;
    opts.workers = 1;
    auto rep1 = evaluate(net, split, opts);
    opts.workers = 4;
    auto rep4 = evaluate(net, split, opts);
    REQUIRE(rep1.mean_accuracy == rep4.mean_accuracy);
    REQUIRE(rep1.ci95_halfwidth == rep4.ci95_halfwidth);
    for (std::size_t i = 0; i < rep1.per_episode_accuracies.size(); ++i)
        REQUIRE(rep1.per_episode_accuracies[i] == rep4.per_episode_accuracies[i]);

    opts.bn_mode = BnMode::Train;
    REQUIRE_THROWS_AS(evaluate(net, split, opts), std::invalid_argument);
}

TEST_CASE("gate invariant propagates through the first-episode loss") {
    auto split = synthetic_dataset(4, 4, 16, SyntheticMode::Separable, 54);
    Rng rng(55);
    auto ep = sample_episode(split, 2, 1, 2, rng);
    auto cross = make_network<float>(ModelKind::CrossMod, 56);
    Network<float> base;
    base.kind = ModelKind::Baseline;
    base.blocks = cross.blocks;
    Tape<float> t1, t2;
    const double lc = episode_loss(t1, cross, ep, 0.0, BnMode::Train).item();
    const double lb = episode_loss(t2, base, ep, 0.0, BnMode::Train).item();
    REQUIRE_THAT(lc, Catch::Matchers::WithinAbs(lb, 1e-6));
}

TEST_CASE("training is deterministic and logs are byte-identical") {
    auto splits = make_synthetic_splits(4, 6, 16, SyntheticMode::Separable, 57);
    TrainConfig cfg;
    cfg.way = 2;
    cfg.shot = 1;
    cfg.queries_per_class = 1;
    cfg.max_episodes = 100;
    cfg.eval_every = 50;
    cfg.val_episodes = 10;
    cfg.val_queries_per_class = 1;
    cfg.seed = 58;
    cfg.l1_factor = 0.0;

    const fs::path dir1 = fs::temp_directory_path() / "xmodnet_train_det1";
    const fs::path dir2 = fs::temp_directory_path() / "xmodnet_train_det2";
    fs::remove_all(dir1);
    fs::remove_all(dir2);
    auto net1 = make_network<float>(ModelKind::Baseline, cfg.seed);
    auto net2 = make_network<float>(ModelKind::Baseline, cfg.seed);
    auto r1 = train(net1, cfg, splits.train, &splits.val, dir1);
    auto r2 = train(net2, cfg, splits.train, &splits.val, dir2);
    REQUIRE(r1.losses == r2.losses);
    REQUIRE(slurp(dir1 / "train_log.jsonl") == slurp(dir2 / "train_log.jsonl"));
    REQUIRE_FALSE(slurp(dir1 / "train_log.jsonl").empty());
    fs::remove_all(dir1);
    fs::remove_all(dir2);
}

TEST_CASE("training resumes exactly from checkpoint plus optimizer state") {
    auto splits = make_synthetic_splits(4, 6, 16, SyntheticMode::Separable, 59);
    TrainConfig cfg;
    cfg.way = 2;
    cfg.shot = 1;
    cfg.queries_per_class = 1;
    cfg.max_episodes = 60;
    cfg.eval_every = 0;  // no val in this test
    cfg.seed = 60;
    cfg.l1_factor = 0.0;

    // uninterrupted reference
    auto ref_net = make_network<float>(ModelKind::Baseline, cfg.seed);
    auto ref = train(ref_net, cfg, splits.train, nullptr, "");

    // first leg
    const fs::path dir = fs::temp_directory_path() / "xmodnet_train_resume";
    fs::remove_all(dir);
    TrainConfig first = cfg;
    first.max_episodes = 30;
    auto net = make_network<float>(ModelKind::Baseline, cfg.seed);
    AdamState<float> state;
    auto leg1 = train(net, first, splits.train, nullptr, dir, 0, -1.0, &state);

    // resume into a fresh model from the artifacts
    auto resumed = load_checkpoint<float>(dir / "checkpoint_final.xmn");
    auto params = resumed.parameters();
    AdamState<float> resumed_state;
    auto [next_episode, best] =
        load_optimizer_state(dir / "checkpoint_final.opt.xmn", resumed_state, params);
    REQUIRE(next_episode == 30);
    auto leg2 = train(resumed, cfg, splits.train, nullptr, dir, next_episode, best, &resumed_state);

    std::vector<float> glued = leg1.losses;
    glued.insert(glued.end(), leg2.losses.begin(), leg2.losses.end());
    REQUIRE(glued == ref.losses);
    fs::remove_all(dir);
}

TEST_CASE("loss trends down on separable synthetic data") {
    auto splits = make_synthetic_splits(6, 10, 16, SyntheticMode::Separable, 61);
    TrainConfig cfg;
    cfg.way = 2;
    cfg.shot = 1;
    cfg.queries_per_class = 2;
    cfg.max_episodes = 300;
    cfg.eval_every = 0;
    cfg.seed = 62;
    cfg.l1_factor = 0.0;
    auto net = make_network<float>(ModelKind::Baseline, cfg.seed);
    auto res = train(net, cfg, splits.train, nullptr, "");
    REQUIRE(std::isfinite(double(res.losses.front())));
    const std::vector<float> first(res.losses.begin(), res.losses.begin() + 150);
    const std::vector<float> last(res.losses.end() - 150, res.losses.end());
    REQUIRE(median(last) < median(first));
}

TEST_CASE("large L1 factor shrinks the post-multipliers") {
    auto splits = make_synthetic_splits(4, 8, 16, SyntheticMode::Pairwise, 63);
    TrainConfig cfg;
    cfg.way = 2;
    cfg.shot = 1;
    cfg.queries_per_class = 1;
    cfg.max_episodes = 80;
    cfg.eval_every = 0;
    cfg.seed = 64;
    cfg.model_kind = ModelKind::CrossMod;

    auto run = [&](double l1) {
        TrainConfig c = cfg;
        c.l1_factor = l1;
        auto net = make_network<float>(ModelKind::CrossMod, cfg.seed);
        train(net, c, splits.train, nullptr, "");
        double acc = 0;
        for (auto& gen : net.generators) acc += median_abs(gen.gamma0) + median_abs(gen.beta0);
        return acc;
    };
    REQUIRE(run(1.0) < run(0.0));
}
