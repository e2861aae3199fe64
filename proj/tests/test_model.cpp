// Embeddings, FiLM cross-modulation, matching head, checkpoints.

#include "catch_amalgamated.hpp"

#include <cmath>
#include <filesystem>
#include <fstream>

#include "xmodnet/checkpoint.hpp"
#include "xmodnet/data.hpp"
#include "xmodnet/model.hpp"

using namespace xmodnet;

namespace {

Tensor<float> random_image_batch(Rng& rng, std::size_t b, std::size_t res) {
    Tensor<float> t({b, res, res, 3});
    for (auto& v : t.values()) v = float(rng.uniform());
    return t;
}

Episode make_episode(std::size_t way, std::size_t shot, std::size_t q, std::size_t res,
                     std::uint64_t seed) {
    auto split = synthetic_dataset(way + 2, shot + q + 2, res, SyntheticMode::Separable, seed);
    Rng rng(seed ^ 0xabc);
    return sample_episode(split, way, shot, q, rng);
}

double max_abs_diff(const Tensor<float>& a, const Tensor<float>& b) {
    double m = 0;
    for (std::size_t i = 0; i < a.size(); ++i)
        m = std::max(m, std::abs(double(a[i]) - double(b[i])));
    return m;
}

} // namespace

TEST_CASE("embed_baseline output dimension follows the pooling chain") {
    auto net = make_network<float>(ModelKind::Baseline, 1);
    Rng rng(2);
    Tape<float> tape(false);
    SECTION("84x84 -> 1600, floor-pooling through the odd sizes") {
        // 84 -> 42 -> 21 -> 10 -> 5
        auto out = embed_baseline(tape, net, random_image_batch(rng, 1, 84), BnMode::Batch);
        REQUIRE(out.shape() == Shape{1, 1600});
    }
    SECTION("32x32 -> 256") {
        auto out = embed_baseline(tape, net, random_image_batch(rng, 2, 32), BnMode::Batch);
        REQUIRE(out.shape() == Shape{2, 256});
    }
    SECTION("undersized or non-square input rejected") {
        Tensor<float> small({1, 8, 8, 3});
        REQUIRE_THROWS_AS(embed_baseline(tape, net, small, BnMode::Batch), ShapeError);
        Tensor<float> rect({1, 32, 16, 3});
        REQUIRE_THROWS_AS(embed_baseline(tape, net, rect, BnMode::Batch), ShapeError);
    }
}

TEST_CASE("embed_baseline is deterministic for identical inputs") {
    auto net = make_network<float>(ModelKind::Baseline, 3);
    Rng rng(4);
    auto img = random_image_batch(rng, 1, 16);
    Tape<float> tape(false);
    auto a = embed_baseline(tape, net, img, BnMode::Batch);
    auto b = embed_baseline(tape, net, img, BnMode::Batch);
    for (std::size_t i = 0; i < a.size(); ++i) REQUIRE(a[i] == b[i]);
}

TEST_CASE("film_generate") {
    Rng rng(5);
    Tape<float> tape(false);
    auto net = make_network<float>(ModelKind::CrossMod, 6);
    auto& gen = net.generators[0];
    Tensor<float> a({2, 4, 4, kFilters}), b({2, 4, 4, kFilters});
    for (auto& v : a.values()) v = float(rng.uniform(-1, 1));
    for (auto& v : b.values()) v = float(rng.uniform(-1, 1));

    SECTION("zero generator yields zero FiLM parameters") {
        FilmGeneratorParams<float> zero;
        zero.W = Tensor<float>({2 * kFilters, 2 * kFilters});
        zero.b = Tensor<float>({2 * kFilters});
        zero.gamma0 = Tensor<float>({kFilters});
        zero.beta0 = Tensor<float>({kFilters});
        auto [gz, bz] = film_generate(tape, zero, a, b);
        for (float v : gz.values()) REQUIRE(v == 0.f);
        for (float v : bz.values()) REQUIRE(v == 0.f);
    }
    SECTION("outputs have C channels") {
        auto [gz, bz] = film_generate(tape, gen, a, b);
        REQUIRE(gz.shape() == Shape{2, kFilters});
        REQUIRE(bz.shape() == Shape{2, kFilters});
    }
    SECTION("argument order matters") {
        auto [gz_ab, bz_ab] = film_generate(tape, gen, a, b);
        auto [gz_ba, bz_ba] = film_generate(tape, gen, b, a);
        bool differs = false;
        for (std::size_t i = 0; i < gz_ab.size(); ++i)
            if (gz_ab[i] != gz_ba[i]) differs = true;
        REQUIRE(differs);
    }
}

TEST_CASE("film_apply") {
    Tape<float> tape(false);
    SECTION("hand arithmetic") {
        auto x = Tensor<float>::full({1, 1, 1, 1}, 2.f);
        auto gz = Tensor<float>::full({1, 1}, 0.5f);
        auto bz = Tensor<float>::full({1, 1}, 0.25f);
        auto g0 = Tensor<float>::full({1}, 1.f);
        auto b0 = Tensor<float>::full({1}, 1.f);
        auto out = film_apply(tape, x, gz, bz, g0, b0);
        REQUIRE(out[0] == 3.25f);
    }
    SECTION("zero post-multipliers and zero FiLM params both gate off") {
        Rng rng(7);
        Tensor<float> x({3, 2, 2, 4});
        for (auto& v : x.values()) v = float(rng.uniform(-2, 2));
        Tensor<float> gz({3, 4}), bz({3, 4});
        for (auto& v : gz.values()) v = float(rng.uniform(-1, 1));
        for (auto& v : bz.values()) v = float(rng.uniform(-1, 1));
        Tensor<float> zeros_c({4});
        auto out1 = film_apply(tape, x, gz, bz, zeros_c, zeros_c);
        for (std::size_t i = 0; i < x.size(); ++i) REQUIRE(out1[i] == x[i]);

        Tensor<float> zr({3, 4});
        Tensor<float> g0({4}), b0({4});
        for (auto& v : g0.values()) v = float(rng.uniform(-1, 1));
        for (auto& v : b0.values()) v = float(rng.uniform(-1, 1));
        auto out2 = film_apply(tape, x, zr, zr, g0, b0);
        for (std::size_t i = 0; i < x.size(); ++i) REQUIRE(out2[i] == x[i]);
    }
}

TEST_CASE("embed_crossmod reduces to baseline when gated off") {
    auto net = make_network<float>(ModelKind::CrossMod, 8);  // gamma0/beta0 start at zero
    Rng rng(9);
    auto s_img = random_image_batch(rng, 1, 16);
    auto q_img = random_image_batch(rng, 1, 16);
    Tape<float> tape(false);
    auto [f_s, f_q] = embed_crossmod(tape, net, s_img, q_img, BnMode::Batch);
    auto base_s = embed_baseline(tape, net, s_img, BnMode::Batch);
    auto base_q = embed_baseline(tape, net, q_img, BnMode::Batch);
    REQUIRE(max_abs_diff(f_s, base_s) < 1e-6);
    REQUIRE(max_abs_diff(f_q, base_q) < 1e-6);
}

TEST_CASE("embed_crossmod of an image with itself is symmetric") {
    auto net = make_network<float>(ModelKind::CrossMod, 10);
    for (auto& gen : net.generators) {  // switch modulation on
        for (auto& v : gen.gamma0.values()) v = 0.3f;
        for (auto& v : gen.beta0.values()) v = -0.2f;
    }
    Rng rng(11);
    auto img = random_image_batch(rng, 1, 16);
    Tape<float> tape(false);
    auto [f_s, f_q] = embed_crossmod(tape, net, img, img, BnMode::Batch);
    for (std::size_t i = 0; i < f_s.size(); ++i) REQUIRE(f_s[i] == f_q[i]);
}

TEST_CASE("cross-modulated embeddings depend on the paired example") {
    auto net = make_network<float>(ModelKind::CrossMod, 12);
    Rng rng(13);
    for (auto& gen : net.generators) {
        for (auto& v : gen.gamma0.values()) v = float(rng.uniform(0.1, 0.5));
        for (auto& v : gen.beta0.values()) v = float(rng.uniform(0.1, 0.5));
    }
    auto a = random_image_batch(rng, 1, 16);
    auto b = random_image_batch(rng, 1, 16);
    auto c = random_image_batch(rng, 1, 16);
    Tape<float> tape(false);
    auto [s_ab, q_ab] = embed_crossmod(tape, net, a, b, BnMode::Batch);
    auto [s_ba, q_ba] = embed_crossmod(tape, net, b, a, BnMode::Batch);
    auto [s_ac, q_ac] = embed_crossmod(tape, net, a, c, BnMode::Batch);

    // swapping which image is the support changes both outputs
    REQUIRE(max_abs_diff(s_ab, s_ba) > 1e-6);
    REQUIRE(max_abs_diff(q_ab, q_ba) > 1e-6);
    // the embedding of `a` changes with its partner (pairwise interaction)
    REQUIRE(max_abs_diff(s_ab, s_ac) > 1e-6);
    // with one generator shared across branches, an image embeds the same
    // whichever slot it occupies; asymmetry lives in the argument order of G
    for (std::size_t i = 0; i < s_ab.size(); ++i) REQUIRE(s_ab[i] == q_ba[i]);
}

TEST_CASE("cosine_u hand values") {
    Tape<float> tape(false);
    auto q1 = Tensor<float>::from_data({2}, {3.f, 4.f});
    auto s1 = Tensor<float>::from_data({2}, {1.f, 0.f});
    REQUIRE_THAT(cosine_u(tape, q1, s1).item(), Catch::Matchers::WithinAbs(0.6, 1e-6));

    auto q2 = Tensor<float>::from_data({2}, {1.f, 0.f});
    auto s2 = Tensor<float>::from_data({2}, {0.f, 5.f});
    REQUIRE(cosine_u(tape, q2, s2).item() == 0.f);

    // support norm does not divide
    auto q3 = Tensor<float>::from_data({2}, {2.f, 0.f});
    auto s3 = Tensor<float>::from_data({2}, {4.f, 0.f});
    REQUIRE_THAT(cosine_u(tape, q3, s3).item(), Catch::Matchers::WithinAbs(4.0, 1e-6));

    bool clamped = false;
    auto qz = Tensor<float>::from_data({2}, {0.f, 0.f});
    cosine_u(tape, qz, s3, &clamped);
    REQUIRE(clamped);
}

TEST_CASE("matching_probabilities") {
    Tape<float> tape(false);
    SECTION("equal similarities spread evenly") {
        auto sims = Tensor<float>::full({5}, 1.234f);
        auto p = matching_probabilities(tape, sims, {0, 1, 2, 3, 4}, 5);
        REQUIRE(p.shape() == Shape{5});
        for (float v : p.values()) REQUIRE_THAT(v, Catch::Matchers::WithinAbs(0.2, 1e-6));
    }
    SECTION("softmax arithmetic") {
        auto sims = Tensor<float>::from_data({2}, {std::log(2.f), 0.f});
        auto p = matching_probabilities(tape, sims, {0, 1}, 2);
        REQUIRE_THAT(p[0], Catch::Matchers::WithinAbs(2.0 / 3.0, 1e-6));
        REQUIRE_THAT(p[1], Catch::Matchers::WithinAbs(1.0 / 3.0, 1e-6));
    }
    SECTION("votes concentrate") {
        auto sims = Tensor<float>::from_data({2}, {0.7f, -0.1f});
        auto p = matching_probabilities(tape, sims, {0, 0}, 1);
        REQUIRE_THAT(p[0], Catch::Matchers::WithinAbs(1.0, 1e-6));
    }
    SECTION("label outside the way is rejected") {
        auto sims = Tensor<float>::from_data({2}, {0.f, 0.f});
        REQUIRE_THROWS_AS(matching_probabilities(tape, sims, {0, 2}, 2), std::invalid_argument);
    }
}

TEST_CASE("classify_episode rows are distributions and match brute-force Eq-style recomputation") {
    auto ep = make_episode(3, 2, 2, 16, 21);
    auto net = make_network<float>(ModelKind::Baseline, 22);
    Tape<float> tape(false);
    auto sims = episode_similarities(tape, net, ep, BnMode::Batch);
    std::vector<std::size_t> labels;
    for (const auto& e : ep.support) labels.push_back(e.label);
    auto probs = matching_probabilities(tape, sims, labels, ep.way);

    const std::size_t t = ep.query.size(), m = ep.support.size();
    for (std::size_t i = 0; i < t; ++i) {
        double row = 0;
        for (std::size_t c = 0; c < ep.way; ++c) {
            REQUIRE(probs[i * ep.way + c] >= 0.f);
            row += probs[i * ep.way + c];
        }
        REQUIRE_THAT(row, Catch::Matchers::WithinAbs(1.0, 1e-6));

        // independent recomputation: direct exponentials and sums
        double denom = 0;
        std::vector<double> ex(m);
        for (std::size_t j = 0; j < m; ++j) {
            ex[j] = std::exp(double(sims[i * m + j]));
            denom += ex[j];
        }
        for (std::size_t c = 0; c < ep.way; ++c) {
            double want = 0;
            for (std::size_t j = 0; j < m; ++j)
                if (labels[j] == c) want += ex[j] / denom;
            REQUIRE_THAT(double(probs[i * ep.way + c]), Catch::Matchers::WithinAbs(want, 1e-6));
        }
    }
}

TEST_CASE("crossmod with zeroed post-multipliers classifies like the baseline") {
    auto ep = make_episode(3, 1, 2, 16, 23);
    auto cross = make_network<float>(ModelKind::CrossMod, 24);
    Network<float> base;
    base.kind = ModelKind::Baseline;
    base.blocks = cross.blocks;  // share the very same block parameters
    Tape<float> tape(false);
    auto p_cross = classify_episode(tape, cross, ep, BnMode::Batch);
    auto p_base = classify_episode(tape, base, ep, BnMode::Batch);
    REQUIRE(max_abs_diff(p_cross, p_base) < 1e-6);
}

TEST_CASE("a query identical to a support wins the vote") {
    auto ep = make_episode(2, 1, 1, 16, 25);
    ep.query[0] = EpisodeExample{ep.support[0].image, ep.support[0].class_id, ep.support[0].label};
    auto net = make_network<float>(ModelKind::Baseline, 26);
    Tape<float> tape(false);
    auto probs = classify_episode(tape, net, ep, BnMode::Batch);
    REQUIRE(probs[0 * ep.way + ep.support[0].label] > 0.5f);
}

TEST_CASE("permuting the support set permutes nothing in the distributions") {
    auto ep = make_episode(3, 2, 2, 16, 27);
    auto net = make_network<float>(ModelKind::Baseline, 28);
    Tape<float> tape(false);
    auto p1 = classify_episode(tape, net, ep, BnMode::Batch);

    Episode shuffled = ep;
    Rng rng(29);
    rng.shuffle(shuffled.support.begin(), shuffled.support.end());
    auto p2 = classify_episode(tape, net, shuffled, BnMode::Batch);
    REQUIRE(max_abs_diff(p1, p2) < 1e-6);
}

TEST_CASE("checkpoint round-trip preserves weights and stats") {
    namespace fs = std::filesystem;
    const fs::path path = fs::temp_directory_path() / "xmodnet_ckpt_test.xmn";
    auto net = make_network<float>(ModelKind::CrossMod, 30);
    net.blocks[0].bn_stats.mean[3] = 0.25f;
    net.blocks[0].bn_stats.var[3] = 2.5f;
    net.blocks[0].bn_stats.update_count = 7;
    for (auto& v : net.generators[1].gamma0.values()) v = 0.125f;
    save_checkpoint(net, path);

    auto back = load_checkpoint<float>(path);
    REQUIRE(back.kind == ModelKind::CrossMod);
    REQUIRE(back.generators.size() == 3);
    for (std::size_t i = 0; i < 4; ++i) {
        for (std::size_t j = 0; j < net.blocks[i].kernels.size(); ++j)
            REQUIRE(back.blocks[i].kernels[j] == net.blocks[i].kernels[j]);
        REQUIRE(back.blocks[i].bn_stats.update_count == net.blocks[i].bn_stats.update_count);
        REQUIRE(back.blocks[i].bn_stats.mean[3] == net.blocks[i].bn_stats.mean[3]);
        REQUIRE(back.blocks[i].bn_stats.var[3] == net.blocks[i].bn_stats.var[3]);
    }
    for (float v : back.generators[1].gamma0.values()) REQUIRE(v == 0.125f);
    // trainable tensors come back ready for training
    REQUIRE(back.blocks[0].kernels.requires_grad());
    fs::remove(path);
}

TEST_CASE("checkpoint rejects bad magic and version") {
    namespace fs = std::filesystem;
    const fs::path path = fs::temp_directory_path() / "xmodnet_ckpt_bad.xmn";
    {
        std::ofstream out(path, std::ios::binary);
        out << "NOTAMAGIC0000";
    }
    REQUIRE_THROWS_AS(load_checkpoint<float>(path), CheckpointError);
    {
        std::ofstream out(path, std::ios::binary);
        out.write("XMODNET", 7);
        const std::uint32_t bad_version = 99;
        out.write(reinterpret_cast<const char*>(&bad_version), 4);
    }
    REQUIRE_THROWS_AS(load_checkpoint<float>(path), CheckpointError);
    fs::remove(path);
}

TEST_CASE("double-precision network loads from float checkpoints") {
    namespace fs = std::filesystem;
    const fs::path path = fs::temp_directory_path() / "xmodnet_ckpt_dbl.xmn";
    auto net = make_network<float>(ModelKind::Baseline, 31);
    save_checkpoint(net, path);
    auto dbl = load_checkpoint<double>(path);
    REQUIRE(dbl.blocks[2].kernels.size() == net.blocks[2].kernels.size());
    REQUIRE(double(net.blocks[2].kernels[5]) == dbl.blocks[2].kernels[5]);
    fs::remove(path);
}
