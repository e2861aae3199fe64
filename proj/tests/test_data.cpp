// Episodic data: sampling invariants, synthetic generators, disk layout.

#include "catch_amalgamated.hpp"

#include <cmath>
#include <filesystem>
#include <fstream>
#include <set>

#include "xmodnet/data.hpp"
#include "xmodnet/dataset_io.hpp"
#include "xmodnet/rng.hpp"

using namespace xmodnet;
namespace fs = std::filesystem;

namespace {

fs::path temp_dir(const std::string& tag) {
    const fs::path p = fs::temp_directory_path() / ("xmodnet_test_" + tag);
    fs::remove_all(p);
    fs::create_directories(p);
    return p;
}

double image_l2(const std::vector<float>& a, const std::vector<float>& b) {
    double acc = 0;
    for (std::size_t i = 0; i < a.size(); ++i) {
        const double d = double(a[i]) - double(b[i]);
        acc += d * d;
    }
    return std::sqrt(acc);
}

} // namespace

TEST_CASE("sample_episode produces the documented sizes") {
    auto split = synthetic_dataset(10, 20, 32, SyntheticMode::Separable, 1);
    Rng rng(7);
    auto ep = sample_episode(split, 5, 1, 15, rng);
    REQUIRE(ep.support.size() == 5);
    REQUIRE(ep.query.size() == 75);
}

TEST_CASE("sample_episode exhaustion case keeps support and query disjoint") {
    auto split = synthetic_dataset(2, 2, 16, SyntheticMode::Separable, 2);
    Rng rng(8);
    auto ep = sample_episode(split, 2, 1, 1, rng);
    REQUIRE(ep.support.size() == 2);
    REQUIRE(ep.query.size() == 2);
    std::set<const void*> support_imgs;
    for (const auto& e : ep.support) support_imgs.insert(e.image.get());
    for (const auto& e : ep.query) REQUIRE_FALSE(support_imgs.count(e.image.get()));
    std::set<int> sup_classes, qry_classes;
    for (const auto& e : ep.support) sup_classes.insert(e.class_id);
    for (const auto& e : ep.query) qry_classes.insert(e.class_id);
    REQUIRE(sup_classes.size() == 2);
    REQUIRE(qry_classes == sup_classes);
}

TEST_CASE("sample_episode is deterministic given the seed") {
    auto split = synthetic_dataset(8, 10, 16, SyntheticMode::Separable, 3);
    Rng a(42), b(42);
    auto e1 = sample_episode(split, 4, 2, 3, a);
    auto e2 = sample_episode(split, 4, 2, 3, b);
    REQUIRE(e1.support.size() == e2.support.size());
    for (std::size_t i = 0; i < e1.support.size(); ++i) {
        REQUIRE(e1.support[i].image.get() == e2.support[i].image.get());
        REQUIRE(e1.support[i].class_id == e2.support[i].class_id);
    }
    for (std::size_t i = 0; i < e1.query.size(); ++i)
        REQUIRE(e1.query[i].image.get() == e2.query[i].image.get());
}

TEST_CASE("sample_episode errors name the deficiency") {
    auto split = synthetic_dataset(3, 4, 16, SyntheticMode::Separable, 4);
    Rng rng(9);
    REQUIRE_THROWS_WITH(sample_episode(split, 5, 1, 1, rng),
                        Catch::Matchers::ContainsSubstring("3 classes"));
    // class pool too small for K+q
    REQUIRE_THROWS_WITH(sample_episode(split, 2, 2, 10, rng),
                        Catch::Matchers::ContainsSubstring("class "));
}

TEST_CASE("episode invariants hold over random draws") {
    auto split = synthetic_dataset(9, 12, 16, SyntheticMode::Pairwise, 5);
    for (std::uint64_t seed = 0; seed < 20; ++seed) {
        Rng rng(seed);
        const std::size_t way = 2 + seed % 4;
        const std::size_t shot = 1 + seed % 3;
        const std::size_t q = 1 + seed % 5;
        auto ep = sample_episode(split, way, shot, q, rng);

        // support multiset: exactly K per each of N classes
        std::map<int, std::size_t> counts;
        for (const auto& e : ep.support) counts[e.class_id]++;
        REQUIRE(counts.size() == way);
        for (const auto& [_, c] : counts) REQUIRE(c == shot);

        // episode labels are a bijection onto 0..N-1
        std::set<std::size_t> labels;
        for (const auto& [_, l] : ep.episode_labels) labels.insert(l);
        REQUIRE(labels.size() == way);
        REQUIRE(*labels.begin() == 0);
        REQUIRE(*labels.rbegin() == way - 1);

        // query classes within support classes; instances disjoint
        std::set<const void*> sup;
        for (const auto& e : ep.support) sup.insert(e.image.get());
        for (const auto& e : ep.query) {
            REQUIRE(counts.count(e.class_id));
            REQUIRE_FALSE(sup.count(e.image.get()));
            REQUIRE(e.label == ep.episode_labels.at(e.class_id));
        }
        REQUIRE(ep.query.size() == way * q);
    }
}

TEST_CASE("synthetic_dataset counting and determinism") {
    auto split = synthetic_dataset(10, 20, 32, SyntheticMode::Separable, 6);
    REQUIRE(split.num_classes() == 10);
    REQUIRE(split.num_examples() == 200);
    REQUIRE_THROWS_AS(synthetic_dataset(3, 3, 30, SyntheticMode::Separable, 6),
                      std::invalid_argument);

    auto again = synthetic_dataset(10, 20, 32, SyntheticMode::Separable, 6);
    for (int cid : split.class_ids())
        for (std::size_t i = 0; i < split.examples.at(cid).size(); ++i)
            REQUIRE(*split.examples.at(cid)[i] == *again.examples.at(cid)[i]);
}

TEST_CASE("separable mode: nearest class-mean classification is perfect") {
    auto split = synthetic_dataset(5, 20, 32, SyntheticMode::Separable, 7);
    // leave-one-out class means as template estimates
    const auto ids = split.class_ids();
    std::size_t total = 0, correct = 0;
    for (int cid : ids) {
        const auto& pool = split.examples.at(cid);
        for (std::size_t i = 0; i < pool.size(); ++i) {
            double best = 1e300;
            int best_class = -1;
            for (int other : ids) {
                const auto& opool = split.examples.at(other);
                std::vector<float> mean(pool[i]->size(), 0.f);
                std::size_t n = 0;
                for (std::size_t j = 0; j < opool.size(); ++j) {
                    if (other == cid && j == i) continue;  // leave the probe out
                    for (std::size_t k = 0; k < mean.size(); ++k) mean[k] += (*opool[j])[k];
                    ++n;
                }
                for (auto& v : mean) v /= float(n);
                const double d = image_l2(*pool[i], mean);
                if (d < best) {
                    best = d;
                    best_class = other;
                }
            }
            ++total;
            if (best_class == cid) ++correct;
        }
    }
    REQUIRE(total == 100);
    REQUIRE(correct == total);
}

TEST_CASE("make_synthetic_splits yields disjoint class sets") {
    auto splits = make_synthetic_splits(6, 4, 16, SyntheticMode::Separable, 8);
    std::set<int> seen;
    for (const auto* s : {&splits.train, &splits.val, &splits.test})
        for (int id : s->class_ids()) {
            REQUIRE_FALSE(seen.count(id));
            seen.insert(id);
        }
    REQUIRE(seen.size() == 18);
}

TEST_CASE("pairwise mode marks exactly one beacon channel per example") {
    auto split = synthetic_dataset(4, 6, 16, SyntheticMode::Pairwise, 9);
    for (int cid : split.class_ids())
        for (const auto& img : split.examples.at(cid)) {
            int beacons = 0;
            for (std::size_t ch = 0; ch < 3; ++ch)
                if ((*img)[ch] == 1.f) ++beacons;  // top-left pixel
            REQUIRE(beacons == 1);
        }
}

TEST_CASE("stack_images shapes and casts") {
    auto split = synthetic_dataset(2, 3, 16, SyntheticMode::Separable, 10);
    Rng rng(11);
    auto ep = sample_episode(split, 2, 1, 1, rng);
    auto t = stack_images<double>(ep.support, 16);
    REQUIRE(t.shape() == Shape{2, 16, 16, 3});
    REQUIRE(t[0] == double((*ep.support[0].image)[0]));
}

TEST_CASE("split export and reload round-trips within 8-bit quantization") {
    const auto root = temp_dir("roundtrip");
    auto split = synthetic_dataset(3, 4, 16, SyntheticMode::Separable, 12, "train");
    save_split_as_images(split, root);
    auto loaded = load_image_split(root, "train", 16);
    REQUIRE(loaded.num_classes() == 3);
    REQUIRE(loaded.num_examples() == 12);
    // match by class name; pixels within PNG quantization error
    for (int cid : split.class_ids()) {
        const std::string name = split.class_names.at(cid);
        int loaded_id = -1;
        for (const auto& [lid, lname] : loaded.class_names)
            if (lname == name) loaded_id = lid;
        REQUIRE(loaded_id >= 0);
        const auto& orig = split.examples.at(cid);
        const auto& back = loaded.examples.at(loaded_id);
        REQUIRE(orig.size() == back.size());
        for (std::size_t i = 0; i < orig.size(); ++i)
            for (std::size_t p = 0; p < orig[i]->size(); ++p)
                REQUIRE_THAT((*back[i])[p], Catch::Matchers::WithinAbs((*orig[i])[p], 1.0 / 255.0));
    }
    fs::remove_all(root);
}

TEST_CASE("loader error paths") {
    const auto root = temp_dir("loader_errors");
    SECTION("missing manifest") {
        REQUIRE_THROWS_WITH(load_image_split(root, "train", 16),
                            Catch::Matchers::ContainsSubstring("manifest not found"));
    }
    SECTION("manifest referencing a missing file") {
        fs::create_directories(root / "splits");
        fs::create_directories(root / "images");
        std::ofstream csv(root / "splits" / "train.csv");
        csv << "filename,label\nghost.png,class_a\n";
        csv.close();
        REQUIRE_THROWS_WITH(load_image_split(root, "train", 16),
                            Catch::Matchers::ContainsSubstring("ghost.png"));
    }
    SECTION("miniimagenet class count validation") {
        auto split = synthetic_dataset(3, 2, 16, SyntheticMode::Separable, 13, "train");
        save_split_as_images(split, root);
        REQUIRE_THROWS_WITH(load_miniimagenet(root, "train"),
                            Catch::Matchers::ContainsSubstring("expected 64"));
    }
    fs::remove_all(root);
}
