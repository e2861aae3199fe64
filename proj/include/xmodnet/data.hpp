#ifndef XMODNET_DATA_HPP
#define XMODNET_DATA_HPP

#include <algorithm>
#include <map>
#include <memory>
#include <stdexcept>
#include <string>
#include <vector>

#include "xmodnet/rng.hpp"
#include "xmodnet/tensor.hpp"

namespace xmodnet {

/// Square RGB image, float32 values in [0,1], row-major [H,W,3].
using ImageRef = std::shared_ptr<const std::vector<float>>;

struct LabeledExample {
    ImageRef image;
    int class_id = -1;
};

struct DatasetSplit {
    std::string name;  // train | val | test
    std::size_t resolution = 0;
    std::map<int, std::vector<ImageRef>> examples;       // class_id -> images
    std::map<int, std::string> class_names;              // class_id -> manifest label

    std::size_t num_classes() const { return examples.size(); }
    std::size_t num_examples() const {
        std::size_t n = 0;
        for (const auto& [_, v] : examples) n += v.size();
        return n;
    }
    std::vector<int> class_ids() const {
        std::vector<int> ids;
        ids.reserve(examples.size());
        for (const auto& [id, _] : examples) ids.push_back(id);
        return ids;
    }
};

struct EpisodeExample {
    ImageRef image;
    int class_id = -1;       // dataset class id
    std::size_t label = 0;   // episode-local label in 0..N-1
};

/// One few-shot task: N*K support examples plus T query examples drawn from
/// the same N classes. Support and query never share an example instance.
struct Episode {
    std::size_t way = 0;
    std::size_t shot = 0;
    std::size_t resolution = 0;
    std::vector<EpisodeExample> support;             // class-major, K per class
    std::vector<EpisodeExample> query;
    std::map<int, std::size_t> episode_labels;       // class_id -> local label
};

/// Draws an N-way K-shot episode: N classes uniformly without replacement,
/// then K+q examples per class without replacement, first K to the support
/// set and the rest to the query set. Fully determined by the rng seed.
inline Episode sample_episode(const DatasetSplit& split, std::size_t way, std::size_t shot,
                              std::size_t queries_per_class, Rng& rng) {
    const std::vector<int> ids = split.class_ids();
    if (ids.size() < way)
        throw std::runtime_error("sample_episode: split '" + split.name + "' has " +
                                 std::to_string(ids.size()) + " classes, need " + std::to_string(way));
    Episode ep;
    ep.way = way;
    ep.shot = shot;
    ep.resolution = split.resolution;
    const auto picked = rng.sample_without_replacement(ids.size(), way);
    for (std::size_t local = 0; local < way; ++local) {
        const int cid = ids[picked[local]];
        const auto& pool = split.examples.at(cid);
        const std::size_t need = shot + queries_per_class;
        if (pool.size() < need)
            throw std::runtime_error("sample_episode: class " + std::to_string(cid) + " has " +
                                     std::to_string(pool.size()) + " examples, need " +
                                     std::to_string(need));
        ep.episode_labels[cid] = local;
        const auto chosen = rng.sample_without_replacement(pool.size(), need);
        for (std::size_t i = 0; i < need; ++i) {
            EpisodeExample ex{pool[chosen[i]], cid, local};
            (i < shot ? ep.support : ep.query).push_back(std::move(ex));
        }
    }
    return ep;
}

enum class SyntheticMode { Separable, Pairwise };

inline SyntheticMode synthetic_mode_from_string(const std::string& s) {
    if (s == "separable") return SyntheticMode::Separable;
    if (s == "pairwise") return SyntheticMode::Pairwise;
    throw std::invalid_argument("unknown synthetic mode: " + s);
}

/// Deterministic desk-scale dataset generator.
///
/// separable: each class is a fixed random template plus per-example Gaussian
/// pixel noise (sigma 0.1), clamped to [0,1]. Templates drawn uniformly are
/// mutually distant in pixel space, so nearest-template classification is
/// error-free.
///
/// pairwise: the class pattern occupies exactly one of the three channels,
/// chosen per example; a corner beacon marks that channel, and the remaining
/// channels carry other classes' patterns at reduced contrast. Which channel
/// is informative therefore varies between the examples of an episode, so
/// features conditioned on a support-query pair have signal to exploit that
/// single-example features lack.
inline DatasetSplit synthetic_dataset(std::size_t num_classes, std::size_t per_class,
                                      std::size_t resolution, SyntheticMode mode,
                                      std::uint64_t seed, const std::string& split_name = "train",
                                      int class_id_offset = 0) {
    if (resolution % 16 != 0)
        throw std::invalid_argument("synthetic_dataset: resolution " + std::to_string(resolution) +
                                    " is not divisible by 16");
    DatasetSplit split;
    split.name = split_name;
    split.resolution = resolution;
    const std::size_t px = resolution * resolution;

    Rng template_rng = Rng::for_stream(seed, 0xfeedULL + std::uint64_t(class_id_offset));
    std::vector<std::vector<float>> templates(num_classes);
    for (auto& t : templates) {
        t.resize(mode == SyntheticMode::Separable ? px * 3 : px);
        const double lo = mode == SyntheticMode::Separable ? 0.0 : 0.3;
        for (auto& v : t) v = float(template_rng.uniform(lo, 1.0));
    }

    const std::size_t beacon = resolution / 8;
    for (std::size_t c = 0; c < num_classes; ++c) {
        const int cid = class_id_offset + int(c);
        auto& bucket = split.examples[cid];
        split.class_names[cid] = "class_" + std::to_string(cid);
        for (std::size_t e = 0; e < per_class; ++e) {
            Rng ex_rng = Rng::for_stream(seed, (std::uint64_t(cid) << 24) | e);
            auto img = std::make_shared<std::vector<float>>(px * 3, 0.f);
            if (mode == SyntheticMode::Separable) {
                for (std::size_t i = 0; i < px * 3; ++i)
                    (*img)[i] = float(std::clamp(double(templates[c][i]) + ex_rng.normal(0.0, 0.1),
                                                 0.0, 1.0));
            } else {
                const std::size_t k = ex_rng.uniform_index(3);
                std::size_t distractor = ex_rng.uniform_index(num_classes);
                if (num_classes > 1)
                    while (distractor == c) distractor = ex_rng.uniform_index(num_classes);
                for (std::size_t p = 0; p < px; ++p)
                    for (std::size_t ch = 0; ch < 3; ++ch) {
                        const double base = (ch == k) ? double(templates[c][p])
                                                      : 0.75 * double(templates[distractor][p]);
                        (*img)[p * 3 + ch] =
                            float(std::clamp(base + ex_rng.normal(0.0, 0.05), 0.0, 1.0));
                    }
                // channel beacon in the top-left corner
                for (std::size_t y = 0; y < beacon; ++y)
                    for (std::size_t x = 0; x < beacon; ++x)
                        for (std::size_t ch = 0; ch < 3; ++ch)
                            (*img)[(y * resolution + x) * 3 + ch] = (ch == k) ? 1.f : 0.f;
            }
            bucket.push_back(std::move(img));
        }
    }
    return split;
}

struct SyntheticSplits {
    DatasetSplit train, val, test;
};

/// Three splits with disjoint class id ranges from one seed.
inline SyntheticSplits make_synthetic_splits(std::size_t classes_per_split, std::size_t per_class,
                                             std::size_t resolution, SyntheticMode mode,
                                             std::uint64_t seed) {
    SyntheticSplits s;
    s.train = synthetic_dataset(classes_per_split, per_class, resolution, mode, seed, "train", 0);
    s.val = synthetic_dataset(classes_per_split, per_class, resolution, mode, seed, "val",
                              int(classes_per_split));
    s.test = synthetic_dataset(classes_per_split, per_class, resolution, mode, seed, "test",
                               int(2 * classes_per_split));
    return s;
}

/// Stacks episode examples into a [B,H,W,3] tensor, casting to T.
template <typename T>
Tensor<T> stack_images(const std::vector<EpisodeExample>& examples, std::size_t resolution) {
    const std::size_t px = resolution * resolution * 3;
    Tensor<T> out({examples.size(), resolution, resolution, 3});
    T* dst = out.data();
    for (std::size_t i = 0; i < examples.size(); ++i) {
        const auto& img = *examples[i].image;
        if (img.size() != px)
            throw ShapeError("stack_images: image has " + std::to_string(img.size()) +
                             " values, expected " + std::to_string(px));
        for (std::size_t j = 0; j < px; ++j) dst[i * px + j] = T(img[j]);
    }
    return out;
}

} // namespace xmodnet

#endif // XMODNET_DATA_HPP
