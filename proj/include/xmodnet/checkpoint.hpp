#ifndef XMODNET_CHECKPOINT_HPP
#define XMODNET_CHECKPOINT_HPP

#include <bit>
#include <cstdint>
#include <filesystem>
#include <fstream>
#include <map>
#include <string>
#include <vector>

#include "xmodnet/model.hpp"
#include "xmodnet/tensor.hpp"

namespace xmodnet {

// Versioned named-tensor container:
//   magic "XMODNET" | version u32 | records*
//   record = name_len u32 | name bytes | rank u32 | extents u32* | f32 values*
// All integers and floats little-endian; values are float32 regardless of the
// in-memory precision.

static_assert(std::endian::native == std::endian::little,
              "checkpoint writer assumes a little-endian host");

class CheckpointError : public std::runtime_error {
public:
    explicit CheckpointError(const std::string& what) : std::runtime_error(what) {}
};

inline constexpr char kCheckpointMagic[] = "XMODNET";  // 7 bytes on disk
inline constexpr std::uint32_t kCheckpointVersion = 1;

struct NamedTensorF {
    std::string name;
    Shape shape;
    std::vector<float> values;
};

inline void write_tensor_container(const std::filesystem::path& path,
                                   const std::vector<NamedTensorF>& records) {
    std::ofstream out(path, std::ios::binary);
    if (!out) throw CheckpointError("cannot open for writing: " + path.string());
    out.write(kCheckpointMagic, 7);
    const std::uint32_t version = kCheckpointVersion;
    out.write(reinterpret_cast<const char*>(&version), 4);
    for (const auto& r : records) {
        const std::uint32_t name_len = std::uint32_t(r.name.size());
        out.write(reinterpret_cast<const char*>(&name_len), 4);
        out.write(r.name.data(), name_len);
        const std::uint32_t rank = std::uint32_t(r.shape.size());
        out.write(reinterpret_cast<const char*>(&rank), 4);
        for (std::size_t d : r.shape) {
            const std::uint32_t e = std::uint32_t(d);
            out.write(reinterpret_cast<const char*>(&e), 4);
        }
        out.write(reinterpret_cast<const char*>(r.values.data()),
                  std::streamsize(r.values.size() * sizeof(float)));
    }
    if (!out) throw CheckpointError("write failed: " + path.string());
}

inline std::vector<NamedTensorF> read_tensor_container(const std::filesystem::path& path) {
    std::ifstream in(path, std::ios::binary);
    if (!in) throw CheckpointError("cannot open checkpoint: " + path.string());
    char magic[7];
    if (!in.read(magic, 7) || std::string(magic, 7) != kCheckpointMagic)
        throw CheckpointError("bad magic in " + path.string());
    std::uint32_t version = 0;
    in.read(reinterpret_cast<char*>(&version), 4);
    if (!in || version != kCheckpointVersion)
        throw CheckpointError("unsupported checkpoint version " + std::to_string(version) + " in " +
                              path.string());
    std::vector<NamedTensorF> records;
    while (true) {
        std::uint32_t name_len = 0;
        in.read(reinterpret_cast<char*>(&name_len), 4);
        if (in.eof()) break;
        if (!in || name_len > 4096) throw CheckpointError("corrupt record header in " + path.string());
        NamedTensorF r;
        r.name.resize(name_len);
        in.read(r.name.data(), name_len);
        std::uint32_t rank = 0;
        in.read(reinterpret_cast<char*>(&rank), 4);
        if (!in || rank > 8) throw CheckpointError("corrupt record '" + r.name + "' in " + path.string());
        std::size_t numel = 1;
        for (std::uint32_t i = 0; i < rank; ++i) {
            std::uint32_t e = 0;
            in.read(reinterpret_cast<char*>(&e), 4);
            r.shape.push_back(e);
            numel *= e;
        }
        r.values.resize(numel);
        in.read(reinterpret_cast<char*>(r.values.data()), std::streamsize(numel * sizeof(float)));
        if (!in) throw CheckpointError("truncated record '" + r.name + "' in " + path.string());
        records.push_back(std::move(r));
    }
    return records;
}

namespace detail {

template <typename T>
NamedTensorF to_record(const std::string& name, const Tensor<T>& t) {
    NamedTensorF r;
    r.name = name;
    r.shape = t.shape();
    r.values.reserve(t.size());
    for (T v : t.values()) r.values.push_back(float(v));
    return r;
}

template <typename T>
void from_record(const NamedTensorF& r, Tensor<T>& dst, const std::filesystem::path& path) {
    if (r.shape != dst.shape())
        throw CheckpointError("record '" + r.name + "' has shape " + shape_str(r.shape) +
                              ", expected " + shape_str(dst.shape()) + " in " + path.string());
    for (std::size_t i = 0; i < r.values.size(); ++i) dst[i] = T(r.values[i]);
}

} // namespace detail

/// Model weights plus batch-norm running statistics. bn_count carries the
/// update counter so a reloaded model knows whether eval-mode statistics are
/// usable.
template <typename T>
void save_checkpoint(const Network<T>& net, const std::filesystem::path& path) {
    std::vector<NamedTensorF> records;
    for (std::size_t i = 0; i < 4; ++i) {
        const std::string p = "block" + std::to_string(i + 1) + ".";
        const auto& blk = net.blocks[i];
        records.push_back(detail::to_record(p + "kernels", blk.kernels));
        records.push_back(detail::to_record(p + "conv_bias", blk.conv_bias));
        records.push_back(detail::to_record(p + "bn_gamma", blk.bn_gamma));
        records.push_back(detail::to_record(p + "bn_beta", blk.bn_beta));
        NamedTensorF mean{p + "bn_mean", {kFilters}, {}};
        NamedTensorF var{p + "bn_var", {kFilters}, {}};
        for (std::size_t c = 0; c < kFilters; ++c) {
            mean.values.push_back(float(blk.bn_stats.mean[c]));
            var.values.push_back(float(blk.bn_stats.var[c]));
        }
        records.push_back(std::move(mean));
        records.push_back(std::move(var));
        records.push_back(NamedTensorF{p + "bn_count", {1}, {float(blk.bn_stats.update_count)}});
    }
    for (std::size_t g = 0; g < net.generators.size(); ++g) {
        const std::string p = "gen" + std::to_string(g + 2) + ".";
        const auto& gen = net.generators[g];
        records.push_back(detail::to_record(p + "W", gen.W));
        records.push_back(detail::to_record(p + "b", gen.b));
        records.push_back(detail::to_record(p + "gamma0", gen.gamma0));
        records.push_back(detail::to_record(p + "beta0", gen.beta0));
    }
    write_tensor_container(path, records);
}

template <typename T>
Network<T> load_checkpoint(const std::filesystem::path& path) {
    const auto records = read_tensor_container(path);
    std::map<std::string, const NamedTensorF*> by_name;
    for (const auto& r : records) by_name[r.name] = &r;
    const bool crossmod = by_name.count("gen2.W") > 0;
    Network<T> net = make_network<T>(crossmod ? ModelKind::CrossMod : ModelKind::Baseline, 0);

    const auto need = [&](const std::string& name) -> const NamedTensorF& {
        const auto it = by_name.find(name);
        if (it == by_name.end())
            throw CheckpointError("missing record '" + name + "' in " + path.string());
        return *it->second;
    };
    for (std::size_t i = 0; i < 4; ++i) {
        const std::string p = "block" + std::to_string(i + 1) + ".";
        auto& blk = net.blocks[i];
        detail::from_record(need(p + "kernels"), blk.kernels, path);
        detail::from_record(need(p + "conv_bias"), blk.conv_bias, path);
        detail::from_record(need(p + "bn_gamma"), blk.bn_gamma, path);
        detail::from_record(need(p + "bn_beta"), blk.bn_beta, path);
        const auto& mean = need(p + "bn_mean");
        const auto& var = need(p + "bn_var");
        if (mean.values.size() != kFilters || var.values.size() != kFilters)
            throw CheckpointError("bad running stats in " + path.string());
        for (std::size_t c = 0; c < kFilters; ++c) {
            blk.bn_stats.mean[c] = T(mean.values[c]);
            blk.bn_stats.var[c] = T(var.values[c]);
        }
        blk.bn_stats.update_count = std::size_t(need(p + "bn_count").values.at(0));
    }
    for (std::size_t g = 0; g < net.generators.size(); ++g) {
        const std::string p = "gen" + std::to_string(g + 2) + ".";
        auto& gen = net.generators[g];
        detail::from_record(need(p + "W"), gen.W, path);
        detail::from_record(need(p + "b"), gen.b, path);
        detail::from_record(need(p + "gamma0"), gen.gamma0, path);
        detail::from_record(need(p + "beta0"), gen.beta0, path);
    }
    return net;
}

} // namespace xmodnet

#endif // XMODNET_CHECKPOINT_HPP
