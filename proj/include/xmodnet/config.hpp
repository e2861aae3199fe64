#ifndef XMODNET_CONFIG_HPP
#define XMODNET_CONFIG_HPP

#include <cstdlib>
#include <filesystem>
#include <fstream>
#include <functional>
#include <map>
#include <set>
#include <sstream>
#include <string>

namespace xmodnet {

class ConfigError : public std::runtime_error {
public:
    explicit ConfigError(const std::string& what) : std::runtime_error(what) {}
};

/// Fully resolved run configuration. Sources, later ones winning:
/// defaults < config file (flat key=value, dotted sections) < command-line
/// flags < nothing. Every run serializes the result next to its outputs.
struct RunConfig {
    std::string model = "baseline";          // baseline | crossmod
    std::size_t way = 5;
    std::size_t shot = 1;
    std::size_t queries_per_class = 15;      // training episodes
    bool queries_total = false;              // read queries_per_class as a total instead
    double lr_initial = 0.001;
    std::size_t lr_halving_period = 100000;
    double l1_factor = 0.001;
    std::size_t max_episodes = 300000;
    std::size_t eval_every = 5000;
    std::size_t val_episodes = 200;
    std::size_t val_queries_per_class = 15;
    std::uint64_t seed = 0;
    std::string bn_mode = "running";         // running | batch (transductive)
    std::size_t workers = 1;
    std::string output_dir = "runs/out";

    std::string dataset_kind = "synthetic";  // synthetic | miniimagenet
    std::string dataset_root;                // miniimagenet layout root
    std::size_t synthetic_classes = 10;
    std::size_t synthetic_per_class = 20;
    std::size_t synthetic_resolution = 32;
    std::string synthetic_mode = "separable";
    std::uint64_t synthetic_seed = 1234;     // dataset content, independent of the run seed

    std::size_t eval_episodes = 1000;
    std::size_t eval_queries_per_class = 15;
    std::string eval_split = "test";         // train | val | test

    /// Training query count per class after applying the total/per-class knob.
    std::size_t resolved_train_queries() const {
        if (!queries_total) return queries_per_class;
        if (queries_per_class % way != 0)
            throw ConfigError("queries_total=1 needs queries_per_class divisible by way");
        return queries_per_class / way;
    }
};

namespace detail {

using FieldSetter = std::function<void(RunConfig&, const std::string&)>;

inline std::size_t to_size(const std::string& key, const std::string& v) {
    try {
        return std::stoull(v);
    } catch (...) {
        throw ConfigError("bad integer for " + key + ": " + v);
    }
}

inline double to_double(const std::string& key, const std::string& v) {
    try {
        return std::stod(v);
    } catch (...) {
        throw ConfigError("bad number for " + key + ": " + v);
    }
}

inline bool to_bool(const std::string& key, const std::string& v) {
    if (v == "1" || v == "true" || v == "yes") return true;
    if (v == "0" || v == "false" || v == "no") return false;
    throw ConfigError("bad bool for " + key + ": " + v);
}

inline const std::map<std::string, FieldSetter>& config_fields() {
    static const std::map<std::string, FieldSetter> fields = {
        {"model", [](RunConfig& c, const std::string& v) { c.model = v; }},
        {"way", [](RunConfig& c, const std::string& v) { c.way = to_size("way", v); }},
        {"shot", [](RunConfig& c, const std::string& v) { c.shot = to_size("shot", v); }},
        {"queries_per_class",
         [](RunConfig& c, const std::string& v) { c.queries_per_class = to_size("queries_per_class", v); }},
        {"queries_total",
         [](RunConfig& c, const std::string& v) { c.queries_total = to_bool("queries_total", v); }},
        {"lr_initial", [](RunConfig& c, const std::string& v) { c.lr_initial = to_double("lr_initial", v); }},
        {"lr_halving_period",
         [](RunConfig& c, const std::string& v) { c.lr_halving_period = to_size("lr_halving_period", v); }},
        {"l1_factor", [](RunConfig& c, const std::string& v) { c.l1_factor = to_double("l1_factor", v); }},
        {"max_episodes",
         [](RunConfig& c, const std::string& v) { c.max_episodes = to_size("max_episodes", v); }},
        {"eval_every", [](RunConfig& c, const std::string& v) { c.eval_every = to_size("eval_every", v); }},
        {"val_episodes",
         [](RunConfig& c, const std::string& v) { c.val_episodes = to_size("val_episodes", v); }},
        {"val_queries_per_class",
         [](RunConfig& c, const std::string& v) { c.val_queries_per_class = to_size("val_queries_per_class", v); }},
        {"seed", [](RunConfig& c, const std::string& v) { c.seed = to_size("seed", v); }},
        {"bn_mode", [](RunConfig& c, const std::string& v) { c.bn_mode = v; }},
        {"workers", [](RunConfig& c, const std::string& v) { c.workers = to_size("workers", v); }},
        {"output_dir", [](RunConfig& c, const std::string& v) { c.output_dir = v; }},
        {"dataset.kind", [](RunConfig& c, const std::string& v) { c.dataset_kind = v; }},
        {"dataset.root", [](RunConfig& c, const std::string& v) { c.dataset_root = v; }},
        {"dataset.synthetic.classes",
         [](RunConfig& c, const std::string& v) { c.synthetic_classes = to_size("dataset.synthetic.classes", v); }},
        {"dataset.synthetic.per_class",
         [](RunConfig& c, const std::string& v) { c.synthetic_per_class = to_size("dataset.synthetic.per_class", v); }},
        {"dataset.synthetic.resolution",
         [](RunConfig& c, const std::string& v) { c.synthetic_resolution = to_size("dataset.synthetic.resolution", v); }},
        {"dataset.synthetic.mode",
         [](RunConfig& c, const std::string& v) { c.synthetic_mode = v; }},
        {"dataset.synthetic.seed",
         [](RunConfig& c, const std::string& v) { c.synthetic_seed = to_size("dataset.synthetic.seed", v); }},
        {"eval.episodes",
         [](RunConfig& c, const std::string& v) { c.eval_episodes = to_size("eval.episodes", v); }},
        {"eval.queries_per_class",
         [](RunConfig& c, const std::string& v) { c.eval_queries_per_class = to_size("eval.queries_per_class", v); }},
        {"eval.split", [](RunConfig& c, const std::string& v) { c.eval_split = v; }},
    };
    return fields;
}

} // namespace detail

/// key=value per line, '#' comments, whitespace-tolerant. Unknown keys are
/// config errors. Returns the keys that were set.
inline std::set<std::string> apply_config_file(RunConfig& cfg, const std::filesystem::path& path) {
    std::ifstream in(path);
    if (!in) throw ConfigError("cannot read config file: " + path.string());
    std::set<std::string> seen;
    std::string line;
    std::size_t lineno = 0;
    while (std::getline(in, line)) {
        ++lineno;
        const auto hash = line.find('#');
        if (hash != std::string::npos) line.erase(hash);
        const auto strip = [](std::string s) {
            const auto a = s.find_first_not_of(" \t\r");
            if (a == std::string::npos) return std::string();
            const auto b = s.find_last_not_of(" \t\r");
            return s.substr(a, b - a + 1);
        };
        if (strip(line).empty()) continue;
        const auto eq = line.find('=');
        if (eq == std::string::npos)
            throw ConfigError(path.string() + ":" + std::to_string(lineno) + ": expected key=value");
        const std::string key = strip(line.substr(0, eq));
        const std::string value = strip(line.substr(eq + 1));
        const auto& fields = detail::config_fields();
        const auto it = fields.find(key);
        if (it == fields.end())
            throw ConfigError(path.string() + ":" + std::to_string(lineno) + ": unknown key '" + key + "'");
        it->second(cfg, value);
        seen.insert(key);
    }
    return seen;
}

inline void validate_config(const RunConfig& cfg) {
    if (cfg.model != "baseline" && cfg.model != "crossmod")
        throw ConfigError("model must be baseline or crossmod, got '" + cfg.model + "'");
    if (cfg.dataset_kind != "synthetic" && cfg.dataset_kind != "miniimagenet")
        throw ConfigError("dataset.kind must be synthetic or miniimagenet, got '" + cfg.dataset_kind + "'");
    if (cfg.bn_mode != "running" && cfg.bn_mode != "batch")
        throw ConfigError("bn_mode must be running or batch, got '" + cfg.bn_mode + "'");
    if (cfg.eval_split != "train" && cfg.eval_split != "val" && cfg.eval_split != "test")
        throw ConfigError("eval.split must be train, val or test, got '" + cfg.eval_split + "'");
    if (cfg.way == 0 || cfg.shot == 0 || cfg.queries_per_class == 0)
        throw ConfigError("way, shot and queries_per_class must be positive");
    if (cfg.lr_initial <= 0 || cfg.lr_halving_period == 0)
        throw ConfigError("lr_initial and lr_halving_period must be positive");
    if (cfg.l1_factor < 0) throw ConfigError("l1_factor must be >= 0");
    if (cfg.dataset_kind == "miniimagenet" && cfg.dataset_root.empty())
        throw ConfigError("dataset.root is required for dataset.kind=miniimagenet");
    cfg.resolved_train_queries();  // validates the divisibility of the total reading
}

/// Deterministic serialization of the resolved config (stable key order,
/// full float precision).
inline std::string serialize_config(const RunConfig& cfg) {
    std::ostringstream os;
    os.precision(17);
    os << "model = " << cfg.model << '\n'
       << "way = " << cfg.way << '\n'
       << "shot = " << cfg.shot << '\n'
       << "queries_per_class = " << cfg.queries_per_class << '\n'
       << "queries_total = " << (cfg.queries_total ? 1 : 0) << '\n'
       << "lr_initial = " << cfg.lr_initial << '\n'
       << "lr_halving_period = " << cfg.lr_halving_period << '\n'
       << "l1_factor = " << cfg.l1_factor << '\n'
       << "max_episodes = " << cfg.max_episodes << '\n'
       << "eval_every = " << cfg.eval_every << '\n'
       << "val_episodes = " << cfg.val_episodes << '\n'
       << "val_queries_per_class = " << cfg.val_queries_per_class << '\n'
       << "seed = " << cfg.seed << '\n'
       << "bn_mode = " << cfg.bn_mode << '\n'
       << "workers = " << cfg.workers << '\n'
       << "output_dir = " << cfg.output_dir << '\n'
       << "dataset.kind = " << cfg.dataset_kind << '\n'
       << "dataset.root = " << cfg.dataset_root << '\n'
       << "dataset.synthetic.classes = " << cfg.synthetic_classes << '\n'
       << "dataset.synthetic.per_class = " << cfg.synthetic_per_class << '\n'
       << "dataset.synthetic.resolution = " << cfg.synthetic_resolution << '\n'
       << "dataset.synthetic.mode = " << cfg.synthetic_mode << '\n'
       << "dataset.synthetic.seed = " << cfg.synthetic_seed << '\n'
       << "eval.episodes = " << cfg.eval_episodes << '\n'
       << "eval.queries_per_class = " << cfg.eval_queries_per_class << '\n'
       << "eval.split = " << cfg.eval_split << '\n';
    return os.str();
}

inline void write_resolved_config(const RunConfig& cfg, const std::filesystem::path& dir) {
    std::filesystem::create_directories(dir);
    std::ofstream out(dir / "config.resolved");
    if (!out) throw std::runtime_error("cannot write resolved config under " + dir.string());
    out << serialize_config(cfg);
}

/// XMODNET_SEED is the fallback when neither file nor flag set a seed.
inline void apply_env_seed(RunConfig& cfg, bool seed_was_set) {
    if (seed_was_set) return;
    if (const char* env = std::getenv("XMODNET_SEED")) {
        try {
            cfg.seed = std::stoull(env);
        } catch (...) {
            throw ConfigError(std::string("bad XMODNET_SEED: ") + env);
        }
    }
}

} // namespace xmodnet

#endif // XMODNET_CONFIG_HPP
