#pragma once

#include <cstdint>
#include <cstdlib>
#include <fstream>
#include <sstream>
#include <string>
#include <vector>

#include <nlohmann/json.hpp>

#include "data.hpp"
#include "training.hpp"

namespace massl {

/// Everything a CLI run needs, read from one flat JSON object. Missing keys
/// take their defaults; unknown keys are rejected.
struct RunConfig {
    // paths
    std::string name = "default";
    std::string output_root = "runs";
    std::string dataset = "data/synth.bin";
    std::string checkpoint;  // empty: <run dir>/checkpoint.bin
    // data
    std::size_t n_samples = 60;
    std::uint64_t data_seed = 1;
    std::size_t n_labeled = 2, n_unlabeled = 40, n_val = 8, n_test = 10;
    std::size_t folds = 5;
    std::size_t fold = 0;
    std::uint64_t split_seed = 7;
    bool fully_supervised = false;
    // network
    NetworkConfig net;
    // training
    TrainConfig train;
    std::vector<Strategy> strategies{std::begin(kAllStrategies), std::end(kAllStrategies)};
    // probe
    std::size_t probe_max_voxels = 20000;
    std::uint64_t probe_seed = 0;
    bool probe_heldout = false;
    std::size_t probe_repeats = 1;
    // execution
    std::size_t threads = 1;

    SplitSizes split_sizes() const { return {n_labeled, n_unlabeled, n_val, n_test}; }
    std::string run_dir() const { return output_root + "/" + name; }
    std::string checkpoint_path() const { return checkpoint.empty() ? run_dir() + "/checkpoint.bin" : checkpoint; }

    /// Training seed of fold f; `train` and `sweep` share it so a single-fold
    /// train reproduces the matching sweep run.
    TrainConfig train_for_fold(std::size_t f, Strategy s) const {
        TrainConfig t = train;
        t.strategy = s;
        t.seed = derive_seed(train.seed, f);
        return t;
    }

    void validate() const;
};

namespace detail {

inline std::string strategies_to_string(const std::vector<Strategy>& v) {
    std::string out;
    for (std::size_t i = 0; i < v.size(); ++i) {
        if (i) out += ",";
        out += to_string(v[i]);
    }
    return out;
}

inline std::vector<Strategy> parse_strategy_list(const std::string& s) {
    std::vector<Strategy> out;
    std::stringstream ss(s);
    std::string item;
    while (std::getline(ss, item, ',')) {
        const auto b = item.find_first_not_of(" \t");
        const auto e = item.find_last_not_of(" \t");
        if (b == std::string::npos) continue;
        try {
            out.push_back(parse_strategy(item.substr(b, e - b + 1)));
        } catch (const ConfigError& err) {
            throw ConfigError(std::string(err.what()) + " in 'strategies'", "strategies");
        }
    }
    if (out.empty()) throw ConfigError("strategies must name at least one strategy", "strategies");
    return out;
}

}  // namespace detail

inline nlohmann::json to_json(const RunConfig& c) {
    nlohmann::json j;
    j["name"] = c.name;
    j["output_root"] = c.output_root;
    j["dataset"] = c.dataset;
    j["checkpoint"] = c.checkpoint;
    j["n_samples"] = c.n_samples;
    j["data_seed"] = c.data_seed;
    j["n_labeled"] = c.n_labeled;
    j["n_unlabeled"] = c.n_unlabeled;
    j["n_val"] = c.n_val;
    j["n_test"] = c.n_test;
    j["folds"] = c.folds;
    j["fold"] = c.fold;
    j["split_seed"] = c.split_seed;
    j["fully_supervised"] = c.fully_supervised;
    j["levels"] = c.net.levels;
    j["base_channels"] = c.net.base_channels;
    j["max_channels"] = c.net.max_channels;
    j["height"] = c.net.height;
    j["width"] = c.net.width;
    j["leaky_slope"] = c.net.leaky_slope;
    j["norm_eps"] = c.net.norm_eps;
    j["strategy"] = to_string(c.train.strategy);
    j["gamma"] = c.train.gamma;
    j["lr_seg"] = c.train.lr_seg;
    j["lr_recon"] = c.train.lr_recon;
    j["epochs"] = c.train.epochs;
    j["pretrain_epochs"] = c.train.pretrain_epochs;
    j["batch_size"] = c.train.batch_size;
    j["seed"] = c.train.seed;
    j["augment"] = c.train.augment;
    j["rotation_deg"] = c.train.augmentation.max_rotation_deg;
    j["scale_lo"] = c.train.augmentation.scale_lo;
    j["scale_hi"] = c.train.augmentation.scale_hi;
    j["flip_prob"] = c.train.augmentation.flip_prob;
    j["adam_beta1"] = c.train.adam.beta1;
    j["adam_beta2"] = c.train.adam.beta2;
    j["adam_eps"] = c.train.adam.eps;
    j["strategies"] = detail::strategies_to_string(c.strategies);
    j["probe_max_voxels"] = c.probe_max_voxels;
    j["probe_seed"] = c.probe_seed;
    j["probe_heldout"] = c.probe_heldout;
    j["probe_repeats"] = c.probe_repeats;
    j["threads"] = c.threads;
    return j;
}

inline bool operator==(const RunConfig& a, const RunConfig& b) { return to_json(a) == to_json(b); }

inline RunConfig config_from_json(const nlohmann::json& j) {
    if (!j.is_object()) throw ConfigError("config must be a JSON object");
    RunConfig c;
    const auto known = to_json(c);
    for (const auto& [key, value] : j.items()) {
        if (!known.contains(key)) throw ConfigError("unknown config key '" + key + "'", key);
    }
    auto get_string = [&](const char* key, std::string& dst) {
        if (!j.contains(key)) return;
        if (!j[key].is_string()) throw ConfigError(std::string("'") + key + "' must be a string", key);
        dst = j[key].get<std::string>();
    };
    auto get_uint = [&](const char* key, auto& dst) {
        if (!j.contains(key)) return;
        const auto& v = j[key];
        if (!v.is_number_integer() || (v.is_number_integer() && !v.is_number_unsigned() && v.get<long long>() < 0)) {
            throw ConfigError(std::string("'") + key + "' must be a non-negative integer", key);
        }
        dst = v.get<std::remove_reference_t<decltype(dst)>>();
    };
    auto get_real = [&](const char* key, double& dst) {
        if (!j.contains(key)) return;
        if (!j[key].is_number()) throw ConfigError(std::string("'") + key + "' must be a number", key);
        dst = j[key].get<double>();
    };
    auto get_bool = [&](const char* key, bool& dst) {
        if (!j.contains(key)) return;
        if (!j[key].is_boolean()) throw ConfigError(std::string("'") + key + "' must be true or false", key);
        dst = j[key].get<bool>();
    };

    get_string("name", c.name);
    get_string("output_root", c.output_root);
    get_string("dataset", c.dataset);
    get_string("checkpoint", c.checkpoint);
    get_uint("n_samples", c.n_samples);
    get_uint("data_seed", c.data_seed);
    get_uint("n_labeled", c.n_labeled);
    get_uint("n_unlabeled", c.n_unlabeled);
    get_uint("n_val", c.n_val);
    get_uint("n_test", c.n_test);
    get_uint("folds", c.folds);
    get_uint("fold", c.fold);
    get_uint("split_seed", c.split_seed);
    get_bool("fully_supervised", c.fully_supervised);
    get_uint("levels", c.net.levels);
    get_uint("base_channels", c.net.base_channels);
    get_uint("max_channels", c.net.max_channels);
    get_uint("height", c.net.height);
    get_uint("width", c.net.width);
    get_real("leaky_slope", c.net.leaky_slope);
    get_real("norm_eps", c.net.norm_eps);
    std::string strategy = to_string(c.train.strategy);
    get_string("strategy", strategy);
    c.train.strategy = parse_strategy(strategy);
    get_real("gamma", c.train.gamma);
    get_real("lr_seg", c.train.lr_seg);
    get_real("lr_recon", c.train.lr_recon);
    get_uint("epochs", c.train.epochs);
    get_uint("pretrain_epochs", c.train.pretrain_epochs);
    get_uint("batch_size", c.train.batch_size);
    get_uint("seed", c.train.seed);
    get_bool("augment", c.train.augment);
    get_real("rotation_deg", c.train.augmentation.max_rotation_deg);
    get_real("scale_lo", c.train.augmentation.scale_lo);
    get_real("scale_hi", c.train.augmentation.scale_hi);
    get_real("flip_prob", c.train.augmentation.flip_prob);
    get_real("adam_beta1", c.train.adam.beta1);
    get_real("adam_beta2", c.train.adam.beta2);
    get_real("adam_eps", c.train.adam.eps);
    std::string strategies = detail::strategies_to_string(c.strategies);
    get_string("strategies", strategies);
    c.strategies = detail::parse_strategy_list(strategies);
    get_uint("probe_max_voxels", c.probe_max_voxels);
    get_uint("probe_seed", c.probe_seed);
    get_bool("probe_heldout", c.probe_heldout);
    get_uint("probe_repeats", c.probe_repeats);
    get_uint("threads", c.threads);
    c.validate();
    return c;
}

inline void RunConfig::validate() const {
    if (name.empty() || name.find('/') != std::string::npos) {
        throw ConfigError("'name' must be a non-empty single path component", "name");
    }
    if (output_root.empty()) throw ConfigError("'output_root' must not be empty", "output_root");
    if (dataset.empty()) throw ConfigError("'dataset' must not be empty", "dataset");
    net.validate();
    train.validate();
    if (!(train.adam.beta1 >= 0 && train.adam.beta1 < 1)) throw ConfigError("adam_beta1 must be in [0,1)", "adam_beta1");
    if (!(train.adam.beta2 >= 0 && train.adam.beta2 < 1)) throw ConfigError("adam_beta2 must be in [0,1)", "adam_beta2");
    if (!(train.adam.eps > 0)) throw ConfigError("adam_eps must be positive", "adam_eps");
    if (n_labeled == 0) throw ConfigError("n_labeled must be >= 1", "n_labeled");
    const std::size_t need = n_labeled + n_unlabeled + n_val + n_test;
    if (need > n_samples) {
        throw ConfigError("split sizes sum to " + std::to_string(need) + " but n_samples is " +
                              std::to_string(n_samples),
                          "n_samples");
    }
    if (folds == 0) throw ConfigError("folds must be >= 1", "folds");
    if (fold >= folds) throw ConfigError("fold must be < folds", "fold");
    if (probe_repeats == 0) throw ConfigError("probe_repeats must be >= 1", "probe_repeats");
    if (threads == 0) throw ConfigError("threads must be >= 1", "threads");
}

/// Reads a config file; an empty (or whitespace-only) file yields all defaults.
inline RunConfig parse_config(const std::string& path) {
    std::ifstream in(path, std::ios::binary);
    if (!in) throw ConfigError("cannot read config file '" + path + "'", "config");
    std::stringstream ss;
    ss << in.rdbuf();
    const std::string text = ss.str();
    if (text.find_first_not_of(" \t\r\n") == std::string::npos) return RunConfig{};
    nlohmann::json j;
    try {
        j = nlohmann::json::parse(text);
    } catch (const nlohmann::json::parse_error& e) {
        throw ConfigError("config '" + path + "' is not valid JSON: " + e.what(), "config");
    }
    return config_from_json(j);
}

inline std::string echo_config(const RunConfig& c) { return to_json(c).dump(2) + "\n"; }

/// MASSL_OUTPUT_ROOT and MASSL_THREADS override the file's values.
inline void apply_env_overrides(RunConfig& c) {
    if (const char* root = std::getenv("MASSL_OUTPUT_ROOT"); root && *root) c.output_root = root;
    if (const char* t = std::getenv("MASSL_THREADS"); t && *t) {
        char* end = nullptr;
        const unsigned long v = std::strtoul(t, &end, 10);
        if (*end != '\0' || v == 0) throw ConfigError("MASSL_THREADS must be a positive integer", "threads");
        c.threads = v;
    }
}

}  // namespace massl
