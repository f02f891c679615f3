#pragma once

// Pipeline configuration: INI-style sections of key = value pairs.

#include <boost/property_tree/ini_parser.hpp>
#include <boost/property_tree/ptree.hpp>

#include <charconv>
#include <cstdint>
#include <cstdlib>
#include <filesystem>
#include <optional>
#include <sstream>
#include <stdexcept>
#include <string>
#include <utility>
#include <vector>

#include "greybox/detection.hpp"
#include "greybox/timeseries.hpp"
#include "greybox/training.hpp"

namespace greybox {

class ConfigError : public std::runtime_error {
public:
    using std::runtime_error::runtime_error;
};

struct DataConfig {
    std::string source = "benchplant";  // or "csv"

    // benchplant
    std::size_t train_episodes = 10;
    std::size_t validation_episodes = 4;
    std::size_t holdout_episodes = 4;
    std::size_t train_samples = 600;
    std::size_t eval_samples = 1200;
    double onset = 10.0;  // seconds
    std::vector<double> magnitudes = fault_magnitude_grid();
    std::vector<std::string> faults;  // empty: every plant fault
    std::size_t scenario_repeats = 1;
    // training excitation; evaluation episodes keep the plant's nominal ranges
    std::optional<std::pair<double, double>> train_u1_range;
    std::optional<std::pair<double, double>> train_u2_range;
    std::optional<std::pair<double, double>> train_segment;  // seconds

    // csv
    std::vector<std::string> train;
    std::vector<std::string> validation;
    std::vector<std::string> holdout;
    std::string scenarios;  // index: name,fault,magnitude,onset_sample,file

    std::size_t downsample = 1;
    DownsampleMode downsample_mode = DownsampleMode::stride;
    NormalizationMode normalization = NormalizationMode::minmax;
};

struct PipelineConfig {
    std::string model_path;
    std::optional<std::vector<std::string>> sensors;  // absent: every sensor equation
    std::vector<std::pair<std::size_t, std::string>> select;  // explicit (mso id, residual) list
    DataConfig data;
    TrainConfig train;
    RnnHyperparameters rnn;
    std::size_t ensemble = 1;
    std::size_t debias_window = 100;
    CusumTuningOptions cusum;
    std::string out_dir = "out";
    std::uint64_t seed = 1;
    std::size_t workers = 1;
};

namespace detail {

inline std::vector<std::string> split_list(const std::string& s) {
    std::vector<std::string> out;
    std::stringstream ss(s);
    std::string item;
    while (std::getline(ss, item, ',')) {
        auto t = std::string(trim(item));
        if (!t.empty()) out.push_back(t);
    }
    return out;
}

inline double to_double(const std::string& key, const std::string& v) {
    try {
        return parse_double(std::string(trim(v)));
    } catch (const std::exception&) {
        throw ConfigError("'" + key + "' expects a number, got '" + v + "'");
    }
}

inline std::uint64_t to_uint(const std::string& key, const std::string& v) {
    auto t = std::string(trim(v));
    std::uint64_t out = 0;
    auto res = std::from_chars(t.data(), t.data() + t.size(), out);
    if (t.empty() || res.ec != std::errc() || res.ptr != t.data() + t.size()) {
        throw ConfigError("'" + key + "' expects a non-negative integer, got '" + v + "'");
    }
    return out;
}

inline std::pair<double, double> to_range(const std::string& key, const std::string& v) {
    auto items = split_list(v);
    if (items.size() != 2) throw ConfigError("'" + key + "' expects two numbers 'lo, hi'");
    auto lo = to_double(key, items[0]), hi = to_double(key, items[1]);
    if (!(lo <= hi)) throw ConfigError("'" + key + "' needs lo <= hi");
    return {lo, hi};
}

inline bool to_bool(const std::string& key, const std::string& v) {
    auto t = std::string(trim(v));
    if (t == "true" || t == "yes" || t == "1") return true;
    if (t == "false" || t == "no" || t == "0") return false;
    throw ConfigError("'" + key + "' expects true or false, got '" + v + "'");
}

}  // namespace detail

/// Parses configuration text. Relative paths are resolved against `base_dir`.
/// Unknown sections or keys are errors.
inline PipelineConfig parse_config(const std::string& text, const std::filesystem::path& base_dir = {}) {
    namespace pt = boost::property_tree;
    pt::ptree tree;
    std::istringstream in(text);
    try {
        pt::read_ini(in, tree);
    } catch (const pt::ini_parser_error& e) {
        throw ConfigError(std::string("config: ") + e.message() + " at line " + std::to_string(e.line()));
    }
    auto resolve = [&](const std::string& p) {
        std::filesystem::path path(p);
        return path.is_absolute() || base_dir.empty() ? path.string() : (base_dir / path).lexically_normal().string();
    };

    PipelineConfig cfg;
    for (const auto& [section, body] : tree) {
        if (!body.data().empty()) throw ConfigError("config: key '" + section + "' outside of a section");
        for (const auto& [key, node] : body) {
            const std::string v = node.data();
            const std::string name = section + "." + key;
            auto unknown = [&]() { throw ConfigError("config: unknown key '" + name + "'"); };
            if (section == "model") {
                if (key == "path") cfg.model_path = resolve(v);
                else unknown();
            } else if (section == "candidates") {
                if (key == "sensors") {
                    cfg.sensors = detail::split_list(v);
                } else if (key == "select") {
                    for (const auto& item : detail::split_list(v)) {
                        auto colon = item.find(':');
                        if (colon == std::string::npos) throw ConfigError("config: select entries look like <mso>:<residual>");
                        cfg.select.emplace_back(detail::to_uint(name, item.substr(0, colon)), item.substr(colon + 1));
                    }
                } else {
                    unknown();
                }
            } else if (section == "data") {
                auto& d = cfg.data;
                if (key == "source") {
                    if (v != "benchplant" && v != "csv") throw ConfigError("config: data.source is benchplant or csv");
                    d.source = v;
                } else if (key == "train_episodes") d.train_episodes = detail::to_uint(name, v);
                else if (key == "validation_episodes") d.validation_episodes = detail::to_uint(name, v);
                else if (key == "holdout_episodes") d.holdout_episodes = detail::to_uint(name, v);
                else if (key == "train_samples") d.train_samples = detail::to_uint(name, v);
                else if (key == "eval_samples") d.eval_samples = detail::to_uint(name, v);
                else if (key == "onset") d.onset = detail::to_double(name, v);
                else if (key == "scenario_repeats") d.scenario_repeats = detail::to_uint(name, v);
                else if (key == "faults") d.faults = detail::split_list(v);
                else if (key == "train_u1_range") d.train_u1_range = detail::to_range(name, v);
                else if (key == "train_u2_range") d.train_u2_range = detail::to_range(name, v);
                else if (key == "train_segment") d.train_segment = detail::to_range(name, v);
                else if (key == "magnitudes") {
                    d.magnitudes.clear();
                    for (const auto& m : detail::split_list(v)) d.magnitudes.push_back(detail::to_double(name, m));
                } else if (key == "train" || key == "validation" || key == "holdout") {
                    std::vector<std::string> paths;
                    for (const auto& p : detail::split_list(v)) paths.push_back(resolve(p));
                    (key == "train" ? d.train : key == "validation" ? d.validation : d.holdout) = paths;
                } else if (key == "scenarios") d.scenarios = resolve(v);
                else if (key == "downsample") d.downsample = detail::to_uint(name, v);
                else if (key == "downsample_mode") {
                    if (v != "stride" && v != "mean") throw ConfigError("config: downsample_mode is stride or mean");
                    d.downsample_mode = v == "stride" ? DownsampleMode::stride : DownsampleMode::mean;
                } else if (key == "normalization") {
                    if (v != "minmax" && v != "zscore") throw ConfigError("config: normalization is minmax or zscore");
                    d.normalization = v == "minmax" ? NormalizationMode::minmax : NormalizationMode::zscore;
                } else unknown();
            } else if (section == "training") {
                auto& t = cfg.train;
                if (key == "epochs") t.epochs = detail::to_uint(name, v);
                else if (key == "learning_rate") t.learning_rate = detail::to_double(name, v);
                else if (key == "decay") t.decay = detail::to_double(name, v);
                else if (key == "decay_every") t.decay_every = detail::to_uint(name, v);
                else if (key == "batch_length") t.batch_length = detail::to_uint(name, v);
                else if (key == "batch_count") t.batch_count = detail::to_uint(name, v);
                else if (key == "truncation") t.truncation = detail::to_uint(name, v);
                else if (key == "shuffle") t.shuffle = detail::to_bool(name, v);
                else if (key == "hidden") {
                    t.hidden.clear();
                    for (const auto& h : detail::split_list(v)) t.hidden.push_back(detail::to_uint(name, h));
                } else if (key == "sampling_time") cfg.rnn.sampling_time = detail::to_double(name, v);
                else if (key == "output_scale") cfg.rnn.g_output_scale = detail::to_double(name, v);
                else if (key == "state_limit") cfg.rnn.state_limit = detail::to_double(name, v);
                else if (key == "ensemble") cfg.ensemble = detail::to_uint(name, v);
                else unknown();
            } else if (section == "detection") {
                if (key == "debias_window") cfg.debias_window = detail::to_uint(name, v);
                else if (key == "margin") cfg.cusum.margin = detail::to_double(name, v);
                else if (key == "safety") cfg.cusum.safety = detail::to_double(name, v);
                else if (key == "min_drift") cfg.cusum.min_drift = detail::to_double(name, v);
                else if (key == "min_threshold") cfg.cusum.min_threshold = detail::to_double(name, v);
                else if (key == "min_threshold_std") cfg.cusum.min_threshold_std = detail::to_double(name, v);
                else unknown();
            } else if (section == "run") {
                if (key == "out") cfg.out_dir = resolve(v);
                else if (key == "seed") cfg.seed = detail::to_uint(name, v);
                else if (key == "workers") cfg.workers = detail::to_uint(name, v);
                else unknown();
            } else {
                throw ConfigError("config: unknown section '" + section + "'");
            }
        }
    }
    cfg.rnn.hidden = cfg.train.hidden;
    cfg.cusum.window = cfg.debias_window;
    cfg.train.validate();
    if (cfg.model_path.empty()) throw ConfigError("config: model.path is required");
    if (cfg.ensemble == 0) throw ConfigError("config: training.ensemble must be positive");
    if (cfg.workers == 0) throw ConfigError("config: run.workers must be positive");
    if (cfg.data.downsample == 0) throw ConfigError("config: data.downsample must be positive");
    if (cfg.data.source == "csv" && cfg.data.train.empty()) throw ConfigError("config: data.train is required for csv data");
    return cfg;
}

/// GREYBOX_OUT_DIR and GREYBOX_WORKERS override the file.
inline void apply_environment(PipelineConfig& cfg) {
    if (const char* out = std::getenv("GREYBOX_OUT_DIR"); out && *out) cfg.out_dir = out;
    if (const char* w = std::getenv("GREYBOX_WORKERS"); w && *w) {
        cfg.workers = detail::to_uint("GREYBOX_WORKERS", w);
        if (cfg.workers == 0) throw ConfigError("GREYBOX_WORKERS must be positive");
    }
}

inline PipelineConfig load_config(const std::string& path) {
    auto cfg = parse_config(read_text_file(path), std::filesystem::path(path).parent_path());
    apply_environment(cfg);
    return cfg;
}

}  // namespace greybox
