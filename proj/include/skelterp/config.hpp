/*
 * skelterp - 3D skeleton recovery from 2D keypoint heatmaps.
 *
 * File: include/skelterp/config.hpp
 *
 * Copyright 2026 The skelterp Authors
 *
 * Licensed under the Apache License, Version 2.0 (the "License");
 * you may not use this file except in compliance with the License.
 * You may obtain a copy of the License at
 *
 * http://www.apache.org/licenses/LICENSE-2.0
 *
 * Unless required by applicable law or agreed to in writing, software
 * distributed under the License is distributed on an "AS IS" BASIS,
 * WITHOUT WARRANTIES OR CONDITIONS OF ANY KIND, either express or implied.
 * See the License for the specific language governing permissions and
 * limitations under the License.
 */
#ifndef SKELTERP_CONFIG_HPP
#define SKELTERP_CONFIG_HPP

#include "skelterp/baseline.hpp"
#include "skelterp/interpreter.hpp"
#include "skelterp/metrics.hpp"
#include "skelterp/synth.hpp"

#include "CLI11.hpp"

#include <array>
#include <filesystem>
#include <fstream>
#include <functional>
#include <sstream>
#include <string>
#include <thread>
#include <vector>

namespace skelterp {

/**
 * @brief Every setting of one experiment.
 *
 * Files use a TOML subset: `key = value` pairs, `[section]` headers, quoted
 * strings and `[a, b]` arrays. A key `k` inside `[s]` is addressed as `s.k`.
 */
struct ExperimentConfig
{
    std::string spec = "data/specs/chair.json";
    std::uint64_t seed = 1;
    std::string out = "out";
    bool single_thread = false;

    std::size_t train_count = 30000;
    std::size_t test_count = 1000;
    std::size_t finetune_count = 3000;
    double perturbation = 0.01;
    double finetune_perturbation = 0.03; ///< The shifted distribution used for stage III.
    Interval depth{2.0, 6.0};
    Interval focal{1.0, 3.0};
    RenderSettings render;

    std::vector<int> stage2_hidden{512, 128, 64};
    TrainConfig stage2;
    TrainConfig stage3;
    bool use_refiner = false; ///< Feed the interpreter refined instead of raw heatmaps.
    RefinerShape refiner_shape;
    TrainConfig refiner;
    std::string eval_model = "stage2";

    FitOptions baseline;
    std::vector<double> sweep_levels{0.0, 0.02, 0.05, 0.10, 0.20};
    std::vector<double> pck_thresholds{0.02, 0.05, 0.1, 0.15, 0.2};
    std::vector<double> rmse_thresholds = default_rmse_thresholds();
    std::vector<double> azimuth_thresholds = default_azimuth_thresholds();
    double ae_bound = 5.0;
    int retrieve_k = 5;
    int retrieve_queries = 10;

    ExperimentConfig()
    {
        stage2.epochs = 20;
        stage2.batch_size = 64;
        stage2.noise_levels = {0.0, 0.05, 0.1, 0.2};
        stage3.epochs = 5;
        stage3.batch_size = 64;
        stage3.adam.learning_rate = 1e-4;
        stage3.noise_levels = {0.0, 0.05, 0.1, 0.2};
        refiner.epochs = 10;
        refiner.batch_size = 32;
        refiner.noise_levels = {0.0, 0.05, 0.1, 0.2};
    }

    unsigned threads() const
    {
        return single_thread ? 1u : std::max(1u, std::thread::hardware_concurrency());
    }

    SamplingRanges ranges(const SkeletonSpec& s, double perturbation_std) const
    {
        auto r = default_ranges(s);
        r.t[2] = depth;
        r.f = focal;
        r.perturbation = perturbation_std;
        return r;
    }
};

namespace detail {

struct ConfigField
{
    std::string key;
    std::function<void(const std::vector<std::string>&)> set;
    std::function<std::string()> get;
    bool identity = true; ///< Part of the config hash.
};

inline const std::string& single(const std::string& key, const std::vector<std::string>& in)
{
    if (in.size() != 1) {
        throw ConfigError("config: '" + key + "' expects a single value");
    }
    return in.front();
}

template <typename T>
T parse_number(const std::string& key, const std::string& s)
{
    if (std::is_unsigned_v<T> && s.find('-') != std::string::npos) {
        throw ConfigError("config: '" + key + "' must not be negative");
    }
    T v{};
    std::istringstream is(s);
    is >> v;
    if (!is || !(is >> std::ws).eof()) {
        throw ConfigError("config: '" + key + "' has malformed value '" + s + "'");
    }
    return v;
}

inline bool parse_bool(const std::string& key, const std::string& s)
{
    if (s == "true" || s == "1") {
        return true;
    }
    if (s == "false" || s == "0") {
        return false;
    }
    throw ConfigError("config: '" + key + "' expects true or false, got '" + s + "'");
}

inline std::string quote(const std::string& s) { return "\"" + s + "\""; }

template <typename T>
std::string list_text(const std::vector<T>& v)
{
    std::string s = "[";
    for (std::size_t i = 0; i < v.size(); ++i) {
        if (i) {
            s += ", ";
        }
        if constexpr (std::is_floating_point_v<T>) {
            s += format_exact(v[i]);
        } else {
            s += std::to_string(v[i]);
        }
    }
    return s + "]";
}

inline ConfigField text_field(const std::string& key, std::string& ref, bool identity = true)
{
    return {key, [key, &ref](const auto& in) { ref = single(key, in); }, [&ref] { return quote(ref); }, identity};
}

inline ConfigField bool_field(const std::string& key, bool& ref, bool identity = true)
{
    return {key, [key, &ref](const auto& in) { ref = parse_bool(key, single(key, in)); },
            [&ref] { return std::string(ref ? "true" : "false"); }, identity};
}

template <typename T>
ConfigField number_field(const std::string& key, T& ref)
{
    return {key, [key, &ref](const auto& in) { ref = parse_number<T>(key, single(key, in)); },
            [&ref] {
                if constexpr (std::is_floating_point_v<T>) {
                    return format_exact(ref);
                } else {
                    return std::to_string(ref);
                }
            }};
}

template <typename T>
ConfigField list_field(const std::string& key, std::vector<T>& ref)
{
    return {key,
            [key, &ref](const auto& in) {
                ref.clear();
                for (const auto& s : in) {
                    ref.push_back(parse_number<T>(key, s));
                }
            },
            [&ref] { return list_text(ref); }};
}

inline ConfigField interval_field(const std::string& key, Interval& ref)
{
    return {key,
            [key, &ref](const auto& in) {
                if (in.size() != 2) {
                    throw ConfigError("config: '" + key + "' expects [lo, hi]");
                }
                ref = Interval{parse_number<double>(key, in[0]), parse_number<double>(key, in[1])};
            },
            [&ref] { return list_text(std::vector<double>{ref.lo, ref.hi}); }};
}

inline ConfigField weights_field(const std::string& key, std::array<double, 4>& ref)
{
    return {key,
            [key, &ref](const auto& in) {
                if (in.size() != 4) {
                    throw ConfigError("config: '" + key + "' expects [alpha, rotation, translation, focal]");
                }
                for (std::size_t i = 0; i < 4; ++i) {
                    ref[i] = parse_number<double>(key, in[i]);
                }
            },
            [&ref] { return list_text(std::vector<double>(ref.begin(), ref.end())); }};
}

inline void train_fields(std::vector<ConfigField>& f, const std::string& section, TrainConfig& t)
{
    f.push_back(number_field(section + ".epochs", t.epochs));
    f.push_back(number_field(section + ".batch_size", t.batch_size));
    f.push_back(number_field(section + ".learning_rate", t.adam.learning_rate));
    f.push_back(number_field(section + ".lr_decay", t.lr_decay));
    f.push_back(number_field(section + ".clip_norm", t.adam.clip_norm));
    f.push_back(number_field(section + ".validation_fraction", t.validation_fraction));
    f.push_back(list_field(section + ".noise_levels", t.noise_levels));
}

} // namespace detail

/// Field table bound to `c`; drives parsing, overrides, dumping and hashing.
inline std::vector<detail::ConfigField> config_fields(ExperimentConfig& c)
{
    using namespace detail;
    std::vector<ConfigField> f;
    f.push_back(text_field("spec", c.spec));
    f.push_back(number_field("seed", c.seed));
    f.push_back(text_field("out", c.out, false));
    f.push_back(bool_field("single_thread", c.single_thread, false));

    f.push_back(number_field("data.train", c.train_count));
    f.push_back(number_field("data.test", c.test_count));
    f.push_back(number_field("data.finetune", c.finetune_count));
    f.push_back(number_field("data.perturbation", c.perturbation));
    f.push_back(number_field("data.finetune_perturbation", c.finetune_perturbation));
    f.push_back(interval_field("data.depth", c.depth));
    f.push_back(interval_field("data.focal", c.focal));
    f.push_back(number_field("data.grid_width", c.render.geometry.width));
    f.push_back(number_field("data.grid_height", c.render.geometry.height));
    f.push_back(number_field("data.cell_size", c.render.geometry.cell_size));
    f.push_back(number_field("data.sigma", c.render.sigma));

    f.push_back(list_field("stage2.hidden", c.stage2_hidden));
    f.push_back(weights_field("stage2.group_weights", c.stage2.group_weights));
    train_fields(f, "stage2", c.stage2);
    train_fields(f, "stage3", c.stage3);

    f.push_back(bool_field("refiner.enabled", c.use_refiner));
    f.push_back(list_field("refiner.hidden", c.refiner_shape.hidden));
    f.push_back(number_field("refiner.projection_dim", c.refiner_shape.projection_dim));
    f.push_back(number_field("refiner.projection_threshold", c.refiner_shape.projection_threshold));
    train_fields(f, "refiner", c.refiner);

    f.push_back(text_field("eval.model", c.eval_model));
    f.push_back(number_field("baseline.max_iterations", c.baseline.max_iterations));
    f.push_back({"baseline.method",
                 [&c](const auto& in) {
                     const auto& s = single("baseline.method", in);
                     if (s == "lm") {
                         c.baseline.method = DescentMethod::LevenbergMarquardt;
                     } else if (s == "steepest") {
                         c.baseline.method = DescentMethod::Steepest;
                     } else {
                         throw ConfigError("config: baseline.method must be \"lm\" or \"steepest\"");
                     }
                 },
                 [&c] { return quote(c.baseline.method == DescentMethod::Steepest ? "steepest" : "lm"); }});

    f.push_back(list_field("sweep.noise_levels", c.sweep_levels));
    f.push_back(list_field("metrics.pck_thresholds", c.pck_thresholds));
    f.push_back(list_field("metrics.rmse_thresholds", c.rmse_thresholds));
    f.push_back(list_field("metrics.azimuth_thresholds", c.azimuth_thresholds));
    f.push_back(number_field("metrics.ae_bound", c.ae_bound));
    f.push_back(number_field("retrieve.k", c.retrieve_k));
    f.push_back(number_field("retrieve.queries", c.retrieve_queries));
    return f;
}

/// Checks ranges and cross-field consistency.
inline void validate_config(const ExperimentConfig& c)
{
    if (c.train_count < 1 || c.test_count < 1 || c.finetune_count < 1) {
        throw ConfigError("config: dataset sizes must be at least 1");
    }
    if (!c.render.geometry.valid() || !(c.render.sigma > 0.0)) {
        throw ConfigError("config: invalid heatmap grid or sigma");
    }
    if (c.stage2_hidden.empty()) {
        throw ConfigError("config: stage2.hidden must list at least one width");
    }
    for (int w : c.stage2_hidden) {
        if (w < 1) {
            throw ConfigError("config: stage2.hidden widths must be positive");
        }
    }
    c.stage2.validate();
    c.stage3.validate();
    c.refiner.validate();
    if (c.eval_model != "stage2" && c.eval_model != "stage3") {
        throw ConfigError("config: eval.model must be \"stage2\" or \"stage3\"");
    }
    if (c.sweep_levels.empty()) {
        throw ConfigError("config: sweep.noise_levels must not be empty");
    }
    for (double p : c.sweep_levels) {
        if (!(p >= 0.0 && p <= 1.0)) {
            throw ConfigError("config: sweep noise levels must lie in [0, 1]");
        }
    }
    for (const auto* t : {&c.pck_thresholds, &c.rmse_thresholds, &c.azimuth_thresholds}) {
        if (t->empty() || !std::is_sorted(t->begin(), t->end()) || std::adjacent_find(t->begin(), t->end()) != t->end()) {
            throw ConfigError("config: metric thresholds must be non-empty and strictly ascending");
        }
    }
    if (!(c.ae_bound > 0.0) || c.retrieve_k < 1 || c.retrieve_queries < 1 || c.baseline.max_iterations < 0) {
        throw ConfigError("config: ae_bound, retrieve.k, retrieve.queries must be positive");
    }
    if (!(c.perturbation >= 0.0) || !(c.finetune_perturbation >= 0.0) || !c.depth.valid() || !c.focal.valid()) {
        throw ConfigError("config: invalid sampling ranges");
    }
}

/// Applies parsed TOML items; unknown keys are errors.
inline void apply_config_items(ExperimentConfig& c, const std::vector<CLI::ConfigItem>& items)
{
    auto fields = config_fields(c);
    for (const auto& item : items) {
        if (item.name == "++" || item.name == "--") {
            continue;
        }
        const std::string key = item.fullname();
        const auto it = std::find_if(fields.begin(), fields.end(), [&](const auto& f) { return f.key == key; });
        if (it == fields.end()) {
            throw ConfigError("config: unknown key '" + key + "'");
        }
        it->set(item.inputs);
    }
}

/// Parses TOML text on top of `base`.
inline ExperimentConfig parse_config(const std::string& text, ExperimentConfig base = {})
{
    std::istringstream in(text);
    std::vector<CLI::ConfigItem> items;
    try {
        items = CLI::ConfigTOML().from_config(in);
    } catch (const CLI::Error& e) {
        throw ConfigError(std::string("config: ") + e.what());
    }
    apply_config_items(base, items);
    return base;
}

/// Applies one `key=value` override (value in TOML syntax).
inline void apply_override(ExperimentConfig& c, const std::string& assignment)
{
    const auto eq = assignment.find('=');
    if (eq == std::string::npos) {
        throw ConfigError("config: override '" + assignment + "' is not key=value");
    }
    c = parse_config(assignment.substr(0, eq) + " = " + assignment.substr(eq + 1), c);
}

/**
 * Loads a config file. A relative spec path is resolved against the config
 * file's directory when it exists there.
 */
inline ExperimentConfig load_config(const std::string& path)
{
    std::ifstream in(path);
    if (!in) {
        throw ConfigError("cannot open config '" + path + "'");
    }
    std::stringstream buf;
    buf << in.rdbuf();
    auto c = parse_config(buf.str());
    const std::filesystem::path spec(c.spec);
    if (spec.is_relative()) {
        const auto local = std::filesystem::path(path).parent_path() / spec;
        if (std::filesystem::exists(local)) {
            c.spec = local.lexically_normal().string();
        }
    }
    return c;
}

/// TOML text for `c`; parse_config(config_to_toml(c)) reproduces c.
inline std::string config_to_toml(const ExperimentConfig& c, bool identity_only = false)
{
    auto copy = c;
    const auto fields = config_fields(copy);
    std::string top;
    std::map<std::string, std::string> sections;
    std::vector<std::string> order;
    for (const auto& f : fields) {
        if (identity_only && !f.identity) {
            continue;
        }
        const auto dot = f.key.find('.');
        if (dot == std::string::npos) {
            top += f.key + " = " + f.get() + "\n";
            continue;
        }
        const std::string section = f.key.substr(0, dot);
        if (!sections.count(section)) {
            order.push_back(section);
        }
        sections[section] += f.key.substr(dot + 1) + " = " + f.get() + "\n";
    }
    std::string out = top;
    for (const auto& s : order) {
        out += "\n[" + s + "]\n" + sections[s];
    }
    return out;
}

/// Hash of every result-affecting setting (output directory and threading excluded).
inline std::string config_hash(const ExperimentConfig& c) { return to_hex(fnv1a(config_to_toml(c, true))); }

} // namespace skelterp

#endif // SKELTERP_CONFIG_HPP
