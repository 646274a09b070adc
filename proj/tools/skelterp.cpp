/*
 * skelterp - 3D skeleton recovery from 2D keypoint heatmaps.
 *
 * File: tools/skelterp.cpp
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

// Command-line driver: skelterp <subcommand> [options]. Run with --help for the list.

#include "skelterp/skelterp.hpp"

#include "CLI11.hpp"

#include <functional>
#include <iostream>
#include <map>
#include <optional>
#include <string>
#include <vector>

namespace {

enum ExitCode
{
    kOk = 0,
    kFailure = 1,
    kBadConfig = 2,
    kMissingInput = 3,
    kDiverged = 4,
};

struct Options
{
    std::string config;
    std::optional<std::uint64_t> seed;
    std::optional<std::string> out;
    bool single_thread = false;
    std::optional<std::size_t> count;
    std::vector<double> noise_levels;
    std::vector<std::string> overrides;
};

skelterp::ExperimentConfig resolve(const Options& o)
{
    auto c = o.config.empty() ? skelterp::ExperimentConfig{} : skelterp::load_config(o.config);
    for (const auto& s : o.overrides) {
        skelterp::apply_override(c, s);
    }
    if (o.seed) {
        c.seed = *o.seed;
    }
    if (o.out) {
        c.out = *o.out;
    }
    if (o.single_thread) {
        c.single_thread = true;
    }
    if (o.count) {
        c.train_count = c.test_count = c.finetune_count = *o.count;
    }
    if (!o.noise_levels.empty()) {
        c.sweep_levels = o.noise_levels;
    }
    skelterp::validate_config(c);
    return c;
}

} // namespace

int main(int argc, char** argv)
{
    using namespace skelterp;
    CLI::App app{"skelterp: 3D skeleton recovery from keypoint heatmaps"};
    app.require_subcommand(1);
    app.set_version_flag("--version", kVersion);

    Options opts;
    const std::map<std::string, std::pair<std::string, std::function<void(const RunContext&)>>> commands{
        {"gen", {"Generate training, test and fine-tuning datasets", [](const RunContext& c) { cmd_gen(c); }}},
        {"train", {"Stage II: train the interpreter on synthetic 3D supervision", [](const RunContext& c) { cmd_train(c); }}},
        {"finetune", {"Stage III: fine-tune through the projection layer on 2D-only data",
                      [](const RunContext& c) { cmd_finetune(c); }}},
        {"train-refiner", {"Train the heatmap refiner", [](const RunContext& c) { cmd_train_refiner(c); }}},
        {"eval", {"Evaluate the interpreter on the clean test set", [](const RunContext& c) { cmd_eval(c); }}},
        {"baseline", {"Evaluate the argmax + optimisation baseline on the clean test set",
                      [](const RunContext& c) { cmd_baseline(c); }}},
        {"sweep", {"Noise sweep comparing interpreter and baseline", [](const RunContext& c) { cmd_sweep(c); }}},
        {"retrieve", {"Nearest neighbours by structure and by viewpoint", [](const RunContext& c) { cmd_retrieve(c); }}},
        {"plot", {"Regenerate sweep SVGs from sweep.csv", [](const RunContext& c) { cmd_plot(c); }}},
    };
    for (const auto& [name, entry] : commands) {
        auto* sub = app.add_subcommand(name, entry.first);
        sub->add_option("--config", opts.config, "TOML experiment config")->check(CLI::ExistingFile);
        sub->add_option("--seed", opts.seed, "Master seed");
        sub->add_option("--out", opts.out, "Output directory");
        sub->add_flag("--single-thread", opts.single_thread, "Fully serial execution");
        sub->add_option("--count", opts.count, "Size of every generated dataset")->check(CLI::PositiveNumber);
        sub->add_option("--noise-levels", opts.noise_levels, "Sweep noise levels")->delimiter(',');
        sub->add_option("--set", opts.overrides, "Config override key=value (repeatable)");
    }

    try {
        app.parse(argc, argv);
    } catch (const CLI::ParseError& e) {
        const int rc = app.exit(e);
        return rc == 0 ? kOk : kBadConfig;
    }

    const CLI::App* chosen = app.get_subcommands().front();
    try {
        RunContext ctx{resolve(opts), chosen->get_name()};
        commands.at(chosen->get_name()).second(ctx);
        return kOk;
    } catch (const ConfigError& e) {
        std::cerr << "error: " << e.what() << '\n';
        return kBadConfig;
    } catch (const IoError& e) {
        std::cerr << "error: " << e.what() << '\n';
        return kMissingInput;
    } catch (const TrainingError& e) {
        std::cerr << "error: " << e.what() << '\n';
        return kDiverged;
    } catch (const std::exception& e) {
        std::cerr << "error: " << e.what() << '\n';
        return kFailure;
    }
}
