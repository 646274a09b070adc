/*
 * skelterp - 3D skeleton recovery from 2D keypoint heatmaps.
 *
 * File: tests/acceptance/acceptance.cpp
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

// Acceptance runner: one PASS/FAIL line per criterion, exit status 0 only if all pass.
//
//   acceptance [--work-dir DIR] [--profile smoke|full|both] [--only N]...

#include "skelterp/skelterp.hpp"

#include "../metric_oracles.hpp"
#include "../test_util.hpp"

#include "CLI11.hpp"

#include <chrono>
#include <cstdio>
#include <cstdlib>
#include <iostream>
#include <map>
#include <set>
#include <string>
#include <vector>

using namespace skelterp;
using namespace skelterp::testing;

namespace {

using Clock = std::chrono::steady_clock;

double seconds_since(Clock::time_point t0) { return std::chrono::duration<double>(Clock::now() - t0).count(); }

struct Outcome
{
    bool pass = false;
    std::string detail;
};

std::string num(double v, int digits = 3)
{
    char buf[64];
    std::snprintf(buf, sizeof(buf), "%.*g", digits, v);
    return buf;
}

std::filesystem::path g_work;
std::string g_profile = "both";

std::string config_path(const std::string& name) { return std::string(SKELTERP_CONFIG_DIR) + "/" + name; }

/// Runs one CLI verb; returns its exit status.
int cli(const std::string& verb, const std::string& config, const std::filesystem::path& out)
{
    const std::string cmd = std::string(SKELTERP_CLI) + " " + verb + " --config " + config + " --single-thread --out "
                            + out.string() + " >>" + (out / "log.txt").string() + " 2>&1";
    const int status = std::system(cmd.c_str());
    return WIFEXITED(status) ? WEXITSTATUS(status) : -1;
}

/// Runs verbs in order, stopping at the first failure; returns elapsed seconds or a negative value on failure.
double pipeline(const std::vector<std::string>& verbs, const std::string& config, const std::filesystem::path& out,
                std::string* failed)
{
    std::filesystem::create_directories(out);
    const auto t0 = Clock::now();
    for (const auto& v : verbs) {
        if (const int rc = cli(v, config, out); rc != 0) {
            *failed = v + " exited with " + std::to_string(rc) + " (see " + (out / "log.txt").string() + ")";
            return -1.0;
        }
    }
    return seconds_since(t0);
}

/// Average recall per (method, metric, level) from a sweep CSV.
std::map<std::tuple<std::string, std::string, double>, double> sweep_averages(const std::filesystem::path& csv)
{
    std::map<std::tuple<std::string, std::string, double>, std::pair<double, int>> acc;
    for (const auto& r : parse_sweep_csv(read_text_file(csv))) {
        auto& a = acc[{r.method, r.metric, r.noise_level}];
        a.first += r.value;
        a.second += 1;
    }
    std::map<std::tuple<std::string, std::string, double>, double> out;
    for (const auto& [k, v] : acc) {
        out[k] = v.first / v.second;
    }
    return out;
}

/// Interpreter strictly ahead of the baseline on both metrics at every level >= min_level.
Outcome ordering(const std::filesystem::path& csv, double min_level)
{
    const auto avg = sweep_averages(csv);
    Outcome o{true, ""};
    std::set<double> levels;
    for (const auto& [k, v] : avg) {
        levels.insert(std::get<2>(k));
    }
    for (double level : levels) {
        if (level < min_level - 1e-12) {
            continue;
        }
        for (const char* metric : {"structure", "azimuth"}) {
            const double ip = avg.at({"interpreter", metric, level});
            const double bl = avg.at({"baseline", metric, level});
            o.pass = o.pass && ip > bl;
            o.detail += std::string(o.detail.empty() ? "" : ", ") + metric + "@" + num(level, 2) + " " + num(ip) + " vs " + num(bl);
        }
    }
    return o;
}

// ---------------------------------------------------------------------------

Outcome criterion1()
{
    const auto t0 = Clock::now();
    Rng rng(101);
    const auto spec = chair();
    double worst = 0.0;
    for (int trial = 0; trial < 100; ++trial) {
        const auto& s = trial % 2 ? spec : random_spec(rng, 4 + static_cast<int>(rng.index(8)), 1 + static_cast<int>(rng.index(4)));
        const auto p = random_params(rng, s);
        const auto pose = random_pose(rng);
        worst = std::max(worst, max_relative_error(projection_jacobian(s, p, pose).matrix, numeric_jacobian(s, p, pose, 1e-5).matrix));
    }
    const double t = seconds_since(t0);
    return {worst < 1e-6 && t < 10.0, "max relative error " + num(worst) + " over 100 instances in " + num(t) + " s"};
}

Outcome criterion2()
{
    Rng rng(102);
    const auto spec = chair();
    double worst = 0.0;
    for (int trial = 0; trial < 100; ++trial) {
        const auto y = compose_shape(spec, random_params(rng, spec));
        const auto pose = random_pose(rng);
        const double s = rng.uniform(0.1, 10.0);
        CameraPose scaled = pose;
        scaled.t *= s;
        worst = std::max(worst, (project(y, pose).coords - project(Shape3D{s * y.coords}, scaled).coords).cwiseAbs().maxCoeff());
    }
    return {worst < 1e-9, "max deviation " + num(worst) + " over 100 (s, instance) pairs"};
}

Outcome criterion3()
{
    const auto spec = chair();
    auto ranges = default_ranges(spec);
    ranges.perturbation = 0.0;
    int rmse_ok = 0;
    int residual_ok = 0;
    double slowest = 0.0;
    constexpr int kCases = 200;
    for (int i = 0; i < kCases; ++i) {
        Rng rng = Rng::stream(103, static_cast<std::uint64_t>(i));
        const auto rec = sample_instance(spec, ranges, RenderSettings{}, rng);
        const auto t0 = Clock::now();
        const auto fit = fit_baseline(rec.x, {}, spec);
        slowest = std::max(slowest, seconds_since(t0));
        rmse_ok += rmse_structure(fit.params, rec.params, spec) < 0.01 ? 1 : 0;
        residual_ok += fit.residual < 1e-10 ? 1 : 0;
    }
    return {rmse_ok >= 180 && residual_ok >= 190 && slowest < 2.0,
            "RMSE < 0.01 on " + std::to_string(rmse_ok) + "/200, residual < 1e-10 on " + std::to_string(residual_ok)
                + "/200, slowest fit " + num(slowest) + " s"};
}

Outcome criterion4()
{
    const auto t0 = Clock::now();
    const auto spec = chair();
    RenderSettings grid;
    grid.geometry.width = 16;
    grid.geometry.height = 12;
    grid.geometry.cell_size = 0.15;
    const auto ds = generate_dataset(spec, default_ranges(spec), grid, 8, 104);
    const auto flat = strip_3d(ds);
    std::vector<const LabeledKeypoints*> labels;
    for (const auto& r : flat.records) {
        labels.push_back(&r);
    }
    Eigen::MatrixXd raw(spec.n_keypoints() * grid.geometry.cells(), static_cast<Eigen::Index>(ds.size()));
    Eigen::MatrixXd targets(spec.n_bases() + 7, static_cast<Eigen::Index>(ds.size()));
    for (std::size_t i = 0; i < ds.size(); ++i) {
        raw.col(static_cast<Eigen::Index>(i)) = stack_to_column<double>(heatmaps_for(ds, i));
        targets.col(static_cast<Eigen::Index>(i)) = target_vector(ds.records[i].params, ds.records[i].pose);
    }
    Rng rng(105);
    double worst = 0.0;
    for (std::uint64_t seed : {106u, 107u, 108u}) {
        auto model = make_interpreter<double>(spec.n_keypoints(), spec.n_bases(), grid.geometry, {64, 32}, seed);
        model.net.output_mean = targets.rowwise().mean();
        model.net.output_scale
            = ((targets.colwise() - model.net.output_mean).array().square().rowwise().mean().sqrt() * 0.3).matrix();
        const Eigen::MatrixXd inputs = standardise_inputs(model.net, raw);
        MlpGradients<double> grads = MlpGradients<double>::zeros_like(model.net);
        stage3_batch_loss<double>(model, inputs, labels, spec, &grads);
        worst = std::max(worst, gradient_check(model.net, grads, [&](const Mlp<double>& net) {
            Interpreter<double> m = model;
            m.net = net;
            return stage3_batch_loss<double>(m, inputs, labels, spec, nullptr);
        }, rng, 400));
    }
    const double t = seconds_since(t0);
    return {worst < 1e-4 && t < 60.0, "max relative error " + num(worst) + " (grid 16x12, widths 64/32/K+7) in " + num(t) + " s"};
}

Outcome criterion8()
{
    const auto t0 = Clock::now();
    Rng rng(108);
    int mismatches = 0;
    for (int trial = 0; trial < 1000; ++trial) {
        const auto c = random_keypoint_case(rng);
        mismatches += pck_curve(c.pred, c.gt, c.normalizer, c.thresholds).values != oracle::pck(c.pred, c.gt, c.normalizer, c.thresholds);
        mismatches += pcp(c.pred, c.gt, c.tau) != oracle::pcp(c.pred, c.gt, c.tau);
        mismatches += average_error(c.pred, c.gt, 5.0, c.unit) != oracle::average_error(c.pred, c.gt, 5.0, c.unit);
    }
    const auto thresholds = default_rmse_thresholds();
    for (int trial = 0; trial < 1000; ++trial) {
        const auto s = random_spec(rng, 4 + static_cast<int>(rng.index(8)), 1 + static_cast<int>(rng.index(4)));
        std::vector<double> values(1 + rng.index(20));
        std::vector<double> want(values.size());
        for (std::size_t i = 0; i < values.size(); ++i) {
            const auto a = random_params(rng, s);
            const auto b = random_params(rng, s);
            values[i] = rmse_structure(a, b, s);
            want[i] = oracle::rmse_structure(compose_shape(s, a).coords, compose_shape(s, b).coords);
        }
        mismatches += rmse_recall_curve(values, thresholds).values != oracle::recall(want, thresholds);
    }
    std::vector<RetrievalKey> db(100);
    for (auto& k : db) {
        k.alpha = Eigen::VectorXd(4);
        for (int i = 0; i < 4; ++i) {
            k.alpha(i) = rng.uniform(-1.0, 1.0);
        }
        k.rotation = rodrigues(random_pose(rng).omega);
    }
    for (int trial = 0; trial < 1000; ++trial) {
        const auto& q = db[rng.index(db.size())];
        const auto mode = trial % 2 == 0 ? RetrievalMode::ByStructure : RetrievalMode::ByViewpoint;
        const std::size_t k = 1 + rng.index(db.size());
        const auto got = retrieve_nearest(q, db, mode, k);
        const auto want = oracle::retrieve(q, db, mode == RetrievalMode::ByStructure, k);
        bool same = got.size() == want.size();
        for (std::size_t i = 0; same && i < got.size(); ++i) {
            same = got[i].index == want[i];
        }
        mismatches += same ? 0 : 1;
    }
    const double t = seconds_since(t0);
    return {mismatches == 0 && t < 30.0,
            std::to_string(mismatches) + " mismatches over 1,000 cases each of PCK, PCP, AE, rmse_recall, retrieval in " + num(t) + " s"};
}

// Pipeline-backed criteria share the smoke runs.

const std::vector<std::string> kCore{"gen", "train", "sweep"};

struct SmokeRuns
{
    std::filesystem::path a;
    std::filesystem::path b;
    double core_seconds = -1.0;
    std::string error;
    bool extras_done = false;
};

SmokeRuns& smoke()
{
    static SmokeRuns runs = [] {
        SmokeRuns r;
        r.a = g_work / "smoke-a";
        r.b = g_work / "smoke-b";
        std::filesystem::remove_all(r.a);
        r.core_seconds = pipeline(kCore, config_path("smoke.toml"), r.a, &r.error);
        return r;
    }();
    return runs;
}

bool smoke_extras(std::string* error)
{
    auto& r = smoke();
    if (r.core_seconds < 0.0) {
        *error = r.error;
        return false;
    }
    if (!r.extras_done) {
        if (pipeline({"finetune", "train-refiner"}, config_path("smoke.toml"), r.a, error) < 0.0) {
            return false;
        }
        r.extras_done = true;
    }
    return true;
}

Outcome criterion5()
{
    Outcome o{true, ""};
    if (g_profile != "full") {
        const auto& r = smoke();
        if (r.core_seconds < 0.0) {
            return {false, r.error};
        }
        const auto ord = ordering(r.a / "sweep.csv", 0.20);
        o.pass = ord.pass && r.core_seconds < 600.0;
        o.detail = "smoke 3,000/300 gen+train+sweep " + num(r.core_seconds) + " s; " + ord.detail;
    }
    if (g_profile != "smoke") {
        const auto dir = g_work / "full";
        std::filesystem::remove_all(dir);
        std::string error;
        const double t = pipeline(kCore, config_path("default.toml"), dir, &error);
        if (t < 0.0) {
            return {false, error};
        }
        const auto ord = ordering(dir / "sweep.csv", 0.10);
        o.pass = o.pass && ord.pass && t < 7200.0;
        o.detail += std::string(o.detail.empty() ? "" : "; ") + "full 30,000/1,000 " + num(t) + " s; " + ord.detail;
    }
    return o;
}

Outcome criterion6()
{
    std::string error;
    if (!smoke_extras(&error)) {
        return {false, error};
    }
    double before = 0.0;
    double after = 0.0;
    std::istringstream in(read_text_file(smoke().a / "finetune-summary.txt"));
    for (std::string line; std::getline(in, line);) {
        const auto eq = line.find('=');
        if (line.rfind("reprojection_error_before", 0) == 0) {
            before = std::stod(line.substr(eq + 1));
        } else if (line.rfind("reprojection_error_after", 0) == 0) {
            after = std::stod(line.substr(eq + 1));
        }
    }
    return {after < before, "held-out mean reprojection error " + num(before, 5) + " -> " + num(after, 5)};
}

Outcome criterion7()
{
    std::string error;
    if (!smoke_extras(&error)) {
        return {false, error};
    }
    const auto refiner = load_refiner<float>((smoke().a / "refiner.skelmlp").string());
    const auto test = load_dataset((smoke().a / "test.skelds").string());
    double before = 0.0;
    double after = 0.0;
    long n = 0;
    for (std::size_t i = 0; i < test.size(); ++i) {
        const auto noisy = corrupt_salt_pepper(heatmaps_for(test, i), NoiseConfig{0.10, splitmix64(7000 + i)});
        const auto dn = decode_argmax(noisy);
        const auto dr = decode_argmax(refine_heatmaps(refiner, noisy));
        const auto& rec = test.records[i];
        for (int k = 0; k < test.spec.n_keypoints(); ++k) {
            if (!rec.visibility[static_cast<std::size_t>(k)]) {
                continue;
            }
            before += (dn.keypoints.coords.col(k) - rec.x.coords.col(k)).norm();
            after += (dr.keypoints.coords.col(k) - rec.x.coords.col(k)).norm();
            ++n;
        }
    }
    before /= static_cast<double>(n);
    after /= static_cast<double>(n);
    return {after <= before, "mean decode error at noise 0.10 " + num(before, 4) + " -> " + num(after, 4) + " on "
                                 + std::to_string(test.size()) + " test samples"};
}

Outcome criterion9()
{
    auto& r = smoke();
    if (r.core_seconds < 0.0) {
        return {false, r.error};
    }
    std::filesystem::remove_all(r.b);
    std::string error;
    if (pipeline(kCore, config_path("smoke.toml"), r.b, &error) < 0.0) {
        return {false, error};
    }
    std::vector<std::string> csvs;
    for (const auto& e : std::filesystem::directory_iterator(r.b)) {
        if (e.path().extension() == ".csv") {
            csvs.push_back(e.path().filename().string());
        }
    }
    std::sort(csvs.begin(), csvs.end());
    bool same = !csvs.empty();
    std::string detail;
    for (const auto& f : csvs) {
        const bool eq = std::filesystem::exists(r.a / f) && read_text_file(r.a / f) == read_text_file(r.b / f);
        same = same && eq;
        detail += (detail.empty() ? "" : ", ") + f + (eq ? " identical" : " DIFFERS");
    }
    return {same, "two single-thread smoke runs: " + detail};
}

} // namespace

int main(int argc, char** argv)
{
    CLI::App app{"skelterp acceptance criteria"};
    std::string work = "acceptance-work";
    std::vector<int> only;
    app.add_option("--work-dir", work, "Scratch directory for pipeline runs");
    app.add_option("--profile", g_profile, "Size of the noise-sweep ordering run")->check(CLI::IsMember({"smoke", "full", "both"}));
    app.add_option("--only", only, "Run only these criteria")->check(CLI::Range(1, 9));
    CLI11_PARSE(app, argc, argv);
    g_work = std::filesystem::absolute(work);
    std::filesystem::create_directories(g_work);

    const std::vector<std::pair<const char*, Outcome (*)()>> criteria{
        {"projection jacobian matches central differences", criterion1},
        {"similarity gauge invariance of projection", criterion2},
        {"baseline identifiability on exact keypoints", criterion3},
        {"stage-III backprop matches finite differences", criterion4},
        {"interpreter beats baseline under noise", criterion5},
        {"fine-tuning reduces held-out reprojection error", criterion6},
        {"refiner reduces decode error at noise 0.10", criterion7},
        {"metrics match brute-force oracles", criterion8},
        {"single-thread pipeline CSVs are byte-identical", criterion9},
    };
    bool all = true;
    for (std::size_t i = 0; i < criteria.size(); ++i) {
        const int id = static_cast<int>(i) + 1;
        if (!only.empty() && std::find(only.begin(), only.end(), id) == only.end()) {
            continue;
        }
        Outcome o;
        try {
            o = criteria[i].second();
        } catch (const std::exception& e) {
            o = {false, std::string("exception: ") + e.what()};
        }
        all = all && o.pass;
        std::cout << (o.pass ? "PASS " : "FAIL ") << id << " " << criteria[i].first << ": " << o.detail << std::endl;
    }
    return all ? 0 : 1;
}
