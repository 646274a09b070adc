/*
 * skelterp - 3D skeleton recovery from 2D keypoint heatmaps.
 *
 * File: include/skelterp/experiment.hpp
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
#ifndef SKELTERP_EXPERIMENT_HPP
#define SKELTERP_EXPERIMENT_HPP

#include "skelterp/config.hpp"

#include <algorithm>
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <iostream>
#include <limits>
#include <map>
#include <numeric>
#include <optional>
#include <ostream>
#include <sstream>
#include <string>
#include <vector>

namespace skelterp {

/// Fixed artifact names under the output directory.
struct ArtifactPaths
{
    std::filesystem::path dir;

    std::filesystem::path dataset() const { return dir / "dataset.skelds"; }
    std::filesystem::path test() const { return dir / "test.skelds"; }
    std::filesystem::path finetune() const { return dir / "finetune.skelds"; }
    std::filesystem::path stage2() const { return dir / "model-stage2.skelmlp"; }
    std::filesystem::path stage3() const { return dir / "model-stage3.skelmlp"; }
    std::filesystem::path refiner() const { return dir / "refiner.skelmlp"; }
    std::filesystem::path sweep() const { return dir / "sweep.csv"; }
    std::filesystem::path manifest() const { return dir / "manifest.txt"; }
};

/// One pipeline invocation: settings, the verb being run and where progress goes.
struct RunContext
{
    ExperimentConfig config;
    std::string command;
    std::ostream* log = &std::cout;

    ArtifactPaths paths() const { return ArtifactPaths{config.out}; }
    std::ostream& out() const { return *log; }
};

/// Seed of one named stochastic stage, derived from the master seed.
inline std::uint64_t stage_seed(std::uint64_t master, std::string_view stage)
{
    return splitmix64(master ^ fnv1a(stage));
}

inline std::uint64_t file_checksum(const std::filesystem::path& path)
{
    std::ifstream in(path, std::ios::binary);
    if (!in) {
        throw IoError("cannot open '" + path.string() + "'");
    }
    Fnv1a h;
    char buf[1 << 16];
    while (in.read(buf, sizeof(buf)) || in.gcount() > 0) {
        h.update(buf, static_cast<std::size_t>(in.gcount()));
    }
    return h.digest();
}

/// Appends the manifest line for an emitted file.
inline void record_artifact(const RunContext& ctx, const std::filesystem::path& file)
{
    std::ofstream m(ctx.paths().manifest(), std::ios::app);
    if (!m) {
        throw IoError("cannot write '" + ctx.paths().manifest().string() + "'");
    }
    m << file.filename().string() << " command=" << ctx.command << " config=" << config_hash(ctx.config)
      << " seed=" << ctx.config.seed << " version=" << kVersion << " fnv1a=" << to_hex(file_checksum(file)) << '\n';
}

inline void write_text_file(const std::filesystem::path& path, const std::string& text)
{
    std::ofstream f(path, std::ios::binary);
    f << text;
    if (!f) {
        throw IoError("cannot write '" + path.string() + "'");
    }
}

inline std::string read_text_file(const std::filesystem::path& path)
{
    std::ifstream f(path, std::ios::binary);
    if (!f) {
        throw IoError("cannot open '" + path.string() + "'");
    }
    std::stringstream s;
    s << f.rdbuf();
    return s.str();
}

namespace detail {

inline void require_input(const std::filesystem::path& path, const char* what)
{
    if (!std::filesystem::exists(path)) {
        throw IoError(std::string("missing ") + what + " '" + path.string() + "'");
    }
}

inline std::string trace_csv(const std::vector<EpochRecord>& trace)
{
    std::string s = "epoch,train_loss,val_loss\n";
    for (const auto& e : trace) {
        s += std::to_string(e.epoch) + ',' + format_exact(e.train_loss) + ',' + format_exact(e.val_loss) + '\n';
    }
    return s;
}

inline std::string fixed(double v, int digits = 4)
{
    char buf[64];
    std::snprintf(buf, sizeof(buf), "%.*f", digits, v);
    return buf;
}

} // namespace detail

// ---------------------------------------------------------------------------
// Inference over datasets

/// Interpreter predictions for `count` samples, each corrupted with noise[i].
inline std::vector<Prediction> interpreter_predictions(const Interpreter<float>& model, const Refiner<float>* refiner,
                                                       const HeatmapProvider& clean, std::size_t count,
                                                       const std::vector<NoiseConfig>& noise, unsigned threads)
{
    std::vector<Prediction> out;
    out.reserve(count);
    for (std::size_t c = 0; c < count; c += static_cast<std::size_t>(detail::kEvalChunk)) {
        const std::size_t w = std::min<std::size_t>(static_cast<std::size_t>(detail::kEvalChunk), count - c);
        std::vector<std::size_t> idx(w);
        std::iota(idx.begin(), idx.end(), c);
        const std::vector<NoiseConfig> nz(noise.begin() + static_cast<std::ptrdiff_t>(c),
                                          noise.begin() + static_cast<std::ptrdiff_t>(c + w));
        Eigen::MatrixXf raw = heatmap_inputs<float>(clean, idx, nz, threads);
        if (refiner) {
            raw = refine_batch(*refiner, raw);
        }
        auto batch = predict_batch(model, raw);
        out.insert(out.end(), batch.begin(), batch.end());
    }
    return out;
}

/// Baseline fits; an underdetermined instance yields no prediction.
inline std::vector<std::optional<Prediction>> baseline_predictions(const SkeletonSpec& spec, const HeatmapProvider& clean,
                                                                   std::size_t count, const std::vector<NoiseConfig>& noise,
                                                                   const FitOptions& options, unsigned threads)
{
    std::vector<std::optional<Prediction>> out(count);
    parallel_for(count, threads, [&](std::size_t i) {
        try {
            const auto fit = fit_baseline(corrupt_salt_pepper(clean(i), noise[i]), spec, options);
            out[i] = Prediction{fit.params, fit.pose};
        } catch (const UnderdeterminedError&) {
        }
    });
    return out;
}

// ---------------------------------------------------------------------------
// Evaluation

struct EvalSummary
{
    std::string method;
    CurveSeries pck;
    CurveSeries structure;
    CurveSeries azimuth;
    double pcp = 0.0;
    double ae = 0.0;
    double structure_average = 0.0;
    double azimuth_average = 0.0;
    std::size_t failures = 0; ///< Instances without a usable prediction.
};

/**
 * @brief All metric families for predictions against a synthetic test set.
 *
 * 2D metrics use visible ground-truth keypoints only; a prediction behind the
 * camera or missing altogether counts as infinitely far in 2D, as an
 * infinite structure RMSE and as a 180 degree azimuth error.
 */
inline EvalSummary evaluate_predictions(const Dataset& test, const std::vector<std::optional<Prediction>>& preds,
                                        const ExperimentConfig& cfg, const std::string& method)
{
    const auto& spec = test.spec;
    const auto& g = test.render.geometry;
    const double inf = std::numeric_limits<double>::infinity();
    std::vector<Keypoints2D> pred2d;
    std::vector<Keypoints2D> gt2d;
    std::vector<double> norm;
    Keypoints2D flat_pred;
    Keypoints2D flat_gt;
    std::vector<Eigen::Vector2d> fp;
    std::vector<Eigen::Vector2d> fg;
    std::vector<double> rmse;
    std::vector<double> azimuth;
    EvalSummary s;
    s.method = method;
    for (std::size_t i = 0; i < test.size(); ++i) {
        const auto& rec = test.records[i];
        const auto& p = preds[i];
        s.failures += p ? 0 : 1;
        Eigen::Matrix2Xd proj = Eigen::Matrix2Xd::Constant(2, spec.n_keypoints(), inf);
        if (p) {
            const auto layer = projection_layer(spec, p->params, p->pose);
            for (int k = 0; k < spec.n_keypoints(); ++k) {
                if (layer.camera(2, k) > kDepthEpsilon) {
                    proj.col(k) = layer.keypoints.col(k);
                }
            }
        }
        std::vector<int> vis;
        for (int k = 0; k < spec.n_keypoints(); ++k) {
            if (rec.visibility[static_cast<std::size_t>(k)]) {
                vis.push_back(k);
            }
        }
        Keypoints2D a{Eigen::Matrix2Xd(2, static_cast<Eigen::Index>(vis.size()))};
        Keypoints2D b{Eigen::Matrix2Xd(2, static_cast<Eigen::Index>(vis.size()))};
        for (std::size_t j = 0; j < vis.size(); ++j) {
            a.coords.col(static_cast<Eigen::Index>(j)) = proj.col(vis[j]);
            b.coords.col(static_cast<Eigen::Index>(j)) = rec.x.coords.col(vis[j]);
            fp.push_back(proj.col(vis[j]));
            fg.push_back(rec.x.coords.col(vis[j]));
        }
        norm.push_back(bbox_diagonal(b));
        pred2d.push_back(std::move(a));
        gt2d.push_back(std::move(b));
        rmse.push_back(p ? rmse_structure(p->params, rec.params, spec) : inf);
        azimuth.push_back(p ? azimuth_error(p->pose, rec.pose) : 180.0);
    }
    flat_pred.coords.resize(2, static_cast<Eigen::Index>(fp.size()));
    flat_gt.coords.resize(2, static_cast<Eigen::Index>(fg.size()));
    for (std::size_t j = 0; j < fp.size(); ++j) {
        flat_pred.coords.col(static_cast<Eigen::Index>(j)) = fp[j];
        flat_gt.coords.col(static_cast<Eigen::Index>(j)) = fg[j];
    }
    s.pck = pck_curve(pred2d, gt2d, norm, cfg.pck_thresholds, "pck");
    const std::vector<double> tau(fp.size(), test.render.sigma * g.cell_size);
    s.pcp = pcp({flat_pred}, {flat_gt}, tau);
    s.ae = average_error({flat_pred}, {flat_gt}, cfg.ae_bound, g.cell_size);
    s.structure = rmse_recall_curve(rmse, cfg.rmse_thresholds, "structure_recall");
    s.azimuth = azimuth_recall_curve(azimuth, cfg.azimuth_thresholds, "azimuth_recall");
    s.structure_average = average_recall(s.structure);
    s.azimuth_average = average_recall(s.azimuth);
    return s;
}

inline std::string eval_csv(const EvalSummary& s)
{
    std::ostringstream out;
    write_curves_csv(out, {s.pck, s.structure, s.azimuth,
                           CurveSeries{{1.5}, {s.pcp}, "pcp"},
                           CurveSeries{{0.0}, {s.ae}, "ae"},
                           CurveSeries{{0.0}, {s.structure_average}, "structure_average_recall"},
                           CurveSeries{{0.0}, {s.azimuth_average}, "azimuth_average_recall"}});
    return out.str();
}

inline std::string eval_text(const EvalSummary& s, std::size_t n)
{
    std::string t = "method: " + s.method + "\ninstances: " + std::to_string(n) + "\nfailures: "
                    + std::to_string(s.failures) + "\n";
    for (std::size_t i = 0; i < s.pck.thresholds.size(); ++i) {
        t += "pck@" + format_exact(s.pck.thresholds[i]) + ": " + detail::fixed(s.pck.values[i]) + "\n";
    }
    t += "pcp (1.5 sigma): " + detail::fixed(s.pcp) + "\n";
    t += "ae (cells, bounded): " + detail::fixed(s.ae) + "\n";
    t += "structure average recall: " + detail::fixed(s.structure_average) + "\n";
    t += "azimuth average recall: " + detail::fixed(s.azimuth_average) + "\n";
    return t;
}

// ---------------------------------------------------------------------------
// Sweep plots

struct SweepRow
{
    double noise_level = 0.0;
    std::string method;
    std::string metric;
    double threshold = 0.0;
    double value = 0.0;
};

inline std::vector<SweepRow> parse_sweep_csv(const std::string& text)
{
    std::vector<SweepRow> rows;
    std::istringstream in(text);
    std::string line;
    if (!std::getline(in, line) || line != "noise_level,method,metric,threshold,value") {
        throw IntegrityError("sweep csv: unexpected header");
    }
    while (std::getline(in, line)) {
        if (line.empty()) {
            continue;
        }
        std::vector<std::string> f;
        std::istringstream ls(line);
        std::string cell;
        while (std::getline(ls, cell, ',')) {
            f.push_back(cell);
        }
        if (f.size() != 5) {
            throw IntegrityError("sweep csv: malformed row '" + line + "'");
        }
        try {
            rows.push_back({std::stod(f[0]), f[1], f[2], std::stod(f[3]), std::stod(f[4])});
        } catch (const std::logic_error&) {
            throw IntegrityError("sweep csv: malformed number in '" + line + "'");
        }
    }
    return rows;
}

/// Line chart of average recall over thresholds versus noise level, one line per method.
inline std::string sweep_svg(const std::vector<SweepRow>& rows, const std::string& metric)
{
    std::vector<std::string> methods;
    std::vector<double> levels;
    std::map<std::pair<std::string, double>, std::pair<double, int>> acc;
    for (const auto& r : rows) {
        if (r.metric != metric) {
            continue;
        }
        if (std::find(methods.begin(), methods.end(), r.method) == methods.end()) {
            methods.push_back(r.method);
        }
        if (std::find(levels.begin(), levels.end(), r.noise_level) == levels.end()) {
            levels.push_back(r.noise_level);
        }
        auto& a = acc[{r.method, r.noise_level}];
        a.first += r.value;
        a.second += 1;
    }
    std::sort(levels.begin(), levels.end());
    constexpr double W = 640;
    constexpr double H = 400;
    constexpr double L = 70;
    constexpr double R = 150;
    constexpr double T = 40;
    constexpr double B = 60;
    const double lo = levels.empty() ? 0.0 : levels.front();
    const double hi = levels.empty() ? 1.0 : levels.back();
    const auto px = [&](double x) { return hi > lo ? L + (x - lo) / (hi - lo) * (W - L - R) : L + 0.5 * (W - L - R); };
    const auto py = [&](double y) { return H - B - y * (H - T - B); };
    const auto f = [](double v) { return detail::fixed(v, 2); };
    static const char* colors[] = {"#1f77b4", "#d62728", "#2ca02c", "#ff7f0e", "#9467bd"};

    std::string s = "<svg xmlns=\"http://www.w3.org/2000/svg\" width=\"640\" height=\"400\" viewBox=\"0 0 640 400\">\n";
    s += "<rect width=\"640\" height=\"400\" fill=\"white\"/>\n";
    s += "<text x=\"" + f(W / 2) + "\" y=\"24\" text-anchor=\"middle\" font-family=\"sans-serif\" font-size=\"15\">"
         + metric + ": average recall vs noise level</text>\n";
    s += "<line x1=\"" + f(L) + "\" y1=\"" + f(py(0)) + "\" x2=\"" + f(W - R) + "\" y2=\"" + f(py(0))
         + "\" stroke=\"black\"/>\n";
    s += "<line x1=\"" + f(L) + "\" y1=\"" + f(py(0)) + "\" x2=\"" + f(L) + "\" y2=\"" + f(py(1)) + "\" stroke=\"black\"/>\n";
    for (int i = 0; i <= 4; ++i) {
        const double y = 0.25 * i;
        s += "<line x1=\"" + f(L - 4) + "\" y1=\"" + f(py(y)) + "\" x2=\"" + f(W - R) + "\" y2=\"" + f(py(y))
             + "\" stroke=\"#dddddd\"/>\n";
        s += "<text x=\"" + f(L - 8) + "\" y=\"" + f(py(y) + 4) + "\" text-anchor=\"end\" font-family=\"sans-serif\" "
             "font-size=\"11\">" + f(y) + "</text>\n";
    }
    for (double x : levels) {
        s += "<text x=\"" + f(px(x)) + "\" y=\"" + f(py(0) + 18) + "\" text-anchor=\"middle\" font-family=\"sans-serif\" "
             "font-size=\"11\">" + f(x) + "</text>\n";
    }
    s += "<text x=\"" + f(L + 0.5 * (W - L - R)) + "\" y=\"" + f(H - 16)
         + "\" text-anchor=\"middle\" font-family=\"sans-serif\" font-size=\"12\">salt-and-pepper level</text>\n";
    for (std::size_t m = 0; m < methods.size(); ++m) {
        const std::string color = colors[m % 5];
        std::string pts;
        for (double x : levels) {
            const auto it = acc.find({methods[m], x});
            if (it == acc.end()) {
                continue;
            }
            const double y = it->second.first / it->second.second;
            pts += (pts.empty() ? "" : " ") + f(px(x)) + "," + f(py(y));
            s += "<circle cx=\"" + f(px(x)) + "\" cy=\"" + f(py(y)) + "\" r=\"3\" fill=\"" + color + "\"/>\n";
        }
        s += "<polyline fill=\"none\" stroke=\"" + color + "\" stroke-width=\"2\" points=\"" + pts + "\"/>\n";
        const double ly = T + 20 + 20 * static_cast<double>(m);
        s += "<line x1=\"" + f(W - R + 15) + "\" y1=\"" + f(ly) + "\" x2=\"" + f(W - R + 35) + "\" y2=\"" + f(ly)
             + "\" stroke=\"" + color + "\" stroke-width=\"2\"/>\n";
        s += "<text x=\"" + f(W - R + 40) + "\" y=\"" + f(ly + 4) + "\" font-family=\"sans-serif\" font-size=\"12\">"
             + methods[m] + "</text>\n";
    }
    return s + "</svg>\n";
}

// ---------------------------------------------------------------------------
// Commands

namespace detail {

inline void ensure_out_dir(const RunContext& ctx)
{
    std::filesystem::create_directories(ctx.paths().dir);
}

inline std::optional<Refiner<float>> wired_refiner(const RunContext& ctx, bool needed)
{
    if (!needed) {
        return std::nullopt;
    }
    require_input(ctx.paths().refiner(), "refiner model");
    return load_refiner<float>(ctx.paths().refiner().string());
}

inline std::filesystem::path eval_model_path(const RunContext& ctx)
{
    return ctx.config.eval_model == "stage3" ? ctx.paths().stage3() : ctx.paths().stage2();
}

inline std::vector<NoiseConfig> level_noise(std::uint64_t seed, std::size_t level_index, double level, std::size_t n)
{
    std::vector<NoiseConfig> out(n);
    for (std::size_t i = 0; i < n; ++i) {
        out[i] = NoiseConfig{level, Rng::stream(seed + level_index, i).bits()};
    }
    return out;
}

} // namespace detail

/// Generates the training, test and shifted fine-tuning corpora.
inline void cmd_gen(const RunContext& ctx)
{
    const auto& c = ctx.config;
    detail::ensure_out_dir(ctx);
    const auto spec = load_spec(c.spec);
    const auto p = ctx.paths();
    const struct
    {
        const char* stage;
        std::size_t count;
        double perturbation;
        std::filesystem::path path;
    } jobs[] = {{"train", c.train_count, c.perturbation, p.dataset()},
                {"test", c.test_count, c.perturbation, p.test()},
                {"finetune", c.finetune_count, c.finetune_perturbation, p.finetune()}};
    for (const auto& j : jobs) {
        const auto ds = generate_dataset(spec, c.ranges(spec, j.perturbation), c.render, j.count,
                                         stage_seed(c.seed, j.stage), c.threads());
        save_dataset(ds, j.path.string());
        record_artifact(ctx, j.path);
        ctx.out() << j.path.filename().string() << ": " << ds.size() << " records, resample rate "
                  << detail::fixed(ds.resample_rate()) << '\n';
    }
}

/// Stage II: parameter-supervised training on the synthetic corpus.
inline TrainReport cmd_train(const RunContext& ctx)
{
    const auto& c = ctx.config;
    detail::require_input(ctx.paths().dataset(), "training dataset");
    const auto ds = load_dataset(ctx.paths().dataset().string());
    const auto refiner = detail::wired_refiner(ctx, c.use_refiner);
    TrainConfig t = c.stage2;
    t.seed = stage_seed(c.seed, "stage2");
    t.threads = c.threads();
    TrainReport rep;
    const auto model = train_interpreter_stage2<float>(ds, t, c.stage2_hidden, &rep, refiner ? &*refiner : nullptr);
    const auto path = ctx.paths().stage2();
    save_interpreter(model, path.string(), {{"config_hash", config_hash(c)}});
    record_artifact(ctx, path);
    const auto trace = ctx.paths().dir / "train-stage2.csv";
    write_text_file(trace, detail::trace_csv(rep.trace));
    record_artifact(ctx, trace);
    ctx.out() << "stage2: best epoch " << rep.best_epoch << ", validation loss " << detail::fixed(rep.initial_val_loss)
              << " -> " << detail::fixed(rep.best_val_loss) << '\n';
    return rep;
}

/// Stage III: fine-tuning through the projection layer on the shifted 2D-only corpus.
inline FinetuneReport cmd_finetune(const RunContext& ctx)
{
    const auto& c = ctx.config;
    detail::require_input(ctx.paths().stage2(), "stage-2 model");
    detail::require_input(ctx.paths().finetune(), "fine-tuning dataset");
    const auto model = load_interpreter<float>(ctx.paths().stage2().string());
    const auto ds = load_dataset(ctx.paths().finetune().string());
    const auto refiner = detail::wired_refiner(ctx, model.refined_input);
    TrainConfig t = c.stage3;
    t.seed = stage_seed(c.seed, "stage3");
    t.threads = c.threads();
    FinetuneReport rep;
    const auto tuned = finetune_projection_stage3(model, strip_3d(ds), ds.spec, t, &rep, refiner ? &*refiner : nullptr);
    const auto path = ctx.paths().stage3();
    save_interpreter(tuned, path.string(), {{"config_hash", config_hash(c)}});
    record_artifact(ctx, path);
    const auto trace = ctx.paths().dir / "train-stage3.csv";
    write_text_file(trace, detail::trace_csv(rep.trace));
    record_artifact(ctx, trace);
    const std::string summary = "reprojection_error_before=" + format_exact(rep.error_before)
                                + "\nreprojection_error_after=" + format_exact(rep.error_after)
                                + "\nvalidation_size=" + std::to_string(rep.validation_size) + "\n";
    const auto sp = ctx.paths().dir / "finetune-summary.txt";
    write_text_file(sp, summary);
    record_artifact(ctx, sp);
    ctx.out() << "stage3: held-out reprojection error " << detail::fixed(rep.error_before, 5) << " -> "
              << detail::fixed(rep.error_after, 5) << '\n';
    return rep;
}

/// Trains the heatmap refiner on (corrupted, clean) pairs of the training corpus.
inline TrainReport cmd_train_refiner(const RunContext& ctx)
{
    const auto& c = ctx.config;
    detail::require_input(ctx.paths().dataset(), "training dataset");
    const auto ds = load_dataset(ctx.paths().dataset().string());
    TrainConfig t = c.refiner;
    t.seed = stage_seed(c.seed, "refiner");
    t.threads = c.threads();
    TrainReport rep;
    const auto r = train_refiner<float>(ds, t, c.refiner_shape, &rep);
    const auto path = ctx.paths().refiner();
    save_refiner(r, path.string());
    record_artifact(ctx, path);
    const auto trace = ctx.paths().dir / "train-refiner.csv";
    write_text_file(trace, detail::trace_csv(rep.trace));
    record_artifact(ctx, trace);
    ctx.out() << "refiner: best epoch " << rep.best_epoch << ", validation loss " << detail::fixed(rep.initial_val_loss, 5)
              << " -> " << detail::fixed(rep.best_val_loss, 5) << '\n';
    return rep;
}

namespace detail {

inline EvalSummary write_eval(const RunContext& ctx, const Dataset& test, const std::vector<std::optional<Prediction>>& preds,
                              const std::string& method, const std::string& stem)
{
    const auto s = evaluate_predictions(test, preds, ctx.config, method);
    const auto csv = ctx.paths().dir / (stem + ".csv");
    write_text_file(csv, eval_csv(s));
    record_artifact(ctx, csv);
    const auto txt = ctx.paths().dir / (stem + ".txt");
    const std::string text = eval_text(s, test.size());
    write_text_file(txt, text);
    record_artifact(ctx, txt);
    ctx.out() << text;
    return s;
}

} // namespace detail

/// All metric families for the interpreter on the clean test set.
inline EvalSummary cmd_eval(const RunContext& ctx)
{
    const auto& c = ctx.config;
    const auto model_path = detail::eval_model_path(ctx);
    detail::require_input(model_path, "interpreter model");
    detail::require_input(ctx.paths().test(), "test dataset");
    const auto model = load_interpreter<float>(model_path.string());
    const auto test = load_dataset(ctx.paths().test().string());
    const auto refiner = detail::wired_refiner(ctx, model.refined_input);
    const auto preds = interpreter_predictions(model, refiner ? &*refiner : nullptr,
                                               [&test](std::size_t i) { return heatmaps_for(test, i); }, test.size(),
                                               std::vector<NoiseConfig>(test.size()), c.threads());
    return detail::write_eval(ctx, test, {preds.begin(), preds.end()}, "interpreter", "eval");
}

/// All metric families for the argmax + baseline-fit pipeline on the clean test set.
inline EvalSummary cmd_baseline(const RunContext& ctx)
{
    const auto& c = ctx.config;
    detail::require_input(ctx.paths().test(), "test dataset");
    const auto test = load_dataset(ctx.paths().test().string());
    const auto preds = baseline_predictions(test.spec, [&test](std::size_t i) { return heatmaps_for(test, i); }, test.size(),
                                            std::vector<NoiseConfig>(test.size()), c.baseline, c.threads());
    return detail::write_eval(ctx, test, preds, "baseline", "baseline");
}

/// Regenerates the sweep SVGs from sweep.csv.
inline void cmd_plot(const RunContext& ctx)
{
    detail::require_input(ctx.paths().sweep(), "sweep csv");
    const auto rows = parse_sweep_csv(read_text_file(ctx.paths().sweep()));
    for (const char* metric : {"structure", "azimuth"}) {
        const auto path = ctx.paths().dir / (std::string("sweep-") + metric + ".svg");
        write_text_file(path, sweep_svg(rows, metric));
        record_artifact(ctx, path);
    }
}

struct SweepLevel
{
    double noise_level = 0.0;
    EvalSummary interpreter;
    EvalSummary baseline;
};

/**
 * @brief Noise sweep: both pipelines on the corrupted test set at every level.
 *
 * Level i corrupts sample j with a seed drawn from stream (sweep seed + i, j),
 * so both methods see identical heatmaps.
 */
inline std::vector<SweepLevel> cmd_sweep(const RunContext& ctx)
{
    const auto& c = ctx.config;
    const auto model_path = detail::eval_model_path(ctx);
    detail::require_input(model_path, "interpreter model");
    detail::require_input(ctx.paths().test(), "test dataset");
    const auto model = load_interpreter<float>(model_path.string());
    const auto test = load_dataset(ctx.paths().test().string());
    const auto refiner = detail::wired_refiner(ctx, model.refined_input);
    const HeatmapProvider clean = [&test](std::size_t i) { return heatmaps_for(test, i); };
    const std::uint64_t seed = stage_seed(c.seed, "sweep");

    std::vector<SweepLevel> levels;
    std::string csv = "noise_level,method,metric,threshold,value\n";
    for (std::size_t li = 0; li < c.sweep_levels.size(); ++li) {
        const double level = c.sweep_levels[li];
        const auto noise = detail::level_noise(seed, li, level, test.size());
        const auto ip = interpreter_predictions(model, refiner ? &*refiner : nullptr, clean, test.size(), noise, c.threads());
        SweepLevel sl;
        sl.noise_level = level;
        sl.interpreter = evaluate_predictions(test, {ip.begin(), ip.end()}, c, "interpreter");
        sl.baseline = evaluate_predictions(test, baseline_predictions(test.spec, clean, test.size(), noise, c.baseline, c.threads()),
                                           c, "baseline");
        for (const auto* s : {&sl.interpreter, &sl.baseline}) {
            for (const auto& [metric, curve] : {std::pair{"structure", &s->structure}, std::pair{"azimuth", &s->azimuth}}) {
                for (std::size_t t = 0; t < curve->thresholds.size(); ++t) {
                    csv += format_exact(level) + ',' + s->method + ',' + metric + ',' + format_exact(curve->thresholds[t]) + ','
                           + format_exact(curve->values[t]) + '\n';
                }
            }
        }
        ctx.out() << "noise " << detail::fixed(level, 2) << ": structure recall interpreter "
                  << detail::fixed(sl.interpreter.structure_average) << " baseline " << detail::fixed(sl.baseline.structure_average)
                  << "; azimuth recall interpreter " << detail::fixed(sl.interpreter.azimuth_average) << " baseline "
                  << detail::fixed(sl.baseline.azimuth_average) << '\n';
        levels.push_back(std::move(sl));
    }
    write_text_file(ctx.paths().sweep(), csv);
    record_artifact(ctx, ctx.paths().sweep());
    cmd_plot(ctx);
    return levels;
}

/// Nearest neighbours of the first test predictions among all test predictions, by structure and by viewpoint.
inline std::string cmd_retrieve(const RunContext& ctx)
{
    const auto& c = ctx.config;
    const auto model_path = detail::eval_model_path(ctx);
    detail::require_input(model_path, "interpreter model");
    detail::require_input(ctx.paths().test(), "test dataset");
    const auto model = load_interpreter<float>(model_path.string());
    const auto test = load_dataset(ctx.paths().test().string());
    const auto refiner = detail::wired_refiner(ctx, model.refined_input);
    const auto preds = interpreter_predictions(model, refiner ? &*refiner : nullptr,
                                               [&test](std::size_t i) { return heatmaps_for(test, i); }, test.size(),
                                               std::vector<NoiseConfig>(test.size()), c.threads());
    std::vector<RetrievalKey> db;
    for (const auto& p : preds) {
        db.push_back({p.params.alpha, p.pose.rotation()});
    }
    std::string csv = "query,mode,rank,index,distance\n";
    const std::size_t queries = std::min(db.size(), static_cast<std::size_t>(c.retrieve_queries));
    for (std::size_t q = 0; q < queries; ++q) {
        for (const auto& [mode, name] : {std::pair{RetrievalMode::ByStructure, "structure"}, std::pair{RetrievalMode::ByViewpoint, "viewpoint"}}) {
            const auto hits = retrieve_nearest(db[q], db, mode, static_cast<std::size_t>(c.retrieve_k));
            for (std::size_t r = 0; r < hits.size(); ++r) {
                csv += std::to_string(q) + ',' + name + ',' + std::to_string(r + 1) + ',' + std::to_string(hits[r].index) + ','
                       + format_exact(hits[r].distance) + '\n';
            }
        }
    }
    const auto path = ctx.paths().dir / "retrieve.csv";
    write_text_file(path, csv);
    record_artifact(ctx, path);
    ctx.out() << "retrieve: " << queries << " queries, k=" << c.retrieve_k << " -> " << path.filename().string() << '\n';
    return csv;
}

} // namespace skelterp

#endif // SKELTERP_EXPERIMENT_HPP
