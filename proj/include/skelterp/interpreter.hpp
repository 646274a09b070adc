/*
 * skelterp - 3D skeleton recovery from 2D keypoint heatmaps.
 *
 * File: include/skelterp/interpreter.hpp
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
#pragma once

#ifndef SKELTERP_INTERPRETER_HPP
#define SKELTERP_INTERPRETER_HPP

#include "skelterp/camera.hpp"
#include "skelterp/common.hpp"
#include "skelterp/heatmap.hpp"
#include "skelterp/mlp.hpp"
#include "skelterp/rotation.hpp"
#include "skelterp/skeleton.hpp"
#include "skelterp/synth.hpp"

#include "Eigen/Core"

#include <algorithm>
#include <cmath>
#include <functional>
#include <limits>
#include <map>
#include <numeric>
#include <optional>
#include <string>
#include <vector>

namespace skelterp {

struct TrainConfig
{
    int epochs = 20;
    int batch_size = 128;
    AdamSettings adam;
    double lr_decay = 1.0; ///< Per-epoch multiplicative learning-rate factor.
    std::uint64_t seed = 1;
    /// Salt-and-pepper levels drawn uniformly per training sample; {0} disables augmentation.
    std::vector<double> noise_levels{0.0};
    double validation_fraction = 0.1;
    /// Stage-II loss weights for the alpha, omega, t and f groups.
    std::array<double, 4> group_weights{1.0, 1.0, 1.0, 1.0};
    unsigned threads = 1;

    void validate() const
    {
        if (epochs < 0 || batch_size < 1) {
            throw ConfigError("train config: epochs must be >= 0 and batch_size >= 1");
        }
        if (!(adam.learning_rate > 0.0) || !(lr_decay > 0.0) || !(adam.beta1 >= 0.0 && adam.beta1 < 1.0)
            || !(adam.beta2 >= 0.0 && adam.beta2 < 1.0) || !(adam.epsilon > 0.0)) {
            throw ConfigError("train config: learning rate, decay and optimiser constants must be positive");
        }
        if (noise_levels.empty()) {
            throw ConfigError("train config: noise_levels must not be empty");
        }
        for (double p : noise_levels) {
            if (!(p >= 0.0 && p <= 1.0)) {
                throw ConfigError("train config: noise levels must lie in [0, 1]");
            }
        }
        if (!(validation_fraction >= 0.0 && validation_fraction < 1.0)) {
            throw ConfigError("train config: validation_fraction must lie in [0, 1)");
        }
        for (double w : group_weights) {
            if (!(w >= 0.0)) {
                throw ConfigError("train config: group weights must be non-negative");
            }
        }
    }
};

struct EpochRecord
{
    int epoch = 0;
    double train_loss = 0.0;
    double val_loss = 0.0;
};

struct TrainReport
{
    std::vector<EpochRecord> trace;
    double initial_val_loss = 0.0;
    int best_epoch = 0;
    double best_val_loss = 0.0;
};

struct FinetuneReport
{
    std::vector<EpochRecord> trace;
    int best_epoch = 0;
    double error_before = 0.0; ///< Mean 2D reprojection distance on the validation split.
    double error_after = 0.0;
    std::size_t validation_size = 0;
};

/// Floor for per-input standard deviations used in input normalisation.
inline constexpr double kInputStdFloor = 0.05;
/// Initial logit and logit scale of the refiner's gain head.
inline constexpr double kRefinerGainLogit = 2.5;
inline constexpr double kRefinerGainScale = 1.0;
/// The gain is min(1, (1 + margin) * logistic), so confident cells pass through exactly.
inline constexpr double kRefinerGainMargin = 0.05;
/// Extra loss weight per unit of clean heatmap value.
inline constexpr double kRefinerPeakWeight = 5000.0;
/// Clean cells below this level are treated as background the refiner should remove.
inline constexpr double kRefinerSignalLevel = 0.01;
/// Depth the stage-III barrier pulls offending keypoints towards.
inline constexpr double kBarrierDepth = 0.1;
/// Distance charged to a keypoint whose predicted depth leaves the projection domain.
inline constexpr double kDomainFailureDistance = 3.0;

/**
 * @brief Regresses (alpha, omega, t, log f) from flattened heatmap stacks.
 *
 * The input is the channel-major stack of n_keypoints grids; the output head
 * has K + 7 units.
 */
template <typename Scalar = float>
struct Interpreter
{
    Mlp<Scalar> net;
    HeatmapGeometry geometry;
    int n_keypoints = 0;
    int n_bases = 0;
    bool refined_input = false;

    int input_width() const { return n_keypoints * geometry.cells(); }
    int output_width() const { return n_bases + kPoseParams; }

    template <typename Other>
    Interpreter<Other> cast() const
    {
        return Interpreter<Other>{net.template cast<Other>(), geometry, n_keypoints, n_bases, refined_input};
    }
};

template <typename Scalar = float>
Interpreter<Scalar> make_interpreter(int n_keypoints, int n_bases, const HeatmapGeometry& geometry,
                                     const std::vector<int>& hidden, std::uint64_t seed)
{
    if (n_keypoints < 1 || n_bases < 1 || !geometry.valid()) {
        throw ArgumentError("make_interpreter: invalid keypoint/basis counts or grid geometry");
    }
    Interpreter<Scalar> it;
    it.geometry = geometry;
    it.n_keypoints = n_keypoints;
    it.n_bases = n_bases;
    std::vector<int> widths{it.input_width()};
    widths.insert(widths.end(), hidden.begin(), hidden.end());
    widths.push_back(it.output_width());
    it.net = make_mlp<Scalar>(widths, seed);
    return it;
}

struct Prediction
{
    StructParams params;
    CameraPose pose;
};

/// Regression target (alpha, omega, t, log f).
inline Eigen::VectorXd target_vector(const StructParams& params, const CameraPose& pose)
{
    const Eigen::Index k = params.alpha.size();
    Eigen::VectorXd v(k + kPoseParams);
    v.head(k) = params.alpha;
    v.segment<3>(k) = pose.omega;
    v.segment<3>(k + 3) = pose.t;
    v(k + 6) = std::log(pose.f);
    return v;
}

inline Prediction prediction_from_output(const Eigen::VectorXd& out, int n_bases)
{
    Prediction p;
    p.params.alpha = out.head(n_bases);
    p.pose.omega = canonical_axis_angle(out.segment<3>(n_bases));
    p.pose.t = out.segment<3>(n_bases + 3);
    p.pose.f = std::exp(out(n_bases + 6));
    return p;
}

/// Per-sample augmentation noise for (seed, epoch, index).
inline NoiseConfig augmentation_noise(const std::vector<double>& levels, std::uint64_t seed, std::uint64_t epoch,
                                      std::uint64_t index)
{
    Rng rng = Rng::stream(splitmix64(seed) + epoch, index);
    const double level = levels[rng.index(levels.size())];
    return NoiseConfig{level, rng.bits()};
}

/// Tag used for the fixed validation noise draw.
inline constexpr std::uint64_t kValidationEpoch = ~std::uint64_t{0};
/// Tag used for the normalisation statistics draw.
inline constexpr std::uint64_t kStatisticsEpoch = ~std::uint64_t{0} - 1;

using HeatmapProvider = std::function<HeatmapStack(std::size_t)>;

/// Heatmap values below this magnitude enter the networks as zero.
inline constexpr float kInputFlush = 1e-20f;

/// Heatmap value as a network input. Flushing the far Gaussian tails keeps products with weights out of the subnormal range.
template <typename Scalar>
Scalar input_value(float v)
{
    return std::abs(v) < kInputFlush ? Scalar(0) : static_cast<Scalar>(v);
}

/**
 * Builds a raw input matrix (one column per sample) from clean heatmaps with
 * the given per-sample corruption.
 */

template <typename Scalar>
typename Mlp<Scalar>::Matrix heatmap_inputs(const HeatmapProvider& clean, const std::vector<std::size_t>& indices,
                                            const std::vector<NoiseConfig>& noise, unsigned threads)
{
    if (indices.empty()) {
        return {};
    }
    const HeatmapStack first = clean(indices[0]);
    typename Mlp<Scalar>::Matrix out(static_cast<Eigen::Index>(first.size()), static_cast<Eigen::Index>(indices.size()));
    parallel_for(indices.size(), threads, [&](std::size_t j) {
        HeatmapStack hm = clean(indices[j]);
        if (noise[j].level > 0.0) {
            hm = corrupt_salt_pepper(hm, noise[j]);
        }
        if (hm.size() != static_cast<std::size_t>(out.rows())) {
            throw ArgumentError("heatmap_inputs: heatmap stacks differ in size");
        }
        for (Eigen::Index r = 0; r < out.rows(); ++r) {
            out(r, static_cast<Eigen::Index>(j)) = input_value<Scalar>(hm.values[static_cast<std::size_t>(r)]);
        }
    });
    return out;
}

template <typename Scalar>
typename Mlp<Scalar>::Matrix stack_to_column(const HeatmapStack& hm)
{
    return Eigen::Map<const Eigen::VectorXf>(hm.values.data(), static_cast<Eigen::Index>(hm.values.size()))
        .unaryExpr([](float v) { return input_value<Scalar>(v); });
}

// ---------------------------------------------------------------------------
// Refiner

struct RefinerShape
{
    std::vector<int> hidden{256, 64, 256};
    int projection_dim = 1024;
    int projection_threshold = 4096; ///< Project only when the stack is larger than this.
};

template <typename Scalar = float>
struct Refiner
{
    Mlp<Scalar> net;
    HeatmapGeometry geometry;
    int channels = 0;
    int projection_dim = 0; ///< 0 when the network sees the raw stack.
    std::uint64_t projection_seed = 0;
    typename Mlp<Scalar>::Matrix projection;

    int data_width() const { return channels * geometry.cells(); }
};

/// Fixed Gaussian random projection, regenerated from its seed.
template <typename Scalar>
typename Mlp<Scalar>::Matrix random_projection(int rows, int cols, std::uint64_t seed)
{
    Rng rng(seed);
    typename Mlp<Scalar>::Matrix p(rows, cols);
    const double scale = 1.0 / std::sqrt(static_cast<double>(rows));
    for (Eigen::Index c = 0; c < p.cols(); ++c) {
        for (Eigen::Index r = 0; r < p.rows(); ++r) {
            p(r, c) = static_cast<Scalar>(scale * rng.normal());
        }
    }
    return p;
}

/// Layer widths a refiner would use; checks the bottleneck without allocating anything.
inline std::vector<int> refiner_widths(int channels, const HeatmapGeometry& geometry, const RefinerShape& shape)
{
    const long data = static_cast<long>(channels) * geometry.cells();
    if (channels < 1 || !geometry.valid()) {
        throw ConfigError("refiner: invalid channel count or grid geometry");
    }
    if (shape.hidden.empty()) {
        throw ConfigError("refiner: at least one hidden width is required");
    }
    for (int w : shape.hidden) {
        if (w < 1) {
            throw ConfigError("refiner: hidden widths must be positive");
        }
    }
    const bool project = data > shape.projection_threshold && shape.projection_dim > 0;
    const int input = project ? shape.projection_dim : static_cast<int>(data);
    const int middle = shape.hidden[shape.hidden.size() / 2];
    if (!(middle < input && middle < data)) {
        throw ConfigError("refiner: bottleneck width " + std::to_string(middle)
                          + " must be smaller than the input and output widths");
    }
    std::vector<int> widths{input};
    widths.insert(widths.end(), shape.hidden.begin(), shape.hidden.end());
    widths.push_back(static_cast<int>(data));
    return widths;
}

template <typename Scalar = float>
Refiner<Scalar> make_refiner(int channels, const HeatmapGeometry& geometry, const RefinerShape& shape, std::uint64_t seed)
{
    Refiner<Scalar> r;
    r.geometry = geometry;
    r.channels = channels;
    const auto widths = refiner_widths(channels, geometry, shape);
    if (widths.front() != r.data_width()) {
        r.projection_dim = widths.front();
        r.projection_seed = splitmix64(seed ^ 0x5EEDu);
        r.projection = random_projection<Scalar>(r.projection_dim, r.data_width(), r.projection_seed);
    }
    r.net = make_mlp<Scalar>(widths, seed);
    // An untrained refiner applies one uniform gain, so it preserves every argmax.
    r.net.weights.back().setZero();
    r.net.output_mean.setConstant(r.data_width(), Scalar(kRefinerGainLogit));
    r.net.output_scale.setConstant(r.data_width(), Scalar(kRefinerGainScale));
    return r;
}

/// Network input features (projected when configured) for raw stacked heatmaps.
template <typename Scalar>
typename Mlp<Scalar>::Matrix refiner_features(const Refiner<Scalar>& r, const typename Mlp<Scalar>::Matrix& raw)
{
    if (raw.rows() != r.data_width()) {
        throw ArgumentError("refiner: input width does not match the refiner's heatmap geometry");
    }
    if (r.projection_dim > 0) {
        return r.projection * raw;
    }
    return raw;
}

/// Per-cell gain in (0, 1]: capped, slightly stretched logistic of the de-normalised network outputs.
template <typename Scalar>
typename Mlp<Scalar>::Matrix refiner_gain(const Refiner<Scalar>& r, const typename Mlp<Scalar>::Matrix& y)
{
    return destandardise_outputs(r.net, y).unaryExpr([](Scalar u) {
        return std::min(Scalar(1), Scalar(1 + kRefinerGainMargin) / (Scalar(1) + std::exp(-u)));
    });
}

/// d gain / d logit, zero where the cap is active.
template <typename Scalar>
typename Mlp<Scalar>::Matrix refiner_gain_slope(const typename Mlp<Scalar>::Matrix& gain)
{
    return gain.unaryExpr([](Scalar g) {
        return g < Scalar(1) ? g * (Scalar(1) - g / Scalar(1 + kRefinerGainMargin)) : Scalar(0);
    });
}

/// 3x3 max filter over each channel's gain map; near-tie neighbours of a peak share its gain.
template <typename Scalar>
typename Mlp<Scalar>::Matrix dilate_gain(const typename Mlp<Scalar>::Matrix& gain, int channels, const HeatmapGeometry& g)
{
    typename Mlp<Scalar>::Matrix out(gain.rows(), gain.cols());
    for (Eigen::Index s = 0; s < gain.cols(); ++s) {
        for (int ch = 0; ch < channels; ++ch) {
            const Eigen::Index base = static_cast<Eigen::Index>(ch) * g.cells();
            for (int r = 0; r < g.height; ++r) {
                for (int c = 0; c < g.width; ++c) {
                    Scalar m = Scalar(0);
                    for (int dr = std::max(0, r - 1); dr <= std::min(g.height - 1, r + 1); ++dr) {
                        for (int dc = std::max(0, c - 1); dc <= std::min(g.width - 1, c + 1); ++dc) {
                            m = std::max(m, gain(base + dr * g.width + dc, s));
                        }
                    }
                    out(base + r * g.width + c, s) = m;
                }
            }
        }
    }
    return out;
}

/**
 * Refines a batch of raw stacked heatmaps. The network predicts a per-cell
 * gain in [0, 1] that multiplies the input, so outputs stay in [0, 1].
 */
template <typename Scalar>
typename Mlp<Scalar>::Matrix refine_batch(const Refiner<Scalar>& r, const typename Mlp<Scalar>::Matrix& raw)
{
    const DenormalGuard ftz;
    const auto y = forward_batch(r.net, standardise_inputs(r.net, refiner_features(r, raw)));
    return dilate_gain<Scalar>(refiner_gain(r, y), r.channels, r.geometry).cwiseProduct(raw).cwiseMax(Scalar(0)).cwiseMin(Scalar(1));
}

template <typename Scalar>
HeatmapStack refine_heatmaps(const Refiner<Scalar>& r, const HeatmapStack& hm)
{
    if (!(hm.geometry == r.geometry) || hm.channels != r.channels) {
        throw ArgumentError("refine_heatmaps: heatmap geometry does not match the refiner");
    }
    const auto out = refine_batch(r, stack_to_column<Scalar>(hm));
    HeatmapStack refined(hm.geometry, hm.channels);
    for (std::size_t i = 0; i < refined.values.size(); ++i) {
        refined.values[i] = static_cast<float>(out(static_cast<Eigen::Index>(i), 0));
    }
    for (int ch = 0; ch < hm.channels; ++ch) {
        const auto begin = refined.values.begin() + static_cast<std::ptrdiff_t>(ch) * hm.geometry.cells();
        refined.visible[static_cast<std::size_t>(ch)] = std::any_of(begin, begin + hm.geometry.cells(), [](float v) { return v > 0.0f; });
    }
    return refined;
}

namespace detail {

/// Splits [0, n) into a training prefix and a validation suffix.
inline std::pair<std::vector<std::size_t>, std::vector<std::size_t>> split_indices(std::size_t n, double fraction)
{
    std::size_t n_val = 0;
    if (n >= 2 && fraction > 0.0) {
        n_val = std::clamp<std::size_t>(static_cast<std::size_t>(std::floor(fraction * static_cast<double>(n))), 1, n - 1);
    }
    std::vector<std::size_t> train(n - n_val);
    std::vector<std::size_t> val(n_val);
    std::iota(train.begin(), train.end(), 0);
    std::iota(val.begin(), val.end(), n - n_val);
    if (val.empty()) {
        val = train;
    }
    return {train, val};
}

inline std::vector<NoiseConfig> noise_for(const std::vector<double>& levels, std::uint64_t seed, std::uint64_t epoch,
                                          const std::vector<std::size_t>& indices)
{
    std::vector<NoiseConfig> out;
    out.reserve(indices.size());
    for (auto i : indices) {
        out.push_back(augmentation_noise(levels, seed, epoch, i));
    }
    return out;
}

/// Per-feature mean and floored standard deviation; one sample per column.
template <typename Scalar>
void column_statistics(const typename Mlp<Scalar>::Matrix& samples, double floor, typename Mlp<Scalar>::Vector& mean,
                       typename Mlp<Scalar>::Vector& scale)
{
    const Eigen::MatrixXd s = samples.template cast<double>();
    const Eigen::VectorXd mu = s.rowwise().mean();
    const Eigen::VectorXd var = (s.colwise() - mu).array().square().rowwise().mean();
    mean = mu.cast<Scalar>();
    scale = var.array().sqrt().max(floor).matrix().template cast<Scalar>();
}

template <typename Scalar>
typename Mlp<Scalar>::Matrix gather_inputs(const HeatmapProvider& clean, const std::vector<std::size_t>& indices,
                                           const std::vector<NoiseConfig>& noise, unsigned threads,
                                           const Refiner<float>* refiner)
{
    auto raw = heatmap_inputs<Scalar>(clean, indices, noise, threads);
    if (refiner) {
        return refine_batch(*refiner, Eigen::MatrixXf(raw.template cast<float>())).template cast<Scalar>();
    }
    return raw;
}

inline std::vector<std::size_t> statistics_sample(const std::vector<std::size_t>& train, std::size_t limit)
{
    if (train.size() <= limit) {
        return train;
    }
    std::vector<std::size_t> out(limit);
    for (std::size_t i = 0; i < limit; ++i) {
        out[i] = train[i * train.size() / limit];
    }
    return out;
}

inline constexpr std::size_t kStatisticsSamples = 1000;
inline constexpr Eigen::Index kEvalChunk = 256;

inline void check_finite(double loss, long step, const char* stage)
{
    if (!std::isfinite(loss)) {
        throw TrainingError(std::string(stage) + ": non-finite loss", step);
    }
}

} // namespace detail

// ---------------------------------------------------------------------------
// Stage II: parameter supervision

/**
 * Weighted mean squared error on standardised targets for one batch; adds
 * parameter gradients to `grads` when given.
 */
template <typename Scalar>
double stage2_batch_loss(const Interpreter<Scalar>& model, const typename Mlp<Scalar>::Matrix& std_inputs,
                         const Eigen::MatrixXd& std_targets, const std::array<double, 4>& group_weights,
                         MlpGradients<Scalar>* grads)
{
    const int k = model.n_bases;
    Eigen::VectorXd w(model.output_width());
    w.head(k).setConstant(group_weights[0]);
    w.segment<3>(k).setConstant(group_weights[1]);
    w.segment<3>(k + 3).setConstant(group_weights[2]);
    w(k + 6) = group_weights[3];

    MlpTape<Scalar> tape;
    const auto out = forward_batch(model.net, std_inputs, grads ? &tape : nullptr);
    const Eigen::MatrixXd diff = out.template cast<double>() - std_targets;
    const double denom = static_cast<double>(diff.size());
    const double loss = (diff.array().square().colwise() * w.array()).sum() / denom;
    if (grads) {
        const Eigen::MatrixXd up = (2.0 / denom) * (diff.array().colwise() * w.array()).matrix();
        backward_batch(model.net, tape, typename Mlp<Scalar>::Matrix(up.cast<Scalar>()), *grads);
    }
    return loss;
}

/**
 * @brief Trains the interpreter on synthetic records with parameter supervision.
 *
 * The last `validation_fraction` of the records is held out; the returned
 * model is the checkpoint with the lowest validation loss.
 */
template <typename Scalar = float>
Interpreter<Scalar> train_interpreter_stage2(const Dataset& ds, const TrainConfig& cfg, const std::vector<int>& hidden,
                                             TrainReport* report = nullptr, const Refiner<float>* refiner = nullptr)
{
    if (ds.records.empty()) {
        throw ArgumentError("train_interpreter_stage2: dataset is empty");
    }
    const DenormalGuard ftz;
    cfg.validate();
    const int n = ds.spec.n_keypoints();
    const int k = ds.spec.n_bases();
    for (const auto& rec : ds.records) {
        if (rec.params.alpha.size() != k || rec.x.n_keypoints() != n) {
            throw ArgumentError("train_interpreter_stage2: record dimensions disagree with the dataset spec");
        }
    }
    if (refiner && (refiner->channels != n || !(refiner->geometry == ds.render.geometry))) {
        throw ArgumentError("train_interpreter_stage2: refiner geometry does not match the dataset");
    }
    const HeatmapProvider clean = [&ds](std::size_t i) { return heatmaps_for(ds, i); };
    const auto [train, val] = detail::split_indices(ds.size(), cfg.validation_fraction);

    auto model = make_interpreter<Scalar>(n, k, ds.render.geometry, hidden, cfg.seed);
    model.refined_input = refiner != nullptr;

    Eigen::MatrixXd targets(model.output_width(), static_cast<Eigen::Index>(ds.size()));
    for (std::size_t i = 0; i < ds.size(); ++i) {
        targets.col(static_cast<Eigen::Index>(i)) = target_vector(ds.records[i].params, ds.records[i].pose);
    }
    {
        Eigen::MatrixXd train_targets(targets.rows(), static_cast<Eigen::Index>(train.size()));
        for (std::size_t j = 0; j < train.size(); ++j) {
            train_targets.col(static_cast<Eigen::Index>(j)) = targets.col(static_cast<Eigen::Index>(train[j]));
        }
        const Eigen::VectorXd mu = train_targets.rowwise().mean();
        Eigen::VectorXd sd = (train_targets.colwise() - mu).array().square().rowwise().mean().sqrt();
        for (Eigen::Index i = 0; i < sd.size(); ++i) {
            sd(i) = sd(i) > 1e-8 ? sd(i) : 1.0;
        }
        model.net.output_mean = mu.cast<Scalar>();
        model.net.output_scale = sd.cast<Scalar>();
    }
    const Eigen::MatrixXd std_targets = (targets.colwise() - model.net.output_mean.template cast<double>()).array().colwise()
                                        / model.net.output_scale.template cast<double>().array();
    {
        const auto sample = detail::statistics_sample(train, detail::kStatisticsSamples);
        const auto inputs = detail::gather_inputs<Scalar>(clean, sample, detail::noise_for(cfg.noise_levels, cfg.seed, kStatisticsEpoch, sample),
                                                          cfg.threads, refiner);
        detail::column_statistics<Scalar>(inputs, kInputStdFloor, model.net.input_mean, model.net.input_scale);
    }

    const auto val_inputs = standardise_inputs(
        model.net, detail::gather_inputs<Scalar>(clean, val, detail::noise_for(cfg.noise_levels, cfg.seed, kValidationEpoch, val),
                                                 cfg.threads, refiner));
    Eigen::MatrixXd val_targets(std_targets.rows(), static_cast<Eigen::Index>(val.size()));
    for (std::size_t j = 0; j < val.size(); ++j) {
        val_targets.col(static_cast<Eigen::Index>(j)) = std_targets.col(static_cast<Eigen::Index>(val[j]));
    }
    const auto validation_loss = [&](const Interpreter<Scalar>& m) {
        double total = 0.0;
        for (Eigen::Index c = 0; c < val_inputs.cols(); c += detail::kEvalChunk) {
            const Eigen::Index w = std::min(detail::kEvalChunk, val_inputs.cols() - c);
            total += stage2_batch_loss<Scalar>(m, val_inputs.middleCols(c, w), val_targets.middleCols(c, w),
                                               cfg.group_weights, nullptr)
                     * static_cast<double>(w);
        }
        return total / static_cast<double>(val_inputs.cols());
    };

    TrainReport local;
    TrainReport& rep = report ? *report : local;
    rep = TrainReport{};
    rep.initial_val_loss = validation_loss(model);
    rep.best_val_loss = rep.initial_val_loss;
    Interpreter<Scalar> best = model;

    Adam<Scalar> opt(model.net, cfg.adam);
    std::vector<std::size_t> order = train;
    long step = 0;
    for (int epoch = 1; epoch <= cfg.epochs; ++epoch) {
        opt.set_learning_rate(cfg.adam.learning_rate * std::pow(cfg.lr_decay, epoch - 1));
        Rng shuffler = Rng::stream(cfg.seed, static_cast<std::uint64_t>(epoch));
        shuffler.shuffle(order);
        double epoch_loss = 0.0;
        for (std::size_t start = 0; start < order.size(); start += static_cast<std::size_t>(cfg.batch_size)) {
            const std::vector<std::size_t> batch(order.begin() + static_cast<std::ptrdiff_t>(start),
                                                 order.begin() + static_cast<std::ptrdiff_t>(std::min(order.size(), start + static_cast<std::size_t>(cfg.batch_size))));
            const auto inputs = standardise_inputs(
                model.net, detail::gather_inputs<Scalar>(clean, batch,
                                                         detail::noise_for(cfg.noise_levels, cfg.seed, static_cast<std::uint64_t>(epoch), batch),
                                                         cfg.threads, refiner));
            Eigen::MatrixXd batch_targets(std_targets.rows(), static_cast<Eigen::Index>(batch.size()));
            for (std::size_t j = 0; j < batch.size(); ++j) {
                batch_targets.col(static_cast<Eigen::Index>(j)) = std_targets.col(static_cast<Eigen::Index>(batch[j]));
            }
            MlpGradients<Scalar> grads = MlpGradients<Scalar>::zeros_like(model.net);
            const double loss = stage2_batch_loss<Scalar>(model, inputs, batch_targets, cfg.group_weights, &grads);
            ++step;
            detail::check_finite(loss, step, "stage II");
            opt.step(model.net, grads);
            if (!model.net.all_finite()) {
                throw TrainingError("stage II: non-finite parameters", step);
            }
            epoch_loss += loss * static_cast<double>(batch.size());
        }
        const double val_loss = validation_loss(model);
        detail::check_finite(val_loss, step, "stage II validation");
        rep.trace.push_back({epoch, epoch_loss / static_cast<double>(order.size()), val_loss});
        if (val_loss < rep.best_val_loss) {
            rep.best_val_loss = val_loss;
            rep.best_epoch = epoch;
            best = model;
        }
    }
    return best;
}

// ---------------------------------------------------------------------------
// Prediction

/// Predictions for a batch of raw (unstandardised) stacked heatmaps.
template <typename Scalar>
std::vector<Prediction> predict_batch(const Interpreter<Scalar>& model, const typename Mlp<Scalar>::Matrix& raw)
{
    if (raw.rows() != model.input_width()) {
        throw ArgumentError("predict: input width does not match the interpreter");
    }
    const DenormalGuard ftz;
    std::vector<Prediction> out;
    out.reserve(static_cast<std::size_t>(raw.cols()));
    for (Eigen::Index c = 0; c < raw.cols(); c += detail::kEvalChunk) {
        const Eigen::Index w = std::min(detail::kEvalChunk, raw.cols() - c);
        const auto y = destandardise_outputs(model.net, forward_batch(model.net, standardise_inputs(model.net, typename Mlp<Scalar>::Matrix(raw.middleCols(c, w)))));
        for (Eigen::Index j = 0; j < w; ++j) {
            out.push_back(prediction_from_output(y.col(j).template cast<double>(), model.n_bases));
        }
    }
    return out;
}

template <typename Scalar>
Prediction predict_params(const Interpreter<Scalar>& model, const HeatmapStack& hm)
{
    if (!(hm.geometry == model.geometry) || hm.channels != model.n_keypoints) {
        throw ArgumentError("predict_params: heatmap geometry does not match the interpreter's training geometry");
    }
    const auto col = stack_to_column<Scalar>(hm);
    if (!col.allFinite()) {
        throw ArgumentError("predict_params: heatmaps contain non-finite values");
    }
    return predict_batch(model, col).front();
}

/**
 * Mean distance over labelled keypoints between `labels` and the projection
 * of `pred`. Keypoints behind the depth epsilon count kDomainFailureDistance.
 */
inline double mean_reprojection_distance(const SkeletonSpec& spec, const Prediction& pred, const LabeledKeypoints& labels,
                                         int* counted = nullptr)
{
    const auto layer = projection_layer(spec, pred.params, pred.pose);
    double total = 0.0;
    int n = 0;
    for (int i = 0; i < spec.n_keypoints(); ++i) {
        if (!labels.visible[static_cast<std::size_t>(i)]) {
            continue;
        }
        ++n;
        total += layer.camera(2, i) > kDepthEpsilon ? (layer.keypoints.col(i) - labels.x.coords.col(i)).norm()
                                                     : kDomainFailureDistance;
    }
    if (counted) {
        *counted = n;
    }
    return n > 0 ? total / n : 0.0;
}

// ---------------------------------------------------------------------------
// Stage III: 2D supervision through the projection layer

/**
 * @brief Reprojection loss for one batch, with parameter gradients when requested.
 *
 * Per sample: the mean squared 2D error over labelled keypoints; keypoints
 * whose predicted depth is at or below the depth epsilon instead contribute
 * (kBarrierDepth - Z)^2.
 */
template <typename Scalar>
double stage3_batch_loss(const Interpreter<Scalar>& model, const typename Mlp<Scalar>::Matrix& std_inputs,
                         const std::vector<const LabeledKeypoints*>& labels, const SkeletonSpec& spec,
                         MlpGradients<Scalar>* grads)
{
    const int k = model.n_bases;
    const int n = model.n_keypoints;
    const auto batch = static_cast<Eigen::Index>(labels.size());
    if (std_inputs.cols() != batch) {
        throw ArgumentError("stage3_batch_loss: input and label counts differ");
    }
    MlpTape<Scalar> tape;
    const auto y = forward_batch(model.net, std_inputs, grads ? &tape : nullptr);
    const Eigen::MatrixXd out = destandardise_outputs(model.net, y).template cast<double>();
    Eigen::MatrixXd upstream(out.rows(), batch);
    double loss = 0.0;
    for (Eigen::Index b = 0; b < batch; ++b) {
        Prediction p;
        p.params.alpha = out.col(b).head(k);
        p.pose.omega = out.col(b).segment<3>(k);
        p.pose.t = out.col(b).segment<3>(k + 3);
        p.pose.f = std::exp(out(k + 6, b));
        const auto layer = projection_layer(spec, p.params, p.pose);
        const auto& lab = *labels[static_cast<std::size_t>(b)];
        int visible = 0;
        for (auto v : lab.visible) {
            visible += v ? 1 : 0;
        }
        const double norm = 1.0 / (static_cast<double>(std::max(visible, 1)) * static_cast<double>(batch));
        Eigen::VectorXd g = Eigen::VectorXd::Zero(k + kPoseParams);
        for (int i = 0; i < n; ++i) {
            const double z = layer.camera(2, i);
            if (z <= kDepthEpsilon) {
                const double gap = kBarrierDepth - z;
                loss += norm * gap * gap;
                g -= (2.0 * norm * gap) * layer.depth_jacobian.row(i).transpose();
            } else if (lab.visible[static_cast<std::size_t>(i)]) {
                const Eigen::Vector2d r = layer.keypoints.col(i) - lab.x.coords.col(i);
                loss += norm * r.squaredNorm();
                g += (2.0 * norm) * layer.jacobian.middleRows<2>(2 * i).transpose() * r;
            }
        }
        g(k + 6) *= p.pose.f;
        upstream.col(b) = g.cwiseProduct(model.net.output_scale.template cast<double>());
    }
    if (grads) {
        backward_batch(model.net, tape, typename Mlp<Scalar>::Matrix(upstream.cast<Scalar>()), *grads);
    }
    return loss;
}

/**
 * @brief Fine-tunes the interpreter from 2D keypoint labels only.
 *
 * Gradients flow from the reprojection error through the projection layer
 * into the network. The checkpoint with the lowest validation loss (the
 * starting model included) is returned.
 */
template <typename Scalar = float>
Interpreter<Scalar> finetune_projection_stage3(const Interpreter<Scalar>& model, const Dataset2D& ds, const SkeletonSpec& spec,
                                               const TrainConfig& cfg, FinetuneReport* report = nullptr,
                                               const Refiner<float>* refiner = nullptr)
{
    if (ds.records.empty()) {
        throw ArgumentError("finetune_projection_stage3: dataset is empty");
    }
    const DenormalGuard ftz;
    cfg.validate();
    if (ds.n_keypoints != model.n_keypoints || spec.n_keypoints() != model.n_keypoints || spec.n_bases() != model.n_bases
        || !(ds.render.geometry == model.geometry)) {
        throw ArgumentError("finetune_projection_stage3: dataset, spec and interpreter disagree");
    }
    if (model.refined_input != (refiner != nullptr)) {
        throw ArgumentError("finetune_projection_stage3: interpreter input wiring needs a matching refiner argument");
    }
    const HeatmapProvider clean = [&ds](std::size_t i) { return heatmaps_for(ds, i); };
    const auto [train, val] = detail::split_indices(ds.size(), cfg.validation_fraction);

    Interpreter<Scalar> current = model;
    const auto val_raw = detail::gather_inputs<Scalar>(clean, val, detail::noise_for(cfg.noise_levels, cfg.seed, kValidationEpoch, val),
                                                       cfg.threads, refiner);
    std::vector<const LabeledKeypoints*> val_labels;
    for (auto i : val) {
        val_labels.push_back(&ds.records[i]);
    }
    const auto validation = [&](const Interpreter<Scalar>& m, double* distance) {
        double total = 0.0;
        double dist = 0.0;
        for (Eigen::Index c = 0; c < val_raw.cols(); c += detail::kEvalChunk) {
            const Eigen::Index w = std::min(detail::kEvalChunk, val_raw.cols() - c);
            const typename Mlp<Scalar>::Matrix raw = val_raw.middleCols(c, w);
            const std::vector<const LabeledKeypoints*> labs(val_labels.begin() + c, val_labels.begin() + c + w);
            total += stage3_batch_loss<Scalar>(m, standardise_inputs(m.net, raw), labs, spec, nullptr) * static_cast<double>(w);
            const auto preds = predict_batch(m, raw);
            for (Eigen::Index j = 0; j < w; ++j) {
                dist += mean_reprojection_distance(spec, preds[static_cast<std::size_t>(j)], *labs[static_cast<std::size_t>(j)]);
            }
        }
        if (distance) {
            *distance = dist / static_cast<double>(val_raw.cols());
        }
        return total / static_cast<double>(val_raw.cols());
    };

    FinetuneReport local;
    FinetuneReport& rep = report ? *report : local;
    rep = FinetuneReport{};
    rep.validation_size = val.size();
    double best_loss = validation(current, &rep.error_before);
    rep.error_after = rep.error_before;
    Interpreter<Scalar> best = current;

    Adam<Scalar> opt(current.net, cfg.adam);
    std::vector<std::size_t> order = train;
    long step = 0;
    for (int epoch = 1; epoch <= cfg.epochs; ++epoch) {
        opt.set_learning_rate(cfg.adam.learning_rate * std::pow(cfg.lr_decay, epoch - 1));
        Rng shuffler = Rng::stream(cfg.seed, static_cast<std::uint64_t>(epoch));
        shuffler.shuffle(order);
        double epoch_loss = 0.0;
        for (std::size_t start = 0; start < order.size(); start += static_cast<std::size_t>(cfg.batch_size)) {
            const std::vector<std::size_t> batch(order.begin() + static_cast<std::ptrdiff_t>(start),
                                                 order.begin() + static_cast<std::ptrdiff_t>(std::min(order.size(), start + static_cast<std::size_t>(cfg.batch_size))));
            const auto inputs = standardise_inputs(
                current.net, detail::gather_inputs<Scalar>(clean, batch,
                                                           detail::noise_for(cfg.noise_levels, cfg.seed, static_cast<std::uint64_t>(epoch), batch),
                                                           cfg.threads, refiner));
            std::vector<const LabeledKeypoints*> labs;
            for (auto i : batch) {
                labs.push_back(&ds.records[i]);
            }
            MlpGradients<Scalar> grads = MlpGradients<Scalar>::zeros_like(current.net);
            const double loss = stage3_batch_loss<Scalar>(current, inputs, labs, spec, &grads);
            ++step;
            detail::check_finite(loss, step, "stage III");
            opt.step(current.net, grads);
            if (!current.net.all_finite()) {
                throw TrainingError("stage III: non-finite parameters", step);
            }
            epoch_loss += loss * static_cast<double>(batch.size());
        }
        double distance = 0.0;
        const double val_loss = validation(current, &distance);
        detail::check_finite(val_loss, step, "stage III validation");
        rep.trace.push_back({epoch, epoch_loss / static_cast<double>(order.size()), val_loss});
        if (val_loss < best_loss) {
            best_loss = val_loss;
            rep.best_epoch = epoch;
            rep.error_after = distance;
            best = current;
        }
    }
    return best;
}

// ---------------------------------------------------------------------------
// Refiner training

/**
 * @brief Trains the denoising refiner on (corrupted, clean) heatmap pairs.
 *
 * Corruption levels are drawn per sample from cfg.noise_levels. The target
 * keeps the noisy input only where the clean map carries signal; squared
 * errors are weighted up by the clean value so peaks are never attenuated.
 * Gain dilation is applied at inference only.
 */
template <typename Scalar = float>
Refiner<Scalar> train_refiner(const HeatmapProvider& clean, std::size_t count, int channels, const HeatmapGeometry& geometry,
                              const TrainConfig& cfg, const RefinerShape& shape, TrainReport* report = nullptr)
{
    if (count == 0) {
        throw ArgumentError("train_refiner: no training pairs");
    }
    const DenormalGuard ftz;
    cfg.validate();
    auto r = make_refiner<Scalar>(channels, geometry, shape, cfg.seed);
    const auto [train, val] = detail::split_indices(count, cfg.validation_fraction);

    {
        const auto sample = detail::statistics_sample(train, detail::kStatisticsSamples);
        const auto noisy = heatmap_inputs<Scalar>(clean, sample, detail::noise_for(cfg.noise_levels, cfg.seed, kStatisticsEpoch, sample), cfg.threads);
        detail::column_statistics<Scalar>(refiner_features(r, noisy), kInputStdFloor, r.net.input_mean, r.net.input_scale);
    }

    const auto batch_loss = [&](const Refiner<Scalar>& m, const typename Mlp<Scalar>::Matrix& noisy,
                                const typename Mlp<Scalar>::Matrix& target, MlpGradients<Scalar>* grads) {
        MlpTape<Scalar> tape;
        const auto y = forward_batch(m.net, standardise_inputs(m.net, refiner_features(m, noisy)), grads ? &tape : nullptr);
        const typename Mlp<Scalar>::Matrix gain = refiner_gain(m, y);
        const typename Mlp<Scalar>::Matrix signal
            = noisy.cwiseProduct((target.array() >= Scalar(kRefinerSignalLevel)).template cast<Scalar>().matrix());
        const typename Mlp<Scalar>::Matrix diff = gain.cwiseProduct(noisy) - signal;
        const typename Mlp<Scalar>::Matrix weight = (Scalar(kRefinerPeakWeight) * target).array() + Scalar(1);
        const double denom = static_cast<double>(diff.size());
        const double loss = (weight.template cast<double>().array() * diff.template cast<double>().array().square()).sum() / denom;
        if (grads) {
            const typename Mlp<Scalar>::Matrix up
                = ((Scalar(2.0 / denom) * weight.cwiseProduct(diff).cwiseProduct(noisy)).array()
                   * refiner_gain_slope<Scalar>(gain).array()).colwise()
                  * m.net.output_scale.array();
            backward_batch(m.net, tape, up, *grads);
        }
        return loss;
    };

    const auto val_noise = detail::noise_for(cfg.noise_levels, cfg.seed, kValidationEpoch, val);
    const auto validation = [&](const Refiner<Scalar>& m) {
        double total = 0.0;
        for (std::size_t c = 0; c < val.size(); c += static_cast<std::size_t>(detail::kEvalChunk)) {
            const std::size_t w = std::min<std::size_t>(static_cast<std::size_t>(detail::kEvalChunk), val.size() - c);
            const std::vector<std::size_t> idx(val.begin() + static_cast<std::ptrdiff_t>(c), val.begin() + static_cast<std::ptrdiff_t>(c + w));
            const std::vector<NoiseConfig> nz(val_noise.begin() + static_cast<std::ptrdiff_t>(c), val_noise.begin() + static_cast<std::ptrdiff_t>(c + w));
            total += batch_loss(m, heatmap_inputs<Scalar>(clean, idx, nz, cfg.threads),
                                heatmap_inputs<Scalar>(clean, idx, std::vector<NoiseConfig>(w), cfg.threads), nullptr)
                     * static_cast<double>(w);
        }
        return total / static_cast<double>(val.size());
    };

    TrainReport local;
    TrainReport& rep = report ? *report : local;
    rep = TrainReport{};
    rep.initial_val_loss = validation(r);
    rep.best_val_loss = rep.initial_val_loss;
    Refiner<Scalar> best = r;

    Adam<Scalar> opt(r.net, cfg.adam);
    std::vector<std::size_t> order = train;
    long step = 0;
    for (int epoch = 1; epoch <= cfg.epochs; ++epoch) {
        opt.set_learning_rate(cfg.adam.learning_rate * std::pow(cfg.lr_decay, epoch - 1));
        Rng shuffler = Rng::stream(cfg.seed, static_cast<std::uint64_t>(epoch));
        shuffler.shuffle(order);
        double epoch_loss = 0.0;
        for (std::size_t start = 0; start < order.size(); start += static_cast<std::size_t>(cfg.batch_size)) {
            const std::vector<std::size_t> batch(order.begin() + static_cast<std::ptrdiff_t>(start),
                                                 order.begin() + static_cast<std::ptrdiff_t>(std::min(order.size(), start + static_cast<std::size_t>(cfg.batch_size))));
            const auto noisy = heatmap_inputs<Scalar>(clean, batch, detail::noise_for(cfg.noise_levels, cfg.seed, static_cast<std::uint64_t>(epoch), batch), cfg.threads);
            const auto target = heatmap_inputs<Scalar>(clean, batch, std::vector<NoiseConfig>(batch.size()), cfg.threads);
            MlpGradients<Scalar> grads = MlpGradients<Scalar>::zeros_like(r.net);
            const double loss = batch_loss(r, noisy, target, &grads);
            ++step;
            detail::check_finite(loss, step, "refiner");
            opt.step(r.net, grads);
            if (!r.net.all_finite()) {
                throw TrainingError("refiner: non-finite parameters", step);
            }
            epoch_loss += loss * static_cast<double>(batch.size());
        }
        const double val_loss = validation(r);
        rep.trace.push_back({epoch, epoch_loss / static_cast<double>(order.size()), val_loss});
        if (val_loss < rep.best_val_loss) {
            rep.best_val_loss = val_loss;
            rep.best_epoch = epoch;
            best = r;
        }
    }
    return best;
}

template <typename Scalar = float>
Refiner<Scalar> train_refiner(const Dataset& ds, const TrainConfig& cfg, const RefinerShape& shape, TrainReport* report = nullptr)
{
    return train_refiner<Scalar>([&ds](std::size_t i) { return heatmaps_for(ds, i); }, ds.size(), ds.spec.n_keypoints(),
                                 ds.render.geometry, cfg, shape, report);
}

// ---------------------------------------------------------------------------
// Persistence

inline std::map<std::string, std::string> geometry_metadata(const HeatmapGeometry& g)
{
    return {{"grid_width", std::to_string(g.width)},
            {"grid_height", std::to_string(g.height)},
            {"cell_size", format_exact(g.cell_size)}};
}

inline HeatmapGeometry geometry_from_metadata(const std::map<std::string, std::string>& meta, const std::string& path)
{
    try {
        HeatmapGeometry g;
        g.width = std::stoi(meta.at("grid_width"));
        g.height = std::stoi(meta.at("grid_height"));
        g.cell_size = std::stod(meta.at("cell_size"));
        return g;
    } catch (const std::logic_error&) {
        throw IntegrityError("'" + path + "': missing or malformed grid metadata");
    }
}

template <typename Scalar>
void save_interpreter(const Interpreter<Scalar>& model, const std::string& path,
                      std::map<std::string, std::string> extra = {})
{
    auto meta = geometry_metadata(model.geometry);
    meta["kind"] = "interpreter";
    meta["n_keypoints"] = std::to_string(model.n_keypoints);
    meta["n_bases"] = std::to_string(model.n_bases);
    meta["outputs"] = "alpha,omega,t,log_f";
    meta["input"] = model.refined_input ? "refined" : "raw";
    meta.merge(extra);
    save_mlp(model.net, meta, path);
}

template <typename Scalar = float>
Interpreter<Scalar> load_interpreter(const std::string& path, std::map<std::string, std::string>* metadata = nullptr)
{
    std::map<std::string, std::string> meta;
    Interpreter<Scalar> model;
    model.net = load_mlp<Scalar>(path, &meta);
    if (meta["kind"] != "interpreter") {
        throw IntegrityError("'" + path + "' is not an interpreter model");
    }
    model.geometry = geometry_from_metadata(meta, path);
    try {
        model.n_keypoints = std::stoi(meta.at("n_keypoints"));
        model.n_bases = std::stoi(meta.at("n_bases"));
    } catch (const std::logic_error&) {
        throw IntegrityError("'" + path + "': missing or malformed interpreter metadata");
    }
    model.refined_input = meta["input"] == "refined";
    if (model.net.input_width() != model.input_width() || model.net.output_width() != model.output_width()) {
        throw IntegrityError("'" + path + "': network widths disagree with interpreter metadata");
    }
    if (metadata) {
        *metadata = meta;
    }
    return model;
}

template <typename Scalar>
void save_refiner(const Refiner<Scalar>& r, const std::string& path)
{
    auto meta = geometry_metadata(r.geometry);
    meta["kind"] = "refiner";
    meta["channels"] = std::to_string(r.channels);
    meta["projection_dim"] = std::to_string(r.projection_dim);
    meta["projection_seed"] = std::to_string(r.projection_seed);
    save_mlp(r.net, meta, path);
}

template <typename Scalar = float>
Refiner<Scalar> load_refiner(const std::string& path)
{
    std::map<std::string, std::string> meta;
    Refiner<Scalar> r;
    r.net = load_mlp<Scalar>(path, &meta);
    if (meta["kind"] != "refiner") {
        throw IntegrityError("'" + path + "' is not a refiner model");
    }
    r.geometry = geometry_from_metadata(meta, path);
    try {
        r.channels = std::stoi(meta.at("channels"));
        r.projection_dim = std::stoi(meta.at("projection_dim"));
        r.projection_seed = std::stoull(meta.at("projection_seed"));
    } catch (const std::logic_error&) {
        throw IntegrityError("'" + path + "': missing or malformed refiner metadata");
    }
    if (r.projection_dim > 0) {
        r.projection = random_projection<Scalar>(r.projection_dim, r.data_width(), r.projection_seed);
    }
    if (r.net.input_width() != (r.projection_dim > 0 ? r.projection_dim : r.data_width())
        || r.net.output_width() != r.data_width()) {
        throw IntegrityError("'" + path + "': network widths disagree with refiner metadata");
    }
    return r;
}

} // namespace skelterp

#endif // SKELTERP_INTERPRETER_HPP
