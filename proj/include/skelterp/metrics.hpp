/*
 * skelterp - 3D skeleton recovery from 2D keypoint heatmaps.
 *
 * File: include/skelterp/metrics.hpp
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

#ifndef SKELTERP_METRICS_HPP
#define SKELTERP_METRICS_HPP

#include "skelterp/camera.hpp"
#include "skelterp/common.hpp"
#include "skelterp/rotation.hpp"
#include "skelterp/skeleton.hpp"

#include "Eigen/Core"

#include <algorithm>
#include <cmath>
#include <numbers>
#include <numeric>
#include <ostream>
#include <string>
#include <vector>

namespace skelterp {

struct CurveSeries
{
    std::vector<double> thresholds;
    std::vector<double> values;
    std::string label;
};

namespace detail {

inline void check_thresholds(const std::vector<double>& t)
{
    if (t.empty()) {
        throw MetricError("curve thresholds must not be empty");
    }
    for (std::size_t i = 0; i < t.size(); ++i) {
        if (!std::isfinite(t[i]) || (i > 0 && !(t[i] > t[i - 1]))) {
            throw MetricError("curve thresholds must be finite and strictly ascending");
        }
    }
}

inline void check_pairs(std::size_t a, std::size_t b, const char* what)
{
    if (a != b) {
        throw MetricError(std::string(what) + ": prediction and ground-truth lists differ in length");
    }
}

inline void check_keypoints(const Keypoints2D& a, const Keypoints2D& b, const char* what)
{
    if (a.n_keypoints() != b.n_keypoints()) {
        throw MetricError(std::string(what) + ": keypoint counts differ");
    }
}

inline double keypoint_distance(const Keypoints2D& a, const Keypoints2D& b, int i)
{
    const double dx = a.coords(0, i) - b.coords(0, i);
    const double dy = a.coords(1, i) - b.coords(1, i);
    return std::sqrt(dx * dx + dy * dy);
}

} // namespace detail

/// Diagonal of the 2D bounding box of the keypoints.
inline double bbox_diagonal(const Keypoints2D& x)
{
    if (x.n_keypoints() == 0) {
        return 0.0;
    }
    return (x.coords.rowwise().maxCoeff() - x.coords.rowwise().minCoeff()).norm();
}

/// Fraction of keypoints with distance <= r * normalizer, for each threshold r.
inline CurveSeries pck_curve(const std::vector<Keypoints2D>& pred, const std::vector<Keypoints2D>& gt,
                             const std::vector<double>& normalizer, const std::vector<double>& thresholds,
                             const std::string& label = "pck")
{
    detail::check_pairs(pred.size(), gt.size(), "pck");
    detail::check_pairs(pred.size(), normalizer.size(), "pck");
    detail::check_thresholds(thresholds);
    std::vector<long> hits(thresholds.size(), 0);
    long total = 0;
    for (std::size_t s = 0; s < pred.size(); ++s) {
        detail::check_keypoints(pred[s], gt[s], "pck");
        if (!(normalizer[s] > 0.0)) {
            throw MetricError("pck: normalizer must be positive");
        }
        for (int i = 0; i < pred[s].n_keypoints(); ++i) {
            const double d = detail::keypoint_distance(pred[s], gt[s], i);
            for (std::size_t t = 0; t < thresholds.size(); ++t) {
                hits[t] += d <= thresholds[t] * normalizer[s] ? 1 : 0;
            }
            ++total;
        }
    }
    CurveSeries c{thresholds, std::vector<double>(thresholds.size(), 0.0), label};
    for (std::size_t t = 0; t < thresholds.size(); ++t) {
        c.values[t] = total > 0 ? static_cast<double>(hits[t]) / static_cast<double>(total) : 0.0;
    }
    return c;
}

/// Fraction of keypoints within 1.5 tau of ground truth; tau is given per keypoint index.
inline double pcp(const std::vector<Keypoints2D>& pred, const std::vector<Keypoints2D>& gt, const std::vector<double>& tau)
{
    detail::check_pairs(pred.size(), gt.size(), "pcp");
    for (double t : tau) {
        if (!(t > 0.0)) {
            throw MetricError("pcp: tolerances must be positive");
        }
    }
    long hits = 0;
    long total = 0;
    for (std::size_t s = 0; s < pred.size(); ++s) {
        detail::check_keypoints(pred[s], gt[s], "pcp");
        if (static_cast<int>(tau.size()) != pred[s].n_keypoints()) {
            throw MetricError("pcp: one tolerance per keypoint is required");
        }
        for (int i = 0; i < pred[s].n_keypoints(); ++i) {
            const double d = detail::keypoint_distance(pred[s], gt[s], i);
            hits += d <= 1.5 * tau[static_cast<std::size_t>(i)] ? 1 : 0;
            ++total;
        }
    }
    return total > 0 ? static_cast<double>(hits) / static_cast<double>(total) : 0.0;
}

/**
 * Mean over keypoints of min(distance / unit, bound). With `unit` set to the
 * heatmap cell size the distances are in grid cells.
 */
inline double average_error(const std::vector<Keypoints2D>& pred, const std::vector<Keypoints2D>& gt, double bound = 5.0,
                            double unit = 1.0)
{
    detail::check_pairs(pred.size(), gt.size(), "average_error");
    if (!(bound > 0.0) || !(unit > 0.0)) {
        throw MetricError("average_error: bound and unit must be positive");
    }
    double sum = 0.0;
    long total = 0;
    for (std::size_t s = 0; s < pred.size(); ++s) {
        detail::check_keypoints(pred[s], gt[s], "average_error");
        for (int i = 0; i < pred[s].n_keypoints(); ++i) {
            sum += std::min(detail::keypoint_distance(pred[s], gt[s], i) / unit, bound);
            ++total;
        }
    }
    return total > 0 ? sum / static_cast<double>(total) : 0.0;
}

/// RMSE over the 3N coordinates of the independently canonicalised shapes.
inline double rmse_structure(const StructParams& pred, const StructParams& gt, const SkeletonSpec& spec)
{
    const Eigen::Matrix3Xd a = canonicalize(compose_shape(spec, pred)).coords;
    const Eigen::Matrix3Xd b = canonicalize(compose_shape(spec, gt)).coords;
    return std::sqrt((a - b).squaredNorm() / static_cast<double>(a.size()));
}

/// Fraction of values <= each threshold.
inline CurveSeries recall_curve(const std::vector<double>& values, const std::vector<double>& thresholds,
                                const std::string& label)
{
    if (values.empty()) {
        throw MetricError("recall curve: no values");
    }
    detail::check_thresholds(thresholds);
    CurveSeries c{thresholds, std::vector<double>(thresholds.size(), 0.0), label};
    for (std::size_t t = 0; t < thresholds.size(); ++t) {
        long hits = 0;
        for (double v : values) {
            hits += v <= thresholds[t] ? 1 : 0;
        }
        c.values[t] = static_cast<double>(hits) / static_cast<double>(values.size());
    }
    return c;
}

inline CurveSeries rmse_recall_curve(const std::vector<double>& rmse, const std::vector<double>& thresholds,
                                     const std::string& label = "rmse_recall")
{
    return recall_curve(rmse, thresholds, label);
}

/// Mean of the curve values over its threshold grid.
inline double average_recall(const CurveSeries& curve)
{
    if (curve.values.empty()) {
        throw MetricError("average_recall: empty curve");
    }
    return std::accumulate(curve.values.begin(), curve.values.end(), 0.0) / static_cast<double>(curve.values.size());
}

/// RMSE thresholds 0.01, 0.02, ..., 0.20.
inline std::vector<double> default_rmse_thresholds()
{
    std::vector<double> t;
    for (int i = 1; i <= 20; ++i) {
        t.push_back(0.01 * i);
    }
    return t;
}

inline std::vector<double> default_azimuth_thresholds() { return {5.0, 10.0, 15.0, 22.5, 30.0}; }

/// Pitch within this many radians of +-90 degrees counts as gimbal degenerate.
inline constexpr double kGimbalTolerance = 1e-6;

/**
 * @brief Azimuth in degrees, in (-180, 180].
 *
 * R is decomposed as Rz(roll) * Rx(pitch) * Ry(yaw) and the yaw is returned.
 * At gimbal lock yaw and roll are not separable; roll is taken as zero and
 * `gimbal` is set.
 */
inline double azimuth_deg(const Eigen::Matrix3d& r, bool* gimbal = nullptr)
{
    const double pitch = std::asin(std::clamp(r(2, 1), -1.0, 1.0));
    const bool locked = std::abs(std::abs(pitch) - std::numbers::pi / 2) < kGimbalTolerance;
    if (gimbal) {
        *gimbal = locked;
    }
    double yaw = 0.0;
    if (!locked) {
        yaw = std::atan2(-r(2, 0), r(2, 2));
    } else if (pitch > 0.0) {
        yaw = std::atan2(r(1, 0), r(0, 0));
    } else {
        yaw = std::atan2(-r(1, 0), r(0, 0));
    }
    double deg = yaw * 180.0 / std::numbers::pi;
    if (deg <= -180.0) {
        deg += 360.0;
    }
    return deg;
}

/// Circular difference of two angles in degrees, in [0, 180].
inline double circular_difference_deg(double a, double b)
{
    double d = std::fmod(std::abs(a - b), 360.0);
    return d > 180.0 ? 360.0 - d : d;
}

inline double azimuth_error(const CameraPose& pred, const CameraPose& gt, bool* gimbal = nullptr)
{
    bool g1 = false;
    bool g2 = false;
    const double e = circular_difference_deg(azimuth_deg(pred.rotation(), &g1), azimuth_deg(gt.rotation(), &g2));
    if (gimbal) {
        *gimbal = g1 || g2;
    }
    return e;
}

inline double azimuth_recall(const std::vector<double>& errors, double delta)
{
    return recall_curve(errors, {delta}, "azimuth").values.front();
}

inline CurveSeries azimuth_recall_curve(const std::vector<double>& errors, const std::vector<double>& deltas,
                                        const std::string& label = "azimuth_recall")
{
    return recall_curve(errors, deltas, label);
}

enum class RetrievalMode
{
    ByStructure,
    ByViewpoint,
};

struct RetrievalKey
{
    Eigen::VectorXd alpha;
    Eigen::Matrix3d rotation = Eigen::Matrix3d::Identity();
};

struct Neighbor
{
    std::size_t index = 0;
    double distance = 0.0;
};

inline double retrieval_distance(const RetrievalKey& a, const RetrievalKey& b, RetrievalMode mode)
{
    if (mode == RetrievalMode::ByStructure) {
        if (a.alpha.size() != b.alpha.size()) {
            throw MetricError("retrieval: structure vectors differ in length");
        }
        return (a.alpha - b.alpha).norm();
    }
    return geodesic_distance(a.rotation, b.rotation);
}

/// The k nearest database entries, by ascending distance then index.
inline std::vector<Neighbor> retrieve_nearest(const RetrievalKey& query, const std::vector<RetrievalKey>& database,
                                              RetrievalMode mode, std::size_t k)
{
    if (database.empty()) {
        throw MetricError("retrieve_nearest: empty database");
    }
    if (k < 1) {
        throw MetricError("retrieve_nearest: k must be at least 1");
    }
    std::vector<Neighbor> all(database.size());
    for (std::size_t i = 0; i < database.size(); ++i) {
        all[i] = {i, retrieval_distance(query, database[i], mode)};
    }
    std::stable_sort(all.begin(), all.end(), [](const Neighbor& a, const Neighbor& b) { return a.distance < b.distance; });
    all.resize(std::min(k, all.size()));
    return all;
}

/// CSV with columns threshold,value,label.
inline void write_curves_csv(std::ostream& out, const std::vector<CurveSeries>& curves)
{
    out << "threshold,value,label\n";
    for (const auto& c : curves) {
        for (std::size_t i = 0; i < c.thresholds.size(); ++i) {
            out << format_exact(c.thresholds[i]) << ',' << format_exact(c.values[i]) << ',' << c.label << '\n';
        }
    }
}

} // namespace skelterp

#endif // SKELTERP_METRICS_HPP
