/*
 * skelterp - 3D skeleton recovery from 2D keypoint heatmaps.
 *
 * File: include/skelterp/skeleton.hpp
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

#ifndef SKELTERP_SKELETON_HPP
#define SKELTERP_SKELETON_HPP

#include "skelterp/common.hpp"

#include "Eigen/Core"
#include "json.hpp"

#include <fstream>
#include <sstream>
#include <string>
#include <utility>
#include <vector>

namespace skelterp {

/**
 * @brief Per-category skeleton: keypoints as a weighted sum of base shapes.
 *
 * base_shapes[0] is the category mean shape in the canonical object frame
 * (centroid at the origin, bounding-box diagonal 1). The remaining shapes are
 * deformation directions; the bundled specs store them mean-free.
 */
struct SkeletonSpec
{
    std::string name;
    std::vector<std::string> keypoint_names;
    std::vector<std::pair<int, int>> connections;
    std::vector<Eigen::Matrix3Xd> base_shapes;
    std::vector<Interval> alpha_ranges;

    int n_keypoints() const { return base_shapes.empty() ? 0 : static_cast<int>(base_shapes.front().cols()); }
    int n_bases() const { return static_cast<int>(base_shapes.size()); }

    /// Throws ConfigError naming the offending field.
    void validate() const;

    friend bool operator==(const SkeletonSpec& a, const SkeletonSpec& b)
    {
        if (a.name != b.name || a.keypoint_names != b.keypoint_names || a.connections != b.connections
            || a.alpha_ranges != b.alpha_ranges || a.base_shapes.size() != b.base_shapes.size()) {
            return false;
        }
        for (std::size_t k = 0; k < a.base_shapes.size(); ++k) {
            if (a.base_shapes[k].cols() != b.base_shapes[k].cols() || a.base_shapes[k] != b.base_shapes[k]) {
                return false;
            }
        }
        return true;
    }
};

struct StructParams
{
    Eigen::VectorXd alpha;
};

struct Shape3D
{
    Eigen::Matrix3Xd coords;

    int n_keypoints() const { return static_cast<int>(coords.cols()); }
};

inline void SkeletonSpec::validate() const
{
    if (base_shapes.empty()) {
        throw ConfigError("skeleton spec: base_shapes must hold at least one shape");
    }
    const int n = n_keypoints();
    if (n < 4) {
        throw ConfigError("skeleton spec: base_shapes must have at least 4 keypoint columns, got " + std::to_string(n));
    }
    for (std::size_t k = 0; k < base_shapes.size(); ++k) {
        if (base_shapes[k].cols() != n) {
            throw ConfigError("skeleton spec: base_shapes[" + std::to_string(k) + "] has "
                              + std::to_string(base_shapes[k].cols()) + " columns, expected " + std::to_string(n));
        }
        if (!base_shapes[k].allFinite()) {
            throw ConfigError("skeleton spec: base_shapes[" + std::to_string(k) + "] has non-finite entries");
        }
    }
    if (static_cast<int>(keypoint_names.size()) != n) {
        throw ConfigError("skeleton spec: keypoint_names has " + std::to_string(keypoint_names.size())
                          + " entries, expected " + std::to_string(n));
    }
    for (std::size_t c = 0; c < connections.size(); ++c) {
        const auto [a, b] = connections[c];
        if (a < 0 || a >= n || b < 0 || b >= n) {
            throw ConfigError("skeleton spec: connections[" + std::to_string(c) + "] index out of range [0, "
                              + std::to_string(n) + ")");
        }
    }
    if (alpha_ranges.size() != base_shapes.size()) {
        throw ConfigError("skeleton spec: alpha_ranges has " + std::to_string(alpha_ranges.size())
                          + " entries, expected " + std::to_string(base_shapes.size()));
    }
    for (std::size_t k = 0; k < alpha_ranges.size(); ++k) {
        if (!alpha_ranges[k].valid()) {
            throw ConfigError("skeleton spec: alpha_ranges[" + std::to_string(k) + "] is empty or non-finite");
        }
    }
    if (!alpha_ranges[0].contains(1.0)) {
        throw ConfigError("skeleton spec: alpha_ranges[0] must contain 1.0");
    }
}

/// Y = sum_k alpha_k B_k.
inline Shape3D compose_shape(const SkeletonSpec& spec, const StructParams& params)
{
    if (params.alpha.size() != spec.n_bases()) {
        throw ArgumentError("compose_shape: alpha has " + std::to_string(params.alpha.size())
                            + " weights, spec has " + std::to_string(spec.n_bases()) + " base shapes");
    }
    Shape3D shape{Eigen::Matrix3Xd::Zero(3, spec.n_keypoints())};
    for (int k = 0; k < spec.n_bases(); ++k) {
        shape.coords += params.alpha(k) * spec.base_shapes[static_cast<std::size_t>(k)];
    }
    return shape;
}

/// dY/dalpha_k, which is B_k because the shape model is linear.
inline std::vector<Eigen::Matrix3Xd> shape_basis_jacobian(const SkeletonSpec& spec)
{
    return spec.base_shapes;
}

/// Length of the axis-aligned bounding-box diagonal.
inline double diagonal_length(const Shape3D& shape)
{
    if (shape.coords.cols() == 0) {
        return 0.0;
    }
    const Eigen::Vector3d extent = shape.coords.rowwise().maxCoeff() - shape.coords.rowwise().minCoeff();
    return extent.norm();
}

/// Centroid at the origin and bounding-box diagonal 1.
inline Shape3D canonicalize(const Shape3D& shape)
{
    const double diag = diagonal_length(shape);
    if (!(diag > 0.0) || !std::isfinite(diag)) {
        throw MetricError("canonicalize: shape has zero or non-finite extent");
    }
    const Eigen::Vector3d centroid = shape.coords.rowwise().mean();
    return Shape3D{(shape.coords.colwise() - centroid) / diag};
}

inline nlohmann::json spec_to_json(const SkeletonSpec& spec)
{
    nlohmann::json j;
    j["version"] = "skelspec-v1";
    j["name"] = spec.name;
    j["keypoint_names"] = spec.keypoint_names;
    auto conn = nlohmann::json::array();
    for (const auto& [a, b] : spec.connections) {
        conn.push_back({a, b});
    }
    j["connections"] = conn;
    auto bases = nlohmann::json::array();
    for (const auto& b : spec.base_shapes) {
        auto rows = nlohmann::json::array();
        for (int r = 0; r < 3; ++r) {
            std::vector<double> row(static_cast<std::size_t>(b.cols()));
            for (int c = 0; c < b.cols(); ++c) {
                row[static_cast<std::size_t>(c)] = b(r, c);
            }
            rows.push_back(row);
        }
        bases.push_back(rows);
    }
    j["base_shapes"] = bases;
    auto ranges = nlohmann::json::array();
    for (const auto& iv : spec.alpha_ranges) {
        ranges.push_back({iv.lo, iv.hi});
    }
    j["alpha_ranges"] = ranges;
    return j;
}

inline SkeletonSpec spec_from_json(const nlohmann::json& j)
{
    const auto require = [&](const char* field) -> const nlohmann::json& {
        if (!j.is_object() || !j.contains(field)) {
            throw ConfigError(std::string("skeleton spec: missing field '") + field + "'");
        }
        return j.at(field);
    };
    SkeletonSpec spec;
    try {
        const auto& version = require("version");
        if (version != "skelspec-v1") {
            throw ConfigError("skeleton spec: field 'version' must be \"skelspec-v1\"");
        }
        spec.name = require("name").get<std::string>();
        spec.keypoint_names = require("keypoint_names").get<std::vector<std::string>>();
        for (const auto& c : require("connections")) {
            if (!c.is_array() || c.size() != 2) {
                throw ConfigError("skeleton spec: field 'connections' entries must be index pairs");
            }
            spec.connections.emplace_back(c[0].get<int>(), c[1].get<int>());
        }
        for (const auto& b : require("base_shapes")) {
            if (!b.is_array() || b.size() != 3) {
                throw ConfigError("skeleton spec: field 'base_shapes' entries must be 3 x N arrays");
            }
            const std::size_t n = b[0].size();
            Eigen::Matrix3Xd m(3, static_cast<Eigen::Index>(n));
            for (int r = 0; r < 3; ++r) {
                if (b[static_cast<std::size_t>(r)].size() != n) {
                    throw ConfigError("skeleton spec: field 'base_shapes' rows have unequal lengths");
                }
                for (std::size_t c = 0; c < n; ++c) {
                    m(r, static_cast<Eigen::Index>(c)) = b[static_cast<std::size_t>(r)][c].get<double>();
                }
            }
            spec.base_shapes.push_back(std::move(m));
        }
        for (const auto& iv : require("alpha_ranges")) {
            if (!iv.is_array() || iv.size() != 2) {
                throw ConfigError("skeleton spec: field 'alpha_ranges' entries must be [lo, hi] pairs");
            }
            spec.alpha_ranges.push_back({iv[0].get<double>(), iv[1].get<double>()});
        }
    } catch (const nlohmann::json::exception& e) {
        throw ConfigError(std::string("skeleton spec: ") + e.what());
    }
    spec.validate();
    return spec;
}

inline SkeletonSpec load_spec(const std::string& path)
{
    std::ifstream in(path);
    if (!in) {
        throw IoError("cannot open skeleton spec '" + path + "'");
    }
    nlohmann::json j;
    try {
        in >> j;
    } catch (const nlohmann::json::parse_error& e) {
        throw ConfigError("skeleton spec '" + path + "': " + e.what());
    }
    return spec_from_json(j);
}

inline void save_spec(const SkeletonSpec& spec, const std::string& path)
{
    spec.validate();
    std::ofstream out(path);
    if (!out) {
        throw IoError("cannot write skeleton spec '" + path + "'");
    }
    out << spec_to_json(spec).dump(2) << '\n';
    if (!out) {
        throw IoError("failed writing skeleton spec '" + path + "'");
    }
}

} // namespace skelterp

#endif // SKELTERP_SKELETON_HPP
