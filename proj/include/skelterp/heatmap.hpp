/*
 * skelterp - 3D skeleton recovery from 2D keypoint heatmaps.
 *
 * File: include/skelterp/heatmap.hpp
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

#ifndef SKELTERP_HEATMAP_HPP
#define SKELTERP_HEATMAP_HPP

#include "skelterp/camera.hpp"
#include "skelterp/common.hpp"

#include "Eigen/Core"

#include <cmath>
#include <cstdint>
#include <vector>

namespace skelterp {

/**
 * @brief Maps grid cells to image-plane coordinates.
 *
 * The window is centred on the principal point. Cell (row, col) has centre
 * ((col + 0.5 - width/2) * cell_size, (row + 0.5 - height/2) * cell_size).
 */
struct HeatmapGeometry
{
    int width = 40;
    int height = 30;
    double cell_size = 0.04;

    int cells() const { return width * height; }
    double x_min() const { return -0.5 * width * cell_size; }
    double y_min() const { return -0.5 * height * cell_size; }
    double cell_x(int col) const { return (col + 0.5 - 0.5 * width) * cell_size; }
    double cell_y(int row) const { return (row + 0.5 - 0.5 * height) * cell_size; }

    bool contains(double x, double y) const
    {
        return x >= x_min() && x < -x_min() && y >= y_min() && y < -y_min();
    }

    bool valid() const { return width >= 4 && height >= 4 && std::isfinite(cell_size) && cell_size > 0.0; }

    friend bool operator==(const HeatmapGeometry&, const HeatmapGeometry&) = default;
};

/// N channels of height x width confidences in [0, 1], channel-major then row-major.
struct HeatmapStack
{
    HeatmapGeometry geometry;
    int channels = 0;
    std::vector<float> values;
    std::vector<std::uint8_t> visible;

    HeatmapStack() = default;
    HeatmapStack(const HeatmapGeometry& g, int n) :
        geometry(g), channels(n), values(static_cast<std::size_t>(n) * g.cells(), 0.0f),
        visible(static_cast<std::size_t>(n), 0)
    {
    }

    std::size_t offset(int channel, int row, int col) const
    {
        return (static_cast<std::size_t>(channel) * geometry.height + row) * geometry.width + col;
    }
    float at(int channel, int row, int col) const { return values[offset(channel, row, col)]; }
    float& at(int channel, int row, int col) { return values[offset(channel, row, col)]; }
    std::size_t size() const { return values.size(); }
};

struct NoiseConfig
{
    double level = 0.0;
    std::uint64_t seed = 0;
};

/// Decoded coordinates; invisible keypoints carry (0, 0).
struct DecodedKeypoints
{
    Keypoints2D keypoints;
    std::vector<std::uint8_t> visible;

    int visible_count() const
    {
        int c = 0;
        for (auto v : visible) {
            c += v ? 1 : 0;
        }
        return c;
    }
};

/**
 * @brief Renders one peak-normalised Gaussian per keypoint.
 *
 * `sigma` is in grid cells. Keypoints outside the window give an all-zero,
 * invisible channel.
 */
inline HeatmapStack render_heatmaps(const Keypoints2D& x, const HeatmapGeometry& geometry, double sigma)
{
    if (!(sigma > 0.0)) {
        throw ArgumentError("render_heatmaps: sigma must be positive");
    }
    if (!geometry.valid()) {
        throw ArgumentError("render_heatmaps: invalid grid geometry");
    }
    HeatmapStack hm(geometry, x.n_keypoints());
    const double inv_two_sigma2 = 1.0 / (2.0 * sigma * sigma);
    std::vector<double> gx(static_cast<std::size_t>(geometry.width));
    std::vector<double> gy(static_cast<std::size_t>(geometry.height));
    for (int i = 0; i < x.n_keypoints(); ++i) {
        const double px = x.coords(0, i);
        const double py = x.coords(1, i);
        if (!std::isfinite(px) || !std::isfinite(py) || !geometry.contains(px, py)) {
            continue;
        }
        hm.visible[static_cast<std::size_t>(i)] = 1;
        for (int c = 0; c < geometry.width; ++c) {
            const double d = (px - geometry.cell_x(c)) / geometry.cell_size;
            gx[static_cast<std::size_t>(c)] = std::exp(-d * d * inv_two_sigma2);
        }
        for (int r = 0; r < geometry.height; ++r) {
            const double d = (py - geometry.cell_y(r)) / geometry.cell_size;
            gy[static_cast<std::size_t>(r)] = std::exp(-d * d * inv_two_sigma2);
        }
        for (int r = 0; r < geometry.height; ++r) {
            for (int c = 0; c < geometry.width; ++c) {
                hm.at(i, r, c) = static_cast<float>(gy[static_cast<std::size_t>(r)] * gx[static_cast<std::size_t>(c)]);
            }
        }
    }
    return hm;
}

/**
 * @brief Salt-and-pepper corruption.
 *
 * Each cell is selected independently with probability `level`; of the
 * selected cells in a channel, half (rounded) become 1 and the rest 0.
 */
inline HeatmapStack corrupt_salt_pepper(const HeatmapStack& hm, const NoiseConfig& cfg)
{
    if (!(cfg.level >= 0.0 && cfg.level <= 1.0)) {
        throw ArgumentError("corrupt_salt_pepper: level must lie in [0, 1]");
    }
    HeatmapStack out = hm;
    if (cfg.level == 0.0) {
        return out;
    }
    Rng rng(cfg.seed);
    const int cells = hm.geometry.cells();
    std::vector<int> selected;
    selected.reserve(static_cast<std::size_t>(cells));
    for (int ch = 0; ch < hm.channels; ++ch) {
        selected.clear();
        for (int cell = 0; cell < cells; ++cell) {
            if (rng.uniform() < cfg.level) {
                selected.push_back(cell);
            }
        }
        rng.shuffle(selected);
        const auto n_salt = static_cast<std::size_t>(std::lround(0.5 * static_cast<double>(selected.size())));
        float* channel = out.values.data() + static_cast<std::size_t>(ch) * cells;
        for (std::size_t s = 0; s < selected.size(); ++s) {
            channel[selected[s]] = s < n_salt ? 1.0f : 0.0f;
        }
    }
    return out;
}

/// Per channel, the centre of the maximum cell; ties go to the lowest (row, col).
inline DecodedKeypoints decode_argmax(const HeatmapStack& hm)
{
    const auto& g = hm.geometry;
    DecodedKeypoints out{Keypoints2D{Eigen::Matrix2Xd::Zero(2, hm.channels)},
                         std::vector<std::uint8_t>(static_cast<std::size_t>(hm.channels), 0)};
    for (int ch = 0; ch < hm.channels; ++ch) {
        float best = 0.0f;
        int best_row = -1;
        int best_col = -1;
        for (int r = 0; r < g.height; ++r) {
            for (int c = 0; c < g.width; ++c) {
                const float v = hm.at(ch, r, c);
                if (v > best) {
                    best = v;
                    best_row = r;
                    best_col = c;
                }
            }
        }
        if (best_row < 0) {
            continue;
        }
        out.visible[static_cast<std::size_t>(ch)] = 1;
        out.keypoints.coords(0, ch) = g.cell_x(best_col);
        out.keypoints.coords(1, ch) = g.cell_y(best_row);
    }
    return out;
}

/**
 * Softmax(log(value) / temperature)-weighted mean of cell centres, i.e. weights
 * proportional to value^(1/temperature). Zero cells carry no weight, and the
 * result tends to the argmax cell as the temperature goes to zero.
 */
inline DecodedKeypoints decode_soft(const HeatmapStack& hm, double temperature)
{
    if (!(temperature > 0.0)) {
        throw ArgumentError("decode_soft: temperature must be positive");
    }
    const auto& g = hm.geometry;
    DecodedKeypoints out{Keypoints2D{Eigen::Matrix2Xd::Zero(2, hm.channels)},
                         std::vector<std::uint8_t>(static_cast<std::size_t>(hm.channels), 0)};
    for (int ch = 0; ch < hm.channels; ++ch) {
        double peak = 0.0;
        for (int r = 0; r < g.height; ++r) {
            for (int c = 0; c < g.width; ++c) {
                peak = std::max(peak, static_cast<double>(hm.at(ch, r, c)));
            }
        }
        if (!(peak > 0.0)) {
            continue;
        }
        double total = 0.0;
        double sx = 0.0;
        double sy = 0.0;
        for (int r = 0; r < g.height; ++r) {
            for (int c = 0; c < g.width; ++c) {
                const double v = hm.at(ch, r, c);
                const double w = v > 0.0 ? std::exp(std::log(v / peak) / temperature) : 0.0;
                total += w;
                sx += w * g.cell_x(c);
                sy += w * g.cell_y(r);
            }
        }
        out.keypoints.coords(0, ch) = sx / total;
        out.keypoints.coords(1, ch) = sy / total;
        out.visible[static_cast<std::size_t>(ch)] = 1;
    }
    return out;
}

} // namespace skelterp

#endif // SKELTERP_HEATMAP_HPP
