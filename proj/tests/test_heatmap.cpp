/*
 * skelterp - 3D skeleton recovery from 2D keypoint heatmaps.
 *
 * File: tests/test_heatmap.cpp
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
#include "skelterp/heatmap.hpp"

#include "test_util.hpp"

#include <gtest/gtest.h>

#include <cmath>

using namespace skelterp;
using namespace skelterp::testing;

namespace {

Keypoints2D single(double x, double y)
{
    Keypoints2D k{Eigen::Matrix2Xd(2, 1)};
    k.coords << x, y;
    return k;
}

Keypoints2D random_in_window(Rng& rng, const HeatmapGeometry& g, int n)
{
    Keypoints2D k{Eigen::Matrix2Xd(2, n)};
    for (int i = 0; i < n; ++i) {
        k.coords(0, i) = rng.uniform(g.x_min(), -g.x_min());
        k.coords(1, i) = rng.uniform(g.y_min(), -g.y_min());
    }
    return k;
}

} // namespace

TEST(RenderHeatmaps, PeakAtCellCentre)
{
    const HeatmapGeometry g;
    const auto hm = render_heatmaps(single(g.cell_x(7), g.cell_y(11)), g, 1.5);
    EXPECT_EQ(hm.at(0, 11, 7), 1.0f);
    const auto dec = decode_argmax(hm);
    EXPECT_EQ(dec.keypoints.coords(0, 0), g.cell_x(7));
    EXPECT_EQ(dec.keypoints.coords(1, 0), g.cell_y(11));
}

TEST(RenderHeatmaps, OutsideWindowGivesEmptyInvisibleChannel)
{
    const HeatmapGeometry g;
    Keypoints2D k{Eigen::Matrix2Xd(2, 2)};
    k.coords << 0.0, 5.0, 0.0, 0.0;
    const auto hm = render_heatmaps(k, g, 1.5);
    EXPECT_TRUE(hm.visible[0]);
    EXPECT_FALSE(hm.visible[1]);
    for (int r = 0; r < g.height; ++r) {
        for (int c = 0; c < g.width; ++c) {
            ASSERT_EQ(hm.at(1, r, c), 0.0f);
        }
    }
    EXPECT_FALSE(decode_argmax(hm).visible[1]);
}

TEST(RenderHeatmaps, MatchesBruteForceDoubleLoop)
{
    Rng rng(1);
    HeatmapGeometry g;
    g.width = 17;
    g.height = 9;
    g.cell_size = 0.11;
    const double sigma = 1.3;
    const auto x = random_in_window(rng, g, 6);
    const auto hm = render_heatmaps(x, g, sigma);
    ASSERT_EQ(hm.channels, 6);
    ASSERT_EQ(hm.size(), static_cast<std::size_t>(6 * 17 * 9));
    for (int i = 0; i < 6; ++i) {
        for (int r = 0; r < g.height; ++r) {
            for (int c = 0; c < g.width; ++c) {
                const double cx = -0.5 * g.width * g.cell_size + (c + 0.5) * g.cell_size;
                const double cy = -0.5 * g.height * g.cell_size + (r + 0.5) * g.cell_size;
                const double d2 = (std::pow(x.coords(0, i) - cx, 2) + std::pow(x.coords(1, i) - cy, 2)) / (g.cell_size * g.cell_size);
                ASSERT_NEAR(hm.at(i, r, c), std::exp(-d2 / (2 * sigma * sigma)), 1e-6);
            }
        }
    }
}

TEST(RenderHeatmaps, ValuesBoundedAndSigmaChecked)
{
    Rng rng(2);
    const HeatmapGeometry g;
    const auto hm = render_heatmaps(random_in_window(rng, g, 10), g, 1.5);
    for (float v : hm.values) {
        ASSERT_GE(v, 0.0f);
        ASSERT_LE(v, 1.0f);
    }
    EXPECT_THROW(render_heatmaps(single(0, 0), g, 0.0), ArgumentError);
    HeatmapGeometry tiny;
    tiny.width = 3;
    EXPECT_THROW(render_heatmaps(single(0, 0), tiny, 1.0), ArgumentError);
}

TEST(RenderHeatmaps, OneCellShiftMovesOneColumn)
{
    Rng rng(3);
    const HeatmapGeometry g;
    for (int trial = 0; trial < 50; ++trial) {
        const double x = rng.uniform(g.x_min(), -g.x_min() - 2 * g.cell_size);
        const double y = rng.uniform(g.y_min(), -g.y_min() - g.cell_size);
        const auto a = render_heatmaps(single(x, y), g, 1.5);
        const auto b = render_heatmaps(single(x + g.cell_size, y), g, 1.5);
        for (int r = 0; r < g.height; ++r) {
            for (int c = 1; c < g.width - 1; ++c) {
                ASSERT_NEAR(b.at(0, r, c + 1), a.at(0, r, c), 1e-6);
            }
        }
    }
}

TEST(CorruptSaltPepper, ZeroLevelIsIdentity)
{
    Rng rng(4);
    const HeatmapGeometry g;
    const auto hm = render_heatmaps(random_in_window(rng, g, 5), g, 1.5);
    const auto out = corrupt_salt_pepper(hm, NoiseConfig{0.0, 99});
    EXPECT_EQ(out.values, hm.values);
    EXPECT_EQ(out.visible, hm.visible);
}

TEST(CorruptSaltPepper, FullLevelLeavesOnlyZerosAndOnes)
{
    Rng rng(5);
    const HeatmapGeometry g;
    const auto hm = render_heatmaps(random_in_window(rng, g, 5), g, 1.5);
    const auto out = corrupt_salt_pepper(hm, NoiseConfig{1.0, 7});
    int ones = 0;
    for (float v : out.values) {
        ASSERT_TRUE(v == 0.0f || v == 1.0f);
        ones += v == 1.0f ? 1 : 0;
    }
    EXPECT_EQ(ones, 5 * g.cells() / 2);
}

TEST(CorruptSaltPepper, DeterministicPerSeed)
{
    Rng rng(6);
    const HeatmapGeometry g;
    const auto hm = render_heatmaps(random_in_window(rng, g, 5), g, 1.5);
    const auto a = corrupt_salt_pepper(hm, NoiseConfig{0.1, 42});
    const auto b = corrupt_salt_pepper(hm, NoiseConfig{0.1, 42});
    const auto c = corrupt_salt_pepper(hm, NoiseConfig{0.1, 43});
    EXPECT_EQ(a.values, b.values);
    EXPECT_NE(a.values, c.values);
}

TEST(CorruptSaltPepper, CorruptedCountMatchesBinomial)
{
    HeatmapGeometry g;
    HeatmapStack hm(g, 1);
    std::fill(hm.values.begin(), hm.values.end(), 0.5f);
    for (double p : {0.02, 0.1, 0.2}) {
        long touched = 0;
        for (std::uint64_t seed = 0; seed < 100; ++seed) {
            const auto out = corrupt_salt_pepper(hm, NoiseConfig{p, seed});
            long salt = 0;
            long pepper = 0;
            for (float v : out.values) {
                salt += v == 1.0f ? 1 : 0;
                pepper += v == 0.0f ? 1 : 0;
            }
            ASSERT_LE(std::abs(salt - pepper), 1);
            touched += salt + pepper;
        }
        const double n = 100.0 * g.cells();
        EXPECT_LT(std::abs(static_cast<double>(touched) - n * p), 3.0 * std::sqrt(n * p * (1 - p))) << p;
    }
}

TEST(CorruptSaltPepper, RejectsLevelOutsideUnitInterval)
{
    HeatmapStack hm(HeatmapGeometry{}, 1);
    EXPECT_THROW(corrupt_salt_pepper(hm, NoiseConfig{1.5, 0}), ArgumentError);
    EXPECT_THROW(corrupt_salt_pepper(hm, NoiseConfig{-0.1, 0}), ArgumentError);
}

TEST(DecodeArgmax, TiesGoToLowestRowThenColumn)
{
    HeatmapGeometry g;
    HeatmapStack hm(g, 1);
    hm.at(0, 5, 9) = 0.8f;
    hm.at(0, 5, 3) = 0.8f;
    hm.at(0, 7, 1) = 0.8f;
    const auto dec = decode_argmax(hm);
    EXPECT_EQ(dec.keypoints.coords(0, 0), g.cell_x(3));
    EXPECT_EQ(dec.keypoints.coords(1, 0), g.cell_y(5));
}

TEST(DecodeArgmax, AllZeroChannelIsInvisible)
{
    HeatmapStack hm(HeatmapGeometry{}, 2);
    hm.at(1, 0, 0) = 0.1f;
    const auto dec = decode_argmax(hm);
    EXPECT_FALSE(dec.visible[0]);
    EXPECT_TRUE(dec.visible[1]);
    EXPECT_EQ(dec.visible_count(), 1);
}

TEST(DecodeArgmax, QuantisationBoundOverRandomKeypoints)
{
    Rng rng(8);
    const HeatmapGeometry g;
    const double bound = 0.5 * std::sqrt(2.0) * g.cell_size;
    const auto x = random_in_window(rng, g, 1000);
    const auto dec = decode_argmax(render_heatmaps(x, g, 1.5));
    for (int i = 0; i < 1000; ++i) {
        ASSERT_TRUE(dec.visible[static_cast<std::size_t>(i)]);
        ASSERT_LE((dec.keypoints.coords.col(i) - x.coords.col(i)).norm(), bound + 1e-12) << i;
    }
}

TEST(DecodeSoft, PointMassGivesCellCentre)
{
    HeatmapGeometry g;
    HeatmapStack hm(g, 1);
    hm.at(0, 12, 30) = 0.4f;
    for (double t : {1.0, 0.3}) {
        const auto dec = decode_soft(hm, t);
        EXPECT_EQ(dec.keypoints.coords(0, 0), g.cell_x(30));
        EXPECT_EQ(dec.keypoints.coords(1, 0), g.cell_y(12));
    }
}

TEST(DecodeSoft, SymmetricPeaksGiveMidpoint)
{
    HeatmapGeometry g;
    Keypoints2D k{Eigen::Matrix2Xd(2, 2)};
    k.coords << g.cell_x(10), g.cell_x(20), g.cell_y(15), g.cell_y(15);
    const auto a = render_heatmaps(k, g, 1.5);
    HeatmapStack merged(g, 1);
    for (int r = 0; r < g.height; ++r) {
        for (int c = 0; c < g.width; ++c) {
            merged.at(0, r, c) = std::max(a.at(0, r, c), a.at(1, r, c));
        }
    }
    const auto dec = decode_soft(merged, 1.0);
    EXPECT_NEAR(dec.keypoints.coords(0, 0), 0.5 * (g.cell_x(10) + g.cell_x(20)), 1e-9);
    EXPECT_NEAR(dec.keypoints.coords(1, 0), g.cell_y(15), 1e-9);
}

TEST(DecodeSoft, ConvergesToArgmaxAsTemperatureFalls)
{
    Rng rng(9);
    const HeatmapGeometry g;
    const auto x = random_in_window(rng, g, 200);
    const auto hm = render_heatmaps(x, g, 1.5);
    const auto hard = decode_argmax(hm);
    double previous = 1e300;
    for (double t : {1.0, 0.1, 0.01}) {
        const auto soft = decode_soft(hm, t);
        const double gap = (soft.keypoints.coords - hard.keypoints.coords).cwiseAbs().mean();
        EXPECT_LT(gap, previous) << t;
        previous = gap;
    }
    EXPECT_LT(previous, 0.05 * g.cell_size);

    Keypoints2D centred{Eigen::Matrix2Xd(2, 3)};
    centred.coords << g.cell_x(5), g.cell_x(20), g.cell_x(38), g.cell_y(2), g.cell_y(14), g.cell_y(27);
    const auto at_centres = render_heatmaps(centred, g, 1.5);
    EXPECT_LT((decode_soft(at_centres, 0.01).keypoints.coords - centred.coords).cwiseAbs().maxCoeff(), 1e-9);
    EXPECT_THROW(decode_soft(hm, 0.0), ArgumentError);
}
