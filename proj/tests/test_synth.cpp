/*
 * skelterp - 3D skeleton recovery from 2D keypoint heatmaps.
 *
 * File: tests/test_synth.cpp
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
#include "skelterp/synth.hpp"

#include "test_util.hpp"

#include <gtest/gtest.h>

#include <filesystem>

using namespace skelterp;
using namespace skelterp::testing;

namespace {

void expect_records_equal(const SampleRecord& a, const SampleRecord& b)
{
    EXPECT_EQ(a.params.alpha, b.params.alpha);
    EXPECT_EQ(a.pose.omega, b.pose.omega);
    EXPECT_EQ(a.pose.t, b.pose.t);
    EXPECT_EQ(a.pose.f, b.pose.f);
    EXPECT_EQ(a.y_clean.coords, b.y_clean.coords);
    EXPECT_EQ(a.y_perturbed.coords, b.y_perturbed.coords);
    EXPECT_EQ(a.x.coords, b.x.coords);
    EXPECT_EQ(a.visibility, b.visibility);
}

} // namespace

TEST(SampleInstance, DeterministicForFixedSeed)
{
    const auto spec = chair();
    const auto ranges = default_ranges(spec);
    Rng a(17);
    Rng b(17);
    const auto ra = sample_instance(spec, ranges, RenderSettings{}, a);
    const auto rb = sample_instance(spec, ranges, RenderSettings{}, b);
    expect_records_equal(ra, rb);
    EXPECT_EQ(ra.heatmaps.values, rb.heatmaps.values);
}

TEST(SampleInstance, RecordIsInternallyConsistent)
{
    const auto spec = chair();
    const auto ranges = default_ranges(spec);
    Rng rng(18);
    for (int trial = 0; trial < 200; ++trial) {
        const auto rec = sample_instance(spec, ranges, RenderSettings{}, rng);
        for (int k = 0; k < spec.n_bases(); ++k) {
            ASSERT_TRUE(ranges.alpha[static_cast<std::size_t>(k)].contains(rec.params.alpha(k)));
        }
        for (int i = 0; i < 3; ++i) {
            ASSERT_TRUE(ranges.omega[static_cast<std::size_t>(i)].contains(rec.pose.omega(i)));
            ASSERT_TRUE(ranges.t[static_cast<std::size_t>(i)].contains(rec.pose.t(i)));
        }
        ASSERT_TRUE(ranges.f.contains(rec.pose.f));
        ASSERT_EQ(rec.y_clean.coords, compose_shape(spec, rec.params).coords);
        ASSERT_LT((rec.x.coords - project(rec.y_perturbed, rec.pose).coords).cwiseAbs().maxCoeff(), 1e-9);

        const auto dec = decode_argmax(rec.heatmaps);
        int visible = 0;
        for (int i = 0; i < spec.n_keypoints(); ++i) {
            if (rec.visibility[static_cast<std::size_t>(i)]) {
                ++visible;
                ASSERT_LE((dec.keypoints.coords.col(i) - rec.x.coords.col(i)).norm(),
                          0.5 * std::sqrt(2.0) * rec.heatmaps.geometry.cell_size + 1e-12);
            }
        }
        ASSERT_GE(visible, kMinVisibleKeypoints);
    }
}

TEST(SampleInstance, PerturbationStdIsOnePercentOfDiagonal)
{
    // With a unit-diagonal mean shape and alpha fixed at the mean, the noise std is 0.01 exactly.
    const auto spec = chair();
    auto ranges = default_ranges(spec);
    ranges.alpha[0] = {1.0, 1.0};
    for (std::size_t k = 1; k < ranges.alpha.size(); ++k) {
        ranges.alpha[k] = {0.0, 0.0};
    }
    Rng rng(19);
    double sum = 0.0;
    double sq = 0.0;
    long n = 0;
    for (int trial = 0; trial < 10000; ++trial) {
        const auto rec = sample_instance(spec, ranges, RenderSettings{}, rng);
        ASSERT_NEAR(diagonal_length(rec.y_clean), 1.0, 1e-9);
        const Eigen::Matrix3Xd d = rec.y_perturbed.coords - rec.y_clean.coords;
        sum += d.sum();
        sq += d.squaredNorm();
        n += d.size();
    }
    const double mean = sum / static_cast<double>(n);
    const double stddev = std::sqrt(sq / static_cast<double>(n) - mean * mean);
    EXPECT_NEAR(stddev, 0.01, 0.05 * 0.01);
    EXPECT_LT(std::abs(mean), 1e-4);
}

TEST(SampleInstance, ImpossibleRangesRaiseConfigError)
{
    const auto spec = chair();
    auto ranges = default_ranges(spec);
    ranges.t[0] = {50.0, 60.0};
    Rng rng(20);
    EXPECT_THROW(sample_instance(spec, ranges, RenderSettings{}, rng), ConfigError);
}

TEST(SamplingRanges, ValidationRejectsBadIntervals)
{
    const auto spec = chair();
    auto r = default_ranges(spec);
    EXPECT_NO_THROW(r.validate());
    r.t[2] = {5e-4, 1.0};
    EXPECT_THROW(r.validate(), ConfigError);
    r = default_ranges(spec);
    r.f = {2.0, 1.0};
    EXPECT_THROW(r.validate(), ConfigError);
    r = default_ranges(spec);
    r.omega[1] = {-2.0, 2.0};
    EXPECT_THROW(r.validate(), ConfigError);
}

TEST(GenerateDataset, SingleRecord)
{
    const auto spec = chair();
    const auto ds = generate_dataset(spec, default_ranges(spec), RenderSettings{}, 1, 5);
    ASSERT_EQ(ds.size(), 1u);
    EXPECT_EQ(ds.records[0].params.alpha.size(), spec.n_bases());
    EXPECT_THROW(generate_dataset(spec, default_ranges(spec), RenderSettings{}, 0, 5), ArgumentError);
}

TEST(GenerateDataset, IndependentOfThreadCount)
{
    const auto spec = chair();
    const auto a = generate_dataset(spec, default_ranges(spec), RenderSettings{}, 64, 9, 1);
    const auto b = generate_dataset(spec, default_ranges(spec), RenderSettings{}, 64, 9, 3);
    ASSERT_EQ(a.size(), b.size());
    for (std::size_t i = 0; i < a.size(); ++i) {
        expect_records_equal(a.records[i], b.records[i]);
    }
    EXPECT_EQ(a.provenance.extra_draws, b.provenance.extra_draws);
}

TEST(GenerateDataset, CorpusSizesAndResampleRate)
{
    const auto spec = chair();
    const auto train = generate_dataset(spec, default_ranges(spec), RenderSettings{}, 30000, 1);
    const auto test = generate_dataset(spec, default_ranges(spec), RenderSettings{}, 1000, 2);
    EXPECT_EQ(train.size(), 30000u);
    EXPECT_EQ(test.size(), 1000u);
    EXPECT_LT(train.resample_rate(), 0.05);
    for (const auto& rec : train.records) {
        ASSERT_EQ(rec.x.n_keypoints(), spec.n_keypoints());
    }
}

TEST(DatasetIo, RoundTripWithAndWithoutHeatmaps)
{
    const auto dir = temp_dir("dataset-io");
    const auto spec = chair();
    for (bool stored : {false, true}) {
        const auto ds = generate_dataset(spec, default_ranges(spec), RenderSettings{}, 100, 3, 1, stored);
        const auto path = (dir / (stored ? "with.skelds" : "without.skelds")).string();
        save_dataset(ds, path);
        const auto back = load_dataset(path);
        EXPECT_EQ(back.spec, ds.spec);
        EXPECT_EQ(back.ranges, ds.ranges);
        EXPECT_EQ(back.render, ds.render);
        EXPECT_EQ(back.provenance.seed, 3u);
        EXPECT_EQ(back.provenance.extra_draws, ds.provenance.extra_draws);
        EXPECT_EQ(back.heatmaps_stored, stored);
        ASSERT_EQ(back.size(), ds.size());
        for (std::size_t i = 0; i < ds.size(); ++i) {
            expect_records_equal(back.records[i], ds.records[i]);
            EXPECT_EQ(heatmaps_for(back, i).values, heatmaps_for(ds, i).values);
        }
    }
}

TEST(DatasetIo, IdenticalGenerationsGiveIdenticalFiles)
{
    const auto dir = temp_dir("dataset-hash");
    const auto spec = chair();
    save_dataset(generate_dataset(spec, default_ranges(spec), RenderSettings{}, 200, 77), (dir / "a.skelds").string());
    save_dataset(generate_dataset(spec, default_ranges(spec), RenderSettings{}, 200, 77, 2), (dir / "b.skelds").string());
    save_dataset(generate_dataset(spec, default_ranges(spec), RenderSettings{}, 200, 78), (dir / "c.skelds").string());
    const auto a = read_file(dir / "a.skelds");
    EXPECT_EQ(fnv1a(a), fnv1a(read_file(dir / "b.skelds")));
    EXPECT_NE(fnv1a(a), fnv1a(read_file(dir / "c.skelds")));
    EXPECT_NE(a.find("perturbation_note="), std::string::npos);
}

TEST(DatasetIo, TruncationAndCorruptionAreIntegrityErrors)
{
    const auto dir = temp_dir("dataset-corrupt");
    const auto spec = chair();
    const auto path = dir / "d.skelds";
    save_dataset(generate_dataset(spec, default_ranges(spec), RenderSettings{}, 20, 4), path.string());
    const auto bytes = read_file(path);

    std::filesystem::resize_file(path, bytes.size() - 37);
    EXPECT_THROW(load_dataset(path.string()), IntegrityError);

    std::filesystem::resize_file(path, 40);
    EXPECT_THROW(load_dataset(path.string()), IntegrityError);

    auto flipped = bytes;
    flipped[flipped.size() - 100] = static_cast<char>(flipped[flipped.size() - 100] ^ 0x10);
    {
        std::ofstream out(path, std::ios::binary);
        out << flipped;
    }
    try {
        load_dataset(path.string());
        FAIL() << "expected IntegrityError";
    } catch (const IntegrityError& e) {
        EXPECT_NE(std::string(e.what()).find("checksum"), std::string::npos);
    }
    EXPECT_THROW(load_dataset((dir / "missing.skelds").string()), IoError);
}

TEST(Strip3d, KeepsOnlyKeypointLabels)
{
    const auto spec = chair();
    const auto ds = generate_dataset(spec, default_ranges(spec), RenderSettings{}, 10, 6);
    const auto flat = strip_3d(ds);
    ASSERT_EQ(flat.size(), 10u);
    EXPECT_EQ(flat.n_keypoints, spec.n_keypoints());
    for (std::size_t i = 0; i < 10; ++i) {
        EXPECT_EQ(flat.records[i].x.coords, ds.records[i].x.coords);
        EXPECT_EQ(heatmaps_for(flat, i).values, heatmaps_for(ds, i).values);
    }
}
