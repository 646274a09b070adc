/*
 * skelterp - 3D skeleton recovery from 2D keypoint heatmaps.
 *
 * File: tests/test_mlp.cpp
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
#include "skelterp/mlp.hpp"

#include "test_util.hpp"

#include <gtest/gtest.h>

using namespace skelterp;
using namespace skelterp::testing;

namespace {

using MlpD = Mlp<double>;

MlpD random_model(const std::vector<int>& widths, std::uint64_t seed)
{
    auto m = make_mlp<double>(widths, seed);
    Rng rng(seed + 1000);
    for (auto& b : m.biases) {
        for (Eigen::Index i = 0; i < b.size(); ++i) {
            b(i) = rng.uniform(-0.3, 0.3);
        }
    }
    for (Eigen::Index i = 0; i < m.input_mean.size(); ++i) {
        m.input_mean(i) = rng.uniform(-1, 1);
        m.input_scale(i) = rng.uniform(0.5, 2.0);
    }
    for (Eigen::Index i = 0; i < m.output_mean.size(); ++i) {
        m.output_mean(i) = rng.uniform(-1, 1);
        m.output_scale(i) = rng.uniform(0.5, 2.0);
    }
    return m;
}

Eigen::VectorXd random_vector(Rng& rng, int n)
{
    Eigen::VectorXd v(n);
    for (int i = 0; i < n; ++i) {
        v(i) = rng.uniform(-2, 2);
    }
    return v;
}

/// Straight-line reference: explicit loops over rows and columns.
Eigen::VectorXd reference_apply(const MlpD& m, const Eigen::VectorXd& input)
{
    std::vector<double> a(static_cast<std::size_t>(input.size()));
    for (Eigen::Index i = 0; i < input.size(); ++i) {
        a[static_cast<std::size_t>(i)] = (input(i) - m.input_mean(i)) / m.input_scale(i);
    }
    for (int l = 0; l < m.n_layers(); ++l) {
        const auto& w = m.weights[static_cast<std::size_t>(l)];
        std::vector<double> z(static_cast<std::size_t>(w.rows()));
        for (Eigen::Index r = 0; r < w.rows(); ++r) {
            double s = m.biases[static_cast<std::size_t>(l)](r);
            for (Eigen::Index c = 0; c < w.cols(); ++c) {
                s += w(r, c) * a[static_cast<std::size_t>(c)];
            }
            z[static_cast<std::size_t>(r)] = (l + 1 < m.n_layers() && s < 0.0) ? 0.0 : s;
        }
        a = z;
    }
    Eigen::VectorXd out(static_cast<Eigen::Index>(a.size()));
    for (Eigen::Index i = 0; i < out.size(); ++i) {
        out(i) = a[static_cast<std::size_t>(i)] * m.output_scale(i) + m.output_mean(i);
    }
    return out;
}

} // namespace

TEST(MlpApply, ZeroWeightsGiveBiasPath)
{
    auto m = random_model({5, 4, 3}, 1);
    for (auto& w : m.weights) {
        w.setZero();
    }
    Rng rng(2);
    const Eigen::VectorXd out = mlp_apply(m, random_vector(rng, 5));
    const Eigen::VectorXd hidden = m.biases[0].cwiseMax(0.0);
    const Eigen::VectorXd expected = (m.biases[1] + m.weights[1] * hidden).cwiseProduct(m.output_scale) + m.output_mean;
    EXPECT_LT((out - expected).cwiseAbs().maxCoeff(), 1e-15);
}

TEST(MlpApply, SingleIdentityLayerIsIdentity)
{
    auto m = make_mlp<double>({6, 6}, 3);
    m.weights[0].setIdentity();
    Rng rng(4);
    const auto x = random_vector(rng, 6);
    EXPECT_EQ(mlp_apply(m, x), x);
}

TEST(MlpApply, MatchesLoopReference)
{
    Rng rng(5);
    for (int trial = 0; trial < 50; ++trial) {
        const auto m = random_model({7, 11, 5, 3}, 10 + static_cast<std::uint64_t>(trial));
        const auto x = random_vector(rng, 7);
        ASSERT_LT((mlp_apply(m, x) - reference_apply(m, x)).cwiseAbs().maxCoeff(), 1e-12);
    }
}

TEST(MlpApply, RejectsWrongWidthAndNonFiniteInput)
{
    const auto m = make_mlp<double>({4, 3}, 1);
    EXPECT_THROW(mlp_apply(m, Eigen::VectorXd::Zero(5)), ArgumentError);
    Eigen::VectorXd bad = Eigen::VectorXd::Zero(4);
    bad(2) = std::numeric_limits<double>::quiet_NaN();
    EXPECT_THROW(mlp_apply(m, bad), ArgumentError);
}

TEST(MlpApply, BatchedForwardMatchesPerSample)
{
    const auto m = make_mlp<float>({9, 16, 4}, 6);
    Rng rng(7);
    Mlp<float>::Matrix batch(9, 13);
    for (Eigen::Index i = 0; i < batch.size(); ++i) {
        batch(i) = static_cast<float>(rng.uniform(-1, 1));
    }
    const auto all = destandardise_outputs(m, forward_batch(m, standardise_inputs(m, batch)));
    for (Eigen::Index c = 0; c < batch.cols(); ++c) {
        const Mlp<float>::Vector single = mlp_apply(m, Mlp<float>::Vector(batch.col(c)));
        EXPECT_LT((all.col(c) - single).cwiseAbs().maxCoeff(), 1e-5f);
    }
}

TEST(MlpGrad, ZeroUpstreamGivesZeroGradients)
{
    const auto m = random_model({5, 8, 3}, 8);
    Rng rng(9);
    const auto g = mlp_grad(m, random_vector(rng, 5), Eigen::VectorXd::Zero(3));
    EXPECT_EQ(g.squared_norm(), 0.0);
    EXPECT_TRUE(g.input.isZero(0.0));
}

TEST(MlpGrad, LinearModelInputGradientIsTransposedWeights)
{
    const auto m = make_mlp<double>({6, 4}, 10);
    Rng rng(11);
    const auto up = random_vector(rng, 4);
    const auto g = mlp_grad(m, random_vector(rng, 6), up);
    EXPECT_LT((g.input.col(0) - m.weights[0].transpose() * up).cwiseAbs().maxCoeff(), 1e-14);
}

TEST(MlpGrad, MatchesCentralDifferencesOnThreeLayerModel)
{
    // Loss L = c . mlp_apply(x) for a fixed random c, so dL/d(output) = c.
    Rng rng(12);
    for (int trial = 0; trial < 5; ++trial) {
        auto m = random_model({6, 10, 8, 4}, 100 + static_cast<std::uint64_t>(trial));
        const auto x = random_vector(rng, 6);
        const auto c = random_vector(rng, 4);
        const auto loss = [&](const MlpD& model, const Eigen::VectorXd& in) { return c.dot(mlp_apply(model, in)); };
        const auto g = mlp_grad(m, x, c);
        const double h = 1e-6;
        double worst = 0.0;
        const auto check = [&](double analytic, double numeric) {
            const double denom = std::max({std::abs(analytic), std::abs(numeric), 1e-6});
            worst = std::max(worst, std::abs(analytic - numeric) / denom);
        };
        for (int l = 0; l < m.n_layers(); ++l) {
            auto& w = m.weights[static_cast<std::size_t>(l)];
            for (Eigen::Index i = 0; i < w.size(); ++i) {
                const double keep = w(i);
                w(i) = keep + h;
                const double up = loss(m, x);
                w(i) = keep - h;
                const double down = loss(m, x);
                w(i) = keep;
                check(g.weights[static_cast<std::size_t>(l)](i), (up - down) / (2 * h));
            }
            auto& b = m.biases[static_cast<std::size_t>(l)];
            for (Eigen::Index i = 0; i < b.size(); ++i) {
                const double keep = b(i);
                b(i) = keep + h;
                const double up = loss(m, x);
                b(i) = keep - h;
                const double down = loss(m, x);
                b(i) = keep;
                check(g.biases[static_cast<std::size_t>(l)](i), (up - down) / (2 * h));
            }
        }
        for (Eigen::Index i = 0; i < x.size(); ++i) {
            Eigen::VectorXd xp = x;
            Eigen::VectorXd xm = x;
            xp(i) += h;
            xm(i) -= h;
            check(g.input(i, 0), (loss(m, xp) - loss(m, xm)) / (2 * h));
        }
        EXPECT_LT(worst, 1e-4) << trial;
    }
}

TEST(Adam, ClipsGlobalNormAndReducesQuadratic)
{
    // Fit a linear map by least squares; loss must fall.
    auto m = make_mlp<double>({3, 2}, 13);
    const Eigen::MatrixXd target = (Eigen::MatrixXd(2, 3) << 1, -2, 0.5, 0.3, 0.0, -1).finished();
    Rng rng(14);
    Eigen::MatrixXd x(3, 64);
    for (Eigen::Index i = 0; i < x.size(); ++i) {
        x(i) = rng.uniform(-1, 1);
    }
    const Eigen::MatrixXd y = target * x;
    Adam<double> opt(m, AdamSettings{1e-2, 0.9, 0.999, 1e-8, 5.0});
    const auto loss_of = [&] { return (forward_batch(m, x) - y).squaredNorm() / 64.0; };
    const double initial = loss_of();
    for (int step = 0; step < 2000; ++step) {
        MlpTape<double> tape;
        const Eigen::MatrixXd out = forward_batch(m, x, &tape);
        MlpGradients<double> g;
        backward_batch(m, tape, Eigen::MatrixXd(2.0 * (out - y) / 64.0), g);
        const double norm = opt.step(m, g);
        if (norm > 5.0) {
            EXPECT_NEAR(std::sqrt(g.squared_norm()), 5.0, 1e-9);
        }
    }
    EXPECT_LT(loss_of(), 1e-6 * initial);
    EXPECT_EQ(opt.steps(), 2000);
}

TEST(MlpIo, RoundTripPreservesFloatModelAndMetadata)
{
    const auto dir = temp_dir("mlp-io");
    auto m = random_model({12, 7, 5}, 15).cast<float>();
    const auto path = (dir / "m.skelmlp").string();
    save_mlp(m, {{"kind", "test"}, {"n_keypoints", "10"}}, path);
    std::map<std::string, std::string> meta;
    const auto back = load_mlp<float>(path, &meta);
    EXPECT_EQ(back.widths, m.widths);
    for (int l = 0; l < m.n_layers(); ++l) {
        EXPECT_EQ(back.weights[static_cast<std::size_t>(l)], m.weights[static_cast<std::size_t>(l)]);
        EXPECT_EQ(back.biases[static_cast<std::size_t>(l)], m.biases[static_cast<std::size_t>(l)]);
    }
    EXPECT_EQ(back.input_mean, m.input_mean);
    EXPECT_EQ(back.output_scale, m.output_scale);
    EXPECT_EQ(meta.at("kind"), "test");
    EXPECT_EQ(meta.at("n_keypoints"), "10");

    std::filesystem::resize_file(path, std::filesystem::file_size(path) - 3);
    EXPECT_THROW(load_mlp<float>(path), IntegrityError);
}

TEST(MlpStructure, ValidationAndParameterCount)
{
    auto m = make_mlp<double>({10, 4, 2}, 16);
    EXPECT_EQ(m.parameter_count(), 10u * 4 + 4 + 4 * 2 + 2);
    EXPECT_NO_THROW(m.validate());
    m.output_mean = Eigen::VectorXd::Zero(3);
    EXPECT_THROW(m.validate(), ArgumentError);
    EXPECT_THROW(make_mlp<double>({10}, 1), ArgumentError);
    EXPECT_THROW(make_mlp<double>({10, 0, 2}, 1), ArgumentError);
}
