/*
 * skelterp - 3D skeleton recovery from 2D keypoint heatmaps.
 *
 * File: include/skelterp/mlp.hpp
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

#ifndef SKELTERP_MLP_HPP
#define SKELTERP_MLP_HPP

#include "skelterp/common.hpp"
#include "skelterp/container.hpp"

#include "Eigen/Core"

#include <cmath>
#include <map>
#include <sstream>
#include <string>
#include <vector>

namespace skelterp {

/**
 * @brief Fully-connected network: rectifier on hidden layers, linear output.
 *
 * Inputs are standardised with (x - input_mean) / input_scale before the first
 * layer and outputs are mapped back with output_mean + output_scale * y.
 */
template <typename Scalar>
struct Mlp
{
    using Matrix = Eigen::Matrix<Scalar, Eigen::Dynamic, Eigen::Dynamic>;
    using Vector = Eigen::Matrix<Scalar, Eigen::Dynamic, 1>;

    std::vector<int> widths;
    std::vector<Matrix> weights; ///< weights[l] is widths[l+1] x widths[l].
    std::vector<Vector> biases;
    Vector input_mean;
    Vector input_scale;
    Vector output_mean;
    Vector output_scale;

    int n_layers() const { return static_cast<int>(weights.size()); }
    int input_width() const { return widths.front(); }
    int output_width() const { return widths.back(); }

    std::size_t parameter_count() const
    {
        std::size_t n = 0;
        for (int l = 0; l < n_layers(); ++l) {
            n += static_cast<std::size_t>(weights[l].size() + biases[l].size());
        }
        return n;
    }

    void validate() const
    {
        if (widths.size() < 2) {
            throw ArgumentError("mlp: need at least input and output widths");
        }
        for (int w : widths) {
            if (w < 1) {
                throw ArgumentError("mlp: layer widths must be positive");
            }
        }
        if (weights.size() + 1 != widths.size() || biases.size() != weights.size()) {
            throw ArgumentError("mlp: layer count does not match widths");
        }
        for (std::size_t l = 0; l < weights.size(); ++l) {
            if (weights[l].rows() != widths[l + 1] || weights[l].cols() != widths[l] || biases[l].size() != widths[l + 1]) {
                throw ArgumentError("mlp: layer " + std::to_string(l) + " dimensions inconsistent with widths");
            }
        }
        if (input_mean.size() != widths.front() || input_scale.size() != widths.front()
            || output_mean.size() != widths.back() || output_scale.size() != widths.back()) {
            throw ArgumentError("mlp: normalisation vectors do not match input/output widths");
        }
    }

    bool all_finite() const
    {
        for (int l = 0; l < n_layers(); ++l) {
            if (!weights[l].allFinite() || !biases[l].allFinite()) {
                return false;
            }
        }
        return true;
    }

    template <typename Other>
    Mlp<Other> cast() const
    {
        Mlp<Other> m;
        m.widths = widths;
        for (int l = 0; l < n_layers(); ++l) {
            m.weights.push_back(weights[l].template cast<Other>());
            m.biases.push_back(biases[l].template cast<Other>());
        }
        m.input_mean = input_mean.template cast<Other>();
        m.input_scale = input_scale.template cast<Other>();
        m.output_mean = output_mean.template cast<Other>();
        m.output_scale = output_scale.template cast<Other>();
        return m;
    }
};

/// He-style scaled uniform weights in +-sqrt(6 / fan_in), zero biases, identity normalisation.
template <typename Scalar>
Mlp<Scalar> make_mlp(const std::vector<int>& widths, std::uint64_t seed)
{
    Mlp<Scalar> m;
    m.widths = widths;
    if (widths.size() < 2) {
        throw ArgumentError("make_mlp: need at least input and output widths");
    }
    Rng rng(seed);
    for (std::size_t l = 0; l + 1 < widths.size(); ++l) {
        if (widths[l] < 1 || widths[l + 1] < 1) {
            throw ArgumentError("make_mlp: layer widths must be positive");
        }
        const double limit = std::sqrt(6.0 / widths[l]);
        typename Mlp<Scalar>::Matrix w(widths[l + 1], widths[l]);
        for (Eigen::Index c = 0; c < w.cols(); ++c) {
            for (Eigen::Index r = 0; r < w.rows(); ++r) {
                w(r, c) = static_cast<Scalar>(rng.uniform(-limit, limit));
            }
        }
        m.weights.push_back(std::move(w));
        m.biases.push_back(Mlp<Scalar>::Vector::Zero(widths[l + 1]));
    }
    m.input_mean = Mlp<Scalar>::Vector::Zero(widths.front());
    m.input_scale = Mlp<Scalar>::Vector::Ones(widths.front());
    m.output_mean = Mlp<Scalar>::Vector::Zero(widths.back());
    m.output_scale = Mlp<Scalar>::Vector::Ones(widths.back());
    return m;
}

/// Per-layer outputs recorded by the forward pass; activations[0] is the standardised input.
template <typename Scalar>
struct MlpTape
{
    std::vector<typename Mlp<Scalar>::Matrix> activations;
};

template <typename Scalar>
struct MlpGradients
{
    std::vector<typename Mlp<Scalar>::Matrix> weights;
    std::vector<typename Mlp<Scalar>::Vector> biases;
    typename Mlp<Scalar>::Matrix input;

    static MlpGradients zeros_like(const Mlp<Scalar>& m)
    {
        MlpGradients g;
        for (int l = 0; l < m.n_layers(); ++l) {
            g.weights.push_back(Mlp<Scalar>::Matrix::Zero(m.weights[l].rows(), m.weights[l].cols()));
            g.biases.push_back(Mlp<Scalar>::Vector::Zero(m.biases[l].size()));
        }
        return g;
    }

    double squared_norm() const
    {
        double s = 0.0;
        for (std::size_t l = 0; l < weights.size(); ++l) {
            s += static_cast<double>(weights[l].squaredNorm()) + static_cast<double>(biases[l].squaredNorm());
        }
        return s;
    }
};

/// Forward pass over a batch of standardised inputs (one column per sample); returns standardised outputs.
template <typename Scalar>
typename Mlp<Scalar>::Matrix forward_batch(const Mlp<Scalar>& m, const typename Mlp<Scalar>::Matrix& inputs,
                                           MlpTape<Scalar>* tape = nullptr)
{
    if (inputs.rows() != m.input_width()) {
        throw ArgumentError("mlp: input width " + std::to_string(inputs.rows()) + " does not match model width "
                            + std::to_string(m.input_width()));
    }
    typename Mlp<Scalar>::Matrix a = inputs;
    if (tape) {
        tape->activations.clear();
        tape->activations.push_back(a);
    }
    for (int l = 0; l < m.n_layers(); ++l) {
        typename Mlp<Scalar>::Matrix z = m.weights[l] * a;
        z.colwise() += m.biases[l];
        if (l + 1 < m.n_layers()) {
            z = z.cwiseMax(Scalar(0));
        }
        a = std::move(z);
        if (tape) {
            tape->activations.push_back(a);
        }
    }
    return a;
}

/**
 * Reverse pass. `upstream` holds dL/d(standardised output) per sample; gradients
 * are summed over the batch. The input gradient is only formed when requested.
 */
template <typename Scalar>
void backward_batch(const Mlp<Scalar>& m, const MlpTape<Scalar>& tape, const typename Mlp<Scalar>::Matrix& upstream,
                    MlpGradients<Scalar>& grads, bool want_input = false)
{
    if (grads.weights.size() != m.weights.size()) {
        grads = MlpGradients<Scalar>::zeros_like(m);
    }
    typename Mlp<Scalar>::Matrix delta = upstream;
    for (int l = m.n_layers() - 1; l >= 0; --l) {
        if (l + 1 < m.n_layers()) {
            delta = delta.cwiseProduct(
                (tape.activations[static_cast<std::size_t>(l + 1)].array() > Scalar(0)).template cast<Scalar>().matrix());
        }
        grads.weights[static_cast<std::size_t>(l)].noalias() = delta * tape.activations[static_cast<std::size_t>(l)].transpose();
        grads.biases[static_cast<std::size_t>(l)] = delta.rowwise().sum();
        if (l > 0 || want_input) {
            typename Mlp<Scalar>::Matrix next = m.weights[static_cast<std::size_t>(l)].transpose() * delta;
            delta = std::move(next);
        }
    }
    if (want_input) {
        grads.input = std::move(delta);
    }
}

template <typename Scalar>
typename Mlp<Scalar>::Matrix standardise_inputs(const Mlp<Scalar>& m, const typename Mlp<Scalar>::Matrix& raw)
{
    return (raw.colwise() - m.input_mean).array().colwise() / m.input_scale.array();
}

template <typename Scalar>
typename Mlp<Scalar>::Matrix destandardise_outputs(const Mlp<Scalar>& m, const typename Mlp<Scalar>::Matrix& y)
{
    return (y.array().colwise() * m.output_scale.array()).matrix().colwise() + m.output_mean;
}

/// Complete forward pass on one raw input vector.
template <typename Scalar>
typename Mlp<Scalar>::Vector mlp_apply(const Mlp<Scalar>& m, const typename Mlp<Scalar>::Vector& input)
{
    if (input.size() != m.input_width()) {
        throw ArgumentError("mlp_apply: input width " + std::to_string(input.size()) + " does not match model width "
                            + std::to_string(m.input_width()));
    }
    if (!input.allFinite()) {
        throw ArgumentError("mlp_apply: input has non-finite entries");
    }
    const typename Mlp<Scalar>::Matrix y = forward_batch(m, standardise_inputs(m, typename Mlp<Scalar>::Matrix(input)));
    return destandardise_outputs(m, y).col(0);
}

/**
 * @brief Reverse-mode gradients of mlp_apply for a single input.
 *
 * `upstream` is dL/d(output) in output units; the returned parameter and
 * input gradients include the normalisation maps.
 */
template <typename Scalar>
MlpGradients<Scalar> mlp_grad(const Mlp<Scalar>& m, const typename Mlp<Scalar>::Vector& input,
                              const typename Mlp<Scalar>::Vector& upstream)
{
    if (input.size() != m.input_width() || upstream.size() != m.output_width()) {
        throw ArgumentError("mlp_grad: input or upstream gradient width mismatch");
    }
    MlpTape<Scalar> tape;
    forward_batch(m, standardise_inputs(m, typename Mlp<Scalar>::Matrix(input)), &tape);
    const typename Mlp<Scalar>::Matrix up = upstream.cwiseProduct(m.output_scale);
    MlpGradients<Scalar> g = MlpGradients<Scalar>::zeros_like(m);
    backward_batch(m, tape, up, g, true);
    g.input = g.input.array().colwise() / m.input_scale.array();
    return g;
}

struct AdamSettings
{
    double learning_rate = 1e-3;
    double beta1 = 0.9;
    double beta2 = 0.999;
    double epsilon = 1e-8;
    double clip_norm = 5.0; ///< Global gradient-norm clip; <= 0 disables.
};

/// Adaptive moment estimation with global-norm gradient clipping.
template <typename Scalar>
class Adam
{
public:
    Adam(const Mlp<Scalar>& m, AdamSettings settings) : settings_(settings)
    {
        first_ = MlpGradients<Scalar>::zeros_like(m);
        second_ = MlpGradients<Scalar>::zeros_like(m);
    }

    /// Returns the pre-clip gradient norm.
    double step(Mlp<Scalar>& m, MlpGradients<Scalar>& g)
    {
        const double norm = std::sqrt(g.squared_norm());
        if (settings_.clip_norm > 0.0 && norm > settings_.clip_norm) {
            const auto s = static_cast<Scalar>(settings_.clip_norm / norm);
            for (std::size_t l = 0; l < g.weights.size(); ++l) {
                g.weights[l] *= s;
                g.biases[l] *= s;
            }
        }
        ++t_;
        const double c1 = 1.0 - std::pow(settings_.beta1, static_cast<double>(t_));
        const double c2 = 1.0 - std::pow(settings_.beta2, static_cast<double>(t_));
        const auto b1 = static_cast<Scalar>(settings_.beta1);
        const auto b2 = static_cast<Scalar>(settings_.beta2);
        const auto lr = static_cast<Scalar>(settings_.learning_rate * std::sqrt(c2) / c1);
        const auto eps = static_cast<Scalar>(settings_.epsilon * std::sqrt(c2));
        const auto update = [&](auto& param, const auto& grad, auto& mo, auto& ve) {
            mo = b1 * mo + (Scalar(1) - b1) * grad;
            ve = b2 * ve + (Scalar(1) - b2) * grad.cwiseProduct(grad);
            param.array() -= lr * mo.array() / (ve.array().sqrt() + eps);
        };
        for (std::size_t l = 0; l < g.weights.size(); ++l) {
            update(m.weights[l], g.weights[l], first_.weights[l], second_.weights[l]);
            update(m.biases[l], g.biases[l], first_.biases[l], second_.biases[l]);
        }
        return norm;
    }

    long steps() const { return t_; }
    void set_learning_rate(double lr) { settings_.learning_rate = lr; }

private:
    AdamSettings settings_;
    MlpGradients<Scalar> first_;
    MlpGradients<Scalar> second_;
    long t_ = 0;
};

inline constexpr const char* kModelFormat = "skelmlp-v1";

namespace detail {

template <typename V>
std::string join_values(const V& v)
{
    std::string s;
    for (Eigen::Index i = 0; i < v.size(); ++i) {
        if (i) {
            s += ' ';
        }
        s += format_exact(static_cast<double>(v(i)));
    }
    return s;
}

template <typename Scalar>
typename Mlp<Scalar>::Vector parse_values(const std::string& s, int expected)
{
    std::istringstream in(s);
    std::vector<double> values;
    double v = 0.0;
    while (in >> v) {
        values.push_back(v);
    }
    if (static_cast<int>(values.size()) != expected) {
        throw IntegrityError("model header vector has " + std::to_string(values.size()) + " values, expected "
                             + std::to_string(expected));
    }
    typename Mlp<Scalar>::Vector out(expected);
    for (int i = 0; i < expected; ++i) {
        out(i) = static_cast<Scalar>(values[static_cast<std::size_t>(i)]);
    }
    return out;
}

} // namespace detail

/**
 * @brief Writes a skelmlp-v1 container.
 *
 * Header: widths, normalisations and caller metadata (stored as "meta.<key>").
 * Body: little-endian f32 weights (row-major per layer) followed by biases.
 */
template <typename Scalar>
void save_mlp(const Mlp<Scalar>& m, const std::map<std::string, std::string>& metadata, const std::string& path)
{
    m.validate();
    detail::Container c;
    c.format = kModelFormat;
    std::string widths;
    for (std::size_t i = 0; i < m.widths.size(); ++i) {
        widths += (i ? " " : "") + std::to_string(m.widths[i]);
    }
    c.header = {{"widths", widths},
                {"activation", "relu-hidden,linear-output"},
                {"input_mean", detail::join_values(m.input_mean)},
                {"input_scale", detail::join_values(m.input_scale)},
                {"output_mean", detail::join_values(m.output_mean)},
                {"output_scale", detail::join_values(m.output_scale)}};
    for (const auto& [k, v] : metadata) {
        if (v.find('\n') != std::string::npos) {
            throw ArgumentError("save_mlp: metadata values must be single-line");
        }
        c.header.emplace_back("meta." + k, v);
    }
    ByteWriter w;
    for (int l = 0; l < m.n_layers(); ++l) {
        for (Eigen::Index r = 0; r < m.weights[l].rows(); ++r) {
            for (Eigen::Index col = 0; col < m.weights[l].cols(); ++col) {
                w.put(static_cast<float>(m.weights[l](r, col)));
            }
        }
        for (Eigen::Index r = 0; r < m.biases[l].size(); ++r) {
            w.put(static_cast<float>(m.biases[l](r)));
        }
    }
    c.body = std::move(w.bytes());
    detail::write_container(c, path);
}

template <typename Scalar>
Mlp<Scalar> load_mlp(const std::string& path, std::map<std::string, std::string>* metadata = nullptr)
{
    const detail::Container c = detail::read_container(path, kModelFormat);
    Mlp<Scalar> m;
    {
        std::istringstream in(c.get("widths"));
        int w = 0;
        while (in >> w) {
            m.widths.push_back(w);
        }
    }
    if (m.widths.size() < 2) {
        throw IntegrityError("'" + path + "': model declares fewer than two layer widths");
    }
    m.input_mean = detail::parse_values<Scalar>(c.get("input_mean"), m.widths.front());
    m.input_scale = detail::parse_values<Scalar>(c.get("input_scale"), m.widths.front());
    m.output_mean = detail::parse_values<Scalar>(c.get("output_mean"), m.widths.back());
    m.output_scale = detail::parse_values<Scalar>(c.get("output_scale"), m.widths.back());
    ByteReader r(c.body.data(), c.body.size());
    for (std::size_t l = 0; l + 1 < m.widths.size(); ++l) {
        typename Mlp<Scalar>::Matrix w(m.widths[l + 1], m.widths[l]);
        for (Eigen::Index row = 0; row < w.rows(); ++row) {
            for (Eigen::Index col = 0; col < w.cols(); ++col) {
                w(row, col) = static_cast<Scalar>(r.get<float>());
            }
        }
        typename Mlp<Scalar>::Vector b(m.widths[l + 1]);
        for (Eigen::Index row = 0; row < b.size(); ++row) {
            b(row) = static_cast<Scalar>(r.get<float>());
        }
        m.weights.push_back(std::move(w));
        m.biases.push_back(std::move(b));
    }
    if (!r.exhausted()) {
        throw IntegrityError("'" + path + "': trailing bytes after model weights");
    }
    if (metadata) {
        metadata->clear();
        for (const auto& [k, v] : c.header) {
            if (k.rfind("meta.", 0) == 0) {
                (*metadata)[k.substr(5)] = v;
            }
        }
    }
    m.validate();
    return m;
}

} // namespace skelterp

#endif // SKELTERP_MLP_HPP
