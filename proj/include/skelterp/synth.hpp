/*
 * skelterp - 3D skeleton recovery from 2D keypoint heatmaps.
 *
 * File: include/skelterp/synth.hpp
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

#ifndef SKELTERP_SYNTH_HPP
#define SKELTERP_SYNTH_HPP

#include "skelterp/camera.hpp"
#include "skelterp/common.hpp"
#include "skelterp/container.hpp"
#include "skelterp/heatmap.hpp"
#include "skelterp/skeleton.hpp"

#include "Eigen/Core"
#include "json.hpp"

#include <array>
#include <map>
#include <numbers>
#include <sstream>
#include <string>
#include <vector>

namespace skelterp {

/// Uniform sampling box for synthetic instances.
struct SamplingRanges
{
    std::vector<Interval> alpha;
    std::array<Interval, 3> omega{Interval{-std::numbers::pi / 2, std::numbers::pi / 2},
                                  Interval{-std::numbers::pi / 2, std::numbers::pi / 2},
                                  Interval{-std::numbers::pi / 2, std::numbers::pi / 2}};
    std::array<Interval, 3> t{Interval{-0.5, 0.5}, Interval{-0.5, 0.5}, Interval{2.0, 6.0}};
    Interval f{1.0, 3.0};
    /// Standard deviation of the per-coordinate 3D perturbation, as a fraction of the bounding-box diagonal.
    double perturbation = 0.01;

    void validate() const
    {
        for (std::size_t k = 0; k < alpha.size(); ++k) {
            if (!alpha[k].valid()) {
                throw ConfigError("sampling ranges: alpha[" + std::to_string(k) + "] is empty");
            }
        }
        for (int i = 0; i < 3; ++i) {
            if (!omega[static_cast<std::size_t>(i)].valid() || !t[static_cast<std::size_t>(i)].valid()) {
                throw ConfigError("sampling ranges: omega/t interval " + std::to_string(i) + " is empty");
            }
        }
        for (const auto& iv : omega) {
            if (std::sqrt(3.0) * std::max(std::abs(iv.lo), std::abs(iv.hi)) >= std::numbers::pi) {
                throw ConfigError("sampling ranges: omega box must stay inside |omega| < pi");
            }
        }
        if (!(t[2].lo > 10.0 * kDepthEpsilon)) {
            throw ConfigError("sampling ranges: depth lower bound must exceed 10 * depth epsilon");
        }
        if (!f.valid() || !(f.lo > 0.0)) {
            throw ConfigError("sampling ranges: focal range must be non-empty and positive");
        }
        if (!(perturbation >= 0.0) || !std::isfinite(perturbation)) {
            throw ConfigError("sampling ranges: perturbation must be a finite non-negative fraction");
        }
    }

    friend bool operator==(const SamplingRanges&, const SamplingRanges&) = default;
};

inline SamplingRanges default_ranges(const SkeletonSpec& spec)
{
    SamplingRanges r;
    r.alpha = spec.alpha_ranges;
    return r;
}

struct RenderSettings
{
    HeatmapGeometry geometry;
    double sigma = 1.5;

    friend bool operator==(const RenderSettings&, const RenderSettings&) = default;
};

struct SampleRecord
{
    StructParams params;
    CameraPose pose;
    Shape3D y_clean;
    Shape3D y_perturbed;
    Keypoints2D x;
    HeatmapStack heatmaps; ///< May be empty when a dataset does not keep heatmaps in memory.
    std::vector<std::uint8_t> visibility;
};

inline constexpr int kMaxSampleAttempts = 100;
inline constexpr int kMinVisibleKeypoints = 4;

/**
 * @brief Draws one synthetic instance: parameters, perturbed 3D keypoints,
 * their projection and heatmaps.
 *
 * Draws are retried (up to 100 times) when a depth falls below the epsilon
 * or fewer than four keypoints land inside the heatmap window. `attempts`
 * receives the number of draws used.
 */
inline SampleRecord sample_instance(const SkeletonSpec& spec, const SamplingRanges& ranges, const RenderSettings& render,
                                    Rng& rng, int* attempts = nullptr)
{
    if (static_cast<int>(ranges.alpha.size()) != spec.n_bases()) {
        throw ConfigError("sampling ranges: alpha has " + std::to_string(ranges.alpha.size())
                          + " intervals, spec has " + std::to_string(spec.n_bases()) + " base shapes");
    }
    for (int attempt = 1; attempt <= kMaxSampleAttempts; ++attempt) {
        SampleRecord rec;
        rec.params.alpha.resize(spec.n_bases());
        for (int k = 0; k < spec.n_bases(); ++k) {
            rec.params.alpha(k) = rng.uniform(ranges.alpha[static_cast<std::size_t>(k)]);
        }
        for (int i = 0; i < 3; ++i) {
            rec.pose.omega(i) = rng.uniform(ranges.omega[static_cast<std::size_t>(i)]);
        }
        for (int i = 0; i < 3; ++i) {
            rec.pose.t(i) = rng.uniform(ranges.t[static_cast<std::size_t>(i)]);
        }
        rec.pose.f = rng.uniform(ranges.f);
        rec.y_clean = compose_shape(spec, rec.params);
        const double stddev = ranges.perturbation * diagonal_length(rec.y_clean);
        rec.y_perturbed = rec.y_clean;
        for (Eigen::Index c = 0; c < rec.y_perturbed.coords.cols(); ++c) {
            for (int r = 0; r < 3; ++r) {
                rec.y_perturbed.coords(r, c) += rng.normal(0.0, stddev);
            }
        }
        try {
            rec.x = project(rec.y_perturbed, rec.pose);
        } catch (const DomainError&) {
            continue;
        }
        rec.heatmaps = render_heatmaps(rec.x, render.geometry, render.sigma);
        rec.visibility = rec.heatmaps.visible;
        int visible = 0;
        for (auto v : rec.visibility) {
            visible += v ? 1 : 0;
        }
        if (visible < kMinVisibleKeypoints) {
            continue;
        }
        if (attempts) {
            *attempts = attempt;
        }
        return rec;
    }
    throw ConfigError("sample_instance: no valid instance after " + std::to_string(kMaxSampleAttempts)
                      + " attempts; check sampling ranges and heatmap window");
}

struct DatasetProvenance
{
    std::uint64_t seed = 0;
    std::string generator_version = kVersion;
    std::uint64_t extra_draws = 0; ///< Rejected draws across all records.
};

struct Dataset
{
    SkeletonSpec spec;
    SamplingRanges ranges;
    RenderSettings render;
    std::vector<SampleRecord> records;
    DatasetProvenance provenance;
    bool heatmaps_stored = false;

    std::size_t size() const { return records.size(); }

    double resample_rate() const
    {
        const double draws = static_cast<double>(records.size() + provenance.extra_draws);
        return draws > 0 ? static_cast<double>(provenance.extra_draws) / draws : 0.0;
    }
};

/// Stored heatmaps of record i, or a fresh render of its keypoints.
inline HeatmapStack heatmaps_for(const Dataset& ds, std::size_t i)
{
    const auto& rec = ds.records.at(i);
    if (!rec.heatmaps.values.empty()) {
        return rec.heatmaps;
    }
    return render_heatmaps(rec.x, ds.render.geometry, ds.render.sigma);
}

/**
 * @brief Generates `count` independent records.
 *
 * Record i draws from its own stream derived from (seed, i), so the output is
 * a pure function of the inputs regardless of `threads`.
 */
inline Dataset generate_dataset(const SkeletonSpec& spec, const SamplingRanges& ranges, const RenderSettings& render,
                                std::size_t count, std::uint64_t seed, unsigned threads = 1,
                                bool store_heatmaps = false)
{
    if (count < 1) {
        throw ArgumentError("generate_dataset: count must be at least 1");
    }
    spec.validate();
    ranges.validate();
    Dataset ds;
    ds.spec = spec;
    ds.ranges = ranges;
    ds.render = render;
    ds.heatmaps_stored = store_heatmaps;
    ds.provenance.seed = seed;
    ds.records.resize(count);
    std::vector<int> attempts(count, 1);
    parallel_for(count, threads, [&](std::size_t i) {
        Rng rng = Rng::stream(seed, i);
        ds.records[i] = sample_instance(spec, ranges, render, rng, &attempts[i]);
        if (!store_heatmaps) {
            ds.records[i].heatmaps = HeatmapStack{};
        }
    });
    for (int a : attempts) {
        ds.provenance.extra_draws += static_cast<std::uint64_t>(a - 1);
    }
    return ds;
}

namespace detail {

inline std::string format_intervals(const std::vector<Interval>& ivs)
{
    std::string s;
    for (std::size_t i = 0; i < ivs.size(); ++i) {
        if (i) {
            s += ';';
        }
        s += format_exact(ivs[i].lo) + ',' + format_exact(ivs[i].hi);
    }
    return s;
}

inline std::vector<Interval> parse_intervals(const std::string& s)
{
    std::vector<Interval> out;
    std::stringstream ss(s);
    std::string item;
    while (std::getline(ss, item, ';')) {
        const auto comma = item.find(',');
        if (comma == std::string::npos) {
            throw IntegrityError("malformed interval list '" + s + "'");
        }
        out.push_back({std::stod(item.substr(0, comma)), std::stod(item.substr(comma + 1))});
    }
    return out;
}

} // namespace detail

inline constexpr const char* kDatasetFormat = "skelds-v1";

/**
 * @brief Writes a dataset as a skelds-v1 container.
 *
 * Body records are fixed width, little endian: alpha (K f64), omega (3 f64),
 * t (3 f64), f (f64), y_clean (3N f64), y_perturbed (3N f64), x (2N f64),
 * visibility (N u8), then N*H*W f32 heatmap cells when heatmaps are stored.
 */
inline void save_dataset(const Dataset& ds, const std::string& path)
{
    const int n = ds.spec.n_keypoints();
    detail::Container c;
    c.format = kDatasetFormat;
    c.header = {
        {"generator_version", ds.provenance.generator_version},
        {"seed", std::to_string(ds.provenance.seed)},
        {"count", std::to_string(ds.records.size())},
        {"n_keypoints", std::to_string(n)},
        {"n_bases", std::to_string(ds.spec.n_bases())},
        {"heatmaps_stored", ds.heatmaps_stored ? "1" : "0"},
        {"grid_width", std::to_string(ds.render.geometry.width)},
        {"grid_height", std::to_string(ds.render.geometry.height)},
        {"cell_size", format_exact(ds.render.geometry.cell_size)},
        {"sigma", format_exact(ds.render.sigma)},
        {"range_alpha", detail::format_intervals(ds.ranges.alpha)},
        {"range_omega", detail::format_intervals({ds.ranges.omega.begin(), ds.ranges.omega.end()})},
        {"range_t", detail::format_intervals({ds.ranges.t.begin(), ds.ranges.t.end()})},
        {"range_f", detail::format_intervals({ds.ranges.f})},
        {"perturbation_std_fraction", format_exact(ds.ranges.perturbation)},
        {"perturbation_note", "per-coordinate Gaussian standard deviation (not variance) as a fraction of the "
                              "bounding-box diagonal"},
        {"extra_draws", std::to_string(ds.provenance.extra_draws)},
        {"spec", spec_to_json(ds.spec).dump()},
    };
    ByteWriter w;
    for (const auto& rec : ds.records) {
        for (Eigen::Index k = 0; k < rec.params.alpha.size(); ++k) {
            w.put(rec.params.alpha(k));
        }
        for (int i = 0; i < 3; ++i) {
            w.put(rec.pose.omega(i));
        }
        for (int i = 0; i < 3; ++i) {
            w.put(rec.pose.t(i));
        }
        w.put(rec.pose.f);
        for (const auto* m : {&rec.y_clean.coords, &rec.y_perturbed.coords}) {
            for (Eigen::Index i = 0; i < m->size(); ++i) {
                w.put((*m)(i));
            }
        }
        for (Eigen::Index i = 0; i < rec.x.coords.size(); ++i) {
            w.put(rec.x.coords(i));
        }
        for (int i = 0; i < n; ++i) {
            w.put(static_cast<std::uint8_t>(rec.visibility[static_cast<std::size_t>(i)]));
        }
        if (ds.heatmaps_stored) {
            const HeatmapStack hm = rec.heatmaps.values.empty() ? render_heatmaps(rec.x, ds.render.geometry, ds.render.sigma)
                                                                : rec.heatmaps;
            for (float v : hm.values) {
                w.put(v);
            }
        }
    }
    c.body = std::move(w.bytes());
    detail::write_container(c, path);
}

/// Reads a skelds-v1 container; corrupt or truncated files raise IntegrityError.
inline Dataset load_dataset(const std::string& path)
{
    const detail::Container c = detail::read_container(path, kDatasetFormat);
    Dataset ds;
    std::size_t count = 0;
    try {
        ds.spec = spec_from_json(nlohmann::json::parse(c.get("spec")));
        ds.provenance.generator_version = c.get("generator_version");
        ds.provenance.seed = std::stoull(c.get("seed"));
        ds.provenance.extra_draws = std::stoull(c.get("extra_draws"));
        ds.heatmaps_stored = c.get("heatmaps_stored") == "1";
        ds.render.geometry.width = std::stoi(c.get("grid_width"));
        ds.render.geometry.height = std::stoi(c.get("grid_height"));
        ds.render.geometry.cell_size = std::stod(c.get("cell_size"));
        ds.render.sigma = std::stod(c.get("sigma"));
        ds.ranges.alpha = detail::parse_intervals(c.get("range_alpha"));
        const auto omega = detail::parse_intervals(c.get("range_omega"));
        const auto t = detail::parse_intervals(c.get("range_t"));
        const auto f = detail::parse_intervals(c.get("range_f"));
        if (omega.size() != 3 || t.size() != 3 || f.size() != 1) {
            throw IntegrityError("'" + path + "': malformed sampling ranges");
        }
        std::copy(omega.begin(), omega.end(), ds.ranges.omega.begin());
        std::copy(t.begin(), t.end(), ds.ranges.t.begin());
        ds.ranges.f = f[0];
        ds.ranges.perturbation = std::stod(c.get("perturbation_std_fraction"));
        count = std::stoull(c.get("count"));
        if (std::stoi(c.get("n_keypoints")) != ds.spec.n_keypoints() || std::stoi(c.get("n_bases")) != ds.spec.n_bases()) {
            throw IntegrityError("'" + path + "': header dimensions disagree with embedded spec");
        }
    } catch (const std::logic_error&) {
        throw IntegrityError("'" + path + "': malformed numeric header value");
    } catch (const ConfigError& e) {
        throw IntegrityError("'" + path + "': embedded spec invalid: " + e.what());
    } catch (const nlohmann::json::exception& e) {
        throw IntegrityError("'" + path + "': embedded spec unreadable: " + e.what());
    }

    const int n = ds.spec.n_keypoints();
    const int k = ds.spec.n_bases();
    ByteReader r(c.body.data(), c.body.size());
    ds.records.resize(count);
    for (auto& rec : ds.records) {
        rec.params.alpha.resize(k);
        for (int i = 0; i < k; ++i) {
            rec.params.alpha(i) = r.get<double>();
        }
        for (int i = 0; i < 3; ++i) {
            rec.pose.omega(i) = r.get<double>();
        }
        for (int i = 0; i < 3; ++i) {
            rec.pose.t(i) = r.get<double>();
        }
        rec.pose.f = r.get<double>();
        rec.y_clean.coords.resize(3, n);
        rec.y_perturbed.coords.resize(3, n);
        for (auto* m : {&rec.y_clean.coords, &rec.y_perturbed.coords}) {
            for (Eigen::Index i = 0; i < m->size(); ++i) {
                (*m)(i) = r.get<double>();
            }
        }
        rec.x.coords.resize(2, n);
        for (Eigen::Index i = 0; i < rec.x.coords.size(); ++i) {
            rec.x.coords(i) = r.get<double>();
        }
        rec.visibility.resize(static_cast<std::size_t>(n));
        for (int i = 0; i < n; ++i) {
            rec.visibility[static_cast<std::size_t>(i)] = r.get<std::uint8_t>();
        }
        if (ds.heatmaps_stored) {
            rec.heatmaps = HeatmapStack(ds.render.geometry, n);
            for (auto& v : rec.heatmaps.values) {
                v = r.get<float>();
            }
            rec.heatmaps.visible = rec.visibility;
        }
    }
    if (!r.exhausted()) {
        throw IntegrityError("'" + path + "': trailing bytes after " + std::to_string(count) + " records");
    }
    return ds;
}

/// 2D supervision only: keypoint labels with visibility, no 3D fields.
struct LabeledKeypoints
{
    Keypoints2D x;
    std::vector<std::uint8_t> visible;
};

struct Dataset2D
{
    int n_keypoints = 0;
    RenderSettings render;
    std::vector<LabeledKeypoints> records;

    std::size_t size() const { return records.size(); }
};

inline Dataset2D strip_3d(const Dataset& ds)
{
    Dataset2D out;
    out.n_keypoints = ds.spec.n_keypoints();
    out.render = ds.render;
    out.records.reserve(ds.records.size());
    for (const auto& rec : ds.records) {
        out.records.push_back({rec.x, rec.visibility});
    }
    return out;
}

inline HeatmapStack heatmaps_for(const Dataset2D& ds, std::size_t i)
{
    return render_heatmaps(ds.records.at(i).x, ds.render.geometry, ds.render.sigma);
}

} // namespace skelterp

#endif // SKELTERP_SYNTH_HPP
