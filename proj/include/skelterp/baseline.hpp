/*
 * skelterp - 3D skeleton recovery from 2D keypoint heatmaps.
 *
 * File: include/skelterp/baseline.hpp
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

#ifndef SKELTERP_BASELINE_HPP
#define SKELTERP_BASELINE_HPP

#include "skelterp/camera.hpp"
#include "skelterp/common.hpp"
#include "skelterp/heatmap.hpp"
#include "skelterp/rotation.hpp"
#include "skelterp/skeleton.hpp"

#include "Eigen/Cholesky"
#include "Eigen/Core"
#include "Eigen/Eigenvalues"
#include "Eigen/QR"
#include "Eigen/SVD"

#include <cmath>
#include <limits>
#include <numbers>
#include <vector>

namespace skelterp {

/// Ridge weight pulling alpha towards (1, 0, ..., 0); applied only to rank-deficient basis systems.
inline constexpr double kAlphaRidge = 1e-6;

/// Orthographic fit x ~ scale * (first two rows of R) * Y + translation.
struct ParallelInit
{
    StructParams params;
    Eigen::Matrix3d rotation = Eigen::Matrix3d::Identity();
    Eigen::Vector2d translation = Eigen::Vector2d::Zero();
    double scale = 1.0;
    double objective = 0.0; ///< Mean squared orthographic residual.
    bool regularized = false; ///< Set when a basis system was rank deficient.
};

struct FitResult
{
    StructParams params;
    CameraPose pose;
    double residual = 0.0; ///< Mean squared reprojection error over visible keypoints.
    int iterations = 0;
    bool converged = false;
    bool regularized = false;
    std::vector<double> trace; ///< Objective after each accepted iteration, starting value first.
};

enum class DescentMethod
{
    LevenbergMarquardt, ///< Gauss-Newton preconditioned direction.
    Steepest,           ///< Plain negative gradient.
};

struct FitOptions
{
    int parallel_iterations = 20;
    int max_iterations = 2000;
    double gradient_tolerance = 1e-8;
    double relative_tolerance = 1e-10;
    Interval f_range{1.0, 3.0}; ///< Focal range whose midpoint seeds the perspective lift.
    DescentMethod method = DescentMethod::LevenbergMarquardt;
};

namespace detail {

inline std::vector<int> visible_indices(const std::vector<std::uint8_t>& visibility, int n)
{
    std::vector<int> idx;
    for (int i = 0; i < n; ++i) {
        if (visibility.empty() || visibility[static_cast<std::size_t>(i)]) {
            idx.push_back(i);
        }
    }
    return idx;
}

inline bool rank_deficient(const Eigen::MatrixXd& gram)
{
    const Eigen::VectorXd ev = Eigen::SelfAdjointEigenSolver<Eigen::MatrixXd>(gram, Eigen::EigenvaluesOnly).eigenvalues();
    return !(ev.minCoeff() > 1e-10 * std::max(ev.maxCoeff(), 1e-300));
}

/// Solves gram x = b; a rank-deficient gram gets the ridge added and sets `deficient`.
inline Eigen::VectorXd ridge_solve(const Eigen::MatrixXd& gram, const Eigen::VectorXd& b, double ridge, bool* deficient)
{
    if (!rank_deficient(gram)) {
        return gram.ldlt().solve(b);
    }
    *deficient = true;
    return (gram + ridge * Eigen::MatrixXd::Identity(gram.rows(), gram.cols())).ldlt().solve(b);
}

} // namespace detail

namespace detail {

/// Starting rotations for the parallel initialiser: 8 azimuths at 3 elevations.
inline std::vector<Eigen::Matrix3d> parallel_starts()
{
    std::vector<Eigen::Matrix3d> starts;
    for (double elevation : {-0.6, 0.0, 0.6}) {
        for (int a = 0; a < 8; ++a) {
            const double azimuth = 2.0 * std::numbers::pi * a / 8.0;
            starts.push_back(rodrigues(Eigen::Vector3d(elevation, 0.0, 0.0)) * rodrigues(Eigen::Vector3d(0.0, azimuth, 0.0)));
        }
    }
    return starts;
}

} // namespace detail

/**
 * @brief Parallel-projection initial guess by alternating least squares.
 *
 * Alternates a linear solve for the camera rows (projected onto orthonormal
 * rows by polar factorisation) with a ridge-regularised linear solve for
 * alpha, with alpha_1 frozen at 1. ALS is run from the mean-shape camera fit
 * and from a fixed grid of starting rotations; the lowest objective wins.
 */
inline ParallelInit init_parallel(const Keypoints2D& x, const SkeletonSpec& spec, const std::vector<std::uint8_t>& visibility,
                                  int iterations = 20)
{
    const int n = spec.n_keypoints();
    const int k = spec.n_bases();
    if (x.n_keypoints() != n || (!visibility.empty() && static_cast<int>(visibility.size()) != n)) {
        throw ArgumentError("init_parallel: keypoint or visibility count does not match the spec");
    }
    const auto vis = detail::visible_indices(visibility, n);
    if (vis.size() < 4) {
        throw UnderdeterminedError("init_parallel: need at least 4 visible keypoints, got " + std::to_string(vis.size()));
    }
    const auto nv = static_cast<Eigen::Index>(vis.size());
    Eigen::Matrix2Xd xv(2, nv);
    std::vector<Eigen::Matrix3Xd> bv(static_cast<std::size_t>(k), Eigen::Matrix3Xd(3, nv));
    for (Eigen::Index j = 0; j < nv; ++j) {
        xv.col(j) = x.coords.col(vis[static_cast<std::size_t>(j)]);
        for (int b = 0; b < k; ++b) {
            bv[static_cast<std::size_t>(b)].col(j) = spec.base_shapes[static_cast<std::size_t>(b)].col(vis[static_cast<std::size_t>(j)]);
        }
    }
    const Eigen::Vector2d x_mean = xv.rowwise().mean();
    const Eigen::Matrix2Xd xc = xv.colwise() - x_mean;

    const auto run = [&](const Eigen::Matrix3d* start) {
        ParallelInit out;
        out.params.alpha = Eigen::VectorXd::Zero(k);
        out.params.alpha(0) = 1.0;
        Eigen::Matrix3d previous_rotation = Eigen::Matrix3d::Identity();
        double previous = std::numeric_limits<double>::infinity();
        for (int it = 0; it < std::max(iterations, 1); ++it) {
            Eigen::Matrix3Xd y = Eigen::Matrix3Xd::Zero(3, nv);
            for (int b = 0; b < k; ++b) {
                y += out.params.alpha(b) * bv[static_cast<std::size_t>(b)];
            }
            const Eigen::Vector3d y_mean = y.rowwise().mean();
            const Eigen::Matrix3Xd yc = y.colwise() - y_mean;

            const auto camera_error = [&](const Eigen::Matrix3d& r, double sc) {
                return (xc - sc * r.topRows<2>() * yc).squaredNorm();
            };
            const auto best_scale = [&](const Eigen::Matrix3d& r) {
                const Eigen::Matrix2Xd qy = r.topRows<2>() * yc;
                const double d = qy.squaredNorm();
                return d > 0.0 ? xc.cwiseProduct(qy).sum() / d : 0.0;
            };
            Eigen::Matrix3d r;
            if (it == 0 && start) {
                r = *start;
            } else {
                // Seed: unconstrained least squares projected onto orthonormal rows.
                const Eigen::Matrix3d yy = yc * yc.transpose();
                const Eigen::Matrix<double, 2, 3> m = (xc * yc.transpose()) * yy.completeOrthogonalDecomposition().pseudoInverse();
                Eigen::JacobiSVD<Eigen::Matrix<double, 2, 3>> svd(m, Eigen::ComputeFullU | Eigen::ComputeFullV);
                Eigen::Matrix<double, 2, 3> q0 = svd.matrixU() * svd.matrixV().leftCols<2>().transpose();
                Eigen::Matrix3d seed;
                seed.row(0) = q0.row(0);
                seed.row(1) = q0.row(1);
                seed.row(2) = q0.row(0).cross(q0.row(1));
                r = seed;
                if (it > 0 && camera_error(previous_rotation, best_scale(previous_rotation))
                                  < camera_error(seed, best_scale(seed))) {
                    r = previous_rotation;
                }
            }
            // Gauss-Newton on the rotation with the scale eliminated in closed form.
            for (int gn = 0; gn < 20; ++gn) {
                const double sc = best_scale(r);
                const double current = camera_error(r, sc);
                Eigen::MatrixXd jac(2 * nv, 4);
                const Eigen::Matrix3Xd ry = r * yc;
                for (Eigen::Index j = 0; j < nv; ++j) {
                    // d(R exp[d]) y = -R [y]x d, first two rows.
                    const Eigen::Matrix3d dr = -r * skew(Eigen::Vector3d(yc.col(j)));
                    jac.block<2, 3>(2 * j, 0) = sc * dr.topRows<2>();
                    jac.block<2, 1>(2 * j, 3) = ry.col(j).head<2>();
                }
                const Eigen::Matrix2Xd res = sc * ry.topRows<2>() - xc;
                const Eigen::VectorXd rv = Eigen::Map<const Eigen::VectorXd>(res.data(), res.size());
                const Eigen::Vector4d step = -(jac.transpose() * jac + 1e-12 * Eigen::Matrix4d::Identity()).ldlt().solve(jac.transpose() * rv);
                bool improved = false;
                for (double h = 1.0; h > 1e-4; h *= 0.5) {
                    const Eigen::Matrix3d trial = r * rodrigues(Eigen::Vector3d(h * step.head<3>()));
                    if (camera_error(trial, best_scale(trial)) < current) {
                        r = trial;
                        improved = true;
                        break;
                    }
                }
                if (!improved || step.head<3>().norm() < 1e-12) {
                    break;
                }
            }
            Eigen::Matrix<double, 2, 3> q = r.topRows<2>();
            double s = best_scale(r);
            if (s < 0.0) {
                q = -q;
                s = -s;
            }
            if (!(s > 0.0)) {
                s = 1.0;
                out.regularized = true;
            }
            out.rotation.row(0) = q.row(0);
            out.rotation.row(1) = q.row(1);
            out.rotation.row(2) = q.row(0).cross(q.row(1));
            previous_rotation = out.rotation;
            out.scale = s;
            out.translation = x_mean - s * q * y_mean;

            // Structure: linear in alpha_2..K given the camera.
            if (k > 1) {
                Eigen::MatrixXd a(2 * nv, k - 1);
                for (int b = 1; b < k; ++b) {
                    const Eigen::Matrix2Xd col = s * q * bv[static_cast<std::size_t>(b)];
                    a.col(b - 1) = Eigen::Map<const Eigen::VectorXd>(col.data(), col.size());
                }
                const Eigen::Matrix2Xd rest = (xv - s * q * bv[0]).colwise() - out.translation;
                const Eigen::VectorXd rhs = Eigen::Map<const Eigen::VectorXd>(rest.data(), rest.size());
                out.params.alpha.tail(k - 1) = detail::ridge_solve(a.transpose() * a / static_cast<double>(nv),
                                                                   a.transpose() * rhs / static_cast<double>(nv), kAlphaRidge,
                                                                   &out.regularized);
            }

            Eigen::Matrix3Xd y_new = Eigen::Matrix3Xd::Zero(3, nv);
            for (int b = 0; b < k; ++b) {
                y_new += out.params.alpha(b) * bv[static_cast<std::size_t>(b)];
            }
            const double objective = ((s * q * y_new).colwise() + out.translation - xv).squaredNorm() / static_cast<double>(nv);
            out.objective = objective;
            if (std::isfinite(previous) && previous - objective <= 1e-15 * previous) {
                break;
            }
            previous = objective;
        }
        return out;
    };

    // Joint damped Gauss-Newton polish of an ALS result on the same objective.
    const auto polish = [&](ParallelInit in) {
        const double ridge = in.regularized ? kAlphaRidge : 0.0;
        const auto shape = [&](const Eigen::VectorXd& alpha) {
            Eigen::Matrix3Xd y = Eigen::Matrix3Xd::Zero(3, nv);
            for (int b = 0; b < k; ++b) {
                y += alpha(b) * bv[static_cast<std::size_t>(b)];
            }
            return y;
        };
        const auto residual = [&](const ParallelInit& c) {
            const Eigen::Matrix2Xd r = ((c.scale * c.rotation.topRows<2>() * shape(c.params.alpha)).colwise() + c.translation) - xv;
            return Eigen::VectorXd(Eigen::Map<const Eigen::VectorXd>(r.data(), r.size()));
        };
        const auto objective = [&](const ParallelInit& c) {
            return residual(c).squaredNorm() / static_cast<double>(nv) + ridge * c.params.alpha.tail(k - 1).squaredNorm();
        };
        const int dim = k - 1 + 6;
        double current = objective(in);
        double damping = 1e-3;
        for (int it = 0; it < 100; ++it) {
            const Eigen::Matrix3Xd y = shape(in.params.alpha);
            Eigen::MatrixXd jac(2 * nv, dim);
            for (Eigen::Index j = 0; j < nv; ++j) {
                for (int b = 1; b < k; ++b) {
                    jac.block<2, 1>(2 * j, b - 1)
                        = in.scale * in.rotation.topRows<2>() * bv[static_cast<std::size_t>(b)].col(j);
                }
                jac.block<2, 3>(2 * j, k - 1) = -in.scale * (in.rotation * skew(Eigen::Vector3d(y.col(j)))).topRows<2>();
                jac.block<2, 1>(2 * j, k + 2) = in.rotation.topRows<2>() * y.col(j);
                jac.block<2, 2>(2 * j, k + 3) = Eigen::Matrix2d::Identity();
            }
            const double w = 1.0 / static_cast<double>(nv);
            Eigen::MatrixXd h = w * jac.transpose() * jac;
            Eigen::VectorXd g = w * jac.transpose() * residual(in);
            h.topLeftCorner(k - 1, k - 1) += ridge * Eigen::MatrixXd::Identity(k - 1, k - 1);
            g.head(k - 1) += ridge * in.params.alpha.tail(k - 1);
            if (g.norm() < 1e-14) {
                break;
            }
            bool accepted = false;
            for (int attempt = 0; attempt < 10 && !accepted; ++attempt) {
                Eigen::MatrixXd hd = h;
                hd.diagonal() += damping * h.diagonal().cwiseMax(1e-12);
                const Eigen::VectorXd step = -hd.ldlt().solve(g);
                ParallelInit trial = in;
                trial.params.alpha.tail(k - 1) += step.head(k - 1);
                trial.rotation = in.rotation * rodrigues(Eigen::Vector3d(step.segment<3>(k - 1)));
                trial.scale += step(k + 2);
                trial.translation += step.segment<2>(k + 3);
                const double value = objective(trial);
                if (step.allFinite() && trial.scale > 0.0 && value < current) {
                    accepted = current - value > 1e-15 * current;
                    in = trial;
                    current = value;
                    damping = std::max(damping * 0.3, 1e-12);
                    if (!accepted) {
                        return in;
                    }
                } else {
                    damping *= 10.0;
                }
            }
            if (!accepted) {
                break;
            }
        }
        in.objective = residual(in).squaredNorm() / static_cast<double>(nv);
        return in;
    };

    ParallelInit best = polish(run(nullptr));
    for (const auto& r : detail::parallel_starts()) {
        auto candidate = polish(run(&r));
        if (candidate.objective < best.objective) {
            best = std::move(candidate);
        }
    }
    return best;
}

/// First-order lift of a parallel-projection fit to a central-projection pose.
inline CameraPose lift_to_perspective(const ParallelInit& init, double f0)
{
    CameraPose pose;
    pose.f = f0;
    pose.omega = rotation_log(init.rotation);
    pose.t.z() = f0 / init.scale;
    pose.t.head<2>() = init.translation * pose.t.z() / f0;
    return pose;
}

namespace detail {

struct ReprojectionState
{
    double error = std::numeric_limits<double>::infinity(); ///< Mean squared distance; infinite off-domain.
    Eigen::VectorXd residual;
    Eigen::MatrixXd jacobian; ///< Columns for the free variables (alpha_2..K, omega, t, f).
};

inline ReprojectionState evaluate_fit(const SkeletonSpec& spec, const Keypoints2D& x, const std::vector<int>& vis,
                                      const StructParams& params, const CameraPose& pose, bool want_jacobian)
{
    ReprojectionState st;
    if (!(pose.f > 0.0) || !params.alpha.allFinite() || !pose.omega.allFinite() || !pose.t.allFinite()) {
        return st;
    }
    const auto layer = projection_layer(spec, params, pose);
    const auto nv = static_cast<Eigen::Index>(vis.size());
    const int cols = spec.n_bases() - 1 + kPoseParams;
    st.residual.resize(2 * nv);
    if (want_jacobian) {
        st.jacobian.resize(2 * nv, cols);
    }
    for (Eigen::Index j = 0; j < nv; ++j) {
        const int i = vis[static_cast<std::size_t>(j)];
        if (!(layer.camera(2, i) > kDepthEpsilon)) {
            return ReprojectionState{};
        }
        st.residual.segment<2>(2 * j) = layer.keypoints.col(i) - x.coords.col(i);
        if (want_jacobian) {
            st.jacobian.middleRows<2>(2 * j) = layer.jacobian.middleRows<2>(2 * i).rightCols(cols);
        }
    }
    st.error = st.residual.squaredNorm() / static_cast<double>(nv);
    return st;
}

inline void apply_step(const Eigen::VectorXd& step, StructParams& params, CameraPose& pose)
{
    const int k = static_cast<int>(params.alpha.size());
    params.alpha.tail(k - 1) += step.head(k - 1);
    pose.omega += step.segment<3>(k - 1);
    pose.t += step.segment<3>(k + 2);
    pose.f += step(k + 5);
}

} // namespace detail

/**
 * @brief Perspective refinement by descent with backtracking line search.
 *
 * alpha_1 stays at its initial value. The search direction is Gauss-Newton
 * preconditioned (Levenberg-Marquardt damping) unless plain steepest descent
 * is requested. Never throws on numerical failure; returns the best iterate.
 */
inline FitResult refine_perspective(const Keypoints2D& x, const SkeletonSpec& spec, const StructParams& init_params,
                                    const CameraPose& init_pose, const std::vector<std::uint8_t>& visibility,
                                    const FitOptions& options = {})
{
    const int n = spec.n_keypoints();
    const int k = spec.n_bases();
    if (x.n_keypoints() != n || init_params.alpha.size() != k) {
        throw ArgumentError("refine_perspective: inputs do not match the spec");
    }
    const auto vis = detail::visible_indices(visibility, n);
    if (vis.size() < 4) {
        throw UnderdeterminedError("refine_perspective: need at least 4 visible keypoints");
    }
    const double nv = static_cast<double>(vis.size());

    FitResult res;
    res.params = init_params;
    res.pose = init_pose;
    auto state = detail::evaluate_fit(spec, x, vis, res.params, res.pose, true);
    res.residual = state.error;
    if (!std::isfinite(state.error)) {
        res.trace.push_back(state.error);
        return res;
    }

    double ridge = 0.0;
    if (k > 1) {
        const Eigen::MatrixXd block = state.jacobian.leftCols(k - 1);
        if (detail::rank_deficient(block.transpose() * block)) {
            ridge = kAlphaRidge;
            res.regularized = true;
        }
    }

    const auto objective = [&](const detail::ReprojectionState& st, const StructParams& p) {
        return st.error + ridge * p.alpha.tail(k - 1).squaredNorm();
    };
    res.trace.push_back(objective(state, res.params));

    double damping = 1e-3;
    constexpr double kArmijo = 1e-4;
    for (int it = 0; it < options.max_iterations; ++it) {
        // Gradient of the mean squared error and the ridge on alpha_2..K.
        Eigen::VectorXd grad = (2.0 / nv) * state.jacobian.transpose() * state.residual;
        grad.head(k - 1) += 2.0 * ridge * res.params.alpha.tail(k - 1);
        if (grad.norm() < options.gradient_tolerance) {
            res.converged = true;
            break;
        }
        const double current = objective(state, res.params);

        bool accepted = false;
        for (int attempt = 0; attempt < 12 && !accepted; ++attempt) {
            Eigen::VectorXd dir;
            if (options.method == DescentMethod::LevenbergMarquardt) {
                Eigen::MatrixXd h = (2.0 / nv) * state.jacobian.transpose() * state.jacobian;
                h.topLeftCorner(k - 1, k - 1) += 2.0 * ridge * Eigen::MatrixXd::Identity(k - 1, k - 1);
                const Eigen::VectorXd diag = h.diagonal().cwiseMax(1e-12);
                h.diagonal() += damping * diag;
                dir = -h.ldlt().solve(grad);
                if (!dir.allFinite() || grad.dot(dir) >= 0.0) {
                    damping *= 10.0;
                    continue;
                }
            } else {
                dir = -grad;
            }
            double step = 1.0;
            for (int ls = 0; ls < 60; ++ls, step *= 0.5) {
                StructParams p = res.params;
                CameraPose pose = res.pose;
                detail::apply_step(step * dir, p, pose);
                auto trial = detail::evaluate_fit(spec, x, vis, p, pose, false);
                const double value = objective(trial, p);
                if (std::isfinite(value) && value <= current + kArmijo * step * grad.dot(dir)) {
                    res.params = p;
                    res.pose = pose;
                    accepted = true;
                    break;
                }
            }
            if (!accepted) {
                if (options.method != DescentMethod::LevenbergMarquardt) {
                    break;
                }
                damping *= 10.0;
            }
        }
        if (!accepted) {
            break;
        }
        damping = std::max(damping * 0.3, 1e-12);
        state = detail::evaluate_fit(spec, x, vis, res.params, res.pose, true);
        res.iterations = it + 1;
        res.residual = state.error;
        const double next = objective(state, res.params);
        res.trace.push_back(next);
        if (current - next <= options.relative_tolerance * current) {
            res.converged = true;
            break;
        }
    }
    return res;
}

/// Parallel initialisation, perspective lift and refinement on 2D keypoints.
inline FitResult fit_baseline(const Keypoints2D& x, const std::vector<std::uint8_t>& visibility, const SkeletonSpec& spec,
                              const FitOptions& options = {})
{
    const auto init = init_parallel(x, spec, visibility, options.parallel_iterations);
    const auto pose = lift_to_perspective(init, options.f_range.mid());
    auto res = refine_perspective(x, spec, init.params, pose, visibility, options);
    res.regularized = res.regularized || init.regularized;
    return res;
}

/// Heatmap entry point: decodes with argmax first.
inline FitResult fit_baseline(const HeatmapStack& hm, const SkeletonSpec& spec, const FitOptions& options = {})
{
    if (hm.channels != spec.n_keypoints()) {
        throw ArgumentError("fit_baseline: heatmap channel count does not match the spec");
    }
    const auto dec = decode_argmax(hm);
    return fit_baseline(dec.keypoints, dec.visible, spec, options);
}

} // namespace skelterp

#endif // SKELTERP_BASELINE_HPP
