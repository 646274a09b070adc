/*
 * skelterp - 3D skeleton recovery from 2D keypoint heatmaps.
 *
 * File: include/skelterp/camera.hpp
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

#ifndef SKELTERP_CAMERA_HPP
#define SKELTERP_CAMERA_HPP

#include "skelterp/common.hpp"
#include "skelterp/rotation.hpp"
#include "skelterp/skeleton.hpp"

#include "Eigen/Core"

#include <string>

namespace skelterp {

/// Minimum admissible camera-frame depth, in object-frame units.
inline constexpr double kDepthEpsilon = 1e-4;

/**
 * @brief Camera extrinsics (axis-angle rotation, translation) and focal length.
 *
 * Projection is central with the principal point at the image-plane origin,
 * no skew and square pixels: x = f X_c / Z_c, y = f Y_c / Z_c.
 */
struct CameraPose
{
    Eigen::Vector3d omega = Eigen::Vector3d::Zero();
    Eigen::Vector3d t = Eigen::Vector3d(0.0, 0.0, 1.0);
    double f = 1.0;

    Eigen::Matrix3d rotation() const { return rodrigues(omega); }

    bool valid() const
    {
        return omega.allFinite() && t.allFinite() && std::isfinite(f) && f > 0.0 && omega.norm() < std::numbers::pi;
    }
};

struct Keypoints2D
{
    Eigen::Matrix2Xd coords;

    int n_keypoints() const { return static_cast<int>(coords.cols()); }
};

/**
 * Jacobian of the flattened keypoints (x_0, y_0, x_1, y_1, ...) with respect to
 * theta = (alpha_1..alpha_K, omega_1..omega_3, t_1..t_3, f).
 */
struct ProjectionJacobian
{
    Eigen::MatrixXd matrix;
};

/// Number of non-structural parameters in theta.
inline constexpr int kPoseParams = 7;

inline int theta_size(const SkeletonSpec& spec) { return spec.n_bases() + kPoseParams; }

inline Eigen::VectorXd pack_theta(const StructParams& params, const CameraPose& pose)
{
    const auto k = params.alpha.size();
    Eigen::VectorXd theta(k + kPoseParams);
    theta.head(k) = params.alpha;
    theta.segment<3>(k) = pose.omega;
    theta.segment<3>(k + 3) = pose.t;
    theta(k + 6) = pose.f;
    return theta;
}

inline void unpack_theta(const Eigen::VectorXd& theta, int n_bases, StructParams& params, CameraPose& pose)
{
    params.alpha = theta.head(n_bases);
    pose.omega = theta.segment<3>(n_bases);
    pose.t = theta.segment<3>(n_bases + 3);
    pose.f = theta(n_bases + 6);
}

/// R y_i + T for every keypoint.
inline Eigen::Matrix3Xd camera_points(const Shape3D& shape, const CameraPose& pose)
{
    return (pose.rotation() * shape.coords).colwise() + pose.t;
}

inline void require_depths(const Eigen::Matrix3Xd& cam)
{
    for (int i = 0; i < cam.cols(); ++i) {
        if (!(cam(2, i) > kDepthEpsilon)) {
            throw DomainError("keypoint " + std::to_string(i) + " has camera depth " + std::to_string(cam(2, i))
                                  + " at or below depth epsilon",
                              i);
        }
    }
}

inline Keypoints2D project(const Shape3D& shape, const CameraPose& pose)
{
    const Eigen::Matrix3Xd cam = camera_points(shape, pose);
    require_depths(cam);
    Keypoints2D out{Eigen::Matrix2Xd(2, cam.cols())};
    for (int i = 0; i < cam.cols(); ++i) {
        out.coords(0, i) = pose.f * cam(0, i) / cam(2, i);
        out.coords(1, i) = pose.f * cam(1, i) / cam(2, i);
    }
    return out;
}

inline Keypoints2D reproject(const SkeletonSpec& spec, const StructParams& params, const CameraPose& pose)
{
    return project(compose_shape(spec, params), pose);
}

/**
 * @brief Everything the projection layer produces for one instance.
 *
 * Unlike project(), this never throws on small depths; callers inspect
 * `depths` and decide how to treat keypoints outside the valid domain.
 */
struct ProjectionLayerOutput
{
    Eigen::Matrix3Xd camera;       ///< R y_i + T.
    Eigen::Matrix2Xd keypoints;    ///< Projected coordinates (garbage where depth <= epsilon).
    Eigen::MatrixXd jacobian;      ///< (2N) x (K+7), see ProjectionJacobian.
    Eigen::MatrixXd depth_jacobian; ///< N x (K+7), d Z_i / d theta.
};

inline ProjectionLayerOutput projection_layer(const SkeletonSpec& spec, const StructParams& params, const CameraPose& pose)
{
    const int n = spec.n_keypoints();
    const int k = spec.n_bases();
    if (params.alpha.size() != k) {
        throw ArgumentError("projection_layer: alpha length does not match the spec");
    }
    RotationDerivative d_rot;
    const Eigen::Matrix3d r = rodrigues(pose.omega, &d_rot);
    const Eigen::Matrix3Xd y = compose_shape(spec, params).coords;

    ProjectionLayerOutput out;
    out.camera = (r * y).colwise() + pose.t;
    out.keypoints.resize(2, n);
    out.jacobian.setZero(2 * n, k + kPoseParams);
    out.depth_jacobian.setZero(n, k + kPoseParams);

    Eigen::Matrix<double, 3, Eigen::Dynamic> dp(3, k + kPoseParams);
    for (int i = 0; i < n; ++i) {
        const Eigen::Vector3d p = out.camera.col(i);
        for (int b = 0; b < k; ++b) {
            dp.col(b) = r * spec.base_shapes[static_cast<std::size_t>(b)].col(i);
        }
        for (int j = 0; j < 3; ++j) {
            dp.col(k + j) = d_rot[static_cast<std::size_t>(j)] * y.col(i);
        }
        dp.block<3, 3>(0, k + 3).setIdentity();
        dp.col(k + 6).setZero();

        const double inv_z = 1.0 / p.z();
        const double u = p.x() * inv_z;
        const double v = p.y() * inv_z;
        out.keypoints(0, i) = pose.f * u;
        out.keypoints(1, i) = pose.f * v;

        Eigen::Matrix<double, 2, 3> du;
        du << pose.f * inv_z, 0.0, -pose.f * u * inv_z, 0.0, pose.f * inv_z, -pose.f * v * inv_z;
        out.jacobian.middleRows<2>(2 * i) = du * dp;
        out.jacobian(2 * i, k + 6) = u;
        out.jacobian(2 * i + 1, k + 6) = v;
        out.depth_jacobian.row(i) = dp.row(2);
    }
    return out;
}

/// Analytic Jacobian of reproject() in (alpha, omega, t, f) column order.
inline ProjectionJacobian projection_jacobian(const SkeletonSpec& spec, const StructParams& params, const CameraPose& pose)
{
    ProjectionLayerOutput layer = projection_layer(spec, params, pose);
    require_depths(layer.camera);
    return ProjectionJacobian{std::move(layer.jacobian)};
}

/// Central-difference Jacobian of reproject(); a test oracle for projection_jacobian.
inline ProjectionJacobian numeric_jacobian(const SkeletonSpec& spec, const StructParams& params, const CameraPose& pose,
                                           double step)
{
    if (!(step > 0.0)) {
        throw ArgumentError("numeric_jacobian: step must be positive");
    }
    const int k = spec.n_bases();
    const Eigen::VectorXd theta = pack_theta(params, pose);
    ProjectionJacobian jac{Eigen::MatrixXd(2 * spec.n_keypoints(), theta.size())};
    StructParams p;
    CameraPose c;
    for (Eigen::Index j = 0; j < theta.size(); ++j) {
        Eigen::VectorXd plus = theta;
        Eigen::VectorXd minus = theta;
        plus(j) += step;
        minus(j) -= step;
        unpack_theta(plus, k, p, c);
        const Eigen::Matrix2Xd xp = reproject(spec, p, c).coords;
        unpack_theta(minus, k, p, c);
        const Eigen::Matrix2Xd xm = reproject(spec, p, c).coords;
        const Eigen::Matrix2Xd diff = (xp - xm) / (2.0 * step);
        jac.matrix.col(j) = Eigen::Map<const Eigen::VectorXd>(diff.data(), diff.size());
    }
    return jac;
}

} // namespace skelterp

#endif // SKELTERP_CAMERA_HPP
