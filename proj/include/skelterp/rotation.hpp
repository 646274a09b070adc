/*
 * skelterp - 3D skeleton recovery from 2D keypoint heatmaps.
 *
 * File: include/skelterp/rotation.hpp
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

#ifndef SKELTERP_ROTATION_HPP
#define SKELTERP_ROTATION_HPP

#include "Eigen/Core"
#include "Eigen/Geometry"

#include <algorithm>
#include <array>
#include <cmath>
#include <numbers>

namespace skelterp {

/// Below this angle the exponential map switches to its Taylor expansion.
inline constexpr double kSmallAngle = 1e-8;

inline Eigen::Matrix3d skew(const Eigen::Vector3d& v)
{
    Eigen::Matrix3d m;
    m << 0.0, -v.z(), v.y(), v.z(), 0.0, -v.x(), -v.y(), v.x(), 0.0;
    return m;
}

/// Partial derivatives dR/domega_i, i = 0..2.
using RotationDerivative = std::array<Eigen::Matrix3d, 3>;

/**
 * @brief Exponential map exp([omega]_x) of an axis-angle vector.
 *
 * If `derivative` is non-null it receives dR/domega_i using the closed form
 * dR/dw_i = (w_i [w]_x + [w x (I - R) e_i]_x) R / |w|^2.
 */
inline Eigen::Matrix3d rodrigues(const Eigen::Vector3d& omega, RotationDerivative* derivative = nullptr)
{
    const double theta = omega.norm();
    const Eigen::Matrix3d w = skew(omega);
    const Eigen::Matrix3d identity = Eigen::Matrix3d::Identity();
    if (theta < kSmallAngle) {
        const Eigen::Matrix3d r = identity + w + 0.5 * w * w;
        if (derivative) {
            for (int i = 0; i < 3; ++i) {
                const Eigen::Matrix3d e = skew(Eigen::Vector3d::Unit(i));
                (*derivative)[static_cast<std::size_t>(i)] = e + 0.5 * (e * w + w * e);
            }
        }
        return r;
    }
    const double a = std::sin(theta) / theta;
    const double b = (1.0 - std::cos(theta)) / (theta * theta);
    const Eigen::Matrix3d r = identity + a * w + b * w * w;
    if (derivative) {
        const double inv_theta2 = 1.0 / (theta * theta);
        for (int i = 0; i < 3; ++i) {
            const Eigen::Vector3d col = omega.cross((identity - r).col(i));
            (*derivative)[static_cast<std::size_t>(i)] = (omega(i) * w + skew(col)) * r * inv_theta2;
        }
    }
    return r;
}

/// Inverse of rodrigues on the canonical chart (angle in [0, pi]).
inline Eigen::Vector3d rotation_log(const Eigen::Matrix3d& r)
{
    const Eigen::AngleAxisd aa(r);
    return aa.angle() * aa.axis();
}

/// Maps any axis-angle vector to the equivalent one with |omega| <= pi.
inline Eigen::Vector3d canonical_axis_angle(const Eigen::Vector3d& omega)
{
    if (omega.norm() < std::numbers::pi) {
        return omega;
    }
    return rotation_log(rodrigues(omega));
}

/// Angle of r_a^T r_b in radians, in [0, pi].
inline double geodesic_distance(const Eigen::Matrix3d& r_a, const Eigen::Matrix3d& r_b)
{
    const double c = std::clamp(((r_a.transpose() * r_b).trace() - 1.0) * 0.5, -1.0, 1.0);
    return std::acos(c);
}

inline Eigen::Matrix3d rotation_x(double angle)
{
    return Eigen::AngleAxisd(angle, Eigen::Vector3d::UnitX()).toRotationMatrix();
}

inline Eigen::Matrix3d rotation_y(double angle)
{
    return Eigen::AngleAxisd(angle, Eigen::Vector3d::UnitY()).toRotationMatrix();
}

inline Eigen::Matrix3d rotation_z(double angle)
{
    return Eigen::AngleAxisd(angle, Eigen::Vector3d::UnitZ()).toRotationMatrix();
}

} // namespace skelterp

#endif // SKELTERP_ROTATION_HPP
