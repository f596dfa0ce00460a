#pragma once

#include <algorithm>
#include <array>
#include <cmath>
#include <vector>

#include <Eigen/Dense>

#include "drpoint/error.hpp"

namespace drpoint {

using Vec3 = Eigen::Vector3d;
using Mat3 = Eigen::Matrix3d;
using Points = Eigen::Matrix<double, Eigen::Dynamic, 3, Eigen::RowMajor>;

/// Ordered list of 3D points, one per row.
struct PointCloud {
    Points xyz;

    PointCloud() = default;
    explicit PointCloud(Points p) : xyz(std::move(p)) {}
    PointCloud(std::initializer_list<std::array<double, 3>> pts) : xyz(pts.size(), 3) {
        Eigen::Index i = 0;
        for (const auto& p : pts) xyz.row(i++) << p[0], p[1], p[2];
    }

    Eigen::Index count() const { return xyz.rows(); }
    bool empty() const { return xyz.rows() == 0; }
    Vec3 point(Eigen::Index i) const { return xyz.row(i).transpose(); }

    bool finite() const { return xyz.allFinite(); }
};

inline void require_finite(const PointCloud& c, const char* what) {
    if (!c.finite()) throw DomainError(std::string(what) + ": non-finite coordinate");
}

inline void require_nonempty(const PointCloud& c, const char* what) {
    if (c.empty()) throw DomainError(std::string(what) + ": empty point cloud");
}

/// Orthographic view volume in camera coordinates: x, y in [-half_width, half_width],
/// depth (camera z) in [near, far].
struct Frustum {
    double half_width = 1.1;
    double near = 0.9;
    double far = 3.1;
};

/// Rigid camera: rows of `rotation` are the camera right, up and forward axes in
/// world coordinates; a world point p maps to rotation * (p - center).
struct CameraPose {
    Mat3 rotation = Mat3::Identity();
    Vec3 center = Vec3::Zero();
    Frustum frustum;

    Vec3 forward() const { return rotation.row(2).transpose(); }
    Vec3 up() const { return rotation.row(1).transpose(); }

    bool valid(double tol = 1e-9) const {
        const bool ortho = (rotation.transpose() * rotation - Mat3::Identity()).cwiseAbs().maxCoeff() <= tol;
        const bool proper = std::abs(rotation.determinant() - 1.0) <= tol;
        return ortho && proper && frustum.near > 0.0 && frustum.near < frustum.far &&
               frustum.half_width > 0.0 && rotation.allFinite() && center.allFinite();
    }
};

/// Camera at `center` looking at the origin. `up_hint` must not be parallel to
/// the view direction; it is projected onto the image plane.
inline CameraPose look_at_origin(const Vec3& center, const Vec3& up_hint, const Frustum& frustum) {
    const Vec3 forward = (-center).normalized();
    Vec3 right = up_hint.cross(forward);
    if (right.norm() < 1e-9) throw DomainError("look_at_origin: up vector parallel to view direction");
    right.normalize();
    const Vec3 up = forward.cross(right);
    CameraPose pose;
    pose.rotation.row(0) = right.transpose();
    pose.rotation.row(1) = up.transpose();
    pose.rotation.row(2) = forward.transpose();
    pose.center = center;
    pose.frustum = frustum;
    return pose;
}

/// Frustum enclosing the unit ball seen from `radius`, with a small margin.
inline Frustum unit_ball_frustum(double radius, double margin = 0.1) {
    const double extent = 1.0 + margin;
    return Frustum{extent, std::max(radius - extent, 1e-3 * radius), radius + extent};
}

inline constexpr int kPosesPerRing = 8;
inline constexpr int kNumPoses = 32;

/// The fixed rendering rig: three rings of 8 cameras (view directions in the
/// plane orthogonal to x, y and z, at 45 degree steps) followed by the 8
/// cube-diagonal cameras. Index layout: [0,8) x-ring, [8,16) y-ring, [16,24)
/// z-ring, [24,32) diagonals.
inline std::vector<CameraPose> generate_camera_poses(double radius = 2.0) {
    if (!(radius > 0.0) || !std::isfinite(radius))
        throw DomainError("generate_camera_poses: radius must be positive");
    const Frustum frustum = unit_ball_frustum(radius);
    const std::array<Vec3, 3> axes = {Vec3::UnitX(), Vec3::UnitY(), Vec3::UnitZ()};

    std::vector<CameraPose> poses;
    poses.reserve(kNumPoses);
    for (int a = 0; a < 3; ++a) {
        // cyclic in-plane basis keeps each ring right-handed about its axis
        const Vec3& e1 = axes[(a + 1) % 3];
        const Vec3& e2 = axes[(a + 2) % 3];
        for (int k = 0; k < kPosesPerRing; ++k) {
            const double phi = 2.0 * M_PI * k / kPosesPerRing;
            const Vec3 dir = (std::cos(phi) * e1 + std::sin(phi) * e2).normalized();
            poses.push_back(look_at_origin(-radius * dir, axes[a], frustum));
        }
    }
    for (int k = 0; k < 8; ++k) {
        const Vec3 corner((k & 1) ? -1.0 : 1.0, (k & 2) ? -1.0 : 1.0, (k & 4) ? -1.0 : 1.0);
        const Vec3 center = radius * corner.normalized();
        const Vec3 dir = -center.normalized();
        const Vec3 up = std::abs(dir.dot(Vec3::UnitZ())) > 1.0 - 1e-9 ? Vec3::UnitY() : Vec3::UnitZ();
        poses.push_back(look_at_origin(center, up, frustum));
    }
    return poses;
}

inline PointCloud world_to_camera(const PointCloud& cloud, const CameraPose& pose) {
    // rows: (p - c)^T R^T
    Points out = (cloud.xyz.rowwise() - pose.center.transpose()) * pose.rotation.transpose();
    return PointCloud(std::move(out));
}

inline PointCloud camera_to_world(const PointCloud& cloud, const CameraPose& pose) {
    Points out = (cloud.xyz * pose.rotation).rowwise() + pose.center.transpose();
    return PointCloud(std::move(out));
}

/// Cotangent of world_to_camera: d/dp <g, R(p - c)> = R^T g.
inline Points world_to_camera_vjp(const Points& camera_grad, const CameraPose& pose) {
    return camera_grad * pose.rotation;
}

struct Normalization {
    Vec3 centroid = Vec3::Zero();
    double scale = 1.0;  // multiply after subtracting the centroid
    bool degenerate = false;

    PointCloud apply(const PointCloud& c) const {
        return PointCloud(Points((c.xyz.rowwise() - centroid.transpose()) * scale));
    }
};

inline Normalization normalization_of(const PointCloud& cloud) {
    require_nonempty(cloud, "normalize_cloud");
    Normalization n;
    n.centroid = cloud.xyz.colwise().mean().transpose();
    const double max_dist = (cloud.xyz.rowwise() - n.centroid.transpose()).rowwise().norm().maxCoeff();
    if (max_dist <= 0.0) {
        n.degenerate = true;
        n.scale = 1.0;
    } else {
        n.scale = 1.0 / max_dist;
    }
    return n;
}

struct NormalizedCloud {
    PointCloud cloud;
    bool degenerate = false;
};

/// Centers on the centroid and scales the farthest point onto the unit sphere.
inline NormalizedCloud normalize_cloud(const PointCloud& cloud) {
    const Normalization n = normalization_of(cloud);
    return {n.apply(cloud), n.degenerate};
}

}  // namespace drpoint
