#pragma once

#include <algorithm>
#include <cmath>
#include <vector>

#include "drpoint/error.hpp"
#include "drpoint/geometry.hpp"
#include "drpoint/tensor.hpp"

namespace drpoint {

struct RenderConfig {
    int grid_depth = 32;
    int image_width = 32;
    int image_height = 32;
    double sigma = 1.0;              // Gaussian radius, voxel units
    double splat_scale = 1.0;
    double truncation_radius = 3.0;  // voxel units
    double background_depth = 1.0;

    void validate() const {
        if (grid_depth <= 0 || image_width <= 0 || image_height <= 0)
            throw DomainError("RenderConfig: grid dimensions must be positive");
        if (!(sigma > 0.0)) throw DomainError("RenderConfig: sigma must be positive");
        if (!(splat_scale > 0.0)) throw DomainError("RenderConfig: splat_scale must be positive");
        if (!(truncation_radius >= sigma))
            throw DomainError("RenderConfig: truncation_radius must be >= sigma");
        if (!(background_depth >= 0.0 && background_depth <= 1.0))
            throw DomainError("RenderConfig: background_depth must lie in [0, 1]");
    }

    Index voxels() const { return Index(grid_depth) * image_height * image_width; }
    Index pixels() const { return Index(image_height) * image_width; }
};

/// D x H x W occupancies, flattened as (d * H + h) * W + w. `raw` keeps the
/// unclamped Gaussian sums so the backward pass can tell where the clamp was active.
struct OccupancyGrid {
    int depth = 0, height = 0, width = 0;
    Vec3 voxel_extent = Vec3::Ones();  // world units per voxel along x, y, depth
    std::vector<double> values;
    std::vector<double> raw;

    double at(int d, int h, int w) const { return values[(std::size_t(d) * height + h) * width + w]; }
};

/// Ray-termination probabilities with the same layout as OccupancyGrid plus the
/// per-pixel probability of reaching the background.
struct TerminationVolume {
    int depth = 0, height = 0, width = 0;
    std::vector<double> values;
    std::vector<double> residual;

    double at(int d, int h, int w) const { return values[(std::size_t(d) * height + h) * width + w]; }
};

/// H x W normalized depth; 0 is the near plane, background_depth where nothing is hit.
struct DepthImage {
    Mat pixels;

    Index height() const { return pixels.rows(); }
    Index width() const { return pixels.cols(); }
};

/// Continuous voxel coordinates (column, row, slice) of camera-frame points.
/// Image row 0 is the top of the view (+y).
inline Points camera_to_voxel(const PointCloud& camera_cloud, const Frustum& f, const RenderConfig& cfg) {
    Points out(camera_cloud.count(), 3);
    const double sx = cfg.image_width / (2.0 * f.half_width);
    const double sy = cfg.image_height / (2.0 * f.half_width);
    const double sz = cfg.grid_depth / (f.far - f.near);
    for (Index i = 0; i < camera_cloud.count(); ++i) {
        out(i, 0) = (camera_cloud.xyz(i, 0) + f.half_width) * sx;
        out(i, 1) = (f.half_width - camera_cloud.xyz(i, 1)) * sy;
        out(i, 2) = (camera_cloud.xyz(i, 2) - f.near) * sz;
    }
    return out;
}

/// Diagonal Jacobian d(voxel)/d(camera) of camera_to_voxel.
inline Vec3 camera_to_voxel_scale(const Frustum& f, const RenderConfig& cfg) {
    return Vec3(cfg.image_width / (2.0 * f.half_width), -cfg.image_height / (2.0 * f.half_width),
                cfg.grid_depth / (f.far - f.near));
}

namespace detail {

// Voxel index window [lo, hi] along one axis whose centers lie within `radius` of u.
inline void axis_window(double u, double radius, int size, int& lo, int& hi) {
    lo = std::max(0, static_cast<int>(std::ceil(u - 0.5 - radius)));
    hi = std::min(size - 1, static_cast<int>(std::floor(u - 0.5 + radius)));
}

// Visits every voxel within the truncation sphere of voxel-space point u, passing
// the flat index, the Gaussian weight and the offsets (center - u).
template <class Fn>
void for_each_splat_voxel(const double* u, const RenderConfig& cfg, Fn&& fn) {
    const double R = cfg.truncation_radius;
    const double R2 = R * R;
    const double inv2s2 = 1.0 / (2.0 * cfg.sigma * cfg.sigma);
    int lo[3], hi[3];
    const int sizes[3] = {cfg.image_width, cfg.image_height, cfg.grid_depth};
    for (int a = 0; a < 3; ++a) {
        if (!std::isfinite(u[a])) return;
        axis_window(u[a], R, sizes[a], lo[a], hi[a]);
        if (lo[a] > hi[a]) return;
    }
    // per-axis offsets and separable weights (window is at most 2R+1 wide)
    thread_local std::vector<double> off[3], wt[3];
    for (int a = 0; a < 3; ++a) {
        const int n = hi[a] - lo[a] + 1;
        off[a].resize(n);
        wt[a].resize(n);
        for (int i = 0; i < n; ++i) {
            const double o = (lo[a] + i + 0.5) - u[a];
            off[a][i] = o;
            wt[a][i] = std::exp(-o * o * inv2s2);
        }
    }
    const std::size_t W = cfg.image_width, H = cfg.image_height;
    for (int d = lo[2]; d <= hi[2]; ++d) {
        const double oz = off[2][d - lo[2]];
        const double wz = wt[2][d - lo[2]];
        for (int h = lo[1]; h <= hi[1]; ++h) {
            const double oy = off[1][h - lo[1]];
            const double wyz = wz * wt[1][h - lo[1]];
            const double ryz = oz * oz + oy * oy;
            if (ryz > R2) continue;
            // the sphere cuts a contiguous run of each voxel row
            int wl = 0, wh = hi[0] - lo[0];
            while (wl <= wh && ryz + off[0][wl] * off[0][wl] > R2) ++wl;
            while (wh >= wl && ryz + off[0][wh] * off[0][wh] > R2) --wh;
            const std::size_t row = (std::size_t(d) * H + h) * W + lo[0];
            for (int i = wl; i <= wh; ++i) fn(row + i, wyz * wt[0][i], off[0][i], oy, oz);
        }
    }
}

}  // namespace detail

/// Gaussian splatting of points given directly in voxel coordinates.
inline OccupancyGrid splat_voxels(const Points& voxel_points, const RenderConfig& cfg) {
    cfg.validate();
    OccupancyGrid grid;
    grid.depth = cfg.grid_depth;
    grid.height = cfg.image_height;
    grid.width = cfg.image_width;
    grid.raw.assign(cfg.voxels(), 0.0);
    const double s = cfg.splat_scale;
    for (Index k = 0; k < voxel_points.rows(); ++k) {
        const double u[3] = {voxel_points(k, 0), voxel_points(k, 1), voxel_points(k, 2)};
        detail::for_each_splat_voxel(u, cfg, [&](std::size_t idx, double w, double, double, double) {
            grid.raw[idx] += s * w;
        });
    }
    grid.values.resize(grid.raw.size());
    std::transform(grid.raw.begin(), grid.raw.end(), grid.values.begin(),
                   [](double r) { return std::clamp(r, 0.0, 1.0); });
    return grid;
}

/// Cotangent of splat_voxels with respect to the voxel-space points. Voxels where
/// the [0, 1] clamp is active pass no gradient.
inline Points splat_voxels_vjp(const Points& voxel_points, const OccupancyGrid& grid,
                               const std::vector<double>& grad_values, const RenderConfig& cfg) {
    if (grad_values.size() != grid.values.size()) throw DomainError("splat_voxels_vjp: gradient size mismatch");
    Points out = Points::Zero(voxel_points.rows(), 3);
    const double s = cfg.splat_scale;
    const double inv_s2 = 1.0 / (cfg.sigma * cfg.sigma);
    for (Index k = 0; k < voxel_points.rows(); ++k) {
        const double u[3] = {voxel_points(k, 0), voxel_points(k, 1), voxel_points(k, 2)};
        double gx = 0.0, gy = 0.0, gz = 0.0;
        detail::for_each_splat_voxel(u, cfg, [&](std::size_t idx, double w, double ox, double oy, double oz) {
            const double g = grad_values[idx];
            if (g == 0.0 || grid.raw[idx] > 1.0) return;
            // d/du exp(-|c - u|^2 / 2 sigma^2) = w * (c - u) / sigma^2
            const double c = g * s * w * inv_s2;
            gx += c * ox;
            gy += c * oy;
            gz += c * oz;
        });
        out(k, 0) = gx;
        out(k, 1) = gy;
        out(k, 2) = gz;
    }
    return out;
}

inline OccupancyGrid splat_occupancy(const PointCloud& camera_cloud, const Frustum& frustum, const RenderConfig& cfg) {
    OccupancyGrid grid = splat_voxels(camera_to_voxel(camera_cloud, frustum, cfg), cfg);
    const Vec3 scale = camera_to_voxel_scale(frustum, cfg);
    grid.voxel_extent = Vec3(1.0 / scale.x(), -1.0 / scale.y(), 1.0 / scale.z());
    return grid;
}

/// Cotangent of splat_occupancy with respect to camera-frame coordinates.
inline Points splat_occupancy_vjp(const PointCloud& camera_cloud, const Frustum& frustum, const OccupancyGrid& grid,
                                  const std::vector<double>& grad_values, const RenderConfig& cfg) {
    Points g = splat_voxels_vjp(camera_to_voxel(camera_cloud, frustum, cfg), grid, grad_values, cfg);
    const Vec3 scale = camera_to_voxel_scale(frustum, cfg);
    for (int a = 0; a < 3; ++a) g.col(a) *= scale[a];
    return g;
}

/// Front-to-back termination: t_d = o_d * prod_{j<d} (1 - o_j).
inline TerminationVolume ray_termination(const OccupancyGrid& grid) {
    TerminationVolume term;
    term.depth = grid.depth;
    term.height = grid.height;
    term.width = grid.width;
    const std::size_t plane = std::size_t(grid.height) * grid.width;
    term.values.assign(grid.values.size(), 0.0);
    term.residual.assign(plane, 1.0);
    for (std::size_t p = 0; p < plane; ++p) {
        double transmit = 1.0;
        for (int d = 0; d < grid.depth; ++d) {
            const double o = grid.values[d * plane + p];
            term.values[d * plane + p] = o * transmit;
            transmit *= (1.0 - o);
        }
        term.residual[p] = transmit;
    }
    return term;
}

/// Cotangent of ray_termination. Uses the suffix recurrence
/// S_d = g_d o_d + (1 - o_d) S_{d+1}, S_D = g_residual, so that
/// dL/do_d = T_d (g_d - S_{d+1}) without dividing by (1 - o_d).
inline std::vector<double> ray_termination_vjp(const OccupancyGrid& grid, const std::vector<double>& grad_values,
                                               const std::vector<double>& grad_residual) {
    const std::size_t plane = std::size_t(grid.height) * grid.width;
    if (grad_values.size() != grid.values.size() || grad_residual.size() != plane)
        throw DomainError("ray_termination_vjp: gradient size mismatch");
    std::vector<double> out(grid.values.size(), 0.0);
    std::vector<double> transmit(grid.depth);
    for (std::size_t p = 0; p < plane; ++p) {
        double t = 1.0;
        for (int d = 0; d < grid.depth; ++d) {
            transmit[d] = t;
            t *= (1.0 - grid.values[d * plane + p]);
        }
        double suffix = grad_residual[p];
        for (int d = grid.depth - 1; d >= 0; --d) {
            const double o = grid.values[d * plane + p];
            const double g = grad_values[d * plane + p];
            out[d * plane + p] = transmit[d] * (g - suffix);
            suffix = g * o + (1.0 - o) * suffix;
        }
    }
    return out;
}

/// Normalized depth of slice d (0-based): mid-slice convention (d + 0.5) / D.
inline double slice_depth(int d, int depth) { return (d + 0.5) / depth; }

/// Expected depth: I = sum_d t_d z_d + residual * z_bg.
inline DepthImage project_depth(const TerminationVolume& term, const RenderConfig& cfg) {
    DepthImage img;
    img.pixels.resize(term.height, term.width);
    const std::size_t plane = std::size_t(term.height) * term.width;
    for (std::size_t p = 0; p < plane; ++p) {
        double v = 0.0;
        for (int d = 0; d < term.depth; ++d) v += term.values[d * plane + p] * slice_depth(d, term.depth);
        v += term.residual[p] * cfg.background_depth;
        img.pixels.data()[p] = v;
    }
    return img;
}

struct TerminationGrad {
    std::vector<double> values;
    std::vector<double> residual;
};

inline TerminationGrad project_depth_vjp(const Mat& upstream, int depth, const RenderConfig& cfg) {
    const std::size_t plane = std::size_t(upstream.rows()) * upstream.cols();
    TerminationGrad g;
    g.values.resize(plane * depth);
    g.residual.resize(plane);
    for (std::size_t p = 0; p < plane; ++p) {
        const double u = upstream.data()[p];
        for (int d = 0; d < depth; ++d) g.values[d * plane + p] = u * slice_depth(d, depth);
        g.residual[p] = u * cfg.background_depth;
    }
    return g;
}

/// world_to_camera -> splat -> ray termination -> expected depth. When `keep` is
/// given, the occupancy grid is stored there for a later render_vjp.
inline DepthImage render(const PointCloud& cloud, const CameraPose& pose, const RenderConfig& cfg,
                         OccupancyGrid* keep = nullptr) {
    OccupancyGrid grid = splat_occupancy(world_to_camera(cloud, pose), pose.frustum, cfg);
    DepthImage img = project_depth(ray_termination(grid), cfg);
    if (keep) *keep = std::move(grid);
    return img;
}

/// d<upstream, render(cloud)>/d(cloud) through all stages. `cached` may hold
/// the grid produced by render() for the same inputs. Only rows [first, N) of
/// the cotangent are computed and returned.
inline Points render_vjp(const PointCloud& cloud, const CameraPose& pose, const RenderConfig& cfg,
                         const Mat& upstream, const OccupancyGrid* cached = nullptr, Index first = 0) {
    if (upstream.rows() != cfg.image_height || upstream.cols() != cfg.image_width)
        throw DomainError("render_vjp: upstream must be H x W");
    if (first < 0 || first > cloud.count()) throw DomainError("render_vjp: first row out of range");
    const PointCloud cam = world_to_camera(cloud, pose);
    OccupancyGrid local;
    if (!cached) local = splat_occupancy(cam, pose.frustum, cfg);
    const OccupancyGrid& grid = cached ? *cached : local;
    const TerminationGrad tg = project_depth_vjp(upstream, grid.depth, cfg);
    const std::vector<double> go = ray_termination_vjp(grid, tg.values, tg.residual);
    const PointCloud part = first == 0 ? cam : PointCloud(Points(cam.xyz.bottomRows(cam.count() - first)));
    return world_to_camera_vjp(splat_occupancy_vjp(part, pose.frustum, grid, go, cfg), pose);
}

}  // namespace drpoint
