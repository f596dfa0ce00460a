#pragma once

#include <array>
#include <charconv>
#include <cmath>
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <optional>
#include <sstream>
#include <string>
#include <vector>

#include <nlohmann/json.hpp>

#include "drpoint/error.hpp"
#include "drpoint/geometry.hpp"
#include "drpoint/image_io.hpp"
#include "drpoint/renderer.hpp"
#include "drpoint/rng.hpp"

namespace drpoint {

inline constexpr Index kStoredPoints = 2048;
inline constexpr Index kEncoderPoints = 1024;
inline constexpr int kRgbSize = 224;

// ---------------------------------------------------------------------------
// Point files

/// ASCII "x y z" per line; blank lines and lines starting with '#' are skipped.
inline PointCloud parse_xyz(std::istream& in, const std::string& source = "<stream>") {
    std::vector<std::array<double, 3>> pts;
    std::string line;
    std::size_t lineno = 0;
    while (std::getline(in, line)) {
        ++lineno;
        std::size_t pos = line.find_first_not_of(" \t\r");
        if (pos == std::string::npos || line[pos] == '#') continue;
        std::array<double, 3> p{};
        const char* cur = line.data();
        const char* end = line.data() + line.size();
        for (int a = 0; a < 4; ++a) {
            while (cur < end && (*cur == ' ' || *cur == '\t' || *cur == '\r')) ++cur;
            if (a == 3) {
                if (cur != end) throw ParseError(source, lineno, "expected exactly three values");
                break;
            }
            if (cur == end) throw ParseError(source, lineno, "expected exactly three values");
            if (*cur == '+') ++cur;
            const auto [next, ec] = std::from_chars(cur, end, p[a]);
            if (ec != std::errc() || (next < end && *next != ' ' && *next != '\t' && *next != '\r'))
                throw ParseError(source, lineno, "malformed number");
            if (!std::isfinite(p[a])) throw ParseError(source, lineno, "non-finite coordinate");
            cur = next;
        }
        pts.push_back(p);
    }
    Points xyz(Index(pts.size()), 3);
    for (std::size_t i = 0; i < pts.size(); ++i) xyz.row(Index(i)) << pts[i][0], pts[i][1], pts[i][2];
    return PointCloud(std::move(xyz));
}

inline PointCloud load_xyz(const std::string& path) {
    std::ifstream in(path);
    if (!in) throw FormatError("load_xyz: cannot open " + path);
    return parse_xyz(in, path);
}

/// Nine significant digits per coordinate.
inline void save_xyz(const PointCloud& cloud, const std::string& path) {
    std::FILE* f = std::fopen(path.c_str(), "w");
    if (!f) throw FormatError("save_xyz: cannot write " + path);
    for (Index i = 0; i < cloud.count(); ++i)
        std::fprintf(f, "%.9g %.9g %.9g\n", cloud.xyz(i, 0), cloud.xyz(i, 1), cloud.xyz(i, 2));
    if (std::fclose(f) != 0) throw FormatError("save_xyz: write failed for " + path);
}

// ---------------------------------------------------------------------------
// Synthetic shapes

enum class ShapeFamily { Sphere, Box, Cylinder, Torus, Plane, TwoBox };
inline constexpr int kNumFamilies = 6;

inline const char* family_name(ShapeFamily f) {
    switch (f) {
        case ShapeFamily::Sphere: return "sphere";
        case ShapeFamily::Box: return "box";
        case ShapeFamily::Cylinder: return "cylinder";
        case ShapeFamily::Torus: return "torus";
        case ShapeFamily::Plane: return "plane";
        case ShapeFamily::TwoBox: return "two_box";
    }
    return "unknown";
}

struct SynthShape {
    PointCloud cloud;
    int label = 0;
    ShapeFamily family = ShapeFamily::Sphere;
    Mat3 rotation = Mat3::Identity();  // world = rotation * local
    Vec3 half_extents = Vec3::Zero();  // box / plane / cylinder (radius, radius, half height)
    double radius = 0.0;               // sphere radius, torus major radius
    double minor_radius = 0.0;         // torus tube radius
};

inline Mat3 random_rotation(Rng& rng) {
    Eigen::Quaterniond q(rng.normal(), rng.normal(), rng.normal(), rng.normal());
    q.normalize();
    return q.toRotationMatrix();
}

namespace detail {

// Uniform sample on the surface of an axis-aligned box centered at `offset`.
inline Vec3 sample_box_surface(const Vec3& h, const Vec3& offset, Rng& rng) {
    const double areas[3] = {h.y() * h.z(), h.x() * h.z(), h.x() * h.y()};  // faces normal to x, y, z
    const double total = areas[0] + areas[1] + areas[2];
    double u = rng.uniform() * total;
    int axis = 0;
    while (axis < 2 && u >= areas[axis]) u -= areas[axis++];
    Vec3 p(rng.uniform(-h.x(), h.x()), rng.uniform(-h.y(), h.y()), rng.uniform(-h.z(), h.z()));
    p[axis] = rng.bernoulli(0.5) ? h[axis] : -h[axis];
    return p + offset;
}

}  // namespace detail

/// Deterministic parametric dataset: instance i belongs to family i mod 6 and
/// carries 2048 surface samples under a random rotation and size.
inline std::vector<SynthShape> synth_shapes(int n, std::uint64_t seed) {
    if (n < 1) throw DomainError("synth_shapes: n must be >= 1");
    std::vector<SynthShape> out;
    out.reserve(n);
    for (int i = 0; i < n; ++i) {
        Rng rng(seed, Stream::Synth, {std::uint64_t(i)});
        SynthShape s;
        s.family = static_cast<ShapeFamily>(i % kNumFamilies);
        s.label = i % kNumFamilies;
        s.rotation = random_rotation(rng);
        Points local(kStoredPoints, 3);
        switch (s.family) {
            case ShapeFamily::Sphere: {
                s.radius = rng.uniform(0.5, 1.0);
                for (Index k = 0; k < kStoredPoints; ++k) {
                    Vec3 d(rng.normal(), rng.normal(), rng.normal());
                    local.row(k) = (s.radius * d.normalized()).transpose();
                }
                break;
            }
            case ShapeFamily::Box: {
                s.half_extents = Vec3(rng.uniform(0.3, 1.0), rng.uniform(0.3, 1.0), rng.uniform(0.3, 1.0));
                for (Index k = 0; k < kStoredPoints; ++k)
                    local.row(k) = detail::sample_box_surface(s.half_extents, Vec3::Zero(), rng).transpose();
                break;
            }
            case ShapeFamily::Cylinder: {
                const double r = rng.uniform(0.3, 0.7), hh = rng.uniform(0.4, 1.0);
                s.half_extents = Vec3(r, r, hh);
                const double side = 2.0 * M_PI * r * 2.0 * hh, cap = M_PI * r * r;
                for (Index k = 0; k < kStoredPoints; ++k) {
                    const double phi = rng.uniform(0.0, 2.0 * M_PI);
                    if (rng.uniform() * (side + 2.0 * cap) < side) {
                        local.row(k) << r * std::cos(phi), r * std::sin(phi), rng.uniform(-hh, hh);
                    } else {
                        const double rr = r * std::sqrt(rng.uniform());
                        local.row(k) << rr * std::cos(phi), rr * std::sin(phi), rng.bernoulli(0.5) ? hh : -hh;
                    }
                }
                break;
            }
            case ShapeFamily::Torus: {
                s.radius = rng.uniform(0.5, 0.8);
                s.minor_radius = rng.uniform(0.1, 0.3);
                const double R = s.radius, r = s.minor_radius;
                for (Index k = 0; k < kStoredPoints;) {
                    const double u = rng.uniform(0.0, 2.0 * M_PI), v = rng.uniform(0.0, 2.0 * M_PI);
                    // area element is proportional to R + r cos v
                    if (rng.uniform() * (R + r) > R + r * std::cos(v)) continue;
                    local.row(k++) << (R + r * std::cos(v)) * std::cos(u), (R + r * std::cos(v)) * std::sin(u),
                        r * std::sin(v);
                }
                break;
            }
            case ShapeFamily::Plane: {
                s.half_extents = Vec3(rng.uniform(0.5, 1.0), rng.uniform(0.5, 1.0), 0.0);
                for (Index k = 0; k < kStoredPoints; ++k)
                    local.row(k) << rng.uniform(-s.half_extents.x(), s.half_extents.x()),
                        rng.uniform(-s.half_extents.y(), s.half_extents.y()), 0.0;
                break;
            }
            case ShapeFamily::TwoBox: {
                const Vec3 a(rng.uniform(0.2, 0.5), rng.uniform(0.2, 0.5), rng.uniform(0.2, 0.5));
                const Vec3 b(rng.uniform(0.2, 0.5), rng.uniform(0.2, 0.5), rng.uniform(0.2, 0.5));
                const Vec3 oa(-a.x(), 0.0, 0.0), ob(b.x(), rng.uniform(-0.2, 0.2), rng.uniform(-0.2, 0.2));
                auto area = [](const Vec3& h) { return h.y() * h.z() + h.x() * h.z() + h.x() * h.y(); };
                const double pa = area(a) / (area(a) + area(b));
                s.half_extents = Vec3(a.x() + b.x(), std::max(a.y(), b.y()) + 0.2, std::max(a.z(), b.z()) + 0.2);
                for (Index k = 0; k < kStoredPoints; ++k)
                    local.row(k) = (rng.uniform() < pa ? detail::sample_box_surface(a, oa, rng)
                                                       : detail::sample_box_surface(b, ob, rng))
                                       .transpose();
                break;
            }
        }
        s.cloud = PointCloud(Points(local * s.rotation.transpose()));
        out.push_back(std::move(s));
    }
    return out;
}

/// Base color of a family; instances jitter around it.
inline Vec3 family_albedo(int label) {
    static const std::array<Vec3, kNumFamilies> palette = {
        Vec3(0.85, 0.25, 0.2), Vec3(0.2, 0.55, 0.85), Vec3(0.25, 0.75, 0.3),
        Vec3(0.9, 0.75, 0.2),  Vec3(0.6, 0.3, 0.75),  Vec3(0.3, 0.8, 0.8)};
    return palette[((label % kNumFamilies) + kNumFamilies) % kNumFamilies];
}

/// Non-differentiable shaded view of a unit-ball cloud: the depth renderer's
/// coverage and hit depth drive a simple depth-cued shading over a light background.
inline Image shaded_render(const PointCloud& cloud, const CameraPose& pose, const Vec3& albedo, int size = kRgbSize) {
    RenderConfig cfg;
    cfg.grid_depth = 32;
    cfg.image_width = cfg.image_height = 56;
    cfg.sigma = 1.2;
    cfg.truncation_radius = 3.6;
    const OccupancyGrid grid = splat_occupancy(world_to_camera(cloud, pose), pose.frustum, cfg);
    const TerminationVolume term = ray_termination(grid);
    Image small(cfg.image_height, cfg.image_width, 3);
    const std::size_t plane = std::size_t(cfg.image_height) * cfg.image_width;
    const Vec3 background(0.95, 0.95, 0.95);
    for (std::size_t p = 0; p < plane; ++p) {
        const double alpha = 1.0 - term.residual[p];
        double z = 0.0;
        for (int d = 0; d < term.depth; ++d) z += term.values[d * plane + p] * slice_depth(d, term.depth);
        const double hit = alpha > 1e-9 ? z / alpha : 1.0;
        const double shade = std::clamp(1.45 - 1.5 * hit, 0.2, 1.0);
        const Vec3 c = alpha * shade * albedo + (1.0 - alpha) * background;
        small.pixels.row(Index(p)) = c.transpose().cwiseMax(0.0).cwiseMin(1.0);
    }
    return resize_image(small, size, size);
}

// ---------------------------------------------------------------------------
// Triplets

struct Triplet {
    std::string object_id;
    int label = -1;
    PointCloud cloud;  // kStoredPoints, normalized to the unit ball
    Image rgb;         // 224 x 224 x 3
    int depth_view_index = 0;

    void validate() const {
        if (cloud.count() != kStoredPoints) throw DomainError("Triplet: cloud must hold 2048 points");
        require_finite(cloud, "Triplet");
        if (rgb.height != kRgbSize || rgb.width != kRgbSize || rgb.channels != 3)
            throw DomainError("Triplet: rgb must be 224x224x3");
        if (rgb.pixels.minCoeff() < 0.0 || rgb.pixels.maxCoeff() > 1.0) throw DomainError("Triplet: rgb outside [0,1]");
        if (depth_view_index < 0 || depth_view_index >= kNumPoses) throw DomainError("Triplet: depth view out of range");
    }
};

struct RgbSource {
    std::optional<Image> image;  // used when present (resized to 224x224)
    bool synthesize = true;      // otherwise render a shaded view
    Vec3 albedo = Vec3(0.7, 0.7, 0.7);
};

/// Rows [0, n) of a seeded permutation, kept in ascending index order.
inline PointCloud subsample(const PointCloud& cloud, Index n, Rng& rng) {
    if (n > cloud.count()) throw DomainError("subsample: not enough points");
    std::vector<std::size_t> perm = rng.permutation(std::size_t(cloud.count()));
    perm.resize(std::size_t(n));
    std::sort(perm.begin(), perm.end());
    Points out(n, 3);
    for (Index i = 0; i < n; ++i) out.row(i) = cloud.xyz.row(Index(perm[i]));
    return PointCloud(std::move(out));
}

inline Triplet make_triplet(std::string object_id, const PointCloud& cloud, const RgbSource& source,
                            std::uint64_t seed, int label = -1) {
    if (cloud.count() < kStoredPoints) throw DomainError("make_triplet: cloud needs at least 2048 points");
    require_finite(cloud, "make_triplet");
    Rng rng(seed, Stream::Triplet);
    Triplet t;
    t.object_id = std::move(object_id);
    t.label = label;
    PointCloud stored = cloud.count() == kStoredPoints ? cloud : subsample(cloud, kStoredPoints, rng);
    t.cloud = normalize_cloud(stored).cloud;
    if (source.image) {
        if (source.image->channels != 3) throw DomainError("make_triplet: rgb source must have 3 channels");
        t.rgb = resize_image(*source.image, kRgbSize, kRgbSize);
        t.rgb.pixels = t.rgb.pixels.cwiseMax(0.0).cwiseMin(1.0);
    } else if (source.synthesize) {
        // an arbitrary viewpoint on the sphere, not one of the rig poses
        Vec3 dir(rng.normal(), rng.normal(), rng.normal());
        dir.normalize();
        const double radius = 2.0;
        const Vec3 up = std::abs(dir.z()) > 0.95 ? Vec3::UnitY() : Vec3::UnitZ();
        const CameraPose pose = look_at_origin(radius * dir, up, unit_ball_frustum(radius));
        t.rgb = shaded_render(t.cloud, pose, source.albedo);
    } else {
        throw DomainError("make_triplet: no RGB source and synthesis disabled");
    }
    t.depth_view_index = int(rng.index(kNumPoses));
    t.validate();
    return t;
}

/// The seeded 1024-point encoder input for one draw.
inline PointCloud encoder_input(const Triplet& t, std::uint64_t seed, std::uint64_t draw) {
    Rng rng(seed, Stream::Subsample, {hash_string(t.object_id), draw});
    return subsample(t.cloud, kEncoderPoints, rng);
}

/// Triplets for the synthetic dataset, with per-family colors jittered per instance.
inline std::vector<Triplet> synth_triplets(int n, std::uint64_t seed) {
    const std::vector<SynthShape> shapes = synth_shapes(n, seed);
    std::vector<Triplet> out;
    out.reserve(shapes.size());
    for (std::size_t i = 0; i < shapes.size(); ++i) {
        Rng rng(seed, Stream::Triplet, {std::uint64_t(i), 1});
        RgbSource src;
        src.albedo = (family_albedo(shapes[i].label) + Vec3(rng.uniform(-0.08, 0.08), rng.uniform(-0.08, 0.08),
                                                            rng.uniform(-0.08, 0.08)))
                         .cwiseMax(0.0)
                         .cwiseMin(1.0);
        char id[32];
        std::snprintf(id, sizeof id, "synth_%04zu", i);
        out.push_back(make_triplet(id, shapes[i].cloud, src, mix_seed({seed, i}), shapes[i].label));
    }
    return out;
}

// ---------------------------------------------------------------------------
// Augmentation

struct RgbAugment {
    double strength = 0.4;  // multiplicative jitter half-width
    double min_area = 0.6;  // crop area fraction range
    double max_area = 1.0;
    double flip_prob = 0.5;
};

inline Image hflip(const Image& img) {
    Image out = img;
    for (int y = 0; y < img.height; ++y)
        for (int x = 0; x < img.width; ++x) out.pixels.row(Index(y) * img.width + x) = img.pixels.row(Index(y) * img.width + (img.width - 1 - x));
    return out;
}

/// Random square crop resized back to the input size, per-channel
/// multiplicative jitter clamped to [0, 1], then a random horizontal flip.
inline Image augment_rgb(const Image& img, const RgbAugment& aug, std::uint64_t seed) {
    Rng rng(seed, Stream::AugmentRgb);
    const double area = rng.uniform(aug.min_area, aug.max_area);
    const int side_h = std::clamp(int(std::lround(img.height * std::sqrt(area))), 1, img.height);
    const int side_w = std::clamp(int(std::lround(img.width * std::sqrt(area))), 1, img.width);
    const int y0 = int(rng.index(std::size_t(img.height - side_h + 1)));
    const int x0 = int(rng.index(std::size_t(img.width - side_w + 1)));
    Image out = resize_region(img, y0, x0, side_h, side_w, img.height, img.width);
    for (int c = 0; c < out.channels; ++c) {
        const double f = rng.uniform(1.0 - aug.strength, 1.0 + aug.strength);
        out.pixels.col(c) = (out.pixels.col(c) * f).cwiseMax(0.0).cwiseMin(1.0);
    }
    if (rng.bernoulli(aug.flip_prob)) out = hflip(out);
    return out;
}

inline Image augment_rgb(const Image& img, double strength, std::uint64_t seed) {
    RgbAugment aug;
    aug.strength = strength;
    return augment_rgb(img, aug, seed);
}

struct CloudAugment {
    double scale_min = 2.0 / 3.0;
    double scale_max = 1.5;
    double translate = 0.2;
};

inline PointCloud affine_cloud(const PointCloud& cloud, double scale, const Vec3& shift) {
    Points out = cloud.xyz * scale;
    out.rowwise() += shift.transpose();
    return PointCloud(std::move(out));
}

/// Isotropic random scale followed by a random translation.
inline PointCloud augment_cloud(const PointCloud& cloud, const CloudAugment& aug, std::uint64_t seed) {
    Rng rng(seed, Stream::AugmentCloud);
    const double s = rng.uniform(aug.scale_min, aug.scale_max);
    const Vec3 t(rng.uniform(-aug.translate, aug.translate), rng.uniform(-aug.translate, aug.translate),
                 rng.uniform(-aug.translate, aug.translate));
    return affine_cloud(cloud, s, t);
}

inline PointCloud augment_cloud(const PointCloud& cloud, std::uint64_t seed) { return augment_cloud(cloud, CloudAugment{}, seed); }

// ---------------------------------------------------------------------------
// Manifest

struct ManifestEntry {
    std::string id;
    std::string cloud_path;
    std::optional<std::string> rgb_path;
};

/// One JSON object per line: {"id", "cloud_path", "rgb_path"?}. Relative paths
/// resolve against the manifest's directory.
inline std::vector<ManifestEntry> load_manifest(const std::string& path) {
    std::ifstream in(path);
    if (!in) throw FormatError("load_manifest: cannot open " + path);
    const std::filesystem::path base = std::filesystem::path(path).parent_path();
    auto resolve = [&](const std::string& p) {
        const std::filesystem::path fp(p);
        return (fp.is_absolute() ? fp : base / fp).string();
    };
    std::vector<ManifestEntry> out;
    std::string line;
    std::size_t lineno = 0;
    while (std::getline(in, line)) {
        ++lineno;
        if (line.find_first_not_of(" \t\r") == std::string::npos) continue;
        nlohmann::json j;
        try {
            j = nlohmann::json::parse(line);
        } catch (const nlohmann::json::parse_error& e) {
            throw ParseError(path, lineno, e.what());
        }
        if (!j.is_object() || !j.contains("id") || !j.contains("cloud_path") || !j["id"].is_string() ||
            !j["cloud_path"].is_string())
            throw ParseError(path, lineno, "entry needs string fields id and cloud_path");
        for (const auto& [key, _] : j.items())
            if (key != "id" && key != "cloud_path" && key != "rgb_path") throw ParseError(path, lineno, "unknown field " + key);
        ManifestEntry e{j["id"].get<std::string>(), resolve(j["cloud_path"].get<std::string>()), std::nullopt};
        if (j.contains("rgb_path") && !j["rgb_path"].is_null()) {
            if (!j["rgb_path"].is_string()) throw ParseError(path, lineno, "rgb_path must be a string");
            e.rgb_path = resolve(j["rgb_path"].get<std::string>());
        }
        out.push_back(std::move(e));
    }
    if (out.empty()) throw FormatError("load_manifest: no entries in " + path);
    return out;
}

inline std::vector<Triplet> load_dataset(const std::string& manifest_path, std::uint64_t seed) {
    std::vector<Triplet> out;
    std::size_t i = 0;
    for (const ManifestEntry& e : load_manifest(manifest_path)) {
        RgbSource src;
        if (e.rgb_path) src.image = load_png(*e.rgb_path);
        out.push_back(make_triplet(e.id, load_xyz(e.cloud_path), src, mix_seed({seed, i++})));
    }
    return out;
}

}  // namespace drpoint
