#pragma once

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <cstdio>
#include <cstring>
#include <fstream>
#include <memory>
#include <string>
#include <vector>

#include <png.h>

#include "drpoint/error.hpp"
#include "drpoint/renderer.hpp"
#include "drpoint/tensor.hpp"

namespace drpoint {

/// H x W x C image with channel values in [0, 1]; pixels holds (H*W) x C rows.
struct Image {
    int height = 0;
    int width = 0;
    int channels = 0;
    Mat pixels;

    Image() = default;
    Image(int h, int w, int c, double fill = 0.0) : height(h), width(w), channels(c), pixels(Mat::Constant(Index(h) * w, c, fill)) {}

    double& at(int y, int x, int c) { return pixels(Index(y) * width + x, c); }
    double at(int y, int x, int c) const { return pixels(Index(y) * width + x, c); }
};

inline Image to_image(const DepthImage& depth) {
    Image img(int(depth.height()), int(depth.width()), 1);
    img.pixels.col(0) = Eigen::Map<const Eigen::VectorXd>(depth.pixels.data(), depth.pixels.size());
    return img;
}

// ---------------------------------------------------------------------------
// Resampling

namespace detail {

// Resampling weights along one axis: each output sample gets (source index, weight) pairs.
// Shrinking averages the covered source interval; enlarging interpolates linearly.
inline std::vector<std::vector<std::pair<int, double>>> axis_weights(int in, int out) {
    std::vector<std::vector<std::pair<int, double>>> w(out);
    const double scale = double(in) / double(out);
    for (int o = 0; o < out; ++o) {
        if (scale > 1.0) {
            const double lo = o * scale, hi = (o + 1) * scale;
            for (int i = int(std::floor(lo)); i < int(std::ceil(hi)) && i < in; ++i) {
                const double cover = std::min(hi, double(i + 1)) - std::max(lo, double(i));
                if (cover > 0.0) w[o].emplace_back(i, cover / scale);
            }
        } else {
            const double src = (o + 0.5) * scale - 0.5;
            const int i0 = int(std::floor(src));
            const double f = src - i0;
            const int a = std::clamp(i0, 0, in - 1), b = std::clamp(i0 + 1, 0, in - 1);
            if (f == 0.0 || a == b) {
                w[o].emplace_back(a, 1.0);
            } else {
                w[o].emplace_back(a, 1.0 - f);
                w[o].emplace_back(b, f);
            }
        }
    }
    return w;
}

}  // namespace detail

/// Row-stochastic out x in matrix applying the same 1-D resampling as resize_image;
/// A * img * B^T resizes a single-channel image with A = resize_matrix(H, h), B = resize_matrix(W, w).
inline Mat resize_matrix(int in, int out) {
    Mat m = Mat::Zero(out, in);
    const auto w = detail::axis_weights(in, out);
    for (int o = 0; o < out; ++o)
        for (const auto& [i, f] : w[o]) m(o, i) += f;
    return m;
}

/// Separable resize of a region [y0, y0+h) x [x0, x0+w) of `src` to out_h x out_w.
inline Image resize_region(const Image& src, int y0, int x0, int h, int w, int out_h, int out_w) {
    if (h <= 0 || w <= 0 || y0 < 0 || x0 < 0 || y0 + h > src.height || x0 + w > src.width)
        throw DomainError("resize_region: crop outside the image");
    const auto wy = detail::axis_weights(h, out_h);
    const auto wx = detail::axis_weights(w, out_w);
    Image tmp(h, out_w, src.channels);
    for (int y = 0; y < h; ++y)
        for (int x = 0; x < out_w; ++x)
            for (const auto& [i, f] : wx[x])
                tmp.pixels.row(Index(y) * out_w + x) += f * src.pixels.row(Index(y0 + y) * src.width + x0 + i);
    Image out(out_h, out_w, src.channels);
    for (int y = 0; y < out_h; ++y)
        for (const auto& [i, f] : wy[y])
            out.pixels.middleRows(Index(y) * out_w, out_w) += f * tmp.pixels.middleRows(Index(i) * out_w, out_w);
    return out;
}

inline Image resize_image(const Image& src, int out_h, int out_w) {
    if (src.height == out_h && src.width == out_w) return src;
    return resize_region(src, 0, 0, src.height, src.width, out_h, out_w);
}

// ---------------------------------------------------------------------------
// PNG

inline std::uint8_t to_byte(double v) {
    return static_cast<std::uint8_t>(std::lround(std::clamp(v, 0.0, 1.0) * 255.0));
}

/// Reads an 8-bit PNG. Gray and gray+alpha load as 1 channel, RGB, RGBA and
/// palette images as 3; alpha is discarded. Values are scaled by 1/255.
inline Image load_png(const std::string& path) {
    std::unique_ptr<FILE, int (*)(FILE*)> fp(std::fopen(path.c_str(), "rb"), &std::fclose);
    if (!fp) throw FormatError("load_png: cannot open " + path);
    unsigned char sig[8];
    if (std::fread(sig, 1, 8, fp.get()) != 8 || png_sig_cmp(sig, 0, 8) != 0)
        throw FormatError("load_png: not a PNG file: " + path);

    png_structp png = png_create_read_struct(PNG_LIBPNG_VER_STRING, nullptr, nullptr, nullptr);
    png_infop info = png ? png_create_info_struct(png) : nullptr;
    if (!png || !info) {
        png_destroy_read_struct(&png, &info, nullptr);
        throw FormatError("load_png: libpng initialization failed");
    }
    std::vector<std::uint8_t> data;
    int width = 0, height = 0, channels = 0, bit_depth = 0, color = 0;
    std::size_t rowbytes = 0;
    if (setjmp(png_jmpbuf(png))) {
        png_destroy_read_struct(&png, &info, nullptr);
        throw FormatError("load_png: corrupt PNG: " + path);
    }
    png_init_io(png, fp.get());
    png_set_sig_bytes(png, 8);
    png_read_info(png, info);
    width = int(png_get_image_width(png, info));
    height = int(png_get_image_height(png, info));
    bit_depth = png_get_bit_depth(png, info);
    color = png_get_color_type(png, info);
    if (bit_depth != 8 && !(color == PNG_COLOR_TYPE_PALETTE && bit_depth <= 8)) {
        png_destroy_read_struct(&png, &info, nullptr);
        throw FormatError("load_png: unsupported bit depth " + std::to_string(bit_depth) + " in " + path);
    }
    if (color == PNG_COLOR_TYPE_PALETTE) png_set_palette_to_rgb(png);
    if (color & PNG_COLOR_MASK_ALPHA) png_set_strip_alpha(png);
    if (png_get_valid(png, info, PNG_INFO_tRNS)) png_set_strip_alpha(png);
    png_read_update_info(png, info);
    channels = png_get_channels(png, info);
    rowbytes = png_get_rowbytes(png, info);
    data.resize(rowbytes * height);
    std::vector<png_bytep> rows(height);
    for (int y = 0; y < height; ++y) rows[y] = data.data() + y * rowbytes;
    png_read_image(png, rows.data());
    png_read_end(png, nullptr);
    png_destroy_read_struct(&png, &info, nullptr);

    if (channels != 1 && channels != 3) throw FormatError("load_png: unsupported channel layout in " + path);
    Image img(height, width, channels);
    for (int y = 0; y < height; ++y)
        for (int x = 0; x < width; ++x)
            for (int c = 0; c < channels; ++c) img.at(y, x, c) = data[y * rowbytes + x * channels + c] / 255.0;
    return img;
}

/// Writes an 8-bit gray (1 channel) or RGB (3 channels) PNG, value = round(v * 255).
inline void save_png(const Image& img, const std::string& path) {
    if (img.channels != 1 && img.channels != 3) throw DomainError("save_png: need 1 or 3 channels");
    std::unique_ptr<FILE, int (*)(FILE*)> fp(std::fopen(path.c_str(), "wb"), &std::fclose);
    if (!fp) throw FormatError("save_png: cannot write " + path);
    png_structp png = png_create_write_struct(PNG_LIBPNG_VER_STRING, nullptr, nullptr, nullptr);
    png_infop info = png ? png_create_info_struct(png) : nullptr;
    if (!png || !info) {
        png_destroy_write_struct(&png, &info);
        throw FormatError("save_png: libpng initialization failed");
    }
    const std::size_t rowbytes = std::size_t(img.width) * img.channels;
    std::vector<std::uint8_t> data(rowbytes * img.height);
    for (int y = 0; y < img.height; ++y)
        for (int x = 0; x < img.width; ++x)
            for (int c = 0; c < img.channels; ++c) data[y * rowbytes + x * img.channels + c] = to_byte(img.at(y, x, c));
    std::vector<png_bytep> rows(img.height);
    for (int y = 0; y < img.height; ++y) rows[y] = data.data() + y * rowbytes;
    if (setjmp(png_jmpbuf(png))) {
        png_destroy_write_struct(&png, &info);
        throw FormatError("save_png: write failed for " + path);
    }
    png_init_io(png, fp.get());
    png_set_IHDR(png, info, img.width, img.height, 8, img.channels == 1 ? PNG_COLOR_TYPE_GRAY : PNG_COLOR_TYPE_RGB,
                 PNG_INTERLACE_NONE, PNG_COMPRESSION_TYPE_DEFAULT, PNG_FILTER_TYPE_DEFAULT);
    png_write_info(png, info);
    png_write_image(png, rows.data());
    png_write_end(png, nullptr);
    png_destroy_write_struct(&png, &info);
}

// ---------------------------------------------------------------------------
// Raw little-endian containers

namespace detail {

inline bool host_little_endian() {
    const std::uint16_t one = 1;
    std::uint8_t b;
    std::memcpy(&b, &one, 1);
    return b == 1;
}

template <class T>
void write_le(std::ostream& os, T v) {
    std::uint8_t bytes[sizeof(T)];
    std::memcpy(bytes, &v, sizeof(T));
    if (!host_little_endian()) std::reverse(bytes, bytes + sizeof(T));
    os.write(reinterpret_cast<const char*>(bytes), sizeof(T));
}

template <class T>
T read_le(std::istream& is, const char* what) {
    std::uint8_t bytes[sizeof(T)];
    if (!is.read(reinterpret_cast<char*>(bytes), sizeof(T))) throw FormatError(std::string(what) + ": truncated file");
    if (!host_little_endian()) std::reverse(bytes, bytes + sizeof(T));
    T v;
    std::memcpy(&v, bytes, sizeof(T));
    return v;
}

inline void expect_magic(std::istream& is, const char (&magic)[5], const char* what) {
    char m[4];
    if (!is.read(m, 4)) throw FormatError(std::string(what) + ": truncated file");
    if (std::memcmp(m, magic, 4) != 0) throw FormatError(std::string(what) + ": bad magic");
}

}  // namespace detail

inline constexpr std::uint32_t kDepthRawVersion = 1;

/// "DRPT", u32 version, u32 H, u32 W, then H*W float32 row-major.
inline void save_depth_raw(const DepthImage& img, const std::string& path) {
    std::ofstream os(path, std::ios::binary);
    if (!os) throw FormatError("save_depth_raw: cannot write " + path);
    os.write("DRPT", 4);
    detail::write_le<std::uint32_t>(os, kDepthRawVersion);
    detail::write_le<std::uint32_t>(os, std::uint32_t(img.height()));
    detail::write_le<std::uint32_t>(os, std::uint32_t(img.width()));
    for (Index i = 0; i < img.pixels.size(); ++i) detail::write_le<float>(os, float(img.pixels.data()[i]));
    if (!os) throw FormatError("save_depth_raw: write failed for " + path);
}

inline DepthImage load_depth_raw(const std::string& path) {
    std::ifstream is(path, std::ios::binary);
    if (!is) throw FormatError("load_depth_raw: cannot open " + path);
    detail::expect_magic(is, "DRPT", "load_depth_raw");
    const auto version = detail::read_le<std::uint32_t>(is, "load_depth_raw");
    if (version != kDepthRawVersion) throw VersionError("load_depth_raw", version, kDepthRawVersion);
    const auto h = detail::read_le<std::uint32_t>(is, "load_depth_raw");
    const auto w = detail::read_le<std::uint32_t>(is, "load_depth_raw");
    DepthImage img;
    img.pixels.resize(h, w);
    for (Index i = 0; i < img.pixels.size(); ++i) img.pixels.data()[i] = detail::read_le<float>(is, "load_depth_raw");
    return img;
}

inline constexpr std::uint32_t kFeatureFileVersion = 1;

/// "DRFE", u32 version, u32 count, u32 dim, then count*dim float32 rows.
inline void save_features(const Mat& rows, const std::string& path) {
    std::ofstream os(path, std::ios::binary);
    if (!os) throw FormatError("save_features: cannot write " + path);
    os.write("DRFE", 4);
    detail::write_le<std::uint32_t>(os, kFeatureFileVersion);
    detail::write_le<std::uint32_t>(os, std::uint32_t(rows.rows()));
    detail::write_le<std::uint32_t>(os, std::uint32_t(rows.cols()));
    for (Index i = 0; i < rows.size(); ++i) detail::write_le<float>(os, float(rows.data()[i]));
    if (!os) throw FormatError("save_features: write failed for " + path);
}

inline Mat load_features(const std::string& path) {
    std::ifstream is(path, std::ios::binary);
    if (!is) throw FormatError("load_features: cannot open " + path);
    detail::expect_magic(is, "DRFE", "load_features");
    const auto version = detail::read_le<std::uint32_t>(is, "load_features");
    if (version != kFeatureFileVersion) throw VersionError("load_features", version, kFeatureFileVersion);
    const auto count = detail::read_le<std::uint32_t>(is, "load_features");
    const auto dim = detail::read_le<std::uint32_t>(is, "load_features");
    Mat rows(count, dim);
    for (Index i = 0; i < rows.size(); ++i) rows.data()[i] = detail::read_le<float>(is, "load_features");
    return rows;
}

}  // namespace drpoint
