#pragma once

#include <algorithm>
#include <cctype>
#include <cmath>
#include <cstdint>
#include <filesystem>
#include <fstream>
#include <numbers>
#include <string>
#include <vector>

#include "lmdet/errors.hpp"

namespace lmdet {

// Planar [C,H,W] raster with values in [0,1]. Channels is 1 (grey) or 3.
struct Image {
    int width = 0;
    int height = 0;
    int channels = 0;
    std::vector<double> px;

    Image() = default;
    Image(int w, int h, int c, double fill = 0.0)
        : width(w), height(h), channels(c),
          px(static_cast<std::size_t>(w) * h * c, fill) {}

    double& at(int c, int y, int x) {
        return px[(static_cast<std::size_t>(c) * height + y) * width + x];
    }
    double at(int c, int y, int x) const {
        return px[(static_cast<std::size_t>(c) * height + y) * width + x];
    }
};

namespace detail {

// Reads one whitespace-separated header token, skipping '#' comment lines.
inline std::string pnm_token(std::istream& is) {
    std::string tok;
    int ch;
    while ((ch = is.get()) != EOF) {
        if (ch == '#') {
            while ((ch = is.get()) != EOF && ch != '\n') {
            }
            continue;
        }
        if (std::isspace(ch)) {
            if (!tok.empty()) return tok;
            continue;
        }
        tok.push_back(static_cast<char>(ch));
    }
    return tok;
}

inline double bilinear_at(const Image& img, int c, double sx, double sy) {
    sx = std::clamp(sx, 0.0, static_cast<double>(img.width - 1));
    sy = std::clamp(sy, 0.0, static_cast<double>(img.height - 1));
    const int x0 = static_cast<int>(std::floor(sx));
    const int y0 = static_cast<int>(std::floor(sy));
    const int x1 = std::min(x0 + 1, img.width - 1);
    const int y1 = std::min(y0 + 1, img.height - 1);
    const double fx = sx - x0;
    const double fy = sy - y0;
    const double top = img.at(c, y0, x0) * (1.0 - fx) + img.at(c, y0, x1) * fx;
    const double bot = img.at(c, y1, x0) * (1.0 - fx) + img.at(c, y1, x1) * fx;
    return top * (1.0 - fy) + bot * fy;
}

}  // namespace detail

// Binary netpbm: P5 (8-bit grayscale) and P6 (8-bit RGB).
inline Image read_image(const std::filesystem::path& path) {
    std::ifstream is(path, std::ios::binary);
    if (!is) throw IoError("cannot open image: " + path.string());
    const std::string magic = detail::pnm_token(is);
    int channels;
    if (magic == "P5")
        channels = 1;
    else if (magic == "P6")
        channels = 3;
    else
        throw DataError("unsupported image format in " + path.string() +
                        " (expected binary PGM 'P5' or PPM 'P6')");
    const std::string ws = detail::pnm_token(is);
    const std::string hs = detail::pnm_token(is);
    const std::string ms = detail::pnm_token(is);
    int w, h, maxval;
    try {
        w = std::stoi(ws);
        h = std::stoi(hs);
        maxval = std::stoi(ms);
    } catch (const std::exception&) {
        throw DataError("malformed netpbm header in " + path.string());
    }
    if (w <= 0 || h <= 0) throw DataError("bad image dimensions in " + path.string());
    if (maxval <= 0 || maxval > 255)
        throw DataError("only 8-bit netpbm supported (maxval<=255) in " + path.string());

    const std::size_t count = static_cast<std::size_t>(w) * h * channels;
    std::vector<unsigned char> raw(count);
    is.read(reinterpret_cast<char*>(raw.data()), static_cast<std::streamsize>(count));
    if (static_cast<std::size_t>(is.gcount()) != count)
        throw DataError("truncated raster in " + path.string());

    Image img(w, h, channels);
    const double scale = 1.0 / maxval;
    // interleaved on disk -> planar in memory
    for (int y = 0; y < h; ++y)
        for (int x = 0; x < w; ++x)
            for (int c = 0; c < channels; ++c)
                img.at(c, y, x) =
                    raw[(static_cast<std::size_t>(y) * w + x) * channels + c] * scale;
    return img;
}

inline void write_image(const Image& img, const std::filesystem::path& path) {
    std::ofstream os(path, std::ios::binary | std::ios::trunc);
    if (!os) throw IoError("cannot open image for writing: " + path.string());
    os << (img.channels == 1 ? "P5" : "P6") << "\n"
       << img.width << " " << img.height << "\n255\n";
    std::vector<unsigned char> raw(static_cast<std::size_t>(img.width) * img.height *
                                   img.channels);
    for (int y = 0; y < img.height; ++y)
        for (int x = 0; x < img.width; ++x)
            for (int c = 0; c < img.channels; ++c) {
                const double v = std::clamp(img.at(c, y, x), 0.0, 1.0);
                raw[(static_cast<std::size_t>(y) * img.width + x) * img.channels + c] =
                    static_cast<unsigned char>(std::lround(v * 255.0));
            }
    os.write(reinterpret_cast<const char*>(raw.data()), static_cast<std::streamsize>(raw.size()));
    if (!os) throw IoError("short write on image: " + path.string());
}

// Channel average.
inline Image to_grayscale(const Image& img) {
    if (img.channels == 1) return img;
    Image out(img.width, img.height, 1);
    for (int y = 0; y < img.height; ++y)
        for (int x = 0; x < img.width; ++x) {
            double s = 0.0;
            for (int c = 0; c < img.channels; ++c) s += img.at(c, y, x);
            out.at(0, y, x) = s / img.channels;
        }
    return out;
}

// Align-corners bilinear resize: output pixel i samples the source at
// i*(src-1)/(dst-1), so corner pixels map to corner pixels and the landmark
// coordinate convention composes with the resize exactly.
inline Image resize_bilinear(const Image& img, int out_w, int out_h) {
    if (out_w <= 0 || out_h <= 0) throw DataError("resize: target must be positive");
    if (out_w == img.width && out_h == img.height) return img;
    Image out(out_w, out_h, img.channels);
    const double sx_scale = out_w > 1 ? static_cast<double>(img.width - 1) / (out_w - 1) : 0.0;
    const double sy_scale = out_h > 1 ? static_cast<double>(img.height - 1) / (out_h - 1) : 0.0;
    for (int c = 0; c < img.channels; ++c)
        for (int y = 0; y < out_h; ++y)
            for (int x = 0; x < out_w; ++x)
                out.at(c, y, x) = detail::bilinear_at(img, c, x * sx_scale, y * sy_scale);
    return out;
}

// Rotation about the image centre ((W-1)/2, (H-1)/2) by `angle_deg`, y axis
// pointing down, bilinear sampling, out-of-frame pixels edge-replicated.
// Positive angles move the point (1,0) towards positive y.
inline Image rotate_about_center(const Image& img, double angle_deg) {
    const double a = angle_deg * std::numbers::pi / 180.0;
    const double cs = std::cos(a), sn = std::sin(a);
    const double cx = (img.width - 1) / 2.0;
    const double cy = (img.height - 1) / 2.0;
    Image out(img.width, img.height, img.channels);
    for (int c = 0; c < img.channels; ++c)
        for (int y = 0; y < img.height; ++y)
            for (int x = 0; x < img.width; ++x) {
                const double dx = x - cx;
                const double dy = y - cy;
                // inverse rotation R(-a)
                const double sx = cx + cs * dx + sn * dy;
                const double sy = cy - sn * dx + cs * dy;
                out.at(c, y, x) = detail::bilinear_at(img, c, sx, sy);
            }
    return out;
}

// Integer translation by (dx, dy) pixels; vacated borders edge-replicated.
inline Image translate(const Image& img, int dx, int dy) {
    Image out(img.width, img.height, img.channels);
    for (int c = 0; c < img.channels; ++c)
        for (int y = 0; y < img.height; ++y)
            for (int x = 0; x < img.width; ++x) {
                const int sx = std::clamp(x - dx, 0, img.width - 1);
                const int sy = std::clamp(y - dy, 0, img.height - 1);
                out.at(c, y, x) = img.at(c, sy, sx);
            }
    return out;
}

}  // namespace lmdet
