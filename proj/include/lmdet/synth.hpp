#pragma once

#include <cmath>
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <string>

#include "lmdet/data.hpp"
#include "lmdet/errors.hpp"
#include "lmdet/image.hpp"
#include "lmdet/rng.hpp"

namespace lmdet {

enum class Domain { source, target };

inline Domain parse_domain(const std::string& s) {
    if (s == "source") return Domain::source;
    if (s == "target") return Domain::target;
    throw DataError("domain must be 'source' or 'target', got '" + s + "'");
}

namespace detail {

inline void draw_disc(Image& img, int cx, int cy, int r, double value) {
    for (int y = std::max(0, cy - r); y <= std::min(img.height - 1, cy + r); ++y)
        for (int x = std::max(0, cx - r); x <= std::min(img.width - 1, cx + r); ++x)
            if ((x - cx) * (x - cx) + (y - cy) * (y - cy) <= r * r) img.at(0, y, x) = value;
}

inline void draw_ring(Image& img, int cx, int cy, double r, double thickness, double value) {
    const int b = static_cast<int>(std::ceil(r + thickness));
    for (int y = std::max(0, cy - b); y <= std::min(img.height - 1, cy + b); ++y)
        for (int x = std::max(0, cx - b); x <= std::min(img.width - 1, cx + b); ++x) {
            const double d = std::sqrt(double((x - cx) * (x - cx) + (y - cy) * (y - cy)));
            if (std::abs(d - r) <= thickness / 2.0) img.at(0, y, x) = value;
        }
}

inline void draw_plus(Image& img, int cx, int cy, int arm, double value) {
    for (int k = -arm; k <= arm; ++k) {
        const int x = cx + k, y = cy + k;
        if (x >= 0 && x < img.width && cy >= 0 && cy < img.height) img.at(0, cy, x) = value;
        if (cx >= 0 && cx < img.width && y >= 0 && y < img.height) img.at(0, y, cx) = value;
    }
}

// Filled isosceles triangle, apex up, `height` rows tall, centred on (cx,cy):
// row i below the apex spans cx-i..cx+i.
inline void draw_triangle(Image& img, int cx, int cy, int height, double value) {
    const int apex = cy - height / 2;
    for (int i = 0; i < height; ++i) {
        const int y = apex + i;
        if (y < 0 || y >= img.height) continue;
        for (int x = std::max(0, cx - i); x <= std::min(img.width - 1, cx + i); ++x)
            img.at(0, y, x) = value;
    }
}

inline int band(int v32, int size) { return v32 * size / 32; }

}  // namespace detail

// Procedural two-domain face stand-ins with exact landmark labels.
//
// Source domain: light background (0.8 with mild per-image jitter), two
// filled dark discs for eyes, a dark plus for the nose. Target domain: dark
// background (0.2), bright unfilled rings for eyes, a bright filled triangle
// for the nose. Same placement bands in both domains; labels are the exact
// shape centres. Deterministic per (domain, count, seed, size).
inline Dataset generate_synthetic(Domain domain, int count, std::uint64_t seed, int size = 32) {
    if (count < 1) throw DataError("generate_synthetic: count must be >= 1");
    if (size < 16 || size % 4 != 0)
        throw DataError("generate_synthetic: size must be a multiple of 4, >= 16");
    Rng rng = Rng(seed).derive(domain == Domain::source ? 1 : 2);
    Dataset ds;
    ds.labeled = true;
    ds.samples.reserve(static_cast<std::size_t>(count));
    const auto b = [size](int v) { return detail::band(v, size); };
    for (int i = 0; i < count; ++i) {
        const int ley = static_cast<int>(rng.uniform_int(b(8), b(14)));
        const int lex = static_cast<int>(rng.uniform_int(b(6), b(14)));
        const int rey = static_cast<int>(rng.uniform_int(b(8), b(14)));
        const int rex = static_cast<int>(rng.uniform_int(b(18), b(26)));
        const int ny = static_cast<int>(rng.uniform_int(b(18), b(24)));
        const int nx = static_cast<int>(rng.uniform_int(b(12), b(20)));

        Sample s;
        if (domain == Domain::source) {
            const double bg = 0.8 + rng.uniform(-0.05, 0.05);
            s.image = Image(size, size, 1, bg);
            const int r1 = static_cast<int>(rng.uniform_int(2, 3));
            const int r2 = static_cast<int>(rng.uniform_int(2, 3));
            detail::draw_disc(s.image, lex, ley, r1, 0.15);
            detail::draw_disc(s.image, rex, rey, r2, 0.15);
            detail::draw_plus(s.image, nx, ny, 2, 0.15);
        } else {
            s.image = Image(size, size, 1, 0.2);
            detail::draw_ring(s.image, lex, ley, 3.0, 1.0, 0.9);
            detail::draw_ring(s.image, rex, rey, 3.0, 1.0, 0.9);
            detail::draw_triangle(s.image, nx, ny, 5, 0.9);
        }
        LandmarkSet lm;
        lm.coords = {pixel_to_norm(lex, size), pixel_to_norm(ley, size),
                     pixel_to_norm(rex, size), pixel_to_norm(rey, size),
                     pixel_to_norm(nx, size),  pixel_to_norm(ny, size)};
        lm.validate();
        s.landmarks = lm;
        char tag[64];
        std::snprintf(tag, sizeof(tag), "synth_%s_%06d.pgm",
                      domain == Domain::source ? "source" : "target", i);
        s.source_id = tag;
        ds.samples.push_back(std::move(s));
    }
    return ds;
}

// Writes a dataset as PGM files plus annotations.csv in the documented
// layout, so synthetic data is format-identical to user-supplied data.
inline void write_dataset(const Dataset& ds, const std::filesystem::path& dir) {
    std::filesystem::create_directories(dir);
    std::ofstream csv(dir / "annotations.csv");
    if (!csv) throw IoError("cannot write " + (dir / "annotations.csv").string());
    csv << kAnnotationHeader << "\n";
    for (const auto& s : ds.samples) {
        write_image(s.image, dir / s.source_id);
        if (!s.landmarks) continue;
        csv << s.source_id;
        for (int i = 0; i < 6; ++i) {
            const int extent = (i % 2 == 0) ? s.image.width : s.image.height;
            char buf[32];
            std::snprintf(buf, sizeof(buf), "%.10g",
                          norm_to_pixel(s.landmarks->coords[static_cast<std::size_t>(i)], extent));
            csv << "," << buf;
        }
        csv << "\n";
    }
    if (!csv) throw IoError("short write on annotations.csv");
}

}  // namespace lmdet
