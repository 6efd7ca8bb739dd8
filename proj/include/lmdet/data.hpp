#pragma once

#include <algorithm>
#include <array>
#include <cmath>
#include <filesystem>
#include <fstream>
#include <map>
#include <optional>
#include <span>
#include <string>
#include <vector>

#include "lmdet/errors.hpp"
#include "lmdet/image.hpp"
#include "lmdet/rng.hpp"
#include "lmdet/tensor.hpp"

namespace lmdet {

// Normalized landmark coordinates, 6 reals in [-1,1], ordered
// (left_eye_x, left_eye_y, right_eye_x, right_eye_y, nose_x, nose_y).
// Pixel (p) on an axis of extent W maps to 2p/(W-1) - 1, so -1 and +1 are the
// centres of the first and last pixels and 0 is the image centre.
struct LandmarkSet {
    std::array<double, 6> coords{};

    void validate() const {
        for (double c : coords)
            if (!(c >= -1.0 && c <= 1.0))
                throw DataError("landmark coordinate " + std::to_string(c) +
                                " outside [-1,1]");
    }
    bool in_bounds() const {
        for (double c : coords)
            if (!(c >= -1.0 && c <= 1.0)) return false;
        return true;
    }
    bool operator==(const LandmarkSet&) const = default;
};

inline double pixel_to_norm(double px, int extent) {
    return 2.0 * px / (extent - 1) - 1.0;
}
inline double norm_to_pixel(double c, int extent) {
    return (c + 1.0) * (extent - 1) / 2.0;
}

// One face image, optionally annotated.
struct Sample {
    Image image;
    std::optional<LandmarkSet> landmarks;
    std::string source_id;
};

struct Dataset {
    std::vector<Sample> samples;
    bool labeled = false;

    std::size_t size() const { return samples.size(); }
};

inline constexpr const char* kAnnotationHeader =
    "filename,left_eye_x,left_eye_y,right_eye_x,right_eye_y,nose_x,nose_y";

namespace detail {

struct CsvRow {
    std::string filename;
    std::array<double, 6> px;
    int line_no;
};

inline std::vector<CsvRow> parse_annotation_csv(const std::filesystem::path& csv_path) {
    std::ifstream is(csv_path);
    if (!is) throw IoError("cannot open annotations: " + csv_path.string());
    std::string line;
    int line_no = 0;
    if (!std::getline(is, line)) throw DataError(csv_path.string() + ": empty file");
    ++line_no;
    if (!line.empty() && line.back() == '\r') line.pop_back();
    if (line != kAnnotationHeader)
        throw DataError(csv_path.string() + " row 1: header must be '" +
                        std::string(kAnnotationHeader) + "'");
    std::vector<CsvRow> rows;
    while (std::getline(is, line)) {
        ++line_no;
        if (!line.empty() && line.back() == '\r') line.pop_back();
        if (line.empty()) continue;
        std::vector<std::string> fields;
        std::string cur;
        for (char ch : line) {
            if (ch == ',') {
                fields.push_back(cur);
                cur.clear();
            } else {
                cur.push_back(ch);
            }
        }
        fields.push_back(cur);
        if (fields.size() != 7)
            throw DataError(csv_path.string() + " row " + std::to_string(line_no) +
                            ": expected 7 comma-separated fields, got " +
                            std::to_string(fields.size()));
        CsvRow row;
        row.filename = fields[0];
        row.line_no = line_no;
        for (int i = 0; i < 6; ++i) {
            try {
                std::size_t used = 0;
                row.px[static_cast<std::size_t>(i)] = std::stod(fields[static_cast<std::size_t>(i) + 1], &used);
                if (used != fields[static_cast<std::size_t>(i) + 1].size()) throw std::invalid_argument("trail");
            } catch (const std::exception&) {
                throw DataError(csv_path.string() + " row " + std::to_string(line_no) +
                                ": malformed coordinate '" + fields[static_cast<std::size_t>(i) + 1] + "'");
            }
        }
        rows.push_back(std::move(row));
    }
    return rows;
}

inline Image load_and_condition(const std::filesystem::path& path, int input_size,
                                int channels) {
    Image img = read_image(path);
    if (channels == 1) img = to_grayscale(img);
    else if (img.channels != channels)
        throw DataError(path.string() + ": expected " + std::to_string(channels) +
                        " channels, file has " + std::to_string(img.channels));
    return resize_bilinear(img, input_size, input_size);
}

}  // namespace detail

// Loads a directory of PGM/PPM images, resized to input_size x input_size and
// converted to grayscale when channels == 1. With an annotation CSV the
// dataset is labeled and ordered lexicographically by filename; pixel
// coordinates are validated against the original resolution and mapped to
// normalized [-1,1] (align-corners, so the mapping is resize-invariant).
inline Dataset load_dataset(const std::filesystem::path& image_dir,
                            const std::optional<std::filesystem::path>& annotations,
                            int input_size = 32, int channels = 1) {
    if (!std::filesystem::is_directory(image_dir))
        throw IoError("not a directory: " + image_dir.string());
    Dataset ds;
    if (!annotations) {
        std::vector<std::filesystem::path> files;
        for (const auto& e : std::filesystem::directory_iterator(image_dir)) {
            if (!e.is_regular_file()) continue;
            const auto ext = e.path().extension().string();
            if (ext == ".pgm" || ext == ".ppm") files.push_back(e.path());
        }
        std::sort(files.begin(), files.end(),
                  [](const auto& a, const auto& b) { return a.filename() < b.filename(); });
        if (files.empty()) throw DataError("no .pgm/.ppm images in " + image_dir.string());
        for (const auto& f : files) {
            Sample s;
            s.image = detail::load_and_condition(f, input_size, channels);
            s.source_id = f.filename().string();
            ds.samples.push_back(std::move(s));
        }
        ds.labeled = false;
        return ds;
    }

    auto rows = detail::parse_annotation_csv(*annotations);
    if (rows.empty()) throw DataError(annotations->string() + ": no annotation rows");
    std::map<std::string, detail::CsvRow> by_name;  // ordered -> lexicographic output
    for (auto& row : rows) {
        if (by_name.contains(row.filename))
            throw DataError(annotations->string() + " row " + std::to_string(row.line_no) +
                            ": duplicate filename '" + row.filename + "'");
        by_name.emplace(row.filename, std::move(row));
    }
    for (const auto& [name, row] : by_name) {
        const auto path = image_dir / name;
        if (!std::filesystem::is_regular_file(path))
            throw DataError(annotations->string() + " row " + std::to_string(row.line_no) +
                            ": missing image file '" + name + "'");
        Image original = read_image(path);
        LandmarkSet lm;
        for (int i = 0; i < 6; ++i) {
            const double px = row.px[static_cast<std::size_t>(i)];
            const int extent = (i % 2 == 0) ? original.width : original.height;
            if (!(px >= 0.0 && px <= extent - 1))
                throw DataError(annotations->string() + " row " + std::to_string(row.line_no) +
                                ": landmark coordinate " + std::to_string(px) +
                                " outside image bounds of '" + name + "'");
            lm.coords[static_cast<std::size_t>(i)] = pixel_to_norm(px, extent);
        }
        Sample s;
        if (channels == 1) original = to_grayscale(original);
        else if (original.channels != channels)
            throw DataError(path.string() + ": expected " + std::to_string(channels) +
                            " channels, file has " + std::to_string(original.channels));
        s.image = resize_bilinear(original, input_size, input_size);
        s.landmarks = lm;
        s.source_id = name;
        ds.samples.push_back(std::move(s));
    }
    ds.labeled = true;
    return ds;
}

// ---------------------------------------------------------------------------
// Augmentation. The image transform and the landmark transform are the same
// map; the bound rule rejects draws that push any landmark outside [-1,1] and
// falls back to the untouched sample after `kAugmentRetries` redraws.
// ---------------------------------------------------------------------------

inline constexpr int kAugmentRetries = 10;

// Pure rotation of image and landmarks about the centre, y axis down:
// (x,y) -> (x cos - y sin, x sin + y cos) in normalized coordinates.
inline Sample rotate_sample(const Sample& sample, double angle_deg) {
    Sample out = sample;
    out.image = rotate_about_center(sample.image, angle_deg);
    if (sample.landmarks) {
        const double a = angle_deg * std::numbers::pi / 180.0;
        const double cs = std::cos(a), sn = std::sin(a);
        LandmarkSet lm;
        for (int i = 0; i < 3; ++i) {
            const double x = sample.landmarks->coords[static_cast<std::size_t>(2 * i)];
            const double y = sample.landmarks->coords[static_cast<std::size_t>(2 * i) + 1];
            lm.coords[static_cast<std::size_t>(2 * i)] = cs * x - sn * y;
            lm.coords[static_cast<std::size_t>(2 * i) + 1] = sn * x + cs * y;
        }
        out.landmarks = lm;
    }
    return out;
}

inline Sample translate_sample(const Sample& sample, int dx, int dy) {
    Sample out = sample;
    out.image = translate(sample.image, dx, dy);
    if (sample.landmarks) {
        LandmarkSet lm = *sample.landmarks;
        const double nx = 2.0 * dx / (sample.image.width - 1);
        const double ny = 2.0 * dy / (sample.image.height - 1);
        for (int i = 0; i < 3; ++i) {
            lm.coords[static_cast<std::size_t>(2 * i)] += nx;
            lm.coords[static_cast<std::size_t>(2 * i) + 1] += ny;
        }
        out.landmarks = lm;
    }
    return out;
}

inline void add_noise(Sample& sample, double sigma, Rng& rng) {
    for (double& v : sample.image.px)
        v = std::clamp(v + sigma * rng.normal(), 0.0, 1.0);
}

// Rotation by `angle_deg`; if the rotated landmarks leave [-1,1] the angle is
// redrawn uniformly from [-30,30] up to kAugmentRetries times, then the
// sample passes through unrotated.
inline Sample augment_rotation(const Sample& sample, double angle_deg, Rng& rng) {
    double angle = angle_deg;
    for (int attempt = 0; attempt <= kAugmentRetries; ++attempt) {
        if (attempt > 0) angle = rng.uniform(-30.0, 30.0);
        if (sample.landmarks) {
            Sample out = rotate_sample(sample, angle);
            if (out.landmarks->in_bounds()) return out;
        } else {
            return rotate_sample(sample, angle);
        }
    }
    return sample;
}

inline constexpr int kTranslateMax = 3;
inline constexpr double kNoiseSigma = 0.02;

// Target-domain augmentation: integer translation uniform in [-3,3] on each
// axis (redraw on landmark bound violation, then passthrough), followed by
// additive Gaussian noise sigma such that values stay clamped to [0,1].
inline Sample augment_target(const Sample& sample, Rng& rng) {
    Sample out = sample;
    for (int attempt = 0; attempt <= kAugmentRetries; ++attempt) {
        const int dx = static_cast<int>(rng.uniform_int(-kTranslateMax, kTranslateMax));
        const int dy = static_cast<int>(rng.uniform_int(-kTranslateMax, kTranslateMax));
        Sample cand = translate_sample(sample, dx, dy);
        if (!cand.landmarks || cand.landmarks->in_bounds()) {
            out = std::move(cand);
            break;
        }
        // all retries exhausted -> out stays the untranslated sample
    }
    add_noise(out, kNoiseSigma, rng);
    return out;
}

// ---------------------------------------------------------------------------
// Batching: seeded epoch shuffles, final short batch emitted as-is, optional
// endless cycling (each wrap reshuffles). Deterministic for a given seed.
// ---------------------------------------------------------------------------

class BatchStream {
public:
    BatchStream(std::size_t dataset_size, int batch_size, Rng rng, bool cycle)
        : n_(dataset_size), batch_(batch_size), rng_(rng), cycle_(cycle) {
        if (dataset_size == 0) throw DataError("batches: empty dataset");
        if (batch_size < 1) throw DataError("batches: batch_size must be >= 1");
        reshuffle();
    }

    // Indices of the next batch, or nullopt when a non-cycling stream is done.
    std::optional<std::vector<int>> next() {
        if (pos_ >= n_) {
            if (!cycle_) return std::nullopt;
            reshuffle();
        }
        const std::size_t take = std::min(static_cast<std::size_t>(batch_), n_ - pos_);
        std::vector<int> out(order_.begin() + static_cast<std::ptrdiff_t>(pos_),
                             order_.begin() + static_cast<std::ptrdiff_t>(pos_ + take));
        pos_ += take;
        return out;
    }

    std::size_t batches_per_epoch() const { return (n_ + batch_ - 1) / batch_; }

private:
    void reshuffle() {
        if (order_.empty()) {
            order_.resize(n_);
            for (std::size_t i = 0; i < n_; ++i) order_[i] = static_cast<int>(i);
        }
        for (std::size_t i = n_; i > 1; --i) {
            const auto j = static_cast<std::size_t>(rng_.uniform_int(0, static_cast<std::int64_t>(i) - 1));
            std::swap(order_[i - 1], order_[j]);
        }
        pos_ = 0;
    }

    std::size_t n_;
    int batch_;
    Rng rng_;
    bool cycle_;
    std::vector<int> order_;
    std::size_t pos_ = 0;
};

// Stacks samples into an [N,C,H,W] tensor.
inline Tensor stack_images(std::span<const Sample> batch) {
    if (batch.empty()) throw DataError("stack_images: empty batch");
    const auto& first = batch.front().image;
    Tensor out({static_cast<int>(batch.size()), first.channels, first.height, first.width});
    auto v = out.mutable_values();
    std::size_t off = 0;
    for (const auto& s : batch) {
        if (s.image.width != first.width || s.image.height != first.height ||
            s.image.channels != first.channels)
            throw ShapeError("stack_images: mixed image sizes in batch");
        std::copy(s.image.px.begin(), s.image.px.end(), v.begin() + static_cast<std::ptrdiff_t>(off));
        off += s.image.px.size();
    }
    return out;
}

// Stacks landmark annotations into an [N,6] tensor; every sample must carry
// labels.
inline Tensor stack_landmarks(std::span<const Sample> batch) {
    if (batch.empty()) throw DataError("stack_landmarks: empty batch");
    Tensor out({static_cast<int>(batch.size()), 6});
    auto v = out.mutable_values();
    std::size_t off = 0;
    for (const auto& s : batch) {
        if (!s.landmarks)
            throw DataError("stack_landmarks: unlabeled sample '" + s.source_id +
                            "' in a supervised batch");
        std::copy(s.landmarks->coords.begin(), s.landmarks->coords.end(),
                  v.begin() + static_cast<std::ptrdiff_t>(off));
        off += 6;
    }
    return out;
}

}  // namespace lmdet
