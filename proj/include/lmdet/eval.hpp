#pragma once

#include <array>
#include <cmath>
#include <cstdint>
#include <filesystem>
#include <fstream>
#include <functional>
#include <span>
#include <string>
#include <vector>

#include <json.hpp>

#include "lmdet/data.hpp"
#include "lmdet/errors.hpp"
#include "lmdet/net.hpp"
#include "lmdet/train.hpp"

namespace lmdet {

inline constexpr std::array<const char*, 3> kLandmarkNames = {"left_eye", "right_eye", "nose"};

// Precision as a function of the acceptance radius, plus the operating point
// at the default radius (10% of the image size). AUC is the normalized
// trapezoidal area under the curve, scaled to [0,100].
struct EvalReport {
    std::string dataset_tag;
    int sample_count = 0;
    double radius_px = 0.0;
    std::array<double, 3> per_landmark_precision{};
    std::array<int, 3> per_landmark_correct{};
    double aggregate_precision = 0.0;
    std::vector<std::pair<double, double>> roc;  // (threshold_px, precision)
    double auc = 0.0;
};

// Euclidean distances in pixel units between predicted and true landmarks.
// Normalized offsets scale by (W-1)/2 per axis.
inline std::array<double, 3> landmark_error(const LandmarkSet& pred, const LandmarkSet& truth,
                                            int image_size) {
    const double s = (image_size - 1) / 2.0;
    std::array<double, 3> out{};
    for (int i = 0; i < 3; ++i) {
        const double dx = (pred.coords[static_cast<std::size_t>(2 * i)] -
                           truth.coords[static_cast<std::size_t>(2 * i)]) * s;
        const double dy = (pred.coords[static_cast<std::size_t>(2 * i) + 1] -
                           truth.coords[static_cast<std::size_t>(2 * i) + 1]) * s;
        out[static_cast<std::size_t>(i)] = std::hypot(dx, dy);
    }
    return out;
}

// Detections with distance <= radius count as correct (inclusive).
inline double precision_at_radius(std::span<const double> errors, double radius_px) {
    if (errors.empty()) throw DataError("precision_at_radius: no distances");
    if (radius_px < 0.0) throw DataError("precision_at_radius: radius must be >= 0");
    std::size_t ok = 0;
    for (double e : errors)
        if (e <= radius_px) ++ok;
    return static_cast<double>(ok) / static_cast<double>(errors.size());
}

inline double default_radius(int image_size) {
    return std::floor(0.10 * image_size);
}

// Thresholds t_j = j/64 * image_size for j = 0..32 (half-pixel steps up to
// half the image size at 32x32). AUC = 100 * integral of precision over the
// threshold range, trapezoid rule, divided by the range.
inline std::pair<std::vector<std::pair<double, double>>, double> roc_auc(
    std::span<const double> errors, int image_size) {
    if (errors.empty()) throw DataError("roc_auc: no distances");
    std::vector<std::pair<double, double>> curve;
    curve.reserve(33);
    for (int j = 0; j <= 32; ++j) {
        const double t = static_cast<double>(j) / 64.0 * image_size;
        curve.emplace_back(t, precision_at_radius(errors, t));
    }
    double area = 0.0;
    for (std::size_t i = 1; i < curve.size(); ++i)
        area += 0.5 * (curve[i].second + curve[i - 1].second) *
                (curve[i].first - curve[i - 1].first);
    const double range = curve.back().first - curve.front().first;
    return {std::move(curve), 100.0 * area / range};
}

// Prediction callback: normalized landmark coordinates for one sample.
using Predictor = std::function<LandmarkSet(const Sample&)>;

// Runs a predictor over a labeled dataset (no augmentation) and assembles the
// report. Aggregate precision comes from the pooled integer counts, so the
// count-weighted mean of the per-landmark precisions reproduces it exactly.
inline EvalReport evaluate(const Predictor& predict, const Dataset& dataset, int image_size,
                           const std::string& tag = {}) {
    if (!dataset.labeled || dataset.size() == 0)
        throw DataError("evaluate: needs a non-empty labeled dataset");
    EvalReport report;
    report.dataset_tag = tag;
    report.sample_count = static_cast<int>(dataset.size());
    report.radius_px = default_radius(image_size);

    std::array<std::vector<double>, 3> per_landmark;
    std::vector<double> pooled;
    pooled.reserve(dataset.size() * 3);
    for (const auto& s : dataset.samples) {
        const LandmarkSet pred = predict(s);
        const auto err = landmark_error(pred, *s.landmarks, image_size);
        for (int i = 0; i < 3; ++i) {
            per_landmark[static_cast<std::size_t>(i)].push_back(err[static_cast<std::size_t>(i)]);
            pooled.push_back(err[static_cast<std::size_t>(i)]);
        }
    }
    int total_correct = 0;
    for (int i = 0; i < 3; ++i) {
        int correct = 0;
        for (double e : per_landmark[static_cast<std::size_t>(i)])
            if (e <= report.radius_px) ++correct;
        report.per_landmark_correct[static_cast<std::size_t>(i)] = correct;
        report.per_landmark_precision[static_cast<std::size_t>(i)] =
            static_cast<double>(correct) / static_cast<double>(dataset.size());
        total_correct += correct;
    }
    report.aggregate_precision =
        static_cast<double>(total_correct) / static_cast<double>(3 * dataset.size());
    auto [curve, auc] = roc_auc(pooled, image_size);
    report.roc = std::move(curve);
    report.auc = auc;
    return report;
}

// Normalized landmark prediction for a batch of conditioned images.
inline std::vector<LandmarkSet> predict_batch(const ModelState& model,
                                              std::span<const Sample> batch) {
    const Tensor images = stack_images(batch);
    const Tensor code = encode(model, nullptr, images);
    const Tensor out = regress(model, nullptr, code);
    std::vector<LandmarkSet> preds(batch.size());
    auto v = out.values();
    for (std::size_t n = 0; n < batch.size(); ++n)
        for (int i = 0; i < 6; ++i)
            preds[n].coords[static_cast<std::size_t>(i)] = v[n * 6 + static_cast<std::size_t>(i)];
    return preds;
}

inline LandmarkSet predict_landmarks(const ModelState& model, const Sample& sample) {
    return predict_batch(model, std::span<const Sample>(&sample, 1))[0];
}

// Model evaluation; forward passes run in fixed-size batches purely for
// speed, which cannot change any predicted value.
inline EvalReport evaluate(const ModelState& model, const Dataset& dataset,
                           const std::string& tag = {}) {
    if (!dataset.labeled || dataset.size() == 0)
        throw DataError("evaluate: needs a non-empty labeled dataset");
    constexpr std::size_t kBatch = 64;
    std::vector<LandmarkSet> preds;
    preds.reserve(dataset.size());
    for (std::size_t off = 0; off < dataset.size(); off += kBatch) {
        const std::size_t take = std::min(kBatch, dataset.size() - off);
        auto chunk = predict_batch(
            model, std::span<const Sample>(dataset.samples.data() + off, take));
        preds.insert(preds.end(), chunk.begin(), chunk.end());
    }
    std::size_t next = 0;
    return evaluate([&](const Sample&) { return preds[next++]; }, dataset,
                    model.spec.input_size, tag);
}

// --------------------------- report serialization --------------------------

inline nlohmann::json report_to_json(const EvalReport& r) {
    nlohmann::json j;
    j["dataset"] = r.dataset_tag;
    j["samples"] = r.sample_count;
    j["radius_px"] = r.radius_px;
    for (int i = 0; i < 3; ++i) {
        auto& lj = j["per_landmark"][kLandmarkNames[static_cast<std::size_t>(i)]];
        lj["precision"] = r.per_landmark_precision[static_cast<std::size_t>(i)];
        lj["correct"] = r.per_landmark_correct[static_cast<std::size_t>(i)];
        lj["total"] = r.sample_count;
    }
    j["aggregate_precision"] = r.aggregate_precision;
    j["auc"] = r.auc;
    auto& rj = j["roc"] = nlohmann::json::array();
    for (const auto& [t, p] : r.roc) rj.push_back({{"threshold_px", t}, {"precision", p}});
    return j;
}

inline EvalReport report_from_json(const nlohmann::json& j) {
    EvalReport r;
    r.dataset_tag = j.at("dataset").get<std::string>();
    r.sample_count = j.at("samples").get<int>();
    r.radius_px = j.at("radius_px").get<double>();
    for (int i = 0; i < 3; ++i) {
        const auto& lj = j.at("per_landmark").at(kLandmarkNames[static_cast<std::size_t>(i)]);
        r.per_landmark_precision[static_cast<std::size_t>(i)] = lj.at("precision").get<double>();
        r.per_landmark_correct[static_cast<std::size_t>(i)] = lj.at("correct").get<int>();
    }
    r.aggregate_precision = j.at("aggregate_precision").get<double>();
    r.auc = j.at("auc").get<double>();
    for (const auto& e : j.at("roc"))
        r.roc.emplace_back(e.at("threshold_px").get<double>(), e.at("precision").get<double>());
    return r;
}

inline void write_report_json(const EvalReport& r, const std::filesystem::path& path) {
    std::ofstream os(path);
    if (!os) throw IoError("cannot write report: " + path.string());
    os << report_to_json(r).dump(2) << "\n";
    if (!os) throw IoError("short write on report: " + path.string());
}

inline void write_roc_csv(const EvalReport& r, const std::filesystem::path& path) {
    std::ofstream os(path);
    if (!os) throw IoError("cannot write ROC csv: " + path.string());
    os << "threshold_px,precision\n";
    for (const auto& [t, p] : r.roc) {
        char buf[80];
        std::snprintf(buf, sizeof(buf), "%.17g,%.17g\n", t, p);
        os << buf;
    }
    if (!os) throw IoError("short write on ROC csv: " + path.string());
}

// ------------------------------- label sweep -------------------------------

struct SweepResult {
    std::vector<std::pair<int, EvalReport>> entries;  // (target_labeled_count, report)
};

inline nlohmann::json sweep_to_json(const SweepResult& s) {
    nlohmann::json j;
    auto& arr = j["sweep"] = nlohmann::json::array();
    for (const auto& [count, report] : s.entries)
        arr.push_back({{"target_labeled_count", count}, {"report", report_to_json(report)}});
    return j;
}

// Seed-deterministic 80/20 split of a labeled dataset: indices are shuffled
// by a stream derived from `seed`, the first 80% train, the rest test.
inline std::pair<Dataset, Dataset> split_dataset(const Dataset& ds, std::uint64_t seed) {
    if (ds.size() < 2) throw DataError("split_dataset: need at least 2 samples");
    std::vector<std::size_t> idx(ds.size());
    for (std::size_t i = 0; i < idx.size(); ++i) idx[i] = i;
    Rng rng = Rng(seed).derive(100);
    for (std::size_t i = idx.size(); i > 1; --i) {
        const auto j = static_cast<std::size_t>(rng.uniform_int(0, static_cast<std::int64_t>(i) - 1));
        std::swap(idx[i - 1], idx[j]);
    }
    const std::size_t train_n = std::max<std::size_t>(1, ds.size() * 8 / 10);
    Dataset train, test;
    train.labeled = test.labeled = ds.labeled;
    for (std::size_t i = 0; i < idx.size(); ++i)
        (i < train_n ? train : test).samples.push_back(ds.samples[idx[i]]);
    return {std::move(train), std::move(test)};
}

// Trains one two_step model per labeled-target budget (fresh derived seed
// each) and evaluates every model on the same held-out 20% target test split.
inline SweepResult label_sweep(const TrainConfig& base, const Dataset& source,
                               const Dataset& target, std::vector<int> counts,
                               const StepObserver& observer = {}) {
    if (!target.labeled) throw DataError("sweep: target dataset must be labeled");
    if (counts.empty()) throw DataError("sweep: no counts given");
    for (std::size_t i = 1; i < counts.size(); ++i)
        if (counts[i] <= counts[i - 1])
            throw DataError("sweep: counts must be strictly increasing");

    auto [train_part, test_part] = split_dataset(target, base.seed);
    const int max_count = counts.back();
    if (static_cast<int>(train_part.size()) < max_count)
        throw DataError("sweep: labeled target pool (" + std::to_string(train_part.size()) +
                        " after split) smaller than largest count " + std::to_string(max_count));

    SweepResult result;
    for (std::size_t i = 0; i < counts.size(); ++i) {
        TrainConfig cfg = base;
        cfg.mode = TrainMode::two_step;
        cfg.target_labeled_count = counts[i];
        cfg.seed = Rng(base.seed).derive(1000 + static_cast<std::uint64_t>(counts[i])).seed();
        cfg.out_dir.clear();
        auto [model, log] = train(cfg, source, &train_part,
                                  counts[i] > 0 ? &train_part : nullptr, observer);
        EvalReport report = evaluate(model, test_part,
                                     "target_labeled_count=" + std::to_string(counts[i]));
        result.entries.emplace_back(counts[i], std::move(report));
    }
    return result;
}

}  // namespace lmdet
