#pragma once

#include <chrono>
#include <cmath>
#include <cstdint>
#include <filesystem>
#include <fstream>
#include <functional>
#include <optional>
#include <span>
#include <sstream>
#include <string>
#include <vector>

#include "lmdet/checkpoint.hpp"
#include "lmdet/data.hpp"
#include "lmdet/errors.hpp"
#include "lmdet/net.hpp"
#include "lmdet/rng.hpp"
#include "lmdet/tensor.hpp"

namespace lmdet {

enum class TrainMode { two_step, supervised_only };

inline TrainMode parse_mode(const std::string& s) {
    if (s == "two_step") return TrainMode::two_step;
    if (s == "supervised_only") return TrainMode::supervised_only;
    throw DataError("mode must be 'two_step' or 'supervised_only', got '" + s + "'");
}

struct TrainConfig {
    TrainMode mode = TrainMode::two_step;
    int epochs = 500;
    int batch_size = 128;
    double learning_rate = 3e-4;
    double momentum = 0.9;
    std::uint64_t seed = 0;
    int target_labeled_count = 0;
    int checkpoint_every = 0;  // epochs between checkpoints; 0 = final only
    bool augment = true;
    ArchitectureSpec arch;

    // paths used by the CLI layer
    std::string source_dir, source_annotations;
    std::string target_dir, target_annotations;
    std::string out_dir;

    void validate() const {
        if (epochs < 1) throw DataError("config: epochs must be >= 1");
        if (batch_size < 1) throw DataError("config: batch_size must be >= 1");
        if (!(learning_rate > 0.0) && learning_rate != 0.0)
            throw DataError("config: learning_rate must be >= 0");
        if (momentum < 0.0 || momentum >= 1.0)
            throw DataError("config: momentum must be in [0,1)");
        if (target_labeled_count < 0)
            throw DataError("config: target_labeled_count must be >= 0");
        arch.validate();
    }
};

// Flat key=value configuration text. Unknown keys are rejected so typos
// surface instead of silently using defaults.
inline void apply_config_entry(TrainConfig& cfg, const std::string& key,
                               const std::string& value) {
    try {
        if (key == "mode") cfg.mode = parse_mode(value);
        else if (key == "epochs") cfg.epochs = std::stoi(value);
        else if (key == "batch_size") cfg.batch_size = std::stoi(value);
        else if (key == "learning_rate") cfg.learning_rate = std::stod(value);
        else if (key == "momentum") cfg.momentum = std::stod(value);
        else if (key == "seed") cfg.seed = std::stoull(value);
        else if (key == "target_labeled_count") cfg.target_labeled_count = std::stoi(value);
        else if (key == "checkpoint_every") cfg.checkpoint_every = std::stoi(value);
        else if (key == "augment") cfg.augment = (value == "1" || value == "true");
        else if (key == "input_channels") cfg.arch.input_channels = std::stoi(value);
        else if (key == "input_size") cfg.arch.input_size = std::stoi(value);
        else if (key == "fc_width") cfg.arch.fc_width = std::stoi(value);
        else if (key == "landmark_count") cfg.arch.landmark_count = std::stoi(value);
        else if (key == "width_scale") cfg.arch.width_scale = WidthScale::parse(value);
        else if (key == "conv_widths") {
            std::istringstream vs(value);
            std::string tok;
            for (int i = 0; i < 5; ++i) {
                if (!std::getline(vs, tok, ','))
                    throw DataError("config: conv_widths needs 5 comma-separated entries");
                cfg.arch.conv_widths[static_cast<std::size_t>(i)] = std::stoi(tok);
            }
        }
        else if (key == "source_dir") cfg.source_dir = value;
        else if (key == "source_annotations") cfg.source_annotations = value;
        else if (key == "target_dir") cfg.target_dir = value;
        else if (key == "target_annotations") cfg.target_annotations = value;
        else if (key == "out_dir") cfg.out_dir = value;
        else throw DataError("config: unknown key '" + key + "'");
    } catch (const DataError&) {
        throw;
    } catch (const std::exception&) {
        throw DataError("config: bad value for '" + key + "': '" + value + "'");
    }
}

inline TrainConfig parse_config_text(const std::string& text) {
    TrainConfig cfg;
    std::istringstream is(text);
    std::string line;
    int line_no = 0;
    while (std::getline(is, line)) {
        ++line_no;
        if (!line.empty() && line.back() == '\r') line.pop_back();
        if (line.empty() || line[0] == '#') continue;
        const auto eq = line.find('=');
        if (eq == std::string::npos)
            throw DataError("config line " + std::to_string(line_no) +
                            ": expected key=value, got '" + line + "'");
        apply_config_entry(cfg, line.substr(0, eq), line.substr(eq + 1));
    }
    return cfg;
}

inline TrainConfig parse_config_file(const std::filesystem::path& path) {
    std::ifstream is(path);
    if (!is) throw IoError("cannot open config: " + path.string());
    std::string text((std::istreambuf_iterator<char>(is)), std::istreambuf_iterator<char>());
    return parse_config_text(text);
}

// "key=value" override, e.g. from a CLI flag.
inline void apply_override(TrainConfig& cfg, const std::string& kv) {
    const auto eq = kv.find('=');
    if (eq == std::string::npos)
        throw DataError("override must be key=value, got '" + kv + "'");
    apply_config_entry(cfg, kv.substr(0, eq), kv.substr(eq + 1));
}

struct StepRecord {
    std::int64_t step;
    int epoch;
    bool reconstruction;
    double loss;
    double wall_ms;
};

struct EpochRecord {
    int epoch;
    double mean_rec = 0.0;
    double mean_reg = 0.0;
    int rec_steps = 0;
    int reg_steps = 0;
};

struct TrainLog {
    std::vector<StepRecord> steps;
    std::vector<EpochRecord> epochs;
};

// One line-delimited record per executed step. Wall time is informational
// and excluded from any reproducibility comparison.
inline std::string format_step_record(const StepRecord& r) {
    std::ostringstream os;
    os << "step=" << r.step << " epoch=" << r.epoch
       << " kind=" << (r.reconstruction ? "rec" : "reg");
    char loss[32];
    std::snprintf(loss, sizeof(loss), "%.17g", r.loss);
    os << " loss=" << loss;
    char ms[32];
    std::snprintf(ms, sizeof(ms), "%.3f", r.wall_ms);
    os << " wall_ms=" << ms;
    return os.str();
}

// Momentum update: slot <- momentum*slot + grad; param <- param - lr*slot.
inline void sgd_update(std::span<double> param, std::span<const double> grad,
                       std::span<double> slot, double lr, double momentum) {
    if (param.size() != slot.size() || (!grad.empty() && grad.size() != param.size()))
        throw ShapeError("sgd_update: size mismatch");
    for (std::size_t i = 0; i < param.size(); ++i) {
        const double g = grad.empty() ? 0.0 : grad[i];
        if (!std::isfinite(g)) throw NumericError("sgd_update: non-finite gradient");
        slot[i] = momentum * slot[i] + g;
        param[i] -= lr * slot[i];
    }
}

namespace detail {

inline bool in_groups(std::string_view name, std::span<const std::string_view> prefixes) {
    for (auto p : prefixes)
        if (name.rfind(p, 0) == 0) return true;
    return false;
}

// Applies the momentum update to every parameter in the named groups (missing
// gradients count as zero), then drops all gradients.
inline void apply_updates(ModelState& model, std::span<const std::string_view> groups,
                          double lr, double momentum) {
    for (auto& [name, param] : model.params) {
        if (!in_groups(name, groups)) continue;
        sgd_update(param.mutable_values(), param.grad(), model.slot(name).mutable_values(),
                   lr, momentum);
    }
    model.clear_grads();
}

}  // namespace detail

// Unsupervised step: push a target batch through decode(encode(.)), take the
// squared reconstruction error, and update only the decoder and encoder.
inline double reconstruction_step(ModelState& model, const Tensor& target_images,
                                  double lr, double momentum) {
    Tape tape;
    Tensor code = encode(model, &tape, target_images);
    Tensor rec = decode(model, &tape, code);
    Tensor loss = mse_loss(&tape, rec, target_images);
    const double value = loss.item();
    tape.backward(loss);
    constexpr std::string_view groups[] = {"enc.", "dec."};
    detail::apply_updates(model, groups, lr, momentum);
    model.step += 1;
    return value;
}

// Supervised step: mean absolute error between predicted and annotated
// landmark vectors; updates only the regressor and encoder.
inline double regression_step(ModelState& model, const Tensor& images,
                              const Tensor& landmarks, double lr, double momentum) {
    Tape tape;
    Tensor code = encode(model, &tape, images);
    Tensor pred = regress(model, &tape, code);
    Tensor loss = mae_loss(&tape, pred, landmarks);
    const double value = loss.item();
    tape.backward(loss);
    constexpr std::string_view groups[] = {"enc.", "reg."};
    detail::apply_updates(model, groups, lr, momentum);
    model.step += 1;
    return value;
}

// Invoked after every executed step; used for logging and by tests that
// fingerprint parameter groups between steps.
struct StepEvent {
    std::int64_t step;
    int epoch;
    bool reconstruction;
    double loss;
    const ModelState& model;
};
using StepObserver = std::function<void(const StepEvent&)>;

namespace detail {

inline std::vector<Sample> gather(const Dataset& ds, std::span<const int> idx) {
    std::vector<Sample> out;
    out.reserve(idx.size());
    for (int i : idx) out.push_back(ds.samples[static_cast<std::size_t>(i)]);
    return out;
}

inline void augment_batch(std::vector<Sample>& batch, bool target_domain, Rng& rng) {
    for (auto& s : batch) {
        s = augment_rotation(s, rng.uniform(-30.0, 30.0), rng);
        if (target_domain) s = augment_target(s, rng);
    }
}

// Supervised batch: the source batch plus, when a labeled target pool is in
// play, ceil(batch_size/8) samples drawn from the pool (without replacement
// while the pool allows, with replacement otherwise).
inline void append_target_labeled(std::vector<Sample>& batch, const Dataset& pool,
                                  int batch_size, Rng& rng) {
    const int want = (batch_size + 7) / 8;
    const auto n = static_cast<std::int64_t>(pool.size());
    if (n >= want) {
        std::vector<int> idx(pool.size());
        for (std::size_t i = 0; i < pool.size(); ++i) idx[i] = static_cast<int>(i);
        for (int i = 0; i < want; ++i) {
            const auto j = rng.uniform_int(i, n - 1);
            std::swap(idx[static_cast<std::size_t>(i)], idx[static_cast<std::size_t>(j)]);
            batch.push_back(pool.samples[static_cast<std::size_t>(idx[static_cast<std::size_t>(i)])]);
        }
    } else {
        for (int i = 0; i < want; ++i)
            batch.push_back(pool.samples[static_cast<std::size_t>(rng.uniform_int(0, n - 1))]);
    }
}

}  // namespace detail

// Interleaved two-step training. Per epoch the longer of the two batch
// streams is traversed once while the shorter cycles; each iteration runs a
// reconstruction step on the target batch and then a regression step on the
// supervised batch. supervised_only runs the regression half alone on
// `source`. Fully deterministic for a given (config, datasets).
inline std::pair<ModelState, TrainLog> train(const TrainConfig& cfg, const Dataset& source,
                                             const Dataset* target,
                                             const Dataset* target_labeled,
                                             const StepObserver& observer = {}) {
    cfg.validate();
    const bool two_step = cfg.mode == TrainMode::two_step;
    if (!source.labeled)
        throw DataError("train: the source dataset must be labeled");
    if (source.size() == 0) throw DataError("train: empty source dataset");
    if (two_step && (target == nullptr || target->size() == 0))
        throw DataError("train: two_step mode requires a target dataset");
    if (cfg.target_labeled_count > 0) {
        if (target_labeled == nullptr || !target_labeled->labeled)
            throw DataError("train: target_labeled_count > 0 needs a labeled target pool");
        if (static_cast<int>(target_labeled->size()) < cfg.target_labeled_count)
            throw DataError("train: target_labeled pool smaller than target_labeled_count");
    }

    ModelState model = init_parameters(cfg.arch, cfg.seed);
    TrainLog log;
    if (!cfg.out_dir.empty()) std::filesystem::create_directories(cfg.out_dir);

    Rng master(cfg.seed);
    Rng rng_shuffle_src = master.derive(1);
    Rng rng_shuffle_tgt = master.derive(2);
    Rng rng_aug_src = master.derive(3);
    Rng rng_aug_tgt = master.derive(4);
    Rng rng_pool = master.derive(5);

    // The labeled pool is the first target_labeled_count samples; callers
    // that want a random subset shuffle before calling.
    Dataset pool;
    if (cfg.target_labeled_count > 0) {
        pool.labeled = true;
        pool.samples.assign(target_labeled->samples.begin(),
                            target_labeled->samples.begin() + cfg.target_labeled_count);
    }

    BatchStream src_stream(source.size(), cfg.batch_size, rng_shuffle_src, /*cycle=*/true);
    std::optional<BatchStream> tgt_stream;
    if (two_step)
        tgt_stream.emplace(target->size(), cfg.batch_size, rng_shuffle_tgt, /*cycle=*/true);

    const std::size_t iters_per_epoch =
        two_step ? std::max(src_stream.batches_per_epoch(), tgt_stream->batches_per_epoch())
                 : src_stream.batches_per_epoch();

    const auto run_step = [&](int epoch, bool reconstruction, auto&& fn) {
        const auto t0 = std::chrono::steady_clock::now();
        double loss;
        try {
            loss = fn();
        } catch (const NumericError& e) {
            throw NumericError("step " + std::to_string(model.step + 1) + " (" +
                               (reconstruction ? "reconstruction" : "regression") +
                               "): " + e.what());
        }
        const double ms =
            std::chrono::duration<double, std::milli>(std::chrono::steady_clock::now() - t0)
                .count();
        log.steps.push_back({model.step, epoch, reconstruction, loss, ms});
        auto& er = log.epochs.back();
        if (reconstruction) {
            er.mean_rec += loss;
            er.rec_steps += 1;
        } else {
            er.mean_reg += loss;
            er.reg_steps += 1;
        }
        if (observer) observer({model.step, epoch, reconstruction, loss, model});
    };

    for (int epoch = 0; epoch < cfg.epochs; ++epoch) {
        log.epochs.push_back({epoch});
        for (std::size_t it = 0; it < iters_per_epoch; ++it) {
            if (two_step) {
                auto tidx = tgt_stream->next();
                auto tb = detail::gather(*target, *tidx);
                if (cfg.augment) detail::augment_batch(tb, /*target_domain=*/true, rng_aug_tgt);
                const Tensor timg = stack_images(tb);
                run_step(epoch, true, [&] {
                    return reconstruction_step(model, timg, cfg.learning_rate, cfg.momentum);
                });
            }
            auto sidx = src_stream.next();
            auto sb = detail::gather(source, *sidx);
            if (cfg.augment) detail::augment_batch(sb, /*target_domain=*/false, rng_aug_src);
            if (cfg.target_labeled_count > 0) {
                std::vector<Sample> extra;
                detail::append_target_labeled(extra, pool, cfg.batch_size, rng_pool);
                if (cfg.augment)
                    for (auto& s : extra)
                        s = augment_rotation(s, rng_aug_src.uniform(-30.0, 30.0), rng_aug_src);
                for (auto& s : extra) sb.push_back(std::move(s));
            }
            const Tensor simg = stack_images(sb);
            const Tensor slab = stack_landmarks(sb);
            run_step(epoch, false, [&] {
                return regression_step(model, simg, slab, cfg.learning_rate, cfg.momentum);
            });
        }
        auto& er = log.epochs.back();
        if (er.rec_steps > 0) er.mean_rec /= er.rec_steps;
        if (er.reg_steps > 0) er.mean_reg /= er.reg_steps;

        if (!cfg.out_dir.empty() && cfg.checkpoint_every > 0 &&
            (epoch + 1) % cfg.checkpoint_every == 0 && epoch + 1 < cfg.epochs) {
            save_checkpoint(model, std::filesystem::path(cfg.out_dir) /
                                       ("checkpoint_epoch_" + std::to_string(epoch + 1) + ".lmck"));
        }
    }

    if (!cfg.out_dir.empty())
        save_checkpoint(model, std::filesystem::path(cfg.out_dir) / "model.lmck");
    return {std::move(model), std::move(log)};
}

}  // namespace lmdet
