// Command-line front end: dataset synthesis, training, evaluation, label
// sweeps, single-image prediction and the gradient self-check.
//
// Exit codes: 0 success, 1 usage, 2 data error, 3 numeric failure.

#include <cstdio>
#include <filesystem>
#include <fstream>
#include <iostream>
#include <optional>
#include <string>
#include <vector>

#include <CLI11.hpp>

#include "lmdet/checkpoint.hpp"
#include "lmdet/data.hpp"
#include "lmdet/eval.hpp"
#include "lmdet/gradcheck.hpp"
#include "lmdet/net.hpp"
#include "lmdet/synth.hpp"
#include "lmdet/train.hpp"

namespace {

using namespace lmdet;

Dataset shuffled_copy(const Dataset& ds, Rng rng) {
    Dataset out = ds;
    for (std::size_t i = out.samples.size(); i > 1; --i) {
        const auto j = static_cast<std::size_t>(rng.uniform_int(0, static_cast<std::int64_t>(i) - 1));
        std::swap(out.samples[i - 1], out.samples[j]);
    }
    return out;
}

int cmd_synth(const std::string& domain, int count, std::uint64_t seed, int size,
              const std::string& out_dir) {
    Dataset ds = generate_synthetic(parse_domain(domain), count, seed, size);
    write_dataset(ds, out_dir);
    std::printf("wrote %zu %s images + annotations.csv to %s\n", ds.size(), domain.c_str(),
                out_dir.c_str());
    return 0;
}

int cmd_train(const std::string& config_path, const std::vector<std::string>& overrides) {
    TrainConfig cfg = parse_config_file(config_path);
    for (const auto& kv : overrides) apply_override(cfg, kv);
    cfg.validate();
    if (cfg.out_dir.empty()) throw DataError("config: out_dir is required for training");
    if (cfg.source_dir.empty() || cfg.source_annotations.empty())
        throw DataError("config: source_dir and source_annotations are required");

    Dataset source = load_dataset(cfg.source_dir, std::filesystem::path(cfg.source_annotations),
                                  cfg.arch.input_size, cfg.arch.input_channels);
    std::optional<Dataset> target;
    if (cfg.mode == TrainMode::two_step) {
        if (cfg.target_dir.empty()) throw DataError("config: two_step mode needs target_dir");
        std::optional<std::filesystem::path> ann;
        if (!cfg.target_annotations.empty()) ann = cfg.target_annotations;
        target = load_dataset(cfg.target_dir, ann, cfg.arch.input_size, cfg.arch.input_channels);
    }
    std::optional<Dataset> pool;
    if (cfg.target_labeled_count > 0) {
        if (!target || !target->labeled)
            throw DataError("config: target_labeled_count > 0 needs target_annotations");
        pool = shuffled_copy(*target, Rng(cfg.seed).derive(50));
    }

    std::filesystem::create_directories(cfg.out_dir);
    std::ofstream log_stream(std::filesystem::path(cfg.out_dir) / "train.log");
    if (!log_stream) throw IoError("cannot open train.log under " + cfg.out_dir);
    const StepObserver observer = [&](const StepEvent& ev) {
        log_stream << format_step_record({ev.step, ev.epoch, ev.reconstruction, ev.loss, 0.0})
                   << "\n";
        log_stream.flush();
    };

    auto [model, log] = train(cfg, source, target ? &*target : nullptr,
                              pool ? &*pool : nullptr, observer);
    const auto& last = log.epochs.back();
    std::printf("trained %d epochs (%zu steps); final epoch mean losses: rec=%g reg=%g\n",
                cfg.epochs, log.steps.size(), last.mean_rec, last.mean_reg);
    std::printf("checkpoint: %s\n",
                (std::filesystem::path(cfg.out_dir) / "model.lmck").string().c_str());
    return 0;
}

int cmd_eval(const std::string& model_path, const std::string& data_dir,
             const std::string& annotations, const std::string& report_path,
             const std::string& csv_path) {
    ModelState model = load_checkpoint(model_path);
    Dataset ds = load_dataset(data_dir, std::filesystem::path(annotations),
                              model.spec.input_size, model.spec.input_channels);
    EvalReport report = evaluate(model, ds, data_dir);
    write_report_json(report, report_path);
    if (!csv_path.empty()) write_roc_csv(report, csv_path);
    std::printf("samples=%d precision@%g: left_eye=%.4f right_eye=%.4f nose=%.4f "
                "aggregate=%.4f auc=%.2f\n",
                report.sample_count, report.radius_px, report.per_landmark_precision[0],
                report.per_landmark_precision[1], report.per_landmark_precision[2],
                report.aggregate_precision, report.auc);
    return 0;
}

int cmd_sweep(const std::string& config_path, const std::vector<std::string>& overrides,
              const std::string& counts_arg, const std::string& report_path) {
    TrainConfig cfg = parse_config_file(config_path);
    for (const auto& kv : overrides) apply_override(cfg, kv);
    cfg.validate();
    if (cfg.source_dir.empty() || cfg.source_annotations.empty() || cfg.target_dir.empty() ||
        cfg.target_annotations.empty())
        throw DataError("config: sweep needs source and target dirs with annotations");

    std::vector<int> counts;
    {
        std::istringstream is(counts_arg);
        std::string tok;
        while (std::getline(is, tok, ','))
            counts.push_back(std::stoi(tok));
    }
    Dataset source = load_dataset(cfg.source_dir, std::filesystem::path(cfg.source_annotations),
                                  cfg.arch.input_size, cfg.arch.input_channels);
    Dataset target = load_dataset(cfg.target_dir, std::filesystem::path(cfg.target_annotations),
                                  cfg.arch.input_size, cfg.arch.input_channels);
    SweepResult result = label_sweep(cfg, source, target, counts);
    std::ofstream os(report_path);
    if (!os) throw IoError("cannot write sweep report: " + report_path);
    os << sweep_to_json(result).dump(2) << "\n";
    for (const auto& [count, report] : result.entries)
        std::printf("target_labeled_count=%d precision=%.4f auc=%.2f\n", count,
                    report.aggregate_precision, report.auc);
    return 0;
}

int cmd_predict(const std::string& model_path, const std::string& image_path) {
    ModelState model = load_checkpoint(model_path);
    Image original = read_image(image_path);
    Sample s;
    s.image = original;
    if (model.spec.input_channels == 1) s.image = to_grayscale(s.image);
    s.image = resize_bilinear(s.image, model.spec.input_size, model.spec.input_size);
    s.source_id = image_path;
    const LandmarkSet pred = predict_landmarks(model, s);
    // six numbers: pixel coordinates in the original image resolution
    for (int i = 0; i < 6; ++i) {
        const int extent = (i % 2 == 0) ? original.width : original.height;
        std::printf("%s%.4f", i ? " " : "", norm_to_pixel(pred.coords[static_cast<std::size_t>(i)], extent));
    }
    std::printf("\n");
    return 0;
}

int cmd_gradcheck(std::uint64_t seed) {
    GradCheckReport report = run_gradcheck(seed);
    for (const auto& e : report.entries)
        std::printf("op=%-12s input=%-8s max_rel_error=%.3e\n", e.op.c_str(), e.input.c_str(),
                    e.max_rel_error);
    std::printf("worst=%.3e tolerance=%.0e -> %s\n", report.worst(), report.tolerance,
                report.pass() ? "PASS" : "FAIL");
    if (!report.pass()) throw NumericError("gradient check exceeded tolerance");
    return 0;
}

}  // namespace

int main(int argc, char** argv) {
    CLI::App app{"two-step landmark detector: training, evaluation and data tools"};
    app.require_subcommand(1);

    auto* synth = app.add_subcommand("synth", "generate a synthetic dataset directory");
    std::string synth_domain, synth_out;
    int synth_count = 100, synth_size = 32;
    std::uint64_t synth_seed = 0;
    synth->add_option("--domain", synth_domain, "source|target")->required();
    synth->add_option("--count", synth_count, "number of images")->required();
    synth->add_option("--seed", synth_seed, "generator seed");
    synth->add_option("--size", synth_size, "image size (multiple of 4)");
    synth->add_option("--out", synth_out, "output directory")->required();

    auto* train_cmd = app.add_subcommand("train", "train a model from a config file");
    std::string train_config;
    std::vector<std::string> train_overrides;
    train_cmd->add_option("--config", train_config, "key=value config file")->required();
    train_cmd->add_option("--override", train_overrides, "key=value override (repeatable)");

    auto* eval_cmd = app.add_subcommand("eval", "evaluate a checkpoint on a labeled dataset");
    std::string eval_model, eval_data, eval_ann, eval_report, eval_csv;
    eval_cmd->add_option("--model", eval_model, "checkpoint file")->required();
    eval_cmd->add_option("--data", eval_data, "image directory")->required();
    eval_cmd->add_option("--annotations", eval_ann, "annotation CSV")->required();
    eval_cmd->add_option("--report", eval_report, "output report JSON")->required();
    eval_cmd->add_option("--csv", eval_csv, "optional ROC curve CSV");

    auto* sweep_cmd = app.add_subcommand("sweep", "label-count sweep with fresh training per count");
    std::string sweep_config, sweep_counts = "0,10,50,100", sweep_report;
    std::vector<std::string> sweep_overrides;
    sweep_cmd->add_option("--config", sweep_config, "key=value config file")->required();
    sweep_cmd->add_option("--counts", sweep_counts, "comma-separated label counts");
    sweep_cmd->add_option("--report", sweep_report, "output report JSON")->required();
    sweep_cmd->add_option("--override", sweep_overrides, "key=value override (repeatable)");

    auto* predict_cmd = app.add_subcommand("predict", "predict landmarks for one image");
    std::string predict_model, predict_image;
    predict_cmd->add_option("--model", predict_model, "checkpoint file")->required();
    predict_cmd->add_option("--image", predict_image, "PGM/PPM image")->required();

    auto* gc_cmd = app.add_subcommand("gradcheck", "finite-difference check of every op");
    std::uint64_t gc_seed = 0;
    gc_cmd->add_option("--seed", gc_seed, "input seed");

    try {
        app.parse(argc, argv);
    } catch (const CLI::ParseError& e) {
        const int rc = app.exit(e);
        return rc == 0 ? 0 : 1;
    }

    try {
        if (synth->parsed())
            return cmd_synth(synth_domain, synth_count, synth_seed, synth_size, synth_out);
        if (train_cmd->parsed()) return cmd_train(train_config, train_overrides);
        if (eval_cmd->parsed())
            return cmd_eval(eval_model, eval_data, eval_ann, eval_report, eval_csv);
        if (sweep_cmd->parsed())
            return cmd_sweep(sweep_config, sweep_overrides, sweep_counts, sweep_report);
        if (predict_cmd->parsed()) return cmd_predict(predict_model, predict_image);
        if (gc_cmd->parsed()) return cmd_gradcheck(gc_seed);
    } catch (const NumericError& e) {
        std::fprintf(stderr, "error(numeric): %s\n", e.what());
        return 3;
    } catch (const DataError& e) {
        std::fprintf(stderr, "error(data): %s\n", e.what());
        return 2;
    } catch (const IoError& e) {
        std::fprintf(stderr, "error(io): %s\n", e.what());
        return 2;
    } catch (const ShapeError& e) {
        std::fprintf(stderr, "error(shape): %s\n", e.what());
        return 2;
    } catch (const std::exception& e) {
        std::fprintf(stderr, "error: %s\n", e.what());
        return 3;
    }
    return 0;
}
