#include <catch2/catch_amalgamated.hpp>

#include <cmath>
#include <filesystem>

#include "lmdet/checkpoint.hpp"
#include "lmdet/synth.hpp"
#include "lmdet/train.hpp"

using namespace lmdet;

namespace {

// widths [6,5,4,3,2], fc 10: big enough to exercise every layer, small
// enough to run hundreds of steps in unit tests
TrainConfig tiny_config() {
    TrainConfig cfg;
    cfg.arch.width_scale = WidthScale::parse("1/50");
    cfg.batch_size = 4;
    cfg.epochs = 1;
    cfg.seed = 5;
    cfg.augment = false;
    return cfg;
}

Tensor random_images(int n, std::uint64_t seed) {
    Tensor t({n, 1, 32, 32});
    Rng rng(seed);
    for (auto& v : t.mutable_values()) v = rng.uniform(0, 1);
    return t;
}

}  // namespace

TEST_CASE("sgd_update") {
    SECTION("plain step") {
        std::vector<double> p = {1.0}, g = {2.0}, s = {0.0};
        sgd_update(p, g, s, 0.1, 0.0);
        REQUIRE(p[0] == Catch::Approx(0.8));
        REQUIRE(s[0] == 2.0);
    }
    SECTION("momentum decays geometrically on zero gradients") {
        std::vector<double> p = {0.0}, g = {0.0}, s = {1.0};
        double prev_delta = 1.0;
        for (int i = 0; i < 5; ++i) {
            const double before = p[0];
            sgd_update(p, g, s, 1.0, 0.9);
            const double delta = before - p[0];
            if (i > 0) REQUIRE(delta == Catch::Approx(0.9 * prev_delta));
            prev_delta = delta;
        }
    }
    SECTION("quadratic descent: loss p^2/2, lr 0.5 halves p each step") {
        Tensor p({1}, {1.0}, true);
        std::vector<double> slot = {0.0};
        std::vector<double> seen = {p.values()[0]};
        for (int i = 0; i < 2; ++i) {
            Tape tape;
            Tensor loss = scale(&tape, mse_loss(&tape, p, Tensor({1})), 0.5);
            tape.backward(loss);
            sgd_update(p.mutable_values(), p.grad(), slot, 0.5, 0.0);
            p.clear_grad();
            seen.push_back(p.values()[0]);
        }
        REQUIRE(seen[0] == 1.0);
        REQUIRE(seen[1] == Catch::Approx(0.5));
        REQUIRE(seen[2] == Catch::Approx(0.25));
    }
    SECTION("non-finite gradient rejected") {
        std::vector<double> p = {1.0}, g = {std::nan("")}, s = {0.0};
        REQUIRE_THROWS_AS(sgd_update(p, g, s, 0.1, 0.0), NumericError);
    }
}

TEST_CASE("reconstruction step") {
    TrainConfig cfg = tiny_config();
    ModelState model = init_parameters(cfg.arch, 3);
    Tensor batch = random_images(4, 9);

    SECTION("loss is non-negative and regressor params never move") {
        const auto reg_before = params_fingerprint(model, "reg.");
        for (int i = 0; i < 100; ++i) {
            const double loss = reconstruction_step(model, batch, 3e-4, 0.9);
            REQUIRE(loss >= 0.0);
        }
        REQUIRE(params_fingerprint(model, "reg.") == reg_before);
        REQUIRE(model.step == 100);
    }
    SECTION("lr=0 computes the loss but freezes all parameters") {
        const auto before = params_fingerprint(model);
        const double loss = reconstruction_step(model, batch, 0.0, 0.9);
        REQUIRE(loss > 0.0);
        REQUIRE(params_fingerprint(model) == before);
    }
}

TEST_CASE("regression step") {
    TrainConfig cfg = tiny_config();
    ModelState model = init_parameters(cfg.arch, 3);
    Dataset src = generate_synthetic(Domain::source, 4, 2);
    std::vector<Sample> batch(src.samples.begin(), src.samples.end());
    const Tensor images = stack_images(batch);
    const Tensor labels = stack_landmarks(batch);

    SECTION("decoder params never move") {
        const auto dec_before = params_fingerprint(model, "dec.");
        for (int i = 0; i < 100; ++i) {
            const double loss = regression_step(model, images, labels, 3e-4, 0.9);
            REQUIRE(loss >= 0.0);
        }
        REQUIRE(params_fingerprint(model, "dec.") == dec_before);
    }
    SECTION("all-zero model predicting all-zero labels has zero loss") {
        for (auto& [name, t] : model.params) {
            auto v = t.mutable_values();
            std::fill(v.begin(), v.end(), 0.0);
        }
        Tensor zero_labels({4, 6});
        const double loss = regression_step(model, images, zero_labels, 3e-4, 0.9);
        REQUIRE(loss == 0.0);
    }
    SECTION("hand case: one coordinate off by 0.6 over k=6 gives 0.1") {
        Tensor pred({1, 6}, {0.6, 0, 0, 0, 0, 0});
        Tensor truth({1, 6});
        const double loss = mae_loss(nullptr, pred, truth).item();
        REQUIRE(loss == 0.6 / 6.0);          // bitwise: same expression
        REQUIRE(loss == Catch::Approx(0.1).margin(1e-15));
    }
}

TEST_CASE("train loop") {
    Dataset source = generate_synthetic(Domain::source, 8, 21);
    Dataset target = generate_synthetic(Domain::target, 8, 22);

    SECTION("one epoch, equal stream lengths: one step of each kind") {
        TrainConfig cfg = tiny_config();
        cfg.batch_size = 8;
        auto [model, log] = train(cfg, source, &target, nullptr);
        REQUIRE(log.steps.size() == 2);
        REQUIRE(log.steps[0].reconstruction);       // reconstruction first
        REQUIRE_FALSE(log.steps[1].reconstruction); // then regression
        REQUIRE(model.step == 2);
    }
    SECTION("unequal streams: longer stream sets the epoch length") {
        Dataset small = generate_synthetic(Domain::target, 2, 23);
        TrainConfig cfg = tiny_config();
        cfg.batch_size = 2;
        auto [model, log] = train(cfg, source, &small, nullptr);
        // source: 4 batches, target: 1 batch -> 4 iterations, cycling target
        int rec = 0, reg = 0;
        for (const auto& s : log.steps) (s.reconstruction ? rec : reg) += 1;
        REQUIRE(rec == 4);
        REQUIRE(reg == 4);
    }
    SECTION("supervised_only runs regression steps only") {
        TrainConfig cfg = tiny_config();
        cfg.mode = TrainMode::supervised_only;
        cfg.epochs = 3;
        auto [model, log] = train(cfg, source, nullptr, nullptr);
        for (const auto& s : log.steps) REQUIRE_FALSE(s.reconstruction);
        REQUIRE(log.steps.size() == 6);  // 2 batches x 3 epochs
    }
    SECTION("two_step without a target dataset is an error") {
        TrainConfig cfg = tiny_config();
        REQUIRE_THROWS_AS(train(cfg, source, nullptr, nullptr), DataError);
        Dataset unlabeled = target;
        unlabeled.labeled = false;
        for (auto& s : unlabeled.samples) s.landmarks.reset();
        REQUIRE_THROWS_AS(train(cfg, unlabeled, &target, nullptr), DataError);
    }
    SECTION("labeled-target mixing adds ceil(B/8) samples per supervised batch") {
        std::vector<Sample> batch;
        Dataset pool = generate_synthetic(Domain::target, 5, 31);
        Rng rng(3);
        lmdet::detail::append_target_labeled(batch, pool, 8, rng);
        REQUIRE(batch.size() == 1);
        batch.clear();
        lmdet::detail::append_target_labeled(batch, pool, 128, rng);
        REQUIRE(batch.size() == 16);  // pool of 5 -> draws with replacement
        for (const auto& s : batch) REQUIRE(s.landmarks.has_value());
    }
    SECTION("pool smaller than target_labeled_count is an error") {
        TrainConfig cfg = tiny_config();
        cfg.target_labeled_count = 50;
        REQUIRE_THROWS_AS(train(cfg, source, &target, &target), DataError);
    }
    SECTION("two_step with labeled-target mixing runs and logs") {
        TrainConfig cfg = tiny_config();
        cfg.target_labeled_count = 4;
        cfg.epochs = 2;
        cfg.augment = true;  // exercise the augmentation path too
        auto [model, log] = train(cfg, source, &target, &target);
        REQUIRE(log.steps.size() == 8);
    }
}

TEST_CASE("training determinism and freezing") {
    Dataset source = generate_synthetic(Domain::source, 8, 41);
    Dataset target = generate_synthetic(Domain::target, 8, 42);

    SECTION("same config and seed reproduce checkpoints bit for bit") {
        TrainConfig cfg = tiny_config();
        cfg.epochs = 3;
        cfg.augment = true;
        auto [m1, l1] = train(cfg, source, &target, nullptr);
        auto [m2, l2] = train(cfg, source, &target, nullptr);
        REQUIRE(serialize_checkpoint(m1) == serialize_checkpoint(m2));
        REQUIRE(l1.steps.size() == l2.steps.size());
        for (std::size_t i = 0; i < l1.steps.size(); ++i)
            REQUIRE(l1.steps[i].loss == l2.steps[i].loss);
    }
    SECTION("lr=0 freezes every parameter across both step kinds") {
        TrainConfig cfg = tiny_config();
        cfg.learning_rate = 0.0;
        cfg.epochs = 2;
        const ModelState reference = init_parameters(cfg.arch, cfg.seed);
        auto [model, log] = train(cfg, source, &target, nullptr);
        REQUIRE(params_fingerprint(model) == params_fingerprint(reference));
    }
    SECTION("parameter isolation holds at every step") {
        TrainConfig cfg = tiny_config();
        cfg.epochs = 2;
        const ModelState initial = init_parameters(cfg.arch, cfg.seed);
        std::uint64_t reg_fp = params_fingerprint(initial, "reg.");
        std::uint64_t dec_fp = params_fingerprint(initial, "dec.");
        bool saw_rec = false, saw_reg = false;
        const StepObserver obs = [&](const StepEvent& ev) {
            if (ev.reconstruction)
                REQUIRE(params_fingerprint(ev.model, "reg.") == reg_fp);
            else
                REQUIRE(params_fingerprint(ev.model, "dec.") == dec_fp);
            reg_fp = params_fingerprint(ev.model, "reg.");
            dec_fp = params_fingerprint(ev.model, "dec.");
            (ev.reconstruction ? saw_rec : saw_reg) = true;
        };
        train(cfg, source, &target, nullptr, obs);
        REQUIRE(saw_rec);
        REQUIRE(saw_reg);
    }
}

TEST_CASE("reconstruction loss trends down on a steady batch") {
    TrainConfig cfg = tiny_config();
    cfg.epochs = 40;
    cfg.batch_size = 8;
    Dataset source = generate_synthetic(Domain::source, 8, 51);
    Dataset target = generate_synthetic(Domain::target, 8, 52);
    auto [model, log] = train(cfg, source, &target, nullptr);
    std::vector<double> rec;
    for (const auto& s : log.steps)
        if (s.reconstruction) rec.push_back(s.loss);
    REQUIRE(rec.size() == 40);
    const auto mean = [](std::span<const double> v) {
        double s = 0;
        for (double x : v) s += x;
        return s / static_cast<double>(v.size());
    };
    REQUIRE(mean(std::span(rec).last(5)) < mean(std::span(rec).first(5)));
}

TEST_CASE("full-width architecture trains end to end") {
    // one interleaved iteration at the default (unscaled) widths
    TrainConfig cfg;
    cfg.batch_size = 2;
    cfg.epochs = 1;
    cfg.seed = 71;
    cfg.augment = false;
    Dataset source = generate_synthetic(Domain::source, 2, 71);
    Dataset target = generate_synthetic(Domain::target, 2, 72);
    auto [model, log] = train(cfg, source, &target, nullptr);
    REQUIRE(log.steps.size() == 2);
    REQUIRE(std::isfinite(log.steps[0].loss));
    REQUIRE(std::isfinite(log.steps[1].loss));
    REQUIRE(model.spec.code_width() == 500);
}

TEST_CASE("non-finite losses abort with the step index") {
    TrainConfig cfg = tiny_config();
    ModelState model = init_parameters(cfg.arch, 3);
    auto v = const_cast<Tensor&>(model.param("enc.conv1.w")).mutable_values();
    for (auto& x : v) x = 1e200;
    Dataset source = generate_synthetic(Domain::source, 4, 2);
    std::vector<Sample> batch(source.samples.begin(), source.samples.end());
    REQUIRE_THROWS_AS(
        reconstruction_step(model, stack_images(batch), 3e-4, 0.9), NumericError);
}

TEST_CASE("config parsing") {
    SECTION("spec defaults") {
        TrainConfig cfg;
        REQUIRE(cfg.epochs == 500);
        REQUIRE(cfg.batch_size == 128);
        REQUIRE(cfg.learning_rate == 3e-4);
        REQUIRE(cfg.momentum == 0.9);
        REQUIRE(cfg.mode == TrainMode::two_step);
    }
    SECTION("file text and overrides") {
        TrainConfig cfg = parse_config_text(
            "# comment\n"
            "mode=supervised_only\n"
            "epochs=12\n"
            "width_scale=1/4\n"
            "source_dir=/tmp/x\n");
        REQUIRE(cfg.mode == TrainMode::supervised_only);
        REQUIRE(cfg.epochs == 12);
        REQUIRE(cfg.arch.code_width() == 125);
        apply_override(cfg, "epochs=3");
        REQUIRE(cfg.epochs == 3);
        REQUIRE_THROWS_AS(apply_override(cfg, "nonsense=1"), DataError);
        REQUIRE_THROWS_AS(apply_override(cfg, "epochs"), DataError);
        REQUIRE_THROWS_AS(parse_config_text("epochs=abc\n"), DataError);
    }
    SECTION("validation") {
        TrainConfig cfg;
        cfg.epochs = 0;
        REQUIRE_THROWS_AS(cfg.validate(), DataError);
    }
}

TEST_CASE("checkpoint schedule") {
    const auto dir = std::filesystem::temp_directory_path() / "lmdet_test_sched";
    std::filesystem::remove_all(dir);
    TrainConfig cfg = tiny_config();
    cfg.epochs = 4;
    cfg.checkpoint_every = 2;
    cfg.out_dir = dir.string();
    Dataset source = generate_synthetic(Domain::source, 4, 61);
    Dataset target = generate_synthetic(Domain::target, 4, 62);
    train(cfg, source, &target, nullptr);
    REQUIRE(std::filesystem::exists(dir / "checkpoint_epoch_2.lmck"));
    REQUIRE(std::filesystem::exists(dir / "model.lmck"));
    ModelState final_model = load_checkpoint(dir / "model.lmck");
    REQUIRE(final_model.step == 8);
}
