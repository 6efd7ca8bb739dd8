#pragma once

#include <cmath>
#include <cstdint>
#include <functional>
#include <string>
#include <vector>

#include "lmdet/errors.hpp"
#include "lmdet/rng.hpp"
#include "lmdet/tensor.hpp"

namespace lmdet {

struct GradCheckEntry {
    std::string op;
    std::string input;
    double max_rel_error = 0.0;
};

struct GradCheckReport {
    std::vector<GradCheckEntry> entries;
    double tolerance = 1e-4;

    double worst() const {
        double w = 0.0;
        for (const auto& e : entries) w = std::max(w, e.max_rel_error);
        return w;
    }
    bool pass() const { return worst() <= tolerance; }
};

namespace detail {

// Central finite differences with h = 1e-5 against the recorded backward
// pass. Inputs are seeded away from non-smooth points by the callers.
// Relative error uses max(1, |analytic|, |numeric|) as denominator, so tiny
// gradients are compared absolutely and large ones relatively.
inline constexpr double kFdStep = 1e-5;

using ForwardFn = std::function<Tensor(Tape*, std::vector<Tensor>&)>;

inline std::vector<GradCheckEntry> check_forward(const std::string& op_name,
                                                 const std::vector<std::string>& input_names,
                                                 std::vector<Tensor> inputs,
                                                 const ForwardFn& forward) {
    for (auto& t : inputs) t.set_requires_grad(true);

    Tape tape;
    Tensor loss = forward(&tape, inputs);
    tape.backward(loss);
    std::vector<std::vector<double>> analytic;
    for (auto& t : inputs) {
        auto g = t.grad();
        analytic.emplace_back(g.begin(), g.end());
        if (analytic.back().empty()) analytic.back().assign(t.size(), 0.0);
    }

    std::vector<GradCheckEntry> entries;
    for (std::size_t ti = 0; ti < inputs.size(); ++ti) {
        GradCheckEntry entry{op_name, input_names[ti], 0.0};
        auto vals = inputs[ti].mutable_values();
        for (std::size_t j = 0; j < vals.size(); ++j) {
            const double keep = vals[j];
            vals[j] = keep + kFdStep;
            const double up = forward(nullptr, inputs).item();
            vals[j] = keep - kFdStep;
            const double down = forward(nullptr, inputs).item();
            vals[j] = keep;
            const double numeric = (up - down) / (2.0 * kFdStep);
            const double a = analytic[ti][j];
            const double rel =
                std::abs(a - numeric) / std::max({1.0, std::abs(a), std::abs(numeric)});
            entry.max_rel_error = std::max(entry.max_rel_error, rel);
        }
        entries.push_back(std::move(entry));
    }
    return entries;
}

inline Tensor random_tensor(std::vector<int> shape, Rng& rng, double lo, double hi) {
    Tensor t(std::move(shape));
    for (auto& v : t.mutable_values()) v = rng.uniform(lo, hi);
    return t;
}

// Values with |x| in [0.1, 1.1]: safely away from the relu/mae kinks.
inline Tensor random_tensor_off_zero(std::vector<int> shape, Rng& rng) {
    Tensor t(std::move(shape));
    for (auto& v : t.mutable_values()) {
        const double mag = rng.uniform(0.1, 1.1);
        v = rng.uniform() < 0.5 ? -mag : mag;
    }
    return t;
}

// A shuffled value grid: every element distinct with pairwise gaps of at
// least 1/n, so an h perturbation can never flip a pooling argmax.
inline Tensor distinct_tensor(std::vector<int> shape, Rng& rng) {
    Tensor t(std::move(shape));
    auto v = t.mutable_values();
    const auto n = v.size();
    std::vector<std::size_t> perm(n);
    for (std::size_t i = 0; i < n; ++i) perm[i] = i;
    for (std::size_t i = n; i > 1; --i) {
        const auto j = static_cast<std::size_t>(rng.uniform_int(0, static_cast<std::int64_t>(i) - 1));
        std::swap(perm[i - 1], perm[j]);
    }
    for (std::size_t i = 0; i < n; ++i)
        v[i] = 0.1 + static_cast<double>(perm[i]) / static_cast<double>(n);
    return t;
}

}  // namespace detail

// Gradient check for one named operation on seeded inputs. Probe losses are
// weighted sums with fixed random weights so every output element exercises
// its backward rule.
inline std::vector<GradCheckEntry> gradcheck_op(const std::string& op, std::uint64_t seed) {
    Rng rng = Rng(seed).derive(Rng::splitmix64(std::hash<std::string>{}(op)));
    using detail::check_forward;
    using detail::random_tensor;

    if (op == "conv2d") {
        auto probe = random_tensor({2, 4, 6, 6}, rng, -1.0, 1.0);
        return check_forward(
            op, {"input", "kernels", "bias"},
            {random_tensor({2, 3, 6, 6}, rng, -1.0, 1.0),
             random_tensor({4, 3, 3, 3}, rng, -0.5, 0.5),
             random_tensor({4}, rng, -0.5, 0.5)},
            [probe](Tape* tape, std::vector<Tensor>& in) {
                return weighted_sum(tape, conv2d(tape, in[0], in[1], in[2]), probe);
            });
    }
    if (op == "maxpool2") {
        auto probe = random_tensor({2, 2, 3, 3}, rng, -1.0, 1.0);
        return check_forward(op, {"input"}, {detail::distinct_tensor({2, 2, 6, 6}, rng)},
                             [probe](Tape* tape, std::vector<Tensor>& in) {
                                 return weighted_sum(tape, maxpool2(tape, in[0]), probe);
                             });
    }
    if (op == "dense") {
        auto probe = random_tensor({3, 4}, rng, -1.0, 1.0);
        return check_forward(op, {"input", "weights", "bias"},
                             {random_tensor({3, 5}, rng, -1.0, 1.0),
                              random_tensor({5, 4}, rng, -0.8, 0.8),
                              random_tensor({4}, rng, -0.5, 0.5)},
                             [probe](Tape* tape, std::vector<Tensor>& in) {
                                 return weighted_sum(tape, dense(tape, in[0], in[1], in[2]), probe);
                             });
    }
    if (op == "relu") {
        auto probe = random_tensor({3, 7}, rng, -1.0, 1.0);
        return check_forward(op, {"input"}, {detail::random_tensor_off_zero({3, 7}, rng)},
                             [probe](Tape* tape, std::vector<Tensor>& in) {
                                 return weighted_sum(tape, relu(tape, in[0]), probe);
                             });
    }
    if (op == "tanh") {
        auto probe = random_tensor({3, 7}, rng, -1.0, 1.0);
        return check_forward(op, {"input"}, {random_tensor({3, 7}, rng, -2.0, 2.0)},
                             [probe](Tape* tape, std::vector<Tensor>& in) {
                                 return weighted_sum(tape, tanh(tape, in[0]), probe);
                             });
    }
    if (op == "upsample2") {
        auto probe = random_tensor({2, 2, 6, 6}, rng, -1.0, 1.0);
        return check_forward(op, {"input"}, {random_tensor({2, 2, 3, 3}, rng, -1.0, 1.0)},
                             [probe](Tape* tape, std::vector<Tensor>& in) {
                                 return weighted_sum(tape, upsample2(tape, in[0]), probe);
                             });
    }
    if (op == "mse_loss") {
        auto target = random_tensor({2, 8}, rng, -1.0, 1.0);
        return check_forward(op, {"pred"}, {random_tensor({2, 8}, rng, -1.0, 1.0)},
                             [target](Tape* tape, std::vector<Tensor>& in) {
                                 return mse_loss(tape, in[0], target);
                             });
    }
    if (op == "mae") {
        // keep |pred - target| clear of the kink
        auto pred = detail::random_tensor_off_zero({2, 6}, rng);
        auto target = Tensor(pred.shape());
        {
            auto pv = pred.values();
            auto tv = target.mutable_values();
            for (std::size_t i = 0; i < tv.size(); ++i)
                tv[i] = pv[i] > 0.0 ? pv[i] - rng.uniform(0.2, 0.7) : pv[i] + rng.uniform(0.2, 0.7);
        }
        return check_forward(op, {"pred"}, {pred},
                             [target](Tape* tape, std::vector<Tensor>& in) {
                                 return mae_loss(tape, in[0], target);
                             });
    }
    if (op == "add") {
        auto probe = random_tensor({4, 5}, rng, -1.0, 1.0);
        return check_forward(op, {"a", "b"},
                             {random_tensor({4, 5}, rng, -1.0, 1.0),
                              random_tensor({4, 5}, rng, -1.0, 1.0)},
                             [probe](Tape* tape, std::vector<Tensor>& in) {
                                 return weighted_sum(tape, add(tape, in[0], in[1]), probe);
                             });
    }
    if (op == "scale") {
        auto probe = random_tensor({4, 5}, rng, -1.0, 1.0);
        return check_forward(op, {"a"}, {random_tensor({4, 5}, rng, -1.0, 1.0)},
                             [probe](Tape* tape, std::vector<Tensor>& in) {
                                 return weighted_sum(tape, scale(tape, in[0], -1.7), probe);
                             });
    }
    if (op == "sum") {
        return check_forward(op, {"a"}, {random_tensor({4, 5}, rng, -1.0, 1.0)},
                             [](Tape* tape, std::vector<Tensor>& in) {
                                 return sum(tape, in[0]);
                             });
    }
    throw DataError("gradcheck: unknown op '" + op + "'");
}

inline const std::vector<std::string>& gradcheck_ops() {
    static const std::vector<std::string> ops = {
        "conv2d", "maxpool2", "dense", "relu", "tanh",
        "mse_loss", "mae", "upsample2", "add", "scale", "sum"};
    return ops;
}

inline GradCheckReport run_gradcheck(std::uint64_t seed = 0) {
    GradCheckReport report;
    for (const auto& op : gradcheck_ops()) {
        auto entries = gradcheck_op(op, seed);
        report.entries.insert(report.entries.end(), entries.begin(), entries.end());
    }
    return report;
}

}  // namespace lmdet
