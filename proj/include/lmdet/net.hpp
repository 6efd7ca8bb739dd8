#pragma once

#include <array>
#include <cmath>
#include <cstdint>
#include <numeric>
#include <sstream>
#include <string>
#include <string_view>
#include <vector>

#include "lmdet/errors.hpp"
#include "lmdet/rng.hpp"
#include "lmdet/tensor.hpp"

namespace lmdet {

// Rational scale factor in (0,1]. Kept as an exact fraction so that
// ceil(width * scale) is integer arithmetic, never a float rounding accident.
struct WidthScale {
    std::int64_t num = 1;
    std::int64_t den = 1;

    // Accepts "1", "0.25", "3/8".
    static WidthScale parse(const std::string& text) {
        WidthScale s;
        if (auto slash = text.find('/'); slash != std::string::npos) {
            s.num = std::stoll(text.substr(0, slash));
            s.den = std::stoll(text.substr(slash + 1));
        } else if (auto dot = text.find('.'); dot != std::string::npos) {
            const std::string digits = text.substr(0, dot) + text.substr(dot + 1);
            s.num = std::stoll(digits);
            s.den = 1;
            for (std::size_t i = dot + 1; i < text.size(); ++i) s.den *= 10;
        } else {
            s.num = std::stoll(text);
            s.den = 1;
        }
        if (s.den <= 0 || s.num <= 0 || s.num > s.den)
            throw DataError("width_scale must be a rational in (0,1], got '" + text + "'");
        const std::int64_t g = std::gcd(s.num, s.den);
        s.num /= g;
        s.den /= g;
        return s;
    }

    std::string str() const { return std::to_string(num) + "/" + std::to_string(den); }

    int apply_ceil(int width) const {
        const std::int64_t v = static_cast<std::int64_t>(width) * num;
        return static_cast<int>((v + den - 1) / den);
    }

    bool operator==(const WidthScale&) const = default;
};

// Static description of the three networks. Defaults give the full-size
// stack; width_scale shrinks every conv width and the fc width (ceiling
// rounding) for small, fast configurations with the identical topology.
struct ArchitectureSpec {
    int input_channels = 1;
    int input_size = 32;
    std::array<int, 5> conv_widths = {300, 250, 200, 150, 100};
    int fc_width = 500;
    int landmark_count = 3;
    WidthScale width_scale;

    void validate() const {
        if (input_channels <= 0) throw DataError("spec: input_channels must be positive");
        if (input_size <= 0 || input_size % 4 != 0)
            throw DataError("spec: input_size must be a positive multiple of 4 (two 2x2 pools), got " +
                            std::to_string(input_size));
        for (int w : conv_widths)
            if (w <= 0) throw DataError("spec: conv widths must be positive");
        if (fc_width <= 0) throw DataError("spec: fc_width must be positive");
        if (landmark_count <= 0) throw DataError("spec: landmark_count must be positive");
    }

    int conv_width(int i) const { return width_scale.apply_ceil(conv_widths[static_cast<std::size_t>(i)]); }
    int code_width() const { return width_scale.apply_ceil(fc_width); }
    int pooled_size() const { return input_size / 4; }
    int flatten_width() const { return conv_width(4) * pooled_size() * pooled_size(); }
    int output_dim() const { return 2 * landmark_count; }

    std::string to_text() const {
        std::ostringstream os;
        os << "input_channels=" << input_channels << "\n";
        os << "input_size=" << input_size << "\n";
        os << "conv_widths=" << conv_widths[0] << "," << conv_widths[1] << ","
           << conv_widths[2] << "," << conv_widths[3] << "," << conv_widths[4] << "\n";
        os << "fc_width=" << fc_width << "\n";
        os << "landmark_count=" << landmark_count << "\n";
        os << "width_scale=" << width_scale.str() << "\n";
        return os.str();
    }

    static ArchitectureSpec from_text(const std::string& text) {
        ArchitectureSpec spec;
        std::istringstream is(text);
        std::string line;
        while (std::getline(is, line)) {
            if (line.empty()) continue;
            const auto eq = line.find('=');
            if (eq == std::string::npos)
                throw DataError("spec: malformed line '" + line + "'");
            const std::string key = line.substr(0, eq);
            const std::string value = line.substr(eq + 1);
            if (key == "input_channels") {
                spec.input_channels = std::stoi(value);
            } else if (key == "input_size") {
                spec.input_size = std::stoi(value);
            } else if (key == "conv_widths") {
                std::istringstream vs(value);
                std::string tok;
                for (int i = 0; i < 5; ++i) {
                    if (!std::getline(vs, tok, ','))
                        throw DataError("spec: conv_widths needs 5 entries");
                    spec.conv_widths[static_cast<std::size_t>(i)] = std::stoi(tok);
                }
            } else if (key == "fc_width") {
                spec.fc_width = std::stoi(value);
            } else if (key == "landmark_count") {
                spec.landmark_count = std::stoi(value);
            } else if (key == "width_scale") {
                spec.width_scale = WidthScale::parse(value);
            } else {
                throw DataError("spec: unknown key '" + key + "'");
            }
        }
        spec.validate();
        return spec;
    }

    bool operator==(const ArchitectureSpec&) const = default;
};

// All learnable state: named parameter tensors in a stable order, matching
// momentum slots, the seed used at initialization, and the step counter.
struct ModelState {
    ArchitectureSpec spec;
    std::vector<std::pair<std::string, Tensor>> params;
    std::vector<std::pair<std::string, Tensor>> slots;
    std::uint64_t rng_seed = 0;
    std::int64_t step = 0;

    const Tensor& param(std::string_view name) const {
        for (const auto& [n, t] : params)
            if (n == name) return t;
        throw DataError("model: no parameter named '" + std::string(name) + "'");
    }

    Tensor& slot(std::string_view name) {
        for (auto& [n, t] : slots)
            if (n == name) return t;
        throw DataError("model: no slot named '" + std::string(name) + "'");
    }

    void clear_grads() {
        for (auto& [n, t] : params) t.clear_grad();
    }
};

namespace detail {

struct ParamDef {
    std::string name;
    std::vector<int> shape;
};

inline std::vector<ParamDef> parameter_table(const ArchitectureSpec& spec) {
    spec.validate();
    const int C = spec.input_channels;
    const int s1 = spec.conv_width(0), s2 = spec.conv_width(1), s3 = spec.conv_width(2),
              s4 = spec.conv_width(3), s5 = spec.conv_width(4);
    const int fc = spec.code_width();
    const int flat = spec.flatten_width();
    const int out = spec.output_dim();
    return {
        {"enc.conv1.w", {s1, C, 3, 3}},  {"enc.conv1.b", {s1}},
        {"enc.conv2.w", {s2, s1, 3, 3}}, {"enc.conv2.b", {s2}},
        {"enc.conv3.w", {s3, s2, 3, 3}}, {"enc.conv3.b", {s3}},
        {"enc.conv4.w", {s4, s3, 3, 3}}, {"enc.conv4.b", {s4}},
        {"enc.conv5.w", {s5, s4, 3, 3}}, {"enc.conv5.b", {s5}},
        {"enc.fc4.w", {flat, fc}},       {"enc.fc4.b", {fc}},
        {"dec.fc.w", {fc, flat}},        {"dec.fc.b", {flat}},
        {"dec.conv1.w", {s4, s5, 3, 3}}, {"dec.conv1.b", {s4}},
        {"dec.conv2.w", {s3, s4, 3, 3}}, {"dec.conv2.b", {s3}},
        {"dec.conv3.w", {s2, s3, 3, 3}}, {"dec.conv3.b", {s2}},
        {"dec.conv4.w", {s1, s2, 3, 3}}, {"dec.conv4.b", {s1}},
        {"dec.conv5.w", {C, s1, 3, 3}},  {"dec.conv5.b", {C}},
        {"reg.fc.w", {fc, out}},         {"reg.fc.b", {out}},
    };
}

// Uniform bound sqrt(6 / (fan_in + fan_out)); conv fans count the 3x3 patch.
inline double init_bound(const std::vector<int>& shape) {
    double fan_in, fan_out;
    if (shape.size() == 4) {
        fan_in = static_cast<double>(shape[1]) * shape[2] * shape[3];
        fan_out = static_cast<double>(shape[0]) * shape[2] * shape[3];
    } else {
        fan_in = static_cast<double>(shape[0]);
        fan_out = static_cast<double>(shape[1]);
    }
    return std::sqrt(6.0 / (fan_in + fan_out));
}

}  // namespace detail

// Fresh model: weights fan-scaled uniform, biases zero, slots zero.
// Bit-reproducible for a given (spec, seed).
inline ModelState init_parameters(const ArchitectureSpec& spec, std::uint64_t seed) {
    ModelState model;
    model.spec = spec;
    model.rng_seed = seed;
    Rng rng(seed);
    for (const auto& def : detail::parameter_table(spec)) {
        Tensor t(def.shape, /*requires_grad=*/true);
        if (def.shape.size() > 1) {
            const double bound = detail::init_bound(def.shape);
            auto v = t.mutable_values();
            for (auto& x : v) x = rng.uniform(-bound, bound);
        }
        model.params.emplace_back(def.name, t);
        model.slots.emplace_back(def.name, Tensor(def.shape));
    }
    return model;
}

// Shared feature stack:
// conv1-relu-pool, conv2-relu-pool, conv3..5-relu, flatten, fc4-relu.
inline Tensor encode(const ModelState& m, Tape* tape, const Tensor& images) {
    const auto& spec = m.spec;
    if (images.rank() != 4 || images.dim(1) != spec.input_channels ||
        images.dim(2) != spec.input_size || images.dim(3) != spec.input_size)
        throw ShapeError("encode: images must be [N," + std::to_string(spec.input_channels) +
                         "," + std::to_string(spec.input_size) + "," +
                         std::to_string(spec.input_size) + "]");
    Tensor h = relu(tape, conv2d(tape, images, m.param("enc.conv1.w"), m.param("enc.conv1.b")));
    h = maxpool2(tape, h);
    h = relu(tape, conv2d(tape, h, m.param("enc.conv2.w"), m.param("enc.conv2.b")));
    h = maxpool2(tape, h);
    h = relu(tape, conv2d(tape, h, m.param("enc.conv3.w"), m.param("enc.conv3.b")));
    h = relu(tape, conv2d(tape, h, m.param("enc.conv4.w"), m.param("enc.conv4.b")));
    h = relu(tape, conv2d(tape, h, m.param("enc.conv5.w"), m.param("enc.conv5.b")));
    h = reshape(tape, h, {h.dim(0), spec.flatten_width()});
    h = relu(tape, dense(tape, h, m.param("enc.fc4.w"), m.param("enc.fc4.b")));
    return h;
}

// Mirror of the encoder: fc back to the conv5 volume, conv widths retraced in
// reverse, nearest-neighbour x2 upsampling where the encoder pooled, and a
// final conv back to the image channels. ReLU everywhere, so reconstructed
// pixels are >= 0.
inline Tensor decode(const ModelState& m, Tape* tape, const Tensor& code) {
    const auto& spec = m.spec;
    if (code.rank() != 2 || code.dim(1) != spec.code_width())
        throw ShapeError("decode: code must be [N," + std::to_string(spec.code_width()) + "]");
    const int p = spec.pooled_size();
    Tensor h = relu(tape, dense(tape, code, m.param("dec.fc.w"), m.param("dec.fc.b")));
    h = reshape(tape, h, {h.dim(0), spec.conv_width(4), p, p});
    h = relu(tape, conv2d(tape, h, m.param("dec.conv1.w"), m.param("dec.conv1.b")));
    h = relu(tape, conv2d(tape, h, m.param("dec.conv2.w"), m.param("dec.conv2.b")));
    h = upsample2(tape, h);
    h = relu(tape, conv2d(tape, h, m.param("dec.conv3.w"), m.param("dec.conv3.b")));
    h = upsample2(tape, h);
    h = relu(tape, conv2d(tape, h, m.param("dec.conv4.w"), m.param("dec.conv4.b")));
    h = relu(tape, conv2d(tape, h, m.param("dec.conv5.w"), m.param("dec.conv5.b")));
    return h;
}

// Single affine layer into tanh; outputs live strictly inside (-1,1).
inline Tensor regress(const ModelState& m, Tape* tape, const Tensor& code) {
    const auto& spec = m.spec;
    if (code.rank() != 2 || code.dim(1) != spec.code_width())
        throw ShapeError("regress: code must be [N," + std::to_string(spec.code_width()) + "]");
    return tanh(tape, dense(tape, code, m.param("reg.fc.w"), m.param("reg.fc.b")));
}

// FNV-1a over the raw bytes of every parameter whose name starts with
// `prefix` (empty prefix = all). Used to assert that a training step left a
// parameter group untouched.
inline std::uint64_t params_fingerprint(const ModelState& m, std::string_view prefix = {}) {
    std::uint64_t h = 0xcbf29ce484222325ULL;
    auto mix = [&h](const void* data, std::size_t len) {
        const auto* p = static_cast<const unsigned char*>(data);
        for (std::size_t i = 0; i < len; ++i) {
            h ^= p[i];
            h *= 0x100000001b3ULL;
        }
    };
    for (const auto& [name, t] : m.params) {
        if (!prefix.empty() && name.rfind(prefix, 0) != 0) continue;
        mix(name.data(), name.size());
        mix(t.values().data(), t.values().size() * sizeof(double));
    }
    return h;
}

}  // namespace lmdet
