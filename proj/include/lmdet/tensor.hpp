#pragma once

#include <algorithm>
#include <cmath>
#include <cstddef>
#include <cstdint>
#include <functional>
#include <memory>
#include <span>
#include <sstream>
#include <string>
#include <unordered_set>
#include <utility>
#include <vector>

#include "lmdet/errors.hpp"

namespace lmdet {

// N-dimensional array of doubles with shared storage. Copies of a Tensor
// alias the same buffer; values are treated as immutable once an operation
// has produced them, except through mutable_values() (parameter updates,
// initialization). Gradients live next to the values and accumulate
// additively during backward passes.
class Tensor {
public:
    Tensor() : impl_(std::make_shared<Impl>()) {}

    explicit Tensor(std::vector<int> shape, bool requires_grad = false)
        : impl_(std::make_shared<Impl>()) {
        impl_->shape = std::move(shape);
        impl_->values.assign(checked_numel(impl_->shape), 0.0);
        impl_->requires_grad = requires_grad;
    }

    Tensor(std::vector<int> shape, std::vector<double> values, bool requires_grad = false)
        : impl_(std::make_shared<Impl>()) {
        impl_->shape = std::move(shape);
        if (values.size() != checked_numel(impl_->shape))
            throw ShapeError("tensor: value count does not match shape");
        impl_->values = std::move(values);
        impl_->requires_grad = requires_grad;
    }

    static Tensor scalar(double v) { return Tensor({1}, std::vector<double>{v}); }

    const std::vector<int>& shape() const { return impl_->shape; }
    int rank() const { return static_cast<int>(impl_->shape.size()); }
    int dim(int i) const { return impl_->shape[static_cast<std::size_t>(i)]; }
    std::size_t size() const { return impl_->values.size(); }

    std::span<const double> values() const { return impl_->values; }
    // Explicit update path; bypasses immutability for optimizers and init.
    std::span<double> mutable_values() { return impl_->values; }

    bool requires_grad() const { return impl_->requires_grad; }
    void set_requires_grad(bool v) { impl_->requires_grad = v; }

    bool has_grad() const { return !impl_->grad.empty(); }
    std::span<const double> grad() const { return impl_->grad; }
    // Lazily allocates a zeroed gradient buffer of matching shape.
    std::span<double> grad_accum() {
        if (impl_->grad.empty()) impl_->grad.assign(impl_->values.size(), 0.0);
        return impl_->grad;
    }
    void clear_grad() { impl_->grad.clear(); }

    double item() const {
        if (size() != 1) throw ShapeError("item: tensor is not scalar");
        return impl_->values[0];
    }

    bool same_storage(const Tensor& other) const { return impl_ == other.impl_; }
    const void* storage_id() const { return impl_.get(); }

private:
    struct Impl {
        std::vector<int> shape;
        std::vector<double> values;
        std::vector<double> grad;
        bool requires_grad = false;
    };

    static std::size_t checked_numel(const std::vector<int>& shape) {
        std::size_t n = 1;
        for (int d : shape) {
            if (d <= 0) throw ShapeError("tensor: dimensions must be positive");
            n *= static_cast<std::size_t>(d);
        }
        return n;
    }

    std::shared_ptr<Impl> impl_;
};

// Record of one forward pass. Operations executed under a tape append a
// backward closure; backward() replays them once in reverse order and then
// clears the record. A tape cannot be replayed twice.
class Tape {
public:
    void record(const Tensor& result, std::function<void()> backward_fn) {
        produced_.insert(result.storage_id());
        steps_.push_back(std::move(backward_fn));
    }

    bool produced(const Tensor& t) const { return produced_.contains(t.storage_id()); }
    std::size_t recorded_ops() const { return steps_.size(); }

    void backward(Tensor loss) {
        if (spent_) throw Error("backward: tape already consumed; re-record the forward pass");
        if (loss.size() != 1) throw ShapeError("backward: loss must be scalar");
        if (!produced(loss)) throw Error("backward: loss was not recorded on this tape");
        loss.grad_accum()[0] += 1.0;
        for (auto it = steps_.rbegin(); it != steps_.rend(); ++it) (*it)();
        steps_.clear();
        produced_.clear();
        spent_ = true;
    }

private:
    std::vector<std::function<void()>> steps_;
    std::unordered_set<const void*> produced_;
    bool spent_ = false;
};

namespace detail {

inline void ensure_finite(const char* op, std::span<const double> v) {
    bool bad = false;
    const std::ptrdiff_t n = static_cast<std::ptrdiff_t>(v.size());
#pragma omp parallel for schedule(static) reduction(|| : bad)
    for (std::ptrdiff_t i = 0; i < n; ++i) bad = bad || !std::isfinite(v[static_cast<std::size_t>(i)]);
    if (bad) {
        // error path only: find the first offender serially for the message
        for (std::size_t i = 0; i < v.size(); ++i) {
            if (!std::isfinite(v[i])) {
                std::ostringstream msg;
                msg << op << ": non-finite value " << v[i] << " at flat index " << i;
                throw NumericError(msg.str());
            }
        }
    }
}

inline bool wants_tape(const Tape* tape, std::initializer_list<bool> grads) {
    if (!tape) return false;
    for (bool g : grads)
        if (g) return true;
    return false;
}

// ---------------------------------------------------------------------------
// Matrix kernels. All are row-major and deterministic: each output element is
// reduced in an order fixed by the code alone, so neither thread count nor
// scheduling can change a single bit of the result.
// ---------------------------------------------------------------------------

// C[M,N] (+)= A[M,K] * B[K,N]
inline void gemm(int M, int N, int K, const double* A, const double* B, double* C,
                 bool accumulate) {
    constexpr int MB = 4;
#pragma omp parallel for schedule(static)
    for (int m0 = 0; m0 < M; m0 += MB) {
        const int m1 = std::min(m0 + MB, M);
        if (!accumulate)
            std::fill(C + static_cast<std::size_t>(m0) * N,
                      C + static_cast<std::size_t>(m1) * N, 0.0);
        if (m1 - m0 == MB) {
            double* c0 = C + static_cast<std::size_t>(m0 + 0) * N;
            double* c1 = C + static_cast<std::size_t>(m0 + 1) * N;
            double* c2 = C + static_cast<std::size_t>(m0 + 2) * N;
            double* c3 = C + static_cast<std::size_t>(m0 + 3) * N;
            for (int k = 0; k < K; ++k) {
                const double a0 = A[static_cast<std::size_t>(m0 + 0) * K + k];
                const double a1 = A[static_cast<std::size_t>(m0 + 1) * K + k];
                const double a2 = A[static_cast<std::size_t>(m0 + 2) * K + k];
                const double a3 = A[static_cast<std::size_t>(m0 + 3) * K + k];
                const double* b = B + static_cast<std::size_t>(k) * N;
                for (int n = 0; n < N; ++n) {
                    const double bn = b[n];
                    c0[n] += a0 * bn;
                    c1[n] += a1 * bn;
                    c2[n] += a2 * bn;
                    c3[n] += a3 * bn;
                }
            }
        } else {
            for (int m = m0; m < m1; ++m) {
                double* c = C + static_cast<std::size_t>(m) * N;
                for (int k = 0; k < K; ++k) {
                    const double a = A[static_cast<std::size_t>(m) * K + k];
                    const double* b = B + static_cast<std::size_t>(k) * N;
                    for (int n = 0; n < N; ++n) c[n] += a * b[n];
                }
            }
        }
    }
}

// Eight-chain dot product; the lane-combine order is fixed by the code.
inline double dot(const double* a, const double* b, int k) {
    double s0 = 0, s1 = 0, s2 = 0, s3 = 0, s4 = 0, s5 = 0, s6 = 0, s7 = 0;
    int i = 0;
    for (; i + 8 <= k; i += 8) {
        s0 += a[i + 0] * b[i + 0];
        s1 += a[i + 1] * b[i + 1];
        s2 += a[i + 2] * b[i + 2];
        s3 += a[i + 3] * b[i + 3];
        s4 += a[i + 4] * b[i + 4];
        s5 += a[i + 5] * b[i + 5];
        s6 += a[i + 6] * b[i + 6];
        s7 += a[i + 7] * b[i + 7];
    }
    double s = ((s0 + s1) + (s2 + s3)) + ((s4 + s5) + (s6 + s7));
    for (; i < k; ++i) s += a[i] * b[i];
    return s;
}

// C[M,N] (+)= A[M,K] * B[N,K]^T   (rows of A dotted with rows of B)
inline void gemm_nt(int M, int N, int K, const double* A, const double* B, double* C,
                    bool accumulate) {
#pragma omp parallel for schedule(static)
    for (int m = 0; m < M; ++m) {
        const double* a = A + static_cast<std::size_t>(m) * K;
        double* c = C + static_cast<std::size_t>(m) * N;
        for (int n = 0; n < N; ++n) {
            const double d = dot(a, B + static_cast<std::size_t>(n) * K, K);
            c[n] = accumulate ? c[n] + d : d;
        }
    }
}

// C[M,N] (+)= A[K,M]^T * B[K,N]
inline void gemm_tn(int M, int N, int K, const double* A, const double* B, double* C,
                    bool accumulate) {
    constexpr int MB = 4;
#pragma omp parallel for schedule(static)
    for (int m0 = 0; m0 < M; m0 += MB) {
        const int m1 = std::min(m0 + MB, M);
        if (!accumulate)
            std::fill(C + static_cast<std::size_t>(m0) * N,
                      C + static_cast<std::size_t>(m1) * N, 0.0);
        for (int k = 0; k < K; ++k) {
            const double* arow = A + static_cast<std::size_t>(k) * M;
            const double* b = B + static_cast<std::size_t>(k) * N;
            for (int m = m0; m < m1; ++m) {
                const double a = arow[m];
                double* c = C + static_cast<std::size_t>(m) * N;
                for (int n = 0; n < N; ++n) c[n] += a * b[n];
            }
        }
    }
}

// ---------------------------------------------------------------------------
// 3x3 / pad 1 / stride 1 convolution lowering.
// col has C*9 rows of H*W columns: col[(c*9 + ky*3 + kx), y*W + x] is the
// input pixel (y+ky-1, x+kx-1) of channel c, or zero outside the frame.
// ---------------------------------------------------------------------------

inline void im2col3x3(const double* in, int C, int H, int W, double* col) {
    const std::size_t hw = static_cast<std::size_t>(H) * W;
    for (int c = 0; c < C; ++c) {
        const double* src = in + static_cast<std::size_t>(c) * hw;
        for (int ky = 0; ky < 3; ++ky) {
            for (int kx = 0; kx < 3; ++kx) {
                double* dst = col + (static_cast<std::size_t>(c) * 9 + ky * 3 + kx) * hw;
                for (int y = 0; y < H; ++y) {
                    const int sy = y + ky - 1;
                    double* drow = dst + static_cast<std::size_t>(y) * W;
                    if (sy < 0 || sy >= H) {
                        std::fill(drow, drow + W, 0.0);
                        continue;
                    }
                    const double* srow = src + static_cast<std::size_t>(sy) * W;
                    const int dx = kx - 1;
                    int x0 = std::max(0, -dx);
                    int x1 = std::min(W, W - dx);
                    for (int x = 0; x < x0; ++x) drow[x] = 0.0;
                    for (int x = x0; x < x1; ++x) drow[x] = srow[x + dx];
                    for (int x = x1; x < W; ++x) drow[x] = 0.0;
                }
            }
        }
    }
}

// Scatter-add of a column buffer back onto the input plane.
inline void col2im3x3(const double* col, int C, int H, int W, double* in) {
    const std::size_t hw = static_cast<std::size_t>(H) * W;
    for (int c = 0; c < C; ++c) {
        double* dst = in + static_cast<std::size_t>(c) * hw;
        for (int ky = 0; ky < 3; ++ky) {
            for (int kx = 0; kx < 3; ++kx) {
                const double* src = col + (static_cast<std::size_t>(c) * 9 + ky * 3 + kx) * hw;
                const int dx = kx - 1;
                for (int y = 0; y < H; ++y) {
                    const int sy = y + ky - 1;
                    if (sy < 0 || sy >= H) continue;
                    const double* srow = src + static_cast<std::size_t>(y) * W;
                    double* drow = dst + static_cast<std::size_t>(sy) * W;
                    int x0 = std::max(0, -dx);
                    int x1 = std::min(W, W - dx);
                    for (int x = x0; x < x1; ++x) drow[x + dx] += srow[x];
                }
            }
        }
    }
}

}  // namespace detail

// ---------------------------------------------------------------------------
// Operations. Every op validates shapes, computes the forward value, checks
// the committed result for non-finite entries, and (when executed under a
// tape with at least one grad-requiring input) records its backward rule.
// ---------------------------------------------------------------------------

// input [N,C,H,W] * kernels [F,C,3,3] + bias [F] -> [N,F,H,W]
inline Tensor conv2d(Tape* tape, const Tensor& input, const Tensor& kernels,
                     const Tensor& bias) {
    if (input.rank() != 4) throw ShapeError("conv2d: input must be rank 4 [N,C,H,W]");
    if (kernels.rank() != 4 || kernels.dim(2) != 3 || kernels.dim(3) != 3)
        throw ShapeError("conv2d: kernels must be rank 4 [F,C,3,3]");
    if (kernels.dim(1) != input.dim(1))
        throw ShapeError("conv2d: kernel channels " + std::to_string(kernels.dim(1)) +
                         " do not match input channels " + std::to_string(input.dim(1)));
    if (bias.rank() != 1 || bias.dim(0) != kernels.dim(0))
        throw ShapeError("conv2d: bias must be rank 1 [F]");

    const int N = input.dim(0), C = input.dim(1), H = input.dim(2), W = input.dim(3);
    const int F = kernels.dim(0);
    const std::size_t hw = static_cast<std::size_t>(H) * W;
    const std::size_t in_img = static_cast<std::size_t>(C) * hw;
    const std::size_t out_img = static_cast<std::size_t>(F) * hw;
    const int ck = C * 9;

    Tensor out({N, F, H, W});
    {
        const double* in = input.values().data();
        const double* kw = kernels.values().data();
        const double* bv = bias.values().data();
        double* ov = out.mutable_values().data();
#pragma omp parallel for schedule(static)
        for (int n = 0; n < N; ++n) {
            std::vector<double> col(static_cast<std::size_t>(ck) * hw);
            detail::im2col3x3(in + n * in_img, C, H, W, col.data());
            double* o = ov + n * out_img;
            detail::gemm(F, static_cast<int>(hw), ck, kw, col.data(), o, false);
            for (int f = 0; f < F; ++f) {
                double* orow = o + static_cast<std::size_t>(f) * hw;
                const double b = bv[f];
                for (std::size_t i = 0; i < hw; ++i) orow[i] += b;
            }
        }
    }
    detail::ensure_finite("conv2d", out.values());

    if (detail::wants_tape(tape, {input.requires_grad(), kernels.requires_grad(),
                                  bias.requires_grad()})) {
        out.set_requires_grad(true);
        Tensor in_t = input, k_t = kernels, b_t = bias, out_t = out;
        tape->record(out, [in_t, k_t, b_t, out_t, N, C, H, W, F, ck, hw, in_img,
                           out_img]() mutable {
            const double* og = out_t.grad().data();
            if (b_t.requires_grad()) {
                auto bg = b_t.grad_accum();
#pragma omp parallel for schedule(static)
                for (int f = 0; f < F; ++f) {
                    double s = 0.0;
                    for (int n = 0; n < N; ++n) {
                        const double* row = og + n * out_img + static_cast<std::size_t>(f) * hw;
                        for (std::size_t i = 0; i < hw; ++i) s += row[i];
                    }
                    bg[f] += s;
                }
            }
            if (k_t.requires_grad()) {
                auto kg = k_t.grad_accum();
                const double* in = in_t.values().data();
                // fixed 4-way image partition: partials are summed in a
                // code-determined order, so the result does not depend on
                // the thread count
                constexpr int kParts = 4;
                const std::size_t ksz = kg.size();
                std::vector<double> partials(kParts * ksz, 0.0);
#pragma omp parallel for schedule(static)
                for (int part = 0; part < kParts; ++part) {
                    const int n0 = N * part / kParts, n1 = N * (part + 1) / kParts;
                    if (n0 == n1) continue;
                    std::vector<double> col(static_cast<std::size_t>(ck) * hw);
                    double* acc = partials.data() + static_cast<std::size_t>(part) * ksz;
                    for (int n = n0; n < n1; ++n) {
                        detail::im2col3x3(in + n * in_img, C, H, W, col.data());
                        detail::gemm_nt(F, ck, static_cast<int>(hw), og + n * out_img,
                                        col.data(), acc, true);
                    }
                }
                for (int part = 0; part < kParts; ++part) {
                    const double* acc = partials.data() + static_cast<std::size_t>(part) * ksz;
                    for (std::size_t i = 0; i < ksz; ++i) kg[i] += acc[i];
                }
            }
            if (in_t.requires_grad()) {
                auto ig = in_t.grad_accum();
                // kernels transposed once: kt[ck, F]
                std::vector<double> kt(static_cast<std::size_t>(ck) * F);
                const double* kw = k_t.values().data();
                for (int f = 0; f < F; ++f)
                    for (int q = 0; q < ck; ++q)
                        kt[static_cast<std::size_t>(q) * F + f] =
                            kw[static_cast<std::size_t>(f) * ck + q];
                double* igd = ig.data();
#pragma omp parallel for schedule(static)
                for (int n = 0; n < N; ++n) {
                    std::vector<double> dcol(static_cast<std::size_t>(ck) * hw);
                    detail::gemm(ck, static_cast<int>(hw), F, kt.data(), og + n * out_img,
                                 dcol.data(), false);
                    detail::col2im3x3(dcol.data(), C, H, W, igd + n * in_img);
                }
            }
        });
    }
    return out;
}

// 2x2 max pooling, stride 2. Gradient goes to the argmax; ties resolve to the
// first element in row-major scan order of the window.
inline Tensor maxpool2(Tape* tape, const Tensor& input) {
    if (input.rank() != 4) throw ShapeError("maxpool2: input must be rank 4 [N,C,H,W]");
    const int N = input.dim(0), C = input.dim(1), H = input.dim(2), W = input.dim(3);
    if (H % 2 != 0 || W % 2 != 0)
        throw ShapeError("maxpool2: spatial dims must be even, got " + std::to_string(H) +
                         "x" + std::to_string(W));
    const int OH = H / 2, OW = W / 2;

    Tensor out({N, C, OH, OW});
    auto argmax = std::make_shared<std::vector<std::size_t>>(out.size());
    {
        const double* in = input.values().data();
        double* ov = out.mutable_values().data();
        std::size_t* am = argmax->data();
#pragma omp parallel for schedule(static)
        for (int p = 0; p < N * C; ++p) {
            const std::size_t plane = static_cast<std::size_t>(p) * H * W;
            std::size_t o = static_cast<std::size_t>(p) * OH * OW;
            for (int y = 0; y < OH; ++y)
                for (int x = 0; x < OW; ++x, ++o) {
                    std::size_t best = plane + static_cast<std::size_t>(2 * y) * W + 2 * x;
                    double bv = in[best];
                    const std::size_t cand[3] = {best + 1, best + W, best + W + 1};
                    for (std::size_t idx : cand)
                        if (in[idx] > bv) {  // strict: first-in-scan wins ties
                            bv = in[idx];
                            best = idx;
                        }
                    ov[o] = bv;
                    am[o] = best;
                }
        }
    }
    detail::ensure_finite("maxpool2", out.values());

    if (detail::wants_tape(tape, {input.requires_grad()})) {
        out.set_requires_grad(true);
        Tensor in_t = input, out_t = out;
        tape->record(out, [in_t, out_t, argmax]() mutable {
            auto ig = in_t.grad_accum();
            const double* og = out_t.grad().data();
            const std::ptrdiff_t n = static_cast<std::ptrdiff_t>(out_t.size());
            // pooling windows are disjoint, so argmax targets are unique
#pragma omp parallel for schedule(static)
            for (std::ptrdiff_t o = 0; o < n; ++o)
                ig[(*argmax)[static_cast<std::size_t>(o)]] += og[o];
        });
    }
    return out;
}

// input [N,D] * weights [D,K] + bias [K] -> [N,K]
inline Tensor dense(Tape* tape, const Tensor& input, const Tensor& weights,
                    const Tensor& bias) {
    if (input.rank() != 2) throw ShapeError("dense: input must be rank 2 [N,D]");
    if (weights.rank() != 2) throw ShapeError("dense: weights must be rank 2 [D,K]");
    if (input.dim(1) != weights.dim(0))
        throw ShapeError("dense: inner dimensions disagree, input D=" +
                         std::to_string(input.dim(1)) + " vs weights D=" +
                         std::to_string(weights.dim(0)));
    if (bias.rank() != 1 || bias.dim(0) != weights.dim(1))
        throw ShapeError("dense: bias must be rank 1 [K]");

    const int N = input.dim(0), D = input.dim(1), K = weights.dim(1);
    Tensor out({N, K});
    detail::gemm(N, K, D, input.values().data(), weights.values().data(),
                 out.mutable_values().data(), false);
    {
        double* ov = out.mutable_values().data();
        const double* bv = bias.values().data();
        for (int n = 0; n < N; ++n) {
            double* row = ov + static_cast<std::size_t>(n) * K;
            for (int k = 0; k < K; ++k) row[k] += bv[k];
        }
    }
    detail::ensure_finite("dense", out.values());

    if (detail::wants_tape(tape, {input.requires_grad(), weights.requires_grad(),
                                  bias.requires_grad()})) {
        out.set_requires_grad(true);
        Tensor in_t = input, w_t = weights, b_t = bias, out_t = out;
        tape->record(out, [in_t, w_t, b_t, out_t, N, D, K]() mutable {
            const double* og = out_t.grad().data();
            if (b_t.requires_grad()) {
                auto bg = b_t.grad_accum();
                for (int n = 0; n < N; ++n) {
                    const double* row = og + static_cast<std::size_t>(n) * K;
                    for (int k = 0; k < K; ++k) bg[k] += row[k];
                }
            }
            if (w_t.requires_grad())
                detail::gemm_tn(D, K, N, in_t.values().data(), og,
                                w_t.grad_accum().data(), true);
            if (in_t.requires_grad())
                detail::gemm_nt(N, D, K, og, w_t.values().data(),
                                in_t.grad_accum().data(), true);
        });
    }
    return out;
}

// Elementwise max(0, x). Subgradient at exactly 0 is 0.
inline Tensor relu(Tape* tape, const Tensor& input) {
    Tensor out(input.shape());
    {
        auto in = input.values();
        auto ov = out.mutable_values();
        const std::ptrdiff_t n = static_cast<std::ptrdiff_t>(in.size());
#pragma omp parallel for schedule(static)
        for (std::ptrdiff_t i = 0; i < n; ++i) ov[i] = in[i] > 0.0 ? in[i] : 0.0;
    }
    detail::ensure_finite("relu", out.values());
    if (detail::wants_tape(tape, {input.requires_grad()})) {
        out.set_requires_grad(true);
        Tensor in_t = input, out_t = out;
        tape->record(out, [in_t, out_t]() mutable {
            auto ig = in_t.grad_accum();
            auto og = out_t.grad();
            auto in = in_t.values();
            const std::ptrdiff_t n = static_cast<std::ptrdiff_t>(in.size());
#pragma omp parallel for schedule(static)
            for (std::ptrdiff_t i = 0; i < n; ++i)
                if (in[i] > 0.0) ig[i] += og[i];
        });
    }
    return out;
}

// Elementwise hyperbolic tangent, with the output clamped to the largest
// representable doubles inside (-1,1) so the open-interval contract holds
// even where std::tanh rounds to exactly +-1 (|x| >~ 19).
inline Tensor tanh(Tape* tape, const Tensor& input) {
    constexpr double kOpenOne = 0x1.fffffffffffffp-1;  // nextafter(1.0, 0.0)
    Tensor out(input.shape());
    {
        auto in = input.values();
        auto ov = out.mutable_values();
        const std::ptrdiff_t n = static_cast<std::ptrdiff_t>(in.size());
#pragma omp parallel for schedule(static)
        for (std::ptrdiff_t i = 0; i < n; ++i) {
            double t = std::tanh(in[i]);
            if (t >= 1.0) t = kOpenOne;
            if (t <= -1.0) t = -kOpenOne;
            ov[i] = t;
        }
    }
    detail::ensure_finite("tanh", out.values());
    if (detail::wants_tape(tape, {input.requires_grad()})) {
        out.set_requires_grad(true);
        Tensor in_t = input, out_t = out;
        tape->record(out, [in_t, out_t]() mutable {
            auto ig = in_t.grad_accum();
            auto og = out_t.grad();
            auto y = out_t.values();
            const std::ptrdiff_t n = static_cast<std::ptrdiff_t>(y.size());
#pragma omp parallel for schedule(static)
            for (std::ptrdiff_t i = 0; i < n; ++i) ig[i] += og[i] * (1.0 - y[i] * y[i]);
        });
    }
    return out;
}

inline Tensor reshape(Tape* tape, const Tensor& input, std::vector<int> new_shape) {
    Tensor out(std::move(new_shape));
    if (out.size() != input.size())
        throw ShapeError("reshape: element count mismatch");
    std::copy(input.values().begin(), input.values().end(), out.mutable_values().begin());
    if (detail::wants_tape(tape, {input.requires_grad()})) {
        out.set_requires_grad(true);
        Tensor in_t = input, out_t = out;
        tape->record(out, [in_t, out_t]() mutable {
            auto ig = in_t.grad_accum();
            auto og = out_t.grad();
            for (std::size_t i = 0; i < og.size(); ++i) ig[i] += og[i];
        });
    }
    return out;
}

// Nearest-neighbour 2x upsampling: [N,C,H,W] -> [N,C,2H,2W].
inline Tensor upsample2(Tape* tape, const Tensor& input) {
    if (input.rank() != 4) throw ShapeError("upsample2: input must be rank 4 [N,C,H,W]");
    const int N = input.dim(0), C = input.dim(1), H = input.dim(2), W = input.dim(3);
    Tensor out({N, C, 2 * H, 2 * W});
    {
        const double* in = input.values().data();
        double* ov = out.mutable_values().data();
#pragma omp parallel for schedule(static)
        for (int p = 0; p < N * C; ++p) {
            const double* ip = in + static_cast<std::size_t>(p) * H * W;
            double* op = ov + static_cast<std::size_t>(p) * 4 * H * W;
            for (int y = 0; y < 2 * H; ++y) {
                const double* irow = ip + static_cast<std::size_t>(y / 2) * W;
                double* orow = op + static_cast<std::size_t>(y) * 2 * W;
                for (int x = 0; x < 2 * W; ++x) orow[x] = irow[x / 2];
            }
        }
    }
    if (detail::wants_tape(tape, {input.requires_grad()})) {
        out.set_requires_grad(true);
        Tensor in_t = input, out_t = out;
        tape->record(out, [in_t, out_t, N, C, H, W]() mutable {
            auto ig = in_t.grad_accum();
            const double* og = out_t.grad().data();
#pragma omp parallel for schedule(static)
            for (int p = 0; p < N * C; ++p) {
                double* gp = ig.data() + static_cast<std::size_t>(p) * H * W;
                const double* op = og + static_cast<std::size_t>(p) * 4 * H * W;
                for (int y = 0; y < 2 * H; ++y) {
                    const double* orow = op + static_cast<std::size_t>(y) * 2 * W;
                    double* grow = gp + static_cast<std::size_t>(y / 2) * W;
                    for (int x = 0; x < 2 * W; ++x) grow[x / 2] += orow[x];
                }
            }
        });
    }
    return out;
}

inline Tensor add(Tape* tape, const Tensor& a, const Tensor& b) {
    if (a.shape() != b.shape()) throw ShapeError("add: shape mismatch");
    Tensor out(a.shape());
    {
        auto av = a.values();
        auto bv = b.values();
        auto ov = out.mutable_values();
        for (std::size_t i = 0; i < ov.size(); ++i) ov[i] = av[i] + bv[i];
    }
    detail::ensure_finite("add", out.values());
    if (detail::wants_tape(tape, {a.requires_grad(), b.requires_grad()})) {
        out.set_requires_grad(true);
        Tensor a_t = a, b_t = b, out_t = out;
        tape->record(out, [a_t, b_t, out_t]() mutable {
            auto og = out_t.grad();
            if (a_t.requires_grad()) {
                auto ag = a_t.grad_accum();
                for (std::size_t i = 0; i < og.size(); ++i) ag[i] += og[i];
            }
            if (b_t.requires_grad()) {
                auto bg = b_t.grad_accum();
                for (std::size_t i = 0; i < og.size(); ++i) bg[i] += og[i];
            }
        });
    }
    return out;
}

inline Tensor scale(Tape* tape, const Tensor& a, double c) {
    Tensor out(a.shape());
    {
        auto av = a.values();
        auto ov = out.mutable_values();
        for (std::size_t i = 0; i < ov.size(); ++i) ov[i] = c * av[i];
    }
    detail::ensure_finite("scale", out.values());
    if (detail::wants_tape(tape, {a.requires_grad()})) {
        out.set_requires_grad(true);
        Tensor a_t = a, out_t = out;
        tape->record(out, [a_t, out_t, c]() mutable {
            auto ag = a_t.grad_accum();
            auto og = out_t.grad();
            for (std::size_t i = 0; i < og.size(); ++i) ag[i] += c * og[i];
        });
    }
    return out;
}

inline Tensor sum(Tape* tape, const Tensor& a) {
    double s = 0.0;
    for (double v : a.values()) s += v;
    Tensor out = Tensor::scalar(s);
    detail::ensure_finite("sum", out.values());
    if (detail::wants_tape(tape, {a.requires_grad()})) {
        out.set_requires_grad(true);
        Tensor a_t = a, out_t = out;
        tape->record(out, [a_t, out_t]() mutable {
            auto ag = a_t.grad_accum();
            const double g = out_t.grad()[0];
            for (std::size_t i = 0; i < ag.size(); ++i) ag[i] += g;
        });
    }
    return out;
}

// Scalar sum of a .* w; used by the gradient checker to probe full Jacobians.
inline Tensor weighted_sum(Tape* tape, const Tensor& a, const Tensor& w) {
    if (a.shape() != w.shape()) throw ShapeError("weighted_sum: shape mismatch");
    double s = 0.0;
    {
        auto av = a.values();
        auto wv = w.values();
        for (std::size_t i = 0; i < av.size(); ++i) s += av[i] * wv[i];
    }
    Tensor out = Tensor::scalar(s);
    detail::ensure_finite("weighted_sum", out.values());
    if (detail::wants_tape(tape, {a.requires_grad(), w.requires_grad()})) {
        out.set_requires_grad(true);
        Tensor a_t = a, w_t = w, out_t = out;
        tape->record(out, [a_t, w_t, out_t]() mutable {
            const double g = out_t.grad()[0];
            if (a_t.requires_grad()) {
                auto ag = a_t.grad_accum();
                auto wv = w_t.values();
                for (std::size_t i = 0; i < ag.size(); ++i) ag[i] += g * wv[i];
            }
            if (w_t.requires_grad()) {
                auto wg = w_t.grad_accum();
                auto av = a_t.values();
                for (std::size_t i = 0; i < wg.size(); ++i) wg[i] += g * av[i];
            }
        });
    }
    return out;
}

// Squared-error loss: sum of squared differences over all elements divided by
// the leading (batch) dimension. Scalar, >= 0, zero iff pred == target.
inline Tensor mse_loss(Tape* tape, const Tensor& pred, const Tensor& target) {
    if (pred.shape() != target.shape()) throw ShapeError("mse_loss: shape mismatch");
    if (target.requires_grad())
        throw ShapeError("mse_loss: target must not require gradients");
    const double inv_n = 1.0 / static_cast<double>(pred.dim(0));
    double s = 0.0;
    {
        auto pv = pred.values();
        auto tv = target.values();
        for (std::size_t i = 0; i < pv.size(); ++i) {
            const double d = pv[i] - tv[i];
            s += d * d;
        }
    }
    Tensor out = Tensor::scalar(s * inv_n);
    detail::ensure_finite("mse_loss", out.values());
    if (detail::wants_tape(tape, {pred.requires_grad()})) {
        out.set_requires_grad(true);
        Tensor p_t = pred, t_t = target, out_t = out;
        tape->record(out, [p_t, t_t, out_t, inv_n]() mutable {
            auto pg = p_t.grad_accum();
            const double g = out_t.grad()[0];
            auto pv = p_t.values();
            auto tv = t_t.values();
            for (std::size_t i = 0; i < pg.size(); ++i)
                pg[i] += g * 2.0 * (pv[i] - tv[i]) * inv_n;
        });
    }
    return out;
}

// Mean absolute error over a batch of vectors: pred [N,k] (or a single [k]
// vector) against an equally shaped target. Subgradient at exact equality
// is 0.
inline Tensor mae_loss(Tape* tape, const Tensor& pred, const Tensor& target) {
    if (pred.shape() != target.shape()) throw ShapeError("mae_loss: shape mismatch");
    if (target.requires_grad())
        throw ShapeError("mae_loss: target must not require gradients");
    if (pred.size() == 0) throw ShapeError("mae_loss: empty input");
    const double inv = 1.0 / static_cast<double>(pred.size());
    double s = 0.0;
    {
        auto pv = pred.values();
        auto tv = target.values();
        for (std::size_t i = 0; i < pv.size(); ++i) s += std::abs(pv[i] - tv[i]);
    }
    Tensor out = Tensor::scalar(s * inv);
    detail::ensure_finite("mae_loss", out.values());
    if (detail::wants_tape(tape, {pred.requires_grad()})) {
        out.set_requires_grad(true);
        Tensor p_t = pred, t_t = target, out_t = out;
        tape->record(out, [p_t, t_t, out_t, inv]() mutable {
            auto pg = p_t.grad_accum();
            const double g = out_t.grad()[0];
            auto pv = p_t.values();
            auto tv = t_t.values();
            for (std::size_t i = 0; i < pg.size(); ++i) {
                const double d = pv[i] - tv[i];
                if (d > 0.0)
                    pg[i] += g * inv;
                else if (d < 0.0)
                    pg[i] -= g * inv;
            }
        });
    }
    return out;
}

// Plain mean absolute error between two equal-length vectors.
inline double mae(std::span<const double> a, std::span<const double> b) {
    if (a.size() != b.size()) throw ShapeError("mae: length mismatch");
    if (a.empty()) throw ShapeError("mae: vectors must have k >= 1");
    double s = 0.0;
    for (std::size_t i = 0; i < a.size(); ++i) s += std::abs(a[i] - b[i]);
    return s / static_cast<double>(a.size());
}

}  // namespace lmdet
