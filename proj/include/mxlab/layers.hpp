// Copyright 2026 The mxlab Authors
// SPDX-License-Identifier: Apache-2.0
//
// Hand-written forward/backward kernels for the residual MLP: quantized
// matmul, layernorm, activations and the MSE loss.

#pragma once

#include <cmath>
#include <numbers>
#include <optional>
#include <stdexcept>
#include <string>

#include "mxlab/errors.hpp"
#include "mxlab/mx_block.hpp"
#include "mxlab/quant_config.hpp"
#include "mxlab/tensor.hpp"

namespace mxlab {

/// Raised when a non-finite value reaches a matmul operand.
class NonFiniteValue : public std::runtime_error {
public:
    using std::runtime_error::runtime_error;
};

enum class Trans : bool { no = false, yes = true };

/// Returns `x` unchanged for QuantFormat::none, otherwise writes the
/// quantize->dequantize image of `x` into `scratch` and returns it. MX blocks
/// run along `axis` of the stored (untransposed) matrix.
template <typename T>
const Tensor<T>& quantized(const Tensor<T>& x, const QuantFormat& f, std::size_t axis, Tensor<T>& scratch,
                           QuantStats* stats = nullptr) {
    if (f.is_none()) return x;
    if (scratch.shape() != x.shape()) scratch = Tensor<T>(x.shape());
    if (f.kind == QuantFormat::Kind::bf16) {
        round_bf16(x.data(), scratch.data(), x.size());
    } else {
        fake_quantize(x.data(), scratch.data(), x.rows(), x.cols(), axis, f.mx, stats);
    }
    return scratch;
}

namespace detail {

template <typename T>
void require_finite(const Tensor<T>& t, const char* operand) {
    for (const T& v : t.vec()) {
        if (!std::isfinite(v)) throw NonFiniteValue(std::string("non-finite value in matmul operand ") + operand);
    }
}

}  // namespace detail

/// op(A) * op(B). Each operand is quantized independently per its format,
/// blocked along the contraction dimension, and the product is accumulated in
/// working precision without re-quantization.
template <typename T>
Tensor<T> matmul_q(const Tensor<T>& a, Trans ta, const Tensor<T>& b, Trans tb, const QuantFormat& qa,
                   const QuantFormat& qb, QuantStats* stats_a = nullptr, QuantStats* stats_b = nullptr) {
    if (a.rank() != 2 || b.rank() != 2) throw ShapeMismatch("matmul_q expects rank-2 operands");
    const std::size_t m = ta == Trans::no ? a.rows() : a.cols();
    const std::size_t ka = ta == Trans::no ? a.cols() : a.rows();
    const std::size_t kb = tb == Trans::no ? b.rows() : b.cols();
    const std::size_t n = tb == Trans::no ? b.cols() : b.rows();
    if (ka != kb)
        throw ShapeMismatch("matmul_q inner dimensions differ: " + shape_string(a.shape()) + " x " +
                            shape_string(b.shape()));
    detail::require_finite(a, "A");
    detail::require_finite(b, "B");
    Tensor<T> sa, sb;
    const Tensor<T>& qa_t = quantized(a, qa, ta == Trans::no ? 1 : 0, sa, stats_a);
    const Tensor<T>& qb_t = quantized(b, qb, tb == Trans::no ? 0 : 1, sb, stats_b);
    Tensor<T> c = Tensor<T>::matrix(m, n);
    auto cm = as_matrix(c);
    const auto am = as_matrix(qa_t);
    const auto bm = as_matrix(qb_t);
    if (ta == Trans::no && tb == Trans::no) cm.noalias() = am * bm;
    else if (ta == Trans::no) cm.noalias() = am * bm.transpose();
    else if (tb == Trans::no) cm.noalias() = am.transpose() * bm;
    else cm.noalias() = am.transpose() * bm.transpose();
    return c;
}

template <typename T>
Tensor<T> matmul_q(const Tensor<T>& a, const Tensor<T>& b, const QuantPoint& qa, const QuantPoint& qb) {
    return matmul_q(a, Trans::no, b, Trans::no, qa.format, qb.format);
}

// ---------------------------------------------------------------------------
// Layer normalization

template <typename T>
struct LayerNormCache {
    Tensor<T> xhat;         // normalized input [B, d]
    std::vector<T> rstd;    // 1 / sqrt(var + eps) per row
    Tensor<T> gamma_eff;    // gamma as used in the forward pass (after quantization)
};

/// y = gamma * (x - mean) / sqrt(var + eps) + beta with gamma/beta passed
/// through `q_ln`. With `bf16_ops` every operand and every intermediate result
/// of the vector arithmetic is rounded to bfloat16; reductions accumulate in
/// double and round their result.
template <typename T>
Tensor<T> layernorm_fwd(const Tensor<T>& x, const Tensor<T>& gamma, const Tensor<T>& beta, double eps,
                        const QuantFormat& q_ln, bool bf16_ops, LayerNormCache<T>& cache,
                        QuantStats* gamma_stats = nullptr, QuantStats* beta_stats = nullptr) {
    const std::size_t rows = x.rows(), d = x.cols();
    if (gamma.size() != d || beta.size() != d) throw ShapeMismatch("layernorm affine length differs from feature dim");
    Tensor<T> sg, sbeta;
    const Tensor<T>& g = quantized(gamma, q_ln, 1, sg, gamma_stats);
    const Tensor<T>& bt = quantized(beta, q_ln, 1, sbeta, beta_stats);
    cache.gamma_eff = g;
    cache.xhat = Tensor<T>::matrix(rows, d);
    cache.rstd.assign(rows, T{0});
    Tensor<T> y = Tensor<T>::matrix(rows, d);
    const ValueRounder bf(kBF16, RoundingMode::nearest_even, false);
    auto r = [&](double v) -> double { return bf16_ops ? bf(v) : v; };
    std::vector<double> row(d);
    for (std::size_t i = 0; i < rows; ++i) {
        const T* xi = x.data() + i * d;
        double sum = 0.0;
        for (std::size_t j = 0; j < d; ++j) {
            row[j] = r(static_cast<double>(xi[j]));
            sum += row[j];
        }
        const double mean = r(sum / static_cast<double>(d));
        double sq = 0.0;
        for (std::size_t j = 0; j < d; ++j) {
            row[j] = r(row[j] - mean);
            sq += row[j] * row[j];
        }
        const double var = r(sq / static_cast<double>(d));
        const T rstd = static_cast<T>(1.0 / std::sqrt(var + eps));
        cache.rstd[i] = rstd;
        T* xh = cache.xhat.data() + i * d;
        T* yi = y.data() + i * d;
        for (std::size_t j = 0; j < d; ++j) {
            xh[j] = static_cast<T>(r(row[j] * static_cast<double>(rstd)));
            if (bf16_ops) {
                yi[j] = static_cast<T>(r(r(static_cast<double>(g[j]) * static_cast<double>(xh[j])) + r(static_cast<double>(bt[j]))));
            } else {
                yi[j] = g[j] * xh[j] + bt[j];
            }
        }
    }
    return y;
}

template <typename T>
struct LayerNormGrads {
    Tensor<T> dx;
    Tensor<T> dgamma;
    Tensor<T> dbeta;
};

/// Analytic gradient of the forward expression with the effective gamma.
template <typename T>
LayerNormGrads<T> layernorm_bwd(const LayerNormCache<T>& cache, const Tensor<T>& dy) {
    const std::size_t rows = dy.rows(), d = dy.cols();
    LayerNormGrads<T> g{Tensor<T>::matrix(rows, d), Tensor<T>({1, d}), Tensor<T>({1, d})};
    std::vector<double> dgamma(d, 0.0), dbeta(d, 0.0);
    for (std::size_t i = 0; i < rows; ++i) {
        const T* dyi = dy.data() + i * d;
        const T* xh = cache.xhat.data() + i * d;
        double s1 = 0.0, s2 = 0.0;
        for (std::size_t j = 0; j < d; ++j) {
            const double dxh = static_cast<double>(dyi[j]) * static_cast<double>(cache.gamma_eff[j]);
            s1 += dxh;
            s2 += dxh * static_cast<double>(xh[j]);
            dgamma[j] += static_cast<double>(dyi[j]) * static_cast<double>(xh[j]);
            dbeta[j] += static_cast<double>(dyi[j]);
        }
        const double inv_d = 1.0 / static_cast<double>(d);
        const double rstd = static_cast<double>(cache.rstd[i]);
        T* dxi = g.dx.data() + i * d;
        for (std::size_t j = 0; j < d; ++j) {
            const double dxh = static_cast<double>(dyi[j]) * static_cast<double>(cache.gamma_eff[j]);
            dxi[j] = static_cast<T>(rstd * (dxh - s1 * inv_d - static_cast<double>(xh[j]) * s2 * inv_d));
        }
    }
    for (std::size_t j = 0; j < d; ++j) {
        g.dgamma[j] = static_cast<T>(dgamma[j]);
        g.dbeta[j] = static_cast<T>(dbeta[j]);
    }
    return g;
}

// ---------------------------------------------------------------------------
// Activations

enum class Activation : std::uint8_t { relu, gelu, swiglu };

inline std::string_view to_string(Activation a) {
    switch (a) {
        case Activation::relu: return "relu";
        case Activation::gelu: return "gelu";
        case Activation::swiglu: return "swiglu";
    }
    return "?";
}

inline std::optional<Activation> parse_activation(std::string_view s) {
    if (s == "relu") return Activation::relu;
    if (s == "gelu") return Activation::gelu;
    if (s == "swiglu") return Activation::swiglu;
    return std::nullopt;
}

namespace detail {

inline double gelu(double x) { return 0.5 * x * std::erfc(-x * std::numbers::sqrt2 / 2.0); }
inline double gelu_grad(double x) {
    const double cdf = 0.5 * std::erfc(-x * std::numbers::sqrt2 / 2.0);
    const double pdf = std::exp(-0.5 * x * x) * (std::numbers::inv_sqrtpi / std::numbers::sqrt2);
    return cdf + x * pdf;
}
inline double sigmoid(double x) { return 1.0 / (1.0 + std::exp(-x)); }
inline double silu(double x) { return x * sigmoid(x); }
inline double silu_grad(double x) {
    const double s = sigmoid(x);
    return s * (1.0 + x * (1.0 - s));
}

}  // namespace detail

/// relu / exact-erf gelu elementwise; swiglu splits the last dim into
/// [gate | value] halves and returns silu(gate) * value.
template <typename T>
Tensor<T> activation_fwd(Activation kind, const Tensor<T>& h) {
    if (kind == Activation::swiglu) {
        if (h.cols() % 2 != 0) throw ShapeMismatch("swiglu needs an even last dimension, got " + std::to_string(h.cols()));
        const std::size_t rows = h.rows(), half = h.cols() / 2;
        Tensor<T> out = Tensor<T>::matrix(rows, half);
        for (std::size_t i = 0; i < rows; ++i) {
            const T* hi = h.data() + i * h.cols();
            T* oi = out.data() + i * half;
            for (std::size_t j = 0; j < half; ++j)
                oi[j] = static_cast<T>(detail::silu(static_cast<double>(hi[j])) * static_cast<double>(hi[half + j]));
        }
        return out;
    }
    Tensor<T> out(h.shape());
    for (std::size_t i = 0; i < h.size(); ++i) {
        const double x = static_cast<double>(h[i]);
        out[i] = static_cast<T>(kind == Activation::relu ? (x > 0.0 ? x : 0.0) : detail::gelu(x));
    }
    return out;
}

/// Gradient w.r.t. the activation input `h` (the cache is the forward input).
template <typename T>
Tensor<T> activation_bwd(Activation kind, const Tensor<T>& h, const Tensor<T>& dout) {
    Tensor<T> dh(h.shape());
    if (kind == Activation::swiglu) {
        const std::size_t rows = h.rows(), half = h.cols() / 2;
        for (std::size_t i = 0; i < rows; ++i) {
            const T* hi = h.data() + i * h.cols();
            const T* di = dout.data() + i * half;
            T* gi = dh.data() + i * h.cols();
            for (std::size_t j = 0; j < half; ++j) {
                const double gate = static_cast<double>(hi[j]), value = static_cast<double>(hi[half + j]);
                const double d = static_cast<double>(di[j]);
                gi[j] = static_cast<T>(d * value * detail::silu_grad(gate));
                gi[half + j] = static_cast<T>(d * detail::silu(gate));
            }
        }
        return dh;
    }
    for (std::size_t i = 0; i < h.size(); ++i) {
        const double x = static_cast<double>(h[i]);
        const double g = kind == Activation::relu ? (x > 0.0 ? 1.0 : 0.0) : detail::gelu_grad(x);
        dh[i] = static_cast<T>(static_cast<double>(dout[i]) * g);
    }
    return dh;
}

// ---------------------------------------------------------------------------
// Loss

template <typename T>
struct LossResult {
    double loss;
    Tensor<T> dpred;
};

/// Mean squared error over all elements; dpred = 2 (pred - target) / count.
template <typename T>
LossResult<T> mse_loss(const Tensor<T>& pred, const Tensor<T>& target) {
    if (pred.shape() != target.shape())
        throw ShapeMismatch("mse_loss shapes differ: " + shape_string(pred.shape()) + " vs " + shape_string(target.shape()));
    LossResult<T> r{0.0, Tensor<T>(pred.shape())};
    const double n = static_cast<double>(pred.size());
    double sum = 0.0;
    for (std::size_t i = 0; i < pred.size(); ++i) {
        const double diff = static_cast<double>(pred[i]) - static_cast<double>(target[i]);
        sum += diff * diff;
        r.dpred[i] = static_cast<T>(2.0 * diff / n);
    }
    r.loss = sum / n;
    return r;
}

}  // namespace mxlab
