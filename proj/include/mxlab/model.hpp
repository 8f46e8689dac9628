// Copyright 2026 The mxlab Authors
// SPDX-License-Identifier: Apache-2.0
//
// Residual MLP student/teacher:
//   A_0 = x
//   h_k = W1_k LN_k(A_{k-1})
//   A_k = A_{k-1} + W2_k phi(h_k)
// The teacher has the same shape without layernorm and is frozen.

#pragma once

#include <cmath>
#include <functional>
#include <optional>
#include <string>
#include <string_view>
#include <utility>
#include <vector>

#include "mxlab/errors.hpp"
#include "mxlab/layers.hpp"
#include "mxlab/quant_config.hpp"
#include "mxlab/rng.hpp"
#include "mxlab/tensor.hpp"

namespace mxlab {

enum class InitScheme : std::uint8_t { kaiming_uniform, xavier_normal };

inline std::string_view to_string(InitScheme s) {
    return s == InitScheme::kaiming_uniform ? "kaiming-uniform" : "xavier-normal-gain-0.5";
}

inline std::optional<InitScheme> parse_init(std::string_view s) {
    if (s == "kaiming-uniform") return InitScheme::kaiming_uniform;
    if (s == "xavier-normal-gain-0.5" || s == "xavier-normal") return InitScheme::xavier_normal;
    return std::nullopt;
}

struct ModelConfig {
    int depth = 1;
    int d_model = 1;
    std::optional<double> hidden_mult;  // unset: 4, or 8/3 for swiglu
    Activation activation = Activation::gelu;
    bool layernorm = true;
    InitScheme init = InitScheme::kaiming_uniform;
    std::uint64_t seed = 0;

    double effective_hidden_mult() const {
        return hidden_mult.value_or(activation == Activation::swiglu ? 8.0 / 3.0 : 4.0);
    }
    std::size_t hidden() const {
        return static_cast<std::size_t>(std::llround(effective_hidden_mult() * static_cast<double>(d_model)));
    }
    /// Rows of W1: swiglu produces gate and value halves.
    std::size_t w1_rows() const { return activation == Activation::swiglu ? 2 * hidden() : hidden(); }

    void validate() const {
        if (depth < 1) throw InvalidInput("model depth must be >= 1");
        if (d_model < 1) throw InvalidInput("d_model must be >= 1");
        if (effective_hidden_mult() <= 0.0 || hidden() < 1) throw InvalidInput("hidden width must be >= 1");
    }

    friend bool operator==(const ModelConfig&, const ModelConfig&) = default;
};

template <typename T>
struct LayerParams {
    Tensor<T> W1;     // [w1_rows, d]
    Tensor<T> W2;     // [d, hidden]
    Tensor<T> gamma;  // [1, d], empty without layernorm
    Tensor<T> beta;   // [1, d], empty without layernorm
};

/// Parameters (also used for gradients and optimizer moments). Flattened
/// order, used by norms, cosines and checkpoints: for each layer k,
/// W1, W2, ln_gamma, ln_beta (the last two only with layernorm).
template <typename T>
struct Model {
    ModelConfig cfg;
    std::vector<LayerParams<T>> layers;

    template <typename F>
    void for_each(F&& f) {
        for (std::size_t k = 0; k < layers.size(); ++k) {
            const std::string p = "layer" + std::to_string(k) + ".";
            f(p + "W1", layers[k].W1);
            f(p + "W2", layers[k].W2);
            if (cfg.layernorm) {
                f(p + "ln_gamma", layers[k].gamma);
                f(p + "ln_beta", layers[k].beta);
            }
        }
    }
    template <typename F>
    void for_each(F&& f) const {
        const_cast<Model*>(this)->for_each([&](const std::string& n, Tensor<T>& t) { f(n, std::as_const(t)); });
    }

    std::vector<Tensor<T>*> tensors() {
        std::vector<Tensor<T>*> out;
        for_each([&](const std::string&, Tensor<T>& t) { out.push_back(&t); });
        return out;
    }
    std::vector<const Tensor<T>*> tensors() const {
        std::vector<const Tensor<T>*> out;
        for_each([&](const std::string&, const Tensor<T>& t) { out.push_back(&t); });
        return out;
    }

    std::size_t parameter_count() const {
        std::size_t n = 0;
        for (const auto* t : tensors()) n += t->size();
        return n;
    }

    Model zeros_like() const {
        Model z = *this;
        for (auto* t : z.tensors()) t->fill(T{0});
        return z;
    }

    std::vector<double> flatten() const {
        std::vector<double> out;
        out.reserve(parameter_count());
        for (const auto* t : tensors()) out.insert(out.end(), t->vec().begin(), t->vec().end());
        return out;
    }

    void assign_flat(std::span<const double> v) {
        if (v.size() != parameter_count()) throw ShapeMismatch("flat parameter vector has wrong length");
        std::size_t i = 0;
        for (auto* t : tensors())
            for (auto& x : t->vec()) x = static_cast<T>(v[i++]);
    }

    template <typename U>
    Model<U> cast() const {
        Model<U> m{cfg, {}};
        for (const auto& l : layers) m.layers.push_back({l.W1.template cast<U>(), l.W2.template cast<U>(),
                                                          l.gamma.template cast<U>(), l.beta.template cast<U>()});
        return m;
    }

    friend bool operator==(const Model& a, const Model& b) {
        if (!(a.cfg == b.cfg) || a.layers.size() != b.layers.size()) return false;
        for (std::size_t k = 0; k < a.layers.size(); ++k) {
            const auto &x = a.layers[k], &y = b.layers[k];
            if (!(x.W1 == y.W1 && x.W2 == y.W2 && x.gamma == y.gamma && x.beta == y.beta)) return false;
        }
        return true;
    }
};

namespace detail {

template <typename T>
void init_weight(Tensor<T>& w, InitScheme scheme, std::uint64_t seed, Stream stream, std::uint32_t param_id) {
    const CounterRng rng(seed, stream, param_id);
    const double fan_out = static_cast<double>(w.rows()), fan_in = static_cast<double>(w.cols());
    if (scheme == InitScheme::kaiming_uniform) {
        const double bound = 1.0 / std::sqrt(fan_in);
        rng.fill_uniform(w.span(), -bound, bound);
    } else {
        rng.fill_normal(w.span(), 0.0, 0.5 * std::sqrt(2.0 / (fan_in + fan_out)));
    }
}

template <typename T>
Model<T> build_model(const ModelConfig& cfg, std::uint64_t seed, Stream stream) {
    cfg.validate();
    Model<T> m{cfg, {}};
    const auto d = static_cast<std::size_t>(cfg.d_model);
    for (int k = 0; k < cfg.depth; ++k) {
        LayerParams<T> l{Tensor<T>::matrix(cfg.w1_rows(), d), Tensor<T>::matrix(d, cfg.hidden()), {}, {}};
        init_weight(l.W1, cfg.init, seed, stream, static_cast<std::uint32_t>(4 * k));
        init_weight(l.W2, cfg.init, seed, stream, static_cast<std::uint32_t>(4 * k + 1));
        if (cfg.layernorm) {
            l.gamma = Tensor<T>({1, d}, T{1});
            l.beta = Tensor<T>({1, d}, T{0});
        }
        m.layers.push_back(std::move(l));
    }
    return m;
}

}  // namespace detail

template <typename T>
Model<T> build_student(const ModelConfig& cfg) {
    return detail::build_model<T>(cfg, cfg.seed, Stream::student_init);
}

/// Same shape as the student, no layernorm, independent seed.
template <typename T>
Model<T> build_teacher(const ModelConfig& cfg, std::uint64_t teacher_seed) {
    ModelConfig t = cfg;
    t.layernorm = false;
    t.seed = teacher_seed;
    return detail::build_model<T>(t, teacher_seed, Stream::teacher_init);
}

// ---------------------------------------------------------------------------
// Forward / backward

/// Last-bin counts for one layer's quantization sites.
struct SiteStats {
    QuantStats ln_gamma, ln_beta, act_ln_out, act_hidden;
};

inline std::vector<std::pair<std::string, QuantStats>> named_site_stats(const std::vector<SiteStats>& s) {
    std::vector<std::pair<std::string, QuantStats>> out;
    for (std::size_t k = 0; k < s.size(); ++k) {
        const std::string p = "layer" + std::to_string(k) + ".";
        out.emplace_back(p + "ln_gamma", s[k].ln_gamma);
        out.emplace_back(p + "ln_beta", s[k].ln_beta);
        out.emplace_back(p + "fwd_act_ln_out", s[k].act_ln_out);
        out.emplace_back(p + "fwd_act_hidden", s[k].act_hidden);
    }
    return out;
}

template <typename T>
struct LayerCache {
    LayerNormCache<T> ln;
    Tensor<T> u;  // matmul input (layernorm output, or A_{k-1} without layernorm)
    Tensor<T> h;
    Tensor<T> p;
};

template <typename T>
struct ForwardCache {
    std::vector<LayerCache<T>> layers;
};

inline constexpr double kLayerNormEps = 1e-5;

template <typename T>
Tensor<T> forward(const Model<T>& m, const Tensor<T>& x, const QuantConfig& q, ForwardCache<T>* cache = nullptr,
                  std::vector<SiteStats>* stats = nullptr) {
    if (x.rank() != 2 || x.cols() != static_cast<std::size_t>(m.cfg.d_model))
        throw ShapeMismatch("input shape " + shape_string(x.shape()) + " does not match d_model " +
                            std::to_string(m.cfg.d_model));
    const bool bf16_ops = q.uses_bf16_vector_ops();
    const QuantFormat fa = q.at(QuantRole::fwd_activation), fw = q.at(QuantRole::fwd_weight);
    if (cache) cache->layers.assign(m.layers.size(), {});
    if (stats) stats->assign(m.layers.size(), {});
    Tensor<T> a = x;
    const ValueRounder bf(kBF16, RoundingMode::nearest_even, false);
    for (std::size_t k = 0; k < m.layers.size(); ++k) {
        const auto& l = m.layers[k];
        LayerCache<T> local;
        LayerCache<T>& c = cache ? cache->layers[k] : local;
        SiteStats* st = stats ? &(*stats)[k] : nullptr;
        if (m.cfg.layernorm) {
            c.u = layernorm_fwd(a, l.gamma, l.beta, kLayerNormEps, q.at(QuantRole::ln_affine), bf16_ops, c.ln,
                                st ? &st->ln_gamma : nullptr, st ? &st->ln_beta : nullptr);
        } else {
            c.u = a;
        }
        c.h = matmul_q(c.u, Trans::no, l.W1, Trans::yes, fa, fw, st ? &st->act_ln_out : nullptr);
        c.p = activation_fwd(m.cfg.activation, c.h);
        const Tensor<T> o = matmul_q(c.p, Trans::no, l.W2, Trans::yes, fa, fw, st ? &st->act_hidden : nullptr);
        if (bf16_ops) {
            for (std::size_t i = 0; i < a.size(); ++i)
                a[i] = static_cast<T>(bf(bf(static_cast<double>(a[i])) + bf(static_cast<double>(o[i]))));
        } else {
            for (std::size_t i = 0; i < a.size(); ++i) a[i] += o[i];
        }
    }
    return a;
}

/// Gradients of the loss w.r.t. every parameter given dL/dA_L. Backward
/// matmuls quantize the upstream gradient as grad_output, stored forward
/// activations as grad_input and weights as bwd_weight; the residual path and
/// layernorm backward stay in working precision.
template <typename T>
Model<T> backward(const Model<T>& m, const ForwardCache<T>& cache, const Tensor<T>& dout, const QuantConfig& q) {
    const QuantFormat go = q.at(QuantRole::grad_output), gi = q.at(QuantRole::grad_input),
                      bw = q.at(QuantRole::bwd_weight);
    Model<T> g{m.cfg, std::vector<LayerParams<T>>(m.layers.size())};
    Tensor<T> da = dout;
    for (std::size_t k = m.layers.size(); k-- > 0;) {
        const auto& l = m.layers[k];
        const auto& c = cache.layers[k];
        auto& gl = g.layers[k];
        const Tensor<T> dp = matmul_q(da, Trans::no, l.W2, Trans::no, go, bw);
        gl.W2 = matmul_q(da, Trans::yes, c.p, Trans::no, go, gi);
        const Tensor<T> dh = activation_bwd(m.cfg.activation, c.h, dp);
        const Tensor<T> du = matmul_q(dh, Trans::no, l.W1, Trans::no, go, bw);
        gl.W1 = matmul_q(dh, Trans::yes, c.u, Trans::no, go, gi);
        if (m.cfg.layernorm) {
            auto lg = layernorm_bwd(c.ln, du);
            gl.gamma = std::move(lg.dgamma);
            gl.beta = std::move(lg.dbeta);
            for (std::size_t i = 0; i < da.size(); ++i) da[i] += lg.dx[i];
        } else {
            for (std::size_t i = 0; i < da.size(); ++i) da[i] += du[i];
        }
    }
    return g;
}

template <typename T>
struct LossAndGrad {
    double loss = 0.0;
    Model<T> grad;
    std::vector<SiteStats> stats;
};

template <typename T>
LossAndGrad<T> loss_and_grad(const Model<T>& m, const Tensor<T>& x, const Tensor<T>& y, const QuantConfig& q) {
    ForwardCache<T> cache;
    LossAndGrad<T> r;
    const Tensor<T> out = forward(m, x, q, &cache, &r.stats);
    auto l = mse_loss(out, y);
    r.loss = l.loss;
    r.grad = backward(m, cache, l.dpred, q);
    return r;
}

template <typename T>
double loss_only(const Model<T>& m, const Tensor<T>& x, const Tensor<T>& y, const QuantConfig& q) {
    return mse_loss(forward(m, x, q), y).loss;
}

// ---------------------------------------------------------------------------
// Data

template <typename T>
struct Batch {
    Tensor<T> x;
    Tensor<T> y;
};

/// x ~ N(0, I) keyed by (data_seed, step); y = teacher(x) + sigma * noise from
/// a parallel stream. Pure function of its arguments.
template <typename T>
Batch<T> generate_batch(std::uint64_t data_seed, std::uint64_t step, std::size_t batch, const Model<T>& teacher,
                        double label_noise) {
    const auto d = static_cast<std::size_t>(teacher.cfg.d_model);
    const auto lane = static_cast<std::uint32_t>(step);
    Batch<T> b{Tensor<T>::matrix(batch, d), {}};
    CounterRng(data_seed, Stream::inputs, lane).fill_normal(b.x.span());
    b.y = forward(teacher, b.x, QuantConfig{});
    if (label_noise != 0.0) {
        Tensor<T> noise = Tensor<T>::matrix(batch, d);
        CounterRng(data_seed, Stream::label_noise, lane).fill_normal(noise.span());
        for (std::size_t i = 0; i < noise.size(); ++i)
            b.y[i] = static_cast<T>(static_cast<double>(b.y[i]) + label_noise * static_cast<double>(noise[i]));
    }
    return b;
}

// ---------------------------------------------------------------------------
// Flat-vector helpers over parameter sets (fixed flattening order)

template <typename T>
double dot(const Model<T>& a, const Model<T>& b) {
    const auto ta = a.tensors(), tb = b.tensors();
    if (ta.size() != tb.size()) throw ShapeMismatch("parameter sets differ in layout");
    double s = 0.0;
    for (std::size_t i = 0; i < ta.size(); ++i) {
        if (ta[i]->size() != tb[i]->size()) throw ShapeMismatch("parameter sets differ in layout");
        for (std::size_t j = 0; j < ta[i]->size(); ++j) s += static_cast<double>((*ta[i])[j]) * static_cast<double>((*tb[i])[j]);
    }
    return s;
}

template <typename T>
double norm(const Model<T>& a) {
    return std::sqrt(dot(a, a));
}

/// ||a - b||_2 accumulated in double.
template <typename T>
double distance(const Model<T>& a, const Model<T>& b) {
    const auto ta = a.tensors(), tb = b.tensors();
    if (ta.size() != tb.size()) throw ShapeMismatch("parameter sets differ in layout");
    double s = 0.0;
    for (std::size_t i = 0; i < ta.size(); ++i)
        for (std::size_t j = 0; j < ta[i]->size(); ++j) {
            const double d = static_cast<double>((*ta[i])[j]) - static_cast<double>((*tb[i])[j]);
            s += d * d;
        }
    return std::sqrt(s);
}

}  // namespace mxlab
