// Copyright 2026 The mxlab Authors
// SPDX-License-Identifier: Apache-2.0

#pragma once

#include <cmath>
#include <optional>
#include <string_view>

#include "mxlab/model.hpp"

namespace mxlab {

enum class OptimizerKind : std::uint8_t { adam, sgd, sgd_momentum };

inline std::string_view to_string(OptimizerKind k) {
    switch (k) {
        case OptimizerKind::adam: return "adam";
        case OptimizerKind::sgd: return "sgd";
        case OptimizerKind::sgd_momentum: return "sgd-momentum";
    }
    return "?";
}

inline std::optional<OptimizerKind> parse_optimizer(std::string_view s) {
    if (s == "adam") return OptimizerKind::adam;
    if (s == "sgd") return OptimizerKind::sgd;
    if (s == "sgd-momentum") return OptimizerKind::sgd_momentum;
    return std::nullopt;
}

struct AdamHyper {
    double beta1 = 0.9;
    double beta2 = 0.999;
    double eps = 1e-8;
};
inline constexpr double kMomentum = 0.9;

/// Optimizer moments live in working precision and are never quantized.
/// SGD momentum follows the common convention buf = mu * buf + g, w -= lr * buf.
template <typename T>
struct OptimizerState {
    OptimizerKind kind = OptimizerKind::adam;
    AdamHyper adam{};
    std::uint64_t t = 0;  // completed updates
    Model<T> m;           // Adam first moment / momentum buffer
    Model<T> v;           // Adam second moment

    static OptimizerState init(OptimizerKind kind, const Model<T>& params) {
        OptimizerState s;
        s.kind = kind;
        if (kind != OptimizerKind::sgd) s.m = params.zeros_like();
        if (kind == OptimizerKind::adam) s.v = params.zeros_like();
        return s;
    }

    void step(Model<T>& params, const Model<T>& grads, double lr) {
        ++t;
        auto pw = params.tensors();
        const auto pg = grads.tensors();
        if (pw.size() != pg.size()) throw ShapeMismatch("gradient layout does not match parameters");
        if (kind == OptimizerKind::sgd) {
            for (std::size_t i = 0; i < pw.size(); ++i)
                for (std::size_t j = 0; j < pw[i]->size(); ++j)
                    (*pw[i])[j] = static_cast<T>(static_cast<double>((*pw[i])[j]) - lr * static_cast<double>((*pg[i])[j]));
            return;
        }
        auto pm = m.tensors();
        if (kind == OptimizerKind::sgd_momentum) {
            for (std::size_t i = 0; i < pw.size(); ++i)
                for (std::size_t j = 0; j < pw[i]->size(); ++j) {
                    const T buf = static_cast<T>(kMomentum * static_cast<double>((*pm[i])[j]) + static_cast<double>((*pg[i])[j]));
                    (*pm[i])[j] = buf;
                    (*pw[i])[j] = static_cast<T>(static_cast<double>((*pw[i])[j]) - lr * static_cast<double>(buf));
                }
            return;
        }
        auto pv = v.tensors();
        const double b1 = adam.beta1, b2 = adam.beta2;
        const double c1 = 1.0 - std::pow(b1, static_cast<double>(t));
        const double c2 = 1.0 - std::pow(b2, static_cast<double>(t));
        for (std::size_t i = 0; i < pw.size(); ++i)
            for (std::size_t j = 0; j < pw[i]->size(); ++j) {
                const double g = static_cast<double>((*pg[i])[j]);
                const T mj = static_cast<T>(b1 * static_cast<double>((*pm[i])[j]) + (1.0 - b1) * g);
                const T vj = static_cast<T>(b2 * static_cast<double>((*pv[i])[j]) + (1.0 - b2) * g * g);
                (*pm[i])[j] = mj;
                (*pv[i])[j] = vj;
                const double mhat = static_cast<double>(mj) / c1;
                const double vhat = static_cast<double>(vj) / c2;
                (*pw[i])[j] = static_cast<T>(static_cast<double>((*pw[i])[j]) - lr * mhat / (std::sqrt(vhat) + adam.eps));
            }
    }
};

}  // namespace mxlab
