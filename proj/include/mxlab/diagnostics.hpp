// Copyright 2026 The mxlab Authors
// SPDX-License-Identifier: Apache-2.0
//
// Gradient-noise and instability analytics over gradients and run logs.

#pragma once

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <functional>
#include <ostream>
#include <span>
#include <string>
#include <vector>

#include "mxlab/errors.hpp"
#include "mxlab/model.hpp"
#include "mxlab/rng.hpp"
#include "mxlab/run_log.hpp"

namespace mxlab {

/// ||eps|| / ||g||: lower bound on the operator norm of the multiplicative
/// noise zeta in g_lp = (1 + zeta) g_hp.
inline double zeta_lower_bound(double eps_norm, double g_norm) {
    if (!(g_norm > 0.0)) throw UndefinedRatio("zeta lower bound needs a nonzero reference gradient norm");
    if (eps_norm < 0.0) throw InvalidInput("eps norm must be non-negative");
    return eps_norm / g_norm;
}

/// <a, b> / (|a| |b|), clamped to [-1, 1]. The denominator is
/// sqrt(|a|^2 |b|^2) so identical vectors give exactly 1.
inline double cosine_alignment(std::span<const double> a, std::span<const double> b) {
    if (a.size() != b.size()) throw ShapeMismatch("cosine_alignment of vectors with different lengths");
    double ab = 0.0, aa = 0.0, bb = 0.0;
    for (std::size_t i = 0; i < a.size(); ++i) {
        ab += a[i] * b[i];
        aa += a[i] * a[i];
        bb += b[i] * b[i];
    }
    if (aa == 0.0 || bb == 0.0) throw UndefinedRatio("cosine of a zero vector");
    return std::clamp(ab / std::sqrt(aa * bb), -1.0, 1.0);
}

/// Same, over parameter sets flattened in the model's documented order.
template <typename T>
double cosine_alignment(const Model<T>& a, const Model<T>& b) {
    const double ab = dot(a, b), aa = dot(a, a), bb = dot(b, b);
    if (aa == 0.0 || bb == 0.0) throw UndefinedRatio("cosine of a zero vector");
    return std::clamp(ab / std::sqrt(aa * bb), -1.0, 1.0);
}

// ---------------------------------------------------------------------------
// Spikes

inline constexpr double kSpikeFactor = 100.0;

struct SpikeReport {
    std::vector<std::size_t> spike_steps;
    double factor = kSpikeFactor;
};

/// Indices t >= 1 with loss[t] > factor * loss[t-1].
inline SpikeReport detect_spikes(std::span<const double> losses, double factor = kSpikeFactor) {
    if (losses.empty()) throw InvalidInput("detect_spikes needs a nonempty loss series");
    for (std::size_t t = 0; t < losses.size(); ++t) {
        if (!(losses[t] > 0.0))
            throw InvalidInput("loss series must be positive; index " + std::to_string(t) + " is " +
                               std::to_string(losses[t]));
    }
    SpikeReport r{{}, factor};
    for (std::size_t t = 1; t < losses.size(); ++t)
        if (losses[t] > factor * losses[t - 1]) r.spike_steps.push_back(t);
    return r;
}

// ---------------------------------------------------------------------------
// Smoothing

inline constexpr double kEmaHalfLife = 100.0;

/// Exponential moving average with a half-life in steps, seeded by the first
/// value. Non-finite inputs propagate.
class Ema {
public:
    explicit Ema(double half_life = kEmaHalfLife) : alpha_(1.0 - std::exp2(-1.0 / half_life)) {
        if (!(half_life > 0.0)) throw InvalidInput("EMA half-life must be positive");
    }
    double update(double x) {
        value_ = started_ ? value_ + alpha_ * (x - value_) : x;
        started_ = true;
        return value_;
    }
    double value() const { return value_; }
    bool started() const { return started_; }

private:
    double alpha_;
    double value_ = 0.0;
    bool started_ = false;
};

inline std::vector<double> ema_series(std::span<const double> xs, double half_life = kEmaHalfLife) {
    Ema e(half_life);
    std::vector<double> out;
    out.reserve(xs.size());
    for (double x : xs) out.push_back(e.update(x));
    return out;
}

// ---------------------------------------------------------------------------
// Curvature

struct LambdaOptions {
    int max_iterations = 30;
    double tolerance = 1e-3;   // relative change between successive estimates
    double rel_delta = 1e-4;   // finite-difference step = rel_delta * |w| / |v|
    std::uint64_t seed = 0;    // start vector
};

struct LambdaResult {
    double lambda_max = 0.0;
    int iterations = 0;
    bool converged = false;
};

using GradientFn = std::function<std::vector<double>(const std::vector<double>&)>;

/// Power iteration on H v = (g(w + d v) - g(w - d v)) / (2 d), Rayleigh quotient
/// estimate. Returns the last estimate with converged = false if the relative
/// change never drops below the tolerance.
inline LambdaResult estimate_lambda_max(const GradientFn& grad, const std::vector<double>& w,
                                        const LambdaOptions& opt = {}) {
    const std::size_t n = w.size();
    if (n == 0) throw InvalidInput("estimate_lambda_max on an empty parameter vector");
    std::vector<double> v(n);
    CounterRng(opt.seed, Stream::lambda_probe, 0).fill_normal(std::span<double>(v));
    auto normalize = [](std::vector<double>& x) {
        double s = 0.0;
        for (double e : x) s += e * e;
        const double nrm = std::sqrt(s);
        if (!(nrm > 0.0) || !std::isfinite(nrm)) return false;
        for (double& e : x) e /= nrm;
        return true;
    };
    normalize(v);
    double wn = 0.0;
    for (double e : w) wn += e * e;
    wn = std::sqrt(wn);
    const double delta = opt.rel_delta * (wn > 0.0 ? wn : 1.0);  // |v| = 1

    LambdaResult r;
    std::vector<double> wp(n), wm(n), hv(n);
    double prev = 0.0;
    for (int it = 1; it <= opt.max_iterations; ++it) {
        for (std::size_t i = 0; i < n; ++i) {
            wp[i] = w[i] + delta * v[i];
            wm[i] = w[i] - delta * v[i];
        }
        const auto gp = grad(wp), gm = grad(wm);
        double rq = 0.0;
        for (std::size_t i = 0; i < n; ++i) {
            hv[i] = (gp[i] - gm[i]) / (2.0 * delta);
            rq += v[i] * hv[i];
        }
        r.lambda_max = rq;
        r.iterations = it;
        if (it > 1 && std::fabs(rq - prev) < opt.tolerance * std::fabs(rq)) {
            r.converged = true;
            break;
        }
        prev = rq;
        v = hv;
        if (!normalize(v)) break;
    }
    return r;
}

/// Top Hessian eigenvalue of the unquantized training loss at the model's
/// parameters on one batch, with gradients computed in 64-bit.
template <typename T>
LambdaResult estimate_lambda_max(const Model<T>& model, const Batch<T>& batch, const LambdaOptions& opt = {}) {
    Model<double> work = model.template cast<double>();
    const Tensor<double> x = batch.x.template cast<double>(), y = batch.y.template cast<double>();
    const QuantConfig exact{};
    GradientFn g = [&](const std::vector<double>& w) {
        work.assign_flat(w);
        return loss_and_grad(work, x, y, exact).grad.flatten();
    };
    return estimate_lambda_max(g, work.flatten(), opt);
}

// ---------------------------------------------------------------------------
// Stability margin

struct StabilityReport {
    double lambda_max = 0.0;
    double eta = 0.0;
    double zeta_lower = 0.0;
    double margin = 0.0;
};

/// |1 - eta lambda| + eta zeta lambda. Telemetry only; compare against 1.
inline double stability_margin(double eta, double lambda_max, double zeta_lower) {
    if (eta < 0.0 || lambda_max < 0.0 || zeta_lower < 0.0)
        throw InvalidInput("stability_margin inputs must be non-negative");
    return std::fabs(1.0 - eta * lambda_max) + eta * zeta_lower * lambda_max;
}

inline StabilityReport stability_report(double eta, double lambda_max, double zeta_lower) {
    return {lambda_max, eta, zeta_lower, stability_margin(eta, lambda_max, zeta_lower)};
}

// ---------------------------------------------------------------------------
// Analysis tables: CSV with columns step,metric,value,tensor_name

struct MetricRow {
    std::uint64_t step = 0;
    std::string metric;
    double value = 0.0;
    std::string tensor_name;
};

inline void write_metric_csv(std::ostream& os, const std::vector<MetricRow>& rows) {
    os << "step,metric,value,tensor_name\n";
    char buf[64];
    for (const auto& r : rows) {
        std::snprintf(buf, sizeof buf, "%.17g", r.value);
        os << r.step << ',' << r.metric << ',' << (std::isfinite(r.value) ? buf : "nan") << ',' << r.tensor_name << '\n';
    }
}

namespace detail {

inline bool is_ln_site(const std::string& name) {
    return name.find("ln_gamma") != std::string::npos || name.find("ln_beta") != std::string::npos;
}
inline bool is_act_site(const std::string& name) { return name.find("fwd_act") != std::string::npos; }

}  // namespace detail

/// Per-step last-bin fractions: one row per layernorm tensor, plus the mean
/// over all layernorm tensors ("ln_all") and the mean over every activation
/// site across layers ("activations").
inline std::vector<MetricRow> ln_overflow_report(const std::vector<RunRecord>& log) {
    std::vector<MetricRow> rows;
    for (const auto& r : log) {
        double ln_sum = 0.0, act_sum = 0.0;
        std::size_t ln_n = 0, act_n = 0;
        for (const auto& [name, v] : r.last_bin_fraction) {
            if (detail::is_ln_site(name)) {
                rows.push_back({r.step, "last_bin_fraction", v, name});
                ln_sum += v;
                ++ln_n;
            } else if (detail::is_act_site(name)) {
                act_sum += v;
                ++act_n;
            }
        }
        rows.push_back({r.step, "last_bin_fraction", ln_n ? ln_sum / static_cast<double>(ln_n) : 0.0, "ln_all"});
        rows.push_back({r.step, "last_bin_fraction", act_n ? act_sum / static_cast<double>(act_n) : 0.0, "activations"});
    }
    return rows;
}

/// zeta_lower, its EMA and the cosine from a paired log, verbatim.
inline std::vector<MetricRow> zeta_report(const std::vector<PairedRecord>& log, double half_life = kEmaHalfLife) {
    std::vector<MetricRow> rows;
    Ema ema(half_life);
    for (const auto& r : log) {
        rows.push_back({r.step, "zeta_lower", r.zeta_lower, ""});
        if (std::isfinite(r.zeta_lower)) rows.push_back({r.step, "zeta_lower_ema", ema.update(r.zeta_lower), ""});
        rows.push_back({r.step, "cosine", r.cosine, ""});
        rows.push_back({r.step, "eps_norm", r.eps_norm, ""});
        rows.push_back({r.step, "g_norm", r.g_norm, ""});
    }
    return rows;
}

}  // namespace mxlab
