// Copyright 2026 The mxlab Authors
// SPDX-License-Identifier: Apache-2.0
//
// Mid-run precision changes. An intervention edits the run's QuantConfig
// between optimizer steps; parameters, optimizer moments and the batch
// sequence are untouched, so steps before the trigger match the baseline.

#pragma once

#include <algorithm>
#include <cmath>
#include <optional>
#include <string>
#include <string_view>
#include <vector>

#include "mxlab/diagnostics.hpp"
#include "mxlab/training.hpp"

namespace mxlab {

enum class InterventionKind : std::uint8_t {
    to_fp32,
    forward_only,
    bf16_activations_both,
    bf16_activations_fwd_only,
    weights_bf16,
    skip_ln_quant,
    bump_exponent,
};

inline constexpr std::array<InterventionKind, 7> kAllInterventions = {
    InterventionKind::to_fp32,       InterventionKind::forward_only,  InterventionKind::bf16_activations_both,
    InterventionKind::bf16_activations_fwd_only, InterventionKind::weights_bf16, InterventionKind::skip_ln_quant,
    InterventionKind::bump_exponent};

inline std::string_view to_string(InterventionKind k) {
    switch (k) {
        case InterventionKind::to_fp32: return "to_fp32";
        case InterventionKind::forward_only: return "forward_only";
        case InterventionKind::bf16_activations_both: return "bf16_activations_both";
        case InterventionKind::bf16_activations_fwd_only: return "bf16_activations_fwd_only";
        case InterventionKind::weights_bf16: return "weights_bf16";
        case InterventionKind::skip_ln_quant: return "skip_ln_quant";
        case InterventionKind::bump_exponent: return "bump_exponent";
    }
    return "?";
}

inline std::optional<InterventionKind> parse_intervention(std::string_view s) {
    for (auto k : kAllInterventions)
        if (to_string(k) == s) return k;
    return std::nullopt;
}

struct InterventionAction {
    InterventionKind kind = InterventionKind::to_fp32;
    bool conditional = false;  // bump_exponent only: bump just the blocks with overflowing elements

    friend bool operator==(const InterventionAction&, const InterventionAction&) = default;
};

struct InterventionPlan {
    std::uint64_t trigger_step = 0;
    InterventionAction action;

    friend bool operator==(const InterventionPlan&, const InterventionPlan&) = default;
};

/// The bf16 activation actions also move the layernorm affine point to bf16
/// (it is quantized alongside the activations it scales).
inline void apply_action(QuantConfig& q, const InterventionAction& a) {
    switch (a.kind) {
        case InterventionKind::to_fp32:
            q.formats.fill(QuantFormat::none());
            q.forward_only = false;
            break;
        case InterventionKind::forward_only:
            q.forward_only = true;
            break;
        case InterventionKind::bf16_activations_both:
            for (auto r : {QuantRole::fwd_activation, QuantRole::grad_input, QuantRole::grad_output, QuantRole::ln_affine})
                q[r] = QuantFormat::bf16();
            break;
        case InterventionKind::bf16_activations_fwd_only:
            for (auto r : {QuantRole::fwd_activation, QuantRole::ln_affine}) q[r] = QuantFormat::bf16();
            break;
        case InterventionKind::weights_bf16:
            for (auto r : {QuantRole::fwd_weight, QuantRole::bwd_weight}) q[r] = QuantFormat::bf16();
            break;
        case InterventionKind::skip_ln_quant:
            q[QuantRole::ln_affine] = QuantFormat::none();
            break;
        case InterventionKind::bump_exponent:
            q.for_each_mx([&](MXSpec& s) {
                s.exponent_offset = 1;
                s.conditional_bump = a.conditional;
            });
            break;
    }
}

/// Hook applying every plan whose trigger equals the step about to run.
inline BeforeStepHook intervention_hook(std::vector<InterventionPlan> plans) {
    std::stable_sort(plans.begin(), plans.end(),
                     [](const auto& a, const auto& b) { return a.trigger_step < b.trigger_step; });
    return [plans = std::move(plans)](std::uint64_t step, QuantConfig& q) {
        for (const auto& p : plans)
            if (p.trigger_step == step) apply_action(q, p.action);
    };
}

inline void validate_plans(const std::vector<InterventionPlan>& plans, std::uint64_t steps) {
    for (const auto& p : plans)
        if (p.trigger_step >= steps)
            throw InvalidInput("intervention trigger step " + std::to_string(p.trigger_step) +
                               " is beyond the run length " + std::to_string(steps));
}

template <typename T>
RunResult intervention_run(const ModelConfig& mc, const TrainConfig& tc, const std::vector<InterventionPlan>& plans,
                           RunHooks hooks = {}) {
    validate_plans(plans, tc.steps);
    hooks.before_step = intervention_hook(plans);
    return train_run<T>(mc, tc, hooks);
}

// ---------------------------------------------------------------------------
// Divergence classification

inline constexpr double kRecoveryFactor = 10.0;

/// First spike (loss > 100x the previous step) after which the loss never
/// returns below 10x its pre-spike EMA for the rest of the log; otherwise the
/// first terminal step (non-finite loss or loss above the divergence
/// threshold); otherwise none. Returns the record's step index.
inline std::optional<std::uint64_t> divergence_step(const std::vector<RunRecord>& log, double factor = kSpikeFactor,
                                                    double half_life = kEmaHalfLife) {
    if (log.empty()) return std::nullopt;
    std::size_t end = 0;  // finite, sub-threshold prefix
    while (end < log.size() && std::isfinite(log[end].loss) && log[end].loss <= kDivergenceLoss) ++end;
    if (end > 0) {
        std::vector<double> losses(end);
        for (std::size_t i = 0; i < end; ++i) losses[i] = std::max(log[i].loss, std::numeric_limits<double>::min());
        const auto spikes = detect_spikes(losses, factor).spike_steps;
        const auto ema = ema_series(losses, half_life);
        // suffix minimum of the loss after each index
        std::vector<double> later_min(end + 1, std::numeric_limits<double>::infinity());
        for (std::size_t i = end; i-- > 0;) later_min[i] = std::min(later_min[i + 1], losses[i]);
        for (std::size_t t : spikes) {
            const double threshold = kRecoveryFactor * ema[t - 1];
            if (!(later_min[t + 1] < threshold)) return log[t].step;
        }
    }
    if (end < log.size()) return log[end].step;
    return std::nullopt;
}

}  // namespace mxlab
