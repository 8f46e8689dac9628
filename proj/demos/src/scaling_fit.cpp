// Copyright 2026 The mxlab Authors
// SPDX-License-Identifier: Apache-2.0
//
// Refit each published precision row from synthetic points (1% noise) and
// compare the recovered allocation exponent a = beta / (alpha + beta).

#include <cstdio>

#include "mxlab/scaling_fit.hpp"

using namespace mxlab;

int main() {
    std::printf("%-12s %-12s  %-6s %-6s %-6s  %-6s %-6s %-6s\n", "weights", "activations", "alpha", "beta", "a",
                "fit_al", "fit_be", "fit_a");
    for (const auto& r : reference_fits()) {
        const auto pts = synthesize_points(r.fit, 6, 1e7, 1e9, 5, 2.0, 150.0, 0.01, 1);
        const auto f = fit_scaling_law(pts);
        std::printf("%-12s %-12s  %.3f  %.3f  %.3f   %.3f  %.3f  %.3f\n", r.weights, r.activations,
                    r.fit.alpha, r.fit.beta, r.fit.a, f.alpha, f.beta, f.a);
    }
    const auto bf16 = reference_fits()[3].fit;
    std::printf("\nbf16 row: L(1e8 params, 2e9 tokens) = %.4f\n", predict_loss(bf16, 1e8, 2e9));
}
