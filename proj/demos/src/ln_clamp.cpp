// Copyright 2026 The mxlab Authors
// SPDX-License-Identifier: Apache-2.0
//
// Layernorm weights sit in a narrow band just under 1. Quantized as one E4M3
// block, the shared scale is picked from floor(log2(absmax)) alone, so the
// whole band lands in the top bin and collapses to a single value.

#include <cstdio>
#include <vector>

#include "mxlab/mx_block.hpp"
#include "mxlab/rng.hpp"

using namespace mxlab;

int main() {
    const std::vector<double> gamma = {0.89740956, 0.89628334, 0.88358812, 0.88474816, 0.90372837};
    const MXSpec spec{};
    const MXBlock b = quantize_block(gamma, spec);
    const auto q = dequantize_block(b, spec);
    std::printf("shared exponent %d (scale 2^%d)\n", b.shared_exp, b.shared_exp);
    for (std::size_t i = 0; i < gamma.size(); ++i)
        std::printf("  %.8f -> %.6g%s\n", gamma[i], q[i], (b.codes[i].bits & detail::magnitude_mask(kE4M3)) == max_finite_code(kE4M3).bits ? "  (last bin)" : "");

    // wider bands around 0.9: how much of a 4096-element vector ends in the last bin
    std::printf("\nband width  last_bin_fraction(e4m3)  last_bin_fraction(e5m2)\n");
    for (double width : {0.005, 0.02, 0.05, 0.1, 0.2, 0.5}) {
        Tensor<double> t({1, 4096});
        CounterRng(7, Stream::lambda_probe, 0).fill_uniform(t.span(), 0.9 - width / 2, 0.9 + width / 2);
        MXSpec e5 = spec;
        e5.element = FormatId::e5m2;
        std::printf("%10.3f  %23.4f  %23.4f\n", width, last_bin_fraction(t, spec, 1), last_bin_fraction(t, e5, 1));
    }

    // bumped by one binade the elements are rounded instead of clamped, but the
    // grid spacing near 0.9 is 1/16 so they still share a value
    MXSpec bumped = spec;
    bumped.exponent_offset = 1;
    const MXBlock bb = quantize_block(gamma, bumped);
    const auto qb = dequantize_block(bb, bumped);
    const CodeWord top = max_finite_code(kE4M3);
    std::printf("\nwith the shared exponent bumped by one (%d):\n", bb.shared_exp);
    for (std::size_t i = 0; i < gamma.size(); ++i)
        std::printf("  %.8f -> %.6g%s\n", gamma[i], qb[i], (bb.codes[i].bits & detail::magnitude_mask(kE4M3)) == top.bits ? "  (last bin)" : "");
}
