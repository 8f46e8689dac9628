// Copyright 2026 The mxlab Authors
// SPDX-License-Identifier: Apache-2.0
//
// Small dual run: an fp32 twin and an MX twin from the same initialization and
// batches. Prints the gradient-noise lower bound zeta, its EMA, the cosine
// between the two gradients, and a stability margin built from a lambda_max
// estimate on the final student.
//
//   demo_dual_zeta [preset] [steps]     (defaults: mxfp8-e4m3, 300)

#include <cstdio>
#include <cstdlib>
#include <string>

#include "mxlab/diagnostics.hpp"
#include "mxlab/training.hpp"

using namespace mxlab;

int main(int argc, char** argv) {
    const std::string preset = argc > 1 ? argv[1] : "mxfp8-e4m3";
    const std::uint64_t steps = argc > 2 ? std::strtoull(argv[2], nullptr, 10) : 300;

    ModelConfig mc;
    mc.depth = 2;
    mc.d_model = 64;
    mc.seed = 1;
    TrainConfig hp;
    hp.lr = 1e-3;
    hp.batch = 256;
    hp.steps = steps;
    hp.data_seed = 1;
    TrainConfig lp = hp;
    hp.quant = quant_preset("fp32");
    lp.quant = quant_preset(preset);

    const auto d = dual_run<float>(mc, hp, lp);
    Ema ema;
    std::printf("step  loss_fp32    loss_lp      zeta_lower  zeta_ema  cosine\n");
    for (const auto& p : d.paired) {
        ema.update(p.zeta_lower);
        if (p.step % 25 == 0 || p.step + 1 == d.paired.size())
            std::printf("%4llu  %.4e  %.4e  %.4e  %.4f    %.6f\n", static_cast<unsigned long long>(p.step), p.loss_hp,
                        p.loss_lp, p.zeta_lower, ema.value(), p.cosine);
    }

    Trainer<float> tr(mc, lp);
    while (!tr.finished()) tr.advance();
    const auto lam = estimate_lambda_max(tr.student(), tr.batch(0));
    const auto rep = stability_report(hp.lr, lam.lambda_max, ema.value());
    std::printf("\nlambda_max %.4g (%d iterations), eta %.1e, zeta_ema %.4f -> margin %.4f (%s 1)\n", rep.lambda_max,
                lam.iterations, rep.eta, rep.zeta_lower, rep.margin, rep.margin < 1 ? "below" : "at or above");
}
