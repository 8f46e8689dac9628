// Copyright 2026 The mxlab Authors
// SPDX-License-Identifier: Apache-2.0

#include <catch_amalgamated.hpp>

#include <cmath>
#include <sstream>
#include <vector>

#include "mxlab/diagnostics.hpp"
#include "mxlab/training.hpp"

using namespace mxlab;
using Catch::Matchers::WithinAbs;
using Catch::Matchers::WithinRel;

namespace {

GradientFn quadratic(std::vector<double> diag) {
    return [diag = std::move(diag)](const std::vector<double>& w) {
        std::vector<double> g(w.size());
        for (std::size_t i = 0; i < w.size(); ++i) g[i] = diag[i] * w[i];
        return g;
    };
}

}  // namespace

TEST_CASE("zeta lower bound", "[diagnostics]") {
    CHECK(zeta_lower_bound(1.0, 0.5) == 2.0);
    CHECK(zeta_lower_bound(0.0, 3.0) == 0.0);
    CHECK_THROWS_AS(zeta_lower_bound(1.0, 0.0), UndefinedRatio);
    for (double s : {1e-6, 0.5, 4.0, 1e6}) CHECK_THAT(zeta_lower_bound(0.3 * s, 1.7 * s), WithinRel(0.3 / 1.7, 1e-15));
}

TEST_CASE("cosine alignment", "[diagnostics]") {
    const std::vector<double> g{0.3, -1.2, 2.5, 0.01};
    std::vector<double> scaled, neg;
    for (double v : g) {
        scaled.push_back(3 * v);
        neg.push_back(-v);
    }
    CHECK_THAT(cosine_alignment(g, scaled), WithinAbs(1.0, 1e-15));
    CHECK_THAT(cosine_alignment(g, neg), WithinAbs(-1.0, 1e-15));
    CHECK(cosine_alignment(g, g) == 1.0);
    CHECK(cosine_alignment(std::vector<double>{1, 0}, std::vector<double>{0, 1}) == 0.0);
    CHECK_THROWS_AS(cosine_alignment(g, std::vector<double>(4, 0.0)), UndefinedRatio);
    CHECK_THROWS_AS(cosine_alignment(g, std::vector<double>(3, 1.0)), ShapeMismatch);
}

TEST_CASE("spike detection", "[diagnostics]") {
    const std::vector<double> a{1.0, 0.9, 120.0, 1.0};
    CHECK(detect_spikes(a).spike_steps == std::vector<std::size_t>{2});
    CHECK(detect_spikes(std::vector<double>{5, 4, 3, 2, 1}).spike_steps.empty());
    CHECK(detect_spikes(std::vector<double>{1.0, 99.0}).spike_steps.empty());
    CHECK(detect_spikes(std::vector<double>{1.0, 100.0}).spike_steps.empty());  // strict inequality
    CHECK(detect_spikes(std::vector<double>{1.0, 100.0001}).spike_steps == std::vector<std::size_t>{1});
    CHECK_THROWS_AS(detect_spikes(std::vector<double>{1.0, 0.0}), InvalidInput);
    CHECK_THROWS_AS(detect_spikes(std::vector<double>{1.0, -2.0}), InvalidInput);
    CHECK_THROWS_AS(detect_spikes(std::vector<double>{}), InvalidInput);
    for (double s : {0.25, 8.0, 1e9}) {  // scaling by powers of two is exact
        std::vector<double> b;
        for (double v : a) b.push_back(v * s);
        CHECK(detect_spikes(b).spike_steps == detect_spikes(a).spike_steps);
    }
}

TEST_CASE("EMA half-life", "[diagnostics]") {
    Ema e(100);
    e.update(0.0);
    for (int i = 0; i < 100; ++i) e.update(1.0);
    CHECK_THAT(e.value(), WithinAbs(0.5, 1e-12));
    const auto s = ema_series(std::vector<double>{4.0, 4.0, 4.0});
    CHECK(s == std::vector<double>{4.0, 4.0, 4.0});
    CHECK_THROWS_AS(Ema(0.0), InvalidInput);
}

TEST_CASE("lambda max on quadratics", "[diagnostics]") {
    const std::vector<double> w{0.3, -0.2, 0.7};
    const auto r = estimate_lambda_max(quadratic({1, 2, 5}), w);
    CHECK(r.converged);
    CHECK_THAT(r.lambda_max, WithinRel(5.0, 0.01));
    const auto doubled = estimate_lambda_max(quadratic({2, 4, 10}), w);
    CHECK_THAT(doubled.lambda_max, WithinRel(2 * r.lambda_max, 0.02));
    for (std::uint64_t seed : {1u, 2u, 3u}) {
        LambdaOptions o;
        o.seed = seed;
        CHECK_THAT(estimate_lambda_max(quadratic({1, 2, 5}), w, o).lambda_max, WithinRel(r.lambda_max, 0.01));
    }
    // a nearly degenerate top pair converges slowly
    LambdaOptions few;
    few.max_iterations = 3;
    few.tolerance = 1e-12;
    const auto slow = estimate_lambda_max(quadratic({1, 4.99, 5}), w, few);
    CHECK_FALSE(slow.converged);
    CHECK(slow.iterations == 3);
    // w = 0 still gets a usable step
    CHECK_THAT(estimate_lambda_max(quadratic({1, 2, 5}), std::vector<double>(3, 0.0)).lambda_max, WithinRel(5.0, 0.01));
}

TEST_CASE("lambda max on the model is finite and positive", "[diagnostics]") {
    ModelConfig mc;
    mc.depth = 1;
    mc.d_model = 8;
    mc.seed = 1;
    const auto m = build_student<float>(mc);
    const auto t = build_teacher<float>(mc, 2);
    const auto b = generate_batch<float>(0, 0, 32, t, 1e-3);
    const auto r = estimate_lambda_max(m, b);
    CHECK(std::isfinite(r.lambda_max));
    CHECK(r.lambda_max > 0.0);
}

TEST_CASE("stability margin", "[diagnostics]") {
    CHECK(stability_margin(1e-3, 1000, 0) == 0.0);
    CHECK_THAT(stability_margin(1e-3, 1000, 2), WithinAbs(2.0, 1e-12));
    CHECK_THAT(stability_margin(1e-4, 1000, 0.5), WithinAbs(0.95, 1e-12));
    double prev = -1;
    for (double z = 0; z < 3; z += 0.25) {
        const double m = stability_margin(5e-4, 3000, z);
        CHECK(m >= prev);
        CHECK(m >= std::fabs(1 - 5e-4 * 3000));
        prev = m;
    }
    CHECK_THROWS_AS(stability_margin(-1, 1, 1), InvalidInput);
    const auto rep = stability_report(1e-4, 1000, 0.5);
    CHECK(rep.margin == stability_margin(1e-4, 1000, 0.5));
}

TEST_CASE("layernorm overflow report", "[diagnostics]") {
    ModelConfig mc;
    mc.depth = 2;
    mc.d_model = 32;
    mc.seed = 4;
    TrainConfig tc;
    tc.lr = 1e-3;
    tc.batch = 32;
    tc.steps = 5;
    tc.precision = Precision::fp64;
    tc.quant = quant_preset("fp32");
    const auto fp32 = train_run<double>(mc, tc);
    for (const auto& row : ln_overflow_report(fp32.records)) CHECK(row.value == 0.0);

    // gamma drawn from the clamping band: every LN affine element lands in the last bin
    tc.quant = quant_preset("mxfp8-e4m3");
    Trainer<double> tr(mc, tc);
    for (auto& l : tr.student().layers) CounterRng(3, Stream::lambda_probe, 0).fill_uniform(l.gamma.span(), 0.88, 0.91);
    const auto rec = tr.advance();
    CHECK(*rec.fraction("layer0.ln_gamma") == 1.0);
    CHECK(*rec.fraction("layer1.ln_gamma") == 1.0);
    const auto rows = ln_overflow_report({rec});
    bool saw_all = false, saw_act = false;
    for (const auto& r : rows) {
        if (r.tensor_name == "ln_all") {
            saw_all = true;
            CHECK(r.value == 0.5);  // gammas saturated, betas (all zero) not
        }
        if (r.tensor_name == "activations") {
            saw_act = true;
            CHECK(r.value < 0.1);
        }
    }
    CHECK(saw_all);
    CHECK(saw_act);

    std::ostringstream os;
    write_metric_csv(os, {{3, "zeta_lower", 0.25, ""}, {4, "last_bin_fraction", 1.0, "layer0.ln_gamma"}});
    CHECK(os.str() == "step,metric,value,tensor_name\n3,zeta_lower,0.25,\n4,last_bin_fraction,1,layer0.ln_gamma\n");
}

TEST_CASE("zeta report", "[diagnostics]") {
    std::vector<PairedRecord> log;
    for (std::uint64_t t = 0; t < 3; ++t) log.push_back({t, 0.5, 1.0, 0.5, 0.9, 1.0, 1.1});
    const auto rows = zeta_report(log);
    CHECK(rows.size() == 15);
    CHECK(rows[1].metric == "zeta_lower_ema");
    CHECK(rows[1].value == 0.5);
}

TEST_CASE("run log round trip", "[diagnostics]") {
    RunRecord r{7, 0.125, 2.5, 6e-4, {{"layer0.ln_gamma", 0.75}}, std::nullopt};
    const auto j = to_json(r, "abcd");
    CHECK(j.dump() ==
          R"({"fingerprint":"abcd","version":")" + std::string(kVersion) +
              R"(","step":7,"loss":0.125,"grad_norm":2.5,"lr":0.0006,"last_bin_fraction":{"layer0.ln_gamma":0.75}})");
    const auto back = run_record_from_json(j);
    CHECK(back.step == 7);
    CHECK(back.loss == 0.125);
    CHECK(back.fraction("layer0.ln_gamma") == 0.75);

    r.loss = std::nan("");
    CHECK(std::isnan(run_record_from_json(to_json(r, "x")).loss));

    PairedRecord p{1, 0.1, 0.2, 0.5, 0.99, 1.0, 1.5};
    const auto pb = paired_record_from_json(to_json(p, "x"));
    CHECK(pb.zeta_lower == 0.5);
    CHECK(pb.cosine == 0.99);
}
