// Copyright 2026 The mxlab Authors
// SPDX-License-Identifier: Apache-2.0

#include <catch_amalgamated.hpp>

#include <cmath>
#include <limits>
#include <random>
#include <vector>

#include "mxlab/interventions.hpp"

using namespace mxlab;

namespace {

ModelConfig model() {
    ModelConfig m;
    m.depth = 2;
    m.d_model = 16;
    m.activation = Activation::gelu;
    m.layernorm = true;
    m.seed = 3;
    return m;
}

TrainConfig train(const char* preset, std::uint64_t steps = 24) {
    TrainConfig t;
    t.lr = 2e-3;
    t.batch = 16;
    t.steps = steps;
    t.data_seed = 8;
    t.precision = Precision::fp64;
    t.quant = quant_preset(preset);
    return t;
}

std::vector<RunRecord> series(const std::vector<double>& losses, std::uint64_t first_step = 0) {
    std::vector<RunRecord> out;
    for (std::size_t i = 0; i < losses.size(); ++i) {
        RunRecord r;
        r.step = first_step + i;
        r.loss = losses[i];
        out.push_back(r);
    }
    return out;
}

}  // namespace

TEST_CASE("actions edit the quant config", "[interventions]") {
    const auto base = quant_preset("mxfp8-e4m3");
    auto q = base;
    apply_action(q, {InterventionKind::to_fp32});
    CHECK_FALSE(q.any_quantization());
    CHECK_FALSE(q.uses_bf16_vector_ops());

    q = base;
    apply_action(q, {InterventionKind::forward_only});
    CHECK(q.at(QuantRole::grad_output).is_none());
    CHECK(q.at(QuantRole::fwd_weight).is_mx());

    q = base;
    apply_action(q, {InterventionKind::skip_ln_quant});
    CHECK(q.at(QuantRole::ln_affine).is_none());
    CHECK(q.at(QuantRole::fwd_activation).is_mx());

    q = base;
    apply_action(q, {InterventionKind::bf16_activations_both});
    for (auto r : {QuantRole::fwd_activation, QuantRole::grad_input, QuantRole::grad_output, QuantRole::ln_affine})
        CHECK(q.at(r).kind == QuantFormat::Kind::bf16);
    CHECK(q.at(QuantRole::fwd_weight).is_mx());
    CHECK(q.at(QuantRole::bwd_weight).is_mx());

    q = base;
    apply_action(q, {InterventionKind::bf16_activations_fwd_only});
    CHECK(q.at(QuantRole::fwd_activation).kind == QuantFormat::Kind::bf16);
    CHECK(q.at(QuantRole::grad_output).is_mx());

    q = base;
    apply_action(q, {InterventionKind::weights_bf16});
    CHECK(q.at(QuantRole::fwd_weight).kind == QuantFormat::Kind::bf16);
    CHECK(q.at(QuantRole::fwd_activation).is_mx());

    q = base;
    apply_action(q, {InterventionKind::bump_exponent});
    for (auto r : kAllRoles) CHECK(q.at(r).mx.exponent_offset == 1);
    q = base;
    apply_action(q, {InterventionKind::bump_exponent, true});
    for (auto r : kAllRoles) CHECK(q.at(r).mx.conditional_bump);

    for (auto k : kAllInterventions) CHECK(parse_intervention(to_string(k)) == k);
    CHECK_FALSE(parse_intervention("to_fp16"));
}

TEST_CASE("bump exponent shifts every block by one", "[interventions]") {
    std::mt19937_64 gen(1);
    std::normal_distribution<double> n(0.0, 3.0);
    Tensor<double> t({8, 64});
    for (auto& v : t.vec()) v = n(gen);
    const auto base = quantize_tensor(t, MXSpec{}, 1);
    QuantConfig q = quant_preset("mxfp8-e4m3");
    apply_action(q, {InterventionKind::bump_exponent});
    const auto bumped = quantize_tensor(t, q.at(QuantRole::fwd_activation).mx, 1);
    REQUIRE(base.blocks.size() == bumped.blocks.size());
    for (std::size_t b = 0; b < base.blocks.size(); ++b) {
        CHECK(bumped.blocks[b].shared_exp == base.blocks[b].shared_exp + 1);
        // codes are the element values halved (then rounded)
        const auto x = dequantize_block(base.blocks[b], base.spec), y = dequantize_block(bumped.blocks[b], bumped.spec);
        for (std::size_t i = 0; i < x.size(); ++i) {
            const double expect = std::ldexp(round_to_format(std::ldexp(t[b * 32 + i], -(bumped.blocks[b].shared_exp)), kE4M3),
                                             bumped.blocks[b].shared_exp);
            CHECK(y[i] == expect);
        }
    }
}

TEST_CASE("no-op plan reproduces the baseline", "[interventions]") {
    auto tc = train("mxfp8-e4m3");
    tc.quant[QuantRole::ln_affine] = QuantFormat::none();  // skip_ln_quant is then a no-op
    const auto base = train_run<double>(model(), tc);
    const auto same = intervention_run<double>(model(), tc, {{5, {InterventionKind::skip_ln_quant}}});
    REQUIRE(same.records.size() == base.records.size());
    for (std::size_t i = 0; i < base.records.size(); ++i) {
        CHECK(same.records[i].loss == base.records[i].loss);
        CHECK(same.records[i].grad_norm == base.records[i].grad_norm);
    }
}

TEST_CASE("prefix identity and switch point", "[interventions]") {
    const auto tc = train("mxfp8-e4m3");
    const auto base = train_run<double>(model(), tc);
    for (auto kind : kAllInterventions) {
        CAPTURE(to_string(kind));
        const auto r = intervention_run<double>(model(), tc, {{10, {kind}}});
        REQUIRE(r.records.size() == base.records.size());
        for (std::size_t i = 0; i < 10; ++i) CHECK(r.records[i].loss == base.records[i].loss);
        bool differs = false;
        for (std::size_t i = 10; i < r.records.size(); ++i) differs |= r.records[i].loss != base.records[i].loss;
        CHECK(differs);
    }
    // to_fp32 at step 0 is an fp32 run
    const auto fp32 = train_run<double>(model(), train("fp32"));
    const auto switched = intervention_run<double>(model(), tc, {{0, {InterventionKind::to_fp32}}});
    for (std::size_t i = 0; i < fp32.records.size(); ++i) CHECK(switched.records[i].loss == fp32.records[i].loss);

    CHECK_THROWS_AS(intervention_run<double>(model(), tc, {{24, {InterventionKind::to_fp32}}}), InvalidInput);
}

TEST_CASE("divergence step classification", "[interventions]") {
    CHECK_FALSE(divergence_step(series({1.0, 0.9, 0.8, 0.7})));
    CHECK_FALSE(divergence_step({}));

    const double nan = std::numeric_limits<double>::quiet_NaN();
    CHECK(divergence_step(series({1.0, 0.9, 0.8, nan})) == 3u);
    CHECK(divergence_step(series({1.0, 0.9, 2e12})) == 2u);
    CHECK(divergence_step(series({1.0, 0.9, nan}, 100)) == 102u);

    // spike at 5100, recovered by 5200, stable afterwards
    std::vector<double> rec(6000, 0.01);
    for (std::size_t t = 5100; t < 5200; ++t) rec[t] = 5.0;
    CHECK_FALSE(divergence_step(series(rec)));

    // the same spike without recovery
    std::vector<double> stuck(6000, 0.01);
    for (std::size_t t = 5100; t < 6000; ++t) stuck[t] = 5.0;
    CHECK(divergence_step(series(stuck)) == 5100u);

    // an unrecovered spike precedes the terminal NaN
    auto ending = stuck;
    ending.push_back(nan);
    CHECK(divergence_step(series(ending)) == 5100u);

    // recovery is judged against the pre-spike EMA, not the last loss
    std::vector<double> partial(400, 1.0);
    for (std::size_t t = 300; t < 400; ++t) partial[t] = 200.0;
    partial[399] = 9.0;  // below 10x the EMA (= 1.0): recovered
    CHECK_FALSE(divergence_step(series(partial)));
    partial[399] = 11.0;
    CHECK(divergence_step(series(partial)) == 300u);
}
