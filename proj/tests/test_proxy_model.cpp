// Copyright 2026 The mxlab Authors
// SPDX-License-Identifier: Apache-2.0

#include <catch_amalgamated.hpp>

#include <cmath>
#include <sstream>
#include <vector>

#include "mxlab/training.hpp"
#include "oracles.hpp"

using namespace mxlab;
using Catch::Matchers::WithinAbs;
using Catch::Matchers::WithinRel;

namespace {

ModelConfig small_model(Activation act = Activation::gelu, bool ln = true, int d = 8, int depth = 2) {
    ModelConfig m;
    m.depth = depth;
    m.d_model = d;
    m.activation = act;
    m.layernorm = ln;
    m.seed = 11;
    return m;
}

TrainConfig small_train(const char* preset = "fp32", std::uint64_t steps = 20) {
    TrainConfig t;
    t.lr = 1e-3;
    t.batch = 16;
    t.steps = steps;
    t.data_seed = 5;
    t.precision = Precision::fp64;
    t.quant = quant_preset(preset);
    return t;
}

}  // namespace

TEST_CASE("philox known answers", "[proxy_model]") {
    CHECK(philox4x32_10({0, 0, 0, 0}, {0, 0}) == PhiloxCounter{0x6627e8d5, 0xe169c58d, 0xbc57ac4c, 0x9b00dbd8});
    CHECK(philox4x32_10({~0u, ~0u, ~0u, ~0u}, {~0u, ~0u}) ==
          PhiloxCounter{0x408f276d, 0x41c83b0e, 0xa20bc7c6, 0x6d5451fd});
    CHECK(philox4x32_10({0x243f6a88, 0x85a308d3, 0x13198a2e, 0x03707344}, {0xa4093822, 0x299f31d0}) ==
          PhiloxCounter{0xd16cfe09, 0x94fdcceb, 0x5001e420, 0x24126ea1});
}

TEST_CASE("model shapes", "[proxy_model]") {
    auto relu = small_model(Activation::relu, true, 4, 1);
    const auto m = build_student<double>(relu);
    CHECK(m.layers[0].W1.shape() == Shape{16, 4});
    CHECK(m.layers[0].W2.shape() == Shape{4, 16});

    auto sw = small_model(Activation::swiglu, true, 384, 1);
    CHECK(sw.hidden() == 1024);
    CHECK(sw.w1_rows() == 2048);

    const auto t = build_teacher<double>(relu, 3);
    CHECK_FALSE(t.cfg.layernorm);
    CHECK(t.layers[0].gamma.size() == 0);
    CHECK(t.tensors().size() == 2);
    CHECK(m.tensors().size() == 4);
}

TEST_CASE("initialization", "[proxy_model]") {
    const auto cfg = small_model(Activation::gelu, true, 64, 1);
    const auto a = build_student<double>(cfg), b = build_student<double>(cfg);
    CHECK(a == b);
    auto other = cfg;
    other.seed = 12;
    CHECK_FALSE(a == build_student<double>(other));
    CHECK_FALSE(build_teacher<double>(cfg, cfg.seed) == a);  // different stream even with equal seeds

    const double bound = 1.0 / std::sqrt(64.0);
    double mx = 0;
    for (double v : a.layers[0].W1.vec()) {
        CHECK(std::fabs(v) <= bound);
        mx = std::max(mx, std::fabs(v));
    }
    CHECK(mx > 0.95 * bound);
    for (double v : a.layers[0].gamma.vec()) CHECK(v == 1.0);
    for (double v : a.layers[0].beta.vec()) CHECK(v == 0.0);

    auto xc = cfg;
    xc.init = InitScheme::xavier_normal;
    const auto x = build_student<double>(xc);
    double s2 = 0;
    for (double v : x.layers[0].W1.vec()) s2 += v * v;
    const double expected = 0.5 * std::sqrt(2.0 / (64.0 + 256.0));
    CHECK_THAT(std::sqrt(s2 / static_cast<double>(x.layers[0].W1.size())), WithinRel(expected, 0.03));
}

TEST_CASE("batches", "[proxy_model]") {
    const auto cfg = small_model();
    const auto teacher = build_teacher<double>(cfg, 7);
    const auto b1 = generate_batch<double>(3, 42, 10, teacher, 1e-3);
    const auto b2 = generate_batch<double>(3, 42, 10, teacher, 1e-3);
    CHECK(b1.x == b2.x);
    CHECK(b1.y == b2.y);
    CHECK_FALSE(generate_batch<double>(3, 43, 10, teacher, 1e-3).x == b1.x);

    auto zero = teacher.zeros_like();
    const auto z = generate_batch<double>(3, 0, 10, zero, 0.0);
    CHECK(z.y == z.x);  // zero weights leave only the residual path
}

TEST_CASE("standard normal inputs", "[proxy_model]") {
    const std::size_t n = 1'000'000;
    std::vector<double> v(n);
    CounterRng(1, Stream::inputs, 0).fill_normal(std::span<double>(v));
    double mean = 0;
    for (double x : v) mean += x;
    mean /= n;
    double var = 0, m4 = 0;
    for (double x : v) {
        var += (x - mean) * (x - mean);
        m4 += std::pow(x - mean, 4);
    }
    var /= n;
    m4 /= n;
    const double se_mean = std::sqrt(1.0 / n), se_var = std::sqrt((m4 - var * var) / n);
    CHECK(std::fabs(mean) < 4 * se_mean);
    CHECK(std::fabs(var - 1.0) < 4 * se_var);
}

TEST_CASE("forward basics", "[proxy_model]") {
    auto cfg = small_model(Activation::relu, false);
    auto m = build_student<double>(cfg).zeros_like();
    const auto b = generate_batch<double>(1, 0, 4, build_teacher<double>(cfg, 1), 0.0);
    CHECK(forward(m, b.x, QuantConfig{}) == b.x);

    const auto s = build_student<double>(small_model(Activation::gelu, true, 32, 2));
    const auto t = build_teacher<double>(s.cfg, 2);
    const auto bb = generate_batch<double>(1, 0, 8, t, 1e-3);
    CHECK(forward(s, bb.x, quant_preset("fp32")) == forward(s, bb.x, QuantConfig{}));
    CHECK_THROWS_AS(forward(s, Tensor<double>({2, 5}), QuantConfig{}), ShapeMismatch);
}

TEST_CASE("teacher representability", "[proxy_model]") {
    auto cfg = small_model(Activation::gelu, false, 8, 2);
    const auto teacher = build_teacher<double>(cfg, 9);
    Model<double> student = teacher;  // student architecture without layernorm at teacher parameters
    const auto clean = generate_batch<double>(4, 0, 32, teacher, 0.0);
    CHECK(loss_only(student, clean.x, clean.y, QuantConfig{}) == 0.0);
    const double sigma = 0.1;
    double acc = 0;
    for (std::uint64_t step = 0; step < 50; ++step) {
        const auto noisy = generate_batch<double>(4, step, 256, teacher, sigma);
        acc += loss_only(student, noisy.x, noisy.y, QuantConfig{});
    }
    CHECK_THAT(acc / 50, WithinRel(sigma * sigma, 0.02));
}

TEST_CASE("full-model gradients match central differences", "[proxy_model]") {
    for (Activation act : {Activation::relu, Activation::gelu, Activation::swiglu}) {
        for (bool ln : {true, false}) {
            CAPTURE(to_string(act), ln);
            auto cfg = small_model(act, ln, 32, 2);
            auto m = build_student<double>(cfg);
            if (ln)  // move gamma/beta off their init so their gradients are generic
                for (auto& l : m.layers) {
                    CounterRng(99, Stream::lambda_probe, 0).fill_uniform(l.gamma.span(), 0.5, 1.5);
                    CounterRng(99, Stream::lambda_probe, 1).fill_uniform(l.beta.span(), -0.2, 0.2);
                }
            const auto t = build_teacher<double>(cfg, 3);
            const auto b = generate_batch<double>(1, 0, 4, t, 1e-3);
            const auto g = loss_and_grad(m, b.x, b.y, QuantConfig{}).grad.flatten();
            Model<double> work = m;
            const auto fd = oracle::central_differences(
                [&](const std::vector<double>& w) {
                    work.assign_flat(w);
                    return loss_only(work, b.x, b.y, QuantConfig{});
                },
                m.flatten(), 1e-5);
            double err = 0, scale = 0;
            for (std::size_t i = 0; i < g.size(); ++i) {
                err = std::max(err, std::fabs(g[i] - fd[i]));
                scale = std::max(scale, std::fabs(fd[i]));
            }
            CHECK(err / scale < 1e-4);
        }
    }
}

TEST_CASE("optimizers", "[proxy_model]") {
    auto cfg = small_model(Activation::relu, true, 4, 1);
    const auto w0 = build_student<double>(cfg);

    SECTION("zero gradient leaves Adam parameters unchanged") {
        auto w = w0;
        auto st = OptimizerState<double>::init(OptimizerKind::adam, w);
        st.step(w, w.zeros_like(), 1e-3);
        CHECK(w == w0);
    }
    SECTION("SGD step") {
        auto w = w0;
        auto g = w0;
        auto st = OptimizerState<double>::init(OptimizerKind::sgd, w);
        st.step(w, g, 0.1);
        const auto a = w.flatten(), b = w0.flatten();
        for (std::size_t i = 0; i < a.size(); ++i) CHECK(a[i] == b[i] - 0.1 * b[i]);
    }
    SECTION("momentum accumulates") {
        auto w = w0;
        auto g = w0;
        auto st = OptimizerState<double>::init(OptimizerKind::sgd_momentum, w);
        st.step(w, g, 0.1);
        st.step(w, g, 0.1);
        const auto a = w.flatten(), b = w0.flatten();
        for (std::size_t i = 0; i < a.size(); ++i) CHECK_THAT(a[i], WithinAbs(b[i] - 0.1 * b[i] - 0.1 * 1.9 * b[i], 1e-15));
    }
    SECTION("Adam first step hand trace") {
        // m = 0.1 g, v = 0.001 g^2; bias-corrected ratio g / (|g| + eps).
        auto w = w0;
        auto g = w0;
        g.assign_flat(std::vector<double>(w0.parameter_count(), 2e-3));
        auto st = OptimizerState<double>::init(OptimizerKind::adam, w);
        st.step(w, g, 0.01);
        const double m = 0.1 * 2e-3 / (1 - 0.9), v = 0.001 * 4e-6 / (1 - 0.999);
        const double expected_delta = 0.01 * m / (std::sqrt(v) + 1e-8);
        const auto a = w.flatten(), b = w0.flatten();
        for (std::size_t i = 0; i < a.size(); ++i) CHECK_THAT(b[i] - a[i], WithinRel(expected_delta, 1e-9));
        CHECK_THAT(expected_delta, WithinRel(0.01 * 2e-3 / (2e-3 + 1e-8), 1e-9));
    }
}

TEST_CASE("learning-rate schedule", "[proxy_model]") {
    CHECK(lr_at(Schedule::cosine, 1e-3, 1e-5, 0, 100) == 1e-3);
    CHECK_THAT(lr_at(Schedule::cosine, 1e-3, 1e-5, 100, 100), WithinRel(1e-5, 1e-12));
    CHECK_THAT(lr_at(Schedule::cosine, 1e-3, 1e-5, 50, 100), WithinRel((1e-3 + 1e-5) / 2, 1e-12));
    CHECK(lr_at(Schedule::constant, 6e-4, 1e-5, 77, 100) == 6e-4);
    CHECK_THROWS_AS(lr_at(Schedule::constant, 6e-4, 1e-5, 101, 100), InvalidInput);
}

TEST_CASE("training is deterministic and learns", "[proxy_model]") {
    const auto cfg = small_model(Activation::gelu, true, 16, 2);
    auto tc = small_train("mxfp8-e4m3", 60);
    tc.lr = 3e-3;
    const auto a = train_run<double>(cfg, tc);
    const auto b = train_run<double>(cfg, tc);
    REQUIRE(a.records.size() == 60);
    CHECK(a.status == RunStatus::completed);
    for (std::size_t i = 0; i < a.records.size(); ++i) {
        CHECK(a.records[i].loss == b.records[i].loss);
        CHECK(a.records[i].grad_norm == b.records[i].grad_norm);
        CHECK(a.records[i].step == i);
    }
    CHECK(a.records.back().loss < 0.5 * a.records.front().loss);
    REQUIRE(a.records[0].fraction("layer1.ln_gamma"));
    // gamma starts at exactly 1.0, a power of two below the last bin
    CHECK(*a.records[0].fraction("layer1.ln_gamma") == 0.0);

    auto fp32 = tc;
    fp32.quant = quant_preset("fp32");
    for (const auto& r : train_run<double>(cfg, fp32).records)
        for (const auto& [n, v] : r.last_bin_fraction) CHECK(v == 0.0);
}

TEST_CASE("fp32 preset equals no quantization bit for bit", "[proxy_model]") {
    const auto cfg = small_model(Activation::swiglu, true, 16, 2);
    auto tc = small_train("fp32", 10);
    tc.precision = Precision::fp32;
    auto none = tc;
    none.quant = QuantConfig{};
    none.quant.bf16_vector_ops = false;
    const auto a = train_run<float>(cfg, tc), b = train_run<float>(cfg, none);
    for (std::size_t i = 0; i < a.records.size(); ++i) CHECK(a.records[i].loss == b.records[i].loss);
}

TEST_CASE("divergence terminates the run", "[proxy_model]") {
    const auto cfg = small_model(Activation::relu, false, 8, 2);
    auto tc = small_train("fp32", 200);
    tc.optimizer = OptimizerKind::sgd;
    tc.lr = 50.0;
    const auto r = train_run<double>(cfg, tc);
    CHECK(r.status != RunStatus::completed);
    CHECK(r.records.size() < 200);
    const double last = r.records.back().loss;
    CHECK((!std::isfinite(last) || last > kDivergenceLoss));
}

TEST_CASE("dual run with identical presets has zero error", "[proxy_model]") {
    const auto cfg = small_model(Activation::gelu, true, 8, 2);
    const auto tc = small_train("mxfp8-e4m3", 30);
    const auto d = dual_run<double>(cfg, tc, tc);
    REQUIRE(d.paired.size() == 30);
    for (const auto& p : d.paired) {
        CHECK(p.eps_norm == 0.0);
        CHECK(p.zeta_lower == 0.0);
        CHECK(p.cosine == 1.0);
        CHECK(p.loss_hp == p.loss_lp);
    }
    for (std::size_t i = 0; i < 30; ++i) CHECK(d.hp.records[i].loss == d.lp.records[i].loss);

    auto cross = tc;
    cross.eps_mode = EpsMode::cross;
    const auto c = dual_run<double>(cfg, cross, cross);
    for (const auto& p : c.paired) CHECK(p.eps_norm == 0.0);
}

TEST_CASE("dual run under quantization", "[proxy_model]") {
    const auto cfg = small_model(Activation::gelu, true, 32, 2);
    const auto hp = small_train("fp32", 15);
    const auto lp = small_train("mxfp8-e4m3", 15);
    const auto d = dual_run<double>(cfg, hp, lp);
    REQUIRE(d.paired.size() == 15);
    for (std::size_t i = 0; i < d.paired.size(); ++i) {
        const auto& p = d.paired[i];
        CHECK(p.zeta_lower > 0.0);
        CHECK(p.zeta_lower < 1.0);
        CHECK(p.cosine <= 1.0);
        CHECK(p.cosine > 0.5);
        CHECK(p.loss_lp == d.lp.records[i].loss);
    }
    // Step 0: both twins sit at the shared init, so the re-evaluated
    // reference equals the fp32 twin's own gradient.
    CHECK(d.paired[0].g_norm == d.hp.records[0].grad_norm);

    auto bad = lp;
    bad.lr = 2e-3;
    CHECK_THROWS_AS(dual_run<double>(cfg, hp, bad), ConfigError);
}

TEST_CASE("checkpoint resume is bit-identical", "[proxy_model]") {
    const auto cfg = small_model(Activation::gelu, true, 8, 2);
    const auto tc = small_train("mxfp8-mix", 20);
    const auto full = train_run<double>(cfg, tc);

    Trainer<double> first(cfg, tc);
    for (int i = 0; i < 8; ++i) first.advance();
    std::stringstream ss;
    first.save_checkpoint(ss, "abc");
    Trainer<double> resumed(cfg, tc);
    resumed.load_checkpoint(ss, "abc");
    const auto rest = train_run(resumed);
    REQUIRE(rest.records.size() == 12);
    for (std::size_t i = 0; i < 12; ++i) CHECK(rest.records[i].loss == full.records[8 + i].loss);

    std::stringstream again;
    first.save_checkpoint(again, "abc");
    Trainer<double> wrong(cfg, tc);
    CHECK_THROWS_AS(wrong.load_checkpoint(again, "xyz"), IoError);
    std::stringstream junk("nope");
    CHECK_THROWS_AS(wrong.load_checkpoint(junk, "abc"), IoError);
}
