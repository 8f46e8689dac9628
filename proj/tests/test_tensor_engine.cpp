// Copyright 2026 The mxlab Authors
// SPDX-License-Identifier: Apache-2.0

#include <catch_amalgamated.hpp>

#include <cmath>
#include <random>
#include <vector>

#include "mxlab/layers.hpp"
#include "oracles.hpp"

using namespace mxlab;
using Catch::Matchers::WithinAbs;
using Catch::Matchers::WithinRel;

namespace {

Tensor<double> randn(std::size_t r, std::size_t c, std::uint64_t seed, double scale = 1.0, double shift = 0.0) {
    std::mt19937_64 gen(seed);
    std::normal_distribution<double> n(shift, scale);
    Tensor<double> t({r, c});
    for (auto& v : t.vec()) v = n(gen);
    return t;
}

Tensor<double> eye(std::size_t n) {
    Tensor<double> t = Tensor<double>::matrix(n, n);
    for (std::size_t i = 0; i < n; ++i) t(i, i) = 1.0;
    return t;
}

double max_rel_err(const std::vector<double>& a, const std::vector<double>& b) {
    double scale = 0.0, err = 0.0;
    for (std::size_t i = 0; i < a.size(); ++i) {
        scale = std::max(scale, std::fabs(b[i]));
        err = std::max(err, std::fabs(a[i] - b[i]));
    }
    return scale == 0.0 ? err : err / scale;
}

const QuantFormat kPass = QuantFormat::none();
const QuantFormat kMxE4M3 = QuantFormat::mx_of(FormatId::e4m3);

}  // namespace

TEST_CASE("quant presets", "[tensor_engine]") {
    const auto mix = quant_preset("mxfp8-mix");
    CHECK(mix.at(QuantRole::fwd_weight).mx.element == FormatId::e4m3);
    CHECK(mix.at(QuantRole::grad_output).mx.element == FormatId::e5m2);
    CHECK(mix.uses_bf16_vector_ops());
    auto fo = quant_preset("mxfp8-e4m3");
    fo.forward_only = true;
    for (QuantRole r : kAllRoles) CHECK(fo.at(r).is_none() == is_backward(r));
    CHECK_FALSE(quant_preset("fp32").any_quantization());
    CHECK(quant_preset("weights-mx-acts-bf16").at(QuantRole::fwd_activation).kind == QuantFormat::Kind::bf16);
    CHECK_THROWS_AS(quant_preset("fp4"), InvalidInput);
    CHECK(parse_quant_format("e5m2")->mx.element == FormatId::e5m2);
    CHECK(parse_quant_format("bf16")->kind == QuantFormat::Kind::bf16);
    CHECK_FALSE(parse_quant_format("int8"));
}

TEST_CASE("matmul_q pass-through and examples", "[tensor_engine]") {
    const auto x = randn(5, 5, 1);
    CHECK(matmul_q(eye(5), Trans::no, x, Trans::no, kPass, kPass) == x);

    const Tensor<double> a({1, 1}, {1.0});
    const Tensor<double> b({1, 1}, {470.0});
    CHECK(matmul_q(a, Trans::no, b, Trans::no, kPass, kMxE4M3)[0] == 448.0);

    const Tensor<double> ones({2, 2}, 1.0);
    const auto c = matmul_q(ones, ones, QuantPoint{QuantRole::fwd_activation, kMxE4M3},
                            QuantPoint{QuantRole::fwd_weight, kMxE4M3});
    CHECK(c == Tensor<double>({2, 2}, 2.0));
}

TEST_CASE("matmul_q transposes match explicit quantization", "[tensor_engine]") {
    // Blocks must follow the contraction dimension for every transpose combination.
    const auto a = randn(6, 40, 2);   // [m, k]
    const auto b = randn(40, 3, 3);   // [k, n]
    auto transpose = [](const Tensor<double>& t) {
        Tensor<double> o({t.cols(), t.rows()});
        for (std::size_t i = 0; i < t.rows(); ++i)
            for (std::size_t j = 0; j < t.cols(); ++j) o(j, i) = t(i, j);
        return o;
    };
    const auto qa = dequantize_tensor(quantize_tensor(a, kMxE4M3.mx, 1));
    const auto qb = dequantize_tensor(quantize_tensor(b, kMxE4M3.mx, 0));
    Tensor<double> ref = Tensor<double>::matrix(6, 3);
    for (std::size_t i = 0; i < 6; ++i)
        for (std::size_t j = 0; j < 3; ++j) {
            long double s = 0;
            for (std::size_t k = 0; k < 40; ++k) s += static_cast<long double>(qa(i, k)) * qb(k, j);
            ref(i, j) = static_cast<double>(s);
        }
    const auto at = transpose(a), bt = transpose(b);
    for (auto [ta, tb] : std::vector<std::pair<Trans, Trans>>{{Trans::no, Trans::no}, {Trans::yes, Trans::no}, {Trans::no, Trans::yes},
                                                          {Trans::yes, Trans::yes}}) {
        const auto c = matmul_q(ta == Trans::no ? a : at, ta, tb == Trans::no ? b : bt, tb, kMxE4M3, kMxE4M3);
        CHECK(max_rel_err(c.vec(), ref.vec()) < 1e-14);
    }
}

TEST_CASE("matmul_q errors", "[tensor_engine]") {
    const Tensor<double> a({2, 3}, 1.0);
    const Tensor<double> b({2, 3}, 1.0);
    CHECK_THROWS_AS(matmul_q(a, Trans::no, b, Trans::no, kPass, kPass), ShapeMismatch);
    Tensor<double> bad = a;
    bad[4] = std::nan("");
    CHECK_THROWS_WITH(matmul_q(a, Trans::no, bad, Trans::yes, kPass, kPass), Catch::Matchers::ContainsSubstring("operand B"));
    CHECK_THROWS_WITH(matmul_q(bad, Trans::no, b, Trans::yes, kPass, kPass), Catch::Matchers::ContainsSubstring("operand A"));
}

TEST_CASE("matmul_q is deterministic", "[tensor_engine]") {
    const auto a = randn(64, 96, 4).cast<float>();
    const auto b = randn(96, 80, 5).cast<float>();
    const auto c1 = matmul_q(a, Trans::no, b, Trans::no, kMxE4M3, kMxE4M3);
    const auto c2 = matmul_q(a, Trans::no, b, Trans::no, kMxE4M3, kMxE4M3);
    CHECK(c1 == c2);
}

TEST_CASE("quantization stays local to its operand", "[tensor_engine]") {
    const auto a = randn(4, 32, 6);
    const auto b = randn(32, 4, 7);
    QuantStats sa, sb;
    matmul_q(a, Trans::no, b, Trans::no, kPass, kMxE4M3, &sa, &sb);
    CHECK(sa.elements == 0);
    CHECK(sb.elements == 128);
    Tensor<double> scratch;
    const auto& pass = quantized(a, kPass, 1, scratch);
    CHECK(&pass == &a);
}

TEST_CASE("layernorm forward", "[tensor_engine]") {
    const std::size_t d = 8;
    const Tensor<double> ones({1, d}, 1.0), zeros({1, d}, 0.0);
    // Rows with zero mean and unit variance pass through up to the eps term.
    Tensor<double> x({2, d});
    for (std::size_t j = 0; j < d; ++j) {
        x(0, j) = (j % 2 ? 1.0 : -1.0);
        x(1, j) = (j < 4 ? 1.0 : -1.0);
    }
    LayerNormCache<double> cache;
    const auto y = layernorm_fwd(x, ones, zeros, 1e-5, kPass, false, cache);
    for (std::size_t i = 0; i < x.size(); ++i) CHECK_THAT(y[i], WithinRel(x[i] / std::sqrt(1.0 + 1e-5), 1e-15));

    // Effective gamma collapses to 0.875 under E4M3.
    std::mt19937_64 gen(9);
    std::uniform_real_distribution<double> u(0.88, 0.91);
    Tensor<double> gamma({1, 32});
    for (auto& g : gamma.vec()) g = u(gen);
    const auto x2 = randn(3, 32, 10);
    layernorm_fwd(x2, gamma, Tensor<double>({1, 32}, 0.0), 1e-5, kMxE4M3, false, cache);
    for (double g : cache.gamma_eff.vec()) CHECK(g == 0.875);

    // q_ln = none reproduces the working-precision formula bit for bit.
    const auto y2 = layernorm_fwd(x2, gamma, Tensor<double>({1, 32}, 0.25), 1e-5, kPass, false, cache);
    for (std::size_t i = 0; i < 3; ++i) {
        double mean = 0, var = 0;
        for (std::size_t j = 0; j < 32; ++j) mean += x2(i, j);
        mean /= 32;
        for (std::size_t j = 0; j < 32; ++j) var += (x2(i, j) - mean) * (x2(i, j) - mean);
        var /= 32;
        const double rstd = 1.0 / std::sqrt(var + 1e-5);
        for (std::size_t j = 0; j < 32; ++j) CHECK(y2(i, j) == gamma[j] * ((x2(i, j) - mean) * rstd) + 0.25);
    }
}

TEST_CASE("layernorm bf16 vector ops", "[tensor_engine]") {
    const auto x = randn(4, 32, 11, 1.0, 3.0);
    const Tensor<double> gamma({1, 32}, 1.1), beta({1, 32}, 0.3);
    LayerNormCache<double> c1, c2;
    const auto exact = layernorm_fwd(x, gamma, beta, 1e-5, kPass, false, c1);
    const auto low = layernorm_fwd(x, gamma, beta, 1e-5, kPass, true, c2);
    const ValueRounder bf(kBF16, RoundingMode::nearest_even, false);
    bool differs = false;
    for (std::size_t i = 0; i < x.size(); ++i) {
        CHECK(low[i] == bf(low[i]));  // outputs live on the bf16 grid
        CHECK_THAT(low[i], WithinAbs(exact[i], 0.05));
        differs |= low[i] != exact[i];
    }
    CHECK(differs);
}

TEST_CASE("layernorm backward", "[tensor_engine]") {
    const std::size_t rows = 4, d = 8;
    const auto x = randn(rows, d, 12);
    auto gamma = randn(1, d, 13, 0.2, 1.0);
    const auto beta = randn(1, d, 14, 0.1);
    const auto dy = randn(rows, d, 15);

    SECTION("zero upstream gradient") {
        LayerNormCache<double> cache;
        layernorm_fwd(x, gamma, beta, 1e-5, kPass, false, cache);
        const auto g = layernorm_bwd(cache, Tensor<double>({rows, d}, 0.0));
        for (double v : g.dx.vec()) CHECK(v == 0.0);
        for (double v : g.dgamma.vec()) CHECK(v == 0.0);
        for (double v : g.dbeta.vec()) CHECK(v == 0.0);
    }

    SECTION("central differences") {
        auto objective = [&](const Tensor<double>& xx, const Tensor<double>& gg, const Tensor<double>& bb) {
            LayerNormCache<double> c;
            const auto y = layernorm_fwd(xx, gg, bb, 1e-5, kPass, false, c);
            double s = 0;
            for (std::size_t i = 0; i < y.size(); ++i) s += y[i] * dy[i];
            return s;
        };
        LayerNormCache<double> cache;
        layernorm_fwd(x, gamma, beta, 1e-5, kPass, false, cache);
        const auto g = layernorm_bwd(cache, dy);
        const auto fdx = oracle::central_differences(
            [&](const std::vector<double>& w) { return objective(Tensor<double>({rows, d}, w), gamma, beta); }, x.vec(), 1e-5);
        const auto fdg = oracle::central_differences(
            [&](const std::vector<double>& w) { return objective(x, Tensor<double>({1, d}, w), beta); }, gamma.vec(), 1e-5);
        const auto fdb = oracle::central_differences(
            [&](const std::vector<double>& w) { return objective(x, gamma, Tensor<double>({1, d}, w)); }, beta.vec(), 1e-5);
        CHECK(max_rel_err(g.dx.vec(), fdx) < 1e-6);
        CHECK(max_rel_err(g.dgamma.vec(), fdg) < 1e-6);
        CHECK(max_rel_err(g.dbeta.vec(), fdb) < 1e-6);
    }

    SECTION("gamma gradient identity") {
        LayerNormCache<double> cache;
        layernorm_fwd(x, Tensor<double>({1, d}, 1.0), beta, 1e-5, kPass, false, cache);
        const auto g = layernorm_bwd(cache, dy);
        for (std::size_t j = 0; j < d; ++j) {
            double s = 0;
            for (std::size_t i = 0; i < rows; ++i) s += dy(i, j) * cache.xhat(i, j);
            CHECK_THAT(g.dgamma[j], WithinRel(s, 1e-14));
        }
    }

    SECTION("backward uses the effective gamma") {
        LayerNormCache<double> cache;
        const Tensor<double> g89({1, d}, 0.89);
        layernorm_fwd(x, g89, beta, 1e-5, kMxE4M3, false, cache);
        LayerNormCache<double> ref;
        layernorm_fwd(x, Tensor<double>({1, d}, 0.875), dequantize_tensor(quantize_tensor(beta, kMxE4M3.mx, 1)), 1e-5,
                      kPass, false, ref);
        CHECK(layernorm_bwd(cache, dy).dx == layernorm_bwd(ref, dy).dx);
    }
}

TEST_CASE("activations", "[tensor_engine]") {
    const Tensor<double> h({1, 2}, {-1.0, 2.0});
    const auto r = activation_fwd(Activation::relu, h);
    CHECK(r[0] == 0.0);
    CHECK(r[1] == 2.0);

    const Tensor<double> z({1, 1}, {0.0});
    CHECK(activation_fwd(Activation::gelu, z)[0] == 0.0);
    CHECK(activation_bwd(Activation::gelu, z, Tensor<double>({1, 1}, 1.0))[0] == 0.5);
    CHECK_THAT(activation_fwd(Activation::gelu, Tensor<double>({1, 1}, {1.0}))[0], WithinRel(0.8413447460685429, 1e-14));

    Tensor<double> sw({2, 6});
    for (std::size_t j = 3; j < 6; ++j) sw(0, j) = sw(1, j) = 7.0 * static_cast<double>(j);
    const auto so = activation_fwd(Activation::swiglu, sw);
    CHECK(so.shape() == Shape{2, 3});
    for (double v : so.vec()) CHECK(v == 0.0);
    CHECK_THROWS_AS(activation_fwd(Activation::swiglu, Tensor<double>({2, 5})), ShapeMismatch);

    CHECK(parse_activation("gelu") == Activation::gelu);
    CHECK_FALSE(parse_activation("tanh"));
}

TEST_CASE("activation gradients match central differences", "[tensor_engine]") {
    for (Activation kind : {Activation::relu, Activation::gelu, Activation::swiglu}) {
        CAPTURE(to_string(kind));
        auto h = randn(3, 8, 16);
        for (auto& v : h.vec())
            if (std::fabs(v) < 1e-3) v += 0.01;  // keep relu away from its kink
        const std::size_t out_cols = kind == Activation::swiglu ? 4 : 8;
        const auto dout = randn(3, out_cols, 17);
        const auto g = activation_bwd(kind, h, dout);
        const auto fd = oracle::central_differences(
            [&](const std::vector<double>& w) {
                const auto o = activation_fwd(kind, Tensor<double>({3, 8}, w));
                double s = 0;
                for (std::size_t i = 0; i < o.size(); ++i) s += o[i] * dout[i];
                return s;
            },
            h.vec(), 1e-6);
        CHECK(max_rel_err(g.vec(), fd) < 1e-7);
    }
}

TEST_CASE("mse loss", "[tensor_engine]") {
    const auto p = randn(7, 9, 18);
    const auto same = mse_loss(p, p);
    CHECK(same.loss == 0.0);
    for (double v : same.dpred.vec()) CHECK(v == 0.0);

    Tensor<double> q = p;
    for (auto& v : q.vec()) v -= 1.0;
    CHECK_THAT(mse_loss(p, q).loss, WithinRel(1.0, 1e-15));

    const auto t = randn(7, 9, 19);
    long double s = 0;
    for (std::size_t i = 0; i < p.size(); ++i) {
        const long double diff = static_cast<long double>(p[i]) - t[i];
        s += diff * diff;
    }
    const auto r = mse_loss(p, t);
    CHECK_THAT(r.loss, WithinRel(static_cast<double>(s / p.size()), 1e-12));
    for (std::size_t i = 0; i < p.size(); ++i) CHECK(r.dpred[i] == 2.0 * (p[i] - t[i]) / 63.0);
    CHECK_THROWS_AS(mse_loss(p, Tensor<double>({9, 7})), ShapeMismatch);
}
