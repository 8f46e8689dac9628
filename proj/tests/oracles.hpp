// Copyright 2026 The mxlab Authors
// SPDX-License-Identifier: Apache-2.0
//
// Test-only reference implementations. Nothing here calls into the code paths
// it is used to check.

#pragma once

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <functional>
#include <random>
#include <vector>

#include "mxlab/fp_codec.hpp"

namespace mxlab::oracle {

/// Exhaustive bit-level table of every finite non-negative value, built by
/// decoding sign/exponent/mantissa fields with plain arithmetic.
struct CodeTable {
    const FloatFormat* fmt;
    std::vector<double> values;        // ascending, values[0] == 0
    std::vector<std::uint32_t> bits;   // matching codes

    explicit CodeTable(const FloatFormat& f) : fmt(&f) {
        const int m = f.mantissa_bits;
        const int top = (1 << f.exponent_bits) - 1;
        for (int e = 0; e <= top; ++e) {
            for (int man = 0; man < (1 << m); ++man) {
                if (e == top && f.nan_encoding == NanEncoding::ieee_like) continue;
                if (e == top && man == (1 << m) - 1 && f.nan_encoding == NanEncoding::reserved_max_code) continue;
                double v;
                if (e == 0) {
                    v = man * std::pow(2.0, 1 - f.bias - m);
                } else {
                    v = (1.0 + man / std::pow(2.0, m)) * std::pow(2.0, e - f.bias);
                }
                values.push_back(v);
                bits.push_back(static_cast<std::uint32_t>((e << m) | man));
            }
        }
    }

    double max_value() const { return values.back(); }

    /// Nearest representable value, ties to the code with an even mantissa,
    /// saturating beyond the largest finite value.
    std::uint32_t nearest(double v) const {
        const std::uint32_t sign = std::signbit(v) ? fmt->sign_bit() : 0u;
        const double a = std::fabs(v);
        if (a >= max_value()) return sign | bits.back();
        const auto it = std::lower_bound(values.begin(), values.end(), a);
        const std::size_t hi = static_cast<std::size_t>(it - values.begin());
        if (values[hi] == a) return sign | bits[hi];
        const std::size_t lo = hi - 1;
        const double dl = a - values[lo], dh = values[hi] - a;
        std::size_t pick;
        if (dl < dh) pick = lo;
        else if (dh < dl) pick = hi;
        else pick = (bits[lo] & 1u) == 0 ? lo : hi;
        return sign | bits[pick];
    }

    /// Largest representable magnitude not exceeding |v| (round toward zero).
    std::uint32_t truncate(double v) const {
        const std::uint32_t sign = std::signbit(v) ? fmt->sign_bit() : 0u;
        const double a = std::fabs(v);
        const auto it = std::upper_bound(values.begin(), values.end(), a);
        return sign | bits[static_cast<std::size_t>(it - values.begin()) - 1];
    }
};

/// Random values spread log-uniformly over a format's subnormal, normal and
/// overflow ranges, random sign.
inline std::vector<double> random_values(const FloatFormat& f, std::size_t n, std::uint64_t seed) {
    std::mt19937_64 gen(seed);
    const double lo = f.min_normal_exp() - f.mantissa_bits - 2;
    const double hi = std::log2(f.max_normal) + 1.5;
    std::uniform_real_distribution<double> ex(lo, hi);
    std::bernoulli_distribution neg(0.5);
    std::vector<double> out(n);
    for (auto& v : out) {
        v = std::exp2(ex(gen));
        if (neg(gen)) v = -v;
    }
    return out;
}

/// Central finite differences of a scalar function of a parameter vector.
inline std::vector<double> central_differences(const std::function<double(const std::vector<double>&)>& f,
                                               std::vector<double> w, double h) {
    std::vector<double> g(w.size());
    for (std::size_t i = 0; i < w.size(); ++i) {
        const double orig = w[i];
        w[i] = orig + h;
        const double fp = f(w);
        w[i] = orig - h;
        const double fm = f(w);
        w[i] = orig;
        g[i] = (fp - fm) / (2 * h);
    }
    return g;
}

}  // namespace mxlab::oracle
