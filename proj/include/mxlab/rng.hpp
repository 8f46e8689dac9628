// Copyright 2026 The mxlab Authors
// SPDX-License-Identifier: Apache-2.0
//
// Counter-based random numbers (Philox4x32-10). Every draw is a pure function
// of (seed, stream, sub, index), so batch t is produced without replaying
// batches 0..t-1 and parallel runs never share generator state.
//
// Normals: Box-Muller on two 53-bit uniforms; one Philox block yields one
// (cos, sin) pair, so normal i comes from block i / 2.

#pragma once

#include <array>
#include <cmath>
#include <cstdint>
#include <numbers>
#include <span>

namespace mxlab {

using PhiloxCounter = std::array<std::uint32_t, 4>;
using PhiloxKey = std::array<std::uint32_t, 2>;

inline PhiloxCounter philox4x32_10(PhiloxCounter ctr, PhiloxKey key) {
    constexpr std::uint32_t m0 = 0xD2511F53u, m1 = 0xCD9E8D57u;
    constexpr std::uint32_t w0 = 0x9E3779B9u, w1 = 0xBB67AE85u;
    for (int round = 0; round < 10; ++round) {
        const std::uint64_t p0 = static_cast<std::uint64_t>(m0) * ctr[0];
        const std::uint64_t p1 = static_cast<std::uint64_t>(m1) * ctr[2];
        ctr = {static_cast<std::uint32_t>(p1 >> 32) ^ ctr[1] ^ key[0], static_cast<std::uint32_t>(p1),
               static_cast<std::uint32_t>(p0 >> 32) ^ ctr[3] ^ key[1], static_cast<std::uint32_t>(p0)};
        key[0] += w0;
        key[1] += w1;
    }
    return ctr;
}

/// Independent substreams. Values are part of the on-disk determinism
/// contract; do not renumber.
enum class Stream : std::uint32_t {
    student_init = 1,
    teacher_init = 2,
    inputs = 3,
    label_noise = 4,
    lambda_probe = 5,
    synthetic = 6,
};

class CounterRng {
public:
    /// `sub` selects a lane within the stream: the step for data streams,
    /// the parameter id for initialization.
    CounterRng(std::uint64_t seed, Stream stream, std::uint32_t sub)
        : key_{static_cast<std::uint32_t>(seed), static_cast<std::uint32_t>(seed >> 32)},
          stream_(static_cast<std::uint32_t>(stream)),
          sub_(sub) {}

    PhiloxCounter block(std::uint64_t i) const {
        return philox4x32_10({static_cast<std::uint32_t>(i), static_cast<std::uint32_t>(i >> 32), sub_, stream_}, key_);
    }

    /// Two uniforms in (0, 1] from block i.
    std::array<double, 2> uniform_pair(std::uint64_t i) const {
        const auto b = block(i);
        return {to_unit((static_cast<std::uint64_t>(b[0]) << 32) | b[1]),
                to_unit((static_cast<std::uint64_t>(b[2]) << 32) | b[3])};
    }

    std::array<double, 2> normal_pair(std::uint64_t i) const {
        const auto [u1, u2] = uniform_pair(i);
        const double r = std::sqrt(-2.0 * std::log(u1));
        const double theta = 2.0 * std::numbers::pi * u2;
        return {r * std::cos(theta), r * std::sin(theta)};
    }

    template <typename T>
    void fill_normal(std::span<T> out, double mean = 0.0, double stddev = 1.0) const {
        for (std::size_t i = 0; i < out.size(); i += 2) {
            const auto z = normal_pair(i / 2);
            out[i] = static_cast<T>(mean + stddev * z[0]);
            if (i + 1 < out.size()) out[i + 1] = static_cast<T>(mean + stddev * z[1]);
        }
    }

    /// Uniform on [lo, hi).
    template <typename T>
    void fill_uniform(std::span<T> out, double lo, double hi) const {
        for (std::size_t i = 0; i < out.size(); i += 2) {
            const auto u = uniform_pair(i / 2);
            out[i] = static_cast<T>(lo + (hi - lo) * (1.0 - u[0]));
            if (i + 1 < out.size()) out[i + 1] = static_cast<T>(lo + (hi - lo) * (1.0 - u[1]));
        }
    }

private:
    static double to_unit(std::uint64_t bits) { return static_cast<double>((bits >> 11) + 1) * 0x1p-53; }

    PhiloxKey key_;
    std::uint32_t stream_;
    std::uint32_t sub_;
};

}  // namespace mxlab
