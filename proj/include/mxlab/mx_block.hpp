// Copyright 2026 The mxlab Authors
// SPDX-License-Identifier: Apache-2.0
//
// MX block quantization: k values share one power-of-two scale
// X = 2^(floor(log2(max |V_i|)) - e_max_elem), and each V_i / X is cast to the
// element format with saturation.

#pragma once

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <iostream>
#include <mutex>
#include <span>
#include <string>
#include <vector>

#include "mxlab/errors.hpp"
#include "mxlab/fp_codec.hpp"
#include "mxlab/tensor.hpp"

namespace mxlab {

struct MXSpec {
    FormatId element = FormatId::e4m3;
    int block_size = 32;
    RoundingMode rounding = RoundingMode::nearest_even;
    int exponent_offset = 0;        // 1 under the bump-exponent intervention
    bool conditional_bump = false;  // apply the offset only to blocks with overflowing elements
    bool flush_subnormals = false;

    const FloatFormat& format() const { return format_of(element); }

    void validate() const {
        if (block_size < 1) throw InvalidInput("MX block size must be >= 1");
        if (exponent_offset != 0 && exponent_offset != 1) throw InvalidInput("MX exponent offset must be 0 or 1");
    }

    friend bool operator==(const MXSpec&, const MXSpec&) = default;
};

struct MXBlock {
    int shared_exp = E8M0::min_exp;
    std::vector<CodeWord> codes;  // always block_size entries; padding codes are zero
    std::size_t valid = 0;        // number of non-padding codes
};

struct MXTensor {
    Shape shape;
    std::size_t axis = 0;
    MXSpec spec;
    std::vector<MXBlock> blocks;  // fiber-major: all blocks of fiber 0, then fiber 1, ...
    std::size_t blocks_per_fiber = 0;
    std::size_t tail_len = 0;  // valid elements in the last block of each fiber
};

struct QuantStats {
    std::size_t elements = 0;
    std::size_t last_bin = 0;

    double fraction() const { return elements ? static_cast<double>(last_bin) / static_cast<double>(elements) : 0.0; }
    QuantStats& operator+=(const QuantStats& o) {
        elements += o.elements;
        last_bin += o.last_bin;
        return *this;
    }
};

namespace detail {

inline void warn_scale_clamp(int raw) {
    static std::once_flag once;
    std::call_once(once, [raw] {
        std::clog << "mxlab: warning: shared exponent " << raw << " clamped to the E8M0 range [" << E8M0::min_exp
                  << ", " << E8M0::max_exp << "] (further clamps not reported)\n";
    });
}

inline int clamp_scale_exp(int e) {
    if (e < E8M0::min_exp || e > E8M0::max_exp) {
        warn_scale_clamp(e);
        return std::clamp(e, E8M0::min_exp, E8M0::max_exp);
    }
    return e;
}

// Shared exponent for a block with the given absmax (finite, >= 0).
inline int shared_exp_for_absmax(double absmax, const MXSpec& spec, bool block_overflows) {
    if (absmax == 0.0) return E8M0::min_exp;
    int e = std::ilogb(absmax) - spec.format().e_max_elem;
    if (spec.exponent_offset != 0 && (!spec.conditional_bump || block_overflows)) e += spec.exponent_offset;
    return clamp_scale_exp(e);
}

inline bool any_overflow(std::span<const double> values, double absmax, const MXSpec& spec) {
    if (absmax == 0.0) return false;
    const int base = std::ilogb(absmax) - spec.format().e_max_elem;
    const double limit = std::ldexp(spec.format().max_normal, base);
    return std::any_of(values.begin(), values.end(), [&](double v) { return std::fabs(v) > limit; });
}

inline std::uint32_t magnitude_mask(const FloatFormat& fmt) { return fmt.sign_bit() - 1u; }

}  // namespace detail

/// floor(log2(max |V_i|)) - e_max_elem (+ exponent_offset), clamped to E8M0.
/// An all-zero block gets the minimum E8M0 exponent.
inline int compute_shared_exponent(std::span<const double> values, const MXSpec& spec) {
    spec.validate();
    if (values.empty()) throw InvalidInput("shared exponent of an empty block");
    double absmax = 0.0;
    for (std::size_t i = 0; i < values.size(); ++i) {
        if (!std::isfinite(values[i]))
            throw InvalidInput("non-finite value at block index " + std::to_string(i));
        absmax = std::max(absmax, std::fabs(values[i]));
    }
    const bool overflow = spec.conditional_bump && detail::any_overflow(values, absmax, spec);
    return detail::shared_exp_for_absmax(absmax, spec, overflow);
}

inline MXBlock quantize_block(std::span<const double> values, const MXSpec& spec) {
    if (values.size() > static_cast<std::size_t>(spec.block_size))
        throw InvalidInput("block of " + std::to_string(values.size()) + " values exceeds block size " +
                           std::to_string(spec.block_size));
    MXBlock block;
    block.shared_exp = compute_shared_exponent(values, spec);
    block.valid = values.size();
    block.codes.assign(static_cast<std::size_t>(spec.block_size), CodeWord{0, spec.element});
    const double inv_scale = std::ldexp(1.0, -block.shared_exp);
    for (std::size_t i = 0; i < values.size(); ++i) {
        block.codes[i] = encode_scalar(values[i] * inv_scale, spec.format(), spec.rounding, /*saturate=*/true,
                                       spec.flush_subnormals);
    }
    return block;
}

inline std::vector<double> dequantize_block(const MXBlock& block, const MXSpec& /*spec*/) {
    std::vector<double> out(block.valid);
    for (std::size_t i = 0; i < block.valid; ++i) out[i] = std::ldexp(decode_scalar(block.codes[i]), block.shared_exp);
    return out;
}

namespace detail {

struct FiberLayout {
    std::size_t outer, len, inner;
};

inline FiberLayout fiber_layout(const Shape& shape, std::size_t axis) {
    if (axis >= shape.size()) throw InvalidInput("blocking axis " + std::to_string(axis) + " invalid for shape " + shape_string(shape));
    FiberLayout f{1, shape[axis], 1};
    for (std::size_t i = 0; i < axis; ++i) f.outer *= shape[i];
    for (std::size_t i = axis + 1; i < shape.size(); ++i) f.inner *= shape[i];
    return f;
}

inline std::string multi_index(const Shape& shape, std::size_t flat) {
    std::vector<std::size_t> idx(shape.size());
    for (std::size_t i = shape.size(); i-- > 0;) {
        idx[i] = flat % shape[i];
        flat /= shape[i];
    }
    return shape_string(idx);
}

template <typename T>
void check_finite(const Tensor<T>& t) {
    for (std::size_t i = 0; i < t.size(); ++i) {
        if (!std::isfinite(static_cast<double>(t[i])))
            throw InvalidInput("non-finite tensor element at index " + multi_index(t.shape(), i));
    }
}

}  // namespace detail

/// Splits every fiber along `axis` into ceil(len / k) blocks.
template <typename T>
MXTensor quantize_tensor(const Tensor<T>& t, const MXSpec& spec, std::size_t axis) {
    spec.validate();
    detail::check_finite(t);
    const auto f = detail::fiber_layout(t.shape(), axis);
    const auto k = static_cast<std::size_t>(spec.block_size);
    MXTensor out;
    out.shape = t.shape();
    out.axis = axis;
    out.spec = spec;
    out.blocks_per_fiber = f.len == 0 ? 0 : (f.len + k - 1) / k;
    out.tail_len = f.len == 0 ? 0 : f.len - (out.blocks_per_fiber - 1) * k;
    out.blocks.reserve(f.outer * f.inner * out.blocks_per_fiber);
    std::vector<double> buf;
    for (std::size_t o = 0; o < f.outer; ++o) {
        for (std::size_t i = 0; i < f.inner; ++i) {
            for (std::size_t b = 0; b < out.blocks_per_fiber; ++b) {
                const std::size_t start = b * k;
                const std::size_t n = std::min(k, f.len - start);
                buf.resize(n);
                for (std::size_t j = 0; j < n; ++j) buf[j] = static_cast<double>(t[(o * f.len + start + j) * f.inner + i]);
                out.blocks.push_back(quantize_block(buf, spec));
            }
        }
    }
    return out;
}

template <typename T = double>
Tensor<T> dequantize_tensor(const MXTensor& mt) {
    Tensor<T> out(mt.shape);
    const auto f = detail::fiber_layout(mt.shape, mt.axis);
    const auto k = static_cast<std::size_t>(mt.spec.block_size);
    std::size_t bi = 0;
    for (std::size_t o = 0; o < f.outer; ++o) {
        for (std::size_t i = 0; i < f.inner; ++i) {
            for (std::size_t b = 0; b < mt.blocks_per_fiber; ++b, ++bi) {
                const auto vals = dequantize_block(mt.blocks[bi], mt.spec);
                for (std::size_t j = 0; j < vals.size(); ++j)
                    out[(o * f.len + b * k + j) * f.inner + i] = static_cast<T>(vals[j]);
            }
        }
    }
    return out;
}

/// Fraction of (non-padding) elements whose code is the max-magnitude finite
/// code, whether they were clamped or rounded onto it.
inline double last_bin_fraction(const MXTensor& mt) {
    const FloatFormat& fmt = mt.spec.format();
    const std::uint32_t top = max_finite_code(fmt).bits;
    const std::uint32_t mask = detail::magnitude_mask(fmt);
    std::size_t hits = 0, total = 0;
    for (const auto& b : mt.blocks) {
        for (std::size_t j = 0; j < b.valid; ++j) hits += (b.codes[j].bits & mask) == top;
        total += b.valid;
    }
    return total ? static_cast<double>(hits) / static_cast<double>(total) : 0.0;
}

template <typename T>
double last_bin_fraction(const Tensor<T>& t, const MXSpec& spec, std::size_t axis) {
    return last_bin_fraction(quantize_tensor(t, spec, axis));
}

/// True iff |v| / 2^shared_exp(block_absmax) exceeds max_normal. For E4M3
/// with absmax just below a power of two this reduces to |v| > 0.875 * absmax.
inline bool overflow_predicate(double v, double block_absmax, const MXSpec& spec) {
    if (!(block_absmax >= std::fabs(v)) || v == 0.0) throw InvalidInput("overflow_predicate requires absmax >= |v| > 0");
    const int base = std::ilogb(block_absmax) - spec.format().e_max_elem + spec.exponent_offset;
    return std::ldexp(std::fabs(v), -detail::clamp_scale_exp(base)) > spec.format().max_normal;
}

/// Quantize-then-dequantize a rank-2 row-major matrix in one pass, blocking
/// along `axis` (1 = along rows, 0 = down columns). Produces exactly
/// dequantize_tensor(quantize_tensor(src)) without materializing codes.
template <typename T>
void fake_quantize(const T* src, T* dst, std::size_t rows, std::size_t cols, std::size_t axis, const MXSpec& spec,
                   QuantStats* stats = nullptr) {
    spec.validate();
    const FloatFormat& fmt = spec.format();
    const ValueRounder rounder(fmt, spec.rounding, true, spec.flush_subnormals);
    const double max_normal = fmt.max_normal;
    const auto k = static_cast<std::size_t>(spec.block_size);
    const bool conditional = spec.conditional_bump && spec.exponent_offset != 0;
    std::size_t last = 0;
    auto overflow_limit = [&](double absmax) {
        return std::ldexp(max_normal, std::ilogb(absmax) - fmt.e_max_elem);
    };
    if (axis == 1) {
        for (std::size_t r = 0; r < rows; ++r) {
            const T* s = src + r * cols;
            T* d = dst + r * cols;
            for (std::size_t c0 = 0; c0 < cols; c0 += k) {
                const std::size_t n = std::min(k, cols - c0);
                double absmax = 0.0;
                for (std::size_t j = 0; j < n; ++j) absmax = std::max(absmax, std::fabs(static_cast<double>(s[c0 + j])));
                if (!std::isfinite(absmax)) throw InvalidInput("non-finite value in row " + std::to_string(r));
                bool overflow = false;
                if (conditional && absmax > 0.0) {
                    const double limit = overflow_limit(absmax);
                    for (std::size_t j = 0; j < n; ++j) overflow |= std::fabs(static_cast<double>(s[c0 + j])) > limit;
                }
                const int se = detail::shared_exp_for_absmax(absmax, spec, overflow);
                const double inv = std::ldexp(1.0, -se), scale = std::ldexp(1.0, se);
                for (std::size_t j = 0; j < n; ++j) {
                    const double q = rounder(static_cast<double>(s[c0 + j]) * inv);
                    last += std::fabs(q) == max_normal;
                    d[c0 + j] = static_cast<T>(q * scale);
                }
            }
        }
    } else if (axis == 0) {
        std::vector<double> absmax(cols), inv(cols), scale(cols);
        std::vector<char> overflow(cols);
        for (std::size_t r0 = 0; r0 < rows; r0 += k) {
            const std::size_t n = std::min(k, rows - r0);
            std::fill(absmax.begin(), absmax.end(), 0.0);
            for (std::size_t j = 0; j < n; ++j) {
                const T* s = src + (r0 + j) * cols;
                for (std::size_t c = 0; c < cols; ++c) absmax[c] = std::max(absmax[c], std::fabs(static_cast<double>(s[c])));
            }
            for (std::size_t c = 0; c < cols; ++c) {
                if (!std::isfinite(absmax[c])) throw InvalidInput("non-finite value in column " + std::to_string(c));
            }
            std::fill(overflow.begin(), overflow.end(), 0);
            if (conditional) {
                for (std::size_t c = 0; c < cols; ++c) {
                    if (absmax[c] == 0.0) continue;
                    const double limit = overflow_limit(absmax[c]);
                    for (std::size_t j = 0; j < n; ++j)
                        overflow[c] |= std::fabs(static_cast<double>(src[(r0 + j) * cols + c])) > limit;
                }
            }
            for (std::size_t c = 0; c < cols; ++c) {
                const int se = detail::shared_exp_for_absmax(absmax[c], spec, overflow[c] != 0);
                inv[c] = std::ldexp(1.0, -se);
                scale[c] = std::ldexp(1.0, se);
            }
            for (std::size_t j = 0; j < n; ++j) {
                const T* s = src + (r0 + j) * cols;
                T* d = dst + (r0 + j) * cols;
                for (std::size_t c = 0; c < cols; ++c) {
                    const double q = rounder(static_cast<double>(s[c]) * inv[c]);
                    last += std::fabs(q) == max_normal;
                    d[c] = static_cast<T>(q * scale[c]);
                }
            }
        }
    } else {
        throw InvalidInput("fake_quantize supports axis 0 or 1");
    }
    if (stats) {
        stats->elements += rows * cols;
        stats->last_bin += last;
    }
}

/// Elementwise bfloat16 rounding (no block scale).
template <typename T>
void round_bf16(const T* src, T* dst, std::size_t n) {
    const ValueRounder rounder(kBF16, RoundingMode::nearest_even, /*saturate=*/false);
    for (std::size_t i = 0; i < n; ++i) dst[i] = static_cast<T>(rounder(static_cast<double>(src[i])));
}

}  // namespace mxlab
