// Copyright 2026 The mxlab Authors
// SPDX-License-Identifier: Apache-2.0
//
// Bit-exact scalar codecs for the minifloat element formats (E4M3, E5M2,
// E2M3, E3M2), bfloat16, and the E8M0 block-scale format.
//
// Encoding always goes through ValueRounder, which rounds a double to the
// nearest representable value of the target format using integer operations
// on the IEEE-754 binary64 representation. Every value of every supported
// format is exactly representable in binary64, so no double rounding occurs.

#pragma once

#include <algorithm>
#include <bit>
#include <cmath>
#include <cstdint>
#include <cstdio>
#include <limits>
#include <optional>
#include <ostream>
#include <string>
#include <string_view>
#include <vector>

#include "mxlab/errors.hpp"

namespace mxlab {

enum class FormatId : std::uint8_t { e4m3 = 0, e5m2 = 1, e2m3 = 2, e3m2 = 3, bf16 = 4 };

enum class NanEncoding : std::uint8_t {
    reserved_max_code,  // only S.1111.111 is NaN (OCP E4M3)
    ieee_like,          // all-ones exponent: zero mantissa is Inf, otherwise NaN
    none,               // every code is finite (FP6)
};

enum class RoundingMode : std::uint8_t { nearest_even, toward_zero };

struct FloatFormat {
    FormatId id;
    std::string_view name;
    int exponent_bits;
    int mantissa_bits;
    int bias;
    bool has_sign;
    double max_normal;
    int e_max_elem;  // floor(log2(max_normal))
    bool supports_subnormals;
    NanEncoding nan_encoding;
    bool has_infinity;

    constexpr int width() const { return (has_sign ? 1 : 0) + exponent_bits + mantissa_bits; }
    constexpr int min_normal_exp() const { return 1 - bias; }
    constexpr std::uint32_t exponent_all_ones() const { return (1u << exponent_bits) - 1u; }
    constexpr std::uint32_t mantissa_all_ones() const { return (1u << mantissa_bits) - 1u; }
    constexpr std::uint32_t sign_bit() const { return 1u << (exponent_bits + mantissa_bits); }
    constexpr bool has_nan() const { return nan_encoding != NanEncoding::none; }
    double min_normal() const { return std::ldexp(1.0, min_normal_exp()); }
    double min_subnormal() const { return std::ldexp(1.0, min_normal_exp() - mantissa_bits); }
};

inline constexpr FloatFormat kE4M3{FormatId::e4m3, "e4m3", 4, 3, 7, true, 448.0, 8, true,
                                   NanEncoding::reserved_max_code, false};
inline constexpr FloatFormat kE5M2{FormatId::e5m2, "e5m2", 5, 2, 15, true, 57344.0, 15, true,
                                   NanEncoding::ieee_like, true};
inline constexpr FloatFormat kE2M3{FormatId::e2m3, "e2m3", 2, 3, 1, true, 7.5, 2, true,
                                   NanEncoding::none, false};
inline constexpr FloatFormat kE3M2{FormatId::e3m2, "e3m2", 3, 2, 3, true, 28.0, 4, true,
                                   NanEncoding::none, false};
inline constexpr FloatFormat kBF16{FormatId::bf16, "bf16", 8, 7, 127, true, 0x1.fep127, 127, true,
                                   NanEncoding::ieee_like, true};

inline const FloatFormat& format_of(FormatId id) {
    switch (id) {
        case FormatId::e4m3: return kE4M3;
        case FormatId::e5m2: return kE5M2;
        case FormatId::e2m3: return kE2M3;
        case FormatId::e3m2: return kE3M2;
        case FormatId::bf16: return kBF16;
    }
    throw InvalidInput("unknown format id");
}

inline constexpr FormatId kAllFormats[] = {FormatId::e4m3, FormatId::e5m2, FormatId::e2m3,
                                           FormatId::e3m2, FormatId::bf16};

/// Accepts "e4m3", "E4M3", "fp8_e4m3", "bf16", "bfloat16", ...
inline std::optional<FormatId> parse_format(std::string_view text) {
    std::string s(text);
    std::transform(s.begin(), s.end(), s.begin(), [](unsigned char c) { return std::tolower(c); });
    for (std::string_view prefix : {"fp8_", "fp6_", "mxfp8_", "mxfp6_"}) {
        if (s.rfind(prefix, 0) == 0) s.erase(0, prefix.size());
    }
    if (s == "bfloat16") s = "bf16";
    for (FormatId id : kAllFormats) {
        if (format_of(id).name == s) return id;
    }
    return std::nullopt;
}

inline std::string_view to_string(RoundingMode mode) {
    return mode == RoundingMode::nearest_even ? "nearest-even" : "toward-zero";
}

inline std::optional<RoundingMode> parse_rounding(std::string_view text) {
    if (text == "nearest-even") return RoundingMode::nearest_even;
    if (text == "toward-zero") return RoundingMode::toward_zero;
    return std::nullopt;
}

/// E8M0 block-scale format: 8 exponent bits, bias 127, 0xFF reserved for NaN.
struct E8M0 {
    static constexpr int bias = 127;
    static constexpr int min_exp = -127;
    static constexpr int max_exp = 127;
    static constexpr std::uint8_t nan_code = 0xFF;

    static std::uint8_t encode(int exp) {
        if (exp < min_exp || exp > max_exp) throw InvalidInput("E8M0 exponent out of range: " + std::to_string(exp));
        return static_cast<std::uint8_t>(exp + bias);
    }
    static std::optional<int> decode(std::uint8_t code) {
        if (code == nan_code) return std::nullopt;
        return static_cast<int>(code) - bias;
    }
    static double scale(int exp) { return std::ldexp(1.0, exp); }
};

struct CodeWord {
    std::uint32_t bits = 0;
    FormatId format = FormatId::e4m3;

    const FloatFormat& fmt() const { return format_of(format); }
    bool sign() const { return (bits & fmt().sign_bit()) != 0; }
    std::uint32_t exponent_field() const { return (bits >> fmt().mantissa_bits) & fmt().exponent_all_ones(); }
    std::uint32_t mantissa_field() const { return bits & fmt().mantissa_all_ones(); }

    /// Binary string "s eeee mmm" without separators, MSB first.
    std::string bit_string() const {
        const int w = fmt().width();
        std::string out(static_cast<std::size_t>(w), '0');
        for (int i = 0; i < w; ++i) {
            if (bits & (1u << (w - 1 - i))) out[static_cast<std::size_t>(i)] = '1';
        }
        return out;
    }

    friend bool operator==(const CodeWord& a, const CodeWord& b) {
        return a.bits == b.bits && a.format == b.format;
    }
};

inline std::ostream& operator<<(std::ostream& os, const CodeWord& c) {
    return os << c.fmt().name << ":" << c.bit_string();
}

/// Rounds binary64 values onto a format's value grid. Cheap to copy; the
/// per-format constants are precomputed so the hot path is a handful of
/// integer operations.
class ValueRounder {
public:
    ValueRounder(const FloatFormat& fmt, RoundingMode rounding = RoundingMode::nearest_even,
                 bool saturate = true, bool flush_subnormals = false)
        : fmt_(&fmt),
          rounding_(rounding),
          saturate_(saturate),
          flush_(flush_subnormals || !fmt.supports_subnormals),
          shift_(52 - fmt.mantissa_bits),
          min_normal_(fmt.min_normal()),
          sub_quantum_(fmt.min_subnormal()),
          inv_sub_quantum_(1.0 / fmt.min_subnormal()),
          max_normal_(fmt.max_normal) {}

    const FloatFormat& format() const { return *fmt_; }
    bool saturates() const { return saturate_; }

    /// Rounds a finite non-negative magnitude, ignoring overflow.
    double round_magnitude(double a) const {
        if (a >= min_normal_) {
            std::uint64_t b = std::bit_cast<std::uint64_t>(a);
            const std::uint64_t low = (std::uint64_t{1} << shift_) - 1;
            if (rounding_ == RoundingMode::nearest_even) {
                b += (low >> 1) + ((b >> shift_) & 1u);
            }
            b &= ~low;
            return std::bit_cast<double>(b);
        }
        if (flush_) return 0.0;
        // Subnormal grid is uniform; scaling by a power of two is exact.
        const double scaled = a * inv_sub_quantum_;
        const double r = rounding_ == RoundingMode::nearest_even ? std::nearbyint(scaled) : std::trunc(scaled);
        return r * sub_quantum_;
    }

    /// Rounds a finite value; overflow handled per the saturate flag
    /// (saturate -> +-max_normal, else Inf, NaN, or +-max_normal in that order of
    /// availability).
    double operator()(double v) const {
        const double a = std::fabs(v);
        double r = round_magnitude(a);
        if (a > max_normal_ || r > max_normal_) r = overflow_magnitude();
        return std::copysign(r, v);
    }

    /// Same as operator() but also reports whether the result landed on the
    /// max-magnitude finite code.
    double round_and_flag(double v, bool& last_bin) const {
        const double r = (*this)(v);
        last_bin = std::fabs(r) == max_normal_;
        return r;
    }

private:
    double overflow_magnitude() const {
        if (saturate_) return max_normal_;
        if (fmt_->has_infinity) return std::numeric_limits<double>::infinity();
        if (fmt_->has_nan()) return std::numeric_limits<double>::quiet_NaN();
        return max_normal_;
    }

    const FloatFormat* fmt_;
    RoundingMode rounding_;
    bool saturate_;
    bool flush_;
    int shift_;
    double min_normal_;
    double sub_quantum_;
    double inv_sub_quantum_;
    double max_normal_;
};

namespace detail {

inline std::uint32_t nan_bits(const FloatFormat& fmt) {
    switch (fmt.nan_encoding) {
        case NanEncoding::reserved_max_code:
            return (fmt.exponent_all_ones() << fmt.mantissa_bits) | fmt.mantissa_all_ones();
        case NanEncoding::ieee_like:
            return (fmt.exponent_all_ones() << fmt.mantissa_bits) | (1u << (fmt.mantissa_bits - 1));
        case NanEncoding::none: break;
    }
    throw InvalidInput(std::string(fmt.name) + " has no NaN encoding");
}

inline std::uint32_t inf_bits(const FloatFormat& fmt) {
    return fmt.exponent_all_ones() << fmt.mantissa_bits;
}

// Bits of an exactly representable non-negative finite magnitude.
inline std::uint32_t magnitude_bits(double q, const FloatFormat& fmt) {
    if (q == 0.0) return 0;
    const int e = std::ilogb(q);
    if (e < fmt.min_normal_exp()) {
        const double m = std::ldexp(q, fmt.mantissa_bits - fmt.min_normal_exp());
        return static_cast<std::uint32_t>(m);
    }
    const double frac = std::ldexp(q, -e) - 1.0;
    const auto m = static_cast<std::uint32_t>(std::ldexp(frac, fmt.mantissa_bits));
    const auto ef = static_cast<std::uint32_t>(e + fmt.bias);
    return (ef << fmt.mantissa_bits) | m;
}

}  // namespace detail

/// Encodes `value` into `fmt`. Overflow saturates to +-max_normal when
/// `saturate` is set; otherwise it produces Inf (E5M2, bf16), NaN (E4M3) or
/// +-max_normal (FP6, which have neither).
inline CodeWord encode_scalar(double value, const FloatFormat& fmt,
                              RoundingMode rounding = RoundingMode::nearest_even, bool saturate = true,
                              bool flush_subnormals = false) {
    const std::uint32_t sign = std::signbit(value) ? fmt.sign_bit() : 0u;
    if (std::isnan(value)) {
        if (!fmt.has_nan()) throw InvalidInput("NaN cannot be encoded in " + std::string(fmt.name));
        return {sign | detail::nan_bits(fmt), fmt.id};
    }
    if (std::isinf(value)) {
        if (saturate) return {sign | detail::magnitude_bits(fmt.max_normal, fmt), fmt.id};
        if (!fmt.has_infinity)
            throw InvalidInput("infinite input cannot be encoded in " + std::string(fmt.name) + " without saturation");
        return {sign | detail::inf_bits(fmt), fmt.id};
    }
    const ValueRounder rounder(fmt, rounding, saturate, flush_subnormals);
    const double r = rounder(value);
    if (std::isnan(r)) return {sign | detail::nan_bits(fmt), fmt.id};
    if (std::isinf(r)) return {sign | detail::inf_bits(fmt), fmt.id};
    return {sign | detail::magnitude_bits(std::fabs(r), fmt), fmt.id};
}

/// Exact value of a code; NaN codes decode to quiet NaN.
inline double decode_scalar(CodeWord code) {
    const FloatFormat& fmt = code.fmt();
    const std::uint32_t e = code.exponent_field();
    const std::uint32_t m = code.mantissa_field();
    const double sign = code.sign() ? -1.0 : 1.0;
    if (e == fmt.exponent_all_ones()) {
        if (fmt.nan_encoding == NanEncoding::ieee_like) {
            return m == 0 ? sign * std::numeric_limits<double>::infinity()
                          : std::numeric_limits<double>::quiet_NaN();
        }
        if (fmt.nan_encoding == NanEncoding::reserved_max_code && m == fmt.mantissa_all_ones()) {
            return std::numeric_limits<double>::quiet_NaN();
        }
    }
    if (e == 0) return sign * std::ldexp(static_cast<double>(m), fmt.min_normal_exp() - fmt.mantissa_bits);
    const double frac = 1.0 + std::ldexp(static_cast<double>(m), -fmt.mantissa_bits);
    return sign * std::ldexp(frac, static_cast<int>(e) - fmt.bias);
}

/// Convenience: value-level round trip through a format.
inline double round_to_format(double value, const FloatFormat& fmt,
                              RoundingMode rounding = RoundingMode::nearest_even, bool saturate = true) {
    return ValueRounder(fmt, rounding, saturate)(value);
}

inline float to_bf16(float v) { return static_cast<float>(ValueRounder(kBF16, RoundingMode::nearest_even, false)(v)); }

/// Code of the largest finite positive value.
inline CodeWord max_finite_code(const FloatFormat& fmt) {
    return {detail::magnitude_bits(fmt.max_normal, fmt), fmt.id};
}

struct CodeEntry {
    std::size_t index;
    CodeWord code;
    double value;
};

/// All positive finite codes ordered by value; index 0 is the smallest subnormal.
inline std::vector<CodeEntry> enumerate_codes(const FloatFormat& fmt) {
    std::vector<CodeEntry> out;
    const std::uint32_t n = fmt.sign_bit();
    out.reserve(n);
    for (std::uint32_t bits = 1; bits < n; ++bits) {
        const CodeWord c{bits, fmt.id};
        const double v = decode_scalar(c);
        if (std::isfinite(v) && v > 0.0) out.push_back({0, c, v});
    }
    std::sort(out.begin(), out.end(), [](const CodeEntry& a, const CodeEntry& b) { return a.value < b.value; });
    for (std::size_t i = 0; i < out.size(); ++i) out[i].index = i;
    return out;
}

struct GapEntry {
    std::size_t index;
    double gap;
};

/// gap[i] = (value[i+1] - value[i]) / value[i] over the positive code list.
inline std::vector<GapEntry> relative_gaps(const FloatFormat& fmt) {
    const auto codes = enumerate_codes(fmt);
    std::vector<GapEntry> out;
    if (codes.size() < 2) return out;
    out.reserve(codes.size() - 1);
    for (std::size_t i = 0; i + 1 < codes.size(); ++i) {
        out.push_back({i, (codes[i + 1].value - codes[i].value) / codes[i].value});
    }
    return out;
}

/// CSV: index,bits,value,relative_gap (relative_gap empty on the last row).
inline void write_code_table_csv(std::ostream& os, const FloatFormat& fmt) {
    const auto codes = enumerate_codes(fmt);
    const auto gaps = relative_gaps(fmt);
    os << "index,bits,value,relative_gap\n";
    char buf[64];
    for (std::size_t i = 0; i < codes.size(); ++i) {
        std::snprintf(buf, sizeof buf, "%.17g", codes[i].value);
        os << codes[i].index << ',' << codes[i].code.bit_string() << ',' << buf << ',';
        if (i < gaps.size()) {
            std::snprintf(buf, sizeof buf, "%.17g", gaps[i].gap);
            os << buf;
        }
        os << '\n';
    }
}

}  // namespace mxlab
