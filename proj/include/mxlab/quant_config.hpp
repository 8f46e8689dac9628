// Copyright 2026 The mxlab Authors
// SPDX-License-Identifier: Apache-2.0

#pragma once

#include <array>
#include <optional>
#include <string>
#include <string_view>

#include "mxlab/errors.hpp"
#include "mxlab/mx_block.hpp"

namespace mxlab {

/// Where a tensor is quantized. Forward matmuls quantize weights and
/// activations; backward matmuls quantize weights, the stored forward
/// activations (grad_input) and the upstream gradients (grad_output).
enum class QuantRole : std::uint8_t { fwd_weight, fwd_activation, bwd_weight, grad_input, grad_output, ln_affine };

inline constexpr std::array<QuantRole, 6> kAllRoles = {QuantRole::fwd_weight, QuantRole::fwd_activation,
                                                       QuantRole::bwd_weight, QuantRole::grad_input,
                                                       QuantRole::grad_output, QuantRole::ln_affine};

inline std::string_view to_string(QuantRole r) {
    switch (r) {
        case QuantRole::fwd_weight: return "fwd_weight";
        case QuantRole::fwd_activation: return "fwd_activation";
        case QuantRole::bwd_weight: return "bwd_weight";
        case QuantRole::grad_input: return "grad_input";
        case QuantRole::grad_output: return "grad_output";
        case QuantRole::ln_affine: return "ln_affine";
    }
    return "?";
}

inline bool is_backward(QuantRole r) {
    return r == QuantRole::bwd_weight || r == QuantRole::grad_input || r == QuantRole::grad_output;
}

struct QuantFormat {
    enum class Kind : std::uint8_t { none, bf16, mx };
    Kind kind = Kind::none;
    MXSpec mx{};

    static QuantFormat none() { return {}; }
    static QuantFormat bf16() { return {Kind::bf16, {}}; }
    static QuantFormat mx_of(FormatId element, int block_size = 32) {
        QuantFormat f{Kind::mx, {}};
        f.mx.element = element;
        f.mx.block_size = block_size;
        return f;
    }

    bool is_none() const { return kind == Kind::none; }
    bool is_mx() const { return kind == Kind::mx; }

    /// "none", "bf16", or the MX element name ("e4m3", ...).
    std::string name() const {
        switch (kind) {
            case Kind::none: return "none";
            case Kind::bf16: return "bf16";
            case Kind::mx: return std::string(mx.format().name);
        }
        return "?";
    }

    friend bool operator==(const QuantFormat& a, const QuantFormat& b) {
        if (a.kind != b.kind) return false;
        return a.kind != Kind::mx || a.mx == b.mx;
    }
};

inline std::optional<QuantFormat> parse_quant_format(std::string_view text, int block_size = 32) {
    if (text == "none" || text == "fp32") return QuantFormat::none();
    if (text == "bf16" || text == "bfloat16") return QuantFormat::bf16();
    const auto id = parse_format(text);
    if (!id || *id == FormatId::bf16) return std::nullopt;
    return QuantFormat::mx_of(*id, block_size);
}

struct QuantPoint {
    QuantRole role;
    QuantFormat format;
};

struct QuantConfig {
    std::array<QuantFormat, 6> formats{};
    bool forward_only = false;
    bool bf16_vector_ops = true;  // bf16 layernorm/residual arithmetic whenever any MX point is active

    QuantFormat& operator[](QuantRole r) { return formats[static_cast<std::size_t>(r)]; }

    /// Effective format: forward_only forces the backward roles to none.
    QuantFormat at(QuantRole r) const {
        if (forward_only && is_backward(r)) return QuantFormat::none();
        return formats[static_cast<std::size_t>(r)];
    }

    QuantPoint point(QuantRole r) const { return {r, at(r)}; }

    bool any_mx() const {
        for (QuantRole r : kAllRoles) {
            if (at(r).is_mx()) return true;
        }
        return false;
    }

    bool any_quantization() const {
        for (QuantRole r : kAllRoles) {
            if (!at(r).is_none()) return true;
        }
        return false;
    }

    bool uses_bf16_vector_ops() const { return bf16_vector_ops && any_mx(); }

    /// Applies `f` to the MX spec of every MX point.
    template <typename F>
    void for_each_mx(F&& f) {
        for (auto& q : formats) {
            if (q.is_mx()) f(q.mx);
        }
    }

    friend bool operator==(const QuantConfig& a, const QuantConfig& b) {
        return a.formats == b.formats && a.forward_only == b.forward_only && a.bf16_vector_ops == b.bf16_vector_ops;
    }
};

inline constexpr std::array<std::string_view, 5> kPresetNames = {"fp32", "mxfp8-e4m3", "mxfp8-mix", "mxfp6-e2m3",
                                                                 "weights-mx-acts-bf16"};

/// Named presets:
///   fp32                  no quantization
///   mxfp8-e4m3            every point MX E4M3
///   mxfp8-mix             forward points (and LN affine) E4M3, backward points E5M2
///   mxfp6-e2m3            every point MX E2M3
///   weights-mx-acts-bf16  weights MX E4M3; activations, gradients and LN affine bf16
inline QuantConfig quant_preset(std::string_view name, int block_size = 32) {
    QuantConfig q;
    auto set = [&](std::initializer_list<QuantRole> roles, QuantFormat f) {
        for (QuantRole r : roles) q[r] = f;
    };
    const auto all = {QuantRole::fwd_weight, QuantRole::fwd_activation, QuantRole::bwd_weight,
                      QuantRole::grad_input, QuantRole::grad_output, QuantRole::ln_affine};
    if (name == "fp32") return q;
    if (name == "mxfp8-e4m3") {
        set(all, QuantFormat::mx_of(FormatId::e4m3, block_size));
    } else if (name == "mxfp8-mix") {
        set({QuantRole::fwd_weight, QuantRole::fwd_activation, QuantRole::ln_affine},
            QuantFormat::mx_of(FormatId::e4m3, block_size));
        set({QuantRole::bwd_weight, QuantRole::grad_input, QuantRole::grad_output},
            QuantFormat::mx_of(FormatId::e5m2, block_size));
    } else if (name == "mxfp6-e2m3") {
        set(all, QuantFormat::mx_of(FormatId::e2m3, block_size));
    } else if (name == "weights-mx-acts-bf16") {
        set({QuantRole::fwd_weight, QuantRole::bwd_weight}, QuantFormat::mx_of(FormatId::e4m3, block_size));
        set({QuantRole::fwd_activation, QuantRole::grad_input, QuantRole::grad_output, QuantRole::ln_affine},
            QuantFormat::bf16());
    } else {
        throw InvalidInput("unknown quantization preset '" + std::string(name) + "'");
    }
    return q;
}

}  // namespace mxlab
