// Copyright 2026 The mxlab Authors
// SPDX-License-Identifier: Apache-2.0
//
// Binary container for MX tensors.
//
//   offset  size  field
//   0       4     magic "MXLC"
//   4       2     version (1), little endian
//   6       1     element format id (0 e4m3, 1 e5m2, 2 e2m3, 3 e3m2)
//   7       1     rounding (0 nearest-even, 1 toward-zero)
//   8       2     block size k
//   10      1     exponent offset
//   11      1     flags (bit 0 conditional bump, bit 1 flush subnormals)
//   12      1     rank r
//   13      1     blocking axis
//   14      8*r   dims, u64 little endian
//   then per block, fiber-major: 1 byte E8M0 scale, ceil(k * width / 8)
//   bytes of codes packed LSB-first. Padding codes are zero.

#pragma once

#include <cstdint>
#include <istream>
#include <ostream>
#include <vector>

#include "mxlab/errors.hpp"
#include "mxlab/mx_block.hpp"

namespace mxlab {

inline constexpr std::uint16_t kMxContainerVersion = 1;

namespace detail {

template <typename U>
void put_le(std::ostream& os, U v) {
    for (std::size_t i = 0; i < sizeof(U); ++i) os.put(static_cast<char>((static_cast<std::uint64_t>(v) >> (8 * i)) & 0xFF));
}

template <typename U>
U get_le(std::istream& is) {
    std::uint64_t v = 0;
    for (std::size_t i = 0; i < sizeof(U); ++i) {
        const int c = is.get();
        if (c == std::char_traits<char>::eof()) throw IoError("truncated MX container");
        v |= static_cast<std::uint64_t>(static_cast<unsigned char>(c)) << (8 * i);
    }
    return static_cast<U>(v);
}

inline std::size_t packed_bytes(const MXSpec& spec) {
    return (static_cast<std::size_t>(spec.block_size) * static_cast<std::size_t>(spec.format().width()) + 7) / 8;
}

}  // namespace detail

inline void write_mx_container(std::ostream& os, const MXTensor& mt) {
    if (mt.spec.element == FormatId::bf16) throw InvalidInput("bf16 is not an MX element format");
    os.write("MXLC", 4);
    detail::put_le<std::uint16_t>(os, kMxContainerVersion);
    detail::put_le<std::uint8_t>(os, static_cast<std::uint8_t>(mt.spec.element));
    detail::put_le<std::uint8_t>(os, static_cast<std::uint8_t>(mt.spec.rounding));
    detail::put_le<std::uint16_t>(os, static_cast<std::uint16_t>(mt.spec.block_size));
    detail::put_le<std::int8_t>(os, static_cast<std::int8_t>(mt.spec.exponent_offset));
    detail::put_le<std::uint8_t>(os, static_cast<std::uint8_t>((mt.spec.conditional_bump ? 1 : 0) |
                                                               (mt.spec.flush_subnormals ? 2 : 0)));
    detail::put_le<std::uint8_t>(os, static_cast<std::uint8_t>(mt.shape.size()));
    detail::put_le<std::uint8_t>(os, static_cast<std::uint8_t>(mt.axis));
    for (std::size_t d : mt.shape) detail::put_le<std::uint64_t>(os, d);

    const int width = mt.spec.format().width();
    std::vector<std::uint8_t> packed(detail::packed_bytes(mt.spec));
    for (const MXBlock& b : mt.blocks) {
        detail::put_le<std::uint8_t>(os, E8M0::encode(b.shared_exp));
        std::fill(packed.begin(), packed.end(), 0);
        std::size_t bit = 0;
        for (const CodeWord& c : b.codes) {
            for (int i = 0; i < width; ++i, ++bit) {
                if (c.bits & (1u << i)) packed[bit / 8] |= static_cast<std::uint8_t>(1u << (bit % 8));
            }
        }
        os.write(reinterpret_cast<const char*>(packed.data()), static_cast<std::streamsize>(packed.size()));
    }
    if (!os) throw IoError("failed writing MX container");
}

inline MXTensor read_mx_container(std::istream& is) {
    char magic[4] = {};
    is.read(magic, 4);
    if (!is || std::string(magic, 4) != "MXLC") throw IoError("not an MX container (bad magic)");
    const auto version = detail::get_le<std::uint16_t>(is);
    if (version != kMxContainerVersion) throw IoError("unsupported MX container version " + std::to_string(version));
    MXTensor mt;
    const auto fmt = detail::get_le<std::uint8_t>(is);
    if (fmt > static_cast<std::uint8_t>(FormatId::e3m2)) throw IoError("bad element format id in MX container");
    mt.spec.element = static_cast<FormatId>(fmt);
    mt.spec.rounding = static_cast<RoundingMode>(detail::get_le<std::uint8_t>(is));
    mt.spec.block_size = detail::get_le<std::uint16_t>(is);
    mt.spec.exponent_offset = detail::get_le<std::int8_t>(is);
    const auto flags = detail::get_le<std::uint8_t>(is);
    mt.spec.conditional_bump = flags & 1;
    mt.spec.flush_subnormals = flags & 2;
    const auto rank = detail::get_le<std::uint8_t>(is);
    mt.axis = detail::get_le<std::uint8_t>(is);
    for (std::size_t i = 0; i < rank; ++i) mt.shape.push_back(detail::get_le<std::uint64_t>(is));
    try {
        mt.spec.validate();
    } catch (const InvalidInput& e) {
        throw IoError(std::string("invalid MX container header: ") + e.what());
    }
    if (mt.axis >= mt.shape.size()) throw IoError("invalid blocking axis in MX container");

    const auto f = detail::fiber_layout(mt.shape, mt.axis);
    const auto k = static_cast<std::size_t>(mt.spec.block_size);
    mt.blocks_per_fiber = f.len == 0 ? 0 : (f.len + k - 1) / k;
    mt.tail_len = f.len == 0 ? 0 : f.len - (mt.blocks_per_fiber - 1) * k;
    const int width = mt.spec.format().width();
    std::vector<std::uint8_t> packed(detail::packed_bytes(mt.spec));
    const std::size_t nblocks = f.outer * f.inner * mt.blocks_per_fiber;
    mt.blocks.reserve(nblocks);
    for (std::size_t n = 0; n < nblocks; ++n) {
        MXBlock b;
        const auto scale = E8M0::decode(detail::get_le<std::uint8_t>(is));
        if (!scale) throw IoError("NaN scale in MX container");
        b.shared_exp = *scale;
        is.read(reinterpret_cast<char*>(packed.data()), static_cast<std::streamsize>(packed.size()));
        if (!is) throw IoError("truncated MX container");
        b.codes.resize(k);
        std::size_t bit = 0;
        for (auto& c : b.codes) {
            c.format = mt.spec.element;
            for (int i = 0; i < width; ++i, ++bit) {
                if (packed[bit / 8] & (1u << (bit % 8))) c.bits |= 1u << i;
            }
        }
        b.valid = (n % mt.blocks_per_fiber == mt.blocks_per_fiber - 1) ? mt.tail_len : k;
        mt.blocks.push_back(std::move(b));
    }
    return mt;
}

}  // namespace mxlab
