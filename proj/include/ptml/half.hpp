// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <bit>
#include <cmath>
#include <cstdint>

namespace ptml {

// IEEE 754 binary16 conversions with explicit rounding control. The block
// codec needs directed rounding (block minima round toward -inf so shifted
// values stay non-negative), so we implement the conversion instead of
// relying on compiler __fp16 semantics.

enum class HalfRound { nearest_even, toward_neg_inf, toward_pos_inf };

inline constexpr uint16_t kHalfMaxBits = 0x7BFF;  // 65504

inline uint16_t float_to_half_bits(float value, HalfRound mode = HalfRound::nearest_even) {
    const uint32_t bits = std::bit_cast<uint32_t>(value);
    const uint32_t sign = bits >> 31;
    const uint32_t exp8 = (bits >> 23) & 0xFFu;
    const uint32_t man23 = bits & 0x7FFFFFu;
    const uint16_t hsign = static_cast<uint16_t>(sign << 15);

    if (exp8 == 0xFFu) {  // inf / nan propagate
        const uint16_t payload = man23 ? static_cast<uint16_t>(0x200u | (man23 >> 13)) : 0u;
        return static_cast<uint16_t>(hsign | 0x7C00u | payload);
    }

    int e = static_cast<int>(exp8) - 127;
    uint32_t sig;
    if (exp8 == 0) {
        if (man23 == 0) {
            return hsign;  // signed zero
        }
        sig = man23;  // f32 subnormal, renormalize
        e = -126;
        while (!(sig & 0x800000u)) {
            sig <<= 1;
            --e;
        }
    } else {
        sig = man23 | 0x800000u;
    }
    // value = sig * 2^(e-23), sig in [2^23, 2^24)

    const bool round_up_mode = (mode == HalfRound::toward_pos_inf && sign == 0) ||
                               (mode == HalfRound::toward_neg_inf && sign == 1);

    auto overflow = [&]() -> uint16_t {
        if (mode == HalfRound::nearest_even || round_up_mode) {
            return static_cast<uint16_t>(hsign | 0x7C00u);  // +-inf
        }
        return static_cast<uint16_t>(hsign | kHalfMaxBits);  // clamp to max finite
    };

    if (e > 15) {
        return overflow();
    }

    int shift = 13;  // 24-bit significand -> 11-bit (1+10)
    if (e < -14) {
        shift += (-14 - e);
        if (shift > 24) {
            shift = 24;  // whole significand becomes the remainder
        }
    }

    uint32_t kept = shift >= 24 ? 0u : (sig >> shift);
    const uint32_t rem = shift >= 24 ? sig : (sig & ((1u << shift) - 1u));

    if (mode == HalfRound::nearest_even) {
        const uint32_t half_bit = 1u << (shift - 1);
        if (rem > half_bit || (rem == half_bit && (kept & 1u))) {
            ++kept;
        }
    } else if (round_up_mode && rem != 0) {
        ++kept;
    }

    uint16_t hbits;
    if (e < -14) {
        // Subnormal target; a carry into bit 10 lands on the smallest normal,
        // which the encoding below represents for free.
        hbits = static_cast<uint16_t>(kept);
    } else {
        if (kept >= 0x800u) {  // carry out of the 11-bit significand
            kept >>= 1;
            ++e;
            if (e > 15) {
                return overflow();
            }
        }
        hbits = static_cast<uint16_t>(((e + 15) << 10) | (kept & 0x3FFu));
    }
    return static_cast<uint16_t>(hsign | hbits);
}

inline float half_bits_to_float(uint16_t h) {
    const uint32_t sign = (h >> 15) & 1u;
    const uint32_t exp5 = (h >> 10) & 0x1Fu;
    const uint32_t man10 = h & 0x3FFu;
    uint32_t out;
    if (exp5 == 0) {
        if (man10 == 0) {
            out = sign << 31;
        } else {
            // subnormal: renormalize into f32
            int e = -14;
            uint32_t sig = man10;
            while (!(sig & 0x400u)) {
                sig <<= 1;
                --e;
            }
            sig &= 0x3FFu;
            out = (sign << 31) | (static_cast<uint32_t>(e + 127) << 23) | (sig << 13);
        }
    } else if (exp5 == 0x1Fu) {
        out = (sign << 31) | 0x7F800000u | (man10 << 13);
    } else {
        out = (sign << 31) | ((exp5 - 15 + 127) << 23) | (man10 << 13);
    }
    return std::bit_cast<float>(out);
}

inline float round_to_half(float value, HalfRound mode = HalfRound::nearest_even) {
    return half_bits_to_float(float_to_half_bits(value, mode));
}

// Spacing of the binary16 grid at magnitude |x|.
inline float half_ulp(float x) {
    const float ax = std::abs(x);
    if (ax < 0x1.0p-14f) {
        return 0x1.0p-24f;
    }
    int e = 0;
    std::frexp(ax, &e);  // ax = m * 2^e, m in [0.5, 1)
    e -= 1;              // exponent of the leading bit
    if (e > 15) {
        e = 15;
    }
    return std::ldexp(1.0f, e - 10);
}

}  // namespace ptml
