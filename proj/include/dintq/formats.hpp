#pragma once

// Numeric format codebooks and scalar codecs.
//
// Three families:
//   - uniform INT-b: codes 0..2^b-1, affine decode (code - z) * s
//   - dINT-b: integer grid on codes 0..p with p = 2^b-3, plus two reserved
//     codes that decode to +/- ratio*s; the reserved pair covers magnitudes a
//     plain integer grid rounds to zero
//   - FP4 (1-e-m): sign/exponent/mantissa minifloat with subnormals and no
//     Inf/NaN patterns, used as a 16-entry quantization grid
//
// All codecs accept a per-group constant offset (see quantizer degenerate
// groups); it is 0 everywhere else and the formulas then match the plain
// affine form.

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <string>
#include <vector>

#include "dintq/error.hpp"

namespace dintq {

enum class FormatKind : uint8_t { uniform_int, denorm_int, float4 };

struct QuantFormat {
    FormatKind kind = FormatKind::uniform_int;
    int bits = 8;
    double special_ratio = 0.5;  // denorm_int: reserved-code magnitude in units of the step
    int exp_bits = 3;            // float4 only
    int mant_bits = 0;           // float4 only

    static QuantFormat uniform(int bits) {
        QuantFormat f;
        f.kind = FormatKind::uniform_int;
        f.bits = bits;
        f.validate();
        return f;
    }

    static QuantFormat dint(int bits, double ratio = 0.5) {
        QuantFormat f;
        f.kind = FormatKind::denorm_int;
        f.bits = bits;
        f.special_ratio = ratio;
        f.validate();
        return f;
    }

    static QuantFormat fp4(int exp_bits, int mant_bits) {
        QuantFormat f;
        f.kind = FormatKind::float4;
        f.bits = 4;
        f.exp_bits = exp_bits;
        f.mant_bits = mant_bits;
        f.validate();
        return f;
    }

    void validate() const {
        switch (kind) {
            case FormatKind::uniform_int:
                // Hardware formats stop at 8 bits; wider grids stay legal so
                // near-exact quantizers can stand in for the b -> inf limit.
                if (bits < 2 || bits > 30) throw data_error("uniform format: bits must be in 2..30");
                break;
            case FormatKind::denorm_int: {
                if (bits < 3 || bits > 8)
                    throw data_error("dint format: bits must be in 3..8 (needs two reserved codes)");
                if (!(special_ratio > 0.0) || special_ratio > 0.5)
                    throw data_error("dint format: special ratio must be a power of two <= 1/2");
                const double inv = 1.0 / special_ratio;
                const double rounded = std::nearbyint(inv);
                if (inv != rounded || (static_cast<uint64_t>(rounded) &
                                       (static_cast<uint64_t>(rounded) - 1)) != 0)
                    throw data_error("dint format: special ratio must be a power of two <= 1/2");
                break;
            }
            case FormatKind::float4:
                if (1 + exp_bits + mant_bits != 4 || exp_bits < 1)
                    throw data_error("fp4 format: needs 1 + e + m == 4 with e >= 1");
                break;
        }
    }

    bool operator==(const QuantFormat&) const = default;
};

// Largest uniform code for the format: 2^b-1 for plain INT, p = 2^b-3 for
// dINT where the top two codes are the reserved pair.
inline int uniform_levels(const QuantFormat& fmt) {
    if (fmt.kind != FormatKind::denorm_int)
        throw data_error("uniform_levels: format is not dINT");
    return (1 << fmt.bits) - 3;
}

inline int max_uniform_code(const QuantFormat& fmt) {
    switch (fmt.kind) {
        case FormatKind::uniform_int: return (1 << fmt.bits) - 1;
        case FormatKind::denorm_int: return (1 << fmt.bits) - 3;
        default: throw data_error("max_uniform_code: not an integer format");
    }
}

inline int dint_c1(const QuantFormat& fmt) { return (1 << fmt.bits) - 2; }
inline int dint_c2(const QuantFormat& fmt) { return (1 << fmt.bits) - 1; }

struct QuantParams {
    QuantFormat format;
    double step = 1.0;   // s > 0; for FP4 this is the group scale
    int zero_point = 0;  // z; unused for FP4
    double offset = 0.0; // constant-group offset, 0 for regular groups
};

// Nearest integer, ties to even. remainder() is exact, and the true
// difference is an integer, so no double rounding occurs.
inline double round_half_even(double x) {
    return x - std::remainder(x, 1.0);
}

namespace detail {

inline int clamp_code(double k, int top) {
    if (!(k > 0.0)) return 0;
    if (k >= static_cast<double>(top)) return top;
    return static_cast<int>(k);
}

inline void check_finite(double x) {
    if (!std::isfinite(x)) throw numeric_error("codec: non-finite input");
}

}  // namespace detail

inline int encode_uniform(double x, const QuantParams& qp) {
    if (qp.format.kind != FormatKind::uniform_int)
        throw data_error("encode_uniform: wrong format kind");
    detail::check_finite(x);
    const double k = round_half_even((x - qp.offset) / qp.step) + qp.zero_point;
    return detail::clamp_code(k, max_uniform_code(qp.format));
}

inline double decode_uniform(int code, const QuantParams& qp) {
    if (qp.format.kind != FormatKind::uniform_int)
        throw data_error("decode_uniform: wrong format kind");
    if (code < 0 || code > max_uniform_code(qp.format))
        throw data_error("decode_uniform: code out of range");
    return (code - qp.zero_point) * qp.step + qp.offset;
}

// Eq.-style dINT encode: values in the half-open band around +/- ratio*s map
// to the reserved codes, everything else rounds on the uniform grid and
// clamps to [0, p]. The bands are (r*s/2, 3*r*s/2] and [-3*r*s/2, -r*s/2),
// i.e. exactly the region where the reserved value is the nearest
// representable one when r = 1/2.
inline int encode_dint(double x, const QuantParams& qp) {
    if (qp.format.kind != FormatKind::denorm_int)
        throw data_error("encode_dint: wrong format kind");
    detail::check_finite(x);
    const double s = qp.step;
    const double y = x - qp.offset;
    const double lo = 0.5 * qp.format.special_ratio * s;
    const double hi = 1.5 * qp.format.special_ratio * s;
    if (y > lo && y <= hi) return dint_c1(qp.format);
    if (y >= -hi && y < -lo) return dint_c2(qp.format);
    const double k = round_half_even(y / s) + qp.zero_point;
    return detail::clamp_code(k, uniform_levels(qp.format));
}

inline double decode_dint(int code, const QuantParams& qp) {
    if (qp.format.kind != FormatKind::denorm_int)
        throw data_error("decode_dint: wrong format kind");
    if (code == dint_c1(qp.format)) return qp.format.special_ratio * qp.step + qp.offset;
    if (code == dint_c2(qp.format)) return -qp.format.special_ratio * qp.step + qp.offset;
    if (code < 0 || code > uniform_levels(qp.format))
        throw data_error("decode_dint: code out of range");
    return (code - qp.zero_point) * qp.step + qp.offset;
}

// All 16 FP4 values for the requested 1-e-m split, ascending. Bias is
// 2^(e-1); exponent field 0 holds the subnormals. Both signed zeros appear,
// so the list always has 16 entries.
inline std::vector<double> fp4_values(const QuantFormat& fmt) {
    if (fmt.kind != FormatKind::float4) throw data_error("fp4_values: wrong format kind");
    const int e = fmt.exp_bits;
    const int m = fmt.mant_bits;
    const int bias = 1 << (e - 1);
    std::vector<double> out;
    out.reserve(16);
    for (int sign = 0; sign < 2; ++sign) {
        for (int exp_field = 0; exp_field < (1 << e); ++exp_field) {
            for (int mant_field = 0; mant_field < (1 << m); ++mant_field) {
                const double frac = static_cast<double>(mant_field) / static_cast<double>(1 << m);
                const double mag = exp_field == 0 ? std::ldexp(frac, 1 - bias)
                                                  : std::ldexp(1.0 + frac, exp_field - bias);
                out.push_back(sign ? -mag : mag);
            }
        }
    }
    std::sort(out.begin(), out.end(), [](double a, double b) {
        if (a != b) return a < b;
        return std::signbit(a) && !std::signbit(b);  // -0 before +0
    });
    return out;
}

namespace detail {

inline const std::vector<double>& fp4_codebook(const QuantFormat& fmt) {
    static const std::vector<double> e1m2 = fp4_values(QuantFormat::fp4(1, 2));
    static const std::vector<double> e2m1 = fp4_values(QuantFormat::fp4(2, 1));
    static const std::vector<double> e3m0 = fp4_values(QuantFormat::fp4(3, 0));
    switch (fmt.exp_bits) {
        case 1: return e1m2;
        case 2: return e2m1;
        default: return e3m0;
    }
}

}  // namespace detail

// Nearest codebook entry to x/scale; distance ties go to the smaller
// magnitude.
inline int encode_fp4(double x, double scale, const QuantFormat& fmt) {
    if (fmt.kind != FormatKind::float4) throw data_error("encode_fp4: wrong format kind");
    detail::check_finite(x);
    if (!(scale > 0.0) || !std::isfinite(scale))
        throw data_error("encode_fp4: scale must be positive and finite");
    const auto& values = detail::fp4_codebook(fmt);
    const double y = x / scale;
    int best = 0;
    double best_dist = std::fabs(y - values[0]);
    for (int i = 1; i < static_cast<int>(values.size()); ++i) {
        const double d = std::fabs(y - values[i]);
        if (d < best_dist ||
            (d == best_dist && std::fabs(values[i]) < std::fabs(values[best]))) {
            best = i;
            best_dist = d;
        }
    }
    return best;
}

inline double decode_fp4(int code, double scale, const QuantFormat& fmt) {
    if (fmt.kind != FormatKind::float4) throw data_error("decode_fp4: wrong format kind");
    const auto& values = detail::fp4_codebook(fmt);
    if (code < 0 || code >= static_cast<int>(values.size()))
        throw data_error("decode_fp4: code out of range");
    return values[code] * scale;
}

// Format-dispatching scalar codec used by the tensor-level quantizer.
inline int encode_value(double x, const QuantParams& qp) {
    switch (qp.format.kind) {
        case FormatKind::uniform_int: return encode_uniform(x, qp);
        case FormatKind::denorm_int: return encode_dint(x, qp);
        case FormatKind::float4: return encode_fp4(x - qp.offset, qp.step, qp.format);
    }
    throw data_error("encode_value: unknown format kind");
}

inline double decode_value(int code, const QuantParams& qp) {
    switch (qp.format.kind) {
        case FormatKind::uniform_int: return decode_uniform(code, qp);
        case FormatKind::denorm_int: return decode_dint(code, qp);
        case FormatKind::float4: return decode_fp4(code, qp.step, qp.format) + qp.offset;
    }
    throw data_error("decode_value: unknown format kind");
}

inline bool code_valid(int code, const QuantFormat& fmt) {
    switch (fmt.kind) {
        case FormatKind::uniform_int: return code >= 0 && code <= max_uniform_code(fmt);
        case FormatKind::denorm_int: return code >= 0 && code < (1 << fmt.bits);
        case FormatKind::float4: return code >= 0 && code < 16;
    }
    return false;
}

// Every value the format can produce under the given params, reserved codes
// included. Brute-force oracles enumerate this set.
inline std::vector<double> representable_values(const QuantParams& qp) {
    std::vector<double> out;
    switch (qp.format.kind) {
        case FormatKind::uniform_int:
            for (int k = 0; k <= max_uniform_code(qp.format); ++k)
                out.push_back(decode_uniform(k, qp));
            break;
        case FormatKind::denorm_int:
            for (int k = 0; k <= uniform_levels(qp.format); ++k)
                out.push_back(decode_dint(k, qp));
            out.push_back(decode_dint(dint_c1(qp.format), qp));
            out.push_back(decode_dint(dint_c2(qp.format), qp));
            break;
        case FormatKind::float4:
            for (int k = 0; k < 16; ++k) out.push_back(decode_fp4(k, qp.step, qp.format) + qp.offset);
            break;
    }
    return out;
}

inline std::string format_name(const QuantFormat& fmt) {
    switch (fmt.kind) {
        case FormatKind::uniform_int: return "int" + std::to_string(fmt.bits);
        case FormatKind::denorm_int: return "dint" + std::to_string(fmt.bits);
        case FormatKind::float4:
            return "fp4-1" + std::to_string(fmt.exp_bits) + std::to_string(fmt.mant_bits);
    }
    return "unknown";
}

}  // namespace dintq
