// SPDX-License-Identifier: Apache-2.0

#include "budgetlab/numerics.h"

#include <bit>
#include <cmath>
#include <limits>
#include <regex>
#include <stdexcept>

#include "budgetlab/rng.h"

namespace budgetlab {

namespace {

// floor(log2(a)) for finite a > 0.
int binade(double a) {
    int e = 0;
    std::frexp(a, &e);
    return e - 1;
}

void require_finite(double x, const char* what) {
    if (!std::isfinite(x)) {
        throw std::invalid_argument(std::string(what) + ": argument must be finite");
    }
}

}  // namespace

FloatFormat FloatFormat::make(int exponent_bits, int mantissa_bits) {
    return make(exponent_bits, mantissa_bits, (1 << (exponent_bits - 1)) - 1);
}

FloatFormat FloatFormat::make(int exponent_bits, int mantissa_bits, int bias) {
    FloatFormat f{exponent_bits, mantissa_bits, bias};
    f.validate();
    return f;
}

void FloatFormat::validate() const {
    if (exponent_bits < 2 || mantissa_bits < 1) {
        throw std::invalid_argument("FloatFormat: need at least 2 exponent bits and 1 mantissa bit");
    }
    if (total_bits() > 64) {
        throw std::invalid_argument("FloatFormat: more than 64 bits in total");
    }
    // The double carrier bounds what can be emulated exactly.
    if (exponent_bits > 11 || mantissa_bits > 52) {
        throw std::invalid_argument("FloatFormat: wider than the double carrier");
    }
    if (max_exponent() > 1023 || min_exponent() - mantissa_bits < -1074) {
        throw std::invalid_argument("FloatFormat: exponent range exceeds the double carrier");
    }
}

double FloatFormat::max_finite() const {
    // (2 - 2^-m) * 2^emax
    return std::ldexp(std::ldexp(1.0, mantissa_bits + 1) - 1.0, max_exponent() - mantissa_bits);
}

double FloatFormat::min_normal() const { return std::ldexp(1.0, min_exponent()); }

double FloatFormat::min_subnormal() const { return std::ldexp(1.0, min_exponent() - mantissa_bits); }

std::string FloatFormat::tag() const {
    if (*this == kBF16) return "bf16";
    if (*this == kFP32) return "fp32";
    if (*this == kWide) return "wide";
    return "e" + std::to_string(exponent_bits) + "m" + std::to_string(mantissa_bits) + "b" +
           std::to_string(bias);
}

FloatFormat FloatFormat::from_tag(const std::string& tag) {
    if (tag == "bf16" || tag == "bfloat16") return kBF16;
    if (tag == "fp32" || tag == "float32") return kFP32;
    if (tag == "wide" || tag == "fp64" || tag == "float64") return kWide;
    static const std::regex pattern(R"(e(\d+)m(\d+)b(-?\d+))");
    std::smatch m;
    if (std::regex_match(tag, m, pattern)) {
        return make(std::stoi(m[1]), std::stoi(m[2]), std::stoi(m[3]));
    }
    throw std::invalid_argument("unknown float format tag '" + tag + "'");
}

double quantize(double x, const FloatFormat& fmt, const RoundingMode& mode) {
    if (!std::isfinite(x) || x == 0.0 || fmt.is_carrier()) return x;

    // Fast path: x and its rounding stay normal in fmt, so round-to-nearest-even
    // is an integer add on the carrier's bit pattern.
    if (std::holds_alternative<NearestEven>(mode) && fmt.mantissa_bits < 52) {
        const auto bits = std::bit_cast<std::uint64_t>(x);
        const int e = static_cast<int>((bits >> 52) & 0x7FF) - 1023;
        if (e >= fmt.min_exponent() && e <= fmt.max_exponent()) {
            const int drop = 52 - fmt.mantissa_bits;
            const std::uint64_t bias = (std::uint64_t{1} << (drop - 1)) - 1 + ((bits >> drop) & 1);
            const auto y = std::bit_cast<double>((bits + bias) & ~((std::uint64_t{1} << drop) - 1));
            if (std::fabs(y) <= fmt.max_finite()) return y;
        }
    }

    const double a = std::fabs(x);
    const int exp2 = std::max(binade(a), fmt.min_exponent());
    const int shift = fmt.mantissa_bits - exp2;
    // Exact: scaling by a power of two, result below 2^(m+1) <= 2^53.
    const double scaled = std::ldexp(a, shift);

    double rounded = 0.0;
    if (const auto* sr = std::get_if<Stochastic>(&mode)) {
        const double lower = std::floor(scaled);
        const double frac = scaled - lower;
        const double u = unit_interval(mix_seed(sr->seed, std::bit_cast<std::uint64_t>(x)));
        rounded = (u < frac) ? lower + 1.0 : lower;
    } else {
        // Default floating-point environment rounds ties to even.
        rounded = std::nearbyint(scaled);
    }

    double result = std::ldexp(rounded, -shift);
    const double max_finite = fmt.max_finite();
    if (result > max_finite) result = max_finite;
    return std::copysign(result, x);
}

bool is_representable(double x, const FloatFormat& fmt) {
    if (!std::isfinite(x)) return false;
    return quantize(x, fmt) == x;
}

double ulp(double x, const FloatFormat& fmt) {
    require_finite(x, "ulp");
    if (x == 0.0) return fmt.min_subnormal();
    if (!is_representable(x, fmt)) {
        throw std::invalid_argument("ulp: value is not representable in " + fmt.tag());
    }
    const int exp2 = std::max(binade(std::fabs(x)), fmt.min_exponent());
    return std::ldexp(1.0, exp2 - fmt.mantissa_bits);
}

double heuristic_vanish_threshold(double w, const FloatFormat& fmt) {
    require_finite(w, "heuristic_vanish_threshold");
    if (w <= 0.0) throw std::invalid_argument("heuristic_vanish_threshold: w must be positive");
    if (w < fmt.min_normal()) {
        throw std::invalid_argument("heuristic_vanish_threshold: subnormal weights are not supported");
    }
    return std::ldexp(w, -fmt.mantissa_bits);
}

double exact_vanish_threshold(double w, const FloatFormat& fmt) {
    require_finite(w, "exact_vanish_threshold");
    if (w <= 0.0) throw std::invalid_argument("exact_vanish_threshold: w must be positive");
    if (w < fmt.min_normal()) {
        throw std::invalid_argument("exact_vanish_threshold: subnormal weights are not supported");
    }
    const double spacing = ulp(w, fmt);
    // Every update saturates back onto the largest finite value.
    if (w == fmt.max_finite()) return std::numeric_limits<double>::infinity();
    return spacing / 2.0;
}

std::uint64_t encode_bits(double x, const FloatFormat& fmt) {
    if (!is_representable(x, fmt)) {
        throw std::invalid_argument("encode_bits: value is not representable in " + fmt.tag());
    }
    const int m = fmt.mantissa_bits;
    const std::uint64_t sign = std::signbit(x) ? 1 : 0;
    const double a = std::fabs(x);
    std::uint64_t exponent_field = 0;
    std::uint64_t mantissa_field = 0;
    if (a < fmt.min_normal()) {
        mantissa_field = static_cast<std::uint64_t>(a / fmt.min_subnormal());
    } else {
        const int exp2 = binade(a);
        exponent_field = static_cast<std::uint64_t>(exp2 + fmt.bias);
        mantissa_field = static_cast<std::uint64_t>(std::ldexp(a, m - exp2)) - (std::uint64_t{1} << m);
    }
    return (sign << (fmt.exponent_bits + m)) | (exponent_field << m) | mantissa_field;
}

double decode_bits(std::uint64_t bits, const FloatFormat& fmt) {
    const int m = fmt.mantissa_bits;
    const std::uint64_t mantissa_mask = (std::uint64_t{1} << m) - 1;
    const std::uint64_t exponent_mask = (std::uint64_t{1} << fmt.exponent_bits) - 1;
    const std::uint64_t mantissa_field = bits & mantissa_mask;
    const std::uint64_t exponent_field = (bits >> m) & exponent_mask;
    const bool negative = ((bits >> (m + fmt.exponent_bits)) & 1) != 0;

    double magnitude = 0.0;
    if (exponent_field == exponent_mask) {
        magnitude = mantissa_field == 0 ? std::numeric_limits<double>::infinity()
                                        : std::numeric_limits<double>::quiet_NaN();
    } else if (exponent_field == 0) {
        magnitude = std::ldexp(static_cast<double>(mantissa_field), fmt.min_exponent() - m);
    } else {
        const auto significand = static_cast<double>((std::uint64_t{1} << m) | mantissa_field);
        magnitude = std::ldexp(significand, static_cast<int>(exponent_field) - fmt.bias - m);
    }
    return negative ? -magnitude : magnitude;
}

double next_up(double x, const FloatFormat& fmt) {
    if (x == 0.0) return fmt.min_subnormal();
    if (x == fmt.max_finite()) return std::numeric_limits<double>::infinity();
    const std::uint64_t sign_bit = std::uint64_t{1} << (fmt.exponent_bits + fmt.mantissa_bits);
    const std::uint64_t bits = encode_bits(x, fmt);
    if (x > 0.0) return decode_bits(bits + 1, fmt);
    const std::uint64_t magnitude = bits & ~sign_bit;
    return -decode_bits(magnitude - 1, fmt);
}

std::vector<double> enumerate_values(double lo, double hi, const FloatFormat& fmt) {
    require_finite(lo, "enumerate_values");
    require_finite(hi, "enumerate_values");
    if (!(lo < hi)) throw std::invalid_argument("enumerate_values: need lo < hi");

    double v = quantize(lo, fmt);
    if (v < lo) v = next_up(v, fmt);
    std::vector<double> out;
    while (v < hi) {
        out.push_back(v == 0.0 ? 0.0 : v);
        v = next_up(v, fmt);
    }
    return out;
}

}  // namespace budgetlab
