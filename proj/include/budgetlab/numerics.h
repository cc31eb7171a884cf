// SPDX-License-Identifier: Apache-2.0
//
// Software emulation of reduced-precision binary floating-point formats.
//
// Every emulated value lives in a native double. A format with at most 11
// exponent bits and 52 mantissa bits embeds exactly in a double, so rounding
// to the format is a pure function double -> double and the result is
// bit-exact with respect to real hardware for BF16 and FP32.

#pragma once

#include <cstdint>
#include <stdexcept>
#include <string>
#include <variant>
#include <vector>

namespace budgetlab {

/// Sign / exponent / mantissa layout of an IEEE-style binary format.
///
/// The all-ones exponent field is reserved for infinities and NaN, subnormals
/// use the all-zero exponent field.
struct FloatFormat {
    int exponent_bits = 8;
    int mantissa_bits = 7;
    int bias = 127;

    static FloatFormat make(int exponent_bits, int mantissa_bits);
    static FloatFormat make(int exponent_bits, int mantissa_bits, int bias);

    int total_bits() const { return 1 + exponent_bits + mantissa_bits; }
    int min_exponent() const { return 1 - bias; }
    int max_exponent() const { return (1 << exponent_bits) - 2 - bias; }
    double max_finite() const;
    double min_normal() const;
    double min_subnormal() const;

    /// True when the format coincides with the double carrier itself.
    bool is_carrier() const { return exponent_bits == 11 && mantissa_bits == 52 && bias == 1023; }

    /// Throws std::invalid_argument unless the format fits the double carrier.
    void validate() const;

    /// "bf16", "fp32", "wide" for the presets, "e<E>m<M>b<B>" otherwise.
    std::string tag() const;
    static FloatFormat from_tag(const std::string& tag);

    friend bool operator==(const FloatFormat&, const FloatFormat&) = default;
};

/// Raised when a computation produces NaN/Inf where a finite value is required.
class NumericalError : public std::runtime_error {
public:
    using std::runtime_error::runtime_error;
};

inline constexpr FloatFormat kBF16{8, 7, 127};
inline constexpr FloatFormat kFP32{8, 23, 127};
/// The double carrier; quantizing to it is the identity.
inline constexpr FloatFormat kWide{11, 52, 1023};

struct NearestEven {
    friend bool operator==(const NearestEven&, const NearestEven&) = default;
};
struct Stochastic {
    std::uint64_t seed = 0;
    friend bool operator==(const Stochastic&, const Stochastic&) = default;
};
using RoundingMode = std::variant<NearestEven, Stochastic>;

/// Rounds x to the nearest value representable in fmt.
///
/// NearestEven breaks ties towards the even mantissa. Stochastic rounds up
/// with probability equal to the fractional distance to the lower neighbour,
/// drawing its uniform variate from a hash of (seed, x) so the result is a
/// pure function of its arguments. Magnitudes beyond the largest finite value
/// saturate to +-max_finite; NaN and infinities pass through unchanged.
double quantize(double x, const FloatFormat& fmt, const RoundingMode& mode = NearestEven{});

/// Spacing from x to the next representable value of larger magnitude.
/// x == 0 yields the smallest subnormal; throws if x is not representable.
double ulp(double x, const FloatFormat& fmt);

/// Rule-of-thumb bound w / 2^mantissa_bits below which an additive update
/// to w is lost. Requires w positive and normal in fmt.
double heuristic_vanish_threshold(double w, const FloatFormat& fmt);

/// Supremum t such that quantize(w + u) == w for every 0 < u < t under
/// round-to-nearest-even. Requires w representable, positive and normal.
double exact_vanish_threshold(double w, const FloatFormat& fmt);

/// All representable values v with lo <= v < hi, ascending.
std::vector<double> enumerate_values(double lo, double hi, const FloatFormat& fmt);

bool is_representable(double x, const FloatFormat& fmt);

/// Sign/exponent/mantissa fields packed into an integer the way the format
/// lays them out in memory. Only defined for representable finite values.
std::uint64_t encode_bits(double x, const FloatFormat& fmt);
double decode_bits(std::uint64_t bits, const FloatFormat& fmt);

/// Next representable value above x (x must be representable and finite).
double next_up(double x, const FloatFormat& fmt);

}  // namespace budgetlab
