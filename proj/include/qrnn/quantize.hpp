#pragma once

#include <cmath>
#include <cstdint>
#include <optional>
#include <stdexcept>
#include <string>

#include "qrnn/activations.hpp"
#include "qrnn/matrix.hpp"
#include "qrnn/rng.hpp"

namespace qrnn {

enum class QuantMethod : std::uint8_t {
    binary = 0,       // {-1, +1}
    ternary = 1,      // {-1, 0, +1}
    pow2_ternary = 2, // Qm.f fixed-point rounding; Q1.1 with clamp gives {-0.5, 0, 0.5}
    exp_quant = 3,    // {0} U {+-2^e : exp_min <= e <= exp_max}
};

enum class QuantVariant : std::uint8_t { stochastic = 0, deterministic = 1 };

inline const char* to_string(QuantMethod m) {
    switch (m) {
        case QuantMethod::binary: return "binary";
        case QuantMethod::ternary: return "ternary";
        case QuantMethod::pow2_ternary: return "pow2ternary";
        case QuantMethod::exp_quant: return "expquant";
    }
    return "?";
}

inline const char* to_string(QuantVariant v) {
    return v == QuantVariant::stochastic ? "stochastic" : "deterministic";
}

inline QuantMethod parse_quant_method(const std::string& s) {
    if (s == "binary") return QuantMethod::binary;
    if (s == "ternary") return QuantMethod::ternary;
    if (s == "pow2ternary") return QuantMethod::pow2_ternary;
    if (s == "expquant") return QuantMethod::exp_quant;
    throw std::invalid_argument("unknown quantization method '" + s + "'");
}

inline QuantVariant parse_quant_variant(const std::string& s) {
    if (s == "stochastic") return QuantVariant::stochastic;
    if (s == "deterministic") return QuantVariant::deterministic;
    throw std::invalid_argument("unknown quantization variant '" + s + "'");
}

// Which rounding to apply to a weight tensor, and with which parameters.
struct QuantizerSpec {
    QuantMethod method = QuantMethod::ternary;
    QuantVariant variant = QuantVariant::deterministic;
    int int_bits = 1;  // m, integer bits including sign (pow2_ternary)
    int frac_bits = 1; // f, fractional bits (pow2_ternary)
    int exp_min = -8;  // exp_quant exponent range
    int exp_max = 0;
    // pow2_ternary: clamp to [-2^-f, 2^-f] before rounding so the output set
    // is exactly {-2^-f, 0, 2^-f}. With the flag off the clip range is the
    // literal [-2^m, 2^m].
    bool ternary_clamp = true;

    void validate() const {
        if (int_bits < 1) throw std::invalid_argument("quantizer: int_bits must be >= 1");
        if (frac_bits < 0) throw std::invalid_argument("quantizer: frac_bits must be >= 0");
        if (exp_min > exp_max) throw std::invalid_argument("quantizer: exp_min > exp_max");
        if (method == QuantMethod::pow2_ternary && variant == QuantVariant::stochastic)
            throw std::invalid_argument("quantizer: pow2ternary is deterministic only");
    }

    bool is_stochastic() const { return variant == QuantVariant::stochastic; }

    QuantizerSpec deterministic_twin() const {
        QuantizerSpec s = *this;
        s.variant = QuantVariant::deterministic;
        return s;
    }

    std::string label() const {
        std::string l = to_string(method);
        if (method != QuantMethod::pow2_ternary)
            l += is_stochastic() ? "_stoch" : "_det";
        return l;
    }
};

namespace detail {

// floor(log2 a) for a > 0 and the fractional weight p = a / 2^floor - 1.
// frexp gives a = mant * 2^exp with mant in [0.5, 1), so floor(log2 a) is
// exp - 1 and p = 2*mant - 1, exact in floating point.
inline std::pair<int, double> log2_floor_frac(double a) {
    int exp = 0;
    const double mant = std::frexp(a, &exp);
    return {exp - 1, 2.0 * mant - 1.0};
}

inline double exp_quantize_value(double w, QuantVariant variant, int exp_min, int exp_max,
                                 Rng* rng) {
    if (w == 0.0) return 0.0;
    const double sign = w < 0.0 ? -1.0 : 1.0;
    const double a = std::abs(w);
    if (a >= std::ldexp(1.0, exp_max)) return sign * std::ldexp(1.0, exp_max);
    if (a < std::ldexp(1.0, exp_min)) {
        // Below the smallest representable magnitude: round towards
        // sign*2^exp_min with probability a/2^exp_min, else to zero. The
        // stochastic form keeps the expectation equal to w all the way down.
        const double p = a / std::ldexp(1.0, exp_min);
        const bool up = variant == QuantVariant::stochastic ? rng->bernoulli(p) : p > 0.5;
        return up ? sign * std::ldexp(1.0, exp_min) : 0.0;
    }
    const auto [lo, p] = log2_floor_frac(a);
    const bool up = variant == QuantVariant::stochastic ? rng->bernoulli(p) : p > 0.5;
    return sign * std::ldexp(1.0, up ? lo + 1 : lo);
}

inline double pow2_ternarize_value(double w, int int_bits, int frac_bits, bool ternary_clamp) {
    const double hi =
        ternary_clamp ? std::ldexp(1.0, -frac_bits) : std::ldexp(1.0, int_bits);
    const double c = std::clamp(w, -hi, hi);
    // std::round is round-half-away-from-zero, which keeps the map odd.
    return std::round(std::ldexp(c, frac_bits)) * std::ldexp(1.0, -frac_bits);
}

} // namespace detail

// +1 with probability hard_sigmoid(w), else -1. Fresh samples every call.
template <typename T>
Matrix<T> binarize_stoch(const Matrix<T>& w, Rng& rng) {
    Matrix<T> out = w;
    for (auto& v : out) v = rng.bernoulli(hard_sigmoid(double(v))) ? T(1) : T(-1);
    return out;
}

// +1 where w >= 0, -1 otherwise.
template <typename T>
Matrix<T> binarize_det(const Matrix<T>& w) {
    Matrix<T> out = w;
    for (auto& v : out) v = v >= T(0) ? T(1) : T(-1);
    return out;
}

// sign(w) * Bernoulli(clip(|2w|, 0, 1)) per entry, with sign(0) = 0.
template <typename T>
Matrix<T> ternarize_stoch(const Matrix<T>& w, Rng& rng) {
    Matrix<T> out = w;
    for (auto& v : out) {
        const double p = std::clamp(2.0 * std::abs(double(v)), 0.0, 1.0);
        const T s = v > T(0) ? T(1) : (v < T(0) ? T(-1) : T(0));
        // one draw per entry regardless of sign, so the stream position
        // depends only on the tensor shape
        v = rng.bernoulli(p) ? s : T(0);
    }
    return out;
}

// +1 if w > 0.5, -1 if w <= -0.5, else 0. The boundary asymmetry (strict on
// the positive side, inclusive on the negative) is intentional.
template <typename T>
Matrix<T> ternarize_det(const Matrix<T>& w) {
    Matrix<T> out = w;
    for (auto& v : out) v = v > T(0.5) ? T(1) : (v <= T(-0.5) ? T(-1) : T(0));
    return out;
}

// Qm.f fixed-point rounding: clip, then round the fractional part.
template <typename T>
Matrix<T> pow2_ternarize(const Matrix<T>& w, int int_bits, int frac_bits,
                         bool ternary_clamp = true) {
    Matrix<T> out = w;
    for (auto& v : out)
        v = T(detail::pow2_ternarize_value(double(v), int_bits, frac_bits, ternary_clamp));
    return out;
}

// Round |w| to one of its two neighbouring powers of two; stochastically the
// upper exponent is chosen with probability |w|/2^floor(log2|w|) - 1, which
// makes the result unbiased. The sign is reapplied afterwards.
template <typename T>
Matrix<T> exp_quantize(const Matrix<T>& w, QuantVariant variant, int exp_min = -8,
                       int exp_max = 0, Rng* rng = nullptr) {
    if (variant == QuantVariant::stochastic && rng == nullptr)
        throw std::invalid_argument("exp_quantize: stochastic variant needs an rng");
    Matrix<T> out = w;
    for (auto& v : out)
        v = T(detail::exp_quantize_value(double(v), variant, exp_min, exp_max, rng));
    return out;
}

// Training-time application: stochastic variants draw fresh samples from rng.
template <typename T>
Matrix<T> apply_quantizer(const QuantizerSpec& spec, const Matrix<T>& w, Rng* rng) {
    spec.validate();
    if (spec.is_stochastic() && rng == nullptr)
        throw std::invalid_argument("apply_quantizer: stochastic spec needs an rng");
    switch (spec.method) {
        case QuantMethod::binary:
            return spec.is_stochastic() ? binarize_stoch(w, *rng) : binarize_det(w);
        case QuantMethod::ternary:
            return spec.is_stochastic() ? ternarize_stoch(w, *rng) : ternarize_det(w);
        case QuantMethod::pow2_ternary:
            return pow2_ternarize(w, spec.int_bits, spec.frac_bits, spec.ternary_clamp);
        case QuantMethod::exp_quant:
            return exp_quantize(w, spec.variant, spec.exp_min, spec.exp_max, rng);
    }
    throw std::logic_error("apply_quantizer: bad method");
}

// Test-time application: the deterministic variant of the same method.
template <typename T>
Matrix<T> apply_deterministic(const QuantizerSpec& spec, const Matrix<T>& w) {
    return apply_quantizer(spec.deterministic_twin(), w, nullptr);
}

// Membership in the quantizer's finite output set. Exact comparisons: every
// representable value is a small dyadic rational.
inline bool value_in_set(const QuantizerSpec& spec, double v) {
    switch (spec.method) {
        case QuantMethod::binary:
            return v == 1.0 || v == -1.0;
        case QuantMethod::ternary:
            return v == 1.0 || v == 0.0 || v == -1.0;
        case QuantMethod::pow2_ternary: {
            if (spec.ternary_clamp) {
                const double s = std::ldexp(1.0, -spec.frac_bits);
                return v == 0.0 || v == s || v == -s;
            }
            const double scaled = std::ldexp(v, spec.frac_bits);
            return scaled == std::floor(scaled) &&
                   std::abs(v) <= std::ldexp(1.0, spec.int_bits);
        }
        case QuantMethod::exp_quant: {
            if (v == 0.0) return true;
            const auto [e, frac] = detail::log2_floor_frac(std::abs(v));
            return frac == 0.0 && e >= spec.exp_min && e <= spec.exp_max;
        }
    }
    return false;
}

} // namespace qrnn
