#pragma once

// Scalar primitives shared by every module: reduced-precision emulation,
// activations, and the spectral norm of diagonal products.

#include <bit>
#include <cmath>
#include <cstdint>
#include <limits>
#include <span>
#include <string>
#include <string_view>
#include <vector>

#include "ssmdyn/error.hpp"

namespace ssmdyn {

enum class NumericFormat { FP32, FP16, BF16, FP64 };

inline std::string_view to_string(NumericFormat f) {
    switch (f) {
        case NumericFormat::FP32: return "fp32";
        case NumericFormat::FP16: return "fp16";
        case NumericFormat::BF16: return "bf16";
        case NumericFormat::FP64: return "fp64";
    }
    return "unknown";
}

inline NumericFormat parse_format(std::string_view s) {
    if (s == "fp32" || s == "FP32") return NumericFormat::FP32;
    if (s == "fp16" || s == "FP16") return NumericFormat::FP16;
    if (s == "bf16" || s == "BF16") return NumericFormat::BF16;
    if (s == "fp64" || s == "FP64") return NumericFormat::FP64;
    throw Error("unknown numeric format '" + std::string(s) + "'");
}

/// Bit layout of an IEEE-style binary format: explicit mantissa bits and the
/// normal exponent range.
struct FormatTraits {
    int mantissa_bits;
    int min_exponent;  // exponent of the smallest normal
    int max_exponent;  // exponent of the largest finite value
};

constexpr FormatTraits traits(NumericFormat f) {
    switch (f) {
        case NumericFormat::FP16: return {10, -14, 15};
        case NumericFormat::BF16: return {7, -126, 127};
        case NumericFormat::FP32: return {23, -126, 127};
        case NumericFormat::FP64: return {52, -1022, 1023};
    }
    return {52, -1022, 1023};
}

/// Largest finite value of `f`.
inline double max_finite(NumericFormat f) {
    const auto t = traits(f);
    return std::ldexp(2.0 - std::ldexp(1.0, -t.mantissa_bits), t.max_exponent);
}

namespace detail {

/// Branch-free rounding onto F. Normal results round the binary64 bit
/// pattern directly; the target-subnormal range is rounded by adding a
/// constant whose unit in the last place is the target quantum.
template <NumericFormat F>
[[gnu::always_inline]] inline double round_to(double x) {
    constexpr FormatTraits t = traits(F);
    constexpr int drop = 52 - t.mantissa_bits;
    constexpr std::uint64_t kSignMask = 0x8000000000000000ull;
    constexpr std::uint64_t half = (std::uint64_t{1} << (drop - 1)) - 1;
    constexpr std::uint64_t keep = ~((std::uint64_t{1} << drop) - 1);
    constexpr double min_normal = std::bit_cast<double>(static_cast<std::uint64_t>(t.min_exponent + 1023) << 52);
    constexpr double upper = std::bit_cast<double>(static_cast<std::uint64_t>(t.max_exponent + 1024) << 52);
    constexpr double magic =
        std::bit_cast<double>(static_cast<std::uint64_t>(t.min_exponent - t.mantissa_bits + 52 + 1023) << 52);
    const std::uint64_t bits = std::bit_cast<std::uint64_t>(x);
    const std::uint64_t mag = bits & ~kSignMask;
    const double ax = std::bit_cast<double>(mag);
    const double r_norm = std::bit_cast<double>((mag + half + ((mag >> drop) & 1u)) & keep);
    const double r_sub = (ax + magic) - magic;
    double r = ax < min_normal ? r_sub : r_norm;
    r = r >= upper ? std::numeric_limits<double>::infinity() : r;
    r = std::bit_cast<double>(std::bit_cast<std::uint64_t>(r) | (bits & kSignMask));
    return x != x ? x : r;
}

template <NumericFormat F>
void round_span(std::span<double> xs) {
    for (double& x : xs) x = round_to<F>(x);
}

}  // namespace detail

/// Rounds `x` to the nearest value of `fmt` (ties to even). Subnormals are
/// kept, overflow becomes +-inf and NaN propagates.
inline double quantize(double x, NumericFormat fmt) {
    switch (fmt) {
        case NumericFormat::FP64: return x;
        case NumericFormat::FP32: return static_cast<double>(static_cast<float>(x));
        case NumericFormat::FP16: return detail::round_to<NumericFormat::FP16>(x);
        case NumericFormat::BF16: return detail::round_to<NumericFormat::BF16>(x);
    }
    return x;
}

/// Rounding onto a format fixed at compile time; lets hot loops pick the
/// format once instead of per element.
template <NumericFormat F>
struct Rounder {
    static constexpr NumericFormat format = F;
    double operator()(double x) const noexcept {
        if constexpr (F == NumericFormat::FP64) return x;
        else if constexpr (F == NumericFormat::FP32) return static_cast<double>(static_cast<float>(x));
        else return detail::round_to<F>(x);
    }
};

template <class Fn>
decltype(auto) with_rounder(NumericFormat fmt, Fn&& fn) {
    switch (fmt) {
        case NumericFormat::FP32: return fn(Rounder<NumericFormat::FP32>{});
        case NumericFormat::FP16: return fn(Rounder<NumericFormat::FP16>{});
        case NumericFormat::BF16: return fn(Rounder<NumericFormat::BF16>{});
        case NumericFormat::FP64: break;
    }
    return fn(Rounder<NumericFormat::FP64>{});
}

inline void quantize_inplace(std::span<double> xs, NumericFormat fmt) {
    switch (fmt) {
        case NumericFormat::FP64: return;
        case NumericFormat::FP32:
            for (double& x : xs) x = static_cast<double>(static_cast<float>(x));
            return;
        case NumericFormat::FP16: return detail::round_span<NumericFormat::FP16>(xs);
        case NumericFormat::BF16: return detail::round_span<NumericFormat::BF16>(xs);
    }
}

/// True when every element already lies on the value grid of `fmt`.
inline bool on_grid(std::span<const double> xs, NumericFormat fmt) {
    for (double x : xs) {
        const double q = quantize(x, fmt);
        if (!(q == x || (std::isnan(q) && std::isnan(x)))) return false;
    }
    return true;
}

inline constexpr double kSoftplusLinearThreshold = 30.0;

inline double softplus(double x) {
    if (x > kSoftplusLinearThreshold) return x + std::log1p(std::exp(-x));
    return std::log1p(std::exp(x));
}

inline double sigmoid(double x) {
    if (x >= 0) return 1.0 / (1.0 + std::exp(-x));
    const double e = std::exp(x);
    return e / (1.0 + e);
}

inline double silu(double x) { return x * sigmoid(x); }

/// d/dx silu(x) = s(x) (1 + x (1 - s(x))).
inline double silu_grad(double x) {
    const double s = sigmoid(x);
    return s * (1.0 + x * (1.0 - s));
}

/// Spectral norm of prod_t diag(diags[t]); the product of diagonal matrices is
/// diagonal so the norm is the largest absolute diagonal entry.
inline double diag_product_specnorm(std::span<const std::vector<double>> diags) {
    if (diags.empty()) throw Error("empty product");
    const std::size_t d = diags.front().size();
    require(d >= 1, "diagonal vectors must be non-empty");
    std::vector<double> prod(d, 1.0);
    for (const auto& v : diags) {
        require(v.size() == d, "diagonal vectors differ in length");
        for (std::size_t j = 0; j < d; ++j) prod[j] *= v[j];
    }
    double best = 0.0;
    for (double p : prod) best = std::max(best, std::fabs(p));
    return best;
}

}  // namespace ssmdyn
