#pragma once

#include <string>

#include "ssmdyn/error.hpp"
#include "ssmdyn/numerics.hpp"

namespace ssmdyn {

/// Which numeric grid each stage of a computation lives on. Parameter
/// updates always happen in `master_format`, which is FP32 or wider.
struct PrecisionPolicy {
    NumericFormat activation_format = NumericFormat::FP64;
    NumericFormat gradient_format = NumericFormat::FP64;
    NumericFormat master_format = NumericFormat::FP64;

    static PrecisionPolicy fp64() { return {}; }
    static PrecisionPolicy fp32() {
        return {NumericFormat::FP32, NumericFormat::FP32, NumericFormat::FP32};
    }
    /// Half-precision activations and gradients over FP32 master weights.
    static PrecisionPolicy mixed(NumericFormat half) {
        return {half, half, NumericFormat::FP32};
    }
    /// Resolves "fp64", "fp32", "bf16" or "fp16" to the matching policy.
    static PrecisionPolicy named(const std::string& name) {
        const auto f = parse_format(name);
        switch (f) {
            case NumericFormat::FP64: return fp64();
            case NumericFormat::FP32: return fp32();
            default: return mixed(f);
        }
    }

    void validate() const {
        if (master_format != NumericFormat::FP32 && master_format != NumericFormat::FP64)
            throw Error("master format must be fp32 or fp64");
    }

    std::string name() const {
        if (activation_format == gradient_format && activation_format == master_format)
            return std::string(to_string(activation_format));
        return std::string(to_string(activation_format)) + "/" +
               std::string(to_string(gradient_format)) + "/" + std::string(to_string(master_format));
    }

    friend bool operator==(const PrecisionPolicy&, const PrecisionPolicy&) = default;
};

}  // namespace ssmdyn
