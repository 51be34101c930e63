#pragma once

#include <cstdint>
#include <limits>
#include <span>
#include <vector>

#include "mptq/tensor.hpp"

namespace mptq {

constexpr int kMinBits = 2;
constexpr int kMaxBits = 8;

/// Per-tensor uniform symmetric quantizer: code range [-2^(b-1), 2^(b-1)-1].
struct QuantSpec {
    int bits = 8;
    double scale = 1.0;

    QuantSpec() = default;
    QuantSpec(int bits, double scale);

    std::int32_t min_code() const noexcept { return -(std::int32_t{1} << (bits - 1)); }
    std::int32_t max_code() const noexcept { return (std::int32_t{1} << (bits - 1)) - 1; }

    bool operator==(const QuantSpec&) const = default;
};

struct QuantizedTensor {
    Shape shape;
    std::vector<std::int8_t> codes;
    QuantSpec spec;
};

/// Round half away from zero, then clamp to the code range of `spec`.
std::int32_t quantize_value(double x, const QuantSpec& spec);

QuantizedTensor quantize(const Tensor& x, const QuantSpec& spec);
Tensor dequantize(const QuantizedTensor& q);
Tensor fake_quantize(const Tensor& x, const QuantSpec& spec);

/// scale = max|x| / 2^(bits-1), or 1 when x is all zeros.
QuantSpec minmax_scale(std::span<const float> x, int bits);
inline QuantSpec minmax_scale(const Tensor& x, int bits) { return minmax_scale(x.data(), bits); }

constexpr double kSqnrExact = std::numeric_limits<double>::infinity();

/// 10 * log10(sum x^2 / sum (x - xh)^2) in dB. Returns +inf when the error is
/// zero and -inf when the signal is zero but the error is not.
double sqnr_db(std::span<const float> x, std::span<const float> reconstructed);
double sqnr_db(const Tensor& x, const Tensor& reconstructed);

double mse(std::span<const float> a, std::span<const float> b);

}  // namespace mptq
