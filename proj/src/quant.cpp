#include "mptq/quant.hpp"

#include <algorithm>
#include <cmath>

#include "mptq/error.hpp"

namespace mptq {

QuantSpec::QuantSpec(int b, double s) : bits(b), scale(s) {
    if (b < kMinBits || b > kMaxBits) throw InputError("bit-width " + std::to_string(b) + " outside [2, 8]");
    if (!(s > 0.0) || !std::isfinite(s)) throw InputError("quantization scale must be positive and finite");
}

std::int32_t quantize_value(double x, const QuantSpec& spec) {
    const double r = std::round(x / spec.scale);
    return static_cast<std::int32_t>(std::clamp(r, static_cast<double>(spec.min_code()),
                                                static_cast<double>(spec.max_code())));
}

QuantizedTensor quantize(const Tensor& x, const QuantSpec& spec) {
    if (!all_finite(x.data())) throw InputError("cannot quantize non-finite values");
    QuantizedTensor q{x.shape(), std::vector<std::int8_t>(x.size()), spec};
    for (std::size_t i = 0; i < x.size(); ++i) q.codes[i] = static_cast<std::int8_t>(quantize_value(x[i], spec));
    return q;
}

Tensor dequantize(const QuantizedTensor& q) {
    std::vector<float> out(q.codes.size());
    for (std::size_t i = 0; i < out.size(); ++i) out[i] = static_cast<float>(q.spec.scale * q.codes[i]);
    return Tensor(q.shape, std::move(out));
}

Tensor fake_quantize(const Tensor& x, const QuantSpec& spec) { return dequantize(quantize(x, spec)); }

QuantSpec minmax_scale(std::span<const float> x, int bits) {
    if (x.empty()) throw InputError("minmax_scale needs a non-empty tensor");
    const double m = max_abs(x);
    if (m == 0.0) return QuantSpec(bits, 1.0);
    return QuantSpec(bits, m / std::ldexp(1.0, bits - 1));
}

double sqnr_db(std::span<const float> x, std::span<const float> reconstructed) {
    if (x.size() != reconstructed.size()) throw DimensionError("sqnr_db: element counts differ");
    double signal = 0.0, noise = 0.0;
    for (std::size_t i = 0; i < x.size(); ++i) {
        const double v = x[i];
        const double e = v - static_cast<double>(reconstructed[i]);
        signal += v * v;
        noise += e * e;
    }
    if (noise == 0.0) return kSqnrExact;
    if (signal == 0.0) return -kSqnrExact;
    return 10.0 * std::log10(signal / noise);
}

double sqnr_db(const Tensor& x, const Tensor& reconstructed) {
    if (x.shape() != reconstructed.shape()) throw DimensionError("sqnr_db: shapes differ");
    return sqnr_db(x.data(), reconstructed.data());
}

double mse(std::span<const float> a, std::span<const float> b) {
    if (a.size() != b.size()) throw DimensionError("mse: element counts differ");
    if (a.empty()) return 0.0;
    double acc = 0.0;
    for (std::size_t i = 0; i < a.size(); ++i) {
        const double d = static_cast<double>(a[i]) - b[i];
        acc += d * d;
    }
    return acc / static_cast<double>(a.size());
}

}  // namespace mptq
