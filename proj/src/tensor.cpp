#include "mptq/tensor.hpp"

#include <algorithm>
#include <cmath>
#include <sstream>

#include "mptq/error.hpp"

namespace mptq {

std::size_t shape_numel(const Shape& shape) {
    std::size_t n = 1;
    for (auto d : shape) n *= d;
    return n;
}

std::string shape_to_string(const Shape& shape) {
    std::ostringstream os;
    os << '(';
    for (std::size_t i = 0; i < shape.size(); ++i) {
        if (i) os << ", ";
        os << shape[i];
    }
    os << ')';
    return os.str();
}

Tensor::Tensor(Shape shape) : shape_(std::move(shape)), data_(shape_numel(shape_), 0.0f) {
    for (auto d : shape_)
        if (d == 0) throw DimensionError("tensor dimensions must be positive");
}

Tensor::Tensor(Shape shape, std::vector<float> data) : shape_(std::move(shape)), data_(std::move(data)) {
    for (auto d : shape_)
        if (d == 0) throw DimensionError("tensor dimensions must be positive");
    if (shape_numel(shape_) != data_.size())
        throw DimensionError("shape " + shape_to_string(shape_) + " does not match " +
                             std::to_string(data_.size()) + " elements");
}

std::size_t Tensor::channels() const {
    if (shape_.empty()) throw DimensionError("rank-0 tensor has no channel axis");
    return shape_.back();
}

std::size_t Tensor::rows() const { return size() / channels(); }

Tensor Tensor::reshaped(Shape shape) const { return Tensor(std::move(shape), data_); }

Tensor linear(const Tensor& x, const Tensor& weight, std::span<const float> bias) {
    if (weight.rank() != 2) throw DimensionError("linear weight must be 2-D");
    const std::size_t out = weight.dim(0);
    const std::size_t in = weight.dim(1);
    if (x.channels() != in)
        throw DimensionError("linear input has " + std::to_string(x.channels()) + " channels, weight expects " +
                             std::to_string(in));
    if (!bias.empty() && bias.size() != out) throw DimensionError("linear bias length mismatch");

    Shape shape = x.shape();
    shape.back() = out;
    Tensor y(shape);
    const std::size_t rows = x.rows();
    auto xs = x.data();
    auto ws = weight.data();
    auto ys = y.data();
    for (std::size_t r = 0; r < rows; ++r) {
        const float* xr = xs.data() + r * in;
        for (std::size_t o = 0; o < out; ++o) {
            const float* wr = ws.data() + o * in;
            double acc = bias.empty() ? 0.0 : bias[o];
            for (std::size_t i = 0; i < in; ++i) acc += static_cast<double>(xr[i]) * wr[i];
            ys[r * out + o] = static_cast<float>(acc);
        }
    }
    return y;
}

Tensor matmul(const Tensor& a, const Tensor& b) {
    if (a.rank() != 2 || b.rank() != 2) throw DimensionError("matmul expects 2-D operands");
    const std::size_t m = a.dim(0), k = a.dim(1), n = b.dim(1);
    if (b.dim(0) != k) throw DimensionError("matmul inner dimensions differ");
    Tensor c({m, n});
    auto as = a.data();
    auto bs = b.data();
    auto cs = c.data();
    for (std::size_t i = 0; i < m; ++i) {
        for (std::size_t j = 0; j < n; ++j) {
            double acc = 0.0;
            for (std::size_t p = 0; p < k; ++p) acc += static_cast<double>(as[i * k + p]) * bs[p * n + j];
            cs[i * n + j] = static_cast<float>(acc);
        }
    }
    return c;
}

Tensor layer_norm(const Tensor& x, std::span<const float> gamma, std::span<const float> beta, float eps) {
    if (!(eps > 0.0f)) throw InputError("layer_norm eps must be positive");
    const std::size_t c = x.channels();
    if (gamma.size() != c || beta.size() != c)
        throw DimensionError("layer_norm parameters have length " + std::to_string(gamma.size()) + "/" +
                             std::to_string(beta.size()) + ", input has " + std::to_string(c) + " channels");
    Tensor y(x.shape());
    auto xs = x.data();
    auto ys = y.data();
    for (std::size_t r = 0; r < x.rows(); ++r) {
        const float* row = xs.data() + r * c;
        double mean = 0.0;
        for (std::size_t j = 0; j < c; ++j) mean += row[j];
        mean /= static_cast<double>(c);
        double var = 0.0;
        for (std::size_t j = 0; j < c; ++j) {
            const double d = row[j] - mean;
            var += d * d;
        }
        var /= static_cast<double>(c);
        const double inv = 1.0 / std::sqrt(var + eps);
        for (std::size_t j = 0; j < c; ++j)
            ys[r * c + j] = static_cast<float>((row[j] - mean) * inv * gamma[j] + beta[j]);
    }
    return y;
}

Tensor softmax(const Tensor& x) {
    const std::size_t c = x.channels();
    Tensor y(x.shape());
    auto xs = x.data();
    auto ys = y.data();
    std::vector<double> e(c);
    for (std::size_t r = 0; r < x.rows(); ++r) {
        const float* row = xs.data() + r * c;
        const float mx = *std::max_element(row, row + c);
        double sum = 0.0;
        for (std::size_t j = 0; j < c; ++j) {
            e[j] = std::exp(static_cast<double>(row[j]) - mx);
            sum += e[j];
        }
        for (std::size_t j = 0; j < c; ++j) ys[r * c + j] = static_cast<float>(e[j] / sum);
    }
    return y;
}

float gelu(float x) {
    const double v = x;
    return static_cast<float>(0.5 * v * (1.0 + std::erf(v / std::sqrt(2.0))));
}

Tensor gelu(const Tensor& x) {
    Tensor y(x.shape());
    auto xs = x.data();
    auto ys = y.data();
    for (std::size_t i = 0; i < xs.size(); ++i) ys[i] = gelu(xs[i]);
    return y;
}

Tensor add(const Tensor& a, const Tensor& b) {
    if (a.shape() != b.shape()) throw DimensionError("add: shapes differ");
    Tensor y(a.shape());
    for (std::size_t i = 0; i < a.size(); ++i) y[i] = a[i] + b[i];
    return y;
}

bool all_finite(std::span<const float> values) {
    return std::all_of(values.begin(), values.end(), [](float v) { return std::isfinite(v); });
}

float max_abs(std::span<const float> values) {
    float m = 0.0f;
    for (float v : values) m = std::max(m, std::fabs(v));
    return m;
}

}  // namespace mptq
