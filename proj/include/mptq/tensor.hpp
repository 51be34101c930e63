#pragma once

#include <cstddef>
#include <span>
#include <string>
#include <vector>

namespace mptq {

using Shape = std::vector<std::size_t>;

std::size_t shape_numel(const Shape& shape);
std::string shape_to_string(const Shape& shape);

/// Dense row-major float32 array.
///
/// The element count always equals the product of the shape. Operators in this
/// header return new tensors and never modify their arguments.
class Tensor {
public:
    Tensor() = default;
    explicit Tensor(Shape shape);
    Tensor(Shape shape, std::vector<float> data);

    const Shape& shape() const noexcept { return shape_; }
    std::size_t rank() const noexcept { return shape_.size(); }
    std::size_t dim(std::size_t axis) const { return shape_.at(axis); }
    std::size_t size() const noexcept { return data_.size(); }
    bool empty() const noexcept { return data_.empty(); }

    /// Size of the last axis (the channel axis for activations).
    std::size_t channels() const;
    /// Number of rows when viewed as (size / channels, channels).
    std::size_t rows() const;

    std::span<const float> data() const noexcept { return data_; }
    std::span<float> data() noexcept { return data_; }
    const std::vector<float>& values() const noexcept { return data_; }

    float operator[](std::size_t i) const noexcept { return data_[i]; }
    float& operator[](std::size_t i) noexcept { return data_[i]; }

    Tensor reshaped(Shape shape) const;

    bool operator==(const Tensor& other) const = default;

private:
    Shape shape_;
    std::vector<float> data_;
};

/// y = x * W^T + b over the last axis of x. W has shape (out, in).
Tensor linear(const Tensor& x, const Tensor& weight, std::span<const float> bias);

/// Plain 2-D product a (m, k) * b (k, n).
Tensor matmul(const Tensor& a, const Tensor& b);

/// Normalizes each row over the last axis, then applies gamma and beta.
Tensor layer_norm(const Tensor& x, std::span<const float> gamma, std::span<const float> beta,
                  float eps = 1e-6f);

/// Row-wise softmax over the last axis, stabilized by subtracting the row max.
Tensor softmax(const Tensor& x);

/// Exact erf-form GeLU: x * Phi(x).
float gelu(float x);
Tensor gelu(const Tensor& x);

Tensor add(const Tensor& a, const Tensor& b);

bool all_finite(std::span<const float> values);
float max_abs(std::span<const float> values);

}  // namespace mptq
