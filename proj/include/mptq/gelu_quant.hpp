#pragma once

#include <cstdint>
#include <functional>
#include <span>
#include <vector>

#include "json.hpp"
#include "mptq/tensor.hpp"

namespace mptq {

// Three-region quantizer for post-GeLU activations.
//
// A value is first quantized with the base step s0 into a wide signed code
// x_q. The code then falls in one of three regions, each stored with its own
// step and a fixed-width magnitude field:
//
//   negative        x_q < 0                      prefix 01, (bits-2)-bit field, step s0
//   small-positive  0 <= x_q < 2^(m0+bits-3)     prefix 00, (bits-2)-bit field, step s0 * 2^m0
//   large-positive  otherwise                    prefix 1,  (bits-1)-bit field, step s0 * 2^m1
//
// The positive regions keep the high bits of x_q, rounding on the first
// dropped bit. At 6 bits the fields hold 15 and 31 and the region boundary is
// 2^(m0+3).

constexpr double kGeluUpperPercentile = 99.95;
constexpr int kRegionMinBits = 4;
constexpr std::size_t kS0GridSize = 100;
constexpr double kS0GridSpan = 1.2;

struct GeluStats {
    double x_low = 0.0;  // mean of per-sample minima
    double x_up = 0.0;   // 99.95th percentile of the pooled values
};

enum class Region : std::uint8_t { Negative, SmallPositive, LargePositive };

const char* to_string(Region r);

struct RegionCode {
    Region region = Region::SmallPositive;
    std::uint32_t magnitude = 0;

    bool operator==(const RegionCode&) const = default;
};

struct RegionQuantizer {
    int bits = 6;
    double s0 = 1.0;
    int m0 = 0;
    int m1 = 1;

    RegionQuantizer() = default;
    RegionQuantizer(int bits, double s0, int m0, int m1);

    double s1() const { return s0 * static_cast<double>(std::int64_t{1} << m0); }
    double s2() const { return s0 * static_cast<double>(std::int64_t{1} << m1); }

    std::uint32_t negative_max() const { return (1u << (bits - 2)) - 1; }
    std::uint32_t small_max() const { return (1u << (bits - 2)) - 1; }
    std::uint32_t large_max() const { return (1u << (bits - 1)) - 1; }
    /// First wide code that belongs to the large-positive region.
    std::int64_t region_boundary() const { return std::int64_t{1} << (m0 + bits - 3); }

    double scale_of(Region r) const;

    bool operator==(const RegionQuantizer&) const = default;
};

/// Error between the full-precision and the quantized tensor; smaller is
/// better. Used to rank candidate (s0, m0) pairs. An empty metric means mean
/// squared error, computed from per-code bins instead of a full pass per
/// candidate.
using QuantMetric = std::function<double(std::span<const float> reference, std::span<const float> quantized)>;

double mse_metric(std::span<const float> reference, std::span<const float> quantized);

/// Linear-interpolation percentile of `values` (pct in [0, 100]).
double percentile(std::vector<float> values, double pct);

GeluStats collect_gelu_stats(std::span<const Tensor> samples);

/// m1 = round(log2((x_up / (2^(bits-1)-1)) / (x_low / -(2^(bits-2)-1)))),
/// clamped to [1, bits + 2].
int compute_m1(const GeluStats& stats, int bits);

/// Wide signed code round(x / s0), saturated to bits + m1 bits.
std::int64_t wide_code(double x, const RegionQuantizer& rq);

RegionCode region_encode(double x, const RegionQuantizer& rq);
double region_decode(const RegionCode& code, const RegionQuantizer& rq);

std::uint32_t pack_bits(const RegionCode& code, const RegionQuantizer& rq);
RegionCode unpack_bits(std::uint32_t pattern, const RegionQuantizer& rq);

/// Concatenates packed codes MSB-first and pads the last byte with zeros.
std::vector<std::uint8_t> pack_stream(std::span<const RegionCode> codes, const RegionQuantizer& rq);
std::vector<RegionCode> unpack_stream(std::span<const std::uint8_t> bytes, std::size_t count,
                                      const RegionQuantizer& rq);

Tensor region_fake_quantize(const Tensor& x, const RegionQuantizer& rq);
void region_fake_quantize_inplace(std::span<float> values, const RegionQuantizer& rq);

/// Picks m0 in [0, m1) minimizing the metric; ties go to the smaller m0.
int compute_m0(const Tensor& calib, int bits, double s0, int m1, const QuantMetric& metric = {});

/// The base-step candidates: 100 evenly spaced values in (0, 1.2 * max|x| / 2^(bits-1)].
std::vector<double> s0_grid(const Tensor& calib, int bits);

struct RegionFit {
    RegionQuantizer quantizer;
    double metric = 0.0;
};

/// Searches the s0 grid with m1 fixed by the statistics and m0 re-searched for
/// each candidate. Returns the best (s0, m0, m1); ties go to the smaller s0.
RegionFit fit_s0(const Tensor& calib, int bits, const GeluStats& stats, const QuantMetric& metric = {});

nlohmann::json to_json(const RegionQuantizer& rq);
RegionQuantizer region_quantizer_from_json(const nlohmann::json& j);

}  // namespace mptq
