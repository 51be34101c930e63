#include "mptq/gelu_quant.hpp"

#include <algorithm>
#include <cmath>
#include <limits>

#include "mptq/error.hpp"
#include "mptq/parallel.hpp"
#include "mptq/quant.hpp"

namespace mptq {

namespace {

constexpr int kRegionMaxBits = 8;

std::int64_t round_shift(std::int64_t v, int m) {
    if (m == 0) return v;
    return (v + (std::int64_t{1} << (m - 1))) >> m;
}

}  // namespace

const char* to_string(Region r) {
    switch (r) {
        case Region::Negative:
            return "neg";
        case Region::SmallPositive:
            return "small-pos";
        case Region::LargePositive:
            return "large-pos";
    }
    return "?";
}

RegionQuantizer::RegionQuantizer(int b, double s, int lo, int hi) : bits(b), s0(s), m0(lo), m1(hi) {
    if (b < kRegionMinBits || b > kRegionMaxBits)
        throw InputError("region quantizer bit-width " + std::to_string(b) + " outside [4, 8]");
    if (!(s > 0.0) || !std::isfinite(s)) throw InputError("region quantizer base step must be positive");
    if (lo < 0 || hi <= lo) throw InputError("region quantizer needs 0 <= m0 < m1");
    if (hi > b + 2) throw InputError("m1 exceeds bits + 2");
}

double RegionQuantizer::scale_of(Region r) const {
    switch (r) {
        case Region::Negative:
            return s0;
        case Region::SmallPositive:
            return s1();
        case Region::LargePositive:
            return s2();
    }
    return s0;
}

double mse_metric(std::span<const float> reference, std::span<const float> quantized) {
    return mse(reference, quantized);
}

double percentile(std::vector<float> values, double pct) {
    if (values.empty()) throw InputError("percentile of an empty set");
    std::sort(values.begin(), values.end());
    const double pos = std::clamp(pct, 0.0, 100.0) / 100.0 * static_cast<double>(values.size() - 1);
    const auto lo = static_cast<std::size_t>(std::floor(pos));
    const std::size_t hi = std::min(lo + 1, values.size() - 1);
    const double frac = pos - static_cast<double>(lo);
    return values[lo] + frac * (static_cast<double>(values[hi]) - values[lo]);
}

GeluStats collect_gelu_stats(std::span<const Tensor> samples) {
    if (samples.empty()) throw InputError("collect_gelu_stats needs at least one sample");
    double min_sum = 0.0;
    std::vector<float> pooled;
    for (const auto& s : samples) {
        if (s.empty()) throw InputError("empty calibration sample");
        if (!all_finite(s.data())) throw InputError("non-finite calibration value");
        min_sum += *std::min_element(s.data().begin(), s.data().end());
        pooled.insert(pooled.end(), s.data().begin(), s.data().end());
    }
    GeluStats stats;
    stats.x_low = min_sum / static_cast<double>(samples.size());
    stats.x_up = percentile(std::move(pooled), kGeluUpperPercentile);
    if (!(stats.x_up > 0.0)) throw FitError("post-GeLU calibration data has no positive range");
    return stats;
}

int compute_m1(const GeluStats& stats, int bits) {
    if (!(stats.x_low < 0.0) || !(stats.x_up > 0.0))
        throw FitError("degenerate post-GeLU statistics: need x_low < 0 < x_up");
    const double r3 = std::ldexp(1.0, bits - 1) - 1.0;
    const double r1 = std::ldexp(1.0, bits - 2) - 1.0;
    const double ratio = (stats.x_up / r3) / (stats.x_low / -r1);
    const double m = std::round(std::log2(ratio));
    return static_cast<int>(std::clamp(m, 1.0, static_cast<double>(bits + 2)));
}

std::int64_t wide_code(double x, const RegionQuantizer& rq) {
    const double hi = std::ldexp(1.0, rq.bits + rq.m1 - 1);
    return static_cast<std::int64_t>(std::clamp(std::round(x / rq.s0), -hi, hi - 1.0));
}

namespace {

RegionCode encode_wide(std::int64_t q, const RegionQuantizer& rq) {
    if (q < 0) return {Region::Negative, static_cast<std::uint32_t>(std::min<std::int64_t>(-q, rq.negative_max()))};
    if (q < rq.region_boundary())
        return {Region::SmallPositive,
                static_cast<std::uint32_t>(std::min<std::int64_t>(round_shift(q, rq.m0), rq.small_max()))};
    // The large region never collapses to zero: zero already has a code in the
    // small region and dropping to it would break ordering across the boundary.
    const std::int64_t mag = std::clamp<std::int64_t>(round_shift(q, rq.m1), 1, rq.large_max());
    return {Region::LargePositive, static_cast<std::uint32_t>(mag)};
}

}  // namespace

RegionCode region_encode(double x, const RegionQuantizer& rq) {
    if (!std::isfinite(x)) throw InputError("cannot encode a non-finite value");
    return encode_wide(wide_code(x, rq), rq);
}

double region_decode(const RegionCode& code, const RegionQuantizer& rq) {
    const double m = code.magnitude;
    switch (code.region) {
        case Region::Negative:
            return -m * rq.s0;
        case Region::SmallPositive:
            return m * rq.s1();
        case Region::LargePositive:
            return m * rq.s2();
    }
    return 0.0;
}

std::uint32_t pack_bits(const RegionCode& code, const RegionQuantizer& rq) {
    const int b = rq.bits;
    switch (code.region) {
        case Region::Negative:
            if (code.magnitude > rq.negative_max()) throw EncodingError("negative magnitude overflows its field");
            return (1u << (b - 2)) | code.magnitude;
        case Region::SmallPositive:
            if (code.magnitude > rq.small_max()) throw EncodingError("small-positive magnitude overflows its field");
            return code.magnitude;
        case Region::LargePositive:
            if (code.magnitude > rq.large_max()) throw EncodingError("large-positive magnitude overflows its field");
            return (1u << (b - 1)) | code.magnitude;
    }
    throw EncodingError("invalid region");
}

RegionCode unpack_bits(std::uint32_t pattern, const RegionQuantizer& rq) {
    const int b = rq.bits;
    if (pattern >> b) throw EncodingError("pattern wider than the quantizer bit-width");
    if (pattern & (1u << (b - 1))) return {Region::LargePositive, pattern & rq.large_max()};
    if (pattern & (1u << (b - 2))) return {Region::Negative, pattern & rq.negative_max()};
    return {Region::SmallPositive, pattern & rq.small_max()};
}

std::vector<std::uint8_t> pack_stream(std::span<const RegionCode> codes, const RegionQuantizer& rq) {
    const std::size_t total = codes.size() * static_cast<std::size_t>(rq.bits);
    std::vector<std::uint8_t> out((total + 7) / 8, 0);
    std::size_t pos = 0;
    for (const auto& c : codes) {
        const std::uint32_t p = pack_bits(c, rq);
        for (int i = rq.bits - 1; i >= 0; --i, ++pos)
            if ((p >> i) & 1u) out[pos / 8] |= static_cast<std::uint8_t>(0x80u >> (pos % 8));
    }
    return out;
}

std::vector<RegionCode> unpack_stream(std::span<const std::uint8_t> bytes, std::size_t count,
                                      const RegionQuantizer& rq) {
    if (bytes.size() * 8 < count * static_cast<std::size_t>(rq.bits))
        throw EncodingError("packed stream is too short");
    std::vector<RegionCode> out;
    out.reserve(count);
    std::size_t pos = 0;
    for (std::size_t k = 0; k < count; ++k) {
        std::uint32_t p = 0;
        for (int i = 0; i < rq.bits; ++i, ++pos) p = (p << 1) | ((bytes[pos / 8] >> (7 - pos % 8)) & 1u);
        out.push_back(unpack_bits(p, rq));
    }
    return out;
}

void region_fake_quantize_inplace(std::span<float> values, const RegionQuantizer& rq) {
    for (auto& v : values) v = static_cast<float>(region_decode(region_encode(v, rq), rq));
}

Tensor region_fake_quantize(const Tensor& x, const RegionQuantizer& rq) {
    Tensor y = x;
    region_fake_quantize_inplace(y.data(), rq);
    return y;
}

namespace {

struct M0Search {
    int m0 = 0;
    double metric = std::numeric_limits<double>::infinity();
};

// Calibration values grouped by wide code. Within a bin every value decodes
// to the same number, so the squared error of a bin follows from the count and
// the first two moments of the residual x - q * s0. Only occupied codes are kept.
struct CodeBins {
    std::vector<std::int64_t> code;
    std::vector<double> count, sum, sum_sq;
};

// `sorted` must be in ascending order. Codes are monotone in the value, so
// each bin is a contiguous run located by exponential search.
CodeBins bin_codes(std::span<const float> sorted, const RegionQuantizer& rq) {
    const double limit = std::ldexp(1.0, rq.bits + rq.m1 - 1);
    // same rounding and saturation as wide_code
    auto code = [&](float v) {
        return static_cast<std::int64_t>(std::clamp(std::round(v / rq.s0), -limit, limit - 1.0));
    };
    CodeBins b;
    const std::size_t n = sorted.size();
    std::size_t i = 0;
    while (i < n) {
        const std::int64_t q = code(sorted[i]);
        std::size_t step = 1;
        while (i + step < n && code(sorted[i + step]) == q) step *= 2;
        const auto run_end = std::partition_point(sorted.begin() + static_cast<std::ptrdiff_t>(i + step / 2),
                                                  sorted.begin() + static_cast<std::ptrdiff_t>(std::min(i + step, n)),
                                                  [&](float v) { return code(v) == q; });
        const auto end = static_cast<std::size_t>(run_end - sorted.begin());
        const double center = static_cast<double>(q) * rq.s0;
        double sum = 0.0, sum_sq = 0.0;
        for (std::size_t k = i; k < end; ++k) {
            const double r = static_cast<double>(sorted[k]) - center;
            sum += r;
            sum_sq += r * r;
        }
        b.code.push_back(q);
        b.count.push_back(static_cast<double>(end - i));
        b.sum.push_back(sum);
        b.sum_sq.push_back(sum_sq);
        i = end;
    }
    return b;
}

double binned_mse(const CodeBins& b, const RegionQuantizer& rq, std::size_t total) {
    double err = 0.0;
    for (std::size_t k = 0; k < b.code.size(); ++k) {
        const std::int64_t q = b.code[k];
        const double decoded = static_cast<float>(region_decode(encode_wide(q, rq), rq));
        const double delta = static_cast<double>(q) * rq.s0 - decoded;
        err += b.sum_sq[k] + 2.0 * delta * b.sum[k] + b.count[k] * delta * delta;
    }
    return err / static_cast<double>(total);
}

std::vector<float> sorted_copy(const Tensor& calib) {
    std::vector<float> v(calib.data().begin(), calib.data().end());
    std::sort(v.begin(), v.end());
    return v;
}

// `sorted` is only read when the metric is empty.
M0Search search_m0(const Tensor& calib, std::span<const float> sorted, int bits, double s0, int m1,
                   const QuantMetric& metric) {
    M0Search best;
    if (!metric) {
        // The wide code does not depend on m0, so one binning serves every candidate.
        const CodeBins bins = bin_codes(sorted, RegionQuantizer(bits, s0, 0, m1));
        for (int m = 0; m < m1; ++m) {
            const double v = binned_mse(bins, RegionQuantizer(bits, s0, m, m1), calib.size());
            if (v < best.metric) best = {m, v};
        }
        return best;
    }
    std::vector<float> buf(calib.size());
    for (int m = 0; m < m1; ++m) {
        const RegionQuantizer rq(bits, s0, m, m1);
        std::copy(calib.data().begin(), calib.data().end(), buf.begin());
        region_fake_quantize_inplace(buf, rq);
        const double v = metric(calib.data(), buf);
        if (v < best.metric) best = {m, v};
    }
    return best;
}

}  // namespace

int compute_m0(const Tensor& calib, int bits, double s0, int m1, const QuantMetric& metric) {
    if (m1 < 1) throw FitError("m1 must be at least 1");
    if (calib.empty()) throw InputError("empty calibration tensor");
    const auto sorted = metric ? std::vector<float>{} : sorted_copy(calib);
    return search_m0(calib, sorted, bits, s0, m1, metric).m0;
}

std::vector<double> s0_grid(const Tensor& calib, int bits) {
    if (calib.empty()) throw InputError("empty calibration tensor");
    const double top = kS0GridSpan * max_abs(calib.data()) / std::ldexp(1.0, bits - 1);
    if (!(top > 0.0)) throw FitError("calibration tensor is all zeros");
    std::vector<double> grid(kS0GridSize);
    for (std::size_t k = 0; k < kS0GridSize; ++k)
        grid[k] = top * static_cast<double>(k + 1) / static_cast<double>(kS0GridSize);
    return grid;
}

RegionFit fit_s0(const Tensor& calib, int bits, const GeluStats& stats, const QuantMetric& metric) {
    if (calib.empty()) throw InputError("empty calibration tensor");
    const int m1 = compute_m1(stats, bits);
    const auto grid = s0_grid(calib, bits);
    std::vector<M0Search> results(grid.size());
    const auto sorted = metric ? std::vector<float>{} : sorted_copy(calib);
    parallel_for(grid.size(),
                 [&](std::size_t k) { results[k] = search_m0(calib, sorted, bits, grid[k], m1, metric); });
    std::size_t best = 0;
    for (std::size_t k = 1; k < results.size(); ++k)
        if (results[k].metric < results[best].metric) best = k;
    return RegionFit{RegionQuantizer(bits, grid[best], results[best].m0, m1), results[best].metric};
}

nlohmann::json to_json(const RegionQuantizer& rq) {
    return nlohmann::json{{"bits", rq.bits}, {"s0", rq.s0}, {"m0", rq.m0}, {"m1", rq.m1}};
}

RegionQuantizer region_quantizer_from_json(const nlohmann::json& j) {
    return RegionQuantizer(j.at("bits").get<int>(), j.at("s0").get<double>(), j.at("m0").get<int>(),
                           j.at("m1").get<int>());
}

}  // namespace mptq
