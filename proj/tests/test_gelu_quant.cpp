#include <cmath>
#include <random>

#include "doctest.h"
#include "mptq/error.hpp"
#include "mptq/gelu_quant.hpp"
#include "mptq/quant.hpp"
#include "support/oracles.hpp"

using namespace mptq;

namespace {

Tensor as_tensor(const std::vector<float>& v) { return Tensor({v.size()}, v); }

std::vector<RegionCode> all_codes(const RegionQuantizer& rq) {
    std::vector<RegionCode> out;
    for (std::uint32_t m = 0; m <= rq.negative_max(); ++m) out.push_back({Region::Negative, m});
    for (std::uint32_t m = 0; m <= rq.small_max(); ++m) out.push_back({Region::SmallPositive, m});
    for (std::uint32_t m = 0; m <= rq.large_max(); ++m) out.push_back({Region::LargePositive, m});
    return out;
}

}  // namespace

TEST_CASE("m1 from the worked statistics") {
    CHECK(compute_m1({-0.1700, 12.4909}, 6) == 5);
    CHECK(compute_m1({-0.1700, 12.4909}, 4) == 5);
    CHECK(compute_m1({-0.1700, 3.1}, 6) == 3);
    CHECK(compute_m1({-0.17, 1e9}, 6) == 8);  // clamped to bits + 2
    CHECK(compute_m1({-0.17, 1e-6}, 6) == 1);
    CHECK_THROWS_AS(compute_m1({0.0, 1.0}, 6), FitError);
    CHECK_THROWS_AS(compute_m1({-1.0, 0.0}, 6), FitError);
}

TEST_CASE("derived scales and worked encodings at 6 bits") {
    const RegionQuantizer rq(6, 0.0515, 3, 5);
    CHECK(rq.s1() == doctest::Approx(0.4120).epsilon(1e-9));
    CHECK(rq.s2() == doctest::Approx(1.6480).epsilon(1e-9));
    CHECK(rq.region_boundary() == 64);
    CHECK(rq.small_max() == 15);
    CHECK(rq.large_max() == 31);

    CHECK(wide_code(-0.309, rq) == -6);
    CHECK(region_encode(-0.309, rq) == RegionCode{Region::Negative, 6});
    CHECK(pack_bits({Region::Negative, 6}, rq) == 0b010110u);

    // 0.5 -> x_q = 10 -> (10 + 4) >> 3 = 1
    CHECK(region_encode(0.5, rq) == RegionCode{Region::SmallPositive, 1});
    CHECK(pack_bits({Region::SmallPositive, 1}, rq) == 0b000001u);

    // 11.0 -> x_q = 214 -> (214 + 16) >> 5 = 7
    CHECK(wide_code(11.0, rq) == 214);
    const auto c = region_encode(11.0, rq);
    CHECK(c == RegionCode{Region::LargePositive, 7});
    CHECK(pack_bits(c, rq) == 0b100111u);
    CHECK(region_decode(c, rq) == doctest::Approx(7 * rq.s2()));
    CHECK(region_decode(c, rq) == doctest::Approx(11.536).epsilon(1e-4));
}

TEST_CASE("quantizer parameter validation") {
    CHECK_THROWS_AS(RegionQuantizer(3, 0.1, 0, 1), InputError);
    CHECK_THROWS_AS(RegionQuantizer(9, 0.1, 0, 1), InputError);
    CHECK_THROWS_AS(RegionQuantizer(6, 0.0, 0, 1), InputError);
    CHECK_THROWS_AS(RegionQuantizer(6, 0.1, 2, 2), InputError);
    CHECK_THROWS_AS(RegionQuantizer(6, 0.1, 0, 9), InputError);
    const RegionQuantizer rq(6, 0.1, 1, 3);
    CHECK(region_quantizer_from_json(to_json(rq)) == rq);
}

TEST_CASE("exhaustive pack/unpack round trip") {
    for (int bits : {4, 5, 6, 7, 8}) {
        const RegionQuantizer rq(bits, 0.05, 1, 3);
        const auto codes = all_codes(rq);
        // Negative and small-positive fields hold 2^(bits-2) values each, large 2^(bits-1).
        CHECK(codes.size() == (std::size_t{1} << bits));
        std::vector<bool> seen(std::size_t{1} << bits, false);
        for (const auto& code : codes) {
            const auto p = pack_bits(code, rq);
            REQUIRE(p < (1u << bits));
            CHECK_FALSE(seen[p]);
            seen[p] = true;
            CHECK(unpack_bits(p, rq) == code);
        }
        for (std::uint32_t p = 0; p < (1u << bits); ++p) CHECK(pack_bits(unpack_bits(p, rq), rq) == p);
        CHECK_THROWS_AS(unpack_bits(1u << bits, rq), EncodingError);
        CHECK_THROWS_AS(pack_bits({Region::LargePositive, rq.large_max() + 1}, rq), EncodingError);
        CHECK_THROWS_AS(pack_bits({Region::Negative, rq.negative_max() + 1}, rq), EncodingError);
    }
}

TEST_CASE("packed streams") {
    const RegionQuantizer rq(6, 0.0515, 3, 5);
    const std::vector<RegionCode> codes{{Region::Negative, 6}, {Region::SmallPositive, 1}, {Region::LargePositive, 7}};
    const auto bytes = pack_stream(codes, rq);
    // 010110 000001 100111 + 000000 padding
    CHECK(bytes == std::vector<std::uint8_t>{0b01011000, 0b00011001, 0b11000000});
    CHECK(unpack_stream(bytes, codes.size(), rq) == codes);
    CHECK_THROWS_AS(unpack_stream(bytes, 5, rq), EncodingError);
}

TEST_CASE("region coverage, ordering and error bound across boundaries") {
    for (int bits : {4, 6, 8})
        for (int m0 = 0; m0 < 3; ++m0) {
            const RegionQuantizer rq(bits, 0.05, m0, m0 + 2);
            const double boundary = rq.s0 * static_cast<double>(rq.region_boundary());
            const double lo = -rq.s0 * rq.negative_max();
            const double hi = rq.s2() * rq.large_max();
            double prev = -INFINITY;
            for (int i = 0; i <= 10000; ++i) {
                const double x = lo + (hi - lo) * i / 10000.0;
                const auto c = region_encode(x, rq);
                const double y = region_decode(c, rq);
                CHECK(y >= prev);
                prev = y;
                const double wq = static_cast<double>(wide_code(x, rq));
                if (wq < 0) CHECK(c.region == Region::Negative);
                else if (wq < static_cast<double>(rq.region_boundary())) CHECK(c.region == Region::SmallPositive);
                else CHECK(c.region == Region::LargePositive);
                if (x >= lo && x < boundary) CHECK(std::fabs(y - x) <= rq.scale_of(c.region) / 2 + rq.s0 / 2 + 1e-12);
                if (x >= boundary && x <= hi) CHECK(std::fabs(y - x) <= rq.s2() / 2 + rq.s0 / 2 + 1e-12);
            }
            // fine sweep straddling both boundaries
            prev = -INFINITY;
            for (int i = -5000; i <= 5000; ++i) {
                const double x = boundary + boundary * i / 5000.0;
                const double y = region_decode(region_encode(x, rq), rq);
                CHECK(y >= prev);
                prev = y;
            }
        }
}

TEST_CASE("percentile uses linear interpolation") {
    CHECK(percentile({1, 2, 3, 4}, 50) == doctest::Approx(2.5));
    CHECK(percentile({5, 1, 3}, 0) == 1.0);
    CHECK(percentile({5, 1, 3}, 100) == 5.0);
    CHECK(percentile({0, 10}, 99.95) == doctest::Approx(9.995));
}

TEST_CASE("calibration statistics") {
    std::vector<Tensor> samples{as_tensor({-0.1f, 1.0f, 2.0f}), as_tensor({-0.2f, 0.5f, 3.0f})};
    const auto stats = collect_gelu_stats(samples);
    CHECK(stats.x_low == doctest::Approx(-0.15));
    CHECK(stats.x_up == doctest::Approx(percentile({-0.1f, 1.0f, 2.0f, -0.2f, 0.5f, 3.0f}, 99.95)));
    std::vector<Tensor> negative{as_tensor({-0.1f, -0.2f})};
    CHECK_THROWS_AS(collect_gelu_stats(negative), FitError);
}

TEST_CASE("m1 adapts to a tenfold change in range") {
    for (std::uint64_t seed = 0; seed < 5; ++seed) {
        const auto base = oracle::heavy_tailed_gelu(4000, seed);
        auto wide = base;
        for (auto& v : wide)
            if (v > 0) v *= 10.0f;
        const std::vector<Tensor> a{as_tensor(base)}, b{as_tensor(wide)};
        const int m1a = compute_m1(collect_gelu_stats(a), 6);
        const int m1b = compute_m1(collect_gelu_stats(b), 6);
        CHECK(m1b - m1a >= 3);
    }
}

TEST_CASE("fit_s0 picks the grid optimum") {
    const auto values = oracle::heavy_tailed_gelu(3000, 17);
    const Tensor calib = as_tensor(values);
    const std::vector<Tensor> batch{calib};
    const auto stats = collect_gelu_stats(batch);
    for (int bits : {4, 6}) {
        const auto fit = fit_s0(calib, bits, stats);
        CHECK(fit.quantizer.m1 == compute_m1(stats, bits));
        const auto grid = s0_grid(calib, bits);
        CHECK(grid.size() == 100);
        CHECK(grid.back() == doctest::Approx(1.2 * max_abs(calib.data()) / std::ldexp(1.0, bits - 1)));
        // brute force over every (s0, m0) candidate
        double best = INFINITY;
        for (double s0 : grid)
            for (int m0 = 0; m0 < fit.quantizer.m1; ++m0) {
                const auto q = region_fake_quantize(calib, RegionQuantizer(bits, s0, m0, fit.quantizer.m1));
                best = std::min(best, mse_metric(calib.data(), q.data()));
            }
        CHECK(fit.metric == doctest::Approx(best).epsilon(1e-12));
        CHECK(compute_m0(calib, bits, fit.quantizer.s0, fit.quantizer.m1) == fit.quantizer.m0);
    }
}

TEST_CASE("injectable metric") {
    const Tensor calib = as_tensor(oracle::heavy_tailed_gelu(2000, 5));
    const QuantMetric flat = [](std::span<const float>, std::span<const float>) { return 1.0; };
    CHECK(compute_m0(calib, 6, 0.05, 4, flat) == 0);  // ties go to the smaller m0
    const auto fit = fit_s0(calib, 6, {-0.17, 3.0}, flat);
    CHECK(fit.quantizer.s0 == s0_grid(calib, 6).front());
    // The largest-value error metric rewards steps that represent the tail exactly.
    const QuantMetric tail = [](std::span<const float> r, std::span<const float> q) {
        double worst = 0;
        for (std::size_t i = 0; i < r.size(); ++i)
            if (r[i] > 2.0f) worst = std::max(worst, std::fabs(double(r[i]) - q[i]));
        return worst;
    };
    const auto tail_fit = fit_s0(calib, 6, {-0.17, 3.0}, tail);
    const auto mse_fit = fit_s0(calib, 6, {-0.17, 3.0});
    const auto q = region_fake_quantize(calib, tail_fit.quantizer);
    CHECK(tail(calib.data(), q.data()) <= tail(calib.data(), region_fake_quantize(calib, mse_fit.quantizer).data()));
}

TEST_CASE("opt-m beats uniform on heavy-tailed post-GeLU data at 4 bits") {
    for (std::uint64_t seed = 0; seed < 5; ++seed) {
        const Tensor calib = as_tensor(oracle::heavy_tailed_gelu(4000, 100 + seed));
        const std::vector<Tensor> batch{calib};
        const auto fit = fit_s0(calib, 4, collect_gelu_stats(batch));
        const double uni = mse(calib.data(), fake_quantize(calib, minmax_scale(calib, 4)).data());
        CHECK(fit.metric <= uni);
    }
}

TEST_CASE("default metric agrees with the explicit squared error") {
    for (std::uint64_t seed = 0; seed < 4; ++seed) {
        const Tensor calib = as_tensor(oracle::heavy_tailed_gelu(3000, 40 + seed));
        const std::vector<Tensor> batch{calib};
        const auto stats = collect_gelu_stats(batch);
        for (int bits : {4, 6, 8}) {
            const auto fast = fit_s0(calib, bits, stats);
            const auto slow = fit_s0(calib, bits, stats, mse_metric);
            CHECK(fast.quantizer == slow.quantizer);
            CHECK(fast.metric == doctest::Approx(slow.metric).epsilon(1e-9));
        }
    }
}
