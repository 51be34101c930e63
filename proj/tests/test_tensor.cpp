#include <cmath>
#include <random>

#include "doctest.h"
#include "mptq/error.hpp"
#include "mptq/io.hpp"
#include "mptq/model.hpp"
#include "mptq/tensor.hpp"

using namespace mptq;

namespace {

Tensor random_tensor(Shape shape, std::uint64_t seed, double stddev = 1.0, double shift = 0.0) {
    std::mt19937_64 rng(seed);
    std::normal_distribution<double> n(shift, stddev);
    Tensor t(std::move(shape));
    for (auto& v : t.data()) v = static_cast<float>(n(rng));
    return t;
}

ModelConfig tiny_config() {
    ModelConfig c;
    c.patch_dim = 12;
    c.embed_dim = 16;
    c.depth = 2;
    c.heads = 2;
    c.mlp_dim = 32;
    c.classes = 5;
    return c;
}

}  // namespace

TEST_CASE("tensor shape must match data") {
    CHECK_THROWS_AS(Tensor({2, 3}, std::vector<float>(5)), DimensionError);
    CHECK_THROWS_AS(Tensor({2, 0}), DimensionError);
    Tensor t({2, 3});
    CHECK(t.size() == 6);
    CHECK(t.rows() == 2);
    CHECK(t.channels() == 3);
}

TEST_CASE("layer_norm examples") {
    const std::vector<float> ones{1, 1}, zeros{0, 0};
    SUBCASE("constant row normalizes to zero") {
        Tensor x({1, 4}, {3, 3, 3, 3});
        auto y = layer_norm(x, std::vector<float>(4, 1.0f), std::vector<float>(4, 0.0f));
        for (float v : y.data()) CHECK(v == 0.0f);
    }
    SUBCASE("[1,3] -> [-1,1]") {
        auto y = layer_norm(Tensor({1, 2}, {1, 3}), ones, zeros, 1e-12f);
        CHECK(y[0] == doctest::Approx(-1.0).epsilon(1e-6));
        CHECK(y[1] == doctest::Approx(1.0).epsilon(1e-6));
    }
    SUBCASE("affine gamma=2 beta=5 -> [3,7]") {
        auto y = layer_norm(Tensor({1, 2}, {1, 3}), std::vector<float>{2, 2}, std::vector<float>{5, 5}, 1e-12f);
        CHECK(y[0] == doctest::Approx(3.0).epsilon(1e-6));
        CHECK(y[1] == doctest::Approx(7.0).epsilon(1e-6));
    }
    SUBCASE("errors") {
        CHECK_THROWS_AS(layer_norm(Tensor({1, 3}), ones, zeros), DimensionError);
        CHECK_THROWS_AS(layer_norm(Tensor({1, 2}), ones, zeros, 0.0f), InputError);
    }
}

TEST_CASE("layer_norm pre-affine statistics") {
    auto x = random_tensor({64, 24}, 7, 3.0, 1.5);
    auto y = layer_norm(x, std::vector<float>(24, 1.0f), std::vector<float>(24, 0.0f));
    for (std::size_t r = 0; r < 64; ++r) {
        double m = 0, v = 0;
        for (std::size_t j = 0; j < 24; ++j) m += y[r * 24 + j];
        m /= 24;
        for (std::size_t j = 0; j < 24; ++j) v += (y[r * 24 + j] - m) * (y[r * 24 + j] - m);
        v /= 24;
        CHECK(std::fabs(m) < 1e-5);
        CHECK(std::fabs(v - 1.0) < 1e-4);
    }
}

TEST_CASE("gelu examples") {
    CHECK(gelu(0.0f) == 0.0f);
    CHECK(std::fabs(gelu(10.0f) - 10.0f) < 1e-6);
    CHECK(gelu(-0.7518f) == doctest::Approx(-0.1700).epsilon(1e-3));
    // The minimum of x * Phi(x) over a fine grid sits at -0.7518.
    float best = 0, arg = 0;
    for (int i = -20000; i <= 0; ++i) {
        const float x = static_cast<float>(i) * 1e-4f;
        if (gelu(x) < best) {
            best = gelu(x);
            arg = x;
        }
    }
    CHECK(arg == doctest::Approx(-0.7518).epsilon(2e-3));
    CHECK(best == doctest::Approx(-0.16997).epsilon(1e-4));
}

TEST_CASE("softmax rows are distributions") {
    auto x = random_tensor({32, 17}, 3, 5.0);
    x[0] = 80.0f;  // large logit must not overflow
    auto y = softmax(x);
    for (std::size_t r = 0; r < 32; ++r) {
        double s = 0;
        for (std::size_t j = 0; j < 17; ++j) {
            const float p = y[r * 17 + j];
            CHECK(p >= 0.0f);
            CHECK(p <= 1.0f);
            s += p;
        }
        CHECK(std::fabs(s - 1.0) < 1e-6);
    }
    CHECK(all_finite(y.data()));
}

TEST_CASE("linear and matmul agree") {
    auto x = random_tensor({5, 7}, 1);
    auto w = random_tensor({3, 7}, 2);
    Tensor wt({7, 3});
    for (std::size_t o = 0; o < 3; ++o)
        for (std::size_t i = 0; i < 7; ++i) wt[i * 3 + o] = w[o * 7 + i];
    auto a = linear(x, w, {});
    auto b = matmul(x, wt);
    for (std::size_t i = 0; i < a.size(); ++i) CHECK(a[i] == doctest::Approx(b[i]).epsilon(1e-6));
    CHECK_THROWS_AS(linear(x, random_tensor({3, 6}, 4), {}), DimensionError);
}

TEST_CASE("site ids round trip") {
    for (bool fq : {false, true})
        for (const auto& s : quantizable_sites(tiny_config(), fq)) CHECK(parse_site(s.id()) == s);
    CHECK_THROWS_AS(parse_site("blocks.0.nope"), LookupError);
    CHECK_THROWS_AS(parse_site("nothing"), LookupError);
    CHECK(quantizable_sites(tiny_config(), true).size() == quantizable_sites(tiny_config(), false).size() + 3 * 2 + 1);
}

TEST_CASE("forward_with_taps") {
    const auto model = make_toy_vit(tiny_config(), 11);
    const auto x = make_synthetic_tokens(3, 6, 12, 5);
    const Tensor plain = forward(model, x);
    CHECK(plain.shape() == Shape{3, 5});

    SUBCASE("empty tap spec") {
        auto r = forward_with_taps(model, x, {});
        CHECK(r.taps.empty());
        CHECK(r.logits == plain);
    }
    SUBCASE("fc1 input of block 0") {
        auto r = forward_with_taps(model, x, {"blocks.0.fc1.in"});
        CHECK(r.taps.at("blocks.0.fc1.in").shape() == Shape{3, 6, 16});
    }
    SUBCASE("tapping every site leaves logits bitwise unchanged") {
        std::vector<std::string> ids;
        for (const auto& s : quantizable_sites(model.config, true)) ids.push_back(s.id());
        auto r = forward_with_taps(model, x, ids);
        CHECK(r.logits == plain);
        CHECK(r.taps.size() == ids.size());
        CHECK(r.taps.at("blocks.1.qkv.w") == model.blocks[1].qkv.weight);
        CHECK(r.taps.at("blocks.1.attn.probs").shape() == Shape{3, 2, 6, 6});
    }
    SUBCASE("unknown site") {
        CHECK_THROWS_AS(forward_with_taps(model, x, {"blocks.9.fc1.in"}), LookupError);
        CHECK_THROWS_AS(forward_with_taps(model, x, {"bogus"}), LookupError);
    }
}

TEST_CASE("forward is deterministic for a seed") {
    const auto a = make_toy_vit(tiny_config(), 42);
    const auto b = make_toy_vit(tiny_config(), 42);
    const auto x = make_synthetic_tokens(2, 4, 12, 9);
    CHECK(forward(a, x) == forward(b, x));
    CHECK(all_finite(forward(a, x).data()));
    CHECK_FALSE(forward(make_toy_vit(tiny_config(), 43), x) == forward(a, x));
}

TEST_CASE("forward rejects wrong input shape") {
    const auto m = make_toy_vit(tiny_config(), 1);
    CHECK_THROWS_AS(forward(m, Tensor({1, 4, 11})), DimensionError);
}
