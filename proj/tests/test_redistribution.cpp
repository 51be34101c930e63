#include <cmath>

#include "doctest.h"
#include "mptq/error.hpp"
#include "mptq/io.hpp"
#include "mptq/pipeline.hpp"
#include "mptq/redistribution.hpp"
#include "support/instances.hpp"

using namespace mptq;

using testdata::max_rel_error;
using testdata::pair_forward;
using testdata::random_pair;

TEST_CASE("strategy names") {
    for (auto s : {RedistStrategy::None, RedistStrategy::Sq, RedistStrategy::SqB, RedistStrategy::OsupShift,
                   RedistStrategy::OsupSmooth})
        CHECK(parse_redist_strategy(to_string(s)) == s);
    CHECK(parse_redist_strategy("osup") == RedistStrategy::OsupShift);
    CHECK_THROWS_AS(parse_redist_strategy("magic"), InputError);
}

TEST_CASE("sq epsilon example") {
    // channel 0: max|Y| = 4, max|W| = 1 -> eps 2; channel 1: 9 / 1 -> 3
    Tensor y({2, 2}, {4, -9, -1, 2});
    Tensor w({1, 2}, {1, 1});
    auto eps = compute_sq_epsilon(y, w);
    CHECK(eps[0] == doctest::Approx(2.0));
    CHECK(eps[1] == doctest::Approx(3.0));
    // degenerate channels fall back to 1
    auto eps0 = compute_sq_epsilon(Tensor({2, 2}, {0, 1, 0, 1}), Tensor({1, 2}, {1, 0}));
    CHECK(eps0[0] == 1.0f);
    CHECK(eps0[1] == 1.0f);
}

TEST_CASE("fused pair keeps the floating-point output") {
    for (auto strategy : {RedistStrategy::Sq, RedistStrategy::SqB, RedistStrategy::OsupShift, RedistStrategy::OsupSmooth}) {
        CAPTURE(to_string(strategy));
        for (std::uint64_t seed = 0; seed < 25; ++seed) {
            const auto in = random_pair(seed);
            const Tensor y = layer_norm(in.x, in.norm.gamma, in.norm.beta);
            const auto params = compute_redist_params(strategy, y, in.linear.weight, 6);
            const auto fused = fuse(in.norm, in.linear, params);
            CHECK(max_rel_error(pair_forward(in.norm, in.linear, in.x), pair_forward(fused.norm, fused.linear, in.x)) <
                  1e-5);
        }
    }
}

TEST_CASE("sq-b zero-mean property") {
    for (std::uint64_t seed = 0; seed < 10; ++seed) {
        const auto in = random_pair(seed);
        const Tensor y = layer_norm(in.x, in.norm.gamma, in.norm.beta);
        const auto params = compute_redist_params(RedistStrategy::SqB, y, in.linear.weight);
        const auto fused = fuse(in.norm, in.linear, params);
        const Tensor z = layer_norm(in.x, fused.norm.gamma, fused.norm.beta);
        for (std::size_t j = 0; j < z.channels(); ++j) {
            double m = 0;
            for (std::size_t r = 0; r < z.rows(); ++r) m += z[r * z.channels() + j];
            CHECK(std::fabs(m / double(z.rows())) < 1e-5);
        }
    }
}

TEST_CASE("osup-shift centers each channel range") {
    for (std::uint64_t seed = 0; seed < 10; ++seed) {
        const auto in = random_pair(seed);
        const Tensor y = layer_norm(in.x, in.norm.gamma, in.norm.beta);
        const auto params = compute_redist_params(RedistStrategy::OsupShift, y, in.linear.weight);
        const Tensor z = transform_activation(y, params);
        for (std::size_t j = 0; j < z.channels(); ++j) {
            float lo = INFINITY, hi = -INFINITY;
            for (std::size_t r = 0; r < z.rows(); ++r) {
                lo = std::min(lo, z[r * z.channels() + j]);
                hi = std::max(hi, z[r * z.channels() + j]);
            }
            CHECK(std::fabs(hi + lo) <= 1e-5 * std::max(1.0f, hi));
        }
    }
}

TEST_CASE("osup epsilon grid search stays within the grid") {
    const auto in = random_pair(3);
    const Tensor y = layer_norm(in.x, in.norm.gamma, in.norm.beta);
    const auto mu = compute_sqb_mu(y);
    const auto grid = default_t_grid(y, mu);
    CHECK(grid.size() == 20);
    const auto eps = compute_osup_epsilon(y, mu, grid, 6);
    const auto shifted = transform_activation(y, RedistParams{RedistStrategy::SqB, std::vector<float>(12, 1.0f), mu});
    for (std::size_t j = 0; j < 12; ++j) {
        float m = 0;
        for (std::size_t r = 0; r < shifted.rows(); ++r) m = std::max(m, std::fabs(shifted[r * 12 + j]));
        const double t = m / eps[j];
        CHECK(t >= grid.front() * (1 - 1e-5));
        CHECK(t <= grid.back() * (1 + 1e-5));
    }
}

TEST_CASE("none strategy is a bitwise no-op") {
    const auto in = random_pair(5);
    const auto fused = fuse(in.norm, in.linear, RedistParams::identity(12));
    CHECK(fused.norm.gamma == in.norm.gamma);
    CHECK(fused.norm.beta == in.norm.beta);
    CHECK(fused.linear.weight == in.linear.weight);
    CHECK(fused.linear.bias == in.linear.bias);

    ModelConfig c;
    c.depth = 2;
    auto model = make_toy_vit(c, 4);
    const auto before = model_to_container(model);
    const auto x = make_synthetic_tokens(4, 5, c.patch_dim, 1);
    redistribute(model, x, RedistStrategy::None, true, 8);
    CHECK(serialize(model_to_container(model)) == serialize(before));
}

TEST_CASE("redistributed model has the same structure and outputs") {
    ModelConfig c;
    c.depth = 2;
    const auto original = make_toy_vit(c, 8);
    const auto x = make_synthetic_tokens(6, 5, c.patch_dim, 2);
    for (auto s : {RedistStrategy::Sq, RedistStrategy::SqB, RedistStrategy::OsupShift, RedistStrategy::OsupSmooth}) {
        auto model = original;
        const auto params = redistribute(model, x, s, true, 6);
        CHECK(params.size() == redistribution_targets(c, true).size());
        const auto a = model_to_container(original), b = model_to_container(model);
        REQUIRE(a.tensors.size() == b.tensors.size());
        for (const auto& [name, t] : a.tensors) CHECK(b.tensors.at(name).shape == t.shape);
        CHECK(max_rel_error(forward(original, x), forward(model, x)) < 1e-4);
    }
}

TEST_CASE("clamping loss") {
    const QuantSpec spec(4, 1.0);  // positive boundary 7, negative boundary 8
    const std::vector<float> x{9.0f, -10.0f, 3.0f, -8.0f};
    CHECK(clamping_loss(x, spec) == doctest::Approx(4.0 + 4.0));
    const std::vector<float> none{1.0f, -1.0f};
    CHECK(clamping_loss(none, spec) == 0.0);
}

TEST_CASE("params json round trip and validation") {
    RedistParams p{RedistStrategy::SqB, {1.5f, 0.25f}, {0.1f, -3.0f}};
    const auto q = redist_params_from_json(to_json(p));
    CHECK(q.strategy == p.strategy);
    CHECK(q.epsilon == p.epsilon);
    CHECK(q.mu == p.mu);
    CHECK_THROWS(RedistParams{RedistStrategy::Sq, {0.0f, 1.0f}, {0.0f, 0.0f}}.validate(2));
    CHECK_THROWS(p.validate(3));
}
