#include <cmath>
#include <random>

#include "doctest.h"
#include "mptq/allocation.hpp"
#include "mptq/error.hpp"
#include "support/oracles.hpp"

using namespace mptq;

namespace {

struct Table {
    std::vector<std::vector<double>> sqnr;  // [entry][bits]
    std::vector<std::size_t> numel;
};

// SQNR grows roughly 6 dB per bit with a per-entry offset, as for uniform quantizers.
Table random_table(std::size_t n, std::mt19937_64& rng) {
    std::uniform_real_distribution<double> offset(-5.0, 15.0), slope(4.0, 7.0), jitter(0.0, 0.5);
    std::uniform_int_distribution<std::size_t> size(1, 100000);
    Table t;
    for (std::size_t i = 0; i < n; ++i) {
        std::vector<double> row(9);
        const double o = offset(rng), k = slope(rng);
        for (int b = 0; b <= 8; ++b) row[static_cast<std::size_t>(b)] = o + k * b + jitter(rng);
        t.sqnr.push_back(row);
        t.numel.push_back(size(rng));
    }
    return t;
}

AllocationState weight_state(const Table& t, double target, MetricMode mode) {
    AllocationState s;
    for (std::size_t i = 0; i < t.numel.size(); ++i)
        s.entries.push_back(LayerEntry{"w" + std::to_string(i), EntryKind::Weight, t.numel[i]});
    s.targets.weight_bits = target;
    s.options.mode = mode;
    return s;
}

SqnrProvider table_provider(const Table& t) {
    return [&t](const AllocationState&, std::size_t i, int bits) { return t.sqnr[i][static_cast<std::size_t>(bits)]; };
}

}  // namespace

TEST_CASE("selection score") {
    CHECK(selection_score(30.0, 1000, MetricMode::SqnrTimesLogNumel) == doctest::Approx(90.0));
    CHECK(selection_score(30.0, 1000, MetricMode::SqnrOnly) == 30.0);
    CHECK(selection_score(30.0, 1, MetricMode::SqnrTimesLogNumel) == 0.0);
}

TEST_CASE("greedy trace equals the exhaustive simulator") {
    std::mt19937_64 rng(2024);
    for (int instance = 0; instance < 200; ++instance) {
        const std::size_t n = 1 + static_cast<std::size_t>(instance % 4);
        const int steps = 1 + (instance / 4) % 4;
        const auto mode = instance % 2 ? MetricMode::SqnrOnly : MetricMode::SqnrTimesLogNumel;
        const Table t = random_table(n, rng);
        const double target = 8.0 - static_cast<double>(steps) / static_cast<double>(n);
        const auto out = greedy_allocate(weight_state(t, target, mode), table_provider(t));
        const auto ref = oracle::simulate_greedy(t.sqnr, t.numel, target, kBitFloor, mode == MetricMode::SqnrOnly);
        REQUIRE(out.trace.size() == ref.size());
        for (std::size_t k = 0; k < ref.size(); ++k) {
            CHECK(out.trace[k].id == "w" + std::to_string(ref[k].entry));
            CHECK(out.trace[k].new_bits == ref[k].new_bits);
            CHECK(out.trace[k].alpha == ref[k].alpha);
        }
        const double mean = mean_bits(out, EntryKind::Weight);
        CHECK(mean <= target + 1e-12);
        CHECK(mean > target - 1.0 / static_cast<double>(n));
    }
}

TEST_CASE("ties go to the lower index") {
    Table t;
    std::vector<double> row(9);
    for (int b = 0; b <= 8; ++b) row[static_cast<std::size_t>(b)] = 6.0 * b;
    t.sqnr.assign(3, row);
    t.numel = {50, 50, 50};
    const auto out = greedy_allocate(weight_state(t, 7.0, MetricMode::SqnrTimesLogNumel), table_provider(t));
    REQUIRE(out.trace.size() == 3);
    CHECK(out.trace[0].id == "w0");
    CHECK(out.trace[1].id == "w1");
    CHECK(out.trace[2].id == "w2");
}

TEST_CASE("only the decremented entry is rescored") {
    std::mt19937_64 rng(1);
    const Table t = random_table(4, rng);
    std::vector<std::size_t> calls;
    const SqnrProvider counting = [&](const AllocationState&, std::size_t i, int bits) {
        calls.push_back(i);
        return t.sqnr[i][static_cast<std::size_t>(bits)];
    };
    const auto out = greedy_allocate(weight_state(t, 6.0, MetricMode::SqnrTimesLogNumel), counting);
    REQUIRE(calls.size() == 4 + out.trace.size());
    for (std::size_t k = 0; k < out.trace.size(); ++k)
        CHECK("w" + std::to_string(calls[4 + k]) == out.trace[k].id);
}

TEST_CASE("every step picks the maximal eligible alpha") {
    std::mt19937_64 rng(77);
    const Table t = random_table(6, rng);
    const auto out = greedy_allocate(weight_state(t, 4.5, MetricMode::SqnrTimesLogNumel), table_provider(t));
    // Replay the trace independently and check the argmax at every step.
    std::vector<int> bits(6, 8);
    for (const auto& step : out.trace) {
        double best = -INFINITY;
        for (std::size_t i = 0; i < 6; ++i)
            if (bits[i] > kBitFloor)
                best = std::max(best, selection_score(t.sqnr[i][static_cast<std::size_t>(bits[i] - 1)], t.numel[i],
                                                      MetricMode::SqnrTimesLogNumel));
        CHECK(step.alpha == best);
        const auto idx = static_cast<std::size_t>(std::stoi(step.id.substr(1)));
        bits[idx] -= 1;
        CHECK(step.new_bits == bits[idx]);
    }
}

TEST_CASE("weights and activations are allocated in separate phases") {
    std::mt19937_64 rng(5);
    const Table t = random_table(6, rng);
    AllocationState s;
    for (std::size_t i = 0; i < 6; ++i)
        s.entries.push_back(LayerEntry{"e" + std::to_string(i), i < 3 ? EntryKind::Weight : EntryKind::Activation,
                                       t.numel[i]});
    s.targets = {6.0, 5.0};
    for (bool act_first : {false, true}) {
        s.options.activations_first = act_first;
        const auto out = greedy_allocate(s, table_provider(t));
        CHECK(mean_bits(out, EntryKind::Weight) == doctest::Approx(6.0));
        CHECK(mean_bits(out, EntryKind::Activation) == doctest::Approx(5.0));
        CHECK(out.trace.size() == 6 + 9);
        const auto first = act_first ? EntryKind::Activation : EntryKind::Weight;
        const std::size_t first_len = act_first ? 9 : 6;
        for (std::size_t k = 0; k < out.trace.size(); ++k) CHECK((out.trace[k].kind == first) == (k < first_len));
    }
}

TEST_CASE("element-weighted mean") {
    AllocationState s;
    s.entries = {{"big", EntryKind::Weight, 1000}, {"small", EntryKind::Weight, 10}};
    s.options.element_weighted = true;
    s.targets.weight_bits = 7.5;
    const SqnrProvider same = [](const AllocationState&, std::size_t, int b) { return 6.0 * b; };
    const auto out = greedy_allocate(s, same);
    CHECK(out.entries[0].bits == 7);  // the small entry alone cannot move the weighted mean
    CHECK(mean_bits(out, EntryKind::Weight) <= 7.5);
}

TEST_CASE("floors") {
    AllocationState s;
    s.entries = {{"a", EntryKind::Weight, 10}, {"b", EntryKind::Weight, 10, 8, 4}};
    const SqnrProvider p = [](const AllocationState&, std::size_t, int b) { return 6.0 * b; };
    SUBCASE("entries at their floor leave the pool") {
        s.targets.weight_bits = 3.0;
        const auto out = greedy_allocate(s, p);
        CHECK(out.entries[0].bits == 2);
        CHECK(out.entries[1].bits == 4);
        CHECK(out.scores[0] == -INFINITY);
        CHECK(out.scores[1] == -INFINITY);
    }
    SUBCASE("unreachable target") {
        s.targets.weight_bits = 2.5;
        CHECK_THROWS_AS(greedy_allocate(s, p), AllocationError);
    }
    SUBCASE("target of 8 needs no steps") {
        s.targets.weight_bits = 8.0;
        CHECK(greedy_allocate(s, p).trace.empty());
    }
}

TEST_CASE("plan json round trip") {
    std::mt19937_64 rng(3);
    const Table t = random_table(4, rng);
    auto out = greedy_allocate(weight_state(t, 5.0, MetricMode::SqnrOnly), table_provider(t));
    out.trace.push_back(TraceStep{out.trace.size(), "w0", EntryKind::Weight, 2, -INFINITY});
    const auto j = plan_to_json(out);
    CHECK(j.at("trace").back().at("alpha") == "-inf");
    const auto back = plan_from_json(j);
    CHECK(back.trace == out.trace);
    CHECK(plan_to_json(back).dump() == j.dump());
    CHECK_THROWS_AS(plan_from_json(nlohmann::json{{"layers", 3}}), InputError);
}

TEST_CASE("sqnr_at") {
    Tensor x({4}, {1.0f, -2.0f, 0.5f, 3.0f});
    CHECK(sqnr_at(x, 8) > sqnr_at(x, 4));
}
