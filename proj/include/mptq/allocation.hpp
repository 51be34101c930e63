#pragma once

#include <cstddef>
#include <functional>
#include <string>
#include <vector>

#include "json.hpp"
#include "mptq/gelu_quant.hpp"
#include "mptq/tensor.hpp"

namespace mptq {

constexpr int kStartBits = 8;
constexpr int kBitFloor = 2;

enum class EntryKind { Weight, Activation };
enum class MetricMode { SqnrTimesLogNumel, SqnrOnly };

std::string to_string(EntryKind k);
std::string to_string(MetricMode m);
EntryKind parse_entry_kind(const std::string& s);
MetricMode parse_metric_mode(const std::string& s);

struct LayerEntry {
    std::string id;
    EntryKind kind = EntryKind::Weight;
    std::size_t numel = 1;
    int bits = kStartBits;
    int floor_bits = kBitFloor;

    bool at_floor() const { return bits <= floor_bits; }
};

struct AllocationTargets {
    double weight_bits = 8.0;
    double activation_bits = 8.0;
};

struct AllocationOptions {
    MetricMode mode = MetricMode::SqnrTimesLogNumel;
    bool activations_first = false;
    // Mean weighted by element count instead of the plain per-layer mean.
    bool element_weighted = false;
    // Recompute every score of the active kind after each decrement. Needed
    // when SQNR depends on the other layers' bits.
    bool rescore_all = false;
};

struct TraceStep {
    std::size_t step = 0;
    std::string id;
    EntryKind kind = EntryKind::Weight;
    int new_bits = 0;
    double alpha = 0.0;

    bool operator==(const TraceStep&) const = default;
};

struct AllocationState {
    std::vector<LayerEntry> entries;
    std::vector<double> scores;  // alpha per entry; -inf for entries at the floor
    AllocationTargets targets;
    AllocationOptions options;
    std::vector<TraceStep> trace;
};

/// SQNR (dB) of entry `index` quantized at `bits`, given the current state.
using SqnrProvider = std::function<double(const AllocationState& state, std::size_t index, int bits)>;

/// alpha = SQNR * log10(numel), or SQNR alone in sqnr-only mode. A single
/// element has no compression benefit and scores 0 in product mode.
double selection_score(double sqnr_below, std::size_t numel, MetricMode mode);

/// Score of an entry for dropping one more bit; -inf when it is at its floor.
double selection_score(const AllocationState& state, std::size_t index, const SqnrProvider& sqnr);

double mean_bits(const AllocationState& state, EntryKind kind);

/// Starts every entry at 8 bits, then greedily decrements the highest-alpha
/// entry of each kind until that kind's mean reaches its target. Weights go
/// first unless options.activations_first is set. Ties go to the lower index.
AllocationState greedy_allocate(AllocationState state, const SqnrProvider& sqnr);

/// SQNR of `x` fake-quantized at `bits`: min-max uniform, or the fitted
/// three-region quantizer when post-GeLU statistics are given.
double sqnr_at(const Tensor& x, int bits, const GeluStats* gelu_stats = nullptr);

nlohmann::json plan_to_json(const AllocationState& state);
AllocationState plan_from_json(const nlohmann::json& j);

/// JSON has no infinities; they are written as the strings "inf"/"-inf".
nlohmann::json number_to_json(double v);
double number_from_json(const nlohmann::json& j);

}  // namespace mptq
