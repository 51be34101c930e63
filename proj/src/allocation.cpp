#include "mptq/allocation.hpp"

#include <cmath>
#include <limits>

#include "mptq/error.hpp"
#include "mptq/quant.hpp"

namespace mptq {

namespace {

constexpr double kNegInf = -std::numeric_limits<double>::infinity();
constexpr double kMeanSlack = 1e-12;

bool target_reached(const AllocationState& s, EntryKind kind) {
    const double target = kind == EntryKind::Weight ? s.targets.weight_bits : s.targets.activation_bits;
    return mean_bits(s, kind) <= target + kMeanSlack;
}

void run_phase(AllocationState& s, EntryKind kind, const SqnrProvider& sqnr) {
    while (!target_reached(s, kind)) {
        std::size_t pick = s.entries.size();
        for (std::size_t i = 0; i < s.entries.size(); ++i) {
            const auto& e = s.entries[i];
            if (e.kind != kind || e.at_floor()) continue;
            if (pick == s.entries.size() || s.scores[i] > s.scores[pick]) pick = i;
        }
        if (pick == s.entries.size()) {
            const double target = kind == EntryKind::Weight ? s.targets.weight_bits : s.targets.activation_bits;
            throw AllocationError("cannot reach mean " + to_string(kind) + " bit-width " + std::to_string(target) +
                                  ": every entry is at its floor (" + std::to_string(kBitFloor) + " bits)");
        }
        auto& e = s.entries[pick];
        const double alpha = s.scores[pick];
        e.bits -= 1;
        s.trace.push_back(TraceStep{s.trace.size(), e.id, kind, e.bits, alpha});
        if (s.options.rescore_all) {
            for (std::size_t i = 0; i < s.entries.size(); ++i)
                if (s.entries[i].kind == kind) s.scores[i] = selection_score(s, i, sqnr);
        } else {
            s.scores[pick] = selection_score(s, pick, sqnr);
        }
    }
}

}  // namespace

std::string to_string(EntryKind k) { return k == EntryKind::Weight ? "weight" : "activation"; }

std::string to_string(MetricMode m) { return m == MetricMode::SqnrOnly ? "sqnr-only" : "sqnr-times-lognumel"; }

EntryKind parse_entry_kind(const std::string& s) {
    if (s == "weight") return EntryKind::Weight;
    if (s == "activation") return EntryKind::Activation;
    throw InputError("unknown entry kind '" + s + "'");
}

MetricMode parse_metric_mode(const std::string& s) {
    if (s == "sqnr-times-lognumel") return MetricMode::SqnrTimesLogNumel;
    if (s == "sqnr-only") return MetricMode::SqnrOnly;
    throw InputError("unknown metric mode '" + s + "'");
}

double selection_score(double sqnr_below, std::size_t numel, MetricMode mode) {
    if (mode == MetricMode::SqnrOnly) return sqnr_below;
    if (numel <= 1) return 0.0;
    return sqnr_below * std::log10(static_cast<double>(numel));
}

double selection_score(const AllocationState& state, std::size_t index, const SqnrProvider& sqnr) {
    const auto& e = state.entries.at(index);
    if (e.at_floor()) return kNegInf;
    return selection_score(sqnr(state, index, e.bits - 1), e.numel, state.options.mode);
}

double mean_bits(const AllocationState& state, EntryKind kind) {
    double num = 0.0, den = 0.0;
    for (const auto& e : state.entries) {
        if (e.kind != kind) continue;
        const double w = state.options.element_weighted ? static_cast<double>(e.numel) : 1.0;
        num += w * e.bits;
        den += w;
    }
    return den == 0.0 ? 0.0 : num / den;
}

AllocationState greedy_allocate(AllocationState state, const SqnrProvider& sqnr) {
    for (auto& e : state.entries) {
        if (e.numel == 0) throw AllocationError("entry '" + e.id + "' has no elements");
        if (e.floor_bits < kBitFloor || e.floor_bits > kStartBits)
            throw AllocationError("entry '" + e.id + "' has an invalid floor");
        e.bits = kStartBits;
    }
    state.trace.clear();
    state.scores.assign(state.entries.size(), kNegInf);
    for (std::size_t i = 0; i < state.entries.size(); ++i) state.scores[i] = selection_score(state, i, sqnr);

    if (state.options.activations_first) {
        run_phase(state, EntryKind::Activation, sqnr);
        run_phase(state, EntryKind::Weight, sqnr);
    } else {
        run_phase(state, EntryKind::Weight, sqnr);
        run_phase(state, EntryKind::Activation, sqnr);
    }
    return state;
}

double sqnr_at(const Tensor& x, int bits, const GeluStats* gelu_stats) {
    if (gelu_stats != nullptr) {
        const auto fit = fit_s0(x, bits, *gelu_stats);
        return sqnr_db(x, region_fake_quantize(x, fit.quantizer));
    }
    return sqnr_db(x, fake_quantize(x, minmax_scale(x, bits)));
}

nlohmann::json number_to_json(double v) {
    if (std::isinf(v)) return v > 0 ? "inf" : "-inf";
    if (std::isnan(v)) return "nan";
    return v;
}

double number_from_json(const nlohmann::json& j) {
    if (j.is_string()) {
        const auto s = j.get<std::string>();
        if (s == "inf") return std::numeric_limits<double>::infinity();
        if (s == "-inf") return -std::numeric_limits<double>::infinity();
        return std::numeric_limits<double>::quiet_NaN();
    }
    return j.get<double>();
}

nlohmann::json plan_to_json(const AllocationState& state) {
    nlohmann::json layers = nlohmann::json::array();
    for (std::size_t i = 0; i < state.entries.size(); ++i) {
        const auto& e = state.entries[i];
        layers.push_back({{"layer_id", e.id},
                          {"kind", to_string(e.kind)},
                          {"bits", e.bits},
                          {"numel", e.numel},
                          {"floor_bits", e.floor_bits}});
    }
    nlohmann::json trace = nlohmann::json::array();
    for (const auto& t : state.trace)
        trace.push_back({{"step", t.step},
                         {"layer_id", t.id},
                         {"kind", to_string(t.kind)},
                         {"new_bits", t.new_bits},
                         {"alpha", number_to_json(t.alpha)}});
    return nlohmann::json{
        {"format_version", 1},
        {"metric_mode", to_string(state.options.mode)},
        {"targets", {{"weight_bits", state.targets.weight_bits}, {"activation_bits", state.targets.activation_bits}}},
        {"options",
         {{"activations_first", state.options.activations_first},
          {"element_weighted", state.options.element_weighted},
          {"rescore_all", state.options.rescore_all}}},
        {"layers", layers},
        {"trace", trace},
    };
}

AllocationState plan_from_json(const nlohmann::json& j) {
    AllocationState s;
    try {
        s.options.mode = parse_metric_mode(j.at("metric_mode").get<std::string>());
        s.targets.weight_bits = j.at("targets").at("weight_bits").get<double>();
        s.targets.activation_bits = j.at("targets").at("activation_bits").get<double>();
        if (j.contains("options")) {
            const auto& o = j.at("options");
            s.options.activations_first = o.value("activations_first", false);
            s.options.element_weighted = o.value("element_weighted", false);
            s.options.rescore_all = o.value("rescore_all", false);
        }
        for (const auto& l : j.at("layers")) {
            LayerEntry e;
            e.id = l.at("layer_id").get<std::string>();
            e.kind = parse_entry_kind(l.at("kind").get<std::string>());
            e.bits = l.at("bits").get<int>();
            e.numel = l.value("numel", std::size_t{1});
            e.floor_bits = l.value("floor_bits", kBitFloor);
            if (e.bits < kBitFloor || e.bits > kStartBits)
                throw InputError("layer '" + e.id + "' has bit-width outside [2, 8]");
            s.entries.push_back(std::move(e));
        }
        for (const auto& t : j.value("trace", nlohmann::json::array())) {
            s.trace.push_back(TraceStep{t.at("step").get<std::size_t>(), t.at("layer_id").get<std::string>(),
                                        parse_entry_kind(t.at("kind").get<std::string>()), t.at("new_bits").get<int>(),
                                        number_from_json(t.at("alpha"))});
        }
    } catch (const nlohmann::json::exception& e) {
        throw InputError(std::string("malformed plan: ") + e.what());
    }
    return s;
}

}  // namespace mptq
