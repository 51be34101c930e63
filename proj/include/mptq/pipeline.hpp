#pragma once

#include <cstdint>
#include <filesystem>
#include <map>
#include <optional>
#include <string>
#include <vector>

#include "json.hpp"
#include "mptq/allocation.hpp"
#include "mptq/container.hpp"
#include "mptq/gelu_quant.hpp"
#include "mptq/model.hpp"
#include "mptq/quant.hpp"
#include "mptq/redistribution.hpp"

namespace mptq {

enum class PrecisionMode { Fp, Sp, Mp };
enum class GeluQuantizerKind { OptM, Uniform };
enum class Sensitivity { Local, Upstream };

std::string to_string(PrecisionMode m);
std::string to_string(GeluQuantizerKind k);
std::string to_string(Sensitivity s);

struct PipelineConfig {
    std::string model_path;
    std::string data_path;
    std::size_t sample_count = 32;
    PrecisionMode mode = PrecisionMode::Mp;
    bool fully_quantized = false;
    int bits = 8;
    double weight_bits = 8.0;
    double activation_bits = 8.0;
    RedistStrategy redistribution = RedistStrategy::None;
    bool redistribute_head = true;
    MetricMode metric = MetricMode::SqnrTimesLogNumel;
    GeluQuantizerKind gelu_quantizer = GeluQuantizerKind::OptM;
    Sensitivity sensitivity = Sensitivity::Local;
    bool activations_first = false;
    bool element_weighted = false;
    std::uint64_t seed = 0;
    std::string report_path;

    void validate() const;
};

nlohmann::json to_json(const PipelineConfig& c);
/// Missing keys keep their defaults; unknown keys are rejected.
PipelineConfig pipeline_config_from_json(const nlohmann::json& j, PipelineConfig base = {});

/// Seeded choice of `count` distinct rows out of `available`, in ascending order.
std::vector<std::size_t> select_calibration_rows(std::size_t available, std::size_t count, std::uint64_t seed);

struct ChannelSummary {
    std::vector<float> mean, min, max;
};

struct CalibrationCache {
    std::vector<Site> sites;
    std::map<Site, Tensor> taps;  // activation sites only, batch-concatenated
    std::map<Site, GeluStats> gelu_stats;
    std::map<Site, ChannelSummary> channel_stats;  // post-LayerNorm linear inputs
    std::size_t samples = 0;
};

/// One forward pass over the calibration inputs, recording every activation
/// site in `quantizable_sites(model.config, fully_quantized)`.
CalibrationCache run_calibration(const ToyViT& model, const Tensor& calib_inputs, bool fully_quantized);

Container cache_to_container(const CalibrationCache& cache);

/// The quantizer bound to one site at one bit-width.
struct SiteQuantizer {
    Site site;
    int bits = 8;
    std::optional<QuantSpec> uniform;
    std::optional<RegionQuantizer> region;

    void apply(std::span<float> values) const;
    Tensor apply(const Tensor& x) const;
    nlohmann::json to_json() const;
    static SiteQuantizer from_json(const Site& site, const nlohmann::json& j);
};

/// Fits and memoizes quantizers and their local SQNR per (site, bits).
/// Weights use min-max scales; post-GeLU activations use the three-region
/// quantizer when configured and bits >= 4; other activations use min-max
/// scales from the calibration tap.
class QuantizerBank {
public:
    QuantizerBank(const ToyViT& model, const CalibrationCache& cache, GeluQuantizerKind gelu_kind);

    const SiteQuantizer& get(const Site& site, int bits);
    double sqnr(const Site& site, int bits);
    /// Tensor the quantizer is fitted on: the weight or the calibration tap.
    const Tensor& reference(const Site& site) const;
    bool uses_region(const Site& site, int bits) const;
    int floor_bits(const Site& site) const;

private:
    const ToyViT* model_;
    const CalibrationCache* cache_;
    GeluQuantizerKind gelu_kind_;
    std::map<std::pair<Site, int>, SiteQuantizer> fitted_;
    std::map<std::pair<Site, int>, double> sqnr_;
};

struct QuantizedModel {
    ToyViT model;  // weights already fake-quantized
    std::map<Site, SiteQuantizer> weights;
    std::map<Site, SiteQuantizer> activations;
    // Carried along so the full-precision counterpart can be rebuilt from the
    // original model when the container is evaluated later.
    std::map<std::string, RedistParams> redistribution;
    nlohmann::json settings = nlohmann::json::object();
};

/// Forward with every activation quantizer applied in place.
Tensor forward(const QuantizedModel& q, const Tensor& input);

using BitAllocation = std::map<Site, int>;

BitAllocation allocation_from_state(const AllocationState& state);
BitAllocation uniform_allocation(const std::vector<Site>& sites, int weight_bits, int activation_bits);

/// Fake-quantizes every allocated site. Throws PipelineError if a site has no
/// calibration data to fit from.
QuantizedModel apply_allocation(const ToyViT& model, QuantizerBank& bank, const BitAllocation& allocation);

/// Builds allocator entries for `sites`; numel is the per-sample element count.
std::vector<LayerEntry> make_entries(const ToyViT& model, const CalibrationCache& cache, QuantizerBank& bank);

/// Runs the greedy allocator over the bank. In upstream mode activation SQNR is
/// measured on taps from a forward pass with the current allocation applied.
AllocationState allocate(const ToyViT& model, const CalibrationCache& cache, QuantizerBank& bank,
                         const Tensor& calib_inputs, const PipelineConfig& config);

Container quantized_model_to_container(const QuantizedModel& q);
QuantizedModel quantized_model_from_container(const Container& c);

struct LayerReport {
    std::string id;
    EntryKind kind = EntryKind::Weight;
    int block = -1;
    int bits = 8;
    nlohmann::json quantizer;
    double sqnr_db = 0.0;
    double clamping_loss = 0.0;
};

struct EvalReport {
    nlohmann::json settings;
    std::vector<LayerReport> layers;
    double end_to_end_sqnr_db = 0.0;
    double clamping_loss_total = 0.0;
    double mean_weight_bits = 0.0;
    double mean_activation_bits = 0.0;
    std::map<int, std::size_t> bit_histogram;
    std::map<std::string, std::map<int, std::size_t>> block_histogram;
};

/// Builds the report for an applied allocation. `reference_logits` are the
/// full-precision outputs of the original model on `eval_inputs`.
EvalReport evaluate(const QuantizedModel& q, QuantizerBank& bank, const Tensor& eval_inputs,
                    const Tensor& reference_logits, const nlohmann::json& settings);

nlohmann::json to_json(const EvalReport& r);
void emit_report(const EvalReport& r, const std::filesystem::path& path);

struct MptqResult {
    ToyViT prepared;  // after redistribution, still full precision
    std::map<std::string, RedistParams> redistribution;
    CalibrationCache cache;
    AllocationState plan;
    QuantizedModel quantized;
    EvalReport report;
};

/// Redistribution (optional) -> calibration -> quantizer fitting -> greedy
/// allocation (mp) or uniform bits (sp) -> application -> evaluation. Errors
/// are rethrown as PipelineError tagged with the failing stage.
///
/// With `fixed_plan` the allocation stage only checks that the plan covers
/// exactly the quantizable sites and uses its bit-widths.
MptqResult run_mptq(const ToyViT& model, const Tensor& data, const PipelineConfig& config,
                    const AllocationState* fixed_plan = nullptr);

/// Report for a stored quantized model against the original full-precision
/// model. Calibration rows are re-selected from `data` with the stored
/// settings, so the result matches the report written at quantization time
/// when the same data is used.
EvalReport evaluate_quantized(const ToyViT& original, const Tensor& data, const QuantizedModel& q);

/// Settings block written into plans and reports: the config without paths.
nlohmann::json run_settings(const PipelineConfig& config);

/// Redistributes every LayerNorm -> Linear pair of `model` using `calib_inputs`.
std::map<std::string, RedistParams> redistribute(ToyViT& model, const Tensor& calib_inputs, RedistStrategy strategy,
                                                 bool include_head, int bits);

}  // namespace mptq
