#include "mptq/pipeline.hpp"

#include <algorithm>
#include <cmath>
#include <numeric>
#include <random>
#include <set>

#include "mptq/error.hpp"
#include "mptq/io.hpp"

namespace mptq {

namespace {

template <typename F>
auto stage(const char* name, F&& body) -> decltype(body()) {
    try {
        return body();
    } catch (const PipelineError&) {
        throw;
    } catch (const std::exception& e) {
        throw PipelineError(name, e.what());
    }
}

bool is_post_norm_input(SiteKind k) { return k == SiteKind::QkvIn || k == SiteKind::Fc1In || k == SiteKind::HeadIn; }

ChannelSummary summarize_channels(const Tensor& t) {
    const std::size_t c = t.channels(), rows = t.rows();
    ChannelSummary s{std::vector<float>(c), std::vector<float>(c), std::vector<float>(c)};
    for (std::size_t j = 0; j < c; ++j) {
        double sum = 0.0;
        float lo = t[j], hi = t[j];
        for (std::size_t r = 0; r < rows; ++r) {
            const float v = t[r * c + j];
            sum += v;
            lo = std::min(lo, v);
            hi = std::max(hi, v);
        }
        s.mean[j] = static_cast<float>(sum / static_cast<double>(rows));
        s.min[j] = lo;
        s.max[j] = hi;
    }
    return s;
}

std::string param_name(const Site& weight_site) {
    std::string id = weight_site.id();
    return id.substr(0, id.size() - 1) + "weight";  // "....w" -> "....weight"
}

std::string block_label(const Site& s) {
    if (s.block >= 0) return "blocks." + std::to_string(s.block);
    if (s.kind == SiteKind::PatchEmbedIn || s.kind == SiteKind::PatchEmbedW) return "stem";
    return "head";
}

double region_clamping_loss(std::span<const float> x, const RegionQuantizer& rq) {
    const double hi = rq.large_max() * rq.s2();
    const double lo = rq.negative_max() * rq.s0;
    double loss = 0.0;
    for (float v : x) {
        if (v > hi) loss += (v - hi) * (v - hi);
        else if (-v > lo) loss += (-v - lo) * (-v - lo);
    }
    return loss;
}

template <typename E>
E parse_enum(const std::string& s, std::initializer_list<E> values, const char* what) {
    for (auto v : values)
        if (to_string(v) == s) return v;
    throw InputError(std::string("unknown ") + what + " '" + s + "'");
}

}  // namespace

std::string to_string(PrecisionMode m) {
    switch (m) {
        case PrecisionMode::Fp:
            return "fp";
        case PrecisionMode::Sp:
            return "sp";
        case PrecisionMode::Mp:
            return "mp";
    }
    return "mp";
}

std::string to_string(GeluQuantizerKind k) { return k == GeluQuantizerKind::OptM ? "opt-m" : "uniform"; }

std::string to_string(Sensitivity s) { return s == Sensitivity::Local ? "local" : "upstream"; }

void PipelineConfig::validate() const {
    if (sample_count < 1) throw InputError("sample count must be at least 1");
    if (bits < kMinBits || bits > kMaxBits) throw InputError("bits must be in [2, 8]");
    if (weight_bits < kMinBits || weight_bits > kMaxBits) throw InputError("weight target must be in [2, 8]");
    if (activation_bits < kMinBits || activation_bits > kMaxBits)
        throw InputError("activation target must be in [2, 8]");
}

nlohmann::json to_json(const PipelineConfig& c) {
    return nlohmann::json{{"model", c.model_path},
                          {"data", c.data_path},
                          {"samples", c.sample_count},
                          {"mode", to_string(c.mode)},
                          {"fully_quantized", c.fully_quantized},
                          {"bits", c.bits},
                          {"bw", c.weight_bits},
                          {"ba", c.activation_bits},
                          {"redistribution", to_string(c.redistribution)},
                          {"redistribute_head", c.redistribute_head},
                          {"metric", to_string(c.metric)},
                          {"gelu_quantizer", to_string(c.gelu_quantizer)},
                          {"sensitivity", to_string(c.sensitivity)},
                          {"activations_first", c.activations_first},
                          {"element_weighted", c.element_weighted},
                          {"seed", c.seed},
                          {"report", c.report_path}};
}

PipelineConfig pipeline_config_from_json(const nlohmann::json& j, PipelineConfig c) {
    static const std::set<std::string> known{"model",     "data",           "samples",          "mode",
                                             "fully_quantized", "bits",     "bw",               "ba",
                                             "redistribution",  "redistribute_head", "metric", "gelu_quantizer",
                                             "sensitivity",     "activations_first", "element_weighted", "seed",
                                             "report"};
    if (!j.is_object()) throw InputError("config must be a JSON object");
    for (const auto& [k, v] : j.items())
        if (!known.count(k)) throw InputError("unknown config key '" + k + "'");
    try {
        c.model_path = j.value("model", c.model_path);
        c.data_path = j.value("data", c.data_path);
        c.sample_count = j.value("samples", c.sample_count);
        if (j.contains("mode"))
            c.mode = parse_enum(j.at("mode").get<std::string>(),
                                {PrecisionMode::Fp, PrecisionMode::Sp, PrecisionMode::Mp}, "mode");
        c.fully_quantized = j.value("fully_quantized", c.fully_quantized);
        c.bits = j.value("bits", c.bits);
        c.weight_bits = j.value("bw", c.weight_bits);
        c.activation_bits = j.value("ba", c.activation_bits);
        if (j.contains("redistribution"))
            c.redistribution = parse_redist_strategy(j.at("redistribution").get<std::string>());
        c.redistribute_head = j.value("redistribute_head", c.redistribute_head);
        if (j.contains("metric")) c.metric = parse_metric_mode(j.at("metric").get<std::string>());
        if (j.contains("gelu_quantizer"))
            c.gelu_quantizer = parse_enum(j.at("gelu_quantizer").get<std::string>(),
                                          {GeluQuantizerKind::OptM, GeluQuantizerKind::Uniform}, "gelu quantizer");
        if (j.contains("sensitivity"))
            c.sensitivity = parse_enum(j.at("sensitivity").get<std::string>(),
                                       {Sensitivity::Local, Sensitivity::Upstream}, "sensitivity");
        c.activations_first = j.value("activations_first", c.activations_first);
        c.element_weighted = j.value("element_weighted", c.element_weighted);
        c.seed = j.value("seed", c.seed);
        c.report_path = j.value("report", c.report_path);
    } catch (const nlohmann::json::exception& e) {
        throw InputError(std::string("malformed config: ") + e.what());
    }
    return c;
}

std::vector<std::size_t> select_calibration_rows(std::size_t available, std::size_t count, std::uint64_t seed) {
    if (count == 0) throw InputError("sample count must be at least 1");
    if (count > available)
        throw InputError("need " + std::to_string(count) + " calibration samples, data has " +
                         std::to_string(available));
    std::vector<std::size_t> rows(available);
    std::iota(rows.begin(), rows.end(), 0);
    std::mt19937_64 rng(seed);
    std::shuffle(rows.begin(), rows.end(), rng);
    rows.resize(count);
    std::sort(rows.begin(), rows.end());
    return rows;
}

// ---------------------------------------------------------------------------
// Calibration

CalibrationCache run_calibration(const ToyViT& model, const Tensor& calib_inputs, bool fully_quantized) {
    validate(model);
    if (calib_inputs.rank() != 3 || calib_inputs.dim(2) != model.config.patch_dim)
        throw DimensionError("calibration inputs must be (samples, tokens, " +
                             std::to_string(model.config.patch_dim) + ")");
    CalibrationCache cache;
    cache.sites = quantizable_sites(model.config, fully_quantized);
    cache.samples = calib_inputs.dim(0);
    std::set<Site> wanted;
    for (const auto& s : cache.sites)
        if (!s.is_weight()) wanted.insert(s);
    forward(model, calib_inputs, [&](const Site& s, Tensor& t) {
        if (wanted.count(s)) cache.taps.insert_or_assign(s, t);
    });

    for (const auto& [site, tap] : cache.taps) {
        if (is_post_norm_input(site.kind)) cache.channel_stats.emplace(site, summarize_channels(tap));
        if (site.is_post_gelu()) {
            std::vector<Tensor> per_sample;
            for (std::size_t b = 0; b < cache.samples; ++b) per_sample.push_back(slice_batch(tap, b, 1));
            try {
                cache.gelu_stats.emplace(site, collect_gelu_stats(per_sample));
            } catch (const FitError&) {
                // no positive range: the site falls back to the uniform quantizer
            }
        }
    }
    return cache;
}

Container cache_to_container(const CalibrationCache& cache) {
    Container c;
    nlohmann::json sites = nlohmann::json::array();
    for (const auto& s : cache.sites) sites.push_back(s.id());
    nlohmann::json gelu = nlohmann::json::object();
    for (const auto& [s, g] : cache.gelu_stats) gelu[s.id()] = {{"x_low", g.x_low}, {"x_up", g.x_up}};
    nlohmann::json channels = nlohmann::json::object();
    for (const auto& [s, st] : cache.channel_stats)
        channels[s.id()] = {{"mean", st.mean}, {"min", st.min}, {"max", st.max}};
    c.metadata = {{"kind", "calibration-cache"},
                  {"samples", cache.samples},
                  {"sites", sites},
                  {"gelu_stats", gelu},
                  {"channel_stats", channels}};
    for (const auto& [s, t] : cache.taps) c.put(s.id(), t);
    return c;
}

// ---------------------------------------------------------------------------
// Quantizers

void SiteQuantizer::apply(std::span<float> values) const {
    if (region) {
        region_fake_quantize_inplace(values, *region);
    } else if (uniform) {
        for (auto& v : values) v = static_cast<float>(uniform->scale * quantize_value(v, *uniform));
    }
}

Tensor SiteQuantizer::apply(const Tensor& x) const {
    Tensor y = x;
    apply(y.data());
    return y;
}

nlohmann::json SiteQuantizer::to_json() const {
    if (region) {
        auto j = mptq::to_json(*region);
        j["type"] = "opt-m";
        return j;
    }
    if (uniform) return nlohmann::json{{"type", "uniform"}, {"bits", uniform->bits}, {"scale", uniform->scale}};
    return nlohmann::json{{"type", "none"}};
}

SiteQuantizer SiteQuantizer::from_json(const Site& site, const nlohmann::json& j) {
    SiteQuantizer q;
    q.site = site;
    const auto type = j.at("type").get<std::string>();
    if (type == "opt-m") {
        q.region = region_quantizer_from_json(j);
        q.bits = q.region->bits;
    } else if (type == "uniform") {
        q.uniform = QuantSpec(j.at("bits").get<int>(), j.at("scale").get<double>());
        q.bits = q.uniform->bits;
    } else {
        throw IoError("unknown quantizer type '" + type + "'");
    }
    return q;
}

QuantizerBank::QuantizerBank(const ToyViT& model, const CalibrationCache& cache, GeluQuantizerKind gelu_kind)
    : model_(&model), cache_(&cache), gelu_kind_(gelu_kind) {}

const Tensor& QuantizerBank::reference(const Site& site) const {
    if (site.is_weight()) return weight_of(*model_, site);
    auto it = cache_->taps.find(site);
    if (it == cache_->taps.end()) throw PipelineError("fit", "no calibration tap for site '" + site.id() + "'");
    return it->second;
}

bool QuantizerBank::uses_region(const Site& site, int bits) const {
    return site.is_post_gelu() && gelu_kind_ == GeluQuantizerKind::OptM && bits >= kRegionMinBits &&
           cache_->gelu_stats.count(site) != 0;
}

int QuantizerBank::floor_bits(const Site& site) const {
    return uses_region(site, kRegionMinBits) ? kRegionMinBits : kBitFloor;
}

const SiteQuantizer& QuantizerBank::get(const Site& site, int bits) {
    const auto key = std::make_pair(site, bits);
    if (auto it = fitted_.find(key); it != fitted_.end()) return it->second;
    const Tensor& ref = reference(site);
    SiteQuantizer q;
    q.site = site;
    q.bits = bits;
    if (uses_region(site, bits))
        q.region = fit_s0(ref, bits, cache_->gelu_stats.at(site)).quantizer;
    else
        q.uniform = minmax_scale(ref, bits);
    return fitted_.emplace(key, std::move(q)).first->second;
}

double QuantizerBank::sqnr(const Site& site, int bits) {
    const auto key = std::make_pair(site, bits);
    if (auto it = sqnr_.find(key); it != sqnr_.end()) return it->second;
    const Tensor& ref = reference(site);
    const double v = sqnr_db(ref, get(site, bits).apply(ref));
    sqnr_.emplace(key, v);
    return v;
}

// ---------------------------------------------------------------------------
// Application

Tensor forward(const QuantizedModel& q, const Tensor& input) {
    if (q.activations.empty()) return forward(q.model, input);
    return forward(q.model, input, [&](const Site& s, Tensor& t) {
        auto it = q.activations.find(s);
        if (it != q.activations.end()) it->second.apply(t.data());
    });
}

BitAllocation allocation_from_state(const AllocationState& state) {
    BitAllocation a;
    for (const auto& e : state.entries) a[parse_site(e.id)] = e.bits;
    return a;
}

BitAllocation uniform_allocation(const std::vector<Site>& sites, int weight_bits, int activation_bits) {
    BitAllocation a;
    for (const auto& s : sites) a[s] = s.is_weight() ? weight_bits : activation_bits;
    return a;
}

QuantizedModel apply_allocation(const ToyViT& model, QuantizerBank& bank, const BitAllocation& allocation) {
    QuantizedModel q;
    q.model = model;
    for (const auto& [site, bits] : allocation) {
        const SiteQuantizer& sq = bank.get(site, bits);
        if (site.is_weight()) {
            Tensor& w = weight_of(q.model, site);
            sq.apply(w.data());
            q.weights.emplace(site, sq);
        } else {
            q.activations.emplace(site, sq);
        }
    }
    return q;
}

std::vector<LayerEntry> make_entries(const ToyViT& model, const CalibrationCache& cache, QuantizerBank& bank) {
    std::vector<LayerEntry> entries;
    for (const auto& s : cache.sites) {
        LayerEntry e;
        e.id = s.id();
        e.kind = s.is_weight() ? EntryKind::Weight : EntryKind::Activation;
        e.numel = s.is_weight() ? weight_of(model, s).size() : bank.reference(s).size() / cache.samples;
        e.floor_bits = bank.floor_bits(s);
        entries.push_back(std::move(e));
    }
    return entries;
}

AllocationState allocate(const ToyViT& model, const CalibrationCache& cache, QuantizerBank& bank,
                         const Tensor& calib_inputs, const PipelineConfig& config) {
    AllocationState state;
    state.entries = make_entries(model, cache, bank);
    state.targets = {config.weight_bits, config.activation_bits};
    state.options.mode = config.metric;
    state.options.activations_first = config.activations_first;
    state.options.element_weighted = config.element_weighted;

    std::vector<Site> sites;
    for (const auto& e : state.entries) sites.push_back(parse_site(e.id));

    if (config.sensitivity == Sensitivity::Local) {
        return greedy_allocate(std::move(state),
                               [&](const AllocationState&, std::size_t i, int bits) { return bank.sqnr(sites[i], bits); });
    }

    // Upstream: activation taps come from a forward pass with the current
    // allocation applied everywhere else.
    state.options.rescore_all = true;
    std::string cached_key;
    std::map<Site, Tensor> taps;
    auto refresh = [&](const AllocationState& s) {
        std::string key;
        for (const auto& e : s.entries) key.push_back(static_cast<char>('0' + e.bits));
        if (key == cached_key) return;
        BitAllocation alloc;
        for (std::size_t i = 0; i < sites.size(); ++i) alloc[sites[i]] = s.entries[i].bits;
        QuantizedModel q = apply_allocation(model, bank, alloc);
        taps.clear();
        forward(q.model, calib_inputs, [&](const Site& site, Tensor& t) {
            auto it = q.activations.find(site);
            if (it == q.activations.end()) return;
            taps.insert_or_assign(site, t);
            it->second.apply(t.data());
        });
        cached_key = std::move(key);
    };
    return greedy_allocate(std::move(state), [&](const AllocationState& s, std::size_t i, int bits) {
        const Site& site = sites[i];
        if (site.is_weight()) return bank.sqnr(site, bits);
        refresh(s);
        const Tensor& x = taps.at(site);
        return sqnr_db(x, bank.get(site, bits).apply(x));
    });
}

Container quantized_model_to_container(const QuantizedModel& q) {
    Container c = model_to_container(q.model);
    nlohmann::json wq = nlohmann::json::object(), aq = nlohmann::json::object();
    for (const auto& [site, sq] : q.weights) {
        wq[site.id()] = sq.to_json();
        if (sq.uniform) c.put(param_name(site), quantize(weight_of(q.model, site), *sq.uniform));
    }
    for (const auto& [site, sq] : q.activations) aq[site.id()] = sq.to_json();
    nlohmann::json rd = nlohmann::json::object();
    for (const auto& [id, p] : q.redistribution) rd[id] = to_json(p);
    c.metadata["kind"] = "toy-vit-quantized";
    c.metadata["weight_quantizers"] = wq;
    c.metadata["activation_quantizers"] = aq;
    c.metadata["redistribution"] = rd;
    c.metadata["settings"] = q.settings;
    return c;
}

QuantizedModel quantized_model_from_container(const Container& c) {
    QuantizedModel q;
    q.model = model_from_container(c);
    try {
        const auto wq = c.metadata.value("weight_quantizers", nlohmann::json::object());
        const auto aq = c.metadata.value("activation_quantizers", nlohmann::json::object());
        for (const auto& [id, j] : wq.items()) {
            const Site s = parse_site(id);
            q.weights.emplace(s, SiteQuantizer::from_json(s, j));
        }
        for (const auto& [id, j] : aq.items()) {
            const Site s = parse_site(id);
            q.activations.emplace(s, SiteQuantizer::from_json(s, j));
        }
        const auto rd = c.metadata.value("redistribution", nlohmann::json::object());
        for (const auto& [id, j] : rd.items()) q.redistribution.emplace(id, redist_params_from_json(j));
        q.settings = c.metadata.value("settings", nlohmann::json::object());
    } catch (const nlohmann::json::exception& e) {
        throw IoError(std::string("malformed quantizer metadata: ") + e.what());
    }
    return q;
}

// ---------------------------------------------------------------------------
// Evaluation

EvalReport evaluate(const QuantizedModel& q, QuantizerBank& bank, const Tensor& eval_inputs,
                    const Tensor& reference_logits, const nlohmann::json& settings) {
    EvalReport r;
    r.settings = settings;
    const Tensor logits = forward(q, eval_inputs);
    r.end_to_end_sqnr_db = sqnr_db(reference_logits, logits);

    std::map<Site, const SiteQuantizer*> all;
    for (const auto& [s, sq] : q.weights) all.emplace(s, &sq);
    for (const auto& [s, sq] : q.activations) all.emplace(s, &sq);

    double wsum = 0, asum = 0;
    std::size_t wn = 0, an = 0;
    for (const auto& [site, sq] : all) {
        LayerReport l;
        l.id = site.id();
        l.kind = site.is_weight() ? EntryKind::Weight : EntryKind::Activation;
        l.block = site.block;
        l.bits = sq->bits;
        l.quantizer = sq->to_json();
        // Weights are evaluated on the stored (original) tensors held by the bank.
        const Tensor& ref = bank.reference(site);
        l.sqnr_db = sqnr_db(ref, sq->apply(ref));
        l.clamping_loss = sq->region ? region_clamping_loss(ref.data(), *sq->region)
                                     : clamping_loss(ref.data(), *sq->uniform);
        r.clamping_loss_total += l.clamping_loss;
        r.bit_histogram[l.bits] += 1;
        r.block_histogram[block_label(site)][l.bits] += 1;
        if (site.is_weight()) {
            wsum += l.bits;
            ++wn;
        } else {
            asum += l.bits;
            ++an;
        }
        r.layers.push_back(std::move(l));
    }
    r.mean_weight_bits = wn ? wsum / static_cast<double>(wn) : 0.0;
    r.mean_activation_bits = an ? asum / static_cast<double>(an) : 0.0;
    return r;
}

nlohmann::json to_json(const EvalReport& r) {
    nlohmann::json layers = nlohmann::json::array();
    for (const auto& l : r.layers)
        layers.push_back({{"layer_id", l.id},
                          {"kind", to_string(l.kind)},
                          {"block", l.block},
                          {"bits", l.bits},
                          {"quantizer", l.quantizer},
                          {"sqnr_db", number_to_json(l.sqnr_db)},
                          {"clamping_loss", l.clamping_loss}});
    nlohmann::json hist = nlohmann::json::object();
    for (const auto& [b, n] : r.bit_histogram) hist[std::to_string(b)] = n;
    nlohmann::json blocks = nlohmann::json::object();
    for (const auto& [label, h] : r.block_histogram) {
        nlohmann::json bh = nlohmann::json::object();
        for (const auto& [b, n] : h) bh[std::to_string(b)] = n;
        blocks[label] = bh;
    }
    return nlohmann::json{{"format_version", 1},
                          {"settings", r.settings},
                          {"end_to_end_sqnr_db", number_to_json(r.end_to_end_sqnr_db)},
                          {"mean_bits", {{"weight", r.mean_weight_bits}, {"activation", r.mean_activation_bits}}},
                          {"clamping_loss_total", r.clamping_loss_total},
                          {"layers", layers},
                          {"bit_histogram", hist},
                          {"block_histogram", blocks}};
}

void emit_report(const EvalReport& r, const std::filesystem::path& path) {
    const std::string text = to_json(r).dump(2) + "\n";
    write_file(path, std::vector<std::uint8_t>(text.begin(), text.end()));
}

// ---------------------------------------------------------------------------

std::map<std::string, RedistParams> redistribute(ToyViT& model, const Tensor& calib_inputs, RedistStrategy strategy,
                                                 bool include_head, int bits) {
    std::map<std::string, RedistParams> out;
    if (strategy == RedistStrategy::None) return out;
    const auto targets = redistribution_targets(model.config, include_head);
    std::vector<std::string> ids;
    for (const auto& t : targets) ids.push_back(t.id());
    // Fusion preserves full-precision outputs, so one pass over the original
    // model yields valid statistics for every pair.
    const auto tapped = forward_with_taps(model, calib_inputs, ids);
    for (const auto& t : targets) {
        const Site linear_w{t.kind == SiteKind::QkvIn   ? SiteKind::QkvW
                            : t.kind == SiteKind::Fc1In ? SiteKind::Fc1W
                                                        : SiteKind::HeadW,
                            t.block};
        RedistParams p = compute_redist_params(strategy, tapped.taps.at(t.id()), weight_of(model, linear_w), bits);
        apply_redistribution(model, t, p);
        out.emplace(t.id(), std::move(p));
    }
    return out;
}

nlohmann::json run_settings(const PipelineConfig& config) {
    nlohmann::json settings = to_json(config);
    settings.erase("model");
    settings.erase("data");
    settings.erase("report");
    return settings;
}

namespace {

Tensor select_calibration(const ToyViT& model, const Tensor& data, const PipelineConfig& config) {
    return stage("select", [&] {
        if (data.rank() != 3 || data.dim(2) != model.config.patch_dim)
            throw DimensionError("data must be (samples, tokens, " + std::to_string(model.config.patch_dim) + ")");
        return gather_batch(data, select_calibration_rows(data.dim(0), config.sample_count, config.seed));
    });
}

void check_plan_covers(const AllocationState& plan, const std::vector<Site>& sites) {
    std::set<std::string> want, have;
    for (const auto& s : sites) want.insert(s.id());
    for (const auto& e : plan.entries) {
        if (!have.insert(e.id).second) throw InputError("plan lists '" + e.id + "' twice");
        if (!want.count(e.id)) throw InputError("plan entry '" + e.id + "' is not a quantizable site of this model");
    }
    for (const auto& id : want)
        if (!have.count(id)) throw InputError("plan has no entry for site '" + id + "'");
}

}  // namespace

MptqResult run_mptq(const ToyViT& model, const Tensor& data, const PipelineConfig& config,
                    const AllocationState* fixed_plan) {
    stage("config", [&] { config.validate(); });
    stage("load", [&] { validate(model); });
    const Tensor calib = select_calibration(model, data, config);

    MptqResult r;
    r.prepared = model;
    const int act_bits =
        config.mode == PrecisionMode::Sp ? config.bits : static_cast<int>(std::lround(config.activation_bits));
    r.redistribution = stage("redistribute", [&] {
        return redistribute(r.prepared, calib, config.redistribution, config.redistribute_head, act_bits);
    });
    r.cache = stage("calibrate", [&] { return run_calibration(r.prepared, calib, config.fully_quantized); });

    QuantizerBank bank(r.prepared, r.cache, config.gelu_quantizer);
    r.plan = stage("allocate", [&] {
        if (fixed_plan) {
            if (config.mode != PrecisionMode::Fp) check_plan_covers(*fixed_plan, r.cache.sites);
            return *fixed_plan;
        }
        AllocationState s;
        s.options.mode = config.metric;
        switch (config.mode) {
            case PrecisionMode::Mp:
                return allocate(r.prepared, r.cache, bank, calib, config);
            case PrecisionMode::Sp:
                s.entries = make_entries(r.prepared, r.cache, bank);
                for (auto& e : s.entries) e.bits = config.bits;
                s.targets = {static_cast<double>(config.bits), static_cast<double>(config.bits)};
                return s;
            case PrecisionMode::Fp:
                break;
        }
        return s;
    });
    r.quantized = stage("apply", [&] {
        QuantizedModel q = apply_allocation(r.prepared, bank, allocation_from_state(r.plan));
        q.redistribution = r.redistribution;
        q.settings = run_settings(config);
        return q;
    });
    r.report = stage("evaluate", [&] {
        const Tensor reference = forward(model, data);
        return evaluate(r.quantized, bank, data, reference, r.quantized.settings);
    });
    return r;
}

EvalReport evaluate_quantized(const ToyViT& original, const Tensor& data, const QuantizedModel& q) {
    const PipelineConfig config = stage("config", [&] {
        PipelineConfig c = pipeline_config_from_json(q.settings);
        c.validate();
        return c;
    });
    stage("load", [&] {
        validate(original);
        if (!(original.config == q.model.config))
            throw InputError("quantized model and original model have different architectures");
    });
    const Tensor calib = select_calibration(original, data, config);
    ToyViT prepared = original;
    stage("redistribute", [&] {
        for (const auto& [id, params] : q.redistribution) apply_redistribution(prepared, parse_site(id), params);
    });
    const CalibrationCache cache =
        stage("calibrate", [&] { return run_calibration(prepared, calib, config.fully_quantized); });
    return stage("evaluate", [&] {
        QuantizerBank bank(prepared, cache, config.gelu_quantizer);
        const Tensor reference = forward(original, data);
        return evaluate(q, bank, data, reference, q.settings);
    });
}

}  // namespace mptq
