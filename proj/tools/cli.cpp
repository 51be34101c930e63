#include "mptq/cli.hpp"

#include <cmath>
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <optional>
#include <sstream>
#include <string>
#include <utility>

#include "CLI11.hpp"
#include "mptq/error.hpp"
#include "mptq/io.hpp"
#include "mptq/pipeline.hpp"

namespace mptq {
namespace {

namespace fs = std::filesystem;
using nlohmann::json;

// Values bound to command-line options. Pipeline settings stay optional so
// that only flags actually given override the --config file.
struct Options {
    std::string config_path;
    std::string out;
    std::optional<std::uint64_t> seed;
    std::optional<std::string> model, data, mode, redistribution, metric, gelu_quantizer, sensitivity, report;
    std::optional<std::size_t> samples;
    std::optional<int> bits;
    std::optional<double> bw, ba;
    std::optional<bool> fully_quantized, activations_first, element_weighted;
    bool no_redistribute_head = false;

    ModelConfig arch;
    std::size_t count = 64;
    std::size_t tokens = 16;
    std::size_t patch_dim = ModelConfig{}.patch_dim;

    std::string plan, quantized, input;
};

template <class F>
auto stage(const std::string& name, F&& f) -> decltype(f()) {
    try {
        return f();
    } catch (const PipelineError&) {
        throw;
    } catch (const std::exception& e) {
        throw PipelineError(name, e.what());
    }
}

json read_json(const fs::path& path) {
    std::ifstream in(path);
    if (!in) throw IoError("cannot open '" + path.string() + "'");
    try {
        return json::parse(in);
    } catch (const json::exception& e) {
        throw InputError("'" + path.string() + "' is not valid JSON: " + e.what());
    }
}

void write_text(const fs::path& path, const std::string& text) {
    if (path.has_parent_path()) fs::create_directories(path.parent_path());
    write_file(path, std::vector<std::uint8_t>(text.begin(), text.end()));
}

void write_json(const fs::path& path, const json& j) { write_text(path, j.dump(2) + "\n"); }

void write_container(const fs::path& path, const Container& c) {
    if (path.has_parent_path()) fs::create_directories(path.parent_path());
    write_file(path, serialize(c));
}

PipelineConfig resolve_config(const Options& o, PipelineConfig base = {}) {
    return stage("config", [&] {
        PipelineConfig c = std::move(base);
        if (!o.config_path.empty()) c = pipeline_config_from_json(read_json(o.config_path), c);
        json patch = json::object();
        if (o.model) patch["model"] = *o.model;
        if (o.data) patch["data"] = *o.data;
        if (o.samples) patch["samples"] = *o.samples;
        if (o.mode) patch["mode"] = *o.mode;
        if (o.fully_quantized) patch["fully_quantized"] = *o.fully_quantized;
        if (o.bits) patch["bits"] = *o.bits;
        if (o.bw) patch["bw"] = *o.bw;
        if (o.ba) patch["ba"] = *o.ba;
        if (o.redistribution) patch["redistribution"] = *o.redistribution;
        if (o.no_redistribute_head) patch["redistribute_head"] = false;
        if (o.metric) patch["metric"] = *o.metric;
        if (o.gelu_quantizer) patch["gelu_quantizer"] = *o.gelu_quantizer;
        if (o.sensitivity) patch["sensitivity"] = *o.sensitivity;
        if (o.activations_first) patch["activations_first"] = *o.activations_first;
        if (o.element_weighted) patch["element_weighted"] = *o.element_weighted;
        if (o.seed) patch["seed"] = *o.seed;
        if (o.report) patch["report"] = *o.report;
        c = pipeline_config_from_json(patch, c);
        c.validate();
        return c;
    });
}

std::pair<ToyViT, Tensor> load_inputs(const PipelineConfig& c) {
    return stage("load", [&] {
        if (c.model_path.empty()) throw InputError("no model given (--model or \"model\" in the config)");
        if (c.data_path.empty()) throw InputError("no data given (--data or \"data\" in the config)");
        return std::make_pair(load_model(c.model_path), load_tokens(c.data_path));
    });
}

json plan_document(const AllocationState& plan, const PipelineConfig& c) {
    json j = plan_to_json(plan);
    j["settings"] = run_settings(c);
    return j;
}

std::string fmt_db(double v) {
    if (std::isinf(v)) return v > 0 ? "inf" : "-inf";
    char buf[32];
    std::snprintf(buf, sizeof buf, "%.2f", v);
    return buf;
}

double json_number(const json& v) {
    if (v.is_string()) {
        const auto s = v.get<std::string>();
        if (s == "inf") return INFINITY;
        if (s == "-inf") return -INFINITY;
        return NAN;
    }
    return v.get<double>();
}

std::string histogram_line(const json& h) {
    std::ostringstream s;
    bool first = true;
    for (const auto& [b, n] : h.items()) {
        s << (first ? "" : "  ") << b << "b:" << n.get<std::size_t>();
        first = false;
    }
    return s.str();
}

void summarize_report(const json& r, std::ostream& out) {
    const auto& st = r.at("settings");
    out << "mode " << st.value("mode", "?") << ", redistribution " << st.value("redistribution", "?") << ", metric "
        << st.value("metric", "?") << "\n";
    out << "end-to-end SQNR " << fmt_db(json_number(r.at("end_to_end_sqnr_db"))) << " dB\n";
    char buf[128];
    std::snprintf(buf, sizeof buf, "mean bits: weights %.3f, activations %.3f\n",
                  r.at("mean_bits").at("weight").get<double>(), r.at("mean_bits").at("activation").get<double>());
    out << buf;
    std::snprintf(buf, sizeof buf, "clamping loss total %.6g\n", r.at("clamping_loss_total").get<double>());
    out << buf;
    out << "bit histogram: " << histogram_line(r.at("bit_histogram")) << "\n";
    for (const auto& [label, h] : r.at("block_histogram").items()) out << "  " << label << ": " << histogram_line(h) << "\n";
    out << "\n";
    std::snprintf(buf, sizeof buf, "%-28s %-10s %4s %10s  %s\n", "layer", "kind", "bits", "sqnr_db", "quantizer");
    out << buf;
    for (const auto& l : r.at("layers")) {
        std::snprintf(buf, sizeof buf, "%-28s %-10s %4d %10s  %s\n", l.at("layer_id").get<std::string>().c_str(),
                      l.at("kind").get<std::string>().c_str(), l.at("bits").get<int>(),
                      fmt_db(json_number(l.at("sqnr_db"))).c_str(),
                      l.at("quantizer").value("type", "?").c_str());
        out << buf;
    }
}

void summarize_plan(const json& p, std::ostream& out) {
    const auto& t = p.at("targets");
    out << "metric " << p.at("metric_mode").get<std::string>() << ", targets: weights "
        << t.at("weight_bits").get<double>() << ", activations " << t.at("activation_bits").get<double>() << "\n";
    out << p.at("trace").size() << " greedy steps\n";
    char buf[128];
    for (const auto& l : p.at("layers")) {
        std::snprintf(buf, sizeof buf, "%-28s %-10s %4d\n", l.at("layer_id").get<std::string>().c_str(),
                      l.at("kind").get<std::string>().c_str(), l.at("bits").get<int>());
        out << buf;
    }
}

void print_result(const EvalReport& r, std::ostream& out) {
    char buf[160];
    std::snprintf(buf, sizeof buf, "end-to-end SQNR %s dB, mean bits W %.3f A %.3f, %zu sites\n",
                  fmt_db(r.end_to_end_sqnr_db).c_str(), r.mean_weight_bits, r.mean_activation_bits, r.layers.size());
    out << buf;
}

int activation_bits_for(const PipelineConfig& c) {
    return c.mode == PrecisionMode::Sp ? c.bits : static_cast<int>(std::lround(c.activation_bits));
}

// ---------------------------------------------------------------------------

void cmd_gen_model(const Options& o, std::ostream& out) {
    const PipelineConfig c = resolve_config(o);
    const ToyViT model = stage("generate", [&] { return make_toy_vit(o.arch, c.seed); });
    stage("write", [&] {
        if (fs::path(o.out).has_parent_path()) fs::create_directories(fs::path(o.out).parent_path());
        save_model(o.out, model);
    });
    out << "wrote model to " << o.out << "\n";
}

void cmd_gen_data(const Options& o, std::ostream& out) {
    const PipelineConfig c = resolve_config(o);
    const Tensor data = stage("generate", [&] { return make_synthetic_tokens(o.count, o.tokens, o.patch_dim, c.seed); });
    stage("write", [&] {
        if (fs::path(o.out).has_parent_path()) fs::create_directories(fs::path(o.out).parent_path());
        save_tokens(o.out, data);
    });
    out << "wrote " << o.count << " samples to " << o.out << "\n";
}

void cmd_calibrate(const Options& o, std::ostream& out) {
    const PipelineConfig c = resolve_config(o);
    auto [model, data] = load_inputs(c);
    const Tensor calib = stage("select", [&] {
        if (data.rank() != 3 || data.dim(2) != model.config.patch_dim)
            throw DimensionError("data must be (samples, tokens, " + std::to_string(model.config.patch_dim) + ")");
        return gather_batch(data, select_calibration_rows(data.dim(0), c.sample_count, c.seed));
    });
    stage("redistribute",
          [&] { redistribute(model, calib, c.redistribution, c.redistribute_head, activation_bits_for(c)); });
    const auto cache = stage("calibrate", [&] { return run_calibration(model, calib, c.fully_quantized); });
    stage("write", [&] {
        Container container = cache_to_container(cache);
        container.metadata["settings"] = run_settings(c);
        write_container(o.out, container);
    });
    out << "wrote calibration cache for " << cache.taps.size() << " activation sites to " << o.out << "\n";
}

void cmd_quantize(const Options& o, std::ostream& out) {
    const PipelineConfig c = resolve_config(o);
    const auto [model, data] = load_inputs(c);
    const MptqResult r = run_mptq(model, data, c);
    stage("write", [&] {
        const fs::path dir(o.out);
        fs::create_directories(dir);
        write_container(dir / "quantized.bin", quantized_model_to_container(r.quantized));
        write_json(dir / "plan.json", plan_document(r.plan, c));
        emit_report(r.report, dir / "report.json");
        if (!c.report_path.empty()) write_json(c.report_path, to_json(r.report));
    });
    print_result(r.report, out);
    out << "wrote quantized.bin, plan.json and report.json to " << o.out << "\n";
}

void cmd_allocate(const Options& o, std::ostream& out) {
    const PipelineConfig c = resolve_config(o);
    const auto [model, data] = load_inputs(c);
    const MptqResult r = run_mptq(model, data, c);
    stage("write", [&] {
        write_json(o.out, plan_document(r.plan, c));
        if (!c.report_path.empty()) write_json(c.report_path, to_json(r.report));
    });
    char buf[128];
    std::snprintf(buf, sizeof buf, "metric %s, mean bits W %.3f A %.3f, %zu steps\n",
                  to_string(r.plan.options.mode).c_str(), mean_bits(r.plan, EntryKind::Weight),
                  mean_bits(r.plan, EntryKind::Activation), r.plan.trace.size());
    out << buf << "wrote plan to " << o.out << "\n";
}

void cmd_eval(const Options& o, std::ostream& out) {
    EvalReport report;
    if (!o.plan.empty()) {
        const json doc = stage("load", [&] { return read_json(o.plan); });
        const AllocationState plan = stage("load", [&] { return plan_from_json(doc); });
        PipelineConfig base;
        if (doc.contains("settings"))
            base = stage("config", [&] { return pipeline_config_from_json(doc.at("settings")); });
        const PipelineConfig c = resolve_config(o, base);
        const auto [model, data] = load_inputs(c);
        report = run_mptq(model, data, c, &plan).report;
    } else {
        const PipelineConfig c = resolve_config(o);
        const auto [model, data] = load_inputs(c);
        const QuantizedModel q =
            stage("load", [&] { return quantized_model_from_container(deserialize(read_file(o.quantized))); });
        report = evaluate_quantized(model, data, q);
    }
    if (!o.out.empty()) stage("write", [&] { write_json(o.out, to_json(report)); });
    print_result(report, out);
}

void cmd_report(const Options& o, std::ostream& out) {
    const json doc = stage("load", [&] { return read_json(o.input); });
    const std::string text = stage("report", [&] {
        std::ostringstream s;
        if (doc.contains("end_to_end_sqnr_db"))
            summarize_report(doc, s);
        else if (doc.contains("trace"))
            summarize_plan(doc, s);
        else
            throw InputError("'" + o.input + "' is neither a report nor a plan");
        return s.str();
    });
    if (!o.out.empty()) stage("write", [&] { write_text(o.out, text); });
    out << text;
}

void add_pipeline_options(CLI::App* app, Options& o) {
    app->add_option("--config", o.config_path, "JSON config file; flags override its values");
    app->add_option("--seed", o.seed, "seed for every random choice");
    app->add_option("--model", o.model, "model container");
    app->add_option("--data", o.data, "token container");
    app->add_option("--samples", o.samples, "calibration sample count");
    app->add_option("--mode", o.mode, "fp, sp or mp");
    app->add_option("--bits", o.bits, "bit-width in sp mode");
    app->add_option("--bw", o.bw, "mean weight bit-width target in mp mode");
    app->add_option("--ba", o.ba, "mean activation bit-width target in mp mode");
    app->add_option("--redistribution", o.redistribution, "none, sq, sq-b, osup-shift or osup-smooth");
    app->add_flag("--no-redistribute-head", o.no_redistribute_head, "leave the classifier input untouched");
    app->add_option("--metric", o.metric, "sqnr-times-lognumel or sqnr-only");
    app->add_option("--gelu-quantizer", o.gelu_quantizer, "opt-m or uniform");
    app->add_option("--sensitivity", o.sensitivity, "local or upstream");
    app->add_flag("--fully-quantized", o.fully_quantized, "also quantize softmax and layernorm outputs");
    app->add_flag("--activations-first", o.activations_first, "allocate activations before weights");
    app->add_flag("--element-weighted", o.element_weighted, "element-weighted mean bit-width");
    app->add_option("--report", o.report, "extra path for the report JSON");
}

}  // namespace

int cli_main(int argc, const char* const* argv, std::ostream& out, std::ostream& err) {
    CLI::App app{"Mixed-precision post-training quantization of a toy ViT encoder", "mptq"};
    app.require_subcommand(1);
    Options o;

    auto* gen_model = app.add_subcommand("gen-model", "write a seeded toy model container");
    gen_model->add_option("--out", o.out, "output path")->required();
    gen_model->add_option("--config", o.config_path, "JSON config file (its seed is used)");
    gen_model->add_option("--seed", o.seed, "model seed");
    gen_model->add_option("--patch-dim", o.arch.patch_dim);
    gen_model->add_option("--embed-dim", o.arch.embed_dim);
    gen_model->add_option("--depth", o.arch.depth);
    gen_model->add_option("--heads", o.arch.heads);
    gen_model->add_option("--mlp-dim", o.arch.mlp_dim);
    gen_model->add_option("--classes", o.arch.classes);

    auto* gen_data = app.add_subcommand("gen-data", "write seeded synthetic token tensors");
    gen_data->add_option("--out", o.out, "output path")->required();
    gen_data->add_option("--config", o.config_path, "JSON config file (its seed is used)");
    gen_data->add_option("--seed", o.seed, "data seed");
    gen_data->add_option("--count", o.count, "number of samples")->capture_default_str();
    gen_data->add_option("--tokens", o.tokens, "tokens per sample")->capture_default_str();
    gen_data->add_option("--patch-dim", o.patch_dim, "channels per token")->capture_default_str();

    auto* calibrate = app.add_subcommand("calibrate", "collect calibration taps into a container");
    calibrate->add_option("--out", o.out, "output path")->required();
    add_pipeline_options(calibrate, o);

    auto* quantize = app.add_subcommand("quantize", "run the full pipeline");
    quantize->add_option("--out", o.out, "output directory")->required();
    add_pipeline_options(quantize, o);

    auto* allocate_cmd = app.add_subcommand("allocate", "write the bit allocation plan");
    allocate_cmd->add_option("--out", o.out, "plan path")->required();
    add_pipeline_options(allocate_cmd, o);

    auto* eval = app.add_subcommand("eval", "evaluate a plan or a stored quantized model");
    eval->add_option("--out", o.out, "report path");
    add_pipeline_options(eval, o);
    auto* source = eval->add_option_group("source", "what to evaluate");
    source->add_option("--plan", o.plan, "plan JSON; its settings are the base config");
    source->add_option("--quantized", o.quantized, "quantized model container");
    source->require_option(1);

    auto* report = app.add_subcommand("report", "print a plan or report in readable form");
    report->add_option("input,--in", o.input, "report or plan JSON")->required();
    report->add_option("--out", o.out, "also write the summary here");

    try {
        app.parse(argc, argv);
    } catch (const CLI::ParseError& e) {
        const int code = app.exit(e, out, err);
        return code == 0 ? 0 : 2;
    }

    try {
        if (*gen_model) cmd_gen_model(o, out);
        else if (*gen_data) cmd_gen_data(o, out);
        else if (*calibrate) cmd_calibrate(o, out);
        else if (*quantize) cmd_quantize(o, out);
        else if (*allocate_cmd) cmd_allocate(o, out);
        else if (*eval) cmd_eval(o, out);
        else if (*report) cmd_report(o, out);
    } catch (const PipelineError& e) {
        std::string detail = e.what();
        if (detail.rfind(e.stage() + ": ", 0) == 0) detail.erase(0, e.stage().size() + 2);
        err << "mptq: stage '" << e.stage() << "' failed: " << detail << "\n";
        return 1;
    } catch (const std::exception& e) {
        err << "mptq: " << e.what() << "\n";
        return 1;
    }
    return 0;
}

}  // namespace mptq
