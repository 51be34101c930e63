// pybind11 module `mptq._core`. Arrays cross as float32 numpy arrays; plans,
// reports and configs cross as JSON text and are decoded in mptq/__init__.py.

#include <pybind11/functional.h>
#include <pybind11/numpy.h>
#include <pybind11/pybind11.h>
#include <pybind11/stl.h>

#include "mptq/allocation.hpp"
#include "mptq/cli.hpp"
#include "mptq/error.hpp"
#include "mptq/gelu_quant.hpp"
#include "mptq/io.hpp"
#include "mptq/pipeline.hpp"
#include "mptq/quant.hpp"

namespace py = pybind11;
using namespace mptq;

namespace {

using FloatArray = py::array_t<float, py::array::c_style | py::array::forcecast>;

Tensor to_tensor(const FloatArray& a) {
    Shape shape(a.shape(), a.shape() + a.ndim());
    if (shape.empty()) shape = {1};
    return Tensor(shape, std::vector<float>(a.data(), a.data() + a.size()));
}

FloatArray to_array(const Tensor& t) {
    FloatArray out(std::vector<py::ssize_t>(t.shape().begin(), t.shape().end()));
    std::copy(t.values().begin(), t.values().end(), out.mutable_data());
    return out;
}

ModelConfig model_config(const std::string& json_text) { return model_config_from_json(nlohmann::json::parse(json_text)); }

}  // namespace

PYBIND11_MODULE(_core, m) {
    m.doc() = "Mixed-precision post-training quantization core";

    auto base = py::register_exception<Error>(m, "MptqError");
    py::register_exception<InputError>(m, "InputError", base.ptr());
    py::register_exception<DimensionError>(m, "DimensionError", base.ptr());
    py::register_exception<FitError>(m, "FitError", base.ptr());
    py::register_exception<EncodingError>(m, "EncodingError", base.ptr());
    py::register_exception<AllocationError>(m, "AllocationError", base.ptr());
    py::register_exception<IoError>(m, "IoError", base.ptr());
    py::register_exception<LookupError>(m, "LookupError", base.ptr());
    py::register_exception<PipelineError>(m, "PipelineError", base.ptr());

    // Uniform quantization
    m.def("minmax_scale", [](const FloatArray& x, int bits) { return minmax_scale(to_tensor(x), bits).scale; },
          py::arg("x"), py::arg("bits"));
    m.def(
        "fake_quantize",
        [](const FloatArray& x, int bits, std::optional<double> scale) {
            const Tensor t = to_tensor(x);
            const QuantSpec spec = scale ? QuantSpec(bits, *scale) : minmax_scale(t, bits);
            return to_array(fake_quantize(t, spec)).reshape(std::vector<py::ssize_t>(x.shape(), x.shape() + x.ndim()));
        },
        py::arg("x"), py::arg("bits"), py::arg("scale") = py::none());
    m.def(
        "sqnr_db", [](const FloatArray& x, const FloatArray& xh) { return sqnr_db(to_tensor(x), to_tensor(xh)); },
        py::arg("x"), py::arg("reconstructed"));

    // Three-region post-GeLU quantizer
    py::class_<RegionQuantizer>(m, "RegionQuantizer")
        .def(py::init<int, double, int, int>(), py::arg("bits"), py::arg("s0"), py::arg("m0"), py::arg("m1"))
        .def_readonly("bits", &RegionQuantizer::bits)
        .def_readonly("s0", &RegionQuantizer::s0)
        .def_readonly("m0", &RegionQuantizer::m0)
        .def_readonly("m1", &RegionQuantizer::m1)
        .def_property_readonly("s1", &RegionQuantizer::s1)
        .def_property_readonly("s2", &RegionQuantizer::s2)
        .def("encode",
             [](const RegionQuantizer& rq, double x) {
                 const auto c = region_encode(x, rq);
                 return py::make_tuple(to_string(c.region), c.magnitude);
             })
        .def("decode",
             [](const RegionQuantizer& rq, const std::string& region, std::uint32_t magnitude) {
                 const Region r = region == "neg"         ? Region::Negative
                                  : region == "small-pos" ? Region::SmallPositive
                                  : region == "large-pos" ? Region::LargePositive
                                                          : throw InputError("unknown region '" + region + "'");
                 return region_decode({r, magnitude}, rq);
             })
        .def("pack", [](const RegionQuantizer& rq, double x) { return pack_bits(region_encode(x, rq), rq); })
        .def("unpack",
             [](const RegionQuantizer& rq, std::uint32_t pattern) { return region_decode(unpack_bits(pattern, rq), rq); })
        .def("fake_quantize",
             [](const RegionQuantizer& rq, const FloatArray& x) {
                 return to_array(region_fake_quantize(to_tensor(x), rq))
                     .reshape(std::vector<py::ssize_t>(x.shape(), x.shape() + x.ndim()));
             })
        .def("__repr__", [](const RegionQuantizer& rq) { return "RegionQuantizer(" + to_json(rq).dump() + ")"; });

    m.def(
        "compute_m1", [](double x_low, double x_up, int bits) { return compute_m1({x_low, x_up}, bits); },
        py::arg("x_low"), py::arg("x_up"), py::arg("bits"));
    m.def(
        "fit_region_quantizer",
        [](const FloatArray& samples, int bits) {
            // Leading axis indexes calibration samples.
            const Tensor all = to_tensor(samples);
            std::vector<Tensor> per_sample;
            const std::size_t n = all.rank() > 1 ? all.dim(0) : 1;
            const std::size_t stride = all.size() / n;
            for (std::size_t i = 0; i < n; ++i)
                per_sample.emplace_back(Shape{stride}, std::vector<float>(all.values().begin() + i * stride,
                                                                          all.values().begin() + (i + 1) * stride));
            return fit_s0(all, bits, collect_gelu_stats(per_sample)).quantizer;
        },
        py::arg("samples"), py::arg("bits"));

    // Greedy allocation over an SQNR table: table[i][b] for b in 0..8.
    m.def(
        "greedy_allocate_json",
        [](const std::vector<std::vector<double>>& table, const std::vector<std::size_t>& numel, double target,
           const std::string& metric) {
            if (table.size() != numel.size()) throw InputError("table and numel lengths differ");
            AllocationState s;
            for (std::size_t i = 0; i < table.size(); ++i) {
                if (table[i].size() != 9) throw InputError("each table row needs 9 entries (bits 0..8)");
                s.entries.push_back(LayerEntry{"layer" + std::to_string(i), EntryKind::Weight, numel[i]});
            }
            s.targets.weight_bits = target;
            s.options.mode = parse_metric_mode(metric);
            const auto out = greedy_allocate(
                s, [&](const AllocationState&, std::size_t i, int b) { return table[i][static_cast<std::size_t>(b)]; });
            return plan_to_json(out).dump();
        },
        py::arg("table"), py::arg("numel"), py::arg("target"), py::arg("metric"));

    // Model, data and pipeline
    py::class_<ToyViT>(m, "ToyViT")
        .def_property_readonly("config_json", [](const ToyViT& v) { return to_json(v.config).dump(); })
        .def("forward", [](const ToyViT& v, const FloatArray& x) { return to_array(forward(v, to_tensor(x))); })
        .def("save", [](const ToyViT& v, const std::string& path) { save_model(path, v); });
    m.def(
        "make_toy_vit", [](const std::string& config_json, std::uint64_t seed) {
            return make_toy_vit(model_config(config_json), seed);
        },
        py::arg("config_json"), py::arg("seed"));
    m.def("load_model", [](const std::string& path) { return load_model(path); }, py::arg("path"));
    m.def(
        "make_synthetic_tokens",
        [](std::size_t samples, std::size_t tokens, std::size_t patch_dim, std::uint64_t seed) {
            return to_array(make_synthetic_tokens(samples, tokens, patch_dim, seed));
        },
        py::arg("samples"), py::arg("tokens"), py::arg("patch_dim"), py::arg("seed"));

    py::class_<QuantizedModel>(m, "QuantizedModel")
        .def("forward", [](const QuantizedModel& q, const FloatArray& x) { return to_array(forward(q, to_tensor(x))); })
        .def("save", [](const QuantizedModel& q, const std::string& path) {
            write_file(path, serialize(quantized_model_to_container(q)));
        });

    m.def(
        "run_mptq_json",
        [](const ToyViT& model, const FloatArray& data, const std::string& config_json) {
            const auto config = pipeline_config_from_json(nlohmann::json::parse(config_json));
            auto r = run_mptq(model, to_tensor(data), config);
            return py::make_tuple(std::move(r.quantized), plan_to_json(r.plan).dump(), to_json(r.report).dump());
        },
        py::arg("model"), py::arg("data"), py::arg("config_json"));

    m.def(
        "cli_main",
        [](const std::vector<std::string>& args) {
            std::vector<const char*> argv{"mptq"};
            for (const auto& a : args) argv.push_back(a.c_str());
            return cli_main(static_cast<int>(argv.size()), argv.data());
        },
        py::arg("args"));
}
