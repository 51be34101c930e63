#include "mptq/container.hpp"

#include <bit>
#include <cstring>
#include <fstream>
#include <iterator>

#include "mptq/error.hpp"

namespace mptq {

namespace {

void put_u32(std::vector<std::uint8_t>& out, std::uint32_t v) {
    for (int i = 0; i < 4; ++i) out.push_back(static_cast<std::uint8_t>(v >> (8 * i)));
}

std::uint32_t get_u32(const std::uint8_t* p) {
    return std::uint32_t{p[0]} | std::uint32_t{p[1]} << 8 | std::uint32_t{p[2]} << 16 | std::uint32_t{p[3]} << 24;
}

std::vector<std::uint8_t> encode_f32(std::span<const float> v) {
    std::vector<std::uint8_t> out;
    out.reserve(v.size() * 4);
    for (float f : v) put_u32(out, std::bit_cast<std::uint32_t>(f));
    return out;
}

std::vector<float> decode_f32(const std::vector<std::uint8_t>& bytes) {
    std::vector<float> out(bytes.size() / 4);
    for (std::size_t i = 0; i < out.size(); ++i) out[i] = std::bit_cast<float>(get_u32(bytes.data() + 4 * i));
    return out;
}

}  // namespace

void Container::put(const std::string& name, const Tensor& t) {
    tensors[name] = ContainerTensor{"f32", t.shape(), encode_f32(t.data()), 0, 0.0};
}

void Container::put(const std::string& name, const std::vector<float>& v) {
    tensors[name] = ContainerTensor{"f32", Shape{v.size()}, encode_f32(v), 0, 0.0};
}

void Container::put(const std::string& name, const QuantizedTensor& q) {
    std::vector<std::uint8_t> bytes(q.codes.size());
    std::memcpy(bytes.data(), q.codes.data(), bytes.size());
    tensors[name] = ContainerTensor{"i8-codes", q.shape, std::move(bytes), q.spec.bits, q.spec.scale};
}

Tensor Container::tensor(const std::string& name) const {
    auto it = tensors.find(name);
    if (it == tensors.end()) throw IoError("container has no tensor '" + name + "'");
    if (it->second.dtype == "i8-codes") return dequantize(quantized(name));
    if (it->second.dtype != "f32") throw IoError("tensor '" + name + "' has unsupported dtype " + it->second.dtype);
    return Tensor(it->second.shape, decode_f32(it->second.bytes));
}

std::vector<float> Container::vector(const std::string& name) const { return tensor(name).values(); }

QuantizedTensor Container::quantized(const std::string& name) const {
    auto it = tensors.find(name);
    if (it == tensors.end()) throw IoError("container has no tensor '" + name + "'");
    const auto& t = it->second;
    if (t.dtype != "i8-codes") throw IoError("tensor '" + name + "' is not quantized");
    QuantizedTensor q{t.shape, std::vector<std::int8_t>(t.bytes.size()), QuantSpec(t.bits, t.scale)};
    std::memcpy(q.codes.data(), t.bytes.data(), t.bytes.size());
    return q;
}

std::vector<std::uint8_t> serialize(const Container& c) {
    nlohmann::json table = nlohmann::json::object();
    std::size_t offset = 0;
    for (const auto& [name, t] : c.tensors) {
        nlohmann::json e{{"dtype", t.dtype}, {"shape", t.shape}, {"byte_offset", offset}, {"byte_length", t.bytes.size()}};
        if (t.dtype == "i8-codes") {
            e["bits"] = t.bits;
            e["scale"] = t.scale;
        }
        table[name] = std::move(e);
        offset += t.bytes.size();
    }
    const nlohmann::json header{{"format_version", kContainerVersion}, {"metadata", c.metadata}, {"tensors", table}};
    const std::string text = header.dump();

    std::vector<std::uint8_t> out;
    out.reserve(8 + text.size() + offset);
    const std::uint64_t n = text.size();
    for (int i = 0; i < 8; ++i) out.push_back(static_cast<std::uint8_t>(n >> (8 * i)));
    out.insert(out.end(), text.begin(), text.end());
    for (const auto& [name, t] : c.tensors) out.insert(out.end(), t.bytes.begin(), t.bytes.end());
    return out;
}

Container deserialize(const std::vector<std::uint8_t>& bytes) {
    if (bytes.size() < 8) throw IoError("container is truncated");
    std::uint64_t n = 0;
    for (int i = 0; i < 8; ++i) n |= std::uint64_t{bytes[static_cast<std::size_t>(i)]} << (8 * i);
    if (n > bytes.size() - 8) throw IoError("container header length exceeds file size");

    nlohmann::json header;
    try {
        header = nlohmann::json::parse(bytes.begin() + 8, bytes.begin() + 8 + static_cast<std::ptrdiff_t>(n));
    } catch (const nlohmann::json::exception& e) {
        throw IoError(std::string("container header is not valid JSON: ") + e.what());
    }
    if (header.value("format_version", 0) != kContainerVersion) throw IoError("unsupported container version");

    Container c;
    c.metadata = header.value("metadata", nlohmann::json::object());
    const std::size_t base = 8 + static_cast<std::size_t>(n);
    try {
        for (const auto& [name, e] : header.at("tensors").items()) {
            ContainerTensor t;
            t.dtype = e.at("dtype").get<std::string>();
            t.shape = e.at("shape").get<Shape>();
            const auto off = e.at("byte_offset").get<std::size_t>();
            const auto len = e.at("byte_length").get<std::size_t>();
            if (base + off + len > bytes.size()) throw IoError("tensor '" + name + "' extends past end of file");
            const std::size_t width = t.dtype == "f32" ? 4 : t.dtype == "i8-codes" ? 1 : 0;
            if (width == 0) throw IoError("tensor '" + name + "' has unknown dtype " + t.dtype);
            if (shape_numel(t.shape) * width != len) throw IoError("tensor '" + name + "' byte length mismatch");
            t.bytes.assign(bytes.begin() + static_cast<std::ptrdiff_t>(base + off),
                           bytes.begin() + static_cast<std::ptrdiff_t>(base + off + len));
            if (t.dtype == "i8-codes") {
                t.bits = e.at("bits").get<int>();
                t.scale = e.at("scale").get<double>();
            }
            c.tensors.emplace(name, std::move(t));
        }
    } catch (const nlohmann::json::exception& e) {
        throw IoError(std::string("malformed container header: ") + e.what());
    }
    return c;
}

void write_file(const std::filesystem::path& path, const std::vector<std::uint8_t>& bytes) {
    std::ofstream f(path, std::ios::binary | std::ios::trunc);
    if (!f) throw IoError("cannot open '" + path.string() + "' for writing");
    f.write(reinterpret_cast<const char*>(bytes.data()), static_cast<std::streamsize>(bytes.size()));
    if (!f) throw IoError("failed writing '" + path.string() + "'");
}

std::vector<std::uint8_t> read_file(const std::filesystem::path& path) {
    std::ifstream f(path, std::ios::binary);
    if (!f) throw IoError("cannot open '" + path.string() + "'");
    return std::vector<std::uint8_t>(std::istreambuf_iterator<char>(f), std::istreambuf_iterator<char>());
}

void save_container(const std::filesystem::path& path, const Container& c) { write_file(path, serialize(c)); }

Container load_container(const std::filesystem::path& path) { return deserialize(read_file(path)); }

}  // namespace mptq
