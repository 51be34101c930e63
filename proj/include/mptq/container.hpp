#pragma once

#include <cstdint>
#include <filesystem>
#include <map>
#include <string>
#include <vector>

#include "json.hpp"
#include "mptq/quant.hpp"
#include "mptq/tensor.hpp"

namespace mptq {

// Tensor container layout:
//
//   u64 (little-endian)  header length N
//   N bytes              JSON header
//   payload              raw little-endian tensor bytes, concatenated
//
// The header is {"format_version": 1, "metadata": {...}, "tensors": {name:
// {"dtype", "shape", "byte_offset", "byte_length", ...}}}. dtype is "f32" or
// "i8-codes"; the latter also carries "bits" and "scale". Tensors are laid out
// in name order, so equal containers serialize to equal bytes.

constexpr int kContainerVersion = 1;

struct ContainerTensor {
    std::string dtype;  // "f32" | "i8-codes"
    Shape shape;
    std::vector<std::uint8_t> bytes;
    int bits = 0;        // i8-codes only
    double scale = 0.0;  // i8-codes only
};

struct Container {
    nlohmann::json metadata = nlohmann::json::object();
    std::map<std::string, ContainerTensor> tensors;

    void put(const std::string& name, const Tensor& t);
    void put(const std::string& name, const std::vector<float>& v);
    void put(const std::string& name, const QuantizedTensor& q);

    bool has(const std::string& name) const { return tensors.count(name) != 0; }
    Tensor tensor(const std::string& name) const;
    std::vector<float> vector(const std::string& name) const;
    QuantizedTensor quantized(const std::string& name) const;
};

std::vector<std::uint8_t> serialize(const Container& c);
Container deserialize(const std::vector<std::uint8_t>& bytes);

void write_file(const std::filesystem::path& path, const std::vector<std::uint8_t>& bytes);
std::vector<std::uint8_t> read_file(const std::filesystem::path& path);

void save_container(const std::filesystem::path& path, const Container& c);
Container load_container(const std::filesystem::path& path);

}  // namespace mptq
