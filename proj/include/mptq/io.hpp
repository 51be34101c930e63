#pragma once

#include <cstdint>
#include <filesystem>

#include "json.hpp"
#include "mptq/container.hpp"
#include "mptq/model.hpp"

namespace mptq {

nlohmann::json to_json(const ModelConfig& c);
ModelConfig model_config_from_json(const nlohmann::json& j);

/// Parameter names: "patch_embed.weight", "blocks.0.ln1.gamma", "head.bias", ...
Container model_to_container(const ToyViT& model);
ToyViT model_from_container(const Container& c);

void save_model(const std::filesystem::path& path, const ToyViT& model);
ToyViT load_model(const std::filesystem::path& path);

/// Seeded synthetic pre-embedded patches of shape (samples, tokens, patch_dim):
/// a two-component Gaussian mixture per token plus fixed per-channel shifts
/// and a few high-variance channels.
Tensor make_synthetic_tokens(std::size_t samples, std::size_t tokens, std::size_t patch_dim, std::uint64_t seed);

void save_tokens(const std::filesystem::path& path, const Tensor& tokens);
Tensor load_tokens(const std::filesystem::path& path);

/// Rows [begin, begin + count) of the leading axis.
Tensor slice_batch(const Tensor& x, std::size_t begin, std::size_t count);
/// Gathers rows of the leading axis.
Tensor gather_batch(const Tensor& x, const std::vector<std::size_t>& rows);

}  // namespace mptq
