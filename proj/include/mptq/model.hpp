#pragma once

#include <cstdint>
#include <functional>
#include <map>
#include <optional>
#include <string>
#include <vector>

#include "mptq/tensor.hpp"

namespace mptq {

struct Linear {
    Tensor weight;  // (out, in)
    std::vector<float> bias;

    std::size_t in_features() const { return weight.dim(1); }
    std::size_t out_features() const { return weight.dim(0); }
};

struct LayerNormParams {
    std::vector<float> gamma;
    std::vector<float> beta;
};

struct EncoderBlock {
    LayerNormParams ln1;
    LayerNormParams ln2;
    Linear qkv;
    Linear proj;
    Linear fc1;
    Linear fc2;
    std::size_t heads = 1;
};

struct ModelConfig {
    std::size_t patch_dim = 48;
    std::size_t embed_dim = 32;
    std::size_t depth = 4;
    std::size_t heads = 4;
    std::size_t mlp_dim = 128;
    std::size_t classes = 10;

    bool operator==(const ModelConfig&) const = default;
};

/// Small ViT-style encoder. Input is (batch, tokens, patch_dim) pre-embedded
/// patches; token 0 feeds the classifier after the final norm.
struct ToyViT {
    ModelConfig config;
    Linear patch_embed;
    std::vector<EncoderBlock> blocks;
    LayerNormParams final_norm;
    Linear head;
};

void validate(const ToyViT& model);

/// Seeded Gaussian weights scaled by 1/sqrt(fan_in). LayerNorm affine
/// parameters get a few outlier channels and per-channel offsets so that
/// post-LayerNorm activations are skewed the way real ViT activations are.
ToyViT make_toy_vit(const ModelConfig& config, std::uint64_t seed);

// ---------------------------------------------------------------------------
// Quantizable sites

enum class SiteKind {
    PatchEmbedIn,
    PatchEmbedW,
    QkvIn,
    QkvW,
    AttnQ,
    AttnK,
    AttnProbs,
    AttnV,
    ProjIn,
    ProjW,
    Fc1In,
    Fc1W,
    Fc2In,  // post-GeLU
    Fc2W,
    HeadIn,
    HeadW,
    Ln1In,
    Ln2In,
    SoftmaxIn,
    FinalNormIn,
};

struct Site {
    SiteKind kind = SiteKind::PatchEmbedIn;
    int block = -1;  // -1 for sites outside the encoder blocks

    bool is_weight() const;
    bool is_post_gelu() const { return kind == SiteKind::Fc2In; }
    std::string id() const;

    auto operator<=>(const Site&) const = default;
};

Site parse_site(const std::string& id);

/// All sites quantized by the pipeline, in forward order. Weight sites and
/// matmul/linear inputs are always present; LayerNorm and Softmax inputs are
/// added in fully-quantized mode.
std::vector<Site> quantizable_sites(const ModelConfig& config, bool fully_quantized);

bool is_operator_input_site(SiteKind kind);

const Tensor& weight_of(const ToyViT& model, const Site& site);
Tensor& weight_of(ToyViT& model, const Site& site);

// ---------------------------------------------------------------------------
// Forward

/// Called on every activation site just before the tensor is consumed. The
/// hook may replace the tensor in place (fake quantization) or copy it (taps).
using ActivationHook = std::function<void(const Site&, Tensor&)>;

constexpr float kLayerNormEps = 1e-6f;

Tensor forward(const ToyViT& model, const Tensor& input, const ActivationHook& hook = {});

struct TappedForward {
    Tensor logits;
    std::map<std::string, Tensor> taps;
};

/// Forward pass that records the named sites. Weight sites return the model's
/// weight tensor. Throws LookupError for an unknown site id.
TappedForward forward_with_taps(const ToyViT& model, const Tensor& input, const std::vector<std::string>& tap_ids);

}  // namespace mptq
