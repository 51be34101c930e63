#pragma once

#include <map>
#include <optional>
#include <string>
#include <vector>

#include "json.hpp"
#include "mptq/model.hpp"
#include "mptq/quant.hpp"
#include "mptq/tensor.hpp"

namespace mptq {

enum class RedistStrategy {
    None,
    Sq,          // smoothing only
    SqB,         // mean shift + smoothing
    OsupShift,   // midpoint shift + smoothing
    OsupSmooth,  // mean shift + grid-searched per-channel range
};

std::string to_string(RedistStrategy s);
RedistStrategy parse_redist_strategy(const std::string& name);

/// Per-channel transform of a LayerNorm -> Linear pair. The linear layer sees
/// (Y - mu) / epsilon instead of Y.
struct RedistParams {
    RedistStrategy strategy = RedistStrategy::None;
    std::vector<float> epsilon;
    std::vector<float> mu;

    static RedistParams identity(std::size_t channels);
    void validate(std::size_t channels) const;
};

struct FusedPair {
    LayerNormParams norm;
    Linear linear;
};

/// epsilon_j = sqrt(max|Y_j| / max|W_:,j|); 1 for channels where either is 0.
std::vector<float> compute_sq_epsilon(const Tensor& activation, const Tensor& weight);

/// mu_j = mean of channel j over every row of the calibration activation.
std::vector<float> compute_sqb_mu(const Tensor& activation);

/// mu+_j = (max Y_j + min Y_j) / 2.
std::vector<float> compute_midpoint_mu(const Tensor& activation);

/// Grid-searched per-channel smoothing. Each candidate t is the range the
/// shifted channel is rescaled to; the channel is fake-quantized on a fixed
/// per-tensor grid of step max_j max|Y_j - mu_j| / 2^(bits-1) and the error is
/// measured back in the original domain. epsilon+_j = max|Y_j - mu_j| / t_j.
std::vector<float> compute_osup_epsilon(const Tensor& activation, std::span<const float> mu,
                                        std::span<const double> t_grid, int bits);

/// Default t grid: `count` values linear in [0.5, 1.5] x max|Y - mu|.
std::vector<double> default_t_grid(const Tensor& activation, std::span<const float> mu, std::size_t count = 20);

struct OsupParams {
    std::vector<float> mu_plus;
    std::vector<float> epsilon_plus;
};

/// mu+ from the channel midpoints and epsilon+ grid-searched around it.
OsupParams compute_osup_params(const Tensor& activation, std::span<const double> t_grid, int bits);

/// Strategy dispatch used by the pipeline. `weight` is the following linear
/// layer; `bits` only matters for the grid-searched strategy.
RedistParams compute_redist_params(RedistStrategy strategy, const Tensor& activation, const Tensor& weight,
                                   int bits = 8);

/// gamma' = gamma/eps, beta' = (beta - mu)/eps, W'[:, j] = eps_j W[:, j],
/// b' = b + W mu. Preserves the floating-point output of the pair.
FusedPair fuse(const LayerNormParams& norm, const Linear& linear, const RedistParams& params);

/// Applies `params` to the activation directly: (Y - mu) / epsilon.
Tensor transform_activation(const Tensor& activation, const RedistParams& params);

/// Sum over saturated elements of (|x| - boundary)^2, where the boundary is
/// scale * max_code for positives and scale * 2^(bits-1) for negatives.
double clamping_loss(std::span<const float> x, const QuantSpec& spec);

/// The LayerNorm -> Linear pairs of a ToyViT, identified by the site of the
/// linear layer's input.
std::vector<Site> redistribution_targets(const ModelConfig& config, bool include_head = true);

/// Rewrites one LayerNorm -> Linear pair in place. `target` is one of the
/// sites returned by redistribution_targets.
void apply_redistribution(ToyViT& model, const Site& target, const RedistParams& params);

nlohmann::json to_json(const RedistParams& p);
RedistParams redist_params_from_json(const nlohmann::json& j);

}  // namespace mptq
