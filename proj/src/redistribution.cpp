#include "mptq/redistribution.hpp"

#include <algorithm>
#include <cmath>

#include "mptq/error.hpp"

namespace mptq {

namespace {

struct ChannelStats {
    std::vector<double> max_abs, min, max, sum;
    std::size_t rows = 0;
};

ChannelStats channel_stats(const Tensor& y) {
    if (y.empty()) throw InputError("calibration activation is empty");
    const std::size_t c = y.channels();
    ChannelStats s;
    s.rows = y.rows();
    s.max_abs.assign(c, 0.0);
    s.min.assign(c, std::numeric_limits<double>::infinity());
    s.max.assign(c, -std::numeric_limits<double>::infinity());
    s.sum.assign(c, 0.0);
    for (std::size_t r = 0; r < s.rows; ++r)
        for (std::size_t j = 0; j < c; ++j) {
            const double v = y[r * c + j];
            s.max_abs[j] = std::max(s.max_abs[j], std::fabs(v));
            s.min[j] = std::min(s.min[j], v);
            s.max[j] = std::max(s.max[j], v);
            s.sum[j] += v;
        }
    return s;
}

Tensor shifted(const Tensor& y, std::span<const float> mu) {
    if (mu.size() != y.channels()) throw DimensionError("shift vector length does not match channel count");
    Tensor out(y.shape());
    const std::size_t c = y.channels();
    for (std::size_t i = 0; i < y.size(); ++i) out[i] = y[i] - mu[i % c];
    return out;
}

}  // namespace

std::string to_string(RedistStrategy s) {
    switch (s) {
        case RedistStrategy::None:
            return "none";
        case RedistStrategy::Sq:
            return "sq";
        case RedistStrategy::SqB:
            return "sq-b";
        case RedistStrategy::OsupShift:
            return "osup-shift";
        case RedistStrategy::OsupSmooth:
            return "osup-smooth";
    }
    return "none";
}

RedistStrategy parse_redist_strategy(const std::string& name) {
    if (name == "osup") return RedistStrategy::OsupShift;
    for (auto s : {RedistStrategy::None, RedistStrategy::Sq, RedistStrategy::SqB, RedistStrategy::OsupShift,
                   RedistStrategy::OsupSmooth})
        if (to_string(s) == name) return s;
    throw InputError("unknown redistribution strategy '" + name + "'");
}

RedistParams RedistParams::identity(std::size_t channels) {
    return RedistParams{RedistStrategy::None, std::vector<float>(channels, 1.0f), std::vector<float>(channels, 0.0f)};
}

void RedistParams::validate(std::size_t channels) const {
    if (epsilon.size() != channels || mu.size() != channels)
        throw DimensionError("redistribution parameters cover " + std::to_string(epsilon.size()) +
                             " channels, expected " + std::to_string(channels));
    for (float e : epsilon)
        if (!(e > 0.0f) || !std::isfinite(e)) throw InputError("smoothing factors must be positive and finite");
    if (!all_finite(mu)) throw InputError("shift vector must be finite");
}

std::vector<float> compute_sq_epsilon(const Tensor& activation, const Tensor& weight) {
    if (weight.rank() != 2 || weight.dim(1) != activation.channels())
        throw DimensionError("weight input dimension does not match activation channels");
    const auto stats = channel_stats(activation);
    const std::size_t c = activation.channels();
    std::vector<double> wmax(c, 0.0);
    for (std::size_t o = 0; o < weight.dim(0); ++o)
        for (std::size_t j = 0; j < c; ++j) wmax[j] = std::max(wmax[j], std::fabs(static_cast<double>(weight[o * c + j])));
    std::vector<float> eps(c, 1.0f);
    for (std::size_t j = 0; j < c; ++j)
        if (stats.max_abs[j] > 0.0 && wmax[j] > 0.0) eps[j] = static_cast<float>(std::sqrt(stats.max_abs[j] / wmax[j]));
    return eps;
}

std::vector<float> compute_sqb_mu(const Tensor& activation) {
    const auto stats = channel_stats(activation);
    std::vector<float> mu(stats.sum.size());
    for (std::size_t j = 0; j < mu.size(); ++j) mu[j] = static_cast<float>(stats.sum[j] / static_cast<double>(stats.rows));
    return mu;
}

std::vector<float> compute_midpoint_mu(const Tensor& activation) {
    const auto stats = channel_stats(activation);
    std::vector<float> mu(stats.sum.size());
    for (std::size_t j = 0; j < mu.size(); ++j) mu[j] = static_cast<float>((stats.max[j] + stats.min[j]) / 2.0);
    return mu;
}

std::vector<double> default_t_grid(const Tensor& activation, std::span<const float> mu, std::size_t count) {
    const Tensor z = shifted(activation, mu);
    const double m = max_abs(z.data());
    std::vector<double> grid;
    if (m == 0.0 || count == 0) return {1.0};
    for (std::size_t i = 0; i < count; ++i) {
        const double f = count == 1 ? 1.0 : 0.5 + static_cast<double>(i) / static_cast<double>(count - 1);
        grid.push_back(f * m);
    }
    return grid;
}

std::vector<float> compute_osup_epsilon(const Tensor& activation, std::span<const float> mu,
                                        std::span<const double> t_grid, int bits) {
    if (t_grid.empty()) throw InputError("t grid must not be empty");
    for (double t : t_grid)
        if (!(t > 0.0)) throw InputError("t grid values must be positive");
    const Tensor z = shifted(activation, mu);
    const std::size_t c = z.channels();
    const std::size_t rows = z.rows();
    const double global = max_abs(z.data());
    std::vector<float> eps(c, 1.0f);
    if (global == 0.0) return eps;
    const QuantSpec grid_spec(bits, global / std::ldexp(1.0, bits - 1));

    for (std::size_t j = 0; j < c; ++j) {
        double range = 0.0;
        for (std::size_t r = 0; r < rows; ++r) range = std::max(range, std::fabs(static_cast<double>(z[r * c + j])));
        if (range == 0.0) continue;
        double best = std::numeric_limits<double>::infinity();
        double best_eps = 1.0;
        for (double t : t_grid) {
            const double e = range / t;
            double err = 0.0;
            for (std::size_t r = 0; r < rows; ++r) {
                const double v = z[r * c + j] / e;
                const double q = grid_spec.scale * quantize_value(v, grid_spec);
                err += (q - v) * (q - v);
            }
            err *= e * e;
            if (err < best) {
                best = err;
                best_eps = e;
            }
        }
        eps[j] = static_cast<float>(best_eps);
    }
    return eps;
}

OsupParams compute_osup_params(const Tensor& activation, std::span<const double> t_grid, int bits) {
    OsupParams p;
    p.mu_plus = compute_midpoint_mu(activation);
    p.epsilon_plus = compute_osup_epsilon(activation, p.mu_plus, t_grid, bits);
    return p;
}

RedistParams compute_redist_params(RedistStrategy strategy, const Tensor& activation, const Tensor& weight, int bits) {
    const std::size_t c = activation.channels();
    RedistParams p = RedistParams::identity(c);
    p.strategy = strategy;
    switch (strategy) {
        case RedistStrategy::None:
            break;
        case RedistStrategy::Sq:
            p.epsilon = compute_sq_epsilon(activation, weight);
            break;
        case RedistStrategy::SqB:
            p.mu = compute_sqb_mu(activation);
            p.epsilon = compute_sq_epsilon(shifted(activation, p.mu), weight);
            break;
        case RedistStrategy::OsupShift:
            p.mu = compute_midpoint_mu(activation);
            p.epsilon = compute_sq_epsilon(shifted(activation, p.mu), weight);
            break;
        case RedistStrategy::OsupSmooth: {
            p.mu = compute_sqb_mu(activation);
            const auto grid = default_t_grid(activation, p.mu);
            p.epsilon = compute_osup_epsilon(activation, p.mu, grid, bits);
            break;
        }
    }
    return p;
}

FusedPair fuse(const LayerNormParams& norm, const Linear& linear, const RedistParams& params) {
    const std::size_t c = norm.gamma.size();
    if (norm.beta.size() != c || linear.weight.rank() != 2 || linear.in_features() != c)
        throw DimensionError("LayerNorm and linear layer dimensions are inconsistent");
    params.validate(c);
    if (params.strategy == RedistStrategy::None) return FusedPair{norm, linear};

    FusedPair out{norm, linear};
    for (std::size_t j = 0; j < c; ++j) {
        const double e = params.epsilon[j];
        out.norm.gamma[j] = static_cast<float>(norm.gamma[j] / e);
        out.norm.beta[j] = static_cast<float>((static_cast<double>(norm.beta[j]) - params.mu[j]) / e);
    }
    const std::size_t rows = linear.out_features();
    for (std::size_t o = 0; o < rows; ++o) {
        double shift = 0.0;
        for (std::size_t j = 0; j < c; ++j) {
            const double w = linear.weight[o * c + j];
            shift += w * params.mu[j];
            out.linear.weight[o * c + j] = static_cast<float>(w * params.epsilon[j]);
        }
        out.linear.bias[o] = static_cast<float>(linear.bias[o] + shift);
    }
    return out;
}

Tensor transform_activation(const Tensor& activation, const RedistParams& params) {
    const std::size_t c = activation.channels();
    params.validate(c);
    Tensor out(activation.shape());
    for (std::size_t i = 0; i < activation.size(); ++i) {
        const std::size_t j = i % c;
        out[i] = static_cast<float>((static_cast<double>(activation[i]) - params.mu[j]) / params.epsilon[j]);
    }
    return out;
}

double clamping_loss(std::span<const float> x, const QuantSpec& spec) {
    const double hi = spec.scale * spec.max_code();
    const double lo = spec.scale * -spec.min_code();
    double loss = 0.0;
    for (float v : x) {
        if (v > hi) {
            loss += (v - hi) * (v - hi);
        } else if (-v > lo) {
            const double d = -static_cast<double>(v) - lo;
            loss += d * d;
        }
    }
    return loss;
}

std::vector<Site> redistribution_targets(const ModelConfig& config, bool include_head) {
    std::vector<Site> out;
    for (int b = 0; b < static_cast<int>(config.depth); ++b) {
        out.push_back({SiteKind::QkvIn, b});
        out.push_back({SiteKind::Fc1In, b});
    }
    if (include_head) out.push_back({SiteKind::HeadIn, -1});
    return out;
}

void apply_redistribution(ToyViT& model, const Site& target, const RedistParams& params) {
    auto rewrite = [&](LayerNormParams& norm, Linear& lin) {
        FusedPair f = fuse(norm, lin, params);
        norm = std::move(f.norm);
        lin = std::move(f.linear);
    };
    auto block = [&]() -> EncoderBlock& {
        if (target.block < 0 || static_cast<std::size_t>(target.block) >= model.blocks.size())
            throw LookupError("redistribution target '" + target.id() + "' refers to a missing block");
        return model.blocks[static_cast<std::size_t>(target.block)];
    };
    switch (target.kind) {
        case SiteKind::QkvIn:
            rewrite(block().ln1, block().qkv);
            break;
        case SiteKind::Fc1In:
            rewrite(block().ln2, block().fc1);
            break;
        case SiteKind::HeadIn:
            rewrite(model.final_norm, model.head);
            break;
        default:
            throw LookupError("site '" + target.id() + "' does not follow a LayerNorm");
    }
}

nlohmann::json to_json(const RedistParams& p) {
    return nlohmann::json{{"strategy", to_string(p.strategy)}, {"epsilon", p.epsilon}, {"mu", p.mu}};
}

RedistParams redist_params_from_json(const nlohmann::json& j) {
    RedistParams p;
    p.strategy = parse_redist_strategy(j.at("strategy").get<std::string>());
    p.epsilon = j.at("epsilon").get<std::vector<float>>();
    p.mu = j.at("mu").get<std::vector<float>>();
    p.validate(p.epsilon.size());
    return p;
}

}  // namespace mptq
