#include "mptq/model.hpp"

#include <cmath>
#include <random>

#include "mptq/error.hpp"

namespace mptq {

namespace {

struct SiteName {
    SiteKind kind;
    const char* suffix;
    bool in_block;
};

constexpr SiteName kSiteNames[] = {
    {SiteKind::PatchEmbedIn, "patch_embed.in", false}, {SiteKind::PatchEmbedW, "patch_embed.w", false},
    {SiteKind::QkvIn, "qkv.in", true},                 {SiteKind::QkvW, "qkv.w", true},
    {SiteKind::AttnQ, "attn.q", true},                 {SiteKind::AttnK, "attn.k", true},
    {SiteKind::AttnProbs, "attn.probs", true},         {SiteKind::AttnV, "attn.v", true},
    {SiteKind::ProjIn, "proj.in", true},               {SiteKind::ProjW, "proj.w", true},
    {SiteKind::Fc1In, "fc1.in", true},                 {SiteKind::Fc1W, "fc1.w", true},
    {SiteKind::Fc2In, "fc2.in", true},                 {SiteKind::Fc2W, "fc2.w", true},
    {SiteKind::HeadIn, "head.in", false},              {SiteKind::HeadW, "head.w", false},
    {SiteKind::Ln1In, "ln1.in", true},                 {SiteKind::Ln2In, "ln2.in", true},
    {SiteKind::SoftmaxIn, "attn.scores", true},        {SiteKind::FinalNormIn, "final_norm.in", false},
};

const SiteName& name_of(SiteKind kind) {
    for (const auto& n : kSiteNames)
        if (n.kind == kind) return n;
    throw LookupError("unknown site kind");
}

class Init {
public:
    explicit Init(std::uint64_t seed) : rng_(seed) {}

    float normal(double stddev) { return static_cast<float>(dist_(rng_) * stddev); }

    Linear linear(std::size_t in, std::size_t out) {
        Linear l;
        std::vector<float> w(in * out);
        const double scale = 1.0 / std::sqrt(static_cast<double>(in));
        for (auto& v : w) v = normal(scale);
        l.weight = Tensor({out, in}, std::move(w));
        l.bias.resize(out);
        for (auto& v : l.bias) v = normal(0.02);
        return l;
    }

    LayerNormParams norm(std::size_t channels) {
        LayerNormParams p;
        p.gamma.resize(channels);
        p.beta.resize(channels);
        for (std::size_t j = 0; j < channels; ++j) {
            p.gamma[j] = 1.0f + normal(0.1);
            p.beta[j] = normal(0.3);
        }
        // Outlier channels: a handful with large gain and a systematic offset.
        std::uniform_int_distribution<std::size_t> pick(0, channels - 1);
        const std::size_t outliers = std::max<std::size_t>(1, channels / 8);
        for (std::size_t i = 0; i < outliers; ++i) {
            const std::size_t j = pick(rng_);
            p.gamma[j] *= 3.0f + std::fabs(normal(2.0));
            p.beta[j] += (i % 2 == 0 ? 1.0f : -1.0f) * (1.0f + std::fabs(normal(1.0)));
        }
        return p;
    }

private:
    std::mt19937_64 rng_;
    std::normal_distribution<double> dist_{0.0, 1.0};
};

void check_norm(const LayerNormParams& p, std::size_t channels, const char* what) {
    if (p.gamma.size() != channels || p.beta.size() != channels)
        throw DimensionError(std::string(what) + ": gamma/beta length must equal " + std::to_string(channels));
}

void check_linear(const Linear& l, std::size_t in, std::size_t out, const char* what) {
    if (l.weight.rank() != 2 || l.weight.dim(0) != out || l.weight.dim(1) != in || l.bias.size() != out)
        throw DimensionError(std::string(what) + ": expected weight (" + std::to_string(out) + ", " +
                             std::to_string(in) + ")");
}

void run_hook(const ActivationHook& hook, SiteKind kind, int block, Tensor& t) {
    if (hook) hook(Site{kind, block}, t);
}

// (B, T, 3E) -> three (B*H, T, d) tensors flattened per head.
struct Heads {
    Tensor q, k, v;
};

Heads split_heads(const Tensor& qkv, std::size_t heads) {
    const std::size_t b = qkv.dim(0), t = qkv.dim(1), e3 = qkv.dim(2);
    const std::size_t e = e3 / 3, d = e / heads;
    Heads out{Tensor({b, heads, t, d}), Tensor({b, heads, t, d}), Tensor({b, heads, t, d})};
    auto src = qkv.data();
    for (std::size_t bi = 0; bi < b; ++bi)
        for (std::size_t ti = 0; ti < t; ++ti)
            for (std::size_t h = 0; h < heads; ++h)
                for (std::size_t di = 0; di < d; ++di) {
                    const std::size_t dst = ((bi * heads + h) * t + ti) * d + di;
                    const std::size_t base = (bi * t + ti) * e3 + h * d + di;
                    out.q[dst] = src[base];
                    out.k[dst] = src[base + e];
                    out.v[dst] = src[base + 2 * e];
                }
    return out;
}

Tensor attention_scores(const Tensor& q, const Tensor& k) {
    const std::size_t bh = q.dim(0) * q.dim(1), t = q.dim(2), d = q.dim(3);
    Tensor s({q.dim(0), q.dim(1), t, t});
    const double scale = 1.0 / std::sqrt(static_cast<double>(d));
    for (std::size_t g = 0; g < bh; ++g)
        for (std::size_t i = 0; i < t; ++i)
            for (std::size_t j = 0; j < t; ++j) {
                double acc = 0.0;
                for (std::size_t di = 0; di < d; ++di)
                    acc += static_cast<double>(q[(g * t + i) * d + di]) * k[(g * t + j) * d + di];
                s[(g * t + i) * t + j] = static_cast<float>(acc * scale);
            }
    return s;
}

// probs (B, H, T, T) * v (B, H, T, d) -> merged (B, T, H*d)
Tensor attention_output(const Tensor& probs, const Tensor& v) {
    const std::size_t b = v.dim(0), heads = v.dim(1), t = v.dim(2), d = v.dim(3);
    Tensor out({b, t, heads * d});
    for (std::size_t bi = 0; bi < b; ++bi)
        for (std::size_t h = 0; h < heads; ++h) {
            const std::size_t g = bi * heads + h;
            for (std::size_t i = 0; i < t; ++i)
                for (std::size_t di = 0; di < d; ++di) {
                    double acc = 0.0;
                    for (std::size_t j = 0; j < t; ++j)
                        acc += static_cast<double>(probs[(g * t + i) * t + j]) * v[(g * t + j) * d + di];
                    out[(bi * t + i) * heads * d + h * d + di] = static_cast<float>(acc);
                }
        }
    return out;
}

Tensor residual_add(const Tensor& a, const Tensor& b) { return add(a, b); }

Tensor take_first_token(const Tensor& x) {
    const std::size_t b = x.dim(0), t = x.dim(1), e = x.dim(2);
    Tensor out({b, e});
    for (std::size_t bi = 0; bi < b; ++bi)
        for (std::size_t j = 0; j < e; ++j) out[bi * e + j] = x[bi * t * e + j];
    return out;
}

Tensor apply_norm(const Tensor& x, const LayerNormParams& p) { return layer_norm(x, p.gamma, p.beta, kLayerNormEps); }

}  // namespace

// ---------------------------------------------------------------------------

bool Site::is_weight() const {
    switch (kind) {
        case SiteKind::PatchEmbedW:
        case SiteKind::QkvW:
        case SiteKind::ProjW:
        case SiteKind::Fc1W:
        case SiteKind::Fc2W:
        case SiteKind::HeadW:
            return true;
        default:
            return false;
    }
}

std::string Site::id() const {
    const auto& n = name_of(kind);
    if (n.in_block) return "blocks." + std::to_string(block) + "." + n.suffix;
    return n.suffix;
}

Site parse_site(const std::string& id) {
    if (id.rfind("blocks.", 0) == 0) {
        const auto dot = id.find('.', 7);
        if (dot == std::string::npos) throw LookupError("unknown site '" + id + "'");
        int block = 0;
        try {
            block = std::stoi(id.substr(7, dot - 7));
        } catch (const std::exception&) {
            throw LookupError("unknown site '" + id + "'");
        }
        const std::string suffix = id.substr(dot + 1);
        for (const auto& n : kSiteNames)
            if (n.in_block && suffix == n.suffix) return Site{n.kind, block};
        throw LookupError("unknown site '" + id + "'");
    }
    for (const auto& n : kSiteNames)
        if (!n.in_block && id == n.suffix) return Site{n.kind, -1};
    throw LookupError("unknown site '" + id + "'");
}

bool is_operator_input_site(SiteKind kind) {
    return kind == SiteKind::Ln1In || kind == SiteKind::Ln2In || kind == SiteKind::SoftmaxIn ||
           kind == SiteKind::FinalNormIn;
}

std::vector<Site> quantizable_sites(const ModelConfig& config, bool fully_quantized) {
    std::vector<Site> sites{{SiteKind::PatchEmbedIn, -1}, {SiteKind::PatchEmbedW, -1}};
    for (int b = 0; b < static_cast<int>(config.depth); ++b) {
        if (fully_quantized) sites.push_back({SiteKind::Ln1In, b});
        sites.push_back({SiteKind::QkvIn, b});
        sites.push_back({SiteKind::QkvW, b});
        sites.push_back({SiteKind::AttnQ, b});
        sites.push_back({SiteKind::AttnK, b});
        if (fully_quantized) sites.push_back({SiteKind::SoftmaxIn, b});
        sites.push_back({SiteKind::AttnProbs, b});
        sites.push_back({SiteKind::AttnV, b});
        sites.push_back({SiteKind::ProjIn, b});
        sites.push_back({SiteKind::ProjW, b});
        if (fully_quantized) sites.push_back({SiteKind::Ln2In, b});
        sites.push_back({SiteKind::Fc1In, b});
        sites.push_back({SiteKind::Fc1W, b});
        sites.push_back({SiteKind::Fc2In, b});
        sites.push_back({SiteKind::Fc2W, b});
    }
    if (fully_quantized) sites.push_back({SiteKind::FinalNormIn, -1});
    sites.push_back({SiteKind::HeadIn, -1});
    sites.push_back({SiteKind::HeadW, -1});
    return sites;
}

namespace {

template <typename Model>
auto& weight_ref(Model& model, const Site& site) {
    auto block = [&]() -> auto& {
        if (site.block < 0 || static_cast<std::size_t>(site.block) >= model.blocks.size())
            throw LookupError("site '" + site.id() + "' refers to a missing block");
        return model.blocks[static_cast<std::size_t>(site.block)];
    };
    switch (site.kind) {
        case SiteKind::PatchEmbedW:
            return model.patch_embed.weight;
        case SiteKind::QkvW:
            return block().qkv.weight;
        case SiteKind::ProjW:
            return block().proj.weight;
        case SiteKind::Fc1W:
            return block().fc1.weight;
        case SiteKind::Fc2W:
            return block().fc2.weight;
        case SiteKind::HeadW:
            return model.head.weight;
        default:
            throw LookupError("site '" + site.id() + "' is not a weight site");
    }
}

}  // namespace

const Tensor& weight_of(const ToyViT& model, const Site& site) { return weight_ref(model, site); }
Tensor& weight_of(ToyViT& model, const Site& site) { return weight_ref(model, site); }

// ---------------------------------------------------------------------------

void validate(const ToyViT& model) {
    const auto& c = model.config;
    if (c.embed_dim == 0 || c.heads == 0 || c.embed_dim % c.heads != 0)
        throw DimensionError("embed_dim must be a positive multiple of heads");
    check_linear(model.patch_embed, c.patch_dim, c.embed_dim, "patch_embed");
    if (model.blocks.size() != c.depth) throw DimensionError("block count does not match depth");
    for (const auto& b : model.blocks) {
        check_norm(b.ln1, c.embed_dim, "ln1");
        check_norm(b.ln2, c.embed_dim, "ln2");
        check_linear(b.qkv, c.embed_dim, 3 * c.embed_dim, "qkv");
        check_linear(b.proj, c.embed_dim, c.embed_dim, "proj");
        check_linear(b.fc1, c.embed_dim, c.mlp_dim, "fc1");
        check_linear(b.fc2, c.mlp_dim, c.embed_dim, "fc2");
        if (b.heads != c.heads) throw DimensionError("block head count does not match config");
    }
    check_norm(model.final_norm, c.embed_dim, "final_norm");
    check_linear(model.head, c.embed_dim, c.classes, "head");
}

ToyViT make_toy_vit(const ModelConfig& config, std::uint64_t seed) {
    Init init(seed);
    ToyViT m;
    m.config = config;
    m.patch_embed = init.linear(config.patch_dim, config.embed_dim);
    for (std::size_t i = 0; i < config.depth; ++i) {
        EncoderBlock b;
        b.heads = config.heads;
        b.ln1 = init.norm(config.embed_dim);
        b.qkv = init.linear(config.embed_dim, 3 * config.embed_dim);
        b.proj = init.linear(config.embed_dim, config.embed_dim);
        b.ln2 = init.norm(config.embed_dim);
        b.fc1 = init.linear(config.embed_dim, config.mlp_dim);
        b.fc2 = init.linear(config.mlp_dim, config.embed_dim);
        m.blocks.push_back(std::move(b));
    }
    m.final_norm = init.norm(config.embed_dim);
    m.head = init.linear(config.embed_dim, config.classes);
    validate(m);
    return m;
}

Tensor forward(const ToyViT& model, const Tensor& input, const ActivationHook& hook) {
    const auto& c = model.config;
    if (input.rank() != 3 || input.dim(2) != c.patch_dim)
        throw DimensionError("model input must be (batch, tokens, " + std::to_string(c.patch_dim) + "), got " +
                             shape_to_string(input.shape()));

    Tensor x = input;
    run_hook(hook, SiteKind::PatchEmbedIn, -1, x);
    Tensor h = linear(x, model.patch_embed.weight, model.patch_embed.bias);

    for (std::size_t bi = 0; bi < model.blocks.size(); ++bi) {
        const auto& blk = model.blocks[bi];
        const int b = static_cast<int>(bi);

        Tensor a;
        if (hook) {
            Tensor t = h;
            run_hook(hook, SiteKind::Ln1In, b, t);
            a = apply_norm(t, blk.ln1);
        } else {
            a = apply_norm(h, blk.ln1);
        }
        run_hook(hook, SiteKind::QkvIn, b, a);
        Heads qkv = split_heads(linear(a, blk.qkv.weight, blk.qkv.bias), blk.heads);
        run_hook(hook, SiteKind::AttnQ, b, qkv.q);
        run_hook(hook, SiteKind::AttnK, b, qkv.k);
        Tensor scores = attention_scores(qkv.q, qkv.k);
        run_hook(hook, SiteKind::SoftmaxIn, b, scores);
        Tensor probs = softmax(scores);
        run_hook(hook, SiteKind::AttnProbs, b, probs);
        run_hook(hook, SiteKind::AttnV, b, qkv.v);
        Tensor o = attention_output(probs, qkv.v);
        run_hook(hook, SiteKind::ProjIn, b, o);
        h = residual_add(h, linear(o, blk.proj.weight, blk.proj.bias));

        Tensor a2;
        if (hook) {
            Tensor t = h;
            run_hook(hook, SiteKind::Ln2In, b, t);
            a2 = apply_norm(t, blk.ln2);
        } else {
            a2 = apply_norm(h, blk.ln2);
        }
        run_hook(hook, SiteKind::Fc1In, b, a2);
        Tensor g = gelu(linear(a2, blk.fc1.weight, blk.fc1.bias));
        run_hook(hook, SiteKind::Fc2In, b, g);
        h = residual_add(h, linear(g, blk.fc2.weight, blk.fc2.bias));
    }

    Tensor n;
    if (hook) {
        Tensor t = h;
        run_hook(hook, SiteKind::FinalNormIn, -1, t);
        n = apply_norm(t, model.final_norm);
    } else {
        n = apply_norm(h, model.final_norm);
    }
    Tensor cls = take_first_token(n);
    run_hook(hook, SiteKind::HeadIn, -1, cls);
    return linear(cls, model.head.weight, model.head.bias);
}

TappedForward forward_with_taps(const ToyViT& model, const Tensor& input, const std::vector<std::string>& tap_ids) {
    std::map<Site, std::string> wanted;
    TappedForward out;
    for (const auto& id : tap_ids) {
        const Site s = parse_site(id);
        if (s.block >= static_cast<int>(model.blocks.size())) throw LookupError("unknown site '" + id + "'");
        if (s.is_weight())
            out.taps.emplace(id, weight_of(model, s));
        else
            wanted.emplace(s, id);
    }
    ActivationHook hook;
    if (!wanted.empty()) {
        hook = [&](const Site& s, Tensor& t) {
            auto it = wanted.find(s);
            if (it != wanted.end()) out.taps.insert_or_assign(it->second, t);
        };
    }
    out.logits = forward(model, input, hook);
    return out;
}

}  // namespace mptq
