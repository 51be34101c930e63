#include "mptq/io.hpp"

#include <random>

#include "mptq/error.hpp"

namespace mptq {

namespace {

void put_linear(Container& c, const std::string& name, const Linear& l) {
    c.put(name + ".weight", l.weight);
    c.put(name + ".bias", l.bias);
}

void put_norm(Container& c, const std::string& name, const LayerNormParams& p) {
    c.put(name + ".gamma", p.gamma);
    c.put(name + ".beta", p.beta);
}

Linear get_linear(const Container& c, const std::string& name) {
    return Linear{c.tensor(name + ".weight"), c.vector(name + ".bias")};
}

LayerNormParams get_norm(const Container& c, const std::string& name) {
    return LayerNormParams{c.vector(name + ".gamma"), c.vector(name + ".beta")};
}

}  // namespace

nlohmann::json to_json(const ModelConfig& c) {
    return nlohmann::json{{"patch_dim", c.patch_dim}, {"embed_dim", c.embed_dim}, {"depth", c.depth},
                          {"heads", c.heads},         {"mlp_dim", c.mlp_dim},     {"classes", c.classes}};
}

ModelConfig model_config_from_json(const nlohmann::json& j) {
    ModelConfig c;
    c.patch_dim = j.value("patch_dim", c.patch_dim);
    c.embed_dim = j.value("embed_dim", c.embed_dim);
    c.depth = j.value("depth", c.depth);
    c.heads = j.value("heads", c.heads);
    c.mlp_dim = j.value("mlp_dim", c.mlp_dim);
    c.classes = j.value("classes", c.classes);
    return c;
}

Container model_to_container(const ToyViT& model) {
    Container c;
    c.metadata = {{"kind", "toy-vit"}, {"config", to_json(model.config)}};
    put_linear(c, "patch_embed", model.patch_embed);
    for (std::size_t i = 0; i < model.blocks.size(); ++i) {
        const auto& b = model.blocks[i];
        const std::string p = "blocks." + std::to_string(i) + ".";
        put_norm(c, p + "ln1", b.ln1);
        put_norm(c, p + "ln2", b.ln2);
        put_linear(c, p + "qkv", b.qkv);
        put_linear(c, p + "proj", b.proj);
        put_linear(c, p + "fc1", b.fc1);
        put_linear(c, p + "fc2", b.fc2);
    }
    put_norm(c, "final_norm", model.final_norm);
    put_linear(c, "head", model.head);
    return c;
}

ToyViT model_from_container(const Container& c) {
    if (!c.metadata.contains("config")) throw IoError("container does not describe a model");
    ToyViT m;
    m.config = model_config_from_json(c.metadata.at("config"));
    m.patch_embed = get_linear(c, "patch_embed");
    for (std::size_t i = 0; i < m.config.depth; ++i) {
        const std::string p = "blocks." + std::to_string(i) + ".";
        EncoderBlock b;
        b.heads = m.config.heads;
        b.ln1 = get_norm(c, p + "ln1");
        b.ln2 = get_norm(c, p + "ln2");
        b.qkv = get_linear(c, p + "qkv");
        b.proj = get_linear(c, p + "proj");
        b.fc1 = get_linear(c, p + "fc1");
        b.fc2 = get_linear(c, p + "fc2");
        m.blocks.push_back(std::move(b));
    }
    m.final_norm = get_norm(c, "final_norm");
    m.head = get_linear(c, "head");
    validate(m);
    return m;
}

void save_model(const std::filesystem::path& path, const ToyViT& model) { save_container(path, model_to_container(model)); }

ToyViT load_model(const std::filesystem::path& path) { return model_from_container(load_container(path)); }

Tensor make_synthetic_tokens(std::size_t samples, std::size_t tokens, std::size_t patch_dim, std::uint64_t seed) {
    std::mt19937_64 rng(seed);
    std::normal_distribution<double> normal(0.0, 1.0);
    std::uniform_real_distribution<double> unit(0.0, 1.0);

    std::vector<double> shift(patch_dim), spread(patch_dim), alt(patch_dim);
    for (std::size_t j = 0; j < patch_dim; ++j) {
        shift[j] = 0.5 * normal(rng);
        spread[j] = 0.5 + unit(rng);
        alt[j] = 1.5 * normal(rng);
    }
    for (std::size_t j = 0; j < patch_dim; j += 7) spread[j] *= 4.0;

    Tensor x({samples, tokens, patch_dim});
    for (std::size_t s = 0; s < samples; ++s)
        for (std::size_t t = 0; t < tokens; ++t) {
            const bool second = unit(rng) < 0.3;
            for (std::size_t j = 0; j < patch_dim; ++j) {
                const double mean = shift[j] + (second ? alt[j] : 0.0);
                x[(s * tokens + t) * patch_dim + j] = static_cast<float>(mean + spread[j] * normal(rng));
            }
        }
    return x;
}

void save_tokens(const std::filesystem::path& path, const Tensor& tokens) {
    Container c;
    c.metadata = {{"kind", "tokens"}};
    c.put("tokens", tokens);
    save_container(path, c);
}

Tensor load_tokens(const std::filesystem::path& path) {
    Tensor t = load_container(path).tensor("tokens");
    if (t.rank() != 3) throw IoError("token data must be (samples, tokens, patch_dim)");
    return t;
}

Tensor slice_batch(const Tensor& x, std::size_t begin, std::size_t count) {
    if (x.rank() == 0 || begin + count > x.dim(0) || count == 0) throw DimensionError("batch slice out of range");
    const std::size_t stride = x.size() / x.dim(0);
    Shape s = x.shape();
    s[0] = count;
    std::vector<float> v(x.data().begin() + static_cast<std::ptrdiff_t>(begin * stride),
                         x.data().begin() + static_cast<std::ptrdiff_t>((begin + count) * stride));
    return Tensor(std::move(s), std::move(v));
}

Tensor gather_batch(const Tensor& x, const std::vector<std::size_t>& rows) {
    if (x.rank() == 0 || rows.empty()) throw DimensionError("gather needs a batched tensor and rows");
    const std::size_t stride = x.size() / x.dim(0);
    Shape s = x.shape();
    s[0] = rows.size();
    std::vector<float> v;
    v.reserve(rows.size() * stride);
    for (auto r : rows) {
        if (r >= x.dim(0)) throw DimensionError("gather row out of range");
        v.insert(v.end(), x.data().begin() + static_cast<std::ptrdiff_t>(r * stride),
                 x.data().begin() + static_cast<std::ptrdiff_t>((r + 1) * stride));
    }
    return Tensor(std::move(s), std::move(v));
}

}  // namespace mptq
