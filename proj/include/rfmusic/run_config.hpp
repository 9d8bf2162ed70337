#pragma once

#include <json.hpp>

#include <filesystem>
#include <fstream>
#include <string>

#include "conditioning.hpp"
#include "dataset.hpp"
#include "errors.hpp"
#include "model_config.hpp"
#include "trainer.hpp"

namespace rfm {

inline nlohmann::json to_json(const ModelConfig& c) {
    return {{"name", c.name},           {"double_blocks", c.double_blocks}, {"single_blocks", c.single_blocks},
            {"width", c.width},         {"heads", c.heads},                 {"patch", c.patch},
            {"channels", c.channels},   {"mlp_ratio", c.mlp_ratio},         {"d_fine", c.d_fine},
            {"d_coarse", c.d_coarse},   {"t_emb_dim", c.t_emb_dim},         {"latent_h", c.latent_h},
            {"latent_w", c.latent_w},   {"rope_theta", c.rope_theta},       {"norm_eps", c.norm_eps}};
}

inline void merge_json(ModelConfig& c, const nlohmann::json& j) {
    if (j.contains("preset")) c = preset(j["preset"].get<std::string>());
    c.name = j.value("name", c.name);
    c.double_blocks = j.value("double_blocks", c.double_blocks);
    c.single_blocks = j.value("single_blocks", c.single_blocks);
    c.width = j.value("width", c.width);
    c.heads = j.value("heads", c.heads);
    c.patch = j.value("patch", c.patch);
    c.channels = j.value("channels", c.channels);
    c.mlp_ratio = j.value("mlp_ratio", c.mlp_ratio);
    c.d_fine = j.value("d_fine", c.d_fine);
    c.d_coarse = j.value("d_coarse", c.d_coarse);
    c.t_emb_dim = j.value("t_emb_dim", c.t_emb_dim);
    c.latent_h = j.value("latent_h", c.latent_h);
    c.latent_w = j.value("latent_w", c.latent_w);
    c.rope_theta = j.value("rope_theta", c.rope_theta);
    c.norm_eps = j.value("norm_eps", c.norm_eps);
}

/// Where training latents come from and how captions are encoded.
struct DataConfig {
    std::string manifest;  // empty: generate a synthetic manifest
    std::size_t train_size = 1024;
    SynthRecipe recipe;
    double original_ratio = 0.2;
    std::uint64_t codec_seed = 0;
    std::uint64_t encoder_seed = 0;
    std::size_t max_text_len = 32;
    std::size_t vocab_buckets = 4096;

    bool operator==(const DataConfig& o) const {
        return manifest == o.manifest && train_size == o.train_size && recipe.seed == o.recipe.seed &&
               recipe.noise == o.recipe.noise && original_ratio == o.original_ratio && codec_seed == o.codec_seed &&
               encoder_seed == o.encoder_seed && max_text_len == o.max_text_len && vocab_buckets == o.vocab_buckets;
    }
};

inline nlohmann::json to_json(const DataConfig& d) {
    return {{"manifest", d.manifest},         {"train_size", d.train_size}, {"recipe", d.recipe.to_json()},
            {"original_ratio", d.original_ratio}, {"codec_seed", d.codec_seed}, {"encoder_seed", d.encoder_seed},
            {"max_text_len", d.max_text_len}, {"vocab_buckets", d.vocab_buckets}};
}

inline void merge_json(DataConfig& d, const nlohmann::json& j) {
    d.manifest = j.value("manifest", d.manifest);
    d.train_size = j.value("train_size", d.train_size);
    if (j.contains("recipe")) d.recipe = SynthRecipe::from_json(j["recipe"]);
    d.original_ratio = j.value("original_ratio", d.original_ratio);
    d.codec_seed = j.value("codec_seed", d.codec_seed);
    d.encoder_seed = j.value("encoder_seed", d.encoder_seed);
    d.max_text_len = j.value("max_text_len", d.max_text_len);
    d.vocab_buckets = j.value("vocab_buckets", d.vocab_buckets);
}

struct RunConfig {
    ModelConfig model = preset("toy");
    TrainConfig train;
    DataConfig data;
    std::size_t checkpoint_every = 1000;

    EncoderStubConfig encoder_config() const {
        EncoderStubConfig e;
        e.vocab_hash_buckets = data.vocab_buckets;
        e.d_fine = model.d_fine;
        e.d_coarse = model.d_coarse;
        e.max_text_len = data.max_text_len;
        e.seed = data.encoder_seed;
        return e;
    }

    void validate() const {
        model.validate();
        train.validate();
        encoder_config().validate();
        if (model.latent_h != kLatentH || model.latent_w != kLatentW)
            throw ConfigError("model latent must be 16x128 to match the codec");
        if (data.train_size == 0 && data.manifest.empty()) throw ConfigError("train_size must be positive");
    }
};

inline nlohmann::json to_json(const RunConfig& r) {
    return {{"model", to_json(r.model)},
            {"train", to_json(r.train)},
            {"data", to_json(r.data)},
            {"checkpoint_every", r.checkpoint_every}};
}

inline void merge_json(RunConfig& r, const nlohmann::json& j) {
    if (j.contains("model")) merge_json(r.model, j["model"]);
    if (j.contains("train")) merge_json(r.train, j["train"]);
    if (j.contains("data")) merge_json(r.data, j["data"]);
    r.checkpoint_every = j.value("checkpoint_every", r.checkpoint_every);
}

inline RunConfig run_config_from_json(const nlohmann::json& j) {
    RunConfig r;
    merge_json(r, j);
    return r;
}

inline RunConfig load_run_config(const std::filesystem::path& path) {
    std::ifstream is(path);
    if (!is) throw InputError("cannot open config " + path.string());
    try {
        return run_config_from_json(nlohmann::json::parse(is));
    } catch (const nlohmann::json::exception& e) {
        throw InputError(path.string() + ": " + e.what());
    }
}

/// Training latents and captions described by `r.data`, plus their stats.
struct PreparedData {
    TrainData train;
    LatentStats stats;
};

inline PreparedData prepare_data(const RunConfig& r, const std::filesystem::path& manifest_root = {}) {
    ToyCodec codec(r.model.channels, r.data.codec_seed);
    DatasetManifest m = r.data.manifest.empty()
                            ? synth_manifest(r.data.recipe, r.data.train_size, r.data.original_ratio)
                            : DatasetManifest::load(r.data.manifest);
    auto root = manifest_root.empty() && !r.data.manifest.empty() ? std::filesystem::path(r.data.manifest).parent_path()
                                                                   : manifest_root;
    auto examples = load_examples(m, codec, root);
    PreparedData out;
    out.stats = compute_latent_stats(examples);
    out.train = make_train_data(examples, out.stats, TextEncoders(r.encoder_config()));
    return out;
}

}  // namespace rfm
