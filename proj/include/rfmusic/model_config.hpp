#pragma once

#include <array>
#include <cstdint>
#include <string>
#include <string_view>
#include <vector>

#include "errors.hpp"

namespace rfm {

/// Architecture hyperparameters. `double_blocks`/`single_blocks`/`width`/
/// `heads` are the scaling knobs; the rest fixes the token geometry and the
/// conditioning widths.
struct ModelConfig {
    std::string name = "custom";
    std::size_t double_blocks = 1;
    std::size_t single_blocks = 1;
    std::size_t width = 64;
    std::size_t heads = 4;
    std::size_t patch = 2;
    std::size_t channels = 8;
    std::size_t mlp_ratio = 4;
    std::size_t d_fine = 256;
    std::size_t d_coarse = 64;
    std::size_t t_emb_dim = 256;
    std::size_t latent_h = 16;
    std::size_t latent_w = 128;
    double rope_theta = 10000.0;
    double norm_eps = 1e-6;

    std::size_t head_dim() const { return width / heads; }
    std::size_t grid_h() const { return latent_h / patch; }
    std::size_t grid_w() const { return latent_w / patch; }
    std::size_t music_tokens() const { return grid_h() * grid_w(); }
    std::size_t patch_dim() const { return patch * patch * channels; }

    void validate() const {
        if (width == 0 || heads == 0 || patch == 0 || channels == 0 || mlp_ratio == 0)
            throw ConfigError("model dimensions must be positive");
        if (width % heads != 0)
            throw ConfigError("width " + std::to_string(width) + " not divisible by heads " + std::to_string(heads));
        if (head_dim() % 4 != 0)
            throw ConfigError("head_dim " + std::to_string(head_dim()) + " must be divisible by 4 for two-axis rotary");
        if (latent_h % patch != 0 || latent_w % patch != 0)
            throw ConfigError("latent " + std::to_string(latent_h) + "x" + std::to_string(latent_w) +
                              " not divisible by patch " + std::to_string(patch));
        if (t_emb_dim % 2 != 0) throw ConfigError("t_emb_dim must be even");
        if (d_fine == 0 || d_coarse == 0) throw ConfigError("conditioning widths must be positive");
    }

    bool operator==(const ModelConfig&) const = default;
};

namespace detail {

// Scaling presets use the real encoder widths (T5-XXL hidden 4096, CLAP
// pooled 768); the parameter counts depend on them through the text and
// vector embedders.
inline ModelConfig scaled_preset(std::string name, std::size_t m, std::size_t n, std::size_t d, std::size_t h) {
    ModelConfig c;
    c.name = std::move(name);
    c.double_blocks = m;
    c.single_blocks = n;
    c.width = d;
    c.heads = h;
    c.patch = 2;
    c.channels = 8;
    c.d_fine = 4096;
    c.d_coarse = 768;
    c.t_emb_dim = 256;
    return c;
}

}  // namespace detail

inline std::vector<std::string> preset_names() { return {"small", "base", "large", "giant", "15d0s", "toy"}; }

inline ModelConfig preset(std::string_view name) {
    if (name == "small") return detail::scaled_preset("small", 8, 16, 512, 16);
    if (name == "base") return detail::scaled_preset("base", 12, 24, 768, 16);
    if (name == "large") return detail::scaled_preset("large", 12, 24, 1024, 16);
    if (name == "giant") return detail::scaled_preset("giant", 16, 32, 1408, 16);
    if (name == "15d0s") return detail::scaled_preset("15d0s", 15, 0, 512, 16);
    if (name == "toy") {
        ModelConfig c;
        c.name = "toy";
        c.double_blocks = 2;
        c.single_blocks = 4;
        c.width = 64;
        c.heads = 4;
        c.patch = 4;
        c.channels = 4;
        c.d_fine = 256;
        c.d_coarse = 64;
        c.t_emb_dim = 256;
        return c;
    }
    throw ConfigError("unknown preset '" + std::string(name) + "'");
}

/// Published sizes for the four scaling presets and the all-double variant.
struct ReferenceSize {
    std::string_view preset;
    double params_m;
    double gflops;  // 0 when not published
};

inline constexpr std::array<ReferenceSize, 5> kReferenceSizes{{
    {"small", 142.3, 194.5},
    {"base", 473.9, 654.4},
    {"large", 840.6, 1162.6},
    {"giant", 2109.9, 2928.0},
    {"15d0s", 145.5, 0.0},
}};

struct ParamBreakdown {
    std::uint64_t embedders = 0;
    std::uint64_t per_double_block = 0;
    std::uint64_t per_single_block = 0;
    std::uint64_t final_layer = 0;
    std::uint64_t total = 0;
};

/// Closed-form parameter count; allocates nothing.
///
/// Per double block (two modalities, each with its own weights):
///   2 * [ 2d (pre-norm gains) + 3d^2+3d (qkv) + 2*dh (q/k gains) + d^2+d (proj)
///         + r d^2 + r d + r d^2 + d (MLP) + 6d^2+6d (modulation) ]
///   = 2 * [(10 + 2r) d^2 + (13 + r) d + 2 dh]  ->  36 d^2 + ... for r = 4
/// Per single block:
///   d (pre-norm) + (3+r) d^2 + (3+r) d (fused in) + 2 dh + (1+r) d^2 + d (fused out)
///   + 3d^2 + 3d (modulation)  =  (7 + 2r) d^2 + (8 + r) d + 2 dh  ->  15 d^2 + ...
inline ParamBreakdown count_params_breakdown(const ModelConfig& c) {
    const std::uint64_t d = c.width, r = c.mlp_ratio, dh = c.head_dim(), pc = c.patch_dim();
    ParamBreakdown b;
    b.per_double_block = 2 * ((10 + 2 * r) * d * d + (13 + r) * d + 2 * dh);
    b.per_single_block = (7 + 2 * r) * d * d + (8 + r) * d + 2 * dh;
    b.embedders = (pc * d + d)                                 // patch embed
                  + (c.d_fine * d + d)                         // fine text projection
                  + (c.t_emb_dim * d + d + d * d + d)          // timestep MLP
                  + (c.d_coarse * d + d + d * d + d);          // coarse text MLP
    b.final_layer = d + (2 * d * d + 2 * d) + (d * pc + pc);
    b.total = b.embedders + c.double_blocks * b.per_double_block + c.single_blocks * b.per_single_block + b.final_layer;
    return b;
}

inline std::uint64_t count_params(const ModelConfig& c) { return count_params_breakdown(c).total; }

struct FlopBreakdown {
    std::uint64_t embedders = 0;
    std::uint64_t per_double_block = 0;
    std::uint64_t per_single_block = 0;
    std::uint64_t final_layer = 0;
    std::uint64_t total = 0;
};

/// Analytic forward FLOPs (2 per multiply-accumulate) for one sample with
/// the given token counts. Covers every linear layer and both s^2
/// attention products (QK^T and PV); elementwise work is ignored.
inline FlopBreakdown count_flops_breakdown(const ModelConfig& c, std::uint64_t music_tokens, std::uint64_t text_tokens) {
    const std::uint64_t d = c.width, r = c.mlp_ratio, pc = c.patch_dim();
    const std::uint64_t joint = music_tokens + text_tokens;
    const std::uint64_t token_macs = (4 + 2 * r) * d * d;  // qkv + out proj + MLP
    FlopBreakdown f;
    f.embedders = 2 * (music_tokens * pc * d + text_tokens * c.d_fine * d + (c.t_emb_dim * d + d * d) +
                       (c.d_coarse * d + d * d));
    f.per_double_block = 2 * (2 * 6 * d * d + joint * token_macs + 2 * joint * joint * d);
    f.per_single_block = 2 * (3 * d * d + music_tokens * token_macs + 2 * music_tokens * music_tokens * d);
    f.final_layer = 2 * (2 * d * d + music_tokens * d * pc);
    f.total = f.embedders + c.double_blocks * f.per_double_block + c.single_blocks * f.per_single_block + f.final_layer;
    return f;
}

inline std::uint64_t count_flops(const ModelConfig& c, std::uint64_t music_tokens, std::uint64_t text_tokens) {
    return count_flops_breakdown(c, music_tokens, text_tokens).total;
}

}  // namespace rfm
