#pragma once

#include <cmath>
#include <span>
#include <string>
#include <utility>
#include <vector>

#include "conditioning.hpp"
#include "layers.hpp"
#include "model_config.hpp"
#include "ops.hpp"
#include "rng.hpp"

// Double-stream / single-stream rectified-flow transformer.
//
// Layout of one forward pass over a batch of latents [B, h, w, c]:
//   patchify -> linear to width d (music stream)
//   fine text [B, Lt, d_fine] -> linear to d (text stream)
//   y = MLP_t(timestep) + MLP_c(coarse)          (modulation signal)
//   m double blocks over (text, music), joint attention text-first
//   text stream dropped
//   n single blocks over music
//   modulated norm + zero-initialized linear -> unpatchify
namespace rfm {

/// Per-modality weights inside a double block.
template <Real T>
struct StreamWeights {
    Tensor<T> norm1, norm2;
    LinearWeights<T> qkv;
    Tensor<T> q_norm, k_norm;
    LinearWeights<T> proj;
    LinearWeights<T> mlp_in, mlp_out;
    LinearWeights<T> mod;  // y -> shift1, scale1, gate1, shift2, scale2, gate2

    static StreamWeights make(const ModelConfig& c, Rng& rng) {
        const std::size_t d = c.width, hidden = c.mlp_ratio * c.width;
        StreamWeights s;
        s.norm1 = ones_param<T>(d);
        s.norm2 = ones_param<T>(d);
        s.qkv = LinearWeights<T>::make(d, 3 * d, rng);
        s.q_norm = ones_param<T>(c.head_dim());
        s.k_norm = ones_param<T>(c.head_dim());
        s.proj = LinearWeights<T>::make(d, d, rng);
        s.mlp_in = LinearWeights<T>::make(d, hidden, rng);
        s.mlp_out = LinearWeights<T>::make(hidden, d, rng);
        s.mod = LinearWeights<T>::make(d, 6 * d, rng, Init::kZero);
        return s;
    }

    void visit(const std::string& p, const ParamVisitor<T>& f) {
        f(p + ".norm1", norm1);
        f(p + ".norm2", norm2);
        qkv.visit(p + ".qkv", f);
        f(p + ".q_norm", q_norm);
        f(p + ".k_norm", k_norm);
        proj.visit(p + ".proj", f);
        mlp_in.visit(p + ".mlp_in", f);
        mlp_out.visit(p + ".mlp_out", f);
        mod.visit(p + ".mod", f);
    }
};

template <Real T>
struct DoubleBlockWeights {
    StreamWeights<T> txt;
    StreamWeights<T> mus;

    static DoubleBlockWeights make(const ModelConfig& c, Rng& rng) {
        auto t = StreamWeights<T>::make(c, rng);
        auto m = StreamWeights<T>::make(c, rng);
        return {std::move(t), std::move(m)};
    }

    void visit(const std::string& p, const ParamVisitor<T>& f) {
        txt.visit(p + ".txt", f);
        mus.visit(p + ".mus", f);
    }
};

template <Real T>
struct SingleBlockWeights {
    Tensor<T> norm;
    LinearWeights<T> lin1;  // d -> 3d (qkv) + r*d (MLP hidden)
    Tensor<T> q_norm, k_norm;
    LinearWeights<T> lin2;  // d + r*d -> d, zero-initialized
    LinearWeights<T> mod;   // y -> shift, scale, gate

    static SingleBlockWeights make(const ModelConfig& c, Rng& rng) {
        const std::size_t d = c.width, hidden = c.mlp_ratio * c.width;
        SingleBlockWeights s;
        s.norm = ones_param<T>(d);
        s.lin1 = LinearWeights<T>::make(d, 3 * d + hidden, rng);
        s.q_norm = ones_param<T>(c.head_dim());
        s.k_norm = ones_param<T>(c.head_dim());
        s.lin2 = LinearWeights<T>::make(d + hidden, d, rng, Init::kZero);
        s.mod = LinearWeights<T>::make(d, 3 * d, rng);
        return s;
    }

    void visit(const std::string& p, const ParamVisitor<T>& f) {
        f(p + ".norm", norm);
        lin1.visit(p + ".lin1", f);
        f(p + ".q_norm", q_norm);
        f(p + ".k_norm", k_norm);
        lin2.visit(p + ".lin2", f);
        mod.visit(p + ".mod", f);
    }
};

template <Real T>
struct FinalLayerWeights {
    Tensor<T> norm;
    LinearWeights<T> mod;  // y -> shift, scale
    LinearWeights<T> out;  // d -> p*p*c

    static FinalLayerWeights make(const ModelConfig& c, Rng& rng) {
        FinalLayerWeights f;
        f.norm = ones_param<T>(c.width);
        f.mod = LinearWeights<T>::make(c.width, 2 * c.width, rng, Init::kZero);
        f.out = LinearWeights<T>::make(c.width, c.patch_dim(), rng, Init::kZero);
        return f;
    }

    void visit(const std::string& p, const ParamVisitor<T>& f) {
        f(p + ".norm", norm);
        mod.visit(p + ".mod", f);
        out.visit(p + ".out", f);
    }
};

template <Real T>
struct ModelWeights {
    LinearWeights<T> img_in;
    LinearWeights<T> txt_in;
    Mlp2Weights<T> time_in;
    Mlp2Weights<T> vector_in;
    std::vector<DoubleBlockWeights<T>> doubles;
    std::vector<SingleBlockWeights<T>> singles;
    FinalLayerWeights<T> final_layer;

    /// Truncated-normal (std 0.02) weights, zero biases, unit norm gains;
    /// double-block modulation, single-block output projection and the
    /// final layer start at zero so every block is the identity.
    static ModelWeights init(const ModelConfig& c, Rng& rng) {
        c.validate();
        ModelWeights w;
        w.img_in = LinearWeights<T>::make(c.patch_dim(), c.width, rng);
        w.txt_in = LinearWeights<T>::make(c.d_fine, c.width, rng);
        w.time_in = Mlp2Weights<T>::make(c.t_emb_dim, c.width, rng);
        w.vector_in = Mlp2Weights<T>::make(c.d_coarse, c.width, rng);
        for (std::size_t i = 0; i < c.double_blocks; ++i) w.doubles.push_back(DoubleBlockWeights<T>::make(c, rng));
        for (std::size_t i = 0; i < c.single_blocks; ++i) w.singles.push_back(SingleBlockWeights<T>::make(c, rng));
        w.final_layer = FinalLayerWeights<T>::make(c, rng);
        return w;
    }

    void visit(const ParamVisitor<T>& f) {
        img_in.visit("img_in", f);
        txt_in.visit("txt_in", f);
        time_in.visit("time_in", f);
        vector_in.visit("vector_in", f);
        for (std::size_t i = 0; i < doubles.size(); ++i) doubles[i].visit("double." + std::to_string(i), f);
        for (std::size_t i = 0; i < singles.size(); ++i) singles[i].visit("single." + std::to_string(i), f);
        final_layer.visit("final", f);
    }

    std::vector<std::pair<std::string, Tensor<T>>> named_parameters() const {
        std::vector<std::pair<std::string, Tensor<T>>> out;
        const_cast<ModelWeights*>(this)->visit([&](const std::string& n, Tensor<T>& t) { out.emplace_back(n, t); });
        return out;
    }

    std::vector<Tensor<T>> parameters() const {
        std::vector<Tensor<T>> out;
        for (auto& [n, t] : named_parameters()) out.push_back(t);
        return out;
    }

    std::size_t parameter_count() const {
        std::size_t n = 0;
        for (const auto& t : parameters()) n += t.numel();
        return n;
    }

    /// Independent deep copy.
    ModelWeights clone(bool requires_grad) const {
        ModelWeights copy = *this;
        copy.visit([&](const std::string&, Tensor<T>& t) { t = t.clone(requires_grad); });
        return copy;
    }

    void zero_grad() {
        visit([](const std::string&, Tensor<T>& t) { t.zero_grad(); });
    }
};

/// Row-major patch grid; each music token carries its (row, col) id.
struct PatchGrid {
    std::size_t gh = 0, gw = 0;

    static PatchGrid for_latent(std::size_t h, std::size_t w, std::size_t p) {
        if (p == 0 || h % p != 0 || w % p != 0)
            throw ShapeError("latent " + std::to_string(h) + "x" + std::to_string(w) + " not divisible by patch " + std::to_string(p));
        return {h / p, w / p};
    }

    std::size_t tokens() const { return gh * gw; }
    std::pair<std::size_t, std::size_t> id(std::size_t token) const { return {token / gw, token % gw}; }
};

/// [h,w,c] or [B,h,w,c] -> [(B,) (h/p)(w/p), p*p*c]; row-major patch order,
/// channel-fastest within a patch.
template <Real T>
Tensor<T> patchify(const Tensor<T>& latent, std::size_t p) {
    const bool batched = latent.dim() == 4;
    if (latent.dim() != 3 && !batched) throw ShapeError("patchify expects [h,w,c] or [B,h,w,c], got " + to_string(latent.shape()));
    const std::size_t b = batched ? latent.size(0) : 1, h = latent.size(-3), w = latent.size(-2), c = latent.size(-1);
    const auto grid = PatchGrid::for_latent(h, w, p);
    auto x = reshape(latent, {b, grid.gh, p, grid.gw, p, c});
    x = permute(x, {0, 1, 3, 2, 4, 5});
    if (batched) return reshape(x, {b, grid.tokens(), p * p * c});
    return reshape(x, {grid.tokens(), p * p * c});
}

template <Real T>
Tensor<T> unpatchify(const Tensor<T>& tokens, std::size_t h, std::size_t w, std::size_t c, std::size_t p) {
    const bool batched = tokens.dim() == 3;
    const auto grid = PatchGrid::for_latent(h, w, p);
    const std::size_t b = batched ? tokens.size(0) : 1;
    if (tokens.size(-2) != grid.tokens() || tokens.size(-1) != p * p * c)
        throw ShapeError("unpatchify: token shape " + to_string(tokens.shape()) + " does not match latent geometry");
    auto x = reshape(tokens, {b, grid.gh, grid.gw, p, p, c});
    x = permute(x, {0, 1, 3, 2, 4, 5});
    if (batched) return reshape(x, {b, h, w, c});
    return reshape(x, {h, w, c});
}

/// Angle tables for two-axis rotary embedding over a sequence of
/// `text_tokens` text ids (0,0) followed by the music grid.
template <Real T>
struct RopeTable {
    std::size_t seq = 0;
    std::vector<T> cos, sin;  // [seq][head_dim/2]
};

template <Real T>
RopeTable<T> rope_table(const std::vector<std::pair<std::size_t, std::size_t>>& ids, std::size_t head_dim, double theta) {
    if (head_dim % 4 != 0) throw ConfigError("rotary head_dim must be divisible by 4, got " + std::to_string(head_dim));
    const std::size_t half = head_dim / 2, per_axis = head_dim / 4;
    RopeTable<T> tab;
    tab.seq = ids.size();
    tab.cos.resize(ids.size() * half);
    tab.sin.resize(ids.size() * half);
    for (std::size_t s = 0; s < ids.size(); ++s) {
        for (std::size_t axis = 0; axis < 2; ++axis) {
            const double pos = double(axis == 0 ? ids[s].first : ids[s].second);
            for (std::size_t i = 0; i < per_axis; ++i) {
                const double omega = std::pow(theta, -double(2 * i) / double(2 * per_axis));
                const std::size_t slot = s * half + axis * per_axis + i;
                tab.cos[slot] = static_cast<T>(std::cos(pos * omega));
                tab.sin[slot] = static_cast<T>(std::sin(pos * omega));
            }
        }
    }
    return tab;
}

inline std::vector<std::pair<std::size_t, std::size_t>> sequence_ids(const PatchGrid& grid, std::size_t text_tokens) {
    std::vector<std::pair<std::size_t, std::size_t>> ids(text_tokens, {0, 0});
    for (std::size_t t = 0; t < grid.tokens(); ++t) ids.push_back(grid.id(t));
    return ids;
}

/// Rotates q and k [b,h,s,dh]: the first dh/2 features by row-id angles, the
/// last dh/2 by column-id angles. Text tokens (ids 0,0) are left unrotated.
template <Real T>
std::pair<Tensor<T>, Tensor<T>> apply_rope(const Tensor<T>& q, const Tensor<T>& k, const RopeTable<T>& tab) {
    if (q.dim() != 4 || q.size(2) != tab.seq) throw ShapeError("apply_rope: sequence length does not match rotary table");
    return {rotate_pairs(q, std::span<const T>(tab.cos), std::span<const T>(tab.sin)),
            rotate_pairs(k, std::span<const T>(tab.cos), std::span<const T>(tab.sin))};
}

template <Real T>
std::pair<Tensor<T>, Tensor<T>> apply_rope(const Tensor<T>& q, const Tensor<T>& k, const PatchGrid& grid, std::size_t text_tokens,
                                           double theta = 10000.0) {
    if (q.size(-1) % 4 != 0) throw ConfigError("apply_rope: head dim must be divisible by 4");
    return apply_rope(q, k, rope_table<T>(sequence_ids(grid, text_tokens), q.size(-1), theta));
}

/// (1 + scale) * x + shift, where x is already normalized. shift/scale are
/// either [d] or per-sample [B, d] against x [B, L, d].
template <Real T>
Tensor<T> modulate(const Tensor<T>& x, const Tensor<T>& shift, const Tensor<T>& scale) {
    auto fit = [&](const Tensor<T>& v) {
        if (x.dim() == 3 && v.dim() == 2 && v.size(0) == x.size(0)) return expand(v, 1, x.size(1));
        return v;
    };
    return add(mul(x, add_scalar(fit(scale), T(1))), fit(shift));
}

namespace detail {

template <Real T>
Tensor<T> gated(const Tensor<T>& x, const Tensor<T>& gate, const Tensor<T>& h) {
    return add(x, mul(expand(gate, 1, x.size(1)), h));
}

// [B, L, d] -> [B, heads, L, d/heads]
template <Real T>
Tensor<T> to_heads(const Tensor<T>& x, std::size_t heads) {
    const std::size_t b = x.size(0), l = x.size(1), d = x.size(2);
    return transpose(reshape(x, {b, l, heads, d / heads}), 1, 2);
}

template <Real T>
Tensor<T> from_heads(const Tensor<T>& x) {
    const std::size_t b = x.size(0), h = x.size(1), l = x.size(2), dh = x.size(3);
    return reshape(transpose(x, 1, 2), {b, l, h * dh});
}

template <Real T>
struct StreamQkv {
    Tensor<T> q, k, v;
    std::vector<Tensor<T>> mod;  // shift1, scale1, gate1, shift2, scale2, gate2
};

template <Real T>
StreamQkv<T> stream_qkv(const Tensor<T>& x, const Tensor<T>& silu_y, const StreamWeights<T>& w, const ModelConfig& c) {
    const std::size_t d = c.width;
    StreamQkv<T> out;
    out.mod = split(w.mod(silu_y), -1, std::vector<std::size_t>(6, d));
    auto xm = modulate(rms_norm(x, w.norm1, T(c.norm_eps)), out.mod[0], out.mod[1]);
    auto parts = split(w.qkv(xm), -1, {d, d, d});
    out.q = rms_norm(to_heads(parts[0], c.heads), w.q_norm, T(c.norm_eps));
    out.k = rms_norm(to_heads(parts[1], c.heads), w.k_norm, T(c.norm_eps));
    out.v = to_heads(parts[2], c.heads);
    return out;
}

template <Real T>
Tensor<T> stream_finish(const Tensor<T>& x, const Tensor<T>& attn, const StreamQkv<T>& s, const StreamWeights<T>& w,
                        const ModelConfig& c) {
    auto h = gated(x, s.mod[2], w.proj(attn));
    auto hm = modulate(rms_norm(h, w.norm2, T(c.norm_eps)), s.mod[3], s.mod[4]);
    return gated(h, s.mod[5], w.mlp_out(gelu(w.mlp_in(hm))));
}

}  // namespace detail

/// One double-stream block. `txt` may be undefined (no text tokens).
/// `rope` covers the joint sequence (text first); `key_mask` is [B, Lt+Lm]
/// or empty.
template <Real T>
std::pair<Tensor<T>, Tensor<T>> double_block(const Tensor<T>& txt, const Tensor<T>& mus, const Tensor<T>& silu_y,
                                             const DoubleBlockWeights<T>& w, const ModelConfig& c, const RopeTable<T>& rope,
                                             std::span<const std::uint8_t> key_mask = {}) {
    if (mus.size(-1) != c.width || (txt.defined() && txt.size(-1) != c.width))
        throw ShapeError("double_block: stream width does not match model width " + std::to_string(c.width));
    const std::size_t lt = txt.defined() ? txt.size(1) : 0, lm = mus.size(1);
    auto sm = detail::stream_qkv(mus, silu_y, w.mus, c);
    Tensor<T> q = sm.q, k = sm.k, v = sm.v;
    detail::StreamQkv<T> st;
    if (lt > 0) {
        st = detail::stream_qkv(txt, silu_y, w.txt, c);
        q = concat<T>({st.q, sm.q}, 2);
        k = concat<T>({st.k, sm.k}, 2);
        v = concat<T>({st.v, sm.v}, 2);
    }
    auto [qr, kr] = apply_rope(q, k, rope);
    auto attn = detail::from_heads(attention(qr, kr, v, key_mask));
    if (lt == 0) return {txt, detail::stream_finish(mus, attn, sm, w.mus, c)};
    auto halves = split(attn, 1, {lt, lm});
    return {detail::stream_finish(txt, halves[0], st, w.txt, c), detail::stream_finish(mus, halves[1], sm, w.mus, c)};
}

/// One single-stream block: fused projection feeding parallel attention and
/// SiLU-MLP branches, fused output projection, gated residual.
template <Real T>
Tensor<T> single_block(const Tensor<T>& x, const Tensor<T>& silu_y, const SingleBlockWeights<T>& w, const ModelConfig& c,
                       const RopeTable<T>& rope) {
    if (x.size(-1) != c.width) throw ShapeError("single_block: width mismatch");
    const std::size_t d = c.width, hidden = c.mlp_ratio * c.width;
    auto mod = split(w.mod(silu_y), -1, {d, d, d});
    auto xm = modulate(rms_norm(x, w.norm, T(c.norm_eps)), mod[0], mod[1]);
    auto parts = split(w.lin1(xm), -1, {d, d, d, hidden});
    auto q = rms_norm(detail::to_heads(parts[0], c.heads), w.q_norm, T(c.norm_eps));
    auto k = rms_norm(detail::to_heads(parts[1], c.heads), w.k_norm, T(c.norm_eps));
    auto v = detail::to_heads(parts[2], c.heads);
    auto [qr, kr] = apply_rope(q, k, rope);
    auto attn = detail::from_heads(attention(qr, kr, v));
    auto out = w.lin2(concat<T>({attn, silu(parts[3])}, -1));
    return detail::gated(x, mod[2], out);
}

/// Velocity prediction for a batch of latents z [B, h, w, c] at per-sample
/// times t (length B).
template <Real T>
Tensor<T> forward(const ModelWeights<T>& w, const ModelConfig& c, const Tensor<T>& z, std::span<const T> t,
                  const CondBatch<T>& cond) {
    if (z.dim() != 4 || z.size(1) != c.latent_h || z.size(2) != c.latent_w || z.size(3) != c.channels)
        throw ShapeError("forward: latent shape " + to_string(z.shape()) + " does not match config");
    const std::size_t b = z.size(0);
    if (t.size() != b || cond.batch != b) throw ShapeError("forward: batch size mismatch between latent, t and condition");

    const auto grid = PatchGrid::for_latent(c.latent_h, c.latent_w, c.patch);
    auto mus = w.img_in(patchify(z, c.patch));
    auto y = build_y(timestep_embed_batch<T>(t, c.t_emb_dim), cond.coarse, w.time_in, w.vector_in);
    auto silu_y = silu(y);

    const std::size_t lt = cond.text_len, lm = grid.tokens();
    Tensor<T> txt;
    std::vector<std::uint8_t> joint_mask;
    if (lt > 0) {
        txt = w.txt_in(cond.fine);
        joint_mask.assign(b * (lt + lm), 1);
        for (std::size_t i = 0; i < b; ++i)
            for (std::size_t l = 0; l < lt; ++l) joint_mask[i * (lt + lm) + l] = cond.mask[i * lt + l];
    }
    const auto joint_rope = rope_table<T>(sequence_ids(grid, lt), c.head_dim(), c.rope_theta);
    const auto music_rope = rope_table<T>(sequence_ids(grid, 0), c.head_dim(), c.rope_theta);

    for (std::size_t i = 0; i < w.doubles.size(); ++i) {
        try {
            std::tie(txt, mus) = double_block(txt, mus, silu_y, w.doubles[i], c, joint_rope, joint_mask);
        } catch (const NumericError& e) {
            throw NumericError("double block " + std::to_string(i) + ": " + e.what());
        }
    }
    for (std::size_t i = 0; i < w.singles.size(); ++i) {
        try {
            mus = single_block(mus, silu_y, w.singles[i], c, music_rope);
        } catch (const NumericError& e) {
            throw NumericError("single block " + std::to_string(i) + ": " + e.what());
        }
    }
    auto fm = split(w.final_layer.mod(silu_y), -1, {c.width, c.width});
    auto out = w.final_layer.out(modulate(rms_norm(mus, w.final_layer.norm, T(c.norm_eps)), fm[0], fm[1]));
    return unpatchify(out, c.latent_h, c.latent_w, c.channels, c.patch);
}

/// Single-latent convenience form: z [h, w, c], scalar t.
template <Real T>
Tensor<T> forward(const ModelWeights<T>& w, const ModelConfig& c, const Tensor<T>& z, T t, const TextCondition& cond) {
    const std::vector<TextCondition> conds{cond};
    auto batch = make_cond_batch<T>(std::span<const TextCondition>(conds), c.d_fine, c.d_coarse);
    auto zb = reshape(z, {1, z.size(0), z.size(1), z.size(2)});
    const T ts[1] = {t};
    auto v = forward(w, c, zb, std::span<const T>(ts, 1), batch);
    return reshape(v, z.shape());
}

/// Callable velocity field bound to a set of weights.
template <Real T>
struct VelocityModel {
    const ModelWeights<T>* weights;
    const ModelConfig* config;

    Tensor<T> operator()(const Tensor<T>& z, std::span<const T> t, const CondBatch<T>& cond) const {
        return forward(*weights, *config, z, t, cond);
    }
};

}  // namespace rfm
