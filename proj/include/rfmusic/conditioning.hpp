#pragma once

#include <cmath>
#include <cstdint>
#include <bit>
#include <cstring>
#include <filesystem>
#include <fstream>
#include <span>
#include <sstream>
#include <string>
#include <string_view>
#include <vector>

#include "layers.hpp"
#include "ops.hpp"
#include "rng.hpp"

// Text conditioning: a fine token sequence concatenated with the music
// stream, and a coarse pooled vector that joins the timestep embedding in
// the modulation signal. The encoders are deterministic hash-table stubs.
namespace rfm {

struct EncoderStubConfig {
    std::size_t vocab_hash_buckets = 4096;
    std::size_t d_fine = 256;
    std::size_t d_coarse = 64;
    std::size_t max_text_len = 32;
    std::uint64_t seed = 0;

    void validate() const {
        if (vocab_hash_buckets == 0) throw ConfigError("vocab_hash_buckets must be positive");
        if (d_fine < 8 || d_coarse < 8) throw ConfigError("encoder widths must be at least 8");
        if (max_text_len == 0) throw ConfigError("max_text_len must be positive");
    }
};

/// Fine tokens are [L, d_fine] (undefined when L == 0); coarse is [d_coarse].
struct TextCondition {
    Tensor<float> fine_tokens;
    std::vector<std::uint8_t> fine_mask;
    Tensor<float> coarse;
    bool fine_is_null = false;
    bool coarse_is_null = false;

    std::size_t length() const { return fine_mask.size(); }
};

inline std::vector<std::string> tokenize(std::string_view text) {
    std::vector<std::string> tokens;
    std::istringstream is{std::string(text)};
    std::string tok;
    while (is >> tok) tokens.push_back(tok);
    return tokens;
}

/// 64-bit FNV-1a; stable across platforms and runs.
inline std::uint64_t stable_hash(std::string_view s) {
    std::uint64_t h = 0xcbf29ce484222325ULL;
    for (unsigned char c : s) {
        h ^= c;
        h *= 0x100000001b3ULL;
    }
    return h;
}

/// Row table addressed by token hash.
struct EmbeddingTable {
    std::size_t rows = 0;
    std::size_t dim = 0;
    std::vector<float> values;

    static EmbeddingTable seeded(std::size_t rows, std::size_t dim, std::uint64_t seed) {
        EmbeddingTable t{rows, dim, std::vector<float>(rows * dim)};
        Rng rng(seed);
        for (float& v : t.values) v = static_cast<float>(rng.normal());
        return t;
    }

    std::span<const float> row(std::size_t i) const { return {values.data() + i * dim, dim}; }
    std::span<const float> lookup(std::string_view token) const { return row(stable_hash(token) % rows); }
};

// "EMB v1 <count> <dim>\n" followed by count*dim little-endian f32.
inline void save_embeddings(const std::filesystem::path& path, const EmbeddingTable& table) {
    std::ofstream os(path, std::ios::binary);
    if (!os) throw InputError("cannot write embedding file " + path.string());
    os << "EMB v1 " << table.rows << ' ' << table.dim << '\n';
    static_assert(std::endian::native == std::endian::little);
    os.write(reinterpret_cast<const char*>(table.values.data()), static_cast<std::streamsize>(table.values.size() * sizeof(float)));
}

inline EmbeddingTable load_embeddings(const std::filesystem::path& path) {
    std::ifstream is(path, std::ios::binary);
    if (!is) throw InputError("cannot open embedding file " + path.string());
    std::string header;
    std::getline(is, header);
    std::istringstream hs(header);
    std::string magic, version;
    long long count = -1, dim = -1;
    hs >> magic >> version >> count >> dim;
    if (magic != "EMB" || version != "v1" || count <= 0 || dim <= 0)
        throw InputError("bad embedding header in " + path.string() + ": '" + header + "'");
    EmbeddingTable t{static_cast<std::size_t>(count), static_cast<std::size_t>(dim), {}};
    t.values.resize(t.rows * t.dim);
    is.read(reinterpret_cast<char*>(t.values.data()), static_cast<std::streamsize>(t.values.size() * sizeof(float)));
    if (is.gcount() != static_cast<std::streamsize>(t.values.size() * sizeof(float)))
        throw InputError("embedding file truncated: " + path.string());
    for (float v : t.values)
        if (!std::isfinite(v)) throw InputError("non-finite embedding value in " + path.string());
    return t;
}

/// Fine and coarse encoder stubs. Pure functions of (text, tables).
class TextEncoders {
   public:
    explicit TextEncoders(const EncoderStubConfig& cfg)
        : cfg_(cfg),
          fine_(EmbeddingTable::seeded(cfg.vocab_hash_buckets, cfg.d_fine, mix_seed(cfg.seed, 1))),
          coarse_(EmbeddingTable::seeded(cfg.vocab_hash_buckets, cfg.d_coarse, mix_seed(cfg.seed, 2))) {
        cfg_.validate();
    }

    /// Seam for externally computed embeddings.
    TextEncoders(EmbeddingTable fine, EmbeddingTable coarse, std::size_t max_text_len)
        : fine_(std::move(fine)), coarse_(std::move(coarse)) {
        cfg_.vocab_hash_buckets = fine_.rows;
        cfg_.d_fine = fine_.dim;
        cfg_.d_coarse = coarse_.dim;
        cfg_.max_text_len = max_text_len;
        cfg_.validate();
    }

    const EncoderStubConfig& config() const { return cfg_; }

    TextCondition encode(std::string_view text) const {
        TextCondition c = null_condition();
        encode_fine_into(text, c);
        encode_coarse_into(text, c);
        return c;
    }

    TextCondition null_condition() const {
        TextCondition c;
        c.fine_is_null = true;
        c.coarse = Tensor<float>::zeros({cfg_.d_coarse});
        c.coarse_is_null = true;
        return c;
    }

    void encode_fine_into(std::string_view text, TextCondition& c) const {
        const auto tokens = tokenize(text);
        const std::size_t len = std::min(tokens.size(), cfg_.max_text_len);
        c.fine_mask.assign(len, 1);
        c.fine_is_null = len == 0;
        if (len == 0) {
            c.fine_tokens = {};
            return;
        }
        std::vector<float> rows;
        rows.reserve(len * cfg_.d_fine);
        for (std::size_t i = 0; i < len; ++i) {
            auto r = fine_.lookup(tokens[i]);
            rows.insert(rows.end(), r.begin(), r.end());
        }
        c.fine_tokens = Tensor<float>({len, cfg_.d_fine}, std::move(rows));
    }

    void encode_coarse_into(std::string_view text, TextCondition& c) const {
        // Sorted so the pooled sum is bit-identical under token permutation.
        auto tokens = tokenize(text);
        std::sort(tokens.begin(), tokens.end());
        std::vector<double> acc(cfg_.d_coarse, 0.0);
        for (const auto& t : tokens) {
            auto r = coarse_.lookup(t);
            for (std::size_t j = 0; j < acc.size(); ++j) acc[j] += r[j];
        }
        std::vector<float> mean(cfg_.d_coarse, 0.f);
        if (!tokens.empty())
            for (std::size_t j = 0; j < acc.size(); ++j) mean[j] = static_cast<float>(acc[j] / double(tokens.size()));
        c.coarse = Tensor<float>({cfg_.d_coarse}, std::move(mean));
        c.coarse_is_null = tokens.empty();
    }

   private:
    EncoderStubConfig cfg_;
    EmbeddingTable fine_;
    EmbeddingTable coarse_;
};

inline std::pair<Tensor<float>, std::vector<std::uint8_t>> encode_fine(std::string_view text, const EncoderStubConfig& cfg) {
    TextEncoders enc(cfg);
    TextCondition c = enc.null_condition();
    enc.encode_fine_into(text, c);
    return {c.fine_tokens, c.fine_mask};
}

inline Tensor<float> encode_coarse(std::string_view text, const EncoderStubConfig& cfg) {
    TextEncoders enc(cfg);
    TextCondition c = enc.null_condition();
    enc.encode_coarse_into(text, c);
    return c.coarse;
}

/// Sinusoidal embedding of t scaled by 1000: [sin(1000 t f_i)..., cos(1000 t f_i)...]
/// with f_i = 10000^(-i/half).
template <Real T>
std::vector<T> timestep_embedding_values(double t, std::size_t dim) {
    if (dim == 0 || dim % 2 != 0) throw ConfigError("timestep embedding dim must be even, got " + std::to_string(dim));
    const std::size_t half = dim / 2;
    std::vector<T> out(dim);
    for (std::size_t i = 0; i < half; ++i) {
        const double freq = std::exp(-std::log(10000.0) * double(i) / double(half));
        const double arg = 1000.0 * t * freq;
        out[i] = static_cast<T>(std::sin(arg));
        out[half + i] = static_cast<T>(std::cos(arg));
    }
    return out;
}

template <Real T>
Tensor<T> timestep_embed(double t, std::size_t dim) {
    return Tensor<T>({dim}, timestep_embedding_values<T>(t, dim));
}

/// Row-stacked embeddings for a batch of timesteps, shape [B, dim].
template <Real T>
Tensor<T> timestep_embed_batch(std::span<const T> ts, std::size_t dim) {
    std::vector<T> all;
    all.reserve(ts.size() * dim);
    for (T t : ts) {
        auto row = timestep_embedding_values<T>(double(t), dim);
        all.insert(all.end(), row.begin(), row.end());
    }
    return Tensor<T>({ts.size(), dim}, std::move(all));
}

template <Real T>
struct ModulationEmbedder {
    Mlp2Weights<T> time_in;
    Mlp2Weights<T> vector_in;
};

/// y = MLP_t(t_emb) + MLP_c(coarse). Works on single vectors or [B, *] batches.
template <Real T>
Tensor<T> build_y(const Tensor<T>& t_emb, const Tensor<T>& coarse, const Mlp2Weights<T>& time_in,
                  const Mlp2Weights<T>& vector_in) {
    if (t_emb.size(-1) != time_in.in.in_features())
        throw ShapeError("build_y: timestep embedding width " + std::to_string(t_emb.size(-1)) + " != " +
                         std::to_string(time_in.in.in_features()));
    if (coarse.size(-1) != vector_in.in.in_features())
        throw ShapeError("build_y: coarse width " + std::to_string(coarse.size(-1)) + " != " +
                         std::to_string(vector_in.in.in_features()));
    return add(time_in(t_emb), vector_in(coarse));
}

/// Independently nulls the fine and coarse parts with probability p each.
/// Consumes exactly two draws from `rng` (fine first, then coarse).
inline TextCondition drop_conditions(const TextCondition& cond, double p, Rng& rng) {
    if (!(p >= 0.0 && p <= 1.0)) throw ConfigError("drop probability must lie in [0,1]");
    const bool drop_fine = rng.uniform() < p;
    const bool drop_coarse = rng.uniform() < p;
    TextCondition out = cond;
    if (drop_fine) {
        out.fine_tokens = {};
        out.fine_mask.clear();
        out.fine_is_null = true;
    }
    if (drop_coarse) {
        out.coarse = Tensor<float>::zeros(cond.coarse.shape());
        out.coarse_is_null = true;
    }
    return out;
}

/// Padded batch of conditions in compute precision.
template <Real T>
struct CondBatch {
    std::size_t batch = 0;
    std::size_t text_len = 0;        // padded fine length (0 = no text stream)
    Tensor<T> fine;                  // [B, text_len, d_fine], undefined when text_len == 0
    std::vector<std::uint8_t> mask;  // [B, text_len]
    Tensor<T> coarse;                // [B, d_coarse]
};

template <Real T>
CondBatch<T> make_cond_batch(std::span<const TextCondition> conds, std::size_t d_fine, std::size_t d_coarse) {
    if (conds.empty()) throw ContractError("empty condition batch");
    CondBatch<T> b;
    b.batch = conds.size();
    for (const auto& c : conds) b.text_len = std::max(b.text_len, c.length());
    std::vector<T> coarse;
    coarse.reserve(b.batch * d_coarse);
    for (const auto& c : conds) {
        if (c.coarse.numel() != d_coarse) throw ShapeError("coarse condition width mismatch");
        for (float v : c.coarse.data()) coarse.push_back(static_cast<T>(v));
    }
    b.coarse = Tensor<T>({b.batch, d_coarse}, std::move(coarse));
    if (b.text_len > 0) {
        std::vector<T> fine(b.batch * b.text_len * d_fine, T(0));
        b.mask.assign(b.batch * b.text_len, 0);
        for (std::size_t i = 0; i < b.batch; ++i) {
            const auto& c = conds[i];
            if (c.length() == 0) continue;
            if (c.fine_tokens.size(1) != d_fine) throw ShapeError("fine condition width mismatch");
            auto src = c.fine_tokens.data();
            for (std::size_t j = 0; j < src.size(); ++j) fine[i * b.text_len * d_fine + j] = static_cast<T>(src[j]);
            for (std::size_t l = 0; l < c.length(); ++l) b.mask[i * b.text_len + l] = c.fine_mask[l];
        }
        b.fine = Tensor<T>({b.batch, b.text_len, d_fine}, std::move(fine));
    }
    return b;
}

}  // namespace rfm
