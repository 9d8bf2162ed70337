#pragma once

#include <json.hpp>

#include <algorithm>
#include <array>
#include <cmath>
#include <cstdint>
#include <filesystem>
#include <fstream>
#include <string>
#include <vector>

#include "audio.hpp"
#include "codec.hpp"
#include "conditioning.hpp"
#include "errors.hpp"
#include "rng.hpp"
#include "tensor.hpp"

namespace rfm {

inline constexpr std::size_t kAttributeAxes = 3;

/// Binary attribute grid: pitch {low, high}, tempo {slow, fast},
/// texture {tonal, percussive}. Each field is 0 or 1.
struct Attributes {
    std::array<int, kAttributeAxes> v{};

    int pitch() const { return v[0]; }
    int tempo() const { return v[1]; }
    int texture() const { return v[2]; }
    bool operator==(const Attributes&) const = default;
};

inline constexpr std::array<std::array<const char*, 2>, kAttributeAxes> kAttributeWords{{
    {"low", "high"},
    {"slow", "fast"},
    {"tonal", "percussive"},
}};

inline constexpr std::array<const char*, kAttributeAxes> kAxisNames{"pitch", "tempo", "texture"};

inline std::string attribute_phrase(const Attributes& a) {
    return std::string(kAttributeWords[0][a.v[0]]) + " " + kAttributeWords[1][a.v[1]] + " " + kAttributeWords[2][a.v[2]];
}

/// Inverse of attribute_phrase; words may appear in any order among others.
inline Attributes parse_attributes(std::string_view text) {
    Attributes a;
    std::array<bool, kAttributeAxes> seen{};
    for (const auto& tok : tokenize(text))
        for (std::size_t ax = 0; ax < kAttributeAxes; ++ax)
            for (int k = 0; k < 2; ++k)
                if (tok == kAttributeWords[ax][k]) {
                    a.v[ax] = k;
                    seen[ax] = true;
                }
    for (std::size_t ax = 0; ax < kAttributeAxes; ++ax)
        if (!seen[ax]) throw InputError("caption '" + std::string(text) + "' names no " + kAxisNames[ax] + " attribute");
    return a;
}

struct SynthRecipe {
    std::uint64_t seed = 0;
    double noise = 0.01;  // linear-magnitude background level

    nlohmann::json to_json() const { return {{"seed", seed}, {"noise", noise}}; }
    static SynthRecipe from_json(const nlohmann::json& j) {
        SynthRecipe r;
        r.seed = j.value("seed", r.seed);
        r.noise = j.value("noise", r.noise);
        if (!(r.noise > 0)) throw ConfigError("synth noise must be positive");
        return r;
    }
};

struct SynthItem {
    Attributes attributes;
    std::string caption;
    MelSpec mel;
};

namespace detail {

inline void add_line(std::vector<double>& lin, double bin, std::size_t frame, double amp) {
    const auto b = static_cast<long>(std::lround(bin));
    for (long db = -1; db <= 1; ++db) {
        const long k = b + db;
        if (k < 0 || k >= long(kMelBins)) continue;
        lin[std::size_t(k) * kMelFrames + frame] += amp * (db == 0 ? 1.0 : 0.4);
    }
}

}  // namespace detail

/// Parametric log-mel pattern for one index. Tonal items are note trains of
/// harmonic stacks with small glides; percussive items are broadband pulse
/// trains. Low/high picks the base bin, slow/fast the period (128/32 frames).
inline SynthItem synth_item(const SynthRecipe& recipe, std::uint64_t index) {
    Rng rng(mix_seed(recipe.seed, index));
    Attributes a;
    for (auto& x : a.v) x = rng.uniform() < 0.5 ? 0 : 1;

    const int base = a.pitch() == 0 ? 6 + int(rng.index(9)) : 34 + int(rng.index(11));
    const std::size_t nominal = a.tempo() == 0 ? 128 : 32;
    const std::size_t jitter = nominal / 16;
    const std::size_t period = nominal - jitter + rng.index(2 * jitter + 1);
    const std::size_t phase = rng.index(period);
    const double gain = 0.7 + 0.6 * rng.uniform();

    std::vector<double> lin(kMelBins * kMelFrames, 0.0);
    for (std::size_t onset = phase; onset < kMelFrames; onset += period) {
        if (a.texture() == 0) {
            const double pitch = base + double(int(rng.index(7)) - 3);
            const double glide = 4.0 * rng.uniform() - 2.0;
            const std::size_t len = period * 3 / 4;
            for (std::size_t f = 0; f < len && onset + f < kMelFrames; ++f) {
                const double pos = double(f) / double(len);
                const double env = gain * std::min(1.0, double(f + 1) / 2.0) * std::exp(-0.7 * pos);
                const double b = pitch + glide * pos;
                detail::add_line(lin, b, onset + f, env);
                detail::add_line(lin, b + 7, onset + f, 0.5 * env);
                detail::add_line(lin, b + 12, onset + f, 0.3 * env);
            }
        } else {
            const long lo = std::max(0, base - 6), hi = std::min(int(kMelBins) - 1, base + 14);
            std::vector<double> shape(std::size_t(hi - lo + 1));
            for (auto& s : shape) s = 0.5 + 0.5 * rng.uniform();
            for (std::size_t f = 0; f < 4 && onset + f < kMelFrames; ++f) {
                const double env = gain * std::pow(0.5, double(f));
                for (long k = lo; k <= hi; ++k) lin[std::size_t(k) * kMelFrames + onset + f] += env * shape[std::size_t(k - lo)];
            }
        }
    }
    std::vector<float> out(lin.size());
    for (std::size_t i = 0; i < lin.size(); ++i) {
        const double bg = recipe.noise * std::exp(0.5 * rng.normal());
        out[i] = static_cast<float>(std::log(std::max(lin[i] + bg, kLogFloor)));
    }
    return {a, attribute_phrase(a), make_mel_spec(Tensor<float>({kMelBins, kMelFrames}, std::move(out)))};
}

struct TrainExample {
    LatentSpec latent;
    std::string caption;
    Attributes attributes;
};

/// Examples [first, first + count) of the synthetic stream.
inline std::vector<TrainExample> synth_dataset(const SynthRecipe& recipe, const ToyCodec& codec, std::uint64_t first,
                                               std::size_t count) {
    std::vector<TrainExample> out;
    out.reserve(count);
    for (std::size_t i = 0; i < count; ++i) {
        auto item = synth_item(recipe, first + i);
        out.push_back({codec.compress(item.mel), item.caption, item.attributes});
    }
    return out;
}

/// Energy-weighted mean mel bin of exp(mel).
inline double spectral_centroid(const MelSpec& mel) {
    double num = 0, den = 0;
    for (std::size_t k = 0; k < kMelBins; ++k)
        for (std::size_t f = 0; f < kMelFrames; ++f) {
            const double e = std::exp(double(mel.values[k * kMelFrames + f]));
            num += e * double(k);
            den += e;
        }
    return num / den;
}

// ---------------------------------------------------------------------------
// Manifest

struct ManifestEntry {
    std::string id;
    std::string source;  // "synth" or a WAV path
    std::uint64_t index = 0;
    std::string caption;
    std::string caption_source = "original";  // original | synthetic
};

/// JSON lines. The first line carries the manifest-level fields
/// ({"manifest": 1, "original_ratio", "recipe"}); each further line is one clip.
struct DatasetManifest {
    double original_ratio = 0.2;
    SynthRecipe recipe;
    std::vector<ManifestEntry> entries;

    void save(const std::filesystem::path& path) const {
        std::ofstream os(path);
        if (!os) throw InputError("cannot write " + path.string());
        os << nlohmann::json{{"manifest", 1}, {"original_ratio", original_ratio}, {"recipe", recipe.to_json()}}.dump() << '\n';
        for (const auto& e : entries)
            os << nlohmann::json{{"id", e.id},
                                 {"source", e.source},
                                 {"index", e.index},
                                 {"caption", e.caption},
                                 {"caption_source", e.caption_source}}
                      .dump()
               << '\n';
    }

    static DatasetManifest load(const std::filesystem::path& path) {
        std::ifstream is(path);
        if (!is) throw InputError("cannot open manifest " + path.string());
        DatasetManifest m;
        std::string line;
        std::size_t lineno = 0;
        try {
            while (std::getline(is, line)) {
                ++lineno;
                if (line.empty()) continue;
                const auto j = nlohmann::json::parse(line);
                if (j.contains("manifest")) {
                    m.original_ratio = j.value("original_ratio", 0.2);
                    if (j.contains("recipe")) m.recipe = SynthRecipe::from_json(j["recipe"]);
                    continue;
                }
                ManifestEntry e;
                e.id = j.value("id", std::to_string(m.entries.size()));
                e.source = j.at("source").get<std::string>();
                e.index = j.value("index", std::uint64_t{0});
                e.caption = j.at("caption").get<std::string>();
                e.caption_source = j.value("caption_source", std::string("original"));
                if (e.caption_source != "original" && e.caption_source != "synthetic")
                    throw InputError("caption_source must be original or synthetic");
                m.entries.push_back(std::move(e));
            }
        } catch (const nlohmann::json::exception& ex) {
            throw InputError(path.string() + ":" + std::to_string(lineno) + ": " + ex.what());
        }
        if (!(m.original_ratio >= 0 && m.original_ratio <= 1)) throw InputError("original_ratio must lie in [0,1]");
        return m;
    }
};

/// Paraphrase that keeps all three attribute words.
inline std::string paraphrase(const Attributes& a, Rng& rng) {
    const std::string p = kAttributeWords[0][a.v[0]], t = kAttributeWords[1][a.v[1]], x = kAttributeWords[2][a.v[2]];
    switch (rng.index(4)) {
        case 0: return t + " " + x + " music in a " + p + " register";
        case 1: return "a " + p + " " + x + " clip with a " + t + " pulse";
        case 2: return x + " sounds , " + p + " and " + t;
        default: return "a " + t + " piece , " + x + " and " + p + " pitched";
    }
}

/// Manifest over synth indices [0, n): a fraction `original_ratio` keeps the
/// attribute phrase, the rest get a paraphrase.
inline DatasetManifest synth_manifest(const SynthRecipe& recipe, std::size_t n, double original_ratio = 0.2) {
    if (!(original_ratio >= 0 && original_ratio <= 1)) throw ConfigError("original_ratio must lie in [0,1]");
    DatasetManifest m;
    m.original_ratio = original_ratio;
    m.recipe = recipe;
    m.entries.reserve(n);
    for (std::size_t i = 0; i < n; ++i) {
        Rng rng(mix_seed(recipe.seed ^ 0xCA9710ULL, i));
        Attributes a;
        {
            Rng item(mix_seed(recipe.seed, i));
            for (auto& x : a.v) x = item.uniform() < 0.5 ? 0 : 1;
        }
        ManifestEntry e{"synth-" + std::to_string(i), "synth", i, attribute_phrase(a), "original"};
        if (rng.uniform() >= original_ratio) {
            e.caption = paraphrase(a, rng);
            e.caption_source = "synthetic";
        }
        m.entries.push_back(std::move(e));
    }
    return m;
}

/// Loads every manifest entry as a latent. Synth entries regenerate from the
/// manifest recipe; other sources are read as WAV files relative to `root`.
inline std::vector<TrainExample> load_examples(const DatasetManifest& m, const ToyCodec& codec,
                                               const std::filesystem::path& root = {}) {
    std::vector<TrainExample> out;
    out.reserve(m.entries.size());
    for (const auto& e : m.entries) {
        TrainExample ex;
        if (e.source == "synth") {
            auto item = synth_item(m.recipe, e.index);
            ex.latent = codec.compress(item.mel);
            ex.attributes = item.attributes;
        } else {
            const std::filesystem::path p = std::filesystem::path(e.source).is_absolute() ? std::filesystem::path(e.source) : root / e.source;
            ex.latent = codec.compress(mel_spectrogram(fit_clip(read_wav(p).samples)));
        }
        ex.caption = e.caption;
        out.push_back(std::move(ex));
    }
    return out;
}

// ---------------------------------------------------------------------------
// Latent standardization

/// Per-channel mean and std over a dataset of latents.
struct LatentStats {
    std::vector<double> mean;
    std::vector<double> stddev;

    nlohmann::json to_json() const { return {{"mean", mean}, {"std", stddev}}; }
    static LatentStats from_json(const nlohmann::json& j) {
        LatentStats s{j.at("mean").get<std::vector<double>>(), j.at("std").get<std::vector<double>>()};
        if (s.mean.size() != s.stddev.size()) throw InputError("latent stats mean/std length mismatch");
        return s;
    }
    bool operator==(const LatentStats&) const = default;
};

inline LatentStats compute_latent_stats(std::span<const TrainExample> data) {
    if (data.empty()) throw ContractError("latent stats over an empty dataset");
    const std::size_t c = data[0].latent.values.size(-1);
    std::vector<double> sum(c, 0.0), sq(c, 0.0);
    std::size_t n = 0;
    for (const auto& ex : data) {
        const auto v = ex.latent.values.data();
        if (ex.latent.values.size(-1) != c) throw ShapeError("latent channel count differs across the dataset");
        for (std::size_t i = 0; i < v.size(); ++i) sum[i % c] += v[i];
        n += v.size() / c;
    }
    LatentStats s{std::vector<double>(c), std::vector<double>(c)};
    for (std::size_t k = 0; k < c; ++k) s.mean[k] = sum[k] / double(n);
    for (const auto& ex : data) {
        const auto v = ex.latent.values.data();
        for (std::size_t i = 0; i < v.size(); ++i) {
            const double d = v[i] - s.mean[i % c];
            sq[i % c] += d * d;
        }
    }
    for (std::size_t k = 0; k < c; ++k) s.stddev[k] = std::max(std::sqrt(sq[k] / double(n)), 1e-8);
    return s;
}

inline Tensor<float> standardize(const Tensor<float>& latent, const LatentStats& s) {
    const std::size_t c = s.mean.size();
    if (latent.size(-1) != c) throw ShapeError("latent has " + std::to_string(latent.size(-1)) + " channels, stats have " + std::to_string(c));
    std::vector<float> out(latent.numel());
    const auto v = latent.data();
    for (std::size_t i = 0; i < out.size(); ++i) out[i] = static_cast<float>((v[i] - s.mean[i % c]) / s.stddev[i % c]);
    return Tensor<float>(latent.shape(), std::move(out));
}

inline Tensor<float> destandardize(const Tensor<float>& z, const LatentStats& s) {
    const std::size_t c = s.mean.size();
    if (z.size(-1) != c) throw ShapeError("latent has " + std::to_string(z.size(-1)) + " channels, stats have " + std::to_string(c));
    std::vector<float> out(z.numel());
    const auto v = z.data();
    for (std::size_t i = 0; i < out.size(); ++i) out[i] = static_cast<float>(v[i] * s.stddev[i % c] + s.mean[i % c]);
    return Tensor<float>(z.shape(), std::move(out));
}

}  // namespace rfm
