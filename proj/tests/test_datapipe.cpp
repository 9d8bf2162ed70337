#include <gtest/gtest.h>

#include <algorithm>
#include <cmath>
#include <filesystem>
#include <fstream>

#include "rfmusic/codec.hpp"
#include "rfmusic/dataset.hpp"

using namespace rfm;

namespace {

Tensor<float> random_mel(std::uint64_t seed) {
    Rng rng(seed);
    return rng.randn<float>({kMelBins, kMelFrames}, 2.0);
}

double max_abs_diff(const Tensor<float>& a, const Tensor<float>& b) {
    double m = 0;
    for (std::size_t i = 0; i < a.numel(); ++i) m = std::max(m, std::abs(double(a[i]) - double(b[i])));
    return m;
}

}  // namespace

TEST(Codec, LatentGeometry) {
    ToyCodec codec(4, 7);
    auto z = codec.compress(random_mel(1));
    EXPECT_EQ(z.values.shape(), (Shape{16, 128, 4}));
    EXPECT_EQ(z.codec_seed, 7u);
}

TEST(Codec, DirectionsAreOrthonormal) {
    ToyCodec codec(32, 3);
    for (std::size_t a = 0; a < 32; ++a)
        for (std::size_t b = 0; b < 32; ++b) {
            double dot = 0;
            for (std::size_t k = 0; k < 32; ++k) dot += codec.direction(a)[k] * codec.direction(b)[k];
            ASSERT_NEAR(dot, a == b ? 1.0 : 0.0, 1e-12) << a << " " << b;
        }
}

TEST(Codec, ProjectionIdempotent) {
    ToyCodec codec(4, 11);
    auto z1 = codec.compress(random_mel(2));
    auto z2 = codec.compress(codec.decompress(z1));
    EXPECT_LT(max_abs_diff(z1.values, z2.values), 1e-5);
}

TEST(Codec, FullRankIsLossless) {
    ToyCodec codec(32, 5);
    auto mel = random_mel(3);
    auto back = codec.decompress(codec.compress(mel)).values;
    EXPECT_LT(max_abs_diff(mel, back), 1e-5);
}

TEST(Codec, BlockEnergyNeverGrows) {
    ToyCodec codec(8, 2);
    auto mel = random_mel(4);
    auto z = codec.compress(mel);
    for (std::size_t i = 0; i < kLatentH; ++i)
        for (std::size_t j = 0; j < kLatentW; ++j) {
            double lat = 0, blk = 0;
            for (std::size_t c = 0; c < 8; ++c) lat += std::pow(z.values[(i * kLatentW + j) * 8 + c], 2);
            for (std::size_t r = 0; r < 4; ++r)
                for (std::size_t s = 0; s < 8; ++s) blk += std::pow(mel[(i * 4 + r) * kMelFrames + j * 8 + s], 2);
            ASSERT_LE(lat, blk * (1 + 1e-6));
        }
}

TEST(Codec, Linear) {
    ToyCodec codec(4, 9);
    auto x = random_mel(5), y = random_mel(6);
    std::vector<float> comb(x.numel());
    for (std::size_t i = 0; i < comb.size(); ++i) comb[i] = 0.5f * x[i] - 2.0f * y[i];
    auto lhs = codec.compress(Tensor<float>(x.shape(), std::move(comb))).values;
    auto zx = codec.compress(x).values, zy = codec.compress(y).values;
    for (std::size_t i = 0; i < lhs.numel(); ++i) ASSERT_NEAR(lhs[i], 0.5f * zx[i] - 2.0f * zy[i], 1e-4);
}

TEST(Codec, SeedMismatchDetected) {
    ToyCodec enc(4, 1), dec(4, 2);
    auto z = enc.compress(random_mel(7));
    EXPECT_THROW(dec.decompress(z), ContractError);
    EXPECT_THROW(ToyCodec(0, 1), ConfigError);
    EXPECT_THROW(ToyCodec(33, 1), ConfigError);
}

TEST(Codec, SameSeedSameBasis) {
    ToyCodec a(4, 42), b(4, 42), c(4, 43);
    EXPECT_TRUE(std::equal(a.direction(0).begin(), a.direction(0).end(), b.direction(0).begin()));
    EXPECT_FALSE(std::equal(a.direction(0).begin(), a.direction(0).end(), c.direction(0).begin()));
}

TEST(Pgm, OrientationAndSidecar) {
    const auto path = std::filesystem::temp_directory_path() / "rfm_test.pgm";
    // 2x3 image: row 0 = low frequency, must be the bottom line of the file.
    Tensor<float> img({2, 3}, std::vector<float>{0, 1, 2, 3, 4, 6});
    write_pgm(path, img);
    std::ifstream is(path, std::ios::binary);
    std::string magic;
    std::size_t w, h, maxv;
    is >> magic >> w >> h >> maxv;
    is.get();
    EXPECT_EQ(magic, "P5");
    EXPECT_EQ(w, 3u);
    EXPECT_EQ(h, 2u);
    EXPECT_EQ(maxv, 255u);
    unsigned char px[6];
    is.read(reinterpret_cast<char*>(px), 6);
    EXPECT_EQ(px[0], 128);  // 3/6 * 255 = 127.5
    EXPECT_EQ(px[2], 255);
    EXPECT_EQ(px[3], 0);
    EXPECT_EQ(px[4], 43);
    std::ifstream side(path.string() + ".txt");
    std::string key;
    double lo, hi;
    side >> key >> lo >> key >> hi;
    EXPECT_EQ(lo, 0.0);
    EXPECT_EQ(hi, 6.0);
    std::filesystem::remove(path);
    std::filesystem::remove(path.string() + ".txt");
}

TEST(Synth, SameIndexIdentical) {
    SynthRecipe r{3};
    auto a = synth_item(r, 17), b = synth_item(r, 17), c = synth_item(r, 18);
    EXPECT_EQ(a.caption, b.caption);
    EXPECT_TRUE(std::equal(a.mel.values.data().begin(), a.mel.values.data().end(), b.mel.values.data().begin()));
    EXPECT_FALSE(std::equal(a.mel.values.data().begin(), a.mel.values.data().end(), c.mel.values.data().begin()));
    for (float v : a.mel.values.data()) ASSERT_TRUE(std::isfinite(v));
}

TEST(Synth, AttributeMarginalsUniform) {
    SynthRecipe r{11};
    std::array<std::size_t, 3> ones{};
    std::array<std::size_t, 8> cells{};
    const std::size_t n = 10000;
    for (std::size_t i = 0; i < n; ++i) {
        Rng rng(mix_seed(r.seed, i));  // synth_item's first three draws
        Attributes a;
        for (auto& x : a.v) x = rng.uniform() < 0.5 ? 0 : 1;
        for (std::size_t ax = 0; ax < 3; ++ax) ones[ax] += a.v[ax];
        cells[a.v[0] * 4 + a.v[1] * 2 + a.v[2]]++;
    }
    for (std::size_t ax = 0; ax < 3; ++ax) EXPECT_NEAR(double(ones[ax]) / n, 0.5, 0.02) << kAxisNames[ax];
    for (auto c : cells) EXPECT_NEAR(double(c) / n, 0.125, 0.02);
    // The sampled attributes agree with the generated items.
    for (std::size_t i = 0; i < 20; ++i) {
        Rng rng(mix_seed(r.seed, i));
        Attributes a;
        for (auto& x : a.v) x = rng.uniform() < 0.5 ? 0 : 1;
        EXPECT_EQ(synth_item(r, i).attributes, a);
    }
}

TEST(Synth, LowSlowTonalCentroidBelowMedian) {
    SynthRecipe r{5};
    std::vector<double> all;
    std::vector<double> lst;
    for (std::size_t i = 0; i < 200; ++i) {
        auto item = synth_item(r, i);
        const double c = spectral_centroid(item.mel);
        all.push_back(c);
        if (item.caption == "low slow tonal") lst.push_back(c);
    }
    ASSERT_FALSE(lst.empty());
    std::nth_element(all.begin(), all.begin() + all.size() / 2, all.end());
    const double median = all[all.size() / 2];
    for (double c : lst) EXPECT_LT(c, median);
}

TEST(Synth, CaptionRoundTrip) {
    for (int m = 0; m < 8; ++m) {
        Attributes a{{m >> 2, (m >> 1) & 1, m & 1}};
        EXPECT_EQ(parse_attributes(attribute_phrase(a)), a);
        Rng rng(m);
        for (int k = 0; k < 8; ++k) EXPECT_EQ(parse_attributes(paraphrase(a, rng)), a);
    }
    EXPECT_THROW(parse_attributes("low tonal"), InputError);
}

TEST(Manifest, RatioAndRoundTrip) {
    SynthRecipe r{2};
    auto m = synth_manifest(r, 2000);
    std::size_t orig = 0;
    for (const auto& e : m.entries) {
        orig += e.caption_source == "original";
        if (e.index < 100) {
            EXPECT_EQ(parse_attributes(e.caption), synth_item(r, e.index).attributes);
        }
    }
    EXPECT_NEAR(double(orig) / 2000, 0.2, 0.03);
    const auto path = std::filesystem::temp_directory_path() / "rfm_manifest.jsonl";
    m.save(path);
    auto back = DatasetManifest::load(path);
    EXPECT_EQ(back.original_ratio, 0.2);
    EXPECT_EQ(back.recipe.seed, 2u);
    ASSERT_EQ(back.entries.size(), m.entries.size());
    for (std::size_t i = 0; i < m.entries.size(); ++i) {
        EXPECT_EQ(back.entries[i].caption, m.entries[i].caption);
        EXPECT_EQ(back.entries[i].caption_source, m.entries[i].caption_source);
    }
    {
        std::ofstream os(path);
        os << "{\"source\": \"synth\"}\n";
    }
    EXPECT_THROW(DatasetManifest::load(path), InputError);
    std::filesystem::remove(path);
}

TEST(Manifest, WavEntriesLoad) {
    const auto dir = std::filesystem::temp_directory_path() / "rfm_wav_manifest";
    std::filesystem::create_directories(dir);
    write_wav(dir / "a.wav", tone(440.0, 0.5));
    DatasetManifest m;
    m.entries.push_back({"a", "a.wav", 0, "low slow tonal", "original"});
    ToyCodec codec(4, 0);
    auto ex = load_examples(m, codec, dir);
    ASSERT_EQ(ex.size(), 1u);
    EXPECT_EQ(ex[0].latent.values.shape(), (Shape{16, 128, 4}));
    std::filesystem::remove_all(dir);
}

TEST(LatentStats, StandardizeRoundTrip) {
    ToyCodec codec(4, 0);
    auto data = synth_dataset(SynthRecipe{1}, codec, 0, 16);
    auto stats = compute_latent_stats(data);
    ASSERT_EQ(stats.mean.size(), 4u);
    std::vector<double> sum(4, 0), sq(4, 0);
    std::size_t n = 0;
    for (const auto& ex : data) {
        auto z = standardize(ex.latent.values, stats);
        for (std::size_t i = 0; i < z.numel(); ++i) {
            sum[i % 4] += z[i];
            sq[i % 4] += double(z[i]) * z[i];
        }
        n += z.numel() / 4;
        auto back = destandardize(z, stats);
        for (std::size_t i = 0; i < z.numel(); i += 101) ASSERT_NEAR(back[i], ex.latent.values[i], 1e-4);
    }
    for (std::size_t c = 0; c < 4; ++c) {
        EXPECT_NEAR(sum[c] / n, 0.0, 1e-4);
        EXPECT_NEAR(sq[c] / n, 1.0, 1e-4);
    }
    EXPECT_EQ(LatentStats::from_json(stats.to_json()), stats);
}
