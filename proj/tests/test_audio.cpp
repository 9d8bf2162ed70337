#include <gtest/gtest.h>

#include <cmath>
#include <filesystem>
#include <fstream>
#include <numbers>

#include "rfmusic/audio.hpp"

using namespace rfm;

namespace {

// Independent Slaney-style filterbank: breakpoints in Hz from the
// piecewise linear/log mel scale, triangles normalized to unit area * 2.
std::vector<std::vector<double>> reference_filterbank() {
    auto to_mel = [](double f) { return f < 1000 ? 3.0 * f / 200.0 : 15.0 + 27.0 * std::log(f / 1000.0) / std::log(6.4); };
    auto to_hz = [](double m) { return m < 15.0 ? 200.0 * m / 3.0 : 1000.0 * std::pow(6.4, (m - 15.0) / 27.0); };
    const double top = to_mel(8000.0);
    std::vector<double> pts(66);
    for (int i = 0; i < 66; ++i) pts[i] = to_hz(top * i / 65.0);
    std::vector<std::vector<double>> fb(64, std::vector<double>(513, 0.0));
    for (int m = 0; m < 64; ++m)
        for (int k = 0; k < 513; ++k) {
            const double f = k * 16000.0 / 1024.0;
            double w = 0;
            if (f > pts[m] && f <= pts[m + 1]) w = (f - pts[m]) / (pts[m + 1] - pts[m]);
            if (f > pts[m + 1] && f < pts[m + 2]) w = (pts[m + 2] - f) / (pts[m + 2] - pts[m + 1]);
            fb[m][k] = w * 2.0 / (pts[m + 2] - pts[m]);
        }
    return fb;
}

std::vector<double> dft_magnitudes(const std::vector<double>& frame) {
    const std::size_t n = frame.size();
    std::vector<double> mag(n / 2 + 1);
    for (std::size_t k = 0; k <= n / 2; ++k) {
        double re = 0, im = 0;
        for (std::size_t t = 0; t < n; ++t) {
            const double a = -2.0 * std::numbers::pi * double(k * t % n) / double(n);
            re += frame[t] * std::cos(a);
            im += frame[t] * std::sin(a);
        }
        mag[k] = std::hypot(re, im);
    }
    return mag;
}

std::size_t dominant_bin(const AudioClip& clip) {
    std::vector<double> x(clip.samples.begin(), clip.samples.end());
    auto s = stft(x, 1024, 160);
    std::vector<double> avg(s.bins, 0.0);
    for (std::size_t f = 0; f < s.frames; ++f)
        for (std::size_t k = 0; k < s.bins; ++k) avg[k] += std::abs(s.at(f, k));
    return std::size_t(std::max_element(avg.begin(), avg.end()) - avg.begin());
}

}  // namespace

TEST(Mel, ClipYieldsExactGeometry) {
    auto m = mel_spectrogram(tone(440.0));
    EXPECT_EQ(m.values.shape(), (Shape{64, 1024}));
    EXPECT_EQ(kClipSamples / kHop, 1024u);
}

TEST(Mel, RejectsWrongLengthOrRate) {
    AudioClip short_clip{std::vector<float>(1000, 0.0f), kSampleRate};
    EXPECT_THROW(mel_spectrogram(short_clip), InputError);
    auto c = tone(440.0);
    c.sample_rate = 22050;
    EXPECT_THROW(mel_spectrogram(c), InputError);
    auto loud = tone(440.0);
    loud.samples[10] = 1.5f;
    EXPECT_THROW(mel_spectrogram(loud), InputError);
}

TEST(Mel, SilenceIsLogFloor) {
    auto m = mel_spectrogram(fit_clip({}));
    const float floor = static_cast<float>(std::log(1e-5));
    for (float v : m.values.data()) ASSERT_EQ(v, floor);
}

TEST(Mel, ScaleBreakpoints) {
    EXPECT_DOUBLE_EQ(hz_to_mel(1000.0), 15.0);
    EXPECT_NEAR(mel_to_hz(hz_to_mel(3210.0)), 3210.0, 1e-9);
    EXPECT_NEAR(mel_to_hz(hz_to_mel(440.0)), 440.0, 1e-12);
    EXPECT_NEAR(hz_to_mel(8000.0), 15.0 + 27.0 * std::log(8.0) / std::log(6.4), 1e-12);
}

TEST(Mel, FilterbankMatchesIndependentConstruction) {
    const auto ref = reference_filterbank();
    const auto fb = MelFilterbank::make();
    for (std::size_t m = 0; m < 64; ++m)
        for (std::size_t k = 0; k < 513; ++k) ASSERT_NEAR(fb.weights[m * 513 + k], ref[m][k], 1e-12) << m << " " << k;
}

TEST(Mel, PureToneMatchesDirectDft) {
    const auto clip = tone(440.0);
    const auto mel = mel_spectrogram(clip);
    const auto fb = reference_filterbank();
    const std::size_t frame = 500;  // centered frame: samples [frame*hop - 512, +1024)
    std::vector<double> buf(1024);
    for (std::size_t i = 0; i < 1024; ++i)
        buf[i] = double(clip.samples[frame * 160 - 512 + i]) * (0.5 - 0.5 * std::cos(2 * std::numbers::pi * i / 1024.0));
    const auto mag = dft_magnitudes(buf);
    std::vector<double> expect(64);
    for (std::size_t m = 0; m < 64; ++m) {
        double acc = 0;
        for (std::size_t k = 0; k < 513; ++k) acc += fb[m][k] * mag[k];
        expect[m] = std::log(std::max(acc, 1e-5));
        EXPECT_NEAR(mel.values[m * 1024 + frame], expect[m], 1e-4) << m;
    }
    // Single dominant bin: the one whose triangle responds most to 440 Hz.
    std::size_t best = 0, resp_best = 0;
    double top = -1e9, second = -1e9, resp = -1;
    for (std::size_t m = 0; m < 64; ++m) {
        const double v = mel.values[m * 1024 + frame];
        if (v > top) {
            second = top;
            top = v;
            best = m;
        } else {
            second = std::max(second, v);
        }
        // response of filter m at 440 Hz, bin 28.16: interpolate the triangle
        const double f = 440.0;
        double w = 0;
        for (std::size_t k = 0; k + 1 < 513; ++k) {
            const double f0 = k * 15.625, f1 = (k + 1) * 15.625;
            if (f >= f0 && f < f1) w = fb[m][k] + (fb[m][k + 1] - fb[m][k]) * (f - f0) / 15.625;
        }
        if (w > resp) {
            resp = w;
            resp_best = m;
        }
    }
    EXPECT_EQ(best, resp_best);
    EXPECT_GT(top - second, 0.1);
}

TEST(Stft, ReflectPad) {
    const double x[4] = {1, 2, 3, 4};
    EXPECT_EQ(reflect_pad(std::span<const double>(x, 4), 2), (std::vector<double>{3, 2, 1, 2, 3, 4, 3, 2}));
}

TEST(Stft, InverseRoundTrip) {
    Rng rng(1);
    std::vector<double> x(1024 * 8);
    for (auto& v : x) v = rng.normal();
    auto s = stft(x, 1024, 160);
    auto back = istft(s, 1024, 160, x.size());
    // Sample 0 sees only the zero of the periodic window; the tail past the
    // last full frame is not covered.
    const std::size_t covered = (s.frames - 1) * 160 + 1024;
    for (std::size_t i = 1; i < covered; ++i) ASSERT_NEAR(back[i], x[i], 1e-9) << i;
    for (std::size_t i = covered; i < x.size(); ++i) ASSERT_EQ(back[i], 0.0);
}

TEST(Wav, RoundTripWithinQuantization) {
    const auto path = std::filesystem::temp_directory_path() / "rfm_test.wav";
    auto clip = tone(1000.0, 0.8);
    write_wav(path, clip);
    auto back = read_wav(path);
    ASSERT_EQ(back.samples.size(), clip.samples.size());
    EXPECT_EQ(back.sample_rate, 16000);
    for (std::size_t i = 0; i < clip.samples.size(); i += 97) EXPECT_NEAR(back.samples[i], clip.samples[i], 1.0 / 32767);
    std::filesystem::remove(path);
}

TEST(Wav, RejectsUnsupportedInput) {
    const auto path = std::filesystem::temp_directory_path() / "rfm_bad.wav";
    AudioClip c{std::vector<float>(100, 0.1f), 44100};
    write_wav(path, c);
    EXPECT_THROW(read_wav(path), InputError);
    {
        std::ofstream os(path, std::ios::binary);
        os << "not a wav file at all";
    }
    EXPECT_THROW(read_wav(path), InputError);
    std::filesystem::remove(path);
    EXPECT_THROW(read_wav(path), InputError);
}

TEST(GriffinLim, ResidualNonIncreasing) {
    auto mel = mel_spectrogram(tone(440.0));
    GriffinLimReport report;
    griffin_lim(mel, 32, &report);
    ASSERT_EQ(report.residuals.size(), 32u);
    for (std::size_t i = 1; i < report.residuals.size(); ++i)
        EXPECT_LE(report.residuals[i], report.residuals[i - 1] * (1 + 1e-9)) << i;
    EXPECT_LT(report.residuals.back(), report.residuals.front());
}

TEST(GriffinLim, PureToneFrequencyRecovered) {
    auto out = griffin_lim(mel_spectrogram(tone(440.0)), 32);
    // The mel bottleneck keeps frequency only to mel-bin resolution (about
    // 46 Hz near 440 Hz); the pseudo-inverse puts the peak between the two
    // nearest filter centers.
    const double hz = double(dominant_bin(out)) * 16000.0 / 1024.0;
    const double mel_step = hz_to_mel(8000.0) / 65.0;
    EXPECT_LE(std::abs(hz_to_mel(hz) - hz_to_mel(440.0)), mel_step) << hz;
    EXPECT_LE(std::abs(hz - 440.0), 2 * 16000.0 / 1024.0) << hz;
    float peak = 0;
    for (float s : out.samples) peak = std::max(peak, std::abs(s));
    EXPECT_NEAR(peak, 1.0f, 1e-6);
}

TEST(GriffinLim, SilenceStaysSilent) {
    auto out = griffin_lim(mel_spectrogram(fit_clip({})), 32);
    double rms = 0;
    for (float s : out.samples) rms += double(s) * s;
    EXPECT_LT(std::sqrt(rms / out.samples.size()), 1e-3);
}

TEST(GriffinLim, RejectsZeroIterations) {
    auto mel = mel_spectrogram(fit_clip({}));
    EXPECT_THROW(griffin_lim(mel, 0), ConfigError);
}
