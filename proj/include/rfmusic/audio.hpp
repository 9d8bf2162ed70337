#pragma once

#include <fftw3.h>

#include <Eigen/Dense>
#include <algorithm>
#include <bit>
#include <cmath>
#include <complex>
#include <cstdint>
#include <filesystem>
#include <fstream>
#include <memory>
#include <numbers>
#include <span>
#include <string>
#include <vector>

#include "errors.hpp"
#include "rng.hpp"
#include "tensor.hpp"

// Audio front-end: 16 kHz mono clips, Hann STFT, Slaney mel filterbank,
// log-mel extraction and Griffin-Lim phase recovery.
namespace rfm {

inline constexpr int kSampleRate = 16000;
inline constexpr std::size_t kClipSamples = 163840;  // 10.24 s
inline constexpr std::size_t kWindow = 1024;
inline constexpr std::size_t kHop = 160;
inline constexpr std::size_t kMelBins = 64;
inline constexpr std::size_t kMelFrames = 1024;
inline constexpr double kMelFmin = 0.0;
inline constexpr double kMelFmax = 8000.0;
inline constexpr double kLogFloor = 1e-5;

struct AudioClip {
    std::vector<float> samples;
    int sample_rate = kSampleRate;
};

/// Zero-pads or trims to exactly one clip length.
inline AudioClip fit_clip(std::vector<float> samples, int sample_rate = kSampleRate) {
    samples.resize(kClipSamples, 0.0f);
    return {std::move(samples), sample_rate};
}

// ---- WAV (RIFF, PCM 16-bit, mono) ----

namespace detail {

inline void put_u32(std::ostream& os, std::uint32_t v) {
    const char b[4] = {char(v & 0xff), char((v >> 8) & 0xff), char((v >> 16) & 0xff), char((v >> 24) & 0xff)};
    os.write(b, 4);
}

inline void put_u16(std::ostream& os, std::uint16_t v) {
    const char b[2] = {char(v & 0xff), char((v >> 8) & 0xff)};
    os.write(b, 2);
}

inline std::uint32_t get_u32(const unsigned char* p) { return p[0] | (p[1] << 8) | (p[2] << 16) | (std::uint32_t(p[3]) << 24); }
inline std::uint16_t get_u16(const unsigned char* p) { return std::uint16_t(p[0] | (p[1] << 8)); }

}  // namespace detail

inline void write_wav(const std::filesystem::path& path, const AudioClip& clip) {
    std::ofstream os(path, std::ios::binary);
    if (!os) throw InputError("cannot write " + path.string());
    const auto n = static_cast<std::uint32_t>(clip.samples.size());
    os.write("RIFF", 4);
    detail::put_u32(os, 36 + 2 * n);
    os.write("WAVEfmt ", 8);
    detail::put_u32(os, 16);
    detail::put_u16(os, 1);  // PCM
    detail::put_u16(os, 1);  // mono
    detail::put_u32(os, std::uint32_t(clip.sample_rate));
    detail::put_u32(os, std::uint32_t(clip.sample_rate) * 2);
    detail::put_u16(os, 2);
    detail::put_u16(os, 16);
    os.write("data", 4);
    detail::put_u32(os, 2 * n);
    for (float s : clip.samples) {
        const float c = std::clamp(s, -1.0f, 1.0f);
        detail::put_u16(os, static_cast<std::uint16_t>(static_cast<std::int16_t>(std::lrint(c * 32767.0f))));
    }
    if (!os) throw InputError("write failed: " + path.string());
}

/// Reads PCM16 mono 16 kHz; other formats are rejected.
inline AudioClip read_wav(const std::filesystem::path& path) {
    std::ifstream is(path, std::ios::binary);
    if (!is) throw InputError("cannot open " + path.string());
    std::vector<unsigned char> buf((std::istreambuf_iterator<char>(is)), std::istreambuf_iterator<char>());
    if (buf.size() < 12 || std::string(buf.begin(), buf.begin() + 4) != "RIFF" || std::string(buf.begin() + 8, buf.begin() + 12) != "WAVE")
        throw InputError(path.string() + ": not a RIFF/WAVE file");
    std::size_t pos = 12;
    bool have_fmt = false;
    AudioClip clip;
    while (pos + 8 <= buf.size()) {
        const std::string id(buf.begin() + long(pos), buf.begin() + long(pos) + 4);
        const std::uint32_t size = detail::get_u32(&buf[pos + 4]);
        const std::size_t body = pos + 8;
        if (body + size > buf.size()) throw InputError(path.string() + ": truncated chunk '" + id + "'");
        if (id == "fmt ") {
            if (size < 16) throw InputError(path.string() + ": short fmt chunk");
            const auto format = detail::get_u16(&buf[body]);
            const auto channels = detail::get_u16(&buf[body + 2]);
            clip.sample_rate = int(detail::get_u32(&buf[body + 4]));
            const auto bits = detail::get_u16(&buf[body + 14]);
            if (format != 1 || channels != 1 || bits != 16)
                throw InputError(path.string() + ": only PCM 16-bit mono is supported");
            if (clip.sample_rate != kSampleRate)
                throw InputError(path.string() + ": sample rate " + std::to_string(clip.sample_rate) + " Hz, expected 16000");
            have_fmt = true;
        } else if (id == "data") {
            if (!have_fmt) throw InputError(path.string() + ": data chunk before fmt chunk");
            clip.samples.resize(size / 2);
            for (std::size_t i = 0; i < clip.samples.size(); ++i)
                clip.samples[i] = float(std::int16_t(detail::get_u16(&buf[body + 2 * i]))) / 32767.0f;
            for (float& s : clip.samples) s = std::clamp(s, -1.0f, 1.0f);
            return clip;
        }
        pos = body + size + (size & 1);
    }
    throw InputError(path.string() + ": no data chunk");
}

// ---- STFT ----

/// Periodic Hann window.
inline std::vector<double> hann_window(std::size_t n) {
    std::vector<double> w(n);
    for (std::size_t i = 0; i < n; ++i) w[i] = 0.5 - 0.5 * std::cos(2.0 * std::numbers::pi * double(i) / double(n));
    return w;
}

/// Frame-major complex spectrogram, `bins` = n_fft/2 + 1.
struct Spectrum {
    std::size_t frames = 0, bins = 0;
    std::vector<std::complex<double>> values;

    std::complex<double>& at(std::size_t f, std::size_t k) { return values[f * bins + k]; }
    const std::complex<double>& at(std::size_t f, std::size_t k) const { return values[f * bins + k]; }
};

/// Owns one real-to-complex and one complex-to-real FFTW plan of size n.
class FftPlan {
   public:
    explicit FftPlan(std::size_t n)
        : n_(n),
          real_(static_cast<double*>(fftw_malloc(sizeof(double) * n)), fftw_free),
          cplx_(static_cast<fftw_complex*>(fftw_malloc(sizeof(fftw_complex) * (n / 2 + 1))), fftw_free) {
        forward_ = fftw_plan_dft_r2c_1d(int(n), real_.get(), cplx_.get(), FFTW_ESTIMATE);
        inverse_ = fftw_plan_dft_c2r_1d(int(n), cplx_.get(), real_.get(), FFTW_ESTIMATE);
    }
    ~FftPlan() {
        fftw_destroy_plan(forward_);
        fftw_destroy_plan(inverse_);
    }
    FftPlan(const FftPlan&) = delete;
    FftPlan& operator=(const FftPlan&) = delete;

    std::size_t size() const { return n_; }

    void forward(const double* in, std::complex<double>* out) {
        std::copy_n(in, n_, real_.get());
        fftw_execute(forward_);
        for (std::size_t k = 0; k <= n_ / 2; ++k) out[k] = {cplx_.get()[k][0], cplx_.get()[k][1]};
    }

    /// Unnormalized inverse (sum over bins), Hermitian extension implied.
    void inverse(const std::complex<double>* in, double* out) {
        for (std::size_t k = 0; k <= n_ / 2; ++k) {
            cplx_.get()[k][0] = in[k].real();
            cplx_.get()[k][1] = in[k].imag();
        }
        fftw_execute(inverse_);
        std::copy_n(real_.get(), n_, out);
    }

   private:
    std::size_t n_;
    std::unique_ptr<double, void (*)(void*)> real_;
    std::unique_ptr<fftw_complex, void (*)(void*)> cplx_;
    fftw_plan forward_ = nullptr, inverse_ = nullptr;
};

/// Hann-windowed STFT without padding: frames start at multiples of hop and
/// lie fully inside x.
inline Spectrum stft(std::span<const double> x, std::size_t n_fft, std::size_t hop) {
    if (x.size() < n_fft) throw InputError("signal shorter than one STFT window");
    FftPlan plan(n_fft);
    const auto w = hann_window(n_fft);
    Spectrum s;
    s.frames = 1 + (x.size() - n_fft) / hop;
    s.bins = n_fft / 2 + 1;
    s.values.resize(s.frames * s.bins);
    std::vector<double> frame(n_fft);
    for (std::size_t f = 0; f < s.frames; ++f) {
        for (std::size_t i = 0; i < n_fft; ++i) frame[i] = x[f * hop + i] * w[i];
        plan.forward(frame.data(), &s.values[f * s.bins]);
    }
    return s;
}

/// Least-squares inverse of `stft` onto a signal of `length` samples.
inline std::vector<double> istft(const Spectrum& s, std::size_t n_fft, std::size_t hop, std::size_t length) {
    FftPlan plan(n_fft);
    const auto w = hann_window(n_fft);
    std::vector<double> out(length, 0.0), norm(length, 0.0), frame(n_fft);
    for (std::size_t f = 0; f < s.frames; ++f) {
        plan.inverse(&s.values[f * s.bins], frame.data());
        for (std::size_t i = 0; i < n_fft && f * hop + i < length; ++i) {
            out[f * hop + i] += w[i] * frame[i] / double(n_fft);
            norm[f * hop + i] += w[i] * w[i];
        }
    }
    for (std::size_t i = 0; i < length; ++i) out[i] = norm[i] > 1e-12 ? out[i] / norm[i] : 0.0;
    return out;
}

/// Mirror padding without repeating the edge sample.
inline std::vector<double> reflect_pad(std::span<const double> x, std::size_t pad) {
    if (x.size() <= pad) throw InputError("signal too short for reflect padding");
    std::vector<double> out(x.size() + 2 * pad);
    for (std::size_t i = 0; i < pad; ++i) {
        out[i] = x[pad - i];
        out[pad + x.size() + i] = x[x.size() - 2 - i];
    }
    std::copy(x.begin(), x.end(), out.begin() + long(pad));
    return out;
}

// ---- Mel filterbank (Slaney scale and area normalization) ----

inline double hz_to_mel(double hz) {
    constexpr double f_sp = 200.0 / 3.0, min_log_hz = 1000.0, min_log_mel = min_log_hz / f_sp;
    const double logstep = std::log(6.4) / 27.0;
    return hz < min_log_hz ? hz / f_sp : min_log_mel + std::log(hz / min_log_hz) / logstep;
}

inline double mel_to_hz(double mel) {
    constexpr double f_sp = 200.0 / 3.0, min_log_hz = 1000.0, min_log_mel = min_log_hz / f_sp;
    const double logstep = std::log(6.4) / 27.0;
    return mel < min_log_mel ? mel * f_sp : min_log_hz * std::exp(logstep * (mel - min_log_mel));
}

/// Row-major [n_mels][n_fft/2+1] triangular weights.
struct MelFilterbank {
    std::size_t mels = 0, bins = 0;
    std::vector<double> weights;

    static MelFilterbank make(std::size_t n_mels = kMelBins, std::size_t n_fft = kWindow, int sr = kSampleRate,
                              double fmin = kMelFmin, double fmax = kMelFmax) {
        MelFilterbank fb;
        fb.mels = n_mels;
        fb.bins = n_fft / 2 + 1;
        fb.weights.assign(n_mels * fb.bins, 0.0);
        const double lo = hz_to_mel(fmin), hi = hz_to_mel(fmax);
        std::vector<double> edges(n_mels + 2);
        for (std::size_t i = 0; i < edges.size(); ++i) edges[i] = mel_to_hz(lo + (hi - lo) * double(i) / double(n_mels + 1));
        for (std::size_t m = 0; m < n_mels; ++m) {
            const double enorm = 2.0 / (edges[m + 2] - edges[m]);
            for (std::size_t k = 0; k < fb.bins; ++k) {
                const double f = double(k) * sr / double(n_fft);
                const double up = (f - edges[m]) / (edges[m + 1] - edges[m]);
                const double down = (edges[m + 2] - f) / (edges[m + 2] - edges[m + 1]);
                fb.weights[m * fb.bins + k] = enorm * std::max(0.0, std::min(up, down));
            }
        }
        return fb;
    }

    /// Minimum-norm right inverse, [bins][mels].
    std::vector<double> pseudo_inverse() const {
        Eigen::MatrixXd m(mels, bins);
        for (std::size_t i = 0; i < mels; ++i)
            for (std::size_t k = 0; k < bins; ++k) m(Eigen::Index(i), Eigen::Index(k)) = weights[i * bins + k];
        Eigen::MatrixXd pinv = m.completeOrthogonalDecomposition().pseudoInverse();
        std::vector<double> out(bins * mels);
        for (std::size_t k = 0; k < bins; ++k)
            for (std::size_t i = 0; i < mels; ++i) out[k * mels + i] = pinv(Eigen::Index(k), Eigen::Index(i));
        return out;
    }
};

/// Log-mel magnitudes [64, 1024] plus their summary statistics.
struct MelSpec {
    Tensor<float> values;
    double mean = 0.0, stddev = 0.0;
};

inline MelSpec make_mel_spec(Tensor<float> values) {
    MelSpec m{std::move(values)};
    for (float v : m.values.data()) m.mean += v;
    m.mean /= double(m.values.numel());
    for (float v : m.values.data()) m.stddev += (v - m.mean) * (v - m.mean);
    m.stddev = std::sqrt(m.stddev / double(m.values.numel()));
    return m;
}

/// Centered (reflect-padded) Hann STFT, window 1024, hop 160, Slaney mel
/// magnitudes over 0-8 kHz, natural log with floor 1e-5. A 10.24 s clip
/// yields 1025 centered frames; the first 1024 = ceil(len/hop) are kept.
inline MelSpec mel_spectrogram(const AudioClip& clip) {
    if (clip.sample_rate != kSampleRate)
        throw InputError("mel_spectrogram: sample rate " + std::to_string(clip.sample_rate) + " Hz, expected 16000");
    if (clip.samples.size() != kClipSamples)
        throw InputError("mel_spectrogram: clip has " + std::to_string(clip.samples.size()) + " samples, expected 163840");
    for (float s : clip.samples)
        if (!std::isfinite(s) || std::abs(s) > 1.0f) throw InputError("mel_spectrogram: samples must be finite and within [-1, 1]");
    static const MelFilterbank fb = MelFilterbank::make();
    std::vector<double> x(clip.samples.begin(), clip.samples.end());
    const auto padded = reflect_pad(x, kWindow / 2);
    const auto spec = stft(padded, kWindow, kHop);
    std::vector<float> out(kMelBins * kMelFrames);
    std::vector<double> mag(spec.bins);
    for (std::size_t f = 0; f < kMelFrames; ++f) {
        for (std::size_t k = 0; k < spec.bins; ++k) mag[k] = std::abs(spec.at(f, k));
        for (std::size_t m = 0; m < kMelBins; ++m) {
            double acc = 0;
            for (std::size_t k = 0; k < spec.bins; ++k) acc += fb.weights[m * fb.bins + k] * mag[k];
            out[m * kMelFrames + f] = static_cast<float>(std::log(std::max(acc, kLogFloor)));
        }
    }
    return make_mel_spec(Tensor<float>({kMelBins, kMelFrames}, std::move(out)));
}

// ---- Griffin-Lim ----

struct GriffinLimReport {
    std::vector<double> residuals;  // spectral convergence after each iteration
};

/// Mel -> linear magnitude via the filterbank pseudo-inverse (clamped at 0),
/// then plain Griffin-Lim. The log floor is subtracted before inversion so a
/// silent mel maps to an exactly silent waveform. Output is peak-normalized
/// to 1 unless silent.
inline AudioClip griffin_lim(const MelSpec& mel, int iters = 32, GriffinLimReport* report = nullptr, std::uint64_t seed = 0) {
    if (iters < 1) throw ConfigError("griffin_lim needs at least one iteration");
    if (mel.values.shape() != Shape{kMelBins, kMelFrames}) throw ShapeError("griffin_lim expects a 64x1024 mel spectrogram");
    static const MelFilterbank fb = MelFilterbank::make();
    static const std::vector<double> pinv = fb.pseudo_inverse();

    Spectrum target;
    target.frames = kMelFrames;
    target.bins = fb.bins;
    target.values.resize(kMelFrames * fb.bins);
    std::vector<double> lin(kMelBins);
    for (std::size_t f = 0; f < kMelFrames; ++f) {
        for (std::size_t m = 0; m < kMelBins; ++m) {
            // Values at the floor (up to f32 rounding of log 1e-5) carry no energy.
            const double e = std::exp(double(mel.values[m * kMelFrames + f]));
            lin[m] = e > kLogFloor * (1.0 + 1e-4) ? e - kLogFloor : 0.0;
        }
        for (std::size_t k = 0; k < fb.bins; ++k) {
            double acc = 0;
            for (std::size_t m = 0; m < kMelBins; ++m) acc += pinv[k * kMelBins + m] * lin[m];
            target.at(f, k) = std::max(acc, 0.0);
        }
    }
    double target_norm = 0;
    for (const auto& v : target.values) target_norm += std::norm(v);
    target_norm = std::sqrt(target_norm);

    // Work on the frame-covered domain of the centered transform, then drop
    // the half-window margins.
    const std::size_t length = (kMelFrames - 1) * kHop + kWindow;
    Rng rng(seed);
    Spectrum est = target;
    for (auto& v : est.values) v = std::polar(std::abs(v), 2.0 * std::numbers::pi * rng.uniform());
    std::vector<double> x;
    for (int it = 0; it < iters; ++it) {
        x = istft(est, kWindow, kHop, length);
        const auto rebuilt = stft(x, kWindow, kHop);
        double err = 0;
        for (std::size_t i = 0; i < est.values.size(); ++i) {
            const double a = std::abs(rebuilt.values[i]), s = std::abs(target.values[i]);
            err += (a - s) * (a - s);
            est.values[i] = a > 0 ? rebuilt.values[i] * (s / a) : std::complex<double>(s, 0.0);
        }
        if (report) report->residuals.push_back(target_norm > 0 ? std::sqrt(err) / target_norm : std::sqrt(err));
    }
    x = istft(est, kWindow, kHop, length);

    std::vector<float> out(kClipSamples);
    double peak = 0;
    for (std::size_t i = 0; i < kClipSamples; ++i) peak = std::max(peak, std::abs(x[i + kWindow / 2]));
    const double gain = peak > 0 ? 1.0 / peak : 0.0;
    for (std::size_t i = 0; i < kClipSamples; ++i) out[i] = static_cast<float>(x[i + kWindow / 2] * gain);
    return {std::move(out), kSampleRate};
}

/// Sine of the given frequency and amplitude over one clip.
inline AudioClip tone(double hz, double amplitude = 0.5) {
    std::vector<float> s(kClipSamples);
    for (std::size_t i = 0; i < s.size(); ++i)
        s[i] = static_cast<float>(amplitude * std::sin(2.0 * std::numbers::pi * hz * double(i) / kSampleRate));
    return {std::move(s), kSampleRate};
}

}  // namespace rfm
