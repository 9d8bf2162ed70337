#pragma once

#include <Eigen/Dense>
#include <algorithm>
#include <cstdint>
#include <filesystem>
#include <fstream>
#include <string>
#include <vector>

#include "audio.hpp"
#include "errors.hpp"
#include "rng.hpp"
#include "tensor.hpp"

// Deterministic stand-in for a learned spectrogram autoencoder: the 64x1024
// mel image is cut into 4x8 blocks (a 16x128 grid) and each 32-value block
// is projected onto c orthonormal directions.
namespace rfm {

inline constexpr std::size_t kLatentH = 16;
inline constexpr std::size_t kLatentW = 128;
inline constexpr std::size_t kBlockRows = kMelBins / kLatentH;    // 4 mel bins
inline constexpr std::size_t kBlockCols = kMelFrames / kLatentW;  // 8 frames
inline constexpr std::size_t kBlockSize = kBlockRows * kBlockCols;

/// [16, 128, c] latent tagged with the codec that produced it.
struct LatentSpec {
    Tensor<float> values;
    std::uint64_t codec_seed = 0;
};

class ToyCodec {
   public:
    ToyCodec(std::size_t channels, std::uint64_t seed) : channels_(channels), seed_(seed), basis_(channels * kBlockSize) {
        if (channels == 0 || channels > kBlockSize)
            throw ConfigError("codec channels must lie in [1, 32], got " + std::to_string(channels));
        Rng rng(mix_seed(seed, 0xC0DEC));
        Eigen::MatrixXd g(kBlockSize, kBlockSize);
        for (Eigen::Index i = 0; i < g.rows(); ++i)
            for (Eigen::Index j = 0; j < g.cols(); ++j) g(i, j) = rng.normal();
        const Eigen::MatrixXd q = Eigen::HouseholderQR<Eigen::MatrixXd>(g).householderQ();
        for (std::size_t c = 0; c < channels; ++c)
            for (std::size_t k = 0; k < kBlockSize; ++k) basis_[c * kBlockSize + k] = q(Eigen::Index(k), Eigen::Index(c));
    }

    std::size_t channels() const { return channels_; }
    std::uint64_t seed() const { return seed_; }

    /// Row c of P (length 32).
    std::span<const double> direction(std::size_t c) const { return {basis_.data() + c * kBlockSize, kBlockSize}; }

    LatentSpec compress(const Tensor<float>& mel) const {
        if (mel.shape() != Shape{kMelBins, kMelFrames}) throw ShapeError("codec expects a 64x1024 mel, got " + to_string(mel.shape()));
        std::vector<float> out(kLatentH * kLatentW * channels_);
        double block[kBlockSize];
        for (std::size_t i = 0; i < kLatentH; ++i)
            for (std::size_t j = 0; j < kLatentW; ++j) {
                for (std::size_t r = 0; r < kBlockRows; ++r)
                    for (std::size_t s = 0; s < kBlockCols; ++s)
                        block[r * kBlockCols + s] = mel[(i * kBlockRows + r) * kMelFrames + j * kBlockCols + s];
                for (std::size_t c = 0; c < channels_; ++c) {
                    double acc = 0;
                    for (std::size_t k = 0; k < kBlockSize; ++k) acc += basis_[c * kBlockSize + k] * block[k];
                    out[(i * kLatentW + j) * channels_ + c] = static_cast<float>(acc);
                }
            }
        return {Tensor<float>({kLatentH, kLatentW, channels_}, std::move(out)), seed_};
    }

    LatentSpec compress(const MelSpec& mel) const { return compress(mel.values); }

    /// Applies P^T blockwise. A latent from a different codec seed is rejected.
    MelSpec decompress(const LatentSpec& latent) const {
        if (latent.codec_seed != seed_)
            throw ContractError("latent was produced by codec seed " + std::to_string(latent.codec_seed) + ", decoder has seed " +
                                std::to_string(seed_));
        return make_mel_spec(decompress_values(latent.values));
    }

    Tensor<float> decompress_values(const Tensor<float>& latent) const {
        if (latent.shape() != Shape{kLatentH, kLatentW, channels_})
            throw ShapeError("codec expects a [16,128," + std::to_string(channels_) + "] latent, got " + to_string(latent.shape()));
        std::vector<float> out(kMelBins * kMelFrames);
        for (std::size_t i = 0; i < kLatentH; ++i)
            for (std::size_t j = 0; j < kLatentW; ++j)
                for (std::size_t r = 0; r < kBlockRows; ++r)
                    for (std::size_t s = 0; s < kBlockCols; ++s) {
                        const std::size_t k = r * kBlockCols + s;
                        double acc = 0;
                        for (std::size_t c = 0; c < channels_; ++c)
                            acc += basis_[c * kBlockSize + k] * latent[(i * kLatentW + j) * channels_ + c];
                        out[(i * kBlockRows + r) * kMelFrames + j * kBlockCols + s] = static_cast<float>(acc);
                    }
        return Tensor<float>({kMelBins, kMelFrames}, std::move(out));
    }

   private:
    std::size_t channels_;
    std::uint64_t seed_;
    std::vector<double> basis_;  // [c][32], orthonormal rows
};

/// 8-bit binary PGM of a [rows, cols] image with row 0 drawn at the bottom
/// and linear min-max scaling. Writes `<path>.txt` with the scaling.
inline void write_pgm(const std::filesystem::path& path, const Tensor<float>& image) {
    if (image.dim() != 2) throw ShapeError("write_pgm expects a 2-d image, got " + to_string(image.shape()));
    const std::size_t rows = image.size(0), cols = image.size(1);
    const auto [lo_it, hi_it] = std::minmax_element(image.data().begin(), image.data().end());
    const float lo = *lo_it, hi = *hi_it;
    const float span = hi > lo ? hi - lo : 1.0f;
    std::ofstream os(path, std::ios::binary);
    if (!os) throw InputError("cannot write " + path.string());
    os << "P5\n" << cols << ' ' << rows << "\n255\n";
    std::vector<unsigned char> line(cols);
    for (std::size_t r = rows; r-- > 0;) {
        for (std::size_t c = 0; c < cols; ++c)
            line[c] = static_cast<unsigned char>(std::lround(255.0f * (image[r * cols + c] - lo) / span));
        os.write(reinterpret_cast<const char*>(line.data()), static_cast<std::streamsize>(cols));
    }
    std::ofstream side(path.string() + ".txt");
    side << "min " << lo << "\nmax " << hi << "\nrows " << rows << "\ncols " << cols << "\norigin bottom-left\n";
}

}  // namespace rfm
