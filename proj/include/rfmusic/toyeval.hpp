#pragma once

#include <algorithm>
#include <cmath>
#include <numbers>
#include <string>
#include <vector>

#include "dataset.hpp"
#include "errors.hpp"
#include "tensor.hpp"

// Desk-scale stand-ins for audio quality metrics: phase-invariant latent
// features, a nearest-centroid attribute classifier and a kernel MMD.
namespace rfm {

/// Features of a [16, 128, c] latent that do not depend on where in time the
/// pattern starts: per-(row, channel) mean and std over time, and per-channel
/// magnitude spectra of the row-averaged time signal (bins 1..64).
inline std::vector<double> latent_features(const Tensor<float>& z) {
    if (z.dim() != 3) throw ShapeError("latent_features expects [h, w, c], got " + to_string(z.shape()));
    const std::size_t h = z.size(0), w = z.size(1), c = z.size(2);
    std::vector<double> f;
    f.reserve(2 * h * c + c * (w / 2));
    for (std::size_t i = 0; i < h; ++i)
        for (std::size_t k = 0; k < c; ++k) {
            double sum = 0, sq = 0;
            for (std::size_t j = 0; j < w; ++j) {
                const double v = z[(i * w + j) * c + k];
                sum += v;
                sq += v * v;
            }
            const double mean = sum / double(w);
            f.push_back(mean);
            f.push_back(std::sqrt(std::max(0.0, sq / double(w) - mean * mean)));
        }
    std::vector<double> sig(w);
    for (std::size_t k = 0; k < c; ++k) {
        for (std::size_t j = 0; j < w; ++j) {
            double acc = 0;
            for (std::size_t i = 0; i < h; ++i) acc += z[(i * w + j) * c + k];
            sig[j] = acc / double(h);
        }
        for (std::size_t q = 1; q <= w / 2; ++q) {
            double re = 0, im = 0;
            for (std::size_t j = 0; j < w; ++j) {
                const double a = 2.0 * std::numbers::pi * double(q * j % w) / double(w);
                re += sig[j] * std::cos(a);
                im -= sig[j] * std::sin(a);
            }
            f.push_back(std::hypot(re, im) / double(w));
        }
    }
    return f;
}

/// Per-feature z-scoring fitted on a reference set.
struct FeatureScaler {
    std::vector<double> mean, scale;

    static FeatureScaler fit(const std::vector<std::vector<double>>& x) {
        if (x.empty()) throw ContractError("feature scaler needs data");
        const std::size_t d = x[0].size();
        FeatureScaler s{std::vector<double>(d, 0.0), std::vector<double>(d, 0.0)};
        for (const auto& r : x)
            for (std::size_t j = 0; j < d; ++j) s.mean[j] += r[j] / double(x.size());
        for (const auto& r : x)
            for (std::size_t j = 0; j < d; ++j) s.scale[j] += (r[j] - s.mean[j]) * (r[j] - s.mean[j]) / double(x.size());
        for (auto& v : s.scale) v = v > 1e-24 ? std::sqrt(v) : 1.0;
        return s;
    }

    std::vector<double> apply(const std::vector<double>& r) const {
        std::vector<double> out(r.size());
        for (std::size_t j = 0; j < r.size(); ++j) out[j] = (r[j] - mean[j]) / scale[j];
        return out;
    }
};

inline double squared_distance(const std::vector<double>& a, const std::vector<double>& b) {
    double d = 0;
    for (std::size_t j = 0; j < a.size(); ++j) d += (a[j] - b[j]) * (a[j] - b[j]);
    return d;
}

/// Two centroids per attribute axis in scaled feature space.
struct AttributeClassifier {
    FeatureScaler scaler;
    std::array<std::array<std::vector<double>, 2>, kAttributeAxes> centroids;

    static AttributeClassifier fit(const std::vector<std::vector<double>>& features, const std::vector<Attributes>& labels) {
        if (features.size() != labels.size() || features.empty()) throw ContractError("classifier needs matching, non-empty data");
        AttributeClassifier c;
        c.scaler = FeatureScaler::fit(features);
        const std::size_t d = features[0].size();
        for (std::size_t ax = 0; ax < kAttributeAxes; ++ax) {
            std::array<std::size_t, 2> n{};
            for (auto& cen : c.centroids[ax]) cen.assign(d, 0.0);
            for (std::size_t i = 0; i < features.size(); ++i) {
                const auto x = c.scaler.apply(features[i]);
                const int k = labels[i].v[ax];
                for (std::size_t j = 0; j < d; ++j) c.centroids[ax][k][j] += x[j];
                ++n[k];
            }
            for (int k = 0; k < 2; ++k) {
                if (n[k] == 0) throw ContractError(std::string("no reference examples for ") + kAttributeWords[ax][k]);
                for (auto& v : c.centroids[ax][k]) v /= double(n[k]);
            }
        }
        return c;
    }

    Attributes predict(const std::vector<double>& features) const {
        const auto x = scaler.apply(features);
        Attributes a;
        for (std::size_t ax = 0; ax < kAttributeAxes; ++ax)
            a.v[ax] = squared_distance(x, centroids[ax][1]) < squared_distance(x, centroids[ax][0]) ? 1 : 0;
        return a;
    }
};

/// Fraction of predictions that match the target, per axis.
inline std::array<double, kAttributeAxes> attribute_accuracy(const AttributeClassifier& clf,
                                                             const std::vector<std::vector<double>>& features,
                                                             const std::vector<Attributes>& targets) {
    std::array<double, kAttributeAxes> acc{};
    for (std::size_t i = 0; i < features.size(); ++i) {
        const auto p = clf.predict(features[i]);
        for (std::size_t ax = 0; ax < kAttributeAxes; ++ax) acc[ax] += p.v[ax] == targets[i].v[ax];
    }
    for (auto& a : acc) a /= double(features.size());
    return acc;
}

/// Median pairwise Euclidean distance.
inline double median_distance(const std::vector<std::vector<double>>& x) {
    std::vector<double> d;
    for (std::size_t i = 0; i < x.size(); ++i)
        for (std::size_t j = i + 1; j < x.size(); ++j) d.push_back(std::sqrt(squared_distance(x[i], x[j])));
    if (d.empty()) throw ContractError("median distance needs at least two points");
    std::nth_element(d.begin(), d.begin() + std::ptrdiff_t(d.size() / 2), d.end());
    return d[d.size() / 2];
}

/// Square root of the biased (V-statistic) MMD^2 with a Gaussian kernel
/// exp(-|a-b|^2 / (2 bw^2)).
inline double mmd_rbf(const std::vector<std::vector<double>>& x, const std::vector<std::vector<double>>& y, double bandwidth) {
    if (x.empty() || y.empty()) throw ContractError("MMD needs non-empty samples");
    const double g = 1.0 / (2.0 * bandwidth * bandwidth);
    auto mean_k = [&](const auto& a, const auto& b) {
        double s = 0;
        for (const auto& p : a)
            for (const auto& q : b) s += std::exp(-g * squared_distance(p, q));
        return s / double(a.size() * b.size());
    };
    return std::sqrt(std::max(0.0, mean_k(x, x) + mean_k(y, y) - 2.0 * mean_k(x, y)));
}

struct ArmReport {
    std::string name;
    double mmd = 0;
    std::array<double, kAttributeAxes> accuracy{};
};

/// Held-out reference pool for evaluation: synth indices starting at
/// `first`, split into two halves for the null comparison.
struct EvalReference {
    std::vector<std::vector<double>> split_a, split_b;
    std::vector<Attributes> labels_a, labels_b;
    AttributeClassifier classifier;
    FeatureScaler scaler;
    double bandwidth = 1.0;
    double null_mmd = 0;

    static EvalReference build(const SynthRecipe& recipe, const ToyCodec& codec, std::size_t n, std::uint64_t first) {
        EvalReference r;
        auto data = synth_dataset(recipe, codec, first, 2 * n);
        std::vector<std::vector<double>> all;
        std::vector<Attributes> labels;
        for (const auto& ex : data) {
            all.push_back(latent_features(ex.latent.values));
            labels.push_back(ex.attributes);
        }
        r.split_a.assign(all.begin(), all.begin() + std::ptrdiff_t(n));
        r.split_b.assign(all.begin() + std::ptrdiff_t(n), all.end());
        r.labels_a.assign(labels.begin(), labels.begin() + std::ptrdiff_t(n));
        r.labels_b.assign(labels.begin() + std::ptrdiff_t(n), labels.end());
        r.classifier = AttributeClassifier::fit(all, labels);
        r.scaler = r.classifier.scaler;
        std::vector<std::vector<double>> scaled;
        for (const auto& f : all) scaled.push_back(r.scaler.apply(f));
        r.bandwidth = median_distance(scaled);
        r.null_mmd = r.mmd_to_a(r.split_b);
        return r;
    }

    double mmd_to_a(const std::vector<std::vector<double>>& features) const {
        std::vector<std::vector<double>> a, b;
        for (const auto& f : split_a) a.push_back(scaler.apply(f));
        for (const auto& f : features) b.push_back(scaler.apply(f));
        return mmd_rbf(a, b, bandwidth);
    }

    ArmReport evaluate(std::string name, const std::vector<Tensor<float>>& latents, const std::vector<Attributes>& targets) const {
        std::vector<std::vector<double>> f;
        for (const auto& z : latents) f.push_back(latent_features(z));
        return {std::move(name), mmd_to_a(f), attribute_accuracy(classifier, f, targets)};
    }
};

/// n prompts cycling through the eight attribute phrases.
inline std::vector<Attributes> balanced_targets(std::size_t n) {
    std::vector<Attributes> out;
    for (std::size_t i = 0; i < n; ++i) {
        const int m = int(i % 8);
        out.push_back(Attributes{{m >> 2, (m >> 1) & 1, m & 1}});
    }
    return out;
}

}  // namespace rfm
