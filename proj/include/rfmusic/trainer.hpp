#pragma once

#include <json.hpp>

#include <chrono>
#include <cmath>
#include <cstdint>
#include <functional>
#include <string>
#include <vector>

#include "conditioning.hpp"
#include "dataset.hpp"
#include "errors.hpp"
#include "model.hpp"
#include "model_config.hpp"
#include "rectflow.hpp"
#include "rng.hpp"
#include "tensor.hpp"

namespace rfm {

enum class Objective { kRF, kDDIM };

inline Objective parse_objective(std::string_view s) {
    if (s == "rf") return Objective::kRF;
    if (s == "ddim") return Objective::kDDIM;
    throw ConfigError("objective must be rf or ddim, got '" + std::string(s) + "'");
}

inline std::string to_string(Objective o) { return o == Objective::kRF ? "rf" : "ddim"; }

struct TrainConfig {
    double lr = 1e-4;
    std::size_t batch_size = 128;
    double grad_clip = 1.0;
    double ema_decay = 0.99;
    std::size_t ema_every = 100;
    double cond_dropout = 0.1;
    std::size_t steps = 1000;
    Objective objective = Objective::kRF;
    std::uint64_t seed = 0;
    double beta1 = 0.9;
    double beta2 = 0.999;
    double adam_eps = 1e-8;
    double weight_decay = 0.0;
    TimeSampling time_sampling = TimeSampling::kUniform;

    void validate() const {
        if (!(lr >= 0)) throw ConfigError("lr must be non-negative");
        if (batch_size == 0) throw ConfigError("batch_size must be positive");
        if (!(grad_clip > 0)) throw ConfigError("grad_clip must be positive");
        if (!(ema_decay >= 0 && ema_decay <= 1)) throw ConfigError("ema_decay must lie in [0,1]");
        if (ema_every == 0) throw ConfigError("ema_every must be positive");
        if (!(cond_dropout >= 0 && cond_dropout <= 1)) throw ConfigError("cond_dropout must lie in [0,1]");
        if (!(beta1 >= 0 && beta1 < 1 && beta2 >= 0 && beta2 < 1)) throw ConfigError("Adam betas must lie in [0,1)");
        if (!(adam_eps > 0)) throw ConfigError("adam_eps must be positive");
        if (!(weight_decay >= 0)) throw ConfigError("weight_decay must be non-negative");
    }

    bool operator==(const TrainConfig&) const = default;
};

inline nlohmann::json to_json(const TrainConfig& c) {
    return {{"lr", c.lr},
            {"batch_size", c.batch_size},
            {"grad_clip", c.grad_clip},
            {"ema_decay", c.ema_decay},
            {"ema_every", c.ema_every},
            {"cond_dropout", c.cond_dropout},
            {"steps", c.steps},
            {"objective", to_string(c.objective)},
            {"seed", c.seed},
            {"beta1", c.beta1},
            {"beta2", c.beta2},
            {"adam_eps", c.adam_eps},
            {"weight_decay", c.weight_decay},
            {"time_sampling", c.time_sampling == TimeSampling::kUniform ? "uniform" : "logit_normal"}};
}

/// Fields absent from `j` keep the values already in `c`.
inline void merge_json(TrainConfig& c, const nlohmann::json& j) {
    c.lr = j.value("lr", c.lr);
    c.batch_size = j.value("batch_size", c.batch_size);
    c.grad_clip = j.value("grad_clip", c.grad_clip);
    c.ema_decay = j.value("ema_decay", c.ema_decay);
    c.ema_every = j.value("ema_every", c.ema_every);
    c.cond_dropout = j.value("cond_dropout", c.cond_dropout);
    c.steps = j.value("steps", c.steps);
    if (j.contains("objective")) c.objective = parse_objective(j["objective"].get<std::string>());
    c.seed = j.value("seed", c.seed);
    c.beta1 = j.value("beta1", c.beta1);
    c.beta2 = j.value("beta2", c.beta2);
    c.adam_eps = j.value("adam_eps", c.adam_eps);
    c.weight_decay = j.value("weight_decay", c.weight_decay);
    if (j.contains("time_sampling")) c.time_sampling = parse_time_sampling(j["time_sampling"].get<std::string>());
}

// ---------------------------------------------------------------------------
// Optimizer pieces

/// First and second moments, one buffer per parameter, plus the step count
/// used for bias correction.
template <Real T>
struct AdamState {
    std::uint64_t step = 0;
    std::vector<std::vector<T>> m, v;

    void init(std::span<const Tensor<T>> params) {
        step = 0;
        m.clear();
        v.clear();
        for (const auto& p : params) {
            m.emplace_back(p.numel(), T(0));
            v.emplace_back(p.numel(), T(0));
        }
    }
};

/// Bias-corrected Adam with decoupled weight decay:
/// p <- p (1 - lr wd) - lr m_hat / (sqrt(v_hat) + eps).
template <Real T>
void adamw_step(std::span<Tensor<T>> params, AdamState<T>& s, double lr, double beta1 = 0.9, double beta2 = 0.999,
                double eps = 1e-8, double wd = 0.0) {
    if (s.m.size() != params.size()) throw ContractError("Adam state does not match the parameter list");
    ++s.step;
    const double bc1 = 1.0 - std::pow(beta1, double(s.step));
    const double bc2 = 1.0 - std::pow(beta2, double(s.step));
    for (std::size_t i = 0; i < params.size(); ++i) {
        auto p = params[i].mutable_data();
        auto g = params[i].grad();
        auto& m = s.m[i];
        auto& v = s.v[i];
        for (std::size_t j = 0; j < p.size(); ++j) {
            const double gj = g[j];
            m[j] = static_cast<T>(beta1 * m[j] + (1.0 - beta1) * gj);
            v[j] = static_cast<T>(beta2 * v[j] + (1.0 - beta2) * gj * gj);
            const double mh = m[j] / bc1, vh = v[j] / bc2;
            double pj = p[j];
            if (wd != 0.0) pj *= 1.0 - lr * wd;
            p[j] = static_cast<T>(pj - lr * mh / (std::sqrt(vh) + eps));
        }
    }
}

template <Real T>
double global_grad_norm(std::span<const Tensor<T>> params) {
    double sq = 0;
    for (const auto& p : params)
        for (T g : p.grad()) sq += double(g) * double(g);
    return std::sqrt(sq);
}

/// Scales all gradients by min(1, max_norm / (norm + 1e-6)); returns the
/// pre-clip global L2 norm.
template <Real T>
double clip_grad_norm(std::span<Tensor<T>> params, double max_norm) {
    const double norm = global_grad_norm(std::span<const Tensor<T>>(params.data(), params.size()));
    const double scale = std::min(1.0, max_norm / (norm + 1e-6));
    if (scale < 1.0)
        for (auto& p : params)
            for (T& g : p.mutable_grad()) g = static_cast<T>(g * scale);
    return norm;
}

/// ema <- decay ema + (1 - decay) w, elementwise.
template <Real T>
void ema_update(std::span<Tensor<T>> ema, std::span<const Tensor<T>> weights, double decay) {
    if (ema.size() != weights.size()) throw ContractError("EMA and weight lists differ in length");
    for (std::size_t i = 0; i < ema.size(); ++i) {
        auto e = ema[i].mutable_data();
        auto w = weights[i].data();
        if (e.size() != w.size()) throw ShapeError("EMA tensor " + std::to_string(i) + " size mismatch");
        for (std::size_t j = 0; j < e.size(); ++j) e[j] = static_cast<T>(decay * e[j] + (1.0 - decay) * w[j]);
    }
}

/// EMA fires after completed step counts divisible by `every`.
inline bool ema_due(std::uint64_t step, std::size_t every) { return step > 0 && step % every == 0; }

// ---------------------------------------------------------------------------
// Training state

/// Standardized latents with their pre-encoded captions.
struct TrainData {
    std::vector<Tensor<float>> latents;  // [h, w, c], standardized
    std::vector<TextCondition> conditions;
    std::vector<std::string> captions;

    std::size_t size() const { return latents.size(); }
};

inline TrainData make_train_data(std::span<const TrainExample> examples, const LatentStats& stats, const TextEncoders& enc) {
    TrainData d;
    for (const auto& ex : examples) {
        d.latents.push_back(standardize(ex.latent.values, stats));
        d.conditions.push_back(enc.encode(ex.caption));
        d.captions.push_back(ex.caption);
    }
    return d;
}

struct Batch {
    Tensor<float> x0;  // [B, h, w, c]
    std::vector<TextCondition> conditions;
};

struct StepMetrics {
    std::uint64_t step = 0;
    double loss = 0;
    double grad_norm = 0;  // before clipping
    double lr = 0;
    double wall_ms = 0;

    nlohmann::json to_json() const {
        return {{"step", step}, {"loss", loss}, {"grad_norm", grad_norm}, {"lr", lr}, {"wall_ms", wall_ms}};
    }
};

struct TrainState {
    ModelConfig model;
    TrainConfig train;
    ModelWeights<float> weights;
    ModelWeights<float> ema;
    AdamState<float> adam;
    std::uint64_t step = 0;
    Rng rng;
    LatentStats stats;

    static TrainState create(const ModelConfig& model, const TrainConfig& train, LatentStats stats) {
        model.validate();
        train.validate();
        TrainState s;
        s.model = model;
        s.train = train;
        Rng init_rng(mix_seed(train.seed, 0x1417));
        s.weights = ModelWeights<float>::init(model, init_rng);
        s.ema = s.weights.clone(false);
        auto params = s.weights.parameters();
        s.adam.init(params);
        s.rng = Rng(mix_seed(train.seed, 0x7EA1));
        s.stats = std::move(stats);
        return s;
    }
};

/// Draws batch indices (with replacement) then applies condition dropout,
/// both from the state's stream.
inline Batch sample_batch(const TrainData& data, TrainState& s) {
    if (data.size() == 0) throw ContractError("empty training set");
    const std::size_t b = s.train.batch_size;
    const auto& shape = data.latents[0].shape();
    std::vector<float> x;
    x.reserve(b * data.latents[0].numel());
    Batch out;
    std::vector<std::size_t> idx(b);
    for (auto& i : idx) i = s.rng.index(data.size());
    for (std::size_t i : idx) {
        auto v = data.latents[i].data();
        x.insert(x.end(), v.begin(), v.end());
        out.conditions.push_back(drop_conditions(data.conditions[i], s.train.cond_dropout, s.rng));
    }
    out.x0 = Tensor<float>({b, shape[0], shape[1], shape[2]}, std::move(x));
    return out;
}

inline const DDPMSchedule& default_ddpm_schedule() {
    static const DDPMSchedule s = DDPMSchedule::linear();
    return s;
}

/// Objective loss -> backward -> clip -> AdamW -> EMA when due. Non-finite
/// loss or gradients abort with the step index and the tensor name.
inline StepMetrics train_step(TrainState& s, const Batch& batch) {
    const auto t0 = std::chrono::steady_clock::now();
    const std::uint64_t step = s.step + 1;
    auto cond = make_cond_batch<float>(std::span<const TextCondition>(batch.conditions), s.model.d_fine, s.model.d_coarse);
    VelocityModel<float> model{&s.weights, &s.model};
    s.weights.zero_grad();
    Tensor<float> loss;
    try {
        loss = s.train.objective == Objective::kRF
                   ? rf_loss(model, batch.x0, cond, s.rng, s.train.time_sampling)
                   : ddpm_eps_loss(model, batch.x0, cond, s.rng, default_ddpm_schedule());
    } catch (const NumericError& e) {
        throw NumericError("step " + std::to_string(step) + ": " + e.what());
    }
    loss.backward();
    auto named = s.weights.named_parameters();
    for (const auto& [name, p] : named)
        for (float g : p.grad())
            if (!std::isfinite(g)) throw NumericError("step " + std::to_string(step) + ": non-finite gradient in " + name);

    auto params = s.weights.parameters();
    std::span<Tensor<float>> ps(params);
    const double norm = clip_grad_norm(ps, s.train.grad_clip);
    adamw_step(ps, s.adam, s.train.lr, s.train.beta1, s.train.beta2, s.train.adam_eps, s.train.weight_decay);
    s.step = step;
    if (ema_due(step, s.train.ema_every)) {
        auto ema = s.ema.parameters();
        ema_update(std::span<Tensor<float>>(ema), std::span<const Tensor<float>>(params), s.train.ema_decay);
    }
    const auto t1 = std::chrono::steady_clock::now();
    return {step, double(loss.item()), norm, s.train.lr, std::chrono::duration<double, std::milli>(t1 - t0).count()};
}

/// Runs until `s.step == last_step`, calling `on_step` after every step.
inline void train_until(TrainState& s, const TrainData& data, std::uint64_t last_step,
                        const std::function<void(const StepMetrics&)>& on_step = {}) {
    while (s.step < last_step) {
        auto batch = sample_batch(data, s);
        auto m = train_step(s, batch);
        if (on_step) on_step(m);
    }
}

}  // namespace rfm
