#pragma once

#include <cmath>
#include <span>
#include <string>
#include <vector>

#include "conditioning.hpp"
#include "ops.hpp"
#include "rng.hpp"

// Rectified-flow training target and samplers, plus an epsilon-prediction
// DDPM/DDIM baseline sharing the same network signature.
//
// A velocity model is any callable
//   Tensor<T> model(const Tensor<T>& z, std::span<const T> t, const CondBatch<T>& cond)
// with z batched along the leading axis and t holding one time per sample.
// Time runs from 1 (noise) to 0 (data).
namespace rfm {

namespace detail {

// a_b * x + c_b * y with one (a, c) pair per leading-axis sample.
template <Real T>
Tensor<T> per_sample_combine(const Tensor<T>& x, std::span<const T> a, const Tensor<T>& y, std::span<const T> c) {
    if (x.shape() != y.shape()) throw ShapeError("shape mismatch " + to_string(x.shape()) + " vs " + to_string(y.shape()));
    const std::size_t b = x.size(0), inner = x.numel() / b;
    if (a.size() != b || c.size() != b) throw ShapeError("per-sample coefficients do not match batch size");
    std::vector<T> out(x.numel());
    for (std::size_t i = 0; i < b; ++i)
        for (std::size_t j = 0; j < inner; ++j) out[i * inner + j] = a[i] * x[i * inner + j] + c[i] * y[i * inner + j];
    return Tensor<T>(x.shape(), std::move(out));
}

}  // namespace detail

/// z_t = (1 - t) x0 + t eps.
template <Real T>
Tensor<T> interpolate(const Tensor<T>& x0, const Tensor<T>& eps, T t) {
    if (!(t >= T(0) && t <= T(1))) throw ConfigError("interpolation time must lie in [0,1]");
    if (x0.shape() != eps.shape()) throw ShapeError("interpolate: shapes differ");
    std::vector<T> out(x0.numel());
    for (std::size_t i = 0; i < out.size(); ++i) out[i] = (T(1) - t) * x0[i] + t * eps[i];
    return Tensor<T>(x0.shape(), std::move(out));
}

/// Batched form with one t per leading-axis sample.
template <Real T>
Tensor<T> interpolate(const Tensor<T>& x0, const Tensor<T>& eps, std::span<const T> t) {
    std::vector<T> a(t.size());
    for (std::size_t i = 0; i < t.size(); ++i) {
        if (!(t[i] >= T(0) && t[i] <= T(1))) throw ConfigError("interpolation time must lie in [0,1]");
        a[i] = T(1) - t[i];
    }
    return detail::per_sample_combine(x0, std::span<const T>(a), eps, t);
}

/// d z_t / dt = eps - x0.
template <Real T>
Tensor<T> velocity_target(const Tensor<T>& x0, const Tensor<T>& eps) {
    NoGradGuard guard;
    return sub(eps, x0);
}

template <Real T>
struct TrajectorySample {
    Tensor<T> x0, eps;
    T t;
    Tensor<T> z_t, target_v;
};

template <Real T>
TrajectorySample<T> make_trajectory(const Tensor<T>& x0, const Tensor<T>& eps, T t) {
    return {x0, eps, t, interpolate(x0, eps, t), velocity_target(x0, eps)};
}

enum class TimeSampling { kUniform, kLogitNormal };

inline TimeSampling parse_time_sampling(const std::string& s) {
    if (s == "uniform") return TimeSampling::kUniform;
    if (s == "logit_normal") return TimeSampling::kLogitNormal;
    throw ConfigError("unknown time sampling '" + s + "' (expected uniform or logit_normal)");
}

/// Training time in the open interval (0,1).
inline double sample_t(Rng& rng, TimeSampling mode = TimeSampling::kUniform) {
    if (mode == TimeSampling::kUniform) return rng.uniform_open();
    for (;;) {
        const double t = 1.0 / (1.0 + std::exp(-rng.normal()));
        if (t > 0.0 && t < 1.0) return t;
    }
}

/// Velocity MSE at given noise and times; the deterministic core of rf_loss.
template <Real T, class Model>
Tensor<T> rf_loss_at(const Model& model, const Tensor<T>& x0, const Tensor<T>& eps, std::span<const T> t,
                     const CondBatch<T>& cond) {
    auto z = interpolate(x0, eps, t);
    auto target = velocity_target(x0, eps);
    auto loss = mse(model(z, t, cond), target);
    if (!std::isfinite(loss.item())) throw NumericError("rectified-flow loss is not finite");
    return loss;
}

/// Draws one t per sample (in order), then eps ~ N(0, I), and returns the
/// mean squared velocity error.
template <Real T, class Model>
Tensor<T> rf_loss(const Model& model, const Tensor<T>& x0, const CondBatch<T>& cond, Rng& rng,
                  TimeSampling mode = TimeSampling::kUniform) {
    std::vector<T> t(x0.size(0));
    for (T& v : t) v = static_cast<T>(sample_t(rng, mode));
    auto eps = rng.randn<T>(x0.shape());
    return rf_loss_at(model, x0, eps, std::span<const T>(t), cond);
}

/// Classifier-free guidance: v_u + s (v_c - v_u).
template <Real T>
Tensor<T> cfg_velocity(const Tensor<T>& v_cond, const Tensor<T>& v_uncond, T s) {
    if (v_cond.shape() != v_uncond.shape()) throw ShapeError("cfg_velocity: shapes differ");
    std::vector<T> out(v_cond.numel());
    for (std::size_t i = 0; i < out.size(); ++i) out[i] = v_uncond[i] + s * (v_cond[i] - v_uncond[i]);
    return Tensor<T>(v_cond.shape(), std::move(out));
}

/// Descending time grid from 1 to 0.
struct RFSchedule {
    std::vector<double> t_grid;

    static RFSchedule uniform(std::size_t steps) {
        if (steps == 0) throw ConfigError("sampler needs at least one step");
        RFSchedule s;
        s.t_grid.resize(steps + 1);
        for (std::size_t k = 0; k <= steps; ++k) s.t_grid[k] = 1.0 - double(k) / double(steps);
        s.t_grid.front() = 1.0;
        s.t_grid.back() = 0.0;
        return s;
    }

    std::size_t steps() const { return t_grid.empty() ? 0 : t_grid.size() - 1; }

    void validate() const {
        if (t_grid.size() < 2) throw ConfigError("time grid needs at least two points");
        if (t_grid.front() != 1.0 || t_grid.back() != 0.0) throw ConfigError("time grid must run from 1 to 0");
        for (std::size_t k = 1; k < t_grid.size(); ++k)
            if (!(t_grid[k] < t_grid[k - 1])) throw ConfigError("time grid must be strictly decreasing");
    }
};

/// Euler integration of dz = v dt from t=1 to t=0 with guidance scale s.
/// With s == 1 only the conditional branch is evaluated.
template <Real T, class Model>
Tensor<T> euler_sample(const Model& model, const Tensor<T>& z1, const CondBatch<T>& cond, const CondBatch<T>& uncond,
                       const RFSchedule& sched, double s) {
    sched.validate();
    NoGradGuard guard;
    const std::size_t b = z1.size(0);
    Tensor<T> z = z1.detach();
    std::vector<T> t(b);
    for (std::size_t k = 0; k + 1 < sched.t_grid.size(); ++k) {
        std::fill(t.begin(), t.end(), static_cast<T>(sched.t_grid[k]));
        const std::span<const T> ts(t);
        Tensor<T> v = model(z, ts, cond);
        if (s != 1.0) v = cfg_velocity(v, model(z, ts, uncond), static_cast<T>(s));
        const T dt = static_cast<T>(sched.t_grid[k] - sched.t_grid[k + 1]);
        std::vector<T> next(z.numel());
        for (std::size_t i = 0; i < next.size(); ++i) next[i] = z[i] - dt * v[i];
        z = Tensor<T>(z.shape(), std::move(next));
    }
    return z;
}

template <Real T, class Model>
Tensor<T> euler_sample(const Model& model, const Tensor<T>& z1, const CondBatch<T>& cond, const RFSchedule& sched) {
    return euler_sample(model, z1, cond, cond, sched, 1.0);
}

/// Marginal velocity E[eps - x0 | z_t = z] for x0 ~ N(mu, sigma^2 I):
///   u = [t - (1-t) sigma^2] (z - (1-t) mu) / [(1-t)^2 sigma^2 + t^2] - mu
template <Real T>
Tensor<T> gaussian_oracle_velocity(const Tensor<T>& z, double t, double mu, double sigma) {
    const double var = sigma * sigma;
    const double gain = (t - (1.0 - t) * var) / ((1.0 - t) * (1.0 - t) * var + t * t);
    std::vector<T> out(z.numel());
    for (std::size_t i = 0; i < out.size(); ++i) out[i] = static_cast<T>(gain * (double(z[i]) - (1.0 - t) * mu) - mu);
    return Tensor<T>(z.shape(), std::move(out));
}

/// Discrete-time variance-preserving schedule for the epsilon baseline.
struct DDPMSchedule {
    std::size_t steps = 1000;
    std::vector<double> betas, alphas, alpha_bars;

    static DDPMSchedule linear(std::size_t steps = 1000, double beta_start = 1e-4, double beta_end = 0.02) {
        if (steps < 2) throw ConfigError("DDPM schedule needs at least two steps");
        if (!(beta_start > 0 && beta_end < 1 && beta_start < beta_end)) throw ConfigError("betas must satisfy 0 < start < end < 1");
        DDPMSchedule s;
        s.steps = steps;
        double prod = 1.0;
        for (std::size_t k = 0; k < steps; ++k) {
            const double beta = beta_start + (beta_end - beta_start) * double(k) / double(steps - 1);
            s.betas.push_back(beta);
            s.alphas.push_back(1.0 - beta);
            prod *= 1.0 - beta;
            s.alpha_bars.push_back(prod);
        }
        return s;
    }

    /// Network time input for discrete step k (0-based): (k+1)/T in (0,1].
    double model_time(std::size_t k) const { return double(k + 1) / double(steps); }

    /// Ascending trailing-spaced subset of n steps ending at T-1.
    std::vector<std::size_t> substeps(std::size_t n) const {
        if (n == 0 || n > steps) throw ConfigError("DDIM substeps must lie in [1, " + std::to_string(steps) + "], got " + std::to_string(n));
        std::vector<std::size_t> out(n);
        for (std::size_t i = 0; i < n; ++i) out[i] = static_cast<std::size_t>(std::llround(double((i + 1) * steps) / double(n))) - 1;
        return out;
    }
};

/// Epsilon-prediction MSE at a uniformly drawn discrete step per sample.
/// Draws the steps first, then the noise.
template <Real T, class Model>
Tensor<T> ddpm_eps_loss(const Model& model, const Tensor<T>& x0, const CondBatch<T>& cond, Rng& rng,
                        const DDPMSchedule& sched) {
    const std::size_t b = x0.size(0);
    std::vector<T> a(b), c(b), t(b);
    for (std::size_t i = 0; i < b; ++i) {
        const std::size_t k = rng.index(sched.steps);
        a[i] = static_cast<T>(std::sqrt(sched.alpha_bars[k]));
        c[i] = static_cast<T>(std::sqrt(1.0 - sched.alpha_bars[k]));
        t[i] = static_cast<T>(sched.model_time(k));
    }
    auto eps = rng.randn<T>(x0.shape());
    auto xk = detail::per_sample_combine(x0, std::span<const T>(a), eps, std::span<const T>(c));
    auto loss = mse(model(xk, std::span<const T>(t), cond), eps);
    if (!std::isfinite(loss.item())) throw NumericError("epsilon loss is not finite");
    return loss;
}

/// Deterministic (eta = 0) DDIM over `substeps` trailing-spaced steps.
template <Real T, class Model>
Tensor<T> ddim_sample(const Model& model, const Tensor<T>& x_T, const CondBatch<T>& cond, const CondBatch<T>& uncond,
                      const DDPMSchedule& sched, std::size_t substeps, double s) {
    const auto ks = sched.substeps(substeps);
    NoGradGuard guard;
    const std::size_t b = x_T.size(0);
    Tensor<T> x = x_T.detach();
    std::vector<T> t(b);
    for (std::size_t i = ks.size(); i-- > 0;) {
        const std::size_t k = ks[i];
        const double ab = sched.alpha_bars[k];
        const double ab_prev = i > 0 ? sched.alpha_bars[ks[i - 1]] : 1.0;
        std::fill(t.begin(), t.end(), static_cast<T>(sched.model_time(k)));
        const std::span<const T> ts(t);
        Tensor<T> eps = model(x, ts, cond);
        if (s != 1.0) eps = cfg_velocity(eps, model(x, ts, uncond), static_cast<T>(s));
        std::vector<T> next(x.numel());
        for (std::size_t j = 0; j < next.size(); ++j) {
            const double x0 = (double(x[j]) - std::sqrt(1.0 - ab) * double(eps[j])) / std::sqrt(ab);
            next[j] = static_cast<T>(std::sqrt(ab_prev) * x0 + std::sqrt(1.0 - ab_prev) * double(eps[j]));
        }
        x = Tensor<T>(x.shape(), std::move(next));
    }
    return x;
}

}  // namespace rfm
