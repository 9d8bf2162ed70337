#pragma once

#include <string>
#include <vector>

#include "checkpoint.hpp"
#include "conditioning.hpp"
#include "dataset.hpp"
#include "model.hpp"
#include "rectflow.hpp"

namespace rfm {

struct SampleRequest {
    std::vector<std::string> prompts;
    std::size_t steps = 50;
    double cfg = 3.5;
    std::uint64_t seed = 0;
    bool use_ema = true;
    std::size_t chunk = 32;  // samples per forward batch
};

/// Draws one latent per prompt with the checkpoint's objective (Euler for rf,
/// DDIM for ddim) and returns them de-standardized, [16, 128, c] each. The
/// starting noise of sample i depends only on (seed, i).
inline std::vector<Tensor<float>> sample_latents(const Checkpoint& ck, const SampleRequest& req) {
    const TrainState& s = ck.state;
    const ModelConfig& mc = s.model;
    if (req.steps == 0) throw ConfigError("sampling needs at least one step");
    TextEncoders enc(ck.run.encoder_config());
    VelocityModel<float> model{req.use_ema ? &s.ema : &s.weights, &mc};
    const auto rf = RFSchedule::uniform(req.steps);
    std::vector<Tensor<float>> out;
    NoGradGuard guard;
    for (std::size_t first = 0; first < req.prompts.size(); first += req.chunk) {
        const std::size_t b = std::min(req.chunk, req.prompts.size() - first);
        std::vector<TextCondition> conds, nulls;
        std::vector<float> noise;
        for (std::size_t i = 0; i < b; ++i) {
            conds.push_back(enc.encode(req.prompts[first + i]));
            nulls.push_back(enc.null_condition());
            Rng rng(mix_seed(req.seed, first + i));
            auto z = rng.randn<float>({mc.latent_h, mc.latent_w, mc.channels});
            noise.insert(noise.end(), z.data().begin(), z.data().end());
        }
        auto cond = make_cond_batch<float>(std::span<const TextCondition>(conds), mc.d_fine, mc.d_coarse);
        auto uncond = make_cond_batch<float>(std::span<const TextCondition>(nulls), mc.d_fine, mc.d_coarse);
        Tensor<float> z1({b, mc.latent_h, mc.latent_w, mc.channels}, std::move(noise));
        Tensor<float> x0 = s.train.objective == Objective::kRF
                               ? euler_sample(model, z1, cond, uncond, rf, req.cfg)
                               : ddim_sample(model, z1, cond, uncond, default_ddpm_schedule(), req.steps, req.cfg);
        const std::size_t per = mc.latent_h * mc.latent_w * mc.channels;
        for (std::size_t i = 0; i < b; ++i) {
            std::vector<float> v(x0.data().begin() + std::ptrdiff_t(i * per), x0.data().begin() + std::ptrdiff_t((i + 1) * per));
            out.push_back(destandardize(Tensor<float>({mc.latent_h, mc.latent_w, mc.channels}, std::move(v)), s.stats));
        }
    }
    return out;
}

}  // namespace rfm
