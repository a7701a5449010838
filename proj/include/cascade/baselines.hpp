#pragma once

#include "cascade/pipeline.hpp"

namespace cascade::baselines {

// plain DDIM sampling at an arbitrary resolution with unmodified base weights
Tensorf direct_inference(denoiser::Denoiser<float>& model, int n, std::array<int, 2> hw,
                         const std::vector<int>& labels, const schedule::NoiseSchedule& s,
                         int ddim_steps, double eta, uint64_t seed);

// eps loss with every parameter trainable; shares its body with pretraining
double full_finetune_step(denoiser::Denoiser<float>& model, const Tensorf& x0,
                          const std::vector<int>& labels, const schedule::NoiseSchedule& s,
                          Rng& rng);

// Additive low-rank reparameterization W + A.B/rank over conv and linear
// weights. B starts at zero, so attaching changes nothing until the factors
// train; the base group freezes and only the factors stay trainable.
struct LowRankAdapter {
    int rank = 2;
    std::vector<std::string> adapted;  // weight names, store order
    int64_t trainable_params = 0;      // sum of rank*(out+in) over layers
};

// filter = substrings of weight names to adapt; empty picks every conv and
// linear weight. A selected layer too small for the rank is an error, so
// narrow the filter (or lower the rank) for nets with skinny end layers.
LowRankAdapter attach_lowrank(denoiser::Denoiser<float>& model, int rank,
                              const std::vector<std::string>& filter = {});

// removes the hook and re-opens the base group for training
void detach_lowrank(denoiser::Denoiser<float>& model);

}  // namespace cascade::baselines
