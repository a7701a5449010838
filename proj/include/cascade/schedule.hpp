#pragma once

#include "cascade/tensor.hpp"

namespace cascade::schedule {

enum class Kind { linear, cosine };

Kind kind_from_string(const std::string& s);
std::string to_string(Kind k);

// Noise schedule over T training steps with pivot step K. Time is
// 1-indexed; t = 0 is the clean state with alpha_bar(0) = 1.
struct NoiseSchedule {
    int T = 0;
    int K = 0;
    std::vector<double> betas;       // betas[t-1] is beta_t
    std::vector<double> alpha_bars;  // alpha_bars[t-1] is the cumulative product at t

    double beta(int t) const;
    double alpha_bar(int t) const;  // accepts t in [0, T]
};

NoiseSchedule make_schedule(Kind kind, int T, int K);

// Strictly decreasing step indices, uniformly spaced over [1, start_step].
// start_step is T for stage 1 and K for pivot-guided stages.
struct DdimPlan {
    double eta = 0.0;
    int start_step = 0;
    std::vector<int> step_indices;
};

DdimPlan make_ddim_plan(int start_step, int steps, double eta);

// z_t = sqrt(abar_t) z0 + sqrt(1 - abar_t) eps
template <class T>
Tensor<T> forward_diffuse(const Tensor<T>& z0, int t, const Tensor<T>& eps,
                          const NoiseSchedule& s);
// per-sample timesteps along the batch axis
template <class T>
Tensor<T> forward_diffuse(const Tensor<T>& z0, const std::vector<int>& t, const Tensor<T>& eps,
                          const NoiseSchedule& s);

// One DDIM update t -> t_prev. noise must be left undefined when eta = 0.
template <class T>
Tensor<T> ddim_step(const Tensor<T>& z_t, const Tensor<T>& eps_pred, int t, int t_prev,
                    const NoiseSchedule& s, double eta, const Tensor<T>& noise);

// Pivot replacement: bilinear-upsample the previous stage's clean latent and
// diffuse it by K steps in one shot.
template <class T>
Tensor<T> pivot_replace(const Tensor<T>& z0_prev, const NoiseSchedule& s, int oh, int ow,
                        uint64_t rng_seed);
template <class T>
Tensor<T> pivot_replace(const Tensor<T>& z0_prev, const NoiseSchedule& s, int factor,
                        uint64_t rng_seed);

}  // namespace cascade::schedule
