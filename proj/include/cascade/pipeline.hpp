#pragma once

#include <functional>
#include <map>

#include "cascade/data.hpp"
#include "cascade/optim.hpp"
#include "cascade/schedule.hpp"
#include "cascade/upsampler.hpp"

namespace cascade::pipeline {

// Stage list for a resolution jump: stages[0] is the trained base extent and
// stages[R] the target, with R = ceil(log4 of the pixel ratio) and every
// stage growing each axis by at most 2x.
struct CascadePlan {
    std::vector<std::array<int, 2>> stages;
    int R() const { return (int)stages.size() - 1; }
};

CascadePlan plan(std::array<int, 2> base, std::array<int, 2> target);

struct SampleOptions {
    int ddim_steps = 50;
    double eta = 0.0;
    uint64_t seed = 0;
    int t_probe = 1;
};

// per-step injected skip deltas, built from the current timestep vector
using StepInjector =
    std::function<std::vector<graph::Var<float>>(const std::vector<int>& t)>;

// One DDIM trajectory. With z_start absent, sampling begins from pure noise
// and the plan must span [1, T]; with z_start given, it begins there at
// plan.start_step. The seed drives the initial draw and any eta noise.
Tensorf sample_ddim(denoiser::Denoiser<float>& model, int n, std::array<int, 2> hw,
                    const std::vector<int>& labels, const schedule::NoiseSchedule& s,
                    const schedule::DdimPlan& dplan, uint64_t seed,
                    const Tensorf* z_start = nullptr, const StepInjector* inject = nullptr);

struct CascadeResult {
    std::vector<Tensorf> stage_outputs;  // clean z0 per stage, coarse to fine
    const Tensorf& final_image() const { return stage_outputs.back(); }
};

// Staged inference. stacks empty = tuning-free; otherwise one stack per
// transition, and every denoise call at stage r receives upsampled pivot
// features from stage r-1. Stage 1 consumes the seed exactly like
// sample_ddim does, so a degenerate single-stage plan reproduces plain
// sampling bit for bit; later stages use seeds folded with their index.
CascadeResult sample_cascade(denoiser::Denoiser<float>& model,
                             const std::vector<const upsampler::UpsamplerStack<float>*>& stacks,
                             const CascadePlan& cplan, int n, const std::vector<int>& labels,
                             const schedule::NoiseSchedule& s, const SampleOptions& opt);

// One tuning step: diffuse a real stage-r batch, inject features upsampled
// from its own downsampled pivot, and backpropagate the eps loss into the
// stack alone. Gradients are left in the store for the caller's optimizer.
double tune_step(const upsampler::Composite<float>& comp, const Tensorf& x0,
                 const std::vector<int>& labels, const schedule::NoiseSchedule& s, int t_probe,
                 Rng& rng, bool pivot_noise = false);

// Plain eps-prediction loss over t in [1, T]; the pretraining and full
// fine-tuning arms both use it. Backpropagates into whatever is trainable.
double diffusion_loss_step(denoiser::Denoiser<float>& model, const Tensorf& x0,
                           const std::vector<int>& labels, const schedule::NoiseSchedule& s,
                           Rng& rng);

struct TrainOptions {
    optim::AdamConfig adam;
    int batch = 16;
    int64_t steps = 2000;
    uint64_t seed = 1;
    int log_every = 50;
    int eval_every = 500;
    int checkpoint_every = 1000;
    std::array<int, 2> resolution{32, 32};
    std::string out_dir;       // empty = no checkpoints or CSV
    std::string config_hash;   // stamped into checkpoints
    std::string csv_name = "train_log.csv";
};

// step(batch, labels, rng) -> loss, leaving gradients behind
using StepFn = std::function<double(const Tensorf&, const std::vector<int>&, Rng&)>;
// eval(step) -> named metrics appended to the CSV
using EvalFn = std::function<std::vector<std::pair<std::string, double>>(int64_t)>;

struct TrainResult {
    std::vector<double> losses;            // one entry per step
    std::vector<std::string> checkpoints;  // paths written, final last
    std::string csv_path;
};

// The shared training loop: seeded batch draws, Adam updates, loss/metric
// CSV, periodic checkpoints, and a diagnostic dump if the loss goes
// non-finite. Deterministic for a fixed seed and dataset.
TrainResult train_loop(graph::ParamStore<float>& store, const data::Dataset& dataset,
                       const StepFn& step, const TrainOptions& opt,
                       const EvalFn& eval_hook = nullptr);

}  // namespace cascade::pipeline
