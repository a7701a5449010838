#pragma once

#include "cascade/denoiser.hpp"

namespace cascade::upsampler {

struct UpsamplerConfig {
    int width = 4;     // inner channel count of the residual blocks
    int emb_dim = 8;   // stack-local time embedding size
    int factor = 2;    // spatial growth per stage
    int gn_groups = 2;

    void validate() const;
};

// N plug-in time-aware feature upsamplers phi_1..phi_N, one per skip level
// (finest first). Each is bilinear upsample -> 1x1 entry conv -> two
// conditioned residual blocks -> zero-initialized 3x3 exit conv, so a fresh
// stack emits exact zeros and plugging it in changes nothing.
template <class T>
class UpsamplerStack {
public:
    UpsamplerStack(graph::ParamStore<T>& store, const std::string& group, UpsamplerConfig cfg,
                   std::vector<int> skip_channels, uint64_t seed);

    // injection deltas for stage r from stage-(r-1) pivot features
    std::vector<graph::Var<T>> apply(const std::vector<graph::Var<T>>& pivot,
                                     const std::vector<int>& t) const;
    // sampling path convenience: plain tensors, one shared timestep
    std::vector<Tensor<T>> apply(const std::vector<Tensor<T>>& pivot, int t) const;

    int levels() const { return (int)phis_.size(); }
    const UpsamplerConfig& config() const { return cfg_; }
    const std::string& group() const { return group_; }

private:
    struct Phi {
        graph::Var<T> in_w, in_b;
        denoiser::detail::ResBlock<T> block1, block2;
        graph::Var<T> out_w, out_b;
    };

    UpsamplerConfig cfg_;
    std::string group_;
    std::vector<int> skip_channels_;
    std::vector<Phi> phis_;
    graph::Var<T> t1_w_, t1_b_, t2_w_, t2_b_;
};

// Pairs a denoiser with a stack for tuning: the base group freezes, the
// stack's parameters stay trainable, and the shared store's census reflects
// exactly that split.
template <class T>
struct Composite {
    denoiser::Denoiser<T>* model;
    UpsamplerStack<T>* stack;
};

template <class T>
Composite<T> freeze_base_attach(denoiser::Denoiser<T>& model, UpsamplerStack<T>& stack);

}  // namespace cascade::upsampler
