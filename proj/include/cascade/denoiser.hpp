#pragma once

#include <functional>
#include <map>

#include "cascade/graph.hpp"

namespace cascade::denoiser {

// optional reparameterization applied to every conv/linear weight at its use
// site (adapters wrap the stored weight in extra graph ops this way)
template <class T>
using WeightHook = std::function<graph::Var<T>(const graph::Var<T>&)>;

struct UNetConfig {
    int in_channels = 3;
    int base_channels = 32;
    int levels = 3;  // L, 2..4
    int blocks_per_level = 2;
    int time_embed_dim = 128;
    int num_classes = 0;  // 0 = unconditional
    int groupnorm_groups = 8;

    int channels_at(int level) const { return base_channels << level; }
    int divisibility() const { return 1 << (levels - 1); }
    void validate() const;
};

struct Census {
    int64_t total = 0;
    int64_t trainable = 0;
    std::map<std::string, int64_t> per_group;
};

template <class T>
Census make_census(const graph::ParamStore<T>& store);

namespace detail {

// {norm -> SiLU -> 3x3 conv} twice with scale/shift conditioning between,
// plus a residual connection (1x1 projection on channel change)
template <class T>
struct ResBlock {
    graph::Var<T> gn1_g, gn1_b, w1, b1, cond_w, cond_b, gn2_g, gn2_b, w2, b2, skip_w, skip_b;
    int groups = 1;
    int c_out = 0;
    bool projects = false;

    graph::Var<T> operator()(const graph::Var<T>& x, const graph::Var<T>& cond,
                             const WeightHook<T>* hook = nullptr) const;
};

// registers the block's parameters under `prefix.` in `group`
template <class T>
ResBlock<T> make_resblock(graph::ParamStore<T>& store, const std::string& prefix,
                          const std::string& group, int c_in, int c_out, int emb_dim, int groups,
                          Rng& rng);

}  // namespace detail

// Tiny fully-convolutional UNet predicting eps, with one skip tap per
// encoder level (finest first). A single weight set runs at any resolution
// whose extents are divisible by 2^(levels-1).
template <class T>
class Denoiser {
public:
    Denoiser(UNetConfig cfg, uint64_t seed);

    struct Output {
        graph::Var<T> eps;
        std::vector<graph::Var<T>> skips;  // pre-injection taps, finest first
    };

    // t is per-sample (1-indexed); labels required iff num_classes > 0.
    // inject, if given, holds per-level deltas added to the skips before
    // the decoder consumes them.
    Output denoise(const graph::Var<T>& z_t, const std::vector<int>& t,
                   const std::vector<int>& labels,
                   const std::vector<graph::Var<T>>* inject = nullptr);

    // skip feature group of a clean latent at a probe timestep
    std::vector<Tensor<T>> extract_pivot_features(const Tensor<T>& z0_prev, int t_probe,
                                                  const std::vector<int>& labels);

    // tap shapes from config arithmetic alone
    std::vector<Shape> skip_shapes(int batch, int h, int w) const;

    const UNetConfig& config() const { return cfg_; }
    graph::ParamStore<T>& params() { return store_; }
    const graph::ParamStore<T>& params() const { return store_; }
    Census census() const { return make_census(store_); }

    void set_weight_hook(WeightHook<T> hook) { hook_ = std::move(hook); }
    bool has_weight_hook() const { return (bool)hook_; }

private:
    graph::Var<T> hooked(const graph::Var<T>& w) const { return hook_ ? hook_(w) : w; }
    graph::Var<T> condition(const std::vector<int>& t, const std::vector<int>& labels) const;

    UNetConfig cfg_;
    graph::ParamStore<T> store_;

    graph::Var<T> stem_w_, stem_b_;
    graph::Var<T> t1_w_, t1_b_, t2_w_, t2_b_, cls_table_;
    std::vector<std::vector<detail::ResBlock<T>>> enc_, dec_;
    std::vector<graph::Var<T>> down_w_, down_b_, up_w_, up_b_;
    detail::ResBlock<T> mid_;
    graph::Var<T> head_g_, head_b_, head_w_, head_cb_;
    WeightHook<T> hook_;
};

}  // namespace cascade::denoiser
