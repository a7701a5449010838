#include "cascade/upsampler.hpp"

#include <cmath>

namespace cascade::upsampler {

namespace G = cascade::graph;

void UpsamplerConfig::validate() const {
    if (width < 1) throw std::invalid_argument("upsampler: width must be >= 1");
    if (width % gn_groups != 0)
        throw std::invalid_argument("upsampler: width " + std::to_string(width) +
                                    " must be divisible by gn_groups " +
                                    std::to_string(gn_groups));
    if (emb_dim < 2 || emb_dim % 2 != 0)
        throw std::invalid_argument("upsampler: emb_dim must be even and >= 2");
    if (factor < 2) throw std::invalid_argument("upsampler: factor must be >= 2");
}

namespace {
template <class T>
Tensor<T> conv_init(Shape s, Rng& rng) {
    const double dev = std::sqrt(2.0 / ((int64_t)s[1] * s[2] * s[3]));
    auto t = randn<T>(std::move(s), rng);
    T* p = t.data();
    for (int64_t i = 0; i < t.size(); ++i) p[i] = (T)(p[i] * dev);
    return t;
}

template <class T>
Tensor<T> linear_init(int dout, int din, Rng& rng) {
    const double dev = std::sqrt(1.0 / din);
    auto t = randn<T>({dout, din}, rng);
    T* p = t.data();
    for (int64_t i = 0; i < t.size(); ++i) p[i] = (T)(p[i] * dev);
    return t;
}
}  // namespace

template <class T>
UpsamplerStack<T>::UpsamplerStack(G::ParamStore<T>& store, const std::string& group,
                                  UpsamplerConfig cfg, std::vector<int> skip_channels,
                                  uint64_t seed)
    : cfg_(cfg), group_(group), skip_channels_(std::move(skip_channels)) {
    cfg_.validate();
    if (skip_channels_.empty())
        throw std::invalid_argument("upsampler: need at least one skip level");
    Rng rng(seed);
    const int m = cfg_.width, D = cfg_.emb_dim;

    t1_w_ = store.add(group + ".temb.l1.w", group, linear_init<T>(D, D, rng));
    t1_b_ = store.add(group + ".temb.l1.b", group, Tensor<T>::zeros({D}));
    t2_w_ = store.add(group + ".temb.l2.w", group, linear_init<T>(D, D, rng));
    t2_b_ = store.add(group + ".temb.l2.b", group, Tensor<T>::zeros({D}));

    for (size_t n = 0; n < skip_channels_.size(); ++n) {
        const int c = skip_channels_[n];
        const std::string p = group + ".phi" + std::to_string(n);
        Phi phi;
        phi.in_w = store.add(p + ".in.w", group, conv_init<T>({m, c, 1, 1}, rng));
        phi.in_b = store.add(p + ".in.b", group, Tensor<T>::zeros({m}));
        phi.block1 =
            denoiser::detail::make_resblock(store, p + ".block0", group, m, m, D,
                                            cfg_.gn_groups, rng);
        phi.block2 =
            denoiser::detail::make_resblock(store, p + ".block1", group, m, m, D,
                                            cfg_.gn_groups, rng);
        // zero exit conv: a fresh stack is exactly a no-op
        phi.out_w = store.add(p + ".out.w", group, Tensor<T>::zeros({c, m, 3, 3}));
        phi.out_b = store.add(p + ".out.b", group, Tensor<T>::zeros({c}));
        phis_.push_back(std::move(phi));
    }
}

template <class T>
std::vector<G::Var<T>> UpsamplerStack<T>::apply(const std::vector<G::Var<T>>& pivot,
                                                const std::vector<int>& t) const {
    if ((int)pivot.size() != levels())
        throw std::invalid_argument("upsampler: got " + std::to_string(pivot.size()) +
                                    " pivot levels for a stack of " + std::to_string(levels()));
    for (int ti : t)
        if (ti < 1)
            throw std::invalid_argument("upsampler: timestep " + std::to_string(ti) +
                                        " is below 1");
    if (!pivot.empty() && (int)t.size() != pivot.front().dim(0))
        throw std::invalid_argument("upsampler: got " + std::to_string(t.size()) +
                                    " timesteps for batch " +
                                    std::to_string(pivot.front().dim(0)));
    for (int n = 0; n < levels(); ++n)
        if (pivot[n].dim(1) != skip_channels_[n])
            throw std::invalid_argument(
                "upsampler: pivot level " + std::to_string(n) + " has " +
                std::to_string(pivot[n].dim(1)) + " channels, stack expects " +
                std::to_string(skip_channels_[n]));

    auto emb = G::leaf(kernels::timestep_embedding<T>(t, cfg_.emb_dim));
    auto cond = G::silu(G::linear(G::silu(G::linear(emb, t1_w_, t1_b_)), t2_w_, t2_b_));

    std::vector<G::Var<T>> deltas;
    deltas.reserve(levels());
    for (int n = 0; n < levels(); ++n) {
        auto x = G::conv2d(G::bilinear_up(pivot[n], cfg_.factor), phis_[n].in_w, phis_[n].in_b,
                           1, 0);
        x = phis_[n].block1(x, cond);
        x = phis_[n].block2(x, cond);
        deltas.push_back(G::conv2d(x, phis_[n].out_w, phis_[n].out_b, 1, 1));
    }
    return deltas;
}

template <class T>
std::vector<Tensor<T>> UpsamplerStack<T>::apply(const std::vector<Tensor<T>>& pivot,
                                                int t) const {
    std::vector<G::Var<T>> vars;
    vars.reserve(pivot.size());
    for (const auto& p : pivot) vars.push_back(G::leaf(p));
    const int batch = pivot.empty() ? 0 : pivot.front().dim(0);
    auto out = apply(vars, std::vector<int>((size_t)batch, t));
    std::vector<Tensor<T>> d;
    d.reserve(out.size());
    for (auto& v : out) d.push_back(v.value());
    return d;
}

template <class T>
Composite<T> freeze_base_attach(denoiser::Denoiser<T>& model, UpsamplerStack<T>& stack) {
    if (stack.levels() != model.config().levels)
        throw std::invalid_argument("attach: stack with " + std::to_string(stack.levels()) +
                                    " levels does not match a " +
                                    std::to_string(model.config().levels) + "-level denoiser");
    model.params().set_group_trainable("base", false);
    model.params().set_group_trainable(stack.group(), true);
    return Composite<T>{&model, &stack};
}

template class UpsamplerStack<float>;
template class UpsamplerStack<double>;
template Composite<float> freeze_base_attach<float>(denoiser::Denoiser<float>&,
                                                    UpsamplerStack<float>&);
template Composite<double> freeze_base_attach<double>(denoiser::Denoiser<double>&,
                                                      UpsamplerStack<double>&);

}  // namespace cascade::upsampler
