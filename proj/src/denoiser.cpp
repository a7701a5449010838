#include "cascade/denoiser.hpp"

#include <cmath>

namespace cascade::denoiser {

namespace G = cascade::graph;

void UNetConfig::validate() const {
    if (in_channels < 1) throw std::invalid_argument("unet: in_channels must be >= 1");
    if (levels < 2 || levels > 4)
        throw std::invalid_argument("unet: levels must be in [2, 4], got " +
                                    std::to_string(levels));
    if (blocks_per_level < 1) throw std::invalid_argument("unet: blocks_per_level must be >= 1");
    if (base_channels < 1 || base_channels % groupnorm_groups != 0)
        throw std::invalid_argument("unet: base_channels " + std::to_string(base_channels) +
                                    " must be divisible by groupnorm_groups " +
                                    std::to_string(groupnorm_groups));
    if (time_embed_dim < 2 || time_embed_dim % 2 != 0)
        throw std::invalid_argument("unet: time_embed_dim must be even and >= 2");
    if (num_classes < 0) throw std::invalid_argument("unet: num_classes must be >= 0");
}

template <class T>
Census make_census(const graph::ParamStore<T>& store) {
    Census c;
    for (const auto& p : store.params()) {
        const int64_t n = p.var.value().size();
        c.total += n;
        if (p.trainable) c.trainable += n;
        c.per_group[p.group] += n;
    }
    return c;
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

template <class T>
Tensor<T> table_init(int n, int d, Rng& rng) {
    auto t = randn<T>({n, d}, rng);
    T* p = t.data();
    for (int64_t i = 0; i < t.size(); ++i) p[i] = (T)(p[i] * 0.02);
    return t;
}

}  // namespace

namespace detail {

template <class T>
ResBlock<T> make_resblock(G::ParamStore<T>& store, const std::string& prefix,
                          const std::string& group, int c_in, int c_out, int emb_dim, int groups,
                          Rng& rng) {
    ResBlock<T> b;
    b.groups = groups;
    b.c_out = c_out;
    b.projects = c_in != c_out;
    b.gn1_g = store.add(prefix + ".gn1.g", group, Tensor<T>::full({c_in}, T(1)));
    b.gn1_b = store.add(prefix + ".gn1.b", group, Tensor<T>::zeros({c_in}));
    b.w1 = store.add(prefix + ".conv1.w", group, conv_init<T>({c_out, c_in, 3, 3}, rng));
    b.b1 = store.add(prefix + ".conv1.b", group, Tensor<T>::zeros({c_out}));
    b.cond_w = store.add(prefix + ".cond.w", group, linear_init<T>(2 * c_out, emb_dim, rng));
    b.cond_b = store.add(prefix + ".cond.b", group, Tensor<T>::zeros({2 * c_out}));
    b.gn2_g = store.add(prefix + ".gn2.g", group, Tensor<T>::full({c_out}, T(1)));
    b.gn2_b = store.add(prefix + ".gn2.b", group, Tensor<T>::zeros({c_out}));
    b.w2 = store.add(prefix + ".conv2.w", group, conv_init<T>({c_out, c_out, 3, 3}, rng));
    b.b2 = store.add(prefix + ".conv2.b", group, Tensor<T>::zeros({c_out}));
    if (b.projects) {
        b.skip_w = store.add(prefix + ".skip.w", group, conv_init<T>({c_out, c_in, 1, 1}, rng));
        b.skip_b = store.add(prefix + ".skip.b", group, Tensor<T>::zeros({c_out}));
    }
    return b;
}

template <class T>
graph::Var<T> ResBlock<T>::operator()(const G::Var<T>& x, const G::Var<T>& cond,
                                      const WeightHook<T>* hook) const {
    auto hw = [&](const G::Var<T>& w) { return hook && *hook ? (*hook)(w) : w; };
    auto h = G::conv2d(G::silu(G::group_norm(x, gn1_g, gn1_b, groups)), hw(w1), b1, 1, 1);
    auto sb = G::linear(cond, hw(cond_w), cond_b);
    h = G::film(G::group_norm(h, gn2_g, gn2_b, groups), G::slice_cols(sb, 0, c_out),
                G::slice_cols(sb, c_out, 2 * c_out));
    h = G::conv2d(G::silu(h), hw(w2), b2, 1, 1);
    auto sk = projects ? G::conv2d(x, hw(skip_w), skip_b, 1, 0) : x;
    return G::add(sk, h);
}

template struct ResBlock<float>;
template struct ResBlock<double>;
template ResBlock<float> make_resblock<float>(G::ParamStore<float>&, const std::string&,
                                              const std::string&, int, int, int, int, Rng&);
template ResBlock<double> make_resblock<double>(G::ParamStore<double>&, const std::string&,
                                                const std::string&, int, int, int, int, Rng&);

}  // namespace detail

template <class T>
Denoiser<T>::Denoiser(UNetConfig cfg, uint64_t seed) : cfg_(cfg) {
    cfg_.validate();
    Rng rng(seed);
    const int L = cfg_.levels, D = cfg_.time_embed_dim, g = cfg_.groupnorm_groups;
    const std::string grp = "base";

    stem_w_ = store_.add("stem.w", grp,
                         conv_init<T>({cfg_.channels_at(0), cfg_.in_channels, 3, 3}, rng));
    stem_b_ = store_.add("stem.b", grp, Tensor<T>::zeros({cfg_.channels_at(0)}));

    t1_w_ = store_.add("temb.l1.w", grp, linear_init<T>(D, D, rng));
    t1_b_ = store_.add("temb.l1.b", grp, Tensor<T>::zeros({D}));
    t2_w_ = store_.add("temb.l2.w", grp, linear_init<T>(D, D, rng));
    t2_b_ = store_.add("temb.l2.b", grp, Tensor<T>::zeros({D}));
    if (cfg_.num_classes > 0)
        cls_table_ = store_.add("cls.table", grp, table_init<T>(cfg_.num_classes, D, rng));

    enc_.resize(L);
    for (int l = 0; l < L; ++l) {
        const int c = cfg_.channels_at(l);
        for (int b = 0; b < cfg_.blocks_per_level; ++b)
            enc_[l].push_back(detail::make_resblock(
                store_, "enc" + std::to_string(l) + ".block" + std::to_string(b), grp, c, c, D,
                g, rng));
        if (l < L - 1) {
            const int cn = cfg_.channels_at(l + 1);
            down_w_.push_back(store_.add("down" + std::to_string(l) + ".w", grp,
                                         conv_init<T>({cn, c, 3, 3}, rng)));
            down_b_.push_back(
                store_.add("down" + std::to_string(l) + ".b", grp, Tensor<T>::zeros({cn})));
        }
    }

    mid_ = detail::make_resblock(store_, "mid.block0", grp, cfg_.channels_at(L - 1),
                                 cfg_.channels_at(L - 1), D, g, rng);

    dec_.resize(L);
    up_w_.resize(L);
    up_b_.resize(L);
    for (int l = L - 1; l >= 0; --l) {
        const int c = cfg_.channels_at(l);
        for (int b = 0; b < cfg_.blocks_per_level; ++b)
            dec_[l].push_back(detail::make_resblock(
                store_, "dec" + std::to_string(l) + ".block" + std::to_string(b), grp,
                b == 0 ? 2 * c : c, c, D, g, rng));
        if (l > 0) {
            const int cn = cfg_.channels_at(l - 1);
            up_w_[l] = store_.add("up" + std::to_string(l) + ".w", grp,
                                  conv_init<T>({cn, c, 3, 3}, rng));
            up_b_[l] = store_.add("up" + std::to_string(l) + ".b", grp, Tensor<T>::zeros({cn}));
        }
    }

    head_g_ = store_.add("head.gn.g", grp, Tensor<T>::full({cfg_.channels_at(0)}, T(1)));
    head_b_ = store_.add("head.gn.b", grp, Tensor<T>::zeros({cfg_.channels_at(0)}));
    // zero so a fresh model predicts zero noise; training moves it off zero
    head_w_ = store_.add("head.w", grp,
                         Tensor<T>::zeros({cfg_.in_channels, cfg_.channels_at(0), 3, 3}));
    head_cb_ = store_.add("head.b", grp, Tensor<T>::zeros({cfg_.in_channels}));
}

template <class T>
G::Var<T> Denoiser<T>::condition(const std::vector<int>& t,
                                 const std::vector<int>& labels) const {
    for (int ti : t)
        if (ti < 1)
            throw std::invalid_argument("denoise: timestep " + std::to_string(ti) +
                                        " is below 1");
    auto emb = G::leaf(kernels::timestep_embedding<T>(t, cfg_.time_embed_dim));
    auto e = G::linear(G::silu(G::linear(emb, hooked(t1_w_), t1_b_)), hooked(t2_w_), t2_b_);
    if (cfg_.num_classes > 0) {
        if ((int)labels.size() != (int)t.size())
            throw std::invalid_argument("denoise: got " + std::to_string(labels.size()) +
                                        " labels for batch " + std::to_string(t.size()));
        for (int c : labels)
            if (c < 0 || c >= cfg_.num_classes)
                throw std::invalid_argument("denoise: label " + std::to_string(c) +
                                            " outside [0, " + std::to_string(cfg_.num_classes) +
                                            ")");
        e = G::add(e, G::embedding(cls_table_, labels));
    } else if (!labels.empty()) {
        throw std::invalid_argument("denoise: labels given to an unconditional model");
    }
    return G::silu(e);
}

template <class T>
typename Denoiser<T>::Output Denoiser<T>::denoise(const G::Var<T>& z_t,
                                                  const std::vector<int>& t,
                                                  const std::vector<int>& labels,
                                                  const std::vector<G::Var<T>>* inject) {
    const Shape& zs = z_t.shape();
    if (zs.size() != 4 || zs[1] != cfg_.in_channels)
        throw std::invalid_argument("denoise: input " + shape_str(zs) + " must be [N, " +
                                    std::to_string(cfg_.in_channels) + ", H, W]");
    const int div = cfg_.divisibility();
    if (zs[2] % div != 0 || zs[3] % div != 0)
        throw std::invalid_argument("denoise: spatial extents of " + shape_str(zs) +
                                    " must be divisible by " + std::to_string(div) + " (2^(" +
                                    std::to_string(cfg_.levels) + "-1))");
    if ((int)t.size() != zs[0])
        throw std::invalid_argument("denoise: got " + std::to_string(t.size()) +
                                    " timesteps for batch " + std::to_string(zs[0]));

    const int L = cfg_.levels;
    auto cond = condition(t, labels);

    auto x = G::conv2d(z_t, hooked(stem_w_), stem_b_, 1, 1);
    std::vector<G::Var<T>> skips;
    for (int l = 0; l < L; ++l) {
        for (auto& blk : enc_[l]) x = blk(x, cond, &hook_);
        skips.push_back(x);
        if (l < L - 1) x = G::conv2d(x, hooked(down_w_[l]), down_b_[l], 2, 1);
    }

    x = mid_(x, cond, &hook_);

    if (inject && (int)inject->size() != L)
        throw std::invalid_argument("denoise: " + std::to_string(inject->size()) +
                                    " injected deltas for " + std::to_string(L) + " taps");
    for (int l = L - 1; l >= 0; --l) {
        auto h = skips[l];
        if (inject) {
            const auto& d = (*inject)[l];
            if (!same_shape(d.shape(), h.shape()))
                throw std::invalid_argument("denoise: injected delta " + shape_str(d.shape()) +
                                            " does not match skip " + shape_str(h.shape()) +
                                            " at level " + std::to_string(l));
            h = G::add(h, d);
        }
        x = G::concat_channels(x, h);
        for (auto& blk : dec_[l]) x = blk(x, cond, &hook_);
        if (l > 0) x = G::conv2d(G::bilinear_up(x, 2), hooked(up_w_[l]), up_b_[l], 1, 1);
    }

    auto eps = G::conv2d(G::silu(G::group_norm(x, head_g_, head_b_, cfg_.groupnorm_groups)),
                         hooked(head_w_), head_cb_, 1, 1);
    return {eps, std::move(skips)};
}

template <class T>
std::vector<Tensor<T>> Denoiser<T>::extract_pivot_features(const Tensor<T>& z0_prev,
                                                           int t_probe,
                                                           const std::vector<int>& labels) {
    auto out = denoise(G::leaf(z0_prev), std::vector<int>((size_t)z0_prev.dim(0), t_probe),
                       labels, nullptr);
    std::vector<Tensor<T>> feats;
    feats.reserve(out.skips.size());
    for (auto& s : out.skips) feats.push_back(s.value());
    return feats;
}

template <class T>
std::vector<Shape> Denoiser<T>::skip_shapes(int batch, int h, int w) const {
    const int div = cfg_.divisibility();
    if (h % div != 0 || w % div != 0)
        throw std::invalid_argument("skip_shapes: extents " + std::to_string(h) + "x" +
                                    std::to_string(w) + " must be divisible by " +
                                    std::to_string(div));
    std::vector<Shape> out;
    for (int l = 0; l < cfg_.levels; ++l)
        out.push_back({batch, cfg_.channels_at(l), h >> l, w >> l});
    return out;
}

template class Denoiser<float>;
template class Denoiser<double>;
template Census make_census<float>(const graph::ParamStore<float>&);
template Census make_census<double>(const graph::ParamStore<double>&);

}  // namespace cascade::denoiser
