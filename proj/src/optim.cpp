#include "cascade/optim.hpp"

#include <cmath>

namespace cascade::optim {

template <class T>
Adam<T>::Adam(graph::ParamStore<T>& store, AdamConfig cfg) : store_(&store), cfg_(cfg) {
    if (cfg_.lr <= 0) throw std::invalid_argument("adam: lr must be positive");
    if (cfg_.beta1 < 0 || cfg_.beta1 >= 1 || cfg_.beta2 < 0 || cfg_.beta2 >= 1)
        throw std::invalid_argument("adam: betas must lie in [0, 1)");
}

template <class T>
void Adam<T>::step() {
    ++t_;
    const double bc1 = 1.0 - std::pow(cfg_.beta1, (double)t_);
    const double bc2 = 1.0 - std::pow(cfg_.beta2, (double)t_);
    for (auto& p : store_->params()) {
        if (!p.trainable || !p.var.has_grad()) continue;
        const Tensor<T>& g = p.var.grad();
        auto it = state_.find(p.name);
        if (it == state_.end())
            it = state_
                     .emplace(p.name, Moments{Tensor<T>::zeros(g.shape()),
                                              Tensor<T>::zeros(g.shape())})
                     .first;
        Tensor<T>& m = it->second.m;
        Tensor<T>& v = it->second.v;
        Tensor<T>& w = p.var.mutable_value();
        const int64_t n = g.size();
        T* mp = m.data();
        T* vp = v.data();
        T* wp = w.data();
        const T* gp = g.data();
        for (int64_t i = 0; i < n; ++i) {
            const double gi = (double)gp[i];
            const double mi = cfg_.beta1 * (double)mp[i] + (1.0 - cfg_.beta1) * gi;
            const double vi = cfg_.beta2 * (double)vp[i] + (1.0 - cfg_.beta2) * gi * gi;
            mp[i] = (T)mi;
            vp[i] = (T)vi;
            wp[i] = (T)((double)wp[i] -
                        cfg_.lr * (mi / bc1) / (std::sqrt(vi / bc2) + cfg_.eps));
        }
        require_finite(w, ("adam update for " + p.name).c_str());
    }
    store_->clear_grads();
}

template class Adam<float>;
template class Adam<double>;

}  // namespace cascade::optim
