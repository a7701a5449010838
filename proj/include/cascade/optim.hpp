#pragma once

#include <map>

#include "cascade/graph.hpp"

namespace cascade::optim {

struct AdamConfig {
    double lr = 5e-5;
    double beta1 = 0.9;
    double beta2 = 0.999;
    double eps = 1e-8;
};

// Adam over a ParamStore. Moment state is keyed by parameter name, so the
// same optimizer keeps working if groups are frozen or thawed mid-run.
// step() consumes whatever gradients backward() left behind and clears them;
// parameters that took no part in the loss are left untouched.
template <class T>
class Adam {
public:
    Adam(graph::ParamStore<T>& store, AdamConfig cfg = {});

    void step();
    int64_t steps_taken() const { return t_; }
    const AdamConfig& config() const { return cfg_; }

private:
    struct Moments {
        Tensor<T> m, v;
    };
    graph::ParamStore<T>* store_;
    AdamConfig cfg_;
    int64_t t_ = 0;
    std::map<std::string, Moments> state_;
};

}  // namespace cascade::optim
