#pragma once

#include <cmath>
#include <functional>

#include "cascade/graph.hpp"

// Central finite differences vs analytic gradients, 64-bit. `make_loss`
// rebuilds the forward graph from the given leaves on every call.
inline double max_grad_rel_err(std::vector<cascade::graph::Var<double>> leaves,
                               const std::function<cascade::graph::Var<double>()>& make_loss,
                               double h = 1e-4) {
    using cascade::Tensor;
    for (auto& v : leaves) v.clear_grad();
    auto loss = make_loss();
    cascade::graph::backward(loss);

    std::vector<Tensor<double>> analytic;
    analytic.reserve(leaves.size());
    for (auto& v : leaves) analytic.push_back(v.grad().clone());

    double worst = 0;
    for (size_t k = 0; k < leaves.size(); ++k) {
        auto& val = leaves[k].mutable_value();
        for (int64_t i = 0; i < val.size(); ++i) {
            const double orig = val[i];
            val[i] = orig + h;
            const double lp = make_loss().value().item();
            val[i] = orig - h;
            const double lm = make_loss().value().item();
            val[i] = orig;
            const double fd = (lp - lm) / (2 * h);
            const double a = analytic[k][i];
            const double err = std::abs(a - fd) / std::max({std::abs(a), std::abs(fd), 1e-3});
            worst = std::max(worst, err);
        }
        leaves[k].clear_grad();
    }
    return worst;
}
