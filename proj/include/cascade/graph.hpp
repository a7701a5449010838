#pragma once

#include <functional>
#include <unordered_map>

#include "cascade/kernels.hpp"

namespace cascade::graph {

namespace detail {

template <class T>
struct Node {
    Tensor<T> value;
    Tensor<T> grad;  // allocated on first accumulation during backward()
    bool requires_grad = false;
    bool leaf = true;
    std::function<void()> backward;
    std::vector<std::shared_ptr<Node>> parents;
};

}  // namespace detail

// Handle into the recorded forward graph. Copies alias the same node.
template <class T>
class Var {
public:
    Var() = default;
    explicit Var(Tensor<T> value, bool requires_grad = false);
    explicit Var(std::shared_ptr<detail::Node<T>> n) : node_(std::move(n)) {}

    bool defined() const { return node_ != nullptr; }
    const Tensor<T>& value() const { return node().value; }
    const Shape& shape() const { return node().value.shape(); }
    int dim(int i) const { return node().value.dim(i); }
    bool requires_grad() const { return node_ && node_->requires_grad; }

    // leaves only; flips whether gradients flow into this variable
    void set_requires_grad(bool b);
    // leaves only; in-place update path for optimizers and finite differences
    Tensor<T>& mutable_value();

    bool has_grad() const { return node_ && node_->grad.defined(); }
    const Tensor<T>& grad() const;
    void clear_grad() {
        if (node_) node_->grad = Tensor<T>();
    }

    const std::shared_ptr<detail::Node<T>>& node_ptr() const { return node_; }

private:
    detail::Node<T>& node() const {
        if (!node_) throw std::runtime_error("use of an undefined graph variable");
        return *node_;
    }
    std::shared_ptr<detail::Node<T>> node_;
};

using Varf = Var<float>;
using Vard = Var<double>;

template <class T>
Var<T> leaf(Tensor<T> value, bool requires_grad = false) {
    return Var<T>(std::move(value), requires_grad);
}

// ---- recorded operations ----------------------------------------------
// Each computes eagerly, validates the output is finite, and registers the
// pullback needed later by backward().

template <class T>
Var<T> add(const Var<T>& a, const Var<T>& b);
template <class T>
Var<T> sub(const Var<T>& a, const Var<T>& b);
template <class T>
Var<T> mul(const Var<T>& a, const Var<T>& b);
template <class T>
Var<T> scale(const Var<T>& a, T c);

template <class T>
Var<T> matmul(const Var<T>& a, const Var<T>& b);
// bias may be an undefined Var for bias-free layers
template <class T>
Var<T> linear(const Var<T>& x, const Var<T>& w, const Var<T>& b);
template <class T>
Var<T> conv2d(const Var<T>& x, const Var<T>& w, const Var<T>& b, int stride, int padding);

template <class T>
Var<T> group_norm(const Var<T>& x, const Var<T>& gamma, const Var<T>& beta, int groups,
                  T eps = (T)1e-5);
template <class T>
Var<T> silu(const Var<T>& x);
template <class T>
Var<T> film(const Var<T>& x, const Var<T>& scale, const Var<T>& shift);

template <class T>
Var<T> bilinear_up(const Var<T>& x, int factor);
template <class T>
Var<T> avg_pool(const Var<T>& x, int factor);
template <class T>
Var<T> nearest_down(const Var<T>& x, int factor);

template <class T>
Var<T> concat_channels(const Var<T>& a, const Var<T>& b);
template <class T>
Var<T> slice_channels(const Var<T>& x, int c0, int c1);
// column range of a [N, D] matrix
template <class T>
Var<T> slice_cols(const Var<T>& x, int c0, int c1);
template <class T>
Var<T> reshape(const Var<T>& x, Shape shape);

template <class T>
Var<T> mean_square(const Var<T>& x);
template <class T>
Var<T> embedding(const Var<T>& table, const std::vector<int>& ids);

// Reverse sweep from a scalar loss. Gradients land on every reachable
// variable with requires_grad set; leaves keep theirs until cleared.
template <class T>
void backward(const Var<T>& loss);

// ---- parameter registry -------------------------------------------------

template <class T>
struct Param {
    std::string name;
    std::string group;
    bool trainable = true;
    Var<T> var;
};

template <class T>
class ParamStore {
public:
    Var<T> add(const std::string& name, const std::string& group, Tensor<T> init,
               bool trainable = true);
    bool contains(const std::string& name) const { return index_.count(name) != 0; }
    Param<T>& at(const std::string& name);
    const Param<T>& at(const std::string& name) const;

    std::vector<Param<T>>& params() { return params_; }
    const std::vector<Param<T>>& params() const { return params_; }

    int64_t total_size() const;
    int64_t group_size(const std::string& group) const;
    int64_t trainable_size() const;
    std::vector<std::string> groups() const;  // in first-appearance order

    void set_group_trainable(const std::string& group, bool trainable);
    void clear_grads();

private:
    std::vector<Param<T>> params_;
    std::unordered_map<std::string, size_t> index_;
};

}  // namespace cascade::graph
