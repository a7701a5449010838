#include "cascade/graph.hpp"

#include <cstring>
#include <unordered_set>

namespace cascade::graph {

using detail::Node;

namespace {

// Fresh-tensor accumulation: the caller hands over exclusive storage.
template <class T>
void accum_move(Node<T>* n, Tensor<T>&& g) {
    if (!n->grad.defined()) {
        n->grad = std::move(g);
        return;
    }
    T* d = n->grad.data();
    const T* s = g.data();
    const int64_t nn = n->grad.size();
    for (int64_t i = 0; i < nn; ++i) d[i] += s[i];
}

// Possibly-aliased accumulation (identity-style pullbacks pass dy through).
template <class T>
void accum_shared(Node<T>* n, const Tensor<T>& g) {
    if (!n->grad.defined()) {
        n->grad = g.clone();
        return;
    }
    T* d = n->grad.data();
    const T* s = g.data();
    const int64_t nn = n->grad.size();
    for (int64_t i = 0; i < nn; ++i) d[i] += s[i];
}

template <class T>
std::shared_ptr<Node<T>> op_node(Tensor<T> value, const char* name,
                                 std::vector<std::shared_ptr<Node<T>>> parents) {
    require_finite(value, name);
    auto n = std::make_shared<Node<T>>();
    n->value = std::move(value);
    n->leaf = false;
    for (auto& p : parents)
        if (p->requires_grad) n->requires_grad = true;
    n->parents = std::move(parents);
    return n;
}

template <class T>
Tensor<T> take_cols(const Tensor<T>& x, int c0, int c1) {
    const int n = x.dim(0), d = x.dim(1);
    Tensor<T> y({n, c1 - c0});
    for (int i = 0; i < n; ++i)
        std::memcpy(y.data() + (int64_t)i * (c1 - c0), x.data() + (int64_t)i * d + c0,
                    sizeof(T) * (c1 - c0));
    return y;
}

template <class T>
Tensor<T> scatter_cols(const Tensor<T>& dy, int d, int c0) {
    const int n = dy.dim(0), w = dy.dim(1);
    Tensor<T> dx({n, d});
    for (int i = 0; i < n; ++i)
        std::memcpy(dx.data() + (int64_t)i * d + c0, dy.data() + (int64_t)i * w, sizeof(T) * w);
    return dx;
}

}  // namespace

// ---- Var ------------------------------------------------------------------

template <class T>
Var<T>::Var(Tensor<T> value, bool requires_grad) {
    require_finite(value, "leaf");
    node_ = std::make_shared<Node<T>>();
    node_->value = std::move(value);
    node_->requires_grad = requires_grad;
}

template <class T>
void Var<T>::set_requires_grad(bool b) {
    if (!node_ || !node_->leaf)
        throw std::logic_error("set_requires_grad: only leaf variables can be toggled");
    node_->requires_grad = b;
}

template <class T>
Tensor<T>& Var<T>::mutable_value() {
    if (!node_ || !node_->leaf)
        throw std::logic_error("mutable_value: only leaf variables can be updated in place");
    return node_->value;
}

template <class T>
const Tensor<T>& Var<T>::grad() const {
    if (!has_grad())
        throw std::runtime_error("gradient requested but none was computed; did backward() run?");
    return node_->grad;
}

// ---- elementwise ------------------------------------------------------------

template <class T>
Var<T> add(const Var<T>& a, const Var<T>& b) {
    auto n = op_node(kernels::add(a.value(), b.value()), "add", {a.node_ptr(), b.node_ptr()});
    if (n->requires_grad) {
        Node<T>* self = n.get();
        Node<T>* pa = a.node_ptr().get();
        Node<T>* pb = b.node_ptr().get();
        n->backward = [self, pa, pb]() {
            if (pa->requires_grad) accum_shared(pa, self->grad);
            if (pb->requires_grad) accum_shared(pb, self->grad);
        };
    }
    return Var<T>(n);
}

template <class T>
Var<T> sub(const Var<T>& a, const Var<T>& b) {
    auto n = op_node(kernels::sub(a.value(), b.value()), "sub", {a.node_ptr(), b.node_ptr()});
    if (n->requires_grad) {
        Node<T>* self = n.get();
        Node<T>* pa = a.node_ptr().get();
        Node<T>* pb = b.node_ptr().get();
        n->backward = [self, pa, pb]() {
            if (pa->requires_grad) accum_shared(pa, self->grad);
            if (pb->requires_grad) accum_move(pb, kernels::scale(self->grad, T(-1)));
        };
    }
    return Var<T>(n);
}

template <class T>
Var<T> mul(const Var<T>& a, const Var<T>& b) {
    auto n = op_node(kernels::mul(a.value(), b.value()), "mul", {a.node_ptr(), b.node_ptr()});
    if (n->requires_grad) {
        Node<T>* self = n.get();
        Node<T>* pa = a.node_ptr().get();
        Node<T>* pb = b.node_ptr().get();
        Tensor<T> av = a.value(), bv = b.value();
        n->backward = [self, pa, pb, av, bv]() {
            if (pa->requires_grad) accum_move(pa, kernels::mul(self->grad, bv));
            if (pb->requires_grad) accum_move(pb, kernels::mul(self->grad, av));
        };
    }
    return Var<T>(n);
}

template <class T>
Var<T> scale(const Var<T>& a, T c) {
    auto n = op_node(kernels::scale(a.value(), c), "scale", {a.node_ptr()});
    if (n->requires_grad) {
        Node<T>* self = n.get();
        Node<T>* pa = a.node_ptr().get();
        n->backward = [self, pa, c]() { accum_move(pa, kernels::scale(self->grad, c)); };
    }
    return Var<T>(n);
}

// ---- linear algebra ---------------------------------------------------------

template <class T>
Var<T> matmul(const Var<T>& a, const Var<T>& b) {
    auto n = op_node(kernels::matmul(a.value(), b.value()), "matmul",
                     {a.node_ptr(), b.node_ptr()});
    if (n->requires_grad) {
        Node<T>* self = n.get();
        Node<T>* pa = a.node_ptr().get();
        Node<T>* pb = b.node_ptr().get();
        Tensor<T> av = a.value(), bv = b.value();
        n->backward = [self, pa, pb, av, bv]() {
            const int m = av.dim(0), k = av.dim(1), nn = bv.dim(1);
            if (pa->requires_grad) {
                // da = dy * b^T
                Tensor<T> da({m, k});
                kernels::gemm<T>(false, true, m, k, nn, T(1), self->grad.data(), nn, bv.data(),
                                 nn, T(0), da.data(), k);
                accum_move(pa, std::move(da));
            }
            if (pb->requires_grad) {
                // db = a^T * dy
                Tensor<T> db({k, nn});
                kernels::gemm<T>(true, false, k, nn, m, T(1), av.data(), k, self->grad.data(),
                                 nn, T(0), db.data(), nn);
                accum_move(pb, std::move(db));
            }
        };
    }
    return Var<T>(n);
}

template <class T>
Var<T> linear(const Var<T>& x, const Var<T>& w, const Var<T>& b) {
    const bool has_bias = b.defined();
    auto n = op_node(kernels::linear_fwd(x.value(), w.value(),
                                         has_bias ? b.value() : Tensor<T>()),
                     "linear",
                     has_bias ? std::vector{x.node_ptr(), w.node_ptr(), b.node_ptr()}
                              : std::vector{x.node_ptr(), w.node_ptr()});
    if (n->requires_grad) {
        Node<T>* self = n.get();
        Node<T>* px = x.node_ptr().get();
        Node<T>* pw = w.node_ptr().get();
        Node<T>* pb = has_bias ? b.node_ptr().get() : nullptr;
        Tensor<T> xv = x.value(), wv = w.value();
        n->backward = [self, px, pw, pb, xv, wv]() {
            if (px->requires_grad) accum_move(px, kernels::linear_bwd_input(self->grad, wv));
            if (pw->requires_grad) accum_move(pw, kernels::linear_bwd_weight(self->grad, xv));
            if (pb && pb->requires_grad) accum_move(pb, kernels::colsum(self->grad));
        };
    }
    return Var<T>(n);
}

template <class T>
Var<T> conv2d(const Var<T>& x, const Var<T>& w, const Var<T>& b, int stride, int padding) {
    const bool has_bias = b.defined();
    auto n = op_node(kernels::conv2d_fwd(x.value(), w.value(),
                                         has_bias ? b.value() : Tensor<T>(), stride, padding),
                     "conv2d",
                     has_bias ? std::vector{x.node_ptr(), w.node_ptr(), b.node_ptr()}
                              : std::vector{x.node_ptr(), w.node_ptr()});
    if (n->requires_grad) {
        Node<T>* self = n.get();
        Node<T>* px = x.node_ptr().get();
        Node<T>* pw = w.node_ptr().get();
        Node<T>* pb = has_bias ? b.node_ptr().get() : nullptr;
        Tensor<T> xv = x.value(), wv = w.value();
        n->backward = [self, px, pw, pb, xv, wv, stride, padding]() {
            if (px->requires_grad)
                accum_move(px,
                           kernels::conv2d_bwd_input(self->grad, wv, xv.shape(), stride, padding));
            if (pw->requires_grad)
                accum_move(pw, kernels::conv2d_bwd_weight(self->grad, xv, wv.shape(), stride,
                                                          padding));
            if (pb && pb->requires_grad) accum_move(pb, kernels::conv2d_bwd_bias(self->grad));
        };
    }
    return Var<T>(n);
}

// ---- normalization and activations -------------------------------------------

template <class T>
Var<T> group_norm(const Var<T>& x, const Var<T>& gamma, const Var<T>& beta, int groups, T eps) {
    auto r = kernels::group_norm_fwd(x.value(), gamma.value(), beta.value(), groups, eps);
    auto n = op_node(std::move(r.y), "group_norm",
                     {x.node_ptr(), gamma.node_ptr(), beta.node_ptr()});
    if (n->requires_grad) {
        Node<T>* self = n.get();
        Node<T>* px = x.node_ptr().get();
        Node<T>* pg = gamma.node_ptr().get();
        Node<T>* pbt = beta.node_ptr().get();
        Tensor<T> xv = x.value(), gv = gamma.value();
        Tensor<T> mean = std::move(r.mean), rstd = std::move(r.rstd);
        n->backward = [self, px, pg, pbt, xv, gv, mean, rstd, groups]() {
            Tensor<T> dx, dgamma, dbeta;
            kernels::group_norm_bwd(self->grad, xv, gv, mean, rstd, groups, dx, dgamma, dbeta);
            if (px->requires_grad) accum_move(px, std::move(dx));
            if (pg->requires_grad) accum_move(pg, std::move(dgamma));
            if (pbt->requires_grad) accum_move(pbt, std::move(dbeta));
        };
    }
    return Var<T>(n);
}

template <class T>
Var<T> silu(const Var<T>& x) {
    auto n = op_node(kernels::silu_fwd(x.value()), "silu", {x.node_ptr()});
    if (n->requires_grad) {
        Node<T>* self = n.get();
        Node<T>* px = x.node_ptr().get();
        Tensor<T> xv = x.value();
        n->backward = [self, px, xv]() { accum_move(px, kernels::silu_bwd(self->grad, xv)); };
    }
    return Var<T>(n);
}

template <class T>
Var<T> film(const Var<T>& x, const Var<T>& sc, const Var<T>& sh) {
    auto n = op_node(kernels::film_fwd(x.value(), sc.value(), sh.value()), "film",
                     {x.node_ptr(), sc.node_ptr(), sh.node_ptr()});
    if (n->requires_grad) {
        Node<T>* self = n.get();
        Node<T>* px = x.node_ptr().get();
        Node<T>* ps = sc.node_ptr().get();
        Node<T>* ph = sh.node_ptr().get();
        Tensor<T> xv = x.value(), sv = sc.value();
        n->backward = [self, px, ps, ph, xv, sv]() {
            Tensor<T> dx, dsc, dsh;
            kernels::film_bwd(self->grad, xv, sv, dx, dsc, dsh);
            if (px->requires_grad) accum_move(px, std::move(dx));
            if (ps->requires_grad) accum_move(ps, std::move(dsc));
            if (ph->requires_grad) accum_move(ph, std::move(dsh));
        };
    }
    return Var<T>(n);
}

// ---- resampling ----------------------------------------------------------------

template <class T>
Var<T> bilinear_up(const Var<T>& x, int factor) {
    auto n = op_node(kernels::bilinear_up_fwd(x.value(), factor), "bilinear_up", {x.node_ptr()});
    if (n->requires_grad) {
        Node<T>* self = n.get();
        Node<T>* px = x.node_ptr().get();
        Shape xs = x.shape();
        n->backward = [self, px, xs, factor]() {
            if (factor == 1)
                accum_shared(px, self->grad);
            else
                accum_move(px, kernels::bilinear_up_bwd(self->grad, xs, factor));
        };
    }
    return Var<T>(n);
}

template <class T>
Var<T> avg_pool(const Var<T>& x, int factor) {
    auto n = op_node(kernels::avg_pool_fwd(x.value(), factor), "avg_pool", {x.node_ptr()});
    if (n->requires_grad) {
        Node<T>* self = n.get();
        Node<T>* px = x.node_ptr().get();
        Shape xs = x.shape();
        n->backward = [self, px, xs, factor]() {
            if (factor == 1)
                accum_shared(px, self->grad);
            else
                accum_move(px, kernels::avg_pool_bwd(self->grad, xs, factor));
        };
    }
    return Var<T>(n);
}

template <class T>
Var<T> nearest_down(const Var<T>& x, int factor) {
    auto n = op_node(kernels::nearest_down_fwd(x.value(), factor), "nearest_down",
                     {x.node_ptr()});
    if (n->requires_grad) {
        Node<T>* self = n.get();
        Node<T>* px = x.node_ptr().get();
        Shape xs = x.shape();
        n->backward = [self, px, xs, factor]() {
            if (factor == 1)
                accum_shared(px, self->grad);
            else
                accum_move(px, kernels::nearest_down_bwd(self->grad, xs, factor));
        };
    }
    return Var<T>(n);
}

// ---- structural -----------------------------------------------------------------

template <class T>
Var<T> concat_channels(const Var<T>& a, const Var<T>& b) {
    auto n = op_node(kernels::concat_channels(a.value(), b.value()), "concat_channels",
                     {a.node_ptr(), b.node_ptr()});
    if (n->requires_grad) {
        Node<T>* self = n.get();
        Node<T>* pa = a.node_ptr().get();
        Node<T>* pb = b.node_ptr().get();
        const int ca = a.dim(1), cb = b.dim(1);
        n->backward = [self, pa, pb, ca, cb]() {
            if (pa->requires_grad) accum_move(pa, kernels::slice_channels(self->grad, 0, ca));
            if (pb->requires_grad)
                accum_move(pb, kernels::slice_channels(self->grad, ca, ca + cb));
        };
    }
    return Var<T>(n);
}

template <class T>
Var<T> slice_channels(const Var<T>& x, int c0, int c1) {
    auto n = op_node(kernels::slice_channels(x.value(), c0, c1), "slice_channels",
                     {x.node_ptr()});
    if (n->requires_grad) {
        Node<T>* self = n.get();
        Node<T>* px = x.node_ptr().get();
        Shape xs = x.shape();
        n->backward = [self, px, xs, c0]() {
            Tensor<T> dx(xs);
            kernels::add_into_channels(dx, self->grad, c0);
            accum_move(px, std::move(dx));
        };
    }
    return Var<T>(n);
}

template <class T>
Var<T> slice_cols(const Var<T>& x, int c0, int c1) {
    if (x.value().rank() != 2 || c0 < 0 || c1 > x.dim(1) || c0 >= c1)
        throw std::invalid_argument("slice_cols: bad range [" + std::to_string(c0) + ", " +
                                    std::to_string(c1) + ") for " + shape_str(x.shape()));
    auto n = op_node(take_cols(x.value(), c0, c1), "slice_cols", {x.node_ptr()});
    if (n->requires_grad) {
        Node<T>* self = n.get();
        Node<T>* px = x.node_ptr().get();
        const int d = x.dim(1);
        n->backward = [self, px, d, c0]() { accum_move(px, scatter_cols(self->grad, d, c0)); };
    }
    return Var<T>(n);
}

template <class T>
Var<T> reshape(const Var<T>& x, Shape shape) {
    auto n = op_node(x.value().reshaped(std::move(shape)), "reshape", {x.node_ptr()});
    if (n->requires_grad) {
        Node<T>* self = n.get();
        Node<T>* px = x.node_ptr().get();
        Shape xs = x.shape();
        n->backward = [self, px, xs]() { accum_shared(px, self->grad.reshaped(xs)); };
    }
    return Var<T>(n);
}

// ---- reductions and lookups -----------------------------------------------------

template <class T>
Var<T> mean_square(const Var<T>& x) {
    auto n = op_node(kernels::mean_square(x.value()), "mean_square", {x.node_ptr()});
    if (n->requires_grad) {
        Node<T>* self = n.get();
        Node<T>* px = x.node_ptr().get();
        Tensor<T> xv = x.value();
        n->backward = [self, px, xv]() {
            const T c = self->grad.item() * (T)2 / (T)xv.size();
            accum_move(px, kernels::scale(xv, c));
        };
    }
    return Var<T>(n);
}

template <class T>
Var<T> embedding(const Var<T>& table, const std::vector<int>& ids) {
    auto n = op_node(kernels::embedding_fwd(table.value(), ids), "embedding",
                     {table.node_ptr()});
    if (n->requires_grad) {
        Node<T>* self = n.get();
        Node<T>* pt = table.node_ptr().get();
        Shape ts = table.shape();
        n->backward = [self, pt, ts, ids]() {
            accum_move(pt, kernels::embedding_bwd(self->grad, ts, ids));
        };
    }
    return Var<T>(n);
}

// ---- reverse sweep ----------------------------------------------------------------

template <class T>
void backward(const Var<T>& loss) {
    auto root = loss.node_ptr();
    if (!root) throw std::invalid_argument("backward: undefined variable");
    if (root->value.size() != 1)
        throw std::invalid_argument("backward: loss must be scalar, got " +
                                    shape_str(root->value.shape()));
    if (!root->requires_grad)
        throw std::invalid_argument(
            "backward: loss does not depend on any variable with requires_grad");

    // iterative post-order over the grad-requiring subgraph
    std::vector<Node<T>*> order;
    std::unordered_set<Node<T>*> seen{root.get()};
    struct Frame {
        Node<T>* n;
        size_t next;
    };
    std::vector<Frame> stack{{root.get(), 0}};
    while (!stack.empty()) {
        Frame& f = stack.back();
        if (f.next < f.n->parents.size()) {
            Node<T>* p = f.n->parents[f.next++].get();
            if (p->requires_grad && seen.insert(p).second) stack.push_back({p, 0});
        } else {
            order.push_back(f.n);
            stack.pop_back();
        }
    }

    root->grad = Tensor<T>::full(root->value.shape(), T(1));
    for (auto it = order.rbegin(); it != order.rend(); ++it) {
        Node<T>* n = *it;
        if (n->backward && n->grad.defined()) {
            n->backward();
            n->backward = nullptr;  // drop saved activations as the sweep passes
        }
    }
}

// ---- parameter registry -------------------------------------------------------------

template <class T>
Var<T> ParamStore<T>::add(const std::string& name, const std::string& group, Tensor<T> init,
                          bool trainable) {
    if (index_.count(name))
        throw std::invalid_argument("duplicate parameter name: " + name);
    index_[name] = params_.size();
    params_.push_back(Param<T>{name, group, trainable, Var<T>(std::move(init), trainable)});
    return params_.back().var;
}

template <class T>
Param<T>& ParamStore<T>::at(const std::string& name) {
    auto it = index_.find(name);
    if (it == index_.end()) throw std::out_of_range("unknown parameter: " + name);
    return params_[it->second];
}

template <class T>
const Param<T>& ParamStore<T>::at(const std::string& name) const {
    auto it = index_.find(name);
    if (it == index_.end()) throw std::out_of_range("unknown parameter: " + name);
    return params_[it->second];
}

template <class T>
int64_t ParamStore<T>::total_size() const {
    int64_t n = 0;
    for (auto& p : params_) n += p.var.value().size();
    return n;
}

template <class T>
int64_t ParamStore<T>::group_size(const std::string& group) const {
    int64_t n = 0;
    for (auto& p : params_)
        if (p.group == group) n += p.var.value().size();
    return n;
}

template <class T>
int64_t ParamStore<T>::trainable_size() const {
    int64_t n = 0;
    for (auto& p : params_)
        if (p.trainable) n += p.var.value().size();
    return n;
}

template <class T>
std::vector<std::string> ParamStore<T>::groups() const {
    std::vector<std::string> out;
    for (auto& p : params_)
        if (std::find(out.begin(), out.end(), p.group) == out.end()) out.push_back(p.group);
    return out;
}

template <class T>
void ParamStore<T>::set_group_trainable(const std::string& group, bool trainable) {
    bool found = false;
    for (auto& p : params_)
        if (p.group == group) {
            p.trainable = trainable;
            p.var.set_requires_grad(trainable);
            found = true;
        }
    if (!found) throw std::invalid_argument("no parameters in group: " + group);
}

template <class T>
void ParamStore<T>::clear_grads() {
    for (auto& p : params_) p.var.clear_grad();
}

// ---- explicit instantiations ---------------------------------------------------------

#define CASCADE_INSTANTIATE(T)                                                       \
    template class Var<T>;                                                           \
    template class ParamStore<T>;                                                    \
    template Var<T> add<T>(const Var<T>&, const Var<T>&);                            \
    template Var<T> sub<T>(const Var<T>&, const Var<T>&);                            \
    template Var<T> mul<T>(const Var<T>&, const Var<T>&);                            \
    template Var<T> scale<T>(const Var<T>&, T);                                      \
    template Var<T> matmul<T>(const Var<T>&, const Var<T>&);                         \
    template Var<T> linear<T>(const Var<T>&, const Var<T>&, const Var<T>&);          \
    template Var<T> conv2d<T>(const Var<T>&, const Var<T>&, const Var<T>&, int, int);\
    template Var<T> group_norm<T>(const Var<T>&, const Var<T>&, const Var<T>&, int, T); \
    template Var<T> silu<T>(const Var<T>&);                                          \
    template Var<T> film<T>(const Var<T>&, const Var<T>&, const Var<T>&);            \
    template Var<T> bilinear_up<T>(const Var<T>&, int);                              \
    template Var<T> avg_pool<T>(const Var<T>&, int);                                 \
    template Var<T> nearest_down<T>(const Var<T>&, int);                             \
    template Var<T> concat_channels<T>(const Var<T>&, const Var<T>&);                \
    template Var<T> slice_channels<T>(const Var<T>&, int, int);                      \
    template Var<T> slice_cols<T>(const Var<T>&, int, int);                          \
    template Var<T> reshape<T>(const Var<T>&, Shape);                                \
    template Var<T> mean_square<T>(const Var<T>&);                                   \
    template Var<T> embedding<T>(const Var<T>&, const std::vector<int>&);            \
    template void backward<T>(const Var<T>&);

CASCADE_INSTANTIATE(float)
CASCADE_INSTANTIATE(double)

#undef CASCADE_INSTANTIATE

}  // namespace cascade::graph
