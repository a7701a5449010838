#pragma once

#include <algorithm>
#include <cstdint>
#include <memory>
#include <random>
#include <stdexcept>
#include <string>
#include <vector>

namespace cascade {

using Shape = std::vector<int>;

int64_t numel(const Shape& s);
std::string shape_str(const Shape& s);
bool same_shape(const Shape& a, const Shape& b);

// Dense row-major tensor. Copies share storage; every public operation
// allocates a fresh output, so a tensor is never mutated once handed out.
template <class T>
class Tensor {
public:
    Tensor() = default;
    explicit Tensor(Shape shape)
        : shape_(std::move(shape)),
          data_(std::make_shared<std::vector<T>>(numel(shape_), T(0))) {}
    Tensor(Shape shape, std::vector<T> values)
        : shape_(std::move(shape)),
          data_(std::make_shared<std::vector<T>>(std::move(values))) {
        if ((int64_t)data_->size() != numel(shape_))
            throw std::invalid_argument("tensor data length " + std::to_string(data_->size()) +
                                        " does not match shape " + shape_str(shape_));
    }

    static Tensor full(Shape shape, T value) {
        Tensor t(std::move(shape));
        std::fill(t.data_->begin(), t.data_->end(), value);
        return t;
    }
    static Tensor zeros(Shape shape) { return Tensor(std::move(shape)); }
    static Tensor scalar(T value) { return full({1}, value); }

    bool defined() const { return data_ != nullptr; }
    const Shape& shape() const { return shape_; }
    int rank() const { return (int)shape_.size(); }
    int dim(int i) const { return shape_[i]; }
    int64_t size() const { return data_ ? (int64_t)data_->size() : 0; }

    const T* data() const { return data_->data(); }
    T* data() { return data_->data(); }
    T operator[](int64_t i) const { return (*data_)[i]; }
    T& operator[](int64_t i) { return (*data_)[i]; }

    T item() const {
        if (size() != 1) throw std::runtime_error("item() on non-scalar tensor " + shape_str(shape_));
        return (*data_)[0];
    }

    Tensor clone() const {
        if (!defined()) return Tensor();
        return Tensor(shape_, *data_);
    }

    Tensor reshaped(Shape shape) const {
        if (numel(shape) != size())
            throw std::invalid_argument("reshape " + shape_str(shape_) + " -> " + shape_str(shape) +
                                        " changes element count");
        Tensor t;
        t.shape_ = std::move(shape);
        t.data_ = data_;
        return t;
    }

    template <class U>
    Tensor<U> cast() const {
        Tensor<U> out(shape_);
        const T* src = data();
        U* dst = out.data();
        for (int64_t i = 0; i < size(); ++i) dst[i] = (U)src[i];
        return out;
    }

    bool all_finite() const;

private:
    Shape shape_;
    std::shared_ptr<std::vector<T>> data_;
};

using Tensorf = Tensor<float>;
using Tensord = Tensor<double>;

// Throws if any element is non-finite; `what` names the operation.
template <class T>
void require_finite(const Tensor<T>& t, const char* what);

// Deterministic RNG. normal() uses std::normal_distribution, which is
// stable for a fixed standard library build.
class Rng {
public:
    explicit Rng(uint64_t seed) : gen_(seed) {}
    double normal() { return normal_(gen_); }
    double uniform() { return uniform_(gen_); }
    // inclusive bounds
    int64_t uniform_int(int64_t lo, int64_t hi) {
        return std::uniform_int_distribution<int64_t>(lo, hi)(gen_);
    }
    uint64_t raw() { return gen_(); }

private:
    std::mt19937_64 gen_;
    std::normal_distribution<double> normal_{0.0, 1.0};
    std::uniform_real_distribution<double> uniform_{0.0, 1.0};
};

// Stream derivation so parallel consumers never share a generator state.
uint64_t mix_seed(uint64_t seed, uint64_t stream);

template <class T>
Tensor<T> randn(Shape shape, Rng& rng) {
    Tensor<T> t(std::move(shape));
    T* p = t.data();
    for (int64_t i = 0; i < t.size(); ++i) p[i] = (T)rng.normal();
    return t;
}

template <class T>
Tensor<T> randn_seeded(Shape shape, uint64_t seed) {
    Rng rng(seed);
    return randn<T>(std::move(shape), rng);
}

// Worker-thread cap shared by OpenMP loops and the BLAS backend.
// Reads CASCADE_THREADS once; explicit set wins.
namespace threads {
int count();
void set(int n);
}

}  // namespace cascade
