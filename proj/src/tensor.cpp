#include "cascade/tensor.hpp"

#include <cmath>
#include <cstdlib>
#include <cstring>
#include <thread>

#ifdef _OPENMP
#include <omp.h>
#endif

extern "C" void openblas_set_num_threads(int);

namespace cascade {

int64_t numel(const Shape& s) {
    int64_t n = 1;
    for (int d : s) {
        if (d < 0) throw std::invalid_argument("negative extent in shape " + shape_str(s));
        n *= d;
    }
    return n;
}

std::string shape_str(const Shape& s) {
    std::string out = "[";
    for (size_t i = 0; i < s.size(); ++i) {
        if (i) out += ", ";
        out += std::to_string(s[i]);
    }
    return out + "]";
}

bool same_shape(const Shape& a, const Shape& b) { return a == b; }

namespace {
template <class T>
struct FiniteBits;
template <>
struct FiniteBits<float> {
    using U = uint32_t;
    static constexpr U exp = 0x7f800000u;
};
template <>
struct FiniteBits<double> {
    using U = uint64_t;
    static constexpr U exp = 0x7ff0000000000000ull;
};
}  // namespace

// exponent-bits test instead of std::isfinite so the scan vectorizes
template <class T>
bool Tensor<T>::all_finite() const {
    if (!defined()) return true;
    using U = typename FiniteBits<T>::U;
    const T* p = data();
    const int64_t n = size();
    U bad = 0;
    for (int64_t i = 0; i < n; ++i) {
        U u;
        std::memcpy(&u, &p[i], sizeof(T));
        bad |= (U)((u & FiniteBits<T>::exp) == FiniteBits<T>::exp);
    }
    return bad == 0;
}

template <class T>
void require_finite(const Tensor<T>& t, const char* what) {
    if (!t.all_finite())
        throw std::runtime_error(std::string("non-finite value produced by ") + what);
}

template class Tensor<float>;
template class Tensor<double>;
template void require_finite<float>(const Tensor<float>&, const char*);
template void require_finite<double>(const Tensor<double>&, const char*);

uint64_t mix_seed(uint64_t seed, uint64_t stream) {
    // splitmix64 over the pair
    uint64_t z = seed + 0x9e3779b97f4a7c15ULL * (stream + 1);
    z = (z ^ (z >> 30)) * 0xbf58476d1ce4e5b9ULL;
    z = (z ^ (z >> 27)) * 0x94d049bb133111ebULL;
    return z ^ (z >> 31);
}

namespace threads {

namespace {
int resolve_default() {
    int n = (int)std::thread::hardware_concurrency();
    if (n < 1) n = 1;
    if (const char* env = std::getenv("CASCADE_THREADS")) {
        int cap = std::atoi(env);
        if (cap >= 1 && cap < n) n = cap;
    }
    return n;
}
int g_count = 0;
}  // namespace

int count() {
    if (g_count == 0) set(resolve_default());
    return g_count;
}

void set(int n) {
    if (n < 1) n = 1;
    g_count = n;
#ifdef _OPENMP
    omp_set_num_threads(n);
#endif
    // GEMM chunks are dispatched from our own loops; BLAS stays sequential.
    openblas_set_num_threads(1);
}

}  // namespace threads

}  // namespace cascade
