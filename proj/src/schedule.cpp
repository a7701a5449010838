#include "cascade/schedule.hpp"

#include <cmath>

#include "cascade/kernels.hpp"

namespace cascade::schedule {

Kind kind_from_string(const std::string& s) {
    if (s == "linear") return Kind::linear;
    if (s == "cosine") return Kind::cosine;
    throw std::invalid_argument("unknown schedule kind: " + s);
}

std::string to_string(Kind k) { return k == Kind::linear ? "linear" : "cosine"; }

double NoiseSchedule::beta(int t) const {
    if (t < 1 || t > T)
        throw std::out_of_range("beta: t=" + std::to_string(t) + " outside [1, " +
                                std::to_string(T) + "]");
    return betas[t - 1];
}

double NoiseSchedule::alpha_bar(int t) const {
    if (t == 0) return 1.0;
    if (t < 0 || t > T)
        throw std::out_of_range("alpha_bar: t=" + std::to_string(t) + " outside [0, " +
                                std::to_string(T) + "]");
    return alpha_bars[t - 1];
}

NoiseSchedule make_schedule(Kind kind, int T, int K) {
    if (T < 2) throw std::invalid_argument("make_schedule: T must be >= 2");
    if (K <= 0 || K >= T)
        throw std::invalid_argument("make_schedule: K=" + std::to_string(K) +
                                    " must satisfy 0 < K < T=" + std::to_string(T));
    NoiseSchedule s;
    s.T = T;
    s.K = K;
    s.betas.resize(T);
    if (kind == Kind::linear) {
        const double lo = 1e-4, hi = 2e-2;
        for (int t = 1; t <= T; ++t) s.betas[t - 1] = lo + (hi - lo) * (t - 1) / (T - 1);
    } else {
        // squared-cosine alpha_bar target, betas derived then re-accumulated
        const double off = 0.008;
        auto f = [&](double t) {
            double v = std::cos((t / T + off) / (1 + off) * M_PI / 2);
            return v * v;
        };
        double prev = 1.0;
        for (int t = 1; t <= T; ++t) {
            double cur = f((double)t) / f(0.0);
            double beta = 1.0 - cur / prev;
            s.betas[t - 1] = std::min(beta, 0.999);
            prev = cur;
        }
    }
    s.alpha_bars.resize(T);
    double acc = 1.0;
    for (int t = 1; t <= T; ++t) {
        acc *= 1.0 - s.betas[t - 1];
        s.alpha_bars[t - 1] = acc;
    }
    for (int t = 1; t <= T; ++t) {
        if (!(s.betas[t - 1] > 0.0 && s.betas[t - 1] < 1.0))
            throw std::logic_error("schedule beta out of (0,1) at t=" + std::to_string(t));
        if (t > 1 && !(s.alpha_bars[t - 1] < s.alpha_bars[t - 2]))
            throw std::logic_error("alpha_bar not strictly decreasing at t=" + std::to_string(t));
    }
    return s;
}

DdimPlan make_ddim_plan(int start_step, int steps, double eta) {
    if (start_step < 1) throw std::invalid_argument("ddim plan: start_step must be >= 1");
    if (steps < 1) throw std::invalid_argument("ddim plan: steps must be >= 1");
    if (steps > start_step)
        throw std::invalid_argument("ddim plan: " + std::to_string(steps) +
                                    " steps do not fit below start_step " +
                                    std::to_string(start_step));
    if (eta < 0.0 || eta > 1.0) throw std::invalid_argument("ddim plan: eta must be in [0,1]");
    DdimPlan p;
    p.eta = eta;
    p.start_step = start_step;
    p.step_indices.resize(steps);
    if (steps == 1) {
        p.step_indices[0] = start_step;
    } else {
        for (int j = 0; j < steps; ++j) {
            double v = 1.0 + (double)(start_step - 1) * (steps - 1 - j) / (steps - 1);
            p.step_indices[j] = (int)std::lround(v);
        }
    }
    return p;
}

template <class T>
Tensor<T> forward_diffuse(const Tensor<T>& z0, int t, const Tensor<T>& eps,
                          const NoiseSchedule& s) {
    if (!same_shape(z0.shape(), eps.shape()))
        throw std::invalid_argument("forward_diffuse: eps " + shape_str(eps.shape()) +
                                    " does not match z0 " + shape_str(z0.shape()));
    if (t < 1 || t > s.T)
        throw std::out_of_range("forward_diffuse: t=" + std::to_string(t) + " outside [1, " +
                                std::to_string(s.T) + "]");
    const double ab = s.alpha_bar(t);
    const T a = (T)std::sqrt(ab), b = (T)std::sqrt(1.0 - ab);
    Tensor<T> z(z0.shape());
    const T* zp = z0.data();
    const T* ep = eps.data();
    T* out = z.data();
    for (int64_t i = 0; i < z.size(); ++i) out[i] = a * zp[i] + b * ep[i];
    return z;
}

template <class T>
Tensor<T> forward_diffuse(const Tensor<T>& z0, const std::vector<int>& t, const Tensor<T>& eps,
                          const NoiseSchedule& s) {
    if (z0.rank() < 1 || (int64_t)t.size() != z0.dim(0))
        throw std::invalid_argument("forward_diffuse: got " + std::to_string(t.size()) +
                                    " timesteps for batch " + std::to_string(z0.dim(0)));
    if (!same_shape(z0.shape(), eps.shape()))
        throw std::invalid_argument("forward_diffuse: eps " + shape_str(eps.shape()) +
                                    " does not match z0 " + shape_str(z0.shape()));
    Tensor<T> z(z0.shape());
    const int64_t stride = z0.size() / z0.dim(0);
    for (size_t i = 0; i < t.size(); ++i) {
        if (t[i] < 1 || t[i] > s.T)
            throw std::out_of_range("forward_diffuse: t=" + std::to_string(t[i]) +
                                    " outside [1, " + std::to_string(s.T) + "]");
        const double ab = s.alpha_bar(t[i]);
        const T a = (T)std::sqrt(ab), b = (T)std::sqrt(1.0 - ab);
        const T* zp = z0.data() + (int64_t)i * stride;
        const T* ep = eps.data() + (int64_t)i * stride;
        T* out = z.data() + (int64_t)i * stride;
        for (int64_t j = 0; j < stride; ++j) out[j] = a * zp[j] + b * ep[j];
    }
    return z;
}

template <class T>
Tensor<T> ddim_step(const Tensor<T>& z_t, const Tensor<T>& eps_pred, int t, int t_prev,
                    const NoiseSchedule& s, double eta, const Tensor<T>& noise) {
    if (!same_shape(z_t.shape(), eps_pred.shape()))
        throw std::invalid_argument("ddim_step: eps_pred " + shape_str(eps_pred.shape()) +
                                    " does not match z_t " + shape_str(z_t.shape()));
    if (t_prev >= t)
        throw std::invalid_argument("ddim_step: t_prev=" + std::to_string(t_prev) +
                                    " must be below t=" + std::to_string(t));
    if (t < 1 || t > s.T || t_prev < 0)
        throw std::out_of_range("ddim_step: bad step pair (" + std::to_string(t) + ", " +
                                std::to_string(t_prev) + ")");
    if (eta == 0.0 && noise.defined())
        throw std::invalid_argument("ddim_step: eta=0 is deterministic, drop the noise input");
    if (eta > 0.0 && !noise.defined())
        throw std::invalid_argument("ddim_step: eta>0 needs a noise input");

    const double ab_t = s.alpha_bar(t);
    const double ab_p = s.alpha_bar(t_prev);
    const double sigma =
        eta * std::sqrt((1.0 - ab_p) / (1.0 - ab_t)) * std::sqrt(1.0 - ab_t / ab_p);
    const double dir = std::sqrt(std::max(0.0, 1.0 - ab_p - sigma * sigma));
    // z0_hat = (z_t - sqrt(1-ab_t) eps) / sqrt(ab_t), then re-project
    const T c_z = (T)(std::sqrt(ab_p) / std::sqrt(ab_t));
    const T c_e = (T)(dir - std::sqrt(ab_p) / std::sqrt(ab_t) * std::sqrt(1.0 - ab_t));
    const T c_n = (T)(eta > 0.0 ? sigma : 0.0);

    Tensor<T> out(z_t.shape());
    const T* zp = z_t.data();
    const T* ep = eps_pred.data();
    const T* np = noise.defined() ? noise.data() : nullptr;
    T* op = out.data();
    for (int64_t i = 0; i < out.size(); ++i) {
        T v = c_z * zp[i] + c_e * ep[i];
        if (np) v += c_n * np[i];
        op[i] = v;
    }
    require_finite(out, "ddim_step");
    return out;
}

template <class T>
Tensor<T> pivot_replace(const Tensor<T>& z0_prev, const NoiseSchedule& s, int oh, int ow,
                        uint64_t rng_seed) {
    if (oh < z0_prev.dim(2) || ow < z0_prev.dim(3))
        throw std::invalid_argument("pivot_replace: target extents must not shrink the pivot");
    // a same-size resize aliases the input, so take a private copy before scaling in place
    Tensor<T> up = oh == z0_prev.dim(2) && ow == z0_prev.dim(3)
                       ? z0_prev.clone()
                       : kernels::bilinear_resize_fwd(z0_prev, oh, ow);
    const double ab = s.alpha_bar(s.K);
    const T a = (T)std::sqrt(ab), b = (T)std::sqrt(1.0 - ab);
    Rng rng(rng_seed);
    T* p = up.data();
    for (int64_t i = 0; i < up.size(); ++i) p[i] = a * p[i] + b * (T)rng.normal();
    return up;
}

template <class T>
Tensor<T> pivot_replace(const Tensor<T>& z0_prev, const NoiseSchedule& s, int factor,
                        uint64_t rng_seed) {
    if (factor < 1) throw std::invalid_argument("pivot_replace: factor must be >= 1");
    return pivot_replace(z0_prev, s, z0_prev.dim(2) * factor, z0_prev.dim(3) * factor,
                         rng_seed);
}

#define CASCADE_INSTANTIATE(T)                                                             \
    template Tensor<T> forward_diffuse<T>(const Tensor<T>&, int, const Tensor<T>&,         \
                                          const NoiseSchedule&);                           \
    template Tensor<T> forward_diffuse<T>(const Tensor<T>&, const std::vector<int>&,       \
                                          const Tensor<T>&, const NoiseSchedule&);         \
    template Tensor<T> ddim_step<T>(const Tensor<T>&, const Tensor<T>&, int, int,          \
                                    const NoiseSchedule&, double, const Tensor<T>&);       \
    template Tensor<T> pivot_replace<T>(const Tensor<T>&, const NoiseSchedule&, int, int,  \
                                        uint64_t);                                         \
    template Tensor<T> pivot_replace<T>(const Tensor<T>&, const NoiseSchedule&, int,       \
                                        uint64_t);

CASCADE_INSTANTIATE(float)
CASCADE_INSTANTIATE(double)

#undef CASCADE_INSTANTIATE

}  // namespace cascade::schedule
