#include "cascade/kernels.hpp"

#include <cblas.h>

#include <algorithm>
#include <cmath>
#include <cstring>

#ifdef _OPENMP
#include <omp.h>
#endif

namespace cascade::kernels {

namespace {

inline void blas_gemm(bool ta, bool tb, int m, int n, int k, float alpha, const float* a, int lda,
                      const float* b, int ldb, float beta, float* c, int ldc) {
    cblas_sgemm(CblasRowMajor, ta ? CblasTrans : CblasNoTrans, tb ? CblasTrans : CblasNoTrans, m,
                n, k, alpha, a, lda, b, ldb, beta, c, ldc);
}

inline void blas_gemm(bool ta, bool tb, int m, int n, int k, double alpha, const double* a,
                      int lda, const double* b, int ldb, double beta, double* c, int ldc) {
    cblas_dgemm(CblasRowMajor, ta ? CblasTrans : CblasNoTrans, tb ? CblasTrans : CblasNoTrans, m,
                n, k, alpha, a, lda, b, ldb, beta, c, ldc);
}

constexpr int kGemmChunk = 1024;

void require_nchw(const Shape& s, const char* what) {
    if (s.size() != 4)
        throw std::invalid_argument(std::string(what) + ": expected a 4-d NCHW tensor, got " +
                                    shape_str(s));
}

// column range of op(B): a plain pointer offset for either transpose mode
template <class T>
const T* col_slice(const T* b, bool trans_b, int ldb, int c0) {
    return trans_b ? b + (int64_t)c0 * ldb : b + c0;
}

template <class T>
void im2col(const T* x, int cin, int h, int w, int kh, int kw, int stride, int pad, int oh, int ow,
            T* col) {
    // col is [cin*kh*kw, oh*ow]
    const int64_t ocols = (int64_t)oh * ow;
    for (int ci = 0; ci < cin; ++ci) {
        const T* plane = x + (int64_t)ci * h * w;
        for (int ky = 0; ky < kh; ++ky) {
            for (int kx = 0; kx < kw; ++kx) {
                T* row = col + ((int64_t)(ci * kh + ky) * kw + kx) * ocols;
                for (int oy = 0; oy < oh; ++oy) {
                    int iy = oy * stride - pad + ky;
                    T* dst = row + (int64_t)oy * ow;
                    if (iy < 0 || iy >= h) {
                        std::memset(dst, 0, sizeof(T) * ow);
                        continue;
                    }
                    const T* src = plane + (int64_t)iy * w;
                    for (int ox = 0; ox < ow; ++ox) {
                        int ix = ox * stride - pad + kx;
                        dst[ox] = (ix >= 0 && ix < w) ? src[ix] : T(0);
                    }
                }
            }
        }
    }
}

template <class T>
void col2im(const T* col, int cin, int h, int w, int kh, int kw, int stride, int pad, int oh,
            int ow, T* x) {
    const int64_t ocols = (int64_t)oh * ow;
    std::memset(x, 0, sizeof(T) * (int64_t)cin * h * w);
    for (int ci = 0; ci < cin; ++ci) {
        T* plane = x + (int64_t)ci * h * w;
        for (int ky = 0; ky < kh; ++ky) {
            for (int kx = 0; kx < kw; ++kx) {
                const T* row = col + ((int64_t)(ci * kh + ky) * kw + kx) * ocols;
                for (int oy = 0; oy < oh; ++oy) {
                    int iy = oy * stride - pad + ky;
                    if (iy < 0 || iy >= h) continue;
                    T* dst = plane + (int64_t)iy * w;
                    const T* src = row + (int64_t)oy * ow;
                    for (int ox = 0; ox < ow; ++ox) {
                        int ix = ox * stride - pad + kx;
                        if (ix >= 0 && ix < w) dst[ix] += src[ox];
                    }
                }
            }
        }
    }
}

}  // namespace

template <class T>
void gemm(bool trans_a, bool trans_b, int m, int n, int k, T alpha, const T* a, int lda,
          const T* b, int ldb, T beta, T* c, int ldc) {
    if (m == 0 || n == 0) return;
    if (k == 0) {
        for (int i = 0; i < m; ++i)
            for (int j = 0; j < n; ++j) c[(int64_t)i * ldc + j] *= beta;
        return;
    }
    // chunk layout must not depend on the thread count, only dispatch does
    if (n <= kGemmChunk) {
        blas_gemm(trans_a, trans_b, m, n, k, alpha, a, lda, b, ldb, beta, c, ldc);
        return;
    }
    const int nchunks = (n + kGemmChunk - 1) / kGemmChunk;
#pragma omp parallel for schedule(static)
    for (int i = 0; i < nchunks; ++i) {
        int c0 = i * kGemmChunk;
        int cols = std::min(kGemmChunk, n - c0);
        blas_gemm(trans_a, trans_b, m, cols, k, alpha, a, lda, col_slice(b, trans_b, ldb, c0),
                  ldb, beta, c + c0, ldc);
    }
}

template <class T>
Tensor<T> matmul(const Tensor<T>& a, const Tensor<T>& b) {
    if (a.rank() != 2 || b.rank() != 2 || a.dim(1) != b.dim(0))
        throw std::invalid_argument("matmul: incompatible shapes " + shape_str(a.shape()) +
                                    " and " + shape_str(b.shape()));
    Tensor<T> c({a.dim(0), b.dim(1)});
    gemm<T>(false, false, a.dim(0), b.dim(1), a.dim(1), T(1), a.data(), a.dim(1), b.data(),
            b.dim(1), T(0), c.data(), b.dim(1));
    return c;
}

// ---- convolution -----------------------------------------------------------

template <class T>
Shape conv2d_out_shape(const Shape& x, const Shape& w, int stride, int padding) {
    require_nchw(x, "conv2d input");
    require_nchw(w, "conv2d weight");
    if (x[1] != w[1])
        throw std::invalid_argument("conv2d: input channels of " + shape_str(x) +
                                    " do not match weight " + shape_str(w));
    if (stride < 1) throw std::invalid_argument("conv2d: stride must be >= 1");
    if (padding < 0) throw std::invalid_argument("conv2d: padding must be >= 0");
    int oh = (x[2] + 2 * padding - w[2]) / stride + 1;
    int ow = (x[3] + 2 * padding - w[3]) / stride + 1;
    if (x[2] + 2 * padding < w[2] || x[3] + 2 * padding < w[3] || oh < 1 || ow < 1)
        throw std::invalid_argument("conv2d: kernel " + shape_str(w) +
                                    " does not fit input " + shape_str(x));
    return {x[0], w[0], oh, ow};
}

template <class T>
Tensor<T> conv2d_fwd(const Tensor<T>& x, const Tensor<T>& w, const Tensor<T>& b, int stride,
                     int padding) {
    Shape os = conv2d_out_shape<T>(x.shape(), w.shape(), stride, padding);
    const int n = x.dim(0), cin = x.dim(1), h = x.dim(2), wd = x.dim(3);
    const int cout = w.dim(0), kh = w.dim(2), kw = w.dim(3);
    const int oh = os[2], ow = os[3];
    const int64_t kcols = (int64_t)cin * kh * kw;
    const int64_t ocols = (int64_t)oh * ow;
    if (b.defined() && b.size() > 0 && (b.rank() != 1 || b.dim(0) != cout))
        throw std::invalid_argument("conv2d: bias " + shape_str(b.shape()) +
                                    " does not match output channels of " + shape_str(w.shape()));

    Tensor<T> y(os);
    std::vector<T> col(n * kcols * ocols);
#pragma omp parallel for schedule(static)
    for (int i = 0; i < n; ++i)
        im2col(x.data() + (int64_t)i * cin * h * wd, cin, h, wd, kh, kw, stride, padding, oh, ow,
               col.data() + (int64_t)i * kcols * ocols);

    const int nchunks = (int)((ocols + kGemmChunk - 1) / kGemmChunk);
#pragma omp parallel for schedule(static)
    for (int job = 0; job < n * nchunks; ++job) {
        const int i = job / nchunks;
        const int64_t c0 = (int64_t)(job % nchunks) * kGemmChunk;
        const int cols = (int)std::min<int64_t>(kGemmChunk, ocols - c0);
        blas_gemm(false, false, cout, cols, (int)kcols, T(1), w.data(), (int)kcols,
                  col.data() + (int64_t)i * kcols * ocols + c0, (int)ocols, T(0),
                  y.data() + (int64_t)i * cout * ocols + c0, (int)ocols);
    }

    if (b.defined() && b.size() > 0) {
        const T* bias = b.data();
#pragma omp parallel for schedule(static)
        for (int p = 0; p < n * cout; ++p) {
            T* dst = y.data() + (int64_t)p * ocols;
            const T v = bias[p % cout];
            for (int64_t j = 0; j < ocols; ++j) dst[j] += v;
        }
    }
    return y;
}

template <class T>
Tensor<T> conv2d_bwd_input(const Tensor<T>& dy, const Tensor<T>& w, const Shape& x_shape,
                           int stride, int padding) {
    const int n = x_shape[0], cin = x_shape[1], h = x_shape[2], wd = x_shape[3];
    const int cout = w.dim(0), kh = w.dim(2), kw = w.dim(3);
    const int oh = dy.dim(2), ow = dy.dim(3);
    const int64_t kcols = (int64_t)cin * kh * kw;
    const int64_t ocols = (int64_t)oh * ow;
    Tensor<T> dx(x_shape);
#pragma omp parallel for schedule(static)
    for (int i = 0; i < n; ++i) {
        std::vector<T> dcol(kcols * ocols);
        blas_gemm(true, false, (int)kcols, (int)ocols, cout, T(1), w.data(), (int)kcols,
                  dy.data() + (int64_t)i * cout * ocols, (int)ocols, T(0), dcol.data(),
                  (int)ocols);
        col2im(dcol.data(), cin, h, wd, kh, kw, stride, padding, oh, ow,
               dx.data() + (int64_t)i * cin * h * wd);
    }
    return dx;
}

template <class T>
Tensor<T> conv2d_bwd_weight(const Tensor<T>& dy, const Tensor<T>& x, const Shape& w_shape,
                            int stride, int padding) {
    const int n = x.dim(0), cin = x.dim(1), h = x.dim(2), wd = x.dim(3);
    const int cout = w_shape[0], kh = w_shape[2], kw = w_shape[3];
    const int oh = dy.dim(2), ow = dy.dim(3);
    const int64_t kcols = (int64_t)cin * kh * kw;
    const int64_t ocols = (int64_t)oh * ow;
    const int64_t wsize = (int64_t)cout * kcols;

    // per-image partials, then a fixed-order reduction
    std::vector<T> partial(n * wsize);
#pragma omp parallel for schedule(static)
    for (int i = 0; i < n; ++i) {
        std::vector<T> col(kcols * ocols);
        im2col(x.data() + (int64_t)i * cin * h * wd, cin, h, wd, kh, kw, stride, padding, oh, ow,
               col.data());
        blas_gemm(false, true, cout, (int)kcols, (int)ocols, T(1),
                  dy.data() + (int64_t)i * cout * ocols, (int)ocols, col.data(), (int)ocols,
                  T(0), partial.data() + (int64_t)i * wsize, (int)kcols);
    }
    Tensor<T> dw(w_shape);
    for (int i = 0; i < n; ++i) {
        const T* src = partial.data() + (int64_t)i * wsize;
        T* dst = dw.data();
        for (int64_t j = 0; j < wsize; ++j) dst[j] += src[j];
    }
    return dw;
}

template <class T>
Tensor<T> conv2d_bwd_bias(const Tensor<T>& dy) {
    const int n = dy.dim(0), cout = dy.dim(1);
    const int64_t ocols = (int64_t)dy.dim(2) * dy.dim(3);
    Tensor<T> db({cout});
    for (int i = 0; i < n; ++i)
        for (int c = 0; c < cout; ++c) {
            const T* src = dy.data() + ((int64_t)i * cout + c) * ocols;
            double acc = 0;
            for (int64_t j = 0; j < ocols; ++j) acc += (double)src[j];
            db[c] += (T)acc;
        }
    return db;
}

template <class T>
Tensor<T> conv2d_naive(const Tensor<T>& x, const Tensor<T>& w, const Tensor<T>& b, int stride,
                       int padding) {
    Shape os = conv2d_out_shape<T>(x.shape(), w.shape(), stride, padding);
    const int n = x.dim(0), cin = x.dim(1), h = x.dim(2), wd = x.dim(3);
    const int cout = w.dim(0), kh = w.dim(2), kw = w.dim(3);
    Tensor<T> y(os);
    for (int i = 0; i < n; ++i)
        for (int co = 0; co < cout; ++co)
            for (int oy = 0; oy < os[2]; ++oy)
                for (int ox = 0; ox < os[3]; ++ox) {
                    double acc = (b.defined() && b.size() > 0) ? (double)b[co] : 0.0;
                    for (int ci = 0; ci < cin; ++ci)
                        for (int ky = 0; ky < kh; ++ky)
                            for (int kx = 0; kx < kw; ++kx) {
                                int iy = oy * stride - padding + ky;
                                int ix = ox * stride - padding + kx;
                                if (iy < 0 || iy >= h || ix < 0 || ix >= wd) continue;
                                acc += (double)x[(((int64_t)i * cin + ci) * h + iy) * wd + ix] *
                                       (double)w[(((int64_t)co * cin + ci) * kh + ky) * kw + kx];
                            }
                    y[(((int64_t)i * cout + co) * os[2] + oy) * os[3] + ox] = (T)acc;
                }
    return y;
}

// ---- fully connected -------------------------------------------------------

template <class T>
Tensor<T> linear_fwd(const Tensor<T>& x, const Tensor<T>& w, const Tensor<T>& b) {
    if (x.rank() != 2 || w.rank() != 2 || x.dim(1) != w.dim(1))
        throw std::invalid_argument("linear: input " + shape_str(x.shape()) +
                                    " does not match weight " + shape_str(w.shape()));
    const int n = x.dim(0), din = x.dim(1), dout = w.dim(0);
    Tensor<T> y({n, dout});
    gemm<T>(false, true, n, dout, din, T(1), x.data(), din, w.data(), din, T(0), y.data(), dout);
    if (b.defined() && b.size() > 0) {
        if (b.rank() != 1 || b.dim(0) != dout)
            throw std::invalid_argument("linear: bias " + shape_str(b.shape()) + " must be [" +
                                        std::to_string(dout) + "]");
        for (int i = 0; i < n; ++i) {
            T* row = y.data() + (int64_t)i * dout;
            for (int j = 0; j < dout; ++j) row[j] += b[j];
        }
    }
    return y;
}

template <class T>
Tensor<T> linear_bwd_input(const Tensor<T>& dy, const Tensor<T>& w) {
    const int n = dy.dim(0), dout = dy.dim(1), din = w.dim(1);
    Tensor<T> dx({n, din});
    gemm<T>(false, false, n, din, dout, T(1), dy.data(), dout, w.data(), din, T(0), dx.data(),
            din);
    return dx;
}

template <class T>
Tensor<T> linear_bwd_weight(const Tensor<T>& dy, const Tensor<T>& x) {
    const int n = dy.dim(0), dout = dy.dim(1), din = x.dim(1);
    Tensor<T> dw({dout, din});
    gemm<T>(true, false, dout, din, n, T(1), dy.data(), dout, x.data(), din, T(0), dw.data(),
            din);
    return dw;
}

template <class T>
Tensor<T> colsum(const Tensor<T>& dy) {
    const int n = dy.dim(0), d = dy.dim(1);
    Tensor<T> out({d});
    for (int i = 0; i < n; ++i) {
        const T* row = dy.data() + (int64_t)i * d;
        for (int j = 0; j < d; ++j) out[j] += row[j];
    }
    return out;
}

// ---- normalization ---------------------------------------------------------

template <class T>
GroupNormResult<T> group_norm_fwd(const Tensor<T>& x, const Tensor<T>& gamma,
                                  const Tensor<T>& beta, int groups, T eps) {
    require_nchw(x.shape(), "group_norm input");
    const int n = x.dim(0), c = x.dim(1), h = x.dim(2), w = x.dim(3);
    if (groups < 1 || c % groups != 0)
        throw std::invalid_argument("group_norm: channels " + std::to_string(c) +
                                    " not divisible by groups " + std::to_string(groups));
    if (gamma.size() != c || beta.size() != c)
        throw std::invalid_argument("group_norm: affine parameters must have length " +
                                    std::to_string(c));
    const int gs = c / groups;
    const int64_t hw = (int64_t)h * w;
    const int64_t gelems = gs * hw;

    GroupNormResult<T> r{Tensor<T>(x.shape()), Tensor<T>({n * groups}), Tensor<T>({n * groups})};
#pragma omp parallel for schedule(static)
    for (int p = 0; p < n * groups; ++p) {
        const int i = p / groups, g = p % groups;
        const T* src = x.data() + ((int64_t)i * c + (int64_t)g * gs) * hw;
        double s = 0, s2 = 0;
        for (int64_t j = 0; j < gelems; ++j) {
            double v = (double)src[j];
            s += v;
            s2 += v * v;
        }
        double mean = s / (double)gelems;
        double var = s2 / (double)gelems - mean * mean;
        if (var < 0) var = 0;
        double rstd = 1.0 / std::sqrt(var + (double)eps);
        r.mean[p] = (T)mean;
        r.rstd[p] = (T)rstd;
        T* dst = r.y.data() + ((int64_t)i * c + (int64_t)g * gs) * hw;
        for (int cc = 0; cc < gs; ++cc) {
            const T ga = gamma[g * gs + cc], be = beta[g * gs + cc];
            const T* sp = src + (int64_t)cc * hw;
            T* dp = dst + (int64_t)cc * hw;
            for (int64_t j = 0; j < hw; ++j)
                dp[j] = (T)(((double)sp[j] - mean) * rstd) * ga + be;
        }
    }
    return r;
}

template <class T>
void group_norm_bwd(const Tensor<T>& dy, const Tensor<T>& x, const Tensor<T>& gamma,
                    const Tensor<T>& mean, const Tensor<T>& rstd, int groups, Tensor<T>& dx,
                    Tensor<T>& dgamma, Tensor<T>& dbeta) {
    const int n = x.dim(0), c = x.dim(1), h = x.dim(2), w = x.dim(3);
    const int gs = c / groups;
    const int64_t hw = (int64_t)h * w;
    const int64_t gelems = gs * hw;
    dx = Tensor<T>(x.shape());
    dgamma = Tensor<T>({c});
    dbeta = Tensor<T>({c});

#pragma omp parallel for schedule(static)
    for (int p = 0; p < n * groups; ++p) {
        const int i = p / groups, g = p % groups;
        const int64_t base = ((int64_t)i * c + (int64_t)g * gs) * hw;
        const double mu = (double)mean[p], r = (double)rstd[p];
        // mean(dxhat) and mean(dxhat * xhat) over the group
        double m1 = 0, m2 = 0;
        for (int cc = 0; cc < gs; ++cc) {
            const double ga = (double)gamma[g * gs + cc];
            const T* dyp = dy.data() + base + (int64_t)cc * hw;
            const T* xp = x.data() + base + (int64_t)cc * hw;
            for (int64_t j = 0; j < hw; ++j) {
                double dxh = (double)dyp[j] * ga;
                double xh = ((double)xp[j] - mu) * r;
                m1 += dxh;
                m2 += dxh * xh;
            }
        }
        m1 /= (double)gelems;
        m2 /= (double)gelems;
        for (int cc = 0; cc < gs; ++cc) {
            const double ga = (double)gamma[g * gs + cc];
            const T* dyp = dy.data() + base + (int64_t)cc * hw;
            const T* xp = x.data() + base + (int64_t)cc * hw;
            T* dxp = dx.data() + base + (int64_t)cc * hw;
            for (int64_t j = 0; j < hw; ++j) {
                double xh = ((double)xp[j] - mu) * r;
                double dxh = (double)dyp[j] * ga;
                dxp[j] = (T)(r * (dxh - m1 - xh * m2));
            }
        }
    }

    // affine grads, fixed accumulation order
    for (int i = 0; i < n; ++i)
        for (int cc = 0; cc < c; ++cc) {
            const int p = i * groups + cc / gs;
            const double mu = (double)mean[p], r = (double)rstd[p];
            const T* dyp = dy.data() + ((int64_t)i * c + cc) * hw;
            const T* xp = x.data() + ((int64_t)i * c + cc) * hw;
            double sg = 0, sb = 0;
            for (int64_t j = 0; j < hw; ++j) {
                sg += (double)dyp[j] * (((double)xp[j] - mu) * r);
                sb += (double)dyp[j];
            }
            dgamma[cc] += (T)sg;
            dbeta[cc] += (T)sb;
        }
}

template <class T>
Tensor<T> silu_fwd(const Tensor<T>& x) {
    Tensor<T> y(x.shape());
    const T* xp = x.data();
    T* yp = y.data();
    const int64_t nn = x.size();
#pragma omp parallel for schedule(static)
    for (int64_t i = 0; i < nn; ++i) {
        double s = 1.0 / (1.0 + std::exp(-(double)xp[i]));
        yp[i] = (T)((double)xp[i] * s);
    }
    return y;
}

template <class T>
Tensor<T> silu_bwd(const Tensor<T>& dy, const Tensor<T>& x) {
    Tensor<T> dx(x.shape());
    const T* xp = x.data();
    const T* dyp = dy.data();
    T* dxp = dx.data();
    const int64_t nn = x.size();
#pragma omp parallel for schedule(static)
    for (int64_t i = 0; i < nn; ++i) {
        double s = 1.0 / (1.0 + std::exp(-(double)xp[i]));
        dxp[i] = (T)((double)dyp[i] * s * (1.0 + (double)xp[i] * (1.0 - s)));
    }
    return dx;
}

// ---- resampling ------------------------------------------------------------

namespace {
struct LerpAxis {
    std::vector<int> i0, i1;
    std::vector<double> w1;  // weight of i1; weight of i0 is 1-w1
};

LerpAxis lerp_axis(int in, int out) {
    LerpAxis a;
    a.i0.resize(out);
    a.i1.resize(out);
    a.w1.resize(out);
    const double scale = (double)in / out;
    for (int o = 0; o < out; ++o) {
        double s = (o + 0.5) * scale - 0.5;
        int lo = (int)std::floor(s);
        double w = s - lo;
        int hi = lo + 1;
        if (lo < 0) lo = 0;
        if (hi > in - 1) hi = in - 1;
        if (lo > in - 1) lo = in - 1;
        a.i0[o] = lo;
        a.i1[o] = hi;
        a.w1[o] = w;
    }
    return a;
}
}  // namespace

template <class T>
Tensor<T> bilinear_resize_fwd(const Tensor<T>& x, int oh, int ow) {
    require_nchw(x.shape(), "bilinear_resize input");
    if (oh < 1 || ow < 1) throw std::invalid_argument("bilinear_resize: target must be >= 1");
    const int n = x.dim(0), c = x.dim(1), h = x.dim(2), w = x.dim(3);
    if (oh == h && ow == w) return x;
    LerpAxis ay = lerp_axis(h, oh), ax = lerp_axis(w, ow);
    Tensor<T> y({n, c, oh, ow});
#pragma omp parallel for schedule(static)
    for (int p = 0; p < n * c; ++p) {
        const T* src = x.data() + (int64_t)p * h * w;
        T* dst = y.data() + (int64_t)p * oh * ow;
        for (int oy = 0; oy < oh; ++oy) {
            const T* r0 = src + (int64_t)ay.i0[oy] * w;
            const T* r1 = src + (int64_t)ay.i1[oy] * w;
            const double wy = ay.w1[oy];
            T* drow = dst + (int64_t)oy * ow;
            for (int ox = 0; ox < ow; ++ox) {
                const double wx = ax.w1[ox];
                double v0 = (1 - wx) * (double)r0[ax.i0[ox]] + wx * (double)r0[ax.i1[ox]];
                double v1 = (1 - wx) * (double)r1[ax.i0[ox]] + wx * (double)r1[ax.i1[ox]];
                drow[ox] = (T)((1 - wy) * v0 + wy * v1);
            }
        }
    }
    return y;
}

template <class T>
Tensor<T> bilinear_resize_bwd(const Tensor<T>& dy, const Shape& x_shape, int oh, int ow) {
    const int n = x_shape[0], c = x_shape[1], h = x_shape[2], w = x_shape[3];
    if (oh == h && ow == w) return dy;
    LerpAxis ay = lerp_axis(h, oh), ax = lerp_axis(w, ow);
    Tensor<T> dx(x_shape);
#pragma omp parallel for schedule(static)
    for (int p = 0; p < n * c; ++p) {
        const T* src = dy.data() + (int64_t)p * oh * ow;
        T* dst = dx.data() + (int64_t)p * h * w;
        for (int oy = 0; oy < oh; ++oy) {
            const double wy = ay.w1[oy];
            T* r0 = dst + (int64_t)ay.i0[oy] * w;
            T* r1 = dst + (int64_t)ay.i1[oy] * w;
            const T* srow = src + (int64_t)oy * ow;
            for (int ox = 0; ox < ow; ++ox) {
                const double wx = ax.w1[ox];
                const double g = (double)srow[ox];
                r0[ax.i0[ox]] += (T)((1 - wy) * (1 - wx) * g);
                r0[ax.i1[ox]] += (T)((1 - wy) * wx * g);
                r1[ax.i0[ox]] += (T)(wy * (1 - wx) * g);
                r1[ax.i1[ox]] += (T)(wy * wx * g);
            }
        }
    }
    return dx;
}

template <class T>
Tensor<T> bilinear_up_fwd(const Tensor<T>& x, int factor) {
    require_nchw(x.shape(), "bilinear_upsample input");
    if (factor < 1) throw std::invalid_argument("bilinear_upsample: factor must be >= 1");
    return bilinear_resize_fwd(x, x.dim(2) * factor, x.dim(3) * factor);
}

template <class T>
Tensor<T> bilinear_up_bwd(const Tensor<T>& dy, const Shape& x_shape, int factor) {
    return bilinear_resize_bwd(dy, x_shape, x_shape[2] * factor, x_shape[3] * factor);
}

template <class T>
Tensor<T> avg_pool_fwd(const Tensor<T>& x, int factor) {
    require_nchw(x.shape(), "avg_pool input");
    if (factor < 1) throw std::invalid_argument("avg_pool: factor must be >= 1");
    if (factor == 1) return x;
    const int n = x.dim(0), c = x.dim(1), h = x.dim(2), w = x.dim(3);
    if (h % factor != 0 || w % factor != 0)
        throw std::invalid_argument("avg_pool: extents " + shape_str(x.shape()) +
                                    " not divisible by factor " + std::to_string(factor));
    const int oh = h / factor, ow = w / factor;
    const double inv = 1.0 / (factor * factor);
    Tensor<T> y({n, c, oh, ow});
#pragma omp parallel for schedule(static)
    for (int p = 0; p < n * c; ++p) {
        const T* src = x.data() + (int64_t)p * h * w;
        T* dst = y.data() + (int64_t)p * oh * ow;
        for (int oy = 0; oy < oh; ++oy)
            for (int ox = 0; ox < ow; ++ox) {
                double acc = 0;
                for (int ky = 0; ky < factor; ++ky) {
                    const T* row = src + (int64_t)(oy * factor + ky) * w + ox * factor;
                    for (int kx = 0; kx < factor; ++kx) acc += (double)row[kx];
                }
                dst[(int64_t)oy * ow + ox] = (T)(acc * inv);
            }
    }
    return y;
}

template <class T>
Tensor<T> avg_pool_bwd(const Tensor<T>& dy, const Shape& x_shape, int factor) {
    if (factor == 1) return dy;
    const int n = x_shape[0], c = x_shape[1], h = x_shape[2], w = x_shape[3];
    const int oh = h / factor, ow = w / factor;
    const double inv = 1.0 / (factor * factor);
    Tensor<T> dx(x_shape);
#pragma omp parallel for schedule(static)
    for (int p = 0; p < n * c; ++p) {
        const T* src = dy.data() + (int64_t)p * oh * ow;
        T* dst = dx.data() + (int64_t)p * h * w;
        for (int oy = 0; oy < oh; ++oy)
            for (int ox = 0; ox < ow; ++ox) {
                const T g = (T)((double)src[(int64_t)oy * ow + ox] * inv);
                for (int ky = 0; ky < factor; ++ky) {
                    T* row = dst + (int64_t)(oy * factor + ky) * w + ox * factor;
                    for (int kx = 0; kx < factor; ++kx) row[kx] = g;
                }
            }
    }
    return dx;
}

template <class T>
Tensor<T> nearest_down_fwd(const Tensor<T>& x, int factor) {
    require_nchw(x.shape(), "nearest_down input");
    if (factor < 1) throw std::invalid_argument("nearest_down: factor must be >= 1");
    if (factor == 1) return x;
    const int n = x.dim(0), c = x.dim(1), h = x.dim(2), w = x.dim(3);
    if (h % factor != 0 || w % factor != 0)
        throw std::invalid_argument("nearest_down: extents " + shape_str(x.shape()) +
                                    " not divisible by factor " + std::to_string(factor));
    const int oh = h / factor, ow = w / factor;
    Tensor<T> y({n, c, oh, ow});
#pragma omp parallel for schedule(static)
    for (int p = 0; p < n * c; ++p) {
        const T* src = x.data() + (int64_t)p * h * w;
        T* dst = y.data() + (int64_t)p * oh * ow;
        for (int oy = 0; oy < oh; ++oy)
            for (int ox = 0; ox < ow; ++ox)
                dst[(int64_t)oy * ow + ox] = src[(int64_t)(oy * factor) * w + ox * factor];
    }
    return y;
}

template <class T>
Tensor<T> nearest_down_bwd(const Tensor<T>& dy, const Shape& x_shape, int factor) {
    if (factor == 1) return dy;
    const int n = x_shape[0], c = x_shape[1], h = x_shape[2], w = x_shape[3];
    const int oh = h / factor, ow = w / factor;
    Tensor<T> dx(x_shape);
#pragma omp parallel for schedule(static)
    for (int p = 0; p < n * c; ++p) {
        const T* src = dy.data() + (int64_t)p * oh * ow;
        T* dst = dx.data() + (int64_t)p * h * w;
        for (int oy = 0; oy < oh; ++oy)
            for (int ox = 0; ox < ow; ++ox)
                dst[(int64_t)(oy * factor) * w + ox * factor] = src[(int64_t)oy * ow + ox];
    }
    return dx;
}

template <class T>
Tensor<T> area_resize(const Tensor<T>& x, int out_h, int out_w) {
    require_nchw(x.shape(), "area_resize input");
    const int n = x.dim(0), c = x.dim(1), h = x.dim(2), w = x.dim(3);
    if (out_h < 1 || out_w < 1) throw std::invalid_argument("area_resize: bad output extents");
    if (out_h == h && out_w == w) return x;

    // per-axis overlap spans
    auto spans = [](int in, int out) {
        std::vector<std::vector<std::pair<int, double>>> sp(out);
        const double scale = (double)in / out;
        for (int o = 0; o < out; ++o) {
            double lo = o * scale, hi = (o + 1) * scale;
            for (int i = (int)std::floor(lo); i < (int)std::ceil(hi); ++i) {
                double ov = std::min<double>(hi, i + 1) - std::max<double>(lo, i);
                if (ov > 1e-12) sp[o].push_back({std::min(i, in - 1), ov / scale});
            }
        }
        return sp;
    };
    auto sy = spans(h, out_h), sx = spans(w, out_w);
    Tensor<T> y({n, c, out_h, out_w});
#pragma omp parallel for schedule(static)
    for (int p = 0; p < n * c; ++p) {
        const T* src = x.data() + (int64_t)p * h * w;
        T* dst = y.data() + (int64_t)p * out_h * out_w;
        for (int oy = 0; oy < out_h; ++oy)
            for (int ox = 0; ox < out_w; ++ox) {
                double acc = 0;
                for (auto& [iy, wy] : sy[oy])
                    for (auto& [ix, wx] : sx[ox]) acc += wy * wx * (double)src[(int64_t)iy * w + ix];
                dst[(int64_t)oy * out_w + ox] = (T)acc;
            }
    }
    return y;
}

// ---- structural ------------------------------------------------------------

template <class T>
Tensor<T> concat_channels(const Tensor<T>& a, const Tensor<T>& b) {
    require_nchw(a.shape(), "concat input");
    require_nchw(b.shape(), "concat input");
    if (a.dim(0) != b.dim(0) || a.dim(2) != b.dim(2) || a.dim(3) != b.dim(3))
        throw std::invalid_argument("concat_channels: incompatible shapes " +
                                    shape_str(a.shape()) + " and " + shape_str(b.shape()));
    const int n = a.dim(0), ca = a.dim(1), cb = b.dim(1);
    const int64_t hw = (int64_t)a.dim(2) * a.dim(3);
    Tensor<T> y({n, ca + cb, a.dim(2), a.dim(3)});
    for (int i = 0; i < n; ++i) {
        std::memcpy(y.data() + (int64_t)i * (ca + cb) * hw, a.data() + (int64_t)i * ca * hw,
                    sizeof(T) * ca * hw);
        std::memcpy(y.data() + ((int64_t)i * (ca + cb) + ca) * hw, b.data() + (int64_t)i * cb * hw,
                    sizeof(T) * cb * hw);
    }
    return y;
}

template <class T>
Tensor<T> slice_channels(const Tensor<T>& x, int c0, int c1) {
    require_nchw(x.shape(), "slice input");
    const int n = x.dim(0), c = x.dim(1);
    if (c0 < 0 || c1 > c || c0 >= c1)
        throw std::invalid_argument("slice_channels: bad range [" + std::to_string(c0) + ", " +
                                    std::to_string(c1) + ") for " + shape_str(x.shape()));
    const int64_t hw = (int64_t)x.dim(2) * x.dim(3);
    Tensor<T> y({n, c1 - c0, x.dim(2), x.dim(3)});
    for (int i = 0; i < n; ++i)
        std::memcpy(y.data() + (int64_t)i * (c1 - c0) * hw,
                    x.data() + ((int64_t)i * c + c0) * hw, sizeof(T) * (c1 - c0) * hw);
    return y;
}

template <class T>
void add_into_channels(Tensor<T>& dst, const Tensor<T>& src, int c0) {
    const int n = dst.dim(0), c = dst.dim(1), cs = src.dim(1);
    const int64_t hw = (int64_t)dst.dim(2) * dst.dim(3);
    for (int i = 0; i < n; ++i) {
        T* d = dst.data() + ((int64_t)i * c + c0) * hw;
        const T* s = src.data() + (int64_t)i * cs * hw;
        for (int64_t j = 0; j < cs * hw; ++j) d[j] += s[j];
    }
}

template <class T>
Tensor<T> film_fwd(const Tensor<T>& x, const Tensor<T>& scale, const Tensor<T>& shift) {
    require_nchw(x.shape(), "film input");
    const int n = x.dim(0), c = x.dim(1);
    if (scale.rank() != 2 || scale.dim(0) != n || scale.dim(1) != c || !same_shape(scale.shape(), shift.shape()))
        throw std::invalid_argument("film: conditioning " + shape_str(scale.shape()) +
                                    " must be [N,C] for input " + shape_str(x.shape()));
    const int64_t hw = (int64_t)x.dim(2) * x.dim(3);
    Tensor<T> y(x.shape());
#pragma omp parallel for schedule(static)
    for (int p = 0; p < n * c; ++p) {
        const T s = (T)1 + scale[p], b = shift[p];
        const T* src = x.data() + (int64_t)p * hw;
        T* dst = y.data() + (int64_t)p * hw;
        for (int64_t j = 0; j < hw; ++j) dst[j] = src[j] * s + b;
    }
    return y;
}

template <class T>
void film_bwd(const Tensor<T>& dy, const Tensor<T>& x, const Tensor<T>& scale, Tensor<T>& dx,
              Tensor<T>& dscale, Tensor<T>& dshift) {
    const int n = x.dim(0), c = x.dim(1);
    const int64_t hw = (int64_t)x.dim(2) * x.dim(3);
    dx = Tensor<T>(x.shape());
    dscale = Tensor<T>({n, c});
    dshift = Tensor<T>({n, c});
#pragma omp parallel for schedule(static)
    for (int p = 0; p < n * c; ++p) {
        const T s = (T)1 + scale[p];
        const T* dyp = dy.data() + (int64_t)p * hw;
        const T* xp = x.data() + (int64_t)p * hw;
        T* dxp = dx.data() + (int64_t)p * hw;
        double ds = 0, db = 0;
        for (int64_t j = 0; j < hw; ++j) {
            dxp[j] = dyp[j] * s;
            ds += (double)dyp[j] * (double)xp[j];
            db += (double)dyp[j];
        }
        dscale[p] = (T)ds;
        dshift[p] = (T)db;
    }
}

// ---- elementwise -----------------------------------------------------------

namespace {
template <class T>
void require_same(const Tensor<T>& a, const Tensor<T>& b, const char* what) {
    if (!same_shape(a.shape(), b.shape()))
        throw std::invalid_argument(std::string(what) + ": shape mismatch " +
                                    shape_str(a.shape()) + " vs " + shape_str(b.shape()));
}
}  // namespace

template <class T>
Tensor<T> add(const Tensor<T>& a, const Tensor<T>& b) {
    require_same(a, b, "add");
    Tensor<T> y(a.shape());
    const int64_t nn = a.size();
    const T* ap = a.data();
    const T* bp = b.data();
    T* yp = y.data();
#pragma omp parallel for schedule(static)
    for (int64_t i = 0; i < nn; ++i) yp[i] = ap[i] + bp[i];
    return y;
}

template <class T>
Tensor<T> sub(const Tensor<T>& a, const Tensor<T>& b) {
    require_same(a, b, "sub");
    Tensor<T> y(a.shape());
    const int64_t nn = a.size();
    const T* ap = a.data();
    const T* bp = b.data();
    T* yp = y.data();
#pragma omp parallel for schedule(static)
    for (int64_t i = 0; i < nn; ++i) yp[i] = ap[i] - bp[i];
    return y;
}

template <class T>
Tensor<T> mul(const Tensor<T>& a, const Tensor<T>& b) {
    require_same(a, b, "mul");
    Tensor<T> y(a.shape());
    const int64_t nn = a.size();
    const T* ap = a.data();
    const T* bp = b.data();
    T* yp = y.data();
#pragma omp parallel for schedule(static)
    for (int64_t i = 0; i < nn; ++i) yp[i] = ap[i] * bp[i];
    return y;
}

template <class T>
Tensor<T> scale(const Tensor<T>& a, T c) {
    Tensor<T> y(a.shape());
    const int64_t nn = a.size();
    const T* ap = a.data();
    T* yp = y.data();
#pragma omp parallel for schedule(static)
    for (int64_t i = 0; i < nn; ++i) yp[i] = ap[i] * c;
    return y;
}

template <class T>
void axpy(Tensor<T>& y, T alpha, const Tensor<T>& x) {
    require_same(y, x, "axpy");
    T* yp = y.data();
    const T* xp = x.data();
    const int64_t nn = y.size();
    for (int64_t i = 0; i < nn; ++i) yp[i] += alpha * xp[i];
}

template <class T>
Tensor<T> mean_square(const Tensor<T>& x) {
    double acc = 0;
    const T* xp = x.data();
    for (int64_t i = 0; i < x.size(); ++i) acc += (double)xp[i] * (double)xp[i];
    return Tensor<T>::scalar((T)(acc / (double)x.size()));
}

// ---- embeddings ------------------------------------------------------------

template <class T>
Tensor<T> embedding_fwd(const Tensor<T>& table, const std::vector<int>& ids) {
    const int v = table.dim(0), d = table.dim(1);
    Tensor<T> y({(int)ids.size(), d});
    for (size_t i = 0; i < ids.size(); ++i) {
        if (ids[i] < 0 || ids[i] >= v)
            throw std::invalid_argument("embedding: id " + std::to_string(ids[i]) +
                                        " out of range [0, " + std::to_string(v) + ")");
        std::memcpy(y.data() + i * d, table.data() + (int64_t)ids[i] * d, sizeof(T) * d);
    }
    return y;
}

template <class T>
Tensor<T> embedding_bwd(const Tensor<T>& dy, const Shape& table_shape,
                        const std::vector<int>& ids) {
    Tensor<T> dt(table_shape);
    const int d = table_shape[1];
    for (size_t i = 0; i < ids.size(); ++i) {
        T* dst = dt.data() + (int64_t)ids[i] * d;
        const T* src = dy.data() + i * d;
        for (int j = 0; j < d; ++j) dst[j] += src[j];
    }
    return dt;
}

template <class T>
Tensor<T> timestep_embedding(const std::vector<int>& t, int dim) {
    if (dim < 2 || dim % 2 != 0)
        throw std::invalid_argument("timestep_embedding: dim must be even and >= 2");
    const int half = dim / 2;
    const double log_base = std::log(10000.0) / half;
    Tensor<T> y({(int)t.size(), dim});
    for (size_t i = 0; i < t.size(); ++i) {
        T* row = y.data() + i * dim;
        for (int j = 0; j < half; ++j) {
            double angle = (double)t[i] * std::exp(-log_base * j);
            row[j] = (T)std::sin(angle);
            row[half + j] = (T)std::cos(angle);
        }
    }
    return y;
}

// ---- explicit instantiations -----------------------------------------------

#define CASCADE_INSTANTIATE(T)                                                                  \
    template void gemm<T>(bool, bool, int, int, int, T, const T*, int, const T*, int, T, T*,    \
                          int);                                                                 \
    template Tensor<T> matmul<T>(const Tensor<T>&, const Tensor<T>&);                           \
    template Shape conv2d_out_shape<T>(const Shape&, const Shape&, int, int);                   \
    template Tensor<T> conv2d_fwd<T>(const Tensor<T>&, const Tensor<T>&, const Tensor<T>&, int, \
                                     int);                                                      \
    template Tensor<T> conv2d_bwd_input<T>(const Tensor<T>&, const Tensor<T>&, const Shape&,    \
                                           int, int);                                          \
    template Tensor<T> conv2d_bwd_weight<T>(const Tensor<T>&, const Tensor<T>&, const Shape&,   \
                                            int, int);                                         \
    template Tensor<T> conv2d_bwd_bias<T>(const Tensor<T>&);                                    \
    template Tensor<T> conv2d_naive<T>(const Tensor<T>&, const Tensor<T>&, const Tensor<T>&,    \
                                       int, int);                                              \
    template Tensor<T> linear_fwd<T>(const Tensor<T>&, const Tensor<T>&, const Tensor<T>&);     \
    template Tensor<T> linear_bwd_input<T>(const Tensor<T>&, const Tensor<T>&);                 \
    template Tensor<T> linear_bwd_weight<T>(const Tensor<T>&, const Tensor<T>&);                \
    template Tensor<T> colsum<T>(const Tensor<T>&);                                             \
    template GroupNormResult<T> group_norm_fwd<T>(const Tensor<T>&, const Tensor<T>&,           \
                                                  const Tensor<T>&, int, T);                    \
    template void group_norm_bwd<T>(const Tensor<T>&, const Tensor<T>&, const Tensor<T>&,       \
                                    const Tensor<T>&, const Tensor<T>&, int, Tensor<T>&,        \
                                    Tensor<T>&, Tensor<T>&);                                    \
    template Tensor<T> silu_fwd<T>(const Tensor<T>&);                                           \
    template Tensor<T> silu_bwd<T>(const Tensor<T>&, const Tensor<T>&);                         \
    template Tensor<T> bilinear_resize_fwd<T>(const Tensor<T>&, int, int);                      \
    template Tensor<T> bilinear_resize_bwd<T>(const Tensor<T>&, const Shape&, int, int);        \
    template Tensor<T> bilinear_up_fwd<T>(const Tensor<T>&, int);                               \
    template Tensor<T> bilinear_up_bwd<T>(const Tensor<T>&, const Shape&, int);                 \
    template Tensor<T> avg_pool_fwd<T>(const Tensor<T>&, int);                                  \
    template Tensor<T> avg_pool_bwd<T>(const Tensor<T>&, const Shape&, int);                    \
    template Tensor<T> nearest_down_fwd<T>(const Tensor<T>&, int);                              \
    template Tensor<T> nearest_down_bwd<T>(const Tensor<T>&, const Shape&, int);                \
    template Tensor<T> area_resize<T>(const Tensor<T>&, int, int);                              \
    template Tensor<T> concat_channels<T>(const Tensor<T>&, const Tensor<T>&);                  \
    template Tensor<T> slice_channels<T>(const Tensor<T>&, int, int);                           \
    template void add_into_channels<T>(Tensor<T>&, const Tensor<T>&, int);                      \
    template Tensor<T> film_fwd<T>(const Tensor<T>&, const Tensor<T>&, const Tensor<T>&);       \
    template void film_bwd<T>(const Tensor<T>&, const Tensor<T>&, const Tensor<T>&,             \
                              Tensor<T>&, Tensor<T>&, Tensor<T>&);                              \
    template Tensor<T> add<T>(const Tensor<T>&, const Tensor<T>&);                              \
    template Tensor<T> sub<T>(const Tensor<T>&, const Tensor<T>&);                              \
    template Tensor<T> mul<T>(const Tensor<T>&, const Tensor<T>&);                              \
    template Tensor<T> scale<T>(const Tensor<T>&, T);                                           \
    template void axpy<T>(Tensor<T>&, T, const Tensor<T>&);                                     \
    template Tensor<T> mean_square<T>(const Tensor<T>&);                                        \
    template Tensor<T> embedding_fwd<T>(const Tensor<T>&, const std::vector<int>&);             \
    template Tensor<T> embedding_bwd<T>(const Tensor<T>&, const Shape&,                         \
                                        const std::vector<int>&);                               \
    template Tensor<T> timestep_embedding<T>(const std::vector<int>&, int);

CASCADE_INSTANTIATE(float)
CASCADE_INSTANTIATE(double)

#undef CASCADE_INSTANTIATE

}  // namespace cascade::kernels
