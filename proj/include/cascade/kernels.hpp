#pragma once

#include "cascade/tensor.hpp"

namespace cascade::kernels {

// ---- dense linear algebra -------------------------------------------------

// Row-major C[M,N] = alpha * op(A) * op(B) + beta * C. Work is split into
// fixed column chunks dispatched across worker threads, with a sequential
// BLAS call per chunk, so results are bit-identical for any thread count.
template <class T>
void gemm(bool trans_a, bool trans_b, int m, int n, int k, T alpha, const T* a, int lda,
          const T* b, int ldb, T beta, T* c, int ldc);

template <class T>
Tensor<T> matmul(const Tensor<T>& a, const Tensor<T>& b);

// ---- convolution ------------------------------------------------------

template <class T>
Shape conv2d_out_shape(const Shape& x, const Shape& w, int stride, int padding);

template <class T>
Tensor<T> conv2d_fwd(const Tensor<T>& x, const Tensor<T>& w, const Tensor<T>& b, int stride,
                     int padding);
template <class T>
Tensor<T> conv2d_bwd_input(const Tensor<T>& dy, const Tensor<T>& w, const Shape& x_shape,
                           int stride, int padding);
template <class T>
Tensor<T> conv2d_bwd_weight(const Tensor<T>& dy, const Tensor<T>& x, const Shape& w_shape,
                            int stride, int padding);
template <class T>
Tensor<T> conv2d_bwd_bias(const Tensor<T>& dy);

// Reference implementation: direct quadruple-loop cross-correlation.
// Slow; used by tests as the independent oracle for the GEMM path.
template <class T>
Tensor<T> conv2d_naive(const Tensor<T>& x, const Tensor<T>& w, const Tensor<T>& b, int stride,
                       int padding);

// ---- fully connected --------------------------------------------------

// x:[N,Din] w:[Dout,Din] b:[Dout] -> [N,Dout]
template <class T>
Tensor<T> linear_fwd(const Tensor<T>& x, const Tensor<T>& w, const Tensor<T>& b);
template <class T>
Tensor<T> linear_bwd_input(const Tensor<T>& dy, const Tensor<T>& w);
template <class T>
Tensor<T> linear_bwd_weight(const Tensor<T>& dy, const Tensor<T>& x);
template <class T>
Tensor<T> colsum(const Tensor<T>& dy);  // [N,D] -> [D]

// ---- normalization and activations ------------------------------------

template <class T>
struct GroupNormResult {
    Tensor<T> y;
    Tensor<T> mean;  // [N*G]
    Tensor<T> rstd;  // [N*G]
};

template <class T>
GroupNormResult<T> group_norm_fwd(const Tensor<T>& x, const Tensor<T>& gamma,
                                  const Tensor<T>& beta, int groups, T eps);
template <class T>
void group_norm_bwd(const Tensor<T>& dy, const Tensor<T>& x, const Tensor<T>& gamma,
                    const Tensor<T>& mean, const Tensor<T>& rstd, int groups, Tensor<T>& dx,
                    Tensor<T>& dgamma, Tensor<T>& dbeta);

template <class T>
Tensor<T> silu_fwd(const Tensor<T>& x);
template <class T>
Tensor<T> silu_bwd(const Tensor<T>& dy, const Tensor<T>& x);

// ---- resampling --------------------------------------------------------

// align-corners-false bilinear interpolation to an arbitrary extent
template <class T>
Tensor<T> bilinear_resize_fwd(const Tensor<T>& x, int oh, int ow);
template <class T>
Tensor<T> bilinear_resize_bwd(const Tensor<T>& dy, const Shape& x_shape, int oh, int ow);

// the integer-factor special case used inside the model
template <class T>
Tensor<T> bilinear_up_fwd(const Tensor<T>& x, int factor);
template <class T>
Tensor<T> bilinear_up_bwd(const Tensor<T>& dy, const Shape& x_shape, int factor);

template <class T>
Tensor<T> avg_pool_fwd(const Tensor<T>& x, int factor);
template <class T>
Tensor<T> avg_pool_bwd(const Tensor<T>& dy, const Shape& x_shape, int factor);

template <class T>
Tensor<T> nearest_down_fwd(const Tensor<T>& x, int factor);
template <class T>
Tensor<T> nearest_down_bwd(const Tensor<T>& dy, const Shape& x_shape, int factor);

// Box-filter resize to arbitrary extents (ingestion path, not differentiable).
template <class T>
Tensor<T> area_resize(const Tensor<T>& x, int out_h, int out_w);

// ---- structural ops ----------------------------------------------------

template <class T>
Tensor<T> concat_channels(const Tensor<T>& a, const Tensor<T>& b);
template <class T>
Tensor<T> slice_channels(const Tensor<T>& x, int c0, int c1);
// scatter-add a channel slice of dy back into a [N,C,H,W] gradient
template <class T>
void add_into_channels(Tensor<T>& dst, const Tensor<T>& src, int c0);

// y = x * (1 + scale) + shift with per-(n,c) scale/shift of shape [N,C]
template <class T>
Tensor<T> film_fwd(const Tensor<T>& x, const Tensor<T>& scale, const Tensor<T>& shift);
template <class T>
void film_bwd(const Tensor<T>& dy, const Tensor<T>& x, const Tensor<T>& scale, Tensor<T>& dx,
              Tensor<T>& dscale, Tensor<T>& dshift);

// ---- elementwise -------------------------------------------------------

template <class T>
Tensor<T> add(const Tensor<T>& a, const Tensor<T>& b);
template <class T>
Tensor<T> sub(const Tensor<T>& a, const Tensor<T>& b);
template <class T>
Tensor<T> mul(const Tensor<T>& a, const Tensor<T>& b);
template <class T>
Tensor<T> scale(const Tensor<T>& a, T c);
template <class T>
void axpy(Tensor<T>& y, T alpha, const Tensor<T>& x);  // y += alpha * x, in place

template <class T>
Tensor<T> mean_square(const Tensor<T>& x);  // scalar [1]

// ---- embeddings --------------------------------------------------------

template <class T>
Tensor<T> embedding_fwd(const Tensor<T>& table, const std::vector<int>& ids);
template <class T>
Tensor<T> embedding_bwd(const Tensor<T>& dy, const Shape& table_shape,
                        const std::vector<int>& ids);

// Sinusoidal timestep embedding: [N, dim] with sin in the first half,
// cos in the second, frequencies 10000^(-i/half).
template <class T>
Tensor<T> timestep_embedding(const std::vector<int>& t, int dim);

}  // namespace cascade::kernels
