#pragma once

// Forward and backward kernels for the layer set used by the backbone.
// Both the autodiff tape and the gradient-free inference path call into
// these functions, so a trained model and its grafted decomposition perform
// the same arithmetic in the same order.

#include <cmath>
#include <cstddef>
#include <limits>
#include <span>
#include <vector>

#include "graftnet/tensor.hpp"

namespace graftnet::kernels {

namespace detail {

// C[m x n] += A[m x k] * B[k x n], all row-major.
template <class T>
void gemm_nn(std::size_t m, std::size_t n, std::size_t k, const T* a,
             const T* b, T* c) {
  for (std::size_t i = 0; i < m; ++i) {
    T* crow = c + i * n;
    for (std::size_t p = 0; p < k; ++p) {
      const T av = a[i * k + p];
      if (av == T{0}) continue;
      const T* brow = b + p * n;
      for (std::size_t j = 0; j < n; ++j) crow[j] += av * brow[j];
    }
  }
}

// C[m x n] += A^T * B where A is [k x m] and B is [k x n].
template <class T>
void gemm_tn(std::size_t m, std::size_t n, std::size_t k, const T* a,
             const T* b, T* c) {
  for (std::size_t p = 0; p < k; ++p) {
    const T* arow = a + p * m;
    const T* brow = b + p * n;
    for (std::size_t i = 0; i < m; ++i) {
      const T av = arow[i];
      if (av == T{0}) continue;
      T* crow = c + i * n;
      for (std::size_t j = 0; j < n; ++j) crow[j] += av * brow[j];
    }
  }
}

template <class T>
void transpose(std::size_t rows, std::size_t cols, const T* src, T* dst) {
  for (std::size_t r = 0; r < rows; ++r)
    for (std::size_t c = 0; c < cols; ++c) dst[c * rows + r] = src[r * cols + c];
}

struct ConvGeometry {
  std::size_t channels, height, width;
  std::size_t kernel, stride, padding;
  std::size_t out_h, out_w;

  std::size_t patch() const { return channels * kernel * kernel; }
  std::size_t positions() const { return out_h * out_w; }
};

// cols is [C*K*K x OH*OW].
template <class T>
void im2col(const ConvGeometry& g, const T* x, T* cols) {
  const std::size_t positions = g.positions();
  for (std::size_t c = 0; c < g.channels; ++c) {
    for (std::size_t kh = 0; kh < g.kernel; ++kh) {
      for (std::size_t kw = 0; kw < g.kernel; ++kw) {
        T* row = cols + ((c * g.kernel + kh) * g.kernel + kw) * positions;
        for (std::size_t oh = 0; oh < g.out_h; ++oh) {
          const long ih = static_cast<long>(oh * g.stride + kh) -
                          static_cast<long>(g.padding);
          for (std::size_t ow = 0; ow < g.out_w; ++ow) {
            const long iw = static_cast<long>(ow * g.stride + kw) -
                            static_cast<long>(g.padding);
            T v{0};
            if (ih >= 0 && iw >= 0 && ih < static_cast<long>(g.height) &&
                iw < static_cast<long>(g.width)) {
              v = x[(c * g.height + ih) * g.width + iw];
            }
            row[oh * g.out_w + ow] = v;
          }
        }
      }
    }
  }
}

template <class T>
void col2im(const ConvGeometry& g, const T* cols, T* dx) {
  const std::size_t positions = g.positions();
  for (std::size_t c = 0; c < g.channels; ++c) {
    for (std::size_t kh = 0; kh < g.kernel; ++kh) {
      for (std::size_t kw = 0; kw < g.kernel; ++kw) {
        const T* row = cols + ((c * g.kernel + kh) * g.kernel + kw) * positions;
        for (std::size_t oh = 0; oh < g.out_h; ++oh) {
          const long ih = static_cast<long>(oh * g.stride + kh) -
                          static_cast<long>(g.padding);
          if (ih < 0 || ih >= static_cast<long>(g.height)) continue;
          for (std::size_t ow = 0; ow < g.out_w; ++ow) {
            const long iw = static_cast<long>(ow * g.stride + kw) -
                            static_cast<long>(g.padding);
            if (iw < 0 || iw >= static_cast<long>(g.width)) continue;
            dx[(c * g.height + ih) * g.width + iw] += row[oh * g.out_w + ow];
          }
        }
      }
    }
  }
}

template <class T>
ConvGeometry conv_geometry(const BasicTensor<T>& x, const BasicTensor<T>& w,
                           const BasicTensor<T>& b, std::size_t stride,
                           std::size_t padding) {
  if (x.rank() != 4 || w.rank() != 4 || b.rank() != 1) {
    throw Error(ErrorCode::kShapeMismatch,
                "conv2d expects x NCHW, w OIKK, b O; got x " +
                    shape_str(x.shape()) + " and w " + shape_str(w.shape()));
  }
  if (stride == 0) {
    throw Error(ErrorCode::kInvalidArgument, "conv2d stride must be positive");
  }
  if (x.dim(1) != w.dim(1) || w.dim(2) != w.dim(3) || b.dim(0) != w.dim(0)) {
    throw Error(ErrorCode::kShapeMismatch,
                "conv2d shape mismatch: x " + shape_str(x.shape()) + " vs w " +
                    shape_str(w.shape()) + " (bias " + shape_str(b.shape()) +
                    ")");
  }
  const std::size_t k = w.dim(2);
  const std::size_t ph = x.dim(2) + 2 * padding;
  const std::size_t pw = x.dim(3) + 2 * padding;
  if (k > ph || k > pw) {
    throw Error(ErrorCode::kShapeMismatch,
                "conv2d kernel " + shape_str(w.shape()) +
                    " does not fit padded input " + shape_str(x.shape()));
  }
  return ConvGeometry{x.dim(1), x.dim(2), x.dim(3), k, stride, padding,
                      (ph - k) / stride + 1, (pw - k) / stride + 1};
}

}  // namespace detail

// ---------------------------------------------------------------------------
// conv2d: cross-correlation, no kernel flip.

template <class T>
BasicTensor<T> conv2d_forward(const BasicTensor<T>& x, const BasicTensor<T>& w,
                              const BasicTensor<T>& b, std::size_t stride,
                              std::size_t padding) {
  const auto g = detail::conv_geometry(x, w, b, stride, padding);
  const std::size_t n = x.dim(0), out_c = w.dim(0);
  const std::size_t positions = g.positions();
  const std::size_t in_plane = g.channels * g.height * g.width;
  BasicTensor<T> y({n, out_c, g.out_h, g.out_w});
  std::vector<T> cols(g.patch() * positions);
  for (std::size_t s = 0; s < n; ++s) {
    detail::im2col(g, x.raw() + s * in_plane, cols.data());
    T* ys = y.raw() + s * out_c * positions;
    for (std::size_t o = 0; o < out_c; ++o)
      std::fill(ys + o * positions, ys + (o + 1) * positions, b[o]);
    detail::gemm_nn(out_c, positions, g.patch(), w.raw(), cols.data(), ys);
  }
  return y;
}

template <class T>
struct ConvGrads {
  BasicTensor<T> dx;
  BasicTensor<T> dw;
  BasicTensor<T> db;
};

/// Gradients of conv2d. dx is only computed when need_dx is set; dw/db are
/// always returned (callers discard them for frozen weights).
template <class T>
ConvGrads<T> conv2d_backward(const BasicTensor<T>& x, const BasicTensor<T>& w,
                             const BasicTensor<T>& b, std::size_t stride,
                             std::size_t padding, const BasicTensor<T>& dy,
                             bool need_dx, bool need_dw) {
  const auto g = detail::conv_geometry(x, w, b, stride, padding);
  const std::size_t n = x.dim(0), out_c = w.dim(0);
  const std::size_t positions = g.positions();
  const std::size_t patch = g.patch();
  const std::size_t in_plane = g.channels * g.height * g.width;
  ConvGrads<T> grads;
  grads.dw = BasicTensor<T>(w.shape());
  grads.db = BasicTensor<T>(b.shape());
  if (need_dx) grads.dx = BasicTensor<T>(x.shape());
  std::vector<T> cols(patch * positions);
  std::vector<T> cols_t(patch * positions);
  std::vector<T> dcols(patch * positions);
  for (std::size_t s = 0; s < n; ++s) {
    const T* dys = dy.raw() + s * out_c * positions;
    if (need_dw) {
      for (std::size_t o = 0; o < out_c; ++o) {
        T acc{0};
        for (std::size_t p = 0; p < positions; ++p) acc += dys[o * positions + p];
        grads.db[o] += acc;
      }
      detail::im2col(g, x.raw() + s * in_plane, cols.data());
      detail::transpose(patch, positions, cols.data(), cols_t.data());
      detail::gemm_nn(out_c, patch, positions, dys, cols_t.data(),
                      grads.dw.raw());
    }
    if (need_dx) {
      std::fill(dcols.begin(), dcols.end(), T{0});
      detail::gemm_tn(patch, positions, out_c, w.raw(), dys, dcols.data());
      detail::col2im(g, dcols.data(), grads.dx.raw() + s * in_plane);
    }
  }
  return grads;
}

// ---------------------------------------------------------------------------
// batch normalisation over (N, H, W) per channel.

template <class T>
struct BatchNormCache {
  BasicTensor<T> xhat;
  std::vector<T> inv_std;
};

template <class T>
void check_bn_input(const BasicTensor<T>& x, std::size_t channels) {
  if (x.rank() != 4 || x.dim(1) != channels) {
    throw Error(ErrorCode::kShapeMismatch,
                "batch_norm expects NCHW with " + std::to_string(channels) +
                    " channels, got " + shape_str(x.shape()));
  }
  require_finite(x, "batch_norm input");
}

/// Inference-mode normalisation; depends only on running statistics.
template <class T>
BasicTensor<T> batch_norm_infer(const BasicTensor<T>& x,
                                const BasicBatchNormState<T>& state) {
  const std::size_t channels = state.channels();
  check_bn_input(x, channels);
  const std::size_t n = x.dim(0), plane = x.dim(2) * x.dim(3);
  BasicTensor<T> y(x.shape());
  for (std::size_t c = 0; c < channels; ++c) {
    const T inv = T{1} / std::sqrt(state.running_var[c] + state.epsilon);
    const T scale = state.gamma.value[c] * inv;
    const T shift = state.beta.value[c] - state.running_mean[c] * scale;
    for (std::size_t s = 0; s < n; ++s) {
      const T* xs = x.raw() + (s * channels + c) * plane;
      T* ys = y.raw() + (s * channels + c) * plane;
      for (std::size_t i = 0; i < plane; ++i) ys[i] = xs[i] * scale + shift;
    }
  }
  return y;
}

/// Train-mode normalisation by batch statistics. Updates running statistics
/// unless they are frozen.
template <class T>
BasicTensor<T> batch_norm_train(const BasicTensor<T>& x,
                                BasicBatchNormState<T>& state,
                                BatchNormCache<T>& cache) {
  const std::size_t channels = state.channels();
  check_bn_input(x, channels);
  const std::size_t n = x.dim(0), plane = x.dim(2) * x.dim(3);
  const std::size_t count = n * plane;
  BasicTensor<T> y(x.shape());
  cache.xhat = BasicTensor<T>(x.shape());
  cache.inv_std.assign(channels, T{0});
  for (std::size_t c = 0; c < channels; ++c) {
    double sum = 0.0;
    for (std::size_t s = 0; s < n; ++s) {
      const T* xs = x.raw() + (s * channels + c) * plane;
      for (std::size_t i = 0; i < plane; ++i) sum += xs[i];
    }
    const double mean = sum / static_cast<double>(count);
    double sq = 0.0;
    for (std::size_t s = 0; s < n; ++s) {
      const T* xs = x.raw() + (s * channels + c) * plane;
      for (std::size_t i = 0; i < plane; ++i) {
        const double d = xs[i] - mean;
        sq += d * d;
      }
    }
    const double var = sq / static_cast<double>(count);
    const T inv = static_cast<T>(1.0 / std::sqrt(var + state.epsilon));
    cache.inv_std[c] = inv;
    const T gamma = state.gamma.value[c], beta = state.beta.value[c];
    const T mean_t = static_cast<T>(mean);
    for (std::size_t s = 0; s < n; ++s) {
      const T* xs = x.raw() + (s * channels + c) * plane;
      T* hs = cache.xhat.raw() + (s * channels + c) * plane;
      T* ys = y.raw() + (s * channels + c) * plane;
      for (std::size_t i = 0; i < plane; ++i) {
        hs[i] = (xs[i] - mean_t) * inv;
        ys[i] = gamma * hs[i] + beta;
      }
    }
    if (!state.stats_frozen) {
      const double unbiased =
          count > 1 ? sq / static_cast<double>(count - 1) : var;
      const T m = state.momentum;
      state.running_mean[c] =
          (T{1} - m) * state.running_mean[c] + m * static_cast<T>(mean);
      state.running_var[c] =
          (T{1} - m) * state.running_var[c] + m * static_cast<T>(unbiased);
    }
  }
  return y;
}

template <class T>
struct BatchNormGrads {
  BasicTensor<T> dx;
  BasicTensor<T> dgamma;
  BasicTensor<T> dbeta;
};

template <class T>
BatchNormGrads<T> batch_norm_train_backward(const BasicTensor<T>& dy,
                                            const BasicTensor<T>& gamma,
                                            const BatchNormCache<T>& cache) {
  const std::size_t channels = gamma.numel();
  const std::size_t n = dy.dim(0), plane = dy.dim(2) * dy.dim(3);
  const T count = static_cast<T>(n * plane);
  BatchNormGrads<T> g{BasicTensor<T>(dy.shape()), BasicTensor<T>({channels}),
                      BasicTensor<T>({channels})};
  for (std::size_t c = 0; c < channels; ++c) {
    T sum_dy{0}, sum_dy_xhat{0};
    for (std::size_t s = 0; s < n; ++s) {
      const T* d = dy.raw() + (s * channels + c) * plane;
      const T* h = cache.xhat.raw() + (s * channels + c) * plane;
      for (std::size_t i = 0; i < plane; ++i) {
        sum_dy += d[i];
        sum_dy_xhat += d[i] * h[i];
      }
    }
    g.dgamma[c] = sum_dy_xhat;
    g.dbeta[c] = sum_dy;
    const T k = gamma[c] * cache.inv_std[c] / count;
    for (std::size_t s = 0; s < n; ++s) {
      const T* d = dy.raw() + (s * channels + c) * plane;
      const T* h = cache.xhat.raw() + (s * channels + c) * plane;
      T* dx = g.dx.raw() + (s * channels + c) * plane;
      for (std::size_t i = 0; i < plane; ++i)
        dx[i] = k * (count * d[i] - sum_dy - h[i] * sum_dy_xhat);
    }
  }
  return g;
}

/// Backward of the inference-mode affine map (used by open blocks evaluated
/// in infer mode during gradient checks).
template <class T>
BatchNormGrads<T> batch_norm_infer_backward(
    const BasicTensor<T>& x, const BasicBatchNormState<T>& state,
    const BasicTensor<T>& dy) {
  const std::size_t channels = state.channels();
  const std::size_t n = x.dim(0), plane = x.dim(2) * x.dim(3);
  BatchNormGrads<T> g{BasicTensor<T>(x.shape()), BasicTensor<T>({channels}),
                      BasicTensor<T>({channels})};
  for (std::size_t c = 0; c < channels; ++c) {
    const T inv = T{1} / std::sqrt(state.running_var[c] + state.epsilon);
    const T scale = state.gamma.value[c] * inv;
    T dgamma{0}, dbeta{0};
    for (std::size_t s = 0; s < n; ++s) {
      const T* xs = x.raw() + (s * channels + c) * plane;
      const T* d = dy.raw() + (s * channels + c) * plane;
      T* dx = g.dx.raw() + (s * channels + c) * plane;
      for (std::size_t i = 0; i < plane; ++i) {
        dgamma += d[i] * (xs[i] - state.running_mean[c]) * inv;
        dbeta += d[i];
        dx[i] = d[i] * scale;
      }
    }
    g.dgamma[c] = dgamma;
    g.dbeta[c] = dbeta;
  }
  return g;
}

// ---------------------------------------------------------------------------

template <class T>
BasicTensor<T> relu_forward(const BasicTensor<T>& x) {
  BasicTensor<T> y(x.shape());
  for (std::size_t i = 0; i < x.numel(); ++i) y[i] = x[i] > T{0} ? x[i] : T{0};
  return y;
}

template <class T>
BasicTensor<T> relu_backward(const BasicTensor<T>& x, const BasicTensor<T>& dy) {
  BasicTensor<T> dx(x.shape());
  for (std::size_t i = 0; i < x.numel(); ++i) dx[i] = x[i] > T{0} ? dy[i] : T{0};
  return dx;
}

template <class T>
BasicTensor<T> global_avg_pool_forward(const BasicTensor<T>& x) {
  if (x.rank() != 4) {
    throw Error(ErrorCode::kShapeMismatch,
                "global_avg_pool expects NCHW, got " + shape_str(x.shape()));
  }
  const std::size_t n = x.dim(0), c = x.dim(1), plane = x.dim(2) * x.dim(3);
  BasicTensor<T> y({n, c});
  for (std::size_t i = 0; i < n * c; ++i) {
    T acc{0};
    const T* xs = x.raw() + i * plane;
    for (std::size_t j = 0; j < plane; ++j) acc += xs[j];
    y[i] = acc / static_cast<T>(plane);
  }
  return y;
}

template <class T>
BasicTensor<T> global_avg_pool_backward(const Shape& x_shape,
                                        const BasicTensor<T>& dy) {
  BasicTensor<T> dx(x_shape);
  const std::size_t plane = x_shape[2] * x_shape[3];
  const T scale = T{1} / static_cast<T>(plane);
  for (std::size_t i = 0; i < dy.numel(); ++i) {
    T* d = dx.raw() + i * plane;
    for (std::size_t j = 0; j < plane; ++j) d[j] = dy[i] * scale;
  }
  return dx;
}

// ---------------------------------------------------------------------------
// Bilinear pooling: spatial mean of f f^T, signed square root, L2 norm.

template <class T>
struct BilinearConstants {
  // Smoothing inside the signed square root keeps the map differentiable at
  // zero; the offset keeps sqrt0(0) == 0 exactly.
  static constexpr T kSqrtEps = T(1e-10);
  static constexpr T kNormFloor = T(1e-12);
};

template <class T>
T signed_sqrt(T g) {
  const T eps = BilinearConstants<T>::kSqrtEps;
  const T mag = std::sqrt(std::abs(g) + eps) - std::sqrt(eps);
  return g < T{0} ? -mag : mag;
}

template <class T>
struct BilinearCache {
  BasicTensor<T> gram;  // N x C*C
  BasicTensor<T> out;   // N x C*C
  std::vector<T> norm;  // per sample, 0 when guarded
};

template <class T>
BasicTensor<T> bilinear_pool_forward(const BasicTensor<T>& x,
                                     BilinearCache<T>* cache = nullptr) {
  if (x.rank() != 4) {
    throw Error(ErrorCode::kShapeMismatch,
                "bilinear_pool expects NCHW, got " + shape_str(x.shape()));
  }
  const std::size_t n = x.dim(0), c = x.dim(1), plane = x.dim(2) * x.dim(3);
  BasicTensor<T> gram({n, c * c});
  BasicTensor<T> out({n, c * c});
  std::vector<T> norms(n, T{0});
  std::vector<T> xt(plane * c);
  for (std::size_t s = 0; s < n; ++s) {
    const T* f = x.raw() + s * c * plane;
    T* g = gram.raw() + s * c * c;
    detail::transpose(c, plane, f, xt.data());
    detail::gemm_nn(c, c, plane, f, xt.data(), g);
    const T inv_plane = T{1} / static_cast<T>(plane);
    T* o = out.raw() + s * c * c;
    T sq{0};
    for (std::size_t i = 0; i < c * c; ++i) {
      g[i] *= inv_plane;
      o[i] = signed_sqrt(g[i]);
      sq += o[i] * o[i];
    }
    const T nrm = std::sqrt(sq);
    if (nrm > BilinearConstants<T>::kNormFloor) {
      for (std::size_t i = 0; i < c * c; ++i) o[i] /= nrm;
      norms[s] = nrm;
    } else {
      std::fill(o, o + c * c, T{0});
    }
  }
  if (cache) {
    cache->gram = gram;
    cache->out = out;
    cache->norm = norms;
  }
  return out;
}

template <class T>
BasicTensor<T> bilinear_pool_backward(const BasicTensor<T>& x,
                                      const BilinearCache<T>& cache,
                                      const BasicTensor<T>& dy) {
  const std::size_t n = x.dim(0), c = x.dim(1), plane = x.dim(2) * x.dim(3);
  BasicTensor<T> dx(x.shape());
  std::vector<T> dgram(c * c), dsym(c * c);
  const T eps = BilinearConstants<T>::kSqrtEps;
  for (std::size_t s = 0; s < n; ++s) {
    const T nrm = cache.norm[s];
    if (nrm == T{0}) continue;
    const T* o = cache.out.raw() + s * c * c;
    const T* d = dy.raw() + s * c * c;
    const T* g = cache.gram.raw() + s * c * c;
    T dot{0};
    for (std::size_t i = 0; i < c * c; ++i) dot += o[i] * d[i];
    for (std::size_t i = 0; i < c * c; ++i) {
      const T dz = (d[i] - o[i] * dot) / nrm;
      dgram[i] = dz / (T{2} * std::sqrt(std::abs(g[i]) + eps));
    }
    const T inv_plane = T{1} / static_cast<T>(plane);
    for (std::size_t i = 0; i < c; ++i)
      for (std::size_t j = 0; j < c; ++j)
        dsym[i * c + j] = (dgram[i * c + j] + dgram[j * c + i]) * inv_plane;
    detail::gemm_nn(c, plane, c, dsym.data(), x.raw() + s * c * plane,
                    dx.raw() + s * c * plane);
  }
  return dx;
}

// ---------------------------------------------------------------------------
// dense: y = v W^T + b, W is [K x D].

template <class T>
BasicTensor<T> dense_forward(const BasicTensor<T>& v, const BasicTensor<T>& w,
                             const BasicTensor<T>& b) {
  if (v.rank() != 2 || w.rank() != 2 || b.rank() != 1 || v.dim(1) != w.dim(1) ||
      b.dim(0) != w.dim(0)) {
    throw Error(ErrorCode::kShapeMismatch,
                "dense shape mismatch: v " + shape_str(v.shape()) + " vs W " +
                    shape_str(w.shape()) + " (bias " + shape_str(b.shape()) +
                    ")");
  }
  const std::size_t n = v.dim(0), k = w.dim(0), d = w.dim(1);
  BasicTensor<T> y({n, k});
  for (std::size_t s = 0; s < n; ++s)
    for (std::size_t j = 0; j < k; ++j) y[s * k + j] = b[j];
  std::vector<T> wt(d * k);
  detail::transpose(k, d, w.raw(), wt.data());
  detail::gemm_nn(n, k, d, v.raw(), wt.data(), y.raw());
  return y;
}

template <class T>
struct DenseGrads {
  BasicTensor<T> dv;
  BasicTensor<T> dw;
  BasicTensor<T> db;
};

template <class T>
DenseGrads<T> dense_backward(const BasicTensor<T>& v, const BasicTensor<T>& w,
                             const BasicTensor<T>& dy) {
  const std::size_t n = v.dim(0), k = w.dim(0), d = w.dim(1);
  DenseGrads<T> g{BasicTensor<T>(v.shape()), BasicTensor<T>(w.shape()),
                  BasicTensor<T>({k})};
  detail::gemm_tn(k, d, n, dy.raw(), v.raw(), g.dw.raw());
  detail::gemm_nn(n, d, k, dy.raw(), w.raw(), g.dv.raw());
  for (std::size_t s = 0; s < n; ++s)
    for (std::size_t j = 0; j < k; ++j) g.db[j] += dy[s * k + j];
  return g;
}

// ---------------------------------------------------------------------------

template <class T>
BasicTensor<T> softmax(const BasicTensor<T>& logits) {
  const std::size_t n = logits.dim(0), k = logits.dim(1);
  BasicTensor<T> p(logits.shape());
  for (std::size_t s = 0; s < n; ++s) {
    const T* l = logits.raw() + s * k;
    T* ps = p.raw() + s * k;
    T mx = l[0];
    for (std::size_t j = 1; j < k; ++j) mx = std::max(mx, l[j]);
    T z{0};
    for (std::size_t j = 0; j < k; ++j) {
      ps[j] = std::exp(l[j] - mx);
      z += ps[j];
    }
    for (std::size_t j = 0; j < k; ++j) ps[j] /= z;
  }
  return p;
}

template <class T>
struct CrossEntropyResult {
  T loss;
  BasicTensor<T> probs;
  BasicTensor<T> dlogits;  // already divided by N
};

template <class T>
CrossEntropyResult<T> softmax_cross_entropy(const BasicTensor<T>& logits,
                                            std::span<const int> labels) {
  if (logits.rank() != 2 || logits.dim(0) != labels.size()) {
    throw Error(ErrorCode::kShapeMismatch,
                "softmax_cross_entropy: logits " + shape_str(logits.shape()) +
                    " vs " + std::to_string(labels.size()) + " labels");
  }
  const std::size_t n = logits.dim(0), k = logits.dim(1);
  for (int label : labels) {
    if (label < 0 || static_cast<std::size_t>(label) >= k) {
      throw Error(ErrorCode::kOutOfRange,
                  "label " + std::to_string(label) + " outside [0, " +
                      std::to_string(k) + ")");
    }
  }
  CrossEntropyResult<T> r{T{0}, BasicTensor<T>(logits.shape()),
                          BasicTensor<T>(logits.shape())};
  const T inv_n = T{1} / static_cast<T>(n);
  double total = 0.0;
  for (std::size_t s = 0; s < n; ++s) {
    const T* l = logits.raw() + s * k;
    T mx = l[0];
    for (std::size_t j = 1; j < k; ++j) mx = std::max(mx, l[j]);
    T z{0};
    for (std::size_t j = 0; j < k; ++j) z += std::exp(l[j] - mx);
    const T log_z = std::log(z) + mx;
    const auto label = static_cast<std::size_t>(labels[s]);
    total += static_cast<double>(log_z - l[label]);
    for (std::size_t j = 0; j < k; ++j) {
      const T p = std::exp(l[j] - log_z);
      r.probs[s * k + j] = p;
      r.dlogits[s * k + j] = (p - (j == label ? T{1} : T{0})) * inv_n;
    }
  }
  r.loss = static_cast<T>(total / static_cast<double>(n));
  return r;
}

}  // namespace graftnet::kernels
