#pragma once

#include <algorithm>
#include <cmath>
#include <cstdint>

#ifdef _OPENMP
#include <omp.h>
#endif

#include "wassalign/common.hpp"

// Hot inner loops, in two flavors: a serial reference and an OpenMP
// version. The OpenMP loops only split *independent output elements*
// across threads; every element is still computed by the same serial
// inner loop, so serial and parallel results are bit-identical for any
// thread count. Whole-tensor reductions stay serial for the same reason.
namespace wassalign::kernels {

int max_threads();
void set_max_threads(int n);
bool openmp_compiled();

// Reads WASSALIGN_THREADS if set; otherwise `fallback`.
int threads_from_env(int fallback);

inline bool use_parallel() { return max_threads() > 1; }

// ---------------------------------------------------------------------------
// Serial reference kernels
// ---------------------------------------------------------------------------
namespace serial {

// C[M,N] = A[M,K] * B[K,N]
template <class T>
void matmul_nn(const T* a, const T* b, T* c, int64_t m, int64_t k, int64_t n) {
  for (int64_t i = 0; i < m; ++i) {
    for (int64_t j = 0; j < n; ++j) {
      T acc = 0;
      for (int64_t p = 0; p < k; ++p) acc += a[i * k + p] * b[p * n + j];
      c[i * n + j] = acc;
    }
  }
}

// C[M,K] = A[M,N] * B[K,N]^T
template <class T>
void matmul_nt(const T* a, const T* b, T* c, int64_t m, int64_t n, int64_t k) {
  for (int64_t i = 0; i < m; ++i) {
    for (int64_t j = 0; j < k; ++j) {
      T acc = 0;
      for (int64_t p = 0; p < n; ++p) acc += a[i * n + p] * b[j * n + p];
      c[i * k + j] = acc;
    }
  }
}

// C[K,N] = A[M,K]^T * B[M,N]
template <class T>
void matmul_tn(const T* a, const T* b, T* c, int64_t m, int64_t k, int64_t n) {
  for (int64_t i = 0; i < k; ++i) {
    for (int64_t j = 0; j < n; ++j) {
      T acc = 0;
      for (int64_t p = 0; p < m; ++p) acc += a[p * k + i] * b[p * n + j];
      c[i * n + j] = acc;
    }
  }
}

template <class T>
inline T conv2d_cell(const T* x, const T* w, int64_t ci, int64_t h, int64_t wd, int64_t kh,
                     int64_t kw, int64_t n, int64_t co, int64_t oh, int64_t ow, int64_t stride,
                     int64_t pad) {
  T acc = 0;
  for (int64_t c = 0; c < ci; ++c) {
    for (int64_t i = 0; i < kh; ++i) {
      int64_t ih = oh * stride - pad + i;
      if (ih < 0 || ih >= h) continue;
      for (int64_t j = 0; j < kw; ++j) {
        int64_t iw = ow * stride - pad + j;
        if (iw < 0 || iw >= wd) continue;
        acc += x[((n * ci + c) * h + ih) * wd + iw] * w[((co * ci + c) * kh + i) * kw + j];
      }
    }
  }
  return acc;
}

template <class T>
void conv2d_forward(const T* x, const T* w, const T* bias, T* y, int64_t nb, int64_t ci,
                    int64_t h, int64_t wd, int64_t co, int64_t kh, int64_t kw, int64_t oh,
                    int64_t ow, int64_t stride, int64_t pad) {
  for (int64_t n = 0; n < nb; ++n)
    for (int64_t c = 0; c < co; ++c)
      for (int64_t i = 0; i < oh; ++i)
        for (int64_t j = 0; j < ow; ++j) {
          T v = conv2d_cell(x, w, ci, h, wd, kh, kw, n, c, i, j, stride, pad);
          if (bias) v += bias[c];
          y[((n * co + c) * oh + i) * ow + j] = v;
        }
}

template <class T>
inline T conv2d_input_cell(const T* dy, const T* w, int64_t co, int64_t kh, int64_t kw,
                           int64_t oh, int64_t ow, int64_t n, int64_t c, int64_t ih, int64_t iw,
                           int64_t stride, int64_t pad, int64_t ci) {
  T acc = 0;
  for (int64_t f = 0; f < co; ++f) {
    for (int64_t i = 0; i < kh; ++i) {
      int64_t num_h = ih + pad - i;
      if (num_h < 0 || num_h % stride != 0) continue;
      int64_t o_h = num_h / stride;
      if (o_h >= oh) continue;
      for (int64_t j = 0; j < kw; ++j) {
        int64_t num_w = iw + pad - j;
        if (num_w < 0 || num_w % stride != 0) continue;
        int64_t o_w = num_w / stride;
        if (o_w >= ow) continue;
        acc += dy[((n * co + f) * oh + o_h) * ow + o_w] * w[((f * ci + c) * kh + i) * kw + j];
      }
    }
  }
  return acc;
}

template <class T>
void conv2d_backward_input(const T* dy, const T* w, T* dx, int64_t nb, int64_t ci, int64_t h,
                           int64_t wd, int64_t co, int64_t kh, int64_t kw, int64_t oh,
                           int64_t ow, int64_t stride, int64_t pad) {
  for (int64_t n = 0; n < nb; ++n)
    for (int64_t c = 0; c < ci; ++c)
      for (int64_t ih = 0; ih < h; ++ih)
        for (int64_t iw = 0; iw < wd; ++iw)
          dx[((n * ci + c) * h + ih) * wd + iw] +=
              conv2d_input_cell(dy, w, co, kh, kw, oh, ow, n, c, ih, iw, stride, pad, ci);
}

template <class T>
inline T conv2d_weight_cell(const T* x, const T* dy, int64_t nb, int64_t ci, int64_t h,
                            int64_t wd, int64_t co, int64_t oh, int64_t ow, int64_t f, int64_t c,
                            int64_t i, int64_t j, int64_t stride, int64_t pad) {
  T acc = 0;
  for (int64_t n = 0; n < nb; ++n) {
    for (int64_t o_h = 0; o_h < oh; ++o_h) {
      int64_t ih = o_h * stride - pad + i;
      if (ih < 0 || ih >= h) continue;
      for (int64_t o_w = 0; o_w < ow; ++o_w) {
        int64_t iw = o_w * stride - pad + j;
        if (iw < 0 || iw >= wd) continue;
        acc += x[((n * ci + c) * h + ih) * wd + iw] * dy[((n * co + f) * oh + o_h) * ow + o_w];
      }
    }
  }
  return acc;
}

template <class T>
void conv2d_backward_weight(const T* x, const T* dy, T* dw, int64_t nb, int64_t ci, int64_t h,
                            int64_t wd, int64_t co, int64_t kh, int64_t kw, int64_t oh,
                            int64_t ow, int64_t stride, int64_t pad) {
  for (int64_t f = 0; f < co; ++f)
    for (int64_t c = 0; c < ci; ++c)
      for (int64_t i = 0; i < kh; ++i)
        for (int64_t j = 0; j < kw; ++j)
          dw[((f * ci + c) * kh + i) * kw + j] +=
              conv2d_weight_cell(x, dy, nb, ci, h, wd, co, oh, ow, f, c, i, j, stride, pad);
}

template <class T>
void conv2d_backward_bias(const T* dy, T* db, int64_t nb, int64_t co, int64_t oh, int64_t ow) {
  for (int64_t f = 0; f < co; ++f) {
    T acc = 0;
    for (int64_t n = 0; n < nb; ++n)
      for (int64_t i = 0; i < oh; ++i)
        for (int64_t j = 0; j < ow; ++j) acc += dy[((n * co + f) * oh + i) * ow + j];
    db[f] += acc;
  }
}

// Per-(sample, channel) spatial standardization.
// xhat = (x - mean) * invstd, y = scale * xhat + shift.
template <class T>
void instance_norm_forward(const T* x, const T* scale, const T* shift, T* y, T* xhat,
                           T* invstd, int64_t nb, int64_t c, int64_t hw, double eps) {
  for (int64_t p = 0; p < nb * c; ++p) {
    const T* xi = x + p * hw;
    T mean = 0;
    for (int64_t i = 0; i < hw; ++i) mean += xi[i];
    mean /= static_cast<T>(hw);
    T var = 0;
    for (int64_t i = 0; i < hw; ++i) {
      T d = xi[i] - mean;
      var += d * d;
    }
    var /= static_cast<T>(hw);
    T istd = static_cast<T>(1.0 / std::sqrt(static_cast<double>(var) + eps));
    invstd[p] = istd;
    int64_t ch = p % c;
    for (int64_t i = 0; i < hw; ++i) {
      T xh = (xi[i] - mean) * istd;
      xhat[p * hw + i] = xh;
      y[p * hw + i] = scale[ch] * xh + shift[ch];
    }
  }
}

template <class T>
void instance_norm_backward_input(const T* dy, const T* xhat, const T* invstd, const T* scale,
                                  T* dx, int64_t nb, int64_t c, int64_t hw) {
  for (int64_t p = 0; p < nb * c; ++p) {
    const T* dyi = dy + p * hw;
    const T* xh = xhat + p * hw;
    int64_t ch = p % c;
    T sum_dy = 0, sum_dy_xh = 0;
    for (int64_t i = 0; i < hw; ++i) {
      sum_dy += dyi[i];
      sum_dy_xh += dyi[i] * xh[i];
    }
    T m = static_cast<T>(hw);
    for (int64_t i = 0; i < hw; ++i) {
      T dxhat = dyi[i] * scale[ch];
      // d/dx of (x-mean)*invstd with mean/var dependence folded in.
      dx[p * hw + i] +=
          invstd[p] * (dxhat - scale[ch] * sum_dy / m - xh[i] * scale[ch] * sum_dy_xh / m);
    }
  }
}

// Channel-wise scale/shift gradients shared by both norm layers:
// dscale[c] = sum over (n, spatial) of dy*xhat, dshift[c] = sum of dy.
template <class T>
void norm_backward_affine(const T* dy, const T* xhat, T* dscale, T* dshift, int64_t nb,
                          int64_t c, int64_t hw) {
  for (int64_t ch = 0; ch < c; ++ch) {
    T ds = 0, db = 0;
    for (int64_t n = 0; n < nb; ++n) {
      const T* dyi = dy + (n * c + ch) * hw;
      const T* xh = xhat + (n * c + ch) * hw;
      for (int64_t i = 0; i < hw; ++i) {
        ds += dyi[i] * xh[i];
        db += dyi[i];
      }
    }
    dscale[ch] += ds;
    dshift[ch] += db;
  }
}

// Batch statistics over (N, spatial) per channel; population variance.
template <class T>
void batch_norm_forward_train(const T* x, const T* scale, const T* shift, T* y, T* xhat,
                              T* mean, T* var, T* invstd, int64_t nb, int64_t c, int64_t hw,
                              double eps) {
  for (int64_t ch = 0; ch < c; ++ch) {
    T m = 0;
    for (int64_t n = 0; n < nb; ++n) {
      const T* xi = x + (n * c + ch) * hw;
      for (int64_t i = 0; i < hw; ++i) m += xi[i];
    }
    T cnt = static_cast<T>(nb * hw);
    m /= cnt;
    T v = 0;
    for (int64_t n = 0; n < nb; ++n) {
      const T* xi = x + (n * c + ch) * hw;
      for (int64_t i = 0; i < hw; ++i) {
        T d = xi[i] - m;
        v += d * d;
      }
    }
    v /= cnt;
    T istd = static_cast<T>(1.0 / std::sqrt(static_cast<double>(v) + eps));
    mean[ch] = m;
    var[ch] = v;
    invstd[ch] = istd;
    for (int64_t n = 0; n < nb; ++n) {
      const T* xi = x + (n * c + ch) * hw;
      T* yi = y + (n * c + ch) * hw;
      T* xhi = xhat + (n * c + ch) * hw;
      for (int64_t i = 0; i < hw; ++i) {
        T xh = (xi[i] - m) * istd;
        xhi[i] = xh;
        yi[i] = scale[ch] * xh + shift[ch];
      }
    }
  }
}

template <class T>
void batch_norm_backward_input(const T* dy, const T* xhat, const T* invstd, const T* scale,
                               T* dx, int64_t nb, int64_t c, int64_t hw) {
  for (int64_t ch = 0; ch < c; ++ch) {
    T sum_dy = 0, sum_dy_xh = 0;
    for (int64_t n = 0; n < nb; ++n) {
      const T* dyi = dy + (n * c + ch) * hw;
      const T* xh = xhat + (n * c + ch) * hw;
      for (int64_t i = 0; i < hw; ++i) {
        sum_dy += dyi[i];
        sum_dy_xh += dyi[i] * xh[i];
      }
    }
    T m = static_cast<T>(nb * hw);
    for (int64_t n = 0; n < nb; ++n) {
      const T* dyi = dy + (n * c + ch) * hw;
      const T* xh = xhat + (n * c + ch) * hw;
      T* dxi = dx + (n * c + ch) * hw;
      for (int64_t i = 0; i < hw; ++i)
        dxi[i] += scale[ch] * invstd[ch] * (dyi[i] - sum_dy / m - xh[i] * sum_dy_xh / m);
    }
  }
}

// Eval-mode batch norm: pure per-channel affine with fixed statistics.
template <class T>
void batch_norm_forward_eval(const T* x, const T* scale, const T* shift, const T* rmean,
                             const T* rvar, T* y, int64_t nb, int64_t c, int64_t hw,
                             double eps) {
  for (int64_t p = 0; p < nb * c; ++p) {
    int64_t ch = p % c;
    T istd = static_cast<T>(1.0 / std::sqrt(static_cast<double>(rvar[ch]) + eps));
    const T* xi = x + p * hw;
    T* yi = y + p * hw;
    for (int64_t i = 0; i < hw; ++i) yi[i] = scale[ch] * (xi[i] - rmean[ch]) * istd + shift[ch];
  }
}

template <class T>
void maxpool_forward(const T* x, T* y, int64_t* argmax, int64_t nb, int64_t c, int64_t h,
                     int64_t wd, int64_t k, int64_t stride, int64_t oh, int64_t ow) {
  for (int64_t p = 0; p < nb * c; ++p) {
    const T* xi = x + p * h * wd;
    for (int64_t i = 0; i < oh; ++i) {
      for (int64_t j = 0; j < ow; ++j) {
        int64_t best = -1;
        T best_v = 0;
        for (int64_t a = 0; a < k; ++a) {
          int64_t ih = i * stride + a;
          if (ih >= h) break;
          for (int64_t b = 0; b < k; ++b) {
            int64_t iw = j * stride + b;
            if (iw >= wd) break;
            T v = xi[ih * wd + iw];
            if (best < 0 || v > best_v) {
              best = ih * wd + iw;
              best_v = v;
            }
          }
        }
        y[p * oh * ow + i * ow + j] = best_v;
        argmax[p * oh * ow + i * ow + j] = best;
      }
    }
  }
}

template <class T>
void maxpool_backward(const T* dy, const int64_t* argmax, T* dx, int64_t nb_c, int64_t hw_in,
                      int64_t hw_out) {
  for (int64_t p = 0; p < nb_c; ++p) {
    const T* dyi = dy + p * hw_out;
    T* dxi = dx + p * hw_in;
    const int64_t* am = argmax + p * hw_out;
    for (int64_t i = 0; i < hw_out; ++i) dxi[am[i]] += dyi[i];
  }
}

}  // namespace serial

// ---------------------------------------------------------------------------
// OpenMP kernels. Same element-level arithmetic as serial; threads split
// independent outputs only.
// ---------------------------------------------------------------------------
namespace par {

template <class T>
void matmul_nn(const T* a, const T* b, T* c, int64_t m, int64_t k, int64_t n) {
#ifdef _OPENMP
#pragma omp parallel for num_threads(max_threads()) schedule(static)
  for (int64_t i = 0; i < m; ++i) {
    for (int64_t j = 0; j < n; ++j) {
      T acc = 0;
      for (int64_t p = 0; p < k; ++p) acc += a[i * k + p] * b[p * n + j];
      c[i * n + j] = acc;
    }
  }
#else
  serial::matmul_nn(a, b, c, m, k, n);
#endif
}

template <class T>
void matmul_nt(const T* a, const T* b, T* c, int64_t m, int64_t n, int64_t k) {
#ifdef _OPENMP
#pragma omp parallel for num_threads(max_threads()) schedule(static)
  for (int64_t i = 0; i < m; ++i) {
    for (int64_t j = 0; j < k; ++j) {
      T acc = 0;
      for (int64_t p = 0; p < n; ++p) acc += a[i * n + p] * b[j * n + p];
      c[i * k + j] = acc;
    }
  }
#else
  serial::matmul_nt(a, b, c, m, n, k);
#endif
}

template <class T>
void matmul_tn(const T* a, const T* b, T* c, int64_t m, int64_t k, int64_t n) {
#ifdef _OPENMP
#pragma omp parallel for num_threads(max_threads()) schedule(static)
  for (int64_t i = 0; i < k; ++i) {
    for (int64_t j = 0; j < n; ++j) {
      T acc = 0;
      for (int64_t p = 0; p < m; ++p) acc += a[p * k + i] * b[p * n + j];
      c[i * n + j] = acc;
    }
  }
#else
  serial::matmul_tn(a, b, c, m, k, n);
#endif
}

template <class T>
void conv2d_forward(const T* x, const T* w, const T* bias, T* y, int64_t nb, int64_t ci,
                    int64_t h, int64_t wd, int64_t co, int64_t kh, int64_t kw, int64_t oh,
                    int64_t ow, int64_t stride, int64_t pad) {
#ifdef _OPENMP
#pragma omp parallel for num_threads(max_threads()) schedule(static) collapse(2)
  for (int64_t n = 0; n < nb; ++n)
    for (int64_t c = 0; c < co; ++c)
      for (int64_t i = 0; i < oh; ++i)
        for (int64_t j = 0; j < ow; ++j) {
          T v = serial::conv2d_cell(x, w, ci, h, wd, kh, kw, n, c, i, j, stride, pad);
          if (bias) v += bias[c];
          y[((n * co + c) * oh + i) * ow + j] = v;
        }
#else
  serial::conv2d_forward(x, w, bias, y, nb, ci, h, wd, co, kh, kw, oh, ow, stride, pad);
#endif
}

template <class T>
void conv2d_backward_input(const T* dy, const T* w, T* dx, int64_t nb, int64_t ci, int64_t h,
                           int64_t wd, int64_t co, int64_t kh, int64_t kw, int64_t oh,
                           int64_t ow, int64_t stride, int64_t pad) {
#ifdef _OPENMP
#pragma omp parallel for num_threads(max_threads()) schedule(static) collapse(2)
  for (int64_t n = 0; n < nb; ++n)
    for (int64_t c = 0; c < ci; ++c)
      for (int64_t ih = 0; ih < h; ++ih)
        for (int64_t iw = 0; iw < wd; ++iw)
          dx[((n * ci + c) * h + ih) * wd + iw] += serial::conv2d_input_cell(
              dy, w, co, kh, kw, oh, ow, n, c, ih, iw, stride, pad, ci);
#else
  serial::conv2d_backward_input(dy, w, dx, nb, ci, h, wd, co, kh, kw, oh, ow, stride, pad);
#endif
}

template <class T>
void conv2d_backward_weight(const T* x, const T* dy, T* dw, int64_t nb, int64_t ci, int64_t h,
                            int64_t wd, int64_t co, int64_t kh, int64_t kw, int64_t oh,
                            int64_t ow, int64_t stride, int64_t pad) {
#ifdef _OPENMP
#pragma omp parallel for num_threads(max_threads()) schedule(static) collapse(2)
  for (int64_t f = 0; f < co; ++f)
    for (int64_t c = 0; c < ci; ++c)
      for (int64_t i = 0; i < kh; ++i)
        for (int64_t j = 0; j < kw; ++j)
          dw[((f * ci + c) * kh + i) * kw + j] += serial::conv2d_weight_cell(
              x, dy, nb, ci, h, wd, co, oh, ow, f, c, i, j, stride, pad);
#else
  serial::conv2d_backward_weight(x, dy, dw, nb, ci, h, wd, co, kh, kw, oh, ow, stride, pad);
#endif
}

template <class T>
void instance_norm_forward(const T* x, const T* scale, const T* shift, T* y, T* xhat,
                           T* invstd, int64_t nb, int64_t c, int64_t hw, double eps) {
#ifdef _OPENMP
#pragma omp parallel for num_threads(max_threads()) schedule(static)
  for (int64_t p = 0; p < nb * c; ++p)
    serial::instance_norm_forward(x + p * hw, scale + (p % c), shift + (p % c), y + p * hw,
                                  xhat + p * hw, invstd + p, 1, 1, hw, eps);
#else
  serial::instance_norm_forward(x, scale, shift, y, xhat, invstd, nb, c, hw, eps);
#endif
}

template <class T>
void instance_norm_backward_input(const T* dy, const T* xhat, const T* invstd, const T* scale,
                                  T* dx, int64_t nb, int64_t c, int64_t hw) {
#ifdef _OPENMP
#pragma omp parallel for num_threads(max_threads()) schedule(static)
  for (int64_t p = 0; p < nb * c; ++p)
    serial::instance_norm_backward_input(dy + p * hw, xhat + p * hw, invstd + p,
                                         scale + (p % c), dx + p * hw, 1, 1, hw);
#else
  serial::instance_norm_backward_input(dy, xhat, invstd, scale, dx, nb, c, hw);
#endif
}

template <class T>
void batch_norm_forward_train(const T* x, const T* scale, const T* shift, T* y, T* xhat,
                              T* mean, T* var, T* invstd, int64_t nb, int64_t c, int64_t hw,
                              double eps) {
#ifdef _OPENMP
#pragma omp parallel for num_threads(max_threads()) schedule(static)
  for (int64_t ch = 0; ch < c; ++ch) {
    T m = 0;
    for (int64_t n = 0; n < nb; ++n) {
      const T* xi = x + (n * c + ch) * hw;
      for (int64_t i = 0; i < hw; ++i) m += xi[i];
    }
    T cnt = static_cast<T>(nb * hw);
    m /= cnt;
    T v = 0;
    for (int64_t n = 0; n < nb; ++n) {
      const T* xi = x + (n * c + ch) * hw;
      for (int64_t i = 0; i < hw; ++i) {
        T d = xi[i] - m;
        v += d * d;
      }
    }
    v /= cnt;
    T istd = static_cast<T>(1.0 / std::sqrt(static_cast<double>(v) + eps));
    mean[ch] = m;
    var[ch] = v;
    invstd[ch] = istd;
    for (int64_t n = 0; n < nb; ++n) {
      const T* xi = x + (n * c + ch) * hw;
      T* yi = y + (n * c + ch) * hw;
      T* xhi = xhat + (n * c + ch) * hw;
      for (int64_t i = 0; i < hw; ++i) {
        T xh = (xi[i] - m) * istd;
        xhi[i] = xh;
        yi[i] = scale[ch] * xh + shift[ch];
      }
    }
  }
#else
  serial::batch_norm_forward_train(x, scale, shift, y, xhat, mean, var, invstd, nb, c, hw, eps);
#endif
}

}  // namespace par

// ---------------------------------------------------------------------------
// Dispatch: parallel when more than one thread is configured.
// ---------------------------------------------------------------------------

template <class T>
void matmul_nn(const T* a, const T* b, T* c, int64_t m, int64_t k, int64_t n) {
  if (use_parallel())
    par::matmul_nn(a, b, c, m, k, n);
  else
    serial::matmul_nn(a, b, c, m, k, n);
}

template <class T>
void matmul_nt(const T* a, const T* b, T* c, int64_t m, int64_t n, int64_t k) {
  if (use_parallel())
    par::matmul_nt(a, b, c, m, n, k);
  else
    serial::matmul_nt(a, b, c, m, n, k);
}

template <class T>
void matmul_tn(const T* a, const T* b, T* c, int64_t m, int64_t k, int64_t n) {
  if (use_parallel())
    par::matmul_tn(a, b, c, m, k, n);
  else
    serial::matmul_tn(a, b, c, m, k, n);
}

template <class T>
void conv2d_forward(const T* x, const T* w, const T* bias, T* y, int64_t nb, int64_t ci,
                    int64_t h, int64_t wd, int64_t co, int64_t kh, int64_t kw, int64_t oh,
                    int64_t ow, int64_t stride, int64_t pad) {
  if (use_parallel())
    par::conv2d_forward(x, w, bias, y, nb, ci, h, wd, co, kh, kw, oh, ow, stride, pad);
  else
    serial::conv2d_forward(x, w, bias, y, nb, ci, h, wd, co, kh, kw, oh, ow, stride, pad);
}

template <class T>
void conv2d_backward_input(const T* dy, const T* w, T* dx, int64_t nb, int64_t ci, int64_t h,
                           int64_t wd, int64_t co, int64_t kh, int64_t kw, int64_t oh,
                           int64_t ow, int64_t stride, int64_t pad) {
  if (use_parallel())
    par::conv2d_backward_input(dy, w, dx, nb, ci, h, wd, co, kh, kw, oh, ow, stride, pad);
  else
    serial::conv2d_backward_input(dy, w, dx, nb, ci, h, wd, co, kh, kw, oh, ow, stride, pad);
}

template <class T>
void conv2d_backward_weight(const T* x, const T* dy, T* dw, int64_t nb, int64_t ci, int64_t h,
                            int64_t wd, int64_t co, int64_t kh, int64_t kw, int64_t oh,
                            int64_t ow, int64_t stride, int64_t pad) {
  if (use_parallel())
    par::conv2d_backward_weight(x, dy, dw, nb, ci, h, wd, co, kh, kw, oh, ow, stride, pad);
  else
    serial::conv2d_backward_weight(x, dy, dw, nb, ci, h, wd, co, kh, kw, oh, ow, stride, pad);
}

template <class T>
void instance_norm_forward(const T* x, const T* scale, const T* shift, T* y, T* xhat,
                           T* invstd, int64_t nb, int64_t c, int64_t hw, double eps) {
  if (use_parallel())
    par::instance_norm_forward(x, scale, shift, y, xhat, invstd, nb, c, hw, eps);
  else
    serial::instance_norm_forward(x, scale, shift, y, xhat, invstd, nb, c, hw, eps);
}

template <class T>
void instance_norm_backward_input(const T* dy, const T* xhat, const T* invstd, const T* scale,
                                  T* dx, int64_t nb, int64_t c, int64_t hw) {
  if (use_parallel())
    par::instance_norm_backward_input(dy, xhat, invstd, scale, dx, nb, c, hw);
  else
    serial::instance_norm_backward_input(dy, xhat, invstd, scale, dx, nb, c, hw);
}

template <class T>
void batch_norm_forward_train(const T* x, const T* scale, const T* shift, T* y, T* xhat,
                              T* mean, T* var, T* invstd, int64_t nb, int64_t c, int64_t hw,
                              double eps) {
  if (use_parallel())
    par::batch_norm_forward_train(x, scale, shift, y, xhat, mean, var, invstd, nb, c, hw, eps);
  else
    serial::batch_norm_forward_train(x, scale, shift, y, xhat, mean, var, invstd, nb, c, hw,
                                     eps);
}

}  // namespace wassalign::kernels
