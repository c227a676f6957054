#include <cmath>
#include <stdexcept>
#include <string>

#include "igdh/ops.hpp"

namespace igdh {

template <class T>
Tensor<T> conv2d(const Tensor<T>& input, const Tensor<T>& weight,
                 const std::optional<Tensor<T>>& bias, int64_t stride, int64_t padding,
                 PadMode mode) {
  const Shape4 xs = input.shape();
  const Shape4 ws = weight.shape();
  if (xs.c != ws.c) {
    throw std::invalid_argument("conv2d: input channels " + std::to_string(xs.c) +
                                " do not match weight in-channels " + std::to_string(ws.c));
  }
  if (stride < 1) throw std::invalid_argument("conv2d: stride must be >= 1");
  if (padding < 0) throw std::invalid_argument("conv2d: negative padding");
  if (bias) {
    const Shape4 bs = bias->shape();
    if (!(bs == Shape4{1, ws.n, 1, 1})) {
      throw std::invalid_argument("conv2d: bias shape " + bs.str() + " must be (1," +
                                  std::to_string(ws.n) + ",1,1)");
    }
  }
  if (mode == PadMode::kReflect) {
    if (padding >= ws.h || padding >= ws.w) {
      throw std::invalid_argument("conv2d: reflect padding " + std::to_string(padding) +
                                  " must be smaller than kernel " + std::to_string(ws.h) +
                                  "x" + std::to_string(ws.w));
    }
    if (padding == 0) return conv2d(input, weight, bias, stride, 0, PadMode::kZeros);
    auto padded = reflect_pad2d(input, padding, padding, padding, padding);
    return conv2d(padded, weight, bias, stride, 0, PadMode::kZeros);
  }

  const int64_t oh = (xs.h + 2 * padding - ws.h) / stride + 1;
  const int64_t ow = (xs.w + 2 * padding - ws.w) / stride + 1;
  if (xs.h + 2 * padding < ws.h || xs.w + 2 * padding < ws.w || oh < 1 || ow < 1) {
    throw std::invalid_argument("conv2d: kernel " + std::to_string(ws.h) + "x" +
                                std::to_string(ws.w) + " exceeds padded input " +
                                xs.str());
  }

  Shape4 os{xs.n, ws.n, oh, ow};
  std::vector<T> out(static_cast<size_t>(os.numel()), T(0));
  const T* px = input.data();
  const T* pw = weight.data();
  const T* pb = bias ? bias->data() : nullptr;

  for (int64_t n = 0; n < xs.n; ++n)
    for (int64_t oc = 0; oc < ws.n; ++oc) {
      T* dst = out.data() + (n * ws.n + oc) * oh * ow;
      const T bval = pb ? pb[oc] : T(0);
      for (int64_t y = 0; y < oh; ++y)
        for (int64_t x = 0; x < ow; ++x) {
          T acc = bval;
          for (int64_t ic = 0; ic < xs.c; ++ic) {
            const T* src = px + (n * xs.c + ic) * xs.h * xs.w;
            const T* ker = pw + (oc * xs.c + ic) * ws.h * ws.w;
            for (int64_t ky = 0; ky < ws.h; ++ky) {
              const int64_t iy = y * stride - padding + ky;
              if (iy < 0 || iy >= xs.h) continue;
              for (int64_t kx = 0; kx < ws.w; ++kx) {
                const int64_t ix = x * stride - padding + kx;
                if (ix < 0 || ix >= xs.w) continue;
                acc += src[iy * xs.w + ix] * ker[ky * ws.w + kx];
              }
            }
          }
          dst[y * ow + x] = acc;
        }
    }

  std::vector<Tensor<T>> parents = {input, weight};
  if (bias) parents.push_back(*bias);
  auto x_impl = input.impl();
  auto w_impl = weight.impl();
  const bool has_bias = bias.has_value();
  return make_result<T>(
      os, std::move(out), std::move(parents), "conv2d",
      [xs, ws, os, stride, padding, x_impl, w_impl, has_bias](const std::vector<T>& g,
                                                              const auto& sink) {
        std::vector<T>* gx = sink(0);
        std::vector<T>* gw = sink(1);
        std::vector<T>* gb = has_bias ? sink(2) : nullptr;
        const T* px = x_impl->data.data();
        const T* pw = w_impl->data.data();
        for (int64_t n = 0; n < xs.n; ++n)
          for (int64_t oc = 0; oc < ws.n; ++oc) {
            const T* go = g.data() + (n * ws.n + oc) * os.h * os.w;
            for (int64_t y = 0; y < os.h; ++y)
              for (int64_t x = 0; x < os.w; ++x) {
                const T gv = go[y * os.w + x];
                if (gv == T(0)) continue;
                if (gb) (*gb)[oc] += gv;
                for (int64_t ic = 0; ic < xs.c; ++ic) {
                  const int64_t src_base = (n * xs.c + ic) * xs.h * xs.w;
                  const int64_t ker_base = (oc * xs.c + ic) * ws.h * ws.w;
                  for (int64_t ky = 0; ky < ws.h; ++ky) {
                    const int64_t iy = y * stride - padding + ky;
                    if (iy < 0 || iy >= xs.h) continue;
                    for (int64_t kx = 0; kx < ws.w; ++kx) {
                      const int64_t ix = x * stride - padding + kx;
                      if (ix < 0 || ix >= xs.w) continue;
                      if (gx) (*gx)[src_base + iy * xs.w + ix] += gv * pw[ker_base + ky * ws.w + kx];
                      if (gw) (*gw)[ker_base + ky * ws.w + kx] += gv * px[src_base + iy * xs.w + ix];
                    }
                  }
                }
              }
          }
      });
}

template <class T>
Tensor<T> linear(const Tensor<T>& x, const Tensor<T>& weight, const Tensor<T>& bias) {
  const Shape4 xs = x.shape();
  const Shape4 ws = weight.shape();
  const Shape4 bs = bias.shape();
  if (xs.h != 1 || xs.w != 1 || ws.h != 1 || ws.w != 1 || xs.c != ws.c ||
      !(bs == Shape4{1, ws.n, 1, 1})) {
    throw std::invalid_argument("linear: x " + xs.str() + " weight " + ws.str() +
                                " bias " + bs.str());
  }
  const int64_t N = xs.n, F = xs.c, G = ws.n;
  std::vector<T> out(static_cast<size_t>(N * G));
  const T* px = x.data();
  const T* pw = weight.data();
  const T* pb = bias.data();
  for (int64_t n = 0; n < N; ++n)
    for (int64_t g = 0; g < G; ++g) {
      T acc = pb[g];
      for (int64_t f = 0; f < F; ++f) acc += px[n * F + f] * pw[g * F + f];
      out[n * G + g] = acc;
    }
  auto x_impl = x.impl();
  auto w_impl = weight.impl();
  return make_result<T>(
      {N, G, 1, 1}, std::move(out), {x, weight, bias}, "linear",
      [N, F, G, x_impl, w_impl](const std::vector<T>& g, const auto& sink) {
        std::vector<T>* gx = sink(0);
        std::vector<T>* gw = sink(1);
        std::vector<T>* gb = sink(2);
        const T* px = x_impl->data.data();
        const T* pw = w_impl->data.data();
        for (int64_t n = 0; n < N; ++n)
          for (int64_t k = 0; k < G; ++k) {
            const T gv = g[n * G + k];
            if (gb) (*gb)[k] += gv;
            for (int64_t f = 0; f < F; ++f) {
              if (gx) (*gx)[n * F + f] += gv * pw[k * F + f];
              if (gw) (*gw)[k * F + f] += gv * px[n * F + f];
            }
          }
      });
}

// batched matmul over the two leading dims; b optionally transposed on its last two
template <class T>
Tensor<T> bmm(const Tensor<T>& a, const Tensor<T>& b, bool transpose_b) {
  const Shape4 sa = a.shape();
  const Shape4 sb = b.shape();
  const int64_t K = sa.w;
  const int64_t J = transpose_b ? sb.h : sb.w;
  const int64_t Kb = transpose_b ? sb.w : sb.h;
  if (sa.n != sb.n || sa.c != sb.c || K != Kb) {
    throw std::invalid_argument("bmm: " + sa.str() + (transpose_b ? " x T" : " x ") +
                                sb.str());
  }
  const int64_t B = sa.n * sa.c, M = sa.h;
  Shape4 os{sa.n, sa.c, M, J};
  std::vector<T> out(static_cast<size_t>(os.numel()), T(0));
  const T* pa = a.data();
  const T* pb = b.data();
  for (int64_t bb = 0; bb < B; ++bb) {
    const T* A = pa + bb * M * K;
    const T* Bm = pb + bb * sb.h * sb.w;
    T* O = out.data() + bb * M * J;
    for (int64_t m = 0; m < M; ++m)
      for (int64_t j = 0; j < J; ++j) {
        T acc = 0;
        if (transpose_b) {
          for (int64_t k = 0; k < K; ++k) acc += A[m * K + k] * Bm[j * K + k];
        } else {
          for (int64_t k = 0; k < K; ++k) acc += A[m * K + k] * Bm[k * J + j];
        }
        O[m * J + j] = acc;
      }
  }
  auto a_impl = a.impl();
  auto b_impl = b.impl();
  return make_result<T>(
      os, std::move(out), {a, b}, "bmm",
      [B, M, K, J, sb, transpose_b, a_impl, b_impl](const std::vector<T>& g,
                                                    const auto& sink) {
        std::vector<T>* ga = sink(0);
        std::vector<T>* gb = sink(1);
        const T* pa = a_impl->data.data();
        const T* pb = b_impl->data.data();
        for (int64_t bb = 0; bb < B; ++bb) {
          const T* A = pa + bb * M * K;
          const T* Bm = pb + bb * sb.h * sb.w;
          const T* G = g.data() + bb * M * J;
          for (int64_t m = 0; m < M; ++m)
            for (int64_t j = 0; j < J; ++j) {
              const T gv = G[m * J + j];
              if (gv == T(0)) continue;
              if (transpose_b) {
                // out = A·Bᵀ: dA[m,k] += g·B[j,k], dB[j,k] += g·A[m,k]
                for (int64_t k = 0; k < K; ++k) {
                  if (ga) (*ga)[bb * M * K + m * K + k] += gv * Bm[j * K + k];
                  if (gb) (*gb)[bb * sb.h * sb.w + j * K + k] += gv * A[m * K + k];
                }
              } else {
                for (int64_t k = 0; k < K; ++k) {
                  if (ga) (*ga)[bb * M * K + m * K + k] += gv * Bm[k * J + j];
                  if (gb) (*gb)[bb * sb.h * sb.w + k * J + j] += gv * A[m * K + k];
                }
              }
            }
        }
      });
}

template <class T>
Tensor<T> softmax(const Tensor<T>& x, int axis) {
  if (axis < 0 || axis > 3) throw std::invalid_argument("softmax: axis out of range");
  const Shape4 s = x.shape();
  const int64_t dims[4] = {s.n, s.c, s.h, s.w};
  const int64_t strides[4] = {s.c * s.h * s.w, s.h * s.w, s.w, 1};
  const int64_t len = dims[axis];
  const int64_t step = strides[axis];
  int o[3], oi = 0;
  for (int k = 0; k < 4; ++k)
    if (k != axis) o[oi++] = k;

  std::vector<T> out(static_cast<size_t>(s.numel()));
  const T* px = x.data();
  for (int64_t i0 = 0; i0 < dims[o[0]]; ++i0)
    for (int64_t i1 = 0; i1 < dims[o[1]]; ++i1)
      for (int64_t i2 = 0; i2 < dims[o[2]]; ++i2) {
        const int64_t base = i0 * strides[o[0]] + i1 * strides[o[1]] + i2 * strides[o[2]];
        T mx = px[base];
        for (int64_t k = 1; k < len; ++k) mx = std::max(mx, px[base + k * step]);
        T denom = 0;
        for (int64_t k = 0; k < len; ++k) {
          const T e = std::exp(px[base + k * step] - mx);
          out[base + k * step] = e;
          denom += e;
        }
        for (int64_t k = 0; k < len; ++k) out[base + k * step] /= denom;
      }

  auto y = out;  // saved activations for the backward pass
  return make_result<T>(
      s, std::move(out), {x}, "softmax",
      [s, axis, y](const std::vector<T>& g, const auto& sink) {
        if (std::vector<T>* gx = sink(0)) {
          const int64_t dims[4] = {s.n, s.c, s.h, s.w};
          const int64_t strides[4] = {s.c * s.h * s.w, s.h * s.w, s.w, 1};
          const int64_t len = dims[axis];
          const int64_t step = strides[axis];
          int o[3], oi = 0;
          for (int k = 0; k < 4; ++k)
            if (k != axis) o[oi++] = k;
          for (int64_t i0 = 0; i0 < dims[o[0]]; ++i0)
            for (int64_t i1 = 0; i1 < dims[o[1]]; ++i1)
              for (int64_t i2 = 0; i2 < dims[o[2]]; ++i2) {
                const int64_t base =
                    i0 * strides[o[0]] + i1 * strides[o[1]] + i2 * strides[o[2]];
                T dot = 0;
                for (int64_t k = 0; k < len; ++k)
                  dot += g[base + k * step] * y[base + k * step];
                for (int64_t k = 0; k < len; ++k) {
                  (*gx)[base + k * step] +=
                      y[base + k * step] * (g[base + k * step] - dot);
                }
              }
        }
      });
}

#define IGDH_INSTANTIATE_CONV(T)                                                      \
  template Tensor<T> conv2d<T>(const Tensor<T>&, const Tensor<T>&,                   \
                               const std::optional<Tensor<T>>&, int64_t, int64_t,    \
                               PadMode);                                              \
  template Tensor<T> linear<T>(const Tensor<T>&, const Tensor<T>&, const Tensor<T>&); \
  template Tensor<T> bmm<T>(const Tensor<T>&, const Tensor<T>&, bool);               \
  template Tensor<T> softmax<T>(const Tensor<T>&, int);

IGDH_INSTANTIATE_CONV(float)
IGDH_INSTANTIATE_CONV(double)

}  // namespace igdh
