#include <cmath>
#include <stdexcept>
#include <string>

#include "igdh/ops.hpp"

namespace igdh {

template <class T>
Tensor<T> pool2d(const Tensor<T>& x, PoolKind kind, PoolScope scope, int64_t k,
                 int64_t stride) {
  const Shape4 s = x.shape();
  const T* px = x.data();

  if (scope == PoolScope::kGlobal) {
    const int64_t hw = s.h * s.w;
    if (hw == 0) throw std::invalid_argument("pool2d: empty window");
    std::vector<T> out(static_cast<size_t>(s.n * s.c));
    std::vector<int64_t> arg(kind == PoolKind::kMax ? out.size() : 0);
    for (int64_t nc = 0; nc < s.n * s.c; ++nc) {
      const T* src = px + nc * hw;
      if (kind == PoolKind::kAvg) {
        T acc = 0;
        for (int64_t i = 0; i < hw; ++i) acc += src[i];
        out[nc] = acc / T(hw);
      } else {
        int64_t best = 0;
        for (int64_t i = 1; i < hw; ++i)
          if (src[i] > src[best]) best = i;  // ties keep the first position
        out[nc] = src[best];
        arg[nc] = best;
      }
    }
    return make_result<T>({s.n, s.c, 1, 1}, std::move(out), {x}, "pool2d",
                          [s, hw, kind, arg](const std::vector<T>& g, const auto& sink) {
                            if (std::vector<T>* gx = sink(0)) {
                              for (int64_t nc = 0; nc < s.n * s.c; ++nc) {
                                if (kind == PoolKind::kAvg) {
                                  const T v = g[nc] / T(hw);
                                  for (int64_t i = 0; i < hw; ++i) (*gx)[nc * hw + i] += v;
                                } else {
                                  (*gx)[nc * hw + arg[nc]] += g[nc];
                                }
                              }
                            }
                          });
  }

  if (k < 1) throw std::invalid_argument("pool2d: empty window");
  if (stride < 1) stride = k;
  if (s.h < k || s.w < k) throw std::invalid_argument("pool2d: window exceeds input " + s.str());
  const int64_t oh = (s.h - k) / stride + 1;
  const int64_t ow = (s.w - k) / stride + 1;
  std::vector<T> out(static_cast<size_t>(s.n * s.c * oh * ow));
  std::vector<int64_t> arg(kind == PoolKind::kMax ? out.size() : 0);
  for (int64_t nc = 0; nc < s.n * s.c; ++nc) {
    const T* src = px + nc * s.h * s.w;
    for (int64_t y = 0; y < oh; ++y)
      for (int64_t xo = 0; xo < ow; ++xo) {
        const int64_t oidx = (nc * oh + y) * ow + xo;
        if (kind == PoolKind::kAvg) {
          T acc = 0;
          for (int64_t ky = 0; ky < k; ++ky)
            for (int64_t kx = 0; kx < k; ++kx)
              acc += src[(y * stride + ky) * s.w + xo * stride + kx];
          out[oidx] = acc / T(k * k);
        } else {
          int64_t best = (y * stride) * s.w + xo * stride;
          for (int64_t ky = 0; ky < k; ++ky)
            for (int64_t kx = 0; kx < k; ++kx) {
              const int64_t i = (y * stride + ky) * s.w + xo * stride + kx;
              if (src[i] > src[best]) best = i;
            }
          out[oidx] = src[best];
          arg[oidx] = best;
        }
      }
  }
  Shape4 os{s.n, s.c, oh, ow};
  return make_result<T>(
      os, std::move(out), {x}, "pool2d",
      [s, os, kind, k, stride, arg](const std::vector<T>& g, const auto& sink) {
        if (std::vector<T>* gx = sink(0)) {
          for (int64_t nc = 0; nc < s.n * s.c; ++nc)
            for (int64_t y = 0; y < os.h; ++y)
              for (int64_t xo = 0; xo < os.w; ++xo) {
                const int64_t oidx = (nc * os.h + y) * os.w + xo;
                if (kind == PoolKind::kAvg) {
                  const T v = g[oidx] / T(k * k);
                  for (int64_t ky = 0; ky < k; ++ky)
                    for (int64_t kx = 0; kx < k; ++kx)
                      (*gx)[nc * s.h * s.w + (y * stride + ky) * s.w + xo * stride + kx] += v;
                } else {
                  (*gx)[nc * s.h * s.w + arg[oidx]] += g[oidx];
                }
              }
        }
      });
}

template <class T>
Tensor<T> channel_stats(const Tensor<T>& x, StatKind kind) {
  const Shape4 s = x.shape();
  if (s.c < 1) throw std::invalid_argument("channel_stats: no channels");
  const int64_t hw = s.h * s.w;
  std::vector<T> out(static_cast<size_t>(s.n * hw));
  std::vector<int64_t> arg(kind == StatKind::kMax ? out.size() : 0);
  const T* px = x.data();
  for (int64_t n = 0; n < s.n; ++n)
    for (int64_t i = 0; i < hw; ++i) {
      const int64_t oidx = n * hw + i;
      if (kind == StatKind::kMean) {
        T acc = 0;
        for (int64_t c = 0; c < s.c; ++c) acc += px[(n * s.c + c) * hw + i];
        out[oidx] = acc / T(s.c);
      } else {
        int64_t best = 0;
        for (int64_t c = 1; c < s.c; ++c)
          if (px[(n * s.c + c) * hw + i] > px[(n * s.c + best) * hw + i]) best = c;
        out[oidx] = px[(n * s.c + best) * hw + i];
        arg[oidx] = best;
      }
    }
  return make_result<T>({s.n, 1, s.h, s.w}, std::move(out), {x}, "channel_stats",
                        [s, hw, kind, arg](const std::vector<T>& g, const auto& sink) {
                          if (std::vector<T>* gx = sink(0)) {
                            for (int64_t n = 0; n < s.n; ++n)
                              for (int64_t i = 0; i < hw; ++i) {
                                const int64_t oidx = n * hw + i;
                                if (kind == StatKind::kMean) {
                                  const T v = g[oidx] / T(s.c);
                                  for (int64_t c = 0; c < s.c; ++c)
                                    (*gx)[(n * s.c + c) * hw + i] += v;
                                } else {
                                  (*gx)[(n * s.c + arg[oidx]) * hw + i] += g[oidx];
                                }
                              }
                          }
                        });
}

namespace {

// bilinear sample positions for one output coordinate (align_corners = false)
struct Lerp {
  int64_t i0, i1;
  double w1;  // weight on i1; i0 carries 1-w1
};

inline Lerp lerp_coords(int64_t dst, int64_t src_dim, double scale) {
  const double src = (double(dst) + 0.5) * scale - 0.5;
  double flo = std::floor(src);
  int64_t i0 = static_cast<int64_t>(flo);
  double w1 = src - flo;
  int64_t i1 = i0 + 1;
  if (i0 < 0) { i0 = 0; }
  if (i1 > src_dim - 1) { i1 = src_dim - 1; }
  if (i0 > src_dim - 1) { i0 = src_dim - 1; }
  return {i0, i1, w1};
}

}  // namespace

template <class T>
Tensor<T> resize2d(const Tensor<T>& x, ResizeFactor factor, ResizeMode mode) {
  const Shape4 s = x.shape();
  const bool down = factor == ResizeFactor::kDown2;
  if (down && (s.h % 2 != 0 || s.w % 2 != 0)) {
    throw std::invalid_argument("resize2d: down2 requires even spatial dims, got " + s.str());
  }
  const int64_t oh = down ? s.h / 2 : s.h * 2;
  const int64_t ow = down ? s.w / 2 : s.w * 2;
  Shape4 os{s.n, s.c, oh, ow};
  const int64_t hw = s.h * s.w;
  const int64_t ohw = oh * ow;
  std::vector<T> out(static_cast<size_t>(os.numel()));
  const T* px = x.data();

  if (mode == ResizeMode::kNearest) {
    for (int64_t nc = 0; nc < s.n * s.c; ++nc)
      for (int64_t y = 0; y < oh; ++y)
        for (int64_t xo = 0; xo < ow; ++xo) {
          const int64_t sy = down ? y * 2 : y / 2;
          const int64_t sx = down ? xo * 2 : xo / 2;
          out[nc * ohw + y * ow + xo] = px[nc * hw + sy * s.w + sx];
        }
    return make_result<T>(os, std::move(out), {x}, "resize2d",
                          [s, os, hw, ohw, down](const std::vector<T>& g, const auto& sink) {
                            if (std::vector<T>* gx = sink(0)) {
                              for (int64_t nc = 0; nc < s.n * s.c; ++nc)
                                for (int64_t y = 0; y < os.h; ++y)
                                  for (int64_t xo = 0; xo < os.w; ++xo) {
                                    const int64_t sy = down ? y * 2 : y / 2;
                                    const int64_t sx = down ? xo * 2 : xo / 2;
                                    (*gx)[nc * hw + sy * s.w + sx] +=
                                        g[nc * ohw + y * os.w + xo];
                                  }
                            }
                          });
  }

  // bilinear
  if (down) {
    // exact 2x2 block mean (the align_corners=false kernel at scale 2)
    for (int64_t nc = 0; nc < s.n * s.c; ++nc)
      for (int64_t y = 0; y < oh; ++y)
        for (int64_t xo = 0; xo < ow; ++xo) {
          const T* src = px + nc * hw;
          const int64_t y2 = 2 * y, x2 = 2 * xo;
          out[nc * ohw + y * ow + xo] =
              (src[y2 * s.w + x2] + src[y2 * s.w + x2 + 1] + src[(y2 + 1) * s.w + x2] +
               src[(y2 + 1) * s.w + x2 + 1]) /
              T(4);
        }
    return make_result<T>(os, std::move(out), {x}, "resize2d",
                          [s, os, hw, ohw](const std::vector<T>& g, const auto& sink) {
                            if (std::vector<T>* gx = sink(0)) {
                              for (int64_t nc = 0; nc < s.n * s.c; ++nc)
                                for (int64_t y = 0; y < os.h; ++y)
                                  for (int64_t xo = 0; xo < os.w; ++xo) {
                                    const T v = g[nc * ohw + y * os.w + xo] / T(4);
                                    const int64_t y2 = 2 * y, x2 = 2 * xo;
                                    (*gx)[nc * hw + y2 * s.w + x2] += v;
                                    (*gx)[nc * hw + y2 * s.w + x2 + 1] += v;
                                    (*gx)[nc * hw + (y2 + 1) * s.w + x2] += v;
                                    (*gx)[nc * hw + (y2 + 1) * s.w + x2 + 1] += v;
                                  }
                            }
                          });
  }

  for (int64_t nc = 0; nc < s.n * s.c; ++nc)
    for (int64_t y = 0; y < oh; ++y) {
      const Lerp ly = lerp_coords(y, s.h, 0.5);
      for (int64_t xo = 0; xo < ow; ++xo) {
        const Lerp lx = lerp_coords(xo, s.w, 0.5);
        const T* src = px + nc * hw;
        const double v = (1 - ly.w1) * (1 - lx.w1) * double(src[ly.i0 * s.w + lx.i0]) +
                         (1 - ly.w1) * lx.w1 * double(src[ly.i0 * s.w + lx.i1]) +
                         ly.w1 * (1 - lx.w1) * double(src[ly.i1 * s.w + lx.i0]) +
                         ly.w1 * lx.w1 * double(src[ly.i1 * s.w + lx.i1]);
        out[nc * ohw + y * ow + xo] = T(v);
      }
    }
  return make_result<T>(
      os, std::move(out), {x}, "resize2d",
      [s, os, hw, ohw](const std::vector<T>& g, const auto& sink) {
        if (std::vector<T>* gx = sink(0)) {
          for (int64_t nc = 0; nc < s.n * s.c; ++nc)
            for (int64_t y = 0; y < os.h; ++y) {
              const Lerp ly = lerp_coords(y, s.h, 0.5);
              for (int64_t xo = 0; xo < os.w; ++xo) {
                const Lerp lx = lerp_coords(xo, s.w, 0.5);
                const T gv = g[nc * ohw + y * os.w + xo];
                (*gx)[nc * hw + ly.i0 * s.w + lx.i0] += T((1 - ly.w1) * (1 - lx.w1)) * gv;
                (*gx)[nc * hw + ly.i0 * s.w + lx.i1] += T((1 - ly.w1) * lx.w1) * gv;
                (*gx)[nc * hw + ly.i1 * s.w + lx.i0] += T(ly.w1 * (1 - lx.w1)) * gv;
                (*gx)[nc * hw + ly.i1 * s.w + lx.i1] += T(ly.w1 * lx.w1) * gv;
              }
            }
        }
      });
}

#define IGDH_INSTANTIATE_POOL(T)                                                   \
  template Tensor<T> pool2d<T>(const Tensor<T>&, PoolKind, PoolScope, int64_t,    \
                               int64_t);                                           \
  template Tensor<T> channel_stats<T>(const Tensor<T>&, StatKind);                \
  template Tensor<T> resize2d<T>(const Tensor<T>&, ResizeFactor, ResizeMode);

IGDH_INSTANTIATE_POOL(float)
IGDH_INSTANTIATE_POOL(double)

}  // namespace igdh
