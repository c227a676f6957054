#include <array>
#include <stdexcept>
#include <string>

#include "igdh/ops.hpp"

namespace igdh {

namespace {

// mirror-fold an out-of-range coordinate into [0, d); d == 1 degenerates to replicate
inline int64_t reflect_fold(int64_t i, int64_t d) {
  if (d == 1) return 0;
  const int64_t p = 2 * d - 2;
  int64_t m = i % p;
  if (m < 0) m += p;
  return m < d ? m : p - m;
}

inline int64_t wrap(int64_t i, int64_t d) {
  int64_t m = i % d;
  return m < 0 ? m + d : m;
}

}  // namespace

template <class T>
Tensor<T> reshape(const Tensor<T>& x, const Shape4& shape) {
  if (shape.numel() != x.numel()) {
    throw std::invalid_argument("reshape: numel mismatch " + x.shape().str() + " -> " +
                                shape.str());
  }
  std::vector<T> out(x.data(), x.data() + x.numel());
  const Shape4 in_shape = x.shape();
  return make_result<T>(shape, std::move(out), {x}, "reshape",
                        [in_shape](const std::vector<T>& g, const auto& sink) {
                          if (std::vector<T>* gx = sink(0)) {
                            for (size_t i = 0; i < g.size(); ++i) (*gx)[i] += g[i];
                          }
                        });
}

template <class T>
Tensor<T> permute(const Tensor<T>& x, const std::array<int, 4>& axes) {
  std::array<bool, 4> seen{false, false, false, false};
  for (int a : axes) {
    if (a < 0 || a > 3 || seen[a]) throw std::invalid_argument("permute: invalid axes");
    seen[a] = true;
  }
  const Shape4 s = x.shape();
  const int64_t id[4] = {s.n, s.c, s.h, s.w};
  Shape4 os{id[axes[0]], id[axes[1]], id[axes[2]], id[axes[3]]};
  const int64_t istr[4] = {s.c * s.h * s.w, s.h * s.w, s.w, 1};

  std::vector<T> out(static_cast<size_t>(s.numel()));
  const T* px = x.data();
  int64_t o = 0;
  for (int64_t a = 0; a < os.n; ++a)
    for (int64_t b = 0; b < os.c; ++b)
      for (int64_t c = 0; c < os.h; ++c)
        for (int64_t d = 0; d < os.w; ++d, ++o) {
          const int64_t oc[4] = {a, b, c, d};
          int64_t i = 0;
          for (int k = 0; k < 4; ++k) i += oc[k] * istr[axes[k]];
          out[o] = px[i];
        }

  return make_result<T>(os, std::move(out), {x}, "permute",
                        [os, axes, istr0 = istr[0], istr1 = istr[1], istr2 = istr[2],
                         istr3 = istr[3]](const std::vector<T>& g, const auto& sink) {
                          if (std::vector<T>* gx = sink(0)) {
                            const int64_t istr[4] = {istr0, istr1, istr2, istr3};
                            int64_t o = 0;
                            for (int64_t a = 0; a < os.n; ++a)
                              for (int64_t b = 0; b < os.c; ++b)
                                for (int64_t c = 0; c < os.h; ++c)
                                  for (int64_t d = 0; d < os.w; ++d, ++o) {
                                    const int64_t oc[4] = {a, b, c, d};
                                    int64_t i = 0;
                                    for (int k = 0; k < 4; ++k) i += oc[k] * istr[axes[k]];
                                    (*gx)[i] += g[o];
                                  }
                          }
                        });
}

template <class T>
Tensor<T> concat_channels(const Tensor<T>& a, const Tensor<T>& b) {
  const Shape4 sa = a.shape();
  const Shape4 sb = b.shape();
  if (sa.n != sb.n || sa.h != sb.h || sa.w != sb.w) {
    throw std::invalid_argument("concat_channels: " + sa.str() + " vs " + sb.str());
  }
  Shape4 os{sa.n, sa.c + sb.c, sa.h, sa.w};
  std::vector<T> out(static_cast<size_t>(os.numel()));
  const int64_t hw = sa.h * sa.w;
  const T* pa = a.data();
  const T* pb = b.data();
  for (int64_t n = 0; n < sa.n; ++n) {
    T* dst = out.data() + n * os.c * hw;
    std::copy(pa + n * sa.c * hw, pa + (n + 1) * sa.c * hw, dst);
    std::copy(pb + n * sb.c * hw, pb + (n + 1) * sb.c * hw, dst + sa.c * hw);
  }
  return make_result<T>(os, std::move(out), {a, b}, "concat_channels",
                        [sa, sb, os, hw](const std::vector<T>& g, const auto& sink) {
                          std::vector<T>* ga = sink(0);
                          std::vector<T>* gb = sink(1);
                          for (int64_t n = 0; n < sa.n; ++n) {
                            const T* src = g.data() + n * os.c * hw;
                            if (ga)
                              for (int64_t i = 0; i < sa.c * hw; ++i)
                                (*ga)[n * sa.c * hw + i] += src[i];
                            if (gb)
                              for (int64_t i = 0; i < sb.c * hw; ++i)
                                (*gb)[n * sb.c * hw + i] += src[sa.c * hw + i];
                          }
                        });
}

template <class T>
Tensor<T> slice_channels(const Tensor<T>& x, int64_t c0, int64_t c1) {
  const Shape4 s = x.shape();
  if (c0 < 0 || c1 > s.c || c0 >= c1) {
    throw std::invalid_argument("slice_channels: range [" + std::to_string(c0) + "," +
                                std::to_string(c1) + ") for " + s.str());
  }
  Shape4 os{s.n, c1 - c0, s.h, s.w};
  const int64_t hw = s.h * s.w;
  std::vector<T> out(static_cast<size_t>(os.numel()));
  const T* px = x.data();
  for (int64_t n = 0; n < s.n; ++n) {
    std::copy(px + (n * s.c + c0) * hw, px + (n * s.c + c1) * hw,
              out.data() + n * os.c * hw);
  }
  return make_result<T>(os, std::move(out), {x}, "slice_channels",
                        [s, os, c0, hw](const std::vector<T>& g, const auto& sink) {
                          if (std::vector<T>* gx = sink(0)) {
                            for (int64_t n = 0; n < s.n; ++n)
                              for (int64_t i = 0; i < os.c * hw; ++i)
                                (*gx)[(n * s.c + c0) * hw + i] += g[n * os.c * hw + i];
                          }
                        });
}

template <class T>
Tensor<T> reflect_pad2d(const Tensor<T>& x, int64_t top, int64_t bottom, int64_t left,
                        int64_t right) {
  if (top < 0 || bottom < 0 || left < 0 || right < 0) {
    throw std::invalid_argument("reflect_pad2d: negative padding");
  }
  const Shape4 s = x.shape();
  Shape4 os{s.n, s.c, s.h + top + bottom, s.w + left + right};
  std::vector<T> out(static_cast<size_t>(os.numel()));
  const T* px = x.data();
  int64_t o = 0;
  for (int64_t nc = 0; nc < s.n * s.c; ++nc)
    for (int64_t h = 0; h < os.h; ++h) {
      const int64_t sh = reflect_fold(h - top, s.h);
      for (int64_t w = 0; w < os.w; ++w, ++o) {
        out[o] = px[(nc * s.h + sh) * s.w + reflect_fold(w - left, s.w)];
      }
    }
  return make_result<T>(os, std::move(out), {x}, "reflect_pad2d",
                        [s, os, top, left](const std::vector<T>& g, const auto& sink) {
                          if (std::vector<T>* gx = sink(0)) {
                            int64_t o = 0;
                            for (int64_t nc = 0; nc < s.n * s.c; ++nc)
                              for (int64_t h = 0; h < os.h; ++h) {
                                const int64_t sh = reflect_fold(h - top, s.h);
                                for (int64_t w = 0; w < os.w; ++w, ++o) {
                                  (*gx)[(nc * s.h + sh) * s.w +
                                        reflect_fold(w - left, s.w)] += g[o];
                                }
                              }
                          }
                        });
}

template <class T>
Tensor<T> crop2d(const Tensor<T>& x, int64_t top, int64_t left, int64_t h, int64_t w) {
  const Shape4 s = x.shape();
  if (top < 0 || left < 0 || h <= 0 || w <= 0 || top + h > s.h || left + w > s.w) {
    throw std::invalid_argument("crop2d: window out of range for " + s.str());
  }
  Shape4 os{s.n, s.c, h, w};
  std::vector<T> out(static_cast<size_t>(os.numel()));
  const T* px = x.data();
  int64_t o = 0;
  for (int64_t nc = 0; nc < s.n * s.c; ++nc)
    for (int64_t y = 0; y < h; ++y)
      for (int64_t xw = 0; xw < w; ++xw, ++o) {
        out[o] = px[(nc * s.h + top + y) * s.w + left + xw];
      }
  return make_result<T>(os, std::move(out), {x}, "crop2d",
                        [s, top, left, h, w](const std::vector<T>& g, const auto& sink) {
                          if (std::vector<T>* gx = sink(0)) {
                            int64_t o = 0;
                            for (int64_t nc = 0; nc < s.n * s.c; ++nc)
                              for (int64_t y = 0; y < h; ++y)
                                for (int64_t xw = 0; xw < w; ++xw, ++o) {
                                  (*gx)[(nc * s.h + top + y) * s.w + left + xw] += g[o];
                                }
                          }
                        });
}

template <class T>
Tensor<T> roll2d(const Tensor<T>& x, int64_t dy, int64_t dx) {
  const Shape4 s = x.shape();
  std::vector<T> out(static_cast<size_t>(s.numel()));
  const T* px = x.data();
  int64_t o = 0;
  for (int64_t nc = 0; nc < s.n * s.c; ++nc)
    for (int64_t h = 0; h < s.h; ++h) {
      const int64_t sh = wrap(h - dy, s.h);
      for (int64_t w = 0; w < s.w; ++w, ++o) {
        out[o] = px[(nc * s.h + sh) * s.w + wrap(w - dx, s.w)];
      }
    }
  return make_result<T>(s, std::move(out), {x}, "roll2d",
                        [s, dy, dx](const std::vector<T>& g, const auto& sink) {
                          if (std::vector<T>* gx = sink(0)) {
                            int64_t o = 0;
                            for (int64_t nc = 0; nc < s.n * s.c; ++nc)
                              for (int64_t h = 0; h < s.h; ++h) {
                                const int64_t sh = wrap(h - dy, s.h);
                                for (int64_t w = 0; w < s.w; ++w, ++o) {
                                  (*gx)[(nc * s.h + sh) * s.w + wrap(w - dx, s.w)] += g[o];
                                }
                              }
                          }
                        });
}

template <class T>
Tensor<T> broadcast_n(const Tensor<T>& x, int64_t n) {
  const Shape4 s = x.shape();
  if (s.n != 1) throw std::invalid_argument("broadcast_n: batch dim must be 1, got " + s.str());
  if (n < 1) throw std::invalid_argument("broadcast_n: n must be positive");
  Shape4 os{n, s.c, s.h, s.w};
  const int64_t chw = s.c * s.h * s.w;
  std::vector<T> out(static_cast<size_t>(os.numel()));
  for (int64_t b = 0; b < n; ++b) {
    std::copy(x.data(), x.data() + chw, out.data() + b * chw);
  }
  return make_result<T>(os, std::move(out), {x}, "broadcast_n",
                        [n, chw](const std::vector<T>& g, const auto& sink) {
                          if (std::vector<T>* gx = sink(0)) {
                            for (int64_t b = 0; b < n; ++b)
                              for (int64_t i = 0; i < chw; ++i) (*gx)[i] += g[b * chw + i];
                          }
                        });
}

// (N,C,H,W) -> (N*nWindows, 1, window*window, C); tokens scan each window row-major
template <class T>
Tensor<T> window_split(const Tensor<T>& x, int64_t window) {
  const Shape4 s = x.shape();
  if (window < 1 || s.h % window != 0 || s.w % window != 0) {
    throw std::invalid_argument("window_split: spatial dims " + s.str() +
                                " not divisible by window " + std::to_string(window));
  }
  const int64_t nwh = s.h / window;
  const int64_t nww = s.w / window;
  const int64_t tokens = window * window;
  Shape4 os{s.n * nwh * nww, 1, tokens, s.c};
  std::vector<T> out(static_cast<size_t>(os.numel()));
  const T* px = x.data();
  for (int64_t n = 0; n < s.n; ++n)
    for (int64_t c = 0; c < s.c; ++c)
      for (int64_t h = 0; h < s.h; ++h)
        for (int64_t w = 0; w < s.w; ++w) {
          const int64_t win = (n * nwh + h / window) * nww + w / window;
          const int64_t t = (h % window) * window + (w % window);
          out[(win * tokens + t) * s.c + c] = px[((n * s.c + c) * s.h + h) * s.w + w];
        }
  return make_result<T>(
      os, std::move(out), {x}, "window_split",
      [s, window, nwh, nww, tokens](const std::vector<T>& g, const auto& sink) {
        if (std::vector<T>* gx = sink(0)) {
          for (int64_t n = 0; n < s.n; ++n)
            for (int64_t c = 0; c < s.c; ++c)
              for (int64_t h = 0; h < s.h; ++h)
                for (int64_t w = 0; w < s.w; ++w) {
                  const int64_t win = (n * nwh + h / window) * nww + w / window;
                  const int64_t t = (h % window) * window + (w % window);
                  (*gx)[((n * s.c + c) * s.h + h) * s.w + w] +=
                      g[(win * tokens + t) * s.c + c];
                }
        }
      });
}

template <class T>
Tensor<T> window_unsplit(const Tensor<T>& windows, int64_t window, const Shape4& spatial) {
  const Shape4 s = windows.shape();
  const int64_t nwh = spatial.h / window;
  const int64_t nww = spatial.w / window;
  const int64_t tokens = window * window;
  if (window < 1 || spatial.h % window != 0 || spatial.w % window != 0 ||
      s.n != spatial.n * nwh * nww || s.c != 1 || s.h != tokens || s.w != spatial.c) {
    throw std::invalid_argument("window_unsplit: windows " + s.str() +
                                " incompatible with spatial " + spatial.str());
  }
  std::vector<T> out(static_cast<size_t>(spatial.numel()));
  const T* px = windows.data();
  for (int64_t n = 0; n < spatial.n; ++n)
    for (int64_t c = 0; c < spatial.c; ++c)
      for (int64_t h = 0; h < spatial.h; ++h)
        for (int64_t w = 0; w < spatial.w; ++w) {
          const int64_t win = (n * nwh + h / window) * nww + w / window;
          const int64_t t = (h % window) * window + (w % window);
          out[((n * spatial.c + c) * spatial.h + h) * spatial.w + w] =
              px[(win * tokens + t) * spatial.c + c];
        }
  return make_result<T>(
      spatial, std::move(out), {windows}, "window_unsplit",
      [spatial, window, nwh, nww, tokens](const std::vector<T>& g, const auto& sink) {
        if (std::vector<T>* gx = sink(0)) {
          for (int64_t n = 0; n < spatial.n; ++n)
            for (int64_t c = 0; c < spatial.c; ++c)
              for (int64_t h = 0; h < spatial.h; ++h)
                for (int64_t w = 0; w < spatial.w; ++w) {
                  const int64_t win = (n * nwh + h / window) * nww + w / window;
                  const int64_t t = (h % window) * window + (w % window);
                  (*gx)[(win * tokens + t) * spatial.c + c] +=
                      g[((n * spatial.c + c) * spatial.h + h) * spatial.w + w];
                }
        }
      });
}

std::vector<int64_t> rel_bias_index(int64_t window) {
  if (window < 1) throw std::invalid_argument("rel_bias_index: window must be positive");
  const int64_t tokens = window * window;
  const int64_t span = 2 * window - 1;
  std::vector<int64_t> idx(static_cast<size_t>(tokens * tokens));
  for (int64_t i = 0; i < tokens; ++i) {
    const int64_t yi = i / window, xi = i % window;
    for (int64_t j = 0; j < tokens; ++j) {
      const int64_t yj = j / window, xj = j % window;
      idx[i * tokens + j] = (yi - yj + window - 1) * span + (xi - xj + window - 1);
    }
  }
  return idx;
}

// table (heads, (2w-1)^2, 1, 1) gathered through idx into (1, heads, T, T)
template <class T>
Tensor<T> rel_bias_expand(const Tensor<T>& table, const std::vector<int64_t>& idx,
                          int64_t tokens) {
  const Shape4 s = table.shape();
  if (s.h != 1 || s.w != 1 || static_cast<int64_t>(idx.size()) != tokens * tokens) {
    throw std::invalid_argument("rel_bias_expand: bad table " + s.str() + " or index size");
  }
  for (int64_t v : idx) {
    if (v < 0 || v >= s.c) throw std::invalid_argument("rel_bias_expand: index out of range");
  }
  Shape4 os{1, s.n, tokens, tokens};
  std::vector<T> out(static_cast<size_t>(os.numel()));
  const T* pt = table.data();
  for (int64_t h = 0; h < s.n; ++h)
    for (int64_t ij = 0; ij < tokens * tokens; ++ij) {
      out[h * tokens * tokens + ij] = pt[h * s.c + idx[ij]];
    }
  return make_result<T>(os, std::move(out), {table}, "rel_bias_expand",
                        [s, idx, tokens](const std::vector<T>& g, const auto& sink) {
                          if (std::vector<T>* gt = sink(0)) {
                            for (int64_t h = 0; h < s.n; ++h)
                              for (int64_t ij = 0; ij < tokens * tokens; ++ij) {
                                (*gt)[h * s.c + idx[ij]] += g[h * tokens * tokens + ij];
                              }
                          }
                        });
}

#define IGDH_INSTANTIATE_SHAPE(T)                                                        \
  template Tensor<T> reshape<T>(const Tensor<T>&, const Shape4&);                        \
  template Tensor<T> permute<T>(const Tensor<T>&, const std::array<int, 4>&);            \
  template Tensor<T> concat_channels<T>(const Tensor<T>&, const Tensor<T>&);             \
  template Tensor<T> slice_channels<T>(const Tensor<T>&, int64_t, int64_t);              \
  template Tensor<T> reflect_pad2d<T>(const Tensor<T>&, int64_t, int64_t, int64_t,      \
                                      int64_t);                                          \
  template Tensor<T> crop2d<T>(const Tensor<T>&, int64_t, int64_t, int64_t, int64_t);   \
  template Tensor<T> roll2d<T>(const Tensor<T>&, int64_t, int64_t);                     \
  template Tensor<T> broadcast_n<T>(const Tensor<T>&, int64_t);                         \
  template Tensor<T> window_split<T>(const Tensor<T>&, int64_t);                        \
  template Tensor<T> window_unsplit<T>(const Tensor<T>&, int64_t, const Shape4&);       \
  template Tensor<T> rel_bias_expand<T>(const Tensor<T>&, const std::vector<int64_t>&,  \
                                        int64_t);

IGDH_INSTANTIATE_SHAPE(float)
IGDH_INSTANTIATE_SHAPE(double)

}  // namespace igdh
