#include <atomic>
#include <limits>
#include <cmath>
#include <stdexcept>
#include <string>

#include "igdh/ops.hpp"

namespace igdh {

namespace {

std::atomic<uint64_t> g_degenerate_sigma{0};

// allowed broadcast patterns for the small side of a binary op
enum class BPat { kSame, kChan, kPix, kScalar };

BPat broadcast_pattern(const Shape4& a, const Shape4& b, const char* op) {
  if (a == b) return BPat::kSame;
  if (b.n == 1 && b.c == 1 && b.h == 1 && b.w == 1) return BPat::kScalar;
  if (b.n == a.n && b.c == a.c && b.h == 1 && b.w == 1) return BPat::kChan;
  if (b.n == a.n && b.c == 1 && b.h == a.h && b.w == a.w) return BPat::kPix;
  throw std::invalid_argument(std::string(op) + ": cannot broadcast " + b.str() +
                              " against " + a.str());
}

// linear index into the broadcast operand for output position (n,c,h,w)
inline int64_t bcast_index(BPat p, const Shape4& s, int64_t n, int64_t c, int64_t h,
                           int64_t w) {
  switch (p) {
    case BPat::kSame:
      return ((n * s.c + c) * s.h + h) * s.w + w;
    case BPat::kChan:
      return n * s.c + c;
    case BPat::kPix:
      return (n * s.h + h) * s.w + w;
    case BPat::kScalar:
      return 0;
  }
  return 0;
}

enum class BinOp { kAdd, kSub, kMul, kDiv };

template <class T>
Tensor<T> binary_op(const Tensor<T>& a, const Tensor<T>& b, BinOp kind, const char* name) {
  // add/mul commute, so let the broadcast side be either operand
  if ((kind == BinOp::kAdd || kind == BinOp::kMul) && a.numel() < b.numel()) {
    return binary_op(b, a, kind, name);
  }
  const Shape4 sa = a.shape();
  const Shape4 sb = b.shape();
  const BPat pat = broadcast_pattern(sa, sb, name);

  std::vector<T> out(static_cast<size_t>(sa.numel()));
  const T* pa = a.data();
  const T* pb = b.data();
  int64_t i = 0;
  for (int64_t n = 0; n < sa.n; ++n)
    for (int64_t c = 0; c < sa.c; ++c)
      for (int64_t h = 0; h < sa.h; ++h)
        for (int64_t w = 0; w < sa.w; ++w, ++i) {
          const T bv = pb[bcast_index(pat, sa, n, c, h, w)];
          switch (kind) {
            case BinOp::kAdd: out[i] = pa[i] + bv; break;
            case BinOp::kSub: out[i] = pa[i] - bv; break;
            case BinOp::kMul: out[i] = pa[i] * bv; break;
            case BinOp::kDiv: out[i] = pa[i] / bv; break;
          }
        }

  auto a_data = a.impl();
  auto b_data = b.impl();
  return make_result<T>(
      sa, std::move(out), {a, b}, name,
      [sa, pat, kind, a_data, b_data](const std::vector<T>& g, const auto& sink) {
        std::vector<T>* ga = sink(0);
        std::vector<T>* gb = sink(1);
        const T* pa = a_data->data.data();
        const T* pb = b_data->data.data();
        int64_t i = 0;
        for (int64_t n = 0; n < sa.n; ++n)
          for (int64_t c = 0; c < sa.c; ++c)
            for (int64_t h = 0; h < sa.h; ++h)
              for (int64_t w = 0; w < sa.w; ++w, ++i) {
                const int64_t bi = bcast_index(pat, sa, n, c, h, w);
                switch (kind) {
                  case BinOp::kAdd:
                    if (ga) (*ga)[i] += g[i];
                    if (gb) (*gb)[bi] += g[i];
                    break;
                  case BinOp::kSub:
                    if (ga) (*ga)[i] += g[i];
                    if (gb) (*gb)[bi] -= g[i];
                    break;
                  case BinOp::kMul:
                    if (ga) (*ga)[i] += g[i] * pb[bi];
                    if (gb) (*gb)[bi] += g[i] * pa[i];
                    break;
                  case BinOp::kDiv: {
                    const T bv = pb[bi];
                    if (ga) (*ga)[i] += g[i] / bv;
                    if (gb) (*gb)[bi] -= g[i] * pa[i] / (bv * bv);
                    break;
                  }
                }
              }
      });
}

template <class T, class Fwd, class Dfn>
Tensor<T> unary_op(const Tensor<T>& x, const char* name, Fwd fwd, Dfn dfn) {
  std::vector<T> out(static_cast<size_t>(x.numel()));
  const T* px = x.data();
  for (size_t i = 0; i < out.size(); ++i) out[i] = fwd(px[i]);
  auto x_data = x.impl();
  return make_result<T>(x.shape(), std::move(out), {x}, name,
                        [x_data, dfn](const std::vector<T>& g, const auto& sink) {
                          if (std::vector<T>* gx = sink(0)) {
                            const T* px = x_data->data.data();
                            for (size_t i = 0; i < g.size(); ++i) {
                              (*gx)[i] += g[i] * dfn(px[i]);
                            }
                          }
                        });
}

}  // namespace

uint64_t degenerate_sigma_count() { return g_degenerate_sigma.load(); }
void reset_degenerate_sigma_count() { g_degenerate_sigma.store(0); }

template <class T>
Tensor<T> add(const Tensor<T>& a, const Tensor<T>& b) {
  return binary_op(a, b, BinOp::kAdd, "add");
}
template <class T>
Tensor<T> sub(const Tensor<T>& a, const Tensor<T>& b) {
  return binary_op(a, b, BinOp::kSub, "sub");
}
template <class T>
Tensor<T> mul(const Tensor<T>& a, const Tensor<T>& b) {
  return binary_op(a, b, BinOp::kMul, "mul");
}
template <class T>
Tensor<T> div(const Tensor<T>& a, const Tensor<T>& b) {
  return binary_op(a, b, BinOp::kDiv, "div");
}

template <class T>
Tensor<T> neg(const Tensor<T>& x) {
  return unary_op(x, "neg", [](T v) { return -v; }, [](T) { return T(-1); });
}

template <class T>
Tensor<T> abs(const Tensor<T>& x) {
  return unary_op(
      x, "abs", [](T v) { return v < T(0) ? -v : v; },
      [](T v) { return v > T(0) ? T(1) : (v < T(0) ? T(-1) : T(0)); });
}

template <class T>
Tensor<T> exp(const Tensor<T>& x) {
  return unary_op(x, "exp", [](T v) { return std::exp(v); },
                  [](T v) { return std::exp(v); });
}

template <class T>
Tensor<T> sigmoid(const Tensor<T>& x) {
  auto sg = [](T v) {
    // evaluate on the negative half-axis only, so exp never overflows; pin
    // saturated values just inside (0,1) so the open-interval contract holds
    T s;
    if (v >= T(0)) {
      s = T(1) / (T(1) + std::exp(-v));
    } else {
      const T e = std::exp(v);
      s = e / (T(1) + e);
    }
    if (s >= T(1)) s = T(1) - std::numeric_limits<T>::epsilon() / T(2);
    if (s <= T(0)) s = std::numeric_limits<T>::min();
    return s;
  };
  return unary_op(x, "sigmoid", sg, [sg](T v) {
    const T s = sg(v);
    return s * (T(1) - s);
  });
}

template <class T>
Tensor<T> relu(const Tensor<T>& x) {
  return unary_op(x, "relu", [](T v) { return v > T(0) ? v : T(0); },
                  [](T v) { return v > T(0) ? T(1) : T(0); });
}

template <class T>
Tensor<T> gelu(const Tensor<T>& x) {
  constexpr double kInvSqrt2 = 0.7071067811865475244;
  constexpr double kInvSqrt2Pi = 0.3989422804014326779;
  return unary_op(
      x, "gelu",
      [](T v) { return T(0.5) * v * (T(1) + T(std::erf(double(v) * kInvSqrt2))); },
      [](T v) {
        const double cdf = 0.5 * (1.0 + std::erf(double(v) * kInvSqrt2));
        const double pdf = kInvSqrt2Pi * std::exp(-0.5 * double(v) * double(v));
        return T(cdf + double(v) * pdf);
      });
}

template <class T>
Tensor<T> scale(const Tensor<T>& x, T a) {
  return unary_op(x, "scale", [a](T v) { return v * a; }, [a](T) { return a; });
}

template <class T>
Tensor<T> add_scalar(const Tensor<T>& x, T a) {
  return unary_op(x, "add_scalar", [a](T v) { return v + a; }, [](T) { return T(1); });
}

template <class T>
Tensor<T> sqrt_guarded(const Tensor<T>& x, T eps) {
  std::vector<T> out(static_cast<size_t>(x.numel()));
  const T* px = x.data();
  for (size_t i = 0; i < out.size(); ++i) {
    T s = std::sqrt(px[i] > T(0) ? px[i] : T(0));
    if (s < eps) {
      s += eps;
      g_degenerate_sigma.fetch_add(1, std::memory_order_relaxed);
    }
    out[i] = s;
  }
  // derivative through the guarded output keeps the backward finite at 0
  auto out_copy = out;
  return make_result<T>(x.shape(), std::move(out), {x}, "sqrt_guarded",
                        [out_copy](const std::vector<T>& g, const auto& sink) {
                          if (std::vector<T>* gx = sink(0)) {
                            for (size_t i = 0; i < g.size(); ++i) {
                              (*gx)[i] += g[i] * T(0.5) / out_copy[i];
                            }
                          }
                        });
}

template <class T>
Tensor<T> clamp01(const Tensor<T>& x) {
  if (grad_enabled() && x.requires_grad()) {
    throw std::logic_error("clamp01: inference-only op called under gradient tracking");
  }
  auto out = Tensor<T>::zeros(x.shape());
  const T* px = x.data();
  T* po = out.data();
  for (int64_t i = 0; i < x.numel(); ++i) {
    po[i] = px[i] < T(0) ? T(0) : (px[i] > T(1) ? T(1) : px[i]);
  }
  return out;
}

template <class T>
Tensor<T> sum_all(const Tensor<T>& x) {
  T acc = 0;
  for (int64_t i = 0; i < x.numel(); ++i) acc += x.data()[i];
  const int64_t n = x.numel();
  return make_result<T>({1, 1, 1, 1}, {acc}, {x}, "sum_all",
                        [n](const std::vector<T>& g, const auto& sink) {
                          if (std::vector<T>* gx = sink(0)) {
                            for (int64_t i = 0; i < n; ++i) (*gx)[i] += g[0];
                          }
                        });
}

template <class T>
Tensor<T> mean_all(const Tensor<T>& x) {
  T acc = 0;
  for (int64_t i = 0; i < x.numel(); ++i) acc += x.data()[i];
  const int64_t n = x.numel();
  acc /= T(n);
  return make_result<T>({1, 1, 1, 1}, {acc}, {x}, "mean_all",
                        [n](const std::vector<T>& g, const auto& sink) {
                          if (std::vector<T>* gx = sink(0)) {
                            const T s = g[0] / T(n);
                            for (int64_t i = 0; i < n; ++i) (*gx)[i] += s;
                          }
                        });
}

template <class T>
Tensor<T> spatial_mean(const Tensor<T>& x) {
  const Shape4 s = x.shape();
  const int64_t hw = s.h * s.w;
  if (hw == 0) throw std::invalid_argument("spatial_mean: empty spatial dims");
  std::vector<T> out(static_cast<size_t>(s.n * s.c), T(0));
  const T* px = x.data();
  for (int64_t nc = 0; nc < s.n * s.c; ++nc) {
    T acc = 0;
    for (int64_t i = 0; i < hw; ++i) acc += px[nc * hw + i];
    out[nc] = acc / T(hw);
  }
  return make_result<T>({s.n, s.c, 1, 1}, std::move(out), {x}, "spatial_mean",
                        [s, hw](const std::vector<T>& g, const auto& sink) {
                          if (std::vector<T>* gx = sink(0)) {
                            for (int64_t nc = 0; nc < s.n * s.c; ++nc) {
                              const T v = g[nc] / T(hw);
                              for (int64_t i = 0; i < hw; ++i) (*gx)[nc * hw + i] += v;
                            }
                          }
                        });
}

template <class T>
Tensor<T> l1_loss(const Tensor<T>& pred, const Tensor<T>& target) {
  if (!(pred.shape() == target.shape())) {
    throw std::invalid_argument("l1_loss: pred " + pred.shape().str() + " vs target " +
                                target.shape().str());
  }
  return mean_all(abs(sub(pred, target)));
}

#define IGDH_INSTANTIATE_EW(T)                                        \
  template Tensor<T> add<T>(const Tensor<T>&, const Tensor<T>&);     \
  template Tensor<T> sub<T>(const Tensor<T>&, const Tensor<T>&);     \
  template Tensor<T> mul<T>(const Tensor<T>&, const Tensor<T>&);     \
  template Tensor<T> div<T>(const Tensor<T>&, const Tensor<T>&);     \
  template Tensor<T> neg<T>(const Tensor<T>&);                       \
  template Tensor<T> abs<T>(const Tensor<T>&);                       \
  template Tensor<T> exp<T>(const Tensor<T>&);                       \
  template Tensor<T> sigmoid<T>(const Tensor<T>&);                   \
  template Tensor<T> relu<T>(const Tensor<T>&);                      \
  template Tensor<T> gelu<T>(const Tensor<T>&);                      \
  template Tensor<T> scale<T>(const Tensor<T>&, T);                  \
  template Tensor<T> add_scalar<T>(const Tensor<T>&, T);             \
  template Tensor<T> sqrt_guarded<T>(const Tensor<T>&, T);           \
  template Tensor<T> clamp01<T>(const Tensor<T>&);                   \
  template Tensor<T> sum_all<T>(const Tensor<T>&);                   \
  template Tensor<T> mean_all<T>(const Tensor<T>&);                  \
  template Tensor<T> spatial_mean<T>(const Tensor<T>&);              \
  template Tensor<T> l1_loss<T>(const Tensor<T>&, const Tensor<T>&);

IGDH_INSTANTIATE_EW(float)
IGDH_INSTANTIATE_EW(double)

}  // namespace igdh
