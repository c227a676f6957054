#include "igdh/haze.hpp"

#include <cmath>
#include <stdexcept>
#include <string>

namespace igdh {

namespace {

template <class T>
void check_light(const Tensor<T>& A, int64_t channels, const char* op) {
  const Shape4 s = A.shape();
  const bool scalar = s == Shape4{1, 1, 1, 1};
  const bool per_channel = s == Shape4{1, channels, 1, 1};
  if (!scalar && !per_channel) {
    throw std::invalid_argument(std::string(op) + ": atmospheric light " + s.str() +
                                " must be scalar or per-channel");
  }
}

}  // namespace

template <class T>
Tensor<T> transmission(const Tensor<T>& d, T beta) {
  if (beta < T(0)) throw std::invalid_argument("transmission: negative beta");
  const T* pd = d.data();
  for (int64_t i = 0; i < d.numel(); ++i) {
    if (pd[i] < T(0)) throw std::invalid_argument("transmission: negative depth");
  }
  auto t = Tensor<T>::zeros(d.shape());
  for (int64_t i = 0; i < d.numel(); ++i) t.data()[i] = std::exp(-beta * pd[i]);
  return t;
}

template <class T>
Tensor<T> apply_haze(const HazeScene<T>& scene) {
  const Shape4 js = scene.J.shape();
  const Shape4 ds = scene.d.shape();
  if (ds.n != js.n || ds.c != 1 || ds.h != js.h || ds.w != js.w) {
    throw std::invalid_argument("apply_haze: depth " + ds.str() +
                                " does not match image " + js.str());
  }
  check_light(scene.A, js.c, "apply_haze");
  auto t = transmission(scene.d, scene.beta);

  auto I = Tensor<T>::zeros(js);
  const T* pj = scene.J.data();
  const T* pt = t.data();
  const T* pa = scene.A.data();
  const bool chan_a = scene.A.numel() > 1;
  const int64_t hw = js.h * js.w;
  for (int64_t n = 0; n < js.n; ++n)
    for (int64_t c = 0; c < js.c; ++c) {
      const T a = chan_a ? pa[c] : pa[0];
      for (int64_t i = 0; i < hw; ++i) {
        const T tv = pt[n * hw + i];
        I.data()[(n * js.c + c) * hw + i] = pj[(n * js.c + c) * hw + i] * tv + a * (T(1) - tv);
      }
    }
  return I;
}

template <class T>
Tensor<T> invert_haze(const Tensor<T>& I, const Tensor<T>& t, const Tensor<T>& A,
                      T t_min) {
  if (t_min <= T(0)) throw std::invalid_argument("invert_haze: t_min must be positive");
  const Shape4 is = I.shape();
  const Shape4 ts = t.shape();
  if (ts.n != is.n || ts.c != 1 || ts.h != is.h || ts.w != is.w) {
    throw std::invalid_argument("invert_haze: transmission " + ts.str() +
                                " does not match image " + is.str());
  }
  check_light(A, is.c, "invert_haze");

  auto J = Tensor<T>::zeros(is);
  const T* pi = I.data();
  const T* pt = t.data();
  const T* pa = A.data();
  const bool chan_a = A.numel() > 1;
  const int64_t hw = is.h * is.w;
  for (int64_t n = 0; n < is.n; ++n)
    for (int64_t c = 0; c < is.c; ++c) {
      const T a = chan_a ? pa[c] : pa[0];
      for (int64_t i = 0; i < hw; ++i) {
        const T tv = pt[n * hw + i];
        J.data()[(n * is.c + c) * hw + i] =
            (pi[(n * is.c + c) * hw + i] - a * (T(1) - tv)) / std::max(tv, t_min);
      }
    }
  return J;
}

#define IGDH_INSTANTIATE_HAZE(T)                                                \
  template Tensor<T> transmission<T>(const Tensor<T>&, T);                      \
  template Tensor<T> apply_haze<T>(const HazeScene<T>&);                        \
  template Tensor<T> invert_haze<T>(const Tensor<T>&, const Tensor<T>&,        \
                                    const Tensor<T>&, T);

IGDH_INSTANTIATE_HAZE(float)
IGDH_INSTANTIATE_HAZE(double)

}  // namespace igdh
