#pragma once

#include "igdh/tensor.hpp"

// Atmospheric scattering model: a hazy observation I is the convex blend
// I = J*t + A*(1-t) of the clean scene J and the atmospheric light A, with
// per-pixel transmission t = exp(-beta * depth). These functions are the
// analytic data oracle: plain elementwise math, no gradient recording.

namespace igdh {

template <class T>
struct HazeScene {
  Tensor<T> J;     // clean image (N,C,H,W), values in [0,1]
  Tensor<T> d;     // depth map (N,1,H,W), values >= 0
  Tensor<T> A;     // atmospheric light, (1,1,1,1) scalar or (1,C,1,1)
  T beta = T(0);   // haze density coefficient, >= 0
};

// t = exp(-beta * d), elementwise in (0,1]
template <class T>
Tensor<T> transmission(const Tensor<T>& d, T beta);

template <class T>
Tensor<T> apply_haze(const HazeScene<T>& scene);

// J_hat = (I - A*(1-t)) / max(t, t_min)
template <class T>
Tensor<T> invert_haze(const Tensor<T>& I, const Tensor<T>& t, const Tensor<T>& A,
                      T t_min = T(0.05));

}  // namespace igdh
