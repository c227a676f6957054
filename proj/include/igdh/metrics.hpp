#pragma once

#include <string>

#include "igdh/tensor.hpp"

// Image-quality measurements. PSNR works on all channels jointly; SSIM and
// entropy convert RGB to luma (0.299 R + 0.587 G + 0.114 B) first. These are
// plain measurements — nothing here records gradients.

namespace igdh {

// 10*log10(peak^2 / MSE); identical images return +infinity
template <class T>
double psnr(const Tensor<T>& a, const Tensor<T>& b, double peak = 1.0);

// mean structural similarity over the valid (unpadded) region, Gaussian
// window 11x11 sigma 1.5, K1=0.01, K2=0.03, dynamic range = peak
template <class T>
double ssim(const Tensor<T>& a, const Tensor<T>& b, double peak = 1.0);

// Shannon entropy in bits of the 256-bin luma histogram
template <class T>
double entropy(const Tensor<T>& img);

// CSV formatting with the "inf" sentinel for infinite PSNR
std::string format_metric(double v);

}  // namespace igdh
