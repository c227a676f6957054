#include "igdh/metrics.hpp"

#include <array>
#include <cmath>
#include <cstdio>
#include <limits>
#include <stdexcept>
#include <vector>

namespace igdh {

namespace {

template <class T>
std::vector<double> to_luma(const Tensor<T>& img, const char* who) {
  const Shape4 s = img.shape();
  if (s.n != 1) {
    throw std::invalid_argument(std::string(who) + ": expected a single image, got n=" +
                                std::to_string(s.n));
  }
  if (s.h < 1 || s.w < 1) {
    throw std::invalid_argument(std::string(who) + ": empty image " + s.str());
  }
  std::vector<double> out(static_cast<size_t>(s.h * s.w));
  const T* d = img.data();
  const int64_t hw = s.h * s.w;
  if (s.c == 3) {
    for (int64_t i = 0; i < hw; ++i) {
      out[i] = 0.299 * static_cast<double>(d[i]) +
               0.587 * static_cast<double>(d[hw + i]) +
               0.114 * static_cast<double>(d[2 * hw + i]);
    }
  } else if (s.c == 1) {
    for (int64_t i = 0; i < hw; ++i) out[i] = static_cast<double>(d[i]);
  } else {
    throw std::invalid_argument(std::string(who) + ": expected 1 or 3 channels, got " +
                                std::to_string(s.c));
  }
  return out;
}

std::vector<double> gaussian_kernel11() {
  std::vector<double> k(11);
  const double sigma = 1.5;
  double sum = 0;
  for (int i = 0; i < 11; ++i) {
    const double x = i - 5;
    k[i] = std::exp(-x * x / (2 * sigma * sigma));
    sum += k[i];
  }
  for (double& v : k) v /= sum;
  return k;
}

// valid-region separable Gaussian filter of an h*w map
std::vector<double> gauss_valid(const std::vector<double>& img, int64_t h, int64_t w) {
  static const std::vector<double> k = gaussian_kernel11();
  const int64_t oh = h - 10, ow = w - 10;
  std::vector<double> rows(static_cast<size_t>(h * ow));
  for (int64_t y = 0; y < h; ++y) {
    for (int64_t x = 0; x < ow; ++x) {
      double acc = 0;
      for (int i = 0; i < 11; ++i) acc += k[i] * img[y * w + x + i];
      rows[y * ow + x] = acc;
    }
  }
  std::vector<double> out(static_cast<size_t>(oh * ow));
  for (int64_t y = 0; y < oh; ++y) {
    for (int64_t x = 0; x < ow; ++x) {
      double acc = 0;
      for (int i = 0; i < 11; ++i) acc += k[i] * rows[(y + i) * ow + x];
      out[y * ow + x] = acc;
    }
  }
  return out;
}

}  // namespace

template <class T>
double psnr(const Tensor<T>& a, const Tensor<T>& b, double peak) {
  if (!(a.shape() == b.shape())) {
    throw std::invalid_argument("psnr: shapes " + a.shape().str() + " vs " +
                                b.shape().str());
  }
  if (peak <= 0) {
    throw std::invalid_argument("psnr: peak must be positive, got " +
                                std::to_string(peak));
  }
  double mse = 0;
  const int64_t n = a.numel();
  for (int64_t i = 0; i < n; ++i) {
    const double d = static_cast<double>(a.data()[i]) - static_cast<double>(b.data()[i]);
    mse += d * d;
  }
  mse /= static_cast<double>(n);
  if (mse == 0) return std::numeric_limits<double>::infinity();
  return 10.0 * std::log10(peak * peak / mse);
}

template <class T>
double ssim(const Tensor<T>& a, const Tensor<T>& b, double peak) {
  if (!(a.shape() == b.shape())) {
    throw std::invalid_argument("ssim: shapes " + a.shape().str() + " vs " +
                                b.shape().str());
  }
  const Shape4 s = a.shape();
  if (s.h < 11 || s.w < 11) {
    throw std::invalid_argument("ssim: image " + std::to_string(s.h) + "x" +
                                std::to_string(s.w) + " smaller than the 11x11 window");
  }
  std::vector<double> x = to_luma(a, "ssim");
  std::vector<double> y = to_luma(b, "ssim");
  const int64_t hw = s.h * s.w;
  std::vector<double> xx(hw), yy(hw), xy(hw);
  for (int64_t i = 0; i < hw; ++i) {
    xx[i] = x[i] * x[i];
    yy[i] = y[i] * y[i];
    xy[i] = x[i] * y[i];
  }
  auto mu_x = gauss_valid(x, s.h, s.w);
  auto mu_y = gauss_valid(y, s.h, s.w);
  auto e_xx = gauss_valid(xx, s.h, s.w);
  auto e_yy = gauss_valid(yy, s.h, s.w);
  auto e_xy = gauss_valid(xy, s.h, s.w);

  const double c1 = (0.01 * peak) * (0.01 * peak);
  const double c2 = (0.03 * peak) * (0.03 * peak);
  double mean = 0;
  for (size_t i = 0; i < mu_x.size(); ++i) {
    const double vx = e_xx[i] - mu_x[i] * mu_x[i];
    const double vy = e_yy[i] - mu_y[i] * mu_y[i];
    const double cov = e_xy[i] - mu_x[i] * mu_y[i];
    mean += ((2 * mu_x[i] * mu_y[i] + c1) * (2 * cov + c2)) /
            ((mu_x[i] * mu_x[i] + mu_y[i] * mu_y[i] + c1) * (vx + vy + c2));
  }
  return mean / static_cast<double>(mu_x.size());
}

template <class T>
double entropy(const Tensor<T>& img) {
  std::vector<double> luma = to_luma(img, "entropy");
  std::array<int64_t, 256> hist{};
  for (double v : luma) {
    long level = std::lround(v * 255.0);
    if (level < 0) level = 0;
    if (level > 255) level = 255;
    hist[static_cast<size_t>(level)] += 1;
  }
  const double total = static_cast<double>(luma.size());
  double bits = 0;
  for (int64_t count : hist) {
    if (count == 0) continue;
    const double p = static_cast<double>(count) / total;
    bits -= p * std::log2(p);
  }
  return bits;
}

std::string format_metric(double v) {
  if (std::isinf(v)) return v > 0 ? "inf" : "-inf";
  char buf[64];
  std::snprintf(buf, sizeof(buf), "%.6f", v);
  return buf;
}

#define IGDH_INSTANTIATE_METRICS(T)                                       \
  template double psnr<T>(const Tensor<T>&, const Tensor<T>&, double);   \
  template double ssim<T>(const Tensor<T>&, const Tensor<T>&, double);   \
  template double entropy<T>(const Tensor<T>&);

IGDH_INSTANTIATE_METRICS(float)
IGDH_INSTANTIATE_METRICS(double)

}  // namespace igdh
