#pragma once

#include <array>
#include <cstdint>
#include <optional>
#include <utility>
#include <vector>

#include "igdh/tensor.hpp"

// Operator set for the dehazing network. All ops are pure (fresh output
// tensor), record themselves for reverse-mode differentiation when any input
// requires grad, and reject shapes they cannot handle with an error naming
// the offending dimension.
//
// Broadcasting is deliberately restricted to the patterns the model needs:
// same shape, (N,C,1,1) against (N,C,H,W), (N,1,H,W) against (N,C,H,W) and a
// (1,1,1,1) scalar. Anything else is a shape error.

namespace igdh {

enum class PadMode { kZeros, kReflect };
enum class PoolKind { kAvg, kMax };
enum class PoolScope { kGlobal, kWindow };
enum class StatKind { kMean, kMax };
enum class ResizeFactor { kDown2, kUp2 };
enum class ResizeMode { kBilinear, kNearest };

// count of epsilon-guarded zero-variance normalizations since last reset
uint64_t degenerate_sigma_count();
void reset_degenerate_sigma_count();

// ---- elementwise ----
template <class T> Tensor<T> neg(const Tensor<T>& x);
template <class T> Tensor<T> abs(const Tensor<T>& x);  // subgradient 0 at 0
template <class T> Tensor<T> exp(const Tensor<T>& x);
template <class T> Tensor<T> sigmoid(const Tensor<T>& x);
template <class T> Tensor<T> relu(const Tensor<T>& x);
template <class T> Tensor<T> gelu(const Tensor<T>& x);  // exact erf form
template <class T> Tensor<T> scale(const Tensor<T>& x, T a);
template <class T> Tensor<T> add_scalar(const Tensor<T>& x, T a);
// sqrt with the divide-safe guard: results below eps are lifted by eps and
// counted as degenerate. Derivative uses the guarded output.
template <class T> Tensor<T> sqrt_guarded(const Tensor<T>& x, T eps = T(1e-6));
// inference-only; refuses to run under gradient tracking
template <class T> Tensor<T> clamp01(const Tensor<T>& x);

// ---- binary with restricted broadcast (b may be the broadcast side) ----
template <class T> Tensor<T> add(const Tensor<T>& a, const Tensor<T>& b);
template <class T> Tensor<T> sub(const Tensor<T>& a, const Tensor<T>& b);
template <class T> Tensor<T> mul(const Tensor<T>& a, const Tensor<T>& b);
template <class T> Tensor<T> div(const Tensor<T>& a, const Tensor<T>& b);

// ---- reductions ----
template <class T> Tensor<T> sum_all(const Tensor<T>& x);   // -> (1,1,1,1)
template <class T> Tensor<T> mean_all(const Tensor<T>& x);  // -> (1,1,1,1)
template <class T> Tensor<T> spatial_mean(const Tensor<T>& x);  // -> (N,C,1,1)
// global scope -> (N,C,1,1); window scope uses the floor rule
// H' = floor((H-k)/stride)+1 with windows fully inside the input.
template <class T>
Tensor<T> pool2d(const Tensor<T>& x, PoolKind kind, PoolScope scope, int64_t k = 0,
                 int64_t stride = 0);
// per-pixel statistics across channels -> (N,1,H,W)
template <class T> Tensor<T> channel_stats(const Tensor<T>& x, StatKind kind);

// ---- shape ----
template <class T> Tensor<T> reshape(const Tensor<T>& x, const Shape4& s);
template <class T>
Tensor<T> permute(const Tensor<T>& x, const std::array<int, 4>& axes);
template <class T> Tensor<T> concat_channels(const Tensor<T>& a, const Tensor<T>& b);
template <class T> Tensor<T> slice_channels(const Tensor<T>& x, int64_t c0, int64_t c1);
// mirror-without-repeating-edge padding; folds indices so any pad width works
// for dims >= 1 (a 1-pixel dim replicates)
template <class T>
Tensor<T> reflect_pad2d(const Tensor<T>& x, int64_t top, int64_t bottom, int64_t left,
                        int64_t right);
template <class T>
Tensor<T> crop2d(const Tensor<T>& x, int64_t top, int64_t left, int64_t h, int64_t w);
template <class T> Tensor<T> roll2d(const Tensor<T>& x, int64_t dy, int64_t dx);
// tile a (1,C,H,W) tensor n times along N
template <class T> Tensor<T> broadcast_n(const Tensor<T>& x, int64_t n);

// ---- linear algebra ----
template <class T>
Tensor<T> conv2d(const Tensor<T>& input, const Tensor<T>& weight,
                 const std::optional<Tensor<T>>& bias, int64_t stride, int64_t padding,
                 PadMode pad_mode = PadMode::kZeros);
// deduction helpers: a bare Tensor or std::nullopt as the bias argument
template <class T>
Tensor<T> conv2d(const Tensor<T>& input, const Tensor<T>& weight, const Tensor<T>& bias,
                 int64_t stride, int64_t padding, PadMode pad_mode = PadMode::kZeros) {
  return conv2d(input, weight, std::optional<Tensor<T>>(bias), stride, padding, pad_mode);
}
template <class T>
Tensor<T> conv2d(const Tensor<T>& input, const Tensor<T>& weight, std::nullopt_t,
                 int64_t stride, int64_t padding, PadMode pad_mode = PadMode::kZeros) {
  return conv2d(input, weight, std::optional<Tensor<T>>(), stride, padding, pad_mode);
}
// x: (N,F,1,1), weight: (G,F,1,1), bias: (1,G,1,1) -> (N,G,1,1)
template <class T>
Tensor<T> linear(const Tensor<T>& x, const Tensor<T>& weight, const Tensor<T>& bias);
// batched matmul treating (N,C) as batch dims and (H,W) as the matrix
template <class T>
Tensor<T> bmm(const Tensor<T>& a, const Tensor<T>& b, bool transpose_b);
template <class T> Tensor<T> softmax(const Tensor<T>& x, int axis);

// ---- resize ----
// down2 bilinear averages 2x2 blocks; down2 nearest keeps the top-left
// sample; up2 bilinear uses half-pixel-centre interpolation with edge clamp;
// up2 nearest replicates.
template <class T>
Tensor<T> resize2d(const Tensor<T>& x, ResizeFactor factor, ResizeMode mode);

// ---- windowing (H, W must be multiples of `window`) ----
// (N,C,H,W) -> (N*nWindows, 1, window*window, C), row-major over windows
template <class T> Tensor<T> window_split(const Tensor<T>& x, int64_t window);
template <class T>
Tensor<T> window_unsplit(const Tensor<T>& windows, int64_t window,
                         const Shape4& spatial);

// relative-position-bias lookup: table (heads, (2w-1)^2, 1, 1) gathered
// through idx (tokens*tokens entries) -> (1, heads, tokens, tokens)
template <class T>
Tensor<T> rel_bias_expand(const Tensor<T>& table, const std::vector<int64_t>& idx,
                          int64_t tokens);
// idx map for a w-by-w window: entry [i*T+j] = flat relative offset of token
// j from token i in a (2w-1)x(2w-1) grid
std::vector<int64_t> rel_bias_index(int64_t window);

// mean |a - b| over all elements -> scalar
template <class T> Tensor<T> l1_loss(const Tensor<T>& pred, const Tensor<T>& target);

}  // namespace igdh
