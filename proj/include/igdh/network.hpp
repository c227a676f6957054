#pragma once

#include <array>
#include <functional>
#include <optional>
#include <string>
#include <unordered_map>
#include <utility>
#include <vector>

#include "igdh/ops.hpp"
#include "igdh/tensor.hpp"

// The two-branch dehazing model. A CNN branch extracts local features at
// H/2..H/16; a windowed-attention transformer branch runs in parallel on an
// optionally once-downsampled copy. At every stage the transformer features
// are upsampled, added to one CNN head (feature addition, FA), converted to a
// channel*pixel attention map (CPA) and multiplied into the other CNN head:
// global context steering local extraction. A four-stage decoder with
// concatenated skips and a zero-initialized final conv produces a residual on
// top of the input.

namespace igdh {

struct ModelConfig {
  std::array<int64_t, 4> widths{8, 16, 24, 32};
  std::array<int64_t, 4> heads{1, 2, 4, 8};
  int64_t window = 7;
  int64_t downsample_factor = 2;  // 1 disables the transformer-branch DownS
  bool use_fa = true;             // per-stage feature addition
  bool use_cpa = true;            // CPA guidance on the fused features
  double mlp_ratio = 2.0;
  int64_t cpa_reduction = 4;
  int64_t pa_kernel = 7;

  void validate() const;
  // spatial multiple the input is reflect-padded to
  int64_t pad_multiple() const { return 16 * downsample_factor; }

  static ModelConfig tiny();           // widths 8/16/24/32, for tests
  static ModelConfig small_default();  // widths 24/48/96/192

  std::string to_json() const;
  static ModelConfig from_json(const std::string& text);
};

// Named, ordered collection of learnable tensors. Iteration order is the
// insertion order and is part of the checkpoint contract.
template <class T>
class ParamStore {
 public:
  Tensor<T>& add(const std::string& name, Tensor<T> t);
  Tensor<T> get(const std::string& name) const;  // value handle, shared storage
  bool has(const std::string& name) const { return index_.count(name) != 0; }
  size_t size() const { return items_.size(); }
  const std::vector<std::pair<std::string, Tensor<T>>>& items() const { return items_; }
  std::vector<std::pair<std::string, Tensor<T>>>& items() { return items_; }

  int64_t total_elements() const;
  void set_requires_grad(bool v);
  void zero_grad();

 private:
  std::vector<std::pair<std::string, Tensor<T>>> items_;
  std::unordered_map<std::string, size_t> index_;
};

// ---- building blocks (exposed so each one can be tested in isolation) ----

template <class T>
struct RescaleNormParams {
  Tensor<T> gamma;    // (1,C,1,1)
  Tensor<T> beta;     // (1,C,1,1) normalization bias
  Tensor<T> w_gamma;  // (1,1,1,1) scale reinjection weight
  Tensor<T> b_gamma;  // (1,1,1,1)
  Tensor<T> w_beta;   // (1,1,1,1) mean reinjection weight
  Tensor<T> b_beta;   // (1,1,1,1)

  // configuration that makes rescale_norm(F=identity) the identity map
  static RescaleNormParams identity(int64_t channels);
};

// F((x-mu)/sigma * gamma + beta) * (sigma*W_gamma + B_gamma) + (mu*W_beta + B_beta)
// with per-sample per-channel spatial statistics and an epsilon-guarded sigma.
template <class T>
Tensor<T> rescale_norm(const Tensor<T>& x, const RescaleNormParams<T>& p,
                       const std::function<Tensor<T>(const Tensor<T>&)>& f);

struct WindowPad {
  Shape4 original{};
  Shape4 padded{};
  int64_t window = 0;
  int64_t shift = 0;
};

// Reflect-pads H,W up to window multiples (bottom/right), cyclically shifts
// by -shift, splits into (N*nW, 1, window^2, C) token windows.
template <class T>
std::pair<Tensor<T>, WindowPad> window_partition(const Tensor<T>& x, int64_t window,
                                                 int64_t shift);
// exact inverse: unsplit, shift back, crop the padding away
template <class T>
Tensor<T> window_merge(const Tensor<T>& windows, const WindowPad& rec);

// Multi-head scaled dot-product attention over token windows.
// q,k,v: (B,1,T,C); bias: (1,heads,T,T); returns (B,1,T,C).
template <class T>
Tensor<T> window_attention_core(const Tensor<T>& q, const Tensor<T>& k,
                                const Tensor<T>& v, const Tensor<T>& bias,
                                int64_t heads);

template <class T>
struct AttentionParams {
  Tensor<T> qkv_w, qkv_b;      // 1x1 conv, C -> 3C
  Tensor<T> bias_table;        // (heads, (2w-1)^2, 1, 1)
  Tensor<T> agg_w, agg_b;      // 3x3 conv aggregating the pre-partition V map
  Tensor<T> proj_w, proj_b;    // 1x1 output projection
  int64_t heads = 1;
  int64_t window = 7;
};

// windowed attention on a spatial map: proj(merge(attn windows) + conv3x3(V))
template <class T>
Tensor<T> window_attention(const Tensor<T>& x, const AttentionParams<T>& p,
                           int64_t shift);

template <class T>
struct TransformerBlockParams {
  RescaleNormParams<T> rn1, rn2;
  AttentionParams<T> attn;
  Tensor<T> mlp1_w, mlp1_b;  // 1x1, C -> C*mlp_ratio
  Tensor<T> mlp2_w, mlp2_b;  // 1x1, back to C
};

// x + RN(x; attention), then + RN(.; MLP); shift picks the window offset
template <class T>
Tensor<T> transformer_block(const Tensor<T>& x, const TransformerBlockParams<T>& p,
                            int64_t shift);

template <class T>
struct CnnStageParams {
  Tensor<T> down_w, down_b;    // 3x3 stride-2 entry conv
  Tensor<T> trunk_w, trunk_b;  // shared 3x3 trunk
  Tensor<T> fuse_w, fuse_b;    // head feeding the fusion path
  Tensor<T> main_w, main_b;    // head multiplied by the guidance map
  bool has_fuse = true;        // false when neither fusion nor guidance uses it
};

// returns {feat_for_fusion, feat_main}, both at half the input resolution;
// without a fusion head both entries are the main head
template <class T>
std::pair<Tensor<T>, Tensor<T>> cnn_stage(const Tensor<T>& x, const CnnStageParams<T>& p);

template <class T>
struct CpaParams {
  Tensor<T> fc1_w, fc1_b;  // shared MLP, C -> C/r
  Tensor<T> fc2_w, fc2_b;  // C/r -> C
  Tensor<T> pa_w, pa_b;    // k x k conv, 2 -> 1
};

template <class T>
Tensor<T> channel_attention(const Tensor<T>& x, const CpaParams<T>& p);  // (N,C,1,1)
template <class T>
Tensor<T> pixel_attention(const Tensor<T>& x, const CpaParams<T>& p);  // (N,1,H,W)
// channel_attention(x) * pixel_attention(x) * x
template <class T>
Tensor<T> cpa(const Tensor<T>& x, const CpaParams<T>& p);

// Per-stage interaction: upsample the transformer features, optionally add
// them to the CNN fusion head (FA), turn the sum into CPA weights, and gate
// the CNN main head. Without CPA the fused features are added directly (the
// gate would otherwise be a constant 1 and FA could not reach the output).
template <class T>
Tensor<T> fuse_and_guide(const Tensor<T>& t_feat, const Tensor<T>& c_fusion,
                         const Tensor<T>& c_main, const ModelConfig& cfg,
                         const std::optional<CpaParams<T>>& cpa_params);

// ---- whole model ----

template <class T>
ParamStore<T> init_params(const ModelConfig& cfg, uint64_t seed);

// End-to-end forward. Input (N,3,H,W) for any H,W >= 1; output same shape.
// clamp_output engages the [0,1] inference clamp (never use under autograd).
template <class T>
Tensor<T> model_forward(const Tensor<T>& image, const ModelConfig& cfg,
                        const ParamStore<T>& params, bool clamp_output = false);

// test helper: replace all-zero parameters by small uniform noise so gradient
// audits are not blocked by deliberate zero initializations
template <class T>
void jitter_zero_params(ParamStore<T>& params, Rng& rng, T scale);

struct CountResult {
  int64_t params = 0;
  int64_t macs = 0;  // multiply-accumulates of convs, linears, attention matmuls
  int64_t cnn_params = 0;
  int64_t transformer_params = 0;
  int64_t fuse_params = 0;
  int64_t decoder_params = 0;
};
CountResult count_params_macs(const ModelConfig& cfg, int64_t h, int64_t w);
int64_t conv_param_count(int64_t in_c, int64_t out_c, int64_t k, bool bias = true);

}  // namespace igdh
