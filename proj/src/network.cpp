#include "igdh/network.hpp"

#include <cmath>
#include <stdexcept>
#include <string>

#include "igdh/rng.hpp"
#include "json.hpp"

namespace igdh {

using nlohmann::json;

// ---- config ----

void ModelConfig::validate() const {
  for (int i = 0; i < 4; ++i) {
    if (widths[i] < 1) {
      throw std::invalid_argument("ModelConfig: widths[" + std::to_string(i) +
                                  "] must be positive, got " + std::to_string(widths[i]));
    }
    if (heads[i] < 1) {
      throw std::invalid_argument("ModelConfig: heads[" + std::to_string(i) +
                                  "] must be positive, got " + std::to_string(heads[i]));
    }
    if (widths[i] % heads[i] != 0) {
      throw std::invalid_argument("ModelConfig: widths[" + std::to_string(i) + "]=" +
                                  std::to_string(widths[i]) + " not divisible by heads[" +
                                  std::to_string(i) + "]=" + std::to_string(heads[i]));
    }
  }
  if (window < 2) {
    throw std::invalid_argument("ModelConfig: window must be >= 2, got " +
                                std::to_string(window));
  }
  if (downsample_factor != 1 && downsample_factor != 2) {
    throw std::invalid_argument("ModelConfig: downsample_factor must be 1 or 2, got " +
                                std::to_string(downsample_factor));
  }
  if (mlp_ratio < 1.0) {
    throw std::invalid_argument("ModelConfig: mlp_ratio must be >= 1, got " +
                                std::to_string(mlp_ratio));
  }
  if (cpa_reduction < 1) {
    throw std::invalid_argument("ModelConfig: cpa_reduction must be positive, got " +
                                std::to_string(cpa_reduction));
  }
  if (pa_kernel < 1 || pa_kernel % 2 == 0) {
    throw std::invalid_argument("ModelConfig: pa_kernel must be odd and positive, got " +
                                std::to_string(pa_kernel));
  }
}

ModelConfig ModelConfig::tiny() { return ModelConfig{}; }

ModelConfig ModelConfig::small_default() {
  ModelConfig c;
  c.widths = {24, 48, 96, 192};
  return c;
}

std::string ModelConfig::to_json() const {
  json j;
  j["widths"] = widths;
  j["heads"] = heads;
  j["window"] = window;
  j["downsample_factor"] = downsample_factor;
  j["use_fa"] = use_fa;
  j["use_cpa"] = use_cpa;
  j["mlp_ratio"] = mlp_ratio;
  j["cpa_reduction"] = cpa_reduction;
  j["pa_kernel"] = pa_kernel;
  return j.dump(2) + "\n";
}

ModelConfig ModelConfig::from_json(const std::string& text) {
  json j = json::parse(text);
  ModelConfig c;
  c.widths = j.value("widths", c.widths);
  c.heads = j.value("heads", c.heads);
  c.window = j.value("window", c.window);
  c.downsample_factor = j.value("downsample_factor", c.downsample_factor);
  c.use_fa = j.value("use_fa", c.use_fa);
  c.use_cpa = j.value("use_cpa", c.use_cpa);
  c.mlp_ratio = j.value("mlp_ratio", c.mlp_ratio);
  c.cpa_reduction = j.value("cpa_reduction", c.cpa_reduction);
  c.pa_kernel = j.value("pa_kernel", c.pa_kernel);
  c.validate();
  return c;
}

// ---- parameter store ----

template <class T>
Tensor<T>& ParamStore<T>::add(const std::string& name, Tensor<T> t) {
  if (index_.count(name) != 0) {
    throw std::invalid_argument("ParamStore: duplicate parameter '" + name + "'");
  }
  index_[name] = items_.size();
  items_.emplace_back(name, std::move(t));
  return items_.back().second;
}

template <class T>
Tensor<T> ParamStore<T>::get(const std::string& name) const {
  auto it = index_.find(name);
  if (it == index_.end()) {
    throw std::out_of_range("ParamStore: unknown parameter '" + name + "'");
  }
  return items_[it->second].second;
}

template <class T>
int64_t ParamStore<T>::total_elements() const {
  int64_t n = 0;
  for (const auto& kv : items_) n += kv.second.shape().numel();
  return n;
}

template <class T>
void ParamStore<T>::set_requires_grad(bool v) {
  for (auto& kv : items_) kv.second.set_requires_grad(v);
}

template <class T>
void ParamStore<T>::zero_grad() {
  for (auto& kv : items_) kv.second.zero_grad();
}

// ---- helpers ----

namespace {

// tile a (1,...) parameter along N when the activation batch is larger
template <class T>
Tensor<T> bc(const Tensor<T>& p, int64_t n) {
  return n == 1 ? p : broadcast_n(p, n);
}

int64_t ceil_to(int64_t v, int64_t m) { return (v + m - 1) / m * m; }

}  // namespace

// ---- rescale norm ----

template <class T>
RescaleNormParams<T> RescaleNormParams<T>::identity(int64_t channels) {
  RescaleNormParams<T> p;
  p.gamma = Tensor<T>::full({1, channels, 1, 1}, T(1));
  p.beta = Tensor<T>::zeros({1, channels, 1, 1});
  p.w_gamma = Tensor<T>::full({1, 1, 1, 1}, T(1));
  p.b_gamma = Tensor<T>::zeros({1, 1, 1, 1});
  p.w_beta = Tensor<T>::full({1, 1, 1, 1}, T(1));
  p.b_beta = Tensor<T>::zeros({1, 1, 1, 1});
  return p;
}

template <class T>
Tensor<T> rescale_norm(const Tensor<T>& x, const RescaleNormParams<T>& p,
                       const std::function<Tensor<T>(const Tensor<T>&)>& f) {
  const Shape4 s = x.shape();
  if (p.gamma.shape().c != s.c) {
    throw std::invalid_argument("rescale_norm: gamma has " +
                                std::to_string(p.gamma.shape().c) + " channels, input has " +
                                std::to_string(s.c));
  }
  Tensor<T> mu = spatial_mean(x);
  Tensor<T> diff = sub(x, mu);
  Tensor<T> sigma = sqrt_guarded(spatial_mean(mul(diff, diff)), T(1e-6));
  Tensor<T> xn = add(mul(div(diff, sigma), bc(p.gamma, s.n)), bc(p.beta, s.n));
  Tensor<T> y = f(xn);
  if (!(y.shape() == s)) {
    throw std::invalid_argument("rescale_norm: wrapped function changed shape " + s.str() +
                                " -> " + y.shape().str());
  }
  Tensor<T> rescale = add(mul(sigma, p.w_gamma), p.b_gamma);
  Tensor<T> reshift = add(mul(mu, p.w_beta), p.b_beta);
  return add(mul(y, rescale), reshift);
}

// ---- windowing ----

template <class T>
std::pair<Tensor<T>, WindowPad> window_partition(const Tensor<T>& x, int64_t window,
                                                 int64_t shift) {
  const Shape4 s = x.shape();
  if (window < 2) {
    throw std::invalid_argument("window_partition: window must be >= 2, got " +
                                std::to_string(window));
  }
  if (shift < 0 || shift >= window) {
    throw std::invalid_argument("window_partition: shift must be in [0, window), got " +
                                std::to_string(shift));
  }
  const int64_t hp = ceil_to(s.h, window);
  const int64_t wp = ceil_to(s.w, window);
  Tensor<T> padded = (hp != s.h || wp != s.w)
                         ? reflect_pad2d(x, 0, hp - s.h, 0, wp - s.w)
                         : x;
  Tensor<T> shifted = shift != 0 ? roll2d(padded, -shift, -shift) : padded;
  WindowPad rec{s, Shape4{s.n, s.c, hp, wp}, window, shift};
  return {window_split(shifted, window), rec};
}

template <class T>
Tensor<T> window_merge(const Tensor<T>& windows, const WindowPad& rec) {
  Tensor<T> spatial = window_unsplit(windows, rec.window, rec.padded);
  if (rec.shift != 0) spatial = roll2d(spatial, rec.shift, rec.shift);
  if (rec.padded.h != rec.original.h || rec.padded.w != rec.original.w) {
    spatial = crop2d(spatial, 0, 0, rec.original.h, rec.original.w);
  }
  return spatial;
}

// ---- attention ----

template <class T>
Tensor<T> window_attention_core(const Tensor<T>& q, const Tensor<T>& k,
                                const Tensor<T>& v, const Tensor<T>& bias,
                                int64_t heads) {
  const Shape4 s = q.shape();
  if (!(k.shape() == s) || !(v.shape() == s)) {
    throw std::invalid_argument("window_attention_core: q " + s.str() + ", k " +
                                k.shape().str() + ", v " + v.shape().str() +
                                " must match");
  }
  if (s.c != 1) {
    throw std::invalid_argument("window_attention_core: expected (B,1,T,C) windows, got " +
                                s.str());
  }
  const int64_t batch = s.n, tok = s.h, ch = s.w;
  if (heads < 1 || ch % heads != 0) {
    throw std::invalid_argument("window_attention_core: " + std::to_string(ch) +
                                " channels not divisible by " + std::to_string(heads) +
                                " heads");
  }
  const int64_t hd = ch / heads;
  const Shape4 bs = bias.shape();
  if (bs.n != 1 || bs.c != heads || bs.h != tok || bs.w != tok) {
    throw std::invalid_argument("window_attention_core: bias " + bs.str() +
                                " does not match (1," + std::to_string(heads) + "," +
                                std::to_string(tok) + "," + std::to_string(tok) + ")");
  }
  auto split_heads = [&](const Tensor<T>& t) {
    return permute(reshape(t, Shape4{batch, tok, heads, hd}), {0, 2, 1, 3});
  };
  Tensor<T> qh = split_heads(q);
  Tensor<T> kh = split_heads(k);
  Tensor<T> vh = split_heads(v);
  Tensor<T> logits = scale(bmm(qh, kh, true), T(1) / std::sqrt(T(hd)));
  logits = add(logits, bc(bias, batch));
  Tensor<T> weights = softmax(logits, 3);
  Tensor<T> out = bmm(weights, vh, false);
  return reshape(permute(out, {0, 2, 1, 3}), Shape4{batch, 1, tok, ch});
}

template <class T>
Tensor<T> window_attention(const Tensor<T>& x, const AttentionParams<T>& p,
                           int64_t shift) {
  const int64_t c = x.shape().c;
  Tensor<T> qkv = conv2d(x, p.qkv_w, p.qkv_b, 1, 0);
  Tensor<T> q = slice_channels(qkv, 0, c);
  Tensor<T> k = slice_channels(qkv, c, 2 * c);
  Tensor<T> v = slice_channels(qkv, 2 * c, 3 * c);
  Tensor<T> vhat = conv2d(v, p.agg_w, p.agg_b, 1, 1, PadMode::kReflect);
  auto [qw, rec] = window_partition(q, p.window, shift);
  Tensor<T> kw = window_partition(k, p.window, shift).first;
  Tensor<T> vw = window_partition(v, p.window, shift).first;
  Tensor<T> bias = rel_bias_expand(p.bias_table, rel_bias_index(p.window),
                                   p.window * p.window);
  Tensor<T> attn = window_attention_core(qw, kw, vw, bias, p.heads);
  Tensor<T> merged = window_merge(attn, rec);
  return conv2d(add(merged, vhat), p.proj_w, p.proj_b, 1, 0);
}

// ---- blocks ----

template <class T>
Tensor<T> transformer_block(const Tensor<T>& x, const TransformerBlockParams<T>& p,
                            int64_t shift) {
  auto attn_fn = [&](const Tensor<T>& xn) { return window_attention(xn, p.attn, shift); };
  Tensor<T> x1 = add(x, rescale_norm<T>(x, p.rn1, attn_fn));
  auto mlp_fn = [&](const Tensor<T>& xn) {
    Tensor<T> h = gelu(conv2d(xn, p.mlp1_w, p.mlp1_b, 1, 0));
    return conv2d(h, p.mlp2_w, p.mlp2_b, 1, 0);
  };
  return add(x1, rescale_norm<T>(x1, p.rn2, mlp_fn));
}

template <class T>
std::pair<Tensor<T>, Tensor<T>> cnn_stage(const Tensor<T>& x, const CnnStageParams<T>& p) {
  Tensor<T> d = relu(conv2d(x, p.down_w, p.down_b, 2, 1, PadMode::kReflect));
  Tensor<T> t = relu(conv2d(d, p.trunk_w, p.trunk_b, 1, 1, PadMode::kReflect));
  Tensor<T> m = relu(conv2d(t, p.main_w, p.main_b, 1, 1, PadMode::kReflect));
  if (!p.has_fuse) return {m, m};
  Tensor<T> f = relu(conv2d(t, p.fuse_w, p.fuse_b, 1, 1, PadMode::kReflect));
  return {f, m};
}

// ---- attention-based guidance ----

template <class T>
Tensor<T> channel_attention(const Tensor<T>& x, const CpaParams<T>& p) {
  auto mlp = [&](const Tensor<T>& v) {
    return linear(relu(linear(v, p.fc1_w, p.fc1_b)), p.fc2_w, p.fc2_b);
  };
  Tensor<T> a = pool2d(x, PoolKind::kAvg, PoolScope::kGlobal);
  Tensor<T> m = pool2d(x, PoolKind::kMax, PoolScope::kGlobal);
  return sigmoid(add(mlp(a), mlp(m)));
}

template <class T>
Tensor<T> pixel_attention(const Tensor<T>& x, const CpaParams<T>& p) {
  Tensor<T> stats = concat_channels(channel_stats(x, StatKind::kMean),
                                    channel_stats(x, StatKind::kMax));
  const int64_t k = p.pa_w.shape().h;
  return sigmoid(conv2d(stats, p.pa_w, p.pa_b, 1, k / 2, PadMode::kReflect));
}

template <class T>
Tensor<T> cpa(const Tensor<T>& x, const CpaParams<T>& p) {
  return mul(mul(x, channel_attention(x, p)), pixel_attention(x, p));
}

template <class T>
Tensor<T> fuse_and_guide(const Tensor<T>& t_feat, const Tensor<T>& c_fusion,
                         const Tensor<T>& c_main, const ModelConfig& cfg,
                         const std::optional<CpaParams<T>>& cpa_params) {
  if (!(c_fusion.shape() == c_main.shape())) {
    throw std::invalid_argument("fuse_and_guide: CNN heads " + c_fusion.shape().str() +
                                " vs " + c_main.shape().str() + " must match");
  }
  const int64_t ds = cfg.downsample_factor;
  const Shape4 ts = t_feat.shape(), cs = c_fusion.shape();
  if (ts.n != cs.n || ts.c != cs.c || ts.h * ds != cs.h || ts.w * ds != cs.w) {
    throw std::invalid_argument("fuse_and_guide: transformer features " + ts.str() +
                                " do not match CNN features " + cs.str() +
                                " at downsample factor " + std::to_string(ds));
  }
  Tensor<T> t_up =
      ds == 2 ? resize2d(t_feat, ResizeFactor::kUp2, ResizeMode::kBilinear) : t_feat;
  Tensor<T> s = cfg.use_fa ? add(t_up, c_fusion) : c_fusion;
  if (cfg.use_cpa) {
    if (!cpa_params) {
      throw std::logic_error("fuse_and_guide: use_cpa is set but no CPA parameters given");
    }
    return mul(mul(c_main, channel_attention(s, *cpa_params)),
               pixel_attention(s, *cpa_params));
  }
  // without the CPA gate, feature addition feeds the fused features forward
  if (cfg.use_fa) return add(c_main, s);
  return c_main;
}

// ---- parameter construction / lookup ----

namespace {

enum class Init { kFanIn, kZeros, kOnes };

// One traversal description serves both init_params (create) and
// model_forward (fetch), so names, shapes and ordering cannot drift apart.
template <class T>
struct Binder {
  ParamStore<T>* out = nullptr;
  const ParamStore<T>* in = nullptr;
  Rng* rng = nullptr;

  Tensor<T> operator()(const std::string& name, const Shape4& shape, Init init,
                       int64_t fan_in = 0) {
    if (out != nullptr) {
      Tensor<T> t;
      switch (init) {
        case Init::kFanIn:
          t = Tensor<T>::uniform(shape, T(1) / std::sqrt(T(fan_in)), *rng);
          break;
        case Init::kZeros:
          t = Tensor<T>::zeros(shape);
          break;
        case Init::kOnes:
          t = Tensor<T>::full(shape, T(1));
          break;
      }
      t.set_requires_grad(true);
      return out->add(name, std::move(t));
    }
    Tensor<T> t = in->get(name);
    if (!(t.shape() == shape)) {
      throw std::invalid_argument("parameter '" + name + "' has shape " +
                                  t.shape().str() + ", expected " + shape.str());
    }
    return t;
  }
};

template <class T>
struct ConvP {
  Tensor<T> w, b;
};

template <class T>
ConvP<T> bind_conv(Binder<T>& bind, const std::string& prefix, int64_t in_c,
                   int64_t out_c, int64_t k, bool zero_init = false) {
  ConvP<T> c;
  c.w = bind(prefix + ".w", Shape4{out_c, in_c, k, k},
             zero_init ? Init::kZeros : Init::kFanIn, in_c * k * k);
  c.b = bind(prefix + ".b", Shape4{1, out_c, 1, 1}, Init::kZeros);
  return c;
}

template <class T>
RescaleNormParams<T> bind_rn(Binder<T>& bind, const std::string& prefix, int64_t c) {
  RescaleNormParams<T> p;
  p.gamma = bind(prefix + ".gamma", Shape4{1, c, 1, 1}, Init::kOnes);
  p.beta = bind(prefix + ".beta", Shape4{1, c, 1, 1}, Init::kZeros);
  p.w_gamma = bind(prefix + ".wg", Shape4{1, 1, 1, 1}, Init::kOnes);
  p.b_gamma = bind(prefix + ".bg", Shape4{1, 1, 1, 1}, Init::kZeros);
  // zero so a freshly built residual branch contributes nothing but F's output
  p.w_beta = bind(prefix + ".wb", Shape4{1, 1, 1, 1}, Init::kZeros);
  p.b_beta = bind(prefix + ".bb", Shape4{1, 1, 1, 1}, Init::kZeros);
  return p;
}

template <class T>
AttentionParams<T> bind_attn(Binder<T>& bind, const std::string& prefix, int64_t c,
                             int64_t heads, int64_t window) {
  AttentionParams<T> p;
  ConvP<T> qkv = bind_conv(bind, prefix + ".qkv", c, 3 * c, 1);
  p.qkv_w = qkv.w;
  p.qkv_b = qkv.b;
  const int64_t span = 2 * window - 1;
  p.bias_table = bind(prefix + ".bias", Shape4{heads, span * span, 1, 1}, Init::kZeros);
  ConvP<T> agg = bind_conv(bind, prefix + ".agg", c, c, 3);
  p.agg_w = agg.w;
  p.agg_b = agg.b;
  ConvP<T> proj = bind_conv(bind, prefix + ".proj", c, c, 1);
  p.proj_w = proj.w;
  p.proj_b = proj.b;
  p.heads = heads;
  p.window = window;
  return p;
}

template <class T>
CpaParams<T> bind_cpa(Binder<T>& bind, const std::string& prefix, int64_t c,
                      const ModelConfig& cfg) {
  CpaParams<T> p;
  const int64_t hidden = std::max<int64_t>(1, c / cfg.cpa_reduction);
  p.fc1_w = bind(prefix + ".ca.fc1.w", Shape4{hidden, c, 1, 1}, Init::kFanIn, c);
  p.fc1_b = bind(prefix + ".ca.fc1.b", Shape4{1, hidden, 1, 1}, Init::kZeros);
  p.fc2_w = bind(prefix + ".ca.fc2.w", Shape4{c, hidden, 1, 1}, Init::kFanIn, hidden);
  p.fc2_b = bind(prefix + ".ca.fc2.b", Shape4{1, c, 1, 1}, Init::kZeros);
  const int64_t k = cfg.pa_kernel;
  p.pa_w = bind(prefix + ".pa.w", Shape4{1, 2, k, k}, Init::kFanIn, 2 * k * k);
  p.pa_b = bind(prefix + ".pa.b", Shape4{1, 1, 1, 1}, Init::kZeros);
  return p;
}

int64_t mlp_hidden(int64_t c, double ratio) {
  return std::max<int64_t>(1, static_cast<int64_t>(std::llround(static_cast<double>(c) * ratio)));
}

template <class T>
struct ModelParams {
  ConvP<T> cnn_stem, tr_stem;
  std::array<CnnStageParams<T>, 4> cnn;
  struct TrStage {
    ConvP<T> merge;
    TransformerBlockParams<T> b0, b1;
  };
  std::array<TrStage, 4> tr;
  std::array<std::optional<CpaParams<T>>, 4> fuse_cpa;
  std::array<ConvP<T>, 4> dec;
  ConvP<T> final_conv;
};

template <class T>
TransformerBlockParams<T> bind_block(Binder<T>& bind, const std::string& prefix,
                                     const ModelConfig& cfg, int stage) {
  const int64_t c = cfg.widths[stage];
  TransformerBlockParams<T> p;
  p.rn1 = bind_rn(bind, prefix + ".rn1", c);
  p.attn = bind_attn(bind, prefix + ".attn", c, cfg.heads[stage], cfg.window);
  p.rn2 = bind_rn(bind, prefix + ".rn2", c);
  const int64_t hidden = mlp_hidden(c, cfg.mlp_ratio);
  ConvP<T> m1 = bind_conv(bind, prefix + ".mlp1", c, hidden, 1);
  p.mlp1_w = m1.w;
  p.mlp1_b = m1.b;
  ConvP<T> m2 = bind_conv(bind, prefix + ".mlp2", hidden, c, 1);
  p.mlp2_w = m2.w;
  p.mlp2_b = m2.b;
  return p;
}

template <class T>
ModelParams<T> bind_model(const ModelConfig& cfg, Binder<T>& bind) {
  ModelParams<T> mp;
  mp.cnn_stem = bind_conv(bind, "cnn.stem", 3, cfg.widths[0], 3);
  for (int i = 0; i < 4; ++i) {
    const int64_t cin = i == 0 ? cfg.widths[0] : cfg.widths[i - 1];
    const int64_t c = cfg.widths[i];
    const std::string s = "cnn.s" + std::to_string(i);
    CnnStageParams<T> sp;
    ConvP<T> down = bind_conv(bind, s + ".down", cin, c, 3);
    sp.down_w = down.w;
    sp.down_b = down.b;
    ConvP<T> trunk = bind_conv(bind, s + ".trunk", c, c, 3);
    sp.trunk_w = trunk.w;
    sp.trunk_b = trunk.b;
    // without fusion or guidance attention nothing consumes this head
    sp.has_fuse = cfg.use_fa || cfg.use_cpa;
    if (sp.has_fuse) {
      ConvP<T> fuse = bind_conv(bind, s + ".fuse", c, c, 3);
      sp.fuse_w = fuse.w;
      sp.fuse_b = fuse.b;
    }
    ConvP<T> main_h = bind_conv(bind, s + ".main", c, c, 3);
    sp.main_w = main_h.w;
    sp.main_b = main_h.b;
    mp.cnn[i] = sp;
  }
  mp.tr_stem = bind_conv(bind, "tr.stem", 3, cfg.widths[0], 3);
  for (int i = 0; i < 4; ++i) {
    const int64_t cin = i == 0 ? cfg.widths[0] : cfg.widths[i - 1];
    const std::string s = "tr.s" + std::to_string(i);
    mp.tr[i].merge = bind_conv(bind, s + ".merge", cin, cfg.widths[i], 3);
    mp.tr[i].b0 = bind_block(bind, s + ".b0", cfg, i);
    mp.tr[i].b1 = bind_block(bind, s + ".b1", cfg, i);
  }
  if (cfg.use_cpa) {
    for (int i = 0; i < 4; ++i) {
      mp.fuse_cpa[i] =
          bind_cpa(bind, "fuse.s" + std::to_string(i), cfg.widths[i], cfg);
    }
  }
  const std::array<int64_t, 4> dec_in = {2 * cfg.widths[3], 2 * cfg.widths[2],
                                         2 * cfg.widths[1], 2 * cfg.widths[0]};
  const std::array<int64_t, 4> dec_out = {cfg.widths[2], cfg.widths[1], cfg.widths[0],
                                          cfg.widths[0]};
  for (int k = 0; k < 4; ++k) {
    mp.dec[k] = bind_conv(bind, "dec.s" + std::to_string(k), dec_in[k], dec_out[k], 3);
  }
  // zero so the untrained model is the identity restoration
  mp.final_conv = bind_conv(bind, "dec.final", cfg.widths[0], 3, 3, /*zero_init=*/true);
  return mp;
}

}  // namespace

template <class T>
ParamStore<T> init_params(const ModelConfig& cfg, uint64_t seed) {
  cfg.validate();
  ParamStore<T> store;
  Rng rng(seed);
  Binder<T> bind;
  bind.out = &store;
  bind.rng = &rng;
  bind_model(cfg, bind);
  return store;
}

template <class T>
void jitter_zero_params(ParamStore<T>& params, Rng& rng, T scale) {
  for (auto& kv : params.items()) {
    Tensor<T>& t = kv.second;
    T* p = t.data();
    const int64_t n = t.shape().numel();
    bool all_zero = true;
    for (int64_t i = 0; i < n; ++i) {
      if (p[i] != T(0)) {
        all_zero = false;
        break;
      }
    }
    if (!all_zero) continue;
    for (int64_t i = 0; i < n; ++i) p[i] = static_cast<T>(rng.uniform(-1.0, 1.0)) * scale;
  }
}

// ---- forward ----

template <class T>
Tensor<T> model_forward(const Tensor<T>& image, const ModelConfig& cfg,
                        const ParamStore<T>& params, bool clamp_output) {
  cfg.validate();
  const Shape4 s = image.shape();
  if (s.c != 3) {
    throw std::invalid_argument("model_forward: expected a 3-channel image, got c=" +
                                std::to_string(s.c));
  }
  Binder<T> bind;
  bind.in = &params;
  ModelParams<T> mp = bind_model(cfg, bind);

  auto check = [](const Tensor<T>& t, const std::string& where) {
    if (!t.all_finite()) {
      throw std::runtime_error("model_forward: non-finite activation after " + where);
    }
    return t;
  };
  if (!image.all_finite()) {
    throw std::invalid_argument("model_forward: input image contains non-finite values");
  }

  const int64_t mult = cfg.pad_multiple();
  const int64_t hp = ceil_to(s.h, mult);
  const int64_t wp = ceil_to(s.w, mult);
  Tensor<T> x = (hp != s.h || wp != s.w)
                    ? reflect_pad2d(image, 0, hp - s.h, 0, wp - s.w)
                    : image;

  Tensor<T> cn =
      check(relu(conv2d(x, mp.cnn_stem.w, mp.cnn_stem.b, 1, 1, PadMode::kReflect)),
            "cnn stem");
  Tensor<T> tr_in =
      cfg.downsample_factor == 2 ? resize2d(x, ResizeFactor::kDown2, ResizeMode::kBilinear)
                                 : x;
  Tensor<T> tq = check(
      conv2d(tr_in, mp.tr_stem.w, mp.tr_stem.b, 1, 1, PadMode::kReflect), "transformer stem");

  std::array<Tensor<T>, 4> guided;
  for (int i = 0; i < 4; ++i) {
    auto heads_pair = cnn_stage(cn, mp.cnn[i]);
    check(heads_pair.second, "cnn stage " + std::to_string(i));
    tq = conv2d(tq, mp.tr[i].merge.w, mp.tr[i].merge.b, 2, 1, PadMode::kReflect);
    tq = transformer_block(tq, mp.tr[i].b0, 0);
    tq = transformer_block(tq, mp.tr[i].b1, cfg.window / 2);
    check(tq, "transformer stage " + std::to_string(i));
    guided[i] = check(
        fuse_and_guide(tq, heads_pair.first, heads_pair.second, cfg, mp.fuse_cpa[i]),
        "fusion stage " + std::to_string(i));
    cn = guided[i];
  }

  Tensor<T> t_up = cfg.downsample_factor == 2
                       ? resize2d(tq, ResizeFactor::kUp2, ResizeMode::kBilinear)
                       : tq;
  Tensor<T> d = add(guided[3], t_up);
  for (int k = 0; k < 4; ++k) {
    d = concat_channels(d, guided[3 - k]);
    d = relu(conv2d(d, mp.dec[k].w, mp.dec[k].b, 1, 1, PadMode::kReflect));
    d = resize2d(d, ResizeFactor::kUp2, ResizeMode::kNearest);
  }
  check(d, "decoder");
  Tensor<T> residual =
      conv2d(d, mp.final_conv.w, mp.final_conv.b, 1, 1, PadMode::kReflect);
  Tensor<T> out = add(x, residual);
  if (hp != s.h || wp != s.w) out = crop2d(out, 0, 0, s.h, s.w);
  if (clamp_output) out = clamp01(out);
  return check(out, "output head");
}

// ---- parameter / MAC accounting ----

int64_t conv_param_count(int64_t in_c, int64_t out_c, int64_t k, bool bias) {
  return out_c * in_c * k * k + (bias ? out_c : 0);
}

CountResult count_params_macs(const ModelConfig& cfg, int64_t h, int64_t w) {
  cfg.validate();
  if (h < 1 || w < 1) {
    throw std::invalid_argument("count_params_macs: non-positive input size " +
                                std::to_string(h) + "x" + std::to_string(w));
  }
  CountResult r;
  auto conv = [&r](int64_t& bucket, int64_t in_c, int64_t out_c, int64_t k, int64_t oh,
                   int64_t ow) {
    bucket += conv_param_count(in_c, out_c, k);
    r.macs += out_c * in_c * k * k * oh * ow;
  };

  const int64_t hp = ceil_to(h, cfg.pad_multiple());
  const int64_t wp = ceil_to(w, cfg.pad_multiple());

  int64_t ch = hp, cw = wp;
  conv(r.cnn_params, 3, cfg.widths[0], 3, ch, cw);
  int64_t prev = cfg.widths[0];
  const bool stage_fuse = cfg.use_fa || cfg.use_cpa;
  for (int i = 0; i < 4; ++i) {
    const int64_t c = cfg.widths[i];
    ch /= 2;
    cw /= 2;
    conv(r.cnn_params, prev, c, 3, ch, cw);
    conv(r.cnn_params, c, c, 3, ch, cw);
    if (stage_fuse) conv(r.cnn_params, c, c, 3, ch, cw);
    conv(r.cnn_params, c, c, 3, ch, cw);
    prev = c;
  }

  int64_t th = hp / cfg.downsample_factor, tw = wp / cfg.downsample_factor;
  conv(r.transformer_params, 3, cfg.widths[0], 3, th, tw);
  prev = cfg.widths[0];
  const int64_t span = 2 * cfg.window - 1;
  const int64_t tok = cfg.window * cfg.window;
  for (int i = 0; i < 4; ++i) {
    const int64_t c = cfg.widths[i];
    th /= 2;
    tw /= 2;
    conv(r.transformer_params, prev, c, 3, th, tw);
    const int64_t n_windows =
        (ceil_to(th, cfg.window) / cfg.window) * (ceil_to(tw, cfg.window) / cfg.window);
    const int64_t hidden = mlp_hidden(c, cfg.mlp_ratio);
    for (int b = 0; b < 2; ++b) {
      r.transformer_params += 2 * (2 * c + 4);  // two rescale norms
      conv(r.transformer_params, c, 3 * c, 1, th, tw);        // qkv
      r.transformer_params += cfg.heads[i] * span * span;     // bias table
      conv(r.transformer_params, c, c, 3, th, tw);            // V aggregation
      conv(r.transformer_params, c, c, 1, th, tw);            // output projection
      r.macs += n_windows * 2 * tok * tok * c;                // QK^T and weights*V
      conv(r.transformer_params, c, hidden, 1, th, tw);
      conv(r.transformer_params, hidden, c, 1, th, tw);
    }
    prev = c;
  }

  if (cfg.use_cpa) {
    int64_t fh = hp, fw = wp;
    for (int i = 0; i < 4; ++i) {
      const int64_t c = cfg.widths[i];
      fh /= 2;
      fw /= 2;
      const int64_t hidden = std::max<int64_t>(1, c / cfg.cpa_reduction);
      r.fuse_params += hidden * c + hidden + c * hidden + c;
      r.macs += 2 * (hidden * c + c * hidden);  // shared MLP on avg and max vectors
      conv(r.fuse_params, 2, 1, cfg.pa_kernel, fh, fw);
    }
  }

  int64_t dh = hp / 16, dw = wp / 16;
  const std::array<int64_t, 4> dec_in = {2 * cfg.widths[3], 2 * cfg.widths[2],
                                         2 * cfg.widths[1], 2 * cfg.widths[0]};
  const std::array<int64_t, 4> dec_out = {cfg.widths[2], cfg.widths[1], cfg.widths[0],
                                          cfg.widths[0]};
  for (int k = 0; k < 4; ++k) {
    conv(r.decoder_params, dec_in[k], dec_out[k], 3, dh, dw);
    dh *= 2;
    dw *= 2;
  }
  conv(r.decoder_params, cfg.widths[0], 3, 3, hp, wp);

  r.params = r.cnn_params + r.transformer_params + r.fuse_params + r.decoder_params;
  return r;
}

// ---- instantiations ----

template class ParamStore<float>;
template class ParamStore<double>;
template struct RescaleNormParams<float>;
template struct RescaleNormParams<double>;

#define IGDH_INSTANTIATE_NET(T)                                                          \
  template Tensor<T> rescale_norm<T>(const Tensor<T>&, const RescaleNormParams<T>&,     \
                                     const std::function<Tensor<T>(const Tensor<T>&)>&); \
  template std::pair<Tensor<T>, WindowPad> window_partition<T>(const Tensor<T>&,        \
                                                               int64_t, int64_t);       \
  template Tensor<T> window_merge<T>(const Tensor<T>&, const WindowPad&);               \
  template Tensor<T> window_attention_core<T>(const Tensor<T>&, const Tensor<T>&,       \
                                              const Tensor<T>&, const Tensor<T>&,       \
                                              int64_t);                                  \
  template Tensor<T> window_attention<T>(const Tensor<T>&, const AttentionParams<T>&,   \
                                         int64_t);                                       \
  template Tensor<T> transformer_block<T>(const Tensor<T>&,                             \
                                          const TransformerBlockParams<T>&, int64_t);   \
  template std::pair<Tensor<T>, Tensor<T>> cnn_stage<T>(const Tensor<T>&,               \
                                                        const CnnStageParams<T>&);      \
  template Tensor<T> channel_attention<T>(const Tensor<T>&, const CpaParams<T>&);       \
  template Tensor<T> pixel_attention<T>(const Tensor<T>&, const CpaParams<T>&);         \
  template Tensor<T> cpa<T>(const Tensor<T>&, const CpaParams<T>&);                     \
  template Tensor<T> fuse_and_guide<T>(const Tensor<T>&, const Tensor<T>&,              \
                                       const Tensor<T>&, const ModelConfig&,            \
                                       const std::optional<CpaParams<T>>&);             \
  template ParamStore<T> init_params<T>(const ModelConfig&, uint64_t);                  \
  template void jitter_zero_params<T>(ParamStore<T>&, Rng&, T);                         \
  template Tensor<T> model_forward<T>(const Tensor<T>&, const ModelConfig&,             \
                                      const ParamStore<T>&, bool);

IGDH_INSTANTIATE_NET(float)
IGDH_INSTANTIATE_NET(double)

}  // namespace igdh
