#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <cmath>
#include <cstdio>
#include <filesystem>
#include <fstream>

#include "doctest.h"
#include "igdh/checkpoint.hpp"
#include "igdh/network.hpp"
#include "igdh/ops.hpp"
#include "igdh/tensor.hpp"

using namespace igdh;

namespace {

template <class T>
Tensor<T> rand_t(Shape4 s, uint64_t seed, T lo = T(-2), T hi = T(2)) {
  Rng rng(seed);
  auto t = Tensor<T>::zeros(s);
  for (auto& v : t.vec()) v = static_cast<T>(rng.uniform(lo, hi));
  return t;
}

template <class T>
T max_abs_diff(const Tensor<T>& a, const Tensor<T>& b) {
  REQUIRE(a.shape() == b.shape());
  T m = 0;
  for (int64_t i = 0; i < a.numel(); ++i)
    m = std::max(m, std::abs(a.data()[i] - b.data()[i]));
  return m;
}

template <class T>
bool bitwise_equal(const Tensor<T>& a, const Tensor<T>& b) {
  if (!(a.shape() == b.shape())) return false;
  for (int64_t i = 0; i < a.numel(); ++i)
    if (a.data()[i] != b.data()[i]) return false;
  return true;
}

// identity-map configuration for a transformer block: residual branches are
// killed by zero attention projection and zero second MLP conv
template <class T>
TransformerBlockParams<T> identity_block(int64_t c, int64_t heads, int64_t window,
                                         uint64_t seed) {
  TransformerBlockParams<T> p;
  auto rn = [&](uint64_t s) {
    RescaleNormParams<T> r = RescaleNormParams<T>::identity(c);
    r.w_beta = Tensor<T>::zeros({1, 1, 1, 1});
    r.gamma = rand_t<T>({1, c, 1, 1}, s, T(0.5), T(1.5));
    return r;
  };
  p.rn1 = rn(seed + 1);
  p.rn2 = rn(seed + 2);
  p.attn.qkv_w = rand_t<T>({3 * c, c, 1, 1}, seed + 3, T(-0.4), T(0.4));
  p.attn.qkv_b = rand_t<T>({1, 3 * c, 1, 1}, seed + 4, T(-0.1), T(0.1));
  p.attn.bias_table =
      rand_t<T>({heads, (2 * window - 1) * (2 * window - 1), 1, 1}, seed + 5);
  p.attn.agg_w = rand_t<T>({c, c, 3, 3}, seed + 6, T(-0.3), T(0.3));
  p.attn.agg_b = Tensor<T>::zeros({1, c, 1, 1});
  p.attn.proj_w = Tensor<T>::zeros({c, c, 1, 1});
  p.attn.proj_b = Tensor<T>::zeros({1, c, 1, 1});
  p.attn.heads = heads;
  p.attn.window = window;
  p.mlp1_w = rand_t<T>({2 * c, c, 1, 1}, seed + 7, T(-0.4), T(0.4));
  p.mlp1_b = rand_t<T>({1, 2 * c, 1, 1}, seed + 8, T(-0.1), T(0.1));
  p.mlp2_w = Tensor<T>::zeros({c, 2 * c, 1, 1});
  p.mlp2_b = Tensor<T>::zeros({1, c, 1, 1});
  return p;
}

template <class T>
CpaParams<T> zero_cpa(int64_t c, int64_t hidden, int64_t k) {
  CpaParams<T> p;
  p.fc1_w = Tensor<T>::zeros({hidden, c, 1, 1});
  p.fc1_b = Tensor<T>::zeros({1, hidden, 1, 1});
  p.fc2_w = Tensor<T>::zeros({c, hidden, 1, 1});
  p.fc2_b = Tensor<T>::zeros({1, c, 1, 1});
  p.pa_w = Tensor<T>::zeros({1, 2, k, k});
  p.pa_b = Tensor<T>::zeros({1, 1, 1, 1});
  return p;
}

template <class T>
CpaParams<T> rand_cpa(int64_t c, int64_t hidden, int64_t k, uint64_t seed) {
  CpaParams<T> p;
  p.fc1_w = rand_t<T>({hidden, c, 1, 1}, seed + 1, T(-0.5), T(0.5));
  p.fc1_b = rand_t<T>({1, hidden, 1, 1}, seed + 2, T(-0.1), T(0.1));
  p.fc2_w = rand_t<T>({c, hidden, 1, 1}, seed + 3, T(-0.5), T(0.5));
  p.fc2_b = rand_t<T>({1, c, 1, 1}, seed + 4, T(-0.1), T(0.1));
  p.pa_w = rand_t<T>({1, 2, k, k}, seed + 5, T(-0.3), T(0.3));
  p.pa_b = rand_t<T>({1, 1, 1, 1}, seed + 6, T(-0.1), T(0.1));
  return p;
}

struct TempDir {
  std::filesystem::path path;
  TempDir() {
    path = std::filesystem::temp_directory_path() /
           ("igdh_net_" + std::to_string(::getpid()) + "_" +
            std::to_string(reinterpret_cast<uintptr_t>(this)));
    std::filesystem::create_directories(path);
  }
  ~TempDir() {
    std::error_code ec;
    std::filesystem::remove_all(path, ec);
  }
};

}  // namespace

// ---- config ----

TEST_CASE("ModelConfig: validation rejects inconsistent settings") {
  ModelConfig c = ModelConfig::tiny();
  CHECK_NOTHROW(c.validate());
  c.widths = {8, 16, 25, 32};  // 25 not divisible by heads[2]=4
  CHECK_THROWS_WITH_AS(c.validate(), doctest::Contains("divisible"),
                       std::invalid_argument);
  c = ModelConfig::tiny();
  c.window = 1;
  CHECK_THROWS_WITH_AS(c.validate(), doctest::Contains("window"), std::invalid_argument);
  c = ModelConfig::tiny();
  c.downsample_factor = 3;
  CHECK_THROWS_WITH_AS(c.validate(), doctest::Contains("downsample_factor"),
                       std::invalid_argument);
  c = ModelConfig::tiny();
  c.pa_kernel = 4;
  CHECK_THROWS_WITH_AS(c.validate(), doctest::Contains("pa_kernel"),
                       std::invalid_argument);
}

TEST_CASE("ModelConfig: JSON round trip preserves every field") {
  ModelConfig c = ModelConfig::small_default();
  c.window = 5;
  c.downsample_factor = 1;
  c.use_fa = false;
  c.use_cpa = false;
  c.mlp_ratio = 3.0;
  ModelConfig d = ModelConfig::from_json(c.to_json());
  CHECK(d.widths == c.widths);
  CHECK(d.heads == c.heads);
  CHECK(d.window == 5);
  CHECK(d.downsample_factor == 1);
  CHECK(d.use_fa == false);
  CHECK(d.use_cpa == false);
  CHECK(d.mlp_ratio == 3.0);
}

TEST_CASE("ParamStore: ordered names, duplicate and lookup errors") {
  ParamStore<float> s;
  s.add("b", Tensor<float>::zeros({1, 1, 1, 1}));
  s.add("a", Tensor<float>::zeros({1, 2, 1, 1}));
  CHECK(s.items()[0].first == "b");
  CHECK(s.items()[1].first == "a");
  CHECK(s.total_elements() == 3);
  CHECK_THROWS_WITH_AS(s.add("a", Tensor<float>::zeros({1, 1, 1, 1})),
                       doctest::Contains("duplicate"), std::invalid_argument);
  CHECK_THROWS_WITH_AS(s.get("missing"), doctest::Contains("unknown"), std::out_of_range);
}

// ---- rescale norm ----

TEST_CASE("rescale_norm: identity parameters give the identity map") {
  auto x = rand_t<double>({2, 5, 6, 7}, 101);
  auto p = RescaleNormParams<double>::identity(5);
  auto y = rescale_norm<double>(x, p, [](const Tensor<double>& v) { return v; });
  CHECK(max_abs_diff(x, y) <= 1e-6);
}

TEST_CASE("rescale_norm: constant input is guarded and counted") {
  reset_degenerate_sigma_count();
  auto x = Tensor<double>::full({1, 3, 4, 4}, 0.7);
  auto p = RescaleNormParams<double>::identity(3);
  auto y = rescale_norm<double>(x, p, [](const Tensor<double>& v) { return v; });
  CHECK(y.all_finite());
  CHECK(degenerate_sigma_count() == 3);  // one guarded sigma per (n,c) pair
}

TEST_CASE("rescale_norm: wrapped function must preserve shape") {
  auto x = rand_t<double>({1, 2, 4, 4}, 103);
  auto p = RescaleNormParams<double>::identity(2);
  CHECK_THROWS_WITH_AS(
      rescale_norm<double>(
          x, p, [](const Tensor<double>& v) { return spatial_mean(v); }),
      doctest::Contains("shape"), std::invalid_argument);
}

TEST_CASE("grad_check: rescale_norm wrapping a smooth nonlinearity") {
  auto x = rand_t<double>({2, 3, 4, 5}, 104);
  RescaleNormParams<double> p;
  p.gamma = rand_t<double>({1, 3, 1, 1}, 105, 0.5, 1.5);
  p.beta = rand_t<double>({1, 3, 1, 1}, 106, -0.2, 0.2);
  p.w_gamma = rand_t<double>({1, 1, 1, 1}, 107, 0.5, 1.5);
  p.b_gamma = rand_t<double>({1, 1, 1, 1}, 108, -0.2, 0.2);
  p.w_beta = rand_t<double>({1, 1, 1, 1}, 109, 0.5, 1.5);
  p.b_beta = rand_t<double>({1, 1, 1, 1}, 110, -0.2, 0.2);
  std::vector<Tensor<double>> inputs = {x, p.gamma, p.beta, p.w_gamma,
                                        p.b_gamma, p.w_beta, p.b_beta};
  for (auto& t : inputs) t.set_requires_grad(true);
  auto f = [&] {
    return mean_all(rescale_norm<double>(
        x, p, [](const Tensor<double>& v) { return sigmoid(v); }));
  };
  CHECK(grad_check(f, inputs, 1e-5) < 1e-5);
}

// ---- windowing ----

TEST_CASE("window_partition: exact window grid and pad record") {
  auto x = rand_t<double>({1, 3, 7, 7}, 120);
  auto [w, rec] = window_partition(x, 7, 0);
  CHECK(w.shape() == Shape4{1, 1, 49, 3});
  CHECK(rec.padded == Shape4{1, 3, 7, 7});

  auto x8 = rand_t<double>({1, 3, 8, 8}, 121);
  auto [w8, rec8] = window_partition(x8, 7, 0);
  CHECK(rec8.padded == Shape4{1, 3, 14, 14});
  CHECK(w8.shape() == Shape4{4, 1, 49, 3});
}

TEST_CASE("window_partition/merge: bitwise round trip, padded and shifted") {
  for (int64_t shift : {int64_t(0), int64_t(3)}) {
    auto x = rand_t<double>({2, 3, 9, 11}, 122 + static_cast<uint64_t>(shift));
    auto [w, rec] = window_partition(x, 7, shift);
    auto back = window_merge(w, rec);
    CHECK(bitwise_equal(x, back));
  }
  auto x = rand_t<double>({1, 2, 14, 14}, 124);
  auto [w, rec] = window_partition(x, 7, 2);
  CHECK(bitwise_equal(x, window_merge(w, rec)));
}

TEST_CASE("window_partition: shift domain errors") {
  auto x = rand_t<double>({1, 1, 8, 8}, 125);
  CHECK_THROWS_WITH_AS(window_partition(x, 7, 7), doctest::Contains("shift"),
                       std::invalid_argument);
  CHECK_THROWS_WITH_AS(window_partition(x, 7, -1), doctest::Contains("shift"),
                       std::invalid_argument);
  CHECK_THROWS_WITH_AS(window_partition(x, 1, 0), doctest::Contains("window"),
                       std::invalid_argument);
}

// ---- attention ----

TEST_CASE("window_attention_core: matches a scalar hand computation (2 tokens)") {
  // one window of two 4-dim tokens, one head
  std::vector<double> qd = {0.3, -0.5, 0.8, 0.1, -0.2, 0.4, 0.0, 0.9};
  std::vector<double> kd = {0.7, 0.2, -0.3, 0.5, 0.1, -0.6, 0.4, 0.2};
  std::vector<double> vd = {1.0, 2.0, -1.0, 0.5, -0.5, 1.5, 2.5, -2.0};
  std::vector<double> bd = {0.1, -0.2, 0.05, 0.3};
  auto q = Tensor<double>::from_data({1, 1, 2, 4}, qd);
  auto k = Tensor<double>::from_data({1, 1, 2, 4}, kd);
  auto v = Tensor<double>::from_data({1, 1, 2, 4}, vd);
  auto b = Tensor<double>::from_data({1, 1, 2, 2}, bd);
  auto out = window_attention_core(q, k, v, b, 1);
  CHECK(out.shape() == Shape4{1, 1, 2, 4});

  const double inv_sqrt_d = 1.0 / std::sqrt(4.0);
  for (int i = 0; i < 2; ++i) {
    double logit[2];
    for (int j = 0; j < 2; ++j) {
      double dot = 0;
      for (int d = 0; d < 4; ++d) dot += qd[i * 4 + d] * kd[j * 4 + d];
      logit[j] = dot * inv_sqrt_d + bd[i * 2 + j];
    }
    const double m = std::max(logit[0], logit[1]);
    const double e0 = std::exp(logit[0] - m), e1 = std::exp(logit[1] - m);
    const double w0 = e0 / (e0 + e1), w1 = e1 / (e0 + e1);
    for (int d = 0; d < 4; ++d) {
      const double expect = w0 * vd[0 * 4 + d] + w1 * vd[1 * 4 + d];
      CHECK(out.at(0, 0, i, d) == doctest::Approx(expect).epsilon(1e-9));
    }
  }
}

TEST_CASE("window_attention_core: two heads equal two independent single heads") {
  const int64_t tok = 3, c = 4;
  auto q = rand_t<double>({1, 1, tok, c}, 130);
  auto k = rand_t<double>({1, 1, tok, c}, 131);
  auto v = rand_t<double>({1, 1, tok, c}, 132);
  auto bias = rand_t<double>({1, 2, tok, tok}, 133);
  auto full = window_attention_core(q, k, v, bias, 2);

  for (int h = 0; h < 2; ++h) {
    std::vector<double> qh(tok * 2), kh(tok * 2), vh(tok * 2), bh(tok * tok);
    for (int64_t t = 0; t < tok; ++t) {
      for (int64_t d = 0; d < 2; ++d) {
        qh[t * 2 + d] = q.at(0, 0, t, h * 2 + d);
        kh[t * 2 + d] = k.at(0, 0, t, h * 2 + d);
        vh[t * 2 + d] = v.at(0, 0, t, h * 2 + d);
      }
    }
    for (int64_t i = 0; i < tok; ++i)
      for (int64_t j = 0; j < tok; ++j) bh[i * tok + j] = bias.at(0, h, i, j);
    auto one = window_attention_core(
        Tensor<double>::from_data({1, 1, tok, 2}, qh),
        Tensor<double>::from_data({1, 1, tok, 2}, kh),
        Tensor<double>::from_data({1, 1, tok, 2}, vh),
        Tensor<double>::from_data({1, 1, tok, tok}, bh), 1);
    for (int64_t t = 0; t < tok; ++t)
      for (int64_t d = 0; d < 2; ++d)
        CHECK(full.at(0, 0, t, h * 2 + d) ==
              doctest::Approx(one.at(0, 0, t, d)).epsilon(1e-12));
  }
}

TEST_CASE("window_attention_core: shape and head-divisibility errors") {
  auto q = rand_t<double>({1, 1, 4, 6}, 134);
  auto bias = rand_t<double>({1, 4, 4, 4}, 135);
  CHECK_THROWS_WITH_AS(window_attention_core(q, q, q, bias, 4),
                       doctest::Contains("divisible"), std::invalid_argument);
  auto bias_bad = rand_t<double>({1, 2, 3, 3}, 136);
  CHECK_THROWS_WITH_AS(window_attention_core(q, q, q, bias_bad, 2),
                       doctest::Contains("bias"), std::invalid_argument);
}

TEST_CASE("window_attention: zero query/key weights average each window") {
  const int64_t c = 2;
  auto x = rand_t<double>({1, c, 7, 7}, 140);
  AttentionParams<double> p;
  std::vector<double> qkvw(3 * c * c, 0.0);
  for (int64_t i = 0; i < c; ++i) qkvw[(2 * c + i) * c + i] = 1.0;  // V = x
  p.qkv_w = Tensor<double>::from_data({3 * c, c, 1, 1}, qkvw);
  p.qkv_b = Tensor<double>::zeros({1, 3 * c, 1, 1});
  p.bias_table = Tensor<double>::zeros({1, 169, 1, 1});
  p.agg_w = Tensor<double>::zeros({c, c, 3, 3});
  p.agg_b = Tensor<double>::zeros({1, c, 1, 1});
  std::vector<double> projw(c * c, 0.0);
  for (int64_t i = 0; i < c; ++i) projw[i * c + i] = 1.0;
  p.proj_w = Tensor<double>::from_data({c, c, 1, 1}, projw);
  p.proj_b = Tensor<double>::zeros({1, c, 1, 1});
  p.heads = 1;
  p.window = 7;

  auto y = window_attention(x, p, 0);
  for (int64_t ch = 0; ch < c; ++ch) {
    double mean = 0;
    for (int64_t i = 0; i < 7; ++i)
      for (int64_t j = 0; j < 7; ++j) mean += x.at(0, ch, i, j) * (1.0 / 49.0);
    for (int64_t i = 0; i < 7; ++i)
      for (int64_t j = 0; j < 7; ++j)
        CHECK(y.at(0, ch, i, j) == doctest::Approx(mean).epsilon(1e-12));
  }
}

TEST_CASE("window_attention: shift and bias table both change the output") {
  const int64_t c = 4;
  auto x = rand_t<double>({1, c, 10, 10}, 141);
  AttentionParams<double> p;
  p.qkv_w = rand_t<double>({3 * c, c, 1, 1}, 142, -0.5, 0.5);
  p.qkv_b = rand_t<double>({1, 3 * c, 1, 1}, 143, -0.1, 0.1);
  p.bias_table = rand_t<double>({2, 25, 1, 1}, 144);
  p.agg_w = rand_t<double>({c, c, 3, 3}, 145, -0.3, 0.3);
  p.agg_b = rand_t<double>({1, c, 1, 1}, 146, -0.1, 0.1);
  p.proj_w = rand_t<double>({c, c, 1, 1}, 147, -0.5, 0.5);
  p.proj_b = rand_t<double>({1, c, 1, 1}, 148, -0.1, 0.1);
  p.heads = 2;
  p.window = 3;

  auto y0 = window_attention(x, p, 0);
  auto y1 = window_attention(x, p, 1);
  CHECK(max_abs_diff(y0, y1) > 1e-6);

  AttentionParams<double> pz = p;
  pz.bias_table = Tensor<double>::zeros({2, 25, 1, 1});
  CHECK(max_abs_diff(y0, window_attention(x, pz, 0)) > 1e-6);
}

TEST_CASE("grad_check: window_attention with shift and padding") {
  const int64_t c = 4;
  auto x = rand_t<double>({1, c, 5, 4}, 150);
  AttentionParams<double> p;
  p.qkv_w = rand_t<double>({3 * c, c, 1, 1}, 151, -0.5, 0.5);
  p.qkv_b = rand_t<double>({1, 3 * c, 1, 1}, 152, -0.1, 0.1);
  p.bias_table = rand_t<double>({2, 25, 1, 1}, 153, -0.5, 0.5);
  p.agg_w = rand_t<double>({c, c, 3, 3}, 154, -0.3, 0.3);
  p.agg_b = rand_t<double>({1, c, 1, 1}, 155, -0.1, 0.1);
  p.proj_w = rand_t<double>({c, c, 1, 1}, 156, -0.5, 0.5);
  p.proj_b = rand_t<double>({1, c, 1, 1}, 157, -0.1, 0.1);
  p.heads = 2;
  p.window = 3;
  std::vector<Tensor<double>> inputs = {x,       p.qkv_w, p.qkv_b, p.bias_table,
                                        p.agg_w, p.agg_b, p.proj_w, p.proj_b};
  for (auto& t : inputs) t.set_requires_grad(true);
  auto target = rand_t<double>({1, c, 5, 4}, 158);
  auto f = [&] { return l1_loss(window_attention(x, p, 1), target); };
  CHECK(grad_check(f, inputs, 1e-5, 6) < 1e-3);
}

// ---- transformer block ----

TEST_CASE("transformer_block: zero residual projections give exact identity") {
  auto p = identity_block<double>(4, 2, 3, 160);
  auto x = rand_t<double>({2, 4, 6, 6}, 161);
  auto y = transformer_block(x, p, 0);
  CHECK(bitwise_equal(x, y));
  auto y1 = transformer_block(x, p, 1);
  CHECK(bitwise_equal(x, y1));
}

TEST_CASE("transformer_block: nonzero projections move away from identity") {
  auto p = identity_block<double>(4, 2, 3, 162);
  p.attn.proj_w = rand_t<double>({4, 4, 1, 1}, 163, -0.5, 0.5);
  auto x = rand_t<double>({1, 4, 6, 6}, 164);
  CHECK(max_abs_diff(x, transformer_block(x, p, 0)) > 1e-6);
}

// ---- cnn stage ----

TEST_CASE("cnn_stage: halves resolution and emits two heads") {
  CnnStageParams<double> p;
  p.down_w = rand_t<double>({6, 4, 3, 3}, 170, -0.3, 0.3);
  p.down_b = rand_t<double>({1, 6, 1, 1}, 171, -0.1, 0.1);
  p.trunk_w = rand_t<double>({6, 6, 3, 3}, 172, -0.3, 0.3);
  p.trunk_b = rand_t<double>({1, 6, 1, 1}, 173, -0.1, 0.1);
  p.fuse_w = rand_t<double>({6, 6, 3, 3}, 174, -0.3, 0.3);
  p.fuse_b = rand_t<double>({1, 6, 1, 1}, 175, -0.1, 0.1);
  p.main_w = rand_t<double>({6, 6, 3, 3}, 176, -0.3, 0.3);
  p.main_b = rand_t<double>({1, 6, 1, 1}, 177, -0.1, 0.1);
  auto x = rand_t<double>({2, 4, 8, 10}, 178);
  auto [f, m] = cnn_stage(x, p);
  CHECK(f.shape() == Shape4{2, 6, 4, 5});
  CHECK(m.shape() == Shape4{2, 6, 4, 5});
  CHECK(max_abs_diff(f, m) > 1e-9);  // distinct heads
  for (int64_t i = 0; i < f.numel(); ++i) CHECK(f.data()[i] >= 0.0);
}

// ---- CPA ----

TEST_CASE("cpa: zero parameters give exactly a quarter of the input") {
  auto x = rand_t<double>({2, 6, 5, 5}, 180);
  auto p = zero_cpa<double>(6, 2, 7);
  auto y = cpa(x, p);
  auto expect = scale(x, 0.25);
  CHECK(bitwise_equal(y, expect));
}

TEST_CASE("channel/pixel attention: shapes and (0,1) range") {
  auto x = rand_t<double>({2, 6, 5, 4}, 181);
  auto p = rand_cpa<double>(6, 2, 7, 182);
  auto ca = channel_attention(x, p);
  auto pa = pixel_attention(x, p);
  CHECK(ca.shape() == Shape4{2, 6, 1, 1});
  CHECK(pa.shape() == Shape4{2, 1, 5, 4});
  for (int64_t i = 0; i < ca.numel(); ++i) {
    CHECK(ca.data()[i] > 0.0);
    CHECK(ca.data()[i] < 1.0);
  }
  for (int64_t i = 0; i < pa.numel(); ++i) {
    CHECK(pa.data()[i] > 0.0);
    CHECK(pa.data()[i] < 1.0);
  }
}

TEST_CASE("grad_check: channel attention, pixel attention and full cpa") {
  auto x = rand_t<double>({1, 4, 5, 5}, 183);
  auto p = rand_cpa<double>(4, 2, 3, 184);
  std::vector<Tensor<double>> inputs = {x,       p.fc1_w, p.fc1_b, p.fc2_w,
                                        p.fc2_b, p.pa_w,  p.pa_b};
  for (auto& t : inputs) t.set_requires_grad(true);
  CHECK(grad_check([&] { return mean_all(channel_attention(x, p)); },
                   {x, p.fc1_w, p.fc1_b, p.fc2_w, p.fc2_b}, 1e-5, 8) < 1e-3);
  CHECK(grad_check([&] { return mean_all(pixel_attention(x, p)); },
                   {x, p.pa_w, p.pa_b}, 1e-5, 8) < 1e-3);
  CHECK(grad_check([&] { return mean_all(cpa(x, p)); }, inputs, 1e-5, 8) < 1e-3);
}

// ---- fuse and guide ----

TEST_CASE("fuse_and_guide: flags wire the advertised graphs") {
  ModelConfig cfg = ModelConfig::tiny();
  cfg.downsample_factor = 2;
  auto t = rand_t<double>({1, 6, 4, 4}, 190);
  auto cf = rand_t<double>({1, 6, 8, 8}, 191);
  auto cm = rand_t<double>({1, 6, 8, 8}, 192);
  auto p = rand_cpa<double>(6, 2, 7, 193);
  std::optional<CpaParams<double>> cp(p);

  cfg.use_fa = false;
  cfg.use_cpa = false;
  CHECK(bitwise_equal(fuse_and_guide<double>(t, cf, cm, cfg, std::nullopt), cm));

  cfg.use_fa = true;
  auto up = resize2d(t, ResizeFactor::kUp2, ResizeMode::kBilinear);
  auto expect_fa = add(cm, add(up, cf));
  CHECK(max_abs_diff(fuse_and_guide<double>(t, cf, cm, cfg, std::nullopt), expect_fa) == 0.0);

  cfg.use_cpa = true;
  auto s = add(up, cf);
  auto expect_full = mul(mul(cm, channel_attention(s, p)), pixel_attention(s, p));
  CHECK(max_abs_diff(fuse_and_guide(t, cf, cm, cfg, cp), expect_full) == 0.0);

  cfg.use_fa = false;  // gate computed from the CNN fusion head only
  auto t2 = rand_t<double>({1, 6, 4, 4}, 194);
  auto a = fuse_and_guide(t, cf, cm, cfg, cp);
  auto b = fuse_and_guide(t2, cf, cm, cfg, cp);
  CHECK(bitwise_equal(a, b));
}

TEST_CASE("fuse_and_guide: shape and flag errors") {
  ModelConfig cfg = ModelConfig::tiny();
  auto t = rand_t<double>({1, 6, 4, 4}, 195);
  auto cf = rand_t<double>({1, 6, 8, 8}, 196);
  auto bad = rand_t<double>({1, 6, 8, 6}, 197);
  CHECK_THROWS_WITH_AS(fuse_and_guide<double>(t, cf, bad, cfg, std::nullopt),
                       doctest::Contains("match"), std::invalid_argument);
  auto t_bad = rand_t<double>({1, 6, 8, 8}, 198);  // wrong ratio for ds=2
  CHECK_THROWS_WITH_AS(fuse_and_guide<double>(t_bad, cf, cf, cfg, std::nullopt),
                       doctest::Contains("downsample"), std::invalid_argument);
  cfg.use_cpa = true;
  CHECK_THROWS_WITH_AS(fuse_and_guide<double>(t, cf, cf, cfg, std::nullopt),
                       doctest::Contains("CPA"), std::logic_error);
}

// ---- whole model ----

TEST_CASE("model_forward: fresh model is the identity restoration, bitwise") {
  ModelConfig cfg = ModelConfig::tiny();
  auto params = init_params<float>(cfg, 3);
  auto img = rand_t<float>({1, 3, 20, 28}, 200, 0.0f, 1.0f);
  auto out = model_forward(img, cfg, params);
  CHECK(bitwise_equal(out, img));
}

TEST_CASE("model_forward: arbitrary sizes come back at input shape") {
  ModelConfig cfg = ModelConfig::tiny();
  auto params = init_params<float>(cfg, 4);
  Rng rng(201);
  jitter_zero_params(params, rng, 0.05f);
  NoGradGuard inference;
  for (auto hw : {std::pair<int64_t, int64_t>{17, 33}, {1, 1}, {32, 32}}) {
    auto img = rand_t<float>({1, 3, hw.first, hw.second}, 202, 0.0f, 1.0f);
    auto out = model_forward(img, cfg, params, true);
    CHECK(out.shape() == img.shape());
    for (int64_t i = 0; i < out.numel(); ++i) {
      CHECK(out.data()[i] >= 0.0f);
      CHECK(out.data()[i] <= 1.0f);
    }
  }
}

TEST_CASE("model_forward: ds=1 variant runs and differs in transformer cost") {
  ModelConfig cfg = ModelConfig::tiny();
  cfg.downsample_factor = 1;
  auto params = init_params<float>(cfg, 5);
  auto img = rand_t<float>({1, 3, 16, 16}, 203, 0.0f, 1.0f);
  CHECK(bitwise_equal(model_forward(img, cfg, params), img));
  ModelConfig cfg2 = ModelConfig::tiny();
  CHECK(count_params_macs(cfg, 64, 64).macs > count_params_macs(cfg2, 64, 64).macs);
}

TEST_CASE("model_forward: input validation") {
  ModelConfig cfg = ModelConfig::tiny();
  auto params = init_params<float>(cfg, 6);
  auto gray = rand_t<float>({1, 1, 16, 16}, 204);
  CHECK_THROWS_WITH_AS(model_forward(gray, cfg, params),
                       doctest::Contains("3-channel"), std::invalid_argument);
  auto img = rand_t<float>({1, 3, 16, 16}, 205);
  img.data()[7] = std::numeric_limits<float>::infinity();
  CHECK_THROWS_WITH_AS(model_forward(img, cfg, params),
                       doctest::Contains("non-finite"), std::invalid_argument);
}

TEST_CASE("model_forward: deterministic construction and batch independence") {
  ModelConfig cfg = ModelConfig::tiny();
  auto p1 = init_params<float>(cfg, 7);
  auto p2 = init_params<float>(cfg, 7);
  REQUIRE(p1.size() == p2.size());
  for (size_t i = 0; i < p1.size(); ++i) {
    CHECK(p1.items()[i].first == p2.items()[i].first);
    CHECK(bitwise_equal(p1.items()[i].second, p2.items()[i].second));
  }
  Rng rng(206);
  jitter_zero_params(p1, rng, 0.05f);

  auto a = rand_t<float>({1, 3, 16, 16}, 207, 0.0f, 1.0f);
  auto b = rand_t<float>({1, 3, 16, 16}, 208, 0.0f, 1.0f);
  std::vector<float> both(a.data(), a.data() + a.numel());
  both.insert(both.end(), b.data(), b.data() + b.numel());
  auto batch = Tensor<float>::from_data({2, 3, 16, 16}, both);

  auto oa = model_forward(a, cfg, p1);
  auto ob = model_forward(b, cfg, p1);
  auto obatch = model_forward(batch, cfg, p1);
  for (int64_t i = 0; i < oa.numel(); ++i) {
    CHECK(obatch.data()[i] == oa.data()[i]);
    CHECK(obatch.data()[oa.numel() + i] == ob.data()[i]);
  }
}

TEST_CASE("model_forward: flags-off graph matches an independently built base model") {
  ModelConfig ours = ModelConfig::tiny();
  ModelConfig base = ModelConfig::tiny();
  base.downsample_factor = 1;
  base.use_fa = false;
  base.use_cpa = false;

  auto ours_params = init_params<float>(ours, 9);
  auto base_params = init_params<float>(base, 10);

  // base layout = ours layout minus the CPA parameters and the per-stage
  // fusion heads nothing consumes when both interaction paths are off
  size_t bi = 0;
  for (const auto& kv : ours_params.items()) {
    if (kv.first.rfind("fuse.", 0) == 0) continue;
    if (kv.first.find(".fuse.") != std::string::npos) continue;
    REQUIRE(bi < base_params.size());
    CHECK(base_params.items()[bi].first == kv.first);
    CHECK(base_params.items()[bi].second.shape() == kv.second.shape());
    ++bi;
  }
  CHECK(bi == base_params.size());

  // shared weights: copy ours -> base by name, then the base graph must not
  // read the CPA parameters at all
  for (auto& kv : base_params.items()) {
    Tensor<float> src = ours_params.get(kv.first);
    std::copy(src.data(), src.data() + src.numel(), kv.second.data());
  }
  Rng rng(211);
  jitter_zero_params(base_params, rng, 0.05f);
  auto img = rand_t<float>({1, 3, 16, 16}, 212, 0.0f, 1.0f);
  auto direct = model_forward(img, base, base_params);

  ParamStore<float> with_extras = init_params<float>(base, 13);
  for (auto& kv : with_extras.items()) {
    Tensor<float> src = base_params.get(kv.first);
    std::copy(src.data(), src.data() + src.numel(), kv.second.data());
  }
  CHECK(bitwise_equal(direct, model_forward(img, base, with_extras)));
}

// ---- counting ----

TEST_CASE("count_params_macs: conv anchor and store consistency") {
  CHECK(conv_param_count(3, 8, 3) == 224);
  CHECK(conv_param_count(3, 8, 3, false) == 216);
  for (ModelConfig cfg : {ModelConfig::tiny(), ModelConfig::small_default()}) {
    auto r = count_params_macs(cfg, 64, 64);
    CHECK(r.params == init_params<float>(cfg, 1).total_elements());
    CHECK(r.macs > 0);
  }
  ModelConfig base = ModelConfig::tiny();
  base.use_cpa = false;
  auto rb = count_params_macs(base, 64, 64);
  CHECK(rb.params == init_params<float>(base, 1).total_elements());
  CHECK(rb.params < count_params_macs(ModelConfig::tiny(), 64, 64).params);
}

TEST_CASE("count_params_macs: doubling widths roughly quadruples CNN params") {
  ModelConfig a = ModelConfig::tiny();
  ModelConfig b = ModelConfig::tiny();
  for (auto& w : b.widths) w *= 2;
  const double ratio =
      static_cast<double>(count_params_macs(b, 64, 64).cnn_params) /
      static_cast<double>(count_params_macs(a, 64, 64).cnn_params);
  CHECK(ratio > 3.8);
  CHECK(ratio < 4.2);
}

TEST_CASE("count_params_macs: doubling resolution roughly quadruples MACs") {
  ModelConfig cfg = ModelConfig::tiny();
  const double ratio = static_cast<double>(count_params_macs(cfg, 128, 128).macs) /
                       static_cast<double>(count_params_macs(cfg, 64, 64).macs);
  CHECK(ratio > 3.5);
  CHECK(ratio < 4.5);
}

// ---- checkpointing ----

TEST_CASE("checkpoint: save/load round-trips to bitwise-identical forwards") {
  TempDir dir;
  ModelConfig cfg = ModelConfig::tiny();
  auto params = init_params<float>(cfg, 20);
  Rng rng(221);
  jitter_zero_params(params, rng, 0.05f);
  const std::string path = (dir.path / "model.igdh").string();
  save_checkpoint(path, params);

  auto restored = init_params<float>(cfg, 999);  // different values, same layout
  load_checkpoint(path, restored);
  for (size_t i = 0; i < params.size(); ++i)
    CHECK(bitwise_equal(params.items()[i].second, restored.items()[i].second));

  auto img = rand_t<float>({1, 3, 16, 16}, 222, 0.0f, 1.0f);
  CHECK(bitwise_equal(model_forward(img, cfg, params),
                      model_forward(img, cfg, restored)));
}

TEST_CASE("checkpoint: corruption and layout mismatches are rejected") {
  TempDir dir;
  ModelConfig cfg = ModelConfig::tiny();
  auto params = init_params<float>(cfg, 23);
  const std::string path = (dir.path / "model.igdh").string();
  save_checkpoint(path, params);

  {  // flip one payload byte
    std::fstream f(path, std::ios::in | std::ios::out | std::ios::binary);
    f.seekp(64);
    char c;
    f.seekg(64);
    f.get(c);
    f.seekp(64);
    f.put(static_cast<char>(c ^ 0x40));
  }
  auto into = init_params<float>(cfg, 0);
  CHECK_THROWS_WITH_AS(load_checkpoint(path, into), doctest::Contains("checksum"),
                       std::runtime_error);

  save_checkpoint(path, params);
  ModelConfig base = cfg;
  base.use_cpa = false;
  auto base_store = init_params<float>(base, 0);
  CHECK_THROWS_WITH_AS(load_checkpoint(path, base_store),
                       doctest::Contains("unknown parameter"), std::runtime_error);

  const std::string bpath = (dir.path / "base.igdh").string();
  save_checkpoint(bpath, base_store);
  auto full_store = init_params<float>(cfg, 0);
  CHECK_THROWS_WITH_AS(load_checkpoint(bpath, full_store),
                       doctest::Contains("missing"), std::runtime_error);

  ModelConfig wide = cfg;
  wide.widths = {16, 32, 48, 64};
  wide.heads = {1, 2, 4, 8};
  auto wide_store = init_params<float>(wide, 0);
  CHECK_THROWS_WITH_AS(load_checkpoint(path, wide_store), doctest::Contains("shape"),
                       std::runtime_error);

  CHECK_THROWS_WITH_AS(load_checkpoint((dir.path / "nope.igdh").string(), into),
                       doctest::Contains("cannot open"), std::runtime_error);
}

// ---- gradients through the whole model ----

TEST_CASE("model gradients: every parameter receives a nonzero gradient") {
  // ds=1 at 32x32 keeps every stage at >= 2x2 spatial: at 1x1 the normalized
  // residual is identically zero and gamma could not receive gradient
  ModelConfig cfg = ModelConfig::tiny();
  cfg.downsample_factor = 1;
  auto params = init_params<float>(cfg, 30);
  Rng rng(231);
  jitter_zero_params(params, rng, 0.05f);
  params.set_requires_grad(true);
  auto img = rand_t<float>({1, 3, 32, 32}, 232, 0.0f, 1.0f);
  auto target = rand_t<float>({1, 3, 32, 32}, 233, 0.0f, 1.0f);
  auto loss = l1_loss(model_forward(img, cfg, params), target);
  backward(loss);
  for (const auto& kv : params.items()) {
    const std::vector<float>* g = kv.second.grad();
    REQUIRE_MESSAGE(g != nullptr, kv.first);
    bool any = false;
    for (float v : *g)
      if (v != 0.0f) {
        any = true;
        break;
      }
    CHECK_MESSAGE(any, kv.first);
  }
}

TEST_CASE("grad_check: the full tiny model end to end") {
  ModelConfig cfg = ModelConfig::tiny();
  auto params = init_params<double>(cfg, 40);
  Rng rng(241);
  jitter_zero_params(params, rng, 0.05);
  auto img = rand_t<double>({1, 3, 16, 16}, 242, 0.0, 1.0);
  auto target = rand_t<double>({1, 3, 16, 16}, 243, 0.0, 1.0);
  std::vector<Tensor<double>> inputs = {img};
  for (auto& kv : params.items()) inputs.push_back(kv.second);
  for (auto& t : inputs) t.set_requires_grad(true);
  auto f = [&] { return l1_loss(model_forward(img, cfg, params), target); };
  CHECK(grad_check(f, inputs, 1e-5, 2) < 1e-3);
}
