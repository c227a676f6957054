#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <cmath>
#include <filesystem>
#include <fstream>

#include "doctest.h"
#include "igdh/dataset.hpp"
#include "igdh/haze.hpp"
#include "igdh/image_io.hpp"

using namespace igdh;
namespace fs = std::filesystem;

namespace {

Tensor<double> rand_t(Shape4 s, uint64_t seed, double lo, double hi) {
  Rng rng(seed);
  auto t = Tensor<double>::zeros(s);
  for (auto& v : t.vec()) v = rng.uniform(lo, hi);
  return t;
}

HazeScene<double> random_scene(uint64_t seed, double beta_lo = 0.1, double beta_hi = 2.0) {
  Rng rng(seed);
  HazeScene<double> sc;
  sc.J = rand_t({1, 3, 8, 8}, seed * 7 + 1, 0.0, 1.0);
  sc.d = rand_t({1, 1, 8, 8}, seed * 7 + 2, 0.0, 1.0);
  sc.A = Tensor<double>::full({1, 1, 1, 1}, rng.uniform(0.0, 1.0));
  sc.beta = rng.uniform(beta_lo, beta_hi);
  return sc;
}

struct TempDir {
  fs::path path;
  TempDir() {
    path = fs::temp_directory_path() /
           ("igdh_haze_" + std::to_string(::getpid()) + "_" + std::to_string(counter++));
    fs::create_directories(path);
  }
  ~TempDir() { fs::remove_all(path); }
  static inline int counter = 0;
};

}  // namespace

TEST_CASE("transmission: zero density is fully transparent") {
  auto d = rand_t({1, 1, 4, 4}, 1, 0.0, 5.0);
  auto t = transmission(d, 0.0);
  for (int64_t i = 0; i < t.numel(); ++i) CHECK(t.data()[i] == 1.0);
}

TEST_CASE("transmission: constant depth anchor") {
  auto d = Tensor<double>::full({1, 1, 2, 2}, 2.0);
  auto t = transmission(d, 0.5);
  for (int64_t i = 0; i < 4; ++i)
    CHECK(t.data()[i] == doctest::Approx(0.367879441).epsilon(1e-8));
}

TEST_CASE("transmission: monotone depth gives monotone decreasing t") {
  auto d = Tensor<double>::from_data({1, 1, 1, 5}, {0, 0.5, 1.0, 2.0, 3.5});
  auto t = transmission(d, 0.8);
  for (int64_t i = 1; i < 5; ++i) CHECK(t.data()[i] < t.data()[i - 1]);
  for (int64_t i = 0; i < 5; ++i) {
    CHECK(t.data()[i] > 0.0);
    CHECK(t.data()[i] <= 1.0);
  }
}

TEST_CASE("transmission: rejects negative beta and depth") {
  auto d = Tensor<double>::full({1, 1, 2, 2}, 1.0);
  CHECK_THROWS_AS(transmission(d, -0.1), std::invalid_argument);
  auto neg = Tensor<double>::from_data({1, 1, 1, 2}, {0.5, -0.01});
  CHECK_THROWS_AS(transmission(neg, 1.0), std::invalid_argument);
}

TEST_CASE("apply_haze: haze-free limit returns J exactly") {
  auto sc = random_scene(3);
  sc.beta = 0.0;
  auto I = apply_haze(sc);
  for (int64_t i = 0; i < I.numel(); ++i) CHECK(I.data()[i] == sc.J.data()[i]);
}

TEST_CASE("apply_haze: opaque limit returns A everywhere") {
  auto sc = random_scene(4);
  sc.beta = 1e6;
  sc.d = Tensor<double>::full({1, 1, 8, 8}, 1.0);
  auto I = apply_haze(sc);
  const double a = sc.A.item();
  for (int64_t i = 0; i < I.numel(); ++i) CHECK(I.data()[i] == doctest::Approx(a).epsilon(1e-12));
}

TEST_CASE("apply_haze: hand-computed blend") {
  HazeScene<double> sc;
  sc.J = Tensor<double>::full({1, 3, 2, 2}, 0.2);
  sc.d = Tensor<double>::full({1, 1, 2, 2}, std::log(2.0));  // t = 0.5 at beta 1
  sc.A = Tensor<double>::full({1, 1, 1, 1}, 1.0);
  sc.beta = 1.0;
  auto I = apply_haze(sc);
  for (int64_t i = 0; i < I.numel(); ++i)
    CHECK(I.data()[i] == doctest::Approx(0.6).epsilon(1e-12));
}

TEST_CASE("apply_haze: shape and light validation") {
  auto sc = random_scene(5);
  sc.d = rand_t({1, 1, 4, 4}, 6, 0.0, 1.0);  // wrong spatial dims
  CHECK_THROWS_AS(apply_haze(sc), std::invalid_argument);
  auto sc2 = random_scene(7);
  sc2.A = rand_t({1, 2, 1, 1}, 8, 0.0, 1.0);  // neither scalar nor per-channel
  CHECK_THROWS_AS(apply_haze(sc2), std::invalid_argument);
  auto sc3 = random_scene(9);
  sc3.A = rand_t({1, 3, 1, 1}, 10, 0.0, 1.0);  // per-channel is fine
  CHECK_NOTHROW(apply_haze(sc3));
}

TEST_CASE("invert_haze: algebraic round-trip within 1e-6 for t >= 0.1") {
  for (uint64_t s = 0; s < 50; ++s) {
    auto sc = random_scene(100 + s);
    sc.beta = Rng(s).uniform(0.0, 2.3);  // exp(-2.3) ≈ 0.100 keeps t >= 0.1
    auto t = transmission(sc.d, sc.beta);
    auto J_hat = invert_haze(apply_haze(sc), t, sc.A, 0.05);
    for (int64_t i = 0; i < J_hat.numel(); ++i)
      CHECK(std::abs(J_hat.data()[i] - sc.J.data()[i]) < 1e-6);
  }
}

TEST_CASE("invert_haze: anchors and validation") {
  auto A = Tensor<double>::full({1, 1, 1, 1}, 0.8);
  auto I = Tensor<double>::full({1, 3, 2, 2}, 0.8);
  auto t1 = Tensor<double>::full({1, 1, 2, 2}, 1.0);
  auto J = invert_haze(I, t1, A);
  for (int64_t i = 0; i < J.numel(); ++i) CHECK(J.data()[i] == doctest::Approx(0.8));

  auto I2 = Tensor<double>::full({1, 3, 2, 2}, 0.6);
  auto t2 = Tensor<double>::full({1, 1, 2, 2}, 0.5);
  auto A1 = Tensor<double>::full({1, 1, 1, 1}, 1.0);
  auto J2 = invert_haze(I2, t2, A1);
  for (int64_t i = 0; i < J2.numel(); ++i)
    CHECK(J2.data()[i] == doctest::Approx(0.2).epsilon(1e-12));

  CHECK_THROWS_AS(invert_haze(I2, t2, A1, 0.0), std::invalid_argument);
  CHECK_THROWS_AS(invert_haze(I2, t2, A1, -1.0), std::invalid_argument);
}

TEST_CASE("property: hazy image is a convex blend of J and A") {
  for (uint64_t s = 0; s < 200; ++s) {
    auto sc = random_scene(1000 + s, 0.0, 4.0);
    auto I = apply_haze(sc);
    const double a = sc.A.item();
    for (int64_t c = 0; c < 3; ++c)
      for (int64_t i = 0; i < 64; ++i) {
        const double j = sc.J.data()[c * 64 + i];
        const double v = I.data()[c * 64 + i];
        CHECK(v >= std::min(j, a) - 1e-12);
        CHECK(v <= std::max(j, a) + 1e-12);
      }
  }
}

TEST_CASE("property: increasing beta moves I toward A") {
  auto sc = random_scene(42);
  auto A = sc.A.item();
  double prev_dist = -1.0;
  for (double beta : {0.0, 0.3, 0.8, 1.5, 3.0, 8.0}) {
    sc.beta = beta;
    auto I = apply_haze(sc);
    double dist = 0.0;
    for (int64_t i = 0; i < I.numel(); ++i) dist = std::max(dist, std::abs(I.data()[i] - A));
    if (prev_dist >= 0.0) CHECK(dist <= prev_dist + 1e-12);
    prev_dist = dist;
  }
}

TEST_CASE("synth_dataset: deterministic given the seed") {
  SynthOptions opt;
  opt.count = 4;
  opt.height = opt.width = 16;
  opt.seed = 77;
  auto a = synth_dataset(opt);
  auto b = synth_dataset(opt);
  REQUIRE(a.size() == b.size());
  for (size_t i = 0; i < a.size(); ++i) {
    CHECK(a[i].meta.beta == b[i].meta.beta);
    CHECK(a[i].meta.light == b[i].meta.light);
    for (int64_t k = 0; k < a[i].hazy.numel(); ++k) {
      CHECK(a[i].hazy.data()[k] == b[i].hazy.data()[k]);
      CHECK(a[i].clean.data()[k] == b[i].clean.data()[k]);
    }
  }
}

TEST_CASE("synth_dataset: zero beta yields hazy == clean bitwise") {
  SynthOptions opt;
  opt.count = 3;
  opt.height = opt.width = 16;
  opt.beta_lo = opt.beta_hi = 0.0;
  opt.seed = 5;
  for (const auto& p : synth_dataset(opt)) {
    for (int64_t k = 0; k < p.hazy.numel(); ++k)
      CHECK(p.hazy.data()[k] == p.clean.data()[k]);
  }
}

TEST_CASE("synth_dataset: convexity holds on every generated pixel") {
  SynthOptions opt;
  opt.count = 8;
  opt.height = opt.width = 16;
  opt.beta_lo = 0.5;
  opt.beta_hi = 2.0;
  opt.seed = 9;
  for (const auto& p : synth_dataset(opt)) {
    const float a = float(p.meta.light);
    for (int64_t k = 0; k < p.hazy.numel(); ++k) {
      const float j = p.clean.data()[k];
      CHECK(p.hazy.data()[k] >= std::min(j, a) - 1e-6f);
      CHECK(p.hazy.data()[k] <= std::max(j, a) + 1e-6f);
    }
  }
}

TEST_CASE("synth_dataset: each depth family is produced and valid") {
  for (auto kind : {DepthKind::kLinearRamp, DepthKind::kRadial, DepthKind::kPerlin}) {
    auto d = make_depth_map(16, 12, kind, 33);
    CHECK(d.shape() == Shape4{1, 1, 16, 12});
    float lo = 1e9f, hi = -1e9f;
    for (int64_t i = 0; i < d.numel(); ++i) {
      lo = std::min(lo, d.data()[i]);
      hi = std::max(hi, d.data()[i]);
    }
    CHECK(lo >= 0.0f);
    CHECK(hi <= 1.0f);
    CHECK(hi > lo);  // non-degenerate field
    CHECK(depth_kind_from_name(depth_kind_name(kind)) == kind);
  }
  CHECK_THROWS_AS(depth_kind_from_name("bogus"), std::invalid_argument);
}

TEST_CASE("synth_dataset: validation errors") {
  SynthOptions opt;
  opt.count = 0;
  CHECK_THROWS_AS(synth_dataset(opt), std::invalid_argument);
  opt.count = 1;
  opt.beta_lo = -1.0;
  CHECK_THROWS_AS(synth_dataset(opt), std::invalid_argument);
  opt.beta_lo = 0.5;
  opt.light_hi = 1.5;
  CHECK_THROWS_AS(synth_dataset(opt), std::invalid_argument);
}

TEST_CASE("png round-trip: quantization is round(v*255) exactly") {
  TempDir tmp;
  auto img = Tensor<float>::zeros({1, 3, 5, 7});
  Rng rng(12);
  for (auto& v : img.vec()) v = float(rng.uniform(-0.2, 1.2));  // incl. out-of-range
  const auto file = (tmp.path / "t.png").string();
  write_png(file, img);
  auto back = read_png(file);
  REQUIRE(back.shape() == img.shape());
  for (int64_t i = 0; i < img.numel(); ++i) {
    const float v = std::min(std::max(img.data()[i], 0.0f), 1.0f);
    const float q = std::round(v * 255.0f) / 255.0f;
    CHECK(back.data()[i] == doctest::Approx(q).epsilon(1e-7));
  }
  CHECK_THROWS_AS(read_png((tmp.path / "missing.png").string()), std::runtime_error);
}

TEST_CASE("dataset write/load round-trips metadata and pixels") {
  TempDir tmp;
  SynthOptions opt;
  opt.count = 3;
  opt.height = 16;
  opt.width = 24;
  opt.seed = 21;
  auto pairs = synth_dataset(opt);
  write_dataset(pairs, opt, tmp.path.string());
  CHECK(fs::exists(tmp.path / "manifest.json"));
  CHECK(fs::exists(tmp.path / "000_hazy.png"));
  CHECK(fs::exists(tmp.path / "002_clean.png"));

  auto loaded = load_dataset(tmp.path.string());
  REQUIRE(loaded.size() == pairs.size());
  for (size_t i = 0; i < pairs.size(); ++i) {
    CHECK(loaded[i].meta.beta == doctest::Approx(pairs[i].meta.beta));
    CHECK(loaded[i].meta.depth_kind == pairs[i].meta.depth_kind);
    CHECK(loaded[i].hazy.shape() == pairs[i].hazy.shape());
    for (int64_t k = 0; k < pairs[i].hazy.numel(); ++k) {
      CHECK(std::abs(loaded[i].hazy.data()[k] - pairs[i].hazy.data()[k]) <= 0.5f / 255.0f + 1e-6f);
    }
  }
}

TEST_CASE("dataset: user PNG sources are centre-cropped and cycled") {
  TempDir tmp;
  auto big = Tensor<float>::zeros({1, 3, 32, 32});
  Rng rng(8);
  for (auto& v : big.vec()) v = float(rng.uniform());
  const auto src = (tmp.path / "src.png").string();
  write_png(src, big);

  SynthOptions opt;
  opt.count = 2;
  opt.height = opt.width = 16;
  opt.seed = 3;
  opt.clean_paths = {src};
  auto pairs = synth_dataset(opt);
  auto ref = read_png(src);
  // centre crop of the 32x32 source starts at (8,8)
  CHECK(pairs[0].clean.at(0, 0, 0, 0) == ref.at(0, 0, 8, 8));
  CHECK(pairs[1].clean.at(0, 2, 15, 15) == ref.at(0, 2, 23, 23));

  opt.height = opt.width = 64;  // larger than the source
  CHECK_THROWS_AS(synth_dataset(opt), std::invalid_argument);
}
