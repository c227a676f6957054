#include "igdh/dataset.hpp"

#include <algorithm>
#include <cmath>
#include <filesystem>
#include <fstream>
#include <stdexcept>

#include "igdh/image_io.hpp"
#include "json.hpp"

namespace fs = std::filesystem;
using nlohmann::json;

namespace igdh {

std::string depth_kind_name(DepthKind k) {
  switch (k) {
    case DepthKind::kLinearRamp: return "linear-ramp";
    case DepthKind::kRadial: return "radial";
    case DepthKind::kPerlin: return "perlin-like";
  }
  return "radial";
}

DepthKind depth_kind_from_name(const std::string& name) {
  if (name == "linear-ramp") return DepthKind::kLinearRamp;
  if (name == "radial") return DepthKind::kRadial;
  if (name == "perlin-like") return DepthKind::kPerlin;
  throw std::invalid_argument("unknown depth kind: " + name);
}

namespace {

Tensor<float> gradient_image(int h, int w, Rng& rng) {
  float c0[3], c1[3];
  for (float& v : c0) v = float(rng.uniform());
  for (float& v : c1) v = float(rng.uniform());
  const double ang = rng.uniform(0.0, 2.0 * 3.14159265358979323846);
  const double dx = std::cos(ang), dy = std::sin(ang);
  auto img = Tensor<float>::zeros({1, 3, h, w});
  // project each pixel onto the gradient axis, normalized to [0,1]
  double lo = 1e30, hi = -1e30;
  for (int y = 0; y < h; ++y)
    for (int x = 0; x < w; ++x) {
      const double p = dx * x + dy * y;
      lo = std::min(lo, p);
      hi = std::max(hi, p);
    }
  const double span = std::max(hi - lo, 1e-9);
  for (int c = 0; c < 3; ++c)
    for (int y = 0; y < h; ++y)
      for (int x = 0; x < w; ++x) {
        const double u = (dx * x + dy * y - lo) / span;
        img.data()[(c * h + y) * w + x] = float(c0[c] + (c1[c] - c0[c]) * u);
      }
  return img;
}

Tensor<float> checker_image(int h, int w, Rng& rng) {
  float c0[3], c1[3];
  for (float& v : c0) v = float(rng.uniform());
  for (float& v : c1) v = float(rng.uniform());
  const int cell = 4 + int(rng.uniform_index(13));  // 4..16 pixels
  const int oy = int(rng.uniform_index(uint64_t(cell)));
  const int ox = int(rng.uniform_index(uint64_t(cell)));
  auto img = Tensor<float>::zeros({1, 3, h, w});
  for (int y = 0; y < h; ++y)
    for (int x = 0; x < w; ++x) {
      const bool odd = (((y + oy) / cell) + ((x + ox) / cell)) % 2 != 0;
      const float* c = odd ? c1 : c0;
      for (int ch = 0; ch < 3; ++ch) img.data()[(ch * h + y) * w + x] = c[ch];
    }
  return img;
}

Tensor<float> noise_image(int h, int w, Rng& rng) {
  auto img = Tensor<float>::zeros({1, 3, h, w});
  for (auto& v : img.vec()) v = float(rng.uniform());
  // a couple of 3x3 box-blur sweeps turn white noise into soft blobs
  std::vector<float> tmp(size_t(h) * w);
  for (int pass = 0; pass < 2; ++pass)
    for (int c = 0; c < 3; ++c) {
      float* ch = img.data() + size_t(c) * h * w;
      for (int y = 0; y < h; ++y)
        for (int x = 0; x < w; ++x) {
          float acc = 0;
          int cnt = 0;
          for (int dy = -1; dy <= 1; ++dy)
            for (int dxx = -1; dxx <= 1; ++dxx) {
              const int yy = y + dy, xx = x + dxx;
              if (yy < 0 || yy >= h || xx < 0 || xx >= w) continue;
              acc += ch[yy * w + xx];
              ++cnt;
            }
          tmp[size_t(y) * w + x] = acc / float(cnt);
        }
      std::copy(tmp.begin(), tmp.end(), ch);
    }
  // re-stretch per channel so the picture keeps contrast after blurring
  for (int c = 0; c < 3; ++c) {
    float* ch = img.data() + size_t(c) * h * w;
    float lo = ch[0], hi = ch[0];
    for (int i = 1; i < h * w; ++i) {
      lo = std::min(lo, ch[i]);
      hi = std::max(hi, ch[i]);
    }
    const float span = std::max(hi - lo, 1e-6f);
    for (int i = 0; i < h * w; ++i) ch[i] = (ch[i] - lo) / span;
  }
  return img;
}

}  // namespace

Tensor<float> make_clean_image(int height, int width, uint64_t seed) {
  Rng rng(seed);
  switch (rng.uniform_index(3)) {
    case 0: return gradient_image(height, width, rng);
    case 1: return checker_image(height, width, rng);
    default: return noise_image(height, width, rng);
  }
}

Tensor<float> make_depth_map(int height, int width, DepthKind kind, uint64_t seed) {
  Rng rng(seed);
  auto d = Tensor<float>::zeros({1, 1, height, width});
  float* pd = d.data();
  switch (kind) {
    case DepthKind::kLinearRamp: {
      const double ang = rng.uniform(0.0, 2.0 * 3.14159265358979323846);
      const double dx = std::cos(ang), dy = std::sin(ang);
      double lo = 1e30, hi = -1e30;
      for (int y = 0; y < height; ++y)
        for (int x = 0; x < width; ++x) {
          const double p = dx * x + dy * y;
          lo = std::min(lo, p);
          hi = std::max(hi, p);
        }
      const double span = std::max(hi - lo, 1e-9);
      for (int y = 0; y < height; ++y)
        for (int x = 0; x < width; ++x)
          pd[y * width + x] = float((dx * x + dy * y - lo) / span);
      break;
    }
    case DepthKind::kRadial: {
      const double cy = rng.uniform(0.25, 0.75) * (height - 1);
      const double cx = rng.uniform(0.25, 0.75) * (width - 1);
      double maxd = 1e-9;
      for (int y = 0; y < height; ++y)
        for (int x = 0; x < width; ++x)
          maxd = std::max(maxd, std::hypot(y - cy, x - cx));
      for (int y = 0; y < height; ++y)
        for (int x = 0; x < width; ++x)
          pd[y * width + x] = float(std::hypot(y - cy, x - cx) / maxd);
      break;
    }
    case DepthKind::kPerlin: {
      // value noise: coarse random lattice, bilinearly interpolated
      const int gh = 5, gw = 5;
      float grid[gh * gw];
      for (float& v : grid) v = float(rng.uniform());
      for (int y = 0; y < height; ++y)
        for (int x = 0; x < width; ++x) {
          const double gy = height > 1 ? double(y) / (height - 1) * (gh - 1) : 0.0;
          const double gx = width > 1 ? double(x) / (width - 1) * (gw - 1) : 0.0;
          const int y0 = std::min(int(gy), gh - 2), x0 = std::min(int(gx), gw - 2);
          const double fy = gy - y0, fx = gx - x0;
          const double v = (1 - fy) * ((1 - fx) * grid[y0 * gw + x0] + fx * grid[y0 * gw + x0 + 1]) +
                           fy * ((1 - fx) * grid[(y0 + 1) * gw + x0] + fx * grid[(y0 + 1) * gw + x0 + 1]);
          pd[y * width + x] = float(v);
        }
      // stretch to the full [0,1] depth range
      float lo = pd[0], hi = pd[0];
      for (int i = 1; i < height * width; ++i) {
        lo = std::min(lo, pd[i]);
        hi = std::max(hi, pd[i]);
      }
      const float span = std::max(hi - lo, 1e-6f);
      for (int i = 0; i < height * width; ++i) pd[i] = (pd[i] - lo) / span;
      break;
    }
  }
  return d;
}

std::vector<DatasetPair> synth_dataset(const SynthOptions& opts) {
  if (opts.count < 1) throw std::invalid_argument("synth_dataset: count must be >= 1");
  if (opts.height < 1 || opts.width < 1)
    throw std::invalid_argument("synth_dataset: empty image dims");
  if (opts.beta_lo < 0 || opts.beta_hi < opts.beta_lo)
    throw std::invalid_argument("synth_dataset: invalid beta range");
  if (opts.light_lo < 0 || opts.light_hi < opts.light_lo || opts.light_hi > 1)
    throw std::invalid_argument("synth_dataset: atmospheric light range must be within [0,1]");

  // user-supplied sources are loaded once and cycled
  std::vector<Tensor<float>> sources;
  for (const auto& p : opts.clean_paths) sources.push_back(read_png(p));
  if (!opts.clean_paths.empty() && sources.empty()) {
    throw std::invalid_argument("synth_dataset: empty clean source list");
  }

  std::vector<DatasetPair> pairs;
  pairs.reserve(size_t(opts.count));
  for (int i = 0; i < opts.count; ++i) {
    const uint64_t pair_seed = derive_seed(opts.seed, uint64_t(i));
    Rng rng(pair_seed);
    const double beta = rng.uniform(opts.beta_lo, opts.beta_hi);
    const double light = rng.uniform(opts.light_lo, opts.light_hi);

    Tensor<float> clean;
    if (sources.empty()) {
      clean = make_clean_image(opts.height, opts.width, derive_seed(pair_seed, 1));
    } else {
      const Tensor<float>& src = sources[size_t(i) % sources.size()];
      const Shape4 s = src.shape();
      if (s.h < opts.height || s.w < opts.width) {
        throw std::invalid_argument("synth_dataset: source image " + s.str() +
                                    " smaller than requested " +
                                    std::to_string(opts.height) + "x" +
                                    std::to_string(opts.width));
      }
      const int64_t top = (s.h - opts.height) / 2;
      const int64_t left = (s.w - opts.width) / 2;
      clean = Tensor<float>::zeros({1, 3, opts.height, opts.width});
      for (int64_t c = 0; c < 3; ++c)
        for (int64_t y = 0; y < opts.height; ++y)
          for (int64_t x = 0; x < opts.width; ++x)
            clean.data()[(c * opts.height + y) * opts.width + x] =
                src.at(0, c, top + y, left + x);
    }

    HazeScene<float> scene;
    scene.J = clean;
    scene.d = make_depth_map(opts.height, opts.width, opts.depth_kind,
                             derive_seed(pair_seed, 2));
    scene.A = Tensor<float>::full({1, 1, 1, 1}, float(light));
    scene.beta = float(beta);

    DatasetPair pair;
    pair.clean = clean;
    pair.hazy = apply_haze(scene);
    pair.meta.index = i;
    pair.meta.seed = pair_seed;
    pair.meta.beta = beta;
    pair.meta.light = light;
    pair.meta.depth_kind = depth_kind_name(opts.depth_kind);
    char name[32];
    std::snprintf(name, sizeof name, "%03d_hazy.png", i);
    pair.meta.hazy_file = name;
    std::snprintf(name, sizeof name, "%03d_clean.png", i);
    pair.meta.clean_file = name;
    pairs.push_back(std::move(pair));
  }
  return pairs;
}

void write_dataset(const std::vector<DatasetPair>& pairs, const SynthOptions& opts,
                   const std::string& dir) {
  fs::create_directories(dir);
  json manifest;
  manifest["version"] = 1;
  manifest["seed"] = opts.seed;
  manifest["count"] = pairs.size();
  manifest["height"] = opts.height;
  manifest["width"] = opts.width;
  manifest["beta_range"] = {opts.beta_lo, opts.beta_hi};
  manifest["light_range"] = {opts.light_lo, opts.light_hi};
  manifest["pairs"] = json::array();
  for (const auto& p : pairs) {
    write_png((fs::path(dir) / p.meta.hazy_file).string(), p.hazy);
    write_png((fs::path(dir) / p.meta.clean_file).string(), p.clean);
    manifest["pairs"].push_back({{"index", p.meta.index},
                                 {"seed", p.meta.seed},
                                 {"beta", p.meta.beta},
                                 {"A", p.meta.light},
                                 {"depth_kind", p.meta.depth_kind},
                                 {"hazy", p.meta.hazy_file},
                                 {"clean", p.meta.clean_file}});
  }
  std::ofstream out(fs::path(dir) / "manifest.json");
  if (!out) throw std::runtime_error("write_dataset: cannot write manifest in " + dir);
  out << manifest.dump(2) << "\n";
}

std::vector<DatasetPair> load_dataset(const std::string& dir) {
  std::ifstream in(fs::path(dir) / "manifest.json");
  if (!in) throw std::runtime_error("load_dataset: no manifest.json in " + dir);
  json manifest;
  in >> manifest;
  std::vector<DatasetPair> pairs;
  for (const auto& e : manifest.at("pairs")) {
    DatasetPair p;
    p.meta.index = e.at("index").get<int>();
    p.meta.seed = e.at("seed").get<uint64_t>();
    p.meta.beta = e.at("beta").get<double>();
    p.meta.light = e.at("A").get<double>();
    p.meta.depth_kind = e.at("depth_kind").get<std::string>();
    p.meta.hazy_file = e.at("hazy").get<std::string>();
    p.meta.clean_file = e.at("clean").get<std::string>();
    p.hazy = read_png((fs::path(dir) / p.meta.hazy_file).string());
    p.clean = read_png((fs::path(dir) / p.meta.clean_file).string());
    pairs.push_back(std::move(p));
  }
  return pairs;
}

}  // namespace igdh
