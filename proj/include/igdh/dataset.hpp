#pragma once

#include <string>
#include <vector>

#include "igdh/haze.hpp"
#include "igdh/tensor.hpp"

namespace igdh {

enum class DepthKind { kLinearRamp, kRadial, kPerlin };

std::string depth_kind_name(DepthKind k);
DepthKind depth_kind_from_name(const std::string& name);

struct PairMeta {
  int index = 0;
  uint64_t seed = 0;     // per-pair derived seed
  double beta = 0.0;
  double light = 1.0;    // scalar atmospheric light A
  std::string depth_kind;
  std::string hazy_file;
  std::string clean_file;
};

struct DatasetPair {
  Tensor<float> hazy;   // (1,3,H,W)
  Tensor<float> clean;  // (1,3,H,W)
  PairMeta meta;
};

struct SynthOptions {
  int count = 8;
  int height = 64;
  int width = 64;
  DepthKind depth_kind = DepthKind::kRadial;
  double beta_lo = 0.5, beta_hi = 2.0;
  double light_lo = 0.7, light_hi = 1.0;
  uint64_t seed = 1;
  // optional user-supplied clean PNGs, cycled by index; images are centre
  // cropped to (height, width) and must be at least that large. Empty means
  // procedural sources (gradients, checkers, filtered noise).
  std::vector<std::string> clean_paths;
};

// procedural building blocks, exposed for tests
Tensor<float> make_clean_image(int height, int width, uint64_t seed);
Tensor<float> make_depth_map(int height, int width, DepthKind kind, uint64_t seed);

// Deterministic in opts.seed: pair i depends only on (seed, i).
std::vector<DatasetPair> synth_dataset(const SynthOptions& opts);

// Writes NNN_hazy.png / NNN_clean.png plus manifest.json into dir.
void write_dataset(const std::vector<DatasetPair>& pairs, const SynthOptions& opts,
                   const std::string& dir);
std::vector<DatasetPair> load_dataset(const std::string& dir);

}  // namespace igdh
