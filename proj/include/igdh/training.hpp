#pragma once

#include <cstdint>
#include <limits>
#include <string>
#include <utility>
#include <vector>

#include "igdh/dataset.hpp"
#include "igdh/network.hpp"

// Optimization loop: Adam on an L1 objective over randomly cropped patches
// whose side grows over training. Every random decision of step k is drawn
// from a stream derived from (seed, k), so a run resumed from a checkpoint
// continues exactly like the uninterrupted one.

namespace igdh {

struct TrainConfig {
  double lr = 1e-4;
  double beta1 = 0.9;
  double beta2 = 0.999;
  double eps = 1e-8;
  int64_t steps = 500;
  int64_t batch = 2;
  std::vector<std::pair<int64_t, int64_t>> patch_schedule;  // (start_step, side)
  uint64_t seed = 1;
  int64_t checkpoint_every = 100;  // 0 disables periodic checkpoints
  int64_t eval_every = 50;         // 0 disables periodic PSNR evaluation
  int64_t holdout_index = -1;      // <0: evaluate on the training pairs

  void validate() const;
  // desk-scale ramp: small patches first, the full side for the last fifth
  static TrainConfig defaults_for(int64_t steps, int64_t full_side);
  std::string to_json() const;
  static TrainConfig from_json(const std::string& text);
};

struct AdamState {
  std::vector<std::vector<float>> m, v;  // parallel to ParamStore order
  int64_t t = 0;                         // completed steps

  static AdamState init(const ParamStore<float>& params);
};

// bias-corrected update from each parameter's accumulated gradient
void adam_step(ParamStore<float>& params, AdamState& state, const TrainConfig& cfg);

// side of the schedule stage active at `step` (largest start_step <= step)
int64_t patch_schedule_lookup(int64_t step, const TrainConfig& cfg);

// identical crop window applied to both images; uniform over valid offsets
template <class T>
std::pair<Tensor<T>, Tensor<T>> random_crop_pair(const Tensor<T>& a, const Tensor<T>& b,
                                                 int64_t side, Rng& rng);

struct TrainLogRow {
  int64_t step = 0;
  double loss = 0;
  int64_t patch_side = 0;
  double psnr_holdout = std::numeric_limits<double>::quiet_NaN();  // NaN: not evaluated
};

std::string log_csv_header();
std::string log_row_csv(const TrainLogRow& row);

struct TrainResult {
  ParamStore<float> params;
  AdamState opt;
  std::vector<TrainLogRow> log;
  double final_psnr = 0;  // mean PSNR over the evaluation pairs at the end
};

// Runs steps [opt.t, cfg.steps). Fresh runs pass no resume state; resumed
// runs supply the loaded parameters and optimizer moments. checkpoint_dir
// empty -> no files are written.
TrainResult train(const ModelConfig& mcfg, const TrainConfig& cfg,
                  const std::vector<DatasetPair>& pairs,
                  const std::string& checkpoint_dir = "",
                  const ParamStore<float>* resume_params = nullptr,
                  const AdamState* resume_opt = nullptr);

// mean PSNR of clamped model outputs against the clean images
double eval_psnr(const ModelConfig& mcfg, const ParamStore<float>& params,
                 const std::vector<DatasetPair>& pairs);

// optimizer state persisted in the checkpoint container format ("m."/"v."
// records mirroring the parameters plus an "opt.t" step counter)
void save_train_state(const std::string& path, const ParamStore<float>& params,
                      const AdamState& opt);
AdamState load_train_state(const std::string& path, const ParamStore<float>& params);

}  // namespace igdh
