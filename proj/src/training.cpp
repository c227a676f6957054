#include "igdh/training.hpp"

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <stdexcept>

#include "igdh/checkpoint.hpp"
#include "igdh/metrics.hpp"
#include "igdh/ops.hpp"
#include "json.hpp"

namespace igdh {

using nlohmann::json;

// ---- config ----

void TrainConfig::validate() const {
  if (lr <= 0) throw std::invalid_argument("TrainConfig: lr must be positive");
  if (beta1 < 0 || beta1 >= 1 || beta2 < 0 || beta2 >= 1) {
    throw std::invalid_argument("TrainConfig: betas must lie in [0,1)");
  }
  if (eps <= 0) throw std::invalid_argument("TrainConfig: eps must be positive");
  if (steps < 0) throw std::invalid_argument("TrainConfig: steps must be >= 0");
  if (batch < 1) throw std::invalid_argument("TrainConfig: batch must be >= 1");
  if (checkpoint_every < 0 || eval_every < 0) {
    throw std::invalid_argument("TrainConfig: intervals must be >= 0");
  }
  if (patch_schedule.empty()) {
    throw std::invalid_argument("TrainConfig: patch schedule is empty");
  }
  if (patch_schedule.front().first != 0) {
    throw std::invalid_argument("TrainConfig: patch schedule must start at step 0");
  }
  for (size_t i = 0; i < patch_schedule.size(); ++i) {
    if (patch_schedule[i].second < 1) {
      throw std::invalid_argument("TrainConfig: patch side must be positive, got " +
                                  std::to_string(patch_schedule[i].second));
    }
    if (i > 0) {
      if (patch_schedule[i].first <= patch_schedule[i - 1].first) {
        throw std::invalid_argument(
            "TrainConfig: patch schedule steps must strictly increase");
      }
      if (patch_schedule[i].second < patch_schedule[i - 1].second) {
        throw std::invalid_argument(
            "TrainConfig: patch sides must be non-decreasing");
      }
    }
  }
}

TrainConfig TrainConfig::defaults_for(int64_t steps, int64_t full_side) {
  TrainConfig c;
  c.steps = steps;
  c.patch_schedule.clear();
  c.patch_schedule.emplace_back(0, std::min<int64_t>(32, full_side));
  const int64_t mid = steps * 2 / 5, late = steps * 4 / 5;
  if (mid > 0 && std::min<int64_t>(48, full_side) > c.patch_schedule.back().second) {
    c.patch_schedule.emplace_back(mid, std::min<int64_t>(48, full_side));
  }
  if (late > 0 && late > c.patch_schedule.back().first &&
      full_side > c.patch_schedule.back().second) {
    c.patch_schedule.emplace_back(late, full_side);
  }
  c.validate();
  return c;
}

std::string TrainConfig::to_json() const {
  json j;
  j["lr"] = lr;
  j["beta1"] = beta1;
  j["beta2"] = beta2;
  j["eps"] = eps;
  j["steps"] = steps;
  j["batch"] = batch;
  j["patch_schedule"] = json::array();
  for (const auto& st : patch_schedule) {
    j["patch_schedule"].push_back({st.first, st.second});
  }
  j["seed"] = seed;
  j["checkpoint_every"] = checkpoint_every;
  j["eval_every"] = eval_every;
  j["holdout_index"] = holdout_index;
  return j.dump(2) + "\n";
}

TrainConfig TrainConfig::from_json(const std::string& text) {
  json j = json::parse(text);
  TrainConfig c;
  c.lr = j.value("lr", c.lr);
  c.beta1 = j.value("beta1", c.beta1);
  c.beta2 = j.value("beta2", c.beta2);
  c.eps = j.value("eps", c.eps);
  c.steps = j.value("steps", c.steps);
  c.batch = j.value("batch", c.batch);
  if (j.contains("patch_schedule")) {
    c.patch_schedule.clear();
    for (const auto& st : j.at("patch_schedule")) {
      c.patch_schedule.emplace_back(st.at(0).get<int64_t>(), st.at(1).get<int64_t>());
    }
  } else if (c.patch_schedule.empty()) {
    c.patch_schedule = {{0, 32}};
  }
  c.seed = j.value("seed", c.seed);
  c.checkpoint_every = j.value("checkpoint_every", c.checkpoint_every);
  c.eval_every = j.value("eval_every", c.eval_every);
  c.holdout_index = j.value("holdout_index", c.holdout_index);
  c.validate();
  return c;
}

// ---- optimizer ----

AdamState AdamState::init(const ParamStore<float>& params) {
  AdamState s;
  s.m.reserve(params.size());
  s.v.reserve(params.size());
  for (const auto& kv : params.items()) {
    s.m.emplace_back(static_cast<size_t>(kv.second.shape().numel()), 0.0f);
    s.v.emplace_back(static_cast<size_t>(kv.second.shape().numel()), 0.0f);
  }
  return s;
}

void adam_step(ParamStore<float>& params, AdamState& state, const TrainConfig& cfg) {
  if (state.m.size() != params.size() || state.v.size() != params.size()) {
    throw std::invalid_argument("adam_step: optimizer state does not match parameters");
  }
  state.t += 1;
  const double bc1 = 1.0 - std::pow(cfg.beta1, static_cast<double>(state.t));
  const double bc2 = 1.0 - std::pow(cfg.beta2, static_cast<double>(state.t));
  for (size_t i = 0; i < params.size(); ++i) {
    auto& kv = params.items()[i];
    const std::vector<float>* g = kv.second.grad();
    if (g == nullptr) {
      throw std::runtime_error("adam_step: parameter '" + kv.first +
                               "' has no gradient");
    }
    float* p = kv.second.data();
    std::vector<float>& m = state.m[i];
    std::vector<float>& v = state.v[i];
    for (size_t j = 0; j < g->size(); ++j) {
      const double gj = static_cast<double>((*g)[j]);
      const double mj = cfg.beta1 * static_cast<double>(m[j]) + (1.0 - cfg.beta1) * gj;
      const double vj =
          cfg.beta2 * static_cast<double>(v[j]) + (1.0 - cfg.beta2) * gj * gj;
      m[j] = static_cast<float>(mj);
      v[j] = static_cast<float>(vj);
      const double update = cfg.lr * (mj / bc1) / (std::sqrt(vj / bc2) + cfg.eps);
      p[j] = static_cast<float>(static_cast<double>(p[j]) - update);
    }
  }
}

// ---- schedule and cropping ----

int64_t patch_schedule_lookup(int64_t step, const TrainConfig& cfg) {
  if (cfg.patch_schedule.empty()) {
    throw std::invalid_argument("patch_schedule_lookup: schedule is empty");
  }
  if (step < 0) {
    throw std::invalid_argument("patch_schedule_lookup: negative step " +
                                std::to_string(step));
  }
  int64_t side = cfg.patch_schedule.front().second;
  for (const auto& st : cfg.patch_schedule) {
    if (st.first <= step) side = st.second;
  }
  return side;
}

template <class T>
std::pair<Tensor<T>, Tensor<T>> random_crop_pair(const Tensor<T>& a, const Tensor<T>& b,
                                                 int64_t side, Rng& rng) {
  const Shape4 sa = a.shape(), sb = b.shape();
  if (sa.h != sb.h || sa.w != sb.w) {
    throw std::invalid_argument("random_crop_pair: images " + sa.str() + " vs " +
                                sb.str() + " differ in size");
  }
  if (side < 1 || side > sa.h || side > sa.w) {
    throw std::invalid_argument("random_crop_pair: side " + std::to_string(side) +
                                " does not fit image " + std::to_string(sa.h) + "x" +
                                std::to_string(sa.w));
  }
  const int64_t y = static_cast<int64_t>(rng.uniform_index(
      static_cast<uint64_t>(sa.h - side + 1)));
  const int64_t x = static_cast<int64_t>(rng.uniform_index(
      static_cast<uint64_t>(sa.w - side + 1)));
  return {crop2d(a, y, x, side, side), crop2d(b, y, x, side, side)};
}

// ---- logging ----

std::string log_csv_header() { return "step,loss,patch_side,psnr_holdout\n"; }

std::string log_row_csv(const TrainLogRow& row) {
  char buf[160];
  std::string psnr_field;
  if (!std::isnan(row.psnr_holdout)) psnr_field = format_metric(row.psnr_holdout);
  std::snprintf(buf, sizeof(buf), "%lld,%.8g,%lld,%s\n",
                static_cast<long long>(row.step), row.loss,
                static_cast<long long>(row.patch_side), psnr_field.c_str());
  return buf;
}

// ---- training ----

namespace {

Tensor<float> stack_batch(const std::vector<Tensor<float>>& items) {
  const Shape4 s = items.front().shape();
  std::vector<float> data;
  data.reserve(static_cast<size_t>(s.numel()) * items.size());
  for (const auto& t : items) data.insert(data.end(), t.data(), t.data() + t.numel());
  return Tensor<float>::from_data(
      Shape4{static_cast<int64_t>(items.size()), s.c, s.h, s.w}, std::move(data));
}

}  // namespace

double eval_psnr(const ModelConfig& mcfg, const ParamStore<float>& params,
                 const std::vector<DatasetPair>& pairs) {
  if (pairs.empty()) {
    throw std::invalid_argument("eval_psnr: no pairs to evaluate");
  }
  NoGradGuard inference;
  double sum = 0;
  for (const auto& p : pairs) {
    Tensor<float> out = model_forward(p.hazy, mcfg, params, /*clamp_output=*/true);
    sum += psnr(out, p.clean, 1.0);
  }
  return sum / static_cast<double>(pairs.size());
}

void save_train_state(const std::string& path, const ParamStore<float>& params,
                      const AdamState& opt) {
  if (opt.m.size() != params.size()) {
    throw std::invalid_argument("save_train_state: state does not match parameters");
  }
  ParamStore<float> s;
  s.add("opt.t", Tensor<float>::full({1, 1, 1, 1}, static_cast<float>(opt.t)));
  for (size_t i = 0; i < params.size(); ++i) {
    const auto& kv = params.items()[i];
    s.add("m." + kv.first, Tensor<float>::from_data(kv.second.shape(), opt.m[i]));
    s.add("v." + kv.first, Tensor<float>::from_data(kv.second.shape(), opt.v[i]));
  }
  save_checkpoint(path, s);
}

AdamState load_train_state(const std::string& path, const ParamStore<float>& params) {
  ParamStore<float> s;
  s.add("opt.t", Tensor<float>::zeros({1, 1, 1, 1}));
  for (const auto& kv : params.items()) {
    s.add("m." + kv.first, Tensor<float>::zeros(kv.second.shape()));
    s.add("v." + kv.first, Tensor<float>::zeros(kv.second.shape()));
  }
  load_checkpoint(path, s);
  AdamState opt;
  opt.t = static_cast<int64_t>(std::llround(s.get("opt.t").item()));
  for (const auto& kv : params.items()) {
    Tensor<float> m = s.get("m." + kv.first);
    Tensor<float> v = s.get("v." + kv.first);
    opt.m.emplace_back(m.data(), m.data() + m.shape().numel());
    opt.v.emplace_back(v.data(), v.data() + v.shape().numel());
  }
  return opt;
}

TrainResult train(const ModelConfig& mcfg, const TrainConfig& cfg,
                  const std::vector<DatasetPair>& pairs,
                  const std::string& checkpoint_dir,
                  const ParamStore<float>* resume_params, const AdamState* resume_opt) {
  mcfg.validate();
  cfg.validate();
  if (pairs.empty()) throw std::invalid_argument("train: dataset is empty");
  if (cfg.holdout_index >= static_cast<int64_t>(pairs.size())) {
    throw std::invalid_argument("train: holdout index " +
                                std::to_string(cfg.holdout_index) +
                                " outside dataset of " + std::to_string(pairs.size()));
  }
  if ((resume_params == nullptr) != (resume_opt == nullptr)) {
    throw std::invalid_argument("train: resume needs both parameters and state");
  }

  TrainResult r;
  if (resume_params != nullptr) {
    // deep copy: tensors share storage, and training mutates it in place
    for (const auto& kv : resume_params->items()) {
      const float* d = kv.second.data();
      r.params.add(kv.first,
                   Tensor<float>::from_data(kv.second.shape(),
                                            std::vector<float>(
                                                d, d + kv.second.shape().numel())));
    }
    r.opt = *resume_opt;
  } else {
    r.params = init_params<float>(mcfg, cfg.seed);
    r.opt = AdamState::init(r.params);
  }
  r.params.set_requires_grad(true);

  std::vector<int64_t> train_idx;
  std::vector<DatasetPair> eval_pairs;
  for (int64_t i = 0; i < static_cast<int64_t>(pairs.size()); ++i) {
    if (i == cfg.holdout_index) {
      eval_pairs.push_back(pairs[static_cast<size_t>(i)]);
    } else {
      train_idx.push_back(i);
    }
  }
  if (cfg.holdout_index < 0) eval_pairs = pairs;
  if (train_idx.empty()) throw std::invalid_argument("train: no training pairs left");

  int64_t min_h = pairs.front().hazy.shape().h, min_w = pairs.front().hazy.shape().w;
  for (const auto& p : pairs) {
    min_h = std::min(min_h, p.hazy.shape().h);
    min_w = std::min(min_w, p.hazy.shape().w);
  }

  const std::filesystem::path dir(checkpoint_dir);
  auto save_all = [&](const std::string& tag) {
    if (checkpoint_dir.empty()) return;
    save_checkpoint((dir / ("ckpt_" + tag + ".igdh")).string(), r.params);
    save_train_state((dir / ("ckpt_" + tag + ".opt.igdh")).string(), r.params, r.opt);
  };

  for (int64_t step = r.opt.t; step < cfg.steps; ++step) {
    Rng srng(derive_seed(cfg.seed, 0x9d3c0000u + static_cast<uint64_t>(step)));
    const int64_t side =
        std::min({patch_schedule_lookup(step, cfg), min_h, min_w});

    std::vector<Tensor<float>> hs, cs;
    hs.reserve(static_cast<size_t>(cfg.batch));
    cs.reserve(static_cast<size_t>(cfg.batch));
    for (int64_t b = 0; b < cfg.batch; ++b) {
      const int64_t idx = train_idx[srng.uniform_index(train_idx.size())];
      const DatasetPair& p = pairs[static_cast<size_t>(idx)];
      auto [hp, cp] = random_crop_pair(p.hazy, p.clean, side, srng);
      hs.push_back(hp);
      cs.push_back(cp);
    }
    Tensor<float> hazy = stack_batch(hs);
    Tensor<float> clean = stack_batch(cs);

    Tensor<float> loss = l1_loss(model_forward(hazy, mcfg, r.params), clean);
    const double loss_v = static_cast<double>(loss.item());
    if (!std::isfinite(loss_v)) {
      throw std::runtime_error("train: non-finite loss at step " + std::to_string(step));
    }
    backward(loss);
    adam_step(r.params, r.opt, cfg);
    r.params.zero_grad();

    TrainLogRow row;
    row.step = step;
    row.loss = loss_v;
    row.patch_side = side;
    const bool last = step + 1 == cfg.steps;
    if (cfg.eval_every > 0 && ((step + 1) % cfg.eval_every == 0 || last)) {
      row.psnr_holdout = eval_psnr(mcfg, r.params, eval_pairs);
    }
    r.log.push_back(row);

    if (cfg.checkpoint_every > 0 && (step + 1) % cfg.checkpoint_every == 0 && !last) {
      save_all(std::to_string(step + 1));
    }
  }

  r.final_psnr = eval_psnr(mcfg, r.params, eval_pairs);
  save_all("final");
  return r;
}

#define IGDH_INSTANTIATE_TRAIN(T)                                   \
  template std::pair<Tensor<T>, Tensor<T>> random_crop_pair<T>(    \
      const Tensor<T>&, const Tensor<T>&, int64_t, Rng&);

IGDH_INSTANTIATE_TRAIN(float)
IGDH_INSTANTIATE_TRAIN(double)

}  // namespace igdh
