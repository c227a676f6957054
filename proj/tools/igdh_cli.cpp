#include <cstdio>
#include <filesystem>
#include <fstream>
#include <sstream>
#include <string>
#include <vector>

#include "CLI11.hpp"
#include "igdh/checkpoint.hpp"
#include "igdh/dataset.hpp"
#include "igdh/image_io.hpp"
#include "igdh/metrics.hpp"
#include "igdh/network.hpp"
#include "igdh/training.hpp"
#include "json.hpp"

// Command line front end. Exit codes: 0 success, 1 bad usage or invalid
// inputs (nothing written), 2 runtime failure.

namespace fs = std::filesystem;
using namespace igdh;
using nlohmann::json;

namespace {

std::pair<double, double> parse_range(const std::string& text, const char* flag) {
  const size_t colon = text.find(':');
  if (colon == std::string::npos || colon == 0 || colon + 1 == text.size()) {
    throw std::invalid_argument(std::string(flag) + ": expected LO:HI, got '" + text +
                                "'");
  }
  size_t a = 0, b = 0;
  double lo, hi;
  try {
    lo = std::stod(text.substr(0, colon), &a);
    hi = std::stod(text.substr(colon + 1), &b);
  } catch (const std::exception&) {
    throw std::invalid_argument(std::string(flag) + ": expected LO:HI, got '" + text +
                                "'");
  }
  if (a != colon || b != text.size() - colon - 1) {
    throw std::invalid_argument(std::string(flag) + ": expected LO:HI, got '" + text +
                                "'");
  }
  if (lo > hi) {
    throw std::invalid_argument(std::string(flag) + ": LO must not exceed HI in '" +
                                text + "'");
  }
  return {lo, hi};
}

std::pair<int, int> parse_size(const std::string& text) {
  const size_t x = text.find('x');
  size_t a = 0, b = 0;
  int h = 0, w = 0;
  bool ok = x != std::string::npos && x > 0 && x + 1 < text.size();
  if (ok) {
    try {
      h = std::stoi(text.substr(0, x), &a);
      w = std::stoi(text.substr(x + 1), &b);
    } catch (const std::exception&) {
      ok = false;
    }
  }
  if (!ok || a != x || b != text.size() - x - 1 || h < 1 || w < 1) {
    throw std::invalid_argument("--size: expected HxW with positive sides, got '" +
                                text + "'");
  }
  return {h, w};
}

std::string read_file(const std::string& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw std::invalid_argument("cannot open " + path);
  std::ostringstream ss;
  ss << in.rdbuf();
  return ss.str();
}

void write_file(const std::string& path, const std::string& text) {
  std::ofstream out(path, std::ios::binary);
  if (!out) throw std::runtime_error("cannot write " + path);
  out << text;
}

// one config file drives training: TrainConfig fields at the top level plus
// an optional "model" object with ModelConfig fields
struct LoadedConfig {
  TrainConfig train;
  ModelConfig model = ModelConfig::tiny();
};

LoadedConfig load_config(const std::string& path, int64_t data_side) {
  LoadedConfig lc;
  if (path.empty()) {
    lc.train = TrainConfig::defaults_for(200, std::min<int64_t>(data_side, 64));
    return lc;
  }
  const std::string text = read_file(path);
  json j;
  try {
    j = json::parse(text);
  } catch (const json::exception& e) {
    throw std::invalid_argument(path + ": " + e.what());
  }
  lc.train = TrainConfig::from_json(text);
  if (j.contains("model")) lc.model = ModelConfig::from_json(j["model"].dump());
  return lc;
}

ParamStore<float> load_model(const std::string& ckpt, ModelConfig& mcfg_out) {
  const fs::path sidecar = fs::path(ckpt).parent_path() / "model_config.json";
  if (!fs::exists(sidecar)) {
    throw std::invalid_argument("missing sidecar " + sidecar.string() +
                                " next to the checkpoint");
  }
  mcfg_out = ModelConfig::from_json(read_file(sidecar.string()));
  ParamStore<float> params = init_params<float>(mcfg_out, /*seed=*/0);
  load_checkpoint(ckpt, params);
  return params;
}

int64_t min_side(const std::vector<DatasetPair>& pairs) {
  int64_t side = pairs.front().hazy.shape().h;
  for (const auto& p : pairs) {
    side = std::min({side, p.hazy.shape().h, p.hazy.shape().w});
  }
  return side;
}

void append_log(const std::string& path, const std::vector<TrainLogRow>& rows) {
  const bool fresh = !fs::exists(path);
  std::ofstream out(path, std::ios::app);
  if (!out) throw std::runtime_error("cannot write " + path);
  if (fresh) out << log_csv_header();
  for (const auto& r : rows) out << log_row_csv(r);
}

// ---- subcommands ----

struct SynthArgs {
  std::string out;
  int n = 8;
  uint64_t seed = 1;
  std::string size = "64x64";
  std::string depth = "radial";
  std::string beta = "0.5:2.0";
  std::string light = "0.7:1.0";
  std::vector<std::string> clean;
};

void cmd_synth(const SynthArgs& a) {
  SynthOptions opt;
  opt.count = a.n;
  if (opt.count < 1) throw std::invalid_argument("--n: need at least one pair");
  std::tie(opt.height, opt.width) = parse_size(a.size);
  opt.depth_kind = depth_kind_from_name(a.depth);
  std::tie(opt.beta_lo, opt.beta_hi) = parse_range(a.beta, "--beta");
  std::tie(opt.light_lo, opt.light_hi) = parse_range(a.light, "--light");
  opt.seed = a.seed;
  opt.clean_paths = a.clean;
  for (const auto& p : opt.clean_paths) {
    if (!fs::exists(p)) throw std::invalid_argument("--clean: no such file " + p);
  }
  auto pairs = synth_dataset(opt);  // fully in memory before anything is written
  write_dataset(pairs, opt, a.out);
  std::printf("wrote %zu pairs to %s\n", pairs.size(), a.out.c_str());
}

struct TrainArgs {
  std::string data, config, out;
  bool resume = false;
};

void cmd_train(const TrainArgs& a) {
  auto pairs = load_dataset(a.data);
  if (pairs.empty()) throw std::invalid_argument(a.data + ": dataset is empty");
  LoadedConfig lc = load_config(a.config, min_side(pairs));
  lc.model.validate();
  lc.train.validate();

  ParamStore<float> resume_params;
  AdamState resume_opt;
  bool resuming = false;
  const fs::path out(a.out);
  if (a.resume) {
    const std::string ck = (out / "ckpt_final.igdh").string();
    const std::string op = (out / "ckpt_final.opt.igdh").string();
    if (!fs::exists(ck) || !fs::exists(op)) {
      throw std::invalid_argument("--resume: no ckpt_final in " + a.out);
    }
    resume_params = init_params<float>(lc.model, /*seed=*/0);
    load_checkpoint(ck, resume_params);
    resume_opt = load_train_state(op, resume_params);
    if (resume_opt.t >= lc.train.steps) {
      throw std::invalid_argument("--resume: checkpoint already has " +
                                  std::to_string(resume_opt.t) + " steps, config asks " +
                                  std::to_string(lc.train.steps));
    }
    resuming = true;
  }

  fs::create_directories(out);
  write_file((out / "model_config.json").string(), lc.model.to_json());
  write_file((out / "train_config.json").string(), lc.train.to_json());

  TrainResult r = train(lc.model, lc.train, pairs, a.out,
                        resuming ? &resume_params : nullptr,
                        resuming ? &resume_opt : nullptr);
  append_log((out / "log.csv").string(), r.log);
  std::printf("trained %zu steps, final PSNR %s dB, checkpoints in %s\n", r.log.size(),
              format_metric(r.final_psnr).c_str(), a.out.c_str());
}

struct InferArgs {
  std::string ckpt, in, out;
};

void cmd_infer(const InferArgs& a) {
  ModelConfig mcfg;
  ParamStore<float> params = load_model(a.ckpt, mcfg);
  Tensor<float> image = read_png(a.in);
  NoGradGuard inference;
  Tensor<float> restored = model_forward(image, mcfg, params, /*clamp_output=*/true);
  write_png(a.out, restored);
  std::printf("wrote %s\n", a.out.c_str());
}

struct EvalArgs {
  std::string pairs, pred, out;
};

void cmd_eval(const EvalArgs& a) {
  auto pairs = load_dataset(a.pairs);
  if (pairs.empty()) throw std::invalid_argument(a.pairs + ": dataset is empty");
  // resolve and check every prediction before computing anything
  std::vector<std::string> pred_paths;
  for (const auto& p : pairs) {
    const fs::path f = fs::path(a.pred) / fs::path(p.meta.hazy_file).filename();
    if (!fs::exists(f)) {
      throw std::invalid_argument("missing prediction " + f.string());
    }
    pred_paths.push_back(f.string());
  }

  std::ostringstream csv;
  csv << "image,psnr,ssim,entropy\n";
  double sp = 0, ss = 0, se = 0;
  for (size_t i = 0; i < pairs.size(); ++i) {
    Tensor<float> pred = read_png(pred_paths[i]);
    if (!(pred.shape() == pairs[i].clean.shape())) {
      throw std::invalid_argument(pred_paths[i] + ": prediction shape " +
                                  pred.shape().str() + " does not match " +
                                  pairs[i].clean.shape().str());
    }
    const double p = psnr(pred, pairs[i].clean);
    const double s = ssim(pred, pairs[i].clean);
    const double e = entropy(pred);
    sp += p;
    ss += s;
    se += e;
    csv << fs::path(pred_paths[i]).filename().string() << ',' << format_metric(p) << ','
        << format_metric(s) << ',' << format_metric(e) << '\n';
  }
  const double n = static_cast<double>(pairs.size());
  csv << "mean," << format_metric(sp / n) << ',' << format_metric(ss / n) << ','
      << format_metric(se / n) << '\n';
  if (a.out.empty()) {
    std::fputs(csv.str().c_str(), stdout);
  } else {
    write_file(a.out, csv.str());
    std::printf("wrote %s\n", a.out.c_str());
  }
}

struct AblateArgs {
  std::string data, config, out;
};

struct AblationRow {
  const char* name;
  bool downs, fa, cpa;
  double paper_psnr, paper_ssim;
};

void cmd_ablate(const AblateArgs& a) {
  auto pairs = load_dataset(a.data);
  if (pairs.empty()) throw std::invalid_argument(a.data + ": dataset is empty");
  LoadedConfig lc = load_config(a.config, min_side(pairs));
  lc.train.validate();

  static const AblationRow rows[] = {
      {"Base", false, false, false, 17.70, 0.5324},
      {"Base+DownS", true, false, false, 19.14, 0.5985},
      {"Base+DownS+FA", true, true, false, 19.48, 0.6530},
      {"Base+FA+CPA", false, true, true, 18.96, 0.5608},
      {"Ours", true, true, true, 20.10, 0.6716},
  };

  std::ostringstream csv;
  csv << "name,downs,fa,cpa,psnr,ssim,paper_psnr,paper_ssim\n";
  for (const AblationRow& row : rows) {
    ModelConfig mcfg = lc.model;
    mcfg.downsample_factor = row.downs ? 2 : 1;
    mcfg.use_fa = row.fa;
    mcfg.use_cpa = row.cpa;
    mcfg.validate();

    std::string psnr_field = "failed", ssim_field = "failed";
    try {
      TrainResult r = train(mcfg, lc.train, pairs);
      NoGradGuard inference;
      double sp = 0, ss = 0;
      for (const auto& p : pairs) {
        Tensor<float> pred = model_forward(p.hazy, mcfg, r.params, true);
        sp += psnr(pred, p.clean);
        ss += ssim(pred, p.clean);
      }
      psnr_field = format_metric(sp / double(pairs.size()));
      ssim_field = format_metric(ss / double(pairs.size()));
    } catch (const std::runtime_error& e) {
      std::fprintf(stderr, "%s diverged: %s\n", row.name, e.what());
    }
    csv << row.name << ',' << int(row.downs) << ',' << int(row.fa) << ','
        << int(row.cpa) << ',' << psnr_field << ',' << ssim_field << ','
        << format_metric(row.paper_psnr) << ',' << format_metric(row.paper_ssim)
        << '\n';
    std::fprintf(stderr, "%s: psnr %s ssim %s\n", row.name, psnr_field.c_str(),
                 ssim_field.c_str());
  }
  if (a.out.empty()) {
    std::fputs(csv.str().c_str(), stdout);
  } else {
    write_file(a.out, csv.str());
    std::printf("wrote %s\n", a.out.c_str());
  }
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"two-branch image dehazing: synthesize, train, infer, evaluate"};
  app.require_subcommand(1);

  SynthArgs sy;
  CLI::App* synth = app.add_subcommand("synth", "generate a hazy/clean dataset");
  synth->add_option("--out", sy.out, "output directory")->required();
  synth->add_option("--n", sy.n, "number of pairs");
  synth->add_option("--seed", sy.seed, "master seed");
  synth->add_option("--size", sy.size, "image size HxW");
  synth->add_option("--depth", sy.depth, "depth map kind: linear-ramp|radial|perlin-like");
  synth->add_option("--beta", sy.beta, "scattering range LO:HI");
  synth->add_option("--light", sy.light, "atmospheric light range LO:HI");
  synth->add_option("--clean", sy.clean, "clean source PNGs (cycled)");
  synth->callback([&] { cmd_synth(sy); });

  TrainArgs tr;
  CLI::App* train_cmd = app.add_subcommand("train", "fit the model on a dataset");
  train_cmd->add_option("--data", tr.data, "dataset directory")->required();
  train_cmd->add_option("--config", tr.config, "JSON training config (optional \"model\" section)");
  train_cmd->add_option("--out", tr.out, "output directory")->required();
  train_cmd->add_flag("--resume", tr.resume, "continue from ckpt_final in --out");
  train_cmd->callback([&] { cmd_train(tr); });

  InferArgs in;
  CLI::App* infer = app.add_subcommand("infer", "restore one image");
  infer->add_option("--ckpt", in.ckpt, "checkpoint file (model_config.json beside it)")
      ->required();
  infer->add_option("--in", in.in, "hazy input PNG")->required();
  infer->add_option("--out", in.out, "restored output PNG")->required();
  infer->callback([&] { cmd_infer(in); });

  EvalArgs ev;
  CLI::App* eval_cmd = app.add_subcommand("eval", "score predictions against a dataset");
  eval_cmd->add_option("--pairs", ev.pairs, "dataset directory")->required();
  eval_cmd->add_option("--pred", ev.pred, "directory of predictions named like the hazy files")
      ->required();
  eval_cmd->add_option("--out", ev.out, "CSV path (default stdout)");
  eval_cmd->callback([&] { cmd_eval(ev); });

  AblateArgs ab;
  CLI::App* ablate = app.add_subcommand("ablate", "train the five model variants");
  ablate->add_option("--data", ab.data, "dataset directory")->required();
  ablate->add_option("--config", ab.config, "JSON training config shared by variants");
  ablate->add_option("--out", ab.out, "CSV path (default stdout)");
  ablate->callback([&] { cmd_ablate(ab); });

  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& e) {
    return app.exit(e) == 0 ? 0 : 1;
  } catch (const std::invalid_argument& e) {
    std::fprintf(stderr, "error: %s\n", e.what());
    return 1;
  } catch (const std::exception& e) {
    std::fprintf(stderr, "error: %s\n", e.what());
    return 2;
  }
  return 0;
}
