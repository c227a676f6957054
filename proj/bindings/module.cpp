#include <pybind11/numpy.h>
#include <pybind11/pybind11.h>
#include <pybind11/stl.h>

#include <optional>
#include <string>
#include <vector>

#include "igdh/checkpoint.hpp"
#include "igdh/dataset.hpp"
#include "igdh/image_io.hpp"
#include "igdh/metrics.hpp"
#include "igdh/network.hpp"
#include "igdh/training.hpp"

// Python surface: numpy float32 (n,c,h,w) arrays in, numpy arrays out.
// Forward passes run without gradient recording; training happens in C++.

namespace py = pybind11;
using namespace igdh;

namespace {

using FArray = py::array_t<float, py::array::c_style | py::array::forcecast>;

Tensor<float> to_tensor(const FArray& a, const char* who) {
  if (a.ndim() != 4) {
    throw std::invalid_argument(std::string(who) + ": expected a (n,c,h,w) array, got " +
                                std::to_string(a.ndim()) + " dimensions");
  }
  Shape4 s{a.shape(0), a.shape(1), a.shape(2), a.shape(3)};
  std::vector<float> data(a.data(), a.data() + a.size());
  return Tensor<float>::from_data(s, std::move(data));
}

py::array_t<float> to_array(const Tensor<float>& t) {
  const Shape4 s = t.shape();
  py::array_t<float> a({s.n, s.c, s.h, s.w});
  std::copy(t.data(), t.data() + t.numel(), a.mutable_data());
  return a;
}

std::vector<DatasetPair> to_pairs(
    const std::vector<std::pair<FArray, FArray>>& arrays) {
  std::vector<DatasetPair> pairs;
  pairs.reserve(arrays.size());
  for (const auto& [hazy, clean] : arrays) {
    DatasetPair p;
    p.hazy = to_tensor(hazy, "pairs");
    p.clean = to_tensor(clean, "pairs");
    pairs.push_back(std::move(p));
  }
  return pairs;
}

}  // namespace

PYBIND11_MODULE(_igdh, m) {
  m.doc() = "two-branch image dehazing core";

  py::class_<ModelConfig>(m, "ModelConfig")
      .def(py::init<>())
      .def_readwrite("widths", &ModelConfig::widths)
      .def_readwrite("heads", &ModelConfig::heads)
      .def_readwrite("window", &ModelConfig::window)
      .def_readwrite("downsample_factor", &ModelConfig::downsample_factor)
      .def_readwrite("use_fa", &ModelConfig::use_fa)
      .def_readwrite("use_cpa", &ModelConfig::use_cpa)
      .def_readwrite("mlp_ratio", &ModelConfig::mlp_ratio)
      .def_readwrite("cpa_reduction", &ModelConfig::cpa_reduction)
      .def_readwrite("pa_kernel", &ModelConfig::pa_kernel)
      .def("validate", &ModelConfig::validate)
      .def("to_json", &ModelConfig::to_json)
      .def_static("from_json", &ModelConfig::from_json)
      .def_static("tiny", &ModelConfig::tiny)
      .def_static("small_default", &ModelConfig::small_default);

  py::class_<TrainConfig>(m, "TrainConfig")
      .def(py::init<>())
      .def_readwrite("lr", &TrainConfig::lr)
      .def_readwrite("beta1", &TrainConfig::beta1)
      .def_readwrite("beta2", &TrainConfig::beta2)
      .def_readwrite("eps", &TrainConfig::eps)
      .def_readwrite("steps", &TrainConfig::steps)
      .def_readwrite("batch", &TrainConfig::batch)
      .def_readwrite("patch_schedule", &TrainConfig::patch_schedule)
      .def_readwrite("seed", &TrainConfig::seed)
      .def_readwrite("checkpoint_every", &TrainConfig::checkpoint_every)
      .def_readwrite("eval_every", &TrainConfig::eval_every)
      .def_readwrite("holdout_index", &TrainConfig::holdout_index)
      .def("validate", &TrainConfig::validate)
      .def("to_json", &TrainConfig::to_json)
      .def_static("from_json", &TrainConfig::from_json)
      .def_static("defaults_for", &TrainConfig::defaults_for);

  py::class_<ParamStore<float>>(m, "ParamStore")
      .def("names",
           [](const ParamStore<float>& s) {
             std::vector<std::string> out;
             for (const auto& kv : s.items()) out.push_back(kv.first);
             return out;
           })
      .def("get",
           [](const ParamStore<float>& s, const std::string& name) {
             return to_array(s.get(name));
           })
      .def("set",
           [](ParamStore<float>& s, const std::string& name, const FArray& value) {
             Tensor<float> dst = s.get(name);
             Tensor<float> src = to_tensor(value, "set");
             if (!(src.shape() == dst.shape())) {
               throw std::invalid_argument("set: shape " + src.shape().str() +
                                           " does not match " + dst.shape().str());
             }
             std::copy(src.data(), src.data() + src.numel(), dst.data());
           })
      .def("total_elements", &ParamStore<float>::total_elements)
      .def("__len__", &ParamStore<float>::size);

  m.def("init_params", &init_params<float>, py::arg("config"), py::arg("seed"));

  m.def(
      "model_forward",
      [](const FArray& image, const ModelConfig& cfg, const ParamStore<float>& params,
         bool clamp) {
        NoGradGuard inference;
        return to_array(model_forward(to_tensor(image, "model_forward"), cfg, params,
                                      clamp));
      },
      py::arg("image"), py::arg("config"), py::arg("params"), py::arg("clamp") = true);

  m.def("save_checkpoint",
        [](const std::string& path, const ParamStore<float>& params) {
          save_checkpoint(path, params);
        });
  m.def("load_checkpoint", [](const std::string& path, const ModelConfig& cfg) {
    ParamStore<float> params = init_params<float>(cfg, 0);
    load_checkpoint(path, params);
    return params;
  });

  m.def(
      "synth_dataset",
      [](int count, int height, int width, uint64_t seed, std::pair<double, double> beta,
         std::pair<double, double> light, const std::string& depth) {
        SynthOptions so;
        so.count = count;
        so.height = height;
        so.width = width;
        so.seed = seed;
        so.beta_lo = beta.first;
        so.beta_hi = beta.second;
        so.light_lo = light.first;
        so.light_hi = light.second;
        so.depth_kind = depth_kind_from_name(depth);
        py::list out;
        for (const auto& p : synth_dataset(so)) {
          py::dict d;
          d["hazy"] = to_array(p.hazy);
          d["clean"] = to_array(p.clean);
          d["beta"] = p.meta.beta;
          d["light"] = p.meta.light;
          out.append(d);
        }
        return out;
      },
      py::arg("count") = 8, py::arg("height") = 64, py::arg("width") = 64,
      py::arg("seed") = 1, py::arg("beta") = std::pair<double, double>(0.5, 2.0),
      py::arg("light") = std::pair<double, double>(0.7, 1.0),
      py::arg("depth") = "radial");

  m.def(
      "train",
      [](const ModelConfig& mcfg, const TrainConfig& cfg,
         const std::vector<std::pair<FArray, FArray>>& pairs,
         const std::string& checkpoint_dir) {
        TrainResult r = train(mcfg, cfg, to_pairs(pairs), checkpoint_dir);
        py::list log;
        for (const auto& row : r.log) {
          py::dict d;
          d["step"] = row.step;
          d["loss"] = row.loss;
          d["patch_side"] = row.patch_side;
          d["psnr_holdout"] = row.psnr_holdout;
          log.append(d);
        }
        py::dict out;
        out["params"] = r.params;
        out["log"] = log;
        out["final_psnr"] = r.final_psnr;
        return out;
      },
      py::arg("model_config"), py::arg("train_config"), py::arg("pairs"),
      py::arg("checkpoint_dir") = "");

  m.def(
      "psnr",
      [](const FArray& a, const FArray& b, double peak) {
        return psnr(to_tensor(a, "psnr"), to_tensor(b, "psnr"), peak);
      },
      py::arg("a"), py::arg("b"), py::arg("peak") = 1.0);
  m.def(
      "ssim",
      [](const FArray& a, const FArray& b, double peak) {
        return ssim(to_tensor(a, "ssim"), to_tensor(b, "ssim"), peak);
      },
      py::arg("a"), py::arg("b"), py::arg("peak") = 1.0);
  m.def("entropy",
        [](const FArray& img) { return entropy(to_tensor(img, "entropy")); });

  m.def("read_png", [](const std::string& path) { return to_array(read_png(path)); });
  m.def("write_png", [](const std::string& path, const FArray& img) {
    write_png(path, to_tensor(img, "write_png"));
  });

  m.def("count_params_macs", [](const ModelConfig& cfg, int64_t h, int64_t w) {
    CountResult r = count_params_macs(cfg, h, w);
    py::dict d;
    d["params"] = r.params;
    d["macs"] = r.macs;
    d["cnn_params"] = r.cnn_params;
    d["transformer_params"] = r.transformer_params;
    d["fuse_params"] = r.fuse_params;
    d["decoder_params"] = r.decoder_params;
    return d;
  });
}
