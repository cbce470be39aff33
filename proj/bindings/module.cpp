#include <pybind11/numpy.h>
#include <pybind11/pybind11.h>
#include <pybind11/stl.h>

#include <fstream>

#include "hatkit/config.hpp"
#include "hatkit/data.hpp"
#include "hatkit/eval.hpp"
#include "hatkit/graph.hpp"
#include "hatkit/losses.hpp"
#include "hatkit/models.hpp"
#include "hatkit/spectral.hpp"
#include "hatkit/train.hpp"
#include "hatkit/version.hpp"

namespace py = pybind11;
using namespace hatkit;

namespace {

Tensor<float> tensor_from_array(const py::array_t<float, py::array::c_style | py::array::forcecast>& arr) {
  Shape shape(arr.ndim());
  for (py::ssize_t i = 0; i < arr.ndim(); ++i) shape[static_cast<size_t>(i)] = arr.shape(i);
  std::vector<float> data(arr.data(), arr.data() + arr.size());
  return Tensor<float>(std::move(shape), std::move(data));
}

Tensor<double> dtensor_from_array(const py::array_t<double, py::array::c_style | py::array::forcecast>& arr) {
  Shape shape(arr.ndim());
  for (py::ssize_t i = 0; i < arr.ndim(); ++i) shape[static_cast<size_t>(i)] = arr.shape(i);
  std::vector<double> data(arr.data(), arr.data() + arr.size());
  return Tensor<double>(std::move(shape), std::move(data));
}

template <class T>
py::array_t<T> array_from_tensor(const Tensor<T>& t) {
  std::vector<py::ssize_t> shape(t.shape.begin(), t.shape.end());
  py::array_t<T> arr(shape);
  std::copy(t.data.begin(), t.data.end(), arr.mutable_data());
  return arr;
}

spectral::MaskMode mode_of(const std::string& s) {
  if (s == "low") return spectral::MaskMode::Low;
  if (s == "high") return spectral::MaskMode::High;
  throw ValueError("mode must be 'low' or 'high'");
}

spectral::MaskVariant variant_of(const std::string& s) {
  if (s == "as_written") return spectral::MaskVariant::AsWritten;
  if (s == "square") return spectral::MaskVariant::Square;
  throw ValueError("variant must be 'as_written' or 'square'");
}

// Model handle shared with python.
struct PyModel {
  models::Model<float> model;
  std::array<float, 3> stdev{0.25f, 0.25f, 0.25f};
};

PyModel make_pymodel(const std::string& kind, const py::dict& overrides, uint64_t seed) {
  models::ViTConfig vit;
  models::CnnConfig cnn;
  for (auto item : overrides) {
    const std::string key = py::str(item.first);
    if (key == "image_size") vit.image_size = cnn.image_size = item.second.cast<int>();
    else if (key == "patch_size") vit.patch_size = item.second.cast<int>();
    else if (key == "embed_dim") vit.embed_dim = item.second.cast<int>();
    else if (key == "depth") vit.depth = item.second.cast<int>();
    else if (key == "heads") vit.heads = item.second.cast<int>();
    else if (key == "mlp_ratio") vit.mlp_ratio = item.second.cast<double>();
    else if (key == "num_classes") vit.num_classes = cnn.num_classes = item.second.cast<int>();
    else if (key == "pooling")
      vit.pooling = std::string(py::str(item.second)) == "class_token"
                        ? models::ViTConfig::Pooling::ClassToken
                        : models::ViTConfig::Pooling::Mean;
    else if (key == "blocks_per_stage") cnn.blocks_per_stage = item.second.cast<int>();
    else if (key == "stage_widths") cnn.stage_widths = item.second.cast<std::vector<int>>();
    else throw ValueError("unknown model config key: " + key);
  }
  PyModel pm;
  pm.model = models::make_model<float>(
      kind == "cnn" ? models::ModelKind::Cnn : models::ModelKind::Vit, vit, cnn, seed);
  return pm;
}

}  // namespace

PYBIND11_MODULE(_core, m) {
  m.doc() = "DFT filtering, PGD adversarial training and frequency-sensitivity analysis for "
            "small vision models";
  m.attr("__version__") = kVersion;

  py::register_exception<Error>(m, "HatkitError");

  m.def(
      "make_mask",
      [](int64_t h, int64_t w, int64_t s, const std::string& mode, const std::string& variant) {
        auto mask = spectral::make_mask(h, w, s, mode_of(mode), variant_of(variant));
        std::vector<py::ssize_t> shape{static_cast<py::ssize_t>(h), static_cast<py::ssize_t>(w)};
        py::array_t<uint8_t> arr(shape);
        std::copy(mask.grid.begin(), mask.grid.end(), arr.mutable_data());
        return arr;
      },
      py::arg("height"), py::arg("width"), py::arg("filter_size"), py::arg("mode"),
      py::arg("variant") = "as_written",
      "Binary frequency mask in the shifted layout.");

  m.def(
      "filter_image",
      [](py::array_t<double, py::array::c_style | py::array::forcecast> image, int64_t s,
         const std::string& mode, const std::string& variant) {
        Tensor<double> t = dtensor_from_array(image);
        if (t.rank() < 2) throw ValueError("image must have rank >= 2");
        auto mask = spectral::make_mask(t.shape[t.rank() - 2], t.shape[t.rank() - 1], s,
                                        mode_of(mode), variant_of(variant));
        return array_from_tensor(spectral::filter_image(t, mask));
      },
      py::arg("image"), py::arg("filter_size"), py::arg("mode"),
      py::arg("variant") = "as_written",
      "Low/high-pass filter each trailing HxW plane.");

  m.def(
      "fourier_basis_noise",
      [](int64_t h, int64_t w, int64_t i, int64_t j, double norm, double sign) {
        auto plane = spectral::fourier_basis_noise(h, w, i, j, norm, sign);
        Tensor<double> t({h, w}, std::move(plane));
        return array_from_tensor(t);
      },
      py::arg("height"), py::arg("width"), py::arg("i"), py::arg("j"), py::arg("l2_norm"),
      py::arg("sign") = 1.0);

  m.def(
      "highfreq_energy_ratio",
      [](py::array_t<double, py::array::c_style | py::array::forcecast> image, int64_t s) {
        return spectral::highfreq_energy_ratio(dtensor_from_array(image), s);
      },
      py::arg("image"), py::arg("filter_size"));

  m.def(
      "spectrum_energy_map",
      [](py::array_t<double, py::array::c_style | py::array::forcecast> batch) {
        return array_from_tensor(spectral::spectrum_energy_map(dtensor_from_array(batch)));
      },
      py::arg("batch"), "Mean log(1+|coefficient|) map over an (N,C,H,W) batch.");

  m.def(
      "attention_lowpass_decay",
      [](py::array_t<double, py::array::c_style | py::array::forcecast> a,
         std::vector<double> v, int kmax) {
        return spectral::attention_lowpass_decay(dtensor_from_array(a), v, kmax);
      },
      py::arg("attention"), py::arg("v"), py::arg("k_max"));

  m.def(
      "ce_loss",
      [](py::array_t<float, py::array::c_style | py::array::forcecast> logits,
         std::vector<int32_t> labels) {
        Graph<float> g;
        auto id = losses::ce_loss(g, g.leaf(tensor_from_array(logits)), labels);
        return static_cast<double>(g.value(id).data[0]);
      },
      py::arg("logits"), py::arg("labels"));

  m.def(
      "symmetric_kl",
      [](py::array_t<float, py::array::c_style | py::array::forcecast> p,
         py::array_t<float, py::array::c_style | py::array::forcecast> q) {
        Graph<float> g;
        auto id = losses::symmetric_kl(g, g.leaf(tensor_from_array(p)),
                                       g.leaf(tensor_from_array(q)));
        return static_cast<double>(g.value(id).data[0]);
      },
      py::arg("logits_p"), py::arg("logits_q"));

  m.def(
      "distill_loss",
      [](py::array_t<float, py::array::c_style | py::array::forcecast> student,
         std::vector<int32_t> labels,
         py::array_t<float, py::array::c_style | py::array::forcecast> teacher) {
        Graph<float> g;
        auto id = losses::distill_loss(g, g.leaf(tensor_from_array(student)), labels,
                                       tensor_from_array(teacher));
        return static_cast<double>(g.value(id).data[0]);
      },
      py::arg("student_logits"), py::arg("labels"), py::arg("teacher_logits"));

  py::class_<PyModel>(m, "Model")
      .def(py::init(&make_pymodel), py::arg("kind") = "vit", py::arg("config") = py::dict(),
           py::arg("seed") = 0)
      .def_property_readonly("kind",
                             [](const PyModel& pm) {
                               return pm.model.kind == models::ModelKind::Vit ? "vit" : "cnn";
                             })
      .def("forward",
           [](const PyModel& pm,
              py::array_t<float, py::array::c_style | py::array::forcecast> images) {
             return array_from_tensor(models::forward_logits(pm.model, tensor_from_array(images)));
           },
           py::arg("images"), "Logits for an (N,C,H,W) batch.")
      .def("save",
           [](const PyModel& pm, const std::string& path) {
             models::save_checkpoint(pm.model.params, path);
           },
           py::arg("path"))
      .def("load",
           [](PyModel& pm, const std::string& path) {
             pm.model.params = models::load_checkpoint(path);
           },
           py::arg("path"))
      .def("pgd_perturb",
           [](const PyModel& pm,
              py::array_t<float, py::array::c_style | py::array::forcecast> images,
              std::vector<int32_t> labels, double epsilon, double eta, int k,
              const std::string& freq_mode, int freq_s) {
             hat::HatConfig hc;
             hc.epsilon = epsilon;
             hc.eta = eta;
             hc.k = k;
             hc.freq_mode = hat::freq_mode_from_name(freq_mode);
             hc.freq_s = freq_s;
             return array_from_tensor(
                 hat::pgd_craft(pm.model, tensor_from_array(images), labels, hc, pm.stdev));
           },
           py::arg("images"), py::arg("labels"), py::arg("epsilon") = 2.0 / 255,
           py::arg("eta") = 1.0 / 255, py::arg("k") = 3, py::arg("freq_mode") = "full",
           py::arg("freq_s") = 8,
           "PGD perturbation (standardized units) for a labeled batch.");

  m.def(
      "make_synthetic",
      [](int64_t count, int num_classes, int image_size, uint64_t seed, const std::string& tag) {
        data::SyntheticSpec spec;
        spec.count = count;
        spec.num_classes = num_classes;
        spec.image_size = image_size;
        spec.seed = seed;
        data::Dataset ds = data::make_synthetic(spec, tag);
        py::array_t<int32_t> labels(static_cast<py::ssize_t>(ds.labels.size()));
        std::copy(ds.labels.begin(), ds.labels.end(), labels.mutable_data());
        return py::make_tuple(array_from_tensor(ds.images), labels);
      },
      py::arg("count"), py::arg("num_classes") = 10, py::arg("image_size") = 32,
      py::arg("seed") = 0, py::arg("tag") = "py",
      "Standardized procedural dataset: (images, labels).");

  m.def(
      "run",
      [](const std::string& config_json) {
        std::string tmp = "/tmp/hatkit_py_config.json";
        {
          std::ofstream out(tmp, std::ios::trunc);
          out << config_json;
        }
        config::RunConfig cfg = config::parse_config(tmp, {});
        set_compute_threads(cfg.threads);
        SeedSplitter seeds(cfg.seed);
        data::SyntheticSpec strain, seval;
        strain.count = cfg.data.synth_train;
        seval.count = cfg.data.synth_eval;
        strain.num_classes = seval.num_classes = cfg.data.synth_classes;
        strain.seed = seval.seed = cfg.seed;
        data::Dataset train_set, eval_set;
        if (cfg.data.kind == "cifar10") {
          train_set = data::load_cifar10(cfg.data.dir, data::Split::Train);
          eval_set = data::load_cifar10(cfg.data.dir, data::Split::Test);
          if (cfg.data.train_limit > 0) train_set = train_set.head(cfg.data.train_limit);
          if (cfg.data.eval_limit > 0) eval_set = eval_set.head(cfg.data.eval_limit);
        } else if (cfg.data.kind == "raw") {
          train_set = data::load_raw_dataset(cfg.data.path);
          eval_set = cfg.data.eval_path.empty() ? train_set
                                                : data::load_raw_dataset(cfg.data.eval_path);
        } else {
          train_set = data::make_synthetic(strain, "train");
          eval_set = data::make_synthetic(seval, "eval");
        }
        auto model = models::make_model<float>(
            cfg.model_kind == "vit" ? models::ModelKind::Vit : models::ModelKind::Cnn, cfg.vit,
            cfg.cnn, seeds.seed_for("init"));
        train::TrainConfig tc = cfg.train;
        tc.seed = cfg.seed;
        auto result = train::train(model, train_set, eval_set, tc, cfg.hat);
        py::list log;
        for (const auto& em : result.log) {
          py::dict row;
          row["epoch"] = em.epoch;
          row["phase"] = em.adversarial ? "adv" : "normal";
          row["train_loss"] = em.train_loss;
          row["train_acc"] = em.train_acc;
          row["eval_acc"] = em.eval_acc;
          log.append(row);
        }
        return log;
      },
      py::arg("config_json"),
      "Run a training job from a JSON config string; returns the per-epoch metric log.");
}
