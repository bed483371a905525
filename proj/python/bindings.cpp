#include <pybind11/numpy.h>
#include <pybind11/pybind11.h>
#include <pybind11/stl.h>
#include <pybind11/stl/filesystem.h>

#include "mctseg/errors.hpp"
#include "mctseg/gradcheck.hpp"
#include "mctseg/image.hpp"
#include "mctseg/metrics.hpp"
#include "mctseg/model.hpp"
#include "mctseg/training.hpp"
#include "mctseg/volume.hpp"

namespace py = pybind11;
using namespace mctseg;

namespace {

using U8Array = py::array_t<std::uint8_t, py::array::c_style | py::array::forcecast>;

std::pair<std::size_t, std::size_t> extent_of(const U8Array& a) {
  if (a.ndim() != 2) throw ShapeError("expected a 2-D uint8 array, got " + std::to_string(a.ndim()) + " dimensions");
  return {static_cast<std::size_t>(a.shape(1)), static_cast<std::size_t>(a.shape(0))};
}

GrayImage to_image(const U8Array& a) {
  const auto [w, h] = extent_of(a);
  return GrayImage(w, h, std::vector<std::uint8_t>(a.data(), a.data() + w * h));
}

LabelMask to_mask(const U8Array& a) {
  const auto [w, h] = extent_of(a);
  return LabelMask(w, h, std::vector<std::uint8_t>(a.data(), a.data() + w * h));
}

U8Array to_array(std::size_t w, std::size_t h, const std::vector<std::uint8_t>& values) {
  U8Array out({h, w});
  std::copy(values.begin(), values.end(), out.mutable_data());
  return out;
}

U8Array to_array(const GrayImage& img) { return to_array(img.width, img.height, img.pixels); }
U8Array to_array(const LabelMask& m) { return to_array(m.width, m.height, m.labels); }

ModelSpec make_spec(std::size_t classes, const std::array<std::size_t, 4>& blocks, std::size_t base_width) {
  ModelSpec spec = ModelSpec::resnet101(classes);
  spec.block_counts = blocks;
  spec.base_width = base_width;
  spec.validate();
  return spec;
}

py::dict scores_dict(const ConfusionCounts& cc) {
  py::dict d;
  d["tp"] = cc.tp;
  d["fp"] = cc.fp;
  d["tn"] = cc.tn;
  d["fn"] = cc.fn;
  d["accuracy"] = cc.total() ? py::cast(accuracy(cc)) : py::none();
  d["precision"] = precision(cc);
  d["recall"] = recall(cc);
  d["f1"] = f1(cc);
  return d;
}

std::vector<SamplePair> to_pairs(const std::vector<std::pair<U8Array, U8Array>>& pairs) {
  std::vector<SamplePair> out;
  for (std::size_t i = 0; i < pairs.size(); ++i) {
    char id[24];
    std::snprintf(id, sizeof id, "pair%05zu", i);
    out.push_back({to_image(pairs[i].first), to_mask(pairs[i].second), id});
  }
  return out;
}

}  // namespace

PYBIND11_MODULE(_core, m) {
  m.doc() = "Bindings for the micro-CT segmentation library";

  py::register_exception<Error>(m, "Error", PyExc_RuntimeError);
  py::register_exception<ConfigError>(m, "ConfigError", PyExc_ValueError);
  py::register_exception<DataError>(m, "DataError", PyExc_ValueError);
  py::register_exception<ShapeError>(m, "ShapeError", PyExc_ValueError);
  py::register_exception<NumericalError>(m, "NumericalError", PyExc_ArithmeticError);

  py::class_<ClassMap>(m, "ClassMap")
      .def_static("parse", &ClassMap::parse, py::arg("text"))
      .def_static("load", &ClassMap::load, py::arg("path"))
      .def("to_text", &ClassMap::to_text)
      .def("__len__", &ClassMap::size)
      .def("name", &ClassMap::name, py::arg("class_index"))
      .def("class_of", &ClassMap::class_of, py::arg("pixel_value"))
      .def("pixel_of", &ClassMap::pixel_of, py::arg("class_index"))
      .def_property_readonly("names", [](const ClassMap& cm) {
        std::vector<std::string> names;
        for (const auto& e : cm.entries()) names.push_back(e.name);
        return names;
      });

  m.def("load_gray", [](const std::filesystem::path& p) { return to_array(load_gray(p)); }, py::arg("path"));
  m.def("save_gray", [](const U8Array& a, const std::filesystem::path& p) { save_gray(to_image(a), p); },
        py::arg("image"), py::arg("path"));
  m.def("decode_mask", [](const U8Array& a, const ClassMap& cm) { return to_array(decode_mask(to_image(a), cm)); },
        py::arg("annotation"), py::arg("classmap"));
  m.def("encode_mask", [](const U8Array& a, const ClassMap& cm) { return to_array(encode_mask(to_mask(a), cm)); },
        py::arg("labels"), py::arg("classmap"));
  m.def("compose_three_layer_mask",
        [](const U8Array& base, const U8Array& air, std::size_t air_class) {
          return to_array(compose_three_layer_mask(to_mask(base), to_image(air), air_class));
        },
        py::arg("base_labels"), py::arg("air_binary"), py::arg("air_class"));
  m.def("downscale_image", [](const U8Array& a, double f) { return to_array(downscale(to_image(a), f)); },
        py::arg("image"), py::arg("factor"));
  m.def("downscale_mask", [](const U8Array& a, double f) { return to_array(downscale(to_mask(a), f)); },
        py::arg("labels"), py::arg("factor"));

  m.def("scores",
        [](std::uint64_t tp, std::uint64_t fp, std::uint64_t tn, std::uint64_t fn) {
          ConfusionCounts cc;
          cc.tp = tp;
          cc.fp = fp;
          cc.tn = tn;
          cc.fn = fn;
          return scores_dict(cc);
        },
        py::arg("tp"), py::arg("fp"), py::arg("tn"), py::arg("fn"));
  m.def("confusion",
        [](const U8Array& pred, const U8Array& truth, std::size_t classes) {
          py::list out;
          for (const auto& cc : confusion_all(to_mask(pred), to_mask(truth), classes)) out.append(scores_dict(cc));
          return out;
        },
        py::arg("predicted"), py::arg("truth"), py::arg("num_classes"));
  m.def("perimeter",
        [](const U8Array& a) {
          const auto [w, h] = extent_of(a);
          BinarySlice s;
          s.width = w;
          s.height = h;
          s.bits.assign(a.data(), a.data() + w * h);
          return perimeter(s);
        },
        py::arg("binary"));

  py::class_<Model<float>>(m, "Model")
      .def_static(
          "build",
          [](std::size_t classes, std::array<std::size_t, 4> blocks, std::size_t base_width, std::uint64_t seed) {
            Rng rng(seed);
            return build_fcn<float>(make_spec(classes, blocks, base_width), rng);
          },
          py::arg("num_classes"), py::arg("blocks") = std::array<std::size_t, 4>{3, 4, 23, 3},
          py::arg("base_width") = 64, py::arg("seed") = 0)
      .def_static("load", [](const std::filesystem::path& p) { return load_weights<float>(p); }, py::arg("path"))
      .def("save", [](Model<float>& model, const std::filesystem::path& p) { save_weights(model, p); }, py::arg("path"))
      .def_property_readonly("num_classes", [](const Model<float>& model) { return model.spec.num_classes; })
      .def_property_readonly("parameter_count", &Model<float>::parameter_count)
      .def("summary", [](const Model<float>& model, std::size_t h, std::size_t w) { return summarize(model, h, w).render(); },
           py::arg("height"), py::arg("width"))
      .def(
          "predict",
          [](const Model<float>& model, const U8Array& a, double scale) {
            const GrayImage img = downscale(to_image(a), scale);
            py::gil_scoped_release release;
            LabelMask labels = argmax_labels(infer(model, to_model_input<float>(img)));
            py::gil_scoped_acquire acquire;
            return to_array(labels);
          },
          py::arg("image"), py::arg("scale") = 1.0);

  m.def(
      "train",
      [](const std::vector<std::pair<U8Array, U8Array>>& pairs, std::size_t classes, std::size_t epochs, double lr,
         std::uint64_t seed, bool augment, std::array<std::size_t, 4> blocks, std::size_t base_width,
         std::optional<std::filesystem::path> out_dir) {
        const std::vector<SamplePair> samples = to_pairs(pairs);
        TrainConfig config;
        config.epochs = epochs;
        config.learning_rate = lr;
        config.seed = seed;
        config.augment = augment;
        TrainOptions options;
        options.out_dir = out_dir;
        const ModelSpec spec = make_spec(classes, blocks, base_width);
        TrainResult result = [&] {
          py::gil_scoped_release release;
          return train(samples, spec, config, options);
        }();
        std::vector<std::tuple<std::size_t, double, double>> history;
        for (const auto& r : result.history) history.emplace_back(r.epoch, r.train_loss, r.val_loss);
        py::dict d;
        d["model"] = std::move(result.model);
        d["best_model"] = std::move(result.best_model);
        d["history"] = history;
        d["best_epoch"] = result.best_epoch;
        return d;
      },
      py::arg("pairs"), py::arg("num_classes"), py::arg("epochs") = 200, py::arg("lr") = 1e-3, py::arg("seed") = 0,
      py::arg("augment") = true, py::arg("blocks") = std::array<std::size_t, 4>{3, 4, 23, 3},
      py::arg("base_width") = 64, py::arg("out_dir") = py::none());

  m.def(
      "gradcheck",
      [](std::uint64_t seed) {
        GradcheckReport report;
        {
          py::gil_scoped_release release;
          report = run_gradcheck(seed);
        }
        return report.max_rel_error();
      },
      py::arg("seed") = 0);
}
