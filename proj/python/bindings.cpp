#include <pybind11/numpy.h>
#include <pybind11/pybind11.h>
#include <pybind11/stl.h>

#include "smagnet/analysis.hpp"
#include "smagnet/config.hpp"
#include "smagnet/errors.hpp"
#include "smagnet/experiment.hpp"
#include "smagnet/stats.hpp"

namespace py = pybind11;
using namespace smagnet;

namespace {

template <class T>
py::array_t<T> to_array(const std::vector<T>& v, std::vector<py::ssize_t> shape) {
  py::array_t<T> a(shape);
  std::copy(v.begin(), v.end(), a.mutable_data());
  return a;
}

template <class T>
std::vector<T> from_array(const py::array_t<T, py::array::c_style | py::array::forcecast>& a) {
  return std::vector<T>(a.data(), a.data() + a.size());
}

py::dict scene_dict(const data::Scene& s) {
  const auto H = static_cast<py::ssize_t>(s.height), W = static_cast<py::ssize_t>(s.width);
  py::dict d;
  d["id"] = s.id;
  d["sar"] = to_array(s.sar, {static_cast<py::ssize_t>(data::kSarBands), H, W});
  d["msi"] = to_array(s.msi, {static_cast<py::ssize_t>(data::kMsiBands), H, W});
  d["validity"] = to_array(s.validity, {H, W});
  d["label"] = to_array(s.label, {H, W});
  return d;
}

py::dict metrics_dict(const eval::MetricReport& m) {
  py::dict d;
  d["oa"] = m.oa;
  d["precision"] = m.precision;
  d["recall"] = m.recall;
  d["iou"] = m.iou;
  return d;
}

// Inference wrapper holding a float model.
class PyModel {
 public:
  explicit PyModel(const std::string& config_json) : model_(parse(config_json)) {}
  explicit PyModel(nn::Model<float>&& m) : model_(std::move(m)) {}

  static PyModel load(const std::string& run_dir) { return PyModel(experiment::load_run(run_dir).model); }

  // Normalized inputs [B,2,H,W], [B,4,H,W], [B,1,H,W]; returns the fused and
  // (for SMAGNet) SAR-head logits.
  py::tuple forward(const py::array_t<float, py::array::c_style | py::array::forcecast>& sar,
                    const py::array_t<float, py::array::c_style | py::array::forcecast>& msi,
                    const py::array_t<float, py::array::c_style | py::array::forcecast>& validity) {
    auto shape_of = [](const py::array& a) {
      if (a.ndim() != 4) throw std::invalid_argument("inputs must be 4-D [B,C,H,W]");
      Shape s;
      for (py::ssize_t i = 0; i < 4; ++i) s.push_back(static_cast<std::size_t>(a.shape(i)));
      return s;
    };
    nn::Batch<float> b;
    b.sar = Tensor::from(shape_of(sar), from_array<float>(sar));
    b.msi = Tensor::from(shape_of(msi), from_array<float>(msi));
    b.validity = Tensor::from(shape_of(validity), from_array<float>(validity));
    NoGradGuard guard;
    const auto out = model_.forward(b, false);
    auto arr = [](const Tensor& t) -> py::object {
      if (!t.defined()) return py::none();
      std::vector<py::ssize_t> s(t.shape().begin(), t.shape().end());
      return to_array(std::vector<float>(t.data().begin(), t.data().end()), s);
    };
    return py::make_tuple(arr(out.logits_fused), arr(out.logits_sar));
  }

  std::size_t parameter_count() const { return model_.parameter_count(); }
  std::vector<std::string> parameter_names() const {
    std::vector<std::string> out;
    for (const auto& [name, p] : model_.parameters()) out.push_back(name);
    return out;
  }

 private:
  static nn::ModelConfig parse(const std::string& config_json) {
    nn::ModelConfig c;
    if (config_json.empty()) return c;
    try {
      // Given keys override the defaults.
      nlohmann::json j = c;
      j.update(nlohmann::json::parse(config_json));
      return j.get<nn::ModelConfig>();
    } catch (const nlohmann::json::exception& e) {
      throw ConfigError(e.what());
    } catch (const std::invalid_argument& e) {
      throw ConfigError(e.what());
    }
  }
  nn::Model<float> model_;
};

}  // namespace

PYBIND11_MODULE(_smagnet, m) {
  m.doc() = "Masked gated SAR/MSI fusion for flood segmentation";

  py::register_exception<ConfigError>(m, "ConfigError", PyExc_ValueError);
  py::register_exception<DataError>(m, "DataError", PyExc_IOError);
  py::register_exception<NumericError>(m, "NumericError", PyExc_ArithmeticError);

  m.def(
      "generate_scene",
      [](std::uint64_t seed, std::size_t size) {
        data::GenParams p;
        p.size = size;
        return scene_dict(data::generate_scene(seed, p, "scene"));
      },
      py::arg("seed"), py::arg("size") = 64);

  m.def(
      "gen_data",
      [](const std::string& out, std::size_t scenes, std::size_t size, std::uint64_t seed) {
        const auto d = experiment::gen_data(out, scenes, size, seed);
        py::dict r;
        r["train"] = d.manifest.train;
        r["val"] = d.manifest.val;
        r["test"] = d.manifest.test;
        return r;
      },
      py::arg("out"), py::arg("scenes") = 384, py::arg("size") = 64, py::arg("seed") = 7);

  m.def(
      "load_scene",
      [](const std::string& data_dir, const std::string& id) {
        return scene_dict(data::read_dataset(data_dir).find(id));
      },
      py::arg("data_dir"), py::arg("id"));

  m.def(
      "train",
      [](const std::string& config_json, const std::string& out) {
        RunConfig c;
        try {
          c = RunConfig::from_json(nlohmann::json::parse(config_json));
        } catch (const nlohmann::json::parse_error& e) {
          throw ConfigError(e.what());
        }
        c.model.seed = c.train.seed;
        c.validate();
        const auto r = experiment::train_run(c, out);
        py::dict d;
        d["best_epoch"] = r.best_epoch;
        d["best_val_loss"] = r.best_val_loss;
        d["threshold"] = r.threshold.threshold;
        return d;
      },
      py::arg("config_json"), py::arg("out"));

  m.def(
      "evaluate",
      [](const std::string& run, const std::string& data) {
        return metrics_dict(eval::metrics(experiment::eval_run(run, data).fused));
      },
      py::arg("run"), py::arg("data"));

  m.def(
      "sweep",
      [](const std::string& run, const std::string& data, const std::vector<double>& ratios,
         const std::string& pattern) {
        const auto r = experiment::sweep_run(run, data, ratios, eval::parse_pattern(pattern));
        std::vector<std::tuple<double, double, double>> rows;
        for (const auto& p : r.points) rows.emplace_back(p.ratio * 100.0, p.mean_iou, p.std_iou);
        return rows;
      },
      py::arg("run"), py::arg("data"), py::arg("ratios") = std::vector<double>{0, 25, 50, 75, 100},
      py::arg("pattern") = "band");

  m.def(
      "metrics",
      [](std::uint64_t tp, std::uint64_t fp, std::uint64_t fn, std::uint64_t tn) {
        return metrics_dict(eval::metrics({tp, fp, fn, tn}));
      },
      py::arg("tp"), py::arg("fp"), py::arg("fn"), py::arg("tn"));

  m.def(
      "mannwhitney_u",
      [](const std::vector<double>& a, const std::vector<double>& b) {
        const auto r = eval::mannwhitney_u(a, b);
        return py::make_tuple(r.u, r.p, r.exact);
      },
      py::arg("a"), py::arg("b"));

  m.def(
      "select_threshold",
      [](const py::array_t<float, py::array::c_style | py::array::forcecast>& probs,
         const py::array_t<std::uint8_t, py::array::c_style | py::array::forcecast>& labels) {
        const auto r = train::select_threshold(from_array<float>(probs), from_array<std::uint8_t>(labels));
        return py::make_tuple(r.threshold, r.iou, r.degenerate);
      },
      py::arg("probs"), py::arg("labels"));

  m.def(
      "ndvi",
      [](const py::array_t<float, py::array::c_style | py::array::forcecast>& red,
         const py::array_t<float, py::array::c_style | py::array::forcecast>& nir) {
        if (red.size() != nir.size()) throw std::invalid_argument("red and nir differ in size");
        std::vector<py::ssize_t> shape(red.shape(), red.shape() + red.ndim());
        return to_array(eval::ndvi(from_array<float>(red), from_array<float>(nir)), shape);
      },
      py::arg("red"), py::arg("nir"));

  py::class_<PyModel>(m, "Model")
      .def(py::init<const std::string&>(), py::arg("config_json") = "")
      .def_static("load", &PyModel::load, py::arg("run_dir"))
      .def("forward", &PyModel::forward, py::arg("sar"), py::arg("msi"), py::arg("validity"))
      .def_property_readonly("parameter_count", &PyModel::parameter_count)
      .def("parameter_names", &PyModel::parameter_names);
}
