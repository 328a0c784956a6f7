// Licensed under the Apache License, Version 2.0 (the "License");
// you may not use this file except in compliance with the License.
// You may obtain a copy of the License at
//
//     http://www.apache.org/licenses/LICENSE-2.0
//
// Unless required by applicable law or agreed to in writing, software
// distributed under the License is distributed on an "AS IS" BASIS,
// WITHOUT WARRANTIES OR CONDITIONS OF ANY KIND, either express or implied.
// See the License for the specific language governing permissions and
// limitations under the License.

// Python bindings (module cllab._core). Arrays cross the boundary as float64
// NumPy copies; forward passes run without gradient recording.

#include <pybind11/numpy.h>
#include <pybind11/pybind11.h>
#include <pybind11/stl.h>
#include <pybind11/stl/filesystem.h>

#include <iostream>

#include "cllab/datasets.hpp"
#include "cllab/error.hpp"
#include "cllab/linalg.hpp"
#include "cllab/metrics.hpp"
#include "cllab/models.hpp"
#include "cllab/runner.hpp"
#include "cllab/strategies.hpp"

namespace py = pybind11;
using namespace cllab;

namespace {

using DoubleArray = py::array_t<double, py::array::c_style | py::array::forcecast>;

Shape ShapeOf(const DoubleArray& a) {
  Shape s;
  for (py::ssize_t i = 0; i < a.ndim(); ++i) s.push_back(static_cast<std::size_t>(a.shape(i)));
  return s;
}

Tensor ToTensor(const DoubleArray& a) {
  std::vector<Scalar> v(static_cast<std::size_t>(a.size()));
  const double* p = a.data();
  for (std::size_t i = 0; i < v.size(); ++i) v[i] = static_cast<Scalar>(p[i]);
  return Tensor::FromData(ShapeOf(a), std::move(v));
}

py::array_t<double> ToArray(const Tensor& t) {
  std::vector<py::ssize_t> shape(t.shape().begin(), t.shape().end());
  py::array_t<double> out(shape);
  double* p = out.mutable_data();
  auto d = t.data();
  for (std::size_t i = 0; i < d.size(); ++i) p[i] = static_cast<double>(d[i]);
  return out;
}

Matrix ToMatrix(const DoubleArray& a) {
  if (a.ndim() != 2) throw DimensionError("expected a 2-D array, got " + std::to_string(a.ndim()) + "-D");
  const auto r = static_cast<std::size_t>(a.shape(0)), c = static_cast<std::size_t>(a.shape(1));
  return Matrix(r, c, std::vector<double>(a.data(), a.data() + a.size()));
}

py::array_t<double> MatrixToArray(const Matrix& m) {
  py::array_t<double> out({static_cast<py::ssize_t>(m.rows), static_cast<py::ssize_t>(m.cols)});
  std::copy(m.values.begin(), m.values.end(), out.mutable_data());
  return out;
}

std::vector<std::uint8_t> Bytes(const py::bytes& b) {
  std::string_view s = b;
  return {s.begin(), s.end()};
}

IlMode ParseIlMode(const std::string& s) {
  if (s == "task_il") return IlMode::kTaskIl;
  if (s == "class_il") return IlMode::kClassIl;
  throw ConfigError("il_mode must be task_il or class_il, got '" + s + "'");
}

std::map<std::string, std::string> Overrides(const py::dict& d) {
  std::map<std::string, std::string> out;
  for (auto [k, v] : d) {
    const std::string key = py::str(k);
    if (py::isinstance<py::bool_>(v)) {
      out[key] = v.cast<bool>() ? "true" : "false";
    } else {
      out[key] = py::str(v);
    }
  }
  return out;
}

py::dict ConfigDict(const ExperimentConfig& c) {
  py::dict d;
  d["run_name"] = c.RunName();
  d["digest"] = c.digest;
  d["canonical"] = c.canonical;
  d["seeds"] = c.seeds;
  d["warnings"] = c.warnings;
  d["output_dir"] = c.output_dir.string();
  d["data_dir"] = c.data_dir.string();
  return d;
}

py::dict LogDict(const MetricLog& log) {
  py::dict d;
  py::list rows;
  for (int t = 1; t <= log.tasks(); ++t) rows.append(log.accuracy.Row(t));
  d["accuracy"] = rows;
  d["avg_accuracy"] = log.avg_accuracy;
  d["avg_forgetting"] = log.avg_forgetting;
  py::dict erank;
  for (const auto& tr : log.traces)
    erank[py::str(std::string(ProbeKindName(tr.probe())) + "/" + std::string(LayerGroupName(tr.group())))] =
        tr.values();
  d["erank"] = erank;
  d["name"] = log.meta.name;
  return d;
}

}  // namespace

PYBIND11_MODULE(_core, m) {
  m.doc() = "Continual-learning rank-collapse laboratory: core bindings";
  m.attr("__version__") = std::string(LibraryVersion());
  m.attr("element_type") = std::string(ElementTypeName());

  static py::exception<Error> base(m, "Error", PyExc_RuntimeError);
  py::register_exception_translator([](std::exception_ptr p) {
    try {
      if (p) std::rethrow_exception(p);
    } catch (const Error& e) {
      py::object exc = base;
      const char* name = nullptr;
      switch (e.kind()) {
        case ErrorKind::kDimension: name = "DimensionError"; break;
        case ErrorKind::kParameter: name = "ParameterError"; break;
        case ErrorKind::kInput: name = "InputError"; break;
        case ErrorKind::kNumeric: name = "NumericError"; break;
        case ErrorKind::kUsage: name = "UsageError"; break;
        case ErrorKind::kParse: name = "ParseError"; break;
        case ErrorKind::kConfig: name = "ConfigError"; break;
        case ErrorKind::kIo: name = "IoError"; break;
        case ErrorKind::kIntegrity: name = "IntegrityError"; break;
        case ErrorKind::kFetch: name = "FetchError"; break;
      }
      py::module_ core = py::module_::import("cllab._core");
      if (name && py::hasattr(core, name)) exc = core.attr(name);
      py::object inst = exc(e.what());
      inst.attr("exit_code") = e.exit_code();
      if (const auto* pe = dynamic_cast<const ParseError*>(&e)) inst.attr("offset") = pe->offset();
      PyErr_SetObject(exc.ptr(), inst.ptr());
    }
  });
  for (const char* name : {"DimensionError", "ParameterError", "InputError", "NumericError", "UsageError",
                           "ParseError", "ConfigError", "IoError", "IntegrityError", "FetchError"}) {
    m.attr(name) = py::reinterpret_steal<py::object>(
        PyErr_NewException((std::string("cllab._core.") + name).c_str(), base.ptr(), nullptr));
  }

  // Linear algebra and eRank.
  m.def("singular_values", [](const DoubleArray& a) { return SingularValues(ToMatrix(a)).values; },
        "Descending singular values of a 2-D array.");
  m.def("effective_rank", [](const std::vector<double>& s) { return EffectiveRank(s); },
        "exp of the entropy of the normalized spectrum.");
  m.def("peak_normalize", [](const std::vector<double>& v) { return PeakNormalize(v); });
  m.def(
      "activation_erank",
      [](const DoubleArray& a, bool center, bool covariance) {
        return ActivationErank(ToMatrix(a), ActivationRankOptions{center, covariance});
      },
      py::arg("activations"), py::arg("center") = false, py::arg("covariance") = false);

  // Binary formats.
  m.def(
      "parse_idx",
      [](const py::bytes& b) {
        IdxArray a = ParseIdx(Bytes(b));
        std::vector<py::ssize_t> shape(a.dims.begin(), a.dims.end());
        py::array_t<std::uint8_t> out(shape);
        std::copy(a.raw.begin(), a.raw.end(), out.mutable_data());
        return out;
      },
      "Decodes an IDX1/IDX3 stream to a uint8 array.");
  m.def(
      "serialize_idx",
      [](py::array_t<std::uint8_t, py::array::c_style | py::array::forcecast> a) {
        IdxArray x;
        if (a.ndim() == 1) {
          x.magic = kIdxLabelMagic;
        } else if (a.ndim() == 3) {
          x.magic = kIdxImageMagic;
        } else {
          throw DimensionError("serialize_idx: expected 1-D labels or 3-D images");
        }
        for (py::ssize_t i = 0; i < a.ndim(); ++i) x.dims.push_back(static_cast<std::uint32_t>(a.shape(i)));
        x.raw.assign(a.data(), a.data() + a.size());
        auto bytes = SerializeIdx(x);
        return py::bytes(reinterpret_cast<const char*>(bytes.data()), bytes.size());
      },
      "Encodes uint8 labels (1-D) or images (3-D) as IDX.");
  m.def(
      "parse_cifar100",
      [](const py::bytes& b) {
        LabeledSet s = ParseCifar100(Bytes(b));
        return py::make_tuple(ToArray(s.images), s.labels);
      },
      "Decodes CIFAR-100 binary records to ([N,3,32,32] floats in [0,1], fine labels).");

  // Models.
  py::class_<Model>(m, "Model")
      .def(py::init([](const std::string& arch, const std::string& il_mode, int n_tasks, int classes_per_task,
                       int total_classes, std::size_t in_channels, std::size_t in_height, std::size_t in_width,
                       std::size_t mlp_hidden, std::size_t gru_hidden, double resnet_width, std::uint64_t seed) {
             ModelSpec s;
             s.arch = ParseArch(arch);
             s.il_mode = ParseIlMode(il_mode);
             s.n_tasks = n_tasks;
             s.classes_per_task = classes_per_task;
             s.total_classes = total_classes;
             s.in_channels = in_channels;
             s.in_height = in_height;
             s.in_width = in_width;
             s.mlp_hidden = mlp_hidden;
             s.gru_hidden = gru_hidden;
             s.resnet_width = resnet_width;
             return Model::Build(s, seed);
           }),
           py::arg("arch") = "mlp", py::arg("il_mode") = "task_il", py::arg("n_tasks") = 5,
           py::arg("classes_per_task") = 2, py::arg("total_classes") = 10, py::arg("in_channels") = 1,
           py::arg("in_height") = 28, py::arg("in_width") = 28, py::arg("mlp_hidden") = 256,
           py::arg("gru_hidden") = 64, py::arg("resnet_width") = 0.25, py::arg("seed") = 0)
      .def(
          "forward",
          [](Model& model, const DoubleArray& x, std::optional<int> task_id,
             std::optional<std::vector<int>> seen_classes) {
            NoGradGuard ng;
            return ToArray(model.Forward(ToTensor(x), Routing{task_id, std::move(seen_classes)}));
          },
          py::arg("x"), py::arg("task_id") = py::none(), py::arg("seen_classes") = py::none(),
          "Logits for a [N,C,H,W] batch; Task-IL needs task_id, Class-IL seen_classes.")
      .def("penultimate_activations",
           [](Model& model, const DoubleArray& x) { return MatrixToArray(model.PenultimateActivations(ToTensor(x))); })
      .def("group_erank",
           [](const Model& model, const std::string& group) {
             auto mats = model.GroupMatrices(ParseLayerGroup(group));
             return GroupErank(mats);
           })
      .def("parameter_names",
           [](const Model& model) {
             std::vector<std::string> names;
             for (const Parameter* p : model.parameters()) names.push_back(p->name);
             return names;
           })
      .def("parameter", [](const Model& model, const std::string& name) { return ToArray(model.parameter(name).value); })
      .def_property_readonly("parameter_count", &Model::ParameterCount)
      .def_property("training", &Model::training, &Model::set_training);

  // Replay buffer.
  py::class_<ReplayBuffer>(m, "ReplayBuffer")
      .def(py::init<std::size_t, std::uint64_t>(), py::arg("capacity"), py::arg("seed") = 0)
      .def(
          "insert",
          [](ReplayBuffer& b, const DoubleArray& item, int label) {
            std::vector<Scalar> v(item.data(), item.data() + item.size());
            b.Insert(v, ShapeOf(item), label);
          },
          py::arg("item"), py::arg("label"))
      .def("__len__", &ReplayBuffer::size)
      .def_property_readonly("capacity", &ReplayBuffer::capacity)
      .def_property_readonly("stream_count", &ReplayBuffer::stream_count)
      .def_property_readonly("labels", &ReplayBuffer::labels);

  m.def(
      "lwf_loss",
      [](const DoubleArray& student, const DoubleArray& teacher, const std::vector<int>& labels, double lam,
         double temperature) {
        StrategyConfig cfg;
        cfg.method = Method::kLwf;
        cfg.lambda = lam;
        cfg.temperature = temperature;
        cfg.Validate();
        NoGradGuard ng;
        LwfLoss l = LwfTotalLoss(ToTensor(student), ToTensor(teacher), labels, cfg);
        return py::dict(py::arg("total") = l.total.item(), py::arg("task") = l.task.item(),
                        py::arg("distill") = l.distill.item());
      },
      py::arg("student_logits"), py::arg("teacher_logits"), py::arg("labels"), py::arg("lam") = 1.0,
      py::arg("temperature") = 2.0, "Cross-entropy plus lam * T^2 * KL(teacher || student) at temperature T.");

  // Experiments.
  m.def("config_defaults", &ConfigDefaults);
  m.def(
      "resolve_config", [](const py::dict& overrides) { return ConfigDict(ResolveConfig(Overrides(overrides))); },
      py::arg("overrides") = py::dict());
  m.def("load_config_grid", [](const std::filesystem::path& p) {
    py::list out;
    for (const auto& c : LoadConfigGrid(p)) out.append(ConfigDict(c));
    return out;
  });
  m.def(
      "run_experiment",
      [](const py::dict& overrides, bool progress) {
        ExperimentConfig cfg = ResolveConfig(Overrides(overrides));
        ExperimentResult r;
        {
          py::gil_scoped_release release;
          r = RunExperiment(cfg, RunOptions{nullptr, progress ? &std::cerr : nullptr, true});
        }
        py::list seeds;
        for (const auto& s : r.seeds) {
          seeds.append(py::dict(py::arg("seed") = s.seed, py::arg("ok") = s.log.has_value(),
                                py::arg("error") = s.error,
                                py::arg("exit_code") = s.error_kind ? py::cast(static_cast<int>(*s.error_kind))
                                                                    : py::none()));
        }
        return py::dict(py::arg("dir") = r.dir.string(), py::arg("ok") = r.ok(), py::arg("seeds") = seeds);
      },
      py::arg("overrides") = py::dict(), py::arg("progress") = false,
      "Runs every seed of one config cell and writes <output_dir>/<arch>-<method>/.");
  m.def("import_metrics", [](const std::filesystem::path& dir) { return LogDict(ImportMetrics(dir)); });
  m.def("emit_plots", [](const std::vector<std::filesystem::path>& runs, const std::filesystem::path& out) {
    std::vector<std::string> files;
    for (const auto& p : EmitPlots(runs, out)) files.push_back(p.string());
    return files;
  });
}
