#include <pybind11/numpy.h>
#include <pybind11/pybind11.h>
#include <pybind11/stl.h>
#include <pybind11/stl/filesystem.h>

#include <sstream>

#include "singleadv/app.hpp"
#include "singleadv/attack.hpp"
#include "singleadv/blackbox.hpp"
#include "singleadv/datasets.hpp"
#include "singleadv/defenses.hpp"
#include "singleadv/interpreters.hpp"
#include "singleadv/metrics.hpp"
#include "singleadv/models.hpp"

namespace py = pybind11;
using namespace singleadv;

namespace {

using Array = py::array_t<double, py::array::c_style | py::array::forcecast>;

Tensor to_tensor(const Array& a) {
  Shape shape;
  for (py::ssize_t i = 0; i < a.ndim(); ++i) shape.push_back(static_cast<int>(a.shape(i)));
  return Tensor(shape, std::vector<double>(a.data(), a.data() + a.size()));
}

Array to_array(const Tensor& t) {
  std::vector<py::ssize_t> shape(t.shape.begin(), t.shape.end());
  Array out(shape);
  std::copy(t.data.begin(), t.data.end(), out.mutable_data());
  return out;
}

LabeledDataset to_dataset(const Array& images, const std::vector<int>& labels, int num_categories) {
  if (images.ndim() != 4) throw ShapeError("images must be (N, C, H, W)");
  if (static_cast<std::size_t>(images.shape(0)) != labels.size())
    throw ParameterError("images and labels differ in length");
  LabeledDataset d;
  d.num_categories = num_categories;
  d.shape = {static_cast<int>(images.shape(1)), static_cast<int>(images.shape(2)), static_cast<int>(images.shape(3))};
  const std::size_t n = d.shape.dims().empty() ? 0 : static_cast<std::size_t>(images.size()) / labels.size();
  for (std::size_t i = 0; i < labels.size(); ++i) {
    const double* p = images.data() + i * n;
    d.samples.push_back({Tensor(d.shape.dims(), std::vector<double>(p, p + n)), labels[i]});
  }
  return d;
}

py::tuple from_dataset(const LabeledDataset& d) {
  const auto dims = d.shape.dims();
  Array images(std::vector<py::ssize_t>{static_cast<py::ssize_t>(d.size()), dims[0], dims[1], dims[2]});
  std::vector<int> labels;
  double* out = images.mutable_data();
  for (const auto& s : d.samples) {
    out = std::copy(s.image.data.begin(), s.image.data.end(), out);
    labels.push_back(s.label);
  }
  return py::make_tuple(images, labels);
}

}  // namespace

PYBIND11_MODULE(_core, m) {
  m.doc() = "Single-class universal adversarial perturbations against interpretable classifiers";

  py::register_exception<ParameterError>(m, "ParameterError", PyExc_ValueError);
  py::register_exception<ShapeError>(m, "ShapeError", PyExc_ValueError);

  m.def(
      "synthetic_shapes",
      [](int num_categories, int train_per_category, int test_per_category, bool color_coded, double position_jitter,
         std::uint64_t seed) {
        SyntheticShapesConfig c;
        c.num_categories = num_categories;
        c.train_per_category = train_per_category;
        c.test_per_category = test_per_category;
        c.color_coded = color_coded;
        c.position_jitter = position_jitter;
        c.seed = seed;
        const auto s = generate_synthetic_shapes(c);
        return py::make_tuple(from_dataset(s.train), from_dataset(s.test));
      },
      py::arg("num_categories") = 10, py::arg("train_per_category") = 150, py::arg("test_per_category") = 50,
      py::arg("color_coded") = false, py::arg("position_jitter") = 1.0, py::arg("seed") = 7,
      "Returns ((train_images, train_labels), (test_images, test_labels)).");
  m.def("category_names", [] { return synthetic_category_names(); });

  py::class_<Classifier>(m, "Classifier")
      .def_property_readonly("num_categories", &Classifier::num_categories)
      .def_property_readonly("fingerprint", &Classifier::fingerprint)
      .def("predict",
           [](const Classifier& h, const Array& x) {
             const auto p = predict(h, to_tensor(x));
             return py::make_tuple(p.label, to_array(p.probabilities));
           })
      .def("accuracy",
           [](const Classifier& h, const Array& images, const std::vector<int>& labels) {
             return accuracy(h, to_dataset(images, labels, h.num_categories()));
           })
      .def("save", [](const Classifier& h, const std::filesystem::path& p) { save_checkpoint(p, h); });

  m.def(
      "train_classifier",
      [](const Array& images, const std::vector<int>& labels, int num_categories, const std::string& arch, int epochs,
         std::uint64_t seed) {
        TrainConfig cfg;
        cfg.epochs = epochs;
        cfg.seed = seed;
        return train_classifier(to_dataset(images, labels, num_categories), architecture(arch), cfg);
      },
      py::arg("images"), py::arg("labels"), py::arg("num_categories"), py::arg("architecture") = "cnn-small",
      py::arg("epochs") = 5, py::arg("seed") = 1);
  m.def("load_classifier", [](const std::filesystem::path& p) { return load_checkpoint(p); });

  m.def(
      "interpret",
      [](const Classifier& h, const Array& x, int y, const std::string& kind) {
        return to_array(interpret(parse_interpreter(kind), h, to_tensor(x), y).values);
      },
      py::arg("model"), py::arg("image"), py::arg("label"), py::arg("interpreter") = "cam");

  m.def(
      "attack",
      [](const Classifier& h, const Array& images, const std::vector<int>& labels, int source, int target, double eta,
         double lambda, int max_iterations, const std::string& interpreter, std::uint64_t seed) {
        const auto data = to_dataset(images, labels, h.num_categories());
        AttackConfig c;
        c.source_category = source;
        c.target_category = target;
        c.eta = eta;
        c.lambda = lambda;
        c.max_iterations = max_iterations;
        c.interpreter = parse_interpreter(interpreter);
        c.seed = seed;
        const auto r = generate_universal_perturbation(h, data.filter_label(source), data.exclude_label(source), c);
        py::dict trace;
        trace["converged"] = r.trace.converged;
        trace["iterations"] = r.trace.iterations;
        trace["best_fooling_ratio"] = r.trace.best_fooling_ratio;
        std::vector<double> norms;
        for (const auto& row : r.trace.rows) norms.push_back(row.p_inf_norm);
        trace["p_inf_norm"] = norms;
        return py::make_tuple(to_array(r.perturbation.values), trace);
      },
      py::arg("model"), py::arg("images"), py::arg("labels"), py::arg("source"), py::arg("target"),
      py::arg("eta") = 0.05, py::arg("lam") = 0.1, py::arg("max_iterations") = 500, py::arg("interpreter") = "cam",
      py::arg("seed") = 1);

  m.def("apply_perturbation",
        [](const Array& x, const Array& p) { return to_array(apply_perturbation(to_tensor(x), to_tensor(p))); });
  m.def(
      "evaluate",
      [](const Classifier& h, const Array& images, const std::vector<int>& labels, const Array& p, int source,
         int target, double eta, const std::string& interpreter) {
        const auto data = to_dataset(images, labels, h.num_categories());
        Perturbation pert = Perturbation::zeros(data.shape, eta, source, target);
        pert.values = to_tensor(p);
        const auto r = evaluate(h, parse_interpreter(interpreter), pert, data.filter_label(source),
                                data.exclude_label(source));
        return py::module_::import("json").attr("loads")(r.to_json().dump());
      },
      py::arg("model"), py::arg("images"), py::arg("labels"), py::arg("perturbation"), py::arg("source"),
      py::arg("target"), py::arg("eta") = 0.05, py::arg("interpreter") = "cam");
  m.def(
      "iou",
      [](const Array& a, const Array& b) {
        const auto r = iou(to_tensor(a), to_tensor(b));
        return py::make_tuple(r.mean, r.per_threshold);
      },
      "Mean and per-threshold IoU over the thresholds 0.1, ..., 0.9.");
  m.def("apply_defense", [](const Array& x, const std::string& chain, std::uint64_t seed) {
    return to_array(apply_chain(to_tensor(x), DefenseChain::parse(chain, seed)));
  }, py::arg("image"), py::arg("chain"), py::arg("seed") = 0);

  m.def(
      "run_cli",
      [](std::vector<std::string> args) {
        args.insert(args.begin(), "singleadv");
        std::ostringstream out, err;
        const int code = run_cli(args, out, err);
        return py::make_tuple(code, out.str(), err.str());
      },
      "Runs a CLI subcommand in-process; returns (exit_code, stdout, stderr).");
}
