#include <sstream>
#include <string>
#include <vector>

#include <pybind11/numpy.h>
#include <pybind11/pybind11.h>
#include <pybind11/stl.h>

#include "cmcl/cli.hpp"
#include "cmcl/corpus.hpp"
#include "cmcl/error.hpp"
#include "cmcl/gradsuite.hpp"
#include "cmcl/losses.hpp"
#include "cmcl/metrics.hpp"

namespace py = pybind11;
using namespace cmcl;

namespace {

using Array = py::array_t<double, py::array::c_style | py::array::forcecast>;

Tensor to_tensor(const Array& a) {
  if (a.ndim() != 2) throw ShapeError("expected a 2-d array");
  const auto r = static_cast<std::size_t>(a.shape(0)), c = static_cast<std::size_t>(a.shape(1));
  return Tensor({r, c}, std::vector<double>(a.data(), a.data() + r * c));
}

Array to_array(const Tensor& t) {
  Array out({t.rows(), t.cols()});
  std::copy(t.data().begin(), t.data().end(), out.mutable_data());
  return out;
}

py::object to_py(const nlohmann::json& j) { return py::module_::import("json").attr("loads")(j.dump()); }

nlohmann::json from_py(const py::object& o) {
  return nlohmann::json::parse(py::module_::import("json").attr("dumps")(o).cast<std::string>());
}

py::dict contrastive(const Array& mu, const Array& table, const std::vector<std::size_t>& labels,
                     std::vector<double> gamma, double tau, const std::string& flavor, const std::string& negatives) {
  Tape tape;
  Var m = tape.variable(to_tensor(mu)), l = tape.variable(to_tensor(table));
  const ClassWeights g{std::move(gamma)};
  ContrastiveLoss r;
  if (flavor == "lcl") {
    r = loss_lcl(m, l, labels, g, tau);
  } else if (flavor == "licl") {
    r = loss_licl(m, l, labels, g, tau, parse_negative_mode(negatives));
  } else {
    throw ValidationError("unknown flavor '" + flavor + "' (expected lcl or licl)");
  }
  py::dict out;
  out["loss"] = r.loss.item();
  out["skipped"] = r.skipped;
  if (r.skipped < labels.size()) {
    tape.backward(r.loss);
    out["grad_mu"] = to_array(tape.grad(m));
    out["grad_table"] = to_array(tape.grad(l));
  } else {
    out["grad_mu"] = to_array(Tensor(m.shape()));
    out["grad_table"] = to_array(Tensor(l.shape()));
  }
  return out;
}

py::dict cmcl_loss(const std::vector<double>& layer_losses, double eta) {
  Tape tape;
  std::vector<Var> vars;
  for (double v : layer_losses) vars.push_back(tape.variable(Tensor::scalar(v)));
  const CmclLoss r = loss_cmcl(vars, eta);
  std::vector<double> hinges;
  for (const Var& h : r.hinges) hinges.push_back(h.item());
  py::dict out;
  out["total"] = r.total.item();
  out["hinges"] = hinges;
  return out;
}

py::list split_to_py(const Split& s) {
  py::list out;
  for (const Instance& inst : s) {
    py::dict d;
    d["id"] = inst.id;
    d["du1"] = inst.du1;
    d["du2"] = inst.du2;
    d["label"] = inst.label;
    out.append(d);
  }
  return out;
}

py::dict generate_corpus(const py::object& config) {
  GeneratorConfig c;
  if (!config.is_none()) from_json(from_py(config), c);
  const Corpus corpus = generate(c);
  py::dict out;
  out["train"] = split_to_py(corpus.train);
  out["dev"] = split_to_py(corpus.dev);
  out["test"] = split_to_py(corpus.test);
  return out;
}

py::object metrics(const std::vector<std::size_t>& gold, const std::vector<std::size_t>& predicted,
                   std::size_t num_classes) {
  return to_py(metrics_report(ConfusionMatrix::from_predictions(gold, predicted, num_classes)));
}

py::dict silhouette(const Array& points, const std::vector<std::size_t>& labels) {
  const Tensor t = to_tensor(points);
  std::vector<std::vector<double>> rows(t.rows());
  for (std::size_t i = 0; i < t.rows(); ++i) {
    rows[i].assign(t.data().begin() + static_cast<std::ptrdiff_t>(i * t.cols()),
                   t.data().begin() + static_cast<std::ptrdiff_t>((i + 1) * t.cols()));
  }
  const Silhouette s = silhouette_cosine(rows, labels);
  py::dict out;
  out["score"] = s.score;
  out["degenerate"] = s.degenerate;
  return out;
}

py::object grad_suite(std::uint64_t seed, std::size_t max_elements) {
  GradCheckOptions opts;
  opts.seed = seed;
  opts.max_elements = max_elements;
  return to_py(to_json(gradient_suite(seed, opts)));
}

py::tuple run(const std::vector<std::string>& args) {
  std::vector<const char*> argv = {"cmcl"};
  for (const auto& a : args) argv.push_back(a.c_str());
  std::ostringstream out, err;
  int code = 0;
  {
    py::gil_scoped_release release;
    code = dispatch(static_cast<int>(argv.size()), argv.data(), out, err);
  }
  return py::make_tuple(code, out.str(), err.str());
}

}  // namespace

PYBIND11_MODULE(_cmcl, m) {
  m.doc() = "Constrained multi-layer contrastive learning core";
  m.attr("__version__") = kVersion;

  auto base = py::register_exception<Error>(m, "Error", PyExc_RuntimeError);
  py::register_exception<ValidationError>(m, "ValidationError", base);
  py::register_exception<ShapeError>(m, "ShapeError", base);
  py::register_exception<NumericalError>(m, "NumericalError", base);

  m.def("class_weights", [](const std::vector<std::size_t>& counts) { return class_weights(counts).gamma; },
        py::arg("counts"), "Inverse-frequency class weights gamma_c = mean(counts) / counts[c].");
  m.def("contrastive_loss", &contrastive, py::arg("mu"), py::arg("label_table"), py::arg("labels"), py::arg("gamma"),
        py::arg("tau"), py::arg("flavor") = "licl", py::arg("negatives") = "hardest",
        "Contrastive loss of instance representations against a label table, with gradients.");
  m.def("cmcl_loss", &cmcl_loss, py::arg("layer_losses"), py::arg("eta"),
        "Hinge penalty on consecutive layer losses.");
  m.def("generate_corpus", &generate_corpus, py::arg("config") = py::none(),
        "Synthetic pairwise corpus as {'train', 'dev', 'test'} lists of instances.");
  m.def("metrics", &metrics, py::arg("gold"), py::arg("predicted"), py::arg("num_classes"),
        "Accuracy, macro F1 and per-class F1.");
  m.def("silhouette", &silhouette, py::arg("points"), py::arg("labels"), "Mean cosine silhouette coefficient.");
  m.def("gradient_suite", &grad_suite, py::arg("seed"), py::arg("max_elements") = 3,
        "Finite-difference checks of every loss term on a random configuration.");
  m.def("run", &run, py::arg("args"), "Run a CLI command; returns (exit_code, stdout, stderr).");
}
