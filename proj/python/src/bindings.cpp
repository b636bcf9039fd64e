#include <pybind11/numpy.h>
#include <pybind11/pybind11.h>
#include <pybind11/stl.h>

#include <sstream>

#include "moelab/experiment.hpp"
#include "moelab/gradients.hpp"
#include "moelab/io.hpp"
#include "moelab/lemma_lab.hpp"
#include "moelab/metrics.hpp"
#include "moelab/moe_layer.hpp"

namespace py = pybind11;
using namespace moelab;

namespace {

using Array = py::array_t<double, py::array::c_style | py::array::forcecast>;

Matrix to_matrix(const Array& a) {
  if (a.ndim() != 2) throw DimensionError("expected a 2-D array");
  const auto rows = static_cast<std::size_t>(a.shape(0));
  const auto cols = static_cast<std::size_t>(a.shape(1));
  return Matrix(rows, cols, std::vector<double>(a.data(), a.data() + a.size()));
}

py::array_t<double> to_array(const Matrix& m) {
  py::array_t<double> out({m.rows(), m.cols()});
  std::copy(m.data().begin(), m.data().end(), out.mutable_data());
  return out;
}

MoeParams make_params(const Array& router, const std::vector<Array>& experts, std::size_t k) {
  MoeParams p;
  p.router = to_matrix(router);
  for (const auto& e : experts) p.experts.push_back(to_matrix(e));
  p.k = k;
  p.validate();
  return p;
}

py::dict routing_dict(const RoutingState& s) {
  py::dict d;
  d["logits"] = to_array(s.logits);
  d["probs"] = to_array(s.probs);
  d["scores"] = to_array(s.scores);
  d["selected"] = s.selected;
  d["loads_f"] = s.loads_f;
  d["loads_p"] = s.loads_p;
  return d;
}

py::dict record_dict(const MetricsRecord& r) {
  py::dict d;
  d["step"] = r.step;
  d["loss_h"] = r.loss_h;
  d["loss_aux"] = r.loss_aux;
  d["loss_o"] = r.loss_o;
  d["loss_v"] = r.loss_v;
  d["total"] = r.total;
  d["maxvio"] = r.maxvio;
  d["expert_overlap"] = r.expert_overlap;
  d["routing_variance"] = r.routing_variance;
  d["score_variance"] = r.score_variance;
  d["silhouette"] = r.silhouette;
  return d;
}

}  // namespace

PYBIND11_MODULE(_core, m) {
  m.doc() = "Top-k MoE layer with balance, orthogonality and variance losses";

  py::register_exception<DimensionError>(m, "DimensionError", PyExc_ValueError);
  py::register_exception<NonFiniteError>(m, "NonFiniteError", PyExc_ArithmeticError);
  py::register_exception<io::ConfigError>(m, "ConfigError", PyExc_ValueError);

  py::enum_<AuxNormalization>(m, "AuxNormalization")
      .value("PAPER", AuxNormalization::Paper)
      .value("SWITCH", AuxNormalization::Switch);

  py::enum_<Ablation>(m, "Ablation")
      .value("WITHOUT_ALL", Ablation::WithoutAll)
      .value("ONLY_AUX", Ablation::OnlyAux)
      .value("WITHOUT_LV", Ablation::WithoutLv)
      .value("WITHOUT_LO", Ablation::WithoutLo)
      .value("OURS", Ablation::Ours);

  py::class_<LossWeights>(m, "LossWeights")
      .def(py::init<>())
      .def_readwrite("alpha", &LossWeights::alpha)
      .def_readwrite("beta", &LossWeights::beta)
      .def_readwrite("gamma", &LossWeights::gamma)
      .def_readwrite("eps_norm", &LossWeights::eps_norm)
      .def_readwrite("tau_gate", &LossWeights::tau_gate)
      .def_readwrite("aux_normalization", &LossWeights::aux_normalization)
      .def_readwrite("dynamic_scaling", &LossWeights::dynamic_scaling);

  py::class_<ExperimentConfig>(m, "ExperimentConfig")
      .def(py::init<>())
      .def_readwrite("d", &ExperimentConfig::d)
      .def_readwrite("d_out", &ExperimentConfig::d_out)
      .def_readwrite("n", &ExperimentConfig::n)
      .def_readwrite("k", &ExperimentConfig::k)
      .def_readwrite("N_batch", &ExperimentConfig::N_batch)
      .def_readwrite("steps", &ExperimentConfig::steps)
      .def_readwrite("lr", &ExperimentConfig::lr)
      .def_readwrite("n_domains", &ExperimentConfig::n_domains)
      .def_readwrite("domain_spread", &ExperimentConfig::domain_spread)
      .def_readwrite("noise_std", &ExperimentConfig::noise_std)
      .def_readwrite("seeds", &ExperimentConfig::seeds)
      .def_readwrite("weights", &ExperimentConfig::weights)
      .def_readwrite("ablation", &ExperimentConfig::ablation)
      .def_readwrite("fixed_batch", &ExperimentConfig::fixed_batch)
      .def_readwrite("overlap_neighbors", &ExperimentConfig::overlap_neighbors)
      .def("validate", &ExperimentConfig::validate)
      .def("to_text", [](const ExperimentConfig& c) { return io::format_config(c); })
      .def("update", [](ExperimentConfig& c, const std::map<std::string, std::string>& kv) {
        io::apply_config(kv, c);
      });

  m.def(
      "route",
      [](const Array& router, const std::vector<Array>& experts, std::size_t k, const Array& x) {
        return routing_dict(route(make_params(router, experts, k), to_matrix(x)));
      },
      py::arg("router"), py::arg("experts"), py::arg("k"), py::arg("tokens"));

  m.def(
      "forward",
      [](const Array& router, const std::vector<Array>& experts, std::size_t k, const Array& x) {
        const auto params = make_params(router, experts, k);
        const Matrix tokens = to_matrix(x);
        const auto state = route(params, tokens);
        return to_array(forward(params, tokens, state).combined);
      },
      py::arg("router"), py::arg("experts"), py::arg("k"), py::arg("tokens"));

  m.def(
      "forward_backward",
      [](const Array& router, const std::vector<Array>& experts, std::size_t k, const Array& x,
         const Array& t, const LossWeights& w) {
        const auto r =
            forward_backward(make_params(router, experts, k), to_matrix(x), to_matrix(t), w);
        py::dict out;
        out["l_h"] = r.losses.l_h;
        out["l_aux"] = r.losses.l_aux;
        out["l_o"] = r.losses.l_o;
        out["l_v"] = r.losses.l_v;
        out["total"] = r.losses.total;
        out["d_router"] = to_array(r.grads.d_router);
        py::list d_experts;
        for (const auto& g : r.grads.d_experts) d_experts.append(to_array(g));
        out["d_experts"] = d_experts;
        return out;
      },
      py::arg("router"), py::arg("experts"), py::arg("k"), py::arg("tokens"), py::arg("targets"),
      py::arg("weights") = LossWeights{});

  m.def(
      "gradcheck",
      [](std::uint64_t seed, double h) {
        const auto r = run_gradcheck_suite(seed, h);
        py::dict out;
        out["max_rel_err"] = r.max_rel_err;
        out["worst_seed"] = r.worst_seed;
        out["instances"] = r.instances.size();
        out["passed"] = r.passed(kGradcheckTolerance);
        return out;
      },
      py::arg("seed") = 7, py::arg("h") = kGradcheckStep);

  m.def("maxvio", [](const std::vector<double>& loads) { return maxvio(loads); });
  m.def("rmse", [](const std::vector<double>& a, const std::vector<double>& b) { return rmse(a, b); });
  m.def("silhouette", [](const Array& pts, const std::vector<int>& labels) {
    return silhouette(to_matrix(pts), labels);
  });
  m.def(
      "expert_overlap",
      [](const Array& pts, const std::vector<int>& labels, std::size_t k) {
        return expert_overlap(to_matrix(pts), labels, k);
      },
      py::arg("embeddings"), py::arg("labels"), py::arg("k") = kDefaultOverlapNeighbors);
  m.def("routing_variance", [](const Array& gates) { return routing_variance(to_matrix(gates)); });

  m.def("balanced_support", [](std::size_t N, std::size_t n, std::size_t k) {
    return to_array(lemma::build_balanced_support(N, n, k));
  });
  m.def("find_cycle", [](const Array& support) -> std::optional<std::string> {
    const auto c = lemma::find_cycle(to_matrix(support));
    if (!c) return std::nullopt;
    return c->to_string();
  });
  m.def(
      "certify_lemma1",
      [](std::size_t N, std::size_t n, std::size_t k, double delta) -> py::object {
        const auto inst = lemma::make_instance(N, n, k, delta);
        if (!inst) return py::none();
        const auto cert =
            lemma::certify_lemma1(inst->base, inst->perturbed, inst->cycle, delta, k);
        py::dict out;
        out["cycle"] = inst->cycle.to_string();
        out["passed"] = cert.passed();
        out["expected_variance"] = cert.expected_variance;
        out["cycle_row_variances"] = cert.cycle_row_variances;
        out["perturbed"] = to_array(inst->perturbed);
        return out;
      },
      py::arg("N"), py::arg("n"), py::arg("k"), py::arg("delta"));

  m.def(
      "train",
      [](const ExperimentConfig& c, std::optional<std::uint64_t> seed) {
        TrainLog log;
        {
          py::gil_scoped_release release;
          log = train(c, seed);
        }
        py::list records;
        for (const auto& r : log.records) records.append(record_dict(r));
        return records;
      },
      py::arg("config"), py::arg("seed") = py::none());

  m.def(
      "log_csv",
      [](const ExperimentConfig& c, std::optional<std::uint64_t> seed, std::size_t log_every) {
        std::ostringstream out;
        io::write_log_csv(out, train(c, seed).records, log_every);
        return out.str();
      },
      py::arg("config"), py::arg("seed") = py::none(), py::arg("log_every") = 1);
}
