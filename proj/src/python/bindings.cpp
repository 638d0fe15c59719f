// Copyright 2026 The lmk Authors
// SPDX-License-Identifier: Apache-2.0

// Python module lmk._core. Matrices cross as float64 numpy arrays and
// configurations and reports as plain dicts.

#include <pybind11/numpy.h>
#include <pybind11/pybind11.h>
#include <pybind11/stl.h>

#include <json.hpp>

#include <cstdint>
#include <optional>
#include <stdexcept>
#include <string>
#include <vector>

#include "lmk/container.hpp"
#include "lmk/diagnostics.hpp"
#include "lmk/harness.hpp"
#include "lmk/linalg.hpp"
#include "lmk/mergers.hpp"
#include "lmk/tara.hpp"

namespace py = pybind11;
using nlohmann::json;
using namespace lmk;

namespace {

py::array_t<double> to_numpy(const Matrix& m) {
  py::array_t<double> out({m.rows(), m.cols()});
  auto view = out.mutable_unchecked<2>();
  for (std::size_t i = 0; i < m.rows(); ++i)
    for (std::size_t j = 0; j < m.cols(); ++j) view(i, j) = m(i, j);
  return out;
}

Matrix from_numpy(const py::array_t<double, py::array::c_style | py::array::forcecast>& a) {
  if (a.ndim() != 2) throw std::invalid_argument("expected a 2-D array");
  const auto view = a.unchecked<2>();
  Matrix m(static_cast<std::size_t>(a.shape(0)), static_cast<std::size_t>(a.shape(1)));
  for (std::size_t i = 0; i < m.rows(); ++i)
    for (std::size_t j = 0; j < m.cols(); ++j) m(i, j) = view(i, j);
  return m;
}

py::list to_numpy_list(const std::vector<Matrix>& ms) {
  py::list out;
  for (const auto& m : ms) out.append(to_numpy(m));
  return out;
}

std::vector<Matrix> from_numpy_list(const py::list& l) {
  std::vector<Matrix> out;
  for (const auto& item : l) out.push_back(from_numpy(item.cast<py::array_t<double>>()));
  return out;
}

json to_json_obj(const py::object& o) {
  if (o.is_none()) return json::object();
  const auto dumps = py::module_::import("json").attr("dumps");
  return json::parse(dumps(o).cast<std::string>());
}

py::object to_py(const json& j) { return py::module_::import("json").attr("loads")(j.dump()); }

/// A trained or loaded suite with its adapters.
struct PyRun {
  ToyRun run;

  std::vector<std::string> task_ids() const { return run.coll.task_ids; }
  std::vector<std::string> layer_ids() const { return run.coll.layer_ids(); }
  py::list base_weights() const { return to_numpy_list(run.coll.base_weights()); }
  py::array_t<double> delta(std::size_t task, std::size_t layer) const {
    return to_numpy(delta_weight(run.coll.layers.at(layer).adapters.at(task)));
  }
  py::dict references() const {
    py::dict d;
    for (const auto& t : run.suite.tasks) d[py::str(t.id)] = t.reference_accuracy;
    return d;
  }
  py::bytes container() const {
    const auto b = encode_collection(run.coll);
    return {reinterpret_cast<const char*>(b.data()), b.size()};
  }
  py::object sidecar() const { return to_py(suite_sidecar(run.suite)); }
};

PyRun py_train_toy(const py::object& suite, const py::object& finetune, std::optional<std::uint64_t> seed) {
  SuiteParams sp = suite_params_from_json(to_json_obj(suite));
  FinetuneConfig ft = finetune_config_from_json(to_json_obj(finetune));
  if (seed) {
    sp.seed = *seed;
    ft.seed = *seed;
  }
  py::gil_scoped_release release;
  return PyRun{train_toy(sp, ft)};
}

PyRun py_load(const py::bytes& container, const py::object& sidecar) {
  const std::string raw = container;
  const std::vector<std::uint8_t> bytes(raw.begin(), raw.end());
  return PyRun{ToyRun{suite_from_sidecar(to_json_obj(sidecar)), decode_collection(bytes)}};
}

MethodSpec method_spec(const std::string& method, const py::object& config, const py::object& preference,
                       double alpha, std::size_t iters, std::uint64_t seed, std::optional<std::size_t> shared_rank) {
  MethodSpec spec;
  spec.name = method;
  spec.alpha = alpha;
  spec.optim.max_iters = iters;
  spec.optim.seed = seed;
  spec.shared_rank = shared_rank;
  if (!spec.is_optimized()) {
    json mj = to_json_obj(config);
    mj["method"] = method;
    if (!mj.contains("rng_seed") &&
        (method == "dare_ties" || method == "knots_dare_ties" || method == "lora_lego"))
      mj["rng_seed"] = seed;
    spec.merge = MergeConfig::from_json(mj);
  } else if (!config.is_none()) {
    throw std::invalid_argument("merge config does not apply to " + method);
  }
  if (!preference.is_none()) spec.pref = Preference{preference.cast<std::vector<double>>()};
  return spec;
}

py::dict merge_result(const MethodOutcome& o) {
  py::dict d;
  d["weights"] = to_numpy_list(o.weights);
  if (o.run) {
    d["phi"] = o.run->result.phi;
    py::list psi;
    for (const auto& row : o.run->result.trace) psi.append(row.psi);
    d["psi_trace"] = psi;
  }
  return d;
}

}  // namespace

PYBIND11_MODULE(_core, m) {
  m.doc() = "LoRA merging toolkit";

  py::register_exception<ContainerError>(m, "ContainerError", PyExc_ValueError);
  py::register_exception<DivergenceError>(m, "DivergenceError", PyExc_RuntimeError);

  m.def("svd", [](const py::array_t<double>& x) {
    const SvdResult s = svd(from_numpy(x));
    return py::make_tuple(to_numpy(s.u), s.sigma, to_numpy(s.v));
  }, py::arg("x"), "Thin SVD: (u, sigma, v) with x = u diag(sigma) v^T.");
  m.def("singular_values", [](const py::array_t<double>& x) { return singular_values(from_numpy(x)); }, py::arg("x"));
  m.def("effective_rank", [](const std::vector<double>& sigma) { return effective_rank(sigma); }, py::arg("sigma"));

  m.def("stch_objective",
        [](const std::vector<double>& f, const std::vector<double>& z, const std::vector<double>& rho, double alpha) {
          return stch_objective(f, z, rho, alpha);
        },
        py::arg("f"), py::arg("z"), py::arg("rho"), py::arg("alpha"));
  m.def("stch_gradient",
        [](const std::vector<double>& f, const std::vector<double>& z, const std::vector<double>& rho, double alpha) {
          return stch_gradient(f, z, rho, alpha);
        },
        py::arg("f"), py::arg("z"), py::arg("rho"), py::arg("alpha"));
  m.def("isotonic_increasing", [](const std::vector<double>& y) { return isotonic_increasing(y); }, py::arg("y"));
  m.def("spearman", [](const std::vector<double>& x, const std::vector<double>& y) { return spearman(x, y); },
        py::arg("x"), py::arg("y"));
  m.def("method_names", &method_names);

  py::class_<PyRun>(m, "ToyRun")
      .def_property_readonly("task_ids", &PyRun::task_ids)
      .def_property_readonly("layer_ids", &PyRun::layer_ids)
      .def_property_readonly("references", &PyRun::references)
      .def("base_weights", &PyRun::base_weights)
      .def("delta", &PyRun::delta, py::arg("task"), py::arg("layer"))
      .def("container", &PyRun::container, "LMK1 bytes of the adapters and base weights.")
      .def("sidecar", &PyRun::sidecar, "Suite sidecar: heads, label ids, references, generator parameters.")
      .def("subset", [](const PyRun& r, const std::vector<std::size_t>& tasks) {
        return PyRun{ToyRun{r.run.suite, r.run.coll.subset(tasks)}};
      }, py::arg("tasks"));

  m.def("train_toy", &py_train_toy, py::arg("suite") = py::none(), py::arg("finetune") = py::none(),
        py::arg("seed") = py::none(), "Generate a synthetic suite and fine-tune one adapter per task.");
  m.def("load", &py_load, py::arg("container"), py::arg("sidecar"));

  m.def("merge",
        [](const PyRun& r, const std::string& method, const py::object& config, const py::object& preference,
           double alpha, std::size_t iters, std::uint64_t seed, std::optional<std::size_t> shared_rank) {
          const MethodSpec spec = method_spec(method, config, preference, alpha, iters, seed, shared_rank);
          MethodOutcome o;
          {
            py::gil_scoped_release release;
            o = run_method(r.run.coll, r.run.suite, spec);
          }
          return merge_result(o);
        },
        py::arg("run"), py::arg("method") = "ta", py::arg("config") = py::none(), py::arg("preference") = py::none(),
        py::arg("alpha") = 1.0, py::arg("iters") = 500, py::arg("seed") = 0, py::arg("shared_rank") = py::none(),
        "Merge with any method; returns {'weights': [...]} plus 'phi' and 'psi_trace' for optimized methods.");

  m.def("evaluate",
        [](const PyRun& r, const py::list& weights, const std::vector<std::size_t>& hits) {
          const auto w = from_numpy_list(weights);
          EvalReport rep = evaluate(w, r.run.suite);
          if (!hits.empty()) rep.hits = evaluate_joint(w, r.run.suite, hits);
          return to_py(to_json(rep));
        },
        py::arg("run"), py::arg("weights"), py::arg("hits") = std::vector<std::size_t>{});

  m.def("sweep",
        [](const PyRun& r, const std::vector<std::vector<double>>& prefs, const std::string& method, double alpha,
           std::size_t iters, std::uint64_t seed) {
          std::vector<Preference> ps;
          for (const auto& p : prefs) ps.push_back(Preference{p});
          const MethodSpec spec = method_spec(method, py::none(), py::none(), alpha, iters, seed, std::nullopt);
          std::vector<SweepPoint> pts;
          {
            py::gil_scoped_release release;
            pts = sweep_preferences(r.run.coll, r.run.suite, ps, spec);
          }
          py::list out;
          for (const auto& p : pts) {
            py::dict d;
            d["preference"] = p.pref.rho;
            d["report"] = to_py(to_json(p.report));
            out.append(d);
          }
          return out;
        },
        py::arg("run"), py::arg("preferences"), py::arg("method") = "tara-b", py::arg("alpha") = 1.0,
        py::arg("iters") = 500, py::arg("seed") = 0);

  m.def("coverage", [](const PyRun& r) { return to_py(to_json(coverage_report(r.run.coll))); }, py::arg("run"));
  m.def("xi", [](const PyRun& r) { return to_py(to_json(xi_all(r.run.coll, r.run.suite))); }, py::arg("run"));
  m.def("kappa", [](const PyRun& r) { return to_py(to_json(kappa_profile(r.run.coll, r.run.suite))); },
        py::arg("run"));
}
