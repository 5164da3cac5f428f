#include "invarnet/cli.hpp"
#include "invarnet/oracle.hpp"
#include "invarnet/pipeline.hpp"
#include "invarnet/verify.hpp"

#include <pybind11/eigen.h>
#include <pybind11/pybind11.h>
#include <pybind11/stl.h>

#include <sstream>

namespace py = pybind11;
using namespace invarnet;

namespace {

py::dict check_dict(const verify::CheckResult& r) {
  py::dict d;
  d["name"] = r.name;
  d["passed"] = r.passed;
  d["value"] = r.value;
  d["threshold"] = r.threshold;
  return d;
}

}  // namespace

PYBIND11_MODULE(_core, m) {
  m.doc() = "Adversarial invariant representations: training, exact oracle, evaluation.";

  // Later registrations are tried first, so the base class goes first.
  py::register_exception<Error>(m, "Error", PyExc_RuntimeError);
  py::register_exception<ConfigError>(m, "ConfigError", PyExc_ValueError);
  py::register_exception<DataError>(m, "DataError", PyExc_ValueError);
  py::register_exception<GuardError>(m, "GuardError", PyExc_RuntimeError);
  py::register_exception<NumericalError>(m, "NumericalError", PyExc_ArithmeticError);

  m.def(
      "verify",
      [](std::uint64_t seed, int instances, int worlds) {
        verify::VerifyOptions o;
        o.seed = seed;
        o.gradient_instances = instances;
        o.worlds = worlds;
        py::list out;
        for (const auto& r : verify::run_all(o)) out.append(check_dict(r));
        return out;
      },
      py::arg("seed") = 0, py::arg("instances") = 20, py::arg("worlds") = 10);

  m.def(
      "oracle_search",
      [](const std::string& scenario, double dependence, int nx, int ns, int ny, bool informative, int codes,
         double gamma, std::uint64_t seed) {
        oracle::WorldSizes sizes{nx, ns, ny, informative};
        const auto sc = scenario == "confounded" ? oracle::Scenario::confounded : oracle::Scenario::independent;
        if (scenario != "confounded" && scenario != "independent") throw ConfigError("unknown scenario " + scenario);
        const auto world = oracle::generate_world(sc, sizes, dependence, seed);
        const auto r = oracle::exhaustive_encoder_search(world, codes, gamma, false);
        py::dict d;
        d["encoder"] = r.best.code;
        d["table_id"] = r.best_id;
        d["tables"] = r.tables;
        d["J"] = r.j_star;
        d["H_s_given_h"] = r.h_s;
        d["H_y_given_h"] = r.h_y;
        d["H_s"] = oracle::entropy_s(world);
        return d;
      },
      py::arg("scenario") = "independent", py::arg("dependence") = 0.0, py::arg("nx") = 4, py::arg("ns") = 2,
      py::arg("ny") = 2, py::arg("informative") = false, py::arg("codes") = 2, py::arg("gamma") = 1.0,
      py::arg("seed") = 0);

  m.def(
      "synthetic",
      [](bool confounded, int n, int d, int ns, int ny, double dependence, double noise, std::uint64_t seed) {
        const auto ds = confounded ? data::synth_confounded(n, d, ns, ny, dependence, noise, seed)
                                   : data::synth_independent(n, d, ns, ny, noise, seed);
        return py::make_tuple(ds.x, ds.s, ds.y);
      },
      py::arg("confounded") = false, py::arg("n") = 5000, py::arg("d") = 20, py::arg("ns") = 2, py::arg("ny") = 2,
      py::arg("dependence") = 0.0, py::arg("noise") = 1.0, py::arg("seed") = 0);

  // Metrics come back as the JSON text of a MetricsReport.
  m.def(
      "run_synthetic_json",
      [](bool confounded, int n, int d, double dependence, double gamma, int epochs, std::uint64_t seed) {
        pipeline::SyntheticSpec spec;
        spec.confounded = confounded;
        spec.n = n;
        spec.d = d;
        spec.dependence = dependence;
        pipeline::Experiment exp;
        exp.train.gamma = gamma;
        exp.train.epochs = epochs;
        py::gil_scoped_release release;
        return pipeline::run_synthetic(spec, exp, seed).metrics.to_json().dump();
      },
      py::arg("confounded") = false, py::arg("n") = 5000, py::arg("d") = 20, py::arg("dependence") = 0.0,
      py::arg("gamma") = 1.0, py::arg("epochs") = 50, py::arg("seed") = 0);

  m.def(
      "biased_category_accuracy",
      [](const Labels& pred, const Labels& y, const Labels& s, int ny, int ns) {
        return eval::biased_category_accuracy(pred, y, s, ny, ns).average;
      },
      py::arg("pred"), py::arg("y"), py::arg("s"), py::arg("ny"), py::arg("ns"));

  m.def(
      "cli",
      [](const std::vector<std::string>& args) {
        std::ostringstream out, err;
        const int code = cli::run(args, out, err);
        return py::make_tuple(code, out.str(), err.str());
      },
      py::arg("args"));
}
