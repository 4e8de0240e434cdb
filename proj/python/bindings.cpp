// Python bindings for the ciodetect core.
#include <pybind11/eigen.h>
#include <pybind11/pybind11.h>
#include <pybind11/stl.h>

#include <fstream>
#include <sstream>

#include "ciodetect/corpus.hpp"
#include "ciodetect/detect_model.hpp"
#include "ciodetect/error.hpp"
#include "ciodetect/evalkit.hpp"
#include "ciodetect/exact_small.hpp"
#include "ciodetect/features.hpp"
#include "ciodetect/manifest.hpp"
#include "ciodetect/narrative_select.hpp"
#include "ciodetect/synth.hpp"

namespace py = pybind11;
using namespace ciod;

namespace {

std::vector<std::uint8_t> as_bits(const std::vector<int>& v) {
  std::vector<std::uint8_t> out;
  out.reserve(v.size());
  for (int x : v) {
    if (x != 0 && x != 1) throw DomainError("expected 0/1 values");
    out.push_back(static_cast<std::uint8_t>(x));
  }
  return out;
}

FeatureTable restrict(const FeatureTable& t, const std::vector<std::string>& names) {
  std::vector<std::uint32_t> cols;
  for (const auto& n : names) cols.push_back(t.column_of(n));
  return t.select_columns(cols);
}

}  // namespace

PYBIND11_MODULE(_core, m) {
  m.doc() = "Coordinated-operation detection: exact two-cluster posterior, narrative selection, mixture model fitting";
  m.attr("__version__") = std::string(kToolVersion);

  static py::exception<Error> base(m, "CiodError", PyExc_ValueError);
  py::register_exception_translator([](std::exception_ptr p) {
    try {
      if (p) std::rethrow_exception(p);
    } catch (const Error& e) {
      py::set_error(base, (e.kind() + ": " + e.what()).c_str());
    }
  });

  // ---- exact two-cluster model

  py::class_<SimplePriors>(m, "SimplePriors")
      .def(py::init<>())
      .def_readwrite("a0", &SimplePriors::a0)
      .def_readwrite("b0", &SimplePriors::b0)
      .def_readwrite("a1", &SimplePriors::a1)
      .def_readwrite("b1", &SimplePriors::b1)
      .def_readwrite("c0", &SimplePriors::c0)
      .def_readwrite("d0", &SimplePriors::d0)
      .def_readwrite("c1", &SimplePriors::c1)
      .def_readwrite("d1", &SimplePriors::d1)
      .def_readwrite("rho", &SimplePriors::rho);

  m.def(
      "exact_posterior",
      [](const std::vector<int>& f, const std::vector<int>& n, const SimplePriors& priors, const std::string& method,
         std::int64_t tmax) {
        const SimpleData d = SimpleData::from_vectors(as_bits(f), as_bits(n));
        const TruncationSpec trunc = tmax > 0 ? TruncationSpec::below(tmax) : TruncationSpec::none();
        double bound = -INFINITY;
        std::vector<double> p;
        if (method == "enumerate") {
          p = exact_posterior_enumerate(d, priors);
        } else if (method == "factorized") {
          const FactorizedResult r = factorized_posterior(d, priors, trunc);
          p = r.p;
          bound = r.cells.log10_error_bound;
        } else if (method == "quadrature") {
          p = quadrature_posterior(d.cells, priors).per_account(d);
        } else {
          throw ConfigError("method must be enumerate, factorized or quadrature");
        }
        return py::make_tuple(p, bound);
      },
      py::arg("f"), py::arg("n"), py::arg("priors") = SimplePriors{}, py::arg("method") = "factorized",
      py::arg("tmax") = 0,
      "Per-account P(CIO). Returns (probabilities, log10 error bound; -inf when not applicable).");

  m.def(
      "truncation_error_bound",
      [](std::int64_t mm, double rho, std::int64_t tmax) {
        return truncation_error_bound(mm, rho, TruncationSpec::below(tmax));
      },
      py::arg("m"), py::arg("rho"), py::arg("tmax"), "log10 of the truncation error bound");

  m.def(
      "power_share",
      [](std::int64_t mm, const std::vector<double>& shares, std::size_t replicates, std::uint64_t seed) {
        ShareScenario sc;
        sc.m = mm;
        sc.shares = shares;
        sc.replicates = replicates;
        sc.seed = seed;
        std::vector<std::tuple<double, double, double>> out;
        for (const auto& r : power_analysis_share(sc)) out.emplace_back(r.x, r.p_cio_given_cio, r.p_cio_given_noncio);
        return out;
      },
      py::arg("m") = 25000, py::arg("shares") = ShareScenario{}.shares, py::arg("replicates") = 25,
      py::arg("seed") = 1, "Rows of (share, mean P(CIO|CIO), mean P(CIO|non-CIO))");

  m.def(
      "generate_simple",
      [](std::int64_t mm, double rho, std::pair<double, double> flag, std::pair<double, double> narrative,
         std::uint64_t seed) {
        const SimpleSample s = generate_simple(mm, rho, {flag.first, flag.second}, {narrative.first, narrative.second}, seed);
        std::vector<int> f(s.data.f.begin(), s.data.f.end()), n(s.data.n.begin(), s.data.n.end()),
            y(s.labels.begin(), s.labels.end());
        return py::make_tuple(f, n, y);
      },
      py::arg("m"), py::arg("rho"), py::arg("flag") = std::make_pair(0.98, 0.21),
      py::arg("narrative") = std::make_pair(0.93, 0.12), py::arg("seed") = 0,
      "Sample (f, n, labels) from the two-cluster model. Rates are (CIO, non-CIO).");

  // ---- features

  py::class_<FeatureTable>(m, "FeatureTable")
      .def_readonly("flag_names", &FeatureTable::flag_names)
      .def_readonly("narratives", &FeatureTable::narratives)
      .def_property_readonly("account_ids",
                             [](const FeatureTable& t) {
                               std::vector<std::string> ids;
                               for (const auto& a : t.accounts) ids.push_back(a.account_id);
                               return ids;
                             })
      .def_property_readonly("flags",
                             [](const FeatureTable& t) {
                               Eigen::MatrixXd out(static_cast<Eigen::Index>(t.accounts.size()),
                                                   static_cast<Eigen::Index>(t.num_flags()));
                               for (std::size_t j = 0; j < t.accounts.size(); ++j)
                                 for (std::size_t f = 0; f < t.num_flags(); ++f)
                                   out(static_cast<Eigen::Index>(j), static_cast<Eigen::Index>(f)) = t.accounts[j].flags[f];
                               return out;
                             })
      .def_property_readonly("messages",
                             [](const FeatureTable& t) {
                               std::vector<std::uint32_t> v;
                               for (const auto& a : t.accounts) v.push_back(a.message_count);
                               return v;
                             })
      .def("__len__", [](const FeatureTable& t) { return t.accounts.size(); })
      .def("select", &restrict, py::arg("narratives"), "Keep only the named narrative columns")
      .def("to_csv", [](const FeatureTable& t) {
        std::ostringstream s;
        write_feature_csv(t, s);
        return s.str();
      });

  m.def(
      "read_features",
      [](const std::string& path) {
        std::ifstream in(path, std::ios::binary);
        if (!in) throw IoError("cannot read " + path);
        return read_feature_csv(in);
      },
      py::arg("path"));

  m.def(
      "extract_features",
      [](const std::string& corpus_path) { return extract_features(load_corpus(corpus_path)).table; },
      py::arg("corpus_path"), "Flags and narrative counts from a JSONL corpus");

  m.def(
      "simulate_full",
      [](std::size_t n, std::size_t vocabulary, std::uint64_t seed) {
        const GeneratorSpec spec = planted_preset(n, vocabulary, seed);
        SyntheticData d = generate_full(spec);
        std::vector<std::vector<std::string>> planted;
        for (const auto& cols : spec.planted_narratives) {
          std::vector<std::string> names;
          for (auto c : cols) names.push_back(spec.narratives[c]);
          planted.push_back(names);
        }
        return py::make_tuple(std::move(d.table), d.labels, planted);
      },
      py::arg("n") = 50000, py::arg("vocabulary") = 2000, py::arg("seed") = 20240611,
      "Planted preset: (table, cluster labels, planted narrative names per cluster)");

  // ---- narrative selection

  m.def(
      "select_narratives",
      [](const FeatureTable& t, std::size_t k, std::uint64_t seed, std::size_t steps, std::size_t samples,
         const std::string& mode) {
        const auto stats = narrative_flag_stats(t);
        std::vector<std::uint32_t> top;
        if (mode == "kl") {
          SelectConfig cfg;
          cfg.steps = steps;
          cfg.samples = samples;
          const SuspicionScores s = score_narratives(stats, t.num_flags(), cfg, seed);
          top = select_top_k(s.max, stats, t.narratives, k);
        } else if (mode == "frequency") {
          top = select_most_frequent(stats, t.narratives, k);
        } else {
          throw ConfigError("mode must be kl or frequency");
        }
        std::vector<std::string> names;
        for (auto i : top) names.push_back(t.narratives[stats[i].narrative]);
        return names;
      },
      py::arg("table"), py::arg("k") = 40, py::arg("seed") = 0, py::arg("steps") = 5000, py::arg("samples") = 1000,
      py::arg("mode") = "kl", "Names of the K most suspicious (or most frequent) narratives");

  m.def(
      "prior_rate_below",
      [](double threshold, std::size_t draws, std::uint64_t seed) {
        return prior_rate_below(threshold, SelectConfig{}, draws, seed);
      },
      py::arg("threshold") = 0.2, py::arg("draws") = 100000, py::arg("seed") = 0);

  // ---- mixture model

  m.def(
      "fit_ensemble",
      [](const FeatureTable& t, std::optional<std::vector<int>> labels, long k, std::size_t steps, std::size_t runs,
         std::uint64_t seed, const std::string& mode, bool supervised, std::size_t batch, double lr, unsigned jobs) {
        const ModelData d = assemble_model_data(t, labels ? &*labels : nullptr);
        FitConfig cfg;
        cfg.steps = steps;
        cfg.seed = seed;
        cfg.mode = parse_feature_mode(mode);
        cfg.supervised = supervised;
        cfg.batch = batch;
        cfg.lr = lr;
        EnsembleResult e;
        {
          py::gil_scoped_release release;
          e = fit_ensemble(d, default_priors(d, k), cfg, runs, jobs);
        }
        return py::make_tuple(e.mean.minority, e.mean.resp);
      },
      py::arg("table"), py::arg("labels") = py::none(), py::arg("k") = 4, py::arg("steps") = 3000,
      py::arg("runs") = 20, py::arg("seed") = 0, py::arg("mode") = "both", py::arg("supervised") = false,
      py::arg("batch") = 1024, py::arg("lr") = 1e-2, py::arg("jobs") = 1,
      "Averaged (minority scores, responsibilities) over an ensemble of fits");

  // ---- evaluation

  m.def(
      "average_precision",
      [](const std::vector<double>& s, const std::vector<int>& y) { return average_precision(s, as_bits(y)); },
      py::arg("scores"), py::arg("labels"));
  m.def(
      "pr_curve",
      [](const std::vector<double>& s, const std::vector<int>& y) {
        std::vector<std::tuple<double, double, double>> out;
        for (const auto& p : pr_curve(s, as_bits(y)).points) out.emplace_back(p.threshold, p.precision, p.recall);
        return out;
      },
      py::arg("scores"), py::arg("labels"), "Rows of (threshold, precision, recall), thresholds decreasing");
  m.def(
      "max_f1",
      [](const std::vector<double>& s, const std::vector<int>& y) {
        const F1Result r = max_f1(s, as_bits(y));
        return py::make_tuple(r.f1, r.threshold);
      },
      py::arg("scores"), py::arg("labels"), "(best F1, threshold)");
  m.def(
      "baseline_share", [](const std::vector<int>& y) { return baseline_share(as_bits(y)); }, py::arg("labels"));
}
