// ciodetect: command-line driver for the detection pipeline.
#include <cmath>
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <functional>
#include <iostream>
#include <map>
#include <sstream>
#include <string>
#include <unordered_map>
#include <vector>

#include "CLI11.hpp"
#include "ciodetect/corpus.hpp"
#include "ciodetect/csv.hpp"
#include "ciodetect/detect_model.hpp"
#include "ciodetect/error.hpp"
#include "ciodetect/evalkit.hpp"
#include "ciodetect/exact_small.hpp"
#include "ciodetect/features.hpp"
#include "ciodetect/manifest.hpp"
#include "ciodetect/narrative_select.hpp"
#include "ciodetect/parallel.hpp"
#include "ciodetect/random.hpp"
#include "ciodetect/synth.hpp"
#include "json.hpp"

namespace fs = std::filesystem;
using ojson = nlohmann::ordered_json;
using namespace ciod;

namespace {

// Reads a JSON object into CLI11 config items. Nested objects address
// subcommands, e.g. {"seed": 3, "fit": {"steps": 500}}.
class JsonConfig : public CLI::Config {
 public:
  std::string to_config(const CLI::App*, bool, bool, std::string) const override { return {}; }

  std::vector<CLI::ConfigItem> from_config(std::istream& in) const override {
    nlohmann::json j;
    try {
      in >> j;
    } catch (const nlohmann::json::exception& e) {
      throw CLI::ConversionError("config is not valid JSON: " + std::string(e.what()));
    }
    if (!j.is_object()) throw CLI::ConversionError("config must be a JSON object");
    std::vector<CLI::ConfigItem> items;
    walk(j, {}, items);
    return items;
  }

 private:
  static std::string scalar(const nlohmann::json& v) {
    if (v.is_string()) return v.get<std::string>();
    if (v.is_boolean()) return v.get<bool>() ? "true" : "false";
    return v.dump();
  }

  static void walk(const nlohmann::json& j, std::vector<std::string> parents, std::vector<CLI::ConfigItem>& out) {
    for (const auto& [key, value] : j.items()) {
      if (value.is_object()) {
        auto p = parents;
        p.push_back(key);
        walk(value, p, out);
        continue;
      }
      CLI::ConfigItem item;
      item.parents = parents;
      item.name = key;
      if (value.is_array()) {
        for (const auto& v : value) item.inputs.push_back(scalar(v));
      } else {
        item.inputs.push_back(scalar(value));
      }
      out.push_back(std::move(item));
    }
  }
};

struct Globals {
  std::uint64_t seed = 0;
  unsigned jobs = default_jobs();
  std::string workdir = ".";
};

// A subcommand with a record of its options for the resolved config.
struct Command {
  CLI::App* app = nullptr;
  std::vector<std::function<void(ojson&)>> dump;

  template <typename T>
  CLI::Option* option(const std::string& name, T& var, const std::string& desc) {
    dump.push_back([name, &var](ojson& j) { j[name] = var; });
    return app->add_option("--" + name, var, desc)->capture_default_str();
  }
  CLI::Option* flag(const std::string& name, bool& var, const std::string& desc) {
    dump.push_back([name, &var](ojson& j) { j[name] = var; });
    return app->add_flag("--" + name, var, desc);
  }
  ojson resolved(const Globals& g) const {
    ojson j;
    j["seed"] = g.seed;
    for (const auto& d : dump) d(j);
    return j;
  }
};

void log_line(const std::string& msg) { std::cerr << "[ciodetect] " << msg << "\n"; }

// Output directory plus manifest bookkeeping for one subcommand run.
class Run {
 public:
  Run(const Globals& g, const Command& cmd, const std::string& name)
      : dir_(fs::path(g.workdir) / name) {
    fs::create_directories(dir_);
    manifest_.command = name;
    manifest_.config_json = cmd.resolved(g).dump();
  }

  fs::path path(const std::string& file) const { return dir_ / file; }

  void input(const std::string& p) { manifest_.add_input(p); }

  void write(const std::string& file, const std::string& content) {
    const fs::path p = dir_ / file;
    fs::create_directories(p.parent_path());
    std::ofstream out(p, std::ios::binary);
    if (!out) throw IoError("cannot write " + p.string());
    out << content;
    out.close();
    if (!out) throw IoError("cannot write " + p.string());
    manifest_.add_output(p);
  }

  template <typename Fn>
  void write_with(const std::string& file, Fn&& fn) {
    std::ostringstream s;
    fn(s);
    write(file, s.str());
  }

  void finish() {
    manifest_.write(dir_ / "manifest.json");
    log_line("wrote " + dir_.string());
  }

 private:
  fs::path dir_;
  Manifest manifest_;
};

std::ifstream open_in(const std::string& p) {
  std::ifstream in(p, std::ios::binary);
  if (!in) throw IoError("cannot read " + p);
  return in;
}

std::string slurp(const std::string& p) {
  std::ifstream in = open_in(p);
  std::ostringstream s;
  s << in.rdbuf();
  return s.str();
}

FeatureTable load_features(Run& run, const std::string& p) {
  std::ifstream in = open_in(p);
  run.input(p);
  return read_feature_csv(in);
}

std::vector<std::string> load_lines(Run& run, const std::string& p) {
  std::ifstream in = open_in(p);
  run.input(p);
  std::vector<std::string> out;
  std::string line;
  while (std::getline(in, line)) {
    if (!line.empty() && line.back() == '\r') line.pop_back();
    if (!line.empty()) out.push_back(line);
  }
  return out;
}

// Labels aligned with the table rows.
std::vector<int> load_labels(Run& run, const std::string& p, const FeatureTable& t) {
  std::ifstream in = open_in(p);
  run.input(p);
  std::unordered_map<std::string, int> by_id;
  for (const auto& [id, c] : read_labels_csv(in)) by_id[id] = c;
  std::vector<int> out;
  out.reserve(t.accounts.size());
  for (const auto& a : t.accounts) {
    auto it = by_id.find(a.account_id);
    if (it == by_id.end()) throw ConfigError("no label for account " + a.account_id);
    out.push_back(it->second);
  }
  return out;
}

FeatureTable restrict(const FeatureTable& t, const std::vector<std::string>& names) {
  std::vector<std::uint32_t> cols;
  for (const auto& n : names) cols.push_back(t.column_of(n));
  return t.select_columns(cols);
}

std::string lines(const std::vector<std::string>& v) {
  std::string s;
  for (const auto& x : v) s += x + "\n";
  return s;
}

std::string json_text(const ojson& j) { return j.dump(2) + "\n"; }

// ---------------------------------------------------------------------------

struct IngestOpts {
  std::string corpus;
};

void run_ingest(const Globals& g, const Command& cmd, const IngestOpts& o) {
  Run run(g, cmd, "ingest");
  run.input(o.corpus);
  const Corpus c = load_corpus(o.corpus);
  run.write_with("corpus.jsonl", [&](std::ostream& out) { write_corpus(c, out); });
  ojson s;
  s["accounts"] = c.num_accounts();
  s["messages"] = c.messages.size();
  run.write("summary.json", json_text(s));
  run.finish();
}

struct ExtractOpts {
  std::string corpus;
};

void run_extract(const Globals& g, const Command& cmd, const ExtractOpts& o) {
  Run run(g, cmd, "extract");
  run.input(o.corpus);
  const ExtractResult r = extract_features(load_corpus(o.corpus));
  run.write_with("features.csv", [&](std::ostream& out) { write_feature_csv(r.table, out); });
  run.write("vocabulary.txt", lines(r.table.narratives));
  run.write("flood_texts.txt", lines(std::vector<std::string>(r.flood_texts.begin(), r.flood_texts.end())));
  ojson s;
  s["accounts"] = r.table.accounts.size();
  s["narratives"] = r.table.narratives.size();
  s["flood_texts"] = r.flood_texts.size();
  s["skipped_silent_accounts"] = r.skipped_silent_accounts;
  std::vector<double> rates(r.table.num_flags(), 0.0);
  for (const auto& a : r.table.accounts)
    for (std::size_t f = 0; f < rates.size(); ++f) rates[f] += a.flags[f];
  ojson fr;
  for (std::size_t f = 0; f < rates.size(); ++f)
    fr[r.table.flag_names[f]] = r.table.accounts.empty() ? 0.0 : rates[f] / static_cast<double>(r.table.accounts.size());
  s["flag_rates"] = fr;
  run.write("summary.json", json_text(s));
  run.finish();
}

struct SelectOpts {
  std::string features;
  std::size_t k = 40;
  std::string mode = "kl";
  SelectConfig cfg;
};

void run_select(const Globals& g, const Command& cmd, const SelectOpts& o) {
  if (o.mode != "kl" && o.mode != "frequency") throw ConfigError("selection mode must be kl or frequency");
  Run run(g, cmd, "select-narratives");
  const FeatureTable t = load_features(run, o.features);
  const auto stats = narrative_flag_stats(t);
  std::vector<std::uint32_t> top;
  ojson s;
  if (o.mode == "kl") {
    const SuspicionScores scores = score_narratives(stats, t.num_flags(), o.cfg, g.seed, g.jobs);
    top = select_top_k(scores.max, stats, t.narratives, o.k);
    run.write_with("scores.csv", [&](std::ostream& out) { write_scores_csv(scores, stats, t.narratives, t.flag_names, out); });
    s["degenerate"] = scores.degenerate;
    if (scores.degenerate > 0) log_line(std::to_string(scores.degenerate) + " degenerate narrative scores set to 0");
  } else {
    if (o.k < 1) throw ConfigError("K must be at least 1");
    top = select_most_frequent(stats, t.narratives, o.k);
  }
  std::vector<std::string> names;
  for (auto i : top) names.push_back(t.narratives[stats[i].narrative]);
  run.write("selected.txt", lines(names));
  s["mode"] = o.mode;
  s["candidates"] = stats.size();
  s["selected"] = names;
  run.write("summary.json", json_text(s));
  run.finish();
}

struct FitOpts {
  std::string features, selected, labels;
  long k = 4;
  std::string feature_mode = "both";
  std::vector<double> cluster_shares, cluster_scales;
  FitConfig cfg;
  std::size_t runs = 20;
  bool save_models = false;
};

struct Prepared {
  FeatureTable table;
  ModelData data;
  ModelPriors priors;
  FitConfig cfg;
};

Prepared prepare_fit(Run& run, const Globals& g, const FitOpts& o) {
  Prepared p;
  FeatureTable t = load_features(run, o.features);
  if (!o.selected.empty()) t = restrict(t, load_lines(run, o.selected));
  std::vector<int> labels;
  if (!o.labels.empty()) labels = load_labels(run, o.labels, t);
  if (o.cfg.supervised && labels.empty()) throw ConfigError("supervised fitting needs --labels");
  p.data = assemble_model_data(t, labels.empty() ? nullptr : &labels);
  p.priors = default_priors(p.data, o.k);
  if (!o.cluster_shares.empty()) {
    if (static_cast<long>(o.cluster_shares.size()) != o.k) throw ConfigError("cluster-shares needs k entries");
    double total = 0;
    for (double v : o.cluster_shares) {
      if (!(v > 0)) throw ConfigError("cluster shares must be positive");
      total += v;
    }
    for (long i = 0; i < o.k; ++i) p.priors.mu_clust(i) = std::log(o.cluster_shares[static_cast<std::size_t>(i)] / total);
  }
  if (!o.cluster_scales.empty()) {
    if (static_cast<long>(o.cluster_scales.size()) != o.k) throw ConfigError("cluster-scales needs k entries");
    for (long i = 0; i < o.k; ++i) p.priors.sigma_clust(i) = o.cluster_scales[static_cast<std::size_t>(i)];
  }
  p.priors.validate(p.data.num_flags(), p.data.num_narratives());
  p.cfg = o.cfg;
  p.cfg.seed = g.seed;
  p.cfg.mode = parse_feature_mode(o.feature_mode);
  if (p.cfg.batch > static_cast<std::size_t>(p.data.size())) {
    log_line("batch " + std::to_string(p.cfg.batch) + " exceeds N; using N = " + std::to_string(p.data.size()));
  }
  p.table = std::move(t);
  return p;
}

std::string model_config(const Command& cmd, const Globals& g, const Prepared& p) {
  ojson j = cmd.resolved(g);
  j["flag_names"] = p.table.flag_names;
  j["narratives"] = p.table.narratives;
  return j.dump();
}

void run_fit(const Globals& g, const Command& cmd, const FitOpts& o) {
  Run run(g, cmd, "fit");
  const Prepared p = prepare_fit(run, g, o);
  const FitResult r = fit(p.data, p.priors, p.cfg);
  const ScoreTable scores = responsibilities(r.state, p.data, p.cfg.mc_score, derive_seed(p.cfg.seed, 4), g.jobs);
  run.write("model.json", state_to_json(r.state, model_config(cmd, g, p)));
  run.write_with("trace.csv", [&](std::ostream& out) { write_trace_csv(r.trace, out); });
  run.write_with("scores.csv", [&](std::ostream& out) { write_scores_csv(scores, out); });
  run.finish();
}

void run_fit_ensemble(const Globals& g, const Command& cmd, const FitOpts& o) {
  Run run(g, cmd, "fit-ensemble");
  const Prepared p = prepare_fit(run, g, o);
  const EnsembleResult e = fit_ensemble(p.data, p.priors, p.cfg, o.runs, g.jobs);
  const std::string config = model_config(cmd, g, p);
  for (std::size_t r = 0; r < e.runs.size(); ++r) {
    char tag[32];
    std::snprintf(tag, sizeof(tag), "runs/run_%03zu", r);
    run.write_with(std::string(tag) + "_scores.csv", [&](std::ostream& out) { write_scores_csv(e.runs[r], out); });
    run.write_with(std::string(tag) + "_trace.csv", [&](std::ostream& out) { write_trace_csv(e.fits[r].trace, out); });
    if (o.save_models) run.write(std::string(tag) + "_model.json", state_to_json(e.fits[r].state, config));
  }
  run.write_with("scores.csv", [&](std::ostream& out) { write_scores_csv(e.mean, out); });
  run.finish();
}

struct ScoreOpts {
  std::string model, features, labels;
  std::size_t samples = 100;
};

void run_score(const Globals& g, const Command& cmd, const ScoreOpts& o) {
  Run run(g, cmd, "score");
  run.input(o.model);
  const std::string text = slurp(o.model);
  const VariationalState st = state_from_json(text);
  const nlohmann::json cfg = nlohmann::json::parse(text).at("config");
  FeatureTable t = load_features(run, o.features);
  if (cfg.contains("narratives")) t = restrict(t, cfg.at("narratives").get<std::vector<std::string>>());
  if (cfg.contains("flag_names") && cfg.at("flag_names").get<std::vector<std::string>>() != t.flag_names) {
    throw ConfigError("feature flags do not match the model");
  }
  std::vector<int> labels;
  if (!o.labels.empty()) labels = load_labels(run, o.labels, t);
  const ModelData d = assemble_model_data(t, labels.empty() ? nullptr : &labels);
  const ScoreTable s = responsibilities(st, d, o.samples, g.seed, g.jobs);
  run.write_with("scores.csv", [&](std::ostream& out) { write_scores_csv(s, out); });
  run.finish();
}

struct EvalOpts {
  std::string scores, labels;
};

void run_eval(const Globals& g, const Command& cmd, const EvalOpts& o) {
  Run run(g, cmd, "eval");
  std::ifstream in = open_in(o.scores);
  run.input(o.scores);
  const ScoreTable s = read_scores_csv(in);
  std::vector<int> labels = s.labels;
  if (!o.labels.empty()) {
    std::ifstream lin = open_in(o.labels);
    run.input(o.labels);
    std::unordered_map<std::string, int> by_id;
    for (const auto& [id, c] : read_labels_csv(lin)) by_id[id] = c;
    labels.clear();
    for (const auto& id : s.account_ids) {
      auto it = by_id.find(id);
      if (it == by_id.end()) throw ConfigError("no label for account " + id);
      labels.push_back(it->second);
    }
  }
  if (labels.empty()) throw ConfigError("evaluation needs labels (a label column or --labels)");
  std::vector<std::uint8_t> y;
  for (int l : labels) y.push_back(l != 0);
  const PRCurve curve = pr_curve(s.minority, y);
  const F1Result f1 = max_f1(s.minority, y);
  run.write_with("curve.csv", [&](std::ostream& out) { write_pr_csv(curve, out); });
  ojson j;
  j["ap"] = average_precision(curve);
  j["baseline"] = baseline_share(y);
  j["max_f1"] = f1.f1;
  j["threshold"] = f1.threshold;
  j["positives"] = curve.positives;
  j["total"] = curve.total;
  run.write("summary.json", json_text(j));
  std::cout << j.dump() << "\n";
  run.finish();
}

struct SimFullOpts {
  std::size_t n = 50000;
  std::size_t vocabulary = 2000;
  bool corpus = false;
};

void run_simulate_full(const Globals& g, const Command& cmd, const SimFullOpts& o) {
  Run run(g, cmd, "simulate-full");
  const GeneratorSpec spec = planted_preset(o.n, o.vocabulary, g.seed);
  const SyntheticData d = generate_full(spec);
  run.write_with("features.csv", [&](std::ostream& out) { write_feature_csv(d.table, out); });
  run.write_with("labels.csv", [&](std::ostream& out) { write_labels_csv(d.table, d.labels, out); });
  ojson planted = ojson::array();
  for (std::size_t i = 0; i < spec.planted_narratives.size(); ++i) {
    ojson c;
    c["cluster"] = i;
    std::vector<std::string> names, flags;
    for (auto col : spec.planted_narratives[i]) names.push_back(spec.narratives[col]);
    for (auto f : spec.elevated_flags[i]) flags.push_back(spec.flag_names[f]);
    c["narratives"] = names;
    c["elevated_flags"] = flags;
    planted.push_back(c);
  }
  ojson s;
  s["shares"] = spec.shares;
  s["planted"] = planted;
  run.write("planted.json", json_text(s));
  if (o.corpus) {
    run.write_with("corpus.jsonl", [&](std::ostream& out) { write_corpus(synthesize_corpus(d, g.seed), out); });
  }
  run.finish();
}

struct SimSimpleOpts {
  std::int64_t m = 25000;
  double rho = 0.003;
  RatePair flag{0.98, 0.21};
  RatePair narrative{0.93, 0.12};
};

void add_rates(Command& c, RatePair& flag, RatePair& narrative) {
  c.option("flag-cio", flag.cio, "Flag rate among CIO accounts");
  c.option("flag-noncio", flag.non_cio, "Flag rate among other accounts");
  c.option("narrative-cio", narrative.cio, "Narrative rate among CIO accounts");
  c.option("narrative-noncio", narrative.non_cio, "Narrative rate among other accounts");
}

void add_beta_priors(Command& c, SimplePriors& p) {
  c.option("a0", p.a0, "Beta prior (flag, non-CIO) a");
  c.option("b0", p.b0, "Beta prior (flag, non-CIO) b");
  c.option("a1", p.a1, "Beta prior (flag, CIO) a");
  c.option("b1", p.b1, "Beta prior (flag, CIO) b");
  c.option("c0", p.c0, "Beta prior (narrative, non-CIO) c");
  c.option("d0", p.d0, "Beta prior (narrative, non-CIO) d");
  c.option("c1", p.c1, "Beta prior (narrative, CIO) c");
  c.option("d1", p.d1, "Beta prior (narrative, CIO) d");
}

void run_simulate_simple(const Globals& g, const Command& cmd, const SimSimpleOpts& o) {
  Run run(g, cmd, "simulate-simple");
  const SimpleSample s = generate_simple(o.m, o.rho, o.flag, o.narrative, g.seed);
  run.write_with("data.csv", [&](std::ostream& out) { write_simple_csv(s, out); });
  run.finish();
}

struct ExactOpts {
  std::string data;
  std::string method = "auto";
  std::int64_t tmax = 0;
  SimplePriors priors;
};

void run_exact(const Globals& g, const Command& cmd, const ExactOpts& o) {
  Run run(g, cmd, "exact-posterior");
  std::ifstream in = open_in(o.data);
  run.input(o.data);
  const SimpleSample s = read_simple_csv(in);
  const TruncationSpec trunc = o.tmax > 0 ? TruncationSpec::below(o.tmax) : TruncationSpec::none();
  std::string method = o.method;
  if (method == "auto") method = s.data.size() <= 12 ? "enumerate" : (s.data.size() <= 400 || o.tmax > 0 ? "factorized" : "quadrature");
  std::vector<double> p;
  ojson j;
  if (method == "enumerate") {
    p = exact_posterior_enumerate(s.data, o.priors);
  } else if (method == "factorized") {
    const FactorizedResult r = factorized_posterior(s.data, o.priors, trunc);
    p = r.p;
    j["log10_error_bound"] = r.cells.log10_error_bound;
  } else if (method == "quadrature") {
    p = quadrature_posterior(s.data.cells, o.priors).per_account(s.data);
  } else {
    throw ConfigError("method must be auto, enumerate, factorized or quadrature");
  }
  std::string text = "index,f,n,p_cio\n";
  for (std::size_t i = 0; i < p.size(); ++i) {
    csv::append_int(text, i);
    text += ',';
    csv::append_int(text, static_cast<int>(s.data.f[i]));
    text += ',';
    csv::append_int(text, static_cast<int>(s.data.n[i]));
    text += ',';
    csv::append_double(text, p[i]);
    text += '\n';
  }
  run.write("posterior.csv", text);
  j["method"] = method;
  j["m"] = s.data.size();
  const char* names[4] = {"11", "10", "01", "00"};
  ojson cells, probs;
  for (int c = 0; c < 4; ++c) {
    cells[names[c]] = s.data.cells.m[static_cast<std::size_t>(c)];
    for (std::size_t i = 0; i < p.size(); ++i) {
      if (cell_index(s.data.f[i], s.data.n[i]) == c) {
        probs[names[c]] = p[i];
        break;
      }
    }
  }
  j["cells"] = cells;
  j["p_cio_by_cell"] = probs;
  run.write("summary.json", json_text(j));
  run.finish();
}

struct PowerShareOpts {
  ShareScenario sc;
};

void run_power_share(const Globals& g, const Command& cmd, PowerShareOpts o) {
  Run run(g, cmd, "power-share");
  o.sc.seed = g.seed;
  const auto rows = power_analysis_share(o.sc);
  run.write_with("power_share.csv", [&](std::ostream& out) { write_power_csv(rows, "share", out); });
  run.finish();
}

struct PowerSizeOpts {
  SizeScenario sc;
};

void run_power_size(const Globals& g, const Command& cmd, PowerSizeOpts o) {
  Run run(g, cmd, "power-size");
  o.sc.seed = g.seed;
  const auto rows = power_analysis_size(o.sc);
  run.write_with("power_size.csv", [&](std::ostream& out) { write_power_csv(rows, "m", out); });
  run.finish();
}

struct PowerAdoptionOpts {
  AdoptionScenario sc;
};

void run_power_adoption(const Globals& g, const Command& cmd, PowerAdoptionOpts o) {
  Run run(g, cmd, "power-adoption");
  o.sc.seed = g.seed;
  const auto rows = power_analysis_adoption(o.sc);
  run.write_with("power_adoption.csv", [&](std::ostream& out) { write_power_csv(rows, "adoption", out); });
  run.finish();
}

struct BoundOpts {
  std::int64_t m = 1000000;
  double rho = 0.001;
  std::int64_t tmax = 100;
};

void run_error_bound(const Globals& g, const Command& cmd, const BoundOpts& o) {
  if (o.tmax < 1) throw ConfigError("tmax must be at least 1");
  Run run(g, cmd, "error-bound");
  const double b = truncation_error_bound(o.m, o.rho, TruncationSpec::below(o.tmax));
  ojson j;
  j["m"] = o.m;
  j["rho"] = o.rho;
  j["tmax"] = o.tmax;
  j["log10_bound"] = b;
  run.write("bound.json", json_text(j));
  std::cout << csv::format_double(b) << "\n";
  run.finish();
}

void fail(const std::string& kind, const std::string& msg, int code) {
  ojson j;
  j["error"] = kind;
  j["message"] = msg;
  j["exit"] = code;
  std::cerr << j.dump() << "\n";
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"Coordinated-operation detection toolkit", "ciodetect"};
  app.require_subcommand(1);
  app.set_config("--config", "", "JSON run config; command-line flags take precedence");
  app.config_formatter(std::make_shared<JsonConfig>());
  app.set_version_flag("--version", std::string(kToolVersion));

  Globals g;
  app.add_option("--seed", g.seed, "Random seed")->capture_default_str();
  app.add_option("--jobs", g.jobs, "Worker threads")->capture_default_str();
  app.add_option("--workdir", g.workdir, "Output root; each command writes <workdir>/<command>/")->capture_default_str();

  std::map<std::string, Command> cmds;
  auto sub = [&](const std::string& name, const std::string& desc) -> Command& {
    Command& c = cmds[name];
    c.app = app.add_subcommand(name, desc);
    c.app->fallthrough();
    return c;
  };

  IngestOpts ingest;
  sub("ingest", "Validate a JSONL corpus").option("corpus", ingest.corpus, "Corpus file")->required();

  ExtractOpts extract;
  sub("extract", "Compute flags, vocabulary and narrative counts").option("corpus", extract.corpus, "Corpus file")->required();

  SelectOpts sel;
  {
    Command& c = sub("select-narratives", "Score narratives and keep the top K");
    c.option("features", sel.features, "Feature CSV")->required();
    c.option("k", sel.k, "Number of narratives to keep");
    c.option("mode", sel.mode, "kl or frequency");
    c.option("samples", sel.cfg.samples, "Posterior draws per flag model");
    c.option("steps", sel.cfg.steps, "Optimization steps per flag model");
    c.option("lr", sel.cfg.lr, "Learning rate");
    c.option("prior-mean", sel.cfg.prior_mean, "Prior mean of the global log-odds");
    c.option("prior-sd", sel.cfg.prior_sd, "Prior sd of the global log-odds");
    c.option("scale-prior", sel.cfg.scale_prior, "Half-normal scale of the spread");
  }

  FitOpts fit_o, ens_o;
  for (auto* pair : {&fit_o, &ens_o}) {
    FitOpts& o = *pair;
    Command& c = pair == &fit_o ? sub("fit", "Fit the mixture model once") : sub("fit-ensemble", "Fit R models and average scores");
    c.option("features", o.features, "Feature CSV")->required();
    c.option("selected", o.selected, "Selected narratives, one per line (default: all)");
    c.option("labels", o.labels, "Labels CSV (account_id,cluster)");
    c.option("k", o.k, "Number of clusters");
    c.option("feature-mode", o.feature_mode, "both, flags-only or narratives-only");
    c.option("cluster-shares", o.cluster_shares, "Prior cluster shares (k values)");
    c.option("cluster-scales", o.cluster_scales, "Prior cluster log-odds scales (k values)");
    c.option("steps", o.cfg.steps, "Optimization steps");
    c.option("batch", o.cfg.batch, "Minibatch size");
    c.option("lr", o.cfg.lr, "Adam learning rate");
    c.option("mc-train", o.cfg.mc_train, "Monte Carlo draws per step");
    c.option("mc-score", o.cfg.mc_score, "Draws for responsibilities");
    c.flag("supervised", o.cfg.supervised, "Treat labels as observed clusters");
    if (pair == &ens_o) {
      c.option("runs", o.runs, "Ensemble size R");
      c.flag("save-models", o.save_models, "Also write each run's model");
    }
  }

  ScoreOpts score;
  {
    Command& c = sub("score", "Score accounts with a fitted model");
    c.option("model", score.model, "Model JSON")->required();
    c.option("features", score.features, "Feature CSV")->required();
    c.option("labels", score.labels, "Labels CSV to attach");
    c.option("samples", score.samples, "Draws per account");
  }

  EvalOpts ev;
  {
    Command& c = sub("eval", "Precision-recall evaluation of minority scores");
    c.option("scores", ev.scores, "Scores CSV")->required();
    c.option("labels", ev.labels, "Labels CSV (overrides a label column)");
  }

  SimFullOpts simf;
  {
    Command& c = sub("simulate-full", "Generate the planted synthetic preset");
    c.option("n", simf.n, "Number of accounts");
    c.option("vocabulary", simf.vocabulary, "Number of narratives");
    c.flag("corpus", simf.corpus, "Also write a message-level corpus");
  }

  SimSimpleOpts sims;
  {
    Command& c = sub("simulate-simple", "Generate data for the two-cluster model");
    c.option("m", sims.m, "Number of accounts");
    c.option("rho", sims.rho, "CIO share");
    add_rates(c, sims.flag, sims.narrative);
  }

  ExactOpts ex;
  {
    Command& c = sub("exact-posterior", "Exact posterior of the two-cluster model");
    c.option("data", ex.data, "CSV with f,n[,label]")->required();
    c.option("method", ex.method, "auto, enumerate, factorized or quadrature");
    c.option("tmax", ex.tmax, "Keep CIO counts below tmax (0: keep all)");
    c.option("rho", ex.priors.rho, "Prior CIO probability");
    add_beta_priors(c, ex.priors);
  }

  PowerShareOpts ps;
  {
    Command& c = sub("power-share", "Posterior by CIO share");
    c.option("m", ps.sc.m, "Number of accounts");
    c.option("shares", ps.sc.shares, "CIO shares");
    c.option("replicates", ps.sc.replicates, "Replicates per share");
    add_rates(c, ps.sc.flag, ps.sc.narrative);
    add_beta_priors(c, ps.sc.priors);
  }

  PowerSizeOpts pz;
  {
    Command& c = sub("power-size", "Posterior by dataset size");
    c.option("sizes", pz.sc.sizes, "Dataset sizes");
    c.option("share", pz.sc.share, "CIO share");
    c.option("replicates", pz.sc.replicates, "Replicates per size");
    add_rates(c, pz.sc.flag, pz.sc.narrative);
    add_beta_priors(c, pz.sc.priors);
  }

  PowerAdoptionOpts pa;
  {
    Command& c = sub("power-adoption", "Posterior by CIO adoption of flag and narrative");
    c.option("m", pa.sc.m, "Number of accounts");
    c.option("share", pa.sc.share, "CIO share");
    c.option("adoption", pa.sc.adoption, "CIO adoption rates");
    c.option("flag-noncio", pa.sc.flag_noncio, "Flag rate among other accounts");
    c.option("narrative-noncio", pa.sc.narrative_noncio, "Narrative rate among other accounts");
    c.option("replicates", pa.sc.replicates, "Replicates per rate");
    add_beta_priors(c, pa.sc.priors);
  }

  BoundOpts bo;
  {
    Command& c = sub("error-bound", "Certified truncation error bound");
    c.option("m", bo.m, "Number of accounts");
    c.option("rho", bo.rho, "Prior CIO probability");
    c.option("tmax", bo.tmax, "Keep CIO counts below tmax");
  }

  try {
    app.parse(argc, argv);
  } catch (const CLI::CallForHelp& e) {
    return app.exit(e);
  } catch (const CLI::CallForAllHelp& e) {
    return app.exit(e);
  } catch (const CLI::CallForVersion& e) {
    return app.exit(e);
  } catch (const CLI::ParseError& e) {
    fail("UsageError", e.what(), 1);
    return 1;
  }

  try {
    const std::string name = app.get_subcommands().front()->get_name();
    const Command& c = cmds.at(name);
    if (g.jobs < 1) throw ConfigError("jobs must be at least 1");
    if (name == "ingest") run_ingest(g, c, ingest);
    else if (name == "extract") run_extract(g, c, extract);
    else if (name == "select-narratives") run_select(g, c, sel);
    else if (name == "fit") run_fit(g, c, fit_o);
    else if (name == "fit-ensemble") run_fit_ensemble(g, c, ens_o);
    else if (name == "score") run_score(g, c, score);
    else if (name == "eval") run_eval(g, c, ev);
    else if (name == "simulate-full") run_simulate_full(g, c, simf);
    else if (name == "simulate-simple") run_simulate_simple(g, c, sims);
    else if (name == "exact-posterior") run_exact(g, c, ex);
    else if (name == "power-share") run_power_share(g, c, ps);
    else if (name == "power-size") run_power_size(g, c, pz);
    else if (name == "power-adoption") run_power_adoption(g, c, pa);
    else if (name == "error-bound") run_error_bound(g, c, bo);
  } catch (const Error& e) {
    const int code = e.category() == ErrorCategory::kNumerical ? 2 : 1;
    fail(e.kind(), e.what(), code);
    return code;
  } catch (const nlohmann::json::exception& e) {
    fail("SchemaError", e.what(), 1);
    return 1;
  } catch (const fs::filesystem_error& e) {
    fail("IoError", e.what(), 1);
    return 1;
  } catch (const std::exception& e) {
    fail("InternalError", e.what(), 1);
    return 1;
  }
  return 0;
}
