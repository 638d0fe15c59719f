// Copyright 2026 The lmk Authors
// SPDX-License-Identifier: Apache-2.0

// lmk: train toy adapters, diagnose them, merge them and sweep preferences.
//
// Every command resolves its configuration (defaults < --config file < flags),
// writes its artifacts into a fresh run directory and records a manifest with
// the resolved configuration and the FNV-1a hash of every input and output.
//
// Exit codes: 0 success, 1 runtime failure, 2 usage or validation error.

#include <chrono>
#include <cstdio>
#include <ctime>
#include <filesystem>
#include <fstream>
#include <iostream>
#include <map>
#include <optional>
#include <sstream>
#include <string>
#include <vector>

#include <CLI11.hpp>
#include <json.hpp>

#include "lmk/container.hpp"
#include "lmk/diagnostics.hpp"
#include "lmk/harness.hpp"
#include "lmk/mergers.hpp"
#include "lmk/tara.hpp"

namespace fs = std::filesystem;
using nlohmann::json;
using namespace lmk;

namespace {

constexpr int kExitRuntime = 1;
constexpr int kExitUsage = 2;

class UsageError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

std::vector<std::uint8_t> bytes_of(const std::string& s) { return {s.begin(), s.end()}; }

void write_text(const fs::path& p, const std::string& s) { write_file_atomic(p, bytes_of(s)); }

json read_json(const fs::path& p) {
  const auto b = read_file(p);
  try {
    return json::parse(b.begin(), b.end());
  } catch (const json::parse_error& e) {
    throw UsageError(p.string() + ": " + e.what());
  }
}

std::string hash_file(const fs::path& p) { return fnv1a_hex(read_file(p)); }

// Keys the config file may hold for each command.
const std::map<std::string, std::vector<std::string>>& allowed_keys() {
  static const std::map<std::string, std::vector<std::string>> keys{
      {"train-toy", {"seed", "out", "suite", "finetune"}},
      {"diagnose", {"seed", "out", "from", "container", "suite_file", "stacks", "xi", "kappa"}},
      {"merge", {"seed", "out", "from", "container", "suite_file", "method", "merge", "optim", "alpha", "preference",
                 "shared_rank"}},
      {"sweep", {"seed", "out", "from", "container", "suite_file", "method", "merge", "optim", "alpha",
                 "shared_rank", "preferences", "points", "random", "fixed", "grid", "threads"}},
      {"eval", {"seed", "out", "from", "container", "suite_file", "merged", "hits"}},
  };
  return keys;
}

json load_config(const std::string& command, const std::string& path) {
  if (path.empty()) return json::object();
  json j = read_json(path);
  if (!j.is_object()) throw UsageError("config file must hold a JSON object");
  const auto& keys = allowed_keys().at(command);
  for (const auto& [k, v] : j.items())
    if (std::find(keys.begin(), keys.end(), k) == keys.end())
      throw UsageError("unknown config key '" + k + "' for " + command);
  return j;
}

// Resolved configuration: config file values, then explicitly given flags.
struct Resolver {
  json cfg;
  void set(const std::string& key, const json& value) { cfg[key] = value; }
  void set_in(const std::string& section, const std::string& key, const json& value) {
    if (!cfg.contains(section)) cfg[section] = json::object();
    cfg[section][key] = value;
  }
};

std::string timestamp() {
  const std::time_t t = std::time(nullptr);
  std::tm tm{};
  gmtime_r(&t, &tm);
  char buf[32];
  std::strftime(buf, sizeof buf, "%Y%m%dT%H%M%SZ", &tm);
  return buf;
}

fs::path make_run_dir(const json& cfg, const std::string& name) {
  const fs::path root = cfg.value("out", std::string("runs"));
  fs::path dir;
  if (!name.empty()) {
    dir = root / name;
    if (fs::exists(dir)) throw UsageError("run directory " + dir.string() + " already exists");
  } else {
    const std::string base = timestamp() + "-seed" + std::to_string(cfg.value("seed", std::uint64_t{0}));
    dir = root / base;
    for (int i = 1; fs::exists(dir); ++i) dir = root / (base + "-" + std::to_string(i));
  }
  fs::create_directories(dir);
  return dir;
}

struct Manifest {
  std::string command;
  json config;
  json inputs = json::object();
  json artifacts = json::object();

  void input(const fs::path& p) { inputs[p.string()] = hash_file(p); }
  void artifact(const fs::path& dir, const std::string& name) { artifacts[name] = hash_file(dir / name); }
  void write(const fs::path& dir) const {
    json j{{"tool", "lmk"},
           {"version", "0.1.0"},
           {"command", command},
           {"seed", config.value("seed", std::uint64_t{0})},
           {"config", config},
           {"inputs", inputs},
           {"artifacts", artifacts}};
    write_text(dir / "manifest.json", j.dump(2) + "\n");
  }
};

struct Inputs {
  fs::path container;
  fs::path suite;
};

Inputs resolve_inputs(const json& cfg) {
  Inputs in;
  if (cfg.contains("from")) {
    const fs::path from = cfg.at("from").get<std::string>();
    in.container = from / "adapters.lmk";
    in.suite = from / "suite.json";
  }
  if (cfg.contains("container")) in.container = cfg.at("container").get<std::string>();
  if (cfg.contains("suite_file")) in.suite = cfg.at("suite_file").get<std::string>();
  if (in.container.empty() || in.suite.empty())
    throw UsageError("need --from RUN_DIR or both --container and --suite");
  return in;
}

struct Loaded {
  AdapterCollection coll;
  TaskSuite suite;
};

Loaded load_inputs(const Inputs& in, Manifest& m) {
  Loaded l{load_collection(in.container), suite_from_sidecar(read_json(in.suite))};
  m.input(in.container);
  m.input(in.suite);
  return l;
}

OptimConfig optim_from_json(const json& j, std::uint64_t seed) {
  OptimConfig o;
  o.seed = seed;
  if (j.is_null()) return o;
  if (!j.is_object()) throw UsageError("optim must be an object");
  for (const auto& [k, v] : j.items()) {
    if (k == "lr") o.adam.lr = v.get<double>();
    else if (k == "beta1") o.adam.beta1 = v.get<double>();
    else if (k == "beta2") o.adam.beta2 = v.get<double>();
    else if (k == "eps") o.adam.eps = v.get<double>();
    else if (k == "weight_decay") o.adam.weight_decay = v.get<double>();
    else if (k == "batch_size") o.batch_size = v.get<std::size_t>();
    else if (k == "max_iters") o.max_iters = v.get<std::size_t>();
    else if (k == "divergence_factor") o.divergence_factor = v.get<double>();
    else throw UsageError("unknown optim key '" + k + "'");
  }
  return o;
}

json optim_to_json(const OptimConfig& o) {
  return {{"lr", o.adam.lr},         {"beta1", o.adam.beta1},   {"beta2", o.adam.beta2},
          {"eps", o.adam.eps},       {"weight_decay", o.adam.weight_decay}, {"batch_size", o.batch_size},
          {"max_iters", o.max_iters}, {"divergence_factor", o.divergence_factor}};
}

MethodSpec method_from_config(json& cfg, std::size_t n_tasks) {
  MethodSpec spec;
  spec.name = cfg.value("method", std::string("ta"));
  const auto& names = method_names();
  if (std::find(names.begin(), names.end(), spec.name) == names.end())
    throw UsageError("unknown method '" + spec.name + "'");
  const std::uint64_t seed = cfg.value("seed", std::uint64_t{0});
  if (spec.is_optimized()) {
    if (cfg.contains("merge") && !cfg["merge"].empty())
      throw UsageError("merge parameters do not apply to " + spec.name);
    spec.optim = optim_from_json(cfg.value("optim", json()), seed);
    spec.alpha = cfg.value("alpha", 1.0);
    if (cfg.contains("shared_rank")) spec.shared_rank = cfg.at("shared_rank").get<std::size_t>();
    cfg["optim"] = optim_to_json(spec.optim);
    cfg["alpha"] = spec.alpha;
  } else {
    if (cfg.contains("optim") || cfg.contains("alpha") || cfg.contains("shared_rank"))
      throw UsageError("optimizer settings do not apply to " + spec.name);
    json mj = cfg.value("merge", json::object());
    mj["method"] = spec.name;
    try {
      spec.merge = MergeConfig::from_json(mj);
    } catch (const std::invalid_argument& e) {
      throw UsageError(e.what());
    }
    cfg["merge"] = spec.merge.to_json();
  }
  if (cfg.contains("preference")) {
    spec.pref = Preference{cfg.at("preference").get<std::vector<double>>()};
    if (spec.pref->rho.size() != n_tasks)
      throw UsageError("preference needs " + std::to_string(n_tasks) + " entries");
  }
  try {
    spec.validate();
  } catch (const std::invalid_argument& e) {
    throw UsageError(e.what());
  }
  return spec;
}

std::vector<double> parse_doubles(const std::string& s) {
  std::vector<double> out;
  std::stringstream ss(s);
  std::string item;
  while (std::getline(ss, item, ',')) {
    try {
      std::size_t used = 0;
      out.push_back(std::stod(item, &used));
      if (used != item.size()) throw std::invalid_argument(item);
    } catch (const std::exception&) {
      throw UsageError("cannot parse number '" + item + "'");
    }
  }
  return out;
}

std::map<std::size_t, double> parse_fixed(const json& j) {
  std::map<std::size_t, double> out;
  if (j.is_object()) {
    for (const auto& [k, v] : j.items()) out[std::stoul(k)] = v.get<double>();
    return out;
  }
  std::stringstream ss(j.get<std::string>());
  std::string item;
  while (std::getline(ss, item, ',')) {
    const auto colon = item.find(':');
    if (colon == std::string::npos) throw UsageError("--fixed entries look like index:value");
    try {
      out[std::stoul(item.substr(0, colon))] = std::stod(item.substr(colon + 1));
    } catch (const std::exception&) {
      throw UsageError("cannot parse --fixed entry '" + item + "'");
    }
  }
  return out;
}

std::string trace_csv(const OptimResult& r) {
  std::ostringstream os;
  os << "step,psi";
  if (!r.trace.empty())
    for (std::size_t t = 0; t < r.trace.front().f.size(); ++t) os << ",f" << t;
  os << '\n';
  char buf[32];
  for (const auto& row : r.trace) {
    std::snprintf(buf, sizeof buf, "%.17g", row.psi);
    os << row.step << ',' << buf;
    for (double f : row.f) {
      std::snprintf(buf, sizeof buf, "%.17g", f);
      os << ',' << buf;
    }
    os << '\n';
  }
  return os.str();
}

void print_report(const EvalReport& r) {
  for (const auto& s : r.tasks)
    std::printf("  %-10s accuracy %6.2f%%  normalized %6.2f%%\n", s.task_id.c_str(), 100.0 * s.accuracy, s.normalized);
  std::printf("  %-10s accuracy %6.2f%%  normalized %6.2f%%\n", "average", 100.0 * r.avg_accuracy, r.avg_normalized);
  for (const auto& [k, v] : r.hits) std::printf("  hits@%zu %.4f\n", k, v);
}

// ---- commands ----

int cmd_train_toy(json cfg, const std::string& run_name) {
  SuiteParams sp;
  FinetuneConfig ft;
  try {
    sp = suite_params_from_json(cfg.value("suite", json::object()));
    ft = finetune_config_from_json(cfg.value("finetune", json::object()));
    const std::uint64_t seed = cfg.value("seed", std::uint64_t{0});
    sp.seed = seed;
    ft.seed = seed;
    sp.validate();
    ft.validate(sp);
  } catch (const std::exception& e) {
    throw UsageError(e.what());
  }
  cfg["suite"] = to_json(sp);
  cfg["finetune"] = to_json(ft);

  const ToyRun run = train_toy(sp, ft);
  const fs::path dir = make_run_dir(cfg, run_name);
  Manifest m{"train-toy", cfg};
  save_collection(run.coll, dir / "adapters.lmk");
  write_text(dir / "suite.json", suite_sidecar(run.suite).dump(2) + "\n");
  json refs = json::object();
  for (const auto& t : run.suite.tasks) refs[t.id] = t.reference_accuracy;
  write_text(dir / "references.json", refs.dump(2) + "\n");
  for (const char* a : {"adapters.lmk", "suite.json", "references.json"}) m.artifact(dir, a);
  m.write(dir);

  std::printf("fine-tuned accuracy (eval split)\n");
  for (const auto& t : run.suite.tasks) std::printf("  %-10s %6.2f%%\n", t.id.c_str(), 100.0 * t.reference_accuracy);
  std::printf("run directory: %s\n", dir.string().c_str());
  return 0;
}

int cmd_diagnose(json cfg, const std::string& run_name) {
  const Inputs in = resolve_inputs(cfg);
  bool stacks = cfg.value("stacks", false);
  const bool xi = cfg.value("xi", false);
  const bool kappa = cfg.value("kappa", false);
  if (!stacks && !xi && !kappa) stacks = true;
  cfg["stacks"] = stacks;
  cfg["xi"] = xi;
  cfg["kappa"] = kappa;
  Manifest m{"diagnose", cfg};
  const Loaded l = load_inputs(in, m);
  const fs::path dir = make_run_dir(cfg, run_name);
  m.config = cfg;
  json out = json::object();
  if (stacks) {
    const CoverageReport r = coverage_report(l.coll);
    out["coverage"] = to_json(r);
    write_text(dir / "coverage.csv", coverage_csv(r));
    m.artifact(dir, "coverage.csv");
    std::printf("coverage (erank)  per-task sum / aware / agnostic\n");
    for (const auto& lc : r.layers)
      std::printf("  %-8s %8.3f %8.3f %8.3f%s\n", lc.layer_id.c_str(), lc.per_task_sum, lc.aware.erank.value_or(0.0),
                  lc.agnostic.erank.value_or(0.0), lc.warnings.empty() ? "" : "  (warnings)");
  }
  if (xi) {
    const auto xs = xi_all(l.coll, l.suite);
    out["xi"] = to_json(xs);
    write_text(dir / "xi.csv", xi_csv(xs));
    m.artifact(dir, "xi.csv");
    std::printf("misalignment xi(uniform, one-hot)\n");
    for (const auto& x : xs) std::printf("  %-8s task %zu  %.6f\n", x.layer_id.c_str(), x.onehot_task, x.xi);
  }
  if (kappa) {
    const auto ks = kappa_profile(l.coll, l.suite);
    out["kappa"] = to_json(ks);
    write_text(dir / "kappa.csv", kappa_csv(ks));
    m.artifact(dir, "kappa.csv");
    std::printf("Jacobian condition number\n");
    for (const auto& k : ks)
      std::printf("  %-8s %-6s kappa %.4g (rank %zu)\n", k.layer_id.c_str(), k.set == DirectionSet::raw ? "raw" : "shared",
                  k.anis.kappa, k.anis.rank);
  }
  write_text(dir / "diagnostics.json", out.dump(2) + "\n");
  m.artifact(dir, "diagnostics.json");
  m.write(dir);
  std::printf("run directory: %s\n", dir.string().c_str());
  return 0;
}

AdapterCollection weights_container(const AdapterCollection& like, const std::vector<Matrix>& weights) {
  AdapterCollection out;
  for (std::size_t l = 0; l < weights.size(); ++l) out.layers.push_back({like.layers[l].layer_id, weights[l], {}});
  return out;
}

int cmd_merge(json cfg, const std::string& run_name) {
  const Inputs in = resolve_inputs(cfg);
  Manifest m{"merge", cfg};
  const Loaded l = load_inputs(in, m);
  const MethodSpec spec = method_from_config(cfg, l.coll.n_tasks());
  m.config = cfg;
  const fs::path dir = make_run_dir(cfg, run_name);

  const MethodOutcome o = run_method(l.coll, l.suite, spec);
  std::vector<std::size_t> subset;
  for (const auto& id : l.coll.task_ids)
    for (std::size_t t = 0; t < l.suite.n_tasks(); ++t)
      if (l.suite.tasks[t].id == id) subset.push_back(t);
  const EvalReport r = evaluate(o.weights, l.suite, subset);

  save_collection(weights_container(l.coll, o.weights), dir / "merged.lmk");
  json rj = to_json(r);
  rj["method"] = spec.name;
  write_text(dir / "report.json", rj.dump(2) + "\n");
  write_text(dir / "report.csv", to_csv(r));
  for (const char* a : {"merged.lmk", "report.json", "report.csv"}) m.artifact(dir, a);
  if (o.run) {
    write_text(dir / "trace.csv", trace_csv(o.run->result));
    json phi{{"basis", to_string(o.run->basis.kind)}, {"phi", o.run->result.phi}};
    if (o.run->basis.kind == BasisKind::variant_b) phi["R"] = o.run->basis.R;
    write_text(dir / "phi.json", phi.dump(2) + "\n");
    m.artifact(dir, "trace.csv");
    m.artifact(dir, "phi.json");
  }
  m.write(dir);
  std::printf("%s\n", spec.name.c_str());
  print_report(r);
  std::printf("run directory: %s\n", dir.string().c_str());
  return 0;
}

int cmd_sweep(json cfg, const std::string& run_name) {
  const Inputs in = resolve_inputs(cfg);
  Manifest m{"sweep", cfg};
  const Loaded l = load_inputs(in, m);
  const std::size_t n = l.coll.n_tasks();
  const bool grid = cfg.value("grid", false);
  const int modes = static_cast<int>(cfg.contains("preferences")) + static_cast<int>(cfg.contains("points")) +
                    static_cast<int>(cfg.contains("random")) + static_cast<int>(grid);
  if (modes != 1) throw UsageError("choose exactly one of --preferences, --points, --random, --grid");
  if (cfg.contains("fixed") && !cfg.contains("random")) throw UsageError("--fixed needs --random");
  const MethodSpec spec = method_from_config(cfg, n);
  std::vector<std::size_t> subset;
  for (const auto& id : l.coll.task_ids)
    for (std::size_t t = 0; t < l.suite.n_tasks(); ++t)
      if (l.suite.tasks[t].id == id) subset.push_back(t);

  if (grid) {
    GridSpec gs;
    switch (spec.merge.method) {
      case MergeMethod::ta: gs = GridSpec::task_arithmetic(); break;
      case MergeMethod::ties: gs = GridSpec::ties(); break;
      case MergeMethod::lora_lego: gs = GridSpec::lora_lego(); break;
      default: throw UsageError("--grid supports ta, ties and lora_lego");
    }
    if (spec.is_optimized()) throw UsageError("--grid applies to baseline mergers only");
    m.config = cfg;
    const fs::path dir = make_run_dir(cfg, run_name);
    const GridResult g = grid_search(l.coll, spec.merge, gs, [&](const std::vector<Matrix>& w) {
      return evaluate(w, l.suite, subset).avg_normalized;
    });
    std::ostringstream os;
    os << "config,avg_normalized\n";
    for (const auto& [c, s] : g.evaluated) {
      std::string cj = c.to_json().dump();
      std::string quoted;
      for (char ch : cj) quoted += ch == '"' ? std::string("\"\"") : std::string(1, ch);
      os << '"' << quoted << "\"," << s << '\n';
    }
    write_text(dir / "sweep.csv", os.str());
    write_text(dir / "best.json", json{{"best", g.best.to_json()}, {"avg_normalized", g.best_score}}.dump(2) + "\n");
    m.artifact(dir, "sweep.csv");
    m.artifact(dir, "best.json");
    m.write(dir);
    std::printf("best %s -> %.2f%%\nrun directory: %s\n", g.best.to_json().dump().c_str(), g.best_score,
                dir.string().c_str());
    return 0;
  }

  std::vector<Preference> prefs;
  const std::uint64_t seed = cfg.value("seed", std::uint64_t{0});
  if (cfg.contains("preferences")) {
    json pj = cfg.at("preferences");
    if (pj.is_string()) {
      m.input(pj.get<std::string>());
      pj = read_json(pj.get<std::string>());
    }
    for (const auto& row : pj) prefs.push_back(Preference{row.get<std::vector<double>>()});
  } else if (cfg.contains("points")) {
    if (n != 2) throw UsageError("--points builds a two-task sweep; the collection has " + std::to_string(n) + " tasks");
    prefs = two_task_grid(cfg.at("points").get<std::size_t>());
  } else {
    std::map<std::size_t, double> fixed;
    if (cfg.contains("fixed")) fixed = parse_fixed(cfg.at("fixed"));
    try {
      prefs = random_completions(n, fixed, cfg.at("random").get<std::size_t>(), seed);
    } catch (const std::invalid_argument& e) {
      throw UsageError(e.what());
    }
  }
  if (prefs.empty()) throw UsageError("preference list is empty");
  for (const auto& p : prefs) {
    try {
      p.validate();
    } catch (const std::invalid_argument& e) {
      throw UsageError(e.what());
    }
    if (p.rho.size() != n) throw UsageError("every preference needs " + std::to_string(n) + " entries");
  }
  m.config = cfg;
  const fs::path dir = make_run_dir(cfg, run_name);
  const auto pts = sweep_preferences(l.coll, l.suite, prefs, spec, cfg.value("threads", std::size_t{0}));
  write_text(dir / "sweep.csv", sweep_csv(pts));
  m.artifact(dir, "sweep.csv");
  json summary{{"method", spec.name}, {"points", pts.size()}};
  if (cfg.contains("fixed")) {
    const auto fixed = parse_fixed(cfg.at("fixed"));
    if (fixed.size() >= 2 && pts.size() >= 2) {
      const auto a = fixed.begin()->first;
      const auto b = std::next(fixed.begin())->first;
      summary["focal"] = {l.coll.task_ids[a], l.coll.task_ids[b]};
      summary["focal_covariance"] = focal_covariance(pts, l.coll.task_ids[a], l.coll.task_ids[b]);
    }
  }
  write_text(dir / "summary.json", summary.dump(2) + "\n");
  m.artifact(dir, "summary.json");
  m.write(dir);
  std::printf("%zu sweep points written\nrun directory: %s\n", pts.size(), dir.string().c_str());
  return 0;
}

int cmd_eval(json cfg, const std::string& run_name) {
  const Inputs in = resolve_inputs(cfg);
  Manifest m{"eval", cfg};
  const Loaded l = load_inputs(in, m);
  std::vector<Matrix> weights = l.coll.base_weights();
  if (cfg.contains("merged")) {
    const fs::path merged = cfg.at("merged").get<std::string>();
    weights = load_collection(merged).base_weights();
    m.input(merged);
    if (weights.size() != l.coll.n_layers()) throw UsageError("merged container has a different layer count");
  }
  std::vector<std::size_t> ks{1, 3, 5};
  if (cfg.contains("hits")) ks = cfg.at("hits").get<std::vector<std::size_t>>();
  cfg["hits"] = ks;
  m.config = cfg;
  EvalReport r = evaluate(weights, l.suite);
  try {
    r.hits = evaluate_joint(weights, l.suite, ks);
  } catch (const std::invalid_argument& e) {
    throw UsageError(e.what());
  }
  const fs::path dir = make_run_dir(cfg, run_name);
  write_text(dir / "report.json", to_json(r).dump(2) + "\n");
  write_text(dir / "report.csv", to_csv(r));
  m.artifact(dir, "report.json");
  m.artifact(dir, "report.csv");
  m.write(dir);
  print_report(r);
  std::printf("run directory: %s\n", dir.string().c_str());
  return 0;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"lmk: LoRA merging with coverage and anisotropy diagnostics"};
  app.require_subcommand(1);
  app.set_version_flag("--version", "lmk 0.1.0");

  std::string config_path;
  std::string run_name;
  std::uint64_t seed = 0;
  std::string out;
  std::string from;
  std::string container;
  std::string suite_file;

  auto common = [&](CLI::App* sub, bool inputs) {
    sub->add_option("--config", config_path, "JSON config; flags override its values");
    sub->add_option("--seed", seed, "Seed for every random stream");
    sub->add_option("--out", out, "Root directory for run directories (default runs)");
    sub->add_option("--run-name", run_name, "Use this run directory name instead of timestamp-seed");
    if (inputs) {
      sub->add_option("--from", from, "A train-toy run directory (adapters.lmk + suite.json)");
      sub->add_option("--container", container, "LMK1 adapter container");
      sub->add_option("--suite", suite_file, "Suite sidecar JSON");
    }
  };

  // train-toy
  auto* train = app.add_subcommand("train-toy", "Generate a synthetic suite and fine-tune one adapter per task");
  common(train, false);
  std::size_t n_tasks = 0, d = 0, m_in = 0, classes = 0, layers = 0, rank = 0, steps = 0, shared_labels = 0;
  double lr = 0.0;
  train->add_option("--n-tasks", n_tasks, "Number of tasks");
  train->add_option("--d", d, "Feature width");
  train->add_option("--m", m_in, "Input width");
  train->add_option("--classes", classes, "Classes per task");
  train->add_option("--layers", layers, "Adapted layers");
  train->add_option("--shared-labels", shared_labels, "Leading classes whose labels all tasks share");
  train->add_option("--rank", rank, "LoRA rank");
  train->add_option("--steps", steps, "Fine-tuning steps");
  train->add_option("--lr", lr, "Fine-tuning learning rate");

  // diagnose
  auto* diag = app.add_subcommand("diagnose", "Coverage, misalignment and anisotropy diagnostics");
  common(diag, true);
  bool stacks = false, xi = false, kappa = false;
  diag->add_flag("--stacks", stacks, "Effective-rank coverage stacks");
  diag->add_flag("--xi", xi, "Misalignment between uniform and one-hot preferences");
  diag->add_flag("--kappa", kappa, "Jacobian spectra for raw and shared-SVD directions");

  // merge and sweep share the method options
  std::string method, pref_str, reweight, fixed;
  double lambda = 0.0, trim = 0.0, drop = 0.0, alpha = 0.0, opt_lr = 0.0;
  std::size_t k_clusters = 0, target_rank = 0, iters = 0, batch = 0, shared_rank = 0;
  auto method_opts = [&](CLI::App* sub) {
    sub->add_option("--method", method, "ta, ties, dare_ties, linear, svd, knots_ties, knots_dare_ties, lora_lego, "
                                        "tara-a, tara-b or adamerging");
    sub->add_option("--lambda", lambda, "Merge scale");
    sub->add_option("--trim", trim, "TIES trim fraction");
    sub->add_option("--drop", drop, "DARE drop probability");
    sub->add_option("--k", k_clusters, "LoRA-LEGO cluster count");
    sub->add_option("--reweight", reweight, "LoRA-LEGO reweighting: parameter or output");
    sub->add_option("--target-rank", target_rank, "SVD-merge rank");
    sub->add_option("--alpha", alpha, "Tchebycheff smoothing");
    sub->add_option("--iters", iters, "Optimizer iterations");
    sub->add_option("--opt-lr", opt_lr, "Optimizer learning rate");
    sub->add_option("--batch", batch, "Samples per task per step");
    sub->add_option("--shared-rank", shared_rank, "Variant B rank R");
  };
  auto* merge_cmd = app.add_subcommand("merge", "Merge the adapters and evaluate the result");
  common(merge_cmd, true);
  method_opts(merge_cmd);
  merge_cmd->add_option("--pref", pref_str, "Preference vector, comma separated");

  auto* sweep_cmd = app.add_subcommand("sweep", "Preference or hyperparameter sweeps");
  common(sweep_cmd, true);
  method_opts(sweep_cmd);
  std::string pref_file;
  std::size_t points = 0, random_k = 0, threads = 0;
  bool grid = false;
  sweep_cmd->add_option("--preferences", pref_file, "JSON file holding a list of preference vectors");
  sweep_cmd->add_option("--points", points, "Evenly spaced two-task preferences");
  sweep_cmd->add_option("--random", random_k, "Number of random simplex completions");
  sweep_cmd->add_option("--fixed", fixed, "Fixed entries for --random, e.g. 0:0.125,1:0.125");
  sweep_cmd->add_flag("--grid", grid, "Grid search over the baseline's hyperparameters");
  sweep_cmd->add_option("--threads", threads, "Worker threads (default: hardware)");

  auto* eval_cmd = app.add_subcommand("eval", "Evaluate base or merged weights, including joint Hits@k");
  common(eval_cmd, true);
  std::string merged, hits;
  eval_cmd->add_option("--merged", merged, "Merged-weights container from lmk merge");
  eval_cmd->add_option("--hits", hits, "Comma-separated k values (default 1,3,5)");

  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& e) {
    const int code = app.exit(e);
    return code == 0 ? 0 : kExitUsage;
  }

  try {
    CLI::App* sub = app.get_subcommands().front();
    const std::string name = sub->get_name();
    Resolver r{load_config(name, config_path)};
    auto given = [&](const char* flag) { return sub->count(flag) > 0; };
    if (given("--seed")) r.set("seed", seed);
    if (given("--out")) r.set("out", out);
    if (name != "train-toy") {
      if (given("--from")) r.set("from", from);
      if (given("--container")) r.set("container", container);
      if (given("--suite")) r.set("suite_file", suite_file);
    }
    if (name == "train-toy") {
      if (given("--n-tasks")) r.set_in("suite", "n_tasks", n_tasks);
      if (given("--d")) r.set_in("suite", "d", d);
      if (given("--m")) r.set_in("suite", "m", m_in);
      if (given("--classes")) r.set_in("suite", "classes", classes);
      if (given("--layers")) r.set_in("suite", "n_layers", layers);
      if (given("--shared-labels")) r.set_in("suite", "shared_labels", shared_labels);
      if (given("--rank")) r.set_in("finetune", "rank", rank);
      if (given("--steps")) r.set_in("finetune", "steps", steps);
      if (given("--lr")) r.set_in("finetune", "lr", lr);
      return cmd_train_toy(r.cfg, run_name);
    }
    if (name == "diagnose") {
      if (stacks) r.set("stacks", true);
      if (xi) r.set("xi", true);
      if (kappa) r.set("kappa", true);
      return cmd_diagnose(r.cfg, run_name);
    }
    if (name == "eval") {
      if (given("--merged")) r.set("merged", merged);
      if (given("--hits")) {
        std::vector<std::size_t> ks;
        for (double v : parse_doubles(hits)) {
          if (v < 1 || v != static_cast<double>(static_cast<std::size_t>(v))) throw UsageError("--hits needs positive integers");
          ks.push_back(static_cast<std::size_t>(v));
        }
        r.set("hits", ks);
      }
      return cmd_eval(r.cfg, run_name);
    }
    // merge / sweep
    if (given("--method")) r.set("method", method);
    if (given("--lambda")) r.set_in("merge", "lambda", lambda);
    if (given("--trim")) r.set_in("merge", "trim_fraction", trim);
    if (given("--drop")) r.set_in("merge", "drop_prob", drop);
    if (given("--k")) r.set_in("merge", "k_clusters", k_clusters);
    if (given("--reweight")) r.set_in("merge", "lego_reweight", reweight);
    if (given("--target-rank")) r.set_in("merge", "target_rank", target_rank);
    if (given("--alpha")) r.set("alpha", alpha);
    if (given("--iters")) r.set_in("optim", "max_iters", iters);
    if (given("--opt-lr")) r.set_in("optim", "lr", opt_lr);
    if (given("--batch")) r.set_in("optim", "batch_size", batch);
    if (given("--shared-rank")) r.set("shared_rank", shared_rank);
    const std::string m_name = r.cfg.value("method", std::string("ta"));
    const bool seeded = m_name == "dare_ties" || m_name == "knots_dare_ties" || m_name == "lora_lego";
    if (seeded && !r.cfg.contains("merge")) r.cfg["merge"] = json::object();
    if (seeded && !r.cfg["merge"].contains("rng_seed")) r.cfg["merge"]["rng_seed"] = r.cfg.value("seed", std::uint64_t{0});
    if (name == "merge") {
      if (given("--pref")) r.set("preference", parse_doubles(pref_str));
      return cmd_merge(r.cfg, run_name);
    }
    if (given("--preferences")) r.set("preferences", pref_file);
    if (given("--points")) r.set("points", points);
    if (given("--random")) r.set("random", random_k);
    if (given("--fixed")) r.set("fixed", fixed);
    if (grid) r.set("grid", true);
    if (given("--threads")) r.set("threads", threads);
    return cmd_sweep(r.cfg, run_name);
  } catch (const UsageError& e) {
    std::fprintf(stderr, "lmk: %s\n", e.what());
    return kExitUsage;
  } catch (const json::exception& e) {
    std::fprintf(stderr, "lmk: bad configuration value: %s\n", e.what());
    return kExitUsage;
  } catch (const ContainerError& e) {
    std::fprintf(stderr, "lmk: %s\n", e.what());
    return kExitRuntime;
  } catch (const std::exception& e) {
    std::fprintf(stderr, "lmk: %s\n", e.what());
    return kExitRuntime;
  }
}
