// Command-line entry point: simulate, classify, fit, study, predict.
//
// Exit codes: 0 success (including statistical non-convergence),
// 2 usage or validation error, 3 I/O error, 4 internal error.

#include <CLI11.hpp>

#include <chrono>
#include <cstdlib>
#include <iostream>
#include <optional>
#include <sstream>
#include <string>
#include <vector>

#include "cthmm/estimation.hpp"
#include "cthmm/io.hpp"
#include "cthmm/lca.hpp"
#include "cthmm/simulate.hpp"
#include "cthmm/study.hpp"

namespace fs = std::filesystem;
using namespace cthmm;
using io::json;

namespace {

constexpr int kExitOk = 0;
constexpr int kExitUsage = 2;
constexpr int kExitIo = 3;
constexpr int kExitInternal = 4;

struct Common {
  std::string config;
  std::string out;
  std::size_t threads = 0;
  std::vector<std::string> argv;
};

fs::path out_dir(const Common& c) {
  if (!c.out.empty()) return c.out;
  if (const char* env = std::getenv("CTHMM_OUT_DIR")) {
    if (*env) return env;
  }
  return "out";
}

io::ProjectConfig load(const Common& c) {
  return c.config.empty() ? io::ProjectConfig{} : io::load_config(c.config);
}

std::string config_digest(const Common& c) { return c.config.empty() ? "" : io::sha256_file(c.config); }

double seconds_since(std::chrono::steady_clock::time_point t0) {
  return std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
}

std::string truth_to_yaml(const TruthConfig& t, const GenerateConfig& g) {
  YAML::Emitter out;
  out << YAML::BeginMap;
  out << YAML::Key << "states" << YAML::Value << YAML::BeginMap;
  out << YAML::Key << "transient" << YAML::Value << YAML::Flow << YAML::BeginSeq;
  for (int s = 0; s < t.states.n_transient(); ++s) out << t.states.label(s);
  out << YAML::EndSeq << YAML::Key << "absorbing" << YAML::Value << YAML::Flow << YAML::BeginSeq;
  for (int s = t.states.n_transient(); s < t.states.size(); ++s) out << t.states.label(s);
  out << YAML::EndSeq << YAML::EndMap;
  out << YAML::Key << "covariates" << YAML::Value << YAML::BeginSeq;
  for (const auto& c : t.covariates) {
    out << YAML::Flow << YAML::BeginMap << YAML::Key << "name" << YAML::Value << c.name << YAML::Key << "dist"
        << YAML::Value << to_string(c.kind);
    if (c.kind == CovariateSpec::Kind::bernoulli) out << YAML::Key << "p" << YAML::Value << io::format_double(c.a);
    if (c.kind == CovariateSpec::Kind::normal) {
      out << YAML::Key << "mean" << YAML::Value << io::format_double(c.a) << YAML::Key << "sd" << YAML::Value
          << io::format_double(c.b);
    }
    if (c.kind == CovariateSpec::Kind::uniform) {
      out << YAML::Key << "lower" << YAML::Value << io::format_double(c.a) << YAML::Key << "upper" << YAML::Value
          << io::format_double(c.b);
    }
    out << YAML::EndMap;
  }
  out << YAML::EndSeq;
  out << YAML::Key << "truth" << YAML::Value << YAML::BeginMap << YAML::Key << "transitions" << YAML::Value
      << YAML::BeginSeq;
  for (std::size_t k = 0; k < t.transitions.size(); ++k) {
    const auto& p = t.params.per_transition[k];
    out << YAML::BeginMap;
    out << YAML::Key << "from" << YAML::Value << t.states.label(t.transitions[k].from);
    out << YAML::Key << "to" << YAML::Value << t.states.label(t.transitions[k].to);
    out << YAML::Key << "log_rate" << YAML::Value << io::format_double(p.log_rate);
    out << YAML::Key << "shape" << YAML::Value << io::format_double(p.shape);
    out << YAML::Key << "beta" << YAML::Value << YAML::Flow << YAML::BeginMap;
    for (std::size_t c = 0; c < t.covariates.size(); ++c) {
      out << YAML::Key << t.covariates[c].name << YAML::Value << io::format_double(p.betas[c]);
    }
    out << YAML::EndMap << YAML::EndMap;
  }
  out << YAML::EndSeq << YAML::EndMap;
  out << YAML::Key << "cohort" << YAML::Value << YAML::BeginMap;
  out << YAML::Key << "n_subjects" << YAML::Value << g.n_subjects;
  out << YAML::Key << "entry_age" << YAML::Value << YAML::Flow << YAML::BeginSeq << io::format_double(t.entry_age_min)
      << io::format_double(t.entry_age_max) << YAML::EndSeq;
  out << YAML::Key << "whole_year_entry" << YAML::Value << t.whole_year_entry;
  out << YAML::Key << "initial_probs" << YAML::Value << YAML::Flow << YAML::BeginSeq;
  for (double p : t.initial_probs) out << io::format_double(p);
  out << YAML::EndSeq;
  out << YAML::Key << "max_age" << YAML::Value << io::format_double(t.max_age);
  out << YAML::Key << "followup_horizon" << YAML::Value << io::format_double(t.followup_horizon);
  out << YAML::Key << "seed" << YAML::Value << g.seed;
  out << YAML::EndMap;
  out << YAML::Key << "scheme" << YAML::Value << YAML::BeginMap << YAML::Key << "kind" << YAML::Value
      << to_string(g.scheme.kind) << YAML::EndMap;
  out << YAML::EndMap;
  return std::string(out.c_str()) + "\n";
}

// ---------------------------------------------------------------- simulate

struct SimulateArgs {
  std::optional<std::uint64_t> seed;
  std::optional<std::size_t> n;
  std::string scheme;
};

int cmd_simulate(const Common& c, const SimulateArgs& a) {
  const auto t0 = std::chrono::steady_clock::now();
  if (c.config.empty()) throw ConfigError("simulate needs --config");
  auto pc = load(c);
  if (!pc.has_truth) throw ConfigError(c.config + ": <root>: missing key 'truth'");
  auto& g = pc.generate;
  if (a.seed) g.seed = *a.seed;
  if (a.n) g.n_subjects = *a.n;
  if (!a.scheme.empty()) g.scheme.kind = parse_scheme_kind(a.scheme);
  const auto data = generate_dataset(g, resolve_threads(c.threads));

  const auto dir = out_dir(c);
  const auto panel = dir / "panel.csv";
  const auto exact = dir / "exact.csv";
  const auto truth = dir / "truth.yaml";
  io::write_panel_csv(panel, data.panel);
  io::write_exact_csv(exact, data.exact);
  io::write_file(truth, truth_to_yaml(data.truth, g));

  io::Manifest m;
  m.command = "simulate";
  m.arguments = c.argv;
  m.config_sha256 = config_digest(c);
  m.seed = g.seed;
  m.wall_clock_seconds = seconds_since(t0);
  m.outputs = {panel, exact, truth};
  m.settings = {{"n_subjects", g.n_subjects},
                {"n_kept", data.panel.size()},
                {"n_dropped", data.n_dropped},
                {"scheme", to_string(g.scheme.kind)}};
  io::write_manifest(m, dir);
  std::cout << "simulated " << data.panel.size() << " subjects (" << data.n_dropped << " dropped) -> " << dir.string()
            << "\n";
  return kExitOk;
}

// ---------------------------------------------------------------- classify

struct ClassifyArgs {
  std::string panel;
  int classes = 0;
  std::optional<std::uint64_t> seed;
};

int cmd_classify(const Common& c, const ClassifyArgs& a) {
  const auto t0 = std::chrono::steady_clock::now();
  const auto pc = load(c);
  const auto& states = pc.generate.truth.states;
  const auto data = io::read_panel_csv(a.panel, states);
  if (data.n_diseases() == 0) throw ConfigError(a.panel + ": no disease columns (d1..dR)");

  LcaOptions opt = pc.pipeline.lca;
  opt.n_classes = a.classes > 0 ? a.classes : states.n_transient();
  if (a.seed) opt.seed = *a.seed;
  opt.threads = resolve_threads(c.threads);

  std::vector<BinaryRow> rows;
  for (const auto& s : data.subjects()) {
    for (const auto& v : s.visits) {
      if (v.is_exact_death || states.is_absorbing(v.observed_state)) continue;
      if (v.diseases.empty()) throw ConfigError(a.panel + ": subject " + s.id + " has a visit without disease indicators");
      rows.push_back(v.diseases);
    }
  }
  std::vector<std::string> warnings;
  const auto lca = fit_lca(rows, opt, &warnings);
  for (const auto& w : warnings) std::cerr << "warning: " << w << "\n";

  std::ostringstream post;
  post << "subject_id,age";
  for (int k = 0; k < opt.n_classes; ++k) post << ",p_" << (k + 1);
  post << ",assigned\n";
  std::vector<Vector> posteriors;
  std::vector<int> assignments;
  std::vector<Subject> subjects = data.subjects();
  for (auto& s : subjects) {
    for (auto& v : s.visits) {
      if (v.is_exact_death || states.is_absorbing(v.observed_state)) continue;
      const auto pa = posterior(lca, v.diseases);
      posteriors.push_back(pa.posterior);
      assignments.push_back(pa.modal_class);
      post << s.id << ',' << io::format_age(v.age);
      for (int k = 0; k < opt.n_classes; ++k) post << ',' << io::format_double(pa.posterior[k]);
      post << ',' << (pa.modal_class + 1) << '\n';
      v.observed_state = pa.modal_class;
    }
  }
  const auto emission = estimate_emission(posteriors, assignments);

  const auto dir = out_dir(c);
  io::Manifest m;
  m.outputs.push_back(dir / "posteriors.csv");
  io::write_file(m.outputs.back(), post.str());
  m.outputs.push_back(dir / "lca.yaml");
  io::write_file(m.outputs.back(), io::lca_to_yaml(lca));
  if (opt.n_classes == states.n_transient()) {
    const StateSpace& labels = states;
    m.outputs.push_back(dir / "emission.yaml");
    io::write_file(m.outputs.back(), io::emission_to_yaml(emission, labels));
    m.outputs.push_back(dir / "panel_assigned.csv");
    io::write_panel_csv(m.outputs.back(), PanelDataset(states, data.covariate_names(), std::move(subjects)));
  } else {
    StateSpace generic(opt.n_classes, 1);
    m.outputs.push_back(dir / "emission.yaml");
    io::write_file(m.outputs.back(), io::emission_to_yaml(emission, generic));
    std::cerr << "note: " << opt.n_classes << " classes differ from the " << states.n_transient()
              << " transient states; panel_assigned.csv not written\n";
  }
  m.command = "classify";
  m.arguments = c.argv;
  m.config_sha256 = config_digest(c);
  m.seed = opt.seed;
  m.wall_clock_seconds = seconds_since(t0);
  m.settings = {{"n_classes", opt.n_classes}, {"n_rows", rows.size()}, {"lca_loglik", lca.loglik}};
  io::write_manifest(m, dir);
  std::cout << "classified " << rows.size() << " visits into " << opt.n_classes << " classes -> " << dir.string()
            << "\n";
  return kExitOk;
}

// ---------------------------------------------------------------- fit

struct FitArgs {
  std::string panel;
  std::string exact;
  std::string model;
  std::string emission;
  std::string posteriors;
};

// Baseline-visit posteriors per subject from a posteriors.csv file.
InitialDistribution read_baseline_posteriors(const std::string& path, const PanelDataset& data, int nt) {
  const auto t = io::read_csv(path);
  std::map<std::string, Vector> first;
  for (std::size_t i = 0; i < t.rows.size(); ++i) {
    const auto& row = t.rows[i];
    if (first.count(row[0])) continue;
    if (static_cast<int>(row.size()) != nt + 3) throw ConfigError(path + ": expected " + std::to_string(nt) + " posterior columns");
    Vector v(nt);
    for (int k = 0; k < nt; ++k) v[k] = io::parse_double(row[2 + static_cast<std::size_t>(k)], path + ":" + std::to_string(t.line_numbers[i]));
    first[row[0]] = v / v.sum();
  }
  std::vector<Vector> per;
  for (const auto& s : data.subjects()) {
    auto it = first.find(s.id);
    if (it == first.end()) throw ConfigError(path + ": no posterior for subject " + s.id);
    per.push_back(it->second);
  }
  return InitialDistribution(std::move(per));
}

int cmd_fit(const Common& c, const FitArgs& a) {
  const auto t0 = std::chrono::steady_clock::now();
  const ModelVariant variant = parse_model(a.model);
  const auto pc = load(c);
  const auto& truth = pc.generate.truth;
  FitOptions opts;
  opts.solver = pc.pipeline.solver_for(variant);
  opts.optimizer = pc.pipeline.optimizer;
  opts.ci_level = pc.pipeline.ci_level;
  opts.threads = resolve_threads(c.threads);

  FitResult result;
  json extra = json::object();
  if (variant == ModelVariant::ref) {
    if (a.exact.empty()) throw ConfigError("--model ref needs --exact (exact-path CSV)");
    const auto data = io::read_exact_csv(a.exact, truth.states, truth.transitions);
    const ModelSpec spec(truth.states, truth.transitions, data.covariate_names());
    result = fit_exact_reference(spec, data, opts);
  } else {
    if (a.panel.empty()) throw ConfigError("--model " + a.model + " needs --panel");
    const auto raw = io::read_panel_csv(a.panel, truth.states);
    const ModelSpec spec(truth.states, truth.transitions, raw.covariate_names());
    if (is_hidden(variant)) {
      if (a.emission.empty()) throw ConfigError("--model " + a.model + " needs --emission (from classify)");
      const auto ef = io::read_emission_yaml(a.emission);
      if (ef.emission.size() != truth.states.n_transient()) throw ConfigError(a.emission + ": emission size does not match the state space");
      opts.mode = FitMode::hidden;
      opts.emission = ef.emission;
      if (!a.posteriors.empty()) {
        opts.initial = read_baseline_posteriors(a.posteriors, raw, truth.states.n_transient());
        extra["initial_distribution"] = "baseline_posterior";
      } else if (ef.initial) {
        opts.initial = InitialDistribution(*ef.initial);
        extra["initial_distribution"] = "emission_file";
      } else {
        Vector freq = Vector::Zero(truth.states.n_transient());
        for (const auto& s : raw.subjects()) freq[s.visits.front().observed_state] += 1.0;
        opts.initial = InitialDistribution(Vector(freq / freq.sum()));
        extra["initial_distribution"] = "assignment_frequencies";
      }
      result = fit(spec, raw, opts);
    } else {
      std::size_t changed = 0;
      const auto data = carry_forward_impossible(raw, truth.transitions, &changed);
      extra["carried_forward"] = changed;
      if (changed > 0) std::cerr << "note: " << changed << " impossible observed moves carried forward\n";
      opts.mode = FitMode::observed;
      result = fit(spec, data, opts);
    }
  }
  auto report = io::fit_report(result, display_name(variant));
  for (auto& [k, v] : extra.items()) report["data"][k] = v;

  const auto dir = out_dir(c);
  const auto path = dir / (std::string("fit_") + cli_name(variant) + ".json");
  io::write_file(path, report.dump(2) + "\n");
  io::Manifest m;
  m.command = "fit";
  m.arguments = c.argv;
  m.config_sha256 = config_digest(c);
  m.wall_clock_seconds = seconds_since(t0);
  m.outputs = {path};
  m.settings = io::config_settings(pc);
  io::write_manifest(m, dir);
  std::cout << display_name(variant) << ": loglik " << result.loglik << ", converged "
            << (result.converged ? "yes" : "no") << " -> " << path.string() << "\n";
  if (!result.converged) std::cerr << "warning: optimizer did not converge: " << result.message << "\n";
  return kExitOk;
}

// ---------------------------------------------------------------- study

struct StudyArgs {
  std::optional<int> replicates;
};

int cmd_study(const Common& c, const StudyArgs& a) {
  const auto t0 = std::chrono::steady_clock::now();
  if (c.config.empty()) throw ConfigError("study needs --config (scenario manifest)");
  auto pc = load(c);
  if (!pc.has_study) throw ConfigError(c.config + ": <root>: missing key 'study'");
  if (a.replicates) {
    pc.scenario.n_replicates = *a.replicates;
    pc.scenario.validate();
  }
  PipelineConfig pl = pc.pipeline;
  pl.threads = resolve_threads(c.threads);
  const auto res = run_scenario(pc.scenario, pc.generate, pl);

  const auto dir = out_dir(c);
  auto outputs = emit_tables(res, dir);
  std::ostringstream reps;
  reps << "replicate,seed,model,converged,has_se,loglik,n_evals,carried_forward,error\n";
  for (const auto& r : res.replicates) {
    for (auto mv : res.scenario.models) {
      reps << r.index + 1 << ',' << r.seed << ',' << display_name(mv) << ',';
      auto it = r.fits.find(mv);
      if (it != r.fits.end()) {
        reps << (it->second.converged ? 1 : 0) << ',' << (it->second.has_se ? 1 : 0) << ','
             << io::format_double(it->second.loglik) << ',' << it->second.n_evals << ',' << r.n_carried_forward << ",\n";
      } else {
        std::string msg = r.failures.count(mv) ? r.failures.at(mv) : "not run";
        for (auto& ch : msg) {
          if (ch == ',' || ch == '\n') ch = ';';
        }
        reps << "0,0,NA,0," << r.n_carried_forward << ',' << msg << '\n';
      }
    }
  }
  outputs.push_back(dir / "replicates.csv");
  io::write_file(outputs.back(), reps.str());

  io::Manifest m;
  m.command = "study";
  m.arguments = c.argv;
  m.config_sha256 = config_digest(c);
  m.seed = pc.scenario.base_seed;
  m.wall_clock_seconds = seconds_since(t0);
  m.outputs = outputs;
  m.settings = io::config_settings(pc);
  m.settings["scenario"] = {{"name", pc.scenario.name},
                            {"n_subjects", pc.scenario.n_subjects},
                            {"scheme", to_string(pc.scenario.scheme)},
                            {"n_replicates", pc.scenario.n_replicates}};
  io::write_manifest(m, dir);
  std::cout << "study " << pc.scenario.name << ": " << pc.scenario.n_replicates << " replicates -> " << dir.string()
            << "\n";
  return kExitOk;
}

// ---------------------------------------------------------------- predict

struct PredictArgs {
  std::string report;
  double from_age = 60.0;
  std::string start_state;
  std::string profile;
  std::string grid;
};

std::vector<double> parse_grid(const std::string& g, double from) {
  std::vector<double> out;
  if (g.find(':') != std::string::npos) {
    std::vector<std::string> parts;
    std::stringstream ss(g);
    std::string p;
    while (std::getline(ss, p, ':')) parts.push_back(p);
    if (parts.size() != 3) throw ConfigError("--grid expects start:end:step");
    const double a = io::parse_double(parts[0], "--grid");
    const double b = io::parse_double(parts[1], "--grid");
    const double h = io::parse_double(parts[2], "--grid");
    if (!(h > 0.0) || !(b >= a)) throw ConfigError("--grid needs end >= start and step > 0");
    const auto n = static_cast<long>(std::floor((b - a) / h + 1e-9));
    for (long i = 0; i <= n; ++i) out.push_back(a + static_cast<double>(i) * h);
  } else {
    std::stringstream ss(g);
    std::string p;
    while (std::getline(ss, p, ',')) out.push_back(io::parse_double(p, "--grid"));
  }
  if (out.empty() || out.front() != from) throw ConfigError("--grid must start at --from-age");
  return out;
}

int cmd_predict(const Common& c, const PredictArgs& a) {
  const auto t0 = std::chrono::steady_clock::now();
  const auto fit = io::read_fit_report(a.report);
  const auto& spec = fit.spec;
  int start = -1;
  for (int s = 0; s < spec.states().n_transient(); ++s) {
    if (spec.states().label(s) == a.start_state || std::to_string(s + 1) == a.start_state) start = s;
  }
  if (start < 0) throw ConfigError("--start-state '" + a.start_state + "' is not a transient state of the model");

  CovariateVector x(spec.n_covariates(), 0.0);
  if (!a.profile.empty()) {
    std::stringstream ss(a.profile);
    std::string kv;
    while (std::getline(ss, kv, ',')) {
      const auto eq = kv.find('=');
      if (eq == std::string::npos) throw ConfigError("--profile expects name=value pairs");
      const auto name = kv.substr(0, eq);
      std::size_t k = 0;
      while (k < spec.n_covariates() && spec.covariate_names()[k] != name) ++k;
      if (k == spec.n_covariates()) throw ConfigError("--profile: covariate '" + name + "' is not in the model");
      x[k] = io::parse_double(kv.substr(eq + 1), "--profile " + name);
    }
  }
  const std::string grid_text = a.grid.empty() ? io::format_double(a.from_age) + ":" + io::format_double(a.from_age + 40) + ":1" : a.grid;
  const auto grid = parse_grid(grid_text, a.from_age);
  const auto occ = predict_occupancy(fit, x, a.from_age, start, grid);

  std::ostringstream curve;
  curve << "age";
  const auto& st = spec.states();
  for (int s = 0; s < st.size(); ++s) {
    if (st.is_transient(s)) curve << ",p_state_" << (s + 1);
    else curve << (st.n_absorbing() == 1 ? std::string(",p_death") : ",p_death_" + std::to_string(s - st.n_transient() + 1));
  }
  curve << '\n';
  for (std::size_t i = 0; i < grid.size(); ++i) {
    curve << io::format_double(grid[i]);
    for (int s = 0; s < st.size(); ++s) curve << ',' << io::format_double(occ[i][s]);
    curve << '\n';
  }

  std::ostringstream hr;
  hr << "transition,covariate,hr,ci_lower,ci_upper\n";
  for (std::size_t k = 0; k < spec.n_transitions(); ++k) {
    try {
      for (const auto& h : hazard_ratios(fit, k)) {
        hr << spec.transitions().name(k) << ',' << h.covariate << ',' << io::format_double(h.hr) << ','
           << io::format_double(h.ci_lower) << ',' << io::format_double(h.ci_upper) << '\n';
      }
    } catch (const EstimationError& e) {
      std::cerr << "warning: " << e.what() << "\n";
      for (std::size_t cv = 0; cv < spec.n_covariates(); ++cv) {
        const double b = fit.estimates.per_transition[k].betas[cv];
        hr << spec.transitions().name(k) << ',' << spec.covariate_names()[cv] << ',' << io::format_double(std::exp(b))
           << ",NA,NA\n";
      }
    }
  }
  const auto dir = out_dir(c);
  io::Manifest m;
  m.outputs = {dir / "occupancy.csv", dir / "hazard_ratios.csv"};
  io::write_file(m.outputs[0], curve.str());
  io::write_file(m.outputs[1], hr.str());
  m.command = "predict";
  m.arguments = c.argv;
  m.config_sha256 = io::sha256_file(a.report);
  m.wall_clock_seconds = seconds_since(t0);
  io::write_manifest(m, dir);
  std::cout << "predicted " << grid.size() << " ages -> " << dir.string() << "\n";
  return kExitOk;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"Continuous-time (hidden) multistate models for panel data"};
  app.require_subcommand(1);
  Common common;
  for (int i = 0; i < argc; ++i) common.argv.emplace_back(argv[i]);

  auto add_common = [&](CLI::App* sub, bool with_config = true) {
    if (with_config) sub->add_option("--config", common.config, "YAML configuration file");
    sub->add_option("--out", common.out, "Output directory (default: $CTHMM_OUT_DIR or ./out)");
    sub->add_option("--threads", common.threads, "Worker threads (default: $CTHMM_THREADS or all cores)");
  };

  SimulateArgs sim;
  auto* s_sim = app.add_subcommand("simulate", "Generate a synthetic cohort (panel and exact-path files)");
  add_common(s_sim);
  s_sim->add_option("--seed", sim.seed, "Random seed (overrides cohort.seed)");
  s_sim->add_option("--n", sim.n, "Number of subjects (overrides cohort.n_subjects)");
  s_sim->add_option("--scheme", sim.scheme, "Observation scheme: population or irregular");

  ClassifyArgs cls;
  auto* s_cls = app.add_subcommand("classify", "Latent class analysis of disease indicators, emission matrix");
  add_common(s_cls);
  s_cls->add_option("--panel", cls.panel, "Panel CSV with disease columns")->required();
  s_cls->add_option("--classes", cls.classes, "Number of latent classes (default: transient states)");
  s_cls->add_option("--seed", cls.seed, "LCA seed");

  FitArgs fa;
  auto* s_fit = app.add_subcommand("fit", "Fit one model variant");
  add_common(s_fit);
  s_fit->add_option("--panel", fa.panel, "Panel CSV (observed states)");
  s_fit->add_option("--exact", fa.exact, "Exact-path CSV (ref model)");
  s_fit->add_option("--model", fa.model, "approx-timm, approx-tihmm, timm, tihmm or ref")->required();
  s_fit->add_option("--emission", fa.emission, "Emission YAML from classify (hidden models)");
  s_fit->add_option("--posteriors", fa.posteriors, "posteriors.csv from classify: baseline posteriors as initial distribution");

  StudyArgs sa;
  auto* s_study = app.add_subcommand("study", "Run a replicated simulation study from a scenario manifest");
  add_common(s_study);
  s_study->add_option("--replicates", sa.replicates, "Override study.n_replicates");

  PredictArgs pa;
  auto* s_pred = app.add_subcommand("predict", "Occupancy curves and hazard ratios from a fit report");
  add_common(s_pred, false);
  s_pred->add_option("--report", pa.report, "Fit report JSON")->required();
  s_pred->add_option("--from-age", pa.from_age, "Start age")->required();
  s_pred->add_option("--start-state", pa.start_state, "Start state (label or 1-based index)")->required();
  s_pred->add_option("--profile", pa.profile, "Covariate values, e.g. x1=1,x2=0 (others 0)");
  s_pred->add_option("--grid", pa.grid, "start:end:step or comma list, starting at --from-age");

  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& e) {
    const int rc = app.exit(e);
    return rc == 0 ? kExitOk : kExitUsage;
  }

  try {
    if (s_sim->parsed()) return cmd_simulate(common, sim);
    if (s_cls->parsed()) return cmd_classify(common, cls);
    if (s_fit->parsed()) return cmd_fit(common, fa);
    if (s_study->parsed()) return cmd_study(common, sa);
    if (s_pred->parsed()) return cmd_predict(common, pa);
  } catch (const ConfigError& e) {
    std::cerr << "error: " << e.what() << "\n";
    return kExitUsage;
  } catch (const ArgumentError& e) {
    std::cerr << "error: " << e.what() << "\n";
    return kExitUsage;
  } catch (const IoError& e) {
    std::cerr << "I/O error: " << e.what() << "\n";
    return kExitIo;
  } catch (const std::exception& e) {
    std::cerr << "internal error: " << e.what() << "\n";
    return kExitInternal;
  }
  return kExitUsage;
}
