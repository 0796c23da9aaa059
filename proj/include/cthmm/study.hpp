#pragma once

// Replicated generate -> classify -> fit pipelines, performance metrics
// (bias, empirical SE, Monte Carlo SE of the bias, coverage) and table output.

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <map>
#include <optional>
#include <string>
#include <vector>

#include "cthmm/errors.hpp"
#include "cthmm/estimation.hpp"
#include "cthmm/lca.hpp"
#include "cthmm/likelihood.hpp"
#include "cthmm/parallel.hpp"
#include "cthmm/rng.hpp"
#include "cthmm/simulate.hpp"

namespace cthmm {

enum class ModelVariant { ref, approx_timm, approx_tihmm, timm, tihmm };

inline constexpr ModelVariant kAllVariants[] = {ModelVariant::ref, ModelVariant::approx_timm,
                                                 ModelVariant::approx_tihmm, ModelVariant::timm,
                                                 ModelVariant::tihmm};

inline const char* display_name(ModelVariant m) {
  switch (m) {
    case ModelVariant::ref: return "REF";
    case ModelVariant::approx_timm: return "ApproxTIMM";
    case ModelVariant::approx_tihmm: return "ApproxTIHMM";
    case ModelVariant::timm: return "TIMM";
    case ModelVariant::tihmm: return "TIHMM";
  }
  return "";
}

inline const char* cli_name(ModelVariant m) {
  switch (m) {
    case ModelVariant::ref: return "ref";
    case ModelVariant::approx_timm: return "approx-timm";
    case ModelVariant::approx_tihmm: return "approx-tihmm";
    case ModelVariant::timm: return "timm";
    case ModelVariant::tihmm: return "tihmm";
  }
  return "";
}

inline std::string valid_model_names() {
  std::string s;
  for (auto m : kAllVariants) s += std::string(s.empty() ? "" : ", ") + cli_name(m);
  return s;
}

// Accepts either spelling ("approx-tihmm" or "ApproxTIHMM"), case-insensitive.
inline ModelVariant parse_model(const std::string& name) {
  auto lower = [](std::string s) {
    std::string out;
    for (char c : s) {
      if (c != '-' && c != '_') out += static_cast<char>(std::tolower(static_cast<unsigned char>(c)));
    }
    return out;
  };
  const std::string key = lower(name);
  for (auto m : kAllVariants) {
    if (lower(cli_name(m)) == key) return m;
  }
  throw ConfigError("unknown model '" + name + "' (valid: " + valid_model_names() + ")");
}

inline bool is_hidden(ModelVariant m) { return m == ModelVariant::approx_tihmm || m == ModelVariant::tihmm; }
inline bool is_approx(ModelVariant m) { return m == ModelVariant::approx_timm || m == ModelVariant::approx_tihmm; }

enum class HiddenInit { baseline_posterior, assignment_frequencies };

struct PipelineConfig {
  LcaOptions lca;
  SolverConfig approx_solver{SolverMethod::piecewise, 1.0, GridEvaluation::left};
  SolverConfig exact_solver{SolverMethod::ode};
  OptimizerOptions optimizer;
  double ci_level = 0.95;
  HiddenInit hidden_init = HiddenInit::baseline_posterior;
  std::size_t threads = 1;

  SolverConfig solver_for(ModelVariant m) const { return is_approx(m) ? approx_solver : exact_solver; }
};

// Panel after classification: every non-death visit labelled with its modal
// latent class.
struct ClassifiedPanel {
  LcaModel lca;
  std::vector<Vector> posteriors;    // one per non-death visit, in dataset order
  std::vector<int> assignments;
  EmissionMatrix emission;
  InitialDistribution initial;       // per subject
  PanelDataset assigned;             // raw modal states (hidden fits)
  PanelDataset monotone;             // impossible observed moves carried forward (non-hidden fits)
  std::size_t n_carried_forward = 0;
  std::vector<std::string> warnings;
};

// Replaces each observed state that cannot be reached from the previous one
// by the previous state.
inline PanelDataset carry_forward_impossible(const PanelDataset& data, const TransitionStructure& ts,
                                             std::size_t* n_changed = nullptr) {
  std::vector<Subject> subjects = data.subjects();
  std::size_t changed = 0;
  for (auto& s : subjects) {
    for (std::size_t j = 1; j < s.visits.size(); ++j) {
      const int a = s.visits[j - 1].observed_state;
      int& b = s.visits[j].observed_state;
      if (a != b && !ts.index_of(a, b)) {
        b = a;
        ++changed;
      }
    }
  }
  if (n_changed) *n_changed = changed;
  return PanelDataset(data.states(), data.covariate_names(), std::move(subjects));
}

inline ClassifiedPanel classify_panel(const PanelDataset& data, const TransitionStructure& ts, const LcaOptions& opt,
                                      HiddenInit init_mode = HiddenInit::baseline_posterior) {
  const int nt = data.states().n_transient();
  if (opt.n_classes != nt) {
    throw ArgumentError("classify_panel: " + std::to_string(opt.n_classes) + " classes for " + std::to_string(nt) +
                        " transient states");
  }
  std::vector<BinaryRow> rows;
  for (const auto& s : data.subjects()) {
    for (const auto& v : s.visits) {
      if (v.is_exact_death || data.states().is_absorbing(v.observed_state)) continue;
      if (v.diseases.empty()) throw ArgumentError("classify_panel: subject " + s.id + " has a visit without disease indicators");
      rows.push_back(v.diseases);
    }
  }
  ClassifiedPanel out;
  out.lca = fit_lca(rows, opt, &out.warnings);
  std::vector<Subject> subjects = data.subjects();
  std::vector<Vector> first_posterior;
  Vector freq = Vector::Zero(nt);
  for (auto& s : subjects) {
    bool first = true;
    for (auto& v : s.visits) {
      if (v.is_exact_death || data.states().is_absorbing(v.observed_state)) continue;
      const auto a = posterior(out.lca, v.diseases);
      v.observed_state = a.modal_class;
      out.posteriors.push_back(a.posterior);
      out.assignments.push_back(a.modal_class);
      if (first) {
        first_posterior.push_back(a.posterior);
        freq[a.modal_class] += 1.0;
        first = false;
      }
    }
  }
  out.emission = estimate_emission(out.posteriors, out.assignments);
  if (init_mode == HiddenInit::baseline_posterior) {
    out.initial = InitialDistribution(std::move(first_posterior));
  } else {
    out.initial = InitialDistribution(Vector(freq / freq.sum()));
  }
  out.assigned = PanelDataset(data.states(), data.covariate_names(), std::move(subjects));
  out.monotone = carry_forward_impossible(out.assigned, ts, &out.n_carried_forward);
  return out;
}

struct FitSummary {
  bool converged = false;
  bool has_se = false;
  Vector estimates;
  Vector standard_errors;
  Vector ci_lower;
  Vector ci_upper;
  double loglik = kNegInf;
  std::size_t n_evals = 0;
};

inline FitSummary summarize(const FitResult& r) {
  return {r.converged, r.has_standard_errors(), r.flat_estimates, r.standard_errors, r.ci_lower, r.ci_upper,
          r.loglik,    r.n_evals};
}

// Fits one model variant on a generated (and, for panel variants,
// classified) dataset.
inline FitResult fit_variant(ModelVariant m, const ModelSpec& spec, const GeneratedData& data,
                             const ClassifiedPanel* classified, const PipelineConfig& cfg) {
  FitOptions opts;
  opts.solver = cfg.solver_for(m);
  opts.optimizer = cfg.optimizer;
  opts.ci_level = cfg.ci_level;
  opts.threads = 1;
  if (m == ModelVariant::ref) return fit_exact_reference(spec, data.exact, opts);
  if (!classified) throw ArgumentError("fit_variant: panel variants need a classified panel");
  if (is_hidden(m)) {
    opts.mode = FitMode::hidden;
    opts.emission = classified->emission;
    opts.initial = classified->initial;
    return fit(spec, classified->assigned, opts);
  }
  opts.mode = FitMode::observed;
  return fit(spec, classified->monotone, opts);
}

struct Scenario {
  std::string name = "population_n3000";
  std::size_t n_subjects = 3000;
  SchemeConfig::Kind scheme = SchemeConfig::Kind::population;
  int n_replicates = 20;
  std::vector<ModelVariant> models{std::begin(kAllVariants), std::end(kAllVariants)};
  std::uint64_t base_seed = 20240601;

  void validate() const {
    if (n_replicates < 2) throw ConfigError("study: n_replicates must be >= 2");
    if (n_subjects < 1) throw ConfigError("study: n_subjects must be >= 1");
  }
};

struct ReplicateRecord {
  int index = 0;
  std::uint64_t seed = 0;
  std::size_t n_subjects = 0;
  std::size_t n_dropped = 0;
  std::size_t n_carried_forward = 0;
  std::map<ModelVariant, FitSummary> fits;
  std::map<ModelVariant, std::string> failures;
};

struct MetricRecord {
  bool available = false;
  int n_converged = 0;
  int n_with_se = 0;
  double mean_estimate = std::numeric_limits<double>::quiet_NaN();
  double bias = std::numeric_limits<double>::quiet_NaN();
  double empirical_se = std::numeric_limits<double>::quiet_NaN();
  double mcse_bias = std::numeric_limits<double>::quiet_NaN();
  double coverage = std::numeric_limits<double>::quiet_NaN();
};

// Coverage counts only replicates with a finite interval (finite SE).
inline MetricRecord compute_metrics(std::span<const double> estimates, std::span<const double> ses,
                                    const std::vector<bool>& covered, double truth) {
  if (ses.size() != estimates.size() || covered.size() != estimates.size()) {
    throw ArgumentError("compute_metrics: length mismatch");
  }
  MetricRecord m;
  m.n_converged = static_cast<int>(estimates.size());
  if (estimates.size() < 2) return m;
  const double n = static_cast<double>(estimates.size());
  double sum = 0.0;
  for (double e : estimates) sum += e;
  m.mean_estimate = sum / n;
  double ss = 0.0;
  for (double e : estimates) ss += (e - m.mean_estimate) * (e - m.mean_estimate);
  m.bias = m.mean_estimate - truth;
  m.empirical_se = std::sqrt(ss / (n - 1.0));
  m.mcse_bias = m.empirical_se / std::sqrt(n);
  int hits = 0;
  for (std::size_t i = 0; i < estimates.size(); ++i) {
    if (!std::isfinite(ses[i])) continue;
    ++m.n_with_se;
    if (covered[i]) ++hits;
  }
  if (m.n_with_se > 0) m.coverage = static_cast<double>(hits) / m.n_with_se;
  m.available = true;
  return m;
}

struct MetricRow {
  std::string scenario;
  ModelVariant model = ModelVariant::ref;
  int transition = 0;  // 0-based
  std::string parameter;
  double truth = 0.0;
  MetricRecord metrics;
};

struct StudyResult {
  Scenario scenario;
  std::vector<std::string> transition_names;
  std::vector<MetricRow> rows;
  std::vector<ReplicateRecord> replicates;

  const MetricRow& row(ModelVariant m, int transition, const std::string& parameter) const {
    for (const auto& r : rows) {
      if (r.model == m && r.transition == transition && r.parameter == parameter) return r;
    }
    throw ArgumentError(std::string("no metric row for ") + display_name(m) + " transition " +
                        std::to_string(transition + 1) + " " + parameter);
  }
};

inline std::uint64_t replicate_seed(std::uint64_t base, int r) {
  return derive_seed(base, {static_cast<std::uint64_t>(r)});
}

inline ReplicateRecord run_replicate(const Scenario& s, int r, const GenerateConfig& base, const PipelineConfig& cfg) {
  ReplicateRecord rec;
  rec.index = r;
  rec.seed = replicate_seed(s.base_seed, r);
  GenerateConfig g = base;
  g.n_subjects = s.n_subjects;
  g.scheme.kind = s.scheme;
  g.seed = rec.seed;
  const GeneratedData data = generate_dataset(g, 1);
  rec.n_subjects = data.panel.size();
  rec.n_dropped = data.n_dropped;
  const ModelSpec spec = data.truth.model_spec();

  std::optional<ClassifiedPanel> classified;
  std::string classify_error;
  const bool needs_panel = std::any_of(s.models.begin(), s.models.end(), [](ModelVariant m) { return m != ModelVariant::ref; });
  if (needs_panel) {
    try {
      LcaOptions lo = cfg.lca;
      lo.n_classes = data.truth.states.n_transient();
      lo.seed = derive_seed(rec.seed, {0x1ca});
      lo.threads = 1;
      classified = classify_panel(data.panel, data.truth.transitions, lo, cfg.hidden_init);
      rec.n_carried_forward = classified->n_carried_forward;
    } catch (const Error& e) {
      classify_error = std::string("classification failed: ") + e.what();
    }
  }
  for (auto m : s.models) {
    if (m != ModelVariant::ref && !classified) {
      rec.failures[m] = classify_error;
      continue;
    }
    try {
      rec.fits[m] = summarize(fit_variant(m, spec, data, classified ? &*classified : nullptr, cfg));
    } catch (const Error& e) {
      rec.failures[m] = e.what();
    }
  }
  return rec;
}

inline std::vector<MetricRow> aggregate(const Scenario& s, const ModelSpec& spec, const ParameterSet& truth,
                                        const std::vector<ReplicateRecord>& reps) {
  std::vector<MetricRow> rows;
  const auto& refs = spec.free_parameters();
  for (auto m : s.models) {
    for (std::size_t i = 0; i < refs.size(); ++i) {
      const auto ii = static_cast<Eigen::Index>(i);
      const double t = truth.get(refs[i]);
      std::vector<double> est, ses;
      std::vector<bool> covered;
      for (const auto& rep : reps) {
        auto it = rep.fits.find(m);
        if (it == rep.fits.end() || !it->second.converged) continue;
        const auto& f = it->second;
        est.push_back(f.estimates[ii]);
        const double se = f.has_se ? f.standard_errors[ii] : std::numeric_limits<double>::quiet_NaN();
        ses.push_back(se);
        covered.push_back(std::isfinite(se) && f.ci_lower[ii] <= t && t <= f.ci_upper[ii]);
      }
      rows.push_back({s.name, m, refs[i].transition, spec.parameter_name(refs[i]), t, compute_metrics(est, ses, covered, t)});
    }
  }
  return rows;
}

// Replicates run in parallel, each single-threaded, and are aggregated in
// index order, so the result does not depend on cfg.threads.
inline StudyResult run_scenario(const Scenario& s, const GenerateConfig& base, const PipelineConfig& cfg) {
  s.validate();
  base.truth.validate();
  base.diseases.validate(base.truth.states.n_transient());
  base.scheme.validate();
  StudyResult res;
  res.scenario = s;
  for (std::size_t k = 0; k < base.truth.transitions.size(); ++k) res.transition_names.push_back(base.truth.transitions.name(k));
  res.replicates.resize(static_cast<std::size_t>(s.n_replicates));
  parallel_for(res.replicates.size(), resolve_threads(cfg.threads), [&](std::size_t r) {
    res.replicates[r] = run_replicate(s, static_cast<int>(r), base, cfg);
  });
  res.rows = aggregate(s, base.truth.model_spec(), base.truth.params, res.replicates);
  return res;
}

namespace detail {
inline std::string fmt(double v, int digits_after_point) {
  if (!std::isfinite(v)) return "NA";
  char buf[64];
  if (digits_after_point < 0) {
    std::snprintf(buf, sizeof buf, "%.17g", v);
  } else {
    std::snprintf(buf, sizeof buf, "%.*f", digits_after_point, v);
    if (std::string(buf).find_first_not_of("-0.") == std::string::npos) std::snprintf(buf, sizeof buf, "%.*f", digits_after_point, 0.0);
  }
  return buf;
}
}  // namespace detail

inline const char* kTableHeader = "scenario,model,parameter,estimate,bias,se_bias,coverage,n_converged";
inline const char* kSidecarHeader =
    "scenario,model,parameter,truth,estimate,bias,se_bias,empirical_se,coverage,n_converged,n_with_se";

// One CSV per transition, 3 decimals, plus a full-precision sidecar
// (transition_<k>_full.csv). Returns the written paths.
inline std::vector<std::filesystem::path> emit_tables(const StudyResult& r, const std::filesystem::path& dir) {
  std::error_code ec;
  std::filesystem::create_directories(dir, ec);
  if (ec) throw IoError("cannot create " + dir.string() + ": " + ec.message());
  std::vector<std::filesystem::path> written;
  for (std::size_t k = 0; k < r.transition_names.size(); ++k) {
    const auto base = "transition_" + std::to_string(k + 1);
    const auto p_table = dir / (base + ".csv");
    const auto p_full = dir / (base + "_full.csv");
    std::ofstream table(p_table, std::ios::binary), full(p_full, std::ios::binary);
    if (!table || !full) throw IoError("cannot write tables under " + dir.string());
    table << kTableHeader << '\n';
    full << kSidecarHeader << '\n';
    for (const auto& row : r.rows) {
      if (row.transition != static_cast<int>(k)) continue;
      const auto& m = row.metrics;
      const std::string lead = row.scenario + "," + display_name(row.model) + "," + row.parameter + ",";
      table << lead << detail::fmt(m.mean_estimate, 3) << ',' << detail::fmt(m.bias, 3) << ','
            << detail::fmt(m.mcse_bias, 3) << ',' << detail::fmt(m.coverage, 3) << ',' << m.n_converged << '\n';
      full << lead << detail::fmt(row.truth, -1) << ',' << detail::fmt(m.mean_estimate, -1) << ','
           << detail::fmt(m.bias, -1) << ',' << detail::fmt(m.mcse_bias, -1) << ','
           << detail::fmt(m.empirical_se, -1) << ',' << detail::fmt(m.coverage, -1) << ',' << m.n_converged << ','
           << m.n_with_se << '\n';
    }
    if (!table || !full) throw IoError("write failed under " + dir.string());
    written.push_back(p_table);
    written.push_back(p_full);
  }
  return written;
}

}  // namespace cthmm
