#pragma once

// Synthetic cohorts: entry ages and covariates, exact latent paths from
// Gompertz competing risks, state-dependent disease indicators and the
// visit schedule that turns an exact path into interval-censored panel data.

#include <algorithm>
#include <cmath>
#include <cstddef>
#include <cstdint>
#include <cstdio>
#include <limits>
#include <string>
#include <vector>

#include "cthmm/errors.hpp"
#include "cthmm/exact.hpp"
#include "cthmm/likelihood.hpp"
#include "cthmm/model.hpp"
#include "cthmm/parallel.hpp"
#include "cthmm/rng.hpp"

namespace cthmm {

inline constexpr double kNever = std::numeric_limits<double>::infinity();

struct CovariateSpec {
  enum class Kind { bernoulli, normal, uniform };
  std::string name;
  Kind kind = Kind::bernoulli;
  double a = 0.5;  // bernoulli: p; normal: mean; uniform: lower
  double b = 0.0;  // normal: sd; uniform: upper

  double draw(Rng& rng) const {
    switch (kind) {
      case Kind::bernoulli: return rng.bernoulli(a) ? 1.0 : 0.0;
      case Kind::normal: {
        // Box-Muller on the portable uniform stream.
        const double u1 = rng.uniform();
        const double u2 = rng.uniform();
        return a + b * std::sqrt(-2.0 * std::log(u1)) * std::cos(2.0 * M_PI * u2);
      }
      case Kind::uniform: return rng.uniform(a, b);
    }
    return 0.0;
  }

  void validate() const {
    const std::string where = "covariate " + name + ": ";
    if (name.empty()) throw ConfigError("covariate without a name");
    if (kind == Kind::bernoulli && !(a >= 0.0 && a <= 1.0)) throw ConfigError(where + "p must lie in [0, 1]");
    if (kind == Kind::normal && !(b >= 0.0 && std::isfinite(a))) throw ConfigError(where + "sd must be >= 0");
    if (kind == Kind::uniform && !(b > a)) throw ConfigError(where + "upper bound must exceed lower bound");
  }

  friend bool operator==(const CovariateSpec&, const CovariateSpec&) = default;
};

inline const char* to_string(CovariateSpec::Kind k) {
  switch (k) {
    case CovariateSpec::Kind::bernoulli: return "bernoulli";
    case CovariateSpec::Kind::normal: return "normal";
    case CovariateSpec::Kind::uniform: return "uniform";
  }
  return "";
}

// Data-generating model: states, transitions, their Gompertz parameters,
// covariate generators and cohort entry rules.
struct TruthConfig {
  StateSpace states;
  TransitionStructure transitions;
  std::vector<CovariateSpec> covariates;
  ParameterSet params;
  std::vector<double> initial_probs;  // over transient states
  double entry_age_min = 60.0;
  double entry_age_max = 96.0;
  bool whole_year_entry = true;
  double max_age = 110.0;
  double followup_horizon = 18.0;

  std::vector<std::string> covariate_names() const {
    std::vector<std::string> out;
    for (const auto& c : covariates) out.push_back(c.name);
    return out;
  }

  ModelSpec model_spec() const { return ModelSpec(states, transitions, covariate_names()); }

  void validate() const {
    if (states.size() == 0 || transitions.size() == 0) throw ConfigError("truth: empty state space or transition list");
    for (const auto& c : covariates) c.validate();
    if (params.per_transition.size() != transitions.size()) {
      throw ConfigError("truth: parameter table has " + std::to_string(params.per_transition.size()) +
                        " rows, the structure has " + std::to_string(transitions.size()) + " transitions");
    }
    for (std::size_t k = 0; k < transitions.size(); ++k) {
      const auto& p = params.per_transition[k];
      if (p.betas.size() != covariates.size()) {
        throw ConfigError("truth: transition " + transitions.name(k) + " needs one beta per covariate");
      }
      if (!std::isfinite(p.log_rate) || !std::isfinite(p.shape)) {
        throw ConfigError("truth: non-finite parameter for transition " + transitions.name(k));
      }
      for (double b : p.betas) {
        if (!std::isfinite(b)) throw ConfigError("truth: non-finite beta for transition " + transitions.name(k));
      }
    }
    if (static_cast<int>(initial_probs.size()) != states.n_transient()) {
      throw ConfigError("cohort: initial_probs needs one entry per transient state");
    }
    double sum = 0.0;
    for (double p : initial_probs) {
      if (!(p >= 0.0 && p <= 1.0)) throw ConfigError("cohort: initial_probs must lie in [0, 1]");
      sum += p;
    }
    if (std::abs(sum - 1.0) > 1e-9) throw ConfigError("cohort: initial_probs must sum to 1");
    if (!(entry_age_max >= entry_age_min) || !std::isfinite(entry_age_min)) {
      throw ConfigError("cohort: entry age bounds are inconsistent");
    }
    if (!(max_age > entry_age_max)) throw ConfigError("cohort: max_age must exceed the largest entry age");
    if (!(followup_horizon > 0.0)) throw ConfigError("cohort: followup_horizon must be positive");
  }
};

// Three-state illness-death structure (mild pattern, complex pattern, death)
// with three binary covariates; x3 has no effect.
inline TruthConfig default_truth() {
  TruthConfig t;
  t.states = StateSpace(2, 1, {"A", "B", "Death"});
  t.transitions = TransitionStructure(t.states, {{0, 1}, {0, 2}, {1, 2}});
  for (const char* n : {"x1", "x2", "x3"}) t.covariates.push_back({n, CovariateSpec::Kind::bernoulli, 0.5, 0.0});
  t.params.per_transition = {
      {-14.79613, 0.1556735, {-0.1957039, -0.2403646, 0.0}},
      {-11.90339, 0.1088540, {0.1405208, -0.4468561, 0.0}},
      {-11.55569, 0.1071397, {0.1860589, -0.3101002, 0.0}},
  };
  t.initial_probs = {0.69, 0.31};
  return t;
}

// Per transient state: baseline prevalence of each patterned disease and its
// onset probability per sojourn leading into the state. The rare block is
// shared by all states.
struct DiseaseProfile {
  std::vector<double> baseline;
  std::vector<double> incidence;
  friend bool operator==(const DiseaseProfile&, const DiseaseProfile&) = default;
};

struct RareBlock {
  int count = 0;
  double prevalence = 0.01;
  double incidence = 0.001;
  friend bool operator==(const RareBlock&, const RareBlock&) = default;
};

struct DiseaseConfig {
  std::vector<DiseaseProfile> class_profiles;
  RareBlock rare;
  double onset_window = 2.0;  // years before a transition over which onsets spread

  std::size_t n_patterned() const { return class_profiles.empty() ? 0 : class_profiles.front().baseline.size(); }
  std::size_t n_diseases() const { return n_patterned() + static_cast<std::size_t>(std::max(rare.count, 0)); }

  void validate(int n_transient) const {
    if (static_cast<int>(class_profiles.size()) != n_transient) {
      throw ConfigError("diseases: need one class profile per transient state");
    }
    const auto r = n_patterned();
    auto prob = [](double p) { return p >= 0.0 && p <= 1.0; };
    for (std::size_t k = 0; k < class_profiles.size(); ++k) {
      const auto& c = class_profiles[k];
      if (c.baseline.size() != r || c.incidence.size() != r) {
        throw ConfigError("diseases: profile " + std::to_string(k + 1) + " has inconsistent lengths");
      }
      for (std::size_t j = 0; j < r; ++j) {
        if (!prob(c.baseline[j]) || !prob(c.incidence[j])) {
          throw ConfigError("diseases: profile " + std::to_string(k + 1) + " has a probability outside [0, 1]");
        }
      }
    }
    if (rare.count < 0) throw ConfigError("diseases: rare.count must be >= 0");
    if (!(rare.prevalence >= 0.0 && rare.prevalence < 0.02)) throw ConfigError("diseases: rare.prevalence must lie in [0, 0.02)");
    if (!prob(rare.incidence)) throw ConfigError("diseases: rare.incidence must lie in [0, 1]");
    if (n_diseases() == 0) throw ConfigError("diseases: no diseases configured");
    if (!(onset_window >= 0.0)) throw ConfigError("diseases: onset_window must be >= 0");
  }
};

// Ten patterned conditions plus a rare block. The complex pattern dominates
// the mild one item-wise, in both prevalence and onset.
inline DiseaseConfig default_diseases() {
  DiseaseConfig d;
  d.class_profiles = {
      {{0.30, 0.25, 0.20, 0.15, 0.15, 0.10, 0.10, 0.08, 0.05, 0.05},
       {0.30, 0.30, 0.25, 0.25, 0.20, 0.20, 0.15, 0.15, 0.10, 0.10}},
      {{0.75, 0.70, 0.65, 0.60, 0.55, 0.50, 0.45, 0.40, 0.35, 0.30},
       {0.70, 0.70, 0.65, 0.60, 0.55, 0.50, 0.45, 0.40, 0.35, 0.30}},
  };
  d.rare = {5, 0.01, 0.002};
  return d;
}

struct SchemeConfig {
  enum class Kind { population, irregular };
  Kind kind = Kind::population;
  double young_gap = 6.0;
  double old_gap = 3.0;
  double switch_age = 78.0;
  double gap_min = 0.75;
  double gap_max = 3.0;

  void validate() const {
    if (!(young_gap > 0.0 && old_gap > 0.0)) throw ConfigError("scheme: visit gaps must be positive");
    if (!(gap_min > 0.0 && gap_max >= gap_min)) throw ConfigError("scheme: irregular gaps need 0 < min <= max");
  }
};

inline const char* to_string(SchemeConfig::Kind k) {
  return k == SchemeConfig::Kind::population ? "population" : "irregular";
}

inline SchemeConfig::Kind parse_scheme_kind(const std::string& s) {
  if (s == "population") return SchemeConfig::Kind::population;
  if (s == "irregular") return SchemeConfig::Kind::irregular;
  throw ConfigError("unknown scheme '" + s + "' (valid: population, irregular)");
}

// Age t1 with H(t0, t1) = H; kNever when the hazard integrates to less than H
// over the whole future (possible only for negative shape).
inline double inverse_cumulative_hazard(const TransitionParams& p, double t0, std::span<const double> x, double H) {
  if (!(H >= 0.0)) throw ArgumentError("inverse_cumulative_hazard: H must be >= 0");
  if (H == 0.0) return t0;
  const double log_h0 = p.log_rate + p.shape * t0 + linear_predictor(p, x);
  if (std::abs(p.shape) < kShapeLimit) return t0 + H * std::exp(-log_h0);
  const double arg = p.shape * H * std::exp(-log_h0);
  if (!(arg > -1.0)) return kNever;
  return t0 + std::log1p(arg) / p.shape;
}

// Competing-risks inversion: one candidate time per allowed exit, move to the
// earliest. Censored in the current state at max_age.
inline ExactTrajectory simulate_trajectory(const TruthConfig& truth, const TransitionStructure& ts,
                                           std::span<const double> x, double entry_age, int entry_state, Rng& rng,
                                           std::string id = {}) {
  if (!truth.states.is_transient(entry_state)) throw ArgumentError("simulate_trajectory: entry state must be transient");
  ExactTrajectory tr;
  tr.id = std::move(id);
  tr.covariates.assign(x.begin(), x.end());
  tr.path.push_back({entry_state, entry_age});
  int s = entry_state;
  double t = entry_age;
  while (truth.states.is_transient(s)) {
    double best = kNever;
    int dest = -1;
    for (std::size_t k = 0; k < ts.size(); ++k) {
      if (ts[k].from != s) continue;
      const double cand = inverse_cumulative_hazard(truth.params.per_transition[k], t, x, -std::log(rng.uniform()));
      if (cand < best) {
        best = cand;
        dest = ts[k].to;
      }
    }
    if (dest < 0 || !(best < truth.max_age) || !(best > t)) break;
    s = dest;
    t = best;
    tr.path.push_back({s, t});
  }
  tr.end_age = truth.states.is_absorbing(s) ? t : truth.max_age;
  return tr;
}

// Administrative censoring at `age`: later transitions are discarded.
inline ExactTrajectory censor_at(ExactTrajectory tr, double age) {
  if (age >= tr.end_age) return tr;
  while (tr.path.size() > 1 && tr.path.back().age > age) tr.path.pop_back();
  tr.end_age = age;
  return tr;
}

// Indicator rows (one per visit age). Baseline draws follow the entry
// state's profile. Each sojourn that ends in a transition switches on every
// absent disease with the onset probability of the state being moved to (the
// current state's when the move is to an absorbing state), at a time uniform
// over the last dc.onset_window years of the sojourn. The rare block ignores
// the state. Onsets are permanent. Pass the uncensored path so the last
// observed sojourn knows its destination.
inline std::vector<BinaryRow> simulate_diseases(const ExactTrajectory& tr, const DiseaseConfig& dc,
                                                const StateSpace& states, std::span<const double> visit_ages,
                                                Rng& rng) {
  const std::size_t r_pat = dc.n_patterned();
  const std::size_t r_all = dc.n_diseases();
  for (double a : visit_ages) {
    if (a < tr.entry_age() || a > tr.end_age) throw ArgumentError("simulate_diseases: visit age outside the trajectory");
  }
  std::vector<double> onset(r_all, kNever);
  const int s0 = tr.path.front().state;
  const double entry = tr.entry_age();
  for (std::size_t r = 0; r < r_all; ++r) {
    const double p = r < r_pat ? dc.class_profiles[static_cast<std::size_t>(s0)].baseline[r] : dc.rare.prevalence;
    if (rng.bernoulli(p)) onset[r] = entry;
  }
  for (std::size_t k = 0; k + 1 < tr.path.size(); ++k) {
    const int s = tr.path[k].state;
    const int next = tr.path[k + 1].state;
    const double b = tr.path[k + 1].age;
    const double a = std::max(tr.path[k].age, b - dc.onset_window);
    const auto& profile = dc.class_profiles[static_cast<std::size_t>(states.is_transient(next) ? next : s)];
    for (std::size_t r = 0; r < r_all; ++r) {
      const double p = r < r_pat ? profile.incidence[r] : dc.rare.incidence;
      const double u = rng.uniform();
      const double v = rng.uniform();  // both drawn for every disease so streams stay aligned
      if (onset[r] == kNever && u < p) onset[r] = a + v * (b - a);
    }
  }

  std::vector<BinaryRow> rows;
  rows.reserve(visit_ages.size());
  for (double age : visit_ages) {
    BinaryRow row(r_all, 0);
    for (std::size_t r = 0; r < r_all; ++r) row[r] = onset[r] <= age ? 1 : 0;
    rows.push_back(std::move(row));
  }
  return rows;
}

struct ObservationRecord {
  std::vector<double> visit_ages;  // scheduled visits, all before death
  bool died = false;
  double death_age = kNever;
};

// Visits from entry until the trajectory ends (inclusive when censored,
// exclusive of the death time). The exact death time is recorded separately.
inline ObservationRecord apply_observation_scheme(const ExactTrajectory& tr, const StateSpace& states,
                                                  const SchemeConfig& sc, Rng& rng) {
  ObservationRecord rec;
  rec.died = states.is_absorbing(tr.final_state());
  rec.death_age = rec.died ? tr.end_age : kNever;
  const double end = tr.end_age;
  double age = tr.entry_age();
  const double eps = 1e-9;
  while (rec.died ? age < end : age <= end + eps) {
    rec.visit_ages.push_back(age);
    double gap;
    if (sc.kind == SchemeConfig::Kind::population) {
      gap = age < sc.switch_age - eps ? sc.young_gap : sc.old_gap;
    } else {
      gap = rng.uniform(sc.gap_min, sc.gap_max);
    }
    age += gap;
  }
  return rec;
}

struct GenerateConfig {
  std::size_t n_subjects = 1000;
  SchemeConfig scheme;
  TruthConfig truth = default_truth();
  DiseaseConfig diseases = default_diseases();
  std::uint64_t seed = 1;

  void validate() const {
    if (n_subjects < 1) throw ConfigError("cohort: n_subjects must be >= 1");
    truth.validate();
    diseases.validate(truth.states.n_transient());
    scheme.validate();
  }
};

struct GeneratedData {
  PanelDataset panel;   // observed_state is the latent state at each visit
  ExactDataset exact;   // censored at the end of follow-up
  TruthConfig truth;
  std::size_t n_dropped = 0;  // subjects with fewer than two panel records
};

inline std::string subject_label(std::size_t index) {
  char buf[32];
  std::snprintf(buf, sizeof buf, "s%06zu", index + 1);
  return buf;
}

// Independent streams per (seed, subject, purpose), so output does not depend
// on the worker count.
enum class Stream : std::uint64_t { cohort = 1, path = 2, scheme = 3, diseases = 4 };

inline GeneratedData generate_dataset(const GenerateConfig& cfg, std::size_t threads = 1) {
  cfg.validate();
  const auto& truth = cfg.truth;
  const auto& states = truth.states;
  struct Unit {
    ExactTrajectory exact;
    Subject subject;
    bool keep = false;
  };
  std::vector<Unit> units(cfg.n_subjects);
  parallel_for(cfg.n_subjects, threads, [&](std::size_t i) {
    auto stream = [&](Stream s) { return Rng(cfg.seed, {static_cast<std::uint64_t>(i), static_cast<std::uint64_t>(s)}); };
    Rng cohort = stream(Stream::cohort);
    CovariateVector x;
    for (const auto& c : truth.covariates) x.push_back(c.draw(cohort));
    const double entry = truth.whole_year_entry
                             ? static_cast<double>(cohort.uniform_int(static_cast<long>(std::ceil(truth.entry_age_min)),
                                                                      static_cast<long>(std::floor(truth.entry_age_max))))
                             : cohort.uniform(truth.entry_age_min, truth.entry_age_max);
    const int s0 = cohort.categorical(truth.initial_probs);

    Rng path_rng = stream(Stream::path);
    const std::string id = subject_label(i);
    ExactTrajectory full = simulate_trajectory(truth, truth.transitions, x, entry, s0, path_rng, id);
    ExactTrajectory tr = censor_at(full, std::min(entry + truth.followup_horizon, truth.max_age));

    Rng scheme_rng = stream(Stream::scheme);
    const auto obs = apply_observation_scheme(tr, states, cfg.scheme, scheme_rng);
    Rng disease_rng = stream(Stream::diseases);
    const auto rows = simulate_diseases(full, cfg.diseases, states, obs.visit_ages, disease_rng);

    Subject s{id, x, {}};
    for (std::size_t v = 0; v < obs.visit_ages.size(); ++v) {
      s.visits.push_back({obs.visit_ages[v], tr.state_at(obs.visit_ages[v]), rows[v], false});
    }
    if (obs.died) s.visits.push_back({obs.death_age, tr.final_state(), {}, true});
    units[i].keep = s.visits.size() >= 2;
    units[i].subject = std::move(s);
    units[i].exact = std::move(tr);
  });

  GeneratedData out;
  out.truth = truth;
  std::vector<Subject> subjects;
  std::vector<ExactTrajectory> paths;
  for (auto& u : units) {
    if (!u.keep) {
      ++out.n_dropped;
      continue;
    }
    subjects.push_back(std::move(u.subject));
    paths.push_back(std::move(u.exact));
  }
  out.panel = PanelDataset(states, truth.covariate_names(), std::move(subjects));
  out.exact = ExactDataset(states, truth.transitions, truth.covariate_names(), std::move(paths));
  return out;
}

// Share of trajectories in each state at each age, among those still under
// observation (not censored alive before the age).
inline std::vector<Vector> empirical_occupancy(std::span<const ExactTrajectory> paths, const StateSpace& states,
                                               std::span<const double> ages) {
  std::vector<Vector> out;
  for (double a : ages) {
    Vector counts = Vector::Zero(states.size());
    double n = 0.0;
    for (const auto& tr : paths) {
      if (a < tr.entry_age()) continue;
      if (!states.is_absorbing(tr.final_state()) && a > tr.end_age) continue;
      counts[tr.state_at(a)] += 1.0;
      n += 1.0;
    }
    out.push_back(n > 0.0 ? Vector(counts / n) : counts);
  }
  return out;
}

}  // namespace cthmm
