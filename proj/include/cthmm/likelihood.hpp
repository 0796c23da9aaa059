#pragma once

// Panel-data log-likelihoods for observed-state and hidden (misclassified)
// multistate models, with exact death times, plus a brute-force latent-path
// enumeration used as a test oracle.

#include <Eigen/Dense>

#include <algorithm>
#include <cmath>
#include <cstddef>
#include <cstdint>
#include <limits>
#include <map>
#include <optional>
#include <span>
#include <string>
#include <tuple>
#include <utility>
#include <vector>

#include "cthmm/errors.hpp"
#include "cthmm/kfe.hpp"
#include "cthmm/model.hpp"
#include "cthmm/parallel.hpp"

namespace cthmm {

inline constexpr double kNegInf = -std::numeric_limits<double>::infinity();

using BinaryRow = std::vector<std::uint8_t>;

struct Visit {
  double age = 0.0;
  int observed_state = 0;               // 0-based
  BinaryRow diseases;  // empty when not recorded
  bool is_exact_death = false;

  friend bool operator==(const Visit&, const Visit&) = default;
};

struct Subject {
  std::string id;
  CovariateVector covariates;
  std::vector<Visit> visits;

  friend bool operator==(const Subject&, const Subject&) = default;
};

inline void validate_subject(const Subject& s, const StateSpace& states, std::size_t n_covariates) {
  auto fail = [&](const std::string& what) { throw ArgumentError("subject " + s.id + ": " + what); };
  if (s.visits.size() < 2) fail("fewer than two visits");
  if (s.covariates.size() != n_covariates) fail("wrong number of covariates");
  for (double c : s.covariates) {
    if (!std::isfinite(c)) fail("non-finite covariate");
  }
  for (std::size_t j = 0; j < s.visits.size(); ++j) {
    const auto& v = s.visits[j];
    if (!std::isfinite(v.age)) fail("non-finite age");
    if (j > 0 && !(v.age > s.visits[j - 1].age)) fail("ages not strictly increasing");
    if (!states.contains(v.observed_state)) fail("observed state out of range");
    const bool last = j + 1 == s.visits.size();
    if (states.is_absorbing(v.observed_state) && !last) fail("absorbing state before the final visit");
    if (v.is_exact_death && !(last && states.is_absorbing(v.observed_state))) {
      fail("exact death flag must sit on a final visit in an absorbing state");
    }
  }
  if (states.is_absorbing(s.visits.front().observed_state)) fail("first visit in an absorbing state");
}

class PanelDataset {
 public:
  PanelDataset() = default;
  PanelDataset(StateSpace states, std::vector<std::string> covariate_names, std::vector<Subject> subjects)
      : states_(std::move(states)), covariate_names_(std::move(covariate_names)), subjects_(std::move(subjects)) {
    for (const auto& s : subjects_) validate_subject(s, states_, covariate_names_.size());
  }

  const StateSpace& states() const { return states_; }
  const std::vector<std::string>& covariate_names() const { return covariate_names_; }
  const std::vector<Subject>& subjects() const { return subjects_; }
  std::size_t size() const { return subjects_.size(); }
  bool empty() const { return subjects_.empty(); }

  // Number of disease indicator columns (0 when absent).
  std::size_t n_diseases() const {
    for (const auto& s : subjects_) {
      for (const auto& v : s.visits) {
        if (!v.diseases.empty()) return v.diseases.size();
      }
    }
    return 0;
  }

  friend bool operator==(const PanelDataset&, const PanelDataset&) = default;

 private:
  StateSpace states_;
  std::vector<std::string> covariate_names_;
  std::vector<Subject> subjects_;
};

// e(i, j) = P(observe transient j | latent transient i). Death is observed
// without error and is not part of the matrix.
class EmissionMatrix {
 public:
  EmissionMatrix() = default;
  explicit EmissionMatrix(Matrix e) : e_(std::move(e)) {
    if (e_.rows() != e_.cols() || e_.rows() == 0) throw ArgumentError("emission matrix must be square and non-empty");
    for (Eigen::Index i = 0; i < e_.rows(); ++i) {
      for (Eigen::Index j = 0; j < e_.cols(); ++j) {
        if (!(e_(i, j) >= 0.0 && e_(i, j) <= 1.0)) throw ArgumentError("emission entries must lie in [0, 1]");
      }
      if (std::abs(e_.row(i).sum() - 1.0) > 1e-10) {
        throw ArgumentError("emission row " + std::to_string(i + 1) + " does not sum to 1");
      }
    }
  }
  static EmissionMatrix identity(int n) { return EmissionMatrix(Matrix::Identity(n, n)); }

  const Matrix& matrix() const { return e_; }
  int size() const { return static_cast<int>(e_.rows()); }
  double operator()(int i, int j) const { return e_(i, j); }

 private:
  Matrix e_;
};

// Latent-state distribution at each subject's first visit, over transient
// states. Either one shared vector or one per subject.
class InitialDistribution {
 public:
  InitialDistribution() = default;
  explicit InitialDistribution(Vector common) : common_(std::move(common)) { check(common_); }
  explicit InitialDistribution(std::vector<Vector> per_subject) : per_subject_(std::move(per_subject)) {
    for (const auto& v : per_subject_) check(v);
  }

  bool per_subject() const { return !per_subject_.empty(); }
  std::size_t n_subjects() const { return per_subject_.size(); }
  const Vector& for_subject(std::size_t k) const { return per_subject_.empty() ? common_ : per_subject_.at(k); }

 private:
  static void check(const Vector& v) {
    if (v.size() == 0 || (v.array() < 0.0).any() || std::abs(v.sum() - 1.0) > 1e-10) {
      throw ArgumentError("initial distribution must be a probability vector");
    }
  }
  Vector common_;
  std::vector<Vector> per_subject_;
};

enum class LikelihoodMode { observed, hidden };

// Interval with zero probability under the current parameters.
struct ZeroProbability {
  std::string subject_id;
  double t0 = 0.0;
  double t1 = 0.0;
};

struct LoglikResult {
  double value = 0.0;
  std::vector<ZeroProbability> zero_probability;
  operator double() const { return value; }
};

// Groups every inter-visit interval of a dataset by (covariate pattern, start
// age) so each group needs one solver sweep. Built once per dataset.
class LikelihoodPlan {
 public:
  struct Group {
    std::size_t pattern = 0;
    double t0 = 0.0;
    std::vector<double> stops;
  };
  struct IntervalRef {
    std::size_t group = 0;
    std::size_t stop = 0;
  };

  explicit LikelihoodPlan(std::span<const Subject> subjects) {
    std::map<CovariateVector, std::size_t> pattern_index;
    std::map<std::pair<std::size_t, double>, std::size_t> group_index;
    subject_pattern_.reserve(subjects.size());
    for (const auto& s : subjects) {
      auto [pit, inserted] = pattern_index.try_emplace(s.covariates, patterns_.size());
      if (inserted) patterns_.push_back(s.covariates);
      const std::size_t pat = pit->second;
      subject_pattern_.push_back(pat);
      for (std::size_t j = 0; j + 1 < s.visits.size(); ++j) {
        auto [git, gnew] = group_index.try_emplace({pat, s.visits[j].age}, groups_.size());
        if (gnew) groups_.push_back({pat, s.visits[j].age, {}});
        groups_[git->second].stops.push_back(s.visits[j + 1].age);
      }
    }
    for (auto& g : groups_) {
      std::sort(g.stops.begin(), g.stops.end());
      g.stops.erase(std::unique(g.stops.begin(), g.stops.end()), g.stops.end());
    }
    intervals_.resize(subjects.size());
    for (std::size_t k = 0; k < subjects.size(); ++k) {
      const auto& s = subjects[k];
      for (std::size_t j = 0; j + 1 < s.visits.size(); ++j) {
        const std::size_t g = group_index.at({subject_pattern_[k], s.visits[j].age});
        const auto& stops = groups_[g].stops;
        const auto pos = std::lower_bound(stops.begin(), stops.end(), s.visits[j + 1].age) - stops.begin();
        intervals_[k].push_back({g, static_cast<std::size_t>(pos)});
      }
    }
  }

  const std::vector<CovariateVector>& patterns() const { return patterns_; }
  const std::vector<Group>& groups() const { return groups_; }
  std::size_t subject_pattern(std::size_t k) const { return subject_pattern_[k]; }
  const std::vector<IntervalRef>& intervals(std::size_t k) const { return intervals_[k]; }

 private:
  std::vector<CovariateVector> patterns_;
  std::vector<Group> groups_;
  std::vector<std::size_t> subject_pattern_;
  std::vector<std::vector<IntervalRef>> intervals_;
};

// Transition probability matrices for every group of a plan under one
// parameter set.
class PlanProbabilities {
 public:
  PlanProbabilities(const LikelihoodPlan& plan, const ParameterSet& ps, const TransitionStructure& ts,
                    const SolverConfig& cfg, std::size_t threads = 1)
      : plan_(&plan), cfg_(cfg) {
    intensities_.reserve(plan.patterns().size());
    for (const auto& x : plan.patterns()) intensities_.emplace_back(ps, ts, x);
    probs_.resize(plan.groups().size());
    parallel_for(plan.groups().size(), threads, [&](std::size_t g) {
      const auto& grp = plan.groups()[g];
      probs_[g] = propagate(intensities_[grp.pattern], grp.t0, grp.stops, cfg);
    });
  }

  const Matrix& interval(std::size_t subject, std::size_t j) const {
    const auto& ref = plan_->intervals(subject)[j];
    return probs_[ref.group][ref.stop];
  }
  const IntensityFunction& intensity(std::size_t subject) const {
    return intensities_[plan_->subject_pattern(subject)];
  }
  // Age at which the death hazard of an interval starting at t0 is read.
  double hazard_age(double t0, double t) const { return hazard_sample_age(t0, t, cfg_); }

 private:
  const LikelihoodPlan* plan_;
  SolverConfig cfg_;
  std::vector<IntensityFunction> intensities_;
  std::vector<std::vector<Matrix>> probs_;
};

namespace detail {

// sum_r P(from, r) q(r, death, t) over transient r: density of dying, with
// the hazard read at age t (see hazard_sample_age).
inline double death_density_row(const Matrix& p, int from, int death, double t, const IntensityFunction& q,
                                const StateSpace& states) {
  double v = 0.0;
  for (int r = 0; r < states.n_transient(); ++r) {
    const double pr = p(from, r);
    if (pr != 0.0) v += pr * q.rate(r, death, t);
  }
  return v;
}

inline double observed_contribution(const Subject& s, const StateSpace& states, const PlanProbabilities& probs,
                                    std::size_t k, std::vector<ZeroProbability>* zeros) {
  double ll = 0.0;
  for (std::size_t j = 0; j + 1 < s.visits.size(); ++j) {
    const auto& a = s.visits[j];
    const auto& b = s.visits[j + 1];
    const Matrix& p = probs.interval(k, j);
    const double v = b.is_exact_death
                         ? death_density_row(p, a.observed_state, b.observed_state, probs.hazard_age(a.age, b.age),
                                             probs.intensity(k), states)
                         : p(a.observed_state, b.observed_state);
    if (!(v > 0.0)) {
      if (zeros) zeros->push_back({s.id, a.age, b.age});
      return kNegInf;
    }
    ll += std::log(v);
  }
  return ll;
}

// Scaled forward recursion over all n states; absorbing latent states emit
// themselves with probability one.
inline double hidden_contribution(const Subject& s, const StateSpace& states, const EmissionMatrix& emission,
                                  const Vector& pi0, const PlanProbabilities& probs, std::size_t k,
                                  std::vector<ZeroProbability>* zeros) {
  const int n = states.size();
  const int nt = states.n_transient();
  auto emit = [&](int latent, int observed) -> double {
    if (states.is_absorbing(latent)) return latent == observed ? 1.0 : 0.0;
    if (states.is_absorbing(observed)) return 0.0;
    return emission(latent, observed);
  };

  Vector alpha = Vector::Zero(n);
  const int w0 = s.visits.front().observed_state;
  for (int c = 0; c < nt; ++c) alpha[c] = pi0[c] * emit(c, w0);
  double log_scale = 0.0;
  double total = alpha.sum();
  if (!(total > 0.0)) {
    if (zeros) zeros->push_back({s.id, s.visits.front().age, s.visits.front().age});
    return kNegInf;
  }
  alpha /= total;
  log_scale += std::log(total);

  Vector next(n);
  for (std::size_t j = 0; j + 1 < s.visits.size(); ++j) {
    const auto& b = s.visits[j + 1];
    const Matrix& p = probs.interval(k, j);
    next.setZero();
    if (b.is_exact_death) {
      double v = 0.0;
      for (int c = 0; c < n; ++c) {
        if (alpha[c] != 0.0) v += alpha[c] * death_density_row(p, c, b.observed_state, probs.hazard_age(s.visits[j].age, b.age),
                                                             probs.intensity(k), states);
      }
      next[b.observed_state] = v;
    } else {
      next.noalias() = p.transpose() * alpha;
      for (int c = 0; c < n; ++c) next[c] *= emit(c, b.observed_state);
    }
    total = next.sum();
    if (!(total > 0.0)) {
      if (zeros) zeros->push_back({s.id, s.visits[j].age, b.age});
      return kNegInf;
    }
    alpha = next / total;
    log_scale += std::log(total);
  }
  return log_scale;
}

}  // namespace detail

// Everything needed to evaluate one panel log-likelihood repeatedly.
class PanelLikelihood {
 public:
  PanelLikelihood(const ModelSpec& spec, const PanelDataset& data, LikelihoodMode mode, SolverConfig cfg,
                  std::optional<EmissionMatrix> emission = std::nullopt,
                  std::optional<InitialDistribution> init = std::nullopt, std::size_t threads = 1)
      : spec_(&spec),
        data_(&data),
        mode_(mode),
        cfg_(cfg),
        emission_(std::move(emission)),
        init_(std::move(init)),
        threads_(threads),
        plan_(data.subjects()) {
    cfg_.validate();
    if (data.states().size() != spec.states().size() ||
        data.states().n_transient() != spec.states().n_transient()) {
      throw ArgumentError("dataset state space does not match the model");
    }
    if (data.covariate_names().size() != spec.n_covariates()) {
      throw ArgumentError("dataset has " + std::to_string(data.covariate_names().size()) +
                          " covariates, model expects " + std::to_string(spec.n_covariates()));
    }
    if (mode_ == LikelihoodMode::hidden) {
      if (!emission_ || !init_) throw ArgumentError("hidden likelihood needs an emission matrix and an initial distribution");
      if (emission_->size() != spec.states().n_transient()) {
        throw ArgumentError("emission matrix size does not match the number of transient states");
      }
      if (init_->per_subject() && init_->n_subjects() != data.size()) {
        throw ArgumentError("per-subject initial distribution does not match the subject count");
      }
      for (std::size_t k = 0; k < (init_->per_subject() ? data.size() : std::size_t{1}); ++k) {
        if (init_->for_subject(k).size() != spec.states().n_transient()) {
          throw ArgumentError("initial distribution length does not match the number of transient states");
        }
      }
    }
  }

  const LikelihoodPlan& plan() const { return plan_; }
  LikelihoodMode mode() const { return mode_; }
  const SolverConfig& solver() const { return cfg_; }

  // Per-subject contributions in dataset order.
  std::vector<double> contributions(const ParameterSet& ps, std::vector<ZeroProbability>* zeros = nullptr) const {
    spec_->validate(ps);
    const PlanProbabilities probs(plan_, ps, spec_->transitions(), cfg_, threads_);
    const auto& subjects = data_->subjects();
    std::vector<double> out(subjects.size(), 0.0);
    std::vector<std::vector<ZeroProbability>> local(subjects.size());
    parallel_for(subjects.size(), threads_, [&](std::size_t k) {
      auto* z = zeros ? &local[k] : nullptr;
      out[k] = mode_ == LikelihoodMode::observed
                   ? detail::observed_contribution(subjects[k], data_->states(), probs, k, z)
                   : detail::hidden_contribution(subjects[k], data_->states(), *emission_, init_->for_subject(k),
                                                 probs, k, z);
    });
    if (zeros) {
      for (auto& l : local) zeros->insert(zeros->end(), l.begin(), l.end());
    }
    return out;
  }

  LoglikResult evaluate(const ParameterSet& ps) const {
    LoglikResult r;
    const auto parts = contributions(ps, &r.zero_probability);
    for (double v : parts) r.value += v;  // fixed order
    return r;
  }

  double operator()(const ParameterSet& ps) const { return evaluate(ps).value; }

 private:
  const ModelSpec* spec_;
  const PanelDataset* data_;
  LikelihoodMode mode_;
  SolverConfig cfg_;
  std::optional<EmissionMatrix> emission_;
  std::optional<InitialDistribution> init_;
  std::size_t threads_;
  LikelihoodPlan plan_;
};

inline LoglikResult dataset_loglik(const ParameterSet& ps, const ModelSpec& spec, const PanelDataset& data,
                                   LikelihoodMode mode, const std::optional<EmissionMatrix>& emission,
                                   const std::optional<InitialDistribution>& init, const SolverConfig& cfg,
                                   std::size_t threads = 1) {
  if (data.empty()) return {};
  return PanelLikelihood(spec, data, mode, cfg, emission, init, threads).evaluate(ps);
}

namespace detail {
inline PanelDataset single_subject(const ModelSpec& spec, const Subject& s) {
  std::vector<std::string> names = spec.covariate_names();
  return PanelDataset(spec.states(), std::move(names), {s});
}
}  // namespace detail

inline double subject_loglik_observed(const ParameterSet& ps, const ModelSpec& spec, const Subject& subject,
                                      const SolverConfig& cfg) {
  const auto data = detail::single_subject(spec, subject);
  return PanelLikelihood(spec, data, LikelihoodMode::observed, cfg).evaluate(ps).value;
}

inline double subject_loglik_hidden(const ParameterSet& ps, const ModelSpec& spec, const EmissionMatrix& emission,
                                    const Vector& pi0, const Subject& subject, const SolverConfig& cfg) {
  const auto data = detail::single_subject(spec, subject);
  return PanelLikelihood(spec, data, LikelihoodMode::hidden, cfg, emission, InitialDistribution(pi0))
      .evaluate(ps)
      .value;
}

// Explicit sum over every latent path. Test oracle; refuses more than 1e6 paths.
inline double brute_force_hidden_loglik(const ParameterSet& ps, const ModelSpec& spec, const EmissionMatrix& emission,
                                        const Vector& pi0, const Subject& subject, const SolverConfig& cfg) {
  const auto& states = spec.states();
  const int nt = states.n_transient();
  validate_subject(subject, states, spec.n_covariates());
  const auto& visits = subject.visits;
  const std::size_t m = visits.size();

  // Latent candidates per visit: absorbing observations are error-free.
  std::vector<std::vector<int>> candidates(m);
  double n_paths = 1.0;
  for (std::size_t j = 0; j < m; ++j) {
    if (states.is_absorbing(visits[j].observed_state)) {
      candidates[j] = {visits[j].observed_state};
    } else {
      for (int c = 0; c < nt; ++c) candidates[j].push_back(c);
      n_paths *= nt;
    }
  }
  if (n_paths > 1e6) throw EstimationError("brute-force enumeration refused: more than 1e6 latent paths");

  IntensityFunction q(ps, spec.transitions(), subject.covariates);
  std::vector<Matrix> p(m > 0 ? m - 1 : 0);
  for (std::size_t j = 0; j + 1 < m; ++j) {
    p[j] = transition_probability(ps, spec.transitions(), subject.covariates, visits[j].age, visits[j + 1].age, cfg).p();
  }

  std::vector<std::size_t> idx(m, 0);
  double total = 0.0;
  for (;;) {
    double prob = 1.0;
    const int c0 = candidates[0][idx[0]];
    prob *= pi0[c0] * emission(c0, visits[0].observed_state);
    for (std::size_t j = 1; j < m && prob != 0.0; ++j) {
      const int prev = candidates[j - 1][idx[j - 1]];
      const int cur = candidates[j][idx[j]];
      if (visits[j].is_exact_death) {
        prob *= detail::death_density_row(p[j - 1], prev, cur, hazard_sample_age(visits[j - 1].age, visits[j].age, cfg), q,
                                          states);
      } else {
        const double e = states.is_absorbing(cur) ? 1.0 : emission(cur, visits[j].observed_state);
        prob *= p[j - 1](prev, cur) * e;
      }
    }
    total += prob;
    std::size_t pos = 0;
    while (pos < m && ++idx[pos] == candidates[pos].size()) {
      idx[pos] = 0;
      ++pos;
    }
    if (pos == m) break;
  }
  return total > 0.0 ? std::log(total) : kNegInf;
}

}  // namespace cthmm
