#pragma once

// Fully observed trajectories (exact transition times and states) and their
// competing-risks log-likelihood.

#include <cmath>
#include <cstddef>
#include <limits>
#include <string>
#include <utility>
#include <vector>

#include "cthmm/errors.hpp"
#include "cthmm/model.hpp"

namespace cthmm {

struct PathPoint {
  int state = 0;
  double age = 0.0;  // entry time into `state`
  friend bool operator==(const PathPoint&, const PathPoint&) = default;
};

// path.front().age is the entry age. A path either ends with an absorbing
// state (end_age equals its entry time) or is censored alive at end_age.
struct ExactTrajectory {
  std::string id;
  CovariateVector covariates;
  std::vector<PathPoint> path;
  double end_age = 0.0;

  double entry_age() const { return path.front().age; }
  int final_state() const { return path.back().state; }

  // State occupied at `age` (the last entered state with entry time <= age).
  int state_at(double age) const {
    int s = path.front().state;
    for (const auto& p : path) {
      if (p.age <= age) s = p.state;
      else break;
    }
    return s;
  }

  friend bool operator==(const ExactTrajectory&, const ExactTrajectory&) = default;
};

inline bool is_absorbed(const ExactTrajectory& tr, const StateSpace& states) {
  return states.is_absorbing(tr.final_state());
}

inline void validate_trajectory(const ExactTrajectory& tr, const StateSpace& states, const TransitionStructure& ts,
                                std::size_t n_covariates) {
  auto fail = [&](const std::string& what) { throw ArgumentError("trajectory " + tr.id + ": " + what); };
  if (tr.path.empty()) fail("empty path");
  if (tr.covariates.size() != n_covariates) fail("wrong number of covariates");
  if (!states.is_transient(tr.path.front().state)) fail("must start in a transient state");
  for (std::size_t k = 0; k < tr.path.size(); ++k) {
    const auto& p = tr.path[k];
    if (!states.contains(p.state) || !std::isfinite(p.age)) fail("invalid path point");
    if (k > 0) {
      if (!(p.age > tr.path[k - 1].age)) fail("times not strictly increasing");
      if (!ts.index_of(tr.path[k - 1].state, p.state)) fail("path uses a disallowed transition");
    }
    if (states.is_absorbing(p.state) && k + 1 != tr.path.size()) fail("absorbing state is not terminal");
  }
  if (states.is_absorbing(tr.final_state())) {
    if (tr.end_age != tr.path.back().age) fail("absorbed path must end at the absorption time");
  } else if (!(tr.end_age >= tr.path.back().age)) {
    fail("censoring age precedes the last transition");
  }
}

class ExactDataset {
 public:
  ExactDataset() = default;
  ExactDataset(StateSpace states, TransitionStructure ts, std::vector<std::string> covariate_names,
               std::vector<ExactTrajectory> trajectories)
      : states_(std::move(states)),
        transitions_(std::move(ts)),
        covariate_names_(std::move(covariate_names)),
        trajectories_(std::move(trajectories)) {
    for (const auto& t : trajectories_) validate_trajectory(t, states_, transitions_, covariate_names_.size());
  }

  const StateSpace& states() const { return states_; }
  const TransitionStructure& transitions() const { return transitions_; }
  const std::vector<std::string>& covariate_names() const { return covariate_names_; }
  const std::vector<ExactTrajectory>& trajectories() const { return trajectories_; }
  std::size_t size() const { return trajectories_.size(); }
  bool empty() const { return trajectories_.empty(); }

  friend bool operator==(const ExactDataset&, const ExactDataset&) = default;

 private:
  StateSpace states_;
  TransitionStructure transitions_;
  std::vector<std::string> covariate_names_;
  std::vector<ExactTrajectory> trajectories_;
};

// Sum over sojourns of -sum_j H_ij(entry, exit) + ln q_ij*(exit) for the
// realised transition; censored sojourns contribute the survival term only.
inline double exact_loglik(const ParameterSet& ps, const TransitionStructure& ts, const ExactTrajectory& tr) {
  double ll = 0.0;
  for (std::size_t k = 0; k < tr.path.size(); ++k) {
    const int s = tr.path[k].state;
    const double a = tr.path[k].age;
    const bool moved = k + 1 < tr.path.size();
    const double b = moved ? tr.path[k + 1].age : tr.end_age;
    if (!moved && b == a) break;
    for (std::size_t j = 0; j < ts.size(); ++j) {
      if (ts[j].from == s) ll -= cumulative_hazard(ps.per_transition[j], a, b, tr.covariates);
    }
    if (moved) {
      const auto idx = ts.index_of(s, tr.path[k + 1].state);
      if (!idx) return -std::numeric_limits<double>::infinity();
      const auto& p = ps.per_transition[static_cast<std::size_t>(*idx)];
      ll += p.log_rate + p.shape * b + linear_predictor(p, tr.covariates);
    }
  }
  return ll;
}

inline double exact_loglik(const ParameterSet& ps, const ExactDataset& data) {
  double ll = 0.0;
  for (const auto& tr : data.trajectories()) ll += exact_loglik(ps, data.transitions(), tr);
  return ll;
}

}  // namespace cthmm
