#pragma once

// Shared fixtures for the test binaries.

#include <algorithm>
#include <cmath>
#include <vector>

#include "cthmm/model.hpp"
#include "cthmm/rng.hpp"
#include "cthmm/simulate.hpp"

namespace cthmm::testing {

inline ModelSpec illness_death_spec(std::size_t n_covariates = 3) {
  StateSpace states(2, 1, {"A", "B", "Death"});
  TransitionStructure ts(states, {{0, 1}, {0, 2}, {1, 2}});
  std::vector<std::string> names;
  for (std::size_t c = 0; c < n_covariates; ++c) names.push_back("x" + std::to_string(c + 1));
  return ModelSpec(states, ts, names);
}

// Gompertz parameters with hazards of realistic size over ages 50..110.
inline ParameterSet random_gompertz(Rng& rng, std::size_t n_transitions, std::size_t n_covariates) {
  ParameterSet ps;
  for (std::size_t k = 0; k < n_transitions; ++k) {
    TransitionParams p;
    p.shape = rng.uniform(0.0, 0.15);
    // hazard at age 80 between 0.005 and 0.3 per year
    p.log_rate = std::log(rng.uniform(0.005, 0.3)) - p.shape * 80.0;
    for (std::size_t c = 0; c < n_covariates; ++c) p.betas.push_back(rng.uniform(-0.5, 0.5));
    ps.per_transition.push_back(p);
  }
  return ps;
}

inline CovariateVector random_binary_covariates(Rng& rng, std::size_t n) {
  CovariateVector x;
  for (std::size_t c = 0; c < n; ++c) x.push_back(rng.bernoulli(0.5) ? 1.0 : 0.0);
  return x;
}

// One-sample KS test against Uniform(0, 1). Returns the asymptotic p-value
// with Stephens' small-sample correction.
inline double ks_uniform_pvalue(std::vector<double> u) {
  std::sort(u.begin(), u.end());
  const double n = static_cast<double>(u.size());
  double d = 0.0;
  for (std::size_t i = 0; i < u.size(); ++i) {
    const double lo = static_cast<double>(i) / n;
    const double hi = static_cast<double>(i + 1) / n;
    d = std::max({d, u[i] - lo, hi - u[i]});
  }
  const double x = d * (std::sqrt(n) + 0.12 + 0.11 / std::sqrt(n));
  if (x < 0.2) return 1.0;
  double p = 0.0;
  for (int k = 1; k <= 100; ++k) {
    const double term = std::exp(-2.0 * k * k * x * x);
    p += (k % 2 ? 2.0 : -2.0) * term;
    if (term < 1e-16) break;
  }
  return std::clamp(p, 0.0, 1.0);
}

inline double max_abs_diff(const Matrix& a, const Matrix& b) { return (a - b).cwiseAbs().maxCoeff(); }

}  // namespace cthmm::testing
