#pragma once

// Maximum-likelihood fitting of panel (observed / hidden) and exact-path
// multistate models, Hessian-based standard errors and Wald intervals,
// hazard ratios and predicted state occupancy.

#include <Eigen/Dense>
#include <boost/math/distributions/normal.hpp>

#include <algorithm>
#include <cmath>
#include <cstddef>
#include <limits>
#include <optional>
#include <span>
#include <string>
#include <vector>

#include "cthmm/errors.hpp"
#include "cthmm/exact.hpp"
#include "cthmm/kfe.hpp"
#include "cthmm/likelihood.hpp"
#include "cthmm/model.hpp"
#include "cthmm/optim.hpp"

namespace cthmm {

enum class FitMode { observed, hidden, exact_reference };

inline const char* to_string(FitMode m) {
  switch (m) {
    case FitMode::observed: return "observed";
    case FitMode::hidden: return "hidden";
    case FitMode::exact_reference: return "exact_reference";
  }
  return "";
}

struct OptimizerOptions {
  int max_iter = 1000;
  double grad_tol = 1e-6;
  double finite_diff_step = 1e-5;  // relative
};

struct FitOptions {
  FitMode mode = FitMode::observed;
  SolverConfig solver;
  OptimizerOptions optimizer;
  double ci_level = 0.95;
  std::optional<ParameterSet> init;  // nullopt: crude-rate default
  std::optional<EmissionMatrix> emission;
  std::optional<InitialDistribution> initial;
  std::size_t threads = 1;

  void validate() const {
    if (!(ci_level > 0.0 && ci_level < 1.0)) throw ArgumentError("ci_level must lie in (0, 1)");
    solver.validate();
    if (optimizer.max_iter < 0 || !(optimizer.grad_tol > 0.0) || !(optimizer.finite_diff_step > 0.0)) {
      throw ArgumentError("invalid optimizer settings");
    }
  }
};

struct ConditionReport {
  bool available = false;
  bool positive_definite = false;
  double min_eigenvalue = std::numeric_limits<double>::quiet_NaN();
  double max_eigenvalue = std::numeric_limits<double>::quiet_NaN();
  double condition_number = std::numeric_limits<double>::quiet_NaN();
  std::string note;
};

struct FitResult {
  ModelSpec spec;
  FitMode mode = FitMode::observed;
  SolverConfig solver;
  OptimizerOptions optimizer;
  double ci_level = 0.95;

  ParameterSet estimates;
  Vector flat_estimates;
  Vector standard_errors;
  Vector ci_lower;
  Vector ci_upper;
  Matrix covariance;  // empty when the Hessian is not positive definite
  std::vector<bool> coordinate_ok;
  double loglik = kNegInf;
  bool converged = false;
  int iterations = 0;
  std::size_t n_evals = 0;
  double relative_gradient = std::numeric_limits<double>::quiet_NaN();
  double reference_age = 0.0;
  ConditionReport condition_diag;
  std::string message;

  bool has_standard_errors() const {
    return standard_errors.size() > 0 && standard_errors.allFinite();
  }
  std::string label(std::size_t i) const {
    const auto& r = spec.free_parameters().at(i);
    return "T" + std::to_string(r.transition + 1) + "." + spec.parameter_name(r);
  }
};

inline double normal_quantile(double p) {
  return boost::math::quantile(boost::math::normal_distribution<double>(), p);
}

// Optimizer coordinates: log rates re-centred at a reference age,
// log_rate_c = log_rate + shape * t_ref, which removes most of the
// rate/shape correlation at ages far from zero.
class CenteredParameterization {
 public:
  CenteredParameterization(const ModelSpec& spec, double reference_age) : spec_(&spec), t_ref_(reference_age) {}

  double reference_age() const { return t_ref_; }

  ParameterSet to_model(const Vector& z) const {
    ParameterSet ps = unpack(z, *spec_);
    for (auto& p : ps.per_transition) p.log_rate -= p.shape * t_ref_;
    return ps;
  }

  Vector to_optimizer(ParameterSet ps) const {
    for (auto& p : ps.per_transition) p.log_rate += p.shape * t_ref_;
    return pack(ps, *spec_);
  }

  // d(model flat) / d(optimizer flat).
  Matrix jacobian() const {
    const auto& refs = spec_->free_parameters();
    const auto n = static_cast<Eigen::Index>(refs.size());
    Matrix j = Matrix::Identity(n, n);
    for (std::size_t a = 0; a < refs.size(); ++a) {
      if (refs[a].kind != ParamKind::log_rate) continue;
      const auto shape = spec_->flat_index({refs[a].transition, ParamKind::shape, -1});
      if (shape) j(static_cast<Eigen::Index>(a), static_cast<Eigen::Index>(*shape)) = -t_ref_;
    }
    return j;
  }

 private:
  const ModelSpec* spec_;
  double t_ref_;
};

namespace detail {

struct CrudeCounts {
  std::vector<double> events;
  std::vector<double> exposure;
};

inline CrudeCounts panel_crude_counts(const ModelSpec& spec, const PanelDataset& data) {
  const auto& ts = spec.transitions();
  CrudeCounts c{std::vector<double>(ts.size(), 0.0), std::vector<double>(ts.size(), 0.0)};
  for (const auto& s : data.subjects()) {
    for (std::size_t j = 0; j + 1 < s.visits.size(); ++j) {
      const int a = s.visits[j].observed_state;
      const int b = s.visits[j + 1].observed_state;
      const double len = s.visits[j + 1].age - s.visits[j].age;
      for (std::size_t k = 0; k < ts.size(); ++k) {
        if (ts[k].from == a) c.exposure[k] += len;
      }
      if (a != b) {
        if (auto k = ts.index_of(a, b)) c.events[static_cast<std::size_t>(*k)] += 1.0;
      }
    }
  }
  return c;
}

inline CrudeCounts exact_crude_counts(const ExactDataset& data) {
  const auto& ts = data.transitions();
  CrudeCounts c{std::vector<double>(ts.size(), 0.0), std::vector<double>(ts.size(), 0.0)};
  for (const auto& tr : data.trajectories()) {
    for (std::size_t k = 0; k < tr.path.size(); ++k) {
      const bool moved = k + 1 < tr.path.size();
      const double len = (moved ? tr.path[k + 1].age : tr.end_age) - tr.path[k].age;
      for (std::size_t j = 0; j < ts.size(); ++j) {
        if (ts[j].from == tr.path[k].state) c.exposure[j] += len;
      }
      if (moved) {
        if (auto j = ts.index_of(tr.path[k].state, tr.path[k + 1].state)) c.events[static_cast<std::size_t>(*j)] += 1.0;
      }
    }
  }
  return c;
}

// Hazard at the reference age equals events / exposure, shape 0.05, betas 0.
inline ParameterSet crude_initial(const ModelSpec& spec, const CrudeCounts& c, double t_ref) {
  ParameterSet ps = spec.zero_parameters();
  for (std::size_t k = 0; k < spec.n_transitions(); ++k) {
    const int t = static_cast<int>(k);
    const double events = std::max(c.events[k], 0.5);
    const double exposure = std::max(c.exposure[k], 1e-8);
    const ParamRef shape{t, ParamKind::shape, -1};
    const double shape_value = spec.fixed_value(shape).value_or(0.05);
    ps.set(shape, shape_value);
    const ParamRef rate{t, ParamKind::log_rate, -1};
    if (!spec.fixed_value(rate)) ps.set(rate, std::log(events / exposure) - shape_value * t_ref);
  }
  return ps;
}

inline double panel_reference_age(const PanelDataset& data) {
  double sum = 0.0;
  std::size_t n = 0;
  for (const auto& s : data.subjects()) {
    for (const auto& v : s.visits) {
      sum += v.age;
      ++n;
    }
  }
  return n ? std::round(sum / static_cast<double>(n)) : 0.0;
}

inline double exact_reference_age(const ExactDataset& data) {
  double sum = 0.0;
  for (const auto& tr : data.trajectories()) sum += 0.5 * (tr.entry_age() + tr.end_age);
  return data.empty() ? 0.0 : std::round(sum / static_cast<double>(data.size()));
}

// Runs BFGS on the negative log-likelihood in centred coordinates and
// derives standard errors from the numerical Hessian at the optimum.
inline FitResult maximize(const ModelSpec& spec, const FitOptions& opts, const ParameterSet& start, double t_ref,
                          const std::function<double(const ParameterSet&)>& loglik) {
  FitResult res;
  res.spec = spec;
  res.mode = opts.mode;
  res.solver = opts.solver;
  res.optimizer = opts.optimizer;
  res.ci_level = opts.ci_level;
  res.reference_age = t_ref;

  const CenteredParameterization param(spec, t_ref);
  const Objective negll = [&](const Vector& z) { return -loglik(param.to_model(z)); };

  BfgsOptions bo;
  bo.max_iter = opts.optimizer.max_iter;
  bo.grad_tol = opts.optimizer.grad_tol;
  bo.fd_step = opts.optimizer.finite_diff_step;
  bo.threads = opts.threads;
  const auto opt = bfgs_minimize(negll, param.to_optimizer(start), bo);

  res.estimates = param.to_model(opt.x);
  res.flat_estimates = pack(res.estimates, spec);
  res.loglik = -opt.f;
  res.converged = opt.converged;
  res.iterations = opt.iterations;
  res.n_evals = opt.n_evals;
  res.relative_gradient = opt.relative_gradient;
  res.message = opt.message;

  const auto n = res.flat_estimates.size();
  const double nan = std::numeric_limits<double>::quiet_NaN();
  res.standard_errors = Vector::Constant(n, nan);
  res.ci_lower = Vector::Constant(n, nan);
  res.ci_upper = Vector::Constant(n, nan);
  res.coordinate_ok.assign(static_cast<std::size_t>(n), true);

  // A log rate drifting this low means the transition has (almost) no events.
  const auto& refs = spec.free_parameters();
  for (std::size_t i = 0; i < refs.size(); ++i) {
    if (refs[i].kind == ParamKind::log_rate && opt.x[static_cast<Eigen::Index>(i)] < -25.0) {
      res.coordinate_ok[i] = false;
      res.converged = false;
      res.message += "; log rate of transition " + spec.transitions().name(static_cast<std::size_t>(refs[i].transition)) +
                     " diverging (no events?)";
    }
  }
  if (!std::isfinite(opt.f)) return res;

  Matrix hz;
  try {
    hz = numerical_hessian(negll, opt.x, opts.optimizer.finite_diff_step, opts.threads);
    res.n_evals += 1 + 2 * static_cast<std::size_t>(n) * static_cast<std::size_t>(n);
  } catch (const Error& e) {
    res.condition_diag.note = std::string("Hessian unavailable: ") + e.what();
    return res;
  }
  Eigen::SelfAdjointEigenSolver<Matrix> eig(hz);
  auto& cd = res.condition_diag;
  cd.available = true;
  cd.min_eigenvalue = eig.eigenvalues().minCoeff();
  cd.max_eigenvalue = eig.eigenvalues().maxCoeff();
  cd.condition_number = cd.min_eigenvalue > 0.0 ? cd.max_eigenvalue / cd.min_eigenvalue : std::numeric_limits<double>::infinity();
  cd.positive_definite = cd.min_eigenvalue > 0.0 && std::isfinite(cd.condition_number) && cd.condition_number < 1e14;
  if (!cd.positive_definite) {
    cd.note = "negative Hessian of the log-likelihood is not positive definite; standard errors unavailable";
    return res;
  }
  const Matrix cov_z = eig.eigenvectors() * eig.eigenvalues().cwiseInverse().asDiagonal() * eig.eigenvectors().transpose();
  const Matrix jac = param.jacobian();
  res.covariance = jac * cov_z * jac.transpose();
  const double zq = normal_quantile(0.5 + 0.5 * opts.ci_level);
  for (Eigen::Index i = 0; i < n; ++i) {
    const double se = std::sqrt(std::max(res.covariance(i, i), 0.0));
    res.standard_errors[i] = se;
    res.ci_lower[i] = res.flat_estimates[i] - zq * se;
    res.ci_upper[i] = res.flat_estimates[i] + zq * se;
  }
  return res;
}

}  // namespace detail

// Default starting point for a panel fit.
inline ParameterSet default_initial(const ModelSpec& spec, const PanelDataset& data) {
  return detail::crude_initial(spec, detail::panel_crude_counts(spec, data), detail::panel_reference_age(data));
}

inline ParameterSet default_initial(const ModelSpec& spec, const ExactDataset& data) {
  return detail::crude_initial(spec, detail::exact_crude_counts(data), detail::exact_reference_age(data));
}

// Panel-data fit (observed or hidden mode). The solver method in
// opts.solver selects the piecewise-exponential or ODE likelihood.
inline FitResult fit(const ModelSpec& spec, const PanelDataset& data, const FitOptions& opts) {
  opts.validate();
  if (data.empty()) throw ArgumentError("fit: empty dataset");
  if (opts.mode == FitMode::exact_reference) throw ArgumentError("fit: use fit_exact_reference for exact data");
  const auto mode = opts.mode == FitMode::hidden ? LikelihoodMode::hidden : LikelihoodMode::observed;
  const PanelLikelihood lik(spec, data, mode, opts.solver, opts.emission, opts.initial, 1);
  const double t_ref = detail::panel_reference_age(data);
  const ParameterSet start = opts.init ? *opts.init : default_initial(spec, data);
  spec.validate(start);
  return detail::maximize(spec, opts, start, t_ref, [&](const ParameterSet& ps) { return lik(ps); });
}

// Benchmark fit on fully observed paths (exact times and states).
inline FitResult fit_exact_reference(const ModelSpec& spec, const ExactDataset& data, FitOptions opts) {
  opts.mode = FitMode::exact_reference;
  opts.validate();
  if (data.empty()) throw ArgumentError("fit_exact_reference: empty dataset");
  if (!(data.transitions().allowed().size() == spec.transitions().size())) {
    throw ArgumentError("fit_exact_reference: transition structure mismatch");
  }
  const double t_ref = detail::exact_reference_age(data);
  const ParameterSet start = opts.init ? *opts.init : default_initial(spec, data);
  spec.validate(start);
  return detail::maximize(spec, opts, start, t_ref, [&](const ParameterSet& ps) { return exact_loglik(ps, data); });
}

struct HazardRatio {
  std::string covariate;
  double hr = 1.0;
  double ci_lower = 1.0;
  double ci_upper = 1.0;
};

inline std::vector<HazardRatio> hazard_ratios(const FitResult& fit, std::size_t transition) {
  const auto& spec = fit.spec;
  if (transition >= spec.n_transitions()) throw ArgumentError("hazard_ratios: unknown transition");
  const double zq = normal_quantile(0.5 + 0.5 * fit.ci_level);
  std::vector<HazardRatio> out;
  for (std::size_t c = 0; c < spec.n_covariates(); ++c) {
    const ParamRef ref{static_cast<int>(transition), ParamKind::beta, static_cast<int>(c)};
    const double beta = fit.estimates.get(ref);
    double se = 0.0;
    if (auto idx = spec.flat_index(ref)) {
      se = fit.standard_errors.size() > 0 ? fit.standard_errors[static_cast<Eigen::Index>(*idx)]
                                          : std::numeric_limits<double>::quiet_NaN();
      if (!std::isfinite(se)) {
        throw EstimationError("hazard_ratios: standard error unavailable for " + spec.parameter_name(ref));
      }
    }
    out.push_back({spec.covariate_names()[c], std::exp(beta), std::exp(beta - zq * se), std::exp(beta + zq * se)});
  }
  return out;
}

// Rows P(start_age, a)[start_state, .] for each age a of the grid.
inline std::vector<Vector> predict_occupancy(const FitResult& fit, std::span<const double> x, double start_age,
                                             int start_state, std::span<const double> age_grid) {
  const auto& spec = fit.spec;
  if (!spec.states().contains(start_state)) throw ArgumentError("predict_occupancy: unknown start state");
  if (age_grid.empty() || age_grid.front() != start_age) {
    throw ArgumentError("predict_occupancy: grid must start at the start age");
  }
  for (std::size_t i = 1; i < age_grid.size(); ++i) {
    if (!(age_grid[i] > age_grid[i - 1])) throw ArgumentError("predict_occupancy: grid must be increasing");
  }
  const IntensityFunction q(fit.estimates, spec.transitions(), x);
  SolverConfig cfg = fit.solver;
  const auto ps = propagate(q, start_age, age_grid, cfg);
  std::vector<Vector> out;
  out.reserve(ps.size());
  for (const auto& p : ps) out.push_back(p.row(start_state).transpose());
  return out;
}

}  // namespace cthmm
