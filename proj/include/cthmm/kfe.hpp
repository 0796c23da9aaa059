#pragma once

// Interval transition probabilities P(t0, t1) for a time-inhomogeneous
// generator, by (a) ordered products of matrix exponentials with Q held
// piecewise constant and (b) adaptive Dormand-Prince integration of
// dP/dt = P Q(t).
//
// Both solvers accept a sorted list of stop ages after t0 and return
// P(t0, s) for each stop, so one forward sweep serves every interval that
// shares a start age and covariate vector.

#include <Eigen/Dense>

#include <algorithm>
#include <cmath>
#include <cstddef>
#include <span>
#include <sstream>
#include <string>
#include <vector>

#include "cthmm/errors.hpp"
#include "cthmm/expm.hpp"
#include "cthmm/model.hpp"

namespace cthmm {

enum class SolverMethod { piecewise, ode };

// Where Q(t) is sampled inside each piecewise-constant sub-interval.
enum class GridEvaluation { left, midpoint };

struct SolverConfig {
  SolverMethod method = SolverMethod::ode;
  double grid_step = 1.0;  // years
  GridEvaluation evaluation = GridEvaluation::left;
  double rtol = 1e-8;
  double atol = 1e-10;
  std::size_t max_steps = 100000;

  void validate() const {
    if (!(grid_step > 0.0) || !std::isfinite(grid_step)) throw ArgumentError("solver.grid_step must be > 0");
    if (!(rtol > 0.0) || !(atol > 0.0)) throw ArgumentError("solver tolerances must be > 0");
    if (max_steps == 0) throw ArgumentError("solver.max_steps must be > 0");
  }
};

inline const char* to_string(SolverMethod m) { return m == SolverMethod::ode ? "ode" : "piecewise"; }

class TransitionProbabilityMatrix {
 public:
  TransitionProbabilityMatrix(Matrix p, double t0, double t1) : p_(std::move(p)), t0_(t0), t1_(t1) {}
  const Matrix& p() const { return p_; }
  double t0() const { return t0_; }
  double t1() const { return t1_; }
  double operator()(int i, int j) const { return p_(i, j); }

 private:
  Matrix p_;
  double t0_;
  double t1_;
};

// Counters a caller may pass to the solvers.
struct SolverDiagnostics {
  std::size_t accepted_steps = 0;
  std::size_t rejected_steps = 0;
  std::size_t renormalized_rows = 0;
};

namespace detail {

inline void check_stops(double t0, std::span<const double> stops) {
  double prev = t0;
  for (double s : stops) {
    if (!std::isfinite(s) || s < prev) {
      throw ArgumentError("transition probability requested over a reversed or non-finite interval");
    }
    prev = s;
  }
}

// Clip roundoff negatives and rescale rows whose sum drifted from one.
// States without exits keep P(i, .) = e_i exactly; round-off in expm or the
// integrator would otherwise leak mass out of absorbing rows.
inline void pin_absorbing_rows(const IntensityFunction& q, std::vector<Matrix>& ps) {
  for (int i = 0; i < q.n_states(); ++i) {
    if (q.has_exit(i)) continue;
    for (auto& p : ps) {
      p.row(i).setZero();
      p(i, i) = 1.0;
    }
  }
}

inline void renormalize_rows(Matrix& p, SolverDiagnostics* diag) {
  for (Eigen::Index i = 0; i < p.rows(); ++i) {
    const double sum = p.row(i).sum();
    const bool negative = (p.row(i).array() < 0.0).any();
    if (std::abs(sum - 1.0) > 1e-12 || negative) {
      p.row(i) = p.row(i).cwiseMax(0.0);
      const double s = p.row(i).sum();
      if (s > 0.0) p.row(i) /= s;
      if (diag) ++diag->renormalized_rows;
    }
  }
}

}  // namespace detail

// P(t0, s) for each stop s, Q frozen on sub-intervals of length grid_step
// anchored at t0 (last sub-interval before a stop is shortened).
// Age at which the intensities in force at instant t are sampled, for a
// sweep that starts at t0. The ODE method uses t itself; the piecewise method
// uses the sample age of its grid step ending at t (t itself on a grid
// point), so a death density and the matching transition probabilities
// come from the same step-function hazard.
inline double hazard_sample_age(double t0, double t, const SolverConfig& cfg) {
  if (cfg.method == SolverMethod::ode) return t;
  const double dt = cfg.grid_step;
  const double eps = 1e-12 * std::max(1.0, std::abs(t0));
  long k = std::max(0L, static_cast<long>(std::floor((t - t0) / dt)) - 1);
  while (t0 + static_cast<double>(k + 1) * dt <= t + eps) ++k;
  const double left = t0 + static_cast<double>(k) * dt;
  const double rest = t - left;
  if (!(rest > eps)) return t;
  return cfg.evaluation == GridEvaluation::left ? left : left + 0.5 * rest;
}

inline std::vector<Matrix> propagate_piecewise(const IntensityFunction& q, double t0, std::span<const double> stops,
                                               const SolverConfig& cfg) {
  cfg.validate();
  detail::check_stops(t0, stops);
  const int n = q.n_states();
  const double dt = cfg.grid_step;
  const double eps = 1e-12 * std::max(1.0, std::abs(t0));
  auto sample_age = [&](double left, double width) {
    return cfg.evaluation == GridEvaluation::left ? left : left + 0.5 * width;
  };

  std::vector<Matrix> out;
  out.reserve(stops.size());
  Matrix prefix = Matrix::Identity(n, n);  // P(t0, t0 + k dt)
  Matrix qk(n, n);
  long k = 0;
  for (double s : stops) {
    while (t0 + static_cast<double>(k + 1) * dt <= s + eps) {
      const double left = t0 + static_cast<double>(k) * dt;
      q.fill(sample_age(left, dt), qk);
      prefix = prefix * matrix_exponential(dt * qk);
      ++k;
    }
    const double left = t0 + static_cast<double>(k) * dt;
    const double rest = s - left;
    if (rest > eps) {
      q.fill(sample_age(left, rest), qk);
      out.push_back(prefix * matrix_exponential(rest * qk));
    } else {
      out.push_back(prefix);
    }
  }
  detail::pin_absorbing_rows(q, out);
  return out;
}

// Dormand-Prince 5(4) with FSAL and standard step-size control; every stop is
// hit exactly.
inline std::vector<Matrix> propagate_ode(const IntensityFunction& q, double t0, std::span<const double> stops,
                                         const SolverConfig& cfg, SolverDiagnostics* diag = nullptr) {
  cfg.validate();
  detail::check_stops(t0, stops);
  const int n = q.n_states();
  std::vector<Matrix> out;
  out.reserve(stops.size());
  if (stops.empty()) return out;

  static constexpr double c2 = 1.0 / 5, c3 = 3.0 / 10, c4 = 4.0 / 5, c5 = 8.0 / 9;
  static constexpr double a21 = 1.0 / 5;
  static constexpr double a31 = 3.0 / 40, a32 = 9.0 / 40;
  static constexpr double a41 = 44.0 / 45, a42 = -56.0 / 15, a43 = 32.0 / 9;
  static constexpr double a51 = 19372.0 / 6561, a52 = -25360.0 / 2187, a53 = 64448.0 / 6561, a54 = -212.0 / 729;
  static constexpr double a61 = 9017.0 / 3168, a62 = -355.0 / 33, a63 = 46732.0 / 5247, a64 = 49.0 / 176,
                          a65 = -5103.0 / 18656;
  static constexpr double a71 = 35.0 / 384, a73 = 500.0 / 1113, a74 = 125.0 / 192, a75 = -2187.0 / 6784,
                          a76 = 11.0 / 84;
  static constexpr double e1 = 71.0 / 57600, e3 = -71.0 / 16695, e4 = 71.0 / 1920, e5 = -17253.0 / 339200,
                          e6 = 22.0 / 525, e7 = -1.0 / 40;

  Matrix p = Matrix::Identity(n, n);
  Matrix qm(n, n), k1(n, n), k2(n, n), k3(n, n), k4(n, n), k5(n, n), k6(n, n), k7(n, n);
  Matrix y(n, n), y_new(n, n), err(n, n);

  auto rhs = [&](double t, const Matrix& state, Matrix& dst) {
    q.fill(t, qm);
    dst.noalias() = state * qm;
  };

  auto error_norm = [&](const Matrix& e, const Matrix& a, const Matrix& b) {
    const auto scale = (cfg.atol + cfg.rtol * a.cwiseAbs().cwiseMax(b.cwiseAbs()).array());
    return std::sqrt((e.array() / scale).square().mean());
  };

  double t = t0;
  rhs(t, p, k1);

  // Initial step (Hairer, Norsett & Wanner II.4).
  double h;
  {
    const Matrix sc = (cfg.atol + cfg.rtol * p.cwiseAbs().array()).matrix();
    const double d0 = std::sqrt((p.array() / sc.array()).square().mean());
    const double d1 = std::sqrt((k1.array() / sc.array()).square().mean());
    double h0 = (d0 < 1e-5 || d1 < 1e-5) ? 1e-6 : 0.01 * d0 / d1;
    y = p + h0 * k1;
    rhs(t + h0, y, k2);
    const double d2 = std::sqrt(((k2 - k1).array() / sc.array()).square().mean()) / h0;
    const double h1 = (std::max(d1, d2) <= 1e-15) ? std::max(1e-6, h0 * 1e-3)
                                                  : std::pow(0.01 / std::max(d1, d2), 1.0 / 5.0);
    h = std::min(100.0 * h0, h1);
  }

  std::size_t steps = 0;
  std::size_t next = 0;
  while (next < stops.size() && stops[next] <= t) {
    out.push_back(p);
    ++next;
  }
  double fac_max = 10.0;
  while (next < stops.size()) {
    const double target = stops[next];
    if (++steps > cfg.max_steps) {
      std::ostringstream msg;
      msg << "ODE step budget (" << cfg.max_steps << ") exhausted integrating [" << t0 << ", " << target
          << "] at age " << t << "; the generator may be stiff (very large intensities)";
      throw SolverError(msg.str());
    }
    bool lands = false;
    double step = h;
    if (t + step >= target - 1e-12 * std::max(1.0, std::abs(target))) {
      step = target - t;
      lands = true;
    }
    if (step <= 0.0 || t + step == t) {
      std::ostringstream msg;
      msg << "ODE step size underflow at age " << t << " on [" << t0 << ", " << target << "]";
      throw SolverError(msg.str());
    }

    y = p + step * (a21 * k1);
    rhs(t + c2 * step, y, k2);
    y = p + step * (a31 * k1 + a32 * k2);
    rhs(t + c3 * step, y, k3);
    y = p + step * (a41 * k1 + a42 * k2 + a43 * k3);
    rhs(t + c4 * step, y, k4);
    y = p + step * (a51 * k1 + a52 * k2 + a53 * k3 + a54 * k4);
    rhs(t + c5 * step, y, k5);
    y = p + step * (a61 * k1 + a62 * k2 + a63 * k3 + a64 * k4 + a65 * k5);
    rhs(t + step, y, k6);
    y_new = p + step * (a71 * k1 + a73 * k3 + a74 * k4 + a75 * k5 + a76 * k6);
    const double t_new = lands ? target : t + step;
    rhs(t_new, y_new, k7);
    err = step * (e1 * k1 + e3 * k3 + e4 * k4 + e5 * k5 + e6 * k6 + e7 * k7);
    const double en = error_norm(err, p, y_new);

    if (en <= 1.0) {
      t = t_new;
      p = y_new;
      k1 = k7;
      if (diag) ++diag->accepted_steps;
      const double fac = en == 0.0 ? fac_max : std::min(fac_max, std::max(0.2, 0.9 * std::pow(en, -0.2)));
      h = step * fac;
      fac_max = 10.0;
      if (lands) {
        while (next < stops.size() && stops[next] <= t) {
          Matrix r = p;
          detail::renormalize_rows(r, diag);
          out.push_back(std::move(r));
          ++next;
        }
      }
    } else {
      if (diag) ++diag->rejected_steps;
      h = step * std::max(0.2, 0.9 * std::pow(en, -0.2));
      fac_max = 1.0;
    }
  }
  detail::pin_absorbing_rows(q, out);
  return out;
}

inline std::vector<Matrix> propagate(const IntensityFunction& q, double t0, std::span<const double> stops,
                                     const SolverConfig& cfg, SolverDiagnostics* diag = nullptr) {
  return cfg.method == SolverMethod::ode ? propagate_ode(q, t0, stops, cfg, diag)
                                         : propagate_piecewise(q, t0, stops, cfg);
}

inline TransitionProbabilityMatrix transition_probability_piecewise(const ParameterSet& ps,
                                                                    const TransitionStructure& ts,
                                                                    std::span<const double> x, double t0,
                                                                    double t1, const SolverConfig& cfg) {
  if (t1 < t0) throw ArgumentError("transition probability: t1 < t0");
  IntensityFunction q(ps, ts, x);
  const double stop[1] = {t1};
  return {std::move(propagate_piecewise(q, t0, stop, cfg).front()), t0, t1};
}

inline TransitionProbabilityMatrix transition_probability_ode(const ParameterSet& ps, const TransitionStructure& ts,
                                                              std::span<const double> x, double t0, double t1,
                                                              const SolverConfig& cfg,
                                                              SolverDiagnostics* diag = nullptr) {
  if (t1 < t0) throw ArgumentError("transition probability: t1 < t0");
  IntensityFunction q(ps, ts, x);
  const double stop[1] = {t1};
  return {std::move(propagate_ode(q, t0, stop, cfg, diag).front()), t0, t1};
}

inline TransitionProbabilityMatrix transition_probability(const ParameterSet& ps, const TransitionStructure& ts,
                                                          std::span<const double> x, double t0, double t1,
                                                          const SolverConfig& cfg) {
  return cfg.method == SolverMethod::ode ? transition_probability_ode(ps, ts, x, t0, t1, cfg)
                                         : transition_probability_piecewise(ps, ts, x, t0, t1, cfg);
}

}  // namespace cthmm
