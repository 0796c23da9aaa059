#pragma once

// Central finite differences and a BFGS minimiser driven by them.

#include <Eigen/Dense>

#include <algorithm>
#include <atomic>
#include <cmath>
#include <cstddef>
#include <functional>
#include <limits>
#include <string>
#include <vector>

#include "cthmm/errors.hpp"
#include "cthmm/model.hpp"
#include "cthmm/parallel.hpp"

namespace cthmm {

using Objective = std::function<double(const Vector&)>;

// Probe offset for coordinate i: step * max(|v_i|, 1), rounded so that
// v_i + h is exactly representable.
inline double fd_offset(double vi, double step) {
  const double h = step * std::max(std::abs(vi), 1.0);
  volatile double probe = vi + h;
  return probe - vi;
}

namespace detail {
inline double checked(double value, std::size_t coordinate) {
  if (!std::isfinite(value)) {
    if (coordinate == static_cast<std::size_t>(-1)) throw EstimationError("objective is not finite at the base point");
    throw EstimationError("objective is not finite when perturbing coordinate " + std::to_string(coordinate));
  }
  return value;
}
}  // namespace detail

struct GradientProbe {
  Vector gradient;
  Vector curvature;  // diagonal second differences from the same probes
};

inline GradientProbe numerical_gradient_probe(const Objective& f, const Vector& v, double step, double f0,
                                              std::size_t threads = 1) {
  const auto n = static_cast<std::size_t>(v.size());
  std::vector<double> plus(n), minus(n), offset(n);
  for (std::size_t i = 0; i < n; ++i) offset[i] = fd_offset(v[static_cast<Eigen::Index>(i)], step);
  parallel_for(2 * n, threads, [&](std::size_t k) {
    const std::size_t i = k / 2;
    Vector probe = v;
    probe[static_cast<Eigen::Index>(i)] += (k % 2 == 0) ? offset[i] : -offset[i];
    const double value = detail::checked(f(probe), i);
    (k % 2 == 0 ? plus : minus)[i] = value;
  });
  GradientProbe out{Vector(v.size()), Vector(v.size())};
  for (std::size_t i = 0; i < n; ++i) {
    const auto ii = static_cast<Eigen::Index>(i);
    out.gradient[ii] = (plus[i] - minus[i]) / (2.0 * offset[i]);
    out.curvature[ii] = (plus[i] - 2.0 * f0 + minus[i]) / (offset[i] * offset[i]);
  }
  return out;
}

inline Vector numerical_gradient(const Objective& f, const Vector& v, double step = 1e-5, std::size_t threads = 1) {
  const double f0 = detail::checked(f(v), static_cast<std::size_t>(-1));
  return numerical_gradient_probe(f, v, step, f0, threads).gradient;
}

// Central-difference Hessian, symmetrised.
inline Matrix numerical_hessian(const Objective& f, const Vector& v, double step = 1e-5, std::size_t threads = 1) {
  const auto n = static_cast<std::size_t>(v.size());
  const double f0 = detail::checked(f(v), static_cast<std::size_t>(-1));
  std::vector<double> offset(n);
  for (std::size_t i = 0; i < n; ++i) offset[i] = fd_offset(v[static_cast<Eigen::Index>(i)], step);

  // Probe list: per coordinate (+, -), per pair (++, +-, -+, --).
  struct Probe {
    std::size_t i, j;
    int si, sj;
  };
  std::vector<Probe> probes;
  for (std::size_t i = 0; i < n; ++i) {
    probes.push_back({i, i, +1, 0});
    probes.push_back({i, i, -1, 0});
  }
  for (std::size_t i = 0; i < n; ++i) {
    for (std::size_t j = i + 1; j < n; ++j) {
      for (int si : {+1, -1}) {
        for (int sj : {+1, -1}) probes.push_back({i, j, si, sj});
      }
    }
  }
  std::vector<double> values(probes.size());
  parallel_for(probes.size(), threads, [&](std::size_t k) {
    const auto& p = probes[k];
    Vector x = v;
    x[static_cast<Eigen::Index>(p.i)] += p.si * offset[p.i];
    if (p.sj != 0) x[static_cast<Eigen::Index>(p.j)] += p.sj * offset[p.j];
    values[k] = detail::checked(f(x), p.sj != 0 ? p.j : p.i);
  });

  Matrix h(static_cast<Eigen::Index>(n), static_cast<Eigen::Index>(n));
  std::size_t k = 0;
  for (std::size_t i = 0; i < n; ++i, k += 2) {
    h(static_cast<Eigen::Index>(i), static_cast<Eigen::Index>(i)) =
        (values[k] - 2.0 * f0 + values[k + 1]) / (offset[i] * offset[i]);
  }
  for (std::size_t i = 0; i < n; ++i) {
    for (std::size_t j = i + 1; j < n; ++j, k += 4) {
      const double d = (values[k] - values[k + 1] - values[k + 2] + values[k + 3]) / (4.0 * offset[i] * offset[j]);
      h(static_cast<Eigen::Index>(i), static_cast<Eigen::Index>(j)) = d;
      h(static_cast<Eigen::Index>(j), static_cast<Eigen::Index>(i)) = d;
    }
  }
  return 0.5 * (h + h.transpose());
}

struct BfgsOptions {
  int max_iter = 1000;
  double grad_tol = 1e-6;  // on max_i |g_i| max(|x_i|, 1) / max(|f|, 1)
  double fd_step = 1e-5;
  std::size_t threads = 1;
};

struct BfgsResult {
  Vector x;
  double f = std::numeric_limits<double>::infinity();
  Vector gradient;
  double relative_gradient = std::numeric_limits<double>::infinity();
  int iterations = 0;
  std::size_t n_evals = 0;
  bool converged = false;
  std::string message;
};

inline double relative_gradient(const Vector& g, const Vector& x, double f) {
  double worst = 0.0;
  for (Eigen::Index i = 0; i < g.size(); ++i) worst = std::max(worst, std::abs(g[i]) * std::max(std::abs(x[i]), 1.0));
  return worst / std::max(std::abs(f), 1.0);
}

// Minimises f. Non-finite objective values are treated as +infinity and
// make the line search retreat. The initial inverse Hessian is diagonal,
// taken from the curvature of the first gradient probes.
inline BfgsResult bfgs_minimize(const Objective& objective, Vector x0, const BfgsOptions& opt) {
  std::atomic<std::size_t> evals{0};
  const Objective f = [&](const Vector& x) {
    ++evals;
    double v;
    try {
      v = objective(x);
    } catch (const DomainError&) {
      v = std::numeric_limits<double>::infinity();
    } catch (const SolverError&) {
      v = std::numeric_limits<double>::infinity();
    }
    return std::isfinite(v) ? v : std::numeric_limits<double>::infinity();
  };

  BfgsResult r;
  r.x = std::move(x0);
  const auto n = r.x.size();
  r.f = f(r.x);
  if (!std::isfinite(r.f)) {
    r.message = "objective is not finite at the starting point";
    r.n_evals = evals;
    return r;
  }

  auto diagonal_inverse = [&](const Vector& curvature) {
    Matrix h0 = Matrix::Zero(n, n);
    for (Eigen::Index i = 0; i < n; ++i) {
      const double c = curvature[i];
      h0(i, i) = (std::isfinite(c) && c > 0.0) ? 1.0 / c : 1e-4 * std::max(std::abs(r.x[i]), 1.0);
    }
    return h0;
  };

  GradientProbe probe;
  try {
    probe = numerical_gradient_probe(f, r.x, opt.fd_step, r.f, opt.threads);
  } catch (const EstimationError& e) {
    r.message = e.what();
    r.n_evals = evals;
    return r;
  }
  r.gradient = probe.gradient;
  Matrix hinv = diagonal_inverse(probe.curvature);
  bool fresh_hessian = true;

  for (int it = 0; it < opt.max_iter; ++it) {
    r.relative_gradient = relative_gradient(r.gradient, r.x, r.f);
    if (r.relative_gradient <= opt.grad_tol) {
      r.converged = true;
      r.message = "gradient tolerance reached";
      break;
    }
    Vector d = -hinv * r.gradient;
    double slope = r.gradient.dot(d);
    if (!(slope < 0.0)) {
      hinv = diagonal_inverse(probe.curvature);
      fresh_hessian = true;
      d = -hinv * r.gradient;
      slope = r.gradient.dot(d);
      if (!(slope < 0.0)) {
        r.message = "no descent direction";
        break;
      }
    }

    // Backtracking line search with safeguarded quadratic interpolation.
    double alpha = 1.0;
    double f_new = std::numeric_limits<double>::infinity();
    Vector x_new;
    bool accepted = false;
    for (int ls = 0; ls < 40; ++ls) {
      x_new = r.x + alpha * d;
      f_new = f(x_new);
      if (f_new <= r.f + 1e-4 * alpha * slope) {
        accepted = true;
        break;
      }
      double next = 0.1 * alpha;
      if (std::isfinite(f_new)) {
        const double denom = 2.0 * (f_new - r.f - alpha * slope);
        if (denom > 0.0) next = std::clamp(-slope * alpha * alpha / denom, 0.1 * alpha, 0.5 * alpha);
      }
      alpha = next;
    }
    if (!accepted) {
      if (!fresh_hessian) {
        hinv = diagonal_inverse(probe.curvature);
        fresh_hessian = true;
        continue;
      }
      r.message = "line search failed to decrease the objective";
      break;
    }

    GradientProbe next_probe;
    try {
      next_probe = numerical_gradient_probe(f, x_new, opt.fd_step, f_new, opt.threads);
    } catch (const EstimationError& e) {
      r.message = e.what();
      break;
    }
    const Vector s = x_new - r.x;
    const Vector y = next_probe.gradient - r.gradient;
    r.x = x_new;
    r.f = f_new;
    r.gradient = next_probe.gradient;
    probe = next_probe;
    r.iterations = it + 1;

    const double sy = s.dot(y);
    if (sy > 1e-12 * s.norm() * y.norm()) {
      const double rho = 1.0 / sy;
      const Matrix ident = Matrix::Identity(n, n);
      hinv = (ident - rho * s * y.transpose()) * hinv * (ident - rho * y * s.transpose()) + rho * s * s.transpose();
      fresh_hessian = false;
    }
  }
  if (!r.converged && r.message.empty()) r.message = "iteration limit reached";
  r.relative_gradient = relative_gradient(r.gradient, r.x, r.f);
  if (!r.converged && r.relative_gradient <= opt.grad_tol) r.converged = true;
  r.n_evals = evals;
  return r;
}

}  // namespace cthmm
