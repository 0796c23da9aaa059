#pragma once

// Latent class analysis for binary disease indicators (EM with random
// restarts), per-row posterior membership, and the emission matrix derived
// from posterior memberships of modal assignments.

#include <Eigen/Dense>

#include <algorithm>
#include <cmath>
#include <cstddef>
#include <cstdint>
#include <map>
#include <numeric>
#include <span>
#include <string>
#include <vector>

#include "cthmm/errors.hpp"
#include "cthmm/likelihood.hpp"
#include "cthmm/rng.hpp"

namespace cthmm {

inline constexpr double kItemProbFloor = 1e-6;

struct LcaModel {
  Vector class_weights;  // C
  Matrix item_probs;     // C x R
  double loglik = kNegInf;
  int iterations = 0;
  bool converged = false;
  std::vector<double> loglik_trace;  // observed-data log-likelihood per EM iteration

  int n_classes() const { return static_cast<int>(class_weights.size()); }
  int n_items() const { return static_cast<int>(item_probs.cols()); }
};

struct LcaOptions {
  int n_classes = 2;
  int max_iter = 500;
  double tol = 1e-6;
  std::uint64_t seed = 1;
  int restarts = 10;
  std::size_t threads = 1;
};

struct PosteriorAssignment {
  Vector posterior;
  int modal_class = 0;
};

namespace detail {

struct CompressedRows {
  std::vector<BinaryRow> rows;
  std::vector<double> counts;
  double total = 0.0;
};

inline CompressedRows compress(std::span<const BinaryRow> y) {
  std::map<BinaryRow, double> tally;
  for (const auto& r : y) tally[r] += 1.0;
  CompressedRows c;
  for (auto& [row, n] : tally) {
    c.rows.push_back(row);
    c.counts.push_back(n);
    c.total += n;
  }
  return c;
}

inline Vector class_log_densities(const Vector& weights, const Matrix& log_p, const Matrix& log_q,
                                  const BinaryRow& row) {
  const auto c = weights.size();
  Vector out(c);
  for (Eigen::Index k = 0; k < c; ++k) {
    double s = std::log(weights[k]);
    for (std::size_t r = 0; r < row.size(); ++r) {
      s += row[r] ? log_p(k, static_cast<Eigen::Index>(r)) : log_q(k, static_cast<Eigen::Index>(r));
    }
    out[k] = s;
  }
  return out;
}

inline double log_sum_exp(const Vector& v) {
  const double m = v.maxCoeff();
  if (!std::isfinite(m)) return m;
  return m + std::log((v.array() - m).exp().sum());
}

struct EmRun {
  LcaModel model;
  bool degenerate = false;
};

inline EmRun run_em(const CompressedRows& data, int n_classes, int n_items, const LcaOptions& opt, Rng& rng) {
  EmRun run;
  auto& m = run.model;
  m.class_weights = Vector::Constant(n_classes, 1.0 / n_classes);
  m.item_probs.resize(n_classes, n_items);
  for (int k = 0; k < n_classes; ++k) {
    for (int r = 0; r < n_items; ++r) m.item_probs(k, r) = rng.uniform(0.1, 0.9);
  }
  if (n_classes == 1) m.item_probs.setConstant(0.5);

  const std::size_t nu = data.rows.size();
  std::vector<Vector> post(nu);
  std::vector<double> row_ll(nu);
  double prev = kNegInf;
  for (int it = 0; it < opt.max_iter; ++it) {
    const Matrix log_p = m.item_probs.array().log();
    const Matrix log_q = (1.0 - m.item_probs.array()).log();
    parallel_for(nu, opt.threads, [&](std::size_t u) {
      const Vector ld = class_log_densities(m.class_weights, log_p, log_q, data.rows[u]);
      const double lse = log_sum_exp(ld);
      row_ll[u] = lse;
      post[u] = (ld.array() - lse).exp();
    });
    double ll = 0.0;
    for (std::size_t u = 0; u < nu; ++u) ll += data.counts[u] * row_ll[u];
    m.loglik_trace.push_back(ll);
    m.loglik = ll;
    m.iterations = it + 1;
    if (it > 0 && ll - prev < opt.tol) {
      m.converged = true;
      break;
    }
    prev = ll;

    // M-step: exact maximiser within [floor, 1 - floor].
    Vector mass = Vector::Zero(n_classes);
    Matrix hits = Matrix::Zero(n_classes, n_items);
    for (std::size_t u = 0; u < nu; ++u) {
      const Vector w = post[u] * data.counts[u];
      mass += w;
      for (int r = 0; r < n_items; ++r) {
        if (data.rows[u][static_cast<std::size_t>(r)]) hits.col(r) += w;
      }
    }
    if ((mass.array() / data.total < 1e-8).any()) {
      run.degenerate = true;
      return run;
    }
    m.class_weights = mass / mass.sum();
    for (int k = 0; k < n_classes; ++k) {
      for (int r = 0; r < n_items; ++r) {
        m.item_probs(k, r) = std::clamp(hits(k, r) / mass[k], kItemProbFloor, 1.0 - kItemProbFloor);
      }
    }
  }
  return run;
}

}  // namespace detail

inline PosteriorAssignment posterior(const LcaModel& m, std::span<const std::uint8_t> y_row) {
  if (static_cast<int>(y_row.size()) != m.n_items()) {
    throw ArgumentError("posterior: row has " + std::to_string(y_row.size()) + " items, model has " +
                        std::to_string(m.n_items()));
  }
  const Matrix log_p = m.item_probs.array().log();
  const Matrix log_q = (1.0 - m.item_probs.array()).log();
  const BinaryRow row(y_row.begin(), y_row.end());
  const Vector ld = detail::class_log_densities(m.class_weights, log_p, log_q, row);
  PosteriorAssignment a;
  a.posterior = (ld.array() - detail::log_sum_exp(ld)).exp();
  a.posterior /= a.posterior.sum();
  a.modal_class = 0;
  for (Eigen::Index k = 1; k < a.posterior.size(); ++k) {
    if (a.posterior[k] > a.posterior[a.modal_class]) a.modal_class = static_cast<int>(k);  // ties -> lower index
  }
  return a;
}

// Relabels classes in ascending order of mean item probability, so the
// highest-burden class comes last.
inline LcaModel align_by_burden(LcaModel m) {
  const int c = m.n_classes();
  std::vector<int> order(static_cast<std::size_t>(c));
  std::iota(order.begin(), order.end(), 0);
  const Vector burden = m.item_probs.rowwise().mean();
  std::stable_sort(order.begin(), order.end(), [&](int a, int b) { return burden[a] < burden[b]; });
  LcaModel out = m;
  for (int k = 0; k < c; ++k) {
    out.class_weights[k] = m.class_weights[order[static_cast<std::size_t>(k)]];
    out.item_probs.row(k) = m.item_probs.row(order[static_cast<std::size_t>(k)]);
  }
  return out;
}

// Best of opt.restarts EM runs (highest log-likelihood), classes aligned by
// burden. Degenerate runs (a class weight below 1e-8) are discarded and
// redrawn, up to 5 * restarts attempts in total.
inline LcaModel fit_lca(std::span<const BinaryRow> y, const LcaOptions& opt,
                        std::vector<std::string>* warnings = nullptr) {
  if (opt.n_classes < 1) throw ArgumentError("fit_lca: n_classes must be >= 1");
  if (y.size() < static_cast<std::size_t>(opt.n_classes)) throw ArgumentError("fit_lca: fewer rows than classes");
  if (y.front().empty()) throw ArgumentError("fit_lca: rows have no items");
  const auto n_items = static_cast<int>(y.front().size());
  for (const auto& r : y) {
    if (static_cast<int>(r.size()) != n_items) throw ArgumentError("fit_lca: ragged indicator matrix");
  }
  const auto data = detail::compress(y);
  Rng rng(opt.seed, {0x1ca});
  LcaModel best;
  int good = 0;
  const int restarts = opt.n_classes == 1 ? 1 : std::max(1, opt.restarts);
  for (int attempt = 0; good < restarts && attempt < 5 * restarts; ++attempt) {
    auto run = detail::run_em(data, opt.n_classes, n_items, opt, rng);
    if (run.degenerate) {
      if (warnings) warnings->push_back("LCA restart " + std::to_string(attempt + 1) + " produced a degenerate class; redrawn");
      continue;
    }
    ++good;
    if (run.model.loglik > best.loglik) best = std::move(run.model);
  }
  if (good == 0) throw EstimationError("fit_lca: every EM run collapsed to a degenerate class");
  return align_by_burden(std::move(best));
}

enum class EmissionFormula { bayes, printed };

namespace detail {
// joint(i, j) = sum of P(C = i) over units assigned to j = mean posterior * N_j.
inline Matrix expected_joint(std::span<const Vector> posteriors, std::span<const int> assignments) {
  if (posteriors.size() != assignments.size()) throw ArgumentError("estimate_emission: length mismatch");
  if (posteriors.empty()) throw ArgumentError("estimate_emission: no units");
  const auto c = posteriors.front().size();
  Matrix joint = Matrix::Zero(c, c);
  std::vector<std::size_t> n_assigned(static_cast<std::size_t>(c), 0);
  for (std::size_t u = 0; u < posteriors.size(); ++u) {
    const int j = assignments[u];
    if (j < 0 || j >= c) throw ArgumentError("estimate_emission: assignment out of range");
    if (posteriors[u].size() != c) throw ArgumentError("estimate_emission: ragged posteriors");
    joint.col(j) += posteriors[u];
    ++n_assigned[static_cast<std::size_t>(j)];
  }
  for (Eigen::Index j = 0; j < c; ++j) {
    if (n_assigned[static_cast<std::size_t>(j)] == 0) {
      throw EstimationError("estimate_emission: no unit assigned to class " + std::to_string(j + 1));
    }
  }
  return joint;
}
}  // namespace detail

// e(i, j) = [mean P(C=i | W=j)] N_j / sum_k [mean P(C=i | W=k)] N_k.
inline EmissionMatrix estimate_emission(std::span<const Vector> posteriors, std::span<const int> assignments) {
  const Matrix joint = detail::expected_joint(posteriors, assignments);
  Matrix e = joint;
  for (Eigen::Index i = 0; i < e.rows(); ++i) {
    const double row = joint.row(i).sum();
    if (!(row > 0.0)) throw EstimationError("estimate_emission: latent class " + std::to_string(i + 1) + " has no posterior mass");
    e.row(i) /= row;
  }
  return EmissionMatrix(e);
}

// The alternative reading with N_i in the numerator and the joint
// probability P(C=i, W=k) N_k in the denominator. Not row-stochastic in
// general; exposed for comparison only.
inline Matrix emission_printed_variant(std::span<const Vector> posteriors, std::span<const int> assignments) {
  const Matrix joint = detail::expected_joint(posteriors, assignments);
  const auto c = joint.rows();
  const double n = static_cast<double>(assignments.size());
  Vector n_assigned = Vector::Zero(c);
  for (int j : assignments) n_assigned[j] += 1.0;
  Matrix e(c, c);
  for (Eigen::Index i = 0; i < c; ++i) {
    double denom = 0.0;
    for (Eigen::Index k = 0; k < c; ++k) denom += joint(i, k) / n * n_assigned[k];
    for (Eigen::Index j = 0; j < c; ++j) {
      const double mean_post = joint(i, j) / n_assigned[j];
      e(i, j) = mean_post * n_assigned[i] / denom;
    }
  }
  return e;
}

}  // namespace cthmm
