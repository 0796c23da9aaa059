#pragma once

// State space, transition structure and Gompertz proportional-hazards
// parameterisation of a multistate model, plus construction of the
// age- and covariate-dependent intensity (generator) matrix.

#include <Eigen/Dense>

#include <algorithm>
#include <cmath>
#include <cstddef>
#include <optional>
#include <span>
#include <string>
#include <utility>
#include <vector>

#include "cthmm/errors.hpp"

namespace cthmm {

using Vector = Eigen::VectorXd;
using Matrix = Eigen::MatrixXd;

// Baseline covariates, time-fixed.
using CovariateVector = std::vector<double>;

// Below this |shape| the Gompertz integrals switch to their exponential limit.
inline constexpr double kShapeLimit = 1e-10;

class StateSpace {
 public:
  StateSpace() = default;

  // Transient states occupy indices [0, n_transient); absorbing states follow.
  StateSpace(int n_transient, int n_absorbing, std::vector<std::string> labels = {})
      : n_transient_(n_transient), n_absorbing_(n_absorbing), labels_(std::move(labels)) {
    if (n_transient < 1 || n_absorbing < 1) {
      throw ArgumentError("state space needs at least one transient and one absorbing state");
    }
    if (labels_.empty()) {
      for (int s = 0; s < size(); ++s) labels_.push_back("S" + std::to_string(s + 1));
    }
    if (static_cast<int>(labels_.size()) != size()) {
      throw ArgumentError("state space: expected " + std::to_string(size()) + " labels, got " +
                          std::to_string(labels_.size()));
    }
  }

  int n_transient() const { return n_transient_; }
  int n_absorbing() const { return n_absorbing_; }
  int size() const { return n_transient_ + n_absorbing_; }
  bool contains(int s) const { return s >= 0 && s < size(); }
  bool is_transient(int s) const { return s >= 0 && s < n_transient_; }
  bool is_absorbing(int s) const { return s >= n_transient_ && s < size(); }
  const std::string& label(int s) const { return labels_.at(static_cast<std::size_t>(s)); }
  const std::vector<std::string>& labels() const { return labels_; }

  friend bool operator==(const StateSpace&, const StateSpace&) = default;

 private:
  int n_transient_ = 1;
  int n_absorbing_ = 1;
  std::vector<std::string> labels_;
};

struct Transition {
  int from = 0;
  int to = 0;
  friend bool operator==(const Transition&, const Transition&) = default;
};

// Ordered list of allowed (from, to) pairs; the position in the list is the
// transition index used everywhere else.
class TransitionStructure {
 public:
  TransitionStructure() = default;

  TransitionStructure(const StateSpace& states, std::vector<Transition> allowed)
      : n_states_(states.size()), allowed_(std::move(allowed)) {
    for (std::size_t k = 0; k < allowed_.size(); ++k) {
      const auto& tr = allowed_[k];
      if (!states.contains(tr.from) || !states.contains(tr.to)) {
        throw ArgumentError("transition " + std::to_string(k + 1) + " references an unknown state");
      }
      if (tr.from == tr.to) {
        throw ArgumentError("transition " + std::to_string(k + 1) + " is a self-loop");
      }
      if (states.is_absorbing(tr.from)) {
        throw ArgumentError("transition " + std::to_string(k + 1) + " leaves absorbing state " +
                            states.label(tr.from));
      }
      for (std::size_t j = 0; j < k; ++j) {
        if (allowed_[j] == tr) {
          throw ArgumentError("duplicate transition " + std::to_string(tr.from + 1) + "->" +
                              std::to_string(tr.to + 1));
        }
      }
    }
  }

  std::size_t size() const { return allowed_.size(); }
  int n_states() const { return n_states_; }
  const Transition& operator[](std::size_t k) const { return allowed_[k]; }
  std::span<const Transition> allowed() const { return allowed_; }

  std::optional<int> index_of(int from, int to) const {
    for (std::size_t k = 0; k < allowed_.size(); ++k) {
      if (allowed_[k].from == from && allowed_[k].to == to) return static_cast<int>(k);
    }
    return std::nullopt;
  }

  std::string name(std::size_t k) const {
    return std::to_string(allowed_[k].from + 1) + "->" + std::to_string(allowed_[k].to + 1);
  }

  friend bool operator==(const TransitionStructure&, const TransitionStructure&) = default;

 private:
  int n_states_ = 0;
  std::vector<Transition> allowed_;
};

// ln q(t | x) = log_rate + shape * t + betas . x
struct TransitionParams {
  double log_rate = 0.0;
  double shape = 0.0;
  std::vector<double> betas;

  friend bool operator==(const TransitionParams&, const TransitionParams&) = default;
};

enum class ParamKind { log_rate, shape, beta };

// Addresses one scalar parameter of a model.
struct ParamRef {
  int transition = 0;
  ParamKind kind = ParamKind::log_rate;
  int covariate = -1;  // only for ParamKind::beta
  friend bool operator==(const ParamRef&, const ParamRef&) = default;
};

struct FixedParameter {
  ParamRef ref;
  double value = 0.0;
};

struct ParameterSet {
  std::vector<TransitionParams> per_transition;

  double get(const ParamRef& r) const {
    const auto& p = per_transition.at(static_cast<std::size_t>(r.transition));
    switch (r.kind) {
      case ParamKind::log_rate: return p.log_rate;
      case ParamKind::shape: return p.shape;
      case ParamKind::beta: return p.betas.at(static_cast<std::size_t>(r.covariate));
    }
    return 0.0;
  }

  void set(const ParamRef& r, double v) {
    auto& p = per_transition.at(static_cast<std::size_t>(r.transition));
    switch (r.kind) {
      case ParamKind::log_rate: p.log_rate = v; break;
      case ParamKind::shape: p.shape = v; break;
      case ParamKind::beta: p.betas.at(static_cast<std::size_t>(r.covariate)) = v; break;
    }
  }

  friend bool operator==(const ParameterSet&, const ParameterSet&) = default;
};

// Everything that defines an estimation problem: states, transitions,
// covariates and which parameters are held at constants. The index map
// (free_parameters) fixes the optimizer's coordinate order: transition-major,
// then log_rate, shape, betas.
class ModelSpec {
 public:
  ModelSpec() = default;

  ModelSpec(StateSpace states, TransitionStructure transitions,
            std::vector<std::string> covariate_names, std::vector<FixedParameter> fixed = {})
      : states_(std::move(states)),
        transitions_(std::move(transitions)),
        covariate_names_(std::move(covariate_names)),
        fixed_(std::move(fixed)) {
    if (transitions_.n_states() != states_.size() && transitions_.size() > 0) {
      throw ArgumentError("transition structure and state space disagree on the state count");
    }
    for (const auto& f : fixed_) check_ref(f.ref);
    rebuild_index();
  }

  const StateSpace& states() const { return states_; }
  const TransitionStructure& transitions() const { return transitions_; }
  const std::vector<std::string>& covariate_names() const { return covariate_names_; }
  std::size_t n_covariates() const { return covariate_names_.size(); }
  std::size_t n_transitions() const { return transitions_.size(); }
  const std::vector<FixedParameter>& fixed() const { return fixed_; }

  // Flat coordinate -> parameter.
  const std::vector<ParamRef>& free_parameters() const { return free_; }
  std::size_t n_free() const { return free_.size(); }

  std::optional<double> fixed_value(const ParamRef& r) const {
    for (const auto& f : fixed_) {
      if (f.ref == r) return f.value;
    }
    return std::nullopt;
  }

  std::optional<std::size_t> flat_index(const ParamRef& r) const {
    for (std::size_t i = 0; i < free_.size(); ++i) {
      if (free_[i] == r) return i;
    }
    return std::nullopt;
  }

  // "log_rate", "shape" or "beta.<covariate>".
  std::string parameter_name(const ParamRef& r) const {
    switch (r.kind) {
      case ParamKind::log_rate: return "log_rate";
      case ParamKind::shape: return "shape";
      case ParamKind::beta: return "beta." + covariate_names_.at(static_cast<std::size_t>(r.covariate));
    }
    return {};
  }

  // Parses "log_rate" / "shape" / "beta.<name>" for a given transition.
  ParamRef parse_parameter(int transition, const std::string& name) const {
    ParamRef r{transition, ParamKind::log_rate, -1};
    if (name == "log_rate") {
    } else if (name == "shape") {
      r.kind = ParamKind::shape;
    } else if (name.rfind("beta.", 0) == 0) {
      const auto cov = name.substr(5);
      auto it = std::find(covariate_names_.begin(), covariate_names_.end(), cov);
      if (it == covariate_names_.end()) throw ArgumentError("unknown covariate '" + cov + "'");
      r.kind = ParamKind::beta;
      r.covariate = static_cast<int>(it - covariate_names_.begin());
    } else {
      throw ArgumentError("unknown parameter name '" + name + "'");
    }
    check_ref(r);
    return r;
  }

  // Builds a zero-initialised parameter set with fixed values applied.
  ParameterSet zero_parameters() const {
    ParameterSet ps;
    ps.per_transition.assign(transitions_.size(), TransitionParams{0.0, 0.0, std::vector<double>(n_covariates(), 0.0)});
    for (const auto& f : fixed_) ps.set(f.ref, f.value);
    return ps;
  }

  void validate(const ParameterSet& ps) const {
    if (ps.per_transition.size() != transitions_.size()) {
      throw ArgumentError("parameter set has " + std::to_string(ps.per_transition.size()) +
                          " transitions, model has " + std::to_string(transitions_.size()));
    }
    for (std::size_t k = 0; k < ps.per_transition.size(); ++k) {
      const auto& p = ps.per_transition[k];
      if (p.betas.size() != n_covariates()) {
        throw ArgumentError("transition " + transitions_.name(k) + ": expected " +
                            std::to_string(n_covariates()) + " coefficients, got " +
                            std::to_string(p.betas.size()));
      }
      bool finite = std::isfinite(p.log_rate) && std::isfinite(p.shape);
      for (double b : p.betas) finite = finite && std::isfinite(b);
      if (!finite) throw ArgumentError("transition " + transitions_.name(k) + " has non-finite parameters");
    }
  }

 private:
  void check_ref(const ParamRef& r) const {
    if (r.transition < 0 || static_cast<std::size_t>(r.transition) >= transitions_.size()) {
      throw ArgumentError("parameter reference to unknown transition " + std::to_string(r.transition + 1));
    }
    if (r.kind == ParamKind::beta &&
        (r.covariate < 0 || static_cast<std::size_t>(r.covariate) >= n_covariates())) {
      throw ArgumentError("parameter reference to unknown covariate index " + std::to_string(r.covariate));
    }
  }

  void rebuild_index() {
    free_.clear();
    auto push = [&](ParamRef r) {
      if (!fixed_value(r)) free_.push_back(r);
    };
    for (std::size_t k = 0; k < transitions_.size(); ++k) {
      const int t = static_cast<int>(k);
      push({t, ParamKind::log_rate, -1});
      push({t, ParamKind::shape, -1});
      for (std::size_t c = 0; c < n_covariates(); ++c) push({t, ParamKind::beta, static_cast<int>(c)});
    }
  }

  StateSpace states_;
  TransitionStructure transitions_;
  std::vector<std::string> covariate_names_;
  std::vector<FixedParameter> fixed_;
  std::vector<ParamRef> free_;
};

inline Vector pack(const ParameterSet& ps, const ModelSpec& spec) {
  spec.validate(ps);
  const auto& refs = spec.free_parameters();
  Vector v(static_cast<Eigen::Index>(refs.size()));
  for (std::size_t i = 0; i < refs.size(); ++i) v[static_cast<Eigen::Index>(i)] = ps.get(refs[i]);
  return v;
}

inline ParameterSet unpack(const Vector& v, const ModelSpec& spec) {
  const auto& refs = spec.free_parameters();
  if (static_cast<std::size_t>(v.size()) != refs.size()) {
    throw ArgumentError("flat parameter vector has length " + std::to_string(v.size()) +
                        ", model expects " + std::to_string(refs.size()));
  }
  ParameterSet ps = spec.zero_parameters();
  for (std::size_t i = 0; i < refs.size(); ++i) ps.set(refs[i], v[static_cast<Eigen::Index>(i)]);
  return ps;
}

inline double linear_predictor(const TransitionParams& p, std::span<const double> x) {
  if (x.size() != p.betas.size()) {
    throw ArgumentError("covariate vector has length " + std::to_string(x.size()) + ", expected " +
                        std::to_string(p.betas.size()));
  }
  double lp = 0.0;
  for (std::size_t c = 0; c < x.size(); ++c) lp += p.betas[c] * x[c];
  return lp;
}

// Gompertz proportional hazard lambda * exp(shape * t + betas . x), per year.
inline double hazard(const TransitionParams& p, double t, std::span<const double> x) {
  if (!std::isfinite(t)) throw ArgumentError("hazard: non-finite age");
  const double h = std::exp(p.log_rate + p.shape * t + linear_predictor(p, x));
  if (!std::isfinite(h)) {
    throw DomainError("hazard overflow at age " + std::to_string(t) + " (log_rate " +
                      std::to_string(p.log_rate) + ", shape " + std::to_string(p.shape) + ")");
  }
  return h;
}

// Integral of hazard() over [t0, t1].
inline double cumulative_hazard(const TransitionParams& p, double t0, double t1, std::span<const double> x) {
  if (t1 < t0) throw ArgumentError("cumulative_hazard: t1 < t0");
  if (t1 == t0) return 0.0;
  const double scale = std::exp(p.log_rate + linear_predictor(p, x));
  double h;
  if (std::abs(p.shape) < kShapeLimit) {
    h = scale * (t1 - t0);
  } else {
    h = scale * std::exp(p.shape * t0) * std::expm1(p.shape * (t1 - t0)) / p.shape;
  }
  if (!std::isfinite(h)) throw DomainError("cumulative hazard overflow on [" + std::to_string(t0) + ", " + std::to_string(t1) + "]");
  return h;
}

class IntensityMatrix {
 public:
  IntensityMatrix(Matrix q, double t) : q_(std::move(q)), t_(t) {}
  const Matrix& q() const { return q_; }
  double age() const { return t_; }
  double operator()(int i, int j) const { return q_(i, j); }

 private:
  Matrix q_;
  double t_;
};

// Q(t) for one covariate vector, with the covariate part folded into
// per-transition intercepts once. This is the hot path for the solvers.
class IntensityFunction {
 public:
  IntensityFunction(const ParameterSet& ps, const TransitionStructure& ts, std::span<const double> x)
      : n_(ts.n_states()) {
    if (ps.per_transition.size() != ts.size()) {
      throw ArgumentError("parameter set and transition structure disagree on the transition count");
    }
    terms_.reserve(ts.size());
    for (std::size_t k = 0; k < ts.size(); ++k) {
      const auto& p = ps.per_transition[k];
      terms_.push_back({ts[k].from, ts[k].to, p.log_rate + linear_predictor(p, x), p.shape, static_cast<int>(k)});
    }
  }

  int n_states() const { return n_; }
  bool has_exit(int state) const {
    for (const auto& term : terms_) {
      if (term.from == state) return true;
    }
    return false;
  }
  bool homogeneous() const {
    return std::all_of(terms_.begin(), terms_.end(), [](const Term& t) { return t.shape == 0.0; });
  }

  double rate(int from, int to, double t) const {
    for (const auto& term : terms_) {
      if (term.from == from && term.to == to) return eval(term, t);
    }
    return 0.0;
  }

  // Writes Q(t) into q (resized if needed).
  void fill(double t, Matrix& q) const {
    if (q.rows() != n_ || q.cols() != n_) q.resize(n_, n_);
    q.setZero();
    for (const auto& term : terms_) {
      const double h = eval(term, t);
      q(term.from, term.to) += h;
      q(term.from, term.from) -= h;
    }
  }

  Matrix operator()(double t) const {
    Matrix q(n_, n_);
    fill(t, q);
    return q;
  }

 private:
  struct Term {
    int from;
    int to;
    double intercept;
    double shape;
    int index;
  };

  double eval(const Term& term, double t) const {
    const double h = std::exp(term.intercept + term.shape * t);
    if (!std::isfinite(h)) {
      throw DomainError("hazard overflow for transition " + std::to_string(term.from + 1) + "->" +
                        std::to_string(term.to + 1) + " at age " + std::to_string(t));
    }
    return h;
  }

  int n_;
  std::vector<Term> terms_;
};

inline IntensityMatrix build_intensity_matrix(const ParameterSet& ps, const TransitionStructure& ts, double t,
                                              std::span<const double> x) {
  IntensityFunction f(ps, ts, x);
  return IntensityMatrix(f(t), t);
}

}  // namespace cthmm
