#include <gtest/gtest.h>

#include "cthmm/likelihood.hpp"
#include "support.hpp"

using namespace cthmm;

namespace {

const SolverConfig kOde{};

Subject make_subject(std::vector<std::pair<double, int>> visits, bool exact_death = false, CovariateVector x = {}) {
  Subject s;
  s.id = "s1";
  s.covariates = std::move(x);
  for (auto [age, state] : visits) s.visits.push_back({age, state, {}, false});
  s.visits.back().is_exact_death = exact_death;
  return s;
}

// One transient state, one absorbing, constant rate.
ModelSpec two_state_spec() {
  StateSpace states(1, 1, {"Alive", "Dead"});
  return ModelSpec(states, TransitionStructure(states, {{0, 1}}), {});
}

ParameterSet constant_rate(double rate) { return ParameterSet{{{std::log(rate), 0.0, {}}}}; }

// Random subject with 2..4 visits; may end in death (exact or interval) or alive.
// Monotone subjects never move B -> A, so their observed likelihood is finite.
Subject random_subject(Rng& rng, std::size_t n_cov, bool monotone = false) {
  Subject s;
  s.id = "r";
  s.covariates = cthmm::testing::random_binary_covariates(rng, n_cov);
  const int m = static_cast<int>(rng.uniform_int(2, 4));
  double age = rng.uniform(60, 85);
  const int ending = static_cast<int>(rng.uniform_int(0, 2));  // 0 alive, 1 exact death, 2 interval death
  int prev = 0;
  for (int j = 0; j < m; ++j) {
    const bool last = j + 1 == m;
    Visit v;
    v.age = age;
    if (last && ending > 0) {
      v.observed_state = 2;
      v.is_exact_death = ending == 1;
    } else {
      v.observed_state = static_cast<int>(rng.uniform_int(0, 1));
      if (monotone) v.observed_state = std::max(v.observed_state, prev);
      prev = v.observed_state;
    }
    s.visits.push_back(v);
    age += rng.uniform(0.5, 6.0);
  }
  return s;
}

EmissionMatrix random_emission(Rng& rng) {
  Matrix e(2, 2);
  const double a = rng.uniform(0.05, 0.95);
  const double b = rng.uniform(0.05, 0.95);
  e << a, 1 - a, b, 1 - b;
  return EmissionMatrix(e);
}

}  // namespace

TEST(ObservedLikelihood, NoTransitionsStayingPutIsCertain) {
  StateSpace states(2, 1);
  const ModelSpec spec(states, TransitionStructure(states, {}), {});
  const auto s = make_subject({{60, 0}, {66, 0}, {72, 0}});
  EXPECT_EQ(subject_loglik_observed(ParameterSet{}, spec, s, kOde), 0.0);
}

TEST(ObservedLikelihood, TwoStateClosedForm) {
  const auto spec = two_state_spec();
  const double rate = 0.07;
  const auto ps = constant_rate(rate);
  for (const auto& cfg : {kOde, SolverConfig{SolverMethod::piecewise}}) {
    EXPECT_NEAR(subject_loglik_observed(ps, spec, make_subject({{60, 0}, {65, 0}}), cfg), -5 * rate, 1e-9);
    EXPECT_NEAR(subject_loglik_observed(ps, spec, make_subject({{60, 0}, {65, 1}}), cfg), std::log(1 - std::exp(-5 * rate)),
                1e-9);
    EXPECT_NEAR(subject_loglik_observed(ps, spec, make_subject({{60, 0}, {63, 1}}, true), cfg),
                -3 * rate + std::log(rate), 1e-9);
  }
}

TEST(ObservedLikelihood, ExactDeathIsTheLimitOfAShrinkingWindow) {
  const auto truth = default_truth();
  const auto spec = truth.model_spec();
  const CovariateVector x{1, 0, 1};
  for (int from : {0, 1}) {
    const auto s = make_subject({{70, from}, {78.5, 2}}, true, x);
    const double density = std::exp(subject_loglik_observed(truth.params, spec, s, kOde));
    const double h = 1e-4;
    const Matrix a = transition_probability_ode(truth.params, truth.transitions, x, 70, 78.5, kOde).p();
    const Matrix b = transition_probability_ode(truth.params, truth.transitions, x, 78.5, 78.5 + h, kOde).p();
    double window = 0.0;
    for (int r = 0; r < 2; ++r) window += a(from, r) * b(r, 2);
    EXPECT_NEAR(window / h / density, 1.0, 1e-3);
  }
}

TEST(ObservedLikelihood, PiecewiseExactDeathIsTheLimitOfAShrinkingWindow) {
  const auto truth = default_truth();
  const auto spec = truth.model_spec();
  const CovariateVector x{1, 0, 1};
  const SolverConfig pw{SolverMethod::piecewise, 1.0, GridEvaluation::left};
  // off-grid and on-grid death ages
  for (double death : {78.5, 78.0}) {
    for (int from : {0, 1}) {
      const auto s = make_subject({{70, from}, {death, 2}}, true, x);
      const double density = std::exp(subject_loglik_observed(truth.params, spec, s, pw));
      const double h = 1e-6;
      const Matrix a = transition_probability_piecewise(truth.params, truth.transitions, x, 70, death, pw).p();
      const Matrix b = transition_probability_piecewise(truth.params, truth.transitions, x, 70, death + h, pw).p();
      EXPECT_NEAR((b(from, 2) - a(from, 2)) / h / density, 1.0, 1e-4) << "death " << death << " from " << from;
    }
  }
}

TEST(ObservedLikelihood, ImpossibleMoveGivesMinusInfinityWithDiagnostic) {
  const auto truth = default_truth();
  const auto spec = truth.model_spec();
  const PanelDataset data(spec.states(), spec.covariate_names(), {make_subject({{60, 1}, {66, 0}}, false, {0, 0, 0})});
  const auto r = dataset_loglik(truth.params, spec, data, LikelihoodMode::observed, std::nullopt, std::nullopt, kOde);
  EXPECT_EQ(r.value, kNegInf);
  ASSERT_EQ(r.zero_probability.size(), 1u);
  EXPECT_EQ(r.zero_probability.front().subject_id, "s1");
}

TEST(HiddenLikelihood, IdentityEmissionEqualsObserved) {
  Rng rng(21);
  const auto spec = cthmm::testing::illness_death_spec();
  for (int i = 0; i < 300; ++i) {
    const auto ps = cthmm::testing::random_gompertz(rng, 3, 3);
    const auto s = random_subject(rng, 3, true);
    const double obs = subject_loglik_observed(ps, spec, s, kOde);
    Vector point = Vector::Zero(2);
    point[s.visits.front().observed_state] = 1.0;
    EXPECT_EQ(subject_loglik_hidden(ps, spec, EmissionMatrix::identity(2), point, s, kOde), obs);
    Vector pi0(2);
    pi0 << 0.3, 0.7;
    EXPECT_NEAR(subject_loglik_hidden(ps, spec, EmissionMatrix::identity(2), pi0, s, kOde),
                obs + std::log(pi0[s.visits.front().observed_state]), 1e-13);
  }
}

TEST(HiddenLikelihood, ForwardMatchesBruteForceEnumeration) {
  Rng rng(22);
  const auto spec = cthmm::testing::illness_death_spec();
  for (int i = 0; i < 1000; ++i) {
    const auto ps = cthmm::testing::random_gompertz(rng, 3, 3);
    const auto s = random_subject(rng, 3);
    const auto e = random_emission(rng);
    Vector pi0(2);
    pi0[0] = rng.uniform(0.05, 0.95);
    pi0[1] = 1 - pi0[0];
    const SolverConfig cfg = i % 2 ? kOde : SolverConfig{SolverMethod::piecewise};
    const double fwd = subject_loglik_hidden(ps, spec, e, pi0, s, cfg);
    const double brute = brute_force_hidden_loglik(ps, spec, e, pi0, s, cfg);
    EXPECT_NEAR(fwd, brute, 1e-10) << "instance " << i;
  }
}

TEST(HiddenLikelihood, SingleTransientVisitSumsEmissionWeights) {
  Matrix m(2, 2);
  m << 0.8, 0.2, 0.3, 0.7;
  const EmissionMatrix e(m);
  Vector pi0(2);
  pi0 << 0.6, 0.4;
  StateSpace states(2, 1);
  const ModelSpec none(states, TransitionStructure(states, {}), {});
  const auto s = make_subject({{60, 1}, {61, 1}});
  // no transitions: latent state is constant, both emissions come from it
  const double expected = std::log(0.6 * 0.2 * 0.2 + 0.4 * 0.7 * 0.7);
  EXPECT_NEAR(brute_force_hidden_loglik(ParameterSet{}, none, e, pi0, s, kOde), expected, 1e-14);
  EXPECT_NEAR(subject_loglik_hidden(ParameterSet{}, none, e, pi0, s, kOde), expected, 1e-14);
}

TEST(HiddenLikelihood, ZeroEmissionColumnGivesMinusInfinity) {
  const auto truth = default_truth();
  Matrix m(2, 2);
  m << 1, 0, 1, 0;
  Vector pi0(2);
  pi0 << 0.5, 0.5;
  const auto s = make_subject({{60, 1}, {66, 0}}, false, {0, 0, 0});
  EXPECT_EQ(subject_loglik_hidden(truth.params, truth.model_spec(), EmissionMatrix(m), pi0, s, kOde), kNegInf);
  EXPECT_EQ(brute_force_hidden_loglik(truth.params, truth.model_spec(), EmissionMatrix(m), pi0, s, kOde), kNegInf);
}

TEST(HiddenLikelihood, UniformEmissionIgnoresTransientLabels) {
  Rng rng(23);
  const auto spec = cthmm::testing::illness_death_spec();
  Matrix half = Matrix::Constant(2, 2, 0.5);
  Vector pi0(2);
  pi0 << 0.69, 0.31;
  for (int i = 0; i < 200; ++i) {
    const auto ps = cthmm::testing::random_gompertz(rng, 3, 3);
    auto s = random_subject(rng, 3);
    const double a = subject_loglik_hidden(ps, spec, EmissionMatrix(half), pi0, s, kOde);
    for (auto& v : s.visits) {
      if (v.observed_state < 2) v.observed_state = 1 - v.observed_state;
    }
    EXPECT_NEAR(subject_loglik_hidden(ps, spec, EmissionMatrix(half), pi0, s, kOde), a, 1e-13);
  }
}

TEST(HiddenLikelihood, LongSequencesDoNotUnderflow) {
  const auto truth = default_truth();
  Subject s;
  s.id = "long";
  s.covariates = {0, 0, 0};
  for (int j = 0; j < 400; ++j) s.visits.push_back({60.0 + 0.1 * j, j % 2, {}, false});
  Matrix m(2, 2);
  m << 0.9, 0.1, 0.2, 0.8;
  Vector pi0(2);
  pi0 << 0.5, 0.5;
  const double ll = subject_loglik_hidden(truth.params, truth.model_spec(), EmissionMatrix(m), pi0, s, kOde);
  EXPECT_TRUE(std::isfinite(ll));
  EXPECT_LT(ll, -300.0);
}

TEST(HiddenLikelihood, RequiresEmissionAndInitial) {
  const auto truth = default_truth();
  const auto spec = truth.model_spec();
  const PanelDataset data(spec.states(), spec.covariate_names(), {make_subject({{60, 0}, {66, 0}}, false, {0, 0, 0})});
  EXPECT_THROW(PanelLikelihood(spec, data, LikelihoodMode::hidden, kOde), ArgumentError);
}

TEST(DatasetLikelihood, EmptyDatasetIsZero) {
  const auto truth = default_truth();
  const auto spec = truth.model_spec();
  const PanelDataset empty(spec.states(), spec.covariate_names(), {});
  EXPECT_EQ(dataset_loglik(truth.params, spec, empty, LikelihoodMode::observed, std::nullopt, std::nullopt, kOde).value,
            0.0);
}

TEST(DatasetLikelihood, SingleSubjectEqualsItsContribution) {
  const auto truth = default_truth();
  const auto spec = truth.model_spec();
  const auto s = make_subject({{70, 0}, {76, 1}, {79, 2}}, true, {1, 1, 0});
  const PanelDataset data(spec.states(), spec.covariate_names(), {s});
  EXPECT_EQ(dataset_loglik(truth.params, spec, data, LikelihoodMode::observed, std::nullopt, std::nullopt, kOde).value,
            subject_loglik_observed(truth.params, spec, s, kOde));
}

TEST(DatasetLikelihood, ParallelEqualsSerialBitwise) {
  GenerateConfig g;
  g.n_subjects = 100;
  g.seed = 4;
  const auto data = generate_dataset(g, 1);
  const auto spec = g.truth.model_spec();
  Matrix m(2, 2);
  m << 0.9, 0.1, 0.15, 0.85;
  Vector pi0(2);
  pi0 << 0.69, 0.31;
  for (auto mode : {LikelihoodMode::observed, LikelihoodMode::hidden}) {
    for (const auto& cfg : {kOde, SolverConfig{SolverMethod::piecewise}}) {
      const auto serial = dataset_loglik(g.truth.params, spec, data.panel, mode, EmissionMatrix(m), InitialDistribution(pi0), cfg, 1);
      const auto parallel = dataset_loglik(g.truth.params, spec, data.panel, mode, EmissionMatrix(m), InitialDistribution(pi0), cfg, 4);
      EXPECT_EQ(std::bit_cast<std::uint64_t>(serial.value), std::bit_cast<std::uint64_t>(parallel.value));
      EXPECT_TRUE(std::isfinite(serial.value));
    }
  }
}

TEST(DatasetLikelihood, PerSubjectInitialMustMatchSubjectCount) {
  const auto truth = default_truth();
  const auto spec = truth.model_spec();
  const PanelDataset data(spec.states(), spec.covariate_names(), {make_subject({{60, 0}, {66, 0}}, false, {0, 0, 0})});
  std::vector<Vector> per(2, Vector::Constant(2, 0.5));
  EXPECT_THROW(PanelLikelihood(spec, data, LikelihoodMode::hidden, kOde, EmissionMatrix::identity(2), InitialDistribution(per)),
               ArgumentError);
}

TEST(Subject, ValidationRejectsMalformedRecords) {
  const StateSpace states(2, 1);
  EXPECT_THROW(validate_subject(make_subject({{60, 0}}), states, 0), ArgumentError);
  EXPECT_THROW(validate_subject(make_subject({{60, 0}, {60, 0}}), states, 0), ArgumentError);
  EXPECT_THROW(validate_subject(make_subject({{60, 2}, {61, 0}}), states, 0), ArgumentError);
  EXPECT_THROW(validate_subject(make_subject({{60, 0}, {61, 1}}, true), states, 0), ArgumentError);
}
