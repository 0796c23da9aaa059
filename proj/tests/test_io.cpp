#include <gtest/gtest.h>

#include <filesystem>

#include "cthmm/estimation.hpp"
#include "cthmm/io.hpp"
#include "cthmm/simulate.hpp"

using namespace cthmm;
namespace fs = std::filesystem;

namespace {

fs::path scratch_dir(const std::string& name) {
  const auto p = fs::temp_directory_path() / ("cthmm_test_io_" + name);
  fs::remove_all(p);
  fs::create_directories(p);
  return p;
}

GeneratedData small_dataset(std::uint64_t seed, std::size_t n = 150) {
  GenerateConfig g;
  g.n_subjects = n;
  g.seed = seed;
  return generate_dataset(g);
}

std::string default_config_text() { return io::read_file(fs::path(CTHMM_CONFIG_DIR) / "default.yaml"); }

std::string replace_once(std::string s, const std::string& from, const std::string& to) {
  const auto at = s.find(from);
  if (at == std::string::npos) throw std::logic_error("pattern not found: " + from);
  return s.replace(at, from.size(), to);
}

// Expects a ConfigError whose message contains every fragment.
template <typename F>
void expect_config_error(F&& f, std::initializer_list<std::string> fragments) {
  try {
    f();
    ADD_FAILURE() << "expected ConfigError";
  } catch (const ConfigError& e) {
    for (const auto& s : fragments) EXPECT_NE(std::string(e.what()).find(s), std::string::npos) << e.what();
  }
}

}  // namespace

TEST(Numbers, FormatDoubleRoundTrips) {
  Rng rng(71);
  for (int i = 0; i < 10000; ++i) {
    const double v = std::ldexp(rng.uniform(-1.0, 1.0), static_cast<int>(rng.uniform_int(-40, 40)));
    EXPECT_EQ(std::stod(io::format_double(v)), v);
  }
  EXPECT_EQ(io::format_double(std::nan("")), "NA");
  EXPECT_TRUE(std::isnan(io::parse_double("NA", "here")));
}

TEST(Numbers, AgesCarryTwoDecimals) {
  EXPECT_EQ(io::format_age(60.0), "60.00");
  EXPECT_EQ(io::format_age(61.5), "61.50");
  EXPECT_EQ(io::format_age(61.125), "61.125");
}

TEST(Numbers, BadNumbersNameTheLocation) {
  expect_config_error([] { io::parse_double("1.5x", "file.csv:4"); }, {"file.csv:4"});
  expect_config_error([] { io::parse_int("2.5", "file.csv:5"); }, {"file.csv:5"});
}

TEST(Digest, KnownSha256) {
  EXPECT_EQ(io::sha256_hex("abc"), "ba7816bf8f01cfea414140de5dae2223b00361a396177a9cb410ff61f20015ad");
  EXPECT_EQ(io::sha256_hex(""), "e3b0c44298fc1c149afbf4c8996fb92427ae41e4649b934ca495991b7852b855");
}

TEST(PanelCsv, RoundTrip) {
  const auto data = small_dataset(72);
  const auto dir = scratch_dir("panel");
  io::write_panel_csv(dir / "panel.csv", data.panel);
  const auto back = io::read_panel_csv(dir / "panel.csv", data.truth.states);
  EXPECT_EQ(back, data.panel);
  EXPECT_EQ(io::panel_to_csv(back), io::read_file(dir / "panel.csv"));
}

TEST(PanelCsv, RoundTripWithoutDiseaseColumns) {
  StateSpace states(2, 1, {"A", "B", "Death"});
  std::vector<Subject> subjects{{"s1", {1.0, 0.25}, {{60.0, 0, {}, false}, {66.5, 1, {}, false}}},
                                {"s2", {0.0, -3.5}, {{70.0, 1, {}, false}, {71.25, 2, {}, true}}}};
  const PanelDataset data(states, {"sex", "score"}, subjects);
  const auto dir = scratch_dir("panel_plain");
  io::write_panel_csv(dir / "p.csv", data);
  EXPECT_EQ(io::read_panel_csv(dir / "p.csv", states), data);
  EXPECT_EQ(data.n_diseases(), 0u);
}

TEST(PanelCsv, ErrorsAreLineAnchored) {
  const StateSpace states(2, 1, {"A", "B", "Death"});
  const auto dir = scratch_dir("panel_bad");
  const std::string header = "subject_id,age,observed_state,is_exact_death,x1\n";
  auto check = [&](const std::string& body, std::initializer_list<std::string> fragments) {
    io::write_file(dir / "bad.csv", header + body);
    expect_config_error([&] { io::read_panel_csv(dir / "bad.csv", states); }, fragments);
  };
  check("s1,60.00,1,0,1\ns1,63.00,4,0,1\n", {"bad.csv:3", "out of range"});
  check("s1,60.00,1,0,1\ns1,63.00,1\n", {"bad.csv:3", "fields"});
  check("s1,60.00,1,0,1\ns1,63.00,1,0,0\n", {"bad.csv:3", "covariate x1"});
  check("s1,60.00,1,0,1\ns2,61.00,1,0,1\ns2,62.00,1,0,1\ns1,63.00,1,0,1\n", {"bad.csv:5", "contiguous"});
  check("s1,60.00,1,0,1\ns1,59.00,1,0,1\n", {"increasing"});
  io::write_file(dir / "hdr.csv", "id,age,observed_state,is_exact_death\n");
  expect_config_error([&] { io::read_panel_csv(dir / "hdr.csv", states); }, {"hdr.csv:1", "subject_id"});
}

TEST(PanelCsv, MissingFileIsAnIoError) {
  EXPECT_THROW(io::read_panel_csv("/nonexistent/panel.csv", StateSpace(2, 1)), IoError);
}

TEST(ExactCsv, RoundTrip) {
  const auto data = small_dataset(73);
  const auto dir = scratch_dir("exact");
  io::write_exact_csv(dir / "exact.csv", data.exact);
  const auto back = io::read_exact_csv(dir / "exact.csv", data.truth.states, data.truth.transitions);
  EXPECT_EQ(back, data.exact);
}

TEST(Config, DefaultFileParses) {
  const auto pc = io::load_config(fs::path(CTHMM_CONFIG_DIR) / "default.yaml");
  EXPECT_TRUE(pc.has_truth);
  EXPECT_FALSE(pc.has_study);
  const auto truth = default_truth();
  EXPECT_EQ(pc.generate.truth.params, truth.params);
  EXPECT_EQ(pc.generate.truth.initial_probs, truth.initial_probs);
  EXPECT_EQ(pc.generate.truth.transitions, truth.transitions);
  EXPECT_EQ(pc.generate.n_subjects, 3000u);
  EXPECT_EQ(pc.pipeline.approx_solver.method, SolverMethod::piecewise);
  EXPECT_EQ(pc.pipeline.exact_solver.method, SolverMethod::ode);
  const auto defaults = default_diseases();
  ASSERT_EQ(pc.generate.diseases.class_profiles.size(), defaults.class_profiles.size());
  for (std::size_t k = 0; k < defaults.class_profiles.size(); ++k) {
    EXPECT_EQ(pc.generate.diseases.class_profiles[k].baseline, defaults.class_profiles[k].baseline);
    EXPECT_EQ(pc.generate.diseases.class_profiles[k].incidence, defaults.class_profiles[k].incidence);
  }
}

TEST(Config, StudyFileParses) {
  const auto pc = io::load_config(fs::path(CTHMM_CONFIG_DIR) / "study_population.yaml");
  ASSERT_TRUE(pc.has_study);
  EXPECT_EQ(pc.scenario.n_subjects, 3000u);
  EXPECT_EQ(pc.scenario.n_replicates, 20);
  EXPECT_EQ(pc.scenario.models.size(), 5u);
}

TEST(Config, ErrorsCarryLineAndKeyPath) {
  const auto text = default_config_text();
  expect_config_error([&] { io::parse_config(io::Node::load_string(replace_once(text, "n_subjects: 3000", "n_subjects: lots"), "cfg.yaml")); },
                      {"cfg.yaml:", "cohort.n_subjects", "not a number"});
  expect_config_error(
      [&] { io::parse_config(io::Node::load_string(replace_once(text, "method: piecewise", "method: euler"), "cfg.yaml")); },
      {"cfg.yaml:", "solver.approx.method", "valid: ode, piecewise"});
  expect_config_error(
      [&] { io::parse_config(io::Node::load_string(replace_once(text, "from: B, to: Death", "from: C, to: Death"), "cfg.yaml")); },
      {"cfg.yaml:", "unknown state 'C'"});
  expect_config_error(
      [&] { io::parse_config(io::Node::load_string(replace_once(text, "initial_probs: [0.69, 0.31]", "initial_probs: [0.6, 0.31]"), "cfg.yaml")); },
      {"sum to 1"});
  expect_config_error([&] { io::parse_config(io::Node::load_string("truth: [1, 2\n", "cfg.yaml")); }, {"cfg.yaml:"});
}

TEST(Config, LineNumberPointsAtTheOffendingValue) {
  const auto text = replace_once(default_config_text(), "n_subjects: 3000", "n_subjects: lots");
  std::size_t line = 1;
  for (std::size_t i = 0; i < text.find("n_subjects: lots"); ++i) line += text[i] == '\n';
  expect_config_error([&] { io::parse_config(io::Node::load_string(text, "cfg.yaml")); },
                      {"cfg.yaml:" + std::to_string(line) + ":"});
}

TEST(Config, MissingKeyIsReportedByPath) {
  const auto text = replace_once(default_config_text(), "log_rate: -14.79613, ", "");
  expect_config_error([&] { io::parse_config(io::Node::load_string(text, "cfg.yaml")); },
                      {"missing key 'truth.transitions[0].log_rate'"});
}

TEST(Config, MissingFileIsAnIoError) { EXPECT_THROW(io::load_config("/nonexistent/config.yaml"), IoError); }

TEST(EmissionYaml, RoundTrip) {
  const StateSpace states(2, 1, {"A", "B", "Death"});
  const EmissionMatrix e((Matrix(2, 2) << 0.8712, 0.1288, 1.0 / 3.0, 2.0 / 3.0).finished());
  const Vector init = (Vector(2) << 0.7, 0.3).finished();
  const auto dir = scratch_dir("emission");
  io::write_file(dir / "e.yaml", io::emission_to_yaml(e, states, init));
  const auto back = io::read_emission_yaml(dir / "e.yaml");
  EXPECT_EQ(back.emission.matrix(), e.matrix());
  ASSERT_TRUE(back.initial);
  EXPECT_EQ(*back.initial, init);
  io::write_file(dir / "bad.yaml", "emission:\n  matrix:\n    - [0.5, 0.6]\n    - [0.5, 0.5]\n");
  expect_config_error([&] { io::read_emission_yaml(dir / "bad.yaml"); }, {"bad.yaml", "emission.matrix"});
}

TEST(FitReport, RoundTrip) {
  const auto data = small_dataset(74, 400);
  const auto spec = data.truth.model_spec();
  const auto fit = fit_exact_reference(spec, data.exact, FitOptions{});
  ASSERT_TRUE(fit.has_standard_errors());
  const auto dir = scratch_dir("report");
  io::write_file(dir / "fit.json", io::fit_report(fit, "ref").dump(2));
  const auto back = io::read_fit_report(dir / "fit.json");
  EXPECT_EQ(back.flat_estimates, fit.flat_estimates);
  EXPECT_EQ(back.standard_errors, fit.standard_errors);
  EXPECT_EQ(back.ci_lower, fit.ci_lower);
  EXPECT_EQ(back.ci_upper, fit.ci_upper);
  EXPECT_EQ(back.loglik, fit.loglik);
  EXPECT_EQ(back.converged, fit.converged);
  EXPECT_EQ(back.mode, FitMode::exact_reference);
  EXPECT_EQ(back.solver.method, fit.solver.method);
  EXPECT_EQ(back.spec.covariate_names(), spec.covariate_names());
  EXPECT_EQ(back.spec.transitions(), spec.transitions());
  EXPECT_EQ(back.estimates, fit.estimates);
}

TEST(FitReport, InconsistentResultIsRejected) {
  const auto data = small_dataset(75, 200);
  auto fit = fit_exact_reference(data.truth.model_spec(), data.exact, FitOptions{});
  fit.standard_errors.resize(fit.standard_errors.size() - 1);
  EXPECT_THROW(io::fit_report(fit, "ref"), ArgumentError);
  fit.standard_errors.resize(0);
  fit.coordinate_ok.clear();
  fit.ci_lower.resize(0);
  fit.ci_upper.resize(0);
  EXPECT_THROW(io::fit_report(fit, "ref"), ArgumentError);
}

TEST(FitReport, MalformedReportIsAConfigError) {
  const auto dir = scratch_dir("report_bad");
  io::write_file(dir / "a.json", "{not json");
  EXPECT_THROW(io::read_fit_report(dir / "a.json"), ConfigError);
  io::write_file(dir / "b.json", "{\"schema_version\": 1}");
  EXPECT_THROW(io::read_fit_report(dir / "b.json"), ConfigError);
}

TEST(Manifest, DigestsVerifyAndDetectChanges) {
  const auto dir = scratch_dir("manifest");
  io::write_file(dir / "a.csv", "x\n1\n");
  fs::create_directories(dir / "tables");
  io::write_file(dir / "tables" / "b.csv", "y\n2\n");
  io::Manifest m;
  m.command = "simulate";
  m.seed = 7;
  m.outputs = {dir / "a.csv", dir / "tables" / "b.csv"};
  io::write_manifest(m, dir);
  EXPECT_TRUE(io::verify_manifest(dir / "manifest.json").empty());
  const auto j = nlohmann::json::parse(io::read_file(dir / "manifest.json"));
  EXPECT_EQ(j.at("outputs").at("tables/b.csv").get<std::string>(), io::sha256_hex("y\n2\n"));
  EXPECT_EQ(j.at("seed").get<std::uint64_t>(), 7u);
  io::write_file(dir / "tables" / "b.csv", "y\n3\n");
  EXPECT_EQ(io::verify_manifest(dir / "manifest.json"), std::vector<std::string>{"tables/b.csv"});
}
