#pragma once

// File formats: YAML configuration (line-anchored errors), panel and
// exact-path CSV, emission / LCA YAML, JSON fit reports and run manifests.
// Needs yaml-cpp and OpenSSL (libcrypto) at link time.

#include <openssl/evp.h>
#include <yaml-cpp/yaml.h>

#include <charconv>
#include <cmath>
#include <cstdint>
#include <filesystem>
#include <fstream>
#include <map>
#include <optional>
#include <sstream>
#include <string>
#include <vector>

#include "json.hpp"

#include "cthmm/errors.hpp"
#include "cthmm/estimation.hpp"
#include "cthmm/lca.hpp"
#include "cthmm/likelihood.hpp"
#include "cthmm/simulate.hpp"
#include "cthmm/study.hpp"

namespace cthmm::io {

namespace fs = std::filesystem;
using json = nlohmann::ordered_json;

inline constexpr const char* kToolVersion = "1.0.0";
inline constexpr int kReportSchemaVersion = 1;

// ---------------------------------------------------------------- numbers

// Shortest representation that parses back to the same double.
inline std::string format_double(double v) {
  if (std::isnan(v)) return "NA";
  if (std::isinf(v)) return v > 0 ? "Inf" : "-Inf";
  char buf[64];
  auto res = std::to_chars(buf, buf + sizeof buf, v);
  return std::string(buf, res.ptr);
}

// As format_double, padded to at least two decimals when in fixed notation.
inline std::string format_age(double v) {
  std::string s = format_double(v);
  if (s.find_first_of("eEn") != std::string::npos) return s;
  const auto dot = s.find('.');
  if (dot == std::string::npos) return s + ".00";
  while (s.size() - dot - 1 < 2) s += '0';
  return s;
}

inline double parse_double(const std::string& s, const std::string& where) {
  if (s == "NA") return std::numeric_limits<double>::quiet_NaN();
  if (s == "Inf") return std::numeric_limits<double>::infinity();
  if (s == "-Inf") return -std::numeric_limits<double>::infinity();
  double v = 0.0;
  const char* first = s.data();
  const char* last = s.data() + s.size();
  if (!s.empty() && *first == '+') ++first;
  auto res = std::from_chars(first, last, v);
  if (res.ec != std::errc() || res.ptr != last) throw ConfigError(where + ": '" + s + "' is not a number");
  return v;
}

inline long parse_int(const std::string& s, const std::string& where) {
  long v = 0;
  auto res = std::from_chars(s.data(), s.data() + s.size(), v);
  if (res.ec != std::errc() || res.ptr != s.data() + s.size()) throw ConfigError(where + ": '" + s + "' is not an integer");
  return v;
}

// ---------------------------------------------------------------- files

inline std::string read_file(const fs::path& p) {
  std::ifstream in(p, std::ios::binary);
  if (!in) throw IoError("cannot open " + p.string());
  std::ostringstream ss;
  ss << in.rdbuf();
  return ss.str();
}

inline void write_file(const fs::path& p, const std::string& content) {
  if (p.has_parent_path()) {
    std::error_code ec;
    fs::create_directories(p.parent_path(), ec);
    if (ec) throw IoError("cannot create " + p.parent_path().string() + ": " + ec.message());
  }
  std::ofstream out(p, std::ios::binary);
  if (!out) throw IoError("cannot write " + p.string());
  out << content;
  if (!out) throw IoError("write failed: " + p.string());
}

inline std::string sha256_hex(const std::string& data) {
  unsigned char md[EVP_MAX_MD_SIZE];
  unsigned int len = 0;
  if (EVP_Digest(data.data(), data.size(), md, &len, EVP_sha256(), nullptr) != 1) {
    throw Error("SHA-256 computation failed");
  }
  static const char* hex = "0123456789abcdef";
  std::string out;
  for (unsigned int i = 0; i < len; ++i) {
    out += hex[md[i] >> 4];
    out += hex[md[i] & 0xf];
  }
  return out;
}

inline std::string sha256_file(const fs::path& p) { return sha256_hex(read_file(p)); }

// ---------------------------------------------------------------- CSV

inline std::vector<std::string> split_csv_line(const std::string& line) {
  std::vector<std::string> out;
  std::string cur;
  for (char c : line) {
    if (c == ',') {
      out.push_back(cur);
      cur.clear();
    } else if (c != '\r') {
      cur += c;
    }
  }
  out.push_back(cur);
  return out;
}

struct CsvTable {
  std::vector<std::string> header;
  std::vector<std::vector<std::string>> rows;
  std::vector<std::size_t> line_numbers;
};

inline CsvTable read_csv(const fs::path& p) {
  std::ifstream in(p, std::ios::binary);
  if (!in) throw IoError("cannot open " + p.string());
  CsvTable t;
  std::string line;
  std::size_t ln = 0;
  while (std::getline(in, line)) {
    ++ln;
    if (ln == 1 && line.size() >= 3 && line.compare(0, 3, "\xEF\xBB\xBF") == 0) line.erase(0, 3);
    if (line.empty() || line == "\r") continue;
    auto cells = split_csv_line(line);
    if (t.header.empty()) {
      t.header = std::move(cells);
      continue;
    }
    if (cells.size() != t.header.size()) {
      throw ConfigError(p.string() + ":" + std::to_string(ln) + ": expected " + std::to_string(t.header.size()) +
                        " fields, found " + std::to_string(cells.size()));
    }
    t.rows.push_back(std::move(cells));
    t.line_numbers.push_back(ln);
  }
  if (t.header.empty()) throw ConfigError(p.string() + ": missing header row");
  return t;
}

// ---------------------------------------------------------------- panel CSV

// subject_id, age, observed_state (1-based), is_exact_death, covariates...,
// d1..dR. Death rows leave the disease cells empty.
inline std::string panel_to_csv(const PanelDataset& data) {
  std::ostringstream os;
  os << "subject_id,age,observed_state,is_exact_death";
  for (const auto& c : data.covariate_names()) os << ',' << c;
  const std::size_t r = data.n_diseases();
  for (std::size_t k = 0; k < r; ++k) os << ",d" << (k + 1);
  os << '\n';
  for (const auto& s : data.subjects()) {
    for (const auto& v : s.visits) {
      os << s.id << ',' << format_age(v.age) << ',' << (v.observed_state + 1) << ',' << (v.is_exact_death ? 1 : 0);
      for (double c : s.covariates) os << ',' << format_double(c);
      for (std::size_t k = 0; k < r; ++k) {
        os << ',';
        if (!v.diseases.empty()) os << static_cast<int>(v.diseases[k]);
      }
      os << '\n';
    }
  }
  return os.str();
}

inline void write_panel_csv(const fs::path& p, const PanelDataset& data) { write_file(p, panel_to_csv(data)); }

inline PanelDataset read_panel_csv(const fs::path& p, const StateSpace& states) {
  const auto t = read_csv(p);
  const std::vector<std::string> fixed{"subject_id", "age", "observed_state", "is_exact_death"};
  for (std::size_t i = 0; i < fixed.size(); ++i) {
    if (t.header.size() <= i || t.header[i] != fixed[i]) {
      throw ConfigError(p.string() + ":1: column " + std::to_string(i + 1) + " must be '" + fixed[i] + "'");
    }
  }
  std::vector<std::string> covs;
  std::size_t col = fixed.size();
  auto is_disease = [](const std::string& h) {
    return h.size() >= 2 && h[0] == 'd' && h.find_first_not_of("0123456789", 1) == std::string::npos;
  };
  for (; col < t.header.size() && !is_disease(t.header[col]); ++col) covs.push_back(t.header[col]);
  const std::size_t first_disease = col;
  for (std::size_t k = first_disease; k < t.header.size(); ++k) {
    if (t.header[k] != "d" + std::to_string(k - first_disease + 1)) {
      throw ConfigError(p.string() + ":1: disease columns must be named d1..dR in order");
    }
  }
  const std::size_t r = t.header.size() - first_disease;

  std::vector<Subject> subjects;
  for (std::size_t i = 0; i < t.rows.size(); ++i) {
    const auto& row = t.rows[i];
    const std::string where = p.string() + ":" + std::to_string(t.line_numbers[i]);
    if (subjects.empty() || subjects.back().id != row[0]) {
      for (const auto& s : subjects) {
        if (s.id == row[0]) throw ConfigError(where + ": rows of subject " + row[0] + " are not contiguous");
      }
      Subject s;
      s.id = row[0];
      for (std::size_t c = 0; c < covs.size(); ++c) s.covariates.push_back(parse_double(row[fixed.size() + c], where));
      subjects.push_back(std::move(s));
    }
    auto& s = subjects.back();
    for (std::size_t c = 0; c < covs.size(); ++c) {
      if (parse_double(row[fixed.size() + c], where) != s.covariates[c] &&
          !(std::isnan(s.covariates[c]))) {
        throw ConfigError(where + ": covariate " + covs[c] + " changes within subject " + s.id);
      }
    }
    Visit v;
    v.age = parse_double(row[1], where);
    const long st = parse_int(row[2], where);
    if (st < 1 || st > states.size()) throw ConfigError(where + ": observed_state " + row[2] + " out of range");
    v.observed_state = static_cast<int>(st - 1);
    const long death = parse_int(row[3], where);
    if (death != 0 && death != 1) throw ConfigError(where + ": is_exact_death must be 0 or 1");
    v.is_exact_death = death == 1;
    bool any_empty = false, any_set = false;
    for (std::size_t k = 0; k < r; ++k) (row[first_disease + k].empty() ? any_empty : any_set) = true;
    if (any_empty && any_set) throw ConfigError(where + ": disease cells partly empty");
    if (any_set) {
      for (std::size_t k = 0; k < r; ++k) {
        const long d = parse_int(row[first_disease + k], where);
        if (d != 0 && d != 1) throw ConfigError(where + ": disease indicators must be 0 or 1");
        v.diseases.push_back(static_cast<std::uint8_t>(d));
      }
    }
    s.visits.push_back(std::move(v));
  }
  try {
    return PanelDataset(states, covs, std::move(subjects));
  } catch (const ArgumentError& e) {
    throw ConfigError(p.string() + ": " + e.what());
  }
}

// ---------------------------------------------------------------- exact CSV

// One row per path point: subject_id, age, state (1-based), event
// (entry | transition | censored), covariates. Alive paths end with a
// 'censored' row at the censoring age.
inline std::string exact_to_csv(const ExactDataset& data) {
  std::ostringstream os;
  os << "subject_id,age,state,event";
  for (const auto& c : data.covariate_names()) os << ',' << c;
  os << '\n';
  for (const auto& tr : data.trajectories()) {
    auto emit = [&](double age, int state, const char* event) {
      os << tr.id << ',' << format_age(age) << ',' << (state + 1) << ',' << event;
      for (double c : tr.covariates) os << ',' << format_double(c);
      os << '\n';
    };
    for (std::size_t k = 0; k < tr.path.size(); ++k) emit(tr.path[k].age, tr.path[k].state, k == 0 ? "entry" : "transition");
    if (!data.states().is_absorbing(tr.final_state())) emit(tr.end_age, tr.final_state(), "censored");
  }
  return os.str();
}

inline void write_exact_csv(const fs::path& p, const ExactDataset& data) { write_file(p, exact_to_csv(data)); }

inline ExactDataset read_exact_csv(const fs::path& p, const StateSpace& states, const TransitionStructure& ts) {
  const auto t = read_csv(p);
  const std::vector<std::string> fixed{"subject_id", "age", "state", "event"};
  for (std::size_t i = 0; i < fixed.size(); ++i) {
    if (t.header.size() <= i || t.header[i] != fixed[i]) {
      throw ConfigError(p.string() + ":1: column " + std::to_string(i + 1) + " must be '" + fixed[i] + "'");
    }
  }
  const std::vector<std::string> covs(t.header.begin() + 4, t.header.end());
  std::vector<ExactTrajectory> paths;
  bool open = false;
  for (std::size_t i = 0; i < t.rows.size(); ++i) {
    const auto& row = t.rows[i];
    const std::string where = p.string() + ":" + std::to_string(t.line_numbers[i]);
    const double age = parse_double(row[1], where);
    const long st = parse_int(row[2], where);
    if (st < 1 || st > states.size()) throw ConfigError(where + ": state out of range");
    const int s = static_cast<int>(st - 1);
    const std::string& ev = row[3];
    if (ev == "entry") {
      if (open) throw ConfigError(where + ": previous path of " + paths.back().id + " has no end");
      ExactTrajectory tr;
      tr.id = row[0];
      for (std::size_t c = 0; c < covs.size(); ++c) tr.covariates.push_back(parse_double(row[4 + c], where));
      tr.path.push_back({s, age});
      tr.end_age = age;
      paths.push_back(std::move(tr));
      open = !states.is_absorbing(s);
    } else if (ev == "transition" || ev == "censored") {
      if (!open || paths.back().id != row[0]) throw ConfigError(where + ": '" + ev + "' row without an open path");
      auto& tr = paths.back();
      if (ev == "transition") {
        tr.path.push_back({s, age});
        tr.end_age = age;
        open = !states.is_absorbing(s);
      } else {
        if (s != tr.final_state()) throw ConfigError(where + ": censoring row in a different state");
        tr.end_age = age;
        open = false;
      }
    } else {
      throw ConfigError(where + ": unknown event '" + ev + "' (valid: entry, transition, censored)");
    }
  }
  if (open) throw ConfigError(p.string() + ": last path has no end");
  try {
    return ExactDataset(states, ts, covs, std::move(paths));
  } catch (const ArgumentError& e) {
    throw ConfigError(p.string() + ": " + e.what());
  }
}

// ---------------------------------------------------------------- YAML

// A YAML node with its dotted key path, for error messages of the form
// "file:line:col: key.path: problem".
class Node {
 public:
  Node(YAML::Node n, std::string path, std::shared_ptr<const std::string> file)
      : n_(std::move(n)), path_(std::move(path)), file_(std::move(file)) {}

  static Node load_file(const fs::path& p) {
    auto file = std::make_shared<const std::string>(p.string());
    try {
      return Node(YAML::LoadFile(p.string()), "", file);
    } catch (const YAML::BadFile&) {
      throw IoError("cannot open " + p.string());
    } catch (const YAML::Exception& e) {
      throw ConfigError(p.string() + ":" + std::to_string(e.mark.line + 1) + ":" + std::to_string(e.mark.column + 1) +
                        ": " + e.msg);
    }
  }

  static Node load_string(const std::string& text, const std::string& name = "<string>") {
    auto file = std::make_shared<const std::string>(name);
    try {
      return Node(YAML::Load(text), "", file);
    } catch (const YAML::Exception& e) {
      throw ConfigError(name + ":" + std::to_string(e.mark.line + 1) + ": " + e.msg);
    }
  }

  [[noreturn]] void fail(const std::string& what) const {
    std::string loc = *file_;
    if (n_.IsDefined() && !n_.Mark().is_null()) {
      loc += ":" + std::to_string(n_.Mark().line + 1) + ":" + std::to_string(n_.Mark().column + 1);
    }
    throw ConfigError(loc + ": " + (path_.empty() ? std::string("<root>") : path_) + ": " + what);
  }

  bool has(const std::string& key) const { return n_.IsMap() && n_[key].IsDefined() && !n_[key].IsNull(); }

  Node operator[](const std::string& key) const {
    if (!n_.IsMap()) fail("expected a mapping");
    if (!has(key)) fail("missing key '" + child_path(key) + "'");
    return Node(n_[key], child_path(key), file_);
  }

  std::optional<Node> get(const std::string& key) const {
    if (!n_.IsDefined() || n_.IsNull()) return std::nullopt;
    if (!n_.IsMap()) fail("expected a mapping");
    if (!has(key)) return std::nullopt;
    return Node(n_[key], child_path(key), file_);
  }

  std::size_t size() const {
    if (!n_.IsSequence()) fail("expected a list");
    return n_.size();
  }

  Node at(std::size_t i) const {
    if (!n_.IsSequence()) fail("expected a list");
    return Node(n_[i], path_ + "[" + std::to_string(i) + "]", file_);
  }

  std::vector<std::string> keys() const {
    if (!n_.IsMap()) fail("expected a mapping");
    std::vector<std::string> out;
    for (const auto& kv : n_) out.push_back(kv.first.as<std::string>());
    return out;
  }

  bool is_map() const { return n_.IsMap(); }
  bool is_sequence() const { return n_.IsSequence(); }

  std::string str() const {
    if (!n_.IsScalar()) fail("expected a scalar");
    return n_.Scalar();
  }

  double num() const {
    if (!n_.IsScalar()) fail("expected a number");
    try {
      return parse_double(n_.Scalar(), "value");
    } catch (const ConfigError&) {
      fail("'" + n_.Scalar() + "' is not a number");
    }
  }

  long integer() const {
    const double v = num();
    if (v != std::floor(v)) fail("expected an integer");
    return static_cast<long>(v);
  }

  bool boolean() const {
    const auto s = str();
    if (s == "true" || s == "yes" || s == "1") return true;
    if (s == "false" || s == "no" || s == "0") return false;
    fail("expected true or false");
  }

  std::vector<double> numbers() const {
    std::vector<double> out;
    for (std::size_t i = 0; i < size(); ++i) out.push_back(at(i).num());
    return out;
  }

  std::vector<std::string> strings() const {
    std::vector<std::string> out;
    for (std::size_t i = 0; i < size(); ++i) out.push_back(at(i).str());
    return out;
  }

  const std::string& path() const { return path_; }

 private:
  std::string child_path(const std::string& key) const { return path_.empty() ? key : path_ + "." + key; }

  YAML::Node n_;
  std::string path_;
  std::shared_ptr<const std::string> file_;
};

// Everything a configuration file can set. Sections are optional except
// where a command needs them (simulate needs `truth`).
struct ProjectConfig {
  GenerateConfig generate;
  PipelineConfig pipeline;
  Scenario scenario;
  bool has_truth = false;
  bool has_study = false;
};

inline StateSpace parse_states(const Node& n) {
  const auto transient = n["transient"].strings();
  const auto absorbing = n["absorbing"].strings();
  if (transient.empty()) n.fail("at least one transient state is required");
  std::vector<std::string> labels = transient;
  labels.insert(labels.end(), absorbing.begin(), absorbing.end());
  return StateSpace(static_cast<int>(transient.size()), static_cast<int>(absorbing.size()), labels);
}

inline int state_index(const StateSpace& states, const Node& n) {
  const auto s = n.str();
  for (int i = 0; i < states.size(); ++i) {
    if (states.label(i) == s) return i;
  }
  n.fail("unknown state '" + s + "'");
}

inline SolverConfig parse_solver(const Node& n, SolverConfig cfg) {
  if (auto m = n.get("method")) {
    const auto s = m->str();
    if (s == "ode") cfg.method = SolverMethod::ode;
    else if (s == "piecewise") cfg.method = SolverMethod::piecewise;
    else m->fail("unknown solver method '" + s + "' (valid: ode, piecewise)");
  }
  if (auto v = n.get("grid_step")) cfg.grid_step = v->num();
  if (auto v = n.get("evaluation")) {
    const auto s = v->str();
    if (s == "left") cfg.evaluation = GridEvaluation::left;
    else if (s == "midpoint") cfg.evaluation = GridEvaluation::midpoint;
    else v->fail("unknown evaluation '" + s + "' (valid: left, midpoint)");
  }
  if (auto v = n.get("rtol")) cfg.rtol = v->num();
  if (auto v = n.get("atol")) cfg.atol = v->num();
  if (auto v = n.get("max_steps")) cfg.max_steps = static_cast<std::size_t>(v->integer());
  try {
    cfg.validate();
  } catch (const ArgumentError& e) {
    n.fail(e.what());
  }
  return cfg;
}

inline ProjectConfig parse_config(const Node& root) {
  ProjectConfig pc;
  auto& g = pc.generate;
  if (!root.is_map()) root.fail("configuration must be a mapping");

  if (auto st = root.get("states")) {
    g.truth.states = parse_states(*st);
  }
  if (auto cov = root.get("covariates")) {
    g.truth.covariates.clear();
    for (std::size_t i = 0; i < cov->size(); ++i) {
      const auto c = cov->at(i);
      CovariateSpec spec;
      spec.name = c["name"].str();
      const auto dist = c.get("dist") ? c["dist"].str() : std::string("bernoulli");
      if (dist == "bernoulli") {
        spec.kind = CovariateSpec::Kind::bernoulli;
        spec.a = c.get("p") ? c["p"].num() : 0.5;
      } else if (dist == "normal") {
        spec.kind = CovariateSpec::Kind::normal;
        spec.a = c["mean"].num();
        spec.b = c["sd"].num();
      } else if (dist == "uniform") {
        spec.kind = CovariateSpec::Kind::uniform;
        spec.a = c["lower"].num();
        spec.b = c["upper"].num();
      } else {
        c["dist"].fail("unknown distribution '" + dist + "' (valid: bernoulli, normal, uniform)");
      }
      try {
        spec.validate();
      } catch (const ConfigError& e) {
        c.fail(e.what());
      }
      g.truth.covariates.push_back(spec);
    }
  }
  if (auto tr = root.get("truth")) {
    pc.has_truth = true;
    const auto& states = g.truth.states;
    const auto list = (*tr)["transitions"];
    std::vector<Transition> allowed;
    std::vector<TransitionParams> params;
    for (std::size_t i = 0; i < list.size(); ++i) {
      const auto t = list.at(i);
      allowed.push_back({state_index(states, t["from"]), state_index(states, t["to"])});
      TransitionParams p;
      p.log_rate = t["log_rate"].num();
      p.shape = t["shape"].num();
      p.betas.assign(g.truth.covariates.size(), 0.0);
      if (auto b = t.get("beta")) {
        for (const auto& key : b->keys()) {
          std::size_t c = 0;
          while (c < g.truth.covariates.size() && g.truth.covariates[c].name != key) ++c;
          if (c == g.truth.covariates.size()) (*b)[key].fail("unknown covariate '" + key + "'");
          p.betas[c] = (*b)[key].num();
        }
      }
      params.push_back(std::move(p));
    }
    try {
      g.truth.transitions = TransitionStructure(states, allowed);
    } catch (const ArgumentError& e) {
      list.fail(e.what());
    }
    g.truth.params.per_transition = std::move(params);
  } else if (root.get("states") || root.get("covariates")) {
    // A custom state space or covariate set without a parameter table can
    // only be used for fitting; keep the structure consistent.
    if (root.get("states")) root.fail("a custom 'states' section needs a matching 'truth' section");
    for (auto& p : g.truth.params.per_transition) p.betas.assign(g.truth.covariates.size(), 0.0);
  }
  if (auto c = root.get("cohort")) {
    if (auto v = c->get("n_subjects")) {
      if (v->integer() < 1) v->fail("must be >= 1");
      g.n_subjects = static_cast<std::size_t>(v->integer());
    }
    if (auto v = c->get("entry_age")) {
      const auto b = v->numbers();
      if (b.size() != 2) v->fail("expected [min, max]");
      g.truth.entry_age_min = b[0];
      g.truth.entry_age_max = b[1];
    }
    if (auto v = c->get("whole_year_entry")) g.truth.whole_year_entry = v->boolean();
    if (auto v = c->get("initial_probs")) g.truth.initial_probs = v->numbers();
    if (auto v = c->get("max_age")) g.truth.max_age = v->num();
    if (auto v = c->get("followup_horizon")) g.truth.followup_horizon = v->num();
    if (auto v = c->get("seed")) g.seed = static_cast<std::uint64_t>(v->integer());
  }
  if (auto d = root.get("diseases")) {
    auto& dc = g.diseases;
    if (auto v = d->get("onset_window")) dc.onset_window = v->num();
    if (auto prof = d->get("profiles")) {
      dc.class_profiles.clear();
      for (int s = 0; s < g.truth.states.n_transient(); ++s) {
        const auto p = (*prof)[g.truth.states.label(s)];
        dc.class_profiles.push_back({p["baseline"].numbers(), p["incidence"].numbers()});
      }
    }
    if (auto r = d->get("rare")) {
      if (auto v = r->get("count")) dc.rare.count = static_cast<int>(v->integer());
      if (auto v = r->get("prevalence")) dc.rare.prevalence = v->num();
      if (auto v = r->get("incidence")) dc.rare.incidence = v->num();
    }
    try {
      dc.validate(g.truth.states.n_transient());
    } catch (const ConfigError& e) {
      d->fail(e.what());
    }
  }
  if (auto s = root.get("scheme")) {
    auto& sc = g.scheme;
    if (auto v = s->get("kind")) {
      try {
        sc.kind = parse_scheme_kind(v->str());
      } catch (const ConfigError& e) {
        v->fail(e.what());
      }
    }
    if (auto v = s->get("young_gap")) sc.young_gap = v->num();
    if (auto v = s->get("old_gap")) sc.old_gap = v->num();
    if (auto v = s->get("switch_age")) sc.switch_age = v->num();
    if (auto v = s->get("gap_min")) sc.gap_min = v->num();
    if (auto v = s->get("gap_max")) sc.gap_max = v->num();
    try {
      sc.validate();
    } catch (const ConfigError& e) {
      s->fail(e.what());
    }
  }
  auto& pl = pc.pipeline;
  if (auto s = root.get("solver")) {
    if (auto a = s->get("approx")) pl.approx_solver = parse_solver(*a, pl.approx_solver);
    if (auto e = s->get("exact")) pl.exact_solver = parse_solver(*e, pl.exact_solver);
  }
  if (auto o = root.get("optimizer")) {
    if (auto v = o->get("max_iter")) pl.optimizer.max_iter = static_cast<int>(v->integer());
    if (auto v = o->get("grad_tol")) pl.optimizer.grad_tol = v->num();
    if (auto v = o->get("finite_diff_step")) pl.optimizer.finite_diff_step = v->num();
  }
  if (auto f = root.get("fit")) {
    if (auto v = f->get("ci_level")) {
      pl.ci_level = v->num();
      if (!(pl.ci_level > 0.0 && pl.ci_level < 1.0)) v->fail("must lie in (0, 1)");
    }
    if (auto v = f->get("hidden_init")) {
      const auto s = v->str();
      if (s == "baseline_posterior") pl.hidden_init = HiddenInit::baseline_posterior;
      else if (s == "assignment_frequencies") pl.hidden_init = HiddenInit::assignment_frequencies;
      else v->fail("unknown hidden_init '" + s + "' (valid: baseline_posterior, assignment_frequencies)");
    }
  }
  if (auto l = root.get("lca")) {
    if (auto v = l->get("restarts")) pl.lca.restarts = static_cast<int>(v->integer());
    if (auto v = l->get("max_iter")) pl.lca.max_iter = static_cast<int>(v->integer());
    if (auto v = l->get("tol")) pl.lca.tol = v->num();
    if (auto v = l->get("seed")) pl.lca.seed = static_cast<std::uint64_t>(v->integer());
  }
  if (auto s = root.get("study")) {
    pc.has_study = true;
    auto& sc = pc.scenario;
    if (auto v = s->get("name")) sc.name = v->str();
    if (auto v = s->get("n_subjects")) {
      if (v->integer() < 1) v->fail("must be >= 1");
      sc.n_subjects = static_cast<std::size_t>(v->integer());
    }
    sc.scheme = g.scheme.kind;
    if (auto v = s->get("scheme")) {
      try {
        sc.scheme = parse_scheme_kind(v->str());
      } catch (const ConfigError& e) {
        v->fail(e.what());
      }
    }
    if (auto v = s->get("n_replicates")) sc.n_replicates = static_cast<int>(v->integer());
    if (auto v = s->get("base_seed")) sc.base_seed = static_cast<std::uint64_t>(v->integer());
    if (auto v = s->get("models")) {
      sc.models.clear();
      for (std::size_t i = 0; i < v->size(); ++i) {
        try {
          sc.models.push_back(parse_model(v->at(i).str()));
        } catch (const ConfigError& e) {
          v->at(i).fail(e.what());
        }
      }
    }
    try {
      sc.validate();
    } catch (const ConfigError& e) {
      s->fail(e.what());
    }
  }
  try {
    g.truth.validate();
  } catch (const ConfigError& e) {
    root.fail(e.what());
  }
  return pc;
}

inline ProjectConfig load_config(const fs::path& p) { return parse_config(Node::load_file(p)); }

// ---------------------------------------------------------------- emission / LCA YAML

inline std::string emission_to_yaml(const EmissionMatrix& e, const StateSpace& states,
                                    const std::optional<Vector>& initial = std::nullopt) {
  YAML::Emitter out;
  out.SetDoublePrecision(17);
  out << YAML::BeginMap << YAML::Key << "emission" << YAML::Value << YAML::BeginMap;
  out << YAML::Key << "states" << YAML::Value << YAML::Flow << YAML::BeginSeq;
  for (int i = 0; i < e.size(); ++i) out << states.label(i);
  out << YAML::EndSeq;
  out << YAML::Key << "matrix" << YAML::Value << YAML::BeginSeq;
  for (int i = 0; i < e.size(); ++i) {
    out << YAML::Flow << YAML::BeginSeq;
    for (int j = 0; j < e.size(); ++j) out << format_double(e(i, j));
    out << YAML::EndSeq;
  }
  out << YAML::EndSeq;
  if (initial) {
    out << YAML::Key << "initial" << YAML::Value << YAML::Flow << YAML::BeginSeq;
    for (Eigen::Index i = 0; i < initial->size(); ++i) out << format_double((*initial)[i]);
    out << YAML::EndSeq;
  }
  out << YAML::EndMap << YAML::EndMap;
  return std::string(out.c_str()) + "\n";
}

struct EmissionFile {
  EmissionMatrix emission;
  std::optional<Vector> initial;
};

inline EmissionFile read_emission_yaml(const fs::path& p) {
  const auto root = Node::load_file(p);
  const auto e = root["emission"];
  const auto m = e["matrix"];
  const auto n = m.size();
  Matrix mat(static_cast<Eigen::Index>(n), static_cast<Eigen::Index>(n));
  for (std::size_t i = 0; i < n; ++i) {
    const auto row = m.at(i).numbers();
    if (row.size() != n) m.at(i).fail("emission matrix must be square");
    for (std::size_t j = 0; j < n; ++j) mat(static_cast<Eigen::Index>(i), static_cast<Eigen::Index>(j)) = row[j];
  }
  EmissionFile out;
  try {
    out.emission = EmissionMatrix(mat);
  } catch (const ArgumentError& ex) {
    m.fail(ex.what());
  }
  if (auto init = e.get("initial")) {
    const auto v = init->numbers();
    out.initial = Eigen::Map<const Vector>(v.data(), static_cast<Eigen::Index>(v.size()));
  }
  return out;
}

inline std::string lca_to_yaml(const LcaModel& m) {
  YAML::Emitter out;
  out << YAML::BeginMap << YAML::Key << "lca" << YAML::Value << YAML::BeginMap;
  out << YAML::Key << "n_classes" << YAML::Value << m.n_classes();
  out << YAML::Key << "loglik" << YAML::Value << format_double(m.loglik);
  out << YAML::Key << "iterations" << YAML::Value << m.iterations;
  out << YAML::Key << "converged" << YAML::Value << m.converged;
  out << YAML::Key << "class_weights" << YAML::Value << YAML::Flow << YAML::BeginSeq;
  for (int k = 0; k < m.n_classes(); ++k) out << format_double(m.class_weights[k]);
  out << YAML::EndSeq;
  out << YAML::Key << "item_probs" << YAML::Value << YAML::BeginSeq;
  for (int k = 0; k < m.n_classes(); ++k) {
    out << YAML::Flow << YAML::BeginSeq;
    for (int r = 0; r < m.n_items(); ++r) out << format_double(m.item_probs(k, r));
    out << YAML::EndSeq;
  }
  out << YAML::EndSeq << YAML::EndMap << YAML::EndMap;
  return std::string(out.c_str()) + "\n";
}

// ---------------------------------------------------------------- JSON reports

inline json solver_json(const SolverConfig& c) {
  return {{"method", to_string(c.method)},
          {"grid_step", c.grid_step},
          {"evaluation", c.evaluation == GridEvaluation::left ? "left" : "midpoint"},
          {"rtol", c.rtol},
          {"atol", c.atol},
          {"max_steps", c.max_steps}};
}

inline json number_or_null(double v) { return std::isfinite(v) ? json(v) : json(nullptr); }

inline json fit_report(const FitResult& r, const std::string& model_name) {
  const auto& spec = r.spec;
  json j;
  j["schema_version"] = kReportSchemaVersion;
  j["tool_version"] = kToolVersion;
  j["model"] = model_name;
  j["mode"] = to_string(r.mode);
  json states = json::array();
  for (int i = 0; i < spec.states().size(); ++i) states.push_back(spec.states().label(i));
  j["states"] = {{"labels", states}, {"n_transient", spec.states().n_transient()}};
  json trans = json::array();
  for (std::size_t k = 0; k < spec.n_transitions(); ++k) {
    trans.push_back({{"from", spec.states().label(spec.transitions()[k].from)},
                     {"to", spec.states().label(spec.transitions()[k].to)}});
  }
  j["transitions"] = trans;
  j["covariates"] = spec.covariate_names();
  json params = json::array();
  const auto& refs = spec.free_parameters();
  const auto n = static_cast<Eigen::Index>(refs.size());
  if (r.flat_estimates.size() != n || r.standard_errors.size() != n || r.ci_lower.size() != n || r.ci_upper.size() != n) {
    throw ArgumentError("fit_report: result vectors do not match the model's free parameters");
  }
  for (std::size_t i = 0; i < refs.size(); ++i) {
    const auto ii = static_cast<Eigen::Index>(i);
    params.push_back({{"transition", static_cast<int>(refs[i].transition) + 1},
                      {"name", spec.parameter_name(refs[i])},
                      {"estimate", number_or_null(r.flat_estimates[ii])},
                      {"se", number_or_null(r.standard_errors[ii])},
                      {"ci_lower", number_or_null(r.ci_lower[ii])},
                      {"ci_upper", number_or_null(r.ci_upper[ii])},
                      {"ok", i < r.coordinate_ok.size() ? static_cast<bool>(r.coordinate_ok[i]) : true}});
  }
  j["parameters"] = params;
  json fixed = json::array();
  for (const auto& f : spec.fixed()) {
    fixed.push_back({{"transition", f.ref.transition + 1}, {"name", spec.parameter_name(f.ref)}, {"value", f.value}});
  }
  j["fixed"] = fixed;
  j["loglik"] = number_or_null(r.loglik);
  j["convergence"] = {{"converged", r.converged},
                      {"iterations", r.iterations},
                      {"n_evals", r.n_evals},
                      {"relative_gradient", number_or_null(r.relative_gradient)},
                      {"grad_tol", r.optimizer.grad_tol},
                      {"message", r.message}};
  const auto& cd = r.condition_diag;
  j["hessian"] = {{"available", cd.available},
                  {"positive_definite", cd.positive_definite},
                  {"min_eigenvalue", number_or_null(cd.min_eigenvalue)},
                  {"max_eigenvalue", number_or_null(cd.max_eigenvalue)},
                  {"condition_number", number_or_null(cd.condition_number)},
                  {"note", cd.note}};
  j["solver"] = solver_json(r.solver);
  j["optimizer"] = {{"method", "bfgs"},
                    {"max_iter", r.optimizer.max_iter},
                    {"grad_tol", r.optimizer.grad_tol},
                    {"finite_diff_step", r.optimizer.finite_diff_step},
                    {"gradient", "central differences"}};
  j["ci_level"] = r.ci_level;
  j["reference_age"] = r.reference_age;
  if (r.covariance.size() > 0) {
    json cov = json::array();
    for (Eigen::Index a = 0; a < r.covariance.rows(); ++a) {
      json row = json::array();
      for (Eigen::Index b = 0; b < r.covariance.cols(); ++b) row.push_back(r.covariance(a, b));
      cov.push_back(row);
    }
    j["covariance"] = cov;
  } else {
    j["covariance"] = nullptr;
  }
  return j;
}

inline double json_number(const json& v) {
  return v.is_null() ? std::numeric_limits<double>::quiet_NaN() : v.get<double>();
}

// Rebuilds the parts of a FitResult that prediction needs.
inline FitResult read_fit_report(const fs::path& p) {
  json j;
  try {
    j = json::parse(read_file(p));
  } catch (const json::parse_error& e) {
    throw ConfigError(p.string() + ": " + e.what());
  }
  try {
    if (j.at("schema_version").get<int>() != kReportSchemaVersion) throw ConfigError(p.string() + ": unsupported schema_version");
    std::vector<std::string> labels = j.at("states").at("labels").get<std::vector<std::string>>();
    const int nt = j.at("states").at("n_transient").get<int>();
    StateSpace states(nt, static_cast<int>(labels.size()) - nt, labels);
    auto idx = [&](const std::string& s) {
      for (int i = 0; i < states.size(); ++i) {
        if (states.label(i) == s) return i;
      }
      throw ConfigError(p.string() + ": unknown state " + s);
    };
    std::vector<Transition> allowed;
    for (const auto& t : j.at("transitions")) allowed.push_back({idx(t.at("from")), idx(t.at("to"))});
    TransitionStructure ts(states, allowed);
    const auto covs = j.at("covariates").get<std::vector<std::string>>();
    std::vector<FixedParameter> fixed;
    ModelSpec probe(states, ts, covs);
    for (const auto& f : j.at("fixed")) {
      fixed.push_back({probe.parse_parameter(f.at("transition").get<int>() - 1, f.at("name").get<std::string>()),
                       f.at("value").get<double>()});
    }
    FitResult r;
    r.spec = ModelSpec(states, ts, covs, fixed);
    const auto n = static_cast<Eigen::Index>(r.spec.n_free());
    const auto& ps = j.at("parameters");
    if (static_cast<Eigen::Index>(ps.size()) != n) throw ConfigError(p.string() + ": parameter count mismatch");
    r.flat_estimates.resize(n);
    r.standard_errors.resize(n);
    r.ci_lower.resize(n);
    r.ci_upper.resize(n);
    for (Eigen::Index i = 0; i < n; ++i) {
      const auto& e = ps[static_cast<std::size_t>(i)];
      const auto ref = r.spec.parse_parameter(e.at("transition").get<int>() - 1, e.at("name").get<std::string>());
      if (r.spec.flat_index(ref) != static_cast<std::size_t>(i)) throw ConfigError(p.string() + ": parameters out of order");
      r.flat_estimates[i] = json_number(e.at("estimate"));
      r.standard_errors[i] = json_number(e.at("se"));
      r.ci_lower[i] = json_number(e.at("ci_lower"));
      r.ci_upper[i] = json_number(e.at("ci_upper"));
    }
    if (!r.flat_estimates.allFinite()) throw ConfigError(p.string() + ": report has non-finite estimates");
    r.estimates = unpack(r.flat_estimates, r.spec);
    r.coordinate_ok.assign(static_cast<std::size_t>(n), true);
    r.loglik = json_number(j.at("loglik"));
    r.converged = j.at("convergence").at("converged").get<bool>();
    r.ci_level = j.at("ci_level").get<double>();
    const auto& s = j.at("solver");
    r.solver.method = s.at("method").get<std::string>() == "ode" ? SolverMethod::ode : SolverMethod::piecewise;
    r.solver.grid_step = s.at("grid_step").get<double>();
    r.solver.evaluation = s.at("evaluation").get<std::string>() == "left" ? GridEvaluation::left : GridEvaluation::midpoint;
    r.solver.rtol = s.at("rtol").get<double>();
    r.solver.atol = s.at("atol").get<double>();
    r.solver.max_steps = s.at("max_steps").get<std::size_t>();
    const std::string mode = j.at("mode").get<std::string>();
    r.mode = mode == "hidden" ? FitMode::hidden : mode == "exact_reference" ? FitMode::exact_reference : FitMode::observed;
    return r;
  } catch (const json::exception& e) {
    throw ConfigError(p.string() + ": malformed report: " + e.what());
  } catch (const ArgumentError& e) {
    throw ConfigError(p.string() + ": " + e.what());
  }
}

// ---------------------------------------------------------------- manifests

struct Manifest {
  std::string command;
  std::vector<std::string> arguments;
  std::string config_sha256;
  std::optional<std::uint64_t> seed;
  double wall_clock_seconds = 0.0;
  std::vector<fs::path> outputs;
  json settings = json::object();
};

// Digests are computed from the files as they are on disk now.
inline json manifest_json(const Manifest& m, const fs::path& out_dir) {
  json j;
  j["schema_version"] = kReportSchemaVersion;
  j["tool_version"] = kToolVersion;
  j["command"] = m.command;
  j["arguments"] = m.arguments;
  j["config_sha256"] = m.config_sha256;
  j["seed"] = m.seed ? json(*m.seed) : json(nullptr);
  j["wall_clock_seconds"] = m.wall_clock_seconds;
  j["settings"] = m.settings;
  json outs = json::object();
  for (const auto& p : m.outputs) outs[fs::relative(p, out_dir).generic_string()] = sha256_file(p);
  j["outputs"] = outs;
  return j;
}

inline void write_manifest(const Manifest& m, const fs::path& out_dir) {
  write_file(out_dir / "manifest.json", manifest_json(m, out_dir).dump(2) + "\n");
}

// Recomputes every recorded digest; returns the files that differ.
inline std::vector<std::string> verify_manifest(const fs::path& manifest_path) {
  const json j = json::parse(read_file(manifest_path));
  const auto dir = manifest_path.parent_path();
  std::vector<std::string> bad;
  for (const auto& [name, digest] : j.at("outputs").items()) {
    const auto p = dir / name;
    if (!fs::exists(p) || sha256_file(p) != digest.get<std::string>()) bad.push_back(name);
  }
  return bad;
}

inline json config_settings(const ProjectConfig& pc) {
  const auto& pl = pc.pipeline;
  return {{"solver_approx", solver_json(pl.approx_solver)},
          {"solver_exact", solver_json(pl.exact_solver)},
          {"optimizer",
           {{"max_iter", pl.optimizer.max_iter},
            {"grad_tol", pl.optimizer.grad_tol},
            {"finite_diff_step", pl.optimizer.finite_diff_step}}},
          {"ci_level", pl.ci_level},
          {"hidden_init", pl.hidden_init == HiddenInit::baseline_posterior ? "baseline_posterior" : "assignment_frequencies"},
          {"lca", {{"restarts", pl.lca.restarts}, {"max_iter", pl.lca.max_iter}, {"tol", pl.lca.tol}}}};
}

}  // namespace cthmm::io
