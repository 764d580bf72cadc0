#pragma once

// Configuration, dataset and archive files, synthetic data and the
// command-line front end.

#include <algorithm>
#include <bit>
#include <charconv>
#include <cmath>
#include <cstdint>
#include <cstring>
#include <filesystem>
#include <fstream>
#include <iostream>
#include <map>
#include <optional>
#include <random>
#include <sstream>
#include <stdexcept>
#include <string>
#include <string_view>
#include <vector>

#include <CLI11.hpp>
#include <Eigen/Dense>
#include <json.hpp>

#include "mvmrf/hier_model.hpp"
#include "mvmrf/posterior_analysis.hpp"
#include "mvmrf/sampler.hpp"

namespace mvmrf {

namespace fs = std::filesystem;
using nlohmann::json;

inline constexpr const char* kToolVersion = "0.1.0";
inline constexpr std::uint8_t kArchiveVersion = 1;
inline constexpr char kArchiveMagic[8] = {'M', 'V', 'M', 'R', 'F', 'A', 'R', 'C'};
inline constexpr char kArchiveEnd[8] = {'M', 'V', 'M', 'R', 'F', 'E', 'N', 'D'};

struct ConfigError : std::runtime_error {
  using std::runtime_error::runtime_error;
};
struct DataError : std::runtime_error {
  using std::runtime_error::runtime_error;
};

// ---- small utilities ---------------------------------------------------------

inline std::uint64_t fnv1a64(std::string_view bytes, std::uint64_t h = 0xcbf29ce484222325ULL) {
  for (unsigned char c : bytes) {
    h ^= c;
    h *= 0x100000001b3ULL;
  }
  return h;
}

inline std::string hex64(std::uint64_t v) {
  char buf[17];
  std::snprintf(buf, sizeof buf, "%016llx", static_cast<unsigned long long>(v));
  return buf;
}

/// Shortest text that reads back to the same double; NA for NaN.
inline std::string format_double(double v) {
  if (std::isnan(v)) return "NA";
  char buf[32];
  const auto res = std::to_chars(buf, buf + sizeof buf, v);
  return std::string(buf, res.ptr);
}

inline std::optional<double> parse_double(std::string_view s) {
  while (!s.empty() && (s.front() == ' ' || s.front() == '\t')) s.remove_prefix(1);
  while (!s.empty() && (s.back() == ' ' || s.back() == '\t' || s.back() == '\r')) s.remove_suffix(1);
  if (!s.empty() && s.front() == '+') s.remove_prefix(1);
  double v = 0.0;
  const auto res = std::from_chars(s.data(), s.data() + s.size(), v);
  if (res.ec != std::errc() || res.ptr != s.data() + s.size() || s.empty()) return std::nullopt;
  return v;
}

inline std::string read_file(const fs::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw DataError("cannot open " + path.string());
  std::ostringstream ss;
  ss << in.rdbuf();
  return ss.str();
}

/// Write to a sibling temp file, then rename over the target.
inline void write_file_atomic(const fs::path& path, std::string_view content) {
  if (path.has_parent_path()) fs::create_directories(path.parent_path());
  fs::path tmp = path;
  tmp += ".tmp";
  {
    std::ofstream out(tmp, std::ios::binary | std::ios::trunc);
    if (!out) throw DataError("cannot write " + tmp.string());
    out.write(content.data(), static_cast<std::streamsize>(content.size()));
    if (!out) throw DataError("write failed for " + tmp.string());
  }
  fs::rename(tmp, path);
}

inline std::vector<std::string> split(std::string_view line, char sep) {
  std::vector<std::string> out;
  std::size_t start = 0;
  while (true) {
    const auto pos = line.find(sep, start);
    out.emplace_back(line.substr(start, pos == std::string_view::npos ? std::string_view::npos : pos - start));
    if (pos == std::string_view::npos) break;
    start = pos + 1;
  }
  return out;
}

// ---- run configuration -------------------------------------------------------

struct VariableInfo {
  std::string name;
  std::string units;
};

struct ProbabilityRequest {
  std::string name;
  std::vector<Condition> conditions;
};

struct ConditionalRequest {
  std::string name;
  Index cond_variable = 0;
  int quartile = 1;
  Index target_variable = 1;
  QuartileEvent event = QuartileEvent::Lower;
  QuartileScope scope = QuartileScope::PerBox;
};

struct ClusterRequest {
  Index k = 4;
  Linkage linkage = Linkage::Average;
};

struct ContourRequest {
  std::vector<Index> boxes;
  double level = 0.95;
  Index resolution = 64;
};

struct AnalysisConfig {
  std::vector<ProbabilityRequest> probabilities;
  std::vector<ConditionalRequest> conditionals;
  std::optional<ClusterRequest> clusters;
  std::optional<ContourRequest> contours;
};

/// Generating parameters for synthetic ensembles.
struct SimulationSpec {
  Index members = 5;
  DependenceParams dep;
  Eigen::VectorXd sigma2;
  double sigma2_b = 0.1;
  Eigen::MatrixXd alpha;     // 3 x p
  Eigen::MatrixXd beta_bar;  // 1 x p
  double h_bar_sd = 0.5;
  bool spatial = true;
};

struct RunConfig {
  fs::path base_dir;
  Index nx = 0, ny = 0;
  Adjacency adjacency = Adjacency::Rook1;
  std::vector<VariableInfo> variables;
  std::string dataset;     // as written, relative to base_dir
  std::string output_dir;  // as written, relative to base_dir
  PriorSpec prior;
  SamplerConfig sampler;
  std::optional<SimulationSpec> simulation;
  AnalysisConfig analysis;

  Index p() const { return static_cast<Index>(variables.size()); }
  fs::path dataset_path() const { return resolve(dataset); }
  fs::path output_path() const { return resolve(output_dir); }
  fs::path resolve(const std::string& s) const {
    const fs::path p(s);
    return p.is_absolute() ? p : base_dir / p;
  }
  StackedLattice lattice() const { return StackedLattice(GridLattice(nx, ny, adjacency), p()); }
};

namespace detail {

template <class T>
T get_field(const json& j, const std::string& key, const std::string& where, std::optional<T> fallback = {}) {
  if (!j.contains(key)) {
    if (fallback) return *fallback;
    throw ConfigError("missing field '" + where + key + "'");
  }
  try {
    return j.at(key).get<T>();
  } catch (const json::exception&) {
    throw ConfigError("field '" + where + key + "' has the wrong type");
  }
}

inline VariancePrior parse_variance_prior(const json& j, const std::string& where) {
  if (!j.is_object()) throw ConfigError("field '" + where + "' must be an object");
  return {get_field<double>(j, "shape", where + ".", 0.0), get_field<double>(j, "rate", where + ".", 0.0)};
}

inline json variance_prior_json(const VariancePrior& v) { return {{"shape", v.shape}, {"rate", v.rate}}; }

inline Eigen::VectorXd vector_from(const json& j, Index n, const std::string& where) {
  if (!j.is_array() || static_cast<Index>(j.size()) != n)
    throw ConfigError("field '" + where + "' must be an array of " + std::to_string(n) + " numbers");
  Eigen::VectorXd v(n);
  for (Index k = 0; k < n; ++k) {
    if (!j[static_cast<std::size_t>(k)].is_number()) throw ConfigError("field '" + where + "' must hold numbers");
    v[k] = j[static_cast<std::size_t>(k)].get<double>();
  }
  return v;
}

inline json vector_json(const Eigen::VectorXd& v) {
  json a = json::array();
  for (Index k = 0; k < v.size(); ++k) a.push_back(v[k]);
  return a;
}

// rows x cols, given as an array of rows
inline Eigen::MatrixXd matrix_from(const json& j, Index rows, Index cols, const std::string& where) {
  if (!j.is_array() || static_cast<Index>(j.size()) != rows)
    throw ConfigError("field '" + where + "' must have " + std::to_string(rows) + " rows");
  Eigen::MatrixXd m(rows, cols);
  for (Index r = 0; r < rows; ++r) m.row(r) = vector_from(j[static_cast<std::size_t>(r)], cols, where).transpose();
  return m;
}

inline json matrix_json(const Eigen::MatrixXd& m) {
  json a = json::array();
  for (Index r = 0; r < m.rows(); ++r) a.push_back(vector_json(m.row(r).transpose()));
  return a;
}

inline DependenceParams parse_dependence(const json& j, Index p, const std::string& where) {
  if (!j.is_object()) throw ConfigError("field '" + where + "' must be an object keyed by parameter name");
  const auto names = dependence_names(p);
  Eigen::VectorXd v = Eigen::VectorXd::Zero(dependence_count(p));
  for (const auto& [key, val] : j.items()) {
    const auto it = std::find(names.begin(), names.end(), key);
    if (it == names.end()) throw ConfigError("unknown dependence parameter '" + where + "." + key + "'");
    if (!val.is_number()) throw ConfigError("field '" + where + "." + key + "' must be a number");
    v[it - names.begin()] = val.get<double>();
  }
  DependenceParams d = DependenceParams::zeros(p);
  set_dependence_vector(d, v);
  return d;
}

inline json dependence_json(const DependenceParams& d) {
  json o = json::object();
  const auto names = dependence_names(d.p());
  const auto v = dependence_vector(d);
  for (std::size_t k = 0; k < names.size(); ++k) o[names[k]] = v[static_cast<Index>(k)];
  return o;
}

inline Condition parse_condition(const json& j, Index p, const std::string& where) {
  Condition c;
  c.variable = get_field<Index>(j, "variable", where + ".");
  if (c.variable < 0 || c.variable >= p) throw ConfigError("field '" + where + ".variable' is out of range");
  try {
    c.direction = parse_direction(get_field<std::string>(j, "direction", where + ".", std::string("above")));
  } catch (const std::invalid_argument& e) {
    throw ConfigError(where + ": " + e.what());
  }
  const json t = j.value("threshold", json("median"));
  if (t.is_string() && t.get<std::string>() == "median")
    c.threshold = Threshold::median();
  else if (t.is_number())
    c.threshold = Threshold::at(t.get<double>());
  else
    throw ConfigError("field '" + where + ".threshold' must be \"median\" or a number");
  return c;
}

inline json condition_json(const Condition& c) {
  json t = c.threshold.kind == Threshold::Kind::GlobalMedian ? json("median") : json(c.threshold.value);
  return {{"variable", c.variable}, {"direction", c.direction == Direction::Above ? "above" : "below"}, {"threshold", t}};
}

}  // namespace detail

inline SimulationSpec default_simulation(Index p) {
  SimulationSpec s;
  s.dep = DependenceParams::zeros(p);
  for (Index j = 0; j < p; ++j) s.dep.phi(j, j) = 0.15;
  s.sigma2 = Eigen::VectorXd::Constant(p, 0.25);
  s.alpha = Eigen::MatrixXd::Constant(3, p, 0.3);
  s.beta_bar = Eigen::MatrixXd::Constant(1, p, 1.0);
  return s;
}

inline AnalysisConfig default_analysis(Index p, Index n) {
  AnalysisConfig a;
  for (Index j = 0; j < p; ++j)
    a.probabilities.push_back({"var" + std::to_string(j) + "_above_median", {{j, Direction::Above, Threshold::median()}}});
  if (p >= 2) {
    a.probabilities.push_back({"var0_above_var1_below",
                               {{0, Direction::Above, Threshold::median()}, {1, Direction::Below, Threshold::median()}}});
    a.conditionals.push_back({"var1_lower_given_var0_q1", 0, 1, 1, QuartileEvent::Lower, QuartileScope::PerBox});
  }
  a.clusters = ClusterRequest{std::min<Index>(4, n), Linkage::Average};
  if (p == 2) a.contours = ContourRequest{{0}, 0.95, 64};
  return a;
}

inline RunConfig parse_run_config(const json& j, const fs::path& base_dir) {
  if (!j.is_object()) throw ConfigError("configuration must be a JSON object");
  RunConfig c;
  c.base_dir = base_dir;
  const json lat = j.value("lattice", json::object());
  c.nx = detail::get_field<Index>(lat, "nx", "lattice.");
  c.ny = detail::get_field<Index>(lat, "ny", "lattice.");
  if (c.nx < 1 || c.ny < 1) throw ConfigError("lattice dimensions must be positive");
  try {
    c.adjacency = parse_adjacency(detail::get_field<std::string>(lat, "adjacency", "lattice.", std::string("rook")));
  } catch (const std::invalid_argument& e) {
    throw ConfigError(std::string("lattice.adjacency: ") + e.what());
  }
  if (!j.contains("variables") || !j["variables"].is_array() || j["variables"].empty())
    throw ConfigError("field 'variables' must be a non-empty array");
  for (const auto& v : j["variables"]) {
    if (v.is_string())
      c.variables.push_back({v.get<std::string>(), ""});
    else if (v.is_object())
      c.variables.push_back({detail::get_field<std::string>(v, "name", "variables[]."),
                             detail::get_field<std::string>(v, "units", "variables[].", std::string())});
    else
      throw ConfigError("entries of 'variables' must be names or {name, units} objects");
  }
  const Index p = c.p();
  c.dataset = detail::get_field<std::string>(j, "dataset", "");
  c.output_dir = detail::get_field<std::string>(j, "output_dir", "", std::string("out"));

  c.prior = PriorSpec::defaults(p);
  if (j.contains("prior")) {
    const json& pr = j["prior"];
    c.prior.sigma2_alpha = detail::get_field<double>(pr, "sigma2_alpha", "prior.", c.prior.sigma2_alpha);
    c.prior.sigma2_beta = detail::get_field<double>(pr, "sigma2_beta", "prior.", c.prior.sigma2_beta);
    c.prior.sigma2_h = detail::get_field<double>(pr, "sigma2_h", "prior.", c.prior.sigma2_h);
    if (pr.contains("sigma2")) c.prior.sigma2 = detail::parse_variance_prior(pr["sigma2"], "prior.sigma2");
    if (pr.contains("sigma2_b")) c.prior.sigma2_b = detail::parse_variance_prior(pr["sigma2_b"], "prior.sigma2_b");
    if (pr.contains("tau2")) c.prior.tau2 = detail::parse_variance_prior(pr["tau2"], "prior.tau2");
    if (pr.contains("dep_half_width")) {
      const double w = detail::get_field<double>(pr, "dep_half_width", "prior.");
      c.prior.dep_box = ParamBox::uniform(p, -w, w);
    }
    if (pr.contains("dep_box")) {
      const json& b = pr["dep_box"];
      c.prior.dep_box.lower = detail::vector_from(b.value("lower", json()), dependence_count(p), "prior.dep_box.lower");
      c.prior.dep_box.upper = detail::vector_from(b.value("upper", json()), dependence_count(p), "prior.dep_box.upper");
    }
  }
  try {
    c.prior.validate(p);
  } catch (const std::invalid_argument& e) {
    throw ConfigError(std::string("prior: ") + e.what());
  }

  if (j.contains("sampler")) {
    const json& s = j["sampler"];
    auto& sc = c.sampler;
    sc.n_chains = detail::get_field<Index>(s, "n_chains", "sampler.", sc.n_chains);
    sc.regime1_iters = detail::get_field<Index>(s, "regime1_iters", "sampler.", sc.regime1_iters);
    sc.regime2_iters = detail::get_field<Index>(s, "regime2_iters", "sampler.", sc.regime2_iters);
    sc.regime3_iters = detail::get_field<Index>(s, "regime3_iters", "sampler.", sc.regime3_iters);
    sc.target_acceptance = detail::get_field<double>(s, "target_acceptance", "sampler.", sc.target_acceptance);
    sc.adapt_interval = detail::get_field<Index>(s, "adapt_interval", "sampler.", sc.adapt_interval);
    sc.adapt_gain = detail::get_field<double>(s, "adapt_gain", "sampler.", sc.adapt_gain);
    sc.thin = detail::get_field<Index>(s, "thin", "sampler.", sc.thin);
    sc.seed = detail::get_field<std::uint64_t>(s, "seed", "sampler.", sc.seed);
    sc.initial_dep_scale = detail::get_field<double>(s, "initial_dep_scale", "sampler.", sc.initial_dep_scale);
    sc.initial_log_tau_scale = detail::get_field<double>(s, "initial_log_tau_scale", "sampler.", sc.initial_log_tau_scale);
    sc.covariance_window = detail::get_field<Index>(s, "covariance_window", "sampler.", sc.covariance_window);
    sc.monitored_h_components =
        detail::get_field<Index>(s, "monitored_h_components", "sampler.", sc.monitored_h_components);
    sc.psrf_threshold = detail::get_field<double>(s, "psrf_threshold", "sampler.", sc.psrf_threshold);
    sc.start_max_tries = detail::get_field<Index>(s, "start_max_tries", "sampler.", sc.start_max_tries);
    try {
      sc.joint_block = parse_joint_block(detail::get_field<std::string>(s, "joint_block", "sampler.", std::string("cross")));
    } catch (const std::invalid_argument& e) {
      throw ConfigError(std::string("sampler.joint_block: ") + e.what());
    }
  }
  try {
    c.sampler.validate();
  } catch (const std::invalid_argument& e) {
    throw ConfigError(std::string("sampler: ") + e.what());
  }

  if (j.contains("simulation")) {
    const json& s = j["simulation"];
    SimulationSpec sim = default_simulation(p);
    sim.members = detail::get_field<Index>(s, "members", "simulation.", sim.members);
    if (sim.members < 1) throw ConfigError("simulation.members must be positive");
    if (s.contains("dependence")) sim.dep = detail::parse_dependence(s["dependence"], p, "simulation.dependence");
    if (s.contains("tau2")) sim.dep.tau2 = detail::vector_from(s["tau2"], p, "simulation.tau2");
    if (s.contains("sigma2")) sim.sigma2 = detail::vector_from(s["sigma2"], p, "simulation.sigma2");
    sim.sigma2_b = detail::get_field<double>(s, "sigma2_b", "simulation.", sim.sigma2_b);
    if (s.contains("alpha")) sim.alpha = detail::matrix_from(s["alpha"], 3, p, "simulation.alpha");
    if (s.contains("beta_bar")) sim.beta_bar = detail::matrix_from(s["beta_bar"], 1, p, "simulation.beta_bar");
    sim.h_bar_sd = detail::get_field<double>(s, "h_bar_sd", "simulation.", sim.h_bar_sd);
    sim.spatial = detail::get_field<bool>(s, "spatial", "simulation.", sim.spatial);
    c.simulation = sim;
  }

  c.analysis = default_analysis(p, c.nx * c.ny);
  if (j.contains("analysis")) {
    const json& a = j["analysis"];
    if (a.contains("probabilities")) {
      c.analysis.probabilities.clear();
      for (const auto& r : a["probabilities"]) {
        ProbabilityRequest req;
        req.name = detail::get_field<std::string>(r, "name", "analysis.probabilities[].");
        for (const auto& cond : r.value("conditions", json::array()))
          req.conditions.push_back(detail::parse_condition(cond, p, "analysis.probabilities[" + req.name + "]"));
        if (req.conditions.empty()) throw ConfigError("probability request '" + req.name + "' has no conditions");
        c.analysis.probabilities.push_back(std::move(req));
      }
    }
    if (a.contains("conditionals")) {
      c.analysis.conditionals.clear();
      for (const auto& r : a["conditionals"]) {
        ConditionalRequest req;
        const std::string w = "analysis.conditionals[].";
        req.name = detail::get_field<std::string>(r, "name", w);
        req.cond_variable = detail::get_field<Index>(r, "cond_variable", w);
        req.quartile = detail::get_field<int>(r, "quartile", w);
        req.target_variable = detail::get_field<Index>(r, "target_variable", w);
        const auto ev = detail::get_field<std::string>(r, "event", w, std::string("lower"));
        const auto sc = detail::get_field<std::string>(r, "scope", w, std::string("per-box"));
        if (ev != "upper" && ev != "lower") throw ConfigError(w + "event must be 'upper' or 'lower'");
        if (sc != "per-box" && sc != "global") throw ConfigError(w + "scope must be 'per-box' or 'global'");
        req.event = ev == "upper" ? QuartileEvent::Upper : QuartileEvent::Lower;
        req.scope = sc == "global" ? QuartileScope::Global : QuartileScope::PerBox;
        if (req.cond_variable < 0 || req.cond_variable >= p || req.target_variable < 0 || req.target_variable >= p)
          throw ConfigError(w + "variable index out of range");
        if (req.quartile < 1 || req.quartile > 4) throw ConfigError(w + "quartile must be 1..4");
        c.analysis.conditionals.push_back(req);
      }
    }
    if (a.contains("clusters")) {
      if (a["clusters"].is_null()) {
        c.analysis.clusters.reset();
      } else {
        ClusterRequest req;
        req.k = detail::get_field<Index>(a["clusters"], "k", "analysis.clusters.", req.k);
        try {
          req.linkage = parse_linkage(detail::get_field<std::string>(a["clusters"], "linkage", "analysis.clusters.",
                                                                     std::string("average")));
        } catch (const std::invalid_argument& e) {
          throw ConfigError(std::string("analysis.clusters: ") + e.what());
        }
        if (req.k < 1 || req.k > c.nx * c.ny) throw ConfigError("analysis.clusters.k must lie in [1, n]");
        c.analysis.clusters = req;
      }
    }
    if (a.contains("contours")) {
      if (a["contours"].is_null()) {
        c.analysis.contours.reset();
      } else {
        ContourRequest req;
        req.boxes = detail::get_field<std::vector<Index>>(a["contours"], "boxes", "analysis.contours.", req.boxes);
        req.level = detail::get_field<double>(a["contours"], "level", "analysis.contours.", req.level);
        req.resolution = detail::get_field<Index>(a["contours"], "resolution", "analysis.contours.", req.resolution);
        if (p != 2) throw ConfigError("contours need exactly two variables");
        if (!(req.level > 0.0 && req.level < 1.0) || req.resolution < 3)
          throw ConfigError("analysis.contours: level must lie in (0, 1) and resolution be >= 3");
        for (Index b : req.boxes)
          if (b < 0 || b >= c.nx * c.ny) throw ConfigError("analysis.contours.boxes: box " + std::to_string(b) + " out of range");
        c.analysis.contours = req;
      }
    }
  }
  return c;
}

inline RunConfig load_run_config(const fs::path& path) {
  std::string text;
  try {
    text = read_file(path);
  } catch (const DataError& e) {
    throw ConfigError(e.what());
  }
  json j;
  try {
    j = json::parse(text);
  } catch (const json::parse_error& e) {
    throw ConfigError(path.string() + ": " + e.what());
  }
  return parse_run_config(j, fs::absolute(path).parent_path());
}

/// The configuration with every default expanded.
inline json effective_config_json(const RunConfig& c) {
  json j;
  j["lattice"] = {{"nx", c.nx}, {"ny", c.ny}, {"adjacency", to_string(c.adjacency)}};
  json vars = json::array();
  for (const auto& v : c.variables) vars.push_back({{"name", v.name}, {"units", v.units}});
  j["variables"] = vars;
  j["dataset"] = c.dataset;
  j["output_dir"] = c.output_dir;
  j["prior"] = {{"sigma2_alpha", c.prior.sigma2_alpha},
                {"sigma2_beta", c.prior.sigma2_beta},
                {"sigma2_h", c.prior.sigma2_h},
                {"sigma2", detail::variance_prior_json(c.prior.sigma2)},
                {"sigma2_b", detail::variance_prior_json(c.prior.sigma2_b)},
                {"tau2", detail::variance_prior_json(c.prior.tau2)},
                {"dep_box", {{"lower", detail::vector_json(c.prior.dep_box.lower)},
                             {"upper", detail::vector_json(c.prior.dep_box.upper)}}}};
  const auto& s = c.sampler;
  j["sampler"] = {{"n_chains", s.n_chains},
                  {"regime1_iters", s.regime1_iters},
                  {"regime2_iters", s.regime2_iters},
                  {"regime3_iters", s.regime3_iters},
                  {"target_acceptance", s.target_acceptance},
                  {"adapt_interval", s.adapt_interval},
                  {"adapt_gain", s.adapt_gain},
                  {"thin", s.thin},
                  {"seed", s.seed},
                  {"initial_dep_scale", s.initial_dep_scale},
                  {"initial_log_tau_scale", s.initial_log_tau_scale},
                  {"covariance_window", s.covariance_window},
                  {"monitored_h_components", s.monitored_h_components},
                  {"psrf_threshold", s.psrf_threshold},
                  {"start_max_tries", s.start_max_tries},
                  {"joint_block", to_string(s.joint_block)}};
  if (c.simulation) {
    const auto& m = *c.simulation;
    j["simulation"] = {{"members", m.members},
                       {"dependence", detail::dependence_json(m.dep)},
                       {"tau2", detail::vector_json(m.dep.tau2)},
                       {"sigma2", detail::vector_json(m.sigma2)},
                       {"sigma2_b", m.sigma2_b},
                       {"alpha", detail::matrix_json(m.alpha)},
                       {"beta_bar", detail::matrix_json(m.beta_bar)},
                       {"h_bar_sd", m.h_bar_sd},
                       {"spatial", m.spatial}};
  }
  json a;
  json probs = json::array();
  for (const auto& r : c.analysis.probabilities) {
    json conds = json::array();
    for (const auto& cond : r.conditions) conds.push_back(detail::condition_json(cond));
    probs.push_back({{"name", r.name}, {"conditions", conds}});
  }
  a["probabilities"] = probs;
  json condq = json::array();
  for (const auto& r : c.analysis.conditionals)
    condq.push_back({{"name", r.name},
                     {"cond_variable", r.cond_variable},
                     {"quartile", r.quartile},
                     {"target_variable", r.target_variable},
                     {"event", r.event == QuartileEvent::Upper ? "upper" : "lower"},
                     {"scope", r.scope == QuartileScope::Global ? "global" : "per-box"}});
  a["conditionals"] = condq;
  a["clusters"] = c.analysis.clusters
                      ? json{{"k", c.analysis.clusters->k},
                             {"linkage", c.analysis.clusters->linkage == Linkage::Average ? "average" : "complete"}}
                      : json(nullptr);
  a["contours"] = c.analysis.contours ? json{{"boxes", c.analysis.contours->boxes},
                                             {"level", c.analysis.contours->level},
                                             {"resolution", c.analysis.contours->resolution}}
                                      : json(nullptr);
  j["analysis"] = a;
  return j;
}

inline std::string config_hash(const std::string& effective_dump) { return hex64(fnv1a64(effective_dump)); }

// ---- dataset files -------------------------------------------------------------

/// Deterministic stand-in geography for synthetic grids: a regular
/// latitude/longitude mesh and a smooth elevation surface.
inline Eigen::MatrixXd synthetic_covariates(const GridLattice& g) {
  Eigen::MatrixXd raw(g.size(), 3);
  for (Index i = 0; i < g.size(); ++i) {
    const double x = static_cast<double>(g.col(i)), y = static_cast<double>(g.row(i));
    raw(i, 0) = 30.0 + 0.5 * y;
    raw(i, 1) = -125.0 + 0.5 * x;
    raw(i, 2) = 800.0 + 600.0 * std::sin(0.35 * x) * std::cos(0.25 * y);
  }
  return raw;
}

inline std::string dataset_csv(const EnsembleDataset& data) {
  const auto& g = data.lattice().grid();
  std::string out = "location,grid_x,grid_y,latitude,longitude,elevation";
  for (Index r = 0; r < data.m(); ++r)
    for (Index j = 0; j < data.p(); ++j) out += ",run" + std::to_string(r) + "_var" + std::to_string(j);
  out += '\n';
  const auto& raw = data.raw_covariates();
  for (Index i = 0; i < data.n(); ++i) {
    out += std::to_string(i) + ',' + std::to_string(g.col(i)) + ',' + std::to_string(g.row(i));
    for (Index c = 0; c < 3; ++c) out += ',' + format_double(raw(i, c));
    for (Index r = 0; r < data.m(); ++r)
      for (Index j = 0; j < data.p(); ++j) out += ',' + format_double(data.y(r)[i * data.p() + j]);
    out += '\n';
  }
  return out;
}

inline void save_ensemble(const fs::path& path, const EnsembleDataset& data) {
  if (data.raw_covariates().cols() != 3) throw std::invalid_argument("dataset files need three raw covariates");
  write_file_atomic(path, dataset_csv(data));
}

/// Parses a dataset file for an nx x ny lattice with p variables.
inline EnsembleDataset parse_ensemble(std::string_view text, Index nx, Index ny, Index p, Adjacency adj,
                                      const std::string& source = "dataset") {
  StackedLattice lattice(GridLattice(nx, ny, adj), p);
  const Index n = lattice.n();
  std::vector<std::string> lines;
  for (auto& l : split(text, '\n')) {
    if (!l.empty() && l.back() == '\r') l.pop_back();
    lines.push_back(std::move(l));
  }
  while (!lines.empty() && lines.back().empty()) lines.pop_back();
  if (lines.empty()) throw DataError(source + ": empty file");
  const auto header = split(lines[0], ',');
  const std::vector<std::string> fixed = {"location", "grid_x", "grid_y", "latitude", "longitude", "elevation"};
  if (header.size() < fixed.size() || !std::equal(fixed.begin(), fixed.end(), header.begin()))
    throw DataError(source + ": header must start with " + "location,grid_x,grid_y,latitude,longitude,elevation");
  const auto resp = static_cast<Index>(header.size() - fixed.size());
  if (resp == 0 || resp % p != 0)
    throw DataError(source + ": response columns (" + std::to_string(resp) + ") are not a multiple of p = " +
                    std::to_string(p));
  const Index m = resp / p;
  for (Index r = 0; r < m; ++r)
    for (Index j = 0; j < p; ++j) {
      const std::string want = "run" + std::to_string(r) + "_var" + std::to_string(j);
      if (header[fixed.size() + static_cast<std::size_t>(r * p + j)] != want)
        throw DataError(source + ": expected column '" + want + "' in the header");
    }
  if (static_cast<Index>(lines.size()) - 1 != n)
    throw DataError(source + ": expected " + std::to_string(n) + " grid boxes, found " +
                    std::to_string(lines.size() - 1) + " rows");
  Eigen::MatrixXd raw(n, 3);
  std::vector<Eigen::VectorXd> y(static_cast<std::size_t>(m), Eigen::VectorXd(lattice.dim()));
  std::vector<char> seen(static_cast<std::size_t>(n), 0);
  for (std::size_t li = 1; li < lines.size(); ++li) {
    const std::string where = source + " line " + std::to_string(li + 1);
    const auto f = split(lines[li], ',');
    if (f.size() != header.size())
      throw DataError(where + ": expected " + std::to_string(header.size()) + " fields, found " + std::to_string(f.size()));
    const auto loc = parse_double(f[0]);
    if (!loc || *loc != std::floor(*loc) || *loc < 0 || *loc >= static_cast<double>(n))
      throw DataError(where + ": field 'location' is not a grid box index");
    const auto i = static_cast<Index>(*loc);
    if (seen[static_cast<std::size_t>(i)]) throw DataError(where + ": grid box " + std::to_string(i) + " appears twice");
    seen[static_cast<std::size_t>(i)] = 1;
    const auto gx = parse_double(f[1]), gy = parse_double(f[2]);
    if (!gx || !gy || *gx != static_cast<double>(lattice.grid().col(i)) || *gy != static_cast<double>(lattice.grid().row(i)))
      throw DataError(where + " (grid box " + std::to_string(i) + "): grid_x/grid_y do not match the location index");
    for (std::size_t k = 3; k < f.size(); ++k) {
      const auto v = parse_double(f[k]);
      if (!v || !std::isfinite(*v))
        throw DataError(where + " (grid box " + std::to_string(i) + "): field '" + header[k] + "' is not a finite number");
      if (k < 6) {
        raw(i, static_cast<Index>(k - 3)) = *v;
      } else {
        const auto c = static_cast<Index>(k - 6);
        y[static_cast<std::size_t>(c / p)][i * p + c % p] = *v;
      }
    }
  }
  for (Index i = 0; i < n; ++i)
    if (!seen[static_cast<std::size_t>(i)]) throw DataError(source + ": grid box " + std::to_string(i) + " is missing");
  return EnsembleDataset(std::move(lattice), std::move(y), std::move(raw));
}

inline EnsembleDataset load_ensemble(const fs::path& path, const RunConfig& config) {
  return parse_ensemble(read_file(path), config.nx, config.ny, config.p(), config.adjacency, path.filename().string());
}

// ---- synthetic data --------------------------------------------------------------

struct SimulationTruth {
  SimulationSpec spec;
  std::uint64_t seed = 0;
  Eigen::VectorXd h_bar;
  std::vector<Eigen::MatrixXd> beta;
};

/// Forward simulation: hbar ~ N(0, sd^2 I), h_r ~ GMRF(hbar, Q), b_r ~ N(bbar,
/// s2_b), y_r = X1 a + X2 b_r + h_r + noise. spatial = false sets h to zero.
inline std::pair<EnsembleDataset, SimulationTruth> simulate_dataset(const SimulationSpec& spec,
                                                                    const StackedLattice& lattice, std::uint64_t seed) {
  const Index p = lattice.p();
  if (spec.dep.p() != p || spec.sigma2.size() != p || spec.alpha.rows() != 3 || spec.alpha.cols() != p ||
      spec.beta_bar.rows() != 1 || spec.beta_bar.cols() != p)
    throw std::invalid_argument("simulation parameters do not match the lattice");
  if (spec.members < 1) throw std::invalid_argument("simulation needs at least one member");
  if ((spec.sigma2.array() < 0.0).any() || spec.sigma2_b < 0.0 || spec.h_bar_sd < 0.0)
    throw std::invalid_argument("simulation variances must be non-negative");
  spec.dep.validate();
  std::mt19937_64 rng(seed);
  std::normal_distribution<double> z;
  const Eigen::MatrixXd raw = synthetic_covariates(lattice.grid());
  EnsembleDataset design(lattice, std::vector<Eigen::VectorXd>(static_cast<std::size_t>(spec.members),
                                                               Eigen::VectorXd::Zero(lattice.dim())),
                         raw);
  ModelState s = ModelState::initial(design);
  s.alpha = spec.alpha;
  s.beta_bar = spec.beta_bar;
  s.dep = spec.dep;
  s.sigma2 = spec.sigma2;
  s.sigma2_b = spec.sigma2_b;
  if (spec.spatial) {
    const auto f = factorize(assemble_precision(lattice, spec.dep), p);
    if (!f) throw std::invalid_argument("simulation dependence parameters do not give a positive definite precision");
    for (Index a = 0; a < s.h_bar.size(); ++a) s.h_bar[a] = spec.h_bar_sd * z(rng);
    for (auto& h : s.h) h = sample_gmrf(*f, s.h_bar, rng);
  }
  for (auto& b : s.beta)
    for (Index j = 0; j < p; ++j) b(0, j) = spec.beta_bar(0, j) + std::sqrt(spec.sigma2_b) * z(rng);
  auto y = draw_responses(design, s, rng);
  SimulationTruth truth{spec, seed, s.h_bar, s.beta};
  return {EnsembleDataset(lattice, std::move(y), raw), std::move(truth)};
}

inline json truth_json(const SimulationTruth& t) {
  json beta = json::array();
  for (const auto& b : t.beta) beta.push_back(detail::vector_json(b.row(0).transpose()));
  return {{"seed", t.seed},
          {"members", t.spec.members},
          {"dependence", detail::dependence_json(t.spec.dep)},
          {"tau2", detail::vector_json(t.spec.dep.tau2)},
          {"sigma2", detail::vector_json(t.spec.sigma2)},
          {"sigma2_b", t.spec.sigma2_b},
          {"alpha", detail::matrix_json(t.spec.alpha)},
          {"beta_bar", detail::matrix_json(t.spec.beta_bar)},
          {"h_bar_sd", t.spec.h_bar_sd},
          {"spatial", t.spec.spatial},
          {"beta", beta},
          {"h_bar", detail::vector_json(t.h_bar)}};
}

inline fs::path truth_path_for(const fs::path& dataset) {
  fs::path p = dataset;
  p.replace_extension(".truth.json");
  return p;
}

// ---- archive files -----------------------------------------------------------------
//
//   magic "MVMRFARC" | u8 version | u64 header length | header JSON
//   | blocks: column-major little-endian f64, in header order
//   | "MVMRFEND" | u64 pooled sample rows | u64 FNV-1a of all preceding bytes

namespace detail {

inline void put_u64(std::string& out, std::uint64_t v) {
  for (int k = 0; k < 8; ++k) out.push_back(static_cast<char>((v >> (8 * k)) & 0xff));
}

inline std::uint64_t get_u64(std::string_view in, std::size_t at) {
  std::uint64_t v = 0;
  for (int k = 0; k < 8; ++k) v |= static_cast<std::uint64_t>(static_cast<unsigned char>(in[at + k])) << (8 * k);
  return v;
}

inline void put_f64(std::string& out, double d) { put_u64(out, std::bit_cast<std::uint64_t>(d)); }

inline json archive_header(const PosteriorArchive& a) {
  json blocks = json::array();
  for (std::size_t b = 0; b < a.samples.names.size(); ++b)
    blocks.push_back({{"name", a.samples.names[b]}, {"rows", a.samples.blocks[b].rows()}, {"cols", a.samples.blocks[b].cols()}});
  json psrf = json::array();
  for (const auto& r : a.psrf) psrf.push_back({{"name", r.name}, {"psrf", r.psrf ? json(*r.psrf) : json(nullptr)}});
  json acc = json::array();
  for (const auto& chain : a.acceptance) {
    json c = json::array();
    for (const auto& reg : chain) c.push_back({{"regime", reg.regime}, {"blocks", reg.blocks}, {"rates", reg.rates}});
    acc.push_back(c);
  }
  json cfg = a.config_json.empty() ? json(nullptr) : json::parse(a.config_json);
  return {{"format_version", kArchiveVersion},
          {"created_by", std::string("mvmrf ") + kToolVersion},
          {"dims", {{"nx", a.dims.nx}, {"ny", a.dims.ny}, {"p", a.dims.p}, {"m", a.dims.m}, {"q1", a.dims.q1}, {"q2", a.dims.q2}}},
          {"n_chains", a.n_chains},
          {"samples_per_chain", a.samples_per_chain},
          {"seed", a.seed},
          {"config_hash", config_hash(a.config_json)},
          {"config", cfg},
          {"blocks", blocks},
          {"psrf", psrf},
          {"acceptance", acc},
          {"convergence_warning", a.convergence_warning}};
}

}  // namespace detail

inline std::string serialize_archive(const PosteriorArchive& a) {
  std::string out(kArchiveMagic, 8);
  out.push_back(static_cast<char>(kArchiveVersion));
  const std::string header = detail::archive_header(a).dump();
  detail::put_u64(out, header.size());
  out += header;
  for (const auto& b : a.samples.blocks)
    for (Index k = 0; k < b.size(); ++k) detail::put_f64(out, b.data()[k]);
  out.append(kArchiveEnd, 8);
  detail::put_u64(out, static_cast<std::uint64_t>(a.total_samples()));
  detail::put_u64(out, fnv1a64(out));
  return out;
}

inline PosteriorArchive deserialize_archive(std::string_view in, const std::string& source = "archive") {
  auto fail = [&](const std::string& why) { return DataError(source + ": " + why); };
  if (in.size() < 8 + 1 + 8 + 24 || std::memcmp(in.data(), kArchiveMagic, 8) != 0) throw fail("not an mvmrf archive");
  const auto version = static_cast<std::uint8_t>(in[8]);
  if (version != kArchiveVersion) throw fail("unsupported format version " + std::to_string(version));
  const std::size_t body_end = in.size() - 8;
  if (detail::get_u64(in, body_end) != fnv1a64(in.substr(0, body_end))) throw fail("checksum mismatch");
  const std::uint64_t hlen = detail::get_u64(in, 9);
  if (hlen > in.size() - 17 - 24) throw fail("header length exceeds file size");
  json h;
  try {
    h = json::parse(in.substr(17, hlen));
  } catch (const json::parse_error& e) {
    throw fail(std::string("bad header: ") + e.what());
  }
  PosteriorArchive a;
  try {
    const auto& d = h.at("dims");
    a.dims = {d.at("nx").get<Index>(), d.at("ny").get<Index>(), d.at("p").get<Index>(),
              d.at("m").get<Index>(),  d.at("q1").get<Index>(), d.at("q2").get<Index>()};
    a.n_chains = h.at("n_chains").get<Index>();
    a.samples_per_chain = h.at("samples_per_chain").get<Index>();
    a.seed = h.at("seed").get<std::uint64_t>();
    a.convergence_warning = h.at("convergence_warning").get<bool>();
    a.config_json = h.at("config").is_null() ? std::string() : h.at("config").dump();
    for (const auto& r : h.at("psrf"))
      a.psrf.push_back({r.at("name").get<std::string>(),
                        r.at("psrf").is_null() ? std::nullopt : std::optional<double>(r.at("psrf").get<double>())});
    for (const auto& chain : h.at("acceptance")) {
      std::vector<RegimeAcceptance> c;
      for (const auto& reg : chain)
        c.push_back({reg.at("regime").get<int>(), reg.at("blocks").get<std::vector<std::string>>(),
                     reg.at("rates").get<std::vector<double>>()});
      a.acceptance.push_back(std::move(c));
    }
    std::size_t at = 17 + hlen;
    for (const auto& b : h.at("blocks")) {
      const auto rows = b.at("rows").get<Index>(), cols = b.at("cols").get<Index>();
      if (rows != a.n_chains * a.samples_per_chain) throw fail("block '" + b.at("name").get<std::string>() + "' has the wrong row count");
      if (rows < 0 || cols < 0 || static_cast<std::size_t>(rows * cols) * 8 > body_end - 16 - at)
        throw fail("payload shorter than the header describes");
      Eigen::MatrixXd m(rows, cols);
      for (Index k = 0; k < m.size(); ++k, at += 8) m.data()[k] = std::bit_cast<double>(detail::get_u64(in, at));
      a.samples.names.push_back(b.at("name").get<std::string>());
      a.samples.blocks.push_back(std::move(m));
    }
    if (at != body_end - 16 || std::memcmp(in.data() + at, kArchiveEnd, 8) != 0) throw fail("footer not where expected");
    if (detail::get_u64(in, at + 8) != static_cast<std::uint64_t>(a.n_chains * a.samples_per_chain))
      throw fail("footer sample count does not match the header");
    if (!a.config_json.empty() && h.at("config_hash").get<std::string>() != config_hash(a.config_json))
      throw fail("config hash does not match the embedded configuration");
  } catch (const json::exception& e) {
    throw fail(std::string("malformed header: ") + e.what());
  }
  return a;
}

inline void write_archive(const fs::path& path, const PosteriorArchive& a) { write_file_atomic(path, serialize_archive(a)); }

inline PosteriorArchive read_archive(const fs::path& path) {
  return deserialize_archive(read_file(path), path.filename().string());
}

// ---- summaries ------------------------------------------------------------------------

struct ExtraProbability {
  Direction direction = Direction::Above;
  Threshold threshold;
  std::string label;
};

/// Parses "above:median", "below:0.5", ...
inline ExtraProbability parse_probability_flag(const std::string& s) {
  const auto parts = split(s, ':');
  if (parts.size() != 2) throw ConfigError("--prob expects DIRECTION:THRESHOLD, got '" + s + "'");
  ExtraProbability e;
  try {
    e.direction = parse_direction(parts[0]);
  } catch (const std::invalid_argument&) {
    throw ConfigError("--prob direction must be 'above' or 'below'");
  }
  if (parts[1] == "median") {
    e.threshold = Threshold::median();
  } else if (const auto v = parse_double(parts[1])) {
    e.threshold = Threshold::at(*v);
  } else {
    throw ConfigError("--prob threshold must be 'median' or a number");
  }
  e.label = parts[0] + "_" + parts[1];
  return e;
}

/// Output files (name -> contents) for the requested analyses. Warnings
/// (excluded degenerate boxes) go to `warn`.
inline std::map<std::string, std::string> summarize_archive(const PosteriorArchive& a, const AnalysisConfig& analysis,
                                                            const std::vector<ExtraProbability>& extra,
                                                            std::ostream& warn) {
  const auto& field = a.samples.get("field");
  const Index p = a.dims.p;
  const GridLattice grid(a.dims.nx, a.dims.ny);
  auto keyed = [&](const std::string& head, auto&& row) {
    std::string out = "location,grid_x,grid_y," + head + "\n";
    for (Index i = 0; i < grid.size(); ++i)
      out += std::to_string(i) + ',' + std::to_string(grid.col(i)) + ',' + std::to_string(grid.row(i)) + ',' + row(i) + '\n';
    return out;
  };
  std::map<std::string, std::string> files;
  auto prob_file = [&](const std::string& name, const std::vector<Condition>& conds) {
    const auto v = joint_probability(field, p, conds);
    files["prob_" + name + ".csv"] = keyed("probability", [&](Index i) { return format_double(v[i]); });
  };
  for (const auto& r : analysis.probabilities) prob_file(r.name, r.conditions);
  for (const auto& e : extra)
    for (Index j = 0; j < p; ++j) prob_file("var" + std::to_string(j) + "_" + e.label, {{j, e.direction, e.threshold}});
  for (const auto& r : analysis.conditionals) {
    const auto c = conditional_quartile_probability(field, p, r.cond_variable, r.quartile, r.target_variable, r.event, r.scope);
    files["conditional_" + r.name + ".csv"] = keyed("probability,count", [&](Index i) {
      return format_double(c.probability[i]) + ',' + std::to_string(c.count[static_cast<std::size_t>(i)]);
    });
  }
  const auto posts = fit_gridbox_posteriors(field, p);
  {
    std::string head;
    for (Index j = 0; j < p; ++j) head += (j ? "," : "") + std::string("mean_") + std::to_string(j);
    for (Index j = 0; j < p; ++j)
      for (Index l = j; l < p; ++l) head += ",cov_" + std::to_string(j) + std::to_string(l);
    head += ",degenerate";
    files["gridbox_posteriors.csv"] = keyed(head, [&](Index i) {
      const auto& g = posts[static_cast<std::size_t>(i)];
      std::string row;
      for (Index j = 0; j < p; ++j) row += (j ? "," : "") + format_double(g.dist.mean[j]);
      for (Index j = 0; j < p; ++j)
        for (Index l = j; l < p; ++l) row += ',' + format_double(g.dist.cov(j, l));
      return row + (g.degenerate ? ",1" : ",0");
    });
  }
  if (analysis.clusters) {
    const auto [kept, dropped] = drop_degenerate(posts);
    if (!dropped.empty()) warn << "warning: " << dropped.size() << " grid boxes with degenerate posteriors excluded from clustering\n";
    std::vector<Index> labels(static_cast<std::size_t>(grid.size()), -1);
    std::string tree = "step,a,b,distance,size\n";
    if (!kept.empty()) {
      const Index k = std::min<Index>(analysis.clusters->k, static_cast<Index>(kept.size()));
      const auto res = hierarchical_cluster(kept, analysis.clusters->linkage, k);
      for (std::size_t t = 0; t < kept.size(); ++t) labels[static_cast<std::size_t>(kept[t].location)] = res.labels[t];
      for (std::size_t t = 0; t < res.tree.size(); ++t) {
        const auto& m = res.tree[t];
        tree += std::to_string(t) + ',' + std::to_string(m.a) + ',' + std::to_string(m.b) + ',' + format_double(m.distance) +
                ',' + std::to_string(m.size) + '\n';
      }
    }
    files["clusters.csv"] = keyed("label", [&](Index i) { return std::to_string(labels[static_cast<std::size_t>(i)]); });
    files["cluster_tree.csv"] = tree;
  }
  if (analysis.contours && p == 2) {
    std::string out = "box,angle_index,x,y\n";
    for (Index b : analysis.contours->boxes) {
      const auto& g = posts.at(static_cast<std::size_t>(b));
      if (g.degenerate) {
        warn << "warning: no contour for grid box " << b << " (degenerate posterior)\n";
        continue;
      }
      const auto pts = contour_ellipse(g.dist, analysis.contours->level, analysis.contours->resolution);
      for (std::size_t k = 0; k < pts.size(); ++k)
        out += std::to_string(b) + ',' + std::to_string(k) + ',' + format_double(pts[k].first) + ',' +
               format_double(pts[k].second) + '\n';
    }
    files["contours.csv"] = out;
  }
  return files;
}

// ---- command line ---------------------------------------------------------------------

enum ExitCode : int { kExitOk = 0, kExitConfig = 2, kExitData = 3, kExitConvergence = 4, kExitInternal = 5 };

namespace detail {

inline RunConfig load_with_overrides(const std::string& config_path, std::optional<std::uint64_t> seed,
                                     std::optional<Index> chains, const std::string& out_dir) {
  RunConfig c = load_run_config(config_path);
  if (seed) c.sampler.seed = *seed;
  if (chains) {
    if (*chains < 1) throw ConfigError("--chains must be at least 1");
    c.sampler.n_chains = *chains;
  }
  if (!out_dir.empty()) c.output_dir = fs::absolute(out_dir).string();
  return c;
}

inline void print_psrf(const PosteriorArchive& a, double threshold, std::ostream& out) {
  out << "scalar psrf\n";
  for (const auto& r : a.psrf) {
    out << r.name << ' ' << (r.psrf ? format_double(*r.psrf) : std::string("degenerate"));
    if (r.psrf && !(*r.psrf < threshold)) out << " *";
    out << '\n';
  }
}

inline void print_acceptance(const PosteriorArchive& a, std::ostream& out) {
  std::map<std::pair<int, std::string>, std::pair<double, int>> mean;
  for (const auto& chain : a.acceptance)
    for (const auto& reg : chain)
      for (std::size_t b = 0; b < reg.blocks.size(); ++b) {
        auto& e = mean[{reg.regime, reg.blocks[b]}];
        e.first += reg.rates[b];
        ++e.second;
      }
  out << "regime block mean_acceptance\n";
  for (const auto& [key, v] : mean) out << key.first << ' ' << key.second << ' ' << format_double(v.first / v.second) << '\n';
}

}  // namespace detail

/// Entry point of the `mvmrf` tool. Returns the process exit status.
inline int cli_main(int argc, const char* const* argv, std::ostream& out = std::cout, std::ostream& err = std::cerr) {
  CLI::App app{"Multivariate Markov random field analysis of gridded ensembles", "mvmrf"};
  app.set_version_flag("--version", kToolVersion);
  app.require_subcommand(1);

  std::string config_path, out_dir, archive_path, data_out;
  std::optional<std::uint64_t> seed;
  std::optional<Index> chains;
  Index threads = 0;
  bool verbose = false;
  std::vector<std::string> prob_flags;

  auto add_common = [&](CLI::App* sub) {
    sub->add_option("--config", config_path, "run configuration (JSON)")->required();
    sub->add_option("--seed", seed, "override the base random seed");
    sub->add_option("--chains", chains, "override the number of chains");
    sub->add_option("--out", out_dir, "override the output directory");
  };
  auto* validate = app.add_subcommand("validate", "check a configuration and its dataset");
  add_common(validate);
  auto* simulate = app.add_subcommand("simulate", "write a synthetic dataset and its truth sidecar");
  add_common(simulate);
  simulate->add_option("--data-out", data_out, "dataset path (default: the configured dataset)");
  auto* sample = app.add_subcommand("sample", "run the sampler and write a posterior archive");
  add_common(sample);
  sample->add_option("--threads", threads, "worker threads (default: MVMRF_THREADS or hardware)");
  sample->add_flag("--verbose,-v", verbose, "progress lines on stderr");
  auto* diagnose = app.add_subcommand("diagnose", "PSRF table and acceptance summary of an archive");
  add_common(diagnose);
  diagnose->add_option("--archive", archive_path, "archive path (default: <out>/posterior.mvarc)");
  auto* summarize = app.add_subcommand("summarize", "probability fields, clusters and contours from an archive");
  add_common(summarize);
  summarize->add_option("--archive", archive_path, "archive path (default: <out>/posterior.mvarc)");
  summarize->add_option("--prob", prob_flags, "extra per-variable probability field, e.g. above:median");

  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& e) {
    const int code = app.exit(e, out, err);
    return code == 0 ? kExitOk : kExitConfig;
  }

  try {
    const RunConfig cfg = detail::load_with_overrides(config_path, seed, chains, out_dir);
    const std::string effective = effective_config_json(cfg).dump();
    const fs::path archive_file = archive_path.empty() ? cfg.output_path() / "posterior.mvarc" : fs::path(archive_path);

    if (validate->parsed()) {
      const auto lattice = cfg.lattice();
      if (!fs::exists(cfg.dataset_path())) throw DataError("dataset " + cfg.dataset_path().string() + " does not exist");
      const auto data = load_ensemble(cfg.dataset_path(), cfg);
      out << "lattice " << cfg.nx << " x " << cfg.ny << " (" << lattice.n() << " boxes), p = " << cfg.p()
          << ", m = " << data.m() << ", state dimension " << lattice.dim() << '\n';
      out << "precision nonzeros " << PrecisionAssembler(lattice).expected_nnz() << ", dependence parameters "
          << dependence_count(cfg.p()) << '\n';
      out << "config hash " << config_hash(effective) << '\n';
      return kExitOk;
    }

    if (simulate->parsed()) {
      if (!cfg.simulation) throw ConfigError("configuration has no 'simulation' section");
      const fs::path target = data_out.empty() ? cfg.dataset_path() : fs::path(data_out);
      std::pair<EnsembleDataset, SimulationTruth> sim = [&] {
        try {
          return simulate_dataset(*cfg.simulation, cfg.lattice(), cfg.sampler.seed);
        } catch (const std::invalid_argument& e) {
          throw ConfigError(std::string("simulation: ") + e.what());
        }
      }();
      save_ensemble(target, sim.first);
      write_file_atomic(truth_path_for(target), truth_json(sim.second).dump(2) + "\n");
      out << "wrote " << target.string() << " (" << sim.first.m() << " members)\n";
      return kExitOk;
    }

    if (sample->parsed()) {
      const auto data = load_ensemble(cfg.dataset_path(), cfg);
      SamplerConfig sc = cfg.sampler;
      sc.threads = threads;
      auto archive = run_ensemble_analysis(sc, data, cfg.prior, verbose ? &err : nullptr);
      archive.config_json = effective;
      write_archive(archive_file, archive);
      out << "wrote " << archive_file.string() << " (" << archive.total_samples() << " samples, "
          << archive.n_chains << " chains)\n";
      detail::print_psrf(archive, cfg.sampler.psrf_threshold, out);
      if (archive.convergence_warning) {
        err << "warning: PSRF >= " << cfg.sampler.psrf_threshold << " for at least one monitored scalar\n";
        return kExitConvergence;
      }
      return kExitOk;
    }

    const auto archive = read_archive(archive_file);
    if (diagnose->parsed()) {
      out << "archive " << archive_file.filename().string() << ": " << archive.n_chains << " chains x "
          << archive.samples_per_chain << " samples, config hash " << config_hash(archive.config_json) << '\n';
      detail::print_psrf(archive, cfg.sampler.psrf_threshold, out);
      detail::print_acceptance(archive, out);
      return archive.convergence_warning ? kExitConvergence : kExitOk;
    }

    std::vector<ExtraProbability> extra;
    for (const auto& f : prob_flags) extra.push_back(parse_probability_flag(f));
    const auto files = summarize_archive(archive, cfg.analysis, extra, err);
    const fs::path dir = cfg.output_path() / "summary";
    for (const auto& [name, text] : files) write_file_atomic(dir / name, text);
    out << "wrote " << files.size() << " summary files to " << dir.string() << '\n';
    return kExitOk;
  } catch (const ConfigError& e) {
    err << "config error: " << e.what() << '\n';
    return kExitConfig;
  } catch (const DataError& e) {
    err << "data error: " << e.what() << '\n';
    return kExitData;
  } catch (const SaturationError& e) {
    err << "startup error: " << e.what() << '\n';
    return kExitData;
  } catch (const DegeneracyError& e) {
    err << "data error: " << e.what() << '\n';
    return kExitData;
  } catch (const std::invalid_argument& e) {
    err << "data error: " << e.what() << '\n';
    return kExitData;
  } catch (const std::exception& e) {
    err << "internal error: " << e.what() << '\n';
    return kExitInternal;
  }
}

}  // namespace mvmrf
