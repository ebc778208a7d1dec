#pragma once

#include <cstdint>
#include <fstream>
#include <initializer_list>
#include <limits>
#include <optional>
#include <set>
#include <sstream>
#include <stdexcept>
#include <string>
#include <variant>
#include <vector>

#include <json.hpp>

#include "slm/data_assim.hpp"
#include "slm/lm_core.hpp"
#include "slm/oracles.hpp"
#include "slm/problem.hpp"
#include "slm/subproblem.hpp"

namespace slm::app {

inline constexpr int kSchemaVersion = 1;

using Json = nlohmann::json;

/// Invalid or unreadable configuration (exit status 1).
class ConfigError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

/// Parses a JSON file; syntax errors are reported as path:line:column.
inline Json load_json_text(const std::string& text, const std::string& origin) {
  try {
    return Json::parse(text);
  } catch (const Json::parse_error& e) {
    std::size_t line = 1, col = 1;
    const std::size_t stop = std::min<std::size_t>(e.byte == 0 ? 0 : e.byte - 1, text.size());
    for (std::size_t i = 0; i < stop; ++i) {
      if (text[i] == '\n') {
        ++line;
        col = 1;
      } else {
        ++col;
      }
    }
    throw ConfigError(origin + ":" + std::to_string(line) + ":" + std::to_string(col) + ": parse error: " + e.what());
  }
}

inline Json load_json_file(const std::string& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw ConfigError("cannot read config file " + path);
  std::ostringstream ss;
  ss << in.rdbuf();
  return load_json_text(ss.str(), path);
}

// ---------------------------------------------------------------------------------------------
// Typed field access with path-qualified messages

class Reader {
 public:
  Reader(const Json& j, std::string path) : j_(j), path_(std::move(path)) {
    if (!j_.is_object()) throw ConfigError(where() + ": expected an object");
  }

  /// Rejects keys outside `allowed` so typos do not pass silently.
  void allow(std::initializer_list<const char*> allowed) const {
    std::set<std::string> names;
    for (const char* a : allowed) names.insert(a);
    for (auto it = j_.begin(); it != j_.end(); ++it)
      if (!names.count(it.key())) throw ConfigError(where() + ": unknown key \"" + it.key() + "\"");
  }

  bool has(const char* key) const { return j_.contains(key) && !j_.at(key).is_null(); }

  Reader child(const char* key) const { return Reader(j_.at(key), path_ + "." + key); }

  double number(const char* key, double fallback) const {
    if (!has(key)) return fallback;
    const Json& v = j_.at(key);
    if (v.is_string()) {
      const auto s = v.get<std::string>();
      if (s == "inf" || s == "infinity") return std::numeric_limits<double>::infinity();
    }
    if (!v.is_number()) throw ConfigError(field(key) + ": expected a number");
    return v.get<double>();
  }

  std::optional<double> optional_number(const char* key) const {
    if (!has(key)) return std::nullopt;
    return number(key, 0.0);
  }

  long long integer(const char* key, long long fallback) const {
    if (!has(key)) return fallback;
    const Json& v = j_.at(key);
    if (!v.is_number_integer()) throw ConfigError(field(key) + ": expected an integer");
    return v.get<long long>();
  }

  std::uint64_t unsigned_integer(const char* key, std::uint64_t fallback) const {
    if (!has(key)) return fallback;
    const Json& v = j_.at(key);
    if (!v.is_number_unsigned() && !(v.is_number_integer() && v.get<long long>() >= 0))
      throw ConfigError(field(key) + ": expected a non-negative integer");
    return v.get<std::uint64_t>();
  }

  bool boolean(const char* key, bool fallback) const {
    if (!has(key)) return fallback;
    const Json& v = j_.at(key);
    if (!v.is_boolean()) throw ConfigError(field(key) + ": expected true or false");
    return v.get<bool>();
  }

  std::string string(const char* key, const std::string& fallback) const {
    if (!has(key)) return fallback;
    const Json& v = j_.at(key);
    if (!v.is_string()) throw ConfigError(field(key) + ": expected a string");
    return v.get<std::string>();
  }

  std::vector<double> numbers(const char* key) const {
    const Json& v = j_.at(key);
    if (!v.is_array()) throw ConfigError(field(key) + ": expected an array of numbers");
    std::vector<double> out;
    for (const auto& e : v) {
      if (!e.is_number()) throw ConfigError(field(key) + ": expected an array of numbers");
      out.push_back(e.get<double>());
    }
    return out;
  }

  Vector vector(const char* key) const {
    const auto v = numbers(key);
    return Eigen::Map<const Vector>(v.data(), static_cast<Index>(v.size()));
  }

  Matrix matrix(const char* key) const {
    const Json& v = j_.at(key);
    if (!v.is_array() || v.empty()) throw ConfigError(field(key) + ": expected a non-empty array of rows");
    const std::size_t cols = v.front().is_array() ? v.front().size() : 0;
    if (cols == 0) throw ConfigError(field(key) + ": rows must be non-empty arrays");
    Matrix m(static_cast<Index>(v.size()), static_cast<Index>(cols));
    for (std::size_t i = 0; i < v.size(); ++i) {
      if (!v[i].is_array() || v[i].size() != cols) throw ConfigError(field(key) + ": ragged matrix");
      for (std::size_t j = 0; j < cols; ++j) {
        if (!v[i][j].is_number()) throw ConfigError(field(key) + ": expected numbers");
        m(static_cast<Index>(i), static_cast<Index>(j)) = v[i][j].get<double>();
      }
    }
    return m;
  }

  const Json& raw(const char* key) const { return j_.at(key); }
  std::string field(const char* key) const { return path_ + "." + key; }
  std::string where() const { return path_; }

 private:
  const Json& j_;
  std::string path_;
};

/// Checks schema_version and (when present) kind against the requested command.
inline void check_header(const Reader& root, const std::string& kind) {
  if (!root.has("schema_version")) throw ConfigError("config: missing schema_version");
  const long long version = root.integer("schema_version", 0);
  if (version != kSchemaVersion)
    throw ConfigError("config: unsupported schema_version " + std::to_string(version) + " (expected " +
                      std::to_string(kSchemaVersion) + ")");
  const std::string k = root.string("kind", kind);
  if (k != kind) throw ConfigError("config: kind \"" + k + "\" does not match command \"" + kind + "\"");
}

// ---------------------------------------------------------------------------------------------
// Sections

inline SolverConfig parse_solver(const Reader& r, SolverConfig cfg = {}) {
  r.allow({"eta1", "eta2", "mu_min", "mu0", "lambda", "mu_max", "max_iters", "cg_tol", "cg_max_iters", "grad_tol"});
  cfg.eta1 = r.number("eta1", cfg.eta1);
  cfg.eta2 = r.number("eta2", cfg.eta2);
  cfg.mu_min = r.number("mu_min", cfg.mu_min);
  cfg.mu0 = r.number("mu0", cfg.mu0);
  cfg.lambda = r.number("lambda", cfg.lambda);
  cfg.mu_max = r.number("mu_max", cfg.mu_max);
  cfg.max_iters = static_cast<int>(r.integer("max_iters", cfg.max_iters));
  cfg.cg_tol = r.number("cg_tol", cfg.cg_tol);
  cfg.cg_max_iters = static_cast<int>(r.integer("cg_max_iters", cfg.cg_max_iters));
  if (r.has("grad_tol")) cfg.grad_tol = r.number("grad_tol", 0.0);
  try {
    cfg.validate();
  } catch (const Error& e) {
    throw ConfigError(r.where() + ": " + e.what());
  }
  return cfg;
}

inline AccuracyConstants parse_accuracy(const Reader& r, AccuracyConstants c = {}) {
  c.kappa_ef = r.number("kappa_ef", c.kappa_ef);
  c.kappa_eg = r.number("kappa_eg", c.kappa_eg);
  c.eps_f = r.number("eps_f", c.eps_f);
  c.p = r.number("p", c.p);
  c.q = r.number("q", c.q);
  try {
    c.validate();
  } catch (const Error& e) {
    throw ConfigError(r.where() + ": " + e.what());
  }
  return c;
}

struct ProblemSpec {
  std::string type = "linear";  ///< linear | quadratic | rosenbrock
  long long rows = 10;
  long long cols = 5;
  std::uint64_t seed = 0;
  std::optional<Matrix> A;
  std::optional<Vector> b;
  Vector diag;
  Vector x_star;
};

inline ProblemSpec parse_problem(const Reader& r) {
  ProblemSpec p;
  p.type = r.string("type", p.type);
  if (p.type == "linear") {
    r.allow({"type", "rows", "cols", "seed", "A", "b"});
    if (r.has("A") != r.has("b")) throw ConfigError(r.where() + ": give both A and b, or neither");
    if (r.has("A")) {
      p.A = r.matrix("A");
      p.b = r.vector("b");
      if (p.A->rows() != p.b->size()) throw ConfigError(r.where() + ": A and b have different row counts");
      if (p.A->rows() < p.A->cols()) throw ConfigError(r.where() + ": A must have at least as many rows as columns");
    } else {
      p.rows = r.integer("rows", p.rows);
      p.cols = r.integer("cols", p.cols);
      p.seed = r.unsigned_integer("seed", p.seed);
      if (p.cols < 1 || p.rows < p.cols) throw ConfigError(r.where() + ": need rows >= cols >= 1");
    }
  } else if (p.type == "quadratic") {
    r.allow({"type", "diag", "x_star"});
    p.diag = r.vector("diag");
    p.x_star = r.has("x_star") ? r.vector("x_star") : Vector::Zero(p.diag.size());
    if (p.diag.size() == 0 || p.diag.size() != p.x_star.size())
      throw ConfigError(r.where() + ": diag and x_star must be non-empty with equal length");
  } else if (p.type == "rosenbrock") {
    r.allow({"type"});
  } else {
    throw ConfigError(r.field("type") + ": unknown problem type \"" + p.type + "\"");
  }
  return p;
}

/// A problem built from its spec, with analytic constants where available.
struct BuiltProblem {
  ResidualProblem problem;
  std::optional<BlockResidualProblem> blocks;
  Vector x0;
  std::optional<double> nu;             ///< Lipschitz constant of grad f
  std::optional<double> jacobian_norm;  ///< sup ||J(x)||
};

inline BuiltProblem build_problem(const ProblemSpec& spec, const std::optional<Vector>& x0) {
  BuiltProblem b;
  if (spec.type == "linear") {
    LinearData d = spec.A ? LinearData{*spec.A, *spec.b} : random_linear_data(spec.rows, spec.cols, spec.seed);
    b.problem = make_linear_problem(d.A, d.b);
    b.blocks = make_linear_block_problem(d.A, d.b);
    const double s = Eigen::JacobiSVD<Matrix>(d.A).singularValues()(0);
    b.nu = s * s;
    b.jacobian_norm = s;
  } else if (spec.type == "quadratic") {
    b.problem = make_diagonal_quadratic(spec.diag, spec.x_star);
    const double s = spec.diag.cwiseAbs().maxCoeff();
    b.nu = s * s;
    b.jacobian_norm = s;
  } else {
    b.problem = make_rosenbrock();
  }
  b.x0 = x0 ? *x0 : Vector::Zero(b.problem.dim);
  if (b.x0.size() != b.problem.dim)
    throw ConfigError("config.x0: expected " + std::to_string(b.problem.dim) + " components");
  return b;
}

struct OracleSpec {
  std::string type = "exact";  ///< exact | gaussian | bernoulli | subsample
  AccuracyConstants constants;
  double jacobian_noise = 0.0;
  double kappa_Jm = std::numeric_limits<double>::infinity();
  double corruption = 1.0;
  double batch_fraction = 0.5;
};

inline OracleSpec parse_oracle(const Reader& r) {
  OracleSpec o;
  o.type = r.string("type", o.type);
  if (o.type == "exact") {
    r.allow({"type", "kappa_ef", "kappa_eg", "eps_f"});
  } else if (o.type == "gaussian") {
    r.allow({"type", "kappa_ef", "kappa_eg", "eps_f", "p", "q", "jacobian_noise", "kappa_Jm"});
    o.jacobian_noise = r.number("jacobian_noise", o.jacobian_noise);
    o.kappa_Jm = r.number("kappa_Jm", o.kappa_Jm);
  } else if (o.type == "bernoulli") {
    r.allow({"type", "kappa_ef", "kappa_eg", "eps_f", "p", "q", "corruption"});
    o.corruption = r.number("corruption", o.corruption);
  } else if (o.type == "subsample") {
    r.allow({"type", "kappa_ef", "kappa_eg", "eps_f", "batch_fraction"});
    o.batch_fraction = r.number("batch_fraction", o.batch_fraction);
  } else {
    throw ConfigError(r.field("type") + ": unknown oracle type \"" + o.type + "\"");
  }
  o.constants = parse_accuracy(r);
  if (o.type == "gaussian" && (o.constants.p >= 1.0 || o.constants.q >= 1.0))
    throw ConfigError(r.where() + ": the gaussian oracle needs p < 1 and q < 1");
  return o;
}

/// Type-erased oracle over the four configurable kinds; serves both solver roles.
class AnyOracle {
 public:
  using Variant = std::variant<ExactOracle, GaussianOracle, BernoulliOracle, SubsampleOracle>;

  explicit AnyOracle(Variant v) : v_(std::move(v)) {}

  ModelEstimate model(const Vector& x, double mu) {
    return std::visit([&](auto& o) { return o.model(x, mu); }, v_);
  }

  EstimatePair estimates(const Vector& x, const Vector& trial, double mu) {
    return std::visit([&](auto& o) { return o.estimates(x, trial, mu); }, v_);
  }

  void reseed(std::uint64_t seed) {
    std::visit(
        [&](auto& o) {
          if constexpr (Reseedable<std::decay_t<decltype(o)>>) o.reseed(seed);
        },
        v_);
  }

 private:
  Variant v_;
};

/// Oracle over `problem` (and `blocks` for mini-batching); both must outlive it.
inline AnyOracle make_oracle(const OracleSpec& spec, const ResidualProblem& problem,
                             const BlockResidualProblem* blocks) {
  if (spec.type == "gaussian")
    return AnyOracle(GaussianOracle(problem, spec.constants, spec.jacobian_noise, spec.kappa_Jm));
  if (spec.type == "bernoulli") return AnyOracle(BernoulliOracle(problem, spec.constants, spec.corruption));
  if (spec.type == "subsample") {
    if (!blocks) throw ConfigError("config.oracle: the subsample oracle needs a linear (row-block) problem");
    try {
      return AnyOracle(SubsampleOracle(*blocks, spec.batch_fraction, spec.constants));
    } catch (const Error& e) {
      throw ConfigError(std::string("config.oracle: ") + e.what());
    }
  }
  return AnyOracle(ExactOracle(problem));
}

inline AnyOracle make_oracle(const OracleSpec& spec, const BuiltProblem& built) {
  return make_oracle(spec, built.problem, built.blocks ? &*built.blocks : nullptr);
}

/// Uniform bound on the model Jacobian the oracle can produce, when certifiable.
inline std::optional<double> certified_kappa_Jm(const OracleSpec& spec, const BuiltProblem& built) {
  if (spec.type == "gaussian" && spec.jacobian_noise > 0.0) {
    if (std::isfinite(spec.kappa_Jm)) return spec.kappa_Jm;
    return std::nullopt;
  }
  if (spec.type == "subsample") return std::nullopt;
  if (spec.type == "gaussian" && built.jacobian_norm && std::isfinite(spec.kappa_Jm))
    return std::min(*built.jacobian_norm, spec.kappa_Jm);
  return built.jacobian_norm;
}

inline std::optional<Vector> parse_x0(const Reader& root) {
  if (!root.has("x0")) return std::nullopt;
  return root.vector("x0");
}

// ---------------------------------------------------------------------------------------------
// Command configs

struct SolveConfig {
  ProblemSpec problem;
  std::optional<Vector> x0;
  OracleSpec oracle;
  SolverConfig solver;
  std::string subsolver = "cg";  ///< cg | exact
  std::uint64_t master_seed = 0;
};

inline SolveConfig parse_solve_config(const Json& j) {
  const Reader root(j, "config");
  root.allow({"schema_version", "kind", "master_seed", "problem", "x0", "oracle", "solver", "subsolver"});
  check_header(root, "solve");
  SolveConfig c;
  c.master_seed = root.unsigned_integer("master_seed", 0);
  if (root.has("problem")) c.problem = parse_problem(root.child("problem"));
  c.x0 = parse_x0(root);
  if (root.has("oracle")) c.oracle = parse_oracle(root.child("oracle"));
  if (root.has("solver")) c.solver = parse_solver(root.child("solver"));
  c.subsolver = root.string("subsolver", c.subsolver);
  if (c.subsolver != "cg" && c.subsolver != "exact")
    throw ConfigError("config.subsolver: expected \"cg\" or \"exact\"");
  return c;
}

struct ComplexityConfig {
  ProblemSpec problem;
  std::optional<Vector> x0;
  OracleSpec oracle;
  SolverConfig solver;
  std::vector<double> epsilon_grid{1e-1, 3e-2, 1e-2};
  int replications = 200;
  int cap = 100000;
  std::optional<double> nu;        ///< overrides the analytic value
  std::optional<double> kappa_Jm;  ///< overrides the certified value
  std::uint64_t master_seed = 0;
};

inline ComplexityConfig parse_complexity_config(const Json& j) {
  const Reader root(j, "config");
  root.allow({"schema_version", "kind", "master_seed", "problem", "x0", "oracle", "solver", "epsilon_grid",
              "replications", "cap", "theory"});
  check_header(root, "complexity");
  ComplexityConfig c;
  c.master_seed = root.unsigned_integer("master_seed", 0);
  if (root.has("problem")) c.problem = parse_problem(root.child("problem"));
  c.x0 = parse_x0(root);
  if (root.has("oracle")) c.oracle = parse_oracle(root.child("oracle"));
  if (root.has("solver")) c.solver = parse_solver(root.child("solver"));
  if (root.has("epsilon_grid")) c.epsilon_grid = root.numbers("epsilon_grid");
  c.replications = static_cast<int>(root.integer("replications", c.replications));
  c.cap = static_cast<int>(root.integer("cap", c.cap));
  if (root.has("theory")) {
    const Reader t = root.child("theory");
    t.allow({"nu", "kappa_Jm"});
    c.nu = t.optional_number("nu");
    c.kappa_Jm = t.optional_number("kappa_Jm");
  }
  if (c.epsilon_grid.empty()) throw ConfigError("config.epsilon_grid: must not be empty");
  for (double e : c.epsilon_grid)
    if (!(e > 0.0)) throw ConfigError("config.epsilon_grid: tolerances must be positive");
  if (c.replications < 1) throw ConfigError("config.replications: must be positive");
  if (c.cap < 1) throw ConfigError("config.cap: must be positive");
  const double pq = c.oracle.constants.p * c.oracle.constants.q;
  if (!(pq > 0.5))
    throw ConfigError("config.oracle: the complexity study requires pq > 1/2 (got pq = " + std::to_string(pq) + ")");
  return c;
}

struct SweepConfig {
  int snapshots = 1000;
  int n_min = 2;
  int n_max = 8;
  double gamma_min = 1e-6;
  double gamma_max = 1e6;
  int extra_rows = 2;
  std::uint64_t master_seed = 0;
};

inline SweepConfig parse_sweep_config(const Json& j) {
  const Reader root(j, "config");
  root.allow({"schema_version", "kind", "master_seed", "snapshots", "n_min", "n_max", "gamma_min", "gamma_max",
              "extra_rows"});
  check_header(root, "sweep");
  SweepConfig c;
  c.master_seed = root.unsigned_integer("master_seed", 0);
  c.snapshots = static_cast<int>(root.integer("snapshots", c.snapshots));
  c.n_min = static_cast<int>(root.integer("n_min", c.n_min));
  c.n_max = static_cast<int>(root.integer("n_max", c.n_max));
  c.gamma_min = root.number("gamma_min", c.gamma_min);
  c.gamma_max = root.number("gamma_max", c.gamma_max);
  c.extra_rows = static_cast<int>(root.integer("extra_rows", c.extra_rows));
  if (c.snapshots < 1 || c.n_min < 1 || c.n_max < c.n_min || c.extra_rows < 0)
    throw ConfigError("config: need snapshots >= 1, 1 <= n_min <= n_max, extra_rows >= 0");
  if (!(c.gamma_min > 0.0) || c.gamma_max < c.gamma_min)
    throw ConfigError("config: need 0 < gamma_min <= gamma_max");
  return c;
}

inline TwinConfig parse_twin_config(const Json& j) {
  const Reader root(j, "config");
  root.allow({"schema_version", "kind", "master_seed", "lorenz", "obs_every", "observed", "obs_variance", "sigma_b",
              "ensemble_sizes", "seeds", "y_mode", "resample_each_iteration", "accuracy", "solver"});
  check_header(root, "da-twin");
  TwinConfig c;
  c.master_seed = root.unsigned_integer("master_seed", 0);
  if (root.has("lorenz")) {
    const Reader l = root.child("lorenz");
    l.allow({"sigma", "rho", "beta", "dt", "window"});
    c.lorenz.sigma = l.number("sigma", c.lorenz.sigma);
    c.lorenz.rho = l.number("rho", c.lorenz.rho);
    c.lorenz.beta = l.number("beta", c.lorenz.beta);
    c.lorenz.dt = l.number("dt", c.lorenz.dt);
    c.lorenz.steps_per_window = static_cast<int>(l.integer("window", c.lorenz.steps_per_window));
    if (!(c.lorenz.dt > 0.0) || c.lorenz.steps_per_window < 0)
      throw ConfigError("config.lorenz: need dt > 0 and window >= 0");
  }
  c.obs_every = static_cast<int>(root.integer("obs_every", c.obs_every));
  if (c.obs_every < 1) throw ConfigError("config.obs_every: must be positive");
  if (root.has("observed")) {
    c.observed.clear();
    for (double v : root.numbers("observed")) {
      if (v != static_cast<int>(v) || v < 0 || v > 2) throw ConfigError("config.observed: components are 0, 1 or 2");
      c.observed.push_back(static_cast<int>(v));
    }
    if (c.observed.empty()) throw ConfigError("config.observed: must not be empty");
  }
  c.obs_variance = root.number("obs_variance", c.obs_variance);
  c.sigma_b = root.number("sigma_b", c.sigma_b);
  if (!(c.obs_variance > 0.0) || !(c.sigma_b > 0.0))
    throw ConfigError("config: obs_variance and sigma_b must be positive");
  if (root.has("ensemble_sizes")) {
    c.ensemble_sizes.clear();
    for (const auto& e : root.raw("ensemble_sizes")) {
      if (e.is_string() && (e.get<std::string>() == "inf" || e.get<std::string>() == "infinity")) {
        c.ensemble_sizes.push_back(0);
      } else if (e.is_number_integer() && e.get<long long>() >= 4) {
        c.ensemble_sizes.push_back(static_cast<int>(e.get<long long>()));
      } else {
        throw ConfigError("config.ensemble_sizes: entries are integers >= 4 or \"inf\"");
      }
    }
    if (c.ensemble_sizes.empty()) throw ConfigError("config.ensemble_sizes: must not be empty");
  }
  if (root.has("seeds")) {
    c.seeds.clear();
    for (const auto& e : root.raw("seeds")) {
      if (!e.is_number_unsigned()) throw ConfigError("config.seeds: entries are non-negative integers");
      c.seeds.push_back(e.get<std::uint64_t>());
    }
    if (c.seeds.empty()) throw ConfigError("config.seeds: must not be empty");
  }
  const std::string mode = root.string("y_mode", "noise_only");
  if (mode == "noise_only") {
    c.y_mode = ObservationMode::NoiseOnly;
  } else if (mode == "truth_plus_noise") {
    c.y_mode = ObservationMode::TruthPlusNoise;
  } else {
    throw ConfigError("config.y_mode: expected \"noise_only\" or \"truth_plus_noise\"");
  }
  c.resample_each_iteration = root.boolean("resample_each_iteration", c.resample_each_iteration);
  if (root.has("accuracy")) {
    const Reader a = root.child("accuracy");
    a.allow({"kappa_ef", "kappa_eg", "eps_f"});
    c.constants = parse_accuracy(a);
  }
  if (root.has("solver")) c.solver = parse_solver(root.child("solver"), c.solver);
  return c;
}

}  // namespace slm::app
