#pragma once

// Sectioned key=value run configuration.
//
//   # comment            ; comment
//   [section]
//   key = value          lists are comma separated: delays = 0.1, 0.5, 1.0
//
// Sections: system, loop, dataset, nno, train, bench, verify. Every key has
// a typed default; unknown sections or keys and duplicate keys are errors.

#include <predfb/backstepping.hpp>
#include <predfb/bench.hpp>
#include <predfb/train.hpp>

#include <istream>
#include <sstream>
#include <variant>

namespace predfb {

class ConfigError : public Error {
 public:
  using Error::Error;
};

struct SystemConfig {
  std::string kind = "manipulator";  ///< manipulator | linear
  double delay = 0.5;
  // linear plant xdot = a x + b u, kappa = -k x
  double a = 1.0;
  double b = 1.0;
  double k = 2.0;
  double nominal = 1.0;
  ManipulatorParams manipulator{};
  double max_speed = 3.0;  ///< velocity half-width of the manipulator state box
};

struct LoopSection {
  double dt = 0.1;
  double duration = 10.0;
  std::uint64_t seed = 1;  ///< master seed
  double ic_lo = -0.05;
  double ic_hi = 0.05;
  int trajectories = 25;
  int control_iters = 30;
  double control_tol = 1e-12;
  double solver_tol = 1e-7;
  int solver_max_iters = 100;
  std::string quadrature = "trapezoid";
  int oracle_refine = 8;
};

struct DatasetSection {
  int trajectories = 200;
  double length = 10.0;
  std::string noise_mode = "predictor-injection";
  double noise_lo = -0.05;
  double noise_hi = 0.05;
  std::uint64_t seed = 0;  ///< 0: derived from the master seed
  double test_fraction = 0.1;
  double solver_tol = 1e-7;
  int solver_max_iters = 200;
  bool warmup_samples = false;
};

struct NnoSection {
  int channels = 64;
  int layers = 2;
};

struct TrainSection {
  int epochs = 300;
  int batch_size = 512;
  double learning_rate = 0.005;
  double weight_decay = 0.0;
  double lr_decay = 0.99;
  std::string optimizer = "adamw";
  std::uint64_t seed = 0;  ///< 0: derived from the master seed
};

struct BenchSection {
  std::vector<double> delays{0.1, 0.5, 1.0};
  std::vector<double> steps{0.1, 0.05, 0.01};
  int repetitions = 1000;
  int warmup = 20;
  int channels = 32;
  int layers = 2;
};

struct VerifySection {
  std::vector<double> c_values{0.5, 1.0, 2.0};
  int seeds = 10;
  double epsilon = 0.05;
  std::vector<double> eps_list{0.0, 0.01, 0.05, 0.1};
  int sweep_trials = 20;
  int substeps = 8;
  int oracle_refine = 8;
  double slack_factor = 2.0;
  double slack_floor = 1e-9;
};

struct RunConfig {
  SystemConfig system;
  LoopSection loop;
  DatasetSection dataset;
  NnoSection nno;
  TrainSection train;
  BenchSection bench;
  VerifySection verify;

  std::uint64_t master_seed() const { return loop.seed; }
  std::uint64_t dataset_seed() const { return dataset.seed ? dataset.seed : derive_seed(loop.seed, 1); }
  std::uint64_t train_seed() const { return train.seed ? train.seed : derive_seed(loop.seed, 2); }
  std::uint64_t bench_seed() const { return derive_seed(loop.seed, 3); }
  std::uint64_t verify_seed() const { return derive_seed(loop.seed, 4); }

  /// Canonical "section.key=value" listing in registry order.
  std::string canonical() const;
  std::string hash() const { return hex64(fnv1a64(canonical())); }
  void validate() const;
};

namespace detail {

using ConfigSlot =
    std::variant<double*, int*, bool*, std::uint64_t*, std::string*, std::vector<double>*, Eigen::Vector2d*>;

struct ConfigKey {
  const char* section;
  const char* key;
  ConfigSlot slot;
};

template <typename Cfg>
std::vector<ConfigKey> config_registry(Cfg& c) {
  auto& mp = c.system.manipulator;
  return {
      {"system", "kind", &c.system.kind},
      {"system", "delay", &c.system.delay},
      {"system", "a", &c.system.a},
      {"system", "b", &c.system.b},
      {"system", "k", &c.system.k},
      {"system", "nominal", &c.system.nominal},
      {"system", "mass1", &mp.link1.mass},
      {"system", "mass2", &mp.link2.mass},
      {"system", "length1", &mp.link1.length},
      {"system", "length2", &mp.link2.length},
      {"system", "com1", &mp.link1.com},
      {"system", "com2", &mp.link2.com},
      {"system", "inertia1", &mp.link1.inertia},
      {"system", "inertia2", &mp.link2.inertia},
      {"system", "gravity", &mp.gravity},
      {"system", "alpha", &mp.alpha},
      {"system", "beta", &mp.beta},
      {"system", "joint_min", &mp.joint_min},
      {"system", "joint_max", &mp.joint_max},
      {"system", "torque_min", &mp.torque_min},
      {"system", "torque_max", &mp.torque_max},
      {"system", "amplitude", &mp.amplitude},
      {"system", "max_speed", &c.system.max_speed},
      {"loop", "dt", &c.loop.dt},
      {"loop", "duration", &c.loop.duration},
      {"loop", "seed", &c.loop.seed},
      {"loop", "ic_lo", &c.loop.ic_lo},
      {"loop", "ic_hi", &c.loop.ic_hi},
      {"loop", "trajectories", &c.loop.trajectories},
      {"loop", "control_iters", &c.loop.control_iters},
      {"loop", "control_tol", &c.loop.control_tol},
      {"loop", "solver_tol", &c.loop.solver_tol},
      {"loop", "solver_max_iters", &c.loop.solver_max_iters},
      {"loop", "quadrature", &c.loop.quadrature},
      {"loop", "oracle_refine", &c.loop.oracle_refine},
      {"dataset", "trajectories", &c.dataset.trajectories},
      {"dataset", "length", &c.dataset.length},
      {"dataset", "noise_mode", &c.dataset.noise_mode},
      {"dataset", "noise_lo", &c.dataset.noise_lo},
      {"dataset", "noise_hi", &c.dataset.noise_hi},
      {"dataset", "seed", &c.dataset.seed},
      {"dataset", "test_fraction", &c.dataset.test_fraction},
      {"dataset", "solver_tol", &c.dataset.solver_tol},
      {"dataset", "solver_max_iters", &c.dataset.solver_max_iters},
      {"dataset", "warmup_samples", &c.dataset.warmup_samples},
      {"nno", "channels", &c.nno.channels},
      {"nno", "layers", &c.nno.layers},
      {"train", "epochs", &c.train.epochs},
      {"train", "batch_size", &c.train.batch_size},
      {"train", "learning_rate", &c.train.learning_rate},
      {"train", "weight_decay", &c.train.weight_decay},
      {"train", "lr_decay", &c.train.lr_decay},
      {"train", "optimizer", &c.train.optimizer},
      {"train", "seed", &c.train.seed},
      {"bench", "delays", &c.bench.delays},
      {"bench", "steps", &c.bench.steps},
      {"bench", "repetitions", &c.bench.repetitions},
      {"bench", "warmup", &c.bench.warmup},
      {"bench", "channels", &c.bench.channels},
      {"bench", "layers", &c.bench.layers},
      {"verify", "c_values", &c.verify.c_values},
      {"verify", "seeds", &c.verify.seeds},
      {"verify", "epsilon", &c.verify.epsilon},
      {"verify", "eps_list", &c.verify.eps_list},
      {"verify", "sweep_trials", &c.verify.sweep_trials},
      {"verify", "substeps", &c.verify.substeps},
      {"verify", "oracle_refine", &c.verify.oracle_refine},
      {"verify", "slack_factor", &c.verify.slack_factor},
      {"verify", "slack_floor", &c.verify.slack_floor},
  };
}

inline std::string trim(const std::string& s) {
  const auto b = s.find_first_not_of(" \t\r");
  if (b == std::string::npos) return "";
  const auto e = s.find_last_not_of(" \t\r");
  return s.substr(b, e - b + 1);
}

inline double parse_double(const std::string& v, const std::string& where) {
  std::size_t used = 0;
  double d = 0.0;
  try {
    d = std::stod(v, &used);
  } catch (const std::exception&) {
    throw ConfigError(where + ": expected a number, got '" + v + "'");
  }
  if (used != v.size()) throw ConfigError(where + ": trailing characters in '" + v + "'");
  return d;
}

inline long long parse_integer(const std::string& v, const std::string& where) {
  std::size_t used = 0;
  long long d = 0;
  try {
    d = std::stoll(v, &used);
  } catch (const std::exception&) {
    throw ConfigError(where + ": expected an integer, got '" + v + "'");
  }
  if (used != v.size()) throw ConfigError(where + ": trailing characters in '" + v + "'");
  return d;
}

inline std::vector<double> parse_list(const std::string& v, const std::string& where) {
  std::vector<double> out;
  std::stringstream ss(v);
  std::string item;
  while (std::getline(ss, item, ',')) out.push_back(parse_double(trim(item), where));
  if (out.empty()) throw ConfigError(where + ": empty list");
  return out;
}

inline std::string format_double(double d) {
  std::ostringstream os;
  os.precision(17);
  os << d;
  return os.str();
}

}  // namespace detail

inline std::string RunConfig::canonical() const {
  RunConfig copy = *this;
  std::ostringstream os;
  for (const auto& k : detail::config_registry(copy)) {
    os << k.section << '.' << k.key << '=';
    std::visit(
        [&](auto* p) {
          using T = std::remove_pointer_t<decltype(p)>;
          if constexpr (std::is_same_v<T, double>) {
            os << detail::format_double(*p);
          } else if constexpr (std::is_same_v<T, bool>) {
            os << (*p ? "true" : "false");
          } else if constexpr (std::is_same_v<T, std::string>) {
            os << *p;
          } else if constexpr (std::is_same_v<T, std::vector<double>>) {
            for (std::size_t i = 0; i < p->size(); ++i) os << (i ? "," : "") << detail::format_double((*p)[i]);
          } else if constexpr (std::is_same_v<T, Eigen::Vector2d>) {
            os << detail::format_double((*p)[0]) << ',' << detail::format_double((*p)[1]);
          } else {
            os << *p;
          }
        },
        k.slot);
    os << '\n';
  }
  return os.str();
}

inline void RunConfig::validate() const {
  auto fail = [](const std::string& m) { throw ConfigError(m); };
  if (system.kind != "manipulator" && system.kind != "linear") fail("system.kind must be 'manipulator' or 'linear'");
  if (!(system.delay > 0)) fail("system.delay must be positive");
  if (!(system.max_speed > 0)) fail("system.max_speed must be positive");
  try {
    auto mp = system.manipulator;
    mp.delay = system.delay;
    mp.validate();
    exact_steps(system.delay, loop.dt, "loop.dt vs system.delay");
    exact_steps(loop.duration, loop.dt, "loop.dt vs loop.duration");
    exact_steps(dataset.length, loop.dt, "loop.dt vs dataset.length");
    parse_noise_mode(dataset.noise_mode);
    parse_optimizer(train.optimizer);
    for (double d : bench.delays)
      for (double h : bench.steps) exact_steps(d, h, "bench delays vs steps");
  } catch (const ConfigError&) {
    throw;
  } catch (const Error& e) {
    throw ConfigError(e.what());
  }
  if (!(loop.ic_lo <= loop.ic_hi)) fail("loop.ic_lo must not exceed loop.ic_hi");
  if (loop.trajectories < 1) fail("loop.trajectories must be >= 1");
  if (loop.control_iters < 1) fail("loop.control_iters must be >= 1");
  if (!(loop.solver_tol > 0) || loop.solver_max_iters < 1) fail("loop solver settings invalid");
  if (loop.quadrature != "trapezoid" && loop.quadrature != "left-euler") fail("loop.quadrature must be trapezoid or left-euler");
  if (loop.oracle_refine < 1) fail("loop.oracle_refine must be >= 1");
  if (dataset.trajectories < 1) fail("dataset.trajectories must be >= 1");
  if (!(dataset.noise_lo <= dataset.noise_hi)) fail("dataset.noise_lo must not exceed noise_hi");
  if (!(dataset.test_fraction >= 0 && dataset.test_fraction < 1)) fail("dataset.test_fraction must be in [0, 1)");
  if (nno.channels < 1 || nno.layers < 1) fail("nno.channels and nno.layers must be >= 1");
  if (train.epochs < 0 || train.batch_size < 1) fail("train.epochs >= 0 and train.batch_size >= 1 required");
  if (!(train.learning_rate >= 0)) fail("train.learning_rate must be >= 0");
  if (!(train.lr_decay > 0 && train.lr_decay <= 1)) fail("train.lr_decay must be in (0, 1]");
  if (bench.repetitions < 0 || bench.warmup < 0 || bench.channels < 1 || bench.layers < 1) fail("bench settings invalid");
  for (double c : verify.c_values)
    if (!(c > 0)) fail("verify.c_values must be positive");
  if (verify.eps_list.empty() || verify.eps_list.front() != 0.0 ||
      !std::is_sorted(verify.eps_list.begin(), verify.eps_list.end()))
    fail("verify.eps_list must be ascending and start at 0");
  if (verify.seeds < 1 || verify.sweep_trials < 1 || verify.substeps < 1 || verify.oracle_refine < 1)
    fail("verify counts must be >= 1");
  if (!(verify.epsilon >= 0) || !(verify.slack_factor > 0) || !(verify.slack_floor >= 0)) fail("verify settings invalid");
}

inline RunConfig parse_config(std::istream& in, const std::string& origin = "<config>") {
  RunConfig cfg;
  auto reg = detail::config_registry(cfg);
  std::set<std::string> sections;
  for (const auto& k : reg) sections.insert(k.section);
  std::set<std::string> seen;
  std::string section;
  std::string line;
  int lineno = 0;
  while (std::getline(in, line)) {
    ++lineno;
    const std::string where = origin + ":" + std::to_string(lineno);
    std::string s = detail::trim(line);
    if (s.empty() || s[0] == '#' || s[0] == ';') continue;
    if (s.front() == '[') {
      if (s.back() != ']') throw ConfigError(where + ": malformed section header");
      section = detail::trim(s.substr(1, s.size() - 2));
      if (!sections.count(section)) throw ConfigError(where + ": unknown section [" + section + "]");
      continue;
    }
    const auto eq = s.find('=');
    if (eq == std::string::npos) throw ConfigError(where + ": expected key = value");
    if (section.empty()) throw ConfigError(where + ": key outside of a section");
    const std::string key = detail::trim(s.substr(0, eq));
    std::string value = detail::trim(s.substr(eq + 1));
    const auto hash = value.find_first_of("#;");
    if (hash != std::string::npos) value = detail::trim(value.substr(0, hash));
    const std::string full = section + "." + key;
    auto it = std::find_if(reg.begin(), reg.end(), [&](const detail::ConfigKey& k) { return section == k.section && key == k.key; });
    if (it == reg.end()) throw ConfigError(where + ": unknown key '" + full + "'");
    if (!seen.insert(full).second) throw ConfigError(where + ": duplicate key '" + full + "'");
    const std::string w = where + " (" + full + ")";
    std::visit(
        [&](auto* p) {
          using T = std::remove_pointer_t<decltype(p)>;
          if constexpr (std::is_same_v<T, double>) {
            *p = detail::parse_double(value, w);
          } else if constexpr (std::is_same_v<T, int>) {
            const auto v = detail::parse_integer(value, w);
            if (v < std::numeric_limits<int>::min() || v > std::numeric_limits<int>::max())
              throw ConfigError(w + ": integer out of range");
            *p = static_cast<int>(v);
          } else if constexpr (std::is_same_v<T, bool>) {
            if (value == "true" || value == "1") *p = true;
            else if (value == "false" || value == "0") *p = false;
            else throw ConfigError(w + ": expected true or false, got '" + value + "'");
          } else if constexpr (std::is_same_v<T, std::uint64_t>) {
            const auto v = detail::parse_integer(value, w);
            if (v < 0) throw ConfigError(w + ": seed must be non-negative");
            *p = static_cast<std::uint64_t>(v);
          } else if constexpr (std::is_same_v<T, std::string>) {
            *p = value;
          } else if constexpr (std::is_same_v<T, std::vector<double>>) {
            *p = detail::parse_list(value, w);
          } else {
            const auto v = detail::parse_list(value, w);
            if (v.size() != 2) throw ConfigError(w + ": expected two comma-separated values");
            *p = Eigen::Vector2d(v[0], v[1]);
          }
        },
        it->slot);
  }
  cfg.validate();
  return cfg;
}

inline RunConfig parse_config_string(const std::string& text) {
  std::istringstream in(text);
  return parse_config(in);
}

inline RunConfig load_config(const std::string& path) {
  std::ifstream in(path);
  if (!in) throw ConfigError("cannot open config file '" + path + "'");
  return parse_config(in, path);
}

// ---------------------------------------------------------------------------
// Builders

inline std::unique_ptr<System> make_system(const RunConfig& cfg) {
  if (cfg.system.kind == "linear")
    return std::make_unique<LinearPlant>(LinearPlant::scalar(cfg.system.a, cfg.system.b, cfg.system.k, cfg.system.delay,
                                                             cfg.system.nominal));
  auto mp = cfg.system.manipulator;
  mp.delay = cfg.system.delay;
  return std::make_unique<TwoLinkManipulator>(mp);
}

inline SolverConfig make_solver_config(const RunConfig& cfg) {
  return {cfg.loop.solver_tol, cfg.loop.solver_max_iters,
          cfg.loop.quadrature == "trapezoid" ? Quadrature::trapezoid : Quadrature::left_euler};
}

inline LoopConfig make_loop_config(const RunConfig& cfg, const Vec& x0) {
  LoopConfig lc;
  lc.dt = cfg.loop.dt;
  lc.duration = cfg.loop.duration;
  lc.delay = cfg.system.delay;
  lc.x0 = x0;
  lc.control_iters = cfg.loop.control_iters;
  lc.control_tol = cfg.loop.control_tol;
  lc.seed = cfg.master_seed();
  lc.config_hash = cfg.hash();
  return lc;
}

inline DatasetSpec make_dataset_spec(const RunConfig& cfg) {
  DatasetSpec s;
  s.trajectories = cfg.dataset.trajectories;
  s.traj_length = cfg.dataset.length;
  s.dt = cfg.loop.dt;
  s.delay = cfg.system.delay;
  s.noise_mode = parse_noise_mode(cfg.dataset.noise_mode);
  s.noise_lo = cfg.dataset.noise_lo;
  s.noise_hi = cfg.dataset.noise_hi;
  s.seed = cfg.dataset_seed();
  s.test_fraction = cfg.dataset.test_fraction;
  s.solver_tol = cfg.dataset.solver_tol;
  s.solver_max_iters = cfg.dataset.solver_max_iters;
  s.warmup_samples = cfg.dataset.warmup_samples;
  return s;
}

inline NnoConfig make_nno_config(const RunConfig& cfg, const System& sys) {
  return {sys.n(), sys.m(), exact_steps(cfg.system.delay, cfg.loop.dt, "nno grid") + 1, cfg.nno.channels, cfg.nno.layers};
}

inline TrainConfig make_train_config(const RunConfig& cfg) {
  TrainConfig t;
  t.epochs = cfg.train.epochs;
  t.batch_size = cfg.train.batch_size;
  t.learning_rate = cfg.train.learning_rate;
  t.weight_decay = cfg.train.weight_decay;
  t.lr_decay = cfg.train.lr_decay;
  t.optimizer = parse_optimizer(cfg.train.optimizer);
  t.seed = cfg.train_seed();
  return t;
}

inline BenchSpec make_bench_spec(const RunConfig& cfg) {
  BenchSpec b;
  b.delays = cfg.bench.delays;
  b.steps = cfg.bench.steps;
  b.repetitions = cfg.bench.repetitions;
  b.warmup = cfg.bench.warmup;
  b.channels = cfg.bench.channels;
  b.layers = cfg.bench.layers;
  b.solver = make_solver_config(cfg);
  b.seed = cfg.bench_seed();
  return b;
}

/// State and control boxes the benchmark draws its inputs from.
inline std::pair<Box, Box> sampling_boxes(const RunConfig& cfg, const System& sys) {
  if (const auto* arm = dynamic_cast<const TwoLinkManipulator*>(&sys)) return arm->operating_boxes();
  const double r = std::max(2.0, 2.0 * std::abs(cfg.system.nominal));
  const double ru = std::max(1.0, r * std::abs(cfg.system.k));
  return {Box::symmetric(Vec::Constant(sys.n(), r)), Box::symmetric(Vec::Constant(sys.m(), ru))};
}

}  // namespace predfb
