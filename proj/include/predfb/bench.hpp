#pragma once

// Wall-clock latency of the numerical and neural predictors over a
// (delay x step size) grid.

#include <predfb/nno.hpp>

#include <chrono>
#include <functional>
#include <istream>
#include <map>
#include <optional>
#include <ostream>
#include <sstream>

namespace predfb {

enum class BenchMethod { one_iteration, full_convergence, nno_forward };

inline std::string to_string(BenchMethod m) {
  switch (m) {
    case BenchMethod::one_iteration: return "successive_one_iteration";
    case BenchMethod::full_convergence: return "successive_converged";
    case BenchMethod::nno_forward: return "nno_forward";
  }
  return "?";
}

inline BenchMethod parse_bench_method(const std::string& s) {
  for (auto m : {BenchMethod::one_iteration, BenchMethod::full_convergence, BenchMethod::nno_forward})
    if (to_string(m) == s) return m;
  throw InvalidArgument("unknown bench method '" + s + "'");
}

struct BenchSpec {
  std::vector<double> delays{0.1, 0.5, 1.0};
  std::vector<double> steps{0.1, 0.05, 0.01};
  int repetitions = 1000;
  int warmup = 20;
  std::vector<BenchMethod> methods{BenchMethod::one_iteration, BenchMethod::full_convergence,
                                   BenchMethod::nno_forward};
  SolverConfig solver{};
  int channels = 32;  ///< per-grid NNO width when no model is supplied
  int layers = 2;
  std::uint64_t seed = 0;
  int input_pool = 64;  ///< distinct random inputs cycled through per cell

  void validate() const {
    PREDFB_REQUIRE(repetitions >= 0 && warmup >= 0 && input_pool >= 1, InvalidArgument, "BenchSpec: bad counts");
    for (double d : delays)
      for (double h : steps) exact_steps(d, h, "BenchSpec cell");
  }
};

struct BenchRow {
  double delay = 0.0;
  double dt = 0.0;
  int grid_points = 0;
  BenchMethod method = BenchMethod::one_iteration;
  int repetitions = 0;
  double median_ms = 0.0;
  double mean_ms = 0.0;
  double std_ms = 0.0;
};

struct BenchReport {
  std::vector<BenchRow> rows;
  std::string cpu;
  std::string build;
  std::uint64_t seed = 0;
  std::string config_hash;

  const BenchRow* find(double delay, double dt, BenchMethod m) const {
    for (const auto& r : rows)
      if (std::abs(r.delay - delay) < 1e-12 && std::abs(r.dt - dt) < 1e-12 && r.method == m) return &r;
    return nullptr;
  }
};

inline std::string cpu_model_name() {
  std::ifstream in("/proc/cpuinfo");
  std::string line;
  while (std::getline(in, line)) {
    if (line.rfind("model name", 0) == 0) {
      const auto pos = line.find(':');
      if (pos != std::string::npos) return line.substr(pos + 2);
    }
  }
  return "unknown";
}

inline std::string build_fingerprint() {
  std::string s;
#if defined(__VERSION__)
  s += __VERSION__;
#endif
#if defined(__OPTIMIZE__)
  s += " optimized";
#endif
#if defined(NDEBUG)
  s += " NDEBUG";
#endif
#if defined(__AVX2__)
  s += " avx2";
#endif
  return hex64(fnv1a64(s));
}

namespace detail {

inline BenchRow summarize(double delay, double dt, int pts, BenchMethod m, std::vector<double>& ms) {
  BenchRow r{delay, dt, pts, m, static_cast<int>(ms.size()), 0.0, 0.0, 0.0};
  if (ms.empty()) return r;
  double sum = 0.0;
  for (double v : ms) sum += v;
  r.mean_ms = sum / static_cast<double>(ms.size());
  double var = 0.0;
  for (double v : ms) var += (v - r.mean_ms) * (v - r.mean_ms);
  r.std_ms = ms.size() > 1 ? std::sqrt(var / static_cast<double>(ms.size() - 1)) : 0.0;
  std::sort(ms.begin(), ms.end());
  const std::size_t mid = ms.size() / 2;
  r.median_ms = ms.size() % 2 ? ms[mid] : 0.5 * (ms[mid - 1] + ms[mid]);
  return r;
}

template <typename Fn>
std::vector<double> time_calls(int warmup, int reps, Fn&& fn) {
  using clock = std::chrono::steady_clock;
  for (int i = 0; i < warmup; ++i) fn(i);
  std::vector<double> ms;
  ms.reserve(static_cast<std::size_t>(reps));
  for (int i = 0; i < reps; ++i) {
    const auto t0 = clock::now();
    fn(i);
    const auto t1 = clock::now();
    ms.push_back(std::chrono::duration<double, std::milli>(t1 - t0).count());
  }
  return ms;
}

}  // namespace detail

/// Supplies the NNO for a grid of `grid_points` nodes; returning nullopt
/// falls back to a freshly initialized model of the spec's width.
using ModelProvider = std::function<std::optional<NnoModel>(int grid_points)>;

/// Times every method on every (delay, step) cell with identical random
/// inputs drawn from the state and control boxes.
inline BenchReport run_bench(const BenchSpec& spec, const System& sys, const Box& box_x, const Box& box_u,
                             const ModelProvider& models = {}) {
  spec.validate();
  BenchReport rep;
  rep.cpu = cpu_model_name();
  rep.build = build_fingerprint();
  rep.seed = spec.seed;
  if (spec.repetitions == 0) return rep;

  volatile double sink = 0.0;
  for (double delay : spec.delays) {
    for (double dt : spec.steps) {
      const int steps = exact_steps(delay, dt, "run_bench");
      const int pts = steps + 1;
      Rng rng(derive_seed(spec.seed, static_cast<std::uint64_t>(pts) * 1000003ULL + static_cast<std::uint64_t>(delay * 1e6)));
      std::vector<Vec> xs;
      std::vector<ControlHistory> hs;
      for (int i = 0; i < spec.input_pool; ++i) {
        xs.push_back(rng.uniform(box_x));
        RowMat v(pts, sys.m());
        for (int k = 0; k < pts; ++k) v.row(k) = rng.uniform(box_u).transpose();
        hs.emplace_back(dt, std::move(v));
      }
      auto pick = [&](int i) { return static_cast<std::size_t>(i % spec.input_pool); };

      for (BenchMethod m : spec.methods) {
        std::vector<double> ms;
        if (m == BenchMethod::one_iteration) {
          RowMat in(pts, sys.n()), out(pts, sys.n()), fb(pts, sys.n());
          ms = detail::time_calls(spec.warmup, spec.repetitions, [&](int i) {
            const auto j = pick(i);
            for (int k = 0; k < pts; ++k) in.row(k) = xs[j].transpose();
            successive_iteration(sys, xs[j], hs[j], spec.solver.quadrature, in, out, fb);
            sink = sink + out(pts - 1, 0);
          });
        } else if (m == BenchMethod::full_convergence) {
          ms = detail::time_calls(spec.warmup, spec.repetitions, [&](int i) {
            const auto j = pick(i);
            const auto r = predict_successive(sys, xs[j], hs[j], spec.solver);
            sink = sink + r.solution.values(pts - 1, 0);
          });
        } else {
          std::optional<NnoModel> model;
          if (models) model = models(pts);
          if (!model) {
            NnoConfig cfg{sys.n(), sys.m(), pts, spec.channels, spec.layers};
            model = NnoModel::init(cfg, derive_seed(spec.seed, static_cast<std::uint64_t>(pts)));
          }
          std::vector<RowMat> enc;
          for (int i = 0; i < spec.input_pool; ++i) enc.push_back(encode_input(xs[static_cast<std::size_t>(i)], hs[static_cast<std::size_t>(i)]));
          NnoCache cache;
          RowMat out;
          ms = detail::time_calls(spec.warmup, spec.repetitions, [&](int i) {
            nno_forward_batch(*model, enc[pick(i)], pts, cache, out);
            sink = sink + out(pts - 1, 0);
          });
        }
        rep.rows.push_back(detail::summarize(delay, dt, pts, m, ms));
      }
    }
  }
  return rep;
}

inline void report_to_csv(const BenchReport& rep, std::ostream& os) {
  os << "# cpu=" << rep.cpu << "\n# build=" << rep.build << "\n# seed=" << rep.seed
     << "\n# config_hash=" << rep.config_hash << "\n";
  os << "delay,dt,grid_points,method,repetitions,median_ms,mean_ms,std_ms\n";
  os.precision(17);
  for (const auto& r : rep.rows) {
    os << r.delay << ',' << r.dt << ',' << r.grid_points << ',' << to_string(r.method) << ',' << r.repetitions << ','
       << r.median_ms << ',' << r.mean_ms << ',' << r.std_ms << '\n';
  }
}

inline void report_to_csv(const BenchReport& rep, const std::string& path) {
  std::ofstream out(path);
  if (!out) throw IoError("cannot open '" + path + "' for writing");
  report_to_csv(rep, out);
  if (!out) throw IoError("write to '" + path + "' failed");
}

inline BenchReport parse_bench_csv(std::istream& in) {
  BenchReport rep;
  std::string line;
  bool header = false;
  while (std::getline(in, line)) {
    if (line.empty()) continue;
    if (line[0] == '#') {
      const auto eq = line.find('=');
      if (eq == std::string::npos) continue;
      const std::string key = line.substr(2, eq - 2);
      const std::string val = line.substr(eq + 1);
      if (key == "cpu") rep.cpu = val;
      else if (key == "build") rep.build = val;
      else if (key == "seed") rep.seed = std::stoull(val);
      else if (key == "config_hash") rep.config_hash = val;
      continue;
    }
    if (!header) {
      header = true;
      continue;
    }
    std::stringstream ss(line);
    std::string cell;
    std::vector<std::string> cells;
    while (std::getline(ss, cell, ',')) cells.push_back(cell);
    if (cells.size() != 8) throw IoError("bench csv: expected 8 columns, got " + std::to_string(cells.size()));
    BenchRow r;
    r.delay = std::stod(cells[0]);
    r.dt = std::stod(cells[1]);
    r.grid_points = std::stoi(cells[2]);
    r.method = parse_bench_method(cells[3]);
    r.repetitions = std::stoi(cells[4]);
    r.median_ms = std::stod(cells[5]);
    r.mean_ms = std::stod(cells[6]);
    r.std_ms = std::stod(cells[7]);
    rep.rows.push_back(r);
  }
  return rep;
}

/// True when, for every pair of cells with N_a < N_b, the median latency of
/// `method` at N_a does not exceed (1 + rel_tol) times that at N_b.
inline bool latency_monotone_in_grid(const BenchReport& rep, BenchMethod method, double rel_tol = 0.0) {
  std::vector<const BenchRow*> rows;
  for (const auto& r : rep.rows)
    if (r.method == method) rows.push_back(&r);
  for (const auto* a : rows)
    for (const auto* b : rows)
      if (a->grid_points < b->grid_points && a->median_ms > (1.0 + rel_tol) * b->median_ms) return false;
  return true;
}

}  // namespace predfb
