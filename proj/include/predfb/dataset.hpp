#pragma once

// Supervised (X(t), T_D(t)U) -> P pairs harvested from closed-loop rollouts
// driven by the successive-approximation predictor.

#include <predfb/closed_loop.hpp>

#include <set>

namespace predfb {

enum class NoiseMode : std::uint32_t { initial_condition = 0, predictor_injection = 1, both = 2 };

inline std::string to_string(NoiseMode m) {
  switch (m) {
    case NoiseMode::initial_condition: return "initial-condition";
    case NoiseMode::predictor_injection: return "predictor-injection";
    case NoiseMode::both: return "both";
  }
  return "?";
}

inline NoiseMode parse_noise_mode(const std::string& s) {
  if (s == "initial-condition") return NoiseMode::initial_condition;
  if (s == "predictor-injection") return NoiseMode::predictor_injection;
  if (s == "both") return NoiseMode::both;
  throw InvalidArgument("unknown noise mode '" + s + "'");
}

struct DatasetSpec {
  int trajectories = 200;
  double traj_length = 10.0;
  double dt = 0.1;
  double delay = 0.5;
  NoiseMode noise_mode = NoiseMode::predictor_injection;
  double noise_lo = -0.05;
  double noise_hi = 0.05;
  std::uint64_t seed = 0;
  double test_fraction = 0.1;
  double solver_tol = 1e-7;
  int solver_max_iters = 200;
  /// Fraction of targets allowed to miss solver_tol before generation aborts.
  double max_nonconvergence = 0.01;
  /// Also emit samples for t < D, where the history still holds the initial
  /// input function.
  bool warmup_samples = false;

  bool injects() const { return noise_mode != NoiseMode::initial_condition; }
  bool varies_initial_state() const { return noise_mode != NoiseMode::predictor_injection; }
  int delay_steps() const { return exact_steps(delay, dt, "DatasetSpec delay"); }
  int total_steps() const { return exact_steps(traj_length, dt, "DatasetSpec length"); }
  int first_sample_step() const { return warmup_samples ? 0 : delay_steps() + 1; }
  /// Samples are taken at steps N+1 .. K-1 (0 .. K-1 with warm-up samples).
  int samples_per_trajectory() const { return std::max(0, total_steps() - first_sample_step()); }

  void validate() const {
    PREDFB_REQUIRE(trajectories >= 1, InvalidArgument, "DatasetSpec: trajectories must be >= 1");
    delay_steps();
    total_steps();
    PREDFB_REQUIRE(noise_lo <= noise_hi, InvalidArgument, "DatasetSpec: noise lo must not exceed hi");
    PREDFB_REQUIRE(test_fraction >= 0.0 && test_fraction < 1.0, InvalidArgument,
                   "DatasetSpec: test fraction must be in [0, 1)");
    PREDFB_REQUIRE(solver_tol > 0 && solver_max_iters >= 1, InvalidArgument, "DatasetSpec: bad solver settings");
    PREDFB_REQUIRE(samples_per_trajectory() >= 1, InvalidArgument,
                   "DatasetSpec: trajectory too short to emit samples");
  }
};

struct Sample {
  Vec x;
  RowMat hist;    ///< (N+1) x m
  RowMat target;  ///< (N+1) x n, converged successive-approximation solution
  std::uint32_t traj_id = 0;
  std::uint32_t step_id = 0;
};

struct Dataset {
  DatasetSpec spec;
  std::string system_id;
  std::string config_hash;
  int n = 0;
  int m = 0;
  int points = 0;
  std::vector<Sample> samples;
  std::vector<std::uint32_t> test_trajectories;  ///< sorted
  std::vector<std::size_t> train_idx;
  std::vector<std::size_t> test_idx;

  ControlHistory history(std::size_t i) const { return ControlHistory(spec.dt, samples[i].hist); }

  /// Rebuilds train/test indices from test_trajectories.
  void rebuild_split() {
    train_idx.clear();
    test_idx.clear();
    for (std::size_t i = 0; i < samples.size(); ++i) {
      if (std::binary_search(test_trajectories.begin(), test_trajectories.end(), samples[i].traj_id))
        test_idx.push_back(i);
      else
        train_idx.push_back(i);
    }
  }
};

/// Holds out round(fraction * trajectories) whole trajectories (at least one
/// when fraction > 0 and there are two or more), chosen by a seeded shuffle.
inline void split_by_trajectory(Dataset& ds, double fraction, std::uint64_t seed) {
  std::set<std::uint32_t> ids;
  for (const auto& s : ds.samples) ids.insert(s.traj_id);
  std::vector<std::uint32_t> order(ids.begin(), ids.end());
  Rng rng(seed);
  rng.shuffle(order);
  std::size_t count = static_cast<std::size_t>(std::llround(fraction * static_cast<double>(order.size())));
  if (fraction > 0.0 && count == 0 && order.size() >= 2) count = 1;
  count = std::min(count, order.size() > 0 ? order.size() - 1 : 0);
  ds.test_trajectories.assign(order.begin(), order.begin() + static_cast<std::ptrdiff_t>(count));
  std::sort(ds.test_trajectories.begin(), ds.test_trajectories.end());
  ds.rebuild_split();
}

/// Adds i.i.d. Uniform(lo, hi) noise to P_hat(0) at every control step.
class InjectedNoisePredictor final : public Predictor {
 public:
  InjectedNoisePredictor(PredictorPtr inner, double lo, double hi, std::uint64_t seed)
      : inner_(std::move(inner)), lo_(lo), hi_(hi), seed_(seed) {}
  std::string kind() const override { return inner_->kind() + "+injected"; }
  PredictorSolution predict(const System& sys, const Vec& x, const ControlHistory& hist) const override {
    return inner_->predict(sys, x, hist);
  }
  void step_offset(std::size_t step, Vec& offset) const override {
    inner_->step_offset(step, offset);
    if (lo_ == 0.0 && hi_ == 0.0) return;
    Rng rng(derive_seed(seed_, step));
    for (Eigen::Index i = 0; i < offset.size(); ++i) offset[i] += rng.uniform(lo_, hi_);
  }

 private:
  PredictorPtr inner_;
  double lo_, hi_;
  std::uint64_t seed_;
};

struct TrajectoryPlan {
  Vec x0;
  std::uint64_t noise_seed;
};

/// Initial state and noise stream for trajectory `idx`.
inline TrajectoryPlan plan_trajectory(const System& sys, const DatasetSpec& spec, std::uint32_t idx) {
  const std::uint64_t base = derive_seed(spec.seed, idx);
  Rng rng(derive_seed(base, 0));
  Vec x0 = spec.varies_initial_state() ? sys.sample_initial_state(rng, spec.noise_lo, spec.noise_hi)
                                       : sys.nominal_state();
  return {std::move(x0), derive_seed(base, 1)};
}

/// Rolls out one trajectory and returns its samples.
inline std::vector<Sample> generate_trajectory(const System& sys, const DatasetSpec& spec, std::uint32_t idx,
                                               std::size_t* nonconverged = nullptr,
                                               TrajectoryRecord* record_out = nullptr) {
  const int first = spec.first_sample_step();
  const int big_k = spec.total_steps();
  const SolverConfig solver{spec.solver_tol, spec.solver_max_iters, Quadrature::trapezoid};
  const auto plan = plan_trajectory(sys, spec, idx);

  PredictorPtr base = std::make_shared<SuccessivePredictor>(solver);
  PredictorPtr driver = spec.injects()
                            ? std::make_shared<InjectedNoisePredictor>(base, spec.noise_lo, spec.noise_hi, plan.noise_seed)
                            : base;
  LoopConfig loop;
  loop.dt = spec.dt;
  loop.duration = spec.traj_length;
  loop.delay = spec.delay;
  loop.x0 = plan.x0;
  loop.seed = spec.seed;

  std::vector<Sample> out;
  std::size_t misses = 0;
  auto observer = [&](const StepInfo& info) {
    if (info.step < first || info.step >= big_k) return;
    const auto res = predict_successive(sys, info.x, info.history, solver);
    if (!res.converged) ++misses;
    Sample s;
    s.x = info.x;
    s.hist = info.history.values();
    s.target = res.solution.values;
    s.traj_id = idx;
    s.step_id = static_cast<std::uint32_t>(info.step);
    out.push_back(std::move(s));
  };
  auto rec = run_closed_loop(sys, *driver, loop, observer);
  if (rec.diverged) throw NonFinite("generate_dataset: trajectory " + std::to_string(idx) + " diverged");
  if (nonconverged) *nonconverged += misses;
  if (record_out) *record_out = std::move(rec);
  return out;
}

inline Dataset generate_dataset(const DatasetSpec& spec, const System& sys, const std::string& config_hash = "") {
  spec.validate();
  Dataset ds;
  ds.spec = spec;
  ds.system_id = sys.id();
  ds.config_hash = config_hash;
  ds.n = sys.n();
  ds.m = sys.m();
  ds.points = spec.delay_steps() + 1;
  ds.samples.reserve(static_cast<std::size_t>(spec.trajectories) * spec.samples_per_trajectory());
  std::size_t misses = 0;
  for (int i = 0; i < spec.trajectories; ++i) {
    auto part = generate_trajectory(sys, spec, static_cast<std::uint32_t>(i), &misses);
    for (auto& s : part) ds.samples.push_back(std::move(s));
  }
  const double rate = ds.samples.empty() ? 0.0 : static_cast<double>(misses) / static_cast<double>(ds.samples.size());
  if (rate > spec.max_nonconvergence) {
    throw Error("generate_dataset: " + std::to_string(misses) + " of " + std::to_string(ds.samples.size()) +
                " targets did not reach tol " + std::to_string(spec.solver_tol) +
                "; reduce the delay or raise solver_max_iters");
  }
  split_by_trajectory(ds, spec.test_fraction, derive_seed(spec.seed, 0x5011ULL));
  return ds;
}

struct AuditReport {
  std::size_t checked = 0;
  double max_residual = 0.0;
  std::size_t anchor_violations = 0;
  bool pass = true;
};

/// Recomputes the self-consistency residual on a seeded random subset.
inline AuditReport audit_dataset(const Dataset& ds, const System& sys, double fraction, std::uint64_t seed,
                                 double threshold = 1e-6) {
  AuditReport rep;
  if (ds.samples.empty()) return rep;
  const auto count = std::max<std::size_t>(1, static_cast<std::size_t>(std::ceil(fraction * ds.samples.size())));
  Rng rng(seed);
  for (std::size_t c = 0; c < count; ++c) {
    const std::size_t i = rng.below(ds.samples.size());
    const auto& s = ds.samples[i];
    PredictorSolution sol{ds.spec.dt, s.target};
    rep.max_residual = std::max(rep.max_residual, predictor_residual(sys, s.x, ds.history(i), sol));
    if ((s.target.row(0).transpose().array() != s.x.array()).any()) ++rep.anchor_violations;
    ++rep.checked;
  }
  rep.pass = rep.max_residual <= threshold && rep.anchor_violations == 0;
  return rep;
}

// ---------------------------------------------------------------------------
// Persistence
//
// "DSET", u32 version, spec fields (u8 warm-up flag last), system id, config hash, u32 n, m, points,
// u64 sample count, per sample (u32 traj, u32 step, x, hist, target), u32
// test-trajectory count and ids, CRC32 of all preceding bytes.

inline constexpr std::uint32_t kDatasetVersion = 1;

inline std::vector<std::uint8_t> serialize_dataset(const Dataset& ds) {
  ByteWriter w;
  w.put_bytes("DSET");
  w.put<std::uint32_t>(kDatasetVersion);
  const auto& sp = ds.spec;
  w.put<std::uint32_t>(static_cast<std::uint32_t>(sp.trajectories));
  w.put<double>(sp.traj_length);
  w.put<double>(sp.dt);
  w.put<double>(sp.delay);
  w.put<std::uint32_t>(static_cast<std::uint32_t>(sp.noise_mode));
  w.put<double>(sp.noise_lo);
  w.put<double>(sp.noise_hi);
  w.put<std::uint64_t>(sp.seed);
  w.put<double>(sp.test_fraction);
  w.put<double>(sp.solver_tol);
  w.put<std::uint32_t>(static_cast<std::uint32_t>(sp.solver_max_iters));
  w.put<double>(sp.max_nonconvergence);
  w.put<std::uint8_t>(sp.warmup_samples ? 1 : 0);
  w.put_string(ds.system_id);
  w.put_string(ds.config_hash);
  w.put<std::uint32_t>(static_cast<std::uint32_t>(ds.n));
  w.put<std::uint32_t>(static_cast<std::uint32_t>(ds.m));
  w.put<std::uint32_t>(static_cast<std::uint32_t>(ds.points));
  w.put<std::uint64_t>(ds.samples.size());
  for (const auto& s : ds.samples) {
    w.put<std::uint32_t>(s.traj_id);
    w.put<std::uint32_t>(s.step_id);
    w.put_matrix(s.x);
    w.put_matrix(s.hist);
    w.put_matrix(s.target);
  }
  w.put<std::uint32_t>(static_cast<std::uint32_t>(ds.test_trajectories.size()));
  for (auto id : ds.test_trajectories) w.put<std::uint32_t>(id);
  seal_with_crc(w);
  return std::move(w.bytes());
}

inline Dataset deserialize_dataset(std::span<const std::uint8_t> bytes) {
  if (bytes.size() < 8 || std::memcmp(bytes.data(), "DSET", 4) != 0)
    throw VersionMismatch("dataset: bad magic (expected DSET)");
  verify_crc(bytes, "dataset");
  ByteReader r(bytes.first(bytes.size() - 4));
  r.get_bytes(4);
  const auto version = r.get<std::uint32_t>();
  if (version != kDatasetVersion)
    throw VersionMismatch("dataset: unsupported version " + std::to_string(version));
  Dataset ds;
  auto& sp = ds.spec;
  sp.trajectories = static_cast<int>(r.get<std::uint32_t>());
  sp.traj_length = r.get<double>();
  sp.dt = r.get<double>();
  sp.delay = r.get<double>();
  const auto mode = r.get<std::uint32_t>();
  if (mode > 2) throw ShapeHeaderInconsistency("dataset: bad noise mode");
  sp.noise_mode = static_cast<NoiseMode>(mode);
  sp.noise_lo = r.get<double>();
  sp.noise_hi = r.get<double>();
  sp.seed = r.get<std::uint64_t>();
  sp.test_fraction = r.get<double>();
  sp.solver_tol = r.get<double>();
  sp.solver_max_iters = static_cast<int>(r.get<std::uint32_t>());
  sp.max_nonconvergence = r.get<double>();
  sp.warmup_samples = r.get<std::uint8_t>() != 0;
  ds.system_id = r.get_string();
  ds.config_hash = r.get_string();
  ds.n = static_cast<int>(r.get<std::uint32_t>());
  ds.m = static_cast<int>(r.get<std::uint32_t>());
  ds.points = static_cast<int>(r.get<std::uint32_t>());
  const auto count = r.get<std::uint64_t>();
  if (ds.n < 1 || ds.m < 1 || ds.points < 2) throw ShapeHeaderInconsistency("dataset: bad dimensions in header");
  const std::size_t per_sample = 8 + 8 * static_cast<std::size_t>(ds.n + ds.points * (ds.m + ds.n));
  if (count > r.remaining() / per_sample) throw ShapeHeaderInconsistency("dataset: sample count exceeds payload");
  ds.samples.resize(count);
  for (auto& s : ds.samples) {
    s.traj_id = r.get<std::uint32_t>();
    s.step_id = r.get<std::uint32_t>();
    s.x.resize(ds.n);
    s.hist.resize(ds.points, ds.m);
    s.target.resize(ds.points, ds.n);
    r.get_matrix(s.x);
    r.get_matrix(s.hist);
    r.get_matrix(s.target);
  }
  const auto tests = r.get<std::uint32_t>();
  ds.test_trajectories.resize(tests);
  for (auto& id : ds.test_trajectories) id = r.get<std::uint32_t>();
  if (r.remaining() != 0) throw ShapeHeaderInconsistency("dataset: trailing bytes after payload");
  ds.rebuild_split();
  return ds;
}

inline void save_dataset(const Dataset& ds, const std::string& path) { write_file_bytes(path, serialize_dataset(ds)); }

inline Dataset load_dataset(const std::string& path) { return deserialize_dataset(read_file_bytes(path)); }

/// One row per (sample, grid point).
inline void write_dataset_csv(const Dataset& ds, std::ostream& os) {
  os << "# system=" << ds.system_id << " seed=" << ds.spec.seed << " config_hash=" << ds.config_hash << "\n";
  os << "# columns: sample index, trajectory id, step id, grid node k, theta = -D + k dt, state x_i (anchor), "
        "control u_j = U(t+theta), target p_i = P(theta), split (train/test)\n";
  os << "sample,traj,step,k,theta";
  for (int i = 0; i < ds.n; ++i) os << ",x" << i;
  for (int j = 0; j < ds.m; ++j) os << ",u" << j;
  for (int i = 0; i < ds.n; ++i) os << ",p" << i;
  os << ",split\n";
  os.precision(17);
  for (std::size_t s = 0; s < ds.samples.size(); ++s) {
    const auto& smp = ds.samples[s];
    const bool test = std::binary_search(ds.test_trajectories.begin(), ds.test_trajectories.end(), smp.traj_id);
    for (int k = 0; k < ds.points; ++k) {
      os << s << ',' << smp.traj_id << ',' << smp.step_id << ',' << k << ',' << (-ds.spec.delay + k * ds.spec.dt);
      for (int i = 0; i < ds.n; ++i) os << ',' << smp.x[i];
      for (int j = 0; j < ds.m; ++j) os << ',' << smp.hist(k, j);
      for (int i = 0; i < ds.n; ++i) os << ',' << smp.target(k, i);
      os << ',' << (test ? "test" : "train") << '\n';
    }
  }
}

}  // namespace predfb
