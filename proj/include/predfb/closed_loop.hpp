#pragma once

// Closed-loop simulation of Xdot = f(X, U(t - D)) under predictor feedback
// U(t) = kappa(P_hat(t), t + D) with a pluggable predictor.

#include <predfb/nno.hpp>

#include <algorithm>
#include <functional>
#include <memory>
#include <numeric>
#include <ostream>

namespace predfb {

// ---------------------------------------------------------------------------
// Delay line

/// Committed inputs on [t - D, t] for the last committed time t, on a uniform
/// grid. Before the first push it holds the initial input function on
/// [-D - dt, -dt].
class DelayLine {
 public:
  DelayLine(double dt, int steps, Vec initial) : dt_(dt), steps_(steps), last_time_(-dt) {
    PREDFB_REQUIRE(dt > 0 && steps >= 1, InvalidArgument, "DelayLine: dt > 0 and steps >= 1 required");
    require_finite(initial, "DelayLine initial input");
    buffer_.assign(static_cast<std::size_t>(steps) + 1, std::move(initial));
  }

  double dt() const { return dt_; }
  int steps() const { return steps_; }
  double delay() const { return dt_ * steps_; }
  double last_time() const { return last_time_; }
  int channels() const { return static_cast<int>(buffer_.front().size()); }

  /// Input at absolute time tau in [t - D, t], linearly interpolated.
  Vec at(double tau) const {
    const double s = (tau - (last_time_ - delay())) / dt_;
    if (s < -1e-9 || s > steps_ + 1e-9)
      throw InvalidArgument("DelayLine::at: query outside the buffered window [t - D, t]");
    int k = std::clamp(static_cast<int>(std::floor(s)), 0, steps_ - 1);
    const double w = std::clamp(s - k, 0.0, 1.0);
    return (1.0 - w) * slot(k) + w * slot(k + 1);
  }

  /// History on [t_next - D, t_next] with `current` as the value at t_next =
  /// last_time + dt.
  ControlHistory history_with(const Vec& current) const {
    RowMat v(steps_ + 1, channels());
    for (int k = 0; k < steps_; ++k) v.row(k) = slot(k + 1).transpose();
    v.row(steps_) = current.transpose();
    return ControlHistory(dt_, std::move(v), last_time_ + dt_);
  }

  /// Commits the input at last_time + dt.
  void push(const Vec& u) {
    require_dim(u.size(), channels(), "DelayLine::push");
    buffer_[head_] = u;
    head_ = (head_ + 1) % buffer_.size();
    last_time_ += dt_;
  }

  const Vec& newest() const { return slot(steps_); }

 private:
  const Vec& slot(int k) const { return buffer_[(head_ + static_cast<std::size_t>(k)) % buffer_.size()]; }

  double dt_;
  int steps_;
  double last_time_;
  std::vector<Vec> buffer_;
  std::size_t head_ = 0;  // index of the oldest slot
};

// ---------------------------------------------------------------------------
// Predictor handles

class Predictor {
 public:
  virtual ~Predictor() = default;
  virtual std::string kind() const = 0;
  virtual PredictorSolution predict(const System& sys, const Vec& x, const ControlHistory& hist) const = 0;
  /// Additive offset on P(0) at control step `step`.
  virtual void step_offset(std::size_t /*step*/, Vec& offset) const { offset.setZero(); }
};

using PredictorPtr = std::shared_ptr<const Predictor>;

/// Dense RK4 integration of the predictor ODE (ground truth).
class ExactOraclePredictor final : public Predictor {
 public:
  explicit ExactOraclePredictor(int refine = 8) : refine_(refine) {}
  std::string kind() const override { return "exact"; }
  PredictorSolution predict(const System& sys, const Vec& x, const ControlHistory& hist) const override {
    return predict_dense_oracle(sys, x, hist, refine_);
  }
  int refine() const { return refine_; }

 private:
  int refine_;
};

class SuccessivePredictor final : public Predictor {
 public:
  explicit SuccessivePredictor(SolverConfig cfg = {}) : cfg_(cfg) { cfg_.validate(); }
  std::string kind() const override { return "successive"; }
  PredictorSolution predict(const System& sys, const Vec& x, const ControlHistory& hist) const override {
    return predict_successive(sys, x, hist, cfg_).solution;
  }
  const SolverConfig& config() const { return cfg_; }

 private:
  SolverConfig cfg_;
};

class NeuralPredictor final : public Predictor {
 public:
  explicit NeuralPredictor(std::shared_ptr<const NnoModel> model) : model_(std::move(model)) {
    PREDFB_REQUIRE(model_ != nullptr, InvalidArgument, "NeuralPredictor: null model");
    model_->validate();
  }
  std::string kind() const override { return "neural"; }
  PredictorSolution predict(const System&, const Vec& x, const ControlHistory& hist) const override {
    return nno_predict(*model_, x, hist);
  }
  const NnoModel& model() const { return *model_; }

 private:
  std::shared_ptr<const NnoModel> model_;
};

/// Wraps another predictor and adds Uniform(-eps, eps) noise per state
/// channel to P(0); the draw depends only on (seed, step).
class PerturbedPredictor final : public Predictor {
 public:
  PerturbedPredictor(PredictorPtr inner, double eps, std::uint64_t seed)
      : inner_(std::move(inner)), eps_(eps), seed_(seed) {
    PREDFB_REQUIRE(inner_ != nullptr, InvalidArgument, "PerturbedPredictor: null inner predictor");
    PREDFB_REQUIRE(eps >= 0.0, InvalidArgument, "PerturbedPredictor: eps must be >= 0");
  }
  std::string kind() const override { return "perturbed(" + inner_->kind() + ")"; }
  PredictorSolution predict(const System& sys, const Vec& x, const ControlHistory& hist) const override {
    return inner_->predict(sys, x, hist);
  }
  void step_offset(std::size_t step, Vec& offset) const override {
    inner_->step_offset(step, offset);
    if (eps_ == 0.0) return;
    Rng rng(derive_seed(seed_, step));
    for (Eigen::Index i = 0; i < offset.size(); ++i) offset[i] += rng.uniform(-eps_, eps_);
  }
  double epsilon() const { return eps_; }

 private:
  PredictorPtr inner_;
  double eps_;
  std::uint64_t seed_;
};

// ---------------------------------------------------------------------------
// Rollout

struct LoopConfig {
  double dt = 0.1;
  double duration = 10.0;
  double delay = 0.5;
  Vec x0;
  Vec initial_input;  ///< U on [-D, 0); zero when empty
  /// Fixed-point sweeps resolving U(t) = kappa(P_hat(t)) when U(t) is itself
  /// the last node of the predictor's history.
  int control_iters = 30;
  double control_tol = 1e-12;
  double divergence_threshold = 1e6;
  std::uint64_t seed = 0;      ///< metadata only
  std::string config_hash;     ///< metadata only

  int delay_steps() const { return exact_steps(delay, dt, "LoopConfig delay"); }
  int total_steps() const { return exact_steps(duration, dt, "LoopConfig duration"); }

  void validate(const System& sys) const {
    delay_steps();
    total_steps();
    require_dim(x0.size(), sys.n(), "LoopConfig x0");
    require_finite(x0, "LoopConfig x0");
    if (initial_input.size() != 0) require_dim(initial_input.size(), sys.m(), "LoopConfig initial input");
    PREDFB_REQUIRE(control_iters >= 1, InvalidArgument, "LoopConfig: control_iters must be >= 1");
    PREDFB_REQUIRE(divergence_threshold > 0, InvalidArgument, "LoopConfig: divergence threshold must be > 0");
  }
};

struct TrajectoryRecord {
  double dt = 0.0;
  double delay = 0.0;
  int delay_steps = 0;
  std::vector<double> times;
  RowMat states;          ///< X(t_k)
  RowMat inputs;          ///< U(t_k)
  RowMat predictions;     ///< P_hat(t_k) fed to kappa (offset included)
  RowMat delayed_inputs;  ///< U(t_k - D)
  std::vector<double> tracking_error;    ///< |X(t_k) - X_des(t_k)|
  std::vector<double> prediction_error;  ///< |X(t_k + D) - P_hat(t_k)|, NaN past T - D
  Vec initial_input;
  std::string predictor_kind;
  std::uint64_t seed = 0;
  std::string config_hash;
  bool diverged = false;
  double max_control_residual = 0.0;

  int rows() const { return static_cast<int>(times.size()); }

  /// U at grid index k (negative k falls in the initial input function).
  Vec input_at(int k) const { return k < 0 ? initial_input : Vec(inputs.row(k).transpose()); }

  /// T_D(t_k)U as applied in the loop.
  ControlHistory history_at(int k) const {
    RowMat v(delay_steps + 1, inputs.cols());
    for (int j = 0; j <= delay_steps; ++j) v.row(j) = input_at(k - delay_steps + j).transpose();
    return ControlHistory(dt, std::move(v), times[static_cast<std::size_t>(k)]);
  }
};

struct StepInfo {
  int step;
  double t;
  const Vec& x;
  const ControlHistory& history;  ///< includes U(t) as the last node
  const Vec& prediction;          ///< P_hat(t) fed to kappa
  const Vec& control;
};

using StepObserver = std::function<void(const StepInfo&)>;

namespace detail {

inline void resize_record(TrajectoryRecord& rec, int rows) {
  rec.times.resize(static_cast<std::size_t>(rows));
  rec.tracking_error.resize(static_cast<std::size_t>(rows));
  rec.states.conservativeResize(rows, Eigen::NoChange);
  rec.inputs.conservativeResize(rows, Eigen::NoChange);
  rec.predictions.conservativeResize(rows, Eigen::NoChange);
  rec.delayed_inputs.conservativeResize(rows, Eigen::NoChange);
}

inline void fill_prediction_errors(TrajectoryRecord& rec) {
  const int rows = rec.rows();
  rec.prediction_error.assign(static_cast<std::size_t>(rows), std::numeric_limits<double>::quiet_NaN());
  for (int k = 0; k + rec.delay_steps < rows; ++k) {
    rec.prediction_error[static_cast<std::size_t>(k)] =
        (rec.states.row(k + rec.delay_steps) - rec.predictions.row(k)).norm();
  }
}

}  // namespace detail

/// Simulates the delayed plant under predictor feedback.
///
/// At each t_k the current input solves U = kappa(P_hat(X, T_D U) + offset,
/// t_k + D) by fixed-point sweeps starting from the previous input, is
/// committed to the delay line, and the plant advances one RK4 step with the
/// delayed input linearly interpolated at the stage times. Rows are recorded
/// for k = 0..T/dt; a non-finite state or |X| above the divergence threshold
/// stops the run with `diverged` set.
inline TrajectoryRecord run_closed_loop(const System& sys, const Predictor& predictor, const LoopConfig& cfg,
                                        const StepObserver& observer = {}) {
  cfg.validate(sys);
  const int n = sys.n();
  const int m = sys.m();
  const int big_n = cfg.delay_steps();
  const int big_k = cfg.total_steps();
  const double dt = cfg.dt;
  const Vec u_init = cfg.initial_input.size() ? cfg.initial_input : Vec::Zero(m);

  TrajectoryRecord rec;
  rec.dt = dt;
  rec.delay = cfg.delay;
  rec.delay_steps = big_n;
  rec.initial_input = u_init;
  rec.predictor_kind = predictor.kind();
  rec.seed = cfg.seed;
  rec.config_hash = cfg.config_hash;
  rec.states.resize(big_k + 1, n);
  rec.inputs.resize(big_k + 1, m);
  rec.predictions.resize(big_k + 1, n);
  rec.delayed_inputs.resize(big_k + 1, m);
  rec.times.resize(static_cast<std::size_t>(big_k) + 1);
  rec.tracking_error.resize(static_cast<std::size_t>(big_k) + 1);

  DelayLine line(dt, big_n, u_init);
  Vec x = cfg.x0;
  Vec u = u_init, u_new(m), offset(n), p(n);
  Vec k1(n), k2(n), k3(n), k4(n), tmp(n);

  for (int k = 0; k <= big_k; ++k) {
    const double t = k * dt;
    if (!x.allFinite() || x.norm() > cfg.divergence_threshold) {
      rec.diverged = true;
      detail::resize_record(rec, k);
      break;
    }

    predictor.step_offset(static_cast<std::size_t>(k), offset);
    ControlHistory hist = line.history_with(u);
    double residual = std::numeric_limits<double>::infinity();
    bool ok = true;
    try {
      for (int it = 0; it < cfg.control_iters; ++it) {
        const PredictorSolution sol = predictor.predict(sys, x, hist);
        p = sol.ahead() + offset;
        if (!p.allFinite()) {
          ok = false;
          break;
        }
        sys.kappa_into(p, t + cfg.delay, u_new);
        residual = (u_new - u).lpNorm<Eigen::Infinity>();
        u = u_new;
        hist.mutable_values().row(big_n) = u.transpose();
        if (residual <= cfg.control_tol * (1.0 + u.lpNorm<Eigen::Infinity>())) break;
      }
    } catch (const NonFinite&) {
      ok = false;
    }
    if (!ok || !u.allFinite()) {
      rec.diverged = true;
      detail::resize_record(rec, k);
      break;
    }
    rec.max_control_residual = std::max(rec.max_control_residual, residual);

    line.push(u);
    rec.times[static_cast<std::size_t>(k)] = t;
    rec.states.row(k) = x.transpose();
    rec.inputs.row(k) = u.transpose();
    rec.predictions.row(k) = p.transpose();
    rec.delayed_inputs.row(k) = line.at(t - cfg.delay).transpose();
    rec.tracking_error[static_cast<std::size_t>(k)] = sys.tracking_error(x, t).norm();
    if (observer) observer(StepInfo{k, t, x, hist, p, u});

    if (k == big_k) break;
    const Vec ua = line.at(t - cfg.delay);
    const Vec ub = line.at(t + dt - cfg.delay);
    const Vec um = 0.5 * (ua + ub);
    sys.eval_f_into(x, ua, k1);
    tmp = x + 0.5 * dt * k1;
    sys.eval_f_into(tmp, um, k2);
    tmp = x + 0.5 * dt * k2;
    sys.eval_f_into(tmp, um, k3);
    tmp = x + dt * k3;
    sys.eval_f_into(tmp, ub, k4);
    x += (dt / 6.0) * (k1 + 2.0 * k2 + 2.0 * k3 + k4);
  }
  detail::fill_prediction_errors(rec);
  return rec;
}

/// RK4 rollout of the delay-free loop Xdot = f(X, kappa(X, t)).
inline RowMat simulate_delay_free(const System& sys, const Vec& x0, double dt, double duration) {
  const int steps = exact_steps(duration, dt, "simulate_delay_free");
  const int n = sys.n();
  RowMat out(steps + 1, n);
  Vec x = x0, k1(n), k2(n), k3(n), k4(n), tmp(n), u(sys.m());
  auto rhs = [&](const Vec& s, double t, Vec& d) {
    sys.kappa_into(s, t, u);
    sys.eval_f_into(s, u, d);
  };
  out.row(0) = x.transpose();
  for (int k = 0; k < steps; ++k) {
    const double t = k * dt;
    rhs(x, t, k1);
    tmp = x + 0.5 * dt * k1;
    rhs(tmp, t + 0.5 * dt, k2);
    tmp = x + 0.5 * dt * k2;
    rhs(tmp, t + 0.5 * dt, k3);
    tmp = x + dt * k3;
    rhs(tmp, t + dt, k4);
    x += (dt / 6.0) * (k1 + 2.0 * k2 + 2.0 * k3 + k4);
    out.row(k + 1) = x.transpose();
  }
  return out;
}

// ---------------------------------------------------------------------------
// Metrics

struct Metrics {
  double summed_tracking_l2 = 0.0;      ///< sum_k |X - X_des| dt
  double mean_prediction_l2 = 0.0;      ///< mean_k |X(t_k + D) - P_hat(t_k)|
  double summed_prediction_l2 = 0.0;    ///< sum_k |X(t_k + D) - P_hat(t_k)| dt
  double max_state_norm = 0.0;
  double asymptotic_residual = 0.0;     ///< mean tracking error over the final 20%
  double plateau = 0.0;                 ///< max tracking error over the final 20%
  double mean_ground_truth_error = std::numeric_limits<double>::quiet_NaN();  ///< |P_hat - P| if a reference is given
};

inline int tail_start(int rows, double fraction = 0.2) {
  return std::clamp(static_cast<int>(std::floor(rows * (1.0 - fraction))), 0, std::max(rows - 1, 0));
}

inline double asymptotic_residual(const TrajectoryRecord& rec) {
  const int rows = rec.rows();
  if (rows == 0) return std::numeric_limits<double>::infinity();
  const int start = tail_start(rows);
  double sum = 0.0;
  for (int k = start; k < rows; ++k) sum += rec.tracking_error[static_cast<std::size_t>(k)];
  return sum / (rows - start);
}

inline double tracking_plateau(const TrajectoryRecord& rec) {
  const int rows = rec.rows();
  if (rows == 0) return std::numeric_limits<double>::infinity();
  double best = 0.0;
  for (int k = tail_start(rows); k < rows; ++k) best = std::max(best, rec.tracking_error[static_cast<std::size_t>(k)]);
  return best;
}

/// Table-1 style metrics. When `reference` is given, also reports the mean
/// distance between the recorded P_hat(t) and reference->predict on the
/// recorded (X(t), T_D(t)U), offsets excluded.
inline Metrics compute_metrics(const TrajectoryRecord& rec, const System* sys = nullptr,
                               const Predictor* reference = nullptr) {
  Metrics mt;
  const int rows = rec.rows();
  std::size_t count = 0;
  for (int k = 0; k < rows; ++k) {
    mt.summed_tracking_l2 += rec.tracking_error[static_cast<std::size_t>(k)] * rec.dt;
    mt.max_state_norm = std::max(mt.max_state_norm, rec.states.row(k).norm());
    const double pe = rec.prediction_error[static_cast<std::size_t>(k)];
    if (!std::isnan(pe)) {
      mt.mean_prediction_l2 += pe;
      mt.summed_prediction_l2 += pe * rec.dt;
      ++count;
    }
  }
  if (count) mt.mean_prediction_l2 /= static_cast<double>(count);
  mt.asymptotic_residual = asymptotic_residual(rec);
  mt.plateau = tracking_plateau(rec);
  if (sys && reference && rows > 0) {
    double total = 0.0;
    for (int k = 0; k < rows; ++k) {
      const Vec x = rec.states.row(k).transpose();
      const auto ref = reference->predict(*sys, x, rec.history_at(k));
      total += (ref.ahead() - rec.predictions.row(k).transpose()).norm();
    }
    mt.mean_ground_truth_error = total / rows;
  }
  return mt;
}

// ---------------------------------------------------------------------------
// Epsilon sweep

struct EpsilonRow {
  double epsilon = 0.0;
  std::vector<double> residuals;  ///< per trial
  double median_residual = 0.0;
  double mean_residual = 0.0;
  double max_state_norm = 0.0;
  int diverged = 0;
};

struct EpsilonSweepReport {
  std::vector<EpsilonRow> rows;
};

inline double median(std::vector<double> v) {
  if (v.empty()) return std::numeric_limits<double>::quiet_NaN();
  std::sort(v.begin(), v.end());
  const std::size_t mid = v.size() / 2;
  return v.size() % 2 ? v[mid] : 0.5 * (v[mid - 1] + v[mid]);
}

/// For each eps and trial i, runs the loop from an initial state drawn with
/// seed derive_seed(ic_seed, i) under PerturbedPredictor(base, eps,
/// derive_seed(noise_seed, i)). The same initial states are reused across eps.
inline EpsilonSweepReport epsilon_sweep(const System& sys, const PredictorPtr& base, const std::vector<double>& eps_list,
                                        int trials, LoopConfig cfg, double ic_lo, double ic_hi,
                                        std::uint64_t ic_seed, std::uint64_t noise_seed) {
  PREDFB_REQUIRE(!eps_list.empty() && eps_list.front() == 0.0, InvalidArgument,
                 "epsilon_sweep: eps list must start at 0");
  PREDFB_REQUIRE(std::is_sorted(eps_list.begin(), eps_list.end()), InvalidArgument,
                 "epsilon_sweep: eps list must be ascending");
  PREDFB_REQUIRE(trials >= 1, InvalidArgument, "epsilon_sweep: trials must be >= 1");

  std::vector<Vec> starts;
  for (int i = 0; i < trials; ++i) {
    Rng rng(derive_seed(ic_seed, static_cast<std::uint64_t>(i)));
    starts.push_back(sys.sample_initial_state(rng, ic_lo, ic_hi));
  }

  EpsilonSweepReport report;
  for (double eps : eps_list) {
    EpsilonRow row;
    row.epsilon = eps;
    for (int i = 0; i < trials; ++i) {
      PerturbedPredictor pred(base, eps, derive_seed(noise_seed, static_cast<std::uint64_t>(i)));
      cfg.x0 = starts[static_cast<std::size_t>(i)];
      const auto rec = run_closed_loop(sys, pred, cfg);
      if (rec.diverged) {
        ++row.diverged;
        row.residuals.push_back(std::numeric_limits<double>::infinity());
        row.max_state_norm = std::numeric_limits<double>::infinity();
        continue;
      }
      row.residuals.push_back(asymptotic_residual(rec));
      for (int k = 0; k < rec.rows(); ++k) row.max_state_norm = std::max(row.max_state_norm, rec.states.row(k).norm());
    }
    row.median_residual = median(row.residuals);
    row.mean_residual = std::accumulate(row.residuals.begin(), row.residuals.end(), 0.0) / trials;
    report.rows.push_back(std::move(row));
  }
  return report;
}

// ---------------------------------------------------------------------------
// CSV

inline void write_record_csv(const TrajectoryRecord& rec, std::ostream& os) {
  os << "# predictor=" << rec.predictor_kind << " seed=" << rec.seed << " config_hash=" << rec.config_hash
     << " diverged=" << (rec.diverged ? 1 : 0) << "\n";
  os << "# columns: t, state x_i, control u_j, prediction p_i (P_hat at theta=0), delayed control ud_j = U(t-D), "
        "tracking_error |X-X_des|, prediction_error |X(t+D)-P_hat(t)| (empty past T-D)\n";
  const auto n = rec.states.cols();
  const auto m = rec.inputs.cols();
  os << "t";
  for (Eigen::Index i = 0; i < n; ++i) os << ",x" << i;
  for (Eigen::Index j = 0; j < m; ++j) os << ",u" << j;
  for (Eigen::Index i = 0; i < n; ++i) os << ",p" << i;
  for (Eigen::Index j = 0; j < m; ++j) os << ",ud" << j;
  os << ",tracking_error,prediction_error\n";
  os.precision(17);
  for (int k = 0; k < rec.rows(); ++k) {
    os << rec.times[static_cast<std::size_t>(k)];
    for (Eigen::Index i = 0; i < n; ++i) os << ',' << rec.states(k, i);
    for (Eigen::Index j = 0; j < m; ++j) os << ',' << rec.inputs(k, j);
    for (Eigen::Index i = 0; i < n; ++i) os << ',' << rec.predictions(k, i);
    for (Eigen::Index j = 0; j < m; ++j) os << ',' << rec.delayed_inputs(k, j);
    os << ',' << rec.tracking_error[static_cast<std::size_t>(k)] << ',';
    const double pe = rec.prediction_error[static_cast<std::size_t>(k)];
    if (!std::isnan(pe)) os << pe;
    os << '\n';
  }
}

}  // namespace predfb
