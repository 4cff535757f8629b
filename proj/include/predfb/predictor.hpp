#pragma once

// Numerical predictor operator: given X(t) and the input history on
// [t - D, t], compute P(theta), theta in [-D, 0], solving
//   P(s) = X + int_{-D}^{s} f(P(theta), U(theta)) dtheta.

#include <predfb/dynamics.hpp>

namespace predfb {

/// T_D(t)U sampled on a uniform grid: row k holds U(t - D + k dt), k = 0..N.
class ControlHistory {
 public:
  ControlHistory() = default;

  ControlHistory(double dt, RowMat values, double t_now = 0.0)
      : dt_(dt), values_(std::move(values)), t_now_(t_now) {
    PREDFB_REQUIRE(dt_ > 0.0, InvalidArgument, "ControlHistory: dt must be positive");
    PREDFB_REQUIRE(values_.rows() >= 2, InvalidArgument, "ControlHistory: need at least two grid points");
    PREDFB_REQUIRE(values_.cols() >= 1, InvalidArgument, "ControlHistory: need at least one channel");
    require_finite(values_, "ControlHistory values");
  }

  /// History of a constant input over delay D.
  static ControlHistory constant(double dt, double delay, const Vec& u, double t_now = 0.0) {
    const int n_steps = exact_steps(delay, dt, "ControlHistory");
    RowMat v(n_steps + 1, u.size());
    for (int k = 0; k <= n_steps; ++k) v.row(k) = u.transpose();
    return ControlHistory(dt, std::move(v), t_now);
  }

  double dt() const { return dt_; }
  int steps() const { return static_cast<int>(values_.rows()) - 1; }
  int points() const { return static_cast<int>(values_.rows()); }
  int channels() const { return static_cast<int>(values_.cols()); }
  double delay() const { return dt_ * steps(); }
  double t_now() const { return t_now_; }
  const RowMat& values() const { return values_; }
  RowMat& mutable_values() { return values_; }

  /// U(t + theta) by linear interpolation, theta in [-D, 0].
  Vec at(double theta) const {
    const double s = (theta + delay()) / dt_;
    PREDFB_REQUIRE(s >= -1e-9 && s <= steps() + 1e-9, InvalidArgument,
                   "ControlHistory::at: offset outside [-D, 0]");
    int k = static_cast<int>(std::floor(s));
    k = std::clamp(k, 0, steps() - 1);
    const double w = std::clamp(s - k, 0.0, 1.0);
    return ((1.0 - w) * values_.row(k) + w * values_.row(k + 1)).transpose();
  }

  /// Linear refinement onto a grid with `factor` sub-steps per cell.
  ControlHistory refined(int factor) const {
    PREDFB_REQUIRE(factor >= 1, InvalidArgument, "ControlHistory::refined: factor must be >= 1");
    RowMat v(steps() * factor + 1, channels());
    for (int k = 0; k < steps(); ++k) {
      for (int j = 0; j < factor; ++j) {
        const double w = static_cast<double>(j) / factor;
        v.row(k * factor + j) = (1.0 - w) * values_.row(k) + w * values_.row(k + 1);
      }
    }
    v.row(v.rows() - 1) = values_.row(values_.rows() - 1);
    return ControlHistory(dt_ / factor, std::move(v), t_now_);
  }

 private:
  double dt_ = 0.0;
  RowMat values_;
  double t_now_ = 0.0;
};

/// P(theta) on the history grid; row 0 (theta = -D) is the anchoring state.
struct PredictorSolution {
  double dt = 0.0;
  RowMat values;

  int points() const { return static_cast<int>(values.rows()); }
  /// P(0), the D-ahead prediction.
  Vec ahead() const { return values.row(values.rows() - 1).transpose(); }
  Vec anchor() const { return values.row(0).transpose(); }
};

enum class Quadrature { trapezoid, left_euler };

inline std::string to_string(Quadrature q) { return q == Quadrature::trapezoid ? "trapezoid" : "left-euler"; }

struct SolverConfig {
  double tol = 1e-7;
  int max_iters = 100;
  Quadrature quadrature = Quadrature::trapezoid;

  void validate() const {
    PREDFB_REQUIRE(tol > 0.0, InvalidArgument, "SolverConfig: tol must be positive");
    PREDFB_REQUIRE(max_iters >= 1, InvalidArgument, "SolverConfig: max_iters must be >= 1");
  }
};

struct SuccessiveResult {
  PredictorSolution solution;
  int iterations = 0;
  /// Sup-norm self-consistency residual of `solution`.
  double residual = 0.0;
  bool converged = false;
};

namespace detail {

inline void check_predictor_inputs(const System& sys, const Vec& x, const ControlHistory& hist) {
  require_dim(x.size(), sys.n(), "predictor state");
  require_dim(hist.channels(), sys.m(), "predictor history channels");
  require_finite(x, "predictor state");
}

}  // namespace detail

/// One application of the Picard map: out = x + int f(in, U) with the chosen
/// quadrature. `f_buf` must be (N+1) x n.
inline void successive_iteration(const System& sys, const Vec& x, const ControlHistory& hist,
                                 Quadrature quad, const RowMat& in, RowMat& out, RowMat& f_buf) {
  const int pts = hist.points();
  const double dt = hist.dt();
  Vec p(sys.n()), u(sys.m()), dx(sys.n());
  for (int k = 0; k < pts; ++k) {
    p = in.row(k).transpose();
    u = hist.values().row(k).transpose();
    sys.eval_f_into(p, u, dx);
    f_buf.row(k) = dx.transpose();
  }
  out.row(0) = x.transpose();
  if (quad == Quadrature::trapezoid) {
    for (int k = 1; k < pts; ++k) out.row(k) = out.row(k - 1) + 0.5 * dt * (f_buf.row(k - 1) + f_buf.row(k));
  } else {
    for (int k = 1; k < pts; ++k) out.row(k) = out.row(k - 1) + dt * f_buf.row(k - 1);
  }
}

/// Successive approximations from the constant guess P^0 = x.
///
/// Returns the iterate with the smallest self-consistency residual
/// ||P - x - int f(P, U)||_inf; `converged` is false when that residual still
/// exceeds `cfg.tol` after `cfg.max_iters` map applications.
inline SuccessiveResult predict_successive(const System& sys, const Vec& x, const ControlHistory& hist,
                                           const SolverConfig& cfg = {}) {
  cfg.validate();
  detail::check_predictor_inputs(sys, x, hist);
  const int pts = hist.points();
  const int n = sys.n();

  RowMat cur(pts, n), next(pts, n), f_buf(pts, n);
  for (int k = 0; k < pts; ++k) cur.row(k) = x.transpose();

  SuccessiveResult best;
  best.residual = std::numeric_limits<double>::infinity();
  for (int it = 1; it <= cfg.max_iters; ++it) {
    successive_iteration(sys, x, hist, cfg.quadrature, cur, next, f_buf);
    if (!next.allFinite()) throw NonFinite("predict_successive: iterate became non-finite");
    const double residual = sup_row_norm(next - cur);
    if (residual < best.residual) {
      best.residual = residual;
      best.iterations = it;
      best.solution.values = cur;
    }
    if (residual <= cfg.tol) {
      best.converged = true;
      break;
    }
    cur.swap(next);
  }
  best.solution.dt = hist.dt();
  // The anchor row is x by construction; assign it to keep it bit-exact.
  best.solution.values.row(0) = x.transpose();
  if (!best.converged) best.iterations = cfg.max_iters;
  return best;
}

/// Self-consistency residual of a candidate solution under the quadrature.
inline double predictor_residual(const System& sys, const Vec& x, const ControlHistory& hist,
                                 const PredictorSolution& sol, Quadrature quad = Quadrature::trapezoid) {
  detail::check_predictor_inputs(sys, x, hist);
  require_dim(sol.values.rows(), hist.points(), "predictor_residual grid");
  RowMat out(hist.points(), sys.n()), f_buf(hist.points(), sys.n());
  successive_iteration(sys, x, hist, quad, sol.values, out, f_buf);
  return sup_row_norm(out - sol.values);
}

/// Dense classical RK4 integration of Pdot = f(P, U(theta)) from P(-D) = x at
/// step dt/refine with a linearly interpolated input; subsampled back to the
/// history grid. Ground truth for tests and verification only.
inline PredictorSolution predict_dense_oracle(const System& sys, const Vec& x, const ControlHistory& hist,
                                              int refine = 100) {
  detail::check_predictor_inputs(sys, x, hist);
  PREDFB_REQUIRE(refine >= 1, InvalidArgument, "predict_dense_oracle: refine must be >= 1");
  const int n = sys.n();
  const double h = hist.dt() / refine;

  PredictorSolution sol;
  sol.dt = hist.dt();
  sol.values.resize(hist.points(), n);
  sol.values.row(0) = x.transpose();

  Vec p = x, k1(n), k2(n), k3(n), k4(n), tmp(n), u0(sys.m()), um(sys.m()), u1(sys.m());
  for (int cell = 0; cell < hist.steps(); ++cell) {
    const auto a = hist.values().row(cell);
    const auto b = hist.values().row(cell + 1);
    for (int j = 0; j < refine; ++j) {
      const double w0 = static_cast<double>(j) / refine;
      const double w1 = static_cast<double>(j + 1) / refine;
      const double wm = 0.5 * (w0 + w1);
      u0 = ((1.0 - w0) * a + w0 * b).transpose();
      um = ((1.0 - wm) * a + wm * b).transpose();
      u1 = ((1.0 - w1) * a + w1 * b).transpose();
      sys.eval_f_into(p, u0, k1);
      tmp = p + 0.5 * h * k1;
      sys.eval_f_into(tmp, um, k2);
      tmp = p + 0.5 * h * k2;
      sys.eval_f_into(tmp, um, k3);
      tmp = p + h * k3;
      sys.eval_f_into(tmp, u1, k4);
      p += (h / 6.0) * (k1 + 2.0 * k2 + 2.0 * k3 + k4);
    }
    if (!p.allFinite()) throw NonFinite("predict_dense_oracle: state became non-finite");
    sol.values.row(cell + 1) = p.transpose();
  }
  return sol;
}

/// C_P = max(1, D C_f) exp(D C_f), the Lipschitz constant of the predictor
/// operator in the (state, sup-norm input) -> sup-norm trajectory metric.
inline double predictor_lipschitz_bound(double cf, double delay) {
  PREDFB_REQUIRE(cf >= 0.0, InvalidArgument, "predictor_lipschitz_bound: C_f must be >= 0");
  PREDFB_REQUIRE(delay > 0.0, InvalidArgument, "predictor_lipschitz_bound: D must be positive");
  return std::max(1.0, delay * cf) * std::exp(delay * cf);
}

struct ContinuityReport {
  double max_ratio = 0.0;
  double cp = 0.0;
  double cf = 0.0;
  std::size_t pairs = 0;
  std::size_t violations = 0;
  bool pass = false;
};

/// Empirical ratio ||P1 - P2||_inf / (|x1 - x2| + ||U1 - U2||_inf) over
/// sampled input pairs, compared to C_P(cf, D). Half the pairs are
/// independent draws, half are small perturbations of the first member.
/// Identical pairs are skipped (ratio 0/0).
inline ContinuityReport check_predictor_continuity(const System& sys, std::size_t pairs, const Box& box_x,
                                                   const Box& box_u, double dt, double delay, double cf,
                                                   std::uint64_t seed, int refine = 8) {
  require_dim(box_x.dim(), sys.n(), "check_predictor_continuity state box");
  require_dim(box_u.dim(), sys.m(), "check_predictor_continuity control box");
  const int steps = exact_steps(delay, dt, "check_predictor_continuity");

  ContinuityReport rep;
  rep.cf = cf;
  rep.cp = predictor_lipschitz_bound(cf, delay);
  Rng rng(seed);

  auto draw_history = [&]() {
    RowMat v(steps + 1, sys.m());
    for (int k = 0; k <= steps; ++k) v.row(k) = rng.uniform(box_u).transpose();
    return v;
  };
  auto clamp_rows = [&](RowMat& v) {
    for (Eigen::Index k = 0; k < v.rows(); ++k)
      v.row(k) = v.row(k).cwiseMax(box_u.lo.transpose()).cwiseMin(box_u.hi.transpose());
  };

  for (std::size_t i = 0; i < pairs; ++i) {
    const Vec x1 = rng.uniform(box_x);
    RowMat u1 = draw_history();
    Vec x2;
    RowMat u2;
    if (i % 2 == 0) {
      x2 = rng.uniform(box_x);
      u2 = draw_history();
    } else {
      const double scale = 1e-2;
      x2 = x1;
      for (Eigen::Index j = 0; j < x2.size(); ++j) x2[j] += scale * (box_x.hi[j] - box_x.lo[j]) * (rng.uniform() - 0.5);
      x2 = x2.cwiseMax(box_x.lo).cwiseMin(box_x.hi);
      u2 = u1;
      for (Eigen::Index k = 0; k < u2.rows(); ++k)
        for (Eigen::Index j = 0; j < u2.cols(); ++j)
          u2(k, j) += scale * (box_u.hi[j] - box_u.lo[j]) * (rng.uniform() - 0.5);
      clamp_rows(u2);
    }
    const double denom = (x1 - x2).norm() + sup_row_norm(u1 - u2);
    if (denom == 0.0) continue;
    const auto p1 = predict_dense_oracle(sys, x1, ControlHistory(dt, u1), refine);
    const auto p2 = predict_dense_oracle(sys, x2, ControlHistory(dt, u2), refine);
    const double ratio = sup_row_norm(p1.values - p2.values) / denom;
    ++rep.pairs;
    if (ratio > rep.cp) ++rep.violations;
    rep.max_ratio = std::max(rep.max_ratio, ratio);
  }
  rep.pass = rep.violations == 0;
  return rep;
}

}  // namespace predfb
