#pragma once

// Transport-PDE view of the delay line and the backstepping transform
//   w(x, t) = u(x, t) - kappa(p(x, t), t + x),   u(x, t) = U(t + x - D),
// with p, pi the solutions of the x-marched predictor integral equations.
// Post-hoc audits of the target-system boundary and the L-infinity ISS bound
// run on recorded closed-loop trajectories.

#include <predfb/closed_loop.hpp>

namespace predfb {

/// Node values on x_k = k dx, k = 0..N, at time t.
struct GridFunction {
  double dx = 0.0;
  double t = 0.0;
  RowMat values;  ///< (N+1) x channels

  int points() const { return static_cast<int>(values.rows()); }
  int steps() const { return points() - 1; }
  double length() const { return dx * steps(); }
  double node(int k) const { return k * dx; }
};

/// u(x_k, t) = U(t + x_k - D).
using TransportState = GridFunction;
/// w(x_k, t).
using TargetState = GridFunction;

inline TransportState transport_from_history(const ControlHistory& hist) {
  return {hist.dt(), hist.t_now(), hist.values()};
}

inline TransportState transport_from_record(const TrajectoryRecord& rec, int k) {
  return transport_from_history(rec.history_at(k));
}

namespace detail {

/// Marches y' = g(xi, y) from y(0) = x0 on the node grid with implicit
/// trapezoid sub-steps (`substeps` per cell). The input channel is linearly
/// interpolated inside a cell; `g(xi, y, cell, w, out)` receives the cell
/// index and the interpolation weight.
template <typename G>
RowMat march_trapezoid(const Vec& x0, int points, double dx, int substeps, G&& g) {
  PREDFB_REQUIRE(substeps >= 1, InvalidArgument, "march: substeps must be >= 1");
  const int n = static_cast<int>(x0.size());
  RowMat out(points, n);
  out.row(0) = x0.transpose();
  const double h = dx / substeps;
  Vec y = x0, f0(n), f1(n), guess(n), next(n);
  for (int cell = 0; cell + 1 < points; ++cell) {
    for (int j = 0; j < substeps; ++j) {
      const double w0 = static_cast<double>(j) / substeps;
      const double w1 = static_cast<double>(j + 1) / substeps;
      g(cell, w0, y, f0);
      guess = y + h * f0;
      for (int it = 0; it < 100; ++it) {
        g(cell, w1, guess, f1);
        next = y + 0.5 * h * (f0 + f1);
        const double diff = (next - guess).lpNorm<Eigen::Infinity>();
        guess = next;
        if (diff <= 1e-15 * (1.0 + next.lpNorm<Eigen::Infinity>())) break;
      }
      y = guess;
      if (!y.allFinite()) throw NonFinite("x-march: solution became non-finite");
    }
    out.row(cell + 1) = y.transpose();
  }
  out.row(0) = x0.transpose();
  return out;
}

inline Vec interp_row(const RowMat& v, int cell, double w) {
  return ((1.0 - w) * v.row(cell) + w * v.row(cell + 1)).transpose();
}

}  // namespace detail

/// p(x, t) = X(t) + int_0^x f(p, u) dxi.
inline RowMat solve_p(const System& sys, const Vec& x, const TransportState& u, int substeps = 1) {
  require_dim(x.size(), sys.n(), "solve_p state");
  require_dim(u.values.cols(), sys.m(), "solve_p transport channels");
  require_finite(x, "solve_p state");
  Vec uk(sys.m());
  return detail::march_trapezoid(x, u.points(), u.dx, substeps, [&](int cell, double w, const Vec& y, Vec& out) {
    uk = detail::interp_row(u.values, cell, w);
    sys.eval_f_into(y, uk, out);
  });
}

/// pi(x, t) = X(t) + int_0^x f(pi, kappa(pi, t + xi) + w) dxi.
inline RowMat solve_pi(const System& sys, const Vec& x, const TargetState& w, int substeps = 1) {
  require_dim(x.size(), sys.n(), "solve_pi state");
  require_dim(w.values.cols(), sys.m(), "solve_pi target channels");
  require_finite(x, "solve_pi state");
  Vec uk(sys.m()), kap(sys.m());
  return detail::march_trapezoid(x, w.points(), w.dx, substeps, [&](int cell, double a, const Vec& y, Vec& out) {
    const double xi = (cell + a) * w.dx;
    sys.kappa_into(y, w.t + xi, kap);
    uk = kap + detail::interp_row(w.values, cell, a);
    sys.eval_f_into(y, uk, out);
  });
}

/// w(x_k) = u(x_k) - kappa(p(x_k), t + x_k).
inline TargetState forward_transform(const System& sys, const TransportState& u, const RowMat& p) {
  require_dim(p.rows(), u.points(), "forward_transform grid");
  TargetState w{u.dx, u.t, RowMat(u.points(), u.values.cols())};
  Vec kap(sys.m());
  for (int k = 0; k < u.points(); ++k) {
    sys.kappa_into(p.row(k).transpose(), u.t + u.node(k), kap);
    w.values.row(k) = u.values.row(k) - kap.transpose();
  }
  return w;
}

/// u(x_k) = w(x_k) + kappa(pi(x_k), t + x_k).
inline TransportState inverse_transform(const System& sys, const TargetState& w, const RowMat& pi) {
  require_dim(pi.rows(), w.points(), "inverse_transform grid");
  TransportState u{w.dx, w.t, RowMat(w.points(), w.values.cols())};
  Vec kap(sys.m());
  for (int k = 0; k < w.points(); ++k) {
    sys.kappa_into(pi.row(k).transpose(), w.t + w.node(k), kap);
    u.values.row(k) = w.values.row(k) + kap.transpose();
  }
  return u;
}

/// max_k exp(c x_k) |w(x_k)|_2.
inline double weighted_sup_norm(const GridFunction& w, double c) {
  PREDFB_REQUIRE(c >= 0.0, InvalidArgument, "weighted_sup_norm: c must be >= 0");
  double best = 0.0;
  for (int k = 0; k < w.points(); ++k) best = std::max(best, std::exp(c * w.node(k)) * w.values.row(k).norm());
  return best;
}

// ---------------------------------------------------------------------------
// Audits

struct VerifyConfig {
  int substeps = 8;       ///< x-march refinement for p
  int oracle_refine = 8;  ///< dense-oracle refinement for the ground-truth P
  double slack = 0.0;     ///< absolute tolerance for all checks
};

/// Ground-truth predictor values and boundary terms along a record.
struct BoundarySeries {
  std::vector<double> times;
  std::vector<double> delta;      ///< |kappa(P_hat(t)) - kappa(P(t))|, P from the dense oracle
  std::vector<double> boundary;   ///< |w(D, t)|
  std::vector<double> residual;   ///< |w(D, t) - (kappa(P_hat) - kappa(P))|
  std::vector<TargetState> w;     ///< w(., t_k)
};

inline BoundarySeries reconstruct_target(const TrajectoryRecord& rec, const System& sys, const VerifyConfig& cfg) {
  BoundarySeries s;
  const int rows = rec.rows();
  const int big_n = rec.delay_steps;
  Vec kp(sys.m()), kph(sys.m());
  for (int k = 0; k < rows; ++k) {
    const double t = rec.times[static_cast<std::size_t>(k)];
    const Vec x = rec.states.row(k).transpose();
    const ControlHistory hist = rec.history_at(k);
    const TransportState u = transport_from_history(hist);
    const RowMat p = solve_p(sys, x, u, cfg.substeps);
    TargetState w = forward_transform(sys, u, p);

    const auto truth = predict_dense_oracle(sys, x, hist, cfg.oracle_refine);
    sys.kappa_into(truth.ahead(), t + rec.delay, kp);
    sys.kappa_into(rec.predictions.row(k).transpose(), t + rec.delay, kph);
    const Vec expected = kph - kp;
    const Vec wd = w.values.row(big_n).transpose();

    s.times.push_back(t);
    s.delta.push_back(expected.norm());
    s.boundary.push_back(wd.norm());
    s.residual.push_back((wd - expected).norm());
    s.w.push_back(std::move(w));
  }
  return s;
}

struct TargetReport {
  double max_residual = 0.0;   ///< max_t |w(D,t) - (kappa(P_hat) - kappa(P))|
  double max_boundary = 0.0;   ///< max_t |w(D,t)|
  double max_delta = 0.0;      ///< max_t |kappa(P_hat) - kappa(P)|
  double max_transport_residual = 0.0;  ///< max |w_t - w_x| by forward differences
  double max_transport_scale = 0.0;     ///< max |w_x| by forward differences
  std::size_t violations = 0;  ///< steps with residual above slack
  double slack = 0.0;
};

/// Checks the target-system boundary condition w(D, t) = kappa(P_hat) -
/// kappa(P) along the record, and the transport identity w_t = w_x.
inline TargetReport check_target_system(const TrajectoryRecord& rec, const System& sys, const VerifyConfig& cfg,
                                        const BoundarySeries* pre = nullptr) {
  BoundarySeries local;
  if (!pre) {
    local = reconstruct_target(rec, sys, cfg);
    pre = &local;
  }
  const auto& s = *pre;
  TargetReport rep;
  rep.slack = cfg.slack;
  for (std::size_t k = 0; k < s.times.size(); ++k) {
    rep.max_residual = std::max(rep.max_residual, s.residual[k]);
    rep.max_boundary = std::max(rep.max_boundary, s.boundary[k]);
    rep.max_delta = std::max(rep.max_delta, s.delta[k]);
    if (s.residual[k] > cfg.slack) ++rep.violations;
  }
  // With dx = dt the forward-difference residual compares w(x_k, t_{j+1})
  // with w(x_{k+1}, t_j).
  for (std::size_t j = 0; j + 1 < s.w.size(); ++j) {
    const auto& a = s.w[j];
    const auto& b = s.w[j + 1];
    for (int k = 0; k + 1 < a.points(); ++k) {
      const double wt_wx = (b.values.row(k) - a.values.row(k + 1)).norm() / rec.dt;
      const double wx = (a.values.row(k + 1) - a.values.row(k)).norm() / a.dx;
      rep.max_transport_residual = std::max(rep.max_transport_residual, wt_wx);
      rep.max_transport_scale = std::max(rep.max_transport_scale, wx);
    }
  }
  return rep;
}

struct IssPoint {
  double t = 0.0;
  double lhs = 0.0;  ///< ||w(t)||_inf
  double rhs = 0.0;  ///< exp(c (D - t)) ||w(0)||_inf + exp(c D) sup_{s <= t} delta(s)
};

struct IssReport {
  double c = 0.0;
  std::size_t violations = 0;
  double max_excess = 0.0;  ///< max_t (lhs - rhs), may be negative
  double slack = 0.0;
  std::vector<IssPoint> series;
};

/// Evaluates both sides of the L-infinity ISS estimate at every recorded step.
inline IssReport check_iss_bound(const TrajectoryRecord& rec, const System& sys, double c, const VerifyConfig& cfg,
                                 const BoundarySeries* pre = nullptr) {
  PREDFB_REQUIRE(c > 0.0, InvalidArgument, "check_iss_bound: c must be positive");
  BoundarySeries local;
  if (!pre) {
    local = reconstruct_target(rec, sys, cfg);
    pre = &local;
  }
  const auto& s = *pre;
  IssReport rep;
  rep.c = c;
  rep.slack = cfg.slack;
  rep.max_excess = -std::numeric_limits<double>::infinity();
  if (s.w.empty()) return rep;
  const double w0 = weighted_sup_norm(s.w.front(), 0.0);
  double sup_delta = 0.0;
  for (std::size_t k = 0; k < s.w.size(); ++k) {
    sup_delta = std::max(sup_delta, s.delta[k]);
    IssPoint pt;
    pt.t = s.times[k];
    pt.lhs = weighted_sup_norm(s.w[k], 0.0);
    pt.rhs = std::exp(c * (rec.delay - pt.t)) * w0 + std::exp(c * rec.delay) * sup_delta;
    rep.max_excess = std::max(rep.max_excess, pt.lhs - pt.rhs);
    if (pt.lhs > pt.rhs + cfg.slack) ++rep.violations;
    rep.series.push_back(pt);
  }
  return rep;
}

struct SlackCalibration {
  double slack = 0.0;
  double target_residual = 0.0;  ///< max |w(D,t) - (kappa(P_hat) - kappa(P))| on the exact run
  double boundary = 0.0;         ///< max |w(D,t)| on the exact run
  double iss_excess = 0.0;       ///< max over c of max_t (lhs - rhs)+ on the exact run
  double factor = 0.0;
  double floor = 0.0;
  std::string description;
};

/// Slack = factor * (largest discretization residual of an exact-predictor
/// run), but never below `floor`.
inline SlackCalibration calibrate_slack(const System& sys, const LoopConfig& loop, const std::vector<double>& cs,
                                        VerifyConfig cfg, double factor = 2.0, double floor = 1e-9) {
  const ExactOraclePredictor exact(cfg.oracle_refine);
  const auto rec = run_closed_loop(sys, exact, loop);
  if (rec.diverged) throw NonFinite("calibrate_slack: exact-predictor run diverged");
  cfg.slack = 0.0;
  const auto series = reconstruct_target(rec, sys, cfg);
  const auto tgt = check_target_system(rec, sys, cfg, &series);
  SlackCalibration cal;
  cal.target_residual = tgt.max_residual;
  cal.boundary = tgt.max_boundary;
  for (double c : cs) cal.iss_excess = std::max(cal.iss_excess, std::max(0.0, check_iss_bound(rec, sys, c, cfg, &series).max_excess));
  cal.factor = factor;
  cal.floor = floor;
  cal.slack = std::max(floor, factor * std::max({cal.target_residual, cal.boundary, cal.iss_excess}));
  cal.description = "exact-predictor run of " + sys.id() + " from x0 with dt=" + std::to_string(loop.dt) +
                    ", T=" + std::to_string(loop.duration) + ", substeps=" + std::to_string(cfg.substeps) +
                    ", oracle refine=" + std::to_string(cfg.oracle_refine);
  return cal;
}

inline void write_iss_csv(const IssReport& rep, std::ostream& os, const std::string& config_hash, std::uint64_t seed) {
  os << "# seed=" << seed << " config_hash=" << config_hash << " c=" << rep.c << " slack=" << rep.slack
     << " violations=" << rep.violations << "\n";
  os << "t,lhs_w_sup,rhs_bound,margin\n";
  os.precision(17);
  for (const auto& p : rep.series) os << p.t << ',' << p.lhs << ',' << p.rhs << ',' << (p.rhs - p.lhs) << '\n';
}

}  // namespace predfb
