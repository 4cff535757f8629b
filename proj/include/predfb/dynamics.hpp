#pragma once

// Plant abstraction f(X, U), nominal delay-free controllers, and the two
// concrete plants: a linear test plant and a 2-link planar manipulator under
// computed-torque control.

#include <predfb/common.hpp>

#include <memory>
#include <optional>
#include <string>

namespace predfb {

struct SystemSpec {
  int n = 1;             ///< state dimension
  int m = 1;             ///< input dimension
  double delay = 0.5;    ///< default input delay D in seconds
  std::optional<Box> saturation;      ///< per-channel control bounds
  std::optional<double> lipschitz_cf;  ///< supplied or estimated C_f

  void validate() const {
    PREDFB_REQUIRE(n >= 1 && m >= 1, InvalidArgument, "SystemSpec: n and m must be >= 1");
    PREDFB_REQUIRE(delay > 0.0, InvalidArgument, "SystemSpec: delay must be positive");
    if (saturation) {
      require_dim(saturation->dim(), m, "SystemSpec saturation");
      saturation->validate("SystemSpec saturation");
      PREDFB_REQUIRE(saturation->has_volume(), InvalidArgument,
                     "SystemSpec: saturation needs min < max on every channel");
    }
    if (lipschitz_cf) PREDFB_REQUIRE(*lipschitz_cf > 0.0, InvalidArgument, "SystemSpec: C_f must be positive");
  }
};

/// Plant Xdot = f(X, U) with a nominal delay-free feedback kappa(X, t).
///
/// Implementations are immutable after construction and may be shared across
/// threads. `eval_f_into` and `kappa_into` are the unchecked hot paths used by
/// the solvers; the public checked wrappers validate dimensions and finiteness.
class System {
 public:
  virtual ~System() = default;

  virtual const SystemSpec& spec() const = 0;
  virtual std::string id() const = 0;

  /// dx = f(x, u). No validation.
  virtual void eval_f_into(const Vec& x, const Vec& u, Vec& dx) const = 0;

  /// Unsaturated nominal control. No validation.
  virtual void kappa_raw_into(const Vec& x, double t, Vec& u) const = 0;

  /// Reference trajectory the controller tracks; zero by default.
  virtual Vec desired_state(double /*t*/) const { return Vec::Zero(spec().n); }

  /// Centre of the initial-condition distribution.
  virtual Vec nominal_state() const { return Vec::Zero(spec().n); }

  /// Perturbation of `nominal_state` by Uniform(lo, hi) on the channels that
  /// the initial-condition sampler varies (all channels by default).
  virtual Vec sample_initial_state(Rng& rng, double lo, double hi) const {
    Vec x = nominal_state();
    for (Eigen::Index i = 0; i < x.size(); ++i) x[i] += rng.uniform(lo, hi);
    return x;
  }

  int n() const { return spec().n; }
  int m() const { return spec().m; }

  Vec eval_f(const Vec& x, const Vec& u) const {
    require_dim(x.size(), n(), "eval_f state");
    require_dim(u.size(), m(), "eval_f control");
    require_finite(x, "eval_f state");
    require_finite(u, "eval_f control");
    Vec dx(n());
    eval_f_into(x, u, dx);
    return dx;
  }

  /// Saturated nominal control kappa(x, t).
  void kappa_into(const Vec& x, double t, Vec& u) const {
    kappa_raw_into(x, t, u);
    if (const auto& sat = spec().saturation) u = u.cwiseMax(sat->lo).cwiseMin(sat->hi);
  }

  Vec kappa(const Vec& x, double t = 0.0) const {
    require_dim(x.size(), n(), "kappa state");
    require_finite(x, "kappa state");
    Vec u(m());
    kappa_into(x, t, u);
    return u;
  }

  Vec tracking_error(const Vec& x, double t) const { return x - desired_state(t); }
};

// ---------------------------------------------------------------------------
// Linear plant  xdot = A x + B u,  kappa(x) = -K x

class LinearPlant final : public System {
 public:
  LinearPlant(Mat a, Mat b, Mat gain, double delay, Vec nominal)
      : a_(std::move(a)), b_(std::move(b)), k_(std::move(gain)), nominal_(std::move(nominal)) {
    spec_.n = static_cast<int>(a_.rows());
    spec_.m = static_cast<int>(b_.cols());
    spec_.delay = delay;
    require_dim(a_.cols(), spec_.n, "LinearPlant A");
    require_dim(b_.rows(), spec_.n, "LinearPlant B");
    require_dim(k_.rows(), spec_.m, "LinearPlant K rows");
    require_dim(k_.cols(), spec_.n, "LinearPlant K cols");
    require_dim(nominal_.size(), spec_.n, "LinearPlant nominal state");
    spec_.validate();
  }

  /// Scalar plant xdot = a x + b u with kappa = -k x.
  static LinearPlant scalar(double a, double b, double k, double delay = 0.5, double nominal = 1.0) {
    return LinearPlant(Mat::Constant(1, 1, a), Mat::Constant(1, 1, b), Mat::Constant(1, 1, k), delay,
                       Vec::Constant(1, nominal));
  }

  const SystemSpec& spec() const override { return spec_; }
  std::string id() const override { return "linear"; }

  void eval_f_into(const Vec& x, const Vec& u, Vec& dx) const override {
    dx.noalias() = a_ * x;
    dx.noalias() += b_ * u;
  }

  void kappa_raw_into(const Vec& x, double, Vec& u) const override { u.noalias() = -k_ * x; }

  Vec nominal_state() const override { return nominal_; }

  const Mat& a() const { return a_; }
  const Mat& b() const { return b_; }
  const Mat& gain() const { return k_; }

 private:
  Mat a_, b_, k_;
  Vec nominal_;
  SystemSpec spec_;
};

// ---------------------------------------------------------------------------
// 2-link planar manipulator
//
// Joint angles are measured from the downward vertical, the second one
// relative to the first link; gravity acts along -y. State X = [q; qdot].

struct LinkParams {
  double mass = 1.0;     // kg
  double length = 1.0;   // m
  double com = 0.5;      // m, from the proximal joint
  double inertia = 1.0 / 12.0;  // kg m^2 about the centre of mass
};

struct ManipulatorParams {
  LinkParams link1;
  LinkParams link2;
  double gravity = 9.81;
  Eigen::Vector2d alpha = Eigen::Vector2d::Ones();  ///< diagonal gain
  Eigen::Vector2d beta = Eigen::Vector2d::Ones();   ///< diagonal gain
  Eigen::Vector2d joint_min{-1.7016, -2.147};
  Eigen::Vector2d joint_max{1.7016, 1.047};
  Eigen::Vector2d torque_min{-50.0, -50.0};
  Eigen::Vector2d torque_max{50.0, 50.0};
  double amplitude = 0.1;  ///< desired sinusoid amplitude, rad
  double delay = 0.5;

  Eigen::Vector2d offset() const { return 0.5 * (joint_max + joint_min); }

  void validate() const {
    for (const auto* l : {&link1, &link2}) {
      PREDFB_REQUIRE(l->mass > 0 && l->length > 0 && l->inertia > 0, InvalidArgument,
                     "ManipulatorParams: masses, lengths and inertias must be positive");
      PREDFB_REQUIRE(l->com >= 0, InvalidArgument, "ManipulatorParams: COM offset must be >= 0");
    }
    PREDFB_REQUIRE((alpha.array() > 0).all() && (beta.array() > 0).all(), InvalidArgument,
                   "ManipulatorParams: alpha and beta must be positive");
    PREDFB_REQUIRE((joint_min.array() < joint_max.array()).all(), InvalidArgument,
                   "ManipulatorParams: joint limits need min < max");
    PREDFB_REQUIRE((torque_min.array() < torque_max.array()).all(), InvalidArgument,
                   "ManipulatorParams: torque limits need min < max");
    PREDFB_REQUIRE(std::isfinite(gravity), InvalidArgument, "ManipulatorParams: gravity must be finite");
    PREDFB_REQUIRE(delay > 0, InvalidArgument, "ManipulatorParams: delay must be positive");
  }
};

struct ManipulatorMatrices {
  Eigen::Matrix2d mass;      ///< M(q)
  Eigen::Matrix2d coriolis;  ///< C(q, qdot)
  Eigen::Vector2d gravity;   ///< G(q)
};

inline ManipulatorMatrices manipulator_matrices(const ManipulatorParams& p, const Eigen::Vector2d& q,
                                                const Eigen::Vector2d& qdot) {
  const auto& l1 = p.link1;
  const auto& l2 = p.link2;
  const double c2 = std::cos(q[1]);
  const double s2 = std::sin(q[1]);
  const double s1 = std::sin(q[0]);
  const double s12 = std::sin(q[0] + q[1]);

  ManipulatorMatrices out;
  const double m22 = l2.inertia + l2.mass * l2.com * l2.com;
  const double m12 = m22 + l2.mass * l1.length * l2.com * c2;
  const double m11 = l1.inertia + l1.mass * l1.com * l1.com + l2.inertia +
                     l2.mass * (l1.length * l1.length + l2.com * l2.com + 2.0 * l1.length * l2.com * c2);
  out.mass << m11, m12, m12, m22;

  const double h = l2.mass * l1.length * l2.com * s2;
  out.coriolis << -h * qdot[1], -h * (qdot[0] + qdot[1]), h * qdot[0], 0.0;

  const double g = p.gravity;
  out.gravity << (l1.mass * l1.com + l2.mass * l1.length) * g * s1 + l2.mass * l2.com * g * s12,
      l2.mass * l2.com * g * s12;
  return out;
}

/// q_des(t) = amplitude sin(t) + midpoint of the joint limits, with analytic
/// first and second derivatives.
struct DesiredTrajectory {
  Eigen::Vector2d q, qdot, qddot;
};

inline DesiredTrajectory desired_trajectory(const ManipulatorParams& p, double t) {
  const double s = std::sin(t);
  const double c = std::cos(t);
  DesiredTrajectory d;
  d.q = Eigen::Vector2d::Constant(p.amplitude * s) + p.offset();
  d.qdot = Eigen::Vector2d::Constant(p.amplitude * c);
  d.qddot = Eigen::Vector2d::Constant(-p.amplitude * s);
  return d;
}

class TwoLinkManipulator final : public System {
 public:
  explicit TwoLinkManipulator(ManipulatorParams params = {}) : p_(std::move(params)) {
    p_.validate();
    spec_.n = 4;
    spec_.m = 2;
    spec_.delay = p_.delay;
    spec_.saturation = Box{p_.torque_min, p_.torque_max};
    spec_.validate();
  }

  const SystemSpec& spec() const override { return spec_; }
  std::string id() const override { return "manipulator"; }
  const ManipulatorParams& params() const { return p_; }

  void eval_f_into(const Vec& x, const Vec& u, Vec& dx) const override {
    const Eigen::Vector2d q = x.head<2>();
    const Eigen::Vector2d qdot = x.tail<2>();
    const auto mats = manipulator_matrices(p_, q, qdot);
    const Eigen::Vector2d rhs = u.head<2>() - mats.coriolis * qdot - mats.gravity;
    dx.resize(4);
    dx.head<2>() = qdot;
    dx.tail<2>() = mats.mass.llt().solve(rhs);
  }

  // tau = M (h + (beta + alpha) e2) with e1 = q_des - q, e2 = e1dot + alpha e1,
  // h = qddot_des - alpha^2 e1 + M^{-1}(C qdot_des + G + C alpha e1 - C e2).
  void kappa_raw_into(const Vec& x, double t, Vec& u) const override {
    const Eigen::Vector2d q = x.head<2>();
    const Eigen::Vector2d qdot = x.tail<2>();
    const auto des = desired_trajectory(p_, t);
    const auto mats = manipulator_matrices(p_, q, qdot);
    const Eigen::Vector2d e1 = des.q - q;
    const Eigen::Vector2d e2 = (des.qdot - qdot) + p_.alpha.cwiseProduct(e1);
    const Eigen::Vector2d ce = mats.coriolis * (des.qdot + p_.alpha.cwiseProduct(e1) - e2) + mats.gravity;
    const Eigen::Vector2d h =
        des.qddot - p_.alpha.cwiseProduct(p_.alpha).cwiseProduct(e1) + mats.mass.llt().solve(ce);
    u.resize(2);
    u = mats.mass * (h + (p_.beta + p_.alpha).cwiseProduct(e2));
  }

  Vec desired_state(double t) const override {
    const auto d = desired_trajectory(p_, t);
    Vec x(4);
    x << d.q, d.qdot;
    return x;
  }

  Vec nominal_state() const override {
    Vec x = Vec::Zero(4);
    x.head<2>() = p_.offset();
    return x;
  }

  /// Joint angles perturbed, velocities start at rest.
  Vec sample_initial_state(Rng& rng, double lo, double hi) const override {
    Vec x = nominal_state();
    for (int i = 0; i < 2; ++i) x[i] += rng.uniform(lo, hi);
    return x;
  }

  Box joint_box() const { return {p_.joint_min, p_.joint_max}; }

  /// Joint-limit box extended with a symmetric velocity range.
  Box state_box(double max_speed) const {
    Vec lo(4), hi(4);
    lo << p_.joint_min, Eigen::Vector2d::Constant(-max_speed);
    hi << p_.joint_max, Eigen::Vector2d::Constant(max_speed);
    return {lo, hi};
  }

  Box torque_box() const { return {p_.torque_min, p_.torque_max}; }

  /// States near the nominal configuration and torques near its static
  /// gravity load. On the full state and torque boxes D C_f is large enough
  /// that successive approximation overflows before it contracts; here it
  /// converges for D up to 1 at dt down to 0.01.
  std::pair<Box, Box> operating_boxes(double angle = 0.1, double speed = 0.3, double torque = 0.5) const {
    Vec lo = nominal_state(), hi = nominal_state();
    lo.head<2>().array() -= angle;
    hi.head<2>().array() += angle;
    lo.tail<2>().setConstant(-speed);
    hi.tail<2>().setConstant(speed);
    const Eigen::Vector2d g = manipulator_matrices(p_, p_.offset(), Eigen::Vector2d::Zero()).gravity;
    return {Box{lo, hi}, Box{g.array() - torque, g.array() + torque}};
  }

  bool within_joint_limits(const Vec& x) const {
    return ((x.head<2>().array() >= p_.joint_min.array()) && (x.head<2>().array() <= p_.joint_max.array())).all();
  }

 private:
  ManipulatorParams p_;
  SystemSpec spec_;
};

// ---------------------------------------------------------------------------
// Lipschitz estimation

/// Sampled lower estimate of C_f over box_x x box_u in the norm of the
/// Lipschitz condition |f1 - f2| <= C_f (|x1 - x2| + |u1 - u2|).
///
/// Pairs are drawn sequentially from one seeded stream, so extending
/// `samples` for a fixed seed can only raise the estimate.
inline double estimate_lipschitz(const System& sys, const Box& box_x, const Box& box_u, std::size_t samples,
                                 std::uint64_t seed) {
  require_dim(box_x.dim(), sys.n(), "estimate_lipschitz state box");
  require_dim(box_u.dim(), sys.m(), "estimate_lipschitz control box");
  box_x.validate("estimate_lipschitz state box");
  box_u.validate("estimate_lipschitz control box");
  PREDFB_REQUIRE(samples >= 2, InvalidArgument, "estimate_lipschitz: need at least 2 samples");
  PREDFB_REQUIRE(box_x.has_volume() && box_u.has_volume(), InvalidArgument,
                 "estimate_lipschitz: degenerate (zero-volume) box");

  Rng rng(seed);
  Vec f1(sys.n()), f2(sys.n());
  double best = 0.0;
  for (std::size_t i = 0; i < samples; ++i) {
    const Vec x1 = rng.uniform(box_x), x2 = rng.uniform(box_x);
    const Vec u1 = rng.uniform(box_u), u2 = rng.uniform(box_u);
    const double denom = (x1 - x2).norm() + (u1 - u2).norm();
    if (denom <= 0.0) continue;
    sys.eval_f_into(x1, u1, f1);
    sys.eval_f_into(x2, u2, f2);
    best = std::max(best, (f1 - f2).norm() / denom);
  }
  return best;
}

}  // namespace predfb
