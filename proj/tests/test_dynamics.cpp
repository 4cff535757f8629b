#include <predfb/closed_loop.hpp>

#include <gtest/gtest.h>

#include "oracles.hpp"

using namespace predfb;

namespace {

Vec v1(double a) { return Vec::Constant(1, a); }

}  // namespace

TEST(EvalF, LinearPlantExamples) {
  const auto zero = LinearPlant::scalar(0.0, 0.0, 0.0);
  EXPECT_EQ(zero.eval_f(v1(1.0), v1(7.0))[0], 0.0);
  const auto unit = LinearPlant::scalar(1.0, 1.0, 0.0);
  EXPECT_EQ(unit.eval_f(v1(2.0), v1(3.0))[0], 5.0);
}

TEST(EvalF, RejectsBadInput) {
  const auto p = LinearPlant::scalar(1.0, 1.0, 2.0);
  EXPECT_THROW(p.eval_f(Vec::Zero(2), v1(0.0)), DimensionMismatch);
  EXPECT_THROW(p.eval_f(v1(0.0), Vec::Zero(3)), DimensionMismatch);
  EXPECT_THROW(p.eval_f(v1(std::nan("")), v1(0.0)), NonFinite);
  EXPECT_THROW(p.eval_f(v1(0.0), v1(INFINITY)), NonFinite);
}

TEST(EvalF, ManipulatorGravityCompensationAtRest) {
  const TwoLinkManipulator arm;
  const Eigen::Vector2d q(0.0, 0.0);
  // Gravity torque from the potential-energy oracle, not from the model.
  const Eigen::Vector2d g = oracle::gravity_from_energy(arm.params(), q);
  Vec x = Vec::Zero(4);
  const Vec dx = arm.eval_f(x, Vec(g));
  EXPECT_NEAR(dx.norm(), 0.0, 1e-8);

  // Off the vertical the same holds at any configuration held at rest.
  const Eigen::Vector2d q2(0.4, -0.9);
  x.head<2>() = q2;
  EXPECT_NEAR(arm.eval_f(x, Vec(oracle::gravity_from_energy(arm.params(), q2))).norm(), 0.0, 1e-7);
}

TEST(EvalF, Deterministic) {
  const TwoLinkManipulator arm;
  Vec x(4);
  x << 0.3, -0.2, 0.5, -1.1;
  Vec u(2);
  u << 3.0, -7.0;
  const Vec a = arm.eval_f(x, u);
  const Vec b = arm.eval_f(x, u);
  EXPECT_EQ(std::memcmp(a.data(), b.data(), sizeof(double) * 4), 0);
}

TEST(ManipulatorMatrices, MassMatchesLagrangianAtZero) {
  const ManipulatorParams p;
  const auto mats = manipulator_matrices(p, Eigen::Vector2d::Zero(), Eigen::Vector2d::Zero());
  const Eigen::Matrix2d ref = oracle::mass_from_energy(p, Eigen::Vector2d::Zero());
  EXPECT_NEAR((mats.mass - ref).norm(), 0.0, 1e-12);
  // Unit links: M11 = 2/12 + 0.25 + 1.25 + 1, M12 = 1/12 + 0.25 + 0.5, M22 = 1/12 + 0.25.
  EXPECT_NEAR(mats.mass(0, 0), 1.0 / 6.0 + 2.5, 1e-12);
  EXPECT_NEAR(mats.mass(0, 1), 1.0 / 12.0 + 0.75, 1e-12);
  EXPECT_NEAR(mats.mass(1, 1), 1.0 / 12.0 + 0.25, 1e-12);
}

TEST(ManipulatorMatrices, MassMatchesLagrangianEverywhere) {
  ManipulatorParams p;
  p.link1 = {1.3, 0.9, 0.4, 0.07};
  p.link2 = {0.7, 1.1, 0.6, 0.05};
  Rng rng(3);
  for (int i = 0; i < 200; ++i) {
    const Eigen::Vector2d q(rng.uniform(-3, 3), rng.uniform(-3, 3));
    const auto mats = manipulator_matrices(p, q, Eigen::Vector2d::Zero());
    EXPECT_NEAR((mats.mass - oracle::mass_from_energy(p, q)).norm(), 0.0, 1e-12);
  }
}

TEST(ManipulatorMatrices, CoriolisVanishesAtRest) {
  const ManipulatorParams p;
  Rng rng(4);
  for (int i = 0; i < 50; ++i) {
    const Eigen::Vector2d q(rng.uniform(-3, 3), rng.uniform(-3, 3));
    const auto mats = manipulator_matrices(p, q, Eigen::Vector2d::Zero());
    EXPECT_EQ((mats.coriolis * Eigen::Vector2d::Zero()).norm(), 0.0);
    EXPECT_EQ(mats.coriolis.norm(), 0.0);
  }
}

TEST(ManipulatorMatrices, GravityMatchesPotentialGradient) {
  const ManipulatorParams p;
  const Eigen::Vector2d q(M_PI / 2, 0.0);
  const auto mats = manipulator_matrices(p, q, Eigen::Vector2d::Zero());
  const Eigen::Vector2d ref = oracle::gravity_from_energy(p, q);
  EXPECT_NEAR((mats.gravity - ref).norm(), 0.0, 1e-7);
  // Horizontal arm: G = ((m1 lc1 + m2 l1 + m2 lc2) g, m2 lc2 g).
  EXPECT_NEAR(mats.gravity[0], 2.0 * 9.81, 1e-12);
  EXPECT_NEAR(mats.gravity[1], 0.5 * 9.81, 1e-12);

  Rng rng(5);
  for (int i = 0; i < 100; ++i) {
    const Eigen::Vector2d qr(rng.uniform(-3, 3), rng.uniform(-3, 3));
    EXPECT_NEAR((manipulator_matrices(p, qr, Eigen::Vector2d::Zero()).gravity - oracle::gravity_from_energy(p, qr)).norm(),
                0.0, 1e-6);
  }
}

TEST(ManipulatorMatrices, MassSymmetricPositiveDefinite) {
  const ManipulatorParams p;
  Rng rng(6);
  for (int i = 0; i < 1000; ++i) {
    const Eigen::Vector2d q(rng.uniform(-M_PI, M_PI), rng.uniform(-M_PI, M_PI));
    const auto m = manipulator_matrices(p, q, Eigen::Vector2d::Zero()).mass;
    EXPECT_EQ(m(0, 1), m(1, 0));
    Eigen::LLT<Eigen::Matrix2d> llt(m);
    EXPECT_EQ(llt.info(), Eigen::Success);
  }
}

TEST(ManipulatorMatrices, MdotMinusTwoCIsSkew) {
  const ManipulatorParams p;
  Rng rng(7);
  const double h = 1e-6;
  for (int i = 0; i < 200; ++i) {
    const Eigen::Vector2d q(rng.uniform(-3, 3), rng.uniform(-3, 3));
    const Eigen::Vector2d qd(rng.uniform(-2, 2), rng.uniform(-2, 2));
    const Eigen::Vector2d v(rng.uniform(-1, 1), rng.uniform(-1, 1));
    const Eigen::Matrix2d mdot =
        (manipulator_matrices(p, q + h * qd, qd).mass - manipulator_matrices(p, q - h * qd, qd).mass) / (2 * h);
    const Eigen::Matrix2d c = manipulator_matrices(p, q, qd).coriolis;
    EXPECT_NEAR(v.dot((mdot - 2.0 * c) * v), 0.0, 1e-8);
  }
}

TEST(Kappa, LinearGain) {
  const auto p = LinearPlant::scalar(1.0, 1.0, 2.0);
  EXPECT_EQ(p.kappa(v1(3.0))[0], -6.0);
}

TEST(Kappa, FeedforwardOnReference) {
  const TwoLinkManipulator arm;
  for (double t : {0.0, 0.7, 2.3}) {
    const Vec x = arm.desired_state(t);
    const auto des = desired_trajectory(arm.params(), t);
    const auto mats = manipulator_matrices(arm.params(), des.q, des.qdot);
    const Eigen::Vector2d expected = mats.mass * des.qddot + mats.coriolis * des.qdot + mats.gravity;
    EXPECT_NEAR((arm.kappa(x, t) - Vec(expected)).norm(), 0.0, 1e-12);
  }
}

TEST(Kappa, SaturatesAtTorqueLimit) {
  const TwoLinkManipulator arm;
  Vec x = arm.desired_state(0.0);
  x[0] -= 3.0;  // far from the reference: large corrective torque
  x[2] -= 20.0;
  Vec raw(2);
  arm.kappa_raw_into(x, 0.0, raw);
  ASSERT_GT(raw.cwiseAbs().maxCoeff(), 50.0);
  const Vec u = arm.kappa(x, 0.0);
  EXPECT_LE(u.cwiseAbs().maxCoeff(), 50.0);
  for (int i = 0; i < 2; ++i) {
    if (std::abs(raw[i]) > 50.0) {
      EXPECT_EQ(std::abs(u[i]), 50.0);
    }
  }
}

TEST(Kappa, ImposesExponentialErrorDynamics) {
  // In the delay-free loop e2 obeys e2dot = -beta e2 while unsaturated.
  const TwoLinkManipulator arm;
  const auto& p = arm.params();
  Vec x = arm.desired_state(0.3);
  x[0] += 0.02;
  x[3] -= 0.01;
  const double t = 0.3;
  const Vec u = arm.kappa(x, t);
  const Vec dx = arm.eval_f(x, u);
  const auto des = desired_trajectory(p, t);
  const Eigen::Vector2d e1 = des.q - x.head<2>();
  const Eigen::Vector2d e1dot = des.qdot - x.tail<2>();
  const Eigen::Vector2d e2 = e1dot + p.alpha.cwiseProduct(e1);
  const Eigen::Vector2d e2dot = (des.qddot - dx.tail<2>()) + p.alpha.cwiseProduct(e1dot);
  EXPECT_NEAR((e2dot + p.beta.cwiseProduct(e2)).norm(), 0.0, 1e-10);
}

TEST(DesiredTrajectory, Examples) {
  const ManipulatorParams p;
  const auto d0 = desired_trajectory(p, 0.0);
  EXPECT_NEAR(d0.q[0], 0.0, 1e-15);
  EXPECT_NEAR(d0.q[1], -0.55, 1e-12);
  const auto dh = desired_trajectory(p, M_PI / 2);
  EXPECT_NEAR(dh.qdot.norm(), 0.0, 1e-15);
  for (double t : {-0.5, 0.0, 1.0, 4.2}) {
    const auto d = desired_trajectory(p, t);
    EXPECT_NEAR((d.qddot + (d.q - p.offset())).norm(), 0.0, 1e-15);
  }
}

TEST(EstimateLipschitz, LinearPlant) {
  const auto p = LinearPlant::scalar(1.0, 1.0, 0.0);
  const Box bx{v1(-2.0), v1(2.0)}, bu{v1(-2.0), v1(2.0)};
  const double small = estimate_lipschitz(p, bx, bu, 100, 1);
  const double large = estimate_lipschitz(p, bx, bu, 20000, 1);
  EXPECT_LE(small, 1.0 + 1e-12);
  EXPECT_LE(large, 1.0 + 1e-12);
  EXPECT_GE(large, small);
  EXPECT_GT(large, 0.99);
}

TEST(EstimateLipschitz, ConstantDynamicsGiveZero) {
  const auto p = LinearPlant::scalar(0.0, 0.0, 0.0);
  EXPECT_EQ(estimate_lipschitz(p, {v1(-1), v1(1)}, {v1(-1), v1(1)}, 1000, 2), 0.0);
}

TEST(EstimateLipschitz, MonotoneInSamplesAndErrors) {
  const TwoLinkManipulator arm;
  const Box bx = arm.state_box(3.0), bu = arm.torque_box();
  double prev = 0.0;
  for (std::size_t n : {10u, 100u, 1000u, 5000u}) {
    const double e = estimate_lipschitz(arm, bx, bu, n, 9);
    EXPECT_GE(e, prev);
    EXPECT_TRUE(std::isfinite(e));
    prev = e;
  }
  EXPECT_GT(prev, 0.0);
  EXPECT_EQ(estimate_lipschitz(arm, bx, bu, 500, 9), estimate_lipschitz(arm, bx, bu, 500, 9));
  EXPECT_THROW(estimate_lipschitz(arm, bx, bu, 1, 9), InvalidArgument);
  Box flat = bx;
  flat.hi[0] = flat.lo[0];
  EXPECT_THROW(estimate_lipschitz(arm, flat, bu, 100, 9), InvalidArgument);
}

TEST(DelayFreeLoop, TrackingErrorsDecayAfterTransient) {
  const TwoLinkManipulator arm;
  const auto& p = arm.params();
  Vec x0 = arm.nominal_state();
  x0[0] += 0.04;
  x0[1] -= 0.03;
  const double dt = 0.01;
  const RowMat traj = simulate_delay_free(arm, x0, dt, 10.0);
  std::vector<double> e1n, e2n;
  for (int k = 0; k < traj.rows(); ++k) {
    const auto d = desired_trajectory(p, k * dt);
    const Eigen::Vector2d e1 = d.q - traj.row(k).head<2>().transpose();
    const Eigen::Vector2d e1d = d.qdot - traj.row(k).tail<2>().transpose();
    e1n.push_back(e1.norm());
    e2n.push_back((e1d + p.alpha.cwiseProduct(e1)).norm());
  }
  // e2 decays monotonically from the start; e1 after a transient of a few
  // time constants.
  for (std::size_t k = 1; k < e2n.size(); ++k) EXPECT_LE(e2n[k], e2n[k - 1] * (1 + 1e-9) + 1e-15);
  const std::size_t transient = static_cast<std::size_t>(2.0 / dt);
  for (std::size_t k = transient + 1; k < e1n.size(); ++k) EXPECT_LE(e1n[k], e1n[k - 1] * (1 + 1e-9) + 1e-15);
  EXPECT_LT(e1n.back(), 1e-3);
}
