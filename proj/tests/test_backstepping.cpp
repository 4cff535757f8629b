#include <predfb/backstepping.hpp>

#include <gtest/gtest.h>

#include <sstream>

#include "oracles.hpp"

using namespace predfb;

namespace {

Vec v1(double a) { return Vec::Constant(1, a); }

LoopConfig scalar_loop(double x0, double duration) {
  LoopConfig cfg;
  cfg.x0 = v1(x0);
  cfg.duration = duration;
  return cfg;
}

RowMat random_history(int pts, const Box& box, Rng& rng) {
  RowMat v(pts, box.dim());
  for (int k = 0; k < pts; ++k) v.row(k) = rng.uniform(box).transpose();
  return v;
}

}  // namespace

TEST(SolveP, MatchesSuccessivePredictor) {
  const TwoLinkManipulator arm;
  Rng rng(1);
  for (int i = 0; i < 10; ++i) {
    const auto [bx, bu] = arm.operating_boxes();
    const Vec x = rng.uniform(bx);
    const ControlHistory hist(0.1, random_history(6, bu, rng));
    SolverConfig cfg;
    cfg.tol = 1e-12;
    const auto succ = predict_successive(arm, x, hist, cfg);
    ASSERT_TRUE(succ.converged);
    const RowMat p = solve_p(arm, x, transport_from_history(hist), 1);
    EXPECT_LT(sup_row_norm(p - succ.solution.values), 10 * 1e-7);
  }
}

TEST(SolveP, LinearPlantMatchesClosedForm) {
  const auto plant = LinearPlant::scalar(1.0, 1.0, 2.0);
  Rng rng(2);
  Vec u(6);
  for (int k = 0; k < 6; ++k) u[k] = rng.uniform(-1, 1);
  RowMat uv(6, 1);
  uv.col(0) = u;
  const RowMat p = solve_p(plant, v1(0.3), TransportState{0.1, 0.0, uv}, 64);
  EXPECT_LT((p.col(0) - oracle::scalar_predictor(1.0, 1.0, 0.3, u, 0.1)).cwiseAbs().maxCoeff(), 1e-6);
}

TEST(Transform, InverseUndoesForward) {
  const TwoLinkManipulator arm;
  Rng rng(3);
  for (int i = 0; i < 10; ++i) {
    const auto [bx, bu] = arm.operating_boxes();
    const Vec x = rng.uniform(bx);
    const TransportState u{0.1, 0.7 * i, random_history(6, bu, rng)};
    const RowMat p = solve_p(arm, x, u, 1);
    const TargetState w = forward_transform(arm, u, p);
    const RowMat pi = solve_pi(arm, x, w, 1);
    EXPECT_LT(sup_row_norm(pi - p), 1e-9);
    const TransportState back = inverse_transform(arm, w, pi);
    EXPECT_LT(sup_row_norm(back.values - u.values), 1e-7);
  }
}

TEST(Transform, ExactFeedbackHistoryGivesZeroTarget) {
  // If every history node equals kappa of its own prediction, w vanishes.
  const auto plant = LinearPlant::scalar(0.0, 1.0, 1.0);
  // xdot = u, kappa = -x: u(x) = -p(x) solves p' = -p, so p = x e^{-xi}.
  RowMat uv(51, 1);
  for (int k = 0; k <= 50; ++k) uv(k, 0) = -0.8 * std::exp(-0.01 * k);
  const TransportState u{0.01, 0.0, uv};
  const RowMat p = solve_p(plant, v1(0.8), u, 4);
  const TargetState w = forward_transform(plant, u, p);
  EXPECT_LT(w.values.cwiseAbs().maxCoeff(), 1e-4);
}

TEST(WeightedNorm, Examples) {
  GridFunction g{0.5, 0.0, RowMat::Zero(3, 1)};
  g.values << 1.0, 0.0, 2.0;
  EXPECT_EQ(weighted_sup_norm(g, 0.0), 2.0);
  EXPECT_NEAR(weighted_sup_norm(g, 1.0), 2.0 * std::exp(1.0), 1e-14);
  EXPECT_THROW(weighted_sup_norm(g, -1.0), InvalidArgument);
  double prev = 0.0;
  for (double c = 0.0; c < 5.0; c += 0.5) {
    EXPECT_GE(weighted_sup_norm(g, c), prev);
    prev = weighted_sup_norm(g, c);
  }
}

TEST(TargetSystem, ExactPredictorBoundaryIsSmall) {
  const auto plant = LinearPlant::scalar(1.0, 1.0, 2.0);
  const auto rec = run_closed_loop(plant, ExactOraclePredictor(8), scalar_loop(0.4, 5.0));
  VerifyConfig cfg;
  cfg.slack = 1e-4;
  const auto rep = check_target_system(rec, plant, cfg);
  EXPECT_LT(rep.max_boundary, 1e-4);
  EXPECT_LT(rep.max_delta, 1e-12);
  EXPECT_EQ(rep.violations, 0u);
  // w_t = w_x up to the gap between the RK4 plant step and the x-march.
  EXPECT_LT(rep.max_transport_residual, 1e-3 * rep.max_transport_scale);
}

TEST(TargetSystem, PerturbedBoundaryTracksControlError) {
  const auto plant = LinearPlant::scalar(1.0, 1.0, 2.0);
  const auto exact = std::make_shared<ExactOraclePredictor>(8);
  const PerturbedPredictor noisy(exact, 0.05, 7);
  const auto rec = run_closed_loop(plant, noisy, scalar_loop(0.4, 5.0));
  VerifyConfig cfg;
  cfg.slack = 1e-4;
  const auto rep = check_target_system(rec, plant, cfg);
  EXPECT_GT(rep.max_boundary, 1e-2);
  EXPECT_GT(rep.max_delta, 1e-2);
  EXPECT_EQ(rep.violations, 0u);
  EXPECT_LT(rep.max_residual, 1e-4);
}

TEST(IssBound, HoldsOnExactAndPerturbedRuns) {
  const TwoLinkManipulator arm;
  LoopConfig loop;
  loop.x0 = arm.nominal_state();
  loop.x0[0] += 0.03;
  loop.duration = 4.0;
  VerifyConfig cfg;
  const auto cal = calibrate_slack(arm, loop, {0.5, 1.0, 2.0}, cfg);
  cfg.slack = cal.slack;
  EXPECT_GE(cal.slack, 1e-9);
  const auto exact = std::make_shared<ExactOraclePredictor>(8);
  for (double eps : {0.0, 0.05}) {
    const auto rec = run_closed_loop(arm, PerturbedPredictor(exact, eps, 3), loop);
    const auto series = reconstruct_target(rec, arm, cfg);
    for (double c : {0.5, 1.0, 2.0}) {
      const auto rep = check_iss_bound(rec, arm, c, cfg, &series);
      EXPECT_EQ(rep.violations, 0u) << "eps " << eps << " c " << c << " excess " << rep.max_excess;
      EXPECT_EQ(rep.series.size(), static_cast<std::size_t>(rec.rows()));
    }
  }
}

TEST(IssBound, TamperedRecordIsCaught) {
  const auto plant = LinearPlant::scalar(1.0, 1.0, 2.0);
  auto rec = run_closed_loop(plant, ExactOraclePredictor(8), scalar_loop(0.4, 5.0));
  // A single input sample that disagrees with the feedback law inflates w by
  // far more than it moves the true predictor.
  rec.inputs(40, 0) += 5.0;
  VerifyConfig cfg;
  cfg.slack = 1e-6;
  const auto rep = check_iss_bound(rec, plant, 1.0, cfg);
  EXPECT_GT(rep.violations, 0u);
  EXPECT_GT(rep.max_excess, 1.0);
}

TEST(IssBound, RejectsNonPositiveRate) {
  const auto plant = LinearPlant::scalar(1.0, 1.0, 2.0);
  const auto rec = run_closed_loop(plant, ExactOraclePredictor(8), scalar_loop(0.4, 1.0));
  EXPECT_THROW(check_iss_bound(rec, plant, 0.0, VerifyConfig{}), InvalidArgument);
}

TEST(IssBound, CsvLayout) {
  const auto plant = LinearPlant::scalar(1.0, 1.0, 2.0);
  const auto rec = run_closed_loop(plant, ExactOraclePredictor(8), scalar_loop(0.4, 1.0));
  const auto rep = check_iss_bound(rec, plant, 1.0, VerifyConfig{});
  std::ostringstream os;
  write_iss_csv(rep, os, "h", 5);
  EXPECT_NE(os.str().find("t,lhs_w_sup,rhs_bound,margin\n"), std::string::npos);
  EXPECT_NE(os.str().find("seed=5"), std::string::npos);
}
