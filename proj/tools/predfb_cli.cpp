// predfb command-line front end.
//
// Exit codes: 0 success, 1 configuration or file error, 2 numerical
// divergence, 3 verification violations.

#include <predfb/config.hpp>

#include <CLI11.hpp>

#include <filesystem>
#include <fstream>
#include <iostream>

namespace fs = std::filesystem;
using namespace predfb;

namespace {

constexpr int kOk = 0;
constexpr int kConfigError = 1;
constexpr int kDiverged = 2;
constexpr int kViolations = 3;

class Diverged : public Error {
 public:
  using Error::Error;
};

struct Context {
  RunConfig cfg;
  std::unique_ptr<System> sys;
};

Context load(const std::string& path) {
  Context ctx;
  ctx.cfg = path.empty() ? parse_config_string("") : load_config(path);
  ctx.sys = make_system(ctx.cfg);
  return ctx;
}

std::ofstream open_out(const fs::path& p) {
  if (p.has_parent_path()) fs::create_directories(p.parent_path());
  std::ofstream os(p);
  if (!os) throw IoError("cannot write '" + p.string() + "'");
  return os;
}

std::string header(const Context& ctx) {
  return "# config_hash=" + ctx.cfg.hash() + " seed=" + std::to_string(ctx.cfg.master_seed()) + "\n";
}

/// Initial state of evaluation trajectory i; shared by simulate, evaluate and
/// verify so that the same index means the same run everywhere.
Vec initial_state(const Context& ctx, std::uint64_t stream, int i) {
  Rng rng(derive_seed(stream, static_cast<std::uint64_t>(i)));
  return ctx.sys->sample_initial_state(rng, ctx.cfg.loop.ic_lo, ctx.cfg.loop.ic_hi);
}

std::uint64_t eval_stream(const Context& ctx) { return derive_seed(ctx.cfg.master_seed(), 5); }

std::shared_ptr<const NnoModel> require_model(const std::string& path) {
  if (path.empty()) throw IoError("the neural predictor needs --model <file>");
  if (!fs::exists(path)) throw IoError("model file '" + path + "' does not exist");
  return std::make_shared<const NnoModel>(load_model(path));
}

PredictorPtr make_predictor(const Context& ctx, const std::string& kind, const std::string& model_path,
                            double epsilon, std::uint64_t noise_seed) {
  PredictorPtr base;
  if (kind == "exact")
    base = std::make_shared<ExactOraclePredictor>(ctx.cfg.loop.oracle_refine);
  else if (kind == "successive")
    base = std::make_shared<SuccessivePredictor>(make_solver_config(ctx.cfg));
  else if (kind == "neural")
    base = std::make_shared<NeuralPredictor>(require_model(model_path));
  else
    throw ConfigError("unknown predictor '" + kind + "' (exact, successive, neural)");
  if (epsilon > 0.0) return std::make_shared<PerturbedPredictor>(base, epsilon, noise_seed);
  return base;
}

bool within_limits(const System& sys, const TrajectoryRecord& rec) {
  const auto* arm = dynamic_cast<const TwoLinkManipulator*>(&sys);
  if (!arm) return true;
  for (int k = 0; k < rec.rows(); ++k)
    if (!arm->within_joint_limits(rec.states.row(k).transpose())) return false;
  return true;
}

// ---------------------------------------------------------------------------

struct SimulateArgs {
  std::string predictor = "successive";
  std::string model;
  double epsilon = 0.0;
  int trajectory = 0;
  std::string out = "out";
};

int cmd_simulate(const Context& ctx, const SimulateArgs& a) {
  const auto pred = make_predictor(ctx, a.predictor, a.model, a.epsilon, derive_seed(ctx.cfg.master_seed(), 6));
  const auto lc = make_loop_config(ctx.cfg, initial_state(ctx, eval_stream(ctx), a.trajectory));
  const auto rec = run_closed_loop(*ctx.sys, *pred, lc);
  const fs::path dir(a.out);
  {
    auto os = open_out(dir / "trajectory.csv");
    write_record_csv(rec, os);
  }
  const auto mt = compute_metrics(rec);
  auto os = open_out(dir / "metrics.txt");
  os.precision(17);
  os << header(ctx) << "system=" << ctx.sys->id() << "\npredictor=" << pred->kind() << "\ntrajectory=" << a.trajectory
     << "\ndiverged=" << (rec.diverged ? 1 : 0) << "\nwithin_limits=" << (within_limits(*ctx.sys, rec) ? 1 : 0)
     << "\nsummed_tracking_l2=" << mt.summed_tracking_l2 << "\nmean_prediction_l2=" << mt.mean_prediction_l2
     << "\nsummed_prediction_l2=" << mt.summed_prediction_l2 << "\nmax_state_norm=" << mt.max_state_norm
     << "\nasymptotic_residual=" << mt.asymptotic_residual << "\nplateau=" << mt.plateau << "\n";
  std::cout << "wrote " << (dir / "trajectory.csv").string() << " and metrics.txt\n";
  if (rec.diverged) throw Diverged("closed loop diverged at t=" + std::to_string(rec.times.back()));
  return kOk;
}

// ---------------------------------------------------------------------------

struct DataArgs {
  std::string out = "dataset.bin";
  std::string csv;
};

int cmd_generate_data(const Context& ctx, const DataArgs& a) {
  const auto ds = generate_dataset(make_dataset_spec(ctx.cfg), *ctx.sys, ctx.cfg.hash());
  if (fs::path(a.out).has_parent_path()) fs::create_directories(fs::path(a.out).parent_path());
  save_dataset(ds, a.out);
  if (!a.csv.empty()) {
    auto os = open_out(a.csv);
    write_dataset_csv(ds, os);
  }
  const auto audit = audit_dataset(ds, *ctx.sys, 0.05, derive_seed(ctx.cfg.dataset_seed(), 7));
  std::cout << "samples=" << ds.samples.size() << " train=" << ds.train_idx.size() << " test=" << ds.test_idx.size()
            << " audit_max_residual=" << audit.max_residual << " -> " << a.out << "\n";
  if (!audit.pass) throw Error("dataset audit failed: residual " + std::to_string(audit.max_residual));
  return kOk;
}

// ---------------------------------------------------------------------------

struct TrainArgs {
  std::string data = "dataset.bin";
  std::string out = "model.nno";
  std::string history;
};

void write_model_meta(const Context& ctx, const TrainResult& r, const std::string& model_path) {
  auto os = open_out(model_path + ".meta");
  os.precision(17);
  os << header(ctx) << "train_seed=" << ctx.cfg.train_seed() << "\nbest_epoch=" << r.best_epoch
     << "\nbest_test_rel_l2=" << r.best_error << "\nparameters=" << r.model.parameter_count()
     << "\ndiverged=" << (r.diverged ? 1 : 0) << "\n";
}

int cmd_train(const Context& ctx, const TrainArgs& a) {
  if (!fs::exists(a.data)) throw IoError("dataset file '" + a.data + "' does not exist");
  const auto ds = load_dataset(a.data);
  const auto r = train_nno(ds, make_train_config(ctx.cfg), make_nno_config(ctx.cfg, *ctx.sys));
  if (fs::path(a.out).has_parent_path()) fs::create_directories(fs::path(a.out).parent_path());
  save_model(r.model, a.out);
  write_model_meta(ctx, r, a.out);
  const std::string hist = a.history.empty() ? a.out + ".history.csv" : a.history;
  {
    auto os = open_out(hist);
    write_history_csv(r, os, ctx.cfg.hash(), ctx.cfg.train_seed());
  }
  std::cout << "best_test_rel_l2=" << r.best_error << " epoch=" << r.best_epoch
            << " parameters=" << r.model.parameter_count() << " -> " << a.out << "\n";
  if (r.diverged) throw Diverged("training loss became non-finite");
  return kOk;
}

// ---------------------------------------------------------------------------

struct EvaluateArgs {
  std::string model;
  std::string data;
  std::string out = "evaluate.csv";
};

int cmd_evaluate(const Context& ctx, const EvaluateArgs& a) {
  const auto model = require_model(a.model);
  double train_err = std::numeric_limits<double>::quiet_NaN();
  double test_err = train_err;
  if (!a.data.empty()) {
    if (!fs::exists(a.data)) throw IoError("dataset file '" + a.data + "' does not exist");
    const auto ds = load_dataset(a.data);
    train_err = evaluate_relative_l2(*model, ds, ds.train_idx);
    if (!ds.test_idx.empty()) test_err = evaluate_relative_l2(*model, ds, ds.test_idx);
  }
  const NeuralPredictor pred(model);
  const ExactOraclePredictor reference(ctx.cfg.loop.oracle_refine);
  auto os = open_out(a.out);
  os << header(ctx);
  os << "row,train_rel_l2,test_rel_l2,tracking_l2,prediction_l2,ground_truth_error,plateau,diverged,within_limits,"
        "parameters\n";
  os.precision(17);
  auto opt = [&](double v) {
    if (!std::isnan(v)) os << v;
  };
  double sum_track = 0.0, sum_pred = 0.0, sum_truth = 0.0, worst_plateau = 0.0;
  int diverged = 0, outside = 0;
  const int runs = ctx.cfg.loop.trajectories;
  for (int i = 0; i < runs; ++i) {
    const auto rec = run_closed_loop(*ctx.sys, pred, make_loop_config(ctx.cfg, initial_state(ctx, eval_stream(ctx), i)));
    const auto mt = compute_metrics(rec, ctx.sys.get(), &reference);
    const bool inside = within_limits(*ctx.sys, rec);
    diverged += rec.diverged;
    outside += !inside;
    sum_track += mt.summed_tracking_l2;
    sum_pred += mt.summed_prediction_l2;
    sum_truth += mt.mean_ground_truth_error;
    worst_plateau = std::max(worst_plateau, mt.plateau);
    os << i << ",,," << mt.summed_tracking_l2 << ',' << mt.summed_prediction_l2 << ',' << mt.mean_ground_truth_error
       << ',' << mt.plateau << ',' << rec.diverged << ',' << inside << ",\n";
  }
  os << "summary,";
  opt(train_err);
  os << ',';
  opt(test_err);
  os << ',' << sum_track / runs << ',' << sum_pred / runs << ',' << sum_truth / runs << ',' << worst_plateau << ','
     << diverged << ',' << (runs - outside) << ',' << model->parameter_count() << '\n';
  std::cout << "runs=" << runs << " diverged=" << diverged << " mean_tracking_l2=" << sum_track / runs
            << " worst_plateau=" << worst_plateau << " -> " << a.out << "\n";
  if (diverged) throw Diverged(std::to_string(diverged) + " of " + std::to_string(runs) + " runs diverged");
  return kOk;
}

// ---------------------------------------------------------------------------

struct BenchArgs {
  std::string out = "bench.csv";
  std::string model;
};

int cmd_bench(const Context& ctx, const BenchArgs& a) {
  const auto [bx, bu] = sampling_boxes(ctx.cfg, *ctx.sys);
  ModelProvider provider;
  if (!a.model.empty()) {
    const auto model = require_model(a.model);
    provider = [model](int pts) -> std::optional<NnoModel> {
      if (pts == model->cfg.grid_points) return *model;
      return std::nullopt;
    };
  }
  auto rep = run_bench(make_bench_spec(ctx.cfg), *ctx.sys, bx, bu, provider);
  rep.config_hash = ctx.cfg.hash();
  auto os = open_out(a.out);
  report_to_csv(rep, os);
  for (const auto& r : rep.rows)
    std::cout << "D=" << r.delay << " dt=" << r.dt << " N+1=" << r.grid_points << " " << to_string(r.method)
              << " median_ms=" << r.median_ms << "\n";
  return kOk;
}

// ---------------------------------------------------------------------------

struct VerifyArgs {
  std::string predictor = "exact";
  std::string model;
  double epsilon = 0.0;
  std::string out = "verify";
};

int cmd_verify(const Context& ctx, const VerifyArgs& a) {
  const auto& v = ctx.cfg.verify;
  VerifyConfig vc;
  vc.substeps = v.substeps;
  vc.oracle_refine = v.oracle_refine;
  const std::uint64_t stream = ctx.cfg.verify_seed();
  const auto cal =
      calibrate_slack(*ctx.sys, make_loop_config(ctx.cfg, initial_state(ctx, stream, 0)), v.c_values, vc,
                      v.slack_factor, v.slack_floor);
  vc.slack = cal.slack;

  const fs::path dir(a.out);
  std::size_t target_violations = 0, iss_violations = 0;
  auto summary = open_out(dir / "summary.txt");
  summary.precision(17);
  summary << header(ctx) << "predictor=" << a.predictor << "\nepsilon=" << a.epsilon << "\nslack=" << cal.slack
          << "\nslack_source=" << cal.description << "\n";
  for (int s = 0; s < v.seeds; ++s) {
    const auto pred = make_predictor(ctx, a.predictor, a.model, a.epsilon, derive_seed(stream, 1000 + s));
    const auto rec = run_closed_loop(*ctx.sys, *pred, make_loop_config(ctx.cfg, initial_state(ctx, stream, s)));
    if (rec.diverged) throw Diverged("verification run " + std::to_string(s) + " diverged");
    const auto series = reconstruct_target(rec, *ctx.sys, vc);
    const auto tgt = check_target_system(rec, *ctx.sys, vc, &series);
    target_violations += tgt.violations;
    summary << "run=" << s << " boundary_residual=" << tgt.max_residual << " target_violations=" << tgt.violations;
    for (double c : v.c_values) {
      const auto iss = check_iss_bound(rec, *ctx.sys, c, vc, &series);
      iss_violations += iss.violations;
      summary << " c=" << c << ":" << iss.violations;
      std::ostringstream name;
      name << "iss_run" << s << "_c" << c << ".csv";
      auto os = open_out(dir / name.str());
      write_iss_csv(iss, os, ctx.cfg.hash(), ctx.cfg.master_seed());
    }
    summary << "\n";
  }
  summary << "target_violations=" << target_violations << "\niss_violations=" << iss_violations << "\n";
  std::cout << "slack=" << cal.slack << " target_violations=" << target_violations
            << " iss_violations=" << iss_violations << " -> " << dir.string() << "\n";
  return target_violations + iss_violations == 0 ? kOk : kViolations;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"Predictor feedback for delayed nonlinear systems: simulation, learning, verification"};
  app.require_subcommand(1);
  app.fallthrough();
  std::string config;
  app.add_option("-c,--config", config, "run configuration file (defaults when omitted)");

  SimulateArgs sim;
  auto* simulate = app.add_subcommand("simulate", "run one closed-loop trajectory");
  simulate->add_option("--predictor", sim.predictor, "exact | successive | neural");
  simulate->add_option("--model", sim.model, "NNO checkpoint for --predictor=neural");
  simulate->add_option("--epsilon", sim.epsilon, "uniform perturbation half-width added to P(t)");
  simulate->add_option("--trajectory", sim.trajectory, "initial-condition index");
  simulate->add_option("--out", sim.out, "output directory");

  DataArgs data;
  auto* generate = app.add_subcommand("generate-data", "build a supervised predictor dataset");
  generate->add_option("--out", data.out, "binary dataset file");
  generate->add_option("--csv", data.csv, "optional CSV export");

  TrainArgs train;
  auto* train_cmd = app.add_subcommand("train", "train an NNO predictor");
  train_cmd->add_option("--data", train.data, "dataset file");
  train_cmd->add_option("--out", train.out, "checkpoint file");
  train_cmd->add_option("--history", train.history, "loss history CSV (default <out>.history.csv)");

  EvaluateArgs eval;
  auto* evaluate = app.add_subcommand("evaluate", "closed-loop and held-out evaluation of a trained NNO");
  evaluate->add_option("--model", eval.model, "checkpoint file")->required();
  evaluate->add_option("--data", eval.data, "dataset for train/test relative L2");
  evaluate->add_option("--out", eval.out, "CSV output");

  BenchArgs bench;
  auto* bench_cmd = app.add_subcommand("bench", "time numerical and neural predictors");
  bench_cmd->add_option("--out", bench.out, "CSV output");
  bench_cmd->add_option("--model", bench.model, "checkpoint used for the matching grid size");

  VerifyArgs ver;
  auto* verify = app.add_subcommand("verify", "check the target system and the ISS estimate");
  verify->add_option("--predictor", ver.predictor, "exact | successive | neural");
  verify->add_option("--model", ver.model, "NNO checkpoint for --predictor=neural");
  verify->add_option("--epsilon", ver.epsilon, "uniform perturbation half-width added to P(t)");
  verify->add_option("--out", ver.out, "output directory");

  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& e) {
    const int code = app.exit(e);
    return code == 0 ? kOk : kConfigError;
  }

  try {
    const auto ctx = load(config);
    if (*simulate) return cmd_simulate(ctx, sim);
    if (*generate) return cmd_generate_data(ctx, data);
    if (*train_cmd) return cmd_train(ctx, train);
    if (*evaluate) return cmd_evaluate(ctx, eval);
    if (*bench_cmd) return cmd_bench(ctx, bench);
    if (*verify) return cmd_verify(ctx, ver);
  } catch (const Diverged& e) {
    std::cerr << "error: " << e.what() << "\n";
    return kDiverged;
  } catch (const NonFinite& e) {
    std::cerr << "error: " << e.what() << "\n";
    return kDiverged;
  } catch (const DivergedLoss& e) {
    std::cerr << "error: " << e.what() << "\n";
    return kDiverged;
  } catch (const std::exception& e) {
    std::cerr << "error: " << e.what() << "\n";
    return kConfigError;
  }
  return kConfigError;
}
