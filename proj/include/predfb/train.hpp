#pragma once

// Mini-batch training of the NNO predictor on a Dataset with the mean
// relative L2 loss ||P_hat - P|| / ||P||.

#include <predfb/dataset.hpp>

#include <optional>

namespace predfb {

enum class Optimizer { adamw, sgd };

inline Optimizer parse_optimizer(const std::string& s) {
  if (s == "adamw") return Optimizer::adamw;
  if (s == "sgd") return Optimizer::sgd;
  throw InvalidArgument("unknown optimizer '" + s + "'");
}

inline std::string to_string(Optimizer o) { return o == Optimizer::adamw ? "adamw" : "sgd"; }

struct TrainConfig {
  int epochs = 300;
  int batch_size = 512;
  double learning_rate = 0.005;
  double weight_decay = 0.0;
  double lr_decay = 0.99;  ///< per-epoch multiplicative factor
  std::uint64_t seed = 0;
  Optimizer optimizer = Optimizer::adamw;
  double beta1 = 0.9;
  double beta2 = 0.999;
  double adam_eps = 1e-8;

  void validate() const {
    PREDFB_REQUIRE(epochs >= 0 && batch_size >= 1, InvalidArgument, "TrainConfig: epochs >= 0, batch >= 1");
    PREDFB_REQUIRE(learning_rate >= 0.0, InvalidArgument, "TrainConfig: learning rate must be >= 0");
    PREDFB_REQUIRE(weight_decay >= 0.0, InvalidArgument, "TrainConfig: weight decay must be >= 0");
    PREDFB_REQUIRE(lr_decay > 0.0 && lr_decay <= 1.0, InvalidArgument, "TrainConfig: lr decay must be in (0, 1]");
    PREDFB_REQUIRE(beta1 >= 0 && beta1 < 1 && beta2 >= 0 && beta2 < 1, InvalidArgument, "TrainConfig: bad betas");
  }
};

struct EpochStats {
  int epoch = 0;
  double learning_rate = 0.0;
  double train_error = 0.0;  ///< mean per-batch loss before each update
  double test_error = 0.0;   ///< NaN when the test split is empty
};

struct TrainResult {
  NnoModel model;  ///< best model by test error (train error without a test split)
  std::vector<EpochStats> history;
  int best_epoch = -1;
  double best_error = std::numeric_limits<double>::infinity();
  bool diverged = false;
};

class EmptyDataset : public Error {
 public:
  using Error::Error;
};

class DivergedLoss : public Error {
 public:
  using Error::Error;
};

/// Encodings and targets for a set of samples, stacked grid-major.
struct TrainingTensors {
  int grid = 0;
  RowMat input;    ///< samples * grid rows
  RowMat target;   ///< physical P, samples * grid rows
  RowMat anchor;   ///< x per sample, samples rows
  Vec target_norm; ///< ||P||_F per sample

  std::size_t samples() const { return static_cast<std::size_t>(anchor.rows()); }
};

inline TrainingTensors make_tensors(const Dataset& ds, const std::vector<std::size_t>& idx) {
  TrainingTensors t;
  t.grid = ds.points;
  const auto count = static_cast<Eigen::Index>(idx.size());
  t.input.resize(count * t.grid, ds.n + ds.m + 1);
  t.target.resize(count * t.grid, ds.n);
  t.anchor.resize(count, ds.n);
  t.target_norm.resize(count);
  for (Eigen::Index s = 0; s < count; ++s) {
    const auto& smp = ds.samples[idx[static_cast<std::size_t>(s)]];
    t.input.middleRows(s * t.grid, t.grid) = encode_input(smp.x, ControlHistory(ds.spec.dt, smp.hist));
    t.target.middleRows(s * t.grid, t.grid) = smp.target;
    t.anchor.row(s) = smp.x.transpose();
    t.target_norm[s] = smp.target.norm();
  }
  return t;
}

inline constexpr double kNormFloor = 1e-12;

/// Per-channel mean/std over training rows; channels with std below 1e-12
/// keep std 1.
inline void fit_normalizers(NnoModel& model, const TrainingTensors& t) {
  auto stats = [](const RowMat& rows) {
    Normalizer nz;
    nz.mean = rows.colwise().mean().transpose();
    const RowMat centered = rows.rowwise() - nz.mean.transpose();
    nz.std = (centered.colwise().squaredNorm() / static_cast<double>(rows.rows())).transpose().cwiseSqrt();
    for (Eigen::Index i = 0; i < nz.std.size(); ++i)
      if (!(nz.std[i] > 1e-12)) nz.std[i] = 1.0;
    return nz;
  };
  model.input_norm = stats(t.input);
  RowMat inc(t.target.rows(), t.target.cols());
  for (std::size_t s = 0; s < t.samples(); ++s) {
    const auto r = static_cast<Eigen::Index>(s) * t.grid;
    inc.middleRows(r, t.grid) = t.target.middleRows(r, t.grid).rowwise() - t.anchor.row(static_cast<Eigen::Index>(s));
  }
  model.output_norm = stats(inc);
}

/// Workspace for batched loss/gradient evaluation.
struct BatchWorkspace {
  RowMat input, target, anchor, out, grad;
  Vec norms;
  NnoCache cache;
};

inline void gather_batch(const TrainingTensors& t, std::span<const std::size_t> rows, BatchWorkspace& ws) {
  const auto b = static_cast<Eigen::Index>(rows.size());
  ws.input.resize(b * t.grid, t.input.cols());
  ws.target.resize(b * t.grid, t.target.cols());
  ws.anchor.resize(b, t.anchor.cols());
  ws.norms.resize(b);
  for (Eigen::Index i = 0; i < b; ++i) {
    const auto s = static_cast<Eigen::Index>(rows[static_cast<std::size_t>(i)]);
    ws.input.middleRows(i * t.grid, t.grid) = t.input.middleRows(s * t.grid, t.grid);
    ws.target.middleRows(i * t.grid, t.grid) = t.target.middleRows(s * t.grid, t.grid);
    ws.anchor.row(i) = t.anchor.row(s);
    ws.norms[i] = t.target_norm[s];
  }
}

/// Per-sample relative errors of the model on the gathered batch; when
/// `grads` is given, accumulates the gradient of their mean.
inline double batch_loss(const NnoModel& model, BatchWorkspace& ws, int grid, NnoParams* grads,
                         std::vector<double>* per_sample = nullptr) {
  const Eigen::Index b = ws.anchor.rows();
  nno_forward_batch(model, ws.input, grid, ws.cache, ws.out);
  if (grads) ws.grad.resize(ws.out.rows(), ws.out.cols());
  double total = 0.0;
  for (Eigen::Index i = 0; i < b; ++i) {
    auto pred = ws.out.middleRows(i * grid, grid);
    pred.rowwise() += ws.anchor.row(i);
    pred.row(0) = ws.anchor.row(i);  // hard anchor
    const RowMat r = pred - ws.target.middleRows(i * grid, grid);
    const double rn = r.norm();
    const double pn = std::max(ws.norms[i], kNormFloor);
    const double e = rn / pn;
    total += e;
    if (per_sample) per_sample->push_back(e);
    if (grads) {
      auto g = ws.grad.middleRows(i * grid, grid);
      if (rn > 0.0)
        g = r / (rn * pn * static_cast<double>(b));
      else
        g.setZero();
      g.row(0).setZero();
    }
  }
  if (grads) {
    NnoGradients ng{std::move(*grads), RowMat()};
    nno_backward_batch(model, ws.cache, ws.grad, ng, false);
    *grads = std::move(ng.params);
  }
  return total / static_cast<double>(b);
}

/// Mean relative L2 error of `model` over all samples in `t`.
inline double evaluate_relative_l2(const NnoModel& model, const TrainingTensors& t, std::size_t chunk = 512,
                                   std::vector<double>* per_sample = nullptr) {
  if (t.samples() == 0) return std::numeric_limits<double>::quiet_NaN();
  BatchWorkspace ws;
  std::vector<std::size_t> rows;
  double sum = 0.0;
  for (std::size_t start = 0; start < t.samples(); start += chunk) {
    const std::size_t end = std::min(t.samples(), start + chunk);
    rows.resize(end - start);
    std::iota(rows.begin(), rows.end(), start);
    gather_batch(t, rows, ws);
    sum += batch_loss(model, ws, t.grid, nullptr, per_sample) * static_cast<double>(end - start);
  }
  return sum / static_cast<double>(t.samples());
}

/// Mean relative L2 error over a subset of dataset indices.
inline double evaluate_relative_l2(const NnoModel& model, const Dataset& ds, const std::vector<std::size_t>& idx) {
  return evaluate_relative_l2(model, make_tensors(ds, idx));
}

class AdamW {
 public:
  AdamW(const NnoConfig& cfg, const TrainConfig& tc) : tc_(tc), m_(NnoParams::zeros(cfg)), v_(NnoParams::zeros(cfg)) {}

  void step(NnoParams& params, const NnoParams& grads, double lr) {
    ++t_;
    const auto p = spans(params);
    const auto m = spans(m_);
    const auto v = spans(v_);
    const auto g = spans(grads);
    const double c1 = 1.0 - std::pow(tc_.beta1, t_);
    const double c2 = 1.0 - std::pow(tc_.beta2, t_);
    for (std::size_t i = 0; i < p.size(); ++i) {
      Eigen::Map<Eigen::ArrayXd> pa(p[i].data(), static_cast<Eigen::Index>(p[i].size()));
      Eigen::Map<const Eigen::ArrayXd> ga(g[i].data(), static_cast<Eigen::Index>(g[i].size()));
      if (tc_.weight_decay > 0.0) pa *= (1.0 - lr * tc_.weight_decay);
      if (tc_.optimizer == Optimizer::sgd) {
        pa -= lr * ga;
        continue;
      }
      Eigen::Map<Eigen::ArrayXd> ma(m[i].data(), static_cast<Eigen::Index>(m[i].size()));
      Eigen::Map<Eigen::ArrayXd> va(v[i].data(), static_cast<Eigen::Index>(v[i].size()));
      ma = tc_.beta1 * ma + (1.0 - tc_.beta1) * ga;
      va = tc_.beta2 * va + (1.0 - tc_.beta2) * ga.square();
      pa -= lr * (ma / c1) / ((va / c2).sqrt() + tc_.adam_eps);
    }
  }

 private:
  static std::vector<std::span<double>> spans(NnoParams& prm) {
    std::vector<std::span<double>> out;
    prm.for_each([&](auto& x) { out.emplace_back(x.data(), static_cast<std::size_t>(x.size())); });
    return out;
  }
  static std::vector<std::span<const double>> spans(const NnoParams& prm) {
    std::vector<std::span<const double>> out;
    prm.for_each([&](const auto& x) { out.emplace_back(x.data(), static_cast<std::size_t>(x.size())); });
    return out;
  }

  TrainConfig tc_;
  NnoParams m_, v_;
  int t_ = 0;
};

/// Trains from a Glorot initialization seeded by cfg.seed. Each epoch
/// shuffles the training samples with a seeded stream, steps the optimizer
/// once per mini-batch, evaluates the test split, and decays the learning
/// rate. A non-finite loss stops training; the result then carries the best
/// model so far with `diverged` set.
inline TrainResult train_nno(const Dataset& ds, const TrainConfig& cfg, NnoConfig nno_cfg) {
  cfg.validate();
  if (ds.train_idx.empty()) throw EmptyDataset("train_nno: training split is empty");
  nno_cfg.n = ds.n;
  nno_cfg.m = ds.m;
  nno_cfg.grid_points = ds.points;
  nno_cfg.validate();

  const auto train = make_tensors(ds, ds.train_idx);
  const auto test = make_tensors(ds, ds.test_idx);

  TrainResult result;
  NnoModel model = NnoModel::init(nno_cfg, derive_seed(cfg.seed, 1));
  fit_normalizers(model, train);
  result.model = model;

  AdamW opt(nno_cfg, cfg);
  Rng shuffle_rng(derive_seed(cfg.seed, 2));
  std::vector<std::size_t> order(train.samples());
  std::iota(order.begin(), order.end(), 0);
  BatchWorkspace ws;
  NnoParams grads = NnoParams::zeros(nno_cfg);
  double lr = cfg.learning_rate;

  for (int epoch = 0; epoch < cfg.epochs; ++epoch) {
    shuffle_rng.shuffle(order);
    double loss_sum = 0.0;
    std::size_t batches = 0;
    bool bad = false;
    for (std::size_t start = 0; start < order.size(); start += static_cast<std::size_t>(cfg.batch_size)) {
      const std::size_t end = std::min(order.size(), start + static_cast<std::size_t>(cfg.batch_size));
      gather_batch(train, std::span<const std::size_t>(order).subspan(start, end - start), ws);
      grads.set_zero();
      const double loss = batch_loss(model, ws, train.grid, &grads);
      if (!std::isfinite(loss) || !grads.all_finite()) {
        bad = true;
        break;
      }
      loss_sum += loss;
      ++batches;
      opt.step(model.params, grads, lr);
    }
    EpochStats st;
    st.epoch = epoch;
    st.learning_rate = lr;
    st.train_error = batches ? loss_sum / static_cast<double>(batches) : std::numeric_limits<double>::quiet_NaN();
    if (bad || !model.params.all_finite()) {
      result.diverged = true;
      st.test_error = std::numeric_limits<double>::quiet_NaN();
      result.history.push_back(st);
      break;
    }
    st.test_error = evaluate_relative_l2(model, test);
    result.history.push_back(st);
    const double score = test.samples() ? st.test_error : st.train_error;
    if (score < result.best_error) {
      result.best_error = score;
      result.best_epoch = epoch;
      result.model = model;
    }
    lr *= cfg.lr_decay;
  }
  if (result.best_epoch < 0) result.model = model;
  return result;
}

inline void write_history_csv(const TrainResult& r, std::ostream& os, const std::string& config_hash,
                              std::uint64_t seed) {
  os << "# seed=" << seed << " config_hash=" << config_hash << " best_epoch=" << r.best_epoch
     << " diverged=" << (r.diverged ? 1 : 0) << "\n";
  os << "epoch,learning_rate,train_rel_l2,test_rel_l2\n";
  os.precision(17);
  for (const auto& e : r.history) os << e.epoch << ',' << e.learning_rate << ',' << e.train_error << ',' << e.test_error << '\n';
}

}  // namespace predfb
