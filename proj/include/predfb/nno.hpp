#pragma once

// Nonlocal neural operator (NNO) predictor with an averaging kernel:
//
//   v0(y)   = R z(y) + r                                   (lift)
//   vl(y)   = tanh(W_l v_{l-1}(y) + b_l + K_l mean(v_{l-1}))  (l = 1..L)
//   out(y)  = Q v_L(y) + q                                 (projection)
//
// z is the z-scored encoding of (X, U(t - D + y), y), the grid mean is the
// trapezoid-weighted average over the grid, and `out` is the z-scored
// increment P(theta) - X. Forward and backward passes run on a batch of
// samples stacked row-wise (batch * grid rows).

#include <predfb/predictor.hpp>

#include <functional>

namespace predfb {

struct NnoConfig {
  int n = 1;            ///< state dimension
  int m = 1;            ///< control dimension
  int grid_points = 6;  ///< N + 1
  int channels = 64;    ///< d_c
  int layers = 2;       ///< L

  int input_dim() const { return n + m + 1; }

  void validate() const {
    PREDFB_REQUIRE(n >= 1 && m >= 1, InvalidArgument, "NnoConfig: n and m must be >= 1");
    PREDFB_REQUIRE(grid_points >= 2, InvalidArgument, "NnoConfig: grid_points must be >= 2");
    PREDFB_REQUIRE(channels >= 1, InvalidArgument, "NnoConfig: channels must be >= 1");
    PREDFB_REQUIRE(layers >= 1, InvalidArgument, "NnoConfig: layers must be >= 1");
  }

  bool operator==(const NnoConfig&) const = default;
};

struct NnoLayer {
  Mat w;  ///< d_c x d_c pointwise weight
  Vec b;  ///< d_c bias
  Mat k;  ///< d_c x d_c weight on the grid mean
};

/// Learnable tensors. Also used as the gradient container.
struct NnoParams {
  Mat lift_w;  ///< d_c x (n+m+1)
  Vec lift_b;
  std::vector<NnoLayer> layers;
  Mat proj_w;  ///< n x d_c
  Vec proj_b;

  static NnoParams zeros(const NnoConfig& cfg) {
    NnoParams p;
    const int dc = cfg.channels;
    p.lift_w = Mat::Zero(dc, cfg.input_dim());
    p.lift_b = Vec::Zero(dc);
    p.layers.assign(static_cast<std::size_t>(cfg.layers), NnoLayer{Mat::Zero(dc, dc), Vec::Zero(dc), Mat::Zero(dc, dc)});
    p.proj_w = Mat::Zero(cfg.n, dc);
    p.proj_b = Vec::Zero(cfg.n);
    return p;
  }

  /// Visits every tensor in checkpoint order: lift_W, lift_b, (W_l, b_l, K_l)..., proj_W, proj_b.
  template <typename Fn>
  void for_each(Fn&& fn) {
    fn(lift_w);
    fn(lift_b);
    for (auto& l : layers) {
      fn(l.w);
      fn(l.b);
      fn(l.k);
    }
    fn(proj_w);
    fn(proj_b);
  }

  template <typename Fn>
  void for_each(Fn&& fn) const {
    fn(lift_w);
    fn(lift_b);
    for (const auto& l : layers) {
      fn(l.w);
      fn(l.b);
      fn(l.k);
    }
    fn(proj_w);
    fn(proj_b);
  }

  std::size_t size() const {
    std::size_t total = 0;
    for_each([&](const auto& t) { total += static_cast<std::size_t>(t.size()); });
    return total;
  }

  void set_zero() {
    for_each([](auto& t) { t.setZero(); });
  }

  bool all_finite() const {
    bool ok = true;
    for_each([&](const auto& t) { ok = ok && t.allFinite(); });
    return ok;
  }
};

/// Per-channel z-score statistics.
struct Normalizer {
  Vec mean;
  Vec std;

  static Normalizer identity(int dim) { return {Vec::Zero(dim), Vec::Ones(dim)}; }
};

struct NnoModel {
  NnoConfig cfg;
  NnoParams params;
  Normalizer input_norm;   ///< over encoding channels (n + m + 1)
  Normalizer output_norm;  ///< over increment channels (n)

  /// Glorot-uniform weights, zero biases, identity normalization.
  static NnoModel init(const NnoConfig& cfg, std::uint64_t seed) {
    cfg.validate();
    NnoModel model;
    model.cfg = cfg;
    model.params = NnoParams::zeros(cfg);
    model.input_norm = Normalizer::identity(cfg.input_dim());
    model.output_norm = Normalizer::identity(cfg.n);
    Rng rng(seed);
    auto glorot = [&](Mat& w) {
      const double limit = std::sqrt(6.0 / static_cast<double>(w.rows() + w.cols()));
      for (Eigen::Index i = 0; i < w.rows(); ++i)
        for (Eigen::Index j = 0; j < w.cols(); ++j) w(i, j) = rng.uniform(-limit, limit);
    };
    glorot(model.params.lift_w);
    for (auto& l : model.params.layers) {
      glorot(l.w);
      glorot(l.k);
    }
    glorot(model.params.proj_w);
    return model;
  }

  std::size_t parameter_count() const { return params.size(); }

  void validate() const {
    cfg.validate();
    const int dc = cfg.channels;
    auto shape = [](const Mat& m, Eigen::Index r, Eigen::Index c, const char* what) {
      if (m.rows() != r || m.cols() != c) throw ShapeHeaderInconsistency(std::string("NnoModel: bad shape for ") + what);
    };
    auto vshape = [](const Vec& v, Eigen::Index r, const char* what) {
      if (v.size() != r) throw ShapeHeaderInconsistency(std::string("NnoModel: bad shape for ") + what);
    };
    shape(params.lift_w, dc, cfg.input_dim(), "lift_W");
    vshape(params.lift_b, dc, "lift_b");
    if (static_cast<int>(params.layers.size()) != cfg.layers)
      throw ShapeHeaderInconsistency("NnoModel: layer count mismatch");
    for (const auto& l : params.layers) {
      shape(l.w, dc, dc, "W_l");
      vshape(l.b, dc, "b_l");
      shape(l.k, dc, dc, "K_l");
    }
    shape(params.proj_w, cfg.n, dc, "proj_W");
    vshape(params.proj_b, cfg.n, "proj_b");
    vshape(input_norm.mean, cfg.input_dim(), "input mean");
    vshape(input_norm.std, cfg.input_dim(), "input std");
    vshape(output_norm.mean, cfg.n, "output mean");
    vshape(output_norm.std, cfg.n, "output std");
    if (!params.all_finite()) throw NonFinite("NnoModel: non-finite parameters");
    if (!(input_norm.std.array() > 0).all() || !(output_norm.std.array() > 0).all())
      throw InvalidArgument("NnoModel: normalization std must be positive");
  }
};

// ---------------------------------------------------------------------------
// Encoding

/// Row k = [x^T, U(t - D + k dt)^T, k / N].
inline RowMat encode_input(const Vec& x, const ControlHistory& hist) {
  require_finite(x, "encode_input state");
  const int pts = hist.points();
  const int n = static_cast<int>(x.size());
  const int m = hist.channels();
  RowMat z(pts, n + m + 1);
  for (int k = 0; k < pts; ++k) {
    z.row(k).head(n) = x.transpose();
    z.row(k).segment(n, m) = hist.values().row(k);
    z(k, n + m) = static_cast<double>(k) / (pts - 1);
  }
  return z;
}

/// Trapezoid weights summing to one over `grid` points.
inline Vec trapezoid_mean_weights(int grid) {
  Vec w = Vec::Constant(grid, 1.0 / (grid - 1));
  w[0] *= 0.5;
  w[grid - 1] *= 0.5;
  return w;
}

// ---------------------------------------------------------------------------
// Forward / backward

/// Intermediates of a batched forward pass, reusable across calls.
struct NnoCache {
  int batch = 0;
  int grid = 0;
  Vec mean_w;
  RowMat z;                  ///< normalized input
  std::vector<RowMat> v;     ///< v[0] lift output, v[l] layer l output
  std::vector<RowMat> means; ///< grid means of v[l-1], batch x d_c
  RowMat y;                  ///< normalized output
};

/// Batched forward over `input` (batch * grid rows of raw encodings).
/// Returns the physical increment field (batch * grid rows, n columns).
inline void nno_forward_batch(const NnoModel& model, const RowMat& input, int grid, NnoCache& cache,
                              RowMat& out) {
  const auto& cfg = model.cfg;
  const auto& prm = model.params;
  require_dim(input.cols(), cfg.input_dim(), "nno_forward input channels");
  PREDFB_REQUIRE(grid >= 2 && input.rows() % grid == 0, DimensionMismatch,
                 "nno_forward: rows must be a multiple of the grid size");
  const int batch = static_cast<int>(input.rows() / grid);
  const int dc = cfg.channels;
  if (cache.grid != grid) cache.mean_w = trapezoid_mean_weights(grid);
  cache.batch = batch;
  cache.grid = grid;

  cache.z = (input.rowwise() - model.input_norm.mean.transpose()).array().rowwise() /
            model.input_norm.std.transpose().array();
  cache.v.resize(static_cast<std::size_t>(cfg.layers) + 1);
  cache.means.resize(static_cast<std::size_t>(cfg.layers));

  cache.v[0].noalias() = cache.z * prm.lift_w.transpose();
  cache.v[0].rowwise() += prm.lift_b.transpose();

  RowMat mk;
  for (int l = 0; l < cfg.layers; ++l) {
    const auto& layer = prm.layers[static_cast<std::size_t>(l)];
    const RowMat& prev = cache.v[static_cast<std::size_t>(l)];
    RowMat& mean = cache.means[static_cast<std::size_t>(l)];
    mean.resize(batch, dc);
    for (int b = 0; b < batch; ++b)
      mean.row(b).noalias() = cache.mean_w.transpose() * prev.middleRows(static_cast<Eigen::Index>(b) * grid, grid);
    mk.noalias() = mean * layer.k.transpose();
    mk.rowwise() += layer.b.transpose();

    RowMat& cur = cache.v[static_cast<std::size_t>(l) + 1];
    cur.noalias() = prev * layer.w.transpose();
    for (int b = 0; b < batch; ++b)
      cur.middleRows(static_cast<Eigen::Index>(b) * grid, grid).rowwise() += mk.row(b);
    cur = cur.array().tanh();
  }

  cache.y.noalias() = cache.v.back() * prm.proj_w.transpose();
  cache.y.rowwise() += prm.proj_b.transpose();
  out = (cache.y.array().rowwise() * model.output_norm.std.transpose().array()).rowwise() +
        model.output_norm.mean.transpose().array();
}

/// Single-sample forward: physical increment field, one row per grid node.
inline RowMat nno_forward(const NnoModel& model, const RowMat& input) {
  if (!model.params.all_finite()) throw NonFinite("nno_forward: non-finite parameters");
  NnoCache cache;
  RowMat out;
  nno_forward_batch(model, input, static_cast<int>(input.rows()), cache, out);
  return out;
}

struct NnoGradients {
  NnoParams params;
  RowMat input;  ///< d loss / d raw input
};

/// Reverse-mode gradients given d loss / d(physical output) for the forward
/// pass stored in `cache`. Accumulates into `grads` (call set_zero first).
inline void nno_backward_batch(const NnoModel& model, const NnoCache& cache, const RowMat& grad_out,
                               NnoGradients& grads, bool want_input_grad = false) {
  const auto& cfg = model.cfg;
  const auto& prm = model.params;
  const int grid = cache.grid;
  const int batch = cache.batch;
  require_dim(grad_out.rows(), static_cast<Eigen::Index>(batch) * grid, "nno_backward grad rows");
  require_dim(grad_out.cols(), cfg.n, "nno_backward grad cols");

  const RowMat dy = grad_out.array().rowwise() * model.output_norm.std.transpose().array();
  grads.params.proj_w.noalias() += dy.transpose() * cache.v.back();
  grads.params.proj_b += dy.colwise().sum().transpose();

  RowMat dv = dy * prm.proj_w;  // d loss / d v_L
  RowMat da, dprev, s;
  for (int l = cfg.layers - 1; l >= 0; --l) {
    const auto& layer = prm.layers[static_cast<std::size_t>(l)];
    auto& g = grads.params.layers[static_cast<std::size_t>(l)];
    const RowMat& out = cache.v[static_cast<std::size_t>(l) + 1];
    const RowMat& prev = cache.v[static_cast<std::size_t>(l)];
    const RowMat& mean = cache.means[static_cast<std::size_t>(l)];

    da = dv.array() * (1.0 - out.array().square());
    g.w.noalias() += da.transpose() * prev;
    // Per-sample sums of da feed both the bias and the kernel term.
    s.resize(batch, cfg.channels);
    for (int b = 0; b < batch; ++b) s.row(b) = da.middleRows(static_cast<Eigen::Index>(b) * grid, grid).colwise().sum();
    g.b += s.colwise().sum().transpose();
    g.k.noalias() += s.transpose() * mean;

    dprev.noalias() = da * layer.w;
    const RowMat sk = s * layer.k;  // batch x d_c
    for (int b = 0; b < batch; ++b)
      for (int k = 0; k < grid; ++k) dprev.row(static_cast<Eigen::Index>(b) * grid + k) += cache.mean_w[k] * sk.row(b);
    dv.swap(dprev);
  }

  grads.params.lift_w.noalias() += dv.transpose() * cache.z;
  grads.params.lift_b += dv.colwise().sum().transpose();
  if (want_input_grad) {
    grads.input = (dv * prm.lift_w).array().rowwise() / model.input_norm.std.transpose().array();
  }
}

/// Convenience single-sample backward: runs forward then backward.
inline NnoGradients nno_backward(const NnoModel& model, const RowMat& input, const RowMat& grad_output) {
  NnoCache cache;
  RowMat out;
  nno_forward_batch(model, input, static_cast<int>(input.rows()), cache, out);
  NnoGradients grads{NnoParams::zeros(model.cfg), RowMat()};
  nno_backward_batch(model, cache, grad_output, grads, true);
  return grads;
}

// ---------------------------------------------------------------------------
// Prediction

/// P_hat = x + increment, with row 0 pinned to x exactly.
inline PredictorSolution nno_predict(const NnoModel& model, const Vec& x, const ControlHistory& hist) {
  require_dim(x.size(), model.cfg.n, "nno_predict state");
  require_dim(hist.channels(), model.cfg.m, "nno_predict history channels");
  if (hist.points() != model.cfg.grid_points) {
    throw DimensionMismatch("nno_predict: history has " + std::to_string(hist.points()) +
                            " grid points, model expects " + std::to_string(model.cfg.grid_points));
  }
  const RowMat inc = nno_forward(model, encode_input(x, hist));
  PredictorSolution sol;
  sol.dt = hist.dt();
  sol.values = inc.rowwise() + x.transpose();
  sol.values.row(0) = x.transpose();
  return sol;
}

/// Evaluates the model on a history of any grid size (discretization
/// transfer); the coordinate channel is always k / N.
inline PredictorSolution nno_predict_any_grid(const NnoModel& model, const Vec& x, const ControlHistory& hist) {
  require_dim(x.size(), model.cfg.n, "nno_predict state");
  require_dim(hist.channels(), model.cfg.m, "nno_predict history channels");
  const RowMat inc = nno_forward(model, encode_input(x, hist));
  PredictorSolution sol;
  sol.dt = hist.dt();
  sol.values = inc.rowwise() + x.transpose();
  sol.values.row(0) = x.transpose();
  return sol;
}

// ---------------------------------------------------------------------------
// Checkpoint I/O
//
// Little-endian: "NNO1", u32 version, u32 n, m, N, d_c, L, then float64
// arrays input mean/std, output mean/std, lift_W, lift_b, (W_l, b_l, K_l)...,
// proj_W, proj_b (matrices row-major), then CRC32 of every preceding byte.

inline constexpr std::uint32_t kNnoVersion = 1;

inline std::vector<std::uint8_t> serialize_model(const NnoModel& model) {
  model.validate();
  ByteWriter w;
  w.put_bytes("NNO1");
  w.put<std::uint32_t>(kNnoVersion);
  w.put<std::uint32_t>(static_cast<std::uint32_t>(model.cfg.n));
  w.put<std::uint32_t>(static_cast<std::uint32_t>(model.cfg.m));
  w.put<std::uint32_t>(static_cast<std::uint32_t>(model.cfg.grid_points - 1));
  w.put<std::uint32_t>(static_cast<std::uint32_t>(model.cfg.channels));
  w.put<std::uint32_t>(static_cast<std::uint32_t>(model.cfg.layers));
  w.put_matrix(model.input_norm.mean);
  w.put_matrix(model.input_norm.std);
  w.put_matrix(model.output_norm.mean);
  w.put_matrix(model.output_norm.std);
  model.params.for_each([&](const auto& t) { w.put_matrix(t); });
  seal_with_crc(w);
  return std::move(w.bytes());
}

inline std::size_t expected_model_bytes(const NnoConfig& cfg) {
  const std::size_t c_in = static_cast<std::size_t>(cfg.input_dim());
  const std::size_t n = static_cast<std::size_t>(cfg.n);
  const std::size_t dc = static_cast<std::size_t>(cfg.channels);
  const std::size_t doubles = 2 * c_in + 2 * n + dc * c_in + dc +
                              static_cast<std::size_t>(cfg.layers) * (2 * dc * dc + dc) + n * dc + n;
  return 4 + 6 * 4 + doubles * 8 + 4;
}

inline NnoModel deserialize_model(std::span<const std::uint8_t> bytes) {
  if (bytes.size() < 4 || std::string(reinterpret_cast<const char*>(bytes.data()), 4) != "NNO1")
    throw VersionMismatch("checkpoint: bad magic bytes (expected NNO1)");
  ByteReader r(bytes);
  r.get_bytes(4);
  if (bytes.size() < 28) throw ShapeHeaderInconsistency("checkpoint: truncated header");
  const auto version = r.get<std::uint32_t>();
  if (version != kNnoVersion) throw VersionMismatch("checkpoint: unsupported version " + std::to_string(version));
  NnoConfig cfg;
  cfg.n = static_cast<int>(r.get<std::uint32_t>());
  cfg.m = static_cast<int>(r.get<std::uint32_t>());
  cfg.grid_points = static_cast<int>(r.get<std::uint32_t>()) + 1;
  cfg.channels = static_cast<int>(r.get<std::uint32_t>());
  cfg.layers = static_cast<int>(r.get<std::uint32_t>());
  try {
    cfg.validate();
  } catch (const InvalidArgument& e) {
    throw ShapeHeaderInconsistency(std::string("checkpoint: ") + e.what());
  }
  if (cfg.n > (1 << 20) || cfg.m > (1 << 20) || cfg.channels > (1 << 16) || cfg.layers > (1 << 12) ||
      bytes.size() != expected_model_bytes(cfg)) {
    throw ShapeHeaderInconsistency("checkpoint: file size " + std::to_string(bytes.size()) +
                                   " does not match the shape header");
  }
  verify_crc(bytes, "checkpoint");

  NnoModel model;
  model.cfg = cfg;
  model.params = NnoParams::zeros(cfg);
  model.input_norm = Normalizer::identity(cfg.input_dim());
  model.output_norm = Normalizer::identity(cfg.n);
  r.get_matrix(model.input_norm.mean);
  r.get_matrix(model.input_norm.std);
  r.get_matrix(model.output_norm.mean);
  r.get_matrix(model.output_norm.std);
  model.params.for_each([&](auto& t) { r.get_matrix(t); });
  model.validate();
  return model;
}

inline void save_model(const NnoModel& model, const std::string& path) { write_file_bytes(path, serialize_model(model)); }

inline NnoModel load_model(const std::string& path) { return deserialize_model(read_file_bytes(path)); }

}  // namespace predfb
