#pragma once

// Projection of hidden-state trajectories into the latent bridge space.
//
// A trace of L+1 layer states is placed at times t_{i+1} = (i+1)/(L+2). The
// PDF method scores those points with the bridge marginals; the SDE method
// treats the map's output as the drift of dZ = g dt + sigma dB along the
// spline-interpolated trajectory (layer x = (L+2)t - 1) and measures the
// Girsanov cost against the bridge drift.

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <numeric>
#include <optional>
#include <stdexcept>
#include <string>
#include <utility>
#include <vector>

#include <Eigen/Dense>
#include <nlohmann/json.hpp>

#include "sbreg/backbone.hpp"
#include "sbreg/bridges.hpp"
#include "sbreg/optim.hpp"
#include "sbreg/random.hpp"
#include "sbreg/snapshot.hpp"
#include "sbreg/spline.hpp"
#include "sbreg/tensor.hpp"

namespace sbreg {

enum class FitMethod { PDF, SDE };

inline const char* method_name(FitMethod m) { return m == FitMethod::PDF ? "pdf" : "sde"; }

inline FitMethod parse_fit_method(const std::string& s) {
  if (s == "pdf") return FitMethod::PDF;
  if (s == "sde") return FitMethod::SDE;
  throw std::invalid_argument("unknown fitting method '" + s + "' (expected pdf|sde)");
}

// ---------------------------------------------------------------------------
// Endpoints

class DegenerateCovariance : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

/// Row y holds the bridge tail for token y; every row has norm eta.
struct EndpointTable {
  std::size_t vocab_size = 0;
  std::size_t dim = 0;
  double eta = 1.0;
  std::vector<double> beta;  // vocab_size×dim, row-major

  std::vector<double> row(std::size_t y) const {
    if (y >= vocab_size) throw std::out_of_range("endpoints: token " + std::to_string(y) + " outside table");
    return {beta.begin() + static_cast<std::ptrdiff_t>(y * dim), beta.begin() + static_cast<std::ptrdiff_t>((y + 1) * dim)};
  }
};

/// PCA of the (mean-centred) rows onto the top-r principal directions, then
/// each row rescaled to norm eta. Directions are sign-fixed so their
/// largest-magnitude component is positive.
inline EndpointTable build_endpoints(const Tensor& embeddings, std::size_t r, double eta) {
  if (embeddings.ndim() != 2) throw ShapeError("build_endpoints: embeddings must be 2-d");
  const std::size_t n = embeddings.rows(), d = embeddings.cols();
  if (r < 1 || r >= d) throw std::invalid_argument("build_endpoints: need 1 <= r < d");
  if (n <= r) throw std::invalid_argument("build_endpoints: need more rows than latent dimensions");
  if (!(eta > 0.0)) throw std::invalid_argument("build_endpoints: eta must be positive");

  Eigen::MatrixXd X(static_cast<Eigen::Index>(n), static_cast<Eigen::Index>(d));
  for (std::size_t i = 0; i < n; ++i)
    for (std::size_t j = 0; j < d; ++j) X(static_cast<Eigen::Index>(i), static_cast<Eigen::Index>(j)) = embeddings.at(i, j);
  Eigen::RowVectorXd mean = X.colwise().mean();
  X.rowwise() -= mean;
  Eigen::MatrixXd cov = (X.transpose() * X) / static_cast<double>(n - 1);
  Eigen::SelfAdjointEigenSolver<Eigen::MatrixXd> eig(cov);
  if (eig.info() != Eigen::Success) throw DegenerateCovariance("build_endpoints: eigendecomposition failed");

  // Eigen returns ascending eigenvalues.
  const Eigen::VectorXd& values = eig.eigenvalues();
  const double top = std::max(values(values.size() - 1), 0.0);
  std::size_t rank = 0;
  for (Eigen::Index k = 0; k < values.size(); ++k)
    if (values(k) > 1e-10 * std::max(top, 1e-300)) ++rank;
  if (top <= 0.0) rank = 0;
  if (rank < r) {
    throw DegenerateCovariance("build_endpoints: covariance rank " + std::to_string(rank) + " is below r=" +
                               std::to_string(r));
  }
  Eigen::MatrixXd dirs(static_cast<Eigen::Index>(d), static_cast<Eigen::Index>(r));
  for (std::size_t k = 0; k < r; ++k) {
    Eigen::VectorXd v = eig.eigenvectors().col(values.size() - 1 - static_cast<Eigen::Index>(k));
    Eigen::Index arg = 0;
    v.cwiseAbs().maxCoeff(&arg);
    if (v(arg) < 0) v = -v;
    dirs.col(static_cast<Eigen::Index>(k)) = v;
  }
  Eigen::MatrixXd proj = X * dirs;

  EndpointTable table;
  table.vocab_size = n;
  table.dim = r;
  table.eta = eta;
  table.beta.resize(n * r);
  for (std::size_t i = 0; i < n; ++i) {
    const double norm = proj.row(static_cast<Eigen::Index>(i)).norm();
    for (std::size_t k = 0; k < r; ++k) {
      double v;
      if (norm < 1e-12) {
        v = k == 0 ? eta : 0.0;
      } else {
        v = proj(static_cast<Eigen::Index>(i), static_cast<Eigen::Index>(k)) / norm * eta;
      }
      table.beta[i * r + k] = v;
    }
  }
  return table;
}

inline Snapshot to_snapshot(const EndpointTable& e) {
  Snapshot snap;
  snap.kind = SnapshotKind::Endpoints;
  snap.header = {{"eta", e.eta}, {"dim", e.dim}, {"vocab_size", e.vocab_size}};
  snap.tensors.push_back({"beta", {e.vocab_size, e.dim}, e.beta});
  return snap;
}

inline EndpointTable endpoints_from_snapshot(const Snapshot& snap) {
  if (snap.kind != SnapshotKind::Endpoints) throw SnapshotError("snapshot: not an endpoint table");
  EndpointTable e;
  const auto& b = snap.get("beta");
  if (b.shape.size() != 2) throw SnapshotError("snapshot: endpoint table must be 2-d");
  e.vocab_size = b.shape[0];
  e.dim = b.shape[1];
  e.eta = snap.header.at("eta").get<double>();
  e.beta = b.data;
  return e;
}

// ---------------------------------------------------------------------------
// Mapping network

struct MapNetDims {
  std::size_t hidden1 = 64;
  std::size_t hidden2 = 32;
  std::size_t latent = 8;
};

/// Three affine layers with relu between them.
struct MapNet {
  FitMethod method = FitMethod::PDF;
  Tensor w1, b1, w2, b2, w3, b3;

  std::size_t input_dim() const { return w1.cols(); }
  std::size_t output_dim() const { return w3.rows(); }

  Tensor apply(const Tensor& x) const {
    if (x.ndim() != 2 || x.cols() != input_dim()) {
      throw ShapeError("mapnet: input " + shape_str(x.shape()) + " does not have width " + std::to_string(input_dim()));
    }
    Tensor h = relu(add(matmul(x, w1, true), b1));
    h = relu(add(matmul(h, w2, true), b2));
    return add(matmul(h, w3, true), b3);
  }

  std::vector<std::pair<std::string, Tensor>> named() const {
    return {{"w1", w1}, {"b1", b1}, {"w2", w2}, {"b2", b2}, {"w3", w3}, {"b3", b3}};
  }
  std::vector<Tensor> params() const {
    std::vector<Tensor> out;
    for (auto& [n, t] : named()) out.push_back(t);
    return out;
  }
  void set_trainable(bool flag) {
    for (Tensor* t : {&w1, &b1, &w2, &b2, &w3, &b3}) t->set_requires_grad(flag);
  }
  void freeze() { set_trainable(false); }
  MapNet clone() const {
    MapNet m = *this;
    for (Tensor* t : {&m.w1, &m.b1, &m.w2, &m.b2, &m.w3, &m.b3}) *t = t->clone(t->requires_grad());
    return m;
  }
};

/// Input width: [h_out; h_ctx] for PDF, plus one time channel for SDE.
inline std::size_t mapnet_input_dim(FitMethod method, std::size_t hidden_dim) {
  return 2 * hidden_dim + (method == FitMethod::SDE ? 1 : 0);
}

inline MapNet init_mapnet(FitMethod method, std::size_t hidden_dim, const MapNetDims& dims, Rng& rng) {
  const std::size_t in = mapnet_input_dim(method, hidden_dim);
  auto layer = [&](std::size_t out, std::size_t inp) {
    const double std = 1.0 / std::sqrt(static_cast<double>(inp));
    return std::pair{Tensor::parameter({out, inp}, normal_vector(rng, out * inp, std)), Tensor::zeros({out}, true)};
  };
  MapNet m;
  m.method = method;
  std::tie(m.w1, m.b1) = layer(dims.hidden1, in);
  std::tie(m.w2, m.b2) = layer(dims.hidden2, dims.hidden1);
  std::tie(m.w3, m.b3) = layer(dims.latent, dims.hidden2);
  return m;
}

inline Snapshot to_snapshot(const MapNet& m) {
  Snapshot snap;
  snap.kind = SnapshotKind::MapNet;
  snap.header = {{"method", method_name(m.method)}};
  for (const auto& [n, t] : m.named()) snap.add(n, t);
  return snap;
}

inline MapNet mapnet_from_snapshot(const Snapshot& snap) {
  if (snap.kind != SnapshotKind::MapNet) throw SnapshotError("snapshot: not a mapping network");
  MapNet m;
  m.method = parse_fit_method(snap.header.at("method").get<std::string>());
  m.w1 = snap.tensor("w1");
  m.b1 = snap.tensor("b1");
  m.w2 = snap.tensor("w2");
  m.b2 = snap.tensor("b2");
  m.w3 = snap.tensor("w3");
  m.b3 = snap.tensor("b3");
  return m;
}

// ---------------------------------------------------------------------------
// Discrete latent path

/// t_{i+1} = (i+1)/(L+2) for i = 0..L.
inline std::vector<double> latent_times(std::size_t num_layers) {
  std::vector<double> t(num_layers + 1);
  for (std::size_t i = 0; i <= num_layers; ++i) t[i] = static_cast<double>(i + 1) / static_cast<double>(num_layers + 2);
  return t;
}

struct LatentPath {
  std::vector<double> times;
  Tensor points;  // (L+1)×r
};

inline LatentPath project_discrete(const MapNet& map, const HiddenTrace& trace) {
  if (trace.size() < 1 || trace.h_ctx.size() != trace.size()) throw ShapeError("project_discrete: malformed trace");
  if (map.method == FitMethod::SDE || map.input_dim() != 2 * trace.h_out[0].cols()) {
    throw ShapeError("project_discrete: map input width " + std::to_string(map.input_dim()) +
                     " does not match 2 x hidden width " + std::to_string(trace.h_out[0].cols()));
  }
  Tensor x = concat({trace.stacked_out(), trace.stacked_ctx()}, 1);
  return {latent_times(trace.size() - 1), map.apply(x)};
}

/// Sum of bridge transition log-densities of the projected trace (constant dropped).
inline Tensor goodness_pdf(const MapNet& map, const HiddenTrace& trace, const BridgeSpec& spec) {
  if (spec.horizon != 1.0) throw std::invalid_argument("goodness_pdf: bridge horizon must be 1");
  spec.validate();
  auto path = project_discrete(map, trace);
  if (path.points.cols() != spec.dim()) throw ShapeError("goodness_pdf: map output width differs from endpoint dimension");
  std::vector<std::pair<double, Tensor>> pts;
  for (std::size_t i = 0; i < path.times.size(); ++i) pts.emplace_back(path.times[i], slice_rows(path.points, i, i + 1));
  return discrete_log_goodness(spec, pts);
}

// ---------------------------------------------------------------------------
// Continuous path and SDE cost

/// Everything about the SDE discretization that depends only on (L, n_steps).
struct SdeGrid {
  std::size_t num_layers = 0;
  std::size_t n_steps = 0;
  std::vector<double> times;  // t_k = k/n for k = 0..n-2
  Tensor spline_weights;      // (n-1)×(L+1): row k interpolates the trace at layer (L+2)t_k - 1
  Tensor time_column;         // (n-1)×1
  Tensor prefix_sum;          // (n-1)×(n-1) strictly lower-triangular ones

  static SdeGrid make(std::size_t num_layers, std::size_t n_steps) {
    if (n_steps < 4) throw std::invalid_argument("sde: n_steps must be at least 4");
    SdeGrid g;
    g.num_layers = num_layers;
    g.n_steps = n_steps;
    const std::size_t m = n_steps - 1;
    std::vector<double> knots(num_layers + 1);
    std::iota(knots.begin(), knots.end(), 0.0);
    std::vector<double> w;
    w.reserve(m * (num_layers + 1));
    for (std::size_t k = 0; k < m; ++k) {
      const double t = static_cast<double>(k) / static_cast<double>(n_steps);
      g.times.push_back(t);
      const double x = static_cast<double>(num_layers + 2) * t - 1.0;
      auto row = CubicSpline::basis_weights(knots, x);
      w.insert(w.end(), row.begin(), row.end());
    }
    g.spline_weights = Tensor::constant({m, num_layers + 1}, std::move(w));
    g.time_column = Tensor::constant({m, 1}, g.times);
    std::vector<double> c(m * m, 0.0);
    for (std::size_t i = 0; i < m; ++i)
      for (std::size_t j = 0; j < i; ++j) c[i * m + j] = 1.0;
    g.prefix_sum = Tensor::constant({m, m}, std::move(c));
    return g;
  }

  double dt() const { return 1.0 / static_cast<double>(n_steps); }
  std::size_t rows() const { return n_steps - 1; }
};

/// Map inputs [h_out(x_k); h_ctx(x_k); t_k] for every grid step, differentiable in the trace.
inline Tensor sde_inputs(const SdeGrid& grid, const HiddenTrace& trace) {
  if (trace.size() != grid.num_layers + 1) throw ShapeError("sde: trace length does not match the grid");
  Tensor h_out = matmul(grid.spline_weights, trace.stacked_out());
  Tensor h_ctx = matmul(grid.spline_weights, trace.stacked_ctx());
  return concat({h_out, h_ctx, grid.time_column}, 1);
}

/// Standard normal increments for one simulated path, (n-1)×r.
inline std::vector<double> sde_noise(const SdeGrid& grid, std::size_t r, Rng& rng) {
  return normal_vector(rng, grid.rows() * r);
}

/// Girsanov cost sum_k 0.5 |u_k|^2 dt with u = (g_k - mu(t_k, Z_k)) / sigma, where
/// Z_{k+1} = Z_k + g_k dt + sigma sqrt(dt) xi_k and Z_0 = 0. `drift` is (n-1)×r.
inline Tensor sde_kl_cost(const SdeGrid& grid, const BridgeSpec& spec, const Tensor& drift,
                          const std::vector<double>& noise) {
  spec.validate();
  const std::size_t m = grid.rows(), r = spec.dim();
  if (drift.ndim() != 2 || drift.rows() != m || drift.cols() != r) {
    throw ShapeError("sde: drift " + shape_str(drift.shape()) + " expected [" + std::to_string(m) + "," +
                     std::to_string(r) + "]");
  }
  if (noise.size() != m * r) throw ShapeError("sde: noise has wrong length");
  const double dt = grid.dt() * spec.horizon;
  const double sig = diffusion(spec);
  const double scale = sig * std::sqrt(dt);
  std::vector<double> noise_sum(m * r, 0.0);  // sigma sqrt(dt) sum_{j<k} xi_j
  for (std::size_t k = 1; k < m; ++k)
    for (std::size_t j = 0; j < r; ++j) noise_sum[k * r + j] = noise_sum[(k - 1) * r + j] + scale * noise[(k - 1) * r + j];
  std::vector<double> state_coef(m * r), pull(m * r);
  for (std::size_t k = 0; k < m; ++k) {
    const auto c = drift_coefficients(spec, grid.times[k] * spec.horizon);
    for (std::size_t j = 0; j < r; ++j) {
      state_coef[k * r + j] = c.state_coef;
      pull[k * r + j] = c.beta_coef * spec.beta[j];
    }
  }
  Tensor z = add(scalar_mul(matmul(grid.prefix_sum, drift), dt), Tensor::constant({m, r}, std::move(noise_sum)));
  Tensor u = sub(add(drift, elementwise_mul(Tensor::constant({m, r}, std::move(state_coef)), z)),
                 Tensor::constant({m, r}, std::move(pull)));
  return scalar_mul(sum(square(u)), 0.5 * dt / (sig * sig));
}

inline Tensor goodness_sde(const MapNet& map, const HiddenTrace& trace, const BridgeSpec& spec, const SdeGrid& grid,
                           Rng& rng) {
  if (spec.horizon != 1.0) throw std::invalid_argument("goodness_sde: bridge horizon must be 1");
  if (map.method != FitMethod::SDE) throw std::invalid_argument("goodness_sde: map was not built for the SDE method");
  Tensor g = map.apply(sde_inputs(grid, trace));
  return sde_kl_cost(grid, spec, g, sde_noise(grid, spec.dim(), rng));
}

inline Tensor goodness_sde(const MapNet& map, const HiddenTrace& trace, const BridgeSpec& spec, std::size_t n_steps,
                           Rng& rng) {
  return goodness_sde(map, trace, spec, SdeGrid::make(trace.size() - 1, n_steps), rng);
}

// ---------------------------------------------------------------------------
// Fitting

struct MapFitHyper {
  std::size_t steps = 1500;
  std::size_t batch_size = 16;
  double learning_rate = 1e-3;
  double grad_clip = 1.0;
  double warmup_ratio = 0.01;
  std::size_t sde_steps = 16;
  MapNetDims dims;
  std::uint64_t seed = 0;
};

inline void to_json(nlohmann::json& j, const MapFitHyper& h) {
  j = {{"steps", h.steps},
       {"batch_size", h.batch_size},
       {"learning_rate", h.learning_rate},
       {"grad_clip", h.grad_clip},
       {"warmup_ratio", h.warmup_ratio},
       {"sde_steps", h.sde_steps},
       {"hidden1", h.dims.hidden1},
       {"hidden2", h.dims.hidden2},
       {"latent_dim", h.dims.latent},
       {"seed", h.seed}};
}

inline void from_json(const nlohmann::json& j, MapFitHyper& h) {
  h.steps = j.value("steps", h.steps);
  h.batch_size = j.value("batch_size", h.batch_size);
  h.learning_rate = j.value("learning_rate", h.learning_rate);
  h.grad_clip = j.value("grad_clip", h.grad_clip);
  h.warmup_ratio = j.value("warmup_ratio", h.warmup_ratio);
  h.sde_steps = j.value("sde_steps", h.sde_steps);
  h.dims.hidden1 = j.value("hidden1", h.dims.hidden1);
  h.dims.hidden2 = j.value("hidden2", h.dims.hidden2);
  h.dims.latent = j.value("latent_dim", h.dims.latent);
  h.seed = j.value("seed", h.seed);
}

/// A frozen-backbone trace paired with the token it should produce.
struct TraceSample {
  HiddenTrace trace;
  int target = 0;
};

inline std::vector<TraceSample> collect_traces(const BackboneState& backbone, const std::vector<MaskedExample>& corpus) {
  std::vector<TraceSample> out;
  out.reserve(corpus.size());
  for (const auto& ex : corpus) {
    auto res = forward(backbone, ex.tokens, ex.mask_position);
    out.push_back({res.trace.detached(), ex.target});
  }
  return out;
}

/// Loss minimized when fitting: -goodness_pdf, or the SDE KL cost.
inline Tensor map_fit_loss(const MapNet& map, const TraceSample& s, const EndpointTable& endpoints,
                           const BridgeSpec& bridge, const SdeGrid* grid, Rng& rng) {
  const BridgeSpec spec = bridge.with_beta(endpoints.row(static_cast<std::size_t>(s.target)));
  if (map.method == FitMethod::PDF) return scalar_mul(goodness_pdf(map, s.trace, spec), -1.0);
  return goodness_sde(map, s.trace, spec, *grid, rng);
}

/// Mean fitting loss over samples (no graph retained).
inline double mean_map_loss(const MapNet& map, const std::vector<TraceSample>& samples, const EndpointTable& endpoints,
                            const BridgeSpec& bridge, std::size_t sde_steps, std::uint64_t seed) {
  if (samples.empty()) return 0.0;
  Rng rng(seed);
  std::optional<SdeGrid> grid;
  if (map.method == FitMethod::SDE) grid = SdeGrid::make(samples[0].trace.size() - 1, sde_steps);
  double total = 0.0;
  for (const auto& s : samples) total += map_fit_loss(map, s, endpoints, bridge, grid ? &*grid : nullptr, rng).item();
  return total / static_cast<double>(samples.size());
}

struct MapFitReport {
  std::vector<double> train_loss;  // per step, batch mean
};

/// Trains a fresh mapping network on frozen-backbone traces and returns it frozen.
inline MapNet fit_map(const std::vector<TraceSample>& samples, std::size_t hidden_dim, FitMethod method,
                      const EndpointTable& endpoints, const BridgeSpec& bridge, const MapFitHyper& hyper,
                      MapFitReport* report = nullptr) {
  if (samples.empty()) throw std::invalid_argument("fit_map: empty corpus");
  Rng rng(hyper.seed);
  MapNetDims dims = hyper.dims;
  dims.latent = endpoints.dim;
  MapNet map = init_mapnet(method, hidden_dim, dims, rng);
  std::optional<SdeGrid> grid;
  if (method == FitMethod::SDE) grid = SdeGrid::make(samples[0].trace.size() - 1, hyper.sde_steps);
  auto params = map.params();
  AdamState adam = make_adam(hyper.learning_rate);
  const double warmup = std::max(1.0, hyper.warmup_ratio * static_cast<double>(hyper.steps));
  for (std::size_t step = 0; step < hyper.steps; ++step) {
    adam.learning_rate = hyper.learning_rate * std::min(1.0, static_cast<double>(step + 1) / warmup);
    Tensor loss = Tensor::scalar(0.0);
    for (std::size_t b = 0; b < hyper.batch_size; ++b) {
      const auto& s = samples[uniform_index(rng, samples.size())];
      loss = add(loss, map_fit_loss(map, s, endpoints, bridge, grid ? &*grid : nullptr, rng));
    }
    loss = scalar_mul(loss, 1.0 / static_cast<double>(hyper.batch_size));
    if (report) report->train_loss.push_back(loss.item());
    auto grads = backward(loss);
    clip_grad_norm(params, grads, hyper.grad_clip);
    adam_step(params, grads, adam);
  }
  map.freeze();
  return map;
}

/// Convenience overload: traces collected from the frozen backbone first.
inline MapNet fit_map(const BackboneState& backbone, const std::vector<MaskedExample>& corpus, FitMethod method,
                      const EndpointTable& endpoints, const BridgeSpec& bridge, const MapFitHyper& hyper,
                      MapFitReport* report = nullptr) {
  return fit_map(collect_traces(backbone, corpus), backbone.config.hidden_dim, method, endpoints, bridge, hyper, report);
}

}  // namespace sbreg
