#pragma once

// Brownian and Ornstein-Uhlenbeck bridges pinned at 0 for t=0 and at beta for
// t=T. Both act independently and identically on each latent coordinate.
//
//   Brownian:  dX = (beta - X)/(T - t) dt + dB
//   OU:        dX = q [ -coth(q(T-t)) X + beta / sinh(q(T-t)) ] dt + sigma dB
//
// Marginals at time t (from X_0 = 0):
//   Brownian:  mean (t/T) beta,                variance t(T-t)/T
//   OU:        mean sinh(q t)/sinh(q T) beta,  variance (sigma^2/q) sinh(q(T-t)) sinh(q t) / sinh(q T)

#include <cmath>
#include <functional>
#include <numbers>
#include <stdexcept>
#include <string>
#include <utility>
#include <vector>

#include "sbreg/random.hpp"
#include "sbreg/tensor.hpp"

namespace sbreg {

enum class BridgeKind { Brownian, OU };

inline const char* bridge_name(BridgeKind k) { return k == BridgeKind::Brownian ? "brownian" : "ou"; }

inline BridgeKind parse_bridge(const std::string& s) {
  if (s == "brownian") return BridgeKind::Brownian;
  if (s == "ou") return BridgeKind::OU;
  throw std::invalid_argument("unknown bridge kind '" + s + "' (expected brownian|ou)");
}

class HorizonError : public std::domain_error {
 public:
  using std::domain_error::domain_error;
};

struct BridgeSpec {
  BridgeKind kind = BridgeKind::Brownian;
  std::vector<double> beta;
  double horizon = 1.0;
  double q = 1.0;
  double sigma = 1.0;

  std::size_t dim() const { return beta.size(); }

  void validate() const {
    if (beta.empty()) throw std::invalid_argument("bridge: empty endpoint");
    if (!(horizon > 0.0)) throw std::invalid_argument("bridge: horizon must be positive");
    if (kind == BridgeKind::OU && !(q > 0.0 && sigma > 0.0)) {
      throw std::invalid_argument("bridge: OU needs q > 0 and sigma > 0");
    }
  }

  BridgeSpec with_beta(std::vector<double> b) const {
    BridgeSpec s = *this;
    s.beta = std::move(b);
    return s;
  }
};

/// Diffusion scale: identity for Brownian, sigma for OU.
inline double diffusion(const BridgeSpec& spec) { return spec.kind == BridgeKind::OU ? spec.sigma : 1.0; }

/// The drift is affine in the state: drift(t, x) = beta_coef * beta - state_coef * x.
struct DriftCoefficients {
  double beta_coef;
  double state_coef;
};

inline DriftCoefficients drift_coefficients(const BridgeSpec& spec, double t) {
  const double rem = spec.horizon - t;
  if (rem < 1e-9) {
    throw HorizonError("bridge drift: t=" + std::to_string(t) + " is within 1e-9 of the horizon " +
                       std::to_string(spec.horizon));
  }
  if (spec.kind == BridgeKind::Brownian) return {1.0 / rem, 1.0 / rem};
  const double qr = spec.q * rem;
  return {spec.q / std::sinh(qr), spec.q / std::tanh(qr)};
}

inline std::vector<double> drift(const BridgeSpec& spec, double t, const std::vector<double>& x) {
  if (x.size() != spec.dim()) throw std::invalid_argument("bridge drift: state dimension mismatch");
  const auto c = drift_coefficients(spec, t);
  std::vector<double> out(x.size());
  for (std::size_t j = 0; j < x.size(); ++j) out[j] = c.beta_coef * spec.beta[j] - c.state_coef * x[j];
  return out;
}

/// Differentiable drift for a 1×r (or r) state tensor.
inline Tensor drift(const BridgeSpec& spec, double t, const Tensor& x) {
  if (x.size() != spec.dim()) throw std::invalid_argument("bridge drift: state dimension mismatch");
  const auto c = drift_coefficients(spec, t);
  std::vector<double> pull(spec.beta);
  for (auto& v : pull) v *= c.beta_coef;
  return sub(Tensor::constant(x.shape(), std::move(pull)), scalar_mul(x, c.state_coef));
}

inline void check_open_interval(const BridgeSpec& spec, double t) {
  if (!(t > 0.0 && t < spec.horizon)) {
    throw std::domain_error("bridge density: t=" + std::to_string(t) + " outside the open interval (0, " +
                            std::to_string(spec.horizon) + ")");
  }
}

/// Scalar multiplying beta in the marginal mean at time t.
inline double marginal_mean_coef(const BridgeSpec& spec, double t) {
  if (spec.kind == BridgeKind::Brownian) return t / spec.horizon;
  return std::sinh(spec.q * t) / std::sinh(spec.q * spec.horizon);
}

inline double marginal_variance(const BridgeSpec& spec, double t) {
  const double T = spec.horizon;
  if (spec.kind == BridgeKind::Brownian) return t * (T - t) / T;
  const double q = spec.q;
  return spec.sigma * spec.sigma / q * std::sinh(q * (T - t)) * std::sinh(q * t) / std::sinh(q * T);
}

/// Sum over coordinates of the Gaussian log-density of X_t at x given X_0 = 0.
inline double transition_logpdf(const BridgeSpec& spec, double t, const std::vector<double>& x) {
  check_open_interval(spec, t);
  if (x.size() != spec.dim()) throw std::invalid_argument("bridge density: state dimension mismatch");
  const double var = marginal_variance(spec, t);
  const double mc = marginal_mean_coef(spec, t);
  const double norm = -0.5 * std::log(2.0 * std::numbers::pi * var);
  double lp = 0.0;
  for (std::size_t j = 0; j < x.size(); ++j) {
    const double d = x[j] - mc * spec.beta[j];
    lp += norm - d * d / (2.0 * var);
  }
  return lp;
}

/// Differentiable variant; x is 1×r (or r).
inline Tensor transition_logpdf(const BridgeSpec& spec, double t, const Tensor& x) {
  check_open_interval(spec, t);
  if (x.size() != spec.dim()) throw std::invalid_argument("bridge density: state dimension mismatch");
  const double var = marginal_variance(spec, t);
  const double mc = marginal_mean_coef(spec, t);
  std::vector<double> mean(spec.beta);
  for (auto& v : mean) v *= mc;
  const double norm = -0.5 * std::log(2.0 * std::numbers::pi * var) * static_cast<double>(spec.dim());
  auto sq = sum(square(sub(x, Tensor::constant(x.shape(), std::move(mean)))));
  return add(scalar_mul(sq, -1.0 / (2.0 * var)), Tensor::scalar(norm));
}

struct PathSample {
  std::vector<double> times;
  std::vector<std::vector<double>> values;
};

/// Euler-Maruyama on the grid t_k = k T/n for k < n; the point at t = T is pinned to beta.
inline PathSample sample_path(const BridgeSpec& spec, std::size_t n_steps, Rng& rng) {
  spec.validate();
  if (n_steps < 2) throw std::invalid_argument("sample_path: n_steps must be at least 2");
  const std::size_t r = spec.dim();
  const double dt = spec.horizon / static_cast<double>(n_steps);
  const double noise = diffusion(spec) * std::sqrt(dt);
  PathSample path;
  path.times.resize(n_steps + 1);
  path.values.assign(n_steps + 1, std::vector<double>(r, 0.0));
  for (std::size_t k = 0; k <= n_steps; ++k) path.times[k] = static_cast<double>(k) * dt;
  path.times[n_steps] = spec.horizon;
  for (std::size_t k = 0; k + 1 < n_steps; ++k) {
    const auto c = drift_coefficients(spec, path.times[k]);
    const auto& x = path.values[k];
    auto& next = path.values[k + 1];
    for (std::size_t j = 0; j < r; ++j) {
      next[j] = x[j] + (c.beta_coef * spec.beta[j] - c.state_coef * x[j]) * dt + noise * standard_normal(rng);
    }
  }
  path.values[n_steps] = spec.beta;
  return path;
}

/// Sum of transition log-densities of the observed points, constant dropped.
inline double discrete_log_goodness(const BridgeSpec& spec,
                                    const std::vector<std::pair<double, std::vector<double>>>& path) {
  double total = 0.0;
  for (const auto& [t, u] : path) total += transition_logpdf(spec, t, u);
  return total;
}

inline Tensor discrete_log_goodness(const BridgeSpec& spec, const std::vector<std::pair<double, Tensor>>& path) {
  Tensor total = Tensor::scalar(0.0);
  for (const auto& [t, u] : path) total = add(total, transition_logpdf(spec, t, u));
  return total;
}

using DriftFn = std::function<std::vector<double>(double t, const std::vector<double>& z)>;

/// Monte-Carlo estimate of E[ integral of 0.5 |u|^2 dt ] with
/// u = (drift_fn - bridge drift) / diffusion, Z simulated under drift_fn.
/// The integral is a left Riemann sum over [0, 1 - 1/n_steps] (in units of T).
inline double kl_path_estimate(const BridgeSpec& spec, const DriftFn& drift_fn, std::size_t n_steps,
                               std::size_t n_paths, Rng& rng) {
  spec.validate();
  if (n_steps < 2) throw std::invalid_argument("kl_path_estimate: n_steps must be at least 2");
  if (n_paths < 1) throw std::invalid_argument("kl_path_estimate: n_paths must be at least 1");
  const std::size_t r = spec.dim();
  const double dt = spec.horizon / static_cast<double>(n_steps);
  const double sig = diffusion(spec);
  const double noise = sig * std::sqrt(dt);
  double total = 0.0;
  std::vector<double> z(r);
  for (std::size_t p = 0; p < n_paths; ++p) {
    std::fill(z.begin(), z.end(), 0.0);
    double cost = 0.0;
    for (std::size_t k = 0; k + 1 < n_steps; ++k) {
      const double t = static_cast<double>(k) * dt;
      const auto g = drift_fn(t, z);
      if (g.size() != r) throw std::invalid_argument("kl_path_estimate: drift_fn returned wrong dimension");
      const auto c = drift_coefficients(spec, t);
      double sq = 0.0;
      for (std::size_t j = 0; j < r; ++j) {
        const double u = (g[j] - (c.beta_coef * spec.beta[j] - c.state_coef * z[j])) / sig;
        sq += u * u;
      }
      cost += 0.5 * sq * dt;
      for (std::size_t j = 0; j < r; ++j) z[j] += g[j] * dt + noise * standard_normal(rng);
    }
    total += cost;
  }
  return total / static_cast<double>(n_paths);
}

}  // namespace sbreg
