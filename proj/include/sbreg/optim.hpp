#pragma once

#include <cmath>
#include <cstdint>
#include <span>
#include <stdexcept>
#include <vector>

#include "sbreg/tensor.hpp"

namespace sbreg {

struct AdamState {
  std::vector<std::vector<double>> first_moment;
  std::vector<std::vector<double>> second_moment;
  std::uint64_t step_count = 0;
  double beta1 = 0.9;
  double beta2 = 0.999;
  double epsilon = 1e-8;
  double learning_rate = 1e-3;
};

inline AdamState make_adam(double learning_rate) {
  AdamState s;
  s.learning_rate = learning_rate;
  return s;
}

/// Bias-corrected Adam update, in place on the parameter leaves.
inline void adam_step(std::span<Tensor> params, const Gradients& grads, AdamState& state) {
  for (const auto& p : params) {
    if (!grads.contains(p)) {
      throw std::invalid_argument("adam_step: missing gradient for parameter node " + std::to_string(p.id()));
    }
  }
  if (state.first_moment.empty()) {
    for (const auto& p : params) {
      state.first_moment.emplace_back(p.size(), 0.0);
      state.second_moment.emplace_back(p.size(), 0.0);
    }
  }
  if (state.first_moment.size() != params.size()) {
    throw std::invalid_argument("adam_step: parameter list changed between steps");
  }
  ++state.step_count;
  const double t = static_cast<double>(state.step_count);
  const double c1 = 1.0 - std::pow(state.beta1, t);
  const double c2 = 1.0 - std::pow(state.beta2, t);
  for (std::size_t k = 0; k < params.size(); ++k) {
    auto g = grads.at(params[k]).data();
    auto p = params[k].mutable_data();
    auto& m = state.first_moment[k];
    auto& v = state.second_moment[k];
    if (m.size() != p.size()) throw std::invalid_argument("adam_step: moment/parameter shape mismatch");
    for (std::size_t i = 0; i < p.size(); ++i) {
      m[i] = state.beta1 * m[i] + (1.0 - state.beta1) * g[i];
      v[i] = state.beta2 * v[i] + (1.0 - state.beta2) * g[i] * g[i];
      const double mhat = m[i] / c1;
      const double vhat = v[i] / c2;
      p[i] -= state.learning_rate * mhat / (std::sqrt(vhat) + state.epsilon);
    }
  }
}

/// Rescales the parameters' gradients so their joint L2 norm is at most max_norm.
/// Returns the norm before clipping.
inline double clip_grad_norm(std::span<const Tensor> params, Gradients& grads, double max_norm) {
  double sq = 0.0;
  for (const auto& p : params) {
    if (const auto* g = grads.find(p))
      for (double v : g->data()) sq += v * v;
  }
  const double norm = std::sqrt(sq);
  if (max_norm > 0.0 && norm > max_norm) {
    const double scale = max_norm / (norm + 1e-12);
    for (const auto& p : params) {
      if (auto* g = grads.find_mutable(p))
        for (double& v : g->mutable_data()) v *= scale;
    }
  }
  return norm;
}

}  // namespace sbreg
