#pragma once

// Natural cubic spline over vector-valued knots.

#include <algorithm>
#include <cmath>
#include <span>
#include <stdexcept>
#include <string>
#include <vector>

namespace sbreg {

class CubicSpline {
 public:
  /// Per-interval coefficients of a + b s + c s^2 + d s^3 with s = t - x_i, one set per dimension.
  struct Piece {
    std::vector<double> a, b, c, d;
  };

  static CubicSpline fit_natural(std::span<const double> positions, const std::vector<std::vector<double>>& values) {
    const std::size_t n = positions.size();
    if (n < 2) throw std::invalid_argument("spline: need at least two knots, got " + std::to_string(n));
    if (values.size() != n) throw std::invalid_argument("spline: knot positions and values differ in count");
    for (std::size_t i = 1; i < n; ++i) {
      if (!(positions[i] > positions[i - 1])) {
        throw std::invalid_argument("spline: knot positions must be strictly increasing (duplicate or unsorted at " +
                                    std::to_string(positions[i]) + ")");
      }
    }
    const std::size_t dim = values[0].size();
    for (const auto& v : values) {
      if (v.size() != dim) throw std::invalid_argument("spline: knot values differ in dimension");
    }

    CubicSpline s;
    s.x_.assign(positions.begin(), positions.end());
    s.dim_ = dim;
    std::vector<double> h(n - 1);
    for (std::size_t i = 0; i + 1 < n; ++i) h[i] = positions[i + 1] - positions[i];

    // Second derivatives M: natural ends M_0 = M_{n-1} = 0; Thomas algorithm on the interior.
    std::vector<std::vector<double>> M(n, std::vector<double>(dim, 0.0));
    if (n > 2) {
      const std::size_t m = n - 2;
      std::vector<double> diag(m), upper(m), lower(m);
      for (std::size_t k = 0; k < m; ++k) {
        lower[k] = h[k];
        diag[k] = 2.0 * (h[k] + h[k + 1]);
        upper[k] = h[k + 1];
      }
      std::vector<double> cp(m);
      std::vector<double> dp(m);
      for (std::size_t j = 0; j < dim; ++j) {
        for (std::size_t k = 0; k < m; ++k) {
          const std::size_t i = k + 1;
          const double rhs =
              6.0 * ((values[i + 1][j] - values[i][j]) / h[i] - (values[i][j] - values[i - 1][j]) / h[i - 1]);
          if (k == 0) {
            cp[k] = upper[k] / diag[k];
            dp[k] = rhs / diag[k];
          } else {
            const double denom = diag[k] - lower[k] * cp[k - 1];
            cp[k] = upper[k] / denom;
            dp[k] = (rhs - lower[k] * dp[k - 1]) / denom;
          }
        }
        for (std::size_t k = m; k-- > 0;) {
          M[k + 1][j] = k + 1 < m ? dp[k] - cp[k] * M[k + 2][j] : dp[k];
        }
      }
    }

    s.pieces_.resize(n - 1);
    for (std::size_t i = 0; i + 1 < n; ++i) {
      auto& p = s.pieces_[i];
      p.a.resize(dim);
      p.b.resize(dim);
      p.c.resize(dim);
      p.d.resize(dim);
      for (std::size_t j = 0; j < dim; ++j) {
        p.a[j] = values[i][j];
        p.b[j] = (values[i + 1][j] - values[i][j]) / h[i] - h[i] * (2.0 * M[i][j] + M[i + 1][j]) / 6.0;
        p.c[j] = M[i][j] / 2.0;
        p.d[j] = (M[i + 1][j] - M[i][j]) / (6.0 * h[i]);
      }
    }
    s.knot_values_ = values;
    return s;
  }

  /// Outside the knot span the boundary interval's cubic is extended.
  std::vector<double> eval(double t) const { return eval_derivative(t, 0); }

  /// order 0, 1 or 2.
  std::vector<double> eval_derivative(double t, int order) const {
    const std::size_t i = interval(t);
    if (order == 0 && t == x_[i]) return knot_values_[i];
    return eval_piece(std::min(i, pieces_.size() - 1), t, order);
  }

  std::size_t dim() const { return dim_; }
  std::span<const double> knots() const { return x_; }
  const std::vector<Piece>& pieces() const { return pieces_; }

  /// Weights w such that eval(t) = sum_k w_k * value_k for any knot values at these positions.
  static std::vector<double> basis_weights(std::span<const double> positions, double t) {
    const std::size_t n = positions.size();
    std::vector<std::vector<double>> identity(n, std::vector<double>(n, 0.0));
    for (std::size_t k = 0; k < n; ++k) identity[k][k] = 1.0;
    return fit_natural(positions, identity).eval(t);
  }

 private:
  // Index of the knot at or left of t, clamped to the first/last interval.
  std::size_t interval(double t) const {
    if (t <= x_.front()) return 0;
    if (t >= x_.back()) return x_.size() - 1;
    auto it = std::upper_bound(x_.begin(), x_.end(), t);
    return static_cast<std::size_t>(it - x_.begin()) - 1;
  }

  std::vector<double> eval_piece(std::size_t i, double t, int order) const {
    const auto& p = pieces_[i];
    const double s = t - x_[i];
    std::vector<double> out(dim_);
    for (std::size_t j = 0; j < dim_; ++j) {
      switch (order) {
        case 0: out[j] = p.a[j] + s * (p.b[j] + s * (p.c[j] + s * p.d[j])); break;
        case 1: out[j] = p.b[j] + s * (2.0 * p.c[j] + 3.0 * s * p.d[j]); break;
        case 2: out[j] = 2.0 * p.c[j] + 6.0 * s * p.d[j]; break;
        default: throw std::invalid_argument("spline: derivative order must be 0, 1 or 2");
      }
    }
    return out;
  }

  std::vector<double> x_;
  std::vector<std::vector<double>> knot_values_;
  std::vector<Piece> pieces_;
  std::size_t dim_ = 0;
};

}  // namespace sbreg
