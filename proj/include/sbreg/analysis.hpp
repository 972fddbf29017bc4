#pragma once

// Analysis statistics over trained runs: label-centroid separation, Pearson
// and Kendall tau-b correlation tests, and distance of projected traces to
// their bridge.

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <map>
#include <numeric>
#include <stdexcept>
#include <utility>
#include <vector>

#include <boost/math/distributions/students_t.hpp>

#include "sbreg/backbone.hpp"
#include "sbreg/bridges.hpp"
#include "sbreg/latent_map.hpp"

namespace sbreg {

class StatisticsError : public std::invalid_argument {
 public:
  using std::invalid_argument::invalid_argument;
};

/// Mean Euclidean distance between class centroids over unordered label pairs.
inline double centroid_distance(const std::map<int, std::vector<std::vector<double>>>& states_by_label) {
  if (states_by_label.size() < 2) throw StatisticsError("centroid_distance: need at least two labels");
  std::vector<std::vector<double>> centroids;
  std::size_t dim = 0;
  for (const auto& [label, pts] : states_by_label) {
    if (pts.empty()) throw StatisticsError("centroid_distance: label " + std::to_string(label) + " has no states");
    if (dim == 0) dim = pts[0].size();
    std::vector<double> c(dim, 0.0);
    for (const auto& p : pts) {
      if (p.size() != dim) throw StatisticsError("centroid_distance: inconsistent state widths");
      for (std::size_t j = 0; j < dim; ++j) c[j] += p[j];
    }
    for (auto& v : c) v /= static_cast<double>(pts.size());
    centroids.push_back(std::move(c));
  }
  double total = 0.0;
  std::size_t pairs = 0;
  for (std::size_t a = 0; a < centroids.size(); ++a) {
    for (std::size_t b = a + 1; b < centroids.size(); ++b) {
      double s = 0.0;
      for (std::size_t j = 0; j < dim; ++j) s += (centroids[a][j] - centroids[b][j]) * (centroids[a][j] - centroids[b][j]);
      total += std::sqrt(s);
      ++pairs;
    }
  }
  return total / static_cast<double>(pairs);
}

struct Correlation {
  double coefficient = 0.0;
  double p_value = 1.0;
};

/// Product-moment correlation; two-sided p-value from Student's t with n-2 dof.
inline Correlation pearson(const std::vector<double>& x, const std::vector<double>& y) {
  if (x.size() != y.size()) throw StatisticsError("pearson: length mismatch");
  const std::size_t n = x.size();
  if (n < 3) throw StatisticsError("pearson: need at least 3 observations");
  const double mx = std::accumulate(x.begin(), x.end(), 0.0) / static_cast<double>(n);
  const double my = std::accumulate(y.begin(), y.end(), 0.0) / static_cast<double>(n);
  double sxy = 0.0, sxx = 0.0, syy = 0.0;
  for (std::size_t i = 0; i < n; ++i) {
    sxy += (x[i] - mx) * (y[i] - my);
    sxx += (x[i] - mx) * (x[i] - mx);
    syy += (y[i] - my) * (y[i] - my);
  }
  if (sxx == 0.0 || syy == 0.0) throw StatisticsError("pearson: zero variance");
  double r = sxy / std::sqrt(sxx * syy);
  r = std::clamp(r, -1.0, 1.0);
  Correlation out{r, 0.0};
  if (std::abs(r) < 1.0) {
    const double df = static_cast<double>(n - 2);
    const double t = r * std::sqrt(df) / std::sqrt(1.0 - r * r);
    boost::math::students_t dist(df);
    out.p_value = 2.0 * boost::math::cdf(boost::math::complement(dist, std::abs(t)));
  }
  return out;
}

namespace detail {

/// Counts of tied pairs and the two higher tie moments used by the tau variance.
struct TieStats {
  std::int64_t pairs = 0;  // sum c(c-1)/2
  double v0 = 0.0;         // sum c(c-1)(c-2)
  double v1 = 0.0;         // sum c(c-1)(2c+5)
};

inline TieStats tie_stats(std::vector<double> v) {
  std::sort(v.begin(), v.end());
  TieStats s;
  for (std::size_t i = 0; i < v.size();) {
    std::size_t j = i;
    while (j < v.size() && v[j] == v[i]) ++j;
    const double c = static_cast<double>(j - i);
    s.pairs += static_cast<std::int64_t>((j - i) * (j - i - 1) / 2);
    s.v0 += c * (c - 1) * (c - 2);
    s.v1 += c * (c - 1) * (2 * c + 5);
    i = j;
  }
  return s;
}

/// Merge sort that returns the number of inversions.
inline std::int64_t count_inversions(std::vector<double>& a, std::vector<double>& buf, std::size_t lo, std::size_t hi) {
  if (hi - lo < 2) return 0;
  const std::size_t mid = lo + (hi - lo) / 2;
  std::int64_t inv = count_inversions(a, buf, lo, mid) + count_inversions(a, buf, mid, hi);
  std::size_t i = lo, j = mid, k = lo;
  while (i < mid && j < hi) {
    if (a[j] < a[i]) {
      inv += static_cast<std::int64_t>(mid - i);
      buf[k++] = a[j++];
    } else {
      buf[k++] = a[i++];
    }
  }
  while (i < mid) buf[k++] = a[i++];
  while (j < hi) buf[k++] = a[j++];
  std::copy(buf.begin() + static_cast<std::ptrdiff_t>(lo), buf.begin() + static_cast<std::ptrdiff_t>(hi),
            a.begin() + static_cast<std::ptrdiff_t>(lo));
  return inv;
}

}  // namespace detail

/// Concordant minus discordant pair count, in O(n log n) (Knight's method).
inline std::int64_t kendall_score(const std::vector<double>& x, const std::vector<double>& y) {
  const std::size_t n = x.size();
  std::vector<std::size_t> order(n);
  std::iota(order.begin(), order.end(), 0);
  std::sort(order.begin(), order.end(), [&](std::size_t a, std::size_t b) {
    return x[a] < x[b] || (x[a] == x[b] && y[a] < y[b]);
  });
  std::int64_t x_ties = 0, joint_ties = 0;
  for (std::size_t i = 0; i < n;) {
    std::size_t j = i;
    while (j < n && x[order[j]] == x[order[i]]) ++j;
    x_ties += static_cast<std::int64_t>((j - i) * (j - i - 1) / 2);
    for (std::size_t a = i; a < j;) {
      std::size_t b = a;
      while (b < j && y[order[b]] == y[order[a]]) ++b;
      joint_ties += static_cast<std::int64_t>((b - a) * (b - a - 1) / 2);
      a = b;
    }
    i = j;
  }
  std::vector<double> ys(n), buf(n);
  for (std::size_t i = 0; i < n; ++i) ys[i] = y[order[i]];
  const std::int64_t swaps = detail::count_inversions(ys, buf, 0, n);
  const std::int64_t y_ties = detail::tie_stats(y).pairs;
  const std::int64_t n0 = static_cast<std::int64_t>(n * (n - 1) / 2);
  return n0 - x_ties - y_ties + joint_ties - 2 * swaps;
}

/// Tau-b with tie corrections; two-sided p-value from the normal approximation
/// with the tie-adjusted variance of the score.
inline Correlation kendall_tau_b(const std::vector<double>& x, const std::vector<double>& y) {
  if (x.size() != y.size()) throw StatisticsError("kendall_tau_b: length mismatch");
  const std::size_t n = x.size();
  if (n < 2) throw StatisticsError("kendall_tau_b: need at least 2 observations");
  const auto tx = detail::tie_stats(x), ty = detail::tie_stats(y);
  const std::int64_t n0 = static_cast<std::int64_t>(n * (n - 1) / 2);
  if (tx.pairs == n0 || ty.pairs == n0) throw StatisticsError("kendall_tau_b: all values tied in one variable");
  const std::int64_t s = kendall_score(x, y);
  Correlation out;
  out.coefficient = static_cast<double>(s) / std::sqrt(static_cast<double>(n0 - tx.pairs) * static_cast<double>(n0 - ty.pairs));
  const double nd = static_cast<double>(n), m = nd * (nd - 1.0);
  double var = (m * (2.0 * nd + 5.0) - tx.v1 - ty.v1) / 18.0 +
               2.0 * static_cast<double>(tx.pairs) * static_cast<double>(ty.pairs) / m;
  if (n > 2) var += tx.v0 * ty.v0 / (9.0 * m * (nd - 2.0));
  out.p_value = var > 0.0 ? std::erfc(std::abs(static_cast<double>(s)) / std::sqrt(var) / std::sqrt(2.0)) : 1.0;
  return out;
}

struct BridgeDistance {
  double sum = 0.0;   // over trace points
  double mean = 0.0;  // per trace point
};

/// sum_i |u_i - m(t_i) beta|^2 / (2 v(t_i)): the variable part of the negated log-goodness.
inline BridgeDistance bridge_distance_points(const BridgeSpec& spec, const std::vector<double>& times,
                                             const std::vector<std::vector<double>>& points) {
  spec.validate();
  if (times.size() != points.size() || times.empty()) throw std::invalid_argument("bridge_distance: need matching, nonempty times and points");
  BridgeDistance d;
  for (std::size_t i = 0; i < times.size(); ++i) {
    check_open_interval(spec, times[i]);
    if (points[i].size() != spec.dim()) throw ShapeError("bridge_distance: point width differs from endpoint dimension");
    const double c = marginal_mean_coef(spec, times[i]);
    const double v = marginal_variance(spec, times[i]);
    double q = 0.0;
    for (std::size_t j = 0; j < spec.dim(); ++j) q += (points[i][j] - c * spec.beta[j]) * (points[i][j] - c * spec.beta[j]);
    d.sum += q / (2.0 * v);
  }
  d.mean = d.sum / static_cast<double>(times.size());
  return d;
}

inline BridgeDistance bridge_distance(const HiddenTrace& trace, const MapNet& map, const BridgeSpec& spec) {
  if (map.method != FitMethod::PDF) throw std::invalid_argument("bridge_distance: map must be fitted with the PDF method");
  auto path = project_discrete(map, trace);
  std::vector<std::vector<double>> pts;
  for (std::size_t i = 0; i < path.times.size(); ++i) {
    auto row = path.points.row(i);
    pts.emplace_back(row.begin(), row.end());
  }
  return bridge_distance_points(spec, path.times, pts);
}

}  // namespace sbreg
