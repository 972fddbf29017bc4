#include <gtest/gtest.h>

#include <cmath>
#include <vector>

#include "sbreg/random.hpp"
#include "sbreg/spline.hpp"

using namespace sbreg;

namespace {

CubicSpline fit(const std::vector<double>& x, const std::vector<double>& y) {
  std::vector<std::vector<double>> v;
  for (double yi : y) v.push_back({yi});
  return CubicSpline::fit_natural(x, v);
}

struct Knots {
  std::vector<double> x;
  std::vector<std::vector<double>> v;
};

Knots random_knots(Rng& rng, std::size_t n, std::size_t dim) {
  Knots k;
  double pos = uniform01(rng) - 0.5;
  for (std::size_t i = 0; i < n; ++i) {
    k.x.push_back(pos);
    pos += 0.2 + uniform01(rng);
    k.v.push_back(normal_vector(rng, dim));
  }
  return k;
}

}  // namespace

TEST(Spline, TwoKnotsAreLinear) {
  auto s = fit({0.0, 1.0}, {0.0, 2.0});
  EXPECT_NEAR(s.eval(0.5)[0], 1.0, 1e-15);
  EXPECT_NEAR(s.eval(-0.5)[0], -1.0, 1e-15);
  EXPECT_NEAR(s.eval(1.5)[0], 3.0, 1e-15);
}

TEST(Spline, ThreeKnotHandValue) {
  auto s = fit({0.0, 0.5, 1.0}, {0.0, 1.0, 0.0});
  EXPECT_NEAR(s.eval(0.25)[0], 0.6875, 1e-12);
  EXPECT_NEAR(s.eval_derivative(0.5, 2)[0], -12.0, 1e-12);
}

TEST(Spline, InterpolatesKnotsExactly) {
  Rng rng(1);
  for (int trial = 0; trial < 20; ++trial) {
    auto k = random_knots(rng, 2 + trial % 9, 3);
    auto s = CubicSpline::fit_natural(k.x, k.v);
    for (std::size_t i = 0; i < k.x.size(); ++i) {
      auto y = s.eval(k.x[i]);
      for (std::size_t j = 0; j < 3; ++j) EXPECT_NEAR(y[j], k.v[i][j], 1e-10);
    }
  }
}

TEST(Spline, NaturalBoundary) {
  Rng rng(2);
  for (int trial = 0; trial < 20; ++trial) {
    auto k = random_knots(rng, 3 + trial % 7, 2);
    auto s = CubicSpline::fit_natural(k.x, k.v);
    for (double t : {k.x.front(), k.x.back()}) {
      for (double v : s.eval_derivative(t, 2)) EXPECT_LE(std::abs(v), 1e-8);
    }
  }
}

TEST(Spline, SmoothAcrossInteriorKnots) {
  Rng rng(3);
  auto k = random_knots(rng, 7, 1);
  auto s = CubicSpline::fit_natural(k.x, k.v);
  const double h = 1e-7;
  for (std::size_t i = 1; i + 1 < k.x.size(); ++i) {
    const double t = k.x[i];
    EXPECT_NEAR(s.eval(t - h)[0], s.eval(t + h)[0], 1e-6);
    // One-sided slopes and curvatures from each neighbouring piece.
    EXPECT_NEAR(s.eval_derivative(t - 1e-12, 1)[0], s.eval_derivative(t, 1)[0], 1e-9);
    const double left = s.eval_derivative(t - 1e-12, 2)[0], right = s.eval_derivative(t, 2)[0];
    EXPECT_LE(std::abs(left - right), 1e-5 * std::max(1.0, std::abs(left)));
    // Finite-difference first derivative agrees with the analytic one.
    const double fd = (s.eval(t + 1e-6)[0] - s.eval(t - 1e-6)[0]) / 2e-6;
    EXPECT_NEAR(fd, s.eval_derivative(t, 1)[0], 1e-6);
  }
}

TEST(Spline, RefitIsIdempotent) {
  Rng rng(4);
  for (int trial = 0; trial < 10; ++trial) {
    auto k = random_knots(rng, 6, 2);
    auto s = CubicSpline::fit_natural(k.x, k.v);
    std::vector<std::vector<double>> sampled;
    for (double x : k.x) sampled.push_back(s.eval(x));
    auto r = CubicSpline::fit_natural(k.x, sampled);
    for (double t = k.x.front() - 0.5; t < k.x.back() + 0.5; t += 0.05) {
      auto a = s.eval(t), b = r.eval(t);
      for (std::size_t j = 0; j < 2; ++j) EXPECT_NEAR(a[j], b[j], 1e-10);
    }
  }
}

TEST(Spline, BasisWeightsReproduceEval) {
  Rng rng(5);
  auto k = random_knots(rng, 5, 3);
  auto s = CubicSpline::fit_natural(k.x, k.v);
  for (double t : {k.x.front() - 0.3, k.x[1], 0.5 * (k.x[2] + k.x[3]), k.x.back() + 0.1}) {
    auto w = CubicSpline::basis_weights(k.x, t);
    ASSERT_EQ(w.size(), k.x.size());
    auto y = s.eval(t);
    for (std::size_t j = 0; j < 3; ++j) {
      double acc = 0.0;
      for (std::size_t i = 0; i < w.size(); ++i) acc += w[i] * k.v[i][j];
      EXPECT_NEAR(acc, y[j], 1e-12);
    }
  }
}

TEST(Spline, RejectsBadKnots) {
  EXPECT_THROW(fit({0.0}, {1.0}), std::invalid_argument);
  EXPECT_THROW(fit({0.0, 0.0, 1.0}, {1.0, 2.0, 3.0}), std::invalid_argument);
  EXPECT_THROW(fit({1.0, 0.0}, {1.0, 2.0}), std::invalid_argument);
  EXPECT_THROW(fit({0.0, 1.0}, {1.0}), std::invalid_argument);
  EXPECT_THROW(fit({0.0, 1.0}, {1.0, 2.0}).eval_derivative(0.5, 3), std::invalid_argument);
}
