#include <gtest/gtest.h>

#include <cmath>
#include <functional>
#include <string>
#include <vector>

#include "sbreg/tensor.hpp"
#include "test_util.hpp"

using namespace sbreg;
using sbreg::testing::gradient_error;
using sbreg::testing::random_tensor;
using sbreg::testing::values;

TEST(TensorForward, MatmulHandExample) {
  auto a = Tensor::constant({2, 2}, {1, 2, 3, 4});
  auto b = Tensor::constant({2, 1}, {1, 1});
  auto c = matmul(a, b);
  EXPECT_EQ(c.shape(), (Shape{2, 1}));
  EXPECT_EQ(values(c), (std::vector<double>{3, 7}));
}

TEST(TensorForward, MatmulTransposedRhsMatchesExplicitTranspose) {
  Rng rng(3);
  auto a = random_tensor(rng, {3, 4}, false);
  auto b = random_tensor(rng, {5, 4}, false);
  auto x = matmul(a, b, true);
  auto y = matmul(a, transpose(b));
  for (std::size_t i = 0; i < x.size(); ++i) EXPECT_NEAR(x[i], y[i], 1e-14);
}

TEST(TensorForward, SoftmaxOfEqualLogitsIsUniform) {
  auto s = softmax(Tensor::constant({1, 2}, {0, 0}));
  EXPECT_DOUBLE_EQ(s[0], 0.5);
  EXPECT_DOUBLE_EQ(s[1], 0.5);
}

TEST(TensorForward, LayerNormOfConstantVectorIsZero) {
  auto y = layer_norm(Tensor::constant({1, 3}, {2, 2, 2}), 1e-5);
  for (double v : y.data()) EXPECT_EQ(v, 0.0);
}

TEST(TensorForward, MeanOverAxisShapes) {
  auto a = Tensor::constant({2, 3}, {1, 2, 3, 4, 5, 6});
  auto r0 = mean_over_axis(a, 0);
  auto r1 = mean_over_axis(a, 1);
  EXPECT_EQ(r0.shape(), (Shape{1, 3}));
  EXPECT_EQ(values(r0), (std::vector<double>{2.5, 3.5, 4.5}));
  EXPECT_EQ(r1.shape(), (Shape{2, 1}));
  EXPECT_EQ(values(r1), (std::vector<double>{2, 5}));
}

TEST(TensorForward, CrossEntropyMatchesLogSumExp) {
  auto logits = Tensor::constant({1, 3}, {1.0, 2.0, 0.5});
  const double lse = std::log(std::exp(1.0) + std::exp(2.0) + std::exp(0.5));
  EXPECT_NEAR(cross_entropy_with_logits(logits, 1).item(), lse - 2.0, 1e-14);
}

TEST(TensorForward, GatherConcatSlice) {
  auto table = Tensor::constant({3, 2}, {0, 1, 10, 11, 20, 21});
  std::vector<int> idx{2, 0, 2};
  auto g = gather_rows(table, idx);
  EXPECT_EQ(values(g), (std::vector<double>{20, 21, 0, 1, 20, 21}));
  auto c = concat({table, table}, 1);
  EXPECT_EQ(c.shape(), (Shape{3, 4}));
  EXPECT_EQ(values(slice_rows(table, 1, 2)), (std::vector<double>{10, 11}));
  EXPECT_EQ(values(slice_cols(c, 1, 3)), (std::vector<double>{1, 0, 11, 10, 21, 20}));
}

TEST(TensorForward, ShapeMismatchNamesOpAndDimensions) {
  auto a = Tensor::constant({2, 3}, std::vector<double>(6, 1.0));
  auto b = Tensor::constant({2, 3}, std::vector<double>(6, 1.0));
  try {
    matmul(a, b);
    FAIL() << "expected a shape error";
  } catch (const ShapeError& e) {
    const std::string msg = e.what();
    EXPECT_NE(msg.find("matmul"), std::string::npos) << msg;
    EXPECT_NE(msg.find("[2,3]"), std::string::npos) << msg;
  }
  EXPECT_THROW(add(a, Tensor::constant({3, 2}, std::vector<double>(6, 1.0))), ShapeError);
  EXPECT_THROW(Tensor::from({2, 2}, {1, 2, 3}), ShapeError);
}

TEST(TensorForward, LogRejectsNonPositive) {
  EXPECT_THROW(sbreg::log(Tensor::constant({2}, {1.0, 0.0})), std::domain_error);
}

TEST(TensorForward, IdenticalInputsGiveBitIdenticalOutputs) {
  auto run = [] {
    Rng rng(11);
    auto x = random_tensor(rng, {4, 6}, false);
    auto w = random_tensor(rng, {6, 6}, false);
    return values(softmax(gelu(layer_norm(matmul(x, w)))));
  };
  EXPECT_EQ(run(), run());
}

TEST(TensorForward, ApplyDispatchesEveryListedOp) {
  auto a = Tensor::constant({2, 2}, {1, 2, 3, 4});
  OpAttrs attrs;
  EXPECT_EQ(values(apply(OpKind::Matmul, {a, a})), values(matmul(a, a)));
  attrs.scalar = 3.0;
  EXPECT_EQ(values(apply(OpKind::ScalarMul, {a}, attrs)), (std::vector<double>{3, 6, 9, 12}));
  attrs = {};
  attrs.indices = {1};
  EXPECT_EQ(values(apply(OpKind::GatherRows, {a}, attrs)), (std::vector<double>{3, 4}));
  EXPECT_THROW(apply(OpKind::Add, {a}), std::invalid_argument);
}

// ---------------------------------------------------------------------------
// Backward

TEST(TensorBackward, SumOfSquaresGradient) {
  auto x = Tensor::parameter({3}, {1, 2, 3});
  auto grads = backward(sum(square(x)));
  EXPECT_EQ(values(grads.at(x)), (std::vector<double>{2, 4, 6}));
}

TEST(TensorBackward, MatmulWeightGradientMatchesFiniteDifferences) {
  Rng rng(5);
  auto x = random_tensor(rng, {3, 4}, false);
  auto w = random_tensor(rng, {4, 2});
  EXPECT_LT(gradient_error([&] { return sum(matmul(x, w)); }, w), 1e-4);
}

TEST(TensorBackward, NonTrainableLeafIsAbsent) {
  auto x = Tensor::constant({2}, {1, 2});
  auto w = Tensor::parameter({2}, {3, 4});
  auto grads = backward(sum(elementwise_mul(x, w)));
  EXPECT_FALSE(grads.contains(x));
  EXPECT_TRUE(grads.contains(w));
}

TEST(TensorBackward, NonScalarRootRejected) {
  auto x = Tensor::parameter({2}, {1, 2});
  EXPECT_THROW(backward(square(x)), ShapeError);
}

TEST(TensorBackward, SharedSubexpressionEqualsTree) {
  Rng rng(9);
  auto x = random_tensor(rng, {3, 3});
  // DAG: s used twice.
  auto s = gelu(matmul(x, x));
  auto dag = sum(elementwise_mul(s, s));
  auto g_dag = values(backward(dag).at(x));
  // Tree: the shared node rebuilt independently for each use.
  auto tree = sum(elementwise_mul(gelu(matmul(x, x)), gelu(matmul(x, x))));
  auto g_tree = values(backward(tree).at(x));
  ASSERT_EQ(g_dag.size(), g_tree.size());
  for (std::size_t i = 0; i < g_dag.size(); ++i) EXPECT_NEAR(g_dag[i], g_tree[i], 1e-12 * (1 + std::abs(g_tree[i])));
}

TEST(TensorBackward, FanOutAccumulates) {
  auto x = Tensor::parameter({1}, {3.0});
  auto y = add(add(x, x), scalar_mul(x, 2.0));
  EXPECT_EQ(backward(sum(y)).at(x)[0], 4.0);
}

// Every op kind: random inputs, loss = sum(op(...) * R) for a fixed random R.

class OpGradient : public ::testing::TestWithParam<OpKind> {};

namespace {

Tensor weighted_sum(const Tensor& y, Rng& rng) {
  auto r = Tensor::constant(y.shape(), normal_vector(rng, y.size()));
  return sum(elementwise_mul(y, r));
}

Tensor away_from_zero(Rng& rng, Shape shape) {
  auto n = shape_size(shape);
  std::vector<double> v(n);
  for (auto& x : v) {
    x = standard_normal(rng);
    if (std::abs(x) < 0.05) x = x < 0 ? -0.05 - std::abs(x) : 0.05 + std::abs(x);
  }
  return Tensor::parameter(std::move(shape), std::move(v));
}

}  // namespace

TEST_P(OpGradient, MatchesCentralDifferences) {
  const OpKind kind = GetParam();
  for (int trial = 0; trial < 20; ++trial) {
    Rng rng(1000 + 37 * static_cast<unsigned>(kind) + trial);
    const std::size_t n = 1 + uniform_index(rng, 4), m = 1 + uniform_index(rng, 4), k = 1 + uniform_index(rng, 4);
    std::vector<Tensor> leaves;
    OpAttrs attrs;
    switch (kind) {
      case OpKind::Leaf: leaves = {random_tensor(rng, {n, m})}; break;
      case OpKind::Matmul:
        attrs.transpose_rhs = trial % 2 == 1;
        leaves = {random_tensor(rng, {n, k}), random_tensor(rng, attrs.transpose_rhs ? Shape{m, k} : Shape{k, m})};
        break;
      case OpKind::Add:
      case OpKind::Sub:
      case OpKind::ElementwiseMul: {
        Shape rhs = trial % 3 == 0 ? Shape{n, m} : trial % 3 == 1 ? Shape{m} : Shape{1};
        leaves = {random_tensor(rng, {n, m}), random_tensor(rng, rhs)};
        break;
      }
      case OpKind::ScalarMul: attrs.scalar = standard_normal(rng); leaves = {random_tensor(rng, {n, m})}; break;
      case OpKind::MeanOverAxis: attrs.axis = trial % 2; leaves = {random_tensor(rng, {n, m})}; break;
      case OpKind::Concat: attrs.axis = trial % 2; leaves = {random_tensor(rng, {n, m}), random_tensor(rng, attrs.axis ? Shape{n, k} : Shape{k, m})}; break;
      case OpKind::SliceRows: attrs.begin = uniform_index(rng, n); attrs.end = attrs.begin + 1 + uniform_index(rng, n - attrs.begin); leaves = {random_tensor(rng, {n, m})}; break;
      case OpKind::SliceCols: attrs.begin = uniform_index(rng, m); attrs.end = attrs.begin + 1 + uniform_index(rng, m - attrs.begin); leaves = {random_tensor(rng, {n, m})}; break;
      case OpKind::GatherRows:
        for (std::size_t i = 0; i < k + 1; ++i) attrs.indices.push_back(static_cast<int>(uniform_index(rng, n)));
        leaves = {random_tensor(rng, {n, m})};
        break;
      case OpKind::Softmax: leaves = {random_tensor(rng, {n, m + 1})}; break;
      case OpKind::LayerNorm: attrs.eps = 1e-5; leaves = {random_tensor(rng, {n, m + 1})}; break;
      case OpKind::Gelu: leaves = {random_tensor(rng, {n, m}, true, 2.0)}; break;
      case OpKind::Relu: leaves = {away_from_zero(rng, {n, m})}; break;
      case OpKind::Square: leaves = {random_tensor(rng, {n, m})}; break;
      case OpKind::Sum: leaves = {random_tensor(rng, {n, m})}; break;
      case OpKind::Log: {
        std::vector<double> v(n * m);
        for (auto& x : v) x = 0.2 + 2.0 * uniform01(rng);
        leaves = {Tensor::parameter({n, m}, v)};
        break;
      }
      case OpKind::CrossEntropyWithLogits: attrs.target = uniform_index(rng, m + 1); leaves = {random_tensor(rng, {1, m + 1})}; break;
      case OpKind::Transpose: leaves = {random_tensor(rng, {n, m})}; break;
      case OpKind::Reshape: attrs.shape = {m, n}; leaves = {random_tensor(rng, {n, m})}; break;
    }
    const auto weights_seed = rng();
    auto build = [&] {
      Rng wrng(weights_seed);
      Tensor y = kind == OpKind::Leaf ? leaves[0] : apply(kind, leaves, attrs);
      return weighted_sum(y, wrng);
    };
    for (auto& leaf : leaves) {
      EXPECT_LT(gradient_error(build, leaf), 1e-4) << op_name(kind) << " trial " << trial;
    }
  }
}

INSTANTIATE_TEST_SUITE_P(AllOps, OpGradient,
                         ::testing::Values(OpKind::Leaf, OpKind::Matmul, OpKind::Add, OpKind::Sub, OpKind::ScalarMul,
                                           OpKind::ElementwiseMul, OpKind::MeanOverAxis, OpKind::Concat,
                                           OpKind::SliceRows, OpKind::SliceCols, OpKind::GatherRows, OpKind::Softmax,
                                           OpKind::LayerNorm, OpKind::Gelu, OpKind::Relu, OpKind::Square, OpKind::Sum,
                                           OpKind::Log, OpKind::CrossEntropyWithLogits, OpKind::Transpose,
                                           OpKind::Reshape),
                         [](const auto& info) { return std::string(op_name(info.param)); });
