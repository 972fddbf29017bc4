#include <gtest/gtest.h>

#include <cmath>
#include <vector>

#include "sbreg/optim.hpp"
#include "test_util.hpp"

using namespace sbreg;
using sbreg::testing::values;

TEST(Adam, ZeroGradientLeavesParamsAndCountsStep) {
  std::vector<Tensor> params{Tensor::parameter({3}, {1, -2, 3})};
  Gradients grads;
  grads.insert(params[0].id(), Tensor::zeros({3}));
  auto state = make_adam(0.1);
  adam_step(params, grads, state);
  EXPECT_EQ(values(params[0]), (std::vector<double>{1, -2, 3}));
  EXPECT_EQ(state.step_count, 1u);
}

TEST(Adam, FirstStepMovesByLearningRate) {
  std::vector<Tensor> params{Tensor::parameter({1}, {1.0})};
  Gradients grads;
  grads.insert(params[0].id(), Tensor::constant({1}, {1.0}));
  auto state = make_adam(0.1);
  adam_step(params, grads, state);
  // mhat = 1, vhat = 1: step = lr / (1 + eps).
  EXPECT_NEAR(params[0][0], 1.0 - 0.1 / (1.0 + 1e-8), 1e-15);
  EXPECT_NEAR(params[0][0], 0.9, 1e-8);
}

TEST(Adam, IdenticalParamsGetIdenticalUpdates) {
  std::vector<Tensor> params{Tensor::parameter({2}, {0.5, -1.5}), Tensor::parameter({2}, {0.5, -1.5})};
  auto state = make_adam(0.01);
  for (int step = 0; step < 5; ++step) {
    Gradients grads;
    for (auto& p : params) grads.insert(p.id(), Tensor::constant({2}, {0.3 * step - 1.0, 2.0}));
    adam_step(params, grads, state);
  }
  EXPECT_EQ(values(params[0]), values(params[1]));
  EXPECT_EQ(state.first_moment[0].size(), params[0].size());
}

TEST(Adam, MissingGradientRejected) {
  std::vector<Tensor> params{Tensor::parameter({1}, {1.0})};
  Gradients grads;
  auto state = make_adam(0.1);
  EXPECT_THROW(adam_step(params, grads, state), std::invalid_argument);
}

TEST(Adam, MinimizesQuadratic) {
  std::vector<Tensor> params{Tensor::parameter({2}, {3.0, -4.0})};
  auto state = make_adam(0.05);
  for (int i = 0; i < 2000; ++i) {
    auto grads = backward(sum(square(params[0])));
    adam_step(params, grads, state);
  }
  EXPECT_NEAR(params[0][0], 0.0, 1e-3);
  EXPECT_NEAR(params[0][1], 0.0, 1e-3);
}

TEST(ClipGradNorm, RescalesToMaxNormAndReportsOriginal) {
  std::vector<Tensor> params{Tensor::parameter({1}, {0.0}), Tensor::parameter({1}, {0.0})};
  Gradients grads;
  grads.insert(params[0].id(), Tensor::constant({1}, {3.0}));
  grads.insert(params[1].id(), Tensor::constant({1}, {4.0}));
  EXPECT_DOUBLE_EQ(clip_grad_norm(params, grads, 1.0), 5.0);
  EXPECT_NEAR(grads.at(params[0])[0], 0.6, 1e-12);
  EXPECT_NEAR(grads.at(params[1])[0], 0.8, 1e-12);
}

TEST(ClipGradNorm, SmallGradientsUntouched) {
  std::vector<Tensor> params{Tensor::parameter({2}, {0.0, 0.0})};
  Gradients grads;
  grads.insert(params[0].id(), Tensor::constant({2}, {0.3, 0.4}));
  clip_grad_norm(params, grads, 1.0);
  EXPECT_EQ(values(grads.at(params[0])), (std::vector<double>{0.3, 0.4}));
}
