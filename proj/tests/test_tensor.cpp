#include <gtest/gtest.h>

#include <random>

#include "dwstrack/ops.hpp"
#include "dwstrack/tensor.hpp"
#include "testutil.hpp"

using namespace dwstrack;

TEST(Tensor, ShapeDataInvariant) {
  auto t = Tensor::zeros({3, 4});
  EXPECT_EQ(t.numel(), 12);
  EXPECT_THROW(Tensor::from_values({2, 2}, {1.f, 2.f, 3.f}), DimensionError);
  EXPECT_THROW(Tensor::zeros({}), DimensionError);
}

TEST(Tensor, ItemRequiresScalar) {
  auto t = Tensor::zeros({2});
  EXPECT_THROW(t.item(), DimensionError);
  EXPECT_FLOAT_EQ(Tensor::scalar(3.5f).item(), 3.5f);
}

TEST(Tensor, CopiesShareStorage) {
  auto a = Tensor::zeros({2});
  Tensor b = a;
  b.mutable_values()[0] = 7.f;
  EXPECT_FLOAT_EQ(a.values()[0], 7.f);
}

TEST(Backward, SumGivesOnes) {
  auto x = Tensor::from_values({3}, {1.f, 2.f, 3.f});
  x.set_requires_grad(true);
  Tape tape;
  {
    TapeScope<float> scope(tape);
    auto loss = sum_all(x);
    tape.backward(loss);
  }
  ASSERT_TRUE(x.has_grad());
  for (float g : x.grad()) EXPECT_FLOAT_EQ(g, 1.f);
}

TEST(Backward, SumOfSquares) {
  auto x = Tensor::from_values({2}, {1.f, 2.f});
  x.set_requires_grad(true);
  Tape tape;
  {
    TapeScope<float> scope(tape);
    auto loss = sum_all(elementwise_mul(x, x));
    tape.backward(loss);
  }
  EXPECT_FLOAT_EQ(x.grad()[0], 2.f);
  EXPECT_FLOAT_EQ(x.grad()[1], 4.f);
}

TEST(Backward, NonScalarLossIsContractError) {
  auto x = Tensor::from_values({2}, {1.f, 2.f});
  x.set_requires_grad(true);
  Tape tape;
  TapeScope<float> scope(tape);
  auto y = elementwise_mul(x, x);
  EXPECT_THROW(tape.backward(y), DimensionError);
}

TEST(Backward, RepeatedBackwardWithoutReexecutionFails) {
  auto x = Tensor::from_values({2}, {1.f, 2.f});
  x.set_requires_grad(true);
  Tape tape;
  Tensor loss;
  {
    TapeScope<float> scope(tape);
    loss = sum_all(x);
  }
  tape.backward(loss);
  EXPECT_THROW(tape.backward(loss), StateError);
}

TEST(Backward, DetachedGraphIsStateError) {
  auto x = Tensor::from_values({2}, {1.f, 2.f});
  x.set_requires_grad(true);
  Tensor loss;
  {
    Tape other;
    TapeScope<float> scope(other);
    loss = sum_all(x);
  }
  Tape tape;
  EXPECT_THROW(tape.backward(loss), StateError);
}

TEST(Backward, AccumulationIsAdditiveAcrossConsumers) {
  // y = sum(x) + sum(x): both consumers contribute, grad = 2 per element.
  auto x = Tensor::from_values({3}, {1.f, 1.f, 1.f});
  x.set_requires_grad(true);
  Tape tape;
  {
    TapeScope<float> scope(tape);
    auto loss = add(sum_all(x), sum_all(x));
    tape.backward(loss);
  }
  for (float g : x.grad()) EXPECT_FLOAT_EQ(g, 2.f);
}

TEST(Backward, NodesOffTheLossPathAreSkipped) {
  auto x = Tensor::from_values({2}, {1.f, 2.f});
  auto z = Tensor::from_values({2}, {5.f, 5.f});
  x.set_requires_grad(true);
  z.set_requires_grad(true);
  Tape tape;
  {
    TapeScope<float> scope(tape);
    auto unused = elementwise_mul(z, z);
    auto loss = sum_all(x);
    tape.backward(loss);
  }
  EXPECT_TRUE(x.has_grad());
  EXPECT_FALSE(z.has_grad());
}

TEST(Backward, NoRecordingWithoutActiveTape) {
  auto x = Tensor::from_values({2}, {1.f, 2.f});
  x.set_requires_grad(true);
  Tape tape;
  auto y = elementwise_mul(x, x);  // no scope open
  EXPECT_EQ(tape.num_nodes(), 0u);
}

TEST(Determinism, IdenticalGraphGivesBitwiseIdenticalResults) {
  auto run = [](uint64_t seed) {
    std::mt19937_64 rng(seed);
    auto x = testutil::rand_tensor<float>(rng, {4, 7}, -2, 2, true);
    auto w = testutil::rand_tensor<float>(rng, {4, 7}, -2, 2, true);
    Tape tape;
    std::vector<float> out;
    {
      TapeScope<float> scope(tape);
      auto loss = mean_all(elementwise_mul(add(x, w), sub(x, w)));
      tape.backward(loss);
    }
    out = x.grad();
    out.insert(out.end(), w.grad().begin(), w.grad().end());
    return out;
  };
  EXPECT_EQ(run(99), run(99));
}
