#include <gtest/gtest.h>

#include "support.hpp"

using namespace lmsode;
using namespace lmsode::test;

TEST(Tensor, ShapeMustMatchData) {
  EXPECT_THROW(Tensor({2, 3}, std::vector<double>(5)), ShapeError);
  EXPECT_THROW(Tensor({2, 2, 2}, std::vector<double>(8)), ShapeError);
  EXPECT_NO_THROW(Tensor({2, 3}, std::vector<double>(6)));
}

TEST(Mlp, ZeroWeightsGiveZeroOutput) {
  Rng rng(1);
  MlpParams p = filled_like(make_mlp({3, 5, 2}, Activation::Tanh, Activation::Identity, rng), 0.0);
  const Tensor y = mlp_forward(p, uniform({4, 3}, rng));
  for (double v : y.data()) EXPECT_EQ(v, 0.0);
}

TEST(Mlp, IdentityLayer) {
  MlpParams p;
  p.layers.push_back({Tensor::matrix(2, 2, {1, 0, 0, 1}), Tensor::zeros({2}), Activation::Identity});
  const Tensor y = mlp_forward(p, Tensor::vector({1, 2}));
  EXPECT_EQ(y[0], 1.0);
  EXPECT_EQ(y[1], 2.0);
}

TEST(Mlp, MatchesLoopEvaluation) {
  Rng rng(7);
  MlpParams p = make_mlp({3, 6, 4}, Activation::Tanh, Activation::Tanh, rng);
  p.for_each_tensor([&](Tensor& t) { t = uniform(t.shape(), rng); });
  const Tensor x = uniform({5, 3}, rng);
  const Tensor y = mlp_forward(p, x);
  for (std::size_t r = 0; r < 5; ++r) {
    const auto ref = oracle_mlp(p, {x.at(r, 0), x.at(r, 1), x.at(r, 2)});
    for (std::size_t j = 0; j < 4; ++j) EXPECT_NEAR(y.at(r, j), ref[j], 1e-12);
  }
}

TEST(Mlp, WidthMismatchIsShapeError) {
  Rng rng(1);
  const MlpParams p = make_mlp({3, 4}, Activation::Tanh, Activation::Identity, rng);
  EXPECT_THROW(mlp_forward(p, Tensor::zeros({2, 5})), ShapeError);
}

TEST(Backward, SumOfSquares) {
  const Tensor g = tape_grad([](const Tensor& x) { return sum(mul(x, x)); }, Tensor::vector({1, -2, 3}));
  EXPECT_DOUBLE_EQ(g[0], 2.0);
  EXPECT_DOUBLE_EQ(g[1], -4.0);
  EXPECT_DOUBLE_EQ(g[2], 6.0);
}

TEST(Backward, SoftmaxSumIsConstant) {
  Rng rng(3);
  const Tensor g = tape_grad([](const Tensor& x) { return sum(softmax(x)); }, uniform({3, 4}, rng));
  for (double v : g.data()) EXPECT_NEAR(v, 0.0, 1e-15);
}

TEST(Backward, NonScalarLossIsContractError) {
  Tape tape;
  const Tensor x = tape.leaf(Tensor::vector({1, 2}));
  EXPECT_THROW(tape.backward(mul(x, x)), ContractError);
}

TEST(Backward, TapeIsConsumed) {
  Tape tape;
  const Tensor x = tape.leaf(Tensor::vector({1, 2}));
  const Tensor l = sum(x);
  tape.backward(l);
  EXPECT_TRUE(tape.consumed());
  EXPECT_THROW(tape.backward(l), ContractError);
}

TEST(Backward, UnreachableLeafGetsZeros) {
  Tape tape;
  const Tensor x = tape.leaf(Tensor::vector({1, 2}));
  const Tensor y = tape.leaf(Tensor::vector({3, 4}));
  const Gradients g = tape.backward(sum(x));
  EXPECT_EQ(g.wrt(y)[0], 0.0);
  EXPECT_EQ(g.wrt(y)[1], 0.0);
}

TEST(FiniteDiff, Quadratic) {
  const Tensor g = finite_diff_grad([](const Tensor& t) { return t[0] * t[0]; }, Tensor::scalar(3.0), 1e-4);
  EXPECT_NEAR(g[0], 6.0, 1e-7);
}

TEST(FiniteDiff, Linear) {
  const Tensor g = finite_diff_grad([](const Tensor& t) { return 2.5 * t[0]; }, Tensor::scalar(-1.0), 1e-3);
  EXPECT_NEAR(g[0], 2.5, 1e-12);
}

TEST(FiniteDiff, NonPositiveStepRejected) {
  EXPECT_THROW(finite_diff_grad([](const Tensor& t) { return t[0]; }, Tensor::scalar(0.0), 0.0), ContractError);
}

TEST(FiniteDiff, AgreesWithBackwardOnMlpLoss) {
  Rng rng(11);
  const MlpParams p = make_mlp({3, 8, 2}, Activation::Tanh, Activation::Identity, rng);
  const Tensor x = uniform({4, 3}, rng);
  const Tensor w0 = p.layers[0].weight;
  auto loss = [&](const Tensor& w) {
    MlpParams q = p;
    q.layers[0].weight = w;
    return sum(square(mlp_forward(q, x)));
  };
  EXPECT_LT(grad_check(loss, w0), 1e-4);
}

// Every differentiable primitive against central differences on [-1, 1] inputs.
class PrimitiveGrad : public ::testing::Test {
 protected:
  Rng rng{2024};
  Tensor a = uniform({3, 4}, rng);
  Tensor b = uniform({3, 4}, rng);
  Tensor w = uniform({4, 5}, rng);
  Tensor pos = uniform({3, 4}, rng, 0.2, 1.0);
  Tensor probe = uniform({3, 4}, rng);  // fixed weighting so sums are not symmetric

  void check(const std::function<Tensor(const Tensor&)>& f, const Tensor& x) { EXPECT_LT(grad_check(f, x), 1e-4); }
};

TEST_F(PrimitiveGrad, MatMul) {
  const Tensor p = uniform({3, 5}, rng);
  check([&](const Tensor& x) { return sum(mul(matmul(x, w), p)); }, a);
  check([&](const Tensor& x) { return sum(mul(matmul(a, x), p)); }, w);
  const Tensor p44 = uniform({4, 4}, rng);
  check([&](const Tensor& x) { return sum(mul(matmul(x, a, true), p44)); }, b);
  const Tensor wt = uniform({5, 4}, rng);
  check([&](const Tensor& x) { return sum(mul(matmul(a, x, false, true), p)); }, wt);
  check([&](const Tensor& x) { return sum(matmul(x, w)); }, Tensor::vector({0.1, -0.3, 0.5, 0.7}));
}

TEST_F(PrimitiveGrad, Elementwise) {
  check([&](const Tensor& x) { return sum(mul(add(x, b), probe)); }, a);
  check([&](const Tensor& x) { return sum(mul(sub(b, x), probe)); }, a);
  check([&](const Tensor& x) { return sum(mul(mul(x, b), probe)); }, a);
  check([&](const Tensor& x) { return sum(mul(scale(x, -1.7), probe)); }, a);
  check([&](const Tensor& x) { return sum(mul(add_scalar(x, 0.3), probe)); }, a);
  check([&](const Tensor& x) { return sum(mul(tanh(x), probe)); }, a);
  check([&](const Tensor& x) { return sum(mul(relu(add_scalar(x, 0.05)), probe)); }, a);
  check([&](const Tensor& x) { return sum(mul(exp(x), probe)); }, a);
  check([&](const Tensor& x) { return sum(mul(log(x), probe)); }, pos);
  check([&](const Tensor& x) { return sum(mul(square(x), probe)); }, a);
}

TEST_F(PrimitiveGrad, Reductions) {
  check([&](const Tensor& x) { return square(sum(x)); }, a);
  check([&](const Tensor& x) { return square(mean(x)); }, a);
  check([&](const Tensor& x) { return sum(square(sum_last(x))); }, a);
}

TEST_F(PrimitiveGrad, Structural) {
  const Tensor p38 = uniform({3, 8}, rng), p43 = uniform({4, 3}, rng);
  check([&](const Tensor& x) { return sum(square(concat({x, b}, 0))); }, a);
  check([&](const Tensor& x) { return sum(mul(concat({b, x}, 1), p38)); }, a);
  check([&](const Tensor& x) { return sum(square(slice(x, 1, 1, 3))); }, a);
  check([&](const Tensor& x) { return sum(square(slice(x, 0, 1, 3))); }, a);
  check([&](const Tensor& x) { return sum(square(gather_rows(x, {2, 0, 2}))); }, a);
  check([&](const Tensor& x) { return sum(mul(softmax(x), probe)); }, a);
  check([&](const Tensor& x) { return sum(square(add_bias(a, x))); }, Tensor::vector({0.1, 0.2, -0.3, 0.4}));
  check([&](const Tensor& x) { return sum(mul(reshape(x, {4, 3}), p43)); }, a);
}

TEST(Softmax, RowsAreDistributions) {
  Rng rng(5);
  const Tensor s = softmax(uniform({6, 9}, rng, -30.0, 30.0));
  for (std::size_t r = 0; r < 6; ++r) {
    double z = 0.0;
    for (std::size_t c = 0; c < 9; ++c) {
      EXPECT_GE(s.at(r, c), 0.0);
      z += s.at(r, c);
    }
    EXPECT_NEAR(z, 1.0, 1e-12);
  }
}

TEST(Softmax, MaskedEntriesAndFullyMaskedRow) {
  const double inf = std::numeric_limits<double>::infinity();
  const Tensor s = softmax(Tensor::matrix(1, 3, {0.0, -inf, 0.0}));
  EXPECT_EQ(s[1], 0.0);
  EXPECT_DOUBLE_EQ(s[0], 0.5);
  EXPECT_THROW(softmax(Tensor::matrix(1, 2, {-inf, -inf})), ContractError);
}

TEST(Tape, RecordingDoesNotChangeValues) {
  Rng rng(9);
  const MlpParams p = make_mlp({4, 7, 3}, Activation::Tanh, Activation::Identity, rng);
  const Tensor x = uniform({5, 4}, rng);
  const Tensor plain = softmax(mlp_forward(p, x));
  Tape tape;
  const Tensor taped = softmax(mlp_forward(attach(tape, p), tape.leaf(x)));
  ASSERT_EQ(plain.size(), taped.size());
  for (std::size_t i = 0; i < plain.size(); ++i) EXPECT_EQ(plain[i], taped[i]);
}

TEST(Params, FlattenRoundTrip) {
  Rng rng(4);
  const MlpParams p = make_mlp({3, 4, 2}, Activation::Relu, Activation::Identity, rng);
  const auto flat = flatten(p);
  EXPECT_EQ(flat.size(), parameter_count(p));
  EXPECT_EQ(flat.size(), 3u * 4 + 4 + 4 * 2 + 2);
  const MlpParams q = unflatten(p, flat);
  EXPECT_EQ(flatten(q), flat);
  EXPECT_THROW(unflatten(p, std::vector<double>(flat.size() + 1)), ShapeError);
}
