#include <gtest/gtest.h>

#include <cmath>
#include <random>
#include <sstream>

#include "pwclo/gradsuite.hpp"
#include "pwclo/tensor.hpp"

using namespace pwclo::ad;

namespace {

Tensor random_tensor(Shape s, std::uint64_t seed) {
  std::mt19937_64 rng(seed);
  std::uniform_real_distribution<double> u(-1.0, 1.0);
  Tensor t(std::move(s));
  for (std::size_t i = 0; i < t.size(); ++i) t[i] = u(rng);
  return t;
}

}  // namespace

TEST(Tensor, ShapeAndFill) {
  Tensor t(Shape{2, 3}, 1.5);
  EXPECT_EQ(t.rank(), 2u);
  EXPECT_EQ(t.size(), 6u);
  EXPECT_EQ(t.dim(1), 3u);
  EXPECT_DOUBLE_EQ(t.at(1, 2), 1.5);
  EXPECT_THROW(Tensor(Shape{2, 2}, std::vector<double>{1, 2, 3}), ShapeError);
  EXPECT_THROW(t.item(), ShapeError);
  EXPECT_DOUBLE_EQ(Tensor::scalar(4.0).item(), 4.0);
}

TEST(Tensor, ElementwiseBroadcast) {
  Tape tape;
  Var a = tape.leaf(Tensor::matrix(2, 3, {1, 2, 3, 4, 5, 6}));
  Var b = tape.leaf(Tensor::vector({10, 20, 30}));
  const Tensor& c = add(a, b).value();
  EXPECT_EQ(c, Tensor::matrix(2, 3, {11, 22, 33, 14, 25, 36}));
  Var col = tape.leaf(Tensor::matrix(2, 1, {2, 3}));
  EXPECT_EQ(mul(a, col).value(), Tensor::matrix(2, 3, {2, 4, 6, 12, 15, 18}));
  Var bad = tape.leaf(Tensor::vector({1, 2}));
  EXPECT_THROW(add(a, bad), ShapeError);
}

TEST(Tensor, MatmulMatchesNaiveProduct) {
  const Tensor a = random_tensor({5, 7}, 1), b = random_tensor({7, 4}, 2);
  Tape tape;
  const Tensor c = matmul(tape.leaf(a), tape.leaf(b)).value();
  for (std::size_t i = 0; i < 5; ++i)
    for (std::size_t j = 0; j < 4; ++j) {
      double s = 0;
      for (std::size_t k = 0; k < 7; ++k) s += a.at(i, k) * b.at(k, j);
      EXPECT_NEAR(c.at(i, j), s, 1e-12);
    }
  EXPECT_THROW(matmul(tape.leaf(a), tape.leaf(a)), ShapeError);
}

TEST(Tensor, BatchedMatmulBroadcastsRhs) {
  const Tensor a = random_tensor({3, 2, 4}, 3), b = random_tensor({4, 5}, 4);
  Tape tape;
  const Tensor c = matmul(tape.leaf(a), tape.leaf(b)).value();
  ASSERT_EQ(c.shape(), (Shape{3, 2, 5}));
  for (std::size_t n = 0; n < 3; ++n)
    for (std::size_t i = 0; i < 2; ++i)
      for (std::size_t j = 0; j < 5; ++j) {
        double s = 0;
        for (std::size_t k = 0; k < 4; ++k) s += a[n * 8 + i * 4 + k] * b.at(k, j);
        EXPECT_NEAR(c[n * 10 + i * 5 + j], s, 1e-12);
      }
}

TEST(Tensor, SoftmaxColumnsSumToOne) {
  Tape tape;
  const Tensor x = random_tensor({6, 3}, 5);
  const Tensor y = softmax(tape.leaf(x), 0).value();
  for (std::size_t c = 0; c < 3; ++c) {
    double denom = 0, total = 0;
    for (std::size_t r = 0; r < 6; ++r) denom += std::exp(x.at(r, c));
    for (std::size_t r = 0; r < 6; ++r) {
      EXPECT_NEAR(y.at(r, c), std::exp(x.at(r, c)) / denom, 1e-15);
      total += y.at(r, c);
    }
    EXPECT_NEAR(total, 1.0, 1e-15);
  }
}

TEST(Tensor, SoftmaxIsStableForLargeLogits) {
  Tape tape;
  const Tensor y = softmax(tape.leaf(Tensor::matrix(2, 1, {1000.0, 999.0})), 0).value();
  EXPECT_NEAR(y[0], 1.0 / (1.0 + std::exp(-1.0)), 1e-15);
  EXPECT_TRUE(std::isfinite(y[1]));
}

TEST(Tensor, ReductionsRemoveAxis) {
  Tape tape;
  Var x = tape.leaf(Tensor(Shape{2, 3, 2}, std::vector<double>{1, 2, 3, 4, 5, 6, 7, 8, 9, 10, 11, 12}));
  EXPECT_EQ(sum(x, 1).value(), Tensor::matrix(2, 2, {9, 12, 27, 30}));
  EXPECT_EQ(max(x, 1).value(), Tensor::matrix(2, 2, {5, 6, 11, 12}));
  EXPECT_DOUBLE_EQ(sum_all(x).value().item(), 78.0);
}

TEST(Tensor, MaxSendsGradientToFirstArgmax) {
  Tape tape;
  Var x = tape.leaf(Tensor::matrix(3, 1, {2.0, 2.0, 1.0}));
  tape.backward(sum_all(max(x, 0)));
  EXPECT_EQ(tape.grad(x), Tensor::matrix(3, 1, {1.0, 0.0, 0.0}));
}

TEST(Tensor, ConcatSliceGatherRepeat) {
  Tape tape;
  Var a = tape.leaf(Tensor::matrix(2, 1, {1, 2}));
  Var b = tape.leaf(Tensor::matrix(2, 2, {3, 4, 5, 6}));
  EXPECT_EQ(concat({a, b}, 1).value(), Tensor::matrix(2, 3, {1, 3, 4, 2, 5, 6}));
  EXPECT_EQ(slice(b, 1, 1, 2).value(), Tensor::matrix(2, 1, {4, 6}));
  const std::vector<std::size_t> idx{1, 1, 0};
  EXPECT_EQ(gather_rows(b, idx).value(), Tensor::matrix(3, 2, {5, 6, 5, 6, 3, 4}));
  EXPECT_EQ(repeat_rows(a, 2).value(), Tensor::matrix(4, 1, {1, 1, 2, 2}));
}

TEST(Tensor, GatherScatterAddsGradient) {
  Tape tape;
  Var b = tape.leaf(Tensor::matrix(2, 2, {3, 4, 5, 6}));
  const std::vector<std::size_t> idx{1, 1, 0};
  tape.backward(sum_all(gather_rows(b, idx)));
  EXPECT_EQ(tape.grad(b), Tensor::matrix(2, 2, {1, 1, 2, 2}));
}

TEST(Tensor, NormRowsGradientZeroAtOrigin) {
  Tape tape;
  Var x = tape.leaf(Tensor::matrix(2, 3, {0, 0, 0, 3, 4, 0}));
  Var n = norm_rows(x);
  EXPECT_EQ(n.value(), Tensor::matrix(2, 1, {0, 5}));
  tape.backward(sum_all(n));
  EXPECT_EQ(tape.grad(x), Tensor::matrix(2, 3, {0, 0, 0, 0.6, 0.8, 0}));
}

TEST(Tensor, QuatToRotmatIsOrthonormal) {
  Tape tape;
  const Tensor r = quat_to_rotmat(tape.leaf(Tensor::matrix(1, 4, {0.9, 0.3, -0.2, 0.5}))).value();
  for (std::size_t i = 0; i < 3; ++i)
    for (std::size_t j = 0; j < 3; ++j) {
      double d = 0;
      for (std::size_t k = 0; k < 3; ++k) d += r.at(k, i) * r.at(k, j);
      EXPECT_NEAR(d, i == j ? 1.0 : 0.0, 1e-14);
    }
}

TEST(Tensor, BackwardRequiresScalarRoot) {
  Tape tape;
  Var x = tape.leaf(Tensor::vector({1, 2}));
  EXPECT_THROW(tape.backward(x), ShapeError);
}

TEST(Tensor, GradientAccumulatesOverFanOut) {
  Tape tape;
  Var x = tape.leaf(Tensor::scalar(3.0));
  tape.backward(add(mul(x, x), x));  // d/dx (x^2 + x) = 2x + 1
  EXPECT_DOUBLE_EQ(tape.grad(x).item(), 7.0);
}

TEST(ParameterStore, GradientsReportedForUnreachedTrainables) {
  ParameterStore store;
  store.add("a", Tensor::scalar(2.0));
  store.add("b", Tensor::scalar(5.0));
  store.add("frozen", Tensor::scalar(1.0), false);
  EXPECT_THROW(store.add("a", Tensor::scalar(0.0)), std::invalid_argument);
  Tape tape;
  Var a = tape.parameter(store, "a");
  Var f = tape.parameter(store, "frozen");
  auto g = tape.backward(mul(a, f), store);
  EXPECT_DOUBLE_EQ(g.at("a").item(), 1.0);
  EXPECT_DOUBLE_EQ(g.at("b").item(), 0.0);
  EXPECT_EQ(g.count("frozen"), 0u);
  EXPECT_EQ(store.count_trainable(), 2u);
}

TEST(ParameterStore, CheckpointRoundTripIsBitExact) {
  ParameterStore store;
  store.add("w", random_tensor({3, 4}, 9));
  store.add("b", Tensor::vector({1.0 / 3.0, -0.0, 1e-300}), false);
  store.add("s", Tensor::scalar(-2.5));
  std::stringstream ss;
  write_parameters(ss, store);
  ParameterStore back = read_parameters(ss);
  ASSERT_EQ(back.size(), store.size());
  for (const auto& [name, p] : store) {
    EXPECT_EQ(back.get(name).value, p.value) << name;
    EXPECT_EQ(back.get(name).trainable, p.trainable) << name;
  }
}

TEST(ParameterStore, TruncatedCheckpointRejected) {
  ParameterStore store;
  store.add("w", random_tensor({8}, 1));
  std::stringstream ss;
  write_parameters(ss, store);
  const std::string s = ss.str();
  for (std::size_t cut : {std::size_t{0}, std::size_t{5}, s.size() / 2, s.size() - 3}) {
    std::istringstream in(s.substr(0, cut));
    EXPECT_ANY_THROW(read_parameters(in)) << cut;
  }
}

TEST(GradCheck, DiscrepancyUsesAbsoluteFloor) {
  EXPECT_DOUBLE_EQ(gradient_discrepancy(1e-10, 3e-10, 1e-8), 2e-10);
  EXPECT_NEAR(gradient_discrepancy(2.0, 2.002, 1e-8), 0.001 / 1.001, 1e-12);
}

TEST(GradCheck, KinkJudgedAgainstOneSidedSlope) {
  // relu at exactly 0: the central difference is 0.5, the backward pass gives 0.
  const auto r = check_input_gradients(
      "relu_kink", [](Tape&, const std::vector<Var>& x) { return sum_all(relu(x[0])); },
      {Tensor::vector({0.0, 0.5, -0.5})});
  EXPECT_EQ(r.kinks, 1u);
  EXPECT_TRUE(r.passed(1e-4)) << r.worst_location;
}

// Every tensor-core op against central differences.
class TensorOpGradient : public ::testing::TestWithParam<std::string> {};

TEST_P(TensorOpGradient, MatchesFiniteDifferencesAtFiveSeeds) {
  for (std::uint64_t seed = 1; seed <= 5; ++seed) {
    pwclo::gradsuite::SuiteOptions so;
    so.seed = seed;
    so.include_end_to_end = false;
    const auto outcomes = pwclo::gradsuite::run(pwclo::gradsuite::default_suite(so), GetParam());
    ASSERT_EQ(outcomes.size(), 1u);
    EXPECT_TRUE(outcomes[0].passed()) << "seed " << seed << ": " << outcomes[0].result.max_error << " at "
                                      << outcomes[0].result.worst_location;
  }
}

INSTANTIATE_TEST_SUITE_P(Ops, TensorOpGradient,
                         ::testing::Values("add", "sub", "mul", "div", "relu", "exp", "neg", "abs", "scale", "matmul",
                                           "matmul_batched", "transpose", "reshape", "softmax", "softmax_axis1", "sum",
                                           "max", "sum_all", "concat", "slice", "gather_rows", "repeat_rows",
                                           "norm_rows", "quat_mul", "quat_to_rotmat"));

TEST(GradCheck, BrokenGradientIsDetected) {
  pwclo::gradsuite::SuiteOptions so;
  so.include_end_to_end = false;
  so.inject_broken = true;
  const auto outcomes = pwclo::gradsuite::run(pwclo::gradsuite::default_suite(so), "broken_square");
  ASSERT_EQ(outcomes.size(), 1u);
  EXPECT_FALSE(outcomes[0].passed());
  EXPECT_GT(outcomes[0].result.max_error, 0.1);
}
