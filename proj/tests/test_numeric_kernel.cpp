#include <gtest/gtest.h>

#include <cmath>
#include <limits>

#include "fd.hpp"
#include "prgcn/ops.hpp"
#include "prgcn/random.hpp"

using namespace prgcn;

namespace {

std::vector<double> vals(const Tensor& t) { return {t.data().begin(), t.data().end()}; }

void expect_near_all(const Tensor& t, const std::vector<double>& want, double tol) {
  ASSERT_EQ(t.numel(), want.size());
  for (std::size_t i = 0; i < want.size(); ++i) EXPECT_NEAR(t.data()[i], want[i], tol) << "entry " << i;
}

Tensor uniform(Shape s, Rng& rng) { return rand_uniform(std::move(s), rng, -1.0, 1.0); }

}  // namespace

TEST(Tensor, ShapeMustMatchData) {
  EXPECT_THROW(Tensor({2, 3}, std::vector<double>(5, 0.0)), DimensionError);
  Tensor t({2, 3}, std::vector<double>(6, 1.0));
  EXPECT_EQ(t.numel(), 6u);
  EXPECT_EQ(t.at({1, 2}), 1.0);
}

TEST(Matmul, IdentityLeavesMatrix) {
  const Tensor m({2, 2}, {1, 2, 3, 4});
  expect_near_all(matmul(Tensor::identity(2), m), {1, 2, 3, 4}, 0.0);
}

TEST(Matmul, ZerosAnnihilate) {
  Rng rng = make_rng(1);
  const Tensor y = matmul(Tensor::zeros({2, 3}), uniform({3, 4}, rng));
  EXPECT_EQ(y.shape(), (Shape{2, 4}));
  expect_near_all(y, std::vector<double>(8, 0.0), 0.0);
}

TEST(Matmul, HandExpansion) {
  expect_near_all(matmul(Tensor({2, 2}, {1, 2, 3, 4}), Tensor({2, 1}, {5, 6})), {17, 39}, 0.0);
}

TEST(Matmul, ShapeMismatchNamesBothShapes) {
  try {
    matmul(Tensor::zeros({2, 3}), Tensor::zeros({4, 2}));
    FAIL() << "expected DimensionError";
  } catch (const DimensionError& e) {
    const std::string msg = e.what();
    EXPECT_NE(msg.find("[2x3]"), std::string::npos) << msg;
    EXPECT_NE(msg.find("[4x2]"), std::string::npos) << msg;
  }
}

TEST(Matmul, BatchedMatchesLoop) {
  Rng rng = make_rng(2);
  const Tensor a = uniform({3, 2, 4}, rng), b = uniform({4, 5}, rng);
  const Tensor y = matmul(a, b);
  ASSERT_EQ(y.shape(), (Shape{3, 2, 5}));
  for (std::size_t n = 0; n < 3; ++n)
    for (std::size_t i = 0; i < 2; ++i)
      for (std::size_t j = 0; j < 5; ++j) {
        double s = 0.0;
        for (std::size_t k = 0; k < 4; ++k) s += a.at({n, i, k}) * b.at({k, j});
        EXPECT_NEAR(y.at({n, i, j}), s, 1e-14);
      }
}

TEST(Softmax, UniformInput) { expect_near_all(softmax(Tensor({3}, {0, 0, 0})), {1.0 / 3, 1.0 / 3, 1.0 / 3}, 1e-15); }

TEST(Softmax, KnownValues) {
  expect_near_all(softmax(Tensor({3}, {1, 2, 3})), {0.09003057, 0.24472847, 0.66524096}, 1e-8);
}

TEST(Softmax, ShiftInvariant) {
  Rng rng = make_rng(3);
  const Tensor x = uniform({4, 6}, rng);
  const Tensor a = softmax(x, -1), b = softmax(add_scalar(x, 123.456), -1);
  for (std::size_t i = 0; i < a.numel(); ++i) EXPECT_NEAR(a.data()[i], b.data()[i], 1e-14);
}

TEST(Softmax, RowsSumToOneOnAnyAxis) {
  Rng rng = make_rng(4);
  const Tensor x = scale(uniform({3, 5, 4}, rng), 5.0);
  for (long axis : {0L, 1L, 2L}) {
    const Tensor y = softmax(x, axis);
    const Tensor s = sum(y, axis);
    for (double v : s.data()) EXPECT_NEAR(v, 1.0, 1e-12);
    for (double v : y.data()) {
      EXPECT_GT(v, 0.0);
      EXPECT_LT(v, 1.0);
    }
  }
}

TEST(Softmax, LargeLogitsStayFinite) {
  const Tensor y = softmax(Tensor({3}, {1000, 1001, 1002}));
  expect_near_all(y, {0.09003057, 0.24472847, 0.66524096}, 1e-8);
}

TEST(LayerNorm, ConstantRowCollapsesToZero) {
  expect_near_all(layer_norm(Tensor({3}, {5, 5, 5}), Tensor::full({3}, 1.0), Tensor::zeros({3})), {0, 0, 0}, 0.0);
}

TEST(LayerNorm, ZeroGammaGivesBeta) {
  Rng rng = make_rng(5);
  const Tensor y = layer_norm(uniform({4, 3}, rng), Tensor::zeros({3}), Tensor({3}, {0.5, -1, 2}));
  for (std::size_t r = 0; r < 4; ++r) expect_near_all(slice(y, 0, r, 1), {0.5, -1, 2}, 0.0);
}

TEST(LayerNorm, HandValues) {
  const double s = 1.0 / std::sqrt(2.0 / 3.0 + 1e-5);
  expect_near_all(layer_norm(Tensor({3}, {1, 2, 3}), Tensor::full({3}, 1.0), Tensor::zeros({3}), 1e-5), {-s, 0, s},
                  1e-12);
  EXPECT_NEAR(s, 1.22474, 1e-5);
}

TEST(LayerNorm, RowsAreCentred) {
  Rng rng = make_rng(6);
  const Tensor y = layer_norm(scale(uniform({10, 7}, rng), 50.0), Tensor::full({7}, 1.0), Tensor::zeros({7}));
  for (std::size_t r = 0; r < 10; ++r) {
    double m = 0.0, v = 0.0;
    for (std::size_t c = 0; c < 7; ++c) m += y.at({r, c});
    m /= 7;
    for (std::size_t c = 0; c < 7; ++c) v += (y.at({r, c}) - m) * (y.at({r, c}) - m);
    EXPECT_LT(std::abs(m), 1e-9);
    EXPECT_NEAR(v / 7, 1.0, 1e-5);
  }
}

TEST(Backward, SumGivesOnes) {
  Tensor x({3}, {1, 2, 3}, true);
  Tape tape;
  tape.backward(sum_all(x));
  EXPECT_EQ(std::vector<double>(x.grad().begin(), x.grad().end()), (std::vector<double>{1, 1, 1}));
}

TEST(Backward, SquareGivesTwoX) {
  Tensor x({3}, {1, 2, 3}, true);
  Tape tape;
  tape.backward(sum_all(mul(x, x)));
  ASSERT_TRUE(x.has_grad());
  EXPECT_EQ(std::vector<double>(x.grad().begin(), x.grad().end()), (std::vector<double>{2, 4, 6}));
}

TEST(Backward, FanOutAccumulates) {
  Tensor x({2}, {1.5, -2}, true);
  Tape tape;
  const Tensor y = add(scale(x, 3.0), add(x, mul(x, x)));
  tape.backward(sum_all(y));
  EXPECT_DOUBLE_EQ(x.grad()[0], 3 + 1 + 2 * 1.5);
  EXPECT_DOUBLE_EQ(x.grad()[1], 3 + 1 + 2 * -2.0);
}

TEST(Backward, SecondPassIsAnError) {
  Tensor x({2}, {1, 2}, true);
  Tape tape;
  const Tensor l = sum_all(x);
  tape.backward(l);
  EXPECT_THROW(tape.backward(l), TapeError);
  EXPECT_THROW(sum_all(x), TapeError);  // recording on a consumed tape
}

TEST(Backward, NonScalarLossRejected) {
  Tensor x({2}, {1, 2}, true);
  Tape tape;
  EXPECT_THROW(tape.backward(scale(x, 2.0)), DimensionError);
}

TEST(Backward, NoTapeNoRecording) {
  Tensor x({2}, {1, 2}, true);
  const Tensor y = mul(x, x);
  EXPECT_FALSE(y.requires_grad());
  EXPECT_THROW(backward(sum_all(y)), TapeError);
}

TEST(Finiteness, OverflowIsAnError) {
  EXPECT_THROW(exp(Tensor({1}, {1000.0})), NumericalError);
  const Tensor nan({1}, {std::numeric_limits<double>::quiet_NaN()});
  EXPECT_THROW(add(nan, Tensor({1}, {1.0})), NumericalError);
  EXPECT_THROW(mul(Tensor({1}, {1e200}), Tensor({1}, {1e200})), NumericalError);
}

TEST(Determinism, SameInputsSameBits) {
  Rng r1 = make_rng(9), r2 = make_rng(9);
  const Tensor a = uniform({5, 8}, r1), b = uniform({5, 8}, r2);
  EXPECT_EQ(vals(a), vals(b));
  const auto f = [](const Tensor& x) { return softmax(matmul(gelu(x), transpose(x)), -1); };
  EXPECT_EQ(vals(f(a)), vals(f(b)));
}

TEST(AdaptivePool, ContiguousNearEqualBins) {
  // 7 frames into 3 bins: [0,3), [2,5), [4,7)
  const Tensor x({7}, {0, 1, 2, 3, 4, 5, 6});
  expect_near_all(adaptive_avg_pool(x, 0, 3), {1, 3, 5}, 1e-15);
  // exact division: disjoint bins
  expect_near_all(adaptive_avg_pool(Tensor({6}, {1, 2, 3, 4, 5, 6}), 0, 3), {1.5, 3.5, 5.5}, 1e-15);
  // identity when lengths agree
  expect_near_all(adaptive_avg_pool(x, 0, 7), vals(x), 0.0);
}

TEST(Ops, ElementwiseValues) {
  const Tensor x({3}, {-1.0, 0.0, 2.0});
  expect_near_all(sigmoid(x), {1 / (1 + std::exp(1.0)), 0.5, 1 / (1 + std::exp(-2.0))}, 1e-15);
  expect_near_all(softplus(x), {std::log1p(std::exp(-1.0)), std::log(2.0), std::log1p(std::exp(2.0))}, 1e-15);
  expect_near_all(gelu(x), {-0.5 * (1 + std::erf(-1 / std::sqrt(2.0))), 0.0, 2 * 0.5 * (1 + std::erf(2 / std::sqrt(2.0)))},
                  1e-15);
  expect_near_all(rsub_scalar(1.0, x), {2, 1, -1}, 0.0);
  expect_near_all(norm_last(Tensor({2, 2}, {3, 4, 0, 0})), {5, 0}, 0.0);
}

TEST(Ops, ShapeManipulation) {
  const Tensor x({2, 3}, {0, 1, 2, 3, 4, 5});
  expect_near_all(transpose(x), {0, 3, 1, 4, 2, 5}, 0.0);
  expect_near_all(concat({x, x}, 0), {0, 1, 2, 3, 4, 5, 0, 1, 2, 3, 4, 5}, 0.0);
  expect_near_all(concat({x, slice(x, 1, 0, 1)}, 1), {0, 1, 2, 0, 3, 4, 5, 3}, 0.0);
  expect_near_all(index_select(x, 1, {2, 0}), {2, 0, 5, 3}, 0.0);
  expect_near_all(sum(x, 0), {3, 5, 7}, 0.0);
  expect_near_all(mean(x, 1), {1, 4}, 0.0);
  EXPECT_EQ(reshape(x, {3, 2}).shape(), (Shape{3, 2}));
  EXPECT_THROW(reshape(x, {4, 2}), DimensionError);
}

// Every primitive against central differences, inputs in [-1, 1], 5 seeds.
class PrimitiveGradients : public ::testing::TestWithParam<int> {};

TEST_P(PrimitiveGradients, MatchFiniteDifferences) {
  const std::uint64_t seed = static_cast<std::uint64_t>(GetParam());
  Rng rng = make_rng(seed, 77);
  auto u = [&](Shape s) { return uniform(std::move(s), rng); };
  constexpr double tol = 1e-6;
  struct Case {
    const char* name;
    std::vector<Tensor> inputs;
    fd::Fn f;
  };
  const std::vector<Case> cases = {
      {"add_broadcast", {u({2, 3, 4}), u({3, 1})}, [](auto& v) { return add(v[0], v[1]); }},
      {"sub_broadcast", {u({2, 3}), u({3})}, [](auto& v) { return sub(v[0], v[1]); }},
      {"mul_broadcast", {u({2, 1, 4}), u({3, 4})}, [](auto& v) { return mul(v[0], v[1]); }},
      {"scale", {u({5})}, [](auto& v) { return scale(v[0], -2.5); }},
      {"add_scalar", {u({5})}, [](auto& v) { return add_scalar(v[0], 0.3); }},
      {"rsub_scalar", {u({5})}, [](auto& v) { return rsub_scalar(1.0, v[0]); }},
      {"exp", {u({2, 3})}, [](auto& v) { return exp(v[0]); }},
      {"sigmoid", {u({2, 3})}, [](auto& v) { return sigmoid(v[0]); }},
      {"softplus", {u({2, 3})}, [](auto& v) { return softplus(v[0]); }},
      {"gelu", {u({2, 3})}, [](auto& v) { return gelu(v[0]); }},
      {"reshape", {u({2, 3})}, [](auto& v) { return mul(reshape(v[0], {3, 2}), reshape(v[0], {3, 2})); }},
      {"permute", {u({2, 3, 4})}, [](auto& v) { return permute(v[0], {2, 0, 1}); }},
      {"transpose", {u({3, 2, 4})}, [](auto& v) { return transpose(v[0]); }},
      {"concat", {u({2, 3}), u({2, 2})}, [](auto& v) { return concat({v[0], v[1]}, 1); }},
      {"index_select", {u({4, 3})}, [](auto& v) { return index_select(v[0], 0, {3, 1, 1, 0}); }},
      {"slice", {u({5, 3})}, [](auto& v) { return slice(v[0], 0, 1, 3); }},
      {"sum_axis", {u({2, 3, 4})}, [](auto& v) { return sum(v[0], 1); }},
      {"mean_axis", {u({2, 3, 4})}, [](auto& v) { return mean(v[0], -1, true); }},
      {"sum_all", {u({2, 3})}, [](auto& v) { return sum_all(mul(v[0], v[0])); }},
      {"mean_all", {u({2, 3})}, [](auto& v) { return mean_all(exp(v[0])); }},
      {"norm_last", {u({4, 3})}, [](auto& v) { return norm_last(v[0]); }},
      {"matmul", {u({2, 3, 4}), u({4, 2})}, [](auto& v) { return matmul(v[0], v[1]); }},
      {"matmul_batched", {u({2, 3, 4}), u({2, 4, 2})}, [](auto& v) { return matmul(v[0], v[1]); }},
      {"linear", {u({5, 3}), u({3, 4}), u({4})}, [](auto& v) { return linear(v[0], v[1], v[2]); }},
      {"softmax", {u({3, 4})}, [](auto& v) { return softmax(scale(v[0], 3.0), -1); }},
      {"softmax_axis0", {u({3, 4})}, [](auto& v) { return softmax(v[0], 0); }},
      {"layer_norm", {u({3, 5}), u({5}), u({5})}, [](auto& v) { return layer_norm(v[0], v[1], v[2]); }},
      {"adaptive_pool", {u({2, 7, 3})}, [](auto& v) { return adaptive_avg_pool(v[0], 1, 3); }},
      {"ssm_scan",
       {u({2, 5, 3}), u({2, 5, 3}), u({3, 4}), u({2, 5, 4}), u({2, 5, 4})},
       [](auto& v) { return ssm_scan(v[0], softplus(v[1]), scale(exp(v[2]), -1.0), v[3], v[4]); }},
  };
  for (const auto& c : cases) {
    Rng probe_rng = make_rng(seed, 5);
    EXPECT_LT(fd::op_grad_error(c.inputs, c.f, probe_rng), tol) << c.name << " seed " << seed;
  }
}

INSTANTIATE_TEST_SUITE_P(Seeds, PrimitiveGradients, ::testing::Values(0, 1, 2, 3, 4));
