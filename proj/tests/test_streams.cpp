#include <gtest/gtest.h>

#include <algorithm>
#include <cmath>

#include "oracles.hpp"
#include "prgcn/train.hpp"

using namespace prgcn;
using oracle::max_abs_diff;
using oracle::values;

namespace {

void randomize(Tensor& t, Rng& rng, double lo = -1.0, double hi = 1.0) {
  std::uniform_real_distribution<double> u(lo, hi);
  for (double& v : t.mutable_data()) v = u(rng);
}

void randomize_biases(MultiHeadAttention& m, Rng& rng) {
  for (Linear* l : {&m.query, &m.key, &m.value, &m.output}) randomize(l->bias, rng);
}

void randomize_norm(LayerNorm& n, Rng& rng) {
  randomize(n.gamma, rng, 0.5, 1.5);
  randomize(n.beta, rng);
}

struct ScanInputs {
  Tensor x, delta, A, B, C;
};

ScanInputs random_scan(Rng& rng, std::size_t S, std::size_t L, std::size_t D, std::size_t N) {
  return {rand_uniform({S, L, D}, rng, -1, 1), softplus(rand_uniform({S, L, D}, rng, -3, 1)),
          scale(exp(rand_uniform({D, N}, rng, -1, 1)), -1.0), rand_uniform({S, L, N}, rng, -1, 1),
          rand_uniform({S, L, N}, rng, -1, 1)};
}

// Sum over every parameter of the module of sum(out * R): a scalar with all outputs live.
std::vector<GroupCheck> check_module(const ParameterList& params, const std::function<Tensor()>& out, Rng& rng) {
  Tensor r;
  {
    const Tensor probe = out();
    r = rand_uniform(probe.shape(), rng, -1, 1);
  }
  return gradcheck(params, [&] { return sum_all(mul(out(), r)); });
}

}  // namespace

// ---------------------------------------------------------------------------
// Selective scan.

class ScanOracle : public ::testing::TestWithParam<int> {};

TEST_P(ScanOracle, EqualsNaiveRecurrence) {
  const std::uint64_t seed = static_cast<std::uint64_t>(GetParam());
  Rng rng = make_rng(seed, 61);
  const std::size_t S = 2, L = 9, D = 3, N = 4;
  const ScanInputs in = random_scan(rng, S, L, D, N);
  const Tensor y = ssm_scan(in.x, in.delta, in.A, in.B, in.C);
  const auto want = oracle::ssm_scan(values(in.x), values(in.delta), values(in.A), values(in.B), values(in.C), S, L, D, N);
  EXPECT_LT(max_abs_diff(y, want), 1e-12);
}

INSTANTIATE_TEST_SUITE_P(Seeds, ScanOracle, ::testing::Range(0, 20));

TEST(Scan, SingleStepHasNoHistory) {
  Rng rng = make_rng(1);
  const std::size_t D = 3, N = 4;
  const ScanInputs in = random_scan(rng, 1, 1, D, N);
  const Tensor y = ssm_scan(in.x, in.delta, in.A, in.B, in.C);
  for (std::size_t d = 0; d < D; ++d) {
    double want = 0.0;
    for (std::size_t n = 0; n < N; ++n) want += in.C.data()[n] * in.delta.data()[d] * in.B.data()[n] * in.x.data()[d];
    EXPECT_NEAR(y.data()[d], want, 1e-15);
  }
}

TEST(Scan, ZeroTransitionIsMemoryless) {
  Rng rng = make_rng(2);
  const std::size_t L = 6, D = 2, N = 3;
  ScanInputs in = random_scan(rng, 1, L, D, N);
  in.A = Tensor::full({D, N}, -1e6);  // exp(delta * A) underflows to exactly 0
  const Tensor y = ssm_scan(in.x, in.delta, in.A, in.B, in.C);
  for (std::size_t t = 0; t < L; ++t)
    for (std::size_t d = 0; d < D; ++d) {
      double want = 0.0;
      for (std::size_t n = 0; n < N; ++n)
        want += in.C.data()[t * N + n] * in.delta.data()[t * D + d] * in.B.data()[t * N + n] * in.x.data()[t * D + d];
      EXPECT_NEAR(y.data()[t * D + d], want, 1e-15);
    }
}

TEST(Scan, LongSequenceStaysBounded) {
  Rng rng = make_rng(3);
  const std::size_t L = 10000, D = 2, N = 3;
  const SsmBlock blk = SsmBlock::init(rng, Axis::temporal, D, N);
  const Tensor A = blk.transition();
  for (double a : A.data()) EXPECT_LT(a, 0.0);
  const Tensor x = rand_uniform({1, L, D}, rng, -1, 1);
  const Tensor delta = softplus(rand_uniform({1, L, D}, rng, -4, 2));
  const Tensor B = rand_uniform({1, L, N}, rng, -1, 1);
  double max_abar = 0.0, max_drive = 0.0;
  for (std::size_t t = 0; t < L; ++t)
    for (std::size_t d = 0; d < D; ++d) {
      const double dt = delta.data()[t * D + d];
      EXPECT_GT(dt, 0.0);
      for (std::size_t n = 0; n < N; ++n) {
        max_abar = std::max(max_abar, std::exp(dt * A.data()[d * N + n]));
        max_drive = std::max(max_drive, std::abs(dt * B.data()[t * N + n] * x.data()[t * D + d]));
      }
    }
  ASSERT_LT(max_abar, 1.0);
  // Reading out one state coordinate at a time exposes h directly.
  const double bound = max_drive / (1.0 - max_abar);
  for (std::size_t n = 0; n < N; ++n) {
    Tensor C = Tensor::zeros({1, L, N});
    for (std::size_t t = 0; t < L; ++t) C.mutable_data()[t * N + n] = 1.0;
    const Tensor h = ssm_scan(x, delta, A, B, C);
    for (double v : h.data()) EXPECT_LE(std::abs(v), bound * (1 + 1e-12));
  }
}

TEST(Scan, ShapeErrors) {
  Rng rng = make_rng(4);
  const ScanInputs in = random_scan(rng, 1, 3, 2, 2);
  EXPECT_THROW(ssm_scan(in.x, in.delta, Tensor::zeros({3, 2}), in.B, in.C), DimensionError);
  EXPECT_THROW(ssm_scan(in.x, in.delta, in.A, Tensor::zeros({1, 2, 2}), in.C), DimensionError);
}

// ---------------------------------------------------------------------------
// SSM blocks and the Mamba stream.

TEST(MambaStream, ZeroOutputProjectionsGiveIdentity) {
  Rng rng = make_rng(5);
  Stream s = make_mamba_stream(rng, 4, 3, build_skeleton(5).dfs_order());
  for (Block* b : {&s.first, &s.second}) {
    auto& blk = std::get<SsmBlock>(*b);
    zero_fill(blk.output.weight);
    zero_fill(blk.output.bias);
  }
  const Tensor x = rand_uniform({2, 3, 5, 4}, rng, -1, 1);
  EXPECT_EQ(values(s(x)), values(x));
}

TEST(MambaStream, TemporalScanIsCausal) {
  Rng rng = make_rng(6);
  const SsmBlock blk = SsmBlock::init(rng, Axis::temporal, 4, 3);
  const Tensor x = rand_uniform({1, 5, 3, 4}, rng, -1, 1);
  const Tensor full = blk(x);
  for (std::size_t T = 1; T <= 5; ++T) {
    const Tensor prefix = blk(slice(x, 1, 0, T));
    EXPECT_LT(max_abs_diff(values(prefix), values(slice(full, 1, 0, T))), 1e-14) << "T=" << T;
  }
}

TEST(MambaStream, SpatialScanFollowsJointOrder) {
  Rng rng = make_rng(7);
  const std::vector<std::size_t> order{0, 4, 5, 6, 1, 2, 3};
  const SsmBlock blk = SsmBlock::init(rng, Axis::spatial, 4, 3, order);
  SsmBlock natural = blk;
  natural.joint_order.clear();
  const Tensor x = rand_uniform({1, 2, 7, 4}, rng, -1, 1);
  // Reordering by hand then scanning in natural order must agree.
  const Tensor by_hand = index_select(natural(index_select(x, 2, order)), 2, SsmBlock::inverse(order));
  EXPECT_EQ(values(blk(x)), values(by_hand));
  EXPECT_GT(max_abs_diff(values(blk(x)), values(natural(x))), 1e-6);
}

TEST(MambaStream, AxisOrderDoesNotCommute) {
  Rng rng = make_rng(8);
  const std::size_t D = 4;
  const SsmBlock ms = SsmBlock::init(rng, Axis::spatial, D, 3), mt = SsmBlock::init(rng, Axis::temporal, D, 3);
  const Tensor x = rand_uniform({1, 4, 5, D}, rng, -1, 1);
  EXPECT_GT(max_abs_diff(values(mt(ms(x))), values(ms(mt(x)))), 1e-6);
}

TEST(MambaStream, SingleFrameInput) {
  Rng rng = make_rng(9);
  const Stream s = make_mamba_stream(rng, 4, 3, build_skeleton(5).dfs_order());
  const Tensor y = s(rand_uniform({2, 1, 5, 4}, rng, -1, 1));
  EXPECT_EQ(y.shape(), (Shape{2, 1, 5, 4}));
}

TEST(MambaStream, GradientsMatchFiniteDifferences) {
  Rng rng = make_rng(10);
  const Stream s = make_mamba_stream(rng, 4, 3, build_skeleton(4).dfs_order());
  ParameterList params;
  s.collect(params, "m");
  const Tensor x = rand_uniform({1, 3, 4, 4}, rng, -1, 1);
  for (const auto& g : check_module(params, [&] { return s(x); }, rng)) {
    EXPECT_LT(g.max_rel_error, 1e-6) << g.group << " worst " << g.worst_parameter;
  }
}

// ---------------------------------------------------------------------------
// Attention.

TEST(Attention, SingleKeyReturnsItsValue) {
  Rng rng = make_rng(11);
  const Tensor q = rand_uniform({4, 3}, rng, -1, 1), k = rand_uniform({1, 3}, rng, -1, 1),
               v = rand_uniform({1, 3}, rng, -1, 1);
  const Tensor y = attention(q, k, v);
  for (std::size_t i = 0; i < 4; ++i)
    for (std::size_t c = 0; c < 3; ++c) EXPECT_EQ(y.at({i, c}), v.at({0, c}));
}

TEST(Attention, OrthogonalQueriesAverageValues) {
  const Tensor q({2, 2}, {1, 0, 2, 0});
  const Tensor k({3, 2}, {0, 1, 0, -2, 0, 5});
  const Tensor v({3, 2}, {1, 2, 3, 4, 5, 9});
  const Tensor y = attention(q, k, v);
  for (std::size_t i = 0; i < 2; ++i) {
    EXPECT_NEAR(y.at({i, 0}), 3.0, 1e-15);
    EXPECT_NEAR(y.at({i, 1}), 5.0, 1e-15);
  }
}

TEST(Attention, SmallCaseMatchesLoop) {
  Rng rng = make_rng(12);
  const Tensor q = rand_uniform({3, 2}, rng, -1, 1), k = rand_uniform({3, 2}, rng, -1, 1),
               v = rand_uniform({3, 2}, rng, -1, 1);
  const Tensor y = attention(q, k, v);
  for (std::size_t i = 0; i < 3; ++i) {
    double s[3], z = 0.0;
    for (std::size_t j = 0; j < 3; ++j) {
      s[j] = std::exp((q.at({i, 0}) * k.at({j, 0}) + q.at({i, 1}) * k.at({j, 1})) / std::sqrt(2.0));
      z += s[j];
    }
    for (std::size_t c = 0; c < 2; ++c) {
      double want = 0.0;
      for (std::size_t j = 0; j < 3; ++j) want += s[j] / z * v.at({j, c});
      EXPECT_NEAR(y.at({i, c}), want, 1e-14);
    }
  }
}

TEST(Attention, BlockedQueriesMatchLoop) {
  // More query rows than one block, and not a multiple of it.
  const std::size_t Lq = 2 * kAttentionQueryBlock + 7, Lk = 90, d = 3;
  Rng rng = make_rng(21);
  const Tensor q = rand_uniform({2, Lq, d}, rng, -2, 2), k = rand_uniform({2, Lk, d}, rng, -2, 2),
               v = rand_uniform({2, Lk, d}, rng, -1, 1);
  const Tensor y = attention(q, k, v);
  ASSERT_EQ(y.shape(), (Shape{2, Lq, d}));
  double worst = 0.0;
  for (std::size_t b = 0; b < 2; ++b)
    for (std::size_t i = 0; i < Lq; ++i) {
      std::vector<double> s(Lk);
      double mx = -1e300, z = 0.0;
      for (std::size_t j = 0; j < Lk; ++j) {
        double dot = 0.0;
        for (std::size_t c = 0; c < d; ++c) dot += q.at({b, i, c}) * k.at({b, j, c});
        s[j] = dot / std::sqrt(static_cast<double>(d));
        mx = std::max(mx, s[j]);
      }
      for (double& e : s) z += (e = std::exp(e - mx));
      for (std::size_t c = 0; c < d; ++c) {
        double want = 0.0;
        for (std::size_t j = 0; j < Lk; ++j) want += s[j] / z * v.at({b, j, c});
        worst = std::max(worst, std::abs(y.at({b, i, c}) - want));
      }
    }
  EXPECT_LT(worst, 1e-13);
}

TEST(Attention, BlockedQueriesGradient) {
  Rng rng = make_rng(22);
  const std::size_t Lq = kAttentionQueryBlock + 5;
  ParameterList params;
  const Tensor q = rand_uniform({Lq, 2}, rng, -1, 1), k = rand_uniform({6, 2}, rng, -1, 1),
               v = rand_uniform({6, 2}, rng, -1, 1);
  for (const Tensor* t : {&q, &k, &v}) {
    Tensor p = *t;
    p.set_requires_grad(true);
    append(params, "qkv", "attention", p);
  }
  for (const auto& g : check_module(params, [&] { return attention(q, k, v); }, rng)) {
    EXPECT_LT(g.max_rel_error, 1e-6) << g.worst_parameter;
  }
}

TEST(Attention, OutputsInConvexHullOfValues) {
  for (std::uint64_t seed = 0; seed < 10; ++seed) {
    Rng rng = make_rng(seed, 13);
    const Tensor q = rand_uniform({2, 6, 4}, rng, -3, 3), k = rand_uniform({2, 7, 4}, rng, -3, 3),
                 v = rand_uniform({2, 7, 4}, rng, -1, 1);
    const Tensor y = attention(q, k, v);
    for (std::size_t b = 0; b < 2; ++b)
      for (std::size_t c = 0; c < 4; ++c) {
        double lo = 1e9, hi = -1e9;
        for (std::size_t j = 0; j < 7; ++j) {
          lo = std::min(lo, v.at({b, j, c}));
          hi = std::max(hi, v.at({b, j, c}));
        }
        for (std::size_t i = 0; i < 6; ++i) {
          EXPECT_GE(y.at({b, i, c}), lo - 1e-14);
          EXPECT_LE(y.at({b, i, c}), hi + 1e-14);
        }
      }
  }
}

TEST(Attention, DimensionMismatchRejected) {
  EXPECT_THROW(attention(Tensor::zeros({2, 3}), Tensor::zeros({2, 4}), Tensor::zeros({2, 3})), DimensionError);
  EXPECT_THROW(attention(Tensor::zeros({2, 3}), Tensor::zeros({2, 3}), Tensor::zeros({3, 3})), DimensionError);
  Rng rng = make_rng(0);
  EXPECT_THROW(MultiHeadAttention::init(rng, 6, 4), std::invalid_argument);
}

class MhaOracle : public ::testing::TestWithParam<int> {};

TEST_P(MhaOracle, MatchesNestedLoops) {
  const std::uint64_t seed = static_cast<std::uint64_t>(GetParam());
  Rng rng = make_rng(seed, 14);
  const std::size_t S = 3, Lq = 4, Lk = 5, D = 6, H = 3;
  MultiHeadAttention m = MultiHeadAttention::init(rng, D, H);
  randomize_biases(m, rng);
  const Tensor xq = rand_uniform({S, Lq, D}, rng, -1, 1), xkv = rand_uniform({S, Lk, D}, rng, -1, 1);
  EXPECT_LT(max_abs_diff(m(xq, xkv), oracle::mha(values(xq), values(xkv), S, Lq, Lk, m)), 1e-10);
}

INSTANTIATE_TEST_SUITE_P(Seeds, MhaOracle, ::testing::Range(0, 20));

// ---------------------------------------------------------------------------
// Attention blocks and stream.

namespace {

oracle::Vec attn_block_oracle(const oracle::Vec& x, std::size_t B, std::size_t T, std::size_t J, const AttnBlock& blk) {
  const std::size_t D = blk.attn.query.in_features();
  const bool temporal = blk.axis == Axis::temporal;
  const oracle::Vec seq = temporal ? oracle::swap_time_joint(x, B, T, J, D) : x;
  const std::size_t lanes = temporal ? B * J : B * T, L = temporal ? T : J;
  const oracle::Vec h = oracle::layer_norm(seq, lanes * L, blk.norm_attn);
  const oracle::Vec a = oracle::mha(h, h, lanes, L, L, blk.attn);
  oracle::Vec y(seq.size());
  for (std::size_t i = 0; i < y.size(); ++i) y[i] = seq[i] + a[i];
  oracle::Vec u = oracle::linear(oracle::layer_norm(y, lanes * L, blk.norm_ffn), lanes * L, blk.ffn.up);
  for (double& v : u) v = oracle::gelu(v);
  const oracle::Vec f = oracle::linear(u, lanes * L, blk.ffn.down);
  for (std::size_t i = 0; i < y.size(); ++i) y[i] += f[i];
  return temporal ? oracle::swap_time_joint(y, B, J, T, D) : y;
}

AttnBlock random_attn_block(Rng& rng, Axis axis, std::size_t D, std::size_t H) {
  AttnBlock b = AttnBlock::init(rng, axis, D, H);
  randomize_biases(b.attn, rng);
  randomize_norm(b.norm_attn, rng);
  randomize_norm(b.norm_ffn, rng);
  randomize(b.ffn.up.bias, rng);
  randomize(b.ffn.down.bias, rng);
  return b;
}

}  // namespace

class AttnBlockOracle : public ::testing::TestWithParam<int> {};

TEST_P(AttnBlockOracle, BothAxesMatchBruteForce) {
  const std::uint64_t seed = static_cast<std::uint64_t>(GetParam());
  Rng rng = make_rng(seed, 15);
  const std::size_t B = 2, T = 3, J = 4, D = 4;
  const Tensor x = rand_uniform({B, T, J, D}, rng, -1, 1);
  for (Axis axis : {Axis::temporal, Axis::spatial}) {
    const AttnBlock blk = random_attn_block(rng, axis, D, 2);
    EXPECT_LT(max_abs_diff(blk(x), attn_block_oracle(values(x), B, T, J, blk)), 1e-10) << axis_name(axis);
  }
}

INSTANTIATE_TEST_SUITE_P(Seeds, AttnBlockOracle, ::testing::Range(0, 5));

TEST(AttnStream, ZeroedUpdatesPassInputThrough) {
  Rng rng = make_rng(16);
  Stream s = make_attn_stream(rng, 4, 2);
  for (Block* b : {&s.first, &s.second}) {
    auto& blk = std::get<AttnBlock>(*b);
    zero_fill(blk.attn.output.weight);
    zero_fill(blk.ffn.down.weight);
  }
  const Tensor x = rand_uniform({1, 3, 5, 4}, rng, -1, 1);
  EXPECT_EQ(values(s(x)), values(x));
}

TEST(AttnStream, TemporalBlockIsJointwise) {
  Rng rng = make_rng(17);
  const AttnBlock blk = random_attn_block(rng, Axis::temporal, 4, 2);
  const Tensor x = rand_uniform({2, 4, 5, 4}, rng, -1, 1);
  const std::vector<std::size_t> perm{3, 0, 4, 1, 2};
  EXPECT_LT(max_abs_diff(values(blk(index_select(x, 2, perm))), values(index_select(blk(x), 2, perm))), 1e-15);
}

TEST(AttnStream, GradientsMatchFiniteDifferences) {
  Rng rng = make_rng(18);
  const Stream s = make_attn_stream(rng, 4, 2);
  ParameterList params;
  s.collect(params, "a");
  const Tensor x = rand_uniform({1, 3, 3, 4}, rng, -1, 1);
  for (const auto& g : check_module(params, [&] { return s(x); }, rng)) {
    EXPECT_LT(g.max_rel_error, 1e-6) << g.group << " worst " << g.worst_parameter;
  }
}

// ---------------------------------------------------------------------------
// Stream gate.

TEST(StreamGate, SaturatedGateSelectsFirstStream) {
  Rng rng = make_rng(19);
  const std::size_t D = 3;
  StreamGate gate = StreamGate::init(rng, D);
  auto w = gate.weight.mutable_data();
  for (std::size_t r = 0; r < 2 * D; ++r) {
    w[r * 2] = 1000.0;
    w[r * 2 + 1] = -1000.0;
  }
  const Tensor xm = rand_uniform({1, 2, 4, D}, rng, 0.5, 1), xa = rand_uniform({1, 2, 4, D}, rng, 0.5, 1);
  EXPECT_EQ(values(fuse_streams(xm, xa, gate)), values(xm));
}

TEST(StreamGate, EqualStreamsPassThrough) {
  Rng rng = make_rng(20);
  const StreamGate gate = StreamGate::init(rng, 4);
  const Tensor x = rand_uniform({2, 3, 5, 4}, rng, -1, 1);
  EXPECT_LT(max_abs_diff(values(fuse_streams(x, x, gate)), values(x)), 1e-15);
}

TEST(StreamGate, WeightsAreConvex) {
  for (std::uint64_t seed = 0; seed < 5; ++seed) {
    Rng rng = make_rng(seed, 21);
    StreamGate gate = StreamGate::init(rng, 4);
    randomize(gate.weight, rng, -3, 3);
    const Tensor xm = rand_uniform({2, 3, 5, 4}, rng, -1, 1), xa = rand_uniform({2, 3, 5, 4}, rng, -1, 1);
    const Tensor alpha = gate.weights(xm, xa);
    for (std::size_t p = 0; p < alpha.numel() / 2; ++p) {
      const double a0 = alpha.data()[2 * p], a1 = alpha.data()[2 * p + 1];
      EXPECT_NEAR(a0 + a1, 1.0, 1e-12);
      EXPECT_GT(a0, 0.0);
      EXPECT_GT(a1, 0.0);
    }
    const Tensor fused = fuse_streams(xm, xa, gate);
    for (std::size_t i = 0; i < fused.numel(); ++i) {
      EXPECT_GE(fused.data()[i], std::min(xm.data()[i], xa.data()[i]) - 1e-15);
      EXPECT_LE(fused.data()[i], std::max(xm.data()[i], xa.data()[i]) + 1e-15);
    }
  }
}

TEST(StreamGate, ShapeErrorsAndGradient) {
  Rng rng = make_rng(22);
  const StreamGate gate = StreamGate::init(rng, 4);
  EXPECT_THROW(fuse_streams(Tensor::zeros({1, 2, 3, 4}), Tensor::zeros({1, 2, 3, 5}), gate), DimensionError);
  EXPECT_THROW(fuse_streams(Tensor::zeros({1, 2, 3, 2}), Tensor::zeros({1, 2, 3, 2}), gate), DimensionError);
  ParameterList params;
  gate.collect(params, "g");
  const Tensor xm = rand_uniform({1, 2, 3, 4}, rng, -1, 1), xa = rand_uniform({1, 2, 3, 4}, rng, -1, 1);
  for (const auto& g : check_module(params, [&] { return fuse_streams(xm, xa, gate); }, rng)) {
    EXPECT_LT(g.max_rel_error, 1e-6) << g.group;
  }
}
