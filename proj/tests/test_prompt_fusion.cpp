#include "test_support.hpp"
#include "ultraad/error.hpp"
#include "ultraad/prompt_fusion.hpp"

#include <gtest/gtest.h>

#include <cmath>

namespace ultraad {
namespace {

using testing_support::random_matrix;
using testing_support::random_unit_rows;
using testing_support::TempDir;

MiniNetParams random_mini_net(std::mt19937_64& rng, int dim) {
  MiniNetParams p = MiniNetParams::identity_init(dim, rng);
  p.b1 = random_matrix(rng, 1, p.b1.cols(), 0.3);
  p.w2 = random_matrix(rng, p.w2.rows(), dim, 0.3);
  p.b2 = random_matrix(rng, 1, dim, 0.3);
  return p;
}

FusionParams random_fusion(std::mt19937_64& rng, int dim, int heads) {
  FusionParams p = FusionParams::init(dim, heads, rng);
  p.w_o = random_matrix(rng, dim, dim, 0.5);
  return p;
}

// Textbook multi-head attention written with explicit loops.
Matrix naive_attention(const Matrix& wp, const Matrix& patches, const FusionParams& p,
                       std::vector<Matrix>* attention = nullptr) {
  const int D = static_cast<int>(wp.cols());
  const int M = p.heads;
  const int d = D / M;
  const int n = static_cast<int>(patches.rows());
  Matrix concat = Matrix::Zero(2, D);
  for (int m = 0; m < M; ++m) {
    Matrix Q = Matrix::Zero(2, d), K = Matrix::Zero(n, d), V = Matrix::Zero(n, d);
    for (int j = 0; j < d; ++j) {
      for (int k = 0; k < D; ++k) {
        for (int r = 0; r < 2; ++r) Q(r, j) += wp(r, k) * p.w_q(k, m * d + j);
        for (int r = 0; r < n; ++r) {
          K(r, j) += patches(r, k) * p.w_k(k, m * d + j);
          V(r, j) += patches(r, k) * p.w_v(k, m * d + j);
        }
      }
    }
    Matrix A(2, n);
    for (int r = 0; r < 2; ++r) {
      double mx = -INFINITY;
      for (int c = 0; c < n; ++c) {
        double s = 0.0;
        for (int j = 0; j < d; ++j) s += Q(r, j) * K(c, j);
        A(r, c) = p.scale_scores ? s / std::sqrt(static_cast<double>(d)) : s;
        mx = std::max(mx, A(r, c));
      }
      double z = 0.0;
      for (int c = 0; c < n; ++c) z += (A(r, c) = std::exp(A(r, c) - mx));
      for (int c = 0; c < n; ++c) A(r, c) /= z;
    }
    if (attention) attention->push_back(A);
    for (int r = 0; r < 2; ++r) {
      for (int j = 0; j < d; ++j) {
        for (int c = 0; c < n; ++c) concat(r, m * d + j) += A(r, c) * V(c, j);
      }
    }
  }
  Matrix out = p.out_proj ? Matrix(concat * p.w_o) : concat;
  if (p.residual) out += wp;
  for (int r = 0; r < 2; ++r) out.row(r) /= out.row(r).norm();
  return out;
}

TEST(MiniNet, IdentityAtInit) {
  std::mt19937_64 rng(1);
  const MiniNetParams p = MiniNetParams::identity_init(16, rng);
  EXPECT_EQ(p.w1.cols(), 4);
  const RowVector f = random_unit_rows(rng, 1, 16);
  EXPECT_TRUE(mini_net(f, p).isApprox(f, 1e-15));
}

TEST(MiniNet, Deterministic) {
  std::mt19937_64 rng(2);
  const MiniNetParams p = random_mini_net(rng, 16);
  const RowVector f = random_unit_rows(rng, 1, 16);
  EXPECT_EQ(mini_net(f, p), mini_net(f, p));
  EXPECT_NEAR(mini_net(f, p).norm(), 1.0, 1e-12);
}

TEST(MiniNet, RejectsNonFiniteInput) {
  std::mt19937_64 rng(3);
  const MiniNetParams p = MiniNetParams::identity_init(8, rng);
  RowVector f = RowVector::Ones(8);
  f[2] = NAN;
  EXPECT_THROW(mini_net(f, p), ValidationError);
}

TEST(MiniNet, GradientMatchesFiniteDifferences) {
  std::mt19937_64 rng(4);
  const MiniNetParams p = random_mini_net(rng, 12);
  const Matrix f = random_unit_rows(rng, 1, 12);
  const Matrix probe = random_matrix(rng, 12, 1);
  std::vector<Matrix> params{p.w1, p.b1, p.w2, p.b2};
  auto loss = [&](const std::vector<Matrix>& ps, ad::Tape& tape, std::vector<ad::Var>* out) {
    std::vector<ad::Var> v;
    for (const auto& m : ps) v.push_back(tape.parameter(m));
    if (out) *out = v;
    return ad::matmul(graph::mini_net(tape.constant(f), v[0], v[1], v[2], v[3]), tape.constant(probe));
  };
  ad::Tape tape;
  std::vector<ad::Var> vars;
  tape.backward(loss(params, tape, &vars));
  const double eps = 1e-5;
  double worst = 0.0;
  for (std::size_t k = 0; k < params.size(); ++k) {
    for (Eigen::Index i = 0; i < params[k].size(); ++i) {
      auto plus = params, minus = params;
      plus[k].data()[i] += eps;
      minus[k].data()[i] -= eps;
      ad::Tape t1(false), t2(false);
      const double num = (loss(plus, t1, nullptr).scalar() - loss(minus, t2, nullptr).scalar()) / (2 * eps);
      const double a = tape.grad(vars[k]).data()[i];
      worst = std::max(worst, std::abs(a - num) / std::max({std::abs(a), std::abs(num), 1e-8}));
    }
  }
  EXPECT_LE(worst, 1e-4);
}

TEST(ConditionPrompts, ZeroMapLeavesPromptsUnchanged) {
  std::mt19937_64 rng(5);
  const RowVector wn = random_unit_rows(rng, 1, 8), wa = random_unit_rows(rng, 1, 8);
  PromptState s = PromptState::init(wn, wa);
  s.u = random_matrix(rng, 1, 8);
  auto [n, a] = condition_prompts(s, random_unit_rows(rng, 1, 8));
  EXPECT_TRUE(n.isApprox(wn, 1e-15));
  EXPECT_TRUE(a.isApprox(wa, 1e-15));
}

TEST(ConditionPrompts, CancellationLeavesPromptsUnchanged) {
  std::mt19937_64 rng(6);
  const RowVector wn = random_unit_rows(rng, 1, 8), wa = random_unit_rows(rng, 1, 8);
  const RowVector f = random_unit_rows(rng, 1, 8);
  PromptState s = PromptState::init(wn, wa);
  s.u = -f;
  s.cond_w = Matrix::Identity(8, 8);
  auto [n, a] = condition_prompts(s, f);
  EXPECT_TRUE(n.isApprox(wn, 1e-14));
  EXPECT_TRUE(a.isApprox(wa, 1e-14));
}

TEST(ConditionPrompts, OutputsAreUnitNorm) {
  std::mt19937_64 rng(7);
  for (int trial = 0; trial < 20; ++trial) {
    PromptState s = PromptState::init(random_unit_rows(rng, 1, 8), random_unit_rows(rng, 1, 8));
    s.u = random_matrix(rng, 1, 8);
    s.cond_w = random_matrix(rng, 8, 8, 0.3);
    s.cond_b = random_matrix(rng, 1, 8, 0.3);
    auto [n, a] = condition_prompts(s, random_unit_rows(rng, 1, 8));
    EXPECT_NEAR(n.norm(), 1.0, 1e-6);
    EXPECT_NEAR(a.norm(), 1.0, 1e-6);
  }
}

TEST(ConditionPrompts, DimensionMismatch) {
  std::mt19937_64 rng(8);
  const PromptState s = PromptState::init(random_unit_rows(rng, 1, 8), random_unit_rows(rng, 1, 8));
  EXPECT_THROW(condition_prompts(s, random_unit_rows(rng, 1, 6)), Error);
}

TEST(EnsemblePrototypes, ZeroPromptsPassThrough) {
  std::mt19937_64 rng(9);
  const RowVector n = random_unit_rows(rng, 1, 8), a = random_unit_rows(rng, 1, 8);
  const Matrix w = ensemble_prototypes(n, a, Matrix::Zero(3, 8));
  EXPECT_TRUE(w.row(0).isApprox(n, 1e-15));
  EXPECT_TRUE(w.row(1).isApprox(a, 1e-15));
}

TEST(EnsemblePrototypes, TwoClassesUseSingleAbnormalPrompt) {
  std::mt19937_64 rng(10);
  const RowVector n = random_unit_rows(rng, 1, 8), a = random_unit_rows(rng, 1, 8);
  const Matrix P = random_unit_rows(rng, 2, 8);
  const Matrix w = ensemble_prototypes(n, a, P);
  EXPECT_TRUE(w.row(1).isApprox(normalized(RowVector(a + P.row(1))), 1e-14));
}

TEST(EnsemblePrototypes, MatchesHandComputedMean) {
  std::mt19937_64 rng(11);
  const RowVector n = random_unit_rows(rng, 1, 6), a = random_unit_rows(rng, 1, 6);
  const Matrix P = random_unit_rows(rng, 3, 6);
  const Matrix w = ensemble_prototypes(n, a, P);
  RowVector r0(6), r1(6);
  for (int i = 0; i < 6; ++i) {
    r0[i] = n[i] + P(0, i);
    r1[i] = a[i] + (P(1, i) + P(2, i)) / 2.0;
  }
  EXPECT_NEAR((w.row(0) - r0 / r0.norm()).cwiseAbs().maxCoeff(), 0.0, 1e-6);
  EXPECT_NEAR((w.row(1) - r1 / r1.norm()).cwiseAbs().maxCoeff(), 0.0, 1e-6);
}

TEST(EnsemblePrototypes, NeedsTwoClasses) {
  std::mt19937_64 rng(12);
  EXPECT_THROW(ensemble_prototypes(random_unit_rows(rng, 1, 4), random_unit_rows(rng, 1, 4), Matrix::Ones(1, 4)),
               ValidationError);
}

TEST(CrossAttention, SinglePatchAttendsFully) {
  std::mt19937_64 rng(13);
  FusionParams p = random_fusion(rng, 8, 2);
  p.residual = false;
  p.w_o = Matrix::Identity(8, 8);
  const Matrix wp = random_unit_rows(rng, 2, 8);
  const Matrix patch = random_unit_rows(rng, 1, 8);
  const FusionResult r = cross_attention_fuse(wp, patch, p);
  for (const auto& a : r.attention) EXPECT_DOUBLE_EQ(a(0, 0), 1.0);
  const RowVector v = normalized(RowVector(patch * p.w_v));
  EXPECT_TRUE(r.fused.row(0).isApprox(v, 1e-12));
  EXPECT_TRUE(r.fused.row(1).isApprox(v, 1e-12));
}

TEST(CrossAttention, ZeroOutputProjectionIsPureResidual) {
  std::mt19937_64 rng(14);
  FusionParams p = FusionParams::init(8, 4, rng);
  const Matrix wp = random_unit_rows(rng, 2, 8);
  EXPECT_TRUE(cross_attention_fuse(wp, random_unit_rows(rng, 9, 8), p).fused.isApprox(wp, 1e-15));
}

TEST(CrossAttention, MatchesNaiveLoops) {
  std::mt19937_64 rng(15);
  for (int trial = 0; trial < 10; ++trial) {
    const FusionParams p = random_fusion(rng, 8, 2);
    const Matrix wp = random_unit_rows(rng, 2, 8);
    const Matrix patches = random_unit_rows(rng, 16, 8);
    std::vector<Matrix> ref_attention;
    const Matrix ref = naive_attention(wp, patches, p, &ref_attention);
    const FusionResult r = cross_attention_fuse(wp, patches, p);
    EXPECT_LE((r.fused - ref).cwiseAbs().maxCoeff(), 1e-6);
    ASSERT_EQ(r.attention.size(), 2U);
    for (std::size_t m = 0; m < 2; ++m) {
      EXPECT_LE((r.attention[m] - ref_attention[m]).cwiseAbs().maxCoeff(), 1e-6);
      for (Eigen::Index row = 0; row < 2; ++row) EXPECT_NEAR(r.attention[m].row(row).sum(), 1.0, 1e-6);
      EXPECT_GE(r.attention[m].minCoeff(), 0.0);
    }
  }
}

TEST(CrossAttention, OptionalPiecesMatchNaiveLoops) {
  std::mt19937_64 rng(16);
  for (bool scale : {false, true}) {
    for (bool proj : {false, true}) {
      for (bool residual : {false, true}) {
        FusionParams p = random_fusion(rng, 12, 4);
        p.scale_scores = scale;
        p.out_proj = proj;
        p.residual = residual;
        const Matrix wp = random_unit_rows(rng, 2, 12);
        const Matrix patches = random_unit_rows(rng, 6, 12);
        EXPECT_LE((cross_attention_fuse(wp, patches, p).fused - naive_attention(wp, patches, p)).cwiseAbs().maxCoeff(),
                  1e-9);
      }
    }
  }
}

TEST(CrossAttention, PatchOrderDoesNotMatter) {
  std::mt19937_64 rng(17);
  const FusionParams p = random_fusion(rng, 8, 4);
  const Matrix wp = random_unit_rows(rng, 2, 8);
  const Matrix patches = random_unit_rows(rng, 12, 8);
  Eigen::PermutationMatrix<Eigen::Dynamic> perm(12);
  perm.setIdentity();
  std::shuffle(perm.indices().data(), perm.indices().data() + 12, rng);
  const Matrix shuffled = perm * patches;
  EXPECT_TRUE(cross_attention_fuse(wp, shuffled, p).fused.isApprox(cross_attention_fuse(wp, patches, p).fused, 1e-12));
}

TEST(CrossAttention, HeadsMustDivideDim) {
  std::mt19937_64 rng(18);
  EXPECT_THROW(FusionParams::init(10, 4, rng), ValidationError);
  FusionParams p = FusionParams::init(8, 4, rng);
  p.heads = 3;
  EXPECT_THROW(cross_attention_fuse(random_unit_rows(rng, 2, 8), random_unit_rows(rng, 4, 8), p), ValidationError);
}

TEST(PromptFusionIo, RoundTrip) {
  TempDir dir("upf");
  std::mt19937_64 rng(19);
  PromptState s = PromptState::init(random_unit_rows(rng, 1, 8), random_unit_rows(rng, 1, 8));
  s.cond_w = random_matrix(rng, 8, 8);
  FusionParams f = random_fusion(rng, 8, 2);
  f.scale_scores = false;
  save_prompt_fusion(s, f, dir / "p.upf");
  auto [s2, f2] = load_prompt_fusion(dir / "p.upf");
  auto f32 = [](const Matrix& m) { return Matrix(m.cast<float>().cast<double>()); };
  EXPECT_EQ(s2.cond_w, f32(s.cond_w));
  EXPECT_EQ(Matrix(s2.normal), f32(s.normal));
  EXPECT_EQ(f2.w_k, f32(f.w_k));
  EXPECT_EQ(f2.w_o, f32(f.w_o));
  EXPECT_EQ(f2.heads, 2);
  EXPECT_FALSE(f2.scale_scores);
}

}  // namespace
}  // namespace ultraad
