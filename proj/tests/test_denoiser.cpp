#include <gtest/gtest.h>

#include <random>

#include "omni/denoiser.hpp"
#include "omni/verification.hpp"
#include "support/reference.hpp"

using namespace omni;

namespace {

DenoiserState random_state(std::mt19937_64& rng, std::size_t n_v, std::size_t n_a, std::size_t d) {
  return DenoiserState{random_normal(n_v, d, rng), random_normal(n_a, d, rng),
                       std::uniform_real_distribution<double>(0, 1)(rng), random_normal(2, d, rng),
                       random_normal(1, d, rng)};
}

DenoiserParams live(std::uint64_t seed, const DenoiserConfig& cfg = {}) {
  DenoiserParams p = init_denoiser_params(cfg, seed, DenoiserInit{false, false});
  std::mt19937_64 rng(seed * 31 + 1);
  verify::randomize(p.tensors, rng);
  return p;
}

}  // namespace

TEST(Denoiser, ZeroHeadsPredictZero) {
  std::mt19937_64 rng(1);
  const DenoiserParams p = init_denoiser_params({}, 1);
  const auto [v, a] = joint_forward(random_state(rng, 8, 3, 8), random_normal(4, 8, rng), p);
  for (double x : v.flat()) EXPECT_EQ(x, 0.0);
  for (double x : a.flat()) EXPECT_EQ(x, 0.0);
  EXPECT_EQ(v.rows(), 8u);
  EXPECT_EQ(a.rows(), 3u);
}

TEST(Denoiser, Deterministic) {
  std::mt19937_64 r1(2), r2(2);
  const auto s1 = random_state(r1, 8, 3, 8);
  const auto s2 = random_state(r2, 8, 3, 8);
  const Matrix ctx = random_normal(4, 8, r1);
  const auto [v1, a1] = joint_forward(s1, ctx, live(5));
  const auto [v2, a2] = joint_forward(s2, ctx, live(5));
  EXPECT_TRUE(bitwise_equal(v1, v2));
  EXPECT_TRUE(bitwise_equal(a1, a2));
}

TEST(Denoiser, MatchesReference) {
  std::mt19937_64 rng(3);
  for (int trial = 0; trial < 10; ++trial) {
    const DenoiserParams p = live(static_cast<std::uint64_t>(trial));
    const auto s = random_state(rng, 8, 3, 8);
    const Matrix ctx = random_normal(5, 8, rng);
    const auto [v, a] = joint_forward(s, ctx, p);
    const auto [rv, ra] = reference::joint(p.tensors, 2, 4, s, ctx);
    EXPECT_LT(reference::max_abs_diff(v, rv), 1e-10);
    EXPECT_LT(reference::max_abs_diff(a, ra), 1e-10);
    EXPECT_LT(reference::max_abs_diff(audio_only_forward(s, ctx, p), reference::audio_only(p.tensors, 2, 4, s, ctx)),
              1e-10);
  }
}

TEST(Denoiser, ZeroCouplingMakesAudioPathsIdentical) {
  std::mt19937_64 rng(4);
  DenoiserParams p = live(4);
  for (auto& [name, m] : p.tensors)
    if (group_of(name) == kCrossModalGroup && name.find(".attn.") != std::string::npos) m = Matrix(m.rows(), m.cols());
  const auto s = random_state(rng, 8, 3, 8);
  const Matrix ctx = random_normal(4, 8, rng);
  const auto [v, a] = joint_forward(s, ctx, p);
  EXPECT_TRUE(bitwise_equal(audio_only_forward(s, ctx, p), a));
}

TEST(Denoiser, CouplingMattersInJointPass) {
  std::mt19937_64 rng(5);
  const DenoiserParams p = live(5);
  auto s = random_state(rng, 8, 3, 8);
  const Matrix ctx = random_normal(4, 8, rng);
  const auto [v, a] = joint_forward(s, ctx, p);
  s.z_v(0, 0) += 1.0;
  const auto [v2, a2] = joint_forward(s, ctx, p);
  EXPECT_FALSE(bitwise_equal(a, a2));  // audio reads video through the coupling
}

TEST(Denoiser, AudioOnlyIgnoresVideo) {
  std::mt19937_64 rng(6);
  for (int trial = 0; trial < 10; ++trial) {
    const auto r = verify::severance_check(static_cast<std::uint64_t>(trial) + 50);
    EXPECT_TRUE(r.ok()) << r.detail;
  }
  // video fields may be absent entirely
  const DenoiserParams p = live(6);
  auto s = random_state(rng, 8, 3, 8);
  const Matrix ctx = random_normal(4, 8, rng);
  const Matrix with_video = audio_only_forward(s, ctx, p);
  s.z_v = Matrix();
  s.ref_v = Matrix();
  EXPECT_TRUE(bitwise_equal(audio_only_forward(s, ctx, p), with_video));
}

TEST(Denoiser, AudioOnlyCouplingGradientIsZeroByDifferences) {
  std::mt19937_64 rng(7);
  const DenoiserParams p = live(7);
  const auto s = random_state(rng, 6, 3, 8);
  const Matrix ctx = random_normal(3, 8, rng);
  const Matrix target = random_normal(3, 8, rng);
  auto loss = [&](const ParamSet& values) {
    const Matrix pred = audio_only_forward(s, ctx, DenoiserParams{p.config, values});
    return flow_loss(Matrix(), pred, Matrix(), target, StepKind::TtsOnly);
  };
  ParamSet values = p.tensors;
  for (auto& [name, m] : values) {
    if (group_of(name) != kCrossModalGroup) continue;
    for (double& x : m.flat()) {
      const double orig = x;
      x = orig + 1e-5;
      const double up = loss(values);
      x = orig - 1e-5;
      const double down = loss(values);
      x = orig;
      EXPECT_EQ(up, down) << name;
    }
  }
}

TEST(Denoiser, GradientsMatchFiniteDifferences) {
  for (std::uint64_t seed = 0; seed < 2; ++seed) {
    const auto r = verify::denoiser_gradient_check(seed);
    EXPECT_LT(r.max_rel_error, 1e-4) << r.worst;
  }
  const auto small = verify::denoiser_gradient_check(9, 5, 2, 8);
  EXPECT_LT(small.max_rel_error, 1e-4) << small.worst;
}

TEST(Denoiser, ShapeMismatch) {
  std::mt19937_64 rng(8);
  const DenoiserParams p = live(8);
  const Matrix ctx = random_normal(4, 8, rng);
  auto s = random_state(rng, 8, 3, 8);
  s.z_a = random_normal(3, 6, rng);
  EXPECT_THROW(joint_forward(s, ctx, p), DimensionError);
  s = random_state(rng, 8, 3, 8);
  s.t = 1.5;
  EXPECT_THROW(joint_forward(s, ctx, p), DimensionError);
  s = random_state(rng, 8, 3, 8);
  EXPECT_THROW(joint_forward(s, random_normal(4, 5, rng), p), DimensionError);
  s.ref_v = random_normal(2, 4, rng);
  EXPECT_THROW(joint_forward(s, ctx, p), DimensionError);
  EXPECT_THROW(init_denoiser_params(DenoiserConfig{8, 8, 8, 2, 3, 2, 4}, 1), DimensionError);
}

TEST(Denoiser, EmptyContextAndReferences) {
  std::mt19937_64 rng(9);
  const DenoiserParams p = live(9);
  DenoiserState s = random_state(rng, 4, 2, 8);
  s.ref_v = Matrix();
  s.ref_a = Matrix();
  const auto [v, a] = joint_forward(s, Matrix(), p);
  const auto [rv, ra] = reference::joint(p.tensors, 2, 4, s, Matrix(0, 8));
  EXPECT_LT(reference::max_abs_diff(v, rv), 1e-10);
  EXPECT_LT(reference::max_abs_diff(a, ra), 1e-10);
}

TEST(FlowLoss, Examples) {
  std::mt19937_64 rng(10);
  const Matrix tv = random_normal(4, 3, rng);
  const Matrix ta = random_normal(2, 3, rng);
  EXPECT_EQ(flow_loss(tv, ta, tv, ta, StepKind::Javg), 0.0);
  Matrix pv = tv, pa = ta;
  for (double& x : pv.flat()) x += 1.0;
  for (double& x : pa.flat()) x += 1.0;
  EXPECT_NEAR(flow_loss(pv, pa, tv, ta, StepKind::Javg), 1.0, 1e-15);
  EXPECT_NEAR(flow_loss(Matrix(), pa, Matrix(), ta, StepKind::TtsOnly), 1.0, 1e-15);
  // video MSE 4 (offset 2), audio MSE 1 -> 2.5
  for (double& x : pv.flat()) x += 1.0;
  EXPECT_NEAR(flow_loss(pv, pa, tv, ta, StepKind::Javg), 2.5, 1e-15);
}

TEST(FlowLoss, Errors) {
  const Matrix a(2, 3), b(3, 3);
  EXPECT_THROW(flow_loss(a, a, a, b, StepKind::Javg), DimensionError);
  EXPECT_THROW(flow_loss(a, a, b, a, StepKind::Javg), DimensionError);
  EXPECT_THROW(flow_loss(a, a, a, a, StepKind::TtsOnly), DimensionError);
}

TEST(Denoiser, ParameterGroupsAreNamed) {
  const DenoiserParams p = init_denoiser_params({}, 1);
  std::set<std::string> groups;
  for (const auto& [name, m] : p.tensors) groups.insert(group_of(name));
  EXPECT_EQ(groups, (std::set<std::string>{kVideoGroup, kAudioGroup, kCrossModalGroup}));
}
