#include <gtest/gtest.h>

#include <random>

#include "omni/speech_gate.hpp"
#include "omni/verification.hpp"
#include "support/bundles.hpp"
#include "support/reference.hpp"

using namespace omni;

namespace {

const char* kOneSubject = "A <sub1> is tall with calm voice . <sub1> says <S> hi there <E>";

MtpcaParams live_params(std::size_t d, std::uint64_t seed) {
  MtpcaParams p = init_mtpca_params(MtpcaConfig{d, 1}, seed);
  std::mt19937_64 rng(seed + 100);
  verify::randomize(p.tensors, rng);
  return p;
}

}  // namespace

TEST(SpeechMask, OneSubjectFixture) {
  const SpeechMask m = build_speech_mask(parse_caption(kOneSubject));
  ASSERT_EQ(m.size(), 14u);
  for (std::size_t i = 0; i < m.size(); ++i) {
    EXPECT_EQ(m.values[i], (i == 11 || i == 12) ? 1 : 0) << i;
    EXPECT_EQ(m.utterance[i], (i == 11 || i == 12) ? 0 : -1) << i;
  }
}

TEST(SpeechMask, NoUtterances) {
  const SpeechMask m = build_speech_mask(parse_caption("A <sub1> is tall with calm voice . it rains ."));
  EXPECT_EQ(m.active(), 0u);
}

TEST(SpeechMask, TwoUtterancesGiveDisjointRuns) {
  // A <sub1> is tall with calm voice .  0..7
  // <sub1> says <S> hi <E> .            8..13, content 11
  // <sub1> says <S> bye now <E>         14..19, content 17..18
  const SpeechMask m = build_speech_mask(
      parse_caption("A <sub1> is tall with calm voice . <sub1> says <S> hi <E> . <sub1> says <S> bye now <E>"));
  std::string bits;
  for (auto v : m.values) bits += v ? '1' : '0';
  EXPECT_EQ(bits, "00000000000100000110");
  EXPECT_EQ(m.utterance[11], 0);
  EXPECT_EQ(m.utterance[17], 1);
  EXPECT_EQ(m.utterance[18], 1);
  EXPECT_EQ(mask_to_json(m).size(), m.size());
}

TEST(Mtpca, AllZeroMaskIsIdentity) {
  std::mt19937_64 rng(1);
  const Matrix c_txt = random_normal(6, 8, rng);
  const Matrix c_tts = random_normal(3, 8, rng);
  SpeechMask m;
  m.values.assign(6, 0);
  m.utterance.assign(6, -1);
  EXPECT_TRUE(bitwise_equal(mtpca_forward(c_txt, c_tts, m, live_params(8, 1)), c_txt));
  // and an empty c_tts is fine when nothing is active
  EXPECT_TRUE(bitwise_equal(mtpca_forward(c_txt, Matrix(0, 8), m, live_params(8, 1)), c_txt));
}

TEST(Mtpca, ZeroInitIsIdentity) {
  std::mt19937_64 rng(2);
  const SpeechMask m = build_speech_mask(parse_caption(kOneSubject));
  const Matrix c_txt = random_normal(14, 8, rng);
  const Matrix c_tts = random_normal(4, 8, rng);
  EXPECT_TRUE(bitwise_equal(mtpca_forward(c_txt, c_tts, m, init_mtpca_params(MtpcaConfig{8, 1}, 3)), c_txt));
}

TEST(Mtpca, OnlyMaskedRowsChange) {
  std::mt19937_64 rng(3);
  const SpeechMask m = build_speech_mask(parse_caption(kOneSubject));
  const Matrix c_txt = random_normal(14, 8, rng);
  const Matrix c_tts = random_normal(4, 8, rng);
  const Matrix out = mtpca_forward(c_txt, c_tts, m, live_params(8, 4));
  for (std::size_t i = 0; i < 14; ++i) {
    if (i == 11 || i == 12) {
      EXPECT_FALSE(bitwise_equal_row(out, c_txt, i)) << i;
    } else {
      EXPECT_TRUE(bitwise_equal_row(out, c_txt, i)) << i;
    }
  }
}

TEST(Mtpca, EmptyTtsWithActiveMask) {
  std::mt19937_64 rng(4);
  const SpeechMask m = build_speech_mask(parse_caption(kOneSubject));
  EXPECT_THROW(mtpca_forward(random_normal(14, 8, rng), Matrix(0, 8), m, live_params(8, 1)), SpeechGateError);
}

TEST(Mtpca, ShapeMismatch) {
  std::mt19937_64 rng(5);
  const SpeechMask m = build_speech_mask(parse_caption(kOneSubject));
  EXPECT_THROW(mtpca_forward(random_normal(13, 8, rng), random_normal(2, 8, rng), m, live_params(8, 1)), DimensionError);
  EXPECT_THROW(mtpca_forward(random_normal(14, 8, rng), random_normal(2, 6, rng), m, live_params(8, 1)), DimensionError);
  EXPECT_THROW(mtpca_forward(random_normal(14, 8, rng), random_normal(2, 8, rng), m, live_params(8, 1), {3}),
               DimensionError);
}

TEST(Mtpca, MatchesReferenceAndStaysBlockDiagonal) {
  std::mt19937_64 rng(6);
  gen::GenOptions opt;
  opt.min_utterances = 1;
  for (int trial = 0; trial < 40; ++trial) {
    const auto cb = gen::random_bundle(rng, 8, opt);
    const SpeechMask m = build_speech_mask(cb.caption);
    const auto counts = gen::counts_vector(cb.tts_counts);
    const MtpcaParams p = live_params(8, static_cast<std::uint64_t>(trial));
    const Matrix out = mtpca_forward(cb.bundle.c_txt, cb.bundle.c_tts, m, p, counts);
    const Matrix want = reference::mtpca(p.tensors, cb.bundle.c_txt, cb.bundle.c_tts, m, counts);
    EXPECT_LT(reference::max_abs_diff(out, want), 1e-12);

    // perturbing one utterance's phonemes moves only that utterance's rows
    if (counts.size() >= 2) {
      Matrix tts = cb.bundle.c_tts;
      for (std::size_t c = 0; c < 8; ++c) tts(0, c) += 0.5;  // first row belongs to utterance 0
      const Matrix moved = mtpca_forward(cb.bundle.c_txt, tts, m, p, counts);
      for (std::size_t i = 0; i < m.size(); ++i) {
        if (m.utterance[i] == 0) continue;
        EXPECT_TRUE(bitwise_equal_row(moved, out, i)) << i;
      }
    }
  }
}

TEST(Mtpca, UnmaskedLossHasNoPhonemeGradient) {
  std::mt19937_64 rng(7);
  const SpeechMask m = build_speech_mask(parse_caption(kOneSubject));
  const MtpcaParams p = live_params(8, 7);
  ParamSet values = p.tensors;
  values["in.c_txt"] = random_normal(14, 8, rng);
  values["in.c_tts"] = random_normal(3, 8, rng);
  Matrix weights = random_normal(14, 8, rng);
  for (std::size_t c = 0; c < 8; ++c) weights(11, c) = weights(12, c) = 0.0;  // loss reads masked-out rows only
  auto build = [&](ParamBinder& b) {
    return ad::weighted_sum(mtpca_forward(b, p.config, b("in.c_txt"), b("in.c_tts"), {}, m), weights);
  };
  ad::Tape tape;
  ParamBinder bind(tape, values, true);
  tape.backward(build(bind));
  const GradMap g = bind.gradients();
  for (double v : g.at("in.c_tts").flat()) EXPECT_EQ(v, 0.0);
  // central differences agree: the loss does not move with c_tts at all
  ParamSet probe = values;
  auto eval = [&](const ParamSet& v) {
    ad::Tape t;
    ParamBinder b(t, v, false);
    return build(b).value()(0, 0);
  };
  const double base = eval(probe);
  for (double& x : probe["in.c_tts"].flat()) {
    x += 1e-3;
    EXPECT_EQ(eval(probe), base);
    x -= 1e-3;
  }
}

TEST(Mtpca, GradientsMatchFiniteDifferences) {
  for (std::uint64_t seed = 0; seed < 5; ++seed) {
    const auto r = verify::mtpca_gradient_check(seed);
    EXPECT_LT(r.max_rel_error, 1e-4) << r.worst;
  }
}

TEST(Mtpca, ComposedWithOcfInfluenceStartsAtMaskedRows) {
  std::mt19937_64 rng(8);
  const OmniCaption c = parse_caption(kOneSubject);
  const SpeechMask m = build_speech_mask(c);
  const Matrix c_txt = random_normal(14, 8, rng);
  const Matrix a = random_normal(2, 8, rng);
  Matrix b = a;
  b(1, 3) += 1.0;
  const MtpcaParams p = live_params(8, 8);
  const Matrix ga = mtpca_forward(c_txt, a, m, p);
  const Matrix gb = mtpca_forward(c_txt, b, m, p);
  for (std::size_t i = 0; i < 14; ++i) EXPECT_EQ(bitwise_equal_row(ga, gb, i), m.values[i] == 0) << i;
}
