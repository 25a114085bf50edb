#include <gtest/gtest.h>

#include <cmath>
#include <random>

#include "omni/positions.hpp"
#include "omni/rope.hpp"
#include "support/caption_gen.hpp"

using namespace omni;

namespace {

void expect_coord(const Coord3D& c, double t, double a2, double a3) {
  EXPECT_DOUBLE_EQ(c.t, t);
  EXPECT_DOUBLE_EQ(c.a2, a2);
  EXPECT_DOUBLE_EQ(c.a3, a3);
}

double norm(std::span<const double> v) {
  double s = 0.0;
  for (double x : v) s += x * x;
  return std::sqrt(s);
}

}  // namespace

TEST(AssignPositions, OneSubjectGridAndAudio) {
  // descriptor span (0,6)
  const OmniCaption c = parse_caption("A <sub1> is tall with voice . <sub1> says <S> hi there <E>");
  ASSERT_EQ(c.subjects[0].span_end, 6u);
  const auto a = assign_positions(c, {{1, ImageGrid{2, 2}}}, {{1, 3}});
  const auto& img = a.image_coords.at(1);
  ASSERT_EQ(img.size(), 4u);
  expect_coord(img[0], 7, 0, 0);
  expect_coord(img[1], 7, 0, 1);
  expect_coord(img[2], 7, 1, 0);
  expect_coord(img[3], 7, 1, 1);
  const auto& aud = a.audio_coords.at(1);
  ASSERT_EQ(aud.size(), 3u);
  expect_coord(aud[0], 8, 0, 0);
  expect_coord(aud[1], 8, 1, 0);
  expect_coord(aud[2], 8, 2, 0);
  expect_coord(a.text_coords[7], 9, 0, 0);
  for (std::size_t i = 0; i <= 6; ++i) expect_coord(a.text_coords[i], static_cast<double>(i), 0, 0);
}

TEST(AssignPositions, NoSubjectsMeansNoShift) {
  const OmniCaption c = parse_caption("rain falls on a tin roof .");
  const auto a = assign_positions(c);
  for (std::size_t i = 0; i < a.text_coords.size(); ++i) expect_coord(a.text_coords[i], static_cast<double>(i), 0, 0);
  EXPECT_TRUE(a.image_coords.empty());
}

TEST(AssignPositions, ShiftsComposeLeftToRight) {
  // A <sub1> is tall with voice .      -> stream 0..6, e_1 = 6
  // B <sub2> is short with deep voice . -> stream 7..14, shifted t 9..16, e_2 = 16
  const OmniCaption c = parse_caption("A <sub1> is tall with voice . B <sub2> is short with deep voice . they wave .");
  ASSERT_EQ(c.subjects[1].span_start, 7u);
  ASSERT_EQ(c.subjects[1].span_end, 14u);
  const auto a = assign_positions(c, {{1, {1, 1}}, {2, {1, 1}}}, {{1, 1}, {2, 1}});
  EXPECT_DOUBLE_EQ(a.text_coords[7].t, 9.0);
  EXPECT_DOUBLE_EQ(a.text_coords[14].t, 16.0);
  EXPECT_DOUBLE_EQ(a.image_coords.at(2)[0].t, 17.0);
  EXPECT_DOUBLE_EQ(a.audio_coords.at(2)[0].t, 18.0);
  EXPECT_DOUBLE_EQ(a.text_coords[15].t, 19.0);
}

TEST(AssignPositions, TtsFollowsShiftedContent) {
  // content tokens at stream 11..12 sit at t 13..14 after the +2 shift
  const OmniCaption c = parse_caption("A <sub1> is tall with calm voice . <sub1> says <S> hi there <E>");
  const auto a = assign_positions(c, {}, {}, {{0, 3}});
  const auto& tts = a.tts_coords.at(0);
  ASSERT_EQ(tts.size(), 3u);
  expect_coord(tts[0], 13, 0, 1);
  expect_coord(tts[1], 13.5, 0, 1);
  expect_coord(tts[2], 14, 0, 1);
}

TEST(AssignPositions, Errors) {
  const OmniCaption c = parse_caption("A <sub1> is tall with calm voice . <sub1> says <S> hi <E>");
  auto kind = [&](auto&& f) {
    try {
      f();
    } catch (const PositionError& e) {
      return e.kind();
    }
    ADD_FAILURE() << "no error";
    return PositionErrorKind::InvalidCount;
  };
  EXPECT_EQ(kind([&] { assign_positions(c, {{2, {1, 1}}}); }), PositionErrorKind::MissingSubject);
  EXPECT_EQ(kind([&] { assign_positions(c, {}, {{3, 2}}); }), PositionErrorKind::MissingSubject);
  EXPECT_EQ(kind([&] { assign_positions(c, {}, {}, {{1, 2}}); }), PositionErrorKind::MissingUtterance);
  EXPECT_EQ(kind([&] { assign_positions(c, {}, {}, {{0, 0}}); }), PositionErrorKind::InvalidCount);
}

TEST(TtsPositions, Examples) {
  const auto a = tts_positions(12, 13, 4);
  ASSERT_EQ(a.size(), 4u);
  EXPECT_DOUBLE_EQ(a[0].t, 12.0);
  EXPECT_NEAR(a[1].t, 12.0 + 1.0 / 3.0, 1e-12);
  EXPECT_NEAR(a[2].t, 12.0 + 2.0 / 3.0, 1e-12);
  EXPECT_DOUBLE_EQ(a[3].t, 13.0);
  for (const auto& c : a) {
    EXPECT_EQ(c.a2, 0.0);
    EXPECT_EQ(c.a3, 1.0);
  }
  const auto b = tts_positions(20, 29, 5);
  const double expected[] = {20, 22.25, 24.5, 26.75, 29};
  for (int i = 0; i < 5; ++i) EXPECT_DOUBLE_EQ(b[i].t, expected[i]);
  const auto one = tts_positions(5, 5, 1);
  ASSERT_EQ(one.size(), 1u);
  expect_coord(one[0], 5, 0, 1);
  const auto start = tts_positions(3, 9, 1);
  EXPECT_DOUBLE_EQ(start[0].t, 3.0);
}

TEST(TtsPositions, Errors) {
  EXPECT_THROW(tts_positions(5, 4, 3), PositionError);
  EXPECT_THROW(tts_positions(1, 4, 0), PositionError);
}

TEST(Rope, ConfigSplit) {
  EXPECT_EQ(RopeConfig::for_head_dim(8).axis_split, (std::array<std::size_t, 3>{4, 2, 2}));
  EXPECT_EQ(RopeConfig::for_head_dim(16).axis_split, (std::array<std::size_t, 3>{8, 4, 4}));
  EXPECT_THROW(RopeConfig::for_head_dim(4), DimensionError);
  EXPECT_THROW(RopeConfig::for_head_dim(9), DimensionError);
  RopeConfig bad{8, {4, 3, 1}, 10000};
  EXPECT_THROW(bad.validate(), DimensionError);
  RopeConfig sum{8, {4, 2, 4}, 10000};
  EXPECT_THROW(sum.validate(), DimensionError);
}

TEST(Rope, ZeroCoordIsIdentity) {
  std::mt19937_64 rng(1);
  const Matrix v = random_normal(3, 8, rng);
  const std::vector<Coord3D> c(3);
  EXPECT_TRUE(bitwise_equal(rope_rotate(v, c, RopeConfig{}), v));
}

TEST(Rope, FirstPairClosedForm) {
  Matrix e1(1, 8);
  e1(0, 0) = 1.0;
  const std::vector<Coord3D> c{{1, 0, 0}};
  const Matrix r = rope_rotate(e1, c, RopeConfig{});
  // pair 0 of the temporal block has frequency base^0 = 1, so the angle is 1 rad
  EXPECT_NEAR(r(0, 0), std::cos(1.0), 1e-15);
  EXPECT_NEAR(r(0, 1), std::sin(1.0), 1e-15);
  for (std::size_t i = 2; i < 8; ++i) EXPECT_EQ(r(0, i), 0.0);
}

TEST(Rope, SecondTemporalPairFrequency) {
  Matrix e3(1, 8);
  e3(0, 2) = 1.0;
  const std::vector<Coord3D> c{{2, 0, 0}};
  const Matrix r = rope_rotate(e3, c, RopeConfig{});
  // pair 1 of a 4-wide block: frequency 10000^(-2/4) = 0.01
  EXPECT_NEAR(r(0, 2), std::cos(0.02), 1e-15);
  EXPECT_NEAR(r(0, 3), std::sin(0.02), 1e-15);
}

TEST(Rope, DimMismatch) {
  const Matrix v(2, 8);
  const std::vector<Coord3D> one(1);
  EXPECT_THROW(rope_rotate(v, one, RopeConfig{}), DimensionError);
  const Matrix w(1, 6);
  EXPECT_THROW(rope_rotate(w, one, RopeConfig{}), DimensionError);
}

TEST(Rope, NormPreserved) {
  std::mt19937_64 rng(3);
  for (std::size_t hd : {8u, 16u}) {
    const RopeConfig cfg = RopeConfig::for_head_dim(hd);
    for (int trial = 0; trial < 200; ++trial) {
      const Matrix v = random_normal(1, hd, rng);
      std::uniform_real_distribution<double> u(-500, 500);
      const std::vector<Coord3D> c{{u(rng), u(rng), u(rng)}};
      const Matrix r = rope_rotate(v, c, cfg);
      EXPECT_NEAR(norm(r.row(0)) / norm(v.row(0)), 1.0, 1e-12);
    }
  }
}

TEST(AttentionLogits, DiagonalIsMaximal) {
  std::mt19937_64 rng(4);
  const Matrix q = random_normal(1, 8, rng);
  const std::vector<Coord3D> c{{3, 1, 0}};
  const Matrix l = attention_logits(q, q, c, c, RopeConfig{});
  double sq = 0.0;
  for (double x : q.row(0)) sq += x * x;
  EXPECT_NEAR(l(0, 0), sq / std::sqrt(8.0), 1e-12);
}

TEST(AttentionLogits, ShiftInvariance) {
  std::mt19937_64 rng(5);
  const RopeConfig cfg = RopeConfig::for_head_dim(16);
  for (int trial = 0; trial < 50; ++trial) {
    const Matrix q = random_normal(4, 16, rng);
    const Matrix k = random_normal(5, 16, rng);
    std::uniform_real_distribution<double> u(0, 40);
    std::vector<Coord3D> qc(4), kc(5);
    for (auto& c : qc) c = {u(rng), u(rng), std::floor(u(rng) / 20)};
    for (auto& c : kc) c = {u(rng), u(rng), std::floor(u(rng) / 20)};
    const Matrix base = attention_logits(q, k, qc, kc, cfg);
    auto shifted = [](std::vector<Coord3D> v) {
      for (auto& c : v) c = {c.t + 5, c.a2 + 3, c.a3 + 1};
      return v;
    };
    const Matrix moved = attention_logits(q, k, shifted(qc), shifted(kc), cfg);
    for (std::size_t i = 0; i < base.size(); ++i) {
      const double a = base.flat()[i], b = moved.flat()[i];
      EXPECT_LE(std::abs(a - b), 1e-5 * std::max(std::abs(a), 1e-3));
    }
  }
}

TEST(AttentionLogits, TtsFlagChangesLogits) {
  std::mt19937_64 rng(6);
  const Matrix q = random_normal(1, 8, rng);
  const Matrix k = random_normal(1, 8, rng);
  const std::vector<Coord3D> qc{{4, 0, 0}};
  const std::vector<Coord3D> plain{{4, 0, 0}};
  const std::vector<Coord3D> flagged{{4, 0, 1}};
  const double a = attention_logits(q, k, qc, plain, RopeConfig{})(0, 0);
  const double b = attention_logits(q, k, qc, flagged, RopeConfig{})(0, 0);
  EXPECT_GT(std::abs(a - b), 1e-6);
}

TEST(Rope, TtsDistinguishability) {
  std::mt19937_64 rng(8);
  for (int trial = 0; trial < 100; ++trial) {
    Matrix v(1, 8);
    // mass only in the a3 block (dims 6, 7)
    v(0, 6) = std::normal_distribution<double>()(rng);
    v(0, 7) = 1.0 + std::abs(std::normal_distribution<double>()(rng));
    const double t = std::uniform_real_distribution<double>(0, 50)(rng);
    const std::vector<Coord3D> off{{t, 0, 0}}, on{{t, 0, 1}};
    EXPECT_FALSE(bitwise_equal(rope_rotate(v, off, RopeConfig{}), rope_rotate(v, on, RopeConfig{})));
  }
}

// Anchoring adjacency on random captions against a counting oracle:
// stream index i sits at t = i + 2 * (number of descriptors ending before i).
TEST(AssignPositions, AnchoringOnRandomCaptions) {
  std::mt19937_64 rng(11);
  for (int trial = 0; trial < 300; ++trial) {
    const auto g = gen::generate_caption(rng);
    const OmniCaption c = parse_caption(g.text());
    std::map<int, ImageGrid> grids;
    std::map<int, std::size_t> audio;
    for (const auto& s : g.subjects) {
      grids[s.id] = {1 + static_cast<std::size_t>(rng() % 3), 1 + static_cast<std::size_t>(rng() % 3)};
      audio[s.id] = 1 + rng() % 4;
    }
    const auto a = assign_positions(c, grids, audio);
    for (std::size_t i = 0; i < c.tokens.size(); ++i) {
      std::size_t before = 0;
      for (const auto& s : g.subjects) before += s.e < i;
      EXPECT_EQ(a.text_coords[i].t, static_cast<double>(i + 2 * before));
      if (i > 0) {
        EXPECT_LT(a.text_coords[i - 1].t, a.text_coords[i].t);
      }
    }
    for (const auto& s : g.subjects) {
      const double e = a.text_coords[s.e].t;
      for (const auto& p : a.image_coords.at(s.id)) EXPECT_EQ(p.t - e, 1.0);
      for (const auto& p : a.audio_coords.at(s.id)) {
        EXPECT_EQ(p.t - e, 2.0);
        EXPECT_EQ(p.a3, 0.0);
      }
      if (s.e + 1 < c.tokens.size()) {
        EXPECT_EQ(a.text_coords[s.e + 1].t - e, 3.0);
      }
    }
  }
}

TEST(AssignPositions, JsonDump) {
  const OmniCaption c = parse_caption("A <sub1> is tall with voice . <sub1> says <S> hi there <E>");
  const auto j = assignment_to_json(assign_positions(c, {{1, {1, 2}}}, {{1, 1}}, {{0, 2}}));
  EXPECT_EQ(j["text"].size(), c.tokens.size());
  EXPECT_EQ(j["image"]["1"][1], (nlohmann::json{7.0, 0.0, 1.0}));
  EXPECT_EQ(j["audio"]["1"][0], (nlohmann::json{8.0, 0.0, 0.0}));
  EXPECT_EQ(j["tts"]["0"][0][2], 1.0);
}
