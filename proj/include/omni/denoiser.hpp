#pragma once

// Desk-scale dual-stream denoiser. Each tower runs over its noisy latents
// with the reference latents appended along the sequence axis, and reads
// its prediction off the noisy rows only. Per block:
//
//   self-attention (1-D rotary) -> context cross-attention (enriched text)
//   -> bidirectional video<->audio cross-attention -> feed-forward
//
// The video<->audio coupling lives entirely under the "cross_modal" group,
// so an audio-only pass never reads or differentiates it.

#include <cmath>
#include <cstddef>
#include <cstdint>
#include <string>
#include <utility>
#include <vector>

#include "omni/autodiff.hpp"
#include "omni/layers.hpp"
#include "omni/params.hpp"
#include "omni/rope.hpp"

namespace omni {

enum class StepKind { Javg, TtsOnly };

inline const char* to_string(StepKind k) { return k == StepKind::Javg ? "JAVG" : "TTS_ONLY"; }

struct DenoiserConfig {
  std::size_t d_v = 8;
  std::size_t d_a = 8;
  std::size_t d_ctx = 8;
  std::size_t blocks = 2;
  std::size_t heads = 1;
  std::size_t ffn_mult = 2;
  std::size_t time_features = 4;  // sinusoid frequencies; the embedding has 2x this width
};

struct DenoiserInit {
  bool zero_output_heads = true;
  bool zero_cross_modal = false;
};

struct DenoiserParams {
  DenoiserConfig config;
  ParamSet tensors;
};

/// Noisy latents, timestep and sequence-concatenated references.
struct DenoiserState {
  Matrix z_v;    // (N_v x d_v)
  Matrix z_a;    // (N_a x d_a)
  double t = 0.0;
  Matrix ref_v;  // (R_v x d_v)
  Matrix ref_a;  // (R_a x d_a)
};

inline constexpr const char* kVideoGroup = "video";
inline constexpr const char* kAudioGroup = "audio";
inline constexpr const char* kCrossModalGroup = "cross_modal";

namespace denoiser_detail {

inline std::string name(const std::string& tower, std::size_t block, const char* leaf) {
  return tower + "." + std::to_string(block) + "." + leaf;
}

inline std::string cross_name(std::size_t block, const char* dir, const char* leaf) {
  return std::string(kCrossModalGroup) + "." + std::to_string(block) + "." + dir + "." + leaf;
}

inline void validate(const DenoiserConfig& c) {
  auto bad = [](const std::string& w) { throw DimensionError(DimensionErrorKind::InvalidDim, "denoiser: " + w); };
  if (c.blocks == 0 || c.heads == 0 || c.ffn_mult == 0 || c.time_features == 0 || c.d_ctx == 0) bad("sizes must be positive");
  for (std::size_t d : {c.d_v, c.d_a}) {
    if (d == 0 || d % c.heads != 0) bad("tower width must be divisible by the head count");
    const std::size_t hd = d / c.heads;
    if (hd < 6 || hd % 2 != 0) bad("tower head dim must be even and >= 6 for rotary positions");
  }
}

inline void init_tower(ParamSet& ps, const std::string& tower, std::size_t d, const DenoiserConfig& c,
                       const DenoiserInit& init, Rng& rng) {
  using layers::ones_row;
  using layers::scaled_uniform;
  ps[tower + ".time_w"] = scaled_uniform(d, 2 * c.time_features, rng);
  for (std::size_t b = 0; b < c.blocks; ++b) {
    ps[name(tower, b, "self_norm")] = ones_row(d);
    ps[name(tower, b, "self.wq")] = scaled_uniform(d, d, rng);
    ps[name(tower, b, "self.wk")] = scaled_uniform(d, d, rng);
    ps[name(tower, b, "self.wv")] = scaled_uniform(d, d, rng);
    ps[name(tower, b, "self.wo")] = scaled_uniform(d, d, rng);
    ps[name(tower, b, "ctx_norm")] = ones_row(d);
    ps[name(tower, b, "ctx.wq")] = scaled_uniform(d, d, rng);
    ps[name(tower, b, "ctx.wk")] = scaled_uniform(d, c.d_ctx, rng);
    ps[name(tower, b, "ctx.wv")] = scaled_uniform(d, c.d_ctx, rng);
    ps[name(tower, b, "ctx.wo")] = scaled_uniform(d, d, rng);
    ps[name(tower, b, "ffn_norm")] = ones_row(d);
    ps[name(tower, b, "ffn.w1")] = scaled_uniform(c.ffn_mult * d, d, rng);
    ps[name(tower, b, "ffn.w2")] = scaled_uniform(d, c.ffn_mult * d, rng);
  }
  ps[tower + ".head_norm"] = ones_row(d);
  ps[tower + ".head.w"] = init.zero_output_heads ? Matrix(d, d) : scaled_uniform(d, d, rng);
}

inline void init_cross(ParamSet& ps, std::size_t b, const char* dir, std::size_t d_recv, std::size_t d_src,
                       const DenoiserInit& init, Rng& rng) {
  auto w = [&](std::size_t out, std::size_t in) {
    Matrix m = layers::scaled_uniform(out, in, rng);
    return init.zero_cross_modal ? Matrix(out, in) : m;
  };
  ps[cross_name(b, dir, "q_norm")] = layers::ones_row(d_recv);
  ps[cross_name(b, dir, "kv_norm")] = layers::ones_row(d_src);
  ps[cross_name(b, dir, "attn.wq")] = w(d_recv, d_recv);
  ps[cross_name(b, dir, "attn.wk")] = w(d_recv, d_src);
  ps[cross_name(b, dir, "attn.wv")] = w(d_recv, d_src);
  ps[cross_name(b, dir, "attn.wo")] = w(d_recv, d_recv);
}

/// [sin(w_k t), cos(w_k t)] with w_k spaced geometrically over [1, 100].
inline Matrix timestep_features(double t, std::size_t count) {
  Matrix phi(1, 2 * count);
  for (std::size_t k = 0; k < count; ++k) {
    const double w = count == 1 ? 1.0 : std::pow(100.0, static_cast<double>(k) / static_cast<double>(count - 1));
    phi(0, k) = std::sin(w * t);
    phi(0, count + k) = std::cos(w * t);
  }
  return phi;
}

struct Tower {
  std::string prefix;
  ad::Var x;
  std::size_t noisy_rows = 0;
  std::vector<Coord3D> positions;
  RopeConfig rope;
};

inline Tower enter_tower(ParamBinder& p, const DenoiserConfig& c, const std::string& prefix, ad::Var z, ad::Var ref,
                         double t) {
  Tower tw;
  tw.prefix = prefix;
  tw.noisy_rows = z.rows();
  tw.x = ref.rows() == 0 ? z : ad::concat_rows({z, ref});
  ad::Var phi = p.tape().constant(timestep_features(t, c.time_features));
  tw.x = ad::add_row(tw.x, ad::silu(ad::matmul_nt(phi, p(prefix + ".time_w"))));
  tw.positions = sequential_coords(tw.x.rows());
  tw.rope = RopeConfig::for_head_dim(tw.x.cols() / c.heads);
  return tw;
}

inline void self_and_context(ParamBinder& p, const DenoiserConfig& c, Tower& tw, std::size_t b, ad::Var context) {
  ad::Var n = ad::rmsnorm(tw.x, p(name(tw.prefix, b, "self_norm")));
  tw.x = ad::add(tw.x, layers::attention(p, name(tw.prefix, b, "self"), n, n, c.heads,
                                         layers::RotaryPositions{tw.positions, tw.positions, tw.rope}));
  if (context.rows() > 0) {
    ad::Var q = ad::rmsnorm(tw.x, p(name(tw.prefix, b, "ctx_norm")));
    tw.x = ad::add(tw.x, layers::attention(p, name(tw.prefix, b, "ctx"), q, context, c.heads));
  }
}

inline ad::Var cross_term(ParamBinder& p, const DenoiserConfig& c, std::size_t b, const char* dir, ad::Var receiver,
                          ad::Var source) {
  ad::Var q = ad::rmsnorm(receiver, p(cross_name(b, dir, "q_norm")));
  ad::Var kv = ad::rmsnorm(source, p(cross_name(b, dir, "kv_norm")));
  return layers::attention(p, cross_name(b, dir, "attn"), q, kv, c.heads);
}

inline void feed_forward(ParamBinder& p, Tower& tw, std::size_t b) {
  ad::Var n = ad::rmsnorm(tw.x, p(name(tw.prefix, b, "ffn_norm")));
  tw.x = ad::add(tw.x, layers::feed_forward(p, name(tw.prefix, b, "ffn"), n));
}

inline ad::Var read_out(ParamBinder& p, const Tower& tw) {
  ad::Var noisy = tw.noisy_rows == tw.x.rows() ? tw.x : ad::slice_rows(tw.x, 0, tw.noisy_rows);
  return ad::matmul_nt(ad::rmsnorm(noisy, p(tw.prefix + ".head_norm")), p(tw.prefix + ".head.w"));
}

inline void check_inputs(const DenoiserConfig& c, const ad::Var* z_v, const ad::Var* ref_v, ad::Var z_a, ad::Var ref_a,
                         double t, ad::Var context) {
  auto bad = [](const std::string& w) { throw DimensionError(DimensionErrorKind::ShapeMismatch, "denoiser: " + w); };
  if (!(t >= 0.0 && t <= 1.0)) bad("timestep must lie in [0, 1]");
  if (z_v) {
    if (z_v->cols() != c.d_v || z_v->rows() == 0) bad("z_v must be non-empty with width d_v");
    if (ref_v->rows() > 0 && ref_v->cols() != c.d_v) bad("ref_v width must be d_v");
  }
  if (z_a.cols() != c.d_a || z_a.rows() == 0) bad("z_a must be non-empty with width d_a");
  if (ref_a.rows() > 0 && ref_a.cols() != c.d_a) bad("ref_a width must be d_a");
  if (context.rows() > 0 && context.cols() != c.d_ctx) bad("context width must be d_ctx");
}

}  // namespace denoiser_detail

inline DenoiserParams init_denoiser_params(const DenoiserConfig& cfg, std::uint64_t seed, const DenoiserInit& init = {}) {
  denoiser_detail::validate(cfg);
  Rng rng(seed);
  DenoiserParams out{cfg, {}};
  denoiser_detail::init_tower(out.tensors, kVideoGroup, cfg.d_v, cfg, init, rng);
  denoiser_detail::init_tower(out.tensors, kAudioGroup, cfg.d_a, cfg, init, rng);
  for (std::size_t b = 0; b < cfg.blocks; ++b) {
    denoiser_detail::init_cross(out.tensors, b, "v_from_a", cfg.d_v, cfg.d_a, init, rng);
    denoiser_detail::init_cross(out.tensors, b, "a_from_v", cfg.d_a, cfg.d_v, init, rng);
  }
  return out;
}

struct StateVars {
  ad::Var z_v;
  ad::Var z_a;
  ad::Var ref_v;
  ad::Var ref_a;
  double t = 0.0;
};

struct JointPrediction {
  ad::Var v;
  ad::Var a;
};

inline StateVars state_constants(ad::Tape& tape, const DenoiserState& s, const DenoiserConfig& c) {
  auto in = [&](const Matrix& m, std::size_t d) { return tape.constant(m.rows() == 0 ? Matrix(0, d) : m); };
  return StateVars{in(s.z_v, c.d_v), in(s.z_a, c.d_a), in(s.ref_v, c.d_v), in(s.ref_a, c.d_a), s.t};
}

/// Joint pass over both towers with the cross-modal pathway active.
inline JointPrediction joint_forward(ParamBinder& p, const DenoiserConfig& c, const StateVars& s, ad::Var context) {
  using namespace denoiser_detail;
  validate(c);
  check_inputs(c, &s.z_v, &s.ref_v, s.z_a, s.ref_a, s.t, context);
  Tower v = enter_tower(p, c, kVideoGroup, s.z_v, s.ref_v, s.t);
  Tower a = enter_tower(p, c, kAudioGroup, s.z_a, s.ref_a, s.t);
  for (std::size_t b = 0; b < c.blocks; ++b) {
    self_and_context(p, c, v, b, context);
    self_and_context(p, c, a, b, context);
    // both directions read the pre-exchange states
    ad::Var to_v = cross_term(p, c, b, "v_from_a", v.x, a.x);
    ad::Var to_a = cross_term(p, c, b, "a_from_v", a.x, v.x);
    v.x = ad::add(v.x, to_v);
    a.x = ad::add(a.x, to_a);
    feed_forward(p, v, b);
    feed_forward(p, a, b);
  }
  return {read_out(p, v), read_out(p, a)};
}

/// Audio tower alone: the cross-modal target is null, so no video tower or
/// coupling weight is ever placed on the tape.
inline ad::Var audio_only_forward(ParamBinder& p, const DenoiserConfig& c, ad::Var z_a, ad::Var ref_a, double t,
                                  ad::Var context) {
  using namespace denoiser_detail;
  validate(c);
  check_inputs(c, nullptr, nullptr, z_a, ref_a, t, context);
  Tower a = enter_tower(p, c, kAudioGroup, z_a, ref_a, t);
  for (std::size_t b = 0; b < c.blocks; ++b) {
    self_and_context(p, c, a, b, context);
    feed_forward(p, a, b);
  }
  return read_out(p, a);
}

inline std::pair<Matrix, Matrix> joint_forward(const DenoiserState& state, const Matrix& context,
                                               const DenoiserParams& params) {
  ad::Tape tape;
  ParamBinder p(tape, params.tensors, false);
  auto pred = joint_forward(p, params.config, state_constants(tape, state, params.config), tape.constant(context));
  return {pred.v.value(), pred.a.value()};
}

inline Matrix audio_only_forward(const DenoiserState& state, const Matrix& context, const DenoiserParams& params) {
  ad::Tape tape;
  ParamBinder p(tape, params.tensors, false);
  const StateVars s = state_constants(tape, state, params.config);
  return audio_only_forward(p, params.config, s.z_a, s.ref_a, s.t, tape.constant(context)).value();
}

/// Mean squared error of the velocity prediction. JAVG steps weight the
/// video and audio terms equally; TTS-only steps score audio alone.
inline ad::Var flow_loss(ad::Var pred_v, ad::Var pred_a, ad::Var target_v, ad::Var target_a, StepKind kind) {
  ad::Var audio = ad::mse(pred_a, target_a);
  if (kind == StepKind::TtsOnly) return audio;
  return ad::scale(ad::add(ad::mse(pred_v, target_v), audio), 0.5);
}

inline double flow_loss(const Matrix& pred_v, const Matrix& pred_a, const Matrix& target_v, const Matrix& target_a,
                        StepKind kind) {
  require_same_shape(pred_a, target_a, "flow_loss audio");
  if (kind == StepKind::TtsOnly) {
    if (!pred_v.empty() || !target_v.empty()) {
      throw DimensionError(DimensionErrorKind::ShapeMismatch, "flow_loss: TTS-only steps take no video terms");
    }
  } else {
    require_same_shape(pred_v, target_v, "flow_loss video");
  }
  ad::Tape tape;
  ad::Var a = tape.constant(pred_a);
  ad::Var ta = tape.constant(target_a);
  if (kind == StepKind::TtsOnly) return flow_loss(a, a, ta, ta, kind).value()(0, 0);
  return flow_loss(tape.constant(pred_v), a, tape.constant(target_v), ta, kind).value()(0, 0);
}

}  // namespace omni
