#pragma once

// Omni-context fusion. The text, image-reference, audio-reference and TTS
// sequences are stacked into one sequence and run through L pre-norm
// transformer blocks under semantic-anchored rotary positions. After every
// block the first len(c_txt) rows pass through a zero-initialized residual
// projection and are added onto the running text embedding.

#include <cstddef>
#include <cstdint>
#include <string>
#include <vector>

#include "omni/autodiff.hpp"
#include "omni/layers.hpp"
#include "omni/params.hpp"
#include "omni/positions.hpp"
#include "omni/rope.hpp"

namespace omni {

struct ConditionBundle {
  Matrix c_txt;  // (T_txt x d)
  Matrix c_v;    // image-reference tokens
  Matrix c_a;    // audio-reference tokens
  Matrix c_tts;  // phoneme embeddings
  PositionalAssignment assignment;

  std::size_t dim() const { return c_txt.cols(); }
};

struct OcfConfig {
  std::size_t d = 16;
  std::size_t layers = 2;
  std::size_t heads = 1;
  std::size_t ffn_mult = 2;

  std::size_t head_dim() const { return d / heads; }
  RopeConfig rope() const { return RopeConfig::for_head_dim(head_dim()); }
};

struct OcfParams {
  OcfConfig config;
  ParamSet tensors;
};

inline std::string ocf_name(std::size_t layer, const char* leaf) {
  return "ocf." + std::to_string(layer) + "." + leaf;
}

inline void validate(const OcfConfig& cfg) {
  if (cfg.d == 0 || cfg.layers == 0 || cfg.heads == 0 || cfg.ffn_mult == 0) {
    throw DimensionError(DimensionErrorKind::InvalidDim, "ocf: d, layers, heads and ffn_mult must be positive");
  }
  if (cfg.d % cfg.heads != 0) {
    throw DimensionError(DimensionErrorKind::InvalidDim,
                         "ocf: d=" + std::to_string(cfg.d) + " is not divisible by " + std::to_string(cfg.heads) + " heads");
  }
  const std::size_t hd = cfg.head_dim();
  if (hd < 6 || hd % 2 != 0) {
    throw DimensionError(DimensionErrorKind::InvalidDim,
                         "ocf: head dim " + std::to_string(hd) + " cannot carry a 3-axis rotary split");
  }
}

/// Residual projections start at exactly zero; every other weight is
/// uniform in +-1/sqrt(fan_in) and norm gains start at one.
inline OcfParams init_ocf_params(const OcfConfig& cfg, std::uint64_t seed) {
  validate(cfg);
  Rng rng(seed);
  OcfParams out{cfg, {}};
  const std::size_t d = cfg.d;
  const std::size_t hidden = cfg.ffn_mult * d;
  for (std::size_t l = 0; l < cfg.layers; ++l) {
    out.tensors[ocf_name(l, "attn_norm")] = layers::ones_row(d);
    out.tensors[ocf_name(l, "attn.wq")] = layers::scaled_uniform(d, d, rng);
    out.tensors[ocf_name(l, "attn.wk")] = layers::scaled_uniform(d, d, rng);
    out.tensors[ocf_name(l, "attn.wv")] = layers::scaled_uniform(d, d, rng);
    out.tensors[ocf_name(l, "attn.wo")] = layers::scaled_uniform(d, d, rng);
    out.tensors[ocf_name(l, "ffn_norm")] = layers::ones_row(d);
    out.tensors[ocf_name(l, "ffn.w1")] = layers::scaled_uniform(hidden, d, rng);
    out.tensors[ocf_name(l, "ffn.w2")] = layers::scaled_uniform(d, hidden, rng);
    out.tensors[ocf_name(l, "w_res")] = Matrix(d, d);
  }
  return out;
}

inline OcfParams init_ocf_params(std::size_t d, std::size_t layers, std::uint64_t seed, std::size_t heads = 1) {
  return init_ocf_params(OcfConfig{d, layers, heads, 2}, seed);
}

inline void validate_bundle(const ConditionBundle& b, std::size_t d) {
  auto bad = [](const std::string& what) { throw DimensionError(DimensionErrorKind::ShapeMismatch, "bundle: " + what); };
  if (b.c_txt.cols() != d) bad("c_txt width " + std::to_string(b.c_txt.cols()) + " != " + std::to_string(d));
  for (const Matrix* m : {&b.c_v, &b.c_a, &b.c_tts}) {
    if (m->rows() != 0 && m->cols() != d) bad("reference width " + std::to_string(m->cols()) + " != " + std::to_string(d));
  }
  const auto& a = b.assignment;
  if (a.text_coords.size() != b.c_txt.rows()) bad("text coords do not match c_txt length");
  if (a.image_count() != b.c_v.rows()) bad("image coords do not match c_v length");
  if (a.audio_count() != b.c_a.rows()) bad("audio coords do not match c_a length");
  if (a.tts_count() != b.c_tts.rows()) bad("tts coords do not match c_tts length");
}

/// Differentiable forward pass. Returns the enriched (T_txt x d) text sequence.
inline ad::Var ocf_forward(ParamBinder& p, const OcfConfig& cfg, ad::Var c_txt, ad::Var c_v, ad::Var c_a,
                           ad::Var c_tts, const PositionalAssignment& assignment, const RopeConfig& rope) {
  validate(cfg);
  if (rope.head_dim != cfg.head_dim()) {
    throw DimensionError(DimensionErrorKind::ShapeMismatch,
                         "ocf: rope head_dim " + std::to_string(rope.head_dim) + " != per-head dim " +
                             std::to_string(cfg.head_dim()));
  }
  rope.validate();
  const std::size_t text_len = c_txt.rows();
  std::vector<ad::Var> parts{c_txt};
  for (ad::Var v : {c_v, c_a, c_tts})
    if (v.rows() > 0) parts.push_back(v);
  const std::vector<Coord3D> coords = assignment.flattened();
  ad::Var seq = parts.size() == 1 ? c_txt : ad::concat_rows(parts);
  if (coords.size() != seq.rows()) {
    throw DimensionError(DimensionErrorKind::ShapeMismatch, "ocf: coordinate count does not match fused sequence length");
  }
  const layers::RotaryPositions rotary{coords, coords, rope};

  ad::Var out = c_txt;
  for (std::size_t l = 0; l < cfg.layers; ++l) {
    ad::Var normed = ad::rmsnorm(seq, p(ocf_name(l, "attn_norm")));
    ad::Var h = ad::add(seq, layers::attention(p, ocf_name(l, "attn"), normed, normed, cfg.heads, rotary));
    h = ad::add(h, layers::feed_forward(p, ocf_name(l, "ffn"), ad::rmsnorm(h, p(ocf_name(l, "ffn_norm")))));
    seq = h;
    ad::Var text_rows = ad::slice_rows(h, 0, text_len);
    out = ad::add(out, ad::matmul_nt(text_rows, p(ocf_name(l, "w_res"))));
  }
  return out;
}

/// Inference-only convenience wrapper.
inline Matrix ocf_forward(const ConditionBundle& bundle, const OcfParams& params, const RopeConfig& rope) {
  validate_bundle(bundle, params.config.d);
  ad::Tape tape;
  ParamBinder p(tape, params.tensors, false);
  auto in = [&](const Matrix& m) { return tape.constant(m.rows() == 0 ? Matrix(0, params.config.d) : m); };
  ad::Var out = ocf_forward(p, params.config, in(bundle.c_txt), in(bundle.c_v), in(bundle.c_a), in(bundle.c_tts),
                            bundle.assignment, rope);
  return out.value();
}

}  // namespace omni
