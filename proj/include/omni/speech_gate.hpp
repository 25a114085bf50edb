#pragma once

// Masked TTS-to-prompt cross-attention. Only text tokens strictly inside an
// <S> ... <E> span query the phoneme embeddings, and each utterance only
// sees its own phonemes. Every other row of the output is a plain copy of
// the input row.

#include <cstddef>
#include <cstdint>
#include <string>
#include <vector>

#include <json.hpp>

#include "omni/autodiff.hpp"
#include "omni/caption.hpp"
#include "omni/layers.hpp"
#include "omni/params.hpp"

namespace omni {

struct SpeechMask {
  std::vector<std::uint8_t> values;  // 1 inside utterance content
  std::vector<int> utterance;        // owning utterance ordinal, -1 outside

  std::size_t size() const noexcept { return values.size(); }
  std::size_t active() const {
    std::size_t n = 0;
    for (auto v : values) n += v;
    return n;
  }
  bool operator==(const SpeechMask&) const = default;
};

inline SpeechMask build_speech_mask(const OmniCaption& caption) {
  SpeechMask m;
  m.values.assign(caption.tokens.size(), 0);
  m.utterance.assign(caption.tokens.size(), -1);
  for (std::size_t u = 0; u < caption.utterances.size(); ++u) {
    const auto& utt = caption.utterances[u];
    for (std::size_t i = utt.content_start; i <= utt.content_end && i < m.values.size(); ++i) {
      m.values[i] = 1;
      m.utterance[i] = static_cast<int>(u);
    }
  }
  return m;
}

inline nlohmann::json mask_to_json(const SpeechMask& m) {
  nlohmann::json arr = nlohmann::json::array();
  for (auto v : m.values) arr.push_back(static_cast<int>(v));
  return arr;
}

class SpeechGateError : public Error {
 public:
  using Error::Error;
};

struct MtpcaConfig {
  std::size_t d = 16;
  std::size_t heads = 1;
};

struct MtpcaParams {
  MtpcaConfig config;
  ParamSet tensors;  // mtpca.attn.wq/wk/wv (d x d), mtpca.attn.wo (d x d, zero at init)
};

/// wq/wk/wv uniform in +-1/sqrt(d); the output projection starts at zero.
inline MtpcaParams init_mtpca_params(const MtpcaConfig& cfg, std::uint64_t seed) {
  if (cfg.d == 0 || cfg.heads == 0 || cfg.d % cfg.heads != 0) {
    throw DimensionError(DimensionErrorKind::InvalidDim, "mtpca: d must be positive and divisible by heads");
  }
  Rng rng(seed);
  MtpcaParams p{cfg, {}};
  p.tensors["mtpca.attn.wq"] = layers::scaled_uniform(cfg.d, cfg.d, rng);
  p.tensors["mtpca.attn.wk"] = layers::scaled_uniform(cfg.d, cfg.d, rng);
  p.tensors["mtpca.attn.wv"] = layers::scaled_uniform(cfg.d, cfg.d, rng);
  p.tensors["mtpca.attn.wo"] = Matrix(cfg.d, cfg.d);
  return p;
}

/// Differentiable gate. tts_counts splits c_tts into per-utterance runs in
/// utterance order; when it is empty every active row attends to all of
/// c_tts.
inline ad::Var mtpca_forward(ParamBinder& p, const MtpcaConfig& cfg, ad::Var c_txt, ad::Var c_tts,
                             const std::vector<std::size_t>& tts_counts, const SpeechMask& mask) {
  if (mask.size() != c_txt.rows() || mask.utterance.size() != mask.size()) {
    throw DimensionError(DimensionErrorKind::ShapeMismatch,
                         "mtpca: mask length " + std::to_string(mask.size()) + " != c_txt length " +
                             std::to_string(c_txt.rows()));
  }
  if (c_tts.rows() > 0 && c_tts.cols() != c_txt.cols()) {
    throw DimensionError(DimensionErrorKind::ShapeMismatch, "mtpca: c_tts width differs from c_txt width");
  }
  if (mask.active() == 0) return c_txt;
  if (c_tts.rows() == 0) throw SpeechGateError("mtpca: mask has active positions but c_tts is empty");

  // (text rows, tts row range) per attention group
  struct Group {
    std::vector<std::size_t> rows;
    std::size_t tts_begin = 0;
    std::size_t tts_end = 0;
  };
  std::vector<Group> groups;
  if (tts_counts.empty()) {
    Group g;
    for (std::size_t i = 0; i < mask.size(); ++i)
      if (mask.values[i]) g.rows.push_back(i);
    g.tts_end = c_tts.rows();
    groups.push_back(std::move(g));
  } else {
    std::size_t total = 0;
    for (std::size_t c : tts_counts) total += c;
    if (total != c_tts.rows()) {
      throw DimensionError(DimensionErrorKind::ShapeMismatch, "mtpca: tts_counts do not sum to c_tts length");
    }
    groups.resize(tts_counts.size());
    std::size_t at = 0;
    for (std::size_t u = 0; u < tts_counts.size(); ++u) {
      groups[u].tts_begin = at;
      at += tts_counts[u];
      groups[u].tts_end = at;
    }
    for (std::size_t i = 0; i < mask.size(); ++i) {
      if (!mask.values[i]) continue;
      const int u = mask.utterance[i];
      if (u < 0 || static_cast<std::size_t>(u) >= groups.size()) {
        throw DimensionError(DimensionErrorKind::ShapeMismatch,
                             "mtpca: active position " + std::to_string(i) + " has no tts run");
      }
      groups[static_cast<std::size_t>(u)].rows.push_back(i);
    }
  }

  std::vector<std::size_t> rows;
  std::vector<ad::Var> deltas;
  for (const Group& g : groups) {
    if (g.rows.empty()) continue;
    if (g.tts_end == g.tts_begin) {
      throw SpeechGateError("mtpca: an utterance with active positions has no tts tokens");
    }
    ad::Var q = ad::gather_rows(c_txt, g.rows);
    ad::Var kv = (g.tts_begin == 0 && g.tts_end == c_tts.rows()) ? c_tts : ad::slice_rows(c_tts, g.tts_begin, g.tts_end);
    deltas.push_back(layers::attention(p, "mtpca.attn", q, kv, cfg.heads));
    rows.insert(rows.end(), g.rows.begin(), g.rows.end());
  }
  ad::Var delta = deltas.size() == 1 ? deltas.front() : ad::concat_rows(deltas);
  return ad::scatter_add_rows(c_txt, rows, delta);
}

inline Matrix mtpca_forward(const Matrix& c_txt, const Matrix& c_tts, const SpeechMask& mask, const MtpcaParams& params,
                            const std::vector<std::size_t>& tts_counts = {}) {
  ad::Tape tape;
  ParamBinder p(tape, params.tensors, false);
  ad::Var out = mtpca_forward(p, params.config, tape.constant(c_txt),
                              tape.constant(c_tts.rows() == 0 ? Matrix(0, c_txt.cols()) : c_tts), tts_counts, mask);
  return out.value();
}

}  // namespace omni
