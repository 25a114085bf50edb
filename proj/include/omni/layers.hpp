#pragma once

#include <cmath>
#include <optional>
#include <span>
#include <string>
#include <vector>

#include "omni/autodiff.hpp"
#include "omni/params.hpp"
#include "omni/rope.hpp"

namespace omni::layers {

/// Rotary positions for the query and key sides of an attention call.
struct RotaryPositions {
  std::span<const Coord3D> query;
  std::span<const Coord3D> key;
  RopeConfig config;
};

/// Multi-head attention with weights "<prefix>.wq/.wk/.wv/.wo". wq/wo are
/// (inner x q_dim)/(q_dim x inner); wk/wv are (inner x kv_dim).
inline ad::Var attention(ParamBinder& p, const std::string& prefix, ad::Var queries, ad::Var keys_values,
                         std::size_t heads, const std::optional<RotaryPositions>& rotary = std::nullopt) {
  ad::Var q = ad::matmul_nt(queries, p(prefix + ".wq"));
  ad::Var k = ad::matmul_nt(keys_values, p(prefix + ".wk"));
  ad::Var v = ad::matmul_nt(keys_values, p(prefix + ".wv"));
  const std::size_t inner = q.cols();
  if (inner % heads != 0) {
    throw DimensionError(DimensionErrorKind::InvalidDim, prefix + ": inner width not divisible by head count");
  }
  const std::size_t hd = inner / heads;
  if (rotary) {
    q = ad::rope(q, rotary->query, rotary->config, heads);
    k = ad::rope(k, rotary->key, rotary->config, heads);
  }
  const double scale = 1.0 / std::sqrt(static_cast<double>(hd));
  std::vector<ad::Var> outs;
  outs.reserve(heads);
  for (std::size_t h = 0; h < heads; ++h) {
    ad::Var qh = heads == 1 ? q : ad::slice_cols(q, h * hd, (h + 1) * hd);
    ad::Var kh = heads == 1 ? k : ad::slice_cols(k, h * hd, (h + 1) * hd);
    ad::Var vh = heads == 1 ? v : ad::slice_cols(v, h * hd, (h + 1) * hd);
    ad::Var probs = ad::softmax_rows(ad::scale(ad::matmul_nt(qh, kh), scale));
    outs.push_back(ad::matmul(probs, vh));
  }
  ad::Var o = heads == 1 ? outs.front() : ad::concat_cols(outs);
  return ad::matmul_nt(o, p(prefix + ".wo"));
}

/// Two-layer GELU feed-forward "<prefix>.w1" (hidden x d), "<prefix>.w2" (d x hidden).
inline ad::Var feed_forward(ParamBinder& p, const std::string& prefix, ad::Var x) {
  return ad::matmul_nt(ad::gelu(ad::matmul_nt(x, p(prefix + ".w1"))), p(prefix + ".w2"));
}

/// Uniform(-1/sqrt(fan_in), 1/sqrt(fan_in)) weight of shape (out x in).
inline Matrix scaled_uniform(std::size_t out, std::size_t in, Rng& rng) {
  return random_uniform(out, in, rng, 1.0 / std::sqrt(static_cast<double>(in)));
}

inline Matrix ones_row(std::size_t n) { return Matrix(1, n, 1.0); }

}  // namespace omni::layers
