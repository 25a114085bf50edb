#pragma once

#include <algorithm>
#include <array>
#include <cmath>
#include <cstddef>
#include <span>
#include <vector>

#include "omni/errors.hpp"
#include "omni/tensor.hpp"

namespace omni {

/// A 3-axis rotary coordinate: temporal, second axis (image row / audio
/// frame / 0), third axis (image column / 0 / TTS flag).
struct Coord3D {
  double t = 0.0;
  double a2 = 0.0;
  double a3 = 0.0;

  double axis(std::size_t i) const noexcept { return i == 0 ? t : (i == 1 ? a2 : a3); }
  bool operator==(const Coord3D&) const = default;
};

/// Rotary frequency allocation. head_dim is split into three contiguous
/// blocks, one per coordinate axis; each block rotates adjacent pairs.
struct RopeConfig {
  std::size_t head_dim = 8;
  std::array<std::size_t, 3> axis_split{4, 2, 2};
  double base_frequency = 10000.0;

  void validate() const {
    if (head_dim == 0 || head_dim % 2 != 0) {
      throw DimensionError(DimensionErrorKind::InvalidDim, "rope: head_dim must be even and positive");
    }
    std::size_t total = 0;
    for (std::size_t n : axis_split) {
      if (n < 2 || n % 2 != 0) {
        throw DimensionError(DimensionErrorKind::InvalidDim,
                             "rope: every axis needs an even block of at least 2 dims");
      }
      total += n;
    }
    if (total != head_dim) {
      throw DimensionError(DimensionErrorKind::InvalidDim, "rope: axis_split must sum to head_dim");
    }
    if (!(base_frequency > 0.0)) {
      throw DimensionError(DimensionErrorKind::InvalidDim, "rope: base frequency must be positive");
    }
  }

  /// Half of head_dim to the temporal axis, a quarter to each of the other
  /// two, rounded so every block is even and at least 2 wide.
  static RopeConfig for_head_dim(std::size_t head_dim, double base = 10000.0) {
    if (head_dim < 6 || head_dim % 2 != 0) {
      throw DimensionError(DimensionErrorKind::InvalidDim,
                           "rope: head_dim must be even and >= 6 for a 3-axis split");
    }
    const std::size_t side = std::max<std::size_t>(2, 2 * (head_dim / 8));
    RopeConfig cfg{head_dim, {head_dim - 2 * side, side, side}, base};
    cfg.validate();
    return cfg;
  }
};

namespace detail {

// Rotates v in place by coord; sign = -1 applies the inverse rotation.
inline void rotate_in_place(std::span<double> v, const Coord3D& coord, const RopeConfig& cfg,
                            double sign) {
  std::size_t offset = 0;
  for (std::size_t axis = 0; axis < 3; ++axis) {
    const std::size_t n = cfg.axis_split[axis];
    const double pos = coord.axis(axis);
    for (std::size_t p = 0; p < n / 2; ++p) {
      const double freq = std::pow(cfg.base_frequency, -2.0 * static_cast<double>(p) / static_cast<double>(n));
      const double angle = sign * pos * freq;
      const double c = std::cos(angle);
      const double s = std::sin(angle);
      double& x0 = v[offset + 2 * p];
      double& x1 = v[offset + 2 * p + 1];
      const double r0 = x0 * c - x1 * s;
      const double r1 = x0 * s + x1 * c;
      x0 = r0;
      x1 = r1;
    }
    offset += n;
  }
}

}  // namespace detail

/// Rotates every head block of every row. x is (N x heads*head_dim).
inline void rotate_heads(Matrix& x, std::span<const Coord3D> coords, const RopeConfig& cfg,
                         std::size_t heads, double sign = 1.0) {
  if (coords.size() != x.rows() || x.cols() != heads * cfg.head_dim) {
    throw DimensionError(DimensionErrorKind::DimMismatch,
                         "rope: " + std::to_string(x.rows()) + " rows of width " + std::to_string(x.cols()) +
                             " vs " + std::to_string(coords.size()) + " coords, " + std::to_string(heads) +
                             " heads of " + std::to_string(cfg.head_dim));
  }
  for (std::size_t r = 0; r < x.rows(); ++r) {
    auto row = x.row(r);
    for (std::size_t h = 0; h < heads; ++h) {
      detail::rotate_in_place(row.subspan(h * cfg.head_dim, cfg.head_dim), coords[r], cfg, sign);
    }
  }
}

inline Matrix rope_rotate(const Matrix& embeddings, std::span<const Coord3D> coords, const RopeConfig& cfg) {
  cfg.validate();
  Matrix out = embeddings;
  rotate_heads(out, coords, cfg, 1);
  return out;
}

/// Scaled dot-product logits between rotated queries and keys.
inline Matrix attention_logits(const Matrix& queries, const Matrix& keys, std::span<const Coord3D> q_coords,
                               std::span<const Coord3D> k_coords, const RopeConfig& cfg) {
  const Matrix q = rope_rotate(queries, q_coords, cfg);
  const Matrix k = rope_rotate(keys, k_coords, cfg);
  const double scale = 1.0 / std::sqrt(static_cast<double>(cfg.head_dim));
  Matrix logits(q.rows(), k.rows());
  for (std::size_t i = 0; i < q.rows(); ++i) {
    for (std::size_t j = 0; j < k.rows(); ++j) {
      double dot = 0.0;
      for (std::size_t c = 0; c < cfg.head_dim; ++c) dot += q(i, c) * k(j, c);
      logits(i, j) = dot * scale;
    }
  }
  return logits;
}

/// Plain 1-D positions (i, 0, 0) for i in [first, first + count).
inline std::vector<Coord3D> sequential_coords(std::size_t count, double first = 0.0) {
  std::vector<Coord3D> out(count);
  for (std::size_t i = 0; i < count; ++i) out[i].t = first + static_cast<double>(i);
  return out;
}

}  // namespace omni
