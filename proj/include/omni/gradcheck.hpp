#pragma once

// Central finite differences against analytic gradients. Only forward
// evaluations are used on the numeric side.

#include <algorithm>
#include <cmath>
#include <string>

#include "omni/params.hpp"

namespace omni {

struct GradCheckResult {
  double max_rel_error = 0.0;
  std::string worst;  // "name[flat index]"
  std::size_t entries = 0;

  void merge(const GradCheckResult& o) {
    if (o.max_rel_error > max_rel_error) {
      max_rel_error = o.max_rel_error;
      worst = o.worst;
    }
    entries += o.entries;
  }
};

/// |a - n| / max(|a|, |n|, floor). The floor turns the test into an
/// absolute one (tolerance * floor) for entries whose gradient is ~0.
inline double relative_error(double analytic, double numeric, double floor = 1e-4) {
  return std::abs(analytic - numeric) / std::max({std::abs(analytic), std::abs(numeric), floor});
}

/// Perturbs every entry of every tensor in `values` by +-step, evaluates
/// loss(values) and compares (f+ - f-) / 2 step with `analytic`.
template <class LossFn>
GradCheckResult finite_difference_check(ParamSet& values, const GradMap& analytic, LossFn&& loss, double step = 1e-5,
                                        double floor = 1e-4) {
  GradCheckResult out;
  for (auto& [name, m] : values) {
    const Matrix& g = analytic.at(name);
    require_same_shape(m, g, "finite_difference_check");
    auto flat = m.flat();
    for (std::size_t i = 0; i < flat.size(); ++i) {
      const double orig = flat[i];
      flat[i] = orig + step;
      const double up = loss(static_cast<const ParamSet&>(values));
      flat[i] = orig - step;
      const double down = loss(static_cast<const ParamSet&>(values));
      flat[i] = orig;
      const double numeric = (up - down) / (2.0 * step);
      const double err = relative_error(g.flat()[i], numeric, floor);
      ++out.entries;
      if (err > out.max_rel_error || out.worst.empty()) {
        if (err >= out.max_rel_error) {
          out.max_rel_error = err;
          out.worst = name + "[" + std::to_string(i) + "]";
        }
      }
    }
  }
  return out;
}

}  // namespace omni
