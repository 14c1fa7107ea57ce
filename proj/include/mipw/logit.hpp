#pragma once

#include <cmath>

namespace mipw {

inline double expit(double v) noexcept {
  if (v >= 0) return 1.0 / (1.0 + std::exp(-v));
  const double e = std::exp(v);
  return e / (1.0 + e);
}

inline double logit(double p) noexcept { return std::log(p / (1.0 - p)); }

// log(1 + exp(v)) without overflow.
inline double softplus(double v) noexcept {
  return v > 0 ? v + std::log1p(std::exp(-v)) : std::log1p(std::exp(v));
}

}  // namespace mipw
