#pragma once

// Full-data treatment-effect estimators: Horvitz-Thompson and Hajek IPW,
// propensity-score matching, and outcome regression.

#include <Eigen/Dense>

#include <algorithm>
#include <array>
#include <cmath>
#include <cstddef>
#include <optional>
#include <span>
#include <sstream>
#include <string>
#include <vector>

#include "mipw/dgp.hpp"
#include "mipw/errors.hpp"

namespace mipw {

struct EffectEstimate {
  double tau_hat = 0.0;
  // Group terms for the IPW forms; tau_hat == theta1_hat - theta0_hat.
  std::optional<double> theta1_hat;
  std::optional<double> theta0_hat;
  std::string estimator;
  std::size_t n = 0;
};

namespace detail {

inline void check_lengths(std::size_t n, std::size_t m, std::size_t k) {
  if (n == 0) throw SizeError("estimator input is empty");
  if (m != n || k != n) throw SizeError("estimator inputs have different lengths");
}

}  // namespace detail

/// theta1 = (1/N) sum a w y, theta0 = (1/N) sum (1-a) w y. The divisor is
/// always the full sample size.
inline EffectEstimate ht_ipw(std::span<const double> y, std::span<const int> a,
                             std::span<const double> weights) {
  detail::check_lengths(y.size(), a.size(), weights.size());
  double s1 = 0.0, s0 = 0.0;
  for (std::size_t i = 0; i < y.size(); ++i) {
    if (!(weights[i] > 0.0)) throw ConfigError("IPW weights must be positive");
    (a[i] == 1 ? s1 : s0) += weights[i] * y[i];
  }
  const double n = static_cast<double>(y.size());
  EffectEstimate est;
  est.theta1_hat = s1 / n;
  est.theta0_hat = s0 / n;
  est.tau_hat = *est.theta1_hat - *est.theta0_hat;
  est.estimator = "ht";
  est.n = y.size();
  return est;
}

// Weighted outcome mean within each arm.
inline EffectEstimate hajek_ipw(std::span<const double> y, std::span<const int> a,
                                std::span<const double> weights) {
  detail::check_lengths(y.size(), a.size(), weights.size());
  double wy1 = 0.0, w1 = 0.0, wy0 = 0.0, w0 = 0.0;
  for (std::size_t i = 0; i < y.size(); ++i) {
    if (!(weights[i] > 0.0)) throw ConfigError("IPW weights must be positive");
    if (a[i] == 1) {
      wy1 += weights[i] * y[i];
      w1 += weights[i];
    } else {
      wy0 += weights[i] * y[i];
      w0 += weights[i];
    }
  }
  if (!(w1 > 0.0)) throw GroupEmptyError("treated group has zero total weight");
  if (!(w0 > 0.0)) throw GroupEmptyError("control group has zero total weight");
  EffectEstimate est;
  est.theta1_hat = wy1 / w1;
  est.theta0_hat = wy0 / w0;
  est.tau_hat = *est.theta1_hat - *est.theta0_hat;
  est.estimator = "hajek";
  est.n = y.size();
  return est;
}

enum class MatchTies {
  average,       // average the outcomes of every equally-near match
  lowest_index,  // keep only the lowest-index match
};

namespace detail {

// Nearest-score lookup into one arm. Distinct scores are sorted; each carries
// the summed outcome, count, and lowest row index of units holding it.
class ArmIndex {
 public:
  ArmIndex(std::span<const double> ps, std::span<const int> a, std::span<const double> y,
           int arm) {
    // Few distinct scores is the common case (discrete covariates); collect
    // them by linear scan and fall back to sorting when there are many.
    constexpr std::size_t kLinearLimit = 32;
    bool many = false;
    for (std::size_t i = 0; i < ps.size(); ++i) {
      if (a[i] != arm) continue;
      if (!many) {
        auto it = std::find_if(groups_.begin(), groups_.end(),
                               [&](const Group& g) { return g.score == ps[i]; });
        if (it != groups_.end()) {
          it->sum += y[i];
          it->count += 1;
          continue;
        }
        if (groups_.size() < kLinearLimit) {
          groups_.push_back({ps[i], y[i], 1, i});
          continue;
        }
        many = true;
      }
      break;
    }
    if (many) {
      groups_.clear();
      std::vector<std::size_t> idx;
      for (std::size_t i = 0; i < ps.size(); ++i)
        if (a[i] == arm) idx.push_back(i);
      std::stable_sort(idx.begin(), idx.end(),
                       [&](std::size_t l, std::size_t r) { return ps[l] < ps[r]; });
      for (std::size_t i : idx) {
        if (!groups_.empty() && groups_.back().score == ps[i]) {
          groups_.back().sum += y[i];
          groups_.back().count += 1;
        } else {
          groups_.push_back({ps[i], y[i], 1, i});
        }
      }
    } else {
      std::sort(groups_.begin(), groups_.end(),
                [](const Group& l, const Group& r) { return l.score < r.score; });
    }
  }

  bool empty() const { return groups_.empty(); }

  // Outcome imputed for a unit of the other arm with score s.
  double counterfactual(double s, MatchTies ties, std::span<const double> y) const {
    auto it = std::lower_bound(groups_.begin(), groups_.end(), s,
                               [](const Group& g, double v) { return g.score < v; });
    const Group* right = it != groups_.end() ? &*it : nullptr;
    const Group* left = it != groups_.begin() ? &*(it - 1) : nullptr;
    const Group* best = nullptr;
    const Group* also = nullptr;
    if (right && left) {
      const double dr = right->score - s, dl = s - left->score;
      if (dr < dl) best = right;
      else if (dl < dr) best = left;
      else {
        best = left->first_index < right->first_index ? left : right;
        also = best == left ? right : left;
      }
    } else {
      best = right ? right : left;
    }
    if (ties == MatchTies::lowest_index) return y[best->first_index];
    if (also) return (best->sum + also->sum) / static_cast<double>(best->count + also->count);
    return best->sum / static_cast<double>(best->count);
  }

 private:
  struct Group {
    double score;
    double sum;
    std::size_t count;
    std::size_t first_index;
  };
  std::vector<Group> groups_;
};

}  // namespace detail

/// ATE-form nearest-neighbour matching on the propensity score, with
/// replacement and no caliper. Each unit's missing potential outcome is taken
/// from its nearest opposite-arm neighbour; equally near neighbours are
/// averaged (or, with MatchTies::lowest_index, the lowest row index wins).
inline EffectEstimate match_ps(std::span<const double> ps, std::span<const int> a,
                               std::span<const double> y, MatchTies ties = MatchTies::average) {
  detail::check_lengths(ps.size(), a.size(), y.size());
  const detail::ArmIndex treated(ps, a, y, 1);
  const detail::ArmIndex controls(ps, a, y, 0);
  if (treated.empty()) throw GroupEmptyError("matching needs at least one treated unit");
  if (controls.empty()) throw GroupEmptyError("matching needs at least one control unit");
  double total = 0.0;
  for (std::size_t i = 0; i < ps.size(); ++i) {
    if (a[i] == 1)
      total += y[i] - controls.counterfactual(ps[i], ties, y);
    else
      total += treated.counterfactual(ps[i], ties, y) - y[i];
  }
  EffectEstimate est;
  est.tau_hat = total / static_cast<double>(ps.size());
  est.estimator = "match";
  est.n = ps.size();
  return est;
}

/// g-formula with an outcome model. Discrete world: saturated cell means of Y
/// over (z, x, a), averaged over the empirical (z, x) distribution.
/// Continuous world: least squares of y on (1, a, z, x); tau is the a slope.
inline EffectEstimate outcome_regression(std::span<const double> z, std::span<const double> x,
                                         std::span<const int> a, std::span<const double> y,
                                         WorldKind world) {
  const std::size_t n = z.size();
  detail::check_lengths(n, x.size(), a.size());
  if (y.size() != n) throw SizeError("estimator inputs have different lengths");
  EffectEstimate est;
  est.estimator = "outcome_regression";
  est.n = n;

  if (world == WorldKind::discrete) {
    std::array<double, 8> sum{}, count{};
    for (std::size_t i = 0; i < n; ++i) {
      const int c = ((static_cast<int>(z[i]) * 2 + static_cast<int>(x[i])) * 2) + a[i];
      sum[c] += y[i];
      count[c] += 1;
    }
    double tau = 0.0;
    for (int zx = 0; zx < 4; ++zx) {
      const double n0 = count[zx * 2], n1 = count[zx * 2 + 1];
      if (n0 + n1 == 0) continue;
      if (n0 == 0 || n1 == 0) {
        std::ostringstream os;
        os << "outcome regression cell (z=" << zx / 2 << ",x=" << zx % 2
           << ",a=" << (n0 == 0 ? 0 : 1) << ") is empty";
        throw FitError(os.str());
      }
      tau += (n0 + n1) / static_cast<double>(n) * (sum[zx * 2 + 1] / n1 - sum[zx * 2] / n0);
    }
    est.tau_hat = tau;
    return est;
  }

  Eigen::MatrixXd design(static_cast<Eigen::Index>(n), 4);
  Eigen::VectorXd rhs(static_cast<Eigen::Index>(n));
  for (std::size_t i = 0; i < n; ++i) {
    design.row(i) << 1.0, static_cast<double>(a[i]), z[i], x[i];
    rhs[i] = y[i];
  }
  Eigen::ColPivHouseholderQR<Eigen::MatrixXd> qr(design);
  qr.setThreshold(1e-10);
  if (qr.rank() < 4) {
    static const char* names[] = {"(intercept)", "a", "z", "x"};
    throw FitError(std::string("outcome regression design is rank deficient (column '") +
                   names[qr.colsPermutation().indices()[qr.rank()]] + "')");
  }
  const Eigen::VectorXd beta = qr.solve(rhs);
  est.tau_hat = beta[1];
  return est;
}

}  // namespace mipw
