#pragma once

// Ways of combining multiple imputation with propensity-score estimation:
//   within       estimate in every completed dataset, average the estimates
//   across_aps   average propensity scores over imputations, estimate once
//   across_apm   average model coefficients and the imputed covariate
//   across_apw   average inverse probability weights
//   within_imps  within method on imputed propensity scores
//   impw         single IPW estimate with mean-imputed weights

#include <algorithm>
#include <cstddef>
#include <span>
#include <string>
#include <vector>

#include "mipw/errors.hpp"
#include "mipw/estimators.hpp"
#include "mipw/imputation.hpp"
#include "mipw/propensity.hpp"

namespace mipw {

enum class BaseEstimator { ht, hajek, match, outcome_regression };
enum class IpwForm { ht, hajek };

inline const char* to_string(BaseEstimator b) {
  switch (b) {
    case BaseEstimator::ht: return "ht";
    case BaseEstimator::hajek: return "hajek";
    case BaseEstimator::match: return "match";
    case BaseEstimator::outcome_regression: return "outcome_regression";
  }
  return "?";
}

inline const char* to_string(IpwForm f) { return f == IpwForm::ht ? "ht" : "hajek"; }

struct MethodResult {
  std::string method;
  std::string base;
  double tau_hat = 0.0;
  std::vector<double> per_imputation;  // within methods
  std::vector<double> pooled;          // across methods: per-unit score or weight
  std::vector<double> pooled_coefficients;  // across_apm
};

// Propensity model refit on every completed dataset, with the per-unit scores.
struct StackFits {
  std::size_t m = 0;
  std::size_t n = 0;
  std::vector<PropensityModel> models;
  std::vector<double> scores;  // row-major m x n

  std::span<const double> scores_for(std::size_t k) const { return {scores.data() + k * n, n}; }
};

inline StackFits fit_stack(const ImputedStack& st) {
  StackFits f;
  f.m = st.m;
  f.n = st.n();
  f.models.reserve(st.m);
  f.scores.resize(f.m * f.n);
  const auto& ds = st.base;
  for (std::size_t k = 0; k < st.m; ++k) {
    const auto x = st.completed_x(k);
    try {
      f.models.push_back(fit_propensity_model(ds.world, ds.z, x, ds.a));
    } catch (const Error& e) {
      throw ImputationError(k, e.what());
    }
    const PropensityModel& model = f.models.back();
    double* out = f.scores.data() + k * f.n;
    if (ds.world == WorldKind::discrete) {
      // Four distinct scores; evaluate once per cell.
      double cell[4];
      for (int c = 0; c < 4; ++c) cell[c] = model.score(c / 2, c % 2);
      for (std::size_t i = 0; i < f.n; ++i)
        out[i] = cell[static_cast<int>(ds.z[i]) * 2 + static_cast<int>(x[i])];
    } else {
      for (std::size_t i = 0; i < f.n; ++i) out[i] = model.score(ds.z[i], x[i]);
    }
  }
  return f;
}

namespace detail {

inline EffectEstimate ipw(IpwForm form, std::span<const double> y, std::span<const int> a,
                          std::span<const double> w) {
  return form == IpwForm::ht ? ht_ipw(y, a, w) : hajek_ipw(y, a, w);
}

// One full-data estimate from a score vector.
inline EffectEstimate score_based(BaseEstimator base, const Dataset& ds,
                                  std::span<const double> ps) {
  switch (base) {
    case BaseEstimator::ht:
    case BaseEstimator::hajek: {
      const auto w = ip_weights(ps, ds.a);
      return ipw(base == BaseEstimator::ht ? IpwForm::ht : IpwForm::hajek, ds.y, ds.a, w);
    }
    case BaseEstimator::match:
      return match_ps(ps, ds.a, ds.y);
    case BaseEstimator::outcome_regression:
      break;
  }
  throw ConfigError("outcome regression does not take propensity scores");
}

inline MethodResult average(std::string method, std::string base, std::vector<double> per) {
  MethodResult res;
  res.method = std::move(method);
  res.base = std::move(base);
  double s = 0.0;
  for (double v : per) s += v;
  res.tau_hat = s / static_cast<double>(per.size());
  res.per_imputation = std::move(per);
  return res;
}

}  // namespace detail

/// Within method: the base estimator runs on each completed dataset (with a
/// propensity model refit on that dataset) and the M estimates are averaged.
/// Pass `fits` to reuse per-imputation fits computed by fit_stack.
inline MethodResult within(const ImputedStack& st, BaseEstimator base,
                           const StackFits* fits = nullptr) {
  if (st.m == 0) throw ConfigError("empty imputation stack");
  const Dataset& ds = st.base;
  StackFits local;
  if (base != BaseEstimator::outcome_regression && fits == nullptr) {
    local = fit_stack(st);
    fits = &local;
  }
  std::vector<double> per(st.m);
  for (std::size_t k = 0; k < st.m; ++k) {
    try {
      if (base == BaseEstimator::outcome_regression)
        per[k] = outcome_regression(ds.z, st.completed_x(k), ds.a, ds.y, ds.world).tau_hat;
      else
        per[k] = detail::score_based(base, ds, fits->scores_for(k)).tau_hat;
    } catch (const ImputationError&) {
      throw;
    } catch (const Error& e) {
      throw ImputationError(k, e.what());
    }
  }
  return detail::average("within", to_string(base), std::move(per));
}

/// Per-unit propensity scores averaged over imputations, then one estimate.
inline MethodResult across_aps(const ImputedStack& st, BaseEstimator base,
                               const StackFits* fits = nullptr) {
  if (base == BaseEstimator::outcome_regression)
    throw ConfigError("across_aps needs a propensity-score base estimator");
  if (st.m == 0) throw ConfigError("empty imputation stack");
  StackFits local;
  if (fits == nullptr) {
    local = fit_stack(st);
    fits = &local;
  }
  const std::size_t n = st.n();
  std::vector<double> avg(n, 0.0);
  for (std::size_t k = 0; k < st.m; ++k) {
    const auto s = fits->scores_for(k);
    for (std::size_t i = 0; i < n; ++i) avg[i] += s[i];
  }
  for (double& v : avg) v /= static_cast<double>(st.m);
  MethodResult res;
  res.method = "across_aps";
  res.base = to_string(base);
  res.tau_hat = detail::score_based(base, st.base, avg).tau_hat;
  res.pooled = std::move(avg);
  return res;
}

/// Coefficients averaged over the per-imputation logit fits; a unit missing X
/// is scored at the mean of its imputed values. Hajek IPW on those scores.
inline MethodResult across_apm(const ImputedStack& st, const StackFits* fits = nullptr) {
  if (st.m == 0) throw ConfigError("empty imputation stack");
  StackFits local;
  if (fits == nullptr) {
    local = fit_stack(st);
    fits = &local;
  }
  const Dataset& ds = st.base;
  const std::size_t n = st.n();
  PropensityModel pooled = fits->models.front();
  pooled.fit.coefficients.setZero();
  for (const auto& model : fits->models) pooled.fit.coefficients += model.fit.coefficients;
  pooled.fit.coefficients /= static_cast<double>(st.m);

  std::vector<double> ps(n);
  for (std::size_t i = 0; i < n; ++i) {
    double x;
    if (ds.r[i] == 1) {
      x = *ds.x[i];
    } else {
      x = 0.0;
      for (std::size_t k = 0; k < st.m; ++k) x += st.x_imputed[k * n + i];
      x /= static_cast<double>(st.m);
    }
    ps[i] = pooled.score(ds.z[i], x);
  }
  MethodResult res;
  res.method = "across_apm";
  res.base = "hajek";
  res.tau_hat = detail::score_based(BaseEstimator::hajek, ds, ps).tau_hat;
  res.pooled = std::move(ps);
  res.pooled_coefficients.assign(pooled.fit.coefficients.data(),
                                 pooled.fit.coefficients.data() + pooled.fit.coefficients.size());
  return res;
}

// Row-major m x n inverse probability weights, one row per completed dataset.
inline std::vector<double> per_imputation_weights(const ImputedStack& st, const StackFits& fits) {
  const std::size_t n = st.n();
  std::vector<double> w(st.m * n);
  for (std::size_t k = 0; k < st.m; ++k) {
    try {
      const auto wk = ip_weights(fits.scores_for(k), st.base.a);
      std::copy(wk.begin(), wk.end(), w.begin() + static_cast<std::ptrdiff_t>(k * n));
    } catch (const Error& e) {
      throw ImputationError(k, e.what());
    }
  }
  return w;
}

/// Inverse probability weights averaged per unit over imputations, then one
/// HT or Hajek estimate. With the HT form this equals within(ht) exactly.
inline MethodResult across_apw(const ImputedStack& st, IpwForm form,
                               const StackFits* fits = nullptr) {
  if (st.m == 0) throw ConfigError("empty imputation stack");
  StackFits local;
  if (fits == nullptr) {
    local = fit_stack(st);
    fits = &local;
  }
  const std::size_t n = st.n();
  const auto w = per_imputation_weights(st, *fits);
  std::vector<double> avg(n, 0.0);
  for (std::size_t k = 0; k < st.m; ++k)
    for (std::size_t i = 0; i < n; ++i) avg[i] += w[k * n + i];
  for (double& v : avg) v /= static_cast<double>(st.m);
  MethodResult res;
  res.method = "across_apw";
  res.base = to_string(form);
  res.tau_hat = detail::ipw(form, st.base.y, st.base.a, avg).tau_hat;
  res.pooled = std::move(avg);
  return res;
}

/// Within method on a propensity-imputation stack: the imputed scores are the
/// propensity scores; the covariates are not used again.
inline MethodResult within_imps(const ImputedStack& st, BaseEstimator base) {
  if (!st.u_imputed) throw ConfigError("within_imps needs a stack with imputed propensity scores");
  if (base == BaseEstimator::outcome_regression)
    throw ConfigError("within_imps supports ht, hajek and match bases");
  std::vector<double> per(st.m);
  for (std::size_t k = 0; k < st.m; ++k) {
    try {
      per[k] = detail::score_based(base, st.base, st.imputed_u(k)).tau_hat;
    } catch (const Error& e) {
      throw ImputationError(k, e.what());
    }
  }
  return detail::average("within_imps", to_string(base), std::move(per));
}

// IPW with mean-imputed weights; no stack.
inline MethodResult impw_estimate(const Dataset& ds, IpwForm form) {
  ProxyWeights pw = proxy_weights_impw(ds);
  MethodResult res;
  res.method = "impw";
  res.base = to_string(form);
  res.tau_hat = detail::ipw(form, ds.y, ds.a, pw.values).tau_hat;
  res.pooled = std::move(pw.values);
  return res;
}

}  // namespace mipw
