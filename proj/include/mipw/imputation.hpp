#pragma once

// Multiple imputation of the partially observed covariate, imputation of the
// propensity score itself, and the mean-imputed probability weight.

#include <Eigen/Dense>

#include <array>
#include <cmath>
#include <cstddef>
#include <cstdint>
#include <optional>
#include <ostream>
#include <random>
#include <span>
#include <sstream>
#include <string>
#include <vector>

#include "mipw/dgp.hpp"
#include "mipw/errors.hpp"
#include "mipw/exact.hpp"
#include "mipw/logit.hpp"
#include "mipw/propensity.hpp"
#include "mipw/rng.hpp"

namespace mipw {

inline constexpr int kMaxRejectionAttempts = 10000;

// M completed copies of one dataset. Observed entries are shared by every
// completion; only the entries with r = 0 differ.
struct ImputedStack {
  std::size_t m = 0;
  Dataset base;
  // Row-major m x n. Empty for propensity-imputation stacks, which leave X
  // missing.
  std::vector<double> x_imputed;
  // Row-major m x n imputed propensity scores (propensity-imputation stacks).
  std::optional<std::vector<double>> u_imputed;
  std::string strategy;
  // The imputation model is knowingly misspecified (fitted continuous world).
  bool approximate = false;

  std::size_t n() const { return base.size(); }
  bool has_x() const { return !x_imputed.empty() || n() == 0; }

  std::span<const double> completed_x(std::size_t k) const {
    if (x_imputed.empty()) throw ConfigError("stack carries no imputed covariate");
    return {x_imputed.data() + k * n(), n()};
  }
  std::span<const double> imputed_u(std::size_t k) const {
    if (!u_imputed) throw ConfigError("stack carries no imputed propensity scores");
    return {u_imputed->data() + k * n(), n()};
  }
};

namespace detail {

inline int zay_cell(double z, int a, double y) {
  return (static_cast<int>(z) * 2 + a) * 2 + static_cast<int>(y);
}

inline std::string zay_name(int cell) {
  std::ostringstream os;
  os << "(z=" << cell / 4 << ",a=" << (cell / 2) % 2 << ",y=" << cell % 2 << ")";
  return os.str();
}

inline void check_discrete(const Dataset& ds, const char* who) {
  if (ds.world != WorldKind::discrete)
    throw ConfigError(std::string(who) + " is implemented for the discrete world only");
}

// Fills every r = 1 entry of all m rows with the observed value and returns
// the stack; the caller fills the missing entries.
inline ImputedStack observed_stack(const Dataset& ds, std::size_t m, std::string strategy) {
  if (m == 0) throw ConfigError("number of imputations must be positive");
  ds.check_invariants();
  ImputedStack st;
  st.m = m;
  st.base = ds;
  st.strategy = std::move(strategy);
  const std::size_t n = ds.size();
  st.x_imputed.assign(m * n, 0.0);
  for (std::size_t i = 0; i < n; ++i)
    if (ds.r[i] == 1)
      for (std::size_t k = 0; k < m; ++k) st.x_imputed[k * n + i] = *ds.x[i];
  return st;
}

}  // namespace detail

// Gaussian proposal for X given (Z, A, Y) in the continuous world: the X
// prior times the Gaussian Y factor, with the logistic A factor left out.
struct GaussianProposal {
  double mean = 0.0;
  double sd = 1.0;
};

inline GaussianProposal oracle_proposal(const ContinuousWorldParams& p, double z, int a,
                                        double y) {
  const double prior_prec = 1.0 / (p.x_sd * p.x_sd);
  const double lik_prec = p.y_slope_x * p.y_slope_x / (p.y_sd * p.y_sd);
  const double resid = y - p.effect * a - p.y_intercept - p.y_slope_z * z;
  const double prec = prior_prec + lik_prec;
  GaussianProposal g;
  g.mean = (p.x_mean(z) * prior_prec + p.y_slope_x * resid / (p.y_sd * p.y_sd)) / prec;
  g.sd = 1.0 / std::sqrt(prec);
  return g;
}

/// One exact draw from f(x | z, a, y) by rejection: propose from the Gaussian
/// proposal and accept with probability P(A=a | z, x) <= 1. Returns nullopt
/// after max_attempts rejections.
template <class Engine>
std::optional<double> draw_x_given_zay(const ContinuousWorldParams& p, double z, int a, double y,
                                       Engine& eng, int max_attempts = kMaxRejectionAttempts) {
  const GaussianProposal g = oracle_proposal(p, z, a, y);
  std::normal_distribution<double> normal(g.mean, g.sd);
  std::uniform_real_distribution<double> unif(0.0, 1.0);
  for (int t = 0; t < max_attempts; ++t) {
    const double x = normal(eng);
    const double e = p.propensity(z, x);
    if (unif(eng) < (a == 1 ? e : 1.0 - e)) return x;
  }
  return std::nullopt;
}

/// Draws from the true conditional of X given (Z, A, Y). Discrete world:
/// Bernoulli(cond_x). Continuous world: rejection sampler. The draw for row i
/// in imputation k depends only on (seed, i, k).
inline ImputedStack impute_oracle(const Dataset& ds, const WorldParams& params, std::size_t m,
                                  std::uint64_t seed) {
  if (world_kind(params) != ds.world) throw ConfigError("world parameters do not match dataset");
  ImputedStack st = detail::observed_stack(ds, m, "oracle");
  const std::size_t n = ds.size();

  if (const auto* dp = std::get_if<DiscreteWorldParams>(&params)) {
    const JointTable table = build_joint(*dp);
    std::array<double, 8> q{};
    for (int c = 0; c < 8; ++c) q[c] = cond_x(table, c / 4, (c / 2) % 2, c % 2);
    for (std::size_t i = 0; i < n; ++i) {
      if (ds.r[i] == 1) continue;
      const double qi = q[detail::zay_cell(ds.z[i], ds.a[i], ds.y[i])];
      for (std::size_t k = 0; k < m; ++k) {
        CounterEngine eng(seed, i, k);
        st.x_imputed[k * n + i] = eng.uniform() < qi ? 1.0 : 0.0;
      }
    }
    return st;
  }

  const auto& cp = std::get<ContinuousWorldParams>(params);
  cp.validate();
  for (std::size_t i = 0; i < n; ++i) {
    if (ds.r[i] == 1) continue;
    for (std::size_t k = 0; k < m; ++k) {
      CounterEngine eng(seed, i, k);
      const auto x = draw_x_given_zay(cp, ds.z[i], ds.a[i], ds.y[i], eng);
      if (!x) {
        std::ostringstream os;
        os << "rejection sampler exhausted " << kMaxRejectionAttempts << " attempts at row " << i;
        throw SamplerExhaustedError(i, os.str());
      }
      st.x_imputed[k * n + i] = *x;
    }
  }
  return st;
}

// Fitted conditional of X given (Z, A, Y) estimated on complete cases.
struct FittedImputationModel {
  WorldKind world = WorldKind::discrete;
  std::array<double, 8> cell_prob{};   // discrete: P(X=1 | z, a, y)
  std::array<bool, 8> cell_fitted{};
  Eigen::Vector4d coefficients = Eigen::Vector4d::Zero();  // continuous: 1, z, a, y
  double residual_sd = 0.0;
};

inline FittedImputationModel fit_imputation_model(const Dataset& ds) {
  ds.check_invariants();
  FittedImputationModel fm;
  fm.world = ds.world;
  const std::size_t n = ds.size();

  if (ds.world == WorldKind::discrete) {
    std::array<double, 8> ones{}, count{};
    std::array<bool, 8> needed{};
    for (std::size_t i = 0; i < n; ++i) {
      const int c = detail::zay_cell(ds.z[i], ds.a[i], ds.y[i]);
      if (ds.r[i] == 1) {
        ones[c] += *ds.x[i];
        count[c] += 1;
      } else {
        needed[c] = true;
      }
    }
    for (int c = 0; c < 8; ++c) {
      if (count[c] > 0) {
        fm.cell_prob[c] = ones[c] / count[c];
        fm.cell_fitted[c] = true;
      } else if (needed[c]) {
        throw FitError("imputation cell " + detail::zay_name(c) + " has no complete cases");
      }
    }
    return fm;
  }

  std::size_t cc = 0;
  for (int r : ds.r) cc += r == 1;
  Eigen::MatrixXd design(static_cast<Eigen::Index>(cc), 4);
  Eigen::VectorXd target(static_cast<Eigen::Index>(cc));
  Eigen::Index row = 0;
  for (std::size_t i = 0; i < n; ++i) {
    if (ds.r[i] != 1) continue;
    design.row(row) << 1.0, ds.z[i], static_cast<double>(ds.a[i]), ds.y[i];
    target[row] = *ds.x[i];
    ++row;
  }
  if (cc <= 4) throw FitError("too few complete cases to fit the imputation model");
  Eigen::ColPivHouseholderQR<Eigen::MatrixXd> qr(design);
  qr.setThreshold(1e-10);
  if (qr.rank() < 4) {
    static const char* names[] = {"(intercept)", "z", "a", "y"};
    throw FitError(std::string("imputation design is rank deficient (column '") +
                   names[qr.colsPermutation().indices()[qr.rank()]] + "')");
  }
  fm.coefficients = qr.solve(target);
  const double rss = (target - design * fm.coefficients).squaredNorm();
  fm.residual_sd = std::sqrt(rss / static_cast<double>(cc));
  return fm;
}

/// Draws from a conditional model of X given (Z, A, Y) fitted by maximum
/// likelihood on complete cases: saturated cell frequencies in the discrete
/// world, a normal linear model in the continuous world (flagged
/// approximate).
inline ImputedStack impute_fitted(const Dataset& ds, WorldKind world, std::size_t m,
                                  std::uint64_t seed) {
  if (world != ds.world) throw ConfigError("world kind does not match dataset");
  ImputedStack st = detail::observed_stack(ds, m, "fitted");
  const FittedImputationModel fm = fit_imputation_model(ds);
  const std::size_t n = ds.size();
  st.approximate = world == WorldKind::continuous;
  for (std::size_t i = 0; i < n; ++i) {
    if (ds.r[i] == 1) continue;
    for (std::size_t k = 0; k < m; ++k) {
      CounterEngine eng(seed, i, k);
      double v;
      if (world == WorldKind::discrete) {
        v = eng.uniform() < fm.cell_prob[detail::zay_cell(ds.z[i], ds.a[i], ds.y[i])] ? 1.0 : 0.0;
      } else {
        const double mean = fm.coefficients[0] + fm.coefficients[1] * ds.z[i] +
                            fm.coefficients[2] * ds.a[i] + fm.coefficients[3] * ds.y[i];
        std::normal_distribution<double> normal(mean, fm.residual_sd);
        v = normal(eng);
      }
      st.x_imputed[k * n + i] = v;
    }
  }
  return st;
}

// ---------------------------------------------------------------------------
// Propensity-score imputation

enum class ResponseModel {
  saturated,  // weight complete cases by 1 / P(R=1 | Z, A, Y)
  none,       // unweighted complete-case fit
};

enum class PsModel {
  saturated,     // logit: 1, z, x, z*x
  main_effects,  // logit: 1, z, x
};

// Propensity model fit on complete cases, optionally weighted by the inverse
// estimated response probability. The weights are used for this fit only.
struct WeightedPropensityFit {
  std::array<double, 8> response_prob{};  // P(R=1 | z, a, y); 1 for unweighted
  std::array<std::size_t, 8> complete_cases{};
  std::array<std::size_t, 8> rows{};
  PsModel model = PsModel::saturated;
  LogisticFit fit;

  double score(double z, double x) const {
    Eigen::RowVectorXd row;
    if (model == PsModel::saturated) {
      row = saturated_ps_row(z, x);
    } else {
      row.resize(3);
      row << 1.0, z, x;
    }
    return expit(fit.linear_predictor(row));
  }
};

/// The saturated response model's maximum-likelihood fit is the observed
/// response rate of each (z, a, y) cell, which is used directly (this also
/// covers cells with no missing rows, where the rate is 1).
inline WeightedPropensityFit fit_response_weighted_propensity(const Dataset& ds,
                                                              ResponseModel response,
                                                              PsModel model) {
  detail::check_discrete(ds, "propensity-score imputation");
  ds.check_invariants();
  WeightedPropensityFit out;
  out.model = model;
  const std::size_t n = ds.size();
  for (std::size_t i = 0; i < n; ++i) {
    const int c = detail::zay_cell(ds.z[i], ds.a[i], ds.y[i]);
    out.rows[c] += 1;
    if (ds.r[i] == 1) out.complete_cases[c] += 1;
  }
  for (int c = 0; c < 8; ++c) {
    if (out.rows[c] > 0 && out.complete_cases[c] == 0)
      throw ImputationSupportError("cell " + detail::zay_name(c) + " has no complete cases");
    out.response_prob[c] =
        response == ResponseModel::saturated && out.rows[c] > 0
            ? static_cast<double>(out.complete_cases[c]) / static_cast<double>(out.rows[c])
            : 1.0;
  }

  std::vector<double> z, x, w;
  std::vector<int> a;
  for (std::size_t i = 0; i < n; ++i) {
    if (ds.r[i] != 1) continue;
    z.push_back(ds.z[i]);
    x.push_back(*ds.x[i]);
    a.push_back(ds.a[i]);
    w.push_back(1.0 / out.response_prob[detail::zay_cell(ds.z[i], ds.a[i], ds.y[i])]);
  }
  if (model == PsModel::saturated) {
    out.fit = fit_saturated_propensity(z, x, a, w);
  } else {
    Eigen::MatrixXd design(static_cast<Eigen::Index>(z.size()), 3);
    for (std::size_t i = 0; i < z.size(); ++i) design.row(i) << 1.0, z[i], x[i];
    out.fit = fit_logistic(design, a, w, {"(intercept)", "z", "x"});
  }
  return out;
}

/// Imputes the propensity score U = e(Z, X) rather than X. Units with
/// observed X get U-hat from the response-weighted fit; a unit missing X gets,
/// in each imputation, the U-hat of a complete case drawn uniformly from its
/// (z, a, y) cell (R is independent of U given (Z, A, Y) under MAR). X itself
/// stays missing.
inline ImputedStack impute_propensity(const Dataset& ds, std::size_t m, std::uint64_t seed,
                                      ResponseModel response = ResponseModel::saturated,
                                      PsModel model = PsModel::saturated) {
  if (m == 0) throw ConfigError("number of imputations must be positive");
  const WeightedPropensityFit wf = fit_response_weighted_propensity(ds, response, model);
  const std::size_t n = ds.size();

  std::vector<double> u_hat(n, 0.0);
  std::array<std::vector<std::size_t>, 8> donors;
  for (std::size_t i = 0; i < n; ++i) {
    if (ds.r[i] != 1) continue;
    u_hat[i] = wf.score(ds.z[i], *ds.x[i]);
    donors[detail::zay_cell(ds.z[i], ds.a[i], ds.y[i])].push_back(i);
  }

  ImputedStack st;
  st.m = m;
  st.base = ds;
  st.strategy = "propensity";
  std::vector<double> u(m * n);
  for (std::size_t i = 0; i < n; ++i) {
    if (ds.r[i] == 1) {
      for (std::size_t k = 0; k < m; ++k) u[k * n + i] = u_hat[i];
      continue;
    }
    const auto& pool = donors[detail::zay_cell(ds.z[i], ds.a[i], ds.y[i])];
    for (std::size_t k = 0; k < m; ++k) {
      CounterEngine eng(seed, i, k);
      auto pick = static_cast<std::size_t>(eng.uniform() * static_cast<double>(pool.size()));
      u[k * n + i] = u_hat[pool[std::min(pick, pool.size() - 1)]];
    }
  }
  st.u_imputed = std::move(u);
  return st;
}

// ---------------------------------------------------------------------------
// Mean-imputed probability weight

enum class WeightSource { exact, conditional_mean };

struct ProxyWeights {
  std::vector<double> values;
  std::vector<WeightSource> source;
};

/// Units with observed X get the estimated weight omega-hat(z, x, a); units
/// missing X get the mean of omega-hat over complete cases in their (z, a, y)
/// cell. No stochastic draws.
inline ProxyWeights proxy_weights_impw(const Dataset& ds) {
  const WeightedPropensityFit wf =
      fit_response_weighted_propensity(ds, ResponseModel::saturated, PsModel::saturated);
  const std::size_t n = ds.size();
  ProxyWeights pw;
  pw.values.assign(n, 0.0);
  pw.source.assign(n, WeightSource::exact);
  std::array<double, 8> sum{};
  std::array<double, 8> count{};
  for (std::size_t i = 0; i < n; ++i) {
    if (ds.r[i] != 1) continue;
    const double e = wf.score(ds.z[i], *ds.x[i]);
    if (!(e > 0.0 && e < 1.0))
      throw PositivityError("estimated propensity at row " + std::to_string(i) + " is 0 or 1");
    pw.values[i] = ds.a[i] == 1 ? 1.0 / e : 1.0 / (1.0 - e);
    const int c = detail::zay_cell(ds.z[i], ds.a[i], ds.y[i]);
    sum[c] += pw.values[i];
    count[c] += 1;
  }
  for (std::size_t i = 0; i < n; ++i) {
    if (ds.r[i] == 1) continue;
    const int c = detail::zay_cell(ds.z[i], ds.a[i], ds.y[i]);
    pw.values[i] = sum[c] / count[c];
    pw.source[i] = WeightSource::conditional_mean;
  }
  return pw;
}

// ---------------------------------------------------------------------------
// Long-format CSV: imputation_index,row,z,x,a,y,r (plus u for propensity
// imputation stacks). x is empty where the stack leaves it missing.

inline void write_stack_csv(std::ostream& os, const ImputedStack& st) {
  const auto old_precision = os.precision(17);
  const bool with_u = st.u_imputed.has_value();
  os << "imputation_index,row,z,x,a,y,r" << (with_u ? ",u" : "") << '\n';
  const std::size_t n = st.n();
  for (std::size_t k = 0; k < st.m; ++k)
    for (std::size_t i = 0; i < n; ++i) {
      os << k << ',' << i << ',' << st.base.z[i] << ',';
      if (!st.x_imputed.empty())
        os << st.x_imputed[k * n + i];
      else if (st.base.x[i])
        os << *st.base.x[i];
      os << ',' << st.base.a[i] << ',' << st.base.y[i] << ',' << st.base.r[i];
      if (with_u) os << ',' << (*st.u_imputed)[k * n + i];
      os << '\n';
    }
  os.precision(old_precision);
}

}  // namespace mipw
