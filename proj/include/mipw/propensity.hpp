#pragma once

// Weighted logistic regression by IRLS and the propensity / weight helpers
// built on it.

#include <Eigen/Dense>

#include <algorithm>
#include <array>
#include <cmath>
#include <span>
#include <sstream>
#include <string>
#include <vector>

#include "mipw/dgp.hpp"
#include "mipw/errors.hpp"
#include "mipw/logit.hpp"

namespace mipw {

struct LogisticFit {
  Eigen::VectorXd coefficients;
  std::vector<std::string> names;  // one per design column
  bool converged = false;
  int iterations = 0;
  double deviance = 0.0;
  // Max-norm of the weighted score divided by the total weight.
  double score_norm = 0.0;

  double linear_predictor(const Eigen::Ref<const Eigen::RowVectorXd>& row) const {
    return row.dot(coefficients);
  }
};

struct IrlsOptions {
  int max_iterations = 100;
  double tolerance = 1e-8;       // score max-norm over total weight
  double step_tolerance = 1e-6;  // Newton step max-norm
  double separation_bound = 30.0;
  int max_halvings = 30;
};

namespace detail {

inline double weighted_deviance(const Eigen::VectorXd& eta, std::span<const int> y,
                                const Eigen::VectorXd& w) {
  double d = 0.0;
  for (Eigen::Index i = 0; i < eta.size(); ++i) d += w[i] * (softplus(eta[i]) - y[i] * eta[i]);
  return 2.0 * d;
}

}  // namespace detail

/// Maximizes the weighted Bernoulli log-likelihood of `outcome` on `design`
/// by iteratively reweighted least squares with step halving. `weights` may
/// be empty (all ones). Throws RankError for a rank-deficient design,
/// SeparationError when coefficients diverge past the separation bound, and
/// ConvergenceError when the iteration limit is reached.
inline LogisticFit fit_logistic(const Eigen::MatrixXd& design, std::span<const int> outcome,
                                std::span<const double> weights = {},
                                std::vector<std::string> names = {}, IrlsOptions opt = {}) {
  const Eigen::Index n = design.rows();
  const Eigen::Index p = design.cols();
  if (static_cast<Eigen::Index>(outcome.size()) != n)
    throw SizeError("outcome length does not match design rows");
  if (!weights.empty() && static_cast<Eigen::Index>(weights.size()) != n)
    throw SizeError("weight length does not match design rows");
  if (n <= p) {
    std::ostringstream os;
    os << "logistic fit needs more rows than columns (n=" << n << ", p=" << p << ")";
    throw SizeError(os.str());
  }
  if (names.empty())
    for (Eigen::Index j = 0; j < p; ++j) names.push_back("x" + std::to_string(j));
  if (static_cast<Eigen::Index>(names.size()) != p)
    throw SizeError("column names do not match design columns");

  Eigen::VectorXd w = Eigen::VectorXd::Ones(n);
  for (Eigen::Index i = 0; i < n; ++i) {
    if (outcome[i] != 0 && outcome[i] != 1)
      throw ConfigError("logistic outcome must be binary (row " + std::to_string(i) + ")");
    if (!weights.empty()) {
      if (!(weights[i] > 0.0) || !std::isfinite(weights[i]))
        throw ConfigError("weights must be positive (row " + std::to_string(i) + ")");
      w[i] = weights[i];
    }
  }
  const double total_weight = w.sum();

  {
    Eigen::ColPivHouseholderQR<Eigen::MatrixXd> qr(w.cwiseSqrt().asDiagonal() * design);
    qr.setThreshold(1e-10);
    if (qr.rank() < p) {
      const auto col = qr.colsPermutation().indices()[qr.rank()];
      throw RankError("design is rank deficient (column '" + names[col] + "')");
    }
  }

  Eigen::VectorXd y(n);
  for (Eigen::Index i = 0; i < n; ++i) y[i] = outcome[i];

  LogisticFit fit;
  fit.names = std::move(names);
  Eigen::VectorXd beta = Eigen::VectorXd::Zero(p);
  Eigen::VectorXd eta = design * beta;
  double dev = detail::weighted_deviance(eta, outcome, w);

  for (int iter = 0;; ++iter) {
    Eigen::VectorXd mu(n), h(n);
    for (Eigen::Index i = 0; i < n; ++i) {
      mu[i] = expit(eta[i]);
      h[i] = w[i] * mu[i] * (1.0 - mu[i]);
    }
    const Eigen::VectorXd score = design.transpose() * (w.cwiseProduct(y - mu));
    const double score_norm = score.cwiseAbs().maxCoeff() / total_weight;

    const Eigen::MatrixXd info = design.transpose() * h.asDiagonal() * design;
    Eigen::LDLT<Eigen::MatrixXd> ldlt(info);
    if (ldlt.info() != Eigen::Success || !ldlt.isPositive()) {
      if (beta.cwiseAbs().maxCoeff() > opt.separation_bound / 2)
        throw SeparationError("information matrix became singular with diverging coefficients");
      throw RankError("information matrix is singular");
    }
    const Eigen::VectorXd step = ldlt.solve(score);

    // Under separation the score still vanishes (fitted probabilities run to
    // 0 and 1) but the Newton step does not, so both must be small.
    if (score_norm < opt.tolerance && step.cwiseAbs().maxCoeff() < opt.step_tolerance) {
      fit.coefficients = beta + step;
      fit.converged = true;
      fit.iterations = iter + 1;
      fit.deviance = detail::weighted_deviance(design * fit.coefficients, outcome, w);
      fit.score_norm = score_norm;
      return fit;
    }
    if (iter >= opt.max_iterations)
      throw ConvergenceError("IRLS did not converge in " + std::to_string(opt.max_iterations) +
                             " iterations");

    double scale = 1.0;
    Eigen::VectorXd next = beta + step;
    Eigen::VectorXd next_eta = design * next;
    double next_dev = detail::weighted_deviance(next_eta, outcome, w);
    for (int k = 0; k < opt.max_halvings && next_dev > dev * (1.0 + 1e-12) + 1e-300; ++k) {
      scale *= 0.5;
      next = beta + scale * step;
      next_eta = design * next;
      next_dev = detail::weighted_deviance(next_eta, outcome, w);
    }

    const double taken = scale * step.cwiseAbs().maxCoeff();
    if (next.cwiseAbs().maxCoeff() > opt.separation_bound && taken > 1e-6) {
      std::ostringstream os;
      os << "complete or quasi-complete separation: |coefficient| exceeded "
         << opt.separation_bound << " after " << iter + 1 << " iterations";
      throw SeparationError(os.str());
    }
    beta = std::move(next);
    eta = std::move(next_eta);
    dev = next_dev;
  }
}

inline std::vector<double> propensity_scores(const LogisticFit& fit,
                                             const Eigen::MatrixXd& design) {
  if (!fit.converged) throw ConvergenceError("propensity scores need a converged fit");
  if (design.cols() != fit.coefficients.size())
    throw SizeError("design columns do not match the fit");
  const Eigen::VectorXd eta = design * fit.coefficients;
  std::vector<double> out(static_cast<std::size_t>(eta.size()));
  for (Eigen::Index i = 0; i < eta.size(); ++i) out[i] = expit(eta[i]);
  return out;
}

// omega = a/e + (1-a)/(1-e).
inline std::vector<double> ip_weights(std::span<const double> ps, std::span<const int> a) {
  if (ps.size() != a.size()) throw SizeError("ps and a have different lengths");
  std::vector<double> w(ps.size());
  for (std::size_t i = 0; i < ps.size(); ++i) {
    if (!(ps[i] > 0.0 && ps[i] < 1.0)) {
      std::ostringstream os;
      os << "propensity score " << ps[i] << " at row " << i << " is outside (0, 1)";
      throw PositivityError(os.str());
    }
    w[i] = a[i] == 1 ? 1.0 / ps[i] : 1.0 / (1.0 - ps[i]);
  }
  return w;
}

// ---------------------------------------------------------------------------
// Saturated models on binary covariates. Rows are aggregated into their
// covariate cells before fitting; the maximum-likelihood fit is the same as
// on the row-level data.

namespace detail {

// Aggregated fit: `cell_of(i)` maps row i to a cell in [0, cells), whose
// design row is design_row(cell).
template <class CellOf, class DesignRow>
LogisticFit fit_aggregated(std::size_t n, int cells, int p, CellOf cell_of,
                           std::span<const int> outcome, std::span<const double> weights,
                           DesignRow design_row, std::vector<std::string> names) {
  if (!weights.empty() && weights.size() != n) throw SizeError("weight length mismatch");
  std::vector<double> events(cells, 0.0), non_events(cells, 0.0);
  for (std::size_t i = 0; i < n; ++i) {
    const double wi = weights.empty() ? 1.0 : weights[i];
    if (!(wi > 0.0)) throw ConfigError("weights must be positive (row " + std::to_string(i) + ")");
    (outcome[i] == 1 ? events : non_events)[cell_of(i)] += wi;
  }
  std::vector<int> ys;
  std::vector<double> ws;
  std::vector<int> rows_cell;
  for (int c = 0; c < cells; ++c) {
    if (events[c] > 0) {
      ys.push_back(1);
      ws.push_back(events[c]);
      rows_cell.push_back(c);
    }
    if (non_events[c] > 0) {
      ys.push_back(0);
      ws.push_back(non_events[c]);
      rows_cell.push_back(c);
    }
  }
  Eigen::MatrixXd design(static_cast<Eigen::Index>(ys.size()), p);
  for (std::size_t k = 0; k < ys.size(); ++k) design.row(k) = design_row(rows_cell[k]);
  return fit_logistic(design, ys, ws, std::move(names));
}

inline int binary_value(double v, const char* what, std::size_t row) {
  if (v == 0.0) return 0;
  if (v == 1.0) return 1;
  std::ostringstream os;
  os << what << " must be binary in the discrete world (row " << row << ", value " << v << ")";
  throw ConfigError(os.str());
}

}  // namespace detail

// Design row (1, z, x, z*x); x may be fractional.
inline Eigen::RowVectorXd saturated_ps_row(double z, double x) {
  Eigen::RowVectorXd row(4);
  row << 1.0, z, x, z * x;
  return row;
}

// Design row (1, z, a, y, za, zy, ay, zay).
inline Eigen::RowVectorXd saturated_response_row(double z, double a, double y) {
  Eigen::RowVectorXd row(8);
  row << 1.0, z, a, y, z * a, z * y, a * y, z * a * y;
  return row;
}

/// Saturated logit of P(A=1 | Z, X) for binary Z and X, with optional
/// positive case weights.
inline LogisticFit fit_saturated_propensity(std::span<const double> z, std::span<const double> x,
                                            std::span<const int> a,
                                            std::span<const double> weights = {}) {
  const std::size_t n = z.size();
  if (x.size() != n || a.size() != n) throw SizeError("column lengths differ");
  std::vector<int> cell(n);
  for (std::size_t i = 0; i < n; ++i)
    cell[i] = detail::binary_value(z[i], "z", i) * 2 + detail::binary_value(x[i], "x", i);
  return detail::fit_aggregated(
      n, 4, 4, [&](std::size_t i) { return cell[i]; }, a, weights,
      [](int c) { return saturated_ps_row(c / 2, c % 2); },
      {"(intercept)", "z", "x", "z:x"});
}

/// Saturated logit of P(R=1 | Z, A, Y) for binary Z, A, Y.
inline LogisticFit fit_saturated_response(std::span<const double> z, std::span<const int> a,
                                          std::span<const double> y, std::span<const int> r) {
  const std::size_t n = z.size();
  if (a.size() != n || y.size() != n || r.size() != n) throw SizeError("column lengths differ");
  std::vector<int> cell(n);
  for (std::size_t i = 0; i < n; ++i)
    cell[i] = (detail::binary_value(z[i], "z", i) * 2 + a[i]) * 2 + detail::binary_value(y[i], "y", i);
  return detail::fit_aggregated(
      n, 8, 8, [&](std::size_t i) { return cell[i]; }, r, {},
      [](int c) { return saturated_response_row(c / 4, (c / 2) % 2, c % 2); },
      {"(intercept)", "z", "a", "y", "z:a", "z:y", "a:y", "z:a:y"});
}

/// A fitted propensity model that can be evaluated at any (z, x), including
/// a fractional x. Discrete world: saturated logit in (z, x). Continuous
/// world: logit-linear in (z, x).
struct PropensityModel {
  WorldKind world = WorldKind::discrete;
  LogisticFit fit;

  Eigen::RowVectorXd design_row(double z, double x) const {
    if (world == WorldKind::discrete) return saturated_ps_row(z, x);
    Eigen::RowVectorXd row(3);
    row << 1.0, z, x;
    return row;
  }
  double linear_predictor(double z, double x) const {
    return fit.linear_predictor(design_row(z, x));
  }
  double score(double z, double x) const { return expit(linear_predictor(z, x)); }
};

inline PropensityModel fit_propensity_model(WorldKind world, std::span<const double> z,
                                            std::span<const double> x, std::span<const int> a,
                                            std::span<const double> weights = {}) {
  PropensityModel m;
  m.world = world;
  if (world == WorldKind::discrete) {
    m.fit = fit_saturated_propensity(z, x, a, weights);
  } else {
    const std::size_t n = z.size();
    if (x.size() != n || a.size() != n) throw SizeError("column lengths differ");
    Eigen::MatrixXd design(static_cast<Eigen::Index>(n), 3);
    for (std::size_t i = 0; i < n; ++i) design.row(i) << 1.0, z[i], x[i];
    m.fit = fit_logistic(design, a, weights, {"(intercept)", "z", "x"});
  }
  return m;
}

}  // namespace mipw
