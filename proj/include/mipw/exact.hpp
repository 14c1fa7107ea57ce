#pragma once

// Exact enumeration over the discrete world's finite support. Every quantity
// here is a finite sum over table cells, so these functions serve as the
// ground truth that the Monte Carlo estimators are checked against.

#include <algorithm>
#include <array>
#include <cmath>
#include <sstream>
#include <string>
#include <vector>

#include "mipw/dgp.hpp"
#include "mipw/errors.hpp"
#include "mipw/logit.hpp"

namespace mipw {

struct JointCell {
  int z = 0, x = 0, a = 0, y = 0, r = 0;
  double mass = 0.0;
};

// Probability table over (Z, X, A, Y, R). Cell order carries no meaning.
struct JointTable {
  DiscreteWorldParams params;
  std::vector<JointCell> cells;

  double total() const {
    double s = 0.0;
    for (const auto& c : cells) s += c.mass;
    return s;
  }
};

inline JointTable build_joint(const DiscreteWorldParams& params) {
  params.validate();
  JointTable t;
  t.params = params;
  t.cells.reserve(32);
  for (int z = 0; z < 2; ++z) {
    const double pz = z ? params.p_z : 1.0 - params.p_z;
    for (int x = 0; x < 2; ++x) {
      const double px = x ? params.prob_x(z) : 1.0 - params.prob_x(z);
      for (int a = 0; a < 2; ++a) {
        const double e = params.propensity(z, x);
        const double pa = a ? e : 1.0 - e;
        for (int y = 0; y < 2; ++y) {
          const double q = params.outcome_prob(z, x, a);
          const double py = y ? q : 1.0 - q;
          for (int r = 0; r < 2; ++r) {
            const double rho = params.response_prob(z, a, y);
            const double pr = r ? rho : 1.0 - rho;
            t.cells.push_back({z, x, a, y, r, pz * px * pa * py * pr});
          }
        }
      }
    }
  }
  return t;
}

// P(X=1 | Z=z, A=a, Y=y), marginalizing over R.
inline double cond_x(const JointTable& t, int z, int a, int y) {
  double num = 0.0, den = 0.0;
  for (const auto& c : t.cells) {
    if (c.z != z || c.a != a || c.y != y) continue;
    den += c.mass;
    if (c.x == 1) num += c.mass;
  }
  if (!(den > 0.0)) {
    std::ostringstream os;
    os << "conditioning cell (z=" << z << ",a=" << a << ",y=" << y << ") has zero mass";
    throw DegenerateCellError(os.str());
  }
  return num / den;
}

// E[omega(Z,X,A) | Z=z, A=a, Y=y]: the proxy weight shared by aPW and imPW.
inline double conditional_mean_weight(const JointTable& t, int z, int a, int y) {
  const double q = cond_x(t, z, a, y);
  auto omega = [&](int x) {
    const double e = t.params.propensity(z, x);
    return a ? 1.0 / e : 1.0 / (1.0 - e);
  };
  return (1.0 - q) * omega(0) + q * omega(1);
}

// ---------------------------------------------------------------------------
// (Z, X, A, Y) tables, used for the joint-recovery identities.

struct ZxayTable {
  std::array<double, 16> mass{};

  static constexpr int index(int z, int x, int a, int y) { return ((z * 2 + x) * 2 + a) * 2 + y; }
  double& at(int z, int x, int a, int y) { return mass[index(z, x, a, y)]; }
  double at(int z, int x, int a, int y) const { return mass[index(z, x, a, y)]; }
};

// P(Z, X, A, Y): the base table with R summed out.
inline ZxayTable true_joint(const JointTable& t) {
  ZxayTable out;
  for (const auto& c : t.cells) out.at(c.z, c.x, c.a, c.y) += c.mass;
  return out;
}

// P(Z, X-dagger, A, Y) where X-dagger = R X + (1-R) X* and X* is drawn from
// the true conditional of X given (Z, A, Y).
inline ZxayTable recovered_joint(const JointTable& t) {
  ZxayTable out;
  for (const auto& c : t.cells) {
    if (c.r == 1) {
      out.at(c.z, c.x, c.a, c.y) += c.mass;
    } else {
      const double q = cond_x(t, c.z, c.a, c.y);
      out.at(c.z, 1, c.a, c.y) += c.mass * q;
      out.at(c.z, 0, c.a, c.y) += c.mass * (1.0 - q);
    }
  }
  return out;
}

// P(A=1 | Z=z, X=x) read off a (Z, X, A, Y) table.
inline double treatment_prob(const ZxayTable& j, int z, int x) {
  const double treated = j.at(z, x, 1, 0) + j.at(z, x, 1, 1);
  const double all = treated + j.at(z, x, 0, 0) + j.at(z, x, 0, 1);
  if (!(all > 0.0)) throw DegenerateCellError("(z,x) cell has zero mass");
  return treated / all;
}

// E{ E[Y | Z, X, A=1] - E[Y | Z, X, A=0] } over a (Z, X, A, Y) table.
inline double g_formula(const ZxayTable& j) {
  double tau = 0.0;
  for (int z = 0; z < 2; ++z)
    for (int x = 0; x < 2; ++x) {
      double mean[2];
      for (int a = 0; a < 2; ++a) {
        const double n = j.at(z, x, a, 0) + j.at(z, x, a, 1);
        if (!(n > 0.0)) throw DegenerateCellError("(z,x,a) cell has zero mass");
        mean[a] = j.at(z, x, a, 1) / n;
      }
      double pzx = 0.0;
      for (int a = 0; a < 2; ++a)
        for (int y = 0; y < 2; ++y) pzx += j.at(z, x, a, y);
      tau += pzx * (mean[1] - mean[0]);
    }
  return tau;
}

// ---------------------------------------------------------------------------
// Probability limits of the combination methods.

struct CellValue {
  int z = 0, x = 0, a = 0, y = 0, r = 0;
  double value = 0.0;  // propensity or weight assigned to the cell
};

struct PlimReport {
  std::string method;
  double plim = 0.0;   // Hajek form
  double truth = 0.0;
  double bias = 0.0;   // plim - truth
  double theta1 = 0.0;
  double theta0 = 0.0;
  // E[A w] and E[(1-A) w]. Both equal 1 when the proxy weights are unbiased
  // for the true weights, in which case the HT and Hajek limits coincide.
  double treated_weight_mass = 0.0;
  double control_weight_mass = 0.0;
  double ht_plim = 0.0;
  int imputations = 0;  // 0 means the M -> infinity limit
  std::vector<CellValue> cells;
};

namespace detail {

struct WeightAccumulator {
  double wy1 = 0, w1 = 0, wy0 = 0, w0 = 0;

  void add(double mass, int a, int y, double w) {
    if (a == 1) {
      w1 += mass * w;
      wy1 += mass * w * y;
    } else {
      w0 += mass * w;
      wy0 += mass * w * y;
    }
  }
  void add_score(double mass, int a, int y, double ps) {
    if (!(ps > 0.0 && ps < 1.0)) {
      std::ostringstream os;
      os << "proxy propensity " << ps << " outside (0, 1)";
      throw PositivityError(os.str());
    }
    add(mass, a, y, a ? 1.0 / ps : 1.0 / (1.0 - ps));
  }
};

inline PlimReport finish_report(std::string method, const JointTable& t,
                                const WeightAccumulator& acc, int imputations,
                                std::vector<CellValue> cells) {
  PlimReport rep;
  rep.method = std::move(method);
  rep.theta1 = acc.wy1 / acc.w1;
  rep.theta0 = acc.wy0 / acc.w0;
  rep.plim = rep.theta1 - rep.theta0;
  rep.truth = true_ate(t.params);
  rep.bias = rep.plim - rep.truth;
  rep.treated_weight_mass = acc.w1;
  rep.control_weight_mass = acc.w0;
  rep.ht_plim = acc.wy1 - acc.wy0;
  rep.imputations = imputations;
  rep.cells = std::move(cells);
  return rep;
}

// P(K = k) for K ~ Binomial(m, q).
inline double binomial_pmf(int m, int k, double q) {
  if (q <= 0.0) return k == 0 ? 1.0 : 0.0;
  if (q >= 1.0) return k == m ? 1.0 : 0.0;
  const double lc = std::lgamma(m + 1.0) - std::lgamma(k + 1.0) - std::lgamma(m - k + 1.0);
  return std::exp(lc + k * std::log(q) + (m - k) * std::log1p(-q));
}

// Shared driver for the score-averaging methods. A unit with missing X in
// cell (z,a,y) receives score(z, K/M) where K ~ Binomial(M, q) counts imputed
// ones among M draws; with M = 0 (infinite) it receives limit_score(z, q).
template <class AtFraction, class AtLimit>
PlimReport score_proxy_plim(std::string method, const JointTable& t, int imputations,
                            AtFraction score_at_fraction, AtLimit limit_score) {
  if (imputations < 0) throw ConfigError("number of imputations must be >= 0");
  WeightAccumulator acc;
  std::vector<CellValue> cells;
  cells.reserve(t.cells.size());
  for (const auto& c : t.cells) {
    if (c.r == 1) {
      const double e = t.params.propensity(c.z, c.x);
      if (c.mass > 0) acc.add_score(c.mass, c.a, c.y, e);
      cells.push_back({c.z, c.x, c.a, c.y, c.r, e});
      continue;
    }
    const double q = cond_x(t, c.z, c.a, c.y);
    double expected = 0.0;
    if (imputations == 0) {
      expected = limit_score(c.z, q);
      if (c.mass > 0) acc.add_score(c.mass, c.a, c.y, expected);
    } else {
      for (int k = 0; k <= imputations; ++k) {
        const double pk = binomial_pmf(imputations, k, q);
        if (pk == 0.0) continue;
        const double s = score_at_fraction(c.z, static_cast<double>(k) / imputations);
        expected += pk * s;
        if (c.mass > 0) acc.add_score(c.mass * pk, c.a, c.y, s);
      }
    }
    cells.push_back({c.z, c.x, c.a, c.y, c.r, expected});
  }
  return finish_report(std::move(method), t, acc, imputations, std::move(cells));
}

inline PlimReport weight_proxy_plim(std::string method, const JointTable& t) {
  WeightAccumulator acc;
  std::vector<CellValue> cells;
  cells.reserve(t.cells.size());
  for (const auto& c : t.cells) {
    double w;
    if (c.r == 1) {
      const double e = t.params.propensity(c.z, c.x);
      w = c.a ? 1.0 / e : 1.0 / (1.0 - e);
    } else {
      w = conditional_mean_weight(t, c.z, c.a, c.y);
    }
    acc.add(c.mass, c.a, c.y, w);
    cells.push_back({c.z, c.x, c.a, c.y, c.r, w});
  }
  return finish_report(std::move(method), t, acc, 0, std::move(cells));
}

}  // namespace detail

/// Limit of Hajek IPW on averaged propensity scores. Units with observed X
/// get e(z,x); units missing X get the average of e(z, X*) over the
/// imputations, which tends to E[e(Z,X) | Z,A,Y] as M grows. With a finite M
/// the average is a binomial mixture, enumerated exactly.
inline PlimReport plim_aps(const JointTable& t, int imputations = 0) {
  const auto& p = t.params;
  return detail::score_proxy_plim(
      "aps", t, imputations,
      [&](int z, double frac) {
        return (1.0 - frac) * p.propensity(z, 0) + frac * p.propensity(z, 1);
      },
      [&](int z, double q) { return (1.0 - q) * p.propensity(z, 0) + q * p.propensity(z, 1); });
}

/// Limit of Hajek IPW on the averaged-coefficient model evaluated at the mean
/// imputed covariate. Because the logit is linear in x this is
/// expit(E[logit e(Z,X) | Z,A,Y]) as M grows.
inline PlimReport plim_apm(const JointTable& t, int imputations = 0) {
  const auto& p = t.params;
  return detail::score_proxy_plim(
      "apm", t, imputations, [&](int z, double frac) { return p.propensity(z, frac); },
      [&](int z, double q) { return expit((1.0 - q) * p.ps_logit(z, 0) + q * p.ps_logit(z, 1)); });
}

// Averaged weights are linear in the imputation draws, so the limit does not
// depend on M.
inline PlimReport plim_apw(const JointTable& t) { return detail::weight_proxy_plim("apw", t); }

// Mean-imputed weight: the same proxy as aPW.
inline PlimReport plim_impw(const JointTable& t) { return detail::weight_proxy_plim("impw", t); }

// g-formula on the recovered (Z, X-dagger, A, Y) table.
inline double plim_within(const JointTable& t) { return g_formula(recovered_joint(t)); }

// ---------------------------------------------------------------------------
// Unconfoundedness in the imputed data.

struct ConditionalGapRow {
  int potential = 0;  // a in Y_a
  int z = 0;
  int ya = 0;         // value of Y_a conditioned on
  int x = 0;
  // P(X*=x | Y_a, Z, A=1-a) and P(X=x | Y_a, Z, A=1-a)
  double cross_imputed = 0.0, cross_true = 0.0;
  // P(X*=x | Y_a, Z, A=a) and P(X=x | Y_a, Z, A=a)
  double same_imputed = 0.0, same_true = 0.0;
  bool cross_defined = true, same_defined = true;
};

struct ConditionalGapReport {
  double max_cross_arm_gap = 0.0;   // cross-arm terms: differ in general
  double max_same_arm_gap = 0.0;  // same-arm terms: equal
  std::vector<ConditionalGapRow> rows;
  std::vector<std::string> skipped;
};

/// Enumerates (Z, X, A, Y0, Y1, X*) with X* drawn given (Z, A, Y) from the
/// true conditional of X, and compares the conditionals of X* and X given
/// (Y_a, Z, A) for both arms.
inline ConditionalGapReport check_imputed_conditionals(const DiscreteWorldParams& params) {
  const JointTable base = build_joint(params);
  std::array<double, 8> q{};  // cond_x indexed by (z,a,y)
  for (int z = 0; z < 2; ++z)
    for (int a = 0; a < 2; ++a)
      for (int y = 0; y < 2; ++y) q[(z * 2 + a) * 2 + y] = cond_x(base, z, a, y);

  // mass[z][x][a][y0][y1][xs]
  double mass[2][2][2][2][2][2] = {};
  for (int z = 0; z < 2; ++z)
    for (int x = 0; x < 2; ++x)
      for (int a = 0; a < 2; ++a)
        for (int y0 = 0; y0 < 2; ++y0)
          for (int y1 = 0; y1 < 2; ++y1) {
            const double pz = z ? params.p_z : 1 - params.p_z;
            const double px = x ? params.prob_x(z) : 1 - params.prob_x(z);
            const double e = params.propensity(z, x);
            const double pa = a ? e : 1 - e;
            const double m0 = params.outcome_prob(z, x, 0);
            const double m1 = params.outcome_prob(z, x, 1);
            const double p0 = y0 ? m0 : 1 - m0;
            const double p1 = y1 ? m1 : 1 - m1;
            const int y = a ? y1 : y0;
            const double qx = q[(z * 2 + a) * 2 + y];
            const double m = pz * px * pa * p0 * p1;
            mass[z][x][a][y0][y1][1] = m * qx;
            mass[z][x][a][y0][y1][0] = m * (1 - qx);
          }

  // Conditionals of X* and X given (Z=z, A=arm, Y_pot=v).
  auto conditionals = [&](int pot, int arm, int z, int v, int xval, double& imputed,
                          double& truth) -> bool {
    double den = 0, num_star = 0, num_x = 0;
    for (int x = 0; x < 2; ++x)
      for (int y0 = 0; y0 < 2; ++y0)
        for (int y1 = 0; y1 < 2; ++y1) {
          if ((pot ? y1 : y0) != v) continue;
          for (int xs = 0; xs < 2; ++xs) {
            const double m = mass[z][x][arm][y0][y1][xs];
            den += m;
            if (xs == xval) num_star += m;
            if (x == xval) num_x += m;
          }
        }
    if (!(den > 0)) return false;
    imputed = num_star / den;
    truth = num_x / den;
    return true;
  };

  ConditionalGapReport rep;
  for (int pot = 0; pot < 2; ++pot)
    for (int z = 0; z < 2; ++z)
      for (int v = 0; v < 2; ++v)
        for (int xval = 0; xval < 2; ++xval) {
          ConditionalGapRow row;
          row.potential = pot;
          row.z = z;
          row.ya = v;
          row.x = xval;
          std::ostringstream where;
          where << "(a=" << pot << ",z=" << z << ",y_a=" << v << ",x=" << xval << ")";
          row.cross_defined =
              conditionals(pot, 1 - pot, z, v, xval, row.cross_imputed, row.cross_true);
          row.same_defined = conditionals(pot, pot, z, v, xval, row.same_imputed, row.same_true);
          if (row.cross_defined)
            rep.max_cross_arm_gap = std::max(rep.max_cross_arm_gap, std::abs(row.cross_imputed - row.cross_true));
          else
            rep.skipped.push_back("cross-arm conditioning cell " + where.str() + " has zero mass");
          if (row.same_defined)
            rep.max_same_arm_gap = std::max(rep.max_same_arm_gap, std::abs(row.same_imputed - row.same_true));
          else
            rep.skipped.push_back("same-arm conditioning cell " + where.str() + " has zero mass");
          rep.rows.push_back(row);
        }
  return rep;
}

struct TwoStageReport {
  // Two-stage scheme (impute X*, then Y_a* given (Z, X-dagger)):
  // max |P(Z,X-dagger,A,Y_a-dagger) - P(Z,X,A,Y_a)| over cells and a.
  double max_joint_gap = 0.0;
  // Covariate-only imputation paired with the true Y_a.
  double naive_gap = 0.0;
  // max |P(Z,X-dagger,A,Y) - P(Z,X,A,Y)|
  double observed_joint_gap = 0.0;
};

inline TwoStageReport check_two_stage_imputation(const DiscreteWorldParams& params) {
  const JointTable base = build_joint(params);
  ZxayTable truth[2], two_stage[2], naive[2];
  ZxayTable observed_truth, observed_recovered;

  for (int z = 0; z < 2; ++z)
    for (int x = 0; x < 2; ++x)
      for (int a = 0; a < 2; ++a)
        for (int y0 = 0; y0 < 2; ++y0)
          for (int y1 = 0; y1 < 2; ++y1)
            for (int r = 0; r < 2; ++r) {
              const double pz = z ? params.p_z : 1 - params.p_z;
              const double px = x ? params.prob_x(z) : 1 - params.prob_x(z);
              const double e = params.propensity(z, x);
              const double pa = a ? e : 1 - e;
              const double m0 = params.outcome_prob(z, x, 0);
              const double m1 = params.outcome_prob(z, x, 1);
              const int y = a ? y1 : y0;
              const double rho = params.response_prob(z, a, y);
              const double m = pz * px * pa * (y0 ? m0 : 1 - m0) * (y1 ? m1 : 1 - m1) *
                               (r ? rho : 1 - rho);
              if (m == 0.0) continue;
              const int ys[2] = {y0, y1};
              observed_truth.at(z, x, a, y) += m;
              for (int pot = 0; pot < 2; ++pot) truth[pot].at(z, x, a, ys[pot]) += m;

              // X-dagger distribution for this cell.
              double px_dag[2] = {0, 0};
              if (r == 1) {
                px_dag[x] = 1.0;
              } else {
                const double q = cond_x(base, z, a, y);
                px_dag[1] = q;
                px_dag[0] = 1 - q;
              }
              for (int xd = 0; xd < 2; ++xd) {
                const double md = m * px_dag[xd];
                if (md == 0.0) continue;
                observed_recovered.at(z, xd, a, y) += md;
                for (int pot = 0; pot < 2; ++pot) {
                  naive[pot].at(z, xd, a, ys[pot]) += md;
                  if (a == pot) {
                    two_stage[pot].at(z, xd, a, ys[pot]) += md;
                  } else {
                    const double py = params.outcome_prob(z, xd, pot);
                    two_stage[pot].at(z, xd, a, 1) += md * py;
                    two_stage[pot].at(z, xd, a, 0) += md * (1 - py);
                  }
                }
              }
            }

  TwoStageReport rep;
  for (int pot = 0; pot < 2; ++pot)
    for (int i = 0; i < 16; ++i) {
      rep.max_joint_gap =
          std::max(rep.max_joint_gap, std::abs(two_stage[pot].mass[i] - truth[pot].mass[i]));
      rep.naive_gap = std::max(rep.naive_gap, std::abs(naive[pot].mass[i] - truth[pot].mass[i]));
    }
  for (int i = 0; i < 16; ++i)
    rep.observed_joint_gap = std::max(
        rep.observed_joint_gap, std::abs(observed_recovered.mass[i] - observed_truth.mass[i]));
  return rep;
}

}  // namespace mipw
