#include <gtest/gtest.h>

#include <Eigen/Dense>

#include <algorithm>
#include <cmath>
#include <numeric>
#include <random>

#include "mipw/estimators.hpp"
#include "mipw/propensity.hpp"
#include "test_support.hpp"

using namespace mipw;
using namespace testing_support;

namespace {

struct Sample {
  std::vector<double> z, x, y, ps, w;
  std::vector<int> a;
};

// Fully observed default-world sample with the true propensity and weights.
Sample true_weight_sample(std::size_t n, std::uint64_t seed,
                          DiscreteWorldParams p = default_discrete_world()) {
  const Dataset ds = generate_discrete(fully_observed(p), n, seed);
  Sample s;
  s.z = ds.z;
  s.y = ds.y;
  s.a = ds.a;
  for (std::size_t i = 0; i < n; ++i) {
    s.x.push_back(*ds.x[i]);
    s.ps.push_back(p.propensity(static_cast<int>(ds.z[i]), *ds.x[i]));
  }
  s.w = ip_weights(s.ps, s.a);
  return s;
}

// Brute-force nearest-neighbour matching with tie averaging.
double brute_force_match(const std::vector<double>& ps, const std::vector<int>& a,
                         const std::vector<double>& y) {
  double total = 0.0;
  for (std::size_t i = 0; i < ps.size(); ++i) {
    double best = INFINITY, sum = 0.0;
    int count = 0;
    for (std::size_t j = 0; j < ps.size(); ++j) {
      if (a[j] == a[i]) continue;
      const double d = std::abs(ps[j] - ps[i]);
      if (d < best) {
        best = d;
        sum = y[j];
        count = 1;
      } else if (d == best) {
        sum += y[j];
        count += 1;
      }
    }
    const double cf = sum / count;
    total += a[i] == 1 ? y[i] - cf : cf - y[i];
  }
  return total / static_cast<double>(ps.size());
}

}  // namespace

TEST(HtIpw, FourUnitExample) {
  std::vector<double> y = {1, 0, 1, 0}, w = {2, 2, 2, 2};
  std::vector<int> a = {1, 1, 0, 0};
  const auto e = ht_ipw(y, a, w);
  EXPECT_DOUBLE_EQ(*e.theta1_hat, 0.5);
  EXPECT_DOUBLE_EQ(*e.theta0_hat, 0.5);
  EXPECT_DOUBLE_EQ(e.tau_hat, 0.0);
  EXPECT_EQ(e.estimator, "ht");
}

TEST(HtIpw, DividesByFullSampleSize) {
  std::vector<double> y = {1, 0}, w = {2, 2};
  std::vector<int> a = {1, 1};
  const auto e = ht_ipw(y, a, w);
  EXPECT_DOUBLE_EQ(*e.theta1_hat, 1.0);
  EXPECT_DOUBLE_EQ(*e.theta0_hat, 0.0);
  EXPECT_DOUBLE_EQ(e.tau_hat, 1.0);
  EXPECT_EQ(e.tau_hat, *e.theta1_hat - *e.theta0_hat);
}

TEST(HtIpw, EmptyAndMismatchedInputs) {
  std::vector<double> none;
  std::vector<int> no_a;
  EXPECT_THROW(ht_ipw(none, no_a, none), SizeError);
  std::vector<double> y = {1, 0}, w = {2};
  std::vector<int> a = {1, 0};
  EXPECT_THROW(ht_ipw(y, a, w), SizeError);
  EXPECT_THROW(hajek_ipw(none, no_a, none), SizeError);
}

TEST(HtIpw, TrueWeightsAreUnbiased) {
  const std::size_t n = 1000000;
  const Sample s = true_weight_sample(n, 1);
  std::vector<double> d(n);
  for (std::size_t i = 0; i < n; ++i) d[i] = (s.a[i] == 1 ? 1.0 : -1.0) * s.w[i] * s.y[i];
  const auto e = ht_ipw(s.y, s.a, s.w);
  EXPECT_NEAR(e.tau_hat, mean(d), 1e-9);  // summation order over 1e6 terms
  EXPECT_NEAR(e.tau_hat, true_ate(default_discrete_world()), 4.0 * sd(d) / std::sqrt(n));
}

TEST(HajekIpw, ConstantOutcomeGivesZero) {
  std::vector<double> y = {3, 3, 3, 3, 3}, w = {1.2, 7, 2, 1.1, 4};
  std::vector<int> a = {1, 0, 1, 0, 0};
  EXPECT_NEAR(hajek_ipw(y, a, w).tau_hat, 0.0, 1e-15);
}

TEST(HajekIpw, FourUnitExample) {
  std::vector<double> y = {1, 0, 1, 0}, w = {2, 2, 2, 2};
  std::vector<int> a = {1, 1, 0, 0};
  const auto e = hajek_ipw(y, a, w);
  EXPECT_DOUBLE_EQ(*e.theta1_hat, 0.5);
  EXPECT_DOUBLE_EQ(e.tau_hat, 0.0);
}

TEST(HajekIpw, EmptyGroupThrows) {
  std::vector<double> y = {1, 0}, w = {2, 2};
  std::vector<int> a = {1, 1};
  EXPECT_THROW(hajek_ipw(y, a, w), GroupEmptyError);
}

// Linearized SE: each arm's ratio estimator has influence w (y - theta) / E[w].
TEST(HajekIpw, TrueWeightsAreConsistent) {
  const std::size_t n = 1000000;
  const Sample s = true_weight_sample(n, 2);
  const auto e = hajek_ipw(s.y, s.a, s.w);
  double m1 = 0.0, m0 = 0.0;
  for (std::size_t i = 0; i < n; ++i) (s.a[i] ? m1 : m0) += s.w[i] / n;
  std::vector<double> infl(n);
  for (std::size_t i = 0; i < n; ++i)
    infl[i] = s.a[i] ? s.w[i] * (s.y[i] - *e.theta1_hat) / m1
                     : -s.w[i] * (s.y[i] - *e.theta0_hat) / m0;
  EXPECT_NEAR(e.tau_hat, true_ate(default_discrete_world()), 4.0 * sd(infl) / std::sqrt(n));
}

TEST(HajekIpw, GapToHtShrinksWithN) {
  auto mean_gap = [](std::size_t n) {
    double g = 0.0;
    for (std::uint64_t seed = 0; seed < 10; ++seed) {
      const Sample s = true_weight_sample(n, 100 + seed);
      g += std::abs(ht_ipw(s.y, s.a, s.w).tau_hat - hajek_ipw(s.y, s.a, s.w).tau_hat);
    }
    return g / 10;
  };
  EXPECT_GT(mean_gap(1000), 5.0 * mean_gap(100000));
}

TEST(IpwForms, AgreeWhenWeightsSumToSampleSizePerArm) {
  std::vector<double> y = {0.3, 1.2, -0.4, 2.0, 0.1};
  std::vector<int> a = {1, 0, 1, 0, 0};
  std::vector<double> w = {2.5, 5.0 / 3, 2.5, 5.0 / 3, 5.0 / 3};
  EXPECT_NEAR(ht_ipw(y, a, w).tau_hat, hajek_ipw(y, a, w).tau_hat, 1e-14);
}

TEST(IpwForms, RescalingAffectsOnlyHt) {
  const Sample s = true_weight_sample(1000, 3);
  std::vector<double> w3(s.w);
  for (double& v : w3) v *= 3.0;
  EXPECT_NEAR(hajek_ipw(s.y, s.a, w3).tau_hat, hajek_ipw(s.y, s.a, s.w).tau_hat, 1e-13);
  EXPECT_NEAR(ht_ipw(s.y, s.a, w3).tau_hat, 3.0 * ht_ipw(s.y, s.a, s.w).tau_hat, 1e-12);
}

TEST(Estimators, InvariantToRowPermutation) {
  Sample s = true_weight_sample(2000, 4);
  const double ht = ht_ipw(s.y, s.a, s.w).tau_hat, hj = hajek_ipw(s.y, s.a, s.w).tau_hat;
  const double mt = match_ps(s.ps, s.a, s.y).tau_hat;
  const double orr = outcome_regression(s.z, s.x, s.a, s.y, WorldKind::discrete).tau_hat;
  std::vector<std::size_t> perm(s.y.size());
  std::iota(perm.begin(), perm.end(), 0);
  std::mt19937_64 gen(8);
  std::shuffle(perm.begin(), perm.end(), gen);
  Sample t;
  for (std::size_t i : perm) {
    t.z.push_back(s.z[i]);
    t.x.push_back(s.x[i]);
    t.y.push_back(s.y[i]);
    t.a.push_back(s.a[i]);
    t.ps.push_back(s.ps[i]);
    t.w.push_back(s.w[i]);
  }
  EXPECT_NEAR(ht_ipw(t.y, t.a, t.w).tau_hat, ht, 1e-12);
  EXPECT_NEAR(hajek_ipw(t.y, t.a, t.w).tau_hat, hj, 1e-12);
  EXPECT_NEAR(match_ps(t.ps, t.a, t.y).tau_hat, mt, 1e-12);
  EXPECT_NEAR(outcome_regression(t.z, t.x, t.a, t.y, WorldKind::discrete).tau_hat, orr, 1e-12);
}

TEST(MatchPs, TwoUnitExample) {
  std::vector<double> ps = {0.4, 0.4}, y = {1, 0};
  std::vector<int> a = {1, 0};
  EXPECT_DOUBLE_EQ(match_ps(ps, a, y).tau_hat, 1.0);
}

TEST(MatchPs, IdenticalOutcomesWithinPairsGiveZero) {
  std::vector<double> ps = {0.2, 0.2, 0.7, 0.7, 0.5, 0.5}, y = {3, 3, -1, -1, 8, 8};
  std::vector<int> a = {1, 0, 0, 1, 1, 0};
  EXPECT_DOUBLE_EQ(match_ps(ps, a, y).tau_hat, 0.0);
}

TEST(MatchPs, EmptyGroupThrows) {
  std::vector<double> ps = {0.2, 0.3}, y = {1, 1};
  std::vector<int> a = {0, 0};
  EXPECT_THROW(match_ps(ps, a, y), GroupEmptyError);
}

TEST(MatchPs, TieRules) {
  // The treated unit (0.5) is equally near the controls at 0.4 (rows 1 and 3)
  // and at 0.6 (row 2).
  std::vector<double> ps = {0.5, 0.4, 0.6, 0.4}, y = {1.0, 0.0, 4.0, 2.0};
  std::vector<int> a = {1, 0, 0, 0};
  // Averaging: the treated unit's counterfactual is mean(0, 4, 2) = 2.
  // Controls all match the only treated unit (y = 1).
  const double avg = ((1.0 - 2.0) + (1.0 - 0.0) + (1.0 - 4.0) + (1.0 - 2.0)) / 4.0;
  EXPECT_DOUBLE_EQ(match_ps(ps, a, y, MatchTies::average).tau_hat, avg);
  // Lowest index: row 1 (y = 0) wins for the treated unit.
  const double low = ((1.0 - 0.0) + (1.0 - 0.0) + (1.0 - 4.0) + (1.0 - 2.0)) / 4.0;
  EXPECT_DOUBLE_EQ(match_ps(ps, a, y, MatchTies::lowest_index).tau_hat, low);
}

TEST(MatchPs, AgreesWithBruteForceOnContinuousScores) {
  std::mt19937_64 gen(9);
  std::uniform_real_distribution<double> u(0.05, 0.95);
  std::normal_distribution<double> normal;
  for (int trial = 0; trial < 5; ++trial) {
    const std::size_t n = 300;
    std::vector<double> ps(n), y(n);
    std::vector<int> a(n);
    for (std::size_t i = 0; i < n; ++i) {
      ps[i] = u(gen);
      a[i] = u(gen) < ps[i];
      y[i] = a[i] + ps[i] + normal(gen);
    }
    EXPECT_NEAR(match_ps(ps, a, y).tau_hat, brute_force_match(ps, a, y), 1e-12);
  }
}

TEST(MatchPs, AgreesWithBruteForceOnFewDistinctScores) {
  std::mt19937_64 gen(10);
  std::uniform_int_distribution<int> pick(0, 5);
  std::bernoulli_distribution coin(0.5);
  std::normal_distribution<double> normal;
  const double levels[] = {0.1, 0.25, 0.3, 0.5, 0.75, 0.9};
  const std::size_t n = 400;
  std::vector<double> ps(n), y(n);
  std::vector<int> a(n);
  for (std::size_t i = 0; i < n; ++i) {
    ps[i] = levels[pick(gen)];
    a[i] = coin(gen);
    y[i] = normal(gen);
  }
  EXPECT_NEAR(match_ps(ps, a, y).tau_hat, brute_force_match(ps, a, y), 1e-12);
}

TEST(MatchPs, TruePropensityIsConsistent) {
  std::vector<double> est;
  for (std::uint64_t seed = 0; seed < 30; ++seed) {
    const Sample s = true_weight_sample(100000, 200 + seed);
    est.push_back(match_ps(s.ps, s.a, s.y).tau_hat);
  }
  EXPECT_NEAR(mean(est), true_ate(default_discrete_world()), 4.0 * sd(est) / std::sqrt(30.0));
}

TEST(OutcomeRegression, OutcomeEqualToTreatment) {
  std::vector<double> z = {0, 0, 1, 1, 0, 1}, x = {0, 0, 1, 1, 1, 0};
  std::vector<int> a = {0, 1, 0, 1, 0, 1};
  std::vector<double> y(a.begin(), a.end());
  // Cells (0,1) and (1,0) have one arm only; add the missing arms.
  z.insert(z.end(), {0, 1});
  x.insert(x.end(), {1, 0});
  a.insert(a.end(), {1, 0});
  y.insert(y.end(), {1, 0});
  EXPECT_DOUBLE_EQ(outcome_regression(z, x, a, y, WorldKind::discrete).tau_hat, 1.0);
  std::vector<double> xc = {0.1, 0.4, -0.3, 1.2, 0.8, -1.0, 0.3, 0.5};
  EXPECT_NEAR(outcome_regression(z, xc, a, y, WorldKind::continuous).tau_hat, 1.0, 1e-12);
}

TEST(OutcomeRegression, BalancedToyTableGivesZero) {
  std::vector<double> z, x, y;
  std::vector<int> a;
  for (int zz = 0; zz < 2; ++zz)
    for (int xx = 0; xx < 2; ++xx)
      for (int aa = 0; aa < 2; ++aa)
        for (int yy = 0; yy < 2; ++yy) {
          z.push_back(zz);
          x.push_back(xx);
          a.push_back(aa);
          y.push_back(yy);
        }
  EXPECT_EQ(outcome_regression(z, x, a, y, WorldKind::discrete).tau_hat, 0.0);
}

TEST(OutcomeRegression, EmptyCellAndRankDeficiency) {
  std::vector<double> z = {0, 0, 1}, x = {0, 0, 1}, y = {1, 0, 1};
  std::vector<int> a = {0, 1, 1};
  try {
    outcome_regression(z, x, a, y, WorldKind::discrete);
    FAIL() << "expected FitError";
  } catch (const FitError& e) {
    EXPECT_NE(std::string(e.what()).find("z=1,x=1,a=0"), std::string::npos) << e.what();
  }
  std::vector<double> zc = {0, 1, 0, 1, 0}, xc = {1, 1, 1, 1, 1}, yc = {1, 2, 3, 4, 5};
  std::vector<int> ac = {0, 1, 1, 0, 1};
  EXPECT_THROW(outcome_regression(zc, xc, ac, yc, WorldKind::continuous), FitError);
}

TEST(OutcomeRegression, DiscreteIsConsistent) {
  std::vector<double> est;
  for (std::uint64_t seed = 0; seed < 30; ++seed) {
    const Sample s = true_weight_sample(100000, 300 + seed);
    est.push_back(outcome_regression(s.z, s.x, s.a, s.y, WorldKind::discrete).tau_hat);
  }
  EXPECT_NEAR(mean(est), true_ate(default_discrete_world()), 4.0 * sd(est) / std::sqrt(30.0));
}

TEST(OutcomeRegression, ContinuousMatchesOlsOracle) {
  const auto p = fully_observed(continuous_preset());
  const std::size_t n = 100000;
  const Dataset ds = generate_continuous(p, n, 13);
  std::vector<double> x(n);
  Eigen::MatrixXd d(n, 4);
  Eigen::VectorXd y(n);
  for (std::size_t i = 0; i < n; ++i) {
    x[i] = *ds.x[i];
    d.row(i) << 1.0, ds.a[i], ds.z[i], x[i];
    y[i] = ds.y[i];
  }
  const Eigen::MatrixXd xtx = d.transpose() * d;
  const Eigen::VectorXd beta = xtx.ldlt().solve(d.transpose() * y);
  const double s2 = (y - d * beta).squaredNorm() / (n - 4);
  const double se = std::sqrt(s2 * xtx.inverse()(1, 1));
  const double tau = outcome_regression(ds.z, x, ds.a, ds.y, WorldKind::continuous).tau_hat;
  EXPECT_NEAR(tau, beta[1], 1e-9);
  EXPECT_NEAR(tau, p.effect, 4.0 * se);
}
