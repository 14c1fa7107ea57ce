#include <gtest/gtest.h>

#include <algorithm>
#include <cmath>
#include <random>

#include "mipw/combiners.hpp"
#include "test_support.hpp"

using namespace mipw;
using namespace testing_support;

namespace {

std::vector<double> observed_x(const Dataset& ds) {
  std::vector<double> x(ds.size());
  for (std::size_t i = 0; i < ds.size(); ++i) x[i] = *ds.x[i];
  return x;
}

// Base estimate on one fully observed dataset, assembled from the primitives.
double single_dataset_estimate(const Dataset& ds, BaseEstimator base) {
  const auto x = observed_x(ds);
  if (base == BaseEstimator::outcome_regression)
    return outcome_regression(ds.z, x, ds.a, ds.y, ds.world).tau_hat;
  const PropensityModel m = fit_propensity_model(ds.world, ds.z, x, ds.a);
  std::vector<double> ps(ds.size());
  for (std::size_t i = 0; i < ds.size(); ++i) ps[i] = m.score(ds.z[i], x[i]);
  if (base == BaseEstimator::match) return match_ps(ps, ds.a, ds.y).tau_hat;
  const auto w = ip_weights(ps, ds.a);
  return base == BaseEstimator::ht ? ht_ipw(ds.y, ds.a, w).tau_hat : hajek_ipw(ds.y, ds.a, w).tau_hat;
}

ImputedStack oracle_stack(const WorldParams& p, std::size_t n, std::size_t m, std::uint64_t seed) {
  return impute_oracle(generate(p, n, seed), p, m, seed + 1);
}

// Stack whose M imputations all repeat imputation 0 of `st`.
ImputedStack repeat_first(const ImputedStack& st, std::size_t m) {
  ImputedStack out = st;
  out.m = m;
  out.x_imputed.clear();
  for (std::size_t k = 0; k < m; ++k)
    out.x_imputed.insert(out.x_imputed.end(), st.x_imputed.begin(),
                         st.x_imputed.begin() + static_cast<std::ptrdiff_t>(st.n()));
  return out;
}

const BaseEstimator kAllBases[] = {BaseEstimator::ht, BaseEstimator::hajek, BaseEstimator::match,
                                   BaseEstimator::outcome_regression};
const BaseEstimator kScoreBases[] = {BaseEstimator::ht, BaseEstimator::hajek, BaseEstimator::match};

double median(std::vector<double> v) {
  std::sort(v.begin(), v.end());
  const std::size_t h = v.size() / 2;
  return v.size() % 2 ? v[h] : 0.5 * (v[h - 1] + v[h]);
}

}  // namespace

TEST(Within, FullyObservedStackEqualsSingleDatasetEstimate) {
  for (const WorldParams& p :
       {WorldParams(fully_observed(default_discrete_world())), WorldParams(fully_observed(continuous_preset()))}) {
    const Dataset ds = generate(p, 1500, 3);
    for (std::size_t m : {1u, 4u}) {
      const ImputedStack st = impute_oracle(ds, p, m, 5);
      for (BaseEstimator b : kAllBases)
        EXPECT_NEAR(within(st, b).tau_hat, single_dataset_estimate(ds, b), 1e-12) << to_string(b);
    }
  }
}

TEST(Within, EstimateIsTheMeanOfPerImputationEstimates) {
  const ImputedStack st = oracle_stack(default_discrete_world(), 2000, 7, 8);
  for (BaseEstimator b : kAllBases) {
    const MethodResult r = within(st, b);
    ASSERT_EQ(r.per_imputation.size(), 7u);
    double s = 0.0;
    for (double v : r.per_imputation) s += v;
    EXPECT_EQ(r.tau_hat, s / 7);
    EXPECT_EQ(r.method, "within");
    EXPECT_EQ(r.base, to_string(b));
  }
  EXPECT_DOUBLE_EQ(detail::average("within", "ht", {0.2, 0.4}).tau_hat, 0.3);
}

TEST(Within, SharedFitsGiveTheSameAnswer) {
  const ImputedStack st = oracle_stack(default_discrete_world(), 1000, 3, 9);
  const StackFits fits = fit_stack(st);
  for (BaseEstimator b : kScoreBases) EXPECT_EQ(within(st, b, &fits).tau_hat, within(st, b).tau_hat);
  EXPECT_EQ(across_aps(st, BaseEstimator::hajek, &fits).tau_hat, across_aps(st, BaseEstimator::hajek).tau_hat);
  EXPECT_EQ(across_apm(st, &fits).tau_hat, across_apm(st).tau_hat);
  EXPECT_EQ(across_apw(st, IpwForm::hajek, &fits).tau_hat, across_apw(st, IpwForm::hajek).tau_hat);
}

// The HT estimate is linear in the weights, so averaging weights before or
// after estimation gives the same number.
TEST(AcrossApw, HtFormEqualsWithinHtOnRandomWorlds) {
  std::mt19937_64 gen(101);
  std::uniform_int_distribution<std::size_t> size(20, 2000);
  const std::size_t ms[] = {1, 2, 5};
  int checked = 0;
  for (int t = 0; checked < 60; ++t) {
    const bool discrete = t % 2 == 0;
    const WorldParams p = discrete ? WorldParams(random_discrete_world(gen))
                                   : WorldParams(random_continuous_world(gen));
    const std::size_t n = size(gen), m = ms[t % 3];
    try {
      const ImputedStack st = oracle_stack(p, n, m, gen());
      const StackFits fits = fit_stack(st);
      const double apw = across_apw(st, IpwForm::ht, &fits).tau_hat;
      const double wit = within(st, BaseEstimator::ht, &fits).tau_hat;
      EXPECT_NEAR(apw, wit, 1e-12) << "n=" << n << " m=" << m;
      ++checked;
    } catch (const Error&) {
      // Small samples can leave a saturated cell empty; draw another tuple.
    }
  }
}

TEST(AcrossApw, WithinHtIsTheDisplayedLinearCombinationOfOutcomes) {
  const ImputedStack st = oracle_stack(default_discrete_world(), 3000, 5, 12);
  const StackFits fits = fit_stack(st);
  const std::size_t n = st.n();
  double tau = 0.0;
  for (std::size_t i = 0; i < n; ++i) {
    double wsum = 0.0;
    for (std::size_t k = 0; k < st.m; ++k) {
      const double e = fits.scores[k * n + i];
      wsum += st.base.a[i] ? 1 / e : 1 / (1 - e);
    }
    const double sign = st.base.a[i] ? 1.0 : -1.0;
    tau += sign * wsum / (static_cast<double>(n) * st.m) * st.base.y[i];
  }
  EXPECT_NEAR(within(st, BaseEstimator::ht, &fits).tau_hat, tau, 1e-12);
}

TEST(AcrossMethods, SingleImputationCollapsesToWithin) {
  for (const WorldParams& p : {WorldParams(default_discrete_world()), WorldParams(continuous_preset())}) {
    const ImputedStack st = oracle_stack(p, 2000, 1, 13);
    const StackFits fits = fit_stack(st);
    for (BaseEstimator b : kScoreBases)
      EXPECT_NEAR(across_aps(st, b, &fits).tau_hat, within(st, b, &fits).tau_hat, 1e-12) << to_string(b);
    EXPECT_NEAR(across_apm(st, &fits).tau_hat, within(st, BaseEstimator::hajek, &fits).tau_hat, 1e-12);
    EXPECT_NEAR(across_apw(st, IpwForm::ht, &fits).tau_hat, within(st, BaseEstimator::ht, &fits).tau_hat, 1e-12);
    EXPECT_NEAR(across_apw(st, IpwForm::hajek, &fits).tau_hat,
                within(st, BaseEstimator::hajek, &fits).tau_hat, 1e-12);
  }
}

TEST(AcrossMethods, FullyObservedEqualsSingleDatasetEstimate) {
  const auto p = fully_observed(default_discrete_world());
  const Dataset ds = generate_discrete(p, 1500, 14);
  const ImputedStack st = impute_oracle(ds, p, 3, 1);
  for (BaseEstimator b : kScoreBases)
    EXPECT_NEAR(across_aps(st, b).tau_hat, single_dataset_estimate(ds, b), 1e-12) << to_string(b);
  EXPECT_NEAR(across_apm(st).tau_hat, single_dataset_estimate(ds, BaseEstimator::hajek), 1e-12);
  EXPECT_NEAR(across_apw(st, IpwForm::hajek).tau_hat, single_dataset_estimate(ds, BaseEstimator::hajek), 1e-12);
}

TEST(AcrossApm, IdenticalImputationsMatchAcrossAps) {
  for (const WorldParams& p : {WorldParams(default_discrete_world()), WorldParams(continuous_preset())}) {
    const ImputedStack st = repeat_first(oracle_stack(p, 2000, 1, 15), 4);
    const StackFits fits = fit_stack(st);
    const MethodResult apm = across_apm(st, &fits);
    EXPECT_NEAR(apm.tau_hat, across_aps(st, BaseEstimator::hajek, &fits).tau_hat, 1e-12);
    const auto& c0 = fits.models[0].fit.coefficients;
    ASSERT_EQ(apm.pooled_coefficients.size(), static_cast<std::size_t>(c0.size()));
    for (Eigen::Index j = 0; j < c0.size(); ++j) EXPECT_NEAR(apm.pooled_coefficients[j], c0[j], 1e-12);
  }
}

TEST(AcrossApm, ScoresMissingUnitsAtTheirMeanImputedCovariate) {
  const auto p = continuous_preset();
  const ImputedStack st = oracle_stack(p, 1000, 5, 16);
  const MethodResult apm = across_apm(st);
  const auto& c = apm.pooled_coefficients;
  ASSERT_EQ(c.size(), 3u);
  for (std::size_t i = 0; i < st.n(); ++i) {
    double x = 0.0;
    if (st.base.r[i]) {
      x = *st.base.x[i];
    } else {
      for (std::size_t k = 0; k < st.m; ++k) x += st.x_imputed[k * st.n() + i];
      x /= st.m;
    }
    EXPECT_NEAR(apm.pooled[i], expit(c[0] + c[1] * st.base.z[i] + c[2] * x), 1e-12) << i;
  }
}

// A saturated propensity fit makes the inverse weights of each arm sum to N,
// so the Hajek and HT forms coincide in every completed dataset.
TEST(AcrossApw, SaturatedModelMakesHajekFormsCoincide) {
  std::mt19937_64 gen(202);
  for (int t = 0; t < 20; ++t) {
    const ImputedStack st = oracle_stack(random_discrete_world(gen), 5000, 1 + t % 5, gen());
    const StackFits fits = fit_stack(st);
    const double wht = within(st, BaseEstimator::ht, &fits).tau_hat;
    EXPECT_NEAR(within(st, BaseEstimator::hajek, &fits).tau_hat, wht, 1e-12);
    EXPECT_NEAR(across_apw(st, IpwForm::hajek, &fits).tau_hat, wht, 1e-12);
  }
}

TEST(AcrossApw, HajekGapToWithinShrinksWithSampleSize) {
  const auto p = continuous_preset();
  auto median_gap = [&](std::size_t n) {
    std::vector<double> gaps;
    for (std::uint64_t s = 0; s < 20; ++s) {
      const ImputedStack st = oracle_stack(p, n, 5, 7000 + s);
      const StackFits fits = fit_stack(st);
      gaps.push_back(std::abs(across_apw(st, IpwForm::hajek, &fits).tau_hat -
                              within(st, BaseEstimator::hajek, &fits).tau_hat));
    }
    return median(gaps);
  };
  const double small = median_gap(500), large = median_gap(50000);
  EXPECT_GT(small, 1e-6);
  EXPECT_LE(large, small / 10);
}

TEST(WithinImps, FullyObservedUsesTheFittedScores) {
  const Dataset ds = generate_discrete(fully_observed(default_discrete_world()), 2000, 17);
  const ImputedStack st = impute_propensity(ds, 3, 1);
  const auto wf = fit_response_weighted_propensity(ds, ResponseModel::saturated, PsModel::saturated);
  std::vector<double> u(ds.size());
  for (std::size_t i = 0; i < ds.size(); ++i) u[i] = wf.score(ds.z[i], *ds.x[i]);
  for (BaseEstimator b : kScoreBases)
    EXPECT_NEAR(within_imps(st, b).tau_hat, detail::score_based(b, ds, u).tau_hat, 1e-12);
}

// Masked rows get the true propensity of their hidden covariate, so the only
// difference from the oracle-X within method is which consistent score the
// masked rows carry.
TEST(WithinImps, TruePropensityFillMatchesOracleWithin) {
  const auto p = default_discrete_world();
  const std::size_t n = 10000, m = 5;
  std::vector<double> gap;
  for (std::uint64_t rep = 0; rep < 40; ++rep) {
    const std::uint64_t seed = 900 + rep;
    const Dataset ds = generate_discrete(p, n, seed);
    const auto hx = hidden_x(p, n, seed);
    const ImputedStack prop = impute_propensity(ds, m, seed);
    ImputedStack filled = prop;
    for (std::size_t k = 0; k < m; ++k)
      for (std::size_t i = 0; i < n; ++i)
        if (ds.r[i] == 0)
          (*filled.u_imputed)[k * n + i] = p.propensity(static_cast<int>(ds.z[i]), static_cast<int>(hx[i]));
    gap.push_back(within_imps(filled, BaseEstimator::hajek).tau_hat -
                  within(impute_oracle(ds, p, m, seed), BaseEstimator::hajek).tau_hat);
  }
  EXPECT_LT(std::abs(mean(gap)), 3.0 * sd(gap) / std::sqrt(gap.size()));
}

TEST(Impw, FullyObservedEqualsPlainIpw) {
  const Dataset ds = generate_discrete(fully_observed(default_discrete_world()), 2000, 18);
  EXPECT_NEAR(impw_estimate(ds, IpwForm::ht).tau_hat, single_dataset_estimate(ds, BaseEstimator::ht), 1e-12);
  EXPECT_NEAR(impw_estimate(ds, IpwForm::hajek).tau_hat,
              single_dataset_estimate(ds, BaseEstimator::hajek), 1e-12);
}

TEST(Impw, BalancedWorldGivesDifferenceOfMeans) {
  // Each (z, a, y) cell holds both covariate values once and one masked row,
  // so the fitted propensity is exactly 1/2 and every weight is 2.
  std::vector<double> z, y;
  std::vector<std::optional<double>> x;
  std::vector<int> a;
  for (int zz = 0; zz < 2; ++zz)
    for (int aa = 0; aa < 2; ++aa)
      for (int yy = 0; yy < 2; ++yy)
        for (std::optional<double> xx : {std::optional<double>(0.0), std::optional<double>(1.0),
                                         std::optional<double>()}) {
          z.push_back(zz);
          x.push_back(xx);
          a.push_back(aa);
          y.push_back(yy);
        }
  const Dataset ds = make_dataset(z, x, a, y);
  double s1 = 0, n1 = 0, s0 = 0, n0 = 0;
  for (std::size_t i = 0; i < ds.size(); ++i) (ds.a[i] ? s1 : s0) += ds.y[i], (ds.a[i] ? n1 : n0) += 1;
  const double diff = s1 / n1 - s0 / n0;
  EXPECT_NEAR(impw_estimate(ds, IpwForm::hajek).tau_hat, diff, 1e-12);
  EXPECT_NEAR(impw_estimate(ds, IpwForm::ht).tau_hat, diff, 1e-12);
}

TEST(Errors, FailingImputationIsIdentified) {
  // Imputation 0 puts the masked control in cell (z=1,x=1); imputation 1 moves
  // it out, leaving that cell with a single treated unit.
  const Dataset ds = make_dataset({0, 0, 0, 0, 1, 1, 1, 1}, {0.0, 0.0, 1.0, 1.0, 0.0, 0.0, 1.0, std::nullopt},
                                  {0, 1, 0, 1, 0, 1, 1, 0}, {0, 1, 0, 1, 1, 0, 1, 0});
  ImputedStack st;
  st.m = 2;
  st.base = ds;
  st.strategy = "manual";
  st.x_imputed.resize(16);
  for (std::size_t k = 0; k < 2; ++k)
    for (std::size_t i = 0; i < 8; ++i) st.x_imputed[k * 8 + i] = ds.x[i] ? *ds.x[i] : (k == 0 ? 1.0 : 0.0);
  try {
    within(st, BaseEstimator::hajek);
    FAIL() << "expected ImputationError";
  } catch (const ImputationError& e) {
    EXPECT_EQ(e.imputation(), 1u);
  }
  EXPECT_THROW(across_aps(st, BaseEstimator::ht), ImputationError);
  EXPECT_THROW(across_apw(st, IpwForm::ht), ImputationError);

  ImputedStack u = impute_propensity(generate_discrete(default_discrete_world(), 500, 2), 3, 1);
  (*u.u_imputed)[2 * u.n()] = 1.0;
  try {
    within_imps(u, BaseEstimator::hajek);
    FAIL() << "expected ImputationError";
  } catch (const ImputationError& e) {
    EXPECT_EQ(e.imputation(), 2u);
  }
}

TEST(Errors, InvalidRequests) {
  const ImputedStack st = oracle_stack(default_discrete_world(), 300, 2, 19);
  EXPECT_THROW(across_aps(st, BaseEstimator::outcome_regression), ConfigError);
  EXPECT_THROW(within_imps(st, BaseEstimator::hajek), ConfigError);
  ImputedStack empty = st;
  empty.m = 0;
  EXPECT_THROW(within(empty, BaseEstimator::ht), ConfigError);
  EXPECT_THROW(across_apm(empty), ConfigError);
  EXPECT_THROW(impw_estimate(generate_continuous(continuous_preset(), 100, 1), IpwForm::ht), ConfigError);
}
