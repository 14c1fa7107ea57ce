#pragma once

// Data-generating worlds: a discrete world with binary (Z, X, A, Y, R) and a
// continuous Gaussian world. Both satisfy SUTVA, unconfoundedness given
// (Z, X), and MAR missingness of X (R depends on Z, A, Y only).

#include <array>
#include <cmath>
#include <cstddef>
#include <cstdint>
#include <map>
#include <optional>
#include <ostream>
#include <random>
#include <sstream>
#include <string>
#include <variant>
#include <vector>

#include "mipw/errors.hpp"
#include "mipw/logit.hpp"

namespace mipw {

inline constexpr double kPositivityGuard = 0.01;

enum class WorldKind { discrete, continuous };

inline const char* to_string(WorldKind w) {
  return w == WorldKind::discrete ? "discrete" : "continuous";
}

struct DiscreteWorldParams {
  double p_z = 0.5;                             // P(Z=1)
  std::array<double, 2> p_x_given_z{0.5, 0.5};  // P(X=1 | Z=z)
  std::array<double, 4> ps_coeffs{};            // intercept, z, x, z*x
  std::array<double, 5> outcome_coeffs{};       // intercept, z, x, a, x*a
  std::array<double, 4> response_coeffs{};      // intercept, z, a, y

  double prob_x(int z) const { return p_x_given_z[z]; }

  // Linear in x, so fractional x is meaningful (used by the aPM proxy).
  double ps_logit(int z, double x) const {
    return ps_coeffs[0] + ps_coeffs[1] * z + ps_coeffs[2] * x + ps_coeffs[3] * z * x;
  }
  double propensity(int z, double x) const { return expit(ps_logit(z, x)); }

  double outcome_prob(int z, int x, int a) const {
    const auto& c = outcome_coeffs;
    return expit(c[0] + c[1] * z + c[2] * x + c[3] * a + c[4] * x * a);
  }

  double response_prob(int z, int a, int y) const {
    const auto& c = response_coeffs;
    return expit(c[0] + c[1] * z + c[2] * a + c[3] * y);
  }

  // Throws ConfigError naming the first offending cell. Treatment, covariate
  // and outcome probabilities must lie in (eps, 1-eps); the response
  // probability must be at least eps (complete cases exist in every cell) and
  // may equal 1 (no missingness).
  void validate(double eps = kPositivityGuard) const {
    auto check = [eps](double p, const std::string& what) {
      if (!(p > eps && p < 1.0 - eps)) {
        std::ostringstream os;
        os << what << " = " << p << " outside (" << eps << ", " << 1.0 - eps << ")";
        throw ConfigError(os.str());
      }
    };
    auto finite = [](const auto& arr, const char* name) {
      for (double v : arr)
        if (!std::isfinite(v)) throw ConfigError(std::string(name) + " has a non-finite entry");
    };
    finite(ps_coeffs, "ps_coeffs");
    finite(outcome_coeffs, "outcome_coeffs");
    finite(response_coeffs, "response_coeffs");
    check(p_z, "P(Z=1)");
    for (int z = 0; z < 2; ++z) {
      check(prob_x(z), "P(X=1|Z=" + std::to_string(z) + ")");
      for (int x = 0; x < 2; ++x) {
        check(propensity(z, x), "e(z=" + std::to_string(z) + ",x=" + std::to_string(x) + ")");
        for (int a = 0; a < 2; ++a)
          check(outcome_prob(z, x, a), "P(Y=1|z=" + std::to_string(z) + ",x=" +
                                           std::to_string(x) + ",a=" + std::to_string(a) + ")");
      }
      for (int a = 0; a < 2; ++a)
        for (int y = 0; y < 2; ++y) {
          const double p = response_prob(z, a, y);
          if (!(p >= eps && p <= 1.0)) {
            std::ostringstream os;
            os << "P(R=1|z=" << z << ",a=" << a << ",y=" << y << ") = " << p
               << " below " << eps;
            throw ConfigError(os.str());
          }
        }
    }
  }
};

struct ContinuousWorldParams {
  double p_z = 0.5;  // Z ~ Bernoulli(p_z)
  // X | Z ~ Normal(x_intercept + x_slope * Z, x_sd^2)
  double x_intercept = 0.0;
  double x_slope = 0.0;
  double x_sd = 1.0;
  std::array<double, 3> ps_coeffs{};  // intercept, z, x
  // Y = effect * A + y_intercept + y_slope_z * Z + y_slope_x * X + Normal(0, y_sd^2)
  double effect = 0.0;
  double y_intercept = 0.0;
  double y_slope_z = 0.0;
  double y_slope_x = 0.0;
  double y_sd = 1.0;
  std::array<double, 4> response_coeffs{};  // intercept, z, a, y

  double ps_logit(double z, double x) const {
    return ps_coeffs[0] + ps_coeffs[1] * z + ps_coeffs[2] * x;
  }
  double propensity(double z, double x) const { return expit(ps_logit(z, x)); }
  double x_mean(double z) const { return x_intercept + x_slope * z; }
  double y_mean(double z, double x, int a) const {
    return effect * a + y_intercept + y_slope_z * z + y_slope_x * x;
  }
  double response_prob(double z, int a, double y) const {
    const auto& c = response_coeffs;
    return expit(c[0] + c[1] * z + c[2] * a + c[3] * y);
  }

  void validate() const {
    if (!(x_sd > 0)) throw ConfigError("x_sd must be positive");
    if (!(y_sd > 0)) throw ConfigError("y_sd must be positive");
    if (!(p_z > 0 && p_z < 1)) throw ConfigError("p_z must lie in (0, 1)");
    for (double v : {x_intercept, x_slope, effect, y_intercept, y_slope_z, y_slope_x})
      if (!std::isfinite(v)) throw ConfigError("continuous world has a non-finite coefficient");
    for (double v : ps_coeffs)
      if (!std::isfinite(v)) throw ConfigError("ps_coeffs has a non-finite entry");
    for (double v : response_coeffs)
      if (!std::isfinite(v)) throw ConfigError("response_coeffs has a non-finite entry");
  }
};

using WorldParams = std::variant<DiscreteWorldParams, ContinuousWorldParams>;

inline WorldKind world_kind(const WorldParams& p) {
  return std::holds_alternative<DiscreteWorldParams>(p) ? WorldKind::discrete
                                                        : WorldKind::continuous;
}

// One observed sample. x[i] is present exactly when r[i] == 1.
struct Dataset {
  WorldKind world = WorldKind::discrete;
  std::vector<double> z;
  std::vector<double> y;
  std::vector<int> a;
  std::vector<int> r;
  std::vector<std::optional<double>> x;

  std::size_t size() const { return z.size(); }

  void reserve(std::size_t n) {
    z.reserve(n);
    y.reserve(n);
    a.reserve(n);
    r.reserve(n);
    x.reserve(n);
  }

  void check_invariants() const {
    const std::size_t n = size();
    if (y.size() != n || a.size() != n || r.size() != n || x.size() != n)
      throw SizeError("dataset columns have different lengths");
    for (std::size_t i = 0; i < n; ++i)
      if (x[i].has_value() != (r[i] == 1))
        throw ConfigError("row " + std::to_string(i) + ": x presence disagrees with r");
  }
};

// Dataset plus both potential outcomes; y = a*y1 + (1-a)*y0 row by row.
struct PotentialDataset : Dataset {
  std::vector<double> y0;
  std::vector<double> y1;
  std::string coupling = "Y0 and Y1 independent given (Z, X)";
};

namespace detail {

inline int bernoulli(std::mt19937_64& gen, double p) {
  std::uniform_real_distribution<double> unif(0.0, 1.0);
  return unif(gen) < p ? 1 : 0;
}

}  // namespace detail

inline Dataset generate_discrete(const DiscreteWorldParams& params, std::size_t n,
                                 std::uint64_t seed) {
  params.validate();
  std::mt19937_64 gen(seed);
  Dataset ds;
  ds.world = WorldKind::discrete;
  ds.reserve(n);
  for (std::size_t i = 0; i < n; ++i) {
    const int z = detail::bernoulli(gen, params.p_z);
    const int x = detail::bernoulli(gen, params.prob_x(z));
    const int a = detail::bernoulli(gen, params.propensity(z, x));
    const int y = detail::bernoulli(gen, params.outcome_prob(z, x, a));
    const int r = detail::bernoulli(gen, params.response_prob(z, a, y));
    ds.z.push_back(z);
    ds.a.push_back(a);
    ds.y.push_back(y);
    ds.r.push_back(r);
    ds.x.push_back(r == 1 ? std::optional<double>(x) : std::nullopt);
  }
  return ds;
}

// Y0 and Y1 are drawn independently given (Z, X).
inline PotentialDataset generate_potential_discrete(const DiscreteWorldParams& params,
                                                    std::size_t n, std::uint64_t seed) {
  params.validate();
  std::mt19937_64 gen(seed);
  PotentialDataset ds;
  ds.world = WorldKind::discrete;
  ds.reserve(n);
  ds.y0.reserve(n);
  ds.y1.reserve(n);
  for (std::size_t i = 0; i < n; ++i) {
    const int z = detail::bernoulli(gen, params.p_z);
    const int x = detail::bernoulli(gen, params.prob_x(z));
    const int a = detail::bernoulli(gen, params.propensity(z, x));
    const int y0 = detail::bernoulli(gen, params.outcome_prob(z, x, 0));
    const int y1 = detail::bernoulli(gen, params.outcome_prob(z, x, 1));
    const int y = a == 1 ? y1 : y0;
    const int r = detail::bernoulli(gen, params.response_prob(z, a, y));
    ds.z.push_back(z);
    ds.a.push_back(a);
    ds.y.push_back(y);
    ds.y0.push_back(y0);
    ds.y1.push_back(y1);
    ds.r.push_back(r);
    ds.x.push_back(r == 1 ? std::optional<double>(x) : std::nullopt);
  }
  return ds;
}

inline Dataset generate_continuous(const ContinuousWorldParams& params, std::size_t n,
                                   std::uint64_t seed) {
  params.validate();
  std::mt19937_64 gen(seed);
  std::normal_distribution<double> normal(0.0, 1.0);
  Dataset ds;
  ds.world = WorldKind::continuous;
  ds.reserve(n);
  for (std::size_t i = 0; i < n; ++i) {
    const int z = detail::bernoulli(gen, params.p_z);
    const double x = params.x_mean(z) + params.x_sd * normal(gen);
    const int a = detail::bernoulli(gen, params.propensity(z, x));
    const double y = params.y_mean(z, x, a) + params.y_sd * normal(gen);
    const int r = detail::bernoulli(gen, params.response_prob(z, a, y));
    ds.z.push_back(z);
    ds.a.push_back(a);
    ds.y.push_back(y);
    ds.r.push_back(r);
    ds.x.push_back(r == 1 ? std::optional<double>(x) : std::nullopt);
  }
  return ds;
}

inline Dataset generate(const WorldParams& params, std::size_t n, std::uint64_t seed) {
  return std::visit(
      [&](const auto& p) -> Dataset {
        if constexpr (std::is_same_v<std::decay_t<decltype(p)>, DiscreteWorldParams>)
          return generate_discrete(p, n, seed);
        else
          return generate_continuous(p, n, seed);
      },
      params);
}

inline double true_ate(const DiscreteWorldParams& params) {
  params.validate();
  double ate = 0.0;
  for (int z = 0; z < 2; ++z) {
    const double pz = z == 1 ? params.p_z : 1.0 - params.p_z;
    for (int x = 0; x < 2; ++x) {
      const double px = x == 1 ? params.prob_x(z) : 1.0 - params.prob_x(z);
      ate += pz * px * (params.outcome_prob(z, x, 1) - params.outcome_prob(z, x, 0));
    }
  }
  return ate;
}

// Constant treatment effect.
inline double true_ate(const ContinuousWorldParams& params) {
  params.validate();
  return params.effect;
}

inline double true_ate(const WorldParams& params) {
  return std::visit([](const auto& p) { return true_ate(p); }, params);
}

// ---------------------------------------------------------------------------
// Presets

// X confounds (it drives both A and Y) and missingness depends on Z, A and Y.
inline DiscreteWorldParams default_discrete_world() {
  DiscreteWorldParams p;
  p.p_z = 0.4;
  p.p_x_given_z = {0.3, 0.65};
  p.ps_coeffs = {-1.5, 0.5, 2.5, 0.0};
  p.outcome_coeffs = {-1.0, 0.6, 1.5, 0.8, 0.0};
  p.response_coeffs = {1.5, 0.4, -1.5, -1.5};
  return p;
}

inline std::map<std::string, WorldParams> world_presets() {
  std::map<std::string, WorldParams> out;
  const DiscreteWorldParams base = default_discrete_world();
  out.emplace("default", base);

  DiscreteWorldParams strong = base;
  strong.ps_coeffs[2] *= 2.0;
  strong.ps_coeffs[3] *= 2.0;
  strong.outcome_coeffs[2] *= 2.0;
  strong.outcome_coeffs[4] *= 2.0;
  out.emplace("strong", strong);

  DiscreteWorldParams interaction = base;
  interaction.ps_coeffs[3] = -0.8;
  interaction.outcome_coeffs[4] = 0.6;
  out.emplace("interaction", interaction);

  DiscreteWorldParams null_x = base;
  null_x.ps_coeffs[2] = null_x.ps_coeffs[3] = 0.0;
  null_x.outcome_coeffs[2] = null_x.outcome_coeffs[4] = 0.0;
  out.emplace("null", null_x);

  DiscreteWorldParams z_only = base;
  z_only.response_coeffs = {0.8, -0.6, 0.0, 0.0};
  out.emplace("z_only_missing", z_only);

  DiscreteWorldParams y_missing = base;
  y_missing.response_coeffs = {1.5, 0.0, 0.0, -1.8};
  out.emplace("y_missing", y_missing);

  DiscreteWorldParams complete = base;
  complete.response_coeffs = {40.0, 0.0, 0.0, 0.0};  // expit(40) == 1 in double
  out.emplace("complete", complete);

  ContinuousWorldParams cont;
  cont.p_z = 0.5;
  cont.x_intercept = 0.0;
  cont.x_slope = 0.5;
  cont.x_sd = 1.0;
  cont.ps_coeffs = {-0.3, 0.4, 0.8};
  cont.effect = 0.5;
  cont.y_intercept = 0.0;
  cont.y_slope_z = 0.5;
  cont.y_slope_x = 1.0;
  cont.y_sd = 1.0;
  cont.response_coeffs = {0.8, 0.3, -0.5, -0.4};
  out.emplace("continuous", cont);
  return out;
}

inline WorldParams world_preset(const std::string& name) {
  auto presets = world_presets();
  auto it = presets.find(name);
  if (it == presets.end()) throw ConfigError("unknown world preset '" + name + "'");
  return it->second;
}

// ---------------------------------------------------------------------------
// CSV: header z,x,a,y,r with an empty field for a missing x.

inline void write_dataset_csv(std::ostream& os, const Dataset& ds) {
  const auto old_precision = os.precision(17);
  os << "z,x,a,y,r\n";
  for (std::size_t i = 0; i < ds.size(); ++i) {
    os << ds.z[i] << ',';
    if (ds.x[i]) os << *ds.x[i];
    os << ',' << ds.a[i] << ',' << ds.y[i] << ',' << ds.r[i] << '\n';
  }
  os.precision(old_precision);
}

}  // namespace mipw
