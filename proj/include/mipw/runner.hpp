#pragma once

// Monte Carlo experiment engine. A config names a world, sample sizes, a
// replication count, the number of imputations and a list of method x base
// pairs. Every (n, replication) cell generates one dataset and one stack that
// all methods share.

#include <nlohmann/json.hpp>

#include <algorithm>
#include <atomic>
#include <chrono>
#include <cmath>
#include <cstddef>
#include <cstdint>
#include <fstream>
#include <iomanip>
#include <limits>
#include <map>
#include <mutex>
#include <optional>
#include <ostream>
#include <sstream>
#include <string>
#include <thread>
#include <tuple>
#include <utility>
#include <vector>

#include "mipw/combiners.hpp"
#include "mipw/dgp.hpp"
#include "mipw/errors.hpp"
#include "mipw/imputation.hpp"
#include "mipw/rng.hpp"

namespace mipw {

enum class Imputer { oracle, fitted };

inline const char* to_string(Imputer i) { return i == Imputer::oracle ? "oracle" : "fitted"; }

struct MethodSpec {
  std::string method;
  std::string base;

  friend bool operator==(const MethodSpec&, const MethodSpec&) = default;
};

struct ExperimentConfig {
  std::string world_name = "default";
  WorldParams world = default_discrete_world();
  std::vector<std::size_t> sample_sizes;
  std::size_t replications = 1;
  std::size_t imputations = 20;
  std::optional<std::uint64_t> seed;
  std::vector<MethodSpec> methods;
  Imputer imputer = Imputer::oracle;
  std::string output;
  unsigned workers = 1;
  bool record_timing = false;

  void validate() const;
};

namespace detail {

struct MethodInfo {
  const char* name;
  std::vector<const char*> bases;
  bool discrete_only;
};

inline const std::vector<MethodInfo>& method_table() {
  static const std::vector<MethodInfo> table = {
      {"within", {"ht", "hajek", "match", "outcome_regression"}, false},
      {"across_aps", {"ht", "hajek", "match"}, false},
      {"across_apm", {"hajek"}, false},
      {"across_apw", {"ht", "hajek"}, false},
      {"within_imps", {"ht", "hajek", "match"}, true},
      {"impw", {"ht", "hajek"}, true},
  };
  return table;
}

inline bool uses_x_stack(const std::string& method) {
  return method == "within" || method.rfind("across_", 0) == 0;
}

inline BaseEstimator parse_base(const std::string& b) {
  if (b == "ht") return BaseEstimator::ht;
  if (b == "hajek") return BaseEstimator::hajek;
  if (b == "match") return BaseEstimator::match;
  if (b == "outcome_regression") return BaseEstimator::outcome_regression;
  throw ConfigError("unknown base estimator '" + b + "'");
}

inline IpwForm parse_form(const std::string& b) {
  if (b == "ht") return IpwForm::ht;
  if (b == "hajek") return IpwForm::hajek;
  throw ConfigError("unknown IPW form '" + b + "'");
}

template <std::size_t N>
void read_array(const nlohmann::json& j, const char* key, std::array<double, N>& out) {
  if (!j.contains(key)) return;
  const auto& v = j.at(key);
  if (!v.is_array() || v.size() != N)
    throw ConfigError(std::string("'") + key + "' must be an array of " + std::to_string(N) +
                      " numbers");
  for (std::size_t i = 0; i < N; ++i) out[i] = v[i].get<double>();
}

inline void read_number(const nlohmann::json& j, const char* key, double& out) {
  if (j.contains(key)) out = j.at(key).get<double>();
}

inline DiscreteWorldParams parse_discrete(const nlohmann::json& j, DiscreteWorldParams p) {
  read_number(j, "p_z", p.p_z);
  read_array(j, "p_x_given_z", p.p_x_given_z);
  read_array(j, "ps_coeffs", p.ps_coeffs);
  read_array(j, "outcome_coeffs", p.outcome_coeffs);
  read_array(j, "response_coeffs", p.response_coeffs);
  return p;
}

inline ContinuousWorldParams parse_continuous(const nlohmann::json& j, ContinuousWorldParams p) {
  read_number(j, "p_z", p.p_z);
  read_number(j, "x_intercept", p.x_intercept);
  read_number(j, "x_slope", p.x_slope);
  read_number(j, "x_sd", p.x_sd);
  read_array(j, "ps_coeffs", p.ps_coeffs);
  read_number(j, "effect", p.effect);
  read_number(j, "y_intercept", p.y_intercept);
  read_number(j, "y_slope_z", p.y_slope_z);
  read_number(j, "y_slope_x", p.y_slope_x);
  read_number(j, "y_sd", p.y_sd);
  read_array(j, "response_coeffs", p.response_coeffs);
  return p;
}

// "world": "name" | {"preset": "name", ...overrides} | {"kind": "discrete"|"continuous", ...}
inline std::pair<std::string, WorldParams> parse_world(const nlohmann::json& j) {
  if (j.is_string()) return {j.get<std::string>(), world_preset(j.get<std::string>())};
  if (!j.is_object()) throw ConfigError("'world' must be a preset name or an object");
  std::string name;
  WorldParams base;
  if (j.contains("preset")) {
    name = j.at("preset").get<std::string>();
    base = world_preset(name);
  } else {
    const std::string kind = j.value("kind", std::string("discrete"));
    if (kind == "discrete") base = DiscreteWorldParams{};
    else if (kind == "continuous") base = ContinuousWorldParams{};
    else throw ConfigError("unknown world kind '" + kind + "'");
    name = "inline-" + kind;
  }
  if (auto* d = std::get_if<DiscreteWorldParams>(&base)) return {name, parse_discrete(j, *d)};
  return {name, parse_continuous(j, std::get<ContinuousWorldParams>(base))};
}

inline MethodSpec parse_method(const nlohmann::json& j) {
  if (j.is_string()) {
    const auto s = j.get<std::string>();
    const auto colon = s.find(':');
    if (colon == std::string::npos) throw ConfigError("method '" + s + "' must be 'method:base'");
    return {s.substr(0, colon), s.substr(colon + 1)};
  }
  if (!j.is_object() || !j.contains("method") || !j.contains("base"))
    throw ConfigError("each method needs 'method' and 'base'");
  return {j.at("method").get<std::string>(), j.at("base").get<std::string>()};
}

}  // namespace detail

inline void ExperimentConfig::validate() const {
  if (replications < 1) throw ConfigError("replications must be at least 1");
  if (imputations < 1) throw ConfigError("imputations must be at least 1");
  if (!seed) throw ConfigError("a seed is required");
  if (sample_sizes.empty()) throw ConfigError("sample_sizes is empty");
  for (std::size_t n : sample_sizes)
    if (n < 2) throw ConfigError("sample sizes must be at least 2");
  if (methods.empty()) throw ConfigError("method list is empty");
  if (workers < 1) throw ConfigError("workers must be at least 1");
  std::visit([](const auto& p) { p.validate(); }, world);
  const auto& table = detail::method_table();
  for (const auto& m : methods) {
    auto it = std::find_if(table.begin(), table.end(),
                           [&](const detail::MethodInfo& info) { return m.method == info.name; });
    if (it == table.end()) throw ConfigError("unknown method '" + m.method + "'");
    if (std::find_if(it->bases.begin(), it->bases.end(),
                     [&](const char* b) { return m.base == b; }) == it->bases.end())
      throw ConfigError("method '" + m.method + "' does not support base '" + m.base + "'");
    if (it->discrete_only && world_kind(world) != WorldKind::discrete)
      throw ConfigError("method '" + m.method + "' needs the discrete world");
  }
}

inline ExperimentConfig parse_config(const nlohmann::json& j) {
  if (!j.is_object()) throw ConfigError("config must be a JSON object");
  ExperimentConfig c;
  try {
    if (j.contains("world")) std::tie(c.world_name, c.world) = detail::parse_world(j.at("world"));
    if (j.contains("sample_sizes"))
      c.sample_sizes = j.at("sample_sizes").get<std::vector<std::size_t>>();
    if (j.contains("replications")) {
      const auto r = j.at("replications").get<long long>();
      if (r < 1) throw ConfigError("replications must be at least 1");
      c.replications = static_cast<std::size_t>(r);
    }
    if (j.contains("imputations")) {
      const auto m = j.at("imputations").get<long long>();
      if (m < 1) throw ConfigError("imputations must be at least 1");
      c.imputations = static_cast<std::size_t>(m);
    }
    if (j.contains("seed")) c.seed = j.at("seed").get<std::uint64_t>();
    if (j.contains("methods"))
      for (const auto& m : j.at("methods")) c.methods.push_back(detail::parse_method(m));
    if (j.contains("imputer")) {
      const auto s = j.at("imputer").get<std::string>();
      if (s == "oracle") c.imputer = Imputer::oracle;
      else if (s == "fitted") c.imputer = Imputer::fitted;
      else throw ConfigError("unknown imputer '" + s + "'");
    }
    c.output = j.value("output", std::string());
    c.workers = j.value("workers", 1u);
    c.record_timing = j.value("record_timing", false);
  } catch (const nlohmann::json::exception& e) {
    throw ConfigError(std::string("malformed config: ") + e.what());
  }
  c.validate();
  return c;
}

inline ExperimentConfig load_config(const std::string& path) {
  std::ifstream in(path);
  if (!in) throw ConfigError("cannot open config file '" + path + "'");
  nlohmann::json j;
  try {
    j = nlohmann::json::parse(in, nullptr, true, /*ignore_comments=*/true);
  } catch (const nlohmann::json::parse_error& e) {
    throw ConfigError("cannot parse '" + path + "': " + e.what());
  }
  return parse_config(j);
}

struct ResultRow {
  std::size_t replication = 0;
  std::size_t n = 0;
  std::string method;
  std::string base;
  std::string imputer;
  double tau_hat = std::numeric_limits<double>::quiet_NaN();
  double elapsed_ms = 0.0;
  bool failed = false;
  std::string error;
};

namespace detail {

// One (n, replication) cell: shared dataset and stacks, every method in order.
inline std::vector<ResultRow> run_cell(const ExperimentConfig& cfg, std::size_t n,
                                       std::size_t rep) {
  using clock = std::chrono::steady_clock;
  const std::uint64_t cell_seed = derive_seed(*cfg.seed, {n, rep});
  const std::string imputer_name = to_string(cfg.imputer);

  std::vector<ResultRow> rows;
  rows.reserve(cfg.methods.size());
  for (const auto& m : cfg.methods) {
    ResultRow row;
    row.replication = rep;
    row.n = n;
    row.method = m.method;
    row.base = m.base;
    row.imputer = uses_x_stack(m.method) ? imputer_name
                  : m.method == "within_imps" ? std::string("propensity")
                                              : std::string("none");
    rows.push_back(std::move(row));
  }

  auto fail_all = [&](const std::string& msg, auto pred) {
    for (std::size_t i = 0; i < rows.size(); ++i)
      if (pred(cfg.methods[i])) {
        rows[i].failed = true;
        rows[i].error = msg;
      }
  };

  std::optional<Dataset> ds;
  try {
    ds = generate(cfg.world, n, derive_seed(cell_seed, {0}));
  } catch (const std::exception& e) {
    fail_all(std::string("data generation: ") + e.what(), [](const MethodSpec&) { return true; });
    return rows;
  }

  // Stacks are built lazily so a config without within/across methods never
  // draws X, but every method that needs one sees the same draws.
  std::optional<ImputedStack> x_stack;
  std::optional<StackFits> fits;
  std::optional<std::string> x_stack_error, fits_error;
  std::optional<ImputedStack> u_stack;
  std::optional<std::string> u_stack_error;

  auto need_x_stack = [&]() -> const ImputedStack& {
    if (!x_stack && !x_stack_error) {
      try {
        const std::uint64_t s = derive_seed(cell_seed, {1});
        x_stack = cfg.imputer == Imputer::oracle ? impute_oracle(*ds, cfg.world, cfg.imputations, s)
                                                 : impute_fitted(*ds, ds->world, cfg.imputations, s);
      } catch (const std::exception& e) {
        x_stack_error = std::string("imputation: ") + e.what();
      }
    }
    if (x_stack_error) throw Error(*x_stack_error);
    return *x_stack;
  };
  auto need_fits = [&]() -> const StackFits& {
    const ImputedStack& st = need_x_stack();
    if (!fits && !fits_error) {
      try {
        fits = fit_stack(st);
      } catch (const std::exception& e) {
        fits_error = std::string("propensity fit: ") + e.what();
      }
    }
    if (fits_error) throw Error(*fits_error);
    return *fits;
  };
  auto need_u_stack = [&]() -> const ImputedStack& {
    if (!u_stack && !u_stack_error) {
      try {
        u_stack = impute_propensity(*ds, cfg.imputations, derive_seed(cell_seed, {2}));
      } catch (const std::exception& e) {
        u_stack_error = std::string("propensity imputation: ") + e.what();
      }
    }
    if (u_stack_error) throw Error(*u_stack_error);
    return *u_stack;
  };

  for (std::size_t i = 0; i < rows.size(); ++i) {
    const MethodSpec& m = cfg.methods[i];
    const auto start = clock::now();
    try {
      double tau;
      if (m.method == "within") {
        const BaseEstimator b = parse_base(m.base);
        tau = b == BaseEstimator::outcome_regression ? within(need_x_stack(), b).tau_hat
                                                     : within(need_x_stack(), b, &need_fits()).tau_hat;
      } else if (m.method == "across_aps") {
        tau = across_aps(need_x_stack(), parse_base(m.base), &need_fits()).tau_hat;
      } else if (m.method == "across_apm") {
        tau = across_apm(need_x_stack(), &need_fits()).tau_hat;
      } else if (m.method == "across_apw") {
        tau = across_apw(need_x_stack(), parse_form(m.base), &need_fits()).tau_hat;
      } else if (m.method == "within_imps") {
        tau = within_imps(need_u_stack(), parse_base(m.base)).tau_hat;
      } else {
        tau = impw_estimate(*ds, parse_form(m.base)).tau_hat;
      }
      rows[i].tau_hat = tau;
    } catch (const std::exception& e) {
      rows[i].failed = true;
      rows[i].error = e.what();
    }
    rows[i].elapsed_ms =
        std::chrono::duration<double, std::milli>(clock::now() - start).count();
  }
  return rows;
}

}  // namespace detail

/// Runs every (n, replication) cell on a pool of cfg.workers threads. The
/// returned rows are ordered by (n, replication, method) with methods in
/// config order, independent of scheduling.
inline std::vector<ResultRow> run_experiment(const ExperimentConfig& cfg) {
  cfg.validate();
  std::vector<std::pair<std::size_t, std::size_t>> cells;
  std::vector<std::size_t> sizes = cfg.sample_sizes;
  std::sort(sizes.begin(), sizes.end());
  sizes.erase(std::unique(sizes.begin(), sizes.end()), sizes.end());
  for (std::size_t n : sizes)
    for (std::size_t r = 0; r < cfg.replications; ++r) cells.emplace_back(n, r);

  std::vector<std::vector<ResultRow>> out(cells.size());
  std::atomic<std::size_t> next{0};
  auto work = [&] {
    for (std::size_t i = next++; i < cells.size(); i = next++)
      out[i] = detail::run_cell(cfg, cells[i].first, cells[i].second);
  };
  const unsigned width = std::min<std::size_t>(cfg.workers, std::max<std::size_t>(cells.size(), 1));
  if (width <= 1) {
    work();
  } else {
    std::vector<std::thread> pool;
    for (unsigned t = 0; t < width; ++t) pool.emplace_back(work);
    for (auto& t : pool) t.join();
  }

  std::vector<ResultRow> rows;
  rows.reserve(cells.size() * cfg.methods.size());
  for (auto& cell : out)
    for (auto& r : cell) rows.push_back(std::move(r));
  return rows;
}

struct SummaryRow {
  std::string method;
  std::string base;
  std::string imputer;
  std::size_t n = 0;
  std::size_t replications = 0;  // successful rows
  std::size_t failures = 0;
  bool all_failed = false;
  bool sd_defined = false;
  double mean_tau = std::numeric_limits<double>::quiet_NaN();
  double bias = std::numeric_limits<double>::quiet_NaN();
  double mc_se = std::numeric_limits<double>::quiet_NaN();
  double sd = std::numeric_limits<double>::quiet_NaN();
  double rmse = std::numeric_limits<double>::quiet_NaN();
};

/// Per (method, base, imputer, n): bias = mean(tau_hat) - truth, SD with the
/// n-1 divisor, MC SE = SD / sqrt(R), RMSE about the truth.
inline std::vector<SummaryRow> summarize(const std::vector<ResultRow>& results, double truth) {
  if (results.empty()) throw ConfigError("no results to summarize");
  std::vector<SummaryRow> rows;
  std::map<std::tuple<std::string, std::string, std::string, std::size_t>, std::size_t> index;
  std::vector<std::vector<double>> values;
  for (const auto& r : results) {
    const auto key = std::make_tuple(r.method, r.base, r.imputer, r.n);
    auto [it, inserted] = index.emplace(key, rows.size());
    if (inserted) {
      SummaryRow s;
      s.method = r.method;
      s.base = r.base;
      s.imputer = r.imputer;
      s.n = r.n;
      rows.push_back(s);
      values.emplace_back();
    }
    if (r.failed) ++rows[it->second].failures;
    else values[it->second].push_back(r.tau_hat);
  }
  for (std::size_t i = 0; i < rows.size(); ++i) {
    auto& s = rows[i];
    const auto& v = values[i];
    s.replications = v.size();
    if (v.empty()) {
      s.all_failed = true;
      continue;
    }
    const double k = static_cast<double>(v.size());
    double sum = 0.0, sq = 0.0;
    for (double t : v) {
      sum += t;
      sq += (t - truth) * (t - truth);
    }
    s.mean_tau = sum / k;
    s.bias = s.mean_tau - truth;
    s.rmse = std::sqrt(sq / k);
    if (v.size() > 1) {
      double ss = 0.0;
      for (double t : v) ss += (t - s.mean_tau) * (t - s.mean_tau);
      s.sd = std::sqrt(ss / (k - 1.0));
      s.mc_se = s.sd / std::sqrt(k);
      s.sd_defined = true;
    }
  }
  std::stable_sort(rows.begin(), rows.end(),
                   [](const SummaryRow& l, const SummaryRow& r) { return l.n < r.n; });
  return rows;
}

namespace detail {

inline std::string csv_field(const std::string& s) {
  if (s.find_first_of(",\"\n") == std::string::npos) return s;
  std::string out = "\"";
  for (char c : s) {
    if (c == '"') out += '"';
    out += c;
  }
  return out + '"';
}

inline std::string fmt_double(double v, int precision = 17) {
  if (std::isnan(v)) return "NA";
  std::ostringstream os;
  os << std::setprecision(precision) << v;
  return os.str();
}

}  // namespace detail

inline void write_results_csv(std::ostream& os, const std::vector<ResultRow>& rows,
                              bool include_timing = false) {
  os << "replication,n,method,base,imputer,tau_hat,failed,error";
  if (include_timing) os << ",elapsed_ms";
  os << '\n';
  for (const auto& r : rows) {
    os << r.replication << ',' << r.n << ',' << r.method << ',' << r.base << ',' << r.imputer
       << ',' << detail::fmt_double(r.tau_hat) << ',' << (r.failed ? 1 : 0) << ','
       << detail::csv_field(r.error);
    if (include_timing) os << ',' << detail::fmt_double(r.elapsed_ms, 6);
    os << '\n';
  }
}

inline void write_summary_csv(std::ostream& os, const std::vector<SummaryRow>& rows) {
  os << "method,base,imputer,n,replications,failures,mean_tau,bias,mc_se,sd,rmse\n";
  for (const auto& s : rows) {
    os << s.method << ',' << s.base << ',' << s.imputer << ',' << s.n << ',' << s.replications
       << ',' << s.failures << ',' << detail::fmt_double(s.mean_tau) << ','
       << detail::fmt_double(s.bias) << ',' << detail::fmt_double(s.mc_se) << ','
       << detail::fmt_double(s.sd) << ',' << detail::fmt_double(s.rmse) << '\n';
  }
}

inline void print_summary(std::ostream& os, const std::vector<SummaryRow>& rows, double truth) {
  os << "true ATE " << std::setprecision(6) << truth << "\n";
  os << std::left << std::setw(13) << "method" << std::setw(20) << "base" << std::setw(11)
     << "imputer" << std::right << std::setw(8) << "n" << std::setw(6) << "reps" << std::setw(6)
     << "fail" << std::setw(12) << "bias" << std::setw(11) << "mc_se" << std::setw(9)
     << "bias/se" << std::setw(11) << "sd" << std::setw(11) << "rmse" << '\n';
  auto num = [&](double v, int w) {
    if (std::isnan(v)) os << std::setw(w) << "NA";
    else os << std::setw(w) << std::fixed << std::setprecision(5) << v << std::defaultfloat;
  };
  for (const auto& s : rows) {
    os << std::left << std::setw(13) << s.method << std::setw(20) << s.base << std::setw(11)
       << s.imputer << std::right << std::setw(8) << s.n << std::setw(6) << s.replications
       << std::setw(6) << s.failures;
    num(s.bias, 12);
    num(s.mc_se, 11);
    const double ratio = s.sd_defined && s.mc_se > 0 ? s.bias / s.mc_se
                                                     : std::numeric_limits<double>::quiet_NaN();
    os << std::setw(9) << (std::isnan(ratio) ? std::string("NA") : detail::fmt_double(ratio, 3));
    num(s.sd, 11);
    num(s.rmse, 11);
    if (s.all_failed) os << "  all replications failed";
    else if (!s.sd_defined) os << "  sd undefined (one replication)";
    os << '\n';
  }
}

}  // namespace mipw
