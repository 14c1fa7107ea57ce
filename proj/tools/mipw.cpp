// Command-line front end: Monte Carlo runs, exact probability limits, the
// imputation unconfoundedness checks, and a one-stack imputation demo.

#include <CLI11.hpp>

#include <cstdint>
#include <filesystem>
#include <fstream>
#include <iomanip>
#include <iostream>
#include <memory>
#include <optional>
#include <string>

#include "mipw/combiners.hpp"
#include "mipw/dgp.hpp"
#include "mipw/errors.hpp"
#include "mipw/exact.hpp"
#include "mipw/imputation.hpp"
#include "mipw/runner.hpp"

namespace {

constexpr int kConfigErrorExit = 2;
constexpr int kRuntimeErrorExit = 1;

// Stream for --out, or stdout when no path is given.
class Output {
 public:
  explicit Output(const std::string& path) {
    if (path.empty()) return;
    file_ = std::make_unique<std::ofstream>(path);
    if (!*file_) throw mipw::ConfigError("cannot open output file '" + path + "'");
  }
  std::ostream& stream() { return file_ ? *file_ : std::cout; }

 private:
  std::unique_ptr<std::ofstream> file_;
};

mipw::DiscreteWorldParams discrete_preset(const std::string& name, const char* command) {
  const mipw::WorldParams w = mipw::world_preset(name);
  const auto* d = std::get_if<mipw::DiscreteWorldParams>(&w);
  if (!d)
    throw mipw::ConfigError(std::string(command) + " needs a discrete world; preset '" + name +
                            "' is continuous");
  return *d;
}

int run_simulate(const std::string& config_path, std::optional<std::uint64_t> seed,
                 std::optional<unsigned> workers, std::string out, bool timing) {
  mipw::ExperimentConfig cfg = mipw::load_config(config_path);
  if (seed) cfg.seed = seed;
  if (workers) cfg.workers = *workers;
  if (timing) cfg.record_timing = true;
  cfg.validate();
  if (out.empty()) out = cfg.output;

  const auto rows = mipw::run_experiment(cfg);
  const double truth = mipw::true_ate(cfg.world);
  const auto summary = mipw::summarize(rows, truth);

  if (out.empty()) {
    mipw::write_results_csv(std::cout, rows, cfg.record_timing);
    std::cout << '\n';
  } else {
    Output o(out);
    mipw::write_results_csv(o.stream(), rows, cfg.record_timing);
    const std::filesystem::path p(out);
    const auto summary_path = p.parent_path() / (p.stem().string() + ".summary.csv");
    Output s(summary_path.string());
    mipw::write_summary_csv(s.stream(), summary);
    std::cerr << "wrote " << out << " and " << summary_path.string() << '\n';
  }
  std::cout << "world " << cfg.world_name << ", M=" << cfg.imputations << ", "
            << cfg.replications << " replications\n";
  mipw::print_summary(std::cout, summary, truth);
  return 0;
}

void print_plim(std::ostream& os, const mipw::PlimReport& r) {
  os << std::left << std::setw(6) << r.method << std::right << std::setw(6)
     << (r.imputations == 0 ? std::string("inf") : std::to_string(r.imputations))
     << std::setw(14) << r.plim << std::setw(14) << r.ht_plim << std::setw(14) << r.truth
     << std::setw(16) << r.bias << std::setw(12) << r.treated_weight_mass << std::setw(12)
     << r.control_weight_mass << '\n';
}

int run_plim(const std::string& preset, int imputations, const std::string& out) {
  const auto params = discrete_preset(preset, "plim");
  const mipw::JointTable t = mipw::build_joint(params);
  Output o(out);
  auto& os = o.stream();
  os << std::setprecision(8);
  os << "preset " << preset << "\n";
  os << "true ATE        " << mipw::true_ate(params) << "\n";
  os << "within (g-formula on recovered table) " << mipw::plim_within(t) << "\n\n";
  os << std::left << std::setw(6) << "method" << std::right << std::setw(6) << "M" << std::setw(14)
     << "plim_hajek" << std::setw(14) << "plim_ht" << std::setw(14) << "truth" << std::setw(16)
     << "bias" << std::setw(12) << "E[A w]" << std::setw(12) << "E[(1-A)w]" << '\n';
  print_plim(os, mipw::plim_aps(t));
  if (imputations > 0) print_plim(os, mipw::plim_aps(t, imputations));
  print_plim(os, mipw::plim_apm(t));
  if (imputations > 0) print_plim(os, mipw::plim_apm(t, imputations));
  print_plim(os, mipw::plim_apw(t));
  print_plim(os, mipw::plim_impw(t));
  return 0;
}

int run_check_appendix(const std::string& preset, const std::string& out) {
  const auto params = discrete_preset(preset, "check-appendix");
  const auto a = mipw::check_imputed_conditionals(params);
  const auto b = mipw::check_two_stage_imputation(params);
  Output o(out);
  auto& os = o.stream();
  os << std::setprecision(6);
  os << "preset " << preset << "\n\n";
  os << "conditional of X* vs X given (Y_a, Z, A)\n";
  os << "  a z y_a x   cross_imputed    cross_true   same_imputed     same_true\n";
  for (const auto& r : a.rows) {
    os << "  " << r.potential << ' ' << r.z << ' ' << r.ya << "   " << r.x;
    auto cell = [&](bool defined, double v) {
      if (defined) os << std::setw(15) << v;
      else os << std::setw(15) << "undef";
    };
    cell(r.cross_defined, r.cross_imputed);
    cell(r.cross_defined, r.cross_true);
    cell(r.same_defined, r.same_imputed);
    cell(r.same_defined, r.same_true);
    os << '\n';
  }
  for (const auto& s : a.skipped) os << "  skipped: " << s << '\n';
  os << "max gap, opposite arm (A = 1-a): " << a.max_cross_arm_gap << '\n';
  os << "max gap, same arm (A = a):       " << a.max_same_arm_gap << "\n\n";
  os << "two-stage imputation (X*, then Y_a* given Z, X*)\n";
  os << "max |P(Z,X,A,Y_a) gap|, two-stage:     " << b.max_joint_gap << '\n';
  os << "max |P(Z,X,A,Y_a) gap|, X-only:        " << b.naive_gap << '\n';
  os << "max |P(Z,X,A,Y) gap|, observed outcome: " << b.observed_joint_gap << '\n';
  return 0;
}

int run_impute_demo(const std::string& preset, std::size_t n, std::size_t m, std::uint64_t seed,
                    const std::string& imputer, const std::string& out) {
  const mipw::WorldParams world = mipw::world_preset(preset);
  if (n < 2) throw mipw::ConfigError("--n must be at least 2");
  if (m < 1) throw mipw::ConfigError("--imputations must be at least 1");
  const mipw::Dataset ds = mipw::generate(world, n, mipw::derive_seed(seed, {0}));
  const std::uint64_t s = mipw::derive_seed(seed, {1});
  mipw::ImputedStack st;
  if (imputer == "oracle")
    st = mipw::impute_oracle(ds, world, m, s);
  else if (imputer == "fitted")
    st = mipw::impute_fitted(ds, ds.world, m, s);
  else if (imputer == "propensity")
    st = mipw::impute_propensity(ds, m, s);
  else
    throw mipw::ConfigError("unknown imputer '" + imputer + "'");
  Output o(out);
  mipw::write_stack_csv(o.stream(), st);
  return 0;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"Multiple imputation and propensity-score weighting experiments"};
  app.require_subcommand(1);

  std::optional<std::uint64_t> seed;
  std::optional<unsigned> workers;
  std::string out;

  std::string config_path;
  bool timing = false;
  auto* simulate = app.add_subcommand("simulate", "Run a Monte Carlo experiment from a JSON config");
  simulate->add_option("config", config_path, "Experiment config file")->required();
  simulate->add_option("--seed", seed, "Override the config seed");
  simulate->add_option("--workers", workers, "Worker threads")->check(CLI::PositiveNumber);
  simulate->add_option("--out", out, "Result CSV path (summary goes to <stem>.summary.csv)");
  simulate->add_flag("--timing", timing, "Add elapsed_ms to the result CSV");

  std::string preset;
  int plim_m = 0;
  auto* plim = app.add_subcommand("plim", "Exact probability limits of the combination methods");
  plim->add_option("preset", preset, "Discrete world preset")->required();
  plim->add_option("--imputations,-M", plim_m, "Also report aPS/aPM limits at this finite M")
      ->check(CLI::NonNegativeNumber);
  plim->add_option("--out", out, "Write the report here instead of stdout");

  auto* appendix = app.add_subcommand("check-appendix", "Unconfoundedness checks on imputed data");
  appendix->add_option("preset", preset, "Discrete world preset")->required();
  appendix->add_option("--out", out, "Write the report here instead of stdout");

  std::size_t demo_n = 20, demo_m = 3;
  std::string imputer = "oracle";
  auto* demo = app.add_subcommand("impute-demo", "Generate one dataset and emit its imputation stack as CSV");
  demo->add_option("preset", preset, "World preset")->required();
  demo->add_option("--n", demo_n, "Sample size");
  demo->add_option("--imputations,-M", demo_m, "Number of imputations");
  demo->add_option("--imputer", imputer, "oracle, fitted or propensity");
  demo->add_option("--seed", seed, "Seed (default 1)");
  demo->add_option("--out", out, "CSV path instead of stdout");

  CLI11_PARSE(app, argc, argv);

  try {
    if (*simulate) return run_simulate(config_path, seed, workers, out, timing);
    if (*plim) return run_plim(preset, plim_m, out);
    if (*appendix) return run_check_appendix(preset, out);
    if (*demo) return run_impute_demo(preset, demo_n, demo_m, seed.value_or(1), imputer, out);
  } catch (const mipw::ConfigError& e) {
    std::cerr << "config error: " << e.what() << '\n';
    return kConfigErrorExit;
  } catch (const std::exception& e) {
    std::cerr << "error: " << e.what() << '\n';
    return kRuntimeErrorExit;
  }
  return 0;
}
