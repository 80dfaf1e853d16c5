#pragma once

// Command-line front end: configuration, the two commands, and argv parsing.
// Every number written here comes from a library call.

#include <CLI11.hpp>

#include <cstdint>
#include <fstream>
#include <iostream>
#include <optional>
#include <sstream>
#include <string>
#include <vector>

#include "safeatt/dataset.hpp"
#include "safeatt/error.hpp"
#include "safeatt/estimators.hpp"
#include "safeatt/nuisance.hpp"
#include "safeatt/serialize.hpp"
#include "safeatt/simulation.hpp"

namespace safeatt::cli {

enum class Command { Estimate, Simulate };
enum class OutputFormat { Json, Csv };

inline constexpr int kExitOk = 0;
inline constexpr int kExitConfig = 2;
inline constexpr int kExitData = 3;
inline constexpr int kExitSolver = 4;

struct RunConfig {
  Command command = Command::Estimate;
  // estimate
  std::string data_path;
  ColumnSchema schema;
  // simulate
  std::optional<Model> model;
  std::optional<int> preset_table;
  std::size_t reps = 400;
  std::optional<std::size_t> N, n, m, d;
  std::optional<double> pi_ratio;
  std::size_t oracle_draws = 1'000'000;
  // shared
  double level = 0.95;
  LambdaConfig lambdas = LambdaConfig::cv();
  std::size_t cv_folds = 5;
  std::optional<std::uint64_t> seed;
  std::size_t jobs = 1;
  std::string out;  ///< empty: standard output
  OutputFormat format = OutputFormat::Json;
  bool clip_a = false;

  void validate() const {
    auto fail = [](const std::string& msg) { throw Error(ErrorCode::InvalidArgument, msg); };
    if (!(level > 0.0 && level < 1.0)) fail("--level must lie in (0, 1)");
    if (cv_folds < 2) fail("--cv-folds must be at least 2");
    if (jobs < 1) fail("--jobs must be at least 1");
    if (command == Command::Estimate) {
      if (data_path.empty()) fail("estimate needs --data");
      schema.validate();
      return;
    }
    if (!seed) fail("simulate needs --seed");
    if (reps < 2) fail("--reps must be at least 2");
    if (model.has_value() == preset_table.has_value()) fail("simulate needs exactly one of --model or --paper-table");
    if (preset_table) {
      if (*preset_table < 2 || *preset_table > 5) fail("--paper-table must be 2, 3, 4 or 5");
      if (N || n || m || d || pi_ratio) fail("sizing flags cannot be combined with --paper-table");
    }
    if (model) {
      if (*model == Model::M1 && (n || m || pi_ratio)) fail("Model 1 is sized by --N");
      if (*model != Model::M1 && N) fail("Model 2 is sized by --n (and --m or --pi-ratio)");
      if (*model == Model::M2iii && m) fail("case iii is sized by --n and --pi-ratio");
      if ((*model == Model::M2i || *model == Model::M2ii) && pi_ratio) fail("--pi-ratio applies to case iii only");
    }
  }
};

inline LambdaConfig parse_lambda_policy(const std::string& text) {
  if (text == "cv") return LambdaConfig::cv();
  std::vector<double> vals;
  std::stringstream ss(text);
  std::string part;
  while (std::getline(ss, part, ':')) {
    try {
      std::size_t used = 0;
      const double v = std::stod(part, &used);
      if (used != part.size()) throw std::invalid_argument(part);
      vals.push_back(v);
    } catch (const std::exception&) {
      throw Error(ErrorCode::InvalidArgument, "--lambda expects 'cv' or gamma:beta:alpha_eff:alpha_nv");
    }
  }
  if (vals.size() != 4) throw Error(ErrorCode::InvalidArgument, "--lambda expects four values");
  for (double v : vals) {
    if (!(v >= 0.0) || !std::isfinite(v)) throw Error(ErrorCode::InvalidArgument, "--lambda values must be >= 0");
  }
  return LambdaConfig::fixed(vals[0], vals[1], vals[2], vals[3]);
}

inline std::vector<ModelSpec> simulation_cells(const RunConfig& c) {
  if (c.preset_table) return preset_cells(*c.preset_table);
  const Model which = c.model.value_or(Model::M1);
  const std::size_t d = c.d.value_or(4);
  if (which == Model::M1) return {ModelSpec::model1(c.N.value_or(1000), d)};
  ModelSpec s = ModelSpec::model2(which, c.n.value_or(400), d);
  if (c.m) s.m = *c.m;
  if (which == Model::M2iii) {
    s.pi_ratio = c.pi_ratio.value_or(s.pi_ratio);
    s.N = ModelSpec::total_for_ratio(s.n, s.pi_ratio);
  }
  return {s};
}

inline NuisanceOptions nuisance_options(const RunConfig& c) {
  NuisanceOptions o;
  o.cv_folds = c.cv_folds;
  o.seed = c.seed.value_or(0);
  return o;
}

/// The configuration with every default made explicit.
inline json config_json(const RunConfig& c) {
  json j;
  j["command"] = c.command == Command::Estimate ? "estimate" : "simulate";
  if (c.command == Command::Estimate) {
    j["data"] = c.data_path;
    j["outcome"] = c.schema.outcome_column;
    j["treatment"] = c.schema.treatment_column;
    j["source"] = c.schema.source_column;
    j["covariates"] = c.schema.covariate_columns;
    j["missing"] = c.schema.missing_policy == MissingPolicy::Fail ? "fail" : "drop-row";
  } else {
    j["preset_table"] = c.preset_table ? json(*c.preset_table) : json(nullptr);
    j["reps"] = c.reps;
    j["oracle_draws"] = c.oracle_draws;
    json cells = json::array();
    for (const auto& s : simulation_cells(c)) cells.push_back(to_json(s));
    j["cells"] = cells;
    j["jobs"] = c.jobs;
  }
  j["level"] = c.level;
  if (c.lambdas.uses_cv()) {
    j["lambda"] = "cv";
  } else {
    j["lambda"] = {{"gamma", *c.lambdas.values[0]},
                   {"beta", *c.lambdas.values[1]},
                   {"alpha_eff", *c.lambdas.values[2]},
                   {"alpha_nv", *c.lambdas.values[3]}};
  }
  const NuisanceOptions no;
  j["cv"] = {{"folds", c.cv_folds}, {"grid_size", no.grid_size}, {"grid_ratio", no.grid_ratio}};
  j["solver"] = {{"kkt_tol", no.solver.kkt_tol}, {"rel_tol", no.solver.rel_tol}, {"max_iter", no.solver.max_iter}};
  j["seed"] = c.seed.value_or(0);
  j["format"] = c.format == OutputFormat::Json ? "json" : "csv";
  j["clip_a"] = c.clip_a;
  return j;
}

/// Runs all four nuisance fits and the three estimators on an in-memory
/// dataset and renders the report.
inline std::string estimate_output(const RunConfig& c, const CombinedDataset& data) {
  const auto fits = fit_nuisances(data, c.lambdas, nuisance_options(c));
  const auto inf = infer(data, fits, {c.level, c.clip_a});
  const bool no_external = data.external() == 0;
  if (c.format == OutputFormat::Csv) {
    std::string out = "# config: " + config_json(c).dump() + "\n";
    if (no_external) out += "# warning: no external rows\n";
    return out + estimates_csv(inf);
  }
  json j;
  j["config"] = config_json(c);
  j["data"] = {{"N", data.N()},
               {"primary", data.n()},
               {"external", data.external()},
               {"treated_primary", data.treated_primary()},
               {"control_primary", data.control_primary()},
               {"covariates", data.d()},
               {"no_external_rows", no_external}};
  json est = json::array();
  for (const auto* r : inf.reports()) est.push_back(to_json(*r));
  j["estimates"] = est;
  j["a_hat"] = number(*inf.safe.a_hat);
  j["a_clipped"] = inf.a_clipped;
  j["degenerate_combination"] = inf.degenerate;
  j["nuisance"] = to_json(fits);
  j["all_converged"] = fits.all_converged();
  json warnings = json::array();
  if (no_external) warnings.push_back("no external rows: the efficient and combined estimators use primary data only");
  if (!fits.all_converged()) warnings.push_back("at least one nuisance fit did not converge");
  if (c.clip_a) warnings.push_back("a_hat clipping is enabled; the combined variance no longer follows the unclipped formula");
  j["warnings"] = warnings;
  return j.dump(2) + "\n";
}

inline std::string run_estimate(const RunConfig& c) {
  c.validate();
  return estimate_output(c, load_csv(c.data_path, c.schema));
}

inline StudyOptions study_options(const RunConfig& c) {
  StudyOptions o;
  o.reps = c.reps;
  o.seed = c.seed.value_or(0);
  o.lambdas = c.lambdas;
  o.nuisance = nuisance_options(c);
  o.level = c.level;
  o.clip_a = c.clip_a;
  o.jobs = c.jobs;
  o.oracle_draws = c.oracle_draws;
  return o;
}

inline std::string run_simulate(const RunConfig& c) {
  c.validate();
  const auto table = run_study(simulation_cells(c), study_options(c));
  if (c.format == OutputFormat::Csv) return metrics_csv(table, config_json(c));
  json j;
  j["config"] = config_json(c);
  j["table"] = to_json(table);
  return j.dump(2) + "\n";
}

inline int exit_code_for(const Error& e) {
  const auto module = module_of(e.code());
  if (module == "config") return kExitConfig;
  if (module == "dataset") return kExitData;
  return kExitSolver;
}

namespace detail {

inline void add_shared_options(CLI::App& app, RunConfig& c, std::string& lambda, std::string& format) {
  app.add_option("--level", c.level, "Confidence level")->capture_default_str();
  app.add_option("--lambda", lambda, "'cv' or gamma:beta:alpha_eff:alpha_nv")->capture_default_str();
  app.add_option("--cv-folds", c.cv_folds, "Cross-validation folds")->capture_default_str();
  app.add_option("--seed", c.seed, "Seed for every random stream");
  app.add_option("--jobs", c.jobs, "Worker threads (simulate)")->capture_default_str();
  app.add_option("--out", c.out, "Output file (default: stdout)");
  app.add_option("--format", format, "json or csv")->check(CLI::IsMember({"json", "csv"}))->capture_default_str();
  app.add_flag("--clip-a", c.clip_a, "Restrict a_hat to [0, 1] (changes the variance formula)");
}

inline Error config_error(const std::string& message) { return Error(ErrorCode::InvalidArgument, message); }

}  // namespace detail

/// Parses argv, runs the selected command and writes output; returns the
/// process exit code. Errors go to `err` as a JSON object.
inline int run_cli(int argc, const char* const* argv, std::ostream& out, std::ostream& err) {
  RunConfig c;
  std::string lambda = "cv";
  std::string format = "json";
  std::string missing = "fail";
  std::string model;

  CLI::App app{"ATT estimation with external controls"};
  app.require_subcommand(1);
  auto* est = app.add_subcommand("estimate", "Estimate the ATT from a CSV file");
  est->add_option("--data", c.data_path, "Input CSV")->required();
  est->add_option("--outcome", c.schema.outcome_column, "Outcome column")->capture_default_str();
  est->add_option("--treatment", c.schema.treatment_column, "Treatment column (0/1)")->capture_default_str();
  est->add_option("--source", c.schema.source_column, "Source column (1 primary, 0 external)")->capture_default_str();
  est->add_option("--covariates", c.schema.covariate_columns, "Comma-separated covariate columns")
      ->delimiter(',')
      ->required();
  est->add_option("--missing", missing, "fail or drop-row")->check(CLI::IsMember({"fail", "drop-row"}));
  detail::add_shared_options(*est, c, lambda, format);

  auto* sim = app.add_subcommand("simulate", "Run a replicated simulation study");
  sim->add_option("--model", model, "M1, M2i, M2ii or M2iii");
  sim->add_option("--paper-table", c.preset_table, "Preset grid: 2, 3, 4 or 5");
  sim->add_option("--reps", c.reps, "Replicates per cell")->capture_default_str();
  sim->add_option("--N", c.N, "Total size (Model 1)");
  sim->add_option("--n", c.n, "Primary size (Model 2)");
  sim->add_option("--m", c.m, "External size (Model 2 cases i, ii)");
  sim->add_option("--d", c.d, "Covariate dimension");
  sim->add_option("--pi-ratio", c.pi_ratio, "Primary share (Model 2 case iii)");
  sim->add_option("--oracle-draws", c.oracle_draws, "Monte Carlo draws for custom designs")->capture_default_str();
  detail::add_shared_options(*sim, c, lambda, format);

  try {
    app.parse(argc, argv);
  } catch (const CLI::CallForHelp& e) {
    out << app.help();
    return kExitOk;
  } catch (const CLI::CallForAllHelp& e) {
    out << app.help("", CLI::AppFormatMode::All);
    return kExitOk;
  } catch (const CLI::ParseError& e) {
    err << to_json(detail::config_error(e.what())).dump() << '\n';
    return kExitConfig;
  }

  try {
    c.command = sim->parsed() ? Command::Simulate : Command::Estimate;
    c.lambdas = parse_lambda_policy(lambda);
    c.format = format == "csv" ? OutputFormat::Csv : OutputFormat::Json;
    c.schema.missing_policy = missing == "drop-row" ? MissingPolicy::DropRow : MissingPolicy::Fail;
    if (!model.empty()) c.model = parse_model(model);

    const std::string text = c.command == Command::Estimate ? run_estimate(c) : run_simulate(c);
    if (c.out.empty()) {
      out << text;
    } else {
      std::ofstream f(c.out, std::ios::binary);
      if (!f || !(f << text)) throw Error(ErrorCode::InvalidArgument, "cannot write output file '" + c.out + "'");
    }
    return kExitOk;
  } catch (const Error& e) {
    err << to_json(e).dump() << '\n';
    return exit_code_for(e);
  } catch (const std::exception& e) {
    err << json{{"error", "Internal"}, {"module", "cli"}, {"message", e.what()}}.dump() << '\n';
    return kExitSolver;
  }
}

}  // namespace safeatt::cli
