#pragma once

// JSON and CSV views of reports, fits and study tables.

#include <nlohmann/json.hpp>

#include <cmath>
#include <cstdio>
#include <sstream>
#include <string>

#include "safeatt/error.hpp"
#include "safeatt/estimators.hpp"
#include "safeatt/nuisance.hpp"
#include "safeatt/simulation.hpp"

namespace safeatt {

using json = nlohmann::ordered_json;

// Non-finite doubles become null in JSON.
inline json number(double v) { return std::isfinite(v) ? json(v) : json(nullptr); }

inline std::string csv_number(double v) {
  if (std::isnan(v)) return "NA";
  char buf[32];
  std::snprintf(buf, sizeof buf, "%.10g", v);
  return buf;
}

inline json to_json(const EstimateReport& r) {
  return json{
      {"method", std::string(to_string(r.method))},
      {"theta", number(r.theta)},
      {"std_error", number(r.std_error)},
      {"ci", json::array({number(r.ci_lower), number(r.ci_upper)})},
      {"level", r.level},
      {"a_hat", r.a_hat ? number(*r.a_hat) : json(nullptr)},
      {"are_vs_nv", number(r.are_vs_nv)},
      {"components",
       {{"theta_nv", number(r.components.theta_nv)},
        {"theta_eff", number(r.components.theta_eff)},
        {"v_nv", number(r.components.v_nv)},
        {"v_eff", number(r.components.v_eff)},
        {"v_a", number(r.components.v_a)}}},
  };
}

inline std::string estimates_csv(const Inference& inf) {
  std::ostringstream os;
  os << "method,theta,std_error,ci_lower,ci_upper,level,a_hat,are_vs_nv\n";
  for (const auto* r : inf.reports()) {
    os << to_string(r->method) << ',' << csv_number(r->theta) << ',' << csv_number(r->std_error) << ','
       << csv_number(r->ci_lower) << ',' << csv_number(r->ci_upper) << ',' << csv_number(r->level) << ','
       << (r->a_hat ? csv_number(*r->a_hat) : std::string("NA")) << ',' << csv_number(r->are_vs_nv) << '\n';
  }
  return os.str();
}

inline json to_json(const FitResult& f) {
  return json{
      {"lambda", f.lambda},
      {"support_size", f.coefficients.support().size()},
      {"converged", f.converged},
      {"iterations", f.iterations},
      {"kkt_residual", number(f.kkt_violation)},
      {"objective", number(f.objective())},
  };
}

inline json to_json(const NuisanceFits& fits) {
  json out = json::object();
  for (auto loss : kAllNuisanceLosses) {
    json j = to_json(fits.get(loss));
    const auto& cv = fits.cv[index_of(loss)];
    if (cv) {
      j["cv"] = {{"grid_size", cv->grid.size()},
                 {"selected_index", cv->index},
                 {"grid_max", cv->grid.front()},
                 {"grid_min", cv->grid.back()}};
    } else {
      j["cv"] = nullptr;
    }
    j["coefficients"] = std::vector<double>(fits.get(loss).coefficients.values.data(),
                                            fits.get(loss).coefficients.values.data() +
                                                fits.get(loss).coefficients.values.size());
    out[std::string(to_string(loss))] = std::move(j);
  }
  out["standardization"] = {{"variance", ScalingInfo::variance_convention},
                            {"constant_columns", fits.scaling.constant_columns}};
  return out;
}

inline json to_json(const ModelSpec& s) {
  json j{{"model", std::string(to_string(s.model))}, {"d", s.d}};
  if (s.model == Model::M1) {
    j["N"] = s.N;
    j["p_intercept"] = s.p_intercept;
    j["p_slope"] = s.p_slope;
    j["delta_intercept"] = s.delta_intercept;
    j["delta_slope"] = s.delta_slope;
  } else {
    j["n"] = s.n;
    if (s.model == Model::M2iii) {
      j["N"] = s.N;
      j["pi_ratio"] = s.pi_ratio;
    } else {
      j["m"] = s.m;
    }
    j["mu_shift"] = s.mu_shift;
    if (s.model == Model::M2i) {
      j["p_intercept"] = s.m2_intercept;
      j["p_slope"] = s.m2_slope;
    } else {
      j["p"] = s.m2_constant_p;
    }
  }
  j["cov_decay"] = s.cov_decay;
  j["outcome_coefs"] = s.outcome_coefs;
  j["var_eps0"] = s.var_eps0;
  j["var_eps1"] = s.var_eps1;
  return j;
}

inline json to_json(const MetricsTable& t) {
  json rows = json::array();
  for (const auto& r : t.rows) {
    rows.push_back({{"model", std::string(to_string(r.model))},
                    {"size", r.size},
                    {"d", r.d},
                    {"method", std::string(to_string(r.method))},
                    {"bias", number(r.bias)},
                    {"sd", number(r.sd)},
                    {"se", number(r.mean_se)},
                    {"cp", number(r.coverage)},
                    {"are", number(r.are)}});
  }
  json cells = json::array();
  for (const auto& c : t.cells) {
    cells.push_back({{"spec", to_json(c.spec)},
                     {"theta_star", c.theta_star},
                     {"reps_used", c.reps},
                     {"failures", c.failures},
                     {"nonconverged", c.nonconverged},
                     {"flagged", c.flagged},
                     {"mean_a_hat", number(c.mean_a_hat)},
                     {"failure_messages", c.failure_messages}});
  }
  return json{{"reps", t.reps}, {"mc_seed", t.mc_seed}, {"rows", rows}, {"cells", cells}};
}

/// One row per cell and method. `header` (if not null) is written first as a
/// `# config:` comment line.
inline std::string metrics_csv(const MetricsTable& t, const json& header = nullptr) {
  std::ostringstream os;
  if (!header.is_null()) os << "# config: " << header.dump() << '\n';
  os << "model,size,d,method,bias,sd,se,cp,are,theta_star,reps_used,failures,flagged\n";
  for (std::size_t k = 0; k < t.rows.size(); ++k) {
    const auto& r = t.rows[k];
    const auto& c = t.cells[k / 3];
    os << to_string(r.model) << ',' << r.size << ',' << r.d << ',' << to_string(r.method) << ','
       << csv_number(r.bias) << ',' << csv_number(r.sd) << ',' << csv_number(r.mean_se) << ','
       << csv_number(r.coverage) << ',' << csv_number(r.are) << ',' << csv_number(c.theta_star) << ','
       << c.reps << ',' << c.failures << ',' << (c.flagged ? 1 : 0) << '\n';
  }
  return os.str();
}

inline json to_json(const Error& e) {
  json j{{"error", std::string(to_string(e.code()))},
         {"module", std::string(module_of(e.code()))},
         {"message", e.what()}};
  j["row"] = e.row() ? json(*e.row()) : json(nullptr);
  j["column"] = e.column() ? json(*e.column()) : json(nullptr);
  j["context"] = e.context().empty() ? json(nullptr) : json(e.context());
  return j;
}

}  // namespace safeatt
