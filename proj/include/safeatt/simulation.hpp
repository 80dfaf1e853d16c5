#pragma once

// Synthetic designs with external controls, a brute-force oracle for the
// target effect, and a replicated study harness.

#include <Eigen/Cholesky>
#include <Eigen/Dense>

#include <algorithm>
#include <atomic>
#include <cmath>
#include <cstdint>
#include <map>
#include <mutex>
#include <optional>
#include <random>
#include <string>
#include <string_view>
#include <thread>
#include <vector>

#include "safeatt/dataset.hpp"
#include "safeatt/error.hpp"
#include "safeatt/estimators.hpp"
#include "safeatt/nuisance.hpp"
#include "safeatt/rng.hpp"

namespace safeatt {

enum class Model { M1, M2i, M2ii, M2iii };

inline std::string_view to_string(Model m) {
  switch (m) {
    case Model::M1: return "M1";
    case Model::M2i: return "M2i";
    case Model::M2ii: return "M2ii";
    case Model::M2iii: return "M2iii";
  }
  return "unknown";
}

inline Model parse_model(std::string_view s) {
  for (auto m : {Model::M1, Model::M2i, Model::M2ii, Model::M2iii}) {
    if (s == to_string(m)) return m;
  }
  throw Error(ErrorCode::InvalidArgument, "unknown model '" + std::string(s) + "'");
}

inline double expit(double z) { return 1.0 / (1.0 + std::exp(-z)); }

// Mean and sd of U + ((U + 1)_+)^2 for U ~ N(0, 1), by adaptive quadrature
// on the closed-form Gaussian moments (MC error of a 1e7 draw estimate is
// about 1e-3 on the mean).
inline constexpr double kXdaggerMean = 1.924660216656228;
inline constexpr double kXdaggerSd = 3.390312189249219;

inline double xdagger(double u) {
  const double shifted = std::max(u + 1.0, 0.0);
  return (u + shifted * shifted - kXdaggerMean) / kXdaggerSd;
}

struct ModelSpec {
  Model model = Model::M1;
  std::size_t d = 4;
  std::size_t N = 1000;       ///< total size (M1); derived as n / pi_ratio for M2iii
  std::size_t n = 400;        ///< primary size (M2)
  std::size_t m = 1000;       ///< external size (M2i, M2ii)
  double pi_ratio = 1.0 / 3;  ///< primary share (M2iii)
  double cov_decay = 0.5;     ///< Sigma_jk = cov_decay^|j-k|
  double mu_shift = -3.0;     ///< external mean on coordinates 1..4 (M2)
  std::array<double, 4> outcome_coefs{1.0, 0.5, 0.25, 0.125};
  double var_eps0 = 1.0;
  double var_eps1 = 0.5;
  // M1: p(x) = expit(p_intercept + p_slope x1), delta(x) = expit(delta_intercept + delta_slope x1)
  double p_intercept = -1.0;
  double p_slope = 0.125;
  double delta_intercept = -2.11745069;
  double delta_slope = 0.125;
  // M2i: p(x) = expit(m2_intercept + m2_slope x4); M2ii/M2iii: p(x) = m2_constant_p
  double m2_intercept = -0.5;
  double m2_slope = 0.125;
  double m2_constant_p = 0.7;

  static ModelSpec model1(std::size_t N, std::size_t d) {
    ModelSpec s;
    s.model = Model::M1;
    s.N = N;
    s.d = d;
    return s;
  }
  /// Model 1 with the literal intercepts 0 and -2 (primary share about 0.24,
  /// treated share about 0.50).
  static ModelSpec model1_literal(std::size_t N, std::size_t d) {
    auto s = model1(N, d);
    s.p_intercept = 0.0;
    s.delta_intercept = -2.0;
    return s;
  }
  static ModelSpec model2(Model which, std::size_t n, std::size_t d) {
    if (which == Model::M1) throw Error(ErrorCode::InvalidArgument, "model2 needs a Model 2 case");
    ModelSpec s;
    s.model = which;
    s.n = n;
    s.d = d;
    if (which == Model::M2iii) s.N = total_for_ratio(n, s.pi_ratio);
    return s;
  }

  static std::size_t total_for_ratio(std::size_t n, double ratio) {
    return static_cast<std::size_t>(std::llround(static_cast<double>(n) / ratio));
  }

  bool is_model2() const { return model != Model::M1; }
  /// Headline size: N for Model 1, n for Model 2.
  std::size_t size() const { return is_model2() ? n : N; }

  void validate() const {
    if (d < 4) throw Error(ErrorCode::InvalidArgument, "d must be at least 4");
    if (!(var_eps0 > 0.0 && var_eps1 > 0.0)) {
      throw Error(ErrorCode::InvalidArgument, "noise variances must be positive");
    }
    if (!(std::abs(cov_decay) < 1.0)) throw Error(ErrorCode::InvalidArgument, "cov_decay must lie in (-1, 1)");
    if (size() < 2) throw Error(ErrorCode::InvalidArgument, "sample size too small");
    if (model == Model::M2iii && !(pi_ratio > 0.0 && pi_ratio < 1.0)) {
      throw Error(ErrorCode::InvalidArgument, "pi_ratio must lie in (0, 1)");
    }
    if (!(m2_constant_p > 0.0 && m2_constant_p < 1.0)) {
      throw Error(ErrorCode::InvalidArgument, "m2_constant_p must lie in (0, 1)");
    }
  }

  double mu0(const double* x) const {
    return outcome_coefs[0] * x[0] + outcome_coefs[1] * x[1] + outcome_coefs[2] * x[2] +
           outcome_coefs[3] * x[3];
  }
  /// M1 outcome mean, evaluated at the transformed covariates.
  double mu0_model1(const double* u) const {
    const double xd[4] = {xdagger(u[0]), xdagger(u[1]), xdagger(u[2]), xdagger(u[3])};
    return mu0(xd);
  }
  double p_model1(const double* x) const { return expit(p_intercept + p_slope * x[0]); }
  double delta_model1(const double* x) const { return expit(delta_intercept + delta_slope * x[0]); }
  double p_model2(const double* x) const {
    return model == Model::M2i ? expit(m2_intercept + m2_slope * x[3]) : m2_constant_p;
  }
};

inline Eigen::MatrixXd covariance_matrix(std::size_t d, double decay) {
  const auto D = static_cast<Eigen::Index>(d);
  Eigen::MatrixXd S(D, D);
  for (Eigen::Index j = 0; j < D; ++j) {
    for (Eigen::Index k = 0; k < D; ++k) S(j, k) = std::pow(decay, std::abs(static_cast<double>(j - k)));
  }
  return S;
}

namespace detail {

// Lower Cholesky factor, cached per (d, decay).
inline const Eigen::MatrixXd& cholesky_factor(std::size_t d, double decay) {
  static std::mutex mu;
  static std::map<std::pair<std::size_t, double>, Eigen::MatrixXd> cache;
  std::lock_guard lock(mu);
  auto key = std::make_pair(d, decay);
  auto it = cache.find(key);
  if (it == cache.end()) {
    Eigen::LLT<Eigen::MatrixXd> llt(covariance_matrix(d, decay));
    it = cache.emplace(key, Eigen::MatrixXd(llt.matrixL())).first;
  }
  return it->second;
}

// Rows ~ N(0, Sigma): standard normals times the transposed factor.
inline Eigen::MatrixXd gaussian_rows(std::size_t rows, std::size_t d, double decay, std::mt19937_64& rng) {
  std::normal_distribution<double> z;
  Eigen::MatrixXd Z(static_cast<Eigen::Index>(rows), static_cast<Eigen::Index>(d));
  for (Eigen::Index i = 0; i < Z.rows(); ++i) {
    for (Eigen::Index j = 0; j < Z.cols(); ++j) Z(i, j) = z(rng);
  }
  const auto& L = cholesky_factor(d, decay);
  return Z * L.transpose();
}

inline bool bernoulli(std::mt19937_64& rng, double p) {
  return std::uniform_real_distribution<double>(0.0, 1.0)(rng) < p;
}

inline CombinedDataset assemble(Eigen::VectorXd r, Eigen::VectorXd t, Eigen::VectorXd y, const Eigen::MatrixXd& x) {
  return CombinedDataset::from_covariates(std::move(r), std::move(t), std::move(y), x);
}

}  // namespace detail

/// Model 1: a misspecified outcome mean (transformed covariates) with
/// logistic propensities in x1.
inline CombinedDataset gen_model1(const ModelSpec& spec, std::uint64_t seed) {
  spec.validate();
  auto rng = make_engine(seed, {0x4d31});
  const auto N = static_cast<Eigen::Index>(spec.N);
  const Eigen::MatrixXd X = detail::gaussian_rows(spec.N, spec.d, spec.cov_decay, rng);
  std::normal_distribution<double> z;
  Eigen::VectorXd r(N), t(N), y(N);
  Eigen::Matrix<double, 1, 4> first4;
  for (Eigen::Index i = 0; i < N; ++i) {
    first4 = X.row(i).head<4>();
    const double* x = first4.data();
    const double p = spec.p_model1(x);
    const double delta = spec.delta_model1(x);
    const double pi = std::min(1.0, delta / p);
    r[i] = detail::bernoulli(rng, pi) ? 1.0 : 0.0;
    t[i] = (r[i] == 1.0 && detail::bernoulli(rng, p)) ? 1.0 : 0.0;
    const double y0 = spec.mu0_model1(x) + std::sqrt(spec.var_eps0) * z(rng);
    const double y1 = std::sqrt(spec.var_eps1) * z(rng);
    y[i] = t[i] == 1.0 ? y1 : y0;
  }
  return detail::assemble(std::move(r), std::move(t), std::move(y), X);
}

inline CombinedDataset gen_model1(std::size_t N, std::size_t d, std::uint64_t seed) {
  return gen_model1(ModelSpec::model1(N, d), seed);
}

/// Model 2: Gaussian primary and mean-shifted external covariates, linear
/// outcome mean. Cases i/ii draw exactly n primary and m external rows; case
/// iii draws membership with probability pi_ratio, then covariates given it.
inline CombinedDataset gen_model2(const ModelSpec& spec, std::uint64_t seed) {
  spec.validate();
  if (!spec.is_model2()) throw Error(ErrorCode::InvalidArgument, "gen_model2 needs a Model 2 case");
  auto rng = make_engine(seed, {0x4d32, static_cast<std::uint64_t>(spec.model)});

  std::size_t total = 0;
  Eigen::VectorXd r;
  if (spec.model == Model::M2iii) {
    total = spec.N;
    r.resize(static_cast<Eigen::Index>(total));
    for (Eigen::Index i = 0; i < r.size(); ++i) r[i] = detail::bernoulli(rng, spec.pi_ratio) ? 1.0 : 0.0;
  } else {
    total = spec.n + spec.m;
    r = Eigen::VectorXd::Zero(static_cast<Eigen::Index>(total));
    r.head(static_cast<Eigen::Index>(spec.n)).setOnes();
  }
  const auto N = static_cast<Eigen::Index>(total);
  Eigen::MatrixXd X = detail::gaussian_rows(total, spec.d, spec.cov_decay, rng);
  for (Eigen::Index i = 0; i < N; ++i) {
    if (r[i] == 0.0) X.row(i).head<4>().array() += spec.mu_shift;
  }
  std::normal_distribution<double> z;
  Eigen::VectorXd t(N), y(N);
  Eigen::Matrix<double, 1, 4> first4;
  for (Eigen::Index i = 0; i < N; ++i) {
    first4 = X.row(i).head<4>();
    const double* x = first4.data();
    t[i] = (r[i] == 1.0 && detail::bernoulli(rng, spec.p_model2(x))) ? 1.0 : 0.0;
    const double y0 = spec.mu0(x) + std::sqrt(spec.var_eps0) * z(rng);
    const double y1 = std::sqrt(spec.var_eps1) * z(rng);
    y[i] = t[i] == 1.0 ? y1 : y0;
  }
  return detail::assemble(std::move(r), std::move(t), std::move(y), X);
}

inline CombinedDataset generate(const ModelSpec& spec, std::uint64_t seed) {
  return spec.is_model2() ? gen_model2(spec, seed) : gen_model1(spec, seed);
}

struct OracleEstimate {
  double theta = 0.0;
  double mc_se = 0.0;
  std::size_t draws = 0;
};

/// theta* = -E[mu0 | T = 1, R = 1] by importance-weighted Monte Carlo over the
/// covariate law of the combined (M1) or primary (M2) population. Only the
/// first four coordinates matter, so only those are drawn.
inline OracleEstimate oracle_theta(const ModelSpec& spec, std::size_t draws, std::uint64_t seed) {
  spec.validate();
  if (draws < 2) throw Error(ErrorCode::InvalidArgument, "oracle needs at least 2 draws");
  auto rng = make_engine(seed, {0x0a11});
  const auto& L = detail::cholesky_factor(4, spec.cov_decay);
  std::normal_distribution<double> z;
  // Pass 1 for the weighted mean, streaming sums for the delta-method SE.
  double sw = 0.0, swv = 0.0, sww = 0.0, swwv = 0.0, swwvv = 0.0;
  Eigen::Vector4d u, x;
  for (std::size_t k = 0; k < draws; ++k) {
    for (int j = 0; j < 4; ++j) u[j] = z(rng);
    x.noalias() = L * u;
    double w = 0.0;
    double v = 0.0;
    if (spec.is_model2()) {
      w = spec.p_model2(x.data());
      v = spec.mu0(x.data());
    } else {
      w = spec.delta_model1(x.data());
      v = spec.mu0_model1(x.data());
    }
    sw += w;
    swv += w * v;
    sww += w * w;
    swwv += w * w * v;
    swwvv += w * w * v * v;
  }
  OracleEstimate out;
  out.draws = draws;
  const double mean = swv / sw;
  out.theta = -mean;
  // sum w^2 (v - mean)^2 expanded
  const double ss = std::max(0.0, swwvv - 2.0 * mean * swwv + mean * mean * sww);
  out.mc_se = std::sqrt(ss) / sw;
  return out;
}

/// Closed-form-by-quadrature reference values for the default designs;
/// empty for customized specs.
inline std::optional<double> reference_theta(const ModelSpec& spec) {
  const ModelSpec def = spec.is_model2() ? ModelSpec::model2(spec.model, spec.n, spec.d)
                                         : ModelSpec::model1(spec.N, spec.d);
  const bool common = spec.cov_decay == def.cov_decay && spec.outcome_coefs == def.outcome_coefs;
  if (!common) return std::nullopt;
  switch (spec.model) {
    case Model::M1: {
      if (spec.p_slope != 0.125 || spec.delta_slope != 0.125) return std::nullopt;
      if (spec.p_intercept == def.p_intercept && spec.delta_intercept == def.delta_intercept) {
        return -0.14121006702364097;
      }
      if (spec.p_intercept == 0.0 && spec.delta_intercept == -2.0) return -0.13922302630777664;
      return std::nullopt;
    }
    case Model::M2i:
      if (spec.m2_intercept == def.m2_intercept && spec.m2_slope == def.m2_slope) return -0.03873396082298993;
      return std::nullopt;
    case Model::M2ii:
    case Model::M2iii:
      return 0.0;  // treatment independent of centered covariates
  }
  return std::nullopt;
}

struct StudyOptions {
  std::size_t reps = 400;
  std::uint64_t seed = 0;
  LambdaConfig lambdas = LambdaConfig::cv();
  NuisanceOptions nuisance;  ///< seed field is overwritten per replicate
  double level = 0.95;
  bool clip_a = false;
  std::size_t jobs = 1;
  std::size_t oracle_draws = 1'000'000;  ///< used only when no reference value exists
  double failure_flag_share = 0.02;
};

struct ReplicateOutcome {
  bool ok = false;
  bool converged = false;
  std::string error;
  std::array<double, 3> theta{};
  std::array<double, 3> se{};
  std::array<double, 3> avar{};  ///< asymptotic variance V_hat
  std::array<bool, 3> covered{};
  double a_hat = 0.0;
};

struct MetricsRow {
  Model model = Model::M1;
  std::size_t size = 0;  ///< N (M1) or n (M2)
  std::size_t d = 0;
  Method method = Method::Naive;
  double bias = 0.0;
  double sd = 0.0;
  double mean_se = 0.0;
  double coverage = 0.0;
  double are = 1.0;
};

struct CellSummary {
  ModelSpec spec;
  double theta_star = 0.0;
  std::size_t reps = 0;
  std::size_t failures = 0;
  std::size_t nonconverged = 0;
  bool flagged = false;
  double mean_a_hat = 0.0;
  std::vector<std::string> failure_messages;  ///< first few only
};

struct MetricsTable {
  std::vector<MetricsRow> rows;
  std::vector<CellSummary> cells;
  std::size_t reps = 0;
  std::uint64_t mc_seed = 0;

  const MetricsRow* find(Model model, std::size_t size, std::size_t d, Method method) const {
    for (const auto& r : rows) {
      if (r.model == model && r.size == size && r.d == d && r.method == method) return &r;
    }
    return nullptr;
  }
};

namespace detail {

inline std::uint64_t cell_key(const ModelSpec& s) {
  return stream_key(static_cast<std::uint64_t>(s.model), {s.N, s.n, s.m, s.d});
}

inline ReplicateOutcome run_replicate(const ModelSpec& spec, double theta_star, const StudyOptions& opt,
                                      std::size_t rep) {
  ReplicateOutcome out;
  const auto ck = cell_key(spec);
  try {
    const auto data = generate(spec, stream_key(opt.seed, {ck, rep, 0}));
    auto nopt = opt.nuisance;
    nopt.seed = stream_key(opt.seed, {ck, rep, 1});
    const auto fits = fit_nuisances(data, opt.lambdas, nopt);
    const auto inf = infer(data, fits, {opt.level, opt.clip_a});
    const double N = static_cast<double>(data.N());
    const auto reps = inf.reports();
    for (std::size_t k = 0; k < 3; ++k) {
      const auto& rp = *reps[k];
      out.theta[k] = rp.theta;
      out.se[k] = rp.std_error;
      out.avar[k] = rp.variance * N;
      out.covered[k] = rp.ci_lower <= theta_star && theta_star <= rp.ci_upper;
    }
    out.a_hat = *inf.safe.a_hat;
    out.converged = fits.all_converged();
    out.ok = true;
  } catch (const std::exception& e) {
    out.error = e.what();
  }
  return out;
}

// Runs body(i) for i in [0, count) on up to `jobs` threads.
template <class F>
void parallel_for(std::size_t count, std::size_t jobs, F&& body) {
  jobs = std::max<std::size_t>(1, std::min(jobs, count));
  if (jobs == 1) {
    for (std::size_t i = 0; i < count; ++i) body(i);
    return;
  }
  std::atomic<std::size_t> next{0};
  std::vector<std::jthread> pool;
  pool.reserve(jobs);
  for (std::size_t w = 0; w < jobs; ++w) {
    pool.emplace_back([&] {
      for (std::size_t i = next++; i < count; i = next++) body(i);
    });
  }
}

inline double sample_sd(const std::vector<double>& v) {
  if (v.size() < 2) return 0.0;
  double mean = 0.0;
  for (double x : v) mean += x;
  mean /= static_cast<double>(v.size());
  double ss = 0.0;
  for (double x : v) ss += (x - mean) * (x - mean);
  return std::sqrt(ss / static_cast<double>(v.size() - 1));
}

}  // namespace detail

inline double resolve_theta_star(const ModelSpec& spec, const StudyOptions& opt) {
  if (auto ref = reference_theta(spec)) return *ref;
  return oracle_theta(spec, opt.oracle_draws, stream_key(opt.seed, {detail::cell_key(spec), 0x0a11})).theta;
}

/// Replicated study over a list of cells. Results are identical for any
/// number of jobs.
inline MetricsTable run_study(const std::vector<ModelSpec>& cells, const StudyOptions& opt) {
  if (opt.reps < 2) throw Error(ErrorCode::InvalidArgument, "reps must be at least 2");
  if (!(opt.level > 0.0 && opt.level < 1.0)) throw Error(ErrorCode::InvalidArgument, "level must lie in (0, 1)");
  for (const auto& c : cells) c.validate();

  std::vector<double> theta_star(cells.size());
  for (std::size_t c = 0; c < cells.size(); ++c) theta_star[c] = resolve_theta_star(cells[c], opt);

  const std::size_t total = cells.size() * opt.reps;
  std::vector<ReplicateOutcome> outcomes(total);
  detail::parallel_for(total, opt.jobs, [&](std::size_t i) {
    const std::size_t c = i / opt.reps;
    outcomes[i] = detail::run_replicate(cells[c], theta_star[c], opt, i % opt.reps);
  });

  MetricsTable table;
  table.reps = opt.reps;
  table.mc_seed = opt.seed;
  for (std::size_t c = 0; c < cells.size(); ++c) {
    CellSummary cs;
    cs.spec = cells[c];
    cs.theta_star = theta_star[c];
    std::array<std::vector<double>, 3> th;
    std::array<double, 3> se_sum{}, var_sum{}, cover{};
    double a_sum = 0.0;
    for (std::size_t r = 0; r < opt.reps; ++r) {
      const auto& o = outcomes[c * opt.reps + r];
      if (!o.ok) {
        ++cs.failures;
        if (cs.failure_messages.size() < 5) cs.failure_messages.push_back(o.error);
        continue;
      }
      if (!o.converged) ++cs.nonconverged;
      for (std::size_t k = 0; k < 3; ++k) {
        th[k].push_back(o.theta[k]);
        se_sum[k] += o.se[k];
        var_sum[k] += o.avar[k];
        cover[k] += o.covered[k] ? 1.0 : 0.0;
      }
      a_sum += o.a_hat;
    }
    cs.reps = opt.reps - cs.failures;
    cs.flagged = static_cast<double>(cs.failures) > opt.failure_flag_share * static_cast<double>(opt.reps);
    const double ok = static_cast<double>(cs.reps);
    cs.mean_a_hat = cs.reps ? a_sum / ok : std::nan("");
    for (std::size_t k = 0; k < 3; ++k) {
      MetricsRow row;
      row.model = cells[c].model;
      row.size = cells[c].size();
      row.d = cells[c].d;
      row.method = static_cast<Method>(k);
      if (cs.reps == 0) {
        row.bias = row.sd = row.mean_se = row.coverage = row.are = std::nan("");
      } else {
        double mean = 0.0;
        for (double x : th[k]) mean += x;
        mean /= ok;
        row.bias = mean - cs.theta_star;
        row.sd = detail::sample_sd(th[k]);
        row.mean_se = se_sum[k] / ok;
        row.coverage = cover[k] / ok;
        row.are = var_sum[k] / var_sum[0];
      }
      table.rows.push_back(row);
    }
    table.cells.push_back(std::move(cs));
  }
  return table;
}

/// Cell grid of one of the published simulation tables (2: Model 1,
/// 3-5: Model 2 cases i-iii).
inline std::vector<ModelSpec> preset_cells(int table) {
  std::vector<ModelSpec> cells;
  switch (table) {
    case 2:
      for (std::size_t N : {1000, 2000, 3000}) {
        for (std::size_t d : {4, 150, 1000}) cells.push_back(ModelSpec::model1(N, d));
      }
      break;
    case 3:
      for (std::size_t n : {400, 800, 1200}) {
        for (std::size_t d : {4, 100, 1000}) cells.push_back(ModelSpec::model2(Model::M2i, n, d));
      }
      break;
    case 4:
    case 5: {
      const Model which = table == 4 ? Model::M2ii : Model::M2iii;
      for (std::size_t n : {400, 800, 1200}) {
        for (std::size_t d : {4, 150, 1000}) cells.push_back(ModelSpec::model2(which, n, d));
      }
      break;
    }
    default:
      throw Error(ErrorCode::InvalidArgument, "preset table must be 2, 3, 4 or 5");
  }
  return cells;
}

}  // namespace safeatt
