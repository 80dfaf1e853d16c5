#pragma once

// The four nuisance fits (gamma, beta, alpha_eff, alpha_nv), their
// construction from a combined dataset, and 5-fold cross-validated lambda
// selection.

#include <Eigen/Dense>

#include <algorithm>
#include <array>
#include <cmath>
#include <cstdint>
#include <limits>
#include <optional>
#include <random>
#include <span>
#include <string>
#include <string_view>
#include <vector>

#include "safeatt/dataset.hpp"
#include "safeatt/error.hpp"
#include "safeatt/rng.hpp"
#include "safeatt/sparse_solver.hpp"

namespace safeatt {

enum class NuisanceLoss { Gamma, Beta, AlphaEff, AlphaNv };

inline constexpr std::array<NuisanceLoss, 4> kAllNuisanceLosses = {
    NuisanceLoss::Gamma, NuisanceLoss::Beta, NuisanceLoss::AlphaEff, NuisanceLoss::AlphaNv};

inline std::string_view to_string(NuisanceLoss loss) {
  switch (loss) {
    case NuisanceLoss::Gamma: return "gamma";
    case NuisanceLoss::Beta: return "beta";
    case NuisanceLoss::AlphaEff: return "alpha_eff";
    case NuisanceLoss::AlphaNv: return "alpha_nv";
  }
  return "unknown";
}

inline std::size_t index_of(NuisanceLoss loss) { return static_cast<std::size_t>(loss); }

/// Cell of the (r, t) table: 0 treated primary, 1 control primary, 2 external.
inline int stratum_of(double r, double t) {
  if (r == 1.0) return t == 1.0 ? 0 : 1;
  return 2;
}

/// Builds one of the four penalized problems over all rows or a row subset.
/// The alpha losses take the frozen linear predictor x'gamma_hat / x'beta_hat.
class ProblemBuilder {
 public:
  ProblemBuilder(const CombinedDataset& data, NuisanceLoss loss,
                 std::optional<Eigen::VectorXd> frozen_eta = std::nullopt)
      : data_(&data), loss_(loss) {
    const auto& r = data.r();
    const auto& t = data.t();
    const Eigen::VectorXd rt = r.cwiseProduct(t);
    switch (loss) {
      case NuisanceLoss::Gamma:
        first_ = (1.0 - rt.array()).matrix();
        second_ = rt;
        break;
      case NuisanceLoss::Beta:
        first_ = r.cwiseProduct((1.0 - t.array()).matrix());
        second_ = rt;
        break;
      case NuisanceLoss::AlphaEff:
      case NuisanceLoss::AlphaNv: {
        if (!frozen_eta || frozen_eta->size() != data.y().size()) {
          throw Error(ErrorCode::InvalidProblem,
                      "outcome-model loss requires the fitted propensity linear predictor");
        }
        const Eigen::VectorXd sel = loss == NuisanceLoss::AlphaEff
                                        ? Eigen::VectorXd((1.0 - rt.array()).matrix())
                                        : Eigen::VectorXd(r.cwiseProduct((1.0 - t.array()).matrix()));
        first_ = Eigen::VectorXd::Zero(sel.size());
        for (Eigen::Index i = 0; i < sel.size(); ++i) {
          if (sel[i] != 0.0) first_[i] = sel[i] * std::exp((*frozen_eta)[i]);
        }
        second_ = data.y();
        break;
      }
    }
  }

  NuisanceLoss loss() const { return loss_; }
  LossKind kind() const {
    return (loss_ == NuisanceLoss::Gamma || loss_ == NuisanceLoss::Beta) ? LossKind::ExpTilt
                                                                         : LossKind::WeightedLS;
  }
  const CombinedDataset& data() const { return *data_; }

  PenalizedProblem build(double lambda) const {
    std::vector<std::size_t> all(data_->N());
    for (std::size_t i = 0; i < all.size(); ++i) all[i] = i;
    return build(all, lambda, true);
  }

  /// Problem on a row subset, normalized by the subset size. Rows that carry
  /// no weight in the loss are left out of the design.
  PenalizedProblem build(std::span<const std::size_t> rows, double lambda, bool validate = true) const {
    std::vector<Eigen::Index> kept;
    kept.reserve(rows.size());
    for (auto i : rows) {
      const auto k = static_cast<Eigen::Index>(i);
      if (first_[k] != 0.0 || (kind() == LossKind::ExpTilt && second_[k] != 0.0)) kept.push_back(k);
    }
    const auto p = data_->design().cols();
    const auto m = static_cast<Eigen::Index>(kept.size());
    Eigen::MatrixXd x(m, p);
    Eigen::VectorXd a(m), b(m);
    for (Eigen::Index k = 0; k < m; ++k) {
      x.row(k) = data_->design().row(kept[static_cast<std::size_t>(k)]);
      a[k] = first_[kept[static_cast<std::size_t>(k)]];
      b[k] = second_[kept[static_cast<std::size_t>(k)]];
    }
    auto problem = assemble(std::move(x), std::move(a), std::move(b), lambda, validate);
    problem.normalizer = static_cast<double>(rows.size());
    return problem;
  }

  std::vector<int> strata() const {
    std::vector<int> s(data_->N());
    for (std::size_t i = 0; i < s.size(); ++i) {
      s[i] = stratum_of(data_->r()[static_cast<Eigen::Index>(i)], data_->t()[static_cast<Eigen::Index>(i)]);
    }
    return s;
  }

  /// Rows that carry the curvature of the loss.
  std::size_t effective_rows() const { return static_cast<std::size_t>((first_.array() > 0.0).count()); }

 private:
  PenalizedProblem assemble(Eigen::MatrixXd x, Eigen::VectorXd a, Eigen::VectorXd b, double lambda,
                            bool validate) const {
    if (validate) {
      return kind() == LossKind::ExpTilt
                 ? PenalizedProblem::exp_tilt(std::move(x), std::move(a), std::move(b), lambda)
                 : PenalizedProblem::weighted_ls(std::move(x), std::move(a), std::move(b), lambda);
    }
    PenalizedProblem p;
    p.kind = kind();
    p.penalty_mask.assign(static_cast<std::size_t>(x.cols()), true);
    p.penalty_mask[0] = false;
    p.design = std::move(x);
    if (p.kind == LossKind::ExpTilt) {
      p.exp_selector = std::move(a);
      p.lin_selector = std::move(b);
    } else {
      p.ls_weights = std::move(a);
      p.response = std::move(b);
    }
    p.lambda = lambda;
    return p;
  }

  const CombinedDataset* data_;
  NuisanceLoss loss_;
  Eigen::VectorXd first_;   // exp selector or LS weights
  Eigen::VectorXd second_;  // linear selector or response
};

// ---------------------------------------------------------------------------
// Cross-validation
// ---------------------------------------------------------------------------

struct CvOptions {
  std::size_t folds = 5;
  std::vector<double> grid;  ///< empty: default grid from lambda_max
  std::size_t grid_size = 50;
  double grid_ratio = 1e-3;
  std::uint64_t seed = 0;
  SolverOptions solver;
};

struct CvResult {
  double lambda = 0.0;
  std::size_t index = 0;
  std::vector<double> grid;
  std::vector<double> cv_loss;  ///< mean held-out loss per grid value
};

/// Stratified fold labels: rows are shuffled within each (r, t) cell and dealt
/// round-robin, so every fold sees every non-empty cell.
inline std::vector<std::size_t> assign_folds(const std::vector<int>& strata, std::size_t folds,
                                             std::uint64_t seed) {
  std::vector<std::size_t> fold(strata.size(), 0);
  for (int cell = 0; cell < 3; ++cell) {
    std::vector<std::size_t> members;
    for (std::size_t i = 0; i < strata.size(); ++i) {
      if (strata[i] == cell) members.push_back(i);
    }
    if (members.empty()) continue;
    if (members.size() < folds) {
      throw Error(ErrorCode::FoldInfeasible,
                  "cell (r,t) #" + std::to_string(cell) + " has " + std::to_string(members.size()) +
                      " rows, fewer than " + std::to_string(folds) + " folds");
    }
    auto engine = make_engine(seed, {0xF01D, static_cast<std::uint64_t>(cell)});
    std::shuffle(members.begin(), members.end(), engine);
    for (std::size_t k = 0; k < members.size(); ++k) fold[members[k]] = k % folds;
  }
  return fold;
}

inline CvResult select_lambda_cv(const ProblemBuilder& builder, const CvOptions& options) {
  if (options.folds < 2) throw Error(ErrorCode::InvalidArgument, "cv needs at least 2 folds");

  CvResult result;
  result.grid = options.grid.empty()
                    ? default_lambda_grid(lambda_max(builder.build(0.0)), options.grid_size, options.grid_ratio)
                    : options.grid;
  const auto& grid = result.grid;
  if (grid.empty()) throw Error(ErrorCode::InvalidArgument, "lambda grid is empty");
  for (double g : grid) {
    if (!(g >= 0.0) || !std::isfinite(g)) {
      throw Error(ErrorCode::InvalidArgument, "lambda grid values must be finite and nonnegative");
    }
    if (g == 0.0 && builder.data().design().cols() >= static_cast<Eigen::Index>(builder.effective_rows())) {
      throw Error(ErrorCode::InvalidArgument,
                  "lambda = 0 requires more effective rows than coefficients");
    }
  }

  const auto strata = builder.strata();
  const auto fold = assign_folds(strata, options.folds, options.seed);
  if (grid.size() == 1) {
    result.lambda = grid[0];
    result.index = 0;
    result.cv_loss = {std::numeric_limits<double>::quiet_NaN()};
    return result;
  }

  std::vector<std::size_t> order(grid.size());
  for (std::size_t k = 0; k < order.size(); ++k) order[k] = k;
  std::stable_sort(order.begin(), order.end(), [&](auto a, auto b) { return grid[a] > grid[b]; });

  constexpr double inf = std::numeric_limits<double>::infinity();
  result.cv_loss.assign(grid.size(), 0.0);
  for (std::size_t k = 0; k < options.folds; ++k) {
    std::vector<std::size_t> train, valid;
    for (std::size_t i = 0; i < fold.size(); ++i) (fold[i] == k ? valid : train).push_back(i);
    PenalizedProblem train_problem = builder.build(train, grid[order.front()]);
    const PenalizedProblem valid_problem = builder.build(valid, 0.0, false);

    Eigen::VectorXd warm = intercept_only_solution(train_problem);
    bool diverged = false;
    for (auto g : order) {
      if (diverged) {
        result.cv_loss[g] = inf;
        continue;
      }
      train_problem.lambda = grid[g];
      try {
        const auto fit = minimize_l1(train_problem, options.solver, &warm);
        warm = fit.coefficients.values;
        result.cv_loss[g] += unpenalized_loss(valid_problem, warm) / static_cast<double>(options.folds);
      } catch (const Error& e) {
        if (e.code() != ErrorCode::DivergentObjective) throw;
        diverged = true;
        result.cv_loss[g] = inf;
      }
    }
  }

  double best = inf;
  for (double l : result.cv_loss) best = std::min(best, l);
  if (!std::isfinite(best)) {
    throw Error(ErrorCode::DivergentObjective, "every grid value diverged in cross-validation");
  }
  const double slack = 1e-10 * std::max(1.0, std::abs(best));
  std::optional<std::size_t> pick;
  for (std::size_t g = 0; g < grid.size(); ++g) {
    if (result.cv_loss[g] <= best + slack && (!pick || grid[g] > grid[*pick])) pick = g;
  }
  result.index = *pick;
  result.lambda = grid[*pick];
  return result;
}

// ---------------------------------------------------------------------------
// Fitting all four nuisances
// ---------------------------------------------------------------------------

/// Per-loss lambda: a fixed value, or nullopt for cross-validation.
struct LambdaConfig {
  std::array<std::optional<double>, 4> values{};

  static LambdaConfig cv() { return {}; }
  static LambdaConfig fixed(double gamma, double beta, double alpha_eff, double alpha_nv) {
    return {{gamma, beta, alpha_eff, alpha_nv}};
  }
  static LambdaConfig fixed_all(double lambda) { return fixed(lambda, lambda, lambda, lambda); }
  bool uses_cv() const {
    return std::any_of(values.begin(), values.end(), [](const auto& v) { return !v.has_value(); });
  }
};

struct NuisanceOptions {
  std::size_t cv_folds = 5;
  std::size_t grid_size = 50;
  double grid_ratio = 1e-3;
  std::uint64_t seed = 0;
  SolverOptions solver;
};

struct NuisanceFits {
  FitResult gamma, beta, alpha_eff, alpha_nv;  ///< coefficients on the original covariate scale
  std::array<double, 4> lambdas{};             ///< gamma, beta, alpha_eff, alpha_nv
  std::array<std::optional<CvResult>, 4> cv;
  ScalingInfo scaling;

  const FitResult& get(NuisanceLoss loss) const {
    switch (loss) {
      case NuisanceLoss::Gamma: return gamma;
      case NuisanceLoss::Beta: return beta;
      case NuisanceLoss::AlphaEff: return alpha_eff;
      case NuisanceLoss::AlphaNv: return alpha_nv;
    }
    return gamma;
  }
  bool all_converged() const {
    return gamma.converged && beta.converged && alpha_eff.converged && alpha_nv.converged;
  }
};

namespace detail {

// Fits one loss at a fixed lambda or by CV; the returned fit is on the
// standardized scale.
inline FitResult fit_one(const ProblemBuilder& builder, std::optional<double> fixed,
                         const NuisanceOptions& opt, std::optional<CvResult>& cv_out) {
  try {
    if (fixed) return minimize_l1(builder.build(*fixed), opt.solver);

    CvOptions cvo;
    cvo.folds = opt.cv_folds;
    cvo.grid_size = opt.grid_size;
    cvo.grid_ratio = opt.grid_ratio;
    cvo.seed = opt.seed;
    cvo.solver = opt.solver;
    cv_out = select_lambda_cv(builder, cvo);

    // Follow the path on the full data down to the selected value.
    PenalizedProblem problem = builder.build(cv_out->lambda);
    Eigen::VectorXd warm = intercept_only_solution(problem);
    FitResult fit;
    for (double g : cv_out->grid) {
      if (g < cv_out->lambda) continue;
      problem.lambda = g;
      fit = minimize_l1(problem, opt.solver, &warm);
      warm = fit.coefficients.values;
    }
    problem.lambda = cv_out->lambda;
    return minimize_l1(problem, opt.solver, &warm);
  } catch (Error& e) {
    e.with_context(std::string(to_string(builder.loss())) + " fit");
    throw;
  }
}

}  // namespace detail

/// Fits beta and alpha_nv (primary-study losses), then gamma and alpha_eff
/// (combined losses). Propensity fits are frozen inside the outcome fits.
inline NuisanceFits fit_nuisances(const CombinedDataset& data, const LambdaConfig& lambdas,
                                  const NuisanceOptions& options = {}) {
  NuisanceFits out;
  auto [std_data, scaling] = standardize(data);
  const auto& x = std_data.design();

  auto fit_for = [&](NuisanceLoss loss, std::optional<Eigen::VectorXd> eta) {
    ProblemBuilder builder(std_data, loss, std::move(eta));
    const auto k = index_of(loss);
    FitResult fit = detail::fit_one(builder, lambdas.values[k], options, out.cv[k]);
    out.lambdas[k] = fit.lambda;
    return fit;
  };

  FitResult beta = fit_for(NuisanceLoss::Beta, std::nullopt);
  FitResult alpha_nv = fit_for(NuisanceLoss::AlphaNv, Eigen::VectorXd(x * beta.coefficients.values));
  FitResult gamma = fit_for(NuisanceLoss::Gamma, std::nullopt);
  FitResult alpha_eff = fit_for(NuisanceLoss::AlphaEff, Eigen::VectorXd(x * gamma.coefficients.values));

  auto to_original = [&](FitResult fit) {
    fit.coefficients.values = scaling.to_original(fit.coefficients.values);
    return fit;
  };
  out.beta = to_original(std::move(beta));
  out.alpha_nv = to_original(std::move(alpha_nv));
  out.gamma = to_original(std::move(gamma));
  out.alpha_eff = to_original(std::move(alpha_eff));
  out.scaling = std::move(scaling);
  return out;
}

}  // namespace safeatt
