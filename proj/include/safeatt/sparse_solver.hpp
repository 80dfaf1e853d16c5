#pragma once

// L1-penalized convex minimization for the two nuisance loss families:
//
//   ExpTilt:    (1/N) sum_i { e_i exp(x_i'c) - l_i x_i'c } + lambda * |c_{-0}|_1
//   WeightedLS: (1/2N) sum_i w_i (y_i - x_i'c)^2        + lambda * |c_{-0}|_1
//
// ExpTilt is solved by proximal Newton (Fisher scoring) with an Armijo line
// search, or optionally by proximal gradient (ISTA) with backtracking.
// WeightedLS is solved by cyclic coordinate descent with soft-thresholding.
// Both share the same active-set coordinate-descent kernel.

#include <Eigen/Dense>

#include <algorithm>
#include <cmath>
#include <cstddef>
#include <limits>
#include <optional>
#include <string>
#include <utility>
#include <vector>

#include "safeatt/error.hpp"

namespace safeatt {

enum class LossKind { ExpTilt, WeightedLS };

/// |x'c| above this inside exp() is treated as overflow / separation.
inline constexpr double kLinearPredictorCap = 40.0;

struct CoefficientVector {
  Eigen::VectorXd values;  ///< index 0 = intercept

  std::vector<std::size_t> support() const {
    std::vector<std::size_t> s;
    for (Eigen::Index j = 0; j < values.size(); ++j) {
      if (values[j] != 0.0) s.push_back(static_cast<std::size_t>(j));
    }
    return s;
  }
  std::size_t size() const { return static_cast<std::size_t>(values.size()); }
};

struct PenalizedProblem {
  LossKind kind = LossKind::ExpTilt;
  Eigen::MatrixXd design;
  Eigen::VectorXd exp_selector;  ///< ExpTilt only
  Eigen::VectorXd lin_selector;  ///< ExpTilt only
  Eigen::VectorXd ls_weights;    ///< WeightedLS only
  Eigen::VectorXd response;      ///< WeightedLS only
  double lambda = 0.0;
  std::vector<bool> penalty_mask;  ///< false at index 0
  double normalizer = 0.0;         ///< loss divisor; 0 means the row count

  static PenalizedProblem exp_tilt(Eigen::MatrixXd design, Eigen::VectorXd exp_selector,
                                   Eigen::VectorXd lin_selector, double lambda) {
    PenalizedProblem p;
    p.kind = LossKind::ExpTilt;
    p.penalty_mask = default_mask(design.cols());
    p.design = std::move(design);
    p.exp_selector = std::move(exp_selector);
    p.lin_selector = std::move(lin_selector);
    p.lambda = lambda;
    p.validate();
    return p;
  }

  static PenalizedProblem weighted_ls(Eigen::MatrixXd design, Eigen::VectorXd weights,
                                      Eigen::VectorXd response, double lambda) {
    PenalizedProblem p;
    p.kind = LossKind::WeightedLS;
    p.penalty_mask = default_mask(design.cols());
    p.design = std::move(design);
    p.ls_weights = std::move(weights);
    p.response = std::move(response);
    p.lambda = lambda;
    p.validate();
    return p;
  }

  Eigen::Index rows() const { return design.rows(); }
  double scale() const { return normalizer > 0.0 ? normalizer : static_cast<double>(design.rows()); }
  Eigen::Index dim() const { return design.cols(); }

  /// Weights of the quadratic (Hessian) term given the linear predictor.
  Eigen::VectorXd hessian_weights(const Eigen::VectorXd& eta) const {
    if (kind == LossKind::WeightedLS) return ls_weights;
    Eigen::VectorXd w = Eigen::VectorXd::Zero(eta.size());
    for (Eigen::Index i = 0; i < eta.size(); ++i) {
      if (exp_selector[i] != 0.0) w[i] = exp_selector[i] * std::exp(eta[i]);
    }
    return w;
  }

  void validate() const {
    const auto N = design.rows();
    if (N == 0 || design.cols() == 0) {
      throw Error(ErrorCode::InvalidProblem, "empty design matrix");
    }
    if (!(normalizer >= 0.0) || !std::isfinite(normalizer)) {
      throw Error(ErrorCode::InvalidProblem, "normalizer must be finite and nonnegative");
    }
    if (!(lambda >= 0.0) || !std::isfinite(lambda)) {
      throw Error(ErrorCode::InvalidProblem, "lambda must be finite and nonnegative");
    }
    if (static_cast<Eigen::Index>(penalty_mask.size()) != design.cols()) {
      throw Error(ErrorCode::InvalidProblem, "penalty mask length differs from design width");
    }
    if (kind == LossKind::ExpTilt) {
      if (exp_selector.size() != N || lin_selector.size() != N) {
        throw Error(ErrorCode::InvalidProblem, "selector length differs from row count");
      }
      if (exp_selector.sum() < 1.0 || lin_selector.sum() < 1.0) {
        throw Error(ErrorCode::InvalidProblem, "exponential and linear terms need at least one row");
      }
    } else {
      if (ls_weights.size() != N || response.size() != N) {
        throw Error(ErrorCode::InvalidProblem, "weight/response length differs from row count");
      }
      if ((ls_weights.array() < 0.0).any()) {
        throw Error(ErrorCode::InvalidProblem, "negative least-squares weight");
      }
      if ((ls_weights.array() > 0.0).count() < 1) {
        throw Error(ErrorCode::InvalidProblem, "no row carries positive weight");
      }
    }
  }

 private:
  static std::vector<bool> default_mask(Eigen::Index p) {
    std::vector<bool> mask(static_cast<std::size_t>(p), true);
    if (p > 0) mask[0] = false;
    return mask;
  }
};

struct FitResult {
  CoefficientVector coefficients;
  double lambda = 0.0;
  std::vector<double> objective_trace;
  bool converged = false;
  std::size_t iterations = 0;
  double kkt_violation = std::numeric_limits<double>::infinity();

  double objective() const {
    return objective_trace.empty() ? std::numeric_limits<double>::quiet_NaN()
                                   : objective_trace.back();
  }
};

enum class ExpTiltMethod { ProximalNewton, Ista };

struct SolverOptions {
  double kkt_tol = 1e-6;
  double rel_tol = 1e-9;
  std::size_t max_iter = 10000;
  ExpTiltMethod exp_tilt_method = ExpTiltMethod::ProximalNewton;
};

// ---------------------------------------------------------------------------
// Loss evaluation
// ---------------------------------------------------------------------------

/// Smooth part of the objective at linear predictor `eta`. Returns +inf when an
/// exponential row exceeds the cap.
inline double smooth_loss(const PenalizedProblem& p, const Eigen::VectorXd& eta) {
  const double N = p.scale();
  if (p.kind == LossKind::WeightedLS) {
    return 0.5 * (p.ls_weights.array() * (p.response - eta).array().square()).sum() / N;
  }
  double total = 0.0;
  for (Eigen::Index i = 0; i < eta.size(); ++i) {
    if (p.exp_selector[i] != 0.0) {
      if (std::abs(eta[i]) > kLinearPredictorCap) return std::numeric_limits<double>::infinity();
      total += p.exp_selector[i] * std::exp(eta[i]);
    }
    total -= p.lin_selector[i] * eta[i];
  }
  return total / N;
}

inline double penalty_value(const PenalizedProblem& p, const Eigen::VectorXd& c) {
  double s = 0.0;
  for (Eigen::Index j = 0; j < c.size(); ++j) {
    if (p.penalty_mask[static_cast<std::size_t>(j)]) s += std::abs(c[j]);
  }
  return p.lambda * s;
}

inline double objective_value(const PenalizedProblem& p, const Eigen::VectorXd& c) {
  return smooth_loss(p, p.design * c) + penalty_value(p, c);
}

/// Unpenalized loss restricted to rows (used for held-out validation).
inline double unpenalized_loss(const PenalizedProblem& p, const Eigen::VectorXd& c) {
  return smooth_loss(p, p.design * c);
}

inline Eigen::VectorXd gradient_at_eta(const PenalizedProblem& p, const Eigen::VectorXd& eta) {
  const double N = p.scale();
  if (p.kind == LossKind::WeightedLS) {
    return -(p.design.transpose() * (p.ls_weights.array() * (p.response - eta).array()).matrix()) / N;
  }
  Eigen::VectorXd resid(eta.size());
  for (Eigen::Index i = 0; i < eta.size(); ++i) {
    const double e = p.exp_selector[i] != 0.0 ? p.exp_selector[i] * std::exp(eta[i]) : 0.0;
    resid[i] = e - p.lin_selector[i];
  }
  return p.design.transpose() * resid / N;
}

inline Eigen::VectorXd gradient(const PenalizedProblem& p, const Eigen::VectorXd& c) {
  return gradient_at_eta(p, p.design * c);
}

/// Max violation of the subgradient optimality conditions.
inline double kkt_violation(const PenalizedProblem& p, const Eigen::VectorXd& c,
                            const Eigen::VectorXd& grad) {
  double worst = 0.0;
  for (Eigen::Index j = 0; j < c.size(); ++j) {
    double v;
    if (!p.penalty_mask[static_cast<std::size_t>(j)]) {
      v = std::abs(grad[j]);
    } else if (c[j] == 0.0) {
      v = std::max(0.0, std::abs(grad[j]) - p.lambda);
    } else {
      v = std::abs(grad[j] + p.lambda * (c[j] > 0.0 ? 1.0 : -1.0));
    }
    worst = std::max(worst, v);
  }
  return worst;
}

inline double kkt_violation(const PenalizedProblem& p, const Eigen::VectorXd& c) {
  return kkt_violation(p, c, gradient(p, c));
}

/// Minimizer over the intercept alone, all slopes zero.
inline Eigen::VectorXd intercept_only_solution(const PenalizedProblem& p) {
  Eigen::VectorXd c = Eigen::VectorXd::Zero(p.dim());
  if (p.kind == LossKind::ExpTilt) {
    c[0] = std::log(p.lin_selector.sum() / p.exp_selector.sum());
  } else {
    c[0] = p.ls_weights.dot(p.response) / p.ls_weights.sum();
  }
  return c;
}

/// Smallest lambda at which the intercept-only point is optimal.
inline double lambda_max(const PenalizedProblem& p) {
  const auto g = gradient(p, intercept_only_solution(p));
  double m = 0.0;
  for (Eigen::Index j = 0; j < g.size(); ++j) {
    if (p.penalty_mask[static_cast<std::size_t>(j)]) m = std::max(m, std::abs(g[j]));
  }
  return m;
}

/// `count` log-spaced values from lambda_max down to ratio * lambda_max.
inline std::vector<double> default_lambda_grid(double lam_max, std::size_t count = 50,
                                               double ratio = 1e-3) {
  if (!(lam_max > 0.0) || count == 0) return {0.0};
  if (count == 1) return {lam_max};
  std::vector<double> grid(count);
  const double step = std::log(ratio) / static_cast<double>(count - 1);
  for (std::size_t k = 0; k < count; ++k) {
    grid[k] = lam_max * std::exp(step * static_cast<double>(k));
  }
  return grid;
}

namespace detail {

inline double soft_threshold(double z, double gamma) {
  if (z > gamma) return z - gamma;
  if (z < -gamma) return z + gamma;
  return 0.0;
}

// Minimizes g'D + 0.5 D'HD + lambda |c + D|_1 (masked), H = X' diag(w) X / N,
// by cyclic coordinate descent with active-set sweeps.
class QuadraticModelSolver {
 public:
  QuadraticModelSolver(const PenalizedProblem& problem, const Eigen::VectorXd& weights)
      : x_(problem.design), w_(weights), n_(problem.scale()) {
    const auto p = x_.cols();
    diag_.resize(p);
    lam_.resize(p);
    for (Eigen::Index j = 0; j < p; ++j) {
      diag_[j] = (x_.col(j).array().square() * w_.array()).sum() / n_;
      lam_[j] = problem.penalty_mask[static_cast<std::size_t>(j)] ? problem.lambda : 0.0;
    }
  }

  Eigen::VectorXd solve(const Eigen::VectorXd& c, const Eigen::VectorXd& grad, double tol,
                        std::size_t max_sweeps = 100000) {
    const auto p = x_.cols();
    Eigen::VectorXd delta = Eigen::VectorXd::Zero(p);
    wv_ = Eigen::VectorXd::Zero(x_.rows());

    auto update = [&](Eigen::Index j) {
      const double a = diag_[j];
      if (a <= 1e-14) return 0.0;
      const double hd = x_.col(j).dot(wv_) / n_;
      const double z = c[j] + delta[j];
      const double u = soft_threshold(a * z - (grad[j] + hd), lam_[j]) / a;
      if (u == z) return 0.0;
      wv_.array() += (u - z) * w_.array() * x_.col(j).array();
      delta[j] = u - c[j];
      return a * std::abs(u - z);
    };

    std::size_t sweeps = 0;
    while (sweeps < max_sweeps) {
      double worst = 0.0;
      for (Eigen::Index j = 0; j < p; ++j) worst = std::max(worst, update(j));
      ++sweeps;
      if (worst <= tol) break;
      // Iterate on the active set until it settles, then re-check everything.
      std::vector<Eigen::Index> active;
      for (Eigen::Index j = 0; j < p; ++j) {
        if (lam_[j] == 0.0 || c[j] + delta[j] != 0.0) active.push_back(j);
      }
      while (sweeps < max_sweeps) {
        double w = 0.0;
        for (auto j : active) w = std::max(w, update(j));
        ++sweeps;
        if (w <= tol) break;
      }
    }
    return delta;
  }

 private:
  const Eigen::MatrixXd& x_;
  Eigen::VectorXd w_;
  double n_;
  Eigen::VectorXd diag_;
  Eigen::VectorXd lam_;
  Eigen::VectorXd wv_;
};

// Inner sweeps per Newton step; the outer KKT test still governs convergence.
inline constexpr std::size_t kNewtonInnerSweeps = 200;

inline double max_abs_exp_eta(const PenalizedProblem& p, const Eigen::VectorXd& eta) {
  double m = 0.0;
  for (Eigen::Index i = 0; i < eta.size(); ++i) {
    if (p.exp_selector[i] != 0.0) m = std::max(m, std::abs(eta[i]));
  }
  return m;
}

inline bool relative_change_small(double before, double after, double rel_tol) {
  return std::abs(before - after) <= rel_tol * std::max(1.0, std::abs(before));
}

[[noreturn]] inline void throw_divergent(const PenalizedProblem& p) {
  throw Error(ErrorCode::DivergentObjective,
              "linear predictor approached the overflow guard (|x'c| near 40); the penalized "
              "objective appears unbounded (separation) at lambda = " +
                  std::to_string(p.lambda));
}

inline FitResult solve_weighted_ls(const PenalizedProblem& p, Eigen::VectorXd c,
                                   const SolverOptions& opt) {
  FitResult fit;
  fit.lambda = p.lambda;
  QuadraticModelSolver cd(p, p.ls_weights);
  Eigen::VectorXd eta = p.design * c;
  double obj = smooth_loss(p, eta) + penalty_value(p, c);
  fit.objective_trace.push_back(obj);
  double prev = obj;
  for (std::size_t iter = 0;; ++iter) {
    const Eigen::VectorXd g = gradient_at_eta(p, eta);
    fit.kkt_violation = kkt_violation(p, c, g);
    fit.iterations = iter;
    if (fit.kkt_violation <= opt.kkt_tol && (iter == 0 || relative_change_small(prev, obj, opt.rel_tol))) {
      fit.converged = true;
      break;
    }
    if (iter >= opt.max_iter) break;
    const Eigen::VectorXd delta = cd.solve(c, g, 0.05 * opt.kkt_tol);
    if (delta.isZero(0.0)) break;  // no coordinate moves; stalled at rounding level
    c += delta;
    eta = p.design * c;
    prev = obj;
    obj = smooth_loss(p, eta) + penalty_value(p, c);
    fit.objective_trace.push_back(obj);
  }
  fit.coefficients.values = std::move(c);
  return fit;
}

inline FitResult solve_exp_tilt_newton(const PenalizedProblem& p, Eigen::VectorXd c,
                                       const SolverOptions& opt) {
  FitResult fit;
  fit.lambda = p.lambda;
  Eigen::VectorXd eta = p.design * c;
  double obj = smooth_loss(p, eta) + penalty_value(p, c);
  fit.objective_trace.push_back(obj);
  double prev = obj;
  // Once the stopping rule holds, one more Newton step is nearly free and
  // buys several digits on the coefficients, which the KKT bound alone does
  // not control when the Hessian is poorly scaled.
  bool polishing = false;
  for (std::size_t iter = 0;; ++iter) {
    const Eigen::VectorXd g = gradient_at_eta(p, eta);
    const double kkt = kkt_violation(p, c, g);
    fit.kkt_violation = kkt;
    fit.iterations = iter;
    const bool met =
        kkt <= opt.kkt_tol && (iter == 0 || polishing || relative_change_small(prev, obj, opt.rel_tol));
    fit.converged = met;
    if (met && (polishing || kkt <= 1e-3 * opt.kkt_tol)) break;
    if (iter >= opt.max_iter) break;
    polishing = met;

    const Eigen::VectorXd w = p.hessian_weights(eta);
    QuadraticModelSolver cd(p, w);
    const double inner_tol = std::clamp(0.1 * kkt, 0.05 * opt.kkt_tol, 1e-2);
    const Eigen::VectorXd delta = cd.solve(c, g, inner_tol, kNewtonInnerSweeps);
    const double descent = g.dot(delta) + penalty_value(p, c + delta) - penalty_value(p, c);
    if (!(descent < 0.0)) break;

    const Eigen::VectorXd d_eta = p.design * delta;
    double step = 1.0;
    bool capped = false;
    bool accepted = false;
    Eigen::VectorXd eta_new;
    double obj_new = obj;
    while (step >= 1e-12) {
      eta_new = eta + step * d_eta;
      if (max_abs_exp_eta(p, eta_new) > kLinearPredictorCap) {
        capped = true;
        step *= 0.5;
        continue;
      }
      obj_new = smooth_loss(p, eta_new) + penalty_value(p, c + step * delta);
      if (obj_new <= obj + 1e-4 * step * descent) {
        accepted = true;
        break;
      }
      step *= 0.5;
    }
    if (!accepted) {
      if (capped) throw_divergent(p);
      break;
    }
    c += step * delta;
    eta = std::move(eta_new);
    prev = obj;
    obj = obj_new;
    fit.objective_trace.push_back(obj);
    if (max_abs_exp_eta(p, eta) > kLinearPredictorCap - 1.0) throw_divergent(p);
  }
  fit.coefficients.values = std::move(c);
  return fit;
}

inline FitResult solve_exp_tilt_ista(const PenalizedProblem& p, Eigen::VectorXd c,
                                     const SolverOptions& opt) {
  FitResult fit;
  fit.lambda = p.lambda;
  Eigen::VectorXd eta = p.design * c;
  double smooth = smooth_loss(p, eta);
  double obj = smooth + penalty_value(p, c);
  fit.objective_trace.push_back(obj);
  double prev = obj;
  double step = 1.0;
  for (std::size_t iter = 0;; ++iter) {
    const Eigen::VectorXd g = gradient_at_eta(p, eta);
    fit.kkt_violation = kkt_violation(p, c, g);
    fit.iterations = iter;
    if (fit.kkt_violation <= opt.kkt_tol &&
        (iter == 0 || relative_change_small(prev, obj, opt.rel_tol))) {
      fit.converged = true;
      break;
    }
    if (iter >= opt.max_iter) break;

    bool capped = false;
    bool accepted = false;
    Eigen::VectorXd c_new(c.size()), eta_new;
    double smooth_new = smooth;
    while (step >= 1e-14) {
      for (Eigen::Index j = 0; j < c.size(); ++j) {
        const double z = c[j] - step * g[j];
        c_new[j] = p.penalty_mask[static_cast<std::size_t>(j)] ? soft_threshold(z, step * p.lambda) : z;
      }
      eta_new = p.design * c_new;
      if (max_abs_exp_eta(p, eta_new) > kLinearPredictorCap) {
        capped = true;
        step *= 0.5;
        continue;
      }
      smooth_new = smooth_loss(p, eta_new);
      const Eigen::VectorXd diff = c_new - c;
      if (smooth_new <= smooth + g.dot(diff) + diff.squaredNorm() / (2.0 * step)) {
        accepted = true;
        break;
      }
      step *= 0.5;
    }
    if (!accepted) {
      if (capped) throw_divergent(p);
      break;
    }
    const double obj_new = smooth_new + penalty_value(p, c_new);
    c = c_new;
    eta = std::move(eta_new);
    smooth = smooth_new;
    prev = obj;
    obj = obj_new;
    fit.objective_trace.push_back(obj);
    if (max_abs_exp_eta(p, eta) > kLinearPredictorCap - 1.0) throw_divergent(p);
    step *= 1.5;
  }
  fit.coefficients.values = std::move(c);
  return fit;
}

}  // namespace detail

/// Minimizes the penalized objective. Returns the last iterate with
/// `converged == false` when max_iter is hit; throws DivergentObjective when
/// the overflow guard blocks progress.
inline FitResult minimize_l1(const PenalizedProblem& problem, const SolverOptions& options = {},
                             const Eigen::VectorXd* warm_start = nullptr) {
  problem.validate();
  if (!(options.kkt_tol > 0.0)) throw Error(ErrorCode::InvalidProblem, "tolerance must be positive");
  Eigen::VectorXd start;
  if (warm_start != nullptr && warm_start->size() == problem.dim()) {
    start = *warm_start;
    if (problem.kind == LossKind::ExpTilt &&
        detail::max_abs_exp_eta(problem, problem.design * start) > kLinearPredictorCap) {
      start = intercept_only_solution(problem);
    }
  } else {
    start = intercept_only_solution(problem);
  }
  if (problem.kind == LossKind::WeightedLS) return detail::solve_weighted_ls(problem, std::move(start), options);
  if (options.exp_tilt_method == ExpTiltMethod::Ista) {
    return detail::solve_exp_tilt_ista(problem, std::move(start), options);
  }
  return detail::solve_exp_tilt_newton(problem, std::move(start), options);
}

}  // namespace safeatt
