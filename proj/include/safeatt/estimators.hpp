#pragma once

// ATT point estimators (naive primary-only, efficient with external controls,
// and their variance-minimizing combination), influence-function variances
// and Wald confidence intervals.

#include <Eigen/Dense>

#include <algorithm>
#include <array>
#include <cmath>
#include <optional>
#include <string_view>

#include "safeatt/dataset.hpp"
#include "safeatt/error.hpp"
#include "safeatt/normal.hpp"
#include "safeatt/nuisance.hpp"
#include "safeatt/sparse_solver.hpp"

namespace safeatt {

enum class Method { Naive, Efficient, Safe };

inline std::string_view to_string(Method m) {
  switch (m) {
    case Method::Naive: return "nv";
    case Method::Efficient: return "eff";
    case Method::Safe: return "safe";
  }
  return "unknown";
}

namespace detail {

// exp(x_i'c) on rows where selector != 0, zero elsewhere.
inline Eigen::VectorXd guarded_exp(const CombinedDataset& data, const Eigen::VectorXd& coef,
                                   const Eigen::VectorXd& selector) {
  const Eigen::VectorXd eta = data.design() * coef;
  Eigen::VectorXd out = Eigen::VectorXd::Zero(eta.size());
  for (Eigen::Index i = 0; i < eta.size(); ++i) {
    if (selector[i] == 0.0) continue;
    if (!(std::abs(eta[i]) <= kLinearPredictorCap)) {
      throw Error(ErrorCode::Overflow, "exp(x'c) exceeds the overflow guard",
                  static_cast<std::size_t>(i));
    }
    out[i] = std::exp(eta[i]);
  }
  return out;
}

inline void check_dim(const CombinedDataset& data, const CoefficientVector& c) {
  if (c.values.size() != data.design().cols()) {
    throw Error(ErrorCode::InvalidArgument, "coefficient length does not match d + 1");
  }
}

}  // namespace detail

/// Efficient-influence-function estimator using all N rows.
inline double theta_eff(const CombinedDataset& data, const CoefficientVector& alpha_eff,
                        const CoefficientVector& gamma) {
  detail::check_dim(data, alpha_eff);
  detail::check_dim(data, gamma);
  const Eigen::VectorXd rt = data.treated_indicator();
  const Eigen::VectorXd not_rt = (1.0 - rt.array()).matrix();
  const Eigen::VectorXd w = detail::guarded_exp(data, gamma.values, not_rt);
  const Eigen::VectorXd resid = data.y() - data.design() * alpha_eff.values;
  const double num = (rt.array() * resid.array() - not_rt.array() * w.array() * resid.array()).sum();
  return num / rt.sum();
}

/// Primary-study-only estimator; external rows never enter.
inline double theta_nv(const CombinedDataset& data, const CoefficientVector& alpha_nv,
                       const CoefficientVector& beta) {
  detail::check_dim(data, alpha_nv);
  detail::check_dim(data, beta);
  const auto& r = data.r();
  const auto& t = data.t();
  const Eigen::VectorXd ctrl = r.cwiseProduct((1.0 - t.array()).matrix());
  const Eigen::VectorXd w = detail::guarded_exp(data, beta.values, ctrl);
  const Eigen::VectorXd resid = data.y() - data.design() * alpha_nv.values;
  double num = 0.0;
  double den = 0.0;
  for (Eigen::Index i = 0; i < resid.size(); ++i) {
    if (r[i] != 1.0) continue;
    num += t[i] * resid[i] - (1.0 - t[i]) * w[i] * resid[i];
    den += t[i];
  }
  return num / den;
}

/// Per-subject influence values on the combined (N-row) scale.
struct InfluenceVectors {
  Eigen::VectorXd phi_nv;   ///< (r/pi) * primary-scale naive influence; 0 on external rows
  Eigen::VectorXd phi_eff;
  double theta_nv = 0.0;    ///< value plugged into phi_nv
  double theta_eff = 0.0;   ///< value plugged into phi_eff
  double pi_hat = 0.0;
  double p_hat = 0.0;
};

inline InfluenceVectors influence_vectors(const CombinedDataset& data, const CoefficientVector& alpha_nv,
                                          const CoefficientVector& beta,
                                          const CoefficientVector& alpha_eff,
                                          const CoefficientVector& gamma, double theta_nv_value,
                                          double theta_eff_value) {
  InfluenceVectors iv;
  iv.pi_hat = data.pi_hat();
  iv.p_hat = data.p_hat();
  iv.theta_nv = theta_nv_value;
  iv.theta_eff = theta_eff_value;

  const auto& r = data.r();
  const auto& t = data.t();
  const Eigen::VectorXd rt = data.treated_indicator();
  const Eigen::VectorXd not_rt = (1.0 - rt.array()).matrix();
  const Eigen::VectorXd ctrl = r.cwiseProduct((1.0 - t.array()).matrix());
  const Eigen::VectorXd w_eff = detail::guarded_exp(data, gamma.values, not_rt);
  const Eigen::VectorXd w_nv = detail::guarded_exp(data, beta.values, ctrl);
  const Eigen::VectorXd res_eff = data.y() - data.design() * alpha_eff.values;
  const Eigen::VectorXd res_nv = data.y() - data.design() * alpha_nv.values;

  const auto N = res_eff.size();
  const double pp = iv.pi_hat * iv.p_hat;
  iv.phi_eff.resize(N);
  iv.phi_nv.resize(N);
  for (Eigen::Index i = 0; i < N; ++i) {
    iv.phi_eff[i] = (rt[i] * (res_eff[i] - theta_eff_value) - not_rt[i] * w_eff[i] * res_eff[i]) / pp;
    if (r[i] == 1.0) {
      const double primary = (t[i] * (res_nv[i] - theta_nv_value) - (1.0 - t[i]) * w_nv[i] * res_nv[i]) / iv.p_hat;
      iv.phi_nv[i] = primary / iv.pi_hat;
    } else {
      iv.phi_nv[i] = 0.0;
    }
  }
  return iv;
}

inline InfluenceVectors influence_vectors(const CombinedDataset& data, const NuisanceFits& fits,
                                          double theta_nv_value, double theta_eff_value) {
  return influence_vectors(data, fits.alpha_nv.coefficients, fits.beta.coefficients,
                           fits.alpha_eff.coefficients, fits.gamma.coefficients, theta_nv_value,
                           theta_eff_value);
}

/// Moments of the influence vectors that drive the combination weight.
struct InfluenceMoments {
  double v_nv = 0.0;     ///< mean(phi_nv^2)
  double v_eff = 0.0;    ///< mean(phi_eff^2)
  double c_nv = 0.0;     ///< mean((phi_nv - phi_eff) * phi_nv)
  double c_eff = 0.0;    ///< mean((phi_nv - phi_eff) * phi_eff)
  double m = 0.0;        ///< mean((phi_nv - phi_eff)^2)

  static InfluenceMoments of(const InfluenceVectors& iv) {
    if (iv.phi_nv.size() != iv.phi_eff.size()) {
      throw Error(ErrorCode::InvalidArgument, "influence vectors differ in length");
    }
    const double N = static_cast<double>(iv.phi_nv.size());
    const Eigen::ArrayXd diff = iv.phi_nv.array() - iv.phi_eff.array();
    InfluenceMoments out;
    out.v_nv = iv.phi_nv.squaredNorm() / N;
    out.v_eff = iv.phi_eff.squaredNorm() / N;
    out.c_nv = (diff * iv.phi_nv.array()).sum() / N;
    out.c_eff = (diff * iv.phi_eff.array()).sum() / N;
    out.m = diff.square().sum() / N;
    return out;
  }

  /// Combined-variance form anchored on the naive estimator.
  double v_safe_from_nv() const { return v_nv - c_nv * c_nv / m; }
  /// Equivalent form anchored on the efficient estimator.
  double v_safe_from_eff() const { return v_eff - c_eff * c_eff / m; }
};

inline constexpr double kDegenerateDenominator = 1e-12;

/// Empirical variance-minimizing weight on the efficient estimator. Not
/// clipped to [0, 1].
inline double estimate_a(const InfluenceVectors& iv) {
  const auto mom = InfluenceMoments::of(iv);
  if (!(mom.m >= kDegenerateDenominator)) {
    throw Error(ErrorCode::DegenerateDenominator,
                "influence vectors of the two estimators (nearly) coincide");
  }
  return mom.c_nv / mom.m;
}

inline double theta_safe(double theta_eff_value, double theta_nv_value, double a_hat) {
  return a_hat * theta_eff_value + (1.0 - a_hat) * theta_nv_value;
}

/// Variance of a * phi_eff + (1 - a) * phi_nv, i.e. mean((phi_nv - a * diff)^2).
inline double combined_variance(const InfluenceVectors& iv, double a) {
  const Eigen::ArrayXd phi = a * iv.phi_eff.array() + (1.0 - a) * iv.phi_nv.array();
  return phi.square().sum() / static_cast<double>(phi.size());
}

struct VarianceComponents {
  double theta_nv = 0.0;
  double theta_eff = 0.0;
  double v_nv = 0.0;   ///< asymptotic variance (multiply by 1/N for the estimator)
  double v_eff = 0.0;
  double v_a = 0.0;
};

struct EstimateReport {
  Method method = Method::Naive;
  double theta = 0.0;
  double variance = 0.0;  ///< V_hat / N
  double std_error = 0.0;
  double ci_lower = 0.0;
  double ci_upper = 0.0;
  double level = 0.95;
  std::optional<double> a_hat;  ///< safe only
  VarianceComponents components;
  double are_vs_nv = 1.0;
};

struct Inference {
  EstimateReport nv, eff, safe;
  InfluenceVectors influence;
  bool degenerate = false;  ///< influence vectors coincided; safe duplicates eff
  bool a_clipped = false;

  std::array<const EstimateReport*, 3> reports() const { return {&nv, &eff, &safe}; }
};

struct InferOptions {
  double level = 0.95;
  bool clip_a = false;  ///< restrict a_hat to [0, 1]; changes the variance formula
};

namespace detail {

inline EstimateReport make_report(Method method, double theta, double v, double N, double z,
                                  double level, const VarianceComponents& comp) {
  EstimateReport rep;
  rep.method = method;
  rep.theta = theta;
  rep.variance = std::max(0.0, v) / N;
  rep.std_error = std::sqrt(rep.variance);
  rep.ci_lower = theta - z * rep.std_error;
  rep.ci_upper = theta + z * rep.std_error;
  rep.level = level;
  rep.components = comp;
  rep.are_vs_nv = v / comp.v_nv;
  return rep;
}

}  // namespace detail

/// Point estimates, variances and confidence intervals for all three methods.
inline Inference infer(const CombinedDataset& data, const NuisanceFits& fits,
                       const InferOptions& options = {}) {
  if (!(options.level > 0.0 && options.level < 1.0)) {
    throw Error(ErrorCode::InvalidArgument, "confidence level must lie in (0, 1)");
  }
  Inference out;
  const double th_nv = theta_nv(data, fits.alpha_nv.coefficients, fits.beta.coefficients);
  const double th_eff = theta_eff(data, fits.alpha_eff.coefficients, fits.gamma.coefficients);
  out.influence = influence_vectors(data, fits, th_nv, th_eff);
  const auto mom = InfluenceMoments::of(out.influence);

  double a_hat = 1.0;
  double v_a = mom.v_eff;
  try {
    a_hat = estimate_a(out.influence);
    if (options.clip_a && (a_hat < 0.0 || a_hat > 1.0)) {
      a_hat = std::clamp(a_hat, 0.0, 1.0);
      out.a_clipped = true;
      v_a = combined_variance(out.influence, a_hat);
    } else {
      v_a = mom.v_safe_from_nv();
    }
  } catch (const Error& e) {
    if (e.code() != ErrorCode::DegenerateDenominator) throw;
    out.degenerate = true;
  }

  const VarianceComponents comp{th_nv, th_eff, mom.v_nv, mom.v_eff, v_a};
  const double N = static_cast<double>(data.N());
  const double z = normal_quantile(0.5 + 0.5 * options.level);
  out.nv = detail::make_report(Method::Naive, th_nv, mom.v_nv, N, z, options.level, comp);
  out.eff = detail::make_report(Method::Efficient, th_eff, mom.v_eff, N, z, options.level, comp);
  const double th_safe = out.degenerate ? th_eff : theta_safe(th_eff, th_nv, a_hat);
  out.safe = detail::make_report(Method::Safe, th_safe, v_a, N, z, options.level, comp);
  out.safe.a_hat = a_hat;
  return out;
}

}  // namespace safeatt
