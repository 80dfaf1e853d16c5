#pragma once

// Combined primary-study + external-control data with an intercept-augmented
// design matrix, CSV ingestion, and covariate standardization.

#include <Eigen/Dense>

#include <algorithm>
#include <charconv>
#include <cmath>
#include <cstddef>
#include <fstream>
#include <span>
#include <sstream>
#include <string>
#include <unordered_map>
#include <unordered_set>
#include <utility>
#include <vector>

#include "safeatt/csv.hpp"
#include "safeatt/error.hpp"

namespace safeatt {

/// One subject. `x` includes the intercept at index 0.
struct ObservationRow {
  int r = 1;  ///< 1 = primary study, 0 = external control
  int t = 0;  ///< treatment indicator
  double y = 0.0;
  Eigen::VectorXd x;
};

/// Immutable combined dataset stored column-wise. Indicators are kept as
/// 0/1 doubles so they enter the estimating equations directly.
class CombinedDataset {
 public:
  CombinedDataset() = default;

  /// Builds from a design matrix that already carries the intercept column.
  static CombinedDataset from_design(Eigen::VectorXd r, Eigen::VectorXd t, Eigen::VectorXd y,
                                     Eigen::MatrixXd design) {
    CombinedDataset out;
    out.r_ = std::move(r);
    out.t_ = std::move(t);
    out.y_ = std::move(y);
    out.x_ = std::move(design);
    out.validate();
    return out;
  }

  /// Builds from raw covariates; the constant-1 column is prepended.
  static CombinedDataset from_covariates(Eigen::VectorXd r, Eigen::VectorXd t, Eigen::VectorXd y,
                                         const Eigen::MatrixXd& covariates) {
    Eigen::MatrixXd design(covariates.rows(), covariates.cols() + 1);
    design.col(0).setOnes();
    design.rightCols(covariates.cols()) = covariates;
    return from_design(std::move(r), std::move(t), std::move(y), std::move(design));
  }

  static CombinedDataset from_rows(std::span<const ObservationRow> rows) {
    if (rows.empty()) throw Error(ErrorCode::EmptyDataset, "dataset has no rows");
    const auto p = rows.front().x.size();
    Eigen::VectorXd r(rows.size()), t(rows.size()), y(rows.size());
    Eigen::MatrixXd design(rows.size(), p);
    for (std::size_t i = 0; i < rows.size(); ++i) {
      if (rows[i].x.size() != p) {
        throw Error(ErrorCode::InvalidDataset, "rows do not share the same dimension", i);
      }
      r[i] = rows[i].r;
      t[i] = rows[i].t;
      y[i] = rows[i].y;
      design.row(i) = rows[i].x.transpose();
    }
    return from_design(std::move(r), std::move(t), std::move(y), std::move(design));
  }

  std::size_t N() const { return static_cast<std::size_t>(y_.size()); }
  std::size_t n() const { return n_; }
  /// Covariate dimension, excluding the intercept.
  std::size_t d() const { return static_cast<std::size_t>(x_.cols()) - 1; }
  double pi_hat() const { return static_cast<double>(n_) / static_cast<double>(N()); }
  double p_hat() const { return static_cast<double>(n_treated_) / static_cast<double>(n_); }

  std::size_t treated_primary() const { return n_treated_; }
  std::size_t control_primary() const { return n_ - n_treated_; }
  std::size_t external() const { return N() - n_; }

  const Eigen::VectorXd& r() const { return r_; }
  const Eigen::VectorXd& t() const { return t_; }
  const Eigen::VectorXd& y() const { return y_; }
  const Eigen::MatrixXd& design() const { return x_; }

  /// r_i * t_i
  Eigen::VectorXd treated_indicator() const { return r_.cwiseProduct(t_); }

  ObservationRow row(std::size_t i) const {
    return {static_cast<int>(r_[i]), static_cast<int>(t_[i]), y_[i], x_.row(i).transpose()};
  }

  /// Rows in the given order; the result is validated like any other dataset.
  CombinedDataset select(std::span<const std::size_t> rows) const {
    Eigen::VectorXd r(rows.size()), t(rows.size()), y(rows.size());
    Eigen::MatrixXd design(rows.size(), x_.cols());
    for (std::size_t k = 0; k < rows.size(); ++k) {
      r[k] = r_[rows[k]];
      t[k] = t_[rows[k]];
      y[k] = y_[rows[k]];
      design.row(k) = x_.row(rows[k]);
    }
    return from_design(std::move(r), std::move(t), std::move(y), std::move(design));
  }

  /// Same rows, different design (used by standardization).
  CombinedDataset with_design(Eigen::MatrixXd design) const {
    return from_design(r_, t_, y_, std::move(design));
  }

 private:
  void validate() {
    const auto N = y_.size();
    if (N == 0) throw Error(ErrorCode::EmptyDataset, "dataset has no rows");
    if (r_.size() != N || t_.size() != N || x_.rows() != N) {
      throw Error(ErrorCode::InvalidDataset, "column lengths disagree");
    }
    if (x_.cols() < 1) throw Error(ErrorCode::InvalidDataset, "design matrix has no intercept");
    n_ = 0;
    n_treated_ = 0;
    for (Eigen::Index i = 0; i < N; ++i) {
      const auto row = static_cast<std::size_t>(i);
      if ((r_[i] != 0.0 && r_[i] != 1.0)) {
        throw Error(ErrorCode::NonBinaryIndicator, "source indicator must be 0 or 1", row, "r");
      }
      if ((t_[i] != 0.0 && t_[i] != 1.0)) {
        throw Error(ErrorCode::NonBinaryIndicator, "treatment indicator must be 0 or 1", row, "t");
      }
      if (r_[i] == 0.0 && t_[i] == 1.0) {
        throw Error(ErrorCode::ExternalTreated, "external control row is marked treated", row, "t");
      }
      if (!std::isfinite(y_[i])) {
        throw Error(ErrorCode::NonFiniteValue, "outcome is not finite", row, "y");
      }
      if (x_(i, 0) != 1.0) {
        throw Error(ErrorCode::InvalidDataset, "intercept column must be exactly 1", row);
      }
      if (!x_.row(i).allFinite()) {
        throw Error(ErrorCode::NonFiniteValue, "covariate is not finite", row, "x");
      }
      if (r_[i] == 1.0) {
        ++n_;
        if (t_[i] == 1.0) ++n_treated_;
      }
    }
    if (n_treated_ == 0) {
      throw Error(ErrorCode::InvalidDataset, "no treated subjects in the primary study");
    }
    if (n_treated_ == n_) {
      throw Error(ErrorCode::InvalidDataset, "no control subjects in the primary study");
    }
  }

  Eigen::VectorXd r_, t_, y_;
  Eigen::MatrixXd x_;
  std::size_t n_ = 0;
  std::size_t n_treated_ = 0;
};

// ---------------------------------------------------------------------------
// CSV ingestion
// ---------------------------------------------------------------------------

enum class MissingPolicy { Fail, DropRow };

struct ColumnSchema {
  std::string outcome_column = "y";
  std::string treatment_column = "t";
  std::string source_column = "r";
  std::vector<std::string> covariate_columns;
  MissingPolicy missing_policy = MissingPolicy::Fail;

  void validate() const {
    if (covariate_columns.empty()) {
      throw Error(ErrorCode::InvalidArgument, "covariate list is empty");
    }
    std::unordered_set<std::string> seen;
    auto add = [&](const std::string& name) {
      if (!seen.insert(name).second) {
        throw Error(ErrorCode::InvalidArgument, "column named twice in schema: " + name);
      }
    };
    add(outcome_column);
    add(treatment_column);
    add(source_column);
    for (const auto& c : covariate_columns) add(c);
  }
};

namespace detail {

inline std::string_view trim(std::string_view s) {
  while (!s.empty() && (s.front() == ' ' || s.front() == '\t')) s.remove_prefix(1);
  while (!s.empty() && (s.back() == ' ' || s.back() == '\t')) s.remove_suffix(1);
  return s;
}

inline bool is_missing(std::string_view s) {
  s = trim(s);
  return s.empty() || s == "NA";
}

inline double parse_number(std::string_view raw, std::size_t row, const std::string& column) {
  auto s = trim(raw);
  if (!s.empty() && s.front() == '+') s.remove_prefix(1);
  double value = 0.0;
  const auto [ptr, ec] = std::from_chars(s.data(), s.data() + s.size(), value);
  if (ec != std::errc() || ptr != s.data() + s.size()) {
    throw Error(ErrorCode::MalformedCsv, "cannot parse '" + std::string(raw) + "' as a number", row,
                column);
  }
  if (!std::isfinite(value)) {
    throw Error(ErrorCode::NonFiniteValue, "non-finite value", row, column);
  }
  return value;
}

inline double parse_indicator(std::string_view raw, std::size_t row, const std::string& column) {
  if (raw == "0") return 0.0;
  if (raw == "1") return 1.0;
  throw Error(ErrorCode::NonBinaryIndicator,
              "indicator value '" + std::string(raw) + "' is not literal 0 or 1", row, column);
}

}  // namespace detail

/// Parses CSV text (header row required). Row numbers in errors are 1-based
/// data-row indices, header excluded.
inline CombinedDataset parse_csv_dataset(std::string_view text, const ColumnSchema& schema) {
  schema.validate();
  auto records = csv::parse(text);
  std::erase_if(records, [](const csv::Record& rec) { return rec.size() == 1 && rec[0].empty(); });
  if (records.empty()) throw Error(ErrorCode::EmptyDataset, "file has no header row");

  const auto& header = records.front();
  std::unordered_map<std::string, std::size_t> index;
  for (std::size_t j = 0; j < header.size(); ++j) index.emplace(std::string(detail::trim(header[j])), j);
  auto column = [&](const std::string& name) {
    const auto it = index.find(name);
    if (it == index.end()) {
      throw Error(ErrorCode::MissingColumn, "column '" + name + "' not found in header",
                  std::nullopt, name);
    }
    return it->second;
  };
  const auto y_col = column(schema.outcome_column);
  const auto t_col = column(schema.treatment_column);
  const auto r_col = column(schema.source_column);
  std::vector<std::size_t> x_cols;
  for (const auto& c : schema.covariate_columns) x_cols.push_back(column(c));

  const auto d = x_cols.size();
  std::vector<double> r, t, y, x;
  for (std::size_t k = 1; k < records.size(); ++k) {
    const auto& rec = records[k];
    if (rec.size() != header.size()) {
      throw Error(ErrorCode::MalformedCsv,
                  "row has " + std::to_string(rec.size()) + " fields, header has " +
                      std::to_string(header.size()),
                  k);
    }
    bool missing = false;
    auto check_missing = [&](std::size_t col, const std::string& name) {
      if (detail::is_missing(rec[col])) {
        if (schema.missing_policy == MissingPolicy::Fail) {
          throw Error(ErrorCode::MalformedCsv, "missing value", k, name);
        }
        missing = true;
      }
    };
    check_missing(y_col, schema.outcome_column);
    check_missing(t_col, schema.treatment_column);
    check_missing(r_col, schema.source_column);
    for (std::size_t j = 0; j < d; ++j) check_missing(x_cols[j], schema.covariate_columns[j]);
    if (missing) continue;

    r.push_back(detail::parse_indicator(rec[r_col], k, schema.source_column));
    t.push_back(detail::parse_indicator(rec[t_col], k, schema.treatment_column));
    if (r.back() == 0.0 && t.back() == 1.0) {
      throw Error(ErrorCode::ExternalTreated, "external control row is marked treated", k,
                  schema.treatment_column);
    }
    y.push_back(detail::parse_number(rec[y_col], k, schema.outcome_column));
    for (std::size_t j = 0; j < d; ++j) {
      x.push_back(detail::parse_number(rec[x_cols[j]], k, schema.covariate_columns[j]));
    }
  }
  if (y.empty()) throw Error(ErrorCode::EmptyDataset, "file has a header but no data rows");

  const auto N = static_cast<Eigen::Index>(y.size());
  Eigen::MatrixXd design(N, static_cast<Eigen::Index>(d) + 1);
  design.col(0).setOnes();
  for (Eigen::Index i = 0; i < N; ++i) {
    for (std::size_t j = 0; j < d; ++j) {
      design(i, static_cast<Eigen::Index>(j) + 1) = x[static_cast<std::size_t>(i) * d + j];
    }
  }
  return CombinedDataset::from_design(Eigen::Map<Eigen::VectorXd>(r.data(), N),
                                      Eigen::Map<Eigen::VectorXd>(t.data(), N),
                                      Eigen::Map<Eigen::VectorXd>(y.data(), N), std::move(design));
}

inline CombinedDataset load_csv(const std::string& path, const ColumnSchema& schema) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw Error(ErrorCode::MalformedCsv, "cannot open file: " + path);
  std::stringstream buffer;
  buffer << in.rdbuf();
  return parse_csv_dataset(buffer.str(), schema);
}

// ---------------------------------------------------------------------------
// Standardization
// ---------------------------------------------------------------------------

/// Column means and scales (population convention, divide by N). Index 0 is
/// the intercept and always has mean 0, scale 1.
struct ScalingInfo {
  Eigen::VectorXd means;
  Eigen::VectorXd scales;
  std::vector<std::size_t> constant_columns;
  static constexpr const char* variance_convention = "population (1/N)";

  /// Coefficients on the standardized scale -> original scale, preserving
  /// every linear predictor.
  Eigen::VectorXd to_original(const Eigen::VectorXd& c_std) const {
    Eigen::VectorXd c = c_std.cwiseQuotient(scales);
    c[0] = c_std[0] - means.tail(means.size() - 1).dot(c.tail(c.size() - 1));
    return c;
  }

  Eigen::VectorXd to_standardized(const Eigen::VectorXd& c_orig) const {
    Eigen::VectorXd c = c_orig.cwiseProduct(scales);
    c[0] = c_orig[0] + means.tail(means.size() - 1).dot(c_orig.tail(c_orig.size() - 1));
    return c;
  }
};

inline std::pair<CombinedDataset, ScalingInfo> standardize(const CombinedDataset& data) {
  const auto& x = data.design();
  const auto p = x.cols();
  const double N = static_cast<double>(x.rows());
  ScalingInfo info;
  info.means = Eigen::VectorXd::Zero(p);
  info.scales = Eigen::VectorXd::Ones(p);
  Eigen::MatrixXd z = x;
  for (Eigen::Index j = 1; j < p; ++j) {
    const double mean = x.col(j).sum() / N;
    const double var = (x.col(j).array() - mean).square().sum() / N;
    const double scale = std::sqrt(var);
    if (!(scale > 1e-12 * std::max(1.0, std::abs(mean)))) {
      info.constant_columns.push_back(static_cast<std::size_t>(j));
      continue;
    }
    info.means[j] = mean;
    info.scales[j] = scale;
    z.col(j) = (x.col(j).array() - mean) / scale;
  }
  return {data.with_design(std::move(z)), std::move(info)};
}

inline CombinedDataset unstandardize(const CombinedDataset& data, const ScalingInfo& info) {
  Eigen::MatrixXd x = data.design();
  for (Eigen::Index j = 1; j < x.cols(); ++j) {
    x.col(j) = x.col(j).array() * info.scales[j] + info.means[j];
  }
  return data.with_design(std::move(x));
}

}  // namespace safeatt
