#pragma once

#include <cstddef>
#include <optional>
#include <stdexcept>
#include <string>
#include <string_view>

namespace safeatt {

enum class ErrorCode {
  // dataset
  MissingColumn,
  NonBinaryIndicator,
  ExternalTreated,
  NonFiniteValue,
  EmptyDataset,
  MalformedCsv,
  InvalidDataset,
  // sparse_solver
  InvalidProblem,
  DivergentObjective,
  FoldInfeasible,
  // estimators
  Overflow,
  DegenerateDenominator,
  // configuration
  InvalidArgument,
};

inline std::string_view to_string(ErrorCode code) {
  switch (code) {
    case ErrorCode::MissingColumn: return "MissingColumn";
    case ErrorCode::NonBinaryIndicator: return "NonBinaryIndicator";
    case ErrorCode::ExternalTreated: return "ExternalTreated";
    case ErrorCode::NonFiniteValue: return "NonFiniteValue";
    case ErrorCode::EmptyDataset: return "EmptyDataset";
    case ErrorCode::MalformedCsv: return "MalformedCsv";
    case ErrorCode::InvalidDataset: return "InvalidDataset";
    case ErrorCode::InvalidProblem: return "InvalidProblem";
    case ErrorCode::DivergentObjective: return "DivergentObjective";
    case ErrorCode::FoldInfeasible: return "FoldInfeasible";
    case ErrorCode::Overflow: return "Overflow";
    case ErrorCode::DegenerateDenominator: return "DegenerateDenominator";
    case ErrorCode::InvalidArgument: return "InvalidArgument";
  }
  return "Unknown";
}

/// Module that raised an error; used for CLI exit codes and error objects.
inline std::string_view module_of(ErrorCode code) {
  switch (code) {
    case ErrorCode::MissingColumn:
    case ErrorCode::NonBinaryIndicator:
    case ErrorCode::ExternalTreated:
    case ErrorCode::NonFiniteValue:
    case ErrorCode::EmptyDataset:
    case ErrorCode::MalformedCsv:
    case ErrorCode::InvalidDataset:
      return "dataset";
    case ErrorCode::InvalidProblem:
    case ErrorCode::DivergentObjective:
    case ErrorCode::FoldInfeasible:
      return "sparse_solver";
    case ErrorCode::Overflow:
    case ErrorCode::DegenerateDenominator:
      return "estimators";
    case ErrorCode::InvalidArgument:
      return "config";
  }
  return "unknown";
}

/// Library error. Carries a code plus optional row/column location and a
/// free-form context tag (e.g. which nuisance fit failed).
class Error : public std::runtime_error {
 public:
  Error(ErrorCode code, const std::string& message,
        std::optional<std::size_t> row = std::nullopt,
        std::optional<std::string> column = std::nullopt)
      : std::runtime_error(message), code_(code), row_(row), column_(std::move(column)) {}

  ErrorCode code() const noexcept { return code_; }
  std::string_view module() const noexcept { return module_of(code_); }
  const std::optional<std::size_t>& row() const noexcept { return row_; }
  const std::optional<std::string>& column() const noexcept { return column_; }
  const std::string& context() const noexcept { return context_; }

  Error& with_context(std::string ctx) {
    context_ = std::move(ctx);
    return *this;
  }

 private:
  ErrorCode code_;
  std::optional<std::size_t> row_;
  std::optional<std::string> column_;
  std::string context_;
};

}  // namespace safeatt
