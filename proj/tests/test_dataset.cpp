#include <gtest/gtest.h>

#include <cstdio>
#include <fstream>
#include <random>

#include "oracles.hpp"
#include "safeatt.hpp"

using namespace safeatt;

namespace {

ColumnSchema schema_x1() {
  ColumnSchema s;
  s.covariate_columns = {"x1"};
  return s;
}

ErrorCode code_of(const std::function<void()>& f) {
  try {
    f();
  } catch (const Error& e) {
    return e.code();
  }
  ADD_FAILURE() << "no error thrown";
  return ErrorCode::InvalidArgument;
}

}  // namespace

TEST(Csv, QuotesAndLineEndings) {
  const auto recs = csv::parse("\xEF\xBB\xBF" "a,\"b,c\",\"say \"\"hi\"\"\"\r\n1,2,3\n");
  ASSERT_EQ(recs.size(), 2u);
  EXPECT_EQ(recs[0][0], "a");
  EXPECT_EQ(recs[0][1], "b,c");
  EXPECT_EQ(recs[0][2], "say \"hi\"");
  EXPECT_EQ(recs[1][2], "3");
}

TEST(Csv, UnterminatedQuoteIsMalformed) {
  EXPECT_EQ(code_of([] { csv::parse("a,\"b\n1,2\n"); }), ErrorCode::MalformedCsv);
}

TEST(LoadCsv, ThreeRowCounts) {
  const auto data = parse_csv_dataset("r,t,y,x1\n1,1,2.0,0.3\n1,0,1.0,-0.1\n0,0,0.5,0.2\n", schema_x1());
  EXPECT_EQ(data.n(), 2u);
  EXPECT_EQ(data.N(), 3u);
  EXPECT_DOUBLE_EQ(data.pi_hat(), 2.0 / 3.0);
  EXPECT_DOUBLE_EQ(data.p_hat(), 0.5);
  EXPECT_EQ(data.d(), 1u);
  for (std::size_t i = 0; i < 3; ++i) EXPECT_EQ(data.design()(static_cast<Eigen::Index>(i), 0), 1.0);
  EXPECT_DOUBLE_EQ(data.design()(1, 1), -0.1);
  EXPECT_DOUBLE_EQ(data.y()[2], 0.5);
}

TEST(LoadCsv, ColumnOrderFollowsHeaderNames) {
  ColumnSchema s;
  s.outcome_column = "out";
  s.treatment_column = "trt";
  s.source_column = "src";
  s.covariate_columns = {"b", "a"};
  const auto data = parse_csv_dataset("a,out,b,src,trt\n1,5,2,1,1\n3,6,4,1,0\n", s);
  EXPECT_DOUBLE_EQ(data.design()(0, 1), 2.0);
  EXPECT_DOUBLE_EQ(data.design()(0, 2), 1.0);
  EXPECT_DOUBLE_EQ(data.y()[1], 6.0);
}

TEST(LoadCsv, HeaderOnlyIsEmpty) {
  EXPECT_EQ(code_of([] { parse_csv_dataset("r,t,y,x1\n", schema_x1()); }), ErrorCode::EmptyDataset);
  EXPECT_EQ(code_of([] { parse_csv_dataset("", schema_x1()); }), ErrorCode::EmptyDataset);
}

TEST(LoadCsv, MissingColumnNamesIt) {
  try {
    parse_csv_dataset("r,t,y\n1,1,2\n", schema_x1());
    FAIL();
  } catch (const Error& e) {
    EXPECT_EQ(e.code(), ErrorCode::MissingColumn);
    ASSERT_TRUE(e.column());
    EXPECT_EQ(*e.column(), "x1");
  }
}

TEST(LoadCsv, IndicatorErrors) {
  try {
    parse_csv_dataset("r,t,y,x1\n1,1,2,0\n1,2,1,0\n", schema_x1());
    FAIL();
  } catch (const Error& e) {
    EXPECT_EQ(e.code(), ErrorCode::NonBinaryIndicator);
    EXPECT_EQ(e.row().value(), 2u);
    EXPECT_EQ(e.column().value(), "t");
  }
  EXPECT_EQ(code_of([] { parse_csv_dataset("r,t,y,x1\n1,1,2,0\n1,0,1,0\n1.0,0,1,0\n", schema_x1()); }),
            ErrorCode::NonBinaryIndicator);
  EXPECT_EQ(code_of([] { parse_csv_dataset("r,t,y,x1\n1,1,2,0\n1,0,1,0\n0,1,1,0\n", schema_x1()); }),
            ErrorCode::ExternalTreated);
}

TEST(LoadCsv, NonFiniteAndMalformed) {
  EXPECT_EQ(code_of([] { parse_csv_dataset("r,t,y,x1\n1,1,inf,0\n1,0,1,0\n", schema_x1()); }),
            ErrorCode::NonFiniteValue);
  EXPECT_EQ(code_of([] { parse_csv_dataset("r,t,y,x1\n1,1,nan,0\n1,0,1,0\n", schema_x1()); }),
            ErrorCode::NonFiniteValue);
  try {
    parse_csv_dataset("r,t,y,x1\n1,1,2,0\n1,0,abc,0\n", schema_x1());
    FAIL();
  } catch (const Error& e) {
    EXPECT_EQ(e.code(), ErrorCode::MalformedCsv);
    EXPECT_EQ(e.row().value(), 2u);
    EXPECT_EQ(e.column().value(), "y");
  }
  EXPECT_EQ(code_of([] { parse_csv_dataset("r,t,y,x1\n1,1,2\n", schema_x1()); }), ErrorCode::MalformedCsv);
}

TEST(LoadCsv, MissingPolicy) {
  const std::string text = "r,t,y,x1\n1,1,2,0\n1,0,NA,0\n1,0,1,\n0,0,1,1\n1,0,3,2\n";
  EXPECT_EQ(code_of([&] { parse_csv_dataset(text, schema_x1()); }), ErrorCode::MalformedCsv);
  auto s = schema_x1();
  s.missing_policy = MissingPolicy::DropRow;
  const auto data = parse_csv_dataset(text, s);
  EXPECT_EQ(data.N(), 3u);
  EXPECT_DOUBLE_EQ(data.y()[2], 3.0);
}

TEST(LoadCsv, PrimaryCellsMustBeNonEmpty) {
  EXPECT_EQ(code_of([] { parse_csv_dataset("r,t,y,x1\n1,0,2,0\n0,0,1,0\n", schema_x1()); }),
            ErrorCode::InvalidDataset);
  EXPECT_EQ(code_of([] { parse_csv_dataset("r,t,y,x1\n1,1,2,0\n0,0,1,0\n", schema_x1()); }),
            ErrorCode::InvalidDataset);
}

TEST(LoadCsv, SchemaValidation) {
  ColumnSchema s;
  EXPECT_EQ(code_of([&] { s.validate(); }), ErrorCode::InvalidArgument);
  s.covariate_columns = {"y"};
  EXPECT_EQ(code_of([&] { s.validate(); }), ErrorCode::InvalidArgument);
}

TEST(LoadCsv, FileRoundTripIsDeterministic) {
  const std::string path = ::testing::TempDir() + "safeatt_load.csv";
  {
    std::ofstream f(path);
    f << "r,t,y,x1\n1,1,2.0,0.3\n1,0,1.0,-0.1\n0,0,0.5,0.2\n";
  }
  const auto a = load_csv(path, schema_x1());
  const auto b = load_csv(path, schema_x1());
  EXPECT_EQ(a.design(), b.design());
  EXPECT_EQ(a.y(), b.y());
  std::remove(path.c_str());
  EXPECT_EQ(code_of([&] { load_csv(path, schema_x1()); }), ErrorCode::MalformedCsv);
}

TEST(Dataset, FromRowsChecksIntercept) {
  std::vector<ObservationRow> rows = {{1, 1, 1.0, Eigen::Vector2d(1, 0.5)},
                                      {1, 0, 1.0, Eigen::Vector2d(1, 0.1)},
                                      {0, 0, 1.0, Eigen::Vector2d(2, 0.1)}};
  EXPECT_EQ(code_of([&] { CombinedDataset::from_rows(rows); }), ErrorCode::InvalidDataset);
  rows[2].x[0] = 1.0;
  const auto data = CombinedDataset::from_rows(rows);
  EXPECT_EQ(data.external(), 1u);
  EXPECT_EQ(data.row(1).x[1], 0.1);
}

TEST(Standardize, TwoRowColumn) {
  Eigen::MatrixXd x(2, 1);
  x << 0, 2;
  const auto data = CombinedDataset::from_covariates(Eigen::Vector2d(1, 1), Eigen::Vector2d(1, 0),
                                                     Eigen::Vector2d(0, 0), x);
  const auto [z, info] = standardize(data);
  EXPECT_DOUBLE_EQ(z.design()(0, 1), -1.0);
  EXPECT_DOUBLE_EQ(z.design()(1, 1), 1.0);
  EXPECT_STREQ(ScalingInfo::variance_convention, "population (1/N)");
}

TEST(Standardize, IdentityAndConstantColumns) {
  Eigen::MatrixXd x(4, 2);
  x << -1, 3, 1, 3, -1, 3, 1, 3;  // first column already mean 0, var 1
  const auto data = CombinedDataset::from_covariates(Eigen::Vector4d(1, 1, 0, 1), Eigen::Vector4d(1, 0, 0, 0),
                                                     Eigen::Vector4d(0, 1, 2, 3), x);
  const auto [z, info] = standardize(data);
  EXPECT_LE((z.design() - data.design()).cwiseAbs().maxCoeff(), 1e-12);
  ASSERT_EQ(info.constant_columns.size(), 1u);
  EXPECT_EQ(info.constant_columns[0], 2u);
}

TEST(Standardize, RoundTripAndPredictorInvariance) {
  std::mt19937_64 rng(3);
  for (int rep = 0; rep < 20; ++rep) {
    auto data = oracle::random_dataset(rng, 80, 4);
    // shift/scale columns so standardization does real work
    Eigen::MatrixXd x = data.design();
    for (Eigen::Index j = 1; j < x.cols(); ++j) x.col(j) = x.col(j) * (j * 3.0) + Eigen::VectorXd::Constant(x.rows(), j * 10.0);
    data = data.with_design(x);
    const auto [z, info] = standardize(data);
    EXPECT_LE((unstandardize(z, info).design() - data.design()).cwiseAbs().maxCoeff(), 1e-10);
    std::normal_distribution<double> nd;
    Eigen::VectorXd c(5);
    for (int j = 0; j < 5; ++j) c[j] = nd(rng);
    const Eigen::VectorXd back = info.to_original(c);
    EXPECT_LE((data.design() * back - z.design() * c).cwiseAbs().maxCoeff(), 1e-8);
    EXPECT_LE((info.to_standardized(back) - c).cwiseAbs().maxCoeff(), 1e-10);
  }
}

TEST(Dataset, SelectKeepsOrder) {
  const auto data = parse_csv_dataset("r,t,y,x1\n1,1,2.0,0.3\n1,0,1.0,-0.1\n0,0,0.5,0.2\n1,0,4,1\n", schema_x1());
  const std::vector<std::size_t> rows = {3, 0, 2};
  const auto sub = data.select(rows);
  EXPECT_EQ(sub.N(), 3u);
  EXPECT_DOUBLE_EQ(sub.y()[0], 4.0);
  EXPECT_DOUBLE_EQ(sub.y()[2], 0.5);
}
