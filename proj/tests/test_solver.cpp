#include <gtest/gtest.h>

#include <random>

#include "oracles.hpp"
#include "safeatt.hpp"

using namespace safeatt;

namespace {

struct Instance {
  Eigen::MatrixXd x;
  Eigen::VectorXd e, l, w, y;
};

Instance random_instance(std::mt19937_64& rng, int N, int d) {
  const auto data = oracle::random_dataset(rng, N, d);
  const Eigen::VectorXd rt = data.treated_indicator();
  std::uniform_real_distribution<double> u(0.2, 2.0);
  Instance in;
  in.x = data.design();
  in.e = (1.0 - rt.array()).matrix();
  in.l = rt;
  in.w.resize(N);
  for (int i = 0; i < N; ++i) in.w[i] = u(rng);
  in.y = data.y();
  return in;
}

// Subgradient conditions recomputed from scratch, independent of the solver.
double kkt_from_scratch(const Eigen::MatrixXd& x, const Eigen::VectorXd& grad, const Eigen::VectorXd& c,
                        double lambda) {
  double worst = std::abs(grad[0]);
  for (Eigen::Index j = 1; j < c.size(); ++j) {
    const double v = c[j] == 0.0 ? std::max(0.0, std::abs(grad[j]) - lambda)
                                 : std::abs(grad[j] + lambda * (c[j] > 0 ? 1.0 : -1.0));
    worst = std::max(worst, v);
  }
  (void)x;
  return worst;
}

void expect_monotone(const FitResult& f) {
  for (std::size_t k = 1; k < f.objective_trace.size(); ++k) {
    EXPECT_LE(f.objective_trace[k], f.objective_trace[k - 1] + 1e-12) << "step " << k;
  }
}

}  // namespace

TEST(Solver, ExpTiltAboveLambdaMaxIsInterceptOnly) {
  std::mt19937_64 rng(1);
  const auto in = random_instance(rng, 120, 3);
  auto p = PenalizedProblem::exp_tilt(in.x, in.e, in.l, 0.0);
  p.lambda = lambda_max(p) * 1.0001;
  const auto fit = minimize_l1(p);
  ASSERT_TRUE(fit.converged);
  EXPECT_NEAR(fit.coefficients.values[0], std::log(in.l.sum() / in.e.sum()), 1e-10);
  EXPECT_EQ(fit.coefficients.support(), std::vector<std::size_t>{0});
  p.lambda = lambda_max(p) * 0.9;
  EXPECT_GT(minimize_l1(p).coefficients.support().size(), 1u);
}

TEST(Solver, WeightedLsMatchesNormalEquations) {
  std::mt19937_64 rng(2);
  std::normal_distribution<double> z;
  Eigen::MatrixXd x(20, 3);
  Eigen::VectorXd y(20);
  for (int i = 0; i < 20; ++i) {
    x(i, 0) = 1.0;
    x(i, 1) = z(rng);
    x(i, 2) = z(rng);
    y[i] = 1.0 + 2.0 * x(i, 1) - x(i, 2) + z(rng);
  }
  const Eigen::VectorXd w = Eigen::VectorXd::Ones(20);
  const auto fit = minimize_l1(PenalizedProblem::weighted_ls(x, w, y, 0.0));
  ASSERT_TRUE(fit.converged);
  EXPECT_LE((fit.coefficients.values - oracle::normal_equations(x, w, y)).lpNorm<Eigen::Infinity>(), 1e-6);
}

TEST(Solver, SeparatedTreatmentDiverges) {
  // primary: treated have x1 > 0, controls x1 < 0
  Eigen::MatrixXd x(8, 2);
  x << 1, 1.0, 1, 2.0, 1, 0.5, 1, 1.5, 1, -1.0, 1, -0.5, 1, -2.0, 1, -1.2;
  Eigen::VectorXd e(8), l(8);
  e << 0, 0, 0, 0, 1, 1, 1, 1;
  l << 1, 1, 1, 1, 0, 0, 0, 0;
  const auto p = PenalizedProblem::exp_tilt(x, e, l, 0.0);
  try {
    minimize_l1(p);
    FAIL() << "expected divergence";
  } catch (const Error& err) {
    EXPECT_EQ(err.code(), ErrorCode::DivergentObjective);
  }
  SolverOptions ista;
  ista.exp_tilt_method = ExpTiltMethod::Ista;
  try {
    minimize_l1(p, ista);
    FAIL() << "expected divergence";
  } catch (const Error& err) {
    EXPECT_EQ(err.code(), ErrorCode::DivergentObjective);
  }
}

TEST(Solver, UnpenalizedMatchesDenseOracles) {
  std::mt19937_64 rng(4);
  std::uniform_int_distribution<int> dd(1, 5), nn(80, 200);
  for (int rep = 0; rep < 20; ++rep) {
    const auto in = random_instance(rng, nn(rng), dd(rng));
    const auto et = minimize_l1(PenalizedProblem::exp_tilt(in.x, in.e, in.l, 0.0));
    ASSERT_TRUE(et.converged);
    EXPECT_LE((et.coefficients.values - oracle::dense_newton_exp_tilt(in.x, in.e, in.l)).lpNorm<Eigen::Infinity>(),
              1e-6);
    const auto ls = minimize_l1(PenalizedProblem::weighted_ls(in.x, in.w, in.y, 0.0));
    ASSERT_TRUE(ls.converged);
    EXPECT_LE((ls.coefficients.values - oracle::normal_equations(in.x, in.w, in.y)).lpNorm<Eigen::Infinity>(), 1e-6);
  }
}

TEST(Solver, PenalizedKktMonotoneAndMethodsAgree) {
  std::mt19937_64 rng(5);
  SolverOptions ista;
  ista.exp_tilt_method = ExpTiltMethod::Ista;
  for (int rep = 0; rep < 15; ++rep) {
    const auto in = random_instance(rng, 150, 5);
    auto et = PenalizedProblem::exp_tilt(in.x, in.e, in.l, 0.0);
    et.lambda = 0.2 * lambda_max(et);
    const auto a = minimize_l1(et);
    const auto b = minimize_l1(et, ista);
    ASSERT_TRUE(a.converged);
    ASSERT_TRUE(b.converged);
    EXPECT_LE(kkt_from_scratch(in.x, gradient(et, a.coefficients.values), a.coefficients.values, et.lambda), 1e-6);
    EXPECT_LE(std::abs(a.kkt_violation - kkt_violation(et, a.coefficients.values)), 1e-15);
    expect_monotone(a);
    expect_monotone(b);
    EXPECT_LE((a.coefficients.values - b.coefficients.values).lpNorm<Eigen::Infinity>(), 1e-4);

    auto ls = PenalizedProblem::weighted_ls(in.x, in.w, in.y, 0.0);
    ls.lambda = 0.1 * lambda_max(ls);
    const auto c = minimize_l1(ls);
    ASSERT_TRUE(c.converged);
    EXPECT_LE(kkt_from_scratch(in.x, gradient(ls, c.coefficients.values), c.coefficients.values, ls.lambda), 1e-6);
    expect_monotone(c);
  }
}

TEST(Solver, GradientMatchesFiniteDifferences) {
  std::mt19937_64 rng(6);
  const auto in = random_instance(rng, 60, 3);
  for (auto p : {PenalizedProblem::exp_tilt(in.x, in.e, in.l, 0.0), PenalizedProblem::weighted_ls(in.x, in.w, in.y, 0.0)}) {
    Eigen::VectorXd c = Eigen::VectorXd::Constant(4, 0.1);
    const Eigen::VectorXd g = gradient(p, c);
    for (int j = 0; j < 4; ++j) {
      Eigen::VectorXd h = Eigen::VectorXd::Zero(4);
      h[j] = 1e-6;
      const double fd = (unpenalized_loss(p, c + h) - unpenalized_loss(p, c - h)) / 2e-6;
      EXPECT_NEAR(g[j], fd, 1e-6);
    }
  }
}

TEST(Solver, NormalizerEqualsZeroWeightRows) {
  std::mt19937_64 rng(7);
  const auto in = random_instance(rng, 100, 3);
  // append 50 rows with zero selectors
  Eigen::MatrixXd x2(150, 4);
  x2 << in.x, Eigen::MatrixXd::Random(50, 4);
  x2.col(0).setOnes();
  Eigen::VectorXd e2 = Eigen::VectorXd::Zero(150), l2 = Eigen::VectorXd::Zero(150);
  e2.head(100) = in.e;
  l2.head(100) = in.l;
  auto padded = PenalizedProblem::exp_tilt(x2, e2, l2, 0.0);
  padded.lambda = 0.3 * lambda_max(padded);
  auto compact = PenalizedProblem::exp_tilt(in.x, in.e, in.l, padded.lambda);
  compact.normalizer = 150.0;
  const auto a = minimize_l1(padded);
  const auto b = minimize_l1(compact);
  EXPECT_LE((a.coefficients.values - b.coefficients.values).lpNorm<Eigen::Infinity>(), 1e-7);
  EXPECT_NEAR(a.objective(), b.objective(), 1e-12);
}

TEST(Solver, IterationLimitReturnsFlaggedIterate) {
  std::mt19937_64 rng(8);
  const auto in = random_instance(rng, 150, 5);
  SolverOptions opt;
  opt.max_iter = 1;
  const auto fit = minimize_l1(PenalizedProblem::exp_tilt(in.x, in.e, in.l, 1e-4), opt);
  EXPECT_FALSE(fit.converged);
  EXPECT_GT(fit.kkt_violation, opt.kkt_tol);
  EXPECT_EQ(fit.coefficients.size(), 6u);
}

TEST(Solver, WarmStartBeyondGuardFallsBack) {
  std::mt19937_64 rng(9);
  const auto in = random_instance(rng, 100, 2);
  const auto p = PenalizedProblem::exp_tilt(in.x, in.e, in.l, 0.01);
  const Eigen::VectorXd crazy = Eigen::VectorXd::Constant(3, 500.0);
  const auto a = minimize_l1(p, {}, &crazy);
  const auto b = minimize_l1(p);
  ASSERT_TRUE(a.converged);
  EXPECT_LE((a.coefficients.values - b.coefficients.values).lpNorm<Eigen::Infinity>(), 1e-6);
}

TEST(Solver, InvalidProblems) {
  Eigen::MatrixXd x = Eigen::MatrixXd::Ones(3, 2);
  const Eigen::Vector3d zero = Eigen::Vector3d::Zero(), one = Eigen::Vector3d::Ones();
  EXPECT_THROW(PenalizedProblem::exp_tilt(x, zero, one, 0.1), Error);
  EXPECT_THROW(PenalizedProblem::exp_tilt(x, one, one, -1.0), Error);
  EXPECT_THROW(PenalizedProblem::weighted_ls(x, -one, one, 0.1), Error);
  EXPECT_THROW(PenalizedProblem::weighted_ls(x, zero, one, 0.1), Error);
  EXPECT_THROW(PenalizedProblem::weighted_ls(x, Eigen::Vector2d::Ones(), one, 0.1), Error);
  auto p = PenalizedProblem::weighted_ls(x, one, one, 0.1);
  SolverOptions bad;
  bad.kkt_tol = 0.0;
  EXPECT_THROW(minimize_l1(p, bad), Error);
}

TEST(Solver, LambdaGrid) {
  const auto grid = default_lambda_grid(2.0);
  ASSERT_EQ(grid.size(), 50u);
  EXPECT_DOUBLE_EQ(grid.front(), 2.0);
  EXPECT_NEAR(grid.back(), 2e-3, 1e-15);
  for (std::size_t k = 1; k < grid.size(); ++k) {
    EXPECT_NEAR(grid[k] / grid[k - 1], std::pow(1e-3, 1.0 / 49.0), 1e-12);
  }
}
