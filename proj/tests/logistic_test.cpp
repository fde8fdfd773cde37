#include <gtest/gtest.h>

#include "support.hpp"

using namespace imtl;
using testing_support::Gen;

namespace {

struct Problem {
  Matrix x;
  std::vector<int> y;
};

/// Labels drawn from a logistic model on the first `informative` features.
Problem draw(Gen& g, Index n, Index p, Index informative, double strength) {
  Problem pr{g.gaussian(n, p), {}};
  for (Index i = 0; i < n; ++i) {
    double eta = 0.3;
    for (Index j = 0; j < informative; ++j) eta += strength * pr.x(i, j);
    pr.y.push_back(g.uniform(0.0, 1.0) < 1.0 / (1.0 + std::exp(-eta)) ? 1 : 0);
  }
  pr.y[0] = 1;
  pr.y[1] = 0;
  return pr;
}

/// Coefficients mapped back to the raw feature scale.
std::pair<double, Vector> raw_coefficients(const LogisticModel& m) {
  const Vector beta = m.coefficients.cwiseQuotient(m.scale);
  return {m.intercept - beta.dot(m.mean), beta};
}

}  // namespace

TEST(FitL1Logistic, NullModelAtLargePenalty) {
  Gen g(1);
  const Problem pr = draw(g, 50, 4, 2, 1.0);
  const double lmax = lambda_max(pr.x, pr.y);
  const LogisticModel m = fit_l1_logistic(pr.x, pr.y, lmax * 1.0001);
  EXPECT_EQ(m.nonzeros(), 0);
  double ybar = 0.0;
  for (int v : pr.y) ybar += v;
  ybar /= static_cast<double>(pr.y.size());
  EXPECT_NEAR(m.intercept, std::log(ybar / (1.0 - ybar)), 1e-6);
  EXPECT_GT(fit_l1_logistic(pr.x, pr.y, lmax * 0.9).nonzeros(), 0);
}

TEST(FitL1Logistic, UnpenalizedMatchesGradientDescent) {
  Gen g(2);
  Matrix x(8, 2);
  x << 0.0, 1.0, 1.0, 0.5, 2.0, -1.0, 3.0, 0.0, 0.5, 2.0, 1.5, 1.0, 2.5, -0.5, 1.0, -1.0;
  const std::vector<int> y{0, 0, 1, 1, 0, 1, 0, 1};
  const LogisticModel m = fit_l1_logistic(x, y, 0.0);
  EXPECT_TRUE(m.converged);
  const auto [b0, beta] = testing_support::gradient_descent_logistic(x, y, 400000, 1.0);
  const auto [c0, gamma] = raw_coefficients(m);
  EXPECT_NEAR(c0, b0, 1e-4);
  EXPECT_NEAR(gamma[0], beta[0], 1e-4);
  EXPECT_NEAR(gamma[1], beta[1], 1e-4);
}

TEST(FitL1Logistic, NoiseFeatureIsExactlyZero) {
  Gen g(3);
  Problem pr = draw(g, 200, 2, 1, 2.0);
  const LogisticModel m = fit_l1_logistic(pr.x, pr.y, 0.05);
  EXPECT_NE(m.coefficients[0], 0.0);
  EXPECT_EQ(m.coefficients[1], 0.0);
  EXPECT_LE(kkt_violation(m, pr.x, pr.y), 1e-6);
}

TEST(FitL1Logistic, KktHoldsOnRandomProblems) {
  Gen g(4);
  for (int t = 0; t < 30; ++t) {
    const Problem pr = draw(g, g.integer(20, 80), g.integer(1, 12), g.integer(0, 3), 1.5);
    const double lmax = lambda_max(pr.x, pr.y);
    for (double frac : {0.5, 0.1, 0.01}) {
      const LogisticModel m = fit_l1_logistic(pr.x, pr.y, frac * lmax);
      EXPECT_TRUE(m.converged);
      EXPECT_LE(kkt_violation(m, pr.x, pr.y), 1e-6) << "case " << t;
    }
  }
}

TEST(FitL1Logistic, ObjectiveNotWorseThanNull) {
  Gen g(5);
  for (int t = 0; t < 20; ++t) {
    const Problem pr = draw(g, 40, 5, 2, 1.0);
    LogisticModel m = fit_l1_logistic(pr.x, pr.y, 0.02);
    LogisticModel null = m;
    null.coefficients.setZero();
    null.intercept = 0.0;
    EXPECT_LE(logistic_objective(m, pr.x, pr.y), logistic_objective(null, pr.x, pr.y));
  }
}

TEST(FitL1Logistic, PathSupportShrinksWithPenalty) {
  Gen g(6);
  for (int t = 0; t < 10; ++t) {
    const Problem pr = draw(g, 60, 10, 3, 1.0);
    const std::vector<double> lambdas{0.3, 0.2, 0.15, 0.1, 0.07, 0.05, 0.03, 0.02, 0.01, 0.005};
    const auto path = fit_l1_logistic_path(pr.x, pr.y, lambdas);
    for (std::size_t k = 1; k < path.size(); ++k) {
      EXPECT_GE(path[k].nonzeros(), path[k - 1].nonzeros());
      EXPECT_EQ(path[k].lambda_beta, lambdas[k]);
    }
    for (std::size_t k = 0; k < path.size(); ++k) {
      const LogisticModel cold = fit_l1_logistic(pr.x, pr.y, lambdas[k]);
      EXPECT_NEAR(logistic_objective(cold, pr.x, pr.y), logistic_objective(path[k], pr.x, pr.y), 1e-8);
    }
  }
}

TEST(FitL1Logistic, ConstantFeatureStaysZero) {
  Gen g(7);
  Problem pr = draw(g, 40, 3, 2, 1.0);
  pr.x.col(2).setConstant(4.0);
  const LogisticModel m = fit_l1_logistic(pr.x, pr.y, 0.01);
  EXPECT_EQ(m.scale[2], 1.0);
  EXPECT_EQ(m.coefficients[2], 0.0);
}

TEST(FitL1Logistic, Deterministic) {
  Gen g(8);
  const Problem pr = draw(g, 50, 6, 2, 1.0);
  const LogisticModel a = fit_l1_logistic(pr.x, pr.y, 0.03);
  const LogisticModel b = fit_l1_logistic(pr.x, pr.y, 0.03);
  EXPECT_EQ(a.coefficients, b.coefficients);
  EXPECT_EQ(a.intercept, b.intercept);
}

TEST(FitL1Logistic, Errors) {
  Gen g(9);
  const Matrix x = g.gaussian(5, 2);
  EXPECT_THROW(fit_l1_logistic(x, {1, 1, 1, 1, 1}, 0.1), DegenerateLabels);
  EXPECT_THROW(fit_l1_logistic(x, {0, 0, 0, 0, 0}, 0.1), DataError);
  Matrix bad = x;
  bad(2, 1) = std::nan("");
  EXPECT_THROW(fit_l1_logistic(bad, {0, 1, 0, 1, 0}, 0.1), DataError);
  EXPECT_THROW(fit_l1_logistic(x, {0, 1, 0, 1}, 0.1), ContractViolation);
  EXPECT_THROW(fit_l1_logistic(x, {0, 1, 0, 1, 0}, -1.0), ContractViolation);
}

TEST(Predict, Examples) {
  LogisticModel m;
  m.coefficients = Vector::Zero(1);
  m.mean = Vector::Zero(1);
  m.scale = Vector::Ones(1);
  Matrix x(3, 1);
  x << -5.0, 0.0, 7.0;
  EXPECT_EQ(predict_proba(m, x), Vector::Constant(3, 0.5));
  EXPECT_EQ(predict(m, x), (std::vector<int>{0, 0, 0}));
  m.intercept = 10.0;
  EXPECT_EQ(predict(m, x), (std::vector<int>{1, 1, 1}));
  m.intercept = 0.0;
  m.coefficients[0] = 1.0;
  EXPECT_NEAR(predict_proba(m, Matrix::Constant(1, 1, 2.197))[0], 0.9, 1e-4);
  EXPECT_THROW(predict(m, Matrix::Zero(2, 2)), ContractViolation);
}

TEST(Predict, ProbabilitiesStrictlyInsideUnitInterval) {
  Gen g(10);
  const Problem pr = draw(g, 60, 3, 3, 3.0);
  const LogisticModel m = fit_l1_logistic(pr.x, pr.y, 0.0);
  const Vector p = predict_proba(m, g.gaussian(100, 3) * 500.0);
  for (Index i = 0; i < p.size(); ++i) {
    EXPECT_GT(p[i], 0.0);
    EXPECT_LT(p[i], 1.0);
  }
}

TEST(Metrics, Examples) {
  const std::vector<int> y{1, 1, 0, 0, 0};
  const Metrics perfect = metrics(y, y);
  EXPECT_EQ(perfect.accuracy, 1.0);
  EXPECT_EQ(perfect.sensitivity, 1.0);
  EXPECT_EQ(perfect.specificity, 1.0);
  const Metrics pos = metrics(y, {1, 1, 1, 1, 1});
  EXPECT_DOUBLE_EQ(pos.accuracy, 0.4);
  EXPECT_EQ(pos.sensitivity, 1.0);
  EXPECT_EQ(pos.specificity, 0.0);
  const Metrics neg = metrics(y, {0, 0, 0, 0, 0});
  EXPECT_EQ(neg.sensitivity, 0.0);
  EXPECT_EQ(neg.specificity, 1.0);
  EXPECT_EQ(neg.tn, 3);
  EXPECT_EQ(neg.fn, 2);
  EXPECT_THROW(metrics({}, {}), ContractViolation);
  EXPECT_THROW(metrics({1}, {1, 0}), ContractViolation);
  EXPECT_DOUBLE_EQ(error_rate(y, {1, 0, 0, 0, 1}), 0.4);
}

TEST(Tune, SinglePointGrid) {
  const TuneResult r = tune({2}, {1.0}, {0.1}, [](Index, double, const std::vector<double>& lb) {
    return std::vector<double>(lb.size(), 0.25);
  });
  EXPECT_EQ(r.rank, 2);
  EXPECT_EQ(r.lambda_s, 1.0);
  EXPECT_EQ(r.lambda_beta, 0.1);
  EXPECT_EQ(r.validation_error, 0.25);
}

TEST(Tune, TieBreakOrder) {
  // Every point ties: smallest R, then smallest lambda_s, then largest lambda_beta.
  auto flat = [](Index, double, const std::vector<double>& lb) { return std::vector<double>(lb.size(), 0.1); };
  const TuneResult a = tune({3, 1, 2}, {10.0, 0.0, 1.0}, {0.01, 0.3, 0.1}, flat);
  EXPECT_EQ(a.rank, 1);
  EXPECT_EQ(a.lambda_s, 0.0);
  EXPECT_EQ(a.lambda_beta, 0.3);
  // A strictly smaller error wins regardless of order.
  auto dip = [](Index r, double ls, const std::vector<double>& lb) {
    std::vector<double> e(lb.size(), 0.2);
    if (r == 3 && ls == 10.0) e[0] = 0.1;
    return e;
  };
  const TuneResult b = tune({1, 2, 3}, {0.0, 10.0}, {0.05, 0.5}, dip);
  EXPECT_EQ(b.rank, 3);
  EXPECT_EQ(b.lambda_s, 10.0);
  EXPECT_EQ(b.lambda_beta, 0.05);
  EXPECT_THROW(tune({}, {0.0}, {0.1}, flat), ContractViolation);
}
