#pragma once

// L1-penalized logistic regression
//
//   minimize (1/N) sum_i [log(1 + exp(eta_i)) - y_i eta_i] + lambda ||beta||_1,
//   eta_i = b0 + z_i^T beta,
//
// on internally standardized features z, with an unpenalized intercept.
// Solved by proximal Newton steps: each outer step minimizes the penalized
// second-order model by cyclic coordinate descent, followed by a
// backtracking line search on the true objective.

#include <algorithm>
#include <cmath>
#include <functional>
#include <limits>
#include <numeric>
#include <optional>
#include <vector>

#include "imtl/tensor.hpp"

namespace imtl {

class DegenerateLabels : public DataError {
 public:
  using DataError::DataError;
};

struct LogisticOptions {
  double kkt_tolerance = 1e-6;
  int max_newton_steps = 500;
  int max_cd_sweeps = 5000;
};

struct LogisticModel {
  Vector coefficients;  // on standardized features
  double intercept = 0.0;
  double lambda_beta = 0.0;
  Vector mean;
  Vector scale;
  int newton_steps = 0;
  bool converged = false;

  Index n_features() const { return coefficients.size(); }
  Index nonzeros() const { return (coefficients.array() != 0.0).count(); }

  Matrix standardize(const Matrix& x) const {
    if (x.cols() != n_features()) {
      throw ContractViolation("LogisticModel: expected " + std::to_string(n_features()) + " features, got " +
                              std::to_string(x.cols()));
    }
    return (x.rowwise() - mean.transpose()).array().rowwise() / scale.transpose().array();
  }
};

struct Metrics {
  double accuracy = 0.0;
  double sensitivity = 0.0;
  double specificity = 0.0;
  Index tp = 0, fp = 0, tn = 0, fn = 0;
};

namespace detail {

inline double log1pexp(double t) { return t > 0.0 ? t + std::log1p(std::exp(-t)) : std::log1p(std::exp(t)); }
inline double sigmoid(double t) {
  if (t >= 0.0) return 1.0 / (1.0 + std::exp(-t));
  const double e = std::exp(t);
  return e / (1.0 + e);
}

inline double logistic_loss(const Matrix& z, const Vector& y, double b0, const Vector& beta) {
  const Vector eta = (z * beta).array() + b0;
  double s = 0.0;
  for (Index i = 0; i < eta.size(); ++i) s += log1pexp(eta[i]) - y[i] * eta[i];
  return s / static_cast<double>(eta.size());
}

inline double soft_threshold(double a, double t) {
  if (a > t) return a - t;
  if (a < -t) return a + t;
  return 0.0;
}

inline void check_logistic_inputs(const Matrix& x, const std::vector<int>& y) {
  if (static_cast<Index>(y.size()) != x.rows()) {
    throw ContractViolation("fit_l1_logistic: " + std::to_string(x.rows()) + " rows but " + std::to_string(y.size()) +
                            " labels");
  }
  if (x.rows() < 2) throw ContractViolation("fit_l1_logistic: need at least two observations");
  if (!x.allFinite()) throw DataError("fit_l1_logistic: non-finite features");
  Index pos = 0;
  for (int v : y) {
    if (v != 0 && v != 1) throw ContractViolation("fit_l1_logistic: labels must be 0 or 1");
    pos += v;
  }
  if (pos == 0 || pos == x.rows()) throw DegenerateLabels("fit_l1_logistic: only one class present");
}

/// Training-set mean and population standard deviation per feature; constant features get scale 1.
inline void set_standardization(LogisticModel& model, const Matrix& x) {
  const double n = static_cast<double>(x.rows());
  model.mean = x.colwise().mean().transpose();
  model.scale.resize(x.cols());
  for (Index j = 0; j < x.cols(); ++j) {
    const double sd = std::sqrt((x.col(j).array() - model.mean[j]).square().sum() / n);
    model.scale[j] = sd > 1e-12 * (1.0 + std::abs(model.mean[j])) ? sd : 1.0;
  }
  model.coefficients = Vector::Zero(x.cols());
}

}  // namespace detail

/// Largest KKT violation of (intercept, beta) on standardized features z.
inline double kkt_violation(const Matrix& z, const Vector& y, double b0, const Vector& beta, double lambda) {
  const Vector eta = (z * beta).array() + b0;
  Vector r(eta.size());
  for (Index i = 0; i < eta.size(); ++i) r[i] = detail::sigmoid(eta[i]) - y[i];
  const double n = static_cast<double>(eta.size());
  double worst = std::abs(r.sum() / n);
  const Vector g = z.transpose() * r / n;
  for (Index j = 0; j < beta.size(); ++j) {
    const double v = beta[j] == 0.0 ? std::max(0.0, std::abs(g[j]) - lambda)
                                    : std::abs(g[j] + lambda * (beta[j] > 0.0 ? 1.0 : -1.0));
    worst = std::max(worst, v);
  }
  return worst;
}

inline double kkt_violation(const LogisticModel& m, const Matrix& x, const std::vector<int>& y) {
  Vector yv(static_cast<Index>(y.size()));
  for (std::size_t i = 0; i < y.size(); ++i) yv[static_cast<Index>(i)] = y[i];
  return kkt_violation(m.standardize(x), yv, m.intercept, m.coefficients, m.lambda_beta);
}

/// Penalized objective at the model's coefficients.
inline double logistic_objective(const LogisticModel& m, const Matrix& x, const std::vector<int>& y) {
  Vector yv(static_cast<Index>(y.size()));
  for (std::size_t i = 0; i < y.size(); ++i) yv[static_cast<Index>(i)] = y[i];
  return detail::logistic_loss(m.standardize(x), yv, m.intercept, m.coefficients) +
         m.lambda_beta * m.coefficients.lpNorm<1>();
}

/// Fits at one penalty. `warm` (same features) supplies the starting point.
inline LogisticModel fit_l1_logistic(const Matrix& x, const std::vector<int>& y, double lambda_beta,
                                     const LogisticOptions& opts = {}, const LogisticModel* warm = nullptr) {
  detail::check_logistic_inputs(x, y);
  detail::require(lambda_beta >= 0.0, "fit_l1_logistic: lambda_beta must be non-negative");
  const Index N = x.rows();
  const Index p = x.cols();
  const double n = static_cast<double>(N);

  LogisticModel model;
  model.lambda_beta = lambda_beta;
  detail::set_standardization(model, x);
  const Matrix z = model.standardize(x);
  Vector yv(N);
  for (Index i = 0; i < N; ++i) yv[i] = y[static_cast<std::size_t>(i)];

  double b0;
  Vector beta;
  if (warm && warm->coefficients.size() == p) {
    b0 = warm->intercept;
    beta = warm->coefficients;
  } else {
    const double ybar = yv.mean();
    b0 = std::log(ybar / (1.0 - ybar));
    beta = Vector::Zero(p);
  }

  auto penalized = [&](double c0, const Vector& c) {
    return detail::logistic_loss(z, yv, c0, c) + lambda_beta * c.lpNorm<1>();
  };
  const Vector zsq = z.array().square().colwise().sum().transpose();
  double f = penalized(b0, beta);

  for (int step = 0; step < opts.max_newton_steps; ++step) {
    if (kkt_violation(z, yv, b0, beta, lambda_beta) <= opts.kkt_tolerance) {
      model.converged = true;
      break;
    }
    model.newton_steps = step + 1;
    const Vector eta = (z * beta).array() + b0;
    Vector prob(N), w(N);
    for (Index i = 0; i < N; ++i) {
      prob[i] = detail::sigmoid(eta[i]);
      w[i] = std::max(prob[i] * (1.0 - prob[i]), 1e-12) / n;
    }
    const Vector resid = (prob - yv) / n;  // gradient contributions
    const double g0 = resid.sum();
    const Vector g = z.transpose() * resid;
    const double h00 = w.sum();
    const Vector hjj = (z.array().square().colwise() * w.array()).colwise().sum().transpose();

    // Coordinate descent on the penalized quadratic model in the step (d0, d).
    double d0 = 0.0;
    Vector d = Vector::Zero(p);
    Vector u = Vector::Zero(N);  // z d + d0
    for (int sweep = 0; sweep < opts.max_cd_sweeps; ++sweep) {
      double biggest = 0.0;
      {
        const double grad = g0 + w.dot(u);
        const double delta = -grad / h00;
        d0 += delta;
        u.array() += delta;
        biggest = std::max(biggest, h00 * delta * delta);
      }
      for (Index j = 0; j < p; ++j) {
        if (!(hjj[j] > 0.0) || zsq[j] == 0.0) continue;
        const double grad = g[j] + z.col(j).dot(w.cwiseProduct(u));
        const double cur = beta[j] + d[j];
        const double next = detail::soft_threshold(hjj[j] * cur - grad, lambda_beta) / hjj[j];
        const double delta = next - cur;
        if (delta == 0.0) continue;
        d[j] += delta;
        u += delta * z.col(j);
        biggest = std::max(biggest, hjj[j] * delta * delta);
      }
      if (biggest < 1e-20) break;
    }

    // Backtracking on the true objective.
    const double decrease = g0 * d0 + g.dot(d) + lambda_beta * ((beta + d).lpNorm<1>() - beta.lpNorm<1>());
    double t = 1.0;
    bool accepted = false;
    for (int k = 0; k < 60; ++k) {
      const double c0 = b0 + t * d0;
      const Vector c = beta + t * d;
      const double fc = penalized(c0, c);
      if (fc <= f + 1e-4 * t * std::min(decrease, 0.0) || (fc <= f && k > 30)) {
        b0 = c0;
        beta = c;
        f = fc;
        accepted = true;
        break;
      }
      t *= 0.5;
    }
    if (!accepted) break;
  }
  if (!model.converged) model.converged = kkt_violation(z, yv, b0, beta, lambda_beta) <= opts.kkt_tolerance;
  model.intercept = b0;
  model.coefficients = beta;
  return model;
}

/// Fits every penalty in `lambdas`, warm-starting from the largest down.
/// Results are returned in the order of `lambdas`.
inline std::vector<LogisticModel> fit_l1_logistic_path(const Matrix& x, const std::vector<int>& y,
                                                       const std::vector<double>& lambdas,
                                                       const LogisticOptions& opts = {}) {
  std::vector<std::size_t> order(lambdas.size());
  std::iota(order.begin(), order.end(), std::size_t{0});
  std::stable_sort(order.begin(), order.end(), [&](std::size_t a, std::size_t b) { return lambdas[a] > lambdas[b]; });
  std::vector<LogisticModel> out(lambdas.size());
  const LogisticModel* warm = nullptr;
  for (std::size_t k : order) {
    out[k] = fit_l1_logistic(x, y, lambdas[k], opts, warm);
    warm = &out[k];
  }
  return out;
}

/// Smallest penalty at which every coefficient is zero: max_j |score_j| at the null model.
inline double lambda_max(const Matrix& x, const std::vector<int>& y) {
  detail::check_logistic_inputs(x, y);
  LogisticModel m;
  detail::set_standardization(m, x);
  const Matrix z = m.standardize(x);
  Vector yv(x.rows());
  for (Index i = 0; i < x.rows(); ++i) yv[i] = y[static_cast<std::size_t>(i)];
  const Vector r = Vector::Constant(x.rows(), yv.mean()) - yv;
  return (z.transpose() * r).cwiseAbs().maxCoeff() / static_cast<double>(x.rows());
}

inline Vector predict_proba(const LogisticModel& m, const Matrix& x) {
  const Vector eta = (m.standardize(x) * m.coefficients).array() + m.intercept;
  Vector p(eta.size());
  // Kept strictly inside (0, 1) where the sigmoid would round to an endpoint.
  const double lo = std::numeric_limits<double>::denorm_min();
  const double hi = std::nextafter(1.0, 0.0);
  for (Index i = 0; i < eta.size(); ++i) p[i] = std::clamp(detail::sigmoid(eta[i]), lo, hi);
  return p;
}

inline std::vector<int> predict(const LogisticModel& m, const Matrix& x) {
  const Vector p = predict_proba(m, x);
  std::vector<int> out(static_cast<std::size_t>(p.size()));
  for (Index i = 0; i < p.size(); ++i) out[static_cast<std::size_t>(i)] = p[i] > 0.5 ? 1 : 0;
  return out;
}

/// Sensitivity (specificity) is reported as 0 when there are no positives (negatives).
inline Metrics metrics(const std::vector<int>& truth, const std::vector<int>& predicted) {
  if (truth.empty()) throw ContractViolation("metrics: empty inputs");
  if (truth.size() != predicted.size()) throw ContractViolation("metrics: inputs differ in length");
  Metrics m;
  for (std::size_t k = 0; k < truth.size(); ++k) {
    const bool t = truth[k] == 1;
    const bool p = predicted[k] == 1;
    if (t && p) ++m.tp;
    else if (t) ++m.fn;
    else if (p) ++m.fp;
    else ++m.tn;
  }
  const double total = static_cast<double>(truth.size());
  m.accuracy = static_cast<double>(m.tp + m.tn) / total;
  m.sensitivity = m.tp + m.fn > 0 ? static_cast<double>(m.tp) / static_cast<double>(m.tp + m.fn) : 0.0;
  m.specificity = m.tn + m.fp > 0 ? static_cast<double>(m.tn) / static_cast<double>(m.tn + m.fp) : 0.0;
  return m;
}

inline double error_rate(const std::vector<int>& truth, const std::vector<int>& predicted) {
  return 1.0 - metrics(truth, predicted).accuracy;
}

// ---------------------------------------------------------------------------
// Grid search

struct TuneResult {
  Index rank = 0;
  double lambda_s = 0.0;
  double lambda_beta = 0.0;
  double validation_error = 0.0;
};

/// Evaluates `evaluate(R, lambda_s, lambda_betas)`, which returns one
/// validation error per entry of lambda_betas, over the full grid and keeps
/// the smallest error; ties go to smaller R, then smaller lambda_s, then
/// larger lambda_beta.
inline TuneResult tune(const std::vector<Index>& ranks, const std::vector<double>& lambda_s_grid,
                       const std::vector<double>& lambda_beta_grid,
                       const std::function<std::vector<double>(Index, double, const std::vector<double>&)>& evaluate) {
  if (ranks.empty() || lambda_s_grid.empty() || lambda_beta_grid.empty())
    throw ContractViolation("tune: every grid must be non-empty");
  std::optional<TuneResult> best;
  auto better = [](const TuneResult& a, const TuneResult& b) {
    if (a.validation_error != b.validation_error) return a.validation_error < b.validation_error;
    if (a.rank != b.rank) return a.rank < b.rank;
    if (a.lambda_s != b.lambda_s) return a.lambda_s < b.lambda_s;
    return a.lambda_beta > b.lambda_beta;
  };
  for (Index r : ranks) {
    for (double ls : lambda_s_grid) {
      const std::vector<double> errs = evaluate(r, ls, lambda_beta_grid);
      detail::require(errs.size() == lambda_beta_grid.size(), "tune: evaluator returned the wrong number of errors");
      for (std::size_t k = 0; k < errs.size(); ++k) {
        TuneResult cand{r, ls, lambda_beta_grid[k], errs[k]};
        if (!best || better(cand, *best)) best = cand;
      }
    }
  }
  return *best;
}

}  // namespace imtl
