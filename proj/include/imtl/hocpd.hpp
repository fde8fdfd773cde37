#pragma once

// Higher-order CP decomposition (HOCPD) of a subject-aligned tensor
// N x p_1 x ... x p_D: one subject-loading matrix W and D feature factors,
// fitted by least squares. Each sweep solves the subject mode in closed form
// and then applies a maximum-block-improvement (MBI) step over the feature
// modes.

#include <chrono>
#include <cmath>
#include <limits>
#include <numeric>
#include <utility>

#include "imtl/fit_options.hpp"
#include "imtl/random.hpp"
#include "imtl/tensor.hpp"

namespace imtl {

struct HocpdModel {
  Matrix W;                          // N x R subject loadings
  std::vector<FactorMatrix> factors;  // D feature-mode factors, p_d x R
  bool normalized = false;

  Index rank() const { return W.cols(); }
  Index n_subjects() const { return W.rows(); }
  Dims feature_dims() const {
    Dims d;
    for (const auto& f : factors) d.push_back(f.rows());
    return d;
  }
};

namespace detail {

struct HocpdState {
  Matrix W;
  std::vector<Matrix> B;
};

inline double hocpd_objective(const Matrix& X1, double x_sq, const HocpdState& s) {
  const Matrix C = khatri_rao_excluding(s.B);
  const Matrix XC = X1 * C;  // N x R
  const double cross = XC.cwiseProduct(s.W).sum();
  const double model_sq = (s.W.transpose() * s.W).cwiseProduct(C.transpose() * C).sum();
  return std::max(0.0, x_sq - 2.0 * cross + model_sq);
}

inline void hocpd_update_weights(const Matrix& X1, HocpdState& s, double ridge, int* stabilized) {
  const Matrix C = khatri_rao_excluding(s.B);
  const Matrix gram = khatri_rao_gram(s.B);
  const Matrix rhs = (X1 * C).transpose();  // R x N
  auto sol = stabilized_solve(gram, rhs, ridge, stabilized);
  if (sol) s.W = sol->transpose();
  else s.W.setZero();
}

/// One MBI step over the feature modes; returns the applied mode or -1.
inline int hocpd_mbi_step(const Matrix& X1, const Dims& fdims, HocpdState& s, double ridge, int* stabilized) {
  const Matrix wgram = s.W.transpose() * s.W;
  if (!(wgram.trace() > 0.0)) return -1;
  const Index D = static_cast<Index>(fdims.size());
  double best = std::numeric_limits<double>::infinity();
  int best_mode = -1;
  Matrix best_factor;
  const Matrix projected = s.W.transpose() * X1;  // R x P
  std::vector<Vector> vs(static_cast<std::size_t>(D));
  for (Index d = 0; d < D; ++d) {
    const Index pd = fdims[static_cast<std::size_t>(d)];
    Matrix mt(pd, s.W.cols());
    for (Index r = 0; r < s.W.cols(); ++r) {
      for (Index k = 0; k < D; ++k) vs[static_cast<std::size_t>(k)] = k == d ? Vector() : Vector(s.B[static_cast<std::size_t>(k)].col(r));
      const Vector row = projected.row(r).transpose();
      mt.col(r) = contract_all_but(row.data(), fdims, vs, d);
    }
    const Matrix gram = wgram.cwiseProduct(khatri_rao_gram(s.B, d));
    auto sol = stabilized_solve(gram, mt.transpose(), ridge, stabilized);
    if (!sol) continue;
    const Matrix cand = sol->transpose();
    const Matrix& cur = s.B[static_cast<std::size_t>(d)];
    const double f_new = (cand * gram).cwiseProduct(cand).sum() - 2.0 * cand.cwiseProduct(mt).sum();
    const double f_cur = (cur * gram).cwiseProduct(cur).sum() - 2.0 * cur.cwiseProduct(mt).sum();
    const double delta = f_new - f_cur;
    const double tie = 1e-12 * std::max(1.0, std::abs(f_cur));
    if (best_mode < 0 || delta < best - tie) {
      best = delta;
      best_mode = static_cast<int>(d);
      best_factor = cand;
    }
  }
  if (best_mode >= 0) s.B[static_cast<std::size_t>(best_mode)] = std::move(best_factor);
  return best_mode;
}

/// Unit-norm factor columns, scales (and mode-1 signs) folded into W, columns
/// ordered by descending first element of the mode-1 factor.
inline HocpdModel finalize_hocpd(HocpdState s) {
  const Index R = s.W.cols();
  for (Index r = 0; r < R; ++r) {
    double scale = 1.0;
    bool zero = false;
    for (auto& f : s.B) {
      const double n = f.col(r).norm();
      if (n == 0.0) zero = true;
      else f.col(r) /= n;
      scale *= n;
    }
    if (zero) {
      s.W.col(r).setZero();
      continue;
    }
    auto first = s.B.front().col(r);
    for (Index i = 0; i < first.size(); ++i) {
      if (first[i] != 0.0) {
        if (first[i] < 0.0) {
          first *= -1.0;
          scale = -scale;
        }
        break;
      }
    }
    s.W.col(r) *= scale;
  }
  std::vector<Index> order(static_cast<std::size_t>(R));
  std::iota(order.begin(), order.end(), Index{0});
  std::stable_sort(order.begin(), order.end(),
                   [&](Index a, Index b) { return s.B.front()(0, a) > s.B.front()(0, b); });
  HocpdModel out;
  out.W.resize(s.W.rows(), R);
  out.factors.assign(s.B.size(), Matrix());
  for (std::size_t d = 0; d < s.B.size(); ++d) out.factors[d].resize(s.B[d].rows(), R);
  for (Index k = 0; k < R; ++k) {
    out.W.col(k) = s.W.col(order[static_cast<std::size_t>(k)]);
    for (std::size_t d = 0; d < s.B.size(); ++d) out.factors[d].col(k) = s.B[d].col(order[static_cast<std::size_t>(k)]);
  }
  out.normalized = true;
  return out;
}

}  // namespace detail

/// Least-squares CP fit of `x` (first mode = subjects) with rank `rank`.
inline std::pair<HocpdModel, FitReport> fit_hocpd(const DenseTensor& x, Index rank, const FitOptions& opts = {}) {
  const auto t0 = std::chrono::steady_clock::now();
  detail::require(rank >= 1, "fit_hocpd: rank must be >= 1");
  detail::require(x.ndim() >= 2, "fit_hocpd: need a subject mode and at least one feature mode");
  for (Index p : x.dims()) {
    if (rank > p) {
      throw ContractViolation("fit_hocpd: rank " + std::to_string(rank) + " exceeds a marginal dimension of " +
                              dims_to_string(x.dims()));
    }
  }
  if (!x.all_finite()) throw DataError("fit_hocpd: non-finite input");

  const Index N = x.dim(0);
  const Dims fdims(x.dims().begin() + 1, x.dims().end());
  const Eigen::Map<const Matrix> X1(x.values().data(), N, x.size() / N);
  const double x_sq = x.values().squaredNorm();

  Rng rng(opts.seed);
  FitReport best_report;
  detail::HocpdState best_state;
  double best_obj = std::numeric_limits<double>::infinity();
  std::vector<double> restart_objectives;

  for (int restart = 0; restart < std::max(1, opts.restarts); ++restart) {
    detail::HocpdState s;
    for (Index p : fdims) s.B.push_back(random_unit_columns(rng, p, rank));
    s.W = Matrix::Zero(N, rank);

    FitReport rep;
    rep.objective_trace.push_back(x_sq);
    double prev = x_sq;
    for (int it = 0; it < opts.max_iterations; ++it) {
      detail::hocpd_update_weights(X1, s, opts.ridge, &rep.stabilized_solves);
      if (opts.record_block_objectives) rep.block_objectives.push_back(detail::hocpd_objective(X1, x_sq, s));
      const int mode = detail::hocpd_mbi_step(X1, fdims, s, opts.ridge, &rep.stabilized_solves);
      rep.hocpd_modes.push_back(mode);
      const double obj = detail::hocpd_objective(X1, x_sq, s);
      if (opts.record_block_objectives) rep.block_objectives.push_back(obj);
      rep.objective_trace.push_back(obj);
      rep.iterations = it + 1;
      if (std::abs(prev - obj) <= opts.tolerance * std::max(prev, std::numeric_limits<double>::min())) {
        rep.outer_converged = true;
        break;
      }
      prev = obj;
      if (obj == 0.0) {
        rep.outer_converged = true;
        break;
      }
    }
    restart_objectives.push_back(rep.final_objective());
    if (rep.final_objective() < best_obj) {
      best_obj = rep.final_objective();
      best_report = std::move(rep);
      best_report.best_restart = restart;
      best_state = s;
    }
  }
  best_report.restart_objectives = std::move(restart_objectives);

  HocpdModel model = detail::finalize_hocpd(std::move(best_state));
  best_report.seconds = std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
  return {std::move(model), std::move(best_report)};
}

inline Vector hocpd_features(const HocpdModel& m, Index i) {
  detail::require(m.normalized, "hocpd_features: model is not finalized");
  if (i < 0 || i >= m.n_subjects()) throw ContractViolation("hocpd_features: subject index out of range");
  return m.W.row(i).transpose();
}

inline DenseTensor hocpd_reconstruct(const HocpdModel& m) {
  std::vector<Matrix> all{m.W};
  all.insert(all.end(), m.factors.begin(), m.factors.end());
  KruskalTensor k{Vector(), all};
  return kruskal_reconstruct(k);
}

/// Least-squares loadings of a new subject image (dims p_1 x ... x p_D) on the fitted bases.
inline Vector hocpd_project(const HocpdModel& m, const DenseTensor& x_new, double ridge = 1e-8) {
  detail::require(x_new.dims() == m.feature_dims(), "hocpd_project: image dims do not match the model");
  const Matrix C = khatri_rao_excluding(m.factors);
  auto sol = detail::stabilized_solve(C.transpose() * C, C.transpose() * x_new.values(), ridge);
  return sol ? Vector(*sol) : Vector(Vector::Zero(m.rank()));
}

}  // namespace imtl
