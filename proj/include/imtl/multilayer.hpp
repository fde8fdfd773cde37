#pragma once

// Individualized multilayer tensor decomposition of multimodality data.
//
// For subject i and modality m the signal is modelled as
//
//   Theta_i^(m) = sum_r W_ir * B_r^(m) + S_i,
//   B_r^(m) = b_r^(m),1 o ... o b_r^(m),D,     S_i = s_i^1 o ... o s_i^D,
//
// with the subject weights W shared by all modalities, modality-specific
// population factors, and one rank-1 individual layer per subject shared by
// all of its modalities. The fit minimizes
//
//   sum_m ||X^(m) - Theta^(m)||_F^2 + lambda_s sum_{m,i,r} <B_r^(m), S_i>^2
//
// by the bi-level block improvement scheme: closed-form W updates alternate
// with per-modality maximum-block-improvement (MBI) factor updates, then every
// subject's individual layer is refined by its own MBI loop, until the
// reconstruction stops moving.

#include <chrono>
#include <cmath>
#include <limits>
#include <numeric>
#include <optional>
#include <utility>
#include <vector>

#include "imtl/dataset.hpp"
#include "imtl/fit_options.hpp"
#include "imtl/random.hpp"
#include "imtl/tensor.hpp"

namespace imtl {

/// Fitted parameters. The signal is
///   Theta_i^(m) = sum_r W_ir * modality_scale(m, r) * (o_d B[m][d].col(r))
///               + individual_weight(i) * (o_d S[i][d]).
/// While fitting, the scales are all one; finalize() moves every norm into
/// them so factor columns and individual vectors become unit-norm.
struct MultilayerModel {
  Dims dims;
  Matrix W;                               // N x R
  std::vector<std::vector<Matrix>> B;     // [m][d], p_d x R
  std::vector<std::vector<Vector>> S;     // [i][d], length p_d
  Matrix modality_scale;                  // M x R
  Vector individual_weight;               // N
  double lambda_s = 0.0;
  bool finalized = false;

  Index n_subjects() const { return W.rows(); }
  Index n_modalities() const { return static_cast<Index>(B.size()); }
  Index rank() const { return W.cols(); }
  Index ndim() const { return static_cast<Index>(dims.size()); }
  Index image_size() const { return product(dims); }

  static MultilayerModel zeros(Index n_subjects, Index n_modalities, const Dims& dims, Index rank, double lambda_s) {
    MultilayerModel m;
    m.dims = dims;
    m.W = Matrix::Zero(n_subjects, rank);
    m.B.assign(static_cast<std::size_t>(n_modalities), {});
    for (auto& bm : m.B)
      for (Index p : dims) bm.push_back(Matrix::Zero(p, rank));
    m.S.assign(static_cast<std::size_t>(n_subjects), {});
    for (auto& si : m.S)
      for (Index p : dims) si.push_back(Vector::Zero(p));
    m.modality_scale = Matrix::Ones(n_modalities, rank);
    m.individual_weight = Vector::Ones(n_subjects);
    m.lambda_s = lambda_s;
    return m;
  }

  /// Same signal with every scale folded back into the first-mode factors.
  MultilayerModel raw() const {
    MultilayerModel out = *this;
    for (Index m = 0; m < n_modalities(); ++m) {
      auto& f = out.B[static_cast<std::size_t>(m)].front();
      for (Index r = 0; r < rank(); ++r) f.col(r) *= modality_scale(m, r);
    }
    for (Index i = 0; i < n_subjects(); ++i) out.S[static_cast<std::size_t>(i)].front() *= individual_weight[i];
    out.modality_scale.setOnes();
    out.individual_weight.setOnes();
    out.finalized = false;
    return out;
  }

  /// The individual layer S_i as a dense tensor.
  DenseTensor individual_layer(Index i) const {
    DenseTensor t = outer_rank1(S.at(static_cast<std::size_t>(i)));
    t *= individual_weight[i];
    return t;
  }

  /// Population layer sum_r W_ir B_r^(m) plus the individual layer.
  DenseTensor reconstruct(Index i, Index m) const {
    const auto& bm = B.at(static_cast<std::size_t>(m));
    Vector w = W.row(i).transpose().cwiseProduct(modality_scale.row(m).transpose());
    DenseTensor t(dims, khatri_rao_excluding(bm) * w);
    t += individual_layer(i);
    return t;
  }
};

/// Extracted per-subject features.
struct FeatureVector {
  Matrix modality_weights;  // M x R
  double individual_weight = 0.0;
  Vector individual_factors;  // s_1, ..., s_D concatenated

  Index size() const { return modality_weights.size() + 1 + individual_factors.size(); }

  /// Flattened as modality_weights (row by row: modality-major), weight, factors.
  Vector flatten() const {
    Vector v(size());
    Index k = 0;
    for (Index m = 0; m < modality_weights.rows(); ++m)
      for (Index r = 0; r < modality_weights.cols(); ++r) v[k++] = modality_weights(m, r);
    v[k++] = individual_weight;
    v.tail(individual_factors.size()) = individual_factors;
    return v;
  }
};

/// Result of one MBI step on one block family.
struct BlockUpdate {
  int mode = -1;                       // applied mode, -1 if nothing changed
  std::vector<double> improvements;    // objective decrease offered by each mode's candidate (>= 0)
  double change_sq = 0.0;              // ||new - old||^2 of the applied block
  bool reseeded = false;
};

struct BlockOptions {
  double ridge = 1e-8;
  int* stabilized = nullptr;
};

namespace detail {

inline void check_model_matches(const MultilayerModel& model, const MultimodalDataset& data) {
  if (model.dims != data.dims() || model.n_subjects() != data.n_subjects() ||
      model.n_modalities() != data.n_modalities()) {
    throw ContractViolation("multilayer: model shape (N=" + std::to_string(model.n_subjects()) +
                            ", M=" + std::to_string(model.n_modalities()) + ", dims " + dims_to_string(model.dims) +
                            ") does not match the data (N=" + std::to_string(data.n_subjects()) +
                            ", M=" + std::to_string(data.n_modalities()) + ", dims " + dims_to_string(data.dims()) + ")");
  }
}

/// p_d x N matrix whose column i is s_i^d.
inline Matrix individual_factor_matrix(const MultilayerModel& model, Index d) {
  Matrix out(model.dims[static_cast<std::size_t>(d)], model.n_subjects());
  for (Index i = 0; i < model.n_subjects(); ++i) out.col(i) = model.S[static_cast<std::size_t>(i)][static_cast<std::size_t>(d)];
  return out;
}

/// N x R matrix of prod_{d != skip} <s_i^d, b_r^(m),d>; with skip < 0 this is <S_i, B_r^(m)>.
inline Matrix layer_inner(const MultilayerModel& model, Index m, Index skip = -1) {
  Matrix out = Matrix::Ones(model.n_subjects(), model.rank());
  for (Index d = 0; d < model.ndim(); ++d) {
    if (d == skip) continue;
    out = out.cwiseProduct(individual_factor_matrix(model, d).transpose() *
                           model.B[static_cast<std::size_t>(m)][static_cast<std::size_t>(d)]);
  }
  return out;
}

/// Vectorized individual layers, one row per subject.
inline Matrix individual_rows(const MultilayerModel& model) {
  Matrix out(model.n_subjects(), model.image_size());
  for (Index i = 0; i < model.n_subjects(); ++i) out.row(i) = model.individual_layer(i).values().transpose();
  return out;
}

/// W with the rows of subjects missing modality m zeroed.
inline Matrix masked_weights(const MultilayerModel& model, const MultimodalDataset& data, Index m) {
  Matrix w = model.W;
  if (data.has_missing()) {
    for (Index i = 0; i < data.n_subjects(); ++i)
      if (!data.is_present(i, m)) w.row(i).setZero();
  }
  return w;
}

inline double relative_floor(const MultimodalDataset& data) {
  double x_sq = 0.0;
  for (Index m = 0; m < data.n_modalities(); ++m) x_sq += data.modality(m).squaredNorm();
  return 1e-16 * x_sq + std::numeric_limits<double>::min();
}

}  // namespace detail

// ---------------------------------------------------------------------------
// Objective

/// Residual sum of squares over observed images plus the orthogonality penalty.
inline double objective(const MultilayerModel& model_in, const MultimodalDataset& data) {
  detail::check_model_matches(model_in, data);
  const MultilayerModel model = model_in.finalized ? model_in.raw() : model_in;
  const Matrix srows = detail::individual_rows(model);
  double rss = 0.0;
  double penalty = 0.0;
  for (Index m = 0; m < model.n_modalities(); ++m) {
    const Matrix C = khatri_rao_excluding(model.B[static_cast<std::size_t>(m)]);
    Matrix resid = data.modality(m) - model.W * C.transpose() - srows;
    const Matrix inner = detail::layer_inner(model, m);
    for (Index i = 0; i < model.n_subjects(); ++i) {
      if (!data.is_present(i, m)) continue;
      rss += resid.row(i).squaredNorm();
      penalty += inner.row(i).squaredNorm();
    }
  }
  return rss + model.lambda_s * penalty;
}

// ---------------------------------------------------------------------------
// Block updates

/// Closed-form update of the shared subject weights with every other block
/// fixed: W minimizes sum_m ||(X^(m) - S)_(1) - W C_m^T||^2 with
/// C_m = B^(m),D ⊙ ... ⊙ B^(m),1. Subjects with missing modalities get their
/// own row-wise normal equations.
inline Matrix update_population_weights(const MultilayerModel& model, const MultimodalDataset& data,
                                        const BlockOptions& bopts = {}) {
  detail::check_model_matches(model, data);
  detail::require(!model.finalized, "update_population_weights: model must be in raw (unfinalized) form");
  const Index N = model.n_subjects();
  const Index R = model.rank();
  const Index M = model.n_modalities();
  std::vector<Matrix> grams;
  Matrix rhs = Matrix::Zero(N, R);
  Matrix gram = Matrix::Zero(R, R);
  std::vector<Matrix> cross;
  for (Index m = 0; m < M; ++m) {
    const auto& bm = model.B[static_cast<std::size_t>(m)];
    const Matrix C = khatri_rao_excluding(bm);
    Matrix xc = data.modality(m) * C - detail::layer_inner(model, m);
    grams.push_back(khatri_rao_gram(bm));
    if (!data.has_missing()) {
      rhs += xc;
      gram += grams.back();
    } else {
      cross.push_back(std::move(xc));
    }
  }
  if (!data.has_missing()) {
    auto sol = detail::stabilized_solve(gram, rhs.transpose(), bopts.ridge, bopts.stabilized);
    return sol ? Matrix(sol->transpose()) : Matrix(Matrix::Zero(N, R));
  }
  Matrix W = Matrix::Zero(N, R);
  for (Index i = 0; i < N; ++i) {
    Matrix g = Matrix::Zero(R, R);
    Vector b = Vector::Zero(R);
    for (Index m = 0; m < M; ++m) {
      if (!data.is_present(i, m)) continue;
      g += grams[static_cast<std::size_t>(m)];
      b += cross[static_cast<std::size_t>(m)].row(i).transpose();
    }
    auto sol = detail::stabilized_solve(g, b, bopts.ridge, bopts.stabilized);
    if (sol) W.row(i) = sol->transpose();
  }
  return W;
}

namespace detail {

struct ModalityCandidate {
  Matrix factor;
  double improvement = 0.0;  // >= 0
  bool valid = false;
};

/// Minimizer of the reduced objective in B^(m),d with everything else fixed.
///
/// With C_d = B_{-d} ⊙ W the least-squares part has normal matrix
/// (C_d^T C_d) ⊗ I, and the penalty sum_{i,r} <b_r, c_ir s_i^d>^2 adds
/// lambda * sum_i c_ir^2 s_i^d s_i^d^T to the diagonal block of column r,
/// where c_ir = prod_{d' != d} <s_i^d', b_r^d'>.
inline ModalityCandidate modality_candidate(const MultilayerModel& model, const MultimodalDataset& data, Index m,
                                            Index d, const Matrix& w_masked, const Matrix& projected,
                                            const BlockOptions& bopts) {
  const auto& bm = model.B[static_cast<std::size_t>(m)];
  const Index R = model.rank();
  const Index pd = model.dims[static_cast<std::size_t>(d)];
  const Matrix Sd = individual_factor_matrix(model, d);
  Matrix cexcl = layer_inner(model, m, d);  // N x R
  if (data.has_missing()) {
    for (Index i = 0; i < data.n_subjects(); ++i)
      if (!data.is_present(i, m)) cexcl.row(i).setZero();
  }

  Matrix mt(pd, R);
  std::vector<Vector> vs(static_cast<std::size_t>(model.ndim()));
  for (Index r = 0; r < R; ++r) {
    for (Index k = 0; k < model.ndim(); ++k)
      vs[static_cast<std::size_t>(k)] = k == d ? Vector() : Vector(bm[static_cast<std::size_t>(k)].col(r));
    const Vector row = projected.row(r).transpose();
    mt.col(r) = contract_all_but(row.data(), model.dims, vs, d);
  }
  mt -= Sd * w_masked.cwiseProduct(cexcl);

  const Matrix gram = (w_masked.transpose() * w_masked).cwiseProduct(khatri_rao_gram(bm, d));
  const Matrix& cur = bm[static_cast<std::size_t>(d)];
  ModalityCandidate out;

  const bool penalized = model.lambda_s > 0.0 && cexcl.cwiseAbs().maxCoeff() > 0.0;
  if (!penalized) {
    auto sol = stabilized_solve(gram, mt.transpose(), bopts.ridge, bopts.stabilized);
    if (!sol) return out;
    out.factor = sol->transpose();
    const Matrix delta = out.factor - cur;
    out.improvement = std::max(0.0, (delta * gram).cwiseProduct(delta).sum());
    out.valid = true;
    return out;
  }

  const Index n = pd * R;
  Matrix A = kronecker(gram, Matrix::Identity(pd, pd));
  std::vector<Matrix> blocks;
  for (Index r = 0; r < R; ++r) {
    const Vector c2 = cexcl.col(r).cwiseAbs2();
    Matrix K = Sd * c2.asDiagonal() * Sd.transpose();
    A.block(r * pd, r * pd, pd, pd) += model.lambda_s * K;
  }
  const Vector rhs = Eigen::Map<const Vector>(mt.data(), n);
  auto sol = stabilized_solve(A, rhs, bopts.ridge, bopts.stabilized);
  if (!sol) return out;
  out.factor = Eigen::Map<const Matrix>(sol->data(), pd, R);
  const Vector delta = *sol - Eigen::Map<const Vector>(cur.data(), n);
  out.improvement = std::max(0.0, delta.dot(A * delta));
  out.valid = true;
  return out;
}

}  // namespace detail

/// One MBI step on the factors of modality m: every mode's candidate is
/// computed from the same snapshot and only the best one is applied (ties go
/// to the smaller mode index).
inline BlockUpdate update_modality_factors_mbi(MultilayerModel& model, const MultimodalDataset& data, Index m,
                                               const BlockOptions& bopts = {}) {
  detail::check_model_matches(model, data);
  detail::require(!model.finalized, "update_modality_factors_mbi: model must be in raw form");
  detail::require(m >= 0 && m < model.n_modalities(), "update_modality_factors_mbi: modality out of range");
  const Matrix w_masked = detail::masked_weights(model, data, m);
  const Matrix projected = w_masked.transpose() * data.modality(m);  // R x P
  BlockUpdate up;
  std::optional<detail::ModalityCandidate> best;
  int best_mode = -1;
  for (Index d = 0; d < model.ndim(); ++d) {
    auto cand = detail::modality_candidate(model, data, m, d, w_masked, projected, bopts);
    up.improvements.push_back(cand.valid ? cand.improvement : 0.0);
    if (!cand.valid) continue;
    const double tie = 1e-12 * (best ? best->improvement : 0.0);
    if (!best || cand.improvement > best->improvement + tie) {
      best_mode = static_cast<int>(d);
      best = std::move(cand);
    }
  }
  if (best) {
    auto& target = model.B[static_cast<std::size_t>(m)][static_cast<std::size_t>(best_mode)];
    up.change_sq = (best->factor - target).squaredNorm();
    target = std::move(best->factor);
    up.mode = best_mode;
  }
  return up;
}

namespace detail {

/// sum over observed modalities of (X_i^(m) - sum_r W_ir B_r^(m)), and the number of them.
inline std::pair<Vector, Index> subject_residual_sum(const MultilayerModel& model, const MultimodalDataset& data,
                                                     Index i) {
  Vector y = Vector::Zero(model.image_size());
  Index count = 0;
  for (Index m = 0; m < model.n_modalities(); ++m) {
    if (!data.is_present(i, m)) continue;
    y += data.modality(m).row(i).transpose();
    y -= khatri_rao_excluding(model.B[static_cast<std::size_t>(m)]) * model.W.row(i).transpose();
    ++count;
  }
  return {std::move(y), count};
}

/// Columns v_mr = b_r^(m),d * prod_{d' != d} <b_r^(m),d', s^d'> over observed modalities.
inline Matrix penalty_directions(const MultilayerModel& model, const MultimodalDataset* data, Index i,
                                 const std::vector<Vector>& s, Index d) {
  const Index R = model.rank();
  std::vector<Index> mods;
  for (Index m = 0; m < model.n_modalities(); ++m)
    if (!data || data->is_present(i, m)) mods.push_back(m);
  Matrix V(model.dims[static_cast<std::size_t>(d)], static_cast<Index>(mods.size()) * R);
  Index col = 0;
  for (Index m : mods) {
    const auto& bm = model.B[static_cast<std::size_t>(m)];
    for (Index r = 0; r < R; ++r) {
      double c = 1.0;
      for (Index k = 0; k < model.ndim(); ++k)
        if (k != d) c *= bm[static_cast<std::size_t>(k)].col(r).dot(s[static_cast<std::size_t>(k)]);
      V.col(col++) = c * bm[static_cast<std::size_t>(d)].col(r);
    }
  }
  return V;
}

/// Penalty sum_{m,r} <B_r^(m), o_d u^d>^2 over observed modalities.
inline double rank1_penalty(const MultilayerModel& model, const MultimodalDataset* data, Index i,
                            const std::vector<Vector>& u) {
  double pen = 0.0;
  for (Index m = 0; m < model.n_modalities(); ++m) {
    if (data && !data->is_present(i, m)) continue;
    const auto& bm = model.B[static_cast<std::size_t>(m)];
    for (Index r = 0; r < model.rank(); ++r) {
      double c = 1.0;
      for (Index k = 0; k < model.ndim(); ++k) c *= bm[static_cast<std::size_t>(k)].col(r).dot(u[static_cast<std::size_t>(k)]);
      pen += c * c;
    }
  }
  return pen;
}

/// Leading rank-1 approximation of a tensor: unit vectors u^d with the
/// largest |<T, o_d u^d>|, by power iteration started from the leading left
/// singular vectors of the unfoldings. The returned scale is <T, o_d u^d> >= 0.
inline std::pair<std::vector<Vector>, double> leading_rank1(const DenseTensor& t, int max_iterations = 500) {
  const Index D = t.ndim();
  std::vector<Vector> u(static_cast<std::size_t>(D));
  for (Index d = 0; d < D; ++d) {
    if (D == 1) {
      u[0] = t.values();
      break;
    }
    const Matrix unf = matricize(t, d);
    Eigen::SelfAdjointEigenSolver<Matrix> eig(unf * unf.transpose());
    u[static_cast<std::size_t>(d)] = eig.eigenvectors().col(unf.rows() - 1);
  }
  if (D == 1) {
    const double n = u[0].norm();
    if (n > 0.0) u[0] /= n;
    return {u, n};
  }
  double scale = 0.0;
  for (int it = 0; it < max_iterations; ++it) {
    double change = 0.0;
    for (Index d = 0; d < D; ++d) {
      Vector next = contract_all_but(t.values().data(), t.dims(), u, d);
      const double n = next.norm();
      if (n == 0.0) return {u, 0.0};
      next /= n;
      change = std::max(change, (next - u[static_cast<std::size_t>(d)]).norm());
      u[static_cast<std::size_t>(d)] = std::move(next);
      scale = n;
    }
    if (change < 1e-14) break;
  }
  return {u, scale};
}

}  // namespace detail

/// One MBI step on the individual layer of subject i with W and every B fixed.
///
/// The candidate for mode d solves
///   (n_i ||S_{i,-d}||^2 I + lambda sum_{m,r} v_mr v_mr^T) s = sum_m Xbar_i,(d)^(m) S_{i,-d},
/// where n_i is the number of observed modalities and Xbar the population-layer
/// residual. A layer that is identically zero is re-seeded from the leading
/// rank-1 fit of the mean residual with the optimal non-negative scale; a zero
/// residual leaves it at zero.
inline BlockUpdate update_individual_layer_mbi(MultilayerModel& model, const MultimodalDataset& data, Index i,
                                               const BlockOptions& bopts = {}) {
  detail::check_model_matches(model, data);
  detail::require(!model.finalized, "update_individual_layer_mbi: model must be in raw form");
  detail::require(i >= 0 && i < model.n_subjects(), "update_individual_layer_mbi: subject out of range");
  BlockUpdate up;
  auto [ysum, count] = detail::subject_residual_sum(model, data, i);
  if (count == 0) return up;
  auto& s = model.S[static_cast<std::size_t>(i)];
  const Index D = model.ndim();

  bool zero_layer = false;
  for (const auto& v : s) zero_layer = zero_layer || v.squaredNorm() == 0.0;
  if (zero_layer && D > 1) {
    DenseTensor mean(model.dims, ysum / static_cast<double>(count));
    auto [u, sigma] = detail::leading_rank1(mean);
    up.improvements.assign(static_cast<std::size_t>(D), 0.0);
    if (!(sigma > 0.0)) return up;
    const double proj = static_cast<double>(count) * sigma;  // <ysum, o_d u^d>
    const double curvature = static_cast<double>(count) + model.lambda_s * detail::rank1_penalty(model, &data, i, u);
    const double alpha = proj / curvature;
    if (!(alpha > 0.0)) return up;
    u.front() *= alpha;
    for (Index d = 0; d < D; ++d) up.change_sq += (u[static_cast<std::size_t>(d)] - s[static_cast<std::size_t>(d)]).squaredNorm();
    up.improvements.front() = proj * proj / curvature;
    s = std::move(u);
    up.mode = 0;
    up.reseeded = true;
    return up;
  }

  double best = -1.0;
  int best_mode = -1;
  Vector best_vec;
  for (Index d = 0; d < D; ++d) {
    double others = 1.0;
    for (Index k = 0; k < D; ++k)
      if (k != d) others *= s[static_cast<std::size_t>(k)].squaredNorm();
    const Vector rhs = contract_all_but(ysum.data(), model.dims, s, d);
    const Index pd = model.dims[static_cast<std::size_t>(d)];
    Matrix A = Matrix::Identity(pd, pd) * (static_cast<double>(count) * others);
    if (model.lambda_s > 0.0) {
      const Matrix V = detail::penalty_directions(model, &data, i, s, d);
      A.noalias() += model.lambda_s * V * V.transpose();
    }
    auto sol = detail::stabilized_solve(A, rhs, bopts.ridge, bopts.stabilized);
    if (!sol) {
      up.improvements.push_back(0.0);
      continue;
    }
    const Vector delta = *sol - s[static_cast<std::size_t>(d)];
    const double improvement = std::max(0.0, delta.dot(A * delta));
    up.improvements.push_back(improvement);
    const double tie = 1e-12 * std::max(0.0, best);
    if (best_mode < 0 || improvement > best + tie) {
      best = improvement;
      best_mode = static_cast<int>(d);
      best_vec = *sol;
    }
  }
  if (best_mode >= 0) {
    auto& target = s[static_cast<std::size_t>(best_mode)];
    up.change_sq = (best_vec - target).squaredNorm();
    target = std::move(best_vec);
    up.mode = best_mode;
  }
  return up;
}

// ---------------------------------------------------------------------------
// Finalization and features

/// Moves every norm into modality_scale / individual_weight, makes the first
/// nonzero entry of each mode-1 population column non-negative (sign into the
/// scale) and of s^1..s^{D-1} non-negative (sign into s^D), and orders the
/// components by descending first element of the modality-1 mode-1 factor.
inline MultilayerModel finalize(const MultilayerModel& in) {
  if (in.finalized) return in;
  MultilayerModel model = in;
  const Index R = model.rank();
  const Index D = model.ndim();
  auto first_nonzero_negative = [](const auto& v) {
    for (Index k = 0; k < v.size(); ++k)
      if (v[k] != 0.0) return v[k] < 0.0;
    return false;
  };
  for (Index m = 0; m < model.n_modalities(); ++m) {
    auto& bm = model.B[static_cast<std::size_t>(m)];
    for (Index r = 0; r < R; ++r) {
      double scale = model.modality_scale(m, r);
      for (auto& f : bm) {
        const double n = f.col(r).norm();
        if (n > 0.0) f.col(r) /= n;
        scale *= n;
      }
      if (first_nonzero_negative(bm.front().col(r))) {
        bm.front().col(r) *= -1.0;
        scale = -scale;
      }
      model.modality_scale(m, r) = scale;
    }
  }
  for (Index i = 0; i < model.n_subjects(); ++i) {
    auto& s = model.S[static_cast<std::size_t>(i)];
    double mu = model.individual_weight[i];
    bool zero = false;
    for (auto& v : s) {
      const double n = v.norm();
      if (n == 0.0) zero = true;
      else v /= n;
      mu *= n;
    }
    if (zero) {
      for (auto& v : s) v.setZero();
      model.individual_weight[i] = 0.0;
      continue;
    }
    if (mu < 0.0) {
      s.back() *= -1.0;
      mu = -mu;
    }
    for (Index d = 0; d + 1 < D; ++d) {
      if (first_nonzero_negative(s[static_cast<std::size_t>(d)])) {
        s[static_cast<std::size_t>(d)] *= -1.0;
        s.back() *= -1.0;
      }
    }
    model.individual_weight[i] = mu;
  }
  // Component order is shared by all modalities because W is shared.
  std::vector<Index> order(static_cast<std::size_t>(R));
  std::iota(order.begin(), order.end(), Index{0});
  if (model.n_modalities() > 0) {
    const Matrix& lead = model.B.front().front();
    std::stable_sort(order.begin(), order.end(), [&](Index a, Index b) { return lead(0, a) > lead(0, b); });
  }
  auto permute_cols = [&](Matrix& mat) {
    Matrix out(mat.rows(), mat.cols());
    for (Index k = 0; k < R; ++k) out.col(k) = mat.col(order[static_cast<std::size_t>(k)]);
    mat = std::move(out);
  };
  permute_cols(model.W);
  Matrix scale_t = model.modality_scale.transpose();
  Matrix permuted(R, model.n_modalities());
  for (Index k = 0; k < R; ++k) permuted.row(k) = scale_t.row(order[static_cast<std::size_t>(k)]);
  model.modality_scale = permuted.transpose();
  for (auto& bm : model.B)
    for (auto& f : bm) permute_cols(f);
  model.finalized = true;
  return model;
}

/// max over modalities, subjects and components of |<Bbar_r^(m), Sbar_i>|.
inline double max_orthogonality(const MultilayerModel& model_in) {
  const MultilayerModel model = model_in.finalized ? model_in : finalize(model_in);
  double worst = 0.0;
  for (Index m = 0; m < model.n_modalities(); ++m) {
    const Matrix inner = detail::layer_inner(model, m);
    for (Index i = 0; i < model.n_subjects(); ++i) {
      if (model.individual_weight[i] == 0.0) continue;
      worst = std::max(worst, inner.row(i).cwiseAbs().maxCoeff());
    }
  }
  return worst;
}

inline FeatureVector extract_features(const MultilayerModel& model, Index i) {
  detail::require(model.finalized, "extract_features: model is not finalized");
  if (i < 0 || i >= model.n_subjects()) throw ContractViolation("extract_features: subject index out of range");
  FeatureVector f;
  f.modality_weights = model.modality_scale;
  for (Index m = 0; m < model.n_modalities(); ++m)
    f.modality_weights.row(m) = f.modality_weights.row(m).cwiseProduct(model.W.row(i));
  f.individual_weight = model.individual_weight[i];
  Index total = 0;
  for (Index p : model.dims) total += p;
  f.individual_factors.resize(total);
  Index off = 0;
  for (const auto& v : model.S[static_cast<std::size_t>(i)]) {
    f.individual_factors.segment(off, v.size()) = v;
    off += v.size();
  }
  return f;
}

/// Features of every subject, one flattened row each.
inline Matrix feature_matrix(const MultilayerModel& model) {
  Matrix out;
  for (Index i = 0; i < model.n_subjects(); ++i) {
    const Vector f = extract_features(model, i).flatten();
    if (i == 0) out.resize(model.n_subjects(), f.size());
    out.row(i) = f.transpose();
  }
  return out;
}

// ---------------------------------------------------------------------------
// Fit driver

namespace detail {

inline double reconstruction_change(const MultilayerModel& a, const MultilayerModel& b, const MultimodalDataset& data) {
  const Matrix sa = individual_rows(a);
  const Matrix sb = individual_rows(b);
  double total = 0.0;
  for (Index m = 0; m < a.n_modalities(); ++m) {
    const Matrix ca = khatri_rao_excluding(a.B[static_cast<std::size_t>(m)]);
    const Matrix cb = khatri_rao_excluding(b.B[static_cast<std::size_t>(m)]);
    const Matrix diff = a.W * ca.transpose() + sa - b.W * cb.transpose() - sb;
    for (Index i = 0; i < a.n_subjects(); ++i)
      if (data.is_present(i, m)) total += diff.row(i).squaredNorm();
  }
  return total;
}

/// Largest objective decrease any single block (W, one B^(m),d, one s_i^d)
/// could achieve at the current point, without changing the model.
inline double max_block_improvement(const MultilayerModel& model, const MultimodalDataset& data, bool include_individual,
                                    const BlockOptions& bopts) {
  double best = 0.0;
  {
    const Matrix Wn = update_population_weights(model, data, bopts);
    const Matrix delta = Wn - model.W;
    // Decrease of a quadratic at its minimizer: sum_m ||delta C_m^T||^2 over observed cells.
    double dec = 0.0;
    for (Index m = 0; m < model.n_modalities(); ++m) {
      const Matrix g = khatri_rao_gram(model.B[static_cast<std::size_t>(m)]);
      for (Index i = 0; i < model.n_subjects(); ++i) {
        if (!data.is_present(i, m)) continue;
        const Vector di = delta.row(i).transpose();
        dec += di.dot(g * di);
      }
    }
    best = std::max(best, dec);
  }
  for (Index m = 0; m < model.n_modalities(); ++m) {
    MultilayerModel copy = model;
    const auto up = update_modality_factors_mbi(copy, data, m, bopts);
    for (double v : up.improvements) best = std::max(best, v);
  }
  if (include_individual) {
    for (Index i = 0; i < model.n_subjects(); ++i) {
      MultilayerModel copy = model;
      const auto up = update_individual_layer_mbi(copy, data, i, bopts);
      for (double v : up.improvements) best = std::max(best, v);
    }
  }
  return best;
}

}  // namespace detail

/// Fits the multilayer model by the bi-level block improvement algorithm.
/// Returns the finalized best-of-restarts model and its report.
inline std::pair<MultilayerModel, FitReport> fit(const MultimodalDataset& data, Index rank, double lambda_s,
                                                 const FitOptions& opts = {}) {
  const auto t0 = std::chrono::steady_clock::now();
  detail::require(rank >= 1, "fit: rank must be >= 1");
  detail::require(lambda_s >= 0.0, "fit: lambda_s must be non-negative");
  for (Index p : data.dims()) {
    if (rank > p) {
      throw ContractViolation("fit: rank " + std::to_string(rank) + " exceeds dimension " + std::to_string(p));
    }
  }
  if (!data.all_finite()) throw DataError("fit: non-finite image data");

  const Index N = data.n_subjects();
  const Index M = data.n_modalities();
  const Index P = data.image_size();
  const double floor = detail::relative_floor(data);
  const double cells = static_cast<double>(data.present_count()) * static_cast<double>(P);

  Rng rng(opts.seed);
  std::optional<MultilayerModel> best_model;
  FitReport best_report;
  std::vector<double> restart_objectives;

  for (int restart = 0; restart < std::max(1, opts.restarts); ++restart) {
    MultilayerModel model = MultilayerModel::zeros(N, M, data.dims(), rank, lambda_s);
    for (auto& bm : model.B)
      for (auto& f : bm) f = random_unit_columns(rng, f.rows(), rank);

    FitReport rep;
    BlockOptions bopts{opts.ridge, &rep.stabilized_solves};
    auto record = [&] {
      if (opts.record_block_objectives) rep.block_objectives.push_back(objective(model, data));
    };
    rep.objective_trace.push_back(objective(model, data));
    record();

    MultilayerModel previous = model;
    std::vector<int> modality_modes(static_cast<std::size_t>(M), -1);
    std::vector<int> subject_modes(static_cast<std::size_t>(N), -1);

    for (int t = 1; t <= opts.max_iterations; ++t) {
      // Modality layers.
      rep.modality_converged = false;
      for (int inner = 0; inner < opts.max_inner_iterations; ++inner) {
        const Matrix Wn = update_population_weights(model, data, bopts);
        double change = (Wn - model.W).squaredNorm() / static_cast<double>(N * rank);
        model.W = Wn;
        record();
        double bchange = 0.0;
        for (Index m = 0; m < M; ++m) {
          const auto up = update_modality_factors_mbi(model, data, m, bopts);
          modality_modes[static_cast<std::size_t>(m)] = up.mode;
          bchange += up.change_sq;
          record();
        }
        change += bchange / (static_cast<double>(M * rank) * static_cast<double>(P));
        if (change <= opts.modality_tolerance) {
          rep.modality_converged = true;
          break;
        }
      }
      // Individual layers.
      if (!opts.freeze_individual) {
        rep.individual_converged = true;
        for (Index i = 0; i < N; ++i) {
          bool done = false;
          for (int inner = 0; inner < opts.max_inner_iterations; ++inner) {
            const auto up = update_individual_layer_mbi(model, data, i, bopts);
            if (up.mode >= 0) subject_modes[static_cast<std::size_t>(i)] = up.mode;
            if (up.mode >= 0) record();
            if (up.mode < 0 || (!up.reseeded && up.change_sq / static_cast<double>(P) <= opts.individual_tolerance)) {
              done = true;
              break;
            }
          }
          rep.individual_converged = rep.individual_converged && done;
        }
      }
      rep.modality_modes.push_back(modality_modes);
      rep.subject_modes.push_back(subject_modes);
      rep.iterations = t;
      const double moved = detail::reconstruction_change(model, previous, data) / cells;
      rep.objective_trace.push_back(objective(model, data));
      previous = model;
      if (moved <= opts.outer_tolerance) {
        rep.outer_converged = true;
        break;
      }
    }

    // Polish until no single block offers more than the stationarity tolerance.
    if (opts.stationarity_tolerance > 0.0) {
      for (int sweep = 0; sweep < opts.max_polish_sweeps; ++sweep) {
        const double obj = rep.objective_trace.back();
        const double gate = opts.stationarity_tolerance * (obj + floor);
        double offered = 0.0;
        {
          const Matrix Wn = update_population_weights(model, data, bopts);
          model.W = Wn;
          record();
        }
        for (Index m = 0; m < M; ++m) {
          const auto up = update_modality_factors_mbi(model, data, m, bopts);
          for (double v : up.improvements) offered = std::max(offered, v);
          record();
        }
        if (!opts.freeze_individual) {
          for (Index i = 0; i < N; ++i) {
            const auto up = update_individual_layer_mbi(model, data, i, bopts);
            for (double v : up.improvements) offered = std::max(offered, v);
            if (up.mode >= 0) record();
          }
        }
        ++rep.polish_sweeps;
        rep.objective_trace.push_back(objective(model, data));
        if (offered <= gate) {
          const double now = rep.objective_trace.back();
          const double check = detail::max_block_improvement(model, data, !opts.freeze_individual, bopts);
          rep.max_block_improvement = check / (now + floor);
          if (check <= opts.stationarity_tolerance * (now + floor)) {
            rep.stationary = true;
            break;
          }
        }
      }
    }
    if (!rep.stationary) {
      const double now = rep.objective_trace.back();
      rep.max_block_improvement =
          detail::max_block_improvement(model, data, !opts.freeze_individual, bopts) / (now + floor);
    }

    restart_objectives.push_back(rep.final_objective());
    if (!best_model || rep.final_objective() < best_report.final_objective()) {
      best_model = std::move(model);
      best_report = std::move(rep);
      best_report.best_restart = restart;
    }
  }

  MultilayerModel out = finalize(*best_model);
  best_report.restart_objectives = std::move(restart_objectives);
  best_report.max_orthogonality = max_orthogonality(out);
  best_report.seconds = std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
  return {std::move(out), std::move(best_report)};
}

// ---------------------------------------------------------------------------
// New subjects

struct ProjectionOptions {
  int max_rounds = 1000;
  double tolerance = 1e-13;  // relative objective decrease per round
  double ridge = 1e-8;
};

/// Features for a subject outside the training set, with every population
/// factor held fixed: the subject's weight row and individual layer are
/// refined alternately (weight row by its normal equations, layer by MBI
/// steps) until the subject's objective stops decreasing.
inline FeatureVector fit_new_subject(const MultilayerModel& model, const std::vector<DenseTensor>& images,
                                     const ProjectionOptions& popts = {}) {
  detail::require(model.finalized, "fit_new_subject: model is not finalized");
  if (static_cast<Index>(images.size()) != model.n_modalities()) {
    throw ContractViolation("fit_new_subject: expected " + std::to_string(model.n_modalities()) + " images, got " +
                            std::to_string(images.size()));
  }
  MultimodalDataset one(1, model.n_modalities(), model.dims);
  for (Index m = 0; m < model.n_modalities(); ++m) {
    if (images[static_cast<std::size_t>(m)].dims() != model.dims) {
      throw ContractViolation("fit_new_subject: image dims " + dims_to_string(images[static_cast<std::size_t>(m)].dims()) +
                              " do not match the model " + dims_to_string(model.dims));
    }
    one.set_image(0, m, images[static_cast<std::size_t>(m)]);
  }
  if (!one.all_finite()) throw DataError("fit_new_subject: non-finite image data");

  MultilayerModel sub = model.raw();
  sub.W = Matrix::Zero(1, model.rank());
  sub.S.assign(1, {});
  for (Index p : model.dims) sub.S[0].push_back(Vector::Zero(p));
  sub.individual_weight = Vector::Ones(1);

  const BlockOptions bopts{popts.ridge, nullptr};
  double prev = objective(sub, one);
  for (int round = 0; round < popts.max_rounds; ++round) {
    sub.W = update_population_weights(sub, one, bopts);
    for (int k = 0; k < 4 * std::max<Index>(1, sub.ndim()); ++k) {
      const auto up = update_individual_layer_mbi(sub, one, 0, bopts);
      if (up.mode < 0) break;
    }
    const double obj = objective(sub, one);
    if (prev - obj <= popts.tolerance * (obj + detail::relative_floor(one))) break;
    prev = obj;
  }

  MultilayerModel fin = sub;
  fin.modality_scale = Matrix::Ones(model.n_modalities(), model.rank());
  fin = finalize(fin);
  // finalize() may reorder components; keep the trained model's order instead.
  MultilayerModel keep = model;
  keep.W = sub.W;
  keep.S = fin.S;
  keep.individual_weight = fin.individual_weight;
  FeatureVector f = extract_features(keep, 0);
  return f;
}

}  // namespace imtl
