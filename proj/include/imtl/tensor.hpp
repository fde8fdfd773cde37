#pragma once

// Dense D-way tensors and the multilinear algebra used by the decompositions.
//
// Storage follows vectorization order: the first index runs fastest, so the
// element (i_1, ..., i_D) (zero-based here) lives at
//   i_1 + i_2 p_1 + i_3 p_1 p_2 + ...
// Every matricization below is derived from that single layout. Mode indices
// in the C++ API are zero-based.

#include <Eigen/Dense>

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <functional>
#include <numeric>
#include <span>
#include <string>
#include <utility>
#include <vector>

#include "imtl/error.hpp"

namespace imtl {

using Index = Eigen::Index;
using Matrix = Eigen::MatrixXd;
using Vector = Eigen::VectorXd;
using Dims = std::vector<Index>;

inline Index product(std::span<const Index> dims) {
  return std::accumulate(dims.begin(), dims.end(), Index{1}, std::multiplies<>());
}

inline std::string dims_to_string(std::span<const Index> dims) {
  std::string s = "(";
  for (std::size_t k = 0; k < dims.size(); ++k) {
    if (k) s += "x";
    s += std::to_string(dims[k]);
  }
  return s + ")";
}

class DenseTensor {
 public:
  DenseTensor() = default;

  /// Zero tensor with the given dimensions.
  explicit DenseTensor(Dims dims) : dims_(std::move(dims)) {
    validate_dims();
    values_ = Vector::Zero(product(dims_));
  }

  DenseTensor(Dims dims, Vector values) : dims_(std::move(dims)), values_(std::move(values)) {
    validate_dims();
    if (values_.size() != product(dims_)) {
      throw ContractViolation("DenseTensor: " + std::to_string(values_.size()) +
                              " values do not fill dims " + dims_to_string(dims_));
    }
  }

  const Dims& dims() const noexcept { return dims_; }
  Index ndim() const noexcept { return static_cast<Index>(dims_.size()); }
  Index dim(Index d) const { return dims_.at(static_cast<std::size_t>(d)); }
  Index size() const noexcept { return values_.size(); }

  const Vector& values() const noexcept { return values_; }
  Vector& values() noexcept { return values_; }

  Index linear_index(std::span<const Index> idx) const {
    detail::require(static_cast<Index>(idx.size()) == ndim(), "DenseTensor: index rank mismatch");
    Index lin = 0;
    Index stride = 1;
    for (std::size_t k = 0; k < dims_.size(); ++k) {
      detail::require(idx[k] >= 0 && idx[k] < dims_[k], "DenseTensor: index out of range");
      lin += idx[k] * stride;
      stride *= dims_[k];
    }
    return lin;
  }

  double operator()(std::initializer_list<Index> idx) const {
    return values_[linear_index(std::span<const Index>(idx.begin(), idx.size()))];
  }
  double& operator()(std::initializer_list<Index> idx) {
    return values_[linear_index(std::span<const Index>(idx.begin(), idx.size()))];
  }

  bool all_finite() const { return values_.allFinite(); }

  DenseTensor& operator+=(const DenseTensor& o) {
    detail::require(o.dims_ == dims_, "DenseTensor +=: dims mismatch");
    values_ += o.values_;
    return *this;
  }
  DenseTensor& operator-=(const DenseTensor& o) {
    detail::require(o.dims_ == dims_, "DenseTensor -=: dims mismatch");
    values_ -= o.values_;
    return *this;
  }
  DenseTensor& operator*=(double c) {
    values_ *= c;
    return *this;
  }

  friend DenseTensor operator+(DenseTensor a, const DenseTensor& b) { return a += b; }
  friend DenseTensor operator-(DenseTensor a, const DenseTensor& b) { return a -= b; }
  friend DenseTensor operator*(double c, DenseTensor a) { return a *= c; }

  friend bool operator==(const DenseTensor& a, const DenseTensor& b) {
    return a.dims_ == b.dims_ && a.values_ == b.values_;
  }

 private:
  void validate_dims() const {
    if (dims_.empty()) throw ContractViolation("DenseTensor: at least one mode is required");
    for (Index p : dims_) {
      if (p < 1) throw ContractViolation("DenseTensor: every dimension must be >= 1, got " + dims_to_string(dims_));
    }
  }

  Dims dims_;
  Vector values_;
};

/// Factor matrix of one mode: p_d rows, one column per rank-1 component.
using FactorMatrix = Matrix;

/// CP-form tensor sum_r weights_r * b_r^1 o ... o b_r^D. Empty weights mean all ones.
struct KruskalTensor {
  Vector weights;
  std::vector<FactorMatrix> factors;

  Index rank() const { return factors.empty() ? 0 : factors.front().cols(); }
  Index ndim() const { return static_cast<Index>(factors.size()); }
  Dims dims() const {
    Dims d;
    for (const auto& f : factors) d.push_back(f.rows());
    return d;
  }
  Vector effective_weights() const { return weights.size() ? weights : Vector::Ones(rank()); }
};

// ---------------------------------------------------------------------------
// Matricization and vectorization

/// Mode-d unfolding: row i_d, columns ordered with the remaining indices in
/// increasing mode order (first remaining index fastest).
inline Matrix matricize(const DenseTensor& t, Index d) {
  if (d < 0 || d >= t.ndim()) {
    throw ContractViolation("matricize: mode " + std::to_string(d) + " out of range for a " +
                            std::to_string(t.ndim()) + "-way tensor");
  }
  const auto& dims = t.dims();
  const Index left = product(std::span<const Index>(dims.data(), static_cast<std::size_t>(d)));
  const Index pd = dims[static_cast<std::size_t>(d)];
  const Index right = t.size() / (left * pd);
  Matrix out(pd, left * right);
  const double* src = t.values().data();
  for (Index b = 0; b < right; ++b) {
    Eigen::Map<const Matrix> slab(src + b * left * pd, left, pd);
    out.middleCols(b * left, left) = slab.transpose();
  }
  return out;
}

/// Inverse of matricize: rebuilds the tensor with the given dims from its mode-d unfolding.
inline DenseTensor fold(const Matrix& m, const Dims& dims, Index d) {
  detail::require(d >= 0 && d < static_cast<Index>(dims.size()), "fold: mode out of range");
  const Index total = product(dims);
  const Index pd = dims[static_cast<std::size_t>(d)];
  detail::require(m.rows() == pd && m.cols() * pd == total, "fold: unfolding shape does not match dims");
  const Index left = product(std::span<const Index>(dims.data(), static_cast<std::size_t>(d)));
  const Index right = total / (left * pd);
  Vector values(total);
  for (Index b = 0; b < right; ++b) {
    Eigen::Map<Matrix> slab(values.data() + b * left * pd, left, pd);
    slab = m.middleCols(b * left, left).transpose();
  }
  return DenseTensor(dims, std::move(values));
}

inline Vector vectorize(const DenseTensor& t) { return t.values(); }

inline DenseTensor reshape(const Vector& v, Dims dims) { return DenseTensor(std::move(dims), v); }

// ---------------------------------------------------------------------------
// Matrix products

inline Matrix kronecker(const Matrix& a, const Matrix& b) {
  Matrix out(a.rows() * b.rows(), a.cols() * b.cols());
  for (Index j = 0; j < a.cols(); ++j) {
    for (Index i = 0; i < a.rows(); ++i) {
      out.block(i * b.rows(), j * b.cols(), b.rows(), b.cols()) = a(i, j) * b;
    }
  }
  return out;
}

/// Column-wise Kronecker product; column k is kron(a_k, b_k).
inline Matrix khatri_rao(const Matrix& a, const Matrix& b) {
  if (a.cols() != b.cols()) {
    throw ContractViolation("khatri_rao: column counts differ (" + std::to_string(a.cols()) + " vs " +
                            std::to_string(b.cols()) + ")");
  }
  Matrix out(a.rows() * b.rows(), a.cols());
  for (Index k = 0; k < a.cols(); ++k) {
    for (Index i = 0; i < a.rows(); ++i) {
      out.col(k).segment(i * b.rows(), b.rows()) = a(i, k) * b.col(k);
    }
  }
  return out;
}

/// B^{D} ⊙ ... ⊙ B^{1} with mode `skip` left out (skip < 0 keeps all modes).
/// With this ordering matricize(t, d) == B^d * khatri_rao_excluding(B, d)^T
/// for a unit-weight Kruskal tensor.
inline Matrix khatri_rao_excluding(const std::vector<Matrix>& factors, Index skip = -1) {
  detail::require(!factors.empty(), "khatri_rao_excluding: no factors");
  const Index rank = factors.front().cols();
  Matrix acc = Matrix::Ones(1, rank);
  for (Index d = 0; d < static_cast<Index>(factors.size()); ++d) {
    if (d == skip) continue;
    acc = khatri_rao(factors[static_cast<std::size_t>(d)], acc);
  }
  return acc;
}

// ---------------------------------------------------------------------------
// Rank-1 tensors, inner products, Kruskal operator

/// v^1 o v^2 o ... o v^D.
inline DenseTensor outer_rank1(std::span<const Vector> vs) {
  if (vs.empty()) throw ContractViolation("outer_rank1: empty vector list");
  Dims dims;
  for (const auto& v : vs) dims.push_back(v.size());
  Vector acc = Vector::Ones(1);
  for (const auto& v : vs) {
    Vector next(acc.size() * v.size());
    for (Index j = 0; j < v.size(); ++j) next.segment(j * acc.size(), acc.size()) = v[j] * acc;
    acc.swap(next);
  }
  return DenseTensor(std::move(dims), std::move(acc));
}

inline DenseTensor outer_rank1(std::initializer_list<Vector> vs) {
  return outer_rank1(std::span<const Vector>(vs.begin(), vs.size()));
}

inline double inner(const DenseTensor& a, const DenseTensor& b) {
  if (a.dims() != b.dims()) {
    throw ContractViolation("inner: dims " + dims_to_string(a.dims()) + " vs " + dims_to_string(b.dims()));
  }
  return a.values().dot(b.values());
}

inline double frobenius_norm(const DenseTensor& a) { return std::sqrt(inner(a, a)); }

inline DenseTensor kruskal_reconstruct(const KruskalTensor& k) {
  detail::require(!k.factors.empty(), "kruskal_reconstruct: no factors");
  const Index rank = k.rank();
  for (const auto& f : k.factors) detail::require(f.cols() == rank, "kruskal_reconstruct: factor column counts differ");
  const Vector w = k.effective_weights();
  detail::require(w.size() == rank, "kruskal_reconstruct: weight length differs from rank");
  Vector values = khatri_rao_excluding(k.factors) * w;
  return DenseTensor(k.dims(), std::move(values));
}

/// Unit-norm factor columns, scales absorbed into the weights. The first
/// nonzero entry of every mode-1 column is made non-negative, with the sign
/// pushed into the weight. Columns with zero weight and a zero factor pass
/// through unchanged.
inline KruskalTensor normalize_kruskal(const KruskalTensor& k) {
  KruskalTensor out;
  out.factors = k.factors;
  out.weights = k.effective_weights();
  for (Index r = 0; r < k.rank(); ++r) {
    double scale = 1.0;
    bool zero_column = false;
    for (const auto& f : k.factors) {
      const double n = f.col(r).norm();
      if (n == 0.0) zero_column = true;
      scale *= n;
    }
    if (zero_column) {
      if (out.weights[r] != 0.0) {
        throw DegenerateFactor("normalize_kruskal: component " + std::to_string(r) +
                               " has a zero factor column but nonzero weight");
      }
      continue;
    }
    for (auto& f : out.factors) f.col(r).normalize();
    auto first = out.factors.front().col(r);
    for (Index i = 0; i < first.size(); ++i) {
      if (first[i] != 0.0) {
        if (first[i] < 0.0) {
          first *= -1.0;
          scale = -scale;
        }
        break;
      }
    }
    out.weights[r] *= scale;
  }
  return out;
}

// ---------------------------------------------------------------------------
// Contractions used by the block updates

/// Contracts a tensor (given by its values in vectorization order) with one
/// vector in every mode except `keep`; the result has length dims[keep].
inline Vector contract_all_but(const double* data, const Dims& dims, std::span<const Vector> vs, Index keep) {
  const auto D = static_cast<Index>(dims.size());
  detail::require(static_cast<Index>(vs.size()) == D, "contract_all_but: need one vector per mode");
  Vector cur = Eigen::Map<const Vector>(data, product(dims));
  // Contract trailing modes first (each is then the slowest index), then leading ones.
  Index rows = cur.size();
  for (Index d = D - 1; d > keep; --d) {
    const Index pd = dims[static_cast<std::size_t>(d)];
    rows /= pd;
    Eigen::Map<const Matrix> m(cur.data(), rows, pd);
    Vector next = m * vs[static_cast<std::size_t>(d)];
    cur.swap(next);
  }
  for (Index d = 0; d < keep; ++d) {
    const Index pd = dims[static_cast<std::size_t>(d)];
    Eigen::Map<const Matrix> m(cur.data(), pd, cur.size() / pd);
    Vector next = m.transpose() * vs[static_cast<std::size_t>(d)];
    cur.swap(next);
  }
  return cur;
}

/// Gram matrix of B^{D} ⊙ ... ⊙ B^{1} (skipping `skip`), computed as the
/// Hadamard product of the factor Gram matrices.
inline Matrix khatri_rao_gram(const std::vector<Matrix>& factors, Index skip = -1) {
  detail::require(!factors.empty(), "khatri_rao_gram: no factors");
  const Index rank = factors.front().cols();
  Matrix g = Matrix::Ones(rank, rank);
  for (Index d = 0; d < static_cast<Index>(factors.size()); ++d) {
    if (d == skip) continue;
    const auto& f = factors[static_cast<std::size_t>(d)];
    g = g.cwiseProduct(f.transpose() * f);
  }
  return g;
}

/// Matricized tensor times Khatri-Rao product for a tensor whose first mode
/// indexes subjects and whose remaining modes are feature modes.
///
/// `unfolded` is the mode-1 unfolding (N x prod(feature_dims)), `weights` the
/// N x R subject factor and `factors` the feature-mode factors. Returns
/// X_(d+1) (B_{-d} ⊙ W), i.e. a p_d x R matrix, for feature mode d.
inline Matrix subject_mttkrp(const Matrix& unfolded, const Matrix& weights, const std::vector<Matrix>& factors,
                             const Dims& feature_dims, Index d) {
  const Matrix projected = weights.transpose() * unfolded;  // R x P
  const Index rank = weights.cols();
  Matrix out(feature_dims[static_cast<std::size_t>(d)], rank);
  std::vector<Vector> vs(factors.size());
  for (Index r = 0; r < rank; ++r) {
    for (std::size_t k = 0; k < factors.size(); ++k) {
      vs[k] = static_cast<Index>(k) == d ? Vector() : Vector(factors[k].col(r));
    }
    const Vector row = projected.row(r).transpose();
    out.col(r) = contract_all_but(row.data(), feature_dims, vs, d);
  }
  return out;
}

}  // namespace imtl
