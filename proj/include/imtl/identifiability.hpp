#pragma once

// Kruskal rank and the sufficient condition for uniqueness of the multilayer
// decomposition: with B~^d = [b_1^d ... b_R^d s_1^d ... s_n^d] for a subset of
// n subjects, the layers are unique (up to scaling and permutation) when
//
//   sum_d k-rank(B~^d) >= 2R + n + D.

#include <algorithm>
#include <vector>

#include "imtl/multilayer.hpp"

namespace imtl {

struct KRank {
  Index value = 0;
  /// True when the column count exceeded the brute-force cap and `value` is
  /// the generic bound min(rank, columns).
  bool generic_estimate = false;
};

namespace detail {

inline Index numerical_rank(const Matrix& a) {
  if (a.cols() == 0 || a.rows() == 0) return 0;
  Eigen::JacobiSVD<Matrix> svd(a);
  const Vector& sv = svd.singularValues();
  if (sv.size() == 0 || sv[0] == 0.0) return 0;
  const double tol = 1e-10 * sv[0];
  return (sv.array() > tol).count();
}

/// Calls f(subset) for every k-subset of {0..n-1} in lexicographic order; stops when f returns false.
template <class F>
bool for_each_subset(Index n, Index k, F&& f) {
  std::vector<Index> idx(static_cast<std::size_t>(k));
  for (Index j = 0; j < k; ++j) idx[static_cast<std::size_t>(j)] = j;
  while (true) {
    if (!f(idx)) return false;
    Index pos = k - 1;
    while (pos >= 0 && idx[static_cast<std::size_t>(pos)] == n - k + pos) --pos;
    if (pos < 0) return true;
    ++idx[static_cast<std::size_t>(pos)];
    for (Index j = pos + 1; j < k; ++j) idx[static_cast<std::size_t>(j)] = idx[static_cast<std::size_t>(j - 1)] + 1;
  }
}

}  // namespace detail

inline constexpr Index kBruteForceColumnCap = 20;

/// Largest k such that every k columns are linearly independent.
inline KRank k_rank(const Matrix& a) {
  if (a.cols() < 1) throw ContractViolation("k_rank: matrix has no columns");
  for (Index j = 0; j < a.cols(); ++j)
    if (a.col(j).cwiseAbs().maxCoeff() == 0.0) return {0, false};
  const Index full = detail::numerical_rank(a);
  if (a.cols() > kBruteForceColumnCap) return {std::min(full, a.cols()), true};
  const Index upper = std::min(full, a.cols());
  Index k = 0;
  for (Index size = 1; size <= upper; ++size) {
    Matrix sub(a.rows(), size);
    const bool all_independent = detail::for_each_subset(a.cols(), size, [&](const std::vector<Index>& cols) {
      for (Index j = 0; j < size; ++j) sub.col(j) = a.col(cols[static_cast<std::size_t>(j)]);
      return detail::numerical_rank(sub) == size;
    });
    if (!all_independent) break;
    k = size;
  }
  return {k, false};
}

struct ModalityIdentifiability {
  std::vector<KRank> k_ranks;  // one per mode
  Index total = 0;
  bool satisfied = false;
};

struct IdentifiabilityReport {
  std::vector<ModalityIdentifiability> modalities;
  Index threshold = 0;  // 2R + n + D
  bool satisfied = false;
  bool generic_estimate = false;
  std::vector<Index> subjects;
};

/// B~^d for modality m: population factor columns followed by the chosen subjects' individual vectors.
inline Matrix integrated_factor(const MultilayerModel& model, Index m, Index d, const std::vector<Index>& subjects) {
  const Matrix& b = model.B.at(static_cast<std::size_t>(m)).at(static_cast<std::size_t>(d));
  Matrix out(b.rows(), b.cols() + static_cast<Index>(subjects.size()));
  out.leftCols(b.cols()) = b;
  for (std::size_t k = 0; k < subjects.size(); ++k)
    out.col(b.cols() + static_cast<Index>(k)) = model.S.at(static_cast<std::size_t>(subjects[k])).at(static_cast<std::size_t>(d));
  return out;
}

/// Checks the condition once per modality; overall satisfied when every modality is.
inline IdentifiabilityReport check_identifiability(const MultilayerModel& model, const std::vector<Index>& subjects) {
  const Index n = static_cast<Index>(subjects.size());
  if (n < 2 || n > model.n_subjects()) {
    throw ContractViolation("check_identifiability: subset size " + std::to_string(n) + " outside [2, " +
                            std::to_string(model.n_subjects()) + "]");
  }
  for (Index i : subjects) {
    if (i < 0 || i >= model.n_subjects()) throw ContractViolation("check_identifiability: subject index out of range");
  }
  IdentifiabilityReport rep;
  rep.subjects = subjects;
  rep.threshold = 2 * model.rank() + n + model.ndim();
  rep.satisfied = true;
  for (Index m = 0; m < model.n_modalities(); ++m) {
    ModalityIdentifiability mi;
    for (Index d = 0; d < model.ndim(); ++d) {
      const KRank k = k_rank(integrated_factor(model, m, d, subjects));
      rep.generic_estimate = rep.generic_estimate || k.generic_estimate;
      mi.k_ranks.push_back(k);
      mi.total += k.value;
    }
    mi.satisfied = mi.total >= rep.threshold;
    rep.satisfied = rep.satisfied && mi.satisfied;
    rep.modalities.push_back(std::move(mi));
  }
  return rep;
}

/// First n subjects.
inline IdentifiabilityReport check_identifiability(const MultilayerModel& model, Index n) {
  std::vector<Index> subjects(static_cast<std::size_t>(std::max<Index>(n, 0)));
  for (Index k = 0; k < n; ++k) subjects[static_cast<std::size_t>(k)] = k;
  return check_identifiability(model, subjects);
}

}  // namespace imtl
