#pragma once

#include <optional>
#include <vector>

#include "imtl/tensor.hpp"

namespace imtl {

/// N subjects x M modalities of equally-shaped images, optional binary labels
/// and a missing-image mask.
///
/// Images of modality m are kept as one N x P matrix whose row i is the
/// vectorized image of subject i, which is exactly the mode-1 unfolding of
/// the aligned N x p_1 x ... x p_D tensor.
class MultimodalDataset {
 public:
  MultimodalDataset() = default;

  MultimodalDataset(Index n_subjects, Index n_modalities, Dims dims)
      : dims_(std::move(dims)), n_(n_subjects), m_(n_modalities) {
    detail::require(n_ >= 1 && m_ >= 1, "MultimodalDataset: need at least one subject and one modality");
    DenseTensor probe(dims_);  // validates dims
    images_.assign(static_cast<std::size_t>(m_), Matrix::Zero(n_, probe.size()));
    missing_ = Eigen::Array<bool, Eigen::Dynamic, Eigen::Dynamic>::Constant(n_, m_, false);
  }

  Index n_subjects() const noexcept { return n_; }
  Index n_modalities() const noexcept { return m_; }
  const Dims& dims() const noexcept { return dims_; }
  Index image_size() const { return product(dims_); }

  const Matrix& modality(Index m) const { return images_.at(static_cast<std::size_t>(m)); }
  Matrix& modality(Index m) { return images_.at(static_cast<std::size_t>(m)); }

  DenseTensor image(Index i, Index m) const {
    check_cell(i, m);
    return DenseTensor(dims_, modality(m).row(i).transpose());
  }

  void set_image(Index i, Index m, const DenseTensor& t) {
    check_cell(i, m);
    if (t.dims() != dims_) {
      throw ContractViolation("set_image: image dims " + dims_to_string(t.dims()) + " differ from dataset dims " +
                              dims_to_string(dims_));
    }
    modality(m).row(i) = t.values().transpose();
  }

  bool is_present(Index i, Index m) const { return !missing_(i, m); }
  void set_missing(Index i, Index m, bool missing = true) {
    check_cell(i, m);
    missing_(i, m) = missing;
    if (missing) modality(m).row(i).setZero();
  }
  const Eigen::Array<bool, Eigen::Dynamic, Eigen::Dynamic>& missing_mask() const { return missing_; }
  bool has_missing() const { return missing_.any(); }

  /// |I|: number of observed single-modality images.
  Index present_count() const { return n_ * m_ - missing_.count(); }

  Index present_modalities(Index i) const { return m_ - missing_.row(i).count(); }

  const std::optional<std::vector<int>>& labels() const noexcept { return labels_; }
  void set_labels(std::vector<int> labels) {
    detail::require(static_cast<Index>(labels.size()) == n_, "set_labels: one label per subject required");
    for (int y : labels) detail::require(y == 0 || y == 1, "set_labels: labels must be 0 or 1");
    labels_ = std::move(labels);
  }

  bool all_finite() const {
    for (const auto& x : images_)
      if (!x.allFinite()) return false;
    return true;
  }

  /// Subjects of `parts` stacked in order; all parts must share dims and modality count.
  static MultimodalDataset concatenate(const std::vector<const MultimodalDataset*>& parts) {
    detail::require(!parts.empty(), "concatenate: nothing to concatenate");
    Index total = 0;
    bool labelled = true;
    for (const auto* p : parts) {
      detail::require(p->dims() == parts.front()->dims() && p->n_modalities() == parts.front()->n_modalities(),
                      "concatenate: incompatible datasets");
      total += p->n_subjects();
      labelled = labelled && p->labels().has_value();
    }
    MultimodalDataset out(total, parts.front()->n_modalities(), parts.front()->dims());
    std::vector<int> labels;
    Index offset = 0;
    for (const auto* p : parts) {
      for (Index m = 0; m < out.m_; ++m) out.modality(m).middleRows(offset, p->n_subjects()) = p->modality(m);
      out.missing_.middleRows(offset, p->n_subjects()) = p->missing_;
      if (labelled) labels.insert(labels.end(), p->labels()->begin(), p->labels()->end());
      offset += p->n_subjects();
    }
    if (labelled) out.labels_ = std::move(labels);
    return out;
  }

  MultimodalDataset subset(const std::vector<Index>& subjects) const {
    MultimodalDataset out(static_cast<Index>(subjects.size()), m_, dims_);
    std::vector<int> labels;
    for (std::size_t k = 0; k < subjects.size(); ++k) {
      const Index i = subjects[k];
      detail::require(i >= 0 && i < n_, "subset: subject index out of range");
      for (Index m = 0; m < m_; ++m) out.modality(m).row(static_cast<Index>(k)) = modality(m).row(i);
      out.missing_.row(static_cast<Index>(k)) = missing_.row(i);
      if (labels_) labels.push_back((*labels_)[static_cast<std::size_t>(i)]);
    }
    if (labels_) out.labels_ = std::move(labels);
    return out;
  }

 private:
  void check_cell(Index i, Index m) const {
    if (i < 0 || i >= n_ || m < 0 || m >= m_) {
      throw ContractViolation("MultimodalDataset: cell (" + std::to_string(i) + ", " + std::to_string(m) +
                              ") out of range");
    }
  }

  Dims dims_;
  Index n_ = 0;
  Index m_ = 0;
  std::vector<Matrix> images_;
  Eigen::Array<bool, Eigen::Dynamic, Eigen::Dynamic> missing_;
  std::optional<std::vector<int>> labels_;
};

}  // namespace imtl
