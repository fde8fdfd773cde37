#pragma once

// Four-modality synthetic imaging data with sparse, randomly located signal
// pixels shared across a subject's modalities and modality-specific
// backgrounds:
//
//   X_i^(m) = A_i^(m) + B_i + N_i.
//
// Draw order (fixed, so datasets are reproducible from the seed):
//   1. background factors a^(m),1_r ~ N(0, I), a^(m),2_r ~ N(0, 0.5 I) for
//      m = 3, 4 and r = 1..rank, modality by modality, component by
//      component, mode 1 before mode 2;
//   2. training, validation and test subjects, each subject drawing
//      label, signal count, signal pixels, shared noise image, modality-1
//      background, modality-2 level, modality-3 weights, modality-4 weights
//      (and, with per_subject_background, fresh background factors).

#include <cstdint>
#include <vector>

#include "imtl/dataset.hpp"
#include "imtl/random.hpp"

namespace imtl {

struct SimConfig {
  Index n_train = 60;
  Index n_validation = 60;
  Index n_test = 60;
  Index image_size = 64;  // marginal dimension; images are image_size x image_size
  double prevalence = 0.4;
  double signal_value = 2.0;
  double mean_signal_cancer = 25.0;
  double mean_signal_normal = 5.0;
  double noise_sd = 0.2;
  double background_sd = 0.1;
  Index background_rank = 5;
  bool per_subject_background = false;
  std::uint64_t seed = 0;

  void validate() const {
    detail::require(n_train >= 1 && n_validation >= 1 && n_test >= 1, "SimConfig: subject counts must be positive");
    detail::require(image_size >= 1, "SimConfig: image_size must be positive");
    detail::require(prevalence > 0.0 && prevalence < 1.0, "SimConfig: prevalence must lie in (0, 1)");
    detail::require(mean_signal_cancer > 0.0 && mean_signal_normal > 0.0, "SimConfig: Poisson means must be positive");
    detail::require(noise_sd >= 0.0 && background_sd >= 0.0, "SimConfig: standard deviations must be non-negative");
    detail::require(background_rank >= 1, "SimConfig: background_rank must be positive");
  }
};

struct SimulatedData {
  MultimodalDataset train;
  MultimodalDataset validation;
  MultimodalDataset test;
};

namespace detail {

struct BackgroundFactors {
  // [modality 3 or 4][component] -> (mode-1 vector, mode-2 vector)
  std::vector<std::vector<std::pair<Vector, Vector>>> factors;
};

inline BackgroundFactors draw_background(Rng& rng, const SimConfig& c) {
  BackgroundFactors bg;
  const double sd2 = std::sqrt(0.5);
  for (int m = 0; m < 2; ++m) {
    std::vector<std::pair<Vector, Vector>> comps;
    for (Index r = 0; r < c.background_rank; ++r) {
      Vector a1 = rng.normal_vector(c.image_size, 1.0);
      Vector a2 = rng.normal_vector(c.image_size, sd2);
      comps.emplace_back(std::move(a1), std::move(a2));
    }
    bg.factors.push_back(std::move(comps));
  }
  return bg;
}

/// `count` distinct indices from [0, n) by a partial Fisher-Yates shuffle.
inline std::vector<Index> distinct_indices(Rng& rng, Index n, Index count) {
  std::vector<Index> pool(static_cast<std::size_t>(n));
  for (Index k = 0; k < n; ++k) pool[static_cast<std::size_t>(k)] = k;
  for (Index k = 0; k < count; ++k) {
    const Index j = k + static_cast<Index>(rng.uniform_index(static_cast<std::uint64_t>(n - k)));
    std::swap(pool[static_cast<std::size_t>(k)], pool[static_cast<std::size_t>(j)]);
  }
  pool.resize(static_cast<std::size_t>(count));
  return pool;
}

inline MultimodalDataset draw_subjects(Rng& rng, const SimConfig& c, Index n, const BackgroundFactors& shared) {
  const Index D = c.image_size;
  const Index P = D * D;
  MultimodalDataset data(n, 4, {D, D});
  std::vector<int> labels;
  for (Index i = 0; i < n; ++i) {
    const int y = rng.bernoulli(c.prevalence) ? 1 : 0;
    labels.push_back(y);
    std::uint64_t count;
    do {
      count = rng.poisson(y == 1 ? c.mean_signal_cancer : c.mean_signal_normal);
    } while (count > static_cast<std::uint64_t>(P));
    Vector common = Vector::Zero(P);
    for (Index k : distinct_indices(rng, P, static_cast<Index>(count))) common[k] = c.signal_value;
    common += rng.normal_vector(P, c.noise_sd);

    const Vector bg1 = rng.normal_vector(P, c.background_sd);
    const double level = c.background_sd * rng.normal();
    std::vector<Vector> weights;
    for (int m = 0; m < 2; ++m) weights.push_back(rng.normal_vector(c.background_rank, c.background_sd));
    const BackgroundFactors own = c.per_subject_background ? draw_background(rng, c) : BackgroundFactors{};
    const BackgroundFactors& bg = c.per_subject_background ? own : shared;

    data.modality(0).row(i) = (common + bg1).transpose();
    data.modality(1).row(i) = (common + Vector::Constant(P, level)).transpose();
    for (int m = 0; m < 2; ++m) {
      Matrix low = Matrix::Zero(D, D);
      const auto& comps = bg.factors[static_cast<std::size_t>(m)];
      for (Index r = 0; r < c.background_rank; ++r)
        low.noalias() += weights[static_cast<std::size_t>(m)][r] * comps[static_cast<std::size_t>(r)].first *
                         comps[static_cast<std::size_t>(r)].second.transpose();
      data.modality(2 + m).row(i) = (common + Eigen::Map<const Vector>(low.data(), P)).transpose();
    }
  }
  data.set_labels(std::move(labels));
  return data;
}

}  // namespace detail

inline SimulatedData generate(const SimConfig& config) {
  config.validate();
  Rng rng(config.seed);
  const detail::BackgroundFactors bg =
      config.per_subject_background ? detail::BackgroundFactors{} : detail::draw_background(rng, config);
  MultimodalDataset train = detail::draw_subjects(rng, config, config.n_train, bg);
  MultimodalDataset validation = detail::draw_subjects(rng, config, config.n_validation, bg);
  MultimodalDataset test = detail::draw_subjects(rng, config, config.n_test, bg);
  return {std::move(train), std::move(validation), std::move(test)};
}

}  // namespace imtl
