#pragma once

#include <cstdint>
#include <optional>
#include <vector>

#include "imtl/tensor.hpp"

namespace imtl {

struct FitOptions {
  int restarts = 5;
  std::uint64_t seed = 0;

  /// Outer iterations (multilayer fit, or HOCPD sweeps).
  int max_iterations = 100;
  /// Cap on sweeps of each inner loop (modality layers, individual layers).
  int max_inner_iterations = 200;

  /// HOCPD: stop once the relative objective change falls to this value.
  double tolerance = 1e-8;

  // Multilayer fit stopping thresholds.
  double modality_tolerance = 1e-4;
  double individual_tolerance = 1e-4;
  double outer_tolerance = 1e-3;

  /// After the stopping rules fire, keep sweeping until no single block can
  /// improve the objective by more than this fraction of its value.
  /// Non-positive disables the polishing phase.
  double stationarity_tolerance = 1e-6;
  int max_polish_sweeps = 20000;

  /// Relative ridge used to stabilize block solves: eps = ridge * trace(A) / dim(A).
  double ridge = 1e-8;

  /// Keep every individual layer at zero (plain coupled CP).
  bool freeze_individual = false;

  /// Record the objective after every applied block update (expensive; tests only).
  bool record_block_objectives = false;
};

struct FitReport {
  /// Objective after each outer iteration (index 0 is the starting point).
  std::vector<double> objective_trace;
  /// Objective after each applied block update, when requested.
  std::vector<double> block_objectives;

  /// MBI modes applied per outer iteration: one entry per modality (last
  /// inner sweep) and one per subject (last applied individual-layer mode).
  std::vector<std::vector<int>> modality_modes;
  std::vector<std::vector<int>> subject_modes;
  /// HOCPD: mode applied in each sweep.
  std::vector<int> hocpd_modes;

  int iterations = 0;
  int polish_sweeps = 0;
  bool modality_converged = false;
  bool individual_converged = false;
  bool outer_converged = false;
  bool stationary = false;
  /// Largest single-block improvement at termination, relative to the objective.
  double max_block_improvement = 0.0;

  /// max |<B_r^(m), S_i>| over normalized layers after finalization.
  double max_orthogonality = 0.0;

  int best_restart = 0;
  std::vector<double> restart_objectives;
  int stabilized_solves = 0;
  double seconds = 0.0;

  double final_objective() const { return objective_trace.empty() ? 0.0 : objective_trace.back(); }
};

namespace detail {

/// Solves A X = B for symmetric positive semidefinite A.
///
/// The factorization is taken of A + eps I with eps = ridge * trace(A)/n, and
/// the answer is refined against the unmodified A, so well-posed systems get
/// the exact minimizer while singular ones stay bounded. Returns nullopt when
/// A is identically zero. With ridge == 0 a singular A throws IllConditioned.
inline std::optional<Matrix> stabilized_solve(const Matrix& A, const Matrix& B, double ridge, int* stabilized = nullptr) {
  const Index n = A.rows();
  const double trace = A.trace();
  if (!(trace > 0.0)) {
    if (A.cwiseAbs().maxCoeff() == 0.0 || n == 0) return std::nullopt;
  }
  const double eps = ridge > 0.0 ? ridge * std::abs(trace) / static_cast<double>(n) : 0.0;
  Matrix shifted = A;
  shifted.diagonal().array() += eps;
  Eigen::LLT<Matrix> llt(shifted);
  if (llt.info() != Eigen::Success || (eps == 0.0 && llt.rcond() < 1e-15)) {
    if (eps == 0.0) throw IllConditioned("stabilized_solve: singular normal matrix and no ridge");
    // Fall back to a heavier shift.
    shifted.diagonal().array() += 1e3 * eps;
    llt.compute(shifted);
    if (llt.info() != Eigen::Success) throw IllConditioned("stabilized_solve: factorization failed");
  }
  if (stabilized && llt.rcond() < 1e-12) ++*stabilized;
  Matrix x = llt.solve(B);
  if (eps > 0.0) {
    for (int k = 0; k < 3; ++k) x += llt.solve(B - A * x);
  }
  return x;
}

}  // namespace detail
}  // namespace imtl
