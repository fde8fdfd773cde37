#pragma once

// Shared test helpers: a seeded case generator and slow, loop-based oracles
// written straight from the index definitions.

#include <cmath>
#include <random>
#include <vector>

#include "imtl/imtl.hpp"

namespace testing_support {

using imtl::Dims;
using imtl::Index;
using imtl::Matrix;
using imtl::Vector;

class Gen {
 public:
  explicit Gen(std::uint64_t seed) : eng_(seed) {}

  double uniform(double lo = -1.0, double hi = 1.0) { return std::uniform_real_distribution<double>(lo, hi)(eng_); }
  double normal() { return std::normal_distribution<double>(0.0, 1.0)(eng_); }
  Index integer(Index lo, Index hi) { return std::uniform_int_distribution<Index>(lo, hi)(eng_); }

  Matrix matrix(Index rows, Index cols) {
    Matrix m(rows, cols);
    for (Index j = 0; j < cols; ++j)
      for (Index i = 0; i < rows; ++i) m(i, j) = uniform();
    return m;
  }
  Matrix gaussian(Index rows, Index cols) {
    Matrix m(rows, cols);
    for (Index j = 0; j < cols; ++j)
      for (Index i = 0; i < rows; ++i) m(i, j) = normal();
    return m;
  }
  Vector vector(Index n) { return matrix(n, 1).col(0); }
  Vector unit(Index n) {
    Vector v = gaussian(n, 1).col(0);
    return v / v.norm();
  }
  Dims dims(Index min_d, Index max_d, Index max_size) {
    Dims d(static_cast<std::size_t>(integer(min_d, max_d)));
    for (auto& p : d) p = integer(1, max_size);
    return d;
  }
  imtl::DenseTensor tensor(const Dims& dims) {
    return imtl::DenseTensor(dims, vector(imtl::product(dims)));
  }

 private:
  std::mt19937_64 eng_;
};

/// Zero-based multi-index of a linear position (first index fastest).
inline std::vector<Index> multi_index(Index lin, const Dims& dims) {
  std::vector<Index> idx(dims.size());
  for (std::size_t k = 0; k < dims.size(); ++k) {
    idx[k] = lin % dims[k];
    lin /= dims[k];
  }
  return idx;
}

/// Mode-d unfolding from the element mapping: column
/// j = sum_{d' != d} i_{d'} prod_{d'' < d', d'' != d} p_{d''}.
inline Matrix oracle_matricize(const imtl::DenseTensor& t, Index d) {
  const Dims& dims = t.dims();
  Matrix out(dims[static_cast<std::size_t>(d)], t.size() / dims[static_cast<std::size_t>(d)]);
  for (Index lin = 0; lin < t.size(); ++lin) {
    const auto idx = multi_index(lin, dims);
    Index col = 0, stride = 1;
    for (std::size_t k = 0; k < dims.size(); ++k) {
      if (static_cast<Index>(k) == d) continue;
      col += idx[k] * stride;
      stride *= dims[k];
    }
    out(idx[static_cast<std::size_t>(d)], col) = t.values()[lin];
  }
  return out;
}

/// sum_r w_r prod_d B^d(i_d, r), element by element.
inline imtl::DenseTensor oracle_reconstruct(const std::vector<Matrix>& factors, const Vector& w) {
  Dims dims;
  for (const auto& f : factors) dims.push_back(f.rows());
  imtl::DenseTensor out(dims);
  for (Index lin = 0; lin < out.size(); ++lin) {
    const auto idx = multi_index(lin, dims);
    double s = 0.0;
    for (Index r = 0; r < w.size(); ++r) {
      double p = w[r];
      for (std::size_t k = 0; k < factors.size(); ++k) p *= factors[k](idx[k], r);
      s += p;
    }
    out.values()[lin] = s;
  }
  return out;
}

inline double rel_err(const Matrix& a, const Matrix& b) {
  const double scale = std::max(b.norm(), 1e-300);
  return (a - b).norm() / scale;
}

/// Rank by Gaussian elimination with partial pivoting (independent of SVD).
inline Index elimination_rank(Matrix a, double tol = 1e-9) {
  Index rank = 0;
  const double scale = std::max(1.0, a.cwiseAbs().maxCoeff());
  for (Index c = 0; c < a.cols() && rank < a.rows(); ++c) {
    Index piv = rank;
    for (Index r = rank; r < a.rows(); ++r)
      if (std::abs(a(r, c)) > std::abs(a(piv, c))) piv = r;
    if (std::abs(a(piv, c)) <= tol * scale) continue;
    a.row(piv).swap(a.row(rank));
    for (Index r = rank + 1; r < a.rows(); ++r) a.row(r) -= (a(r, c) / a(rank, c)) * a.row(rank);
    ++rank;
  }
  return rank;
}

/// k-rank by enumerating every column subset as a bitmask.
inline Index oracle_k_rank(const Matrix& a) {
  const Index n = a.cols();
  Index k = n;
  for (unsigned mask = 1; mask < (1u << n); ++mask) {
    Matrix sub(a.rows(), 0);
    for (Index j = 0; j < n; ++j) {
      if (mask & (1u << j)) {
        sub.conservativeResize(Eigen::NoChange, sub.cols() + 1);
        sub.col(sub.cols() - 1) = a.col(j);
      }
    }
    if (elimination_rank(sub) < sub.cols()) k = std::min(k, sub.cols() - 1);
  }
  return k;
}

/// Unpenalized logistic regression by plain gradient descent on raw features.
inline std::pair<double, Vector> gradient_descent_logistic(const Matrix& x, const std::vector<int>& y, int iterations,
                                                            double step) {
  const Index n = x.rows();
  double b0 = 0.0;
  Vector beta = Vector::Zero(x.cols());
  for (int it = 0; it < iterations; ++it) {
    double g0 = 0.0;
    Vector g = Vector::Zero(x.cols());
    for (Index i = 0; i < n; ++i) {
      const double eta = b0 + x.row(i).dot(beta);
      const double r = 1.0 / (1.0 + std::exp(-eta)) - y[static_cast<std::size_t>(i)];
      g0 += r;
      g += r * x.row(i).transpose();
    }
    b0 -= step * g0 / static_cast<double>(n);
    beta -= step * g / static_cast<double>(n);
  }
  return {b0, beta};
}

}  // namespace testing_support
