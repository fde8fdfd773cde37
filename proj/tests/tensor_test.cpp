#include <gtest/gtest.h>

#include "support.hpp"

using namespace imtl;
using testing_support::Gen;

namespace {

DenseTensor counting_cube() {
  // x_{i1 i2 i3} = i1 + 2(i2-1) + 4(i3-1), one-based.
  DenseTensor t({2, 2, 2});
  for (Index a = 0; a < 2; ++a)
    for (Index b = 0; b < 2; ++b)
      for (Index c = 0; c < 2; ++c) t({a, b, c}) = static_cast<double>((a + 1) + 2 * b + 4 * c);
  return t;
}

Matrix rows(std::initializer_list<std::initializer_list<double>> r) {
  Matrix m(static_cast<Index>(r.size()), static_cast<Index>(r.begin()->size()));
  Index i = 0;
  for (const auto& row : r) {
    Index j = 0;
    for (double v : row) m(i, j++) = v;
    ++i;
  }
  return m;
}

}  // namespace

TEST(DenseTensor, RejectsBadShapes) {
  EXPECT_THROW(DenseTensor(Dims{}), ContractViolation);
  EXPECT_THROW(DenseTensor(Dims{2, 0}), ContractViolation);
  EXPECT_THROW(DenseTensor(Dims{2, 2}, Vector::Zero(3)), ContractViolation);
}

TEST(Matricize, MatrixModeOneIsItself) {
  DenseTensor t({2, 2}, (Vector(4) << 1, 2, 3, 4).finished());
  EXPECT_EQ(matricize(t, 0), rows({{1, 3}, {2, 4}}));
}

TEST(Matricize, CountingCube) {
  const DenseTensor t = counting_cube();
  EXPECT_EQ(matricize(t, 0), rows({{1, 3, 5, 7}, {2, 4, 6, 8}}));
  EXPECT_EQ(matricize(t, 1), rows({{1, 2, 5, 6}, {3, 4, 7, 8}}));
  EXPECT_EQ(matricize(t, 2), testing_support::oracle_matricize(t, 2));
}

TEST(Matricize, ModeOutOfRange) {
  const DenseTensor t = counting_cube();
  EXPECT_THROW(matricize(t, 3), ContractViolation);
  EXPECT_THROW(matricize(t, -1), ContractViolation);
}

TEST(Vectorize, CountingCubeAndOneWay) {
  EXPECT_EQ(vectorize(counting_cube()), (Vector(8) << 1, 2, 3, 4, 5, 6, 7, 8).finished());
  const Vector v = (Vector(3) << 4, -1, 2).finished();
  EXPECT_EQ(vectorize(DenseTensor({3}, v)), v);
  Gen g(3);
  const Vector w = g.vector(24);
  EXPECT_EQ(vectorize(reshape(w, {2, 3, 4})), w);
}

TEST(Kronecker, Examples) {
  EXPECT_EQ(kronecker(rows({{1, 2}}), rows({{3, 4}})), rows({{3, 4, 6, 8}}));
  Gen g(5);
  const Matrix b = g.matrix(2, 3);
  Matrix expected = Matrix::Zero(4, 6);
  expected.block(0, 0, 2, 3) = b;
  expected.block(2, 3, 2, 3) = b;
  EXPECT_EQ(kronecker(Matrix::Identity(2, 2), b), expected);
}

TEST(Kronecker, MixedProduct) {
  Gen g(7);
  for (int k = 0; k < 20; ++k) {
    const Matrix a = g.matrix(2, 2), b = g.matrix(2, 2), c = g.matrix(2, 2), d = g.matrix(2, 2);
    EXPECT_LT(testing_support::rel_err(kronecker(a, b) * kronecker(c, d), kronecker(a * c, b * d)), 1e-14);
  }
}

TEST(KhatriRao, Examples) {
  EXPECT_EQ(khatri_rao(Matrix::Identity(2, 2), Matrix::Identity(2, 2)), rows({{1, 0}, {0, 0}, {0, 0}, {0, 1}}));
  EXPECT_EQ(khatri_rao(rows({{1, 2}}), rows({{3, 4}})), rows({{3, 8}}));
  EXPECT_THROW(khatri_rao(Matrix::Ones(2, 2), Matrix::Ones(2, 3)), ContractViolation);
}

TEST(KhatriRao, GramIdentity) {
  Gen g(11);
  for (int k = 0; k < 50; ++k) {
    const Matrix a = g.matrix(3, 2), b = g.matrix(3, 2);
    const Matrix kr = khatri_rao(a, b);
    EXPECT_LT(testing_support::rel_err(kr.transpose() * kr, (a.transpose() * a).cwiseProduct(b.transpose() * b)), 1e-12);
  }
}

TEST(OuterRank1, Examples) {
  const DenseTensor ones = outer_rank1({Vector::Ones(2), Vector::Ones(3), Vector::Ones(2)});
  EXPECT_EQ(ones.values(), Vector::Ones(12));
  const DenseTensor t = outer_rank1({(Vector(2) << 1, 2).finished(), (Vector(2) << 3, 4).finished()});
  EXPECT_EQ(matricize(t, 0), rows({{3, 4}, {6, 8}}));
  EXPECT_THROW(outer_rank1(std::span<const Vector>{}), ContractViolation);
}

TEST(OuterRank1, NormIsProductOfNorms) {
  Gen g(13);
  for (int k = 0; k < 50; ++k) {
    std::vector<Vector> vs;
    double expected = 1.0;
    for (Index p : g.dims(1, 4, 5)) {
      vs.push_back(g.vector(p));
      expected *= vs.back().norm();
    }
    EXPECT_NEAR(frobenius_norm(outer_rank1(vs)), expected, 1e-12 * expected);
  }
}

TEST(Inner, Examples) {
  Gen g(17);
  const DenseTensor a = g.tensor({3, 2});
  EXPECT_EQ(inner(a, DenseTensor({3, 2})), 0.0);
  EXPECT_NEAR(inner(a, a), std::pow(frobenius_norm(a), 2), 1e-14);
  const DenseTensor x({2, 2}, (Vector(4) << 1, 3, 2, 4).finished());
  EXPECT_EQ(inner(x, DenseTensor({2, 2}, Vector::Ones(4))), 10.0);
  EXPECT_THROW(inner(a, DenseTensor({2, 3})), ContractViolation);
}

TEST(KruskalReconstruct, RankOneAndZeroWeights) {
  Gen g(19);
  const Matrix a = g.matrix(3, 1), b = g.matrix(4, 1);
  const DenseTensor k = kruskal_reconstruct({Vector(), {a, b}});
  EXPECT_LT((k.values() - outer_rank1({Vector(a.col(0)), Vector(b.col(0))}).values()).norm(), 1e-15);
  const DenseTensor z = kruskal_reconstruct({Vector::Zero(2), {g.matrix(3, 2), g.matrix(2, 2)}});
  EXPECT_EQ(z.values(), Vector::Zero(6));
}

TEST(KruskalReconstruct, MatricizationIdentity) {
  Gen g(23);
  for (int k = 0; k < 30; ++k) {
    std::vector<Matrix> f{g.matrix(3, 3), g.matrix(4, 3), g.matrix(2, 3)};
    const Vector w = g.vector(3);
    const DenseTensor t = kruskal_reconstruct({w, f});
    EXPECT_LT(testing_support::rel_err(t.values(), testing_support::oracle_reconstruct(f, w).values()), 1e-12);
    for (Index d = 0; d < 3; ++d) {
      const Matrix expected = f[static_cast<std::size_t>(d)] * w.asDiagonal() * khatri_rao_excluding(f, d).transpose();
      EXPECT_LT(testing_support::rel_err(matricize(t, d), expected), 1e-12);
    }
  }
}

TEST(NormalizeKruskal, AbsorbsScales) {
  Gen g(29);
  const Vector a = g.unit(3), b = g.unit(4);
  KruskalTensor k{Vector::Ones(1), {Matrix(2.0 * a), Matrix(3.0 * b)}};
  const KruskalTensor n = normalize_kruskal(k);
  EXPECT_NEAR(std::abs(n.weights[0]), 6.0, 1e-12);
  EXPECT_NEAR(n.factors[0].col(0).norm(), 1.0, 1e-12);
  EXPECT_NEAR(n.factors[1].col(0).norm(), 1.0, 1e-12);
  EXPECT_LT((kruskal_reconstruct(n).values() - kruskal_reconstruct(k).values()).norm(), 1e-10);
  for (Index i = 0; i < 3; ++i) {
    if (n.factors[0](i, 0) != 0.0) {
      EXPECT_GT(n.factors[0](i, 0), 0.0);
      break;
    }
  }
}

TEST(NormalizeKruskal, AlreadyNormalizedAndZeroColumns) {
  Gen g(31);
  Matrix a(3, 2), b(2, 2);
  a << g.unit(3), g.unit(3);
  b << g.unit(2), g.unit(2);
  a.col(0) *= a(0, 0) < 0 ? -1.0 : 1.0;
  a.col(1) *= a(0, 1) < 0 ? -1.0 : 1.0;
  const KruskalTensor same = normalize_kruskal({Vector::Ones(2), {a, b}});
  EXPECT_LT((same.factors[0] - a).norm(), 1e-15);
  EXPECT_LT((same.weights - Vector::Ones(2)).norm(), 1e-15);

  Matrix az = a;
  az.col(1).setZero();
  const KruskalTensor z = normalize_kruskal({(Vector(2) << 1.5, 0.0).finished(), {az, b}});
  EXPECT_EQ(z.factors[0].col(1), Vector::Zero(3));
  EXPECT_EQ(z.weights[1], 0.0);
  EXPECT_THROW(normalize_kruskal({Vector::Ones(2), {az, b}}), DegenerateFactor);
}

TEST(TensorProperties, MatricizationRoundTripIsExact) {
  Gen g(37);
  for (int k = 0; k < 200; ++k) {
    const DenseTensor t = g.tensor(g.dims(1, 4, 5));
    for (Index d = 0; d < t.ndim(); ++d) {
      const Matrix m = matricize(t, d);
      EXPECT_EQ(m, testing_support::oracle_matricize(t, d));
      EXPECT_TRUE(fold(m, t.dims(), d) == t);
    }
  }
}

TEST(TensorProperties, VectorizeIsModeOneColumnMajor) {
  Gen g(41);
  for (int k = 0; k < 20; ++k) {
    const DenseTensor t = g.tensor({3, 4, 2});
    const Matrix m = matricize(t, 0);
    EXPECT_EQ(vectorize(t), Eigen::Map<const Vector>(m.data(), m.size()));
  }
}

TEST(Contraction, MatchesDenseOracle) {
  Gen g(43);
  for (int k = 0; k < 50; ++k) {
    const DenseTensor t = g.tensor(g.dims(2, 4, 4));
    std::vector<Vector> vs;
    for (Index p : t.dims()) vs.push_back(g.vector(p));
    for (Index keep = 0; keep < t.ndim(); ++keep) {
      Vector expected = Vector::Zero(t.dim(keep));
      for (Index lin = 0; lin < t.size(); ++lin) {
        const auto idx = testing_support::multi_index(lin, t.dims());
        double p = t.values()[lin];
        for (std::size_t d = 0; d < idx.size(); ++d)
          if (static_cast<Index>(d) != keep) p *= vs[d][idx[d]];
        expected[idx[static_cast<std::size_t>(keep)]] += p;
      }
      EXPECT_LT((contract_all_but(t.values().data(), t.dims(), vs, keep) - expected).norm(), 1e-12 * (1 + expected.norm()));
    }
  }
}
