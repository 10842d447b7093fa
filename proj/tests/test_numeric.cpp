#include <gtest/gtest.h>

#include <algorithm>
#include <cmath>
#include <numeric>

#include "marglik/numeric.hpp"
#include "support.hpp"

using namespace marglik;
using marglik::testing::random_matrix;
using marglik::testing::random_spd;

namespace {

double sum_log_eigs(const DenseMatrix& a) {
  double s = 0.0;
  for (double e : sym_eigendecompose(a, false).eigenvalues) s += std::log(e);
  return s;
}

}  // namespace

TEST(Eigen, IdentityHasUnitSpectrum) {
  const auto s = sym_eigendecompose(DenseMatrix::identity(3));
  for (double e : s.eigenvalues) EXPECT_NEAR(e, 1.0, 1e-14);
}

TEST(Eigen, TwoByTwoMatchesCharacteristicRoots) {
  // λ² − 4λ + 3 = 0
  const auto s = sym_eigendecompose(DenseMatrix::from_rows({{2, 1}, {1, 2}}));
  ASSERT_EQ(s.eigenvalues.size(), 2u);
  EXPECT_NEAR(s.eigenvalues[0], 1.0, 1e-12);
  EXPECT_NEAR(s.eigenvalues[1], 3.0, 1e-12);
}

TEST(Eigen, DiagonalInputKeepsValuesAndAxisVectors) {
  const auto s = sym_eigendecompose(DenseMatrix::from_rows({{9, 0}, {0, 4}}));
  EXPECT_DOUBLE_EQ(s.eigenvalues[0], 4.0);
  EXPECT_DOUBLE_EQ(s.eigenvalues[1], 9.0);
  const auto& v = *s.eigenvectors;
  EXPECT_NEAR(std::abs(v(1, 0)), 1.0, 1e-14);
  EXPECT_NEAR(std::abs(v(0, 1)), 1.0, 1e-14);
  EXPECT_NEAR(v(0, 0), 0.0, 1e-14);
}

TEST(Eigen, ReconstructionAndOrthonormality) {
  std::mt19937_64 rng(7);
  for (std::size_t n : {1u, 2u, 5u, 17u, 40u}) {
    const DenseMatrix b = random_matrix(n, n, rng);
    const DenseMatrix a = b + b.transposed();
    const auto s = sym_eigendecompose(a);
    EXPECT_TRUE(std::is_sorted(s.eigenvalues.begin(), s.eigenvalues.end()));
    const auto& v = *s.eigenvectors;
    DenseMatrix rec(n, n);
    for (std::size_t i = 0; i < n; ++i)
      for (std::size_t j = 0; j < n; ++j)
        for (std::size_t k = 0; k < n; ++k) rec(i, j) += v(i, k) * s.eigenvalues[k] * v(j, k);
    EXPECT_LE((rec - a).max_abs(), 1e-8 * std::max(1.0, a.max_abs()));
    const DenseMatrix vtv = gram(v);
    EXPECT_LE((vtv - DenseMatrix::identity(n)).max_abs(), 1e-8);
  }
}

TEST(Eigen, PermutationConsistent) {
  std::mt19937_64 rng(11);
  const std::size_t n = 12;
  const DenseMatrix a = random_spd(n, rng);
  std::vector<std::size_t> perm(n);
  std::iota(perm.begin(), perm.end(), 0);
  std::shuffle(perm.begin(), perm.end(), rng);
  DenseMatrix pa(n, n);
  for (std::size_t i = 0; i < n; ++i)
    for (std::size_t j = 0; j < n; ++j) pa(i, j) = a(perm[i], perm[j]);
  const auto e1 = sym_eigendecompose(a, false).eigenvalues;
  const auto e2 = sym_eigendecompose(pa, false).eigenvalues;
  for (std::size_t i = 0; i < n; ++i) EXPECT_NEAR(e1[i], e2[i], 1e-8);
}

TEST(Eigen, RejectsNonSquareAndAsymmetric) {
  EXPECT_THROW(sym_eigendecompose(DenseMatrix(2, 3)), DimensionError);
  EXPECT_THROW(sym_eigendecompose(DenseMatrix::from_rows({{1, 2}, {0, 1}})), SymmetryError);
}

TEST(Cholesky, LogdetOfIdentityIsZero) { EXPECT_EQ(cholesky_logdet(DenseMatrix::identity(6)), 0.0); }

TEST(Cholesky, LogdetOfDiagonal) {
  const Vector d{2, 3};
  EXPECT_NEAR(cholesky_logdet(DenseMatrix::diagonal(d)), 1.791759469228055, 1e-12);
}

TEST(Cholesky, LogdetMatchesEigenSum) {
  std::mt19937_64 rng(3);
  for (std::size_t n : {5u, 30u, 200u}) {
    const DenseMatrix a = random_spd(n, rng);
    const double ref = sum_log_eigs(a);
    EXPECT_LE(std::abs(cholesky_logdet(a) - ref), 1e-7 * std::abs(ref));
  }
}

TEST(Cholesky, NotPositiveDefiniteCarriesPivot) {
  const DenseMatrix a = DenseMatrix::from_rows({{1, 0, 0}, {0, 2, 0}, {0, 0, -1}});
  try {
    cholesky_logdet(a);
    FAIL() << "expected NotPositiveDefiniteError";
  } catch (const NotPositiveDefiniteError& e) {
    EXPECT_EQ(e.pivot(), 2u);
  }
}

TEST(Solve, IdentityAndDiagonal) {
  const Vector b{1.5, -2.0, 3.0};
  EXPECT_EQ(psd_solve(DenseMatrix::identity(3), b), b);
  const Vector d{2, 4};
  const Vector x = psd_solve(DenseMatrix::diagonal(d), Vector{2, 4});
  EXPECT_NEAR(x[0], 1.0, 1e-15);
  EXPECT_NEAR(x[1], 1.0, 1e-15);
}

TEST(Solve, ResidualOnRandomSpd) {
  std::mt19937_64 rng(5);
  const DenseMatrix a = random_spd(25, rng, 0.1);
  const Vector b = marglik::testing::random_vector(25, rng);
  const Vector x = psd_solve(a, b);
  const Vector ax = matvec(a, x);
  double res = 0.0, bmax = 0.0;
  for (std::size_t i = 0; i < b.size(); ++i) {
    res = std::max(res, std::abs(ax[i] - b[i]));
    bmax = std::max(bmax, std::abs(b[i]));
  }
  EXPECT_LE(res, 1e-8 * bmax);
}

TEST(Cholesky, InverseMatchesSolve) {
  std::mt19937_64 rng(9);
  const DenseMatrix a = random_spd(8, rng);
  const DenseMatrix inv = Cholesky(a).inverse();
  EXPECT_LE((matmul(a, inv) - DenseMatrix::identity(8)).max_abs(), 1e-10);
}

TEST(Gram, IdentityAndColumn) {
  EXPECT_EQ(gram(DenseMatrix::identity(3)), DenseMatrix::identity(3));
  const DenseMatrix col = DenseMatrix::from_rows({{1}, {2}});
  EXPECT_DOUBLE_EQ(gram(col)(0, 0), 5.0);
  EXPECT_EQ(gram_rows(col), matmul(col, col.transposed()));
}

TEST(Gram, SymmetricPsd) {
  std::mt19937_64 rng(13);
  const DenseMatrix m = random_matrix(4, 3, rng);
  const DenseMatrix g = gram(m);
  EXPECT_EQ(g, g.transposed());
  EXPECT_GE(sym_eigendecompose(g, false).eigenvalues.front(), -1e-10 * g.trace());
  const DenseMatrix gr = gram_rows(m);
  EXPECT_GE(sym_eigendecompose(gr, false).eigenvalues.front(), -1e-10 * gr.trace());
}

TEST(Gram, ColumnSliceMatchesExplicitSlice) {
  std::mt19937_64 rng(17);
  const DenseMatrix m = random_matrix(5, 9, rng);
  DenseMatrix s(5, 4);
  for (std::size_t i = 0; i < 5; ++i)
    for (std::size_t j = 0; j < 4; ++j) s(i, j) = m(i, 3 + j);
  EXPECT_LE((gram_rows(m, 3, 4) - gram_rows(s)).max_abs(), 1e-14);
}

TEST(Kron, IndexConvention) {
  const DenseMatrix a = DenseMatrix::from_rows({{1, 2}, {3, 4}});
  const DenseMatrix b = DenseMatrix::from_rows({{0, 5}, {6, 7}});
  const DenseMatrix k = kron(a, b);
  ASSERT_EQ(k.rows(), 4u);
  EXPECT_EQ(k(0, 1), 5.0);   // a00 b01
  EXPECT_EQ(k(3, 2), 24.0);  // a11 b10
  EXPECT_EQ(k(1, 3), 14.0);  // a01 b11
}

TEST(ClipPsd, ClipsTinyNegativesAndRejectsLargeOnes) {
  const Vector v = clip_psd({-1e-12, 0.5, 2.0});
  EXPECT_EQ(v[0], 0.0);
  EXPECT_THROW(clip_psd({-1e-3, 1.0}), NumericError);
}

TEST(DenseMatrix, ShapeChecks) {
  EXPECT_THROW(DenseMatrix(2, 2, Vector{1, 2, 3}), DimensionError);
  EXPECT_THROW(matmul(DenseMatrix(2, 3), DenseMatrix(2, 3)), DimensionError);
}
