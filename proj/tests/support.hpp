#pragma once
// Shared fixtures for the unit tests: seeded random matrices, small networks
// and datasets, and central finite differences.

#include <cmath>
#include <functional>
#include <numbers>
#include <random>

#include "marglik/dataset.hpp"
#include "marglik/network.hpp"
#include "marglik/numeric.hpp"

namespace marglik::testing {

inline DenseMatrix random_matrix(std::size_t rows, std::size_t cols, std::mt19937_64& rng, double sd = 1.0) {
  std::normal_distribution<double> n(0.0, sd);
  DenseMatrix m(rows, cols);
  for (double& v : m.data()) v = n(rng);
  return m;
}

inline Vector random_vector(std::size_t n, std::mt19937_64& rng, double sd = 1.0) {
  std::normal_distribution<double> d(0.0, sd);
  Vector v(n);
  for (double& x : v) x = d(rng);
  return v;
}

/// BᵀB + shift·I
inline DenseMatrix random_spd(std::size_t n, std::mt19937_64& rng, double shift = 1.0) {
  DenseMatrix a = gram(random_matrix(n, n, rng));
  for (std::size_t i = 0; i < n; ++i) a(i, i) += shift;
  return a;
}

inline Dataset random_regression(std::size_t n, std::size_t d, std::size_t c, std::mt19937_64& rng) {
  return {random_matrix(n, d, rng), random_matrix(n, c, rng), Task::regression, 0};
}

inline Dataset random_classification(std::size_t n, std::size_t d, std::size_t classes, std::mt19937_64& rng) {
  Dataset data{random_matrix(n, d, rng), DenseMatrix(n, 1), Task::classification, classes};
  std::uniform_int_distribution<std::size_t> k(0, classes - 1);
  for (std::size_t i = 0; i < n; ++i) data.y(i, 0) = static_cast<double>(k(rng));
  return data;
}

/// Parameters drawn N(0, sd²) so every unit is active on random inputs.
inline Vector random_params(const Mlp& net, std::mt19937_64& rng, double sd = 0.5) {
  return random_vector(net.num_params(), rng, sd);
}

/// Central difference of f at x along coordinate i with step h.
inline double central_difference(const std::function<double(std::span<const double>)>& f, Vector x,
                                 std::size_t i, double h) {
  const double x0 = x[i];
  x[i] = x0 + h;
  const double up = f(x);
  x[i] = x0 - h;
  const double down = f(x);
  return (up - down) / (2.0 * h);
}

inline double rel_err(double a, double b, double floor = 1e-12) {
  return std::abs(a - b) / std::max({std::abs(a), std::abs(b), floor});
}

// log N(y; 0, σ²I + X diag(δ)⁻¹ Xᵀ) for a single-output linear model with bias.
inline double conjugate_evidence(const Dataset& data, const Vector& prior_diag, double sigma2) {
  const std::size_t n = data.size(), d = data.input_dim();
  DenseMatrix k = DenseMatrix::identity(n) * sigma2;
  for (std::size_t a = 0; a < n; ++a)
    for (std::size_t b = 0; b < n; ++b) {
      double s = 1.0 / prior_diag[d];
      for (std::size_t j = 0; j < d; ++j) s += data.x(a, j) * data.x(b, j) / prior_diag[j];
      k(a, b) += s;
    }
  Vector y(n);
  for (std::size_t i = 0; i < n; ++i) y[i] = data.y(i, 0);
  const Cholesky ch(k);
  return -0.5 * static_cast<double>(n) * std::log(2 * std::numbers::pi) - 0.5 * ch.logdet() -
         0.5 * dot(y, ch.solve(y));
}

// Closed-form MAP of the linear-Gaussian model.
inline Vector linear_map(const Dataset& data, const Vector& prior_diag, double sigma2) {
  const std::size_t n = data.size(), d = data.input_dim();
  DenseMatrix design(n, d + 1);
  Vector y(n);
  for (std::size_t i = 0; i < n; ++i) {
    for (std::size_t j = 0; j < d; ++j) design(i, j) = data.x(i, j);
    design(i, d) = 1.0;
    y[i] = data.y(i, 0);
  }
  DenseMatrix a = gram(design) * (1.0 / sigma2);
  for (std::size_t j = 0; j <= d; ++j) a(j, j) += prior_diag[j];
  Vector rhs = matvec(design.transposed(), y);
  for (double& v : rhs) v /= sigma2;
  return psd_solve(a, rhs);
}

}  // namespace marglik::testing
