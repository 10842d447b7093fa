#pragma once
// Dense symmetric linear algebra used throughout the library: a row-major
// matrix type, cyclic Jacobi eigendecomposition, Cholesky factorization,
// log-determinants and SPD solves.

#include <algorithm>
#include <cmath>
#include <cstddef>
#include <numeric>
#include <optional>
#include <span>
#include <stdexcept>
#include <string>
#include <utility>
#include <vector>

namespace marglik {

using Vector = std::vector<double>;

class DimensionError : public std::invalid_argument {
 public:
  using std::invalid_argument::invalid_argument;
};

class SymmetryError : public std::invalid_argument {
 public:
  using std::invalid_argument::invalid_argument;
};

class NotPositiveDefiniteError : public std::runtime_error {
 public:
  NotPositiveDefiniteError(std::size_t pivot, double value)
      : std::runtime_error("matrix is not positive definite: pivot " + std::to_string(pivot) +
                           " has value " + std::to_string(value)),
        pivot_(pivot),
        value_(value) {}
  std::size_t pivot() const noexcept { return pivot_; }
  double value() const noexcept { return value_; }

 private:
  std::size_t pivot_;
  double value_;
};

class NumericError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

/// Row-major dense matrix of doubles.
class DenseMatrix {
 public:
  DenseMatrix() = default;
  DenseMatrix(std::size_t rows, std::size_t cols, double fill = 0.0)
      : rows_(rows), cols_(cols), data_(rows * cols, fill) {}
  DenseMatrix(std::size_t rows, std::size_t cols, Vector data)
      : rows_(rows), cols_(cols), data_(std::move(data)) {
    if (data_.size() != rows_ * cols_)
      throw DimensionError("DenseMatrix: entry count " + std::to_string(data_.size()) +
                           " does not match " + std::to_string(rows_) + "x" +
                           std::to_string(cols_));
  }

  static DenseMatrix identity(std::size_t n) {
    DenseMatrix m(n, n);
    for (std::size_t i = 0; i < n; ++i) m(i, i) = 1.0;
    return m;
  }
  static DenseMatrix diagonal(std::span<const double> d) {
    DenseMatrix m(d.size(), d.size());
    for (std::size_t i = 0; i < d.size(); ++i) m(i, i) = d[i];
    return m;
  }
  /// Build from nested rows; all rows must have equal length.
  static DenseMatrix from_rows(const std::vector<Vector>& rows) {
    const std::size_t r = rows.size();
    const std::size_t c = r ? rows.front().size() : 0;
    DenseMatrix m(r, c);
    for (std::size_t i = 0; i < r; ++i) {
      if (rows[i].size() != c) throw DimensionError("from_rows: ragged input");
      std::copy(rows[i].begin(), rows[i].end(), m.row(i).begin());
    }
    return m;
  }

  std::size_t rows() const noexcept { return rows_; }
  std::size_t cols() const noexcept { return cols_; }
  std::size_t size() const noexcept { return data_.size(); }
  bool square() const noexcept { return rows_ == cols_; }

  double& operator()(std::size_t i, std::size_t j) noexcept { return data_[i * cols_ + j]; }
  double operator()(std::size_t i, std::size_t j) const noexcept { return data_[i * cols_ + j]; }

  std::span<double> row(std::size_t i) noexcept { return {data_.data() + i * cols_, cols_}; }
  std::span<const double> row(std::size_t i) const noexcept {
    return {data_.data() + i * cols_, cols_};
  }

  const Vector& data() const noexcept { return data_; }
  Vector& data() noexcept { return data_; }

  DenseMatrix transposed() const {
    DenseMatrix t(cols_, rows_);
    for (std::size_t i = 0; i < rows_; ++i)
      for (std::size_t j = 0; j < cols_; ++j) t(j, i) = (*this)(i, j);
    return t;
  }

  double max_abs() const noexcept {
    double m = 0.0;
    for (double v : data_) m = std::max(m, std::abs(v));
    return m;
  }
  double trace() const noexcept {
    double t = 0.0;
    for (std::size_t i = 0; i < std::min(rows_, cols_); ++i) t += (*this)(i, i);
    return t;
  }

  DenseMatrix& operator+=(const DenseMatrix& o) {
    require_same_shape(o);
    for (std::size_t i = 0; i < data_.size(); ++i) data_[i] += o.data_[i];
    return *this;
  }
  DenseMatrix& operator-=(const DenseMatrix& o) {
    require_same_shape(o);
    for (std::size_t i = 0; i < data_.size(); ++i) data_[i] -= o.data_[i];
    return *this;
  }
  DenseMatrix& operator*=(double s) noexcept {
    for (double& v : data_) v *= s;
    return *this;
  }
  friend DenseMatrix operator+(DenseMatrix a, const DenseMatrix& b) { return a += b; }
  friend DenseMatrix operator-(DenseMatrix a, const DenseMatrix& b) { return a -= b; }
  friend DenseMatrix operator*(DenseMatrix a, double s) { return a *= s; }
  friend DenseMatrix operator*(double s, DenseMatrix a) { return a *= s; }

  friend bool operator==(const DenseMatrix&, const DenseMatrix&) = default;

 private:
  void require_same_shape(const DenseMatrix& o) const {
    if (o.rows_ != rows_ || o.cols_ != cols_) throw DimensionError("matrix shape mismatch");
  }

  std::size_t rows_ = 0;
  std::size_t cols_ = 0;
  Vector data_;
};

inline double dot(std::span<const double> a, std::span<const double> b) noexcept {
  double s = 0.0;
  for (std::size_t i = 0; i < a.size(); ++i) s += a[i] * b[i];
  return s;
}

/// C = A * B
inline DenseMatrix matmul(const DenseMatrix& a, const DenseMatrix& b) {
  if (a.cols() != b.rows())
    throw DimensionError("matmul: " + std::to_string(a.rows()) + "x" + std::to_string(a.cols()) +
                         " times " + std::to_string(b.rows()) + "x" + std::to_string(b.cols()));
  DenseMatrix c(a.rows(), b.cols());
  for (std::size_t i = 0; i < a.rows(); ++i) {
    auto ci = c.row(i);
    for (std::size_t k = 0; k < a.cols(); ++k) {
      const double aik = a(i, k);
      if (aik == 0.0) continue;
      auto bk = b.row(k);
      for (std::size_t j = 0; j < b.cols(); ++j) ci[j] += aik * bk[j];
    }
  }
  return c;
}

/// y = A x
inline Vector matvec(const DenseMatrix& a, std::span<const double> x) {
  if (a.cols() != x.size()) throw DimensionError("matvec: dimension mismatch");
  Vector y(a.rows());
  for (std::size_t i = 0; i < a.rows(); ++i) y[i] = dot(a.row(i), x);
  return y;
}

/// Kronecker product (A ⊗ B)[(i,k),(j,l)] = A[i,j] B[k,l].
inline DenseMatrix kron(const DenseMatrix& a, const DenseMatrix& b) {
  DenseMatrix k(a.rows() * b.rows(), a.cols() * b.cols());
  for (std::size_t i = 0; i < a.rows(); ++i)
    for (std::size_t j = 0; j < a.cols(); ++j)
      for (std::size_t p = 0; p < b.rows(); ++p)
        for (std::size_t q = 0; q < b.cols(); ++q)
          k(i * b.rows() + p, j * b.cols() + q) = a(i, j) * b(p, q);
  return k;
}

/// MᵀM (cols x cols).
inline DenseMatrix gram(const DenseMatrix& m) {
  const std::size_t n = m.cols();
  DenseMatrix g(n, n);
  for (std::size_t r = 0; r < m.rows(); ++r) {
    auto mr = m.row(r);
    for (std::size_t i = 0; i < n; ++i) {
      const double v = mr[i];
      if (v == 0.0) continue;
      auto gi = g.row(i);
      for (std::size_t j = i; j < n; ++j) gi[j] += v * mr[j];
    }
  }
  for (std::size_t i = 0; i < n; ++i)
    for (std::size_t j = 0; j < i; ++j) g(i, j) = g(j, i);
  return g;
}

/// MMᵀ (rows x rows).
inline DenseMatrix gram_rows(const DenseMatrix& m) {
  const std::size_t n = m.rows();
  DenseMatrix g(n, n);
  for (std::size_t i = 0; i < n; ++i)
    for (std::size_t j = i; j < n; ++j) g(i, j) = g(j, i) = dot(m.row(i), m.row(j));
  return g;
}

/// MMᵀ restricted to columns [offset, offset+length).
inline DenseMatrix gram_rows(const DenseMatrix& m, std::size_t offset, std::size_t length) {
  const std::size_t n = m.rows();
  DenseMatrix g(n, n);
  for (std::size_t i = 0; i < n; ++i) {
    auto ri = m.row(i).subspan(offset, length);
    for (std::size_t j = i; j < n; ++j) g(i, j) = g(j, i) = dot(ri, m.row(j).subspan(offset, length));
  }
  return g;
}

namespace detail {

inline void require_square(const DenseMatrix& a, const char* who) {
  if (!a.square())
    throw DimensionError(std::string(who) + ": matrix is " + std::to_string(a.rows()) + "x" +
                         std::to_string(a.cols()) + ", expected square");
}

inline void require_symmetric(const DenseMatrix& a, const char* who) {
  require_square(a, who);
  const double scale = a.max_abs();
  double asym = 0.0;
  for (std::size_t i = 0; i < a.rows(); ++i)
    for (std::size_t j = i + 1; j < a.cols(); ++j) asym = std::max(asym, std::abs(a(i, j) - a(j, i)));
  if (asym > 1e-10 * scale)
    throw SymmetryError(std::string(who) + ": asymmetry " + std::to_string(asym) +
                        " exceeds tolerance relative to " + std::to_string(scale));
}

inline DenseMatrix symmetrized(const DenseMatrix& a) {
  DenseMatrix s = a;
  for (std::size_t i = 0; i < a.rows(); ++i)
    for (std::size_t j = i + 1; j < a.cols(); ++j) s(i, j) = s(j, i) = 0.5 * (a(i, j) + a(j, i));
  return s;
}

}  // namespace detail

/// Eigenvalues in ascending order plus (optionally) matching orthonormal
/// eigenvectors stored as columns.
struct Spectrum {
  Vector eigenvalues;
  std::optional<DenseMatrix> eigenvectors;
};

/// Cyclic Jacobi eigendecomposition of a symmetric matrix. Converges when the
/// off-diagonal Frobenius norm drops to 1e-12 of the total, at most 100 sweeps.
inline Spectrum sym_eigendecompose(const DenseMatrix& input, bool with_vectors = true) {
  detail::require_symmetric(input, "sym_eigendecompose");
  DenseMatrix a = detail::symmetrized(input);
  const std::size_t n = a.rows();
  DenseMatrix v = DenseMatrix::identity(n);

  double total = 0.0;
  for (double x : a.data()) total += x * x;
  const double threshold = 1e-12 * std::sqrt(total);

  auto off_norm = [&] {
    double s = 0.0;
    for (std::size_t i = 0; i < n; ++i)
      for (std::size_t j = i + 1; j < n; ++j) s += 2.0 * a(i, j) * a(i, j);
    return std::sqrt(s);
  };

  for (int sweep = 0; sweep < 100 && n > 1; ++sweep) {
    if (off_norm() <= threshold) break;
    for (std::size_t p = 0; p + 1 < n; ++p) {
      for (std::size_t q = p + 1; q < n; ++q) {
        const double apq = a(p, q);
        if (apq == 0.0) continue;
        const double app = a(p, p);
        const double aqq = a(q, q);
        const double theta = (aqq - app) / (2.0 * apq);
        const double t = (theta >= 0 ? 1.0 : -1.0) / (std::abs(theta) + std::sqrt(theta * theta + 1.0));
        const double c = 1.0 / std::sqrt(t * t + 1.0);
        const double s = t * c;
        for (std::size_t k = 0; k < n; ++k) {
          const double akp = a(k, p);
          const double akq = a(k, q);
          a(k, p) = c * akp - s * akq;
          a(k, q) = s * akp + c * akq;
        }
        for (std::size_t k = 0; k < n; ++k) {
          const double apk = a(p, k);
          const double aqk = a(q, k);
          a(p, k) = c * apk - s * aqk;
          a(q, k) = s * apk + c * aqk;
        }
        a(p, q) = a(q, p) = 0.0;
        if (with_vectors) {
          for (std::size_t k = 0; k < n; ++k) {
            const double vkp = v(k, p);
            const double vkq = v(k, q);
            v(k, p) = c * vkp - s * vkq;
            v(k, q) = s * vkp + c * vkq;
          }
        }
      }
    }
  }

  std::vector<std::size_t> order(n);
  std::iota(order.begin(), order.end(), 0);
  std::stable_sort(order.begin(), order.end(),
                   [&](std::size_t i, std::size_t j) { return a(i, i) < a(j, j); });

  Spectrum out;
  out.eigenvalues.resize(n);
  for (std::size_t k = 0; k < n; ++k) out.eigenvalues[k] = a(order[k], order[k]);
  if (with_vectors) {
    DenseMatrix sorted(n, n);
    for (std::size_t k = 0; k < n; ++k)
      for (std::size_t i = 0; i < n; ++i) sorted(i, k) = v(i, order[k]);
    out.eigenvectors = std::move(sorted);
  }
  return out;
}

/// Lower-triangular Cholesky factor L with A = LLᵀ.
class Cholesky {
 public:
  explicit Cholesky(const DenseMatrix& a) : l_(a.rows(), a.cols()) {
    detail::require_square(a, "cholesky");
    const std::size_t n = a.rows();
    for (std::size_t j = 0; j < n; ++j) {
      auto lj = l_.row(j);
      double d = a(j, j) - dot(lj.first(j), lj.first(j));
      if (!(d > 0.0) || !std::isfinite(d)) throw NotPositiveDefiniteError(j, d);
      const double ljj = std::sqrt(d);
      lj[j] = ljj;
      for (std::size_t i = j + 1; i < n; ++i) {
        auto li = l_.row(i);
        li[j] = (a(i, j) - dot(li.first(j), lj.first(j))) / ljj;
      }
    }
  }

  const DenseMatrix& factor() const noexcept { return l_; }
  std::size_t dim() const noexcept { return l_.rows(); }

  double logdet() const noexcept {
    double s = 0.0;
    for (std::size_t i = 0; i < l_.rows(); ++i) s += std::log(l_(i, i));
    return 2.0 * s;
  }

  Vector solve(std::span<const double> b) const {
    const std::size_t n = l_.rows();
    if (b.size() != n) throw DimensionError("cholesky solve: rhs length mismatch");
    Vector y(b.begin(), b.end());
    for (std::size_t i = 0; i < n; ++i) {
      auto li = l_.row(i);
      y[i] = (y[i] - dot(li.first(i), std::span<const double>(y).first(i))) / li[i];
    }
    for (std::size_t ii = n; ii-- > 0;) {
      double s = y[ii];
      for (std::size_t k = ii + 1; k < n; ++k) s -= l_(k, ii) * y[k];
      y[ii] = s / l_(ii, ii);
    }
    return y;
  }

  /// Explicit inverse A⁻¹.
  DenseMatrix inverse() const {
    const std::size_t n = l_.rows();
    // Invert L in place (lower triangular), then A⁻¹ = L⁻ᵀ L⁻¹.
    DenseMatrix li(n, n);
    for (std::size_t j = 0; j < n; ++j) {
      li(j, j) = 1.0 / l_(j, j);
      for (std::size_t i = j + 1; i < n; ++i) {
        double s = 0.0;
        for (std::size_t k = j; k < i; ++k) s += l_(i, k) * li(k, j);
        li(i, j) = -s / l_(i, i);
      }
    }
    DenseMatrix inv(n, n);
    for (std::size_t i = 0; i < n; ++i)
      for (std::size_t j = 0; j <= i; ++j) {
        double s = 0.0;
        for (std::size_t k = i; k < n; ++k) s += li(k, i) * li(k, j);
        inv(i, j) = inv(j, i) = s;
      }
    return inv;
  }

 private:
  DenseMatrix l_;
};

/// log det A for symmetric positive definite A, computed from the Cholesky diagonal.
inline double cholesky_logdet(const DenseMatrix& a) {
  detail::require_symmetric(a, "cholesky_logdet");
  return Cholesky(detail::symmetrized(a)).logdet();
}

/// Solve A x = b for symmetric positive definite A.
inline Vector psd_solve(const DenseMatrix& a, std::span<const double> b) {
  detail::require_symmetric(a, "psd_solve");
  return Cholesky(detail::symmetrized(a)).solve(b);
}

/// Clamp eigenvalues in [-1e-9 * max|λ|, 0) to zero; anything more negative
/// means the curvature is not PSD and raises NumericError.
inline Vector clip_psd(Vector eigenvalues) {
  double mx = 0.0;
  for (double e : eigenvalues) mx = std::max(mx, std::abs(e));
  for (double& e : eigenvalues) {
    if (e < 0.0) {
      if (e < -1e-9 * mx)
        throw NumericError("curvature eigenvalue " + std::to_string(e) +
                           " is negative beyond tolerance");
      e = 0.0;
    }
  }
  return eigenvalues;
}

}  // namespace marglik
