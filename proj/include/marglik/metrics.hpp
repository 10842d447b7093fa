#pragma once
// Evaluation metrics for regression and classification predictives.

#include <algorithm>
#include <cmath>
#include <numbers>
#include <span>
#include <stdexcept>
#include <vector>

#include "marglik/numeric.hpp"

namespace marglik {

namespace detail {
inline void require_rows(const DenseMatrix& a, const DenseMatrix& b, const char* who) {
  if (a.rows() == 0) throw std::invalid_argument(std::string(who) + ": empty input");
  if (a.rows() != b.rows()) throw DimensionError(std::string(who) + ": row count mismatch");
}
inline std::size_t label(const DenseMatrix& y, std::size_t n, std::size_t classes) {
  const double v = y(n, 0);
  if (!(v >= 0.0) || v != std::floor(v) || static_cast<std::size_t>(v) >= classes)
    throw std::invalid_argument("label " + std::to_string(v) + " at row " + std::to_string(n) + " is not a class index");
  return static_cast<std::size_t>(v);
}
}  // namespace detail

/// Root mean squared error, optionally rescaled by per-output target scales.
inline double rmse(const DenseMatrix& mean, const DenseMatrix& y, std::span<const double> y_scale = {}) {
  detail::require_rows(mean, y, "rmse");
  double s = 0.0;
  for (std::size_t n = 0; n < y.rows(); ++n)
    for (std::size_t c = 0; c < y.cols(); ++c) {
      const double k = y_scale.empty() ? 1.0 : y_scale[c];
      const double r = (y(n, c) - mean(n, c)) * k;
      s += r * r;
    }
  return std::sqrt(s / static_cast<double>(y.size()));
}

/// Mean Gaussian log predictive density per example. With target scales the
/// density is reported in original units: log p_orig = log p_std − Σ_c log scale_c.
inline double gaussian_test_loglik(const DenseMatrix& mean, const DenseMatrix& var, const DenseMatrix& y,
                                   std::span<const double> y_scale = {}) {
  detail::require_rows(mean, y, "gaussian_test_loglik");
  double s = 0.0;
  for (std::size_t n = 0; n < y.rows(); ++n)
    for (std::size_t c = 0; c < y.cols(); ++c) {
      const double v = var(n, c);
      if (!(v > 0.0)) throw std::invalid_argument("gaussian_test_loglik: predictive variance must be > 0");
      const double r = y(n, c) - mean(n, c);
      s += -0.5 * std::log(2.0 * std::numbers::pi * v) - r * r / (2.0 * v);
      if (!y_scale.empty()) s -= std::log(y_scale[c]);
    }
  return s / static_cast<double>(y.rows());
}

/// Mean log p(y_n) under class probabilities.
inline double categorical_test_loglik(const DenseMatrix& probs, const DenseMatrix& y) {
  detail::require_rows(probs, y, "categorical_test_loglik");
  double s = 0.0;
  for (std::size_t n = 0; n < y.rows(); ++n)
    s += std::log(std::max(probs(n, detail::label(y, n, probs.cols())), std::numeric_limits<double>::min()));
  return s / static_cast<double>(y.rows());
}

inline double accuracy(const DenseMatrix& probs, const DenseMatrix& y) {
  detail::require_rows(probs, y, "accuracy");
  std::size_t hits = 0;
  for (std::size_t n = 0; n < y.rows(); ++n) {
    auto p = probs.row(n);
    const auto k = static_cast<std::size_t>(std::max_element(p.begin(), p.end()) - p.begin());
    hits += k == detail::label(y, n, probs.cols());
  }
  return static_cast<double>(hits) / static_cast<double>(y.rows());
}

/// Max-probability per row, used as the confidence score.
inline Vector confidence(const DenseMatrix& probs) {
  Vector c(probs.rows());
  for (std::size_t n = 0; n < probs.rows(); ++n) {
    auto p = probs.row(n);
    c[n] = *std::max_element(p.begin(), p.end());
  }
  return c;
}

/// Expected calibration error over equal-width confidence bins.
inline double expected_calibration_error(const DenseMatrix& probs, const DenseMatrix& y, std::size_t bins = 15) {
  detail::require_rows(probs, y, "expected_calibration_error");
  if (bins == 0) throw std::invalid_argument("expected_calibration_error: bins must be >= 1");
  std::vector<double> conf(bins, 0.0), acc(bins, 0.0);
  std::vector<std::size_t> count(bins, 0);
  for (std::size_t n = 0; n < y.rows(); ++n) {
    auto p = probs.row(n);
    const auto k = static_cast<std::size_t>(std::max_element(p.begin(), p.end()) - p.begin());
    const double c = p[k];
    // Bin b covers (b/B, (b+1)/B]; confidence 0 goes to the first bin.
    std::size_t b = c <= 0.0 ? 0 : static_cast<std::size_t>(std::ceil(c * static_cast<double>(bins))) - 1;
    b = std::min(b, bins - 1);
    conf[b] += c;
    acc[b] += k == detail::label(y, n, probs.cols()) ? 1.0 : 0.0;
    ++count[b];
  }
  double ece = 0.0;
  for (std::size_t b = 0; b < bins; ++b)
    if (count[b]) ece += std::abs(acc[b] - conf[b]) / static_cast<double>(y.rows());
  return ece;
}

/// P(in > out) + ½ P(in = out): the Mann–Whitney statistic normalized to [0, 1].
inline double ood_auc(std::span<const double> in_scores, std::span<const double> out_scores) {
  if (in_scores.empty() || out_scores.empty()) throw std::invalid_argument("ood_auc: empty score set");
  std::vector<double> out(out_scores.begin(), out_scores.end());
  std::sort(out.begin(), out.end());
  double wins = 0.0;
  for (double s : in_scores) {
    const auto lo = std::lower_bound(out.begin(), out.end(), s);
    const auto hi = std::upper_bound(lo, out.end(), s);
    wins += static_cast<double>(lo - out.begin()) + 0.5 * static_cast<double>(hi - lo);
  }
  return wins / (static_cast<double>(in_scores.size()) * static_cast<double>(out.size()));
}

}  // namespace marglik
