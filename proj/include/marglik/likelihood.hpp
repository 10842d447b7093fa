#pragma once
// Likelihoods (Gaussian regression with observation noise, categorical with
// softmax temperature), per-group isotropic Gaussian priors, and their
// derivatives. All hyperparameters are stored in log space.

#include <algorithm>
#include <cmath>
#include <numbers>
#include <span>
#include <string>
#include <vector>

#include "marglik/network.hpp"
#include "marglik/numeric.hpp"

namespace marglik {

enum class LikelihoodKind { gaussian, categorical };

struct Likelihood {
  LikelihoodKind kind = LikelihoodKind::gaussian;
  double log_hyper = 0.0;  // log σ² (gaussian) or log T (categorical)

  static Likelihood gaussian(double log_sigma2 = 0.0) { return {LikelihoodKind::gaussian, log_sigma2}; }
  static Likelihood categorical(double log_temperature = 0.0) {
    return {LikelihoodKind::categorical, log_temperature};
  }

  bool is_gaussian() const noexcept { return kind == LikelihoodKind::gaussian; }
  double sigma2() const noexcept { return std::exp(log_hyper); }
  double temperature() const noexcept { return std::exp(log_hyper); }
  std::string hyper_name() const { return is_gaussian() ? "sigma2" : "temperature"; }

  friend bool operator==(const Likelihood&, const Likelihood&) = default;
};

namespace detail {

inline double logsumexp(std::span<const double> v, double scale) {
  double mx = -INFINITY;
  for (double x : v) mx = std::max(mx, x * scale);
  double s = 0.0;
  for (double x : v) s += std::exp(x * scale - mx);
  return mx + std::log(s);
}

inline std::size_t class_index(std::span<const double> y, std::size_t num_classes) {
  const double c = y[0];
  if (!(c >= 0.0) || c != std::floor(c) || static_cast<std::size_t>(c) >= num_classes)
    throw std::invalid_argument("class label " + std::to_string(c) + " outside [0, " +
                                std::to_string(num_classes) + ")");
  return static_cast<std::size_t>(c);
}

}  // namespace detail

/// softmax(f / T)
inline Vector softmax(std::span<const double> f, double temperature = 1.0) {
  const double inv_t = 1.0 / temperature;
  const double lse = detail::logsumexp(f, inv_t);
  Vector p(f.size());
  for (std::size_t i = 0; i < f.size(); ++i) p[i] = std::exp(f[i] * inv_t - lse);
  return p;
}

/// log p(y | f) for a single example.
inline double log_likelihood_row(std::span<const double> f, std::span<const double> y, const Likelihood& lik) {
  if (lik.is_gaussian()) {
    if (y.size() != f.size()) throw DimensionError("gaussian likelihood: target width != output width");
    const double s2 = lik.sigma2();
    double ll = 0.0;
    for (std::size_t c = 0; c < f.size(); ++c) {
      const double r = y[c] - f[c];
      ll += -0.5 * std::log(2.0 * std::numbers::pi * s2) - r * r / (2.0 * s2);
    }
    return ll;
  }
  const double inv_t = 1.0 / lik.temperature();
  const std::size_t k = detail::class_index(y, f.size());
  return f[k] * inv_t - detail::logsumexp(f, inv_t);
}

/// Σ_n log p(y_n | f_n).
inline double log_likelihood(const DenseMatrix& f, const DenseMatrix& y, const Likelihood& lik) {
  if (f.rows() != y.rows()) throw DimensionError("log_likelihood: row count mismatch");
  double total = 0.0;
  for (std::size_t n = 0; n < f.rows(); ++n) {
    const double ll = log_likelihood_row(f.row(n), y.row(n), lik);
    if (!std::isfinite(ll)) throw NumericError("non-finite log-likelihood at example " + std::to_string(n));
    total += ll;
  }
  return total;
}

/// ∇_f log p(y | f).
inline Vector loglik_grad_wrt_f(std::span<const double> f, std::span<const double> y, const Likelihood& lik) {
  Vector g(f.size());
  if (lik.is_gaussian()) {
    const double s2 = lik.sigma2();
    for (std::size_t c = 0; c < f.size(); ++c) g[c] = (y[c] - f[c]) / s2;
    return g;
  }
  const double t = lik.temperature();
  const auto p = softmax(f, t);
  const std::size_t k = detail::class_index(y, f.size());
  for (std::size_t c = 0; c < f.size(); ++c) g[c] = ((c == k ? 1.0 : 0.0) - p[c]) / t;
  return g;
}

/// Λ(y; f) = -∇²_ff log p(y | f). Independent of y for both likelihoods.
inline DenseMatrix likelihood_hessian(std::span<const double> f, const Likelihood& lik) {
  const std::size_t c = f.size();
  if (lik.is_gaussian()) return DenseMatrix::identity(c) * (1.0 / lik.sigma2());
  const double t = lik.temperature();
  const auto p = softmax(f, t);
  DenseMatrix h(c, c);
  const double s = 1.0 / (t * t);
  for (std::size_t i = 0; i < c; ++i)
    for (std::size_t j = 0; j < c; ++j) h(i, j) = s * ((i == j ? p[i] : 0.0) - p[i] * p[j]);
  return h;
}

inline DenseMatrix likelihood_hessian(std::span<const double> f, std::span<const double> /*y*/,
                                      const Likelihood& lik) {
  return likelihood_hessian(f, lik);
}

/// Rows R with RᵀR = Λ(f). When `noise_free` is set the Gaussian factor is
/// the identity (the 1/σ² factor is applied later).
inline DenseMatrix likelihood_hessian_factor(std::span<const double> f, const Likelihood& lik,
                                             bool noise_free = false) {
  const std::size_t c = f.size();
  if (lik.is_gaussian()) {
    return DenseMatrix::identity(c) * (noise_free ? 1.0 : 1.0 / std::sqrt(lik.sigma2()));
  }
  // r_k = sqrt(p_k) (e_k - p) / T gives Σ_k r_k r_kᵀ = (diag(p) - ppᵀ) / T².
  const double t = lik.temperature();
  const auto p = softmax(f, t);
  DenseMatrix r(c, c);
  for (std::size_t k = 0; k < c; ++k) {
    const double w = std::sqrt(p[k]) / t;
    for (std::size_t j = 0; j < c; ++j) r(k, j) = w * ((k == j ? 1.0 : 0.0) - p[j]);
  }
  return r;
}

/// Per-group prior precisions δ_l stored as log δ_l.
struct PriorPrecisions {
  Vector log_delta;

  static PriorPrecisions uniform(const ParamLayout& layout, double delta) {
    return {Vector(layout.num_groups(), std::log(delta))};
  }
  double delta(std::size_t g) const { return std::exp(log_delta.at(g)); }
  std::size_t size() const noexcept { return log_delta.size(); }

  friend bool operator==(const PriorPrecisions&, const PriorPrecisions&) = default;
};

/// Differentiable hyperparameters of the model.
struct HyperParams {
  PriorPrecisions prior;
  Likelihood likelihood;

  friend bool operator==(const HyperParams&, const HyperParams&) = default;
};

namespace detail {
inline void require_matching_prior(const ParamLayout& layout, const PriorPrecisions& prior) {
  if (prior.size() != layout.num_groups())
    throw DimensionError("prior has " + std::to_string(prior.size()) + " groups, layout has " +
                         std::to_string(layout.num_groups()));
}
}  // namespace detail

/// Σ_l [(D_l/2)(log δ_l - log 2π) - (δ_l/2)‖θ_l‖²]
inline double log_prior(std::span<const double> theta, const ParamLayout& layout, const PriorPrecisions& prior) {
  detail::require_matching_prior(layout, prior);
  double lp = 0.0;
  for (std::size_t g = 0; g < layout.num_groups(); ++g) {
    const auto& pg = layout.group(g);
    const auto tg = theta.subspan(pg.offset, pg.length);
    const double d = static_cast<double>(pg.length);
    lp += 0.5 * d * (prior.log_delta[g] - std::log(2.0 * std::numbers::pi)) - 0.5 * prior.delta(g) * dot(tg, tg);
  }
  return lp;
}

inline double log_prior(const ParamVector& params, const PriorPrecisions& prior) {
  return log_prior(params.values, params.layout, prior);
}

/// Diagonal of P_θ = -∇²log p(θ): entry i is δ of its group.
inline Vector prior_hessian_diag(const PriorPrecisions& prior, const ParamLayout& layout) {
  detail::require_matching_prior(layout, prior);
  Vector d(layout.total());
  for (std::size_t g = 0; g < layout.num_groups(); ++g) {
    const auto& pg = layout.group(g);
    std::fill_n(d.begin() + static_cast<std::ptrdiff_t>(pg.offset), pg.length, prior.delta(g));
  }
  return d;
}

}  // namespace marglik
