#pragma once
// MAP and linearized-Laplace predictives. Posterior uncertainty is pushed to
// function space through the network Jacobian, f ~ N(f(x, θ*), J Σ Jᵀ).

#include <cmath>
#include <memory>
#include <optional>
#include <random>

#include "marglik/likelihood.hpp"
#include "marglik/marglik.hpp"
#include "marglik/network.hpp"

namespace marglik {

struct RegressionPredictive {
  DenseMatrix mean;       // N x C
  DenseMatrix epistemic;  // N x C, diagonal of J Σ Jᵀ
  DenseMatrix total;      // epistemic + σ²
  double aleatoric = 0.0;
};

struct ClassPredictive {
  DenseMatrix probs;  // N x C
};

/// Frozen posterior: θ*, hyperparameters and the Σ = H⁻¹ action.
class Posterior {
 public:
  Posterior(const Mlp& net, std::shared_ptr<const LaplaceCache> cache, HyperParams hypers)
      : net_(&net),
        theta_(cache->theta().begin(), cache->theta().end()),
        hypers_(std::move(hypers)),
        cov_(cache->covariance(hypers_)),
        cache_(std::move(cache)) {}

  /// Any externally supplied covariance action.
  Posterior(const Mlp& net, Vector theta, HyperParams hypers, std::unique_ptr<CovarianceOperator> cov)
      : net_(&net), theta_(std::move(theta)), hypers_(std::move(hypers)), cov_(std::move(cov)) {
    if (theta_.size() != net.num_params()) throw DimensionError("posterior: parameter length mismatch");
    if (!cov_) throw std::invalid_argument("posterior: missing covariance operator");
  }

  const Mlp& net() const noexcept { return *net_; }
  std::span<const double> theta() const noexcept { return theta_; }
  const HyperParams& hypers() const noexcept { return hypers_; }
  const CovarianceOperator& covariance() const noexcept { return *cov_; }

 private:
  const Mlp* net_;
  Vector theta_;
  HyperParams hypers_;
  std::unique_ptr<CovarianceOperator> cov_;
  std::shared_ptr<const LaplaceCache> cache_;  // keeps the operator's engine alive
};

/// Regression: mean f, variance σ². Classification: softmax(f / T) in `probs`.
inline RegressionPredictive predict_map_regression(const Mlp& net, std::span<const double> theta, const DenseMatrix& x,
                                                   const Likelihood& lik) {
  if (!lik.is_gaussian()) throw std::invalid_argument("predict_map_regression needs a Gaussian likelihood");
  RegressionPredictive r{net.forward(theta, x), DenseMatrix(x.rows(), net.output_dim()), {}, lik.sigma2()};
  r.total = DenseMatrix(x.rows(), net.output_dim(), lik.sigma2());
  return r;
}

inline ClassPredictive predict_map_classification(const Mlp& net, std::span<const double> theta, const DenseMatrix& x,
                                                  const Likelihood& lik) {
  if (lik.is_gaussian()) throw std::invalid_argument("predict_map_classification needs a categorical likelihood");
  const DenseMatrix f = net.forward(theta, x);
  ClassPredictive out{DenseMatrix(f.rows(), f.cols())};
  for (std::size_t n = 0; n < f.rows(); ++n) {
    const Vector p = softmax(f.row(n), lik.temperature());
    std::copy(p.begin(), p.end(), out.probs.row(n).begin());
  }
  return out;
}

/// J(x) Σ J(x)ᵀ for a single input row.
inline DenseMatrix function_space_covariance(const Posterior& post, std::span<const double> x) {
  const DenseMatrix xr(1, x.size(), Vector(x.begin(), x.end()));
  const DenseMatrix j = jacobians(post.net(), post.theta(), xr).stacked;
  return post.covariance().apply(j);
}

inline RegressionPredictive predict_bayes_regression(const Posterior& post, const DenseMatrix& x) {
  const Likelihood& lik = post.hypers().likelihood;
  RegressionPredictive r = predict_map_regression(post.net(), post.theta(), x, lik);
  const JacobianBatch jb = jacobians(post.net(), post.theta(), x);
  for (std::size_t n = 0; n < x.rows(); ++n) {
    const DenseMatrix cov = post.covariance().apply(jb.example(n));
    for (std::size_t c = 0; c < cov.rows(); ++c) {
      r.epistemic(n, c) = std::max(0.0, cov(c, c));
      r.total(n, c) = r.epistemic(n, c) + r.aleatoric;
    }
  }
  return r;
}

/// Monte-Carlo average of softmax(f_s / T) with f_s ~ N(f, J Σ Jᵀ); seeded.
inline ClassPredictive predict_bayes_classification(const Posterior& post, const DenseMatrix& x,
                                                    std::size_t samples = 1000, std::uint64_t seed = 0) {
  if (samples == 0) throw std::invalid_argument("predict_bayes_classification: need at least one sample");
  const Likelihood& lik = post.hypers().likelihood;
  if (lik.is_gaussian()) throw std::invalid_argument("predict_bayes_classification needs a categorical likelihood");
  const DenseMatrix f = post.net().forward(post.theta(), x);
  const JacobianBatch jb = jacobians(post.net(), post.theta(), x);
  const std::size_t c = f.cols();
  std::mt19937_64 rng(seed);
  std::normal_distribution<double> normal(0.0, 1.0);
  ClassPredictive out{DenseMatrix(f.rows(), c)};
  Vector z(c), fs(c);
  for (std::size_t n = 0; n < f.rows(); ++n) {
    DenseMatrix cov = post.covariance().apply(jb.example(n));
    const double tr = cov.trace();
    auto dst = out.probs.row(n);
    if (!(tr > 0.0)) {
      const Vector p = softmax(f.row(n), lik.temperature());
      std::copy(p.begin(), p.end(), dst.begin());
      continue;
    }
    for (std::size_t i = 0; i < c; ++i) cov(i, i) += 1e-10 * tr;
    std::optional<Cholesky> chol;
    try {
      chol.emplace(cov);
    } catch (const NotPositiveDefiniteError& e) {
      throw NumericError("predictive covariance is not positive definite at input " + std::to_string(n) +
                         " (pivot " + std::to_string(e.pivot()) + ")");
    }
    const DenseMatrix& l = chol->factor();
    for (std::size_t s = 0; s < samples; ++s) {
      for (double& v : z) v = normal(rng);
      for (std::size_t i = 0; i < c; ++i) {
        double v = f(n, i);
        for (std::size_t k = 0; k <= i; ++k) v += l(i, k) * z[k];
        fs[i] = v;
      }
      const Vector p = softmax(fs, lik.temperature());
      for (std::size_t i = 0; i < c; ++i) dst[i] += p[i];
    }
    for (double& v : dst) v /= static_cast<double>(samples);
  }
  return out;
}

}  // namespace marglik
