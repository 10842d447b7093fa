#pragma once
// Gradients of the MAP objective: per-example log-likelihood gradients and the
// minibatch log-joint gradient with the prior scaled by the batch fraction.

#include <cmath>
#include <span>
#include <string>

#include "marglik/dataset.hpp"
#include "marglik/likelihood.hpp"
#include "marglik/network.hpp"

namespace marglik {

namespace detail {

inline void require_nonempty(const Dataset& d, const char* who) {
  if (d.size() == 0) throw std::invalid_argument(std::string(who) + ": batch is empty");
}

inline void require_finite_outputs(std::span<const double> f, std::size_t n) {
  for (double v : f)
    if (!std::isfinite(v)) throw NumericError("non-finite network output at example " + std::to_string(n));
}

}  // namespace detail

/// Row n = ∇_θ log p(y_n | f(x_n, θ)), an N x P matrix.
inline DenseMatrix per_example_gradients(const Mlp& net, std::span<const double> theta, const Dataset& batch,
                                         const Likelihood& lik) {
  detail::require_nonempty(batch, "per_example_gradients");
  const auto cache = net.forward_cached(theta, batch.x);
  DenseMatrix g(batch.size(), net.num_params());
  DenseMatrix seed(1, net.output_dim());
  for (std::size_t n = 0; n < batch.size(); ++n) {
    auto f = cache.outputs().row(n);
    detail::require_finite_outputs(f, n);
    const auto e = loglik_grad_wrt_f(f, batch.y.row(n), lik);
    std::copy(e.begin(), e.end(), seed.row(0).begin());
    net.accumulate_expand(net.sensitivities(theta, cache, n, seed), cache, n, g, n);
  }
  return g;
}

struct LogJointValue {
  double log_likelihood = 0.0;
  double log_prior = 0.0;  // already scaled by the batch fraction
  double total() const noexcept { return log_likelihood + log_prior; }
};

/// Σ_n log p(y_n|f_n) + (|batch| / n_total) log p(θ) and its gradient.
inline LogJointValue log_joint_and_grad(const Mlp& net, std::span<const double> theta, const Dataset& batch,
                                        const Likelihood& lik, const PriorPrecisions& prior,
                                        std::size_t n_total, Vector* grad) {
  detail::require_nonempty(batch, "grad_log_joint");
  const auto& layout = net.layout();
  const auto cache = net.forward_cached(theta, batch.x);
  const double frac = static_cast<double>(batch.size()) / static_cast<double>(n_total);

  LogJointValue v;
  if (grad) grad->assign(net.num_params(), 0.0);
  const std::size_t L = net.spec().num_layers();
  Vector delta, prev;
  for (std::size_t n = 0; n < batch.size(); ++n) {
    auto f = cache.outputs().row(n);
    detail::require_finite_outputs(f, n);
    const double ll = log_likelihood_row(f, batch.y.row(n), lik);
    if (!std::isfinite(ll)) throw NumericError("non-finite log-likelihood at example " + std::to_string(n));
    v.log_likelihood += ll;
    if (!grad) continue;
    // Vector backprop, cheaper than the matrix path for a single seed row.
    delta = loglik_grad_wrt_f(f, batch.y.row(n), lik);
    for (std::size_t l = L; l-- > 0;) {
      const auto& spec = net.spec();
      const std::size_t in = spec.fan_in(l), out = spec.fan_out(l);
      const auto& wg = layout.weight_group(l);
      const auto& bg = layout.bias_group(l);
      auto a = cache.inputs[l].row(n);
      for (std::size_t i = 0; i < out; ++i) {
        const double d = delta[i];
        double* gw = grad->data() + wg.offset + i * in;
        for (std::size_t j = 0; j < in; ++j) gw[j] += d * a[j];
        (*grad)[bg.offset + i] += d;
      }
      if (l == 0) break;
      auto w = net.weights(theta, l);
      prev.assign(in, 0.0);
      for (std::size_t i = 0; i < out; ++i) {
        const double d = delta[i];
        if (d == 0.0) continue;
        for (std::size_t j = 0; j < in; ++j) prev[j] += d * w[i * in + j];
      }
      auto z = cache.preacts[l - 1].row(n);
      const bool relu = spec.activations[l - 1] == Activation::relu;
      for (std::size_t j = 0; j < in; ++j) {
        if (relu) {
          if (!(z[j] > 0.0)) prev[j] = 0.0;
        } else {
          const double t = std::tanh(z[j]);
          prev[j] *= 1.0 - t * t;
        }
      }
      std::swap(delta, prev);
    }
  }
  v.log_prior = frac * log_prior(theta, layout, prior);
  if (grad) {
    for (std::size_t g = 0; g < layout.num_groups(); ++g) {
      const auto& pg = layout.group(g);
      const double d = prior.delta(g);
      for (std::size_t i = pg.offset; i < pg.offset + pg.length; ++i) (*grad)[i] -= frac * d * theta[i];
    }
  }
  return v;
}

/// ∇_θ [Σ_n log p(y_n|f(x_n,θ)) + (|batch|/n_total) log p(θ)].
inline Vector grad_log_joint(const Mlp& net, std::span<const double> theta, const Dataset& batch,
                             const Likelihood& lik, const PriorPrecisions& prior, std::size_t n_total) {
  Vector g;
  log_joint_and_grad(net, theta, batch, lik, prior, n_total, &g);
  return g;
}

inline double log_joint(const Mlp& net, std::span<const double> theta, const Dataset& data, const Likelihood& lik,
                        const PriorPrecisions& prior) {
  return log_joint_and_grad(net, theta, data, lik, prior, data.size(), nullptr).total();
}

}  // namespace marglik
