#pragma once
// MAP training interleaved with online marginal-likelihood hyperparameter
// optimization, with best-marglik checkpointing.

#include <algorithm>
#include <cmath>
#include <limits>
#include <memory>
#include <numeric>
#include <optional>
#include <random>
#include <vector>

#include "marglik/curvature.hpp"
#include "marglik/dataset.hpp"
#include "marglik/marglik.hpp"
#include "marglik/network.hpp"
#include "marglik/objective.hpp"
#include "marglik/optim.hpp"

namespace marglik {

struct TrainConfig {
  std::size_t epochs = 100;
  std::size_t batch_size = 0;  // 0: full batch
  OptimizerKind optimizer = OptimizerKind::adam;
  double lr = 1e-3;
  double momentum = 0.9;
  std::size_t lr_decay_every = 0;  // 0: constant learning rate
  double lr_decay = 1.0;

  double hyper_lr = 0.1;                // γ
  std::size_t hyper_steps = 1;          // K
  std::size_t burn_in = 0;              // B
  std::size_t marglik_frequency = 1;    // F
  bool online = true;                   // false freezes every hyperparameter
  bool learn_prior = true;
  bool learn_likelihood = true;

  CurvatureKind curvature = CurvatureKind::full_ggn;
  PriorStructure prior_structure = PriorStructure::per_group;
  FullRoute route = FullRoute::automatic;

  double prior_precision = 1.0;  // initial δ for every group
  double sigma2 = 1.0;           // initial observation noise (regression)
  double temperature = 1.0;      // initial softmax temperature (classification)

  std::uint64_t seed = 0;

  void validate() const {
    if (epochs == 0) throw std::invalid_argument("train.epochs must be >= 1");
    if (marglik_frequency == 0) throw std::invalid_argument("train.marglik_frequency (F) must be >= 1");
    if (hyper_steps == 0) throw std::invalid_argument("train.hyper_steps (K) must be >= 1");
    if (!(hyper_lr > 0.0)) throw std::invalid_argument("train.hyper_lr (gamma) must be > 0");
    if (!(lr >= 0.0)) throw std::invalid_argument("train.lr must be >= 0");
    if (!(lr_decay > 0.0)) throw std::invalid_argument("train.lr_decay must be > 0");
    if (!(prior_precision > 0.0) || !(sigma2 > 0.0) || !(temperature > 0.0))
      throw std::invalid_argument("initial hyperparameters must be > 0");
  }
};

/// Estimation events happen after epoch e (1-indexed) when e > B and e mod F = 0.
inline bool marglik_schedule(std::size_t epoch, std::size_t burn_in, std::size_t frequency) {
  if (epoch == 0) throw std::invalid_argument("epochs are 1-indexed");
  return epoch > burn_in && epoch % frequency == 0;
}

inline Likelihood likelihood_for(const Dataset& data, const TrainConfig& cfg) {
  return data.task == Task::regression ? Likelihood::gaussian(std::log(cfg.sigma2))
                                       : Likelihood::categorical(std::log(cfg.temperature));
}

inline HyperParams initial_hypers(const ParamLayout& layout, const Dataset& data, const TrainConfig& cfg) {
  return {PriorPrecisions::uniform(layout, cfg.prior_precision), likelihood_for(data, cfg)};
}

struct TrainState {
  Vector theta;
  HyperParams hypers;
  Optimizer optimizer;
  std::mt19937_64 shuffle_rng;
  std::size_t epoch = 0;  // completed epochs
};

inline TrainState initial_state(const NetworkSpec& spec, const Dataset& data, const TrainConfig& cfg) {
  ParamVector p = init_params(spec, cfg.seed);
  HyperParams h = initial_hypers(p.layout, data, cfg);
  return {std::move(p.values), std::move(h), Optimizer::make(cfg.optimizer, cfg.lr, cfg.momentum),
          std::mt19937_64(cfg.seed ^ 0x9e3779b97f4a7c15ULL), 0};
}

struct EpochStats {
  double neg_log_joint = 0.0;  // Σ over batches; equals the full-data value when lr = 0
  double nll = 0.0;            // mean negative log-likelihood per example
};

/// One pass over seeded-shuffled minibatches, one optimizer step per batch.
inline EpochStats train_map_epoch(const Mlp& net, TrainState& state, const Dataset& data, const TrainConfig& cfg) {
  const std::size_t n = data.size();
  if (n == 0) throw std::invalid_argument("train_map_epoch: empty dataset");
  if (cfg.lr_decay_every > 0 && state.epoch > 0 && state.epoch % cfg.lr_decay_every == 0)
    state.optimizer.set_lr(state.optimizer.lr() * cfg.lr_decay);

  std::vector<std::size_t> order(n);
  std::iota(order.begin(), order.end(), 0);
  std::shuffle(order.begin(), order.end(), state.shuffle_rng);
  const std::size_t bs = cfg.batch_size == 0 ? n : std::min(cfg.batch_size, n);

  EpochStats stats;
  Vector grad;
  for (std::size_t start = 0; start < n; start += bs) {
    const std::size_t end = std::min(n, start + bs);
    const Dataset batch = data.subset(std::span<const std::size_t>(order).subspan(start, end - start));
    LogJointValue v;
    try {
      v = log_joint_and_grad(net, state.theta, batch, state.hypers.likelihood, state.hypers.prior, n, &grad);
    } catch (const NumericError& e) {
      throw NumericError("epoch " + std::to_string(state.epoch + 1) + ", batch starting at " + std::to_string(start) +
                         ": " + e.what());
    }
    stats.neg_log_joint -= v.total();
    stats.nll -= v.log_likelihood;
    for (double& g : grad) g = -g;
    state.optimizer.step(state.theta, grad);
  }
  stats.nll /= static_cast<double>(n);
  ++state.epoch;
  return stats;
}

struct Checkpoint {
  Vector theta;
  HyperParams hypers;
  MargLikReport report;
  std::size_t epoch = 0;
};

struct TraceRow {
  std::size_t epoch = 0;
  double train_nll = 0.0;
  std::optional<double> log_marglik;      // after the K hyperparameter steps
  std::optional<double> log_marglik_pre;  // before them
  std::optional<double> log_marglik_per_n;
  HyperParams hypers;
};

struct TrainResult {
  Vector theta;
  HyperParams hypers;
  MargLikReport final_report;
  Checkpoint best;
  std::vector<TraceRow> trace;
  std::shared_ptr<const LaplaceCache> posterior;  // Laplace cache at the final θ
};

namespace detail {

/// Hyperparameters as the optimizer's coordinate vector and back.
inline Vector hyper_coords(const HyperParams& h, PriorStructure structure) {
  Vector c = structure == PriorStructure::shared ? Vector{h.prior.log_delta.at(0)} : h.prior.log_delta;
  c.push_back(h.likelihood.log_hyper);
  return c;
}

inline void set_hyper_coords(HyperParams& h, std::span<const double> c, PriorStructure structure) {
  if (structure == PriorStructure::shared)
    std::fill(h.prior.log_delta.begin(), h.prior.log_delta.end(), c[0]);
  else
    std::copy(c.begin(), c.end() - 1, h.prior.log_delta.begin());
  h.likelihood.log_hyper = c.back();
}

}  // namespace detail

/// K hyperparameter ascent steps on a fixed Laplace cache. Returns the
/// evaluation at the final hyperparameters.
inline MargLikReport optimize_hypers(const LaplaceCache& cache, HyperParams& hypers, Adam& hyper_opt,
                                     std::size_t steps, bool learn_prior, bool learn_likelihood) {
  const PriorStructure structure = cache.prior_structure();
  Vector coords = detail::hyper_coords(hypers, structure);
  for (std::size_t k = 0; k < steps; ++k) {
    Vector g = cache.evaluate(hypers).gradient;
    for (std::size_t i = 0; i < g.size(); ++i) {
      const bool is_lik = i + 1 == g.size();
      g[i] = (is_lik ? learn_likelihood : learn_prior) ? -g[i] : 0.0;
    }
    hyper_opt.step(coords, g);
    detail::set_hyper_coords(hypers, coords, structure);
  }
  MargLikReport r = cache.evaluate(hypers, false).report;
  return r;
}

/// Marginal-likelihood based training: MAP epochs, and at scheduled epochs a
/// curvature refresh followed by K Adam steps on the hyperparameters.
inline TrainResult run_marglik_training(const NetworkSpec& spec, const Dataset& data, const TrainConfig& cfg) {
  cfg.validate();
  const Mlp net(spec);
  if (data.input_dim() != spec.input_dim) throw DimensionError("data input width does not match the network");
  if (data.output_dim() != spec.output_dim) throw DimensionError("data output width does not match the network");
  const CacheOptions cache_opts{cfg.prior_structure, cfg.route};

  TrainState state = initial_state(spec, data, cfg);
  Adam hyper_opt{cfg.hyper_lr};
  TrainResult result;
  bool have_best = false;

  for (std::size_t epoch = 1; epoch <= cfg.epochs; ++epoch) {
    const EpochStats stats = train_map_epoch(net, state, data, cfg);
    TraceRow row{epoch, stats.nll, std::nullopt, std::nullopt, std::nullopt, state.hypers};
    if (cfg.online && marglik_schedule(epoch, cfg.burn_in, cfg.marglik_frequency)) {
      const LaplaceCache cache =
          build_laplace(cfg.curvature, net, state.theta, data, state.hypers.likelihood, cache_opts);
      row.log_marglik_pre = cache.log_marglik(state.hypers);
      const MargLikReport post =
          optimize_hypers(cache, state.hypers, hyper_opt, cfg.hyper_steps, cfg.learn_prior, cfg.learn_likelihood);
      row.log_marglik = post.log_marglik;
      row.log_marglik_per_n = post.log_marglik_per_example;
      row.hypers = state.hypers;
      if (!have_best || post.log_marglik > result.best.report.log_marglik) {
        result.best = {state.theta, state.hypers, post, epoch};
        have_best = true;
      }
    }
    result.trace.push_back(std::move(row));
  }

  LaplaceCache final_cache = build_laplace(cfg.curvature, net, state.theta, data, state.hypers.likelihood, cache_opts);
  result.final_report = final_cache.evaluate(state.hypers, false).report;
  if (!have_best) result.best = {state.theta, state.hypers, result.final_report, cfg.epochs};
  result.theta = std::move(state.theta);
  result.hypers = std::move(state.hypers);
  result.posterior = std::make_shared<const LaplaceCache>(std::move(final_cache));
  return result;
}

}  // namespace marglik
