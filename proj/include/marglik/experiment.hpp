#pragma once
// Config-driven experiments: data preparation, training, evaluation and the
// files written for each run.

#include <chrono>
#include <filesystem>
#include <string>
#include <vector>

#include "marglik/config.hpp"
#include "marglik/data.hpp"
#include "marglik/metrics.hpp"
#include "marglik/predictive.hpp"
#include "marglik/record.hpp"
#include "marglik/training.hpp"

namespace marglik {

/// Train/test data in model units for any configured source.
inline PreparedData prepare_data(const DataConfig& d) {
  switch (d.kind) {
    case DataKind::sinusoid: {
      SinusoidSpec s = d.sinusoid;
      s.n = d.n;
      s.seed = d.seed;
      Dataset train = gen_sinusoid(s);
      s.n = d.test_n;
      s.seed = d.seed + 1;
      return standardize({std::move(train), gen_sinusoid(s)}, false, false);
    }
    case DataKind::banana: {
      BananaSpec b = d.banana;
      b.n = d.n;
      b.seed = d.seed;
      Dataset train = gen_banana(b);
      b.n = d.test_n;
      b.seed = d.seed + 1;
      return standardize({std::move(train), gen_banana(b)}, false, false);
    }
    case DataKind::csv: return load_csv(d.csv);
  }
  throw std::logic_error("unhandled data kind");
}

struct ExperimentResult {
  RunRecord record;
  TrainResult training;
  PreparedData data;
  NetworkSpec network;
};

namespace experiment_detail {

inline void regression_metrics(std::map<std::string, double>& m, const std::string& prefix,
                               const RegressionPredictive& p, const Dataset& d, const Standardizer& y_map) {
  m[prefix + "rmse"] = rmse(p.mean, d.y, y_map.scale);
  m[prefix + "loglik"] = gaussian_test_loglik(p.mean, p.total, d.y, y_map.scale);
}

inline void classification_metrics(std::map<std::string, double>& m, const std::string& prefix,
                                   const ClassPredictive& p, const Dataset& d, std::size_t bins) {
  m[prefix + "accuracy"] = accuracy(p.probs, d.y);
  m[prefix + "loglik"] = categorical_test_loglik(p.probs, d.y);
  m[prefix + "ece"] = expected_calibration_error(p.probs, d.y, bins);
}

}  // namespace experiment_detail

/// Train and test metrics. Regression metrics are in original target units.
inline std::map<std::string, double> evaluate_run(const ExperimentConfig& cfg, const Mlp& net,
                                                  const TrainResult& res, const PreparedData& data) {
  using namespace experiment_detail;
  std::map<std::string, double> m;
  const bool map = cfg.predict.kind != PredictiveKind::bayes;
  const bool bayes = cfg.predict.kind != PredictiveKind::map;
  std::optional<Posterior> post;
  if (bayes) post.emplace(net, res.posterior, res.hypers);
  const Likelihood& lik = res.hypers.likelihood;
  const std::pair<const char*, const Dataset*> parts[] = {{"train_", &data.train}, {"test_", &data.test}};
  for (const auto& [name, d] : parts) {
    if (d->size() == 0) continue;
    if (d->task == Task::regression) {
      if (map) regression_metrics(m, std::string(name) + "map_", predict_map_regression(net, res.theta, d->x, lik), *d,
                                  data.y_map);
      if (bayes) regression_metrics(m, std::string(name) + "bayes_", predict_bayes_regression(*post, d->x), *d,
                                    data.y_map);
    } else {
      if (map)
        classification_metrics(m, std::string(name) + "map_", predict_map_classification(net, res.theta, d->x, lik),
                               *d, cfg.predict.ece_bins);
      if (bayes)
        classification_metrics(m, std::string(name) + "bayes_",
                               predict_bayes_classification(*post, d->x, cfg.predict.samples, cfg.train.seed), *d,
                               cfg.predict.ece_bins);
    }
  }
  return m;
}

inline ExperimentResult run_experiment(const ExperimentConfig& cfg, std::string name = "run") {
  const auto errors = config_problems(cfg);
  if (!errors.empty()) throw ConfigError(errors);
  const auto t0 = std::chrono::steady_clock::now();
  PreparedData data = prepare_data(cfg.data);
  const NetworkSpec spec = cfg.network(data.train.input_dim(), data.train.output_dim());
  TrainResult res = run_marglik_training(spec, data.train, cfg.train);
  const Mlp net(spec);
  RunRecord rec = make_record(std::move(name), spec, res, cfg.train);
  rec.config = config_sections(cfg);
  rec.dataset_fingerprint = fingerprint(data.train);
  rec.metrics = evaluate_run(cfg, net, res, data);
  rec.wall_clock_seconds = std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
  return {std::move(rec), std::move(res), std::move(data), spec};
}

/// One frozen-hyperparameter run per grid precision (shared prior δ).
inline std::vector<ExperimentResult> run_grid(const ExperimentConfig& cfg) {
  if (cfg.grid.empty()) throw ConfigError({"grid mode needs train.grid or train.grid_logspace"});
  std::vector<ExperimentResult> out;
  for (std::size_t i = 0; i < cfg.grid.size(); ++i) {
    ExperimentConfig c = cfg;
    c.train.online = false;
    c.train.prior_precision = cfg.grid[i];
    c.grid.clear();
    out.push_back(run_experiment(c, "grid_" + std::to_string(i)));
  }
  return out;
}

/// Predictive mean and standard deviations on an evenly spaced 1-D input grid
/// extending the training range by 25% on each side, in original units.
inline PredictiveCurve predictive_curve(const ExperimentResult& r, std::size_t points = 200) {
  const Dataset& train = r.data.train;
  if (train.input_dim() != 1 || train.task != Task::regression || train.output_dim() != 1)
    throw std::invalid_argument("predictive curves need 1-D regression data");
  const auto [lo_it, hi_it] = std::minmax_element(train.x.data().begin(), train.x.data().end());
  const double span = *hi_it - *lo_it, lo = *lo_it - 0.25 * span, hi = *hi_it + 0.25 * span;
  DenseMatrix xs(points, 1);
  for (std::size_t i = 0; i < points; ++i) xs(i, 0) = lo + (hi - lo) * static_cast<double>(i) / (points - 1.0);
  const Mlp net(r.network);
  const Posterior post(net, r.training.posterior, r.training.hypers);
  const RegressionPredictive p = predict_bayes_regression(post, xs);
  const double ys = r.data.y_map.scale[0], ym = r.data.y_map.mean[0];
  const double xsd = r.data.x_map.scale[0], xm = r.data.x_map.mean[0];
  PredictiveCurve c;
  for (std::size_t i = 0; i < points; ++i) {
    c.x.push_back(xs(i, 0) * xsd + xm);
    c.mean.push_back(p.mean(i, 0) * ys + ym);
    c.epistemic_sd.push_back(std::sqrt(p.epistemic(i, 0)) * ys);
    c.total_sd.push_back(std::sqrt(p.total(i, 0)) * ys);
  }
  return c;
}

/// record.json, trace.csv and, for 1-D regression, predictive.csv.
inline std::vector<std::string> write_outputs(const ExperimentResult& r, const std::string& out_dir) {
  namespace fs = std::filesystem;
  std::error_code ec;
  fs::create_directories(out_dir, ec);
  if (ec) throw RecordError("cannot create output directory '" + out_dir + "': " + ec.message());
  std::vector<std::string> files{(fs::path(out_dir) / "record.json").string(),
                                 (fs::path(out_dir) / "trace.csv").string()};
  save_record(files[0], r.record);
  write_trace_csv(files[1], r.record);
  const Dataset& t = r.data.train;
  if (t.task == Task::regression && t.input_dim() == 1 && t.output_dim() == 1) {
    files.push_back((fs::path(out_dir) / "predictive.csv").string());
    write_predictive_csv(files.back(), predictive_curve(r));
  }
  return files;
}

/// Rebuilds the trained posterior of a record from its configuration, after
/// checking the regenerated training data against the stored fingerprint.
struct RestoredRun {
  ExperimentConfig config;
  PreparedData data;
  NetworkSpec network;
  std::shared_ptr<const LaplaceCache> cache;
};

inline RestoredRun restore_run(const RunRecord& rec) {
  std::vector<std::pair<std::string, std::string>> pairs;
  for (const auto& [sec, kv] : rec.config)
    for (const auto& [k, v] : kv) pairs.emplace_back(sec + "." + k, v);
  RestoredRun r{config_from_pairs(pairs), {}, rec.network, nullptr};
  r.data = prepare_data(r.config.data);
  const std::string fp = fingerprint(r.data.train);
  if (fp != rec.dataset_fingerprint)
    throw RecordError("training data for record '" + rec.name + "' changed (fingerprint " + fp + ", recorded " +
                      rec.dataset_fingerprint + ")");
  const Mlp net(rec.network);
  r.cache = std::make_shared<const LaplaceCache>(build_laplace(r.config.train.curvature, net, rec.theta, r.data.train,
                                                               rec.final_hypers.likelihood,
                                                               {r.config.train.prior_structure, r.config.train.route}));
  return r;
}

}  // namespace marglik
