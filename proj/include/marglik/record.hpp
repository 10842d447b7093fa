#pragma once
// Run records: JSON serialization, trace and predictive CSVs, and the
// post-training ranking of runs by log marginal likelihood.

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <fstream>
#include <limits>
#include <map>
#include <numeric>
#include <optional>
#include <string>
#include <vector>

#include <nlohmann/json.hpp>

#include "marglik/marglik.hpp"
#include "marglik/network.hpp"
#include "marglik/training.hpp"

namespace marglik {

class RecordError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

/// Column names of the hyperparameters: one prior precision per group (or one
/// shared) followed by the likelihood hyperparameter.
inline std::vector<std::string> hyper_names(const ParamLayout& layout, PriorStructure structure,
                                            const Likelihood& lik) {
  std::vector<std::string> names;
  if (structure == PriorStructure::shared)
    names.emplace_back("delta");
  else
    for (const auto& g : layout.groups()) names.push_back("delta_" + g.name());
  names.push_back(lik.hyper_name());
  return names;
}

/// Hyperparameters in natural units, in hyper_names order.
inline Vector hyper_values(const HyperParams& h, PriorStructure structure) {
  Vector v;
  if (structure == PriorStructure::shared)
    v.push_back(h.prior.delta(0));
  else
    for (std::size_t g = 0; g < h.prior.size(); ++g) v.push_back(h.prior.delta(g));
  v.push_back(std::exp(h.likelihood.log_hyper));
  return v;
}

struct RecordTraceRow {
  std::size_t epoch = 0;
  double train_nll = 0.0;
  std::optional<double> log_marglik;
  std::optional<double> log_marglik_pre;
  std::optional<double> log_marglik_per_n;
  Vector hypers;

  friend bool operator==(const RecordTraceRow&, const RecordTraceRow&) = default;
};

struct RecordMarglik {
  std::size_t epoch = 0;
  double log_joint = 0.0;
  double log_det = 0.0;
  double log_marglik = 0.0;
  double log_marglik_per_n = 0.0;
  Vector hypers;

  friend bool operator==(const RecordMarglik&, const RecordMarglik&) = default;
};

struct RunRecord {
  std::string name;
  std::map<std::string, std::map<std::string, std::string>> config;
  NetworkSpec network;
  std::string dataset_fingerprint;
  std::size_t num_params = 0;
  std::size_t num_data = 0;
  std::vector<std::string> hyper_names;
  std::vector<RecordTraceRow> trace;
  RecordMarglik final_marglik;
  RecordMarglik best;
  HyperParams final_hypers;  // exact log-space values for rebuilding the posterior
  Vector theta;
  std::map<std::string, double> metrics;
  double wall_clock_seconds = 0.0;

  friend bool operator==(const RunRecord&, const RunRecord&) = default;
};

inline RecordMarglik record_marglik(const MargLikReport& r, std::size_t epoch, PriorStructure structure) {
  return {epoch, r.log_joint, r.log_det, r.log_marglik, r.log_marglik_per_example, hyper_values(r.hypers, structure)};
}

/// Fills the training-derived fields of a record.
inline RunRecord make_record(std::string name, const NetworkSpec& spec, const TrainResult& res,
                             const TrainConfig& cfg) {
  const ParamLayout layout(spec);
  RunRecord r;
  r.name = std::move(name);
  r.network = spec;
  r.num_params = layout.total();
  r.num_data = res.final_report.num_data;
  r.hyper_names = hyper_names(layout, cfg.prior_structure, res.hypers.likelihood);
  for (const auto& row : res.trace)
    r.trace.push_back({row.epoch, row.train_nll, row.log_marglik, row.log_marglik_pre, row.log_marglik_per_n,
                       hyper_values(row.hypers, cfg.prior_structure)});
  r.final_marglik = record_marglik(res.final_report, cfg.epochs, cfg.prior_structure);
  r.best = record_marglik(res.best.report, res.best.epoch, cfg.prior_structure);
  r.final_hypers = res.hypers;
  r.theta = res.theta;
  return r;
}

// JSON mapping. Doubles are written in shortest round-trip form.

inline void to_json(nlohmann::json& j, const NetworkSpec& s) {
  std::vector<std::string> acts;
  for (auto a : s.activations) acts.push_back(to_string(a));
  j = {{"input_dim", s.input_dim}, {"hidden", s.hidden}, {"output_dim", s.output_dim}, {"activations", acts}};
}
inline void from_json(const nlohmann::json& j, NetworkSpec& s) {
  s.input_dim = j.at("input_dim").get<std::size_t>();
  s.hidden = j.at("hidden").get<std::vector<std::size_t>>();
  s.output_dim = j.at("output_dim").get<std::size_t>();
  s.activations.clear();
  for (const auto& a : j.at("activations")) s.activations.push_back(parse_activation(a.get<std::string>()));
  s.validate();
}

inline void to_json(nlohmann::json& j, const HyperParams& h) {
  j = {{"log_delta", h.prior.log_delta},
       {"likelihood", h.likelihood.is_gaussian() ? "gaussian" : "categorical"},
       {"log_hyper", h.likelihood.log_hyper}};
}
inline void from_json(const nlohmann::json& j, HyperParams& h) {
  h.prior.log_delta = j.at("log_delta").get<Vector>();
  const auto kind = j.at("likelihood").get<std::string>();
  if (kind != "gaussian" && kind != "categorical") throw RecordError("unknown likelihood '" + kind + "'");
  h.likelihood = kind == "gaussian" ? Likelihood::gaussian(j.at("log_hyper").get<double>())
                                    : Likelihood::categorical(j.at("log_hyper").get<double>());
}

namespace record_detail {
inline nlohmann::json opt(const std::optional<double>& v) { return v ? nlohmann::json(*v) : nlohmann::json(nullptr); }
inline std::optional<double> opt(const nlohmann::json& j) {
  return j.is_null() ? std::nullopt : std::optional<double>(j.get<double>());
}
}  // namespace record_detail

inline void to_json(nlohmann::json& j, const RecordTraceRow& r) {
  j = {{"epoch", r.epoch},
       {"train_nll", r.train_nll},
       {"log_marglik", record_detail::opt(r.log_marglik)},
       {"log_marglik_pre", record_detail::opt(r.log_marglik_pre)},
       {"log_marglik_per_n", record_detail::opt(r.log_marglik_per_n)},
       {"hypers", r.hypers}};
}
inline void from_json(const nlohmann::json& j, RecordTraceRow& r) {
  r.epoch = j.at("epoch").get<std::size_t>();
  r.train_nll = j.at("train_nll").get<double>();
  r.log_marglik = record_detail::opt(j.at("log_marglik"));
  r.log_marglik_pre = record_detail::opt(j.at("log_marglik_pre"));
  r.log_marglik_per_n = record_detail::opt(j.at("log_marglik_per_n"));
  r.hypers = j.at("hypers").get<Vector>();
}

inline void to_json(nlohmann::json& j, const RecordMarglik& m) {
  j = {{"epoch", m.epoch},         {"log_joint", m.log_joint},
       {"log_det", m.log_det},     {"log_marglik", m.log_marglik},
       {"log_marglik_per_n", m.log_marglik_per_n}, {"hypers", m.hypers}};
}
inline void from_json(const nlohmann::json& j, RecordMarglik& m) {
  m.epoch = j.at("epoch").get<std::size_t>();
  m.log_joint = j.at("log_joint").get<double>();
  m.log_det = j.at("log_det").get<double>();
  m.log_marglik = j.at("log_marglik").get<double>();
  m.log_marglik_per_n = j.at("log_marglik_per_n").get<double>();
  m.hypers = j.at("hypers").get<Vector>();
}

inline void to_json(nlohmann::json& j, const RunRecord& r) {
  j = {{"name", r.name},
       {"config", r.config},
       {"network", r.network},
       {"dataset_fingerprint", r.dataset_fingerprint},
       {"num_params", r.num_params},
       {"num_data", r.num_data},
       {"hyper_names", r.hyper_names},
       {"trace", r.trace},
       {"final", r.final_marglik},
       {"best", r.best},
       {"final_hypers", r.final_hypers},
       {"theta", r.theta},
       {"metrics", r.metrics},
       {"wall_clock_seconds", r.wall_clock_seconds}};
}
inline void from_json(const nlohmann::json& j, RunRecord& r) {
  r.name = j.at("name").get<std::string>();
  r.config = j.at("config").get<std::map<std::string, std::map<std::string, std::string>>>();
  r.network = j.at("network").get<NetworkSpec>();
  r.dataset_fingerprint = j.at("dataset_fingerprint").get<std::string>();
  r.num_params = j.at("num_params").get<std::size_t>();
  r.num_data = j.at("num_data").get<std::size_t>();
  r.hyper_names = j.at("hyper_names").get<std::vector<std::string>>();
  r.trace = j.at("trace").get<std::vector<RecordTraceRow>>();
  r.final_marglik = j.at("final").get<RecordMarglik>();
  r.best = j.at("best").get<RecordMarglik>();
  r.final_hypers = j.at("final_hypers").get<HyperParams>();
  r.theta = j.at("theta").get<Vector>();
  r.metrics = j.at("metrics").get<std::map<std::string, double>>();
  r.wall_clock_seconds = j.at("wall_clock_seconds").get<double>();
}

inline void save_record(const std::string& path, const RunRecord& r) {
  std::ofstream out(path);
  if (!out) throw RecordError("cannot write record '" + path + "'");
  out << nlohmann::json(r).dump(1) << "\n";
  if (!out) throw RecordError("error while writing record '" + path + "'");
}

inline RunRecord load_record(const std::string& path) {
  std::ifstream in(path);
  if (!in) throw RecordError("cannot open record '" + path + "'");
  try {
    return nlohmann::json::parse(in).get<RunRecord>();
  } catch (const nlohmann::json::exception& e) {
    throw RecordError("malformed record '" + path + "': " + e.what());
  }
}

/// Nine significant digits, the precision of every CSV and console number.
inline std::string fmt9(double v) {
  char buf[32];
  std::snprintf(buf, sizeof buf, "%.9g", v);
  return buf;
}

inline void write_trace_csv(const std::string& path, const RunRecord& r) {
  std::ofstream out(path);
  if (!out) throw RecordError("cannot write trace '" + path + "'");
  out << "epoch,train_nll,log_marglik,log_marglik_per_n";
  for (const auto& n : r.hyper_names) out << "," << n;
  out << "\n";
  for (const auto& row : r.trace) {
    out << row.epoch << "," << fmt9(row.train_nll) << "," << (row.log_marglik ? fmt9(*row.log_marglik) : "") << ","
        << (row.log_marglik_per_n ? fmt9(*row.log_marglik_per_n) : "");
    for (double h : row.hypers) out << "," << fmt9(h);
    out << "\n";
  }
  if (!out) throw RecordError("error while writing trace '" + path + "'");
}

struct PredictiveCurve {
  Vector x, mean, epistemic_sd, total_sd;
};

inline void write_predictive_csv(const std::string& path, const PredictiveCurve& c) {
  std::ofstream out(path);
  if (!out) throw RecordError("cannot write predictive curve '" + path + "'");
  out << "x,mean,epistemic_sd,total_sd\n";
  for (std::size_t i = 0; i < c.x.size(); ++i)
    out << fmt9(c.x[i]) << "," << fmt9(c.mean[i]) << "," << fmt9(c.epistemic_sd[i]) << "," << fmt9(c.total_sd[i])
        << "\n";
  if (!out) throw RecordError("error while writing predictive curve '" + path + "'");
}

struct Ranking {
  std::vector<std::size_t> order;  // indices into the input, best first
  std::vector<std::string> warnings;
};

/// Descending by total log marginal likelihood; ties go to fewer parameters.
inline Ranking compare_runs(const std::vector<RunRecord>& records) {
  if (records.empty()) throw std::invalid_argument("compare_runs: no records");
  Ranking r;
  r.order.resize(records.size());
  std::iota(r.order.begin(), r.order.end(), 0);
  std::stable_sort(r.order.begin(), r.order.end(), [&](std::size_t a, std::size_t b) {
    const auto& ra = records[a].final_marglik;
    const auto& rb = records[b].final_marglik;
    if (ra.log_marglik != rb.log_marglik) return ra.log_marglik > rb.log_marglik;
    return records[a].num_params < records[b].num_params;
  });
  if (records.size() < 2) r.warnings.emplace_back("only one record; nothing to compare");
  for (const auto& rec : records)
    if (rec.dataset_fingerprint != records.front().dataset_fingerprint) {
      r.warnings.push_back("records were trained on different data (fingerprints " +
                           records.front().dataset_fingerprint + " vs " + rec.dataset_fingerprint +
                           "); marginal likelihoods are not comparable");
      break;
    }
  // With a common N the per-example normalization cannot change the winner.
  const bool same_n = std::all_of(records.begin(), records.end(),
                                  [&](const RunRecord& x) { return x.num_data == records.front().num_data; });
  if (same_n) {
    double best_per_n = -std::numeric_limits<double>::infinity();
    for (const auto& rec : records) best_per_n = std::max(best_per_n, rec.final_marglik.log_marglik_per_n);
    const double top = records[r.order.front()].final_marglik.log_marglik_per_n;
    if (std::abs(top - best_per_n) > 1e-12 * std::max(1.0, std::abs(best_per_n)))
      throw std::logic_error("compare_runs: per-example and total rankings disagree at equal N");
  }
  return r;
}

inline std::string format_ranking(const std::vector<RunRecord>& records, const Ranking& ranking) {
  std::string s = "rank,name,log_marglik,log_marglik_per_n,num_params,num_data\n";
  for (std::size_t i = 0; i < ranking.order.size(); ++i) {
    const auto& rec = records[ranking.order[i]];
    s += std::to_string(i + 1) + "," + rec.name + "," + fmt9(rec.final_marglik.log_marglik) + "," +
         fmt9(rec.final_marglik.log_marglik_per_n) + "," + std::to_string(rec.num_params) + "," +
         std::to_string(rec.num_data) + "\n";
  }
  return s;
}

}  // namespace marglik
