// Command-line front end: train, grid, compare and predict.

#include <CLI11.hpp>

#include <cstdio>
#include <filesystem>
#include <iostream>

#include "marglik/experiment.hpp"

using namespace marglik;
namespace fs = std::filesystem;

namespace {

struct Overrides {
  std::optional<std::uint64_t> seed;
  std::optional<std::string> curvature;
  bool no_online = false;
};

ExperimentConfig load_with_overrides(const std::string& path, const Overrides& o) {
  ExperimentConfig c = load_config(path);
  if (o.seed) c.train.seed = *o.seed;
  if (o.curvature) c.train.curvature = parse_curvature_kind(*o.curvature);
  if (o.no_online) c.train.online = false;
  return c;
}

void print_summary(const RunRecord& r) {
  std::printf("%s: log_marglik %s (per example %s), best %s at epoch %zu, %zu params, %.3gs\n", r.name.c_str(),
              fmt9(r.final_marglik.log_marglik).c_str(), fmt9(r.final_marglik.log_marglik_per_n).c_str(),
              fmt9(r.best.log_marglik).c_str(), r.best.epoch, r.num_params, r.wall_clock_seconds);
  for (const auto& [k, v] : r.metrics) std::printf("  %s = %s\n", k.c_str(), fmt9(v).c_str());
}

int cmd_train(const std::string& config, const Overrides& o, const std::string& out_dir) {
  const ExperimentConfig c = load_with_overrides(config, o);
  const ExperimentResult r = run_experiment(c, fs::path(out_dir).filename().string());
  for (const auto& f : write_outputs(r, out_dir)) std::printf("wrote %s\n", f.c_str());
  print_summary(r.record);
  return 0;
}

int cmd_grid(const std::string& config, const Overrides& o, const std::string& out_dir) {
  const ExperimentConfig c = load_with_overrides(config, o);
  const auto runs = run_grid(c);
  fs::create_directories(out_dir);
  const std::string summary = (fs::path(out_dir) / "grid.csv").string();
  std::ofstream out(summary);
  if (!out) throw RecordError("cannot write '" + summary + "'");
  const bool regression = runs.front().data.train.task == Task::regression;
  out << "prior_precision,log_marglik,log_marglik_per_n,test_map_loglik" << (regression ? ",test_map_rmse" : ",test_map_accuracy") << "\n";
  for (std::size_t i = 0; i < runs.size(); ++i) {
    const auto& r = runs[i].record;
    write_outputs(runs[i], (fs::path(out_dir) / r.name).string());
    const auto metric = [&](const char* k) {
      const auto it = r.metrics.find(k);
      return it == r.metrics.end() ? std::string() : fmt9(it->second);
    };
    out << fmt9(c.grid[i]) << "," << fmt9(r.final_marglik.log_marglik) << "," << fmt9(r.final_marglik.log_marglik_per_n)
        << "," << metric("test_map_loglik") << "," << metric(regression ? "test_map_rmse" : "test_map_accuracy") << "\n";
  }
  std::printf("wrote %s and %zu run directories\n", summary.c_str(), runs.size());
  return 0;
}

int cmd_compare(const std::vector<std::string>& paths) {
  std::vector<RunRecord> records;
  for (const auto& p : paths) {
    RunRecord r = load_record(p);
    if (r.name.empty()) r.name = p;
    records.push_back(std::move(r));
  }
  const Ranking ranking = compare_runs(records);
  for (const auto& w : ranking.warnings) std::fprintf(stderr, "warning: %s\n", w.c_str());
  std::fputs(format_ranking(records, ranking).c_str(), stdout);
  return 0;
}

int cmd_predict(const std::string& record_path, const std::string& csv_path, const std::string& out_path) {
  const RunRecord rec = load_record(record_path);
  const RestoredRun run = restore_run(rec);
  // Every column is an input.
  std::ifstream probe(csv_path);
  std::string header;
  if (!probe || !std::getline(probe, header)) throw DataError("cannot read '" + csv_path + "'");
  const std::size_t cols = detail::split_csv_line(header).size();
  if (cols != rec.network.input_dim)
    throw DataError(csv_path + ": expected " + std::to_string(rec.network.input_dim) + " input columns, found " +
                    std::to_string(cols));
  std::vector<double> values;
  std::size_t rows = 0, lineno = 1;
  for (std::string line; std::getline(probe, line);) {
    ++lineno;
    if (detail::trim(line).empty()) continue;
    const auto cells = detail::split_csv_line(line);
    if (cells.size() != cols) throw DataError(csv_path + ": row " + std::to_string(lineno) + " has wrong width");
    for (std::size_t c = 0; c < cols; ++c) values.push_back(detail::parse_cell(cells[c], lineno, c, csv_path));
    ++rows;
  }
  DenseMatrix x(rows, cols, values);
  run.data.x_map.apply(x);

  const Mlp net(rec.network);
  const Posterior post(net, run.cache, rec.final_hypers);
  const bool bayes = run.config.predict.kind != PredictiveKind::map;
  std::ofstream file;
  if (!out_path.empty()) {
    file.open(out_path);
    if (!file) throw RecordError("cannot write '" + out_path + "'");
  }
  std::ostream& out = out_path.empty() ? std::cout : file;
  for (std::size_t c = 0; c < cols; ++c) out << "x" << c << ",";
  if (run.data.train.task == Task::regression) {
    const RegressionPredictive p = bayes ? predict_bayes_regression(post, x)
                                         : predict_map_regression(net, rec.theta, x, rec.final_hypers.likelihood);
    for (std::size_t k = 0; k < p.mean.cols(); ++k)
      out << "mean" << k << ",epistemic_sd" << k << ",total_sd" << k << (k + 1 < p.mean.cols() ? "," : "\n");
    for (std::size_t i = 0; i < rows; ++i) {
      for (std::size_t c = 0; c < cols; ++c) out << fmt9(values[i * cols + c]) << ",";
      for (std::size_t k = 0; k < p.mean.cols(); ++k) {
        const double s = run.data.y_map.scale[k];
        out << fmt9(p.mean(i, k) * s + run.data.y_map.mean[k]) << "," << fmt9(std::sqrt(p.epistemic(i, k)) * s) << ","
            << fmt9(std::sqrt(p.total(i, k)) * s) << (k + 1 < p.mean.cols() ? "," : "\n");
      }
    }
  } else {
    const ClassPredictive p =
        bayes ? predict_bayes_classification(post, x, run.config.predict.samples, run.config.train.seed)
              : predict_map_classification(net, rec.theta, x, rec.final_hypers.likelihood);
    for (std::size_t k = 0; k < p.probs.cols(); ++k) out << "p" << k << (k + 1 < p.probs.cols() ? "," : "\n");
    for (std::size_t i = 0; i < rows; ++i) {
      for (std::size_t c = 0; c < cols; ++c) out << fmt9(values[i * cols + c]) << ",";
      for (std::size_t k = 0; k < p.probs.cols(); ++k)
        out << fmt9(p.probs(i, k)) << (k + 1 < p.probs.cols() ? "," : "\n");
    }
  }
  return 0;
}

void add_overrides(CLI::App* cmd, Overrides& o) {
  cmd->add_option("--seed", o.seed, "Training seed (parameter init and minibatch order)");
  cmd->add_option("--curvature", o.curvature, "Curvature: full-ggn, full-ef, kfac, diag-ggn, diag-ef")
      ->check(CLI::IsMember({"full-ggn", "full-ef", "kfac", "diag-ggn", "diag-ef"}));
  cmd->add_flag("--no-online", o.no_online, "Freeze all hyperparameters at their initial values");
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"Marginal-likelihood training and model selection for small MLPs"};
  app.require_subcommand(1);

  std::string config, out_dir = "out", record, csv, out_path;
  std::vector<std::string> records;
  Overrides train_o, grid_o;

  auto* train = app.add_subcommand("train", "Train one model and write record.json, trace.csv, predictive.csv");
  train->add_option("config", config, "Config file")->required()->check(CLI::ExistingFile);
  train->add_option("--out-dir", out_dir, "Output directory");
  add_overrides(train, train_o);

  auto* grid = app.add_subcommand("grid", "Fixed-precision sweep over train.grid; one run directory per point");
  grid->add_option("config", config, "Config file")->required()->check(CLI::ExistingFile);
  grid->add_option("--out-dir", out_dir, "Output directory");
  add_overrides(grid, grid_o);

  auto* compare = app.add_subcommand("compare", "Rank run records by log marginal likelihood");
  compare->add_option("records", records, "record.json files")->required()->check(CLI::ExistingFile);

  auto* predict = app.add_subcommand("predict", "Predict on a CSV of inputs with a trained record");
  predict->add_option("record", record, "record.json")->required()->check(CLI::ExistingFile);
  predict->add_option("csv", csv, "Input CSV with a header row")->required()->check(CLI::ExistingFile);
  predict->add_option("--out", out_path, "Output CSV (default stdout)");

  CLI11_PARSE(app, argc, argv);
  try {
    if (*train) return cmd_train(config, train_o, out_dir);
    if (*grid) return cmd_grid(config, grid_o, out_dir);
    if (*compare) return cmd_compare(records);
    if (*predict) return cmd_predict(record, csv, out_path);
  } catch (const std::exception& e) {
    std::fprintf(stderr, "error: %s\n", e.what());
    return 1;
  }
  return 0;
}
