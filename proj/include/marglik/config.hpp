#pragma once
// Experiment configuration: INI-style sections [data], [model], [train] and
// [curvature]. Every key is registered in one table used for parsing, for
// error reporting and for writing the effective configuration back out.

#include <boost/property_tree/ini_parser.hpp>
#include <boost/property_tree/ptree.hpp>

#include <charconv>
#include <cmath>
#include <cstdio>
#include <functional>
#include <map>
#include <sstream>
#include <string>
#include <vector>

#include "marglik/curvature.hpp"
#include "marglik/data.hpp"
#include "marglik/network.hpp"
#include "marglik/training.hpp"

namespace marglik {

class ConfigError : public std::invalid_argument {
 public:
  explicit ConfigError(std::vector<std::string> problems)
      : std::invalid_argument(join(problems)), problems_(std::move(problems)) {}
  const std::vector<std::string>& problems() const noexcept { return problems_; }

 private:
  static std::string join(const std::vector<std::string>& p) {
    std::string s = "invalid configuration:";
    for (const auto& x : p) s += "\n  " + x;
    return s;
  }
  std::vector<std::string> problems_;
};

enum class DataKind { sinusoid, banana, csv };

inline std::string to_string(DataKind k) {
  switch (k) {
    case DataKind::sinusoid: return "sinusoid";
    case DataKind::banana: return "banana";
    case DataKind::csv: return "csv";
  }
  return "?";
}

struct DataConfig {
  DataKind kind = DataKind::sinusoid;
  SinusoidSpec sinusoid;
  BananaSpec banana;
  CsvSpec csv;
  std::size_t n = 100;       // generators: training examples
  std::uint64_t seed = 0;    // generators: training draw; the test draw uses seed + 1
  std::size_t test_n = 500;  // generators: held-out draws from the same process
};

enum class PredictiveKind { map, bayes, both };

inline std::string to_string(PredictiveKind k) {
  return k == PredictiveKind::map ? "map" : k == PredictiveKind::bayes ? "bayes" : "both";
}

struct PredictConfig {
  PredictiveKind kind = PredictiveKind::both;
  std::size_t samples = 1000;
  std::size_t ece_bins = 15;
};

struct ExperimentConfig {
  DataConfig data;
  std::vector<std::size_t> hidden{50};
  Activation activation = Activation::tanh;
  TrainConfig train;
  PredictConfig predict;
  Vector grid;  // fixed prior precisions for grid mode

  /// Input and output widths follow the data.
  NetworkSpec network(std::size_t input_dim, std::size_t output_dim) const {
    return NetworkSpec::mlp(input_dim, hidden, output_dim, activation);
  }
};

namespace config_detail {

inline std::string trim(const std::string& s) { return detail::trim(s); }

inline double to_double(const std::string& raw) {
  const std::string s = trim(raw);
  double v = 0.0;
  const auto [p, ec] = std::from_chars(s.data(), s.data() + s.size(), v);
  if (s.empty() || ec != std::errc() || p != s.data() + s.size()) throw std::invalid_argument("not a number");
  return v;
}

inline std::uint64_t to_uint(const std::string& raw) {
  const std::string s = trim(raw);
  std::uint64_t v = 0;
  const auto [p, ec] = std::from_chars(s.data(), s.data() + s.size(), v);
  if (s.empty() || ec != std::errc() || p != s.data() + s.size())
    throw std::invalid_argument("not a non-negative integer");
  return v;
}

inline bool to_bool(const std::string& raw) {
  const std::string s = trim(raw);
  if (s == "true" || s == "yes" || s == "1" || s == "on") return true;
  if (s == "false" || s == "no" || s == "0" || s == "off") return false;
  throw std::invalid_argument("not a boolean (true/false)");
}

inline std::vector<std::string> to_list(const std::string& raw) {
  std::vector<std::string> out;
  std::string item;
  std::istringstream ss(raw);
  while (std::getline(ss, item, ',')) {
    item = trim(item);
    if (!item.empty()) out.push_back(item);
  }
  return out;
}

inline std::string fmt(double v) {
  char buf[32];
  std::snprintf(buf, sizeof buf, "%.17g", v);
  return buf;
}

template <class T>
std::string fmt_list(const std::vector<T>& v) {
  std::string s;
  for (std::size_t i = 0; i < v.size(); ++i) {
    if (i) s += ", ";
    if constexpr (std::is_floating_point_v<T>)
      s += fmt(v[i]);
    else
      s += std::to_string(v[i]);
  }
  return s;
}

inline std::string fmt_bool(bool b) { return b ? "true" : "false"; }

struct Key {
  std::string section;
  std::string name;
  std::function<void(ExperimentConfig&, const std::string&)> set;
  std::function<std::string(const ExperimentConfig&)> get;
};

inline Vector logspace(double lo, double hi, std::size_t count) {
  if (!(lo > 0.0 && hi > lo) || count < 2) throw std::invalid_argument("need 0 < lo < hi and count >= 2");
  Vector v(count);
  const double a = std::log(lo), b = std::log(hi);
  for (std::size_t i = 0; i < count; ++i)
    v[i] = std::exp(a + (b - a) * static_cast<double>(i) / static_cast<double>(count - 1));
  return v;
}

#define MARGLIK_NUM(sec, key, expr)                                                        \
  Key {                                                                                    \
    sec, key, [](ExperimentConfig& c, const std::string& s) { expr = to_double(s); },     \
        [](const ExperimentConfig& c) { return fmt(expr); }                               \
  }
#define MARGLIK_UINT(sec, key, expr)                                                       \
  Key {                                                                                    \
    sec, key, [](ExperimentConfig& c, const std::string& s) { expr = to_uint(s); },       \
        [](const ExperimentConfig& c) { return std::to_string(expr); }                    \
  }
#define MARGLIK_BOOL(sec, key, expr)                                                       \
  Key {                                                                                    \
    sec, key, [](ExperimentConfig& c, const std::string& s) { expr = to_bool(s); },       \
        [](const ExperimentConfig& c) { return fmt_bool(expr); }                          \
  }

inline const std::vector<Key>& keys() {
  static const std::vector<Key> table = {
      Key{"data", "kind",
          [](ExperimentConfig& c, const std::string& s) {
            const std::string v = trim(s);
            if (v == "sinusoid") c.data.kind = DataKind::sinusoid;
            else if (v == "banana") c.data.kind = DataKind::banana;
            else if (v == "csv") c.data.kind = DataKind::csv;
            else throw std::invalid_argument("expected sinusoid, banana or csv");
          },
          [](const ExperimentConfig& c) { return to_string(c.data.kind); }},
      MARGLIK_UINT("data", "seed", c.data.seed),
      MARGLIK_UINT("data", "n", c.data.n),
      MARGLIK_UINT("data", "test_n", c.data.test_n),
      MARGLIK_NUM("data", "noise_sd", c.data.sinusoid.noise_sd),
      MARGLIK_NUM("data", "x_min", c.data.sinusoid.x_min),
      MARGLIK_NUM("data", "x_max", c.data.sinusoid.x_max),
      MARGLIK_NUM("data", "gap_lo", c.data.sinusoid.gap_lo),
      MARGLIK_NUM("data", "gap_hi", c.data.sinusoid.gap_hi),
      MARGLIK_NUM("data", "omega", c.data.sinusoid.omega),
      MARGLIK_NUM("data", "slope", c.data.sinusoid.slope),
      MARGLIK_NUM("data", "banana_noise", c.data.banana.noise),
      Key{"data", "path", [](ExperimentConfig& c, const std::string& s) { c.data.csv.path = trim(s); },
          [](const ExperimentConfig& c) { return c.data.csv.path; }},
      Key{"data", "targets",
          [](ExperimentConfig& c, const std::string& s) {
            c.data.csv.targets.clear();
            for (const auto& t : to_list(s)) c.data.csv.targets.push_back(to_uint(t));
          },
          [](const ExperimentConfig& c) { return fmt_list(c.data.csv.targets); }},
      Key{"data", "task",
          [](ExperimentConfig& c, const std::string& s) {
            const std::string v = trim(s);
            if (v == "regression") c.data.csv.task = Task::regression;
            else if (v == "classification") c.data.csv.task = Task::classification;
            else throw std::invalid_argument("expected regression or classification");
          },
          [](const ExperimentConfig& c) { return to_string(c.data.csv.task); }},
      MARGLIK_BOOL("data", "standardize", c.data.csv.standardize),
      MARGLIK_NUM("data", "train_fraction", c.data.csv.train_fraction),
      MARGLIK_UINT("data", "split_seed", c.data.csv.split_seed),

      Key{"model", "hidden",
          [](ExperimentConfig& c, const std::string& s) {
            c.hidden.clear();
            for (const auto& t : to_list(s)) c.hidden.push_back(to_uint(t));
          },
          [](const ExperimentConfig& c) { return fmt_list(c.hidden); }},
      Key{"model", "activation",
          [](ExperimentConfig& c, const std::string& s) { c.activation = parse_activation(trim(s)); },
          [](const ExperimentConfig& c) { return to_string(c.activation); }},

      MARGLIK_UINT("train", "epochs", c.train.epochs),
      MARGLIK_UINT("train", "batch_size", c.train.batch_size),
      Key{"train", "optimizer",
          [](ExperimentConfig& c, const std::string& s) { c.train.optimizer = parse_optimizer_kind(trim(s)); },
          [](const ExperimentConfig& c) { return to_string(c.train.optimizer); }},
      MARGLIK_NUM("train", "lr", c.train.lr),
      MARGLIK_NUM("train", "momentum", c.train.momentum),
      MARGLIK_UINT("train", "lr_decay_every", c.train.lr_decay_every),
      MARGLIK_NUM("train", "lr_decay", c.train.lr_decay),
      MARGLIK_NUM("train", "hyper_lr", c.train.hyper_lr),
      MARGLIK_UINT("train", "hyper_steps", c.train.hyper_steps),
      MARGLIK_UINT("train", "burn_in", c.train.burn_in),
      MARGLIK_UINT("train", "marglik_frequency", c.train.marglik_frequency),
      MARGLIK_BOOL("train", "online", c.train.online),
      MARGLIK_BOOL("train", "learn_prior", c.train.learn_prior),
      MARGLIK_BOOL("train", "learn_likelihood", c.train.learn_likelihood),
      MARGLIK_NUM("train", "prior_precision", c.train.prior_precision),
      MARGLIK_NUM("train", "sigma2", c.train.sigma2),
      MARGLIK_NUM("train", "temperature", c.train.temperature),
      MARGLIK_UINT("train", "seed", c.train.seed),
      Key{"train", "grid",
          [](ExperimentConfig& c, const std::string& s) {
            c.grid.clear();
            for (const auto& t : to_list(s)) c.grid.push_back(to_double(t));
          },
          [](const ExperimentConfig& c) { return fmt_list(c.grid); }},
      Key{"train", "grid_logspace",
          [](ExperimentConfig& c, const std::string& s) {
            const auto parts = to_list(s);
            if (parts.size() != 3) throw std::invalid_argument("expected lo, hi, count");
            c.grid = logspace(to_double(parts[0]), to_double(parts[1]), to_uint(parts[2]));
          },
          nullptr},

      Key{"curvature", "kind",
          [](ExperimentConfig& c, const std::string& s) { c.train.curvature = parse_curvature_kind(trim(s)); },
          [](const ExperimentConfig& c) { return to_string(c.train.curvature); }},
      Key{"curvature", "prior",
          [](ExperimentConfig& c, const std::string& s) {
            const std::string v = trim(s);
            if (v == "per-group") c.train.prior_structure = PriorStructure::per_group;
            else if (v == "shared") c.train.prior_structure = PriorStructure::shared;
            else throw std::invalid_argument("expected per-group or shared");
          },
          [](const ExperimentConfig& c) {
            return std::string(c.train.prior_structure == PriorStructure::shared ? "shared" : "per-group");
          }},
      Key{"curvature", "route",
          [](ExperimentConfig& c, const std::string& s) {
            const std::string v = trim(s);
            if (v == "auto") c.train.route = FullRoute::automatic;
            else if (v == "direct") c.train.route = FullRoute::direct;
            else if (v == "kernel") c.train.route = FullRoute::kernel;
            else throw std::invalid_argument("expected auto, direct or kernel");
          },
          [](const ExperimentConfig& c) {
            return std::string(c.train.route == FullRoute::automatic ? "auto"
                               : c.train.route == FullRoute::direct  ? "direct"
                                                                     : "kernel");
          }},
      Key{"curvature", "predictive",
          [](ExperimentConfig& c, const std::string& s) {
            const std::string v = trim(s);
            if (v == "map") c.predict.kind = PredictiveKind::map;
            else if (v == "bayes") c.predict.kind = PredictiveKind::bayes;
            else if (v == "both") c.predict.kind = PredictiveKind::both;
            else throw std::invalid_argument("expected map, bayes or both");
          },
          [](const ExperimentConfig& c) { return to_string(c.predict.kind); }},
      MARGLIK_UINT("curvature", "samples", c.predict.samples),
      MARGLIK_UINT("curvature", "ece_bins", c.predict.ece_bins),
  };
  return table;
}

#undef MARGLIK_NUM
#undef MARGLIK_UINT
#undef MARGLIK_BOOL

}  // namespace config_detail

/// Semantic checks across keys; returns every problem found.
inline std::vector<std::string> config_problems(const ExperimentConfig& c) {
  std::vector<std::string> p;
  const auto check = [&p](auto&& f) {
    try {
      f();
    } catch (const std::exception& e) {
      p.emplace_back(e.what());
    }
  };
  check([&] { c.train.validate(); });
  for (auto w : c.hidden)
    if (w == 0) p.emplace_back("model.hidden widths must be >= 1");
  if (c.data.kind != DataKind::csv && c.data.n < 2) p.emplace_back("data.n must be >= 2");
  if (c.data.kind == DataKind::sinusoid) check([&] {
      SinusoidSpec s = c.data.sinusoid;
      s.n = std::max<std::size_t>(c.data.n, 2);
      s.validate();
    });
  if (c.data.kind == DataKind::banana) check([&] {
      BananaSpec b = c.data.banana;
      b.n = std::max<std::size_t>(c.data.n, 2);
      b.validate();
    });
  if (c.data.kind == DataKind::csv && c.data.csv.path.empty()) p.emplace_back("data.path is required for csv data");
  if (c.data.kind == DataKind::csv && !(c.data.csv.train_fraction > 0.0 && c.data.csv.train_fraction < 1.0))
    p.emplace_back("data.train_fraction must lie in (0, 1)");
  if (c.data.kind != DataKind::csv && c.data.test_n == 0) p.emplace_back("data.test_n must be >= 1");
  if (c.predict.samples == 0) p.emplace_back("curvature.samples must be >= 1");
  if (c.predict.ece_bins == 0) p.emplace_back("curvature.ece_bins must be >= 1");
  for (double d : c.grid)
    if (!(d > 0.0)) p.emplace_back("train.grid values must be > 0");
  return p;
}

/// Applies `section.key = value` pairs in order; collects every unknown or
/// malformed key before throwing.
inline ExperimentConfig config_from_pairs(const std::vector<std::pair<std::string, std::string>>& pairs) {
  ExperimentConfig c;
  std::vector<std::string> problems;
  for (const auto& [full, value] : pairs) {
    const auto dot = full.find('.');
    const std::string sec = full.substr(0, dot), name = dot == std::string::npos ? "" : full.substr(dot + 1);
    const auto& table = config_detail::keys();
    const auto it = std::find_if(table.begin(), table.end(),
                                 [&](const config_detail::Key& k) { return k.section == sec && k.name == name; });
    if (it == table.end()) {
      problems.push_back("unknown key '" + full + "'");
      continue;
    }
    try {
      it->set(c, value);
    } catch (const std::exception& e) {
      problems.push_back("bad value for '" + full + "' ('" + value + "'): " + e.what());
    }
  }
  if (problems.empty()) problems = config_problems(c);
  if (!problems.empty()) throw ConfigError(problems);
  return c;
}

inline std::vector<std::pair<std::string, std::string>> ptree_pairs(const boost::property_tree::ptree& tree) {
  std::vector<std::pair<std::string, std::string>> pairs;
  for (const auto& [sec, body] : tree) {
    if (body.empty()) {
      const bool known_section = sec == "data" || sec == "model" || sec == "train" || sec == "curvature";
      if (!known_section) pairs.emplace_back(sec, body.data());  // key outside any section
      continue;
    }
    for (const auto& [key, value] : body) pairs.emplace_back(sec + "." + key, value.data());
  }
  return pairs;
}

inline ExperimentConfig parse_config(std::istream& in, const std::string& origin = "<config>") {
  boost::property_tree::ptree tree;
  try {
    boost::property_tree::read_ini(in, tree);
  } catch (const boost::property_tree::ini_parser_error& e) {
    throw ConfigError({origin + ":" + std::to_string(e.line()) + ": " + e.message()});
  }
  return config_from_pairs(ptree_pairs(tree));
}

inline ExperimentConfig parse_config_string(const std::string& text) {
  std::istringstream in(text);
  return parse_config(in);
}

inline ExperimentConfig load_config(const std::string& path) {
  std::ifstream in(path);
  if (!in) throw ConfigError({"cannot open config file '" + path + "'"});
  return parse_config(in, path);
}

/// Effective configuration as section -> key -> value, losslessly reparsable.
inline std::map<std::string, std::map<std::string, std::string>> config_sections(const ExperimentConfig& c) {
  std::map<std::string, std::map<std::string, std::string>> out;
  for (const auto& k : config_detail::keys())
    if (k.get) out[k.section][k.name] = k.get(c);
  return out;
}

inline std::string config_to_ini(const ExperimentConfig& c) {
  std::ostringstream os;
  for (const char* sec : {"data", "model", "train", "curvature"}) {
    os << "[" << sec << "]\n";
    for (const auto& k : config_detail::keys())
      if (k.get && k.section == sec) os << k.name << " = " << k.get(c) << "\n";
    os << "\n";
  }
  return os.str();
}

}  // namespace marglik
