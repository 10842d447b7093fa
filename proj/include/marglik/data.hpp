#pragma once
// Dataset generators, CSV loading with train-split standardization, splits
// and content fingerprints.

#include <algorithm>
#include <cctype>
#include <charconv>
#include <cmath>
#include <cstdint>
#include <cstdio>
#include <fstream>
#include <numbers>
#include <numeric>
#include <random>
#include <sstream>
#include <string>
#include <vector>

#include "marglik/dataset.hpp"

namespace marglik {

class DataError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

/// y = sin(ω x) + slope·x + ε on [x_min, gap_lo] ∪ [gap_hi, x_max].
struct SinusoidSpec {
  std::size_t n = 100;
  double noise_sd = 0.3;
  double x_min = 0.0;
  double x_max = 6.0;
  double gap_lo = 2.5;
  double gap_hi = 4.0;
  double omega = 2.0;
  double slope = 0.3;
  std::uint64_t seed = 0;

  double truth(double x) const { return std::sin(omega * x) + slope * x; }

  void validate() const {
    if (n < 2) throw std::invalid_argument("sinusoid: n must be >= 2");
    if (!(noise_sd >= 0.0)) throw std::invalid_argument("sinusoid: noise_sd must be >= 0");
    if (!(x_min <= gap_lo && gap_lo <= gap_hi && gap_hi <= x_max) || !(x_min < x_max))
      throw std::invalid_argument("sinusoid: need x_min <= gap_lo <= gap_hi <= x_max and x_min < x_max");
  }
};

inline Dataset gen_sinusoid(const SinusoidSpec& spec) {
  spec.validate();
  std::mt19937_64 rng(spec.seed);
  const double left = spec.gap_lo - spec.x_min, right = spec.x_max - spec.gap_hi;
  std::uniform_real_distribution<double> u(0.0, left + right);
  std::normal_distribution<double> eps(0.0, 1.0);
  Dataset d{DenseMatrix(spec.n, 1), DenseMatrix(spec.n, 1), Task::regression, 0};
  for (std::size_t i = 0; i < spec.n; ++i) {
    const double r = u(rng);
    const double x = r < left ? spec.x_min + r : spec.gap_hi + (r - left);
    d.x(i, 0) = x;
    d.y(i, 0) = spec.truth(x) + spec.noise_sd * eps(rng);
  }
  return d;
}

/// Two interleaved crescents: class 0 on the upper arc, class 1 on the lower
/// arc shifted by (1, 0.5), both with isotropic Gaussian noise.
struct BananaSpec {
  std::size_t n = 265;
  double noise = 0.2;
  std::uint64_t seed = 0;

  void validate() const {
    if (n < 2) throw std::invalid_argument("banana: n must be >= 2");
    if (!(noise >= 0.0)) throw std::invalid_argument("banana: noise must be >= 0");
  }
};

inline Dataset gen_banana(const BananaSpec& spec) {
  spec.validate();
  std::mt19937_64 rng(spec.seed);
  std::uniform_real_distribution<double> angle(0.0, std::numbers::pi);
  std::normal_distribution<double> eps(0.0, spec.noise);
  Dataset d{DenseMatrix(spec.n, 2), DenseMatrix(spec.n, 1), Task::classification, 2};
  std::vector<std::size_t> order(spec.n);
  std::iota(order.begin(), order.end(), 0);
  std::shuffle(order.begin(), order.end(), rng);
  for (std::size_t i = 0; i < spec.n; ++i) {
    const std::size_t k = order[i] % 2;
    const double t = angle(rng);
    const double x0 = k == 0 ? std::cos(t) : 1.0 - std::cos(t);
    const double x1 = k == 0 ? std::sin(t) : 0.5 - std::sin(t);
    d.x(i, 0) = x0 + eps(rng);
    d.x(i, 1) = x1 + eps(rng);
    d.y(i, 0) = static_cast<double>(k);
  }
  return d;
}

struct Split {
  Dataset train;
  Dataset test;
};

/// Seeded random split; train gets round(fraction·n) rows, both parts non-empty.
inline Split train_test_split(const Dataset& data, double train_fraction, std::uint64_t seed) {
  if (!(train_fraction > 0.0 && train_fraction < 1.0))
    throw std::invalid_argument("split fraction must lie in (0, 1)");
  const std::size_t n = data.size();
  const auto n_train = static_cast<std::size_t>(std::llround(train_fraction * static_cast<double>(n)));
  if (n_train == 0 || n_train >= n) throw std::invalid_argument("split leaves an empty train or test part");
  std::vector<std::size_t> idx(n);
  std::iota(idx.begin(), idx.end(), 0);
  std::mt19937_64 rng(seed);
  std::shuffle(idx.begin(), idx.end(), rng);
  const std::span<const std::size_t> all(idx);
  return {data.subset(all.first(n_train)), data.subset(all.subspan(n_train))};
}

/// Per-column affine map z = (v − mean) / scale.
struct Standardizer {
  Vector mean;
  Vector scale;

  /// Population statistics; constant columns keep scale 1.
  static Standardizer fit(const DenseMatrix& m) {
    Standardizer s{Vector(m.cols(), 0.0), Vector(m.cols(), 1.0)};
    const auto n = static_cast<double>(m.rows());
    for (std::size_t c = 0; c < m.cols(); ++c) {
      double sum = 0.0;
      for (std::size_t r = 0; r < m.rows(); ++r) sum += m(r, c);
      const double mu = sum / n;
      double ss = 0.0;
      for (std::size_t r = 0; r < m.rows(); ++r) ss += (m(r, c) - mu) * (m(r, c) - mu);
      const double sd = std::sqrt(ss / n);
      s.mean[c] = mu;
      s.scale[c] = sd > 0.0 ? sd : 1.0;
    }
    return s;
  }
  static Standardizer identity(std::size_t cols) { return {Vector(cols, 0.0), Vector(cols, 1.0)}; }

  void apply(DenseMatrix& m) const {
    for (std::size_t r = 0; r < m.rows(); ++r)
      for (std::size_t c = 0; c < m.cols(); ++c) m(r, c) = (m(r, c) - mean[c]) / scale[c];
  }
  void invert(DenseMatrix& m) const {
    for (std::size_t r = 0; r < m.rows(); ++r)
      for (std::size_t c = 0; c < m.cols(); ++c) m(r, c) = m(r, c) * scale[c] + mean[c];
  }
};

/// Train/test data in model units plus the maps back to original units.
struct PreparedData {
  Dataset train;
  Dataset test;
  Standardizer x_map;
  Standardizer y_map;  // identity for classification
};

/// Fits the standardizers on the train split only.
inline PreparedData standardize(Split split, bool inputs, bool targets) {
  const std::size_t dx = split.train.input_dim(), dy = split.train.y.cols();
  PreparedData p{std::move(split.train), std::move(split.test), Standardizer::identity(dx), Standardizer::identity(dy)};
  if (inputs) {
    p.x_map = Standardizer::fit(p.train.x);
    p.x_map.apply(p.train.x);
    p.x_map.apply(p.test.x);
  }
  if (targets && p.train.task == Task::regression) {
    p.y_map = Standardizer::fit(p.train.y);
    p.y_map.apply(p.train.y);
    p.y_map.apply(p.test.y);
  }
  return p;
}

struct CsvSpec {
  std::string path;
  std::vector<std::size_t> targets;  // 0-based column indices; empty = last column
  Task task = Task::regression;
  bool standardize = true;
  double train_fraction = 0.9;
  std::uint64_t split_seed = 0;
};

namespace detail {

inline std::vector<std::string> split_csv_line(const std::string& line) {
  std::vector<std::string> out;
  std::string cell;
  std::istringstream ss(line);
  while (std::getline(ss, cell, ',')) out.push_back(cell);
  if (!line.empty() && line.back() == ',') out.emplace_back();
  return out;
}

inline std::string trim(std::string s) {
  const auto ws = [](unsigned char c) { return std::isspace(c) != 0; };
  s.erase(s.begin(), std::find_if_not(s.begin(), s.end(), ws));
  s.erase(std::find_if_not(s.rbegin(), s.rend(), ws).base(), s.end());
  return s;
}

inline double parse_cell(const std::string& raw, std::size_t row, std::size_t col, const std::string& path) {
  const std::string s = trim(raw);
  double v = 0.0;
  const char* end = s.data() + s.size();
  const auto [ptr, ec] = std::from_chars(s.data(), end, v);
  if (s.empty() || ec != std::errc() || ptr != end)
    throw DataError(path + ": non-numeric cell '" + s + "' at row " + std::to_string(row) + ", column " +
                    std::to_string(col + 1));
  return v;
}

}  // namespace detail

/// Reads a header line then numeric rows. Row numbers in errors are 1-based
/// file lines; columns are 1-based.
inline Dataset read_csv(const CsvSpec& spec) {
  std::ifstream in(spec.path);
  if (!in) throw DataError("cannot open CSV file '" + spec.path + "'");
  std::string line;
  if (!std::getline(in, line)) throw DataError(spec.path + ": file is empty");
  const std::size_t cols = detail::split_csv_line(line).size();
  std::vector<std::size_t> targets = spec.targets;
  if (targets.empty()) targets.push_back(cols - 1);
  for (std::size_t t : targets)
    if (t >= cols)
      throw DataError(spec.path + ": target column " + std::to_string(t) + " out of range (file has " +
                      std::to_string(cols) + " columns)");
  if (spec.task == Task::classification && targets.size() != 1)
    throw DataError(spec.path + ": classification needs exactly one target column");
  std::vector<bool> is_target(cols, false);
  for (std::size_t t : targets) is_target[t] = true;
  if (std::count(is_target.begin(), is_target.end(), false) == 0) throw DataError(spec.path + ": no input columns");

  std::vector<double> xs, ys;
  std::size_t rows = 0, lineno = 1;
  while (std::getline(in, line)) {
    ++lineno;
    if (detail::trim(line).empty()) continue;
    const auto cells = detail::split_csv_line(line);
    if (cells.size() != cols)
      throw DataError(spec.path + ": row " + std::to_string(lineno) + " has " + std::to_string(cells.size()) +
                      " cells, expected " + std::to_string(cols));
    for (std::size_t c = 0; c < cols; ++c) {
      if (is_target[c]) continue;
      xs.push_back(detail::parse_cell(cells[c], lineno, c, spec.path));
    }
    for (std::size_t t : targets) ys.push_back(detail::parse_cell(cells[t], lineno, t, spec.path));
    ++rows;
  }
  if (rows < 2) throw DataError(spec.path + ": need at least 2 data rows");
  Dataset d{DenseMatrix(rows, cols - targets.size(), std::move(xs)), DenseMatrix(rows, targets.size(), std::move(ys)),
            spec.task, 0};
  if (spec.task == Task::classification) {
    double max_label = 0.0;
    for (std::size_t r = 0; r < rows; ++r) {
      const double v = d.y(r, 0);
      if (v < 0.0 || v != std::floor(v))
        throw DataError(spec.path + ": class label " + std::to_string(v) + " on data row " + std::to_string(r + 1) +
                        " is not a non-negative integer");
      max_label = std::max(max_label, v);
    }
    d.num_classes = static_cast<std::size_t>(max_label) + 1;
  }
  return d;
}

inline void write_csv(const std::string& path, const Dataset& d) {
  std::ofstream out(path);
  if (!out) throw DataError("cannot write CSV file '" + path + "'");
  for (std::size_t c = 0; c < d.x.cols(); ++c) out << "x" << c << ",";
  for (std::size_t c = 0; c < d.y.cols(); ++c) out << "y" << c << (c + 1 < d.y.cols() ? "," : "\n");
  out.precision(17);
  for (std::size_t r = 0; r < d.size(); ++r) {
    for (std::size_t c = 0; c < d.x.cols(); ++c) out << d.x(r, c) << ",";
    for (std::size_t c = 0; c < d.y.cols(); ++c) out << d.y(r, c) << (c + 1 < d.y.cols() ? "," : "\n");
  }
  if (!out) throw DataError("error while writing '" + path + "'");
}

inline PreparedData load_csv(const CsvSpec& spec) {
  return standardize(train_test_split(read_csv(spec), spec.train_fraction, spec.split_seed), spec.standardize,
                     spec.standardize);
}

/// 64-bit FNV-1a over shapes, task and raw value bytes, as 16 hex digits.
inline std::string fingerprint(const Dataset& d) {
  std::uint64_t h = 0xcbf29ce484222325ULL;
  const auto mix = [&h](const void* p, std::size_t len) {
    const auto* b = static_cast<const unsigned char*>(p);
    for (std::size_t i = 0; i < len; ++i) {
      h ^= b[i];
      h *= 0x100000001b3ULL;
    }
  };
  const std::uint64_t shape[] = {d.x.rows(), d.x.cols(), d.y.cols(), static_cast<std::uint64_t>(d.task),
                                 d.num_classes};
  mix(shape, sizeof shape);
  mix(d.x.data().data(), d.x.size() * sizeof(double));
  mix(d.y.data().data(), d.y.size() * sizeof(double));
  char buf[17];
  std::snprintf(buf, sizeof buf, "%016llx", static_cast<unsigned long long>(h));
  return buf;
}

}  // namespace marglik
