#pragma once

#include <cstddef>
#include <span>
#include <stdexcept>
#include <string>

#include "marglik/numeric.hpp"

namespace marglik {

enum class Task { regression, classification };

inline std::string to_string(Task t) { return t == Task::regression ? "regression" : "classification"; }

/// Inputs X (N x D) and targets Y. Regression targets are N x C; classification
/// targets are N x 1 holding the class index as a double.
struct Dataset {
  DenseMatrix x;
  DenseMatrix y;
  Task task = Task::regression;
  std::size_t num_classes = 0;

  std::size_t size() const noexcept { return x.rows(); }
  std::size_t input_dim() const noexcept { return x.cols(); }
  std::size_t output_dim() const noexcept {
    return task == Task::regression ? y.cols() : num_classes;
  }

  Dataset subset(std::span<const std::size_t> rows) const {
    Dataset out{DenseMatrix(rows.size(), x.cols()), DenseMatrix(rows.size(), y.cols()), task,
                num_classes};
    for (std::size_t i = 0; i < rows.size(); ++i) {
      if (rows[i] >= size()) throw std::out_of_range("Dataset::subset: row index out of range");
      std::copy(x.row(rows[i]).begin(), x.row(rows[i]).end(), out.x.row(i).begin());
      std::copy(y.row(rows[i]).begin(), y.row(rows[i]).end(), out.y.row(i).begin());
    }
    return out;
  }

  /// Concatenate rows of two datasets with the same schema.
  static Dataset concat(const Dataset& a, const Dataset& b) {
    if (a.x.cols() != b.x.cols() || a.y.cols() != b.y.cols() || a.task != b.task)
      throw DimensionError("Dataset::concat: schema mismatch");
    Dataset out{DenseMatrix(a.size() + b.size(), a.x.cols()),
                DenseMatrix(a.size() + b.size(), a.y.cols()), a.task,
                std::max(a.num_classes, b.num_classes)};
    auto put = [&](const Dataset& d, std::size_t at) {
      for (std::size_t i = 0; i < d.size(); ++i) {
        std::copy(d.x.row(i).begin(), d.x.row(i).end(), out.x.row(at + i).begin());
        std::copy(d.y.row(i).begin(), d.y.row(i).end(), out.y.row(at + i).begin());
      }
    };
    put(a, 0);
    put(b, a.size());
    return out;
  }
};

}  // namespace marglik
