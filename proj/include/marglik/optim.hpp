#pragma once
// First-order optimizers that descend along a supplied gradient.

#include <cmath>
#include <span>
#include <stdexcept>
#include <string>
#include <variant>

#include "marglik/numeric.hpp"

namespace marglik {

struct Adam {
  Adam() = default;
  explicit Adam(double lr_) : lr(lr_) {}

  double lr = 1e-3;
  double beta1 = 0.9;
  double beta2 = 0.999;
  double eps = 1e-8;
  Vector m, v;
  std::size_t t = 0;

  void step(std::span<double> x, std::span<const double> grad) {
    if (grad.size() != x.size()) throw DimensionError("Adam: gradient length != parameter length");
    if (m.empty()) {
      m.assign(x.size(), 0.0);
      v.assign(x.size(), 0.0);
    }
    if (m.size() != x.size()) throw DimensionError("Adam: state length != parameter length");
    ++t;
    const double c1 = 1.0 - std::pow(beta1, static_cast<double>(t));
    const double c2 = 1.0 - std::pow(beta2, static_cast<double>(t));
    for (std::size_t i = 0; i < x.size(); ++i) {
      m[i] = beta1 * m[i] + (1.0 - beta1) * grad[i];
      v[i] = beta2 * v[i] + (1.0 - beta2) * grad[i] * grad[i];
      x[i] -= lr * (m[i] / c1) / (std::sqrt(v[i] / c2) + eps);
    }
  }
};

/// Heavy-ball momentum: u ← μu + g, x ← x − lr·u.
struct SgdMomentum {
  SgdMomentum() = default;
  SgdMomentum(double lr_, double momentum_) : lr(lr_), momentum(momentum_) {}

  double lr = 1e-3;
  double momentum = 0.9;
  Vector velocity;

  void step(std::span<double> x, std::span<const double> grad) {
    if (grad.size() != x.size()) throw DimensionError("SGD: gradient length != parameter length");
    if (velocity.empty()) velocity.assign(x.size(), 0.0);
    for (std::size_t i = 0; i < x.size(); ++i) {
      velocity[i] = momentum * velocity[i] + grad[i];
      x[i] -= lr * velocity[i];
    }
  }
};

enum class OptimizerKind { adam, sgd };

inline std::string to_string(OptimizerKind k) { return k == OptimizerKind::adam ? "adam" : "sgd"; }

inline OptimizerKind parse_optimizer_kind(const std::string& s) {
  if (s == "adam") return OptimizerKind::adam;
  if (s == "sgd") return OptimizerKind::sgd;
  throw std::invalid_argument("unknown optimizer '" + s + "' (expected adam or sgd)");
}

class Optimizer {
 public:
  static Optimizer make(OptimizerKind kind, double lr, double momentum = 0.9) {
    Optimizer o;
    if (kind == OptimizerKind::adam)
      o.impl_ = Adam{lr};
    else
      o.impl_ = SgdMomentum{lr, momentum};
    return o;
  }

  void step(std::span<double> x, std::span<const double> grad) {
    std::visit([&](auto& o) { o.step(x, grad); }, impl_);
  }
  double lr() const {
    return std::visit([](const auto& o) { return o.lr; }, impl_);
  }
  void set_lr(double lr) {
    std::visit([&](auto& o) { o.lr = lr; }, impl_);
  }

 private:
  std::variant<Adam, SgdMomentum> impl_;
};

}  // namespace marglik
