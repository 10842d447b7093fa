#pragma once
// Fully-connected networks: architecture, flat parameter layout with one
// weight and one bias group per layer, forward pass and matrix-valued
// backpropagation (Jacobians, per-example gradients, pre-activation
// sensitivities for Kronecker factors).

#include <cmath>
#include <cstdint>
#include <random>
#include <span>
#include <string>
#include <utility>
#include <vector>

#include "marglik/numeric.hpp"

namespace marglik {

enum class Activation { relu, tanh };

inline std::string to_string(Activation a) { return a == Activation::relu ? "relu" : "tanh"; }

inline Activation parse_activation(const std::string& s) {
  if (s == "relu") return Activation::relu;
  if (s == "tanh") return Activation::tanh;
  throw std::invalid_argument("unknown activation '" + s + "' (expected relu or tanh)");
}

struct NetworkSpec {
  std::size_t input_dim = 1;
  std::vector<std::size_t> hidden;
  std::size_t output_dim = 1;
  std::vector<Activation> activations;  // one per hidden layer

  static NetworkSpec mlp(std::size_t input_dim, std::vector<std::size_t> hidden,
                         std::size_t output_dim, Activation act) {
    NetworkSpec s{input_dim, std::move(hidden), output_dim, {}};
    s.activations.assign(s.hidden.size(), act);
    s.validate();
    return s;
  }

  void validate() const {
    if (input_dim == 0 || output_dim == 0) throw std::invalid_argument("network widths must be >= 1");
    for (auto w : hidden)
      if (w == 0) throw std::invalid_argument("hidden widths must be >= 1");
    if (activations.size() != hidden.size())
      throw std::invalid_argument("need one activation per hidden layer");
  }

  std::size_t num_layers() const noexcept { return hidden.size() + 1; }
  std::size_t fan_in(std::size_t layer) const noexcept {
    return layer == 0 ? input_dim : hidden[layer - 1];
  }
  std::size_t fan_out(std::size_t layer) const noexcept {
    return layer == hidden.size() ? output_dim : hidden[layer];
  }

  friend bool operator==(const NetworkSpec&, const NetworkSpec&) = default;
};

enum class GroupKind { weight, bias };

struct ParamGroup {
  std::size_t layer = 0;
  GroupKind kind = GroupKind::weight;
  std::size_t offset = 0;
  std::size_t length = 0;

  std::string name() const {
    return (kind == GroupKind::weight ? "w" : "b") + std::to_string(layer + 1);
  }
  friend bool operator==(const ParamGroup&, const ParamGroup&) = default;
};

/// Partition of [0, P) into (weight, bias) groups per layer. Group 2l is the
/// weight matrix of layer l stored row-major (out x in), group 2l+1 its bias.
class ParamLayout {
 public:
  ParamLayout() = default;
  explicit ParamLayout(const NetworkSpec& spec) {
    std::size_t offset = 0;
    for (std::size_t l = 0; l < spec.num_layers(); ++l) {
      const std::size_t nw = spec.fan_in(l) * spec.fan_out(l);
      groups_.push_back({l, GroupKind::weight, offset, nw});
      offset += nw;
      groups_.push_back({l, GroupKind::bias, offset, spec.fan_out(l)});
      offset += spec.fan_out(l);
    }
    total_ = offset;
  }

  std::size_t total() const noexcept { return total_; }
  std::size_t num_groups() const noexcept { return groups_.size(); }
  const std::vector<ParamGroup>& groups() const noexcept { return groups_; }
  const ParamGroup& group(std::size_t g) const { return groups_.at(g); }
  const ParamGroup& weight_group(std::size_t layer) const { return groups_.at(2 * layer); }
  const ParamGroup& bias_group(std::size_t layer) const { return groups_.at(2 * layer + 1); }

  /// Group index owning each parameter.
  std::vector<std::size_t> group_index() const {
    std::vector<std::size_t> idx(total_);
    for (std::size_t g = 0; g < groups_.size(); ++g)
      for (std::size_t i = 0; i < groups_[g].length; ++i) idx[groups_[g].offset + i] = g;
    return idx;
  }

  friend bool operator==(const ParamLayout&, const ParamLayout&) = default;

 private:
  std::vector<ParamGroup> groups_;
  std::size_t total_ = 0;
};

struct ParamVector {
  ParamLayout layout;
  Vector values;

  std::span<const double> group(std::size_t g) const {
    const auto& pg = layout.group(g);
    return std::span<const double>(values).subspan(pg.offset, pg.length);
  }
  std::span<double> group(std::size_t g) {
    const auto& pg = layout.group(g);
    return std::span<double>(values).subspan(pg.offset, pg.length);
  }
};

/// Weights ~ U(-a, a): a = sqrt(6 / fan_in) for layers feeding a relu,
/// a = sqrt(6 / (fan_in + fan_out)) otherwise. Biases start at zero.
inline ParamVector init_params(const NetworkSpec& spec, std::uint64_t seed) {
  spec.validate();
  ParamVector p{ParamLayout(spec), {}};
  p.values.assign(p.layout.total(), 0.0);
  std::mt19937_64 rng(seed);
  for (std::size_t l = 0; l < spec.num_layers(); ++l) {
    const double fi = static_cast<double>(spec.fan_in(l));
    const double fo = static_cast<double>(spec.fan_out(l));
    const bool relu = l < spec.hidden.size() && spec.activations[l] == Activation::relu;
    const double a = relu ? std::sqrt(6.0 / fi) : std::sqrt(6.0 / (fi + fo));
    std::uniform_real_distribution<double> u(-a, a);
    for (double& w : p.group(2 * l)) w = u(rng);
  }
  return p;
}

/// Forward-pass intermediates for one batch: inputs[l] is the N x fan_in(l)
/// input to layer l, preacts[l] the N x fan_out(l) pre-activation.
struct ForwardCache {
  std::vector<DenseMatrix> inputs;
  std::vector<DenseMatrix> preacts;
  const DenseMatrix& outputs() const { return preacts.back(); }
};

class Mlp {
 public:
  explicit Mlp(NetworkSpec spec) : spec_(std::move(spec)), layout_(spec_) { spec_.validate(); }

  const NetworkSpec& spec() const noexcept { return spec_; }
  const ParamLayout& layout() const noexcept { return layout_; }
  std::size_t num_params() const noexcept { return layout_.total(); }
  std::size_t output_dim() const noexcept { return spec_.output_dim; }

  ForwardCache forward_cached(std::span<const double> theta, const DenseMatrix& x) const {
    require_params(theta);
    if (x.cols() != spec_.input_dim)
      throw DimensionError("forward: input has " + std::to_string(x.cols()) + " columns, network expects " +
                           std::to_string(spec_.input_dim));
    ForwardCache cache;
    DenseMatrix a = x;
    for (std::size_t l = 0; l < spec_.num_layers(); ++l) {
      const std::size_t in = spec_.fan_in(l), out = spec_.fan_out(l);
      auto w = weights(theta, l);
      auto b = biases(theta, l);
      DenseMatrix z(a.rows(), out);
      for (std::size_t n = 0; n < a.rows(); ++n) {
        auto an = a.row(n);
        auto zn = z.row(n);
        for (std::size_t i = 0; i < out; ++i) zn[i] = b[i] + dot(w.subspan(i * in, in), an);
      }
      cache.inputs.push_back(std::move(a));
      if (l + 1 < spec_.num_layers()) {
        a = DenseMatrix(z.rows(), out);
        for (std::size_t k = 0; k < z.size(); ++k) a.data()[k] = activate(l, z.data()[k]);
      }
      cache.preacts.push_back(std::move(z));
    }
    return cache;
  }

  DenseMatrix forward(std::span<const double> theta, const DenseMatrix& x) const {
    return forward_cached(theta, x).outputs();
  }

  /// Backpropagate a k x C seed through example n: returns S_l = seed · ∂f/∂z_l
  /// (k x fan_out(l)) for every layer l.
  std::vector<DenseMatrix> sensitivities(std::span<const double> theta, const ForwardCache& cache,
                                         std::size_t n, const DenseMatrix& seed) const {
    const std::size_t L = spec_.num_layers();
    if (seed.cols() != spec_.output_dim) throw DimensionError("sensitivities: seed width != output_dim");
    std::vector<DenseMatrix> s(L);
    s[L - 1] = seed;
    for (std::size_t l = L - 1; l > 0; --l) {
      const std::size_t in = spec_.fan_in(l), out = spec_.fan_out(l);
      auto w = weights(theta, l);
      auto zprev = cache.preacts[l - 1].row(n);
      DenseMatrix prev(seed.rows(), in);
      for (std::size_t r = 0; r < seed.rows(); ++r) {
        auto sr = s[l].row(r);
        auto pr = prev.row(r);
        for (std::size_t i = 0; i < out; ++i) {
          const double v = sr[i];
          if (v == 0.0) continue;
          auto wi = w.subspan(i * in, in);
          for (std::size_t j = 0; j < in; ++j) pr[j] += v * wi[j];
        }
        for (std::size_t j = 0; j < in; ++j) pr[j] *= activation_derivative(l - 1, zprev[j]);
      }
      s[l - 1] = std::move(prev);
    }
    return s;
  }

  /// Expand per-layer sensitivities of example n into k x P parameter-space rows
  /// (row r = seed_r · J_θ(x_n)).
  DenseMatrix expand(const std::vector<DenseMatrix>& s, const ForwardCache& cache, std::size_t n) const {
    const std::size_t k = s.front().rows();
    DenseMatrix out(k, layout_.total());
    accumulate_expand(s, cache, n, out, 0);
    return out;
  }

  /// Write seed · J_θ(x_n) into rows [row0, row0 + k) of `out`.
  void accumulate_expand(const std::vector<DenseMatrix>& s, const ForwardCache& cache, std::size_t n,
                         DenseMatrix& out, std::size_t row0) const {
    const std::size_t k = s.front().rows();
    for (std::size_t l = 0; l < spec_.num_layers(); ++l) {
      const std::size_t in = spec_.fan_in(l), out_dim = spec_.fan_out(l);
      const auto& wg = layout_.weight_group(l);
      const auto& bg = layout_.bias_group(l);
      auto a = cache.inputs[l].row(n);
      for (std::size_t r = 0; r < k; ++r) {
        auto sr = s[l].row(r);
        auto dst = out.row(row0 + r);
        for (std::size_t i = 0; i < out_dim; ++i) {
          const double v = sr[i];
          double* wrow = dst.data() + wg.offset + i * in;
          for (std::size_t j = 0; j < in; ++j) wrow[j] = v * a[j];
          dst[bg.offset + i] = v;
        }
      }
    }
  }

  /// seed · J_θ(x_n) directly.
  DenseMatrix vjp(std::span<const double> theta, const ForwardCache& cache, std::size_t n,
                  const DenseMatrix& seed) const {
    return expand(sensitivities(theta, cache, n, seed), cache, n);
  }

  std::span<const double> weights(std::span<const double> theta, std::size_t layer) const {
    const auto& g = layout_.weight_group(layer);
    return theta.subspan(g.offset, g.length);
  }
  std::span<const double> biases(std::span<const double> theta, std::size_t layer) const {
    const auto& g = layout_.bias_group(layer);
    return theta.subspan(g.offset, g.length);
  }

 private:
  void require_params(std::span<const double> theta) const {
    if (theta.size() != layout_.total())
      throw DimensionError("parameter vector has length " + std::to_string(theta.size()) + ", layout expects " +
                           std::to_string(layout_.total()));
  }

  double activate(std::size_t hidden_layer, double z) const noexcept {
    return spec_.activations[hidden_layer] == Activation::relu ? (z > 0.0 ? z : 0.0) : std::tanh(z);
  }
  // relu derivative is 0 at the kink.
  double activation_derivative(std::size_t hidden_layer, double z) const noexcept {
    if (spec_.activations[hidden_layer] == Activation::relu) return z > 0.0 ? 1.0 : 0.0;
    const double t = std::tanh(z);
    return 1.0 - t * t;
  }

  NetworkSpec spec_;
  ParamLayout layout_;
};

/// Per-example Jacobians J_θ(x_n), each C x P, stacked into an NC x P matrix.
struct JacobianBatch {
  std::size_t n = 0;
  std::size_t c = 0;
  DenseMatrix stacked;

  DenseMatrix example(std::size_t i) const {
    DenseMatrix j(c, stacked.cols());
    for (std::size_t r = 0; r < c; ++r)
      std::copy(stacked.row(i * c + r).begin(), stacked.row(i * c + r).end(), j.row(r).begin());
    return j;
  }
};

/// C backward passes per example, one from each output unit.
inline JacobianBatch jacobians(const Mlp& net, std::span<const double> theta, const DenseMatrix& x) {
  const auto cache = net.forward_cached(theta, x);
  const std::size_t c = net.output_dim();
  JacobianBatch jb{x.rows(), c, DenseMatrix(x.rows() * c, net.num_params())};
  const DenseMatrix eye = DenseMatrix::identity(c);
  for (std::size_t n = 0; n < x.rows(); ++n)
    net.accumulate_expand(net.sensitivities(theta, cache, n, eye), cache, n, jb.stacked, n * c);
  return jb;
}

}  // namespace marglik
