#pragma once
// Log-likelihood curvature over a dataset in five structures: full GGN, full
// empirical Fisher, Kronecker-factored GGN, diagonal GGN and diagonal EF.
//
// Gaussian-likelihood curvature is stored without the observation-noise
// factor; `noise_power` records how it scales: the likelihood term is
// multiplied by σ^(-2 * noise_power) downstream (1 for GGN, 2 for EF, 0 for
// categorical likelihoods whose temperature is baked in at accumulation).

#include <string>
#include <variant>
#include <vector>

#include "marglik/dataset.hpp"
#include "marglik/likelihood.hpp"
#include "marglik/network.hpp"
#include "marglik/numeric.hpp"
#include "marglik/objective.hpp"

namespace marglik {

enum class CurvatureKind { full_ggn, full_ef, kfac, diag_ggn, diag_ef };

inline std::string to_string(CurvatureKind k) {
  switch (k) {
    case CurvatureKind::full_ggn: return "full-ggn";
    case CurvatureKind::full_ef: return "full-ef";
    case CurvatureKind::kfac: return "kfac";
    case CurvatureKind::diag_ggn: return "diag-ggn";
    case CurvatureKind::diag_ef: return "diag-ef";
  }
  return "?";
}

inline CurvatureKind parse_curvature_kind(const std::string& s) {
  for (auto k : {CurvatureKind::full_ggn, CurvatureKind::full_ef, CurvatureKind::kfac, CurvatureKind::diag_ggn,
                 CurvatureKind::diag_ef})
    if (to_string(k) == s) return k;
  throw std::invalid_argument("unknown curvature '" + s + "' (expected full-ggn, full-ef, kfac, diag-ggn, diag-ef)");
}

struct FullGgn {
  JacobianBatch jacobians;                  // NC x P
  std::vector<DenseMatrix> lambda;          // per-example C x C Λ_n
  std::vector<DenseMatrix> lambda_factor;   // per-example R_n with R_nᵀR_n = Λ_n
  int noise_power = 0;

  std::size_t num_data() const noexcept { return jacobians.n; }

  /// Σ_n J_nᵀ Λ_n J_n
  DenseMatrix likelihood_term() const { return gram(factor()); }

  /// Stacked R_n J_n, an NC x P matrix U with UᵀU = JᵀLJ.
  DenseMatrix factor() const {
    const std::size_t c = jacobians.c;
    DenseMatrix u(jacobians.stacked.rows(), jacobians.stacked.cols());
    for (std::size_t n = 0; n < jacobians.n; ++n) {
      const auto& r = lambda_factor[n];
      for (std::size_t i = 0; i < c; ++i) {
        auto dst = u.row(n * c + i);
        for (std::size_t k = 0; k < c; ++k) {
          const double w = r(i, k);
          if (w == 0.0) continue;
          auto src = jacobians.stacked.row(n * c + k);
          for (std::size_t p = 0; p < dst.size(); ++p) dst[p] += w * src[p];
        }
      }
    }
    return u;
  }
};

struct FullEf {
  DenseMatrix gradients;  // N x P
  int noise_power = 0;

  std::size_t num_data() const noexcept { return gradients.rows(); }
  DenseMatrix likelihood_term() const { return gram(gradients); }
};

/// Kronecker factors for one layer. The weight block is approximated by
/// B ⊗ A (row-major vectorization of the out x in weight matrix); the bias
/// block is kept dense.
struct KfacBlock {
  DenseMatrix a;     // fan_in x fan_in, averaged over examples
  DenseMatrix b;     // fan_out x fan_out, summed over examples
  DenseMatrix bias;  // fan_out x fan_out, summed over examples
  Spectrum a_spectrum;
  Spectrum b_spectrum;
  Spectrum bias_spectrum;
};

struct Kfac {
  std::vector<KfacBlock> layers;
  std::size_t n = 0;
  int noise_power = 0;

  std::size_t num_data() const noexcept { return n; }

  void refresh_spectra() {
    for (auto& l : layers) {
      l.a_spectrum = sym_eigendecompose(l.a);
      l.b_spectrum = sym_eigendecompose(l.b);
      l.bias_spectrum = sym_eigendecompose(l.bias);
    }
  }

  /// Block-diagonal P x P reconstruction of the likelihood term.
  DenseMatrix dense(const ParamLayout& layout) const {
    DenseMatrix h(layout.total(), layout.total());
    for (std::size_t l = 0; l < layers.size(); ++l) {
      const auto& wg = layout.weight_group(l);
      const auto& bg = layout.bias_group(l);
      const DenseMatrix k = kron(layers[l].b, layers[l].a);
      for (std::size_t i = 0; i < k.rows(); ++i)
        for (std::size_t j = 0; j < k.cols(); ++j) h(wg.offset + i, wg.offset + j) = k(i, j);
      for (std::size_t i = 0; i < bg.length; ++i)
        for (std::size_t j = 0; j < bg.length; ++j) h(bg.offset + i, bg.offset + j) = layers[l].bias(i, j);
    }
    return h;
  }
};

struct DiagGgn {
  Vector h;
  std::size_t n = 0;
  int noise_power = 0;
  std::size_t num_data() const noexcept { return n; }
};

struct DiagEf {
  Vector h;
  std::size_t n = 0;
  int noise_power = 0;
  std::size_t num_data() const noexcept { return n; }
};

using CurvatureState = std::variant<FullGgn, FullEf, Kfac, DiagGgn, DiagEf>;

inline CurvatureKind kind_of(const CurvatureState& s) {
  return static_cast<CurvatureKind>(s.index());
}

namespace detail {

inline Likelihood noise_free(const Likelihood& lik) {
  return lik.is_gaussian() ? Likelihood::gaussian(0.0) : lik;
}

inline void require_data(const Dataset& d, const char* who) {
  if (d.size() == 0) throw std::invalid_argument(std::string(who) + ": dataset is empty");
}

}  // namespace detail

inline FullGgn accumulate_full_ggn(const Mlp& net, std::span<const double> theta, const Dataset& data,
                                   const Likelihood& lik) {
  detail::require_data(data, "accumulate_full_ggn");
  const Likelihood l0 = detail::noise_free(lik);
  FullGgn s;
  s.noise_power = lik.is_gaussian() ? 1 : 0;
  s.jacobians = jacobians(net, theta, data.x);
  const DenseMatrix f = net.forward(theta, data.x);
  for (std::size_t n = 0; n < data.size(); ++n) {
    s.lambda.push_back(likelihood_hessian(f.row(n), l0));
    s.lambda_factor.push_back(likelihood_hessian_factor(f.row(n), l0, true));
  }
  return s;
}

inline FullEf accumulate_full_ef(const Mlp& net, std::span<const double> theta, const Dataset& data,
                                 const Likelihood& lik) {
  detail::require_data(data, "accumulate_full_ef");
  return {per_example_gradients(net, theta, data, detail::noise_free(lik)), lik.is_gaussian() ? 2 : 0};
}

inline Kfac accumulate_kfac(const Mlp& net, std::span<const double> theta, const Dataset& data,
                            const Likelihood& lik) {
  detail::require_data(data, "accumulate_kfac");
  const auto& spec = net.spec();
  const Likelihood l0 = detail::noise_free(lik);
  Kfac k;
  k.n = data.size();
  k.noise_power = lik.is_gaussian() ? 1 : 0;
  for (std::size_t l = 0; l < spec.num_layers(); ++l)
    k.layers.push_back({DenseMatrix(spec.fan_in(l), spec.fan_in(l)), DenseMatrix(spec.fan_out(l), spec.fan_out(l)),
                        DenseMatrix(spec.fan_out(l), spec.fan_out(l)), {}, {}, {}});

  const auto cache = net.forward_cached(theta, data.x);
  const double inv_n = 1.0 / static_cast<double>(data.size());
  for (std::size_t n = 0; n < data.size(); ++n) {
    const auto r = likelihood_hessian_factor(cache.outputs().row(n), l0, true);
    const auto s = net.sensitivities(theta, cache, n, r);
    for (std::size_t l = 0; l < spec.num_layers(); ++l) {
      auto& blk = k.layers[l];
      auto a = cache.inputs[l].row(n);
      for (std::size_t i = 0; i < a.size(); ++i) {
        if (a[i] == 0.0) continue;
        for (std::size_t j = 0; j < a.size(); ++j) blk.a(i, j) += inv_n * a[i] * a[j];
      }
      const DenseMatrix sts = gram(s[l]);
      blk.b += sts;
      blk.bias += sts;
    }
  }
  k.refresh_spectra();
  return k;
}

inline DiagGgn accumulate_diag_ggn(const Mlp& net, std::span<const double> theta, const Dataset& data,
                                   const Likelihood& lik) {
  detail::require_data(data, "accumulate_diag_ggn");
  const Likelihood l0 = detail::noise_free(lik);
  DiagGgn d{Vector(net.num_params(), 0.0), data.size(), lik.is_gaussian() ? 1 : 0};
  const auto cache = net.forward_cached(theta, data.x);
  for (std::size_t n = 0; n < data.size(); ++n) {
    const auto r = likelihood_hessian_factor(cache.outputs().row(n), l0, true);
    const auto rows = net.vjp(theta, cache, n, r);
    for (std::size_t i = 0; i < rows.rows(); ++i) {
      auto ri = rows.row(i);
      for (std::size_t p = 0; p < ri.size(); ++p) d.h[p] += ri[p] * ri[p];
    }
  }
  return d;
}

inline DiagEf accumulate_diag_ef(const Mlp& net, std::span<const double> theta, const Dataset& data,
                                 const Likelihood& lik) {
  detail::require_data(data, "accumulate_diag_ef");
  const Likelihood l0 = detail::noise_free(lik);
  DiagEf d{Vector(net.num_params(), 0.0), data.size(), lik.is_gaussian() ? 2 : 0};
  const auto cache = net.forward_cached(theta, data.x);
  DenseMatrix seed(1, net.output_dim());
  for (std::size_t n = 0; n < data.size(); ++n) {
    const auto e = loglik_grad_wrt_f(cache.outputs().row(n), data.y.row(n), l0);
    std::copy(e.begin(), e.end(), seed.row(0).begin());
    const auto g = net.vjp(theta, cache, n, seed);
    for (std::size_t p = 0; p < g.cols(); ++p) d.h[p] += g(0, p) * g(0, p);
  }
  return d;
}

inline CurvatureState accumulate(CurvatureKind kind, const Mlp& net, std::span<const double> theta,
                                 const Dataset& data, const Likelihood& lik) {
  switch (kind) {
    case CurvatureKind::full_ggn: return accumulate_full_ggn(net, theta, data, lik);
    case CurvatureKind::full_ef: return accumulate_full_ef(net, theta, data, lik);
    case CurvatureKind::kfac: return accumulate_kfac(net, theta, data, lik);
    case CurvatureKind::diag_ggn: return accumulate_diag_ggn(net, theta, data, lik);
    case CurvatureKind::diag_ef: return accumulate_diag_ef(net, theta, data, lik);
  }
  throw std::logic_error("unreachable curvature kind");
}

/// Merge curvature accumulated on two disjoint shards (shard order is kept).
inline CurvatureState combine(const CurvatureState& first, const CurvatureState& second) {
  if (first.index() != second.index()) throw std::invalid_argument("combine: curvature kinds differ");
  auto stack = [](const DenseMatrix& a, const DenseMatrix& b) {
    if (a.cols() != b.cols()) throw DimensionError("combine: parameter counts differ");
    DenseMatrix out(a.rows() + b.rows(), a.cols());
    std::copy(a.data().begin(), a.data().end(), out.data().begin());
    std::copy(b.data().begin(), b.data().end(), out.data().begin() + static_cast<std::ptrdiff_t>(a.size()));
    return out;
  };
  auto add = [](Vector a, const Vector& b) {
    if (a.size() != b.size()) throw DimensionError("combine: parameter counts differ");
    for (std::size_t i = 0; i < a.size(); ++i) a[i] += b[i];
    return a;
  };
  return std::visit(
      [&](const auto& a) -> CurvatureState {
        using T = std::decay_t<decltype(a)>;
        const auto& b = std::get<T>(second);
        if constexpr (std::is_same_v<T, FullGgn>) {
          FullGgn out = a;
          out.jacobians = {a.jacobians.n + b.jacobians.n, a.jacobians.c, stack(a.jacobians.stacked, b.jacobians.stacked)};
          out.lambda.insert(out.lambda.end(), b.lambda.begin(), b.lambda.end());
          out.lambda_factor.insert(out.lambda_factor.end(), b.lambda_factor.begin(), b.lambda_factor.end());
          return out;
        } else if constexpr (std::is_same_v<T, FullEf>) {
          return FullEf{stack(a.gradients, b.gradients), a.noise_power};
        } else if constexpr (std::is_same_v<T, Kfac>) {
          Kfac out = a;
          out.n = a.n + b.n;
          const double wa = static_cast<double>(a.n) / static_cast<double>(out.n);
          const double wb = static_cast<double>(b.n) / static_cast<double>(out.n);
          for (std::size_t l = 0; l < out.layers.size(); ++l) {
            out.layers[l].a = a.layers[l].a * wa + b.layers[l].a * wb;
            out.layers[l].b += b.layers[l].b;
            out.layers[l].bias += b.layers[l].bias;
          }
          out.refresh_spectra();
          return out;
        } else {
          T out = a;
          out.h = add(a.h, b.h);
          out.n = a.n + b.n;
          return out;
        }
      },
      first);
}

}  // namespace marglik
