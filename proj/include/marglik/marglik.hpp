#pragma once
// Laplace estimate of the log marginal likelihood
//
//   log q(D|M) = log p(D, θ*|M) + (P/2) log 2π − ½ log|H|,   H = H_lik + P_θ,
//
// log-determinants for every curvature structure, analytic gradients with
// respect to the log hyperparameters, and a cache that makes repeated
// hyperparameter steps cheap between curvature refreshes.

#include <cmath>
#include <memory>
#include <numbers>
#include <optional>
#include <span>
#include <string>
#include <variant>
#include <vector>

#include "marglik/curvature.hpp"
#include "marglik/dataset.hpp"
#include "marglik/likelihood.hpp"
#include "marglik/network.hpp"
#include "marglik/numeric.hpp"

namespace marglik {

struct MargLikReport {
  double log_joint = 0.0;
  double log_det = 0.0;
  double log_marglik = 0.0;
  double log_marglik_per_example = 0.0;
  HyperParams hypers;
  std::size_t num_params = 0;
  std::size_t num_data = 0;
  // Set when the categorical temperature moved since the curvature was built:
  // the log-determinant still reflects the build-time temperature.
  bool temperature_frozen = false;
  std::optional<double> correction;
};

/// log_joint + (P/2) log 2π − ½ log_det, plus the per-example normalization.
inline MargLikReport assemble_marglik(double log_joint, double log_det, std::size_t num_params,
                                      std::size_t num_data) {
  MargLikReport r;
  r.log_joint = log_joint;
  r.log_det = log_det;
  r.num_params = num_params;
  r.num_data = num_data;
  r.log_marglik = log_joint + 0.5 * static_cast<double>(num_params) * std::log(2.0 * std::numbers::pi) - 0.5 * log_det;
  r.log_marglik_per_example = num_data ? r.log_marglik / static_cast<double>(num_data) : r.log_marglik;
  return r;
}

// ---------------------------------------------------------------------------
// Standalone log-determinants

namespace detail {
inline double sum_log(std::span<const double> v) {
  double s = 0.0;
  for (double x : v) s += std::log(x);
  return s;
}
inline DenseMatrix add_diagonal(DenseMatrix a, std::span<const double> d) {
  if (!a.square() || a.rows() != d.size()) throw DimensionError("add_diagonal: size mismatch");
  for (std::size_t i = 0; i < d.size(); ++i) a(i, i) += d[i];
  return a;
}
}  // namespace detail

/// log|H_lik + diag(prior_diag)| by Cholesky.
inline double logdet_full_direct(const DenseMatrix& h_lik, std::span<const double> prior_diag) {
  return cholesky_logdet(detail::add_diagonal(h_lik, prior_diag));
}

class SingularBlockError : public std::invalid_argument {
 public:
  explicit SingularBlockError(std::size_t block)
      : std::invalid_argument("likelihood Hessian block " + std::to_string(block) +
                              " is singular; use the direct log-determinant or the EF form instead"),
        block_(block) {}
  std::size_t block() const noexcept { return block_; }

 private:
  std::size_t block_;
};

/// |JᵀLJ + P| = |J P⁻¹ Jᵀ + L⁻¹| |L| |P| with the NC x NC kernel form.
inline double logdet_ggn_woodbury(const DenseMatrix& j, const std::vector<DenseMatrix>& l_blocks,
                                  std::span<const double> prior_diag) {
  if (j.cols() != prior_diag.size()) throw DimensionError("logdet_ggn_woodbury: prior length != P");
  if (l_blocks.empty()) return detail::sum_log(prior_diag);
  const std::size_t c = l_blocks.front().rows();
  if (j.rows() != l_blocks.size() * c) throw DimensionError("logdet_ggn_woodbury: J rows != N*C");

  DenseMatrix k(j.rows(), j.rows());
  for (std::size_t r = 0; r < j.rows(); ++r)
    for (std::size_t q = r; q < j.rows(); ++q) {
      double s = 0.0;
      auto jr = j.row(r), jq = j.row(q);
      for (std::size_t p = 0; p < jr.size(); ++p) s += jr[p] * jq[p] / prior_diag[p];
      k(r, q) = k(q, r) = s;
    }

  double logdet_l = 0.0;
  for (std::size_t n = 0; n < l_blocks.size(); ++n) {
    std::optional<Cholesky> ch;
    try {
      ch.emplace(detail::symmetrized(l_blocks[n]));
    } catch (const NotPositiveDefiniteError&) {
      throw SingularBlockError(n);
    }
    logdet_l += ch->logdet();
    const DenseMatrix inv = ch->inverse();
    for (std::size_t a = 0; a < c; ++a)
      for (std::size_t b = 0; b < c; ++b) k(n * c + a, n * c + b) += inv(a, b);
  }
  return cholesky_logdet(k) + logdet_l + detail::sum_log(prior_diag);
}

/// |GᵀG + P| = |G P⁻¹ Gᵀ + I_N| |P|.
inline double logdet_ef_woodbury(const DenseMatrix& g, std::span<const double> prior_diag) {
  if (g.cols() != prior_diag.size()) throw DimensionError("logdet_ef_woodbury: prior length != P");
  DenseMatrix k(g.rows(), g.rows());
  for (std::size_t r = 0; r < g.rows(); ++r)
    for (std::size_t q = r; q < g.rows(); ++q) {
      double s = 0.0;
      auto gr = g.row(r), gq = g.row(q);
      for (std::size_t p = 0; p < gr.size(); ++p) s += gr[p] * gq[p] / prior_diag[p];
      k(r, q) = k(q, r) = s;
    }
  for (std::size_t r = 0; r < g.rows(); ++r) k(r, r) += 1.0;
  return (g.rows() ? cholesky_logdet(k) : 0.0) + detail::sum_log(prior_diag);
}

/// Σ_ij log(b_i a_j + δ): log-determinant of B ⊗ A + δI from the factor spectra.
inline double logdet_kronecker(std::span<const double> b_eigs, std::span<const double> a_eigs, double delta) {
  double s = 0.0;
  for (double b : b_eigs)
    for (double a : a_eigs) s += std::log(b * a + delta);
  return s;
}

/// Damped variant log|(B + √δ I) ⊗ (A + √δ I)|, kept only for comparison.
inline double logdet_kronecker_damped(std::span<const double> b_eigs, std::span<const double> a_eigs, double delta) {
  const double r = std::sqrt(delta);
  double s = 0.0;
  for (double b : b_eigs)
    for (double a : a_eigs) s += std::log((b + r) * (a + r));
  return s;
}

/// Block-diagonal KFAC log-determinant with one δ per group and no damping.
inline double logdet_kfac(const Kfac& kfac, const PriorPrecisions& prior, double scale = 1.0) {
  if (prior.size() != 2 * kfac.layers.size()) throw DimensionError("logdet_kfac: need one δ per group");
  double s = 0.0;
  for (std::size_t l = 0; l < kfac.layers.size(); ++l) {
    const auto& blk = kfac.layers[l];
    Vector b = clip_psd(blk.b_spectrum.eigenvalues);
    for (double& v : b) v *= scale;
    s += logdet_kronecker(b, clip_psd(blk.a_spectrum.eigenvalues), prior.delta(2 * l));
    for (double e : clip_psd(blk.bias_spectrum.eigenvalues)) s += std::log(scale * e + prior.delta(2 * l + 1));
  }
  return s;
}

/// Σ_i log(h_i + δ_i)
inline double logdet_diag(std::span<const double> h, std::span<const double> prior_diag) {
  if (h.size() != prior_diag.size()) throw DimensionError("logdet_diag: length mismatch");
  double s = 0.0;
  for (std::size_t i = 0; i < h.size(); ++i) s += std::log(h[i] + prior_diag[i]);
  return s;
}

/// ½ gᵀ H⁻¹ g. Diagnostic only; it is never part of the training objective.
inline double correction_term(std::span<const double> g, const DenseMatrix& h) {
  const Vector x = psd_solve(h, g);
  return 0.5 * dot(g, x);
}

// ---------------------------------------------------------------------------
// Cached log-determinant engines

enum class PriorStructure { per_group, shared };
enum class FullRoute { automatic, direct, kernel };

/// log|H| and its partial derivatives. `d_delta` has one entry per group in
/// per-group mode and a single entry (the shared δ) otherwise; `d_scale` is
/// the derivative with respect to the likelihood-curvature scale s.
struct LogDetTerms {
  double logdet = 0.0;
  Vector d_delta;
  double d_scale = 0.0;
  // ∂log|H|/∂log T at the build temperature; zero without a temperature tangent.
  double d_log_temperature = 0.0;
};

/// Derivative of the likelihood-curvature factors with respect to log T,
/// taken at the build temperature. Only the member matching the structure is set.
struct CurvatureTangent {
  DenseMatrix du;                  // full: d(rows of U)
  Vector dh;                       // diagonal
  std::vector<DenseMatrix> db;     // KFAC output factors
  std::vector<DenseMatrix> dbias;  // KFAC bias blocks
};

/// Central difference of the accumulated curvature in log T.
inline CurvatureTangent temperature_tangent(CurvatureKind kind, const Mlp& net, std::span<const double> theta,
                                            const Dataset& data, const Likelihood& lik, double step = 1e-4) {
  if (lik.is_gaussian()) throw std::invalid_argument("temperature_tangent: likelihood has no temperature");
  Likelihood up = lik, down = lik;
  up.log_hyper += step;
  down.log_hyper -= step;
  const CurvatureState plus = accumulate(kind, net, theta, data, up);
  const CurvatureState minus = accumulate(kind, net, theta, data, down);
  const double w = 1.0 / (2.0 * step);
  CurvatureTangent t;
  std::visit(
      [&](const auto& a) {
        using T = std::decay_t<decltype(a)>;
        const auto& b = std::get<T>(minus);
        if constexpr (std::is_same_v<T, FullGgn>) {
          t.du = (a.factor() - b.factor()) * w;
        } else if constexpr (std::is_same_v<T, FullEf>) {
          t.du = (a.gradients - b.gradients) * w;
        } else if constexpr (std::is_same_v<T, Kfac>) {
          for (std::size_t l = 0; l < a.layers.size(); ++l) {
            t.db.push_back((a.layers[l].b - b.layers[l].b) * w);
            t.dbias.push_back((a.layers[l].bias - b.layers[l].bias) * w);
          }
        } else {
          t.dh.resize(a.h.size());
          for (std::size_t i = 0; i < a.h.size(); ++i) t.dh[i] = (a.h[i] - b.h[i]) * w;
        }
      },
      plus);
  return t;
}

namespace detail {

/// diag(Qᵀ M Q)
inline Vector projected_diagonal(const DenseMatrix& q, const DenseMatrix& m) {
  Vector d(q.cols(), 0.0);
  for (std::size_t i = 0; i < q.cols(); ++i)
    for (std::size_t j = 0; j < q.rows(); ++j) {
      const double qj = q(j, i);
      if (qj == 0.0) continue;
      double s = 0.0;
      for (std::size_t k = 0; k < q.rows(); ++k) s += m(j, k) * q(k, i);
      d[i] += qj * s;
    }
  return d;
}

/// X(a, b) = Σ_{p in slice} u(a, p) v(b, p)
inline DenseMatrix cross_rows(const DenseMatrix& u, const DenseMatrix& v, std::size_t offset, std::size_t length) {
  DenseMatrix x(u.rows(), v.rows());
  for (std::size_t a = 0; a < u.rows(); ++a) {
    auto ua = u.row(a).subspan(offset, length);
    for (std::size_t b = 0; b < v.rows(); ++b) x(a, b) = dot(ua, v.row(b).subspan(offset, length));
  }
  return x;
}

inline double frobenius(const DenseMatrix& a, const DenseMatrix& b) {
  double s = 0.0;
  for (std::size_t k = 0; k < a.size(); ++k) s += a.data()[k] * b.data()[k];
  return s;
}

}  // namespace detail

namespace engine {

struct Diagonal {
  Vector h;
  std::vector<std::size_t> group_of;
  std::size_t num_groups = 0;
  Vector dh;

  LogDetTerms eval(std::span<const double> delta, double s, bool shared) const {
    LogDetTerms t;
    t.d_delta.assign(shared ? 1 : num_groups, 0.0);
    for (std::size_t i = 0; i < h.size(); ++i) {
      const std::size_t g = group_of[i];
      const double denom = s * h[i] + delta[g];
      t.logdet += std::log(denom);
      t.d_delta[shared ? 0 : g] += 1.0 / denom;
      t.d_scale += h[i] / denom;
      if (!dh.empty()) t.d_log_temperature += s * dh[i] / denom;
    }
    return t;
  }
};

struct Kronecker {
  struct Layer {
    Vector a, b, bias;  // clipped spectra
    DenseMatrix a_vecs, b_vecs, bias_vecs;
    Vector db, dbias;  // temperature tangents in the eigenbases
  };
  std::vector<Layer> layers;

  LogDetTerms eval(std::span<const double> delta, double s, bool shared) const {
    LogDetTerms t;
    t.d_delta.assign(shared ? 1 : 2 * layers.size(), 0.0);
    for (std::size_t l = 0; l < layers.size(); ++l) {
      const auto& ly = layers[l];
      const double dw = delta[2 * l], db = delta[2 * l + 1];
      double& gw = t.d_delta[shared ? 0 : 2 * l];
      for (double b : ly.b)
        for (double a : ly.a) {
          const double denom = s * b * a + dw;
          t.logdet += std::log(denom);
          gw += 1.0 / denom;
          t.d_scale += b * a / denom;
        }
      if (!ly.db.empty())
        for (std::size_t i = 0; i < ly.b.size(); ++i)
          for (double a : ly.a) t.d_log_temperature += s * ly.db[i] * a / (s * ly.b[i] * a + dw);
      double& gb = t.d_delta[shared ? 0 : 2 * l + 1];
      for (double e : ly.bias) {
        const double denom = s * e + db;
        t.logdet += std::log(denom);
        gb += 1.0 / denom;
        t.d_scale += e / denom;
      }
      if (!ly.dbias.empty())
        for (std::size_t k = 0; k < ly.bias.size(); ++k)
          t.d_log_temperature += s * ly.dbias[k] / (s * ly.bias[k] + db);
    }
    return t;
  }
};

/// P x P likelihood term, used when P does not exceed the number of curvature rows.
struct Direct {
  DenseMatrix a;
  std::vector<std::size_t> group_of;
  std::size_t num_groups = 0;
  Vector eigs;  // spectrum of `a`, shared-prior mode only
  DenseMatrix da;
  Vector deigs;

  LogDetTerms eval(std::span<const double> delta, double s, bool shared) const {
    LogDetTerms t;
    if (shared) {
      const double d = delta[0];
      t.d_delta.assign(1, 0.0);
      for (std::size_t i = 0; i < eigs.size(); ++i) {
        const double l = eigs[i];
        const double denom = s * l + d;
        t.logdet += std::log(denom);
        t.d_delta[0] += 1.0 / denom;
        t.d_scale += l / denom;
        if (!deigs.empty()) t.d_log_temperature += s * deigs[i] / denom;
      }
      return t;
    }
    DenseMatrix h = a * s;
    for (std::size_t i = 0; i < h.rows(); ++i) h(i, i) += delta[group_of[i]];
    const Cholesky ch(h);
    t.logdet = ch.logdet();
    const DenseMatrix inv = ch.inverse();
    t.d_delta.assign(num_groups, 0.0);
    for (std::size_t i = 0; i < inv.rows(); ++i) t.d_delta[group_of[i]] += inv(i, i);
    t.d_scale = detail::frobenius(inv, a);
    if (da.size()) t.d_log_temperature = s * detail::frobenius(inv, da);
    return t;
  }
};

/// Kernel (Sylvester) form for P larger than the number of curvature rows R:
/// |sUᵀU + P| = |P| · |I_R + s Σ_l U_l U_lᵀ / δ_l|.
struct Kernel {
  DenseMatrix u;                  // R x P
  std::vector<DenseMatrix> gram;  // per group U_l U_lᵀ
  std::vector<std::size_t> group_sizes;
  Vector eigs;  // spectrum of UUᵀ, shared-prior mode only
  // Temperature tangent: per group U_l dU_lᵀ, or its diagonal in the UUᵀ eigenbasis.
  std::vector<DenseMatrix> cross;
  Vector dcross;

  DenseMatrix system(std::span<const double> delta, double s) const {
    const std::size_t r = u.rows();
    DenseMatrix m = DenseMatrix::identity(r);
    for (std::size_t g = 0; g < gram.size(); ++g) {
      const double w = s / delta[g];
      for (std::size_t k = 0; k < m.size(); ++k) m.data()[k] += w * gram[g].data()[k];
    }
    return m;
  }

  LogDetTerms eval(std::span<const double> delta, double s, bool shared) const {
    LogDetTerms t;
    if (shared) {
      const double d = delta[0];
      double p = 0.0;
      for (auto n : group_sizes) p += static_cast<double>(n);
      t.logdet = p * std::log(d);
      double dd = p / d;
      for (std::size_t i = 0; i < eigs.size(); ++i) {
        const double l = eigs[i];
        const double q = 1.0 + s * l / d;
        t.logdet += std::log(q);
        dd -= (s * l / (d * d)) / q;
        t.d_scale += (l / d) / q;
        if (!dcross.empty()) t.d_log_temperature += 2.0 * s * dcross[i] / (d + s * l);
      }
      t.d_delta.assign(1, dd);
      return t;
    }
    const Cholesky ch(system(delta, s));
    const DenseMatrix minv = ch.inverse();
    t.logdet = ch.logdet();
    t.d_delta.assign(gram.size(), 0.0);
    for (std::size_t g = 0; g < gram.size(); ++g) {
      const double d = delta[g];
      const double tr = detail::frobenius(minv, gram[g]);
      t.logdet += static_cast<double>(group_sizes[g]) * std::log(d);
      t.d_delta[g] = static_cast<double>(group_sizes[g]) / d - s * tr / (d * d);
      t.d_scale += tr / d;
      if (!cross.empty()) t.d_log_temperature += 2.0 * s * detail::frobenius(minv, cross[g]) / d;
    }
    return t;
  }
};

}  // namespace engine

/// Action of the posterior covariance Σ = H⁻¹ in function space:
/// apply(J) = J Σ Jᵀ for a C x P Jacobian.
class CovarianceOperator {
 public:
  virtual ~CovarianceOperator() = default;
  virtual DenseMatrix apply(const DenseMatrix& j) const = 0;
  /// H⁻¹ v
  virtual Vector solve(std::span<const double> v) const = 0;
};

struct CacheOptions {
  PriorStructure prior = PriorStructure::per_group;
  FullRoute route = FullRoute::automatic;
};

/// Everything needed to re-evaluate log q and its hyperparameter gradient at
/// fixed θ* for new hyperparameters. Immutable once built.
class LaplaceCache {
 public:
  struct Evaluation {
    MargLikReport report;
    /// ∂log q / ∂ (log δ coordinates..., log σ² or log T)
    Vector gradient;
  };

  static LaplaceCache build(const Mlp& net, std::span<const double> theta, const Dataset& data,
                            const CurvatureState& curvature, const Likelihood& lik_at_build,
                            CacheOptions options = {}, const CurvatureTangent* tangent = nullptr) {
    LaplaceCache c;
    c.layout_ = net.layout();
    c.options_ = options;
    c.kind_ = kind_of(curvature);
    c.theta_.assign(theta.begin(), theta.end());
    c.likelihood_kind_ = lik_at_build.kind;
    c.build_log_temperature_ = lik_at_build.log_hyper;
    c.num_data_ = data.size();

    for (std::size_t g = 0; g < c.layout_.num_groups(); ++g) {
      const auto& pg = c.layout_.group(g);
      const auto tg = theta.subspan(pg.offset, pg.length);
      c.sq_norms_.push_back(dot(tg, tg));
    }
    const DenseMatrix f = net.forward(theta, data.x);
    if (lik_at_build.is_gaussian()) {
      for (std::size_t n = 0; n < f.rows(); ++n)
        for (std::size_t k = 0; k < f.cols(); ++k) {
          const double r = data.y(n, k) - f(n, k);
          c.rss_ += r * r;
        }
      c.num_outputs_ = f.rows() * f.cols();
    } else {
      c.logits_ = f;
      c.labels_ = data.y;
    }

    const auto group_of = c.layout_.group_index();
    std::visit(
        [&](const auto& s) {
          using T = std::decay_t<decltype(s)>;
          c.noise_power_ = s.noise_power;
          if constexpr (std::is_same_v<T, DiagGgn> || std::is_same_v<T, DiagEf>) {
            engine::Diagonal d{s.h, group_of, c.layout_.num_groups(), {}};
            if (tangent) d.dh = tangent->dh;
            c.engine_ = std::move(d);
          } else if constexpr (std::is_same_v<T, Kfac>) {
            engine::Kronecker k;
            for (std::size_t l = 0; l < s.layers.size(); ++l) {
              const auto& blk = s.layers[l];
              engine::Kronecker::Layer ly{clip_psd(blk.a_spectrum.eigenvalues), clip_psd(blk.b_spectrum.eigenvalues),
                                          clip_psd(blk.bias_spectrum.eigenvalues), *blk.a_spectrum.eigenvectors,
                                          *blk.b_spectrum.eigenvectors, *blk.bias_spectrum.eigenvectors, {}, {}};
              if (tangent) {
                ly.db = detail::projected_diagonal(ly.b_vecs, tangent->db.at(l));
                ly.dbias = detail::projected_diagonal(ly.bias_vecs, tangent->dbias.at(l));
              }
              k.layers.push_back(std::move(ly));
            }
            c.engine_ = std::move(k);
          } else {
            DenseMatrix u;
            if constexpr (std::is_same_v<T, FullGgn>)
              u = s.factor();
            else
              u = s.gradients;
            c.init_full(std::move(u), group_of, tangent ? &tangent->du : nullptr);
          }
        },
        curvature);
    return c;
  }

  std::size_t num_params() const noexcept { return layout_.total(); }
  std::size_t num_data() const noexcept { return num_data_; }
  const ParamLayout& layout() const noexcept { return layout_; }
  CurvatureKind kind() const noexcept { return kind_; }
  bool uses_kernel_route() const noexcept { return std::holds_alternative<engine::Kernel>(engine_); }
  std::size_t num_prior_coords() const noexcept {
    return options_.prior == PriorStructure::shared ? 1 : layout_.num_groups();
  }
  PriorStructure prior_structure() const noexcept { return options_.prior; }

  /// Likelihood-curvature scale s = σ^(-2·noise_power) (1 for categorical).
  double scale(const Likelihood& lik) const {
    return likelihood_kind_ == LikelihoodKind::gaussian ? std::exp(-static_cast<double>(noise_power_) * lik.log_hyper)
                                                         : 1.0;
  }

  double log_likelihood(const Likelihood& lik) const {
    require_kind(lik);
    if (lik.is_gaussian()) {
      const double s2 = lik.sigma2();
      return -0.5 * static_cast<double>(num_outputs_) * std::log(2.0 * std::numbers::pi * s2) - rss_ / (2.0 * s2);
    }
    return marglik::log_likelihood(logits_, labels_, lik);
  }

  double log_prior(const PriorPrecisions& prior) const {
    double lp = 0.0;
    for (std::size_t g = 0; g < layout_.num_groups(); ++g) {
      const double d = static_cast<double>(layout_.group(g).length);
      lp += 0.5 * d * (prior.log_delta.at(g) - std::log(2.0 * std::numbers::pi)) - 0.5 * prior.delta(g) * sq_norms_[g];
    }
    return lp;
  }

  LogDetTerms logdet_terms(const HyperParams& h) const {
    const Vector delta = group_deltas(h.prior);
    const double s = scale(h.likelihood);
    const bool shared = options_.prior == PriorStructure::shared;
    return std::visit([&](const auto& e) { return e.eval(delta, s, shared); }, engine_);
  }

  double log_marglik(const HyperParams& h) const { return evaluate(h, false).report.log_marglik; }

  Evaluation evaluate(const HyperParams& h, bool with_gradient = true) const {
    const LogDetTerms t = logdet_terms(h);
    const double lj = log_likelihood(h.likelihood) + log_prior(h.prior);
    Evaluation ev;
    ev.report = assemble_marglik(lj, t.logdet, num_params(), num_data_);
    ev.report.hypers = h;
    ev.report.temperature_frozen =
        likelihood_kind_ == LikelihoodKind::categorical && h.likelihood.log_hyper != build_log_temperature_;
    if (!with_gradient) return ev;

    const std::size_t np = num_prior_coords();
    ev.gradient.assign(np + 1, 0.0);
    if (options_.prior == PriorStructure::shared) {
      const double d = h.prior.delta(0);
      double sq = 0.0;
      for (double v : sq_norms_) sq += v;
      ev.gradient[0] = 0.5 * static_cast<double>(num_params()) - 0.5 * d * sq - 0.5 * d * t.d_delta[0];
    } else {
      for (std::size_t g = 0; g < np; ++g) {
        const double d = h.prior.delta(g);
        ev.gradient[g] = 0.5 * static_cast<double>(layout_.group(g).length) - 0.5 * d * sq_norms_[g] -
                         0.5 * d * t.d_delta[g];
      }
    }
    if (h.likelihood.is_gaussian()) {
      const double s2 = h.likelihood.sigma2();
      const double s = scale(h.likelihood);
      // ∂/∂log σ² of the log-likelihood, then of −½ log|H| through s = σ^(-2p).
      ev.gradient[np] = -0.5 * static_cast<double>(num_outputs_) + rss_ / (2.0 * s2) +
                        0.5 * static_cast<double>(noise_power_) * s * t.d_scale;
    } else {
      // Central difference in log T on the cached logits. The log-determinant
      // keeps its build-time temperature; its slope enters only through the
      // cached tangent, evaluated at the build temperature.
      const double step = 1e-5;
      Likelihood up = h.likelihood, down = h.likelihood;
      up.log_hyper += step;
      down.log_hyper -= step;
      ev.gradient[np] = (log_likelihood(up) - log_likelihood(down)) / (2.0 * step) - 0.5 * t.d_log_temperature;
    }
    return ev;
  }

  /// Explicit H = s·H_lik + P_θ; intended for P up to a few thousand.
  DenseMatrix dense_hessian(const HyperParams& h) const {
    const Vector delta = group_deltas(h.prior);
    const double s = scale(h.likelihood);
    const auto group_of = layout_.group_index();
    DenseMatrix out = std::visit(
        [&](const auto& e) -> DenseMatrix {
          using T = std::decay_t<decltype(e)>;
          if constexpr (std::is_same_v<T, engine::Diagonal>) {
            return DenseMatrix::diagonal(e.h) * s;
          } else if constexpr (std::is_same_v<T, engine::Kronecker>) {
            DenseMatrix m(layout_.total(), layout_.total());
            for (std::size_t l = 0; l < e.layers.size(); ++l) {
              const auto& ly = e.layers[l];
              const auto a = reconstruct(ly.a_vecs, ly.a);
              const auto b = reconstruct(ly.b_vecs, ly.b);
              const auto bias = reconstruct(ly.bias_vecs, ly.bias);
              const auto k = kron(b, a);
              const auto& wg = layout_.weight_group(l);
              const auto& bg = layout_.bias_group(l);
              for (std::size_t i = 0; i < k.rows(); ++i)
                for (std::size_t j = 0; j < k.cols(); ++j) m(wg.offset + i, wg.offset + j) = s * k(i, j);
              for (std::size_t i = 0; i < bg.length; ++i)
                for (std::size_t j = 0; j < bg.length; ++j) m(bg.offset + i, bg.offset + j) = s * bias(i, j);
            }
            return m;
          } else if constexpr (std::is_same_v<T, engine::Direct>) {
            return e.a * s;
          } else {
            return gram(e.u) * s;
          }
        },
        engine_);
    for (std::size_t i = 0; i < out.rows(); ++i) out(i, i) += delta[group_of[i]];
    return out;
  }

  std::unique_ptr<CovarianceOperator> covariance(const HyperParams& h) const;

  /// Per-parameter prior precision vector for the given prior.
  Vector group_deltas(const PriorPrecisions& prior) const {
    if (prior.size() != layout_.num_groups()) throw DimensionError("prior group count does not match layout");
    if (options_.prior == PriorStructure::shared) {
      for (double v : prior.log_delta)
        if (std::abs(v - prior.log_delta[0]) > 1e-12)
          throw std::invalid_argument("shared prior structure requires equal δ across groups");
    }
    Vector d(prior.size());
    for (std::size_t g = 0; g < d.size(); ++g) d[g] = prior.delta(g);
    return d;
  }

  std::span<const double> theta() const noexcept { return theta_; }
  int noise_power() const noexcept { return noise_power_; }

 private:
  void require_kind(const Likelihood& lik) const {
    if (lik.kind != likelihood_kind_) throw std::invalid_argument("likelihood kind differs from the cached one");
  }

  static DenseMatrix reconstruct(const DenseMatrix& v, const Vector& eig) {
    DenseMatrix m(v.rows(), v.rows());
    for (std::size_t i = 0; i < v.rows(); ++i)
      for (std::size_t j = 0; j < v.rows(); ++j) {
        double s = 0.0;
        for (std::size_t k = 0; k < eig.size(); ++k) s += v(i, k) * eig[k] * v(j, k);
        m(i, j) = s;
      }
    return m;
  }

  void init_full(DenseMatrix u, const std::vector<std::size_t>& group_of, const DenseMatrix* du) {
    if (du && (du->rows() != u.rows() || du->cols() != u.cols()))
      throw DimensionError("temperature tangent does not match the curvature factor");
    const bool shared = options_.prior == PriorStructure::shared;
    bool kernel = u.rows() < u.cols();
    if (options_.route == FullRoute::direct) kernel = false;
    if (options_.route == FullRoute::kernel) kernel = true;
    if (kernel) {
      engine::Kernel k;
      for (const auto& pg : layout_.groups()) {
        k.gram.push_back(gram_rows(u, pg.offset, pg.length));
        k.group_sizes.push_back(pg.length);
      }
      if (du)
        for (const auto& pg : layout_.groups()) k.cross.push_back(detail::cross_rows(u, *du, pg.offset, pg.length));
      if (shared) {
        DenseMatrix total(u.rows(), u.rows());
        for (const auto& g : k.gram) total += g;
        const Spectrum sp = sym_eigendecompose(total, du != nullptr);
        k.eigs = clip_psd(sp.eigenvalues);
        if (du) {
          DenseMatrix x(u.rows(), u.rows());
          for (const auto& g : k.cross) x += g;
          k.dcross = detail::projected_diagonal(*sp.eigenvectors, x);
          k.cross.clear();
        }
      }
      k.u = std::move(u);
      engine_ = std::move(k);
    } else {
      engine::Direct d{gram(u), group_of, layout_.num_groups(), {}, {}, {}};
      if (du) {
        // d(UᵀU) = dUᵀU + UᵀdU
        d.da = matmul(du->transposed(), u);
        d.da += d.da.transposed();
      }
      if (shared) {
        const Spectrum sp = sym_eigendecompose(d.a, du != nullptr);
        d.eigs = clip_psd(sp.eigenvalues);
        if (du) {
          d.deigs = detail::projected_diagonal(*sp.eigenvectors, d.da);
          d.da = DenseMatrix();
        }
      }
      engine_ = std::move(d);
    }
  }

  friend class CovarianceFactory;

  ParamLayout layout_;
  CacheOptions options_;
  CurvatureKind kind_ = CurvatureKind::full_ggn;
  Vector theta_;
  Vector sq_norms_;
  LikelihoodKind likelihood_kind_ = LikelihoodKind::gaussian;
  double build_log_temperature_ = 0.0;
  int noise_power_ = 0;
  std::size_t num_data_ = 0;
  std::size_t num_outputs_ = 0;
  double rss_ = 0.0;
  DenseMatrix logits_;
  DenseMatrix labels_;
  std::variant<engine::Diagonal, engine::Kronecker, engine::Direct, engine::Kernel> engine_;

 public:
  const auto& engine_state() const noexcept { return engine_; }
};

/// Hyperparameter gradient of the Laplace estimate at the cached θ*.
inline Vector hyper_gradients(const LaplaceCache& cache, const HyperParams& hypers) {
  return cache.evaluate(hypers, true).gradient;
}

/// Build curvature of the requested kind and the Laplace cache in one go;
/// categorical likelihoods also get the temperature tangent.
inline LaplaceCache build_laplace(CurvatureKind kind, const Mlp& net, std::span<const double> theta,
                                  const Dataset& data, const Likelihood& lik, CacheOptions options = {}) {
  if (lik.is_gaussian())
    return LaplaceCache::build(net, theta, data, accumulate(kind, net, theta, data, lik), lik, options);
  const CurvatureTangent tangent = temperature_tangent(kind, net, theta, data, lik);
  return LaplaceCache::build(net, theta, data, accumulate(kind, net, theta, data, lik), lik, options, &tangent);
}

// ---------------------------------------------------------------------------
// Covariance operators

namespace covariance_detail {

class DiagonalOp final : public CovarianceOperator {
 public:
  explicit DiagonalOp(Vector inv) : inv_(std::move(inv)) {}
  DenseMatrix apply(const DenseMatrix& j) const override {
    DenseMatrix c(j.rows(), j.rows());
    for (std::size_t a = 0; a < j.rows(); ++a)
      for (std::size_t b = a; b < j.rows(); ++b) {
        double s = 0.0;
        for (std::size_t i = 0; i < inv_.size(); ++i) s += j(a, i) * inv_[i] * j(b, i);
        c(a, b) = c(b, a) = s;
      }
    return c;
  }
  Vector solve(std::span<const double> v) const override {
    Vector x(v.size());
    for (std::size_t i = 0; i < v.size(); ++i) x[i] = v[i] * inv_[i];
    return x;
  }

 private:
  Vector inv_;
};

class KroneckerOp final : public CovarianceOperator {
 public:
  KroneckerOp(const engine::Kronecker& e, const ParamLayout& layout, std::span<const double> delta, double s)
      : e_(e), layout_(layout), delta_(delta.begin(), delta.end()), s_(s) {}

  DenseMatrix apply(const DenseMatrix& j) const override {
    const std::size_t c = j.rows();
    DenseMatrix cov(c, c);
    std::vector<Vector> proj(c);
    for (std::size_t l = 0; l < e_.layers.size(); ++l) {
      const auto& ly = e_.layers[l];
      const auto& wg = layout_.weight_group(l);
      const auto& bg = layout_.bias_group(l);
      for (std::size_t r = 0; r < c; ++r) proj[r] = rotate_weight(ly, j.row(r).subspan(wg.offset, wg.length));
      const std::size_t nb = ly.b.size(), na = ly.a.size();
      for (std::size_t a = 0; a < c; ++a)
        for (std::size_t b = a; b < c; ++b) {
          double sum = 0.0;
          for (std::size_t i = 0; i < nb; ++i)
            for (std::size_t k = 0; k < na; ++k)
              sum += proj[a][i * na + k] * proj[b][i * na + k] / (s_ * ly.b[i] * ly.a[k] + delta_[2 * l]);
          cov(a, b) += sum;
        }
      for (std::size_t r = 0; r < c; ++r) proj[r] = rotate_bias(ly, j.row(r).subspan(bg.offset, bg.length));
      for (std::size_t a = 0; a < c; ++a)
        for (std::size_t b = a; b < c; ++b) {
          double sum = 0.0;
          for (std::size_t k = 0; k < ly.bias.size(); ++k)
            sum += proj[a][k] * proj[b][k] / (s_ * ly.bias[k] + delta_[2 * l + 1]);
          cov(a, b) += sum;
        }
    }
    for (std::size_t a = 0; a < c; ++a)
      for (std::size_t b = 0; b < a; ++b) cov(a, b) = cov(b, a);
    return cov;
  }

  Vector solve(std::span<const double> v) const override {
    Vector x(v.size(), 0.0);
    for (std::size_t l = 0; l < e_.layers.size(); ++l) {
      const auto& ly = e_.layers[l];
      const auto& wg = layout_.weight_group(l);
      const auto& bg = layout_.bias_group(l);
      Vector p = rotate_weight(ly, v.subspan(wg.offset, wg.length));
      const std::size_t nb = ly.b.size(), na = ly.a.size();
      for (std::size_t i = 0; i < nb; ++i)
        for (std::size_t k = 0; k < na; ++k) p[i * na + k] /= s_ * ly.b[i] * ly.a[k] + delta_[2 * l];
      // back-rotate: Q_B P Q_Aᵀ
      for (std::size_t i = 0; i < nb; ++i)
        for (std::size_t k = 0; k < na; ++k) {
          double sum = 0.0;
          for (std::size_t ii = 0; ii < nb; ++ii) {
            const double qb = ly.b_vecs(i, ii);
            if (qb == 0.0) continue;
            for (std::size_t kk = 0; kk < na; ++kk) sum += qb * p[ii * na + kk] * ly.a_vecs(k, kk);
          }
          x[wg.offset + i * na + k] = sum;
        }
      Vector pb = rotate_bias(ly, v.subspan(bg.offset, bg.length));
      for (std::size_t k = 0; k < pb.size(); ++k) pb[k] /= s_ * ly.bias[k] + delta_[2 * l + 1];
      for (std::size_t i = 0; i < pb.size(); ++i) {
        double sum = 0.0;
        for (std::size_t k = 0; k < pb.size(); ++k) sum += ly.bias_vecs(i, k) * pb[k];
        x[bg.offset + i] = sum;
      }
    }
    return x;
  }

 private:
  // Q_Bᵀ M Q_A for the out x in weight block M given row-major.
  static Vector rotate_weight(const engine::Kronecker::Layer& ly, std::span<const double> w) {
    const std::size_t nb = ly.b.size(), na = ly.a.size();
    Vector tmp(nb * na, 0.0), out(nb * na, 0.0);
    for (std::size_t i = 0; i < nb; ++i)
      for (std::size_t j = 0; j < na; ++j) {
        const double v = w[i * na + j];
        if (v == 0.0) continue;
        for (std::size_t k = 0; k < na; ++k) tmp[i * na + k] += v * ly.a_vecs(j, k);
      }
    for (std::size_t i = 0; i < nb; ++i)
      for (std::size_t ii = 0; ii < nb; ++ii) {
        const double q = ly.b_vecs(i, ii);
        if (q == 0.0) continue;
        for (std::size_t k = 0; k < na; ++k) out[ii * na + k] += q * tmp[i * na + k];
      }
    return out;
  }
  static Vector rotate_bias(const engine::Kronecker::Layer& ly, std::span<const double> b) {
    Vector out(b.size(), 0.0);
    for (std::size_t i = 0; i < b.size(); ++i)
      for (std::size_t k = 0; k < b.size(); ++k) out[k] += ly.bias_vecs(i, k) * b[i];
    return out;
  }

  const engine::Kronecker& e_;
  const ParamLayout& layout_;
  Vector delta_;
  double s_;
};

class DirectOp final : public CovarianceOperator {
 public:
  explicit DirectOp(const DenseMatrix& h) : chol_(h) {}
  DenseMatrix apply(const DenseMatrix& j) const override {
    const std::size_t c = j.rows();
    DenseMatrix cov(c, c);
    for (std::size_t a = 0; a < c; ++a) {
      const Vector x = chol_.solve(j.row(a));
      for (std::size_t b = 0; b < c; ++b) cov(a, b) = dot(j.row(b), x);
    }
    for (std::size_t a = 0; a < c; ++a)
      for (std::size_t b = 0; b < a; ++b) cov(a, b) = cov(b, a) = 0.5 * (cov(a, b) + cov(b, a));
    return cov;
  }
  Vector solve(std::span<const double> v) const override { return chol_.solve(v); }

 private:
  Cholesky chol_;
};

/// Σ = P⁻¹ − s P⁻¹Uᵀ M⁻¹ U P⁻¹ with M = I + s U P⁻¹ Uᵀ.
class KernelOp final : public CovarianceOperator {
 public:
  KernelOp(const engine::Kernel& e, Vector inv_prior, double s)
      : e_(e), inv_prior_(std::move(inv_prior)), s_(s) {
    DenseMatrix m = DenseMatrix::identity(e.u.rows());
    for (std::size_t a = 0; a < e.u.rows(); ++a)
      for (std::size_t b = a; b < e.u.rows(); ++b) {
        double sum = 0.0;
        auto ua = e.u.row(a), ub = e.u.row(b);
        for (std::size_t p = 0; p < ua.size(); ++p) sum += ua[p] * inv_prior_[p] * ub[p];
        m(a, b) += s * sum;
        if (a != b) m(b, a) += s * sum;
      }
    chol_.emplace(m);
  }

  DenseMatrix apply(const DenseMatrix& j) const override {
    const std::size_t c = j.rows(), r = e_.u.rows();
    DenseMatrix cov(c, c);
    DenseMatrix w(c, r);
    for (std::size_t a = 0; a < c; ++a) {
      auto ja = j.row(a);
      for (std::size_t q = 0; q < r; ++q) {
        auto uq = e_.u.row(q);
        double sum = 0.0;
        for (std::size_t p = 0; p < ja.size(); ++p) sum += ja[p] * inv_prior_[p] * uq[p];
        w(a, q) = sum;
      }
    }
    for (std::size_t a = 0; a < c; ++a) {
      const Vector x = chol_->solve(w.row(a));
      for (std::size_t b = a; b < c; ++b) {
        double prior_part = 0.0;
        auto ja = j.row(a), jb = j.row(b);
        for (std::size_t p = 0; p < ja.size(); ++p) prior_part += ja[p] * inv_prior_[p] * jb[p];
        cov(a, b) = cov(b, a) = prior_part - s_ * dot(w.row(b), x);
      }
    }
    return cov;
  }

  Vector solve(std::span<const double> v) const override {
    Vector pv(v.size());
    for (std::size_t p = 0; p < v.size(); ++p) pv[p] = v[p] * inv_prior_[p];
    const Vector t = chol_->solve(matvec(e_.u, pv));
    Vector x = pv;
    for (std::size_t q = 0; q < e_.u.rows(); ++q) {
      auto uq = e_.u.row(q);
      for (std::size_t p = 0; p < v.size(); ++p) x[p] -= s_ * inv_prior_[p] * uq[p] * t[q];
    }
    return x;
  }

 private:
  const engine::Kernel& e_;
  Vector inv_prior_;
  double s_;
  std::optional<Cholesky> chol_;
};

}  // namespace covariance_detail

/// The operator references the cache; keep the cache alive while using it.
inline std::unique_ptr<CovarianceOperator> LaplaceCache::covariance(const HyperParams& h) const {
  const Vector delta = group_deltas(h.prior);
  const double s = scale(h.likelihood);
  const auto group_of = layout_.group_index();
  Vector prior_diag(layout_.total());
  for (std::size_t i = 0; i < prior_diag.size(); ++i) prior_diag[i] = delta[group_of[i]];

  return std::visit(
      [&](const auto& e) -> std::unique_ptr<CovarianceOperator> {
        using T = std::decay_t<decltype(e)>;
        if constexpr (std::is_same_v<T, engine::Diagonal>) {
          Vector inv(e.h.size());
          for (std::size_t i = 0; i < inv.size(); ++i) inv[i] = 1.0 / (s * e.h[i] + prior_diag[i]);
          return std::make_unique<covariance_detail::DiagonalOp>(std::move(inv));
        } else if constexpr (std::is_same_v<T, engine::Kronecker>) {
          return std::make_unique<covariance_detail::KroneckerOp>(e, layout_, delta, s);
        } else if constexpr (std::is_same_v<T, engine::Direct>) {
          return std::make_unique<covariance_detail::DirectOp>(dense_hessian(h));
        } else {
          Vector inv(prior_diag.size());
          for (std::size_t i = 0; i < inv.size(); ++i) inv[i] = 1.0 / prior_diag[i];
          return std::make_unique<covariance_detail::KernelOp>(e, std::move(inv), s);
        }
      },
      engine_);
}

}  // namespace marglik
