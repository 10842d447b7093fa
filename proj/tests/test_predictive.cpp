#include <gtest/gtest.h>

#include <cmath>

#include "marglik/metrics.hpp"
#include "marglik/predictive.hpp"
#include "marglik/training.hpp"
#include "support.hpp"

using namespace marglik;
using namespace marglik::testing;

namespace {

Posterior make_posterior(const Mlp& net, std::span<const double> theta, const Dataset& data, const HyperParams& h,
                         CurvatureKind kind = CurvatureKind::full_ggn) {
  auto cache = std::make_shared<const LaplaceCache>(build_laplace(kind, net, theta, data, h.likelihood));
  return Posterior(net, cache, h);
}

DenseMatrix dense_sandwich(const DenseMatrix& j, const DenseMatrix& h) {
  const DenseMatrix hinv = Cholesky(h).inverse();
  return matmul(matmul(j, hinv), j.transposed());
}

Posterior zero_covariance(const Mlp& net, Vector theta, const HyperParams& h) {
  const std::size_t p = theta.size();
  return Posterior(net, std::move(theta), h, std::make_unique<covariance_detail::DiagonalOp>(Vector(p, 0.0)));
}

}  // namespace

TEST(PredictMap, LinearModelIsClosedForm) {
  const Mlp net(NetworkSpec::mlp(2, {}, 1, Activation::tanh));
  const Vector theta{1.5, -2.0, 0.25};
  const DenseMatrix x(2, 2, {1.0, 2.0, -1.0, 0.5});
  const RegressionPredictive r = predict_map_regression(net, theta, x, Likelihood::gaussian(std::log(0.3)));
  EXPECT_NEAR(r.mean(0, 0), 1.5 - 4.0 + 0.25, 1e-14);
  EXPECT_NEAR(r.mean(1, 0), -1.5 - 1.0 + 0.25, 1e-14);
  EXPECT_EQ(r.epistemic(0, 0), 0.0);
  EXPECT_NEAR(r.total(1, 0), 0.3, 1e-14);
}

TEST(PredictMap, EqualLogitsGiveUniform) {
  const Mlp net(NetworkSpec::mlp(2, {}, 4, Activation::tanh));
  const Vector theta(net.num_params(), 0.0);
  const ClassPredictive p = predict_map_classification(net, theta, DenseMatrix(3, 2, 1.0), Likelihood::categorical());
  for (std::size_t n = 0; n < 3; ++n)
    for (std::size_t c = 0; c < 4; ++c) EXPECT_NEAR(p.probs(n, c), 0.25, 1e-15);
}

TEST(PredictMap, MatchesForwardAndSoftmax) {
  std::mt19937_64 rng(1);
  const Mlp net(NetworkSpec::mlp(3, {5}, 3, Activation::relu));
  const Vector theta = random_params(net, rng);
  const DenseMatrix x = random_matrix(4, 3, rng);
  const Likelihood lik = Likelihood::categorical(std::log(0.7));
  const ClassPredictive p = predict_map_classification(net, theta, x, lik);
  const DenseMatrix f = net.forward(theta, x);
  for (std::size_t n = 0; n < 4; ++n) {
    const Vector s = softmax(f.row(n), 0.7);
    for (std::size_t c = 0; c < 3; ++c) EXPECT_EQ(p.probs(n, c), s[c]);
  }
}

TEST(FunctionSpaceCovariance, PriorOnlyIsScaledJacobianGram) {
  std::mt19937_64 rng(2);
  const Mlp net(NetworkSpec::mlp(2, {4}, 2, Activation::tanh));
  const Vector theta = random_params(net, rng);
  const Dataset data = random_regression(10, 2, 2, rng);
  // σ² so large that the data curvature vanishes next to the prior.
  HyperParams h{PriorPrecisions::uniform(net.layout(), 1.0), Likelihood::gaussian(std::log(1e30))};
  for (std::size_t g = 0; g < h.prior.size(); ++g) h.prior.log_delta[g] = std::log(0.5 + g);
  for (CurvatureKind kind : {CurvatureKind::full_ggn, CurvatureKind::kfac, CurvatureKind::diag_ggn}) {
    const Posterior post = make_posterior(net, theta, data, h, kind);
    const Vector x{0.3, -0.8};
    const DenseMatrix cov = function_space_covariance(post, x);
    const DenseMatrix j = jacobians(net, theta, DenseMatrix(1, 2, x)).stacked;
    const auto group_of = net.layout().group_index();
    for (std::size_t a = 0; a < 2; ++a)
      for (std::size_t b = 0; b < 2; ++b) {
        double want = 0.0;
        for (std::size_t i = 0; i < net.num_params(); ++i) want += j(a, i) * j(b, i) / h.prior.delta(group_of[i]);
        EXPECT_NEAR(cov(a, b), want, 1e-9 * std::abs(want) + 1e-14) << to_string(kind);
      }
  }
}

TEST(FunctionSpaceCovariance, MatchesDenseInverseForEveryStructure) {
  std::mt19937_64 rng(3);
  const Mlp net(NetworkSpec::mlp(2, {5, 3}, 3, Activation::tanh));
  const Vector theta = random_params(net, rng);
  const Dataset data = random_classification(12, 2, 3, rng);
  HyperParams h{PriorPrecisions::uniform(net.layout(), 2.0), Likelihood::categorical(std::log(1.3))};
  for (CurvatureKind kind : {CurvatureKind::full_ggn, CurvatureKind::full_ef, CurvatureKind::kfac,
                             CurvatureKind::diag_ggn, CurvatureKind::diag_ef}) {
    auto cache = std::make_shared<const LaplaceCache>(build_laplace(kind, net, theta, data, h.likelihood));
    const Posterior post(net, cache, h);
    const DenseMatrix x = random_matrix(3, 2, rng);
    const JacobianBatch jb = jacobians(net, theta, x);
    const DenseMatrix hd = cache->dense_hessian(h);
    for (std::size_t n = 0; n < 3; ++n) {
      const DenseMatrix got = function_space_covariance(post, x.row(n));
      const DenseMatrix want = dense_sandwich(jb.example(n), hd);
      for (std::size_t a = 0; a < 3; ++a)
        for (std::size_t b = 0; b < 3; ++b) {
          EXPECT_NEAR(got(a, b), want(a, b), 1e-9 * want.max_abs()) << to_string(kind);
          EXPECT_NEAR(got(a, b), got(b, a), 1e-12 * want.max_abs());
        }
      const Vector ev = sym_eigendecompose(detail::symmetrized(got), false).eigenvalues;
      EXPECT_GE(*std::min_element(ev.begin(), ev.end()), -1e-9 * want.max_abs());
    }
  }
}

TEST(FunctionSpaceCovariance, VanishesForHugePrecision) {
  std::mt19937_64 rng(4);
  const Mlp net(NetworkSpec::mlp(1, {6}, 1, Activation::tanh));
  const Vector theta = random_params(net, rng);
  const Dataset data = random_regression(8, 1, 1, rng);
  const HyperParams h{PriorPrecisions::uniform(net.layout(), 1e12), Likelihood::gaussian()};
  const DenseMatrix cov = function_space_covariance(make_posterior(net, theta, data, h), Vector{0.4});
  EXPECT_LT(cov.max_abs(), 1e-10);
}

TEST(PredictBayesRegression, ConjugateLinearRegression) {
  std::mt19937_64 rng(5);
  const std::size_t n = 30, d = 3;
  const Mlp net(NetworkSpec::mlp(d, {}, 1, Activation::tanh));
  const Dataset data = random_regression(n, d, 1, rng);
  const Vector theta = random_params(net, rng);  // curvature of a linear model is θ-independent
  HyperParams h{PriorPrecisions::uniform(net.layout(), 1.0), Likelihood::gaussian(std::log(0.4))};
  h.prior.log_delta = {std::log(0.5), std::log(3.0)};
  const Posterior post = make_posterior(net, theta, data, h);

  // Σ = (ZᵀZ/σ² + diag(δ))⁻¹ on Z = [X, 1].
  DenseMatrix a(d + 1, d + 1);
  for (std::size_t i = 0; i < n; ++i)
    for (std::size_t r = 0; r <= d; ++r)
      for (std::size_t c = 0; c <= d; ++c)
        a(r, c) += (r < d ? data.x(i, r) : 1.0) * (c < d ? data.x(i, c) : 1.0) / 0.4;
  for (std::size_t r = 0; r < d; ++r) a(r, r) += 0.5;
  a(d, d) += 3.0;
  const DenseMatrix sigma = Cholesky(a).inverse();

  const DenseMatrix xs = random_matrix(5, d, rng, 2.0);
  const RegressionPredictive r = predict_bayes_regression(post, xs);
  for (std::size_t i = 0; i < 5; ++i) {
    Vector z(xs.row(i).begin(), xs.row(i).end());
    z.push_back(1.0);
    const double var = dot(z, matvec(sigma, z));
    EXPECT_NEAR(r.epistemic(i, 0), var, 1e-10 * var);
    EXPECT_NEAR(r.total(i, 0), var + 0.4, 1e-10);
    EXPECT_GE(r.total(i, 0), 0.4);
  }
}

TEST(PredictBayesRegression, ZeroCovarianceEqualsMap) {
  std::mt19937_64 rng(6);
  const Mlp net(NetworkSpec::mlp(2, {4}, 2, Activation::tanh));
  const Vector theta = random_params(net, rng);
  const HyperParams h{PriorPrecisions::uniform(net.layout(), 1.0), Likelihood::gaussian(std::log(0.2))};
  const DenseMatrix x = random_matrix(4, 2, rng);
  const RegressionPredictive b = predict_bayes_regression(zero_covariance(net, theta, h), x);
  const RegressionPredictive m = predict_map_regression(net, theta, x, h.likelihood);
  EXPECT_EQ(b.mean.data(), m.mean.data());
  EXPECT_EQ(b.total.data(), m.total.data());
}

TEST(PredictBayesRegression, HugePrecisionMatchesMap) {
  std::mt19937_64 rng(7);
  const Mlp net(NetworkSpec::mlp(1, {10}, 1, Activation::tanh));
  const Vector theta = random_params(net, rng);
  const Dataset data = random_regression(20, 1, 1, rng);
  const HyperParams h{PriorPrecisions::uniform(net.layout(), 1e8), Likelihood::gaussian(std::log(0.1))};
  const DenseMatrix x = random_matrix(6, 1, rng, 3.0);
  const RegressionPredictive b = predict_bayes_regression(make_posterior(net, theta, data, h), x);
  const RegressionPredictive m = predict_map_regression(net, theta, x, h.likelihood);
  for (std::size_t i = 0; i < 6; ++i) {
    EXPECT_NEAR(b.mean(i, 0), m.mean(i, 0), 1e-4);
    EXPECT_NEAR(b.total(i, 0), m.total(i, 0), 1e-4);
  }
}

TEST(PredictBayesRegression, EpistemicGrowsAlongExtrapolationRay) {
  // Sinusoid on [-2, 2]; relu features extrapolate linearly, so J Σ Jᵀ grows with |x|.
  std::mt19937_64 rng(8);
  std::uniform_real_distribution<double> u(-2.0, 2.0);
  std::normal_distribution<double> eps(0.0, 0.1);
  Dataset data{DenseMatrix(60, 1), DenseMatrix(60, 1), Task::regression, 0};
  for (std::size_t i = 0; i < 60; ++i) {
    data.x(i, 0) = u(rng);
    data.y(i, 0) = std::sin(2.0 * data.x(i, 0)) + eps(rng);
  }
  const auto spec = NetworkSpec::mlp(1, {20}, 1, Activation::relu);
  TrainConfig cfg;
  cfg.epochs = 400;
  cfg.lr = 0.01;
  const TrainResult res = run_marglik_training(spec, data, cfg);
  const Mlp net(spec);
  const Posterior post(net, res.posterior, res.hypers);
  DenseMatrix ray(30, 1);
  for (std::size_t i = 0; i < 30; ++i) ray(i, 0) = 2.5 + 0.25 * static_cast<double>(i);
  const RegressionPredictive r = predict_bayes_regression(post, ray);
  std::size_t increases = 0;
  for (std::size_t i = 1; i < 30; ++i) increases += r.epistemic(i, 0) > r.epistemic(i - 1, 0);
  EXPECT_GE(increases, 27u);
  EXPECT_GT(r.epistemic(29, 0), 4.0 * r.epistemic(0, 0));
  const RegressionPredictive inside = predict_bayes_regression(post, DenseMatrix(1, 1, 0.0));
  EXPECT_LT(inside.epistemic(0, 0), r.epistemic(29, 0));
}

TEST(PredictBayesClassification, ZeroCovarianceEqualsMapForAnySampleCount) {
  std::mt19937_64 rng(9);
  const Mlp net(NetworkSpec::mlp(2, {4}, 3, Activation::tanh));
  const Vector theta = random_params(net, rng);
  const HyperParams h{PriorPrecisions::uniform(net.layout(), 1.0), Likelihood::categorical(std::log(1.5))};
  const DenseMatrix x = random_matrix(5, 2, rng);
  const ClassPredictive m = predict_map_classification(net, theta, x, h.likelihood);
  const Posterior post = zero_covariance(net, theta, h);
  for (std::size_t s : {1u, 7u, 100u}) EXPECT_EQ(predict_bayes_classification(post, x, s, 3).probs.data(), m.probs.data());
}

TEST(PredictBayesClassification, SeededSumsToOneAndConverges) {
  std::mt19937_64 rng(10);
  const Mlp net(NetworkSpec::mlp(2, {6}, 3, Activation::tanh));
  const Vector theta = random_params(net, rng, 1.0);
  const Dataset data = random_classification(15, 2, 3, rng);
  const HyperParams h{PriorPrecisions::uniform(net.layout(), 0.5), Likelihood::categorical()};
  const Posterior post = make_posterior(net, theta, data, h);
  const DenseMatrix x = random_matrix(4, 2, rng);
  const ClassPredictive a = predict_bayes_classification(post, x, 10000, 1);
  const ClassPredictive a2 = predict_bayes_classification(post, x, 10000, 1);
  const ClassPredictive b = predict_bayes_classification(post, x, 10000, 2);
  EXPECT_EQ(a.probs.data(), a2.probs.data());
  const double se = 0.5 / std::sqrt(10000.0);
  for (std::size_t n = 0; n < 4; ++n) {
    double sum = 0.0;
    for (std::size_t c = 0; c < 3; ++c) {
      sum += a.probs(n, c);
      // Two independent estimates differ by at most 4 combined standard errors.
      EXPECT_LE(std::abs(a.probs(n, c) - b.probs(n, c)), 4.0 * std::sqrt(2.0) * se);
    }
    EXPECT_NEAR(sum, 1.0, 1e-8);
  }
  EXPECT_THROW(predict_bayes_classification(post, x, 0), std::invalid_argument);
}

TEST(Metrics, RmseOfExactPredictionsIsZero) {
  const DenseMatrix y(3, 2, {1, 2, 3, 4, 5, 6});
  EXPECT_EQ(rmse(y, y), 0.0);
  const DenseMatrix m(3, 2, {2, 2, 3, 4, 5, 6});
  EXPECT_NEAR(rmse(m, y), std::sqrt(1.0 / 6.0), 1e-15);
  const Vector scale{3.0, 1.0};
  EXPECT_NEAR(rmse(m, y, scale), std::sqrt(9.0 / 6.0), 1e-15);
}

TEST(Metrics, GaussianLoglikInOriginalUnits) {
  const DenseMatrix mean(1, 1, 0.0), var(1, 1, 0.25), y(1, 1, 0.5);
  const double std_units = -0.5 * std::log(2.0 * std::numbers::pi * 0.25) - 0.25 / 0.5;
  EXPECT_NEAR(gaussian_test_loglik(mean, var, y), std_units, 1e-15);
  // y_orig = 2·y_std + c: the density is divided by 2.
  const Vector scale{2.0};
  EXPECT_NEAR(gaussian_test_loglik(mean, var, y, scale), std_units - std::log(2.0), 1e-15);
  // Same as evaluating the rescaled Gaussian directly.
  const double direct = -0.5 * std::log(2.0 * std::numbers::pi * 1.0) - 1.0 / 2.0;
  EXPECT_NEAR(gaussian_test_loglik(mean, var, y, scale), direct, 1e-14);
}

TEST(Metrics, AccuracyAndCategoricalLoglik) {
  const DenseMatrix p(3, 2, {0.9, 0.1, 0.4, 0.6, 0.7, 0.3});
  const DenseMatrix y(3, 1, {0, 1, 1});
  EXPECT_NEAR(accuracy(p, y), 2.0 / 3.0, 1e-15);
  EXPECT_NEAR(categorical_test_loglik(p, y), (std::log(0.9) + std::log(0.6) + std::log(0.3)) / 3.0, 1e-15);
  EXPECT_THROW(accuracy(p, DenseMatrix(3, 1, {0, 2, 1})), std::invalid_argument);
}

TEST(Metrics, EceZeroForConfidentCorrect) {
  const DenseMatrix p(2, 2, {1.0, 0.0, 0.0, 1.0});
  EXPECT_EQ(expected_calibration_error(p, DenseMatrix(2, 1, {0, 1})), 0.0);
}

TEST(Metrics, EceHandComputed) {
  // Confidences 0.9, 0.9 (one right) and 0.6 (right): bins (0.8667, 0.9333] and (0.5333, 0.6].
  const DenseMatrix p(3, 2, {0.9, 0.1, 0.1, 0.9, 0.6, 0.4});
  const DenseMatrix y(3, 1, {0, 0, 0});
  const double want = (2.0 / 3.0) * std::abs(0.5 - 0.9) + (1.0 / 3.0) * std::abs(1.0 - 0.6);
  EXPECT_NEAR(expected_calibration_error(p, y), want, 1e-15);
  const double ece = expected_calibration_error(p, y, 1);
  EXPECT_NEAR(ece, std::abs(2.0 / 3.0 - 0.8), 1e-15);
  EXPECT_THROW(expected_calibration_error(DenseMatrix(0, 2), DenseMatrix(0, 1)), std::invalid_argument);
}

TEST(Metrics, OodAucSeparatedTiedAndMonotone) {
  const Vector in{0.9, 0.8, 0.95}, out{0.3, 0.5};
  EXPECT_EQ(ood_auc(in, out), 1.0);
  EXPECT_EQ(ood_auc(out, in), 0.0);
  const Vector same{0.5, 0.5};
  EXPECT_EQ(ood_auc(same, same), 0.5);
  std::mt19937_64 rng(11);
  const Vector a = random_vector(400, rng), b = random_vector(300, rng);
  const double auc = ood_auc(a, b);
  EXPECT_NEAR(auc, 0.5, 0.06);
  Vector ea(a), eb(b);
  for (double& v : ea) v = std::exp(3.0 * v);
  for (double& v : eb) v = std::exp(3.0 * v);
  EXPECT_EQ(ood_auc(ea, eb), auc);
  EXPECT_THROW(ood_auc(Vector{}, b), std::invalid_argument);
}

TEST(Metrics, OodAucMatchesPairCount) {
  const Vector in{0.2, 0.7, 0.7, 0.9}, out{0.7, 0.1, 0.5};
  double wins = 0.0;
  for (double i : in)
    for (double o : out) wins += i > o ? 1.0 : (i == o ? 0.5 : 0.0);
  EXPECT_DOUBLE_EQ(ood_auc(in, out), wins / 12.0);
}
