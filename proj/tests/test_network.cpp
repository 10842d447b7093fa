#include <gtest/gtest.h>

#include <cmath>

#include "marglik/likelihood.hpp"
#include "marglik/network.hpp"
#include "marglik/objective.hpp"
#include "support.hpp"

using namespace marglik;
using namespace marglik::testing;

namespace {

// Layer-by-layer recomputation with explicit loops, independent of Mlp.
Vector reference_forward(const NetworkSpec& spec, const Vector& theta, std::span<const double> x) {
  Vector a(x.begin(), x.end());
  std::size_t off = 0;
  for (std::size_t l = 0; l < spec.num_layers(); ++l) {
    const std::size_t in = spec.fan_in(l), out = spec.fan_out(l);
    Vector z(out);
    for (std::size_t i = 0; i < out; ++i) {
      double s = theta[off + in * out + i];
      for (std::size_t j = 0; j < in; ++j) s += theta[off + i * in + j] * a[j];
      z[i] = s;
    }
    off += in * out + out;
    if (l + 1 < spec.num_layers()) {
      for (double& v : z) v = spec.activations[l] == Activation::relu ? std::max(0.0, v) : std::tanh(v);
    }
    a = z;
  }
  return a;
}

NetworkSpec tanh_net() { return NetworkSpec::mlp(3, {4, 5}, 2, Activation::tanh); }

}  // namespace

TEST(Layout, ToyNetworkParameterCounts) {
  EXPECT_EQ(ParamLayout(NetworkSpec::mlp(1, {50}, 1, Activation::tanh)).total(), 151u);
  EXPECT_EQ(ParamLayout(NetworkSpec::mlp(1, {50, 50, 50}, 1, Activation::tanh)).total(), 5251u);
}

TEST(Layout, GroupsPartitionParameters) {
  const ParamLayout layout(NetworkSpec::mlp(3, {4, 5}, 2, Activation::relu));
  ASSERT_EQ(layout.num_groups(), 6u);
  std::size_t next = 0;
  for (const auto& g : layout.groups()) {
    EXPECT_EQ(g.offset, next);
    next += g.length;
  }
  EXPECT_EQ(next, layout.total());
  EXPECT_EQ(layout.group(0).name(), "w1");
  EXPECT_EQ(layout.group(5).name(), "b3");
}

TEST(Init, DeterministicGivenSeed) {
  const auto spec = NetworkSpec::mlp(2, {8, 8}, 3, Activation::relu);
  EXPECT_EQ(init_params(spec, 42).values, init_params(spec, 42).values);
  EXPECT_NE(init_params(spec, 42).values, init_params(spec, 43).values);
}

TEST(Init, BoundsAndZeroBiases) {
  const auto spec = NetworkSpec::mlp(4, {10}, 2, Activation::relu);
  const auto p = init_params(spec, 1);
  const double relu_bound = std::sqrt(6.0 / 4.0);
  const double glorot_bound = std::sqrt(6.0 / 12.0);
  for (double w : p.group(0)) EXPECT_LE(std::abs(w), relu_bound);
  for (double w : p.group(2)) EXPECT_LE(std::abs(w), glorot_bound);
  for (double b : p.group(1)) EXPECT_EQ(b, 0.0);
  for (double b : p.group(3)) EXPECT_EQ(b, 0.0);
}

TEST(Forward, ZeroParamsGiveZeroOutputs) {
  const Mlp net(tanh_net());
  std::mt19937_64 rng(1);
  const DenseMatrix x = random_matrix(4, 3, rng);
  const DenseMatrix f = net.forward(Vector(net.num_params(), 0.0), x);
  EXPECT_EQ(f.max_abs(), 0.0);
}

TEST(Forward, LinearModelIsAffineMap) {
  const Mlp net(NetworkSpec::mlp(3, {}, 2, Activation::relu));
  const Vector theta{1, 2, 3, -1, 0, 1, 0.5, -0.5};
  const DenseMatrix x = DenseMatrix::from_rows({{1, 1, 1}, {2, 0, -1}});
  const DenseMatrix f = net.forward(theta, x);
  EXPECT_DOUBLE_EQ(f(0, 0), 6.5);
  EXPECT_DOUBLE_EQ(f(0, 1), -0.5);
  EXPECT_DOUBLE_EQ(f(1, 0), -0.5);
  EXPECT_DOUBLE_EQ(f(1, 1), -3.5);
}

TEST(Forward, MatchesReferenceOracle) {
  std::mt19937_64 rng(2);
  for (auto act : {Activation::relu, Activation::tanh}) {
    const auto spec = NetworkSpec::mlp(3, {6, 4}, 2, act);
    const Mlp net(spec);
    const Vector theta = random_params(net, rng);
    const DenseMatrix x = random_matrix(7, 3, rng);
    const DenseMatrix f = net.forward(theta, x);
    for (std::size_t n = 0; n < x.rows(); ++n) {
      const Vector ref = reference_forward(spec, theta, x.row(n));
      for (std::size_t c = 0; c < 2; ++c) EXPECT_NEAR(f(n, c), ref[c], 1e-12);
    }
  }
}

TEST(Forward, RejectsWrongInputWidth) {
  const Mlp net(tanh_net());
  EXPECT_THROW(net.forward(Vector(net.num_params()), DenseMatrix(2, 4)), DimensionError);
  EXPECT_THROW(net.forward(Vector(3), DenseMatrix(2, 3)), DimensionError);
}

TEST(Forward, RowsIndependentOfBatch) {
  std::mt19937_64 rng(4);
  const Mlp net(tanh_net());
  const Vector theta = random_params(net, rng);
  const DenseMatrix x = random_matrix(5, 3, rng);
  const DenseMatrix full = net.forward(theta, x);
  const DenseMatrix one = net.forward(theta, DenseMatrix(1, 3, Vector(x.row(3).begin(), x.row(3).end())));
  EXPECT_EQ(full(3, 0), one(0, 0));
  EXPECT_EQ(full(3, 1), one(0, 1));
}

TEST(Gradient, FiniteDifferencesGaussianAndCategorical) {
  std::mt19937_64 rng(5);
  const Mlp net(tanh_net());
  const Vector theta = random_params(net, rng);
  const PriorPrecisions prior{random_vector(net.layout().num_groups(), rng, 0.3)};
  const Dataset reg = random_regression(6, 3, 2, rng);
  const Dataset cls = random_classification(6, 3, 2, rng);
  for (const auto& [data, lik] : {std::pair{reg, Likelihood::gaussian(-0.3)}, std::pair{cls, Likelihood::categorical(0.2)}}) {
    const Vector g = grad_log_joint(net, theta, data, lik, prior, 10);
    auto f = [&](std::span<const double> t) {
      return log_joint_and_grad(net, t, data, lik, prior, 10, nullptr).total();
    };
    for (std::size_t i = 0; i < theta.size(); ++i) {
      const double h = 1e-5 * (1.0 + std::abs(theta[i]));
      const double fd = central_difference(f, theta, i, h);
      EXPECT_LE(std::abs(g[i] - fd), 1e-4 * std::max(1.0, std::abs(fd))) << "coordinate " << i;
    }
  }
}

TEST(Gradient, InterpolatingLinearOptimumIsStationary) {
  const Mlp net(NetworkSpec::mlp(2, {}, 1, Activation::relu));
  const Vector theta{1.5, -2.0, 0.25};
  const DenseMatrix x = DenseMatrix::from_rows({{1, 0}, {0, 1}, {1, 1}, {-1, 2}});
  DenseMatrix y = net.forward(theta, x);
  const Dataset data{x, y, Task::regression, 0};
  const PriorPrecisions prior{Vector(2, std::log(1e-12))};
  for (double g : grad_log_joint(net, theta, data, Likelihood::gaussian(), prior, 4)) EXPECT_NEAR(g, 0.0, 1e-10);
}

TEST(Gradient, DoublingNoiseHalvesLikelihoodGradient) {
  std::mt19937_64 rng(6);
  const Mlp net(tanh_net());
  const Vector theta = random_params(net, rng);
  const Dataset data = random_regression(5, 3, 2, rng);
  const DenseMatrix g1 = per_example_gradients(net, theta, data, Likelihood::gaussian(0.0));
  const DenseMatrix g2 = per_example_gradients(net, theta, data, Likelihood::gaussian(std::log(2.0)));
  for (std::size_t k = 0; k < g1.size(); ++k) EXPECT_NEAR(g2.data()[k], 0.5 * g1.data()[k], 1e-14);
}

TEST(PerExample, RowsSumToLikelihoodGradient) {
  std::mt19937_64 rng(7);
  const Mlp net(tanh_net());
  const Vector theta = random_params(net, rng);
  const Dataset data = random_classification(9, 3, 2, rng);
  const Likelihood lik = Likelihood::categorical();
  const DenseMatrix g = per_example_gradients(net, theta, data, lik);
  // A vanishing prior isolates the likelihood part.
  const PriorPrecisions none{Vector(net.layout().num_groups(), -300.0)};
  const Vector total = grad_log_joint(net, theta, data, lik, none, data.size());
  for (std::size_t p = 0; p < theta.size(); ++p) {
    double s = 0.0;
    for (std::size_t n = 0; n < g.rows(); ++n) s += g(n, p);
    EXPECT_NEAR(s, total[p], 1e-10);
  }
}

TEST(PerExample, SingleExampleEqualsFullGradient) {
  std::mt19937_64 rng(8);
  const Mlp net(tanh_net());
  const Vector theta = random_params(net, rng);
  const Dataset data = random_regression(1, 3, 2, rng);
  const PriorPrecisions none{Vector(net.layout().num_groups(), -300.0)};
  const DenseMatrix g = per_example_gradients(net, theta, data, Likelihood::gaussian());
  const Vector full = grad_log_joint(net, theta, data, Likelihood::gaussian(), none, 1);
  for (std::size_t p = 0; p < theta.size(); ++p) EXPECT_NEAR(g(0, p), full[p], 1e-12);
}

TEST(PerExample, FiniteDifferences) {
  std::mt19937_64 rng(9);
  const Mlp net(NetworkSpec::mlp(2, {3}, 3, Activation::tanh));
  const Vector theta = random_params(net, rng);
  const Dataset data = random_classification(3, 2, 3, rng);
  const Likelihood lik = Likelihood::categorical(0.4);
  const DenseMatrix g = per_example_gradients(net, theta, data, lik);
  for (std::size_t n = 0; n < data.size(); ++n) {
    const std::size_t idx[] = {n};
    const Dataset one = data.subset(idx);
    auto f = [&](std::span<const double> t) { return log_likelihood(net.forward(t, one.x), one.y, lik); };
    for (std::size_t i = 0; i < theta.size(); ++i) {
      const double fd = central_difference(f, theta, i, 1e-5 * (1.0 + std::abs(theta[i])));
      EXPECT_LE(std::abs(g(n, i) - fd), 1e-4 * std::max(1.0, std::abs(fd)));
    }
  }
}

TEST(PerExample, ChainRuleThroughJacobian) {
  std::mt19937_64 rng(10);
  const Mlp net(tanh_net());
  const Vector theta = random_params(net, rng);
  const Dataset reg = random_regression(4, 3, 2, rng);
  const Dataset cls = random_classification(4, 3, 2, rng);
  for (const auto& [data, lik] : {std::pair{reg, Likelihood::gaussian(0.7)}, std::pair{cls, Likelihood::categorical(-0.5)}}) {
    const DenseMatrix g = per_example_gradients(net, theta, data, lik);
    const JacobianBatch jb = jacobians(net, theta, data.x);
    const DenseMatrix f = net.forward(theta, data.x);
    for (std::size_t n = 0; n < data.size(); ++n) {
      const Vector e = loglik_grad_wrt_f(f.row(n), data.y.row(n), lik);
      const Vector jt = matvec(jb.example(n).transposed(), e);
      for (std::size_t p = 0; p < jt.size(); ++p) EXPECT_NEAR(g(n, p), jt[p], 1e-8);
    }
  }
}

TEST(Gradient, NonFiniteLossReportsExample) {
  const Mlp net(NetworkSpec::mlp(1, {}, 1, Activation::relu));
  const Dataset data{DenseMatrix::from_rows({{1}, {1e300}}), DenseMatrix::from_rows({{0}, {0}}), Task::regression, 0};
  const Vector theta{1e10, 0};
  try {
    grad_log_joint(net, theta, data, Likelihood::gaussian(), PriorPrecisions{{0, 0}}, 2);
    FAIL() << "expected NumericError";
  } catch (const NumericError& e) {
    EXPECT_NE(std::string(e.what()).find("example 1"), std::string::npos);
  }
}

TEST(Jacobian, LinearModelPattern) {
  const Mlp net(NetworkSpec::mlp(2, {}, 2, Activation::relu));
  const Vector theta(net.num_params(), 0.3);
  const DenseMatrix x = DenseMatrix::from_rows({{4, -1}});
  const DenseMatrix j = jacobians(net, theta, x).example(0);
  // layout: W (2x2 row-major) then b (2)
  const DenseMatrix expected = DenseMatrix::from_rows({{4, -1, 0, 0, 1, 0}, {0, 0, 4, -1, 0, 1}});
  EXPECT_EQ(j, expected);
}

TEST(Jacobian, DeadReluUnits) {
  const auto spec = NetworkSpec::mlp(1, {3}, 2, Activation::relu);
  const Mlp net(spec);
  const auto& layout = net.layout();
  Vector theta(net.num_params(), 0.0);
  for (std::size_t i = 0; i < 3; ++i) theta[layout.weight_group(0).offset + i] = 1.0;
  for (std::size_t i = 0; i < 3; ++i) theta[layout.bias_group(0).offset + i] = -1.0;
  for (std::size_t i = 0; i < 6; ++i) theta[layout.weight_group(1).offset + i] = 0.7;
  const DenseMatrix j = jacobians(net, theta, DenseMatrix::from_rows({{-2.0}})).example(0);
  const auto& w2 = layout.weight_group(1);
  const auto& b2 = layout.bias_group(1);
  for (std::size_t c = 0; c < 2; ++c) {
    for (std::size_t i = 0; i < w2.length; ++i) EXPECT_EQ(j(c, w2.offset + i), 0.0);
    for (std::size_t i = 0; i < b2.length; ++i) EXPECT_EQ(j(c, b2.offset + i), c == i ? 1.0 : 0.0);
  }
}

TEST(Jacobian, ReluKinkHasZeroSubgradient) {
  const auto spec = NetworkSpec::mlp(1, {1}, 1, Activation::relu);
  const Mlp net(spec);
  const Vector theta{1.0, 0.0, 2.0, 0.0};  // w1, b1, w2, b2
  const DenseMatrix j = jacobians(net, theta, DenseMatrix::from_rows({{0.0}})).example(0);
  EXPECT_EQ(j(0, 0), 0.0);
  EXPECT_EQ(j(0, 1), 0.0);
  EXPECT_EQ(net.forward(theta, DenseMatrix::from_rows({{0.0}}))(0, 0), 0.0);
}

TEST(Jacobian, FiniteDifferencesOnTanhNet) {
  std::mt19937_64 rng(11);
  const Mlp net(tanh_net());
  const Vector theta = random_params(net, rng);
  const DenseMatrix x = random_matrix(3, 3, rng);
  const JacobianBatch jb = jacobians(net, theta, x);
  for (std::size_t n = 0; n < 3; ++n)
    for (std::size_t c = 0; c < 2; ++c) {
      auto f = [&](std::span<const double> t) {
        return net.forward(t, DenseMatrix(1, 3, Vector(x.row(n).begin(), x.row(n).end())))(0, c);
      };
      for (std::size_t i = 0; i < theta.size(); ++i) {
        const double fd = central_difference(f, theta, i, 1e-5);
        EXPECT_LE(std::abs(jb.stacked(n * 2 + c, i) - fd), 1e-4 * std::max(1.0, std::abs(fd)));
      }
    }
}
