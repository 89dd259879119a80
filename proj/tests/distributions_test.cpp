#include <cmath>
#include <numbers>
#include <vector>

#include <gtest/gtest.h>

#include "bnrm/distributions.hpp"

namespace {

namespace dist = bnrm::dist;
using bnrm::diff::Tensor;

const double kOneMinusLn2 = 1.0 - std::numbers::ln2;

double sample_one(double kappa, double lambda, double u) {
  return dist::weibull_sample({{kappa}, {lambda}}, std::vector<double>{u})[0];
}

TEST(WeibullSample, UnitExponentialNoise) {
  const double u = 1.0 - std::exp(-1.0);
  EXPECT_NEAR(sample_one(1.0, 2.0, u), 2.0, 1e-14);
  EXPECT_NEAR(sample_one(2.0, 1.0, u), 1.0, 1e-14);
}

TEST(WeibullSample, DirectFormula) {
  const double oracle = 3.0 * std::numbers::ln2 * std::numbers::ln2;
  EXPECT_NEAR(sample_one(0.5, 3.0, 0.5), oracle, 1e-14);
  EXPECT_NEAR(sample_one(0.5, 3.0, 0.5), 1.4413590, 1e-7);
}

TEST(WeibullSample, RejectsUnclampedNoise) {
  EXPECT_THROW(sample_one(1.0, 1.0, 0.0), bnrm::DomainError);
  EXPECT_THROW(sample_one(1.0, 1.0, 1.0), bnrm::DomainError);
  EXPECT_THROW(sample_one(1.0, 1.0, 1.5), bnrm::DomainError);
  EXPECT_NO_THROW(sample_one(1.0, 1.0, dist::clamp_noise(0.0)));
}

TEST(WeibullSample, TensorFormAgreesWithValueForm) {
  const auto k = Tensor::constant({3}, {0.5, 1.0, 3.0});
  const auto l = Tensor::constant({3}, {3.0, 2.0, 0.7});
  const std::vector<double> u{0.5, 0.1, 0.9};
  const auto t = dist::weibull_sample(k, l, u);
  const auto v = dist::weibull_sample({{0.5, 1.0, 3.0}, {3.0, 2.0, 0.7}}, u);
  for (std::size_t i = 0; i < 3; ++i) EXPECT_NEAR(t.at(i), v[i], 1e-13 * v[i]);
}

TEST(WeibullMean, Examples) {
  EXPECT_DOUBLE_EQ(dist::weibull_mean({{1.0}, {5.0}})[0], 5.0);
  EXPECT_NEAR(dist::weibull_mean({{2.0}, {1.0}})[0], std::sqrt(std::numbers::pi) / 2.0, 1e-15);
  EXPECT_NEAR(dist::weibull_mean({{2.0}, {1.0}})[0], 0.8862269, 1e-7);
  EXPECT_DOUBLE_EQ(dist::weibull_mean({{1.0}, {0.0}})[0], 1e-6);
}

TEST(WeibullMean, MatchesEmpiricalMeanOfSamples) {
  const std::vector<std::pair<double, double>> settings{{1.0, 1.0}, {1.3, 4.0}, {3.5, 0.2}};
  for (const auto& [kappa, lambda] : settings) {
    bnrm::Rng rng(2024);
    const std::size_t n = 1'000'000;
    const auto u = dist::draw_noise(rng, n);
    const auto xs = dist::weibull_sample(
        {std::vector<double>(n, kappa), std::vector<double>(n, lambda)}, u);
    double mean = 0.0, m2 = 0.0;
    for (std::size_t i = 0; i < n; ++i) {
      const double d = xs[i] - mean;
      mean += d / static_cast<double>(i + 1);
      m2 += d * (xs[i] - mean);
    }
    const double se = std::sqrt(m2 / static_cast<double>(n - 1) / static_cast<double>(n));
    const double expected = dist::weibull_mean({{kappa}, {lambda}})[0];
    EXPECT_LT(std::abs(mean - expected), 4.0 * se) << "kappa=" << kappa << " lambda=" << lambda;
  }
}

TEST(KlWeibullGamma, IdenticalExponentialsIsZero) {
  EXPECT_NEAR(dist::kl_weibull_gamma(1.0, 1.0, {}), 0.0, 1e-15);
}

TEST(KlWeibullGamma, ExponentialsWithDifferentRates) {
  // KL(Exp(rate 1/2) || Exp(rate 1)) = ln(r_q/r_p) + r_p/r_q - 1
  const double oracle = std::log(0.5 / 1.0) + 1.0 / 0.5 - 1.0;
  EXPECT_NEAR(dist::kl_weibull_gamma(1.0, 2.0, {}), oracle, 1e-14);
  EXPECT_NEAR(oracle, kOneMinusLn2, 1e-15);
  EXPECT_NEAR(dist::kl_weibull_gamma(1.0, 2.0, {}), 0.3068528, 1e-7);
}

TEST(KlWeibullGamma, MatchesMonteCarloAtGenericPoint) {
  const dist::WeibullParams q{{1.7}, {0.8}};
  const auto mc = dist::kl_monte_carlo(q, {}, 1'000'000, 5);
  const double closed = dist::kl_weibull_gamma(q, {});
  EXPECT_LT(std::abs(closed - mc.estimate), 3.0 * mc.std_error)
      << "closed " << closed << " mc " << mc.estimate << " se " << mc.std_error;
}

TEST(KlWeibullGamma, MatchesMonteCarloOnRandomSettings) {
  bnrm::Rng pick(31);
  for (int i = 0; i < 5; ++i) {
    const double kappa = pick.uniform(1.0, 5.0), lambda = pick.uniform(0.1, 10.0);
    const dist::WeibullParams q{{kappa}, {lambda}};
    const auto mc = dist::kl_monte_carlo(q, {}, 1'000'000, 100 + i);
    EXPECT_LT(std::abs(dist::kl_weibull_gamma(q, {}) - mc.estimate), 3.0 * mc.std_error)
        << "kappa=" << kappa << " lambda=" << lambda;
  }
}

TEST(KlWeibullGamma, NonNegativeOnGrid) {
  const std::vector<dist::GammaPrior> priors{{1.0, 1.0}, {0.5, 2.0}, {3.0, 0.25}};
  for (const auto& p : priors) {
    for (double kappa = 0.2; kappa <= 20.0; kappa *= 1.3) {
      for (double lambda = 1e-6; lambda <= 1e3; lambda *= 2.1) {
        EXPECT_GE(dist::kl_weibull_gamma(kappa, lambda, p), -1e-9)
            << kappa << " " << lambda << " " << p.alpha << " " << p.beta;
      }
    }
  }
}

TEST(KlWeibullGamma, RejectsNonPositiveParameters) {
  EXPECT_THROW(dist::kl_weibull_gamma(0.0, 1.0, {}), bnrm::DomainError);
  EXPECT_THROW(dist::kl_weibull_gamma(1.0, -1.0, {}), bnrm::DomainError);
  EXPECT_THROW(dist::kl_weibull_gamma(1.0, 1.0, {0.0, 1.0}), bnrm::DomainError);
}

TEST(KlWeibullGamma, TensorFormIsBitIdenticalToValueForm) {
  const std::vector<double> ks{1.0, 1.7, 4.2}, ls{2.0, 0.8, 1e-6};
  const auto t = dist::kl_weibull_gamma(Tensor::constant({3}, ks), Tensor::constant({3}, ls),
                                        {2.0, 0.5});
  for (std::size_t i = 0; i < 3; ++i) {
    EXPECT_EQ(t.at(i), dist::kl_weibull_gamma(ks[i], ls[i], {2.0, 0.5}));
  }
}

TEST(KlWeibullGamma, GradientMatchesFiniteDifferences) {
  bnrm::Rng pick(8);
  for (int trial = 0; trial < 50; ++trial) {
    auto k = Tensor::parameter({1}, {pick.uniform(1.0, 5.0)});
    auto l = Tensor::parameter({1}, {pick.uniform(0.1, 10.0)});
    const auto report = bnrm::diff::check_gradients(
        [&] { return bnrm::diff::sum(dist::kl_weibull_gamma(k, l, {})); }, {k, l}, 1e-5, 1e-4);
    EXPECT_TRUE(report.pass) << "trial " << trial << " err " << report.worst;
  }
}

TEST(KlMonteCarlo, Examples) {
  const auto zero = dist::kl_monte_carlo({{1.0}, {1.0}}, {}, 1'000'000, 1);
  EXPECT_LE(std::abs(zero.estimate), 3.0 * zero.std_error + 1e-12);
  const auto half = dist::kl_monte_carlo({{1.0}, {2.0}}, {}, 1'000'000, 1);
  EXPECT_LT(std::abs(half.estimate - kOneMinusLn2), 3.0 * half.std_error);
}

TEST(KlMonteCarlo, SameSeedSameEstimate) {
  const auto a = dist::kl_monte_carlo({{1.7}, {0.8}}, {}, 10'000, 42);
  const auto b = dist::kl_monte_carlo({{1.7}, {0.8}}, {}, 10'000, 42);
  EXPECT_EQ(a.estimate, b.estimate);
  EXPECT_EQ(a.std_error, b.std_error);
}

TEST(KlMonteCarlo, RejectsSmallSampleCounts) {
  EXPECT_THROW(dist::kl_monte_carlo({{1.0}, {1.0}}, {}, 100, 1), std::invalid_argument);
  EXPECT_THROW(dist::kl_monte_carlo({{-1.0}, {1.0}}, {}, 10'000, 1), bnrm::DomainError);
}

}  // namespace
