#include <algorithm>
#include <cmath>
#include <numbers>
#include <vector>

#include <gtest/gtest.h>

#include "bnrm/model.hpp"

namespace {

using bnrm::BaselineHead;
using bnrm::BnrmHead;
using bnrm::Encoder;
using bnrm::Rng;
using bnrm::Tensor;

void fill(Tensor& t, double v) {
  auto d = t.mutable_data();
  std::fill(d.begin(), d.end(), v);
}

std::vector<double> random_vec(Rng& rng, std::size_t n, double lo = -1.0, double hi = 1.0) {
  std::vector<double> v(n);
  for (auto& x : v) x = rng.uniform(lo, hi);
  return v;
}

// Oracle for Gamma(x) that does not go through lgamma.
double gamma_fn(double x) { return std::tgamma(x); }

TEST(Encoder, ZeroWeightsGiveZero) {
  Rng rng(1);
  Encoder enc(4, 5, 3, rng);
  for (auto& [name, p] : enc.parameters()) fill(p, 0.0);
  const auto z = enc.encode(std::vector<double>{1.0, -2.0, 3.0, 0.5});
  EXPECT_EQ(z, (std::vector<double>{0.0, 0.0, 0.0}));
}

TEST(Encoder, IdentityLayersPassPositiveUnitVector) {
  const auto eye = [](std::size_t n) {
    std::vector<double> d(n * n, 0.0);
    for (std::size_t i = 0; i < n; ++i) d[i * n + i] = 1.0;
    return Tensor::parameter({n, n}, d);
  };
  Encoder enc(eye(3), Tensor::zeros({3}, true), eye(3), Tensor::zeros({3}, true));
  EXPECT_EQ(enc.encode(std::vector<double>{1.0, 0.0, 0.0}), (std::vector<double>{1.0, 0.0, 0.0}));
}

TEST(Encoder, SeededInitIsBitIdentical) {
  Rng a(77), b(77);
  const Encoder e1(6, 8, 4, a), e2(6, 8, 4, b);
  const std::vector<double> x{0.1, 0.2, -0.3, 0.4, -0.5, 0.6};
  EXPECT_EQ(e1.encode(x), e2.encode(x));
}

TEST(Encoder, RejectsWrongDimension) {
  Rng rng(1);
  const Encoder enc(4, 5, 3, rng);
  EXPECT_THROW(enc.encode(std::vector<double>{1.0, 2.0}), bnrm::ShapeError);
}

TEST(InferLocal, ZeroPreactivationGivesOnePlusLn2) {
  Rng rng(3);
  auto head = BnrmHead::init(2, 3, rng);
  fill(head.w_k, 0.0);
  const auto q = bnrm::infer_local(head, Tensor::constant({1, 2}, {0.3, -0.7}));
  for (double k : q.kappa.data()) EXPECT_NEAR(k, 1.0 + std::numbers::ln2, 1e-15);
  EXPECT_NEAR(q.kappa.at(0), 1.6931472, 1e-7);
}

TEST(InferLocal, ZeroOutputIsFloored) {
  Rng rng(3);
  auto head = BnrmHead::init(2, 3, rng);
  fill(head.w_ell, 0.0);
  fill(head.w_k, 0.0);
  const auto q = bnrm::infer_local(head, Tensor::constant({1, 2}, {0.3, -0.7}));
  const double kappa = 1.0 + std::numbers::ln2;
  for (double l : q.lambda.data()) EXPECT_NEAR(l, 1e-6 / gamma_fn(1.0 + 1.0 / kappa), 1e-20);
}

TEST(InferLocal, ExponentialCaseKeepsScale) {
  // kappa -> 1 needs softplus -> 0, i.e. a very negative pre-activation.
  Rng rng(3);
  auto head = BnrmHead::init(1, 1, rng);
  head.w_ell.mutable_data()[0] = 2.0;
  head.w_k.mutable_data()[0] = 0.0;
  head.b_k.mutable_data()[0] = -700.0;
  const auto q = bnrm::infer_local(head, Tensor::constant({1, 1}, {1.0}));
  EXPECT_DOUBLE_EQ(q.kappa.item(), 1.0);
  EXPECT_DOUBLE_EQ(q.lambda.item(), 2.0);
}

TEST(InferGlobal, NegativeWeightsAreFloored) {
  Rng rng(4);
  auto head = BnrmHead::init(2, 4, rng);
  fill(head.w, -1.0);
  const auto q = bnrm::infer_global(head);
  for (std::size_t i = 0; i < 4; ++i) {
    EXPECT_NEAR(q.lambda.at(i), 1e-6 / gamma_fn(1.0 + 1.0 / q.kappa.at(i)), 1e-20);
  }
}

TEST(InferGlobal, PositiveWeightWithZeroPreactivation) {
  Rng rng(4);
  auto head = BnrmHead::init(2, 1, rng);
  head.w.mutable_data()[0] = 3.0;
  head.w_kw.mutable_data()[0] = 0.0;
  head.b_kw.mutable_data()[0] = 0.0;
  const auto q = bnrm::infer_global(head);
  const double kappa = 1.0 + std::numbers::ln2;
  EXPECT_NEAR(q.kappa.item(), kappa, 1e-15);
  EXPECT_NEAR(q.lambda.item(), 3.0 / gamma_fn(1.0 + 1.0 / kappa), 1e-13);
}

TEST(Reward, ComposedFromFactors) {
  EXPECT_EQ(bnrm::reward_from_means(std::vector<double>{0.0, 0.0}, std::vector<double>{0.5, 0.25},
                                    -1.0),
            0.0);
  EXPECT_DOUBLE_EQ(bnrm::reward_from_means(std::vector<double>{1.0, 2.0},
                                           std::vector<double>{0.5, 0.25}, -1.0),
                   1.0);
  EXPECT_DOUBLE_EQ(
      bnrm::reward_from_means(std::vector<double>{2.0}, std::vector<double>{0.5}, 0.0), 1.0);
  EXPECT_THROW(bnrm::reward_from_means(std::vector<double>{1.0}, std::vector<double>{}, 0.0),
               bnrm::ShapeError);
}

TEST(Reward, MeanRewardAllZeroMeans) {
  Rng rng(5);
  auto head = BnrmHead::init(2, 3, rng);
  fill(head.w_ell, 0.0);
  fill(head.w, -1.0);
  head.b.mutable_data()[0] = -0.5;
  // Means are floored at 1e-6 so the reward is at most K * 1e-12.
  EXPECT_LE(bnrm::mean_reward(head, std::vector<double>{1.0, 1.0}), 3.000001e-12);
  EXPECT_GE(bnrm::mean_reward(head, std::vector<double>{1.0, 1.0}), 0.0);
}

TEST(Reward, NonNegativeOverRandomForwardPasses) {
  Rng rng(6);
  for (int i = 0; i < 10000; ++i) {
    const std::size_t d = 1 + rng.below(4), k = 1 + rng.below(6);
    auto head = BnrmHead::init(d, k, rng);
    for (auto& [name, p] : head.parameters()) {
      for (auto& x : p.mutable_data()) x = rng.uniform(-3.0, 3.0);
    }
    const auto z = random_vec(rng, d, -5.0, 5.0);
    const auto s = bnrm::sample_reward(head, z, bnrm::dist::draw_noise(rng, k),
                                       bnrm::dist::draw_noise(rng, k));
    ASSERT_GE(s.reward, 0.0);
    for (double t : s.theta) ASSERT_GE(t, 0.0);
    for (double p : s.phi) ASSERT_GE(p, 0.0);
    ASSERT_GE(bnrm::mean_reward(head, z), 0.0);
  }
}

TEST(Reward, SampleEqualsDotProductPlusClippedBias) {
  Rng rng(7);
  for (int i = 0; i < 200; ++i) {
    auto head = BnrmHead::init(3, 5, rng);
    head.b.mutable_data()[0] = rng.uniform(-1.0, 1.0);
    const auto z = random_vec(rng, 3);
    const auto s =
        bnrm::sample_reward(head, z, bnrm::dist::draw_noise(rng, 5), bnrm::dist::draw_noise(rng, 5));
    double dot = 0.0;
    for (std::size_t j = 0; j < 5; ++j) dot += s.theta[j] * s.phi[j];
    EXPECT_EQ(s.reward, dot + std::max(head.b.item(), 0.0));
  }
}

TEST(Reward, SwitchedOffFactorHasNegligibleMean) {
  Rng rng(8);
  auto head = BnrmHead::init(4, 6, rng);
  for (std::size_t r = 0; r < 4; ++r) head.w_ell.mutable_data()[r * 6 + 2] = 0.0;
  head.b_ell.mutable_data()[2] = 0.0;
  for (int i = 0; i < 500; ++i) {
    const auto z = Tensor::constant({1, 4}, random_vec(rng, 4, -10.0, 10.0));
    const auto q = bnrm::infer_local(head, z).values();
    const auto means = bnrm::dist::weibull_mean(q);
    EXPECT_LE(means[2], 1e-6 * (1.0 + 1e-12));
  }
}

TEST(BaselineHead, Examples) {
  Rng rng(9);
  auto head = BaselineHead::init(2, rng);
  fill(head.w_bt, 0.0);
  EXPECT_EQ(bnrm::baseline_reward(head, std::vector<double>{1.0, -1.0}), 0.0);
  head.w_bt.mutable_data()[0] = 2.0;
  head.w_bt.mutable_data()[1] = 3.0;
  EXPECT_DOUBLE_EQ(bnrm::baseline_reward(head, std::vector<double>{1.0, -1.0}), -1.0);
}

TEST(BaselineHead, RankingInvariantUnderPositiveScaling) {
  Rng rng(10);
  for (int trial = 0; trial < 100; ++trial) {
    const auto head = BaselineHead::init(4, rng);
    const double c = rng.uniform(0.01, 100.0);
    std::vector<double> plain, scaled;
    for (int i = 0; i < 12; ++i) {
      auto z = random_vec(rng, 4);
      plain.push_back(bnrm::baseline_reward(head, z));
      for (auto& x : z) x *= c;
      scaled.push_back(bnrm::baseline_reward(head, z));
    }
    EXPECT_EQ(std::max_element(plain.begin(), plain.end()) - plain.begin(),
              std::max_element(scaled.begin(), scaled.end()) - scaled.begin());
  }
}

BaselineHead constant_head(double value) {
  // z = [1] so the reward is the single weight.
  return {Tensor::parameter({1, 1}, {value})};
}

TEST(Ensemble, MeanOfMembers) {
  const std::vector<bnrm::AnyHead> three{constant_head(1.0), constant_head(2.0), constant_head(3.0)};
  const std::vector<double> z{1.0};
  EXPECT_DOUBLE_EQ(bnrm::ensemble_reward(three, z), 2.0);
  const std::vector<bnrm::AnyHead> one{constant_head(4.5)};
  EXPECT_DOUBLE_EQ(bnrm::ensemble_reward(one, z), 4.5);
  const std::vector<bnrm::AnyHead> dup{constant_head(1.0), constant_head(3.0),
                                       constant_head(1.0), constant_head(3.0)};
  EXPECT_DOUBLE_EQ(bnrm::ensemble_reward(dup, z), 2.0);
  EXPECT_THROW(bnrm::ensemble_reward(std::vector<bnrm::AnyHead>{}, z), std::invalid_argument);
}

TEST(RewardNet, CloneIsIndependent) {
  Rng rng(11);
  Encoder enc(3, 4, 2, rng);
  bnrm::RewardNet net{enc, BnrmHead::init(2, 3, rng)};
  auto copy = net.clone();
  const auto x = Tensor::constant({1, 3}, {0.5, -0.5, 1.0});
  EXPECT_EQ(net.mean_reward(x).item(), copy.mean_reward(x).item());
  for (auto& [name, p] : copy.parameters()) fill(p, 0.0);
  EXPECT_NE(net.parameters()[0].second.at(0), 0.0);
}

}  // namespace
