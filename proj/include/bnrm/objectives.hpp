#pragma once

#include <cmath>
#include <span>
#include <stdexcept>
#include <string>
#include <vector>

#include "bnrm/datagen.hpp"
#include "bnrm/diffcore.hpp"
#include "bnrm/distributions.hpp"
#include "bnrm/model.hpp"
#include "bnrm/random.hpp"

namespace bnrm {

/// -ln sigmoid(r1 - r2)
inline double bt_loss(double r1, double r2) { return diff::softplus(-(r1 - r2)); }

/// -ln sigmoid(r1 - r2 - m)
inline double bt_margin_loss(double r1, double r2, double m) {
  if (!(m >= 0.0)) throw std::invalid_argument("bt_margin_loss: margin must be >= 0");
  return diff::softplus(-(r1 - r2 - m));
}

/// -(1-eps) ln sigmoid(r1 - r2) - eps ln sigmoid(r2 - r1)
inline double bt_label_smooth_loss(double r1, double r2, double eps) {
  if (!(eps >= 0.0 && eps < 0.5)) {
    throw std::invalid_argument("bt_label_smooth_loss: eps must lie in [0, 0.5)");
  }
  const double d = r1 - r2;
  return (1.0 - eps) * diff::softplus(-d) + eps * diff::softplus(d);
}

// Elementwise tensor forms, batch-mean them for a training loss.
inline Tensor bt_loss(const Tensor& r1, const Tensor& r2) { return diff::softplus(r2 - r1); }

inline Tensor bt_margin_loss(const Tensor& r1, const Tensor& r2, double m) {
  if (!(m >= 0.0)) throw std::invalid_argument("bt_margin_loss: margin must be >= 0");
  return diff::softplus(r2 - r1 + m);
}

inline Tensor bt_label_smooth_loss(const Tensor& r1, const Tensor& r2, double eps) {
  if (!(eps >= 0.0 && eps < 0.5)) {
    throw std::invalid_argument("bt_label_smooth_loss: eps must lie in [0, 0.5)");
  }
  const auto d = r1 - r2;
  return (1.0 - eps) * diff::softplus(-d) + eps * diff::softplus(d);
}

using PairBatch = std::span<const PreferencePair* const>;

/// [2B, d_in] with chosen responses in rows [0, B) and rejected in [B, 2B).
inline Tensor batch_features(PairBatch batch, std::size_t d_in) {
  std::vector<const std::vector<double>*> rows;
  rows.reserve(batch.size() * 2);
  for (const auto* p : batch) rows.push_back(&p->features_chosen);
  for (const auto* p : batch) rows.push_back(&p->features_rejected);
  return stack_rows(rows, d_in);
}

struct ElboBreakdown {
  double bt_nll = 0.0;
  double kl_theta = 0.0;
  double kl_phi = 0.0;
  double eta = 0.0;
  double total = 0.0;
  Tensor loss;  // graph root for backward()
};

/// Reparameterization noise for one step: u_theta is [2B, K], u_phi is [K].
struct ElboNoise {
  std::vector<double> u_theta;
  std::vector<double> u_phi;
};

inline ElboNoise draw_elbo_noise(Rng& rng, std::size_t batch, std::size_t k) {
  ElboNoise n;
  n.u_theta = dist::draw_noise(rng, 2 * batch * k);
  n.u_phi = dist::draw_noise(rng, k);
  return n;
}

enum class PosteriorMode { sample, mean };

/// bt_nll + eta * (kl_theta + kl_phi). kl_theta is the summed theta KL of
/// both responses averaged over pairs; kl_phi is added once per step.
inline ElboBreakdown elbo_loss(PairBatch batch, const Encoder& encoder, const BnrmHead& head,
                               double eta, const ElboNoise& noise,
                               PosteriorMode mode = PosteriorMode::sample) {
  if (batch.empty()) throw std::invalid_argument("elbo_loss: empty batch");
  if (!(eta >= 0.0)) throw std::invalid_argument("elbo_loss: eta must be >= 0");
  const std::size_t b = batch.size();
  const auto z = encoder.encode(batch_features(batch, encoder.d_in()));

  Tensor reward, kl_theta_sum, kl_phi_sum;
  if (mode == PosteriorMode::sample) {
    const auto s = sample_reward(head, z, noise.u_theta, noise.u_phi);
    reward = s.reward;
    kl_theta_sum = s.kl_theta;
    kl_phi_sum = s.kl_phi;
  } else {
    const auto local = infer_local(head, z);
    const auto global = infer_global(head);
    reward = mean_reward(head, z);
    kl_theta_sum = diff::sum(dist::kl_weibull_gamma(local.kappa, local.lambda, head.theta_prior));
    kl_phi_sum = diff::sum(dist::kl_weibull_gamma(global.kappa, global.lambda, head.phi_prior));
  }
  const auto r1 = diff::slice_rows(reward, 0, b);
  const auto r2 = diff::slice_rows(reward, b, 2 * b);
  const auto nll = diff::mean(bt_loss(r1, r2));
  const auto kl_theta = kl_theta_sum / static_cast<double>(b);
  const auto loss = nll + eta * (kl_theta + kl_phi_sum);

  ElboBreakdown out;
  out.bt_nll = nll.item();
  out.kl_theta = kl_theta.item();
  out.kl_phi = kl_phi_sum.item();
  out.eta = eta;
  out.total = loss.item();
  out.loss = loss;
  return out;
}

inline ElboBreakdown elbo_loss(PairBatch batch, const Encoder& encoder, const BnrmHead& head,
                               double eta, Rng& rng) {
  return elbo_loss(batch, encoder, head, eta, draw_elbo_noise(rng, batch.size(), head.k()));
}

enum class PairLoss { bt, margin, label_smooth };

struct PairLossConfig {
  PairLoss kind = PairLoss::bt;
  double margin = 1.0;
  double smooth_eps = 0.1;
};

/// Batch-mean preference loss of a deterministic scorer (baseline heads).
inline Tensor preference_loss(PairBatch batch, const RewardNet& net, const PairLossConfig& cfg) {
  if (batch.empty()) throw std::invalid_argument("preference_loss: empty batch");
  const std::size_t b = batch.size();
  const auto reward = net.mean_reward(batch_features(batch, net.encoder.d_in()));
  const auto r1 = diff::slice_rows(reward, 0, b);
  const auto r2 = diff::slice_rows(reward, b, 2 * b);
  switch (cfg.kind) {
    case PairLoss::margin:
      return diff::mean(bt_margin_loss(r1, r2, cfg.margin));
    case PairLoss::label_smooth:
      return diff::mean(bt_label_smooth_loss(r1, r2, cfg.smooth_eps));
    case PairLoss::bt:
      break;
  }
  return diff::mean(bt_loss(r1, r2));
}

}  // namespace bnrm
