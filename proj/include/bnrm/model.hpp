#pragma once

// Encoder and reward heads. Rows of every input matrix are responses:
// features [n, d_in] -> z [n, d_model] -> reward [n, 1].

#include <cmath>
#include <cstdint>
#include <span>
#include <string>
#include <utility>
#include <variant>
#include <vector>

#include "bnrm/diffcore.hpp"
#include "bnrm/distributions.hpp"
#include "bnrm/error.hpp"
#include "bnrm/random.hpp"

namespace bnrm {

using diff::Tensor;
using NamedTensor = std::pair<std::string, Tensor>;

inline Tensor uniform_init(diff::Shape shape, std::size_t fan_in, Rng& rng) {
  const double bound = 1.0 / std::sqrt(static_cast<double>(fan_in));
  std::vector<double> data(diff::numel(shape));
  for (auto& x : data) x = rng.uniform(-bound, bound);
  return Tensor::parameter(std::move(shape), std::move(data));
}

/// Deep copy of a parameter tensor (fresh leaf, zero gradient).
inline Tensor clone_parameter(const Tensor& t) {
  return Tensor::parameter(t.shape(), {t.data().begin(), t.data().end()});
}

/// Packs equal-length rows into an [n, width] constant.
inline Tensor stack_rows(std::span<const std::vector<double>* const> rows, std::size_t width) {
  std::vector<double> data;
  data.reserve(rows.size() * width);
  for (const auto* row : rows) {
    if (row->size() != width) {
      throw ShapeError("feature vector has dimension " + std::to_string(row->size()) +
                       ", expected " + std::to_string(width));
    }
    data.insert(data.end(), row->begin(), row->end());
  }
  return Tensor::constant({rows.size(), width}, std::move(data));
}

inline Tensor stack_rows(const std::vector<double>& row) {
  return Tensor::constant({1, row.size()}, row);
}

/// Stand-in for the language-model backbone: one ReLU hidden layer,
/// z = relu(x W1 + b1) W2 + b2.
class Encoder {
 public:
  Encoder() = default;
  Encoder(std::size_t d_in, std::size_t hidden, std::size_t d_model, Rng& rng)
      : w1_(uniform_init({d_in, hidden}, d_in, rng)),
        b1_(Tensor::zeros({hidden}, true)),
        w2_(uniform_init({hidden, d_model}, hidden, rng)),
        b2_(Tensor::zeros({d_model}, true)) {}
  Encoder(Tensor w1, Tensor b1, Tensor w2, Tensor b2)
      : w1_(std::move(w1)), b1_(std::move(b1)), w2_(std::move(w2)), b2_(std::move(b2)) {
    if (w1_.rank() != 2 || w2_.rank() != 2 || w1_.shape()[1] != w2_.shape()[0] ||
        b1_.size() != w1_.shape()[1] || b2_.size() != w2_.shape()[1]) {
      throw ShapeError("Encoder: inconsistent parameter shapes");
    }
  }

  std::size_t d_in() const { return w1_.shape()[0]; }
  std::size_t hidden() const { return w1_.shape()[1]; }
  std::size_t d_model() const { return w2_.shape()[1]; }

  Tensor encode(const Tensor& x) const {
    if (x.rank() != 2 || x.shape()[1] != d_in()) {
      throw ShapeError("encode: expected [n," + std::to_string(d_in()) + "] input, got " +
                       diff::shape_str(x.shape()));
    }
    return diff::matmul(diff::relu(diff::matmul(x, w1_) + b1_), w2_) + b2_;
  }

  std::vector<double> encode(const std::vector<double>& features) const {
    const auto z = encode(stack_rows(features));
    return {z.data().begin(), z.data().end()};
  }

  std::vector<NamedTensor> parameters() const {
    return {{"encoder.w1", w1_}, {"encoder.b1", b1_}, {"encoder.w2", w2_}, {"encoder.b2", b2_}};
  }

  Encoder clone() const {
    return {clone_parameter(w1_), clone_parameter(b1_), clone_parameter(w2_),
            clone_parameter(b2_)};
  }

 private:
  Tensor w1_, b1_, w2_, b2_;
};

/// Scalar Bradley-Terry head r = z . w_bt.
struct BaselineHead {
  Tensor w_bt;  // [d_model, 1]

  static BaselineHead init(std::size_t d_model, Rng& rng) {
    return {uniform_init({d_model, 1}, d_model, rng)};
  }
  std::size_t d_model() const { return w_bt.shape()[0]; }

  std::vector<NamedTensor> parameters() const { return {{"head.w_bt", w_bt}}; }
  BaselineHead clone() const { return {clone_parameter(w_bt)}; }
};

inline Tensor baseline_reward(const BaselineHead& head, const Tensor& z) {
  if (z.rank() != 2 || z.shape()[1] != head.d_model()) {
    throw ShapeError("baseline_reward: z has shape " + diff::shape_str(z.shape()) +
                     ", head expects d_model " + std::to_string(head.d_model()));
  }
  return diff::matmul(z, head.w_bt);
}

inline double baseline_reward(const BaselineHead& head, const std::vector<double>& z) {
  return baseline_reward(head, stack_rows(z)).item();
}

/// Non-negative factor head. Local factors theta come from an amortized
/// Weibull posterior over z; the global dictionary Phi has its own Weibull
/// posterior seeded by relu(W^T).
struct BnrmHead {
  Tensor w_ell;  // [d_model, K]  -> z_out
  Tensor b_ell;  // [K]
  Tensor w_k;    // [d_model, K]  -> kappa pre-activation
  Tensor b_k;    // [K]
  Tensor w_kw;   // [1]  elementwise kappa_Phi map
  Tensor b_kw;   // [1]
  Tensor w;      // [K, 1] global weights
  Tensor b;      // [1] reward bias, enters as relu(b)
  dist::GammaPrior theta_prior{};
  dist::GammaPrior phi_prior{};

  static BnrmHead init(std::size_t d_model, std::size_t k, Rng& rng) {
    if (k == 0) throw ShapeError("BnrmHead: K must be at least 1");
    BnrmHead h;
    h.w_ell = uniform_init({d_model, k}, d_model, rng);
    h.b_ell = Tensor::zeros({k}, true);
    h.w_k = uniform_init({d_model, k}, d_model, rng);
    h.b_k = Tensor::zeros({k}, true);
    h.w_kw = uniform_init({1}, 1, rng);
    h.b_kw = Tensor::zeros({1}, true);
    h.w = uniform_init({k, 1}, 1, rng);
    h.b = Tensor::zeros({1}, true);
    return h;
  }

  std::size_t k() const { return w.shape()[0]; }
  std::size_t d_model() const { return w_ell.shape()[0]; }

  void validate() const {
    const std::size_t kk = k();
    if (kk == 0 || w.rank() != 2 || w.shape()[1] != 1 || w_ell.rank() != 2 ||
        w_ell.shape()[1] != kk || w_k.shape() != w_ell.shape() || b_ell.size() != kk ||
        b_k.size() != kk || w_kw.size() != 1 || b_kw.size() != 1 || b.size() != 1) {
      throw ShapeError("BnrmHead: inconsistent parameter shapes");
    }
  }

  std::vector<NamedTensor> parameters() const {
    return {{"head.w_ell", w_ell}, {"head.b_ell", b_ell}, {"head.w_k", w_k},
            {"head.b_k", b_k},     {"head.w_kw", w_kw},   {"head.b_kw", b_kw},
            {"head.w", w},         {"head.b", b}};
  }

  BnrmHead clone() const {
    return {clone_parameter(w_ell), clone_parameter(b_ell), clone_parameter(w_k),
            clone_parameter(b_k),   clone_parameter(w_kw),  clone_parameter(b_kw),
            clone_parameter(w),     clone_parameter(b),     theta_prior,
            phi_prior};
  }
};

/// Weibull parameters as graph tensors (shape [n, K] locally, [K, 1] globally).
struct PosteriorTensors {
  Tensor kappa;
  Tensor lambda;

  dist::WeibullParams values() const {
    return {{kappa.data().begin(), kappa.data().end()},
            {lambda.data().begin(), lambda.data().end()}};
  }
};

/// kappa = 1 + softplus(z W_k + b_k); lambda = max(relu(z W_ell + b_ell), eps) / Gamma(1 + 1/kappa).
inline PosteriorTensors infer_local(const BnrmHead& head, const Tensor& z) {
  if (z.rank() != 2 || z.shape()[1] != head.d_model()) {
    throw ShapeError("infer_local: z has shape " + diff::shape_str(z.shape()) +
                     ", head expects d_model " + std::to_string(head.d_model()));
  }
  const auto z_out = diff::relu(diff::matmul(z, head.w_ell) + head.b_ell);
  const auto kappa = 1.0 + diff::softplus(diff::matmul(z, head.w_k) + head.b_k);
  const auto lambda =
      dist::weibull_scale_for_mean(diff::clamp_min(z_out, dist::kScaleFloor), kappa);
  return {kappa, lambda};
}

inline PosteriorTensors infer_global(const BnrmHead& head) {
  const auto z_out = diff::relu(head.w);
  const auto kappa = 1.0 + diff::softplus(z_out * head.w_kw + head.b_kw);
  const auto lambda =
      dist::weibull_scale_for_mean(diff::clamp_min(z_out, dist::kScaleFloor), kappa);
  return {kappa, lambda};
}

/// One reparameterized forward pass over a batch of responses.
struct BnrmSample {
  Tensor theta;     // [n, K]
  Tensor phi;       // [K, 1]
  Tensor reward;    // [n, 1]
  Tensor kl_theta;  // scalar, summed over all n*K components
  Tensor kl_phi;    // scalar, summed over K components
};

inline BnrmSample sample_reward(const BnrmHead& head, const Tensor& z,
                                std::span<const double> u_theta, std::span<const double> u_phi) {
  const auto local = infer_local(head, z);
  const auto global = infer_global(head);
  BnrmSample s;
  s.theta = dist::weibull_sample(local.kappa, local.lambda, u_theta);
  s.phi = dist::weibull_sample(global.kappa, global.lambda, u_phi);
  s.reward = diff::matmul(s.theta, s.phi) + diff::relu(head.b);
  s.kl_theta = diff::sum(dist::kl_weibull_gamma(local.kappa, local.lambda, head.theta_prior));
  s.kl_phi = diff::sum(dist::kl_weibull_gamma(global.kappa, global.lambda, head.phi_prior));
  return s;
}

/// Single-response sample with plain values.
struct RewardSample {
  std::vector<double> theta;
  std::vector<double> phi;
  double reward = 0.0;
  double kl_theta = 0.0;
  double kl_phi = 0.0;
};

inline RewardSample sample_reward(const BnrmHead& head, const std::vector<double>& z,
                                  std::span<const double> u_theta,
                                  std::span<const double> u_phi) {
  const auto s = sample_reward(head, stack_rows(z), u_theta, u_phi);
  return {{s.theta.data().begin(), s.theta.data().end()},
          {s.phi.data().begin(), s.phi.data().end()},
          s.reward.item(),
          s.kl_theta.item(),
          s.kl_phi.item()};
}

/// Posterior-mean reward, differentiable: E[theta] . E[Phi] + relu(b).
inline Tensor mean_reward(const BnrmHead& head, const Tensor& z) {
  const auto local = infer_local(head, z);
  const auto global = infer_global(head);
  const auto mean_of = [](const PosteriorTensors& q) {
    return q.lambda * diff::exp(diff::lgamma(1.0 + 1.0 / q.kappa));
  };
  return diff::matmul(mean_of(local), mean_of(global)) + diff::relu(head.b);
}

inline double mean_reward(const BnrmHead& head, const std::vector<double>& z) {
  return mean_reward(head, stack_rows(z)).item();
}

/// Reward from already-computed posterior means.
inline double reward_from_means(std::span<const double> mean_theta,
                                std::span<const double> mean_phi, double bias) {
  if (mean_theta.size() != mean_phi.size()) throw ShapeError("reward_from_means: length mismatch");
  double r = 0.0;
  for (std::size_t i = 0; i < mean_theta.size(); ++i) r += mean_theta[i] * mean_phi[i];
  return r + std::max(bias, 0.0);
}

using AnyHead = std::variant<BaselineHead, BnrmHead>;

/// Deterministic per-row reward of either head kind; BNRM heads use posterior means.
inline Tensor head_reward(const AnyHead& head, const Tensor& z) {
  return std::visit(
      [&](const auto& h) -> Tensor {
        if constexpr (std::is_same_v<std::decay_t<decltype(h)>, BaselineHead>) {
          return baseline_reward(h, z);
        } else {
          return mean_reward(h, z);
        }
      },
      head);
}

inline std::size_t head_d_model(const AnyHead& head) {
  return std::visit([](const auto& h) { return h.d_model(); }, head);
}

/// Arithmetic mean of the member rewards.
inline double ensemble_reward(std::span<const AnyHead> heads, const std::vector<double>& z) {
  if (heads.empty()) throw std::invalid_argument("ensemble_reward: no members");
  double total = 0.0;
  for (const auto& h : heads) {
    if (head_d_model(h) != z.size()) {
      throw ShapeError("ensemble_reward: member d_model " + std::to_string(head_d_model(h)) +
                       " does not match z dimension " + std::to_string(z.size()));
    }
    total += head_reward(h, stack_rows(z)).item();
  }
  return total / static_cast<double>(heads.size());
}

/// Encoder plus one head: a complete reward model over raw features.
struct RewardNet {
  Encoder encoder;
  AnyHead head;

  bool is_bnrm() const { return std::holds_alternative<BnrmHead>(head); }

  Tensor mean_reward(const Tensor& features) const {
    return head_reward(head, encoder.encode(features));
  }

  std::vector<NamedTensor> parameters() const {
    auto out = encoder.parameters();
    std::visit([&](const auto& h) {
      for (auto& p : h.parameters()) out.push_back(std::move(p));
    }, head);
    return out;
  }

  RewardNet clone() const {
    return {encoder.clone(), std::visit([](const auto& h) -> AnyHead { return h.clone(); }, head)};
  }
};

}  // namespace bnrm
