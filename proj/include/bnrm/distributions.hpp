#pragma once

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <numbers>
#include <span>
#include <string>
#include <vector>

#include "bnrm/diffcore.hpp"
#include "bnrm/error.hpp"
#include "bnrm/random.hpp"

namespace bnrm::dist {

inline constexpr double kEulerGamma = std::numbers::egamma_v<double>;
/// Floor applied to Weibull scales sourced from a ReLU (exact zeros are expected).
inline constexpr double kScaleFloor = 1e-6;
/// Reparameterization noise is clamped to [kNoiseClamp, 1 - kNoiseClamp].
inline constexpr double kNoiseClamp = 1e-12;

/// Variational posterior Weibull(kappa, lambda), one independent component per entry.
struct WeibullParams {
  std::vector<double> kappa;
  std::vector<double> lambda;

  std::size_t size() const { return kappa.size(); }

  void validate() const {
    if (kappa.size() != lambda.size()) {
      throw ShapeError("WeibullParams: kappa has " + std::to_string(kappa.size()) +
                       " entries, lambda has " + std::to_string(lambda.size()));
    }
    for (std::size_t i = 0; i < kappa.size(); ++i) {
      if (!(kappa[i] > 0.0) || !(lambda[i] > 0.0) || !std::isfinite(kappa[i]) ||
          !std::isfinite(lambda[i])) {
        throw DomainError("WeibullParams: entry " + std::to_string(i) +
                          " must be positive and finite");
      }
    }
  }
};

/// Gamma(alpha, beta) prior, beta being a rate.
struct GammaPrior {
  double alpha = 1.0;
  double beta = 1.0;

  void validate() const {
    if (!(alpha > 0.0) || !(beta > 0.0) || !std::isfinite(alpha) || !std::isfinite(beta)) {
      throw DomainError("GammaPrior: alpha and beta must be positive and finite");
    }
  }
};

inline double clamp_noise(double u) { return std::clamp(u, kNoiseClamp, 1.0 - kNoiseClamp); }

inline void check_noise(std::span<const double> u) {
  for (double x : u) {
    if (!(x >= kNoiseClamp && x <= 1.0 - kNoiseClamp)) {
      throw DomainError("weibull_sample: noise " + std::to_string(x) +
                        " outside [1e-12, 1-1e-12]");
    }
  }
}

/// Draws `n` clamped uniforms for reparameterized sampling.
inline std::vector<double> draw_noise(Rng& rng, std::size_t n) {
  std::vector<double> u(n);
  for (auto& x : u) x = clamp_noise(rng.uniform());
  return u;
}

/// theta_i = lambda_i * (-ln(1 - u_i))^(1/kappa_i)
inline std::vector<double> weibull_sample(const WeibullParams& q, std::span<const double> u) {
  q.validate();
  if (u.size() != q.size()) throw ShapeError("weibull_sample: noise length mismatch");
  check_noise(u);
  std::vector<double> out(q.size());
  for (std::size_t i = 0; i < out.size(); ++i) {
    out[i] = q.lambda[i] * std::pow(-std::log1p(-u[i]), 1.0 / q.kappa[i]);
  }
  return out;
}

/// Scales below kScaleFloor (including exact zeros) are floored first.
inline std::vector<double> weibull_mean(const WeibullParams& q) {
  WeibullParams f = q;
  for (auto& l : f.lambda) {
    if (l >= 0.0) l = std::max(l, kScaleFloor);
  }
  f.validate();
  std::vector<double> out(f.size());
  for (std::size_t i = 0; i < out.size(); ++i) {
    out[i] = f.lambda[i] * std::exp(std::lgamma(1.0 + 1.0 / f.kappa[i]));
  }
  return out;
}

/// Closed-form KL(Weibull(kappa, lambda) || Gamma(alpha, beta)) for one component.
inline double kl_weibull_gamma(double kappa, double lambda, const GammaPrior& p) {
  if (!(kappa > 0.0) || !(lambda > 0.0)) {
    throw DomainError("kl_weibull_gamma: kappa and lambda must be positive");
  }
  p.validate();
  const double a = p.alpha, b = p.beta;
  // Same evaluation order as the tensor form below, so both agree bit-for-bit.
  const double constant = -kEulerGamma - 1.0 - a * std::log(b) + std::lgamma(a);
  const double mean = lambda * std::exp(std::lgamma(1.0 + 1.0 / kappa));
  return (kEulerGamma * a) / kappa - a * std::log(lambda) + std::log(kappa) + b * mean +
         constant;
}

/// Sum of per-component KLs.
inline double kl_weibull_gamma(const WeibullParams& q, const GammaPrior& p) {
  q.validate();
  double total = 0.0;
  for (std::size_t i = 0; i < q.size(); ++i) total += kl_weibull_gamma(q.kappa[i], q.lambda[i], p);
  return total;
}

inline double weibull_log_pdf(double x, double kappa, double lambda) {
  const double z = x / lambda;
  return std::log(kappa / lambda) + (kappa - 1.0) * std::log(z) - std::pow(z, kappa);
}

inline double gamma_log_pdf(double x, double alpha, double beta) {
  return alpha * std::log(beta) - std::lgamma(alpha) + (alpha - 1.0) * std::log(x) - beta * x;
}

struct McEstimate {
  double estimate = 0.0;
  double std_error = 0.0;
};

/// Monte-Carlo estimate of KL(q || p) from exact log densities. Independent
/// of the closed form above and used to validate it.
inline McEstimate kl_monte_carlo(const WeibullParams& q, const GammaPrior& p, std::size_t n,
                                 std::uint64_t seed) {
  q.validate();
  p.validate();
  if (n < 10000) throw std::invalid_argument("kl_monte_carlo: need at least 1e4 samples");
  Rng rng(seed);
  double mean = 0.0, m2 = 0.0;
  for (std::size_t s = 0; s < n; ++s) {
    double term = 0.0;
    for (std::size_t i = 0; i < q.size(); ++i) {
      const double u = clamp_noise(rng.uniform());
      const double x = q.lambda[i] * std::pow(-std::log1p(-u), 1.0 / q.kappa[i]);
      term += weibull_log_pdf(x, q.kappa[i], q.lambda[i]) - gamma_log_pdf(x, p.alpha, p.beta);
    }
    const double delta = term - mean;
    mean += delta / static_cast<double>(s + 1);
    m2 += delta * (term - mean);
  }
  const double var = m2 / static_cast<double>(n - 1);
  return {mean, std::sqrt(var / static_cast<double>(n))};
}

// ---- differentiable forms -----------------------------------------------

/// Reparameterized draw; gradients flow to kappa and lambda, not to the noise.
inline diff::Tensor weibull_sample(const diff::Tensor& kappa, const diff::Tensor& lambda,
                                   std::span<const double> u) {
  if (u.size() != kappa.size()) throw ShapeError("weibull_sample: noise length mismatch");
  check_noise(u);
  std::vector<double> log_e(u.size());
  for (std::size_t i = 0; i < u.size(); ++i) log_e[i] = std::log(-std::log1p(-u[i]));
  const auto noise = diff::Tensor::constant(kappa.shape(), std::move(log_e));
  return lambda * diff::exp(noise / kappa);
}

/// lambda = mean / Gamma(1 + 1/kappa), so that the Weibull mean equals `mean`.
inline diff::Tensor weibull_scale_for_mean(const diff::Tensor& mean, const diff::Tensor& kappa) {
  return mean / diff::exp(diff::lgamma(1.0 + 1.0 / kappa));
}

/// Elementwise KL(Weibull || Gamma); sum the result for the joint KL.
inline diff::Tensor kl_weibull_gamma(const diff::Tensor& kappa, const diff::Tensor& lambda,
                                     const GammaPrior& p) {
  p.validate();
  const double a = p.alpha, b = p.beta;
  const double constant = -kEulerGamma - 1.0 - a * std::log(b) + std::lgamma(a);
  const auto mean = lambda * diff::exp(diff::lgamma(1.0 + 1.0 / kappa));
  return (kEulerGamma * a) / kappa - a * diff::log(lambda) + diff::log(kappa) + b * mean +
         constant;
}

}  // namespace bnrm::dist
