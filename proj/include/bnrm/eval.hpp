#pragma once

// Analyses over trained reward models: length bias, best-of-N
// over-optimization, and factor-level interpretability.

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <fstream>
#include <functional>
#include <limits>
#include <numeric>
#include <optional>
#include <span>
#include <sstream>
#include <string>
#include <vector>

#include "bnrm/datagen.hpp"
#include "bnrm/error.hpp"
#include "bnrm/model.hpp"
#include "bnrm/random.hpp"
#include "bnrm/reward_model.hpp"
#include "bnrm/trainer.hpp"

namespace bnrm {

/// Thrown when a correlation is requested of a constant series.
class UndefinedCorrelation : public DomainError {
 public:
  using DomainError::DomainError;
};

inline double pearson(std::span<const double> xs, std::span<const double> ys) {
  if (xs.size() != ys.size()) throw ShapeError("pearson: series lengths differ");
  if (xs.size() < 2) throw ShapeError("pearson: need at least two points");
  const double n = static_cast<double>(xs.size());
  const double mx = std::accumulate(xs.begin(), xs.end(), 0.0) / n;
  const double my = std::accumulate(ys.begin(), ys.end(), 0.0) / n;
  double sxy = 0.0, sxx = 0.0, syy = 0.0;
  for (std::size_t i = 0; i < xs.size(); ++i) {
    const double dx = xs[i] - mx, dy = ys[i] - my;
    sxy += dx * dy;
    sxx += dx * dx;
    syy += dy * dy;
  }
  if (sxx == 0.0 || syy == 0.0) throw UndefinedCorrelation("pearson: constant series");
  return std::clamp(sxy / std::sqrt(sxx * syy), -1.0, 1.0);
}

// ---- scorers --------------------------------------------------------------

struct ResponseRef {
  const std::vector<double>* features = nullptr;
  std::int64_t length = 1;
  double gold = std::numeric_limits<double>::quiet_NaN();  // known only for generated pools
};

using BatchScorer = std::function<std::vector<double>(std::span<const ResponseRef>)>;

inline BatchScorer model_scorer(const RewardModel& model) {
  return [&model](std::span<const ResponseRef> rs) {
    std::vector<const std::vector<double>*> rows;
    rows.reserve(rs.size());
    for (const auto& r : rs) rows.push_back(r.features);
    return model.score(rows);
  };
}

/// r = length.
inline BatchScorer length_scorer() {
  return [](std::span<const ResponseRef> rs) {
    std::vector<double> out;
    for (const auto& r : rs) out.push_back(static_cast<double>(r.length));
    return out;
  };
}

/// r = generator gold quality.
inline BatchScorer gold_scorer() {
  return [](std::span<const ResponseRef> rs) {
    std::vector<double> out;
    for (const auto& r : rs) {
      if (std::isnan(r.gold)) throw DataError("gold scorer: response has no gold quality");
      out.push_back(r.gold);
    }
    return out;
  };
}

// ---- length bias ----------------------------------------------------------

struct BiasBucket {
  double lo = 0.0;
  double hi = 0.0;
  std::size_t count = 0;
  double mean_reward = 0.0;  // NaN for empty buckets
};

struct BiasReport {
  std::optional<double> pearson_r;  // empty: rewards (or lengths) constant
  std::vector<BiasBucket> buckets;
  std::size_t n = 0;
  double min_reward = 0.0;

  std::string to_csv() const {
    std::ostringstream os;
    os << "pearson_r,bucket_lo,bucket_hi,count,mean_reward\n";
    const std::string r = pearson_r ? fmt_float(*pearson_r) : "undefined";
    for (const auto& b : buckets) {
      os << r << ',' << fmt_float(b.lo) << ',' << fmt_float(b.hi) << ',' << b.count << ','
         << (b.count ? fmt_float(b.mean_reward) : "") << '\n';
    }
    return os.str();
  }
};

/// Pools chosen and rejected responses, correlates length with reward, and
/// averages rewards in log-spaced length buckets.
inline BiasReport length_bias_report(const BatchScorer& scorer, const PreferenceDataset& ds,
                                     std::size_t n_buckets) {
  if (ds.empty()) throw DataError("length_bias_report: empty dataset");
  if (n_buckets == 0) throw ConfigError("length_bias_report: n_buckets must be >= 1");
  std::vector<ResponseRef> responses;
  for (const auto& p : ds.pairs) {
    responses.push_back({&p.features_chosen, p.length_chosen});
    responses.push_back({&p.features_rejected, p.length_rejected});
  }
  const auto rewards = scorer(responses);
  std::vector<double> lengths;
  for (const auto& r : responses) lengths.push_back(static_cast<double>(r.length));

  BiasReport rep;
  rep.n = responses.size();
  rep.min_reward = *std::min_element(rewards.begin(), rewards.end());
  try {
    rep.pearson_r = pearson(lengths, rewards);
  } catch (const UndefinedCorrelation&) {
    rep.pearson_r.reset();
  }

  const double lmin = std::log(*std::min_element(lengths.begin(), lengths.end()));
  const double lmax = std::log(*std::max_element(lengths.begin(), lengths.end()));
  const std::size_t nb = lmax > lmin ? n_buckets : 1;
  const double width = nb > 1 ? (lmax - lmin) / static_cast<double>(nb) : 0.0;
  rep.buckets.resize(nb);
  for (std::size_t b = 0; b < nb; ++b) {
    rep.buckets[b].lo = std::exp(lmin + width * static_cast<double>(b));
    rep.buckets[b].hi = b + 1 == nb ? std::exp(lmax) : std::exp(lmin + width * static_cast<double>(b + 1));
  }
  std::vector<double> sums(nb, 0.0);
  for (std::size_t i = 0; i < lengths.size(); ++i) {
    std::size_t b = 0;
    if (nb > 1) {
      b = static_cast<std::size_t>((std::log(lengths[i]) - lmin) / width);
      b = std::min(b, nb - 1);
    }
    ++rep.buckets[b].count;
    sums[b] += rewards[i];
  }
  for (std::size_t b = 0; b < nb; ++b) {
    rep.buckets[b].mean_reward = rep.buckets[b].count
                                     ? sums[b] / static_cast<double>(rep.buckets[b].count)
                                     : std::numeric_limits<double>::quiet_NaN();
  }
  return rep;
}

// ---- best-of-N --------------------------------------------------------------

/// KL between the best-of-N policy and the base policy: ln N - (N-1)/N.
inline double kl_budget(std::int64_t n) {
  if (n < 1) throw std::invalid_argument("kl_budget: N must be >= 1");
  const double nd = static_cast<double>(n);
  return std::log(nd) - (nd - 1.0) / nd;
}

inline std::vector<std::int64_t> default_n_list() { return {1, 2, 4, 8, 16, 32, 64, 128, 256, 405}; }

struct BonPoint {
  std::int64_t n = 1;
  double kl_budget = 0.0;
  double proxy_score = 0.0;  // normalized: first entry is 0
  double gold_score = 0.0;
};

struct BonCurve {
  std::vector<BonPoint> points;

  std::string to_csv() const {
    std::ostringstream os;
    os << "N,kl_budget,proxy_score,gold_score\n";
    for (const auto& p : points) {
      os << p.n << ',' << fmt_float(p.kl_budget) << ',' << fmt_float(p.proxy_score) << ','
         << fmt_float(p.gold_score) << '\n';
    }
    return os.str();
  }
};

/// For each N, picks the proxy argmax among the first N candidates of every
/// prompt (after a seeded per-prompt shuffle) and averages proxy and gold
/// scores of the picks. Both series are shifted so the first N is 0.
inline BonCurve bon_curve(const BatchScorer& proxy, const BatchScorer& gold, const PromptPool& pool,
                          std::span<const std::int64_t> n_list, std::size_t samples_per_prompt,
                          std::uint64_t seed) {
  if (n_list.empty()) throw ConfigError("bon_curve: empty N list");
  for (std::size_t i = 0; i < n_list.size(); ++i) {
    if (n_list[i] < 1 || (i > 0 && n_list[i] <= n_list[i - 1])) {
      throw ConfigError("bon_curve: N list must be strictly increasing and >= 1");
    }
  }
  if (samples_per_prompt < static_cast<std::size_t>(n_list.back())) {
    throw ConfigError("bon_curve: samples_per_prompt must be >= max N");
  }
  if (pool.prompts.empty()) throw DataError("bon_curve: empty prompt pool");

  std::vector<double> proxy_sum(n_list.size(), 0.0), gold_sum(n_list.size(), 0.0);
  for (std::size_t p = 0; p < pool.prompts.size(); ++p) {
    const auto& cands = pool.prompts[p];
    if (cands.size() < samples_per_prompt) {
      throw DataError("bon_curve: prompt " + std::to_string(p) + " has " +
                      std::to_string(cands.size()) + " candidates, need " +
                      std::to_string(samples_per_prompt));
    }
    Rng rng = Rng::stream(seed, 20, p);
    const auto order = rng.permutation(samples_per_prompt);
    std::vector<ResponseRef> refs;
    for (std::size_t i : order) refs.push_back({&cands[i].features, cands[i].length, cands[i].gold});
    const auto ps = proxy(refs);
    const auto gs = gold(refs);
    std::size_t best = 0;
    std::size_t seen = 0;
    for (std::size_t j = 0; j < n_list.size(); ++j) {
      const auto upto = static_cast<std::size_t>(n_list[j]);
      for (; seen < upto; ++seen)
        if (ps[seen] > ps[best]) best = seen;
      proxy_sum[j] += ps[best];
      gold_sum[j] += gs[best];
    }
  }
  BonCurve curve;
  const double np = static_cast<double>(pool.prompts.size());
  for (std::size_t j = 0; j < n_list.size(); ++j) {
    curve.points.push_back({n_list[j], kl_budget(n_list[j]),
                            proxy_sum[j] / np - proxy_sum[0] / np,
                            gold_sum[j] / np - gold_sum[0] / np});
  }
  return curve;
}

// ---- factor roles -----------------------------------------------------------

enum class FactorRole { amplification, rectification, inactive, other };
enum class PairLabel { amplification, rectification, neither };

inline std::string_view to_string(FactorRole r) {
  switch (r) {
    case FactorRole::amplification: return "amplification";
    case FactorRole::rectification: return "rectification";
    case FactorRole::inactive: return "inactive";
    case FactorRole::other: return "other";
  }
  return "?";
}

inline std::string_view to_string(PairLabel l) {
  switch (l) {
    case PairLabel::amplification: return "amplification";
    case PairLabel::rectification: return "rectification";
    case PairLabel::neither: return "neither";
  }
  return "?";
}

struct FactorRoles {
  std::vector<FactorRole> roles;
  PairLabel label = PairLabel::neither;
};

/// Per factor k, with d_k = theta_c[k] - theta_r[k]:
///   inactive       phi < tau and both activations are 0 (within 1e-9)
///   amplification  d_k > 0 and phi >= tau
///   rectification  d_k < 0 and phi < tau
///   other          anything else
/// Pair label (only when the weighted margin sum(phi*d) is positive):
///   rectification  giving the suppressed (rectification) factors the mean
///                  active weight would make the margin <= 0;
///   amplification  removing the amplification factors' contribution would
///                  make the margin <= 0;
///   neither        otherwise.
inline FactorRoles classify_factor_roles(std::span<const double> theta_c,
                                         std::span<const double> theta_r,
                                         std::span<const double> phi, double tau) {
  if (theta_c.size() != theta_r.size() || theta_c.size() != phi.size()) {
    throw ShapeError("classify_factor_roles: vectors must have equal length");
  }
  if (!(tau > 0.0)) throw std::invalid_argument("classify_factor_roles: tau must be > 0");
  FactorRoles out;
  out.roles.resize(phi.size());
  double margin = 0.0, amplified = 0.0, active_phi = 0.0, rect_d = 0.0;
  std::size_t n_active = 0;
  for (std::size_t k = 0; k < phi.size(); ++k) {
    const double d = theta_c[k] - theta_r[k];
    margin += phi[k] * d;
    if (phi[k] >= tau) {
      active_phi += phi[k];
      ++n_active;
    }
    FactorRole& role = out.roles[k];
    if (phi[k] < tau && std::abs(theta_c[k]) <= 1e-9 && std::abs(theta_r[k]) <= 1e-9) {
      role = FactorRole::inactive;
    } else if (d > 0.0 && phi[k] >= tau) {
      role = FactorRole::amplification;
      amplified += phi[k] * d;
    } else if (d < 0.0 && phi[k] < tau) {
      role = FactorRole::rectification;
      rect_d += d;
    } else {
      role = FactorRole::other;
    }
  }
  if (margin > 0.0) {
    const double unsuppressed = n_active ? active_phi / static_cast<double>(n_active) : 1.0;
    double counterfactual = margin;
    for (std::size_t k = 0; k < phi.size(); ++k) {
      if (out.roles[k] == FactorRole::rectification) {
        counterfactual += (unsuppressed - phi[k]) * (theta_c[k] - theta_r[k]);
      }
    }
    if (rect_d < 0.0 && counterfactual <= 0.0) {
      out.label = PairLabel::rectification;
    } else if (amplified > 0.0 && margin - amplified <= 0.0) {
      out.label = PairLabel::amplification;
    }
  }
  return out;
}

struct FactorDumpRow {
  std::string pair_id;
  std::vector<double> theta_chosen;    // all K factors, posterior means
  std::vector<double> theta_rejected;
  FactorRoles roles;
};

struct FactorDump {
  std::vector<double> phi;           // posterior mean, all K factors
  std::vector<std::size_t> order;    // factor indices by phi descending, top_k kept
  double tau = 0.0;
  std::vector<FactorDumpRow> rows;
  std::size_t amplification_pairs = 0;
  std::size_t rectification_pairs = 0;

  std::string to_csv() const {
    std::ostringstream os;
    os << "pair_id,rank,factor,phi,theta_chosen,theta_rejected,role,pair_label\n";
    for (const auto& row : rows) {
      for (std::size_t r = 0; r < order.size(); ++r) {
        const std::size_t k = order[r];
        os << row.pair_id << ',' << r << ',' << k << ',' << fmt_float(phi[k]) << ','
           << fmt_float(row.theta_chosen[k]) << ',' << fmt_float(row.theta_rejected[k]) << ','
           << to_string(row.roles.roles[k]) << ',' << to_string(row.roles.label) << '\n';
      }
    }
    return os.str();
  }
};

/// Posterior-mean theta of each response in `features` ([n, K] row-major).
inline std::vector<double> posterior_mean_theta(const RewardNet& net, const Tensor& features) {
  const auto& head = std::get<BnrmHead>(net.head);
  const auto q = infer_local(head, net.encoder.encode(features)).values();
  return dist::weibull_mean(q);
}

inline std::vector<double> posterior_mean_phi(const BnrmHead& head) {
  return dist::weibull_mean(infer_global(head).values());
}

/// `tau` <= 0 selects the default threshold of 1% of max(phi).
inline FactorDump factor_dump(const RewardModel& model, const PreferenceDataset& ds,
                              std::size_t top_k, double tau = 0.0) {
  if (!model.is_bnrm() || model.members.size() != 1 || !model.members[0].is_bnrm()) {
    throw ConfigError("factor_dump: unsupported model (requires a bnrm checkpoint, got " +
                      std::string(to_string(model.method)) + ")");
  }
  if (top_k == 0) throw ConfigError("factor_dump: top_k must be >= 1");
  require_compatible(model, ds.require_d_in());
  const auto& net = model.members[0];
  const auto& head = std::get<BnrmHead>(net.head);
  const std::size_t k = head.k();

  FactorDump dump;
  dump.phi = posterior_mean_phi(head);
  dump.tau = tau > 0.0 ? tau : 0.01 * *std::max_element(dump.phi.begin(), dump.phi.end());
  dump.order.resize(k);
  std::iota(dump.order.begin(), dump.order.end(), std::size_t{0});
  std::stable_sort(dump.order.begin(), dump.order.end(),
                   [&](std::size_t a, std::size_t b) { return dump.phi[a] > dump.phi[b]; });
  dump.order.resize(std::min(top_k, k));

  std::vector<const std::vector<double>*> c, r;
  for (const auto& p : ds.pairs) {
    c.push_back(&p.features_chosen);
    r.push_back(&p.features_rejected);
  }
  const auto tc = posterior_mean_theta(net, stack_rows(c, model.d_in));
  const auto tr = posterior_mean_theta(net, stack_rows(r, model.d_in));
  for (std::size_t i = 0; i < ds.size(); ++i) {
    FactorDumpRow row;
    row.pair_id = ds.pairs[i].id;
    row.theta_chosen.assign(tc.begin() + static_cast<std::ptrdiff_t>(i * k),
                            tc.begin() + static_cast<std::ptrdiff_t>((i + 1) * k));
    row.theta_rejected.assign(tr.begin() + static_cast<std::ptrdiff_t>(i * k),
                              tr.begin() + static_cast<std::ptrdiff_t>((i + 1) * k));
    row.roles = classify_factor_roles(row.theta_chosen, row.theta_rejected, dump.phi, dump.tau);
    if (row.roles.label == PairLabel::amplification) ++dump.amplification_pairs;
    if (row.roles.label == PairLabel::rectification) ++dump.rectification_pairs;
    dump.rows.push_back(std::move(row));
  }
  return dump;
}

inline void write_text(const std::string& path, const std::string& text) {
  std::ofstream out(path, std::ios::binary);
  if (!out) throw DataError("cannot open " + path + " for writing");
  out << text;
  if (!out) throw DataError("write failed: " + path);
}

}  // namespace bnrm
