#pragma once

// Synthetic preference worlds. Each response has true non-negative factor
// activations theta* ~ Gamma(1,1)^K_true and gold quality theta*.phi_true.
// Features embed theta* linearly with Gaussian noise, plus one feature that
// carries (standardized log) response length. Length never enters gold
// quality; it only correlates with labels through the bias dial.

#include <algorithm>
#include <bit>
#include <cmath>
#include <cstdint>
#include <fstream>
#include <sstream>
#include <string>
#include <string_view>
#include <unordered_set>
#include <vector>

#include <nlohmann/json.hpp>

#include "bnrm/error.hpp"
#include "bnrm/random.hpp"

namespace bnrm {

inline std::uint64_t fnv1a(std::string_view s, std::uint64_t h = 1469598103934665603ull) {
  for (unsigned char c : s) {
    h ^= c;
    h *= 1099511628211ull;
  }
  return h;
}

namespace streams {
inline constexpr std::uint64_t kWorld = 1;
inline constexpr std::uint64_t kPairs = 2;
inline constexpr std::uint64_t kLabelNoise = 3;
inline constexpr std::uint64_t kPool = 4;
}  // namespace streams

struct SyntheticWorld {
  std::size_t k_true = 8;
  std::vector<double> phi_true;  // empty: drawn from the seed
  std::size_t d_in = 32;
  std::size_t length_feature_index = 31;
  double bias_strength = 0.5;  // P(longer response is the chosen one)
  double noise_rate = 0.0;     // applied by inject_label_noise
  double feature_noise = 0.1;
  double log_length_mean = 5.0;
  double log_length_sd = 0.6;
  std::uint64_t seed = 0;

  void validate() const {
    if (k_true == 0) throw ConfigError("world.k_true must be >= 1");
    if (d_in < 2) throw ConfigError("world.d_in must be >= 2");
    if (length_feature_index >= d_in) throw ConfigError("world.length_feature_index out of range");
    if (!phi_true.empty() && phi_true.size() != k_true) {
      throw ConfigError("world.phi_true must have k_true entries");
    }
    for (double p : phi_true) {
      if (!(p >= 0.0) || !std::isfinite(p)) throw ConfigError("world.phi_true must be non-negative");
    }
    if (!(bias_strength >= 0.0 && bias_strength <= 1.0)) {
      throw ConfigError("world.bias_strength must lie in [0,1]");
    }
    if (!(noise_rate >= 0.0 && noise_rate < 0.5)) {
      throw ConfigError("world.noise_rate must lie in [0,0.5)");
    }
    if (!(feature_noise >= 0.0)) throw ConfigError("world.feature_noise must be >= 0");
    if (!(log_length_sd > 0.0)) throw ConfigError("world.log_length_sd must be > 0");
  }

  std::vector<double> gold_weights() const {
    if (!phi_true.empty()) return phi_true;
    Rng rng = Rng::stream(seed, streams::kWorld, 0);
    std::vector<double> phi(k_true);
    for (auto& p : phi) p = rng.uniform(0.25, 1.75);
    return phi;
  }

  /// [k_true, d_in] row-major; the length column is zero.
  std::vector<double> embedding() const {
    Rng rng = Rng::stream(seed, streams::kWorld, 1);
    std::vector<double> a(k_true * d_in, 0.0);
    const double scale = 1.0 / std::sqrt(static_cast<double>(k_true));
    for (std::size_t k = 0; k < k_true; ++k)
      for (std::size_t j = 0; j < d_in; ++j)
        if (j != length_feature_index) a[k * d_in + j] = rng.normal() * scale;
    return a;
  }

  nlohmann::ordered_json to_json() const {
    return {{"k_true", k_true},
            {"phi_true", gold_weights()},
            {"d_in", d_in},
            {"length_feature_index", length_feature_index},
            {"bias_strength", bias_strength},
            {"noise_rate", noise_rate},
            {"feature_noise", feature_noise},
            {"log_length_mean", log_length_mean},
            {"log_length_sd", log_length_sd},
            {"seed", seed}};
  }
};

struct PreferencePair {
  std::string id;
  std::vector<double> features_chosen;
  std::vector<double> features_rejected;
  std::int64_t length_chosen = 1;
  std::int64_t length_rejected = 1;
  double gold_margin = 0.0;  // gold(chosen) - gold(rejected)

  bool operator==(const PreferencePair&) const = default;
};

struct PreferenceDataset {
  std::vector<PreferencePair> pairs;
  std::size_t d_in = 0;  // 0: unknown (empty file)
  nlohmann::ordered_json provenance = nlohmann::ordered_json::object();

  std::size_t size() const { return pairs.size(); }
  bool empty() const { return pairs.empty(); }

  std::size_t require_d_in() const {
    if (d_in == 0) throw DataError("dataset has unknown feature dimension (no pairs)");
    return d_in;
  }

  bool operator==(const PreferenceDataset& o) const { return pairs == o.pairs && d_in == o.d_in; }
};

/// A single generated response.
struct Response {
  std::vector<double> features;
  std::int64_t length = 1;
  double gold = 0.0;
};

namespace detail {

inline double standardized_log_length(const SyntheticWorld& w, std::int64_t length) {
  return (std::log(static_cast<double>(length)) - w.log_length_mean) / w.log_length_sd;
}

inline std::int64_t draw_length(const SyntheticWorld& w, Rng& rng) {
  const double l = std::exp(w.log_length_mean + w.log_length_sd * rng.normal());
  return std::max<std::int64_t>(1, std::llround(l));
}

struct Latent {
  std::vector<double> theta;
  double gold = 0.0;
};

inline Latent draw_latent(const SyntheticWorld& w, const std::vector<double>& phi, Rng& rng) {
  Latent l;
  l.theta.resize(w.k_true);
  for (std::size_t k = 0; k < w.k_true; ++k) {
    l.theta[k] = rng.exponential();
    l.gold += l.theta[k] * phi[k];
  }
  return l;
}

inline std::vector<double> embed(const SyntheticWorld& w, const std::vector<double>& embedding,
                                 const std::vector<double>& theta, std::int64_t length, Rng& rng) {
  std::vector<double> f(w.d_in, 0.0);
  for (std::size_t j = 0; j < w.d_in; ++j) {
    if (j == w.length_feature_index) {
      f[j] = standardized_log_length(w, length);
      continue;
    }
    double s = 0.0;
    for (std::size_t k = 0; k < w.k_true; ++k) s += theta[k] * embedding[k * w.d_in + j];
    f[j] = s + w.feature_noise * rng.normal();
  }
  return f;
}

}  // namespace detail

/// Deterministic in (world, n, split_tag). The "hard" split always makes the
/// rejected response strictly longer; other splits make the chosen response
/// the longer one with probability world.bias_strength.
inline PreferenceDataset generate_dataset(const SyntheticWorld& world, std::size_t n,
                                          const std::string& split_tag) {
  world.validate();
  if (n == 0) throw ConfigError("generate_dataset: n must be >= 1");
  const auto phi = world.gold_weights();
  const auto embedding = world.embedding();
  const bool hard = split_tag == "hard";
  const std::uint64_t split_key = fnv1a(split_tag);

  PreferenceDataset ds;
  ds.d_in = world.d_in;
  ds.pairs.resize(n);
  for (std::size_t i = 0; i < n; ++i) {
    Rng rng = Rng::stream(world.seed ^ split_key, streams::kPairs, i);
    auto a = detail::draw_latent(world, phi, rng);
    auto b = detail::draw_latent(world, phi, rng);
    if (b.gold > a.gold) std::swap(a, b);  // a is chosen
    std::int64_t l1 = detail::draw_length(world, rng);
    std::int64_t l2 = detail::draw_length(world, rng);
    if (l1 == l2) ++l2;
    const std::int64_t longer = std::max(l1, l2), shorter = std::min(l1, l2);
    const bool chosen_longer = !hard && rng.bernoulli(world.bias_strength);

    PreferencePair& p = ds.pairs[i];
    p.id = split_tag + "-" + std::to_string(i);
    p.length_chosen = chosen_longer ? longer : shorter;
    p.length_rejected = chosen_longer ? shorter : longer;
    p.features_chosen = detail::embed(world, embedding, a.theta, p.length_chosen, rng);
    p.features_rejected = detail::embed(world, embedding, b.theta, p.length_rejected, rng);
    p.gold_margin = a.gold - b.gold;
  }
  ds.provenance = {{"world", world.to_json()}, {"n", n}, {"split", split_tag}};
  return ds;
}

/// Flips each pair independently with probability `rate`. Draws are keyed by
/// (seed, pass, index) where `pass` counts earlier applications recorded in
/// the provenance, so re-applying with the same seed flips afresh.
inline PreferenceDataset inject_label_noise(const PreferenceDataset& ds, double rate,
                                            std::uint64_t seed) {
  if (!(rate >= 0.0 && rate < 0.5)) throw ConfigError("label noise rate must lie in [0,0.5)");
  PreferenceDataset out = ds;
  const std::uint64_t pass =
      out.provenance.contains("label_noise") ? out.provenance["label_noise"].size() : 0;
  for (std::size_t i = 0; i < out.pairs.size(); ++i) {
    auto& p = out.pairs[i];
    Rng rng = Rng::stream(seed, streams::kLabelNoise + (pass << 8), i);
    if (rng.bernoulli(rate)) {
      std::swap(p.features_chosen, p.features_rejected);
      std::swap(p.length_chosen, p.length_rejected);
      p.gold_margin = -p.gold_margin;
    }
  }
  out.provenance["label_noise"].push_back({{"rate", rate}, {"seed", seed}});
  return out;
}

// ---- candidate pools for best-of-N --------------------------------------

struct PromptPool {
  std::vector<std::vector<Response>> prompts;  // candidates per prompt
};

/// With `adversarial`, gold qualities are reassigned so gold strictly
/// decreases with length within each prompt: the longest candidate is the
/// worst one.
inline PromptPool generate_prompt_pool(const SyntheticWorld& world, std::size_t n_prompts,
                                       std::size_t samples_per_prompt, bool adversarial) {
  world.validate();
  const auto phi = world.gold_weights();
  const auto embedding = world.embedding();
  PromptPool pool;
  pool.prompts.resize(n_prompts);
  for (std::size_t p = 0; p < n_prompts; ++p) {
    Rng rng = Rng::stream(world.seed, streams::kPool, p);
    std::vector<detail::Latent> latents;
    std::vector<std::int64_t> lengths;
    for (std::size_t s = 0; s < samples_per_prompt; ++s) {
      latents.push_back(detail::draw_latent(world, phi, rng));
      lengths.push_back(detail::draw_length(world, rng));
    }
    if (adversarial) {
      // Distinct lengths, ascending, paired with gold descending.
      std::sort(lengths.begin(), lengths.end());
      for (std::size_t s = 1; s < lengths.size(); ++s)
        lengths[s] = std::max(lengths[s], lengths[s - 1] + 1);
      std::sort(latents.begin(), latents.end(),
                [](const auto& x, const auto& y) { return x.gold > y.gold; });
    }
    auto& cands = pool.prompts[p];
    for (std::size_t s = 0; s < samples_per_prompt; ++s) {
      cands.push_back({detail::embed(world, embedding, latents[s].theta, lengths[s], rng),
                       lengths[s], latents[s].gold});
    }
  }
  return pool;
}

// ---- JSONL --------------------------------------------------------------

inline nlohmann::ordered_json pair_to_json(const PreferencePair& p) {
  return {{"id", p.id},
          {"features_chosen", p.features_chosen},
          {"features_rejected", p.features_rejected},
          {"length_chosen", p.length_chosen},
          {"length_rejected", p.length_rejected},
          {"gold_margin", p.gold_margin}};
}

inline void save_jsonl(const PreferenceDataset& ds, const std::string& path) {
  std::ofstream out(path, std::ios::binary);
  if (!out) throw DataError("cannot open " + path + " for writing");
  for (const auto& p : ds.pairs) out << pair_to_json(p).dump() << '\n';
  if (!out) throw DataError("write failed: " + path);
}

inline PreferenceDataset parse_jsonl(std::istream& in, const std::string& name) {
  PreferenceDataset ds;
  std::unordered_set<std::string> ids;
  std::string line;
  std::size_t line_no = 0;
  while (std::getline(in, line)) {
    ++line_no;
    if (line.empty()) continue;
    const auto fail = [&](const std::string& what) {
      return DataError(name + ":" + std::to_string(line_no) + ": " + what);
    };
    PreferencePair p;
    try {
      const auto j = nlohmann::json::parse(line);
      for (const char* key : {"id", "features_chosen", "features_rejected", "length_chosen",
                              "length_rejected", "gold_margin"}) {
        if (!j.contains(key)) throw fail(std::string("missing key '") + key + "'");
      }
      if (j.size() != 6) throw fail("unexpected extra keys");
      p.id = j.at("id").get<std::string>();
      p.features_chosen = j.at("features_chosen").get<std::vector<double>>();
      p.features_rejected = j.at("features_rejected").get<std::vector<double>>();
      p.length_chosen = j.at("length_chosen").get<std::int64_t>();
      p.length_rejected = j.at("length_rejected").get<std::int64_t>();
      p.gold_margin = j.at("gold_margin").get<double>();
    } catch (const nlohmann::json::exception& e) {
      throw fail(e.what());
    }
    if (p.features_chosen.size() != p.features_rejected.size() || p.features_chosen.empty()) {
      throw fail("chosen/rejected feature dimensions differ");
    }
    if (ds.d_in == 0) ds.d_in = p.features_chosen.size();
    if (p.features_chosen.size() != ds.d_in) {
      throw fail("feature dimension " + std::to_string(p.features_chosen.size()) +
                 " differs from earlier lines (" + std::to_string(ds.d_in) + ")");
    }
    if (p.length_chosen < 1 || p.length_rejected < 1) throw fail("lengths must be >= 1");
    for (double x : p.features_chosen)
      if (!std::isfinite(x)) throw fail("non-finite feature");
    for (double x : p.features_rejected)
      if (!std::isfinite(x)) throw fail("non-finite feature");
    if (!ids.insert(p.id).second) throw fail("duplicate id '" + p.id + "'");
    ds.pairs.push_back(std::move(p));
  }
  return ds;
}

inline PreferenceDataset load_jsonl(const std::string& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw DataError("cannot open " + path);
  return parse_jsonl(in, path);
}

inline void save_provenance(const nlohmann::ordered_json& provenance, const std::string& path) {
  std::ofstream out(path, std::ios::binary);
  if (!out) throw DataError("cannot open " + path + " for writing");
  out << provenance.dump(2) << '\n';
}

}  // namespace bnrm
