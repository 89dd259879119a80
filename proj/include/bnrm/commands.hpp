#pragma once

// Subcommand implementations behind the `bnrm` CLI. Kept in the library so
// tests can drive whole runs without spawning processes.

#include <cstdint>
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <optional>
#include <ostream>
#include <set>
#include <string>
#include <vector>

#include <nlohmann/json.hpp>

#include "bnrm/datagen.hpp"
#include "bnrm/error.hpp"
#include "bnrm/eval.hpp"
#include "bnrm/reward_model.hpp"
#include "bnrm/trainer.hpp"

namespace bnrm::cli {

struct EvalConfig {
  std::size_t n_buckets = 10;
  std::size_t top_k = 16;
  double tau = 0.0;  // <= 0: 1% of max(phi)
  std::size_t n_prompts = 200;
  std::size_t samples_per_prompt = 405;
  std::vector<std::int64_t> n_list = default_n_list();
  bool adversarial_pool = false;
};

struct RunConfig {
  std::uint64_t seed = 0;
  SyntheticWorld world;
  std::size_t n_train = 2000;
  std::size_t n_val = 500;
  std::size_t n_hard = 500;
  TrainConfig train;
  EvalConfig eval;

  nlohmann::ordered_json effective() const {
    auto w = world.to_json();
    w.erase("seed");
    w["n_train"] = n_train;
    w["n_val"] = n_val;
    w["n_hard"] = n_hard;
    nlohmann::ordered_json e = {{"n_buckets", eval.n_buckets},
                                {"top_k", eval.top_k},
                                {"tau", eval.tau},
                                {"n_prompts", eval.n_prompts},
                                {"samples_per_prompt", eval.samples_per_prompt},
                                {"n_list", eval.n_list},
                                {"adversarial_pool", eval.adversarial_pool}};
    return {{"seed", seed}, {"world", w}, {"train", train.to_json()}, {"eval", e}};
  }

  std::string hash() const {
    char buf[17];
    std::snprintf(buf, sizeof buf, "%016llx",
                  static_cast<unsigned long long>(fnv1a(effective().dump())));
    return buf;
  }
};

namespace detail {

/// Reads optional keys of one JSON object and rejects any key left unread.
class Section {
 public:
  Section(const nlohmann::json& j, std::string path) : j_(j), path_(std::move(path)) {
    if (!j_.is_object()) throw ConfigError(path_ + ": expected a JSON object");
  }

  template <class T>
  void get(const std::string& key, T& out) {
    used_.insert(key);
    if (!j_.contains(key)) return;
    try {
      out = j_.at(key).get<T>();
    } catch (const nlohmann::json::exception&) {
      throw ConfigError(path_ + "." + key + ": wrong type (" + j_.at(key).dump() + ")");
    }
  }

  void mark(const std::string& key) { used_.insert(key); }

  void finish() const {
    for (const auto& [key, _] : j_.items()) {
      if (!used_.count(key)) throw ConfigError(path_ + "." + key + ": unknown key");
    }
  }

 private:
  const nlohmann::json& j_;
  std::string path_;
  std::set<std::string> used_;
};

}  // namespace detail

inline RunConfig parse_run_config(const nlohmann::json& j,
                                  std::optional<std::uint64_t> seed_override = std::nullopt) {
  RunConfig c;
  detail::Section root(j, "config");
  if (!j.is_object() || (!j.contains("seed") && !seed_override)) {
    throw ConfigError("config.seed: missing required field");
  }
  root.get("seed", c.seed);
  if (seed_override) c.seed = *seed_override;

  if (j.contains("world")) {
    detail::Section s(j.at("world"), "config.world");
    auto& w = c.world;
    s.get("k_true", w.k_true);
    s.get("phi_true", w.phi_true);
    s.get("d_in", w.d_in);
    w.length_feature_index = w.d_in - 1;
    s.get("length_feature_index", w.length_feature_index);
    s.get("bias_strength", w.bias_strength);
    s.get("noise_rate", w.noise_rate);
    s.get("feature_noise", w.feature_noise);
    s.get("log_length_mean", w.log_length_mean);
    s.get("log_length_sd", w.log_length_sd);
    s.get("n_train", c.n_train);
    s.get("n_val", c.n_val);
    s.get("n_hard", c.n_hard);
    s.finish();
  }
  root.mark("world");
  c.world.seed = c.seed;

  if (j.contains("train")) {
    detail::Section s(j.at("train"), "config.train");
    auto& t = c.train;
    std::string method = std::string(to_string(t.method));
    s.get("method", method);
    try {
      t.method = parse_method(method);
    } catch (const ConfigError& e) {
      throw ConfigError(std::string("config.train.method: ") + e.what());
    }
    s.get("epochs", t.epochs);
    s.get("batch_size", t.batch_size);
    s.get("learning_rate", t.learning_rate);
    s.get("eta", t.eta);
    s.get("K", t.k);
    s.get("d_model", t.d_model);
    s.get("hidden", t.hidden);
    s.get("ensemble_size", t.ensemble_size);
    s.get("margin", t.margin);
    s.get("smooth_eps", t.smooth_eps);
    s.get("weight_decay", t.weight_decay);
    s.get("clip_norm", t.clip_norm);
    s.get("warmup_ratio", t.warmup_ratio);
    s.finish();
  }
  root.mark("train");
  c.train.seed = c.seed;

  if (j.contains("eval")) {
    detail::Section s(j.at("eval"), "config.eval");
    auto& e = c.eval;
    s.get("n_buckets", e.n_buckets);
    s.get("top_k", e.top_k);
    s.get("tau", e.tau);
    s.get("n_prompts", e.n_prompts);
    s.get("samples_per_prompt", e.samples_per_prompt);
    s.get("n_list", e.n_list);
    s.get("adversarial_pool", e.adversarial_pool);
    s.finish();
  }
  root.mark("eval");
  root.finish();

  c.world.validate();
  c.train.validate();
  if (c.n_train == 0 || c.n_val == 0 || c.n_hard == 0) {
    throw ConfigError("config.world: n_train, n_val and n_hard must be >= 1");
  }
  return c;
}

inline RunConfig load_run_config(const std::string& path,
                                 std::optional<std::uint64_t> seed_override = std::nullopt) {
  std::ifstream in(path);
  if (!in) throw ConfigError("cannot open config " + path);
  nlohmann::json j;
  try {
    in >> j;
  } catch (const nlohmann::json::exception& e) {
    throw ConfigError("config " + path + ": " + e.what());
  }
  return parse_run_config(j, seed_override);
}

namespace fs = std::filesystem;

inline void ensure_dir(const fs::path& dir) {
  std::error_code ec;
  fs::create_directories(dir, ec);
  if (ec || !fs::is_directory(dir)) throw DataError("cannot create directory " + dir.string());
}

struct Splits {
  PreferenceDataset train, val, hard;
};

/// Only the train split receives label noise.
inline Splits make_splits(const RunConfig& cfg) {
  Splits s;
  s.train = generate_dataset(cfg.world, cfg.n_train, "train");
  if (cfg.world.noise_rate > 0.0) {
    s.train = inject_label_noise(s.train, cfg.world.noise_rate, cfg.seed);
  }
  s.val = generate_dataset(cfg.world, cfg.n_val, "val");
  s.hard = generate_dataset(cfg.world, cfg.n_hard, "hard");
  return s;
}

/// train.jsonl (label noise applied), val.jsonl, hard.jsonl, provenance.json.
inline void cmd_gen_data(const RunConfig& cfg, const fs::path& out_dir, std::ostream& log) {
  ensure_dir(out_dir);
  const auto [train, val, hard] = make_splits(cfg);
  save_jsonl(train, (out_dir / "train.jsonl").string());
  save_jsonl(val, (out_dir / "val.jsonl").string());
  save_jsonl(hard, (out_dir / "hard.jsonl").string());
  nlohmann::ordered_json prov = {{"config", cfg.effective()},
                                 {"config_hash", cfg.hash()},
                                 {"splits",
                                  {{"train", train.provenance},
                                   {"val", val.provenance},
                                   {"hard", hard.provenance}}}};
  save_provenance(prov, (out_dir / "provenance.json").string());
  log << "pairs_train = " << train.size() << "\npairs_val = " << val.size()
      << "\npairs_hard = " << hard.size() << '\n';
}

/// checkpoint.json and train_log.csv under `out_dir`.
inline TrainResult cmd_train(const RunConfig& cfg, const fs::path& data_dir,
                             const fs::path& out_dir, std::ostream& log) {
  const auto train_set = load_jsonl((data_dir / "train.jsonl").string());
  const auto val_set = load_jsonl((data_dir / "val.jsonl").string());
  ensure_dir(out_dir);
  TrainConfig tc = cfg.train;
  tc.checkpoint_path = (out_dir / "checkpoint.json").string();
  tc.log_path = (out_dir / "train_log.csv").string();
  auto result = train(tc, train_set, val_set, cfg.hash());
  log << "val_acc = " << fmt_float(evaluate_accuracy(result.model, val_set)) << '\n';
  return result;
}

inline double cmd_eval(const std::string& checkpoint, const std::string& data,
                       const std::string& out, std::ostream& log) {
  const auto model = load_checkpoint(checkpoint);
  const auto ds = load_jsonl(data);
  const double acc = evaluate_accuracy(model, ds);
  write_text(out, "metric,value\naccuracy," + fmt_float(acc) + "\n");
  log << "accuracy = " << fmt_float(acc) << '\n';
  return acc;
}

inline BiasReport cmd_bias_report(const BatchScorer& scorer, const std::string& data,
                                  std::size_t n_buckets, const std::string& out,
                                  std::ostream& log) {
  const auto ds = load_jsonl(data);
  const auto rep = length_bias_report(scorer, ds, n_buckets);
  write_text(out, rep.to_csv());
  if (rep.pearson_r) {
    char buf[32];
    std::snprintf(buf, sizeof buf, "%.3f", *rep.pearson_r);
    log << "pearson = " << buf << '\n';
  } else {
    log << "pearson = undefined\n";
  }
  return rep;
}

inline BonCurve cmd_bon(const RunConfig& cfg, const BatchScorer& proxy, const std::string& out,
                        std::ostream& log) {
  SyntheticWorld w = cfg.world;
  w.seed = cfg.seed ^ fnv1a("bon-pool");
  const auto pool = generate_prompt_pool(w, cfg.eval.n_prompts, cfg.eval.samples_per_prompt,
                                         cfg.eval.adversarial_pool);
  const auto curve =
      bon_curve(proxy, gold_scorer(), pool, cfg.eval.n_list, cfg.eval.samples_per_prompt, cfg.seed);
  write_text(out, curve.to_csv());
  const auto& last = curve.points.back();
  log << "gold_at_max_N = " << fmt_float(last.gold_score)
      << "\nproxy_at_max_N = " << fmt_float(last.proxy_score) << '\n';
  return curve;
}

inline FactorDump cmd_dump_factors(const std::string& checkpoint, const std::string& data,
                                   const EvalConfig& ec, const std::string& out,
                                   std::ostream& log) {
  const auto model = load_checkpoint(checkpoint);
  const auto ds = load_jsonl(data);
  const auto dump = factor_dump(model, ds, ec.top_k, ec.tau);
  write_text(out, dump.to_csv());
  log << "amplification_pairs = " << dump.amplification_pairs
      << "\nrectification_pairs = " << dump.rectification_pairs << '\n';
  return dump;
}

}  // namespace bnrm::cli
