#pragma once

#include <cmath>
#include <cstdio>
#include <fstream>
#include <numbers>
#include <optional>
#include <sstream>
#include <string>
#include <vector>

#include <nlohmann/json.hpp>

#include "bnrm/datagen.hpp"
#include "bnrm/error.hpp"
#include "bnrm/model.hpp"
#include "bnrm/objectives.hpp"
#include "bnrm/random.hpp"
#include "bnrm/reward_model.hpp"

namespace bnrm {

// ---- optimizer ------------------------------------------------------------

struct AdamConfig {
  double beta1 = 0.9;
  double beta2 = 0.999;
  double epsilon = 1e-8;
  double weight_decay = 0.0;  // decoupled (AdamW)
};

struct AdamMoments {
  std::vector<double> m;
  std::vector<double> v;
};

/// One bias-corrected Adam update of `param` in place; `t` is the 1-based step.
inline void adam_step(std::span<double> param, std::span<const double> grad, AdamMoments& state,
                      std::size_t t, double lr, const AdamConfig& cfg = {}) {
  if (param.size() != grad.size()) throw ShapeError("adam_step: parameter/gradient size mismatch");
  if (state.m.empty()) {
    state.m.assign(param.size(), 0.0);
    state.v.assign(param.size(), 0.0);
  }
  if (state.m.size() != param.size()) throw ShapeError("adam_step: state size mismatch");
  const double c1 = 1.0 - std::pow(cfg.beta1, static_cast<double>(t));
  const double c2 = 1.0 - std::pow(cfg.beta2, static_cast<double>(t));
  for (std::size_t i = 0; i < param.size(); ++i) {
    const double g = grad[i];
    state.m[i] = cfg.beta1 * state.m[i] + (1.0 - cfg.beta1) * g;
    state.v[i] = cfg.beta2 * state.v[i] + (1.0 - cfg.beta2) * g * g;
    const double m_hat = state.m[i] / c1;
    const double v_hat = state.v[i] / c2;
    param[i] -= lr * (m_hat / (std::sqrt(v_hat) + cfg.epsilon) + cfg.weight_decay * param[i]);
  }
}

class Adam {
 public:
  explicit Adam(std::vector<Tensor> params, AdamConfig cfg = {})
      : params_(std::move(params)), state_(params_.size()), cfg_(cfg) {}

  void step(double lr) {
    ++t_;
    for (std::size_t i = 0; i < params_.size(); ++i) {
      adam_step(params_[i].mutable_data(), params_[i].grad(), state_[i], t_, lr, cfg_);
    }
  }

  void zero_grad() {
    for (auto& p : params_) p.zero_grad();
  }

  /// Rescales all gradients so their global L2 norm is at most `max_norm`.
  double clip_grad_norm(double max_norm) {
    double sq = 0.0;
    for (const auto& p : params_)
      for (double g : p.grad()) sq += g * g;
    const double norm = std::sqrt(sq);
    if (norm > max_norm && norm > 0.0) {
      const double scale = max_norm / norm;
      for (auto& p : params_)
        for (double& g : p.mutable_grad()) g *= scale;
    }
    return norm;
  }

  std::size_t steps() const { return t_; }

 private:
  std::vector<Tensor> params_;
  std::vector<AdamMoments> state_;
  AdamConfig cfg_;
  std::size_t t_ = 0;
};

/// Linear warmup then cosine decay to zero. `step` is 1-based.
inline double scheduled_lr(double base, std::size_t step, std::size_t total, double warmup_ratio) {
  const auto warmup = static_cast<std::size_t>(std::ceil(warmup_ratio * static_cast<double>(total)));
  if (step <= warmup && warmup > 0) {
    return base * static_cast<double>(step) / static_cast<double>(warmup);
  }
  if (total <= warmup) return base;
  const double progress =
      static_cast<double>(step - warmup) / static_cast<double>(total - warmup);
  return base * 0.5 * (1.0 + std::cos(std::numbers::pi * progress));
}

// ---- configuration ----------------------------------------------------------

struct TrainConfig {
  Method method = Method::bnrm;
  std::size_t epochs = 20;
  std::size_t batch_size = 32;
  double learning_rate = 1e-3;
  double eta = 1e-5;
  std::size_t k = 64;
  std::size_t d_model = 32;
  std::size_t hidden = 32;
  std::uint64_t seed = 0;
  std::size_t ensemble_size = 3;
  double margin = 1.0;
  double smooth_eps = 0.1;
  double weight_decay = 0.0;
  double clip_norm = 5.0;
  double warmup_ratio = 0.03;
  std::string checkpoint_path;
  std::string log_path;

  void validate() const {
    if (epochs == 0) throw ConfigError("train.epochs must be >= 1");
    if (batch_size == 0) throw ConfigError("train.batch_size must be >= 1");
    if (!(learning_rate > 0.0)) throw ConfigError("train.learning_rate must be > 0");
    if (!(eta >= 0.0)) throw ConfigError("train.eta must be >= 0");
    if (k == 0) throw ConfigError("train.K must be >= 1");
    if (d_model == 0) throw ConfigError("train.d_model must be >= 1");
    if (hidden == 0) throw ConfigError("train.hidden must be >= 1");
    if (method == Method::bt_ensemble && ensemble_size == 0) {
      throw ConfigError("train.ensemble_size must be >= 1");
    }
    if (!(margin >= 0.0)) throw ConfigError("train.margin must be >= 0");
    if (!(smooth_eps >= 0.0 && smooth_eps < 0.5)) {
      throw ConfigError("train.smooth_eps must lie in [0, 0.5)");
    }
    if (!(weight_decay >= 0.0)) throw ConfigError("train.weight_decay must be >= 0");
    if (!(clip_norm > 0.0)) throw ConfigError("train.clip_norm must be > 0");
    if (!(warmup_ratio >= 0.0 && warmup_ratio < 1.0)) {
      throw ConfigError("train.warmup_ratio must lie in [0, 1)");
    }
  }

  nlohmann::ordered_json to_json() const {
    return {{"method", to_string(method)}, {"epochs", epochs},
            {"batch_size", batch_size},    {"learning_rate", learning_rate},
            {"eta", eta},                  {"K", k},
            {"d_model", d_model},          {"hidden", hidden},
            {"ensemble_size", ensemble_size}, {"margin", margin},
            {"smooth_eps", smooth_eps},    {"weight_decay", weight_decay},
            {"clip_norm", clip_norm},      {"warmup_ratio", warmup_ratio}};
  }
};

// ---- log ----------------------------------------------------------------------

/// Nine significant digits, the fixed float format of every CSV artifact.
inline std::string fmt_float(double v) {
  char buf[40];
  std::snprintf(buf, sizeof buf, "%.9g", v);
  return buf;
}

struct StepRecord {
  std::size_t step = 0;
  double loss = 0.0;
  double bt_nll = 0.0;
  double kl_theta = 0.0;
  double kl_phi = 0.0;
  std::optional<double> val_acc;  // set on the last step of each epoch
};

struct TrainLog {
  std::vector<StepRecord> steps;

  std::vector<double> epoch_accuracies() const {
    std::vector<double> out;
    for (const auto& s : steps)
      if (s.val_acc) out.push_back(*s.val_acc);
    return out;
  }

  std::string to_csv() const {
    std::ostringstream os;
    os << "step,loss,bt_nll,kl_theta,kl_phi,val_acc\n";
    for (const auto& s : steps) {
      os << s.step << ',' << fmt_float(s.loss) << ',' << fmt_float(s.bt_nll) << ','
         << fmt_float(s.kl_theta) << ',' << fmt_float(s.kl_phi) << ','
         << (s.val_acc ? fmt_float(*s.val_acc) : "") << '\n';
    }
    return os.str();
  }

  void write_csv(const std::string& path) const {
    std::ofstream out(path, std::ios::binary);
    if (!out) throw DataError("cannot open " + path + " for writing");
    out << to_csv();
  }
};

// ---- evaluation ---------------------------------------------------------------

/// Fraction of pairs scored chosen > rejected; ties count one half.
inline double accuracy_from_scores(std::span<const double> chosen, std::span<const double> rejected) {
  if (chosen.empty()) throw DataError("evaluate_accuracy: empty dataset");
  double correct = 0.0;
  for (std::size_t i = 0; i < chosen.size(); ++i) {
    if (chosen[i] > rejected[i]) correct += 1.0;
    else if (chosen[i] == rejected[i]) correct += 0.5;
  }
  return correct / static_cast<double>(chosen.size());
}

inline double evaluate_accuracy(const RewardModel& model, const PreferenceDataset& ds) {
  if (ds.empty()) throw DataError("evaluate_accuracy: empty dataset");
  require_compatible(model, ds.require_d_in());
  std::vector<const std::vector<double>*> c, r;
  for (const auto& p : ds.pairs) {
    c.push_back(&p.features_chosen);
    r.push_back(&p.features_rejected);
  }
  const auto sc = model.score(c);
  const auto sr = model.score(r);
  return accuracy_from_scores(sc, sr);
}

/// Accuracy of an arbitrary per-response scorer.
template <class Scorer>
double evaluate_accuracy_with(const Scorer& scorer, const PreferenceDataset& ds) {
  if (ds.empty()) throw DataError("evaluate_accuracy: empty dataset");
  std::vector<double> c, r;
  for (const auto& p : ds.pairs) {
    c.push_back(scorer(p.features_chosen));
    r.push_back(scorer(p.features_rejected));
  }
  return accuracy_from_scores(c, r);
}

// ---- training loop --------------------------------------------------------------

namespace streams {
inline constexpr std::uint64_t kInit = 10;
inline constexpr std::uint64_t kShuffle = 11;
inline constexpr std::uint64_t kSampling = 12;
}  // namespace streams

inline RewardNet init_net(const TrainConfig& cfg, std::size_t d_in, std::uint64_t member) {
  Rng rng = Rng::stream(cfg.seed, streams::kInit, member);
  RewardNet net;
  net.encoder = Encoder(d_in, cfg.hidden, cfg.d_model, rng);
  if (cfg.method == Method::bnrm) {
    net.head = BnrmHead::init(cfg.d_model, cfg.k, rng);
  } else {
    net.head = BaselineHead::init(cfg.d_model, rng);
  }
  return net;
}

inline std::vector<Tensor> parameter_tensors(const RewardNet& net) {
  std::vector<Tensor> out;
  for (auto& [name, t] : net.parameters()) out.push_back(t);
  return out;
}

inline PairLossConfig pair_loss_for(const TrainConfig& cfg) {
  PairLossConfig p;
  p.margin = cfg.margin;
  p.smooth_eps = cfg.smooth_eps;
  if (cfg.method == Method::bt_margin) p.kind = PairLoss::margin;
  if (cfg.method == Method::bt_labelsmooth) p.kind = PairLoss::label_smooth;
  return p;
}

/// Mini-batch training of one member. Appends to `log`; `step` is the global counter.
class MemberTrainer {
 public:
  MemberTrainer(const TrainConfig& cfg, RewardNet& net, std::uint64_t member)
      : cfg_(cfg),
        net_(net),
        adam_(parameter_tensors(net), AdamConfig{0.9, 0.999, 1e-8, cfg.weight_decay}),
        sampling_(Rng::stream(cfg.seed, streams::kSampling, member)) {}

  /// One optimizer step on `batch`. Returns the pre-update loss breakdown.
  StepRecord step(PairBatch batch, double lr) {
    try {
      return checked_step(batch, lr);
    } catch (const DomainError& e) {
      throw NumericError(std::string("non-finite value during training step: ") + e.what());
    }
  }

 private:
  StepRecord checked_step(PairBatch batch, double lr) {
    adam_.zero_grad();
    StepRecord rec;
    Tensor loss;
    if (const auto* head = std::get_if<BnrmHead>(&net_.head)) {
      const auto elbo = elbo_loss(batch, net_.encoder, *head, cfg_.eta, sampling_);
      rec.loss = elbo.total;
      rec.bt_nll = elbo.bt_nll;
      rec.kl_theta = elbo.kl_theta;
      rec.kl_phi = elbo.kl_phi;
      loss = elbo.loss;
    } else {
      loss = preference_loss(batch, net_, pair_loss_for(cfg_));
      rec.loss = loss.item();
      rec.bt_nll = rec.loss;
    }
    if (!std::isfinite(rec.loss)) throw NumericError("non-finite training loss");
    diff::backward(loss);
    if (!std::isfinite(adam_.clip_grad_norm(cfg_.clip_norm))) {
      throw NumericError("non-finite gradient norm");
    }
    adam_.step(lr);
    return rec;
  }

  const TrainConfig& cfg_;
  RewardNet& net_;
  Adam adam_;
  Rng sampling_;
};

struct TrainResult {
  RewardModel model;
  TrainLog log;
};

inline TrainResult train(const TrainConfig& cfg, const PreferenceDataset& train_set,
                         const PreferenceDataset& val_set, const std::string& config_hash = "") {
  cfg.validate();
  if (train_set.empty()) throw DataError("train: empty training set");
  if (val_set.empty()) throw DataError("train: empty validation set");
  const std::size_t d_in = train_set.require_d_in();
  if (val_set.require_d_in() != d_in) {
    throw DataError("dimension mismatch: train d_in = " + std::to_string(d_in) +
                    ", val d_in = " + std::to_string(val_set.d_in));
  }

  TrainResult result;
  RewardModel& model = result.model;
  model.method = cfg.method;
  model.d_in = d_in;
  model.hidden = cfg.hidden;
  model.d_model = cfg.d_model;
  model.k = cfg.method == Method::bnrm ? cfg.k : 0;
  model.seed = cfg.seed;
  model.config_hash = config_hash;

  const std::size_t members = cfg.method == Method::bt_ensemble ? cfg.ensemble_size : 1;
  const std::size_t n = train_set.size();
  const std::size_t batches = (n + cfg.batch_size - 1) / cfg.batch_size;
  const std::size_t total_steps = cfg.epochs * batches;
  std::size_t global_step = 0;

  for (std::size_t member = 0; member < members; ++member) {
    RewardNet net = init_net(cfg, d_in, member);
    MemberTrainer trainer(cfg, net, member);
    Rng shuffle = Rng::stream(cfg.seed, streams::kShuffle, member);
    RewardModel probe = model;  // evaluates this member alone
    probe.members = {net};
    std::size_t local_step = 0;
    for (std::size_t epoch = 0; epoch < cfg.epochs; ++epoch) {
      const auto order = shuffle.permutation(n);
      for (std::size_t start = 0; start < n; start += cfg.batch_size) {
        const std::size_t end = std::min(n, start + cfg.batch_size);
        std::vector<const PreferencePair*> batch;
        for (std::size_t i = start; i < end; ++i) batch.push_back(&train_set.pairs[order[i]]);
        ++local_step;
        const double lr = scheduled_lr(cfg.learning_rate, local_step, total_steps, cfg.warmup_ratio);
        StepRecord rec = trainer.step(batch, lr);
        rec.step = ++global_step;
        result.log.steps.push_back(rec);
      }
      result.log.steps.back().val_acc = evaluate_accuracy(probe, val_set);
    }
    model.members.push_back(std::move(net));
  }

  if (!cfg.checkpoint_path.empty()) save_checkpoint(model, cfg.checkpoint_path);
  if (!cfg.log_path.empty()) result.log.write_csv(cfg.log_path);
  return result;
}

}  // namespace bnrm
