#pragma once

// A trained reward model (one or more encoder+head members) and its JSON
// checkpoint container.

#include <cstdint>
#include <fstream>
#include <string>
#include <string_view>
#include <vector>

#include <nlohmann/json.hpp>

#include "bnrm/error.hpp"
#include "bnrm/model.hpp"

namespace bnrm {

enum class Method { bnrm, bt, bt_margin, bt_labelsmooth, bt_ensemble };

inline std::string_view to_string(Method m) {
  switch (m) {
    case Method::bnrm: return "bnrm";
    case Method::bt: return "bt";
    case Method::bt_margin: return "bt_margin";
    case Method::bt_labelsmooth: return "bt_labelsmooth";
    case Method::bt_ensemble: return "bt_ensemble";
  }
  return "?";
}

inline Method parse_method(std::string_view s) {
  for (Method m : {Method::bnrm, Method::bt, Method::bt_margin, Method::bt_labelsmooth,
                   Method::bt_ensemble}) {
    if (to_string(m) == s) return m;
  }
  throw ConfigError("unknown method '" + std::string(s) +
                    "' (expected bnrm, bt, bt_margin, bt_labelsmooth, bt_ensemble)");
}

inline constexpr int kCheckpointVersion = 1;

struct RewardModel {
  Method method = Method::bt;
  std::size_t d_in = 0;
  std::size_t hidden = 0;
  std::size_t d_model = 0;
  std::size_t k = 0;  // latent factors; 0 for scalar heads
  std::uint64_t seed = 0;
  std::string config_hash;
  std::vector<RewardNet> members;

  bool is_bnrm() const { return method == Method::bnrm; }

  /// Posterior-mean (or scalar) rewards for a batch of responses, averaged over members.
  std::vector<double> score(std::span<const std::vector<double>* const> rows) const {
    if (members.empty()) throw std::logic_error("RewardModel: no members");
    std::vector<double> out(rows.size(), 0.0);
    if (rows.empty()) return out;
    const auto x = stack_rows(rows, d_in);
    for (const auto& m : members) {
      const auto r = m.mean_reward(x);
      for (std::size_t i = 0; i < out.size(); ++i) out[i] += r.at(i);
    }
    for (auto& v : out) v /= static_cast<double>(members.size());
    return out;
  }

  double score(const std::vector<double>& features) const {
    const std::vector<double>* row = &features;
    return score(std::span<const std::vector<double>* const>(&row, 1))[0];
  }
};

// ---- checkpoint ---------------------------------------------------------

namespace detail {

inline nlohmann::ordered_json tensor_to_json(const Tensor& t) {
  return {{"shape", t.shape()}, {"data", std::vector<double>(t.data().begin(), t.data().end())}};
}

inline Tensor tensor_from_json(const nlohmann::json& j, const diff::Shape& expected,
                               const std::string& name) {
  const auto shape = j.at("shape").get<diff::Shape>();
  if (shape != expected) {
    throw DataError("checkpoint: tensor '" + name + "' has shape " + diff::shape_str(shape) +
                    ", expected " + diff::shape_str(expected));
  }
  return Tensor::parameter(shape, j.at("data").get<std::vector<double>>());
}

}  // namespace detail

inline nlohmann::ordered_json checkpoint_json(const RewardModel& m) {
  nlohmann::ordered_json j;
  j["format"] = "bnrm-checkpoint";
  j["version"] = kCheckpointVersion;
  j["method"] = to_string(m.method);
  j["d_in"] = m.d_in;
  j["hidden"] = m.hidden;
  j["d_model"] = m.d_model;
  j["K"] = m.k;
  j["seed"] = m.seed;
  j["config_hash"] = m.config_hash;
  j["members"] = nlohmann::ordered_json::array();
  for (const auto& net : m.members) {
    nlohmann::ordered_json tensors;
    for (const auto& [name, t] : net.parameters()) tensors[name] = detail::tensor_to_json(t);
    j["members"].push_back({{"tensors", tensors}});
  }
  return j;
}

inline RewardModel model_from_checkpoint(const nlohmann::json& j) {
  try {
    if (j.at("format").get<std::string>() != "bnrm-checkpoint") {
      throw DataError("checkpoint: unrecognized format");
    }
    if (j.at("version").get<int>() != kCheckpointVersion) {
      throw DataError("checkpoint: unsupported version " + j.at("version").dump());
    }
    RewardModel m;
    m.method = parse_method(j.at("method").get<std::string>());
    m.d_in = j.at("d_in").get<std::size_t>();
    m.hidden = j.at("hidden").get<std::size_t>();
    m.d_model = j.at("d_model").get<std::size_t>();
    m.k = j.at("K").get<std::size_t>();
    m.seed = j.at("seed").get<std::uint64_t>();
    m.config_hash = j.at("config_hash").get<std::string>();
    if (m.d_in == 0 || m.hidden == 0 || m.d_model == 0 || (m.is_bnrm() && m.k == 0)) {
      throw DataError("checkpoint: zero dimension");
    }
    for (const auto& member : j.at("members")) {
      const auto& t = member.at("tensors");
      const auto get = [&](const std::string& name, const diff::Shape& shape) {
        if (!t.contains(name)) throw DataError("checkpoint: missing tensor '" + name + "'");
        return detail::tensor_from_json(t.at(name), shape, name);
      };
      RewardNet net;
      net.encoder = Encoder(get("encoder.w1", {m.d_in, m.hidden}), get("encoder.b1", {m.hidden}),
                            get("encoder.w2", {m.hidden, m.d_model}),
                            get("encoder.b2", {m.d_model}));
      if (m.is_bnrm()) {
        BnrmHead h;
        h.w_ell = get("head.w_ell", {m.d_model, m.k});
        h.b_ell = get("head.b_ell", {m.k});
        h.w_k = get("head.w_k", {m.d_model, m.k});
        h.b_k = get("head.b_k", {m.k});
        h.w_kw = get("head.w_kw", {1});
        h.b_kw = get("head.b_kw", {1});
        h.w = get("head.w", {m.k, 1});
        h.b = get("head.b", {1});
        net.head = std::move(h);
      } else {
        net.head = BaselineHead{get("head.w_bt", {m.d_model, 1})};
      }
      m.members.push_back(std::move(net));
    }
    if (m.members.empty()) throw DataError("checkpoint: no members");
    return m;
  } catch (const nlohmann::json::exception& e) {
    throw DataError(std::string("checkpoint: ") + e.what());
  }
}

inline void save_checkpoint(const RewardModel& m, const std::string& path) {
  std::ofstream out(path, std::ios::binary);
  if (!out) throw DataError("cannot open " + path + " for writing");
  out << checkpoint_json(m).dump() << '\n';
  if (!out) throw DataError("write failed: " + path);
}

inline RewardModel load_checkpoint(const std::string& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw DataError("cannot open checkpoint " + path);
  nlohmann::json j;
  try {
    in >> j;
  } catch (const nlohmann::json::exception& e) {
    throw DataError("checkpoint " + path + ": " + e.what());
  }
  return model_from_checkpoint(j);
}

/// Rejects a dataset whose feature dimension differs from the model's.
inline void require_compatible(const RewardModel& m, std::size_t data_d_in) {
  if (m.d_in != data_d_in) {
    throw DataError("dimension mismatch: checkpoint d_in = " + std::to_string(m.d_in) +
                    ", dataset d_in = " + std::to_string(data_d_in));
  }
}

}  // namespace bnrm
