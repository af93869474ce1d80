#pragma once

// Run configuration: a nested JSON document with fixed keys. Every key has a
// default; files and `key.path=value` overrides may only change existing keys.

#include <filesystem>
#include <fstream>
#include <sstream>
#include <string>

#include "json.hpp"

#include "moc/model.hpp"

namespace moc {

// Bad user input (unknown key, wrong type, malformed file). Maps to exit code 1.
struct UsageError : Error {
  using Error::Error;
};

inline nlohmann::json default_run_config() {
  return nlohmann::json::parse(R"({
    "seed": 0,
    "out": "runs/default",
    "model": {"d_model": 64, "heads": 4, "block_pairs": 4, "latent_dim": 8, "cond_grid": 8, "codebook_size": 50},
    "moc": {"sigma": 8, "gate_target": "key", "use_compressed_context": true, "use_routing": true},
    "router": {"k_fraction": 0.25, "activation": "sigmoid", "multi_head": true, "load_balance": true},
    "flow": {"steps": 50, "cfg_scale": 4.0, "p_drop": 0.1},
    "data": {"n_components": 4, "points": 32, "dim": 2, "train_scenes": 0, "train_seed": 1000,
             "eval_scenes": 16, "eval_seed": 900000, "codec_seed": 7, "iou_resolution": 0},
    "train": {"steps": 2000, "batch": 4, "lr": 0.001, "weight_decay": 0.0, "clip": 1.0, "log_every": 1}
  })");
}

namespace detail {

inline bool same_kind(const nlohmann::json& a, const nlohmann::json& b) {
  if (a.is_number() && b.is_number()) return a.is_number_float() || !b.is_number_float();
  return a.type() == b.type();
}

inline void merge_into(nlohmann::json& base, const nlohmann::json& over, const std::string& path) {
  if (!over.is_object()) throw UsageError("config section " + (path.empty() ? "<root>" : path) + " must be an object");
  for (const auto& [key, value] : over.items()) {
    const std::string full = path.empty() ? key : path + "." + key;
    if (!base.contains(key)) throw UsageError("unknown config key: " + full);
    nlohmann::json& slot = base[key];
    if (slot.is_object()) {
      merge_into(slot, value, full);
    } else {
      if (!same_kind(slot, value)) throw UsageError("wrong type for config key: " + full);
      slot = slot.is_number_float() ? nlohmann::json(value.get<double>()) : value;
    }
  }
}

}  // namespace detail

// "a.b.c=value". The value is read as JSON when it parses, otherwise as a string.
inline void apply_override(nlohmann::json& cfg, const std::string& assignment) {
  const auto eq = assignment.find('=');
  if (eq == std::string::npos || eq == 0) throw UsageError("override must look like key=value: " + assignment);
  const std::string key = assignment.substr(0, eq), raw = assignment.substr(eq + 1);
  nlohmann::json value = nlohmann::json::parse(raw, nullptr, false);
  if (value.is_discarded()) value = raw;
  nlohmann::json patch = value;
  std::string rest = key;
  std::vector<std::string> parts;
  for (std::size_t p; (p = rest.find('.')) != std::string::npos; rest.erase(0, p + 1)) parts.push_back(rest.substr(0, p));
  parts.push_back(rest);
  for (auto it = parts.rbegin(); it != parts.rend(); ++it) patch = nlohmann::json{{*it, patch}};
  // Objects may not be replaced wholesale through an override.
  const nlohmann::json* probe = &cfg;
  for (const auto& p : parts) {
    if (!probe->is_object() || !probe->contains(p)) throw UsageError("unknown config key: " + key);
    probe = &(*probe)[p];
  }
  if (probe->is_object()) throw UsageError("config key is a section, not a value: " + key);
  detail::merge_into(cfg, patch, "");
}

inline nlohmann::json load_run_config(const std::optional<std::filesystem::path>& file,
                                      const std::vector<std::string>& overrides) {
  nlohmann::json cfg = default_run_config();
  if (file) {
    std::ifstream is(*file);
    if (!is) throw UsageError("cannot open config " + file->string());
    nlohmann::json user = nlohmann::json::parse(is, nullptr, false);
    if (user.is_discarded()) throw UsageError("config is not valid JSON: " + file->string());
    detail::merge_into(cfg, user, "");
  }
  for (const auto& o : overrides) apply_override(cfg, o);
  return cfg;
}

inline ModelConfig model_config(const nlohmann::json& c) {
  ModelConfig m;
  try {
    m.d_model = c.at("/model/d_model"_json_pointer).get<std::size_t>();
    m.heads = c.at("/model/heads"_json_pointer).get<std::size_t>();
    m.block_pairs = c.at("/model/block_pairs"_json_pointer).get<std::size_t>();
    m.d_latent = c.at("/model/latent_dim"_json_pointer).get<std::size_t>();
    m.cond_grid = c.at("/model/cond_grid"_json_pointer).get<std::size_t>();
    m.codebook_size = c.at("/model/codebook_size"_json_pointer).get<std::size_t>();
    m.L = c.at("/data/points"_json_pointer).get<std::size_t>();
    m.sigma = c.at("/moc/sigma"_json_pointer).get<std::size_t>();
    m.use_compressed_context = c.at("/moc/use_compressed_context"_json_pointer).get<bool>();
    m.use_routing = c.at("/moc/use_routing"_json_pointer).get<bool>();
    m.k_fraction = c.at("/router/k_fraction"_json_pointer).get<double>();
    m.multi_head_routing = c.at("/router/multi_head"_json_pointer).get<bool>();
    m.load_balance = c.at("/router/load_balance"_json_pointer).get<bool>();
    const auto gate = c.at("/moc/gate_target"_json_pointer).get<std::string>();
    const auto act = c.at("/router/activation"_json_pointer).get<std::string>();
    if (gate != "key" && gate != "value") throw UsageError("moc.gate_target must be key or value");
    if (act != "sigmoid" && act != "softmax") throw UsageError("router.activation must be sigmoid or softmax");
    m.gate_target = gate == "key" ? GainTarget::key : GainTarget::value;
    m.activation = act == "sigmoid" ? RouterActivation::sigmoid : RouterActivation::softmax;
  } catch (const nlohmann::json::exception& e) {
    throw UsageError(std::string("invalid config value: ") + e.what());
  }
  try {
    m.validate();
  } catch (const Error& e) {
    throw UsageError(e.what());
  }
  return m;
}

}  // namespace moc
