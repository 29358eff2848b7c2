// SPDX-License-Identifier: Apache-2.0

#include "fastmem/config.hpp"

#include <functional>
#include <map>
#include <optional>

#include "fastmem/binary_io.hpp"
#include "fastmem/error.hpp"

namespace fastmem {

using nlohmann::json;

const char* to_string(Precision p) noexcept { return p == Precision::f32 ? "f32" : "f64"; }

Precision parse_precision(std::string_view s) {
  if (s == "f32") return Precision::f32;
  if (s == "f64") return Precision::f64;
  throw ContractError("precision must be f32 or f64, got \"" + std::string(s) + "\"");
}

OptimizerKind parse_optimizer_kind(std::string_view s) {
  if (s == "sgd") return OptimizerKind::sgd;
  if (s == "muon") return OptimizerKind::muon;
  if (s == "hf") return OptimizerKind::hf;
  throw ContractError("optimizer.kind must be sgd, muon or hf, got \"" + std::string(s) + "\"");
}

JacobianMode parse_curvature(std::string_view s) {
  if (s == "mlp") return JacobianMode::mlp;
  if (s == "ln") return JacobianMode::ln;
  throw ContractError("optimizer.curvature must be mlp or ln, got \"" + std::string(s) + "\"");
}

ToyStackConfig StreamConfig::stack_config() const {
  ToyStackConfig s;
  s.layers = stack_layers;
  s.heads = stack_heads;
  s.dim = dim;
  s.ffn_hidden = 2 * dim;
  s.seed = seed;
  return s;
}

void StreamConfig::validate() const {
  auto positive = [](std::size_t v, const char* name) {
    if (v == 0) throw ContractError(std::string(name) + " must be positive");
  };
  positive(dim, "dim");
  positive(tokens_per_frame, "tokens_per_frame");
  positive(batch_size, "batch_size");
  positive(memory_budget, "memory_budget");
  positive(ttt_heads, "ttt.heads");
  positive(reader_chunk, "reader.chunk");
  positive(reader_avg_tokens, "reader.avg_tokens");
  positive(stack_layers, "stack.layers");
  positive(stack_heads, "stack.heads");
  if (dim % ttt_heads != 0) throw ContractError("dim must be divisible by ttt.heads");
  if (dim % stack_heads != 0) throw ContractError("dim must be divisible by stack.heads");
  if (!(base_lr > 0)) throw ContractError("base_lr must be positive");
  if (!(token_std > 0)) throw ContractError("token_std must be positive");
  if (projection_noise < 0) throw ContractError("projection_noise must be non-negative");
  optimizer.validate();
}

namespace {

using Setter = std::function<void(StreamConfig&, const json&)>;

template <typename U>
U get_as(const json& v, const std::string& key) {
  try {
    if constexpr (std::is_same_v<U, bool>) {
      if (!v.is_boolean()) throw ContractError(key + " must be true or false");
    } else if constexpr (std::is_unsigned_v<U>) {
      if (v.is_number_integer() && v.get<std::int64_t>() < 0) {
        throw ContractError(key + " must be non-negative");
      }
      if (!v.is_number_integer()) throw ContractError(key + " must be an integer");
    }
    return v.get<U>();
  } catch (const json::exception& e) {
    throw ContractError(key + ": " + e.what());
  }
}

const std::map<std::string, Setter>& setters() {
  static const std::map<std::string, Setter> table = [] {
    std::map<std::string, Setter> t;
    auto count = [&](const char* key, std::size_t StreamConfig::*field) {
      t[key] = [field, key](StreamConfig& c, const json& v) { c.*field = get_as<std::size_t>(v, key); };
    };
    auto real = [&](const char* key, double StreamConfig::*field) {
      t[key] = [field, key](StreamConfig& c, const json& v) { c.*field = get_as<double>(v, key); };
    };
    count("dim", &StreamConfig::dim);
    count("tokens_per_frame", &StreamConfig::tokens_per_frame);
    count("audio_tokens_per_frame", &StreamConfig::audio_tokens_per_frame);
    count("batch_size", &StreamConfig::batch_size);
    count("memory_budget", &StreamConfig::memory_budget);
    count("frames", &StreamConfig::frames);
    count("pairs", &StreamConfig::pairs);
    count("ttt.heads", &StreamConfig::ttt_heads);
    count("ttt.hidden", &StreamConfig::ttt_hidden);
    count("reader.chunk", &StreamConfig::reader_chunk);
    count("reader.avg_tokens", &StreamConfig::reader_avg_tokens);
    count("stack.layers", &StreamConfig::stack_layers);
    count("stack.heads", &StreamConfig::stack_heads);
    real("ttt.projection_noise", &StreamConfig::projection_noise);
    real("token_std", &StreamConfig::token_std);
    real("optimizer.base_lr", &StreamConfig::base_lr);
    t["frame_rate"] = [](StreamConfig& c, const json& v) { c.frame_rate = get_as<std::string>(v, "frame_rate"); };
    t["seed"] = [](StreamConfig& c, const json& v) { c.seed = get_as<std::uint64_t>(v, "seed"); };
    t["precision"] = [](StreamConfig& c, const json& v) {
      c.precision = parse_precision(get_as<std::string>(v, "precision"));
    };
    t["optimizer.kind"] = [](StreamConfig& c, const json& v) {
      c.optimizer.kind = parse_optimizer_kind(get_as<std::string>(v, "optimizer.kind"));
    };
    t["optimizer.cg_iters"] = [](StreamConfig& c, const json& v) {
      c.optimizer.cg.max_iters = get_as<std::size_t>(v, "optimizer.cg_iters");
    };
    t["optimizer.curvature"] = [](StreamConfig& c, const json& v) {
      c.optimizer.cg.curvature = parse_curvature(get_as<std::string>(v, "optimizer.curvature"));
    };
    t["optimizer.damping"] = [](StreamConfig& c, const json& v) {
      c.optimizer.cg.damping = get_as<double>(v, "optimizer.damping");
    };
    t["optimizer.early_stop"] = [](StreamConfig& c, const json& v) {
      c.optimizer.cg.early_stop = get_as<bool>(v, "optimizer.early_stop");
    };
    t["optimizer.ns_iters"] = [](StreamConfig& c, const json& v) {
      c.optimizer.ns_iters = get_as<std::size_t>(v, "optimizer.ns_iters");
    };
    t["optimizer.muon_eta"] = [](StreamConfig& c, const json& v) {
      c.optimizer.muon_eta = get_as<double>(v, "optimizer.muon_eta");
    };
    return t;
  }();
  return table;
}

void flatten(const json& j, const std::string& prefix, std::vector<std::pair<std::string, json>>& out) {
  for (const auto& [k, v] : j.items()) {
    const std::string key = prefix.empty() ? k : prefix + "." + k;
    if (v.is_object()) {
      flatten(v, key, out);
    } else {
      out.emplace_back(key, v);
    }
  }
}

}  // namespace

StreamConfig parse_config(const json& j, StreamConfig base) {
  if (!j.is_object()) throw ContractError("config must be a JSON object");
  std::vector<std::pair<std::string, json>> entries;
  flatten(j, "", entries);
  std::optional<double> eta;
  for (const auto& [key, value] : entries) {
    if (key == "optimizer.eta") {
      eta = get_as<double>(value, key);
      continue;
    }
    const auto it = setters().find(key);
    if (it == setters().end()) throw ContractError("unknown config key \"" + key + "\"");
    it->second(base, value);
  }
  if (eta) {
    if (base.optimizer.kind == OptimizerKind::muon) {
      base.optimizer.muon_eta = *eta;
    } else {
      base.base_lr = *eta;
    }
  }
  base.validate();
  return base;
}

StreamConfig load_config(const std::filesystem::path& path) {
  const auto bytes = read_file_bytes(path);
  json j;
  try {
    j = json::parse(bytes.begin(), bytes.end());
  } catch (const json::parse_error& e) {
    throw ParseError(path.string() + ": " + e.what(), e.byte);
  }
  return parse_config(j);
}

json config_to_json(const StreamConfig& c) {
  json j;
  j["dim"] = c.dim;
  j["tokens_per_frame"] = c.tokens_per_frame;
  j["audio_tokens_per_frame"] = c.audio_tokens_per_frame;
  j["frame_rate"] = c.frame_rate;
  j["batch_size"] = c.batch_size;
  j["memory_budget"] = c.memory_budget;
  j["frames"] = c.frames;
  j["pairs"] = c.pairs;
  j["token_std"] = c.token_std;
  j["seed"] = c.seed;
  j["precision"] = to_string(c.precision);
  j["optimizer"] = {{"kind", to_string(c.optimizer.kind)},
                    {"cg_iters", c.optimizer.cg.max_iters},
                    {"curvature", to_string(c.optimizer.cg.curvature)},
                    {"damping", c.optimizer.cg.damping},
                    {"early_stop", c.optimizer.cg.early_stop},
                    {"ns_iters", c.optimizer.ns_iters},
                    {"muon_eta", c.optimizer.muon_eta},
                    {"base_lr", c.base_lr}};
  j["ttt"] = {{"heads", c.ttt_heads}, {"hidden", c.ttt_hidden}, {"projection_noise", c.projection_noise}};
  j["reader"] = {{"chunk", c.reader_chunk}, {"avg_tokens", c.reader_avg_tokens}};
  j["stack"] = {{"layers", c.stack_layers}, {"heads", c.stack_heads}};
  return j;
}

}  // namespace fastmem
