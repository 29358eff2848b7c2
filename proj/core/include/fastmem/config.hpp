// SPDX-License-Identifier: Apache-2.0

#pragma once

#include <cstddef>
#include <cstdint>
#include <filesystem>
#include <string>
#include <string_view>

#include <nlohmann/json.hpp>

#include "fastmem/optimizers.hpp"
#include "fastmem/reader.hpp"

namespace fastmem {

enum class Precision : std::uint8_t { f32, f64 };

const char* to_string(Precision p) noexcept;
Precision parse_precision(std::string_view s);
OptimizerKind parse_optimizer_kind(std::string_view s);
JacobianMode parse_curvature(std::string_view s);

/// Run configuration shared by every harness entry point.
struct StreamConfig {
  std::size_t dim = 64;
  std::size_t tokens_per_frame = 16;      ///< K
  std::size_t audio_tokens_per_frame = 0;
  std::string frame_rate = "1fps";        ///< metadata tag only
  std::size_t batch_size = 32;            ///< b
  std::size_t memory_budget = 256;        ///< N
  std::size_t frames = 64;

  OptimizerSpec optimizer;
  double base_lr = 1e-4;  ///< η base of the token learning rates

  std::size_t ttt_heads = 2;
  std::size_t ttt_hidden = 0;  ///< 0 selects 4 · head_dim
  double projection_noise = 0.1;
  double token_std = 1.0;
  std::size_t pairs = 20;

  std::size_t reader_chunk = 64;       ///< m
  std::size_t reader_avg_tokens = 64;  ///< M
  std::size_t stack_layers = 4;
  std::size_t stack_heads = 4;

  std::uint64_t seed = 0;
  Precision precision = Precision::f64;

  std::size_t hidden() const noexcept {
    return ttt_hidden != 0 ? ttt_hidden : 4 * (dim / (ttt_heads == 0 ? 1 : ttt_heads));
  }
  ReaderBudget reader_budget() const {
    return {reader_chunk, reader_avg_tokens, memory_budget};
  }
  ToyStackConfig stack_config() const;

  /// Throws ContractError when a count is zero or shapes do not divide.
  void validate() const;
};

/// Keys may be nested objects or dotted names ("optimizer.kind"). Unknown keys
/// raise ContractError. `optimizer.eta` sets the step size of the selected
/// optimizer kind: muon_eta for muon, base_lr otherwise.
StreamConfig parse_config(const nlohmann::json& j, StreamConfig base = {});
StreamConfig load_config(const std::filesystem::path& path);
nlohmann::json config_to_json(const StreamConfig& c);

}  // namespace fastmem
