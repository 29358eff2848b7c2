// SPDX-License-Identifier: Apache-2.0

#pragma once

#include <cmath>
#include <cstddef>
#include <cstdint>
#include <optional>
#include <vector>

#include "fastmem/matrix.hpp"
#include "fastmem/mlp.hpp"
#include "fastmem/optimizers.hpp"

namespace fastmem {

enum class Modality : std::uint8_t { visual = 0, audio = 1 };

/// One mini-batch X_t of consecutive tokens.
template <typename T>
struct TokenBatch {
  Matrix<T> tokens;  ///< b x d
  std::vector<Modality> modality;
  std::uint64_t stream_index = 0;

  static TokenBatch visual(Matrix<T> tokens, std::uint64_t index = 0) {
    TokenBatch b;
    b.modality.assign(tokens.rows(), Modality::visual);
    b.tokens = std::move(tokens);
    b.stream_index = index;
    return b;
  }
};

/// Slow (frozen) parameters of the layer: projections, gate, token learning
/// rate head and the layer norm inside f.
template <typename T>
struct TttLayerParams {
  Matrix<T> theta_q, theta_k, theta_v;  ///< d x d; projections act as θ·x
  LayerNormParams<T> ln;                ///< length d, sliced per head
  std::vector<T> gate_w;
  T gate_b{0};
  std::vector<T> lr_w;
  T lr_b{0};
  T base_lr{1};
  std::size_t heads = 2;
  std::size_t hidden = 0;  ///< per-head MLP width
  Activation activation = Activation::gelu;

  std::size_t dim() const noexcept { return theta_q.rows(); }
  std::size_t head_dim() const noexcept { return dim() / heads; }

  /// Throws ContractError/DimensionError on inconsistent configuration.
  void validate() const;

  /// Projections = identity + N(0, projection_noise²/d) so an untrained layer
  /// roughly reconstructs its input; gate and learning-rate heads start at zero.
  static TttLayerParams make(std::size_t d, std::size_t heads, std::size_t hidden,
                             std::uint64_t seed, T base_lr = T(1), T projection_noise = T(0.1));
};

template <typename T>
struct FastWeights {
  std::vector<MlpParams<T>> heads;
  std::uint64_t step = 0;

  bool all_finite() const noexcept;
  std::size_t parameter_count() const noexcept;
  /// Bytes held by the parameter buffers (capacity, not size).
  std::size_t footprint_bytes() const noexcept;

  friend bool operator==(const FastWeights&, const FastWeights&) = default;
};

/// Frobenius norm over all heads of a − b.
template <typename T>
double weights_distance(const FastWeights<T>& a, const FastWeights<T>& b);

/// W₀ ~ N(0, (0.02/√hidden)²) for both weight matrices, zero biases.
template <typename T>
FastWeights<T> init_fast_weights(const TttLayerParams<T>& layer, std::uint64_t seed);

inline double init_weight_std(std::size_t hidden) {
  return 0.02 / std::sqrt(static_cast<double>(hidden));
}

/// η_i = base_lr · sigmoid(x_iᵀ lr_w + lr_b).
template <typename T>
std::vector<T> token_learning_rates(const TokenBatch<T>& batch, const TttLayerParams<T>& layer);

/// Σ_heads Σ_i η_i ‖f(θ_K x_i; W) − θ_V x_i‖². Audio tokens are rejected.
template <typename T>
T reconstruction_loss(const TokenBatch<T>& batch, std::span<const T> eta,
                      const TttLayerParams<T>& layer, const FastWeights<T>& w);

/// Same loss with separate key and value tokens (associative pairs).
template <typename T>
T paired_reconstruction_loss(const Matrix<T>& key_tokens, const Matrix<T>& value_tokens,
                             std::span<const T> eta, const TttLayerParams<T>& layer,
                             const FastWeights<T>& w);

/// f(θ_Q x; W) per head, concatenated; no gate.
template <typename T>
Matrix<T> ttt_raw_output(const Matrix<T>& tokens, const TttLayerParams<T>& layer,
                         const FastWeights<T>& w);

/// f(θ x; W) per head, concatenated, for an arbitrary d x d projection θ.
template <typename T>
Matrix<T> ttt_apply(const Matrix<T>& tokens, const Matrix<T>& theta,
                    const TttLayerParams<T>& layer, const FastWeights<T>& w);

/// Gated output z = α·f(θ_Q x; W) + (1 − α)·x, α = sigmoid(xᵀ gate_w + gate_b).
template <typename T>
Matrix<T> ttt_output(const TokenBatch<T>& batch, const TttLayerParams<T>& layer,
                     const FastWeights<T>& w);

struct StepMetrics {
  std::uint64_t step = 0;
  double loss_before = 0;
  double loss_after = 0;
  double update_norm = 0;
  double relative_output_change = 0;
  std::size_t cg_iterations = 0;  ///< max over heads
  double wall_time = 0;           ///< seconds; filled by the harness

  friend bool operator==(const StepMetrics&, const StepMetrics&) = default;
};

struct StepOptions {
  /// Rescale ΔW (all heads jointly) to this Frobenius norm.
  std::optional<double> enforce_update_norm;
};

template <typename T>
struct StepResult {
  Matrix<T> output;  ///< Z_t, computed with the updated weights
  FastWeights<T> weights;
  StepMetrics metrics;
  std::vector<CgTrace> cg_traces;  ///< one per head (HF only)
};

/// W_t = W_{t−1} + ΔW, then Z_t = ttt_output(X_t; W_t). Inputs are not
/// modified; a non-finite update raises NumericError.
template <typename T>
StepResult<T> ttt_step(const TokenBatch<T>& batch, const FastWeights<T>& w,
                       const TttLayerParams<T>& layer, const OptimizerSpec& opt,
                       const StepOptions& options = {});

/// Update from (key, value) token pairs: the loss pairs θ_K·key_i with θ_V·value_i.
/// The output is computed for the key tokens.
template <typename T>
StepResult<T> ttt_step_paired(const TokenBatch<T>& keys, const Matrix<T>& value_tokens,
                              const FastWeights<T>& w, const TttLayerParams<T>& layer,
                              const OptimizerSpec& opt, const StepOptions& options = {});

/// The natural update ΔW of the chosen optimizer (per head) without applying it.
template <typename T>
std::vector<MlpParams<T>> compute_update(const Matrix<T>& key_tokens,
                                         const Matrix<T>& value_tokens, std::span<const T> eta,
                                         const FastWeights<T>& w, const TttLayerParams<T>& layer,
                                         const OptimizerSpec& opt,
                                         std::vector<CgTrace>* traces = nullptr);

/// w + s·Δ per head.
template <typename T>
FastWeights<T> apply_update(const FastWeights<T>& w, const std::vector<MlpParams<T>>& delta,
                            T s = T(1));

template <typename T>
double update_norm(const std::vector<MlpParams<T>>& delta);

}  // namespace fastmem
