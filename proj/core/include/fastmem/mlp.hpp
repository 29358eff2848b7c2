// SPDX-License-Identifier: Apache-2.0

#pragma once

#include <cstdint>
#include <span>
#include <vector>

#include "fastmem/matrix.hpp"

namespace fastmem {

enum class Activation : std::uint8_t { gelu, silu };

/// Which inner output the parameter Jacobian is taken of: z_MLP = f_MLP(x; W)
/// or z_LN = LN(f_MLP(x; W)).
enum class JacobianMode : std::uint8_t { mlp, ln };

/// Two-layer MLP: f_MLP(x) = w2ᵀ act(w1ᵀ x + b1) + b2.
///
/// Also used as the tangent/cotangent type of the fast weights, so it carries
/// the vector-space operations CG needs (see dot/axpy below).
template <typename T>
struct MlpParams {
  Matrix<T> w1;  ///< d_in x d_hidden
  std::vector<T> b1;
  Matrix<T> w2;  ///< d_hidden x d_out
  std::vector<T> b2;
  Activation activation = Activation::gelu;

  static MlpParams zeros(std::size_t d_in, std::size_t d_hidden, std::size_t d_out,
                         Activation act = Activation::gelu);
  MlpParams zeros_like() const { return zeros(d_in(), d_hidden(), d_out(), activation); }

  std::size_t d_in() const noexcept { return w1.rows(); }
  std::size_t d_hidden() const noexcept { return w1.cols(); }
  std::size_t d_out() const noexcept { return w2.cols(); }
  std::size_t parameter_count() const noexcept {
    return w1.size() + b1.size() + w2.size() + b2.size();
  }

  /// Throws DimensionError on inconsistent shapes or d_out != d_in.
  void validate_shapes() const;
  bool same_shape(const MlpParams& other) const noexcept;
  bool all_finite() const noexcept;

  friend bool operator==(const MlpParams&, const MlpParams&) = default;
};

template <typename T>
T dot(const MlpParams<T>& a, const MlpParams<T>& b);

/// y += alpha * x
template <typename T>
void axpy(T alpha, const MlpParams<T>& x, MlpParams<T>& y);

template <typename T>
void scale(MlpParams<T>& x, T alpha);

template <typename T>
T norm(const MlpParams<T>& x);

/// Concatenation w1, b1, w2, b2 (row-major matrices).
template <typename T>
std::vector<T> flatten(const MlpParams<T>& p);

template <typename T>
MlpParams<T> unflatten(std::span<const T> flat, const MlpParams<T>& like);

template <typename T>
struct LayerNormParams {
  std::vector<T> gain;
  std::vector<T> bias;
  T epsilon = T(1e-6);

  static LayerNormParams identity(std::size_t d, T epsilon = T(1e-6));
  std::size_t dim() const noexcept { return gain.size(); }
  LayerNormParams slice(std::size_t first, std::size_t count) const;
};

template <typename T>
struct LayerNormResult {
  std::vector<T> y;
  T mean{};
  T variance{};  ///< population variance
};

template <typename T>
LayerNormResult<T> layer_norm_forward(std::span<const T> x, const LayerNormParams<T>& p);

/// Forward activations of f(x; W) = x + LN(f_MLP(x; W)) for a batch of rows,
/// kept for the Jacobian products.
template <typename T>
struct MlpBatchTrace {
  Matrix<T> input;       ///< n x d_in
  Matrix<T> pre;         ///< n x d_hidden, w1ᵀx + b1
  Matrix<T> hidden;      ///< act(pre)
  Matrix<T> inner;       ///< z_MLP, n x d_out
  Matrix<T> normalized;  ///< (z - mean) * inv_std
  std::vector<T> inv_std;
  Matrix<T> ln_out;  ///< z_LN
  Matrix<T> output;  ///< input + ln_out
};

template <typename T>
MlpBatchTrace<T> mlp_trace(const Matrix<T>& inputs, const MlpParams<T>& w,
                           const LayerNormParams<T>& ln);

template <typename T>
Matrix<T> mlp_forward_batch(const Matrix<T>& inputs, const MlpParams<T>& w,
                            const LayerNormParams<T>& ln);

template <typename T>
std::vector<T> mlp_forward(std::span<const T> x, const MlpParams<T>& w,
                           const LayerNormParams<T>& ln);

/// Row-wise ∇_W z · v over a traced batch.
template <typename T>
Matrix<T> jvp_params_batch(const MlpBatchTrace<T>& trace, const MlpParams<T>& w,
                           const LayerNormParams<T>& ln, const MlpParams<T>& v, JacobianMode mode);

/// Σ_rows (∇_W z)ᵀ u_row over a traced batch.
template <typename T>
MlpParams<T> vjp_params_batch(const MlpBatchTrace<T>& trace, const MlpParams<T>& w,
                              const LayerNormParams<T>& ln, const Matrix<T>& cotangents,
                              JacobianMode mode);

template <typename T>
std::vector<T> mlp_jvp_params(std::span<const T> x, const MlpParams<T>& w,
                              const LayerNormParams<T>& ln, const MlpParams<T>& v,
                              JacobianMode mode);

template <typename T>
MlpParams<T> mlp_vjp_params(std::span<const T> x, const MlpParams<T>& w,
                            const LayerNormParams<T>& ln, std::span<const T> u, JacobianMode mode);

/// (∂f/∂x)ᵀ u for the full residual map f(x; W).
template <typename T>
std::vector<T> mlp_vjp_input(std::span<const T> x, const MlpParams<T>& w,
                             const LayerNormParams<T>& ln, std::span<const T> u);

/// Σ_i η_i ‖f(k_i; W) − v_i‖².
template <typename T>
T mlp_weighted_loss(const Matrix<T>& keys, const Matrix<T>& targets, std::span<const T> weights,
                    const MlpParams<T>& w, const LayerNormParams<T>& ln);

template <typename T>
struct LossGrad {
  T loss{};
  MlpParams<T> grad;
};

template <typename T>
LossGrad<T> mlp_loss_and_grad(const Matrix<T>& keys, const Matrix<T>& targets,
                              std::span<const T> weights, const MlpParams<T>& w,
                              const LayerNormParams<T>& ln);

/// ∇_W Σ_i η_i ‖f(k_i; W) − v_i‖².
template <typename T>
MlpParams<T> mlp_loss_grad(const Matrix<T>& keys, const Matrix<T>& targets,
                           std::span<const T> weights, const MlpParams<T>& w,
                           const LayerNormParams<T>& ln);

/// Multiply-add count of one Gauss-Newton product per token (one JVP plus one
/// VJP), used to compare curvature choices without timing.
std::uint64_t gn_matvec_flops(std::size_t d_in, std::size_t d_hidden, std::size_t d_out,
                              JacobianMode mode);

}  // namespace fastmem
