// SPDX-License-Identifier: Apache-2.0

#pragma once

#include <cstddef>
#include <cstdint>
#include <span>

#include "fastmem/cg.hpp"
#include "fastmem/matrix.hpp"
#include "fastmem/mlp.hpp"

namespace fastmem {

enum class OptimizerKind : std::uint8_t { sgd, muon, hf };

const char* to_string(OptimizerKind k) noexcept;
const char* to_string(JacobianMode m) noexcept;

struct CgConfig {
  std::size_t max_iters = 3;
  JacobianMode curvature = JacobianMode::mlp;
  double damping = 1e-4;
  bool early_stop = true;
};

/// Update rule for the fast weights. The SGD/HF step size lives in the
/// per-token learning rates (TttLayerParams::base_lr); Muon's update norm is
/// set by `muon_eta`.
struct OptimizerSpec {
  OptimizerKind kind = OptimizerKind::hf;
  double muon_eta = 0.02;
  CgConfig cg;
  std::size_t ns_iters = 5;

  static OptimizerSpec sgd() {
    OptimizerSpec s;
    s.kind = OptimizerKind::sgd;
    return s;
  }
  static OptimizerSpec muon(double eta, std::size_t ns_iters = 5) {
    OptimizerSpec s;
    s.kind = OptimizerKind::muon;
    s.muon_eta = eta;
    s.ns_iters = ns_iters;
    return s;
  }
  static OptimizerSpec hf(std::size_t cg_iters = 3, JacobianMode curvature = JacobianMode::mlp,
                          double damping = 1e-4) {
    OptimizerSpec s;
    s.kind = OptimizerKind::hf;
    s.cg.max_iters = cg_iters;
    s.cg.curvature = curvature;
    s.cg.damping = damping;
    return s;
  }

  /// Throws ContractError on max_iters == 0, damping < 0, ns_iters == 0 or
  /// negative muon_eta.
  void validate() const;
};

/// ΔW = −grad. The per-token learning rates are already folded into `grad`.
template <typename T>
MlpParams<T> sgd_update(const MlpParams<T>& grad);

/// Orthogonalises `m` with odd quintic Newton-Schulz steps after Frobenius
/// normalisation. The first five steps use a coefficient schedule designed for
/// singular values in [5e-3, 1]; later steps use the order-3 quintic with fixed
/// point 1. Throws ContractError for a zero matrix.
template <typename T>
Matrix<T> newton_schulz(const Matrix<T>& m, std::size_t iters = 5);

/// Per weight matrix ΔW = −η_muon · NS(grad); biases take the SGD step.
/// All-zero gradient matrices produce a zero update.
template <typename T>
MlpParams<T> muon_update(const MlpParams<T>& grad, const OptimizerSpec& spec);

/// Action of the damped Gauss-Newton matrix of the weighted squared loss,
///   B(v) = 2 Σ_i η_i J_iᵀ J_i v + λ v,
/// with J_i = ∇_W z_MLP (curvature mlp) or ∇_W z_LN (curvature ln) at token i.
/// The forward trace is computed once and reused across products.
template <typename T>
class GaussNewtonOperator {
 public:
  GaussNewtonOperator(const Matrix<T>& keys, std::span<const T> weights, const MlpParams<T>& w,
                      const LayerNormParams<T>& ln, JacobianMode curvature, double damping);

  MlpParams<T> operator()(const MlpParams<T>& v) const;

  std::size_t products() const noexcept { return products_; }

 private:
  MlpBatchTrace<T> trace_;
  std::vector<T> weights_;
  MlpParams<T> w_;
  LayerNormParams<T> ln_;
  JacobianMode curvature_;
  T damping_;
  mutable std::size_t products_ = 0;
};

template <typename T>
MlpParams<T> gn_matvec(const Matrix<T>& keys, std::span<const T> weights, const MlpParams<T>& w,
                       const LayerNormParams<T>& ln, const MlpParams<T>& v, JacobianMode curvature,
                       double damping);

/// Stop indicator of the HF update: the CG quadratic model ½ xᵀBx − gradᵀx.
template <typename T>
double cg_stop_indicator(const MlpParams<T>& x, const GaussNewtonOperator<T>& b,
                         const MlpParams<T>& grad);

template <typename T>
struct HfResult {
  MlpParams<T> delta;
  CgTrace trace;
};

/// Hessian-free update: CG on B x = ∇_W L(X, η; W) with x₀ = 0, returning
/// ΔW = −x.
template <typename T>
HfResult<T> hf_update(const Matrix<T>& keys, const Matrix<T>& targets, std::span<const T> weights,
                      const MlpParams<T>& w, const LayerNormParams<T>& ln, const CgConfig& cfg);

/// Same, with the gradient already computed.
template <typename T>
HfResult<T> hf_update_from_grad(const MlpParams<T>& grad, const Matrix<T>& keys,
                                std::span<const T> weights, const MlpParams<T>& w,
                                const LayerNormParams<T>& ln, const CgConfig& cfg);

}  // namespace fastmem
