// SPDX-License-Identifier: Apache-2.0

#include "fastmem/optimizers.hpp"

#include <array>
#include <cmath>

namespace fastmem {

namespace {

// Odd quintic p(σ) = aσ + bσ³ + cσ⁵ per step. Each of the first five rows is
// the minimax fit of p ≈ 1 over the interval reached by the previous step,
// starting from [5e-3, 1]; after five steps every σ in that range lies within
// 3.6e-4 of 1.
constexpr std::array<std::array<double, 3>, 5> kNsSchedule{{
    {8.2987073002273224, -24.430520771066224, 18.09032298815286},
    {3.9152432719516375, -2.9211523876705017, 0.55922765418077691},
    {3.1746478645234579, -2.3804676311113395, 0.4978307243539975},
    {2.1894938389128855, -1.567250325789177, 0.40789073831038813},
    {1.8822810823875404, -1.2580664992453316, 0.37580754842127617},
}};
// Third-order polish, fixed point at σ = 1.
constexpr std::array<double, 3> kNsPolish{1.875, -1.25, 0.375};

template <typename T>
bool is_zero(std::span<const T> s) {
  for (T v : s)
    if (v != T(0)) return false;
  return true;
}

template <typename T>
Matrix<T> scaled(const Matrix<T>& m, T alpha) {
  Matrix<T> out = m;
  for (T& v : out.values()) v *= alpha;
  return out;
}

}  // namespace

const char* to_string(OptimizerKind k) noexcept {
  switch (k) {
    case OptimizerKind::sgd:
      return "sgd";
    case OptimizerKind::muon:
      return "muon";
    case OptimizerKind::hf:
      return "hf";
  }
  return "?";
}

const char* to_string(JacobianMode m) noexcept {
  return m == JacobianMode::mlp ? "mlp" : "ln";
}

const char* to_string(CgStopReason r) noexcept {
  switch (r) {
    case CgStopReason::max_iterations:
      return "max_iterations";
    case CgStopReason::zero_gradient:
      return "zero_gradient";
    case CgStopReason::converged:
      return "converged";
    case CgStopReason::indicator_increase:
      return "indicator_increase";
    case CgStopReason::nonpositive_curvature:
      return "nonpositive_curvature";
  }
  return "?";
}

void OptimizerSpec::validate() const {
  if (cg.max_iters < 1) throw ContractError("CG iteration cap must be >= 1");
  if (!(cg.damping >= 0.0)) throw ContractError("damping must be >= 0");
  if (ns_iters < 1) throw ContractError("Newton-Schulz iteration count must be >= 1");
  if (!(muon_eta >= 0.0)) throw ContractError("muon eta must be >= 0");
}

template <typename T>
MlpParams<T> sgd_update(const MlpParams<T>& grad) {
  if (!grad.all_finite()) throw NumericError("sgd_update: non-finite gradient");
  MlpParams<T> delta = grad;
  scale(delta, T(-1));
  return delta;
}

template <typename T>
Matrix<T> newton_schulz(const Matrix<T>& m, std::size_t iters) {
  if (iters < 1) throw ContractError("newton_schulz: iters must be >= 1");
  const T fro = frobenius_norm(m);
  if (fro == T(0)) throw ContractError("newton_schulz: zero matrix has no orthogonal factor");
  if (!std::isfinite(fro)) throw NumericError("newton_schulz: non-finite input");

  const bool tall = m.rows() > m.cols();
  Matrix<T> x = tall ? transpose(m) : m;
  for (T& v : x.values()) v /= fro;

  for (std::size_t k = 0; k < iters; ++k) {
    const auto& c = k < kNsSchedule.size() ? kNsSchedule[k] : kNsPolish;
    const Matrix<T> a = matmul_transposed(x, x);  // X Xᵀ
    Matrix<T> poly = matmul(a, a);
    for (std::size_t i = 0; i < poly.size(); ++i) {
      poly.values()[i] = static_cast<T>(c[2]) * poly.values()[i] +
                         static_cast<T>(c[1]) * a.values()[i];
    }
    Matrix<T> next = matmul(poly, x);
    for (std::size_t i = 0; i < next.size(); ++i) {
      next.values()[i] += static_cast<T>(c[0]) * x.values()[i];
    }
    x = std::move(next);
  }
  return tall ? transpose(x) : x;
}

template <typename T>
MlpParams<T> muon_update(const MlpParams<T>& grad, const OptimizerSpec& spec) {
  spec.validate();
  MlpParams<T> delta = sgd_update(grad);  // biases keep the SGD step
  const T eta = static_cast<T>(spec.muon_eta);
  auto orthogonal_step = [&](const Matrix<T>& g) {
    if (is_zero<T>(g.values()) || eta == T(0)) return Matrix<T>(g.rows(), g.cols());
    // −η · NS(−ΔW_SGD) with ΔW_SGD = −g.
    return scaled(newton_schulz(g, spec.ns_iters), -eta);
  };
  delta.w1 = orthogonal_step(grad.w1);
  delta.w2 = orthogonal_step(grad.w2);
  return delta;
}

template <typename T>
GaussNewtonOperator<T>::GaussNewtonOperator(const Matrix<T>& keys, std::span<const T> weights,
                                            const MlpParams<T>& w, const LayerNormParams<T>& ln,
                                            JacobianMode curvature, double damping)
    : trace_(mlp_trace(keys, w, ln)),
      weights_(weights.begin(), weights.end()),
      w_(w),
      ln_(ln),
      curvature_(curvature),
      damping_(static_cast<T>(damping)) {
  if (weights_.size() != keys.rows()) throw DimensionError("GN operator: one weight per token");
  if (!(damping >= 0.0)) throw ContractError("GN operator: damping must be >= 0");
}

template <typename T>
MlpParams<T> GaussNewtonOperator<T>::operator()(const MlpParams<T>& v) const {
  ++products_;
  Matrix<T> jv = jvp_params_batch(trace_, w_, ln_, v, curvature_);
  for (std::size_t i = 0; i < jv.rows(); ++i) {
    const T s = T(2) * weights_[i];
    for (T& e : jv.row(i)) e *= s;
  }
  MlpParams<T> out = vjp_params_batch(trace_, w_, ln_, jv, curvature_);
  if (damping_ != T(0)) axpy(damping_, v, out);
  return out;
}

template <typename T>
MlpParams<T> gn_matvec(const Matrix<T>& keys, std::span<const T> weights, const MlpParams<T>& w,
                       const LayerNormParams<T>& ln, const MlpParams<T>& v, JacobianMode curvature,
                       double damping) {
  return GaussNewtonOperator<T>(keys, weights, w, ln, curvature, damping)(v);
}

template <typename T>
double cg_stop_indicator(const MlpParams<T>& x, const GaussNewtonOperator<T>& b,
                         const MlpParams<T>& grad) {
  return quadratic_model(x, b(x), grad);
}

template <typename T>
HfResult<T> hf_update_from_grad(const MlpParams<T>& grad, const Matrix<T>& keys,
                                std::span<const T> weights, const MlpParams<T>& w,
                                const LayerNormParams<T>& ln, const CgConfig& cfg) {
  if (cfg.max_iters < 1) throw ContractError("CG iteration cap must be >= 1");
  if (!grad.all_finite()) throw NumericError("hf_update: non-finite gradient");
  const GaussNewtonOperator<T> op(keys, weights, w, ln, cfg.curvature, cfg.damping);
  HfResult<T> out;
  MlpParams<T> x = conjugate_gradient(grad, op, cfg.max_iters, out.trace,
                                      StopIndicator<MlpParams<T>>(quadratic_model<MlpParams<T>>),
                                      cfg.early_stop);
  if (!x.all_finite()) throw NumericError("hf_update: non-finite CG iterate");
  scale(x, T(-1));
  out.delta = std::move(x);
  return out;
}

template <typename T>
HfResult<T> hf_update(const Matrix<T>& keys, const Matrix<T>& targets, std::span<const T> weights,
                      const MlpParams<T>& w, const LayerNormParams<T>& ln, const CgConfig& cfg) {
  return hf_update_from_grad(mlp_loss_grad(keys, targets, weights, w, ln), keys, weights, w, ln,
                             cfg);
}

#define FASTMEM_INSTANTIATE(T)                                                                   \
  template MlpParams<T> sgd_update(const MlpParams<T>&);                                         \
  template Matrix<T> newton_schulz(const Matrix<T>&, std::size_t);                               \
  template MlpParams<T> muon_update(const MlpParams<T>&, const OptimizerSpec&);                  \
  template class GaussNewtonOperator<T>;                                                         \
  template MlpParams<T> gn_matvec(const Matrix<T>&, std::span<const T>, const MlpParams<T>&,     \
                                  const LayerNormParams<T>&, const MlpParams<T>&, JacobianMode,  \
                                  double);                                                       \
  template double cg_stop_indicator(const MlpParams<T>&, const GaussNewtonOperator<T>&,          \
                                    const MlpParams<T>&);                                        \
  template HfResult<T> hf_update(const Matrix<T>&, const Matrix<T>&, std::span<const T>,         \
                                 const MlpParams<T>&, const LayerNormParams<T>&,                 \
                                 const CgConfig&);                                               \
  template HfResult<T> hf_update_from_grad(const MlpParams<T>&, const Matrix<T>&,                \
                                           std::span<const T>, const MlpParams<T>&,              \
                                           const LayerNormParams<T>&, const CgConfig&);

FASTMEM_INSTANTIATE(float)
FASTMEM_INSTANTIATE(double)

#undef FASTMEM_INSTANTIATE

}  // namespace fastmem
