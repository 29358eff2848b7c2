// SPDX-License-Identifier: Apache-2.0

#include "fastmem/ttt.hpp"

#include <cmath>
#include <random>
#include <string>

namespace fastmem {

namespace {

template <typename T>
T sigmoid(T x) {
  return T(1) / (T(1) + std::exp(-x));
}

template <typename T>
void require_visual(const TokenBatch<T>& batch) {
  if (batch.modality.size() != batch.tokens.rows()) {
    throw DimensionError("token batch: one modality tag per row required");
  }
  for (Modality m : batch.modality) {
    if (m != Modality::visual) {
      throw ContractError("audio tokens bypass the TTT layer and must not enter it");
    }
  }
}

/// Rows projected by θ (θ·x per row) and split into head blocks.
template <typename T>
std::vector<Matrix<T>> project_heads(const Matrix<T>& tokens, const Matrix<T>& theta,
                                     std::size_t heads) {
  if (tokens.cols() != theta.cols()) throw DimensionError("token width does not match layer dim");
  const Matrix<T> projected = matmul_transposed(tokens, theta);
  const std::size_t dh = theta.rows() / heads;
  std::vector<Matrix<T>> out;
  out.reserve(heads);
  for (std::size_t h = 0; h < heads; ++h) out.push_back(column_block(projected, h * dh, dh));
  return out;
}

template <typename T>
T sum_of_squares(std::span<const T> s) {
  T acc{0};
  for (T v : s) acc += v * v;
  return acc;
}

template <typename T>
StepResult<T> step_impl(const TokenBatch<T>& key_batch, const Matrix<T>& value_tokens,
                        const FastWeights<T>& w, const TttLayerParams<T>& layer,
                        const OptimizerSpec& opt, const StepOptions& options) {
  layer.validate();
  opt.validate();
  require_visual(key_batch);
  const Matrix<T>& keys = key_batch.tokens;
  if (value_tokens.rows() != keys.rows() || value_tokens.cols() != keys.cols()) {
    throw DimensionError("key and value token matrices differ in shape");
  }
  if (w.heads.size() != layer.heads) throw DimensionError("fast weights head count mismatch");

  const std::vector<T> eta = token_learning_rates(key_batch, layer);

  StepResult<T> out;
  out.metrics.step = w.step;
  out.metrics.loss_before =
      static_cast<double>(paired_reconstruction_loss<T>(keys, value_tokens, eta, layer, w));

  std::vector<MlpParams<T>> delta =
      compute_update<T>(keys, value_tokens, eta, w, layer, opt, &out.cg_traces);
  double dnorm = update_norm(delta);
  if (options.enforce_update_norm) {
    const double target = *options.enforce_update_norm;
    if (!(target >= 0.0)) throw ContractError("enforced update norm must be >= 0");
    if (dnorm > 0.0) {
      for (auto& d : delta) scale(d, static_cast<T>(target / dnorm));
      dnorm = update_norm(delta);
    }
  }
  if (!std::isfinite(dnorm)) throw NumericError("ttt_step: non-finite update; state unchanged");

  out.weights = apply_update(w, delta);
  if (!out.weights.all_finite()) throw NumericError("ttt_step: non-finite weights after update");
  out.weights.step = w.step + 1;

  out.metrics.update_norm = dnorm;
  out.metrics.loss_after = static_cast<double>(
      paired_reconstruction_loss<T>(keys, value_tokens, eta, layer, out.weights));
  for (const auto& tr : out.cg_traces) {
    out.metrics.cg_iterations = std::max(out.metrics.cg_iterations, tr.iterations);
  }

  const Matrix<T> before = ttt_raw_output(keys, layer, w);
  const Matrix<T> after = ttt_raw_output(keys, layer, out.weights);
  double diff = 0.0;
  for (std::size_t i = 0; i < after.size(); ++i) {
    const double e = static_cast<double>(after.values()[i]) - before.values()[i];
    diff += e * e;
  }
  const double base = std::sqrt(static_cast<double>(sum_of_squares<T>(before.values())));
  out.metrics.relative_output_change = base > 0.0 ? std::sqrt(diff) / base : 0.0;

  out.output = ttt_output(key_batch, layer, out.weights);
  return out;
}

}  // namespace

template <typename T>
void TttLayerParams<T>::validate() const {
  const std::size_t d = dim();
  if (heads == 0 || d % heads != 0) {
    throw ContractError("layer dim " + std::to_string(d) + " not divisible by heads " +
                        std::to_string(heads));
  }
  if (!(base_lr > T(0))) throw ContractError("base learning rate must be positive");
  if (hidden == 0) throw ContractError("MLP hidden width must be positive");
  for (const Matrix<T>* m : {&theta_q, &theta_k, &theta_v}) {
    if (m->rows() != d || m->cols() != d) throw DimensionError("projection must be d x d");
  }
  if (ln.dim() != d || gate_w.size() != d || lr_w.size() != d) {
    throw DimensionError("layer norm / gate / learning-rate vectors must have length d");
  }
}

template <typename T>
TttLayerParams<T> TttLayerParams<T>::make(std::size_t d, std::size_t heads, std::size_t hidden,
                                          std::uint64_t seed, T base_lr, T projection_noise) {
  std::mt19937_64 rng(seed);
  std::normal_distribution<double> normal(0.0, 1.0);
  const double s = static_cast<double>(projection_noise) / std::sqrt(static_cast<double>(d));
  auto near_identity = [&] {
    Matrix<T> m = Matrix<T>::identity(d);
    for (T& v : m.values()) v += static_cast<T>(s * normal(rng));
    return m;
  };
  TttLayerParams p;
  p.theta_q = near_identity();
  p.theta_k = near_identity();
  p.theta_v = near_identity();
  p.ln = LayerNormParams<T>::identity(d);
  p.gate_w.assign(d, T(0));
  p.lr_w.assign(d, T(0));
  p.base_lr = base_lr;
  p.heads = heads;
  p.hidden = hidden;
  p.validate();
  return p;
}

template <typename T>
bool FastWeights<T>::all_finite() const noexcept {
  for (const auto& h : heads)
    if (!h.all_finite()) return false;
  return true;
}

template <typename T>
std::size_t FastWeights<T>::parameter_count() const noexcept {
  std::size_t n = 0;
  for (const auto& h : heads) n += h.parameter_count();
  return n;
}

template <typename T>
std::size_t FastWeights<T>::footprint_bytes() const noexcept {
  std::size_t n = heads.capacity() * sizeof(MlpParams<T>);
  for (const auto& h : heads) {
    n += (h.w1.storage().capacity() + h.b1.capacity() + h.w2.storage().capacity() +
          h.b2.capacity()) *
         sizeof(T);
  }
  return n;
}

template <typename T>
double weights_distance(const FastWeights<T>& a, const FastWeights<T>& b) {
  if (a.heads.size() != b.heads.size()) throw DimensionError("head count mismatch");
  double acc = 0.0;
  for (std::size_t h = 0; h < a.heads.size(); ++h) {
    const auto fa = flatten(a.heads[h]);
    const auto fb = flatten(b.heads[h]);
    if (fa.size() != fb.size()) throw DimensionError("head shape mismatch");
    for (std::size_t i = 0; i < fa.size(); ++i) {
      const double e = static_cast<double>(fa[i]) - fb[i];
      acc += e * e;
    }
  }
  return std::sqrt(acc);
}

template <typename T>
FastWeights<T> init_fast_weights(const TttLayerParams<T>& layer, std::uint64_t seed) {
  layer.validate();
  std::mt19937_64 rng(seed);
  std::normal_distribution<double> normal(0.0, init_weight_std(layer.hidden));
  FastWeights<T> w;
  const std::size_t dh = layer.head_dim();
  for (std::size_t h = 0; h < layer.heads; ++h) {
    auto p = MlpParams<T>::zeros(dh, layer.hidden, dh, layer.activation);
    for (T& v : p.w1.values()) v = static_cast<T>(normal(rng));
    for (T& v : p.w2.values()) v = static_cast<T>(normal(rng));
    w.heads.push_back(std::move(p));
  }
  return w;
}

template <typename T>
std::vector<T> token_learning_rates(const TokenBatch<T>& batch, const TttLayerParams<T>& layer) {
  if (batch.tokens.cols() != layer.lr_w.size()) throw DimensionError("token width mismatch");
  std::vector<T> eta(batch.tokens.rows());
  for (std::size_t i = 0; i < eta.size(); ++i) {
    eta[i] = layer.base_lr * sigmoid(dot<T>(batch.tokens.row(i), layer.lr_w) + layer.lr_b);
  }
  return eta;
}

template <typename T>
T paired_reconstruction_loss(const Matrix<T>& key_tokens, const Matrix<T>& value_tokens,
                             std::span<const T> eta, const TttLayerParams<T>& layer,
                             const FastWeights<T>& w) {
  if (w.heads.size() != layer.heads) throw DimensionError("fast weights head count mismatch");
  const auto k = project_heads(key_tokens, layer.theta_k, layer.heads);
  const auto v = project_heads(value_tokens, layer.theta_v, layer.heads);
  const std::size_t dh = layer.head_dim();
  T loss{0};
  for (std::size_t h = 0; h < layer.heads; ++h) {
    loss += mlp_weighted_loss<T>(k[h], v[h], eta, w.heads[h], layer.ln.slice(h * dh, dh));
  }
  return loss;
}

template <typename T>
T reconstruction_loss(const TokenBatch<T>& batch, std::span<const T> eta,
                      const TttLayerParams<T>& layer, const FastWeights<T>& w) {
  require_visual(batch);
  return paired_reconstruction_loss(batch.tokens, batch.tokens, eta, layer, w);
}

template <typename T>
Matrix<T> ttt_raw_output(const Matrix<T>& tokens, const TttLayerParams<T>& layer,
                         const FastWeights<T>& w) {
  return ttt_apply(tokens, layer.theta_q, layer, w);
}

template <typename T>
Matrix<T> ttt_apply(const Matrix<T>& tokens, const Matrix<T>& theta,
                    const TttLayerParams<T>& layer, const FastWeights<T>& w) {
  if (w.heads.size() != layer.heads) throw DimensionError("fast weights head count mismatch");
  if (theta.rows() != layer.dim() || theta.cols() != layer.dim()) {
    throw DimensionError("projection must be d x d");
  }
  const auto q = project_heads(tokens, theta, layer.heads);
  const std::size_t dh = layer.head_dim();
  Matrix<T> out(tokens.rows(), layer.dim());
  for (std::size_t h = 0; h < layer.heads; ++h) {
    set_column_block(out, h * dh,
                     mlp_forward_batch(q[h], w.heads[h], layer.ln.slice(h * dh, dh)));
  }
  return out;
}

template <typename T>
Matrix<T> ttt_output(const TokenBatch<T>& batch, const TttLayerParams<T>& layer,
                     const FastWeights<T>& w) {
  require_visual(batch);
  Matrix<T> z = ttt_raw_output(batch.tokens, layer, w);
  for (std::size_t i = 0; i < z.rows(); ++i) {
    const auto x = batch.tokens.row(i);
    const T alpha = sigmoid(dot<T>(x, layer.gate_w) + layer.gate_b);
    auto zi = z.row(i);
    for (std::size_t c = 0; c < zi.size(); ++c) zi[c] = alpha * zi[c] + (T(1) - alpha) * x[c];
  }
  return z;
}

template <typename T>
std::vector<MlpParams<T>> compute_update(const Matrix<T>& key_tokens,
                                         const Matrix<T>& value_tokens, std::span<const T> eta,
                                         const FastWeights<T>& w, const TttLayerParams<T>& layer,
                                         const OptimizerSpec& opt, std::vector<CgTrace>* traces) {
  const auto k = project_heads(key_tokens, layer.theta_k, layer.heads);
  const auto v = project_heads(value_tokens, layer.theta_v, layer.heads);
  const std::size_t dh = layer.head_dim();
  std::vector<MlpParams<T>> delta;
  delta.reserve(layer.heads);
  if (traces) traces->clear();
  // One independent solve per head; heads never share state.
  for (std::size_t h = 0; h < layer.heads; ++h) {
    const auto ln = layer.ln.slice(h * dh, dh);
    const MlpParams<T> grad = mlp_loss_grad<T>(k[h], v[h], eta, w.heads[h], ln);
    switch (opt.kind) {
      case OptimizerKind::sgd:
        delta.push_back(sgd_update(grad));
        break;
      case OptimizerKind::muon:
        delta.push_back(muon_update(grad, opt));
        break;
      case OptimizerKind::hf: {
        auto r = hf_update_from_grad<T>(grad, k[h], eta, w.heads[h], ln, opt.cg);
        delta.push_back(std::move(r.delta));
        if (traces) traces->push_back(std::move(r.trace));
        break;
      }
    }
  }
  return delta;
}

template <typename T>
FastWeights<T> apply_update(const FastWeights<T>& w, const std::vector<MlpParams<T>>& delta, T s) {
  if (delta.size() != w.heads.size()) throw DimensionError("update head count mismatch");
  FastWeights<T> out = w;
  for (std::size_t h = 0; h < delta.size(); ++h) axpy(s, delta[h], out.heads[h]);
  return out;
}

template <typename T>
double update_norm(const std::vector<MlpParams<T>>& delta) {
  double acc = 0.0;
  for (const auto& d : delta) acc += static_cast<double>(dot(d, d));
  return std::sqrt(acc);
}

template <typename T>
StepResult<T> ttt_step(const TokenBatch<T>& batch, const FastWeights<T>& w,
                       const TttLayerParams<T>& layer, const OptimizerSpec& opt,
                       const StepOptions& options) {
  return step_impl(batch, batch.tokens, w, layer, opt, options);
}

template <typename T>
StepResult<T> ttt_step_paired(const TokenBatch<T>& keys, const Matrix<T>& value_tokens,
                              const FastWeights<T>& w, const TttLayerParams<T>& layer,
                              const OptimizerSpec& opt, const StepOptions& options) {
  return step_impl(keys, value_tokens, w, layer, opt, options);
}

#define FASTMEM_INSTANTIATE(T)                                                                  \
  template struct TttLayerParams<T>;                                                            \
  template struct FastWeights<T>;                                                               \
  template double weights_distance(const FastWeights<T>&, const FastWeights<T>&);               \
  template FastWeights<T> init_fast_weights(const TttLayerParams<T>&, std::uint64_t);           \
  template std::vector<T> token_learning_rates(const TokenBatch<T>&, const TttLayerParams<T>&); \
  template T reconstruction_loss(const TokenBatch<T>&, std::span<const T>,                      \
                                 const TttLayerParams<T>&, const FastWeights<T>&);              \
  template T paired_reconstruction_loss(const Matrix<T>&, const Matrix<T>&, std::span<const T>, \
                                        const TttLayerParams<T>&, const FastWeights<T>&);       \
  template Matrix<T> ttt_raw_output(const Matrix<T>&, const TttLayerParams<T>&,                 \
                                    const FastWeights<T>&);                                     \
  template Matrix<T> ttt_apply(const Matrix<T>&, const Matrix<T>&, const TttLayerParams<T>&,    \
                               const FastWeights<T>&);                                          \
  template Matrix<T> ttt_output(const TokenBatch<T>&, const TttLayerParams<T>&,                 \
                                const FastWeights<T>&);                                         \
  template std::vector<MlpParams<T>> compute_update(                                            \
      const Matrix<T>&, const Matrix<T>&, std::span<const T>, const FastWeights<T>&,            \
      const TttLayerParams<T>&, const OptimizerSpec&, std::vector<CgTrace>*);                   \
  template FastWeights<T> apply_update(const FastWeights<T>&, const std::vector<MlpParams<T>>&, \
                                       T);                                                      \
  template double update_norm(const std::vector<MlpParams<T>>&);                                \
  template StepResult<T> ttt_step(const TokenBatch<T>&, const FastWeights<T>&,                  \
                                  const TttLayerParams<T>&, const OptimizerSpec&,               \
                                  const StepOptions&);                                          \
  template StepResult<T> ttt_step_paired(const TokenBatch<T>&, const Matrix<T>&,                \
                                         const FastWeights<T>&, const TttLayerParams<T>&,       \
                                         const OptimizerSpec&, const StepOptions&);

FASTMEM_INSTANTIATE(float)
FASTMEM_INSTANTIATE(double)

#undef FASTMEM_INSTANTIATE

}  // namespace fastmem
