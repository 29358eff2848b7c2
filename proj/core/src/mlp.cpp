// SPDX-License-Identifier: Apache-2.0

#include "fastmem/mlp.hpp"

#include <cmath>
#include <numbers>

namespace fastmem {

namespace {

template <typename T>
T activate(T a, Activation act) {
  switch (act) {
    case Activation::gelu:
      return T(0.5) * a * (T(1) + std::erf(a / std::numbers::sqrt2_v<T>));
    case Activation::silu:
      return a / (T(1) + std::exp(-a));
  }
  return a;
}

template <typename T>
T activate_grad(T a, Activation act) {
  switch (act) {
    case Activation::gelu: {
      const T cdf = T(0.5) * (T(1) + std::erf(a / std::numbers::sqrt2_v<T>));
      const T pdf = std::exp(T(-0.5) * a * a) * std::numbers::inv_sqrtpi_v<T> /
                    std::numbers::sqrt2_v<T>;
      return cdf + a * pdf;
    }
    case Activation::silu: {
      const T s = T(1) / (T(1) + std::exp(-a));
      return s * (T(1) + a * (T(1) - s));
    }
  }
  return T(1);
}

template <typename T>
void add_bias_rows(Matrix<T>& m, const std::vector<T>& b) {
  for (std::size_t i = 0; i < m.rows(); ++i) {
    auto r = m.row(i);
    for (std::size_t j = 0; j < r.size(); ++j) r[j] += b[j];
  }
}

template <typename T>
std::vector<T> column_sums(const Matrix<T>& m) {
  std::vector<T> s(m.cols(), T(0));
  for (std::size_t i = 0; i < m.rows(); ++i) {
    auto r = m.row(i);
    for (std::size_t j = 0; j < r.size(); ++j) s[j] += r[j];
  }
  return s;
}

// Jacobian of LN (without the gain) applied to a row: inv_std·(dz − mean(dz) − n̂·mean(n̂⊙dz)).
// The map is symmetric, so the same routine serves the JVP and the VJP.
template <typename T>
void ln_core_apply(std::span<const T> normalized, T inv_std, std::span<T> dz) {
  const std::size_t d = dz.size();
  T mean_dz{0};
  T mean_ndz{0};
  for (std::size_t k = 0; k < d; ++k) {
    mean_dz += dz[k];
    mean_ndz += normalized[k] * dz[k];
  }
  mean_dz /= static_cast<T>(d);
  mean_ndz /= static_cast<T>(d);
  for (std::size_t k = 0; k < d; ++k) {
    dz[k] = inv_std * (dz[k] - mean_dz - normalized[k] * mean_ndz);
  }
}

template <typename T>
void check_ln(const LayerNormParams<T>& ln, std::size_t d) {
  if (ln.gain.size() != d || ln.bias.size() != d) {
    throw DimensionError("layer norm parameters have length " + std::to_string(ln.gain.size()) +
                         ", expected " + std::to_string(d));
  }
  if (!(ln.epsilon > T(0))) throw ContractError("layer norm epsilon must be positive");
}

template <typename T>
Matrix<T> single_row(std::span<const T> x) {
  return Matrix<T>::from_data(1, x.size(), std::vector<T>(x.begin(), x.end()), false);
}

template <typename T>
std::vector<T> first_row(const Matrix<T>& m) {
  auto r = m.row(0);
  return {r.begin(), r.end()};
}

}  // namespace

template <typename T>
MlpParams<T> MlpParams<T>::zeros(std::size_t d_in, std::size_t d_hidden, std::size_t d_out,
                                 Activation act) {
  MlpParams p;
  p.w1 = Matrix<T>(d_in, d_hidden);
  p.b1.assign(d_hidden, T(0));
  p.w2 = Matrix<T>(d_hidden, d_out);
  p.b2.assign(d_out, T(0));
  p.activation = act;
  return p;
}

template <typename T>
void MlpParams<T>::validate_shapes() const {
  if (b1.size() != w1.cols() || w2.rows() != w1.cols() || b2.size() != w2.cols()) {
    throw DimensionError("inconsistent MLP parameter shapes");
  }
  if (d_out() != d_in()) throw DimensionError("residual MLP requires d_out == d_in");
}

template <typename T>
bool MlpParams<T>::same_shape(const MlpParams& o) const noexcept {
  return w1.rows() == o.w1.rows() && w1.cols() == o.w1.cols() && b1.size() == o.b1.size() &&
         w2.rows() == o.w2.rows() && w2.cols() == o.w2.cols() && b2.size() == o.b2.size();
}

template <typename T>
bool MlpParams<T>::all_finite() const noexcept {
  auto finite = [](std::span<const T> s) {
    for (T v : s)
      if (!std::isfinite(v)) return false;
    return true;
  };
  return finite(w1.values()) && finite(b1) && finite(w2.values()) && finite(b2);
}

template <typename T>
T dot(const MlpParams<T>& a, const MlpParams<T>& b) {
  if (!a.same_shape(b)) throw DimensionError("dot: parameter shapes differ");
  return dot<T>(a.w1.values(), b.w1.values()) + dot<T>(a.b1, b.b1) +
         dot<T>(a.w2.values(), b.w2.values()) + dot<T>(a.b2, b.b2);
}

template <typename T>
void axpy(T alpha, const MlpParams<T>& x, MlpParams<T>& y) {
  if (!x.same_shape(y)) throw DimensionError("axpy: parameter shapes differ");
  auto go = [alpha](std::span<const T> src, std::span<T> dst) {
    for (std::size_t i = 0; i < src.size(); ++i) dst[i] += alpha * src[i];
  };
  go(x.w1.values(), y.w1.values());
  go(x.b1, y.b1);
  go(x.w2.values(), y.w2.values());
  go(x.b2, y.b2);
}

template <typename T>
void scale(MlpParams<T>& x, T alpha) {
  auto go = [alpha](std::span<T> s) {
    for (T& v : s) v *= alpha;
  };
  go(x.w1.values());
  go(x.b1);
  go(x.w2.values());
  go(x.b2);
}

template <typename T>
T norm(const MlpParams<T>& x) {
  return std::sqrt(dot(x, x));
}

template <typename T>
std::vector<T> flatten(const MlpParams<T>& p) {
  std::vector<T> out;
  out.reserve(p.parameter_count());
  out.insert(out.end(), p.w1.values().begin(), p.w1.values().end());
  out.insert(out.end(), p.b1.begin(), p.b1.end());
  out.insert(out.end(), p.w2.values().begin(), p.w2.values().end());
  out.insert(out.end(), p.b2.begin(), p.b2.end());
  return out;
}

template <typename T>
MlpParams<T> unflatten(std::span<const T> flat, const MlpParams<T>& like) {
  if (flat.size() != like.parameter_count()) throw DimensionError("unflatten: length mismatch");
  MlpParams<T> p = like.zeros_like();
  std::size_t at = 0;
  auto take = [&](std::span<T> dst) {
    std::copy_n(flat.begin() + static_cast<std::ptrdiff_t>(at), dst.size(), dst.begin());
    at += dst.size();
  };
  take(p.w1.values());
  take(p.b1);
  take(p.w2.values());
  take(p.b2);
  return p;
}

template <typename T>
LayerNormParams<T> LayerNormParams<T>::identity(std::size_t d, T epsilon) {
  return {std::vector<T>(d, T(1)), std::vector<T>(d, T(0)), epsilon};
}

template <typename T>
LayerNormParams<T> LayerNormParams<T>::slice(std::size_t first, std::size_t count) const {
  if (first + count > gain.size()) throw DimensionError("layer norm slice out of range");
  const auto f = static_cast<std::ptrdiff_t>(first);
  const auto e = static_cast<std::ptrdiff_t>(first + count);
  return {std::vector<T>(gain.begin() + f, gain.begin() + e),
          std::vector<T>(bias.begin() + f, bias.begin() + e), epsilon};
}

template <typename T>
LayerNormResult<T> layer_norm_forward(std::span<const T> x, const LayerNormParams<T>& p) {
  check_ln(p, x.size());
  LayerNormResult<T> r;
  const auto d = static_cast<T>(x.size());
  for (T v : x) r.mean += v;
  r.mean /= d;
  for (T v : x) r.variance += (v - r.mean) * (v - r.mean);
  r.variance /= d;
  const T inv_std = T(1) / std::sqrt(r.variance + p.epsilon);
  r.y.resize(x.size());
  for (std::size_t i = 0; i < x.size(); ++i) {
    r.y[i] = p.gain[i] * (x[i] - r.mean) * inv_std + p.bias[i];
  }
  return r;
}

template <typename T>
MlpBatchTrace<T> mlp_trace(const Matrix<T>& inputs, const MlpParams<T>& w,
                           const LayerNormParams<T>& ln) {
  w.validate_shapes();
  if (inputs.cols() != w.d_in()) throw DimensionError("mlp input width does not match d_in");
  check_ln(ln, w.d_out());

  MlpBatchTrace<T> t;
  t.input = inputs;
  t.pre = matmul(inputs, w.w1);
  add_bias_rows(t.pre, w.b1);
  t.hidden = t.pre;
  for (T& v : t.hidden.values()) v = activate(v, w.activation);
  t.inner = matmul(t.hidden, w.w2);
  add_bias_rows(t.inner, w.b2);

  const std::size_t n = inputs.rows();
  const std::size_t d = w.d_out();
  t.normalized = Matrix<T>(n, d);
  t.ln_out = Matrix<T>(n, d);
  t.output = Matrix<T>(n, d);
  t.inv_std.resize(n);
  for (std::size_t i = 0; i < n; ++i) {
    auto z = t.inner.row(i);
    T mean{0};
    for (T v : z) mean += v;
    mean /= static_cast<T>(d);
    T var{0};
    for (T v : z) var += (v - mean) * (v - mean);
    var /= static_cast<T>(d);
    const T inv_std = T(1) / std::sqrt(var + ln.epsilon);
    t.inv_std[i] = inv_std;
    for (std::size_t k = 0; k < d; ++k) {
      const T nk = (z[k] - mean) * inv_std;
      t.normalized(i, k) = nk;
      t.ln_out(i, k) = ln.gain[k] * nk + ln.bias[k];
      t.output(i, k) = inputs(i, k) + t.ln_out(i, k);
    }
  }
  return t;
}

template <typename T>
Matrix<T> mlp_forward_batch(const Matrix<T>& inputs, const MlpParams<T>& w,
                            const LayerNormParams<T>& ln) {
  return mlp_trace(inputs, w, ln).output;
}

template <typename T>
std::vector<T> mlp_forward(std::span<const T> x, const MlpParams<T>& w,
                           const LayerNormParams<T>& ln) {
  return first_row(mlp_forward_batch(single_row(x), w, ln));
}

template <typename T>
Matrix<T> jvp_params_batch(const MlpBatchTrace<T>& t, const MlpParams<T>& w,
                           const LayerNormParams<T>& ln, const MlpParams<T>& v, JacobianMode mode) {
  if (!v.same_shape(w)) throw DimensionError("jvp direction shape differs from parameters");
  Matrix<T> d_pre = matmul(t.input, v.w1);
  add_bias_rows(d_pre, v.b1);
  for (std::size_t i = 0; i < d_pre.rows(); ++i)
    for (std::size_t j = 0; j < d_pre.cols(); ++j)
      d_pre(i, j) *= activate_grad(t.pre(i, j), w.activation);

  Matrix<T> dz = matmul(d_pre, w.w2);
  const Matrix<T> dz_w = matmul(t.hidden, v.w2);
  for (std::size_t i = 0; i < dz.size(); ++i) dz.values()[i] += dz_w.values()[i];
  add_bias_rows(dz, v.b2);

  if (mode == JacobianMode::ln) {
    for (std::size_t i = 0; i < dz.rows(); ++i) {
      auto row = dz.row(i);
      ln_core_apply<T>(t.normalized.row(i), t.inv_std[i], row);
      for (std::size_t k = 0; k < row.size(); ++k) row[k] *= ln.gain[k];
    }
  }
  return dz;
}

template <typename T>
MlpParams<T> vjp_params_batch(const MlpBatchTrace<T>& t, const MlpParams<T>& w,
                              const LayerNormParams<T>& ln, const Matrix<T>& cotangents,
                              JacobianMode mode) {
  if (cotangents.rows() != t.input.rows() || cotangents.cols() != w.d_out()) {
    throw DimensionError("vjp cotangent shape mismatch");
  }
  Matrix<T> dz = cotangents;
  if (mode == JacobianMode::ln) {
    for (std::size_t i = 0; i < dz.rows(); ++i) {
      auto row = dz.row(i);
      for (std::size_t k = 0; k < row.size(); ++k) row[k] *= ln.gain[k];
      ln_core_apply<T>(t.normalized.row(i), t.inv_std[i], row);
    }
  }
  MlpParams<T> g;
  g.activation = w.activation;
  g.w2 = transposed_matmul(t.hidden, dz);
  g.b2 = column_sums(dz);
  Matrix<T> d_pre = matmul_transposed(dz, w.w2);
  for (std::size_t i = 0; i < d_pre.rows(); ++i)
    for (std::size_t j = 0; j < d_pre.cols(); ++j)
      d_pre(i, j) *= activate_grad(t.pre(i, j), w.activation);
  g.w1 = transposed_matmul(t.input, d_pre);
  g.b1 = column_sums(d_pre);
  return g;
}

template <typename T>
std::vector<T> mlp_jvp_params(std::span<const T> x, const MlpParams<T>& w,
                              const LayerNormParams<T>& ln, const MlpParams<T>& v,
                              JacobianMode mode) {
  const auto t = mlp_trace(single_row(x), w, ln);
  return first_row(jvp_params_batch(t, w, ln, v, mode));
}

template <typename T>
MlpParams<T> mlp_vjp_params(std::span<const T> x, const MlpParams<T>& w,
                            const LayerNormParams<T>& ln, std::span<const T> u, JacobianMode mode) {
  const auto t = mlp_trace(single_row(x), w, ln);
  return vjp_params_batch(t, w, ln, single_row(u), mode);
}

template <typename T>
std::vector<T> mlp_vjp_input(std::span<const T> x, const MlpParams<T>& w,
                             const LayerNormParams<T>& ln, std::span<const T> u) {
  const auto t = mlp_trace(single_row(x), w, ln);
  if (u.size() != w.d_out()) throw DimensionError("vjp cotangent length mismatch");
  std::vector<T> dz(u.begin(), u.end());
  for (std::size_t k = 0; k < dz.size(); ++k) dz[k] *= ln.gain[k];
  ln_core_apply<T>(t.normalized.row(0), t.inv_std[0], dz);

  std::vector<T> d_pre(w.d_hidden(), T(0));
  for (std::size_t j = 0; j < w.d_hidden(); ++j) {
    d_pre[j] = dot<T>(w.w2.row(j), dz) * activate_grad(t.pre(0, j), w.activation);
  }
  std::vector<T> dx(u.begin(), u.end());  // residual path
  for (std::size_t i = 0; i < w.d_in(); ++i) dx[i] += dot<T>(w.w1.row(i), d_pre);
  return dx;
}

template <typename T>
T mlp_weighted_loss(const Matrix<T>& keys, const Matrix<T>& targets, std::span<const T> weights,
                    const MlpParams<T>& w, const LayerNormParams<T>& ln) {
  if (keys.rows() != targets.rows() || keys.rows() != weights.size() ||
      targets.cols() != w.d_out()) {
    throw DimensionError("loss: keys, targets and weights disagree in shape");
  }
  const Matrix<T> out = mlp_forward_batch(keys, w, ln);
  T loss{0};
  for (std::size_t i = 0; i < out.rows(); ++i) {
    T s{0};
    for (std::size_t k = 0; k < out.cols(); ++k) {
      const T r = out(i, k) - targets(i, k);
      s += r * r;
    }
    loss += weights[i] * s;
  }
  return loss;
}

template <typename T>
LossGrad<T> mlp_loss_and_grad(const Matrix<T>& keys, const Matrix<T>& targets,
                              std::span<const T> weights, const MlpParams<T>& w,
                              const LayerNormParams<T>& ln) {
  if (keys.rows() != targets.rows() || keys.rows() != weights.size() ||
      targets.cols() != w.d_out()) {
    throw DimensionError("loss: keys, targets and weights disagree in shape");
  }
  for (T e : weights) {
    if (e < T(0)) throw ContractError("token weights must be nonnegative");
  }
  const auto t = mlp_trace(keys, w, ln);
  LossGrad<T> out;
  Matrix<T> cot(keys.rows(), w.d_out());
  for (std::size_t i = 0; i < keys.rows(); ++i) {
    T s{0};
    for (std::size_t k = 0; k < w.d_out(); ++k) {
      const T r = t.output(i, k) - targets(i, k);
      s += r * r;
      cot(i, k) = T(2) * weights[i] * r;
    }
    out.loss += weights[i] * s;
  }
  out.grad = vjp_params_batch(t, w, ln, cot, JacobianMode::ln);
  return out;
}

template <typename T>
MlpParams<T> mlp_loss_grad(const Matrix<T>& keys, const Matrix<T>& targets,
                           std::span<const T> weights, const MlpParams<T>& w,
                           const LayerNormParams<T>& ln) {
  return mlp_loss_and_grad(keys, targets, weights, w, ln).grad;
}

std::uint64_t gn_matvec_flops(std::size_t d_in, std::size_t d_hidden, std::size_t d_out,
                              JacobianMode mode) {
  // JVP: x·dW1, act', dH·W2 + H·dW2, biases. VJP: outer products and W2·dz.
  const std::uint64_t jvp = 1ull * d_in * d_hidden + d_hidden + d_hidden +
                            2ull * d_hidden * d_out + d_out;
  const std::uint64_t vjp = 2ull * d_hidden * d_out + d_out + d_hidden + 1ull * d_in * d_hidden +
                            d_hidden;
  // LN Jacobian per pass: two reductions, the combine, and the gain multiply.
  const std::uint64_t ln_extra = mode == JacobianMode::ln ? 2ull * (5ull * d_out) : 0ull;
  return jvp + vjp + ln_extra;
}

#define FASTMEM_INSTANTIATE(T)                                                                  \
  template struct MlpParams<T>;                                                                 \
  template struct LayerNormParams<T>;                                                           \
  template T dot(const MlpParams<T>&, const MlpParams<T>&);                                     \
  template void axpy(T, const MlpParams<T>&, MlpParams<T>&);                                    \
  template void scale(MlpParams<T>&, T);                                                        \
  template T norm(const MlpParams<T>&);                                                         \
  template std::vector<T> flatten(const MlpParams<T>&);                                         \
  template MlpParams<T> unflatten(std::span<const T>, const MlpParams<T>&);                     \
  template LayerNormResult<T> layer_norm_forward(std::span<const T>, const LayerNormParams<T>&); \
  template MlpBatchTrace<T> mlp_trace(const Matrix<T>&, const MlpParams<T>&,                    \
                                      const LayerNormParams<T>&);                               \
  template Matrix<T> mlp_forward_batch(const Matrix<T>&, const MlpParams<T>&,                   \
                                       const LayerNormParams<T>&);                              \
  template std::vector<T> mlp_forward(std::span<const T>, const MlpParams<T>&,                  \
                                      const LayerNormParams<T>&);                               \
  template Matrix<T> jvp_params_batch(const MlpBatchTrace<T>&, const MlpParams<T>&,             \
                                      const LayerNormParams<T>&, const MlpParams<T>&,           \
                                      JacobianMode);                                            \
  template MlpParams<T> vjp_params_batch(const MlpBatchTrace<T>&, const MlpParams<T>&,          \
                                         const LayerNormParams<T>&, const Matrix<T>&,           \
                                         JacobianMode);                                         \
  template std::vector<T> mlp_jvp_params(std::span<const T>, const MlpParams<T>&,               \
                                         const LayerNormParams<T>&, const MlpParams<T>&,        \
                                         JacobianMode);                                         \
  template MlpParams<T> mlp_vjp_params(std::span<const T>, const MlpParams<T>&,                 \
                                       const LayerNormParams<T>&, std::span<const T>,           \
                                       JacobianMode);                                           \
  template std::vector<T> mlp_vjp_input(std::span<const T>, const MlpParams<T>&,                \
                                        const LayerNormParams<T>&, std::span<const T>);         \
  template T mlp_weighted_loss(const Matrix<T>&, const Matrix<T>&, std::span<const T>,          \
                               const MlpParams<T>&, const LayerNormParams<T>&);                 \
  template LossGrad<T> mlp_loss_and_grad(const Matrix<T>&, const Matrix<T>&,                    \
                                         std::span<const T>, const MlpParams<T>&,               \
                                         const LayerNormParams<T>&);                            \
  template MlpParams<T> mlp_loss_grad(const Matrix<T>&, const Matrix<T>&, std::span<const T>,   \
                                      const MlpParams<T>&, const LayerNormParams<T>&);

FASTMEM_INSTANTIATE(float)
FASTMEM_INSTANTIATE(double)

#undef FASTMEM_INSTANTIATE

}  // namespace fastmem
