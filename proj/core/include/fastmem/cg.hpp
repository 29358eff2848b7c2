// SPDX-License-Identifier: Apache-2.0

#pragma once

#include <cmath>
#include <concepts>
#include <cstddef>
#include <cstdint>
#include <functional>
#include <vector>

#include "fastmem/error.hpp"

namespace fastmem {

/// Dense-vector overloads so plain std::vector<T> systems can be solved with
/// the same routine.
template <std::floating_point T>
T dot(const std::vector<T>& a, const std::vector<T>& b) {
  if (a.size() != b.size()) throw DimensionError("dot: length mismatch");
  T s{0};
  for (std::size_t i = 0; i < a.size(); ++i) s += a[i] * b[i];
  return s;
}

template <std::floating_point T>
void axpy(T alpha, const std::vector<T>& x, std::vector<T>& y) {
  if (x.size() != y.size()) throw DimensionError("axpy: length mismatch");
  for (std::size_t i = 0; i < x.size(); ++i) y[i] += alpha * x[i];
}

enum class CgStopReason : std::uint8_t {
  max_iterations,
  zero_gradient,
  converged,              ///< residual vanished
  indicator_increase,     ///< stop indicator broke monotonicity
  nonpositive_curvature,  ///< vᵀBv <= 0
};

const char* to_string(CgStopReason r) noexcept;

struct CgTrace {
  std::size_t iterations = 0;          ///< accepted iterations (length of the x_m sequence − 1)
  std::vector<double> residual_norms;  ///< ‖r_m‖, m = 0..iterations
  std::vector<double> model_values;    ///< indicator value of x_m, m = 0..iterations
  bool early_stopped = false;
  CgStopReason reason = CgStopReason::max_iterations;
};

/// Vector space over which CG runs; MlpParams and std::vector<T> both model it.
template <typename V>
concept CgVector = requires(const V& a, V& y, double s) {
  { dot(a, a) };
  axpy(static_cast<decltype(dot(a, a))>(s), a, y);
};

/// Default stop indicator: CG quadratic model q(x) = ½ xᵀBx − gᵀx, evaluated
/// from a precomputed B·x.
template <CgVector V>
double quadratic_model(const V& x, const V& bx, const V& g) {
  return 0.5 * static_cast<double>(dot(x, bx)) - static_cast<double>(dot(g, x));
}

/// γ(x, Bx, g). Must decrease along healthy CG iterates.
template <typename V>
using StopIndicator = std::function<double(const V& x, const V& bx, const V& g)>;

/// Conjugate gradient for B x = g starting at x₀ = 0, run for at most
/// `max_iters` iterations:
///
///   r₀ = g, v₀ = r₀
///   α_m = ‖r_m‖² / v_mᵀBv_m,  x_{m+1} = x_m + α_m v_m,  r_{m+1} = r_m − α_m Bv_m
///   β_{m+1} = ‖r_{m+1}‖² / ‖r_m‖²,  v_{m+1} = r_{m+1} + β_{m+1} v_m
///
/// After every iteration the stop indicator is compared with its previous
/// value; if it increased the previous iterate is returned. B·x is tracked by
/// accumulation (Bx_{m+1} = Bx_m + α_m Bv_m), so the indicator costs no extra
/// products.
template <CgVector V, typename ApplyB>
V conjugate_gradient(const V& g, ApplyB&& apply_b, std::size_t max_iters, CgTrace& trace,
                     const StopIndicator<V>& indicator = quadratic_model<V>,
                     bool stop_on_increase = true) {
  using S = decltype(dot(g, g));
  if (max_iters == 0) throw ContractError("CG requires at least one iteration");
  trace = CgTrace{};

  V x = g;
  axpy(static_cast<S>(-1), g, x);  // zero with g's shape
  V bx = x;
  V r = g;
  V v = g;
  S rr = dot(r, r);
  if (!std::isfinite(static_cast<double>(rr))) throw NumericError("CG: non-finite right-hand side");
  trace.residual_norms.push_back(std::sqrt(static_cast<double>(rr)));
  double gamma = indicator(x, bx, g);
  trace.model_values.push_back(gamma);
  if (rr == S(0)) {
    trace.reason = CgStopReason::zero_gradient;
    return x;
  }

  for (std::size_t m = 0; m < max_iters; ++m) {
    const V bv = apply_b(v);
    const S vbv = dot(v, bv);
    if (!std::isfinite(static_cast<double>(vbv))) throw NumericError("CG: non-finite curvature");
    if (!(vbv > S(0))) {
      trace.early_stopped = true;
      trace.reason = CgStopReason::nonpositive_curvature;
      return x;
    }
    const S alpha = rr / vbv;

    V x_next = x;
    axpy(alpha, v, x_next);
    V bx_next = bx;
    axpy(alpha, bv, bx_next);
    axpy(-alpha, bv, r);
    const S rr_next = dot(r, r);
    if (!std::isfinite(static_cast<double>(rr_next))) throw NumericError("CG: non-finite residual");

    const double gamma_next = indicator(x_next, bx_next, g);
    if (stop_on_increase && gamma_next > gamma) {
      trace.early_stopped = true;
      trace.reason = CgStopReason::indicator_increase;
      return x;
    }

    x = std::move(x_next);
    bx = std::move(bx_next);
    gamma = gamma_next;
    ++trace.iterations;
    trace.residual_norms.push_back(std::sqrt(static_cast<double>(rr_next)));
    trace.model_values.push_back(gamma);

    if (rr_next == S(0)) {
      trace.reason = CgStopReason::converged;
      return x;
    }
    const S beta = rr_next / rr;
    rr = rr_next;
    // v ← r + β v
    V v_next = r;
    axpy(beta, v, v_next);
    v = std::move(v_next);
  }
  trace.reason = CgStopReason::max_iterations;
  return x;
}

}  // namespace fastmem
