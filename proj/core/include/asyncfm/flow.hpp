#pragma once

#include <cmath>
#include <stdexcept>

#include "asyncfm/rng.hpp"
#include "asyncfm/types.hpp"

namespace asyncfm {

template <class S>
void check_same_shape(const Matrix<S>& a, const Matrix<S>& b, const char* where) {
  if (a.rows() != b.rows() || a.cols() != b.cols())
    throw std::invalid_argument(std::string(where) + ": shape mismatch");
}

template <class S>
void check_mask_len(const TokenMask& m, const Matrix<S>& a, const char* where) {
  if (static_cast<Eigen::Index>(m.size()) != a.rows())
    throw std::invalid_argument(std::string(where) + ": mask length mismatch");
}

// Ground-truth velocity of the straight noise->data path: u = n - a.
template <class S>
Matrix<S> gt_velocity(const Matrix<S>& action, const Matrix<S>& noise) {
  check_same_shape(action, noise, "gt_velocity");
  return noise - action;
}

// Asynchronous interpolation: masked rows move to (1-tau)a + tau n,
// unmasked rows stay exactly at the clean action.
template <class S>
Matrix<S> interp_path(const Matrix<S>& action, const Matrix<S>& noise, double tau,
                      const TokenMask& mask) {
  check_same_shape(action, noise, "interp_path");
  check_mask_len(mask, action, "interp_path");
  if (tau < 0.0 || tau > 1.0) throw std::invalid_argument("interp_path: tau outside [0,1]");
  Matrix<S> out = action;
  const S t = static_cast<S>(tau);
  for (Eigen::Index l = 0; l < action.rows(); ++l)
    if (mask[l]) out.row(l) = action.row(l) - t * (action.row(l) - noise.row(l));
  return out;
}

// Starting state of asynchronous regeneration: unmasked rows keep the
// first-round actions, masked rows restart from standard normal noise.
// Draws consume the rng in row-major order.
template <class S>
Matrix<S> async_init(const Matrix<S>& sfm_actions, const TokenMask& mask,
                     RandomSource& rng) {
  check_mask_len(mask, sfm_actions, "async_init");
  Matrix<S> out = sfm_actions;
  for (Eigen::Index l = 0; l < out.rows(); ++l)
    if (mask[l])
      for (Eigen::Index j = 0; j < out.cols(); ++j)
        out(l, j) = static_cast<S>(rng.normal());
  return out;
}

// One forward-Euler update; unmasked rows are carried over bit-exactly.
template <class S>
Matrix<S> euler_step(const Matrix<S>& state, const Matrix<S>& velocity, double delta,
                     const TokenMask& mask) {
  check_same_shape(state, velocity, "euler_step");
  check_mask_len(mask, state, "euler_step");
  if (!(delta > 0.0)) throw std::invalid_argument("euler_step: delta must be positive");
  if (!velocity.allFinite()) throw NumericError("euler_step: non-finite velocity");
  Matrix<S> out = state;
  const S d = static_cast<S>(delta);
  for (Eigen::Index l = 0; l < state.rows(); ++l)
    if (mask[l]) out.row(l) = state.row(l) - d * velocity.row(l);
  return out;
}

// Masked Euler integration from tau=1 to tau=0 over a uniform schedule.
// velocity_fn(state, tau) supplies the model prediction at each grid point.
template <class S, class VelocityFn>
Matrix<S> integrate(Matrix<S> state, const TokenMask& mask, int steps,
                    VelocityFn&& velocity_fn) {
  if (steps < 1) throw std::invalid_argument("integrate: steps must be >= 1");
  const double delta = 1.0 / steps;
  double tau = 1.0;
  for (int k = 0; k < steps; ++k) {
    Matrix<S> v = velocity_fn(state, tau);
    state = euler_step(state, v, delta, mask);
    tau = std::max(0.0, tau - delta);
  }
  return state;
}

// Inverse CDF of Beta(1.5, 1): F(t) = t^1.5, so F^{-1}(u) = u^(2/3).
inline double beta15_inv_cdf(double u) { return std::pow(u, 2.0 / 3.0); }

// FM time draw, Beta(1.5,1), biased toward the noisy end tau ~ 1.
inline double sample_time(RandomSource& rng) { return beta15_inv_cdf(rng.uniform()); }

// L i.i.d. Bernoulli(y) bits with a fixed mixing probability y.
inline TokenMask sample_mask_with_y(double y, RandomSource& rng, int L) {
  TokenMask m(L);
  for (int l = 0; l < L; ++l) m[l] = rng.uniform() < y ? 1 : 0;
  return m;
}

// Training mask: y ~ U(0,1), then Bernoulli(y)^L. Marginal rate 1/2,
// bits within one mask correlated through the shared y.
inline TokenMask sample_mask(RandomSource& rng, int L) {
  if (L < 1) throw std::invalid_argument("sample_mask: L must be >= 1");
  double y = rng.uniform();
  return sample_mask_with_y(y, rng, L);
}

// Velocity loss on masked rows, normalized by masked-token count x D so the
// magnitude is invariant to the mask rate. Empty mask contributes 0.
template <class S>
double masked_loss(const Matrix<S>& pred, const Matrix<S>& gt, const TokenMask& mask) {
  check_same_shape(pred, gt, "masked_loss");
  check_mask_len(mask, pred, "masked_loss");
  const int k = mask_cardinality(mask);
  if (k == 0) return 0.0;
  double acc = 0.0;
  for (Eigen::Index l = 0; l < pred.rows(); ++l) {
    if (!mask[l]) continue;
    for (Eigen::Index j = 0; j < pred.cols(); ++j) {
      const double d = static_cast<double>(pred(l, j)) - static_cast<double>(gt(l, j));
      acc += d * d;
    }
  }
  return acc / (static_cast<double>(k) * static_cast<double>(pred.cols()));
}

}  // namespace asyncfm
