#pragma once

// Symmetric forward diffusion on connectomes and the few-step reverse
// sampling loop.

#include <algorithm>
#include <cmath>
#include <cstddef>
#include <functional>
#include <random>
#include <string>
#include <vector>

#include "f2s/conndata.hpp"
#include "f2s/errors.hpp"
#include "f2s/tensorgrad.hpp"

namespace f2s {

// Linear variance schedule. beta/eta are indexed 1..T; eta_bar is indexed
// 0..T with eta_bar(0) == 1.
class NoiseSchedule {
 public:
  NoiseSchedule() = default;

  std::size_t T() const { return beta_.size(); }

  double beta(std::size_t t) const {
    check_step(t);
    return beta_[t - 1];
  }
  double eta(std::size_t t) const { return 1.0 - beta(t); }
  double eta_bar(std::size_t t) const {
    if (t > T()) throw IndexError("diffusion step " + std::to_string(t) + " outside 0.." + std::to_string(T()));
    return eta_bar_[t];
  }

  friend NoiseSchedule build_schedule(std::size_t T, double beta_1, double beta_T);

 private:
  void check_step(std::size_t t) const {
    if (t < 1 || t > T()) throw IndexError("diffusion step " + std::to_string(t) + " outside 1.." + std::to_string(T()));
  }

  std::vector<double> beta_;
  std::vector<double> eta_bar_;
};

inline NoiseSchedule build_schedule(std::size_t T, double beta_1, double beta_T) {
  if (T < 1) throw ConfigError("schedule: T must be >= 1");
  if (!(beta_1 > 0.0 && beta_1 <= beta_T && beta_T < 1.0))
    throw ConfigError("schedule: need 0 < beta_1 <= beta_T < 1");
  NoiseSchedule s;
  s.beta_.resize(T);
  for (std::size_t k = 0; k < T; ++k)
    s.beta_[k] = T == 1 ? beta_1 : beta_1 + (beta_T - beta_1) * static_cast<double>(k) / static_cast<double>(T - 1);
  s.eta_bar_.resize(T + 1);
  s.eta_bar_[0] = 1.0;
  for (std::size_t k = 1; k <= T; ++k) s.eta_bar_[k] = s.eta_bar_[k - 1] * (1.0 - s.beta_[k - 1]);
  return s;
}

// S = (eps + epsᵀ)/2 with eps i.i.d. N(0,1) and a zero diagonal; off-diagonal
// entries have variance 1/2.
template <class Rng>
Tensor sample_symmetric_noise(std::size_t n, Rng& rng) {
  if (n < 2) throw ConfigError("symmetric noise needs n >= 2");
  std::normal_distribution<double> normal(0.0, 1.0);
  Tensor eps = Tensor::matrix(n, n);
  for (std::size_t i = 0; i < n; ++i)
    for (std::size_t j = 0; j < n; ++j) eps(i, j) = (i == j) ? 0.0 : normal(rng);
  Tensor s = Tensor::matrix(n, n);
  for (std::size_t i = 0; i < n; ++i)
    for (std::size_t j = i + 1; j < n; ++j) {
      const double v = 0.5 * (eps(i, j) + eps(j, i));
      s(i, j) = v;
      s(j, i) = v;
    }
  return s;
}

namespace detail {
inline Tensor affine_mix(const Tensor& a, double ca, const Tensor& noise, double cn) {
  if (!a.same_shape(noise) || a.rows() != a.cols())
    throw DimensionError("diffusion: matrix " + tg::shape_str(a.shape()) + " and noise " + tg::shape_str(noise.shape()) +
                         " must be equal square shapes");
  const std::size_t n = a.rows();
  Tensor out = Tensor::matrix(n, n);
  for (std::size_t i = 0; i < n; ++i)
    for (std::size_t j = 0; j < n; ++j) out(i, j) = (i == j) ? 0.0 : ca * a(i, j) + cn * noise(i, j);
  return out;
}
}  // namespace detail

// A_{t+1} = sqrt(1-beta_t) A_t + sqrt(beta_t) S, for t in 1..T.
inline Tensor diffuse_step(const Tensor& a_t, std::size_t t, const Tensor& noise, const NoiseSchedule& sched) {
  const double b = sched.beta(t);
  return detail::affine_mix(a_t, std::sqrt(1.0 - b), noise, std::sqrt(b));
}

// Closed form A_t = sqrt(eta_bar_t) A_0 + sqrt(1-eta_bar_t) S. t = 0 returns
// A_0 unchanged.
inline Tensor diffuse_to(const Tensor& a0, std::size_t t, const Tensor& noise, const NoiseSchedule& sched) {
  const double eb = sched.eta_bar(t);
  if (t == 0) {
    if (!a0.same_shape(noise)) throw DimensionError("diffusion: matrix and noise shapes differ");
    return a0;
  }
  return detail::affine_mix(a0, std::sqrt(eb), noise, std::sqrt(1.0 - eb));
}

// Re-noises a predicted clean matrix back to step t. Same law as diffuse_to.
inline Tensor renoise_prediction(const Tensor& a0_hat, std::size_t t, const Tensor& noise, const NoiseSchedule& sched) {
  return diffuse_to(a0_hat, t, noise, sched);
}

// Clamp to [0,1], symmetrize by averaging and zero the diagonal.
inline Connectome finalize_connectome(const Tensor& m) {
  const std::size_t n = m.rows();
  Tensor out = Tensor::matrix(n, n);
  for (std::size_t i = 0; i < n; ++i)
    for (std::size_t j = i + 1; j < n; ++j) {
      const double v = std::clamp(0.5 * (m(i, j) + m(j, i)), 0.0, 1.0);
      out(i, j) = v;
      out(j, i) = v;
    }
  return Connectome(std::move(out));
}

// Called with (t, matrix) for each state of the reverse chain: the initial
// A_T, every re-noised A_t' and the final clean prediction at t = 0.
using TrajectoryObserver = std::function<void(std::size_t, const Tensor&)>;

// Few-step reverse chain. predict_clean(A_{t+d}', t) returns the clean
// estimate; it is invoked exactly T/d times for t = T-d, T-2d, ..., 0.
template <class PredictClean, class Rng>
Connectome sample_sc(PredictClean&& predict_clean, std::size_t n, const NoiseSchedule& sched, std::size_t d, Rng& rng,
                     const TrajectoryObserver& observe = {}) {
  const std::size_t T = sched.T();
  if (d == 0 || T % d != 0) throw ConfigError("sample_sc: skip d=" + std::to_string(d) + " must divide T=" + std::to_string(T));
  Tensor a = sample_symmetric_noise(n, rng);
  if (observe) observe(T, a);
  for (std::size_t t = T - d;; t -= d) {
    Tensor a0_hat = predict_clean(static_cast<const Tensor&>(a), t);
    if (t > 0) {
      const Tensor noise = sample_symmetric_noise(n, rng);
      a = renoise_prediction(a0_hat, t, noise, sched);
    } else {
      a = std::move(a0_hat);
    }
    if (observe) observe(t, a);
    if (t == 0) break;
  }
  return finalize_connectome(a);
}

}  // namespace f2s
