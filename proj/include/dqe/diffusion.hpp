// Conditional DDPM over fixed-length latent vectors.
//
// Timesteps are 1-based: t = 1 is the last reverse step, t = T the first.
// All routines are pure; randomness enters through explicit seeds or draws.

#pragma once

#include <algorithm>
#include <cmath>
#include <cstddef>
#include <cstdint>
#include <random>
#include <span>
#include <string>
#include <utility>
#include <vector>

#include "dqe/error.hpp"

namespace dqe {

enum class ScheduleKind { kLinear };

template <typename Real>
struct NoiseSchedule {
  int T = 0;
  std::vector<Real> betas;
  std::vector<Real> alphas;
  std::vector<Real> alpha_bars;
  std::vector<Real> posterior_vars;

  // 1-based accessors.
  Real beta(int t) const { return betas[static_cast<std::size_t>(t - 1)]; }
  Real alpha(int t) const { return alphas[static_cast<std::size_t>(t - 1)]; }
  Real alpha_bar(int t) const {
    return t == 0 ? Real(1) : alpha_bars[static_cast<std::size_t>(t - 1)];
  }
  Real posterior_var(int t) const {
    return posterior_vars[static_cast<std::size_t>(t - 1)];
  }
};

template <typename Real>
struct LatentState {
  std::vector<Real> vector;
  int t = 0;
};

template <typename Real = double>
NoiseSchedule<Real> build_schedule(int T, double beta_start, double beta_end,
                                   ScheduleKind kind = ScheduleKind::kLinear) {
  if (T < 1) throw ConfigError("schedule needs T >= 1, got " + std::to_string(T));
  if (!(beta_start > 0.0 && beta_start <= beta_end && beta_end < 1.0)) {
    throw ConfigError("schedule betas must satisfy 0 < start <= end < 1");
  }
  (void)kind;  // linear is the only kind

  NoiseSchedule<Real> s;
  s.T = T;
  const auto n = static_cast<std::size_t>(T);
  s.betas.resize(n);
  s.alphas.resize(n);
  s.alpha_bars.resize(n);
  s.posterior_vars.resize(n);

  // Accumulate in double regardless of Real so float schedules stay accurate.
  double running = 1.0;
  for (std::size_t i = 0; i < n; ++i) {
    const double frac = T == 1 ? 0.0 : static_cast<double>(i) / (T - 1);
    const double beta = beta_start + (beta_end - beta_start) * frac;
    const double alpha = 1.0 - beta;
    const double prev = running;
    running *= alpha;
    s.betas[i] = static_cast<Real>(beta);
    s.alphas[i] = static_cast<Real>(alpha);
    s.alpha_bars[i] = static_cast<Real>(running);
    // sigma_1^2 = 0 because alpha_bar_0 = 1.
    s.posterior_vars[i] = static_cast<Real>(beta * (1.0 - prev) / (1.0 - running));
  }
  return s;
}

namespace detail {

inline void check_lengths(std::size_t a, std::size_t b, const char* what) {
  if (a != b) {
    throw ShapeError(std::string(what) + ": length mismatch (" + std::to_string(a) +
                     " vs " + std::to_string(b) + ")");
  }
}

template <typename Real>
void check_timestep(int t, const NoiseSchedule<Real>& s, const char* what) {
  if (t < 1 || t > s.T) {
    throw ConfigError(std::string(what) + ": timestep " + std::to_string(t) +
                     " outside [1, " + std::to_string(s.T) + "]");
  }
}

}  // namespace detail

// x_t = sqrt(abar_t) x0 + sqrt(1 - abar_t) eps
template <typename Real>
std::vector<Real> q_sample(std::span<const Real> x0, int t, std::span<const Real> eps,
                           const NoiseSchedule<Real>& s) {
  detail::check_lengths(x0.size(), eps.size(), "q_sample");
  detail::check_timestep(t, s, "q_sample");
  const Real ab = s.alpha_bar(t);
  const Real signal = std::sqrt(ab);
  const Real noise = std::sqrt(Real(1) - ab);
  std::vector<Real> out(x0.size());
  for (std::size_t i = 0; i < x0.size(); ++i) out[i] = signal * x0[i] + noise * eps[i];
  return out;
}

// One ancestral step: mu_t(x_t, eps_hat) + sigma_t z, with sigma_1 = 0.
template <typename Real>
std::vector<Real> reverse_step(std::span<const Real> xt, std::span<const Real> eps_hat,
                               int t, const NoiseSchedule<Real>& s,
                               std::span<const Real> z) {
  detail::check_lengths(xt.size(), eps_hat.size(), "reverse_step");
  detail::check_lengths(xt.size(), z.size(), "reverse_step");
  detail::check_timestep(t, s, "reverse_step");
  const Real inv_sqrt_alpha = Real(1) / std::sqrt(s.alpha(t));
  const Real eps_coef = s.beta(t) / std::sqrt(Real(1) - s.alpha_bar(t));
  const Real sigma = t == 1 ? Real(0) : std::sqrt(s.posterior_var(t));
  std::vector<Real> out(xt.size());
  for (std::size_t i = 0; i < xt.size(); ++i) {
    out[i] = inv_sqrt_alpha * (xt[i] - eps_coef * eps_hat[i]) + sigma * z[i];
  }
  return out;
}

// ||eps - eps_hat||^2
template <typename Real>
Real noise_loss(std::span<const Real> eps, std::span<const Real> eps_hat) {
  detail::check_lengths(eps.size(), eps_hat.size(), "noise_loss");
  Real sum = 0;
  for (std::size_t i = 0; i < eps.size(); ++i) {
    const Real d = eps[i] - eps_hat[i];
    sum += d * d;
  }
  return sum;
}

enum class SamplerNoise {
  kStochastic,  // inject sigma_t z at every step
  kZero,        // z = 0: follow the posterior mean after the initial draw
};

// Runs the reverse chain from a seeded x_T ~ N(0, I) down to t = 1.
//
// `predictor` is called as predictor(const LatentState<Real>&, std::span<const Real> cond)
// and must return a vector of the latent length.
template <typename Real, typename Predictor>
std::vector<Real> sample_feature(std::span<const Real> cond, std::size_t latent_dim,
                                 Predictor&& predictor, const NoiseSchedule<Real>& s,
                                 std::uint64_t seed,
                                 SamplerNoise noise = SamplerNoise::kStochastic) {
  std::mt19937_64 rng(seed);
  std::normal_distribution<double> normal(0.0, 1.0);
  auto draw = [&](std::vector<Real>& v) {
    for (auto& x : v) x = static_cast<Real>(normal(rng));
  };

  LatentState<Real> state;
  state.vector.resize(latent_dim);
  draw(state.vector);
  std::vector<Real> z(latent_dim, Real(0));

  for (int t = s.T; t >= 1; --t) {
    state.t = t;
    const std::vector<Real> eps_hat = predictor(std::as_const(state), cond);
    if (eps_hat.size() != latent_dim) {
      throw ShapeError("predictor returned length " + std::to_string(eps_hat.size()) +
                       " at timestep " + std::to_string(t) + ", expected " +
                       std::to_string(latent_dim));
    }
    for (const Real v : eps_hat) {
      if (!std::isfinite(v)) {
        throw NumericError("non-finite predictor output at timestep " + std::to_string(t));
      }
    }
    if (noise == SamplerNoise::kStochastic && t > 1) {
      draw(z);
    } else {
      std::fill(z.begin(), z.end(), Real(0));
    }
    state.vector = reverse_step<Real>(state.vector, eps_hat, t, s, z);
  }
  return std::move(state.vector);
}

}  // namespace dqe
