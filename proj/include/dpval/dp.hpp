#pragma once

#include "dpval/common.hpp"

#include <cstddef>
#include <optional>

namespace dpval {

enum class NoiseMode { iid, corr_x, corr_y, fl_schedule };

// Gaussian-mechanism parameters for k releases of a C-clipped gradient.
// Each release gets N(0, k (C sigma)^2 I). sigma == 0 is only accepted with
// no_dp set (diagnostic runs without privacy).
struct NoiseConfig {
  double clip_norm = 1.0;
  double noise_multiplier = 1.0;
  int budget = 1;
  NoiseMode mode = NoiseMode::iid;
  double burn_in = 0.0;  // q; kq must be a positive integer below k for corr_y
  std::optional<double> sigma_g_sq;
  bool no_dp = false;

  void validate() const;
  int burn_in_count() const;         // kq for corr_y, 0 otherwise
  double release_variance() const;   // k (C sigma)^2
  bool correlated() const { return mode != NoiseMode::iid; }
};

NoiseConfig no_dp_config(int budget, NoiseMode mode = NoiseMode::iid);

// g / max(1, |g| / C)
Vector clip_gradient(const Vector& g, double clip_norm);

Vector sample_noise(std::size_t d, const NoiseConfig& cfg, Rng& rng);

// sqrt(2 ln(1.25/delta)) / epsilon
double calibrate_sigma(double epsilon, double delta);

// Diagonal weight X_{t,t} of the combiner matrix for iteration t in [1, k].
double combine_diag(const NoiseConfig& cfg, int t);

// A clipped gradient with Gaussian-mechanism noise already added. The only
// way to obtain one is `privatize`, so combiners can never see raw gradients.
class PerturbedGradient {
 public:
  const Vector& value() const { return value_; }

 private:
  explicit PerturbedGradient(Vector value) : value_(std::move(value)) {}
  friend PerturbedGradient privatize(const Vector& gradient, const NoiseConfig& cfg, Rng& rng);

  Vector value_;
};

// clip(gradient, C) + N(0, k (C sigma)^2 I)
PerturbedGradient privatize(const Vector& gradient, const NoiseConfig& cfg, Rng& rng);

// Running mean of the perturbed gradients released so far by one party.
struct RollingGradientState {
  Vector mean;
  int count = 0;

  void absorb(const PerturbedGradient& g);
};

// released = (1 - diag) * state.mean + diag * g, then g joins the running
// mean. With an empty state the release is g itself so the row weights
// still sum to one.
Vector release_correlated(const PerturbedGradient& g, RollingGradientState& state, double diag);

// Per-coordinate variance of the noise carried by the released gradient at
// iteration t: k (C sigma)^2 for iid, k (C sigma)^2 / t for the prefix-mean
// combiner. Other combiners throw.
double effective_noise_variance(const NoiseConfig& cfg, int t);

const char* to_string(NoiseMode mode);

}  // namespace dpval
