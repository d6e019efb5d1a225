#include "dpval/dp.hpp"

#include <cmath>

namespace dpval {
namespace {

[[noreturn]] void fail(const std::string& field, const std::string& message) {
  throw Error("dp", field, message);
}

}  // namespace

void NoiseConfig::validate() const {
  if (!(clip_norm > 0.0) || !std::isfinite(clip_norm))
    fail("clip_norm", "clip norm C must be positive");
  if (!(noise_multiplier >= 0.0) || !std::isfinite(noise_multiplier))
    fail("sigma", "noise multiplier must be non-negative");
  if (noise_multiplier == 0.0 && !no_dp)
    fail("sigma", "noise multiplier 0 is only allowed in no-DP mode");
  if (budget < 1) fail("k", "budget k must be at least 1");
  if (sigma_g_sq && !(*sigma_g_sq >= 0.0)) fail("sigma_g_sq", "sigma_g^2 must be non-negative");
  if (mode == NoiseMode::corr_y) {
    if (!(burn_in > 0.0 && burn_in < 1.0)) fail("q", "burn-in ratio q must lie in (0, 1)");
    const double kq = burn_in * budget;
    const double rounded = std::round(kq);
    if (std::abs(kq - rounded) > 1e-9 * std::max(1.0, kq) || rounded < 1.0)
      fail("q", "k * q must be a positive integer");
    if (rounded >= budget) fail("q", "k * q must be smaller than k");
  }
}

int NoiseConfig::burn_in_count() const {
  if (mode != NoiseMode::corr_y) return 0;
  return static_cast<int>(std::round(burn_in * budget));
}

double NoiseConfig::release_variance() const {
  const double c = clip_norm * noise_multiplier;
  return static_cast<double>(budget) * c * c;
}

NoiseConfig no_dp_config(int budget, NoiseMode mode) {
  NoiseConfig cfg;
  cfg.noise_multiplier = 0.0;
  cfg.no_dp = true;
  cfg.budget = budget;
  cfg.mode = mode;
  return cfg;
}

Vector clip_gradient(const Vector& g, double clip_norm) {
  if (!(clip_norm > 0.0)) fail("clip_norm", "clip norm C must be positive");
  if (!g.allFinite()) fail("gradient", "gradient has non-finite entries");
  const double norm = g.norm();
  return g / std::max(1.0, norm / clip_norm);
}

Vector sample_noise(std::size_t d, const NoiseConfig& cfg, Rng& rng) {
  Vector z = Vector::Zero(static_cast<Eigen::Index>(d));
  const double sd = std::sqrt(cfg.release_variance());
  if (sd == 0.0) return z;
  std::normal_distribution<double> normal(0.0, sd);
  for (auto& v : z) v = normal(rng);
  return z;
}

double calibrate_sigma(double epsilon, double delta) {
  if (!(epsilon > 0.0) || !std::isfinite(epsilon)) fail("epsilon", "epsilon must be positive");
  if (!(delta > 0.0 && delta < 1.0)) fail("delta", "delta must lie in (0, 1)");
  return std::sqrt(2.0 * std::log(1.25 / delta)) / epsilon;
}

double combine_diag(const NoiseConfig& cfg, int t) {
  if (t < 1 || t > cfg.budget)
    fail("t", "iteration " + std::to_string(t) + " outside [1, " + std::to_string(cfg.budget) + "]");
  const double td = t;
  switch (cfg.mode) {
    case NoiseMode::iid:
      return 1.0;
    case NoiseMode::fl_schedule:
      return 0.75 - 0.7 * td / cfg.budget;
    case NoiseMode::corr_x:
    case NoiseMode::corr_y:
      break;
  }
  if (!cfg.sigma_g_sq || *cfg.sigma_g_sq == 0.0) return 1.0 / td;
  const double kc = cfg.release_variance();
  const double sg = *cfg.sigma_g_sq;
  if (kc == 0.0) return 1.0;  // no perturbation: nothing to average away
  return (kc + td * sg) / (td * (kc + sg));
}

void RollingGradientState::absorb(const PerturbedGradient& g) {
  ++count;
  if (count == 1) {
    mean = g.value();
    return;
  }
  const double t = count;
  mean = ((t - 1.0) / t) * mean + (1.0 / t) * g.value();
}

PerturbedGradient privatize(const Vector& gradient, const NoiseConfig& cfg, Rng& rng) {
  Vector g = clip_gradient(gradient, cfg.clip_norm);
  if (cfg.release_variance() > 0.0) g += sample_noise(static_cast<std::size_t>(g.size()), cfg, rng);
  return PerturbedGradient(std::move(g));
}

Vector release_correlated(const PerturbedGradient& g, RollingGradientState& state, double diag) {
  if (!(diag > 0.0 && diag <= 1.0)) fail("diag", "combiner weight must lie in (0, 1]");
  if (state.count > 0 && state.mean.size() != g.value().size())
    fail("gradient", "dimension mismatch between gradient and rolling state");
  Vector released = state.count == 0 ? g.value() : Vector((1.0 - diag) * state.mean + diag * g.value());
  state.absorb(g);
  return released;
}

double effective_noise_variance(const NoiseConfig& cfg, int t) {
  if (t < 1 || t > cfg.budget) fail("t", "iteration outside [1, k]");
  switch (cfg.mode) {
    case NoiseMode::iid:
      return cfg.release_variance();
    case NoiseMode::corr_x:
    case NoiseMode::corr_y:
      if (cfg.sigma_g_sq && *cfg.sigma_g_sq != 0.0) break;
      return cfg.release_variance() / t;
    case NoiseMode::fl_schedule:
      break;
  }
  fail("mode", "effective noise variance is only defined for iid and prefix-mean combiners");
}

const char* to_string(NoiseMode mode) {
  switch (mode) {
    case NoiseMode::iid: return "iid";
    case NoiseMode::corr_x: return "corr_x";
    case NoiseMode::corr_y: return "corr_y";
    case NoiseMode::fl_schedule: return "fl_schedule";
  }
  return "unknown";
}

}  // namespace dpval
