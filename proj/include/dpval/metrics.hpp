#pragma once

#include "dpval/common.hpp"
#include "dpval/data.hpp"
#include "dpval/dp.hpp"
#include "dpval/models.hpp"
#include "dpval/valuation.hpp"

#include <cstdint>
#include <optional>
#include <span>
#include <vector>

namespace dpval {

// Mann-Whitney AUC with midranks for ties. Higher scores rank as more
// positive; pass -psi to rank low-valued parties first.
double auc_roc(std::span<const double> scores, const std::vector<bool>& positives);

enum class RemovalOrder { highest_first, lowest_first, random };

struct RemovalCurve {
  RemovalOrder order = RemovalOrder::highest_first;
  std::vector<double> fractions;
  std::vector<double> scores;  // mean over seeds for random order
  std::vector<double> stderrs;  // zero unless order is random
};

struct RemovalOptions {
  std::vector<double> fractions;  // strictly increasing, in [0, 1)
  RemovalOrder order = RemovalOrder::highest_first;
  int random_seeds = 5;  // random order only; at least 5
  std::uint64_t seed = 0;
  int epochs = 1;
};

// Removes floor(f * n) parties in the requested order and retrains from
// scratch without noise (one gradient step per remaining party per epoch,
// parties in index order), then scores the model with `utility`.
RemovalCurve removal_curve(const Vector& psi, const PartitionedDataset& ds, const ModelSpec& model,
                           const UtilitySpec& utility, const RemovalOptions& options);

struct SimilarityReport {
  double delta_cos = 0.0;
  double delta_l2 = 0.0;
  std::size_t terms = 0;
  std::size_t skipped = 0;  // terms with a zero-norm vector
};

// Delta_cos and Delta_l2 over records[party][iteration], with
// cos(a, b) = |a.b| / (|a| |b|), g-hat = clipped, g-tilde = perturbed and
// g-tilde* = released. Each party's terms are averaged, then the parties.
SimilarityReport grad_similarity(const std::vector<std::vector<GradientRecord>>& records);

// Var |g + z|^2 for z ~ N(0, (k/t) (C sigma)^2 I):
// 4 |g|^2 k (C sigma)^2 / t + 2 d k^2 (C sigma)^4 / t^2.
double noise_var_closed_form(const Vector& g_hat, int k, double clip_norm, double sigma, int t = 1);

struct NpqSums {
  double n = 0.0;
  double p = 0.0;
  double q = 0.0;
};

// Per-coordinate variance sigma_t^2 of the implicit noise z*_t of the
// rolling-mean combiner at iteration t (sigma_g_sq = 0 gives the prefix
// mean): k (C sigma)^2 sum_l X_tl^2 + sigma_g^2 (sum_{l<t} X_tl^2 + (1 - X_tt)^2).
double implicit_noise_variance(int t, int k, double clip_norm, double sigma, double sigma_g_sq);

// N = sum d sigma_t^2, P = sum d (d+2) sigma_t^4, Q = sum sqrt(d (d+2)) sigma_t^2
// over t = kq+1..k.
NpqSums npq_closed_form(int k, double clip_norm, double sigma, double sigma_g_sq, std::size_t d,
                        double q = 0.0);

struct ProbePoint {
  int k = 0;
  double variance = 0.0;  // trial variance of psi, averaged over parties
  std::vector<Vector> psi;  // [trial]
};

struct ProbeResult {
  NoiseMode mode = NoiseMode::iid;
  std::vector<ProbePoint> points;
  double slope = 0.0;  // NaN when some variance is not positive
};

// Conditional variance of psi given the model trajectory. The noise-free
// trajectory of base (at the largest k) fixes theta^p and the clipped
// gradient for every (t, party); each trial redraws only the DP noise, runs
// the chosen combiner, and sets m = V(theta^p - alpha released) - V(theta^p).
// base.noise supplies C, sigma, q and sigma_g^2; its budget and mode are
// replaced by ks and `mode`.
ProbeResult variance_scaling_probe(const RunConfig& base, NoiseMode mode, std::span<const int> ks,
                                   int trials);

// Least-squares slope of log y against log x.
double log_log_slope(std::span<const double> x, std::span<const double> y);

const char* to_string(RemovalOrder order);

}  // namespace dpval
