#pragma once

#include "dpval/common.hpp"
#include "dpval/data.hpp"
#include "dpval/dp.hpp"
#include "dpval/models.hpp"

#include <cstdint>
#include <functional>
#include <memory>
#include <optional>
#include <vector>

namespace dpval {

enum class SemivalueKind { shapley, banzhaf, beta, loo };

struct SemivalueSpec {
  SemivalueKind kind = SemivalueKind::shapley;
  std::size_t n = 0;
  double alpha = 1.0;  // beta only
  double beta = 1.0;   // beta only
};

// Entry r-1 holds w(r) and p(r) for coalition size r = |predecessors| + 1.
// w satisfies sum_r C(n-1, r-1) w(r) = n; p(r) = C(n-1, r-1) w(r) is the
// coefficient that makes the uniform-permutation estimator unbiased.
struct SemivalueWeights {
  Vector w;
  Vector p;
};

SemivalueWeights semivalue_weights(const SemivalueSpec& spec);

struct Marginal {
  int iteration = 0;          // 1-based t
  double coefficient = 0.0;   // p(|P|+1)
  double delta = 0.0;         // V(theta after) - V(theta before)
  bool retained = true;       // false inside the burn-in window

  double weighted() const { return coefficient * delta; }
};

struct GradientRecord {
  Vector clipped;    // g-hat
  Vector perturbed;  // g-tilde
  Vector released;   // what actually updated the model
};

struct ValuationResult {
  Vector psi;
  std::vector<std::vector<Marginal>> marginals;  // [party][iteration]
  Vector mu;
  Vector s_sq;
  std::vector<std::optional<double>> mean_adjusted;
  int permutations_used = 0;
  int burn_in_dropped = 0;
  std::vector<std::vector<GradientRecord>> gradients;  // filled when record_gradients
};

struct RunConfig {
  std::shared_ptr<const PartitionedDataset> dataset;
  ModelSpec model;
  UtilitySpec utility;
  NoiseConfig noise;  // noise.budget is the number of permutations k
  SemivalueSpec semivalue;  // n is taken from the dataset
  std::uint64_t seed = 0;
  bool record_gradients = false;
  // Replaces sampling with every permutation of the parties in
  // lexicographic order (n <= 8); k becomes n!.
  bool enumerate_permutations = false;
  // Worker threads for iid mode. Results do not depend on this.
  int threads = 1;

  void validate() const;
};

// Permutation, model init and noise streams for iteration t are derived from
// (seed, t) alone, so any iteration can be replayed independently.
ValuationResult run_valuation(const RunConfig& cfg);

// Noise-free replay of the engine: model parameters just before each party's
// update and that party's clipped gradient, indexed [party][iteration].
struct StepTrace {
  std::size_t position = 0;  // 0-based slot of the party in permutation t
  Vector theta_before;
  Vector clipped;
};
std::vector<std::vector<StepTrace>> trace_trajectories(const RunConfig& cfg);

Utility make_utility(const RunConfig& cfg);

using SetFunction = std::function<double(std::uint32_t coalition_mask)>;

// Brute-force semivalue over all 2^(n-1) coalitions per party (n <= 12).
Vector exact_semivalue(const SetFunction& v, const SemivalueSpec& spec);

// Exact expectation of the permutation estimator over all n! orders (n <= 9).
Vector permutation_expectation(const SetFunction& v, const SemivalueSpec& spec);

struct EstimationStats {
  Vector mu;
  Vector s_sq;
  std::vector<std::optional<double>> mean_adjusted;
};

// mu = mean of retained weighted marginals, s^2 = sum (m - mu)^2 / (k (k-1)),
// mean_adjusted = s^2 / |mu| (missing when |mu| < 1e-15).
EstimationStats estimation_stats(const std::vector<std::vector<Marginal>>& marginals);

struct FederatedOptions {
  int permutations = 100;  // per round
  double burn_in = 0.2;    // rounds t <= R q are excluded from psi
};

struct FederatedResult {
  Vector psi;
  Matrix round_values;  // rounds x parties, per-round Shapley estimates
  int rounds_retained = 0;
};

// Federated attribution: a persistent global model over R = noise.budget
// rounds; each round every party releases a (combined) private gradient,
// per-round Shapley values are estimated by permutation sampling over the
// coalition-averaged updates, and psi averages the rounds after burn-in.
FederatedResult run_federated(const RunConfig& cfg, const FederatedOptions& options);

const char* to_string(SemivalueKind kind);

}  // namespace dpval
