#include "dpval/valuation.hpp"

#include <algorithm>
#include <bit>
#include <cmath>
#include <exception>
#include <limits>
#include <numeric>
#include <sstream>
#include <thread>

namespace dpval {
namespace {

[[noreturn]] void fail(const std::string& message) { throw Error("valuation", message); }
[[noreturn]] void fail(const std::string& field, const std::string& message) {
  throw Error("valuation", field, message);
}

constexpr std::uint64_t kPermStream = 1;
constexpr std::uint64_t kInitStream = 2;
constexpr std::uint64_t kNoiseStream = 3;

double log_choose(double n, double k) {
  return std::lgamma(n + 1.0) - std::lgamma(k + 1.0) - std::lgamma(n - k + 1.0);
}

double log_beta(double a, double b) { return std::lgamma(a) + std::lgamma(b) - std::lgamma(a + b); }

std::uint64_t factorial(std::size_t n) {
  std::uint64_t f = 1;
  for (std::size_t i = 2; i <= n; ++i) f *= i;
  return f;
}

struct Engine {
  Matrix x;
  Vector y;
  std::vector<std::vector<std::size_t>> parties;
  std::optional<Utility> utility;
  SemivalueWeights weights;
  NoiseConfig noise;
  std::size_t n = 0;
  std::size_t d = 0;
  int iterations = 0;
  std::vector<std::vector<std::size_t>> enumerated;  // exact mode only
};

Engine build_engine(const RunConfig& cfg) {
  cfg.validate();
  const auto& ds = *cfg.dataset;
  Engine e;
  e.x = design_matrix(cfg.model, ds.features);
  e.y = ds.labels;
  e.parties = ds.party_members();
  e.utility.emplace(cfg.utility, cfg.model, design_matrix(cfg.model, ds.test_features),
                    ds.test_labels);
  e.n = ds.n_parties;
  e.d = param_dim(cfg.model, ds.d_feat());
  SemivalueSpec sv = cfg.semivalue;
  sv.n = e.n;
  e.weights = semivalue_weights(sv);
  e.noise = cfg.noise;
  if (cfg.enumerate_permutations) {
    std::vector<std::size_t> perm(e.n);
    std::iota(perm.begin(), perm.end(), std::size_t{0});
    do {
      e.enumerated.push_back(perm);
    } while (std::next_permutation(perm.begin(), perm.end()));
    e.noise.budget = static_cast<int>(e.enumerated.size());
    e.noise.validate();
  }
  e.iterations = e.noise.budget;
  return e;
}

std::vector<std::size_t> permutation_for(const Engine& e, std::uint64_t seed, int t) {
  if (!e.enumerated.empty()) return e.enumerated[static_cast<std::size_t>(t - 1)];
  std::vector<std::size_t> perm(e.n);
  std::iota(perm.begin(), perm.end(), std::size_t{0});
  Rng rng(derive_seed(seed, static_cast<std::uint64_t>(t), kPermStream));
  std::shuffle(perm.begin(), perm.end(), rng);
  return perm;
}

struct IterationOutput {
  std::vector<double> delta;
  std::vector<std::size_t> position;
  std::vector<GradientRecord> records;
};

using StepObserver = std::function<void(std::size_t position, std::size_t party,
                                        const Vector& theta_before, const Vector& raw_gradient)>;

void check_finite(double v, int t, std::size_t party) {
  if (std::isfinite(v)) return;
  std::ostringstream msg;
  msg << "non-finite utility at iteration " << t << ", party " << party
      << " (learning rate too large for the injected noise?)";
  fail(msg.str());
}

void run_iteration(const Engine& e, const RunConfig& cfg, int t,
                   std::vector<RollingGradientState>* states, IterationOutput& out,
                   const StepObserver* observer) {
  const auto perm = permutation_for(e, cfg.seed, t);
  Rng noise_rng(derive_seed(cfg.seed, static_cast<std::uint64_t>(t), kNoiseStream));
  Vector theta =
      init_params(cfg.model.init, e.d, derive_seed(cfg.seed, static_cast<std::uint64_t>(t), kInitStream));
  double v_prev = (*e.utility)(theta);
  check_finite(v_prev, t, perm.front());

  out.delta.assign(e.n, 0.0);
  out.position.assign(e.n, 0);
  if (cfg.record_gradients) out.records.assign(e.n, GradientRecord{});
  const double diag = e.noise.mode == NoiseMode::iid ? 1.0 : combine_diag(e.noise, t);

  for (std::size_t pos = 0; pos < perm.size(); ++pos) {
    const auto j = perm[pos];
    const Vector g = gradient(cfg.model, theta, e.x, e.y, e.parties[j]);
    if (observer) (*observer)(pos, j, theta, g);
    const PerturbedGradient perturbed = privatize(g, e.noise, noise_rng);
    Vector released = e.noise.mode == NoiseMode::iid
                          ? perturbed.value()
                          : release_correlated(perturbed, (*states)[j], diag);
    theta.noalias() -= cfg.model.learning_rate * released;
    const double v = (*e.utility)(theta);
    check_finite(v, t, j);
    out.delta[j] = v - v_prev;
    out.position[j] = pos;
    v_prev = v;
    if (cfg.record_gradients)
      out.records[j] = GradientRecord{clip_gradient(g, e.noise.clip_norm), perturbed.value(),
                                      std::move(released)};
  }
}

}  // namespace

SemivalueWeights semivalue_weights(const SemivalueSpec& spec) {
  const std::size_t n = spec.n;
  if (n == 0) fail("semivalue.n", "party count must be positive");
  if (n > 10000) fail("semivalue.n", "party count above 10^4 is not supported");
  const double nd = static_cast<double>(n);
  SemivalueWeights out;
  out.w.resize(static_cast<Eigen::Index>(n));
  out.p.resize(static_cast<Eigen::Index>(n));

  std::vector<double> lc(n);
  for (std::size_t r = 1; r <= n; ++r) lc[r - 1] = log_choose(nd - 1.0, static_cast<double>(r - 1));

  switch (spec.kind) {
    case SemivalueKind::shapley:
      for (std::size_t r = 1; r <= n; ++r) {
        out.p(static_cast<Eigen::Index>(r - 1)) = 1.0;
        out.w(static_cast<Eigen::Index>(r - 1)) = std::exp(-lc[r - 1]);
      }
      break;
    case SemivalueKind::banzhaf: {
      const double log_w = std::log(nd) - (nd - 1.0) * std::log(2.0);
      for (std::size_t r = 1; r <= n; ++r) {
        out.w(static_cast<Eigen::Index>(r - 1)) = std::exp(log_w);
        out.p(static_cast<Eigen::Index>(r - 1)) = std::exp(lc[r - 1] + log_w);
      }
      break;
    }
    case SemivalueKind::beta: {
      if (!(spec.alpha > 0.0)) fail("semivalue.alpha", "beta semivalue needs alpha > 0");
      if (!(spec.beta > 0.0)) fail("semivalue.beta", "beta semivalue needs beta > 0");
      std::vector<double> log_p(n);
      double peak = -std::numeric_limits<double>::infinity();
      for (std::size_t r = 1; r <= n; ++r) {
        const double rd = static_cast<double>(r);
        log_p[r - 1] = lc[r - 1] + log_beta(rd + spec.beta - 1.0, nd - rd + spec.alpha);
        peak = std::max(peak, log_p[r - 1]);
      }
      double total = 0.0;
      for (const double lp : log_p) total += std::exp(lp - peak);
      const double log_norm = peak + std::log(total) - std::log(nd);
      for (std::size_t r = 1; r <= n; ++r) {
        const double lp = log_p[r - 1] - log_norm;
        out.p(static_cast<Eigen::Index>(r - 1)) = std::exp(lp);
        out.w(static_cast<Eigen::Index>(r - 1)) = std::exp(lp - lc[r - 1]);
      }
      break;
    }
    case SemivalueKind::loo:
      out.w.setZero();
      out.p.setZero();
      out.w(static_cast<Eigen::Index>(n - 1)) = nd;
      out.p(static_cast<Eigen::Index>(n - 1)) = nd;
      break;
  }
  return out;
}

void RunConfig::validate() const {
  if (!dataset) fail("dataset", "run has no dataset");
  dataset->validate();
  model.validate();
  noise.validate();
  if (dataset->test_features.rows() == 0) fail("dataset", "run needs a non-empty test split");
  if (model.loss == LossKind::logistic_l2 && dataset->task != TaskKind::classification)
    fail("model.loss", "logistic model needs classification labels");
  if (model.loss == LossKind::logistic_l2 && dataset->n_classes != 2)
    fail("model.loss", "logistic model supports binary labels only");
  if (enumerate_permutations && dataset->n_parties > 8)
    fail("enumerate_permutations", "permutation enumeration supports at most 8 parties");
  if (threads < 1) fail("threads", "thread count must be positive");
}

Utility make_utility(const RunConfig& cfg) {
  if (!cfg.dataset) fail("dataset", "run has no dataset");
  return Utility(cfg.utility, cfg.model, design_matrix(cfg.model, cfg.dataset->test_features),
                 cfg.dataset->test_labels);
}

ValuationResult run_valuation(const RunConfig& cfg) {
  const Engine e = build_engine(cfg);
  const int k = e.iterations;
  const int kq = e.noise.burn_in_count();

  std::vector<IterationOutput> outputs(static_cast<std::size_t>(k));
  if (e.noise.mode == NoiseMode::iid && cfg.threads > 1) {
    const int workers = std::min(cfg.threads, k);
    std::vector<std::exception_ptr> errors(static_cast<std::size_t>(workers));
    std::vector<std::thread> pool;
    for (int w = 0; w < workers; ++w) {
      pool.emplace_back([&, w] {
        try {
          for (int t = 1 + w; t <= k; t += workers)
            run_iteration(e, cfg, t, nullptr, outputs[static_cast<std::size_t>(t - 1)], nullptr);
        } catch (...) {
          errors[static_cast<std::size_t>(w)] = std::current_exception();
        }
      });
    }
    for (auto& th : pool) th.join();
    for (const auto& err : errors)
      if (err) std::rethrow_exception(err);
  } else {
    std::vector<RollingGradientState> states(e.n);
    for (int t = 1; t <= k; ++t)
      run_iteration(e, cfg, t, &states, outputs[static_cast<std::size_t>(t - 1)], nullptr);
  }

  ValuationResult result;
  result.psi = Vector::Zero(static_cast<Eigen::Index>(e.n));
  result.marginals.assign(e.n, {});
  for (auto& m : result.marginals) m.reserve(static_cast<std::size_t>(k));
  if (cfg.record_gradients) result.gradients.assign(e.n, {});
  std::vector<int> retained(e.n, 0);

  for (int t = 1; t <= k; ++t) {
    auto& out = outputs[static_cast<std::size_t>(t - 1)];
    const bool keep = t > kq;
    for (std::size_t j = 0; j < e.n; ++j) {
      Marginal m;
      m.iteration = t;
      m.coefficient = e.weights.p(static_cast<Eigen::Index>(out.position[j]));
      m.delta = out.delta[j];
      m.retained = keep;
      if (keep) {
        const double c = ++retained[j];
        auto& psi = result.psi(static_cast<Eigen::Index>(j));
        psi = (c - 1.0) / c * psi + m.weighted() / c;
      }
      result.marginals[j].push_back(m);
      if (cfg.record_gradients) result.gradients[j].push_back(std::move(out.records[j]));
    }
    out = IterationOutput{};
  }

  result.permutations_used = k;
  result.burn_in_dropped = kq;
  if (k - kq >= 2) {
    auto stats = estimation_stats(result.marginals);
    result.mu = std::move(stats.mu);
    result.s_sq = std::move(stats.s_sq);
    result.mean_adjusted = std::move(stats.mean_adjusted);
  } else {
    result.mu = result.psi;
    result.s_sq = Vector::Constant(static_cast<Eigen::Index>(e.n), std::nan(""));
    result.mean_adjusted.assign(e.n, std::nullopt);
  }
  return result;
}

std::vector<std::vector<StepTrace>> trace_trajectories(const RunConfig& cfg) {
  RunConfig quiet = cfg;
  quiet.noise = no_dp_config(cfg.noise.budget, NoiseMode::iid);
  quiet.noise.clip_norm = cfg.noise.clip_norm;
  quiet.record_gradients = false;
  const Engine e = build_engine(quiet);

  std::vector<std::vector<StepTrace>> traces(e.n);
  for (auto& tr : traces) tr.reserve(static_cast<std::size_t>(e.iterations));
  const StepObserver observer = [&](std::size_t pos, std::size_t party, const Vector& theta,
                                    const Vector& g) {
    traces[party].push_back(StepTrace{pos, theta, clip_gradient(g, e.noise.clip_norm)});
  };
  IterationOutput scratch;
  for (int t = 1; t <= e.iterations; ++t) run_iteration(e, quiet, t, nullptr, scratch, &observer);
  return traces;
}

Vector exact_semivalue(const SetFunction& v, const SemivalueSpec& spec) {
  const std::size_t n = spec.n;
  if (n == 0 || n > 12) fail("semivalue.n", "exact enumeration supports 1 <= n <= 12");
  const auto weights = semivalue_weights(spec);
  const std::uint32_t full = (1u << n);
  std::vector<double> table(full);
  for (std::uint32_t s = 0; s < full; ++s) table[s] = v(s);

  Vector phi = Vector::Zero(static_cast<Eigen::Index>(n));
  for (std::size_t i = 0; i < n; ++i) {
    const std::uint32_t bit = 1u << i;
    double total = 0.0;
    for (std::uint32_t s = 0; s < full; ++s) {
      if (s & bit) continue;
      const int size = std::popcount(s);
      total += weights.w(size) / static_cast<double>(n) * (table[s | bit] - table[s]);
    }
    phi(static_cast<Eigen::Index>(i)) = total;
  }
  return phi;
}

Vector permutation_expectation(const SetFunction& v, const SemivalueSpec& spec) {
  const std::size_t n = spec.n;
  if (n == 0 || n > 9) fail("semivalue.n", "permutation enumeration supports 1 <= n <= 9");
  const auto weights = semivalue_weights(spec);
  std::vector<double> table(std::size_t{1} << n);
  for (std::uint32_t s = 0; s < table.size(); ++s) table[s] = v(s);

  std::vector<std::size_t> perm(n);
  std::iota(perm.begin(), perm.end(), std::size_t{0});
  Vector total = Vector::Zero(static_cast<Eigen::Index>(n));
  do {
    std::uint32_t coalition = 0;
    for (std::size_t pos = 0; pos < n; ++pos) {
      const auto j = perm[pos];
      const std::uint32_t next = coalition | (1u << j);
      total(static_cast<Eigen::Index>(j)) +=
          weights.p(static_cast<Eigen::Index>(pos)) * (table[next] - table[coalition]);
      coalition = next;
    }
  } while (std::next_permutation(perm.begin(), perm.end()));
  return total / static_cast<double>(factorial(n));
}

EstimationStats estimation_stats(const std::vector<std::vector<Marginal>>& marginals) {
  EstimationStats stats;
  const auto n = static_cast<Eigen::Index>(marginals.size());
  stats.mu.resize(n);
  stats.s_sq.resize(n);
  stats.mean_adjusted.resize(marginals.size());
  for (std::size_t j = 0; j < marginals.size(); ++j) {
    double sum = 0.0;
    int count = 0;
    for (const auto& m : marginals[j]) {
      if (!m.retained) continue;
      sum += m.weighted();
      ++count;
    }
    if (count < 2) fail("estimation statistics need at least 2 retained marginals per party");
    const double k = count;
    const double mu = sum / k;
    double ss = 0.0;
    for (const auto& m : marginals[j]) {
      if (!m.retained) continue;
      const double dev = m.weighted() - mu;
      ss += dev * dev;
    }
    const double s_sq = ss / (k * (k - 1.0));
    stats.mu(static_cast<Eigen::Index>(j)) = mu;
    stats.s_sq(static_cast<Eigen::Index>(j)) = s_sq;
    if (std::abs(mu) >= 1e-15) stats.mean_adjusted[j] = s_sq / std::abs(mu);
  }
  return stats;
}

FederatedResult run_federated(const RunConfig& cfg, const FederatedOptions& options) {
  if (options.permutations < 1) fail("federated.permutations", "need at least one permutation per round");
  if (!(options.burn_in >= 0.0 && options.burn_in < 1.0))
    fail("federated.q", "burn-in ratio must lie in [0, 1)");
  const Engine e = build_engine(cfg);
  const int rounds = e.noise.budget;
  const double rq = options.burn_in * rounds;
  if (std::abs(rq - std::round(rq)) > 1e-9 * std::max(1.0, rq))
    fail("federated.q", "R * q must be an integer");
  const int burn = static_cast<int>(std::round(rq));
  if (burn >= rounds) fail("federated.q", "burn-in leaves no rounds");

  Vector theta = init_params(cfg.model.init, e.d, derive_seed(cfg.seed, 0, kInitStream));
  std::vector<RollingGradientState> states(e.n);
  FederatedResult result;
  result.round_values = Matrix::Zero(rounds, static_cast<Eigen::Index>(e.n));
  std::vector<Vector> released(e.n);
  std::vector<std::size_t> perm(e.n);

  for (int t = 1; t <= rounds; ++t) {
    Rng noise_rng(derive_seed(cfg.seed, static_cast<std::uint64_t>(t), kNoiseStream));
    const double diag = e.noise.mode == NoiseMode::iid ? 1.0 : combine_diag(e.noise, t);
    for (std::size_t j = 0; j < e.n; ++j) {
      const Vector g = gradient(cfg.model, theta, e.x, e.y, e.parties[j]);
      const PerturbedGradient perturbed = privatize(g, e.noise, noise_rng);
      released[j] = e.noise.mode == NoiseMode::iid ? perturbed.value()
                                                   : release_correlated(perturbed, states[j], diag);
    }

    const double v0 = (*e.utility)(theta);
    check_finite(v0, t, 0);
    auto row = result.round_values.row(t - 1);
    for (int m = 1; m <= options.permutations; ++m) {
      std::iota(perm.begin(), perm.end(), std::size_t{0});
      Rng rng(derive_seed(cfg.seed, static_cast<std::uint64_t>(t), kPermStream,
                          static_cast<std::uint64_t>(m)));
      std::shuffle(perm.begin(), perm.end(), rng);
      Vector sum = Vector::Zero(static_cast<Eigen::Index>(e.d));
      double v_prev = v0;
      for (std::size_t pos = 0; pos < e.n; ++pos) {
        const auto j = perm[pos];
        sum += released[j];
        const Vector coalition_theta =
            theta - cfg.model.learning_rate * sum / static_cast<double>(pos + 1);
        const double v = (*e.utility)(coalition_theta);
        check_finite(v, t, j);
        row(static_cast<Eigen::Index>(j)) +=
            e.weights.p(static_cast<Eigen::Index>(pos)) * (v - v_prev);
        v_prev = v;
      }
    }
    row /= static_cast<double>(options.permutations);

    Vector step = Vector::Zero(static_cast<Eigen::Index>(e.d));
    for (const auto& r : released) step += r;
    theta -= cfg.model.learning_rate * step / static_cast<double>(e.n);
  }

  result.rounds_retained = rounds - burn;
  result.psi = result.round_values.bottomRows(result.rounds_retained).colwise().mean().transpose();
  return result;
}

const char* to_string(SemivalueKind kind) {
  switch (kind) {
    case SemivalueKind::shapley: return "shapley";
    case SemivalueKind::banzhaf: return "banzhaf";
    case SemivalueKind::beta: return "beta";
    case SemivalueKind::loo: return "loo";
  }
  return "unknown";
}

}  // namespace dpval
