#include "dpval/valuation.hpp"

#include <doctest.h>

#include <algorithm>
#include <cmath>
#include <map>
#include <numeric>

using namespace dpval;

namespace {

double choose(int n, int k) {
  return std::exp(std::lgamma(n + 1.0) - std::lgamma(k + 1.0) - std::lgamma(n - k + 1.0));
}

double factorial(int n) { return std::tgamma(n + 1.0); }

// Textbook Shapley: sum over S not containing i of |S|! (n-|S|-1)! / n! * delta.
Vector shapley_oracle(const SetFunction& v, int n) {
  Vector phi = Vector::Zero(n);
  for (int i = 0; i < n; ++i)
    for (std::uint32_t s = 0; s < (1u << n); ++s) {
      if (s & (1u << i)) continue;
      const int size = std::popcount(s);
      phi(i) += factorial(size) * factorial(n - size - 1) / factorial(n) * (v(s | (1u << i)) - v(s));
    }
  return phi;
}

// Beta(alpha, beta) weights written directly from the Beta function:
// w(j) = n B(j + beta - 1, n - j + alpha) / B(alpha, beta).
double beta_w(int n, int j, double alpha, double beta) {
  return n * std::beta(j + beta - 1.0, n - j + alpha) / std::beta(alpha, beta);
}

SetFunction random_game(int n, std::uint64_t seed) {
  Rng rng(seed);
  std::uniform_real_distribution<double> u(-1.0, 1.0);
  std::vector<double> table(1u << n);
  for (auto& x : table) x = u(rng);
  table[0] = 0.0;
  return [table](std::uint32_t s) { return table[s]; };
}

std::shared_ptr<const PartitionedDataset> small_logistic(std::size_t n_samples, std::size_t parties,
                                                         std::uint64_t seed = 3) {
  auto ds = synth_classification(n_samples, 2, 2, seed, 2.0, 40);
  if (parties != n_samples) ds = partition(ds, parties, {PartitionKind::equal_chunks});
  return std::make_shared<const PartitionedDataset>(std::move(ds));
}

RunConfig logistic_run(std::shared_ptr<const PartitionedDataset> ds, int k, NoiseMode mode,
                       double sigma) {
  RunConfig cfg;
  cfg.dataset = std::move(ds);
  cfg.model.loss = LossKind::logistic_l2;
  cfg.model.l2 = 0.01;
  cfg.model.learning_rate = 0.2;
  cfg.noise.clip_norm = 1.0;
  cfg.noise.noise_multiplier = sigma;
  cfg.noise.budget = k;
  cfg.noise.mode = mode;
  cfg.seed = 21;
  return cfg;
}

}  // namespace

TEST_CASE("semivalue weights satisfy the normalization") {
  for (int n : {1, 2, 3, 7, 50, 1000}) {
    std::vector<SemivalueSpec> specs{{SemivalueKind::shapley, std::size_t(n)},
                                     {SemivalueKind::banzhaf, std::size_t(n)},
                                     {SemivalueKind::beta, std::size_t(n), 4.0, 1.0},
                                     {SemivalueKind::beta, std::size_t(n), 16.0, 1.0},
                                     {SemivalueKind::beta, std::size_t(n), 0.5, 2.0},
                                     {SemivalueKind::loo, std::size_t(n)}};
    for (const auto& spec : specs) {
      const auto w = semivalue_weights(spec);
      double sum_w = 0.0;
      for (int r = 1; r <= n; ++r) sum_w += choose(n - 1, r - 1) * w.w(r - 1);
      CHECK(std::abs(sum_w - n) < 1e-9 * n);
      CHECK(std::abs(w.p.sum() - n) < 1e-9 * n);
      for (int r = 1; r <= std::min(n, 40); ++r)
        CHECK(w.p(r - 1) == doctest::Approx(choose(n - 1, r - 1) * w.w(r - 1)).epsilon(1e-9));
    }
  }
}

TEST_CASE("named semivalues") {
  const int n = 6;
  const auto shapley = semivalue_weights({SemivalueKind::shapley, n});
  const auto uniform_beta = semivalue_weights({SemivalueKind::beta, n, 1.0, 1.0});
  CHECK((shapley.p.array() == 1.0).all());
  CHECK((shapley.w - uniform_beta.w).cwiseAbs().maxCoeff() < 1e-9);
  CHECK((shapley.p - uniform_beta.p).cwiseAbs().maxCoeff() < 1e-9);

  const auto banzhaf = semivalue_weights({SemivalueKind::banzhaf, n});
  CHECK((banzhaf.w.array() - n / 32.0).abs().maxCoeff() < 1e-15);

  for (auto [a, b] : {std::pair{4.0, 1.0}, std::pair{16.0, 1.0}, std::pair{2.0, 3.0}}) {
    const auto w = semivalue_weights({SemivalueKind::beta, n, a, b});
    for (int j = 1; j <= n; ++j) CHECK(w.w(j - 1) == doctest::Approx(beta_w(n, j, a, b)).epsilon(1e-10));
  }
  // Beta(16, 1) favours small coalitions.
  const auto b16 = semivalue_weights({SemivalueKind::beta, n, 16.0, 1.0});
  CHECK(b16.w(0) > b16.w(n - 1));

  const auto loo = semivalue_weights({SemivalueKind::loo, 4});
  CHECK(loo.w(3) == 4.0);
  CHECK(loo.w.head(3).isZero(0.0));

  CHECK_THROWS_AS(semivalue_weights({SemivalueKind::shapley, 0}), Error);
  CHECK_THROWS_AS(semivalue_weights({SemivalueKind::shapley, 10001}), Error);
  CHECK_THROWS_AS(semivalue_weights({SemivalueKind::beta, 3, 0.0, 1.0}), Error);
}

TEST_CASE("exact semivalues on hand-computed games") {
  const std::vector<double> table{0, 1, 2, 4, 0, 1, 3, 6};
  const SetFunction v = [&](std::uint32_t s) { return table[s]; };

  const Vector sh = exact_semivalue(v, {SemivalueKind::shapley, 3});
  CHECK(sh(0) == doctest::Approx(11.0 / 6.0));
  CHECK(sh(1) == doctest::Approx(10.0 / 3.0));
  CHECK(sh(2) == doctest::Approx(5.0 / 6.0));

  const Vector bz = exact_semivalue(v, {SemivalueKind::banzhaf, 3});
  CHECK(bz(0) == doctest::Approx(7.0 / 4.0));
  CHECK(bz(1) == doctest::Approx(13.0 / 4.0));
  CHECK(bz(2) == doctest::Approx(3.0 / 4.0));

  const Vector loo = exact_semivalue(v, {SemivalueKind::loo, 3});
  CHECK(loo(0) == doctest::Approx(3.0));
  CHECK(loo(1) == doctest::Approx(5.0));
  CHECK(loo(2) == doctest::Approx(2.0));

  const SetFunction additive = [](std::uint32_t s) { return double(std::popcount(s)); };
  for (auto kind : {SemivalueKind::shapley, SemivalueKind::banzhaf})
    CHECK((exact_semivalue(additive, {kind, 5}).array() - 1.0).abs().maxCoeff() < 1e-12);

  const SetFunction unanimity = [](std::uint32_t s) { return s == 7u ? 1.0 : 0.0; };
  CHECK((exact_semivalue(unanimity, {SemivalueKind::shapley, 3}).array() - 1.0 / 3.0).abs().maxCoeff() <
        1e-12);
}

TEST_CASE("permutation estimator is unbiased on random games") {
  for (int n : {3, 4, 5, 6}) {
    for (std::uint64_t g = 0; g < 3; ++g) {
      const auto v = random_game(n, 100 * n + g);
      CHECK((exact_semivalue(v, {SemivalueKind::shapley, std::size_t(n)}) - shapley_oracle(v, n))
                .cwiseAbs()
                .maxCoeff() < 1e-12);
      for (SemivalueSpec spec : {SemivalueSpec{SemivalueKind::shapley}, SemivalueSpec{SemivalueKind::banzhaf},
                                 SemivalueSpec{SemivalueKind::beta, 0, 4.0, 1.0},
                                 SemivalueSpec{SemivalueKind::beta, 0, 16.0, 1.0},
                                 SemivalueSpec{SemivalueKind::loo}}) {
        spec.n = std::size_t(n);
        const Vector a = exact_semivalue(v, spec);
        const Vector b = permutation_expectation(v, spec);
        CHECK((a - b).cwiseAbs().maxCoeff() < 1e-12);
      }
    }
  }
}

TEST_CASE("estimation statistics") {
  std::vector<std::vector<Marginal>> m(2);
  for (int t = 1; t <= 4; ++t) m[0].push_back({t, 1.0, double(t), true});
  for (int t = 1; t <= 4; ++t) m[1].push_back({t, 2.0, t <= 2 ? 100.0 : 0.5, t > 2});
  const auto s = estimation_stats(m);
  CHECK(s.mu(0) == doctest::Approx(2.5));
  CHECK(s.s_sq(0) == doctest::Approx(5.0 / 12.0));
  CHECK(*s.mean_adjusted[0] == doctest::Approx(1.0 / 6.0));
  CHECK(s.mu(1) == doctest::Approx(1.0));
  CHECK(s.s_sq(1) == 0.0);

  std::vector<std::vector<Marginal>> zero(1);
  zero[0] = {{1, 1.0, 0.0, true}, {2, 1.0, 0.0, true}};
  CHECK_FALSE(estimation_stats(zero).mean_adjusted[0].has_value());
  zero[0].pop_back();
  CHECK_THROWS_AS(estimation_stats(zero), Error);
}

TEST_CASE("engine replay over every permutation") {
  // Independent re-implementation of the noise-free engine: each order starts
  // from zeros and takes one gradient step per party.
  const auto ds = small_logistic(12, 4);
  auto cfg = logistic_run(ds, 1, NoiseMode::iid, 0.0);
  cfg.noise = no_dp_config(1);
  cfg.noise.clip_norm = 0.5;
  cfg.enumerate_permutations = true;
  cfg.semivalue = {SemivalueKind::beta, 0, 4.0, 1.0};
  const auto result = run_valuation(cfg);
  CHECK(result.permutations_used == 24);

  const Matrix x = design_matrix(cfg.model, ds->features);
  const Utility v = make_utility(cfg);
  const auto parties = ds->party_members();
  const auto w = semivalue_weights({SemivalueKind::beta, 4, 4.0, 1.0});
  std::vector<std::size_t> perm{0, 1, 2, 3};
  Vector psi = Vector::Zero(4);
  int orders = 0;
  do {
    Vector theta = Vector::Zero(3);
    for (std::size_t pos = 0; pos < 4; ++pos) {
      const auto j = perm[pos];
      const double before = v(theta);
      Vector g = gradient(cfg.model, theta, x, ds->labels, parties[j]);
      if (g.norm() > 0.5) g *= 0.5 / g.norm();
      theta -= cfg.model.learning_rate * g;
      psi(j) += w.p(pos) * (v(theta) - before);
    }
    ++orders;
  } while (std::next_permutation(perm.begin(), perm.end()));
  psi /= orders;
  CHECK((psi - result.psi).cwiseAbs().maxCoeff() < 1e-12);
}

TEST_CASE("shapley marginals telescope within an iteration") {
  auto cfg = logistic_run(small_logistic(10, 10), 5, NoiseMode::iid, 0.0);
  cfg.noise = no_dp_config(5);
  const auto r = run_valuation(cfg);
  const Utility v = make_utility(cfg);
  const auto traces = trace_trajectories(cfg);
  for (int t = 0; t < 5; ++t) {
    double sum = 0.0;
    for (const auto& party : r.marginals) sum += party[t].delta;
    // The last party's update ends the pass.
    for (const auto& tr : traces) {
      if (tr[t].position != 9) continue;
      const Vector end = tr[t].theta_before - cfg.model.learning_rate * tr[t].clipped;
      CHECK(sum == doctest::Approx(v(end) - v(Vector::Zero(3))).epsilon(1e-10));
    }
  }
}

TEST_CASE("streaming psi equals the offline mean") {
  auto cfg = logistic_run(small_logistic(8, 8), 40, NoiseMode::corr_y, 2.0);
  cfg.noise.burn_in = 0.25;
  cfg.semivalue = {SemivalueKind::banzhaf};
  const auto r = run_valuation(cfg);
  CHECK(r.burn_in_dropped == 10);
  for (std::size_t j = 0; j < 8; ++j) {
    double sum = 0.0;
    int kept = 0;
    for (const auto& m : r.marginals[j]) {
      if (!m.retained) continue;
      CHECK(m.iteration > 10);
      sum += m.weighted();
      ++kept;
    }
    CHECK(kept == 30);
    CHECK(std::abs(sum / kept - r.psi(static_cast<Eigen::Index>(j))) <= 1e-12 * std::max(1.0, std::abs(sum / kept)));
    CHECK(r.mu(static_cast<Eigen::Index>(j)) == doctest::Approx(r.psi(static_cast<Eigen::Index>(j))));
  }
}

TEST_CASE("single party") {
  auto cfg = logistic_run(small_logistic(6, 1), 3, NoiseMode::iid, 0.0);
  cfg.noise = no_dp_config(3);
  const auto r = run_valuation(cfg);
  const Utility v = make_utility(cfg);
  const Matrix x = design_matrix(cfg.model, cfg.dataset->features);
  Vector g = gradient(cfg.model, Vector::Zero(3), x, cfg.dataset->labels);
  if (g.norm() > 1.0) g /= g.norm();
  const double delta = v(-cfg.model.learning_rate * g) - v(Vector::Zero(3));
  CHECK(r.psi(0) == doctest::Approx(delta));
  CHECK(r.s_sq(0) == doctest::Approx(0.0));
}

TEST_CASE("sampled permutations are uniform") {
  auto cfg = logistic_run(small_logistic(4, 4), 24000, NoiseMode::iid, 0.0);
  cfg.noise = no_dp_config(24000);
  const auto traces = trace_trajectories(cfg);
  std::map<std::vector<std::size_t>, int> counts;
  for (int t = 0; t < 24000; ++t) {
    std::vector<std::size_t> order(4);
    for (std::size_t j = 0; j < 4; ++j) order[traces[j][t].position] = j;
    ++counts[order];
  }
  CHECK(counts.size() == 24);
  double chi2 = 0.0;
  for (const auto& [order, c] : counts) chi2 += (c - 1000.0) * (c - 1000.0) / 1000.0;
  // 23 degrees of freedom; 49.73 is the 0.999 quantile.
  CHECK(chi2 < 49.73);
}

TEST_CASE("reproducibility") {
  auto cfg = logistic_run(small_logistic(10, 10), 30, NoiseMode::iid, 1.5);
  const auto a = run_valuation(cfg);
  CHECK(run_valuation(cfg).psi == a.psi);
  cfg.threads = 3;
  const auto b = run_valuation(cfg);
  CHECK(b.psi == a.psi);
  CHECK(b.s_sq == a.s_sq);
  cfg.seed = 22;
  CHECK(run_valuation(cfg).psi != a.psi);
}

TEST_CASE("recorded gradients follow the prefix mean") {
  auto cfg = logistic_run(small_logistic(6, 6), 8, NoiseMode::corr_x, 1.0);
  cfg.record_gradients = true;
  const auto r = run_valuation(cfg);
  REQUIRE(r.gradients.size() == 6);
  for (const auto& party : r.gradients) {
    REQUIRE(party.size() == 8);
    Vector sum = Vector::Zero(3);
    for (std::size_t t = 0; t < 8; ++t) {
      CHECK(party[t].clipped.norm() <= 1.0 + 1e-12);
      sum += party[t].perturbed;
      CHECK((party[t].released - sum / double(t + 1)).cwiseAbs().maxCoeff() < 1e-12);
    }
  }

  cfg.noise.mode = NoiseMode::iid;
  const auto iid = run_valuation(cfg);
  for (const auto& party : iid.gradients)
    for (const auto& rec : party) CHECK(rec.released == rec.perturbed);
}

TEST_CASE("run validation") {
  RunConfig cfg;
  CHECK_THROWS_AS(cfg.validate(), Error);
  cfg = logistic_run(small_logistic(10, 10), 5, NoiseMode::iid, 1.0);
  cfg.enumerate_permutations = true;
  CHECK_THROWS_AS(run_valuation(cfg), Error);
  cfg.enumerate_permutations = false;
  cfg.dataset = std::make_shared<const PartitionedDataset>(synth_regression(10, 2, 0, 0.1));
  CHECK_THROWS_AS(run_valuation(cfg), Error);
  cfg.model.loss = LossKind::mse_linear;
  cfg.threads = 0;
  CHECK_THROWS_AS(run_valuation(cfg), Error);

  cfg = logistic_run(small_logistic(10, 10), 5, NoiseMode::iid, 1.0);
  cfg.model.learning_rate = 1e300;
  CHECK_THROWS_WITH_AS(run_valuation(cfg), doctest::Contains("non-finite utility"), Error);
}

TEST_CASE("federated attribution") {
  auto cfg = logistic_run(small_logistic(30, 3), 10, NoiseMode::iid, 0.0);
  cfg.noise = no_dp_config(10);
  FederatedOptions opt;
  opt.permutations = 7;
  opt.burn_in = 0.2;
  const auto r = run_federated(cfg, opt);
  CHECK(r.round_values.rows() == 10);
  CHECK(r.rounds_retained == 8);
  CHECK(r.psi.isApprox(r.round_values.bottomRows(8).colwise().mean().transpose()));

  // Shapley efficiency in the first round: the values add up to the gain of
  // the full averaged update from the zero model.
  const Utility v = make_utility(cfg);
  const Matrix x = design_matrix(cfg.model, cfg.dataset->features);
  Vector mean = Vector::Zero(3);
  for (const auto& rows : cfg.dataset->party_members()) {
    Vector g = gradient(cfg.model, Vector::Zero(3), x, cfg.dataset->labels, rows);
    if (g.norm() > 1.0) g /= g.norm();
    mean += g / 3.0;
  }
  CHECK(r.round_values.row(0).sum() ==
        doctest::Approx(v(-cfg.model.learning_rate * mean) - v(Vector::Zero(3))).epsilon(1e-10));

  opt.burn_in = 0.25;
  CHECK_THROWS_AS(run_federated(cfg, opt), Error);
  opt.burn_in = 0.2;
  opt.permutations = 0;
  CHECK_THROWS_AS(run_federated(cfg, opt), Error);
}
