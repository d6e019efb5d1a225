#include "dpval/metrics.hpp"

#include <doctest.h>

#include <cmath>
#include <numeric>

using namespace dpval;

namespace {

double pairwise_auc(const std::vector<double>& s, const std::vector<bool>& pos) {
  double wins = 0.0, pairs = 0.0;
  for (std::size_t i = 0; i < s.size(); ++i)
    for (std::size_t j = 0; j < s.size(); ++j) {
      if (!pos[i] || pos[j]) continue;
      pairs += 1.0;
      wins += s[i] > s[j] ? 1.0 : (s[i] == s[j] ? 0.5 : 0.0);
    }
  return wins / pairs;
}

double sample_var(const std::vector<double>& v) {
  const double m = std::accumulate(v.begin(), v.end(), 0.0) / double(v.size());
  double ss = 0.0;
  for (double x : v) ss += (x - m) * (x - m);
  return ss / double(v.size() - 1);
}

RunConfig regression_run(int k) {
  auto ds = partition(synth_regression(40, 3, 7, 0.1, 40), 4, {PartitionKind::equal_chunks});
  RunConfig cfg;
  cfg.dataset = std::make_shared<const PartitionedDataset>(std::move(ds));
  cfg.model.learning_rate = 0.1;
  cfg.noise.clip_norm = 1.0;
  cfg.noise.noise_multiplier = 2.0;
  cfg.noise.budget = k;
  cfg.seed = 4;
  return cfg;
}

}  // namespace

TEST_CASE("auc") {
  const std::vector<double> s{1, 2, 2, 3};
  const std::vector<bool> pos{false, true, false, true};
  CHECK(auc_roc(s, pos) == doctest::Approx(0.875));
  CHECK(auc_roc(std::vector<double>{1, 2, 3, 4}, {false, false, true, true}) == 1.0);
  CHECK(auc_roc(std::vector<double>{1, 2, 3, 4}, {true, true, false, false}) == 0.0);
  CHECK(auc_roc(std::vector<double>{5, 5, 5}, {true, false, false}) == 0.5);

  Rng rng(3);
  std::uniform_int_distribution<int> coarse(0, 9);
  std::bernoulli_distribution coin(0.3);
  for (int rep = 0; rep < 20; ++rep) {
    std::vector<double> scores(60);
    std::vector<bool> labels(60);
    for (std::size_t i = 0; i < 60; ++i) {
      scores[i] = coarse(rng);  // plenty of ties
      labels[i] = coin(rng);
    }
    labels[0] = true;
    labels[1] = false;
    const double a = auc_roc(scores, labels);
    CHECK(a == doctest::Approx(pairwise_auc(scores, labels)).epsilon(1e-12));

    std::vector<double> ex(scores), affine(scores);
    for (auto& x : ex) x = std::exp(x);
    for (auto& x : affine) x = 3.0 * x - 7.0;
    CHECK(auc_roc(ex, labels) == a);
    CHECK(auc_roc(affine, labels) == a);
  }

  CHECK_THROWS_AS(auc_roc(std::vector<double>{1, 2}, {true, true}), Error);
  CHECK_THROWS_AS(auc_roc(std::vector<double>{1, 2}, {true}), Error);
  CHECK_THROWS_AS(auc_roc(std::vector<double>{1, std::nan("")}, {true, false}), Error);
}

TEST_CASE("log-log slope") {
  const std::vector<double> x{1, 2, 4, 8};
  std::vector<double> y;
  for (double v : x) y.push_back(3.0 * v * v);
  CHECK(log_log_slope(x, y) == doctest::Approx(2.0));
  y[2] = 0.0;
  CHECK(std::isnan(log_log_slope(x, y)));
}

TEST_CASE("similarity deltas") {
  Vector c(2), p(2), r(2);
  c << 1, 0;
  p << 0, 1;
  r << 1, 1;
  std::vector<std::vector<GradientRecord>> recs{{{c, p, r}, {Vector::Zero(2), p, r}}};
  const auto rep = grad_similarity(recs);
  CHECK(rep.delta_cos == doctest::Approx(1.0 / std::sqrt(2.0)));
  CHECK(rep.delta_l2 == doctest::Approx(1.0 - std::sqrt(2.0)));
  CHECK(rep.terms == 1);
  CHECK(rep.skipped == 1);

  // Parties are averaged after their own terms.
  Vector r2(2);
  r2 << -1, 0;
  recs.push_back({{c, p, r2}, {c, p, r2}, {c, p, r2}});
  CHECK(grad_similarity(recs).delta_cos == doctest::Approx(0.5 * (1.0 / std::sqrt(2.0) + 1.0)));
  CHECK_THROWS_AS(grad_similarity({}), Error);
}

TEST_CASE("closed-form noise variance against Monte Carlo") {
  Rng rng(17);
  Vector g(3);
  g << 0.4, -0.2, 0.5;
  const int k = 5, t = 3;
  const double c = 1.5, sigma = 0.7;
  std::normal_distribution<double> plain(0.0, std::sqrt(double(k)) * c * sigma);
  std::normal_distribution<double> averaged(0.0, std::sqrt(double(k) / t) * c * sigma);
  std::vector<double> a, b;
  for (int i = 0; i < 1000000; ++i) {
    Vector z1(3), z2(3);
    for (int j = 0; j < 3; ++j) {
      z1(j) = plain(rng);
      z2(j) = averaged(rng);
    }
    a.push_back((g + z1).squaredNorm());
    b.push_back((g + z2).squaredNorm());
  }
  CHECK(sample_var(a) == doctest::Approx(noise_var_closed_form(g, k, c, sigma)).epsilon(0.02));
  CHECK(sample_var(b) == doctest::Approx(noise_var_closed_form(g, k, c, sigma, t)).epsilon(0.02));
}

TEST_CASE("implicit noise variance") {
  for (int t : {1, 2, 7, 20})
    CHECK(implicit_noise_variance(t, 20, 1.0, 1.0, 0.0) == doctest::Approx(20.0 / t));
  // With sigma_g^2 the first iterations keep more of the fresh noise.
  CHECK(implicit_noise_variance(1, 20, 1.0, 1.0, 5.0) == doctest::Approx(20.0));
  CHECK(implicit_noise_variance(10, 20, 1.0, 1.0, 5.0) > 20.0 / 10);
}

TEST_CASE("npq sums") {
  const auto s = npq_closed_form(4, 1.0, 1.0, 0.0, 1, 0.0);
  CHECK(s.n == doctest::Approx(25.0 / 3.0).epsilon(1e-14));
  // d = 1: P = 3 sum (4/t)^2, Q = sqrt(3) N.
  CHECK(s.p == doctest::Approx(3.0 * 16.0 * (1 + 0.25 + 1.0 / 9 + 1.0 / 16)));
  CHECK(s.q == doctest::Approx(std::sqrt(3.0) * 25.0 / 3.0));

  for (int k : {10, 100, 1000}) {
    for (std::size_t d : {1u, 3u}) {
      const double c = 0.8, sigma = 1.3;
      const double kc = k * c * c * sigma * sigma;
      const auto full = npq_closed_form(k, c, sigma, 0.0, d, 0.0);
      CHECK(full.n <= d * kc * (1.0 + std::log(double(k))));
      const auto tail = npq_closed_form(k, c, sigma, 0.0, d, 1.0 / k);
      const double dd = double(d);
      CHECK(tail.n == doctest::Approx(full.n - dd * kc).epsilon(1e-13));
      CHECK(tail.p == doctest::Approx(full.p - dd * (dd + 2) * kc * kc).epsilon(1e-13));
    }
  }
  CHECK_THROWS_AS(npq_closed_form(10, 1.0, 1.0, 0.0, 1, 0.25), Error);
}

TEST_CASE("variance probe") {
  const std::vector<int> ks{4, 8, 16};
  SUBCASE("no noise gives zero variance") {
    auto cfg = regression_run(16);
    cfg.noise = no_dp_config(16);
    const auto r = variance_scaling_probe(cfg, NoiseMode::iid, ks, 100);
    for (const auto& p : r.points) CHECK(p.variance == 0.0);
    CHECK(std::isnan(r.slope));
  }
  SUBCASE("trials are reproducible and reuse the frozen trajectory") {
    const auto cfg = regression_run(16);
    const auto a = variance_scaling_probe(cfg, NoiseMode::corr_x, ks, 100);
    const auto b = variance_scaling_probe(cfg, NoiseMode::corr_x, ks, 100);
    REQUIRE(a.points.size() == 3);
    CHECK(a.points[2].psi[5] == b.points[2].psi[5]);
    CHECK(a.points[0].variance > 0.0);
    CHECK(std::isfinite(a.slope));
  }
  SUBCASE("errors") {
    const auto cfg = regression_run(16);
    CHECK_THROWS_AS(variance_scaling_probe(cfg, NoiseMode::iid, std::vector<int>{4, 8}, 100), Error);
    CHECK_THROWS_AS(variance_scaling_probe(cfg, NoiseMode::iid, ks, 99), Error);
    CHECK_THROWS_AS(variance_scaling_probe(cfg, NoiseMode::iid, std::vector<int>{4, 4, 8}, 100), Error);
  }
}

TEST_CASE("removal curves") {
  auto ds = synth_classification(12, 2, 2, 2, 2.0, 30);
  ModelSpec model;
  model.loss = LossKind::logistic_l2;
  model.l2 = 0.01;
  model.learning_rate = 0.3;
  const UtilitySpec utility{UtilityKind::test_accuracy};
  Vector psi(12);
  for (int i = 0; i < 12; ++i) psi(i) = (i * 5) % 12;  // a permutation of 0..11

  RemovalOptions opt;
  opt.fractions = {0.0, 0.25, 0.5};
  const auto hi = removal_curve(psi, ds, model, utility, opt);
  opt.order = RemovalOrder::lowest_first;
  const auto lo = removal_curve(psi, ds, model, utility, opt);
  opt.order = RemovalOrder::random;
  const auto rnd = removal_curve(psi, ds, model, utility, opt);
  CHECK(hi.scores[0] == lo.scores[0]);
  CHECK(hi.scores[0] == rnd.scores[0]);
  CHECK(rnd.stderrs[0] == 0.0);
  CHECK(hi.stderrs[1] == 0.0);

  // Oracle: drop the 3 highest-valued samples by hand and retrain.
  const Matrix x = design_matrix(model, ds.features);
  std::vector<std::vector<std::size_t>> kept;
  for (std::size_t j = 0; j < 12; ++j)
    if (psi(static_cast<Eigen::Index>(j)) < 9) kept.push_back({j});
  std::vector<std::size_t> order(kept.size());
  std::iota(order.begin(), order.end(), std::size_t{0});
  const Vector theta = train_one_pass(model, Vector::Zero(3), x, ds.labels, kept, order);
  const Utility v(utility, model, design_matrix(model, ds.test_features), ds.test_labels);
  CHECK(hi.scores[1] == v(theta));

  opt.fractions = {0.5, 0.25};
  CHECK_THROWS_AS(removal_curve(psi, ds, model, utility, opt), Error);
  opt.fractions = {0.0};
  opt.random_seeds = 4;
  CHECK_THROWS_AS(removal_curve(psi, ds, model, utility, opt), Error);
  CHECK_THROWS_AS(removal_curve(Vector::Zero(3), ds, model, utility, {{0.0}}), Error);
}
