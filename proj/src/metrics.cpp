#include "dpval/metrics.hpp"

#include <algorithm>
#include <cmath>
#include <limits>
#include <numeric>

namespace dpval {
namespace {

[[noreturn]] void fail(const std::string& field, const std::string& message) {
  throw Error("metrics", field, message);
}

constexpr std::uint64_t kProbeStream = 0x70726f6265ULL;

double abs_cos(const Vector& a, const Vector& b) {
  return std::abs(a.dot(b)) / (a.norm() * b.norm());
}

std::vector<std::size_t> removal_ranking(const Vector& psi, RemovalOrder order) {
  std::vector<std::size_t> idx(static_cast<std::size_t>(psi.size()));
  std::iota(idx.begin(), idx.end(), std::size_t{0});
  if (order == RemovalOrder::highest_first)
    std::stable_sort(idx.begin(), idx.end(),
                     [&](std::size_t a, std::size_t b) { return psi(a) > psi(b); });
  else if (order == RemovalOrder::lowest_first)
    std::stable_sort(idx.begin(), idx.end(),
                     [&](std::size_t a, std::size_t b) { return psi(a) < psi(b); });
  return idx;
}

}  // namespace

double auc_roc(std::span<const double> scores, const std::vector<bool>& positives) {
  if (scores.size() != positives.size()) fail("positives", "mask length does not match scores");
  const std::size_t n = scores.size();
  std::size_t n_pos = 0;
  for (std::size_t i = 0; i < n; ++i) {
    if (!std::isfinite(scores[i])) fail("scores", "non-finite score");
    if (positives[i]) ++n_pos;
  }
  const std::size_t n_neg = n - n_pos;
  if (n_pos == 0 || n_neg == 0) fail("positives", "AUC needs at least one positive and one negative");

  std::vector<std::size_t> order(n);
  std::iota(order.begin(), order.end(), std::size_t{0});
  std::sort(order.begin(), order.end(), [&](std::size_t a, std::size_t b) { return scores[a] < scores[b]; });
  double rank_sum = 0.0;
  for (std::size_t i = 0; i < n;) {
    std::size_t j = i;
    while (j + 1 < n && scores[order[j + 1]] == scores[order[i]]) ++j;
    const double midrank = 0.5 * static_cast<double>(i + j) + 1.0;
    for (std::size_t m = i; m <= j; ++m)
      if (positives[order[m]]) rank_sum += midrank;
    i = j + 1;
  }
  const double np = static_cast<double>(n_pos);
  return (rank_sum - np * (np + 1.0) / 2.0) / (np * static_cast<double>(n_neg));
}

RemovalCurve removal_curve(const Vector& psi, const PartitionedDataset& ds, const ModelSpec& model,
                           const UtilitySpec& utility, const RemovalOptions& options) {
  ds.validate();
  model.validate();
  if (static_cast<std::size_t>(psi.size()) != ds.n_parties)
    fail("psi", "value vector length does not match the party count");
  if (options.fractions.empty()) fail("fractions", "no removal fractions given");
  for (std::size_t i = 0; i < options.fractions.size(); ++i) {
    const double f = options.fractions[i];
    if (!(f >= 0.0 && f < 1.0)) fail("fractions", "removal fractions must lie in [0, 1)");
    if (i > 0 && !(f > options.fractions[i - 1]))
      fail("fractions", "removal fractions must be strictly increasing");
  }
  if (options.order == RemovalOrder::random && options.random_seeds < 5)
    fail("random_seeds", "random removal needs at least 5 seeds");
  if (options.epochs < 1) fail("epochs", "epochs must be positive");

  const Matrix x = design_matrix(model, ds.features);
  const auto members = ds.party_members();
  const Utility score(utility, model, design_matrix(model, ds.test_features), ds.test_labels);
  const std::size_t n = ds.n_parties;

  auto evaluate = [&](const std::vector<std::size_t>& ranking, std::size_t removed) {
    std::vector<bool> drop(n, false);
    for (std::size_t i = 0; i < removed; ++i) drop[ranking[i]] = true;
    std::vector<std::vector<std::size_t>> kept;
    for (std::size_t j = 0; j < n; ++j)
      if (!drop[j]) kept.push_back(members[j]);
    if (kept.empty()) fail("fractions", "removal would empty the training set");
    std::vector<std::size_t> order(kept.size());
    std::iota(order.begin(), order.end(), std::size_t{0});
    Vector theta = init_params(model.init, static_cast<std::size_t>(x.cols()));
    for (int e = 0; e < options.epochs; ++e) theta = train_one_pass(model, theta, x, ds.labels, kept, order);
    return score(theta);
  };

  RemovalCurve curve;
  curve.order = options.order;
  curve.fractions = options.fractions;
  const int repeats = options.order == RemovalOrder::random ? options.random_seeds : 1;
  std::vector<std::vector<double>> values(options.fractions.size());
  for (int s = 0; s < repeats; ++s) {
    auto ranking = removal_ranking(psi, options.order);
    if (options.order == RemovalOrder::random) {
      Rng rng(derive_seed(options.seed, static_cast<std::uint64_t>(s)));
      std::shuffle(ranking.begin(), ranking.end(), rng);
    }
    for (std::size_t i = 0; i < options.fractions.size(); ++i) {
      const auto removed =
          static_cast<std::size_t>(std::floor(options.fractions[i] * static_cast<double>(n)));
      values[i].push_back(evaluate(ranking, removed));
    }
  }
  for (const auto& v : values) {
    const double m = std::accumulate(v.begin(), v.end(), 0.0) / static_cast<double>(v.size());
    double se = 0.0;
    if (v.size() > 1) {
      double ss = 0.0;
      for (const double x_i : v) ss += (x_i - m) * (x_i - m);
      se = std::sqrt(ss / static_cast<double>(v.size() - 1) / static_cast<double>(v.size()));
    }
    curve.scores.push_back(m);
    curve.stderrs.push_back(se);
  }
  return curve;
}

SimilarityReport grad_similarity(const std::vector<std::vector<GradientRecord>>& records) {
  if (records.empty()) fail("records", "no gradient records (was record_gradients enabled?)");
  SimilarityReport report;
  double cos_total = 0.0;
  double l2_total = 0.0;
  std::size_t parties = 0;
  for (const auto& party : records) {
    double cos_sum = 0.0;
    double l2_sum = 0.0;
    std::size_t count = 0;
    for (const auto& r : party) {
      if (r.clipped.norm() == 0.0 || r.perturbed.norm() == 0.0 || r.released.norm() == 0.0) {
        ++report.skipped;
        continue;
      }
      cos_sum += abs_cos(r.clipped, r.released) - abs_cos(r.clipped, r.perturbed);
      l2_sum += (r.clipped - r.released).norm() - (r.clipped - r.perturbed).norm();
      ++count;
    }
    if (count == 0) continue;
    cos_total += cos_sum / static_cast<double>(count);
    l2_total += l2_sum / static_cast<double>(count);
    report.terms += count;
    ++parties;
  }
  if (parties == 0) fail("records", "every similarity term involved a zero-norm vector");
  report.delta_cos = cos_total / static_cast<double>(parties);
  report.delta_l2 = l2_total / static_cast<double>(parties);
  return report;
}

double noise_var_closed_form(const Vector& g_hat, int k, double clip_norm, double sigma, int t) {
  if (k < 1 || t < 1) fail("k", "k and t must be positive");
  const double c2 = clip_norm * clip_norm * sigma * sigma;
  const double kd = k;
  const double td = t;
  return 4.0 * g_hat.squaredNorm() * kd * c2 / td +
         2.0 * static_cast<double>(g_hat.size()) * kd * kd * c2 * c2 / (td * td);
}

double implicit_noise_variance(int t, int k, double clip_norm, double sigma, double sigma_g_sq) {
  NoiseConfig cfg;
  cfg.clip_norm = clip_norm;
  cfg.noise_multiplier = sigma;
  cfg.no_dp = sigma == 0.0;
  cfg.budget = k;
  cfg.mode = NoiseMode::corr_x;
  if (sigma_g_sq > 0.0) cfg.sigma_g_sq = sigma_g_sq;
  cfg.validate();
  const double kc = cfg.release_variance();
  // The first release is the perturbed gradient itself.
  const double diag = t == 1 ? 1.0 : combine_diag(cfg, t);
  const double off = t == 1 ? 0.0 : (1.0 - diag) / static_cast<double>(t - 1);
  const double off_sq = static_cast<double>(t - 1) * off * off;
  return kc * (off_sq + diag * diag) + sigma_g_sq * (off_sq + (1.0 - diag) * (1.0 - diag));
}

NpqSums npq_closed_form(int k, double clip_norm, double sigma, double sigma_g_sq, std::size_t d,
                        double q) {
  if (k < 1) fail("k", "k must be positive");
  if (d == 0) fail("d", "dimension must be positive");
  if (!(sigma_g_sq >= 0.0)) fail("sigma_g_sq", "sigma_g^2 must be non-negative");
  if (!(q >= 0.0 && q < 1.0)) fail("q", "burn-in ratio q must lie in [0, 1)");
  const double kq = q * k;
  if (std::abs(kq - std::round(kq)) > 1e-9 * std::max(1.0, kq)) fail("q", "k * q must be an integer");
  const int start = static_cast<int>(std::round(kq)) + 1;
  const double dd = static_cast<double>(d);
  const double fourth = dd * (dd + 2.0);
  NpqSums sums;
  for (int t = start; t <= k; ++t) {
    const double v = implicit_noise_variance(t, k, clip_norm, sigma, sigma_g_sq);
    sums.n += dd * v;
    sums.p += fourth * v * v;
    sums.q += std::sqrt(fourth) * v;
  }
  return sums;
}

double log_log_slope(std::span<const double> x, std::span<const double> y) {
  if (x.size() != y.size() || x.size() < 2) fail("points", "slope needs at least two points");
  double mx = 0.0, my = 0.0;
  for (std::size_t i = 0; i < x.size(); ++i) {
    if (!(x[i] > 0.0) || !(y[i] > 0.0)) return std::numeric_limits<double>::quiet_NaN();
    mx += std::log(x[i]);
    my += std::log(y[i]);
  }
  const double m = static_cast<double>(x.size());
  mx /= m;
  my /= m;
  double sxy = 0.0, sxx = 0.0;
  for (std::size_t i = 0; i < x.size(); ++i) {
    const double dx = std::log(x[i]) - mx;
    sxy += dx * (std::log(y[i]) - my);
    sxx += dx * dx;
  }
  if (sxx == 0.0) fail("ks", "slope needs distinct budgets");
  return sxy / sxx;
}

ProbeResult variance_scaling_probe(const RunConfig& base, NoiseMode mode, std::span<const int> ks,
                                   int trials) {
  if (ks.size() < 3) fail("ks", "probe needs at least 3 budgets");
  if (trials < 100) fail("trials", "probe needs at least 100 trials");
  for (std::size_t i = 0; i < ks.size(); ++i) {
    if (ks[i] < 2) fail("ks", "budgets must be at least 2");
    for (std::size_t j = 0; j < i; ++j)
      if (ks[j] == ks[i]) fail("ks", "budgets must be distinct");
  }
  const int k_max = *std::max_element(ks.begin(), ks.end());

  RunConfig traced = base;
  traced.noise.budget = k_max;
  traced.noise.mode = NoiseMode::iid;
  const auto traces = trace_trajectories(traced);
  const auto utility = make_utility(base);
  const std::size_t n = traces.size();
  SemivalueSpec sv = base.semivalue;
  sv.n = n;
  const auto weights = semivalue_weights(sv);
  const double alpha = base.model.learning_rate;

  // V(theta^p) does not depend on the noise.
  std::vector<std::vector<double>> v_before(n);
  for (std::size_t j = 0; j < n; ++j)
    for (const auto& step : traces[j]) v_before[j].push_back(utility(step.theta_before));

  ProbeResult result;
  result.mode = mode;
  std::vector<double> kx;
  std::vector<double> vy;
  for (const int k : ks) {
    NoiseConfig cfg = base.noise;
    cfg.budget = k;
    cfg.mode = mode;
    cfg.validate();
    const int burn = cfg.burn_in_count();

    ProbePoint point;
    point.k = k;
    point.psi.reserve(static_cast<std::size_t>(trials));
    for (int trial = 0; trial < trials; ++trial) {
      std::vector<RollingGradientState> states(n);
      Vector psi = Vector::Zero(static_cast<Eigen::Index>(n));
      const std::uint64_t trial_seed = derive_seed(base.seed, kProbeStream, static_cast<std::uint64_t>(trial));
      for (int t = 1; t <= k; ++t) {
        Rng rng(derive_seed(trial_seed, static_cast<std::uint64_t>(t)));
        const double diag = mode == NoiseMode::iid ? 1.0 : combine_diag(cfg, t);
        for (std::size_t j = 0; j < n; ++j) {
          const auto& step = traces[j][static_cast<std::size_t>(t - 1)];
          const PerturbedGradient g = privatize(step.clipped, cfg, rng);
          if (t <= burn) {
            if (mode != NoiseMode::iid) release_correlated(g, states[j], diag);
            continue;
          }
          const Vector released =
              mode == NoiseMode::iid ? g.value() : release_correlated(g, states[j], diag);
          const double m = utility(step.theta_before - alpha * released) -
                           v_before[j][static_cast<std::size_t>(t - 1)];
          psi(static_cast<Eigen::Index>(j)) += weights.p(static_cast<Eigen::Index>(step.position)) * m;
        }
      }
      psi /= static_cast<double>(k - burn);
      point.psi.push_back(std::move(psi));
    }

    double total = 0.0;
    for (std::size_t j = 0; j < n; ++j) {
      // Shifted by the first trial so identical trials give exactly zero.
      const double shift = point.psi.front()(static_cast<Eigen::Index>(j));
      double sum = 0.0, sum_sq = 0.0;
      for (const auto& p : point.psi) {
        const double dev = p(static_cast<Eigen::Index>(j)) - shift;
        sum += dev;
        sum_sq += dev * dev;
      }
      total += std::max(0.0, sum_sq - sum * sum / trials) / (trials - 1);
    }
    point.variance = total / static_cast<double>(n);
    kx.push_back(k);
    vy.push_back(point.variance);
    result.points.push_back(std::move(point));
  }
  result.slope = log_log_slope(kx, vy);
  return result;
}

const char* to_string(RemovalOrder order) {
  switch (order) {
    case RemovalOrder::highest_first: return "highest_first";
    case RemovalOrder::lowest_first: return "lowest_first";
    case RemovalOrder::random: return "random";
  }
  return "unknown";
}

}  // namespace dpval
