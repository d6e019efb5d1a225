#include "dpval/experiment.hpp"

#include <openssl/evp.h>

#include <algorithm>
#include <charconv>
#include <cmath>
#include <cstdio>
#include <cstdlib>
#include <fstream>
#include <map>
#include <set>
#include <sstream>

namespace dpval {

using nlohmann::json;
namespace fs = std::filesystem;

namespace {

[[noreturn]] void config_error(const std::string& field, const std::string& message) {
  throw Error("config", field, message);
}

// Typed access to one JSON object with dotted field names in errors and a
// check for unrecognised keys.
// Parsed JSON keeps small literals as signed, so accept either kind.
bool is_non_negative_integer(const json& v) {
  return v.is_number_unsigned() || (v.is_number_integer() && v.get<std::int64_t>() >= 0);
}

class Section {
 public:
  Section(const json& obj, std::string prefix) : obj_(obj), prefix_(std::move(prefix)) {
    if (!obj_.is_object()) config_error(prefix_.empty() ? "<root>" : prefix_, "expected an object");
  }

  std::string field(const std::string& key) const { return prefix_.empty() ? key : prefix_ + "." + key; }

  bool has(const std::string& key) {
    seen_.insert(key);
    return obj_.contains(key) && !obj_.at(key).is_null();
  }

  const json& raw(const std::string& key) {
    seen_.insert(key);
    return obj_.at(key);
  }

  Section child(const std::string& key) { return Section(raw(key), field(key)); }

  double number(const std::string& key, double fallback) {
    if (!has(key)) return fallback;
    const auto& v = obj_.at(key);
    if (!v.is_number()) config_error(field(key), "expected a number");
    return v.get<double>();
  }

  std::optional<double> optional_number(const std::string& key) {
    if (!has(key)) return std::nullopt;
    return number(key, 0.0);
  }

  std::int64_t integer(const std::string& key, std::int64_t fallback) {
    if (!has(key)) return fallback;
    const auto& v = obj_.at(key);
    if (!v.is_number_integer()) config_error(field(key), "expected an integer");
    return v.get<std::int64_t>();
  }

  std::uint64_t unsigned_integer(const std::string& key, std::uint64_t fallback) {
    if (!has(key)) return fallback;
    const auto& v = obj_.at(key);
    if (!is_non_negative_integer(v)) config_error(field(key), "expected a non-negative integer");
    return v.get<std::uint64_t>();
  }

  bool boolean(const std::string& key, bool fallback) {
    if (!has(key)) return fallback;
    const auto& v = obj_.at(key);
    if (!v.is_boolean()) config_error(field(key), "expected true or false");
    return v.get<bool>();
  }

  std::string string(const std::string& key, const std::string& fallback) {
    if (!has(key)) return fallback;
    const auto& v = obj_.at(key);
    if (!v.is_string()) config_error(field(key), "expected a string");
    return v.get<std::string>();
  }

  template <typename T, typename Convert>
  std::vector<T> list(const std::string& key, std::vector<T> fallback, Convert convert) {
    if (!has(key)) return fallback;
    const auto& v = obj_.at(key);
    if (!v.is_array()) config_error(field(key), "expected a list");
    std::vector<T> out;
    for (std::size_t i = 0; i < v.size(); ++i)
      out.push_back(convert(v[i], field(key) + "[" + std::to_string(i) + "]"));
    return out;
  }

  void finish() const {
    for (const auto& [key, value] : obj_.items())
      if (!seen_.count(key)) config_error(field(key), "unknown field");
  }

 private:
  const json& obj_;
  std::string prefix_;
  std::set<std::string> seen_;
};

double as_number(const json& v, const std::string& field) {
  if (!v.is_number()) config_error(field, "expected a number");
  return v.get<double>();
}

std::uint64_t as_unsigned(const json& v, const std::string& field) {
  if (!is_non_negative_integer(v)) config_error(field, "expected a non-negative integer");
  return v.get<std::uint64_t>();
}

int as_int(const json& v, const std::string& field) {
  if (!v.is_number_integer()) config_error(field, "expected an integer");
  return v.get<int>();
}

std::string as_string(const json& v, const std::string& field) {
  if (!v.is_string()) config_error(field, "expected a string");
  return v.get<std::string>();
}

template <typename Enum>
Enum pick(const std::string& field, const std::string& text,
          std::initializer_list<std::pair<const char*, Enum>> options) {
  std::string allowed;
  for (const auto& [name, value] : options) {
    if (text == name) return value;
    allowed += allowed.empty() ? name : std::string(", ") + name;
  }
  config_error(field, "unknown value '" + text + "' (expected one of: " + allowed + ")");
}

const char* loss_name(LossKind k) { return k == LossKind::mse_linear ? "mse_linear" : "logistic_l2"; }
const char* utility_name(UtilityKind k) {
  return k == UtilityKind::neg_test_loss ? "neg_test_loss" : "test_accuracy";
}
const char* partition_name(PartitionKind k) {
  switch (k) {
    case PartitionKind::per_sample: return "per_sample";
    case PartitionKind::equal_chunks: return "equal_chunks";
    case PartitionKind::by_size: return "by_size";
  }
  return "unknown";
}

std::string fmt6(double v) {
  char buf[64];
  std::snprintf(buf, sizeof buf, "%.6g", v);
  return buf;
}

std::string fmt17(double v) {
  char buf[64];
  std::snprintf(buf, sizeof buf, "%.17g", v);
  return buf;
}

json vector_json(const Vector& v) {
  json out = json::array();
  for (Eigen::Index i = 0; i < v.size(); ++i) out.push_back(v(i));
  return out;
}

json optional_list_json(const std::vector<std::optional<double>>& v) {
  json out = json::array();
  for (const auto& x : v) out.push_back(x ? json(*x) : json(nullptr));
  return out;
}

double mean_of(const std::vector<double>& v) {
  double s = 0.0;
  for (const double x : v) s += x;
  return v.empty() ? std::nan("") : s / static_cast<double>(v.size());
}

double stderr_of(const std::vector<double>& v) {
  if (v.size() < 2) return 0.0;
  const double m = mean_of(v);
  double ss = 0.0;
  for (const double x : v) ss += (x - m) * (x - m);
  return std::sqrt(ss / static_cast<double>(v.size() - 1) / static_cast<double>(v.size()));
}

// Rows of a CSV summary plus per-group mean/stderr footers. Groups keep
// first-seen order so the output is deterministic.
class Summary {
 public:
  Summary(std::vector<std::string> key_columns, std::string seed_column,
          std::vector<std::string> value_columns)
      : keys_(std::move(key_columns)), seed_(std::move(seed_column)), values_(std::move(value_columns)) {}

  void add(const std::vector<std::string>& key, const std::string& seed, const std::vector<double>& values) {
    rows_.push_back({key, seed, values});
    auto it = std::find(group_order_.begin(), group_order_.end(), key);
    if (it == group_order_.end()) group_order_.push_back(key);
    auto& acc = groups_[key];
    acc.resize(values.size());
    for (std::size_t i = 0; i < values.size(); ++i)
      if (std::isfinite(values[i])) acc[i].push_back(values[i]);
  }

  std::string render(bool footer = true) const {
    std::ostringstream out;
    write_header(out);
    for (const auto& r : rows_) write_row(out, r.key, r.seed, r.values);
    if (footer) {
      for (const auto& key : group_order_) {
        const auto& acc = groups_.at(key);
        std::vector<double> means, errs;
        for (const auto& col : acc) {
          means.push_back(mean_of(col));
          errs.push_back(stderr_of(col));
        }
        write_row(out, key, "mean", means);
        write_row(out, key, "stderr", errs);
      }
    }
    return out.str();
  }

 private:
  struct Row {
    std::vector<std::string> key;
    std::string seed;
    std::vector<double> values;
  };

  void write_header(std::ostringstream& out) const {
    bool first = true;
    auto put = [&](const std::string& s) {
      out << (first ? "" : ",") << s;
      first = false;
    };
    for (const auto& k : keys_) put(k);
    put(seed_);
    for (const auto& v : values_) put(v);
    out << "\n";
  }

  static void write_row(std::ostringstream& out, const std::vector<std::string>& key,
                        const std::string& seed, const std::vector<double>& values) {
    for (const auto& k : key) out << k << ",";
    out << seed;
    for (const double v : values) out << "," << (std::isfinite(v) ? fmt6(v) : std::string());
    out << "\n";
  }

  std::vector<std::string> keys_;
  std::string seed_;
  std::vector<std::string> values_;
  std::vector<Row> rows_;
  std::vector<std::vector<std::string>> group_order_;
  std::map<std::vector<std::string>, std::vector<std::vector<double>>> groups_;
};

struct Artifacts {
  json result;
  std::string summary;
  std::map<std::string, std::string> extra;  // file name -> contents
  bool passed = true;
  std::string message;
};

std::shared_ptr<const PartitionedDataset> shared_dataset(const ExperimentConfig& cfg, std::uint64_t seed) {
  return std::make_shared<const PartitionedDataset>(build_dataset(cfg.dataset, seed));
}

RunConfig make_run(const ExperimentConfig& cfg, std::shared_ptr<const PartitionedDataset> ds,
                   const ModeSpec& mode, int k, std::uint64_t seed) {
  RunConfig run;
  run.dataset = std::move(ds);
  run.model = cfg.model;
  run.utility = cfg.utility;
  run.noise = noise_config(cfg.noise, mode, k);
  run.semivalue = cfg.semivalue;
  run.seed = seed;
  run.threads = cfg.threads;
  return run;
}

std::vector<ModeSpec> modes_or(const ExperimentConfig& cfg, std::vector<ModeSpec> fallback) {
  return cfg.modes.empty() ? fallback : cfg.modes;
}

double mean_over(const Vector& v) { return v.size() ? v.mean() : std::nan(""); }

double mean_present(const std::vector<std::optional<double>>& v) {
  double s = 0.0;
  int c = 0;
  for (const auto& x : v)
    if (x) {
      s += *x;
      ++c;
    }
  return c ? s / c : std::nan("");
}

Artifacts run_valuation_kind(const ExperimentConfig& cfg) {
  Artifacts a;
  Summary summary({"mode", "k"}, "seed", {"mean_psi", "mean_mu", "mean_s_sq", "mean_adjusted_var"});
  json runs = json::array();
  for (const auto seed : cfg.seeds) {
    auto ds = shared_dataset(cfg, seed);
    for (const auto& mode : modes_or(cfg, {ModeSpec::parse("iid"), ModeSpec::parse("corr_x")})) {
      for (const int k : cfg.budgets()) {
        const auto r = run_valuation(make_run(cfg, ds, mode, k, seed));
        summary.add({mode.name(), std::to_string(k)}, std::to_string(seed),
                    {mean_over(r.psi), mean_over(r.mu), mean_over(r.s_sq), mean_present(r.mean_adjusted)});
        runs.push_back({{"mode", mode.name()}, {"seed", seed}, {"k", k},
                        {"psi", vector_json(r.psi)}, {"mu", vector_json(r.mu)},
                        {"s_sq", vector_json(r.s_sq)},
                        {"mean_adjusted", optional_list_json(r.mean_adjusted)},
                        {"permutations_used", r.permutations_used},
                        {"burn_in_dropped", r.burn_in_dropped}});
      }
    }
  }
  a.result = {{"kind", "valuation"}, {"runs", runs}};
  a.summary = summary.render();
  return a;
}

Artifacts run_noisy_label_kind(const ExperimentConfig& cfg) {
  Artifacts a;
  Summary summary({"mode"}, "seed", {"auc"});
  json runs = json::array();
  const int k = cfg.noise.k;
  for (const auto seed : cfg.seeds) {
    auto ds = shared_dataset(cfg, seed);
    const auto mask = ds->corrupted_parties();
    auto evaluate = [&](const ModeSpec& mode, std::optional<double> q) {
      const auto r = run_valuation(make_run(cfg, ds, mode, k, seed));
      const Vector neg = -r.psi;
      const double auc = auc_roc(std::span<const double>(neg.data(), static_cast<std::size_t>(neg.size())), mask);
      summary.add({mode.name()}, std::to_string(seed), {auc});
      json run = {{"mode", mode.name()}, {"seed", seed}, {"auc", auc}, {"psi", vector_json(r.psi)}};
      if (q) run["q"] = *q;
      runs.push_back(run);
    };
    for (const auto& mode : modes_or(cfg, {ModeSpec::parse("no_dp"), ModeSpec::parse("iid"),
                                           ModeSpec::parse("corr_y")}))
      evaluate(mode, std::nullopt);
    for (const double q : cfg.q_grid) {
      ModeSpec mode;
      if (q == 0.0) {
        mode.mode = NoiseMode::corr_x;
      } else {
        mode.mode = NoiseMode::corr_y;
        mode.q = q;
      }
      evaluate(mode, q);
    }
  }
  a.result = {{"kind", "noisy-label"}, {"k", k}, {"runs", runs}};
  a.summary = summary.render();
  return a;
}

std::vector<double> default_fractions() { return {0.0, 0.1, 0.2, 0.3, 0.4, 0.5}; }

Artifacts run_removal_kind(const ExperimentConfig& cfg) {
  Artifacts a;
  Summary summary({"mode", "fraction"}, "seed", {"score"});
  json curves = json::array();
  const auto fractions = cfg.fractions.empty() ? default_fractions() : cfg.fractions;
  auto record = [&](const std::string& name, std::uint64_t seed, const RemovalCurve& curve) {
    for (std::size_t i = 0; i < curve.fractions.size(); ++i)
      summary.add({name, fmt6(curve.fractions[i])}, std::to_string(seed), {curve.scores[i]});
    curves.push_back({{"mode", name}, {"seed", seed}, {"order", to_string(curve.order)},
                      {"fractions", curve.fractions}, {"scores", curve.scores},
                      {"stderrs", curve.stderrs}});
  };
  for (const auto seed : cfg.seeds) {
    auto ds = shared_dataset(cfg, seed);
    RemovalOptions options;
    options.fractions = fractions;
    options.epochs = cfg.removal_epochs;
    options.random_seeds = cfg.removal_seeds;
    options.seed = seed;
    for (const auto& mode : modes_or(cfg, {ModeSpec::parse("no_dp"), ModeSpec::parse("iid"),
                                           ModeSpec::parse("corr_x")})) {
      const auto r = run_valuation(make_run(cfg, ds, mode, cfg.noise.k, seed));
      options.order = RemovalOrder::highest_first;
      record(mode.name(), seed, removal_curve(r.psi, *ds, cfg.model, cfg.utility, options));
    }
    options.order = RemovalOrder::random;
    record("random", seed,
           removal_curve(Vector::Zero(static_cast<Eigen::Index>(ds->n_parties)), *ds, cfg.model,
                         cfg.utility, options));
  }
  a.result = {{"kind", "removal"}, {"curves", curves}};
  a.summary = summary.render();
  return a;
}

Artifacts run_probe_kind(const ExperimentConfig& cfg) {
  Artifacts a;
  if (cfg.ks.size() < 3) config_error("ks", "variance-probe needs at least 3 budgets");
  const std::uint64_t seed = cfg.seeds.front();
  auto ds = shared_dataset(cfg, seed);
  std::ostringstream summary;
  summary << "mode,k,variance,slope\n";
  std::ostringstream tidy;
  tidy << "mode,k,trial,party,psi\n";
  json probes = json::array();
  for (const auto& mode : modes_or(cfg, {ModeSpec::parse("iid"), ModeSpec::parse("corr_x"),
                                         ModeSpec::parse("corr_y")})) {
    RunConfig base = make_run(cfg, ds, mode, cfg.ks.front(), seed);
    const auto probe = variance_scaling_probe(base, base.noise.mode, cfg.ks, cfg.trials);
    json points = json::array();
    for (const auto& p : probe.points) {
      summary << mode.name() << "," << p.k << "," << fmt6(p.variance) << "," << fmt6(probe.slope) << "\n";
      points.push_back({{"k", p.k}, {"variance", p.variance}});
      for (std::size_t t = 0; t < p.psi.size(); ++t)
        for (Eigen::Index j = 0; j < p.psi[t].size(); ++j)
          tidy << mode.name() << "," << p.k << "," << t << "," << j << "," << fmt17(p.psi[t](j)) << "\n";
    }
    probes.push_back({{"mode", mode.name()}, {"label", mode.label()}, {"slope", probe.slope},
                      {"points", points}});
  }
  a.result = {{"kind", "variance-probe"}, {"seed", seed}, {"trials", cfg.trials}, {"probes", probes}};
  a.summary = summary.str();
  a.extra["probe_trials.csv"] = tidy.str();
  return a;
}

Artifacts run_similarity_kind(const ExperimentConfig& cfg) {
  Artifacts a;
  Summary summary({"mode", "k"}, "seed", {"delta_cos", "delta_l2"});
  json runs = json::array();
  for (const auto seed : cfg.seeds) {
    auto ds = shared_dataset(cfg, seed);
    for (const auto& mode : modes_or(cfg, {ModeSpec::parse("corr_x")})) {
      if (!mode.no_dp && mode.mode == NoiseMode::iid) config_error("modes", "similarity needs a correlated mode");
      if (mode.no_dp) config_error("modes", "similarity needs DP noise");
      for (const int k : cfg.budgets()) {
        RunConfig run = make_run(cfg, ds, mode, k, seed);
        run.record_gradients = true;
        const auto r = run_valuation(run);
        const auto rep = grad_similarity(r.gradients);
        summary.add({mode.name(), std::to_string(k)}, std::to_string(seed), {rep.delta_cos, rep.delta_l2});
        runs.push_back({{"mode", mode.name()}, {"seed", seed}, {"k", k}, {"delta_cos", rep.delta_cos},
                        {"delta_l2", rep.delta_l2}, {"terms", rep.terms}, {"skipped", rep.skipped}});
      }
    }
  }
  a.result = {{"kind", "similarity"}, {"runs", runs}};
  a.summary = summary.render();
  return a;
}

Artifacts run_federated_kind(const ExperimentConfig& cfg) {
  Artifacts a;
  Summary summary({"mode"}, "seed", {"auc", "mean_psi"});
  json runs = json::array();
  for (const auto seed : cfg.seeds) {
    auto ds = shared_dataset(cfg, seed);
    const auto mask = ds->corrupted_parties();
    const bool scorable = std::count(mask.begin(), mask.end(), true) > 0 &&
                          std::count(mask.begin(), mask.end(), false) > 0;
    for (const auto& mode : modes_or(cfg, {ModeSpec::parse("iid"), ModeSpec::parse("fl_schedule")})) {
      const auto r = run_federated(make_run(cfg, ds, mode, cfg.noise.k, seed), cfg.federated);
      double auc = std::nan("");
      if (scorable) {
        const Vector neg = -r.psi;
        auc = auc_roc(std::span<const double>(neg.data(), static_cast<std::size_t>(neg.size())), mask);
      }
      summary.add({mode.name()}, std::to_string(seed), {auc, mean_over(r.psi)});
      runs.push_back({{"mode", mode.name()}, {"seed", seed}, {"psi", vector_json(r.psi)},
                      {"rounds_retained", r.rounds_retained},
                      {"auc", std::isfinite(auc) ? json(auc) : json(nullptr)}});
    }
  }
  a.result = {{"kind", "federated"}, {"runs", runs}};
  a.summary = summary.render();
  return a;
}

Artifacts run_oracle_kind(const ExperimentConfig& cfg) {
  Artifacts a;
  const int n = cfg.oracle_n;
  if (n < 1 || n > 9) config_error("oracle_n", "oracle check supports 1 <= n <= 9");
  std::vector<SemivalueSpec> specs = {
      {SemivalueKind::shapley, 0, 1, 1}, {SemivalueKind::banzhaf, 0, 1, 1},
      {SemivalueKind::beta, 0, 4, 1},    {SemivalueKind::beta, 0, 16, 1},
      {SemivalueKind::loo, 0, 1, 1}};
  std::ostringstream summary;
  summary << "seed,semivalue,max_abs_diff,pass\n";
  double worst = 0.0;
  json checks = json::array();
  for (const auto seed : cfg.seeds) {
    Rng rng(derive_seed(seed, 0x6f7261636c65ULL));
    std::uniform_real_distribution<double> unif(-1.0, 1.0);
    std::vector<double> table(std::size_t{1} << n);
    for (auto& v : table) v = unif(rng);
    const SetFunction game = [&](std::uint32_t s) { return table[s]; };
    for (auto spec : specs) {
      spec.n = static_cast<std::size_t>(n);
      const Vector exact = exact_semivalue(game, spec);
      const Vector expected = permutation_expectation(game, spec);
      const double diff = (exact - expected).cwiseAbs().maxCoeff();
      worst = std::max(worst, diff);
      std::string name = to_string(spec.kind);
      if (spec.kind == SemivalueKind::beta) name += "(" + fmt6(spec.alpha) + ";" + fmt6(spec.beta) + ")";
      summary << seed << "," << name << "," << fmt6(diff) << "," << (diff < 1e-10 ? "yes" : "no") << "\n";
      checks.push_back({{"seed", seed}, {"semivalue", name}, {"max_abs_diff", diff}});
    }
  }
  a.passed = worst < 1e-10;
  a.message = "max |psi_exact - E[estimator]| = " + fmt17(worst) + (a.passed ? " (pass)" : " (FAIL)");
  a.result = {{"kind", "oracle-check"}, {"n", n}, {"max_abs_diff", worst}, {"passed", a.passed},
              {"checks", checks}};
  a.summary = summary.str();
  return a;
}

void write_file(const fs::path& path, const std::string& contents) {
  std::ofstream out(path, std::ios::binary);
  if (!out) throw Error("cli", "output_dir", "cannot write " + path.string());
  out << contents;
  if (!out) throw Error("cli", "output_dir", "failed writing " + path.string());
}

std::string read_file(const fs::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw Error("cli", "path", "cannot read " + path.string());
  std::ostringstream ss;
  ss << in.rdbuf();
  return ss.str();
}

json load_result(const fs::path& dir) {
  const auto text = read_file(dir / "result.json");
  try {
    return json::parse(text);
  } catch (const json::exception& e) {
    throw Error("cli", "result.json", std::string("malformed result file: ") + e.what());
  }
}

void write_dat(const fs::path& path, const std::vector<std::vector<double>>& rows) {
  std::ostringstream out;
  for (const auto& row : rows) {
    for (std::size_t i = 0; i < row.size(); ++i) out << (i ? " " : "") << fmt17(row[i]);
    out << "\n";
  }
  write_file(path, out.str());
}

// Mean and stderr of y grouped by (series, x), in first-seen order.
struct Bands {
  std::vector<std::string> series_order;
  std::map<std::string, std::vector<double>> xs;
  std::map<std::pair<std::string, double>, std::vector<double>> ys;

  void add(const std::string& series, double x, double y) {
    if (!xs.count(series)) series_order.push_back(series);
    auto& xv = xs[series];
    if (std::find(xv.begin(), xv.end(), x) == xv.end()) xv.push_back(x);
    ys[{series, x}].push_back(y);
  }

  std::vector<fs::path> write(const fs::path& dir, const std::string& plot) const {
    std::vector<fs::path> files;
    for (const auto& s : series_order) {
      std::vector<std::vector<double>> rows;
      for (const double x : xs.at(s)) {
        const auto& v = ys.at({s, x});
        const double m = mean_of(v);
        const double se = stderr_of(v);
        rows.push_back({x, m, m - se, m + se});
      }
      const auto path = dir / (plot + "_" + s + ".dat");
      write_dat(path, rows);
      files.push_back(path);
    }
    return files;
  }
};

std::string label_of(const std::string& mode_name) {
  if (mode_name == "random") return "random";
  return ModeSpec::parse(mode_name).label();
}

void expect_kind(const json& result, const std::string& kind, const std::string& plot) {
  if (!result.contains("kind") || result.at("kind") != kind)
    throw Error("cli", "plot", "plot kind '" + plot + "' needs a " + kind + " result, found " +
                                   (result.contains("kind") ? result.at("kind").dump() : "none"));
}

}  // namespace

double NoiseSettings::resolved_sigma() const {
  if (sigma) return *sigma;
  if (epsilon) return calibrate_sigma(*epsilon, delta);
  config_error("noise.sigma", "set either noise.sigma or noise.epsilon");
}

ModeSpec ModeSpec::parse(const std::string& text) {
  ModeSpec m;
  const auto colon = text.find(':');
  const std::string head = text.substr(0, colon);
  if (head == "no_dp") {
    m.no_dp = true;
  } else if (head == "iid") {
    m.mode = NoiseMode::iid;
  } else if (head == "corr_x") {
    m.mode = NoiseMode::corr_x;
  } else if (head == "corr_y") {
    m.mode = NoiseMode::corr_y;
  } else if (head == "fl_schedule") {
    m.mode = NoiseMode::fl_schedule;
  } else {
    config_error("modes", "unknown mode '" + text + "'");
  }
  if (colon != std::string::npos) {
    if (m.mode != NoiseMode::corr_y || m.no_dp) config_error("modes", "only corr_y takes a ratio: '" + text + "'");
    const std::string tail = text.substr(colon + 1);
    try {
      std::size_t used = 0;
      m.q = std::stod(tail, &used);
      if (used != tail.size()) throw std::invalid_argument(tail);
    } catch (const std::exception&) {
      config_error("modes", "malformed burn-in ratio in '" + text + "'");
    }
  }
  return m;
}

std::string ModeSpec::name() const {
  if (no_dp) return "no_dp";
  std::string s = to_string(mode);
  if (q) {
    char buf[32];
    const auto res = std::to_chars(buf, buf + sizeof buf, *q);  // shortest round-trip form
    s += ":" + std::string(buf, res.ptr);
  }
  return s;
}

std::string ModeSpec::label() const {
  if (no_dp) return "nodp";
  switch (mode) {
    case NoiseMode::iid: return "iid";
    case NoiseMode::corr_x: return "corrx";
    case NoiseMode::corr_y: return q ? "corry" + fmt6(*q) : "corry";
    case NoiseMode::fl_schedule: return "fl";
  }
  return "unknown";
}

std::vector<int> ExperimentConfig::budgets() const { return ks.empty() ? std::vector<int>{noise.k} : ks; }

ExperimentKind parse_kind(const std::string& text) {
  return pick<ExperimentKind>("kind", text,
                              {{"valuation", ExperimentKind::valuation},
                               {"noisy-label", ExperimentKind::noisy_label},
                               {"removal", ExperimentKind::removal},
                               {"variance-probe", ExperimentKind::variance_probe},
                               {"similarity", ExperimentKind::similarity},
                               {"federated", ExperimentKind::federated},
                               {"oracle-check", ExperimentKind::oracle_check}});
}

const char* to_string(ExperimentKind kind) {
  switch (kind) {
    case ExperimentKind::valuation: return "valuation";
    case ExperimentKind::noisy_label: return "noisy-label";
    case ExperimentKind::removal: return "removal";
    case ExperimentKind::variance_probe: return "variance-probe";
    case ExperimentKind::similarity: return "similarity";
    case ExperimentKind::federated: return "federated";
    case ExperimentKind::oracle_check: return "oracle-check";
  }
  return "unknown";
}

NoiseConfig noise_config(const NoiseSettings& settings, const ModeSpec& mode, int k) {
  NoiseConfig cfg;
  if (mode.no_dp) {
    cfg = no_dp_config(k, NoiseMode::iid);
  } else {
    cfg.noise_multiplier = settings.resolved_sigma();
    cfg.budget = k;
    cfg.mode = mode.mode;
  }
  cfg.clip_norm = settings.clip_norm;
  cfg.sigma_g_sq = settings.sigma_g_sq;
  if (cfg.mode == NoiseMode::corr_y) cfg.burn_in = mode.q.value_or(settings.q);
  return cfg;
}

ExperimentConfig parse_config(const json& doc, const fs::path& base_dir) {
  ExperimentConfig cfg;
  Section root(doc, "");
  if (!root.has("kind")) config_error("kind", "missing experiment kind");
  cfg.kind = parse_kind(root.string("kind", ""));
  cfg.output_dir = root.string("output_dir", cfg.output_dir.string());
  cfg.seeds = root.list<std::uint64_t>("seeds", cfg.seeds, as_unsigned);
  if (cfg.seeds.empty()) config_error("seeds", "need at least one seed");
  cfg.trials = static_cast<int>(root.integer("trials", cfg.trials));
  cfg.ks = root.list<int>("ks", {}, as_int);
  cfg.q_grid = root.list<double>("q_grid", {}, as_number);
  cfg.fractions = root.list<double>("fractions", {}, as_number);
  cfg.oracle_n = static_cast<int>(root.integer("oracle_n", cfg.oracle_n));
  cfg.threads = static_cast<int>(root.integer("threads", cfg.threads));
  if (cfg.threads < 1) config_error("threads", "thread count must be positive");
  for (std::size_t i = 0; i < cfg.ks.size(); ++i)
    if (cfg.ks[i] < 1) config_error("ks[" + std::to_string(i) + "]", "budget must be positive");
  for (std::size_t i = 0; i < cfg.q_grid.size(); ++i)
    if (!(cfg.q_grid[i] >= 0.0 && cfg.q_grid[i] < 1.0))
      config_error("q_grid[" + std::to_string(i) + "]", "burn-in ratio must lie in [0, 1)");
  cfg.modes = root.list<ModeSpec>("modes", {}, [](const json& v, const std::string& field) {
    try {
      return ModeSpec::parse(as_string(v, field));
    } catch (const Error& e) {
      throw Error("config", field, e.what());
    }
  });

  if (root.has("dataset")) {
    auto s = root.child("dataset");
    auto& d = cfg.dataset;
    d.source = s.string("source", d.source);
    if (d.source != "synth_classification" && d.source != "synth_regression" && d.source != "csv")
      config_error(s.field("source"), "expected synth_classification, synth_regression or csv");
    d.n = s.unsigned_integer("n", d.n);
    d.d = s.unsigned_integer("d", d.d);
    d.classes = static_cast<int>(s.integer("classes", d.classes));
    d.separation = s.number("separation", d.separation);
    d.noise_std = s.number("noise_std", d.noise_std);
    if (s.has("n_test")) d.n_test = s.unsigned_integer("n_test", 0);
    d.seed = s.unsigned_integer("seed", d.seed);
    if (s.has("path")) {
      d.path = s.string("path", "");
      if (d.path.is_relative() && !base_dir.empty()) d.path = base_dir / d.path;
    }
    d.label_column = s.string("label_column", d.label_column);
    d.feature_columns = s.list<std::string>("feature_columns", {}, as_string);
    d.standardize = s.boolean("standardize", d.standardize);
    d.test_fraction = s.number("test_fraction", d.test_fraction);
    if (s.has("test_path")) {
      d.test_path = s.string("test_path", "");
      if (d.test_path.is_relative() && !base_dir.empty()) d.test_path = base_dir / d.test_path;
    }
    d.corrupt_ratio = s.number("corrupt_ratio", d.corrupt_ratio);
    if (!(d.corrupt_ratio >= 0.0 && d.corrupt_ratio < 1.0))
      config_error(s.field("corrupt_ratio"), "corruption ratio must lie in [0, 1)");
    d.corrupt_parties = s.list<std::size_t>("corrupt_parties", {}, as_unsigned);
    if (s.has("partition")) {
      auto p = s.child("partition");
      d.partition.kind = pick<PartitionKind>(p.field("kind"), p.string("kind", "per_sample"),
                                             {{"per_sample", PartitionKind::per_sample},
                                              {"equal_chunks", PartitionKind::equal_chunks},
                                              {"by_size", PartitionKind::by_size}});
      d.n_parties = p.unsigned_integer("n_parties", 0);
      d.partition.block_size = p.unsigned_integer("block_size", 0);
      if (d.partition.kind != PartitionKind::per_sample && d.n_parties == 0)
        config_error(p.field("n_parties"), "partition needs a positive party count");
      p.finish();
    }
    if (d.source == "csv") {
      if (d.path.empty()) config_error(s.field("path"), "csv source needs a path");
      if (!fs::exists(d.path)) config_error(s.field("path"), "file not found: " + d.path.string());
      if (!d.test_path.empty() && !fs::exists(d.test_path))
        config_error(s.field("test_path"), "file not found: " + d.test_path.string());
    }
    s.finish();
  }

  if (root.has("model")) {
    auto s = root.child("model");
    auto& m = cfg.model;
    m.loss = pick<LossKind>(s.field("loss"), s.string("loss", loss_name(m.loss)),
                            {{"mse_linear", LossKind::mse_linear}, {"logistic_l2", LossKind::logistic_l2}});
    m.learning_rate = s.number("learning_rate", m.learning_rate);
    m.l2 = s.number("l2", m.l2);
    m.bias = s.boolean("bias", m.bias);
    if (s.has("init")) {
      auto i = s.child("init");
      m.init.kind = pick<InitPolicy::Kind>(i.field("kind"), i.string("kind", "zeros"),
                                           {{"zeros", InitPolicy::Kind::zeros},
                                            {"gaussian", InitPolicy::Kind::gaussian}});
      m.init.scale = i.number("scale", m.init.scale);
      m.init.seed = i.unsigned_integer("seed", m.init.seed);
      i.finish();
    }
    s.finish();
    try {
      m.validate();
    } catch (const Error& e) {
      throw Error("config", "model." + e.field(), e.what());
    }
  }

  if (root.has("utility")) {
    auto s = root.child("utility");
    cfg.utility.kind = pick<UtilityKind>(s.field("kind"), s.string("kind", "neg_test_loss"),
                                         {{"neg_test_loss", UtilityKind::neg_test_loss},
                                          {"test_accuracy", UtilityKind::test_accuracy}});
    s.finish();
  }

  if (root.has("noise")) {
    auto s = root.child("noise");
    auto& n = cfg.noise;
    n.clip_norm = s.number("clip_norm", n.clip_norm);
    n.sigma = s.optional_number("sigma");
    n.epsilon = s.optional_number("epsilon");
    n.delta = s.number("delta", n.delta);
    n.k = static_cast<int>(s.integer("k", n.k));
    n.q = s.number("q", n.q);
    n.sigma_g_sq = s.optional_number("sigma_g_sq");
    s.finish();
  }

  if (root.has("semivalue")) {
    auto s = root.child("semivalue");
    cfg.semivalue.kind = pick<SemivalueKind>(s.field("kind"), s.string("kind", "shapley"),
                                             {{"shapley", SemivalueKind::shapley},
                                              {"banzhaf", SemivalueKind::banzhaf},
                                              {"beta", SemivalueKind::beta},
                                              {"loo", SemivalueKind::loo}});
    cfg.semivalue.alpha = s.number("alpha", cfg.semivalue.alpha);
    cfg.semivalue.beta = s.number("beta", cfg.semivalue.beta);
    s.finish();
    if (cfg.semivalue.kind == SemivalueKind::beta &&
        !(cfg.semivalue.alpha > 0.0 && cfg.semivalue.beta > 0.0))
      config_error("semivalue.alpha", "beta semivalue needs alpha > 0 and beta > 0");
  }

  if (root.has("federated")) {
    auto s = root.child("federated");
    cfg.federated.permutations = static_cast<int>(s.integer("permutations", cfg.federated.permutations));
    cfg.federated.burn_in = s.number("q", cfg.federated.burn_in);
    s.finish();
    if (cfg.federated.permutations < 1) config_error("federated.permutations", "need at least one permutation");
  }

  if (root.has("removal")) {
    auto s = root.child("removal");
    cfg.removal_seeds = static_cast<int>(s.integer("random_seeds", cfg.removal_seeds));
    cfg.removal_epochs = static_cast<int>(s.integer("epochs", cfg.removal_epochs));
    s.finish();
  }
  root.finish();

  // Module preconditions, reported under the config field names.
  if (cfg.kind != ExperimentKind::oracle_check) {
    if (!cfg.noise.sigma && !cfg.noise.epsilon)
      config_error("noise.sigma", "set either noise.sigma or noise.epsilon");
    std::vector<ModeSpec> modes = cfg.modes;
    if (modes.empty()) modes = {ModeSpec::parse("iid")};
    if (cfg.kind == ExperimentKind::noisy_label && cfg.modes.empty()) modes.push_back(ModeSpec::parse("corr_y"));
    std::vector<int> budgets = cfg.budgets();
    for (const auto& mode : modes) {
      for (const int k : budgets) {
        try {
          noise_config(cfg.noise, mode, k).validate();
        } catch (const Error& e) {
          if (e.module() == "config") throw;
          throw Error("config", "noise." + e.field(), e.what());
        }
      }
    }
    if (cfg.trials < 1) config_error("trials", "trials must be positive");
  }
  return cfg;
}

ExperimentConfig load_config(const fs::path& path) {
  std::ifstream in(path);
  if (!in) throw Error("config", "path", "cannot open config " + path.string());
  json doc;
  try {
    doc = json::parse(in);
  } catch (const json::parse_error& e) {
    throw Error("config", "<syntax>", std::string("config is not valid JSON: ") + e.what());
  }
  return parse_config(doc, path.parent_path());
}

json to_json(const ExperimentConfig& cfg) {
  json doc;
  doc["kind"] = to_string(cfg.kind);
  doc["output_dir"] = cfg.output_dir.string();
  doc["seeds"] = cfg.seeds;
  doc["trials"] = cfg.trials;
  doc["ks"] = cfg.ks;
  doc["q_grid"] = cfg.q_grid;
  doc["fractions"] = cfg.fractions;
  doc["oracle_n"] = cfg.oracle_n;
  doc["threads"] = cfg.threads;
  json modes = json::array();
  for (const auto& m : cfg.modes) modes.push_back(m.name());
  doc["modes"] = modes;

  const auto& d = cfg.dataset;
  json ds = {{"source", d.source}, {"n", d.n}, {"d", d.d}, {"classes", d.classes},
             {"separation", d.separation}, {"noise_std", d.noise_std}, {"seed", d.seed},
             {"label_column", d.label_column}, {"feature_columns", d.feature_columns},
             {"standardize", d.standardize}, {"test_fraction", d.test_fraction},
             {"corrupt_ratio", d.corrupt_ratio}, {"corrupt_parties", d.corrupt_parties},
             {"partition", {{"kind", partition_name(d.partition.kind)},
                            {"n_parties", d.n_parties},
                            {"block_size", d.partition.block_size}}}};
  ds["n_test"] = d.n_test ? json(*d.n_test) : json(nullptr);
  if (!d.path.empty()) ds["path"] = d.path.string();
  if (!d.test_path.empty()) ds["test_path"] = d.test_path.string();
  doc["dataset"] = ds;

  const auto& m = cfg.model;
  doc["model"] = {{"loss", loss_name(m.loss)}, {"learning_rate", m.learning_rate}, {"l2", m.l2},
                  {"bias", m.bias},
                  {"init", {{"kind", m.init.kind == InitPolicy::Kind::zeros ? "zeros" : "gaussian"},
                            {"scale", m.init.scale},
                            {"seed", m.init.seed}}}};
  doc["utility"] = {{"kind", utility_name(cfg.utility.kind)}};

  const auto& n = cfg.noise;
  json noise = {{"clip_norm", n.clip_norm}, {"delta", n.delta}, {"k", n.k}, {"q", n.q}};
  noise["sigma"] = n.sigma ? json(*n.sigma) : json(nullptr);
  noise["epsilon"] = n.epsilon ? json(*n.epsilon) : json(nullptr);
  noise["sigma_g_sq"] = n.sigma_g_sq ? json(*n.sigma_g_sq) : json(nullptr);
  doc["noise"] = noise;

  doc["semivalue"] = {{"kind", to_string(cfg.semivalue.kind)}, {"alpha", cfg.semivalue.alpha},
                      {"beta", cfg.semivalue.beta}};
  doc["federated"] = {{"permutations", cfg.federated.permutations}, {"q", cfg.federated.burn_in}};
  doc["removal"] = {{"random_seeds", cfg.removal_seeds}, {"epochs", cfg.removal_epochs}};
  return doc;
}

PartitionedDataset build_dataset(const DatasetConfig& cfg, std::uint64_t seed) {
  const std::uint64_t data_seed = derive_seed(cfg.seed, seed);
  PartitionedDataset ds;
  if (cfg.source == "synth_classification") {
    ds = synth_classification(cfg.n, cfg.d, cfg.classes, data_seed, cfg.separation, cfg.n_test);
  } else if (cfg.source == "synth_regression") {
    ds = synth_regression(cfg.n, cfg.d, data_seed, cfg.noise_std, cfg.n_test);
  } else {
    CsvSchema schema;
    schema.label_column = cfg.label_column;
    schema.feature_columns = cfg.feature_columns;
    schema.task = cfg.classes > 0 ? TaskKind::classification : TaskKind::regression;
    schema.standardize = cfg.standardize;
    schema.test_fraction = cfg.test_fraction;
    schema.test_path = cfg.test_path;
    ds = load_csv(cfg.path, schema);
  }
  if (cfg.corrupt_ratio > 0.0) ds = corrupt_labels(ds, cfg.corrupt_ratio, derive_seed(cfg.seed, seed, 1));
  ds = partition(ds, cfg.n_parties, cfg.partition);
  if (!cfg.corrupt_parties.empty()) ds = corrupt_parties(ds, cfg.corrupt_parties, derive_seed(cfg.seed, seed, 2));
  return ds;
}

std::string sha256_hex(const std::string& bytes) {
  unsigned char digest[EVP_MAX_MD_SIZE];
  unsigned int len = 0;
  if (EVP_Digest(bytes.data(), bytes.size(), digest, &len, EVP_sha256(), nullptr) != 1)
    throw Error("cli", "sha256 digest failed");
  static const char* hex = "0123456789abcdef";
  std::string out;
  for (unsigned int i = 0; i < len; ++i) {
    out += hex[digest[i] >> 4];
    out += hex[digest[i] & 0xf];
  }
  return out;
}

fs::path resolve_output_dir(const ExperimentConfig& cfg) {
  if (cfg.output_dir.is_absolute()) return cfg.output_dir;
  if (const char* root = std::getenv("DPVAL_OUTPUT_ROOT"); root && *root) return fs::path(root) / cfg.output_dir;
  return cfg.output_dir;
}

ExperimentOutcome run_experiment(const ExperimentConfig& cfg) {
  Artifacts a;
  switch (cfg.kind) {
    case ExperimentKind::valuation: a = run_valuation_kind(cfg); break;
    case ExperimentKind::noisy_label: a = run_noisy_label_kind(cfg); break;
    case ExperimentKind::removal: a = run_removal_kind(cfg); break;
    case ExperimentKind::variance_probe: a = run_probe_kind(cfg); break;
    case ExperimentKind::similarity: a = run_similarity_kind(cfg); break;
    case ExperimentKind::federated: a = run_federated_kind(cfg); break;
    case ExperimentKind::oracle_check: a = run_oracle_kind(cfg); break;
  }

  const fs::path dir = resolve_output_dir(cfg);
  fs::create_directories(dir);
  std::map<std::string, std::string> files = a.extra;
  files["result.json"] = a.result.dump(2) + "\n";
  files["summary.csv"] = a.summary;
  files["config.echo"] = to_json(cfg).dump(2) + "\n";
  std::ostringstream manifest;
  for (const auto& [name, contents] : files) {
    write_file(dir / name, contents);
    manifest << sha256_hex(contents) << "  " << name << "\n";
  }
  write_file(dir / "MANIFEST", manifest.str());
  fs::remove(dir / "error.json");

  ExperimentOutcome outcome;
  outcome.directory = dir;
  outcome.passed = a.passed;
  outcome.message = a.message;
  return outcome;
}

std::vector<fs::path> emit_plot_data(const fs::path& result_dir, const std::string& plot_kind) {
  const json result = load_result(result_dir);
  Bands bands;
  try {
    if (plot_kind == "variance") {
      expect_kind(result, "variance-probe", plot_kind);
      std::vector<fs::path> files;
      for (const auto& probe : result.at("probes")) {
        std::vector<std::vector<double>> rows;
        for (const auto& p : probe.at("points"))
          rows.push_back({p.at("k").get<double>(), p.at("variance").get<double>()});
        const auto path = result_dir / ("var_" + probe.at("label").get<std::string>() + ".dat");
        write_dat(path, rows);
        files.push_back(path);
      }
      return files;
    }
    if (plot_kind == "removal") {
      expect_kind(result, "removal", plot_kind);
      for (const auto& c : result.at("curves")) {
        const auto fr = c.at("fractions").get<std::vector<double>>();
        const auto sc = c.at("scores").get<std::vector<double>>();
        for (std::size_t i = 0; i < fr.size(); ++i) bands.add(label_of(c.at("mode")), fr[i], sc[i]);
      }
      return bands.write(result_dir, "removal");
    }
    if (plot_kind == "auc_q") {
      expect_kind(result, "noisy-label", plot_kind);
      std::vector<double> grid;
      for (const auto& r : result.at("runs"))
        if (r.contains("q")) {
          const double q = r.at("q").get<double>();
          if (std::find(grid.begin(), grid.end(), q) == grid.end()) grid.push_back(q);
          bands.add("corry", q, r.at("auc").get<double>());
        }
      if (grid.empty()) throw Error("cli", "q_grid", "result has no burn-in ablation runs");
      // Runs without a burn-in ratio are flat references across the grid.
      for (const auto& r : result.at("runs"))
        if (!r.contains("q")) {
          const auto label = label_of(r.at("mode"));
          if (label.rfind("corry", 0) == 0) continue;
          for (const double q : grid) bands.add(label, q, r.at("auc").get<double>());
        }
      return bands.write(result_dir, "auc_q");
    }
    if (plot_kind == "mav") {
      expect_kind(result, "valuation", plot_kind);
      Bands mu;
      for (const auto& r : result.at("runs")) {
        const auto label = label_of(r.at("mode"));
        const double k = r.at("k").get<double>();
        double s = 0.0;
        int c = 0;
        for (const auto& v : r.at("mean_adjusted"))
          if (!v.is_null()) {
            s += v.get<double>();
            ++c;
          }
        if (c) bands.add(label, k, s / c);
        const auto m = r.at("mu").get<std::vector<double>>();
        mu.add(label, k, mean_of(m));
      }
      auto files = bands.write(result_dir, "mav");
      auto more = mu.write(result_dir, "mu");
      files.insert(files.end(), more.begin(), more.end());
      return files;
    }
    if (plot_kind == "similarity") {
      expect_kind(result, "similarity", plot_kind);
      Bands l2;
      for (const auto& r : result.at("runs")) {
        bands.add("cos", r.at("k").get<double>(), r.at("delta_cos").get<double>());
        l2.add("l2", r.at("k").get<double>(), r.at("delta_l2").get<double>());
      }
      auto files = bands.write(result_dir, "similarity");
      auto more = l2.write(result_dir, "similarity");
      files.insert(files.end(), more.begin(), more.end());
      return files;
    }
    if (plot_kind == "federated") {
      expect_kind(result, "federated", plot_kind);
      for (const auto& r : result.at("runs")) {
        const auto psi = r.at("psi").get<std::vector<double>>();
        for (std::size_t j = 0; j < psi.size(); ++j)
          bands.add(label_of(r.at("mode")), static_cast<double>(j), psi[j]);
      }
      return bands.write(result_dir, "federated");
    }
  } catch (const json::exception& e) {
    throw Error("cli", "result.json", std::string("result schema mismatch: ") + e.what());
  }
  throw Error("cli", "plot", "unknown plot kind '" + plot_kind +
                                 "' (expected variance, removal, auc_q, mav, similarity or federated)");
}

}  // namespace dpval
