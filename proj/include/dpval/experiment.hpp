#pragma once

#include "dpval/data.hpp"
#include "dpval/dp.hpp"
#include "dpval/metrics.hpp"
#include "dpval/models.hpp"
#include "dpval/valuation.hpp"

#include <json.hpp>

#include <filesystem>
#include <optional>
#include <string>
#include <vector>

namespace dpval {

enum class ExperimentKind {
  valuation,
  noisy_label,
  removal,
  variance_probe,
  similarity,
  federated,
  oracle_check
};

struct DatasetConfig {
  std::string source = "synth_classification";  // synth_classification | synth_regression | csv
  std::size_t n = 200;
  std::size_t d = 2;
  int classes = 2;
  double separation = 2.0;
  double noise_std = 0.1;
  std::optional<std::size_t> n_test;
  std::uint64_t seed = 0;

  std::filesystem::path path;
  std::string label_column = "label";
  std::vector<std::string> feature_columns;
  bool standardize = false;
  double test_fraction = 0.0;
  std::filesystem::path test_path;

  double corrupt_ratio = 0.0;
  std::vector<std::size_t> corrupt_parties;

  PartitionMode partition;
  std::size_t n_parties = 0;  // ignored for per_sample
};

struct NoiseSettings {
  double clip_norm = 1.0;
  std::optional<double> sigma;    // explicit multiplier; wins over epsilon
  std::optional<double> epsilon;  // calibrated with delta when sigma is unset
  double delta = 5e-5;
  int k = 100;
  double q = 0.5;  // burn-in for "corr_y" without an explicit ratio
  std::optional<double> sigma_g_sq;

  double resolved_sigma() const;
};

// One entry of the `modes` list: "no_dp", "iid", "corr_x", "corr_y",
// "corr_y:<q>" or "fl_schedule".
struct ModeSpec {
  NoiseMode mode = NoiseMode::iid;
  bool no_dp = false;
  std::optional<double> q;

  static ModeSpec parse(const std::string& text);
  std::string name() const;   // round-trips through parse
  std::string label() const;  // file-name friendly: nodp, iid, corrx, corry0.9, fl
};

struct ExperimentConfig {
  ExperimentKind kind = ExperimentKind::valuation;
  std::filesystem::path output_dir = "out";
  std::vector<std::uint64_t> seeds{0};
  DatasetConfig dataset;
  ModelSpec model;
  UtilitySpec utility;
  NoiseSettings noise;
  SemivalueSpec semivalue;
  std::vector<ModeSpec> modes;
  int trials = 100;
  std::vector<int> ks;
  std::vector<double> q_grid;
  std::vector<double> fractions;
  FederatedOptions federated;
  int removal_seeds = 5;
  int removal_epochs = 1;
  int oracle_n = 4;
  int threads = 1;

  // Budgets to sweep: `ks` when given, else {noise.k}.
  std::vector<int> budgets() const;
};

// Relative csv paths are resolved against `base_dir`. Throws Error with
// module "config" and a dotted field name.
ExperimentConfig parse_config(const nlohmann::json& doc, const std::filesystem::path& base_dir = {});
ExperimentConfig load_config(const std::filesystem::path& path);
nlohmann::json to_json(const ExperimentConfig& cfg);

ExperimentKind parse_kind(const std::string& text);
const char* to_string(ExperimentKind kind);

PartitionedDataset build_dataset(const DatasetConfig& cfg, std::uint64_t seed);
NoiseConfig noise_config(const NoiseSettings& settings, const ModeSpec& mode, int k);

struct ExperimentOutcome {
  std::filesystem::path directory;
  bool passed = true;  // oracle-check verdict; true for other kinds
  std::string message;
};

// Output lands in cfg.output_dir, resolved against $DPVAL_OUTPUT_ROOT when
// that is set and the path is relative.
std::filesystem::path resolve_output_dir(const ExperimentConfig& cfg);

// Writes result.json, summary.csv, config.echo, any extra data files and a
// MANIFEST of SHA-256 digests.
ExperimentOutcome run_experiment(const ExperimentConfig& cfg);

// Plot kinds: variance, removal, auc_q, mav, similarity, federated.
std::vector<std::filesystem::path> emit_plot_data(const std::filesystem::path& result_dir,
                                                  const std::string& plot_kind);

std::string sha256_hex(const std::string& bytes);

}  // namespace dpval
