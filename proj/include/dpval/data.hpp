#pragma once

#include "dpval/common.hpp"

#include <cstddef>
#include <filesystem>
#include <optional>
#include <string>
#include <vector>

namespace dpval {

enum class TaskKind { regression, classification };

// Training/test split with a party assignment over the training rows.
//
// Every training row belongs to exactly one party, parties are numbered
// 0..n_parties-1 and none is empty. Classification labels are class ids
// 0..n_classes-1 stored as doubles.
struct PartitionedDataset {
  Matrix features;
  Vector labels;
  std::vector<std::size_t> party_of;
  std::size_t n_parties = 0;
  Matrix test_features;
  Vector test_labels;
  std::optional<std::vector<bool>> corruption_mask;
  TaskKind task = TaskKind::classification;
  int n_classes = 0;

  std::size_t n_train() const { return static_cast<std::size_t>(features.rows()); }
  std::size_t d_feat() const { return static_cast<std::size_t>(features.cols()); }

  // Row indices of each party, in row order.
  std::vector<std::vector<std::size_t>> party_members() const;

  // A party counts as corrupted when a strict majority of its rows are.
  std::vector<bool> corrupted_parties() const;

  // Throws Error("data", ...) when an invariant is violated.
  void validate() const;
};

struct CsvSchema {
  std::string label_column;
  std::vector<std::string> feature_columns;  // empty: every non-label column
  TaskKind task = TaskKind::classification;
  bool standardize = false;
  double test_fraction = 0.0;  // trailing rows held out as the test split
  std::filesystem::path test_path;  // separate test file; overrides test_fraction
};

PartitionedDataset load_csv(const std::filesystem::path& path, const CsvSchema& schema);

// Isotropic Gaussian class blobs, balanced to within one sample per class.
// `n_test` defaults to half of `n_samples`.
PartitionedDataset synth_classification(std::size_t n_samples, std::size_t d_feat, int n_classes,
                                        std::uint64_t seed, double separation,
                                        std::optional<std::size_t> n_test = std::nullopt);

// y = w.x + N(0, noise_std^2) with x ~ N(0, I) and w ~ N(0, I/d).
PartitionedDataset synth_regression(std::size_t n_samples, std::size_t d_feat, std::uint64_t seed,
                                    double noise_std,
                                    std::optional<std::size_t> n_test = std::nullopt);

// Flips exactly floor(ratio * n_train) labels to a different class chosen
// uniformly at random; marks them in corruption_mask.
PartitionedDataset corrupt_labels(const PartitionedDataset& ds, double ratio, std::uint64_t seed);

// Reassigns every label of the given parties to a different class.
PartitionedDataset corrupt_parties(const PartitionedDataset& ds,
                                   const std::vector<std::size_t>& parties, std::uint64_t seed);

enum class PartitionKind { per_sample, equal_chunks, by_size };

struct PartitionMode {
  PartitionKind kind = PartitionKind::per_sample;
  std::size_t block_size = 0;  // by_size only
};

// Groups training rows into parties in row order. by_size keeps the first
// n_parties * block_size rows and drops the rest from the training split.
PartitionedDataset partition(const PartitionedDataset& ds, std::size_t n_parties,
                             PartitionMode mode);

// Single-column 0/1 CSV aligned to training-row order.
void write_corruption_mask(const std::filesystem::path& path, const PartitionedDataset& ds);

}  // namespace dpval
