#include "dpval/data.hpp"

#include <algorithm>
#include <charconv>
#include <cmath>
#include <fstream>
#include <map>
#include <numeric>
#include <set>
#include <sstream>

namespace dpval {
namespace {

[[noreturn]] void fail(const std::string& message) { throw Error("data", message); }

std::vector<std::string> split_csv_line(const std::string& line) {
  std::vector<std::string> cells;
  std::string cell;
  bool quoted = false;
  for (std::size_t i = 0; i < line.size(); ++i) {
    const char c = line[i];
    if (quoted) {
      if (c == '"' && i + 1 < line.size() && line[i + 1] == '"') {
        cell.push_back('"');
        ++i;
      } else if (c == '"') {
        quoted = false;
      } else {
        cell.push_back(c);
      }
    } else if (c == '"') {
      quoted = true;
    } else if (c == ',') {
      cells.push_back(std::move(cell));
      cell.clear();
    } else if (c != '\r') {
      cell.push_back(c);
    }
  }
  cells.push_back(std::move(cell));
  for (auto& s : cells) {
    const auto first = s.find_first_not_of(" \t");
    const auto last = s.find_last_not_of(" \t");
    s = first == std::string::npos ? std::string() : s.substr(first, last - first + 1);
  }
  return cells;
}

struct CsvTable {
  std::vector<std::string> header;
  std::vector<std::vector<std::string>> rows;
};

CsvTable read_csv(const std::filesystem::path& path) {
  std::ifstream in(path);
  if (!in) fail("cannot open CSV file: " + path.string());
  CsvTable table;
  std::string line;
  bool have_header = false;
  while (std::getline(in, line)) {
    if (!have_header) {
      if (line.size() >= 3 && static_cast<unsigned char>(line[0]) == 0xEF &&
          static_cast<unsigned char>(line[1]) == 0xBB && static_cast<unsigned char>(line[2]) == 0xBF)
        line.erase(0, 3);
      table.header = split_csv_line(line);
      have_header = true;
      continue;
    }
    if (line.find_first_not_of(" \t\r") == std::string::npos) continue;
    table.rows.push_back(split_csv_line(line));
  }
  if (!have_header) fail("CSV file has no header row: " + path.string());
  return table;
}

double parse_number(const std::string& cell, std::size_t row, const std::string& column) {
  double value = 0.0;
  const char* begin = cell.data();
  const char* end = cell.data() + cell.size();
  if (!cell.empty() && *begin == '+') ++begin;
  const auto [ptr, ec] = std::from_chars(begin, end, value);
  if (cell.empty() || ec != std::errc() || ptr != end || !std::isfinite(value)) {
    std::ostringstream msg;
    msg << "non-numeric value at row " << row << ", column " << column;
    fail(msg.str());
  }
  return value;
}

struct ParsedColumns {
  Matrix features;
  Vector labels;
};

ParsedColumns extract(const CsvTable& table, const CsvSchema& schema) {
  std::map<std::string, std::size_t> index;
  for (std::size_t c = 0; c < table.header.size(); ++c) index[table.header[c]] = c;
  if (schema.label_column.empty()) fail("schema names no label column");
  const auto label_it = index.find(schema.label_column);
  if (label_it == index.end()) fail("label column not found: " + schema.label_column);

  std::vector<std::size_t> feature_idx;
  std::vector<std::string> feature_names;
  if (schema.feature_columns.empty()) {
    for (std::size_t c = 0; c < table.header.size(); ++c) {
      if (c == label_it->second) continue;
      feature_idx.push_back(c);
      feature_names.push_back(table.header[c]);
    }
  } else {
    for (const auto& name : schema.feature_columns) {
      const auto it = index.find(name);
      if (it == index.end()) fail("feature column not found: " + name);
      feature_idx.push_back(it->second);
      feature_names.push_back(name);
    }
  }
  if (feature_idx.empty()) fail("CSV has no feature columns");

  ParsedColumns out;
  out.features.resize(static_cast<Eigen::Index>(table.rows.size()),
                      static_cast<Eigen::Index>(feature_idx.size()));
  out.labels.resize(static_cast<Eigen::Index>(table.rows.size()));
  for (std::size_t r = 0; r < table.rows.size(); ++r) {
    const auto& cells = table.rows[r];
    if (cells.size() != table.header.size()) {
      std::ostringstream msg;
      msg << "row " << r + 1 << " has " << cells.size() << " cells, header has "
          << table.header.size();
      fail(msg.str());
    }
    for (std::size_t f = 0; f < feature_idx.size(); ++f)
      out.features(static_cast<Eigen::Index>(r), static_cast<Eigen::Index>(f)) =
          parse_number(cells[feature_idx[f]], r + 1, feature_names[f]);
    out.labels(static_cast<Eigen::Index>(r)) =
        parse_number(cells[label_it->second], r + 1, schema.label_column);
  }
  return out;
}

std::vector<std::size_t> iota_vec(std::size_t n) {
  std::vector<std::size_t> v(n);
  std::iota(v.begin(), v.end(), std::size_t{0});
  return v;
}

Matrix take_rows(const Matrix& m, const std::vector<std::size_t>& rows) {
  Matrix out(static_cast<Eigen::Index>(rows.size()), m.cols());
  for (std::size_t i = 0; i < rows.size(); ++i)
    out.row(static_cast<Eigen::Index>(i)) = m.row(static_cast<Eigen::Index>(rows[i]));
  return out;
}

Vector take_rows(const Vector& v, const std::vector<std::size_t>& rows) {
  Vector out(static_cast<Eigen::Index>(rows.size()));
  for (std::size_t i = 0; i < rows.size(); ++i)
    out(static_cast<Eigen::Index>(i)) = v(static_cast<Eigen::Index>(rows[i]));
  return out;
}

void require_classification(const PartitionedDataset& ds) {
  if (ds.task != TaskKind::classification || ds.n_classes < 2)
    fail("label corruption requires classification labels");
}

double flip_label(double old_label, int n_classes, Rng& rng) {
  std::uniform_int_distribution<int> offset(1, n_classes - 1);
  return static_cast<double>((static_cast<int>(old_label) + offset(rng)) % n_classes);
}

}  // namespace

std::vector<std::vector<std::size_t>> PartitionedDataset::party_members() const {
  std::vector<std::vector<std::size_t>> members(n_parties);
  for (std::size_t i = 0; i < party_of.size(); ++i) members.at(party_of[i]).push_back(i);
  return members;
}

std::vector<bool> PartitionedDataset::corrupted_parties() const {
  std::vector<bool> out(n_parties, false);
  if (!corruption_mask) return out;
  std::vector<std::size_t> bad(n_parties, 0);
  std::vector<std::size_t> size(n_parties, 0);
  for (std::size_t i = 0; i < party_of.size(); ++i) {
    ++size[party_of[i]];
    if ((*corruption_mask)[i]) ++bad[party_of[i]];
  }
  for (std::size_t p = 0; p < n_parties; ++p) out[p] = 2 * bad[p] > size[p];
  return out;
}

void PartitionedDataset::validate() const {
  const auto n = n_train();
  if (n == 0) fail("dataset has no training samples");
  if (static_cast<std::size_t>(labels.size()) != n) fail("label count does not match rows");
  if (party_of.size() != n) fail("party assignment does not cover every training sample");
  if (n_parties == 0) fail("dataset has no parties");
  std::vector<std::size_t> counts(n_parties, 0);
  for (const auto p : party_of) {
    if (p >= n_parties) fail("party index out of range");
    ++counts[p];
  }
  for (std::size_t p = 0; p < n_parties; ++p)
    if (counts[p] == 0) fail("party " + std::to_string(p) + " is empty");
  if (test_features.rows() > 0 && test_features.cols() != features.cols())
    fail("test features have a different width than training features");
  if (test_features.rows() != test_labels.size()) fail("test label count does not match rows");
  if (corruption_mask && corruption_mask->size() != n)
    fail("corruption mask length differs from training sample count");
  if (task == TaskKind::classification) {
    for (Eigen::Index i = 0; i < labels.size(); ++i)
      if (labels(i) < 0 || labels(i) >= n_classes || labels(i) != std::floor(labels(i)))
        fail("classification label out of range");
  }
}

PartitionedDataset load_csv(const std::filesystem::path& path, const CsvSchema& schema) {
  if (!std::filesystem::exists(path)) fail("missing file: " + path.string());
  const auto table = read_csv(path);
  ParsedColumns train = extract(table, schema);
  ParsedColumns test;
  test.features.resize(0, train.features.cols());

  if (!schema.test_path.empty()) {
    if (!std::filesystem::exists(schema.test_path))
      fail("missing file: " + schema.test_path.string());
    test = extract(read_csv(schema.test_path), schema);
  } else if (schema.test_fraction > 0.0) {
    if (schema.test_fraction >= 1.0) fail("test_fraction must be in [0, 1)");
    const auto total = static_cast<std::size_t>(train.features.rows());
    const auto n_test = static_cast<std::size_t>(std::floor(schema.test_fraction * total));
    const auto n_train = total - n_test;
    const auto train_n = static_cast<Eigen::Index>(n_train);
    const auto test_n = static_cast<Eigen::Index>(n_test);
    test.features = train.features.bottomRows(test_n);
    test.labels = train.labels.tail(test_n);
    Matrix f = train.features.topRows(train_n);
    Vector l = train.labels.head(train_n);
    train.features = std::move(f);
    train.labels = std::move(l);
  }
  if (train.features.rows() == 0) fail("CSV has no training rows");

  PartitionedDataset ds;
  ds.task = schema.task;
  if (schema.task == TaskKind::classification) {
    std::set<double> classes(train.labels.begin(), train.labels.end());
    if (classes.size() < 2) fail("classification schema needs at least 2 classes");
    std::map<double, int> id;
    for (const double c : classes) id.emplace(c, static_cast<int>(id.size()));
    for (auto& y : train.labels) y = id.at(y);
    for (auto& y : test.labels) {
      const auto it = id.find(y);
      if (it == id.end()) fail("test split contains a class absent from training");
      y = it->second;
    }
    ds.n_classes = static_cast<int>(classes.size());
  }

  if (schema.standardize) {
    const Eigen::RowVectorXd mean = train.features.colwise().mean();
    Matrix centered = train.features.rowwise() - mean;
    Eigen::RowVectorXd scale =
        (centered.array().square().colwise().sum() / static_cast<double>(centered.rows())).sqrt();
    for (Eigen::Index c = 0; c < scale.size(); ++c)
      if (!(scale(c) > 0.0)) scale(c) = 1.0;
    train.features = centered.array().rowwise() / scale.array();
    if (test.features.rows() > 0)
      test.features = (test.features.rowwise() - mean).array().rowwise() / scale.array();
  }

  ds.features = std::move(train.features);
  ds.labels = std::move(train.labels);
  ds.test_features = std::move(test.features);
  ds.test_labels = std::move(test.labels);
  ds.party_of = iota_vec(ds.n_train());
  ds.n_parties = ds.n_train();
  ds.validate();
  return ds;
}

PartitionedDataset synth_classification(std::size_t n_samples, std::size_t d_feat, int n_classes,
                                        std::uint64_t seed, double separation,
                                        std::optional<std::size_t> n_test) {
  if (n_samples == 0) fail("n_samples must be positive");
  if (d_feat == 0) fail("d_feat must be positive");
  if (n_classes < 2) fail("n_classes must be at least 2");
  if (!(separation > 0.0)) fail("separation must be positive");
  const std::size_t test_count = n_test.value_or(std::max<std::size_t>(1, n_samples / 2));

  Rng rng(derive_seed(seed, 0x5eed));
  std::normal_distribution<double> normal(0.0, 1.0);

  // Class means: random unit directions scaled so that the two-class means sit
  // `separation` apart.
  Matrix means(n_classes, static_cast<Eigen::Index>(d_feat));
  for (int c = 0; c < n_classes; ++c) {
    Vector u(static_cast<Eigen::Index>(d_feat));
    for (auto& v : u) v = normal(rng);
    u /= u.norm();
    means.row(c) = (0.5 * separation) * u.transpose();
  }
  if (n_classes == 2) means.row(1) = -means.row(0);

  auto draw = [&](std::size_t count, Matrix& x, Vector& y) {
    std::vector<int> cls(count);
    for (std::size_t i = 0; i < count; ++i) cls[i] = static_cast<int>(i % n_classes);
    std::shuffle(cls.begin(), cls.end(), rng);
    x.resize(static_cast<Eigen::Index>(count), static_cast<Eigen::Index>(d_feat));
    y.resize(static_cast<Eigen::Index>(count));
    for (std::size_t i = 0; i < count; ++i) {
      const auto r = static_cast<Eigen::Index>(i);
      for (std::size_t f = 0; f < d_feat; ++f)
        x(r, static_cast<Eigen::Index>(f)) = means(cls[i], static_cast<Eigen::Index>(f)) + normal(rng);
      y(r) = cls[i];
    }
  };

  PartitionedDataset ds;
  ds.task = TaskKind::classification;
  ds.n_classes = n_classes;
  draw(n_samples, ds.features, ds.labels);
  draw(test_count, ds.test_features, ds.test_labels);
  ds.party_of = iota_vec(n_samples);
  ds.n_parties = n_samples;
  return ds;
}

PartitionedDataset synth_regression(std::size_t n_samples, std::size_t d_feat, std::uint64_t seed,
                                    double noise_std, std::optional<std::size_t> n_test) {
  if (n_samples == 0) fail("n_samples must be positive");
  if (d_feat == 0) fail("d_feat must be positive");
  if (noise_std < 0.0) fail("noise_std must be non-negative");
  const std::size_t test_count = n_test.value_or(std::max<std::size_t>(1, n_samples / 2));

  Rng rng(derive_seed(seed, 0x7e6));
  std::normal_distribution<double> normal(0.0, 1.0);
  Vector w(static_cast<Eigen::Index>(d_feat));
  for (auto& v : w) v = normal(rng) / std::sqrt(static_cast<double>(d_feat));

  auto draw = [&](std::size_t count, Matrix& x, Vector& y) {
    x.resize(static_cast<Eigen::Index>(count), static_cast<Eigen::Index>(d_feat));
    for (Eigen::Index r = 0; r < x.rows(); ++r)
      for (Eigen::Index c = 0; c < x.cols(); ++c) x(r, c) = normal(rng);
    y = x * w;
    for (auto& v : y) v += noise_std * normal(rng);
  };

  PartitionedDataset ds;
  ds.task = TaskKind::regression;
  draw(n_samples, ds.features, ds.labels);
  draw(test_count, ds.test_features, ds.test_labels);
  ds.party_of = iota_vec(n_samples);
  ds.n_parties = n_samples;
  return ds;
}

PartitionedDataset corrupt_labels(const PartitionedDataset& ds, double ratio, std::uint64_t seed) {
  require_classification(ds);
  if (!(ratio >= 0.0) || ratio >= 1.0) fail("corruption ratio must be in [0, 1)");
  const auto n = ds.n_train();
  const auto count = static_cast<std::size_t>(std::floor(ratio * static_cast<double>(n)));

  Rng rng(derive_seed(seed, 0xc0ffee));
  auto order = iota_vec(n);
  std::shuffle(order.begin(), order.end(), rng);

  PartitionedDataset out = ds;
  std::vector<bool> mask(n, false);
  for (std::size_t i = 0; i < count; ++i) {
    const auto row = order[i];
    mask[row] = true;
    auto& y = out.labels(static_cast<Eigen::Index>(row));
    y = flip_label(y, ds.n_classes, rng);
  }
  out.corruption_mask = std::move(mask);
  return out;
}

PartitionedDataset corrupt_parties(const PartitionedDataset& ds,
                                   const std::vector<std::size_t>& parties, std::uint64_t seed) {
  require_classification(ds);
  Rng rng(derive_seed(seed, 0xbad));
  std::vector<bool> chosen(ds.n_parties, false);
  for (const auto p : parties) {
    if (p >= ds.n_parties) fail("party index out of range");
    chosen[p] = true;
  }
  PartitionedDataset out = ds;
  std::vector<bool> mask = ds.corruption_mask.value_or(std::vector<bool>(ds.n_train(), false));
  for (std::size_t i = 0; i < ds.n_train(); ++i) {
    if (!chosen[ds.party_of[i]]) continue;
    auto& y = out.labels(static_cast<Eigen::Index>(i));
    y = flip_label(y, ds.n_classes, rng);
    mask[i] = true;
  }
  out.corruption_mask = std::move(mask);
  return out;
}

PartitionedDataset partition(const PartitionedDataset& ds, std::size_t n_parties,
                             PartitionMode mode) {
  const auto n = ds.n_train();
  if (mode.kind == PartitionKind::per_sample) {
    PartitionedDataset out = ds;
    out.party_of = iota_vec(n);
    out.n_parties = n;
    return out;
  }
  if (n_parties == 0) fail("n_parties must be positive");
  if (n_parties > n) fail("more parties than training samples");

  if (mode.kind == PartitionKind::equal_chunks) {
    PartitionedDataset out = ds;
    const std::size_t base = n / n_parties;
    const std::size_t extra = n % n_parties;
    std::size_t row = 0;
    for (std::size_t p = 0; p < n_parties; ++p) {
      const std::size_t size = base + (p < extra ? 1 : 0);
      for (std::size_t i = 0; i < size; ++i) out.party_of[row++] = p;
    }
    out.n_parties = n_parties;
    return out;
  }

  if (mode.block_size == 0) fail("block size must be positive");
  if (n_parties * mode.block_size > n)
    fail("n_parties * block_size exceeds the number of training samples");
  const std::size_t kept = n_parties * mode.block_size;
  const auto rows = iota_vec(kept);
  PartitionedDataset out;
  out.task = ds.task;
  out.n_classes = ds.n_classes;
  out.features = take_rows(ds.features, rows);
  out.labels = take_rows(ds.labels, rows);
  out.test_features = ds.test_features;
  out.test_labels = ds.test_labels;
  if (ds.corruption_mask)
    out.corruption_mask =
        std::vector<bool>(ds.corruption_mask->begin(),
                          ds.corruption_mask->begin() + static_cast<std::ptrdiff_t>(kept));
  out.party_of.resize(kept);
  for (std::size_t i = 0; i < kept; ++i) out.party_of[i] = i / mode.block_size;
  out.n_parties = n_parties;
  return out;
}

void write_corruption_mask(const std::filesystem::path& path, const PartitionedDataset& ds) {
  std::ofstream out(path);
  if (!out) fail("cannot write " + path.string());
  out << "corrupted\n";
  for (std::size_t i = 0; i < ds.n_train(); ++i)
    out << ((ds.corruption_mask && (*ds.corruption_mask)[i]) ? 1 : 0) << '\n';
}

}  // namespace dpval
