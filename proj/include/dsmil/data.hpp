#pragma once

#include <cstdint>
#include <filesystem>
#include <map>
#include <optional>
#include <span>
#include <string>
#include <vector>

namespace dsmil {

using Instance = std::vector<double>;

/// A labelled multiset of instances. Instance labels, when present, are the
/// hidden ground truth and are never used for training.
struct Bag {
  std::string bag_id;
  int label = 0;
  std::vector<Instance> instances;
  std::optional<std::vector<int>> instance_labels;

  std::size_t size() const { return instances.size(); }
  friend bool operator==(const Bag&, const Bag&) = default;
};

struct Dataset {
  std::string name;
  std::size_t feature_dim = 0;
  std::vector<Bag> bags;
  std::vector<std::string> notes;

  std::size_t size() const { return bags.size(); }
  bool empty() const { return bags.empty(); }
  std::size_t positive_count() const;
  std::size_t instance_count() const;

  /// Checks non-empty bags, binary labels, uniform feature dimension and the
  /// bag/instance label relation. Throws DataError.
  void validate() const;

  /// Bags at the given indices, in that order.
  Dataset subset(std::span<const std::size_t> indices) const;
};

/// Data equality: bags and feature dimension. Name and notes are metadata.
bool same_bags(const Dataset& a, const Dataset& b);

/// 1 - prod(1 - y_i): a bag is positive iff any instance is positive.
int bag_label_from_instances(std::span<const int> instance_labels);

// ---------------------------------------------------------------------------
// Grouped CSV
// ---------------------------------------------------------------------------

struct CsvSchema {
  std::size_t bag_id_column = 1;
  std::size_t label_column = 0;
  std::size_t feature_first = 2;
  /// Inclusive last feature column; unset means "through the last column".
  std::optional<std::size_t> feature_last;
  /// Raw label token -> {0,1}. Tokens are compared numerically when both
  /// sides parse as numbers, textually otherwise.
  std::map<std::string, int> label_map{{"0", 0}, {"1", 1}};
  bool header = false;
  char delimiter = ',';

  /// Throws DataError if the id/label columns overlap the feature range or
  /// each other.
  void validate() const;
};

/// Reads a schema from a key=value file:
///   delimiter=,   bag_id_column=1   label_column=0   features=2-   (or 2-167)
///   label_map=1:1,0:0   header=false
CsvSchema load_csv_schema(const std::filesystem::path& path);

/// Rows sharing a bag id form one bag, in first-appearance order both for
/// bags and for instances within a bag.
Dataset parse_grouped_csv(const std::filesystem::path& path, const CsvSchema& schema);

// ---------------------------------------------------------------------------
// IDX (MNIST)
// ---------------------------------------------------------------------------

enum class IdxKind { labels, images };

struct IdxArray {
  IdxKind kind = IdxKind::labels;
  std::vector<std::uint32_t> dims;
  /// Labels as their integer values; image pixels scaled to [0,1] by /255.
  std::vector<double> values;

  std::size_t count() const { return dims.empty() ? 0 : dims[0]; }
  /// Elements per item (rows*cols for images, 1 for labels).
  std::size_t item_size() const;
};

/// Parses a big-endian u8 IDX file with magic 0x00000801 (labels, 1 dim) or
/// 0x00000803 (images, 3 dims). Throws FormatError on a bad magic, a bad
/// header or a truncated payload.
IdxArray parse_idx(const std::filesystem::path& path);
IdxArray parse_idx_bytes(std::span<const std::uint8_t> bytes);

// ---------------------------------------------------------------------------
// Generators
// ---------------------------------------------------------------------------

struct MnistBagOptions {
  std::size_t num_bags = 100;
  double mean_size = 10.0;
  double std_size = 2.0;
  int positive_digit = 9;
  std::uint64_t seed = 0;
  std::string id_prefix = "bag";
  /// When set, each bag is positive with this probability and its instances
  /// are drawn conditioned on that label: negatives from the non-target
  /// images only, positives resampled until they contain a target.
  std::optional<double> positive_fraction;
};

/// Bag sizes ~ round(Normal(mean, std)) clamped to >= 1; instances drawn
/// uniformly with replacement from the pool. Throws DomainError on an empty
/// pool, mean_size < 1, a positive_fraction outside [0,1] or a pool lacking
/// the class a requested label needs.
Dataset build_mnist_bags(const IdxArray& images, const IdxArray& labels, const MnistBagOptions& options);

struct SyntheticOptions {
  std::size_t num_bags = 100;
  std::size_t dim = 10;
  double mean_size = 10.0;
  double pos_instance_rate = 0.1;
  std::uint64_t seed = 0;
};

/// Negative instances ~ N(0, I), positive ~ N((2,0,...,0), I); instance
/// labels ~ Bernoulli(rate); bag sizes ~ round(Normal(mean, mean/5)) >= 1.
Dataset gen_synthetic_bags(const SyntheticOptions& options);

// ---------------------------------------------------------------------------
// Canonical bag file: one JSON object per line
//   {"bag_id":"b0","label":1,"instances":[[...],...],"instance_labels":[0,1]}
// ---------------------------------------------------------------------------

std::string serialize_bag(const Bag& bag);
Bag parse_bag_line(const std::string& line, std::size_t line_number);

void write_bags(const Dataset& dataset, const std::filesystem::path& path);
Dataset read_bags(const std::filesystem::path& path);

}  // namespace dsmil
