#pragma once

#include <cstdint>
#include <filesystem>
#include <map>
#include <optional>
#include <span>
#include <string>
#include <vector>

namespace dsmil {

/// Mann-Whitney AUC: (concordant + 0.5 * tied) / (P * N) over every
/// positive/negative pair. Throws DomainError unless both classes occur.
double auc(std::span<const double> scores, std::span<const int> labels);

struct ConfusionMetrics {
  double accuracy = 0.0;
  double precision = 0.0;
  double recall = 0.0;
  double f_score = 0.0;
};

/// Zero-denominator precision/recall are 0; F is 0 when precision+recall is 0.
ConfusionMetrics confusion_metrics(std::span<const int> predictions, std::span<const int> labels);

struct FoldPlan {
  std::size_t k = 0;
  std::uint64_t seed = 0;
  std::vector<std::size_t> assignments;  // bag index -> fold index

  std::vector<std::size_t> test_indices(std::size_t fold) const;
  std::vector<std::size_t> train_indices(std::size_t fold) const;
  std::size_t fold_size(std::size_t fold) const;
};

/// Seeded shuffle, then contiguous chunks; the first num_bags % k folds get
/// one extra bag. Throws DomainError when k is 0 or exceeds num_bags.
FoldPlan kfold_split(std::size_t num_bags, std::size_t k, std::uint64_t seed);

struct MeanStd {
  double mean = 0.0;
  double std = 0.0;  // sample (n-1) deviation, 0 for a single value
  std::size_t count = 0;
};

/// Throws DomainError on an empty input.
MeanStd aggregate(std::span<const double> values);

inline const std::vector<std::string>& metric_names() {
  static const std::vector<std::string> names{"accuracy", "auc", "precision", "recall", "f_score"};
  return names;
}

struct FoldRecord {
  std::size_t run = 0;
  std::size_t fold = 0;
  std::size_t num_bags = 0;
  double accuracy = 0.0;
  /// Unset when the evaluated bags are all of one class.
  std::optional<double> auc;
  double precision = 0.0;
  double recall = 0.0;
  double f_score = 0.0;

  std::optional<double> metric(const std::string& name) const;
};

/// Thresholds sigmoid(logit) at 0.5 (logit >= 0) and scores every metric.
FoldRecord evaluate_logits(std::span<const double> logits, std::span<const int> labels, std::size_t run = 0,
                           std::size_t fold = 0);

struct EvalReport {
  /// Free-form run description (method, dataset, hyper-parameters).
  std::map<std::string, std::string> config;
  std::vector<FoldRecord> records;

  /// Mean and std over every fold record.
  std::map<std::string, MeanStd> fold_aggregates() const;
  /// Mean and std over the per-run means.
  std::map<std::string, MeanStd> run_aggregates() const;
};

/// JSON lines: one {"kind":"config"} line, one {"kind":"fold"} line per
/// record, then {"kind":"aggregates"} carrying fold- and run-level blocks.
std::string serialize_report(const EvalReport& report);
EvalReport parse_report(const std::string& text);
void write_report(const EvalReport& report, const std::filesystem::path& path);
EvalReport read_report(const std::filesystem::path& path);

/// Decimal rounding with ties to even, applied to the exact binary value.
std::string format_fixed_half_even(double value, int decimals);

}  // namespace dsmil
