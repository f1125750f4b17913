#pragma once

#include <cstdint>
#include <filesystem>
#include <functional>
#include <map>
#include <optional>
#include <ostream>
#include <string>
#include <vector>

#include "dsmil/data.hpp"
#include "dsmil/eval.hpp"
#include "dsmil/model.hpp"

namespace dsmil {

std::string_view toolkit_version();

/// Everything that determines an experiment. Loaded from a key=value file
/// and then overridden by command-line flags.
struct RunConfig {
  std::string data;                       // dataset path
  std::string format = "bags";            // csv | bags
  std::optional<std::string> schema;      // CsvSchema file for csv input
  std::optional<std::string> test_data;   // held-out bag file (train only)
  std::string model = "dsmil";            // dsmil or a baseline kind
  ExtractorKind extractor = ExtractorKind::mlp;
  std::size_t embedding_dim = 64;         // L
  std::size_t hidden_dim = 128;
  std::size_t attention_dim = 64;
  double lambda = 0.5;
  double lr = 1e-4;
  std::size_t epochs = 40;
  std::string optimizer = "adam";         // adam | sgd
  TrainMode mode = TrainMode::joint;
  bool squash = true;
  /// z-score features with training-fold statistics (cv only). Unset means
  /// on for csv input, off for bag files.
  std::optional<bool> standardize;
  std::size_t folds = 10;
  std::size_t repeats = 5;
  std::uint64_t seed = 0;
  std::string out = ".";
  std::string label;                      // row label for reports
  std::size_t threads = 1;

  bool standardize_enabled() const { return standardize.value_or(format == "csv"); }

  /// Throws UsageError on out-of-range values.
  void validate() const;
  /// key -> printable value, recorded in reports.
  std::map<std::string, std::string> describe() const;
};

/// Applies one key=value setting; throws UsageError on unknown keys or
/// unparsable values.
void apply_setting(RunConfig& config, const std::string& key, const std::string& value);
void load_run_config(RunConfig& config, const std::filesystem::path& path);

/// Worker cap from DSMIL_THREADS (default 1).
std::size_t threads_from_env();

/// Deterministic stream splitting of a base seed.
std::uint64_t derive_seed(std::uint64_t base, std::uint64_t stream);

Dataset load_dataset(const RunConfig& config);
MilModel make_model(const RunConfig& config, std::size_t input_dim, std::uint64_t seed);

/// Per-feature mean/std from a training set, applied to any dataset.
struct FeatureScaler {
  std::vector<double> mean;
  std::vector<double> scale;  // 1/std, 1 for constant features

  static FeatureScaler fit(const Dataset& dataset);
  Dataset apply(const Dataset& dataset) const;
};

struct TrainLog {
  std::vector<double> epoch_losses;
};

/// Trains `model` in place for config.epochs epochs.
TrainLog train_model(const Dataset& dataset, MilModel& model, const RunConfig& config, std::uint64_t seed,
                     const std::function<void(std::size_t, double)>& on_epoch = {});

/// Bag logits for every bag of `dataset`.
std::vector<double> predict_logits(const MilModel& model, const Dataset& dataset);
FoldRecord evaluate_model(const MilModel& model, const Dataset& dataset, std::size_t run = 0, std::size_t fold = 0);

/// Repeated k-fold cross-validation. Repeat r reseeds with seed + r; records
/// are ordered by (repeat, fold) regardless of worker scheduling.
EvalReport run_cross_validation(const RunConfig& config, const Dataset& dataset);

// ---------------------------------------------------------------------------
// Commands. Each writes its artifacts and returns normally; failures are
// reported through exceptions (dsmil::Error for user-facing problems).
// ---------------------------------------------------------------------------

struct TrainArtifacts {
  std::filesystem::path snapshot;
  std::filesystem::path loss_log;
  std::optional<std::filesystem::path> test_report;
};

TrainArtifacts cmd_train(const RunConfig& config, std::ostream& log);

std::filesystem::path cmd_cv(const RunConfig& config, std::ostream& log);

struct MnistBagsArgs {
  std::filesystem::path train_images, train_labels, test_images, test_labels;
  std::size_t train_bags = 100;
  std::size_t test_bags = 1000;
  double mean_size = 10.0;
  double std_size = 2.0;
  int positive_digit = 9;
  std::uint64_t seed = 0;
  std::filesystem::path out = ".";
  std::optional<double> positive_fraction;
};

struct MnistBagsArtifacts {
  std::filesystem::path train;
  std::filesystem::path test;
};

MnistBagsArtifacts cmd_mnist_bags(const MnistBagsArgs& args);

/// Rows: bag_id, instance, raw score, sigmoid score, hidden label (or "-").
void cmd_score_instances(const std::filesystem::path& snapshot, const std::filesystem::path& bags, std::ostream& out);

enum class StdLevel { fold, run };

struct ReportTable {
  std::vector<std::string> columns;               // "method" then metric names
  std::vector<std::vector<std::string>> rows;

  std::string plain_text() const;
  std::string delimited(char delimiter) const;
};

ReportTable cmd_report(const std::vector<std::filesystem::path>& reports, StdLevel level = StdLevel::fold);

}  // namespace dsmil
