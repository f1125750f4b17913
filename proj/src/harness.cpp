#include "dsmil/harness.hpp"

#include <algorithm>
#include <charconv>
#include <cmath>
#include <cstdio>
#include <cstdlib>
#include <fstream>
#include <iomanip>
#include <sstream>
#include <thread>
#include <atomic>
#include <memory>

#include "dsmil/errors.hpp"
#include "dsmil/optim.hpp"
#include "dsmil/snapshot.hpp"

#ifndef DSMIL_VERSION
#define DSMIL_VERSION "0.0.0"
#endif

namespace dsmil {

std::string_view toolkit_version() { return DSMIL_VERSION; }

namespace {

template <class T>
T parse_integer(const std::string& key, const std::string& value) {
  T out{};
  auto [ptr, ec] = std::from_chars(value.data(), value.data() + value.size(), out);
  if (ec != std::errc() || ptr != value.data() + value.size()) {
    throw UsageError("config: '" + key + "' expects a non-negative integer, got '" + value + "'");
  }
  return out;
}

double parse_real(const std::string& key, const std::string& value) {
  double out = 0.0;
  auto [ptr, ec] = std::from_chars(value.data(), value.data() + value.size(), out);
  if (ec != std::errc() || ptr != value.data() + value.size() || !std::isfinite(out)) {
    throw UsageError("config: '" + key + "' expects a number, got '" + value + "'");
  }
  return out;
}

bool parse_bool(const std::string& key, const std::string& value) {
  if (value == "true" || value == "1" || value == "yes" || value == "on") return true;
  if (value == "false" || value == "0" || value == "no" || value == "off") return false;
  throw UsageError("config: '" + key + "' expects true or false, got '" + value + "'");
}

std::string trim(const std::string& s) {
  const auto first = s.find_first_not_of(" \t\r\n");
  if (first == std::string::npos) return {};
  const auto last = s.find_last_not_of(" \t\r\n");
  return s.substr(first, last - first + 1);
}

std::string fmt_real(double v) {
  char buf[32];
  std::snprintf(buf, sizeof buf, "%.17g", v);
  return buf;
}

bool is_baseline_name(const std::string& name) {
  try {
    parse_baseline_kind(name);
    return true;
  } catch (const DomainError&) {
    return false;
  }
}

}  // namespace

void RunConfig::validate() const {
  if (!(lambda >= 0.0 && lambda <= 1.0)) throw UsageError("lambda must lie in [0,1]");
  if (!(lr >= 0.0)) throw UsageError("learning rate must be non-negative");
  if (embedding_dim == 0 || hidden_dim == 0 || attention_dim == 0) throw UsageError("layer sizes must be positive");
  if (folds < 2) throw UsageError("folds must be at least 2");
  if (repeats == 0) throw UsageError("repeats must be positive");
  if (threads == 0) throw UsageError("threads must be positive");
  if (format != "csv" && format != "bags") throw UsageError("format must be csv or bags, got '" + format + "'");
  if (optimizer != "adam" && optimizer != "sgd") throw UsageError("optimizer must be adam or sgd, got '" + optimizer + "'");
  if (model != "dsmil" && !is_baseline_name(model)) throw UsageError("unknown model '" + model + "'");
  if (mode == TrainMode::alternating && model != "dsmil") throw UsageError("alternating mode needs the dsmil model");
}

std::map<std::string, std::string> RunConfig::describe() const {
  std::map<std::string, std::string> d{
      {"data", data},
      {"format", format},
      {"model", model},
      {"extractor", std::string(to_string(extractor))},
      {"L", std::to_string(embedding_dim)},
      {"hidden", std::to_string(hidden_dim)},
      {"lambda", fmt_real(lambda)},
      {"lr", fmt_real(lr)},
      {"epochs", std::to_string(epochs)},
      {"optimizer", optimizer},
      {"mode", std::string(to_string(mode))},
      {"squash", squash ? "true" : "false"},
      {"standardize", standardize_enabled() ? "true" : "false"},
      {"folds", std::to_string(folds)},
      {"repeats", std::to_string(repeats)},
      {"seed", std::to_string(seed)},
      {"label", label},
      {"version", std::string(toolkit_version())},
  };
  if (model != "dsmil") d["attention_dim"] = std::to_string(attention_dim);
  if (schema) d["schema"] = *schema;
  return d;
}

void apply_setting(RunConfig& c, const std::string& key, const std::string& value) {
  if (key == "data") c.data = value;
  else if (key == "format") c.format = value;
  else if (key == "schema") c.schema = value;
  else if (key == "test") c.test_data = value;
  else if (key == "model") c.model = value;
  else if (key == "extractor") {
    try {
      c.extractor = parse_extractor_kind(value);
    } catch (const DomainError& e) {
      throw UsageError(e.what());
    }
  } else if (key == "L") c.embedding_dim = parse_integer<std::size_t>(key, value);
  else if (key == "hidden") c.hidden_dim = parse_integer<std::size_t>(key, value);
  else if (key == "attention_dim") c.attention_dim = parse_integer<std::size_t>(key, value);
  else if (key == "lambda") c.lambda = parse_real(key, value);
  else if (key == "lr") c.lr = parse_real(key, value);
  else if (key == "epochs") c.epochs = parse_integer<std::size_t>(key, value);
  else if (key == "optimizer") c.optimizer = value;
  else if (key == "mode") {
    try {
      c.mode = parse_train_mode(value);
    } catch (const DomainError& e) {
      throw UsageError(e.what());
    }
  } else if (key == "squash") c.squash = parse_bool(key, value);
  else if (key == "standardize") c.standardize = parse_bool(key, value);
  else if (key == "folds") c.folds = parse_integer<std::size_t>(key, value);
  else if (key == "repeats") c.repeats = parse_integer<std::size_t>(key, value);
  else if (key == "seed") c.seed = parse_integer<std::uint64_t>(key, value);
  else if (key == "out") c.out = value;
  else if (key == "label") c.label = value;
  else if (key == "threads") c.threads = parse_integer<std::size_t>(key, value);
  else throw UsageError("config: unknown key '" + key + "'");
}

void load_run_config(RunConfig& config, const std::filesystem::path& path) {
  std::ifstream in(path);
  if (!in) throw UsageError("cannot open config file " + path.string());
  std::string line;
  std::size_t line_number = 0;
  while (std::getline(in, line)) {
    ++line_number;
    const std::string t = trim(line);
    if (t.empty() || t.front() == '#') continue;
    const auto eq = t.find('=');
    if (eq == std::string::npos) {
      throw UsageError("config line " + std::to_string(line_number) + ": expected key=value");
    }
    apply_setting(config, trim(t.substr(0, eq)), trim(t.substr(eq + 1)));
  }
}

std::size_t threads_from_env() {
  const char* env = std::getenv("DSMIL_THREADS");
  if (env == nullptr || *env == '\0') return 1;
  const std::string v = env;
  const auto n = parse_integer<std::size_t>("DSMIL_THREADS", v);
  return std::max<std::size_t>(n, 1);
}

std::uint64_t derive_seed(std::uint64_t base, std::uint64_t stream) {
  // splitmix64 finaliser over (base, stream).
  std::uint64_t z = base + 0x9E3779B97F4A7C15ULL * (stream + 1);
  z = (z ^ (z >> 30)) * 0xBF58476D1CE4E5B9ULL;
  z = (z ^ (z >> 27)) * 0x94D049BB133111EBULL;
  return z ^ (z >> 31);
}

Dataset load_dataset(const RunConfig& config) {
  if (config.data.empty()) throw UsageError("no dataset given (--data)");
  Dataset ds;
  if (config.format == "csv") {
    const CsvSchema schema = config.schema ? load_csv_schema(*config.schema) : CsvSchema{};
    ds = parse_grouped_csv(config.data, schema);
  } else {
    ds = read_bags(config.data);
  }
  if (ds.empty()) throw DataError("dataset " + config.data + " contains no bags");
  ds.validate();
  return ds;
}

MilModel make_model(const RunConfig& config, std::size_t input_dim, std::uint64_t seed) {
  ExtractorConfig ext{config.extractor, input_dim, config.hidden_dim, config.embedding_dim};
  if (config.model == "dsmil") return MilModel(DsmilModel(DsmilConfig{ext, config.lambda}, seed));
  return MilModel(BaselineModel(BaselineConfig{parse_baseline_kind(config.model), ext, config.attention_dim}, seed));
}

FeatureScaler FeatureScaler::fit(const Dataset& dataset) {
  const std::size_t d = dataset.feature_dim;
  FeatureScaler s{std::vector<double>(d, 0.0), std::vector<double>(d, 1.0)};
  std::vector<double> m2(d, 0.0);
  std::size_t n = 0;
  for (const Bag& bag : dataset.bags) {
    for (const Instance& x : bag.instances) {
      ++n;
      for (std::size_t j = 0; j < d; ++j) {
        const double delta = x[j] - s.mean[j];
        s.mean[j] += delta / static_cast<double>(n);
        m2[j] += delta * (x[j] - s.mean[j]);
      }
    }
  }
  for (std::size_t j = 0; j < d; ++j) {
    const double sd = n > 1 ? std::sqrt(m2[j] / static_cast<double>(n - 1)) : 0.0;
    s.scale[j] = sd > 0.0 ? 1.0 / sd : 1.0;
  }
  return s;
}

Dataset FeatureScaler::apply(const Dataset& dataset) const {
  Dataset out = dataset;
  for (Bag& bag : out.bags)
    for (Instance& x : bag.instances)
      for (std::size_t j = 0; j < x.size(); ++j) x[j] = (x[j] - mean[j]) * scale[j];
  return out;
}

TrainLog train_model(const Dataset& dataset, MilModel& model, const RunConfig& config, std::uint64_t seed,
                     const std::function<void(std::size_t, double)>& on_epoch) {
  std::unique_ptr<Optimizer> opt;
  if (config.optimizer == "sgd") opt = std::make_unique<Sgd>(config.lr);
  else opt = std::make_unique<Adam>(AdamConfig{config.lr});
  std::mt19937_64 rng(derive_seed(seed, 1));
  const TrainOptions options{config.mode, config.squash};
  TrainLog log;
  for (std::size_t e = 0; e < config.epochs; ++e) {
    const EpochResult r = train_epoch(dataset, model, *opt, options, e, rng);
    log.epoch_losses.push_back(r.mean_loss);
    if (on_epoch) on_epoch(e, r.mean_loss);
  }
  return log;
}

std::vector<double> predict_logits(const MilModel& model, const Dataset& dataset) {
  std::vector<double> out;
  out.reserve(dataset.size());
  for (const Bag& bag : dataset.bags) out.push_back(model.predict(bag.instances));
  return out;
}

FoldRecord evaluate_model(const MilModel& model, const Dataset& dataset, std::size_t run, std::size_t fold) {
  const auto logits = predict_logits(model, dataset);
  std::vector<int> labels;
  labels.reserve(dataset.size());
  for (const Bag& b : dataset.bags) labels.push_back(b.label);
  return evaluate_logits(logits, labels, run, fold);
}

EvalReport run_cross_validation(const RunConfig& config, const Dataset& dataset) {
  config.validate();
  if (config.folds > dataset.size()) {
    throw UsageError(std::to_string(config.folds) + " folds requested for " + std::to_string(dataset.size()) + " bags");
  }
  struct Task {
    std::size_t run, fold;
    std::vector<std::size_t> train, test;
  };
  std::vector<Task> tasks;
  for (std::size_t r = 0; r < config.repeats; ++r) {
    const FoldPlan plan = kfold_split(dataset.size(), config.folds, config.seed + r);
    for (std::size_t f = 0; f < config.folds; ++f) tasks.push_back({r, f, plan.train_indices(f), plan.test_indices(f)});
  }

  std::vector<FoldRecord> records(tasks.size());
  const auto run_task = [&](std::size_t t) {
    const Task& task = tasks[t];
    Dataset train = dataset.subset(task.train);
    Dataset test = dataset.subset(task.test);
    if (config.standardize_enabled()) {
      const FeatureScaler scaler = FeatureScaler::fit(train);
      train = scaler.apply(train);
      test = scaler.apply(test);
    }
    const std::uint64_t seed = derive_seed(config.seed + task.run, task.fold);
    MilModel model = make_model(config, dataset.feature_dim, seed);
    train_model(train, model, config, seed);
    records[t] = evaluate_model(model, test, task.run, task.fold);
  };

  const std::size_t workers = std::min(config.threads, tasks.size());
  if (workers <= 1) {
    for (std::size_t t = 0; t < tasks.size(); ++t) run_task(t);
  } else {
    std::atomic<std::size_t> next{0};
    std::vector<std::exception_ptr> errors(workers);
    std::vector<std::thread> pool;
    for (std::size_t w = 0; w < workers; ++w) {
      pool.emplace_back([&, w] {
        try {
          for (std::size_t t = next++; t < tasks.size(); t = next++) run_task(t);
        } catch (...) {
          errors[w] = std::current_exception();
        }
      });
    }
    for (auto& th : pool) th.join();
    for (auto& e : errors)
      if (e) std::rethrow_exception(e);
  }

  EvalReport report;
  report.config = config.describe();
  report.config["dataset"] = dataset.name;
  report.config["bags"] = std::to_string(dataset.size());
  report.records = std::move(records);
  return report;
}

// ---------------------------------------------------------------------------
// Commands
// ---------------------------------------------------------------------------

TrainArtifacts cmd_train(const RunConfig& config, std::ostream& log) {
  config.validate();
  if (config.standardize.value_or(false)) throw UsageError("standardize applies to cross-validation only");
  const Dataset train = load_dataset(config);
  std::optional<Dataset> test;
  if (config.test_data) {
    test = read_bags(*config.test_data);
    test->validate();
    if (test->feature_dim != train.feature_dim) {
      throw DataError("test bags have dimension " + std::to_string(test->feature_dim) + ", training bags " +
                      std::to_string(train.feature_dim));
    }
  }
  std::filesystem::create_directories(config.out);
  MilModel model = make_model(config, train.feature_dim, config.seed);

  TrainArtifacts out;
  out.loss_log = std::filesystem::path(config.out) / "train_loss.tsv";
  std::ofstream loss_file(out.loss_log, std::ios::binary | std::ios::trunc);
  if (!loss_file) throw DataError("cannot write " + out.loss_log.string());
  train_model(train, model, config, config.seed, [&](std::size_t epoch, double loss) {
    loss_file << epoch + 1 << '\t' << fmt_real(loss) << '\n';
    log << "epoch " << epoch + 1 << "/" << config.epochs << " loss " << fmt_real(loss) << '\n';
  });
  loss_file.close();

  out.snapshot = std::filesystem::path(config.out) / "model.snapshot";
  save_snapshot(model, config.seed, out.snapshot);

  if (test) {
    EvalReport report;
    report.config = config.describe();
    report.config["dataset"] = test->name;
    report.config["bags"] = std::to_string(test->size());
    report.records.push_back(evaluate_model(model, *test));
    out.test_report = std::filesystem::path(config.out) / "test_report.jsonl";
    write_report(report, *out.test_report);
    const auto& r = report.records.front();
    log << "test accuracy " << fmt_real(r.accuracy) << " auc " << (r.auc ? fmt_real(*r.auc) : "n/a") << '\n';
  }
  return out;
}

std::filesystem::path cmd_cv(const RunConfig& config, std::ostream& log) {
  config.validate();
  const Dataset ds = load_dataset(config);
  std::filesystem::create_directories(config.out);
  const EvalReport report = run_cross_validation(config, ds);
  const auto path = std::filesystem::path(config.out) / "cv_report.jsonl";
  write_report(report, path);
  for (const auto& [name, ms] : report.fold_aggregates()) {
    log << name << " " << format_fixed_half_even(ms.mean, 3) << " +- " << format_fixed_half_even(ms.std, 3) << '\n';
  }
  return path;
}

MnistBagsArtifacts cmd_mnist_bags(const MnistBagsArgs& args) {
  const IdxArray train_images = parse_idx(args.train_images);
  const IdxArray train_labels = parse_idx(args.train_labels);
  const IdxArray test_images = parse_idx(args.test_images);
  const IdxArray test_labels = parse_idx(args.test_labels);

  MnistBagOptions train_opts;
  train_opts.num_bags = args.train_bags;
  train_opts.mean_size = args.mean_size;
  train_opts.std_size = args.std_size;
  train_opts.positive_digit = args.positive_digit;
  train_opts.seed = args.seed;
  train_opts.id_prefix = "train";
  train_opts.positive_fraction = args.positive_fraction;
  MnistBagOptions test_opts = train_opts;
  test_opts.num_bags = args.test_bags;
  test_opts.seed = derive_seed(args.seed, 1);
  test_opts.id_prefix = "test";
  const Dataset train = build_mnist_bags(train_images, train_labels, train_opts);
  const Dataset test = build_mnist_bags(test_images, test_labels, test_opts);

  std::filesystem::create_directories(args.out);
  MnistBagsArtifacts out{args.out / "mnist_train.bags", args.out / "mnist_test.bags"};
  write_bags(train, out.train);
  write_bags(test, out.test);
  return out;
}

void cmd_score_instances(const std::filesystem::path& snapshot, const std::filesystem::path& bags, std::ostream& out) {
  const MilModel model = load_snapshot(snapshot);
  if (!model.is_dsmil()) throw UsageError("score-instances needs a dsmil snapshot");
  const Dataset ds = read_bags(bags);
  if (!ds.empty() && ds.feature_dim != model.extractor().input_dim()) {
    throw DimensionError("bags have dimension " + std::to_string(ds.feature_dim) + ", model expects " +
                         std::to_string(model.extractor().input_dim()));
  }
  out << "bag_id\tinstance\traw_score\tsigmoid_score\tinstance_label\n";
  for (const Bag& bag : ds.bags) {
    const BagForwardResult r = forward_bag(bag, model.dsmil());
    for (std::size_t i = 0; i < bag.size(); ++i) {
      const double s = r.instance_scores[i];
      const double p = 1.0 / (1.0 + std::exp(-s));
      out << bag.bag_id << '\t' << i << '\t' << fmt_real(s) << '\t' << fmt_real(p) << '\t'
          << (bag.instance_labels ? std::to_string((*bag.instance_labels)[i]) : std::string("-")) << '\n';
    }
  }
}

std::string ReportTable::plain_text() const {
  std::vector<std::size_t> width(columns.size(), 0);
  const auto display_len = [](const std::string& s) {
    // "±" is two bytes of UTF-8 but one column.
    std::size_t n = 0;
    for (unsigned char c : s) n += (c & 0xC0) != 0x80;
    return n;
  };
  for (std::size_t c = 0; c < columns.size(); ++c) {
    width[c] = display_len(columns[c]);
    for (const auto& row : rows) width[c] = std::max(width[c], display_len(row[c]));
  }
  std::ostringstream out;
  const auto emit = [&](const std::vector<std::string>& cells) {
    for (std::size_t c = 0; c < cells.size(); ++c) {
      if (c > 0) out << " | ";
      out << cells[c] << std::string(width[c] - display_len(cells[c]), ' ');
    }
    out << '\n';
  };
  emit(columns);
  for (std::size_t c = 0; c < columns.size(); ++c) {
    if (c > 0) out << "-+-";
    out << std::string(width[c], '-');
  }
  out << '\n';
  for (const auto& row : rows) emit(row);
  return out.str();
}

std::string ReportTable::delimited(char delimiter) const {
  std::ostringstream out;
  const auto emit = [&](const std::vector<std::string>& cells) {
    for (std::size_t c = 0; c < cells.size(); ++c) {
      if (c > 0) out << delimiter;
      out << cells[c];
    }
    out << '\n';
  };
  emit(columns);
  for (const auto& row : rows) emit(row);
  return out.str();
}

ReportTable cmd_report(const std::vector<std::filesystem::path>& reports, StdLevel level) {
  if (reports.empty()) throw UsageError("report: no report files given");
  ReportTable table;
  table.columns.push_back("method");
  for (const auto& m : metric_names()) table.columns.push_back(m);
  for (const auto& path : reports) {
    const EvalReport report = read_report(path);
    if (report.records.empty()) throw FormatError("report " + path.string() + " has no fold records");
    std::string name;
    if (auto it = report.config.find("label"); it != report.config.end() && !it->second.empty()) {
      name = it->second;
    } else {
      const auto get = [&](const char* key) {
        auto it2 = report.config.find(key);
        return it2 == report.config.end() ? std::string("?") : it2->second;
      };
      name = get("model") + " " + get("dataset");
    }
    const auto agg = level == StdLevel::fold ? report.fold_aggregates() : report.run_aggregates();
    std::vector<std::string> row{name};
    for (const auto& m : metric_names()) {
      auto it = agg.find(m);
      row.push_back(it == agg.end() ? "n/a"
                                    : format_fixed_half_even(it->second.mean, 3) + " ± " +
                                          format_fixed_half_even(it->second.std, 3));
    }
    table.rows.push_back(std::move(row));
  }
  return table;
}

}  // namespace dsmil
