// dsmil: train, cross-validate and report dual-stream MIL models.
//
// Exit codes: 0 success, 2 usage/config/data error, 1 internal failure.

#include <cstdlib>
#include <fstream>
#include <iostream>

#include <CLI11.hpp>

#include "dsmil/errors.hpp"
#include "dsmil/harness.hpp"

namespace {

struct CommonFlags {
  std::string config;
  std::map<std::string, std::string> overrides;
};

// Registers the flags shared by train and cv. Values land in `flags.overrides`
// keyed like the config file so that flags win over --config.
void add_common(CLI::App* cmd, CommonFlags& flags) {
  cmd->add_option("--config", flags.config, "key=value config file");
  const auto opt = [&](const std::string& name, const std::string& key, const std::string& help) {
    cmd->add_option_function<std::string>(
        name, [&flags, key](const std::string& v) { flags.overrides[key] = v; }, help);
  };
  opt("--data", "data", "dataset path");
  opt("--format", "format", "csv|bags");
  opt("--schema", "schema", "CsvSchema key=value file");
  opt("--model", "model", "dsmil|instance_max|instance_mean|embed_max|embed_mean|abmilp|abmilp_gated");
  opt("--extractor", "extractor", "identity|mlp|lenet");
  opt("--L", "L", "embedding length");
  opt("--hidden", "hidden", "extractor hidden width");
  opt("--attention-dim", "attention_dim", "baseline attention width");
  opt("--lambda", "lambda", "stream weight in [0,1]");
  opt("--lr", "lr", "learning rate");
  opt("--epochs", "epochs", "training epochs");
  opt("--optimizer", "optimizer", "adam|sgd");
  opt("--mode", "mode", "joint|alternating");
  opt("--squash", "squash", "apply sigmoid before the squared error (true|false)");
  opt("--standardize", "standardize", "z-score features with training-fold statistics (cv; default on for csv input)");
  opt("--folds", "folds", "cross-validation folds");
  opt("--repeats", "repeats", "cross-validation repeats");
  opt("--seed", "seed", "base seed");
  opt("--out", "out", "output directory");
  opt("--label", "label", "row label used by report");
}

dsmil::RunConfig resolve(const CommonFlags& flags) {
  dsmil::RunConfig config;
  config.threads = dsmil::threads_from_env();
  if (!flags.config.empty()) dsmil::load_run_config(config, flags.config);
  for (const auto& [key, value] : flags.overrides) dsmil::apply_setting(config, key, value);
  config.validate();
  return config;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"Dual-stream multiple-instance learning toolkit"};
  app.require_subcommand(1);
  app.set_version_flag("--version", std::string(dsmil::toolkit_version()));

  CommonFlags train_flags, cv_flags;
  auto* train = app.add_subcommand("train", "train on a full dataset and write a snapshot");
  add_common(train, train_flags);
  train->add_option_function<std::string>(
      "--test", [&](const std::string& v) { train_flags.overrides["test"] = v; }, "held-out bag file to evaluate");

  auto* cv = app.add_subcommand("cv", "repeated k-fold cross-validation");
  add_common(cv, cv_flags);

  dsmil::MnistBagsArgs mnist;
  std::string mnist_dir;
  auto* mb = app.add_subcommand("mnist-bags", "build MNIST bag files from IDX data");
  mb->add_option("--mnist-dir", mnist_dir, "directory holding the four standard IDX files");
  mb->add_option("--train-images", mnist.train_images);
  mb->add_option("--train-labels", mnist.train_labels);
  mb->add_option("--test-images", mnist.test_images);
  mb->add_option("--test-labels", mnist.test_labels);
  mb->add_option("--count", mnist.train_bags, "training bags")->capture_default_str();
  mb->add_option("--test-count", mnist.test_bags, "test bags")->capture_default_str();
  mb->add_option("--mean", mnist.mean_size, "mean bag size")->capture_default_str();
  mb->add_option("--std", mnist.std_size, "bag size deviation")->capture_default_str();
  mb->add_option("--positive-digit", mnist.positive_digit)->capture_default_str();
  mb->add_option("--seed", mnist.seed)->capture_default_str();
  mb->add_option("--positive-fraction", mnist.positive_fraction,
                 "draw each bag's label first with this probability (default: natural sampling)")
      ->check(CLI::Range(0.0, 1.0));
  mb->add_option("--out", mnist.out, "output directory")->capture_default_str();

  std::string snapshot, bags, scores_out;
  auto* si = app.add_subcommand("score-instances", "score every instance with the max-pooling stream");
  si->add_option("--model", snapshot, "model snapshot")->required();
  si->add_option("--data", bags, "bag file")->required();
  si->add_option("--out", scores_out, "output file (default stdout)");

  std::vector<std::string> report_files;
  std::string report_out, std_level = "fold";
  auto* rep = app.add_subcommand("report", "tabulate report files as mean ± std");
  rep->add_option("reports", report_files, "report files")->required();
  rep->add_option("--out", report_out, "directory for report.tsv");
  rep->add_option("--std", std_level, "fold|run")->check(CLI::IsMember({"fold", "run"}));

  try {
    app.parse(argc, argv);
  } catch (const CLI::CallForHelp& e) {
    return app.exit(e);
  } catch (const CLI::CallForVersion& e) {
    return app.exit(e);
  } catch (const CLI::ParseError& e) {
    app.exit(e);
    return 2;
  }

  try {
    if (*train) {
      const auto art = dsmil::cmd_train(resolve(train_flags), std::cerr);
      std::cout << art.snapshot.string() << '\n';
    } else if (*cv) {
      std::cout << dsmil::cmd_cv(resolve(cv_flags), std::cerr).string() << '\n';
    } else if (*mb) {
      if (!mnist_dir.empty()) {
        const std::filesystem::path d = mnist_dir;
        if (mnist.train_images.empty()) mnist.train_images = d / "train-images-idx3-ubyte";
        if (mnist.train_labels.empty()) mnist.train_labels = d / "train-labels-idx1-ubyte";
        if (mnist.test_images.empty()) mnist.test_images = d / "t10k-images-idx3-ubyte";
        if (mnist.test_labels.empty()) mnist.test_labels = d / "t10k-labels-idx1-ubyte";
      }
      if (mnist.train_images.empty() || mnist.train_labels.empty() || mnist.test_images.empty() ||
          mnist.test_labels.empty()) {
        throw dsmil::UsageError("mnist-bags needs --mnist-dir or all four IDX paths");
      }
      const auto art = dsmil::cmd_mnist_bags(mnist);
      std::cout << art.train.string() << '\n' << art.test.string() << '\n';
    } else if (*si) {
      if (scores_out.empty()) {
        dsmil::cmd_score_instances(snapshot, bags, std::cout);
      } else {
        std::ofstream out(scores_out, std::ios::binary | std::ios::trunc);
        if (!out) throw dsmil::DataError("cannot write " + scores_out);
        dsmil::cmd_score_instances(snapshot, bags, out);
      }
    } else if (*rep) {
      std::vector<std::filesystem::path> paths(report_files.begin(), report_files.end());
      const auto table = dsmil::cmd_report(paths, std_level == "run" ? dsmil::StdLevel::run : dsmil::StdLevel::fold);
      std::cout << table.plain_text();
      if (!report_out.empty()) {
        std::filesystem::create_directories(report_out);
        std::ofstream out(std::filesystem::path(report_out) / "report.tsv", std::ios::binary | std::ios::trunc);
        out << table.delimited('\t');
      }
    }
  } catch (const dsmil::Error& e) {
    std::cerr << "dsmil: " << e.what() << '\n';
    return 2;
  } catch (const std::filesystem::filesystem_error& e) {
    std::cerr << "dsmil: " << e.what() << '\n';
    return 2;
  } catch (const std::exception& e) {
    std::cerr << "dsmil: internal error: " << e.what() << '\n';
    return 1;
  }
  return 0;
}
