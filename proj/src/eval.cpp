#include "dsmil/eval.hpp"

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <fstream>
#include <numeric>
#include <random>
#include <sstream>

#include <nlohmann/json.hpp>

#include "dsmil/errors.hpp"

namespace dsmil {

using nlohmann::json;

double auc(std::span<const double> scores, std::span<const int> labels) {
  if (scores.size() != labels.size()) throw UsageError("auc: scores and labels differ in length");
  std::vector<std::size_t> order(scores.size());
  std::iota(order.begin(), order.end(), std::size_t{0});
  std::sort(order.begin(), order.end(), [&](std::size_t a, std::size_t b) { return scores[a] < scores[b]; });

  std::uint64_t positives = 0, negatives = 0, concordant = 0, tied = 0;
  std::uint64_t negatives_below = 0;
  for (std::size_t start = 0; start < order.size();) {
    std::size_t end = start;
    std::uint64_t pos = 0, neg = 0;
    while (end < order.size() && scores[order[end]] == scores[order[start]]) {
      const int y = labels[order[end]];
      if (y == 1) ++pos;
      else if (y == 0) ++neg;
      else throw DomainError("auc: labels must be 0 or 1");
      ++end;
    }
    concordant += pos * negatives_below;
    tied += pos * neg;
    negatives_below += neg;
    positives += pos;
    negatives += neg;
    start = end;
  }
  if (positives == 0 || negatives == 0) throw DomainError("auc: needs at least one positive and one negative label");
  return (static_cast<double>(concordant) + 0.5 * static_cast<double>(tied)) /
         (static_cast<double>(positives) * static_cast<double>(negatives));
}

ConfusionMetrics confusion_metrics(std::span<const int> predictions, std::span<const int> labels) {
  if (predictions.size() != labels.size()) {
    throw UsageError("confusion_metrics: " + std::to_string(predictions.size()) + " predictions for " +
                     std::to_string(labels.size()) + " labels");
  }
  if (labels.empty()) throw UsageError("confusion_metrics: empty input");
  std::size_t tp = 0, fp = 0, tn = 0, fn = 0;
  for (std::size_t i = 0; i < labels.size(); ++i) {
    const bool p = predictions[i] == 1, y = labels[i] == 1;
    if (p && y) ++tp;
    else if (p) ++fp;
    else if (y) ++fn;
    else ++tn;
  }
  ConfusionMetrics m;
  m.accuracy = static_cast<double>(tp + tn) / static_cast<double>(labels.size());
  m.precision = tp + fp == 0 ? 0.0 : static_cast<double>(tp) / static_cast<double>(tp + fp);
  m.recall = tp + fn == 0 ? 0.0 : static_cast<double>(tp) / static_cast<double>(tp + fn);
  m.f_score = m.precision + m.recall == 0.0 ? 0.0 : 2.0 * m.precision * m.recall / (m.precision + m.recall);
  return m;
}

std::vector<std::size_t> FoldPlan::test_indices(std::size_t fold) const {
  std::vector<std::size_t> out;
  for (std::size_t i = 0; i < assignments.size(); ++i)
    if (assignments[i] == fold) out.push_back(i);
  return out;
}

std::vector<std::size_t> FoldPlan::train_indices(std::size_t fold) const {
  std::vector<std::size_t> out;
  for (std::size_t i = 0; i < assignments.size(); ++i)
    if (assignments[i] != fold) out.push_back(i);
  return out;
}

std::size_t FoldPlan::fold_size(std::size_t fold) const {
  return static_cast<std::size_t>(std::count(assignments.begin(), assignments.end(), fold));
}

FoldPlan kfold_split(std::size_t num_bags, std::size_t k, std::uint64_t seed) {
  if (k == 0) throw DomainError("kfold_split: k must be positive");
  if (k > num_bags) {
    throw DomainError("kfold_split: " + std::to_string(k) + " folds for " + std::to_string(num_bags) + " bags");
  }
  std::vector<std::size_t> order(num_bags);
  std::iota(order.begin(), order.end(), std::size_t{0});
  std::mt19937_64 rng(seed);
  std::shuffle(order.begin(), order.end(), rng);

  FoldPlan plan{k, seed, std::vector<std::size_t>(num_bags)};
  const std::size_t base = num_bags / k, extra = num_bags % k;
  std::size_t pos = 0;
  for (std::size_t f = 0; f < k; ++f) {
    const std::size_t n = base + (f < extra ? 1 : 0);
    for (std::size_t j = 0; j < n; ++j) plan.assignments[order[pos++]] = f;
  }
  return plan;
}

MeanStd aggregate(std::span<const double> values) {
  if (values.empty()) throw DomainError("aggregate: no values");
  // Welford's update.
  double mean = 0.0, m2 = 0.0;
  std::size_t n = 0;
  for (double v : values) {
    ++n;
    const double delta = v - mean;
    mean += delta / static_cast<double>(n);
    m2 += delta * (v - mean);
  }
  const double var = n > 1 ? m2 / static_cast<double>(n - 1) : 0.0;
  return {mean, std::sqrt(std::max(var, 0.0)), n};
}

std::optional<double> FoldRecord::metric(const std::string& name) const {
  if (name == "accuracy") return accuracy;
  if (name == "auc") return auc;
  if (name == "precision") return precision;
  if (name == "recall") return recall;
  if (name == "f_score") return f_score;
  throw UsageError("unknown metric '" + name + "'");
}

FoldRecord evaluate_logits(std::span<const double> logits, std::span<const int> labels, std::size_t run,
                           std::size_t fold) {
  std::vector<int> predictions(logits.size());
  for (std::size_t i = 0; i < logits.size(); ++i) predictions[i] = logits[i] >= 0.0 ? 1 : 0;
  const ConfusionMetrics m = confusion_metrics(predictions, labels);
  FoldRecord r{run, fold, labels.size(), m.accuracy, std::nullopt, m.precision, m.recall, m.f_score};
  const bool has_pos = std::find(labels.begin(), labels.end(), 1) != labels.end();
  const bool has_neg = std::find(labels.begin(), labels.end(), 0) != labels.end();
  if (has_pos && has_neg) r.auc = auc(logits, labels);
  return r;
}

namespace {

std::map<std::string, MeanStd> aggregate_records(const std::vector<FoldRecord>& records) {
  std::map<std::string, MeanStd> out;
  for (const auto& name : metric_names()) {
    std::vector<double> values;
    for (const auto& r : records)
      if (auto v = r.metric(name)) values.push_back(*v);
    if (!values.empty()) out[name] = aggregate(values);
  }
  return out;
}

json aggregates_to_json(const std::map<std::string, MeanStd>& agg) {
  json j = json::object();
  for (const auto& [name, ms] : agg) j[name] = {{"mean", ms.mean}, {"std", ms.std}, {"count", ms.count}};
  return j;
}

}  // namespace

std::map<std::string, MeanStd> EvalReport::fold_aggregates() const { return aggregate_records(records); }

std::map<std::string, MeanStd> EvalReport::run_aggregates() const {
  std::map<std::size_t, std::vector<FoldRecord>> by_run;
  for (const auto& r : records) by_run[r.run].push_back(r);
  std::map<std::string, std::vector<double>> run_means;
  for (const auto& [run, recs] : by_run) {
    for (const auto& [name, ms] : aggregate_records(recs)) run_means[name].push_back(ms.mean);
  }
  std::map<std::string, MeanStd> out;
  for (const auto& [name, means] : run_means) out[name] = aggregate(means);
  return out;
}

std::string serialize_report(const EvalReport& report) {
  std::ostringstream out;
  json header = {{"kind", "config"}, {"config", report.config}};
  out << header.dump() << '\n';
  for (const auto& r : report.records) {
    json j = {{"kind", "fold"},           {"run", r.run},         {"fold", r.fold},
              {"num_bags", r.num_bags},   {"accuracy", r.accuracy}, {"precision", r.precision},
              {"recall", r.recall},       {"f_score", r.f_score}};
    j["auc"] = r.auc ? json(*r.auc) : json(nullptr);
    out << j.dump() << '\n';
  }
  json agg = {{"kind", "aggregates"},
              {"fold_level", aggregates_to_json(report.fold_aggregates())},
              {"run_level", aggregates_to_json(report.run_aggregates())}};
  out << agg.dump() << '\n';
  return out.str();
}

EvalReport parse_report(const std::string& text) {
  EvalReport report;
  std::istringstream in(text);
  std::string line;
  std::size_t line_number = 0;
  bool seen_config = false;
  while (std::getline(in, line)) {
    ++line_number;
    if (line.empty()) continue;
    const auto fail = [&](const std::string& what) {
      return FormatError("report line " + std::to_string(line_number) + ": " + what);
    };
    try {
      const json j = json::parse(line);
      const std::string kind = j.at("kind").get<std::string>();
      if (kind == "config") {
        report.config = j.at("config").get<std::map<std::string, std::string>>();
        seen_config = true;
      } else if (kind == "fold") {
        FoldRecord r;
        r.run = j.at("run").get<std::size_t>();
        r.fold = j.at("fold").get<std::size_t>();
        r.num_bags = j.at("num_bags").get<std::size_t>();
        r.accuracy = j.at("accuracy").get<double>();
        r.precision = j.at("precision").get<double>();
        r.recall = j.at("recall").get<double>();
        r.f_score = j.at("f_score").get<double>();
        if (!j.at("auc").is_null()) r.auc = j.at("auc").get<double>();
        for (const auto& name : metric_names()) {
          if (auto v = r.metric(name); v && !(*v >= 0.0 && *v <= 1.0)) throw fail(name + " outside [0,1]");
        }
        report.records.push_back(r);
      } else if (kind != "aggregates") {
        throw fail("unknown record kind '" + kind + "'");
      }
    } catch (const json::exception& e) {
      throw fail(e.what());
    }
  }
  if (!seen_config) throw FormatError("report: missing config line");
  return report;
}

void write_report(const EvalReport& report, const std::filesystem::path& path) {
  std::ofstream out(path, std::ios::binary | std::ios::trunc);
  if (!out) throw DataError("cannot write " + path.string());
  out << serialize_report(report);
}

EvalReport read_report(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw FormatError("cannot open report " + path.string());
  std::stringstream buf;
  buf << in.rdbuf();
  return parse_report(buf.str());
}

std::string format_fixed_half_even(double value, int decimals) {
  if (!std::isfinite(value)) return std::isnan(value) ? "nan" : (value > 0 ? "inf" : "-inf");
  const bool negative = std::signbit(value);
  // glibc prints the exact decimal expansion of the binary value.
  std::vector<char> buf(1200);
  std::snprintf(buf.data(), buf.size(), "%.1100f", std::abs(value));
  std::string s(buf.data());
  const auto dot = s.find('.');
  std::string digits = s.substr(0, dot) + s.substr(dot + 1, static_cast<std::size_t>(decimals));
  const std::string rest = s.substr(dot + 1 + static_cast<std::size_t>(decimals));
  bool round_up = false;
  if (!rest.empty() && rest[0] > '5') {
    round_up = true;
  } else if (!rest.empty() && rest[0] == '5') {
    const bool exact_tie = rest.find_first_not_of('0', 1) == std::string::npos;
    round_up = !exact_tie || ((digits.back() - '0') % 2 == 1);
  }
  if (round_up) {
    std::size_t i = digits.size();
    while (i > 0) {
      --i;
      if (digits[i] == '9') {
        digits[i] = '0';
      } else {
        ++digits[i];
        break;
      }
      if (i == 0) digits.insert(digits.begin(), '1');
    }
  }
  const std::size_t int_len = digits.size() - static_cast<std::size_t>(decimals);
  std::string out = digits.substr(0, int_len);
  if (decimals > 0) out += "." + digits.substr(int_len);
  const bool all_zero = out.find_first_not_of("0.") == std::string::npos;
  return (negative && !all_zero ? "-" : "") + out;
}

}  // namespace dsmil
