// Acceptance suite: one PASS/FAIL line per criterion.
//
// Exit status is 0 once every criterion has been evaluated, whatever the
// verdicts; set DSMIL_ACCEPTANCE_STRICT=1 to exit 1 when any criterion fails.
// Data locations: DSMIL_MUSK1 (csv file) and DSMIL_MNIST_DIR (IDX directory).

#include <algorithm>
#include <chrono>
#include <cmath>
#include <cstdio>
#include <cstdlib>
#include <filesystem>
#include <functional>
#include <numeric>
#include <optional>
#include <stdexcept>
#include <random>
#include <string>
#include <vector>

#include "dsmil/data.hpp"
#include "dsmil/eval.hpp"
#include "dsmil/gradcheck.hpp"
#include "dsmil/harness.hpp"
#include "dsmil/model.hpp"

namespace {

using namespace dsmil;
namespace fs = std::filesystem;

struct Verdict {
  bool pass = false;
  std::string detail;
};

int failures = 0;

void criterion(int id, const std::string& title, double limit_seconds, const std::function<Verdict()>& body) {
  const auto start = std::chrono::steady_clock::now();
  Verdict v;
  try {
    v = body();
  } catch (const std::exception& e) {
    v = {false, std::string("error: ") + e.what()};
  }
  const double secs = std::chrono::duration<double>(std::chrono::steady_clock::now() - start).count();
  const bool in_time = limit_seconds <= 0 || secs < limit_seconds;
  const bool pass = v.pass && in_time;
  if (!pass) ++failures;
  std::printf("%s [%d] %s: %s (%.1fs%s)\n", pass ? "PASS" : "FAIL", id, title.c_str(), v.detail.c_str(), secs,
              in_time ? "" : ", over time limit");
  std::fflush(stdout);
}

std::string env_or(const char* name, const char* fallback) {
  const char* v = std::getenv(name);
  return v ? v : fallback;
}

std::string fmt(double v, int decimals = 4) {
  char buf[64];
  std::snprintf(buf, sizeof buf, "%.*f", decimals, v);
  return buf;
}

std::vector<Instance> random_bag(std::size_t n, std::size_t dim, std::mt19937_64& rng) {
  std::normal_distribution<double> d(0.0, 1.0);
  std::vector<Instance> bag(n, Instance(dim));
  for (auto& x : bag)
    for (double& v : x) v = d(rng);
  return bag;
}

DsmilModel mlp_model(std::size_t input_dim, std::size_t L, std::uint64_t seed) {
  DsmilConfig cfg;
  cfg.extractor = {ExtractorKind::mlp, input_dim, 8, L};
  return DsmilModel(cfg, seed);
}

Verdict gradient_correctness() {
  std::mt19937_64 rng(1);
  GradCheckResult worst;
  int worst_bag = 0;
  const std::size_t sizes[] = {1, 3, 7};
  for (int b = 0; b < 20; ++b) {
    DsmilModel model = mlp_model(5, 4, 100 + b);
    const auto bag = random_bag(sizes[b % 3], 5, rng);
    const int label = b % 2;
    const auto params = model.parameters();
    const auto r = finite_diff_gradcheck(
        [&](Graph& g) { return mse_loss(forward_bag(g, bag, bind(g, model)).c_hat, label); }, params, 1e-5);
    if (r.max_relative_error > worst.max_relative_error) {
      worst = r;
      worst_bag = b;
    }
  }
  char where[160];
  std::snprintf(where, sizeof where, " (bag %d, parameter %zu[%zu]: analytic %.4g, numeric %.4g)", worst_bag,
                worst.worst_parameter, worst.worst_index, worst.analytic, worst.numeric);
  return {worst.max_relative_error < 1e-4, "max relative error " + fmt(worst.max_relative_error, 6) + where};
}

Verdict permutation_invariance() {
  std::mt19937_64 rng(2);
  DsmilModel model = mlp_model(6, 8, 7);
  double worst = 0.0;
  bool exact = true;
  std::uniform_int_distribution<std::size_t> size(2, 40);
  for (int b = 0; b < 200; ++b) {
    const auto bag = random_bag(size(rng), 6, rng);
    const auto base = forward_bag(bag, model);
    for (int p = 0; p < 5; ++p) {
      std::vector<std::size_t> perm(bag.size());
      std::iota(perm.begin(), perm.end(), 0);
      std::shuffle(perm.begin(), perm.end(), rng);
      std::vector<Instance> shuffled;
      for (auto i : perm) shuffled.push_back(bag[i]);
      const auto r = forward_bag(shuffled, model);
      worst = std::max(worst, std::abs(r.c_hat - base.c_hat) / std::max(1.0, std::abs(base.c_hat)));
      for (std::size_t i = 0; i < perm.size(); ++i) exact = exact && r.attention[i] == base.attention[perm[i]];
    }
  }
  return {worst <= 1e-9 && exact,
          "max relative |dc_hat| " + std::to_string(worst) + ", attention permuted exactly: " + (exact ? "yes" : "no")};
}

Verdict linear_attention() {
  std::mt19937_64 rng(3);
  DsmilModel model = mlp_model(4, 6, 8);
  std::string detail;
  bool ok = true;
  for (std::size_t n : {1u, 10u, 100u, 1000u}) {
    const auto r = forward_bag(random_bag(n, 4, rng), model);
    Graph g;
    std::size_t counter = 0;
    Tensor Q({6, n});
    std::normal_distribution<double> d;
    for (double& v : Q.data()) v = d(rng);
    auto att = max_self_attention(g.constant(Q), n / 2);
    column_dots(g.constant(Q), n / 2, &counter);
    ok = ok && r.inner_products == n && att.inner_products == n && counter == n;
    detail += (detail.empty() ? "" : ", ") + std::string("N=") + std::to_string(n) + ":" +
              std::to_string(r.inner_products);
  }
  return {ok, "inner products " + detail};
}

Verdict stream_consistency() {
  SyntheticOptions o;
  o.num_bags = 100;
  o.seed = 4;
  const Dataset ds = gen_synthetic_bags(o);
  DsmilModel model = mlp_model(o.dim, 16, 9);
  std::size_t mismatches = 0;
  for (const Bag& bag : ds.bags) {
    model.set_lambda(0.5);
    const auto r = forward_bag(bag, model);
    double best = -INFINITY;
    for (const auto& x : bag.instances) best = std::max(best, score_instance(x, model));
    if (best != r.c_m) ++mismatches;
    model.set_lambda(0.0);
    const auto r0 = forward_bag(bag, model);
    model.set_lambda(1.0);
    const auto r1 = forward_bag(bag, model);
    if (r0.c_hat != r0.c_m || r1.c_hat != r1.c_b) ++mismatches;
  }
  return {mismatches == 0, std::to_string(mismatches) + " mismatches over 100 bags"};
}

Verdict musk1(const fs::path& path) {
  if (!fs::exists(path)) return {false, "MUSK1 not found at " + path.string() + " (run scripts/fetch_data.sh)"};
  RunConfig c;
  c.data = path.string();
  c.format = "csv";
  c.folds = 10;
  c.repeats = 5;
  c.seed = 0;
  c.threads = threads_from_env();
  const Dataset ds = load_dataset(c);
  const EvalReport rep = run_cross_validation(c, ds);
  const auto agg = rep.fold_aggregates();
  const double acc = agg.at("accuracy").mean;
  return {acc >= 0.85, "mean accuracy " + fmt(acc) + " +- " + fmt(agg.at("accuracy").std) + " over " +
                           std::to_string(rep.records.size()) + " folds (auc " + fmt(agg.at("auc").mean) + ")"};
}

struct MnistPools {
  IdxArray train_images, train_labels, test_images, test_labels;
};

double mnist_auc(const MnistPools& p, std::size_t train_bags, double mean, double std, std::size_t epochs,
                 std::uint64_t seed, std::optional<double> positive_fraction = std::nullopt) {
  const Dataset train = build_mnist_bags(p.train_images, p.train_labels,
                                         {train_bags, mean, std, 9, seed, "train", positive_fraction});
  const Dataset test = build_mnist_bags(p.test_images, p.test_labels,
                                        {1000, mean, std, 9, derive_seed(seed, 1), "test", positive_fraction});
  RunConfig c;
  c.extractor = ExtractorKind::lenet;
  c.epochs = epochs;
  MilModel model = make_model(c, train.feature_dim, seed);
  train_model(train, model, c, seed);
  const auto a = evaluate_model(model, test).auc;
  if (!a) throw std::runtime_error("test bags of size " + fmt(mean, 0) + " are all one class");
  return *a;
}

Verdict mnist(const fs::path& dir) {
  if (!fs::exists(dir / "train-images-idx3-ubyte")) {
    return {false, "MNIST not found in " + dir.string() + " (run scripts/fetch_data.sh)"};
  }
  const MnistPools p{parse_idx(dir / "train-images-idx3-ubyte"), parse_idx(dir / "train-labels-idx1-ubyte"),
                     parse_idx(dir / "t10k-images-idx3-ubyte"), parse_idx(dir / "t10k-labels-idx1-ubyte")};
  std::vector<double> aucs;
  for (std::uint64_t s = 0; s < 5; ++s) aucs.push_back(mnist_auc(p, 100, 10, 2, 40, s));
  const MeanStd main = aggregate(aucs);
  // Larger settings at half the epochs. Natural sampling makes nearly every
  // bag of size 50 or 100 positive, so those draw balanced labels.
  const std::size_t smoke_epochs = 20;
  const double many = mnist_auc(p, 300, 10, 2, smoke_epochs, 0);
  const double size50 = mnist_auc(p, 100, 50, 10, smoke_epochs, 0, 0.5);
  const double size100 = mnist_auc(p, 100, 100, 20, smoke_epochs, 0, 0.5);
  const bool ok = main.mean >= 0.90 && many >= 0.90 && size50 >= 0.90 && size100 >= 0.90;
  return {ok, "100 bags x 40 epochs mean AUC " + fmt(main.mean) + " +- " + fmt(main.std) + "; smoke (" +
                  std::to_string(smoke_epochs) + " epochs): 300 bags " +
                  fmt(many) + ", size 50 " + fmt(size50) + ", size 100 " + fmt(size100)};
}

Verdict instance_classifier() {
  SyntheticOptions o;
  o.num_bags = 200;
  o.dim = 10;
  o.pos_instance_rate = 0.1;
  o.seed = 5;
  const Dataset train = gen_synthetic_bags(o);
  o.seed = 6;
  const Dataset test = gen_synthetic_bags(o);
  RunConfig c;
  const std::uint64_t seed = 0;
  MilModel model = make_model(c, o.dim, seed);
  train_model(train, model, c, seed);
  std::vector<double> scores;
  std::vector<int> labels;
  for (const Bag& b : test.bags)
    for (std::size_t i = 0; i < b.size(); ++i) {
      scores.push_back(score_instance(b.instances[i], model.dsmil()));
      labels.push_back((*b.instance_labels)[i]);
    }
  const double a = auc(scores, labels);
  return {a >= 0.80, "instance-level AUC " + fmt(a) + " on " + std::to_string(scores.size()) + " held-out instances"};
}

double brute_auc(const std::vector<double>& s, const std::vector<int>& y) {
  double num = 0.0, pairs = 0.0;
  for (std::size_t i = 0; i < s.size(); ++i)
    for (std::size_t j = 0; j < s.size(); ++j) {
      if (y[i] != 1 || y[j] != 0) continue;
      pairs += 1.0;
      num += s[i] > s[j] ? 1.0 : (s[i] == s[j] ? 0.5 : 0.0);
    }
  return num / pairs;
}

Verdict metric_oracles() {
  std::mt19937_64 rng(7);
  std::uniform_int_distribution<int> len(2, 30), coarse(0, 4);
  std::bernoulli_distribution coin(0.5);
  std::normal_distribution<double> fine;
  std::size_t auc_mismatch = 0, cases = 0;
  while (cases < 1000) {
    const int n = len(rng);
    std::vector<double> s(n);
    std::vector<int> y(n);
    const bool ties = coin(rng);
    for (int i = 0; i < n; ++i) {
      s[i] = ties ? coarse(rng) : fine(rng);
      y[i] = coin(rng);
    }
    const auto pos = std::count(y.begin(), y.end(), 1);
    if (pos == 0 || pos == n) continue;
    ++cases;
    if (auc(s, y) != brute_auc(s, y)) ++auc_mismatch;
  }

  std::size_t conf_mismatch = 0, pairs = 0;
  std::vector<int> p, y;
  for (int n = 1; n <= 12; ++n) {
    p.assign(n, 0);
    y.assign(n, 0);
    for (std::uint32_t pm = 0; pm < (1u << n); ++pm) {
      for (int i = 0; i < n; ++i) p[i] = (pm >> i) & 1;
      for (std::uint32_t lm = 0; lm < (1u << n); ++lm) {
        int tp = 0, fp = 0, tn = 0, fn = 0;
        for (int i = 0; i < n; ++i) {
          y[i] = (lm >> i) & 1;
          if (p[i] && y[i]) ++tp;
          else if (p[i]) ++fp;
          else if (y[i]) ++fn;
          else ++tn;
        }
        const auto m = confusion_metrics(p, y);
        const double prec = tp + fp ? double(tp) / (tp + fp) : 0.0;
        const double rec = tp + fn ? double(tp) / (tp + fn) : 0.0;
        const double f = prec + rec > 0 ? 2 * prec * rec / (prec + rec) : 0.0;
        if (m.accuracy != double(tp + tn) / n || m.precision != prec || m.recall != rec || m.f_score != f)
          ++conf_mismatch;
        ++pairs;
      }
    }
  }
  return {auc_mismatch == 0 && conf_mismatch == 0,
          "auc mismatches " + std::to_string(auc_mismatch) + "/1000, confusion mismatches " +
              std::to_string(conf_mismatch) + "/" + std::to_string(pairs)};
}

Verdict label_rule() {
  std::size_t checked = 0, mismatches = 0;
  for (int n = 1; n <= 8; ++n)
    for (int mask = 0; mask < (1 << n); ++mask) {
      std::vector<int> y(n);
      bool any = false;
      for (int i = 0; i < n; ++i) any = (y[i] = (mask >> i) & 1) || any;
      if (bag_label_from_instances(y) != (any ? 1 : 0)) ++mismatches;
      ++checked;
    }
  return {mismatches == 0, std::to_string(mismatches) + " mismatches over " + std::to_string(checked) + " vectors"};
}

}  // namespace

int main() {
  const fs::path musk = env_or("DSMIL_MUSK1", DSMIL_DEFAULT_MUSK1);
  const fs::path mnist_dir = env_or("DSMIL_MNIST_DIR", DSMIL_DEFAULT_MNIST_DIR);

  criterion(1, "gradient correctness", 30, gradient_correctness);
  criterion(2, "permutation invariance", 10, permutation_invariance);
  criterion(3, "O(n) attention", 0, linear_attention);
  criterion(4, "stream consistency", 0, stream_consistency);
  criterion(5, "MUSK1 5x10-fold accuracy >= 0.85", 600, [&] { return musk1(musk); });
  criterion(6, "MNIST-bags mean AUC >= 0.90", 1800, [&] { return mnist(mnist_dir); });
  criterion(7, "instance classifier AUC >= 0.80", 120, instance_classifier);
  criterion(8, "metric oracles", 0, metric_oracles);
  criterion(9, "bag label rule equals OR", 0, label_rule);
  std::printf("NOTE [10] histopathology results are out of scope at desk scale; no criterion\n");
  std::printf("%d of 9 criteria failed\n", failures);

  const char* strict = std::getenv("DSMIL_ACCEPTANCE_STRICT");
  return strict && std::string(strict) == "1" && failures > 0 ? 1 : 0;
}
