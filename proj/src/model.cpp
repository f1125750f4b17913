#include "dsmil/model.hpp"

#include <algorithm>
#include <cmath>
#include <numeric>

#include "dsmil/errors.hpp"

namespace dsmil {

namespace {

constexpr std::size_t kConv1Filters = 6;
constexpr std::size_t kConv2Filters = 16;
constexpr std::size_t kKernel = 5;
// 28 -conv5-> 24 -pool2-> 12 -conv5-> 8 -pool2-> 4
constexpr std::size_t kLenetFlat = kConv2Filters * 4 * 4;

Parameter make_uniform(std::string name, Shape shape, std::size_t fan_in, std::mt19937_64& rng) {
  const double bound = 1.0 / std::sqrt(static_cast<double>(fan_in));
  std::uniform_real_distribution<double> dist(-bound, bound);
  Tensor t(std::move(shape));
  for (double& v : t.data()) v = dist(rng);
  return Parameter(std::move(name), std::move(t));
}

std::vector<Var> bind_all(Graph& g, std::vector<Parameter>& params, bool trainable) {
  std::vector<Var> out;
  out.reserve(params.size());
  for (auto& p : params) out.push_back(trainable ? g.param(p) : g.constant(p.value));
  return out;
}

Var bind_one(Graph& g, Parameter& p, bool trainable) { return trainable ? g.param(p) : g.constant(p.value); }

}  // namespace

std::string_view to_string(ExtractorKind kind) {
  switch (kind) {
    case ExtractorKind::identity: return "identity";
    case ExtractorKind::mlp: return "mlp";
    case ExtractorKind::lenet: return "lenet";
  }
  return "?";
}

ExtractorKind parse_extractor_kind(std::string_view name) {
  if (name == "identity") return ExtractorKind::identity;
  if (name == "mlp") return ExtractorKind::mlp;
  if (name == "lenet") return ExtractorKind::lenet;
  throw DomainError("unknown extractor '" + std::string(name) + "' (identity|mlp|lenet)");
}

Extractor::Extractor(ExtractorConfig config, std::mt19937_64& rng) : config_(config) {
  if (config_.input_dim == 0) throw DimensionError("extractor input dimension must be positive");
  switch (config_.kind) {
    case ExtractorKind::identity:
      config_.output_dim = config_.input_dim;
      break;
    case ExtractorKind::mlp: {
      const std::size_t in = config_.input_dim, h = config_.hidden_dim, L = config_.output_dim;
      if (h == 0 || L == 0) throw DimensionError("mlp extractor needs positive hidden and output sizes");
      params_.push_back(make_uniform("extractor.fc1.weight", {h, in}, in, rng));
      params_.push_back(make_uniform("extractor.fc1.bias", {h}, in, rng));
      params_.push_back(make_uniform("extractor.fc2.weight", {L, h}, h, rng));
      params_.push_back(make_uniform("extractor.fc2.bias", {L}, h, rng));
      break;
    }
    case ExtractorKind::lenet: {
      if (config_.input_dim != kLenetImageSide * kLenetImageSide) {
        throw DimensionError("lenet extractor needs 28x28 = 784 inputs, got " + std::to_string(config_.input_dim));
      }
      const std::size_t h = config_.hidden_dim, L = config_.output_dim;
      if (h == 0 || L == 0) throw DimensionError("lenet extractor needs positive hidden and output sizes");
      const std::size_t fan1 = 1 * kKernel * kKernel, fan2 = kConv1Filters * kKernel * kKernel;
      params_.push_back(make_uniform("extractor.conv1.weight", {kConv1Filters, 1, kKernel, kKernel}, fan1, rng));
      params_.push_back(make_uniform("extractor.conv1.bias", {kConv1Filters}, fan1, rng));
      params_.push_back(make_uniform("extractor.conv2.weight", {kConv2Filters, kConv1Filters, kKernel, kKernel}, fan2, rng));
      params_.push_back(make_uniform("extractor.conv2.bias", {kConv2Filters}, fan2, rng));
      params_.push_back(make_uniform("extractor.fc1.weight", {h, kLenetFlat}, kLenetFlat, rng));
      params_.push_back(make_uniform("extractor.fc1.bias", {h}, kLenetFlat, rng));
      params_.push_back(make_uniform("extractor.fc2.weight", {L, h}, h, rng));
      params_.push_back(make_uniform("extractor.fc2.bias", {L}, h, rng));
      break;
    }
  }
}

BoundExtractor bind(Graph& g, Extractor& extractor, bool trainable) {
  return {&extractor.config(), bind_all(g, extractor.parameters(), trainable)};
}

BoundExtractor bind(Graph& g, const Extractor& extractor) {
  BoundExtractor out{&extractor.config(), {}};
  for (const auto& p : extractor.parameters()) out.params.push_back(g.constant(p.value));
  return out;
}

Var embed_instance(Graph& g, std::span<const double> instance, const BoundExtractor& extractor) {
  const ExtractorConfig& cfg = *extractor.config;
  if (instance.size() != cfg.input_dim) {
    throw DimensionError("instance has dimension " + std::to_string(instance.size()) + ", extractor expects " +
                         std::to_string(cfg.input_dim));
  }
  const auto& p = extractor.params;
  switch (cfg.kind) {
    case ExtractorKind::identity:
      return g.constant(Tensor::vector({instance.begin(), instance.end()}));
    case ExtractorKind::mlp: {
      Var x = g.constant(Tensor::vector({instance.begin(), instance.end()}));
      Var h = relu(linear(x, p[0], p[1]));
      return linear(h, p[2], p[3]);
    }
    case ExtractorKind::lenet: {
      Var x = g.constant(Tensor({1, kLenetImageSide, kLenetImageSide}, {instance.begin(), instance.end()}));
      Var c1 = maxpool2d(relu(conv2d(x, p[0], p[1])), 2, 2);
      Var c2 = maxpool2d(relu(conv2d(c1, p[2], p[3])), 2, 2);
      Var f = reshape(c2, {kLenetFlat});
      Var h = relu(linear(f, p[4], p[5]));
      return relu(linear(h, p[6], p[7]));
    }
  }
  throw UsageError("unreachable extractor kind");
}

Var extract(Graph& g, std::span<const Instance> instances, const BoundExtractor& extractor) {
  if (instances.empty()) throw DomainError("extract: empty bag");
  const ExtractorConfig& cfg = *extractor.config;
  if (cfg.kind == ExtractorKind::identity) {
    const std::size_t L = cfg.input_dim, N = instances.size();
    Tensor H({L, N});
    for (std::size_t i = 0; i < N; ++i) {
      if (instances[i].size() != L) {
        throw DimensionError("instance " + std::to_string(i) + " has dimension " + std::to_string(instances[i].size()) +
                             ", extractor expects " + std::to_string(L));
      }
      for (std::size_t l = 0; l < L; ++l) H(l, i) = instances[i][l];
    }
    return g.constant(std::move(H));
  }
  std::vector<Var> columns;
  columns.reserve(instances.size());
  for (const Instance& x : instances) columns.push_back(embed_instance(g, x, extractor));
  return stack_columns(columns);
}

Tensor extract(std::span<const Instance> instances, const Extractor& extractor) {
  Graph g;
  return extract(g, instances, bind(g, extractor)).value();
}

// ---------------------------------------------------------------------------
// DSMIL
// ---------------------------------------------------------------------------

DsmilModel::DsmilModel(const DsmilConfig& config, std::uint64_t seed) {
  set_lambda(config.lambda);
  std::mt19937_64 rng(seed);
  extractor_ = Extractor(config.extractor, rng);
  const std::size_t L = extractor_.output_dim();
  w0_ = make_uniform("W0", {1, L}, L, rng);
  wq_ = make_uniform("Wq", {L, L}, L, rng);
  wv_ = make_uniform("Wv", {L, L}, L, rng);
  w1_ = make_uniform("W1", {1, L}, L, rng);
}

void DsmilModel::set_lambda(double lambda) {
  if (!(lambda >= 0.0 && lambda <= 1.0)) throw DomainError("lambda must lie in [0,1], got " + std::to_string(lambda));
  lambda_ = lambda;
}

std::vector<Parameter*> DsmilModel::parameters() {
  auto out = instance_stream_parameters();
  for (auto* p : bag_stream_parameters()) out.push_back(p);
  return out;
}

std::vector<const Parameter*> DsmilModel::parameters() const {
  std::vector<const Parameter*> out;
  for (const auto& p : extractor_.parameters()) out.push_back(&p);
  out.insert(out.end(), {&w0_, &wq_, &wv_, &w1_});
  return out;
}

std::vector<Parameter*> DsmilModel::instance_stream_parameters() {
  std::vector<Parameter*> out;
  for (auto& p : extractor_.parameters()) out.push_back(&p);
  out.push_back(&w0_);
  return out;
}

std::vector<Parameter*> DsmilModel::bag_stream_parameters() { return {&wq_, &wv_, &w1_}; }

BoundDsmil bind(Graph& g, DsmilModel& model, StreamMask mask) {
  BoundDsmil b;
  b.extractor = bind(g, model.extractor(), mask.extractor);
  b.w0 = bind_one(g, model.w0(), mask.w0);
  b.wq = bind_one(g, model.wq(), mask.bag_stream);
  b.wv = bind_one(g, model.wv(), mask.bag_stream);
  b.w1 = bind_one(g, model.w1(), mask.bag_stream);
  b.lambda = model.lambda();
  return b;
}

BoundDsmil bind(Graph& g, const DsmilModel& model) {
  BoundDsmil b;
  b.extractor = bind(g, model.extractor());
  b.w0 = g.constant(model.w0().value);
  b.wq = g.constant(model.wq().value);
  b.wv = g.constant(model.wv().value);
  b.w1 = g.constant(model.w1().value);
  b.lambda = model.lambda();
  return b;
}

Var instance_scores(const Var& H, const Var& w0) {
  const Shape& ws = w0.shape();
  if (ws.size() != 2 || ws[0] != 1 || H.shape().size() != 2 || ws[1] != H.shape()[0]) {
    throw DimensionError("instance_scores: classifier " + w0.value().shape_string() + " incompatible with embeddings " +
                         H.value().shape_string());
  }
  return reshape(matmul(w0, H), {H.shape()[1]});
}

MaxResult max_pool_stream(const Var& scores) {
  if (scores.size() == 0) throw DomainError("max_pool_stream: empty bag");
  return reduce_max_with_index(scores);
}

QueryValue project_qv(const Var& H, const Var& wq, const Var& wv) { return {matmul(wq, H), matmul(wv, H)}; }

AttentionResult max_self_attention(const Var& queries, std::size_t m_index) {
  AttentionResult r;
  r.logits = column_dots(queries, m_index, &r.inner_products);
  r.weights = softmax(r.logits);
  return r;
}

Var bag_embedding(const Var& values, const Var& attention) { return weighted_sum(values, attention); }

Var bag_score(const Var& embedding, const Var& w1) { return linear(embedding, w1); }

Var dual_combine(const Var& c_m, const Var& c_b, double lambda) {
  if (!(lambda >= 0.0 && lambda <= 1.0)) throw DomainError("dual_combine: lambda must lie in [0,1]");
  return weighted_add(c_m, 1.0 - lambda, c_b, lambda);
}

BagForward forward_bag(Graph& g, std::span<const Instance> instances, const BoundDsmil& model) {
  if (instances.empty()) throw DomainError("forward_bag: empty bag");
  BagForward out;
  out.embeddings = extract(g, instances, model.extractor);
  out.instance_scores = instance_scores(out.embeddings, model.w0);
  const MaxResult top = max_pool_stream(out.instance_scores);
  out.c_m = top.value;
  out.m_index = top.index;
  const QueryValue qv = project_qv(out.embeddings, model.wq, model.wv);
  AttentionResult attn = max_self_attention(qv.queries, top.index);
  out.attention = attn.weights;
  out.attention_logits = attn.logits;
  out.inner_products = attn.inner_products;
  out.bag_embedding = bag_embedding(qv.values, attn.weights);
  out.c_b = bag_score(out.bag_embedding, model.w1);
  out.c_hat = dual_combine(out.c_m, out.c_b, model.lambda);
  return out;
}

BagForwardResult forward_bag(std::span<const Instance> instances, const DsmilModel& model) {
  Graph g;
  const BagForward f = forward_bag(g, instances, bind(g, model));
  return BagForwardResult{f.c_m.item(),
                          f.c_b.item(),
                          f.c_hat.item(),
                          f.attention.value(),
                          f.m_index,
                          f.instance_scores.value(),
                          f.bag_embedding.value(),
                          f.inner_products};
}

BagForwardResult forward_bag(const Bag& bag, const DsmilModel& model) { return forward_bag(bag.instances, model); }

Var mse_loss(const Var& score, int label, bool squash) {
  if (label != 0 && label != 1) throw DomainError("mse_loss: label must be 0 or 1, got " + std::to_string(label));
  const Var p = squash ? sigmoid(score) : score;
  return square(add_scalar(p, -static_cast<double>(label)));
}

double score_instance(std::span<const double> instance, const DsmilModel& model) {
  Graph g;
  const BoundDsmil b = bind(g, model);
  const Instance x(instance.begin(), instance.end());
  const Var H = extract(g, std::span<const Instance>(&x, 1), b.extractor);
  return instance_scores(H, b.w0).value()[0];
}

// ---------------------------------------------------------------------------
// Baselines
// ---------------------------------------------------------------------------

std::string_view to_string(BaselineKind kind) {
  switch (kind) {
    case BaselineKind::instance_max: return "instance_max";
    case BaselineKind::instance_mean: return "instance_mean";
    case BaselineKind::embed_max: return "embed_max";
    case BaselineKind::embed_mean: return "embed_mean";
    case BaselineKind::abmilp: return "abmilp";
    case BaselineKind::abmilp_gated: return "abmilp_gated";
  }
  return "?";
}

BaselineKind parse_baseline_kind(std::string_view name) {
  for (auto k : {BaselineKind::instance_max, BaselineKind::instance_mean, BaselineKind::embed_max,
                 BaselineKind::embed_mean, BaselineKind::abmilp, BaselineKind::abmilp_gated}) {
    if (to_string(k) == name) return k;
  }
  throw DomainError("unknown baseline '" + std::string(name) + "'");
}

BaselineModel::BaselineModel(const BaselineConfig& config, std::uint64_t seed)
    : kind_(config.kind), attention_dim_(config.attention_dim) {
  std::mt19937_64 rng(seed);
  extractor_ = Extractor(config.extractor, rng);
  const std::size_t L = extractor_.output_dim(), D = attention_dim_;
  classifier_ = make_uniform("classifier", {1, L}, L, rng);
  if (kind_ == BaselineKind::abmilp || kind_ == BaselineKind::abmilp_gated) {
    if (D == 0) throw DimensionError("attention dimension must be positive");
    attn_v_ = make_uniform("attention.V", {D, L}, L, rng);
    attn_w_ = make_uniform("attention.w", {1, D}, D, rng);
    if (kind_ == BaselineKind::abmilp_gated) attn_u_ = make_uniform("attention.U", {D, L}, L, rng);
  }
}

std::vector<Parameter*> BaselineModel::parameters() {
  std::vector<Parameter*> out;
  for (auto& p : extractor_.parameters()) out.push_back(&p);
  out.push_back(&classifier_);
  if (kind_ == BaselineKind::abmilp || kind_ == BaselineKind::abmilp_gated) {
    out.push_back(&attn_v_);
    out.push_back(&attn_w_);
    if (kind_ == BaselineKind::abmilp_gated) out.push_back(&attn_u_);
  }
  return out;
}

std::vector<const Parameter*> BaselineModel::parameters() const {
  auto ptrs = const_cast<BaselineModel*>(this)->parameters();
  return {ptrs.begin(), ptrs.end()};
}

BaselineForward baseline_forward(Graph& g, std::span<const Instance> instances, BaselineModel& model, bool trainable) {
  if (instances.empty()) throw DomainError("baseline_forward: empty bag");
  const BoundExtractor ext = bind(g, model.extractor(), trainable);
  const Var H = extract(g, instances, ext);
  const Var cls = bind_one(g, model.classifier(), trainable);
  const std::size_t N = instances.size();
  switch (model.kind()) {
    case BaselineKind::instance_max:
      return {reduce_max_with_index(reshape(matmul(cls, H), {N})).value, std::nullopt};
    case BaselineKind::instance_mean:
      return {mean(reshape(matmul(cls, H), {N})), std::nullopt};
    case BaselineKind::embed_max:
      return {linear(row_max(H), cls), std::nullopt};
    case BaselineKind::embed_mean:
      return {linear(row_mean(H), cls), std::nullopt};
    case BaselineKind::abmilp:
    case BaselineKind::abmilp_gated: {
      const Var V = bind_one(g, model.attention_v(), trainable);
      const Var w = bind_one(g, model.attention_w(), trainable);
      Var hidden = tanh(matmul(V, H));
      if (model.kind() == BaselineKind::abmilp_gated) {
        const Var U = bind_one(g, model.attention_u(), trainable);
        hidden = mul(hidden, sigmoid(matmul(U, H)));
      }
      const Var a = softmax(reshape(matmul(w, hidden), {N}));
      return {linear(weighted_sum(H, a), cls), a};
    }
  }
  throw UsageError("unreachable baseline kind");
}

double baseline_forward(std::span<const Instance> instances, const BaselineModel& model) {
  Graph g;
  // Frozen binding copies the values; the model itself is not modified.
  return baseline_forward(g, instances, const_cast<BaselineModel&>(model), false).logit.item();
}

// ---------------------------------------------------------------------------
// Training
// ---------------------------------------------------------------------------

std::string_view to_string(TrainMode mode) { return mode == TrainMode::joint ? "joint" : "alternating"; }

TrainMode parse_train_mode(std::string_view name) {
  if (name == "joint") return TrainMode::joint;
  if (name == "alternating") return TrainMode::alternating;
  throw DomainError("unknown training mode '" + std::string(name) + "' (joint|alternating)");
}

std::string MilModel::kind_name() const {
  return is_dsmil() ? std::string("dsmil") : std::string(to_string(baseline().kind()));
}

const Extractor& MilModel::extractor() const { return is_dsmil() ? dsmil().extractor() : baseline().extractor(); }

std::vector<Parameter*> MilModel::parameters() { return is_dsmil() ? dsmil().parameters() : baseline().parameters(); }

std::vector<const Parameter*> MilModel::parameters() const {
  return is_dsmil() ? dsmil().parameters() : baseline().parameters();
}

double MilModel::predict(std::span<const Instance> instances) const {
  return is_dsmil() ? forward_bag(instances, dsmil()).c_hat : baseline_forward(instances, baseline());
}

EpochResult train_epoch(const Dataset& dataset, MilModel& model, Optimizer& optimizer, const TrainOptions& options,
                        std::size_t epoch_index, std::mt19937_64& rng) {
  if (dataset.empty()) throw DomainError("train_epoch: empty dataset");
  if (options.mode == TrainMode::alternating && !model.is_dsmil()) {
    throw UsageError("alternating training applies to the dual-stream model only");
  }
  std::vector<std::size_t> order(dataset.size());
  std::iota(order.begin(), order.end(), std::size_t{0});
  std::shuffle(order.begin(), order.end(), rng);

  EpochResult result;
  result.phase = options.mode == TrainMode::alternating ? static_cast<int>(epoch_index % 2) : 0;

  std::vector<Parameter*> all = model.parameters();
  std::vector<Parameter*> group;
  if (options.mode == TrainMode::joint) {
    group = all;
  } else if (result.phase == 0) {
    group = model.dsmil().instance_stream_parameters();
  } else {
    group = model.dsmil().bag_stream_parameters();
  }

  double total = 0.0;
  for (std::size_t idx : order) {
    const Bag& bag = dataset.bags[idx];
    zero_grads(all);
    Graph g;
    Var loss;
    if (!model.is_dsmil()) {
      loss = mse_loss(baseline_forward(g, bag.instances, model.baseline(), true).logit, bag.label, options.squash);
    } else if (options.mode == TrainMode::joint) {
      const BoundDsmil b = bind(g, model.dsmil());
      loss = mse_loss(forward_bag(g, bag.instances, b).c_hat, bag.label, options.squash);
    } else if (result.phase == 0) {
      const BoundDsmil b = bind(g, model.dsmil(), StreamMask{true, true, false});
      const Var H = extract(g, bag.instances, b.extractor);
      loss = mse_loss(max_pool_stream(instance_scores(H, b.w0)).value, bag.label, options.squash);
    } else {
      const BoundDsmil b = bind(g, model.dsmil(), StreamMask{false, false, true});
      loss = mse_loss(forward_bag(g, bag.instances, b).c_b, bag.label, options.squash);
    }
    total += loss.item();
    g.backward(loss);
    optimizer.step(group);
    ++result.steps;
  }
  result.mean_loss = total / static_cast<double>(result.steps);
  return result;
}

}  // namespace dsmil
