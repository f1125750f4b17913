#pragma once

#include <cstdint>
#include <optional>
#include <random>
#include <span>
#include <string>
#include <string_view>
#include <vector>

#include "dsmil/autograd.hpp"
#include "dsmil/data.hpp"
#include "dsmil/optim.hpp"

namespace dsmil {

// ---------------------------------------------------------------------------
// Instance feature extractors
// ---------------------------------------------------------------------------

enum class ExtractorKind { identity, mlp, lenet };

std::string_view to_string(ExtractorKind kind);
ExtractorKind parse_extractor_kind(std::string_view name);

struct ExtractorConfig {
  ExtractorKind kind = ExtractorKind::mlp;
  std::size_t input_dim = 0;
  /// mlp: input -> hidden (ReLU) -> output.
  /// lenet: conv5(6) pool conv5(16) pool -> hidden (ReLU) -> output (ReLU).
  std::size_t hidden_dim = 128;
  /// Embedding length L. Forced to input_dim for the identity extractor.
  std::size_t output_dim = 64;
};

/// Side length of the square images accepted by the lenet extractor.
inline constexpr std::size_t kLenetImageSide = 28;

class Extractor {
 public:
  Extractor() = default;
  /// Builds the layer parameters, initialised uniformly in
  /// [-1/sqrt(fan_in), 1/sqrt(fan_in)] from `rng`.
  Extractor(ExtractorConfig config, std::mt19937_64& rng);

  const ExtractorConfig& config() const { return config_; }
  std::size_t input_dim() const { return config_.input_dim; }
  std::size_t output_dim() const { return config_.output_dim; }

  std::vector<Parameter>& parameters() { return params_; }
  const std::vector<Parameter>& parameters() const { return params_; }

 private:
  ExtractorConfig config_;
  std::vector<Parameter> params_;
};

/// Extractor parameters recorded on a graph.
struct BoundExtractor {
  const ExtractorConfig* config = nullptr;
  std::vector<Var> params;
};

BoundExtractor bind(Graph& g, Extractor& extractor, bool trainable);
BoundExtractor bind(Graph& g, const Extractor& extractor);

/// Embedding of one raw instance, a vector of length L.
Var embed_instance(Graph& g, std::span<const double> instance, const BoundExtractor& extractor);

/// H = [h_0 ... h_{N-1}], shape [L x N]. Throws DomainError on an empty bag
/// and DimensionError when an instance does not match the extractor input.
Var extract(Graph& g, std::span<const Instance> instances, const BoundExtractor& extractor);

/// Value-only extraction.
Tensor extract(std::span<const Instance> instances, const Extractor& extractor);

// ---------------------------------------------------------------------------
// Dual-stream aggregator
// ---------------------------------------------------------------------------

struct DsmilConfig {
  ExtractorConfig extractor;
  double lambda = 0.5;
};

/// Learnable state of the dual-stream model: the extractor, the instance
/// classifier W0 [1 x L], the query and value projections Wq, Wv [L x L] and
/// the bag classifier W1 [1 x L]. lambda is fixed.
class DsmilModel {
 public:
  DsmilModel() = default;
  DsmilModel(const DsmilConfig& config, std::uint64_t seed);

  double lambda() const { return lambda_; }
  /// Throws DomainError outside [0,1].
  void set_lambda(double lambda);

  std::size_t embedding_dim() const { return extractor_.output_dim(); }

  Extractor& extractor() { return extractor_; }
  const Extractor& extractor() const { return extractor_; }
  Parameter& w0() { return w0_; }
  Parameter& wq() { return wq_; }
  Parameter& wv() { return wv_; }
  Parameter& w1() { return w1_; }
  const Parameter& w0() const { return w0_; }
  const Parameter& wq() const { return wq_; }
  const Parameter& wv() const { return wv_; }
  const Parameter& w1() const { return w1_; }

  std::vector<Parameter*> parameters();
  std::vector<const Parameter*> parameters() const;
  /// {extractor, W0}
  std::vector<Parameter*> instance_stream_parameters();
  /// {Wq, Wv, W1}
  std::vector<Parameter*> bag_stream_parameters();

 private:
  Extractor extractor_;
  Parameter w0_, wq_, wv_, w1_;
  double lambda_ = 0.5;
};

struct BoundDsmil {
  BoundExtractor extractor;
  Var w0, wq, wv, w1;
  double lambda = 0.5;
};

/// Which parameter groups receive gradients.
struct StreamMask {
  bool extractor = true;
  bool w0 = true;
  bool bag_stream = true;
};

BoundDsmil bind(Graph& g, DsmilModel& model, StreamMask mask = {});
BoundDsmil bind(Graph& g, const DsmilModel& model);

/// score[i] = W0 h_i, raw logits.
Var instance_scores(const Var& H, const Var& w0);

/// Maximum instance score and the lowest index attaining it.
MaxResult max_pool_stream(const Var& scores);

struct QueryValue {
  Var queries;  // [L x N]
  Var values;   // [L x N]
};

QueryValue project_qv(const Var& H, const Var& wq, const Var& wv);

struct AttentionResult {
  Var weights;  // softmax of logits, [N]
  Var logits;   // s_i = <q_i, q_m>, [N]
  std::size_t inner_products = 0;
};

/// Attention of every instance to the top-activated one: one inner product
/// per instance, no scaling, softmax-normalised.
AttentionResult max_self_attention(const Var& queries, std::size_t m_index);

Var bag_embedding(const Var& values, const Var& attention);

/// c_b = W1 b.
Var bag_score(const Var& embedding, const Var& w1);

/// (1 - lambda) c_m + lambda c_b. Throws DomainError for lambda outside [0,1].
Var dual_combine(const Var& c_m, const Var& c_b, double lambda);

struct BagForward {
  Var c_m, c_b, c_hat;
  Var attention;
  Var attention_logits;
  Var instance_scores;
  Var bag_embedding;
  Var embeddings;  // H
  std::size_t m_index = 0;
  std::size_t inner_products = 0;
};

BagForward forward_bag(Graph& g, std::span<const Instance> instances, const BoundDsmil& model);

/// Value snapshot of a bag forward pass.
struct BagForwardResult {
  double c_m = 0.0;
  double c_b = 0.0;
  double c_hat = 0.0;
  Tensor attention;
  std::size_t m_index = 0;
  Tensor instance_scores;
  Tensor bag_embedding;
  std::size_t inner_products = 0;
};

BagForwardResult forward_bag(std::span<const Instance> instances, const DsmilModel& model);
BagForwardResult forward_bag(const Bag& bag, const DsmilModel& model);

/// (sigmoid(score) - label)^2, or (score - label)^2 with squash disabled.
/// Throws DomainError for a non-binary label.
Var mse_loss(const Var& score, int label, bool squash = true);

/// W0 f(x): the max-pooling stream used as a standalone instance classifier.
double score_instance(std::span<const double> instance, const DsmilModel& model);

// ---------------------------------------------------------------------------
// Baseline aggregators
// ---------------------------------------------------------------------------

enum class BaselineKind { instance_max, instance_mean, embed_max, embed_mean, abmilp, abmilp_gated };

std::string_view to_string(BaselineKind kind);
BaselineKind parse_baseline_kind(std::string_view name);

struct BaselineConfig {
  BaselineKind kind = BaselineKind::abmilp;
  ExtractorConfig extractor;
  std::size_t attention_dim = 64;
};

/// Extractor plus a linear classifier [1 x L]; the attention variants add
/// V [D x L], w [1 x D] and, when gated, U [D x L].
class BaselineModel {
 public:
  BaselineModel() = default;
  BaselineModel(const BaselineConfig& config, std::uint64_t seed);

  BaselineKind kind() const { return kind_; }
  std::size_t attention_dim() const { return attention_dim_; }
  Extractor& extractor() { return extractor_; }
  const Extractor& extractor() const { return extractor_; }
  Parameter& classifier() { return classifier_; }
  const Parameter& classifier() const { return classifier_; }
  Parameter& attention_v() { return attn_v_; }
  Parameter& attention_u() { return attn_u_; }
  Parameter& attention_w() { return attn_w_; }

  std::vector<Parameter*> parameters();
  std::vector<const Parameter*> parameters() const;

 private:
  BaselineKind kind_ = BaselineKind::abmilp;
  std::size_t attention_dim_ = 64;
  Extractor extractor_;
  Parameter classifier_, attn_v_, attn_u_, attn_w_;
};

struct BaselineForward {
  Var logit;
  std::optional<Var> attention;  // abmilp variants only
};

BaselineForward baseline_forward(Graph& g, std::span<const Instance> instances, BaselineModel& model,
                                 bool trainable = true);
double baseline_forward(std::span<const Instance> instances, const BaselineModel& model);

// ---------------------------------------------------------------------------
// Training
// ---------------------------------------------------------------------------

enum class TrainMode { joint, alternating };

std::string_view to_string(TrainMode mode);
TrainMode parse_train_mode(std::string_view name);

struct TrainOptions {
  TrainMode mode = TrainMode::joint;
  bool squash = true;
};

/// Either model family behind one training/evaluation surface.
class MilModel {
 public:
  explicit MilModel(DsmilModel model) : dsmil_(std::move(model)) {}
  explicit MilModel(BaselineModel model) : baseline_(std::move(model)) {}
  MilModel(const MilModel&) = default;
  MilModel& operator=(const MilModel&) = default;

  bool is_dsmil() const { return dsmil_.has_value(); }
  DsmilModel& dsmil() { return dsmil_.value(); }
  const DsmilModel& dsmil() const { return dsmil_.value(); }
  BaselineModel& baseline() { return baseline_.value(); }
  const BaselineModel& baseline() const { return baseline_.value(); }

  /// "dsmil" or the baseline kind.
  std::string kind_name() const;
  const Extractor& extractor() const;
  std::vector<Parameter*> parameters();
  std::vector<const Parameter*> parameters() const;

  /// Bag logit (c_hat for the dual-stream model).
  double predict(std::span<const Instance> instances) const;

 private:
  std::optional<DsmilModel> dsmil_;
  std::optional<BaselineModel> baseline_;
};

struct EpochResult {
  double mean_loss = 0.0;
  std::size_t steps = 0;
  /// Alternating mode: 0 for an instance-stream epoch, 1 for a bag-stream
  /// epoch. Always 0 in joint mode.
  int phase = 0;
};

/// One pass over `dataset` in an order shuffled by `rng`, one optimizer step
/// per bag. Joint mode trains every parameter on the combined score.
/// Alternating mode uses `epoch_index` parity: even epochs train {extractor,
/// W0} on the max-pooling score, odd epochs train {Wq, Wv, W1} on the bag
/// score with the extractor frozen. The reported loss is the mean of the
/// per-bag losses computed before each step.
EpochResult train_epoch(const Dataset& dataset, MilModel& model, Optimizer& optimizer, const TrainOptions& options,
                        std::size_t epoch_index, std::mt19937_64& rng);

}  // namespace dsmil
