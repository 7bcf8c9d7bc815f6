#pragma once

#include <functional>
#include <optional>

#include "mumt/datapipe.hpp"
#include "mumt/model.hpp"

// Training per the three-phase schedule: personality pretraining (alpha=1),
// multitask (alpha~0.3), fine-tuning (alpha~0.1, rates / 10), with per-group
// learning rates, exponential decay, early stopping on the validation
// combined loss, and binary checkpoints.

namespace mumt {

enum class Phase { pretrain = 0, multitask = 1, finetune = 2 };

inline const char* phase_name(Phase p) {
  switch (p) {
    case Phase::pretrain: return "pretrain";
    case Phase::multitask: return "multitask";
    case Phase::finetune: return "finetune";
  }
  return "?";
}

struct TrainConfig {
  std::array<double, 3> alpha = {1.0, 0.3, 0.1};
  std::array<int64_t, 3> epochs = {50, 100, 25};
  std::array<double, 3> base_lr = {1e-4, 8e-4, 8e-5};
  double personality_head_lr = 5e-5;  // phase-2 rate; phase 3 divides by 10
  double emotion_head_lr = 5e-4;
  std::array<double, 3> gamma = {0.99, 0.95, 0.95};
  int64_t patience = 7;
  double min_delta = 1e-4;  // improvement threshold for early stopping
  double epsilon = 0.05;    // dead zone of the trait regression loss
  int64_t batch_size = 32;
  std::map<ParamGroup, double> weight_decay = {{ParamGroup::base, 1e-4},
                                               {ParamGroup::personality, 1e-4},
                                               {ParamGroup::emotion, 1e-4}};
  std::optional<std::array<double, 3>> valence_class_weights;  // default: inverse frequency
  std::optional<std::array<double, 3>> arousal_class_weights;
  uint64_t seed = 1234;

  void validate() const {
    for (double a : alpha)
      if (a < 0.0 || a > 1.0) throw ValueError("alpha must lie in [0, 1]");
    for (double g : gamma)
      if (g <= 0.0 || g > 1.0) throw ValueError("gamma must lie in (0, 1]");
    for (double lr : base_lr)
      if (lr <= 0.0) throw ValueError("learning rates must be positive");
    if (personality_head_lr <= 0.0 || emotion_head_lr <= 0.0)
      throw ValueError("learning rates must be positive");
    if (patience < 1) throw ValueError("patience must be >= 1");
    if (epsilon < 0.0) throw ValueError("epsilon must be >= 0");
    if (batch_size < 2) throw ValueError("batch_size must be >= 2 (batch norm needs 2)");
    for (auto& [g, wd] : weight_decay)
      if (wd < 0.0) throw ValueError("weight decay must be >= 0");
  }
};

// Group learning rate at `epoch` of `phase`: phase base rate x gamma^epoch.
// Phase 1 trains everything at the base rate; phases 2-3 give the task heads
// their own rates (phase 3 divides all rates by 10).
double lr_at(Phase phase, ParamGroup group, int64_t epoch, const TrainConfig& cfg);

// --- losses -------------------------------------------------------------------

// mean over batch and traits of max(0, |pred - target| - eps).
template <typename S>
Tensor<S> epsilon_insensitive_loss(const Tensor<S>& pred, const Tensor<S>& target, S eps) {
  if (eps < S(0)) throw ValueError("epsilon must be >= 0");
  if (pred.shape() != target.shape())
    throw ShapeError("loss shape mismatch: " + shape_str(pred.shape()) + " vs " +
                     shape_str(target.shape()));
  return ops::mean_all(ops::relu(ops::add_scalar(ops::abs(ops::sub(pred, target)), -eps)));
}

// Weighted mean of -w[y] log softmax(logits)[y], normalized by sum of w[y_i].
template <typename S>
Tensor<S> weighted_cross_entropy(const Tensor<S>& logits, const std::vector<int>& classes,
                                 const std::array<double, 3>& weights) {
  if (logits.rank() != 2 || logits.dim(1) != 3)
    throw ShapeError("weighted_cross_entropy expects [B x 3] logits, got " +
                     shape_str(logits.shape()));
  if (int64_t(classes.size()) != logits.dim(0))
    throw ShapeError("class list length " + std::to_string(classes.size()) +
                     " does not match batch " + std::to_string(logits.dim(0)));
  for (double w : weights)
    if (w <= 0.0) throw ValueError("class weights must be positive");
  Tensor<S> logp = ops::log_softmax(logits, 1);
  Tensor<S> hot = ops::one_hot<S>(classes, 3);
  Tensor<S> picked = ops::sum(ops::mul(logp, hot), 1);  // [B]
  std::vector<S> w(classes.size());
  double total_w = 0;
  for (size_t i = 0; i < classes.size(); ++i) {
    w[i] = S(weights[size_t(classes[i])]);
    total_w += weights[size_t(classes[i])];
  }
  Tensor<S> weighted = ops::mul(picked, Tensor<S>::from_data({int64_t(w.size())}, std::move(w)));
  return ops::mul_scalar(ops::sum_all(weighted), S(-1.0 / total_w));
}

template <typename S>
struct LossParts {
  Tensor<S> total;
  Tensor<S> personality;
  Tensor<S> emotion;  // mean of the two cross-entropies
  Tensor<S> valence_ce;
  Tensor<S> arousal_ce;
};

template <typename S>
struct BatchLabels {
  std::vector<int> valence;
  std::vector<int> arousal;
  Tensor<S> personality;  // [B x 5]
};

// L = alpha L_personality + (1 - alpha) L_emotion,
// L_emotion = (valence CE + arousal CE) / 2.
template <typename S>
LossParts<S> combined_loss(const ForwardOutput<S>& out, const BatchLabels<S>& labels, double alpha,
                           S eps, const std::array<double, 3>& valence_w,
                           const std::array<double, 3>& arousal_w) {
  if (alpha < 0.0 || alpha > 1.0) throw ValueError("alpha must lie in [0, 1]");
  LossParts<S> parts;
  parts.personality = epsilon_insensitive_loss(out.personality_pred, labels.personality, eps);
  parts.valence_ce = weighted_cross_entropy(out.valence_logits, labels.valence, valence_w);
  parts.arousal_ce = weighted_cross_entropy(out.arousal_logits, labels.arousal, arousal_w);
  parts.emotion = ops::mul_scalar(ops::add(parts.valence_ce, parts.arousal_ce), S(0.5));
  parts.total = ops::add(ops::mul_scalar(parts.personality, S(alpha)),
                         ops::mul_scalar(parts.emotion, S(1.0 - alpha)));
  return parts;
}

// --- optimizer ------------------------------------------------------------------

// Adaptive moment estimation with decoupled weight decay and per-group rates.
class AdamW {
 public:
  static constexpr double kBeta1 = 0.9;
  static constexpr double kBeta2 = 0.999;
  static constexpr double kEps = 1e-8;

  explicit AdamW(std::vector<Param<float>> params,
                 std::map<ParamGroup, double> weight_decay = {});

  void set_lr(ParamGroup group, double lr) { lr_[group] = lr; }
  double lr(ParamGroup group) const { return lr_.at(group); }

  void zero_grad();
  void step();
  int64_t steps_taken() const { return t_; }

 private:
  std::vector<Param<float>> params_;
  std::vector<std::vector<float>> m_, v_;
  std::map<ParamGroup, double> lr_;
  std::map<ParamGroup, double> wd_;
  int64_t t_ = 0;
};

// --- batching ---------------------------------------------------------------------

template <typename S>
struct TrainBatch {
  ModelBatch<S> inputs;
  BatchLabels<S> labels;
};

// Assemble a batch from trial indices; reads only the enabled modalities.
TrainBatch<float> make_batch(const std::vector<ProcessedTrial>& trials,
                             const std::vector<size_t>& indices, const ModelConfig& cfg);

// Inverse-frequency class weights on a split, renormalized to mean 1.
std::array<double, 3> inverse_frequency_weights(const std::vector<ProcessedTrial>& trials,
                                                const std::vector<size_t>& indices, bool arousal);

// --- checkpoints ---------------------------------------------------------------------

struct CheckpointMeta {
  int64_t phase = 0;
  int64_t epoch = 0;
  double best_val_loss = 0.0;
  uint64_t seed = 0;
};

struct Checkpoint {
  ModelConfig config;
  CheckpointMeta meta;
  std::vector<std::pair<std::string, Tensor<float>>> tensors;  // params then buffers
};

Checkpoint snapshot_model(MuMTAffectModel<float>& model, const CheckpointMeta& meta);
// Copies checkpoint tensors into the model; throws listing every offending
// tensor name on shape or name mismatch.
void restore_model(MuMTAffectModel<float>& model, const Checkpoint& ckpt);

void save_checkpoint(const Checkpoint& ckpt, const std::string& path);
Checkpoint load_checkpoint(const std::string& path);

// --- the phase loop ---------------------------------------------------------------------

struct EpochRecord {
  Phase phase = Phase::pretrain;
  int64_t epoch = 0;
  double train_loss = 0;
  double train_personality = 0;
  double train_emotion = 0;
  double val_loss = 0;
  std::map<ParamGroup, double> lr;
};

struct TrainResult {
  Checkpoint best;
  std::vector<EpochRecord> history;
  double best_val_loss = 0;
  int64_t best_epoch = -1;
};

using EpochCallback = std::function<void(const EpochRecord&)>;

// Runs one phase: seeded shuffled mini-batches, AdamW with lr_at rates,
// per-epoch validation at the phase alpha, early stopping after `patience`
// epochs without a min_delta improvement. The model is left at the best
// checkpoint, which is also returned.
TrainResult train_phase(MuMTAffectModel<float>& model, const std::vector<ProcessedTrial>& trials,
                        const DatasetSplit& split, Phase phase, const TrainConfig& cfg,
                        const EpochCallback& on_epoch = nullptr);

// pretrain -> multitask -> finetune, each starting from the previous best.
TrainResult train_all_phases(MuMTAffectModel<float>& model,
                             const std::vector<ProcessedTrial>& trials, const DatasetSplit& split,
                             const TrainConfig& cfg, const EpochCallback& on_epoch = nullptr);

}  // namespace mumt
