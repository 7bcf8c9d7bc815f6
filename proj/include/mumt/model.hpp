#pragma once

#include <array>
#include <map>
#include <optional>
#include <set>

#include "mumt/layers.hpp"

// The MuMTAffect network: four modality transformer encoders with equal
// segment temporal reduction, a cross-modal fusion transformer over
// concatenated 32-dim projections, task attention with learnable query
// sequences routing into personality/emotion conv branches, a trial-level
// summary-feature MLP, and three prediction heads (Big Five regression,
// valence and arousal 3-class logits).

namespace mumt {

enum class Modality { eye, pupil, au, gsr };

constexpr std::array<Modality, 4> kAllModalities = {Modality::eye, Modality::pupil, Modality::au,
                                                    Modality::gsr};

inline const char* modality_name(Modality m) {
  switch (m) {
    case Modality::eye: return "eye";
    case Modality::pupil: return "pupil";
    case Modality::au: return "au";
    case Modality::gsr: return "gsr";
  }
  return "?";
}

inline Modality modality_from_name(const std::string& name) {
  for (Modality m : kAllModalities)
    if (name == modality_name(m)) return m;
  throw ValueError("unknown modality '" + name + "' (expected eye, pupil, au, gsr)");
}

struct ModelConfig {
  std::map<Modality, int64_t> modality_dims = {{Modality::eye, 9},
                                               {Modality::pupil, 6},
                                               {Modality::au, 20},
                                               {Modality::gsr, 7}};
  int64_t seq_len = 400;
  int64_t t_reduced = 16;

  int64_t enc_d_model = 64, enc_heads = 2, enc_ffn = 2048;
  double enc_dropout = 0.25;
  int64_t fusion_d_model = 128, fusion_heads = 4, fusion_ffn = 2048;
  double fusion_dropout = 0.25;
  int64_t proj_dim = 32;

  bool use_stim_emo = true;
  int64_t stim_emo_dim = 128;
  std::set<Modality> enabled_modalities = {Modality::eye, Modality::pupil, Modality::au,
                                           Modality::gsr};
  bool condition_emotion_on_personality = true;

  int64_t summary_dim = 64;

  double personality_branch_dropout = 0.4;
  double emotion_branch_dropout = 0.25;
  double trial_dropout = 0.3;

  uint64_t init_seed = 0x5eed;

  EncoderLayerParams enc_params() const {
    return EncoderLayerParams(enc_d_model, enc_heads, enc_ffn, enc_dropout);
  }
  EncoderLayerParams fusion_params() const {
    return EncoderLayerParams(fusion_d_model, fusion_heads, fusion_ffn, fusion_dropout);
  }

  void validate() const {
    enc_params();
    fusion_params();
    if (enabled_modalities.empty()) throw ValueError("at least one modality must be enabled");
    if (seq_len <= 0 || t_reduced <= 0 || seq_len % t_reduced != 0)
      throw ValueError("t_reduced " + std::to_string(t_reduced) + " must divide seq_len " +
                       std::to_string(seq_len));
    if (int64_t(kAllModalities.size()) * proj_dim != fusion_d_model)
      throw ValueError("4 x proj_dim (" + std::to_string(4 * proj_dim) +
                       ") must equal fusion d_model (" + std::to_string(fusion_d_model) + ")");
    if (use_stim_emo && stim_emo_dim != fusion_d_model)
      throw ValueError("stim_emo_dim must equal fusion d_model so the embedding can be added "
                       "to the fused sequence");
    if (summary_dim <= 0) throw ValueError("summary_dim must be positive");
    for (Modality m : enabled_modalities) {
      auto it = modality_dims.find(m);
      if (it == modality_dims.end() || it->second <= 0)
        throw ValueError(std::string("missing feature width for enabled modality ") +
                         modality_name(m));
    }
  }
};

enum class ParamGroup { base, personality, emotion };

inline const char* group_name(ParamGroup g) {
  switch (g) {
    case ParamGroup::base: return "base";
    case ParamGroup::personality: return "personality";
    case ParamGroup::emotion: return "emotion";
  }
  return "?";
}

template <typename S>
struct Param {
  std::string name;
  ParamGroup group;
  Tensor<S> tensor;
};

template <typename S>
struct ModelBatch {
  std::map<Modality, Tensor<S>> sequences;  // [B x seq_len x D_m] per enabled modality
  Tensor<S> summary;                        // [B x summary_dim]
  Tensor<S> stim_emo;                       // [B x 2]; required when configured
};

template <typename S>
struct ForwardOutput {
  Tensor<S> valence_logits;         // [B x 3]
  Tensor<S> arousal_logits;         // [B x 3]
  Tensor<S> personality_pred;       // [B x 5], sigmoid range
  Tensor<S> personality_embedding;  // [B x 128]
  Tensor<S> emotion_embedding;      // [B x 128]
  Tensor<S> trial_embedding;        // [B x 64]
};

namespace detail {

// Learnable query sequence + single-head attention with q/k/v/out projections.
template <typename S>
struct QueryAttention {
  Tensor<S> query;  // [Tq x d]
  MultiHeadAttention<S> attn;

  QueryAttention() = default;
  QueryAttention(int64_t tq, int64_t d, Rng& rng) : attn(d, 1, rng) {
    std::vector<S> q(size_t(tq * d));
    double limit = std::sqrt(3.0 / double(d));
    for (auto& v : q) v = S(rng.uniform(-limit, limit));
    query = Tensor<S>::from_data({tq, d}, std::move(q), true);
  }

  Tensor<S> forward(const Tensor<S>& kv) {
    int64_t b = kv.dim(0);
    Tensor<S> q1 = ops::reshape(query, {1, query.dim(0), query.dim(1)});
    Tensor<S> qb = b == 1 ? q1 : ops::concat(std::vector<Tensor<S>>(size_t(b), q1), 0);
    return attn.forward(qb, kv, kv);
  }

  void collect(const std::string& prefix, std::vector<NamedTensor<S>>& params) {
    params.push_back({prefix + ".query", query});
    attn.collect(prefix + ".attn", params);
  }
};

}  // namespace detail

template <typename S>
class MuMTAffectModel {
 public:
  explicit MuMTAffectModel(const ModelConfig& cfg) : cfg_(cfg) {
    cfg.validate();
    Rng rng(cfg.init_seed);

    for (Modality m : kAllModalities) {
      if (!cfg.enabled_modalities.count(m)) continue;
      int64_t dm = cfg.modality_dims.at(m);
      in_proj_[m] = Linear<S>(dm, cfg.enc_d_model, rng);
      encoder_[m] = TransformerEncoderLayer<S>(cfg.enc_params(), rng);
      fusion_proj_[m] = Linear<S>(cfg.enc_d_model, cfg.proj_dim, rng);
    }
    pe_ = positional_encoding<S>(cfg.seq_len, cfg.enc_d_model);
    input_dropout_ = Dropout<S>(cfg.enc_dropout);
    fusion_layer_ = TransformerEncoderLayer<S>(cfg.fusion_params(), rng);
    if (cfg.use_stim_emo) stim_proj_ = Linear<S>(2, cfg.stim_emo_dim, rng);

    task_attn_personality_ = detail::QueryAttention<S>(cfg.t_reduced, cfg.fusion_d_model, rng);
    task_attn_emotion_ = detail::QueryAttention<S>(cfg.t_reduced, cfg.fusion_d_model, rng);

    int64_t d = cfg.fusion_d_model;
    pers_conv1_ = Conv1dBlock<S>(Conv1dBlockParams(d, d, 1), rng);
    pers_conv2_ = Conv1dBlock<S>(Conv1dBlockParams(d, d, 2), rng);
    emo_conv1_ = Conv1dBlock<S>(Conv1dBlockParams(d, d, 2), rng);
    emo_conv2_ = Conv1dBlock<S>(Conv1dBlockParams(d, d, 2), rng);
    emo_conv3_ = Conv1dBlock<S>(Conv1dBlockParams(d, d, 2), rng);
    pers_branch_dropout_ = Dropout<S>(cfg.personality_branch_dropout);
    emo_branch_dropout_ = Dropout<S>(cfg.emotion_branch_dropout);

    trial_fc1_ = Linear<S>(cfg.summary_dim, 64, rng);
    trial_bn1_ = BatchNorm1d<S>(64);
    trial_fc2_ = Linear<S>(64, 64, rng);
    trial_bn2_ = BatchNorm1d<S>(64);
    trial_dropout_ = Dropout<S>(cfg.trial_dropout);

    int64_t fused_flat = cfg.t_reduced * d;
    pers_head_proj_ = Linear<S>(d + 64 + fused_flat, 128, rng);
    pers_head_fc1_ = Linear<S>(128, 64, rng);
    pers_head_bn1_ = BatchNorm1d<S>(64);
    pers_head_fc2_ = Linear<S>(64, 64, rng);
    pers_head_bn2_ = BatchNorm1d<S>(64);
    pers_head_out_ = Linear<S>(64, 5, rng);
    pers_head_dropout_ = Dropout<S>(cfg.personality_branch_dropout);

    int64_t emo_ctx = fused_flat + 64 + (cfg.condition_emotion_on_personality ? d : 0);
    for (auto* head : {&valence_head_, &arousal_head_}) {
      head->attn = detail::QueryAttention<S>(cfg.t_reduced, d, rng);
      head->proj = Linear<S>(emo_ctx, 128, rng);
      head->fc1 = Linear<S>(128, 64, rng);
      head->out = Linear<S>(64, 3, rng);
      head->dropout = Dropout<S>(cfg.emotion_branch_dropout);
    }
  }

  const ModelConfig& config() const { return cfg_; }

  // Project to d_model, add positional encoding, one encoder layer, then
  // average the t_reduced contiguous segments.
  Tensor<S> encode_modality(const Tensor<S>& x, Modality m, const ForwardCtx& ctx) {
    if (!cfg_.enabled_modalities.count(m))
      throw ValueError(std::string("modality ") + modality_name(m) + " is not enabled");
    if (x.rank() != 3 || x.dim(1) != cfg_.seq_len || x.dim(2) != cfg_.modality_dims.at(m))
      throw ShapeError(std::string("modality ") + modality_name(m) + " expects [B x " +
                       std::to_string(cfg_.seq_len) + " x " +
                       std::to_string(cfg_.modality_dims.at(m)) + "], got " +
                       shape_str(x.shape()));
    Tensor<S> e = input_dropout_.forward(ops::add(in_proj_.at(m).forward(x), pe_), ctx);
    return segment_average(encoder_.at(m).forward(e, ctx), cfg_.t_reduced);
  }

  struct FusedSequences {
    Tensor<S> personality_seq;  // [B x T x d]
    Tensor<S> emotion_seq;      // [B x T x d]
    Tensor<S> fused;            // [B x T x d] (post stim-emo injection)
  };

  // Per-modality 32-dim projection, zero-filled slots for disabled/missing
  // modalities, fusion encoder, optional stim-emo injection, task attention.
  FusedSequences fuse_and_route(const std::map<Modality, Tensor<S>>& reduced,
                                const std::optional<Tensor<S>>& stim_emo, const ForwardCtx& ctx) {
    if (reduced.empty()) throw ValueError("fuse_and_route requires at least one modality");
    int64_t b = reduced.begin()->second.dim(0);
    std::vector<Tensor<S>> slots;
    for (Modality m : kAllModalities) {
      auto it = reduced.find(m);
      if (it != reduced.end() && cfg_.enabled_modalities.count(m)) {
        slots.push_back(fusion_proj_.at(m).forward(it->second));
      } else {
        slots.push_back(Tensor<S>::zeros({b, cfg_.t_reduced, cfg_.proj_dim}));
      }
    }
    Tensor<S> fused = fusion_layer_.forward(ops::concat(slots, 2), ctx);
    if (cfg_.use_stim_emo) {
      if (!stim_emo.has_value())
        throw ValueError("model configured with use_stim_emo but batch carries no stim_emo");
      Tensor<S> emb = ops::reshape(stim_proj_.forward(*stim_emo), {b, 1, cfg_.stim_emo_dim});
      fused = ops::add(fused, ops::tile_middle(emb, cfg_.t_reduced));
    }
    return {task_attn_personality_.forward(fused), task_attn_emotion_.forward(fused), fused};
  }

  struct BranchEmbeddings {
    Tensor<S> personality;       // [B x d]
    Tensor<S> emotion;           // [B x d]
    Tensor<S> trial;             // [B x 64]
    Tensor<S> emotion_prepool;   // [B x d x 2] conv output before pooling
  };

  BranchEmbeddings branch_embeddings(const Tensor<S>& pers_seq, const Tensor<S>& emo_seq,
                                     const Tensor<S>& summary, const ForwardCtx& ctx) {
    if (summary.rank() != 2 || summary.dim(1) != cfg_.summary_dim)
      throw ShapeError("summary features expect [B x " + std::to_string(cfg_.summary_dim) +
                       "], got " + shape_str(summary.shape()));
    Tensor<S> p = pers_conv2_.forward(pers_conv1_.forward(ops::transpose(pers_seq, 1, 2), ctx), ctx);
    Tensor<S> p_emb = pers_branch_dropout_.forward(ops::mean(p, 2), ctx);

    Tensor<S> e = emo_conv3_.forward(
        emo_conv2_.forward(emo_conv1_.forward(ops::transpose(emo_seq, 1, 2), ctx), ctx), ctx);
    Tensor<S> e_emb = emo_branch_dropout_.forward(ops::mean(e, 2), ctx);

    Tensor<S> t = trial_dropout_.forward(
        ops::relu(trial_bn1_.forward(trial_fc1_.forward(summary), ctx)), ctx);
    t = trial_dropout_.forward(ops::relu(trial_bn2_.forward(trial_fc2_.forward(t), ctx)), ctx);

    return {p_emb, e_emb, t, e};
  }

  ForwardOutput<S> forward(const ModelBatch<S>& batch, const ForwardCtx& ctx) {
    for (Modality m : kAllModalities) {
      if (!cfg_.enabled_modalities.count(m)) continue;
      if (!batch.sequences.count(m))
        throw ValueError(std::string("batch is missing the configured modality input '") +
                         modality_name(m) + "'");
    }
    if (!batch.summary.defined()) throw ValueError("batch is missing 'summary'");
    if (cfg_.use_stim_emo && !batch.stim_emo.defined())
      throw ValueError("batch is missing 'stim_emo' (required by use_stim_emo)");

    std::map<Modality, Tensor<S>> reduced;
    for (Modality m : kAllModalities)
      if (cfg_.enabled_modalities.count(m))
        reduced.emplace(m, encode_modality(batch.sequences.at(m), m, ctx));

    std::optional<Tensor<S>> stim;
    if (cfg_.use_stim_emo) stim = batch.stim_emo;
    FusedSequences seqs = fuse_and_route(reduced, stim, ctx);
    BranchEmbeddings emb = branch_embeddings(seqs.personality_seq, seqs.emotion_seq,
                                             batch.summary, ctx);

    int64_t b = emb.personality.dim(0);
    Tensor<S> fused_flat = ops::reshape(seqs.fused, {b, cfg_.t_reduced * cfg_.fusion_d_model});

    Tensor<S> ph = pers_head_proj_.forward(
        ops::concat(std::vector<Tensor<S>>{emb.personality, emb.trial, fused_flat}, 1));
    ph = pers_head_dropout_.forward(ops::relu(pers_head_bn1_.forward(pers_head_fc1_.forward(ph), ctx)), ctx);
    ph = pers_head_dropout_.forward(ops::relu(pers_head_bn2_.forward(pers_head_fc2_.forward(ph), ctx)), ctx);
    Tensor<S> personality_pred = ops::sigmoid(pers_head_out_.forward(ph));

    Tensor<S> emo_kv = ops::transpose(emb.emotion_prepool, 1, 2);  // [B x 2 x d]
    auto run_head = [&](EmotionHead& head) {
      Tensor<S> att = head.attn.forward(emo_kv);  // [B x T x d]
      Tensor<S> att_flat = ops::reshape(att, {b, cfg_.t_reduced * cfg_.fusion_d_model});
      std::vector<Tensor<S>> parts{att_flat, emb.trial};
      if (cfg_.condition_emotion_on_personality) parts.push_back(emb.personality);
      Tensor<S> h = head.proj.forward(ops::concat(parts, 1));
      h = head.dropout.forward(ops::relu(head.fc1.forward(h)), ctx);
      return head.out.forward(h);
    };

    return {run_head(valence_head_), run_head(arousal_head_), personality_pred,
            emb.personality,          emb.emotion,            emb.trial};
  }

  // Parameters with group labels; registration order is the checkpoint order.
  std::vector<Param<S>> parameters() {
    std::vector<Param<S>> out;
    auto push = [&out](ParamGroup g, std::vector<NamedTensor<S>>&& named) {
      for (auto& nt : named) out.push_back({nt.name, g, nt.tensor});
    };
    for (Modality m : kAllModalities) {
      if (!cfg_.enabled_modalities.count(m)) continue;
      std::vector<NamedTensor<S>> named;
      std::string base = std::string("enc.") + modality_name(m);
      in_proj_.at(m).collect(base + ".in_proj", named);
      encoder_.at(m).collect(base + ".layer", named);
      fusion_proj_.at(m).collect("fusion.proj." + std::string(modality_name(m)), named);
      push(ParamGroup::base, std::move(named));
    }
    {
      std::vector<NamedTensor<S>> named;
      fusion_layer_.collect("fusion.layer", named);
      if (cfg_.use_stim_emo) stim_proj_.collect("stim_emo.embed", named);
      push(ParamGroup::base, std::move(named));
    }
    {
      std::vector<NamedTensor<S>> named;
      task_attn_personality_.collect("task_attn.personality", named);
      pers_conv1_.collect("branch.personality.conv1", named);
      pers_conv2_.collect("branch.personality.conv2", named);
      push(ParamGroup::personality, std::move(named));
    }
    {
      std::vector<NamedTensor<S>> named;
      task_attn_emotion_.collect("task_attn.emotion", named);
      emo_conv1_.collect("branch.emotion.conv1", named);
      emo_conv2_.collect("branch.emotion.conv2", named);
      emo_conv3_.collect("branch.emotion.conv3", named);
      push(ParamGroup::emotion, std::move(named));
    }
    {
      std::vector<NamedTensor<S>> named;
      trial_fc1_.collect("trial.fc1", named);
      trial_bn1_.collect("trial.bn1", named);
      trial_fc2_.collect("trial.fc2", named);
      trial_bn2_.collect("trial.bn2", named);
      push(ParamGroup::base, std::move(named));
    }
    {
      std::vector<NamedTensor<S>> named;
      pers_head_proj_.collect("head.personality.proj", named);
      pers_head_fc1_.collect("head.personality.fc1", named);
      pers_head_bn1_.collect("head.personality.bn1", named);
      pers_head_fc2_.collect("head.personality.fc2", named);
      pers_head_bn2_.collect("head.personality.bn2", named);
      pers_head_out_.collect("head.personality.out", named);
      push(ParamGroup::personality, std::move(named));
    }
    {
      std::vector<NamedTensor<S>> named;
      valence_head_.attn.collect("head.valence.attn", named);
      valence_head_.proj.collect("head.valence.proj", named);
      valence_head_.fc1.collect("head.valence.fc1", named);
      valence_head_.out.collect("head.valence.out", named);
      arousal_head_.attn.collect("head.arousal.attn", named);
      arousal_head_.proj.collect("head.arousal.proj", named);
      arousal_head_.fc1.collect("head.arousal.fc1", named);
      arousal_head_.out.collect("head.arousal.out", named);
      push(ParamGroup::emotion, std::move(named));
    }
    return out;
  }

  // Batch-norm running statistics, in registration order.
  std::vector<NamedTensor<S>> buffers() {
    std::vector<NamedTensor<S>> out;
    pers_conv1_.collect_buffers("branch.personality.conv1", out);
    pers_conv2_.collect_buffers("branch.personality.conv2", out);
    emo_conv1_.collect_buffers("branch.emotion.conv1", out);
    emo_conv2_.collect_buffers("branch.emotion.conv2", out);
    emo_conv3_.collect_buffers("branch.emotion.conv3", out);
    trial_bn1_.collect_buffers("trial.bn1", out);
    trial_bn2_.collect_buffers("trial.bn2", out);
    pers_head_bn1_.collect_buffers("head.personality.bn1", out);
    pers_head_bn2_.collect_buffers("head.personality.bn2", out);
    return out;
  }

  // Attention-weight diagnostics from the latest forward.
  const Tensor<S>& task_attention_weights_personality() const {
    return task_attn_personality_.attn.last_weights();
  }
  const Tensor<S>& task_attention_weights_emotion() const {
    return task_attn_emotion_.attn.last_weights();
  }

 private:
  struct EmotionHead {
    detail::QueryAttention<S> attn;
    Linear<S> proj, fc1, out;
    Dropout<S> dropout;
  };

  ModelConfig cfg_;
  std::map<Modality, Linear<S>> in_proj_;
  std::map<Modality, TransformerEncoderLayer<S>> encoder_;
  std::map<Modality, Linear<S>> fusion_proj_;
  Tensor<S> pe_;
  Dropout<S> input_dropout_;
  TransformerEncoderLayer<S> fusion_layer_;
  Linear<S> stim_proj_;
  detail::QueryAttention<S> task_attn_personality_, task_attn_emotion_;
  Conv1dBlock<S> pers_conv1_, pers_conv2_;
  Conv1dBlock<S> emo_conv1_, emo_conv2_, emo_conv3_;
  Dropout<S> pers_branch_dropout_, emo_branch_dropout_;
  Linear<S> trial_fc1_, trial_fc2_;
  BatchNorm1d<S> trial_bn1_, trial_bn2_;
  Dropout<S> trial_dropout_;
  Linear<S> pers_head_proj_, pers_head_fc1_, pers_head_fc2_, pers_head_out_;
  BatchNorm1d<S> pers_head_bn1_, pers_head_bn2_;
  Dropout<S> pers_head_dropout_;
  EmotionHead valence_head_, arousal_head_;
};

// Per-group and total parameter element counts.
template <typename S>
struct ParameterCounts {
  std::map<ParamGroup, int64_t> by_group;
  int64_t total = 0;
};

template <typename S>
ParameterCounts<S> count_parameters(MuMTAffectModel<S>& model) {
  ParameterCounts<S> counts;
  counts.by_group = {{ParamGroup::base, 0}, {ParamGroup::personality, 0}, {ParamGroup::emotion, 0}};
  for (const auto& p : model.parameters()) {
    counts.by_group[p.group] += p.tensor.numel();
    counts.total += p.tensor.numel();
  }
  return counts;
}

}  // namespace mumt
