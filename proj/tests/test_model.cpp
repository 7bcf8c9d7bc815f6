#include <doctest.h>

#include <cstring>

#include "mumt/grad_check.hpp"
#include "mumt/model.hpp"

using namespace mumt;
namespace op = mumt::ops;

namespace {

ModelConfig small_config() {
  ModelConfig cfg;
  cfg.modality_dims = {{Modality::eye, 3}, {Modality::pupil, 2}, {Modality::au, 4},
                       {Modality::gsr, 3}};
  cfg.seq_len = 40;
  cfg.t_reduced = 8;
  cfg.enc_d_model = 16;
  cfg.enc_heads = 2;
  cfg.enc_ffn = 24;
  cfg.fusion_d_model = 32;
  cfg.fusion_heads = 4;
  cfg.fusion_ffn = 24;
  cfg.proj_dim = 8;
  cfg.stim_emo_dim = 32;
  cfg.summary_dim = 10;
  cfg.init_seed = 77;
  return cfg;
}

template <typename S>
ModelBatch<S> random_batch(const ModelConfig& cfg, int64_t b, uint64_t seed) {
  Rng rng(seed);
  ModelBatch<S> batch;
  for (Modality m : cfg.enabled_modalities) {
    std::vector<S> data(size_t(b * cfg.seq_len * cfg.modality_dims.at(m)));
    for (auto& v : data) v = S(rng.uniform(-1, 1));
    batch.sequences[m] =
        Tensor<S>::from_data({b, cfg.seq_len, cfg.modality_dims.at(m)}, std::move(data));
  }
  std::vector<S> summary(size_t(b * cfg.summary_dim));
  for (auto& v : summary) v = S(rng.uniform(-1, 1));
  batch.summary = Tensor<S>::from_data({b, cfg.summary_dim}, std::move(summary));
  std::vector<S> stim(size_t(b * 2));
  for (auto& v : stim) v = S(rng.uniform(0, 1));
  batch.stim_emo = Tensor<S>::from_data({b, 2}, std::move(stim));
  return batch;
}

template <typename S>
bool bits_equal(const Tensor<S>& a, const Tensor<S>& b) {
  return a.numel() == b.numel() &&
         std::memcmp(a.data().data(), b.data().data(), sizeof(S) * size_t(a.numel())) == 0;
}

}  // namespace

TEST_CASE("forward: output shapes, sigmoid range, determinism in eval mode") {
  auto cfg = small_config();
  MuMTAffectModel<float> model(cfg);
  auto batch = random_batch<float>(cfg, 3, 42);
  ForwardCtx ctx;

  auto out = model.forward(batch, ctx);
  CHECK(out.valence_logits.shape() == Shape{3, 3});
  CHECK(out.arousal_logits.shape() == Shape{3, 3});
  CHECK(out.personality_pred.shape() == Shape{3, 5});
  CHECK(out.personality_embedding.shape() == Shape{3, 32});
  CHECK(out.emotion_embedding.shape() == Shape{3, 32});
  CHECK(out.trial_embedding.shape() == Shape{3, 64});
  for (float v : out.personality_pred.data()) {
    CHECK(v >= 0.0f);
    CHECK(v <= 1.0f);
  }

  auto out2 = model.forward(batch, ctx);
  CHECK(bits_equal(out.valence_logits, out2.valence_logits));
  CHECK(bits_equal(out.personality_pred, out2.personality_pred));
  CHECK(bits_equal(out.trial_embedding, out2.trial_embedding));
}

TEST_CASE("forward: missing configured inputs are named") {
  auto cfg = small_config();
  MuMTAffectModel<float> model(cfg);
  auto batch = random_batch<float>(cfg, 2, 1);
  ForwardCtx ctx;

  auto broken = batch;
  broken.sequences.erase(Modality::gsr);
  try {
    model.forward(broken, ctx);
    FAIL("expected ValueError");
  } catch (const ValueError& e) {
    CHECK(std::string(e.what()).find("gsr") != std::string::npos);
  }

  auto no_stim = batch;
  no_stim.stim_emo = Tensor<float>();
  try {
    model.forward(no_stim, ctx);
    FAIL("expected ValueError");
  } catch (const ValueError& e) {
    CHECK(std::string(e.what()).find("stim_emo") != std::string::npos);
  }
}

TEST_CASE("encode_modality: shape contract and width check") {
  auto cfg = small_config();
  MuMTAffectModel<float> model(cfg);
  Rng rng(3);
  std::vector<float> data(size_t(2 * cfg.seq_len * 3));
  for (auto& v : data) v = float(rng.uniform(-1, 1));
  auto x = Tensor<float>::from_data({2, cfg.seq_len, 3}, std::move(data));
  ForwardCtx ctx;
  auto enc = model.encode_modality(x, Modality::eye, ctx);
  CHECK(enc.shape() == Shape{2, cfg.t_reduced, cfg.enc_d_model});
  CHECK_THROWS_AS(model.encode_modality(x, Modality::pupil, ctx), ShapeError);  // width 2 expected
}

TEST_CASE("fuse_and_route: shapes, zero-filled slots, row-stochastic task attention") {
  auto cfg = small_config();
  cfg.enabled_modalities = {Modality::eye, Modality::pupil, Modality::au};  // gsr disabled
  MuMTAffectModel<float> model(cfg);
  auto batch = random_batch<float>(cfg, 2, 9);
  ForwardCtx ctx;

  std::map<Modality, Tensor<float>> reduced;
  for (Modality m : cfg.enabled_modalities)
    reduced.emplace(m, model.encode_modality(batch.sequences.at(m), m, ctx));

  auto seqs = model.fuse_and_route(reduced, batch.stim_emo, ctx);
  CHECK(seqs.personality_seq.shape() == Shape{2, cfg.t_reduced, cfg.fusion_d_model});
  CHECK(seqs.emotion_seq.shape() == Shape{2, cfg.t_reduced, cfg.fusion_d_model});

  // The disabled modality's slot is zero-filled: feeding a tensor for it (or
  // not) must not change the result, because the slot never reads it.
  auto with_extra = reduced;
  with_extra.emplace(Modality::gsr, Tensor<float>::filled({2, cfg.t_reduced, cfg.enc_d_model}, 3.5f));
  auto seqs2 = model.fuse_and_route(with_extra, batch.stim_emo, ctx);
  CHECK(bits_equal(seqs.personality_seq, seqs2.personality_seq));
  CHECK(bits_equal(seqs.emotion_seq, seqs2.emotion_seq));

  auto w = model.task_attention_weights_personality();  // [B x T x T]
  int64_t tk = w.shape().back();
  for (int64_t r = 0; r < w.numel() / tk; ++r) {
    double s = 0;
    for (int64_t c = 0; c < tk; ++c) s += double(w.data()[r * tk + c]);
    CHECK(std::fabs(s - 1.0) < 1e-6);
  }

  CHECK_THROWS_AS(model.fuse_and_route({}, batch.stim_emo, ctx), ValueError);
}

TEST_CASE("branch temporal lengths follow the conv specs") {
  // 16 -> 16 -> 8 for the personality branch, 16 -> 8 -> 4 -> 2 for emotion.
  Conv1dBlockParams s1(128, 128, 1), s2(128, 128, 2);
  CHECK(s1.output_length(16) == 16);
  CHECK(s2.output_length(16) == 8);
  CHECK(s2.output_length(8) == 4);
  CHECK(s2.output_length(4) == 2);
}

TEST_CASE("forward succeeds for every non-empty modality subset") {
  auto base = small_config();
  for (int mask = 1; mask < 16; ++mask) {
    auto cfg = base;
    cfg.enabled_modalities.clear();
    for (int i = 0; i < 4; ++i)
      if (mask & (1 << i)) cfg.enabled_modalities.insert(kAllModalities[size_t(i)]);
    MuMTAffectModel<float> model(cfg);
    auto batch = random_batch<float>(cfg, 2, uint64_t(mask));
    ForwardCtx ctx;
    auto out = model.forward(batch, ctx);
    CHECK(out.valence_logits.shape() == Shape{2, 3});
  }
  ModelConfig empty = base;
  empty.enabled_modalities.clear();
  CHECK_THROWS_AS((MuMTAffectModel<float>{empty}), ValueError);
}

TEST_CASE("stim emo: input changes emotion logits iff configured") {
  auto cfg = small_config();
  MuMTAffectModel<float> with_stim(cfg);
  auto batch = random_batch<float>(cfg, 2, 5);
  ForwardCtx ctx;

  auto out1 = with_stim.forward(batch, ctx);
  auto batch2 = batch;
  std::vector<float> stim2(4, 0.9f);
  batch2.stim_emo = Tensor<float>::from_data({2, 2}, std::move(stim2));
  auto out2 = with_stim.forward(batch2, ctx);
  CHECK(!bits_equal(out1.valence_logits, out2.valence_logits));

  auto cfg_off = cfg;
  cfg_off.use_stim_emo = false;
  MuMTAffectModel<float> without(cfg_off);
  auto o1 = without.forward(batch, ctx);
  auto o2 = without.forward(batch2, ctx);
  CHECK(bits_equal(o1.valence_logits, o2.valence_logits));
  CHECK(bits_equal(o1.arousal_logits, o2.arousal_logits));
}

TEST_CASE("conditioning toggle changes emotion logits, personality bit-identical") {
  auto cfg = small_config();
  MuMTAffectModel<float> conditioned(cfg);
  auto cfg_off = cfg;
  cfg_off.condition_emotion_on_personality = false;
  MuMTAffectModel<float> unconditioned(cfg_off);

  auto batch = random_batch<float>(cfg, 2, 8);
  ForwardCtx ctx;
  auto a = conditioned.forward(batch, ctx);
  auto b = unconditioned.forward(batch, ctx);
  CHECK(bits_equal(a.personality_pred, b.personality_pred));
  CHECK(!bits_equal(a.valence_logits, b.valence_logits));
}

TEST_CASE("parameter counts: band, partition, encoder-drop delta") {
  ModelConfig full;  // Table-3 defaults, all modalities, stim emo on
  MuMTAffectModel<float> model(full);
  auto counts = count_parameters(model);

  const int64_t paper_total = 3430000;
  CHECK(counts.total >= int64_t(double(paper_total) * 0.9));
  CHECK(counts.total <= int64_t(double(paper_total) * 1.1));

  int64_t group_sum = 0;
  for (auto& [g, n] : counts.by_group) {
    CHECK(n > 0);
    group_sum += n;
  }
  CHECK(group_sum == counts.total);

  // Every parameter belongs to exactly one group (each appears once).
  auto params = model.parameters();
  std::set<std::string> names;
  for (auto& p : params) CHECK(names.insert(p.name).second);

  // Dropping a modality removes exactly its standalone stack: input projection
  // + encoder layer + fusion projection.
  auto no_gsr = full;
  no_gsr.enabled_modalities.erase(Modality::gsr);
  MuMTAffectModel<float> reduced(no_gsr);
  int64_t d = full.enc_d_model, ffn = full.enc_ffn, dm = full.modality_dims.at(Modality::gsr);
  int64_t encoder_stack = (dm * d + d)                    // input projection
                          + 4 * (d * d + d) + 2 * 2 * d   // attention + norms
                          + (d * ffn + ffn) + (ffn * d + d)  // ffn
                          + (d * full.proj_dim + full.proj_dim);
  CHECK(counts.total - count_parameters(reduced).total == encoder_stack);

  // Count is a pure function of the config.
  MuMTAffectModel<float> again(full);
  CHECK(count_parameters(again).total == counts.total);
}

TEST_CASE("end-to-end gradient check on sampled parameters (64-bit)") {
  auto cfg = small_config();
  MuMTAffectModel<double> model(cfg);
  auto batch = random_batch<double>(cfg, 2, 17);
  ForwardCtx ctx;  // eval: dropout off, batch-stat norm frozen

  auto loss_fn = [&]() {
    auto out = model.forward(batch, ctx);
    return op::sum_all(op::concat(
        std::vector<Tensor<double>>{
            op::reshape(op::sum_all(out.valence_logits), {1}),
            op::reshape(op::sum_all(out.arousal_logits), {1}),
            op::reshape(op::sum_all(out.personality_pred), {1}),
            op::reshape(op::sum_all(out.personality_embedding), {1}),
            op::reshape(op::sum_all(out.emotion_embedding), {1}),
            op::reshape(op::sum_all(out.trial_embedding), {1})},
        0));
  };

  auto named = model.parameters();
  std::vector<Tensor<double>> params;
  for (auto& p : named) params.push_back(p.tensor);

  // Sample ~1% of elements, at least one per parameter tensor.
  Rng rng(99);
  std::vector<std::pair<size_t, size_t>> elements;
  for (size_t pi = 0; pi < params.size(); ++pi) {
    int64_t n = params[pi].numel();
    int64_t take = std::max<int64_t>(1, n / 100);
    for (int64_t k = 0; k < take; ++k)
      elements.emplace_back(pi, size_t(rng.uniform_int(uint64_t(n))));
  }
  auto report = finite_diff_check_params<double>(loss_fn, params, elements, 1e-5, 1e-3);
  INFO("e2e max_rel_err " << report.max_rel_err << " over " << report.n_checked << " elements");
  CHECK(report.pass);
}
