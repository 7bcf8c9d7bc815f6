#include "mumt/training.hpp"

#include <bit>
#include <cmath>
#include <cstring>
#include <fstream>

#include <json.hpp>

static_assert(std::endian::native == std::endian::little,
              "checkpoint format is little-endian; big-endian hosts are unsupported");

namespace mumt {

using json = nlohmann::json;

double lr_at(Phase phase, ParamGroup group, int64_t epoch, const TrainConfig& cfg) {
  if (epoch < 0) throw ValueError("epoch must be >= 0");
  size_t p = size_t(phase);
  double base;
  switch (phase) {
    case Phase::pretrain:
      base = cfg.base_lr[0];
      break;
    case Phase::multitask:
      base = group == ParamGroup::personality ? cfg.personality_head_lr
             : group == ParamGroup::emotion   ? cfg.emotion_head_lr
                                              : cfg.base_lr[1];
      break;
    case Phase::finetune:
      base = group == ParamGroup::personality ? cfg.personality_head_lr / 10.0
             : group == ParamGroup::emotion   ? cfg.emotion_head_lr / 10.0
                                              : cfg.base_lr[2];
      break;
    default:
      throw ValueError("unknown phase");
  }
  return base * std::pow(cfg.gamma[p], double(epoch));
}

// --- optimizer ---------------------------------------------------------------

AdamW::AdamW(std::vector<Param<float>> params, std::map<ParamGroup, double> weight_decay)
    : params_(std::move(params)), wd_(std::move(weight_decay)) {
  m_.resize(params_.size());
  v_.resize(params_.size());
  for (size_t i = 0; i < params_.size(); ++i) {
    m_[i].assign(size_t(params_[i].tensor.numel()), 0.0f);
    v_[i].assign(size_t(params_[i].tensor.numel()), 0.0f);
  }
  for (ParamGroup g : {ParamGroup::base, ParamGroup::personality, ParamGroup::emotion}) {
    lr_.emplace(g, 0.0);
    wd_.emplace(g, 0.0);  // keeps existing entries
  }
}

void AdamW::zero_grad() {
  for (auto& p : params_) p.tensor.zero_grad();
}

void AdamW::step() {
  ++t_;
  double bc1 = 1.0 - std::pow(kBeta1, double(t_));
  double bc2 = 1.0 - std::pow(kBeta2, double(t_));
  for (size_t i = 0; i < params_.size(); ++i) {
    auto& p = params_[i];
    double lr = lr_.at(p.group);
    double wd = wd_.at(p.group);
    auto data = p.tensor.data_mut();
    const float* g = p.tensor.has_grad() ? p.tensor.grad().data() : nullptr;
    float* m = m_[i].data();
    float* v = v_[i].data();
    for (size_t k = 0; k < data.size(); ++k) {
      double gk = g ? double(g[k]) : 0.0;
      m[k] = float(kBeta1 * double(m[k]) + (1.0 - kBeta1) * gk);
      v[k] = float(kBeta2 * double(v[k]) + (1.0 - kBeta2) * gk * gk);
      double mhat = double(m[k]) / bc1;
      double vhat = double(v[k]) / bc2;
      data[k] = float(double(data[k]) -
                      lr * (mhat / (std::sqrt(vhat) + kEps) + wd * double(data[k])));
    }
  }
}

// --- batching ------------------------------------------------------------------

TrainBatch<float> make_batch(const std::vector<ProcessedTrial>& trials,
                             const std::vector<size_t>& indices, const ModelConfig& cfg) {
  if (indices.empty()) throw ValueError("make_batch with no trials");
  int64_t b = int64_t(indices.size());
  TrainBatch<float> batch;
  for (Modality m : kAllModalities) {
    if (!cfg.enabled_modalities.count(m)) continue;
    int64_t w = cfg.modality_dims.at(m);
    std::vector<float> buf(size_t(b * kTargetLen * w));
    for (int64_t i = 0; i < b; ++i) {
      const auto& trial = trials.at(indices[size_t(i)]);
      auto it = trial.sequences.find(m);
      if (it == trial.sequences.end())
        throw ValueError("trial " + trial.trial_id + " is missing the enabled modality '" +
                         modality_name(m) + "'");
      if (int64_t(it->second.size()) != kTargetLen * w)
        throw ShapeError("trial " + trial.trial_id + " " + modality_name(m) + " has " +
                         std::to_string(it->second.size()) + " values, expected " +
                         std::to_string(kTargetLen * w));
      std::memcpy(buf.data() + i * kTargetLen * w, it->second.data(),
                  sizeof(float) * size_t(kTargetLen * w));
    }
    batch.inputs.sequences[m] = Tensor<float>::from_data({b, kTargetLen, w}, std::move(buf));
  }
  std::vector<float> summary(size_t(b * cfg.summary_dim));
  std::vector<float> stim(size_t(b * 2));
  std::vector<float> traits(size_t(b * 5));
  for (int64_t i = 0; i < b; ++i) {
    const auto& trial = trials.at(indices[size_t(i)]);
    if (int64_t(trial.summary.size()) != cfg.summary_dim)
      throw ShapeError("trial " + trial.trial_id + " summary width " +
                       std::to_string(trial.summary.size()) + " does not match configured " +
                       std::to_string(cfg.summary_dim));
    std::memcpy(summary.data() + i * cfg.summary_dim, trial.summary.data(),
                sizeof(float) * size_t(cfg.summary_dim));
    stim[size_t(i * 2)] = trial.stim_valence;
    stim[size_t(i * 2 + 1)] = trial.stim_arousal;
    for (int j = 0; j < 5; ++j) traits[size_t(i * 5 + j)] = trial.personality[size_t(j)];
    batch.labels.valence.push_back(trial.valence_class);
    batch.labels.arousal.push_back(trial.arousal_class);
  }
  batch.inputs.summary = Tensor<float>::from_data({b, cfg.summary_dim}, std::move(summary));
  batch.inputs.stim_emo = Tensor<float>::from_data({b, 2}, std::move(stim));
  batch.labels.personality = Tensor<float>::from_data({b, 5}, std::move(traits));
  return batch;
}

std::array<double, 3> inverse_frequency_weights(const std::vector<ProcessedTrial>& trials,
                                                const std::vector<size_t>& indices, bool arousal) {
  std::array<int64_t, 3> counts = {0, 0, 0};
  for (size_t i : indices) {
    int c = arousal ? trials.at(i).arousal_class : trials.at(i).valence_class;
    counts[size_t(c)]++;
  }
  std::array<double, 3> w;
  for (int c = 0; c < 3; ++c) w[size_t(c)] = 1.0 / double(std::max<int64_t>(1, counts[size_t(c)]));
  double mean = (w[0] + w[1] + w[2]) / 3.0;
  for (auto& x : w) x /= mean;
  return w;
}

// --- checkpoints ------------------------------------------------------------------

namespace {

json config_to_json(const ModelConfig& cfg) {
  json dims = json::object();
  for (const auto& [m, d] : cfg.modality_dims) dims[modality_name(m)] = d;
  json enabled = json::array();
  for (Modality m : kAllModalities)
    if (cfg.enabled_modalities.count(m)) enabled.push_back(modality_name(m));
  return json{{"modality_dims", dims},
              {"seq_len", cfg.seq_len},
              {"t_reduced", cfg.t_reduced},
              {"enc", {{"d_model", cfg.enc_d_model},
                       {"heads", cfg.enc_heads},
                       {"ffn_dim", cfg.enc_ffn},
                       {"dropout", cfg.enc_dropout}}},
              {"fusion", {{"d_model", cfg.fusion_d_model},
                          {"heads", cfg.fusion_heads},
                          {"ffn_dim", cfg.fusion_ffn},
                          {"dropout", cfg.fusion_dropout}}},
              {"proj_dim", cfg.proj_dim},
              {"use_stim_emo", cfg.use_stim_emo},
              {"stim_emo_dim", cfg.stim_emo_dim},
              {"enabled_modalities", enabled},
              {"condition_emotion_on_personality", cfg.condition_emotion_on_personality},
              {"summary_dim", cfg.summary_dim},
              {"personality_branch_dropout", cfg.personality_branch_dropout},
              {"emotion_branch_dropout", cfg.emotion_branch_dropout},
              {"trial_dropout", cfg.trial_dropout},
              {"init_seed", cfg.init_seed}};
}

ModelConfig config_from_json(const json& j) {
  ModelConfig cfg;
  cfg.modality_dims.clear();
  for (auto& [name, d] : j.at("modality_dims").items())
    cfg.modality_dims[modality_from_name(name)] = d.get<int64_t>();
  cfg.seq_len = j.at("seq_len").get<int64_t>();
  cfg.t_reduced = j.at("t_reduced").get<int64_t>();
  cfg.enc_d_model = j.at("enc").at("d_model").get<int64_t>();
  cfg.enc_heads = j.at("enc").at("heads").get<int64_t>();
  cfg.enc_ffn = j.at("enc").at("ffn_dim").get<int64_t>();
  cfg.enc_dropout = j.at("enc").at("dropout").get<double>();
  cfg.fusion_d_model = j.at("fusion").at("d_model").get<int64_t>();
  cfg.fusion_heads = j.at("fusion").at("heads").get<int64_t>();
  cfg.fusion_ffn = j.at("fusion").at("ffn_dim").get<int64_t>();
  cfg.fusion_dropout = j.at("fusion").at("dropout").get<double>();
  cfg.proj_dim = j.at("proj_dim").get<int64_t>();
  cfg.use_stim_emo = j.at("use_stim_emo").get<bool>();
  cfg.stim_emo_dim = j.at("stim_emo_dim").get<int64_t>();
  cfg.enabled_modalities.clear();
  for (const auto& name : j.at("enabled_modalities"))
    cfg.enabled_modalities.insert(modality_from_name(name.get<std::string>()));
  cfg.condition_emotion_on_personality = j.at("condition_emotion_on_personality").get<bool>();
  cfg.summary_dim = j.at("summary_dim").get<int64_t>();
  cfg.personality_branch_dropout = j.at("personality_branch_dropout").get<double>();
  cfg.emotion_branch_dropout = j.at("emotion_branch_dropout").get<double>();
  cfg.trial_dropout = j.at("trial_dropout").get<double>();
  cfg.init_seed = j.at("init_seed").get<uint64_t>();
  return cfg;
}

template <typename T>
void append_raw(std::string& buf, T v) {
  buf.append(reinterpret_cast<const char*>(&v), sizeof(T));
}

template <typename T>
T read_raw(const std::string& buf, size_t& pos, const std::string& path) {
  if (pos + sizeof(T) > buf.size())
    throw FormatError(path + ": truncated checkpoint (needed " + std::to_string(sizeof(T)) +
                      " bytes at offset " + std::to_string(pos) + ")");
  T v;
  std::memcpy(&v, buf.data() + pos, sizeof(T));
  pos += sizeof(T);
  return v;
}

}  // namespace

Checkpoint snapshot_model(MuMTAffectModel<float>& model, const CheckpointMeta& meta) {
  Checkpoint ckpt;
  ckpt.config = model.config();
  ckpt.meta = meta;
  for (const auto& p : model.parameters()) ckpt.tensors.emplace_back(p.name, p.tensor.detach());
  for (const auto& b : model.buffers()) ckpt.tensors.emplace_back(b.name, b.tensor.detach());
  return ckpt;
}

void restore_model(MuMTAffectModel<float>& model, const Checkpoint& ckpt) {
  std::map<std::string, Tensor<float>> live;
  for (const auto& p : model.parameters()) live.emplace(p.name, p.tensor);
  for (const auto& b : model.buffers()) live.emplace(b.name, b.tensor);

  std::vector<std::string> problems;
  for (const auto& [name, tensor] : ckpt.tensors) {
    auto it = live.find(name);
    if (it == live.end()) {
      problems.push_back(name + " (not in model)");
      continue;
    }
    if (it->second.shape() != tensor.shape()) {
      problems.push_back(name + " (checkpoint " + shape_str(tensor.shape()) + ", model " +
                         shape_str(it->second.shape()) + ")");
      continue;
    }
    live.erase(it);
  }
  for (const auto& [name, tensor] : live) problems.push_back(name + " (missing from checkpoint)");
  if (!problems.empty()) {
    std::string msg = "checkpoint does not fit the model configuration:";
    for (const auto& p : problems) msg += "\n  " + p;
    throw ValueError(msg);
  }

  std::map<std::string, Tensor<float>> targets;
  for (const auto& p : model.parameters()) targets.emplace(p.name, p.tensor);
  for (const auto& b : model.buffers()) targets.emplace(b.name, b.tensor);
  for (const auto& [name, tensor] : ckpt.tensors) {
    auto dst = targets.at(name).data_mut();
    std::memcpy(dst.data(), tensor.data().data(), sizeof(float) * dst.size());
  }
}

void save_checkpoint(const Checkpoint& ckpt, const std::string& path) {
  std::string buf;
  buf.append("MMTA", 4);
  append_raw<uint32_t>(buf, 1);
  append_raw<uint32_t>(buf, uint32_t(ckpt.tensors.size()));
  for (const auto& [name, tensor] : ckpt.tensors) {
    append_raw<uint16_t>(buf, uint16_t(name.size()));
    buf.append(name);
    append_raw<uint8_t>(buf, uint8_t(tensor.rank()));
    for (int64_t d : tensor.shape()) append_raw<uint64_t>(buf, uint64_t(d));
    buf.append(reinterpret_cast<const char*>(tensor.data().data()),
               sizeof(float) * size_t(tensor.numel()));
  }
  json meta = {{"config", config_to_json(ckpt.config)},
               {"phase", ckpt.meta.phase},
               {"epoch", ckpt.meta.epoch},
               {"best_val_loss", ckpt.meta.best_val_loss},
               {"seed", ckpt.meta.seed}};
  std::string meta_str = meta.dump();
  append_raw<uint32_t>(buf, uint32_t(meta_str.size()));
  buf.append(meta_str);

  std::ofstream out(path, std::ios::binary | std::ios::trunc);
  if (!out) throw IoError("cannot write checkpoint to " + path);
  out.write(buf.data(), int64_t(buf.size()));
  if (!out) throw IoError("checkpoint write failed for " + path);
}

Checkpoint load_checkpoint(const std::string& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw IoError("cannot open checkpoint " + path);
  std::string buf((std::istreambuf_iterator<char>(in)), std::istreambuf_iterator<char>());
  size_t pos = 0;
  if (buf.size() < 4 || buf.compare(0, 4, "MMTA") != 0)
    throw FormatError(path + ": bad magic (not a MMTA checkpoint)");
  pos = 4;
  uint32_t version = read_raw<uint32_t>(buf, pos, path);
  if (version != 1)
    throw FormatError(path + ": unsupported checkpoint version " + std::to_string(version));
  uint32_t count = read_raw<uint32_t>(buf, pos, path);

  Checkpoint ckpt;
  for (uint32_t i = 0; i < count; ++i) {
    uint16_t name_len = read_raw<uint16_t>(buf, pos, path);
    if (pos + name_len > buf.size()) throw FormatError(path + ": truncated tensor name");
    std::string name(buf, pos, name_len);
    pos += name_len;
    uint8_t rank = read_raw<uint8_t>(buf, pos, path);
    Shape shape;
    int64_t n = 1;
    for (uint8_t d = 0; d < rank; ++d) {
      uint64_t dim = read_raw<uint64_t>(buf, pos, path);
      if (dim == 0 || dim > (1ull << 32)) throw FormatError(path + ": implausible dimension");
      shape.push_back(int64_t(dim));
      n *= int64_t(dim);
    }
    if (pos + sizeof(float) * size_t(n) > buf.size())
      throw FormatError(path + ": truncated tensor data for '" + name + "'");
    std::vector<float> data(size_t(n));
    std::memcpy(data.data(), buf.data() + pos, sizeof(float) * size_t(n));
    pos += sizeof(float) * size_t(n);
    ckpt.tensors.emplace_back(std::move(name),
                              Tensor<float>::from_data(std::move(shape), std::move(data)));
  }
  uint32_t meta_len = read_raw<uint32_t>(buf, pos, path);
  if (pos + meta_len > buf.size()) throw FormatError(path + ": truncated metadata block");
  std::string meta_str(buf, pos, meta_len);
  pos += meta_len;
  if (pos != buf.size())
    throw FormatError(path + ": " + std::to_string(buf.size() - pos) + " trailing bytes");
  json meta = json::parse(meta_str, nullptr, /*allow_exceptions=*/false);
  if (meta.is_discarded()) throw FormatError(path + ": metadata block is not valid JSON");
  ckpt.config = config_from_json(meta.at("config"));
  ckpt.meta.phase = meta.at("phase").get<int64_t>();
  ckpt.meta.epoch = meta.at("epoch").get<int64_t>();
  ckpt.meta.best_val_loss = meta.at("best_val_loss").get<double>();
  ckpt.meta.seed = meta.at("seed").get<uint64_t>();
  return ckpt;
}

// --- phase loop -------------------------------------------------------------------

TrainResult train_phase(MuMTAffectModel<float>& model, const std::vector<ProcessedTrial>& trials,
                        const DatasetSplit& split, Phase phase, const TrainConfig& cfg,
                        const EpochCallback& on_epoch) {
  cfg.validate();
  if (split.train.empty()) throw ValueError("train split is empty");
  if (split.val.empty()) throw ValueError("validation split is empty");
  size_t p = size_t(phase);

  auto valence_w = cfg.valence_class_weights.has_value()
                       ? *cfg.valence_class_weights
                       : inverse_frequency_weights(trials, split.train, false);
  auto arousal_w = cfg.arousal_class_weights.has_value()
                       ? *cfg.arousal_class_weights
                       : inverse_frequency_weights(trials, split.train, true);

  AdamW opt(model.parameters(), cfg.weight_decay);
  Rng root(cfg.seed);
  TrainResult result;
  double best = std::numeric_limits<double>::infinity();
  int64_t bad_epochs = 0;

  for (int64_t e = 0; e < cfg.epochs[p]; ++e) {
    for (ParamGroup g : {ParamGroup::base, ParamGroup::personality, ParamGroup::emotion})
      opt.set_lr(g, lr_at(phase, g, e, cfg));

    Rng erng = root.fork(uint64_t(p) * 1000003 + uint64_t(e) * 97 + 11);
    std::vector<size_t> order = split.train;
    erng.shuffle(order);

    double train_loss = 0, train_pers = 0, train_emo = 0;
    int64_t seen = 0, batch_no = 0;
    for (size_t start = 0; start < order.size();) {
      size_t take = std::min(size_t(cfg.batch_size), order.size() - start);
      if (order.size() - start - take == 1) ++take;  // absorb a trailing singleton
      std::vector<size_t> idx(order.begin() + int64_t(start), order.begin() + int64_t(start + take));
      start += take;
      ++batch_no;

      auto batch = make_batch(trials, idx, model.config());
      Rng drop_rng = erng.fork(uint64_t(batch_no));
      ForwardCtx ctx{/*train=*/true, &drop_rng, /*update_bn_stats=*/true};
      auto out = model.forward(batch.inputs, ctx);
      auto loss = combined_loss(out, batch.labels, cfg.alpha[p], float(cfg.epsilon), valence_w,
                                arousal_w);
      double lv = double(loss.total.item());
      if (!std::isfinite(lv))
        throw NumericError("non-finite training loss at phase " + std::string(phase_name(phase)) +
                           ", epoch " + std::to_string(e) + ", batch " +
                           std::to_string(batch_no) + " (personality " +
                           std::to_string(double(loss.personality.item())) + ", emotion " +
                           std::to_string(double(loss.emotion.item())) + ")");
      opt.zero_grad();
      backward(loss.total);
      opt.step();
      train_loss += lv * double(take);
      train_pers += double(loss.personality.item()) * double(take);
      train_emo += double(loss.emotion.item()) * double(take);
      seen += int64_t(take);
    }

    double val_loss = 0;
    {
      NoGradGuard ng;
      ForwardCtx ectx;
      int64_t vn = 0;
      for (size_t start = 0; start < split.val.size();) {
        size_t take = std::min(size_t(cfg.batch_size), split.val.size() - start);
        std::vector<size_t> idx(split.val.begin() + int64_t(start),
                                split.val.begin() + int64_t(start + take));
        start += take;
        auto batch = make_batch(trials, idx, model.config());
        auto out = model.forward(batch.inputs, ectx);
        auto loss = combined_loss(out, batch.labels, cfg.alpha[p], float(cfg.epsilon), valence_w,
                                  arousal_w);
        val_loss += double(loss.total.item()) * double(take);
        vn += int64_t(take);
      }
      val_loss /= double(vn);
    }

    EpochRecord rec;
    rec.phase = phase;
    rec.epoch = e;
    rec.train_loss = train_loss / double(seen);
    rec.train_personality = train_pers / double(seen);
    rec.train_emotion = train_emo / double(seen);
    rec.val_loss = val_loss;
    for (ParamGroup g : {ParamGroup::base, ParamGroup::personality, ParamGroup::emotion})
      rec.lr[g] = opt.lr(g);
    result.history.push_back(rec);
    if (on_epoch) on_epoch(rec);

    if (val_loss < best - cfg.min_delta) {
      best = val_loss;
      bad_epochs = 0;
      CheckpointMeta meta;
      meta.phase = int64_t(p) + 1;
      meta.epoch = e;
      meta.best_val_loss = best;
      meta.seed = cfg.seed;
      result.best = snapshot_model(model, meta);
      result.best_val_loss = best;
      result.best_epoch = e;
    } else if (++bad_epochs >= cfg.patience) {
      break;
    }
  }

  if (result.best_epoch < 0) {
    // No finite improvement was ever recorded (e.g. constant val loss); keep
    // the final weights as the phase result.
    CheckpointMeta meta;
    meta.phase = int64_t(p) + 1;
    meta.epoch = result.history.empty() ? 0 : result.history.back().epoch;
    meta.best_val_loss = result.history.empty() ? 0.0 : result.history.back().val_loss;
    meta.seed = cfg.seed;
    result.best = snapshot_model(model, meta);
    result.best_val_loss = meta.best_val_loss;
    result.best_epoch = meta.epoch;
  } else {
    restore_model(model, result.best);
  }
  return result;
}

TrainResult train_all_phases(MuMTAffectModel<float>& model,
                             const std::vector<ProcessedTrial>& trials, const DatasetSplit& split,
                             const TrainConfig& cfg, const EpochCallback& on_epoch) {
  TrainResult combined;
  for (Phase phase : {Phase::pretrain, Phase::multitask, Phase::finetune}) {
    TrainResult r = train_phase(model, trials, split, phase, cfg, on_epoch);
    combined.history.insert(combined.history.end(), r.history.begin(), r.history.end());
    combined.best = std::move(r.best);
    combined.best_val_loss = r.best_val_loss;
    combined.best_epoch = r.best_epoch;
  }
  return combined;
}

}  // namespace mumt
