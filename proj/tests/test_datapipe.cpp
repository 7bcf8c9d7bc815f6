#include <doctest.h>

#include <filesystem>
#include <fstream>

#include "mumt/csv.hpp"
#include "mumt/datapipe.hpp"
#include "mumt/rng.hpp"

using namespace mumt;
namespace fs = std::filesystem;

namespace {

std::string temp_dir(const std::string& tag) {
  auto dir = fs::temp_directory_path() / ("mumt_test_" + tag);
  fs::remove_all(dir);
  fs::create_directories(dir);
  return dir.string();
}

// Hash of every file's bytes, keyed by filename; order-independent.
std::map<std::string, size_t> dir_digest(const std::string& dir) {
  std::map<std::string, size_t> digest;
  for (const auto& entry : fs::directory_iterator(dir)) {
    std::ifstream in(entry.path(), std::ios::binary);
    std::string bytes((std::istreambuf_iterator<char>(in)), std::istreambuf_iterator<char>());
    digest[entry.path().filename().string()] = std::hash<std::string>{}(bytes);
  }
  return digest;
}

double spearman(const std::vector<double>& a, const std::vector<double>& b) {
  auto ranks = [](const std::vector<double>& v) {
    std::vector<size_t> idx(v.size());
    for (size_t i = 0; i < idx.size(); ++i) idx[i] = i;
    std::sort(idx.begin(), idx.end(), [&](size_t x, size_t y) { return v[x] < v[y]; });
    std::vector<double> r(v.size());
    for (size_t i = 0; i < idx.size();) {
      size_t j = i;
      while (j + 1 < idx.size() && v[idx[j + 1]] == v[idx[i]]) ++j;
      double mean_rank = 0.5 * double(i + j);
      for (size_t k = i; k <= j; ++k) r[idx[k]] = mean_rank;
      i = j + 1;
    }
    return r;
  };
  auto ra = ranks(a), rb = ranks(b);
  double ma = 0, mb = 0;
  for (size_t i = 0; i < ra.size(); ++i) {
    ma += ra[i];
    mb += rb[i];
  }
  ma /= double(ra.size());
  mb /= double(rb.size());
  double num = 0, va = 0, vb = 0;
  for (size_t i = 0; i < ra.size(); ++i) {
    num += (ra[i] - ma) * (rb[i] - mb);
    va += (ra[i] - ma) * (ra[i] - ma);
    vb += (rb[i] - mb) * (rb[i] - mb);
  }
  return num / std::sqrt(va * vb);
}

// Minimal but complete trial for summary tests.
TrialRecord make_min_trial() {
  TrialRecord trial;
  trial.trial_id = "t1";
  auto flags = [](RawModalitySeries& s, double t) {
    s.values.push_back(t > 0.5 ? 1.0f : 0.0f);
    s.values.push_back(t < 4.0 ? 1.0f : 0.0f);
    s.values.push_back(t >= 4.0 ? 1.0f : 0.0f);
  };
  {
    RawModalitySeries s;
    s.feature_names = {"gaze_x", "gaze_y", "fixation", "blink", "first_fix", "scenario", "video"};
    for (int i = 0; i < 100; ++i) {
      double t = i * 0.1;
      s.t.push_back(t);
      s.values.push_back(0.5f);
      s.values.push_back(0.5f);
      s.values.push_back((i / 5) % 2 == 0 ? 1.0f : 0.0f);  // 10 fixation blocks
      s.values.push_back(i % 25 == 0 ? 1.0f : 0.0f);       // 4 blinks over 9.9 s
      flags(s, t);
    }
    trial.series[Modality::eye] = std::move(s);
  }
  {
    RawModalitySeries s;
    s.feature_names = {"pupil_avg", "first_fix", "scenario", "video"};
    for (int i = 0; i < 100; ++i) {
      double t = i * 0.1;
      s.t.push_back(t);
      s.values.push_back(3.0f);
      flags(s, t);
    }
    trial.series[Modality::pupil] = std::move(s);
  }
  {
    RawModalitySeries s;
    s.feature_names = {"au04", "au12", "au04_act", "au12_act", "first_fix", "scenario", "video"};
    for (int i = 0; i < 100; ++i) {
      double t = i * 0.1;
      s.t.push_back(t);
      s.values.push_back(0.2f);
      s.values.push_back(0.6f);
      s.values.push_back(0.0f);
      s.values.push_back(1.0f);
      flags(s, t);
    }
    trial.series[Modality::au] = std::move(s);
  }
  {
    RawModalitySeries s;
    s.feature_names = {"phasic", "tonic", "first_fix", "scenario", "video"};
    for (int i = 0; i < 500; ++i) {
      double t = i * 0.02;
      s.t.push_back(t);
      s.values.push_back(0.0f);
      s.values.push_back(2.0f);
      flags(s, t);
    }
    trial.series[Modality::gsr] = std::move(s);
  }
  return trial;
}

size_t schema_index(const std::vector<std::string>& schema, const std::string& name) {
  for (size_t i = 0; i < schema.size(); ++i)
    if (schema[i] == name) return i;
  FAIL("schema is missing " << name);
  return 0;
}

}  // namespace

TEST_CASE("resample: numeric interpolation, constants, categorical selection") {
  std::vector<double> t = {0.0, 1.0};
  std::vector<float> v = {0.0f, 3.0f};
  CHECK(resample_channel(t, v, ChannelKind::numeric, 4) == std::vector<float>{0, 1, 2, 3});

  std::vector<float> c(10, 2.5f);
  std::vector<double> tc(10);
  for (int i = 0; i < 10; ++i) tc[size_t(i)] = i * 0.3;
  for (float x : resample_channel(tc, c, ChannelKind::numeric, 7))
    CHECK(x == doctest::Approx(2.5f));

  std::vector<double> t3 = {0.0, 1.0, 2.0};
  std::vector<float> flags = {5.0f, 5.0f, 7.0f};
  CHECK(resample_channel(t3, flags, ChannelKind::categorical, 4) ==
        std::vector<float>{5, 5, 7, 7});

  CHECK_THROWS_AS(resample_channel({}, {}, ChannelKind::numeric, 4), ValueError);
}

TEST_CASE("resample: exact on affine signals") {
  Rng rng(4);
  for (int rep = 0; rep < 5; ++rep) {
    double a = rng.uniform(-0.3, 0.3), b = rng.uniform(-1, 1);
    int n = 50 + int(rng.uniform_int(200));
    std::vector<double> t;
    std::vector<float> v;
    double cur = 0;
    for (int i = 0; i < n; ++i) {
      cur += rng.uniform(0.01, 0.1);  // irregular spacing
      t.push_back(cur);
      v.push_back(float(a * cur + b));
    }
    auto out = resample_channel(t, v, ChannelKind::numeric, 400);
    double span = t.back() - t.front();
    for (int i = 0; i < 400; ++i) {
      double tau = t.front() + span * i / 399.0;
      CHECK(std::fabs(double(out[size_t(i)]) - (a * tau + b)) < 1e-6);
    }
  }
}

TEST_CASE("resample: NaN handling") {
  std::vector<double> t(20);
  std::vector<float> v(20, 1.0f);
  for (int i = 0; i < 20; ++i) t[size_t(i)] = i * 0.1;
  v[4] = std::nanf("");  // short run: repaired by interpolation
  auto out = resample_channel(t, v, ChannelKind::numeric, 10);
  for (float x : out) CHECK(x == doctest::Approx(1.0f));

  for (int i = 5; i < 12; ++i) v[size_t(i)] = std::nanf("");  // 8/20 > 25%
  CHECK_THROWS_AS(resample_channel(t, v, ChannelKind::numeric, 10), TrialReject);
}

TEST_CASE("summary: constant pupil, no-peak GSR conventions") {
  auto trial = make_min_trial();
  auto schema = summary_schema_for(trial);
  auto summary = compute_trial_summary(trial);
  REQUIRE(summary.size() == schema.size());

  CHECK(summary[schema_index(schema, "pupil_mean")] == doctest::Approx(3.0));
  CHECK(summary[schema_index(schema, "pupil_std")] == doctest::Approx(0.0));
  CHECK(summary[schema_index(schema, "pupil_min")] == doctest::Approx(3.0));
  CHECK(summary[schema_index(schema, "pupil_max")] == doctest::Approx(3.0));
  CHECK(summary[schema_index(schema, "eye_fixation_count")] == doctest::Approx(10.0));
  CHECK(summary[schema_index(schema, "eye_blink_rate")] == doctest::Approx(4.0 / 9.9));

  // flat phasic: no peaks, all SCR stats settle to 0
  CHECK(summary[schema_index(schema, "gsr_scr_peak_count")] == 0.0f);
  CHECK(summary[schema_index(schema, "gsr_scr_amp_mean")] == 0.0f);
  CHECK(summary[schema_index(schema, "gsr_scr_amp_std")] == 0.0f);
  CHECK(summary[schema_index(schema, "gsr_tonic_mean")] == doctest::Approx(2.0));

  CHECK(summary[schema_index(schema, "au_smile_rate")] == doctest::Approx(1.0));
  CHECK(summary[schema_index(schema, "au_frown_rate")] == doctest::Approx(0.0));
}

TEST_CASE("summary: three injected SCR peaks of amplitude 0.5") {
  auto trial = make_min_trial();
  auto& gsr = trial.series[Modality::gsr];
  for (double tp : {2.0, 4.5, 7.0}) {
    for (int64_t i = 0; i < gsr.rows(); ++i) {
      double t = gsr.t[size_t(i)];
      float add = 0;
      if (t >= tp - 0.5 && t <= tp)
        add = float(0.5 * (1.0 - (tp - t) / 0.5));
      else if (t > tp && t < tp + 1.0)
        add = float(0.5 * std::exp(-(t - tp) / 0.3));
      gsr.values[size_t(i * gsr.width() + 0)] += add;
    }
  }
  auto schema = summary_schema_for(trial);
  auto summary = compute_trial_summary(trial);
  CHECK(summary[schema_index(schema, "gsr_scr_peak_count")] == doctest::Approx(3.0));
  CHECK(summary[schema_index(schema, "gsr_scr_amp_mean")] == doctest::Approx(0.5).epsilon(0.05));
}

TEST_CASE("bin_rating: decided edges, monotone, range checked") {
  CHECK(bin_rating(1) == 0);
  CHECK(bin_rating(2) == 0);
  CHECK(bin_rating(3) == 0);
  CHECK(bin_rating(4) == 1);
  CHECK(bin_rating(5) == 1);
  CHECK(bin_rating(6) == 1);
  CHECK(bin_rating(7) == 2);
  CHECK(bin_rating(8) == 2);
  CHECK(bin_rating(9) == 2);
  for (int r = 2; r <= 9; ++r) CHECK(bin_rating(r) >= bin_rating(r - 1));
  CHECK_THROWS_AS(bin_rating(0), ValueError);
  CHECK_THROWS_AS(bin_rating(10), ValueError);
}

TEST_CASE("split_by_user: paper-scale rounding, minimum viable, determinism") {
  std::vector<std::string> users;
  for (int i = 0; i < 69; ++i) users.push_back("user" + std::to_string(i));
  auto split = split_by_user(users, 7);
  int n_test = 0, n_val = 0, n_train = 0;
  for (auto& [u, label] : split) {
    if (label == SplitLabel::test) ++n_test;
    if (label == SplitLabel::val) ++n_val;
    if (label == SplitLabel::train) ++n_train;
  }
  CHECK(n_test == 10);
  CHECK(n_val == 9);
  CHECK(n_train == 50);

  auto tiny = split_by_user({"a", "b", "c"}, 1);
  int counts[3] = {0, 0, 0};
  for (auto& [u, label] : tiny) ++counts[int(label)];
  CHECK(counts[0] == 1);
  CHECK(counts[1] == 1);
  CHECK(counts[2] == 1);

  CHECK(split_by_user(users, 99) == split_by_user(users, 99));
  CHECK_THROWS_AS(split_by_user({"a", "b"}, 1), ValueError);
}

TEST_CASE("assign_split: user-disjointness and within-user trial splits") {
  std::vector<ProcessedTrial> trials;
  for (int u = 0; u < 6; ++u)
    for (int k = 0; k < 20; ++k) {
      ProcessedTrial t;
      t.trial_id = "u" + std::to_string(u) + "_" + std::to_string(k);
      t.user_id = "u" + std::to_string(u);
      trials.push_back(t);
    }

  for (uint64_t seed : {1ull, 2ull, 3ull}) {
    auto split = assign_split(trials, SplitMode::by_user, seed);
    std::set<std::string> train_users, other_users;
    for (size_t i : split.train) train_users.insert(trials[i].user_id);
    for (size_t i : split.val) other_users.insert(trials[i].user_id);
    for (size_t i : split.test) other_users.insert(trials[i].user_id);
    for (const auto& u : train_users) CHECK(!other_users.count(u));
    CHECK(split.train.size() + split.val.size() + split.test.size() == trials.size());
  }

  auto tsplit = assign_split(trials, SplitMode::by_trial, 5);
  CHECK(tsplit.train.size() + tsplit.val.size() + tsplit.test.size() == trials.size());
  // 20 trials per user: 3 test, 3 val, 14 train, every user present in each part
  std::map<std::string, std::array<int, 3>> per_user;
  for (size_t i : tsplit.train) per_user[trials[i].user_id][0]++;
  for (size_t i : tsplit.val) per_user[trials[i].user_id][1]++;
  for (size_t i : tsplit.test) per_user[trials[i].user_id][2]++;
  for (auto& [u, c] : per_user) {
    CHECK(c[0] == 14);
    CHECK(c[1] == 3);
    CHECK(c[2] == 3);
  }
}

TEST_CASE("synthetic dataset: generation, invariants, planted arousal signal, determinism") {
  SyntheticConfig cfg;
  cfg.n_users = 8;
  cfg.trials_per_user = 40;
  cfg.seed = 42;
  auto dir = temp_dir("synth");
  generate_synthetic(dir, cfg);

  auto data = load_dataset(dir);
  CHECK(data.trials.size() == 320);
  CHECK(data.rejected.empty());
  CHECK(data.summary_schema.size() == 64);
  CHECK(data.modality_widths.at(Modality::eye) == 9);
  CHECK(data.modality_widths.at(Modality::pupil) == 6);
  CHECK(data.modality_widths.at(Modality::au) == 20);
  CHECK(data.modality_widths.at(Modality::gsr) == 7);

  std::vector<double> amp, arousal, pupil, valence;
  size_t amp_idx = schema_index(data.summary_schema, "gsr_scr_amp_mean");
  size_t pupil_idx = schema_index(data.summary_schema, "pupil_mean");
  for (const auto& t : data.trials) {
    CHECK(t.felt_valence >= 1);
    CHECK(t.felt_valence <= 9);
    for (float p : t.personality) {
      CHECK(p >= 0.0f);
      CHECK(p <= 1.0f);
    }
    for (const auto& [m, seq] : t.sequences)
      CHECK(int64_t(seq.size()) == kTargetLen * data.modality_widths.at(m));
    amp.push_back(double(t.summary[amp_idx]));
    arousal.push_back(double(t.arousal_class));
    pupil.push_back(double(t.summary[pupil_idx]));
    valence.push_back(double(t.valence_class));
  }
  CHECK(spearman(amp, arousal) >= 0.8);
  CHECK(spearman(pupil, valence) >= 0.5);

  // same seed and arguments: byte-identical output
  auto dir2 = temp_dir("synth2");
  generate_synthetic(dir2, cfg);
  auto d1 = dir_digest(dir);
  auto d2 = dir_digest(dir2);
  CHECK(d1 == d2);
  fs::remove_all(dir2);

  SUBCASE("missing modality file rejects only that trial") {
    fs::remove(dir + "/u001_t003_gsr.csv");
    auto partial = load_dataset(dir);
    CHECK(partial.trials.size() == 319);
    REQUIRE(partial.rejected.size() == 1);
    CHECK(partial.rejected[0].first == "u001_t003");
  }
  fs::remove_all(dir);
}

TEST_CASE("synthetic generation is a pure function of its arguments") {
  SyntheticConfig a, b;
  a.seed = 1;
  b.seed = 2;
  a.n_users = b.n_users = 3;
  a.trials_per_user = b.trials_per_user = 2;
  auto da = temp_dir("pure_a"), db = temp_dir("pure_b");
  generate_synthetic(da, a);
  generate_synthetic(db, b);
  CHECK(dir_digest(da) != dir_digest(db));
  fs::remove_all(da);
  fs::remove_all(db);
}

TEST_CASE("loader: manifest validation is strict") {
  SyntheticConfig cfg;
  cfg.n_users = 3;
  cfg.trials_per_user = 2;
  auto dir = temp_dir("manifest");
  generate_synthetic(dir, cfg);

  // Corrupt one felt rating to 11.
  auto manifest = read_csv(dir + "/manifest.csv");
  manifest.rows[2][4] = "11";
  CsvWriter w(dir + "/manifest.csv");
  w.write_row(manifest.header);
  for (auto& row : manifest.rows) w.write_row(row);
  w.close();
  CHECK_THROWS_AS(load_dataset(dir), FormatError);
  fs::remove_all(dir);
}

TEST_CASE("preprocessed round trip preserves trials bit-exactly") {
  SyntheticConfig cfg;
  cfg.n_users = 3;
  cfg.trials_per_user = 3;
  cfg.seed = 11;
  auto raw_dir = temp_dir("roundtrip_raw");
  generate_synthetic(raw_dir, cfg);
  auto data = load_dataset(raw_dir);
  REQUIRE(data.trials.size() == 9);

  auto pre_dir = temp_dir("roundtrip_pre");
  write_preprocessed(pre_dir, data);
  auto reloaded = load_dataset(pre_dir);
  REQUIRE(reloaded.trials.size() == data.trials.size());
  CHECK(reloaded.rejected.empty());
  for (size_t i = 0; i < data.trials.size(); ++i) {
    const auto& a = data.trials[i];
    const auto& b = reloaded.trials[i];
    CHECK(a.trial_id == b.trial_id);
    CHECK(a.valence_class == b.valence_class);
    CHECK(a.summary == b.summary);
    for (const auto& [m, seq] : a.sequences) CHECK(b.sequences.at(m) == seq);
  }
  fs::remove_all(raw_dir);
  fs::remove_all(pre_dir);
}

TEST_CASE("mask_disabled_modalities zeroes the owned summary slice") {
  auto trial = make_min_trial();
  ProcessedTrial p;
  p.summary = compute_trial_summary(trial);
  auto schema = summary_schema_for(trial);
  p.sequences[Modality::gsr] = {1.0f};
  p.sequences[Modality::eye] = {1.0f};

  auto before = p.summary;
  mask_disabled_modalities(p, schema, {Modality::eye, Modality::pupil, Modality::au});
  CHECK(!p.sequences.count(Modality::gsr));
  CHECK(p.sequences.count(Modality::eye));
  for (size_t i = 0; i < schema.size(); ++i) {
    if (schema[i].rfind("gsr_", 0) == 0)
      CHECK(p.summary[i] == 0.0f);
    else
      CHECK(p.summary[i] == before[i]);
  }
}
