#include "mumt/datapipe.hpp"

#include <algorithm>
#include <cmath>
#include <filesystem>
#include <set>

#include "mumt/csv.hpp"
#include "mumt/rng.hpp"

namespace fs = std::filesystem;

namespace mumt {

// --- resampling --------------------------------------------------------------

namespace {

struct ValidSamples {
  std::vector<double> t;
  std::vector<float> v;
};

// Drops NaN samples; rejects when a consecutive NaN run exceeds 25% of the
// series (corrupted-signal policy).
ValidSamples drop_nans(const std::vector<double>& t, const std::vector<float>& v) {
  ValidSamples out;
  out.t.reserve(t.size());
  out.v.reserve(v.size());
  size_t run = 0, max_run = 0;
  for (size_t i = 0; i < v.size(); ++i) {
    if (std::isnan(v[i])) {
      max_run = std::max(max_run, ++run);
    } else {
      run = 0;
      out.t.push_back(t[i]);
      out.v.push_back(v[i]);
    }
  }
  if (max_run * 4 > v.size())
    throw TrialReject("NaN run of " + std::to_string(max_run) + " samples exceeds 25% of " +
                      std::to_string(v.size()));
  return out;
}

}  // namespace

std::vector<float> resample_channel(const std::vector<double>& t, const std::vector<float>& v,
                                    ChannelKind kind, int64_t target_len) {
  if (v.empty()) throw ValueError("resample of an empty series");
  if (t.size() != v.size()) throw ValueError("resample: time/value length mismatch");
  for (size_t i = 1; i < t.size(); ++i)
    if (t[i] < t[i - 1]) throw ValueError("resample: timestamps must be non-decreasing");

  ValidSamples s = drop_nans(t, v);
  if (s.v.empty()) throw TrialReject("channel is entirely NaN");
  if (kind == ChannelKind::numeric && s.v.size() < 2)
    throw TrialReject("numeric channel has fewer than 2 valid samples");

  double t0 = s.t.front(), t1 = s.t.back();
  double span = t1 - t0;
  std::vector<float> out(static_cast<size_t>(target_len));
  if (kind == ChannelKind::numeric) {
    size_t k = 0;
    for (int64_t i = 0; i < target_len; ++i) {
      double tau = target_len == 1 ? t0 : t0 + span * double(i) / double(target_len - 1);
      while (k + 2 < s.t.size() && s.t[k + 1] <= tau) ++k;
      double dt = s.t[k + 1] - s.t[k];
      double w = dt <= 0 ? 0.0 : (tau - s.t[k]) / dt;
      w = std::clamp(w, 0.0, 1.0);
      out[size_t(i)] = float((1.0 - w) * double(s.v[k]) + w * double(s.v[k + 1]));
    }
  } else {
    // Nearest sample at or after the target time, so transitions register at
    // the first step that crosses them.
    size_t k = 0;
    for (int64_t i = 0; i < target_len; ++i) {
      double tau = target_len == 1 ? t0 : t0 + span * double(i) / double(target_len - 1);
      while (k + 1 < s.t.size() && s.t[k] < tau - 1e-12) ++k;
      out[size_t(i)] = s.v[k];
    }
  }
  return out;
}

std::vector<float> resample_series(const RawModalitySeries& series, int64_t target_len) {
  int64_t w = series.width();
  int64_t n = series.rows();
  std::vector<float> out(static_cast<size_t>(target_len * w));
  for (int64_t c = 0; c < w; ++c) {
    std::vector<float> col(static_cast<size_t>(n));
    bool binary = true;
    for (int64_t r = 0; r < n; ++r) {
      col[size_t(r)] = series.at(r, c);
      float x = col[size_t(r)];
      if (!std::isnan(x) && x != 0.0f && x != 1.0f) binary = false;
    }
    bool is_flag = c >= w - 3;  // first_fix, scenario, video
    auto kind = (is_flag || binary) ? ChannelKind::categorical : ChannelKind::numeric;
    std::vector<float> res = resample_channel(series.t, col, kind, target_len);
    for (int64_t r = 0; r < target_len; ++r) out[size_t(r * w + c)] = res[size_t(r)];
  }
  return out;
}

// --- SCR peak detection --------------------------------------------------------

std::vector<ScrPeak> detect_scr_peaks(const std::vector<double>& t,
                                      const std::vector<float>& phasic) {
  constexpr double kThreshold = 0.01;
  constexpr double kMinSeparation = 1.0;
  std::vector<ScrPeak> peaks;
  int64_t n = int64_t(phasic.size());
  double last_kept = -1e9;
  for (int64_t i = 1; i + 1 < n; ++i) {
    if (phasic[i] <= kThreshold) continue;
    if (!(phasic[i] > phasic[i - 1] && phasic[i] >= phasic[i + 1])) continue;
    if (t[i] - last_kept < kMinSeparation) continue;
    ScrPeak p;
    p.t_peak = t[i];
    int64_t onset = i;
    while (onset > 0 && phasic[onset] > kThreshold) --onset;
    p.onset_time = t[onset];
    p.amplitude = double(phasic[i]) - double(phasic[onset]);
    p.rise_time = p.t_peak - p.onset_time;
    double target = double(phasic[onset]) + 0.5 * p.amplitude;
    for (int64_t j = i + 1; j < n; ++j) {
      if (double(phasic[j]) <= target) {
        p.recovery_time = t[j] - p.t_peak;
        break;
      }
    }
    peaks.push_back(p);
    last_kept = t[i];
  }
  return peaks;
}

// --- summary features -----------------------------------------------------------

namespace {

struct Stats {
  double mean = 0, stddev = 0, min = 0, max = 0, median = 0;
};

Stats stats_of(const std::vector<double>& v) {
  Stats s;
  if (v.empty()) return s;
  double sum = 0;
  s.min = v[0];
  s.max = v[0];
  for (double x : v) {
    sum += x;
    s.min = std::min(s.min, x);
    s.max = std::max(s.max, x);
  }
  s.mean = sum / double(v.size());
  double var = 0;
  for (double x : v) var += (x - s.mean) * (x - s.mean);
  s.stddev = std::sqrt(var / double(v.size()));
  std::vector<double> sorted = v;
  std::sort(sorted.begin(), sorted.end());
  size_t m = sorted.size() / 2;
  s.median = sorted.size() % 2 ? sorted[m] : 0.5 * (sorted[m - 1] + sorted[m]);
  return s;
}

std::vector<double> column_of(const RawModalitySeries& s, int64_t c) {
  std::vector<double> out(static_cast<size_t>(s.rows()));
  for (int64_t r = 0; r < s.rows(); ++r) out[size_t(r)] = double(s.at(r, c));
  return out;
}

int64_t find_channel(const RawModalitySeries& s, const std::string& name) {
  for (size_t i = 0; i < s.feature_names.size(); ++i)
    if (s.feature_names[i] == name) return int64_t(i);
  return -1;
}

int64_t rising_edges(const std::vector<double>& v) {
  int64_t count = v.empty() ? 0 : (v[0] > 0.5 ? 1 : 0);
  for (size_t i = 1; i < v.size(); ++i)
    if (v[i] > 0.5 && v[i - 1] <= 0.5) ++count;
  return count;
}

bool is_au_intensity(const std::string& name) {
  return name.rfind("au", 0) == 0 && name.find("_act") == std::string::npos;
}
bool is_au_activation(const std::string& name) {
  return name.rfind("au", 0) == 0 && name.size() >= 4 &&
         name.compare(name.size() - 4, 4, "_act") == 0;
}

const RawModalitySeries& series_or_throw(const TrialRecord& trial, Modality m) {
  auto it = trial.series.find(m);
  if (it == trial.series.end() || it->second.rows() == 0)
    throw ValueError(std::string("trial ") + trial.trial_id + " has a zero-length " +
                     modality_name(m) + " modality");
  return it->second;
}

}  // namespace

std::vector<std::string> summary_schema_for(const TrialRecord& trial) {
  std::vector<std::string> names = {"pupil_mean", "pupil_std", "pupil_min", "pupil_max",
                                    "eye_fixation_count", "eye_blink_rate"};
  const auto& au = series_or_throw(trial, Modality::au);
  for (const auto& ch : au.feature_names)
    if (is_au_intensity(ch))
      for (const char* stat : {"mean", "std", "min", "max"})
        names.push_back("au_" + ch + "_" + stat);
  for (const auto& ch : au.feature_names)
    if (is_au_activation(ch)) names.push_back("au_" + ch + "_rate");
  names.push_back("au_smile_rate");
  names.push_back("au_frown_rate");
  for (const char* n :
       {"scr_peak_count", "scr_amp_mean", "scr_amp_median", "scr_amp_min", "scr_amp_max",
        "scr_amp_std", "scr_onset_interval_mean", "scr_onset_interval_std", "scr_rise_mean",
        "scr_rise_std", "scr_recovery_mean", "scr_recovery_std", "phasic_mean", "phasic_std",
        "tonic_mean", "tonic_std"})
    names.push_back(std::string("gsr_") + n);
  return names;
}

std::vector<float> compute_trial_summary(const TrialRecord& trial) {
  std::vector<float> out;
  auto push = [&out](double v) { out.push_back(float(v)); };

  // Pupil stats come from pupil_avg (or the first channel when unnamed).
  const auto& pupil = series_or_throw(trial, Modality::pupil);
  int64_t pc = find_channel(pupil, "pupil_avg");
  Stats ps = stats_of(column_of(pupil, pc >= 0 ? pc : 0));
  push(ps.mean);
  push(ps.stddev);
  push(ps.min);
  push(ps.max);

  const auto& eye = series_or_throw(trial, Modality::eye);
  double duration = eye.t.back() - eye.t.front();
  if (duration <= 0) duration = 1.0;
  int64_t fix = find_channel(eye, "fixation");
  push(fix >= 0 ? double(rising_edges(column_of(eye, fix))) : 0.0);
  int64_t blink = find_channel(eye, "blink");
  push(blink >= 0 ? double(rising_edges(column_of(eye, blink))) / duration : 0.0);

  const auto& au = series_or_throw(trial, Modality::au);
  double smile_rate = 0, frown_rate = 0;
  for (size_t c = 0; c < au.feature_names.size(); ++c) {
    if (!is_au_intensity(au.feature_names[c])) continue;
    Stats s = stats_of(column_of(au, int64_t(c)));
    push(s.mean);
    push(s.stddev);
    push(s.min);
    push(s.max);
  }
  for (size_t c = 0; c < au.feature_names.size(); ++c) {
    if (!is_au_activation(au.feature_names[c])) continue;
    Stats s = stats_of(column_of(au, int64_t(c)));
    push(s.mean);
    if (au.feature_names[c].find("au12") != std::string::npos) smile_rate = s.mean;
    if (au.feature_names[c].find("au04") != std::string::npos) frown_rate = s.mean;
  }
  push(smile_rate);
  push(frown_rate);

  const auto& gsr = series_or_throw(trial, Modality::gsr);
  int64_t phc = find_channel(gsr, "phasic");
  int64_t toc = find_channel(gsr, "tonic");
  std::vector<double> phasic_col = column_of(gsr, phc >= 0 ? phc : 0);
  std::vector<float> phasic_f(phasic_col.begin(), phasic_col.end());
  auto peaks = detect_scr_peaks(gsr.t, phasic_f);

  std::vector<double> amps, onsets, rises, recoveries;
  for (const auto& p : peaks) {
    amps.push_back(p.amplitude);
    onsets.push_back(p.onset_time);
    rises.push_back(p.rise_time);
    if (p.recovery_time >= 0) recoveries.push_back(p.recovery_time);
  }
  std::vector<double> onset_gaps;
  for (size_t i = 1; i < onsets.size(); ++i) onset_gaps.push_back(onsets[i] - onsets[i - 1]);

  Stats amp = stats_of(amps), gap = stats_of(onset_gaps), rise = stats_of(rises),
        rec = stats_of(recoveries);
  push(double(peaks.size()));
  push(amp.mean);
  push(amp.median);
  push(amp.min);
  push(amp.max);
  push(amp.stddev);
  push(gap.mean);
  push(gap.stddev);
  push(rise.mean);
  push(rise.stddev);
  push(rec.mean);
  push(rec.stddev);
  Stats ph = stats_of(phasic_col);
  push(ph.mean);
  push(ph.stddev);
  Stats to = stats_of(column_of(gsr, toc >= 0 ? toc : 0));
  push(to.mean);
  push(to.stddev);
  return out;
}

// --- labels & splits -----------------------------------------------------------

int bin_rating(int rating) {
  if (rating < 1 || rating > 9)
    throw ValueError("rating " + std::to_string(rating) + " outside the 9-point scale [1, 9]");
  return (rating - 1) / 3;
}

namespace {

int64_t round_half_up(double x) { return int64_t(std::floor(x + 0.5)); }

}  // namespace

std::map<std::string, SplitLabel> split_by_user(const std::vector<std::string>& user_ids,
                                                uint64_t seed) {
  std::vector<std::string> users = user_ids;
  std::sort(users.begin(), users.end());
  users.erase(std::unique(users.begin(), users.end()), users.end());
  if (users.size() < 3)
    throw ValueError("split_by_user needs at least 3 distinct users, got " +
                     std::to_string(users.size()));
  Rng rng(seed);
  rng.shuffle(users);
  int64_t u = int64_t(users.size());
  int64_t n_test = std::max<int64_t>(1, round_half_up(0.15 * double(u)));
  int64_t n_val = std::max<int64_t>(1, round_half_up(0.15 * double(u - n_test)));
  std::map<std::string, SplitLabel> out;
  for (int64_t i = 0; i < u; ++i) {
    SplitLabel label = i < n_test              ? SplitLabel::test
                       : i < n_test + n_val    ? SplitLabel::val
                                               : SplitLabel::train;
    out[users[size_t(i)]] = label;
  }
  return out;
}

DatasetSplit assign_split(const std::vector<ProcessedTrial>& trials, SplitMode mode,
                          uint64_t seed) {
  DatasetSplit split;
  if (mode == SplitMode::by_user) {
    std::vector<std::string> users;
    for (const auto& t : trials) users.push_back(t.user_id);
    auto labels = split_by_user(users, seed);
    for (size_t i = 0; i < trials.size(); ++i) {
      switch (labels.at(trials[i].user_id)) {
        case SplitLabel::train: split.train.push_back(i); break;
        case SplitLabel::val: split.val.push_back(i); break;
        case SplitLabel::test: split.test.push_back(i); break;
      }
    }
    return split;
  }

  // by_trial: the same 15%/15% rule inside each user's trial list.
  std::map<std::string, std::vector<size_t>> per_user;
  for (size_t i = 0; i < trials.size(); ++i) per_user[trials[i].user_id].push_back(i);
  Rng root(seed);
  int64_t user_idx = 0;
  for (auto& [user, idx] : per_user) {
    Rng rng = root.fork(uint64_t(0xbeef) + uint64_t(user_idx++));
    rng.shuffle(idx);
    int64_t n = int64_t(idx.size());
    if (n < 3) {
      for (size_t i : idx) split.train.push_back(i);
      continue;
    }
    int64_t n_test = std::max<int64_t>(1, round_half_up(0.15 * double(n)));
    int64_t n_val = std::max<int64_t>(1, round_half_up(0.15 * double(n - n_test)));
    for (int64_t i = 0; i < n; ++i) {
      if (i < n_test)
        split.test.push_back(idx[size_t(i)]);
      else if (i < n_test + n_val)
        split.val.push_back(idx[size_t(i)]);
      else
        split.train.push_back(idx[size_t(i)]);
    }
  }
  std::sort(split.train.begin(), split.train.end());
  std::sort(split.val.begin(), split.val.end());
  std::sort(split.test.begin(), split.test.end());
  return split;
}

// --- synthetic generator ---------------------------------------------------------

namespace {

struct UserProfile {
  std::string id;
  std::array<float, 5> personality;
  // Baseline offsets per named channel, a fixed linear map of personality.
  std::map<std::string, double> offsets;
};

// Channels receiving personality-driven baselines. Carrier channels (pupil
// level, phasic amplitude) get small offsets so class structure stays on top.
const std::vector<std::pair<std::string, double>> kOffsetChannels = {
    {"gaze_x", 0.6},  {"gaze_y", 0.6},  {"pupil", 0.15}, {"au01", 0.5}, {"au02", 0.5},
    {"au04", 0.5},    {"au06", 0.5},    {"au12", 0.5},   {"au15", 0.5}, {"au25", 0.5},
    {"au45", 0.5},    {"tonic", 0.6},   {"saccade", 0.4}};

std::vector<std::vector<double>> make_offset_matrix(Rng rng) {
  std::vector<std::vector<double>> w(kOffsetChannels.size(), std::vector<double>(5));
  for (auto& row : w)
    for (auto& v : row) v = rng.uniform(-0.5, 0.5);
  return w;
}

double offset_for(const UserProfile& u, const std::string& key) {
  auto it = u.offsets.find(key);
  return it == u.offsets.end() ? 0.0 : it->second;
}

std::string pad3(int64_t n) {
  char buf[8];
  std::snprintf(buf, sizeof(buf), "%03ld", long(n));
  return buf;
}

}  // namespace

void generate_synthetic(const std::string& dir, const SyntheticConfig& cfg) {
  if (cfg.n_users < 3) throw ValueError("synthetic generation needs at least 3 users");
  fs::create_directories(dir);

  Rng root(cfg.seed);
  auto offset_w = make_offset_matrix(root.fork(1));

  std::vector<UserProfile> users;
  Rng user_rng = root.fork(2);
  for (int64_t u = 0; u < cfg.n_users; ++u) {
    UserProfile prof;
    prof.id = "u" + pad3(u + 1);
    for (auto& p : prof.personality) p = float(user_rng.uniform(0.05, 0.95));
    for (size_t c = 0; c < kOffsetChannels.size(); ++c) {
      double dot = 0;
      for (int j = 0; j < 5; ++j)
        dot += offset_w[c][size_t(j)] * (double(prof.personality[size_t(j)]) - 0.5);
      prof.offsets[kOffsetChannels[c].first] = dot * kOffsetChannels[c].second;
    }
    users.push_back(std::move(prof));
  }

  CsvWriter manifest(dir + "/manifest.csv");
  manifest.write_row({"trial_id", "user_id", "stim_valence", "stim_arousal", "felt_valence",
                      "felt_arousal", "O", "C", "E", "A", "N", "form"});

  bool schema_written = false;
  int64_t trial_counter = 0;
  for (const auto& user : users) {
    for (int64_t k = 0; k < cfg.trials_per_user; ++k) {
      Rng rng = root.fork(1000 + uint64_t(trial_counter));
      ++trial_counter;
      std::string trial_id = user.id + "_t" + pad3(k + 1);

      double dur = rng.uniform(8.0, 12.0);
      int v_class = int(rng.uniform_int(3));
      int a_class = int(rng.uniform_int(3));
      int felt_v = 1 + 3 * v_class + int(rng.uniform_int(3));
      int felt_a = 1 + 3 * a_class + int(rng.uniform_int(3));
      auto stim_for = [&](int cls) {
        if (rng.uniform() < cfg.context_correlation)
          return (double(cls) + rng.uniform(0.15, 0.85)) / 3.0;
        return rng.uniform(0.0, 1.0);
      };
      double stim_v = stim_for(v_class);
      double stim_a = stim_for(a_class);

      TrialRecord trial;
      trial.trial_id = trial_id;
      trial.user_id = user.id;
      trial.personality = user.personality;
      trial.felt_valence = felt_v;
      trial.felt_arousal = felt_a;
      trial.stim_valence = float(stim_v);
      trial.stim_arousal = float(stim_a);

      double scenario_end = 0.4 * dur;
      double first_fix_time = rng.uniform(0.3, 0.9);

      // Eye @ 60 Hz: gaze wanders with valence-dependent dispersion.
      {
        RawModalitySeries s;
        s.feature_names = {"gaze_x", "gaze_y", "fixation", "fix_disp", "saccade_amp",
                           "blink", "first_fix", "scenario", "video"};
        double disp = 0.05 + 0.03 * v_class + std::fabs(rng.normal(0, 0.006));
        // fixation schedule
        std::vector<std::pair<double, double>> fixations;
        double tcur = first_fix_time;
        while (tcur < dur) {
          double len = std::max(0.1, rng.normal(0.35, 0.1));
          fixations.emplace_back(tcur, std::min(dur, tcur + len));
          tcur += len + std::max(0.03, rng.normal(0.08, 0.02));
        }
        std::vector<double> blink_times;
        double bt = rng.uniform(0.5, 3.0);
        while (bt < dur) {
          blink_times.push_back(bt);
          bt += rng.uniform(1.5, 5.0);
        }
        int64_t n = int64_t(dur * 60.0);
        for (int64_t i = 0; i < n; ++i) {
          double t = double(i) / 60.0;
          s.t.push_back(t);
          bool in_fix = false;
          for (auto& [a, b] : fixations)
            if (t >= a && t < b) { in_fix = true; break; }
          bool in_blink = false;
          for (double b : blink_times)
            if (t >= b && t < b + 0.12) { in_blink = true; break; }
          s.values.push_back(float(0.5 + offset_for(user, "gaze_x") + rng.normal(0, disp)));
          s.values.push_back(float(0.5 + offset_for(user, "gaze_y") + rng.normal(0, disp)));
          s.values.push_back(in_fix ? 1.0f : 0.0f);
          s.values.push_back(float(std::fabs(rng.normal(0, disp))));
          s.values.push_back(float(std::fabs(
              rng.normal(in_fix ? 0.02 : 0.15, 0.04) + offset_for(user, "saccade"))));
          s.values.push_back(in_blink ? 1.0f : 0.0f);
          s.values.push_back(t >= first_fix_time ? 1.0f : 0.0f);
          s.values.push_back(t < scenario_end ? 1.0f : 0.0f);
          s.values.push_back(t >= scenario_end ? 1.0f : 0.0f);
        }
        trial.series[Modality::eye] = std::move(s);
      }

      // Pupil @ 60 Hz: level is monotone in valence class.
      {
        RawModalitySeries s;
        s.feature_names = {"pupil_left", "pupil_right", "pupil_avg",
                           "first_fix", "scenario", "video"};
        double level = 3.0 + 0.30 * v_class + offset_for(user, "pupil") + rng.normal(0, 0.13);
        double phase = rng.uniform(0, 6.283);
        int64_t n = int64_t(dur * 60.0);
        for (int64_t i = 0; i < n; ++i) {
          double t = double(i) / 60.0;
          s.t.push_back(t);
          double base = level + 0.05 * std::sin(6.283 * t / 7.0 + phase) + rng.normal(0, 0.05);
          double dl = rng.normal(0, 0.02), dr = rng.normal(0, 0.02);
          s.values.push_back(float(base + dl));
          s.values.push_back(float(base + dr));
          s.values.push_back(float(base + 0.5 * (dl + dr)));
          s.values.push_back(t >= first_fix_time ? 1.0f : 0.0f);
          s.values.push_back(t < scenario_end ? 1.0f : 0.0f);
          s.values.push_back(t >= scenario_end ? 1.0f : 0.0f);
        }
        trial.series[Modality::pupil] = std::move(s);
      }

      // Facial AUs @ 40 Hz: smile/frown intensities carry mild valence signal.
      {
        RawModalitySeries s;
        const std::vector<std::string> au_names = {"au01", "au02", "au04", "au06",
                                                   "au12", "au15", "au25", "au45"};
        s.feature_names = au_names;
        for (const auto& a : au_names) s.feature_names.push_back(a + "_act");
        s.feature_names.push_back("confidence");
        s.feature_names.insert(s.feature_names.end(), {"first_fix", "scenario", "video"});
        std::vector<double> base(au_names.size());
        std::vector<double> phase(au_names.size());
        for (size_t a = 0; a < au_names.size(); ++a) {
          base[a] = std::max(0.02, 0.25 + offset_for(user, au_names[a]) + rng.normal(0, 0.03));
          phase[a] = rng.uniform(0, 6.283);
        }
        base[4] += 0.12 * v_class;        // au12 (smile)
        base[2] += 0.12 * (2 - v_class);  // au04 (frown)
        int64_t n = int64_t(dur * 40.0);
        for (int64_t i = 0; i < n; ++i) {
          double t = double(i) / 40.0;
          s.t.push_back(t);
          std::array<double, 8> inten;
          for (size_t a = 0; a < au_names.size(); ++a) {
            inten[a] = std::max(
                0.0, base[a] + 0.08 * std::sin(6.283 * t / 5.0 + phase[a]) + rng.normal(0, 0.08));
            s.values.push_back(float(inten[a]));
          }
          for (size_t a = 0; a < au_names.size(); ++a)
            s.values.push_back(inten[a] > 0.35 ? 1.0f : 0.0f);
          s.values.push_back(float(std::clamp(0.92 + rng.normal(0, 0.02), 0.0, 1.0)));
          s.values.push_back(t >= first_fix_time ? 1.0f : 0.0f);
          s.values.push_back(t < scenario_end ? 1.0f : 0.0f);
          s.values.push_back(t >= scenario_end ? 1.0f : 0.0f);
        }
        trial.series[Modality::au] = std::move(s);
      }

      // GSR @ 50 Hz: SCR peak amplitude is monotone in arousal class.
      {
        RawModalitySeries s;
        s.feature_names = {"gsr_raw", "gsr_calibrated", "phasic", "tonic",
                           "first_fix", "scenario", "video"};
        double amp_jit = rng.normal(0, 0.05);
        std::vector<std::pair<double, double>> scrs;  // (peak time, amplitude)
        double tp = 0.5 + rng.uniform(0, 1.5);
        int64_t n_peaks = 2 + int64_t(rng.uniform_int(2));
        for (int64_t p = 0; p < n_peaks && tp < dur - 1.0; ++p) {
          double amp = std::max(0.05, 0.15 + 0.20 * a_class + amp_jit + rng.normal(0, 0.03));
          scrs.emplace_back(tp, amp);
          tp += 1.3 + rng.uniform(0, 1.5);
        }
        double tonic0 = 2.0 + offset_for(user, "tonic");
        int64_t n = int64_t(dur * 50.0);
        for (int64_t i = 0; i < n; ++i) {
          double t = double(i) / 50.0;
          s.t.push_back(t);
          double tonic = tonic0 + 0.05 * std::sin(6.283 * t / 9.0);
          double phasic = 0;
          for (auto& [pt, amp] : scrs) {
            if (t >= pt - 0.6 && t <= pt)
              phasic += amp * (1.0 - (pt - t) / 0.6);
            else if (t > pt)
              phasic += amp * std::exp(-(t - pt) / 1.2);
          }
          phasic += rng.normal(0, 0.002);
          double raw = tonic + phasic + rng.normal(0, 0.01);
          s.values.push_back(float(raw));
          s.values.push_back(float((raw - 1.5) * 1.1));
          s.values.push_back(float(phasic));
          s.values.push_back(float(tonic));
          s.values.push_back(t >= first_fix_time ? 1.0f : 0.0f);
          s.values.push_back(t < scenario_end ? 1.0f : 0.0f);
          s.values.push_back(t >= scenario_end ? 1.0f : 0.0f);
        }
        trial.series[Modality::gsr] = std::move(s);
      }

      if (!schema_written) {
        auto schema = summary_schema_for(trial);
        CsvWriter sw(dir + "/summary_schema.csv");
        sw.write_row({"name"});
        for (const auto& name : schema) sw.write_row({name});
        sw.close();
        schema_written = true;
      }

      for (const auto& [m, s] : trial.series) {
        CsvWriter w(dir + "/" + trial_id + "_" + modality_name(m) + ".csv");
        std::vector<std::string> header = {"t"};
        header.insert(header.end(), s.feature_names.begin(), s.feature_names.end());
        w.write_row(header);
        std::vector<std::string> row(header.size());
        for (int64_t r = 0; r < s.rows(); ++r) {
          row[0] = format_float(s.t[size_t(r)]);
          for (int64_t c = 0; c < s.width(); ++c)
            row[size_t(c + 1)] = format_float(double(s.at(r, c)));
          w.write_row(row);
        }
        w.close();
      }

      manifest.write_row({trial_id, user.id, format_float(stim_v), format_float(stim_a),
                          std::to_string(felt_v), std::to_string(felt_a),
                          format_float(double(user.personality[0])),
                          format_float(double(user.personality[1])),
                          format_float(double(user.personality[2])),
                          format_float(double(user.personality[3])),
                          format_float(double(user.personality[4])), "raw"});
    }
  }
  manifest.close();
}

// --- dataset I/O -------------------------------------------------------------------

namespace {

const std::vector<std::string> kManifestHeader = {"trial_id",     "user_id",      "stim_valence",
                                                  "stim_arousal", "felt_valence", "felt_arousal",
                                                  "O",            "C",            "E",
                                                  "A",            "N",            "form"};

RawModalitySeries read_series_file(const std::string& path, bool raw_form) {
  CsvTable table = read_csv(path);
  RawModalitySeries s;
  size_t col0 = 0;
  bool has_t = !table.header.empty() && table.header[0] == "t";
  if (raw_form && !has_t)
    throw FormatError(path + ": raw-form series must start with a 't' column");
  if (has_t) col0 = 1;
  if (table.header.size() < col0 + 4)
    throw FormatError(path + ": expected feature columns plus first_fix,scenario,video flags");
  size_t ncols = table.header.size();
  if (table.header[ncols - 3] != "first_fix" || table.header[ncols - 2] != "scenario" ||
      table.header[ncols - 1] != "video")
    throw FormatError(path + ": trailing columns must be first_fix,scenario,video");
  s.feature_names.assign(table.header.begin() + int64_t(col0), table.header.end());
  int64_t width = int64_t(s.feature_names.size());
  s.values.reserve(table.rows.size() * size_t(width));
  double prev_t = -1e300;
  for (size_t r = 0; r < table.rows.size(); ++r) {
    double t = has_t ? parse_double(table, r, 0) : double(r);
    if (t < prev_t)
      throw FormatError(path + ": row " + std::to_string(r + 2) +
                        ": timestamps must be non-decreasing");
    prev_t = t;
    s.t.push_back(t);
    for (int64_t c = 0; c < width; ++c)
      s.values.push_back(float(parse_double(table, r, size_t(col0) + size_t(c))));
  }
  return s;
}

float parse_unit_interval(const CsvTable& table, size_t row, size_t col) {
  double v = parse_double(table, row, col);
  if (!(v >= 0.0 && v <= 1.0))
    throw FormatError(table.path + ": row " + std::to_string(row + 2) + ", column '" +
                      table.header[col] + "': " + table.rows[row][col] + " outside [0, 1]");
  return float(v);
}

}  // namespace

LoadResult load_dataset(const std::string& dir) {
  CsvTable manifest = read_csv(dir + "/manifest.csv");
  if (manifest.header != kManifestHeader) {
    std::string got;
    for (const auto& h : manifest.header) got += h + ",";
    throw FormatError(dir + "/manifest.csv: unexpected header '" + got + "'");
  }

  CsvTable schema_table = read_csv(dir + "/summary_schema.csv");
  if (schema_table.header != std::vector<std::string>{"name"})
    throw FormatError(dir + "/summary_schema.csv: header must be 'name'");
  LoadResult result;
  for (const auto& row : schema_table.rows) result.summary_schema.push_back(row[0]);

  std::set<std::string> seen_ids;
  for (size_t r = 0; r < manifest.rows.size(); ++r) {
    const std::string& trial_id = manifest.rows[r][0];
    if (!seen_ids.insert(trial_id).second)
      throw FormatError(dir + "/manifest.csv: duplicate trial_id '" + trial_id + "' at row " +
                        std::to_string(r + 2));
    int64_t felt_v = parse_int(manifest, r, 4);
    int64_t felt_a = parse_int(manifest, r, 5);
    for (auto [v, name] : {std::pair{felt_v, "felt_valence"}, std::pair{felt_a, "felt_arousal"}})
      if (v < 1 || v > 9)
        throw FormatError(dir + "/manifest.csv: row " + std::to_string(r + 2) + ", column '" +
                          name + "': rating " + std::to_string(v) + " outside [1, 9]");
    const std::string& form = manifest.rows[r][11];
    if (form != "raw" && form != "preprocessed")
      throw FormatError(dir + "/manifest.csv: row " + std::to_string(r + 2) +
                        ": form must be raw or preprocessed, got '" + form + "'");

    ProcessedTrial trial;
    trial.trial_id = trial_id;
    trial.user_id = manifest.rows[r][1];
    trial.stim_valence = parse_unit_interval(manifest, r, 2);
    trial.stim_arousal = parse_unit_interval(manifest, r, 3);
    trial.felt_valence = int(felt_v);
    trial.felt_arousal = int(felt_a);
    trial.valence_class = bin_rating(int(felt_v));
    trial.arousal_class = bin_rating(int(felt_a));
    for (int j = 0; j < 5; ++j)
      trial.personality[size_t(j)] = parse_unit_interval(manifest, r, size_t(6 + j));

    try {
      TrialRecord record;
      record.trial_id = trial_id;
      bool raw_form = form == "raw";
      for (Modality m : kAllModalities) {
        std::string path = dir + "/" + trial_id + "_" + modality_name(m) + ".csv";
        if (!fs::exists(path)) throw TrialReject(std::string("missing ") + path);
        record.series[m] = read_series_file(path, raw_form);
        if (record.series[m].rows() == 0) throw TrialReject(path + " has no samples");
      }

      if (raw_form) {
        for (Modality m : kAllModalities) {
          const auto& s = record.series[m];
          if (s.t.back() - s.t.front() < 2.0)
            throw TrialReject(std::string(modality_name(m)) + " series shorter than 2 s");
          trial.sequences[m] = resample_series(s);
          trial.widths[m] = s.width();
        }
        trial.summary = compute_trial_summary(record);
        if (trial.summary.size() != result.summary_schema.size())
          throw FormatError(dir + ": trial " + trial_id + " summary has " +
                            std::to_string(trial.summary.size()) + " features, schema has " +
                            std::to_string(result.summary_schema.size()));
      } else {
        for (Modality m : kAllModalities) {
          const auto& s = record.series[m];
          if (s.rows() != kTargetLen)
            throw FormatError(dir + ": " + trial_id + "_" + modality_name(m) + ".csv: " +
                              "preprocessed trials need exactly " + std::to_string(kTargetLen) +
                              " rows, got " + std::to_string(s.rows()));
          trial.sequences[m] = s.values;
          trial.widths[m] = s.width();
        }
        std::string spath = dir + "/" + trial_id + "_summary.csv";
        if (!fs::exists(spath)) throw TrialReject("missing " + spath);
        CsvTable st = read_csv(spath);
        if (st.header != result.summary_schema)
          throw FormatError(spath + ": header does not match summary_schema.csv");
        if (st.rows.size() != 1)
          throw FormatError(spath + ": expected exactly 1 data row, got " +
                            std::to_string(st.rows.size()));
        for (size_t c = 0; c < st.header.size(); ++c)
          trial.summary.push_back(float(parse_double(st, 0, c)));
      }

      for (const auto& [m, s] : record.series) {
        auto it = result.channel_names.find(m);
        if (it == result.channel_names.end()) {
          result.channel_names[m] = s.feature_names;
          result.modality_widths[m] = s.width();
        } else if (it->second != s.feature_names) {
          throw FormatError(dir + ": trial " + trial_id + " has different " + modality_name(m) +
                            " channels than earlier trials");
        }
      }
      result.trials.push_back(std::move(trial));
    } catch (const TrialReject& e) {
      result.rejected.emplace_back(trial_id, e.what());
    }
  }
  return result;
}

void write_preprocessed(const std::string& dir, const LoadResult& data) {
  fs::create_directories(dir);
  {
    CsvWriter sw(dir + "/summary_schema.csv");
    sw.write_row({"name"});
    for (const auto& name : data.summary_schema) sw.write_row({name});
    sw.close();
  }
  CsvWriter manifest(dir + "/manifest.csv");
  manifest.write_row(kManifestHeader);
  for (const auto& t : data.trials) {
    manifest.write_row({t.trial_id, t.user_id, format_float(double(t.stim_valence)),
                        format_float(double(t.stim_arousal)),
                        std::to_string(t.felt_valence), std::to_string(t.felt_arousal),
                        format_float(double(t.personality[0])),
                        format_float(double(t.personality[1])),
                        format_float(double(t.personality[2])),
                        format_float(double(t.personality[3])),
                        format_float(double(t.personality[4])), "preprocessed"});
    for (const auto& [m, seq] : t.sequences) {
      const auto& names = data.channel_names.at(m);
      int64_t w = int64_t(names.size());
      CsvWriter sw(dir + "/" + t.trial_id + "_" + modality_name(m) + ".csv");
      sw.write_row(names);
      std::vector<std::string> row(names.size());
      for (int64_t r = 0; r < kTargetLen; ++r) {
        for (int64_t c = 0; c < w; ++c) row[size_t(c)] = format_float(double(seq[size_t(r * w + c)]));
        sw.write_row(row);
      }
      sw.close();
    }
    CsvWriter sw(dir + "/" + t.trial_id + "_summary.csv");
    sw.write_row(data.summary_schema);
    std::vector<std::string> row(t.summary.size());
    for (size_t c = 0; c < t.summary.size(); ++c) row[c] = format_float(double(t.summary[c]));
    sw.write_row(row);
    sw.close();
  }
  manifest.close();
}

void mask_disabled_modalities(ProcessedTrial& trial, const std::vector<std::string>& schema,
                              const std::set<Modality>& enabled) {
  for (Modality m : kAllModalities) {
    if (enabled.count(m)) continue;
    trial.sequences.erase(m);
    for (size_t i = 0; i < schema.size(); ++i) {
      const std::string& name = schema[i];
      size_t us = name.find('_');
      if (us != std::string::npos && name.substr(0, us) == modality_name(m) &&
          i < trial.summary.size())
        trial.summary[i] = 0.0f;
    }
  }
}

}  // namespace mumt
