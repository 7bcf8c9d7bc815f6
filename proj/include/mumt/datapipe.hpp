#pragma once

#include <array>
#include <map>
#include <string>
#include <vector>

#include "mumt/model.hpp"

// Dataset ingestion and preprocessing: resampling to 400 fixed timepoints,
// trial-level summary features, label binning, user-disjoint (or within-user
// trial-level) splits, and a synthetic generator with planted structure.
//
// Dataset directory format:
//   manifest.csv          trial_id,user_id,stim_valence,stim_arousal,
//                         felt_valence,felt_arousal,O,C,E,A,N,form
//   <trial>_<mod>.csv     t (raw form), named feature columns, then flags
//                         first_fix,scenario,video
//   <trial>_summary.csv   (preprocessed form) one row in schema order
//   summary_schema.csv    ordered summary feature names (defines S)

namespace mumt {

constexpr int64_t kTargetLen = 400;

// A trial whose signals could not be ingested; the loader logs and skips it.
class TrialReject : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

enum class ChannelKind { numeric, categorical };

struct RawModalitySeries {
  std::vector<std::string> feature_names;  // includes the 3 trailing flag columns
  std::vector<double> t;                   // seconds, strictly increasing
  std::vector<float> values;               // row-major [n x width]
  int64_t rows() const { return int64_t(t.size()); }
  int64_t width() const { return int64_t(feature_names.size()); }
  float at(int64_t row, int64_t col) const { return values[size_t(row * width() + col)]; }
};

struct TrialRecord {
  std::string trial_id;
  std::string user_id;
  float stim_valence = 0, stim_arousal = 0;   // [0, 1]
  int felt_valence = 0, felt_arousal = 0;     // 1..9
  std::array<float, 5> personality{};         // O,C,E,A,N in [0, 1]
  std::map<Modality, RawModalitySeries> series;
};

struct ProcessedTrial {
  std::string trial_id;
  std::string user_id;
  std::map<Modality, std::vector<float>> sequences;  // row-major [400 x width]
  std::map<Modality, int64_t> widths;
  std::vector<float> summary;
  int felt_valence = 0, felt_arousal = 0;    // 1..9
  int valence_class = 0, arousal_class = 0;  // 0|1|2
  std::array<float, 5> personality{};
  float stim_valence = 0, stim_arousal = 0;
};

// --- resampling ------------------------------------------------------------

// Numeric channels: linear interpolation at target_len uniformly spaced times
// over [t_first, t_last]. Categorical channels: the nearest sample at or after
// the target time (so a late flag transition is visible at the step that
// crosses it). NaN samples are dropped before interpolation; a consecutive
// NaN run longer than 25% of the series rejects the trial.
std::vector<float> resample_channel(const std::vector<double>& t, const std::vector<float>& v,
                                    ChannelKind kind, int64_t target_len = kTargetLen);

// Whole-series resampling; flags are always categorical, feature channels are
// categorical when every raw value is 0/1.
std::vector<float> resample_series(const RawModalitySeries& series, int64_t target_len = kTargetLen);

// --- summary features --------------------------------------------------------

// Ordered summary feature names for a trial's channel layout. Names carry the
// owning modality as their first underscore-delimited token, which is what
// the ablation masking keys on.
std::vector<std::string> summary_schema_for(const TrialRecord& trial);

std::vector<float> compute_trial_summary(const TrialRecord& trial);

struct ScrPeak {
  double t_peak = 0;
  double amplitude = 0;
  double onset_time = 0;
  double rise_time = 0;
  double recovery_time = -1;  // <0 when no half-recovery within the trial
};

// Local maxima of the phasic channel above 0.01 with >= 1 s separation.
std::vector<ScrPeak> detect_scr_peaks(const std::vector<double>& t, const std::vector<float>& phasic);

// --- labels & splits ---------------------------------------------------------

// 9-point rating to 3 equal-width bins: 1-3 -> 0, 4-6 -> 1, 7-9 -> 2.
int bin_rating(int rating);

enum class SplitLabel { train, val, test };
enum class SplitMode { by_user, by_trial };

// Deterministic user partition: round(0.15 U) test users (min 1), then
// round(0.15 of the rest) validation (min 1), remainder train.
std::map<std::string, SplitLabel> split_by_user(const std::vector<std::string>& user_ids,
                                                uint64_t seed);

struct DatasetSplit {
  std::vector<size_t> train, val, test;  // indices into the trial vector
};

// by_user: user-disjoint partition (the paper's protocol). by_trial: the same
// 15%/15% rule applied within each user's trials, for held-out-trials-of-seen-
// users evaluation.
DatasetSplit assign_split(const std::vector<ProcessedTrial>& trials, SplitMode mode,
                          uint64_t seed);

// --- synthetic data ----------------------------------------------------------

struct SyntheticConfig {
  int64_t n_users = 8;
  int64_t trials_per_user = 40;
  uint64_t seed = 42;
  double context_correlation = 0.7;  // P(stim emo reflects the true class)
};

// Generates a raw-form dataset directory. Planted structure: GSR phasic peak
// amplitude is monotone in arousal class; pupil level and gaze dispersion are
// monotone in valence class; per-user channel baselines are a fixed linear
// function of the user's personality vector; stim emo matches the labels at
// the configured rate.
void generate_synthetic(const std::string& dir, const SyntheticConfig& cfg);

// --- dataset I/O -------------------------------------------------------------

struct LoadResult {
  std::vector<ProcessedTrial> trials;
  std::vector<std::string> summary_schema;
  std::map<Modality, int64_t> modality_widths;
  std::map<Modality, std::vector<std::string>> channel_names;
  std::vector<std::pair<std::string, std::string>> rejected;  // (trial_id, reason)
};

LoadResult load_dataset(const std::string& dir);

// Writes trials back out in preprocessed form (400-row sequences + per-trial
// summary files).
void write_preprocessed(const std::string& dir, const LoadResult& data);

// Zero out summary slots and drop sequences of modalities outside `enabled`.
void mask_disabled_modalities(ProcessedTrial& trial, const std::vector<std::string>& schema,
                              const std::set<Modality>& enabled);

}  // namespace mumt
