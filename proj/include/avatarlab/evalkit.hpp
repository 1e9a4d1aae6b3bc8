#pragma once

#include "avatarlab/toyworld.hpp"

#include <nlohmann/json_fwd.hpp>

#include <span>

namespace avatarlab {

// Pairwise-preference aggregate: (G + S) / (B + S).
double gsb_score(long long good, long long same, long long bad);

enum class GsbDimension : int { overall = 0, text_alignment, lip_sync, identity, visual };
inline constexpr int kNumGsbDimensions = 5;
const char* to_string(GsbDimension d);
GsbDimension gsb_dimension_from_string(const std::string& s);

struct GSBRecord {
  GsbDimension dimension = GsbDimension::overall;
  long long good = 0;
  long long same = 0;
  long long bad = 0;
};

std::vector<GSBRecord> parse_gsb_csv(const std::string& text);
nlohmann::json gsb_summary(std::span<const GSBRecord> records);

// Pearson correlation of each person's mouth channel against their audio
// stream; 0 by convention when either signal is constant.
Vec sync_corr(const Clip& clip, const AudioSet& audio, const WorldSpec& spec);

// Class-discriminating clip features: OLS slopes of pos_x / pos_y / camera
// and the dominant limb frequency (variance-gated, cycles per frame).
struct ProbeFeatures {
  double slope_x = 0.0;
  double slope_y = 0.0;
  double slope_cam = 0.0;
  double limb_peak = 0.0;
};

ProbeFeatures probe_features(const Clip& clip, const WorldSpec& spec);

// Nearest-centroid classifier on standardized probe features (a linear probe).
struct LinearProbe {
  Mat centroids;  // kNumClasses × 4
  RowVec mu;      // 4
  RowVec sd;      // 4

  TextClass predict(const ProbeFeatures& f) const;
  TextClass predict(const Clip& clip, const WorldSpec& spec) const;
};

LinearProbe fit_probe(const WorldSpec& spec, int t_frames, int clips_per_class, uint64_t seed);

double text_align_score(const LinearProbe& probe, std::span<const Clip> clips,
                        std::span<const TextClass> labels, const WorldSpec& spec);

// Mean cosine similarity between each frame's identity channels and the
// reference frame's, averaged over persons.
double identity_consistency(const Clip& clip, const RowVec& ref_frame, const WorldSpec& spec);

// Variance of first differences over pos and limb channels, averaged.
double motion_variance(const Clip& clip, const WorldSpec& spec);

// Max boundary jump over the 95th percentile of within-chunk one-step deltas.
double boundary_smoothness(const Clip& clip);

struct MetricReport {
  std::vector<double> sync_corr;
  double text_align = 0.0;
  double idc = 0.0;
  double motion_var = 0.0;
  double boundary_ratio = 0.0;

  nlohmann::json to_json() const;
  static std::string csv_header();
  std::string csv_row(const std::string& clip_id) const;
};

}  // namespace avatarlab
