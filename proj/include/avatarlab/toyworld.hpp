#pragma once

#include "avatarlab/common.hpp"
#include "avatarlab/multistream.hpp"

#include <nlohmann/json_fwd.hpp>

#include <array>
#include <optional>
#include <string>
#include <vector>

namespace avatarlab {

// Channel roles within one person's span, plus the global camera channel.
enum class Role : int { pos_x = 0, pos_y, mouth, limb, id_a, id_b, camera };
inline constexpr int kNumRoles = 7;
inline constexpr int kPersonChannels = 6;

enum class TextClass : int {
  idle = 0,
  talk,
  walk_left,
  walk_right,
  wave,
  zoom_in,
  bg_shift,
};
inline constexpr int kNumClasses = 7;
// Distinguished null text condition (c_un-text); row index in the embedding table.
inline constexpr int kNullTextId = kNumClasses;

const char* to_string(TextClass c);
TextClass text_class_from_string(const std::string& s);

struct WorldSpec {
  int persons = 1;
  int frame_rate = 25;

  int frame_dim() const { return kPersonChannels * persons + 1; }
  int camera_channel() const { return kPersonChannels * persons; }
  int channel(int person, Role r) const;
  Role role_of_channel(int f) const;
  int person_of_channel(int f) const;  // -1 for the camera channel

  void validate() const;
};

// Per-person audio envelopes in [0, 1], one row per person, one column per frame.
struct AudioSet {
  Mat streams;  // persons × T

  int persons() const { return static_cast<int>(streams.rows()); }
  int frames() const { return static_cast<int>(streams.cols()); }
  static AudioSet silent(int persons, int frames) {
    return {Mat::Zero(persons, frames)};
  }
};

struct Clip {
  Mat data;  // T × F
  std::vector<int> chunk_boundaries;

  int frames() const { return static_cast<int>(data.rows()); }
  int channels() const { return static_cast<int>(data.cols()); }
  void validate() const;
};

struct ClassDistribution {
  std::array<double, kNumClasses> weights{};

  void validate() const;
  TextClass sample(Rng& rng) const;

  static ClassDistribution uniform();
  // 0.45 idle / 0.45 talk / 0.10 spread over the remaining five classes.
  static ClassDistribution biased_default();
  static ClassDistribution point_mass(TextClass c);
};

// Ground-truth generator constants. Frozen here so tests and metrics can rely
// on the exact geometry.
namespace worldgen {
inline constexpr double kWalkVelocity = 0.05;      // per frame
inline constexpr double kDriftStep = 0.005;        // max |pos step| for non-walk classes
inline constexpr double kGaitAmplitude = 0.06;     // vertical bounce while walking
inline constexpr double kGaitFreq = 1.0 / 6.0;     // cycles per frame
inline constexpr double kTalkLimbAmplitude = 0.18;
inline constexpr double kTalkLimbFreq = 0.25;
inline constexpr double kWaveLimbAmplitude = 0.5;
inline constexpr double kWaveLimbFreq = 0.125;
inline constexpr double kZoomRate = 0.04;          // camera units per frame
inline constexpr double kBgShiftDrop = 1.2;        // camera step height at T/2
inline constexpr double kLimbNoise = 0.01;
inline constexpr double kCameraNoise = 0.005;
}  // namespace worldgen

AudioSet make_audio(int frames, int persons, uint64_t seed);

Clip sample_clip(const WorldSpec& spec, TextClass cls, const AudioSet& audio, uint64_t seed);

struct LabeledClip {
  Clip clip;
  TextClass label = TextClass::idle;
  std::optional<AudioSet> audio;  // absent for foundation-style data
  uint64_t seed = 0;
};

struct Dataset {
  WorldSpec spec;
  int t_frames = 0;
  bool with_audio = true;
  uint64_t seed = 0;
  std::vector<LabeledClip> clips;

  // Audio condition a loader hands out: the stored streams, or silence
  // (c_un-audio) for foundation-style data.
  AudioSet audio_for(size_t i) const;

  void save(const std::filesystem::path& prefix) const;
  static Dataset load(const std::filesystem::path& prefix);
};

Dataset sample_dataset(const WorldSpec& spec, const ClassDistribution& dist, int n_clips,
                       int t_frames, bool with_audio, uint64_t seed);

MaskSet person_masks(const WorldSpec& spec);

}  // namespace avatarlab
