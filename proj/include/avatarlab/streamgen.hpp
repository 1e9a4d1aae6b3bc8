#pragma once

#include "avatarlab/denoiser.hpp"
#include "avatarlab/guidance.hpp"

namespace avatarlab {

struct ChunkPlan {
  int motion_frames = 9;   // noise-free context frames carried between chunks
  int new_frames = 76;     // frames produced and kept per pass
  int pseudo_offset = 10;  // position bump of the pseudo last frame (3 for trivial prompts)
  // Upstream latent accounting constant; kept for traceability, unused here.
  static constexpr int kPaperChunkLen = 80;

  void validate() const;
  nlohmann::json to_json() const;
  static ChunkPlan from_json(const nlohmann::json& j);
};

struct ChunkWindow {
  int begin = 0;
  int end = 0;
  int length() const { return end - begin; }
  bool operator==(const ChunkWindow&) const = default;
};

std::vector<ChunkWindow> plan_chunks(int total_frames, const ChunkPlan& plan);

// One denoising pass input: M noise-free motion rows, N noisy rows, one
// noise-free pseudo row at an offset position.
struct AssembledInput {
  Mat seq;  // (M + N + 1) × F
  TokenLayout layout;
  int motion = 0;
  int fresh = 0;

  int pseudo_row() const { return motion + fresh; }
};

AssembledInput assemble_chunk_input(const Mat& motion, const RowVec& pseudo_frame,
                                    const ChunkPlan& plan, int chunk_index, int gap_override = -1);

struct PromptSchedule {
  std::vector<TextClass> fragments;
  std::vector<ChunkWindow> windows;  // frame intervals, partition of [0, total)

  int total_frames() const { return windows.empty() ? 0 : windows.back().end; }
  TextClass fragment_at(int frame) const;
};

inline constexpr double kSecondsPerFragment = 3.24;
inline constexpr int kMaxFragments = 5;

PromptSchedule schedule_prompts(double duration_s, const std::vector<TextClass>& fragments,
                                int frame_rate);

// Flow utilities restricted to the noisy rows of an assembled input.
Mat x0_on_noisy(const Mat& x, double tau, const Mat& v, const TokenLayout& layout);
Mat renoise_on_noisy(const Mat& x0, double tau, const Mat& eps, const TokenLayout& layout);

// Noise-free tokens carry the envelope their content shows (the mouth channel
// value), matching how training sequences are conditioned.
void align_context_envelopes(Mat& env, const Mat& seq, const TokenLayout& layout,
                             const WorldSpec& spec);

// Multi-step Euler sampler along the flow path. Noisy rows start at pure
// noise and integrate from tau=1000 to 0; noise-free rows are held fixed.
// When guidance is supplied, every evaluation uses the vanilla composition at
// the schedule's scales for the current timestep.
Mat euler_flow_sample(const Denoiser& model, AssembledInput input, const CondSet& cond,
                      int n_steps, Rng& rng, const GuidanceConfig* guidance = nullptr);

struct StudentConfig {
  std::vector<double> step_grid{1000.0, 750.0, 500.0, 250.0};

  void validate() const;
  nlohmann::json to_json() const;
  static StudentConfig from_json(const nlohmann::json& j);
};

// Few-step rollout: x0 at grid[0], renoise to grid[1], and so on. Returns the
// final x0 estimate in place of the noisy rows.
Mat student_rollout(const Denoiser& student, AssembledInput input, const CondSet& cond,
                    const StudentConfig& grid, Rng& rng, const GuidanceConfig* guidance = nullptr);

// Single conditioned window around a reference frame (first-chunk assembly).
// euler_steps > 0 selects the multi-step sampler, otherwise the student grid.
Clip generate_window(const Denoiser& model, const RowVec& ref_frame, TextClass cls,
                     const AudioSet& audio, const ChunkPlan& plan, int euler_steps,
                     const StudentConfig& grid, uint64_t seed,
                     const GuidanceConfig* guidance = nullptr);

// Per-chunk inputs as seen by the model, for continuity checks.
struct StreamTrace {
  std::vector<Mat> chunk_motion;
  std::vector<TokenLayout> layouts;
};

// Chunked long-horizon generation with motion-frame carryover.
Clip generate_stream(const Denoiser& student, const RowVec& ref_frame, const AudioSet& audio,
                     const PromptSchedule& schedule, const ChunkPlan& plan,
                     const StudentConfig& grid, uint64_t seed, bool guidance_off = true,
                     const GuidanceConfig* guidance = nullptr, StreamTrace* trace = nullptr);

nlohmann::json stream_sidecar(const PromptSchedule& schedule, const ChunkPlan& plan,
                              const Clip& clip, uint64_t seed, const RowVec& ref_frame);

}  // namespace avatarlab
