#pragma once

#include "avatarlab/evalkit.hpp"
#include "avatarlab/streamgen.hpp"

#include <set>

namespace avatarlab {

struct OptConfig {
  AdamConfig adam;
  int batch = 8;
  int steps = 1000;
  uint64_t seed = 0;
  // Empty means "use the stage defaults"; otherwise an explicit group set.
  std::set<std::string> trainable;
};

// Geometry of a training sequence carved from a dataset clip: M noise-free
// motion frames, N noisy frames, and a noise-free pseudo frame sampled at a
// random gap past the window end (its true frame, at its true index).
struct FlowGeometry {
  int motion_frames = 9;
  int new_frames = 20;
  int max_gap = 12;

  int window() const { return motion_frames + new_frames; }
  int required_clip_frames() const { return window() + max_gap + 1; }
  void validate() const;
};

struct FlowBatch {
  std::vector<BatchSample> samples;  // noisy = x_tau with clean context rows
  std::vector<Mat> targets;          // v* = eps - x0 (read on noisy rows only)
};

FlowBatch make_flow_batch(const Dataset& data, const FlowGeometry& geom,
                          std::span<const size_t> clip_indices, Rng& rng,
                          bool force_unaudio = false);

// Mean squared velocity error over noisy frames only, averaged over samples.
double flow_match_loss(const Denoiser& model, const FlowBatch& batch);
std::pair<double, ParamStore> flow_match_grad(const Denoiser& model, const FlowBatch& batch);

struct PretrainResult {
  std::vector<double> loss_history;
};

// Stage 1 trains the trunk with the null audio condition everywhere (the
// model must not have an audio pathway yet); stage 2 inserts the audio
// cross-attention layer and trains only it.
PretrainResult pretrain_stage(Denoiser& model, const Dataset& data, int stage,
                              const OptConfig& opt, const FlowGeometry& geom,
                              bool freeze_text_proj = false);

// x0 estimate of the few-step generator at a grid step.
Mat generator_step(const Denoiser& student, const StudentConfig& grid, const Mat& z, double t,
                   const CondSet& cond, const TokenLayout& layout);

// (1 - sigma(tau)) * x0 + sigma(tau) * eps.
Mat renoise(const Mat& x0, double tau, const Mat& eps);

// Pseudo-loss whose gradient with respect to x0_gen is w * (x0_fake - x0_real)
// with w = 1 / (mean|x0_real - x0_gen| + eps). Returns {pseudo_loss, d_x0_gen}.
std::pair<double, Mat> dmd_generator_grad(const Mat& x0_gen, const Mat& x0_real,
                                          const Mat& x0_fake, double eps);

struct DistillConfig {
  int phase_a_steps = 250;  // twin-teacher composition, dynamic CFG
  int phase_b_steps = 150;  // vanilla composition follow-up round
  int fake_updates_per_gen = 5;
  double dmd_weight_eps = 1e-3;
  double tau_min = 20.0;
  double tau_max = 980.0;
  int batch = 4;
  double lr_generator = 5e-4;
  double lr_fake = 1e-3;
  int eval_interval = 25;
  int eval_clips = 21;
  uint64_t seed = 0;
  bool dynamic_cfg_phase_a = true;
  bool dynamic_cfg_phase_b = false;
  ClassDistribution cond_classes = ClassDistribution::uniform();
  std::set<std::string> student_trainable = {groups::kAudioCrossAttn, groups::kSelfAttn,
                                             groups::kTextProj};

  void validate() const;
};

struct MetricRow {
  int step = 0;
  std::string phase;
  double loss_fake = 0.0;
  double pseudo_loss = 0.0;
  double sync_corr_eval = 0.0;
  double text_align_eval = 0.0;
  uint64_t seed = 0;
};

std::string metrics_csv(std::span<const MetricRow> rows);

struct DistillResult {
  Denoiser student;
  std::vector<MetricRow> rows;
};

// One flow-matching step fitting the fake model to detached generator
// samples; returns the step's loss.
double fake_score_update(Denoiser& fake, Adam& fake_adam, std::span<const BatchSample> samples,
                         std::span<const Mat> x0_samples, const AdamConfig& adam_cfg, Rng& rng,
                         double tau_min, double tau_max);

// Full post-training run: phase A (twin-teacher, Eq.-2-style real score with
// the dynamic schedule) followed by phase B (vanilla real score). eps_text may
// be null when phase_a_steps == 0.
DistillResult distill_run(const Denoiser& eps_audio, const Denoiser* eps_text,
                          const Denoiser& student_init, const GuidanceConfig& gcfg,
                          const DistillConfig& dcfg, const StudentConfig& grid,
                          const ChunkPlan& plan, const LinearProbe& probe);

}  // namespace avatarlab
