#pragma once

#include "avatarlab/training.hpp"

#include <map>

namespace avatarlab {

struct DataGenConfig {
  int n_clips = 600;
  uint64_t seed = 11;
  ClassDistribution dist = ClassDistribution::biased_default();
};

struct PretrainPhaseConfig {
  int steps = 1500;
  int batch = 8;
  double lr = 2e-3;
  uint64_t seed = 21;
};

struct EvalConfig {
  int probe_clips_per_class = 24;
  uint64_t probe_seed = 41;
  int n_clips = 64;
  uint64_t seed = 42;
  int euler_steps = 30;
};

// Everything that determines a run. Round-trips losslessly through JSON;
// unknown keys are rejected.
struct RunConfig {
  int version = 1;
  std::string output_dir = "runs/default";
  WorldSpec world;
  DenoiserConfig model;
  int t_frames = 42;
  DataGenConfig biased;
  DataGenConfig uniform;
  FlowGeometry geometry;
  PretrainPhaseConfig stage1;
  PretrainPhaseConfig stage2;
  PretrainPhaseConfig text_teacher;
  DistillConfig distill;
  GuidanceConfig guidance;
  ChunkPlan chunk_plan;
  StudentConfig student;
  EvalConfig eval;

  void validate() const;
  nlohmann::json to_json() const;
  static RunConfig from_json(const nlohmann::json& j);
  static RunConfig defaults();
};

RunConfig load_run_config(const std::filesystem::path& p);
uint64_t config_hash(const RunConfig& cfg);

struct RunManifest {
  uint64_t config_hash = 0;
  std::string command;
  std::map<std::string, std::string> artifacts;  // name -> existing path
  std::vector<std::string> metrics_files;
  double wall_clock_s = 0.0;
  std::vector<uint64_t> seeds;

  nlohmann::json to_json() const;
  void write(const std::filesystem::path& p) const;  // atomic, checks referenced files
};

}  // namespace avatarlab
