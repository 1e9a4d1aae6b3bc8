#include "avatarlab/runconfig.hpp"

#include <nlohmann/json.hpp>

#include <set>

namespace avatarlab {

using nlohmann::json;
namespace fs = std::filesystem;

namespace {

void check_keys(const json& j, const std::set<std::string>& allowed, const std::string& where) {
  if (!j.is_object()) throw ConfigError("config: expected an object at " + where);
  for (const auto& [key, value] : j.items()) {
    if (!allowed.count(key)) throw ConfigError("config: unknown key '" + key + "' in " + where);
  }
}

json dist_to_json(const ClassDistribution& d) {
  json weights = json::array();
  for (double w : d.weights) weights.push_back(w);
  return weights;
}

ClassDistribution dist_from_json(const json& j, const std::string& where) {
  if (!j.is_array() || j.size() != kNumClasses)
    throw ConfigError("config: " + where + " must be an array of " + std::to_string(kNumClasses) +
                      " weights");
  ClassDistribution d;
  for (int i = 0; i < kNumClasses; ++i) d.weights[static_cast<size_t>(i)] = j[i].get<double>();
  d.validate();
  return d;
}

json datagen_to_json(const DataGenConfig& c) {
  return json{{"n_clips", c.n_clips}, {"seed", c.seed}, {"class_weights", dist_to_json(c.dist)}};
}

DataGenConfig datagen_from_json(const json& j, const std::string& where) {
  check_keys(j, {"n_clips", "seed", "class_weights"}, where);
  DataGenConfig c;
  c.n_clips = j.at("n_clips").get<int>();
  c.seed = j.at("seed").get<uint64_t>();
  c.dist = dist_from_json(j.at("class_weights"), where + ".class_weights");
  return c;
}

json phase_to_json(const PretrainPhaseConfig& c) {
  return json{{"steps", c.steps}, {"batch", c.batch}, {"lr", c.lr}, {"seed", c.seed}};
}

PretrainPhaseConfig phase_from_json(const json& j, const std::string& where) {
  check_keys(j, {"steps", "batch", "lr", "seed"}, where);
  PretrainPhaseConfig c;
  c.steps = j.at("steps").get<int>();
  c.batch = j.at("batch").get<int>();
  c.lr = j.at("lr").get<double>();
  c.seed = j.at("seed").get<uint64_t>();
  return c;
}

json distill_to_json(const DistillConfig& c) {
  return json{{"phase_a_steps", c.phase_a_steps},
              {"phase_b_steps", c.phase_b_steps},
              {"fake_updates_per_gen", c.fake_updates_per_gen},
              {"dmd_weight_eps", c.dmd_weight_eps},
              {"tau_min", c.tau_min},
              {"tau_max", c.tau_max},
              {"batch", c.batch},
              {"lr_generator", c.lr_generator},
              {"lr_fake", c.lr_fake},
              {"eval_interval", c.eval_interval},
              {"eval_clips", c.eval_clips},
              {"seed", c.seed},
              {"dynamic_cfg_phase_a", c.dynamic_cfg_phase_a},
              {"dynamic_cfg_phase_b", c.dynamic_cfg_phase_b},
              {"cond_class_weights", dist_to_json(c.cond_classes)}};
}

DistillConfig distill_from_json(const json& j) {
  check_keys(j,
             {"phase_a_steps", "phase_b_steps", "fake_updates_per_gen", "dmd_weight_eps",
              "tau_min", "tau_max", "batch", "lr_generator", "lr_fake", "eval_interval",
              "eval_clips", "seed", "dynamic_cfg_phase_a", "dynamic_cfg_phase_b",
              "cond_class_weights"},
             "distill");
  DistillConfig c;
  c.phase_a_steps = j.at("phase_a_steps").get<int>();
  c.phase_b_steps = j.at("phase_b_steps").get<int>();
  c.fake_updates_per_gen = j.at("fake_updates_per_gen").get<int>();
  c.dmd_weight_eps = j.at("dmd_weight_eps").get<double>();
  c.tau_min = j.at("tau_min").get<double>();
  c.tau_max = j.at("tau_max").get<double>();
  c.batch = j.at("batch").get<int>();
  c.lr_generator = j.at("lr_generator").get<double>();
  c.lr_fake = j.at("lr_fake").get<double>();
  c.eval_interval = j.at("eval_interval").get<int>();
  c.eval_clips = j.at("eval_clips").get<int>();
  c.seed = j.at("seed").get<uint64_t>();
  c.dynamic_cfg_phase_a = j.at("dynamic_cfg_phase_a").get<bool>();
  c.dynamic_cfg_phase_b = j.at("dynamic_cfg_phase_b").get<bool>();
  c.cond_classes = dist_from_json(j.at("cond_class_weights"), "distill.cond_class_weights");
  c.validate();
  return c;
}

json eval_to_json(const EvalConfig& c) {
  return json{{"probe_clips_per_class", c.probe_clips_per_class},
              {"probe_seed", c.probe_seed},
              {"n_clips", c.n_clips},
              {"seed", c.seed},
              {"euler_steps", c.euler_steps}};
}

EvalConfig eval_from_json(const json& j) {
  check_keys(j, {"probe_clips_per_class", "probe_seed", "n_clips", "seed", "euler_steps"}, "eval");
  EvalConfig c;
  c.probe_clips_per_class = j.at("probe_clips_per_class").get<int>();
  c.probe_seed = j.at("probe_seed").get<uint64_t>();
  c.n_clips = j.at("n_clips").get<int>();
  c.seed = j.at("seed").get<uint64_t>();
  c.euler_steps = j.at("euler_steps").get<int>();
  return c;
}

}  // namespace

void RunConfig::validate() const {
  if (version != 1) throw ConfigError("config: unsupported version " + std::to_string(version));
  world.validate();
  model.validate();
  if (model.persons != world.persons)
    throw ConfigError("config: model.persons must match world.persons");
  geometry.validate();
  if (t_frames < geometry.required_clip_frames())
    throw ConfigError("config: t_frames too short for the training geometry");
  chunk_plan.validate();
  if (chunk_plan.motion_frames != geometry.motion_frames ||
      chunk_plan.new_frames != geometry.new_frames)
    throw ConfigError("config: chunk_plan window must match the training geometry");
  if (geometry.max_gap < chunk_plan.pseudo_offset)
    throw ConfigError("config: geometry.max_gap must cover chunk_plan.pseudo_offset");
  distill.validate();
  guidance.validate();
  student.validate();
  if (output_dir.empty()) throw ConfigError("config: output_dir must be set");
  if (biased.n_clips < 1 || uniform.n_clips < 1) throw ConfigError("config: n_clips must be >= 1");
}

json RunConfig::to_json() const {
  return json{{"version", version},
              {"output_dir", output_dir},
              {"world", json{{"persons", world.persons}, {"frame_rate", world.frame_rate}}},
              {"model", model.to_json()},
              {"t_frames", t_frames},
              {"data", json{{"biased", datagen_to_json(biased)},
                            {"uniform", datagen_to_json(uniform)}}},
              {"geometry", json{{"motion_frames", geometry.motion_frames},
                                {"new_frames", geometry.new_frames},
                                {"max_gap", geometry.max_gap}}},
              {"pretrain", json{{"stage1", phase_to_json(stage1)},
                                {"stage2", phase_to_json(stage2)},
                                {"text_teacher", phase_to_json(text_teacher)}}},
              {"distill", distill_to_json(distill)},
              {"guidance", guidance.to_json()},
              {"chunk_plan", chunk_plan.to_json()},
              {"student", student.to_json()},
              {"eval", eval_to_json(eval)}};
}

RunConfig RunConfig::from_json(const json& j) {
  check_keys(j,
             {"version", "output_dir", "world", "model", "t_frames", "data", "geometry",
              "pretrain", "distill", "guidance", "chunk_plan", "student", "eval"},
             "<root>");
  RunConfig c;
  try {
    c.version = j.at("version").get<int>();
    c.output_dir = j.at("output_dir").get<std::string>();
    check_keys(j.at("world"), {"persons", "frame_rate"}, "world");
    c.world.persons = j.at("world").at("persons").get<int>();
    c.world.frame_rate = j.at("world").at("frame_rate").get<int>();
    check_keys(j.at("model"),
               {"persons", "hidden", "heads", "blocks", "text_dim", "audio_dim", "enc_hidden",
                "window_radius", "has_audio_layer", "learned_silent_token"},
               "model");
    c.model = DenoiserConfig::from_json(j.at("model"));
    c.t_frames = j.at("t_frames").get<int>();
    check_keys(j.at("data"), {"biased", "uniform"}, "data");
    c.biased = datagen_from_json(j.at("data").at("biased"), "data.biased");
    c.uniform = datagen_from_json(j.at("data").at("uniform"), "data.uniform");
    check_keys(j.at("geometry"), {"motion_frames", "new_frames", "max_gap"}, "geometry");
    c.geometry.motion_frames = j.at("geometry").at("motion_frames").get<int>();
    c.geometry.new_frames = j.at("geometry").at("new_frames").get<int>();
    c.geometry.max_gap = j.at("geometry").at("max_gap").get<int>();
    check_keys(j.at("pretrain"), {"stage1", "stage2", "text_teacher"}, "pretrain");
    c.stage1 = phase_from_json(j.at("pretrain").at("stage1"), "pretrain.stage1");
    c.stage2 = phase_from_json(j.at("pretrain").at("stage2"), "pretrain.stage2");
    c.text_teacher = phase_from_json(j.at("pretrain").at("text_teacher"), "pretrain.text_teacher");
    c.distill = distill_from_json(j.at("distill"));
    check_keys(j.at("guidance"),
               {"alpha_t", "alpha_a_high_noise", "alpha_a_low_noise", "t_spot", "dynamic"},
               "guidance");
    c.guidance = GuidanceConfig::from_json(j.at("guidance"));
    check_keys(j.at("chunk_plan"), {"motion_frames", "new_frames", "pseudo_offset"}, "chunk_plan");
    c.chunk_plan = ChunkPlan::from_json(j.at("chunk_plan"));
    check_keys(j.at("student"), {"step_grid"}, "student");
    c.student = StudentConfig::from_json(j.at("student"));
    c.eval = eval_from_json(j.at("eval"));
  } catch (const json::exception& e) {
    throw ConfigError(std::string("config: ") + e.what());
  } catch (const std::invalid_argument& e) {
    throw ConfigError(std::string("config: ") + e.what());
  }
  c.validate();
  return c;
}

RunConfig RunConfig::defaults() {
  RunConfig c;
  c.model.persons = c.world.persons;
  c.uniform.n_clips = 1400;
  c.uniform.seed = 12;
  c.uniform.dist = ClassDistribution::uniform();
  c.geometry.new_frames = 20;
  c.stage2.steps = 2500;
  c.stage2.seed = 22;
  c.text_teacher.steps = 2500;
  c.text_teacher.seed = 23;
  c.distill.seed = 31;
  c.chunk_plan.new_frames = c.geometry.new_frames;
  c.chunk_plan.motion_frames = c.geometry.motion_frames;
  c.validate();
  return c;
}

RunConfig load_run_config(const fs::path& p) {
  if (!fs::exists(p)) throw MissingInputError("config file not found: " + p.string());
  json j;
  try {
    j = json::parse(read_text(p));
  } catch (const json::exception& e) {
    throw ConfigError(std::string("config: parse error: ") + e.what());
  }
  return RunConfig::from_json(j);
}

uint64_t config_hash(const RunConfig& cfg) { return fnv1a(cfg.to_json().dump()); }

json RunManifest::to_json() const {
  json arts = json::object();
  for (const auto& [name, path] : artifacts) arts[name] = path;
  return json{{"format", "avatarlab-run-manifest"},
              {"config_hash", config_hash},
              {"command", command},
              {"artifacts", arts},
              {"metrics_files", metrics_files},
              {"wall_clock_s", wall_clock_s},
              {"seeds", seeds}};
}

void RunManifest::write(const fs::path& p) const {
  for (const auto& [name, path] : artifacts) {
    if (!fs::exists(path))
      throw MissingInputError("run manifest references a missing artifact: " + path);
  }
  for (const auto& m : metrics_files) {
    if (!fs::exists(m)) throw MissingInputError("run manifest references a missing metrics file: " + m);
  }
  write_text_atomic(p, to_json().dump(2) + "\n");
}

}  // namespace avatarlab
