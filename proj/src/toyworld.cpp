#include "avatarlab/toyworld.hpp"

#include <nlohmann/json.hpp>

namespace avatarlab {

namespace fs = std::filesystem;
using nlohmann::json;

const char* to_string(TextClass c) {
  switch (c) {
    case TextClass::idle: return "idle";
    case TextClass::talk: return "talk";
    case TextClass::walk_left: return "walk_left";
    case TextClass::walk_right: return "walk_right";
    case TextClass::wave: return "wave";
    case TextClass::zoom_in: return "zoom_in";
    case TextClass::bg_shift: return "bg_shift";
  }
  return "?";
}

TextClass text_class_from_string(const std::string& s) {
  for (int i = 0; i < kNumClasses; ++i) {
    if (s == to_string(static_cast<TextClass>(i))) return static_cast<TextClass>(i);
  }
  throw std::invalid_argument("unknown text class: " + s);
}

int WorldSpec::channel(int person, Role r) const {
  require(person >= 0 && person < persons, "WorldSpec::channel: person out of range");
  if (r == Role::camera) return camera_channel();
  return kPersonChannels * person + static_cast<int>(r);
}

Role WorldSpec::role_of_channel(int f) const {
  require(f >= 0 && f < frame_dim(), "WorldSpec::role_of_channel: out of range");
  if (f == camera_channel()) return Role::camera;
  return static_cast<Role>(f % kPersonChannels);
}

int WorldSpec::person_of_channel(int f) const {
  require(f >= 0 && f < frame_dim(), "WorldSpec::person_of_channel: out of range");
  if (f == camera_channel()) return -1;
  return f / kPersonChannels;
}

void WorldSpec::validate() const {
  require(persons >= 1 && persons <= 3, "WorldSpec: persons must be in 1..3");
  require(frame_rate > 0, "WorldSpec: frame_rate must be positive");
}

void Clip::validate() const {
  require(frames() >= 1, "Clip: T must be >= 1");
  if (!data.allFinite()) throw NumericError("Clip: non-finite values");
  for (size_t i = 0; i < chunk_boundaries.size(); ++i) {
    require(chunk_boundaries[i] > 0 && chunk_boundaries[i] < frames(),
            "Clip: boundary out of range");
    if (i > 0)
      require(chunk_boundaries[i] > chunk_boundaries[i - 1], "Clip: boundaries not sorted");
  }
}

void ClassDistribution::validate() const {
  double sum = 0.0;
  for (double w : weights) {
    require(w >= 0.0, "ClassDistribution: negative weight");
    sum += w;
  }
  require(std::abs(sum - 1.0) <= 1e-9, "ClassDistribution: weights must sum to 1");
}

TextClass ClassDistribution::sample(Rng& rng) const {
  double u = rng.uniform();
  double c = 0.0;
  for (int i = 0; i < kNumClasses; ++i) {
    c += weights[static_cast<size_t>(i)];
    if (u < c) return static_cast<TextClass>(i);
  }
  return static_cast<TextClass>(kNumClasses - 1);
}

ClassDistribution ClassDistribution::uniform() {
  ClassDistribution d;
  d.weights.fill(1.0 / kNumClasses);
  return d;
}

ClassDistribution ClassDistribution::biased_default() {
  ClassDistribution d;
  d.weights.fill(0.10 / 5.0);
  d.weights[static_cast<size_t>(TextClass::idle)] = 0.45;
  d.weights[static_cast<size_t>(TextClass::talk)] = 0.45;
  return d;
}

ClassDistribution ClassDistribution::point_mass(TextClass c) {
  ClassDistribution d;
  d.weights.fill(0.0);
  d.weights[static_cast<size_t>(c)] = 1.0;
  return d;
}

AudioSet make_audio(int frames, int persons, uint64_t seed) {
  require(frames >= 1, "make_audio: T must be >= 1");
  require(persons >= 1, "make_audio: persons must be >= 1");
  Mat streams = Mat::Zero(persons, frames);
  for (int p = 0; p < persons; ++p) {
    Rng rng(derive_seed(seed, 0x617564u + static_cast<uint64_t>(p)));
    int bursts = rng.poisson(frames / 25.0);
    for (int b = 0; b < bursts; ++b) {
      double center = rng.uniform(0.0, frames);
      double width = rng.uniform(1.5, 4.0);
      double amp = rng.uniform(0.4, 1.0);
      for (int t = 0; t < frames; ++t) {
        double d = (t - center) / width;
        streams(p, t) += amp * std::exp(-0.5 * d * d);
      }
    }
    for (int t = 0; t < frames; ++t) streams(p, t) = std::clamp(streams(p, t), 0.0, 1.0);
  }
  return {streams};
}

Clip sample_clip(const WorldSpec& spec, TextClass cls, const AudioSet& audio, uint64_t seed) {
  spec.validate();
  require(audio.persons() == spec.persons, "sample_clip: audio stream count mismatch");
  const int T = audio.frames();
  require(T >= 1, "sample_clip: empty audio");
  const int F = spec.frame_dim();
  using namespace worldgen;

  Rng rng(derive_seed(seed, 0x636c6970u));
  Mat data = Mat::Zero(T, F);

  // camera (global)
  double cam0 = rng.uniform(-0.2, 0.2);
  double cam = cam0;
  for (int t = 0; t < T; ++t) {
    switch (cls) {
      case TextClass::zoom_in:
        data(t, spec.camera_channel()) = cam0 + kZoomRate * t;
        break;
      case TextClass::bg_shift:
        data(t, spec.camera_channel()) = (t < T / 2) ? cam0 : cam0 - kBgShiftDrop;
        break;
      default:
        data(t, spec.camera_channel()) = cam;
        cam += rng.uniform(-kCameraNoise, kCameraNoise);
        break;
    }
  }

  for (int p = 0; p < spec.persons; ++p) {
    double p0x = rng.uniform(-0.3, 0.3);
    double p0y = rng.uniform(-0.3, 0.3);
    double limb0 = rng.uniform(-0.2, 0.2);
    double gait_phase = rng.uniform(0.0, 2.0 * M_PI);
    double limb_phase = rng.uniform(0.0, 2.0 * M_PI);
    double id_angle = rng.uniform(0.0, 2.0 * M_PI);
    double id_norm = rng.uniform(0.6, 1.0);
    double ida = id_norm * std::cos(id_angle);
    double idb = id_norm * std::sin(id_angle);

    double x = p0x, y = p0y;
    for (int t = 0; t < T; ++t) {
      double px, py, limb;
      switch (cls) {
        case TextClass::walk_left:
        case TextClass::walk_right: {
          double dir = (cls == TextClass::walk_right) ? 1.0 : -1.0;
          px = p0x + dir * kWalkVelocity * t;
          py = p0y + kGaitAmplitude * std::sin(2.0 * M_PI * kGaitFreq * t + gait_phase);
          limb = limb0 + rng.uniform(-kLimbNoise, kLimbNoise);
          break;
        }
        default: {
          px = x;
          py = y;
          x += rng.uniform(-kDriftStep, kDriftStep);
          y += rng.uniform(-kDriftStep, kDriftStep);
          if (cls == TextClass::talk)
            limb = limb0 + kTalkLimbAmplitude * std::sin(2.0 * M_PI * kTalkLimbFreq * t + limb_phase);
          else if (cls == TextClass::wave)
            limb = limb0 + kWaveLimbAmplitude * std::sin(2.0 * M_PI * kWaveLimbFreq * t + limb_phase);
          else
            limb = limb0 + rng.uniform(-kLimbNoise, kLimbNoise);
          break;
        }
      }
      data(t, spec.channel(p, Role::pos_x)) = px;
      data(t, spec.channel(p, Role::pos_y)) = py;
      data(t, spec.channel(p, Role::mouth)) = audio.streams(p, t);
      data(t, spec.channel(p, Role::limb)) = limb;
      data(t, spec.channel(p, Role::id_a)) = ida;
      data(t, spec.channel(p, Role::id_b)) = idb;
    }
  }

  Clip clip{std::move(data), {}};
  clip.validate();
  return clip;
}

AudioSet Dataset::audio_for(size_t i) const {
  const auto& lc = clips.at(i);
  if (lc.audio) return *lc.audio;
  return AudioSet::silent(spec.persons, t_frames);
}

Dataset sample_dataset(const WorldSpec& spec, const ClassDistribution& dist, int n_clips,
                       int t_frames, bool with_audio, uint64_t seed) {
  spec.validate();
  dist.validate();
  require(n_clips >= 1, "sample_dataset: n_clips must be >= 1");
  require(t_frames >= 1, "sample_dataset: t_frames must be >= 1");

  Dataset ds;
  ds.spec = spec;
  ds.t_frames = t_frames;
  ds.with_audio = with_audio;
  ds.seed = seed;
  ds.clips.reserve(static_cast<size_t>(n_clips));

  Rng label_rng(derive_seed(seed, 0x6c61626cu));
  for (int i = 0; i < n_clips; ++i) {
    uint64_t clip_seed = derive_seed(seed, 0x10000u + static_cast<uint64_t>(i));
    TextClass cls = dist.sample(label_rng);
    AudioSet audio = make_audio(t_frames, spec.persons, derive_seed(clip_seed, 1));
    if (!with_audio) {
      // Foundation-style data: mouths move with smooth noise that is not the
      // stored audio; no audio is kept.
      AudioSet fake = make_audio(t_frames, spec.persons, derive_seed(clip_seed, 2));
      Clip clip = sample_clip(spec, cls, fake, derive_seed(clip_seed, 3));
      ds.clips.push_back({std::move(clip), cls, std::nullopt, clip_seed});
    } else {
      Clip clip = sample_clip(spec, cls, audio, derive_seed(clip_seed, 3));
      ds.clips.push_back({std::move(clip), cls, std::move(audio), clip_seed});
    }
  }
  return ds;
}

MaskSet person_masks(const WorldSpec& spec) {
  spec.validate();
  Mat masks = Mat::Zero(spec.persons, spec.frame_dim());
  for (int p = 0; p < spec.persons; ++p)
    for (int c = 0; c < kPersonChannels; ++c) masks(p, kPersonChannels * p + c) = 1.0;
  return {masks};
}

void Dataset::save(const fs::path& prefix) const {
  json manifest;
  manifest["format"] = "avatarlab-dataset";
  manifest["version"] = 1;
  manifest["world"] = {{"persons", spec.persons}, {"frame_rate", spec.frame_rate}};
  manifest["t_frames"] = t_frames;
  manifest["with_audio"] = with_audio;
  manifest["seed"] = seed;
  manifest["n_clips"] = clips.size();
  json labels = json::array();
  json seeds = json::array();
  for (const auto& lc : clips) {
    labels.push_back(to_string(lc.label));
    seeds.push_back(lc.seed);
  }
  manifest["labels"] = labels;
  manifest["clip_seeds"] = seeds;
  manifest["data_file"] = prefix.filename().string() + ".clips.bin";
  if (with_audio) manifest["audio_file"] = prefix.filename().string() + ".audio.bin";

  const int F = spec.frame_dim();
  std::vector<double> flat;
  flat.reserve(clips.size() * static_cast<size_t>(t_frames) * F);
  for (const auto& lc : clips)
    for (int t = 0; t < t_frames; ++t)
      for (int f = 0; f < F; ++f) flat.push_back(lc.clip.data(t, f));
  fs::path data_path = prefix;
  data_path += ".clips.bin";
  write_f32_blob(data_path, flat);

  if (with_audio) {
    std::vector<double> aud;
    aud.reserve(clips.size() * static_cast<size_t>(spec.persons) * t_frames);
    for (const auto& lc : clips)
      for (int p = 0; p < spec.persons; ++p)
        for (int t = 0; t < t_frames; ++t) aud.push_back(lc.audio->streams(p, t));
    fs::path audio_path = prefix;
    audio_path += ".audio.bin";
    write_f32_blob(audio_path, aud);
  }

  fs::path json_path = prefix;
  json_path += ".json";
  write_text_atomic(json_path, manifest.dump(2) + "\n");
}

Dataset Dataset::load(const fs::path& prefix) {
  fs::path json_path = prefix;
  json_path += ".json";
  json manifest = json::parse(read_text(json_path));
  if (manifest.value("format", "") != "avatarlab-dataset")
    throw MissingInputError("not a dataset manifest: " + json_path.string());

  Dataset ds;
  ds.spec.persons = manifest.at("world").at("persons").get<int>();
  ds.spec.frame_rate = manifest.at("world").at("frame_rate").get<int>();
  ds.t_frames = manifest.at("t_frames").get<int>();
  ds.with_audio = manifest.at("with_audio").get<bool>();
  ds.seed = manifest.at("seed").get<uint64_t>();
  const size_t n = manifest.at("n_clips").get<size_t>();

  auto flat = read_f32_blob(prefix.parent_path() / manifest.at("data_file").get<std::string>());
  const int F = ds.spec.frame_dim();
  if (flat.size() != n * static_cast<size_t>(ds.t_frames) * F)
    throw MissingInputError("dataset blob size mismatch");
  std::vector<double> aud;
  if (ds.with_audio)
    aud = read_f32_blob(prefix.parent_path() / manifest.at("audio_file").get<std::string>());

  size_t k = 0, ka = 0;
  for (size_t i = 0; i < n; ++i) {
    LabeledClip lc;
    lc.label = text_class_from_string(manifest.at("labels")[i].get<std::string>());
    lc.seed = manifest.at("clip_seeds")[i].get<uint64_t>();
    lc.clip.data = Mat(ds.t_frames, F);
    for (int t = 0; t < ds.t_frames; ++t)
      for (int f = 0; f < F; ++f) lc.clip.data(t, f) = flat[k++];
    if (ds.with_audio) {
      AudioSet a{Mat(ds.spec.persons, ds.t_frames)};
      for (int p = 0; p < ds.spec.persons; ++p)
        for (int t = 0; t < ds.t_frames; ++t) a.streams(p, t) = aud[ka++];
      lc.audio = std::move(a);
    }
    ds.clips.push_back(std::move(lc));
  }
  return ds;
}

}  // namespace avatarlab
