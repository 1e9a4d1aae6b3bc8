#include "avatarlab/streamgen.hpp"

#include <nlohmann/json.hpp>

namespace avatarlab {

using nlohmann::json;

void ChunkPlan::validate() const {
  require(motion_frames >= 1, "ChunkPlan: motion_frames must be >= 1");
  require(new_frames >= 1, "ChunkPlan: new_frames must be >= 1");
  require(pseudo_offset >= 0, "ChunkPlan: pseudo_offset must be >= 0");
}

json ChunkPlan::to_json() const {
  return json{{"motion_frames", motion_frames},
              {"new_frames", new_frames},
              {"pseudo_offset", pseudo_offset}};
}

ChunkPlan ChunkPlan::from_json(const json& j) {
  ChunkPlan p;
  p.motion_frames = j.at("motion_frames").get<int>();
  p.new_frames = j.at("new_frames").get<int>();
  p.pseudo_offset = j.at("pseudo_offset").get<int>();
  p.validate();
  return p;
}

std::vector<ChunkWindow> plan_chunks(int total_frames, const ChunkPlan& plan) {
  plan.validate();
  require(total_frames >= 1, "plan_chunks: total_frames must be >= 1");
  std::vector<ChunkWindow> out;
  for (int begin = 0; begin < total_frames; begin += plan.new_frames)
    out.push_back({begin, std::min(begin + plan.new_frames, total_frames)});
  return out;
}

AssembledInput assemble_chunk_input(const Mat& motion, const RowVec& pseudo_frame,
                                    const ChunkPlan& plan, int chunk_index, int gap_override) {
  plan.validate();
  require(chunk_index >= 0, "assemble_chunk_input: negative chunk index");
  const int M = plan.motion_frames;
  const int N = plan.new_frames;
  require(static_cast<int>(motion.rows()) == M, "assemble_chunk_input: wrong motion length");
  require(motion.cols() == pseudo_frame.size(), "assemble_chunk_input: frame width mismatch");
  const int F = static_cast<int>(motion.cols());
  const int gap = gap_override >= 0 ? gap_override : plan.pseudo_offset;

  AssembledInput a;
  a.motion = M;
  a.fresh = N;
  a.seq = Mat::Zero(M + N + 1, F);
  a.seq.topRows(M) = motion;
  a.seq.row(M + N) = pseudo_frame;
  a.layout.positions.resize(static_cast<size_t>(M + N + 1));
  a.layout.noise_flags.assign(static_cast<size_t>(M + N + 1), 0);
  for (int i = 0; i < M + N; ++i) a.layout.positions[static_cast<size_t>(i)] = i;
  a.layout.positions[static_cast<size_t>(M + N)] = (M + N - 1) + 1 + gap;
  for (int i = M; i < M + N; ++i) a.layout.noise_flags[static_cast<size_t>(i)] = 1;
  return a;
}

TextClass PromptSchedule::fragment_at(int frame) const {
  for (size_t i = 0; i < windows.size(); ++i) {
    if (frame >= windows[i].begin && frame < windows[i].end) return fragments[i];
  }
  require(!fragments.empty(), "PromptSchedule: empty schedule");
  return fragments.back();
}

PromptSchedule schedule_prompts(double duration_s, const std::vector<TextClass>& fragments,
                                int frame_rate) {
  require(duration_s > 0.0, "schedule_prompts: duration must be positive");
  require(!fragments.empty(), "schedule_prompts: no fragments supplied");
  require(frame_rate > 0, "schedule_prompts: frame_rate must be positive");

  const int count = std::min(
      kMaxFragments, std::max(1, static_cast<int>(std::ceil(duration_s / kSecondsPerFragment))));
  const int total = std::max(1, static_cast<int>(std::llround(duration_s * frame_rate)));

  PromptSchedule s;
  for (int i = 0; i < count; ++i)
    s.fragments.push_back(fragments[static_cast<size_t>(i) % fragments.size()]);
  const int base = total / count;
  int begin = 0;
  for (int i = 0; i < count; ++i) {
    int end = (i == count - 1) ? total : begin + base;
    s.windows.push_back({begin, end});
    begin = end;
  }
  return s;
}

Mat x0_on_noisy(const Mat& x, double tau, const Mat& v, const TokenLayout& layout) {
  const double s = sigma_of(tau);
  Mat out = x;
  for (size_t t = 0; t < layout.size(); ++t)
    if (layout.noise_flags[t])
      out.row(static_cast<Eigen::Index>(t)) -= s * v.row(static_cast<Eigen::Index>(t));
  return out;
}

Mat renoise_on_noisy(const Mat& x0, double tau, const Mat& eps, const TokenLayout& layout) {
  const double s = sigma_of(tau);
  Mat out = x0;
  for (size_t t = 0; t < layout.size(); ++t)
    if (layout.noise_flags[t])
      out.row(static_cast<Eigen::Index>(t)) = (1.0 - s) * x0.row(static_cast<Eigen::Index>(t)) +
                                              s * eps.row(static_cast<Eigen::Index>(t));
  return out;
}

void align_context_envelopes(Mat& env, const Mat& seq, const TokenLayout& layout,
                             const WorldSpec& spec) {
  require(static_cast<int>(env.cols()) == static_cast<int>(layout.size()),
          "align_context_envelopes: envelope length mismatch");
  for (int p = 0; p < spec.persons; ++p) {
    const int mouth = spec.channel(p, Role::mouth);
    for (size_t t = 0; t < layout.size(); ++t)
      if (!layout.noise_flags[t]) env(p, static_cast<Eigen::Index>(t)) = seq(static_cast<Eigen::Index>(t), mouth);
  }
}

namespace {

Mat model_velocity(const Denoiser& model, const Mat& x, double tau, const CondSet& cond,
                   const TokenLayout& layout, const GuidanceConfig* guidance) {
  if (!guidance) return denoiser_forward(model, x, tau, cond, layout);
  auto [aa, at] = cfg_scales_at(tau, *guidance);
  return real_score_vanilla(model, x, tau, cond, aa, at, layout);
}

void fill_noise_rows(Mat& seq, const TokenLayout& layout, Rng& rng) {
  for (size_t t = 0; t < layout.size(); ++t) {
    if (!layout.noise_flags[t]) continue;
    for (Eigen::Index f = 0; f < seq.cols(); ++f)
      seq(static_cast<Eigen::Index>(t), f) = rng.gaussian();
  }
}

}  // namespace

Mat euler_flow_sample(const Denoiser& model, AssembledInput input, const CondSet& cond,
                      int n_steps, Rng& rng, const GuidanceConfig* guidance) {
  require(n_steps >= 1, "euler_flow_sample: need at least one step");
  fill_noise_rows(input.seq, input.layout, rng);
  Mat x = input.seq;
  for (int k = 0; k < n_steps; ++k) {
    const double tau = 1000.0 * (1.0 - static_cast<double>(k) / n_steps);
    const double tau_next = 1000.0 * (1.0 - static_cast<double>(k + 1) / n_steps);
    Mat v = model_velocity(model, x, tau, cond, input.layout, guidance);
    const double ds = sigma_of(tau_next) - sigma_of(tau);
    for (size_t t = 0; t < input.layout.size(); ++t)
      if (input.layout.noise_flags[t])
        x.row(static_cast<Eigen::Index>(t)) += ds * v.row(static_cast<Eigen::Index>(t));
  }
  return x;
}

void StudentConfig::validate() const {
  require(!step_grid.empty(), "StudentConfig: empty step grid");
  require(step_grid.front() == 1000.0, "StudentConfig: grid must start at 1000");
  for (size_t i = 1; i < step_grid.size(); ++i)
    require(step_grid[i] < step_grid[i - 1], "StudentConfig: grid must be strictly decreasing");
  for (double t : step_grid) (void)sigma_of(t);
}

json StudentConfig::to_json() const { return json{{"step_grid", step_grid}}; }

StudentConfig StudentConfig::from_json(const json& j) {
  StudentConfig s;
  s.step_grid = j.at("step_grid").get<std::vector<double>>();
  s.validate();
  return s;
}

Mat student_rollout(const Denoiser& student, AssembledInput input, const CondSet& cond,
                    const StudentConfig& grid, Rng& rng, const GuidanceConfig* guidance) {
  grid.validate();
  fill_noise_rows(input.seq, input.layout, rng);
  Mat x = input.seq;
  Mat x0 = x;
  for (size_t k = 0; k < grid.step_grid.size(); ++k) {
    const double t = grid.step_grid[k];
    Mat v = model_velocity(student, x, t, cond, input.layout, guidance);
    x0 = x0_on_noisy(x, t, v, input.layout);
    if (k + 1 < grid.step_grid.size()) {
      Mat eps(x.rows(), x.cols());
      for (Eigen::Index i = 0; i < eps.rows(); ++i)
        for (Eigen::Index j = 0; j < eps.cols(); ++j) eps(i, j) = rng.gaussian();
      x = renoise_on_noisy(x0, grid.step_grid[k + 1], eps, input.layout);
    }
  }
  return x0;
}

Clip generate_window(const Denoiser& model, const RowVec& ref_frame, TextClass cls,
                     const AudioSet& audio, const ChunkPlan& plan, int euler_steps,
                     const StudentConfig& grid, uint64_t seed, const GuidanceConfig* guidance) {
  plan.validate();
  const int M = plan.motion_frames;
  const int N = plan.new_frames;
  require(audio.frames() >= M + N, "generate_window: audio shorter than the window");

  Mat motion = ref_frame.replicate(M, 1);
  AssembledInput input = assemble_chunk_input(motion, ref_frame, plan, 0);

  CondSet cond = CondSet::of_class(cls);
  if (model.cfg.has_audio_layer) {
    Mat env = Mat::Zero(audio.persons(), M + N + 1);
    env.leftCols(M + N) = audio.streams.leftCols(M + N);
    align_context_envelopes(env, input.seq, input.layout, WorldSpec{model.cfg.persons});
    cond.audio = env;
  }

  Rng rng(derive_seed(seed, 0x77696e64u));
  Mat out = euler_steps > 0 ? euler_flow_sample(model, input, cond, euler_steps, rng, guidance)
                            : student_rollout(model, input, cond, grid, rng, guidance);

  Clip clip;
  clip.data = out.middleRows(M, N);
  clip.validate();
  return clip;
}

Clip generate_stream(const Denoiser& student, const RowVec& ref_frame, const AudioSet& audio,
                     const PromptSchedule& schedule, const ChunkPlan& plan,
                     const StudentConfig& grid, uint64_t seed, bool guidance_off,
                     const GuidanceConfig* guidance, StreamTrace* trace) {
  plan.validate();
  grid.validate();
  require(!schedule.windows.empty(), "generate_stream: empty schedule");
  const int total = schedule.total_frames();
  require(audio.frames() >= total, "generate_stream: audio shorter than requested frames");
  const int M = plan.motion_frames;
  const int N = plan.new_frames;
  const int F = static_cast<int>(ref_frame.size());
  const GuidanceConfig* guide = guidance_off ? nullptr : guidance;

  Rng rng(derive_seed(seed, 0x73747265u));
  Mat emitted(total, F);
  int produced = 0;
  std::vector<int> boundaries;

  const auto windows = plan_chunks(total, plan);
  for (size_t k = 0; k < windows.size(); ++k) {
    const ChunkWindow w = windows[k];
    Mat motion(M, F);
    if (k == 0) {
      motion = ref_frame.replicate(M, 1);
    } else {
      require(produced >= M, "generate_stream: not enough emitted frames for motion context");
      motion = emitted.middleRows(produced - M, M);
    }
    AssembledInput input = assemble_chunk_input(motion, ref_frame, plan, static_cast<int>(k));
    if (trace) {
      trace->chunk_motion.push_back(motion);
      trace->layouts.push_back(input.layout);
    }

    CondSet cond = CondSet::of_class(schedule.fragment_at(w.begin));
    if (student.cfg.has_audio_layer) {
      Mat env = Mat::Zero(audio.persons(), M + N + 1);
      for (int i = 0; i < M + N; ++i) {
        const int global = w.begin - M + i;
        if (global >= 0 && global < audio.frames()) env.col(i) = audio.streams.col(global);
      }
      align_context_envelopes(env, input.seq, input.layout, WorldSpec{student.cfg.persons});
      cond.audio = env;
    }

    Mat out = student_rollout(student, input, cond, grid, rng, guide);
    const int keep = w.length();
    emitted.middleRows(produced, keep) = out.middleRows(M, keep);
    produced += keep;
    if (produced < total) boundaries.push_back(produced);
  }

  Clip clip;
  clip.data = std::move(emitted);
  clip.chunk_boundaries = std::move(boundaries);
  clip.validate();
  return clip;
}

json stream_sidecar(const PromptSchedule& schedule, const ChunkPlan& plan, const Clip& clip,
                    uint64_t seed, const RowVec& ref_frame) {
  json fragments = json::array();
  for (size_t i = 0; i < schedule.fragments.size(); ++i) {
    fragments.push_back({{"class", to_string(schedule.fragments[i])},
                         {"begin", schedule.windows[i].begin},
                         {"end", schedule.windows[i].end}});
  }
  json ref = json::array();
  for (Eigen::Index i = 0; i < ref_frame.size(); ++i) ref.push_back(ref_frame[i]);
  return json{{"boundaries", clip.chunk_boundaries},
              {"schedule", fragments},
              {"plan", plan.to_json()},
              {"seed", seed},
              {"ref_frame", ref}};
}

}  // namespace avatarlab
