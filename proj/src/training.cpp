#include "avatarlab/training.hpp"

#include <sstream>

namespace avatarlab {

void FlowGeometry::validate() const {
  require(motion_frames >= 1 && new_frames >= 1 && max_gap >= 0, "FlowGeometry: bad fields");
}

FlowBatch make_flow_batch(const Dataset& data, const FlowGeometry& geom,
                          std::span<const size_t> clip_indices, Rng& rng, bool force_unaudio) {
  geom.validate();
  require(data.t_frames >= geom.required_clip_frames(),
          "make_flow_batch: dataset clips shorter than the training geometry");
  const int M = geom.motion_frames;
  const int N = geom.new_frames;
  const int S = M + N + 1;
  const int F = data.spec.frame_dim();

  FlowBatch batch;
  for (size_t idx : clip_indices) {
    const LabeledClip& lc = data.clips.at(idx);
    const int gap = static_cast<int>(rng.integer(static_cast<uint64_t>(geom.max_gap + 1)));
    const int pseudo_src = M + N + gap;
    // Half the samples condition the window the way inference does: a still
    // context replicated from the window's first frame, and that same frame
    // as the anchor. The other half keep the clip's true context and its true
    // future frame at the offset position.
    const bool still_context = rng.uniform() < 0.5;
    const bool ref_anchor = rng.uniform() < 0.5;

    BatchSample s;
    s.layout.positions.resize(static_cast<size_t>(S));
    s.layout.noise_flags.assign(static_cast<size_t>(S), 0);
    for (int i = 0; i < M + N; ++i) s.layout.positions[static_cast<size_t>(i)] = i;
    s.layout.positions[static_cast<size_t>(M + N)] = pseudo_src;
    for (int i = M; i < M + N; ++i) s.layout.noise_flags[static_cast<size_t>(i)] = 1;

    Mat x0(S, F);
    if (still_context)
      x0.topRows(M) = lc.clip.data.row(M).replicate(M, 1);
    else
      x0.topRows(M) = lc.clip.data.topRows(M);
    x0.middleRows(M, N) = lc.clip.data.middleRows(M, N);
    x0.row(M + N) = ref_anchor ? lc.clip.data.row(M) : lc.clip.data.row(pseudo_src);

    s.tau = rng.uniform(0.0, 1000.0);
    Mat eps(S, F);
    for (int i = 0; i < S; ++i)
      for (int f = 0; f < F; ++f) eps(i, f) = rng.gaussian();

    s.noisy = renoise_on_noisy(x0, s.tau, eps, s.layout);
    s.cond.text_class = static_cast<int>(lc.label);
    if (!force_unaudio && data.with_audio) {
      // noise-free tokens carry the envelope their content actually shows
      Mat env(data.spec.persons, S);
      env.leftCols(M + N) = lc.audio->streams.leftCols(M + N);
      env.col(M + N) = lc.audio->streams.col(pseudo_src);
      for (int p = 0; p < data.spec.persons; ++p) {
        const int mouth = data.spec.channel(p, Role::mouth);
        for (int i = 0; i < S; ++i)
          if (!s.layout.noise_flags[static_cast<size_t>(i)]) env(p, i) = x0(i, mouth);
      }
      s.cond.audio = env;
    }

    batch.targets.push_back(eps - x0);
    batch.samples.push_back(std::move(s));
  }
  return batch;
}

namespace {

OutputLoss flow_loss_fn(const FlowBatch& batch) {
  const size_t n = batch.samples.size();
  return [&batch, n](size_t i, const Mat& out) {
    const auto& layout = batch.samples[i].layout;
    const Mat& target = batch.targets[i];
    const int noisy = layout.noisy_count();
    const double denom = static_cast<double>(noisy) * out.cols() * n;
    double value = 0.0;
    Mat d = Mat::Zero(out.rows(), out.cols());
    for (size_t t = 0; t < layout.size(); ++t) {
      if (!layout.noise_flags[t]) continue;
      const auto r = static_cast<Eigen::Index>(t);
      Mat diff = out.row(r) - target.row(r);
      value += diff.squaredNorm() / denom;
      d.row(r) = 2.0 * diff / denom;
    }
    return std::make_pair(value, d);
  };
}

}  // namespace

double flow_match_loss(const Denoiser& model, const FlowBatch& batch) {
  require(!batch.samples.empty(), "flow_match_loss: empty batch");
  auto loss = flow_loss_fn(batch);
  double total = 0.0;
  for (size_t i = 0; i < batch.samples.size(); ++i) {
    const auto& s = batch.samples[i];
    Mat out = denoiser_forward(model, s.noisy, s.tau, s.cond, s.layout);
    total += loss(i, out).first;
  }
  if (!std::isfinite(total)) throw NumericError("flow_match_loss: non-finite loss");
  return total;
}

std::pair<double, ParamStore> flow_match_grad(const Denoiser& model, const FlowBatch& batch) {
  require(!batch.samples.empty(), "flow_match_grad: empty batch");
  return grad_params(model, batch.samples, flow_loss_fn(batch));
}

PretrainResult pretrain_stage(Denoiser& model, const Dataset& data, int stage,
                              const OptConfig& opt, const FlowGeometry& geom,
                              bool freeze_text_proj) {
  require(stage == 1 || stage == 2, "pretrain_stage: stage must be 1 or 2");
  std::set<std::string> trainable = opt.trainable;
  if (stage == 1) {
    require(!model.cfg.has_audio_layer, "pretrain_stage: stage 1 model must not have audio layers");
    if (trainable.empty()) {
      trainable = {groups::kFrameEmbed, groups::kSelfAttn, groups::kTimeEmbed, groups::kOutProj};
      if (!freeze_text_proj) trainable.insert(groups::kTextProj);
    }
  } else {
    if (!data.with_audio)
      throw std::invalid_argument("pretrain_stage: stage 2 requires an audio-bearing dataset");
    if (!model.cfg.has_audio_layer) model.insert_audio_layer(derive_seed(opt.seed, 0x7332u));
    if (trainable.empty()) trainable = {groups::kAudioCrossAttn};
  }

  Adam adam(model.params);
  AdamConfig acfg = opt.adam;
  Rng rng(derive_seed(opt.seed, stage == 1 ? 0x70743100u : 0x70743200u));
  PretrainResult result;
  result.loss_history.reserve(static_cast<size_t>(opt.steps));

  for (int step = 0; step < opt.steps; ++step) {
    std::vector<size_t> idx(static_cast<size_t>(opt.batch));
    for (auto& i : idx) i = static_cast<size_t>(rng.integer(data.clips.size()));
    FlowBatch batch = make_flow_batch(data, geom, idx, rng, stage == 1);
    auto [loss, grads] = flow_match_grad(model, batch);
    if (!std::isfinite(loss))
      throw NumericError("pretrain_stage: non-finite loss at step " + std::to_string(step));
    adam.step(model.params, grads, acfg, trainable);
    result.loss_history.push_back(loss);
  }
  return result;
}

Mat generator_step(const Denoiser& student, const StudentConfig& grid, const Mat& z, double t,
                   const CondSet& cond, const TokenLayout& layout) {
  grid.validate();
  bool on_grid = false;
  for (double g : grid.step_grid) on_grid |= (g == t);
  require(on_grid, "generator_step: t is not on the student step grid");
  Mat v = denoiser_forward(student, z, t, cond, layout);
  return x0_on_noisy(z, t, v, layout);
}

Mat renoise(const Mat& x0, double tau, const Mat& eps) { return flow_interpolate(x0, tau, eps); }

std::pair<double, Mat> dmd_generator_grad(const Mat& x0_gen, const Mat& x0_real,
                                          const Mat& x0_fake, double eps) {
  require(x0_gen.rows() == x0_real.rows() && x0_gen.cols() == x0_real.cols() &&
              x0_gen.rows() == x0_fake.rows() && x0_gen.cols() == x0_fake.cols(),
          "dmd_generator_grad: shape mismatch");
  require(eps >= 0.0, "dmd_generator_grad: negative eps");
  if (!x0_gen.allFinite() || !x0_real.allFinite() || !x0_fake.allFinite())
    throw NumericError("dmd_generator_grad: non-finite inputs");
  const double w = 1.0 / ((x0_real - x0_gen).cwiseAbs().mean() + eps);
  Mat d = w * (x0_fake - x0_real);
  double pseudo_loss = d.cwiseProduct(x0_gen).sum();
  return {pseudo_loss, std::move(d)};
}

void DistillConfig::validate() const {
  require(phase_a_steps >= 0 && phase_b_steps >= 0, "DistillConfig: negative step counts");
  require(fake_updates_per_gen >= 0, "DistillConfig: negative fake update count");
  require(dmd_weight_eps >= 0.0, "DistillConfig: negative dmd eps");
  require(tau_min >= 0.0 && tau_max <= 1000.0 && tau_min < tau_max, "DistillConfig: bad tau range");
  require(batch >= 1 && eval_interval >= 1 && eval_clips >= 1, "DistillConfig: bad counts");
  cond_classes.validate();
}

std::string metrics_csv(std::span<const MetricRow> rows) {
  std::ostringstream os;
  os.precision(17);
  os << "step,phase,loss_fake,pseudo_loss,sync_corr_eval,text_align_eval,seed\n";
  for (const auto& r : rows) {
    os << r.step << ',' << r.phase << ',' << r.loss_fake << ',' << r.pseudo_loss << ','
       << r.sync_corr_eval << ',' << r.text_align_eval << ',' << r.seed << '\n';
  }
  return os.str();
}

namespace {

// One conditioned sample setup shared by the distill loop and its eval pass.
struct CondSample {
  CondSet cond;
  AssembledInput input;
  AudioSet window_audio;  // streams over the N fresh frames
  TextClass cls = TextClass::idle;
};

CondSample draw_cond_sample(const WorldSpec& spec, const ClassDistribution& classes,
                            const ChunkPlan& plan, int gap, bool motion_from_clip, Rng& rng,
                            bool with_audio_pathway) {
  const int M = plan.motion_frames;
  const int N = plan.new_frames;
  const int span = M + N + gap + 1;

  CondSample s;
  s.cls = classes.sample(rng);
  AudioSet audio = make_audio(span, spec.persons, rng.raw());
  Clip ref_clip = sample_clip(spec, TextClass::idle, audio, rng.raw());
  RowVec ref = ref_clip.data.row(0);

  Mat motion = motion_from_clip ? Mat(ref_clip.data.topRows(M)) : Mat(ref.replicate(M, 1));
  s.input = assemble_chunk_input(motion, ref, plan, 0, gap);

  s.cond.text_class = static_cast<int>(s.cls);
  if (with_audio_pathway) {
    Mat env(spec.persons, M + N + 1);
    env.leftCols(M + N) = audio.streams.leftCols(M + N);
    env.col(M + N) = audio.streams.col(M + N + gap);
    align_context_envelopes(env, s.input.seq, s.input.layout, spec);
    s.cond.audio = env;
  }
  s.window_audio.streams = audio.streams.middleCols(M, N);
  return s;
}

}  // namespace

double fake_score_update(Denoiser& fake, Adam& fake_adam, std::span<const BatchSample> samples,
                         std::span<const Mat> x0_samples, const AdamConfig& adam_cfg, Rng& rng,
                         double tau_min, double tau_max) {
  require(samples.size() == x0_samples.size(), "fake_score_update: sample count mismatch");
  FlowBatch batch;
  for (size_t i = 0; i < samples.size(); ++i) {
    BatchSample s = samples[i];
    const Mat& x0 = x0_samples[i];
    s.tau = rng.uniform(tau_min, tau_max);
    Mat eps(x0.rows(), x0.cols());
    for (Eigen::Index r = 0; r < eps.rows(); ++r)
      for (Eigen::Index c = 0; c < eps.cols(); ++c) eps(r, c) = rng.gaussian();
    s.noisy = renoise_on_noisy(x0, s.tau, eps, s.layout);
    batch.targets.push_back(eps - x0);
    batch.samples.push_back(std::move(s));
  }
  auto [loss, grads] = flow_match_grad(fake, batch);
  std::set<std::string> all_groups;
  for (const auto& g : fake.params.groups()) all_groups.insert(g);
  fake_adam.step(fake.params, grads, adam_cfg, all_groups);
  return loss;
}

DistillResult distill_run(const Denoiser& eps_audio, const Denoiser* eps_text,
                          const Denoiser& student_init, const GuidanceConfig& gcfg,
                          const DistillConfig& dcfg, const StudentConfig& grid,
                          const ChunkPlan& plan, const LinearProbe& probe) {
  dcfg.validate();
  grid.validate();
  gcfg.validate();
  require(eps_audio.cfg.has_audio_layer, "distill_run: audio teacher lacks an audio pathway");
  if (dcfg.phase_a_steps > 0)
    require(eps_text != nullptr, "distill_run: twin phase requires a text teacher");

  const WorldSpec spec{eps_audio.cfg.persons};
  const int M = plan.motion_frames;
  const int N = plan.new_frames;

  DistillResult result{student_init, {}};
  Denoiser& student = result.student;
  Denoiser fake = eps_audio;  // fake score model initialized from the audio teacher

  Adam student_adam(student.params);
  Adam fake_adam(fake.params);
  AdamConfig gen_cfg;
  gen_cfg.lr = dcfg.lr_generator;
  AdamConfig fake_cfg;
  fake_cfg.lr = dcfg.lr_fake;

  Rng rng(derive_seed(dcfg.seed, 0x64697374u));
  Rng eval_rng(derive_seed(dcfg.seed, 0x6576616cu));

  GuidanceConfig gcfg_a = gcfg;
  gcfg_a.dynamic = dcfg.dynamic_cfg_phase_a;
  GuidanceConfig gcfg_b = gcfg;
  gcfg_b.dynamic = dcfg.dynamic_cfg_phase_b;

  double last_sync = 0.0, last_align = 0.0, last_fake_loss = 0.0;
  const int total_steps = dcfg.phase_a_steps + dcfg.phase_b_steps;

  auto rollout_samples = [&](int count, Rng& r, std::vector<BatchSample>& samples,
                             std::vector<Mat>& x0s) {
    for (int i = 0; i < count; ++i) {
      const int gap = static_cast<int>(r.integer(static_cast<uint64_t>(plan.pseudo_offset + 3)));
      CondSample cs = draw_cond_sample(spec, dcfg.cond_classes, plan, gap, r.uniform() < 0.5, r,
                                       student.cfg.has_audio_layer);
      Rng roll = r.fork(0x726f6c6cu);
      Mat x0 = student_rollout(student, cs.input, cs.cond, grid, roll);
      BatchSample s;
      s.noisy = Mat();  // filled by fake_score_update
      s.cond = cs.cond;
      s.layout = cs.input.layout;
      samples.push_back(std::move(s));
      x0s.push_back(std::move(x0));
    }
  };

  for (int step = 0; step < total_steps; ++step) {
    const bool phase_a = step < dcfg.phase_a_steps;
    const std::string phase = phase_a ? "twin" : "vanilla";
    const GuidanceConfig& phase_gcfg = phase_a ? gcfg_a : gcfg_b;

    // keep the fake score on-policy
    for (int fu = 0; fu < dcfg.fake_updates_per_gen; ++fu) {
      std::vector<BatchSample> fsamples;
      std::vector<Mat> fx0;
      rollout_samples(dcfg.batch, rng, fsamples, fx0);
      last_fake_loss = fake_score_update(fake, fake_adam, fsamples, fx0, fake_cfg, rng,
                                         dcfg.tau_min, dcfg.tau_max);
    }

    // one generator update
    ParamStore grads = student.params.zeros_like();
    double pseudo_loss_acc = 0.0;
    for (int b = 0; b < dcfg.batch; ++b) {
      const int gap = static_cast<int>(rng.integer(static_cast<uint64_t>(plan.pseudo_offset + 3)));
      CondSample cs = draw_cond_sample(spec, dcfg.cond_classes, plan, gap, rng.uniform() < 0.5,
                                       rng, student.cfg.has_audio_layer);

      // walk the grid down to a random entry point without gradients
      const size_t t_idx = rng.integer(grid.step_grid.size());
      Mat z = cs.input.seq;
      {
        Rng noise = rng.fork(0x7a696e69u);
        for (size_t t = 0; t < cs.input.layout.size(); ++t) {
          if (!cs.input.layout.noise_flags[t]) continue;
          for (Eigen::Index f = 0; f < z.cols(); ++f)
            z(static_cast<Eigen::Index>(t), f) = noise.gaussian();
        }
      }
      for (size_t j = 0; j < t_idx; ++j) {
        Mat v = denoiser_forward(student, z, grid.step_grid[j], cs.cond, cs.input.layout);
        Mat x0 = x0_on_noisy(z, grid.step_grid[j], v, cs.input.layout);
        Mat eps(z.rows(), z.cols());
        Rng noise = rng.fork(0x72656e6fu + j);
        for (Eigen::Index r = 0; r < eps.rows(); ++r)
          for (Eigen::Index c2 = 0; c2 < eps.cols(); ++c2) eps(r, c2) = noise.gaussian();
        z = renoise_on_noisy(x0, grid.step_grid[j + 1], eps, cs.input.layout);
      }
      const double t_gen = grid.step_grid[t_idx];

      // generator x0 with gradient bookkeeping
      ForwardCacheHandle cache;
      Mat v_gen = denoiser_forward(student, z, t_gen, cs.cond, cs.input.layout, &cache);
      Mat x0_gen = x0_on_noisy(z, t_gen, v_gen, cs.input.layout);

      // renoise and score
      const double tau = rng.uniform(dcfg.tau_min, dcfg.tau_max);
      Mat eps_r(z.rows(), z.cols());
      {
        Rng noise = rng.fork(0x866u);
        for (Eigen::Index r = 0; r < eps_r.rows(); ++r)
          for (Eigen::Index c2 = 0; c2 < eps_r.cols(); ++c2) eps_r(r, c2) = noise.gaussian();
      }
      Mat x_tau = renoise_on_noisy(x0_gen, tau, eps_r, cs.input.layout);

      auto [alpha_a, alpha_t] = cfg_scales_at(tau, phase_gcfg);
      Mat v_real = phase_a ? real_score_twin(eps_audio, *eps_text, x_tau, tau, cs.cond, alpha_a,
                                             alpha_t, cs.input.layout)
                           : real_score_vanilla(eps_audio, x_tau, tau, cs.cond, alpha_a, alpha_t,
                                                cs.input.layout);
      Mat x0_real = x0_on_noisy(x_tau, tau, v_real, cs.input.layout);
      Mat v_fake = fake_score_cond(fake, x_tau, tau, cs.cond, cs.input.layout);
      Mat x0_fake = x0_on_noisy(x_tau, tau, v_fake, cs.input.layout);

      // restrict the DMD difference to the noisy rows
      Mat g_slice = x0_gen.middleRows(M, N);
      Mat r_slice = x0_real.middleRows(M, N);
      Mat f_slice = x0_fake.middleRows(M, N);
      auto [pl, d_slice] = dmd_generator_grad(g_slice, r_slice, f_slice, dcfg.dmd_weight_eps);
      pseudo_loss_acc += pl / dcfg.batch;

      // d(pseudo)/d(velocity) = -sigma(t) * d(pseudo)/d(x0_gen) on noisy rows
      Mat d_v = Mat::Zero(z.rows(), z.cols());
      d_v.middleRows(M, N) = (-sigma_of(t_gen) / dcfg.batch) * d_slice;
      denoiser_backward(student, cache, d_v, grads);
    }
    if (!grads.all_finite())
      throw NumericError("distill_run: non-finite generator gradient at step " +
                         std::to_string(step));
    student_adam.step(student.params, grads, gen_cfg, dcfg.student_trainable);

    MetricRow row;
    row.step = step;
    row.phase = phase;
    row.loss_fake = last_fake_loss;
    row.pseudo_loss = pseudo_loss_acc;
    row.seed = dcfg.seed;
    if (step % dcfg.eval_interval == 0 || step + 1 == total_steps) {
      double sync_acc = 0.0;
      int sync_n = 0;
      std::vector<Clip> clips;
      std::vector<TextClass> labels;
      for (int e = 0; e < dcfg.eval_clips; ++e) {
        CondSample cs = draw_cond_sample(spec, ClassDistribution::uniform(), plan,
                                         plan.pseudo_offset, false, eval_rng,
                                         student.cfg.has_audio_layer);
        Rng roll = eval_rng.fork(0x65726f6cu);
        Mat x0 = student_rollout(student, cs.input, cs.cond, grid, roll);
        Clip clip;
        clip.data = x0.middleRows(M, N);
        if (!clip.data.allFinite())
          throw NumericError("distill_run: non-finite eval sample at step " +
                             std::to_string(step));
        Vec corr = sync_corr(clip, cs.window_audio, spec);
        sync_acc += corr.mean();
        ++sync_n;
        clips.push_back(std::move(clip));
        labels.push_back(cs.cls);
      }
      last_sync = sync_acc / sync_n;
      last_align = text_align_score(probe, clips, labels, spec);
    }
    row.sync_corr_eval = last_sync;
    row.text_align_eval = last_align;
    if (!std::isfinite(row.loss_fake) || !std::isfinite(row.pseudo_loss))
      throw NumericError("distill_run: non-finite metric at step " + std::to_string(step) +
                         " (loss_fake=" + std::to_string(row.loss_fake) +
                         ", pseudo_loss=" + std::to_string(row.pseudo_loss) + ")");
    result.rows.push_back(std::move(row));
  }
  return result;
}

}  // namespace avatarlab
