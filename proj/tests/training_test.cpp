#include <doctest.h>

#include "avatarlab/training.hpp"

using namespace avatarlab;

namespace {

DenoiserConfig tiny_cfg(int persons, bool audio) {
  DenoiserConfig c;
  c.persons = persons;
  c.hidden = 32;
  c.heads = 4;
  c.blocks = 2;
  c.text_dim = 8;
  c.audio_dim = 8;
  c.enc_hidden = 8;
  c.has_audio_layer = audio;
  return c;
}

FlowGeometry tiny_geom() {
  FlowGeometry g;
  g.motion_frames = 3;
  g.new_frames = 8;
  g.max_gap = 4;
  return g;
}

Dataset tiny_dataset(int n, bool with_audio, uint64_t seed) {
  WorldSpec spec{1};
  return sample_dataset(spec, ClassDistribution::uniform(), n, tiny_geom().required_clip_frames(),
                        with_audio, seed);
}

}  // namespace

TEST_CASE("flow batch assembly matches the interpolation invariant") {
  Dataset ds = tiny_dataset(6, true, 3);
  Rng rng(5);
  const FlowGeometry geom = tiny_geom();
  const int M = geom.motion_frames;
  const int N = geom.new_frames;
  std::vector<size_t> idx{0, 1, 2};
  FlowBatch batch = make_flow_batch(ds, geom, idx, rng);
  REQUIRE(batch.samples.size() == 3);
  for (size_t i = 0; i < batch.samples.size(); ++i) {
    const auto& s = batch.samples[i];
    const double sg = sigma_of(s.tau);
    const auto& lc = ds.clips[idx[i]];
    // noisy rows: x_tau = (1-sigma) x0 + sigma eps and v* = eps - x0 imply
    // x_tau - sigma * v* = x0, which must be the clip's own frame
    for (int t = M; t < M + N; ++t) {
      auto r = static_cast<Eigen::Index>(t);
      Mat x0_row = s.noisy.row(r) - sg * batch.targets[i].row(r);
      CHECK((x0_row - lc.clip.data.row(t)).cwiseAbs().maxCoeff() < 1e-9);
    }
    // context and anchor rows are clean: either the true frame at that
    // position or the window-start frame (inference-style conditioning)
    for (size_t t = 0; t < s.layout.size(); ++t) {
      if (s.layout.noise_flags[t]) continue;
      auto r = static_cast<Eigen::Index>(t);
      int src = s.layout.positions[t];
      double to_true = (s.noisy.row(r) - lc.clip.data.row(src)).cwiseAbs().maxCoeff();
      double to_start = (s.noisy.row(r) - lc.clip.data.row(M)).cwiseAbs().maxCoeff();
      CHECK(std::min(to_true, to_start) == 0.0);
    }
  }
}

TEST_CASE("flow_match_loss closed forms") {
  Dataset ds = tiny_dataset(4, true, 7);
  Rng rng(9);
  std::vector<size_t> idx{0, 1};
  FlowBatch batch = make_flow_batch(ds, tiny_geom(), idx, rng);

  Denoiser zero = Denoiser::init(tiny_cfg(1, true), 4);
  zero.params.tensor(groups::kOutProj, "w").setZero();
  zero.params.tensor(groups::kOutProj, "b").setZero();

  // zero-output model: loss = mean over noisy rows of ||eps - x0||^2 / F
  double expect = 0.0;
  for (size_t i = 0; i < batch.samples.size(); ++i) {
    const auto& layout = batch.samples[i].layout;
    double acc = 0.0;
    for (size_t t = 0; t < layout.size(); ++t)
      if (layout.noise_flags[t])
        acc += batch.targets[i].row(static_cast<Eigen::Index>(t)).squaredNorm();
    expect += acc / (layout.noisy_count() * batch.targets[i].cols() * batch.samples.size());
  }
  CHECK(flow_match_loss(zero, batch) == doctest::Approx(expect).epsilon(1e-12));

  // a model matching v* exactly has zero loss: v* == 0 when targets vanish
  FlowBatch degenerate = batch;
  for (auto& t : degenerate.targets) t.setZero();
  CHECK(flow_match_loss(zero, degenerate) == 0.0);

  // order invariance
  FlowBatch swapped = batch;
  std::swap(swapped.samples[0], swapped.samples[1]);
  std::swap(swapped.targets[0], swapped.targets[1]);
  CHECK(flow_match_loss(zero, swapped) ==
        doctest::Approx(flow_match_loss(zero, batch)).epsilon(1e-12));
}

TEST_CASE("stage freezing rules hold bitwise") {
  Dataset with_audio = tiny_dataset(8, true, 11);
  Dataset no_audio = tiny_dataset(8, false, 12);

  // stage 1 with text_proj frozen
  Denoiser m1 = Denoiser::init(tiny_cfg(1, false), 5);
  ParamStore before1 = m1.params;
  OptConfig opt;
  opt.steps = 3;
  opt.batch = 2;
  opt.seed = 1;
  pretrain_stage(m1, no_audio, 1, opt, tiny_geom(), /*freeze_text_proj=*/true);
  CHECK(ParamStore::group_equal(before1, m1.params, groups::kTextProj));
  CHECK(!ParamStore::group_equal(before1, m1.params, groups::kSelfAttn));
  CHECK(!m1.params.has_group(groups::kAudioCrossAttn));

  // stage 1 default trains text_proj
  Denoiser m1b = Denoiser::init(tiny_cfg(1, false), 5);
  pretrain_stage(m1b, no_audio, 1, opt, tiny_geom());
  CHECK(!ParamStore::group_equal(before1, m1b.params, groups::kTextProj));

  // stage 2 inserts the audio layer and trains only it
  Denoiser m2 = m1;
  ParamStore before2 = m2.params;
  pretrain_stage(m2, with_audio, 2, opt, tiny_geom());
  CHECK(m2.params.has_group(groups::kAudioCrossAttn));
  for (const char* g : {groups::kFrameEmbed, groups::kSelfAttn, groups::kTextProj,
                        groups::kTimeEmbed, groups::kOutProj})
    CHECK(ParamStore::group_equal(before2, m2.params, g));

  // stage 2 demands audio-bearing data
  Denoiser m3 = m1;
  CHECK_THROWS_AS(pretrain_stage(m3, no_audio, 2, opt, tiny_geom()), std::invalid_argument);
  // stage 1 on a model that already has audio layers is a contract violation
  Denoiser m4 = Denoiser::init(tiny_cfg(1, true), 6);
  CHECK_THROWS_AS(pretrain_stage(m4, no_audio, 1, opt, tiny_geom()), std::invalid_argument);
}

TEST_CASE("short stage-1 training reduces the flow loss substantially") {
  Dataset ds = tiny_dataset(64, false, 21);
  Denoiser model = Denoiser::init(tiny_cfg(1, false), 31);
  OptConfig opt;
  opt.steps = 220;
  opt.batch = 8;
  opt.seed = 3;
  auto result = pretrain_stage(model, ds, 1, opt, tiny_geom());
  double head = 0.0, tail = 0.0;
  for (int i = 0; i < 10; ++i) {
    head += result.loss_history[static_cast<size_t>(i)] / 10.0;
    tail += result.loss_history[result.loss_history.size() - 1 - static_cast<size_t>(i)] / 10.0;
  }
  CHECK(tail < 0.7 * head);
}

TEST_CASE("generator_step honors the grid and the identity oracle") {
  Denoiser zero = Denoiser::init(tiny_cfg(1, true), 8);
  zero.params.tensor(groups::kOutProj, "w").setZero();
  zero.params.tensor(groups::kOutProj, "b").setZero();
  StudentConfig grid;
  TokenLayout layout = TokenLayout::contiguous(6);
  Rng rng(2);
  Mat z = rng.gaussian_mat(6, 7);
  CondSet cond = CondSet::of_class(TextClass::idle);

  CHECK_THROWS_AS(generator_step(zero, grid, z, 333.0, cond, layout), std::invalid_argument);
  // zero model predicts v = 0, so the x0 estimate is z itself at any grid step
  Mat x0 = generator_step(zero, grid, z, 750.0, cond, layout);
  CHECK(x0 == z);
  Mat x0h = generator_step(zero, grid, z, 1000.0, cond, layout);
  CHECK(x0h.allFinite());
  CHECK(x0h.rows() == 6);
}

TEST_CASE("renoise endpoints and arithmetic") {
  Rng rng(3);
  Mat x0 = rng.gaussian_mat(3, 4);
  Mat eps = rng.gaussian_mat(3, 4);
  CHECK(renoise(x0, 0.0, eps) == x0);
  CHECK(renoise(x0, 1000.0, eps) == eps);
  CHECK(renoise(Mat::Constant(1, 1, 2.0), 500.0, Mat::Zero(1, 1))(0, 0) == 1.0);
}

TEST_CASE("dmd_generator_grad arithmetic and degenerate cases") {
  Mat g = Mat::Constant(1, 1, 1.0);
  Mat r = Mat::Constant(1, 1, 2.0);
  Mat f = Mat::Constant(1, 1, 5.0);
  auto [pl, d] = dmd_generator_grad(g, r, f, 0.0);
  CHECK(d(0, 0) == 3.0);  // w = 1/|2-1| = 1, fake - real = 3
  CHECK(pl == 3.0);

  auto [pl2, d2] = dmd_generator_grad(g, r, r, 1e-3);
  CHECK(d2(0, 0) == 0.0);

  // doubling (fake - real) doubles the gradient
  Mat f2 = Mat::Constant(1, 1, 8.0);
  auto [pl3, d3] = dmd_generator_grad(g, r, f2, 0.0);
  CHECK(d3(0, 0) == doctest::Approx(2.0 * d(0, 0)));

  Mat bad = Mat::Constant(2, 1, 0.0);
  CHECK_THROWS_AS(dmd_generator_grad(g, bad, f, 0.0), std::invalid_argument);
  Mat inf = Mat::Constant(1, 1, std::numeric_limits<double>::infinity());
  CHECK_THROWS_AS(dmd_generator_grad(g, inf, f, 0.0), NumericError);

  // gradient-descent direction moves the generator toward the real mode when
  // the fake score is held at the generator's own output
  double x_gen = 1.0, x_real = 2.0, lr = 0.1;
  auto [pl4, d4] = dmd_generator_grad(Mat::Constant(1, 1, x_gen), Mat::Constant(1, 1, x_real),
                                      Mat::Constant(1, 1, x_gen), 1e-3);
  double moved = x_gen - lr * d4(0, 0);
  CHECK(std::abs(moved - x_real) < std::abs(x_gen - x_real));
}

TEST_CASE("fake_score_update with zero learning rate is a no-op") {
  Denoiser fake = Denoiser::init(tiny_cfg(1, true), 9);
  ParamStore before = fake.params;
  Adam adam(fake.params);
  AdamConfig cfg;
  cfg.lr = 0.0;
  Rng rng(6);
  TokenLayout layout = TokenLayout::contiguous(6);
  std::vector<BatchSample> samples(1);
  samples[0].cond = CondSet::of_class(TextClass::talk);
  samples[0].cond.audio = Mat::Zero(1, 6);
  samples[0].layout = layout;
  std::vector<Mat> x0s{rng.gaussian_mat(6, 7)};
  double loss = fake_score_update(fake, adam, samples, x0s, cfg, rng, 20.0, 980.0);
  CHECK(std::isfinite(loss));
  for (const auto& g : fake.params.groups()) CHECK(ParamStore::group_equal(before, fake.params, g));
}

TEST_CASE("distill_run with zero steps returns the student bitwise") {
  Denoiser teacher = Denoiser::init(tiny_cfg(1, true), 10);
  DistillConfig dcfg;
  dcfg.phase_a_steps = 0;
  dcfg.phase_b_steps = 0;
  StudentConfig grid;
  ChunkPlan plan;
  plan.motion_frames = 3;
  plan.new_frames = 8;
  plan.pseudo_offset = 2;
  LinearProbe probe = fit_probe(WorldSpec{1}, 8, 4, 1);
  DistillResult result = distill_run(teacher, nullptr, teacher, GuidanceConfig{}, dcfg, grid, plan,
                                     probe);
  CHECK(result.rows.empty());
  for (const auto& g : teacher.params.groups())
    CHECK(ParamStore::group_equal(teacher.params, result.student.params, g));
}

TEST_CASE("identical stub teachers produce zero generator gradients") {
  Denoiser stub = Denoiser::init(tiny_cfg(1, true), 11);
  stub.params.tensor(groups::kOutProj, "w").setZero();
  stub.params.tensor(groups::kOutProj, "b").setZero();
  Denoiser text_stub = Denoiser::init(tiny_cfg(1, false), 12);
  text_stub.params.tensor(groups::kOutProj, "w").setZero();
  text_stub.params.tensor(groups::kOutProj, "b").setZero();

  DistillConfig dcfg;
  dcfg.phase_a_steps = 3;
  dcfg.phase_b_steps = 2;
  dcfg.fake_updates_per_gen = 0;  // keep the fake model at the shared stub
  dcfg.batch = 2;
  dcfg.eval_interval = 100;
  dcfg.eval_clips = 2;
  StudentConfig grid;
  ChunkPlan plan;
  plan.motion_frames = 3;
  plan.new_frames = 8;
  plan.pseudo_offset = 2;
  LinearProbe probe = fit_probe(WorldSpec{1}, 8, 4, 2);

  DistillResult result =
      distill_run(stub, &text_stub, stub, GuidanceConfig{}, dcfg, grid, plan, probe);
  for (const auto& g : stub.params.groups())
    CHECK(ParamStore::group_equal(stub.params, result.student.params, g));
  for (const auto& row : result.rows) CHECK(row.pseudo_loss == 0.0);
}

TEST_CASE("distill_run is deterministic per seed") {
  Denoiser teacher = Denoiser::init(tiny_cfg(1, true), 13);
  Denoiser text = Denoiser::init(tiny_cfg(1, false), 14);
  DistillConfig dcfg;
  dcfg.phase_a_steps = 2;
  dcfg.phase_b_steps = 1;
  dcfg.fake_updates_per_gen = 1;
  dcfg.batch = 1;
  dcfg.eval_interval = 2;
  dcfg.eval_clips = 2;
  dcfg.seed = 77;
  StudentConfig grid;
  ChunkPlan plan;
  plan.motion_frames = 3;
  plan.new_frames = 8;
  plan.pseudo_offset = 2;
  LinearProbe probe = fit_probe(WorldSpec{1}, 8, 4, 3);

  DistillResult a = distill_run(teacher, &text, teacher, GuidanceConfig{}, dcfg, grid, plan, probe);
  DistillResult b = distill_run(teacher, &text, teacher, GuidanceConfig{}, dcfg, grid, plan, probe);
  CHECK(metrics_csv(a.rows) == metrics_csv(b.rows));
  REQUIRE(a.student.params.size() == b.student.params.size());
  for (size_t i = 0; i < a.student.params.size(); ++i)
    CHECK(a.student.params.flat()[i] == b.student.params.flat()[i]);
}

TEST_CASE("metrics csv serialization is stable") {
  std::vector<MetricRow> rows{{0, "twin", 0.5, -1.25, 0.125, 0.5, 7},
                              {1, "vanilla", 0.25, 2.0, 0.25, 0.75, 7}};
  std::string csv = metrics_csv(rows);
  CHECK(csv.find("step,phase,loss_fake,pseudo_loss,sync_corr_eval,text_align_eval,seed") == 0);
  CHECK(csv.find("0,twin,0.5,-1.25,0.125,0.5,7") != std::string::npos);
  CHECK(csv.find("1,vanilla,0.25,2,0.25,0.75,7") != std::string::npos);
}
