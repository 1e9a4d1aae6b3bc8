#include <doctest.h>

#include "avatarlab/denoiser.hpp"

#include <filesystem>

using namespace avatarlab;

namespace {

DenoiserConfig small_cfg(int persons, bool audio) {
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

BatchSample random_sample(const DenoiserConfig& cfg, int frames, uint64_t seed, bool with_audio,
                          bool pseudo_tail = true) {
  Rng rng(seed);
  WorldSpec spec{cfg.persons};
  BatchSample s;
  s.noisy = rng.gaussian_mat(frames, spec.frame_dim());
  s.tau = rng.uniform(30.0, 970.0);
  s.cond.text_class = static_cast<int>(rng.integer(kNumClasses + 1));
  if (with_audio) {
    Mat env(cfg.persons, frames);
    for (int p = 0; p < cfg.persons; ++p)
      for (int t = 0; t < frames; ++t) env(p, t) = rng.uniform();
    s.cond.audio = env;
  }
  s.layout = TokenLayout::contiguous(frames);
  if (pseudo_tail) {
    // noise-free context head and an offset pseudo tail, as used in chunked runs
    s.layout.noise_flags[0] = 0;
    s.layout.noise_flags[1] = 0;
    s.layout.noise_flags[static_cast<size_t>(frames - 1)] = 0;
    s.layout.positions[static_cast<size_t>(frames - 1)] += 10;
  }
  return s;
}

OutputLoss mse_loss(std::vector<Mat> targets) {
  return [targets = std::move(targets)](size_t i, const Mat& out) {
    Mat diff = out - targets[i];
    double value = diff.squaredNorm() / diff.size();
    Mat d = 2.0 * diff / diff.size();
    return std::make_pair(value, d);
  };
}

}  // namespace

TEST_CASE("x0_from_velocity algebra") {
  Rng rng(3);
  Mat x0 = rng.gaussian_mat(4, 5);
  Mat eps = rng.gaussian_mat(4, 5);
  double tau = 420.0;
  Mat x_tau = flow_interpolate(x0, tau, eps);
  Mat v = eps - x0;
  CHECK((x0_from_velocity(x_tau, tau, v) - x0).cwiseAbs().maxCoeff() < 1e-12);

  Mat noisy = rng.gaussian_mat(4, 5);
  CHECK(x0_from_velocity(noisy, 0.0, v) == noisy);

  Mat one = Mat::Constant(1, 1, 1.0);
  Mat two = Mat::Constant(1, 1, 2.0);
  CHECK(x0_from_velocity(one, 500.0, two)(0, 0) == 0.0);

  CHECK_THROWS_AS(sigma_of(-1.0), std::invalid_argument);
  CHECK_THROWS_AS(sigma_of(1000.5), std::invalid_argument);
}

TEST_CASE("renoise endpoints") {
  Rng rng(4);
  Mat x0 = rng.gaussian_mat(3, 4);
  Mat eps = rng.gaussian_mat(3, 4);
  CHECK(flow_interpolate(x0, 0.0, eps) == x0);
  CHECK(flow_interpolate(x0, 1000.0, eps) == eps);
  CHECK(flow_interpolate(Mat::Constant(1, 1, 2.0), 500.0, Mat::Zero(1, 1))(0, 0) == 1.0);
}

TEST_CASE("zero out_proj zeroes the output") {
  auto model = Denoiser::init(small_cfg(2, true), 11);
  model.params.tensor(groups::kOutProj, "w").setZero();
  model.params.tensor(groups::kOutProj, "b").setZero();
  BatchSample s = random_sample(model.cfg, 9, 5, true);
  Mat out = denoiser_forward(model, s.noisy, s.tau, s.cond, s.layout);
  CHECK(out.cwiseAbs().maxCoeff() == 0.0);
}

TEST_CASE("forward is deterministic") {
  auto model = Denoiser::init(small_cfg(1, true), 2);
  BatchSample s = random_sample(model.cfg, 8, 9, true);
  Mat a = denoiser_forward(model, s.noisy, s.tau, s.cond, s.layout);
  Mat b = denoiser_forward(model, s.noisy, s.tau, s.cond, s.layout);
  CHECK(a == b);
}

TEST_CASE("permuting persons permutes the output identically") {
  auto model = Denoiser::init(small_cfg(2, true), 7);
  WorldSpec spec{2};
  BatchSample s = random_sample(model.cfg, 8, 21, true);
  Mat out = denoiser_forward(model, s.noisy, s.tau, s.cond, s.layout);

  // swap the two person channel blocks, their audio streams (masks follow layout)
  Mat swapped = s.noisy;
  swapped.middleCols(0, kPersonChannels) = s.noisy.middleCols(kPersonChannels, kPersonChannels);
  swapped.middleCols(kPersonChannels, kPersonChannels) = s.noisy.middleCols(0, kPersonChannels);
  CondSet cond2 = s.cond;
  cond2.audio->row(0) = s.cond.audio->row(1);
  cond2.audio->row(1) = s.cond.audio->row(0);

  Mat out2 = denoiser_forward(model, swapped, s.tau, cond2, s.layout);
  Mat expect = out;
  expect.middleCols(0, kPersonChannels) = out.middleCols(kPersonChannels, kPersonChannels);
  expect.middleCols(kPersonChannels, kPersonChannels) = out.middleCols(0, kPersonChannels);
  CHECK((out2 - expect).cwiseAbs().maxCoeff() < 1e-12);
  CHECK((out2.col(spec.camera_channel()) - out.col(spec.camera_channel())).cwiseAbs().maxCoeff() <
        1e-12);
}

TEST_CASE("text teacher rejects audio routing") {
  auto model = Denoiser::init(small_cfg(1, false), 3);
  BatchSample s = random_sample(model.cfg, 6, 2, true);
  CHECK_THROWS_AS(denoiser_forward(model, s.noisy, s.tau, s.cond, s.layout),
                  std::invalid_argument);
  Mat ok = denoiser_forward(model, s.noisy, s.tau, s.cond.without_audio(), s.layout);
  CHECK(ok.allFinite());
}

TEST_CASE("noise-free frames use the tau=0 time embedding") {
  auto model = Denoiser::init(small_cfg(1, true), 5);
  BatchSample s = random_sample(model.cfg, 7, 4, true, false);
  std::fill(s.layout.noise_flags.begin(), s.layout.noise_flags.end(), 0);
  Mat at_700 = denoiser_forward(model, s.noisy, 700.0, s.cond, s.layout);
  Mat at_0 = denoiser_forward(model, s.noisy, 0.0, s.cond, s.layout);
  CHECK(at_700 == at_0);
}

TEST_CASE("pseudo-frame position index changes the output") {
  auto model = Denoiser::init(small_cfg(1, true), 6);
  BatchSample s = random_sample(model.cfg, 8, 13, true, false);
  Mat base = denoiser_forward(model, s.noisy, s.tau, s.cond, s.layout);
  s.layout.positions.back() += 10;
  Mat moved = denoiser_forward(model, s.noisy, s.tau, s.cond, s.layout);
  CHECK((base - moved).cwiseAbs().maxCoeff() > 0.0);
}

TEST_CASE("grad_params: constant loss gives zero gradients") {
  auto model = Denoiser::init(small_cfg(1, true), 8);
  std::vector<BatchSample> batch{random_sample(model.cfg, 6, 3, true)};
  auto [value, grads] = grad_params(
      model, batch, [](size_t, const Mat& out) {
        return std::make_pair(4.2, Mat::Zero(out.rows(), out.cols()).eval());
      });
  CHECK(value == 4.2);
  for (double g : grads.flat()) CHECK(g == 0.0);
}

TEST_CASE("frozen groups can be masked out of a gradient") {
  auto model = Denoiser::init(small_cfg(1, true), 9);
  std::vector<BatchSample> batch{random_sample(model.cfg, 6, 5, true)};
  std::vector<Mat> targets{Mat::Zero(6, WorldSpec{1}.frame_dim())};
  auto [value, grads] = grad_params(model, batch, mse_loss(targets));
  grads.keep_only_groups({groups::kSelfAttn});
  for (const auto& spec : grads.specs()) {
    auto t = grads.tensor(spec.group, spec.name);
    if (spec.group == groups::kSelfAttn)
      CHECK(t.cwiseAbs().maxCoeff() > 0.0);
    else
      CHECK(t.cwiseAbs().maxCoeff() == 0.0);
  }
}

TEST_CASE("quadratic probe gradient is exact") {
  auto model = Denoiser::init(small_cfg(1, true), 10);
  auto objective = [](const ParamStore& p) {
    double s = 0.0;
    for (double x : p.flat()) s += x * x;
    return s;
  };
  ParamStore analytic = model.params.zeros_like();
  for (size_t i = 0; i < analytic.size(); ++i)
    analytic.flat()[i] = 2.0 * model.params.flat()[i];
  // a quadratic has no truncation error, so a wide eps sidesteps cancellation
  double err = finite_diff_check_objective(objective, model.params, analytic, 0.05, 150, 1);
  CHECK(err < 1e-8);
}

TEST_CASE("finite differences confirm the full backward pass") {
  // two persons + audio layer + mixed noise flags exercises every group
  auto model = Denoiser::init(small_cfg(2, true), 12);
  std::vector<BatchSample> batch{random_sample(model.cfg, 8, 31, true),
                                 random_sample(model.cfg, 8, 32, false)};
  Rng rng(33);
  std::vector<Mat> targets{rng.gaussian_mat(8, WorldSpec{2}.frame_dim()),
                           rng.gaussian_mat(8, WorldSpec{2}.frame_dim())};
  double err = finite_diff_check(model, batch, mse_loss(targets), 1e-5, 200, 2);
  CHECK(err < 1e-4);
}

TEST_CASE("finite_diff_check rejects eps = 0") {
  auto model = Denoiser::init(small_cfg(1, false), 1);
  std::vector<BatchSample> batch{random_sample(model.cfg, 4, 3, false)};
  std::vector<Mat> targets{Mat::Zero(4, WorldSpec{1}.frame_dim())};
  CHECK_THROWS_AS(finite_diff_check(model, batch, mse_loss(targets), 0.0), std::invalid_argument);
}

TEST_CASE("checkpoints round-trip bitwise with their config") {
  auto model = Denoiser::init(small_cfg(2, true), 14);
  auto dir = std::filesystem::temp_directory_path() / "avatarlab_ckpt_test";
  std::filesystem::create_directories(dir);
  model.save(dir / "m");
  Denoiser back = Denoiser::load(dir / "m");
  CHECK(back.cfg.persons == 2);
  CHECK(back.cfg.has_audio_layer);
  REQUIRE(back.params.size() == model.params.size());
  for (size_t i = 0; i < model.params.size(); ++i)
    CHECK(back.params.flat()[i] == model.params.flat()[i]);
  std::filesystem::remove_all(dir);
}

TEST_CASE("audio layer insertion preserves existing groups bitwise") {
  auto model = Denoiser::init(small_cfg(1, false), 15);
  ParamStore before = model.params;
  model.insert_audio_layer(99);
  CHECK(model.cfg.has_audio_layer);
  CHECK(model.params.has_group(groups::kAudioCrossAttn));
  for (const char* g : {groups::kFrameEmbed, groups::kSelfAttn, groups::kTextProj,
                        groups::kTimeEmbed, groups::kOutProj})
    CHECK(ParamStore::group_equal(before, model.params, g));
}

TEST_CASE("silent explicit audio equals absent audio on an audio model") {
  auto model = Denoiser::init(small_cfg(1, true), 16);
  BatchSample s = random_sample(model.cfg, 6, 8, false);
  Mat absent = denoiser_forward(model, s.noisy, s.tau, s.cond, s.layout);
  CondSet explicit_silent = s.cond;
  explicit_silent.audio = Mat::Zero(1, 6);
  Mat silent = denoiser_forward(model, s.noisy, s.tau, explicit_silent, s.layout);
  CHECK(absent == silent);
}
