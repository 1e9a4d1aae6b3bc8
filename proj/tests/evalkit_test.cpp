#include <doctest.h>

#include "avatarlab/evalkit.hpp"
#include "test_util.hpp"

#include <nlohmann/json.hpp>

using namespace avatarlab;

TEST_CASE("gsb_score arithmetic") {
  CHECK(gsb_score(10, 5, 5) == 1.5);
  CHECK(gsb_score(7, 3, 7) == 1.0);
  CHECK(gsb_score(33, 33, 30) == doctest::Approx(66.0 / 63.0).epsilon(1e-15));
  CHECK_THROWS_AS(gsb_score(4, 0, 0), std::invalid_argument);
  CHECK_THROWS_AS(gsb_score(-1, 2, 2), std::invalid_argument);
}

TEST_CASE("gsb_score matches a higher-precision oracle on random triples") {
  Rng rng(404);
  for (int i = 0; i < 1000; ++i) {
    long long g = static_cast<long long>(rng.integer(1000000));
    long long s = static_cast<long long>(rng.integer(1000000));
    long long b = static_cast<long long>(rng.integer(1000000));
    if (b + s == 0) s = 1;
    CHECK(is_nearest_double(g + s, b + s, gsb_score(g, s, b)));
  }
}

TEST_CASE("sync_corr ground truth, inversion and conventions") {
  WorldSpec spec{2};
  AudioSet audio = make_audio(60, 2, 3);
  Clip clip = sample_clip(spec, TextClass::talk, audio, 8);
  Vec corr = sync_corr(clip, audio, spec);
  for (int p = 0; p < 2; ++p) CHECK(corr[p] == doctest::Approx(1.0).epsilon(1e-12));

  Clip inverted = clip;
  for (int p = 0; p < 2; ++p)
    inverted.data.col(spec.channel(p, Role::mouth)) =
        -audio.streams.row(p).transpose();
  Vec neg = sync_corr(inverted, audio, spec);
  for (int p = 0; p < 2; ++p) CHECK(neg[p] == doctest::Approx(-1.0).epsilon(1e-12));

  Clip constant = clip;
  constant.data.col(spec.channel(0, Role::mouth)).setConstant(0.4);
  CHECK(sync_corr(constant, audio, spec)[0] == 0.0);

  Clip tiny;
  tiny.data = Mat::Zero(2, spec.frame_dim());
  CHECK_THROWS_AS(sync_corr(tiny, audio, spec), std::invalid_argument);
}

TEST_CASE("sync_corr is invariant under joint affine rescaling") {
  WorldSpec spec{1};
  AudioSet audio = make_audio(50, 1, 5);
  Clip clip = sample_clip(spec, TextClass::idle, audio, 2);
  Vec base = sync_corr(clip, audio, spec);
  Clip scaled = clip;
  scaled.data.col(spec.channel(0, Role::mouth)) =
      3.0 * clip.data.col(spec.channel(0, Role::mouth)).array() + 0.7;
  AudioSet scaled_audio = audio;
  scaled_audio.streams = 2.0 * audio.streams.array() - 0.1;
  Vec after = sync_corr(scaled, scaled_audio, spec);
  CHECK(after[0] == doctest::Approx(base[0]).epsilon(1e-12));
}

TEST_CASE("linear probe separates the ground-truth classes") {
  WorldSpec spec{1};
  const int T = 30;
  LinearProbe probe = fit_probe(spec, T, 24, 77);
  std::vector<Clip> clips;
  std::vector<TextClass> labels;
  Rng rng(1234);
  for (int i = 0; i < 1000; ++i) {
    TextClass c = static_cast<TextClass>(rng.integer(kNumClasses));
    AudioSet audio = make_audio(T, 1, rng.raw());
    clips.push_back(sample_clip(spec, c, audio, rng.raw()));
    labels.push_back(c);
  }
  double acc = text_align_score(probe, clips, labels, spec);
  CHECK(acc >= 0.99);
}

TEST_CASE("probe accuracy drops to chance under permuted labels") {
  WorldSpec spec{1};
  const int T = 30;
  LinearProbe probe = fit_probe(spec, T, 24, 78);
  std::vector<Clip> clips;
  std::vector<TextClass> labels;
  Rng rng(97);
  for (int i = 0; i < 1000; ++i) {
    TextClass c = static_cast<TextClass>(rng.integer(kNumClasses));
    AudioSet audio = make_audio(T, 1, rng.raw());
    clips.push_back(sample_clip(spec, c, audio, rng.raw()));
    labels.push_back(static_cast<TextClass>(rng.integer(kNumClasses)));  // scrambled
  }
  double acc = text_align_score(probe, clips, labels, spec);
  CHECK(acc > 1.0 / kNumClasses - 0.05);
  CHECK(acc < 1.0 / kNumClasses + 0.05);
}

TEST_CASE("single correct clip scores 1.0") {
  WorldSpec spec{1};
  LinearProbe probe = fit_probe(spec, 30, 24, 79);
  AudioSet audio = make_audio(30, 1, 4);
  std::vector<Clip> clips{sample_clip(spec, TextClass::walk_left, audio, 5)};
  std::vector<TextClass> labels{TextClass::walk_left};
  CHECK(text_align_score(probe, clips, labels, spec) == 1.0);
  CHECK_THROWS_AS(text_align_score(probe, {}, {}, spec), std::invalid_argument);
}

TEST_CASE("identity consistency of ground truth is exactly 1") {
  WorldSpec spec{2};
  AudioSet audio = make_audio(40, 2, 6);
  Clip clip = sample_clip(spec, TextClass::idle, audio, 9);
  RowVec ref = clip.data.row(0);
  CHECK(identity_consistency(clip, ref, spec) == doctest::Approx(1.0).epsilon(1e-12));

  Clip flipped = clip;
  for (int t = 20; t < 40; ++t) {
    flipped.data(t, spec.channel(0, Role::id_a)) *= -1.0;
    flipped.data(t, spec.channel(0, Role::id_b)) *= -1.0;
  }
  CHECK(identity_consistency(flipped, ref, spec) < 1.0);

  Clip zeroed = clip;
  zeroed.data.col(spec.channel(1, Role::id_a)).setZero();
  zeroed.data.col(spec.channel(1, Role::id_b)).setZero();
  CHECK_THROWS_AS(identity_consistency(zeroed, ref, spec), std::invalid_argument);
}

TEST_CASE("motion variance orders walk above idle and scales quadratically") {
  WorldSpec spec{1};
  Clip constant;
  constant.data = Mat::Constant(20, spec.frame_dim(), 0.3);
  CHECK(motion_variance(constant, spec) == 0.0);

  double walk_mean = 0.0, idle_mean = 0.0;
  for (int i = 0; i < 100; ++i) {
    AudioSet audio = make_audio(40, 1, 1000 + i);
    walk_mean += motion_variance(sample_clip(spec, TextClass::walk_right, audio, 2000 + i), spec);
    idle_mean += motion_variance(sample_clip(spec, TextClass::idle, audio, 2000 + i), spec);
  }
  CHECK(walk_mean / 100.0 > idle_mean / 100.0);

  AudioSet audio = make_audio(40, 1, 7);
  Clip clip = sample_clip(spec, TextClass::wave, audio, 8);
  Clip doubled = clip;
  doubled.data *= 2.0;
  CHECK(motion_variance(doubled, spec) ==
        doctest::Approx(4.0 * motion_variance(clip, spec)).epsilon(1e-12));
}

TEST_CASE("boundary smoothness flags a deliberate jump") {
  WorldSpec spec{1};
  const int F = spec.frame_dim();
  Clip smooth;
  smooth.data = Mat::Zero(40, F);
  for (int t = 0; t < 40; ++t) smooth.data.row(t).setConstant(0.01 * t);
  smooth.chunk_boundaries = {20};
  CHECK(boundary_smoothness(smooth) >= 0.0);
  CHECK(boundary_smoothness(smooth) < 2.0);

  Clip jumpy = smooth;
  jumpy.data.bottomRows(20).array() += 0.1;  // 10x the typical step at the boundary
  CHECK(boundary_smoothness(jumpy) >= 5.0);

  Clip constant;
  constant.data = Mat::Zero(10, F);
  constant.chunk_boundaries = {5};
  CHECK(boundary_smoothness(constant) == doctest::Approx(0.0));

  Clip unbounded;
  unbounded.data = Mat::Zero(10, F);
  CHECK_THROWS_AS(boundary_smoothness(unbounded), std::invalid_argument);
}

TEST_CASE("gsb csv parsing and summary") {
  std::string csv =
      "dimension,G,S,B\noverall,10,5,5\ntext_alignment,33,33,30\nlip_sync,1,1,1\n";
  auto records = parse_gsb_csv(csv);
  REQUIRE(records.size() == 3);
  CHECK(records[0].dimension == GsbDimension::overall);
  CHECK(records[0].good == 10);
  auto summary = gsb_summary(records);
  CHECK(summary["overall"]["score"].get<double>() == 1.5);
  CHECK_THROWS_AS(parse_gsb_csv("dimension,G,S,B\nbogus,1,1,1\n"), std::invalid_argument);
}
