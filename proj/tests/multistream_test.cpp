#include <doctest.h>

#include "avatarlab/multistream.hpp"

using namespace avatarlab;

namespace {

AudioTokens random_tokens(int streams, int T, int d, Rng& rng) {
  AudioTokens tok;
  for (int s = 0; s < streams; ++s) {
    tok.keys.push_back(rng.gaussian_mat(T, d));
    tok.values.push_back(rng.gaussian_mat(T, d));
  }
  tok.silent_keys = rng.gaussian_mat(T, d);
  tok.silent_values = rng.gaussian_mat(T, d);
  return tok;
}

// plain single-stream attention with the same windowing, for the reduction check
Mat reference_attention(const Mat& q, const Mat& K, const Mat& V, int radius) {
  const int T = static_cast<int>(q.rows());
  const double inv = 1.0 / std::sqrt(static_cast<double>(q.cols()));
  Mat out = Mat::Zero(T, V.cols());
  for (int t = 0; t < T; ++t) {
    int lo = std::max(0, t - radius), hi = std::min(T - 1, t + radius);
    Eigen::VectorXd sc(hi - lo + 1);
    for (int j = lo; j <= hi; ++j) sc[j - lo] = q.row(t).dot(K.row(j)) * inv;
    double mx = sc.maxCoeff();
    double z = 0.0;
    for (int j = lo; j <= hi; ++j) {
      sc[j - lo] = std::exp(sc[j - lo] - mx);
      z += sc[j - lo];
    }
    for (int j = lo; j <= hi; ++j) out.row(t) += (sc[j - lo] / z) * V.row(j);
  }
  return out;
}

}  // namespace

TEST_CASE("routing follows masks and silences uncovered channels") {
  MaskSet m;
  m.masks = Mat::Zero(2, 5);
  m.masks.row(0) << 1, 1, 0, 0, 0;
  m.masks.row(1) << 0, 0, 1, 1, 0;
  AttnRouting r = build_attention_routing(m, 2);
  CHECK(r.stream_of == std::vector<int>{0, 0, 1, 1, kSilentStream});
}

TEST_CASE("full single-person coverage leaves no silent channels") {
  MaskSet m;
  m.masks = Mat::Ones(1, 4);
  AttnRouting r = build_attention_routing(m, 1);
  for (int s : r.stream_of) CHECK(s == 0);
}

TEST_CASE("overlapping masks are rejected") {
  MaskSet m;
  m.masks = Mat::Zero(2, 3);
  m.masks.row(0) << 1, 1, 0;
  m.masks.row(1) << 0, 1, 1;
  CHECK_THROWS_AS(build_attention_routing(m, 2), std::invalid_argument);
}

TEST_CASE("stream count must match persons") {
  MaskSet m;
  m.masks = Mat::Ones(1, 3);
  CHECK_THROWS_AS(build_attention_routing(m, 2), std::invalid_argument);
}

TEST_CASE("single stream with a full mask reduces to plain cross-attention") {
  Rng rng(31);
  const int T = 6, d = 4, F = 3;
  AudioTokens tok = random_tokens(1, T, d, rng);
  MaskSet m;
  m.masks = Mat::Ones(1, F);
  AttnRouting r = build_attention_routing(m, 1);
  ChannelSeq q(F);
  for (auto& qq : q) qq = rng.gaussian_mat(T, d);
  for (int radius : {0, 2}) {
    ChannelSeq out = masked_audio_cross_attention(q, tok, r, radius);
    for (int f = 0; f < F; ++f) {
      Mat ref = reference_attention(q[static_cast<size_t>(f)], tok.keys[0], tok.values[0], radius);
      CHECK((out[static_cast<size_t>(f)] - ref).cwiseAbs().maxCoeff() == 0.0);
    }
  }
}

TEST_CASE("silent region with a single key returns the silent value row") {
  Rng rng(5);
  const int T = 4, d = 3;
  AudioTokens tok = random_tokens(1, T, d, rng);
  MaskSet m;
  m.masks = Mat::Zero(1, 2);
  m.masks(0, 0) = 1;  // channel 1 unowned
  AttnRouting r = build_attention_routing(m, 1);
  ChannelSeq q(2);
  q[0] = rng.gaussian_mat(T, d);
  q[1] = rng.gaussian_mat(T, d);
  ChannelSeq out = masked_audio_cross_attention(q, tok, r, 0);
  // softmax over one key is 1 regardless of the query
  CHECK((out[1] - tok.silent_values).cwiseAbs().maxCoeff() == 0.0);
}

TEST_CASE("swapping stream envelopes and routing swaps region outputs exactly") {
  Rng rng(77);
  const int T = 5, d = 4;
  AudioTokens tok = random_tokens(2, T, d, rng);
  MaskSet m;
  m.masks = Mat::Zero(2, 2);
  m.masks(0, 0) = 1;
  m.masks(1, 1) = 1;
  AttnRouting r = build_attention_routing(m, 2);

  AudioTokens swapped = tok;
  std::swap(swapped.keys[0], swapped.keys[1]);
  std::swap(swapped.values[0], swapped.values[1]);
  MaskSet m2;
  m2.masks = Mat::Zero(2, 2);
  m2.masks(0, 1) = 1;
  m2.masks(1, 0) = 1;
  AttnRouting r2 = build_attention_routing(m2, 2);

  ChannelSeq q(2);
  q[0] = rng.gaussian_mat(T, d);
  q[1] = rng.gaussian_mat(T, d);
  ChannelSeq a = masked_audio_cross_attention(q, tok, r, 1);
  ChannelSeq b = masked_audio_cross_attention(q, swapped, r2, 1);
  CHECK((a[0] - b[0]).cwiseAbs().maxCoeff() == 0.0);
  CHECK((a[1] - b[1]).cwiseAbs().maxCoeff() == 0.0);
}

TEST_CASE("locality: perturbing one stream only changes its routed channels") {
  Rng rng(13);
  const int T = 6, d = 4;
  AudioTokens tok = random_tokens(2, T, d, rng);
  MaskSet m;
  m.masks = Mat::Zero(2, 5);
  m.masks.row(0) << 1, 1, 0, 0, 0;
  m.masks.row(1) << 0, 0, 1, 1, 0;
  AttnRouting r = build_attention_routing(m, 2);
  ChannelSeq q(5);
  for (auto& qq : q) qq = rng.gaussian_mat(T, d);

  for (int radius : {0, 1}) {
    ChannelSeq base = masked_audio_cross_attention(q, tok, r, radius);
    AudioTokens perturbed = tok;
    perturbed.keys[1] = rng.gaussian_mat(T, d);
    perturbed.values[1] = rng.gaussian_mat(T, d);
    ChannelSeq out = masked_audio_cross_attention(q, perturbed, r, radius);
    for (int f : {0, 1, 4}) CHECK((out[static_cast<size_t>(f)] - base[static_cast<size_t>(f)]).cwiseAbs().maxCoeff() == 0.0);
    for (int f : {2, 3}) CHECK((out[static_cast<size_t>(f)] - base[static_cast<size_t>(f)]).cwiseAbs().maxCoeff() > 0.0);
  }
}

TEST_CASE("stream index out of range is rejected") {
  Rng rng(3);
  AudioTokens tok = random_tokens(1, 4, 3, rng);
  AttnRouting r;
  r.n_streams = 2;
  r.stream_of = {0, 1};  // stream 1 does not exist in tokens
  ChannelSeq q(2, rng.gaussian_mat(4, 3));
  CHECK_THROWS_AS(masked_audio_cross_attention(q, tok, r, 0), std::invalid_argument);
}

TEST_CASE("cross-attention backward matches finite differences") {
  Rng rng(99);
  const int T = 5, d = 3, F = 3;
  AudioTokens tok = random_tokens(2, T, d, rng);
  MaskSet m;
  m.masks = Mat::Zero(2, F);
  m.masks(0, 0) = 1;
  m.masks(1, 1) = 1;  // channel 2 silent
  AttnRouting r = build_attention_routing(m, 2);
  ChannelSeq q(F);
  for (auto& qq : q) qq = rng.gaussian_mat(T, d);
  Mat w = rng.gaussian_mat(T, d);  // fixed cotangent per channel

  auto objective = [&](const ChannelSeq& qq, const AudioTokens& tt) {
    ChannelSeq out = masked_audio_cross_attention(qq, tt, r, 1);
    double v = 0.0;
    for (const auto& o : out) v += o.cwiseProduct(w).sum();
    return v;
  };

  CrossAttnCache cache;
  ChannelSeq out = masked_audio_cross_attention(q, tok, r, 1, &cache);
  ChannelSeq d_out(F, w);
  ChannelSeq d_q(F, Mat::Zero(T, d));
  AudioTokens d_tok;
  d_tok.keys.assign(2, Mat::Zero(T, d));
  d_tok.values.assign(2, Mat::Zero(T, d));
  d_tok.silent_keys = Mat::Zero(T, d);
  d_tok.silent_values = Mat::Zero(T, d);
  masked_audio_cross_attention_backward(q, tok, r, cache, d_out, d_q, d_tok);

  const double eps = 1e-6;
  auto check_entry = [&](double* slot, double analytic) {
    double saved = *slot;
    *slot = saved + eps;
    double up = objective(q, tok);
    *slot = saved - eps;
    double down = objective(q, tok);
    *slot = saved;
    double central = (up - down) / (2 * eps);
    CHECK(std::abs(analytic - central) < 1e-6 * (1.0 + std::abs(central)));
  };

  Rng pick(7);
  for (int i = 0; i < 20; ++i) {
    int f = static_cast<int>(pick.integer(F));
    int t = static_cast<int>(pick.integer(T));
    int j = static_cast<int>(pick.integer(d));
    check_entry(&q[static_cast<size_t>(f)](t, j), d_q[static_cast<size_t>(f)](t, j));
    int s = static_cast<int>(pick.integer(2));
    check_entry(&tok.keys[static_cast<size_t>(s)](t, j), d_tok.keys[static_cast<size_t>(s)](t, j));
    check_entry(&tok.values[static_cast<size_t>(s)](t, j),
                d_tok.values[static_cast<size_t>(s)](t, j));
    check_entry(&tok.silent_values(t, j), d_tok.silent_values(t, j));
  }
}

TEST_CASE("silent embedding basics") {
  Rng rng(21);
  AudioEncoder enc;
  enc.w1 = rng.gaussian_mat(1, 4);
  enc.b1 = rng.gaussian_mat(1, 4).row(0);
  enc.w2 = rng.gaussian_mat(4, 4);
  enc.b2 = rng.gaussian_mat(1, 4).row(0);
  enc.silent_token = rng.gaussian_mat(1, 4).row(0);

  Mat empty = silent_embedding(enc, 0);
  CHECK(empty.rows() == 0);

  Mat a = silent_embedding(enc, 5);
  Mat b = silent_embedding(enc, 5);
  CHECK(a == b);

  Vec env = Vec::Constant(5, 0.7);
  Mat nonzero = encode_envelope(enc, env);
  CHECK((a - nonzero).cwiseAbs().maxCoeff() > 0.0);

  // config-gated learned silent token replaces the encoder-of-zeros reading
  enc.learned_silent = true;
  Mat tokened = silent_embedding(enc, 3);
  for (int t = 0; t < 3; ++t) CHECK((tokened.row(t) - enc.silent_token).cwiseAbs().maxCoeff() == 0.0);
}
