#include "avatarlab/denoiser.hpp"

#include <nlohmann/json.hpp>

namespace avatarlab {

using nlohmann::json;

// --- flow helpers --------------------------------------------------------------

double sigma_of(double tau) {
  require(tau >= 0.0 && tau <= 1000.0, "timestep outside [0, 1000]");
  return tau / 1000.0;
}

Mat x0_from_velocity(const Mat& noisy, double tau, const Mat& v) {
  require(noisy.rows() == v.rows() && noisy.cols() == v.cols(),
          "x0_from_velocity: shape mismatch");
  return noisy - sigma_of(tau) * v;
}

Mat flow_interpolate(const Mat& x0, double tau, const Mat& eps) {
  require(x0.rows() == eps.rows() && x0.cols() == eps.cols(), "flow_interpolate: shape mismatch");
  const double s = sigma_of(tau);
  return (1.0 - s) * x0 + s * eps;
}

// --- config / cond / layout -----------------------------------------------------

void DenoiserConfig::validate() const {
  require(persons >= 1 && persons <= 3, "DenoiserConfig: persons must be in 1..3");
  require(hidden > 0 && heads > 0 && hidden % heads == 0, "DenoiserConfig: hidden % heads != 0");
  require(hidden % 2 == 0, "DenoiserConfig: hidden must be even");
  require(blocks >= 1, "DenoiserConfig: blocks must be >= 1");
  require(text_dim > 0 && audio_dim > 0 && enc_hidden > 0, "DenoiserConfig: bad dims");
  require(window_radius >= 0, "DenoiserConfig: negative window radius");
}

json DenoiserConfig::to_json() const {
  return json{{"persons", persons},
              {"hidden", hidden},
              {"heads", heads},
              {"blocks", blocks},
              {"text_dim", text_dim},
              {"audio_dim", audio_dim},
              {"enc_hidden", enc_hidden},
              {"window_radius", window_radius},
              {"has_audio_layer", has_audio_layer},
              {"learned_silent_token", learned_silent_token}};
}

DenoiserConfig DenoiserConfig::from_json(const json& j) {
  DenoiserConfig c;
  c.persons = j.at("persons").get<int>();
  c.hidden = j.at("hidden").get<int>();
  c.heads = j.at("heads").get<int>();
  c.blocks = j.at("blocks").get<int>();
  c.text_dim = j.at("text_dim").get<int>();
  c.audio_dim = j.at("audio_dim").get<int>();
  c.enc_hidden = j.at("enc_hidden").get<int>();
  c.window_radius = j.at("window_radius").get<int>();
  c.has_audio_layer = j.at("has_audio_layer").get<bool>();
  c.learned_silent_token = j.at("learned_silent_token").get<bool>();
  c.validate();
  return c;
}

CondSet CondSet::with_null_text() const {
  CondSet c = *this;
  c.text_class = kNullTextId;
  return c;
}

CondSet CondSet::with_silent_audio() const {
  CondSet c = *this;
  if (c.audio) c.audio = Mat::Zero(c.audio->rows(), c.audio->cols());
  return c;
}

CondSet CondSet::without_audio() const {
  CondSet c = *this;
  c.audio.reset();
  return c;
}

int TokenLayout::noisy_count() const {
  int n = 0;
  for (uint8_t f : noise_flags) n += (f != 0);
  return n;
}

void TokenLayout::validate() const {
  require(!positions.empty(), "TokenLayout: empty");
  require(positions.size() == noise_flags.size(), "TokenLayout: size mismatch");
  for (size_t i = 1; i < positions.size(); ++i)
    require(positions[i] > positions[i - 1], "TokenLayout: positions must be strictly increasing");
}

TokenLayout TokenLayout::contiguous(int frames) {
  require(frames >= 1, "TokenLayout::contiguous: frames must be >= 1");
  TokenLayout l;
  l.positions.resize(static_cast<size_t>(frames));
  for (int i = 0; i < frames; ++i) l.positions[static_cast<size_t>(i)] = i;
  l.noise_flags.assign(static_cast<size_t>(frames), 1);
  return l;
}

// --- parameter registration ------------------------------------------------------

namespace {

namespace g = groups;

std::string blk(int b, const char* name) { return "b" + std::to_string(b) + "." + name; }

void register_core(ParamStore& p, const DenoiserConfig& cfg) {
  const int H = cfg.hidden;
  p.add(g::kFrameEmbed, "w", kPersonChannels + 1, H);
  p.add(g::kFrameEmbed, "b", 1, H);
  p.add(g::kTimeEmbed, "w", H, H);
  p.add(g::kTimeEmbed, "b", 1, H);
  p.add(g::kTextProj, "table", kNumClasses + 1, cfg.text_dim);
  p.add(g::kTextProj, "w", cfg.text_dim, H);
  p.add(g::kTextProj, "b", 1, H);
  for (int b = 0; b < cfg.blocks; ++b) {
    p.add(g::kSelfAttn, blk(b, "ln1_g"), 1, H);
    p.add(g::kSelfAttn, blk(b, "ln1_b"), 1, H);
    p.add(g::kSelfAttn, blk(b, "wq"), H, H);
    p.add(g::kSelfAttn, blk(b, "bq"), 1, H);
    p.add(g::kSelfAttn, blk(b, "wk"), H, H);
    p.add(g::kSelfAttn, blk(b, "bk"), 1, H);
    p.add(g::kSelfAttn, blk(b, "wv"), H, H);
    p.add(g::kSelfAttn, blk(b, "bv"), 1, H);
    p.add(g::kSelfAttn, blk(b, "wo"), H, H);
    p.add(g::kSelfAttn, blk(b, "bo"), 1, H);
    p.add(g::kSelfAttn, blk(b, "ln2_g"), 1, H);
    p.add(g::kSelfAttn, blk(b, "ln2_b"), 1, H);
    p.add(g::kSelfAttn, blk(b, "w1"), H, 2 * H);
    p.add(g::kSelfAttn, blk(b, "b1"), 1, 2 * H);
    p.add(g::kSelfAttn, blk(b, "w2"), 2 * H, H);
    p.add(g::kSelfAttn, blk(b, "b2"), 1, H);
  }
  p.add(g::kOutProj, "w", kNumRoles, H);
  p.add(g::kOutProj, "b", 1, kNumRoles);
}

void register_audio(ParamStore& p, const DenoiserConfig& cfg) {
  const int H = cfg.hidden, dm = cfg.enc_hidden, da = cfg.audio_dim;
  p.add(g::kAudioCrossAttn, "enc_w1", 1, dm);
  p.add(g::kAudioCrossAttn, "enc_b1", 1, dm);
  p.add(g::kAudioCrossAttn, "enc_w2", dm, dm);
  p.add(g::kAudioCrossAttn, "enc_b2", 1, dm);
  p.add(g::kAudioCrossAttn, "silent_token", 1, dm);
  p.add(g::kAudioCrossAttn, "wk", dm, da);
  p.add(g::kAudioCrossAttn, "bk", 1, da);
  p.add(g::kAudioCrossAttn, "wv", dm, da);
  p.add(g::kAudioCrossAttn, "bv", 1, da);
  p.add(g::kAudioCrossAttn, "wq", H, da);
  p.add(g::kAudioCrossAttn, "bq", 1, da);
  p.add(g::kAudioCrossAttn, "role_q", kNumRoles, da);
  p.add(g::kAudioCrossAttn, "fold", kNumRoles * da, H);
}

void fill_gaussian(Eigen::Map<Mat> m, Rng& rng, double std) {
  for (Eigen::Index i = 0; i < m.rows(); ++i)
    for (Eigen::Index j = 0; j < m.cols(); ++j) m(i, j) = std * rng.gaussian();
}

void init_core(ParamStore& p, const DenoiserConfig& cfg, Rng& rng) {
  const double H = cfg.hidden;
  fill_gaussian(p.tensor(g::kFrameEmbed, "w"), rng, 1.0 / std::sqrt(kPersonChannels + 1.0));
  fill_gaussian(p.tensor(g::kTimeEmbed, "w"), rng, 1.0 / std::sqrt(H));
  fill_gaussian(p.tensor(g::kTextProj, "table"), rng, 0.3);
  fill_gaussian(p.tensor(g::kTextProj, "w"), rng, 1.0 / std::sqrt(cfg.text_dim));
  for (int b = 0; b < cfg.blocks; ++b) {
    p.tensor(g::kSelfAttn, blk(b, "ln1_g")).setOnes();
    p.tensor(g::kSelfAttn, blk(b, "ln2_g")).setOnes();
    fill_gaussian(p.tensor(g::kSelfAttn, blk(b, "wq")), rng, 1.0 / std::sqrt(H));
    fill_gaussian(p.tensor(g::kSelfAttn, blk(b, "wk")), rng, 1.0 / std::sqrt(H));
    fill_gaussian(p.tensor(g::kSelfAttn, blk(b, "wv")), rng, 1.0 / std::sqrt(H));
    fill_gaussian(p.tensor(g::kSelfAttn, blk(b, "wo")), rng, 1.0 / std::sqrt(H));
    fill_gaussian(p.tensor(g::kSelfAttn, blk(b, "w1")), rng, 1.0 / std::sqrt(H));
    fill_gaussian(p.tensor(g::kSelfAttn, blk(b, "w2")), rng, 1.0 / std::sqrt(2.0 * H));
  }
  fill_gaussian(p.tensor(g::kOutProj, "w"), rng, 0.02);
}

void init_audio(ParamStore& p, const DenoiserConfig& cfg, Rng& rng) {
  const double H = cfg.hidden, dm = cfg.enc_hidden;
  fill_gaussian(p.tensor(g::kAudioCrossAttn, "enc_w1"), rng, 1.0);
  fill_gaussian(p.tensor(g::kAudioCrossAttn, "enc_b1"), rng, 0.2);
  fill_gaussian(p.tensor(g::kAudioCrossAttn, "enc_w2"), rng, 1.0 / std::sqrt(dm));
  fill_gaussian(p.tensor(g::kAudioCrossAttn, "enc_b2"), rng, 0.2);
  fill_gaussian(p.tensor(g::kAudioCrossAttn, "silent_token"), rng, 0.3);
  fill_gaussian(p.tensor(g::kAudioCrossAttn, "wk"), rng, 1.0 / std::sqrt(dm));
  fill_gaussian(p.tensor(g::kAudioCrossAttn, "wv"), rng, 1.0 / std::sqrt(dm));
  fill_gaussian(p.tensor(g::kAudioCrossAttn, "wq"), rng, 1.0 / std::sqrt(H));
  fill_gaussian(p.tensor(g::kAudioCrossAttn, "role_q"), rng, 0.1);
  // zero fold: inserting the layer leaves the trunk output unchanged
  p.tensor(g::kAudioCrossAttn, "fold").setZero();
}

}  // namespace

Denoiser Denoiser::init(const DenoiserConfig& cfg, uint64_t seed) {
  cfg.validate();
  Denoiser d;
  d.cfg = cfg;
  register_core(d.params, cfg);
  if (cfg.has_audio_layer) register_audio(d.params, cfg);
  Rng rng(derive_seed(seed, 0x696e6974u));
  init_core(d.params, cfg, rng);
  if (cfg.has_audio_layer) init_audio(d.params, cfg, rng);
  return d;
}

void Denoiser::insert_audio_layer(uint64_t seed) {
  require(!cfg.has_audio_layer, "insert_audio_layer: model already has an audio pathway");
  cfg.has_audio_layer = true;
  register_audio(params, cfg);
  Rng rng(derive_seed(seed, 0x696e7332u));
  init_audio(params, cfg, rng);
}

void Denoiser::save(const std::filesystem::path& prefix) const {
  params.save(prefix, cfg.to_json());
}

Denoiser Denoiser::load(const std::filesystem::path& prefix) {
  auto [store, meta] = ParamStore::load(prefix);
  Denoiser d;
  d.cfg = DenoiserConfig::from_json(meta);
  d.params = std::move(store);
  return d;
}

// --- fixed sinusoidal embeddings ---------------------------------------------

namespace {

RowVec position_row(int pos, int H) {
  RowVec r(H);
  for (int k = 0; k < H / 2; ++k) {
    double theta = pos / std::pow(10000.0, (2.0 * k) / H);
    r(2 * k) = std::sin(theta);
    r(2 * k + 1) = std::cos(theta);
  }
  return r;
}

RowVec time_row(double tau, int H) {
  const double t = tau / 1000.0;
  RowVec r(H);
  const int n = H / 2;
  for (int k = 0; k < n; ++k) {
    double omega = 2.0 * M_PI * 0.5 * std::pow(128.0, n > 1 ? double(k) / (n - 1) : 0.0);
    r(2 * k) = std::sin(omega * t);
    r(2 * k + 1) = std::cos(omega * t);
  }
  return r;
}

struct LnCache {
  Mat normed;  // x̂: (x - mean) * rstd
  Vec rstd;
};

Mat layernorm(const Mat& x, const RowVec& gamma, const RowVec& beta, LnCache& c) {
  const double eps = 1e-6;
  const Eigen::Index S = x.rows(), H = x.cols();
  c.normed.resize(S, H);
  c.rstd.resize(S);
  Mat y(S, H);
  for (Eigen::Index i = 0; i < S; ++i) {
    double mu = x.row(i).mean();
    double var = (x.row(i).array() - mu).square().mean();
    double rstd = 1.0 / std::sqrt(var + eps);
    c.rstd(i) = rstd;
    c.normed.row(i) = (x.row(i).array() - mu) * rstd;
    y.row(i) = c.normed.row(i).cwiseProduct(gamma) + beta;
  }
  return y;
}

// returns dX; accumulates dgamma/dbeta
Mat layernorm_backward(const Mat& dy, const LnCache& c, const RowVec& gamma, RowVec& dgamma,
                       RowVec& dbeta) {
  const Eigen::Index S = dy.rows(), H = dy.cols();
  Mat dx(S, H);
  for (Eigen::Index i = 0; i < S; ++i) {
    RowVec dxhat = dy.row(i).cwiseProduct(gamma);
    double m1 = dxhat.mean();
    double m2 = dxhat.cwiseProduct(c.normed.row(i)).mean();
    dx.row(i) = ((dxhat.array() - m1 - c.normed.row(i).array() * m2) * c.rstd(i)).matrix();
    dgamma += dy.row(i).cwiseProduct(c.normed.row(i));
    dbeta += dy.row(i);
  }
  return dx;
}

inline double gelu(double x) { return 0.5 * x * (1.0 + std::erf(x / std::numbers::sqrt2)); }
inline double gelu_grad(double x) {
  const double cdf = 0.5 * (1.0 + std::erf(x / std::numbers::sqrt2));
  const double pdf = std::exp(-0.5 * x * x) / std::sqrt(2.0 * M_PI);
  return cdf + x * pdf;
}

struct BlockCache {
  LnCache ln1;
  Mat u1;                 // post-LN1
  Mat q, k, v;            // S×H
  std::vector<Mat> attn;  // per head S×S softmax weights
  Mat attn_out;           // concat head outputs, pre-wo
  LnCache ln2;
  Mat u2;  // post-LN2
  Mat f1;  // pre-gelu S×2H
  Mat gl;  // post-gelu
};

struct BlockWeights {
  Eigen::Map<const Mat> ln1_g, ln1_b, wq, bq, wk, bk, wv, bv, wo, bo, ln2_g, ln2_b, w1, b1, w2, b2;
};

BlockWeights block_weights(const ParamStore& p, int b) {
  return {p.tensor(g::kSelfAttn, blk(b, "ln1_g")), p.tensor(g::kSelfAttn, blk(b, "ln1_b")),
          p.tensor(g::kSelfAttn, blk(b, "wq")),    p.tensor(g::kSelfAttn, blk(b, "bq")),
          p.tensor(g::kSelfAttn, blk(b, "wk")),    p.tensor(g::kSelfAttn, blk(b, "bk")),
          p.tensor(g::kSelfAttn, blk(b, "wv")),    p.tensor(g::kSelfAttn, blk(b, "bv")),
          p.tensor(g::kSelfAttn, blk(b, "wo")),    p.tensor(g::kSelfAttn, blk(b, "bo")),
          p.tensor(g::kSelfAttn, blk(b, "ln2_g")), p.tensor(g::kSelfAttn, blk(b, "ln2_b")),
          p.tensor(g::kSelfAttn, blk(b, "w1")),    p.tensor(g::kSelfAttn, blk(b, "b1")),
          p.tensor(g::kSelfAttn, blk(b, "w2")),    p.tensor(g::kSelfAttn, blk(b, "b2"))};
}

Mat block_forward(const Mat& x, const BlockWeights& w, int heads, BlockCache& c) {
  const Eigen::Index S = x.rows(), H = x.cols();
  const int dh = static_cast<int>(H) / heads;
  const double scale = 1.0 / std::sqrt(static_cast<double>(dh));

  c.u1 = layernorm(x, w.ln1_g.row(0), w.ln1_b.row(0), c.ln1);
  c.q = (c.u1 * w.wq).rowwise() + w.bq.row(0);
  c.k = (c.u1 * w.wk).rowwise() + w.bk.row(0);
  c.v = (c.u1 * w.wv).rowwise() + w.bv.row(0);
  c.attn.assign(static_cast<size_t>(heads), Mat());
  c.attn_out.resize(S, H);
  for (int h = 0; h < heads; ++h) {
    auto qh = c.q.middleCols(h * dh, dh);
    auto kh = c.k.middleCols(h * dh, dh);
    auto vh = c.v.middleCols(h * dh, dh);
    Mat scores = scale * (qh * kh.transpose());
    Mat& a = c.attn[static_cast<size_t>(h)];
    a.resize(S, S);
    for (Eigen::Index i = 0; i < S; ++i) {
      double mx = scores.row(i).maxCoeff();
      a.row(i) = (scores.row(i).array() - mx).exp();
      a.row(i) /= a.row(i).sum();
    }
    c.attn_out.middleCols(h * dh, dh) = a * vh;
  }
  Mat x1 = x + ((c.attn_out * w.wo).rowwise() + w.bo.row(0));

  c.u2 = layernorm(x1, w.ln2_g.row(0), w.ln2_b.row(0), c.ln2);
  c.f1 = (c.u2 * w.w1).rowwise() + w.b1.row(0);
  c.gl = c.f1.unaryExpr([](double t) { return gelu(t); });
  Mat x2 = x1 + ((c.gl * w.w2).rowwise() + w.b2.row(0));
  return x2;
}

struct BlockGrads {
  Eigen::Map<Mat> ln1_g, ln1_b, wq, bq, wk, bk, wv, bv, wo, bo, ln2_g, ln2_b, w1, b1, w2, b2;
};

BlockGrads block_grads(ParamStore& p, int b) {
  return {p.tensor(g::kSelfAttn, blk(b, "ln1_g")), p.tensor(g::kSelfAttn, blk(b, "ln1_b")),
          p.tensor(g::kSelfAttn, blk(b, "wq")),    p.tensor(g::kSelfAttn, blk(b, "bq")),
          p.tensor(g::kSelfAttn, blk(b, "wk")),    p.tensor(g::kSelfAttn, blk(b, "bk")),
          p.tensor(g::kSelfAttn, blk(b, "wv")),    p.tensor(g::kSelfAttn, blk(b, "bv")),
          p.tensor(g::kSelfAttn, blk(b, "wo")),    p.tensor(g::kSelfAttn, blk(b, "bo")),
          p.tensor(g::kSelfAttn, blk(b, "ln2_g")), p.tensor(g::kSelfAttn, blk(b, "ln2_b")),
          p.tensor(g::kSelfAttn, blk(b, "w1")),    p.tensor(g::kSelfAttn, blk(b, "b1")),
          p.tensor(g::kSelfAttn, blk(b, "w2")),    p.tensor(g::kSelfAttn, blk(b, "b2"))};
}

// dX of the block given dX2; accumulates weight grads
Mat block_backward(const Mat& d_x2, const BlockWeights& w, BlockGrads& gr, int heads,
                   const BlockCache& c) {
  const Eigen::Index S = d_x2.rows(), H = d_x2.cols();
  const int dh = static_cast<int>(H) / heads;
  const double scale = 1.0 / std::sqrt(static_cast<double>(dh));

  // FFN sublayer
  Mat d_ffn = d_x2;  // path through w2
  gr.w2 += c.gl.transpose() * d_ffn;
  gr.b2 += d_ffn.colwise().sum();
  Mat d_gl = d_ffn * w.w2.transpose();
  Mat d_f1 = d_gl.cwiseProduct(c.f1.unaryExpr([](double t) { return gelu_grad(t); }));
  gr.w1 += c.u2.transpose() * d_f1;
  gr.b1 += d_f1.colwise().sum();
  Mat d_u2 = d_f1 * w.w1.transpose();
  RowVec dg2 = RowVec::Zero(H), db2v = RowVec::Zero(H);
  Mat d_x1 = d_x2 + layernorm_backward(d_u2, c.ln2, w.ln2_g.row(0), dg2, db2v);
  gr.ln2_g += dg2;
  gr.ln2_b += db2v;

  // attention sublayer
  Mat d_z = d_x1;
  gr.wo += c.attn_out.transpose() * d_z;
  gr.bo += d_z.colwise().sum();
  Mat d_attn_out = d_z * w.wo.transpose();
  Mat d_q = Mat::Zero(S, H), d_k = Mat::Zero(S, H), d_v = Mat::Zero(S, H);
  for (int h = 0; h < heads; ++h) {
    const Mat& a = c.attn[static_cast<size_t>(h)];
    auto vh = c.v.middleCols(h * dh, dh);
    auto qh = c.q.middleCols(h * dh, dh);
    auto kh = c.k.middleCols(h * dh, dh);
    Mat d_oh = d_attn_out.middleCols(h * dh, dh);
    Mat d_a = d_oh * vh.transpose();
    d_v.middleCols(h * dh, dh) = a.transpose() * d_oh;
    Mat d_scores(S, S);
    for (Eigen::Index i = 0; i < S; ++i) {
      double inner = d_a.row(i).dot(a.row(i));
      d_scores.row(i) = (a.row(i).array() * (d_a.row(i).array() - inner)).matrix();
    }
    d_scores *= scale;
    d_q.middleCols(h * dh, dh) = d_scores * kh;
    d_k.middleCols(h * dh, dh) = d_scores.transpose() * qh;
  }
  gr.wq += c.u1.transpose() * d_q;
  gr.bq += d_q.colwise().sum();
  gr.wk += c.u1.transpose() * d_k;
  gr.bk += d_k.colwise().sum();
  gr.wv += c.u1.transpose() * d_v;
  gr.bv += d_v.colwise().sum();
  Mat d_u1 = d_q * w.wq.transpose() + d_k * w.wk.transpose() + d_v * w.wv.transpose();
  RowVec dg1 = RowVec::Zero(H), db1v = RowVec::Zero(H);
  Mat d_x = d_x1 + layernorm_backward(d_u1, c.ln1, w.ln1_g.row(0), dg1, db1v);
  gr.ln1_g += dg1;
  gr.ln1_b += db1v;
  return d_x;
}

struct AudioLayerCache {
  Mat envelopes;  // P×S
  std::vector<EncodeCache> enc;
  EncodeCache enc_silent;
  AudioTokens tokens;
  ChannelSeq queries;
  CrossAttnCache attn;
  ChannelSeq attn_out;
  std::vector<Mat> h_entry;  // per stream, queries source
  Mat h_mean;
  AttnRouting routing;
};

}  // namespace

struct ForwardCache {
  int S = 0, P = 0;
  std::vector<Mat> x_streams;  // per stream S×7
  Mat time_feats;              // S×H
  RowVec text_embed;
  int text_row = kNullTextId;
  std::vector<std::vector<BlockCache>> blk_cache;  // [stream][block]
  std::optional<AudioLayerCache> audio;
  std::vector<Mat> h_final;
};

namespace {

AudioEncoder encoder_view(const ParamStore& p, const DenoiserConfig& cfg) {
  AudioEncoder e;
  e.w1 = p.tensor(g::kAudioCrossAttn, "enc_w1");
  e.b1 = p.tensor(g::kAudioCrossAttn, "enc_b1").row(0);
  e.w2 = p.tensor(g::kAudioCrossAttn, "enc_w2");
  e.b2 = p.tensor(g::kAudioCrossAttn, "enc_b2").row(0);
  e.learned_silent = cfg.learned_silent_token;
  e.silent_token = p.tensor(g::kAudioCrossAttn, "silent_token").row(0);
  return e;
}

// Applies the masked multi-stream cross-attention layer in place on h.
void audio_layer_forward(const Denoiser& model, const CondSet& cond, std::vector<Mat>& h,
                         AudioLayerCache& c) {
  const auto& p = model.params;
  const auto& cfg = model.cfg;
  const int P = cfg.persons;
  const int S = static_cast<int>(h[0].rows());
  const int da = cfg.audio_dim;
  WorldSpec spec{cfg.persons};
  const int F = spec.frame_dim();

  c.envelopes = cond.audio ? *cond.audio : Mat::Zero(P, S);
  require(static_cast<int>(c.envelopes.rows()) == P && static_cast<int>(c.envelopes.cols()) == S,
          "forward: audio envelope shape mismatch");

  AudioEncoder enc = encoder_view(p, cfg);
  const auto wk = p.tensor(g::kAudioCrossAttn, "wk");
  const auto bk = p.tensor(g::kAudioCrossAttn, "bk");
  const auto wv = p.tensor(g::kAudioCrossAttn, "wv");
  const auto bv = p.tensor(g::kAudioCrossAttn, "bv");
  const auto wq = p.tensor(g::kAudioCrossAttn, "wq");
  const auto bq = p.tensor(g::kAudioCrossAttn, "bq");
  const auto role_q = p.tensor(g::kAudioCrossAttn, "role_q");
  const auto fold = p.tensor(g::kAudioCrossAttn, "fold");

  c.enc.resize(static_cast<size_t>(P));
  c.tokens.keys.resize(static_cast<size_t>(P));
  c.tokens.values.resize(static_cast<size_t>(P));
  for (int s = 0; s < P; ++s) {
    Mat feats = encode_envelope(enc, c.envelopes.row(s).transpose(), &c.enc[static_cast<size_t>(s)]);
    c.tokens.keys[static_cast<size_t>(s)] = (feats * wk).rowwise() + bk.row(0);
    c.tokens.values[static_cast<size_t>(s)] = (feats * wv).rowwise() + bv.row(0);
  }
  Mat sil = silent_embedding(enc, S, &c.enc_silent);
  c.tokens.silent_keys = (sil * wk).rowwise() + bk.row(0);
  c.tokens.silent_values = (sil * wv).rowwise() + bv.row(0);

  c.h_entry = h;
  c.h_mean = Mat::Zero(S, cfg.hidden);
  for (int s = 0; s < P; ++s) c.h_mean += h[static_cast<size_t>(s)];
  c.h_mean /= static_cast<double>(P);

  c.routing = build_attention_routing(person_masks(spec), P);
  c.queries.resize(static_cast<size_t>(F));
  for (int f = 0; f < F; ++f) {
    const int person = spec.person_of_channel(f);
    const int role = static_cast<int>(spec.role_of_channel(f));
    const Mat& src = person >= 0 ? c.h_entry[static_cast<size_t>(person)] : c.h_mean;
    c.queries[static_cast<size_t>(f)] =
        ((src * wq).rowwise() + bq.row(0)).rowwise() + role_q.row(role);
  }

  c.attn_out = masked_audio_cross_attention(c.queries, c.tokens, c.routing, cfg.window_radius,
                                            &c.attn);

  const int cam = spec.camera_channel();
  const int cam_role = static_cast<int>(Role::camera);
  for (int s = 0; s < P; ++s) {
    Mat delta = c.attn_out[static_cast<size_t>(cam)] * fold.middleRows(cam_role * da, da);
    for (int r = 0; r < kPersonChannels; ++r) {
      const int f = spec.channel(s, static_cast<Role>(r));
      delta += c.attn_out[static_cast<size_t>(f)] * fold.middleRows(r * da, da);
    }
    h[static_cast<size_t>(s)] += delta;
  }
}

void audio_layer_backward(const Denoiser& model, const AudioLayerCache& c, std::vector<Mat>& dh,
                          ParamStore& grads) {
  const auto& p = model.params;
  const auto& cfg = model.cfg;
  const int P = cfg.persons;
  const int S = static_cast<int>(dh[0].rows());
  const int da = cfg.audio_dim;
  WorldSpec spec{cfg.persons};
  const int F = spec.frame_dim();
  const int cam = spec.camera_channel();
  const int cam_role = static_cast<int>(Role::camera);

  const auto wk = p.tensor(g::kAudioCrossAttn, "wk");
  const auto wv = p.tensor(g::kAudioCrossAttn, "wv");
  const auto wq = p.tensor(g::kAudioCrossAttn, "wq");
  const auto fold = p.tensor(g::kAudioCrossAttn, "fold");
  auto d_wk = grads.tensor(g::kAudioCrossAttn, "wk");
  auto d_bk = grads.tensor(g::kAudioCrossAttn, "bk");
  auto d_wv = grads.tensor(g::kAudioCrossAttn, "wv");
  auto d_bv = grads.tensor(g::kAudioCrossAttn, "bv");
  auto d_wq = grads.tensor(g::kAudioCrossAttn, "wq");
  auto d_bq = grads.tensor(g::kAudioCrossAttn, "bq");
  auto d_role_q = grads.tensor(g::kAudioCrossAttn, "role_q");
  auto d_fold = grads.tensor(g::kAudioCrossAttn, "fold");

  // fold-back: h[s] += sum_f attn_out[f] * fold_role(f)  (+ camera broadcast)
  ChannelSeq d_attn_out(static_cast<size_t>(F), Mat::Zero(S, da));
  for (int s = 0; s < P; ++s) {
    const Mat& dd = dh[static_cast<size_t>(s)];
    d_attn_out[static_cast<size_t>(cam)] += dd * fold.middleRows(cam_role * da, da).transpose();
    d_fold.middleRows(cam_role * da, da) +=
        c.attn_out[static_cast<size_t>(cam)].transpose() * dd;
    for (int r = 0; r < kPersonChannels; ++r) {
      const int f = spec.channel(s, static_cast<Role>(r));
      d_attn_out[static_cast<size_t>(f)] += dd * fold.middleRows(r * da, da).transpose();
      d_fold.middleRows(r * da, da) += c.attn_out[static_cast<size_t>(f)].transpose() * dd;
    }
  }

  ChannelSeq d_queries(static_cast<size_t>(F), Mat::Zero(S, da));
  AudioTokens d_tokens;
  d_tokens.keys.assign(static_cast<size_t>(P), Mat::Zero(S, da));
  d_tokens.values.assign(static_cast<size_t>(P), Mat::Zero(S, da));
  d_tokens.silent_keys = Mat::Zero(S, da);
  d_tokens.silent_values = Mat::Zero(S, da);
  masked_audio_cross_attention_backward(c.queries, c.tokens, c.routing, c.attn, d_attn_out,
                                        d_queries, d_tokens);

  // queries: q_f = src * wq + bq + role_q(role)
  for (int f = 0; f < F; ++f) {
    const Mat& dq = d_queries[static_cast<size_t>(f)];
    const int person = spec.person_of_channel(f);
    const int role = static_cast<int>(spec.role_of_channel(f));
    const Mat& src = person >= 0 ? c.h_entry[static_cast<size_t>(person)] : c.h_mean;
    d_wq += src.transpose() * dq;
    d_bq += dq.colwise().sum();
    d_role_q.row(role) += dq.colwise().sum();
    Mat d_src = dq * wq.transpose();
    if (person >= 0) {
      dh[static_cast<size_t>(person)] += d_src;
    } else {
      for (int s = 0; s < P; ++s) dh[static_cast<size_t>(s)] += d_src / static_cast<double>(P);
    }
  }

  // tokens: K_s = feats_s * wk + bk, V_s likewise; silent uses the silent feats
  AudioEncoder enc = encoder_view(p, cfg);
  AudioEncoderGrads enc_grads;
  enc_grads.w1 = Mat::Zero(1, cfg.enc_hidden);
  enc_grads.b1 = RowVec::Zero(cfg.enc_hidden);
  enc_grads.w2 = Mat::Zero(cfg.enc_hidden, cfg.enc_hidden);
  enc_grads.b2 = RowVec::Zero(cfg.enc_hidden);
  enc_grads.silent_token = RowVec::Zero(cfg.enc_hidden);

  for (int s = 0; s < P; ++s) {
    const Mat& feats = c.enc[static_cast<size_t>(s)].feats;
    const Mat& dK = d_tokens.keys[static_cast<size_t>(s)];
    const Mat& dV = d_tokens.values[static_cast<size_t>(s)];
    d_wk += feats.transpose() * dK;
    d_bk += dK.colwise().sum();
    d_wv += feats.transpose() * dV;
    d_bv += dV.colwise().sum();
    Mat d_feats = dK * wk.transpose() + dV * wv.transpose();
    encode_envelope_backward(enc, c.envelopes.row(s).transpose(), c.enc[static_cast<size_t>(s)],
                             d_feats, enc_grads);
  }
  {
    const Mat& feats = c.enc_silent.feats;
    const Mat& dK = d_tokens.silent_keys;
    const Mat& dV = d_tokens.silent_values;
    d_wk += feats.transpose() * dK;
    d_bk += dK.colwise().sum();
    d_wv += feats.transpose() * dV;
    d_bv += dV.colwise().sum();
    Mat d_feats = dK * wk.transpose() + dV * wv.transpose();
    if (cfg.learned_silent_token)
      enc_grads.silent_token += d_feats.colwise().sum();
    else
      encode_envelope_backward(enc, Vec::Zero(S), c.enc_silent, d_feats, enc_grads);
  }
  grads.tensor(g::kAudioCrossAttn, "enc_w1") += enc_grads.w1;
  grads.tensor(g::kAudioCrossAttn, "enc_b1").row(0) += enc_grads.b1;
  grads.tensor(g::kAudioCrossAttn, "enc_w2") += enc_grads.w2;
  grads.tensor(g::kAudioCrossAttn, "enc_b2").row(0) += enc_grads.b2;
  grads.tensor(g::kAudioCrossAttn, "silent_token").row(0) += enc_grads.silent_token;
}

}  // namespace

Mat denoiser_forward(const Denoiser& model, const Mat& noisy, double tau, const CondSet& cond,
                     const TokenLayout& layout, ForwardCacheHandle* cache_out) {
  const auto& cfg = model.cfg;
  const auto& p = model.params;
  cfg.validate();
  layout.validate();
  WorldSpec spec{cfg.persons};
  const int F = spec.frame_dim();
  const int S = static_cast<int>(layout.size());
  const int H = cfg.hidden;
  require(static_cast<int>(noisy.rows()) == S && static_cast<int>(noisy.cols()) == F,
          "forward: input shape mismatch");
  (void)sigma_of(tau);  // validates the range
  require(cond.text_class >= 0 && cond.text_class <= kNullTextId, "forward: bad text class");
  if (cond.has_audio() && !cfg.has_audio_layer)
    throw std::invalid_argument("forward: model has no audio pathway but cond routes audio");

  auto cache = std::make_shared<ForwardCache>();
  ForwardCache& c = *cache;
  c.S = S;
  c.P = cfg.persons;

  // per-stream inputs: own six channels plus the shared camera channel
  c.x_streams.resize(static_cast<size_t>(cfg.persons));
  for (int s = 0; s < cfg.persons; ++s) {
    Mat x(S, kPersonChannels + 1);
    x.leftCols(kPersonChannels) = noisy.middleCols(s * kPersonChannels, kPersonChannels);
    x.col(kPersonChannels) = noisy.col(spec.camera_channel());
    c.x_streams[static_cast<size_t>(s)] = std::move(x);
  }

  // embeddings
  RowVec time_noisy = time_row(tau, H);
  RowVec time_clean = time_row(0.0, H);
  c.time_feats.resize(S, H);
  Mat pos_embed(S, H);
  for (int t = 0; t < S; ++t) {
    c.time_feats.row(t) = layout.noise_flags[static_cast<size_t>(t)] ? time_noisy : time_clean;
    pos_embed.row(t) = position_row(layout.positions[static_cast<size_t>(t)], H);
  }
  c.text_row = cond.text_class;
  c.text_embed = p.tensor(g::kTextProj, "table").row(c.text_row);

  const auto fe_w = p.tensor(g::kFrameEmbed, "w");
  const auto fe_b = p.tensor(g::kFrameEmbed, "b");
  const auto te_w = p.tensor(g::kTimeEmbed, "w");
  const auto te_b = p.tensor(g::kTimeEmbed, "b");
  const auto tp_w = p.tensor(g::kTextProj, "w");
  const auto tp_b = p.tensor(g::kTextProj, "b");

  RowVec text_vec = c.text_embed * tp_w + tp_b.row(0);
  Mat time_proj = (c.time_feats * te_w).rowwise() + te_b.row(0);

  std::vector<Mat> h(static_cast<size_t>(cfg.persons));
  for (int s = 0; s < cfg.persons; ++s) {
    h[static_cast<size_t>(s)] = ((c.x_streams[static_cast<size_t>(s)] * fe_w).rowwise() +
                                 fe_b.row(0)) +
                                pos_embed + time_proj;
    h[static_cast<size_t>(s)].rowwise() += text_vec;
  }

  const int audio_before = cfg.blocks / 2;
  c.blk_cache.assign(static_cast<size_t>(cfg.persons),
                     std::vector<BlockCache>(static_cast<size_t>(cfg.blocks)));
  for (int b = 0; b < cfg.blocks; ++b) {
    if (cfg.has_audio_layer && b == audio_before) {
      c.audio.emplace();
      audio_layer_forward(model, cond, h, *c.audio);
    }
    BlockWeights w = block_weights(p, b);
    for (int s = 0; s < cfg.persons; ++s) {
      h[static_cast<size_t>(s)] = block_forward(
          h[static_cast<size_t>(s)], w, cfg.heads,
          c.blk_cache[static_cast<size_t>(s)][static_cast<size_t>(b)]);
    }
  }
  c.h_final = h;

  // readout: role-shared rows, camera averaged over streams
  const auto out_w = p.tensor(g::kOutProj, "w");
  const auto out_b = p.tensor(g::kOutProj, "b");
  Mat y(S, F);
  for (int f = 0; f < F; ++f) {
    const int person = spec.person_of_channel(f);
    const int role = static_cast<int>(spec.role_of_channel(f));
    if (person >= 0) {
      y.col(f) = c.h_final[static_cast<size_t>(person)] * out_w.row(role).transpose();
    } else {
      Vec acc = Vec::Zero(S);
      for (int s = 0; s < cfg.persons; ++s)
        acc += c.h_final[static_cast<size_t>(s)] * out_w.row(role).transpose();
      y.col(f) = acc / static_cast<double>(cfg.persons);
    }
    y.col(f).array() += out_b(0, role);
  }

  if (!y.allFinite()) throw NumericError("forward: non-finite output");
  if (cache_out) cache_out->p = std::move(cache);
  return y;
}

void denoiser_backward(const Denoiser& model, const ForwardCacheHandle& cache,
                       const Mat& d_output, ParamStore& grads) {
  require(cache.p != nullptr, "backward: empty cache");
  const ForwardCache& c = *cache.p;
  const auto& cfg = model.cfg;
  const auto& p = model.params;
  WorldSpec spec{cfg.persons};
  const int F = spec.frame_dim();
  const int S = c.S;
  const int H = cfg.hidden;
  require(static_cast<int>(d_output.rows()) == S && static_cast<int>(d_output.cols()) == F,
          "backward: d_output shape mismatch");

  const auto out_w = p.tensor(g::kOutProj, "w");
  auto d_out_w = grads.tensor(g::kOutProj, "w");
  auto d_out_b = grads.tensor(g::kOutProj, "b");

  std::vector<Mat> dh(static_cast<size_t>(cfg.persons), Mat::Zero(S, H));
  for (int f = 0; f < F; ++f) {
    const int person = spec.person_of_channel(f);
    const int role = static_cast<int>(spec.role_of_channel(f));
    d_out_b(0, role) += d_output.col(f).sum();
    if (person >= 0) {
      dh[static_cast<size_t>(person)] += d_output.col(f) * out_w.row(role);
      d_out_w.row(role) += d_output.col(f).transpose() * c.h_final[static_cast<size_t>(person)];
    } else {
      const double inv = 1.0 / cfg.persons;
      for (int s = 0; s < cfg.persons; ++s) {
        dh[static_cast<size_t>(s)] += inv * (d_output.col(f) * out_w.row(role));
        d_out_w.row(role) +=
            inv * (d_output.col(f).transpose() * c.h_final[static_cast<size_t>(s)]);
      }
    }
  }

  const int audio_before = cfg.blocks / 2;
  for (int b = cfg.blocks - 1; b >= 0; --b) {
    BlockWeights w = block_weights(p, b);
    BlockGrads gr = block_grads(grads, b);
    for (int s = 0; s < cfg.persons; ++s) {
      dh[static_cast<size_t>(s)] =
          block_backward(dh[static_cast<size_t>(s)], w, gr, cfg.heads,
                         c.blk_cache[static_cast<size_t>(s)][static_cast<size_t>(b)]);
    }
    if (cfg.has_audio_layer && b == audio_before) {
      audio_layer_backward(model, *c.audio, dh, grads);
    }
  }

  // embeddings
  const auto te_w = p.tensor(g::kTimeEmbed, "w");
  const auto tp_w = p.tensor(g::kTextProj, "w");
  RowVec d_rowsum = RowVec::Zero(H);
  Mat dh_sum = Mat::Zero(S, H);
  for (int s = 0; s < cfg.persons; ++s) {
    const Mat& d = dh[static_cast<size_t>(s)];
    dh_sum += d;
    grads.tensor(g::kFrameEmbed, "w") += c.x_streams[static_cast<size_t>(s)].transpose() * d;
  }
  d_rowsum = dh_sum.colwise().sum();
  grads.tensor(g::kFrameEmbed, "b").row(0) += d_rowsum;
  grads.tensor(g::kTimeEmbed, "w") += c.time_feats.transpose() * dh_sum;
  grads.tensor(g::kTimeEmbed, "b").row(0) += d_rowsum;
  grads.tensor(g::kTextProj, "w") += c.text_embed.transpose() * d_rowsum;
  grads.tensor(g::kTextProj, "b").row(0) += d_rowsum;
  grads.tensor(g::kTextProj, "table").row(c.text_row) += d_rowsum * tp_w.transpose();
  (void)te_w;
}

std::pair<double, ParamStore> grad_params(const Denoiser& model, std::span<const BatchSample> batch,
                                          const OutputLoss& loss) {
  ParamStore grads = model.params.zeros_like();
  double total = 0.0;
  for (size_t i = 0; i < batch.size(); ++i) {
    const auto& s = batch[i];
    ForwardCacheHandle cache;
    Mat out = denoiser_forward(model, s.noisy, s.tau, s.cond, s.layout, &cache);
    auto [value, d_out] = loss(i, out);
    if (!std::isfinite(value))
      throw NumericError("grad_params: non-finite loss at sample " + std::to_string(i));
    total += value;
    denoiser_backward(model, cache, d_out, grads);
  }
  return {total, std::move(grads)};
}

double finite_diff_check_objective(const std::function<double(const ParamStore&)>& objective,
                                   const ParamStore& at, const ParamStore& analytic,
                                   double eps, int n_coords, uint64_t seed) {
  require(eps > 0.0, "finite_diff_check: eps must be positive");
  require(n_coords >= 1, "finite_diff_check: need at least one coordinate");
  ParamStore probe = at.zeros_like();
  std::copy(at.flat().begin(), at.flat().end(), probe.flat().begin());
  Rng rng(derive_seed(seed, 0xfd15u));
  auto flat = probe.flat();
  double worst = 0.0;
  for (int i = 0; i < n_coords; ++i) {
    size_t idx = static_cast<size_t>(rng.integer(flat.size()));
    const double saved = flat[idx];
    flat[idx] = saved + eps;
    double up = objective(probe);
    flat[idx] = saved - eps;
    double down = objective(probe);
    flat[idx] = saved;
    double central = (up - down) / (2.0 * eps);
    double rel = std::abs(analytic.flat()[idx] - central) / (std::abs(central) + 1e-8);
    worst = std::max(worst, rel);
  }
  return worst;
}

double finite_diff_check(const Denoiser& model, std::span<const BatchSample> batch,
                         const OutputLoss& loss, double eps, int n_coords, uint64_t seed) {
  auto [value, grads] = grad_params(model, batch, loss);
  (void)value;
  auto objective = [&](const ParamStore& params) {
    Denoiser probe;
    probe.cfg = model.cfg;
    probe.params = params;
    double total = 0.0;
    for (size_t i = 0; i < batch.size(); ++i) {
      const auto& s = batch[i];
      Mat out = denoiser_forward(probe, s.noisy, s.tau, s.cond, s.layout);
      total += loss(i, out).first;
    }
    return total;
  };
  return finite_diff_check_objective(objective, model.params, grads, eps, n_coords, seed);
}

}  // namespace avatarlab
