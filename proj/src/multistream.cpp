#include "avatarlab/multistream.hpp"

#include <nlohmann/json.hpp>

namespace avatarlab {

using nlohmann::json;

json AttnRouting::to_json() const {
  json j;
  j["n_streams"] = n_streams;
  json per_channel = json::array();
  for (int s : stream_of) {
    if (s == kSilentStream)
      per_channel.push_back("silent");
    else
      per_channel.push_back(s);
  }
  j["stream_of_channel"] = per_channel;
  return j;
}

AttnRouting build_attention_routing(const MaskSet& masks, int streams) {
  require(streams == masks.persons(),
          "build_attention_routing: stream count must match mask count");
  const int F = masks.channels();
  AttnRouting r;
  r.n_streams = streams;
  r.stream_of.assign(F, kSilentStream);
  for (int f = 0; f < F; ++f) {
    for (int p = 0; p < masks.persons(); ++p) {
      if (masks.masks(p, f) == 0.0) continue;
      if (r.stream_of[f] != kSilentStream)
        throw std::invalid_argument("build_attention_routing: overlapping masks at channel " +
                                    std::to_string(f));
      r.stream_of[f] = p;
    }
  }
  return r;
}

namespace {

inline const Mat& keys_of(const AudioTokens& t, int stream) {
  return stream == kSilentStream ? t.silent_keys : t.keys[static_cast<size_t>(stream)];
}
inline const Mat& values_of(const AudioTokens& t, int stream) {
  return stream == kSilentStream ? t.silent_values : t.values[static_cast<size_t>(stream)];
}
inline Mat& keys_of(AudioTokens& t, int stream) {
  return stream == kSilentStream ? t.silent_keys : t.keys[static_cast<size_t>(stream)];
}
inline Mat& values_of(AudioTokens& t, int stream) {
  return stream == kSilentStream ? t.silent_values : t.values[static_cast<size_t>(stream)];
}

}  // namespace

ChannelSeq masked_audio_cross_attention(const ChannelSeq& queries, const AudioTokens& tokens,
                                        const AttnRouting& routing, int radius,
                                        CrossAttnCache* cache) {
  const int F = static_cast<int>(queries.size());
  require(F == static_cast<int>(routing.stream_of.size()),
          "masked_audio_cross_attention: routing does not cover all channels");
  require(radius >= 0, "masked_audio_cross_attention: negative window radius");
  for (int s : routing.stream_of)
    require(s == kSilentStream || (s >= 0 && s < static_cast<int>(tokens.keys.size())),
            "masked_audio_cross_attention: stream index out of range");

  const int T = tokens.frames();
  const int W = 2 * radius + 1;
  ChannelSeq out(queries.size());
  if (cache) {
    cache->alpha.assign(queries.size(), Mat::Zero(T, W));
    cache->radius = radius;
  }

  for (int f = 0; f < F; ++f) {
    const Mat& q = queries[static_cast<size_t>(f)];
    require(static_cast<int>(q.rows()) == T, "masked_audio_cross_attention: query length mismatch");
    const int d = static_cast<int>(q.cols());
    const double inv_sqrt_d = 1.0 / std::sqrt(static_cast<double>(d));
    const Mat& K = keys_of(tokens, routing.stream_of[f]);
    const Mat& V = values_of(tokens, routing.stream_of[f]);
    Mat o = Mat::Zero(T, V.cols());
    for (int t = 0; t < T; ++t) {
      const int lo = std::max(0, t - radius);
      const int hi = std::min(T - 1, t + radius);
      double best = -std::numeric_limits<double>::infinity();
      Eigen::VectorXd scores(hi - lo + 1);
      for (int j = lo; j <= hi; ++j) {
        scores[j - lo] = q.row(t).dot(K.row(j)) * inv_sqrt_d;
        best = std::max(best, scores[j - lo]);
      }
      double z = 0.0;
      for (int j = lo; j <= hi; ++j) {
        scores[j - lo] = std::exp(scores[j - lo] - best);
        z += scores[j - lo];
      }
      for (int j = lo; j <= hi; ++j) {
        const double a = scores[j - lo] / z;
        o.row(t) += a * V.row(j);
        if (cache) cache->alpha[static_cast<size_t>(f)](t, j - (t - radius)) = a;
      }
    }
    out[static_cast<size_t>(f)] = std::move(o);
  }
  return out;
}

void masked_audio_cross_attention_backward(const ChannelSeq& queries, const AudioTokens& tokens,
                                           const AttnRouting& routing, const CrossAttnCache& cache,
                                           const ChannelSeq& d_out, ChannelSeq& d_queries,
                                           AudioTokens& d_tokens) {
  const int F = static_cast<int>(queries.size());
  const int T = tokens.frames();
  const int radius = cache.radius;

  for (int f = 0; f < F; ++f) {
    const Mat& q = queries[static_cast<size_t>(f)];
    const double inv_sqrt_d = 1.0 / std::sqrt(static_cast<double>(q.cols()));
    const int stream = routing.stream_of[f];
    const Mat& K = keys_of(tokens, stream);
    const Mat& V = values_of(tokens, stream);
    Mat& dK = keys_of(d_tokens, stream);
    Mat& dV = values_of(d_tokens, stream);
    Mat& dQ = d_queries[static_cast<size_t>(f)];
    const Mat& dO = d_out[static_cast<size_t>(f)];
    const Mat& alpha = cache.alpha[static_cast<size_t>(f)];

    for (int t = 0; t < T; ++t) {
      const int lo = std::max(0, t - radius);
      const int hi = std::min(T - 1, t + radius);
      // d_alpha and softmax jacobian over the window
      double inner = 0.0;
      Eigen::VectorXd da(hi - lo + 1);
      for (int j = lo; j <= hi; ++j) {
        const double a = alpha(t, j - (t - radius));
        da[j - lo] = dO.row(t).dot(V.row(j));
        inner += a * da[j - lo];
        dV.row(j) += a * dO.row(t);
      }
      for (int j = lo; j <= hi; ++j) {
        const double a = alpha(t, j - (t - radius));
        const double ds = a * (da[j - lo] - inner) * inv_sqrt_d;
        dQ.row(t) += ds * K.row(j);
        dK.row(j) += ds * q.row(t);
      }
    }
  }
}

Mat encode_envelope(const AudioEncoder& enc, const Vec& envelope, EncodeCache* cache) {
  const int T = static_cast<int>(envelope.size());
  const int dm = static_cast<int>(enc.w1.cols());
  Mat h1(T, dm);
  for (int t = 0; t < T; ++t)
    h1.row(t) = (envelope[t] * enc.w1.row(0) + enc.b1).array().tanh().matrix();
  Mat feats = ((h1 * enc.w2).rowwise() + enc.b2).array().tanh().matrix();
  if (cache) {
    cache->h1 = h1;
    cache->feats = feats;
  }
  return feats;
}

void encode_envelope_backward(const AudioEncoder& enc, const Vec& envelope,
                              const EncodeCache& cache, const Mat& d_feats,
                              AudioEncoderGrads& grads) {
  // feats = tanh(h1 w2 + b2), h1 = tanh(a w1 + b1)
  Mat d_pre2 = d_feats.cwiseProduct((1.0 - cache.feats.array().square()).matrix());
  grads.w2 += cache.h1.transpose() * d_pre2;
  grads.b2 += d_pre2.colwise().sum();
  Mat d_h1 = d_pre2 * enc.w2.transpose();
  Mat d_pre1 = d_h1.cwiseProduct((1.0 - cache.h1.array().square()).matrix());
  grads.w1.row(0) += envelope.transpose() * d_pre1;
  grads.b1 += d_pre1.colwise().sum();
}

Mat silent_embedding(const AudioEncoder& enc, int T, EncodeCache* cache) {
  if (enc.learned_silent) {
    Mat feats = enc.silent_token.replicate(T, 1);
    if (cache) {
      cache->h1 = Mat::Zero(T, enc.silent_token.cols());
      cache->feats = feats;
    }
    return feats;
  }
  return encode_envelope(enc, Vec::Zero(T), cache);
}

}  // namespace avatarlab
