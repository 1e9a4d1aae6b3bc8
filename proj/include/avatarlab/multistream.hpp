#pragma once

#include "avatarlab/common.hpp"

#include <nlohmann/json_fwd.hpp>

#include <vector>

namespace avatarlab {

// Routed stream index for channels owned by nobody (e.g. the camera channel).
inline constexpr int kSilentStream = -1;

// Per-person binary channel masks. masks(p, f) == 1 iff channel f belongs to
// person p. Masks must be pairwise disjoint; uncovered channels route to the
// silent stream.
struct MaskSet {
  Mat masks;  // persons × F, entries in {0, 1}

  int persons() const { return static_cast<int>(masks.rows()); }
  int channels() const { return static_cast<int>(masks.cols()); }
};

struct AttnRouting {
  std::vector<int> stream_of;  // per channel: stream index or kSilentStream
  int n_streams = 0;

  nlohmann::json to_json() const;
};

AttnRouting build_attention_routing(const MaskSet& masks, int streams);

// Per-stream key/value token sequences, one row per frame. The silent
// sequence (embedding of the all-zero envelope) is carried separately.
struct AudioTokens {
  std::vector<Mat> keys;    // n_streams entries, each T × d
  std::vector<Mat> values;  // n_streams entries, each T × d
  Mat silent_keys;          // T × d
  Mat silent_values;        // T × d

  int frames() const {
    return keys.empty() ? static_cast<int>(silent_keys.rows())
                        : static_cast<int>(keys[0].rows());
  }
};

// Channel-major query/output layout: seq[f] is the T × d sequence of channel f.
using ChannelSeq = std::vector<Mat>;

struct CrossAttnCache {
  std::vector<Mat> alpha;  // per channel: T × (2r+1) softmax weights, 0 where clipped
  int radius = 0;
};

// Windowed softmax attention of each (frame, channel) query over its routed
// stream's tokens at frames [t-r, t+r]. radius 0 degenerates to a gather of
// the co-timed value token.
ChannelSeq masked_audio_cross_attention(const ChannelSeq& queries, const AudioTokens& tokens,
                                        const AttnRouting& routing, int radius = 0,
                                        CrossAttnCache* cache = nullptr);

// Reverse pass. Accumulates into d_queries / d_tokens (which must be
// zero-initialized to the shapes of the forward inputs).
void masked_audio_cross_attention_backward(const ChannelSeq& queries, const AudioTokens& tokens,
                                           const AttnRouting& routing, const CrossAttnCache& cache,
                                           const ChannelSeq& d_out, ChannelSeq& d_queries,
                                           AudioTokens& d_tokens);

// Two-layer tanh encoder mapping a scalar envelope sample to a feature row.
struct AudioEncoder {
  Mat w1;           // 1 × dm
  RowVec b1;        // dm
  Mat w2;           // dm × dm
  RowVec b2;        // dm
  bool learned_silent = false;
  RowVec silent_token;  // dm, substitutes the zero-envelope embedding when enabled
};

struct EncodeCache {
  Mat h1;     // T × dm, post first tanh
  Mat feats;  // T × dm, post second tanh
};

Mat encode_envelope(const AudioEncoder& enc, const Vec& envelope, EncodeCache* cache = nullptr);

struct AudioEncoderGrads {
  Mat w1;
  RowVec b1;
  Mat w2;
  RowVec b2;
  RowVec silent_token;
};

void encode_envelope_backward(const AudioEncoder& enc, const Vec& envelope,
                              const EncodeCache& cache, const Mat& d_feats,
                              AudioEncoderGrads& grads);

// Embedding of the all-zero envelope of length T (or the learned token when
// the encoder is configured that way).
Mat silent_embedding(const AudioEncoder& enc, int T, EncodeCache* cache = nullptr);

}  // namespace avatarlab
