#pragma once

#include "avatarlab/multistream.hpp"
#include "avatarlab/paramstore.hpp"
#include "avatarlab/toyworld.hpp"

#include <functional>
#include <optional>
#include <span>

namespace avatarlab {

// --- flow-matching conventions -----------------------------------------------

// Noise fraction sigma(tau) = tau / 1000 on the 0..1000 timestep scale.
double sigma_of(double tau);

// x0 estimate from a velocity prediction: noisy - sigma(tau) * v.
Mat x0_from_velocity(const Mat& noisy, double tau, const Mat& v);

// (1 - sigma) * x0 + sigma * eps.
Mat flow_interpolate(const Mat& x0, double tau, const Mat& eps);

// --- model -------------------------------------------------------------------

struct DenoiserConfig {
  int persons = 1;
  int hidden = 64;
  int heads = 4;
  int blocks = 2;
  int text_dim = 16;
  int audio_dim = 16;    // cross-attention q/k/v width
  int enc_hidden = 16;   // audio encoder feature width
  int window_radius = 0; // temporal window for audio keys/values
  bool has_audio_layer = true;
  bool learned_silent_token = false;

  int head_dim() const { return hidden / heads; }
  void validate() const;

  nlohmann::json to_json() const;
  static DenoiserConfig from_json(const nlohmann::json& j);
};

// Conditioning bundle for one forward pass. A missing text class means the
// null text condition; missing audio means the silent streams (for models
// with an audio pathway) or no audio routing at all (text-teacher models).
struct CondSet {
  int text_class = kNullTextId;
  std::optional<Mat> audio;  // persons × S envelopes, frame-aligned to tokens

  bool has_audio() const { return audio.has_value(); }
  CondSet with_null_text() const;
  CondSet with_silent_audio() const;
  CondSet without_audio() const;
  static CondSet of_class(TextClass c) { return {static_cast<int>(c), std::nullopt}; }
};

struct TokenLayout {
  std::vector<int> positions;      // strictly increasing
  std::vector<uint8_t> noise_flags;  // 1 = noisy frame, 0 = noise-free

  size_t size() const { return positions.size(); }
  int noisy_count() const;
  void validate() const;
  static TokenLayout contiguous(int frames);  // positions 0..T-1, all noisy
};

// Parameter group names.
namespace groups {
inline constexpr const char* kFrameEmbed = "frame_embed";
inline constexpr const char* kSelfAttn = "self_attn";
inline constexpr const char* kTextProj = "text_proj";
inline constexpr const char* kAudioCrossAttn = "audio_cross_attn";
inline constexpr const char* kTimeEmbed = "time_embed";
inline constexpr const char* kOutProj = "out_proj";
}  // namespace groups

struct Denoiser {
  DenoiserConfig cfg;
  ParamStore params;

  static Denoiser init(const DenoiserConfig& cfg, uint64_t seed);

  // Adds (randomly initialized) audio cross-attention tensors to a model that
  // was built without them. Stage-2 insertion.
  void insert_audio_layer(uint64_t seed);

  void save(const std::filesystem::path& prefix) const;
  static Denoiser load(const std::filesystem::path& prefix);
};

struct ForwardCache;  // defined in denoiser.cpp; opaque to callers

struct ForwardCacheHandle {
  std::shared_ptr<ForwardCache> p;
};

// Conditional velocity model evaluation. Returns an S × F velocity matrix.
Mat denoiser_forward(const Denoiser& model, const Mat& noisy, double tau, const CondSet& cond,
                     const TokenLayout& layout, ForwardCacheHandle* cache = nullptr);

// Accumulates d(loss)/d(params) into `grads` given d(loss)/d(output).
void denoiser_backward(const Denoiser& model, const ForwardCacheHandle& cache,
                       const Mat& d_output, ParamStore& grads);

// --- batched gradient contract -------------------------------------------------

struct BatchSample {
  Mat noisy;
  double tau = 0.0;
  CondSet cond;
  TokenLayout layout;
};

// Per-sample loss evaluated on the model output; returns the loss value and
// d(loss)/d(output). Total loss is the sum over samples.
using OutputLoss = std::function<std::pair<double, Mat>(size_t sample_idx, const Mat& out)>;

std::pair<double, ParamStore> grad_params(const Denoiser& model, std::span<const BatchSample> batch,
                                          const OutputLoss& loss);

// Central-difference verification of an arbitrary scalar objective against a
// precomputed analytic gradient. Samples n_coords coordinates; returns
// max |analytic - central| / (|central| + 1e-8).
double finite_diff_check_objective(const std::function<double(const ParamStore&)>& objective,
                                   const ParamStore& at, const ParamStore& analytic,
                                   double eps, int n_coords, uint64_t seed);

// Same check specialized to a batched output loss on this model.
double finite_diff_check(const Denoiser& model, std::span<const BatchSample> batch,
                         const OutputLoss& loss, double eps = 1e-5, int n_coords = 120,
                         uint64_t seed = 0);

}  // namespace avatarlab
