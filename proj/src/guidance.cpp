#include "avatarlab/guidance.hpp"

#include <nlohmann/json.hpp>

namespace avatarlab {

using nlohmann::json;

void GuidanceConfig::validate() const {
  require(alpha_t >= 0.0 && alpha_a_high_noise >= 0.0 && alpha_a_low_noise >= 0.0,
          "GuidanceConfig: scales must be >= 0");
  require(t_spot >= 0.0 && t_spot <= 1000.0, "GuidanceConfig: t_spot outside [0, 1000]");
}

json GuidanceConfig::to_json() const {
  return json{{"alpha_t", alpha_t},
              {"alpha_a_high_noise", alpha_a_high_noise},
              {"alpha_a_low_noise", alpha_a_low_noise},
              {"t_spot", t_spot},
              {"dynamic", dynamic}};
}

GuidanceConfig GuidanceConfig::from_json(const json& j) {
  GuidanceConfig c;
  c.alpha_t = j.at("alpha_t").get<double>();
  c.alpha_a_high_noise = j.at("alpha_a_high_noise").get<double>();
  c.alpha_a_low_noise = j.at("alpha_a_low_noise").get<double>();
  c.t_spot = j.at("t_spot").get<double>();
  c.dynamic = j.at("dynamic").get<bool>();
  c.validate();
  return c;
}

std::pair<double, double> cfg_scales_at(double tau, const GuidanceConfig& cfg) {
  cfg.validate();
  if (!cfg.dynamic) return {cfg.alpha_a_low_noise, cfg.alpha_t};
  return {tau > cfg.t_spot ? cfg.alpha_a_high_noise : cfg.alpha_a_low_noise, cfg.alpha_t};
}

Mat real_score_vanilla(const Denoiser& eps_audio, const Mat& x, double tau, const CondSet& cond,
                       double alpha_a, double alpha_t, const TokenLayout& layout) {
  if (!eps_audio.cfg.has_audio_layer)
    throw std::invalid_argument("real_score_vanilla: teacher lacks an audio pathway");
  Mat e_un = denoiser_forward(eps_audio, x, tau, cond.with_null_text().with_silent_audio(), layout);
  Mat e_text_audio = denoiser_forward(eps_audio, x, tau, cond, layout);
  Mat e_text_unaudio = denoiser_forward(eps_audio, x, tau, cond.with_silent_audio(), layout);
  return e_un + alpha_a * (e_text_audio - e_text_unaudio) + alpha_t * (e_text_unaudio - e_un);
}

Mat real_score_twin(const Denoiser& eps_audio, const Denoiser& eps_text, const Mat& x, double tau,
                    const CondSet& cond, double alpha_a, double alpha_t,
                    const TokenLayout& layout) {
  if (!eps_audio.cfg.has_audio_layer)
    throw std::invalid_argument("real_score_twin: audio teacher lacks an audio pathway");
  if (eps_text.cfg.has_audio_layer)
    throw std::invalid_argument("real_score_twin: text teacher must not have an audio pathway");
  if (eps_text.cfg.persons != eps_audio.cfg.persons)
    throw std::invalid_argument("real_score_twin: teachers disagree on clip shape");
  Mat e_un = denoiser_forward(eps_audio, x, tau, cond.with_null_text().with_silent_audio(), layout);
  Mat e_text_audio = denoiser_forward(eps_audio, x, tau, cond, layout);
  Mat e_text = denoiser_forward(eps_text, x, tau, cond.without_audio(), layout);
  return e_un + alpha_a * (e_text_audio - e_text) + alpha_t * (e_text - e_un);
}

Mat fake_score_cond(const Denoiser& eps_fake, const Mat& x, double tau, const CondSet& cond,
                    const TokenLayout& layout) {
  return denoiser_forward(eps_fake, x, tau, cond, layout);
}

}  // namespace avatarlab
