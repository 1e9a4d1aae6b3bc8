#pragma once

#include "avatarlab/denoiser.hpp"

namespace avatarlab {

struct GuidanceConfig {
  double alpha_t = 3.0;
  double alpha_a_high_noise = 0.1;  // applied above t_spot
  double alpha_a_low_noise = 4.0;   // applied at and below t_spot
  double t_spot = 950.0;
  bool dynamic = true;

  void validate() const;
  nlohmann::json to_json() const;
  static GuidanceConfig from_json(const nlohmann::json& j);
};

// (alpha_a, alpha_t) at a given denoising timestep. "Exceeds t_spot" is read
// strictly, so tau == t_spot uses the low-noise scale.
std::pair<double, double> cfg_scales_at(double tau, const GuidanceConfig& cfg);

// Single-teacher decomposition:
//   e(un,un) + alpha_a*(e(text,audio) - e(text,un-audio))
//            + alpha_t*(e(text,un-audio) - e(un,un))
// Three distinct model evaluations.
Mat real_score_vanilla(const Denoiser& eps_audio, const Mat& x, double tau, const CondSet& cond,
                       double alpha_a, double alpha_t, const TokenLayout& layout);

// Twin-teacher composition:
//   e_a(un,un) + alpha_a*(e_a(text,audio) - e_t(text))
//              + alpha_t*(e_t(text) - e_a(un,un))
Mat real_score_twin(const Denoiser& eps_audio, const Denoiser& eps_text, const Mat& x, double tau,
                    const CondSet& cond, double alpha_a, double alpha_t,
                    const TokenLayout& layout);

// Conditional fake-score evaluation; no CFG composition on the fake side.
Mat fake_score_cond(const Denoiser& eps_fake, const Mat& x, double tau, const CondSet& cond,
                    const TokenLayout& layout);

}  // namespace avatarlab
