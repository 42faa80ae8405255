#pragma once

// Ancestral sampling with classifier-free guidance.
//
// The sampler sees the network only through EpsModel, so tests can substitute
// analytic stubs and count calls.

#include <cstdint>
#include <functional>
#include <stdexcept>
#include <string>
#include <vector>

#include "echosyn/condition.hpp"
#include "echosyn/diffusion.hpp"
#include "echosyn/net.hpp"

namespace echosyn {

/// Noise estimate eps(y_t, x, t) for a K x C x H x W state.
using EpsModel = std::function<Video(const Video& y_t, const SemanticCondition& x, int t)>;

/// Adapts a network; `lowres` (if given) must outlive the returned model.
EpsModel denoiser_model(const Denoiser<float>& net, const Video* lowres = nullptr);

struct SamplerConfig {
  double guidance_scale = 7.0;
  bool clip_denoised = true;
  std::uint64_t seed = 0;
  ReverseVariance variance = ReverseVariance::kPosterior;

  std::vector<std::string> validation_errors() const;
};

/// eps_cond + s * (eps_cond - eps_uncond).
template <typename T>
Tensor<T> cfg_combine(const Tensor<T>& eps_cond, const Tensor<T>& eps_uncond, double s);

/// Draws y_T ~ N(0, I) from the seed and runs t = T..1, evaluating the model
/// under x and under the null condition at every step.
Video sample_video(const EpsModel& model, const SemanticCondition& x, const Shape& video_shape,
                   const NoiseSchedule& sched, const SamplerConfig& cfg);

/// splitmix64 finalizer.
std::uint64_t mix64(std::uint64_t v);

/// Seed of replicate r under condition c: mix64(mix64(mix64(base) + c) + r).
std::uint64_t replicate_seed(std::uint64_t base_seed, std::uint64_t condition_index, std::uint64_t replicate_index);

/// Failure of one replicate inside batch_sample.
class SampleError : public std::runtime_error {
 public:
  SampleError(const std::string& what, std::size_t condition_index, int replicate_index)
      : std::runtime_error(what), condition_index(condition_index), replicate_index(replicate_index) {}
  std::size_t condition_index;
  int replicate_index;
};

/// n_per_condition videos per condition, condition-major. Replicate r of
/// condition c uses replicate_seed(cfg.seed, c, r).
std::vector<Video> batch_sample(const EpsModel& model, const std::vector<SemanticCondition>& conditions,
                                int n_per_condition, const Shape& video_shape, const NoiseSchedule& sched,
                                const SamplerConfig& cfg);

/// Standard-normal tensor from an engine.
template <typename Rng>
Video normal_video(const Shape& shape, Rng& rng);

}  // namespace echosyn

#include <random>

namespace echosyn {

template <typename Rng>
Video normal_video(const Shape& shape, Rng& rng) {
  std::normal_distribution<float> g(0.0f, 1.0f);
  Video v(shape);
  for (auto& e : v.vec()) e = g(rng);
  return v;
}

}  // namespace echosyn
