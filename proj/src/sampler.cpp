#include "echosyn/sampler.hpp"

#include <cmath>
#include <random>

namespace echosyn {

EpsModel denoiser_model(const Denoiser<float>& net, const Video* lowres) {
  return [&net, lowres](const Video& y_t, const SemanticCondition& x, int t) { return net.predict(y_t, x, t, lowres); };
}

std::vector<std::string> SamplerConfig::validation_errors() const {
  std::vector<std::string> errs;
  if (!(guidance_scale >= 0.0) || !std::isfinite(guidance_scale)) {
    errs.push_back("sample.guidance_scale must be a finite value >= 0");
  }
  return errs;
}

template <typename T>
Tensor<T> cfg_combine(const Tensor<T>& eps_cond, const Tensor<T>& eps_uncond, double s) {
  require_same_shape(eps_cond.shape(), eps_uncond.shape(), "cfg_combine");
  Tensor<T> out(eps_cond.shape());
  const T sc = static_cast<T>(s);
  for (std::int64_t i = 0; i < out.numel(); ++i) out[i] = eps_cond[i] + sc * (eps_cond[i] - eps_uncond[i]);
  return out;
}

template Tensor<float> cfg_combine(const Tensor<float>&, const Tensor<float>&, double);
template Tensor<double> cfg_combine(const Tensor<double>&, const Tensor<double>&, double);

namespace {

bool all_finite(const Video& v) {
  for (float e : v.vec()) {
    if (!std::isfinite(e)) return false;
  }
  return true;
}

}  // namespace

Video sample_video(const EpsModel& model, const SemanticCondition& x, const Shape& video_shape,
                   const NoiseSchedule& sched, const SamplerConfig& cfg) {
  if (video_shape.size() != 4) throw ContractError("video shape must be K x C x H x W, got " + shape_str(video_shape));
  if (x.is_null) throw ContractError("sample_video needs a real semantic condition, not the null label");
  if (auto errs = cfg.validation_errors(); !errs.empty()) throw ConfigError(errs.front());

  const SemanticCondition null = x.as_null();
  const ReverseStepOptions opts{cfg.clip_denoised, cfg.variance};
  std::mt19937_64 rng(cfg.seed);
  Video y = normal_video(video_shape, rng);
  for (int t = sched.steps; t >= 1; --t) {
    Video eps_c, eps_u;
    try {
      eps_c = model(y, x, t);
      eps_u = model(y, null, t);
    } catch (const NumericFault& e) {
      throw NumericFault("sampling step t=" + std::to_string(t) + ": " + e.what());
    }
    const Video eps = cfg_combine(eps_c, eps_u, cfg.guidance_scale);
    // Noise is drawn at every step, including t = 1, so the stream position
    // depends only on t.
    const Video z = normal_video(video_shape, rng);
    y = p_step(y, eps, t, sched, z, opts);
    if (!all_finite(y)) throw NumericFault("non-finite state at sampling step t=" + std::to_string(t));
  }
  return y;
}

std::uint64_t mix64(std::uint64_t v) {
  v += 0x9E3779B97F4A7C15ULL;
  v = (v ^ (v >> 30)) * 0xBF58476D1CE4E5B9ULL;
  v = (v ^ (v >> 27)) * 0x94D049BB133111EBULL;
  return v ^ (v >> 31);
}

std::uint64_t replicate_seed(std::uint64_t base_seed, std::uint64_t condition_index, std::uint64_t replicate_index) {
  return mix64(mix64(mix64(base_seed) + condition_index) + replicate_index);
}

std::vector<Video> batch_sample(const EpsModel& model, const std::vector<SemanticCondition>& conditions,
                                int n_per_condition, const Shape& video_shape, const NoiseSchedule& sched,
                                const SamplerConfig& cfg) {
  if (n_per_condition < 1) throw ConfigError("replicates per condition must be >= 1");
  std::vector<Video> out;
  out.reserve(conditions.size() * static_cast<std::size_t>(n_per_condition));
  for (std::size_t c = 0; c < conditions.size(); ++c) {
    for (int r = 0; r < n_per_condition; ++r) {
      SamplerConfig rc = cfg;
      rc.seed = replicate_seed(cfg.seed, c, static_cast<std::uint64_t>(r));
      try {
        out.push_back(sample_video(model, conditions[c], video_shape, sched, rc));
      } catch (const std::exception& e) {
        throw SampleError("condition " + std::to_string(c) + ", replicate " + std::to_string(r) + ": " + e.what(), c,
                          r);
      }
    }
  }
  return out;
}

}  // namespace echosyn
