#include "echosyn/cascade.hpp"

#include <algorithm>
#include <cmath>
#include <random>

namespace echosyn {

std::vector<std::string> CascadeConfig::validation_errors() const {
  std::vector<std::string> errs;
  if (base_hw < 1) errs.push_back("cascade.base_hw must be positive");
  if (base_hw >= target_hw) errs.push_back("cascade.base_hw must be smaller than cascade.target_hw");
  if (!(sr_noise_aug_level >= 0.0 && sr_noise_aug_level < 1.0)) {
    errs.push_back("cascade.sr_noise_aug_level must lie in [0, 1)");
  }
  for (auto& e : base_sampler.validation_errors()) errs.push_back("base stage: " + e);
  for (auto& e : sr_sampler.validation_errors()) errs.push_back("super-resolution stage: " + e);
  return errs;
}

namespace {

// Row-stochastic (dst x src) weights; dst pixel i covers [i*src/dst, (i+1)*src/dst).
std::vector<double> area_weights(std::int64_t src, std::int64_t dst) {
  std::vector<double> w(static_cast<std::size_t>(dst * src), 0.0);
  const double step = static_cast<double>(src) / static_cast<double>(dst);
  for (std::int64_t i = 0; i < dst; ++i) {
    const double lo = i * step, hi = (i + 1) * step;
    for (auto j = static_cast<std::int64_t>(std::floor(lo)); j < src && j < hi; ++j) {
      const double overlap = std::min(hi, static_cast<double>(j + 1)) - std::max(lo, static_cast<double>(j));
      if (overlap > 0) w[i * src + j] = overlap / step;
    }
  }
  return w;
}

std::vector<double> bilinear_weights(std::int64_t src, std::int64_t dst) {
  std::vector<double> w(static_cast<std::size_t>(dst * src), 0.0);
  const double step = static_cast<double>(src) / static_cast<double>(dst);
  for (std::int64_t i = 0; i < dst; ++i) {
    const double s = std::clamp((i + 0.5) * step - 0.5, 0.0, static_cast<double>(src - 1));
    const auto j0 = static_cast<std::int64_t>(std::floor(s));
    const auto j1 = std::min(j0 + 1, src - 1);
    const double f = s - j0;
    w[i * src + j0] += 1.0 - f;
    w[i * src + j1] += f;
  }
  return w;
}

// out = Wy * frame * Wx^T for every frame, accumulated in double.
Video separable_resample(const Video& v, std::int64_t hw, const std::vector<double>& wy,
                         const std::vector<double>& wx) {
  const auto k = v.dim(0), c = v.dim(1), h = v.dim(2), w = v.dim(3);
  Video out({k, c, hw, hw});
  std::vector<double> tmp(static_cast<std::size_t>(hw * w));
  for (std::int64_t f = 0; f < k * c; ++f) {
    const float* src = v.data() + f * h * w;
    float* dst = out.data() + f * hw * hw;
    std::fill(tmp.begin(), tmp.end(), 0.0);
    for (std::int64_t i = 0; i < hw; ++i) {
      for (std::int64_t y = 0; y < h; ++y) {
        const double a = wy[i * h + y];
        if (a == 0.0) continue;
        for (std::int64_t x = 0; x < w; ++x) tmp[i * w + x] += a * src[y * w + x];
      }
    }
    for (std::int64_t i = 0; i < hw; ++i) {
      for (std::int64_t j = 0; j < hw; ++j) {
        double acc = 0;
        for (std::int64_t x = 0; x < w; ++x) acc += wx[j * w + x] * tmp[i * w + x];
        dst[i * hw + j] = static_cast<float>(acc);
      }
    }
  }
  return out;
}

void require_square_video(const Video& v, const char* what) {
  if (v.rank() != 4 || v.dim(2) != v.dim(3)) {
    throw ContractError(std::string(what) + ": expected K x C x S x S video, got " + shape_str(v.shape()));
  }
}

}  // namespace

Video downsample_video(const Video& v, std::int64_t hw) {
  require_square_video(v, "downsample_video");
  if (hw < 1 || hw > v.dim(2)) {
    throw ContractError("downsample_video: cannot resample " + std::to_string(v.dim(2)) + " to " + std::to_string(hw));
  }
  const auto w = area_weights(v.dim(2), hw);
  return separable_resample(v, hw, w, w);
}

Video upsample_bilinear(const Video& v, std::int64_t hw) {
  require_square_video(v, "upsample_bilinear");
  if (hw < v.dim(2)) {
    throw ContractError("upsample_bilinear: cannot resample " + std::to_string(v.dim(2)) + " to " + std::to_string(hw));
  }
  const auto w = bilinear_weights(v.dim(2), hw);
  return separable_resample(v, hw, w, w);
}

SemanticCondition resize_condition(const SemanticCondition& x, std::int64_t hw) {
  if (x.height() == hw && x.width() == hw) return x;
  return {resize_nearest(x.onehot, hw, hw), x.is_null};
}

SrCondition sr_condition_assembly(const Video& lowres, const SemanticCondition& x, const Video& aug_eps,
                                  double aug_level, std::int64_t target_hw) {
  SrCondition c{upsample_bilinear(lowres, target_hw), resize_condition(x, target_hw)};
  require_same_shape(c.lowres.shape(), aug_eps.shape(), "sr_condition_assembly");
  if (aug_level != 0.0) {
    const auto a = static_cast<float>(aug_level);
    for (std::int64_t i = 0; i < c.lowres.numel(); ++i) c.lowres[i] += a * aug_eps[i];
  }
  return c;
}

Video cascade_base_sample(const SemanticCondition& x, std::int64_t frames, std::int64_t channels,
                          const EpsModel& base_model, const NoiseSchedule& base_sched, const CascadeConfig& cfg) {
  if (auto errs = cfg.validation_errors(); !errs.empty()) throw ConfigError(errs.front());
  try {
    const auto xb = resize_condition(x, cfg.base_hw);
    return sample_video(base_model, xb, {frames, channels, cfg.base_hw, cfg.base_hw}, base_sched, cfg.base_sampler);
  } catch (const std::exception& e) {
    throw std::runtime_error(std::string("base stage: ") + e.what());
  }
}

CascadeResult cascade_sample(const SemanticCondition& x, std::int64_t frames, std::int64_t channels,
                             const EpsModel& base_model, const NoiseSchedule& base_sched,
                             const SrModelFactory& sr_model, const NoiseSchedule& sr_sched, const CascadeConfig& cfg) {
  CascadeResult r;
  r.base = cascade_base_sample(x, frames, channels, base_model, base_sched, cfg);
  if (r.base.dim(2) != cfg.base_hw) throw ContractError("base stage returned the wrong resolution");
  try {
    std::mt19937_64 rng(mix64(cfg.sr_sampler.seed));
    const Shape full{frames, channels, cfg.target_hw, cfg.target_hw};
    const Video aug = normal_video(full, rng);
    const auto cond = sr_condition_assembly(r.base, x, aug, cfg.sr_noise_aug_level, cfg.target_hw);
    r.final = sample_video(sr_model(cond.lowres), cond.semantic, full, sr_sched, cfg.sr_sampler);
  } catch (const std::exception& e) {
    throw std::runtime_error(std::string("super-resolution stage: ") + e.what());
  }
  if (r.final.dim(2) != cfg.target_hw) throw ContractError("super-resolution stage returned the wrong resolution");
  return r;
}

}  // namespace echosyn
