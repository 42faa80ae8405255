#pragma once

// Two-stage generation: a base model samples at low resolution, then a
// super-resolution model samples at full resolution conditioned on the
// noise-augmented, bilinearly upsampled base output (channel-concatenated)
// and on the semantic map.

#include <functional>
#include <string>
#include <vector>

#include "echosyn/sampler.hpp"

namespace echosyn {

struct CascadeConfig {
  int base_hw = 56;
  int target_hw = 128;
  double sr_noise_aug_level = 0.1;
  SamplerConfig base_sampler;
  SamplerConfig sr_sampler;

  std::vector<std::string> validation_errors() const;
};

/// Exact area resampling of every frame to hw x hw.
Video downsample_video(const Video& v, std::int64_t hw);

/// Bilinear resampling with half-pixel centres and clamped borders.
Video upsample_bilinear(const Video& v, std::int64_t hw);

struct SrCondition {
  Video lowres;                // K x C x target x target
  SemanticCondition semantic;  // at target resolution
};

/// upsample(lowres) + aug_level * aug_eps, plus the map at the target size.
SrCondition sr_condition_assembly(const Video& lowres, const SemanticCondition& x, const Video& aug_eps,
                                  double aug_level, std::int64_t target_hw);

/// Builds the SR-stage noise model for a given conditioning video.
using SrModelFactory = std::function<EpsModel(const Video& lowres)>;

struct CascadeResult {
  Video base;   // K x C x base x base
  Video final;  // K x C x target x target
};

/// Base stage under x resized to base_hw, then the SR stage. Augmentation
/// noise is drawn from mix64(sr_sampler.seed). Errors name the failing stage.
CascadeResult cascade_sample(const SemanticCondition& x, std::int64_t frames, std::int64_t channels,
                             const EpsModel& base_model, const NoiseSchedule& base_sched,
                             const SrModelFactory& sr_model, const NoiseSchedule& sr_sched, const CascadeConfig& cfg);

/// The base stage alone, identical to the first half of cascade_sample.
Video cascade_base_sample(const SemanticCondition& x, std::int64_t frames, std::int64_t channels,
                          const EpsModel& base_model, const NoiseSchedule& base_sched, const CascadeConfig& cfg);

/// Resizes a one-hot map to hw x hw by nearest neighbour.
SemanticCondition resize_condition(const SemanticCondition& x, std::int64_t hw);

}  // namespace echosyn
