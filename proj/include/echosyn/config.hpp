#pragma once

// Hierarchical run configuration (model, schedule, train, sample, data,
// metrics) as JSON. Unknown keys are errors; values are validated as a whole
// so every problem is reported at once.

#include <array>
#include <cstdint>
#include <string>
#include <vector>

#include <json.hpp>

#include "echosyn/cascade.hpp"
#include "echosyn/diffusion.hpp"
#include "echosyn/net.hpp"
#include "echosyn/sampler.hpp"
#include "echosyn/trainer.hpp"

namespace echosyn {

struct ScheduleConfig {
  int steps = 1000;
  ScheduleKind kind = ScheduleKind::kLinear;
  double beta_start = 1e-4;
  double beta_end = 0.02;
  ReverseVariance variance = ReverseVariance::kPosterior;

  std::vector<std::string> validation_errors() const;
  NoiseSchedule build() const;
};

struct SampleSettings {
  double guidance_scale = 7.0;
  bool clip_denoised = true;
  std::uint64_t seed = 0;
  int n = 1;  // videos per label map
  bool use_ema = true;

  SamplerConfig sampler(const ScheduleConfig& sched) const;
};

struct DataConfig {
  std::string root;
  std::array<double, 3> split{0.8, 0.1, 0.1};
  std::uint64_t split_seed = 0;
};

struct MetricsConfig {
  std::string extractor = "toy";  // toy | standard
  std::string standard_command;   // external embedding command for "standard"
  int standard_frame_dim = 2048;  // its per-frame embedding width
  int standard_video_dim = 400;   // its per-video embedding width
  int n_per_map = 10;
  std::uint64_t extractor_seed = 0;
};

struct RunConfig {
  NetConfig model;
  ScheduleConfig schedule;
  TrainConfig train;
  SampleSettings sample;
  DataConfig data;
  MetricsConfig metrics;

  std::vector<std::string> validation_errors() const;
};

class ConfigParseError : public ConfigError {
 public:
  explicit ConfigParseError(std::vector<std::string> errors);
  std::vector<std::string> errors;
};

nlohmann::json to_json(const NetConfig& c);
nlohmann::json to_json(const TrainConfig& c);
nlohmann::json to_json(const ScheduleConfig& c);
nlohmann::json to_json(const RunConfig& c);

/// Overlays `j` onto `c`. Collects unknown keys and type errors into `errors`.
void merge_json(NetConfig& c, const nlohmann::json& j, std::vector<std::string>& errors,
                const std::string& prefix = "model");
void merge_json(TrainConfig& c, const nlohmann::json& j, std::vector<std::string>& errors,
                const std::string& prefix = "train");
void merge_json(RunConfig& c, const nlohmann::json& j, std::vector<std::string>& errors);

/// Defaults overlaid with the file; throws ConfigParseError listing every problem.
RunConfig load_run_config(const std::string& path);

/// Cascade settings derived from a run config.
CascadeConfig cascade_config(const RunConfig& rc, std::uint64_t base_seed, std::uint64_t sr_seed);

/// Build identity baked in at compile time.
std::string version_fingerprint();

}  // namespace echosyn
