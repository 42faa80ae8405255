#include "echosyn/config.hpp"

#include <cmath>
#include <fstream>
#include <set>
#include <type_traits>

#ifndef ECHOSYN_VERSION
#define ECHOSYN_VERSION "0.0.0"
#endif
#ifndef ECHOSYN_GIT_DESCRIBE
#define ECHOSYN_GIT_DESCRIBE "unknown"
#endif

namespace echosyn {

using nlohmann::json;

namespace {

template <class C, class F>
void net_fields(C& c, F&& f) {
  f("in_channels", c.in_channels);
  f("label_channels", c.label_channels);
  f("base_width", c.base_width);
  f("channel_multipliers", c.channel_multipliers);
  f("attention_levels", c.attention_levels);
  f("num_res_blocks", c.num_res_blocks);
  f("time_embed_dim", c.time_embed_dim);
  f("frame_embed_dim", c.frame_embed_dim);
  f("groups", c.groups);
  f("condition_mode", c.condition_mode);
  f("temporal_kernel", c.temporal_kernel);
  f("spade_hidden", c.spade_hidden);
  f("attention_heads", c.attention_heads);
  f("extra_input_channels", c.extra_input_channels);
}

template <class C, class F>
void train_fields(C& c, F&& f) {
  f("learning_rate", c.learning_rate);
  f("lr_schedule", c.lr_schedule);
  f("batch_size", c.batch_size);
  f("max_steps", c.max_steps);
  f("cond_drop_prob", c.cond_drop_prob);
  f("use_ema", c.use_ema);
  f("ema_decay", c.ema_decay);
  f("grad_clip_norm", c.grad_clip_norm);
  f("seed", c.seed);
  f("frames", c.frames);
  f("variant", c.variant);
  f("checkpoint_every", c.checkpoint_every);
  f("log_every", c.log_every);
  f("base_hw", c.base_hw);
  f("target_hw", c.target_hw);
  f("sr_noise_aug_level", c.sr_noise_aug_level);
}

template <class C, class F>
void schedule_fields(C& c, F&& f) {
  f("steps", c.steps);
  f("kind", c.kind);
  f("beta_start", c.beta_start);
  f("beta_end", c.beta_end);
  f("variance", c.variance);
}

template <class C, class F>
void sample_fields(C& c, F&& f) {
  f("guidance_scale", c.guidance_scale);
  f("clip_denoised", c.clip_denoised);
  f("seed", c.seed);
  f("n", c.n);
  f("use_ema", c.use_ema);
}

template <class C, class F>
void data_fields(C& c, F&& f) {
  f("root", c.root);
  f("split", c.split);
  f("split_seed", c.split_seed);
}

template <class C, class F>
void metrics_fields(C& c, F&& f) {
  f("extractor", c.extractor);
  f("standard_command", c.standard_command);
  f("standard_frame_dim", c.standard_frame_dim);
  f("standard_video_dim", c.standard_video_dim);
  f("n_per_map", c.n_per_map);
  f("extractor_seed", c.extractor_seed);
}

template <class V>
json encode(const V& v) {
  return v;
}
json encode(ConditionMode m) { return to_string(m); }
json encode(ScheduleKind k) { return to_string(k); }
json encode(ReverseVariance v) { return to_string(v); }
json encode(ModelVariant v) { return to_string(v); }

template <class V>
void decode(const json& j, V& v) {
  if constexpr (std::is_same_v<V, bool>) {
    if (!j.is_boolean()) throw std::invalid_argument("expected true or false");
  } else if constexpr (std::is_integral_v<V>) {
    if (!j.is_number_integer()) throw std::invalid_argument("expected an integer");
    if (std::is_unsigned_v<V> && j.get<std::int64_t>() < 0 && !j.is_number_unsigned()) {
      throw std::invalid_argument("expected a non-negative integer");
    }
  } else if constexpr (std::is_floating_point_v<V>) {
    if (!j.is_number()) throw std::invalid_argument("expected a number");
  } else if constexpr (std::is_same_v<V, std::string>) {
    if (!j.is_string()) throw std::invalid_argument("expected a string");
  } else {
    if (!j.is_array()) throw std::invalid_argument("expected an array");
    for (const auto& e : j) {
      if (!e.is_number()) throw std::invalid_argument("expected an array of numbers");
    }
    if constexpr (std::is_same_v<V, std::vector<int>>) {
      for (const auto& e : j) {
        if (!e.is_number_integer()) throw std::invalid_argument("expected an array of integers");
      }
    } else {
      if (j.size() != std::tuple_size_v<V>) throw std::invalid_argument("expected " + std::to_string(std::tuple_size_v<V>) + " numbers");
    }
  }
  v = j.get<V>();
}
void decode(const json& j, ConditionMode& m) {
  if (!j.is_string()) throw std::invalid_argument("expected \"spade\" or \"concat\"");
  m = condition_mode_from_string(j.get<std::string>());
}
void decode(const json& j, ScheduleKind& k) {
  if (!j.is_string()) throw std::invalid_argument("expected a schedule kind string");
  k = schedule_kind_from_string(j.get<std::string>());
}
void decode(const json& j, ReverseVariance& v) {
  if (!j.is_string()) throw std::invalid_argument("expected \"posterior\" or \"beta\"");
  v = reverse_variance_from_string(j.get<std::string>());
}
void decode(const json& j, ModelVariant& v) {
  if (!j.is_string()) throw std::invalid_argument("expected ddpm, cascade_base or cascade_sr");
  v = model_variant_from_string(j.get<std::string>());
}

template <class C, class Visit>
json dump_fields(const C& c, Visit visit) {
  json j = json::object();
  visit(c, [&](const char* name, const auto& field) { j[name] = encode(field); });
  return j;
}

template <class C, class Visit>
void merge_fields(C& c, const json& j, std::vector<std::string>& errors, const std::string& prefix, Visit visit) {
  if (!j.is_object()) {
    errors.push_back(prefix + ": expected an object");
    return;
  }
  std::set<std::string> known;
  visit(c, [&](const char* name, auto& field) {
    known.insert(name);
    auto it = j.find(name);
    if (it == j.end()) return;
    try {
      decode(*it, field);
    } catch (const std::exception& e) {
      errors.push_back(prefix + "." + name + ": " + e.what());
    }
  });
  for (const auto& item : j.items()) {
    if (!known.count(item.key())) errors.push_back(prefix + "." + item.key() + ": unknown key");
  }
}

auto net_visit = [](auto& c, auto&& f) { net_fields(c, f); };
auto train_visit = [](auto& c, auto&& f) { train_fields(c, f); };
auto schedule_visit = [](auto& c, auto&& f) { schedule_fields(c, f); };
auto sample_visit = [](auto& c, auto&& f) { sample_fields(c, f); };
auto data_visit = [](auto& c, auto&& f) { data_fields(c, f); };
auto metrics_visit = [](auto& c, auto&& f) { metrics_fields(c, f); };

}  // namespace

std::vector<std::string> ScheduleConfig::validation_errors() const {
  std::vector<std::string> errs;
  if (steps < 1) errs.push_back("schedule.steps must be >= 1");
  if (!(beta_start > 0.0 && beta_start < 1.0)) errs.push_back("schedule.beta_start must lie in (0, 1)");
  if (!(beta_end > 0.0 && beta_end < 1.0)) errs.push_back("schedule.beta_end must lie in (0, 1)");
  if (beta_start > beta_end) errs.push_back("schedule.beta_start must not exceed schedule.beta_end");
  return errs;
}

NoiseSchedule ScheduleConfig::build() const { return build_schedule(steps, kind, beta_start, beta_end); }

SamplerConfig SampleSettings::sampler(const ScheduleConfig& sched) const {
  return SamplerConfig{guidance_scale, clip_denoised, seed, sched.variance};
}

std::vector<std::string> RunConfig::validation_errors() const {
  auto errs = model.validation_errors();
  for (auto& e : schedule.validation_errors()) errs.push_back(e);
  for (auto& e : train.validation_errors()) errs.push_back(e);
  for (auto& e : sample.sampler(schedule).validation_errors()) errs.push_back(e);
  if (sample.n < 1) errs.push_back("sample.n must be >= 1");
  const double total = data.split[0] + data.split[1] + data.split[2];
  if (std::abs(total - 1.0) > 1e-9) errs.push_back("data.split ratios must sum to 1");
  for (double r : data.split) {
    if (r < 0) errs.push_back("data.split ratios must be non-negative");
  }
  if (metrics.extractor != "toy" && metrics.extractor != "standard") {
    errs.push_back("metrics.extractor must be toy or standard, got '" + metrics.extractor + "'");
  }
  if (metrics.extractor == "standard" && metrics.standard_command.empty()) {
    errs.push_back("metrics.standard_command is required for the standard extractor");
  }
  if (metrics.standard_frame_dim < 1 || metrics.standard_video_dim < 1) {
    errs.push_back("metrics.standard_frame_dim and metrics.standard_video_dim must be >= 1");
  }
  if (metrics.n_per_map < 1) errs.push_back("metrics.n_per_map must be >= 1");
  const bool sr = train.variant == ModelVariant::kCascadeSr;
  if (sr && model.extra_input_channels != model.in_channels) {
    errs.push_back("model.extra_input_channels must equal model.in_channels for the cascade_sr variant");
  }
  if (!sr && model.extra_input_channels != 0) {
    errs.push_back("model.extra_input_channels is only used by the cascade_sr variant");
  }
  return errs;
}

ConfigParseError::ConfigParseError(std::vector<std::string> errs)
    : ConfigError([&] {
        std::string msg = "invalid configuration (" + std::to_string(errs.size()) + " problem" +
                          (errs.size() == 1 ? "" : "s") + "):";
        for (const auto& e : errs) msg += "\n  " + e;
        return msg;
      }()),
      errors(std::move(errs)) {}

json to_json(const NetConfig& c) { return dump_fields(c, net_visit); }
json to_json(const TrainConfig& c) { return dump_fields(c, train_visit); }
json to_json(const ScheduleConfig& c) { return dump_fields(c, schedule_visit); }

json to_json(const RunConfig& c) {
  return json{{"model", to_json(c.model)},
              {"schedule", to_json(c.schedule)},
              {"train", to_json(c.train)},
              {"sample", dump_fields(c.sample, sample_visit)},
              {"data", dump_fields(c.data, data_visit)},
              {"metrics", dump_fields(c.metrics, metrics_visit)}};
}

void merge_json(NetConfig& c, const json& j, std::vector<std::string>& errors, const std::string& prefix) {
  merge_fields(c, j, errors, prefix, net_visit);
}

void merge_json(TrainConfig& c, const json& j, std::vector<std::string>& errors, const std::string& prefix) {
  merge_fields(c, j, errors, prefix, train_visit);
}

void merge_json(RunConfig& c, const json& j, std::vector<std::string>& errors) {
  if (!j.is_object()) {
    errors.push_back("configuration root must be an object");
    return;
  }
  for (const auto& item : j.items()) {
    const auto& k = item.key();
    const auto& v = item.value();
    if (k == "model") {
      merge_fields(c.model, v, errors, k, net_visit);
    } else if (k == "schedule") {
      merge_fields(c.schedule, v, errors, k, schedule_visit);
    } else if (k == "train") {
      merge_fields(c.train, v, errors, k, train_visit);
    } else if (k == "sample") {
      merge_fields(c.sample, v, errors, k, sample_visit);
    } else if (k == "data") {
      merge_fields(c.data, v, errors, k, data_visit);
    } else if (k == "metrics") {
      merge_fields(c.metrics, v, errors, k, metrics_visit);
    } else {
      errors.push_back(k + ": unknown section");
    }
  }
}

RunConfig load_run_config(const std::string& path) {
  std::ifstream in(path);
  if (!in) throw ConfigParseError({path + ": cannot open configuration file"});
  json j;
  try {
    in >> j;
  } catch (const json::exception& e) {
    throw ConfigParseError({path + ": " + e.what()});
  }
  RunConfig rc;
  std::vector<std::string> errors;
  merge_json(rc, j, errors);
  if (!errors.empty()) throw ConfigParseError(errors);
  return rc;
}

CascadeConfig cascade_config(const RunConfig& rc, std::uint64_t base_seed, std::uint64_t sr_seed) {
  CascadeConfig c;
  c.base_hw = rc.train.base_hw;
  c.target_hw = rc.train.target_hw;
  c.sr_noise_aug_level = rc.train.sr_noise_aug_level;
  c.base_sampler = rc.sample.sampler(rc.schedule);
  c.base_sampler.seed = base_seed;
  c.sr_sampler = c.base_sampler;
  c.sr_sampler.seed = sr_seed;
  return c;
}

std::string version_fingerprint() { return std::string("echosyn ") + ECHOSYN_VERSION + " (" + ECHOSYN_GIT_DESCRIBE + ")"; }

}  // namespace echosyn
