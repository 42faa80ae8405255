#pragma once

// Noise-prediction training with condition dropout, Adam, global-norm
// clipping and an optional EMA copy of the weights.
//
// All randomness of step n (batch selection, t, eps, dropout, SR
// augmentation) comes from an engine seeded by (seed, n), so a run restored
// from a checkpoint continues exactly as the uninterrupted run would.

#include <cstdint>
#include <filesystem>
#include <memory>
#include <random>
#include <string>
#include <vector>

#include "echosyn/dataset.hpp"
#include "echosyn/diffusion.hpp"
#include "echosyn/net.hpp"

namespace echosyn {

enum class ModelVariant { kDdpm, kCascadeBase, kCascadeSr };
std::string to_string(ModelVariant v);
ModelVariant model_variant_from_string(const std::string& s);

struct TrainConfig {
  double learning_rate = 1e-4;
  std::string lr_schedule = "constant";  // constant | cosine (decays to 0 at max_steps)
  int batch_size = 24;
  std::int64_t max_steps = 0;  // required
  double cond_drop_prob = 0.1;
  bool use_ema = true;
  double ema_decay = 0.9999;
  double grad_clip_norm = 1.0;  // <= 0 disables clipping
  std::uint64_t seed = 0;
  int frames = 16;
  ModelVariant variant = ModelVariant::kDdpm;
  std::int64_t checkpoint_every = 500;
  std::int64_t log_every = 10;
  int base_hw = 56;
  int target_hw = 128;
  double sr_noise_aug_level = 0.1;

  std::vector<std::string> validation_errors() const;
  /// Rate applied by the update that takes the model from `step` to `step + 1`.
  double learning_rate_at(std::int64_t step) const;
};

/// One training clip at the stage's resolution.
struct TrainExample {
  Video y0;                    // K x C x H x W in [-1, 1]
  SemanticCondition x;         // at H x W
  Video lowres;                // super-resolution stage only: clean K x C x base x base
  std::string patient_id;
};

/// Clips for the configured variant: native resolution for ddpm, base_hw for
/// the cascade base stage, target_hw (with its base_hw counterpart) for SR.
std::vector<TrainExample> make_examples(const std::vector<PatientRecord>& records, const TrainConfig& cfg);

/// Null condition with probability p, else x.
template <typename Rng>
SemanticCondition drop_condition(const SemanticCondition& x, double p, Rng& rng) {
  std::uniform_real_distribution<double> u(0.0, 1.0);
  return u(rng) < p ? x.as_null() : x;
}

/// Per-example objective: eps-prediction MSE at y_t = q_sample(y0, t, eps).
template <typename T>
ag::Var<T> example_loss(const Denoiser<T>& net, const Tensor<T>& y0, const SemanticCondition& x, int t,
                        const Tensor<T>& eps, const NoiseSchedule& sched, const Tensor<T>* lowres = nullptr);

struct StepReport {
  std::int64_t step = 0;  // step index after the update
  double loss = 0;        // batch mean
  double grad_norm = 0;   // before clipping
  std::vector<int> t_values;
  int dropped = 0;        // examples trained on the null condition
};

using NamedArrays = std::vector<std::pair<std::string, Tensor<float>>>;

struct Checkpoint {
  static constexpr std::uint32_t kFormatVersion = 1;

  NetConfig net;
  TrainConfig train;
  NoiseSchedule schedule;
  std::int64_t step = 0;
  NamedArrays params, ema, adam_m, adam_v;  // ema and Adam moments may be empty
  std::uint64_t fingerprint = 0;            // FNV-1a over the serialized arrays
};

class CheckpointError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

/// Atomic write: temp file in the same directory, then rename.
void save_checkpoint(const Checkpoint& ckpt, const std::filesystem::path& path);
Checkpoint load_checkpoint(const std::filesystem::path& path);

/// Network built from a checkpoint, with EMA weights when requested and present.
std::unique_ptr<Denoiser<float>> instantiate(const Checkpoint& ckpt, bool prefer_ema = true);

class Trainer {
 public:
  Trainer(NetConfig net, TrainConfig train, NoiseSchedule sched);
  explicit Trainer(const Checkpoint& ckpt);

  /// Batch indices for the current step, drawn with replacement.
  std::vector<std::size_t> select_batch(std::size_t dataset_size) const;

  /// One update on an explicit batch. Throws NumericFault on a non-finite loss.
  StepReport train_step(const std::vector<const TrainExample*>& batch);
  /// select_batch + train_step.
  StepReport train_step(const std::vector<TrainExample>& data);

  std::int64_t step() const { return step_; }
  const Denoiser<float>& net() const { return net_; }
  Denoiser<float>& net() { return net_; }
  const std::vector<Tensor<float>>& ema() const { return ema_; }
  const TrainConfig& train_config() const { return train_; }
  const NoiseSchedule& schedule() const { return sched_; }

  Checkpoint snapshot() const;

 private:
  std::mt19937_64 step_rng(std::uint64_t stream) const;

  TrainConfig train_;
  NoiseSchedule sched_;
  Denoiser<float> net_;
  std::vector<Tensor<float>> ema_, m_, v_;
  std::int64_t step_ = 0;
};

struct TrainingOutcome {
  Checkpoint final;
  std::vector<StepReport> history;
};

/// Runs until cfg.max_steps, writing ckpt_<step>.bin and latest.bin every
/// checkpoint_every steps and at the end, plus metrics.jsonl. With resume,
/// continues from out_dir/latest.bin if it exists. On failure the last good
/// checkpoint stays in place.
TrainingOutcome run_training(const NetConfig& net, const TrainConfig& cfg, const NoiseSchedule& sched,
                             const std::vector<TrainExample>& data, const std::filesystem::path& out_dir,
                             bool resume = false, std::ostream* log = nullptr);

}  // namespace echosyn
