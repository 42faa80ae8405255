#pragma once

// SSIM, Frechet distances over pluggable embeddings, and the evaluation
// protocol that pairs generated and real videos by their label map.

#include <cstdint>
#include <filesystem>
#include <functional>
#include <memory>
#include <string>
#include <vector>

#include <Eigen/Dense>

#include "echosyn/condition.hpp"
#include "echosyn/tensor.hpp"

namespace echosyn {

// ---------------------------------------------------------------------------
// SSIM

/// Mean SSIM of two H x W images with values in [0, 1]: 11x11 Gaussian window
/// (sigma 1.5) over the valid region, C1 = 0.01^2, C2 = 0.03^2.
double ssim_frame(const Tensor<double>& a, const Tensor<double>& b);

/// Frame (k, c) of a K x C x H x W video mapped from [-1, 1] to [0, 1].
Tensor<double> unit_frame(const Video& v, std::int64_t k, std::int64_t c = 0);

struct KeyedVideo {
  std::string map_id;
  Video video;
};

struct SsimPairing {
  double mean = 0;
  std::int64_t frame_pairs = 0;
};

/// Mean SSIM over all frames of every generated video against the real video
/// with the same map id. Throws ContractError naming any orphan.
SsimPairing ssim_video_pairs(const std::vector<KeyedVideo>& generated, const std::vector<KeyedVideo>& real);

// ---------------------------------------------------------------------------
// Frechet distance

struct GaussianFit {
  Eigen::VectorXd mean;
  Eigen::MatrixXd cov;  // unbiased
  std::int64_t count = 0;
};

/// Moments of row vectors; needs at least 2 rows.
GaussianFit fit_gaussian(const std::vector<std::vector<double>>& rows);

/// |mu1 - mu2|^2 + Tr(S1 + S2 - 2 (S1 S2)^(1/2)), with the square root
/// taken as (S1^(1/2) S2 S1^(1/2))^(1/2) through symmetric eigendecompositions.
/// Eigenvalues in [-1e-8 * scale, 0) are clipped; anything more negative is
/// rejected as non-PSD.
double frechet_distance(const Eigen::VectorXd& mu1, const Eigen::MatrixXd& sigma1, const Eigen::VectorXd& mu2,
                        const Eigen::MatrixXd& sigma2);

// ---------------------------------------------------------------------------
// Feature extractors

class FrameExtractor {
 public:
  virtual ~FrameExtractor() = default;
  virtual std::string id() const = 0;
  virtual int dim() const = 0;
  /// frames: H x W in [-1, 1].
  virtual std::vector<std::vector<double>> embed_frames(const std::vector<Tensor<float>>& frames) const = 0;
};

class VideoExtractor {
 public:
  virtual ~VideoExtractor() = default;
  virtual std::string id() const = 0;
  virtual int dim() const = 0;
  virtual std::vector<std::vector<double>> embed_videos(const std::vector<Video>& videos) const = 0;
};

/// 8x8 average pooling passed through a seeded random projection with tanh,
/// plus 4x4-pooled gradient magnitudes.
class ToyFrameExtractor : public FrameExtractor {
 public:
  explicit ToyFrameExtractor(std::uint64_t seed = 0, int projections = 32);
  std::string id() const override;
  int dim() const override { return projections_ + 16; }
  std::vector<std::vector<double>> embed_frames(const std::vector<Tensor<float>>& frames) const override;
  std::vector<double> embed_one(const Tensor<float>& frame) const;

 private:
  std::uint64_t seed_;
  int projections_;
  std::vector<double> proj_;  // projections x 64
};

/// Mean frame embedding plus 4x4-pooled mean absolute inter-frame differences
/// and a frame-order-weighted embedding, so temporal order matters.
class ToyVideoExtractor : public VideoExtractor {
 public:
  explicit ToyVideoExtractor(std::uint64_t seed = 0);
  std::string id() const override;
  int dim() const override { return 2 * frame_.dim() + 16; }
  std::vector<std::vector<double>> embed_videos(const std::vector<Video>& videos) const override;

 private:
  ToyFrameExtractor frame_;
};

/// Runs `command <in.csv> <out.csv>`. Each input row holds one item: a header
/// line "K,H,W" precedes the rows, and every row lists the K*H*W pixel values
/// in [-1, 1] (K = 1 for frames). The command writes one comma-separated
/// embedding per row. Used to plug in published backbones.
class ExternalCommandExtractor : public FrameExtractor, public VideoExtractor {
 public:
  ExternalCommandExtractor(std::string command, std::string identity, int dim);
  std::string id() const override { return identity_; }
  int dim() const override { return dim_; }
  std::vector<std::vector<double>> embed_frames(const std::vector<Tensor<float>>& frames) const override;
  std::vector<std::vector<double>> embed_videos(const std::vector<Video>& videos) const override;

 private:
  std::vector<std::vector<double>> run(const std::vector<const float*>& items, std::int64_t k, std::int64_t h,
                                       std::int64_t w) const;
  std::string command_, identity_;
  int dim_;
};

struct FrechetResult {
  double value = 0;
  bool regularized = false;  // covariance ridge added for rank-deficient fits
  std::int64_t n_real = 0, n_generated = 0;
};

/// Covariances whose sample count does not exceed the feature dimension get
/// 1e-6 * I added before the distance is taken.
FrechetResult fid_compute(const std::vector<Tensor<float>>& real_frames, const std::vector<Tensor<float>>& gen_frames,
                          const FrameExtractor& extractor);
FrechetResult fvd_compute(const std::vector<Video>& real_videos, const std::vector<Video>& gen_videos,
                          const VideoExtractor& extractor);

/// All K x C frames of a video set, each H x W.
std::vector<Tensor<float>> all_frames(const std::vector<Video>& videos);

// ---------------------------------------------------------------------------
// Evaluation protocol

struct EvalItem {
  std::string map_id;
  SemanticCondition x;
  Video real;
};

/// Produces n videos for each condition, condition-major.
using BatchGenerator = std::function<std::vector<Video>(const std::vector<SemanticCondition>& conditions, int n)>;

struct SuiteOptions {
  int n_per_map = 10;
  std::string cond_label = "SPADE";
  std::string model_label = "DDPM";
  std::string config_fingerprint;
};

struct MetricsReport {
  double fid = 0, fvd = 0, mean_ssim = 0;
  std::int64_t n_real = 0, n_generated = 0, n_frame_pairs = 0;
  bool fid_regularized = false, fvd_regularized = false;
  std::string frame_extractor, video_extractor, config_fingerprint;
  std::string cond_label, model_label;
  std::int64_t frames = 0;

  bool all_finite() const;
  std::string to_json() const;
  /// Cond. | Model | K | FID | FVD | SSIM
  std::string table() const;
};

/// Generates n_per_map videos per test map, then computes FID over frames,
/// FVD over videos and the map-paired SSIM. Writes report.json and table.txt
/// when out_dir is non-empty.
MetricsReport evaluate_suite(const BatchGenerator& generate, const std::vector<EvalItem>& test,
                             const FrameExtractor& frame_ex, const VideoExtractor& video_ex, const SuiteOptions& opts,
                             const std::filesystem::path& out_dir = {});

}  // namespace echosyn
