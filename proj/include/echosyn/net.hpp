#pragma once

// Conditional 3D denoising UNet.
//
// Encoder: 3D residual blocks (group norm, SiLU, 3D conv, time-embedding
// bias) with spatial-then-temporal self-attention at selected levels and
// stride-2 spatial downsampling. Decoder: the same blocks with skip
// connections, but in SPADE mode every normalization is parameter-free group
// norm modulated per pixel by gamma/delta maps predicted from the semantic
// label map and a frame-index embedding. In concat mode the replicated label
// map is stacked onto the noisy input instead.

#include <cstdint>
#include <map>
#include <memory>
#include <random>
#include <string>
#include <utility>
#include <vector>

#include "echosyn/autograd.hpp"
#include "echosyn/condition.hpp"
#include "echosyn/ops.hpp"

namespace echosyn {

enum class ConditionMode { kSpade, kConcat };
std::string to_string(ConditionMode m);
ConditionMode condition_mode_from_string(const std::string& s);

struct NetConfig {
  int in_channels = 1;
  int label_channels = kNumClasses;
  int base_width = 64;
  std::vector<int> channel_multipliers{1, 2, 4, 4};
  std::vector<int> attention_levels{2, 3};
  int num_res_blocks = 1;
  int time_embed_dim = 128;
  int frame_embed_dim = 64;
  int groups = 8;
  ConditionMode condition_mode = ConditionMode::kSpade;
  int temporal_kernel = 3;  // 1 gives space-only convolutions
  int spade_hidden = 64;
  int attention_heads = 1;
  int extra_input_channels = 0;  // low-resolution video channels in a super-resolution stage

  int levels() const { return static_cast<int>(channel_multipliers.size()); }
  int width(int level) const { return base_width * channel_multipliers.at(level); }
  bool has_attention(int level) const;
  /// Spatial sizes must be divisible by this.
  int spatial_divisor() const { return 1 << (levels() - 1); }

  /// Every violated constraint, empty when valid.
  std::vector<std::string> validation_errors() const;
  void validate() const;
};

/// Sinusoidal embedding with interleaved (sin, cos) pairs, in double.
std::vector<double> sinusoidal_embedding(double position, int dim);
std::vector<double> time_embed(int t, int dim);
std::vector<double> frame_embed(int frame_index, int dim);

/// Learnable arrays keyed by module path, kept in registration order.
template <typename T>
class ParameterStore {
 public:
  ag::Var<T> add(const std::string& path, Tensor<T> value);
  const ag::Var<T>& get(const std::string& path) const;
  bool contains(const std::string& path) const { return index_.count(path) != 0; }

  std::size_t size() const { return entries_.size(); }
  std::int64_t total_elements() const;
  const std::vector<std::pair<std::string, ag::Var<T>>>& entries() const { return entries_; }

  /// "path shape" lines, one per array.
  std::string manifest() const;
  void zero_grad();
  /// Copies values from `other`; paths and shapes must match exactly.
  template <typename U>
  void assign_from(const ParameterStore<U>& other);

 private:
  std::vector<std::pair<std::string, ag::Var<T>>> entries_;
  std::map<std::string, std::size_t> index_;
};

namespace nn {

template <typename T>
struct Conv {
  ag::Var<T> weight;  // Cout x Cin x kt x kh x kw
  ag::Var<T> bias;    // Cout
  int stride = 1;
  ag::Var<T> operator()(const ag::Var<T>& x) const { return ag::conv3d(x, weight, bias, stride); }
};

template <typename T>
struct Linear {
  ag::Var<T> weight;  // out x in
  ag::Var<T> bias;    // out
  ag::Var<T> operator()(const ag::Var<T>& x) const { return ag::linear_cols(weight, x, bias); }
};

/// Predicts spatially varying gamma/delta from a label map and frame embeddings.
template <typename T>
struct SpadeHead {
  Conv<T> trunk_in;      // label_channels -> hidden, 1x3x3
  Linear<T> frame_proj;  // frame_embed_dim -> hidden
  Conv<T> trunk_out;     // hidden -> hidden, 1x3x3
  Conv<T> gamma;         // hidden -> C, 1x1x1, gamma = 1 + output
  Conv<T> delta;         // hidden -> C, 1x1x1

  /// label: L x 1 x H x W at the feature resolution; frame_emb: E x K.
  std::pair<ag::Var<T>, ag::Var<T>> modulation(const ag::Var<T>& label, const ag::Var<T>& frame_emb) const;
};

/// gamma(x, k) * GroupNorm(f) + delta(x, k), with parameter-free group norm.
template <typename T>
ag::Var<T> spade_modulate(const ag::Var<T>& f, const ag::Var<T>& label, const ag::Var<T>& frame_emb,
                          const SpadeHead<T>& head, int groups);

/// Group norm with a learned per-channel affine, or SPADE modulation.
template <typename T>
struct Norm {
  bool spade = false;
  int groups = 1;
  ag::Var<T> scale, shift;
  SpadeHead<T> head;
};

/// Per-resolution semantic inputs for SPADE blocks.
template <typename T>
struct ConditionContext {
  std::map<std::int64_t, ag::Var<T>> labels;  // keyed by feature height
  ag::Var<T> frame_emb;                       // E x K
};

template <typename T>
struct ResBlock {
  Norm<T> norm1, norm2;
  Conv<T> conv1, conv2;
  Linear<T> temb_proj;
  bool has_skip = false;
  Conv<T> skip;

  ag::Var<T> operator()(const ag::Var<T>& x, const ag::Var<T>& temb, const ConditionContext<T>* ctx) const;
};

/// Pre-norm self-attention with a residual connection.
template <typename T>
struct AttentionBlock {
  ag::AttentionAxis axis = ag::AttentionAxis::kSpatial;
  int heads = 1;
  int groups = 1;
  ag::Var<T> norm_scale, norm_shift;
  Conv<T> q, k, v, out;

  ag::Var<T> operator()(const ag::Var<T>& x) const;
};

/// Random initialisation helper used while building a network.
class Initializer {
 public:
  explicit Initializer(std::uint64_t seed) : rng_(seed) {}
  template <typename T>
  Tensor<T> uniform(Shape shape, double bound);

 private:
  std::mt19937_64 rng_;
};

template <typename T>
Conv<T> make_conv(ParameterStore<T>& ps, Initializer& init, const std::string& path, int cin, int cout, int kt, int kh,
                  int kw, int stride = 1, bool zero = false);
template <typename T>
Linear<T> make_linear(ParameterStore<T>& ps, Initializer& init, const std::string& path, int in, int out,
                      bool zero = false);
template <typename T>
SpadeHead<T> make_spade_head(ParameterStore<T>& ps, Initializer& init, const std::string& path, int label_channels,
                             int frame_embed_dim, int hidden, int channels);
template <typename T>
ResBlock<T> make_res_block(ParameterStore<T>& ps, Initializer& init, const std::string& path, const NetConfig& cfg,
                           int cin, int cout, bool spade);
template <typename T>
AttentionBlock<T> make_attention(ParameterStore<T>& ps, Initializer& init, const std::string& path, int channels,
                                 int heads, int groups, ag::AttentionAxis axis);

}  // namespace nn

/// The denoising network eps_theta(y_t, x, t).
template <typename T>
class Denoiser {
 public:
  Denoiser(NetConfig cfg, std::uint64_t seed);
  Denoiser(const Denoiser&) = delete;
  Denoiser& operator=(const Denoiser&) = delete;

  const NetConfig& config() const { return cfg_; }
  ParameterStore<T>& parameters() { return params_; }
  const ParameterStore<T>& parameters() const { return params_; }

  /// y_t: K x C x H x W. lowres: K x C' x H x W conditioning video for a
  /// super-resolution stage (required iff extra_input_channels > 0).
  /// Returns the noise estimate with the shape of y_t, recording history.
  ag::Var<T> forward(const Tensor<T>& y_t, const SemanticCondition& x, int t, const Tensor<T>* lowres = nullptr) const;

  /// Gradient-free evaluation. Throws NumericFault on non-finite output.
  Tensor<T> predict(const Tensor<T>& y_t, const SemanticCondition& x, int t, const Tensor<T>* lowres = nullptr) const;

 private:
  struct Level {
    std::vector<nn::ResBlock<T>> res;
    std::vector<nn::AttentionBlock<T>> spatial_attn, temporal_attn;
    bool has_down = false;
    nn::Conv<T> down;
  };
  struct UpLevel {
    std::vector<nn::ResBlock<T>> res;
    std::vector<nn::AttentionBlock<T>> spatial_attn, temporal_attn;
    bool has_up = false;
    nn::Conv<T> up;
  };

  ag::Var<T> attend(const nn::AttentionBlock<T>& s, const nn::AttentionBlock<T>& t, const ag::Var<T>& h) const;

  NetConfig cfg_;
  ParameterStore<T> params_;
  nn::Linear<T> time_mlp1_, time_mlp2_;
  nn::Conv<T> in_conv_;
  std::vector<Level> enc_;
  nn::ResBlock<T> mid1_, mid2_;
  nn::AttentionBlock<T> mid_spatial_, mid_temporal_;
  std::vector<UpLevel> dec_;  // coarsest first
  ag::Var<T> out_scale_, out_shift_;
  nn::Conv<T> out_conv_;
};

}  // namespace echosyn
