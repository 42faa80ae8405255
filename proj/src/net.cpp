#include "echosyn/net.hpp"

#include <cmath>
#include <set>
#include <sstream>

namespace echosyn {

std::string to_string(ConditionMode m) { return m == ConditionMode::kSpade ? "spade" : "concat"; }

ConditionMode condition_mode_from_string(const std::string& s) {
  if (s == "spade") return ConditionMode::kSpade;
  if (s == "concat") return ConditionMode::kConcat;
  throw ConfigError("unknown condition mode '" + s + "' (expected spade or concat)");
}

bool NetConfig::has_attention(int level) const {
  return std::find(attention_levels.begin(), attention_levels.end(), level) != attention_levels.end();
}

std::vector<std::string> NetConfig::validation_errors() const {
  std::vector<std::string> errs;
  if (in_channels < 1) errs.push_back("model.in_channels must be >= 1");
  if (label_channels < 1) errs.push_back("model.label_channels must be >= 1");
  if (base_width < 1) errs.push_back("model.base_width must be >= 1");
  if (groups < 1) errs.push_back("model.groups must be >= 1");
  if (levels() < 2) errs.push_back("model.channel_multipliers needs at least 2 resolution levels");
  if (base_width >= 1 && groups >= 1 && base_width % groups != 0) {
    errs.push_back("model.base_width (" + std::to_string(base_width) + ") must be divisible by model.groups (" +
                   std::to_string(groups) + ")");
  }
  for (int m : channel_multipliers) {
    if (m < 1) errs.push_back("model.channel_multipliers entries must be >= 1");
  }
  for (int l : attention_levels) {
    if (l < 0 || l >= levels()) errs.push_back("model.attention_levels entry " + std::to_string(l) + " out of range");
  }
  if (attention_heads < 1) {
    errs.push_back("model.attention_heads must be >= 1");
  } else {
    for (int l : attention_levels) {
      if (l >= 0 && l < levels() && width(l) % attention_heads != 0) {
        errs.push_back("attention width at level " + std::to_string(l) + " not divisible by model.attention_heads");
      }
    }
  }
  if (num_res_blocks < 1) errs.push_back("model.num_res_blocks must be >= 1");
  if (time_embed_dim < 2 || time_embed_dim % 2 != 0) errs.push_back("model.time_embed_dim must be even and >= 2");
  if (frame_embed_dim < 2 || frame_embed_dim % 2 != 0) errs.push_back("model.frame_embed_dim must be even and >= 2");
  if (temporal_kernel < 1 || temporal_kernel % 2 == 0) errs.push_back("model.temporal_kernel must be odd and >= 1");
  if (spade_hidden < 1) errs.push_back("model.spade_hidden must be >= 1");
  if (extra_input_channels < 0) errs.push_back("model.extra_input_channels must be >= 0");
  return errs;
}

void NetConfig::validate() const {
  const auto errs = validation_errors();
  if (errs.empty()) return;
  std::string msg = "invalid network configuration:";
  for (const auto& e : errs) msg += "\n  " + e;
  throw ConfigError(msg);
}

std::vector<double> sinusoidal_embedding(double position, int dim) {
  if (dim < 2 || dim % 2 != 0) throw ConfigError("embedding dimension must be even and >= 2, got " + std::to_string(dim));
  const int half = dim / 2;
  std::vector<double> out(static_cast<std::size_t>(dim));
  for (int i = 0; i < half; ++i) {
    const double freq = std::exp(-std::log(10000.0) * i / half);
    out[2 * i] = std::sin(position * freq);
    out[2 * i + 1] = std::cos(position * freq);
  }
  return out;
}

std::vector<double> time_embed(int t, int dim) { return sinusoidal_embedding(t, dim); }
std::vector<double> frame_embed(int frame_index, int dim) { return sinusoidal_embedding(frame_index, dim); }

// ---------------------------------------------------------------------------
// ParameterStore

template <typename T>
ag::Var<T> ParameterStore<T>::add(const std::string& path, Tensor<T> value) {
  if (index_.count(path)) throw ContractError("duplicate parameter path " + path);
  index_[path] = entries_.size();
  entries_.emplace_back(path, ag::Var<T>(std::move(value), true));
  return entries_.back().second;
}

template <typename T>
const ag::Var<T>& ParameterStore<T>::get(const std::string& path) const {
  auto it = index_.find(path);
  if (it == index_.end()) throw ContractError("no parameter at " + path);
  return entries_[it->second].second;
}

template <typename T>
std::int64_t ParameterStore<T>::total_elements() const {
  std::int64_t n = 0;
  for (const auto& [_, v] : entries_) n += v.value().numel();
  return n;
}

template <typename T>
std::string ParameterStore<T>::manifest() const {
  std::ostringstream os;
  for (const auto& [path, v] : entries_) os << path << ' ' << shape_str(v.shape()) << '\n';
  return os.str();
}

template <typename T>
void ParameterStore<T>::zero_grad() {
  for (auto& [_, v] : entries_) v.zero_grad();
}

template <typename T>
template <typename U>
void ParameterStore<T>::assign_from(const ParameterStore<U>& other) {
  if (other.size() != size()) throw ContractError("parameter inventories differ in size");
  for (std::size_t i = 0; i < entries_.size(); ++i) {
    const auto& [path, src] = other.entries()[i];
    auto& [dpath, dst] = entries_[i];
    if (path != dpath || src.shape() != dst.shape()) throw ContractError("parameter mismatch at " + dpath);
    auto& dv = dst.mutable_value();
    for (std::int64_t j = 0; j < dv.numel(); ++j) dv[j] = static_cast<T>(src.value()[j]);
  }
}

template class ParameterStore<float>;
template class ParameterStore<double>;
template void ParameterStore<float>::assign_from(const ParameterStore<float>&);
template void ParameterStore<float>::assign_from(const ParameterStore<double>&);
template void ParameterStore<double>::assign_from(const ParameterStore<float>&);
template void ParameterStore<double>::assign_from(const ParameterStore<double>&);

// ---------------------------------------------------------------------------
// Layers

namespace nn {

template <typename T>
Tensor<T> Initializer::uniform(Shape shape, double bound) {
  Tensor<T> t(std::move(shape));
  std::uniform_real_distribution<double> dist(-bound, bound);
  for (auto& v : t.vec()) v = static_cast<T>(dist(rng_));
  return t;
}

template <typename T>
Conv<T> make_conv(ParameterStore<T>& ps, Initializer& init, const std::string& path, int cin, int cout, int kt, int kh,
                  int kw, int stride, bool zero) {
  const double bound = 1.0 / std::sqrt(static_cast<double>(cin * kt * kh * kw));
  Shape ws{cout, cin, kt, kh, kw};
  Conv<T> c;
  c.weight = ps.add(path + ".weight", zero ? Tensor<T>(ws) : init.uniform<T>(ws, bound));
  c.bias = ps.add(path + ".bias", zero ? Tensor<T>({cout}) : init.uniform<T>({cout}, bound));
  c.stride = stride;
  return c;
}

template <typename T>
Linear<T> make_linear(ParameterStore<T>& ps, Initializer& init, const std::string& path, int in, int out, bool zero) {
  const double bound = 1.0 / std::sqrt(static_cast<double>(in));
  Linear<T> l;
  l.weight = ps.add(path + ".weight", zero ? Tensor<T>({out, in}) : init.uniform<T>({out, in}, bound));
  l.bias = ps.add(path + ".bias", zero ? Tensor<T>({out}) : init.uniform<T>({out}, bound));
  return l;
}

template <typename T>
SpadeHead<T> make_spade_head(ParameterStore<T>& ps, Initializer& init, const std::string& path, int label_channels,
                             int frame_embed_dim, int hidden, int channels) {
  SpadeHead<T> h;
  h.trunk_in = make_conv(ps, init, path + ".trunk_in", label_channels, hidden, 1, 3, 3);
  h.frame_proj = make_linear(ps, init, path + ".frame_proj", frame_embed_dim, hidden);
  h.trunk_out = make_conv(ps, init, path + ".trunk_out", hidden, hidden, 1, 3, 3);
  // Zero heads: gamma starts at 1 and delta at 0.
  h.gamma = make_conv(ps, init, path + ".gamma", hidden, channels, 1, 1, 1, 1, true);
  h.delta = make_conv(ps, init, path + ".delta", hidden, channels, 1, 1, 1, 1, true);
  return h;
}

template <typename T>
std::pair<ag::Var<T>, ag::Var<T>> SpadeHead<T>::modulation(const ag::Var<T>& label, const ag::Var<T>& frame_emb) const {
  if (frame_emb.shape().size() != 2 || frame_emb.shape()[0] != frame_proj.weight.shape()[1]) {
    throw ConfigError("SPADE frame embedding " + shape_str(frame_emb.shape()) + " does not match head input width " +
                      std::to_string(frame_proj.weight.shape()[1]));
  }
  const auto frames = frame_emb.shape()[1];
  // The label map is identical for every frame, so the first stage runs once.
  auto h = ag::repeat_frames(trunk_in(label), frames);
  h = ag::silu(ag::add_bias(h, frame_proj(frame_emb)));
  h = ag::silu(trunk_out(h));
  return {ag::add_scalar(gamma(h), T{1}), delta(h)};
}

template <typename T>
ag::Var<T> spade_modulate(const ag::Var<T>& f, const ag::Var<T>& label, const ag::Var<T>& frame_emb,
                          const SpadeHead<T>& head, int groups) {
  if (label.shape().size() != 4 || label.shape()[2] != f.shape()[2] || label.shape()[3] != f.shape()[3]) {
    throw ContractError("spade_modulate: label map " + shape_str(label.shape()) + " does not match features " +
                        shape_str(f.shape()));
  }
  if (frame_emb.shape().size() != 2 || frame_emb.shape()[1] != f.shape()[1]) {
    throw ContractError("spade_modulate: frame embedding count differs from frame count");
  }
  auto [g, d] = head.modulation(label, frame_emb);
  return ag::add(ag::mul(g, ag::group_norm(f, groups)), d);
}

template <typename T>
Norm<T> make_norm(ParameterStore<T>& ps, Initializer& init, const std::string& path, const NetConfig& cfg, int channels,
                  bool spade) {
  Norm<T> n;
  n.spade = spade;
  n.groups = cfg.groups;
  if (spade) {
    n.head = make_spade_head(ps, init, path + ".spade", cfg.label_channels, cfg.frame_embed_dim, cfg.spade_hidden,
                             channels);
  } else {
    n.scale = ps.add(path + ".scale", Tensor<T>({channels}, T{1}));
    n.shift = ps.add(path + ".shift", Tensor<T>({channels}, T{0}));
  }
  return n;
}

template <typename T>
ag::Var<T> apply_norm(const Norm<T>& n, const ag::Var<T>& x, const ConditionContext<T>* ctx) {
  if (!n.spade) return ag::channel_affine(ag::group_norm(x, n.groups), n.scale, n.shift);
  if (!ctx) throw ContractError("SPADE block evaluated without a condition");
  auto it = ctx->labels.find(x.shape()[2]);
  if (it == ctx->labels.end()) throw ContractError("no label map at feature height " + std::to_string(x.shape()[2]));
  return spade_modulate(x, it->second, ctx->frame_emb, n.head, n.groups);
}

template <typename T>
ResBlock<T> make_res_block(ParameterStore<T>& ps, Initializer& init, const std::string& path, const NetConfig& cfg,
                           int cin, int cout, bool spade) {
  ResBlock<T> b;
  const int kt = cfg.temporal_kernel;
  b.norm1 = make_norm(ps, init, path + ".norm1", cfg, cin, spade);
  b.conv1 = make_conv(ps, init, path + ".conv1", cin, cout, kt, 3, 3);
  b.temb_proj = make_linear(ps, init, path + ".temb_proj", cfg.time_embed_dim, cout);
  b.norm2 = make_norm(ps, init, path + ".norm2", cfg, cout, spade);
  b.conv2 = make_conv(ps, init, path + ".conv2", cout, cout, kt, 3, 3, 1, true);
  b.has_skip = cin != cout;
  if (b.has_skip) b.skip = make_conv(ps, init, path + ".skip", cin, cout, 1, 1, 1);
  return b;
}

template <typename T>
ag::Var<T> ResBlock<T>::operator()(const ag::Var<T>& x, const ag::Var<T>& temb, const ConditionContext<T>* ctx) const {
  auto h = conv1(ag::silu(apply_norm(norm1, x, ctx)));
  h = ag::add_bias(h, temb_proj(ag::silu(temb)));
  h = conv2(ag::silu(apply_norm(norm2, h, ctx)));
  return ag::add(h, has_skip ? skip(x) : x);
}

template <typename T>
AttentionBlock<T> make_attention(ParameterStore<T>& ps, Initializer& init, const std::string& path, int channels,
                                 int heads, int groups, ag::AttentionAxis axis) {
  AttentionBlock<T> a;
  a.axis = axis;
  a.heads = heads;
  a.groups = groups;
  a.norm_scale = ps.add(path + ".norm.scale", Tensor<T>({channels}, T{1}));
  a.norm_shift = ps.add(path + ".norm.shift", Tensor<T>({channels}, T{0}));
  a.q = make_conv(ps, init, path + ".q", channels, channels, 1, 1, 1);
  a.k = make_conv(ps, init, path + ".k", channels, channels, 1, 1, 1);
  a.v = make_conv(ps, init, path + ".v", channels, channels, 1, 1, 1);
  a.out = make_conv(ps, init, path + ".out", channels, channels, 1, 1, 1, 1, true);
  return a;
}

template <typename T>
ag::Var<T> AttentionBlock<T>::operator()(const ag::Var<T>& x) const {
  auto h = ag::channel_affine(ag::group_norm(x, groups), norm_scale, norm_shift);
  auto o = ag::attention(q(h), k(h), v(h), heads, axis);
  return ag::add(x, out(o));
}

#define ECHOSYN_INSTANTIATE_NN(T)                                                                                   \
  template struct SpadeHead<T>;                                                                                     \
  template struct ResBlock<T>;                                                                                      \
  template struct AttentionBlock<T>;                                                                                \
  template Tensor<T> Initializer::uniform<T>(Shape, double);                                                        \
  template Conv<T> make_conv(ParameterStore<T>&, Initializer&, const std::string&, int, int, int, int, int, int, bool); \
  template Linear<T> make_linear(ParameterStore<T>&, Initializer&, const std::string&, int, int, bool);             \
  template SpadeHead<T> make_spade_head(ParameterStore<T>&, Initializer&, const std::string&, int, int, int, int);  \
  template ResBlock<T> make_res_block(ParameterStore<T>&, Initializer&, const std::string&, const NetConfig&, int,  \
                                      int, bool);                                                                   \
  template AttentionBlock<T> make_attention(ParameterStore<T>&, Initializer&, const std::string&, int, int, int,    \
                                            ag::AttentionAxis);                                                     \
  template ag::Var<T> spade_modulate(const ag::Var<T>&, const ag::Var<T>&, const ag::Var<T>&, const SpadeHead<T>&, int);

ECHOSYN_INSTANTIATE_NN(float)
ECHOSYN_INSTANTIATE_NN(double)

}  // namespace nn

// ---------------------------------------------------------------------------
// Denoiser

namespace {

template <typename T>
ag::Var<T> constant(Tensor<T> t) {
  return ag::Var<T>(std::move(t), false);
}

template <typename T>
Tensor<T> to_column(const std::vector<double>& v) {
  Tensor<T> t({static_cast<std::int64_t>(v.size()), 1});
  for (std::size_t i = 0; i < v.size(); ++i) t[i] = static_cast<T>(v[i]);
  return t;
}

// K x C x H x W (float or T) -> C x K x H x W in T.
template <typename T, typename U>
Tensor<T> to_channel_major(const Tensor<U>& v) {
  const auto frames = v.dim(0), c = v.dim(1), hw = v.dim(2) * v.dim(3);
  Tensor<T> out({c, frames, v.dim(2), v.dim(3)});
  for (std::int64_t k = 0; k < frames; ++k) {
    for (std::int64_t ci = 0; ci < c; ++ci) {
      const U* src = v.data() + (k * c + ci) * hw;
      T* dst = out.data() + (ci * frames + k) * hw;
      for (std::int64_t i = 0; i < hw; ++i) dst[i] = static_cast<T>(src[i]);
    }
  }
  return out;
}

}  // namespace

template <typename T>
Denoiser<T>::Denoiser(NetConfig cfg, std::uint64_t seed) : cfg_(std::move(cfg)) {
  cfg_.validate();
  nn::Initializer init(seed);
  const bool spade = cfg_.condition_mode == ConditionMode::kSpade;
  const int kt = cfg_.temporal_kernel;
  const int te = cfg_.time_embed_dim;

  time_mlp1_ = nn::make_linear(params_, init, "time_mlp.0", te, te);
  time_mlp2_ = nn::make_linear(params_, init, "time_mlp.1", te, te);

  int in_ch = cfg_.in_channels + cfg_.extra_input_channels + (spade ? 0 : cfg_.label_channels);
  in_conv_ = nn::make_conv(params_, init, "in_conv", in_ch, cfg_.base_width, kt, 3, 3);

  std::vector<int> skip_ch{cfg_.base_width};
  int ch = cfg_.base_width;
  for (int l = 0; l < cfg_.levels(); ++l) {
    Level lv;
    const std::string p = "enc." + std::to_string(l);
    for (int r = 0; r < cfg_.num_res_blocks; ++r) {
      const std::string rp = p + ".res." + std::to_string(r);
      lv.res.push_back(nn::make_res_block(params_, init, rp, cfg_, ch, cfg_.width(l), false));
      ch = cfg_.width(l);
      if (cfg_.has_attention(l)) {
        lv.spatial_attn.push_back(nn::make_attention(params_, init, p + ".attn." + std::to_string(r) + ".spatial", ch,
                                                     cfg_.attention_heads, cfg_.groups, ag::AttentionAxis::kSpatial));
        lv.temporal_attn.push_back(nn::make_attention(params_, init, p + ".attn." + std::to_string(r) + ".temporal",
                                                      ch, cfg_.attention_heads, cfg_.groups,
                                                      ag::AttentionAxis::kTemporal));
      }
      skip_ch.push_back(ch);
    }
    if (l + 1 < cfg_.levels()) {
      lv.has_down = true;
      lv.down = nn::make_conv(params_, init, p + ".down", ch, ch, 1, 3, 3, 2);
      skip_ch.push_back(ch);
    }
    enc_.push_back(std::move(lv));
  }

  const int coarsest = cfg_.levels() - 1;
  mid1_ = nn::make_res_block(params_, init, "mid.res.0", cfg_, ch, ch, false);
  if (cfg_.has_attention(coarsest)) {
    mid_spatial_ = nn::make_attention(params_, init, "mid.attn.spatial", ch, cfg_.attention_heads, cfg_.groups,
                                      ag::AttentionAxis::kSpatial);
    mid_temporal_ = nn::make_attention(params_, init, "mid.attn.temporal", ch, cfg_.attention_heads, cfg_.groups,
                                       ag::AttentionAxis::kTemporal);
  }
  mid2_ = nn::make_res_block(params_, init, "mid.res.1", cfg_, ch, ch, false);

  for (int l = coarsest; l >= 0; --l) {
    UpLevel lv;
    const std::string p = "dec." + std::to_string(l);
    for (int r = 0; r <= cfg_.num_res_blocks; ++r) {
      const int sc = skip_ch.back();
      skip_ch.pop_back();
      const std::string rp = p + ".res." + std::to_string(r);
      lv.res.push_back(nn::make_res_block(params_, init, rp, cfg_, ch + sc, cfg_.width(l), spade));
      ch = cfg_.width(l);
      if (cfg_.has_attention(l)) {
        lv.spatial_attn.push_back(nn::make_attention(params_, init, p + ".attn." + std::to_string(r) + ".spatial", ch,
                                                     cfg_.attention_heads, cfg_.groups, ag::AttentionAxis::kSpatial));
        lv.temporal_attn.push_back(nn::make_attention(params_, init, p + ".attn." + std::to_string(r) + ".temporal",
                                                      ch, cfg_.attention_heads, cfg_.groups,
                                                      ag::AttentionAxis::kTemporal));
      }
    }
    if (l > 0) {
      lv.has_up = true;
      lv.up = nn::make_conv(params_, init, p + ".up", ch, ch, 1, 3, 3);
    }
    dec_.push_back(std::move(lv));
  }

  out_scale_ = params_.add("out.norm.scale", Tensor<T>({ch}, T{1}));
  out_shift_ = params_.add("out.norm.shift", Tensor<T>({ch}, T{0}));
  out_conv_ = nn::make_conv(params_, init, "out.conv", ch, cfg_.in_channels, kt, 3, 3, 1, true);
}

template <typename T>
ag::Var<T> Denoiser<T>::attend(const nn::AttentionBlock<T>& s, const nn::AttentionBlock<T>& t,
                               const ag::Var<T>& h) const {
  return t(s(h));
}

template <typename T>
ag::Var<T> Denoiser<T>::forward(const Tensor<T>& y_t, const SemanticCondition& x, int t,
                                const Tensor<T>* lowres) const {
  if (y_t.rank() != 4 || y_t.dim(1) != cfg_.in_channels) {
    throw ContractError("denoiser input must be K x " + std::to_string(cfg_.in_channels) + " x H x W, got " +
                        shape_str(y_t.shape()));
  }
  const auto frames = y_t.dim(0), height = y_t.dim(2), width = y_t.dim(3);
  const int div = cfg_.spatial_divisor();
  if (height % div != 0 || width % div != 0) {
    throw ConfigError("spatial size " + std::to_string(height) + "x" + std::to_string(width) +
                      " is not divisible by " + std::to_string(div) + " for a " + std::to_string(cfg_.levels()) +
                      "-level network");
  }
  if (x.channels() != cfg_.label_channels || x.height() != height || x.width() != width) {
    throw ContractError("condition " + shape_str(x.onehot.shape()) + " does not match input " + shape_str(y_t.shape()));
  }
  const bool spade = cfg_.condition_mode == ConditionMode::kSpade;

  auto input = constant(to_channel_major<T>(y_t));
  if (cfg_.extra_input_channels > 0) {
    if (!lowres || lowres->rank() != 4 || lowres->dim(0) != frames || lowres->dim(1) != cfg_.extra_input_channels ||
        lowres->dim(2) != height || lowres->dim(3) != width) {
      throw ContractError("super-resolution stage needs a K x " + std::to_string(cfg_.extra_input_channels) +
                          " x H x W conditioning video");
    }
    input = ag::concat_channels(input, constant(to_channel_major<T>(*lowres)));
  }
  if (!spade) input = ag::concat_channels(input, constant(to_channel_major<T>(replicate_condition(x, frames))));

  auto temb = constant(to_column<T>(time_embed(t, cfg_.time_embed_dim)));
  temb = time_mlp2_(ag::silu(time_mlp1_(temb)));

  nn::ConditionContext<T> ctx;
  if (spade) {
    Tensor<T> fe({cfg_.frame_embed_dim, frames});
    for (std::int64_t k = 0; k < frames; ++k) {
      const auto e = frame_embed(static_cast<int>(k), cfg_.frame_embed_dim);
      for (int i = 0; i < cfg_.frame_embed_dim; ++i) fe[i * frames + k] = static_cast<T>(e[i]);
    }
    ctx.frame_emb = constant(std::move(fe));
    for (int l = 0; l < cfg_.levels(); ++l) {
      const auto h = height >> l, w = width >> l;
      const auto resized = resize_nearest(x.onehot, h, w);
      Tensor<T> lab({x.channels(), 1, h, w});
      for (std::int64_t i = 0; i < lab.numel(); ++i) lab[i] = static_cast<T>(resized[i]);
      ctx.labels.emplace(h, constant(std::move(lab)));
    }
  }

  std::vector<ag::Var<T>> skips;
  auto h = in_conv_(input);
  skips.push_back(h);
  for (const auto& lv : enc_) {
    for (std::size_t r = 0; r < lv.res.size(); ++r) {
      h = lv.res[r](h, temb, nullptr);
      if (!lv.spatial_attn.empty()) h = attend(lv.spatial_attn[r], lv.temporal_attn[r], h);
      skips.push_back(h);
    }
    if (lv.has_down) {
      h = lv.down(h);
      skips.push_back(h);
    }
  }
  h = mid1_(h, temb, nullptr);
  if (cfg_.has_attention(cfg_.levels() - 1)) h = attend(mid_spatial_, mid_temporal_, h);
  h = mid2_(h, temb, nullptr);

  const nn::ConditionContext<T>* cp = spade ? &ctx : nullptr;
  for (const auto& lv : dec_) {
    for (std::size_t r = 0; r < lv.res.size(); ++r) {
      h = ag::concat_channels(h, skips.back());
      skips.pop_back();
      h = lv.res[r](h, temb, cp);
      if (!lv.spatial_attn.empty()) h = attend(lv.spatial_attn[r], lv.temporal_attn[r], h);
    }
    if (lv.has_up) h = lv.up(ag::upsample_nearest2x(h));
  }
  h = ag::silu(ag::channel_affine(ag::group_norm(h, cfg_.groups), out_scale_, out_shift_));
  h = out_conv_(h);
  return ag::swap_leading(h);
}

template <typename T>
Tensor<T> Denoiser<T>::predict(const Tensor<T>& y_t, const SemanticCondition& x, int t,
                               const Tensor<T>* lowres) const {
  ag::NoGradGuard guard;
  auto out = forward(y_t, x, t, lowres).value();
  for (auto v : out.vec()) {
    if (!std::isfinite(v)) throw NumericFault("denoiser produced a non-finite value at step " + std::to_string(t));
  }
  return out;
}

template class Denoiser<float>;
template class Denoiser<double>;

}  // namespace echosyn
