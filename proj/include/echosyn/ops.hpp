#pragma once

// Differentiable tensor operations. Feature maps are laid out C x K x H x W
// (channels, frames, rows, columns) so that a channel slice is contiguous.

#include <cstdint>

#include "echosyn/autograd.hpp"

namespace echosyn::ag {

template <typename T> Var<T> add(const Var<T>& a, const Var<T>& b);
template <typename T> Var<T> sub(const Var<T>& a, const Var<T>& b);
template <typename T> Var<T> mul(const Var<T>& a, const Var<T>& b);
template <typename T> Var<T> scale(const Var<T>& a, T c);
template <typename T> Var<T> add_scalar(const Var<T>& a, T c);
template <typename T> Var<T> silu(const Var<T>& a);

/// x: C x K x H x W, bias: C x 1 (shared by all frames) or C x K (per frame).
template <typename T> Var<T> add_bias(const Var<T>& x, const Var<T>& bias);

/// 3D convolution with "same" zero padding along every kernel axis and an
/// optional spatial stride (frames are never strided).
/// x: Cin x K x H x W, w: Cout x Cin x kt x kh x kw, b: Cout or empty.
template <typename T>
Var<T> conv3d(const Var<T>& x, const Var<T>& w, const Var<T>& b, int spatial_stride = 1);

/// Parameter-free group normalization; statistics per (group, frame).
template <typename T> Var<T> group_norm(const Var<T>& x, int groups, T eps = T(1e-5));

/// Per-channel scale and shift: scale, shift are length-C vectors.
template <typename T>
Var<T> channel_affine(const Var<T>& x, const Var<T>& scale, const Var<T>& shift);

template <typename T> Var<T> concat_channels(const Var<T>& a, const Var<T>& b);

/// C x 1 x H x W -> C x K x H x W by copying the single frame.
template <typename T> Var<T> repeat_frames(const Var<T>& x, std::int64_t frames);

template <typename T> Var<T> upsample_nearest2x(const Var<T>& x);

/// W: m x n, X: n x N, b: m. Returns W X + b (bias broadcast over columns).
template <typename T> Var<T> linear_cols(const Var<T>& w, const Var<T>& x, const Var<T>& b);

enum class AttentionAxis { kSpatial, kTemporal };

/// Scaled dot-product self-attention core. q, k, v: C x K x H x W. Channels
/// are split into `heads` equal slices. Spatial attention mixes the H*W
/// positions of each frame; temporal attention mixes the K frames of each
/// position.
template <typename T>
Var<T> attention(const Var<T>& q, const Var<T>& k, const Var<T>& v, int heads, AttentionAxis axis);

/// Swaps the two leading axes: A x B x R -> B x A x R.
template <typename T> Var<T> swap_leading(const Var<T>& x);

/// Mean of squared differences, as a 1-element tensor.
template <typename T> Var<T> mse(const Var<T>& a, const Var<T>& b);

template <typename T> Var<T> sum(const Var<T>& a);

}  // namespace echosyn::ag
