#pragma once

// Small shared builders for tests: tiny network configs and synthetic
// conditions.

#include <algorithm>
#include <cstdint>
#include <random>
#include <vector>

#include "echosyn/condition.hpp"
#include "echosyn/net.hpp"

namespace fixture {

/// Two-level network small enough for exhaustive checks.
inline echosyn::NetConfig tiny_net() {
  echosyn::NetConfig c;
  c.base_width = 8;
  c.channel_multipliers = {1, 2};
  c.attention_levels = {1};
  c.time_embed_dim = 16;
  c.frame_embed_dim = 8;
  c.groups = 4;
  c.spade_hidden = 8;
  return c;
}

/// One-hot map with a few axis-aligned class blocks on a background.
inline echosyn::SemanticCondition blocky_condition(std::int64_t h, std::int64_t w, std::uint64_t seed) {
  std::mt19937_64 rng(seed);
  echosyn::Tensor<float> m({echosyn::kNumClasses, h, w});
  std::vector<int> cls(static_cast<std::size_t>(h * w), 0);
  for (int b = 0; b < 4; ++b) {
    std::uniform_int_distribution<std::int64_t> py(0, h - 1), px(0, w - 1);
    const auto y0 = py(rng), x0 = px(rng);
    const auto y1 = std::min(h, y0 + h / 3 + 1), x1 = std::min(w, x0 + w / 3 + 1);
    for (auto y = y0; y < y1; ++y) {
      for (auto x = x0; x < x1; ++x) cls[static_cast<std::size_t>(y * w + x)] = 1 + b % 3;
    }
  }
  for (std::int64_t y = 0; y < h; ++y) {
    for (std::int64_t x = 0; x < w; ++x) m.at({cls[static_cast<std::size_t>(y * w + x)], y, x}) = 1.0f;
  }
  return {m, false};
}

}  // namespace fixture
