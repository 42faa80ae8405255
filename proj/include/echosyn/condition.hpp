#pragma once

#include <cstdint>
#include <vector>

#include "echosyn/tensor.hpp"

namespace echosyn {

inline constexpr int kNumClasses = 4;  // background, epicardium, myocardium, left atrium

/// Integer class map, row-major H x W, ids in [0, kNumClasses).
struct LabelMap {
  std::int64_t height = 0;
  std::int64_t width = 0;
  std::vector<std::uint8_t> classes;

  std::uint8_t at(std::int64_t y, std::int64_t x) const { return classes[static_cast<std::size_t>(y * width + x)]; }
};

/// One-hot semantic map (C_lab x H x W) or the all-zero null condition.
struct SemanticCondition {
  Tensor<float> onehot;
  bool is_null = false;

  std::int64_t channels() const { return onehot.dim(0); }
  std::int64_t height() const { return onehot.dim(1); }
  std::int64_t width() const { return onehot.dim(2); }

  static SemanticCondition null(std::int64_t height, std::int64_t width, std::int64_t channels = kNumClasses) {
    return {Tensor<float>({channels, height, width}, 0.0f), true};
  }
  /// The null condition with this condition's geometry.
  SemanticCondition as_null() const { return null(height(), width(), channels()); }
};

/// K stacked copies of the map: K x C_lab x H x W.
Tensor<float> replicate_condition(const SemanticCondition& x, std::int64_t frames);

/// Nearest-neighbour resize of a C x H x W map; keeps one-hot vectors intact.
Tensor<float> resize_nearest(const Tensor<float>& map, std::int64_t height, std::int64_t width);

}  // namespace echosyn
