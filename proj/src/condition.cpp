#include "echosyn/condition.hpp"

#include <algorithm>

namespace echosyn {

Tensor<float> replicate_condition(const SemanticCondition& x, std::int64_t frames) {
  if (frames < 1) throw ContractError("replicate_condition: frame count must be >= 1");
  const auto n = x.onehot.numel();
  Tensor<float> out({frames, x.channels(), x.height(), x.width()});
  for (std::int64_t k = 0; k < frames; ++k) std::copy_n(x.onehot.data(), n, out.data() + k * n);
  return out;
}

Tensor<float> resize_nearest(const Tensor<float>& map, std::int64_t height, std::int64_t width) {
  if (map.rank() != 3) throw ContractError("resize_nearest: expected C x H x W");
  const auto c = map.dim(0), h = map.dim(1), w = map.dim(2);
  if (h == height && w == width) return map;
  Tensor<float> out({c, height, width});
  for (std::int64_t ci = 0; ci < c; ++ci) {
    for (std::int64_t y = 0; y < height; ++y) {
      const std::int64_t sy = std::min(h - 1, (y * h) / height);
      for (std::int64_t xx = 0; xx < width; ++xx) {
        const std::int64_t sx = std::min(w - 1, (xx * w) / width);
        out[(ci * height + y) * width + xx] = map[(ci * h + sy) * w + sx];
      }
    }
  }
  return out;
}

}  // namespace echosyn
