#pragma once

#include <cstdint>
#include <filesystem>
#include <stdexcept>
#include <vector>

namespace echosyn {

class IoError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

/// 8-bit single-channel image, row-major.
struct GrayImage {
  std::int64_t height = 0;
  std::int64_t width = 0;
  std::vector<std::uint8_t> pixels;
};

GrayImage read_png_gray(const std::filesystem::path& path);
void write_png_gray(const std::filesystem::path& path, const GrayImage& img);

/// [-1, 1] <-> [0, 255] with rounding; the round trip is exact on 8-bit input.
inline float gray_to_unit(std::uint8_t v) { return static_cast<float>(v) / 127.5f - 1.0f; }
std::uint8_t unit_to_gray(float v);

}  // namespace echosyn
