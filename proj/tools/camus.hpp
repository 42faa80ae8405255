#pragma once

#include <cstdint>
#include <filesystem>
#include <stdexcept>
#include <string>
#include <vector>

#include "echosyn/dataset.hpp"

namespace echosyn::camus {

class FormatError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

/// 8-bit MetaImage volume, x fastest: voxel (x, y, z) at data[(z * height + y) * width + x].
struct MetaVolume {
  std::int64_t width = 0, height = 0, depth = 1;
  std::vector<std::uint8_t> data;

  const std::uint8_t* slice(std::int64_t z) const { return data.data() + z * width * height; }
};

/// Reads a .mhd header with its .raw/.zraw payload (or an .mha with LOCAL data).
/// Only MET_UCHAR volumes of 2 or 3 dimensions are accepted.
MetaVolume read_metaimage(const std::filesystem::path& header);

struct CycleInfo {
  int ed = 0, es = 0;  // 1-based frame numbers
  int frames = 0;      // 0 when the file has no NbFrame entry
};

CycleInfo read_info_cfg(const std::filesystem::path& path);

/// Area-weighted resampling of an 8-bit image to size x size, returned in [-1, 1].
Tensor<float> resample_intensity(const std::uint8_t* src, std::int64_t h, std::int64_t w, std::int64_t size);

/// Nearest-neighbour resampling of a label image (pixel centres).
LabelMap resample_labels(const std::uint8_t* src, std::int64_t h, std::int64_t w, std::int64_t size);

/// Builds one record from a CAMUS patient directory (2CH sequence, ED ground
/// truth and Info_2CH.cfg), keeping frames ED..ES.
PatientRecord convert_patient(const std::filesystem::path& dir, std::int64_t size);

/// Patient directories below root (any depth) that carry an Info_2CH.cfg.
std::vector<std::filesystem::path> find_patients(const std::filesystem::path& root);

}  // namespace echosyn::camus
