#pragma once

// Cardiac-cycle clips with an end-diastole label map.
//
// On-disk layout, one directory per patient under the dataset root:
//
//   <root>/<patient_id>/manifest.json     {"patient_id", "num_frames", "ed_index",
//                                          "es_index", "view", "height", "width"}
//   <root>/<patient_id>/frame_0000.png    8-bit grayscale, ED first ...
//   <root>/<patient_id>/frame_NNNN.png    ... ES last
//   <root>/<patient_id>/label_ed.png      8-bit, pixel value = class id in 0..3
//
// Classes: 0 background, 1 epicardium, 2 myocardium, 3 left atrium.

#include <array>
#include <cstdint>
#include <filesystem>
#include <string>
#include <vector>

#include "echosyn/condition.hpp"
#include "echosyn/tensor.hpp"

namespace echosyn {

struct PatientRecord {
  std::string patient_id;
  std::vector<Tensor<float>> frames;  // each H x W in [-1, 1], ED first, ES last
  LabelMap label_ed;
  std::string view = "2CH";

  std::int64_t height() const { return label_ed.height; }
  std::int64_t width() const { return label_ed.width; }
};

struct LoadDiagnostic {
  std::filesystem::path path;
  std::string message;
};

struct LoadResult {
  std::vector<PatientRecord> records;  // sorted by patient id
  std::vector<LoadDiagnostic> errors;  // rejected records
  std::vector<std::string> warnings;
};

LoadResult load_dataset(const std::filesystem::path& root);

/// Loads and validates one patient directory; throws DatasetError.
PatientRecord load_patient(const std::filesystem::path& dir);

class DatasetError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

struct DatasetSplit {
  std::vector<std::string> train, val, test;
};

/// Seeded shuffle, then floor(n * ratio) patients for validation and test;
/// the remainder goes to training.
DatasetSplit patient_split(const std::vector<std::string>& patient_ids, std::array<double, 3> ratios = {0.8, 0.1, 0.1},
                           std::uint64_t seed = 0);

/// Source frame indices for K evenly spaced samples with both ends pinned.
std::vector<std::int64_t> resample_indices(std::int64_t num_frames, std::int64_t frames);

/// K x 1 x H x W clip by nearest-index selection.
Video resample_frames(const PatientRecord& record, std::int64_t frames);

SemanticCondition one_hot_labels(const LabelMap& m, int classes = kNumClasses);

/// Per-pixel argmax of a one-hot map.
LabelMap argmax_labels(const SemanticCondition& c);

struct ToyOptions {
  int patients = 10;
  int frames = 16;
  int size = 32;
  std::uint64_t seed = 1;
};

/// Writes a synthetic dataset in the layout above. Deterministic in the seed.
void toy_generate(const ToyOptions& opts, const std::filesystem::path& out_root);

/// Writes one record (frames in [-1, 1]) in the dataset layout.
void write_patient(const PatientRecord& record, const std::filesystem::path& dir);

/// Records whose ids appear in `ids`, in the order of `ids`.
std::vector<PatientRecord> select_records(const std::vector<PatientRecord>& records,
                                          const std::vector<std::string>& ids);

}  // namespace echosyn
