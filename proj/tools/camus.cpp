#include "camus.hpp"

#include <zlib.h>

#include <algorithm>
#include <cmath>
#include <fstream>
#include <iterator>
#include <map>
#include <sstream>

#include "echosyn/image_io.hpp"

namespace echosyn::camus {
namespace fs = std::filesystem;

namespace {

std::string trim(const std::string& s) {
  const auto b = s.find_first_not_of(" \t\r\n");
  if (b == std::string::npos) return {};
  const auto e = s.find_last_not_of(" \t\r\n");
  return s.substr(b, e - b + 1);
}

std::vector<char> slurp(const fs::path& p) {
  std::ifstream in(p, std::ios::binary);
  if (!in) throw FormatError(p.string() + ": cannot open");
  return {std::istreambuf_iterator<char>(in), {}};
}

// Overlap of source cell [i, i+1) with destination cell j, both in source units.
std::vector<std::vector<std::pair<std::int64_t, double>>> area_weights(std::int64_t n, std::int64_t size) {
  std::vector<std::vector<std::pair<std::int64_t, double>>> w(static_cast<std::size_t>(size));
  const double scale = static_cast<double>(n) / static_cast<double>(size);
  for (std::int64_t j = 0; j < size; ++j) {
    const double lo = j * scale, hi = (j + 1) * scale;
    for (auto i = static_cast<std::int64_t>(std::floor(lo)); i < std::min<std::int64_t>(n, std::ceil(hi)); ++i) {
      const double ov = std::min<double>(hi, i + 1) - std::max<double>(lo, i);
      if (ov > 0) w[j].emplace_back(i, ov / scale);
    }
  }
  return w;
}

}  // namespace

MetaVolume read_metaimage(const fs::path& header) {
  std::ifstream in(header, std::ios::binary);
  if (!in) throw FormatError(header.string() + ": cannot open");
  std::map<std::string, std::string> keys;
  std::string line;
  std::streamoff data_offset = 0;
  while (std::getline(in, line)) {
    const auto eq = line.find('=');
    if (eq == std::string::npos) continue;
    const auto k = trim(line.substr(0, eq));
    keys[k] = trim(line.substr(eq + 1));
    if (k == "ElementDataFile") {  // always the last header entry
      data_offset = in.tellg();
      break;
    }
  }
  const auto need = [&](const std::string& k) {
    auto it = keys.find(k);
    if (it == keys.end()) throw FormatError(header.string() + ": missing " + k);
    return it->second;
  };

  if (need("ElementType") != "MET_UCHAR") {
    throw FormatError(header.string() + ": unsupported ElementType " + keys["ElementType"] + " (need MET_UCHAR)");
  }
  const int ndims = std::stoi(need("NDims"));
  if (ndims != 2 && ndims != 3) throw FormatError(header.string() + ": expected 2 or 3 dimensions");
  std::istringstream ds(need("DimSize"));
  MetaVolume v;
  ds >> v.width >> v.height;
  if (ndims == 3) ds >> v.depth;
  if (!ds || v.width <= 0 || v.height <= 0 || v.depth <= 0) throw FormatError(header.string() + ": bad DimSize");
  if (keys.count("ElementNumberOfChannels") && keys["ElementNumberOfChannels"] != "1") {
    throw FormatError(header.string() + ": multi-channel images are not supported");
  }

  std::vector<char> payload;
  const auto file = need("ElementDataFile");
  if (file == "LOCAL") {
    auto all = slurp(header);
    payload.assign(all.begin() + data_offset, all.end());
  } else {
    payload = slurp(header.parent_path() / file);
  }

  const auto n = static_cast<std::size_t>(v.width * v.height * v.depth);
  v.data.resize(n);
  const bool compressed = keys.count("CompressedData") && (keys["CompressedData"] == "True" || keys["CompressedData"] == "true");
  if (compressed) {
    uLongf out_len = static_cast<uLongf>(n);
    const int rc = uncompress(v.data.data(), &out_len, reinterpret_cast<const Bytef*>(payload.data()),
                              static_cast<uLong>(payload.size()));
    if (rc != Z_OK || out_len != n) throw FormatError(header.string() + ": zlib payload does not inflate to DimSize");
  } else {
    if (payload.size() < n) {
      throw FormatError(header.string() + ": payload has " + std::to_string(payload.size()) + " bytes, expected " +
                        std::to_string(n));
    }
    std::copy_n(payload.begin(), n, reinterpret_cast<char*>(v.data.data()));
  }
  return v;
}

CycleInfo read_info_cfg(const fs::path& path) {
  std::ifstream in(path);
  if (!in) throw FormatError(path.string() + ": cannot open");
  CycleInfo info;
  std::string line;
  while (std::getline(in, line)) {
    const auto colon = line.find(':');
    if (colon == std::string::npos) continue;
    const auto k = trim(line.substr(0, colon)), val = trim(line.substr(colon + 1));
    try {
      if (k == "ED") info.ed = std::stoi(val);
      if (k == "ES") info.es = std::stoi(val);
      if (k == "NbFrame") info.frames = std::stoi(val);
    } catch (const std::exception&) {
      throw FormatError(path.string() + ": bad value for " + k);
    }
  }
  if (info.ed < 1 || info.es < 1) throw FormatError(path.string() + ": ED and ES frame numbers are required");
  return info;
}

Tensor<float> resample_intensity(const std::uint8_t* src, std::int64_t h, std::int64_t w, std::int64_t size) {
  const auto wy = area_weights(h, size), wx = area_weights(w, size);
  std::vector<double> rows(static_cast<std::size_t>(size * w), 0.0);
  for (std::int64_t j = 0; j < size; ++j) {
    for (const auto& [i, a] : wy[j]) {
      for (std::int64_t x = 0; x < w; ++x) rows[j * w + x] += a * src[i * w + x];
    }
  }
  Tensor<float> out({size, size});
  for (std::int64_t j = 0; j < size; ++j) {
    for (std::int64_t k = 0; k < size; ++k) {
      double acc = 0;
      for (const auto& [i, a] : wx[k]) acc += a * rows[j * w + i];
      out[j * size + k] = gray_to_unit(static_cast<std::uint8_t>(std::clamp(std::lround(acc), 0L, 255L)));
    }
  }
  return out;
}

LabelMap resample_labels(const std::uint8_t* src, std::int64_t h, std::int64_t w, std::int64_t size) {
  LabelMap m{size, size, std::vector<std::uint8_t>(static_cast<std::size_t>(size * size))};
  for (std::int64_t y = 0; y < size; ++y) {
    const auto sy = std::min<std::int64_t>(h - 1, static_cast<std::int64_t>((y + 0.5) * h / size));
    for (std::int64_t x = 0; x < size; ++x) {
      const auto sx = std::min<std::int64_t>(w - 1, static_cast<std::int64_t>((x + 0.5) * w / size));
      m.classes[y * size + x] = src[sy * w + sx];
    }
  }
  return m;
}

PatientRecord convert_patient(const fs::path& dir, std::int64_t size) {
  const auto id = dir.filename().string();
  const auto info = read_info_cfg(dir / "Info_2CH.cfg");
  const auto seq = read_metaimage(dir / (id + "_2CH_sequence.mhd"));
  const auto gt = read_metaimage(dir / (id + "_2CH_ED_gt.mhd"));
  if (gt.width != seq.width || gt.height != seq.height) {
    throw FormatError(id + ": ED ground truth and sequence sizes differ");
  }
  if (info.ed > seq.depth || info.es > seq.depth) {
    throw FormatError(id + ": ED/ES frame numbers exceed the " + std::to_string(seq.depth) + "-frame sequence");
  }
  for (auto c : gt.data) {
    if (c >= kNumClasses) throw FormatError(id + ": ground truth has class id " + std::to_string(c));
  }

  PatientRecord rec;
  rec.patient_id = id;
  const int step = info.es >= info.ed ? 1 : -1;
  for (int f = info.ed;; f += step) {
    rec.frames.push_back(resample_intensity(seq.slice(f - 1), seq.height, seq.width, size));
    if (f == info.es) break;
  }
  if (rec.frames.size() < 2) throw FormatError(id + ": ED and ES coincide, no cycle to keep");
  rec.label_ed = resample_labels(gt.slice(0), gt.height, gt.width, size);
  return rec;
}

std::vector<fs::path> find_patients(const fs::path& root) {
  std::vector<fs::path> out;
  for (const auto& e : fs::recursive_directory_iterator(root)) {
    if (e.is_regular_file() && e.path().filename() == "Info_2CH.cfg") out.push_back(e.path().parent_path());
  }
  std::sort(out.begin(), out.end());
  return out;
}

}  // namespace echosyn::camus
