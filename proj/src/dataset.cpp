#include "echosyn/dataset.hpp"

#include <algorithm>
#include <cmath>
#include <fstream>
#include <iomanip>
#include <numbers>
#include <random>
#include <set>
#include <sstream>

#include <json.hpp>

#include "echosyn/image_io.hpp"

namespace echosyn {

namespace fs = std::filesystem;
using nlohmann::json;

namespace {

std::string frame_name(std::int64_t i) {
  std::ostringstream os;
  os << "frame_" << std::setw(4) << std::setfill('0') << i << ".png";
  return os.str();
}

}  // namespace

PatientRecord load_patient(const fs::path& dir) {
  const auto manifest_path = dir / "manifest.json";
  std::ifstream in(manifest_path);
  if (!in) throw DatasetError(manifest_path.string() + ": missing manifest");
  json m;
  try {
    in >> m;
  } catch (const json::exception& e) {
    throw DatasetError(manifest_path.string() + ": " + e.what());
  }

  PatientRecord rec;
  std::int64_t n = 0, h = 0, w = 0, ed = 0, es = 0;
  try {
    rec.patient_id = m.at("patient_id").get<std::string>();
    n = m.at("num_frames").get<std::int64_t>();
    ed = m.at("ed_index").get<std::int64_t>();
    es = m.at("es_index").get<std::int64_t>();
    h = m.at("height").get<std::int64_t>();
    w = m.at("width").get<std::int64_t>();
    rec.view = m.at("view").get<std::string>();
  } catch (const json::exception& e) {
    throw DatasetError(manifest_path.string() + ": " + e.what());
  }
  if (rec.view != "2CH") throw DatasetError(manifest_path.string() + ": only 2CH views are supported, got " + rec.view);
  if (n < 2) throw DatasetError(manifest_path.string() + ": a record needs at least 2 frames");
  if (ed != 0 || es != n - 1) {
    throw DatasetError(manifest_path.string() + ": expected ED at frame 0 and ES at the last frame");
  }
  if (h <= 0 || w <= 0) throw DatasetError(manifest_path.string() + ": invalid frame size");

  for (std::int64_t i = 0; i < n; ++i) {
    const auto p = dir / frame_name(i);
    if (!fs::exists(p)) throw DatasetError(p.string() + ": missing frame");
    GrayImage img;
    try {
      img = read_png_gray(p);
    } catch (const IoError& e) {
      throw DatasetError(e.what());
    }
    if (img.height != h || img.width != w) {
      throw DatasetError(p.string() + ": frame is " + std::to_string(img.height) + "x" + std::to_string(img.width) +
                         ", manifest says " + std::to_string(h) + "x" + std::to_string(w));
    }
    Tensor<float> f({h, w});
    for (std::int64_t j = 0; j < f.numel(); ++j) f[j] = gray_to_unit(img.pixels[j]);
    rec.frames.push_back(std::move(f));
  }

  const auto lp = dir / "label_ed.png";
  if (!fs::exists(lp)) throw DatasetError(lp.string() + ": missing ED label map");
  GrayImage lab;
  try {
    lab = read_png_gray(lp);
  } catch (const IoError& e) {
    throw DatasetError(e.what());
  }
  if (lab.height != h || lab.width != w) throw DatasetError(lp.string() + ": label size differs from frame size");
  for (auto v : lab.pixels) {
    if (v >= kNumClasses) {
      throw DatasetError(lp.string() + ": class id " + std::to_string(v) + " outside 0.." +
                         std::to_string(kNumClasses - 1));
    }
  }
  rec.label_ed = LabelMap{h, w, std::move(lab.pixels)};
  return rec;
}

LoadResult load_dataset(const fs::path& root) {
  LoadResult res;
  if (!fs::is_directory(root)) throw DatasetError(root.string() + ": not a directory");
  std::vector<fs::path> dirs;
  for (const auto& e : fs::directory_iterator(root)) {
    if (e.is_directory()) dirs.push_back(e.path());
  }
  std::sort(dirs.begin(), dirs.end());
  for (const auto& d : dirs) {
    try {
      res.records.push_back(load_patient(d));
    } catch (const DatasetError& e) {
      res.errors.push_back({d, e.what()});
    }
  }
  if (dirs.empty()) res.warnings.push_back(root.string() + ": no patient directories found");
  return res;
}

DatasetSplit patient_split(const std::vector<std::string>& patient_ids, std::array<double, 3> ratios,
                           std::uint64_t seed) {
  const double total = ratios[0] + ratios[1] + ratios[2];
  if (std::abs(total - 1.0) > 1e-9 || std::any_of(ratios.begin(), ratios.end(), [](double r) { return r < 0; })) {
    throw ConfigError("split ratios must be non-negative and sum to 1");
  }
  const auto n = patient_ids.size();
  if (n < 3) throw ConfigError("need at least 3 patients to form train/val/test splits, got " + std::to_string(n));
  std::set<std::string> uniq(patient_ids.begin(), patient_ids.end());
  if (uniq.size() != n) throw ConfigError("duplicate patient ids in split input");

  std::vector<std::string> ids(patient_ids.begin(), patient_ids.end());
  std::sort(ids.begin(), ids.end());
  std::mt19937_64 rng(seed);
  std::shuffle(ids.begin(), ids.end(), rng);

  // a non-zero ratio always gets at least one patient
  const auto count = [n](double r) {
    const auto k = static_cast<std::size_t>(std::floor(static_cast<double>(n) * r + 1e-9));
    return r > 0 ? std::max<std::size_t>(k, 1) : k;
  };
  const auto n_val = count(ratios[1]), n_test = count(ratios[2]);
  if (n_val + n_test >= n) throw ConfigError("split leaves no training patients");
  DatasetSplit s;
  s.val.assign(ids.begin(), ids.begin() + n_val);
  s.test.assign(ids.begin() + n_val, ids.begin() + n_val + n_test);
  s.train.assign(ids.begin() + n_val + n_test, ids.end());
  return s;
}

std::vector<std::int64_t> resample_indices(std::int64_t num_frames, std::int64_t frames) {
  if (frames < 2) throw ConfigError("temporal resampling needs K >= 2");
  if (num_frames < 1) throw ContractError("record has no frames");
  std::vector<std::int64_t> idx(static_cast<std::size_t>(frames));
  const std::int64_t span = num_frames - 1, den = frames - 1;
  // round(i * span / den), ties upward, in exact integer arithmetic
  for (std::int64_t i = 0; i < frames; ++i) idx[i] = (2 * i * span + den) / (2 * den);
  return idx;
}

Video resample_frames(const PatientRecord& record, std::int64_t frames) {
  const auto idx = resample_indices(static_cast<std::int64_t>(record.frames.size()), frames);
  const auto h = record.height(), w = record.width();
  Video v({frames, 1, h, w});
  for (std::int64_t k = 0; k < frames; ++k) {
    const auto& src = record.frames[idx[k]];
    std::copy(src.vec().begin(), src.vec().end(), v.data() + k * h * w);
  }
  return v;
}

SemanticCondition one_hot_labels(const LabelMap& m, int classes) {
  SemanticCondition c{Tensor<float>({classes, m.height, m.width}, 0.0f), false};
  const auto hw = m.height * m.width;
  for (std::int64_t i = 0; i < hw; ++i) {
    const int cls = m.classes[i];
    if (cls >= classes) throw ContractError("class id " + std::to_string(cls) + " out of range");
    c.onehot[cls * hw + i] = 1.0f;
  }
  return c;
}

LabelMap argmax_labels(const SemanticCondition& c) {
  const auto hw = c.height() * c.width();
  LabelMap m{c.height(), c.width(), std::vector<std::uint8_t>(static_cast<std::size_t>(hw))};
  for (std::int64_t i = 0; i < hw; ++i) {
    int best = 0;
    for (int k = 1; k < c.channels(); ++k) {
      if (c.onehot[k * hw + i] > c.onehot[best * hw + i]) best = k;
    }
    m.classes[i] = static_cast<std::uint8_t>(best);
  }
  return m;
}

void write_patient(const PatientRecord& record, const fs::path& dir) {
  fs::create_directories(dir);
  const auto h = record.height(), w = record.width();
  for (std::size_t i = 0; i < record.frames.size(); ++i) {
    GrayImage img{h, w, std::vector<std::uint8_t>(static_cast<std::size_t>(h * w))};
    for (std::int64_t j = 0; j < h * w; ++j) img.pixels[j] = unit_to_gray(record.frames[i][j]);
    write_png_gray(dir / frame_name(static_cast<std::int64_t>(i)), img);
  }
  write_png_gray(dir / "label_ed.png", GrayImage{h, w, record.label_ed.classes});
  json m{{"patient_id", record.patient_id},
         {"num_frames", record.frames.size()},
         {"ed_index", 0},
         {"es_index", record.frames.size() - 1},
         {"view", record.view},
         {"height", h},
         {"width", w}};
  std::ofstream out(dir / "manifest.json");
  out << m.dump(2) << '\n';
  if (!out) throw IoError("cannot write " + (dir / "manifest.json").string());
}

namespace {

// Geometry of one synthetic heart, in normalized [0,1] image coordinates.
struct ToyHeart {
  double cx, cy;           // cavity centre
  double ax, ay;           // cavity semi-axes at ED
  double wall;             // myocardial wall thickness at ED
  double contraction;      // fractional cavity shrink at ES
  double la_ax, la_ay;     // left-atrium semi-axes at ED
  std::vector<double> speckle;  // multiplicative texture, size*size

  int classify(double x, double y, double phase) const {
    const double s = 1.0 - contraction * phase;
    const double cax = ax * s, cay = ay * s;
    const double th = wall * (1.0 + 0.3 * phase);
    const double dx = x - cx, dy = y - cy;
    if ((dx * dx) / (cax * cax) + (dy * dy) / (cay * cay) <= 1.0) return 1;
    const double oax = cax + th, oay = cay + th;
    if ((dx * dx) / (oax * oax) + (dy * dy) / (oay * oay) <= 1.0) return 2;
    const double grow = 1.0 + 0.15 * phase;
    const double lax = la_ax * grow, lay = la_ay * grow;
    const double lcy = cy + oay + 0.8 * lay;
    const double ly = y - lcy;
    if ((dx * dx) / (lax * lax) + (ly * ly) / (lay * lay) <= 1.0) return 3;
    return 0;
  }
};

bool in_fan(double x, double y) {
  const double dx = x - 0.5, dy = y + 0.02;
  const double r = std::hypot(dx, dy);
  const double angle = std::atan2(dx, dy);
  return r < 1.02 && std::abs(angle) < 0.75;
}

}  // namespace

void toy_generate(const ToyOptions& opts, const fs::path& out_root) {
  if (opts.patients < 1) throw ConfigError("toy dataset needs at least one patient");
  if (opts.frames < 2) throw ConfigError("toy dataset needs at least 2 frames");
  if (opts.size < 8) throw ConfigError("toy frame size must be >= 8");
  std::error_code ec;
  fs::create_directories(out_root, ec);
  if (ec) throw IoError("cannot create " + out_root.string() + ": " + ec.message());

  const int n = opts.size;
  for (int p = 0; p < opts.patients; ++p) {
    std::mt19937_64 rng(opts.seed * 0x9E3779B97F4A7C15ULL + static_cast<std::uint64_t>(p) + 1);
    std::uniform_real_distribution<double> u(0.0, 1.0);
    ToyHeart heart{0.5 + 0.08 * (u(rng) - 0.5),
                   0.40 + 0.06 * (u(rng) - 0.5),
                   0.12 + 0.04 * u(rng),
                   0.20 + 0.05 * u(rng),
                   0.06 + 0.03 * u(rng),
                   0.18 + 0.12 * u(rng),
                   0.10 + 0.03 * u(rng),
                   0.07 + 0.02 * u(rng),
                   {}};
    // Speckle: white noise smoothed by a 3x3 box, fixed to the patient.
    std::normal_distribution<double> g(0.0, 1.0);
    std::vector<double> white(static_cast<std::size_t>(n * n));
    for (auto& v : white) v = g(rng);
    heart.speckle.assign(white.size(), 0.0);
    for (int y = 0; y < n; ++y) {
      for (int x = 0; x < n; ++x) {
        double acc = 0;
        int cnt = 0;
        for (int dy = -1; dy <= 1; ++dy) {
          for (int dx = -1; dx <= 1; ++dx) {
            const int yy = y + dy, xx = x + dx;
            if (yy < 0 || yy >= n || xx < 0 || xx >= n) continue;
            acc += white[yy * n + xx];
            ++cnt;
          }
        }
        heart.speckle[y * n + x] = acc / std::sqrt(static_cast<double>(cnt));
      }
    }

    PatientRecord rec;
    std::ostringstream id;
    id << "patient" << std::setw(4) << std::setfill('0') << (p + 1);
    rec.patient_id = id.str();
    rec.label_ed = LabelMap{n, n, std::vector<std::uint8_t>(static_cast<std::size_t>(n * n))};
    static constexpr std::array<double, 4> kBrightness{0.38, 0.07, 0.78, 0.10};
    for (int k = 0; k < opts.frames; ++k) {
      const double phase = (1.0 - std::cos(std::numbers::pi * k / (opts.frames - 1))) / 2.0;
      Tensor<float> f({n, n});
      for (int y = 0; y < n; ++y) {
        for (int x = 0; x < n; ++x) {
          const double px = (x + 0.5) / n, py = (y + 0.5) / n;
          const int cls = heart.classify(px, py, phase);
          if (k == 0) rec.label_ed.classes[y * n + x] = static_cast<std::uint8_t>(cls);
          double v = in_fan(px, py) ? kBrightness[cls] * (1.0 + 0.3 * heart.speckle[y * n + x]) : 0.0;
          v = std::clamp(v, 0.0, 1.0);
          f[y * n + x] = static_cast<float>(2.0 * v - 1.0);
        }
      }
      rec.frames.push_back(std::move(f));
    }
    write_patient(rec, out_root / rec.patient_id);
  }
}

std::vector<PatientRecord> select_records(const std::vector<PatientRecord>& records,
                                          const std::vector<std::string>& ids) {
  std::vector<PatientRecord> out;
  out.reserve(ids.size());
  for (const auto& id : ids) {
    auto it = std::find_if(records.begin(), records.end(), [&](const auto& r) { return r.patient_id == id; });
    if (it == records.end()) throw DatasetError("unknown patient id " + id);
    out.push_back(*it);
  }
  return out;
}

}  // namespace echosyn
