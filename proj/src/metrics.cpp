#include "echosyn/metrics.hpp"

#include <cmath>
#include <cstdlib>
#include <fstream>
#include <iomanip>
#include <map>
#include <random>
#include <sstream>

#include <json.hpp>

namespace echosyn {

namespace fs = std::filesystem;

// ---------------------------------------------------------------------------
// SSIM

namespace {

constexpr int kWin = 11;
constexpr double kSigma = 1.5;

std::array<double, kWin> gaussian_window() {
  std::array<double, kWin> g{};
  double s = 0;
  for (int i = 0; i < kWin; ++i) {
    const double d = i - kWin / 2;
    g[i] = std::exp(-d * d / (2 * kSigma * kSigma));
    s += g[i];
  }
  for (auto& v : g) v /= s;
  return g;
}

// Valid-region separable Gaussian filter of an h x w image.
std::vector<double> filter_valid(std::span<const double> img, std::int64_t h, std::int64_t w,
                                 const std::array<double, kWin>& g) {
  const auto oh = h - kWin + 1, ow = w - kWin + 1;
  std::vector<double> rows(static_cast<std::size_t>(h * ow));
  for (std::int64_t y = 0; y < h; ++y) {
    for (std::int64_t x = 0; x < ow; ++x) {
      double acc = 0;
      for (int j = 0; j < kWin; ++j) acc += g[j] * img[y * w + x + j];
      rows[y * ow + x] = acc;
    }
  }
  std::vector<double> out(static_cast<std::size_t>(oh * ow));
  for (std::int64_t y = 0; y < oh; ++y) {
    for (std::int64_t x = 0; x < ow; ++x) {
      double acc = 0;
      for (int j = 0; j < kWin; ++j) acc += g[j] * rows[(y + j) * ow + x];
      out[y * ow + x] = acc;
    }
  }
  return out;
}

}  // namespace

double ssim_frame(const Tensor<double>& a, const Tensor<double>& b) {
  if (a.rank() != 2 || a.shape() != b.shape()) {
    throw ContractError("ssim_frame: images must share an H x W shape, got " + shape_str(a.shape()) + " and " +
                        shape_str(b.shape()));
  }
  const auto h = a.dim(0), w = a.dim(1);
  if (h < kWin || w < kWin) throw ContractError("ssim_frame: images must be at least 11 x 11");
  constexpr double c1 = 0.01 * 0.01, c2 = 0.03 * 0.03;
  static const auto g = gaussian_window();

  const auto& av = a.vec();
  const auto& bv = b.vec();
  std::vector<double> aa(av.size()), bb(av.size()), ab(av.size());
  for (std::size_t i = 0; i < av.size(); ++i) {
    aa[i] = av[i] * av[i];
    bb[i] = bv[i] * bv[i];
    ab[i] = av[i] * bv[i];
  }
  const auto mu_a = filter_valid(av, h, w, g), mu_b = filter_valid(bv, h, w, g);
  const auto e_aa = filter_valid(aa, h, w, g), e_bb = filter_valid(bb, h, w, g), e_ab = filter_valid(ab, h, w, g);
  double total = 0;
  for (std::size_t i = 0; i < mu_a.size(); ++i) {
    const double ma = mu_a[i], mb = mu_b[i];
    const double va = e_aa[i] - ma * ma, vb = e_bb[i] - mb * mb, cov = e_ab[i] - ma * mb;
    total += ((2 * ma * mb + c1) * (2 * cov + c2)) / ((ma * ma + mb * mb + c1) * (va + vb + c2));
  }
  return total / static_cast<double>(mu_a.size());
}

Tensor<double> unit_frame(const Video& v, std::int64_t k, std::int64_t c) {
  const auto h = v.dim(2), w = v.dim(3);
  Tensor<double> f({h, w});
  const float* src = v.data() + (k * v.dim(1) + c) * h * w;
  for (std::int64_t i = 0; i < h * w; ++i) f[i] = (static_cast<double>(src[i]) + 1.0) / 2.0;
  return f;
}

SsimPairing ssim_video_pairs(const std::vector<KeyedVideo>& generated, const std::vector<KeyedVideo>& real) {
  std::map<std::string, const Video*> by_map;
  for (const auto& r : real) {
    if (!by_map.emplace(r.map_id, &r.video).second) {
      throw ContractError("ssim_video_pairs: two real videos share map id " + r.map_id);
    }
  }
  std::string orphans;
  for (const auto& g : generated) {
    if (!by_map.count(g.map_id)) orphans += (orphans.empty() ? "" : ", ") + g.map_id;
  }
  if (!orphans.empty()) throw ContractError("ssim_video_pairs: generated videos without a real counterpart: " + orphans);

  SsimPairing out;
  double total = 0;
  for (const auto& g : generated) {
    const Video& r = *by_map.at(g.map_id);
    if (g.video.shape() != r.shape()) {
      throw ContractError("ssim_video_pairs: shape mismatch for map " + g.map_id + ": " + shape_str(g.video.shape()) +
                          " vs " + shape_str(r.shape()));
    }
    for (std::int64_t k = 0; k < r.dim(0); ++k) {
      for (std::int64_t c = 0; c < r.dim(1); ++c) {
        total += ssim_frame(unit_frame(g.video, k, c), unit_frame(r, k, c));
        ++out.frame_pairs;
      }
    }
  }
  if (out.frame_pairs == 0) throw ContractError("ssim_video_pairs: nothing to compare");
  out.mean = total / static_cast<double>(out.frame_pairs);
  return out;
}

// ---------------------------------------------------------------------------
// Frechet distance

GaussianFit fit_gaussian(const std::vector<std::vector<double>>& rows) {
  if (rows.size() < 2) throw ContractError("fit_gaussian: need at least 2 samples to estimate a covariance");
  const auto d = static_cast<Eigen::Index>(rows.front().size());
  const auto n = static_cast<Eigen::Index>(rows.size());
  Eigen::MatrixXd x(n, d);
  for (Eigen::Index i = 0; i < n; ++i) {
    if (static_cast<Eigen::Index>(rows[i].size()) != d) throw ContractError("fit_gaussian: ragged feature rows");
    for (Eigen::Index j = 0; j < d; ++j) x(i, j) = rows[i][j];
  }
  GaussianFit fit;
  fit.count = n;
  fit.mean = x.colwise().mean().transpose();
  const Eigen::MatrixXd centered = x.rowwise() - fit.mean.transpose();
  fit.cov = (centered.transpose() * centered) / static_cast<double>(n - 1);
  return fit;
}

namespace {

// Symmetric PSD square root; rejects eigenvalues below -1e-8 * scale.
Eigen::MatrixXd psd_sqrt(const Eigen::MatrixXd& m, const char* what, double* trace_sqrt = nullptr) {
  const Eigen::MatrixXd s = 0.5 * (m + m.transpose());
  Eigen::SelfAdjointEigenSolver<Eigen::MatrixXd> es(s);
  if (es.info() != Eigen::Success) throw NumericFault(std::string(what) + ": eigendecomposition failed");
  Eigen::VectorXd ev = es.eigenvalues();
  const double scale = std::max(1.0, ev.cwiseAbs().maxCoeff());
  for (Eigen::Index i = 0; i < ev.size(); ++i) {
    if (!std::isfinite(ev(i))) throw NumericFault(std::string(what) + ": non-finite eigenvalue");
    if (ev(i) < -1e-8 * scale) {
      throw ContractError(std::string(what) + " is not positive semidefinite (eigenvalue " + std::to_string(ev(i)) +
                          ")");
    }
    ev(i) = std::sqrt(std::max(ev(i), 0.0));
  }
  if (trace_sqrt) *trace_sqrt = ev.sum();
  return es.eigenvectors() * ev.asDiagonal() * es.eigenvectors().transpose();
}

}  // namespace

double frechet_distance(const Eigen::VectorXd& mu1, const Eigen::MatrixXd& sigma1, const Eigen::VectorXd& mu2,
                        const Eigen::MatrixXd& sigma2) {
  const auto d = mu1.size();
  if (mu2.size() != d || sigma1.rows() != d || sigma1.cols() != d || sigma2.rows() != d || sigma2.cols() != d) {
    throw ContractError("frechet_distance: dimension mismatch");
  }
  if ((sigma1 - sigma1.transpose()).cwiseAbs().maxCoeff() > 1e-8 * std::max(1.0, sigma1.cwiseAbs().maxCoeff()) ||
      (sigma2 - sigma2.transpose()).cwiseAbs().maxCoeff() > 1e-8 * std::max(1.0, sigma2.cwiseAbs().maxCoeff())) {
    throw ContractError("frechet_distance: covariance matrices must be symmetric");
  }
  const Eigen::MatrixXd r1 = psd_sqrt(sigma1, "sigma1");
  psd_sqrt(sigma2, "sigma2");
  double tr_cross = 0;
  psd_sqrt(r1 * sigma2 * r1, "cross-covariance product", &tr_cross);
  const double dist = (mu1 - mu2).squaredNorm() + sigma1.trace() + sigma2.trace() - 2.0 * tr_cross;
  return std::max(dist, 0.0);
}

// ---------------------------------------------------------------------------
// Extractors

namespace {

// Average pooling into bins x bins cells with bounds floor(i * n / bins).
std::vector<double> pool(const float* img, std::int64_t h, std::int64_t w, int bins) {
  std::vector<double> out(static_cast<std::size_t>(bins * bins), 0.0);
  for (int by = 0; by < bins; ++by) {
    const auto y0 = by * h / bins, y1 = (by + 1) * h / bins;
    for (int bx = 0; bx < bins; ++bx) {
      const auto x0 = bx * w / bins, x1 = (bx + 1) * w / bins;
      double acc = 0;
      for (auto y = y0; y < y1; ++y) {
        for (auto x = x0; x < x1; ++x) acc += img[y * w + x];
      }
      out[by * bins + bx] = acc / static_cast<double>((y1 - y0) * (x1 - x0));
    }
  }
  return out;
}

std::vector<float> gradient_magnitude(const float* img, std::int64_t h, std::int64_t w) {
  std::vector<float> g(static_cast<std::size_t>(h * w), 0.0f);
  for (std::int64_t y = 0; y < h; ++y) {
    for (std::int64_t x = 0; x < w; ++x) {
      const float gx = img[y * w + std::min(x + 1, w - 1)] - img[y * w + std::max<std::int64_t>(x - 1, 0)];
      const float gy = img[std::min(y + 1, h - 1) * w + x] - img[std::max<std::int64_t>(y - 1, 0) * w + x];
      g[y * w + x] = std::sqrt(gx * gx + gy * gy);
    }
  }
  return g;
}

}  // namespace

ToyFrameExtractor::ToyFrameExtractor(std::uint64_t seed, int projections)
    : seed_(seed), projections_(projections), proj_(static_cast<std::size_t>(projections) * 64) {
  if (projections < 1) throw ConfigError("toy extractor needs at least one projection");
  std::mt19937_64 rng(seed);
  std::normal_distribution<double> n(0.0, 1.0 / 8.0);
  for (auto& v : proj_) v = n(rng);
}

std::string ToyFrameExtractor::id() const {
  return "toy-frame-v1(seed=" + std::to_string(seed_) + ",proj=" + std::to_string(projections_) + ")";
}

std::vector<double> ToyFrameExtractor::embed_one(const Tensor<float>& frame) const {
  if (frame.rank() != 2 || frame.dim(0) < 8 || frame.dim(1) < 8) {
    throw ContractError("toy extractor needs H x W frames of at least 8 x 8, got " + shape_str(frame.shape()));
  }
  const auto h = frame.dim(0), w = frame.dim(1);
  const auto pooled = pool(frame.data(), h, w, 8);
  std::vector<double> out(static_cast<std::size_t>(dim()));
  for (int p = 0; p < projections_; ++p) {
    double acc = 0;
    for (int j = 0; j < 64; ++j) acc += proj_[p * 64 + j] * pooled[j];
    out[p] = std::tanh(acc);
  }
  const auto g = gradient_magnitude(frame.data(), h, w);
  const auto gp = pool(g.data(), h, w, 4);
  for (int j = 0; j < 16; ++j) out[projections_ + j] = gp[j];
  return out;
}

std::vector<std::vector<double>> ToyFrameExtractor::embed_frames(const std::vector<Tensor<float>>& frames) const {
  std::vector<std::vector<double>> out;
  out.reserve(frames.size());
  for (const auto& f : frames) out.push_back(embed_one(f));
  return out;
}

ToyVideoExtractor::ToyVideoExtractor(std::uint64_t seed) : frame_(seed) {}

std::string ToyVideoExtractor::id() const { return "toy-video-v1[" + frame_.id() + "]"; }

std::vector<std::vector<double>> ToyVideoExtractor::embed_videos(const std::vector<Video>& videos) const {
  std::vector<std::vector<double>> out;
  const int fd = frame_.dim();
  for (const auto& v : videos) {
    if (v.rank() != 4 || v.dim(0) < 2) throw ContractError("toy video extractor needs K x C x H x W with K >= 2");
    const auto k = v.dim(0), h = v.dim(2), w = v.dim(3);
    std::vector<double> e(static_cast<std::size_t>(dim()), 0.0);
    std::vector<float> diff(static_cast<std::size_t>(h * w));
    for (std::int64_t f = 0; f < k; ++f) {
      // First channel only.
      const float* src = v.data() + f * v.dim(1) * h * w;
      const auto fe = frame_.embed_one(Tensor<float>({h, w}, std::vector<float>(src, src + h * w)));
      const double ramp = (2.0 * f / static_cast<double>(k - 1) - 1.0) / static_cast<double>(k);
      for (int j = 0; j < fd; ++j) {
        e[j] += fe[j] / static_cast<double>(k);
        e[fd + j] += ramp * fe[j];
      }
      if (f + 1 < k) {
        const float* nxt = src + v.dim(1) * h * w;
        for (std::int64_t i = 0; i < h * w; ++i) diff[i] = std::abs(nxt[i] - src[i]);
        const auto dp = pool(diff.data(), h, w, 4);
        for (int j = 0; j < 16; ++j) e[2 * fd + j] += dp[j] / static_cast<double>(k - 1);
      }
    }
    out.push_back(std::move(e));
  }
  return out;
}

ExternalCommandExtractor::ExternalCommandExtractor(std::string command, std::string identity, int dim)
    : command_(std::move(command)), identity_(std::move(identity)), dim_(dim) {
  if (command_.empty()) throw ConfigError("external extractor needs a command");
  if (dim_ < 1) throw ConfigError("external extractor dimension must be positive");
}

std::vector<std::vector<double>> ExternalCommandExtractor::embed_frames(const std::vector<Tensor<float>>& frames) const {
  if (frames.empty()) return {};
  std::vector<const float*> items;
  for (const auto& f : frames) {
    if (f.shape() != frames.front().shape()) throw ContractError("external extractor: frames must share one size");
    items.push_back(f.data());
  }
  return run(items, 1, frames.front().dim(0), frames.front().dim(1));
}

std::vector<std::vector<double>> ExternalCommandExtractor::embed_videos(const std::vector<Video>& videos) const {
  if (videos.empty()) return {};
  std::vector<const float*> items;
  for (const auto& v : videos) {
    if (v.shape() != videos.front().shape() || v.dim(1) != 1) {
      throw ContractError("external extractor: videos must share one K x 1 x H x W shape");
    }
    items.push_back(v.data());
  }
  const auto& s = videos.front().shape();
  return run(items, s[0], s[2], s[3]);
}

std::vector<std::vector<double>> ExternalCommandExtractor::run(const std::vector<const float*>& items, std::int64_t k,
                                                               std::int64_t h, std::int64_t w) const {
  std::random_device rd;
  const auto dir = fs::temp_directory_path() / ("echosyn-extract-" + std::to_string(rd()) + std::to_string(rd()));
  fs::create_directories(dir);
  const auto in_path = dir / "in.csv", out_path = dir / "out.csv";
  {
    std::ofstream in(in_path);
    in << k << ',' << h << ',' << w << '\n';
    in << std::setprecision(9);
    for (const float* p : items) {
      for (std::int64_t i = 0; i < k * h * w; ++i) in << (i ? "," : "") << p[i];
      in << '\n';
    }
  }
  const std::string cmd = command_ + " '" + in_path.string() + "' '" + out_path.string() + "'";
  const int rc = std::system(cmd.c_str());
  std::vector<std::vector<double>> rows;
  std::ifstream out(out_path);
  std::string line;
  while (rc == 0 && std::getline(out, line)) {
    if (line.empty()) continue;
    std::vector<double> row;
    std::stringstream ss(line);
    std::string cell;
    while (std::getline(ss, cell, ',')) row.push_back(std::stod(cell));
    rows.push_back(std::move(row));
  }
  fs::remove_all(dir);
  if (rc != 0) throw std::runtime_error("external extractor '" + command_ + "' exited with status " + std::to_string(rc));
  if (rows.size() != items.size()) {
    throw std::runtime_error("external extractor returned " + std::to_string(rows.size()) + " rows for " +
                             std::to_string(items.size()) + " items");
  }
  for (const auto& r : rows) {
    if (static_cast<int>(r.size()) != dim_) {
      throw std::runtime_error("external extractor returned a " + std::to_string(r.size()) +
                               "-dimensional embedding, expected " + std::to_string(dim_));
    }
  }
  return rows;
}

// ---------------------------------------------------------------------------
// FID / FVD

namespace {

FrechetResult frechet_of(const std::vector<std::vector<double>>& real, const std::vector<std::vector<double>>& gen) {
  FrechetResult r;
  r.n_real = static_cast<std::int64_t>(real.size());
  r.n_generated = static_cast<std::int64_t>(gen.size());
  auto a = fit_gaussian(real);
  auto b = fit_gaussian(gen);
  const auto d = a.mean.size();
  if (a.count <= d || b.count <= d) {
    r.regularized = true;
    a.cov += 1e-6 * Eigen::MatrixXd::Identity(d, d);
    b.cov += 1e-6 * Eigen::MatrixXd::Identity(d, d);
  }
  r.value = frechet_distance(a.mean, a.cov, b.mean, b.cov);
  return r;
}

}  // namespace

std::vector<Tensor<float>> all_frames(const std::vector<Video>& videos) {
  std::vector<Tensor<float>> out;
  for (const auto& v : videos) {
    const auto h = v.dim(2), w = v.dim(3);
    for (std::int64_t f = 0; f < v.dim(0) * v.dim(1); ++f) {
      const float* src = v.data() + f * h * w;
      out.emplace_back(Shape{h, w}, std::vector<float>(src, src + h * w));
    }
  }
  return out;
}

FrechetResult fid_compute(const std::vector<Tensor<float>>& real_frames, const std::vector<Tensor<float>>& gen_frames,
                          const FrameExtractor& extractor) {
  if (real_frames.size() < 2 || gen_frames.size() < 2) throw ContractError("FID needs at least 2 frames per side");
  return frechet_of(extractor.embed_frames(real_frames), extractor.embed_frames(gen_frames));
}

FrechetResult fvd_compute(const std::vector<Video>& real_videos, const std::vector<Video>& gen_videos,
                          const VideoExtractor& extractor) {
  if (real_videos.size() < 2 || gen_videos.size() < 2) throw ContractError("FVD needs at least 2 videos per side");
  return frechet_of(extractor.embed_videos(real_videos), extractor.embed_videos(gen_videos));
}

// ---------------------------------------------------------------------------
// Protocol

bool MetricsReport::all_finite() const {
  return std::isfinite(fid) && std::isfinite(fvd) && std::isfinite(mean_ssim);
}

std::string MetricsReport::to_json() const {
  nlohmann::json j{{"fid", fid},
                   {"fvd", fvd},
                   {"mean_ssim", mean_ssim},
                   {"n_real", n_real},
                   {"n_generated", n_generated},
                   {"n_frame_pairs", n_frame_pairs},
                   {"fid_regularized", fid_regularized},
                   {"fvd_regularized", fvd_regularized},
                   {"frame_extractor", frame_extractor},
                   {"video_extractor", video_extractor},
                   {"config_fingerprint", config_fingerprint},
                   {"cond", cond_label},
                   {"model", model_label},
                   {"frames", frames},
                   {"note", "FID/FVD values are relative to the named extractors"}};
  return j.dump(2);
}

std::string MetricsReport::table() const {
  std::ostringstream os;
  os << std::left << std::setw(8) << "Cond." << std::setw(10) << "Model" << std::setw(5) << "K" << std::setw(12)
     << "FID" << std::setw(12) << "FVD" << "SSIM" << '\n';
  os << std::setw(8) << cond_label << std::setw(10) << model_label << std::setw(5) << frames << std::fixed
     << std::setprecision(2) << std::setw(12) << fid << std::setw(12) << fvd << std::setprecision(4) << mean_ssim
     << '\n';
  return os.str();
}

MetricsReport evaluate_suite(const BatchGenerator& generate, const std::vector<EvalItem>& test,
                             const FrameExtractor& frame_ex, const VideoExtractor& video_ex, const SuiteOptions& opts,
                             const fs::path& out_dir) {
  if (test.empty()) throw ContractError("evaluate_suite: no test maps");
  if (opts.n_per_map < 1) throw ConfigError("evaluate_suite: n_per_map must be >= 1");
  std::vector<SemanticCondition> conds;
  std::vector<Video> real;
  std::vector<KeyedVideo> real_keyed;
  for (const auto& item : test) {
    conds.push_back(item.x);
    real.push_back(item.real);
    real_keyed.push_back({item.map_id, item.real});
  }
  const auto gen = generate(conds, opts.n_per_map);
  const auto expected = test.size() * static_cast<std::size_t>(opts.n_per_map);
  if (gen.size() != expected) {
    throw ContractError("evaluate_suite: generator returned " + std::to_string(gen.size()) + " videos, expected " +
                        std::to_string(expected));
  }
  std::vector<KeyedVideo> gen_keyed;
  gen_keyed.reserve(gen.size());
  for (std::size_t i = 0; i < gen.size(); ++i) gen_keyed.push_back({test[i / opts.n_per_map].map_id, gen[i]});

  MetricsReport rep;
  rep.n_real = static_cast<std::int64_t>(real.size());
  rep.n_generated = static_cast<std::int64_t>(gen.size());
  rep.frames = real.front().dim(0);
  const auto fid = fid_compute(all_frames(real), all_frames(gen), frame_ex);
  rep.fid = fid.value;
  rep.fid_regularized = fid.regularized;
  if (real.size() >= 2 && gen.size() >= 2) {
    const auto fvd = fvd_compute(real, gen, video_ex);
    rep.fvd = fvd.value;
    rep.fvd_regularized = fvd.regularized;
  } else {
    rep.fvd = std::numeric_limits<double>::quiet_NaN();
  }
  const auto ss = ssim_video_pairs(gen_keyed, real_keyed);
  rep.mean_ssim = ss.mean;
  rep.n_frame_pairs = ss.frame_pairs;
  rep.frame_extractor = frame_ex.id();
  rep.video_extractor = video_ex.id();
  rep.config_fingerprint = opts.config_fingerprint;
  rep.cond_label = opts.cond_label;
  rep.model_label = opts.model_label;

  if (!out_dir.empty()) {
    fs::create_directories(out_dir);
    std::ofstream(out_dir / "report.json") << rep.to_json() << '\n';
    std::ofstream(out_dir / "table.txt") << rep.table();
  }
  return rep;
}

}  // namespace echosyn
