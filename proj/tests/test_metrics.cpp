#include <doctest.h>

#include <algorithm>
#include <cmath>
#include <fstream>
#include <numeric>
#include <random>

#include "echosyn/dataset.hpp"
#include "echosyn/metrics.hpp"
#include "fixtures.hpp"
#include "oracles.hpp"

using namespace echosyn;
namespace fs = std::filesystem;

namespace {

std::vector<Video> toy_videos(int patients, int frames, std::uint64_t seed) {
  const auto dir = oracle::scratch_dir("metrics");
  toy_generate({patients, frames, 32, seed}, dir);
  std::vector<Video> out;
  for (const auto& r : load_dataset(dir).records) out.push_back(resample_frames(r, frames));
  fs::remove_all(dir);
  return out;
}

std::vector<Tensor<float>> with_noise(const std::vector<Tensor<float>>& frames, double sigma, std::uint64_t seed) {
  std::mt19937_64 rng(seed);
  std::normal_distribution<float> g(0.0f, 1.0f);
  auto out = frames;
  for (auto& f : out) {
    for (auto& v : f.vec()) v = std::clamp(v + static_cast<float>(sigma) * g(rng), -1.0f, 1.0f);
  }
  return out;
}

// Mean and unbiased covariance written out with plain loops.
std::pair<Eigen::VectorXd, Eigen::MatrixXd> moments(const std::vector<std::vector<double>>& rows) {
  const auto n = rows.size();
  const auto d = rows.front().size();
  Eigen::VectorXd mu = Eigen::VectorXd::Zero(d);
  for (const auto& r : rows) {
    for (std::size_t j = 0; j < d; ++j) mu(j) += r[j] / n;
  }
  Eigen::MatrixXd cov = Eigen::MatrixXd::Zero(d, d);
  for (const auto& r : rows) {
    for (std::size_t a = 0; a < d; ++a) {
      for (std::size_t b = 0; b < d; ++b) cov(a, b) += (r[a] - mu(a)) * (r[b] - mu(b)) / (n - 1);
    }
  }
  return {mu, cov};
}

}  // namespace

TEST_SUITE("metrics") {
  TEST_CASE("SSIM closed forms and bounds") {
    const auto a = oracle::random_tensor<double>({16, 16}, 1, 0.0, 1.0);
    CHECK(ssim_frame(a, a) == doctest::Approx(1.0).epsilon(1e-12));
    const double c1 = 1e-4;
    CHECK(ssim_frame(Tensor<double>({12, 12}, 0.4), Tensor<double>({12, 12}, 0.6)) ==
          doctest::Approx((0.48 + c1) / (0.52 + c1)).epsilon(1e-9));
    Tensor<double> inv(a.shape());
    for (std::int64_t i = 0; i < a.numel(); ++i) inv[i] = 1.0 - a[i];
    const double s = ssim_frame(a, inv);
    CHECK(s < 0.0);
    CHECK(s >= -1.0);
    CHECK_THROWS_AS(ssim_frame(Tensor<double>({8, 8}), Tensor<double>({8, 8})), ContractError);
    CHECK_THROWS_AS(ssim_frame(a, Tensor<double>({16, 17})), ContractError);
  }

  TEST_CASE("SSIM agrees with the sliding-window oracle") {
    for (int i = 0; i < 50; ++i) {
      const auto x = oracle::random_tensor<double>({13 + i % 7, 11 + i % 5}, 100 + i, 0.0, 1.0);
      auto y = oracle::random_tensor<double>(x.shape(), 200 + i, -0.3, 0.3);
      for (std::int64_t j = 0; j < y.numel(); ++j) y[j] = std::clamp(x[j] + y[j], 0.0, 1.0);
      CHECK(std::abs(ssim_frame(x, y) - oracle::ssim_naive(x, y)) < 1e-9);
    }
  }

  TEST_CASE("SSIM pairing by map id") {
    const auto v = oracle::random_tensor<float>({3, 1, 12, 12}, 5);
    const auto w = oracle::random_tensor<float>({3, 1, 12, 12}, 6);
    const auto p = ssim_video_pairs({{"a", v}, {"a", w}}, {{"a", v}});
    CHECK(p.frame_pairs == 6);
    double expect = 0;
    for (int k = 0; k < 3; ++k) expect += (1.0 + ssim_frame(unit_frame(w, k), unit_frame(v, k))) / 6.0;
    CHECK(p.mean == doctest::Approx(expect).epsilon(1e-12));
    CHECK_THROWS_AS(ssim_video_pairs({{"b", v}}, {{"a", v}}), ContractError);
    CHECK(unit_frame(Video({1, 1, 2, 2}, -1.0f), 0)[0] == 0.0);
  }

  TEST_CASE("Frechet distance closed forms") {
    const Eigen::MatrixXd i1 = Eigen::MatrixXd::Identity(1, 1);
    CHECK(frechet_distance(Eigen::VectorXd::Zero(1), i1, Eigen::VectorXd::Ones(1), i1) == doctest::Approx(1.0).epsilon(1e-12));
    // 1-D: (mu1 - mu2)^2 + (s1 - s2)^2 with standard deviations s.
    Eigen::MatrixXd v4(1, 1), v9(1, 1);
    v4 << 4;
    v9 << 9;
    CHECK(frechet_distance(Eigen::VectorXd::Zero(1), v4, Eigen::VectorXd::Constant(1, 2.0), v9) ==
          doctest::Approx(4.0 + 1.0).epsilon(1e-12));
    for (int i = 0; i < 10; ++i) {
      const auto s1 = oracle::random_spd(8, 10 + i), s2 = oracle::random_spd(8, 30 + i);
      const Eigen::VectorXd m1 = Eigen::VectorXd::LinSpaced(8, 0, i), m2 = Eigen::VectorXd::Constant(8, 0.5);
      const double d12 = frechet_distance(m1, s1, m2, s2), d21 = frechet_distance(m2, s2, m1, s1);
      CHECK(std::abs(d12 - d21) < 1e-9);
      CHECK(d12 >= 0.0);
      CHECK(std::abs(d12 - oracle::frechet_general_eig(m1, s1, m2, s2)) < 1e-6);
      CHECK(std::abs(frechet_distance(m1, s1, m1, s1)) < 1e-9);
    }
    // Rank-deficient covariances are accepted.
    Eigen::MatrixXd low = Eigen::MatrixXd::Zero(3, 3);
    low(0, 0) = 1;
    CHECK(frechet_distance(Eigen::VectorXd::Zero(3), low, Eigen::VectorXd::Zero(3), low) == doctest::Approx(0.0));
    Eigen::MatrixXd neg = -Eigen::MatrixXd::Identity(2, 2);
    CHECK_THROWS_AS(frechet_distance(Eigen::VectorXd::Zero(2), neg, Eigen::VectorXd::Zero(2), neg), ContractError);
  }

  TEST_CASE("Gaussian fit matches plain moments and ignores row order") {
    std::vector<std::vector<double>> rows;
    std::mt19937_64 rng(3);
    std::normal_distribution<double> g;
    for (int i = 0; i < 30; ++i) rows.push_back({g(rng), g(rng) * 2 + 1, g(rng) - 0.5});
    const auto fit = fit_gaussian(rows);
    const auto [mu, cov] = moments(rows);
    CHECK((fit.mean - mu).cwiseAbs().maxCoeff() < 1e-12);
    CHECK((fit.cov - cov).cwiseAbs().maxCoeff() < 1e-12);
    std::shuffle(rows.begin(), rows.end(), rng);
    const auto fit2 = fit_gaussian(rows);
    CHECK((fit2.cov - fit.cov).cwiseAbs().maxCoeff() < 1e-9);
    CHECK_THROWS_AS(fit_gaussian({{1.0}}), ContractError);
  }

  TEST_CASE("toy extractors are deterministic and sized as declared") {
    const ToyFrameExtractor a(4), b(4), c(5);
    const auto f = oracle::random_tensor<float>({32, 32}, 9);
    CHECK(a.embed_one(f) == b.embed_one(f));
    CHECK(a.embed_one(f) != c.embed_one(f));
    CHECK(static_cast<int>(a.embed_one(f).size()) == a.dim());
    CHECK(a.id() != c.id());
    const ToyVideoExtractor v(4);
    const auto e = v.embed_videos({oracle::random_tensor<float>({4, 1, 16, 16}, 1)});
    CHECK(static_cast<int>(e.front().size()) == v.dim());
    CHECK_THROWS_AS(a.embed_one(Tensor<float>({4, 4})), ContractError);
  }

  TEST_CASE("FID against a plain recomputation") {
    std::vector<Tensor<float>> real, gen;
    for (int i = 0; i < 100; ++i) {
      real.push_back(oracle::random_tensor<float>({24, 24}, 400 + i));
      gen.push_back(oracle::random_tensor<float>({24, 24}, 600 + i, -0.8, 1.0));
    }
    const ToyFrameExtractor ex(2);
    const auto r = fid_compute(real, gen, ex);
    CHECK_FALSE(r.regularized);
    CHECK(r.n_real == 100);
    const auto [m1, s1] = moments(ex.embed_frames(real));
    const auto [m2, s2] = moments(ex.embed_frames(gen));
    CHECK(r.value == doctest::Approx(oracle::frechet_general_eig(m1, s1, m2, s2)).epsilon(1e-6));
    CHECK(std::abs(fid_compute(real, real, ex).value) < 1e-6);
  }

  TEST_CASE("small samples are regularized") {
    std::vector<Tensor<float>> few;
    for (int i = 0; i < 5; ++i) few.push_back(Tensor<float>({16, 16}, 0.1f * i));
    const ToyFrameExtractor ex(0);
    const auto r = fid_compute(few, with_noise(few, 0.3, 1), ex);
    CHECK(r.regularized);
    CHECK(std::isfinite(r.value));
    CHECK(r.value > 0.0);
    std::vector<Tensor<float>> constant(6, Tensor<float>({16, 16}, 0.2f));
    std::vector<Tensor<float>> other(6, Tensor<float>({16, 16}, -0.4f));
    CHECK(fid_compute(constant, other, ex).value > 0.0);
  }

  TEST_CASE("FID grows with pixel noise") {
    const auto real = all_frames(toy_videos(6, 8, 3));
    const ToyFrameExtractor ex(0);
    double prev = -1;
    for (double sigma : {0.0, 0.1, 0.3, 0.6}) {
      const double v = fid_compute(real, with_noise(real, sigma, 11), ex).value;
      CHECK(v >= prev);
      prev = v;
    }
    CHECK(prev > 0.0);
  }

  TEST_CASE("FVD notices frame order") {
    const auto real = toy_videos(6, 8, 4);
    auto shuffled = real;
    std::mt19937_64 rng(5);
    for (auto& v : shuffled) {
      std::vector<std::int64_t> perm(8);
      std::iota(perm.begin(), perm.end(), 0);
      std::shuffle(perm.begin(), perm.end(), rng);
      Video out(v.shape());
      const auto fsz = v.numel() / 8;
      for (int k = 0; k < 8; ++k) std::copy_n(v.data() + perm[k] * fsz, fsz, out.data() + k * fsz);
      v = out;
    }
    const ToyVideoExtractor ex(0);
    CHECK(std::abs(fvd_compute(real, real, ex).value) < 1e-6);
    CHECK(fvd_compute(real, shuffled, ex).value > 1e-3);
    // The frame-level statistics are unchanged by the shuffle.
    CHECK(std::abs(fid_compute(all_frames(real), all_frames(shuffled), ToyFrameExtractor(0)).value) < 1e-6);
  }

  TEST_CASE("evaluation suite") {
    const auto videos = toy_videos(5, 4, 6);
    std::vector<EvalItem> test;
    for (std::size_t i = 0; i < videos.size(); ++i) {
      test.push_back({"m" + std::to_string(i), fixture::blocky_condition(32, 32, i), videos[i]});
    }
    int calls = 0;
    const BatchGenerator gen = [&](const std::vector<SemanticCondition>& conds, int n) {
      ++calls;
      std::vector<Video> out;
      for (std::size_t c = 0; c < conds.size(); ++c) {
        for (int r = 0; r < n; ++r) {
          auto v = videos[c];
          for (auto& e : v.vec()) e = std::clamp(e + 0.05f * static_cast<float>(r + 1), -1.0f, 1.0f);
          out.push_back(v);
        }
      }
      return out;
    };
    SuiteOptions opts;
    opts.n_per_map = 2;
    opts.config_fingerprint = "cfg-123";
    const auto out = oracle::scratch_dir("suite");
    const auto r = evaluate_suite(gen, test, ToyFrameExtractor(0), ToyVideoExtractor(0), opts, out);
    CHECK(calls == 1);
    CHECK(r.n_generated == 10);
    CHECK(r.n_real == 5);
    CHECK(r.frames == 4);
    CHECK(r.all_finite());
    CHECK(r.mean_ssim > 0.5);
    CHECK(r.mean_ssim < 1.0);
    const auto again = evaluate_suite(gen, test, ToyFrameExtractor(0), ToyVideoExtractor(0), opts);
    CHECK(again.fid == r.fid);
    CHECK(again.fvd == r.fvd);
    CHECK(again.mean_ssim == r.mean_ssim);

    std::ifstream js(out / "report.json");
    const std::string json((std::istreambuf_iterator<char>(js)), {});
    CHECK(json.find(ToyFrameExtractor(0).id()) != std::string::npos);
    CHECK(json.find("cfg-123") != std::string::npos);
    std::ifstream tb(out / "table.txt");
    std::string header;
    std::getline(tb, header);
    for (const char* col : {"Cond.", "Model", "K", "FID", "FVD", "SSIM"}) CHECK(header.find(col) != std::string::npos);
    fs::remove_all(out);

    const BatchGenerator short_gen = [&](const std::vector<SemanticCondition>& c, int n) {
      auto v = gen(c, n);
      v.pop_back();
      return v;
    };
    CHECK_THROWS_AS(evaluate_suite(short_gen, test, ToyFrameExtractor(0), ToyVideoExtractor(0), opts), ContractError);
  }

  TEST_CASE("external command extractor") {
    const std::string cmd = std::string("python3 ") + ECHOSYN_TEST_SCRIPTS + "/moment_extractor.py";
    const ExternalCommandExtractor ex(cmd, "moments-v1", 4);
    const auto f1 = oracle::random_tensor<float>({6, 5}, 1), f2 = Tensor<float>({6, 5}, 0.25f);
    const auto e = ex.embed_frames({f1, f2});
    REQUIRE(e.size() == 2);
    double mean = 0;
    for (float v : f1.vec()) mean += v / 30.0;
    CHECK(e[0][0] == doctest::Approx(mean).epsilon(1e-6));
    CHECK(e[1][0] == doctest::Approx(0.25).epsilon(1e-9));
    CHECK(e[1][1] == doctest::Approx(0.0));
    const auto vids = ex.embed_videos({oracle::random_tensor<float>({3, 1, 4, 4}, 2)});
    CHECK(vids.front()[3] > 0.0);
    CHECK(ex.id() == "moments-v1");

    const ExternalCommandExtractor wrong_dim(cmd, "x", 5);
    CHECK_THROWS(wrong_dim.embed_frames({f1}));
    const ExternalCommandExtractor failing("false", "x", 4);
    CHECK_THROWS(failing.embed_frames({f1}));
  }
}
