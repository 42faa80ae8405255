#include "oracles.hpp"

#include <Eigen/Eigenvalues>
#include <cmath>
#include <numeric>

namespace oracle {

PosteriorOracle gaussian_conditioning(const std::vector<double>& betas, int t) {
  // abar_{t-1} and abar_t as plain running products.
  double abar_prev = 1.0;
  for (int s = 1; s < t; ++s) abar_prev *= 1.0 - betas[s - 1];
  const double alpha_t = 1.0 - betas[t - 1];
  const double abar_t = abar_prev * alpha_t;
  // Joint given y0: y_{t-1} = sqrt(abar_prev) y0 + sqrt(1-abar_prev) e1,
  //                 y_t = sqrt(alpha_t) y_{t-1} + sqrt(beta_t) e2.
  const double s11 = 1.0 - abar_prev;
  const double s12 = std::sqrt(alpha_t) * s11;
  const double s22 = alpha_t * s11 + betas[t - 1];
  const double k = s12 / s22;
  // E[y_{t-1} | y_t, y0] = sqrt(abar_prev) y0 + k (y_t - sqrt(abar_t) y0)
  return {std::sqrt(abar_prev) - k * std::sqrt(abar_t), k, s11 - s12 * s12 / s22};
}

double abar_product(const std::vector<double>& betas, int t) {
  double abar = 1.0;
  for (int s = 1; s <= t; ++s) abar *= 1.0 - betas[s - 1];
  return abar;
}

MomentCheck moment_check(const Tensor<double>& samples, const std::vector<double>& y0, double abar) {
  const auto trials = samples.dim(0), n = samples.dim(1);
  MomentCheck out;
  for (std::int64_t i = 0; i < n; ++i) {
    double sum = 0, sumsq = 0;
    for (std::int64_t r = 0; r < trials; ++r) {
      const double y = samples.at({r, i});
      sum += y;
      sumsq += y * y;
    }
    const double mean = sum / trials;
    const double var = (sumsq - trials * mean * mean) / (trials - 1);
    const double exp_mean = std::sqrt(abar) * y0[i];
    const double exp_var = 1.0 - abar;
    const double se_mean = std::sqrt(exp_var / trials);
    const double se_var = exp_var * std::sqrt(2.0 / (trials - 1));
    out.worst_mean_z = std::max(out.worst_mean_z, std::abs(mean - exp_mean) / se_mean);
    out.worst_var_z = std::max(out.worst_var_z, std::abs(var - exp_var) / se_var);
  }
  return out;
}

Tensor<double> group_norm_naive(const Tensor<double>& x, int groups, double eps) {
  const auto c = x.dim(0), k = x.dim(1), h = x.dim(2), w = x.dim(3);
  const auto per = c / groups;
  Tensor<double> out(x.shape());
  for (std::int64_t g = 0; g < groups; ++g) {
    for (std::int64_t f = 0; f < k; ++f) {
      double sum = 0, n = 0;
      for (auto ch = g * per; ch < (g + 1) * per; ++ch) {
        for (std::int64_t y = 0; y < h; ++y) {
          for (std::int64_t xx = 0; xx < w; ++xx) {
            sum += x.at({ch, f, y, xx});
            n += 1;
          }
        }
      }
      const double mean = sum / n;
      double var = 0;
      for (auto ch = g * per; ch < (g + 1) * per; ++ch) {
        for (std::int64_t y = 0; y < h; ++y) {
          for (std::int64_t xx = 0; xx < w; ++xx) var += (x.at({ch, f, y, xx}) - mean) * (x.at({ch, f, y, xx}) - mean);
        }
      }
      const double inv = 1.0 / std::sqrt(var / n + eps);
      for (auto ch = g * per; ch < (g + 1) * per; ++ch) {
        for (std::int64_t y = 0; y < h; ++y) {
          for (std::int64_t xx = 0; xx < w; ++xx) out.at({ch, f, y, xx}) = (x.at({ch, f, y, xx}) - mean) * inv;
        }
      }
    }
  }
  return out;
}

double ssim_naive(const Tensor<double>& a, const Tensor<double>& b) {
  const int win = 11;
  const double sigma = 1.5;
  std::vector<double> w2(win * win);
  double total_w = 0;
  for (int y = 0; y < win; ++y) {
    for (int x = 0; x < win; ++x) {
      const double dy = y - 5, dx = x - 5;
      w2[y * win + x] = std::exp(-(dx * dx + dy * dy) / (2 * sigma * sigma));
      total_w += w2[y * win + x];
    }
  }
  for (auto& v : w2) v /= total_w;
  const double c1 = 1e-4, c2 = 9e-4;
  const auto h = a.dim(0), w = a.dim(1);
  double acc = 0;
  int count = 0;
  for (std::int64_t y0 = 0; y0 + win <= h; ++y0) {
    for (std::int64_t x0 = 0; x0 + win <= w; ++x0) {
      double ma = 0, mb = 0;
      for (int y = 0; y < win; ++y) {
        for (int x = 0; x < win; ++x) {
          ma += w2[y * win + x] * a.at({y0 + y, x0 + x});
          mb += w2[y * win + x] * b.at({y0 + y, x0 + x});
        }
      }
      double va = 0, vb = 0, cov = 0;
      for (int y = 0; y < win; ++y) {
        for (int x = 0; x < win; ++x) {
          const double da = a.at({y0 + y, x0 + x}) - ma, db = b.at({y0 + y, x0 + x}) - mb;
          va += w2[y * win + x] * da * da;
          vb += w2[y * win + x] * db * db;
          cov += w2[y * win + x] * da * db;
        }
      }
      acc += ((2 * ma * mb + c1) * (2 * cov + c2)) / ((ma * ma + mb * mb + c1) * (va + vb + c2));
      ++count;
    }
  }
  return acc / count;
}

double frechet_general_eig(const Eigen::VectorXd& mu1, const Eigen::MatrixXd& s1, const Eigen::VectorXd& mu2,
                           const Eigen::MatrixXd& s2) {
  Eigen::EigenSolver<Eigen::MatrixXd> es(s1 * s2);
  double tr = 0;
  for (Eigen::Index i = 0; i < es.eigenvalues().size(); ++i) {
    tr += std::sqrt(std::max(0.0, es.eigenvalues()(i).real()));
  }
  return (mu1 - mu2).squaredNorm() + s1.trace() + s2.trace() - 2.0 * tr;
}

Eigen::MatrixXd random_spd(int n, std::uint64_t seed) {
  std::mt19937_64 rng(seed);
  std::normal_distribution<double> g(0.0, 1.0);
  Eigen::MatrixXd a(n, n);
  for (int i = 0; i < n; ++i) {
    for (int j = 0; j < n; ++j) a(i, j) = g(rng);
  }
  return a * a.transpose() / n + 0.1 * Eigen::MatrixXd::Identity(n, n);
}

Tensor<float> block_average(const Tensor<float>& img, std::int64_t dst) {
  const auto src = img.dim(0);
  const auto l = std::lcm(src, dst);
  const auto rep = l / src, blk = l / dst;
  std::vector<double> fine(static_cast<std::size_t>(l * l));
  for (std::int64_t y = 0; y < l; ++y) {
    for (std::int64_t x = 0; x < l; ++x) fine[y * l + x] = img.at({y / rep, x / rep});
  }
  Tensor<float> out({dst, dst});
  for (std::int64_t by = 0; by < dst; ++by) {
    for (std::int64_t bx = 0; bx < dst; ++bx) {
      double s = 0;
      for (std::int64_t y = 0; y < blk; ++y) {
        for (std::int64_t x = 0; x < blk; ++x) s += fine[(by * blk + y) * l + bx * blk + x];
      }
      out.at({by, bx}) = static_cast<float>(s / static_cast<double>(blk * blk));
    }
  }
  return out;
}

std::vector<GradProbe> finite_difference_check(echosyn::ParameterStore<double>& ps,
                                               const std::function<double()>& loss,
                                               const std::vector<std::pair<std::size_t, std::int64_t>>& probes,
                                               double h) {
  std::vector<GradProbe> out;
  for (const auto& [pi, idx] : probes) {
    auto p = ps.entries()[pi].second;
    const double analytic = p.has_grad() ? p.grad()[idx] : 0.0;
    auto& val = p.mutable_value()[idx];
    const double orig = val;
    // five-point stencil: truncation error O(h^4)
    const auto at = [&](double d) {
      val = orig + d;
      return loss();
    };
    const double numeric = (8 * (at(h) - at(-h)) - (at(2 * h) - at(-2 * h))) / (12 * h);
    val = orig;
    const double denom = std::max({std::abs(analytic), std::abs(numeric), 1e-10});
    out.push_back({ps.entries()[pi].first, idx, analytic, numeric, std::abs(analytic - numeric) / denom});
  }
  return out;
}

std::filesystem::path scratch_dir(const std::string& tag) {
  static std::uint64_t counter = 0;
  std::random_device rd;
  auto dir = std::filesystem::temp_directory_path() /
             ("echosyn-test-" + tag + "-" + std::to_string(rd()) + "-" + std::to_string(counter++));
  std::filesystem::remove_all(dir);
  std::filesystem::create_directories(dir);
  return dir;
}

}  // namespace oracle
