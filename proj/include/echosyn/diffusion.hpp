#pragma once

// Gaussian diffusion algebra: noise schedule, forward perturbation, the
// posterior q(y_{t-1} | y_t, y_0) and the ancestral reverse step. Everything
// here is a pure function of its arguments.
//
// Step indices are 1-based: t in [1, T]. alpha_bar(0) is defined as 1.

#include <string>
#include <vector>

#include "echosyn/tensor.hpp"

namespace echosyn {

enum class ScheduleKind { kLinear };
enum class ReverseVariance { kPosterior, kBeta };

std::string to_string(ScheduleKind k);
ScheduleKind schedule_kind_from_string(const std::string& s);
std::string to_string(ReverseVariance v);
ReverseVariance reverse_variance_from_string(const std::string& s);

struct NoiseSchedule {
  int steps = 0;
  ScheduleKind kind = ScheduleKind::kLinear;
  std::vector<double> betas;          // beta_1 .. beta_T
  std::vector<double> alpha_bars;     // prod_{s<=t} (1 - beta_s)
  std::vector<double> posterior_vars; // beta_t (1 - abar_{t-1}) / (1 - abar_t)

  double beta(int t) const { return betas.at(t - 1); }
  double alpha_bar(int t) const { return t == 0 ? 1.0 : alpha_bars.at(t - 1); }
  double posterior_var(int t) const { return posterior_vars.at(t - 1); }
  void check_step(int t) const;
};

NoiseSchedule build_schedule(int steps, ScheduleKind kind = ScheduleKind::kLinear, double beta_start = 1e-4,
                             double beta_end = 0.02);

/// Schedule from an explicit beta sequence.
NoiseSchedule schedule_from_betas(std::vector<double> betas);

/// Mean coefficients of the posterior q(y_{t-1} | y_t, y_0):
/// mean = coef_y0 * y0 + coef_yt * y_t.
struct PosteriorCoefficients {
  double coef_y0;
  double coef_yt;
  double variance;
};
PosteriorCoefficients posterior_coefficients(const NoiseSchedule& s, int t);

/// sqrt(abar_t) y0 + sqrt(1 - abar_t) eps.
template <typename T>
Tensor<T> q_sample(const Tensor<T>& y0, int t, const Tensor<T>& eps, const NoiseSchedule& s);

/// sqrt(1 - beta_t) y_prev + sqrt(beta_t) eps.
template <typename T>
Tensor<T> q_forward_step(const Tensor<T>& y_prev, int t, const Tensor<T>& eps, const NoiseSchedule& s);

/// Inverts q_sample given a noise estimate; optionally clamps to [-1, 1].
template <typename T>
Tensor<T> predict_y0_from_eps(const Tensor<T>& y_t, const Tensor<T>& eps_hat, int t, const NoiseSchedule& s,
                              bool clip = false);

struct ReverseStepOptions {
  bool clip_denoised = true;
  ReverseVariance variance = ReverseVariance::kPosterior;
};

/// One ancestral step y_t -> y_{t-1}. `noise` is ignored at t = 1.
template <typename T>
Tensor<T> p_step(const Tensor<T>& y_t, const Tensor<T>& eps_hat, int t, const NoiseSchedule& s,
                 const Tensor<T>& noise, ReverseStepOptions opts = {});

/// Mean squared error between predicted and true noise.
template <typename T>
double training_loss(const Tensor<T>& eps_hat, const Tensor<T>& eps);

}  // namespace echosyn
