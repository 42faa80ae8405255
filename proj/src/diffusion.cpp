#include "echosyn/diffusion.hpp"

#include <algorithm>
#include <cmath>

namespace echosyn {

std::string to_string(ScheduleKind) { return "linear"; }

ScheduleKind schedule_kind_from_string(const std::string& s) {
  if (s == "linear") return ScheduleKind::kLinear;
  throw ConfigError("unknown schedule kind '" + s + "'");
}

std::string to_string(ReverseVariance v) { return v == ReverseVariance::kPosterior ? "posterior" : "beta"; }

ReverseVariance reverse_variance_from_string(const std::string& s) {
  if (s == "posterior") return ReverseVariance::kPosterior;
  if (s == "beta") return ReverseVariance::kBeta;
  throw ConfigError("unknown reverse variance '" + s + "'");
}

void NoiseSchedule::check_step(int t) const {
  if (t < 1 || t > steps) {
    throw ContractError("diffusion step " + std::to_string(t) + " outside [1, " + std::to_string(steps) + "]");
  }
}

NoiseSchedule schedule_from_betas(std::vector<double> betas) {
  if (betas.empty()) throw ConfigError("schedule needs at least one step");
  NoiseSchedule s;
  s.steps = static_cast<int>(betas.size());
  s.betas = std::move(betas);
  double abar = 1.0;
  for (double b : s.betas) {
    if (!(b > 0.0 && b < 1.0)) throw ConfigError("beta values must lie in (0, 1), got " + std::to_string(b));
    const double prev = abar;
    abar *= (1.0 - b);
    s.alpha_bars.push_back(abar);
    s.posterior_vars.push_back(b * (1.0 - prev) / (1.0 - abar));
  }
  return s;
}

NoiseSchedule build_schedule(int steps, ScheduleKind kind, double beta_start, double beta_end) {
  if (steps < 1) throw ConfigError("schedule step count must be >= 1");
  if (!(beta_start > 0.0 && beta_start <= beta_end && beta_end < 1.0)) {
    throw ConfigError("need 0 < beta_start <= beta_end < 1");
  }
  std::vector<double> betas(static_cast<std::size_t>(steps));
  for (int i = 0; i < steps; ++i) {
    const double frac = steps == 1 ? 0.0 : static_cast<double>(i) / (steps - 1);
    betas[i] = beta_start + (beta_end - beta_start) * frac;
  }
  auto s = schedule_from_betas(std::move(betas));
  s.kind = kind;
  return s;
}

PosteriorCoefficients posterior_coefficients(const NoiseSchedule& s, int t) {
  s.check_step(t);
  const double b = s.beta(t), ab = s.alpha_bar(t), ab_prev = s.alpha_bar(t - 1);
  return {std::sqrt(ab_prev) * b / (1.0 - ab), std::sqrt(1.0 - b) * (1.0 - ab_prev) / (1.0 - ab),
          s.posterior_var(t)};
}

template <typename T>
Tensor<T> q_sample(const Tensor<T>& y0, int t, const Tensor<T>& eps, const NoiseSchedule& s) {
  require_same_shape(y0.shape(), eps.shape(), "q_sample");
  s.check_step(t);
  const T a = static_cast<T>(std::sqrt(s.alpha_bar(t)));
  const T c = static_cast<T>(std::sqrt(1.0 - s.alpha_bar(t)));
  Tensor<T> out(y0.shape());
  for (std::int64_t i = 0; i < out.numel(); ++i) out[i] = a * y0[i] + c * eps[i];
  return out;
}

template <typename T>
Tensor<T> q_forward_step(const Tensor<T>& y_prev, int t, const Tensor<T>& eps, const NoiseSchedule& s) {
  require_same_shape(y_prev.shape(), eps.shape(), "q_forward_step");
  s.check_step(t);
  const T a = static_cast<T>(std::sqrt(1.0 - s.beta(t)));
  const T c = static_cast<T>(std::sqrt(s.beta(t)));
  Tensor<T> out(y_prev.shape());
  for (std::int64_t i = 0; i < out.numel(); ++i) out[i] = a * y_prev[i] + c * eps[i];
  return out;
}

template <typename T>
Tensor<T> predict_y0_from_eps(const Tensor<T>& y_t, const Tensor<T>& eps_hat, int t, const NoiseSchedule& s,
                              bool clip) {
  require_same_shape(y_t.shape(), eps_hat.shape(), "predict_y0_from_eps");
  s.check_step(t);
  const double ab = s.alpha_bar(t);
  const double c = std::sqrt(1.0 - ab), inv = 1.0 / std::sqrt(ab);
  Tensor<T> out(y_t.shape());
  for (std::int64_t i = 0; i < out.numel(); ++i) {
    T v = static_cast<T>((static_cast<double>(y_t[i]) - c * static_cast<double>(eps_hat[i])) * inv);
    out[i] = clip ? std::clamp(v, T{-1}, T{1}) : v;
  }
  return out;
}

template <typename T>
Tensor<T> p_step(const Tensor<T>& y_t, const Tensor<T>& eps_hat, int t, const NoiseSchedule& s,
                 const Tensor<T>& noise, ReverseStepOptions opts) {
  s.check_step(t);
  const auto y0 = predict_y0_from_eps(y_t, eps_hat, t, s, opts.clip_denoised);
  const auto pc = posterior_coefficients(s, t);
  const bool add_noise = t > 1;
  if (add_noise) require_same_shape(y_t.shape(), noise.shape(), "p_step noise");
  const double var = opts.variance == ReverseVariance::kPosterior ? pc.variance : s.beta(t);
  const double sigma = add_noise ? std::sqrt(var) : 0.0;
  Tensor<T> out(y_t.shape());
  for (std::int64_t i = 0; i < out.numel(); ++i) {
    double v = pc.coef_y0 * static_cast<double>(y0[i]) + pc.coef_yt * static_cast<double>(y_t[i]);
    if (add_noise) v += sigma * static_cast<double>(noise[i]);
    out[i] = static_cast<T>(v);
  }
  return out;
}

template <typename T>
double training_loss(const Tensor<T>& eps_hat, const Tensor<T>& eps) {
  require_same_shape(eps_hat.shape(), eps.shape(), "training_loss");
  double acc = 0;
  for (std::int64_t i = 0; i < eps.numel(); ++i) {
    const double d = static_cast<double>(eps[i]) - static_cast<double>(eps_hat[i]);
    acc += d * d;
  }
  return acc / static_cast<double>(eps.numel());
}

#define ECHOSYN_INSTANTIATE_DIFFUSION(T)                                                                      \
  template Tensor<T> q_sample(const Tensor<T>&, int, const Tensor<T>&, const NoiseSchedule&);               \
  template Tensor<T> q_forward_step(const Tensor<T>&, int, const Tensor<T>&, const NoiseSchedule&);         \
  template Tensor<T> predict_y0_from_eps(const Tensor<T>&, const Tensor<T>&, int, const NoiseSchedule&, bool); \
  template Tensor<T> p_step(const Tensor<T>&, const Tensor<T>&, int, const NoiseSchedule&, const Tensor<T>&,   \
                            ReverseStepOptions);                                                              \
  template double training_loss(const Tensor<T>&, const Tensor<T>&);

ECHOSYN_INSTANTIATE_DIFFUSION(float)
ECHOSYN_INSTANTIATE_DIFFUSION(double)

}  // namespace echosyn
