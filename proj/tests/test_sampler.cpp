#include <doctest.h>

#include <cmath>
#include <limits>
#include <set>

#include "echosyn/diffusion.hpp"
#include "echosyn/sampler.hpp"
#include "fixtures.hpp"
#include "oracles.hpp"

using namespace echosyn;

namespace {

// Exact noise estimate when the data distribution is a point mass at `c`.
EpsModel point_mass_model(const NoiseSchedule& s, float c) {
  return [&s, c](const Video& y, const SemanticCondition&, int t) {
    const double ab = s.alpha_bar(t);
    Video eps(y.shape());
    for (std::int64_t i = 0; i < y.numel(); ++i) eps[i] = static_cast<float>((y[i] - std::sqrt(ab) * c) / std::sqrt(1 - ab));
    return eps;
  };
}

}  // namespace

TEST_SUITE("sampler") {
  TEST_CASE("guidance combination") {
    const auto c = oracle::normal_tensor<double>({3, 1, 2, 2}, 1);
    const auto u = oracle::normal_tensor<double>({3, 1, 2, 2}, 2);
    CHECK(cfg_combine(c, u, 0.0) == c);
    for (double s : {0.0, 1.0, 7.0}) CHECK(cfg_combine(c, c, s) == c);
    CHECK(cfg_combine(Tensor<double>({1}, 2.0), Tensor<double>({1}, 1.0), 7.0)[0] == 9.0);
    for (double s : {-0.5, 1.0, 3.0, 7.0}) {
      const auto g = cfg_combine(c, u, s);
      for (std::int64_t i = 0; i < c.numel(); ++i) CHECK(g[i] == doctest::Approx((1 + s) * c[i] - s * u[i]).epsilon(1e-12));
    }
    CHECK_THROWS_AS(cfg_combine(c, Tensor<double>({1}), 1.0), ContractError);
  }

  TEST_CASE("two model calls per step, one conditional and one null") {
    const auto sched = build_schedule(12);
    int cond_calls = 0, null_calls = 0;
    std::set<int> steps;
    const EpsModel m = [&](const Video& y, const SemanticCondition& x, int t) {
      (x.is_null ? null_calls : cond_calls)++;
      steps.insert(t);
      for (float v : x.onehot.vec()) {
        if (x.is_null) CHECK(v == 0.0f);
      }
      return Video(y.shape());
    };
    SamplerConfig sc;
    sample_video(m, fixture::blocky_condition(4, 4, 1), {2, 1, 4, 4}, sched, sc);
    CHECK(cond_calls == 12);
    CHECK(null_calls == 12);
    CHECK(steps.size() == 12);
    CHECK(*steps.begin() == 1);
    CHECK(*steps.rbegin() == 12);
  }

  TEST_CASE("exact noise model collapses onto the point mass") {
    const auto sched = build_schedule(100);
    SamplerConfig sc;
    sc.seed = 4;
    sc.clip_denoised = false;
    for (double s : {1.0, 7.0}) {
      sc.guidance_scale = s;
      const auto v = sample_video(point_mass_model(sched, 0.3f), fixture::blocky_condition(4, 4, 2), {2, 1, 4, 4}, sched, sc);
      for (float e : v.vec()) CHECK(e == doctest::Approx(0.3).epsilon(1e-4));
    }
  }

  TEST_CASE("seeded determinism") {
    const auto sched = build_schedule(8);
    Denoiser<float> net(fixture::tiny_net(), 3);
    oracle::randomize_parameters(net.parameters(), 4, 0.2);
    const auto m = denoiser_model(net);
    const auto x = fixture::blocky_condition(8, 8, 5);
    SamplerConfig sc;
    sc.seed = 10;
    const auto a = sample_video(m, x, {3, 1, 8, 8}, sched, sc);
    const auto b = sample_video(m, x, {3, 1, 8, 8}, sched, sc);
    CHECK(oracle::max_abs_diff(a, b) <= 1e-6);
    sc.seed = 11;
    CHECK(oracle::max_abs_diff(a, sample_video(m, x, {3, 1, 8, 8}, sched, sc)) > 1e-3);
  }

  TEST_CASE("replicate seeds") {
    CHECK(mix64(0) == 0xE220A8397B1DCDAFULL);  // first splitmix64 output for state 0
    CHECK(replicate_seed(5, 2, 3) == mix64(mix64(mix64(5) + 2) + 3));
    std::set<std::uint64_t> seen;
    for (std::uint64_t c = 0; c < 20; ++c) {
      for (std::uint64_t r = 0; r < 20; ++r) seen.insert(replicate_seed(0, c, r));
    }
    CHECK(seen.size() == 400);
  }

  TEST_CASE("batch sampling is condition-major with per-replicate seeds") {
    const auto sched = build_schedule(5);
    Denoiser<float> net(fixture::tiny_net(), 6);
    oracle::randomize_parameters(net.parameters(), 7, 0.2);
    const auto m = denoiser_model(net);
    const std::vector<SemanticCondition> conds{fixture::blocky_condition(8, 8, 1), fixture::blocky_condition(8, 8, 2)};
    SamplerConfig sc;
    sc.seed = 99;
    const Shape shape{2, 1, 8, 8};
    const auto out = batch_sample(m, conds, 3, shape, sched, sc);
    REQUIRE(out.size() == 6);
    for (std::size_t c = 0; c < 2; ++c) {
      for (int r = 0; r < 3; ++r) {
        SamplerConfig rc = sc;
        rc.seed = replicate_seed(99, c, r);
        CHECK(oracle::max_abs_diff(out[c * 3 + r], sample_video(m, conds[c], shape, sched, rc)) <= 1e-6);
      }
    }
    for (std::size_t i = 0; i < out.size(); ++i) {
      for (std::size_t j = i + 1; j < out.size(); ++j) CHECK(oracle::max_abs_diff(out[i], out[j]) > 1e-3);
    }
    CHECK_THROWS_AS(batch_sample(m, conds, 0, shape, sched, sc), ConfigError);
  }

  TEST_CASE("non-finite values are reported with their step") {
    const auto sched = build_schedule(6);
    const EpsModel nan_at_3 = [](const Video& y, const SemanticCondition&, int t) {
      Video e(y.shape());
      if (t == 3) e[0] = std::numeric_limits<float>::quiet_NaN();
      return e;
    };
    SamplerConfig sc;
    sc.clip_denoised = false;
    try {
      sample_video(nan_at_3, fixture::blocky_condition(4, 4, 1), {1, 1, 4, 4}, sched, sc);
      FAIL("expected a numeric fault");
    } catch (const NumericFault& e) {
      CHECK(std::string(e.what()).find("t=3") != std::string::npos);
    }

    const EpsModel throws_at_2 = [](const Video& y, const SemanticCondition&, int t) {
      if (t == 2) throw NumericFault("bad activations");
      return Video(y.shape());
    };
    try {
      batch_sample(throws_at_2, {fixture::blocky_condition(4, 4, 1)}, 2, {1, 1, 4, 4}, sched, sc);
      FAIL("expected a sample error");
    } catch (const SampleError& e) {
      CHECK(e.condition_index == 0);
      CHECK(e.replicate_index == 0);
      CHECK(std::string(e.what()).find("t=2") != std::string::npos);
    }
  }

  TEST_CASE("input contracts") {
    const auto sched = build_schedule(3);
    const EpsModel zero = [](const Video& y, const SemanticCondition&, int) { return Video(y.shape()); };
    SamplerConfig sc;
    CHECK_THROWS_AS(sample_video(zero, SemanticCondition::null(4, 4), {1, 1, 4, 4}, sched, sc), ContractError);
    CHECK_THROWS_AS(sample_video(zero, fixture::blocky_condition(4, 4, 1), {1, 4, 4}, sched, sc), ContractError);
    CHECK(SamplerConfig{}.guidance_scale == 7.0);
    CHECK(SamplerConfig{}.clip_denoised);
  }
}
