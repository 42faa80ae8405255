#include <doctest.h>

#include <cmath>
#include <stdexcept>

#include "echosyn/cascade.hpp"
#include "fixtures.hpp"
#include "oracles.hpp"

using namespace echosyn;

namespace {

Video frame_video(const Tensor<float>& frame, std::int64_t k = 1) {
  const auto h = frame.dim(0), w = frame.dim(1);
  Video v({k, 1, h, w});
  for (std::int64_t f = 0; f < k; ++f) std::copy(frame.vec().begin(), frame.vec().end(), v.data() + f * h * w);
  return v;
}

Tensor<float> frame_of(const Video& v, std::int64_t k) {
  const auto h = v.dim(2), w = v.dim(3);
  Tensor<float> f({h, w});
  std::copy_n(v.data() + k * v.dim(1) * h * w, h * w, f.data());
  return f;
}

EpsModel counting_zero(int& calls) {
  return [&calls](const Video& y, const SemanticCondition&, int) {
    ++calls;
    return Video(y.shape());
  };
}

}  // namespace

TEST_SUITE("cascade") {
  TEST_CASE("area downsampling") {
    Tensor<float> constant({128, 128}, 0.37f);
    const auto d = downsample_video(frame_video(constant, 3), 56);
    CHECK(d.shape() == Shape{3, 1, 56, 56});
    for (float v : d.vec()) CHECK(v == doctest::Approx(0.37f).epsilon(1e-6));

    Tensor<float> checker({128, 128});
    for (std::int64_t y = 0; y < 128; ++y) {
      for (std::int64_t x = 0; x < 128; ++x) checker.at({y, x}) = ((y / 3 + x / 5) % 2) ? 1.0f : -1.0f;
    }
    const auto ds = downsample_video(frame_video(checker, 2), 56);
    const auto ref = oracle::block_average(checker, 56);
    CHECK(oracle::max_abs_diff(frame_of(ds, 0), ref) <= 1e-6);
    CHECK(oracle::max_abs_diff(frame_of(ds, 1), ref) <= 1e-6);

    const auto r = oracle::random_tensor<float>({30, 30}, 3);
    CHECK(oracle::max_abs_diff(frame_of(downsample_video(frame_video(r), 12), 0), oracle::block_average(r, 12)) <= 1e-6);
    CHECK_THROWS_AS(downsample_video(frame_video(r), 40), ContractError);
  }

  TEST_CASE("bilinear upsampling uses half-pixel centres") {
    Tensor<float> tiny({2, 2}, std::vector<float>{0.0f, 1.0f, 0.0f, 1.0f});
    const auto up = frame_of(upsample_bilinear(frame_video(tiny), 4), 0);
    const std::vector<float> row{0.0f, 0.25f, 0.75f, 1.0f};
    for (std::int64_t y = 0; y < 4; ++y) {
      for (std::int64_t x = 0; x < 4; ++x) CHECK(up.at({y, x}) == doctest::Approx(row[x]).epsilon(1e-7));
    }
    Tensor<float> c({7, 7}, -0.2f);
    const auto cu = upsample_bilinear(frame_video(c), 20);
    for (float v : cu.vec()) CHECK(v == doctest::Approx(-0.2f).epsilon(1e-6));
  }

  TEST_CASE("smooth content survives the round trip") {
    Tensor<float> f({128, 128});
    for (std::int64_t y = 0; y < 128; ++y) {
      for (std::int64_t x = 0; x < 128; ++x) {
        f.at({y, x}) = static_cast<float>(0.8 * std::sin(x / 20.0) * std::cos(y / 25.0));
      }
    }
    const auto back = upsample_bilinear(downsample_video(frame_video(f), 56), 128);
    CHECK(oracle::max_abs_diff(frame_of(back, 0), f) < 0.1);
  }

  TEST_CASE("super-resolution conditioning") {
    const auto low = oracle::random_tensor<float>({2, 1, 8, 8}, 4);
    const auto eps = oracle::normal_tensor<float>({2, 1, 16, 16}, 5);
    const auto x = fixture::blocky_condition(32, 32, 6);
    const auto plain = sr_condition_assembly(low, x, eps, 0.0, 16);
    CHECK(plain.lowres == upsample_bilinear(low, 16));
    CHECK(plain.semantic.onehot.shape() == Shape{kNumClasses, 16, 16});
    const auto noisy = sr_condition_assembly(low, x, eps, 0.1, 16);
    for (std::int64_t i = 0; i < eps.numel(); ++i) {
      CHECK(noisy.lowres[i] == doctest::Approx(plain.lowres[i] + 0.1f * eps[i]).epsilon(1e-6));
    }
    const auto r = resize_condition(x, 16);
    for (std::int64_t y = 0; y < 16; ++y) {
      for (std::int64_t xx = 0; xx < 16; ++xx) {
        float s = 0;
        for (int c = 0; c < kNumClasses; ++c) s += r.onehot.at({c, y, xx});
        CHECK(s == 1.0f);
      }
    }
  }

  TEST_CASE("call counts, shapes and base-stage independence") {
    const auto bs = build_schedule(7), ss = build_schedule(5);
    CascadeConfig cc;
    cc.base_hw = 16;
    cc.target_hw = 32;
    cc.base_sampler.seed = 1;
    cc.sr_sampler.seed = 2;
    int base_calls = 0, sr_calls = 0, factories = 0;
    const auto base = counting_zero(base_calls);
    const SrModelFactory sr = [&](const Video& lowres) {
      ++factories;
      CHECK(lowres.shape() == Shape{3, 1, 32, 32});
      return counting_zero(sr_calls);
    };
    const auto x = fixture::blocky_condition(32, 32, 3);
    const auto r = cascade_sample(x, 3, 1, base, bs, sr, ss, cc);
    CHECK(r.base.shape() == Shape{3, 1, 16, 16});
    CHECK(r.final.shape() == Shape{3, 1, 32, 32});
    CHECK(base_calls == 14);
    CHECK(sr_calls == 10);
    CHECK(factories == 1);
    CHECK(cascade_base_sample(x, 3, 1, base, bs, cc) == r.base);

    // A different SR seed leaves the base stage untouched.
    auto cc2 = cc;
    cc2.sr_sampler.seed = 77;
    const auto r2 = cascade_sample(x, 3, 1, base, bs, sr, ss, cc2);
    CHECK(r2.base == r.base);
    CHECK_FALSE(r2.final == r.final);
  }

  TEST_CASE("failures name their stage") {
    const auto s = build_schedule(3);
    CascadeConfig cc;
    cc.base_hw = 8;
    cc.target_hw = 16;
    const auto x = fixture::blocky_condition(16, 16, 1);
    const EpsModel bad = [](const Video&, const SemanticCondition&, int) -> Video { throw NumericFault("boom"); };
    int n = 0;
    const auto ok = counting_zero(n);
    try {
      cascade_sample(x, 2, 1, bad, s, [&](const Video&) { return ok; }, s, cc);
      FAIL("expected failure");
    } catch (const std::exception& e) {
      CHECK(std::string(e.what()).rfind("base stage: ", 0) == 0);
    }
    try {
      cascade_sample(x, 2, 1, ok, s, [&](const Video&) { return bad; }, s, cc);
      FAIL("expected failure");
    } catch (const std::exception& e) {
      CHECK(std::string(e.what()).rfind("super-resolution stage: ", 0) == 0);
    }
  }

  TEST_CASE("config validation") {
    CascadeConfig cc;
    CHECK(cc.base_hw == 56);
    CHECK(cc.target_hw == 128);
    CHECK(cc.validation_errors().empty());
    cc.base_hw = 200;
    cc.sr_noise_aug_level = -1;
    CHECK(cc.validation_errors().size() >= 2);
  }
}
