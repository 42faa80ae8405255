#include <doctest.h>

#include <cmath>
#include <fstream>
#include <limits>
#include <sstream>

#include "echosyn/trainer.hpp"
#include "fixtures.hpp"
#include "oracles.hpp"

using namespace echosyn;
namespace fs = std::filesystem;

namespace {

struct ToySet {
  fs::path dir;
  std::vector<PatientRecord> records;
  ToySet(int patients, int frames, int size, std::uint64_t seed) : dir(oracle::scratch_dir("trainer")) {
    toy_generate({patients, frames, size, seed}, dir);
    records = load_dataset(dir).records;
  }
  ~ToySet() { fs::remove_all(dir); }
};

TrainConfig small_train(std::uint64_t seed = 1) {
  TrainConfig tc;
  tc.batch_size = 2;
  tc.frames = 4;
  tc.seed = seed;
  tc.learning_rate = 1e-3;
  tc.ema_decay = 0.9;
  tc.max_steps = 4;
  tc.checkpoint_every = 2;
  return tc;
}

NetConfig small_net() {
  auto c = fixture::tiny_net();
  c.base_width = 4;
  c.groups = 2;
  c.spade_hidden = 4;
  return c;
}

double max_param_diff(const NamedArrays& a, const NamedArrays& b) {
  double d = 0;
  for (std::size_t i = 0; i < a.size(); ++i) d = std::max(d, oracle::max_abs_diff(a[i].second, b[i].second));
  return d;
}

}  // namespace

TEST_SUITE("trainer") {
  TEST_CASE("condition dropout probability") {
    const auto x = fixture::blocky_condition(4, 4, 1);
    std::mt19937_64 rng(2);
    for (int i = 0; i < 1000; ++i) {
      CHECK_FALSE(drop_condition(x, 0.0, rng).is_null);
      const auto d = drop_condition(x, 1.0, rng);
      CHECK(d.is_null);
      for (float v : d.onehot.vec()) CHECK(v == 0.0f);
    }
    const int n = 40000;
    int dropped = 0;
    for (int i = 0; i < n; ++i) dropped += drop_condition(x, 0.1, rng).is_null ? 1 : 0;
    const double se = std::sqrt(0.1 * 0.9 / n);
    CHECK(std::abs(dropped / static_cast<double>(n) - 0.1) < 4 * se);
  }

  TEST_CASE("examples for every variant") {
    ToySet data(2, 6, 32, 3);
    auto tc = small_train();
    auto ex = make_examples(data.records, tc);
    REQUIRE(ex.size() == 2);
    CHECK(ex[0].y0.shape() == Shape{4, 1, 32, 32});
    CHECK(ex[0].lowres.empty());
    tc.variant = ModelVariant::kCascadeBase;
    tc.base_hw = 16;
    tc.target_hw = 32;
    ex = make_examples(data.records, tc);
    CHECK(ex[0].y0.shape() == Shape{4, 1, 16, 16});
    CHECK(ex[0].x.onehot.shape() == Shape{kNumClasses, 16, 16});
    tc.variant = ModelVariant::kCascadeSr;
    ex = make_examples(data.records, tc);
    CHECK(ex[0].y0.shape() == Shape{4, 1, 32, 32});
    CHECK(ex[0].lowres.shape() == Shape{4, 1, 16, 16});
    tc.target_hw = 64;
    CHECK_THROWS_AS(make_examples(data.records, tc), ConfigError);
  }

  TEST_CASE("diffusion steps are drawn uniformly") {
    ToySet data(1, 4, 8, 4);
    auto tc = small_train(5);
    tc.batch_size = 250;
    tc.learning_rate = 0.0;
    tc.cond_drop_prob = 0.0;
    const auto ex = make_examples(data.records, tc);
    auto net = small_net();
    Trainer tr(net, tc, build_schedule(1000));
    std::vector<int> deciles(10, 0);
    int total = 0;
    for (int s = 0; s < 8; ++s) {
      const auto rep = tr.train_step(ex);
      CHECK(rep.dropped == 0);
      for (int t : rep.t_values) {
        REQUIRE(t >= 1);
        REQUIRE(t <= 1000);
        ++deciles[(t - 1) / 100];
        ++total;
      }
    }
    REQUIRE(total == 2000);
    double chi2 = 0;
    for (int c : deciles) chi2 += (c - 200.0) * (c - 200.0) / 200.0;
    CHECK(chi2 < 27.88);  // 99.9th percentile of chi-square with 9 degrees of freedom
  }

  TEST_CASE("steps are reproducible and seed dependent") {
    ToySet data(3, 4, 16, 6);
    const auto tc = small_train(7);
    const auto ex = make_examples(data.records, tc);
    const auto run = [&](std::uint64_t seed) {
      auto c = tc;
      c.seed = seed;
      Trainer tr(small_net(), c, build_schedule(50));
      std::vector<StepReport> reps;
      for (int i = 0; i < 3; ++i) reps.push_back(tr.train_step(ex));
      return std::make_pair(reps, tr.snapshot());
    };
    const auto [ra, a] = run(7);
    const auto [rb, b] = run(7);
    const auto [rc, c] = run(8);
    for (int i = 0; i < 3; ++i) {
      CHECK(ra[i].loss == rb[i].loss);
      CHECK(ra[i].t_values == rb[i].t_values);
      CHECK(ra[i].step == i + 1);
    }
    CHECK(max_param_diff(a.params, b.params) == 0.0);
    CHECK(max_param_diff(a.ema, b.ema) == 0.0);
    CHECK(max_param_diff(a.params, c.params) > 0.0);
  }

  TEST_CASE("zero learning rate leaves weights unchanged") {
    ToySet data(2, 4, 16, 8);
    auto tc = small_train();
    tc.learning_rate = 0.0;
    const auto ex = make_examples(data.records, tc);
    Trainer tr(small_net(), tc, build_schedule(50));
    const auto before = tr.snapshot();
    for (int i = 0; i < 3; ++i) tr.train_step(ex);
    const auto after = tr.snapshot();
    CHECK(max_param_diff(before.params, after.params) == 0.0);
    CHECK(max_param_diff(before.params, after.ema) < 1e-7);
    CHECK(max_param_diff(before.adam_v, after.adam_v) > 0.0);
  }

  TEST_CASE("cosine learning rate schedule") {
    TrainConfig tc;
    tc.learning_rate = 2e-3;
    tc.max_steps = 100;
    CHECK(tc.learning_rate_at(0) == 2e-3);
    CHECK(tc.learning_rate_at(77) == 2e-3);
    tc.lr_schedule = "cosine";
    CHECK(tc.learning_rate_at(0) == doctest::Approx(2e-3));
    CHECK(tc.learning_rate_at(50) == doctest::Approx(1e-3));
    CHECK(tc.learning_rate_at(25) == doctest::Approx(1e-3 * (1 + std::sqrt(0.5))));
    CHECK(tc.learning_rate_at(100) == doctest::Approx(0.0));
    CHECK(tc.learning_rate_at(150) == doctest::Approx(0.0));
    CHECK(tc.validation_errors().empty());
    tc.lr_schedule = "step";
    CHECK(tc.validation_errors().size() == 1);

    // past max_steps the rate is zero, so a further step only moves the moments
    ToySet data(2, 4, 16, 12);
    auto run = small_train();
    run.lr_schedule = "cosine";
    run.max_steps = 1;
    const auto ex = make_examples(data.records, run);
    Trainer tr(small_net(), run, build_schedule(50));
    tr.train_step(ex);
    const auto before = tr.snapshot();
    tr.train_step(ex);
    const auto after = tr.snapshot();
    CHECK(max_param_diff(before.params, after.params) == 0.0);
    CHECK(max_param_diff(before.adam_m, after.adam_m) > 0.0);
  }

  TEST_CASE("first Adam step, clipping and EMA update") {
    ToySet data(2, 4, 16, 9);
    auto tc = small_train(11);
    tc.grad_clip_norm = 1e-3;  // small enough to bind
    const auto ex = make_examples(data.records, tc);
    Trainer tr(small_net(), tc, build_schedule(50));
    const auto w0 = tr.snapshot();
    const auto rep = tr.train_step(ex);
    const auto w1 = tr.snapshot();
    REQUIRE(rep.grad_norm > tc.grad_clip_norm);

    double m_sq = 0;
    std::size_t moved = 0;
    for (std::size_t i = 0; i < w0.params.size(); ++i) {
      const auto &p0 = w0.params[i].second, &p1 = w1.params[i].second, &m = w1.adam_m[i].second,
                 &v = w1.adam_v[i].second, &e = w1.ema[i].second;
      for (std::int64_t j = 0; j < p0.numel(); ++j) {
        const double g = m[j] / 0.1;  // m_1 = (1 - beta1) g
        m_sq += g * g;
        CHECK(v[j] == doctest::Approx(0.001 * g * g).epsilon(1e-4));
        const double expect = p0[j] - tc.learning_rate * g / (std::abs(g) + 1e-8);
        if (std::abs(g) > 1e-6) {
          CHECK(p1[j] == doctest::Approx(expect).epsilon(1e-5));
          ++moved;
        }
        CHECK(e[j] == doctest::Approx(0.9 * p0[j] + 0.1 * p1[j]).epsilon(1e-5));
      }
    }
    CHECK(moved > 0);
    CHECK(std::sqrt(m_sq) == doctest::Approx(tc.grad_clip_norm).epsilon(1e-3));
  }

  TEST_CASE("non-finite loss is reported with context") {
    ToySet data(1, 4, 8, 10);
    const auto tc = small_train();
    const auto ex = make_examples(data.records, tc);
    Trainer tr(small_net(), tc, build_schedule(20));
    auto p = tr.net().parameters().entries().front().second;
    p.mutable_value()[0] = std::numeric_limits<float>::quiet_NaN();
    try {
      tr.train_step(ex);
      FAIL("expected a numeric fault");
    } catch (const NumericFault& e) {
      const std::string msg = e.what();
      CHECK(msg.find("t values") != std::string::npos);
      CHECK(msg.find("parameter norm") != std::string::npos);
    }
  }

  TEST_CASE("checkpoint round trip and corruption") {
    ToySet data(2, 4, 16, 12);
    const auto tc = small_train(13);
    const auto ex = make_examples(data.records, tc);
    Trainer tr(small_net(), tc, build_schedule(30));
    tr.train_step(ex);
    tr.train_step(ex);
    const auto snap = tr.snapshot();
    const auto path = data.dir / "c.bin";
    save_checkpoint(snap, path);
    CHECK_FALSE(fs::exists(data.dir / "c.bin.tmp"));
    const auto back = load_checkpoint(path);
    CHECK(back.step == 2);
    CHECK(back.schedule.betas == snap.schedule.betas);
    CHECK(back.train.seed == 13);
    CHECK(back.net.base_width == snap.net.base_width);
    CHECK(max_param_diff(back.params, snap.params) == 0.0);
    CHECK(max_param_diff(back.ema, snap.ema) == 0.0);
    CHECK(max_param_diff(back.adam_v, snap.adam_v) == 0.0);

    const auto y = oracle::normal_tensor<float>({4, 1, 16, 16}, 1);
    CHECK(instantiate(back, false)->predict(y, ex[0].x, 5) == tr.net().predict(y, ex[0].x, 5));
    CHECK_FALSE(instantiate(back, true)->predict(y, ex[0].x, 5) == tr.net().predict(y, ex[0].x, 5));

    std::string bytes;
    {
      std::ifstream in(path, std::ios::binary);
      bytes.assign(std::istreambuf_iterator<char>(in), {});
    }
    const auto write = [&](const std::string& b) {
      std::ofstream out(data.dir / "bad.bin", std::ios::binary);
      out << b;
    };
    write(bytes.substr(0, bytes.size() - 100));
    try {
      load_checkpoint(data.dir / "bad.bin");
      FAIL("expected truncation error");
    } catch (const CheckpointError& e) {
      CHECK(std::string(e.what()).find("truncated") != std::string::npos);
    }
    auto flipped = bytes;
    flipped[bytes.size() - 20] ^= 0x5a;
    write(flipped);
    CHECK_THROWS_AS(load_checkpoint(data.dir / "bad.bin"), CheckpointError);
    auto versioned = bytes;
    versioned[8] = 9;
    write(versioned);
    try {
      load_checkpoint(data.dir / "bad.bin");
      FAIL("expected version error");
    } catch (const CheckpointError& e) {
      CHECK(std::string(e.what()).find("version") != std::string::npos);
    }
    write("not a checkpoint at all");
    CHECK_THROWS_AS(load_checkpoint(data.dir / "bad.bin"), CheckpointError);
  }

  TEST_CASE("resuming matches an uninterrupted run") {
    ToySet data(3, 4, 16, 14);
    const auto ex = make_examples(data.records, small_train());
    const auto sched = build_schedule(40);
    auto tc = small_train(15);
    tc.max_steps = 4;
    const auto straight = run_training(small_net(), tc, sched, ex, data.dir / "a");
    CHECK(straight.history.size() == 4);
    CHECK(fs::exists(data.dir / "a" / "ckpt_00000002.bin"));
    CHECK(fs::exists(data.dir / "a" / "ckpt_00000004.bin"));
    CHECK(fs::exists(data.dir / "a" / "latest.bin"));

    auto first = tc;
    first.max_steps = 2;
    run_training(small_net(), first, sched, ex, data.dir / "b");
    const auto resumed = run_training(small_net(), tc, sched, ex, data.dir / "b", true);
    CHECK(resumed.history.size() == 2);
    CHECK(resumed.final.step == 4);
    CHECK(max_param_diff(resumed.final.params, straight.final.params) == 0.0);
    CHECK(max_param_diff(resumed.final.ema, straight.final.ema) == 0.0);

    std::ifstream log(data.dir / "b" / "metrics.jsonl");
    int lines = 0;
    for (std::string l; std::getline(log, l);) ++lines;
    CHECK(lines == 4);

    auto other = small_net();
    other.base_width = 8;
    other.groups = 4;
    CHECK_THROWS_AS(run_training(other, tc, sched, ex, data.dir / "b", true), ConfigError);
    auto none = tc;
    none.max_steps = 0;
    CHECK_THROWS_AS(run_training(small_net(), none, sched, ex, data.dir / "c"), ConfigError);
  }

  TEST_CASE("config validation and names") {
    TrainConfig tc;
    CHECK(tc.learning_rate == 1e-4);
    CHECK(tc.cond_drop_prob == 0.1);
    tc.batch_size = 0;
    tc.cond_drop_prob = 2;
    tc.frames = 1;
    CHECK(tc.validation_errors().size() == 3);
    for (auto v : {ModelVariant::kDdpm, ModelVariant::kCascadeBase, ModelVariant::kCascadeSr}) {
      CHECK(model_variant_from_string(to_string(v)) == v);
    }
    CHECK_THROWS_AS(model_variant_from_string("gan"), ConfigError);
  }
}
