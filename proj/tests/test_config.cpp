#include <doctest.h>

#include <fstream>

#include "echosyn/config.hpp"
#include "oracles.hpp"

using namespace echosyn;
using nlohmann::json;

namespace {

std::string write_config(const std::filesystem::path& dir, const json& j) {
  const auto p = dir / "run.json";
  std::ofstream(p) << j.dump(2);
  return p.string();
}

}  // namespace

TEST_SUITE("config") {
  TEST_CASE("defaults") {
    const RunConfig rc;
    CHECK(rc.schedule.steps == 1000);
    CHECK(rc.schedule.beta_start == 1e-4);
    CHECK(rc.schedule.beta_end == 0.02);
    CHECK(rc.train.learning_rate == 1e-4);
    CHECK(rc.sample.guidance_scale == 7.0);
    CHECK(rc.metrics.n_per_map == 10);
    CHECK(rc.validation_errors().empty());
    CHECK(rc.schedule.build().steps == 1000);
  }

  TEST_CASE("file values override defaults and round-trip") {
    const auto dir = oracle::scratch_dir("config");
    const json j{{"model", {{"base_width", 16}, {"condition_mode", "concat"}, {"channel_multipliers", {1, 2}}}},
                 {"schedule", {{"steps", 200}, {"beta_end", 0.1}}},
                 {"train", {{"batch_size", 3}, {"variant", "cascade_base"}, {"lr_schedule", "cosine"}}},
                 {"sample", {{"guidance_scale", 2.5}}}};
    const auto rc = load_run_config(write_config(dir, j));
    CHECK(rc.model.base_width == 16);
    CHECK(rc.model.condition_mode == ConditionMode::kConcat);
    CHECK(rc.model.channel_multipliers == std::vector<int>{1, 2});
    CHECK(rc.model.groups == 8);  // untouched default
    CHECK(rc.schedule.steps == 200);
    CHECK(rc.train.batch_size == 3);
    CHECK(rc.train.variant == ModelVariant::kCascadeBase);
    CHECK(rc.train.lr_schedule == "cosine");
    CHECK(rc.sample.guidance_scale == 2.5);

    // The echoed form reloads to the same configuration.
    const auto echoed = to_json(rc);
    const auto again = load_run_config(write_config(dir, echoed));
    CHECK(to_json(again) == echoed);

    // Later overlays (command-line flags) win over the file.
    RunConfig over = rc;
    std::vector<std::string> errs;
    merge_json(over, json{{"train", {{"batch_size", 9}}}}, errs);
    CHECK(errs.empty());
    CHECK(over.train.batch_size == 9);
    CHECK(over.model.base_width == 16);
    std::filesystem::remove_all(dir);
  }

  TEST_CASE("every problem is reported") {
    const auto dir = oracle::scratch_dir("config-bad");
    const json j{{"model", {{"base_width", "wide"}, {"colour", 3}}},
                 {"train", {{"batch_size", 0}, {"learnin_rate", 1}}},
                 {"extras", true}};
    try {
      load_run_config(write_config(dir, j));
      FAIL("expected a parse error");
    } catch (const ConfigParseError& e) {
      const auto has = [&](const std::string& s) {
        for (const auto& m : e.errors) {
          if (m.find(s) != std::string::npos) return true;
        }
        return false;
      };
      CHECK(e.errors.size() >= 4);
      CHECK(has("model.colour"));
      CHECK(has("train.learnin_rate"));
      CHECK(has("extras"));
      CHECK(has("model.base_width"));
    }
    std::ofstream(dir / "broken.json") << "{ not json";
    CHECK_THROWS_AS(load_run_config((dir / "broken.json").string()), ConfigError);
    CHECK_THROWS_AS(load_run_config((dir / "missing.json").string()), ConfigError);
    std::filesystem::remove_all(dir);
  }

  TEST_CASE("cross-section validation") {
    RunConfig rc;
    rc.train.variant = ModelVariant::kCascadeSr;
    CHECK_FALSE(rc.validation_errors().empty());
    rc.model.extra_input_channels = rc.model.in_channels;
    CHECK(rc.validation_errors().empty());
    rc.schedule.beta_end = 2.0;
    rc.sample.guidance_scale = std::nan("");
    CHECK(rc.validation_errors().size() >= 2);
  }

  TEST_CASE("cascade settings and version") {
    RunConfig rc;
    rc.train.base_hw = 24;
    rc.train.target_hw = 64;
    const auto cc = cascade_config(rc, 5, 6);
    CHECK(cc.base_hw == 24);
    CHECK(cc.target_hw == 64);
    CHECK(cc.base_sampler.seed == 5);
    CHECK(cc.sr_sampler.seed == 6);
    CHECK(version_fingerprint().rfind("echosyn ", 0) == 0);
  }
}
