// echosyn command-line entry points: make-toy-data, convert-camus, train, sample, evaluate.
// Exit codes: 0 success, 1 validation error, 2 runtime failure.

#include <CLI11.hpp>

#include <cmath>
#include <cstdio>
#include <fstream>
#include <iostream>
#include <memory>
#include <optional>
#include <sstream>
#include <string>
#include <vector>

#include "camus.hpp"
#include "echosyn/cascade.hpp"
#include "echosyn/config.hpp"
#include "echosyn/dataset.hpp"
#include "echosyn/image_io.hpp"
#include "echosyn/metrics.hpp"
#include "echosyn/sampler.hpp"
#include "echosyn/trainer.hpp"

namespace fs = std::filesystem;
using nlohmann::json;
using namespace echosyn;

namespace {

constexpr int kExitValidation = 1;
constexpr int kExitRuntime = 2;

// Bad input detected before any work starts.
class UsageError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

std::string scale_str(double s) {
  std::ostringstream os;
  os << s;
  auto out = os.str();
  if (out.find_first_of(".en") == std::string::npos) out += ".0";
  return out;
}

void write_text(const fs::path& p, const std::string& text) {
  std::ofstream out(p);
  out << text;
  if (!out) throw IoError("cannot write " + p.string());
}

// Resolved configuration plus code fingerprint, written into every output directory.
void write_run_info(const fs::path& dir, const json& config) {
  fs::create_directories(dir);
  write_text(dir / "config.json", config.dump(2) + "\n");
  write_text(dir / "VERSION", version_fingerprint() + "\n");
}

// defaults < file < flags; flags arrive as a JSON overlay.
RunConfig resolve_config(const std::string& path, const json& overlay) {
  RunConfig rc = path.empty() ? RunConfig{} : load_run_config(path);
  std::vector<std::string> errs;
  merge_json(rc, overlay, errs);
  if (!errs.empty()) throw ConfigParseError(errs);
  return rc;
}

void require_valid(const RunConfig& rc) {
  auto errs = rc.validation_errors();
  if (!errs.empty()) throw ConfigParseError(errs);
}

// Sets overlay[section][key] only when the flag was given on the command line.
template <typename V>
void overlay_flag(json& overlay, const CLI::Option* opt, const char* section, const char* key, const V& value) {
  if (opt != nullptr && opt->count() > 0) overlay[section][key] = value;
}

LabelMap read_label_map(const fs::path& p) {
  if (!fs::is_regular_file(p)) throw UsageError("label map not found: " + p.string());
  const auto img = read_png_gray(p);
  for (auto v : img.pixels) {
    if (v >= kNumClasses) {
      throw UsageError(p.string() + ": class id " + std::to_string(v) + " outside 0.." + std::to_string(kNumClasses - 1));
    }
  }
  return LabelMap{img.height, img.width, img.pixels};
}

Checkpoint read_checkpoint(const fs::path& p) {
  if (!fs::exists(p)) throw UsageError("checkpoint not found: " + p.string());
  return load_checkpoint(p);
}

GrayImage to_gray(const Video& v, std::int64_t k) {
  const auto h = v.dim(2), w = v.dim(3);
  GrayImage img{h, w, std::vector<std::uint8_t>(static_cast<std::size_t>(h * w))};
  const float* src = v.data() + k * v.dim(1) * h * w;
  for (std::int64_t i = 0; i < h * w; ++i) img.pixels[i] = unit_to_gray(src[i]);
  return img;
}

void write_video_frames(const Video& v, const fs::path& dir) {
  fs::create_directories(dir);
  char name[32];
  for (std::int64_t k = 0; k < v.dim(0); ++k) {
    std::snprintf(name, sizeof name, "frame_%04lld.png", static_cast<long long>(k));
    write_png_gray(dir / name, to_gray(v, k));
  }
}

// All frames side by side.
void write_preview(const Video& v, const fs::path& p) {
  const auto k = v.dim(0), h = v.dim(2), w = v.dim(3);
  GrayImage strip{h, k * w, std::vector<std::uint8_t>(static_cast<std::size_t>(h * k * w))};
  for (std::int64_t f = 0; f < k; ++f) {
    const auto img = to_gray(v, f);
    for (std::int64_t y = 0; y < h; ++y) {
      std::copy_n(img.pixels.data() + y * w, w, strip.pixels.data() + y * k * w + f * w);
    }
  }
  write_png_gray(p, strip);
}

std::vector<PatientRecord> load_clean(const fs::path& root) {
  auto res = load_dataset(root);
  for (const auto& w : res.warnings) std::cerr << "warning: " << w << "\n";
  for (const auto& e : res.errors) std::cerr << "skipping " << e.path.string() << ": " << e.message << "\n";
  if (res.records.empty()) throw DatasetError(root.string() + ": no usable patient records");
  return std::move(res.records);
}

std::vector<std::string> ids_of(const std::vector<PatientRecord>& recs) {
  std::vector<std::string> ids;
  for (const auto& r : recs) ids.push_back(r.patient_id);
  return ids;
}

const std::vector<std::string>& split_part(const DatasetSplit& s, const std::string& name) {
  if (name == "train") return s.train;
  if (name == "val") return s.val;
  if (name == "test") return s.test;
  throw UsageError("unknown split '" + name + "' (train, val or test)");
}

// ---------------------------------------------------------------------------
// make-toy-data

struct ToyArgs {
  ToyOptions opts;
  std::string out;
};

int cmd_make_toy_data(const ToyArgs& a) {
  std::vector<std::string> errs;
  const int div = NetConfig{}.spatial_divisor();
  if (a.opts.patients < 1) errs.push_back("--patients must be >= 1");
  if (a.opts.frames < 2) errs.push_back("--frames must be >= 2");
  if (a.opts.size < 16 || a.opts.size % div != 0) {
    errs.push_back("--size must be a multiple of " + std::to_string(div) + " and at least 16, got " +
                   std::to_string(a.opts.size));
  }
  if (fs::exists(a.out) && !fs::is_directory(a.out)) errs.push_back("--out exists and is not a directory");
  if (!errs.empty()) throw ConfigParseError(errs);

  toy_generate(a.opts, a.out);
  const auto res = load_dataset(a.out);
  if (!res.errors.empty()) throw DatasetError("generated data failed validation: " + res.errors.front().message);
  write_run_info(a.out, json{{"toy", {{"patients", a.opts.patients},
                                     {"frames", a.opts.frames},
                                     {"size", a.opts.size},
                                     {"seed", a.opts.seed}}}});
  std::cout << "wrote " << res.records.size() << " patients, K=" << a.opts.frames << ", " << a.opts.size << "x"
            << a.opts.size << " to " << a.out << "\n";
  return 0;
}

// ---------------------------------------------------------------------------
// convert-camus

struct CamusArgs {
  std::string in, out;
  int size = 128;
};

int cmd_convert_camus(const CamusArgs& a) {
  if (!fs::is_directory(a.in)) throw UsageError("--in is not a directory: " + a.in);
  if (a.size < 16) throw UsageError("--size must be at least 16");
  const auto dirs = camus::find_patients(a.in);
  if (dirs.empty()) throw UsageError(a.in + ": no patient directories with Info_2CH.cfg");
  int ok = 0, failed = 0;
  for (const auto& d : dirs) {
    try {
      write_patient(camus::convert_patient(d, a.size), fs::path(a.out) / d.filename());
      ++ok;
    } catch (const camus::FormatError& e) {
      std::cerr << "skipping " << d.string() << ": " << e.what() << "\n";
      ++failed;
    }
  }
  write_run_info(a.out, json{{"convert_camus", {{"source", fs::absolute(a.in).string()}, {"size", a.size}}}});
  std::cout << "converted " << ok << " of " << dirs.size() << " patients (" << a.size << "x" << a.size << ") to "
            << a.out << "\n";
  return failed == 0 ? 0 : kExitRuntime;
}

// ---------------------------------------------------------------------------
// train

struct TrainArgs {
  std::string config, data, out, variant, condition_mode;
  int frames = 0, batch_size = 0;
  std::int64_t steps = 0;
  double lr = 0;
  std::uint64_t seed = 0;
  bool resume = false;
  const CLI::Option *o_data, *o_variant, *o_cond, *o_frames, *o_steps, *o_batch, *o_lr, *o_seed;
};

int cmd_train(const TrainArgs& a) {
  json overlay = json::object();
  overlay_flag(overlay, a.o_data, "data", "root", a.data);
  overlay_flag(overlay, a.o_variant, "train", "variant", a.variant);
  overlay_flag(overlay, a.o_cond, "model", "condition_mode", a.condition_mode);
  overlay_flag(overlay, a.o_frames, "train", "frames", a.frames);
  overlay_flag(overlay, a.o_steps, "train", "max_steps", a.steps);
  overlay_flag(overlay, a.o_batch, "train", "batch_size", a.batch_size);
  overlay_flag(overlay, a.o_lr, "train", "learning_rate", a.lr);
  overlay_flag(overlay, a.o_seed, "train", "seed", a.seed);
  auto rc = resolve_config(a.config, overlay);
  // The super-resolution stage always reads the low-resolution video as extra input channels.
  if (rc.train.variant == ModelVariant::kCascadeSr && rc.model.extra_input_channels == 0) {
    rc.model.extra_input_channels = rc.model.in_channels;
  }
  auto errs = rc.validation_errors();
  if (rc.data.root.empty()) errs.push_back("data.root is required (--data)");
  if (rc.train.max_steps < 1) errs.push_back("train.max_steps must be positive (--steps)");
  if (!errs.empty()) throw ConfigParseError(errs);

  const auto records = load_clean(rc.data.root);
  const auto split = patient_split(ids_of(records), rc.data.split, rc.data.split_seed);
  const auto examples = make_examples(select_records(records, split.train), rc.train);

  write_run_info(a.out, to_json(rc));
  write_text(fs::path(a.out) / "split.json",
             json{{"train", split.train}, {"val", split.val}, {"test", split.test}}.dump(2) + "\n");
  std::cout << "training " << to_string(rc.train.variant) << " on " << examples.size() << " patients, K="
            << rc.train.frames << ", T=" << rc.schedule.steps << ", lr=" << rc.train.learning_rate
            << ", steps=" << rc.train.max_steps << "\n";
  const auto outcome = run_training(rc.model, rc.train, rc.schedule.build(), examples, a.out, a.resume, &std::cout);
  std::cout << "finished at step " << outcome.final.step << ", checkpoint " << (fs::path(a.out) / "latest.bin").string()
            << "\n";
  return 0;
}

// ---------------------------------------------------------------------------
// sample

struct SampleArgs {
  std::string config, checkpoint, sr_checkpoint, label_map, out;
  int n = 1;
  std::uint64_t seed = 0;
  double guidance_scale = 7.0;
  bool cascade = false;
  const CLI::Option *o_n, *o_seed, *o_scale;
};

json sample_overlay(const CLI::Option* o_n, int n, const CLI::Option* o_seed, std::uint64_t seed,
                    const CLI::Option* o_scale, double scale) {
  json overlay = json::object();
  overlay_flag(overlay, o_n, "sample", "n", n);
  overlay_flag(overlay, o_seed, "sample", "seed", seed);
  overlay_flag(overlay, o_scale, "sample", "guidance_scale", scale);
  return overlay;
}

struct Generator {
  Checkpoint ck, sr_ck;
  std::unique_ptr<Denoiser<float>> net, sr_net;
  NoiseSchedule sched, sr_sched;
  bool cascade = false;

  std::int64_t frames() const { return ck.train.frames; }
  std::int64_t channels() const { return ck.net.in_channels; }
  std::int64_t output_hw(std::int64_t label_hw) const { return cascade ? sr_ck.train.target_hw : label_hw; }

  // Videos for one condition; replicate r uses the seeds derived from (base seed, condition, r).
  std::vector<CascadeResult> run(const SemanticCondition& x, std::size_t cond_index, int n, const RunConfig& rc) const {
    std::vector<CascadeResult> out;
    if (!cascade) {
      const Shape shape{frames(), channels(), x.onehot.dim(1), x.onehot.dim(2)};
      const auto model = denoiser_model(*net);
      auto sc = rc.sample.sampler(rc.schedule);
      for (int r = 0; r < n; ++r) {
        sc.seed = replicate_seed(rc.sample.seed, cond_index, r);  // same derivation as batch_sample
        out.push_back({{}, sample_video(model, x, shape, sched, sc)});
      }
      return out;
    }
    const SrModelFactory factory = [this](const Video& lowres) -> EpsModel {
      auto keep = std::make_shared<Video>(lowres);
      auto inner = denoiser_model(*sr_net, keep.get());
      return [keep, inner](const Video& y, const SemanticCondition& c, int t) { return inner(y, c, t); };
    };
    RunConfig stage = rc;
    stage.train.base_hw = ck.train.base_hw;
    stage.train.target_hw = sr_ck.train.target_hw;
    stage.train.sr_noise_aug_level = sr_ck.train.sr_noise_aug_level;
    for (int r = 0; r < n; ++r) {
      const auto cc = cascade_config(stage, replicate_seed(rc.sample.seed, 2 * cond_index, r),
                                     replicate_seed(rc.sample.seed, 2 * cond_index + 1, r));
      out.push_back(cascade_sample(x, frames(), channels(), denoiser_model(*net), sched, factory, sr_sched, cc));
    }
    return out;
  }
};

Generator make_generator(const std::string& checkpoint, const std::string& sr_checkpoint, bool cascade, bool use_ema) {
  Generator g;
  g.cascade = cascade;
  g.ck = read_checkpoint(checkpoint);
  if (cascade) {
    if (sr_checkpoint.empty()) throw UsageError("--cascade needs --sr-checkpoint");
    if (g.ck.train.variant != ModelVariant::kCascadeBase) {
      throw UsageError(checkpoint + " is a " + to_string(g.ck.train.variant) + " checkpoint, expected cascade_base");
    }
    g.sr_ck = read_checkpoint(sr_checkpoint);
    if (g.sr_ck.train.variant != ModelVariant::kCascadeSr) {
      throw UsageError(sr_checkpoint + " is a " + to_string(g.sr_ck.train.variant) + " checkpoint, expected cascade_sr");
    }
    if (g.sr_ck.train.frames != g.ck.train.frames) throw UsageError("base and super-resolution stages differ in K");
    g.sr_net = instantiate(g.sr_ck, use_ema);
    g.sr_sched = g.sr_ck.schedule;
  } else if (g.ck.train.variant == ModelVariant::kCascadeSr) {
    throw UsageError(checkpoint + " is a super-resolution stage; sample it through --cascade");
  }
  g.net = instantiate(g.ck, use_ema);
  g.sched = g.ck.schedule;
  return g;
}

json checkpoint_info(const Generator& g, const std::string& path, const std::string& sr_path) {
  json j{{"path", path}, {"step", g.ck.step}, {"variant", to_string(g.ck.train.variant)}, {"model", to_json(g.ck.net)},
         {"schedule_steps", g.sched.steps}};
  if (g.cascade) j["sr"] = {{"path", sr_path}, {"step", g.sr_ck.step}, {"model", to_json(g.sr_ck.net)}};
  return j;
}

int cmd_sample(const SampleArgs& a) {
  const auto labels = read_label_map(a.label_map);
  auto rc = resolve_config(a.config, sample_overlay(a.o_n, a.n, a.o_seed, a.seed, a.o_scale, a.guidance_scale));
  require_valid(rc);
  const auto gen = make_generator(a.checkpoint, a.sr_checkpoint, a.cascade, rc.sample.use_ema);

  std::cout << "guidance scale: " << scale_str(rc.sample.guidance_scale) << "\n";
  std::cout << "sampling " << rc.sample.n << " video(s), K=" << gen.frames() << ", T=" << gen.sched.steps
            << (gen.cascade ? " (cascade)" : "") << "\n";

  auto config = to_json(rc);
  config["checkpoint"] = checkpoint_info(gen, a.checkpoint, a.sr_checkpoint);
  config["label_map"] = fs::absolute(a.label_map).string();
  write_run_info(a.out, config);

  const auto videos = gen.run(one_hot_labels(labels), 0, rc.sample.n, rc);
  json manifest{{"label_map", fs::absolute(a.label_map).string()},
                {"guidance_scale", rc.sample.guidance_scale},
                {"seed", rc.sample.seed},
                {"cascade", gen.cascade},
                {"samples", json::array()}};
  char name[32];
  for (std::size_t r = 0; r < videos.size(); ++r) {
    std::snprintf(name, sizeof name, "sample_%04zu", r);
    const auto dir = fs::path(a.out) / name;
    const auto& v = videos[r].final;
    write_video_frames(v, dir);
    write_preview(v, dir / "preview.png");
    if (gen.cascade) write_video_frames(videos[r].base, dir / "base");
    manifest["samples"].push_back({{"dir", name}, {"frames", v.dim(0)}, {"height", v.dim(2)}, {"width", v.dim(3)}});
  }
  write_text(fs::path(a.out) / "manifest.json", manifest.dump(2) + "\n");
  std::cout << "wrote " << videos.size() << " video(s) to " << a.out << "\n";
  return 0;
}

// ---------------------------------------------------------------------------
// evaluate

struct EvalArgs {
  std::string config, checkpoint, sr_checkpoint, data, split = "test", extractor, standard_command, out;
  int n_per_map = 10, limit = 0;
  std::uint64_t seed = 0;
  double guidance_scale = 7.0;
  bool cascade = false;
  const CLI::Option *o_data, *o_extractor, *o_command, *o_n, *o_seed, *o_scale;
};

int cmd_evaluate(const EvalArgs& a) {
  json overlay = sample_overlay(nullptr, 0, a.o_seed, a.seed, a.o_scale, a.guidance_scale);
  overlay_flag(overlay, a.o_data, "data", "root", a.data);
  overlay_flag(overlay, a.o_extractor, "metrics", "extractor", a.extractor);
  overlay_flag(overlay, a.o_command, "metrics", "standard_command", a.standard_command);
  overlay_flag(overlay, a.o_n, "metrics", "n_per_map", a.n_per_map);
  auto rc = resolve_config(a.config, overlay);
  auto errs = rc.validation_errors();
  if (rc.data.root.empty()) errs.push_back("data.root is required (--data)");
  if (a.limit < 0) errs.push_back("--limit must be >= 0");
  if (!errs.empty()) throw ConfigParseError(errs);
  const auto gen = make_generator(a.checkpoint, a.sr_checkpoint, a.cascade, rc.sample.use_ema);

  const auto records = load_clean(rc.data.root);
  const auto split = patient_split(ids_of(records), rc.data.split, rc.data.split_seed);
  auto chosen = select_records(records, split_part(split, a.split));
  if (a.limit > 0 && chosen.size() > static_cast<std::size_t>(a.limit)) chosen.resize(static_cast<std::size_t>(a.limit));

  std::vector<EvalItem> items;
  for (const auto& r : chosen) {
    auto real = resample_frames(r, gen.frames());
    auto x = one_hot_labels(r.label_ed);
    const auto hw = gen.output_hw(r.height());
    if (real.dim(2) != hw || real.dim(3) != hw) {
      if (real.dim(2) < hw || r.height() != r.width()) {
        throw UsageError(r.patient_id + ": frames are " + std::to_string(r.height()) + "x" + std::to_string(r.width()) +
                         ", model output is " + std::to_string(hw) + "x" + std::to_string(hw));
      }
      real = downsample_video(real, hw);
    }
    items.push_back({r.patient_id, std::move(x), std::move(real)});
  }

  std::unique_ptr<FrameExtractor> frame_ex;
  std::unique_ptr<VideoExtractor> video_ex;
  if (rc.metrics.extractor == "toy") {
    frame_ex = std::make_unique<ToyFrameExtractor>(rc.metrics.extractor_seed);
    video_ex = std::make_unique<ToyVideoExtractor>(rc.metrics.extractor_seed);
  } else {
    const auto& cmd = rc.metrics.standard_command;
    frame_ex = std::make_unique<ExternalCommandExtractor>(cmd, "standard-frame:" + cmd, rc.metrics.standard_frame_dim);
    video_ex = std::make_unique<ExternalCommandExtractor>(cmd, "standard-video:" + cmd, rc.metrics.standard_video_dim);
  }

  auto config = to_json(rc);
  config["checkpoint"] = checkpoint_info(gen, a.checkpoint, a.sr_checkpoint);
  config["evaluate"] = {{"split", a.split}, {"maps", items.size()}};
  write_run_info(a.out, config);

  std::size_t next_map = 0;
  const BatchGenerator generate = [&](const std::vector<SemanticCondition>& conds, int n) {
    std::vector<Video> out;
    for (const auto& x : conds) {
      for (auto& r : gen.run(x, next_map, n, rc)) out.push_back(std::move(r.final));
      ++next_map;
    }
    return out;
  };
  SuiteOptions opts;
  opts.n_per_map = rc.metrics.n_per_map;
  opts.cond_label = gen.ck.net.condition_mode == ConditionMode::kSpade ? "SPADE" : "Concat";
  opts.model_label = gen.cascade ? "Cascade" : "DDPM";
  opts.config_fingerprint = version_fingerprint();
  std::cout << "evaluating " << items.size() << " " << a.split << " maps x " << opts.n_per_map << " replicates, "
            << "extractor " << rc.metrics.extractor << ", guidance scale " << scale_str(rc.sample.guidance_scale) << "\n";
  const auto report = evaluate_suite(generate, items, *frame_ex, *video_ex, opts, a.out);
  std::cout << report.table();
  if (!report.all_finite()) {
    std::cerr << "error: non-finite metric in report\n";
    return kExitRuntime;
  }
  return 0;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"echosyn: semantic-map-conditioned echocardiography video diffusion"};
  app.require_subcommand(1);
  app.set_version_flag("--version", version_fingerprint());

  ToyArgs toy;
  auto* c_toy = app.add_subcommand("make-toy-data", "Generate a synthetic dataset with the on-disk patient layout");
  c_toy->add_option("--patients", toy.opts.patients, "Number of patients")->capture_default_str();
  c_toy->add_option("--frames", toy.opts.frames, "Frames per cycle")->capture_default_str();
  c_toy->add_option("--size", toy.opts.size, "Frame height and width")->capture_default_str();
  c_toy->add_option("--seed", toy.opts.seed, "Generator seed")->capture_default_str();
  c_toy->add_option("--out", toy.out, "Output dataset root")->required();

  CamusArgs camus_args;
  auto* c_camus = app.add_subcommand("convert-camus", "Convert CAMUS 2CH MetaImage exports to the patient layout");
  c_camus->add_option("--in", camus_args.in, "CAMUS root (patient directories at any depth)")->required();
  c_camus->add_option("--out", camus_args.out, "Output dataset root")->required();
  c_camus->add_option("--size", camus_args.size, "Output height and width")->capture_default_str();

  TrainArgs tr;
  auto* c_train = app.add_subcommand("train", "Train a denoiser on the training split");
  c_train->add_option("--config", tr.config, "Run configuration (JSON)")->check(CLI::ExistingFile);
  tr.o_data = c_train->add_option("--data", tr.data, "Dataset root (data.root)");
  tr.o_variant = c_train->add_option("--variant", tr.variant, "ddpm | cascade_base | cascade_sr");
  tr.o_cond = c_train->add_option("--condition-mode", tr.condition_mode, "spade | concat");
  tr.o_frames = c_train->add_option("--frames", tr.frames, "Frames per clip (K)");
  tr.o_steps = c_train->add_option("--steps", tr.steps, "Optimizer steps (train.max_steps)");
  tr.o_batch = c_train->add_option("--batch-size", tr.batch_size, "Clips per step");
  tr.o_lr = c_train->add_option("--lr", tr.lr, "Learning rate");
  tr.o_seed = c_train->add_option("--seed", tr.seed, "Training seed");
  c_train->add_flag("--resume", tr.resume, "Continue from <out>/latest.bin");
  c_train->add_option("--out", tr.out, "Run directory")->required();

  SampleArgs sa;
  auto* c_sample = app.add_subcommand("sample", "Generate videos for one label map");
  c_sample->add_option("--config", sa.config, "Run configuration (JSON)")->check(CLI::ExistingFile);
  c_sample->add_option("--checkpoint", sa.checkpoint, "Trained checkpoint (base stage with --cascade)")->required();
  c_sample->add_option("--sr-checkpoint", sa.sr_checkpoint, "Super-resolution stage checkpoint");
  c_sample->add_option("--label-map", sa.label_map, "Label image with class ids 0..3")->required();
  sa.o_n = c_sample->add_option("--n", sa.n, "Videos to generate")->capture_default_str();
  sa.o_seed = c_sample->add_option("--seed", sa.seed, "Sampling seed")->capture_default_str();
  sa.o_scale = c_sample->add_option("--guidance-scale", sa.guidance_scale, "Guidance scale s")->capture_default_str();
  c_sample->add_flag("--cascade", sa.cascade, "Run the base and super-resolution stages");
  c_sample->add_option("--out", sa.out, "Output directory")->required();

  EvalArgs ev;
  auto* c_eval = app.add_subcommand("evaluate", "Generate for a split and report FID, FVD and SSIM");
  c_eval->add_option("--config", ev.config, "Run configuration (JSON)")->check(CLI::ExistingFile);
  c_eval->add_option("--checkpoint", ev.checkpoint, "Trained checkpoint (base stage with --cascade)")->required();
  c_eval->add_option("--sr-checkpoint", ev.sr_checkpoint, "Super-resolution stage checkpoint");
  c_eval->add_flag("--cascade", ev.cascade, "Evaluate the two-stage cascade");
  ev.o_data = c_eval->add_option("--data", ev.data, "Dataset root (data.root)");
  c_eval->add_option("--split", ev.split, "train | val | test")->capture_default_str();
  c_eval->add_option("--limit", ev.limit, "Use at most this many maps (0 = all)")->capture_default_str();
  ev.o_n = c_eval->add_option("--n-per-map", ev.n_per_map, "Replicates per map")->capture_default_str();
  ev.o_extractor = c_eval->add_option("--extractor", ev.extractor, "toy | standard");
  ev.o_command = c_eval->add_option("--standard-command", ev.standard_command, "Embedding command for standard");
  ev.o_seed = c_eval->add_option("--seed", ev.seed, "Sampling seed");
  ev.o_scale = c_eval->add_option("--guidance-scale", ev.guidance_scale, "Guidance scale s")->capture_default_str();
  c_eval->add_option("--out", ev.out, "Report directory")->required();

  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& e) {
    const int rc = app.exit(e);
    return rc == 0 ? 0 : kExitValidation;
  }

  try {
    if (*c_toy) return cmd_make_toy_data(toy);
    if (*c_camus) return cmd_convert_camus(camus_args);
    if (*c_train) return cmd_train(tr);
    if (*c_sample) return cmd_sample(sa);
    if (*c_eval) return cmd_evaluate(ev);
  } catch (const ConfigParseError& e) {
    std::cerr << "configuration error" << (e.errors.size() > 1 ? "s" : "") << ":\n";
    for (const auto& m : e.errors) std::cerr << "  " << m << "\n";
    return kExitValidation;
  } catch (const UsageError& e) {
    std::cerr << "error: " << e.what() << "\n";
    return kExitValidation;
  } catch (const ConfigError& e) {
    std::cerr << "configuration error: " << e.what() << "\n";
    return kExitValidation;
  } catch (const std::exception& e) {
    std::cerr << "error: " << e.what() << "\n";
    return kExitRuntime;
  }
  return 0;
}
