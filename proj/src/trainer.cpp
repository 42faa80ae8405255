#include "echosyn/trainer.hpp"

#include <chrono>
#include <cmath>
#include <cstring>
#include <fstream>
#include <iomanip>
#include <numbers>
#include <sstream>

#include <json.hpp>

#include "echosyn/cascade.hpp"
#include "echosyn/config.hpp"
#include "echosyn/sampler.hpp"

namespace echosyn {

namespace fs = std::filesystem;
using nlohmann::json;

std::string to_string(ModelVariant v) {
  switch (v) {
    case ModelVariant::kDdpm:
      return "ddpm";
    case ModelVariant::kCascadeBase:
      return "cascade_base";
    case ModelVariant::kCascadeSr:
      return "cascade_sr";
  }
  return "?";
}

ModelVariant model_variant_from_string(const std::string& s) {
  if (s == "ddpm") return ModelVariant::kDdpm;
  if (s == "cascade_base") return ModelVariant::kCascadeBase;
  if (s == "cascade_sr") return ModelVariant::kCascadeSr;
  throw ConfigError("unknown model variant '" + s + "' (expected ddpm, cascade_base or cascade_sr)");
}

std::vector<std::string> TrainConfig::validation_errors() const {
  std::vector<std::string> errs;
  if (!(learning_rate >= 0.0) || !std::isfinite(learning_rate)) errs.push_back("train.learning_rate must be >= 0");
  if (batch_size < 1) errs.push_back("train.batch_size must be >= 1");
  if (max_steps < 0) errs.push_back("train.max_steps must be >= 0");
  if (!(cond_drop_prob >= 0.0 && cond_drop_prob <= 1.0)) errs.push_back("train.cond_drop_prob must lie in [0, 1]");
  if (!(ema_decay >= 0.0 && ema_decay <= 1.0)) errs.push_back("train.ema_decay must lie in [0, 1]");
  if (!std::isfinite(grad_clip_norm)) errs.push_back("train.grad_clip_norm must be finite");
  if (lr_schedule != "constant" && lr_schedule != "cosine") {
    errs.push_back("train.lr_schedule must be constant or cosine, got '" + lr_schedule + "'");
  }
  if (frames < 2) errs.push_back("train.frames must be >= 2");
  if (checkpoint_every < 1) errs.push_back("train.checkpoint_every must be >= 1");
  if (log_every < 1) errs.push_back("train.log_every must be >= 1");
  if (base_hw < 1 || base_hw >= target_hw) errs.push_back("train.base_hw must be positive and below train.target_hw");
  if (!(sr_noise_aug_level >= 0.0 && sr_noise_aug_level < 1.0)) {
    errs.push_back("train.sr_noise_aug_level must lie in [0, 1)");
  }
  return errs;
}

double TrainConfig::learning_rate_at(std::int64_t step) const {
  if (lr_schedule != "cosine" || max_steps < 1) return learning_rate;
  const double frac = std::min(1.0, static_cast<double>(step) / static_cast<double>(max_steps));
  return 0.5 * learning_rate * (1.0 + std::cos(std::numbers::pi * frac));
}

std::vector<TrainExample> make_examples(const std::vector<PatientRecord>& records, const TrainConfig& cfg) {
  std::vector<TrainExample> out;
  out.reserve(records.size());
  for (const auto& rec : records) {
    TrainExample ex;
    ex.patient_id = rec.patient_id;
    ex.y0 = resample_frames(rec, cfg.frames);
    ex.x = one_hot_labels(rec.label_ed);
    if (cfg.variant != ModelVariant::kDdpm && rec.height() != rec.width()) {
      throw ConfigError(rec.patient_id + ": cascade stages need square frames");
    }
    if (cfg.variant == ModelVariant::kCascadeBase) {
      if (rec.height() < cfg.base_hw) throw ConfigError(rec.patient_id + ": frames smaller than train.base_hw");
      ex.y0 = downsample_video(ex.y0, cfg.base_hw);
      ex.x = resize_condition(ex.x, cfg.base_hw);
    } else if (cfg.variant == ModelVariant::kCascadeSr) {
      if (rec.height() < cfg.target_hw) throw ConfigError(rec.patient_id + ": frames smaller than train.target_hw");
      ex.y0 = downsample_video(ex.y0, cfg.target_hw);
      ex.x = resize_condition(ex.x, cfg.target_hw);
      ex.lowres = downsample_video(ex.y0, cfg.base_hw);
    }
    out.push_back(std::move(ex));
  }
  return out;
}

template <typename T>
ag::Var<T> example_loss(const Denoiser<T>& net, const Tensor<T>& y0, const SemanticCondition& x, int t,
                        const Tensor<T>& eps, const NoiseSchedule& sched, const Tensor<T>* lowres) {
  const auto y_t = q_sample(y0, t, eps, sched);
  return ag::mse(net.forward(y_t, x, t, lowres), ag::Var<T>(eps));
}

template ag::Var<float> example_loss(const Denoiser<float>&, const Tensor<float>&, const SemanticCondition&, int,
                                     const Tensor<float>&, const NoiseSchedule&, const Tensor<float>*);
template ag::Var<double> example_loss(const Denoiser<double>&, const Tensor<double>&, const SemanticCondition&, int,
                                      const Tensor<double>&, const NoiseSchedule&, const Tensor<double>*);

// ---------------------------------------------------------------------------
// Trainer

Trainer::Trainer(NetConfig net, TrainConfig train, NoiseSchedule sched)
    : train_(std::move(train)), sched_(std::move(sched)), net_(std::move(net), train_.seed) {
  if (auto errs = train_.validation_errors(); !errs.empty()) throw ConfigError(errs.front());
  if (sched_.steps < 1) throw ConfigError("training needs a non-empty noise schedule");
  for (const auto& [path, p] : net_.parameters().entries()) {
    m_.emplace_back(p.shape(), 0.0f);
    v_.emplace_back(p.shape(), 0.0f);
    if (train_.use_ema) ema_.push_back(p.value());
  }
}

namespace {

void copy_arrays(const NamedArrays& src, std::vector<Tensor<float>>& dst, const ParameterStore<float>& ps,
                 const char* what) {
  if (src.size() != ps.size()) throw CheckpointError(std::string(what) + ": parameter inventory size differs");
  dst.clear();
  for (std::size_t i = 0; i < src.size(); ++i) {
    const auto& [path, p] = ps.entries()[i];
    if (src[i].first != path || src[i].second.shape() != p.shape()) {
      throw CheckpointError(std::string(what) + ": mismatch at " + path);
    }
    dst.push_back(src[i].second);
  }
}

NamedArrays name_arrays(const std::vector<Tensor<float>>& arrays, const ParameterStore<float>& ps) {
  NamedArrays out;
  for (std::size_t i = 0; i < arrays.size(); ++i) out.emplace_back(ps.entries()[i].first, arrays[i]);
  return out;
}

}  // namespace

Trainer::Trainer(const Checkpoint& ckpt) : Trainer(ckpt.net, ckpt.train, ckpt.schedule) {
  std::vector<Tensor<float>> params;
  copy_arrays(ckpt.params, params, net_.parameters(), "parameters");
  for (std::size_t i = 0; i < params.size(); ++i) {
    auto p = net_.parameters().entries()[i].second;
    p.mutable_value() = params[i];
  }
  copy_arrays(ckpt.adam_m, m_, net_.parameters(), "Adam first moments");
  copy_arrays(ckpt.adam_v, v_, net_.parameters(), "Adam second moments");
  if (train_.use_ema) {
    copy_arrays(ckpt.ema, ema_, net_.parameters(), "EMA weights");
  } else if (!ckpt.ema.empty()) {
    throw CheckpointError("checkpoint holds EMA weights but its config disables EMA");
  }
  step_ = ckpt.step;
}

std::mt19937_64 Trainer::step_rng(std::uint64_t stream) const {
  return std::mt19937_64(replicate_seed(train_.seed, static_cast<std::uint64_t>(step_), stream));
}

std::vector<std::size_t> Trainer::select_batch(std::size_t dataset_size) const {
  if (dataset_size == 0) throw ContractError("cannot draw a batch from an empty dataset");
  auto rng = step_rng(0);
  std::uniform_int_distribution<std::size_t> pick(0, dataset_size - 1);
  std::vector<std::size_t> idx(static_cast<std::size_t>(train_.batch_size));
  for (auto& i : idx) i = pick(rng);
  return idx;
}

StepReport Trainer::train_step(const std::vector<TrainExample>& data) {
  const auto idx = select_batch(data.size());
  std::vector<const TrainExample*> batch;
  for (auto i : idx) batch.push_back(&data[i]);
  return train_step(batch);
}

StepReport Trainer::train_step(const std::vector<const TrainExample*>& batch) {
  if (batch.empty()) throw ContractError("train_step needs a non-empty batch");
  const bool sr = train_.variant == ModelVariant::kCascadeSr;
  auto rng = step_rng(1);
  std::uniform_int_distribution<int> pick_t(1, sched_.steps);
  auto& ps = net_.parameters();
  ps.zero_grad();

  StepReport rep;
  const float inv_b = 1.0f / static_cast<float>(batch.size());
  for (const TrainExample* ex : batch) {
    if (ex->y0.shape() != batch.front()->y0.shape()) throw ContractError("batch examples must share one shape");
    const int t = pick_t(rng);
    const Video eps = normal_video(ex->y0.shape(), rng);
    SemanticCondition x = drop_condition(ex->x, train_.cond_drop_prob, rng);
    rep.dropped += x.is_null ? 1 : 0;
    Video lowres;
    if (sr) {
      if (ex->lowres.empty()) throw ContractError("super-resolution training needs low-resolution clips");
      const Video aug = normal_video(ex->y0.shape(), rng);
      lowres = sr_condition_assembly(ex->lowres, x, aug, train_.sr_noise_aug_level, ex->y0.dim(2)).lowres;
    }
    auto loss = example_loss(net_, ex->y0, x, t, eps, sched_, sr ? &lowres : nullptr);
    const double lv = loss.value()[0];
    rep.t_values.push_back(t);
    if (!std::isfinite(lv)) {
      std::ostringstream os;
      os << "non-finite loss at step " << step_ << " (t values:";
      for (int tv : rep.t_values) os << ' ' << tv;
      double pn = 0;
      for (const auto& [path, p] : ps.entries()) {
        for (float v : p.value().vec()) pn += static_cast<double>(v) * v;
      }
      os << "; parameter norm " << std::sqrt(pn) << ", input norm ";
      double yn = 0;
      for (float v : ex->y0.vec()) yn += static_cast<double>(v) * v;
      os << std::sqrt(yn) << ")";
      throw NumericFault(os.str());
    }
    rep.loss += lv / static_cast<double>(batch.size());
    ag::backward(ag::scale(loss, inv_b));
  }

  double sq = 0;
  for (auto& [path, p] : ps.entries()) {
    if (!p.has_grad()) continue;
    for (float g : p.grad().vec()) sq += static_cast<double>(g) * g;
  }
  rep.grad_norm = std::sqrt(sq);
  if (!std::isfinite(rep.grad_norm)) {
    throw NumericFault("non-finite gradient norm at step " + std::to_string(step_));
  }
  const double clip =
      (train_.grad_clip_norm > 0 && rep.grad_norm > train_.grad_clip_norm) ? train_.grad_clip_norm / rep.grad_norm : 1.0;

  constexpr double kBeta1 = 0.9, kBeta2 = 0.999, kEps = 1e-8;
  const double n = static_cast<double>(step_ + 1);
  const double bc1 = 1.0 - std::pow(kBeta1, n), bc2 = 1.0 - std::pow(kBeta2, n);
  const double lr = train_.learning_rate_at(step_), d = train_.ema_decay;
  for (std::size_t i = 0; i < ps.size(); ++i) {
    auto p = ps.entries()[i].second;
    auto& w = p.mutable_value();
    auto& m = m_[i];
    auto& v = v_[i];
    const bool has = p.has_grad();
    for (std::int64_t j = 0; j < w.numel(); ++j) {
      const double g = has ? clip * p.grad()[j] : 0.0;
      const double mj = kBeta1 * m[j] + (1.0 - kBeta1) * g;
      const double vj = kBeta2 * v[j] + (1.0 - kBeta2) * g * g;
      m[j] = static_cast<float>(mj);
      v[j] = static_cast<float>(vj);
      if (lr != 0.0) {
        w[j] = static_cast<float>(w[j] - lr * (mj / bc1) / (std::sqrt(vj / bc2) + kEps));
      }
    }
    if (train_.use_ema) {
      auto& e = ema_[i];
      for (std::int64_t j = 0; j < w.numel(); ++j) e[j] = static_cast<float>(d * e[j] + (1.0 - d) * w[j]);
    }
  }
  ps.zero_grad();
  rep.step = ++step_;
  return rep;
}

Checkpoint Trainer::snapshot() const {
  Checkpoint c;
  c.net = net_.config();
  c.train = train_;
  c.schedule = sched_;
  c.step = step_;
  const auto& ps = net_.parameters();
  for (const auto& [path, p] : ps.entries()) c.params.emplace_back(path, p.value());
  c.ema = name_arrays(ema_, ps);
  c.adam_m = name_arrays(m_, ps);
  c.adam_v = name_arrays(v_, ps);
  return c;
}

// ---------------------------------------------------------------------------
// Checkpoint files
//
//   "ECHOSYN\0" | u32 version | u64 header length | JSON header |
//   float32 arrays in header order | u64 FNV-1a of the array bytes

namespace {

constexpr char kMagic[8] = {'E', 'C', 'H', 'O', 'S', 'Y', 'N', '\0'};

std::uint64_t fnv1a(const char* data, std::size_t n, std::uint64_t h = 0xcbf29ce484222325ULL) {
  for (std::size_t i = 0; i < n; ++i) {
    h ^= static_cast<unsigned char>(data[i]);
    h *= 0x100000001b3ULL;
  }
  return h;
}

template <typename V>
void put(std::string& out, V v) {
  out.append(reinterpret_cast<const char*>(&v), sizeof(V));
}

template <typename V>
V take(const std::string& in, std::size_t& pos) {
  if (pos + sizeof(V) > in.size()) throw CheckpointError("checkpoint truncated in its preamble");
  V v;
  std::memcpy(&v, in.data() + pos, sizeof(V));
  pos += sizeof(V);
  return v;
}

const std::array<std::pair<const char*, NamedArrays Checkpoint::*>, 4> kGroups{{
    {"params", &Checkpoint::params},
    {"ema", &Checkpoint::ema},
    {"adam_m", &Checkpoint::adam_m},
    {"adam_v", &Checkpoint::adam_v},
}};

}  // namespace

void save_checkpoint(const Checkpoint& ckpt, const fs::path& path) {
  json header{{"net", to_json(ckpt.net)},
              {"train", to_json(ckpt.train)},
              {"schedule", {{"kind", to_string(ckpt.schedule.kind)}, {"betas", ckpt.schedule.betas}}},
              {"step", ckpt.step}};
  std::string payload;
  json inventory = json::array();
  for (const auto& [group, member] : kGroups) {
    for (const auto& [name, arr] : ckpt.*member) {
      inventory.push_back({{"group", group}, {"path", name}, {"shape", arr.shape()}});
      payload.append(reinterpret_cast<const char*>(arr.data()), arr.numel() * sizeof(float));
    }
  }
  header["arrays"] = inventory;
  const std::string hs = header.dump();

  std::string out(kMagic, sizeof(kMagic));
  put(out, Checkpoint::kFormatVersion);
  put(out, static_cast<std::uint64_t>(hs.size()));
  out += hs;
  out += payload;
  put(out, fnv1a(payload.data(), payload.size()));

  if (!path.parent_path().empty()) fs::create_directories(path.parent_path());
  fs::path tmp = path;
  tmp += ".tmp";
  {
    std::ofstream f(tmp, std::ios::binary | std::ios::trunc);
    f.write(out.data(), static_cast<std::streamsize>(out.size()));
    f.flush();
    if (!f) {
      f.close();
      fs::remove(tmp);
      throw CheckpointError("failed writing " + tmp.string() + " (disk full?)");
    }
  }
  fs::rename(tmp, path);
}

Checkpoint load_checkpoint(const fs::path& path) {
  std::ifstream f(path, std::ios::binary);
  if (!f) throw CheckpointError("cannot open checkpoint " + path.string());
  const std::string in((std::istreambuf_iterator<char>(f)), std::istreambuf_iterator<char>());
  if (in.size() < sizeof(kMagic) || std::memcmp(in.data(), kMagic, sizeof(kMagic)) != 0) {
    throw CheckpointError(path.string() + ": not an echosyn checkpoint");
  }
  std::size_t pos = sizeof(kMagic);
  const auto version = take<std::uint32_t>(in, pos);
  if (version != Checkpoint::kFormatVersion) {
    throw CheckpointError(path.string() + ": unsupported checkpoint format version " + std::to_string(version) +
                          " (this build reads version " + std::to_string(Checkpoint::kFormatVersion) + ")");
  }
  const auto hlen = take<std::uint64_t>(in, pos);
  if (pos + hlen > in.size()) throw CheckpointError(path.string() + ": checkpoint truncated in its header");
  json header;
  try {
    header = json::parse(in.substr(pos, hlen));
  } catch (const json::exception& e) {
    throw CheckpointError(path.string() + ": corrupt header: " + e.what());
  }
  pos += hlen;

  Checkpoint c;
  std::vector<std::string> errors;
  merge_json(c.net, header.at("net"), errors);
  merge_json(c.train, header.at("train"), errors);
  if (!errors.empty()) throw CheckpointError(path.string() + ": " + errors.front());
  c.schedule = schedule_from_betas(header.at("schedule").at("betas").get<std::vector<double>>());
  c.schedule.kind = schedule_kind_from_string(header.at("schedule").at("kind").get<std::string>());
  c.step = header.at("step").get<std::int64_t>();

  std::size_t payload_bytes = 0;
  for (const auto& a : header.at("arrays")) payload_bytes += shape_numel(a.at("shape").get<Shape>()) * sizeof(float);
  if (in.size() != pos + payload_bytes + sizeof(std::uint64_t)) {
    throw CheckpointError(path.string() + ": fingerprint check failed: file holds " + std::to_string(in.size()) +
                          " bytes, expected " + std::to_string(pos + payload_bytes + sizeof(std::uint64_t)) +
                          " (truncated or corrupted)");
  }
  const std::uint64_t stored = [&] {
    std::size_t p = pos + payload_bytes;
    return take<std::uint64_t>(in, p);
  }();
  c.fingerprint = fnv1a(in.data() + pos, payload_bytes);
  if (stored != c.fingerprint) throw CheckpointError(path.string() + ": fingerprint mismatch, checkpoint is corrupted");

  for (const auto& a : header.at("arrays")) {
    const auto group = a.at("group").get<std::string>();
    Tensor<float> t(a.at("shape").get<Shape>());
    std::memcpy(t.data(), in.data() + pos, t.numel() * sizeof(float));
    pos += t.numel() * sizeof(float);
    bool placed = false;
    for (const auto& [name, member] : kGroups) {
      if (group == name) {
        (c.*member).emplace_back(a.at("path").get<std::string>(), std::move(t));
        placed = true;
        break;
      }
    }
    if (!placed) throw CheckpointError(path.string() + ": unknown array group " + group);
  }
  return c;
}

std::unique_ptr<Denoiser<float>> instantiate(const Checkpoint& ckpt, bool prefer_ema) {
  auto net = std::make_unique<Denoiser<float>>(ckpt.net, ckpt.train.seed);
  const auto& src = (prefer_ema && !ckpt.ema.empty()) ? ckpt.ema : ckpt.params;
  std::vector<Tensor<float>> arrays;
  copy_arrays(src, arrays, net->parameters(), "parameters");
  for (std::size_t i = 0; i < arrays.size(); ++i) {
    auto p = net->parameters().entries()[i].second;
    p.mutable_value() = std::move(arrays[i]);
  }
  return net;
}

// ---------------------------------------------------------------------------
// Training loop

namespace {

std::string ckpt_name(std::int64_t step) {
  std::ostringstream os;
  os << "ckpt_" << std::setw(8) << std::setfill('0') << step << ".bin";
  return os.str();
}

}  // namespace

TrainingOutcome run_training(const NetConfig& net, const TrainConfig& cfg, const NoiseSchedule& sched,
                             const std::vector<TrainExample>& data, const fs::path& out_dir, bool resume,
                             std::ostream* log) {
  if (cfg.max_steps < 1) throw ConfigError("train.max_steps must be set to a positive step count");
  if (data.empty()) throw ConfigError("no training examples");
  fs::create_directories(out_dir);
  const auto latest = out_dir / "latest.bin";

  std::unique_ptr<Trainer> tr;
  if (resume && fs::exists(latest)) {
    tr = std::make_unique<Trainer>(load_checkpoint(latest));
    if (to_json(tr->net().config()) != to_json(net)) {
      throw ConfigError("cannot resume: model configuration differs from the checkpoint in " + out_dir.string());
    }
    if (log) *log << "resuming from step " << tr->step() << "\n";
  } else {
    tr = std::make_unique<Trainer>(net, cfg, sched);
  }

  TrainingOutcome outcome;
  std::ofstream metrics(out_dir / "metrics.jsonl", resume ? std::ios::app : std::ios::trunc);
  auto t0 = std::chrono::steady_clock::now();
  while (tr->step() < cfg.max_steps) {
    const auto rep = tr->train_step(data);
    const auto t1 = std::chrono::steady_clock::now();
    const double secs = std::chrono::duration<double>(t1 - t0).count();
    t0 = t1;
    metrics << json{{"step", rep.step},
                    {"loss", rep.loss},
                    {"grad_norm", rep.grad_norm},
                    {"dropped", rep.dropped},
                    {"t", rep.t_values},
                    {"steps_per_sec", secs > 0 ? 1.0 / secs : 0.0}}
                   .dump()
            << '\n';
    metrics.flush();
    if (log && rep.step % cfg.log_every == 0) {
      *log << "step " << rep.step << " loss " << rep.loss << " grad_norm " << rep.grad_norm << "\n";
    }
    if (rep.step % cfg.checkpoint_every == 0 || rep.step == cfg.max_steps) {
      const auto ck = tr->snapshot();
      save_checkpoint(ck, out_dir / ckpt_name(rep.step));
      save_checkpoint(ck, latest);
    }
    outcome.history.push_back(rep);
  }
  outcome.final = tr->snapshot();
  if (!fs::exists(latest)) save_checkpoint(outcome.final, latest);
  return outcome;
}

}  // namespace echosyn
