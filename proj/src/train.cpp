#include "fmfnet/train.hpp"

#include <algorithm>
#include <atomic>
#include <bit>
#include <chrono>
#include <cmath>
#include <cstdio>
#include <cstring>
#include <fstream>
#include <mutex>
#include <numbers>
#include <sstream>
#include <thread>

#include "fmfnet/errors.hpp"

namespace fmfnet {

namespace {

using Clock = std::chrono::steady_clock;

double seconds_since(Clock::time_point t0) { return std::chrono::duration<double>(Clock::now() - t0).count(); }

void rotate(double c, double s, double& x, double& y) {
  const double nx = c * x - s * y;
  const double ny = s * x + c * y;
  x = nx;
  y = ny;
}

}  // namespace

// ---------------------------------------------------------------------------
// Augmentation

AugmentParams sample_augment(const AugmentConfig& cfg, std::uint64_t seed) {
  Rng rng(seed);
  AugmentParams p;
  // Always draw every variate so the stream layout does not depend on flags.
  const bool fx = rng.bernoulli(0.5);
  const bool fy = rng.bernoulli(0.5);
  const double rot = rng.uniform(-1.0, 1.0);
  const double sc = rng.uniform();
  p.flip_x = cfg.flip_x && fx;
  p.flip_y = cfg.flip_y && fy;
  p.rotation = cfg.max_rotation * rot;
  p.scale = cfg.scale_min == cfg.scale_max ? cfg.scale_min : cfg.scale_min + (cfg.scale_max - cfg.scale_min) * sc;
  return p;
}

PointCloudFrame apply_augment(const PointCloudFrame& frame, const AugmentParams& p) {
  PointCloudFrame out = frame;
  if (p.is_identity()) return out;
  const double c = std::cos(p.rotation), s = std::sin(p.rotation);
  const bool rot = p.rotation != 0.0;
  for (auto& pt : out.points) {
    if (p.flip_x) pt.y = -pt.y;
    if (p.flip_y) pt.x = -pt.x;
    if (rot) rotate(c, s, pt.x, pt.y);
    pt.x *= p.scale;
    pt.y *= p.scale;
    pt.z *= p.scale;
  }
  for (auto& b : out.gt_boxes) {
    if (p.flip_x) {
      b.cy = -b.cy;
      b.yaw = wrap_angle(-b.yaw);
      b.vy = -b.vy;
    }
    if (p.flip_y) {
      b.cx = -b.cx;
      b.yaw = wrap_angle(std::numbers::pi - b.yaw);
      b.vx = -b.vx;
    }
    if (rot) {
      rotate(c, s, b.cx, b.cy);
      rotate(c, s, b.vx, b.vy);
      b.yaw = wrap_angle(b.yaw + p.rotation);
    }
    b.cx *= p.scale;
    b.cy *= p.scale;
    b.cz *= p.scale;
    b.w *= p.scale;
    b.l *= p.scale;
    b.h *= p.scale;
    b.vx *= p.scale;
    b.vy *= p.scale;
  }
  return out;
}

PointCloudFrame augment(const PointCloudFrame& frame, const AugmentConfig& cfg, std::uint64_t seed) {
  return apply_augment(frame, sample_augment(cfg, seed));
}

Pose2D conjugate_pose(const Pose2D& rel, const AugmentParams& p) {
  const bool mirrored = p.flip_x != p.flip_y;
  Pose2D out;
  out.yaw = mirrored ? wrap_angle(-rel.yaw) : rel.yaw;
  double x = rel.tx, y = rel.ty;
  if (p.flip_x) y = -y;
  if (p.flip_y) x = -x;
  rotate(std::cos(p.rotation), std::sin(p.rotation), x, y);
  out.tx = p.scale * x;
  out.ty = p.scale * y;
  return out;
}

// ---------------------------------------------------------------------------
// Schedule and optimizer

LrMomentum one_cycle_lr(int step, int total_steps, double lr_init, double momentum_low, double momentum_high) {
  if (total_steps < 1) throw UsageError("one_cycle_lr: total_steps must be >= 1");
  if (step < 0 || step > total_steps) {
    throw UsageError("one_cycle_lr: step " + std::to_string(step) + " outside [0, " + std::to_string(total_steps) + "]");
  }
  const double warm = 0.4 * total_steps;
  const double peak = lr_init, start = lr_init / 10.0, floor = lr_init / 1000.0;
  LrMomentum r;
  if (step <= warm) {
    const double k = 0.5 * (1.0 - std::cos(std::numbers::pi * step / warm));
    r.lr = start + (peak - start) * k;
    r.momentum = momentum_high - (momentum_high - momentum_low) * k;
  } else {
    const double k = 0.5 * (1.0 - std::cos(std::numbers::pi * (step - warm) / (total_steps - warm)));
    r.lr = peak + (floor - peak) * k;
    r.momentum = momentum_low + (momentum_high - momentum_low) * k;
  }
  return r;
}

void AdamW::step(std::vector<NamedTensor>& params, double lr, double beta1, double weight_decay) {
  if (m_.size() != params.size()) {
    m_.assign(params.size(), {});
    v_.assign(params.size(), {});
    for (std::size_t i = 0; i < params.size(); ++i) {
      m_[i].assign(params[i].tensor.numel(), 0.0);
      v_[i].assign(params[i].tensor.numel(), 0.0);
    }
  }
  ++t_;
  const double bc1 = 1.0 - std::pow(beta1, static_cast<double>(t_));
  const double bc2 = 1.0 - std::pow(beta2_, static_cast<double>(t_));
  const double decay = 1.0 - lr * weight_decay;
  for (std::size_t i = 0; i < params.size(); ++i) {
    Tensor& p = params[i].tensor;
    auto w = p.mutable_data();
    if (m_[i].size() != w.size()) throw StateError("optimizer state does not match parameter " + params[i].name);
    const bool has = p.has_grad();
    std::span<const double> g = has ? p.grad() : std::span<const double>{};
    auto& m = m_[i];
    auto& v = v_[i];
    for (std::size_t k = 0; k < w.size(); ++k) {
      const double gk = has ? g[k] : 0.0;
      m[k] = beta1 * m[k] + (1.0 - beta1) * gk;
      v[k] = beta2_ * v[k] + (1.0 - beta2_) * gk * gk;
      const double update = (m[k] / bc1) / (std::sqrt(v[k] / bc2) + eps_);
      w[k] = w[k] * decay - lr * update;
    }
  }
}

// ---------------------------------------------------------------------------
// Training

LossBreakdown pair_loss(DetectorModel& model, const PointCloudFrame& prev, const PointCloudFrame& cur, Mode mode,
                        std::uint64_t voxel_seed_prev, std::uint64_t voxel_seed_cur,
                        const std::optional<Pose2D>& relative) {
  const BevGeometry geom = model.cfg.geometry();
  Tensor bev;
  if (model.fmf) {
    Tensor previous = encode_bev(model, prev, mode, voxel_seed_prev);
    const Tensor current = encode_bev(model, cur, mode, voxel_seed_cur);
    if (model.cfg.fmf.use_odometry && relative) previous = warp_feature_map(previous, *relative, geom);
    bev = fmf_base(current, previous, *model.fmf, mode);
  } else {
    bev = encode_bev(model, cur, mode, voxel_seed_cur);
  }
  const HeadOutput head = head_forward(bev, model.head);
  const TargetMaps targets = render_targets(cur.gt_boxes, geom, model.cfg.num_classes(), model.cfg.targets);
  return compute_losses(head, targets, model.cfg.focal, model.cfg.loss_weights);
}

namespace {

struct PairRef {
  std::size_t seq;
  std::size_t t;
};

std::vector<PairRef> collect_pairs(const std::vector<SceneSequence>& scenes) {
  std::vector<PairRef> pairs;
  for (std::size_t s = 0; s < scenes.size(); ++s)
    for (std::size_t t = 1; t < scenes[s].frames.size(); ++t) pairs.push_back({s, t});
  return pairs;
}

int steps_per_epoch(std::size_t pairs, int batch) {
  return static_cast<int>((pairs + static_cast<std::size_t>(batch) - 1) / static_cast<std::size_t>(batch));
}

}  // namespace

int total_train_steps(const TrainConfig& cfg, const std::vector<SceneSequence>& scenes) {
  const auto pairs = collect_pairs(scenes).size();
  if (pairs == 0) throw UsageError("training needs at least one sequence with two or more frames");
  return cfg.max_steps > 0 ? cfg.max_steps : cfg.epochs * steps_per_epoch(pairs, cfg.batch_size);
}

std::unique_ptr<TrainState> train(const TrainConfig& cfg, const std::vector<SceneSequence>& scenes,
                                  std::vector<LossRecord>* trace, const ProgressFn& progress) {
  cfg.validate();
  if (scenes.empty()) throw UsageError("train: no scenes");
  for (const auto& s : scenes) {
    if (s.class_names != cfg.model.class_names) throw ConfigError("dataset class names do not match the config");
  }
  const auto pairs = collect_pairs(scenes);
  const int total = total_train_steps(cfg, scenes);
  const int spe = steps_per_epoch(pairs.size(), cfg.batch_size);

  auto state = std::make_unique<TrainState>(
      TrainState{cfg, DetectorModel::create(cfg.model, derive_seed(cfg.seed, 1)), AdamW(cfg.adam_beta2, cfg.adam_eps), 0});
  ParamSet params = state->model.parameters();

  std::vector<std::size_t> order(pairs.size());
  int epoch = -1;
  for (int step = 0; step < total; ++step) {
    if (step / spe != epoch) {
      epoch = step / spe;
      for (std::size_t i = 0; i < order.size(); ++i) order[i] = i;
      Rng shuffle(derive_seed(cfg.seed, 2, static_cast<std::uint64_t>(epoch)));
      for (std::size_t i = order.size(); i > 1; --i) std::swap(order[i - 1], order[shuffle.index(i)]);
    }
    const LrMomentum sched = one_cycle_lr(step, total, cfg.lr_init, cfg.momentum_range[0], cfg.momentum_range[1]);
    params.zero_grad();

    const std::size_t begin = static_cast<std::size_t>(step % spe) * static_cast<std::size_t>(cfg.batch_size);
    const std::size_t end = std::min(order.size(), begin + static_cast<std::size_t>(cfg.batch_size));
    const double inv = 1.0 / static_cast<double>(end - begin);
    LossRecord rec;
    rec.step = step;
    rec.lr = sched.lr;
    for (std::size_t b = begin; b < end; ++b) {
      const PairRef& pr = pairs[order[b]];
      const auto& seq = scenes[pr.seq];
      const std::uint64_t sample_seed = derive_seed(derive_seed(cfg.seed, 3, static_cast<std::uint64_t>(step)), b - begin);
      const AugmentParams ap = cfg.augment_enabled ? sample_augment(cfg.augment, sample_seed) : AugmentParams{};
      const PointCloudFrame prev = apply_augment(seq.frames[pr.t - 1], ap);
      const PointCloudFrame cur = apply_augment(seq.frames[pr.t], ap);
      std::optional<Pose2D> rel;
      if (prev.ego_pose && cur.ego_pose) rel = conjugate_pose(relative_pose(*prev.ego_pose, *cur.ego_pose), ap);

      const LossBreakdown lb = pair_loss(state->model, prev, cur, Mode::kTrain, derive_seed(sample_seed, 1),
                                         derive_seed(sample_seed, 2), rel);
      const double total_v = lb.total.item();
      if (!std::isfinite(total_v)) {
        throw NumericDivergence("loss became non-finite at step " + std::to_string(step) + " (L_hm=" +
                                std::to_string(lb.heatmap.item()) + ")");
      }
      scale(lb.total, inv).backward();
      rec.hm += lb.heatmap.item() * inv;
      rec.offset += lb.regression.offset.item() * inv;
      rec.size += lb.regression.size.item() * inv;
      rec.height += lb.regression.height.item() * inv;
      rec.rotation += lb.regression.rotation.item() * inv;
      rec.velocity += lb.regression.velocity.item() * inv;
      rec.total += total_v * inv;
    }
    state->optimizer.step(params.params, sched.lr, sched.momentum, cfg.weight_decay);
    for (const auto& p : params.params) {
      for (double v : p.tensor.data())
        if (!std::isfinite(v)) throw NumericDivergence("parameter " + p.name + " became non-finite at step " + std::to_string(step));
    }
    state->step = step + 1;
    if (trace) trace->push_back(rec);
    if (progress) progress(rec);
  }
  return state;
}

void write_loss_trace(const std::filesystem::path& path, const std::vector<LossRecord>& trace) {
  std::FILE* f = std::fopen(path.string().c_str(), "w");
  if (!f) throw IoError("cannot open " + path.string() + " for writing");
  std::fprintf(f, "step,lr,L_hm,L_l,L_s,L_H,L_r,L_v,L_total\n");
  for (const auto& r : trace) {
    std::fprintf(f, "%d,%.17g,%.17g,%.17g,%.17g,%.17g,%.17g,%.17g,%.17g\n", r.step, r.lr, r.hm, r.offset, r.size,
                 r.height, r.rotation, r.velocity, r.total);
  }
  if (std::fclose(f) != 0) throw IoError("write failed: " + path.string());
}

// ---------------------------------------------------------------------------
// Checkpoints
//
// "FMFCKPT1" u32 version  i64 step  i64 adam_steps  u64 len + config JSON
// u32 n_params { u32 len + name, u64 n, n x f64 value, u8 has_moments, [2n x f64] }
// u32 n_buffers { u32 len + name, u64 n, n x f64 }

namespace {

constexpr char kCkptMagic[8] = {'F', 'M', 'F', 'C', 'K', 'P', 'T', '1'};
constexpr std::uint32_t kCkptVersion = 1;

class Writer {
 public:
  explicit Writer(const std::filesystem::path& p) : out_(p, std::ios::binary), path_(p) {
    if (!out_) throw IoError("cannot open " + p.string() + " for writing");
  }
  template <typename T>
  void pod(T v) {
    unsigned char b[sizeof(T)];
    std::uint64_t bits = 0;
    if constexpr (std::is_same_v<T, double>) {
      bits = std::bit_cast<std::uint64_t>(v);
    } else {
      bits = static_cast<std::uint64_t>(v);
    }
    for (std::size_t i = 0; i < sizeof(T); ++i) b[i] = static_cast<unsigned char>(bits >> (8 * i));
    out_.write(reinterpret_cast<const char*>(b), sizeof(T));
  }
  void str(const std::string& s, bool wide = false) {
    if (wide) {
      pod<std::uint64_t>(s.size());
    } else {
      pod<std::uint32_t>(static_cast<std::uint32_t>(s.size()));
    }
    out_.write(s.data(), static_cast<std::streamsize>(s.size()));
  }
  void doubles(std::span<const double> v) {
    for (double d : v) pod(d);
  }
  void raw(const char* p, std::size_t n) { out_.write(p, static_cast<std::streamsize>(n)); }
  void close() {
    out_.close();
    if (!out_) throw IoError("write failed: " + path_.string());
  }

 private:
  std::ofstream out_;
  std::filesystem::path path_;
};

class ByteReader {
 public:
  explicit ByteReader(const std::filesystem::path& p) : path_(p) {
    std::ifstream in(p, std::ios::binary);
    if (!in) throw IoError("cannot open " + p.string());
    buf_.assign(std::istreambuf_iterator<char>(in), {});
  }
  void need(std::size_t n) const {
    if (pos_ + n > buf_.size()) throw IoError(path_.string() + ": truncated checkpoint");
  }
  template <typename T>
  T pod() {
    need(sizeof(T));
    std::uint64_t bits = 0;
    for (std::size_t i = 0; i < sizeof(T); ++i)
      bits |= static_cast<std::uint64_t>(static_cast<unsigned char>(buf_[pos_ + i])) << (8 * i);
    pos_ += sizeof(T);
    if constexpr (std::is_same_v<T, double>) {
      return std::bit_cast<double>(bits);
    } else {
      return static_cast<T>(bits);
    }
  }
  std::string str(bool wide = false) {
    const std::size_t n = wide ? static_cast<std::size_t>(pod<std::uint64_t>()) : pod<std::uint32_t>();
    need(n);
    std::string s(buf_.data() + pos_, n);
    pos_ += n;
    return s;
  }
  void doubles(std::span<double> v) {
    need(v.size() * 8);
    for (double& d : v) d = pod<double>();
  }
  std::string bytes(std::size_t n) {
    need(n);
    std::string s(buf_.data() + pos_, n);
    pos_ += n;
    return s;
  }
  bool done() const { return pos_ == buf_.size(); }
  const std::filesystem::path& path() const { return path_; }

 private:
  std::vector<char> buf_;
  std::size_t pos_ = 0;
  std::filesystem::path path_;
};

}  // namespace

void save_checkpoint(TrainState& state, const std::filesystem::path& path) {
  ParamSet set = state.model.parameters();
  auto& m = state.optimizer.first_moments();
  auto& v = state.optimizer.second_moments();
  const bool moments = m.size() == set.params.size();

  Writer w(path);
  w.raw(kCkptMagic, sizeof kCkptMagic);
  w.pod<std::uint32_t>(kCkptVersion);
  w.pod<std::int64_t>(state.step);
  w.pod<std::int64_t>(state.optimizer.steps());
  w.str(to_json(state.cfg).dump(), true);
  w.pod<std::uint32_t>(static_cast<std::uint32_t>(set.params.size()));
  for (std::size_t i = 0; i < set.params.size(); ++i) {
    const auto& p = set.params[i];
    w.str(p.name);
    w.pod<std::uint64_t>(p.tensor.numel());
    w.doubles(p.tensor.data());
    w.pod<std::uint8_t>(moments ? 1 : 0);
    if (moments) {
      w.doubles(m[i]);
      w.doubles(v[i]);
    }
  }
  w.pod<std::uint32_t>(static_cast<std::uint32_t>(set.buffers.size()));
  for (const auto& b : set.buffers) {
    w.str(b.name);
    w.pod<std::uint64_t>(b.values->size());
    w.doubles(*b.values);
  }
  w.close();
}

std::unique_ptr<TrainState> load_checkpoint(const std::filesystem::path& path) {
  ByteReader r(path);
  if (r.bytes(sizeof kCkptMagic) != std::string(kCkptMagic, sizeof kCkptMagic)) {
    throw FormatError(path.string() + ": not a checkpoint (bad magic)");
  }
  const auto version = r.pod<std::uint32_t>();
  if (version != kCkptVersion) throw FormatError(path.string() + ": unsupported checkpoint version " + std::to_string(version));
  const auto step = r.pod<std::int64_t>();
  const auto adam_steps = r.pod<std::int64_t>();
  TrainConfig cfg;
  try {
    cfg = train_config_from_json(nlohmann::json::parse(r.str(true)));
  } catch (const nlohmann::json::exception& e) {
    throw FormatError(path.string() + ": bad embedded config: " + e.what());
  }

  auto state = std::make_unique<TrainState>(
      TrainState{cfg, DetectorModel::create(cfg.model, derive_seed(cfg.seed, 1)), AdamW(cfg.adam_beta2, cfg.adam_eps),
                 static_cast<int>(step)});
  ParamSet set = state->model.parameters();
  const auto np = r.pod<std::uint32_t>();
  if (np != set.params.size()) throw FormatError(path.string() + ": parameter count does not match the config");
  std::vector<std::vector<double>> m, v;
  bool all_moments = true;
  for (auto& p : set.params) {
    const std::string name = r.str();
    if (name != p.name) throw FormatError(path.string() + ": expected parameter " + p.name + ", found " + name);
    const auto n = r.pod<std::uint64_t>();
    if (n != p.tensor.numel()) throw FormatError(path.string() + ": size mismatch for " + name);
    r.doubles(p.tensor.mutable_data());
    if (r.pod<std::uint8_t>()) {
      m.emplace_back(n);
      v.emplace_back(n);
      r.doubles(m.back());
      r.doubles(v.back());
    } else {
      all_moments = false;
    }
  }
  const auto nb = r.pod<std::uint32_t>();
  if (nb != set.buffers.size()) throw FormatError(path.string() + ": buffer count does not match the config");
  for (auto& b : set.buffers) {
    const std::string name = r.str();
    if (name != b.name) throw FormatError(path.string() + ": expected buffer " + b.name + ", found " + name);
    const auto n = r.pod<std::uint64_t>();
    if (n != b.values->size()) throw FormatError(path.string() + ": size mismatch for " + name);
    r.doubles(*b.values);
  }
  if (!r.done()) throw FormatError(path.string() + ": trailing bytes after checkpoint payload");
  if (all_moments && !m.empty()) {
    state->optimizer.first_moments() = std::move(m);
    state->optimizer.second_moments() = std::move(v);
    state->optimizer.set_steps(adam_steps);
  }
  return state;
}

// ---------------------------------------------------------------------------
// Inference helpers

std::vector<FrameDetection> infer_dataset(DetectorModel& model, const std::vector<SceneSequence>& scenes) {
  std::vector<FrameDetection> out;
  std::size_t base = 0;
  for (const auto& seq : scenes) {
    if (seq.class_names != model.cfg.class_names) throw ConfigError("dataset class names do not match the model");
    const auto dets = run_sequence(model, seq);
    for (std::size_t f = 0; f < dets.size(); ++f)
      for (const auto& d : dets[f]) out.push_back({base + f, d});
    base += seq.frames.size();
  }
  return out;
}

std::vector<EvalFrame> assemble_eval_frames(const std::vector<SceneSequence>& scenes,
                                            const std::vector<FrameDetection>& dets) {
  std::vector<EvalFrame> frames;
  for (const auto& seq : scenes)
    for (const auto& f : seq.frames) frames.push_back({{}, f.gt_boxes});
  for (const auto& d : dets) {
    if (d.frame >= frames.size()) {
      throw UsageError("detection frame " + std::to_string(d.frame) + " outside the dataset (" +
                       std::to_string(frames.size()) + " frames)");
    }
    frames[d.frame].detections.push_back(d.det);
  }
  return frames;
}

// ---------------------------------------------------------------------------
// Benchmark

LatencyStats latency_stats(std::vector<double> samples) {
  LatencyStats s;
  if (samples.empty()) return s;
  std::sort(samples.begin(), samples.end());
  double sum = 0;
  for (double v : samples) sum += v;
  s.mean = sum / static_cast<double>(samples.size());
  auto rank = [&](double q) {
    const auto n = samples.size();
    auto k = static_cast<std::size_t>(std::ceil(q * static_cast<double>(n)));
    return samples[std::clamp<std::size_t>(k, 1, n) - 1];
  };
  s.p50 = rank(0.5);
  s.p99 = rank(0.99);
  return s;
}

namespace {

BenchMode summarize(std::string name, int threads, const std::vector<StageTimes>& times, double wall) {
  BenchMode m;
  m.name = std::move(name);
  m.threads = threads;
  m.frames = times.size();
  m.wall_seconds = wall;
  for (int i = 0; i < StageTimes::kCount; ++i) {
    std::vector<double> v;
    v.reserve(times.size());
    for (const auto& t : times) v.push_back(t.at(i));
    m.stages.push_back(latency_stats(std::move(v)));
  }
  std::vector<double> tot;
  for (const auto& t : times) tot.push_back(t.total);
  m.end_to_end = latency_stats(std::move(tot));
  return m;
}

}  // namespace

BenchReport bench(DetectorModel& model, const std::vector<SceneSequence>& scenes, std::size_t num_frames, int threads) {
  if (num_frames == 0) throw UsageError("bench: number of frames must be >= 1");
  std::size_t available = 0;
  for (const auto& s : scenes) available += s.frames.size();
  if (available == 0) throw UsageError("bench: no frames to run");
  if (threads < 1) threads = std::max(2u, std::thread::hardware_concurrency());

  BenchReport rep;
  {
    std::vector<StageTimes> times;
    const auto t0 = Clock::now();
    std::size_t done = 0;
    for (std::size_t s = 0; done < num_frames; s = (s + 1) % scenes.size()) {
      SequenceRunner runner(model);
      for (std::size_t f = 0; f < scenes[s].frames.size() && done < num_frames; ++f, ++done) {
        auto out = runner.step(scenes[s].frames[f], f);
        times.push_back(out.times);
        for (const auto& d : out.detections) rep.detections.push_back({done, d});
      }
    }
    rep.sequential = summarize("sequential", 1, times, seconds_since(t0));
  }
  {
    std::atomic<std::size_t> claimed{0};
    std::vector<std::vector<StageTimes>> per(static_cast<std::size_t>(threads));
    const auto t0 = Clock::now();
    std::vector<std::thread> pool;
    for (int w = 0; w < threads; ++w) {
      pool.emplace_back([&, w] {
        auto& mine = per[static_cast<std::size_t>(w)];
        for (std::size_t s = static_cast<std::size_t>(w) % scenes.size();; s = (s + 1) % scenes.size()) {
          SequenceRunner runner(model);
          for (std::size_t f = 0; f < scenes[s].frames.size(); ++f) {
            if (claimed.fetch_add(1) >= num_frames) return;
            mine.push_back(runner.step(scenes[s].frames[f], f).times);
          }
        }
      });
    }
    for (auto& t : pool) t.join();
    std::vector<StageTimes> all;
    for (auto& v : per) all.insert(all.end(), v.begin(), v.end());
    rep.parallel = summarize("parallel", threads, all, seconds_since(t0));
  }
  return rep;
}

nlohmann::json to_json(const BenchMode& m) {
  auto stat = [](const LatencyStats& s) { return nlohmann::json{{"mean_ms", 1e3 * s.mean}, {"p50_ms", 1e3 * s.p50}, {"p99_ms", 1e3 * s.p99}}; };
  nlohmann::json j{{"mode", m.name}, {"threads", m.threads}, {"frames", m.frames}, {"wall_seconds", m.wall_seconds}};
  nlohmann::json stages = nlohmann::json::object();
  for (int i = 0; i < static_cast<int>(m.stages.size()); ++i) stages[StageTimes::name(i)] = stat(m.stages[static_cast<std::size_t>(i)]);
  j["stages"] = stages;
  j["end_to_end"] = stat(m.end_to_end);
  return j;
}

std::string format_bench(const BenchMode& m) {
  std::ostringstream os;
  char line[160];
  std::snprintf(line, sizeof line, "%s: %zu frames, %d thread(s), %.3f s wall\n", m.name.c_str(), m.frames, m.threads,
                m.wall_seconds);
  os << line;
  std::snprintf(line, sizeof line, "  %-10s %10s %10s %10s\n", "stage", "mean ms", "p50 ms", "p99 ms");
  os << line;
  auto row = [&](const char* name, const LatencyStats& s) {
    std::snprintf(line, sizeof line, "  %-10s %10.3f %10.3f %10.3f\n", name, 1e3 * s.mean, 1e3 * s.p50, 1e3 * s.p99);
    os << line;
  };
  for (int i = 0; i < static_cast<int>(m.stages.size()); ++i) row(StageTimes::name(i), m.stages[static_cast<std::size_t>(i)]);
  row("total", m.end_to_end);
  return os.str();
}

// ---------------------------------------------------------------------------
// Ablation

namespace {

AblationArm run_arm(const std::string& label, const TrainConfig& cfg, const std::vector<SceneSequence>& train_scenes,
                    const std::vector<SceneSequence>& eval_scenes, std::size_t latency_frames, const ProgressFn& progress) {
  AblationArm arm;
  arm.label = label;
  auto state = train(cfg, train_scenes, nullptr, progress);
  arm.param_count = state->model.parameters().count();
  const auto dets = infer_dataset(state->model, eval_scenes);
  const auto frames = assemble_eval_frames(eval_scenes, dets);
  arm.eval = evaluate(frames, cfg.model.class_names, cfg.model.match);
  NoGradGuard ng;
  std::vector<StageTimes> times;
  const auto t0 = Clock::now();
  std::size_t done = 0;
  for (std::size_t s = 0; done < latency_frames; s = (s + 1) % eval_scenes.size()) {
    SequenceRunner runner(state->model);
    for (std::size_t f = 0; f < eval_scenes[s].frames.size() && done < latency_frames; ++f, ++done) {
      times.push_back(runner.step(eval_scenes[s].frames[f], f).times);
    }
  }
  arm.latency = summarize(label, 1, times, seconds_since(t0));
  return arm;
}

}  // namespace

AblationReport ablation_run(const TrainConfig& a, const TrainConfig& b, const std::vector<SceneSequence>& train_scenes,
                            const std::vector<SceneSequence>& eval_scenes, std::size_t latency_frames,
                            const ProgressFn& progress) {
  if (strip_fmf(a) != strip_fmf(b)) throw UsageError("ablation configs must differ only in their fmf settings");
  std::size_t eval_frames = 0;
  for (const auto& s : eval_scenes) eval_frames += s.frames.size();
  if (eval_frames == 0) throw UsageError("ablation needs at least one evaluation frame");
  if (latency_frames == 0) throw UsageError("ablation latency frame count must be >= 1");
  AblationReport r;
  r.a = run_arm(a.model.fmf.enabled ? "A (fmf)" : "A (baseline)", a, train_scenes, eval_scenes, latency_frames, progress);
  r.b = run_arm(b.model.fmf.enabled ? "B (fmf)" : "B (baseline)", b, train_scenes, eval_scenes, latency_frames, progress);
  r.nds_difference = r.b.eval.NDS - r.a.eval.NDS;
  return r;
}

nlohmann::json to_json(const AblationReport& r) {
  auto arm = [](const AblationArm& x) {
    return nlohmann::json{{"label", x.label}, {"param_count", x.param_count}, {"eval", to_json(x.eval)},
                          {"latency", to_json(x.latency)}};
  };
  return {{"a", arm(r.a)}, {"b", arm(r.b)}, {"nds_a", r.a.eval.NDS}, {"nds_b", r.b.eval.NDS},
          {"nds_difference", r.nds_difference}};
}

std::string format_ablation(const AblationReport& r) {
  std::ostringstream os;
  char line[200];
  std::snprintf(line, sizeof line, "%-8s %-16s %10s %8s %8s %8s %8s %8s %8s %8s\n", "arm", "label", "params", "mAP",
                "mATE", "mASE", "mAOE", "mAVE", "mAAE", "NDS");
  os << line;
  for (const auto* x : {&r.a, &r.b}) {
    const auto& e = x->eval;
    std::snprintf(line, sizeof line, "%-8s %-16s %10zu %8.4f %8.4f %8.4f %8.4f %8.4f %8.4f %8.4f\n",
                  x == &r.a ? "A" : "B", x->label.c_str(), x->param_count, e.mAP, e.mATE, e.mASE, e.mAOE, e.mAVE,
                  e.mAAE, e.NDS);
    os << line;
  }
  std::snprintf(line, sizeof line, "NDS A %.4f  NDS B %.4f  difference (B - A) %+.4f\n\n", r.a.eval.NDS, r.b.eval.NDS,
                r.nds_difference);
  os << line;
  os << "latency " << r.a.label << "\n" << format_bench(r.a.latency) << "latency " << r.b.label << "\n"
     << format_bench(r.b.latency);
  return os.str();
}

}  // namespace fmfnet
