#pragma once

#include <cstdint>
#include <filesystem>
#include <functional>
#include <string>
#include <vector>

#include "fmfnet/metrics.hpp"
#include "fmfnet/model.hpp"

namespace fmfnet {

// Augmentation ---------------------------------------------------------------

struct AugmentParams {
  bool flip_x = false;  // y -> -y
  bool flip_y = false;  // x -> -x
  double rotation = 0.0;
  double scale = 1.0;

  bool is_identity() const { return !flip_x && !flip_y && rotation == 0.0 && scale == 1.0; }
};

AugmentParams sample_augment(const AugmentConfig& cfg, std::uint64_t seed);

/// X-flip, Y-flip, rotation, scale, in that order, applied to points and
/// boxes (centers, sizes, yaw, velocities). Poses are left untouched.
PointCloudFrame apply_augment(const PointCloudFrame& frame, const AugmentParams& p);

/// Draws parameters from `seed` and applies them.
PointCloudFrame augment(const PointCloudFrame& frame, const AugmentConfig& cfg, std::uint64_t seed);

/// A relative pose between two frames expressed in augmented coordinates.
Pose2D conjugate_pose(const Pose2D& rel, const AugmentParams& p);

// Schedule and optimizer -------------------------------------------------------

struct LrMomentum {
  double lr = 0.0;
  double momentum = 0.0;
};

/// Cosine one-cycle: lr climbs from lr_init/10 to lr_init over the first 40%
/// of the steps and anneals to lr_init/1000; momentum mirrors it between
/// high and low.
LrMomentum one_cycle_lr(int step, int total_steps, double lr_init, double momentum_low = 0.85,
                        double momentum_high = 0.95);

/// Adam with decoupled weight decay; beta1 follows the scheduled momentum.
class AdamW {
 public:
  AdamW(double beta2 = 0.999, double eps = 1e-8) : beta2_(beta2), eps_(eps) {}

  /// p <- p * (1 - lr * wd) - lr * m_hat / (sqrt(v_hat) + eps).
  void step(std::vector<NamedTensor>& params, double lr, double beta1, double weight_decay);

  std::int64_t steps() const { return t_; }
  std::vector<std::vector<double>>& first_moments() { return m_; }
  std::vector<std::vector<double>>& second_moments() { return v_; }
  void set_steps(std::int64_t t) { t_ = t; }

 private:
  double beta2_, eps_;
  std::int64_t t_ = 0;
  std::vector<std::vector<double>> m_, v_;
};

// Training ---------------------------------------------------------------------

struct LossRecord {
  int step = 0;
  double lr = 0;
  double hm = 0, offset = 0, size = 0, height = 0, rotation = 0, velocity = 0, total = 0;
};

struct TrainState {
  TrainConfig cfg;
  DetectorModel model;
  AdamW optimizer;
  int step = 0;
};

/// Loss breakdown of one (t-1, t) sample; gradients flow through both frames.
LossBreakdown pair_loss(DetectorModel& model, const PointCloudFrame& prev, const PointCloudFrame& cur, Mode mode,
                        std::uint64_t voxel_seed_prev, std::uint64_t voxel_seed_cur,
                        const std::optional<Pose2D>& relative = std::nullopt);

using ProgressFn = std::function<void(const LossRecord&)>;

/// Trains from scratch. Sequential and deterministic for a fixed seed.
/// Raises NumericDivergence on a non-finite loss.
std::unique_ptr<TrainState> train(const TrainConfig& cfg, const std::vector<SceneSequence>& scenes,
                                  std::vector<LossRecord>* trace = nullptr, const ProgressFn& progress = {});

int total_train_steps(const TrainConfig& cfg, const std::vector<SceneSequence>& scenes);

void write_loss_trace(const std::filesystem::path& path, const std::vector<LossRecord>& trace);

// Checkpoints --------------------------------------------------------------------

void save_checkpoint(TrainState& state, const std::filesystem::path& path);
std::unique_ptr<TrainState> load_checkpoint(const std::filesystem::path& path);

// Inference helpers --------------------------------------------------------------

/// Runs every sequence; frame indices in the result are global (sequence-major).
std::vector<FrameDetection> infer_dataset(DetectorModel& model, const std::vector<SceneSequence>& scenes);

/// Pairs detections (global frame ids) with the ground truth of each frame.
std::vector<EvalFrame> assemble_eval_frames(const std::vector<SceneSequence>& scenes,
                                            const std::vector<FrameDetection>& dets);

// Benchmark ----------------------------------------------------------------------

struct LatencyStats {
  double mean = 0, p50 = 0, p99 = 0;
};

LatencyStats latency_stats(std::vector<double> samples);

struct BenchMode {
  std::string name;
  int threads = 1;
  std::size_t frames = 0;
  double wall_seconds = 0;
  std::vector<LatencyStats> stages;  // StageTimes::kCount entries
  LatencyStats end_to_end;
};

struct BenchReport {
  BenchMode sequential;
  BenchMode parallel;
  /// Detections of the sequential pass (global frame ids).
  std::vector<FrameDetection> detections;
};

/// Times `num_frames` inference steps, cycling over the sequences. The
/// parallel pass runs different sequences on `threads` workers at once.
BenchReport bench(DetectorModel& model, const std::vector<SceneSequence>& scenes, std::size_t num_frames,
                  int threads);

nlohmann::json to_json(const BenchMode& m);
std::string format_bench(const BenchMode& m);

// Ablation -----------------------------------------------------------------------

struct AblationArm {
  std::string label;
  std::size_t param_count = 0;
  EvalResult eval;
  BenchMode latency;
};

struct AblationReport {
  AblationArm a, b;
  double nds_difference = 0;  // b - a
};

/// Trains both configurations on `train_scenes`, evaluates on `eval_scenes`
/// and times inference over at least `latency_frames` frames. The configs
/// must differ only in their fmf block (UsageError otherwise).
AblationReport ablation_run(const TrainConfig& a, const TrainConfig& b, const std::vector<SceneSequence>& train_scenes,
                            const std::vector<SceneSequence>& eval_scenes, std::size_t latency_frames = 100,
                            const ProgressFn& progress = {});

nlohmann::json to_json(const AblationReport& r);
std::string format_ablation(const AblationReport& r);

}  // namespace fmfnet
