#pragma once

#include <cstdint>
#include <optional>
#include <vector>

#include "fmfnet/config.hpp"

namespace fmfnet {

/// PFN -> neck -> optional FMF -> multi-task head.
struct DetectorModel {
  ModelConfig cfg;
  PillarFeatureNet pfn;
  Neck neck;
  std::optional<FmfParams> fmf;  // present iff cfg.fmf.enabled
  CenterHead head;

  /// Each component draws from its own seed stream, so toggling FMF leaves
  /// the other initial weights unchanged.
  static DetectorModel create(const ModelConfig& cfg, std::uint64_t seed);

  /// Named parameters and buffers. Pointers stay valid while the model lives
  /// at the same address.
  ParamSet parameters();
  static std::size_t param_count(const ModelConfig& cfg);
};

/// Wall-clock seconds per stage of one inference step.
struct StageTimes {
  double voxelize = 0, backbone = 0, neck = 0, fmf = 0, head = 0, decode = 0;
  double total = 0;

  static constexpr int kCount = 6;
  static const char* name(int i);
  double at(int i) const;
};

/// Voxelize -> PFN -> neck: the per-frame BEV map before aggregation.
Tensor encode_bev(DetectorModel& model, const PointCloudFrame& frame, Mode mode, std::uint64_t voxel_seed,
                 StageTimes* times = nullptr);

/// Seed used for voxel sampling of frame `index` at inference.
std::uint64_t inference_voxel_seed(std::size_t index);

/// Stateful frame-by-frame inference in eval mode without gradients.
class SequenceRunner {
 public:
  explicit SequenceRunner(DetectorModel& model) : model_(model) {}

  struct Output {
    HeadOutput head;
    Tensor bev;  // aggregated map fed to the head
    std::vector<Detection> detections;
    StageTimes times;
  };

  Output step(const PointCloudFrame& frame, std::size_t index);
  void reset() { state_ = FmfState{}; }

 private:
  DetectorModel& model_;
  FmfState state_;
};

/// Runs one sequence from a fresh state; detections per frame.
std::vector<std::vector<Detection>> run_sequence(DetectorModel& model, const SceneSequence& seq,
                                                 std::vector<StageTimes>* times = nullptr);

}  // namespace fmfnet
