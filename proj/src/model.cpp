#include "fmfnet/model.hpp"

#include <chrono>

#include "fmfnet/errors.hpp"

namespace fmfnet {

namespace {

using Clock = std::chrono::steady_clock;

double seconds_since(Clock::time_point t0) { return std::chrono::duration<double>(Clock::now() - t0).count(); }

}  // namespace

DetectorModel DetectorModel::create(const ModelConfig& cfg, std::uint64_t seed) {
  cfg.validate();
  DetectorModel m;
  m.cfg = cfg;
  Rng pfn_rng(derive_seed(seed, 1));
  Rng neck_rng(derive_seed(seed, 2));
  Rng fmf_rng(derive_seed(seed, 3));
  Rng head_rng(derive_seed(seed, 4));
  m.pfn = PillarFeatureNet::create(cfg.grid.feature_dim(), cfg.backbone.pfn_channels, pfn_rng);
  m.neck = Neck::create(cfg.backbone.pfn_channels, cfg.backbone, neck_rng);
  if (cfg.fmf.enabled) m.fmf = FmfParams::create(cfg.backbone.out_channels, cfg.fmf.kernel_size, fmf_rng);
  m.head = CenterHead::create(cfg.backbone.out_channels, cfg.num_classes(), cfg.head, head_rng);
  return m;
}

ParamSet DetectorModel::parameters() {
  ParamSet set;
  pfn.collect(set, "pfn");
  neck.collect(set, "neck");
  if (fmf) fmf->collect(set, "fmf");
  head.collect(set, "head");
  return set;
}

std::size_t DetectorModel::param_count(const ModelConfig& cfg) {
  std::size_t n = PillarFeatureNet::param_count(cfg.grid.feature_dim(), cfg.backbone.pfn_channels);
  n += Neck::param_count(cfg.backbone.pfn_channels, cfg.backbone);
  if (cfg.fmf.enabled) n += FmfParams::param_count(cfg.backbone.out_channels, cfg.fmf.kernel_size);
  n += CenterHead::param_count(cfg.backbone.out_channels, cfg.num_classes(), cfg.head);
  return n;
}

const char* StageTimes::name(int i) {
  static const char* names[kCount] = {"voxelize", "backbone", "neck", "fmf", "head", "decode"};
  return names[i];
}

double StageTimes::at(int i) const {
  const double v[kCount] = {voxelize, backbone, neck, fmf, head, decode};
  return v[i];
}

Tensor encode_bev(DetectorModel& model, const PointCloudFrame& frame, Mode mode, std::uint64_t voxel_seed,
                 StageTimes* times) {
  auto t0 = Clock::now();
  const PillarTensor pillars = voxelize(frame, model.cfg.grid, voxel_seed);
  if (times) times->voxelize = seconds_since(t0);
  t0 = Clock::now();
  const Tensor pseudo = pillar_feature_net(pillars, model.pfn, mode);
  if (times) times->backbone = seconds_since(t0);
  t0 = Clock::now();
  Tensor bev = neck_forward(pseudo, model.neck, mode);
  if (times) times->neck = seconds_since(t0);
  return bev;
}

std::uint64_t inference_voxel_seed(std::size_t index) { return derive_seed(0x5eed, index); }

SequenceRunner::Output SequenceRunner::step(const PointCloudFrame& frame, std::size_t index) {
  NoGradGuard no_grad;
  const auto start = Clock::now();
  Output out;
  const Tensor cur = encode_bev(model_, frame, Mode::kEval, inference_voxel_seed(index), &out.times);

  auto t0 = Clock::now();
  if (model_.fmf) {
    FmfStepResult r = fmf_step(cur, state_, *model_.fmf, Mode::kEval, model_.cfg.fmf, model_.cfg.geometry(),
                               frame.ego_pose);
    state_ = std::move(r.state);
    out.bev = r.output;
  } else {
    out.bev = cur;
  }
  out.times.fmf = seconds_since(t0);

  t0 = Clock::now();
  out.head = head_forward(out.bev, model_.head);
  out.times.head = seconds_since(t0);

  t0 = Clock::now();
  out.detections = decode(out.head, model_.cfg.geometry(), model_.cfg.match);
  out.times.decode = seconds_since(t0);
  out.times.total = seconds_since(start);
  return out;
}

std::vector<std::vector<Detection>> run_sequence(DetectorModel& model, const SceneSequence& seq,
                                                 std::vector<StageTimes>* times) {
  SequenceRunner runner(model);
  std::vector<std::vector<Detection>> dets;
  dets.reserve(seq.frames.size());
  for (std::size_t i = 0; i < seq.frames.size(); ++i) {
    auto out = runner.step(seq.frames[i], i);
    dets.push_back(std::move(out.detections));
    if (times) times->push_back(out.times);
  }
  return dets;
}

}  // namespace fmfnet
