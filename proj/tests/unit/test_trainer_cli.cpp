#include <doctest.h>

#include <sys/wait.h>

#include <cmath>
#include <cstdlib>
#include <filesystem>
#include <fstream>
#include <numbers>

#include "fmfnet/errors.hpp"
#include "fmfnet/frame_io.hpp"
#include "fmfnet/train.hpp"

using namespace fmfnet;
namespace fs = std::filesystem;

namespace {

ModelConfig small_model() {
  ModelConfig c;
  c.backbone.pfn_channels = 8;
  c.backbone.neck_channels = {8, 16};
  c.backbone.upsample_channels = 8;
  c.backbone.out_channels = 16;
  c.head.head_channels = 8;
  return c;
}

TrainConfig small_train(int steps) {
  TrainConfig t;
  t.model = small_model();
  t.max_steps = steps;
  t.batch_size = 1;
  return t;
}

std::vector<SceneSequence> small_data(int sequences, int frames, std::uint64_t seed) {
  std::vector<SceneSequence> out;
  for (int i = 0; i < sequences; ++i) {
    SceneSpec s;
    s.num_frames = frames;
    s.num_objects = 3;
    s.seed = seed + static_cast<std::uint64_t>(i);
    s.ego_speed = 1.0;
    s.clutter_points = 300;
    out.push_back(generate_scene(s));
  }
  return out;
}

fs::path scratch(const std::string& name) {
  const fs::path p = fs::temp_directory_path() / ("fmfnet_trainer_test_" + name);
  fs::remove_all(p);
  return p;
}

bool frames_equal(const PointCloudFrame& a, const PointCloudFrame& b, double tol) {
  if (a.points.size() != b.points.size() || a.gt_boxes.size() != b.gt_boxes.size()) return false;
  for (std::size_t i = 0; i < a.points.size(); ++i) {
    const auto &p = a.points[i], &q = b.points[i];
    if (std::abs(p.x - q.x) > tol || std::abs(p.y - q.y) > tol || std::abs(p.z - q.z) > tol || p.intensity != q.intensity)
      return false;
  }
  for (std::size_t i = 0; i < a.gt_boxes.size(); ++i) {
    const auto &p = a.gt_boxes[i], &q = b.gt_boxes[i];
    const double d[] = {p.cx - q.cx, p.cy - q.cy, p.cz - q.cz, p.w - q.w, p.l - q.l,
                        p.h - q.h,   p.vx - q.vx, p.vy - q.vy, wrap_angle(p.yaw - q.yaw)};
    for (double v : d)
      if (std::abs(v) > tol) return false;
  }
  return true;
}

int run_cli(const std::string& args) {
  const std::string cmd = std::string(FMFNET_CLI) + " " + args + " > /dev/null 2>&1";
  const int status = std::system(cmd.c_str());
  return WIFEXITED(status) ? WEXITSTATUS(status) : -1;
}

}  // namespace

TEST_CASE("disabled augmentation is the identity") {
  const auto frame = small_data(1, 1, 3)[0].frames[0];
  const AugmentParams p = sample_augment(AugmentConfig::none(), 17);
  CHECK(p.is_identity());
  CHECK(augment(frame, AugmentConfig::none(), 17) == frame);
}

TEST_CASE("flips are involutions") {
  const auto frame = small_data(1, 1, 4)[0].frames[0];
  for (auto p : {AugmentParams{true, false, 0, 1}, AugmentParams{false, true, 0, 1}, AugmentParams{true, true, 0, 1}}) {
    CHECK(apply_augment(apply_augment(frame, p), p) == frame);
  }
}

TEST_CASE("rotation by theta then minus theta restores the frame") {
  const auto frame = small_data(1, 1, 5)[0].frames[0];
  for (double theta : {0.3, -std::numbers::pi / 8, 1e-3}) {
    const auto back = apply_augment(apply_augment(frame, {false, false, theta, 1.0}), {false, false, -theta, 1.0});
    CHECK(frames_equal(back, frame, 1e-9));
  }
  const auto scaled = apply_augment(frame, {false, false, 0.0, 1.05});
  CHECK(frames_equal(apply_augment(scaled, {false, false, 0.0, 1.0 / 1.05}), frame, 1e-9));
}

TEST_CASE("sampled augmentation stays in range") {
  const AugmentConfig cfg;
  int fx = 0, fy = 0;
  for (std::uint64_t s = 0; s < 400; ++s) {
    const AugmentParams p = sample_augment(cfg, s);
    CHECK(std::abs(p.rotation) <= std::numbers::pi / 8);
    CHECK(p.scale >= 0.95);
    CHECK(p.scale <= 1.05);
    fx += p.flip_x;
    fy += p.flip_y;
  }
  CHECK(fx > 150);
  CHECK(fx < 250);
  CHECK(fy > 150);
  CHECK(fy < 250);
}

TEST_CASE("flipped labels agree with flipped target maps") {
  const BevGeometry g = output_geometry(desk_pillar_config(), 2);
  int compared = 0;
  for (const auto& seq : small_data(4, 4, 20)) {
    for (const auto& frame : seq.frames) {
      bool on_edge = false;
      for (const auto& b : frame.gt_boxes) {
        on_edge = on_edge || std::floor(g.to_px(b.cx)) == g.to_px(b.cx) || std::floor(g.to_py(b.cy)) == g.to_py(b.cy);
      }
      if (on_edge) continue;
      const TargetMaps base = render_targets(frame.gt_boxes, g, 2);
      for (auto p : {AugmentParams{true, false, 0, 1}, AugmentParams{false, true, 0, 1}}) {
        const TargetMaps t = render_targets(apply_augment(frame, p).gt_boxes, g, 2);
        REQUIRE(t.num_objects() == base.num_objects());
        for (int k = 0; k < 2; ++k)
          for (int r = 0; r < g.height; ++r)
            for (int c = 0; c < g.width; ++c) {
              const int rr = p.flip_x ? g.height - 1 - r : r;
              const int cc = p.flip_y ? g.width - 1 - c : c;
              CHECK(t.heat(k, r, c) == base.heat(k, rr, cc));
            }
        ++compared;
      }
    }
  }
  CHECK(compared > 10);
}

TEST_CASE("conjugate pose maps augmented previous-frame points") {
  // rel is the previous ego frame seen from the current one: q = R(yaw) p + t.
  const Pose2D prev{1.0, -0.5, 0.2}, cur{3.0, 0.5, -0.1};
  const Pose2D rel = relative_pose(prev, cur);
  auto apply = [](const Pose2D& T, double x, double y) {
    const double c = std::cos(T.yaw), s = std::sin(T.yaw);
    return std::array<double, 2>{c * x - s * y + T.tx, s * x + c * y + T.ty};
  };
  auto aug_point = [](const AugmentParams& p, double x, double y) {
    PointCloudFrame f;
    f.points.push_back({x, y, 0.0, 0.0});
    const auto out = apply_augment(f, p).points[0];
    return std::array<double, 2>{out.x, out.y};
  };
  for (const AugmentParams& p : {AugmentParams{}, AugmentParams{true, false, 0.0, 1.0}, AugmentParams{false, true, 0.3, 1.0},
                                 AugmentParams{true, true, -0.2, 1.04}, AugmentParams{true, false, 0.35, 0.96}}) {
    const Pose2D conj = conjugate_pose(rel, p);
    for (const auto& pt : {std::array<double, 2>{0.0, 0.0}, {4.0, -2.0}, {-7.5, 3.25}}) {
      const auto q = apply(rel, pt[0], pt[1]);
      const auto want = aug_point(p, q[0], q[1]);
      const auto pa = aug_point(p, pt[0], pt[1]);
      const auto got = apply(conj, pa[0], pa[1]);
      CHECK(std::abs(got[0] - want[0]) < 1e-12);
      CHECK(std::abs(got[1] - want[1]) < 1e-12);
    }
  }
}

TEST_CASE("one-cycle schedule endpoints and smoothness") {
  const int T = 1000;
  const double lr0 = 0.003;
  CHECK(one_cycle_lr(0, T, lr0).lr == doctest::Approx(0.0003).epsilon(1e-12));
  CHECK(one_cycle_lr(0, T, lr0).momentum == doctest::Approx(0.95).epsilon(1e-12));
  CHECK(one_cycle_lr(400, T, lr0).lr == doctest::Approx(0.003).epsilon(1e-12));
  CHECK(one_cycle_lr(400, T, lr0).momentum == doctest::Approx(0.85).epsilon(1e-12));
  CHECK(one_cycle_lr(T, T, lr0).lr == doctest::Approx(lr0 / 1000).epsilon(1e-12));
  CHECK(one_cycle_lr(T, T, lr0).momentum == doctest::Approx(0.95).epsilon(1e-12));
  CHECK_THROWS_AS(one_cycle_lr(-1, T, lr0), UsageError);
  CHECK_THROWS_AS(one_cycle_lr(T + 1, T, lr0), UsageError);

  // Largest slope of a half-cosine segment rising by delta over L steps.
  const double warm = 0.4 * T, decay = 0.6 * T;
  const double bound = std::max(std::numbers::pi * (lr0 - lr0 / 10) / (2 * warm),
                                std::numbers::pi * (lr0 - lr0 / 1000) / (2 * decay));
  double max_jump = 0;
  for (int s = 1; s <= T; ++s) {
    const auto a = one_cycle_lr(s - 1, T, lr0), b = one_cycle_lr(s, T, lr0);
    max_jump = std::max(max_jump, std::abs(b.lr - a.lr));
    const bool rising = s <= warm;
    CHECK((rising ? b.lr >= a.lr : b.lr <= a.lr));
    CHECK((rising ? b.momentum <= a.momentum : b.momentum >= a.momentum));
  }
  CHECK(max_jump <= bound * (1 + 1e-9));
  CHECK(max_jump > 0.99 * bound);
}

TEST_CASE("AdamW with zero gradient only applies the decoupled decay") {
  Tensor a = Tensor::from_vector({2, 3}, {1.0, -2.0, 3.5, 0.25, -0.125, 7.0});
  Tensor b = Tensor::from_vector({4}, {0.5, 0.5, -1.0, 2.0});
  a.set_requires_grad(true);
  const std::vector<double> a0(a.data().begin(), a.data().end()), b0(b.data().begin(), b.data().end());
  std::vector<NamedTensor> params{{"a", a}, {"b", b}};
  AdamW opt;
  const double lr = 0.003, wd = 0.01;
  opt.step(params, lr, 0.9, wd);
  for (std::size_t i = 0; i < a0.size(); ++i) CHECK(a.data()[i] == a0[i] * (1 - lr * wd));
  for (std::size_t i = 0; i < b0.size(); ++i) CHECK(b.data()[i] == b0[i] * (1 - lr * wd));
  CHECK(opt.steps() == 1);
}

TEST_CASE("AdamW first step moves by lr against the gradient sign") {
  Tensor w = Tensor::from_vector({3}, {1.0, 1.0, 1.0});
  w.set_requires_grad(true);
  sum(mul(w, Tensor::from_vector({3}, {2.0, -3.0, 0.5}))).backward();
  std::vector<NamedTensor> params{{"w", w}};
  AdamW opt;
  opt.step(params, 0.1, 0.9, 0.0);
  CHECK(w.data()[0] == doctest::Approx(0.9).epsilon(1e-6));
  CHECK(w.data()[1] == doctest::Approx(1.1).epsilon(1e-6));
  CHECK(w.data()[2] == doctest::Approx(0.9).epsilon(1e-6));
}

TEST_CASE("disabling FMF removes exactly the FMF parameters") {
  ModelConfig on = small_model();
  ModelConfig off = on;
  off.fmf.enabled = false;
  const std::size_t fmf = FmfParams::param_count(on.backbone.out_channels, on.fmf.kernel_size);
  CHECK(DetectorModel::param_count(on) - DetectorModel::param_count(off) == fmf);
  auto m_on = DetectorModel::create(on, 3);
  auto m_off = DetectorModel::create(off, 3);
  CHECK(m_on.parameters().count() == DetectorModel::param_count(on));
  CHECK(m_off.parameters().count() == DetectorModel::param_count(off));
  // Shared components draw from the same seed streams.
  CHECK(m_on.head.heatmap.out.weight.data()[0] == m_off.head.heatmap.out.weight.data()[0]);
}

TEST_CASE("first ten loss-trace entries are bit-identical across runs") {
  const auto data = small_data(2, 3, 30);
  TrainConfig cfg = small_train(10);
  std::vector<LossRecord> a, b;
  train(cfg, data, &a);
  train(cfg, data, &b);
  REQUIRE(a.size() == 10);
  REQUIRE(b.size() == 10);
  for (std::size_t i = 0; i < 10; ++i) {
    CHECK(a[i].total == b[i].total);
    CHECK(a[i].hm == b[i].hm);
    CHECK(a[i].lr == b[i].lr);
    CHECK(std::isfinite(a[i].total));
  }
  cfg.seed = 2;
  std::vector<LossRecord> c;
  train(cfg, data, &c);
  CHECK(c[0].total != a[0].total);

  const fs::path csv = scratch("trace.csv");
  write_loss_trace(csv, a);
  std::ifstream in(csv);
  std::string header;
  std::getline(in, header);
  CHECK(header == "step,lr,L_hm,L_l,L_s,L_H,L_r,L_v,L_total");
  int lines = 0;
  for (std::string l; std::getline(in, l);) ++lines;
  CHECK(lines == 10);
  fs::remove(csv);
}

TEST_CASE("training rejects bad inputs") {
  TrainConfig cfg = small_train(2);
  CHECK_THROWS_AS(train(cfg, {}), UsageError);
  CHECK_THROWS_AS(train(cfg, small_data(1, 1, 1)), UsageError);
  auto data = small_data(1, 2, 1);
  data[0].class_names = {"bus", "tram"};
  CHECK_THROWS_AS(train(cfg, data), ConfigError);
  cfg.lr_init = 1e200;
  CHECK_THROWS_AS(train(cfg, small_data(1, 3, 1)), NumericDivergence);
}

TEST_CASE("checkpoint round-trip reproduces inference bit-exactly") {
  const auto data = small_data(1, 4, 40);
  auto state = train(small_train(3), data);
  const fs::path path = scratch("model.ckpt");
  save_checkpoint(*state, path);
  auto loaded = load_checkpoint(path);
  CHECK(loaded->step == 3);
  CHECK(loaded->optimizer.steps() == state->optimizer.steps());
  CHECK(loaded->optimizer.first_moments() == state->optimizer.first_moments());

  SequenceRunner ra(state->model), rb(loaded->model);
  for (std::size_t f = 0; f < data[0].frames.size(); ++f) {
    const auto a = ra.step(data[0].frames[f], f);
    const auto b = rb.step(data[0].frames[f], f);
    const std::vector<double> ha(a.head.heatmap.data().begin(), a.head.heatmap.data().end());
    const std::vector<double> hb(b.head.heatmap.data().begin(), b.head.heatmap.data().end());
    CHECK(ha == hb);
    CHECK(a.detections == b.detections);
  }

  // Corrupt copies are rejected.
  std::ifstream in(path, std::ios::binary);
  std::string bytes((std::istreambuf_iterator<char>(in)), {});
  const fs::path bad = scratch("bad.ckpt");
  std::ofstream(bad, std::ios::binary) << bytes.substr(0, bytes.size() / 2);
  CHECK_THROWS_AS(load_checkpoint(bad), IoError);
  bytes[0] = 'X';
  std::ofstream(bad, std::ios::binary) << bytes;
  CHECK_THROWS_AS(load_checkpoint(bad), FormatError);
  fs::remove(path);
  fs::remove(bad);
}

TEST_CASE("inference detections are deterministic") {
  const auto data = small_data(2, 3, 50);
  auto state = train(small_train(2), data);
  const auto a = infer_dataset(state->model, data);
  const auto b = infer_dataset(state->model, data);
  REQUIRE(a.size() == b.size());
  for (std::size_t i = 0; i < a.size(); ++i) {
    CHECK(a[i].frame == b[i].frame);
    CHECK(a[i].det == b[i].det);
  }
  const auto frames = assemble_eval_frames(data, a);
  CHECK(frames.size() == 6);
  CHECK_THROWS_AS(assemble_eval_frames(data, {{99, Detection{}}}), UsageError);
}

TEST_CASE("bench accounting") {
  const auto data = small_data(2, 4, 60);
  auto model = DetectorModel::create(small_model(), 1);
  CHECK_THROWS_AS(bench(model, data, 0, 1), UsageError);
  const BenchReport a = bench(model, data, 12, 2);
  const BenchReport b = bench(model, data, 12, 2);
  CHECK(a.sequential.frames == 12);
  CHECK(a.parallel.frames == 12);
  REQUIRE(a.sequential.stages.size() == StageTimes::kCount);
  double stage_sum = 0;
  for (const auto& s : a.sequential.stages) stage_sum += s.mean;
  CHECK(stage_sum <= a.sequential.end_to_end.mean * 1.0001);
  CHECK(stage_sum >= 0.9 * a.sequential.end_to_end.mean);
  REQUIRE(a.detections.size() == b.detections.size());
  for (std::size_t i = 0; i < a.detections.size(); ++i) CHECK(a.detections[i].det == b.detections[i].det);

  const LatencyStats st = latency_stats({5, 1, 3, 2, 4});
  CHECK(st.mean == 3.0);
  CHECK(st.p50 == 3.0);
  CHECK(st.p99 == 5.0);
}

TEST_CASE("ablation requires configs that differ only in fmf") {
  const auto train_data = small_data(1, 3, 70);
  const auto eval_data = small_data(2, 3, 80);
  TrainConfig a = small_train(2);
  TrainConfig b = a;
  b.lr_init = 0.001;
  CHECK_THROWS_AS(ablation_run(a, b, train_data, eval_data, 4), UsageError);

  const AblationReport same = ablation_run(a, a, train_data, eval_data, 4);
  CHECK(same.a.eval.NDS == same.b.eval.NDS);
  CHECK(same.a.eval.mAP == same.b.eval.mAP);
  CHECK(same.nds_difference == 0.0);
  CHECK(same.a.latency.frames == 4);

  b = a;
  b.model.fmf.enabled = false;
  const AblationReport r = ablation_run(a, b, train_data, eval_data, 4);
  CHECK(r.a.param_count > r.b.param_count);
  const auto j = to_json(r);
  CHECK(j.contains("nds_a"));
  CHECK(j.contains("nds_b"));
  CHECK(j["a"]["latency"]["stages"].contains("fmf"));
  CHECK(format_ablation(r).find("difference") != std::string::npos);
}

TEST_CASE("config overrides") {
  TrainConfig cfg;
  apply_override(cfg, "lr_init=0.01");
  apply_override(cfg, "model.fmf.enabled=false");
  apply_override(cfg, "model.class_names=[\"car\",\"bus\",\"tram\"]");
  CHECK(cfg.lr_init == 0.01);
  CHECK_FALSE(cfg.model.fmf.enabled);
  CHECK(cfg.model.num_classes() == 3);
  CHECK_THROWS_AS(apply_override(cfg, "model.nope=1"), ConfigError);
  CHECK_THROWS_AS(apply_override(cfg, "lr_init"), ConfigError);
  CHECK_THROWS_AS(apply_override(cfg, "lr_init=\"fast\""), ConfigError);
  const TrainConfig back = train_config_from_json(to_json(cfg));
  CHECK(to_json(back) == to_json(cfg));
}

TEST_CASE("command-line exit codes") {
  const fs::path dir = scratch("cli");
  fs::create_directories(dir);
  const std::string data = (dir / "data").string();
  CHECK(run_cli("") == 2);
  CHECK(run_cli("frobnicate") == 2);
  CHECK(run_cli("gen-data --out " + data + " --set num_sequences=1 --set scene.num_frames=3 --set scene.clutter_points=200") == 0);
  CHECK(fs::exists(dir / "data" / "seq_0000" / "manifest.json"));
  CHECK(run_cli("gen-data --out " + data + " --set scene.bogus=1") == 2);

  const std::string small = "--set model.backbone.pfn_channels=8 --set model.backbone.neck_channels=[8,16] "
                            "--set model.backbone.upsample_channels=8 --set model.backbone.out_channels=16 "
                            "--set model.head.head_channels=8 --set batch_size=1 --quiet";
  const std::string ckpt = (dir / "m.ckpt").string();
  CHECK(run_cli("train --data " + data + " --out " + ckpt + " --set max_steps=2 " + small) == 0);
  CHECK(fs::exists(ckpt));
  CHECK(fs::exists(dir / "m.loss.csv"));
  CHECK(run_cli("train --data " + data + " --out " + ckpt + " --set lr_init=-1") == 2);
  CHECK(run_cli("train --data " + data + " --out " + (dir / "x.ckpt").string() + " --set max_steps=3 --set lr_init=1e200 " +
                small) == 4);
  CHECK(run_cli("train --data " + (dir / "missing").string() + " --out " + ckpt) == 3);

  const std::string dets = (dir / "d.jsonl").string();
  CHECK(run_cli("infer --ckpt " + ckpt + " --data " + data + " --out " + dets) == 0);
  CHECK(run_cli("eval --dets " + dets + " --data " + data + " --out " + (dir / "r.json").string()) == 0);
  CHECK(run_cli("eval --dets " + dets + " --data " + data + " --out " + (dir / "nested" / "deeper" / "r.json").string()) == 0);
  CHECK(fs::exists(dir / "nested" / "deeper" / "r.json"));
  CHECK(fs::exists(dir / "r.json"));
  CHECK(run_cli("bench --ckpt " + ckpt + " --data " + data + " --frames 0") == 2);
  CHECK(run_cli("bench --ckpt " + ckpt + " --data " + data + " --frames 3 --threads 2") == 0);

  std::ofstream(dir / "garbage.ckpt") << "not a checkpoint at all";
  CHECK(run_cli("infer --ckpt " + (dir / "garbage.ckpt").string() + " --data " + data + " --out " + dets) == 3);
  std::ofstream(dir / "data" / "seq_0000" / frame_file_name(1), std::ios::trunc) << "FMFPC1";
  CHECK(run_cli("infer --ckpt " + ckpt + " --data " + data + " --out " + dets) == 3);
  fs::remove_all(dir);
}
