#include "fmfnet/gradcheck.hpp"

#include <algorithm>
#include <cmath>

#include "fmfnet/errors.hpp"
#include "fmfnet/train.hpp"

namespace fmfnet {

double gradient_error(double analytic, double numeric) {
  const double denom = std::max({std::abs(analytic), std::abs(numeric), 1e-3});
  return std::abs(analytic - numeric) / denom;
}

GradCheckResult check_gradients(const std::string& name, const std::function<Tensor()>& loss,
                                const std::vector<Tensor>& inputs, double tolerance, double eps,
                                std::size_t max_per_input, std::uint64_t seed) {
  GradCheckResult res;
  res.name = name;
  res.tolerance = tolerance;
  for (Tensor t : inputs) {
    if (!t.requires_grad()) throw UsageError("check_gradients: every input must require gradients");
    t.zero_grad();
  }
  loss().backward();
  std::vector<std::vector<double>> analytic;
  for (const auto& t : inputs) {
    if (t.has_grad()) {
      analytic.emplace_back(t.grad().begin(), t.grad().end());
    } else {
      analytic.emplace_back(t.numel(), 0.0);
    }
  }

  NoGradGuard ng;
  Rng rng(seed);
  for (std::size_t i = 0; i < inputs.size(); ++i) {
    Tensor t = inputs[i];
    const std::size_t n = t.numel();
    std::vector<std::size_t> idx;
    if (max_per_input == 0 || max_per_input >= n) {
      idx.resize(n);
      for (std::size_t k = 0; k < n; ++k) idx[k] = k;
    } else {
      idx = rng.sample_without_replacement(n, max_per_input);
    }
    for (std::size_t k : idx) {
      auto data = t.mutable_data();
      const double orig = data[k];
      data[k] = orig + eps;
      const double fp = loss().item();
      t.mutable_data()[k] = orig - eps;
      const double fm = loss().item();
      t.mutable_data()[k] = orig;
      const double numeric = (fp - fm) / (2.0 * eps);
      res.max_error = std::max(res.max_error, gradient_error(analytic[i][k], numeric));
      ++res.checked;
    }
  }
  return res;
}

namespace {

Tensor rand_tensor(Shape shape, Rng& rng, double lo = -1.0, double hi = 1.0) {
  std::vector<double> v(shape_numel(shape));
  for (auto& x : v) x = rng.uniform(lo, hi);
  return Tensor::from_vector(std::move(shape), std::move(v), true);
}

/// Values bounded away from zero (for kinks at 0).
Tensor rand_away_from_zero(Shape shape, Rng& rng) {
  std::vector<double> v(shape_numel(shape));
  for (auto& x : v) x = (rng.bernoulli(0.5) ? 1.0 : -1.0) * rng.uniform(0.1, 1.0);
  return Tensor::from_vector(std::move(shape), std::move(v), true);
}

/// Distinct values in shuffled order (for max ops).
Tensor rand_distinct(Shape shape, Rng& rng) {
  const std::size_t n = shape_numel(shape);
  std::vector<double> v(n);
  for (std::size_t i = 0; i < n; ++i) v[i] = -1.0 + 2.0 * static_cast<double>(i) / static_cast<double>(n) + 0.3 / static_cast<double>(n) * rng.uniform();
  for (std::size_t i = n; i > 1; --i) std::swap(v[i - 1], v[rng.index(i)]);
  return Tensor::from_vector(std::move(shape), std::move(v), true);
}

/// Scalar probe sum(f(x) * R) with a fixed random R.
std::function<Tensor()> probe(std::function<Tensor()> f, Rng& rng) {
  const Tensor sample = [&] {
    NoGradGuard ng;
    return f();
  }();
  std::vector<double> r(sample.numel());
  for (auto& x : r) x = rng.uniform(-1.0, 1.0);
  const Tensor weights = Tensor::from_vector(sample.shape(), std::move(r));
  return [f = std::move(f), weights] { return sum(mul(f(), weights)); };
}

PointCloudFrame tiny_frame(Rng& rng, const GridConfig& grid, const std::vector<Box3D>& boxes) {
  PointCloudFrame f;
  for (int i = 0; i < 120; ++i) {
    Point p;
    p.x = rng.uniform(grid.x_range.min, grid.x_range.max);
    p.y = rng.uniform(grid.y_range.min, grid.y_range.max);
    p.z = rng.uniform(-2.0, 1.0);
    p.intensity = rng.uniform();
    f.points.push_back(p);
  }
  f.gt_boxes = boxes;
  return f;
}

}  // namespace

std::vector<GradCheckResult> op_gradcheck_suite(std::uint64_t seed) {
  constexpr double tol = 1e-5;
  Rng rng(seed);
  std::vector<GradCheckResult> out;
  auto run = [&](const std::string& name, std::function<Tensor()> f, std::vector<Tensor> in) {
    out.push_back(check_gradients(name, probe(std::move(f), rng), in, tol));
  };
  auto run_scalar = [&](const std::string& name, std::function<Tensor()> f, std::vector<Tensor> in) {
    out.push_back(check_gradients(name, std::move(f), in, tol));
  };

  {
    Tensor a = rand_tensor({3, 4}, rng), b = rand_tensor({3, 4}, rng);
    run("add", [=] { return add(a, b); }, {a, b});
    run("sub", [=] { return sub(a, b); }, {a, b});
    run("mul", [=] { return mul(a, b); }, {a, b});
    run("scale", [=] { return scale(a, -1.7); }, {a});
    run("sigmoid", [=] { return sigmoid(scale(a, 3.0)); }, {a});
    run("reshape", [=] { return reshape(a, {2, 6}); }, {a});
    run_scalar("sum", [=] { return sum(a); }, {a});
    run_scalar("mean", [=] { return mean(a); }, {a});
  }
  {
    Tensor a = rand_away_from_zero({5, 3}, rng);
    run("abs", [=] { return abs(a); }, {a});
    run("relu", [=] { return relu(a); }, {a});
  }
  {
    Tensor x = rand_tensor({1, 2, 6, 5}, rng), w = rand_tensor({3, 2, 3, 3}, rng), b = rand_tensor({3}, rng);
    run("conv2d 3x3 stride 1", [=] { return conv2d(x, w, b, 1, 1); }, {x, w, b});
    run("conv2d 3x3 stride 2", [=] { return conv2d(x, w, b, 2, 1); }, {x, w, b});
    Tensor w1 = rand_tensor({4, 2, 1, 1}, rng);
    run("conv2d 1x1 no bias", [=] { return conv2d(x, w1, Tensor(), 1, 0); }, {x, w1});
  }
  {
    Tensor x = rand_tensor({2, 3, 3, 2}, rng);
    BatchNorm bn = BatchNorm::create(3);
    for (auto& v : bn.gamma.mutable_data()) v = rng.uniform(0.5, 1.5);
    for (auto& v : bn.beta.mutable_data()) v = rng.uniform(-0.5, 0.5);
    run("batch_norm train", [=]() mutable { return batch_norm(x, bn, Mode::kTrain); }, {x, bn.gamma, bn.beta});
    for (auto& v : bn.running_var) v = rng.uniform(0.5, 2.0);
    for (auto& v : bn.running_mean) v = rng.uniform(-0.5, 0.5);
    run("batch_norm eval", [=]() mutable { return batch_norm(x, bn, Mode::kEval); }, {x, bn.gamma, bn.beta});
  }
  {
    Tensor a = rand_tensor({1, 2, 3, 3}, rng), b = rand_tensor({1, 3, 3, 3}, rng);
    run("concat_channels", [=] { return concat_channels({a, b}); }, {a, b});
    run("upsample_nearest", [=] { return upsample_nearest(a, 2); }, {a});
  }
  {
    Tensor x = rand_tensor({5, 4}, rng), w = rand_tensor({3, 4}, rng), b = rand_tensor({3}, rng);
    run("linear", [=] { return linear(x, w, b); }, {x, w, b});
  }
  {
    Tensor x = rand_distinct({3, 4, 2}, rng);
    run("max_over_axis", [=] { return max_over_axis(x, 1); }, {x});
    Tensor rows = rand_distinct({7, 3}, rng);
    const std::vector<std::int32_t> counts{2, 1, 4};
    run("segment_max", [=] { return segment_max(rows, counts); }, {rows});
  }
  {
    Tensor f = rand_tensor({5, 3}, rng);
    const std::vector<std::int32_t> coords{0, 0, 2, 1, 3, 2, 1, 2, 3, 0};
    run("scatter_to_grid", [=] { return scatter_to_grid(f, coords, 4, 3); }, {f});
    const std::vector<std::int32_t> dup{1, 1, 1, 1, 0, 2, 3, 2, 0, 2};
    run("scatter_add_to_grid", [=] { return scatter_add_to_grid(f, dup, 4, 3, 0.5); }, {f});
  }
  {
    Tensor m = rand_tensor({1, 2, 4, 5}, rng);
    const std::vector<std::array<int, 2>> px{{0, 0}, {3, 4}, {1, 2}};
    run("gather_pixels", [=] { return gather_pixels(m, px); }, {m});
    std::vector<double> g;
    for (int i = 0; i < 3 * 3; ++i) {
      g.push_back(rng.uniform(-0.8, 4.8) + 0.013);
      g.push_back(rng.uniform(-0.8, 3.8) + 0.017);
    }
    for (auto& v : g)
      if (std::abs(v - std::round(v)) < 0.01) v += 0.05;
    const Tensor grid = Tensor::from_vector({1, 3, 3, 2}, g);
    run("bilinear_sample", [=] { return bilinear_sample(m, grid); }, {m});
  }
  {
    Tensor map = rand_tensor({1, 2, 6, 6}, rng);
    BevGeometry geom{-1.2, -1.2, 0.4, 6, 6};
    run("warp_feature_map", [=] { return warp_feature_map(map, Pose2D{0.13, -0.21, 0.3}, geom); }, {map});
  }
  {
    Rng init(seed + 1);
    FmfParams p = FmfParams::create(2, 3, init);
    Tensor cur = rand_tensor({1, 2, 4, 4}, rng), prev = rand_tensor({1, 2, 4, 4}, rng);
    run("fmf_base", [=]() mutable { return fmf_base(cur, prev, p, Mode::kTrain); },
        {cur, prev, p.conv.weight, p.conv.bias, p.bn.gamma, p.bn.beta});
  }
  {
    BevGeometry geom{0.0, 0.0, 1.0, 8, 6};
    std::vector<Box3D> boxes{{2.5, 1.5, 0.2, 1.0, 2.0, 1.5, 0.3, 1.0, -0.5, 0},
                             {5.2, 4.7, -0.1, 0.8, 0.9, 1.7, -1.2, 0.2, 0.1, 1},
                             {3.4, 2.2, 0.0, 1.5, 1.5, 1.5, 2.0, 0.0, 0.0, 0}};
    const TargetMaps t = render_targets(boxes, geom, 2);
    Tensor logits = rand_tensor({1, 2, 6, 8}, rng, -3.0, 3.0);
    run_scalar("focal_loss", [=] { return focal_loss(sigmoid(logits), t, {}); }, {logits});
    HeadOutput h;
    Tensor off = rand_away_from_zero({1, 2, 6, 8}, rng), hz = rand_away_from_zero({1, 1, 6, 8}, rng),
           sz = rand_away_from_zero({1, 3, 6, 8}, rng), rot = rand_away_from_zero({1, 2, 6, 8}, rng),
           vel = rand_away_from_zero({1, 2, 6, 8}, rng);
    // Shift regressions well away from their targets so |.| has no kink nearby.
    auto build = [=] {
      HeadOutput o;
      o.heatmap = sigmoid(logits);
      o.offset = add(off, Tensor::full(off.shape(), 3.0));
      o.height = add(hz, Tensor::full(hz.shape(), 3.0));
      o.size = add(sz, Tensor::full(sz.shape(), 3.0));
      o.rotation = add(rot, Tensor::full(rot.shape(), 3.0));
      o.velocity = add(vel, Tensor::full(vel.shape(), 3.0));
      return o;
    };
    run_scalar("regression_losses", [=] {
      const auto r = regression_losses(build(), t);
      return add(add(add(r.offset, r.size), add(r.height, r.rotation)), r.velocity);
    }, {off, hz, sz, rot, vel});
    run_scalar("total_loss", [=] { return compute_losses(build(), t, {}, {}).total; },
               {logits, off, hz, sz, rot, vel});
  }
  return out;
}

ModelConfig tiny_model_config() {
  ModelConfig c;
  c.grid.x_range = {-2.56, 2.56};
  c.grid.y_range = {-2.56, 2.56};
  c.grid.z_range = {-3.0, 3.0};
  c.grid.cell_size = {0.32, 0.32, 6.0};
  c.grid.max_points_per_cell = 8;
  c.grid.max_cells = 256;
  c.backbone.pfn_channels = 4;
  c.backbone.neck_channels = {4, 8};
  c.backbone.neck_strides = {1, 2};
  c.backbone.layers_per_stage = 0;
  c.backbone.upsample_channels = 4;
  c.backbone.out_channels = 8;
  c.backbone.output_stride = 2;
  c.head.head_channels = 4;
  c.fmf.enabled = true;
  c.fmf.use_odometry = true;
  c.class_names = {"car", "pedestrian"};
  return c;
}

GradCheckResult model_gradcheck(std::uint64_t seed) {
  const ModelConfig cfg = tiny_model_config();
  DetectorModel model = DetectorModel::create(cfg, seed);
  ParamSet params = model.parameters();
  Rng rng(seed + 11);
  const std::vector<Box3D> boxes{{-1.1, 0.7, -1.0, 1.8, 4.0, 1.5, 0.4, 1.0, 0.5, 0},
                                 {1.3, -1.2, -1.0, 0.6, 0.7, 1.7, -2.0, 0.3, -0.2, 1}};
  const PointCloudFrame prev = tiny_frame(rng, cfg.grid, boxes);
  const PointCloudFrame cur = tiny_frame(rng, cfg.grid, boxes);
  const Pose2D rel{0.21, -0.13, 0.05};
  std::vector<Tensor> inputs;
  for (const auto& p : params.params) inputs.push_back(p.tensor);
  auto loss = [&] { return pair_loss(model, prev, cur, Mode::kTrain, 1, 2, rel).total; };
  return check_gradients("full model total loss", loss, inputs, 1e-4);
}

}  // namespace fmfnet
