#include "fmfnet/head.hpp"

#include <algorithm>
#include <cmath>
#include <string>

#include "fmfnet/errors.hpp"

namespace fmfnet {

void HeadConfig::validate() const {
  if (head_channels < 1) throw ConfigError("head.head_channels must be >= 1");
  if (!(heatmap_prior > 0.0 && heatmap_prior < 1.0)) throw ConfigError("head.heatmap_prior must lie in (0, 1)");
}

namespace {

HeadBranch make_branch(int in_channels, int hidden, int out, Rng& rng) {
  return {Conv2d::create(in_channels, hidden, 3, 1, rng), Conv2d::create(hidden, out, 1, 1, rng)};
}

void collect_branch(HeadBranch& b, ParamSet& set, const std::string& prefix) {
  b.hidden.collect(set, prefix + ".hidden");
  b.out.collect(set, prefix + ".out");
}

std::size_t branch_count(int in_channels, int hidden, int out) {
  return Conv2d::param_count(in_channels, hidden, 3) + Conv2d::param_count(hidden, out, 1);
}

}  // namespace

CenterHead CenterHead::create(int in_channels, int num_classes, const HeadConfig& cfg, Rng& rng) {
  cfg.validate();
  if (num_classes < 1) throw ConfigError("head needs at least one class");
  const int hc = cfg.head_channels;
  CenterHead h;
  h.num_classes = num_classes;
  h.heatmap = make_branch(in_channels, hc, num_classes, rng);
  h.offset = make_branch(in_channels, hc, 2, rng);
  h.height = make_branch(in_channels, hc, 1, rng);
  h.size = make_branch(in_channels, hc, 3, rng);
  h.rotation = make_branch(in_channels, hc, 2, rng);
  h.velocity = make_branch(in_channels, hc, 2, rng);

  // Near-zero final weights so every pixel starts at the prior.
  auto w = h.heatmap.out.weight.mutable_data();
  for (auto& v : w) v *= 0.01;
  const double b = -std::log((1.0 - cfg.heatmap_prior) / cfg.heatmap_prior);
  auto bias = h.heatmap.out.bias.mutable_data();
  std::fill(bias.begin(), bias.end(), b);
  return h;
}

void CenterHead::collect(ParamSet& set, const std::string& prefix) {
  collect_branch(heatmap, set, prefix + ".heatmap");
  collect_branch(offset, set, prefix + ".offset");
  collect_branch(height, set, prefix + ".height");
  collect_branch(size, set, prefix + ".size");
  collect_branch(rotation, set, prefix + ".rotation");
  collect_branch(velocity, set, prefix + ".velocity");
}

std::size_t CenterHead::param_count(int in_channels, int num_classes, const HeadConfig& cfg) {
  const int hc = cfg.head_channels;
  return branch_count(in_channels, hc, num_classes) + branch_count(in_channels, hc, 2) +
         branch_count(in_channels, hc, 1) + branch_count(in_channels, hc, 3) + branch_count(in_channels, hc, 2) +
         branch_count(in_channels, hc, 2);
}

HeadOutput head_forward(const Tensor& bev, CenterHead& head) {
  const auto expect = head.heatmap.hidden.weight.dim(1);
  if (bev.ndim() != 4 || bev.dim(0) != 1 || bev.dim(1) != expect) {
    throw ShapeError("head_forward: expected [1," + std::to_string(expect) + ",h,w], got " + shape_str(bev.shape()));
  }
  HeadOutput out;
  out.heatmap = sigmoid(head.heatmap.forward(bev));
  out.offset = head.offset.forward(bev);
  out.height = head.height.forward(bev);
  out.size = head.size.forward(bev);
  out.rotation = head.rotation.forward(bev);
  out.velocity = head.velocity.forward(bev);
  return out;
}

// ---------------------------------------------------------------------------

double gaussian_radius(const Box3D& box, double cell_size, double min_overlap, double min_radius) {
  const double w = box.w / cell_size;
  const double l = box.l / cell_size;
  const double o = min_overlap;
  const double b = w + l;

  // Both corners shifted by r: (w-r)(l-r) / (2wl - (w-r)(l-r)) = o.
  const double c1 = w * l * (1.0 - o) / (1.0 + o);
  const double r1 = 0.5 * (b - std::sqrt(std::max(0.0, b * b - 4.0 * c1)));
  // Shrunk by r on every side: (w-2r)(l-2r) / wl = o.
  const double c2 = (1.0 - o) * w * l;
  const double r2 = (2.0 * b - std::sqrt(std::max(0.0, 4.0 * b * b - 16.0 * c2))) / 8.0;
  // Grown by r on every side: wl / ((w+2r)(l+2r)) = o.
  const double a3 = 4.0 * o, b3 = 2.0 * o * b, c3 = (o - 1.0) * w * l;
  const double r3 = (-b3 + std::sqrt(b3 * b3 - 4.0 * a3 * c3)) / (2.0 * a3);

  return std::max(min_radius, std::min({r1, r2, r3}));
}

double gaussian_sigma(const Box3D& box, double cell_size, double min_overlap, double min_radius) {
  return gaussian_radius(box, cell_size, min_overlap, min_radius) / 3.0;
}

TargetMaps render_targets(const std::vector<Box3D>& gt_boxes, const BevGeometry& geometry, int num_classes,
                          const TargetConfig& cfg) {
  if (num_classes < 1) throw ConfigError("render_targets: num_classes must be >= 1");
  TargetMaps t;
  t.num_classes = num_classes;
  t.height = geometry.height;
  t.width = geometry.width;
  const auto plane = static_cast<std::size_t>(t.height) * t.width;
  t.heatmap.assign(plane * num_classes, 0.0);

  for (std::size_t i = 0; i < gt_boxes.size(); ++i) {
    const Box3D& b = gt_boxes[i];
    if (b.class_id < 0 || b.class_id >= num_classes) {
      throw IndexError("render_targets: class id " + std::to_string(b.class_id) + " outside [0, " +
                       std::to_string(num_classes) + ")");
    }
    const double px = geometry.to_px(b.cx);
    const double py = geometry.to_py(b.cy);
    const double fc = std::floor(px), fr = std::floor(py);
    if (fc < 0 || fr < 0 || fc >= t.width || fr >= t.height) continue;
    const int col = static_cast<int>(fc), row = static_cast<int>(fr);

    const double sigma = gaussian_sigma(b, geometry.cell, cfg.min_overlap, cfg.min_radius);
    const double inv = 1.0 / (2.0 * sigma * sigma);
    double* hm = t.heatmap.data() + static_cast<std::size_t>(b.class_id) * plane;
    for (int r = 0; r < t.height; ++r) {
      const double dy = r - row;
      for (int c = 0; c < t.width; ++c) {
        const double dx = c - col;
        double& cell = hm[static_cast<std::size_t>(r) * t.width + c];
        cell = std::max(cell, std::exp(-(dx * dx + dy * dy) * inv));
      }
    }

    t.centers.push_back({row, col, b.class_id, i});
    t.offset.push_back({px - fc, py - fr});
    t.center_z.push_back(b.cz);
    t.log_size.push_back({std::log(b.w), std::log(b.l), std::log(b.h)});
    t.rotation.push_back({std::sin(b.yaw), std::cos(b.yaw)});
    t.velocity.push_back({b.vx, b.vy});
    t.sigma.push_back(sigma);
  }
  return t;
}

HeadOutput targets_as_head_output(const TargetMaps& t) {
  const auto h = static_cast<std::size_t>(t.height), w = static_cast<std::size_t>(t.width);
  const std::size_t plane = h * w;
  auto map = [&](std::size_t channels, auto value) {
    std::vector<double> v(channels * plane, 0.0);
    for (std::size_t i = 0; i < t.centers.size(); ++i) {
      const std::size_t at = static_cast<std::size_t>(t.centers[i].row) * w + static_cast<std::size_t>(t.centers[i].col);
      for (std::size_t c = 0; c < channels; ++c) v[c * plane + at] = value(i, c);
    }
    return Tensor::from_vector({1, channels, h, w}, std::move(v));
  };
  HeadOutput out;
  out.heatmap = Tensor::from_vector({1, static_cast<std::size_t>(t.num_classes), h, w}, t.heatmap);
  out.offset = map(2, [&](std::size_t i, std::size_t c) { return t.offset[i][c]; });
  out.height = map(1, [&](std::size_t i, std::size_t) { return t.center_z[i]; });
  out.size = map(3, [&](std::size_t i, std::size_t c) { return t.log_size[i][c]; });
  out.rotation = map(2, [&](std::size_t i, std::size_t c) { return t.rotation[i][c]; });
  out.velocity = map(2, [&](std::size_t i, std::size_t c) { return t.velocity[i][c]; });
  return out;
}

// ---------------------------------------------------------------------------

Tensor focal_loss(const Tensor& pred, const TargetMaps& target, const FocalParams& fp) {
  const Shape want{1, static_cast<std::size_t>(target.num_classes), static_cast<std::size_t>(target.height),
                   static_cast<std::size_t>(target.width)};
  if (pred.shape() != want) {
    throw ShapeError("focal_loss: prediction " + shape_str(pred.shape()) + " vs target " + shape_str(want));
  }
  if (!(fp.alpha > 0.0 && fp.beta > 0.0)) throw ConfigError("focal loss exponents must be positive");

  const double norm = 1.0 / static_cast<double>(std::max<std::size_t>(1, target.num_objects()));
  const double a = fp.alpha, be = fp.beta;
  auto z = pred.data();
  const auto& y = target.heatmap;
  double acc = 0.0;
  for (std::size_t i = 0; i < z.size(); ++i) {
    const double zc = std::clamp(z[i], kProbClamp, 1.0 - kProbClamp);
    if (y[i] == 1.0) {
      acc += std::pow(1.0 - zc, a) * std::log(zc);
    } else {
      acc += std::pow(1.0 - y[i], be) * std::pow(zc, a) * std::log(1.0 - zc);
    }
  }
  return Tensor::make_result({}, {-acc * norm}, {pred}, [y, a, be, norm](const OpContext& ctx) {
    if (!ctx.wants_grad(0)) return;
    const double g = ctx.grad_output()[0] * -norm;
    auto z = ctx.input(0);
    auto gz = ctx.input_grad(0);
    for (std::size_t i = 0; i < z.size(); ++i) {
      if (z[i] < kProbClamp || z[i] > 1.0 - kProbClamp) continue;
      const double zi = z[i];
      double d;
      if (y[i] == 1.0) {
        d = -a * std::pow(1.0 - zi, a - 1.0) * std::log(zi) + std::pow(1.0 - zi, a) / zi;
      } else {
        d = std::pow(1.0 - y[i], be) * (a * std::pow(zi, a - 1.0) * std::log(1.0 - zi) - std::pow(zi, a) / (1.0 - zi));
      }
      gz[i] += g * d;
    }
  });
}

namespace {

template <std::size_t D>
Tensor l1_at_centers(const Tensor& pred, const std::vector<std::array<int, 2>>& pixels,
                     const std::vector<std::array<double, D>>& values) {
  if (pixels.empty()) return Tensor::scalar(0.0);
  if (pred.ndim() != 4 || pred.dim(1) != D) {
    throw ShapeError("regression map " + shape_str(pred.shape()) + " does not have " + std::to_string(D) + " channels");
  }
  std::vector<double> flat;
  flat.reserve(values.size() * D);
  for (const auto& v : values) flat.insert(flat.end(), v.begin(), v.end());
  const Tensor target = Tensor::from_vector({values.size(), D}, std::move(flat));
  return mean(abs(sub(gather_pixels(pred, pixels), target)));
}

}  // namespace

RegressionLosses regression_losses(const HeadOutput& head, const TargetMaps& target) {
  std::vector<std::array<int, 2>> px;
  px.reserve(target.centers.size());
  for (const auto& c : target.centers) px.push_back({c.row, c.col});
  std::vector<std::array<double, 1>> z;
  z.reserve(target.center_z.size());
  for (double v : target.center_z) z.push_back({v});

  RegressionLosses r;
  r.offset = l1_at_centers(head.offset, px, target.offset);
  r.size = l1_at_centers(head.size, px, target.log_size);
  r.height = l1_at_centers(head.height, px, z);
  r.rotation = l1_at_centers(head.rotation, px, target.rotation);
  r.velocity = l1_at_centers(head.velocity, px, target.velocity);
  return r;
}

Tensor total_loss(const Tensor& heatmap_loss, const RegressionLosses& reg, const LossWeights& w) {
  for (double v : {w.offset, w.size, w.height, w.rotation, w.velocity}) {
    if (!(v >= 0.0)) throw ConfigError("loss weights must be nonnegative");
  }
  Tensor total = heatmap_loss;
  total = add(total, scale(reg.offset, w.offset));
  total = add(total, scale(reg.size, w.size));
  total = add(total, scale(reg.height, w.height));
  total = add(total, scale(reg.rotation, w.rotation));
  total = add(total, scale(reg.velocity, w.velocity));
  return total;
}

LossBreakdown compute_losses(const HeadOutput& head, const TargetMaps& target, const FocalParams& fp,
                             const LossWeights& w) {
  LossBreakdown lb;
  lb.heatmap = focal_loss(head.heatmap, target, fp);
  lb.regression = regression_losses(head, target);
  lb.total = total_loss(lb.heatmap, lb.regression, w);
  return lb;
}

}  // namespace fmfnet
