#include "fmfnet/backbone.hpp"

#include <algorithm>
#include <string>

#include "fmfnet/errors.hpp"
#include "fmfnet/geometry.hpp"

namespace fmfnet {

namespace {

bool is_pow2(int v) { return v >= 1 && (v & (v - 1)) == 0; }

}  // namespace

BevGeometry output_geometry(const GridConfig& grid, int output_stride) {
  grid.validate();
  if (!is_pow2(output_stride)) throw ConfigError("output stride must be a power of two");
  if (grid.width() % output_stride != 0 || grid.height() % output_stride != 0) {
    throw ConfigError("grid dims are not divisible by the output stride");
  }
  BevGeometry g;
  g.x_min = grid.x_range.min;
  g.y_min = grid.y_range.min;
  g.cell = grid.cell_size[0] * output_stride;
  g.width = grid.width() / output_stride;
  g.height = grid.height() / output_stride;
  return g;
}

void BackboneConfig::validate() const {
  if (pfn_channels < 1 || upsample_channels < 1 || out_channels < 1 || layers_per_stage < 0) {
    throw ConfigError("backbone channel counts must be >= 1");
  }
  if (neck_channels.empty() || neck_channels.size() != neck_strides.size()) {
    throw ConfigError("neck_channels and neck_strides must be nonempty and of equal length");
  }
  for (int c : neck_channels)
    if (c < 1) throw ConfigError("neck channel counts must be >= 1");
  for (int s : neck_strides)
    if (!is_pow2(s)) throw ConfigError("neck strides must be powers of two");
  if (!is_pow2(output_stride)) throw ConfigError("output_stride must be a power of two");
}

int BackboneConfig::total_stride() const {
  int s = 1;
  for (int v : neck_strides) s *= v;
  return s;
}

PillarFeatureNet PillarFeatureNet::create(int feature_dim, int channels, Rng& rng) {
  PillarFeatureNet p;
  p.feature_dim = feature_dim;
  p.weight = init_weight({static_cast<std::size_t>(channels), static_cast<std::size_t>(feature_dim)},
                         static_cast<std::size_t>(feature_dim), rng);
  p.bn = BatchNorm::create(static_cast<std::size_t>(channels));
  return p;
}

void PillarFeatureNet::collect(ParamSet& set, const std::string& prefix) {
  set.params.push_back({prefix + ".weight", weight});
  fmfnet::collect(bn, set, prefix + ".bn");
}

std::size_t PillarFeatureNet::param_count(int feature_dim, int channels) {
  return static_cast<std::size_t>(channels) * feature_dim + 2 * static_cast<std::size_t>(channels);
}

Tensor pillar_feature_net(const PillarTensor& pillars, PillarFeatureNet& params, Mode mode) {
  const int W = pillars.grid_width, H = pillars.grid_height;
  const auto C = static_cast<std::size_t>(params.channels());
  if (W < 1 || H < 1) throw ShapeError("pillar tensor has an empty grid");
  if (pillars.feature_dim != params.feature_dim) {
    throw ShapeError("pillar feature dim " + std::to_string(pillars.feature_dim) + " does not match network input " +
                     std::to_string(params.feature_dim));
  }
  const int P = pillars.num_cells;
  const int cd = pillars.coord_dim();
  if (pillars.coords.size() != static_cast<std::size_t>(P) * cd || pillars.point_counts.size() != static_cast<std::size_t>(P)) {
    throw ShapeError("pillar coords/counts do not match the cell count");
  }
  if (P == 0) return Tensor::zeros({1, C, static_cast<std::size_t>(H), static_cast<std::size_t>(W)});

  std::vector<std::int32_t> xy(2 * static_cast<std::size_t>(P));
  std::size_t M = 0;
  for (int p = 0; p < P; ++p) {
    const auto ix = pillars.coords[static_cast<std::size_t>(p) * cd];
    const auto iy = pillars.coords[static_cast<std::size_t>(p) * cd + 1];
    if (ix < 0 || ix >= W || iy < 0 || iy >= H) throw ShapeError("pillar coordinate outside its grid");
    xy[2 * static_cast<std::size_t>(p)] = ix;
    xy[2 * static_cast<std::size_t>(p) + 1] = iy;
    M += static_cast<std::size_t>(pillars.point_counts[static_cast<std::size_t>(p)]);
  }

  const auto D = static_cast<std::size_t>(pillars.feature_dim);
  std::vector<double> rows;
  rows.reserve(M * D);
  for (int p = 0; p < P; ++p) {
    const auto n = static_cast<std::size_t>(pillars.point_counts[static_cast<std::size_t>(p)]);
    const auto* base = pillars.features.data() + static_cast<std::size_t>(p) * pillars.max_points * D;
    rows.insert(rows.end(), base, base + n * D);
  }
  const Tensor points = Tensor::from_vector({M, D}, std::move(rows));
  const Tensor h = relu(batch_norm(linear(points, params.weight, Tensor()), params.bn, mode));
  const Tensor pooled = segment_max(h, pillars.point_counts);
  if (pillars.mode == GridMode::kPillar) return scatter_to_grid(pooled, xy, W, H);
  return scatter_add_to_grid(pooled, xy, W, H, 1.0 / static_cast<double>(pillars.grid_depth));
}

Neck Neck::create(int in_channels, const BackboneConfig& cfg, Rng& rng) {
  cfg.validate();
  Neck neck;
  neck.cfg = cfg;
  int ch = in_channels;
  int cumulative = 1;
  for (std::size_t i = 0; i < cfg.neck_channels.size(); ++i) {
    Stage st;
    cumulative *= cfg.neck_strides[i];
    st.blocks.push_back(ConvBnRelu::create(ch, cfg.neck_channels[i], 3, cfg.neck_strides[i], rng));
    for (int k = 0; k < cfg.layers_per_stage; ++k) {
      st.blocks.push_back(ConvBnRelu::create(cfg.neck_channels[i], cfg.neck_channels[i], 3, 1, rng));
    }
    ch = cfg.neck_channels[i];
    if (cumulative < cfg.output_stride) {
      st.resample = ConvBnRelu::create(ch, cfg.upsample_channels, 3, cfg.output_stride / cumulative, rng);
    } else {
      st.resample = ConvBnRelu::create(ch, cfg.upsample_channels, 3, 1, rng, cumulative / cfg.output_stride);
    }
    neck.stages.push_back(std::move(st));
  }
  const int concat = cfg.upsample_channels * static_cast<int>(cfg.neck_channels.size());
  neck.fuse = ConvBnRelu::create(concat, cfg.out_channels, 1, 1, rng);
  return neck;
}

void Neck::collect(ParamSet& set, const std::string& prefix) {
  for (std::size_t i = 0; i < stages.size(); ++i) {
    const std::string sp = prefix + ".stage" + std::to_string(i);
    for (std::size_t k = 0; k < stages[i].blocks.size(); ++k) stages[i].blocks[k].collect(set, sp + ".block" + std::to_string(k));
    stages[i].resample.collect(set, sp + ".resample");
  }
  fuse.collect(set, prefix + ".fuse");
}

std::size_t Neck::param_count(int in_channels, const BackboneConfig& cfg) {
  std::size_t n = 0;
  int ch = in_channels;
  for (int c : cfg.neck_channels) {
    n += ConvBnRelu::param_count(ch, c, 3);
    n += static_cast<std::size_t>(cfg.layers_per_stage) * ConvBnRelu::param_count(c, c, 3);
    n += ConvBnRelu::param_count(c, cfg.upsample_channels, 3);
    ch = c;
  }
  n += ConvBnRelu::param_count(cfg.upsample_channels * static_cast<int>(cfg.neck_channels.size()), cfg.out_channels, 1);
  return n;
}

Tensor neck_forward(const Tensor& pseudo_image, Neck& params, Mode mode) {
  if (pseudo_image.ndim() != 4) throw ShapeError("neck input must be [N,C,H,W]");
  const auto H = static_cast<int>(pseudo_image.dim(2));
  const auto W = static_cast<int>(pseudo_image.dim(3));
  const int need = std::max(params.cfg.total_stride(), params.cfg.output_stride);
  if (H % need != 0 || W % need != 0) {
    throw ShapeError("neck input " + shape_str(pseudo_image.shape()) + " not divisible by stride " +
                     std::to_string(need));
  }
  std::vector<Tensor> resampled;
  Tensor x = pseudo_image;
  for (auto& st : params.stages) {
    for (auto& b : st.blocks) x = b.forward(x, mode);
    resampled.push_back(st.resample.forward(x, mode));
  }
  const Tensor cat = resampled.size() == 1 ? resampled.front() : concat_channels(resampled);
  return params.fuse.forward(cat, mode);
}

}  // namespace fmfnet
