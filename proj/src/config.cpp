#include "fmfnet/config.hpp"

#include <fstream>
#include <set>

#include "fmfnet/errors.hpp"
#include "fmfnet/random.hpp"

namespace fmfnet {

using nlohmann::json;

void ModelConfig::validate() const {
  grid.validate();
  backbone.validate();
  fmf.validate();
  head.validate();
  match.validate();
  if (class_names.empty()) throw ConfigError("model.class_names must be nonempty");
  if (!(focal.alpha > 0.0 && focal.beta > 0.0)) throw ConfigError("focal exponents must be positive");
  if (!(targets.min_overlap > 0.0 && targets.min_overlap < 1.0)) throw ConfigError("targets.min_overlap must lie in (0,1)");
  if (!(targets.min_radius >= 0.0)) throw ConfigError("targets.min_radius must be >= 0");
  for (double w : {loss_weights.offset, loss_weights.size, loss_weights.height, loss_weights.rotation,
                   loss_weights.velocity}) {
    if (!(w >= 0.0)) throw ConfigError("loss weights must be nonnegative");
  }
  geometry();
  const int need = std::max(backbone.total_stride(), backbone.output_stride);
  if (grid.width() % need != 0 || grid.height() % need != 0) {
    throw ConfigError("grid dims must be divisible by the backbone stride " + std::to_string(need));
  }
}

void AugmentConfig::validate() const {
  if (!(max_rotation >= 0.0)) throw ConfigError("augment.max_rotation must be >= 0");
  if (!(scale_min > 0.0 && scale_max >= scale_min)) throw ConfigError("augment scale range is invalid");
}

void TrainConfig::validate() const {
  model.validate();
  augment.validate();
  if (!(lr_init > 0.0)) throw ConfigError("lr_init must be positive");
  if (!(weight_decay >= 0.0)) throw ConfigError("weight_decay must be >= 0");
  if (!(momentum_range[0] > 0.0 && momentum_range[0] <= momentum_range[1] && momentum_range[1] < 1.0)) {
    throw ConfigError("momentum_range must satisfy 0 < low <= high < 1");
  }
  if (!(adam_beta2 > 0.0 && adam_beta2 < 1.0) || !(adam_eps > 0.0)) throw ConfigError("bad Adam constants");
  if (epochs < 1 && max_steps < 1) throw ConfigError("epochs or max_steps must be >= 1");
  if (batch_size < 1) throw ConfigError("batch_size must be >= 1");
  if (max_steps < 0) throw ConfigError("max_steps must be >= 0");
}

namespace {

// Reads known keys into fields and rejects anything else.
class Reader {
 public:
  Reader(const json& j, std::string ctx) : j_(j), ctx_(std::move(ctx)) {
    if (!j_.is_object()) throw ConfigError(ctx_ + ": expected a JSON object");
  }

  template <typename T>
  void operator()(const char* key, T& out) {
    seen_.insert(key);
    if (!j_.contains(key)) return;
    try {
      out = j_.at(key).get<T>();
    } catch (const json::exception& e) {
      throw ConfigError(ctx_ + "." + key + ": " + e.what());
    }
  }

  template <typename F>
  void object(const char* key, F&& fn) {
    seen_.insert(key);
    if (j_.contains(key)) fn(Reader(j_.at(key), ctx_ + "." + key));
  }

  bool has(const char* key) const { return j_.contains(key); }
  const json& at(const char* key) {
    seen_.insert(key);
    return j_.at(key);
  }

  void finish() const {
    for (const auto& item : j_.items())
      if (!seen_.count(item.key())) throw ConfigError("unknown config key " + ctx_ + "." + item.key());
  }

 private:
  const json& j_;
  std::string ctx_;
  std::set<std::string> seen_;
};

json grid_json(const GridConfig& g) {
  return {{"x_range", {g.x_range.min, g.x_range.max}},
          {"y_range", {g.y_range.min, g.y_range.max}},
          {"z_range", {g.z_range.min, g.z_range.max}},
          {"cell_size", g.cell_size},
          {"max_points_per_cell", g.max_points_per_cell},
          {"max_cells", g.max_cells},
          {"mode", to_string(g.mode)}};
}

void read_range(Reader& r, const char* key, Range& out) {
  std::array<double, 2> v{out.min, out.max};
  r(key, v);
  out = {v[0], v[1]};
}

GridConfig grid_from(Reader r) {
  GridConfig g;
  read_range(r, "x_range", g.x_range);
  read_range(r, "y_range", g.y_range);
  read_range(r, "z_range", g.z_range);
  r("cell_size", g.cell_size);
  r("max_points_per_cell", g.max_points_per_cell);
  r("max_cells", g.max_cells);
  std::string mode = to_string(g.mode);
  r("mode", mode);
  g.mode = grid_mode_from_string(mode);
  r.finish();
  return g;
}

}  // namespace

json to_json(const ModelConfig& c) {
  const auto& b = c.backbone;
  return {{"grid", grid_json(c.grid)},
          {"backbone",
           {{"pfn_channels", b.pfn_channels},
            {"neck_channels", b.neck_channels},
            {"neck_strides", b.neck_strides},
            {"layers_per_stage", b.layers_per_stage},
            {"upsample_channels", b.upsample_channels},
            {"out_channels", b.out_channels},
            {"output_stride", b.output_stride}}},
          {"fmf", {{"enabled", c.fmf.enabled}, {"use_odometry", c.fmf.use_odometry}, {"kernel_size", c.fmf.kernel_size}}},
          {"head", {{"head_channels", c.head.head_channels}, {"heatmap_prior", c.head.heatmap_prior}}},
          {"targets", {{"min_overlap", c.targets.min_overlap}, {"min_radius", c.targets.min_radius}}},
          {"focal", {{"alpha", c.focal.alpha}, {"beta", c.focal.beta}}},
          {"loss_weights",
           {{"offset", c.loss_weights.offset},
            {"size", c.loss_weights.size},
            {"height", c.loss_weights.height},
            {"rotation", c.loss_weights.rotation},
            {"velocity", c.loss_weights.velocity}}},
          {"match",
           {{"distance_thresholds", c.match.distance_thresholds},
            {"tp_threshold", c.match.tp_threshold},
            {"score_threshold", c.match.score_threshold},
            {"top_k", c.match.top_k}}},
          {"class_names", c.class_names}};
}

json to_json(const TrainConfig& c) {
  return {{"model", to_json(c.model)},
          {"lr_init", c.lr_init},
          {"weight_decay", c.weight_decay},
          {"momentum_range", c.momentum_range},
          {"adam_beta2", c.adam_beta2},
          {"adam_eps", c.adam_eps},
          {"epochs", c.epochs},
          {"batch_size", c.batch_size},
          {"max_steps", c.max_steps},
          {"seed", c.seed},
          {"augment_enabled", c.augment_enabled},
          {"augment",
           {{"flip_x", c.augment.flip_x},
            {"flip_y", c.augment.flip_y},
            {"max_rotation", c.augment.max_rotation},
            {"scale_min", c.augment.scale_min},
            {"scale_max", c.augment.scale_max}}}};
}

ModelConfig model_config_from_json(const json& j) {
  ModelConfig c;
  Reader r(j, "model");
  r.object("grid", [&](Reader g) { c.grid = grid_from(std::move(g)); });
  r.object("backbone", [&](Reader b) {
    b("pfn_channels", c.backbone.pfn_channels);
    b("neck_channels", c.backbone.neck_channels);
    b("neck_strides", c.backbone.neck_strides);
    b("layers_per_stage", c.backbone.layers_per_stage);
    b("upsample_channels", c.backbone.upsample_channels);
    b("out_channels", c.backbone.out_channels);
    b("output_stride", c.backbone.output_stride);
    b.finish();
  });
  r.object("fmf", [&](Reader f) {
    f("enabled", c.fmf.enabled);
    f("use_odometry", c.fmf.use_odometry);
    f("kernel_size", c.fmf.kernel_size);
    f.finish();
  });
  r.object("head", [&](Reader h) {
    h("head_channels", c.head.head_channels);
    h("heatmap_prior", c.head.heatmap_prior);
    h.finish();
  });
  r.object("targets", [&](Reader t) {
    t("min_overlap", c.targets.min_overlap);
    t("min_radius", c.targets.min_radius);
    t.finish();
  });
  r.object("focal", [&](Reader f) {
    f("alpha", c.focal.alpha);
    f("beta", c.focal.beta);
    f.finish();
  });
  r.object("loss_weights", [&](Reader w) {
    w("offset", c.loss_weights.offset);
    w("size", c.loss_weights.size);
    w("height", c.loss_weights.height);
    w("rotation", c.loss_weights.rotation);
    w("velocity", c.loss_weights.velocity);
    w.finish();
  });
  r.object("match", [&](Reader m) {
    m("distance_thresholds", c.match.distance_thresholds);
    m("tp_threshold", c.match.tp_threshold);
    m("score_threshold", c.match.score_threshold);
    m("top_k", c.match.top_k);
    m.finish();
  });
  r("class_names", c.class_names);
  r.finish();
  c.validate();
  return c;
}

TrainConfig train_config_from_json(const json& j) {
  TrainConfig c;
  Reader r(j, "config");
  if (r.has("model")) c.model = model_config_from_json(r.at("model"));
  r("lr_init", c.lr_init);
  r("weight_decay", c.weight_decay);
  r("momentum_range", c.momentum_range);
  r("adam_beta2", c.adam_beta2);
  r("adam_eps", c.adam_eps);
  r("epochs", c.epochs);
  r("batch_size", c.batch_size);
  r("max_steps", c.max_steps);
  r("seed", c.seed);
  r("augment_enabled", c.augment_enabled);
  r.object("augment", [&](Reader a) {
    a("flip_x", c.augment.flip_x);
    a("flip_y", c.augment.flip_y);
    a("max_rotation", c.augment.max_rotation);
    a("scale_min", c.augment.scale_min);
    a("scale_max", c.augment.scale_max);
    a.finish();
  });
  r.finish();
  c.validate();
  return c;
}

TrainConfig load_train_config(const std::filesystem::path& path) {
  std::ifstream in(path);
  if (!in) throw ConfigError("cannot open config " + path.string());
  json j;
  try {
    j = json::parse(in);
  } catch (const json::exception& e) {
    throw ConfigError(path.string() + ": " + e.what());
  }
  return train_config_from_json(j);
}

void apply_override(TrainConfig& cfg, const std::string& assignment) {
  const auto eq = assignment.find('=');
  if (eq == std::string::npos || eq == 0) throw ConfigError("override must look like key=value: " + assignment);
  const std::string key = assignment.substr(0, eq);
  const std::string text = assignment.substr(eq + 1);
  json value;
  try {
    value = json::parse(text);
  } catch (const json::exception&) {
    value = text;
  }
  json j = to_json(cfg);
  json* node = &j;
  std::size_t start = 0;
  while (true) {
    const auto dot = key.find('.', start);
    const std::string part = key.substr(start, dot == std::string::npos ? std::string::npos : dot - start);
    if (!node->is_object() || !node->contains(part)) throw ConfigError("unknown config key '" + key + "'");
    node = &(*node)[part];
    if (dot == std::string::npos) break;
    start = dot + 1;
  }
  *node = value;
  cfg = train_config_from_json(j);
}

void DatasetSpec::validate() const {
  if (num_sequences < 1) throw ConfigError("num_sequences must be >= 1");
}

DatasetSpec dataset_spec_from_json(const json& j) {
  DatasetSpec d;
  Reader r(j, "dataset");
  r("num_sequences", d.num_sequences);
  r.object("scene", [&](Reader s) {
    SceneSpec& sc = d.scene;
    s("num_frames", sc.num_frames);
    s("num_objects", sc.num_objects);
    s("range", sc.range);
    s("ego_speed", sc.ego_speed);
    s("seed", sc.seed);
    s("class_names", sc.class_names);
    s("frame_interval", sc.frame_interval);
    s("clutter_points", sc.clutter_points);
    s("surface_density", sc.surface_density);
    s.finish();
  });
  r.finish();
  d.validate();
  return d;
}

json to_json(const DatasetSpec& d) {
  const SceneSpec& s = d.scene;
  return {{"num_sequences", d.num_sequences},
          {"scene",
           {{"num_frames", s.num_frames},
            {"num_objects", s.num_objects},
            {"range", s.range},
            {"ego_speed", s.ego_speed},
            {"seed", s.seed},
            {"class_names", s.class_names},
            {"frame_interval", s.frame_interval},
            {"clutter_points", s.clutter_points},
            {"surface_density", s.surface_density}}}};
}

DatasetSpec load_dataset_spec(const std::filesystem::path& path) {
  std::ifstream in(path);
  if (!in) throw ConfigError("cannot open dataset spec " + path.string());
  try {
    return dataset_spec_from_json(json::parse(in));
  } catch (const json::exception& e) {
    throw ConfigError(path.string() + ": " + e.what());
  }
}

std::vector<SceneSequence> generate_dataset(const DatasetSpec& spec) {
  spec.validate();
  std::vector<SceneSequence> out;
  for (int i = 0; i < spec.num_sequences; ++i) {
    SceneSpec s = spec.scene;
    s.seed = derive_seed(spec.scene.seed, static_cast<std::uint64_t>(i));
    out.push_back(generate_scene(s));
  }
  return out;
}

json strip_fmf(const TrainConfig& c) {
  json j = to_json(c);
  j["model"].erase("fmf");
  return j;
}

}  // namespace fmfnet
