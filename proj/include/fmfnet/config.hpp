#pragma once

#include <array>
#include <cstdint>
#include <filesystem>
#include <numbers>
#include <string>
#include <vector>

#include "json.hpp"

#include "fmfnet/backbone.hpp"
#include "fmfnet/decode.hpp"
#include "fmfnet/fmf.hpp"
#include "fmfnet/geometry.hpp"
#include "fmfnet/head.hpp"

namespace fmfnet {

struct ModelConfig {
  GridConfig grid = desk_pillar_config();
  BackboneConfig backbone;
  FmfConfig fmf;
  HeadConfig head;
  TargetConfig targets;
  FocalParams focal;
  LossWeights loss_weights;
  MatchConfig match;
  std::vector<std::string> class_names{"car", "pedestrian"};

  void validate() const;
  int num_classes() const { return static_cast<int>(class_names.size()); }
  BevGeometry geometry() const { return output_geometry(grid, backbone.output_stride); }
};

struct AugmentConfig {
  bool flip_x = true;
  bool flip_y = true;
  /// Rotation angle drawn uniformly from [-max_rotation, max_rotation].
  double max_rotation = std::numbers::pi / 8.0;
  double scale_min = 0.95;
  double scale_max = 1.05;

  void validate() const;
  static AugmentConfig none() { return {false, false, 0.0, 1.0, 1.0}; }
};

struct TrainConfig {
  ModelConfig model;
  double lr_init = 0.003;
  double weight_decay = 0.01;
  /// (low, high): momentum starts high, reaches low at the lr peak.
  std::array<double, 2> momentum_range{0.85, 0.95};
  double adam_beta2 = 0.999;
  double adam_eps = 1e-8;
  int epochs = 32;
  /// Frame pairs per optimizer step.
  int batch_size = 2;
  /// When > 0, overrides epochs: train for exactly this many steps.
  int max_steps = 0;
  std::uint64_t seed = 1;
  bool augment_enabled = true;
  AugmentConfig augment;

  void validate() const;
};

nlohmann::json to_json(const ModelConfig& c);
nlohmann::json to_json(const TrainConfig& c);
/// Missing keys keep their defaults; unknown keys and bad values raise ConfigError.
ModelConfig model_config_from_json(const nlohmann::json& j);
TrainConfig train_config_from_json(const nlohmann::json& j);

TrainConfig load_train_config(const std::filesystem::path& path);
/// Applies "dotted.key=value" overrides. The value is parsed as JSON when
/// possible, otherwise taken as a string.
void apply_override(TrainConfig& cfg, const std::string& assignment);

/// Synthetic dataset recipe for `gen-data`: sequence i uses seed
/// derive_seed(scene.seed, i).
struct DatasetSpec {
  int num_sequences = 1;
  SceneSpec scene;

  void validate() const;
};

DatasetSpec dataset_spec_from_json(const nlohmann::json& j);
nlohmann::json to_json(const DatasetSpec& s);
DatasetSpec load_dataset_spec(const std::filesystem::path& path);
std::vector<SceneSequence> generate_dataset(const DatasetSpec& spec);

/// JSON of `c` with every key of the fmf block removed (used to compare
/// ablation configurations).
nlohmann::json strip_fmf(const TrainConfig& c);

}  // namespace fmfnet
