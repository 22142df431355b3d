#pragma once

#include <cstdint>
#include <filesystem>
#include <string>

#include "json.hpp"
#include "multiad/backbone.hpp"
#include "multiad/distill.hpp"
#include "multiad/inference.hpp"

namespace multiad {

enum class TeacherMode { kRandom, kRotationPretext };

struct TrainConfig {
  std::int64_t epochs = 40;
  Index batch_size = 8;
  double lr = 1e-3;
  std::uint64_t seed = 0;
  TeacherMode teacher_mode = TeacherMode::kRandom;
  std::int64_t pretext_epochs = 5;
  // Training images used to estimate frozen batch-norm statistics at init.
  Index bn_calibration_images = 64;
  // Student batch norm uses batch statistics during training instead of the calibrated ones.
  bool student_batch_stats = true;
};

struct PipelineConfig {
  BackboneConfig backbone;
  DiscriminatorConfig discriminator;
  bool discriminator_enabled = true;
  double lambda = 0.1;
  InferenceOptions inference;
  TrainConfig train;
  Index input_extent = 64;

  void validate() const;
};

nlohmann::json to_json(const PipelineConfig& config);

/// Missing keys keep their defaults; unknown keys and type errors throw
/// ConfigError naming the key path.
PipelineConfig config_from_json(const nlohmann::json& j);

PipelineConfig load_config(const std::filesystem::path& path);

const char* teacher_mode_name(TeacherMode mode);

}  // namespace multiad
