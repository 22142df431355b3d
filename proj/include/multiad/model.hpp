#pragma once

#include <cstdint>
#include <filesystem>
#include <functional>
#include <span>
#include <string>
#include <vector>

#include "json.hpp"
#include "multiad/adam.hpp"
#include "multiad/config.hpp"
#include "multiad/dataset.hpp"

namespace multiad {

/// Everything a training run owns: frozen teacher, student, discriminator,
/// map refinement, optimizer state and the position in the data stream.
struct Model {
  PipelineConfig config;
  BackboneParams<float> teacher;
  BackboneParams<float> student;
  DiscriminatorParams<float> discriminator;
  RefinementParams refinement;
  AdamState<float> student_adam;
  AdamState<float> discriminator_adam;
  Rng dropout_rng;
  std::int64_t step = 0;
  std::int64_t epoch = 0;
  std::int64_t cursor = 0;  // batch index within the current epoch
  std::vector<LossReport> history;

  /// teacher.*, student.* and discriminator.* tensors in a fixed order.
  ParamList<float> named_tensors();
  ParamList<float> student_parameters();
  ParamList<float> discriminator_parameters();
};

/// Parameter structures initialized from the seed streams, with no
/// data-dependent steps.
Model allocate_model(const PipelineConfig& config);

/// Seeds teacher, student and discriminator from `config.train.seed` on
/// separate streams, optionally pretrains the teacher on rotation
/// prediction, then estimates the frozen batch-norm statistics of both
/// backbones from the first training images.
Model init_model(const PipelineConfig& config, std::span<const LabeledSample> train);

/// Sets running statistics of every backbone batch-norm layer to the batch
/// statistics of up to `count` images (one train-mode pass).
void calibrate_bn_statistics(BackboneParams<float>& params, std::span<const LabeledSample> images, Index count);

/// Four-way rotation classification on GAP(F_last) with a temporary linear
/// head. Leaves the teacher frozen afterwards.
void pretrain_teacher_rotation(Model& model, std::span<const LabeledSample> train);

std::int64_t steps_per_epoch(const Model& model, std::size_t n_train);

/// One discriminator update on detached stage-4 features followed by one
/// student update on L_G + lambda * L_adv (or L_G when the discriminator is
/// disabled). Advances the data cursor.
LossReport train_step(Model& model, std::span<const LabeledSample> train);

using StepCallback = std::function<void(const Model&, const LossReport&)>;

/// Runs steps until the configured epoch count, then calibrates the map
/// refinement on the training normals.
void train_model(Model& model, std::span<const LabeledSample> train, const StepCallback& on_step = {});

/// Per-level mean/variance of raw anomaly maps over the training normals.
void calibrate_model_refinement(Model& model, std::span<const LabeledSample> train);

/// Teacher and student pyramids for a [b,c,h,w] batch in inference mode.
void forward_levels(Model& model, const Tensor<float>& images, std::vector<Tensor<float>>& teacher_levels,
                    std::vector<Tensor<float>>& student_levels);

std::vector<AnomalyResult> infer(Model& model, std::span<const LabeledSample> samples);
std::vector<AnomalyResult> infer_batch(Model& model, const Tensor<float>& images);

struct ImageScore {
  std::string name;
  std::string category;
  bool anomalous = false;
  double score = 0.0;
  double map_min = 0.0;
  double map_max = 0.0;
};

struct MetricReport {
  double image_auroc = 0.0;
  double pixel_auroc = 0.0;
  std::size_t n_normal = 0;
  std::size_t n_anomalous = 0;
  std::size_t positive_pixels = 0;
  std::size_t negative_pixels = 0;
  std::vector<ImageScore> images;
};

MetricReport evaluate(Model& model, std::span<const LabeledSample> eval);

/// Report with metrics, per-image scores and map ranges, a summary of the
/// training losses and the configuration.
nlohmann::json report_json(const Model& model, const MetricReport& report);

/// Min-max normalized 8-bit PGM heatmap; a constant map is written black.
/// Returns {min, max} of the input map.
std::pair<double, double> write_heatmap(const Map2<float>& map, const std::filesystem::path& path);

}  // namespace multiad
