#pragma once

#include <cstdint>
#include <filesystem>
#include <optional>
#include <string>
#include <vector>

#include "multiad/inference.hpp"
#include "multiad/rng.hpp"

namespace multiad {

struct LabeledSample {
  std::string name;          // file stem, e.g. "007"
  std::string category;      // "good" or the defect type
  Tensor<float> image;       // [c,h,w] in [0,1]
  bool anomalous = false;
  Map2<std::uint8_t> mask;   // h x w, {0,1}; all zero for normal samples
};

struct DatasetSplits {
  std::vector<LabeledSample> train;  // normal only
  std::vector<LabeledSample> eval;
};

enum class DefectKind { kBlob, kScratch, kPatchSwap };

const char* defect_name(DefectKind kind);

struct SyntheticOptions {
  std::uint64_t seed = 0;
  Index n_normal = 200;      // training normals
  Index n_anomalous = 50;    // eval anomalies
  Index n_eval_normal = -1;  // held-out eval normals; -1 means max(1, n_normal / 4)
  Index extent = 64;
};

/// Grayscale sinusoid-grating textures with value noise. The grating family
/// is fixed by the seed; each image draws its own phases and noise. Anomalous
/// eval images carry one blob, scratch or patch-swap defect with its mask.
DatasetSplits generate_synthetic_dataset(const SyntheticOptions& options);

/// Writes train/good, test/good, test/<defect> and ground_truth/<defect>
/// (masks as {0,255} PGMs named <stem>_mask.pgm).
void write_dataset_dir(const DatasetSplits& splits, const std::filesystem::path& root);

/// Reads the same layout. Images are resized to extent x extent (bilinear)
/// and converted to `channels` (1 or 3); masks are resized and binarized at
/// 0.5. Files are visited in lexicographic order. Errors name the file.
DatasetSplits load_dataset_dir(const std::filesystem::path& root, Index extent, Index channels);

/// Stacks [c,h,w] images into one [b,c,h,w] batch.
Tensor<float> stack_images(std::span<const LabeledSample* const> samples);

}  // namespace multiad
