#pragma once

#include <cstdint>
#include <filesystem>
#include <vector>

#include "multiad/tensor.hpp"

namespace multiad {

/// 8-bit interleaved raster as stored in binary PGM (1 channel) or PPM (3).
struct Image {
  Index width = 0;
  Index height = 0;
  Index channels = 1;
  std::vector<std::uint8_t> pixels;  // row-major, channels interleaved
};

/// Reads binary P5/P6 with maxval <= 255. Throws FormatError naming the file.
Image read_pnm(const std::filesystem::path& path);

/// Writes P5 for 1-channel images and P6 for 3-channel images.
void write_pnm(const std::filesystem::path& path, const Image& image);

/// [c,h,w] tensor with values in [0,1].
Tensor<float> image_to_tensor(const Image& image);

/// Inverse of image_to_tensor; values are clamped to [0,1] and rounded.
Image tensor_to_image(const Tensor<float>& chw);

}  // namespace multiad
