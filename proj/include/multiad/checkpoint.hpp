#pragma once

#include <cstdint>
#include <filesystem>
#include <string>

#include "multiad/model.hpp"

namespace multiad {

inline constexpr std::uint32_t kCheckpointVersion = 1;

/// Little-endian layout: "MADC", u32 version, u32 meta length + JSON meta
/// (config and training state), u32 record count, then records of
/// (u32 name length, name, u32 ndims, u32 dims[ndims], f32 data[]), and a
/// trailing CRC32 of every preceding byte.
std::string serialize_checkpoint(Model& model);
Model deserialize_checkpoint(const std::string& bytes);

void save_checkpoint(Model& model, const std::filesystem::path& path);
Model load_checkpoint(const std::filesystem::path& path);

}  // namespace multiad
