#pragma once

#include <string>

#include "lmrc/model.hpp"

namespace lmrc {

/// Binary checkpoint: "LMRC" magic, u32 version, length-prefixed architecture
/// descriptor, per-tensor records (name, dtype tag, rank, extents, float32
/// payload), trailing CRC32 of all preceding bytes. All integers and floats
/// little-endian. Round trips are bit-exact.
void save_checkpoint(const Classifier& model, const std::string& path);

/// Builds a model from the stored descriptor. Throws ArtifactError on CRC
/// failure, unknown version, or malformed contents.
Classifier load_checkpoint(const std::string& path);

/// Loads into an existing model; the stored descriptor must match exactly.
void load_checkpoint_into(Classifier& model, const std::string& path);

std::uint32_t crc32(const void* data, std::size_t length, std::uint32_t seed = 0);

}  // namespace lmrc
