// SPDX-License-Identifier: Apache-2.0
//
// Checkpoint layout (all integers little-endian):
//   "COPA" | u32 version | u32 header length | UTF-8 JSON header
//   | f32 tensor data | u32 CRC-32 of every preceding byte
// The header carries the run config, the training counters and loss history,
// and a manifest [{name, shape, byte_offset}] into the data section. Adam
// moments are stored as tensors named "adam.m/<param>" and "adam.v/<param>".

#pragma once

#include <cstdint>
#include <filesystem>
#include <string>
#include <string_view>

#include "textprune/trainer.hpp"

namespace textprune {

inline constexpr std::uint32_t kCheckpointVersion = 1;

std::string encode_checkpoint(const TrainState& state);
TrainState decode_checkpoint(std::string_view bytes);

// Writes through a temporary file and renames it into place.
void save_checkpoint(const TrainState& state, const std::filesystem::path& path);
TrainState load_checkpoint(const std::filesystem::path& path);

}  // namespace textprune
