// Copyright 2026 The StemForge Authors
// SPDX-License-Identifier: Apache-2.0

#pragma once

// STMF tensor container:
//   "STMF" | version u32 | records | crc32 u32
//   record = name length u32 | name | rank u32 | dims u32 x rank | float32 data
// The CRC covers every byte before it. Model and schedule settings travel
// as "meta.*" tensors.

#include <cstdint>
#include <filesystem>
#include <map>
#include <span>
#include <string>
#include <vector>

#include "stemforge/denoiser.hpp"
#include "stemforge/diffusion.hpp"

namespace stemforge::nn {

struct NamedTensor {
  std::string name;
  std::vector<std::size_t> shape;
  std::vector<float> data;

  bool operator==(const NamedTensor&) const = default;
};

std::vector<std::uint8_t> write_container(const std::vector<NamedTensor>& tensors);
std::vector<NamedTensor> read_container(std::span<const std::uint8_t> bytes);

struct ScheduleSpec {
  int num_steps = 100;
  double beta_start = 1e-3;
  double beta_end = 0.2;

  diffusion::NoiseSchedule build() const;
  bool operator==(const ScheduleSpec&) const = default;
};

struct Checkpoint {
  DenoiserConfig model;
  ScheduleSpec schedule;
  /// Multiplier from codec output to model latents.
  double latent_scale = 10.0;
  ParameterSet params;
};

std::vector<std::uint8_t> serialize_checkpoint(const Checkpoint& checkpoint);
/// Settings stored as float32 come back rounded to float32.
Checkpoint deserialize_checkpoint(std::span<const std::uint8_t> bytes);

void save_checkpoint(const Checkpoint& checkpoint, const std::filesystem::path& path);
Checkpoint load_checkpoint(const std::filesystem::path& path);

/// "<stem>.ema.stmf" next to "<stem>.stmf".
std::filesystem::path ema_path(const std::filesystem::path& path);

}  // namespace stemforge::nn
