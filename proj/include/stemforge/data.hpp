// Copyright 2026 The StemForge Authors
// SPDX-License-Identifier: Apache-2.0

#pragma once

// Synthetic four-stem dataset, invertible frame codecs and the STEM
// dataset container.

#include <cstddef>
#include <cstdint>
#include <filesystem>
#include <string>
#include <string_view>
#include <vector>

#include "stemforge/prompt.hpp"
#include "stemforge/tensor.hpp"

namespace stemforge::data {

using Waveform = std::vector<double>;

enum class CodecKind { IdentityFrames, OrthoLinear };

std::string to_string(CodecKind kind);
CodecKind parse_codec_kind(std::string_view text);

/// Dataset configuration. The file form is `key = value` lines; `#` starts
/// a comment.
struct DatasetConfig {
  std::uint32_t sample_rate = 4000;
  std::size_t num_samples = 512;
  std::uint64_t seed = 1;
  std::vector<double> f0_buckets = {55.0, 65.0, 73.0, 82.0, 98.0, 110.0, 123.0, 147.0};
  /// Drum periods in samples.
  std::vector<std::uint32_t> tempo_buckets = {200, 250, 320, 400, 500};
  std::uint32_t motif_count = 8;
  std::size_t frame_size = 32;
  CodecKind codec_kind = CodecKind::IdentityFrames;
  double target_rms = 0.1;
  std::size_t segment_length = 2048;
  /// Relative spread of f0 around its bucket value.
  double f0_jitter = 0.0;
  std::uint64_t codec_seed = 0;

  static constexpr std::size_t kTracks = 4;

  void validate() const;
  Vocabulary vocabulary() const;
  std::size_t latent_frames() const { return segment_length / frame_size; }

  static DatasetConfig parse(std::string_view text);
  static DatasetConfig load(const std::filesystem::path& path);
  std::string to_text() const;
};

struct StemMeta {
  double f0 = 0.0;
  std::uint32_t tempo_period = 0;
  std::uint32_t motif = 0;
  std::uint64_t seed = 0;

  bool operator==(const StemMeta&) const = default;
};

struct StemSample {
  std::vector<Waveform> waveforms;  // K tracks of S samples
  PromptTokens prompt;              // content tokens; no task prefix
  StemMeta meta;

  bool operator==(const StemSample&) const = default;
};

/// Melody step ratios for a motif: base-3 digits of the id, least
/// significant first, mapped to {1, 5/4, 3/2}.
std::vector<double> motif_ratios(std::uint32_t motif);

/// Deterministic in (config, seed); tracks are loudness-normalized and
/// rounded to float32.
StemSample generate_sample(const DatasetConfig& config, std::uint64_t seed);

/// Samples for seeds config.seed .. config.seed + num_samples - 1.
std::vector<StemSample> synthesize(const DatasetConfig& config);

struct LoudnessResult {
  StemSample sample;
  std::size_t clipped = 0;
};

/// Scales every track to `target_rms`, then clips to [-1, 1] if needed.
LoudnessResult normalize_loudness(const StemSample& sample, double target_rms);

double rms(std::span<const double> x);

/// Mean of the stems, rescaled to `target_rms`.
Waveform render_mix(const std::vector<Waveform>& tracks, double target_rms);

class Codec {
 public:
  Codec(CodecKind kind, std::size_t frame_size, std::uint64_t seed = 0);

  CodecKind kind() const noexcept { return kind_; }
  std::size_t frame_size() const noexcept { return frame_size_; }
  /// F x F row-major; identity for IdentityFrames.
  const std::vector<double>& basis() const noexcept { return basis_; }

  /// D x S' row-major (D = F, S' = S/F).
  std::vector<double> encode(std::span<const double> x) const;
  Waveform decode(std::span<const double> z) const;

 private:
  CodecKind kind_;
  std::size_t frame_size_;
  std::vector<double> basis_;
};

/// Encodes every track and multiplies by `latent_scale`.
TrackLatents encode_tracks(const std::vector<Waveform>& tracks, const Codec& codec,
                           double latent_scale);
std::vector<Waveform> decode_tracks(const TrackLatents& z, const Codec& codec,
                                    double latent_scale);

struct DatasetHeader {
  std::uint32_t tracks = 0;
  std::uint32_t sample_rate = 0;
  std::uint32_t length = 0;
  std::uint32_t vocab_size = 0;

  bool operator==(const DatasetHeader&) const = default;
};

struct Dataset {
  DatasetHeader header;
  std::vector<StemSample> samples;

  bool operator==(const Dataset&) const = default;
};

std::vector<std::uint8_t> serialize_dataset(const Dataset& dataset);
Dataset deserialize_dataset(std::span<const std::uint8_t> bytes);
void write_dataset(const Dataset& dataset, const std::filesystem::path& path);
Dataset read_dataset(const std::filesystem::path& path);

Dataset make_dataset(const DatasetConfig& config, std::vector<StemSample> samples);

}  // namespace stemforge::data
