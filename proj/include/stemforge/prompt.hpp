// Copyright 2026 The StemForge Authors
// SPDX-License-Identifier: Apache-2.0

#pragma once

#include <array>
#include <cstddef>
#include <cstdint>
#include <optional>
#include <string>
#include <string_view>
#include <vector>

namespace stemforge {

/// Stem order used throughout: index 0 is bass, 3 is melody.
inline constexpr std::array<std::string_view, 4> kStemNames = {
    "bass", "drums", "instrument", "melody"};

/// Bitmask over tracks; bit k set means track k is a generation target.
using TrackMask = std::uint32_t;

struct PromptTokens {
  std::uint32_t prefix_task_token = 0;
  std::vector<std::uint32_t> content_tokens;

  /// Prefix first, then content.
  std::vector<std::uint32_t> ids() const;

  bool operator==(const PromptTokens&) const = default;
};

/// Closed prompt vocabulary:
///   [0, 2^K - 1)       task prefix tokens, one per nonempty target mask
///   2^K - 1            null token (prompt dropout / text guidance)
///   then f0 buckets, tempo buckets, motif ids.
class Vocabulary {
 public:
  Vocabulary(std::size_t tracks, std::size_t f0_buckets,
             std::size_t tempo_buckets, std::size_t motifs);

  std::size_t size() const noexcept;
  std::size_t tracks() const noexcept { return tracks_; }
  std::size_t task_count() const noexcept { return (std::size_t{1} << tracks_) - 1; }

  std::uint32_t task_token(TrackMask targets) const;
  std::optional<TrackMask> task_mask(std::uint32_t token) const;
  std::uint32_t null_token() const noexcept;
  std::uint32_t f0_token(std::size_t bucket) const;
  std::uint32_t tempo_token(std::size_t bucket) const;
  std::uint32_t motif_token(std::size_t motif) const;

  PromptTokens prompt(TrackMask targets, std::size_t f0_bucket,
                      std::size_t tempo_bucket, std::size_t motif) const;

  /// Human-readable form of a task token, e.g. "[bass & drums generation]".
  std::string task_label(TrackMask targets) const;

 private:
  std::size_t tracks_;
  std::size_t f0_buckets_;
  std::size_t tempo_buckets_;
  std::size_t motifs_;
};

std::string track_name(std::size_t k);

/// Parses a comma list of stem names ("bass,drums") or 1-based indices.
TrackMask parse_track_list(std::string_view text, std::size_t tracks);

TrackMask full_mask(std::size_t tracks);

}  // namespace stemforge
