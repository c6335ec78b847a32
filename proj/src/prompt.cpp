// Copyright 2026 The StemForge Authors
// SPDX-License-Identifier: Apache-2.0

#include "stemforge/prompt.hpp"

#include <charconv>

#include "stemforge/error.hpp"

namespace stemforge {

std::vector<std::uint32_t> PromptTokens::ids() const {
  std::vector<std::uint32_t> out;
  out.reserve(content_tokens.size() + 1);
  out.push_back(prefix_task_token);
  out.insert(out.end(), content_tokens.begin(), content_tokens.end());
  return out;
}

Vocabulary::Vocabulary(std::size_t tracks, std::size_t f0_buckets,
                       std::size_t tempo_buckets, std::size_t motifs)
    : tracks_(tracks),
      f0_buckets_(f0_buckets),
      tempo_buckets_(tempo_buckets),
      motifs_(motifs) {
  require(tracks >= 1 && tracks <= 16, "track count must be in [1, 16]");
}

std::size_t Vocabulary::size() const noexcept {
  return task_count() + 1 + f0_buckets_ + tempo_buckets_ + motifs_;
}

TrackMask full_mask(std::size_t tracks) {
  return static_cast<TrackMask>((TrackMask{1} << tracks) - 1);
}

std::uint32_t Vocabulary::task_token(TrackMask targets) const {
  require(targets != 0 && targets <= full_mask(tracks_),
          "task mask must name a nonempty subset of tracks");
  return targets - 1;
}

std::optional<TrackMask> Vocabulary::task_mask(std::uint32_t token) const {
  if (token >= task_count()) return std::nullopt;
  return token + 1;
}

std::uint32_t Vocabulary::null_token() const noexcept {
  return static_cast<std::uint32_t>(task_count());
}

std::uint32_t Vocabulary::f0_token(std::size_t bucket) const {
  require(bucket < f0_buckets_, "f0 bucket out of range");
  return static_cast<std::uint32_t>(task_count() + 1 + bucket);
}

std::uint32_t Vocabulary::tempo_token(std::size_t bucket) const {
  require(bucket < tempo_buckets_, "tempo bucket out of range");
  return static_cast<std::uint32_t>(task_count() + 1 + f0_buckets_ + bucket);
}

std::uint32_t Vocabulary::motif_token(std::size_t motif) const {
  require(motif < motifs_, "motif id out of range");
  return static_cast<std::uint32_t>(task_count() + 1 + f0_buckets_ +
                                    tempo_buckets_ + motif);
}

PromptTokens Vocabulary::prompt(TrackMask targets, std::size_t f0_bucket,
                                std::size_t tempo_bucket,
                                std::size_t motif) const {
  return PromptTokens{task_token(targets),
                      {f0_token(f0_bucket), tempo_token(tempo_bucket),
                       motif_token(motif)}};
}

std::string track_name(std::size_t k) {
  if (k < kStemNames.size()) return std::string(kStemNames[k]);
  return "track" + std::to_string(k + 1);
}

std::string Vocabulary::task_label(TrackMask targets) const {
  std::string label = "[";
  bool first = true;
  for (std::size_t k = 0; k < tracks_; ++k) {
    if (!(targets & (TrackMask{1} << k))) continue;
    if (!first) label += " & ";
    label += track_name(k);
    first = false;
  }
  return label + " generation]";
}

TrackMask parse_track_list(std::string_view text, std::size_t tracks) {
  TrackMask mask = 0;
  auto trim = [](std::string_view s) {
    while (!s.empty() && (s.front() == ' ' || s.front() == '\t')) s.remove_prefix(1);
    while (!s.empty() && (s.back() == ' ' || s.back() == '\t')) s.remove_suffix(1);
    return s;
  };
  while (!text.empty()) {
    const auto cut = text.find_first_of(",&");
    std::string_view item = trim(text.substr(0, cut));
    text = cut == std::string_view::npos ? std::string_view{} : text.substr(cut + 1);
    if (item.empty()) continue;
    std::optional<std::size_t> index;
    for (std::size_t k = 0; k < tracks; ++k)
      if (item == track_name(k)) index = k;
    if (!index) {
      std::size_t one_based = 0;
      const auto [ptr, ec] =
          std::from_chars(item.data(), item.data() + item.size(), one_based);
      if (ec == std::errc{} && ptr == item.data() + item.size() &&
          one_based >= 1 && one_based <= tracks)
        index = one_based - 1;
    }
    require(index.has_value(), "unknown track '" + std::string(item) + "'");
    mask |= TrackMask{1} << *index;
  }
  return mask;
}

}  // namespace stemforge
