// Copyright 2026 The StemForge Authors
// SPDX-License-Identifier: Apache-2.0

#include <algorithm>
#include <bit>
#include <cmath>
#include <numbers>

#include "stemforge/error.hpp"
#include "stemforge/rng.hpp"
#include "stemforge/tensor.hpp"

namespace stemforge {

std::string_view to_string(ErrorCode code) {
  switch (code) {
    case ErrorCode::InvalidInput: return "invalid_input";
    case ErrorCode::Format: return "format_error";
    case ErrorCode::Numerical: return "numerical_error";
    case ErrorCode::Conflict: return "conflict";
    case ErrorCode::NotFound: return "not_found";
    case ErrorCode::IncompleteSession: return "incomplete_session";
    case ErrorCode::Tolerance: return "tolerance_exceeded";
  }
  return "unknown";
}

std::size_t shape_size(const std::vector<std::size_t>& shape) {
  std::size_t n = 1;
  for (std::size_t d : shape) n *= d;
  return n;
}

Tensor::Tensor(std::vector<std::size_t> shape, double fill)
    : shape_(std::move(shape)), data_(shape_size(shape_), fill) {}

Tensor::Tensor(std::vector<std::size_t> shape, std::vector<double> values)
    : shape_(std::move(shape)), data_(std::move(values)) {
  require(data_.size() == shape_size(shape_), "tensor data does not match shape");
}

void Tensor::fill(double value) { std::fill(data_.begin(), data_.end(), value); }

bool Tensor::all_finite() const {
  return std::all_of(data_.begin(), data_.end(),
                     [](double v) { return std::isfinite(v); });
}

TrackLatents::TrackLatents(std::size_t tracks, std::size_t channels,
                           std::size_t frames, double fill)
    : tracks_(tracks),
      channels_(channels),
      frames_(frames),
      data_(tracks * channels * frames, fill) {}

std::span<double> TrackLatents::track(std::size_t k) {
  require(k < tracks_, "track index out of range");
  return std::span<double>(data_).subspan(k * track_size(), track_size());
}

std::span<const double> TrackLatents::track(std::size_t k) const {
  require(k < tracks_, "track index out of range");
  return std::span<const double>(data_).subspan(k * track_size(), track_size());
}

bool TrackLatents::all_finite() const {
  return std::all_of(data_.begin(), data_.end(),
                     [](double v) { return std::isfinite(v); });
}

double Rng::normal() {
  if (spare_) {
    const double v = *spare_;
    spare_.reset();
    return v;
  }
  const double u1 = 1.0 - uniform();  // (0, 1]
  const double u2 = uniform();
  const double r = std::sqrt(-2.0 * std::log(u1));
  const double theta = 2.0 * std::numbers::pi * u2;
  spare_ = r * std::sin(theta);
  return r * std::cos(theta);
}

std::size_t Rng::uniform_index(std::size_t n) {
  require(n > 0, "uniform_index requires n > 0");
  const std::uint64_t bound = static_cast<std::uint64_t>(n);
  const std::uint64_t limit = UINT64_MAX - UINT64_MAX % bound;
  std::uint64_t draw = engine_();
  while (draw >= limit) draw = engine_();
  return static_cast<std::size_t>(draw % bound);
}

void Rng::fill_normal(std::span<double> out) {
  for (double& v : out) v = normal();
}

std::uint64_t splitmix64(std::uint64_t x) {
  x += 0x9e3779b97f4a7c15ULL;
  x = (x ^ (x >> 30)) * 0xbf58476d1ce4e5b9ULL;
  x = (x ^ (x >> 27)) * 0x94d049bb133111ebULL;
  return x ^ (x >> 31);
}

}  // namespace stemforge
