// Copyright 2026 The StemForge Authors
// SPDX-License-Identifier: Apache-2.0

#pragma once

#include <cstddef>
#include <span>
#include <vector>

namespace stemforge {

/// Dense row-major array of doubles with a runtime shape.
class Tensor {
 public:
  Tensor() = default;
  explicit Tensor(std::vector<std::size_t> shape, double fill = 0.0);
  Tensor(std::vector<std::size_t> shape, std::vector<double> values);

  const std::vector<std::size_t>& shape() const noexcept { return shape_; }
  std::size_t rank() const noexcept { return shape_.size(); }
  std::size_t dim(std::size_t axis) const { return shape_.at(axis); }
  std::size_t size() const noexcept { return data_.size(); }

  double* data() noexcept { return data_.data(); }
  const double* data() const noexcept { return data_.data(); }
  std::span<double> values() noexcept { return data_; }
  std::span<const double> values() const noexcept { return data_; }

  double& operator[](std::size_t i) { return data_[i]; }
  double operator[](std::size_t i) const { return data_[i]; }

  void fill(double value);
  bool all_finite() const;

  bool operator==(const Tensor&) const = default;

 private:
  std::vector<std::size_t> shape_;
  std::vector<double> data_;
};

std::size_t shape_size(const std::vector<std::size_t>& shape);

/// K x D x S' latent block. Track k occupies the contiguous range
/// [k*D*S', (k+1)*D*S'), so the buffer is also the (K*D) x S'
/// channel-concatenated view without any copy.
class TrackLatents {
 public:
  TrackLatents() = default;
  TrackLatents(std::size_t tracks, std::size_t channels, std::size_t frames,
               double fill = 0.0);

  std::size_t tracks() const noexcept { return tracks_; }
  std::size_t channels() const noexcept { return channels_; }
  std::size_t frames() const noexcept { return frames_; }
  std::size_t track_size() const noexcept { return channels_ * frames_; }
  std::size_t size() const noexcept { return data_.size(); }

  std::span<double> track(std::size_t k);
  std::span<const double> track(std::size_t k) const;
  std::span<double> values() noexcept { return data_; }
  std::span<const double> values() const noexcept { return data_; }

  double& at(std::size_t k, std::size_t d, std::size_t s) {
    return data_[(k * channels_ + d) * frames_ + s];
  }
  double at(std::size_t k, std::size_t d, std::size_t s) const {
    return data_[(k * channels_ + d) * frames_ + s];
  }

  bool same_shape(const TrackLatents& other) const noexcept {
    return tracks_ == other.tracks_ && channels_ == other.channels_ &&
           frames_ == other.frames_;
  }
  bool all_finite() const;

  bool operator==(const TrackLatents&) const = default;

 private:
  std::size_t tracks_ = 0;
  std::size_t channels_ = 0;
  std::size_t frames_ = 0;
  std::vector<double> data_;
};

}  // namespace stemforge
