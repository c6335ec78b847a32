// Copyright 2026 The StemForge Authors
// SPDX-License-Identifier: Apache-2.0

#pragma once

// Central finite-difference check of UNet1d::backward.

#include <cstddef>
#include <cstdint>
#include <string>

#include "stemforge/denoiser.hpp"

namespace stemforge::nn {

struct GradcheckOptions {
  double step = 1e-4;
  double tolerance = 1e-4;
  /// Lower bound on the denominator of the relative error, so gradients
  /// that are zero up to rounding compare on an absolute scale.
  double denominator_floor = 1e-4;
  /// Check every parameter when 0, otherwise this many chosen at random.
  std::size_t max_params = 0;
  int num_steps = 100;
  std::uint64_t seed = 7;
};

struct GradcheckEntry {
  std::string name;
  std::size_t offset = 0;
  double analytic = 0.0;
  double numeric = 0.0;
  double rel_error = 0.0;
};

struct GradcheckReport {
  std::size_t parameters = 0;
  std::size_t checked = 0;
  std::size_t failures = 0;
  GradcheckEntry worst;
  double seconds = 0.0;

  bool passed() const noexcept { return checked > 0 && failures == 0; }
};

/// Small config for a full sweep (under 5k parameters).
DenoiserConfig gradcheck_config();

/// Every parameter (including the zero-initialized ones) is drawn at random
/// so that no gradient is trivially zero; the loss is <G, forward(z)> for a
/// random G.
GradcheckReport gradient_check(const DenoiserConfig& config,
                               const GradcheckOptions& options);

}  // namespace stemforge::nn
