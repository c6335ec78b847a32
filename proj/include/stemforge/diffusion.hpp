// Copyright 2026 The StemForge Authors
// SPDX-License-Identifier: Apache-2.0

#pragma once

// Noise schedules, the forward process, the reverse-step mean, per-track
// timestep vectors and the multi-track guided sampler.

#include <cstdint>
#include <map>
#include <optional>
#include <span>
#include <vector>

#include "stemforge/prompt.hpp"
#include "stemforge/rng.hpp"
#include "stemforge/tensor.hpp"

namespace stemforge::diffusion {

enum class ScheduleKind { Linear };

/// beta/alpha/alpha_bar over t = 1..T, indexed 1-based. alpha_bar(0) = 1.
class NoiseSchedule {
 public:
  int num_steps() const noexcept { return static_cast<int>(betas_.size()); }
  double beta(int t) const;
  double alpha(int t) const;
  double alpha_bar(int t) const;

  std::span<const double> betas() const noexcept { return betas_; }
  std::span<const double> alphas() const noexcept { return alphas_; }
  std::span<const double> alpha_bars() const noexcept { return alpha_bars_; }

  double beta_start() const noexcept { return betas_.front(); }
  double beta_end() const noexcept { return betas_.back(); }

 private:
  friend NoiseSchedule build_schedule(ScheduleKind, int, double, double);
  std::vector<double> betas_;
  std::vector<double> alphas_;
  std::vector<double> alpha_bars_;
};

NoiseSchedule build_schedule(ScheduleKind kind, int num_steps,
                             double beta_start, double beta_end);

/// Default used by the desk preset: T = 100 with the linear range scaled
/// by 1000/T so that alpha_bar(T) is close to zero.
NoiseSchedule default_schedule();

enum class TrackRole { Target, Conditional, Marginal };
using NontargetMode = TrackRole;

/// Role of every track in one generation task.
class TaskSpec {
 public:
  TaskSpec() = default;
  explicit TaskSpec(std::vector<TrackRole> roles);

  /// Targets from a mask; every other track gets `nontarget_mode`.
  static TaskSpec from_mask(std::size_t tracks, TrackMask targets,
                            TrackRole nontarget_mode);

  std::size_t tracks() const noexcept { return roles_.size(); }
  TrackRole role(std::size_t k) const { return roles_.at(k); }
  bool is_target(std::size_t k) const { return role(k) == TrackRole::Target; }
  std::size_t target_count() const noexcept;
  TrackMask target_mask() const noexcept;
  std::vector<std::size_t> targets() const;
  std::vector<std::size_t> conditional_tracks() const;
  const std::vector<TrackRole>& roles() const noexcept { return roles_; }

  bool operator==(const TaskSpec&) const = default;

 private:
  std::vector<TrackRole> roles_;
};

/// Per-track timesteps [t_1..t_K], each in [0, T].
struct TimestepVector {
  std::vector<int> steps;

  bool operator==(const TimestepVector&) const = default;
};

/// Targets at `t`, Conditional tracks at 0, Marginal tracks at T.
TimestepVector make_timesteps(const TaskSpec& task, int t, int num_steps);

/// Checks range and, against `task`, the shared-target / {0,T} rules.
void validate_timesteps(const TimestepVector& tvec, int num_steps);
void validate_timesteps(const TimestepVector& tvec, const TaskSpec& task,
                        int num_steps);

/// sqrt(abar_t) * z0 + sqrt(1 - abar_t) * eps
void forward_diffuse(std::span<const double> z0, int t,
                     std::span<const double> eps, const NoiseSchedule& schedule,
                     std::span<double> out);
std::vector<double> forward_diffuse(std::span<const double> z0, int t,
                                    std::span<const double> eps,
                                    const NoiseSchedule& schedule);

/// (1/sqrt(alpha_t)) * (z_t - beta_t / sqrt(1 - abar_t) * eps_hat)
void posterior_mean(std::span<const double> z_t, std::span<const double> eps_hat,
                    int t, const NoiseSchedule& schedule, std::span<double> out);
std::vector<double> posterior_mean(std::span<const double> z_t,
                                   std::span<const double> eps_hat, int t,
                                   const NoiseSchedule& schedule);

/// Builds the denoiser input: track i is clean if t_i = 0, noise if t_i = T,
/// otherwise the forward-diffused clean track at t_i.
TrackLatents assemble_input(const TrackLatents& clean, const TimestepVector& tvec,
                            const TrackLatents& noise,
                            const NoiseSchedule& schedule);

/// (1 - lambda) * eps_marginal + lambda * eps_conditional
void cfg_combine(std::span<const double> eps_marginal,
                 std::span<const double> eps_conditional, double lambda,
                 std::span<double> out);
std::vector<double> cfg_combine(std::span<const double> eps_marginal,
                                std::span<const double> eps_conditional,
                                double lambda);

enum class VarianceChoice { BetaT, BetaTilde };
enum class MarginalNoisePolicy { FixedDraw, ResamplePerStep };

double reverse_variance(const NoiseSchedule& schedule, int t,
                        VarianceChoice choice);

struct SamplerConfig {
  double guidance_scale = 7.0;
  VarianceChoice variance_choice = VarianceChoice::BetaT;
  MarginalNoisePolicy marginal_noise_policy = MarginalNoisePolicy::FixedDraw;
  std::uint64_t seed = 0;
  /// Prompt-level guidance for joint generation (all tracks targets):
  /// (1 - s) * eps(null prompt) + s * eps(prompt). Off when unset; needs a
  /// model trained with prompt dropout.
  std::optional<double> text_guidance_scale;
  PromptTokens null_prompt;

  void validate() const;
};

/// Read-only noise predictor eps_theta(Z, T, e).
class NoisePredictor {
 public:
  virtual ~NoisePredictor() = default;
  virtual std::size_t tracks() const = 0;
  virtual std::size_t channels() const = 0;
  virtual std::size_t frames() const = 0;
  virtual TrackLatents predict(const TrackLatents& z, const TimestepVector& tvec,
                               const PromptTokens& prompt) const = 0;
};

/// Clean latents for Conditional tracks, keyed by 0-based track index.
using LockedLatents = std::map<std::size_t, std::vector<double>>;

/// Ancestral sampling of the target tracks from T down to 1 with a shared
/// timestep. With fewer targets than tracks each step evaluates the
/// conditional and marginal branches and mixes them with the guidance
/// scale. Non-target channels of the result hold their initial values.
TrackLatents sample(const NoisePredictor& denoiser, const TaskSpec& task,
                    const LockedLatents& locked, const PromptTokens& prompt,
                    const SamplerConfig& cfg, const NoiseSchedule& schedule,
                    Rng& rng);

/// Same, seeding the generator from cfg.seed.
TrackLatents sample(const NoisePredictor& denoiser, const TaskSpec& task,
                    const LockedLatents& locked, const PromptTokens& prompt,
                    const SamplerConfig& cfg, const NoiseSchedule& schedule);

}  // namespace stemforge::diffusion
