// Copyright 2026 The StemForge Authors
// SPDX-License-Identifier: Apache-2.0

#pragma once

// Curriculum training of the multi-track denoiser: task allocation, the
// conditional/marginal mode sampler, masked loss, AdamW, EMA teacher and
// self-bootstrapping of conditional tracks.

#include <array>
#include <chrono>
#include <cstddef>
#include <cstdint>
#include <filesystem>
#include <functional>
#include <memory>
#include <optional>
#include <string>
#include <vector>

#include "stemforge/denoiser.hpp"
#include "stemforge/diffusion.hpp"
#include "stemforge/prompt.hpp"
#include "stemforge/rng.hpp"

namespace stemforge::train {

using diffusion::TaskSpec;
using diffusion::TrackRole;
using nn::ParameterSet;

struct CurriculumConfig {
  std::size_t tracks = 4;
  int total_epochs = 60;
  double boundary1 = 0.3;
  double boundary2 = 0.7;
  double p1 = 0.8;
  double p2 = 0.5;
  double bootstrap_start_fraction = 0.6;
  double ema_decay = 0.999;

  void validate() const;
};

enum class LrSchedule { LinearDecay };

struct TrainConfig {
  double lr_start = 1e-3;
  LrSchedule lr_schedule = LrSchedule::LinearDecay;
  std::size_t batch_size = 8;
  double beta1 = 0.9;
  double beta2 = 0.95;
  double weight_decay = 0.1;
  double adam_eps = 1e-8;
  double grad_clip = 0.7;
  int epochs = 60;
  std::uint64_t seed = 0;
  /// Probability of dropping the content tokens (the task prefix stays).
  double prompt_dropout = 0.0;
  /// Guidance scale used when the teacher generates bootstrap tracks.
  double bootstrap_guidance = 7.0;

  /// Small model, small data: lr 1e-3.
  static TrainConfig desk();
  /// Published settings: lr 3e-5, batch 12.
  static TrainConfig paper();
  void validate() const;
};

enum class TaskCategory { Single = 0, Partial = 1, Joint = 2 };
const char* to_string(TaskCategory c);
TaskCategory category_of(TrackMask targets, std::size_t tracks);

struct CurriculumState {
  int epoch = 0;
  /// Indexed by target mask - 1.
  std::vector<double> subset_probs;
  std::array<double, 3> category_probs{};

  double prob(TrackMask mask) const { return subset_probs.at(mask - 1); }
};

CurriculumState task_probabilities(const CurriculumConfig& config, int epoch);

TrackMask sample_task(const CurriculumState& state, Rng& rng);

/// All non-targets Conditional with probability p1, else all Marginal.
TrackRole sample_nontarget_mode(std::size_t tracks, TrackMask targets, double p1, Rng& rng);

/// Mean squared error over target-track channels only.
double masked_loss(const TrackLatents& pred, const TrackLatents& truth, TrackMask targets);
/// d masked_loss / d pred, scaled by `scale`; exactly zero off-target.
TrackLatents masked_loss_grad(const TrackLatents& pred, const TrackLatents& truth,
                              TrackMask targets, double scale = 1.0);

double global_norm(const ParameterSet& grads);
/// Rescales to `threshold` when the global L2 norm exceeds it; returns the
/// norm before clipping.
double clip_gradients(ParameterSet& grads, double threshold);

struct AdamState {
  ParameterSet m;
  ParameterSet v;
  long step = 0;

  static AdamState zeros_like(const ParameterSet& params);
};

/// Decoupled weight decay, then the bias-corrected Adam update.
void adamw_step(ParameterSet& params, const ParameterSet& grads, AdamState& state,
                const TrainConfig& config, double lr);

/// lr_start * (1 - step / total_steps) for step = 0 .. total_steps - 1.
double learning_rate(const TrainConfig& config, long step, long total_steps);

/// teacher <- decay * teacher + (1 - decay) * student
void ema_update(ParameterSet& teacher, const ParameterSet& student, double decay);

/// Read-only EMA snapshot used to generate bootstrap tracks.
struct Teacher {
  const nn::UNet1d* model = nullptr;
  std::shared_ptr<const ParameterSet> params;
  const diffusion::NoiseSchedule* schedule = nullptr;
  const Vocabulary* vocab = nullptr;
  double guidance_scale = 7.0;
};

struct BatchItem {
  TrackLatents clean;
  PromptTokens content;  // no task prefix
  TaskSpec task;
  /// Conditional tracks replaced by teacher output, as a mask.
  TrackMask bootstrapped = 0;
};

/// From bootstrap_start_fraction of training on, each item with at least
/// one Conditional track is picked with probability p2. A picked item has
/// each Conditional track replaced with probability 1/2 (redrawn until at
/// least one is). The teacher samples the replaced tracks given every other
/// track's ground truth and the prompt. Returns the number of items changed.
std::size_t bootstrap_batch(std::vector<BatchItem>& batch, const Teacher* teacher,
                            const CurriculumConfig& config, int epoch, Rng& rng);

struct TrainingExample {
  TrackLatents latents;
  PromptTokens content;
};

struct EpochMetrics {
  int epoch = 0;  // 1-based
  std::array<double, 3> category_loss{};  // NaN when a category was not drawn
  std::array<std::size_t, 3> category_count{};
  double mean_loss = 0.0;
  double lr = 0.0;  // at the epoch's last step
  double seconds = 0.0;
  std::size_t steps = 0;
  std::size_t bootstrapped = 0;
  std::size_t conditional_modes = 0;
  std::size_t marginal_modes = 0;
  std::vector<std::size_t> task_counts;  // by mask - 1
};

/// One newline-free record: epoch, loss per category, lr, wall time.
std::string to_record(const EpochMetrics& m);

class Trainer {
 public:
  Trainer(nn::UNet1d model, ParameterSet init, std::vector<TrainingExample> data,
          Vocabulary vocab, CurriculumConfig curriculum, TrainConfig config,
          diffusion::NoiseSchedule schedule);

  /// Runs one epoch. A non-finite loss throws a Numerical error after
  /// writing the current parameters to `divergence_dump` when set.
  EpochMetrics run_epoch();
  bool done() const noexcept { return epoch_ >= config_.epochs; }
  int epoch() const noexcept { return epoch_; }
  long step() const noexcept { return step_; }
  long total_steps() const noexcept;

  const nn::UNet1d& model() const noexcept { return model_; }
  const ParameterSet& params() const noexcept { return params_; }
  const ParameterSet& ema() const noexcept { return ema_; }
  const diffusion::NoiseSchedule& schedule() const noexcept { return schedule_; }

  std::optional<std::filesystem::path> divergence_dump;

 private:
  nn::UNet1d model_;
  ParameterSet params_;
  ParameterSet ema_;
  AdamState adam_;
  std::vector<TrainingExample> data_;
  Vocabulary vocab_;
  CurriculumConfig curriculum_;
  TrainConfig config_;
  diffusion::NoiseSchedule schedule_;
  Rng rng_;
  int epoch_ = 0;
  long step_ = 0;
};

}  // namespace stemforge::train
