// Copyright 2026 The StemForge Authors
// SPDX-License-Identifier: Apache-2.0

#pragma once

// End-to-end pieces shared by the command-line tools, the session service
// and the acceptance run: model sizing, training on a dataset, generation
// from waveforms and the trained-model evaluations.

#include <cstdint>
#include <filesystem>
#include <functional>
#include <map>
#include <memory>
#include <optional>
#include <string_view>
#include <vector>

#include "stemforge/checkpoint.hpp"
#include "stemforge/data.hpp"
#include "stemforge/denoiser.hpp"
#include "stemforge/diffusion.hpp"
#include "stemforge/eval.hpp"
#include "stemforge/prompt.hpp"
#include "stemforge/trainer.hpp"

namespace stemforge::pipeline {

using data::Waveform;

enum class Preset { Desk, Paper };
Preset parse_preset(std::string_view text);
const char* to_string(Preset p);

/// K=4, D=frame size, S'=latent frames, H=32, depth 2; the embedding table
/// covers the dataset vocabulary.
nn::DenoiserConfig model_config(const data::DatasetConfig& config);
/// T=100 with the rescaled linear range.
nn::ScheduleSpec schedule_spec();
/// Codec output times this is unit scale: 1 / target_rms.
double latent_scale(const data::DatasetConfig& config);

std::vector<train::TrainingExample> training_examples(const std::vector<data::StemSample>& samples,
                                                      const data::Codec& codec, double scale);

/// Samples seeded right after the training range, so the two never overlap.
data::DatasetConfig held_out_config(const data::DatasetConfig& config, std::size_t count);

struct TrainOptions {
  Preset preset = Preset::Desk;
  std::uint64_t seed = 0;
  int epochs = 60;  // 0 returns the initial weights
  std::optional<std::filesystem::path> divergence_dump;
  std::function<void(const train::EpochMetrics&)> on_epoch;
};

struct TrainResult {
  nn::Checkpoint model;
  nn::Checkpoint ema;
  std::vector<train::EpochMetrics> history;
};

TrainResult train_model(const data::DatasetConfig& config,
                        const std::vector<data::StemSample>& samples, const TrainOptions& options);

/// Model, schedule, codec and prompt vocabulary used for generation.
struct Engine {
  nn::UNet1d model;
  std::shared_ptr<const nn::ParameterSet> params;
  diffusion::NoiseSchedule schedule;
  data::DatasetConfig data;
  data::Codec codec;
  Vocabulary vocab;
  double latent_scale = 10.0;

  Engine(nn::Checkpoint checkpoint, data::DatasetConfig config);
  static std::shared_ptr<const Engine> load(const std::filesystem::path& checkpoint,
                                            const std::filesystem::path& config);

  std::size_t tracks() const { return model.config().tracks; }
  std::size_t length() const { return data.segment_length; }
};

struct Generation {
  TrackLatents latents;
  /// Targets decoded, Conditional tracks copied from the input, Marginal
  /// tracks empty.
  std::vector<Waveform> tracks;
};

/// Samples the targets of `task` given the waveforms of its Conditional
/// tracks, prompted with the targets' task token and `content`.
Generation generate(const Engine& engine, const diffusion::TaskSpec& task,
                    const std::map<std::size_t, Waveform>& given,
                    const std::vector<std::uint32_t>& content, std::uint64_t seed,
                    double lambda);

struct ConditionalReport {
  std::vector<eval::RatioCheck> checks;
  std::size_t passes = 0;

  double pass_rate() const {
    return checks.empty() ? 0.0 : static_cast<double>(passes) / checks.size();
  }
};

/// Generates drums, instrument and melody given each sample's ground-truth
/// bass and checks the instrument/bass ratio against {2, 3}.
ConditionalReport conditional_bass_eval(const Engine& engine,
                                        const std::vector<data::StemSample>& samples,
                                        std::uint64_t seed, double lambda);

struct FrechetReport {
  double generated = 0.0;  // generated mixes vs held-out mixes
  double noisy = 0.0;      // held-out mixes vs a 0 dB noisy copy
  std::size_t count = 0;

  bool pass() const { return generated < noisy; }
};

/// Joint generation from each held-out prompt, mixed like the dataset.
FrechetReport frechet_eval(const Engine& engine, const std::vector<data::StemSample>& held_out,
                           std::uint64_t seed, double lambda);

/// White Gaussian noise at the RMS of `x` added to it.
Waveform add_noise_0db(const Waveform& x, std::uint64_t seed);

}  // namespace stemforge::pipeline
