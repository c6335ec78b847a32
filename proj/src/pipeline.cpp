// Copyright 2026 The StemForge Authors
// SPDX-License-Identifier: Apache-2.0

#include "stemforge/pipeline.hpp"

#include <cmath>
#include <string>

#include "stemforge/error.hpp"
#include "stemforge/rng.hpp"

namespace stemforge::pipeline {

using diffusion::TaskSpec;
using diffusion::TrackRole;

Preset parse_preset(std::string_view text) {
  if (text == "desk") return Preset::Desk;
  if (text == "paper") return Preset::Paper;
  fail(ErrorCode::InvalidInput, "unknown preset '" + std::string(text) + "' (desk or paper)");
}

const char* to_string(Preset p) { return p == Preset::Desk ? "desk" : "paper"; }

nn::DenoiserConfig model_config(const data::DatasetConfig& config) {
  config.validate();
  nn::DenoiserConfig c;
  c.tracks = data::DatasetConfig::kTracks;
  c.latent_channels = config.frame_size;
  c.frames = config.latent_frames();
  c.hidden = 32;
  c.depth = 2;
  c.time_embed = 16;
  c.vocab = config.vocabulary().size();
  c.prompt_embed = 16;
  c.cond_width = 64;
  c.validate();
  return c;
}

nn::ScheduleSpec schedule_spec() { return nn::ScheduleSpec{100, 1e-3, 0.2}; }

double latent_scale(const data::DatasetConfig& config) { return 1.0 / config.target_rms; }

std::vector<train::TrainingExample> training_examples(const std::vector<data::StemSample>& samples,
                                                      const data::Codec& codec, double scale) {
  std::vector<train::TrainingExample> out;
  out.reserve(samples.size());
  for (const auto& s : samples)
    out.push_back({data::encode_tracks(s.waveforms, codec, scale), s.prompt});
  return out;
}

data::DatasetConfig held_out_config(const data::DatasetConfig& config, std::size_t count) {
  data::DatasetConfig h = config;
  h.seed = config.seed + config.num_samples;
  h.num_samples = count;
  return h;
}

TrainResult train_model(const data::DatasetConfig& config,
                        const std::vector<data::StemSample>& samples, const TrainOptions& options) {
  require(options.epochs >= 0, "epochs must be >= 0");
  const data::Codec codec(config.codec_kind, config.frame_size, config.codec_seed);
  const double scale = latent_scale(config);
  const auto spec = schedule_spec();
  const nn::UNet1d model(model_config(config));

  Rng init_rng(derive_seed(options.seed, 1));
  auto init = model.init_params(init_rng);

  if (options.epochs == 0) {
    nn::Checkpoint c{model.config(), spec, scale, std::move(init)};
    return {c, c, {}};
  }

  auto tc = options.preset == Preset::Desk ? train::TrainConfig::desk() : train::TrainConfig::paper();
  tc.epochs = options.epochs;
  tc.seed = options.seed;
  train::CurriculumConfig cc;
  cc.tracks = data::DatasetConfig::kTracks;
  cc.total_epochs = options.epochs;
  // 0.999 averages over most of a desk run and makes a poor teacher
  if (options.preset == Preset::Desk) cc.ema_decay = 0.99;

  train::Trainer trainer(model, std::move(init), training_examples(samples, codec, scale),
                         config.vocabulary(), cc, tc, spec.build());
  trainer.divergence_dump = options.divergence_dump;

  TrainResult r;
  while (!trainer.done()) {
    r.history.push_back(trainer.run_epoch());
    if (options.on_epoch) options.on_epoch(r.history.back());
  }
  r.model = nn::Checkpoint{model.config(), spec, scale, trainer.params()};
  r.ema = nn::Checkpoint{model.config(), spec, scale, trainer.ema()};
  return r;
}

Engine::Engine(nn::Checkpoint checkpoint, data::DatasetConfig config)
    : model(checkpoint.model),
      params(std::make_shared<const nn::ParameterSet>(std::move(checkpoint.params))),
      schedule(checkpoint.schedule.build()),
      data(std::move(config)),
      codec(data.codec_kind, data.frame_size, data.codec_seed),
      vocab(data.vocabulary()),
      latent_scale(checkpoint.latent_scale) {
  data.validate();
  const auto& c = model.config();
  require(c.tracks == data::DatasetConfig::kTracks, "model track count must be 4");
  require(c.latent_channels == data.frame_size && c.frames == data.latent_frames(),
          "model latent shape does not match the codec configuration");
  require(vocab.size() <= c.vocab, "prompt vocabulary larger than the model's embedding table");
  require(params->same_layout(model.empty_params()), "parameters do not fit the model");
  require(std::isfinite(latent_scale) && latent_scale > 0.0, "latent scale must be > 0");
}

std::shared_ptr<const Engine> Engine::load(const std::filesystem::path& checkpoint,
                                           const std::filesystem::path& config) {
  return std::make_shared<const Engine>(nn::load_checkpoint(checkpoint),
                                        data::DatasetConfig::load(config));
}

Generation generate(const Engine& engine, const TaskSpec& task,
                    const std::map<std::size_t, Waveform>& given,
                    const std::vector<std::uint32_t>& content, std::uint64_t seed,
                    double lambda) {
  const std::size_t K = engine.tracks();
  require(task.tracks() == K, "task track count does not match the model");
  require(task.target_count() >= 1, "task needs at least one target");
  diffusion::LockedLatents locked;
  for (std::size_t k : task.conditional_tracks()) {
    const auto it = given.find(k);
    require(it != given.end(), "missing waveform for conditional track " + track_name(k));
    require(it->second.size() == engine.length(), "conditional track " + track_name(k) +
                                                      " must have " +
                                                      std::to_string(engine.length()) + " samples");
    auto z = engine.codec.encode(it->second);
    for (double& v : z) v *= engine.latent_scale;
    locked[k] = std::move(z);
  }
  for (const auto& [k, w] : given)
    require(k < K && task.role(k) == TrackRole::Conditional,
            "waveform given for a track that is not conditional");

  const PromptTokens prompt{engine.vocab.task_token(task.target_mask()), content};
  diffusion::SamplerConfig cfg;
  cfg.guidance_scale = lambda;
  cfg.seed = seed;
  const nn::Denoiser den(engine.model, engine.params);
  Generation g;
  g.latents = diffusion::sample(den, task, locked, prompt, cfg, engine.schedule);
  const auto waves = data::decode_tracks(g.latents, engine.codec, engine.latent_scale);
  g.tracks.resize(K);
  for (std::size_t k = 0; k < K; ++k) {
    if (task.is_target(k))
      g.tracks[k] = waves[k];
    else if (task.role(k) == TrackRole::Conditional)
      g.tracks[k] = given.at(k);
  }
  return g;
}

ConditionalReport conditional_bass_eval(const Engine& engine,
                                        const std::vector<data::StemSample>& samples,
                                        std::uint64_t seed, double lambda) {
  const std::size_t K = engine.tracks();
  const TaskSpec task = TaskSpec::from_mask(K, full_mask(K) & ~TrackMask{1}, TrackRole::Conditional);
  const double ratios[] = {2.0, 3.0};
  ConditionalReport r;
  for (std::size_t i = 0; i < samples.size(); ++i) {
    const auto& s = samples[i];
    const auto g = generate(engine, task, {{0, s.waveforms[0]}}, s.prompt.content_tokens,
                            derive_seed(seed, i), lambda);
    r.checks.push_back(eval::check_ratio("instrument/bass", g.tracks[2], s.waveforms[0], ratios,
                                         engine.data.sample_rate));
    if (r.checks.back().pass) ++r.passes;
  }
  return r;
}

Waveform add_noise_0db(const Waveform& x, std::uint64_t seed) {
  Rng rng(seed);
  const double level = data::rms(x);
  Waveform out(x.size());
  for (std::size_t i = 0; i < x.size(); ++i) out[i] = x[i] + level * rng.normal();
  return out;
}

FrechetReport frechet_eval(const Engine& engine, const std::vector<data::StemSample>& held_out,
                           std::uint64_t seed, double lambda) {
  const std::size_t K = engine.tracks();
  const TaskSpec joint = TaskSpec::from_mask(K, full_mask(K), TrackRole::Conditional);
  std::vector<std::vector<double>> gen, real, noisy;
  for (std::size_t i = 0; i < held_out.size(); ++i) {
    const auto& s = held_out[i];
    const auto g =
        generate(engine, joint, {}, s.prompt.content_tokens, derive_seed(seed, i), lambda);
    gen.push_back(eval::spectral_features(data::render_mix(g.tracks, engine.data.target_rms)));
    const auto mix = data::render_mix(s.waveforms, engine.data.target_rms);
    real.push_back(eval::spectral_features(mix));
    noisy.push_back(eval::spectral_features(add_noise_0db(mix, derive_seed(~seed, i))));
  }
  FrechetReport r;
  r.count = held_out.size();
  r.generated = eval::frechet_proxy(gen, real);
  r.noisy = eval::frechet_proxy(real, noisy);
  return r;
}

}  // namespace stemforge::pipeline
