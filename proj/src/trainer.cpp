// Copyright 2026 The StemForge Authors
// SPDX-License-Identifier: Apache-2.0

#include "stemforge/trainer.hpp"

#include <bit>
#include <cmath>
#include <limits>
#include <sstream>

#include "stemforge/checkpoint.hpp"
#include "stemforge/error.hpp"

namespace stemforge::train {

void CurriculumConfig::validate() const {
  require(tracks >= 1 && tracks <= 16, "track count must be in [1, 16]");
  require(total_epochs >= 1, "total_epochs must be >= 1");
  require(0.0 < boundary1 && boundary1 < boundary2 && boundary2 < 1.0,
          "phase boundaries must satisfy 0 < b1 < b2 < 1");
  require(p1 >= 0.0 && p1 <= 1.0, "p1 must be in [0, 1]");
  require(p2 >= 0.0 && p2 <= 1.0, "p2 must be in [0, 1]");
  require(bootstrap_start_fraction >= 0.0 && bootstrap_start_fraction <= 1.0,
          "bootstrap_start_fraction must be in [0, 1]");
  require(ema_decay >= 0.0 && ema_decay < 1.0, "ema_decay must be in [0, 1)");
}

TrainConfig TrainConfig::desk() { return TrainConfig{}; }

TrainConfig TrainConfig::paper() {
  TrainConfig c;
  c.lr_start = 3e-5;
  c.batch_size = 12;
  return c;
}

void TrainConfig::validate() const {
  require(std::isfinite(lr_start) && lr_start > 0.0, "lr_start must be > 0");
  require(batch_size >= 1, "batch_size must be >= 1");
  require(beta1 > 0.0 && beta1 < 1.0 && beta2 > 0.0 && beta2 < 1.0,
          "Adam betas must be in (0, 1)");
  require(weight_decay >= 0.0 && adam_eps > 0.0, "weight decay >= 0 and eps > 0 required");
  require(std::isfinite(grad_clip) && grad_clip > 0.0, "grad_clip must be > 0");
  require(epochs >= 1, "epochs must be >= 1");
  require(prompt_dropout >= 0.0 && prompt_dropout <= 1.0, "prompt_dropout must be in [0, 1]");
  require(std::isfinite(bootstrap_guidance) && bootstrap_guidance >= 0.0,
          "bootstrap guidance must be >= 0");
}

const char* to_string(TaskCategory c) {
  switch (c) {
    case TaskCategory::Single: return "single";
    case TaskCategory::Partial: return "partial";
    case TaskCategory::Joint: return "joint";
  }
  return "?";
}

TaskCategory category_of(TrackMask targets, std::size_t tracks) {
  const int k = std::popcount(targets);
  if (targets == full_mask(tracks)) return TaskCategory::Joint;
  return k == 1 ? TaskCategory::Single : TaskCategory::Partial;
}

CurriculumState task_probabilities(const CurriculumConfig& config, int epoch) {
  config.validate();
  require(epoch >= 0 && epoch < config.total_epochs,
          "epoch " + std::to_string(epoch) + " outside [0, total_epochs)");
  const std::size_t K = config.tracks;
  const std::size_t n = (std::size_t{1} << K) - 1;
  std::vector<double> single(n, 0.0), uniform(n, 1.0 / static_cast<double>(n));
  for (std::size_t k = 0; k < K; ++k) single[(std::size_t{1} << k) - 1] = 1.0 / static_cast<double>(K);

  const double frac = static_cast<double>(epoch) / static_cast<double>(config.total_epochs);
  CurriculumState s;
  s.epoch = epoch;
  if (frac < config.boundary1) {
    s.subset_probs = single;
  } else if (frac >= config.boundary2) {
    s.subset_probs = uniform;
  } else {
    const double w = (frac - config.boundary1) / (config.boundary2 - config.boundary1);
    s.subset_probs.resize(n);
    for (std::size_t i = 0; i < n; ++i) s.subset_probs[i] = (1.0 - w) * single[i] + w * uniform[i];
  }
  for (std::size_t i = 0; i < n; ++i)
    s.category_probs[static_cast<int>(category_of(static_cast<TrackMask>(i + 1), K))] +=
        s.subset_probs[i];
  return s;
}

TrackMask sample_task(const CurriculumState& state, Rng& rng) {
  const double u = rng.uniform();
  double cum = 0.0;
  std::size_t last = 0;
  for (std::size_t i = 0; i < state.subset_probs.size(); ++i) {
    const double p = state.subset_probs[i];
    if (p <= 0.0) continue;
    cum += p;
    last = i;
    if (u < cum) return static_cast<TrackMask>(i + 1);
  }
  return static_cast<TrackMask>(last + 1);  // u beyond a sum rounded below 1
}

TrackRole sample_nontarget_mode(std::size_t tracks, TrackMask targets, double p1, Rng& rng) {
  require(targets != 0 && (targets & ~full_mask(tracks)) == 0, "invalid target mask");
  require(targets != full_mask(tracks), "no non-target tracks when every track is a target");
  require(p1 >= 0.0 && p1 <= 1.0, "p1 must be in [0, 1]");
  return rng.bernoulli(p1) ? TrackRole::Conditional : TrackRole::Marginal;
}

namespace {

void check_loss_args(const TrackLatents& pred, const TrackLatents& truth, TrackMask targets) {
  require(pred.same_shape(truth), "masked_loss: shape mismatch");
  require(targets != 0, "masked_loss: empty target set");
  require((targets & ~full_mask(pred.tracks())) == 0, "masked_loss: target outside track range");
}

}  // namespace

double masked_loss(const TrackLatents& pred, const TrackLatents& truth, TrackMask targets) {
  check_loss_args(pred, truth, targets);
  double sum = 0.0;
  std::size_t count = 0;
  for (std::size_t k = 0; k < pred.tracks(); ++k) {
    if (!(targets >> k & 1u)) continue;
    const auto p = pred.track(k);
    const auto t = truth.track(k);
    for (std::size_t i = 0; i < p.size(); ++i) {
      const double d = p[i] - t[i];
      sum += d * d;
    }
    count += p.size();
  }
  return sum / static_cast<double>(count);
}

TrackLatents masked_loss_grad(const TrackLatents& pred, const TrackLatents& truth,
                              TrackMask targets, double scale) {
  check_loss_args(pred, truth, targets);
  const double n = static_cast<double>(std::popcount(targets) * pred.track_size());
  const double c = 2.0 * scale / n;
  TrackLatents g(pred.tracks(), pred.channels(), pred.frames());
  for (std::size_t k = 0; k < pred.tracks(); ++k) {
    if (!(targets >> k & 1u)) continue;
    const auto p = pred.track(k);
    const auto t = truth.track(k);
    auto out = g.track(k);
    for (std::size_t i = 0; i < p.size(); ++i) out[i] = c * (p[i] - t[i]);
  }
  return g;
}

double global_norm(const ParameterSet& grads) {
  double s = 0.0;
  for (std::size_t i = 0; i < grads.size(); ++i)
    for (double v : grads[i].values()) s += v * v;
  return std::sqrt(s);
}

double clip_gradients(ParameterSet& grads, double threshold) {
  require(std::isfinite(threshold) && threshold > 0.0, "clip threshold must be > 0");
  const double norm = global_norm(grads);
  if (norm > threshold) {
    const double scale = threshold / norm;
    for (std::size_t i = 0; i < grads.size(); ++i)
      for (double& v : grads[i].values()) v *= scale;
  }
  return norm;
}

AdamState AdamState::zeros_like(const ParameterSet& params) {
  return AdamState{params.zeros_like(), params.zeros_like(), 0};
}

void adamw_step(ParameterSet& params, const ParameterSet& grads, AdamState& state,
                const TrainConfig& config, double lr) {
  require(params.same_layout(grads) && params.same_layout(state.m) &&
              params.same_layout(state.v),
          "adamw_step: layout mismatch");
  if (!grads.all_finite()) fail(ErrorCode::Numerical, "adamw_step: non-finite gradient");
  ++state.step;
  const double b1 = config.beta1, b2 = config.beta2;
  const double c1 = 1.0 - std::pow(b1, static_cast<double>(state.step));
  const double c2 = 1.0 - std::pow(b2, static_cast<double>(state.step));
  const double decay = 1.0 - lr * config.weight_decay;
  for (std::size_t i = 0; i < params.size(); ++i) {
    auto p = params[i].values();
    const auto g = grads[i].values();
    auto m = state.m[i].values();
    auto v = state.v[i].values();
    for (std::size_t j = 0; j < p.size(); ++j) {
      p[j] *= decay;
      m[j] = b1 * m[j] + (1.0 - b1) * g[j];
      v[j] = b2 * v[j] + (1.0 - b2) * g[j] * g[j];
      p[j] -= lr * (m[j] / c1) / (std::sqrt(v[j] / c2) + config.adam_eps);
    }
  }
}

double learning_rate(const TrainConfig& config, long step, long total_steps) {
  require(total_steps >= 1 && step >= 0 && step < total_steps, "step outside the schedule");
  return config.lr_start *
         (1.0 - static_cast<double>(step) / static_cast<double>(total_steps));
}

void ema_update(ParameterSet& teacher, const ParameterSet& student, double decay) {
  require(teacher.same_layout(student), "ema_update: layout mismatch");
  require(decay >= 0.0 && decay < 1.0, "ema decay must be in [0, 1)");
  const double keep = 1.0 - decay;
  for (std::size_t i = 0; i < teacher.size(); ++i) {
    auto t = teacher[i].values();
    const auto s = student[i].values();
    for (std::size_t j = 0; j < t.size(); ++j) t[j] = decay * t[j] + keep * s[j];
  }
}

std::size_t bootstrap_batch(std::vector<BatchItem>& batch, const Teacher* teacher,
                            const CurriculumConfig& config, int epoch, Rng& rng) {
  if (static_cast<double>(epoch) <
      config.bootstrap_start_fraction * static_cast<double>(config.total_epochs))
    return 0;
  if (config.p2 <= 0.0) return 0;
  std::size_t changed = 0;
  for (auto& item : batch) {
    const auto cond = item.task.conditional_tracks();
    if (cond.empty()) continue;
    if (!rng.bernoulli(config.p2)) continue;
    if (teacher == nullptr || teacher->model == nullptr || !teacher->params ||
        teacher->schedule == nullptr || teacher->vocab == nullptr)
      fail(ErrorCode::InvalidInput, "bootstrapping needs a teacher snapshot");
    TrackMask replace = 0;
    while (replace == 0)
      for (std::size_t k : cond)
        if (rng.bernoulli(0.5)) replace |= TrackMask{1} << k;

    const std::size_t K = item.task.tracks();
    std::vector<TrackRole> roles(K, TrackRole::Conditional);
    diffusion::LockedLatents locked;
    for (std::size_t k = 0; k < K; ++k) {
      if (replace >> k & 1u) {
        roles[k] = TrackRole::Target;
      } else {
        const auto src = item.clean.track(k);
        locked[k] = std::vector<double>(src.begin(), src.end());
      }
    }
    const TaskSpec teacher_task(std::move(roles));
    PromptTokens prompt{teacher->vocab->task_token(replace), item.content.content_tokens};
    diffusion::SamplerConfig cfg;
    cfg.guidance_scale = teacher->guidance_scale;
    cfg.seed = rng.next_u64();
    const nn::Denoiser den(*teacher->model, teacher->params);
    const auto generated =
        diffusion::sample(den, teacher_task, locked, prompt, cfg, *teacher->schedule);
    for (std::size_t k : cond)
      if (replace >> k & 1u) std::ranges::copy(generated.track(k), item.clean.track(k).begin());
    item.bootstrapped = replace;
    ++changed;
  }
  return changed;
}

std::string to_record(const EpochMetrics& m) {
  std::ostringstream out;
  out.precision(8);
  out << "epoch=" << m.epoch;
  for (int c = 0; c < 3; ++c)
    out << " loss_" << to_string(static_cast<TaskCategory>(c)) << "=" << m.category_loss[c];
  out << " loss_mean=" << m.mean_loss << " lr=" << m.lr << " wall_s=" << m.seconds
      << " steps=" << m.steps << " bootstrapped=" << m.bootstrapped;
  return out.str();
}

Trainer::Trainer(nn::UNet1d model, ParameterSet init, std::vector<TrainingExample> data,
                 Vocabulary vocab, CurriculumConfig curriculum, TrainConfig config,
                 diffusion::NoiseSchedule schedule)
    : model_(std::move(model)),
      params_(std::move(init)),
      ema_(params_),
      adam_(AdamState::zeros_like(params_)),
      data_(std::move(data)),
      vocab_(std::move(vocab)),
      curriculum_(curriculum),
      config_(config),
      schedule_(std::move(schedule)),
      rng_(config.seed) {
  curriculum_.validate();
  config_.validate();
  require(!data_.empty(), "training needs a non-empty dataset");
  require(curriculum_.total_epochs == config_.epochs,
          "curriculum total_epochs must equal the training epoch count");
  const auto& c = model_.config();
  require(curriculum_.tracks == c.tracks && vocab_.tracks() == c.tracks,
          "track counts of model, curriculum and vocabulary differ");
  require(vocab_.size() <= c.vocab, "prompt vocabulary larger than the model's embedding table");
  require(params_.same_layout(model_.empty_params()), "initial parameters do not fit the model");
  for (const auto& ex : data_)
    require(ex.latents.tracks() == c.tracks && ex.latents.channels() == c.latent_channels &&
                ex.latents.frames() == c.frames,
            "training example shape does not match the model");
}

long Trainer::total_steps() const noexcept {
  const auto per_epoch =
      static_cast<long>((data_.size() + config_.batch_size - 1) / config_.batch_size);
  return per_epoch * config_.epochs;
}

EpochMetrics Trainer::run_epoch() {
  require(!done(), "training already finished");
  const auto start = std::chrono::steady_clock::now();
  const std::size_t K = model_.config().tracks;
  const int T = schedule_.num_steps();
  const CurriculumState state = task_probabilities(curriculum_, epoch_);

  EpochMetrics m;
  m.epoch = epoch_ + 1;
  m.task_counts.assign(state.subset_probs.size(), 0);
  std::array<double, 3> loss_sum{};

  std::vector<std::size_t> order(data_.size());
  for (std::size_t i = 0; i < order.size(); ++i) order[i] = i;
  for (std::size_t i = order.size(); i > 1; --i) std::swap(order[i - 1], order[rng_.uniform_index(i)]);

  const long total = total_steps();
  double loss_total = 0.0;
  std::size_t examples = 0;
  for (std::size_t b0 = 0; b0 < order.size(); b0 += config_.batch_size) {
    const std::size_t b1 = std::min(order.size(), b0 + config_.batch_size);
    const double lr = learning_rate(config_, step_, total);

    std::vector<BatchItem> batch;
    for (std::size_t i = b0; i < b1; ++i) {
      const auto& ex = data_[order[i]];
      const TrackMask mask = sample_task(state, rng_);
      TrackRole mode = TrackRole::Conditional;
      if (mask != full_mask(K)) {
        mode = sample_nontarget_mode(K, mask, curriculum_.p1, rng_);
        ++(mode == TrackRole::Conditional ? m.conditional_modes : m.marginal_modes);
      }
      ++m.task_counts[mask - 1];
      batch.push_back({ex.latents, ex.content, TaskSpec::from_mask(K, mask, mode), 0});
    }
    std::optional<Teacher> teacher;
    if (curriculum_.p2 > 0.0 &&
        static_cast<double>(epoch_) >=
            curriculum_.bootstrap_start_fraction * static_cast<double>(curriculum_.total_epochs))
      teacher = Teacher{&model_, std::make_shared<const ParameterSet>(ema_), &schedule_, &vocab_,
                        config_.bootstrap_guidance};
    m.bootstrapped += bootstrap_batch(batch, teacher ? &*teacher : nullptr, curriculum_, epoch_, rng_);

    ParameterSet grads = params_.zeros_like();
    const double scale = 1.0 / static_cast<double>(batch.size());
    double batch_loss = 0.0;
    for (const auto& item : batch) {
      const TrackMask mask = item.task.target_mask();
      PromptTokens prompt{vocab_.task_token(mask), item.content.content_tokens};
      if (config_.prompt_dropout > 0.0 && rng_.bernoulli(config_.prompt_dropout))
        prompt.content_tokens.clear();
      const int t = 1 + static_cast<int>(rng_.uniform_index(static_cast<std::size_t>(T)));
      TrackLatents noise(K, item.clean.channels(), item.clean.frames());
      rng_.fill_normal(noise.values());
      const auto tvec = diffusion::make_timesteps(item.task, t, T);
      const auto input = diffusion::assemble_input(item.clean, tvec, noise, schedule_);
      nn::UNet1d::Trace trace;
      const auto pred = model_.forward(params_, input, tvec, prompt, trace);
      const double loss = masked_loss(pred, noise, mask);
      if (!std::isfinite(loss)) {
        if (divergence_dump) {
          nn::Checkpoint dump;
          dump.model = model_.config();
          dump.schedule = {schedule_.num_steps(), schedule_.beta_start(), schedule_.beta_end()};
          dump.params = params_;
          nn::save_checkpoint(dump, *divergence_dump);
        }
        fail(ErrorCode::Numerical, "training diverged at epoch " + std::to_string(epoch_ + 1) +
                                       " step " + std::to_string(step_) + ": loss is not finite");
      }
      model_.backward(params_, trace, masked_loss_grad(pred, noise, mask, scale), grads);
      const int cat = static_cast<int>(category_of(mask, K));
      loss_sum[cat] += loss;
      ++m.category_count[cat];
      batch_loss += loss;
    }
    if (!grads.all_finite())
      fail(ErrorCode::Numerical, "non-finite gradient at step " + std::to_string(step_));
    clip_gradients(grads, config_.grad_clip);
    adamw_step(params_, grads, adam_, config_, lr);
    ema_update(ema_, params_, curriculum_.ema_decay);
    ++step_;
    ++m.steps;
    m.lr = lr;
    loss_total += batch_loss;
    examples += batch.size();
  }
  for (int c = 0; c < 3; ++c)
    m.category_loss[c] = m.category_count[c] ? loss_sum[c] / static_cast<double>(m.category_count[c])
                                             : std::numeric_limits<double>::quiet_NaN();
  m.mean_loss = loss_total / static_cast<double>(examples);
  ++epoch_;
  m.seconds = std::chrono::duration<double>(std::chrono::steady_clock::now() - start).count();
  return m;
}

}  // namespace stemforge::train
