// Copyright 2026 The StemForge Authors
// SPDX-License-Identifier: Apache-2.0

#include "stemforge/diffusion.hpp"

#include <algorithm>
#include <cmath>
#include <string>

#include "stemforge/error.hpp"

namespace stemforge::diffusion {

double NoiseSchedule::beta(int t) const {
  require(t >= 1 && t <= num_steps(), "timestep out of range");
  return betas_[static_cast<std::size_t>(t - 1)];
}

double NoiseSchedule::alpha(int t) const {
  require(t >= 1 && t <= num_steps(), "timestep out of range");
  return alphas_[static_cast<std::size_t>(t - 1)];
}

double NoiseSchedule::alpha_bar(int t) const {
  require(t >= 0 && t <= num_steps(), "timestep out of range");
  if (t == 0) return 1.0;
  return alpha_bars_[static_cast<std::size_t>(t - 1)];
}

NoiseSchedule build_schedule(ScheduleKind kind, int num_steps, double beta_start,
                             double beta_end) {
  require(kind == ScheduleKind::Linear, "unsupported schedule kind");
  require(num_steps >= 1, "schedule needs at least one step");
  require(std::isfinite(beta_start) && std::isfinite(beta_end),
          "schedule bounds must be finite");
  require(beta_start > 0.0 && beta_start <= beta_end && beta_end < 1.0,
          "schedule bounds must satisfy 0 < beta_start <= beta_end < 1");

  NoiseSchedule s;
  const auto n = static_cast<std::size_t>(num_steps);
  s.betas_.resize(n);
  s.alphas_.resize(n);
  s.alpha_bars_.resize(n);
  double running = 1.0;
  for (std::size_t i = 0; i < n; ++i) {
    const double frac = n == 1 ? 0.0 : static_cast<double>(i) / static_cast<double>(n - 1);
    s.betas_[i] = beta_start + (beta_end - beta_start) * frac;
    s.alphas_[i] = 1.0 - s.betas_[i];
    running *= s.alphas_[i];
    s.alpha_bars_[i] = running;
  }
  return s;
}

NoiseSchedule default_schedule() {
  return build_schedule(ScheduleKind::Linear, 100, 1e-3, 0.2);
}

TaskSpec::TaskSpec(std::vector<TrackRole> roles) : roles_(std::move(roles)) {
  require(!roles_.empty(), "task needs at least one track");
  require(target_count() >= 1, "task needs at least one target track");
}

TaskSpec TaskSpec::from_mask(std::size_t tracks, TrackMask targets,
                             TrackRole nontarget_mode) {
  require(nontarget_mode != TrackRole::Target, "non-target mode cannot be Target");
  require(targets != 0 && targets <= full_mask(tracks),
          "target mask must name a nonempty subset of tracks");
  std::vector<TrackRole> roles(tracks, nontarget_mode);
  for (std::size_t k = 0; k < tracks; ++k)
    if (targets & (TrackMask{1} << k)) roles[k] = TrackRole::Target;
  return TaskSpec(std::move(roles));
}

std::size_t TaskSpec::target_count() const noexcept {
  return static_cast<std::size_t>(
      std::count(roles_.begin(), roles_.end(), TrackRole::Target));
}

TrackMask TaskSpec::target_mask() const noexcept {
  TrackMask mask = 0;
  for (std::size_t k = 0; k < roles_.size(); ++k)
    if (roles_[k] == TrackRole::Target) mask |= TrackMask{1} << k;
  return mask;
}

std::vector<std::size_t> TaskSpec::targets() const {
  std::vector<std::size_t> out;
  for (std::size_t k = 0; k < roles_.size(); ++k)
    if (roles_[k] == TrackRole::Target) out.push_back(k);
  return out;
}

std::vector<std::size_t> TaskSpec::conditional_tracks() const {
  std::vector<std::size_t> out;
  for (std::size_t k = 0; k < roles_.size(); ++k)
    if (roles_[k] == TrackRole::Conditional) out.push_back(k);
  return out;
}

TimestepVector make_timesteps(const TaskSpec& task, int t, int num_steps) {
  require(t >= 0 && t <= num_steps, "timestep out of range");
  TimestepVector tvec;
  tvec.steps.reserve(task.tracks());
  for (TrackRole role : task.roles()) {
    switch (role) {
      case TrackRole::Target: tvec.steps.push_back(t); break;
      case TrackRole::Conditional: tvec.steps.push_back(0); break;
      case TrackRole::Marginal: tvec.steps.push_back(num_steps); break;
    }
  }
  return tvec;
}

void validate_timesteps(const TimestepVector& tvec, int num_steps) {
  require(!tvec.steps.empty(), "timestep vector is empty");
  for (int t : tvec.steps)
    require(t >= 0 && t <= num_steps, "timestep " + std::to_string(t) +
                                          " outside [0, " +
                                          std::to_string(num_steps) + "]");
}

void validate_timesteps(const TimestepVector& tvec, const TaskSpec& task,
                        int num_steps) {
  validate_timesteps(tvec, num_steps);
  require(tvec.steps.size() == task.tracks(), "timestep vector length != track count");
  std::optional<int> shared;
  for (std::size_t k = 0; k < task.tracks(); ++k) {
    const int t = tvec.steps[k];
    switch (task.role(k)) {
      case TrackRole::Target:
        require(!shared || *shared == t, "target tracks must share one timestep");
        shared = t;
        break;
      case TrackRole::Conditional:
        require(t == 0, "conditional track must sit at timestep 0");
        break;
      case TrackRole::Marginal:
        require(t == num_steps, "marginal track must sit at timestep T");
        break;
    }
  }
}

void forward_diffuse(std::span<const double> z0, int t,
                     std::span<const double> eps, const NoiseSchedule& schedule,
                     std::span<double> out) {
  require(t >= 1 && t <= schedule.num_steps(), "timestep out of range");
  require(z0.size() == eps.size() && out.size() == z0.size(),
          "forward_diffuse shape mismatch");
  const double abar = schedule.alpha_bar(t);
  const double signal = std::sqrt(abar);
  const double noise = std::sqrt(1.0 - abar);
  for (std::size_t i = 0; i < z0.size(); ++i) out[i] = signal * z0[i] + noise * eps[i];
}

std::vector<double> forward_diffuse(std::span<const double> z0, int t,
                                    std::span<const double> eps,
                                    const NoiseSchedule& schedule) {
  std::vector<double> out(z0.size());
  forward_diffuse(z0, t, eps, schedule, out);
  return out;
}

void posterior_mean(std::span<const double> z_t, std::span<const double> eps_hat,
                    int t, const NoiseSchedule& schedule, std::span<double> out) {
  require(t >= 1 && t <= schedule.num_steps(), "timestep out of range");
  require(z_t.size() == eps_hat.size() && out.size() == z_t.size(),
          "posterior_mean shape mismatch");
  const double inv_sqrt_alpha = 1.0 / std::sqrt(schedule.alpha(t));
  const double coef = schedule.beta(t) / std::sqrt(1.0 - schedule.alpha_bar(t));
  for (std::size_t i = 0; i < z_t.size(); ++i) {
    if (!std::isfinite(z_t[i]) || !std::isfinite(eps_hat[i]))
      fail(ErrorCode::Numerical, "posterior_mean received a non-finite input");
    out[i] = inv_sqrt_alpha * (z_t[i] - coef * eps_hat[i]);
  }
}

std::vector<double> posterior_mean(std::span<const double> z_t,
                                   std::span<const double> eps_hat, int t,
                                   const NoiseSchedule& schedule) {
  std::vector<double> out(z_t.size());
  posterior_mean(z_t, eps_hat, t, schedule, out);
  return out;
}

TrackLatents assemble_input(const TrackLatents& clean, const TimestepVector& tvec,
                            const TrackLatents& noise,
                            const NoiseSchedule& schedule) {
  require(clean.same_shape(noise), "assemble_input: clean/noise shape mismatch");
  require(tvec.steps.size() == clean.tracks(),
          "assemble_input: timestep vector length != track count");
  const int T = schedule.num_steps();
  validate_timesteps(tvec, T);
  TrackLatents out(clean.tracks(), clean.channels(), clean.frames());
  for (std::size_t k = 0; k < clean.tracks(); ++k) {
    const int t = tvec.steps[k];
    auto dst = out.track(k);
    if (t == 0) {
      std::ranges::copy(clean.track(k), dst.begin());
    } else if (t == T) {
      std::ranges::copy(noise.track(k), dst.begin());
    } else {
      forward_diffuse(clean.track(k), t, noise.track(k), schedule, dst);
    }
  }
  return out;
}

void cfg_combine(std::span<const double> eps_marginal,
                 std::span<const double> eps_conditional, double lambda,
                 std::span<double> out) {
  require(eps_marginal.size() == eps_conditional.size() &&
              out.size() == eps_marginal.size(),
          "cfg_combine shape mismatch");
  const double keep = 1.0 - lambda;
  for (std::size_t i = 0; i < out.size(); ++i)
    out[i] = keep * eps_marginal[i] + lambda * eps_conditional[i];
}

std::vector<double> cfg_combine(std::span<const double> eps_marginal,
                                std::span<const double> eps_conditional,
                                double lambda) {
  std::vector<double> out(eps_marginal.size());
  cfg_combine(eps_marginal, eps_conditional, lambda, out);
  return out;
}

double reverse_variance(const NoiseSchedule& schedule, int t,
                        VarianceChoice choice) {
  const double beta = schedule.beta(t);
  if (choice == VarianceChoice::BetaT) return beta;
  return (1.0 - schedule.alpha_bar(t - 1)) / (1.0 - schedule.alpha_bar(t)) * beta;
}

void SamplerConfig::validate() const {
  require(std::isfinite(guidance_scale) && guidance_scale >= 0.0,
          "guidance scale must be finite and >= 0");
  if (text_guidance_scale)
    require(std::isfinite(*text_guidance_scale) && *text_guidance_scale >= 0.0,
            "text guidance scale must be finite and >= 0");
}

namespace {

void check_predictor_shape(const TrackLatents& eps, const TrackLatents& like) {
  if (!eps.same_shape(like))
    fail(ErrorCode::InvalidInput, "denoiser returned a block of the wrong shape");
}

}  // namespace

TrackLatents sample(const NoisePredictor& denoiser, const TaskSpec& task,
                    const LockedLatents& locked, const PromptTokens& prompt,
                    const SamplerConfig& cfg, const NoiseSchedule& schedule,
                    Rng& rng) {
  cfg.validate();
  const std::size_t K = denoiser.tracks();
  const std::size_t D = denoiser.channels();
  const std::size_t frames = denoiser.frames();
  require(task.tracks() == K, "task track count does not match the denoiser");

  for (std::size_t k : task.conditional_tracks()) {
    const auto it = locked.find(k);
    require(it != locked.end(),
            "missing locked latent for conditional track " + std::to_string(k + 1));
    require(it->second.size() == D * frames,
            "locked latent for track " + std::to_string(k + 1) + " has wrong size");
  }
  for (const auto& [k, unused] : locked)
    require(k < K && task.role(k) == TrackRole::Conditional,
            "locked latent given for a track that is not conditional");

  const int T = schedule.num_steps();
  const auto targets = task.targets();
  const bool guided = targets.size() < K;

  TrackLatents x(K, D, frames);
  for (std::size_t k : targets) rng.fill_normal(x.track(k));
  TrackLatents nontarget_noise(K, D, frames);
  for (std::size_t k = 0; k < K; ++k)
    if (!task.is_target(k)) rng.fill_normal(nontarget_noise.track(k));
  for (std::size_t k = 0; k < K; ++k) {
    if (task.role(k) == TrackRole::Conditional)
      std::ranges::copy(locked.at(k), x.track(k).begin());
    else if (task.role(k) == TrackRole::Marginal)
      std::ranges::copy(nontarget_noise.track(k), x.track(k).begin());
  }

  TaskSpec marginal_task = task;
  if (guided) {
    std::vector<TrackRole> roles = task.roles();
    for (auto& r : roles)
      if (r == TrackRole::Conditional) r = TrackRole::Marginal;
    marginal_task = TaskSpec(std::move(roles));
  }

  std::vector<double> eps_mix(D * frames);
  std::vector<double> mean(D * frames);
  std::vector<double> z(D * frames);

  for (int t = T; t >= 1; --t) {
    if (cfg.marginal_noise_policy == MarginalNoisePolicy::ResamplePerStep && t < T)
      for (std::size_t k = 0; k < K; ++k)
        if (!task.is_target(k)) rng.fill_normal(nontarget_noise.track(k));

    TrackLatents eps;
    TrackLatents eps_marginal;
    if (guided) {
      TrackLatents z_cond = x;
      TrackLatents z_marg = x;
      for (std::size_t k = 0; k < K; ++k) {
        if (task.role(k) == TrackRole::Marginal)
          std::ranges::copy(nontarget_noise.track(k), z_cond.track(k).begin());
        if (!task.is_target(k))
          std::ranges::copy(nontarget_noise.track(k), z_marg.track(k).begin());
      }
      eps = denoiser.predict(z_cond, make_timesteps(task, t, T), prompt);
      check_predictor_shape(eps, x);
      eps_marginal = denoiser.predict(z_marg, make_timesteps(marginal_task, t, T), prompt);
      check_predictor_shape(eps_marginal, x);
    } else {
      eps = denoiser.predict(x, make_timesteps(task, t, T), prompt);
      check_predictor_shape(eps, x);
      if (cfg.text_guidance_scale) {
        eps_marginal = denoiser.predict(x, make_timesteps(task, t, T), cfg.null_prompt);
        check_predictor_shape(eps_marginal, x);
      }
    }

    const double lambda = guided ? cfg.guidance_scale : cfg.text_guidance_scale.value_or(1.0);
    const double sigma = std::sqrt(reverse_variance(schedule, t, cfg.variance_choice));
    for (std::size_t k : targets) {
      std::span<const double> eps_k = eps.track(k);
      if (eps_marginal.size() != 0) {
        cfg_combine(eps_marginal.track(k), eps.track(k), lambda, eps_mix);
        eps_k = eps_mix;
      }
      posterior_mean(x.track(k), eps_k, t, schedule, mean);
      rng.fill_normal(z);
      auto xk = x.track(k);
      for (std::size_t i = 0; i < xk.size(); ++i) xk[i] = mean[i] + sigma * z[i];
    }
  }
  return x;
}

TrackLatents sample(const NoisePredictor& denoiser, const TaskSpec& task,
                    const LockedLatents& locked, const PromptTokens& prompt,
                    const SamplerConfig& cfg, const NoiseSchedule& schedule) {
  Rng rng(cfg.seed);
  return sample(denoiser, task, locked, prompt, cfg, schedule, rng);
}

}  // namespace stemforge::diffusion
