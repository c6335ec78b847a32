// Copyright 2026 The StemForge Authors
// SPDX-License-Identifier: Apache-2.0

#include "stemforge/gradcheck.hpp"

#include <algorithm>
#include <chrono>
#include <cmath>
#include <numeric>

#include "stemforge/error.hpp"

namespace stemforge::nn {

DenoiserConfig gradcheck_config() {
  DenoiserConfig c;
  c.tracks = 2;
  c.latent_channels = 2;
  c.frames = 8;
  c.hidden = 8;
  c.depth = 2;
  c.time_embed = 4;
  c.vocab = 8;
  c.prompt_embed = 4;
  c.cond_width = 8;
  return c;
}

namespace {

double inner(const TrackLatents& a, const TrackLatents& b) {
  double s = 0.0;
  for (std::size_t i = 0; i < a.size(); ++i) s += a.values()[i] * b.values()[i];
  return s;
}

}  // namespace

GradcheckReport gradient_check(const DenoiserConfig& config,
                               const GradcheckOptions& options) {
  require(options.step > 0.0 && options.tolerance > 0.0, "gradcheck step and tolerance must be > 0");
  const auto start = std::chrono::steady_clock::now();
  const UNet1d model(config);
  Rng rng(options.seed);

  ParameterSet params = model.init_params(rng);
  for (std::size_t i = 0; i < params.size(); ++i)
    for (double& v : params[i].values()) v += 0.3 * rng.normal();

  TrackLatents z(config.tracks, config.latent_channels, config.frames);
  rng.fill_normal(z.values());
  TrackLatents g(config.tracks, config.latent_channels, config.frames);
  rng.fill_normal(g.values());
  TimestepVector tvec;
  for (std::size_t k = 0; k < config.tracks; ++k)
    tvec.steps.push_back(static_cast<int>(rng.uniform_index(options.num_steps + 1)));
  PromptTokens prompt;
  prompt.prefix_task_token = static_cast<std::uint32_t>(rng.uniform_index(config.vocab));
  for (int i = 0; i < 3; ++i)
    prompt.content_tokens.push_back(static_cast<std::uint32_t>(rng.uniform_index(config.vocab)));

  const ParameterSet grads = model.backward(params, z, tvec, prompt, g);

  std::vector<std::pair<std::size_t, std::size_t>> coords;
  for (std::size_t i = 0; i < params.size(); ++i)
    for (std::size_t j = 0; j < params[i].size(); ++j) coords.emplace_back(i, j);
  if (options.max_params != 0 && options.max_params < coords.size()) {
    for (std::size_t i = 0; i < options.max_params; ++i)
      std::swap(coords[i], coords[i + rng.uniform_index(coords.size() - i)]);
    coords.resize(options.max_params);
  }

  GradcheckReport report;
  report.parameters = params.scalar_count();
  const double h = options.step;
  for (const auto& [i, j] : coords) {
    double& p = params[i].values()[j];
    const double saved = p;
    p = saved + h;
    const double up = inner(g, model.forward(params, z, tvec, prompt));
    p = saved - h;
    const double down = inner(g, model.forward(params, z, tvec, prompt));
    p = saved;
    const double numeric = (up - down) / (2.0 * h);
    const double analytic = grads[i].values()[j];
    const double denom =
        std::max({std::abs(analytic), std::abs(numeric), options.denominator_floor});
    const double rel = std::abs(analytic - numeric) / denom;
    ++report.checked;
    if (!(rel < options.tolerance)) ++report.failures;
    if (report.checked == 1 || rel > report.worst.rel_error || std::isnan(rel))
      report.worst = {params.name(i), j, analytic, numeric, rel};
  }
  report.seconds =
      std::chrono::duration<double>(std::chrono::steady_clock::now() - start).count();
  return report;
}

}  // namespace stemforge::nn
