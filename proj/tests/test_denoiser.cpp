// Copyright 2026 The StemForge Authors
// SPDX-License-Identifier: Apache-2.0

#include <cmath>
#include <memory>

#include "doctest.h"
#include "stemforge/denoiser.hpp"
#include "stemforge/error.hpp"
#include "stemforge/gradcheck.hpp"

using namespace stemforge;
using namespace stemforge::nn;

namespace {

DenoiserConfig audit_config() {
  DenoiserConfig c;
  c.tracks = 4;
  c.latent_channels = 8;
  c.frames = 64;
  c.hidden = 32;
  c.depth = 2;
  c.time_embed = 16;
  c.vocab = 64;
  c.prompt_embed = 16;
  c.cond_width = 64;
  return c;
}

TrackLatents random_latents(const DenoiserConfig& c, std::uint64_t seed) {
  TrackLatents z(c.tracks, c.latent_channels, c.frames);
  Rng rng(seed);
  rng.fill_normal(z.values());
  return z;
}

// Parameters with every tensor perturbed, so the output conv is non-zero.
ParameterSet perturbed_params(const UNet1d& model, std::uint64_t seed) {
  Rng rng(seed);
  ParameterSet p = model.init_params(rng);
  for (std::size_t i = 0; i < p.size(); ++i)
    for (double& v : p[i].values()) v += 0.2 * rng.normal();
  return p;
}

}  // namespace

TEST_CASE("parameter count matches the shape audit") {
  CHECK(UNet1d(audit_config()).empty_params().scalar_count() == 69092);
  auto c = audit_config();
  c.latent_channels = 32;
  CHECK(UNet1d(c).empty_params().scalar_count() == 87620);
  CHECK(UNet1d(gradcheck_config()).empty_params().scalar_count() == 3214);
  CHECK(UNet1d(gradcheck_config()).empty_params().scalar_count() < 5000);
}

TEST_CASE("config validation") {
  auto c = audit_config();
  c.frames = 62;
  CHECK_THROWS_AS(UNet1d{c}, Error);
  c = audit_config();
  c.time_embed = 15;
  CHECK_THROWS_AS(UNet1d{c}, Error);
  c = audit_config();
  c.hidden = 0;
  CHECK_THROWS_AS(UNet1d{c}, Error);
  c = audit_config();
  c.hidden = 4;  // fewer than 8 channels: one group per channel
  CHECK(c.groups() == 4);
  CHECK_NOTHROW(UNet1d{c});
}

TEST_CASE("init is deterministic and predicts zero") {
  const UNet1d model(audit_config());
  Rng a(42), b(42), c(43);
  const auto pa = model.init_params(a);
  CHECK(pa == model.init_params(b));
  CHECK_FALSE(pa == model.init_params(c));
  CHECK(pa.all_finite());
  for (double v : pa.at("out.weight").values()) CHECK(v == 0.0);
  for (double v : pa.at("down.0.film.weight").values()) CHECK(v == 0.0);
  double sq = 0.0;
  for (double v : pa.at("prompt.embedding").values()) sq += v * v;
  const double emb_std = std::sqrt(sq / static_cast<double>(pa.at("prompt.embedding").size()));
  CHECK(emb_std == doctest::Approx(0.02).epsilon(0.1));

  const auto z = random_latents(audit_config(), 1);
  const auto out = model.forward(pa, z, TimestepVector{{100, 0, 37, 100}}, PromptTokens{3, {20, 30}});
  CHECK(out.tracks() == 4);
  CHECK(out.channels() == 8);
  CHECK(out.frames() == 64);
  for (double v : out.values()) CHECK(v == 0.0);
}

TEST_CASE("forward is deterministic and shape preserving") {
  const UNet1d model(audit_config());
  const auto p = perturbed_params(model, 9);
  const auto z = random_latents(audit_config(), 2);
  const TimestepVector tvec{{50, 0, 50, 100}};
  const PromptTokens prompt{10, {16, 40}};
  const auto a = model.forward(p, z, tvec, prompt);
  const auto b = model.forward(p, z, tvec, prompt);
  CHECK(a == b);
  CHECK(a.same_shape(z));
  CHECK(a.all_finite());
  const auto other_prompt = model.forward(p, z, tvec, PromptTokens{11, {16, 40}});
  CHECK_FALSE(other_prompt == a);
}

TEST_CASE("forward rejects bad inputs") {
  const UNet1d model(audit_config());
  Rng rng(1);
  const auto p = model.init_params(rng);
  TrackLatents wrong(4, 8, 32);
  CHECK_THROWS_AS(model.forward(p, wrong, TimestepVector{{0, 0, 0, 0}}, PromptTokens{}), Error);
  const auto z = random_latents(audit_config(), 3);
  CHECK_THROWS_AS(model.forward(p, z, TimestepVector{{0, 0, 0}}, PromptTokens{}), Error);
  CHECK_THROWS_AS(model.forward(p, z, TimestepVector{{0, 0, 0, 0}}, PromptTokens{64, {}}), Error);
  CHECK_THROWS_AS(Denoiser(model, std::make_shared<const ParameterSet>(
                                      UNet1d(gradcheck_config()).empty_params())),
                  Error);
}

TEST_CASE("sinusoid matches an independent evaluation") {
  const auto s = sinusoid(10, 4);
  REQUIRE(s.size() == 4);
  const double expected[] = {-0.5440211108893698, 0.09983341664682815, -0.8390715290764524,
                             0.9950041652780258};
  for (int i = 0; i < 4; ++i) CHECK(std::abs(s[i] - expected[i]) <= 1e-12);
}

TEST_CASE("timestep embeddings") {
  auto c = audit_config();
  c.tracks = 2;
  const UNet1d model(c);
  Rng rng(5);
  auto p = model.init_params(rng);
  const std::size_t E = c.time_embed;

  SUBCASE("tied weights make equal timesteps symmetric") {
    p.at("time.1.weight") = p.at("time.0.weight");
    p.at("time.1.bias") = p.at("time.0.bias");
    const auto zero = model.embed_timesteps(p, TimestepVector{{0, 0}});
    for (std::size_t i = 0; i < E; ++i) CHECK(std::abs(zero[i] - zero[E + i]) <= 1e-12);
    const auto ab = model.embed_timesteps(p, TimestepVector{{30, 70}});
    const auto ba = model.embed_timesteps(p, TimestepVector{{70, 30}});
    for (std::size_t i = 0; i < E; ++i) {
      CHECK(std::abs(ab[i] - ba[E + i]) <= 1e-12);
      CHECK(std::abs(ab[E + i] - ba[i]) <= 1e-12);
    }
  }
  SUBCASE("order matters with distinct weights") {
    const auto a = model.embed_timesteps(p, TimestepVector{{100, 0}});
    const auto b = model.embed_timesteps(p, TimestepVector{{0, 100}});
    CHECK_FALSE(a == b);
    const auto pp = perturbed_params(model, 6);
    const auto z = random_latents(c, 7);
    CHECK_FALSE(model.forward(pp, z, TimestepVector{{100, 0}}, PromptTokens{}) ==
                model.forward(pp, z, TimestepVector{{0, 100}}, PromptTokens{}));
  }
}

TEST_CASE("full finite-difference gradient sweep") {
  GradcheckOptions opt;
  const auto report = gradient_check(gradcheck_config(), opt);
  CHECK(report.checked == 3214);
  INFO("worst " << report.worst.name << "[" << report.worst.offset << "] analytic "
                << report.worst.analytic << " numeric " << report.worst.numeric << " rel "
                << report.worst.rel_error);
  CHECK(report.failures == 0);
  CHECK(report.worst.rel_error < 1e-4);
}

TEST_CASE("finite differences with several channels per norm group") {
  auto c = gradcheck_config();
  c.hidden = 16;
  c.depth = 1;
  GradcheckOptions opt;
  opt.max_params = 600;
  opt.seed = 8;
  const auto report = gradient_check(c, opt);
  CHECK(report.checked == 600);
  INFO("worst " << report.worst.name << "[" << report.worst.offset << "] rel "
                << report.worst.rel_error);
  CHECK(report.failures == 0);
}

TEST_CASE("backward with zero output gradient is zero") {
  const UNet1d model(gradcheck_config());
  const auto p = perturbed_params(model, 10);
  const auto z = random_latents(gradcheck_config(), 11);
  TrackLatents zero(z.tracks(), z.channels(), z.frames());
  const auto g = model.backward(p, z, TimestepVector{{40, 0}}, PromptTokens{1, {5}}, zero);
  CHECK(g.same_layout(p));
  for (std::size_t i = 0; i < g.size(); ++i)
    for (double v : g[i].values()) CHECK(v == 0.0);
}

TEST_CASE("output parameters of a masked track receive exactly zero gradient") {
  const auto c = gradcheck_config();
  const UNet1d model(c);
  const auto p = perturbed_params(model, 12);
  const auto z = random_latents(c, 13);
  TrackLatents upstream = random_latents(c, 14);
  for (double& v : upstream.track(1)) v = 0.0;  // track 2 is not a target
  const auto g = model.backward(p, z, TimestepVector{{40, 100}}, PromptTokens{0, {}}, upstream);
  const std::size_t D = c.latent_channels;
  const std::size_t row = c.hidden * 3;
  const auto& ow = g.at("out.weight").values();
  const auto& ob = g.at("out.bias").values();
  for (std::size_t ch = D; ch < 2 * D; ++ch) {
    CHECK(ob[ch] == 0.0);
    for (std::size_t i = 0; i < row; ++i) CHECK(ow[ch * row + i] == 0.0);
  }
  bool target_rows_nonzero = false;
  for (std::size_t i = 0; i < D * row; ++i) target_rows_nonzero |= ow[i] != 0.0;
  CHECK(target_rows_nonzero);
}

TEST_CASE("Denoiser binds a parameter snapshot") {
  const UNet1d model(gradcheck_config());
  auto params = std::make_shared<const ParameterSet>(perturbed_params(model, 15));
  const Denoiser den(model, params);
  CHECK(den.tracks() == 2);
  CHECK(den.channels() == 2);
  CHECK(den.frames() == 8);
  const auto z = random_latents(gradcheck_config(), 16);
  const TimestepVector tvec{{3, 3}};
  CHECK(den.predict(z, tvec, PromptTokens{2, {}}) ==
        model.forward(*params, z, tvec, PromptTokens{2, {}}));
}
