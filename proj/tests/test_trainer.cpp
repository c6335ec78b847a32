// Copyright 2026 The StemForge Authors
// SPDX-License-Identifier: Apache-2.0

#include <bit>
#include <cmath>
#include <filesystem>

#include "doctest.h"
#include "stemforge/binio.hpp"
#include "stemforge/checkpoint.hpp"
#include "stemforge/error.hpp"
#include "stemforge/eval.hpp"
#include "stemforge/trainer.hpp"

using namespace stemforge;
using namespace stemforge::train;

namespace {

nn::DenoiserConfig tiny_config(std::size_t tracks = 4) {
  nn::DenoiserConfig c;
  c.tracks = tracks;
  c.latent_channels = 2;
  c.frames = 8;
  c.hidden = 8;
  c.depth = 1;
  c.time_embed = 4;
  c.vocab = 40;
  c.prompt_embed = 4;
  c.cond_width = 8;
  return c;
}

Vocabulary tiny_vocab() { return Vocabulary(4, 8, 5, 8); }

std::vector<TrainingExample> random_examples(const nn::DenoiserConfig& c, std::size_t n,
                                             std::uint64_t seed) {
  Rng rng(seed);
  const auto vocab = tiny_vocab();
  std::vector<TrainingExample> out;
  for (std::size_t i = 0; i < n; ++i) {
    TrainingExample ex{TrackLatents(c.tracks, c.latent_channels, c.frames), {}};
    rng.fill_normal(ex.latents.values());
    const auto p = vocab.prompt(1, rng.uniform_index(8), rng.uniform_index(5), rng.uniform_index(8));
    ex.content.content_tokens = p.content_tokens;
    out.push_back(std::move(ex));
  }
  return out;
}

nn::ParameterSet perturbed(const nn::UNet1d& model, std::uint64_t seed, double sd = 0.3) {
  Rng rng(seed);
  auto p = model.init_params(rng);
  for (std::size_t i = 0; i < p.size(); ++i)
    for (double& v : p[i].values()) v += sd * rng.normal();
  return p;
}

ParameterSet scalar_set(double v) {
  ParameterSet s;
  s[s.add("w", {1})].fill(v);
  return s;
}

CurriculumConfig curriculum(int epochs) {
  CurriculumConfig c;
  c.total_epochs = epochs;
  return c;
}

}  // namespace

TEST_CASE("curriculum phase probabilities") {
  const auto cfg = curriculum(100);
  SUBCASE("phase 1 singletons at 1/K") {
    for (int e : {0, 10, 29}) {
      const auto s = task_probabilities(cfg, e);
      for (TrackMask m = 1; m < 16; ++m)
        CHECK(s.prob(m) == doctest::Approx(std::popcount(m) == 1 ? 0.25 : 0.0).epsilon(1e-15));
      CHECK(s.category_probs[0] == doctest::Approx(1.0));
    }
  }
  SUBCASE("phase 3 uniform over 15 subsets") {
    for (int e : {70, 85, 99}) {
      const auto s = task_probabilities(cfg, e);
      for (TrackMask m = 1; m < 16; ++m) CHECK(std::abs(s.prob(m) - 1.0 / 15.0) < 1e-15);
      CHECK(std::abs(s.category_probs[0] - 4.0 / 15.0) < 1e-12);
      CHECK(std::abs(s.category_probs[1] - 10.0 / 15.0) < 1e-12);
      CHECK(std::abs(s.category_probs[2] - 1.0 / 15.0) < 1e-12);
    }
  }
  SUBCASE("phase 2 midpoint is the mean of both ends") {
    const auto s = task_probabilities(cfg, 50);
    for (TrackMask m = 1; m < 16; ++m) {
      const double p1 = std::popcount(m) == 1 ? 0.25 : 0.0;
      CHECK(std::abs(s.prob(m) - 0.5 * (p1 + 1.0 / 15.0)) < 1e-12);
    }
  }
  SUBCASE("every epoch sums to one") {
    for (std::size_t K : {1u, 2u, 3u, 4u, 5u}) {
      auto c = cfg;
      c.tracks = K;
      for (int e = 0; e < c.total_epochs; ++e) {
        const auto s = task_probabilities(c, e);
        double total = 0.0, cat = 0.0;
        for (double p : s.subset_probs) {
          CHECK(p >= 0.0);
          total += p;
        }
        for (double p : s.category_probs) cat += p;
        CHECK(std::abs(total - 1.0) < 1e-9);
        CHECK(std::abs(cat - 1.0) < 1e-9);
      }
    }
  }
  SUBCASE("singleton mass decays monotonically") {
    double prev = 2.0;
    for (int e = 0; e < cfg.total_epochs; ++e) {
      const double p = task_probabilities(cfg, e).prob(1);
      CHECK(p <= prev);
      prev = p;
    }
  }
  SUBCASE("errors") {
    CHECK_THROWS_AS(task_probabilities(cfg, -1), Error);
    CHECK_THROWS_AS(task_probabilities(cfg, 100), Error);
    auto bad = cfg;
    bad.boundary1 = 0.8;
    CHECK_THROWS_AS(task_probabilities(bad, 0), Error);
    bad = cfg;
    bad.p1 = 1.5;
    CHECK_THROWS_AS(bad.validate(), Error);
    bad = cfg;
    bad.p2 = -0.1;
    CHECK_THROWS_AS(bad.validate(), Error);
  }
}

TEST_CASE("task sampler") {
  const auto cfg = curriculum(100);
  SUBCASE("phase 1 draws only singletons") {
    Rng rng(3);
    const auto s = task_probabilities(cfg, 0);
    for (int i = 0; i < 10000; ++i) CHECK(std::popcount(sample_task(s, rng)) == 1);
  }
  SUBCASE("phase 3 passes the 99% chi-square test") {
    Rng rng(11);
    const auto s = task_probabilities(cfg, 80);
    std::vector<std::size_t> counts(15, 0);
    for (int i = 0; i < 100000; ++i) ++counts[sample_task(s, rng) - 1];
    const auto r = eval::chi_square_audit(counts, s.subset_probs);
    CHECK(r.dof == 14);
    CHECK(r.critical == doctest::Approx(29.141237740672796).epsilon(1e-9));
    CHECK(r.pass);
  }
  SUBCASE("degenerate distribution") {
    CurriculumState s;
    s.subset_probs.assign(15, 0.0);
    s.subset_probs[6] = 1.0;
    Rng rng(5);
    for (int i = 0; i < 1000; ++i) CHECK(sample_task(s, rng) == 7);
  }
  SUBCASE("same seed, same draws") {
    const auto s = task_probabilities(cfg, 50);
    Rng a(9), b(9);
    for (int i = 0; i < 1000; ++i) CHECK(sample_task(s, a) == sample_task(s, b));
  }
}

TEST_CASE("non-target mode sampler") {
  SUBCASE("p1 = 0.8 inside the 3 sigma band") {
    Rng rng(21);
    std::size_t cond = 0;
    const std::size_t n = 100000;
    for (std::size_t i = 0; i < n; ++i)
      cond += sample_nontarget_mode(4, 0b0010, 0.8, rng) == TrackRole::Conditional;
    const auto band = eval::binomial_band(cond, n, 0.8);
    CHECK(band.lower == doctest::Approx(0.796205266807798).epsilon(1e-12));
    CHECK(band.upper == doctest::Approx(0.8037947331922021).epsilon(1e-12));
    CHECK(band.pass);
  }
  SUBCASE("p1 extremes") {
    Rng rng(1);
    for (int i = 0; i < 1000; ++i) {
      CHECK(sample_nontarget_mode(4, 1, 1.0, rng) == TrackRole::Conditional);
      CHECK(sample_nontarget_mode(4, 1, 0.0, rng) == TrackRole::Marginal);
    }
  }
  SUBCASE("full target set rejected") {
    Rng rng(1);
    CHECK_THROWS_AS(sample_nontarget_mode(4, 0b1111, 0.8, rng), Error);
    CHECK_THROWS_AS(sample_nontarget_mode(4, 0, 0.8, rng), Error);
  }
}

TEST_CASE("masked loss") {
  TrackLatents truth(2, 3, 4), pred(2, 3, 4);
  Rng rng(4);
  rng.fill_normal(truth.values());
  pred = truth;
  CHECK(masked_loss(pred, truth, 0b01) == 0.0);

  SUBCASE("hand example") {
    for (double& v : pred.track(0)) v += 0.5;
    CHECK(masked_loss(pred, truth, 0b01) == doctest::Approx(0.25).epsilon(1e-15));
    CHECK(masked_loss(pred, truth, 0b10) == 0.0);
    CHECK(masked_loss(pred, truth, 0b11) == doctest::Approx(0.125).epsilon(1e-15));
  }
  SUBCASE("non-target perturbation is invisible bit for bit") {
    rng.fill_normal(pred.values());
    const double base = masked_loss(pred, truth, 0b01);
    const auto g0 = masked_loss_grad(pred, truth, 0b01, 0.25);
    auto other = pred;
    for (double& v : other.track(1)) v += 1e3 * rng.normal();
    CHECK(masked_loss(other, truth, 0b01) == base);
    const auto g1 = masked_loss_grad(other, truth, 0b01, 0.25);
    CHECK(g0 == g1);
    for (double v : g1.track(1)) CHECK(v == 0.0);
  }
  SUBCASE("gradient matches finite differences") {
    rng.fill_normal(pred.values());
    const auto g = masked_loss_grad(pred, truth, 0b10);
    for (std::size_t i = 0; i < pred.size(); ++i) {
      auto a = pred, b = pred;
      a.values()[i] += 1e-6;
      b.values()[i] -= 1e-6;
      const double num = (masked_loss(a, truth, 0b10) - masked_loss(b, truth, 0b10)) / 2e-6;
      CHECK(g.values()[i] == doctest::Approx(num).epsilon(1e-6));
    }
  }
  SUBCASE("errors") {
    CHECK_THROWS_AS(masked_loss(pred, truth, 0), Error);
    CHECK_THROWS_AS(masked_loss(pred, truth, 0b100), Error);
    CHECK_THROWS_AS(masked_loss(TrackLatents(2, 3, 5), truth, 1), Error);
  }
}

TEST_CASE("parameter gradients ignore non-target prediction channels") {
  const auto c = tiny_config();
  const nn::UNet1d model(c);
  const auto params = perturbed(model, 8);
  TrackLatents z(4, 2, 8), truth(4, 2, 8);
  Rng rng(10);
  rng.fill_normal(z.values());
  rng.fill_normal(truth.values());
  const auto task = TaskSpec::from_mask(4, 0b0101, TrackRole::Conditional);
  const auto tvec = diffusion::make_timesteps(task, 40, 100);
  const PromptTokens prompt{tiny_vocab().task_token(0b0101), {20, 30}};

  nn::UNet1d::Trace trace;
  const auto pred = model.forward(params, z, tvec, prompt, trace);
  auto g_a = params.zeros_like();
  model.backward(params, trace, masked_loss_grad(pred, truth, 0b0101), g_a);

  auto altered = pred;
  for (std::size_t k : {1u, 3u})
    for (double& v : altered.track(k)) v = 50.0 * rng.normal();
  auto g_b = params.zeros_like();
  model.backward(params, trace, masked_loss_grad(altered, truth, 0b0101), g_b);
  CHECK(masked_loss(altered, truth, 0b0101) == masked_loss(pred, truth, 0b0101));
  CHECK(g_a == g_b);
}

TEST_CASE("gradient clipping") {
  SUBCASE("[3, 4] at 0.7") {
    ParameterSet g;
    const auto i = g.add("w", {2});
    g[i][0] = 3.0;
    g[i][1] = 4.0;
    CHECK(clip_gradients(g, 0.7) == doctest::Approx(5.0));
    CHECK(g[0][0] == doctest::Approx(0.42).epsilon(1e-14));
    CHECK(g[0][1] == doctest::Approx(0.56).epsilon(1e-14));
  }
  SUBCASE("below threshold untouched") {
    ParameterSet g;
    const auto i = g.add("w", {2});
    g[i][0] = 0.3;
    g[i][1] = 0.4;
    const auto before = g;
    clip_gradients(g, 0.7);
    CHECK(g == before);
  }
  SUBCASE("zero stays zero") {
    auto g = scalar_set(0.0);
    CHECK(clip_gradients(g, 0.7) == 0.0);
    CHECK(g[0][0] == 0.0);
  }
  SUBCASE("clipped norm never exceeds the threshold") {
    Rng rng(2);
    for (int trial = 0; trial < 200; ++trial) {
      ParameterSet g;
      g.add("a", {7});
      g.add("b", {3, 5});
      const double scale = std::exp(6.0 * rng.normal());
      for (std::size_t i = 0; i < g.size(); ++i)
        for (double& v : g[i].values()) v = scale * rng.normal();
      const double thr = 0.01 + rng.uniform();
      clip_gradients(g, thr);
      CHECK(global_norm(g) <= thr + 1e-9);
    }
  }
  SUBCASE("bad threshold") {
    auto g = scalar_set(1.0);
    CHECK_THROWS_AS(clip_gradients(g, 0.0), Error);
  }
}

TEST_CASE("AdamW") {
  TrainConfig cfg;
  SUBCASE("one scalar step") {
    auto p = scalar_set(1.0);
    auto st = AdamState::zeros_like(p);
    adamw_step(p, scalar_set(0.5), st, cfg, 0.1);
    CHECK(p[0][0] == doctest::Approx(0.890000002).epsilon(1e-14));
    CHECK(st.step == 1);
  }
  SUBCASE("two scalar steps") {
    auto p = scalar_set(1.0);
    auto st = AdamState::zeros_like(p);
    adamw_step(p, scalar_set(0.5), st, cfg, 0.1);
    adamw_step(p, scalar_set(-0.25), st, cfg, 0.1);
    CHECK(p[0][0] == doctest::Approx(0.8542630578558273).epsilon(1e-14));
  }
  SUBCASE("zero gradient, zero decay") {
    auto c = cfg;
    c.weight_decay = 0.0;
    auto p = scalar_set(0.7);
    auto st = AdamState::zeros_like(p);
    adamw_step(p, scalar_set(0.0), st, c, 0.1);
    CHECK(p[0][0] == 0.7);
  }
  SUBCASE("decay only") {
    auto p = scalar_set(2.0);
    auto st = AdamState::zeros_like(p);
    adamw_step(p, scalar_set(0.0), st, cfg, 0.05);
    CHECK(p[0][0] == doctest::Approx(2.0 * (1.0 - 0.05 * 0.1)).epsilon(1e-15));
  }
  SUBCASE("non-finite gradient rejected") {
    auto p = scalar_set(1.0);
    auto st = AdamState::zeros_like(p);
    CHECK_THROWS_AS(adamw_step(p, scalar_set(std::nan("")), st, cfg, 0.1), Error);
    CHECK(p[0][0] == 1.0);
  }
}

TEST_CASE("learning rate decays linearly") {
  TrainConfig cfg;
  CHECK(learning_rate(cfg, 0, 100) == cfg.lr_start);
  CHECK(learning_rate(cfg, 50, 100) == doctest::Approx(0.5 * cfg.lr_start));
  double prev = 1.0;
  for (long s = 0; s < 1000; ++s) {
    const double lr = learning_rate(cfg, s, 1000);
    CHECK(lr <= prev);
    CHECK(lr > 0.0);
    prev = lr;
  }
  CHECK_THROWS_AS(learning_rate(cfg, 100, 100), Error);
  CHECK(TrainConfig::paper().lr_start == 3e-5);
  CHECK(TrainConfig::paper().batch_size == 12);
  CHECK(TrainConfig::desk().lr_start == 1e-3);
}

TEST_CASE("EMA") {
  SUBCASE("one step") {
    auto t = scalar_set(1.0);
    ema_update(t, scalar_set(0.0), 0.999);
    CHECK(t[0][0] == doctest::Approx(0.999).epsilon(1e-15));
  }
  SUBCASE("decay zero copies the student") {
    auto t = scalar_set(1.0);
    ema_update(t, scalar_set(-3.0), 0.0);
    CHECK(t[0][0] == -3.0);
  }
  SUBCASE("constant student matches the geometric closed form") {
    for (double d : {0.5, 0.9, 0.999}) {
      auto t = scalar_set(1.7);
      for (int n = 1; n <= 5000; ++n) {
        ema_update(t, scalar_set(-0.4), d);
        if (n % 500 == 0) {
          const double dn = std::pow(d, n);
          CHECK(std::abs(t[0][0] - (dn * 1.7 + (1.0 - dn) * -0.4)) < 1e-10);
        }
      }
    }
  }
  SUBCASE("arbitrary sequence matches the weighted sum") {
    Rng rng(6);
    const double d = 0.97;
    std::vector<double> s(400);
    for (double& v : s) v = rng.normal();
    auto t = scalar_set(0.3);
    for (double v : s) ema_update(t, scalar_set(v), d);
    const std::size_t n = s.size();
    double expect = std::pow(d, static_cast<double>(n)) * 0.3;
    for (std::size_t i = 0; i < n; ++i)
      expect += (1.0 - d) * std::pow(d, static_cast<double>(n - 1 - i)) * s[i];
    CHECK(std::abs(t[0][0] - expect) < 1e-10);
  }
  SUBCASE("layout mismatch") {
    auto t = scalar_set(1.0);
    ParameterSet other;
    other.add("w", {2});
    CHECK_THROWS_AS(ema_update(t, other, 0.9), Error);
  }
}

TEST_CASE("bootstrapping") {
  const auto c = tiny_config();
  const nn::UNet1d model(c);
  const auto schedule = diffusion::build_schedule(diffusion::ScheduleKind::Linear, 10, 1e-3, 0.2);
  const auto vocab = tiny_vocab();
  const Teacher teacher{&model, std::make_shared<const ParameterSet>(perturbed(model, 30)),
                        &schedule, &vocab, 7.0};
  const auto examples = random_examples(c, 6, 2);

  auto make_batch = [&](TrackMask targets, TrackRole mode) {
    std::vector<BatchItem> batch;
    for (const auto& ex : examples)
      batch.push_back({ex.latents, ex.content, TaskSpec::from_mask(4, targets, mode), 0});
    return batch;
  };
  auto cfg = curriculum(10);

  SUBCASE("before the start epoch nothing changes") {
    auto batch = make_batch(0b0001, TrackRole::Conditional);
    Rng rng(1);
    CHECK(bootstrap_batch(batch, &teacher, cfg, 5, rng) == 0);
    for (std::size_t i = 0; i < batch.size(); ++i) CHECK(batch[i].clean == examples[i].latents);
  }
  SUBCASE("p2 = 0 leaves the batch alone") {
    cfg.p2 = 0.0;
    auto batch = make_batch(0b0001, TrackRole::Conditional);
    Rng rng(1);
    CHECK(bootstrap_batch(batch, &teacher, cfg, 9, rng) == 0);
    for (std::size_t i = 0; i < batch.size(); ++i) CHECK(batch[i].clean == examples[i].latents);
  }
  SUBCASE("marginal and joint items are never touched") {
    cfg.p2 = 1.0;
    auto batch = make_batch(0b0001, TrackRole::Marginal);
    auto joint = make_batch(0b1111, TrackRole::Conditional);
    batch.insert(batch.end(), joint.begin(), joint.end());
    Rng rng(1);
    CHECK(bootstrap_batch(batch, &teacher, cfg, 9, rng) == 0);
  }
  SUBCASE("p2 = 1 with one conditional track replaces it") {
    cfg.p2 = 1.0;
    auto batch = make_batch(0b1110, TrackRole::Conditional);
    Rng rng(1);
    CHECK(bootstrap_batch(batch, &teacher, cfg, 6, rng) == batch.size());
    for (std::size_t i = 0; i < batch.size(); ++i) {
      CHECK(batch[i].bootstrapped == 0b0001);
      const auto before = examples[i].latents.track(0);
      const auto after = batch[i].clean.track(0);
      for (std::size_t j = 0; j < after.size(); ++j) CHECK(after[j] != before[j]);
      for (std::size_t k = 1; k < 4; ++k)
        CHECK(std::ranges::equal(batch[i].clean.track(k), examples[i].latents.track(k)));
      CHECK(batch[i].clean.all_finite());
    }
  }
  SUBCASE("only conditional tracks are replaced, at least one per picked item") {
    cfg.p2 = 1.0;
    auto batch = make_batch(0b0001, TrackRole::Conditional);
    Rng rng(3);
    bootstrap_batch(batch, &teacher, cfg, 9, rng);
    for (std::size_t i = 0; i < batch.size(); ++i) {
      const TrackMask b = batch[i].bootstrapped;
      CHECK(b != 0);
      CHECK((b & 0b0001) == 0);
      for (std::size_t k = 0; k < 4; ++k) {
        const bool same = std::ranges::equal(batch[i].clean.track(k), examples[i].latents.track(k));
        CHECK(same == !(b >> k & 1u));
      }
    }
  }
  SUBCASE("missing teacher") {
    cfg.p2 = 1.0;
    auto batch = make_batch(0b0001, TrackRole::Conditional);
    Rng rng(1);
    CHECK_THROWS_AS(bootstrap_batch(batch, nullptr, cfg, 9, rng), Error);
  }
}

TEST_CASE("training loop") {
  const auto c = tiny_config();
  const nn::UNet1d model(c);
  const auto schedule = diffusion::build_schedule(diffusion::ScheduleKind::Linear, 10, 1e-3, 0.2);
  auto make = [&](int epochs, std::size_t n, std::uint64_t seed = 0) {
    Rng init_rng(1);
    TrainConfig tc;
    tc.epochs = epochs;
    tc.seed = seed;
    auto cc = curriculum(epochs);
    cc.bootstrap_start_fraction = 0.5;
    return Trainer(model, model.init_params(init_rng), random_examples(c, n, 4), tiny_vocab(), cc,
                   tc, schedule);
  };

  SUBCASE("one epoch on eight examples is bit-identical across runs") {
    auto a = make(1, 8);
    auto b = make(1, 8);
    const auto ma = a.run_epoch();
    const auto mb = b.run_epoch();
    CHECK(a.params() == b.params());
    CHECK(a.ema() == b.ema());
    CHECK(ma.mean_loss == mb.mean_loss);
    CHECK(ma.steps == 1);
    CHECK(a.done());
    CHECK(a.params() != model.init_params(*std::make_unique<Rng>(1)));

    nn::Checkpoint ck{c, {10, 1e-3, 0.2}, 10.0, a.params()};
    nn::Checkpoint ck2{c, {10, 1e-3, 0.2}, 10.0, b.params()};
    CHECK(nn::serialize_checkpoint(ck) == nn::serialize_checkpoint(ck2));
  }
  SUBCASE("different seeds diverge") {
    auto a = make(1, 8, 1);
    auto b = make(1, 8, 2);
    a.run_epoch();
    b.run_epoch();
    CHECK(a.params() != b.params());
  }
  SUBCASE("bootstrapping kicks in late and the run stays finite") {
    auto t = make(4, 16);
    std::size_t early = 0, late = 0;
    for (int e = 0; e < 4; ++e) {
      const auto m = t.run_epoch();
      CHECK(std::isfinite(m.mean_loss));
      (e < 2 ? early : late) += m.bootstrapped;
      CHECK(m.steps == 2);
      CHECK(m.lr > 0.0);
    }
    CHECK(early == 0);
    CHECK(late > 0);
    CHECK(t.step() == 8);
    CHECK(t.params().all_finite());
    CHECK_THROWS_AS(t.run_epoch(), Error);
  }
  SUBCASE("epoch task counts follow the curriculum") {
    auto t = make(2, 10000);
    t.run_epoch();
    const auto m = t.run_epoch();  // phase 2 midpoint
    auto cc = curriculum(2);
    const auto s = task_probabilities(cc, 1);
    const auto r = eval::chi_square_audit(m.task_counts, s.subset_probs);
    CHECK(r.dof == 14);
    CHECK(r.pass);
    std::size_t total = 0;
    for (auto n : m.task_counts) total += n;
    CHECK(total == 10000);
    std::size_t cond_total = m.conditional_modes + m.marginal_modes;
    CHECK(cond_total == total - m.task_counts[14]);
  }
  SUBCASE("metrics record") {
    auto t = make(1, 8);
    const auto rec = to_record(t.run_epoch());
    CHECK(rec.find("epoch=1 ") == 0);
    CHECK(rec.find("loss_single=") != std::string::npos);
    CHECK(rec.find("loss_joint=") != std::string::npos);
    CHECK(rec.find(" lr=") != std::string::npos);
    CHECK(rec.find("wall_s=") != std::string::npos);
    CHECK(rec.find('\n') == std::string::npos);
  }
  SUBCASE("divergence aborts with a state dump") {
    Rng init_rng(1);
    auto params = model.init_params(init_rng);
    params[params.find("out.bias").value()].fill(1e308);
    TrainConfig tc;
    tc.epochs = 1;
    Trainer t(model, params, random_examples(c, 8, 4), tiny_vocab(), curriculum(1), tc, schedule);
    const auto dump = std::filesystem::temp_directory_path() / "stemforge_divergence.stmf";
    std::filesystem::remove(dump);
    t.divergence_dump = dump;
    try {
      t.run_epoch();
      FAIL("expected divergence");
    } catch (const Error& e) {
      CHECK(e.code() == ErrorCode::Numerical);
    }
    CHECK(std::filesystem::exists(dump));
    CHECK(nn::read_container(binio::read_file(dump)).size() == params.size() + 3);
    std::filesystem::remove(dump);
  }
  SUBCASE("mismatched inputs rejected") {
    Rng init_rng(1);
    TrainConfig tc;
    tc.epochs = 3;
    CHECK_THROWS_AS(Trainer(model, model.init_params(init_rng), random_examples(c, 8, 4),
                            tiny_vocab(), curriculum(4), tc, schedule),
                    Error);
    CHECK_THROWS_AS(Trainer(model, model.init_params(init_rng), {}, tiny_vocab(), curriculum(3),
                            tc, schedule),
                    Error);
    auto other = tiny_config();
    other.frames = 16;
    CHECK_THROWS_AS(Trainer(model, model.init_params(init_rng), random_examples(other, 8, 4),
                            tiny_vocab(), curriculum(3), tc, schedule),
                    Error);
  }
}
