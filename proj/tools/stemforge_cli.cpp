// Copyright 2026 The StemForge Authors
// SPDX-License-Identifier: Apache-2.0

// stemforge: synth | train | sample | eval | gradcheck | serve

#include <spdlog/sinks/stdout_sinks.h>
#include <spdlog/spdlog.h>

#include <chrono>
#include <cstdlib>
#include <fstream>
#include <iostream>
#include <map>
#include <optional>
#include <sstream>
#include <string>

#include "CLI11.hpp"
#include "httplib.h"
#include "json.hpp"
#include "stemforge/binio.hpp"
#include "stemforge/checkpoint.hpp"
#include "stemforge/data.hpp"
#include "stemforge/error.hpp"
#include "stemforge/eval.hpp"
#include "stemforge/gradcheck.hpp"
#include "stemforge/manifest.hpp"
#include "stemforge/pipeline.hpp"
#include "stemforge/workflow.hpp"

namespace fs = std::filesystem;
using namespace stemforge;

namespace {

struct Options {
  std::string config;
  std::string data;
  std::string checkpoint;
  std::string out;
  std::string manifest;
  std::optional<std::uint64_t> seed;
  std::string preset = "desk";
  int epochs = 60;
  double lambda = 7.0;
  std::string task;
  std::string prompt;
  std::size_t index = 0;
  std::string wav_dir;
  std::string tracks;
  std::string csv;
  std::size_t count = 64;
  std::size_t frechet_count = 128;
  bool use_model_weights = false;
  std::size_t held_out = 0;
  std::size_t max_params = 0;
  std::string host = "127.0.0.1";
  int port = 8080;
  std::string session_dir;
  bool async = false;
};

class Run {
 public:
  Run(std::string command, const Options& o) : o_(o), start_(std::chrono::steady_clock::now()) {
    m_.command = std::move(command);
    m_.config_path = o.config;
    m_.seed = o.seed.value_or(0);
    if (o.seed) m_.add_option("seed", std::to_string(*o.seed));
    if (!o.config.empty()) m_.add_file(o.config);
  }

  cli::RunManifest& manifest() { return m_; }

  void finish() {
    m_.wall_seconds =
        std::chrono::duration<double>(std::chrono::steady_clock::now() - start_).count();
    const std::string text = m_.to_json() + "\n";
    fs::path where = o_.manifest;
    if (where.empty() && !o_.out.empty()) where = o_.out + ".manifest.json";
    if (where.empty()) {
      std::cout << text;
      return;
    }
    binio::write_file(where, std::span(reinterpret_cast<const std::uint8_t*>(text.data()),
                                       text.size()));
    spdlog::info("manifest {}", where.string());
  }

 private:
  const Options& o_;
  cli::RunManifest m_;
  std::chrono::steady_clock::time_point start_;
};

data::DatasetConfig load_config(const Options& o) {
  return o.config.empty() ? data::DatasetConfig{} : data::DatasetConfig::load(o.config);
}

void require_out(const Options& o) { require(!o.out.empty(), "--out is required"); }

void write_text(const fs::path& path, const std::string& text) {
  binio::write_file(path,
                    std::span(reinterpret_cast<const std::uint8_t*>(text.data()), text.size()));
}

std::vector<data::StemSample> load_samples(const Options& o, const data::DatasetConfig& c,
                                           Run& run) {
  if (o.data.empty()) return data::synthesize(c);
  run.manifest().add_file(o.data);
  auto ds = data::read_dataset(o.data);
  const auto expected = data::make_dataset(c, {}).header;
  require(ds.header == expected, "dataset " + o.data + " was not made with this config");
  return std::move(ds.samples);
}

void cmd_synth(const Options& o) {
  require_out(o);
  Run run("synth", o);
  auto c = load_config(o);
  if (o.seed) c.seed = *o.seed;
  if (o.held_out) {
    c = pipeline::held_out_config(c, o.held_out);
    run.manifest().add_option("held_out", std::to_string(o.held_out));
  }
  const auto ds = data::make_dataset(c, data::synthesize(c));
  data::write_dataset(ds, o.out);
  spdlog::info("wrote {} samples to {}", ds.samples.size(), o.out);
  run.manifest().add_output(o.out);
  run.finish();
}

void cmd_train(const Options& o) {
  require_out(o);
  Run run("train", o);
  const auto c = load_config(o);
  const auto samples = load_samples(o, c, run);
  run.manifest().add_option("preset", o.preset);
  run.manifest().add_option("epochs", std::to_string(o.epochs));

  pipeline::TrainOptions t;
  t.preset = pipeline::parse_preset(o.preset);
  t.seed = o.seed.value_or(0);
  t.epochs = o.epochs;
  t.divergence_dump = fs::path(o.out + ".diverged.stmf");
  std::string log;
  t.on_epoch = [&](const train::EpochMetrics& m) {
    const auto line = train::to_record(m);
    spdlog::info("{}", line);
    log += line + "\n";
  };
  const auto r = pipeline::train_model(c, samples, t);
  const fs::path metrics = o.out + ".metrics.txt";
  nn::save_checkpoint(r.model, o.out);
  nn::save_checkpoint(r.ema, nn::ema_path(o.out));
  write_text(metrics, log);
  run.manifest().add_output(o.out);
  run.manifest().add_output(nn::ema_path(o.out));
  run.manifest().add_output(metrics);
  run.finish();
}

/// "bass,drums | given melody,instrument": targets before the bar, then
/// the Conditional tracks; every other track is Marginal.
diffusion::TaskSpec parse_task(const std::string& text, std::size_t K) {
  const auto bar = text.find('|');
  const TrackMask targets = parse_track_list(text.substr(0, bar), K);
  require(targets != 0, "task needs at least one target track");
  TrackMask given = 0;
  if (bar != std::string::npos) {
    std::string rest = text.substr(bar + 1);
    const auto kw = rest.find("given");
    require(kw != std::string::npos && rest.find_first_not_of(" \t") == kw,
            "expected 'given <tracks>' after '|'");
    given = parse_track_list(rest.substr(kw + 5), K);
  }
  require((targets & given) == 0, "a track cannot be both target and given");
  std::vector<diffusion::TrackRole> roles(K, diffusion::TrackRole::Marginal);
  for (std::size_t k = 0; k < K; ++k) {
    if (targets >> k & 1u) roles[k] = diffusion::TrackRole::Target;
    if (given >> k & 1u) roles[k] = diffusion::TrackRole::Conditional;
  }
  return diffusion::TaskSpec(roles);
}

/// "f0=3,tempo=1,motif=5" (0-based buckets); any subset of the keys.
std::vector<std::uint32_t> parse_prompt(const std::string& text, const data::DatasetConfig& c) {
  const auto vocab = c.vocabulary();
  std::vector<std::uint32_t> tokens;
  std::stringstream in(text);
  std::string item;
  while (std::getline(in, item, ',')) {
    const auto eq = item.find('=');
    require(eq != std::string::npos, "prompt items look like key=value, got '" + item + "'");
    const std::string key = item.substr(0, eq);
    std::size_t value = 0;
    try {
      value = std::stoul(item.substr(eq + 1));
    } catch (const std::exception&) {
      fail(ErrorCode::InvalidInput, "bad prompt value in '" + item + "'");
    }
    if (key == "f0")
      tokens.push_back(vocab.f0_token(value));
    else if (key == "tempo")
      tokens.push_back(vocab.tempo_token(value));
    else if (key == "motif")
      tokens.push_back(vocab.motif_token(value));
    else
      fail(ErrorCode::InvalidInput, "unknown prompt key '" + key + "' (f0, tempo, motif)");
  }
  return tokens;
}

data::StemSample reference_sample(const Options& o, const data::DatasetConfig& c, Run& run) {
  if (o.data.empty()) return data::generate_sample(c, c.seed + o.index);
  run.manifest().add_file(o.data);
  auto ds = data::read_dataset(o.data);
  require(o.index < ds.samples.size(), "--index out of range");
  return std::move(ds.samples[o.index]);
}

void cmd_sample(const Options& o) {
  require_out(o);
  require(!o.checkpoint.empty(), "--checkpoint is required");
  require(!o.task.empty(), "--task is required");
  Run run("sample", o);
  run.manifest().add_file(o.checkpoint);
  run.manifest().add_option("task", o.task);
  run.manifest().add_option("prompt", o.prompt);
  run.manifest().add_option("lambda", std::to_string(o.lambda));
  run.manifest().add_option("index", std::to_string(o.index));
  const pipeline::Engine engine(nn::load_checkpoint(o.checkpoint), load_config(o));
  const auto task = parse_task(o.task, engine.tracks());
  const auto ref = reference_sample(o, engine.data, run);
  std::map<std::size_t, data::Waveform> given;
  for (std::size_t k : task.conditional_tracks()) given[k] = ref.waveforms[k];
  const auto content = o.prompt.empty() ? ref.prompt.content_tokens : parse_prompt(o.prompt, engine.data);
  const auto g = pipeline::generate(engine, task, given, content, o.seed.value_or(0), o.lambda);

  std::vector<nn::NamedTensor> out;
  const auto& z = g.latents;
  out.push_back({"latents", {z.tracks(), z.channels(), z.frames()},
                 std::vector<float>(z.values().begin(), z.values().end())});
  std::vector<float> roles;
  for (auto r : task.roles()) roles.push_back(static_cast<float>(static_cast<int>(r)));
  out.push_back({"roles", {roles.size()}, roles});
  for (std::size_t k = 0; k < g.tracks.size(); ++k) {
    if (g.tracks[k].empty()) continue;
    out.push_back({"track." + track_name(k), {g.tracks[k].size()},
                   std::vector<float>(g.tracks[k].begin(), g.tracks[k].end())});
  }
  binio::write_file(o.out, nn::write_container(out));
  run.manifest().add_output(o.out);
  if (!o.wav_dir.empty()) {
    fs::create_directories(o.wav_dir);
    for (std::size_t k = 0; k < g.tracks.size(); ++k) {
      if (g.tracks[k].empty()) continue;
      const fs::path p = fs::path(o.wav_dir) / (track_name(k) + ".wav");
      binio::write_file(p, workflow::encode_wav(g.tracks[k], engine.data.sample_rate));
      run.manifest().add_output(p);
    }
  }
  spdlog::info("sampled {} -> {}", engine.vocab.task_label(task.target_mask()), o.out);
  run.finish();
}

void write_report(const Options& o, const std::vector<eval::MetricRecord>& records, Run& run) {
  const auto text = eval::to_records(records);
  std::cout << text;
  if (!o.out.empty()) {
    write_text(o.out, text);
    run.manifest().add_output(o.out);
  }
  if (!o.csv.empty()) {
    write_text(o.csv, eval::to_csv(records));
    run.manifest().add_output(o.csv);
  }
}

void cmd_eval(const Options& o) {
  Run run("eval", o);
  const auto c = load_config(o);
  std::vector<eval::MetricRecord> records;

  if (!o.tracks.empty()) {
    run.manifest().add_file(o.tracks);
    run.manifest().add_option("index", std::to_string(o.index));
    const auto tensors = nn::read_container(binio::read_file(o.tracks));
    std::vector<data::Waveform> tracks(data::DatasetConfig::kTracks);
    for (std::size_t k = 0; k < tracks.size(); ++k) {
      bool found = false;
      for (const auto& t : tensors)
        if (t.name == "track." + track_name(k)) {
          tracks[k].assign(t.data.begin(), t.data.end());
          found = true;
        }
      require(found, "coherence needs all four tracks; " + track_name(k) + " is missing");
    }
    const auto ref = reference_sample(o, c, run);
    const auto r = eval::coherence_eval(tracks, c.sample_rate, ref.meta);
    for (const auto* ch : {&r.instrument, &r.melody})
      records.push_back({"ratio_error_hz", ch->name, ch->error_hz, ch->tolerance_hz, ch->pass});
    records.push_back({"period_error", "drums", std::abs(r.drums.estimated - r.drums.expected),
                       r.drums.tolerance, r.drums.pass});
    write_report(o, records, run);
    run.finish();
    return;
  }

  require(!o.checkpoint.empty(), "--checkpoint or --tracks is required");
  const fs::path ckpt = o.use_model_weights ? fs::path(o.checkpoint) : nn::ema_path(o.checkpoint);
  run.manifest().add_file(ckpt);
  run.manifest().add_option("lambda", std::to_string(o.lambda));
  run.manifest().add_option("count", std::to_string(o.count));
  run.manifest().add_option("frechet_count", std::to_string(o.frechet_count));
  const pipeline::Engine engine(nn::load_checkpoint(ckpt), c);
  std::vector<data::StemSample> held;
  if (o.data.empty()) {
    held = data::synthesize(pipeline::held_out_config(c, std::max(o.count, o.frechet_count)));
  } else {
    run.manifest().add_file(o.data);
    held = data::read_dataset(o.data).samples;
  }
  require(held.size() >= std::max(o.count, o.frechet_count), "not enough held-out samples");
  const std::uint64_t seed = o.seed.value_or(0);

  const auto cond = pipeline::conditional_bass_eval(
      engine, std::vector(held.begin(), held.begin() + o.count), seed, o.lambda);
  records.push_back({"conditional_pass_rate", "instrument/bass", cond.pass_rate(), 0.7,
                     cond.pass_rate() >= 0.7});
  const auto fr = pipeline::frechet_eval(
      engine, std::vector(held.begin(), held.begin() + o.frechet_count), seed, o.lambda);
  records.push_back({"frechet_generated", "mix", fr.generated, fr.noisy, fr.pass()});
  records.push_back({"frechet_noisy_0db", "mix", fr.noisy, 0.0, true});
  write_report(o, records, run);
  run.finish();
}

void cmd_gradcheck(const Options& o) {
  Run run("gradcheck", o);
  nn::GradcheckOptions g;
  g.max_params = o.max_params;
  if (o.seed) g.seed = *o.seed;
  run.manifest().add_option("max_params", std::to_string(o.max_params));
  const auto r = nn::gradient_check(nn::gradcheck_config(), g);
  nlohmann::ordered_json j{{"parameters", r.parameters},
                           {"checked", r.checked},
                           {"failures", r.failures},
                           {"worst", r.worst.name},
                           {"worst_rel_error", r.worst.rel_error},
                           {"tolerance", g.tolerance},
                           {"pass", r.passed()}};
  std::cout << j.dump() << "\n";
  if (!o.out.empty()) {
    write_text(o.out, j.dump() + "\n");
    run.manifest().add_output(o.out);
  }
  run.finish();
  if (!r.passed())
    fail(ErrorCode::Tolerance, std::to_string(r.failures) + " gradients exceed tolerance; worst " +
                                   r.worst.name);
}

void cmd_serve(const Options& o) {
  require(!o.checkpoint.empty(), "--checkpoint is required");
  Run run("serve", o);
  run.manifest().add_file(o.checkpoint);
  workflow::ServiceOptions so;
  if (!o.session_dir.empty()) so.session_dir = o.session_dir;
  so.async_generation = o.async;
  so.id_seed = o.seed.value_or(0);
  auto engine = std::make_shared<const pipeline::Engine>(nn::load_checkpoint(o.checkpoint),
                                                         load_config(o));
  workflow::SessionService service(engine, so);
  httplib::Server server;
  workflow::install_routes(server, service);
  run.finish();
  spdlog::info("listening on {}:{}", o.host, o.port);
  if (!server.listen(o.host, o.port))
    fail(ErrorCode::InvalidInput, "cannot listen on " + o.host + ":" + std::to_string(o.port));
}

int exit_code(ErrorCode c) {
  switch (c) {
    case ErrorCode::Tolerance:
      return 3;
    case ErrorCode::Numerical:
      return 4;
    default:
      return 2;
  }
}

void report_error(std::string_view code, const std::string& message) {
  std::cerr << nlohmann::json{{"error", code}, {"message", message}}.dump() << "\n";
}

void setup_logging() {
  auto logger = spdlog::stderr_logger_mt("stemforge");
  spdlog::set_default_logger(logger);
  spdlog::set_pattern("[%H:%M:%S.%e] %l %v");
  const char* env = std::getenv("STEMFORGE_LOG");
  spdlog::set_level(env ? spdlog::level::from_str(env) : spdlog::level::info);
}

}  // namespace

int main(int argc, char** argv) {
  setup_logging();
  Options o;
  CLI::App app{"StemForge multi-track latent diffusion"};
  app.require_subcommand(1);
  app.fallthrough();
  app.add_option("--manifest", o.manifest, "Run manifest path (default <out>.manifest.json)");

  auto seed = [&](CLI::App* c) { c->add_option("--seed", o.seed, "Random seed"); };
  auto config = [&](CLI::App* c) {
    c->add_option("--config", o.config, "Dataset config file")->check(CLI::ExistingFile);
  };

  auto* synth = app.add_subcommand("synth", "Synthesize a dataset");
  config(synth);
  seed(synth);
  synth->add_option("--out", o.out, "Dataset file")->required();
  synth->add_option("--held-out", o.held_out, "Make this many held-out samples instead");

  auto* train = app.add_subcommand("train", "Train a model");
  config(train);
  seed(train);
  train->add_option("--data", o.data, "Dataset file (synthesized from the config if absent)");
  train->add_option("--out", o.out, "Checkpoint path")->required();
  train->add_option("--preset", o.preset, "desk or paper")->check(CLI::IsMember({"desk", "paper"}));
  train->add_option("--epochs", o.epochs, "Epochs (0 writes the initial weights)")
      ->check(CLI::NonNegativeNumber);

  auto* sample = app.add_subcommand("sample", "Generate tracks");
  config(sample);
  seed(sample);
  sample->add_option("--checkpoint", o.checkpoint, "Checkpoint")->required();
  sample->add_option("--task", o.task, "e.g. \"bass,drums | given melody,instrument\"")->required();
  sample->add_option("--prompt", o.prompt, "f0=I,tempo=J,motif=M (default: the reference sample's)");
  sample->add_option("--lambda", o.lambda, "Guidance scale");
  sample->add_option("--data", o.data, "Dataset holding the conditioning tracks");
  sample->add_option("--index", o.index, "Sample index for conditioning");
  sample->add_option("--out", o.out, "Output container")->required();
  sample->add_option("--wav-dir", o.wav_dir, "Also write one WAV per track here");

  auto* ev = app.add_subcommand("eval", "Evaluate a model or a sampled output");
  config(ev);
  seed(ev);
  ev->add_option("--checkpoint", o.checkpoint, "Checkpoint (its EMA file is used)");
  ev->add_flag("--model-weights", o.use_model_weights, "Use the raw weights instead of the EMA");
  ev->add_option("--tracks", o.tracks, "Output of `sample` to check for coherence");
  ev->add_option("--data", o.data, "Held-out dataset, or the reference dataset for --tracks");
  ev->add_option("--index", o.index, "Reference sample index for --tracks");
  ev->add_option("--count", o.count, "Conditional generations");
  ev->add_option("--frechet-count", o.frechet_count, "Mixes per Frechet set");
  ev->add_option("--lambda", o.lambda, "Guidance scale");
  ev->add_option("--out", o.out, "Report file");
  ev->add_option("--csv", o.csv, "CSV report file");

  auto* grad = app.add_subcommand("gradcheck", "Finite-difference gradient sweep");
  config(grad);
  seed(grad);
  grad->add_option("--max-params", o.max_params, "Random subset size (0 = all)");
  grad->add_option("--out", o.out, "Report file");

  auto* serve = app.add_subcommand("serve", "Run the session HTTP service");
  config(serve);
  seed(serve);
  serve->add_option("--checkpoint", o.checkpoint, "Checkpoint")->required();
  serve->add_option("--host", o.host, "Bind address");
  serve->add_option("--port", o.port, "Port");
  serve->add_option("--session-dir", o.session_dir, "Persist sessions here");
  serve->add_flag("--async", o.async, "Generate in the background and poll");

  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& e) {
    if (e.get_exit_code() == 0) return app.exit(e);
    report_error("invalid_input", e.what());
    return 2;
  }

  try {
    if (*synth) cmd_synth(o);
    if (*train) cmd_train(o);
    if (*sample) cmd_sample(o);
    if (*ev) cmd_eval(o);
    if (*grad) cmd_gradcheck(o);
    if (*serve) cmd_serve(o);
  } catch (const Error& e) {
    report_error(to_string(e.code()), e.what());
    return exit_code(e.code());
  } catch (const std::exception& e) {
    report_error("internal", e.what());
    return 1;
  }
  return 0;
}
