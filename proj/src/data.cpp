// Copyright 2026 The StemForge Authors
// SPDX-License-Identifier: Apache-2.0

#include "stemforge/data.hpp"

#include <Eigen/Dense>

#include <algorithm>
#include <charconv>
#include <cmath>
#include <fstream>
#include <numbers>
#include <sstream>

#include "stemforge/binio.hpp"
#include "stemforge/error.hpp"
#include "stemforge/rng.hpp"

namespace stemforge::data {

namespace {

constexpr char kMagic[] = "STEM";
constexpr std::uint32_t kVersion = 1;

std::string trim(std::string_view s) {
  const auto b = s.find_first_not_of(" \t\r");
  if (b == std::string_view::npos) return {};
  const auto e = s.find_last_not_of(" \t\r");
  return std::string(s.substr(b, e - b + 1));
}

template <typename T>
T parse_number(const std::string& key, const std::string& text) {
  T v{};
  const auto* end = text.data() + text.size();
  const auto [ptr, ec] = std::from_chars(text.data(), end, v);
  if (ec != std::errc() || ptr != end)
    fail(ErrorCode::InvalidInput, "config key '" + key + "': cannot parse '" + text + "'");
  return v;
}

template <typename T>
std::vector<T> parse_list(const std::string& key, const std::string& text) {
  std::vector<T> out;
  std::stringstream ss(text);
  std::string item;
  while (std::getline(ss, item, ',')) out.push_back(parse_number<T>(key, trim(item)));
  return out;
}

double quantize(double v) { return static_cast<double>(static_cast<float>(v)); }

}  // namespace

std::string to_string(CodecKind kind) {
  return kind == CodecKind::IdentityFrames ? "identity" : "ortho";
}

CodecKind parse_codec_kind(std::string_view text) {
  if (text == "identity" || text == "IdentityFrames") return CodecKind::IdentityFrames;
  if (text == "ortho" || text == "OrthoLinear") return CodecKind::OrthoLinear;
  fail(ErrorCode::InvalidInput, "unknown codec kind '" + std::string(text) + "'");
}

void DatasetConfig::validate() const {
  require(sample_rate > 0, "sample_rate must be > 0");
  require(!f0_buckets.empty() && !tempo_buckets.empty() && motif_count > 0,
          "f0_buckets, tempo_buckets and motif_count must be non-empty");
  const double nyquist = sample_rate / 2.0;
  for (double f : f0_buckets)
    require(std::isfinite(f) && f > 0.0 && 3.0 * f * (1.0 + f0_jitter) < nyquist,
            "f0 bucket " + std::to_string(f) + " must be > 0 with 3*f0 below Nyquist");
  for (auto p : tempo_buckets)
    require(p >= 2 && p <= segment_length, "tempo periods must be in [2, segment_length]");
  require(motif_count <= 81, "motif_count must be <= 81 (four base-3 steps)");
  require(frame_size > 0 && segment_length > 0 && segment_length % frame_size == 0,
          "segment_length must be a positive multiple of frame_size");
  require(segment_length % 4 == 0, "segment_length must be divisible by 4 melody steps");
  require(std::isfinite(target_rms) && target_rms > 0.0 && target_rms < 1.0,
          "target_rms must be in (0, 1)");
  require(f0_jitter >= 0.0 && f0_jitter < 0.5, "f0_jitter must be in [0, 0.5)");
}

Vocabulary DatasetConfig::vocabulary() const {
  return Vocabulary(kTracks, f0_buckets.size(), tempo_buckets.size(), motif_count);
}

DatasetConfig DatasetConfig::parse(std::string_view text) {
  DatasetConfig c;
  std::stringstream in{std::string(text)};
  std::string line;
  int lineno = 0;
  while (std::getline(in, line)) {
    ++lineno;
    if (auto hash = line.find('#'); hash != std::string::npos) line.resize(hash);
    line = trim(line);
    if (line.empty()) continue;
    const auto eq = line.find('=');
    if (eq == std::string::npos)
      fail(ErrorCode::InvalidInput, "config line " + std::to_string(lineno) + ": expected key = value");
    const std::string key = trim(line.substr(0, eq));
    const std::string value = trim(line.substr(eq + 1));
    if (key == "sample_rate") c.sample_rate = parse_number<std::uint32_t>(key, value);
    else if (key == "num_samples") c.num_samples = parse_number<std::size_t>(key, value);
    else if (key == "seed") c.seed = parse_number<std::uint64_t>(key, value);
    else if (key == "f0_buckets") c.f0_buckets = parse_list<double>(key, value);
    else if (key == "tempo_buckets") c.tempo_buckets = parse_list<std::uint32_t>(key, value);
    else if (key == "motif_count") c.motif_count = parse_number<std::uint32_t>(key, value);
    else if (key == "frame_size") c.frame_size = parse_number<std::size_t>(key, value);
    else if (key == "codec_kind") c.codec_kind = parse_codec_kind(value);
    else if (key == "target_rms") c.target_rms = parse_number<double>(key, value);
    else if (key == "segment_length") c.segment_length = parse_number<std::size_t>(key, value);
    else if (key == "f0_jitter") c.f0_jitter = parse_number<double>(key, value);
    else if (key == "codec_seed") c.codec_seed = parse_number<std::uint64_t>(key, value);
    else fail(ErrorCode::InvalidInput, "unknown config key '" + key + "'");
  }
  c.validate();
  return c;
}

DatasetConfig DatasetConfig::load(const std::filesystem::path& path) {
  std::ifstream in(path);
  if (!in) fail(ErrorCode::NotFound, "cannot open config " + path.string());
  std::stringstream ss;
  ss << in.rdbuf();
  return parse(ss.str());
}

std::string DatasetConfig::to_text() const {
  std::ostringstream out;
  out.precision(17);
  auto join = [&](const auto& v) {
    std::ostringstream s;
    s.precision(17);
    for (std::size_t i = 0; i < v.size(); ++i) s << (i ? "," : "") << v[i];
    return s.str();
  };
  out << "sample_rate = " << sample_rate << "\n"
      << "num_samples = " << num_samples << "\n"
      << "seed = " << seed << "\n"
      << "f0_buckets = " << join(f0_buckets) << "\n"
      << "tempo_buckets = " << join(tempo_buckets) << "\n"
      << "motif_count = " << motif_count << "\n"
      << "frame_size = " << frame_size << "\n"
      << "codec_kind = " << to_string(codec_kind) << "\n"
      << "target_rms = " << target_rms << "\n"
      << "segment_length = " << segment_length << "\n"
      << "f0_jitter = " << f0_jitter << "\n"
      << "codec_seed = " << codec_seed << "\n";
  return out.str();
}

std::vector<double> motif_ratios(std::uint32_t motif) {
  static constexpr double kRatios[] = {1.0, 1.25, 1.5};
  std::vector<double> out;
  for (int j = 0; j < 4; ++j) {
    out.push_back(kRatios[motif % 3]);
    motif /= 3;
  }
  return out;
}

double rms(std::span<const double> x) {
  require(!x.empty(), "rms of an empty sequence");
  double s = 0.0;
  for (double v : x) s += v * v;
  return std::sqrt(s / static_cast<double>(x.size()));
}

StemSample generate_sample(const DatasetConfig& config, std::uint64_t seed) {
  config.validate();
  const Vocabulary vocab = config.vocabulary();
  Rng rng(seed);
  const std::size_t f0_bucket = rng.uniform_index(config.f0_buckets.size());
  const std::size_t tempo_bucket = rng.uniform_index(config.tempo_buckets.size());
  const auto motif = static_cast<std::uint32_t>(rng.uniform_index(config.motif_count));
  const double jitter = config.f0_jitter * (2.0 * rng.uniform() - 1.0);
  const double f0 = config.f0_buckets[f0_bucket] * (1.0 + jitter);
  const std::uint32_t period = config.tempo_buckets[tempo_bucket];
  const double phase = 2.0 * std::numbers::pi * rng.uniform();
  const std::size_t offset = rng.uniform_index(period);

  const std::size_t S = config.segment_length;
  const double w = 2.0 * std::numbers::pi * f0 / config.sample_rate;
  StemSample s;
  s.waveforms.assign(DatasetConfig::kTracks, Waveform(S));
  auto& bass = s.waveforms[0];
  auto& drums = s.waveforms[1];
  auto& inst = s.waveforms[2];
  auto& melody = s.waveforms[3];

  const double tau = std::max(4.0, period / 10.0);
  const auto ratios = motif_ratios(motif);
  const std::size_t step_len = S / ratios.size();
  double melody_phase = phase;
  for (std::size_t n = 0; n < S; ++n) {
    const double theta = w * static_cast<double>(n) + phase;
    bass[n] = std::sin(theta);
    inst[n] = 0.6 * std::sin(2.0 * theta) + 0.4 * std::sin(3.0 * theta);
    const std::size_t since = (n + period - offset) % period;
    drums[n] = rng.normal() * std::exp(-static_cast<double>(since) / tau);
    melody[n] = std::sin(melody_phase);
    melody_phase += w * ratios[std::min(n / step_len, ratios.size() - 1)];
  }
  s.prompt.content_tokens = {vocab.f0_token(f0_bucket), vocab.tempo_token(tempo_bucket),
                             vocab.motif_token(motif)};
  s.meta = StemMeta{f0, period, motif, seed};
  auto normalized = normalize_loudness(s, config.target_rms).sample;
  for (auto& track : normalized.waveforms)
    for (double& v : track) v = quantize(v);
  return normalized;
}

std::vector<StemSample> synthesize(const DatasetConfig& config) {
  config.validate();
  std::vector<StemSample> out(config.num_samples);
  const auto n = static_cast<long>(config.num_samples);
#pragma omp parallel for schedule(static)
  for (long i = 0; i < n; ++i)
    out[i] = generate_sample(config, config.seed + static_cast<std::uint64_t>(i));
  return out;
}

LoudnessResult normalize_loudness(const StemSample& sample, double target_rms) {
  require(std::isfinite(target_rms) && target_rms > 0.0, "target_rms must be > 0");
  LoudnessResult r{sample, 0};
  for (std::size_t k = 0; k < r.sample.waveforms.size(); ++k) {
    auto& track = r.sample.waveforms[k];
    const double level = rms(track);
    if (!(level > 0.0) || !std::isfinite(level))
      fail(ErrorCode::InvalidInput, "track " + std::to_string(k + 1) + " is silent or non-finite");
    const double scale = target_rms / level;
    for (double& v : track) {
      v *= scale;
      if (v > 1.0 || v < -1.0) {
        v = std::clamp(v, -1.0, 1.0);
        ++r.clipped;
      }
    }
  }
  return r;
}

Waveform render_mix(const std::vector<Waveform>& tracks, double target_rms) {
  require(!tracks.empty(), "mix of zero tracks");
  const std::size_t S = tracks.front().size();
  Waveform mix(S, 0.0);
  for (const auto& t : tracks) {
    require(t.size() == S, "mix tracks differ in length");
    for (std::size_t n = 0; n < S; ++n) mix[n] += t[n];
  }
  for (double& v : mix) v /= static_cast<double>(tracks.size());
  const double level = rms(mix);
  if (!(level > 0.0)) fail(ErrorCode::InvalidInput, "mix is silent");
  const double scale = target_rms / level;
  for (double& v : mix) v *= scale;
  return mix;
}

Codec::Codec(CodecKind kind, std::size_t frame_size, std::uint64_t seed)
    : kind_(kind), frame_size_(frame_size), basis_(frame_size * frame_size, 0.0) {
  require(frame_size > 0, "frame_size must be > 0");
  const auto F = static_cast<Eigen::Index>(frame_size);
  if (kind == CodecKind::IdentityFrames) {
    for (std::size_t i = 0; i < frame_size; ++i) basis_[i * frame_size + i] = 1.0;
    return;
  }
  Rng rng(seed);
  Eigen::MatrixXd g(F, F);
  for (Eigen::Index r = 0; r < F; ++r)
    for (Eigen::Index c = 0; c < F; ++c) g(r, c) = rng.normal();
  const Eigen::MatrixXd q = Eigen::HouseholderQR<Eigen::MatrixXd>(g).householderQ();
  for (Eigen::Index r = 0; r < F; ++r)
    for (Eigen::Index c = 0; c < F; ++c) basis_[r * frame_size + c] = q(r, c);
}

std::vector<double> Codec::encode(std::span<const double> x) const {
  const std::size_t F = frame_size_;
  if (x.size() % F != 0)
    fail(ErrorCode::InvalidInput, "waveform length " + std::to_string(x.size()) +
                                      " is not a multiple of frame size " + std::to_string(F));
  const std::size_t frames = x.size() / F;
  std::vector<double> z(x.size());
  for (std::size_t s = 0; s < frames; ++s)
    for (std::size_t d = 0; d < F; ++d) {
      if (kind_ == CodecKind::IdentityFrames) {
        z[d * frames + s] = x[s * F + d];
        continue;
      }
      double acc = 0.0;
      for (std::size_t j = 0; j < F; ++j) acc += basis_[j * F + d] * x[s * F + j];
      z[d * frames + s] = acc;
    }
  return z;
}

Waveform Codec::decode(std::span<const double> z) const {
  const std::size_t F = frame_size_;
  if (z.size() % F != 0)
    fail(ErrorCode::InvalidInput, "latent size is not a multiple of the frame size");
  const std::size_t frames = z.size() / F;
  Waveform x(z.size());
  for (std::size_t s = 0; s < frames; ++s)
    for (std::size_t j = 0; j < F; ++j) {
      if (kind_ == CodecKind::IdentityFrames) {
        x[s * F + j] = z[j * frames + s];
        continue;
      }
      double acc = 0.0;
      for (std::size_t d = 0; d < F; ++d) acc += basis_[j * F + d] * z[d * frames + s];
      x[s * F + j] = acc;
    }
  return x;
}

TrackLatents encode_tracks(const std::vector<Waveform>& tracks, const Codec& codec,
                           double latent_scale) {
  require(!tracks.empty(), "no tracks to encode");
  const std::size_t S = tracks.front().size();
  require(S % codec.frame_size() == 0, "track length is not a multiple of the frame size");
  TrackLatents z(tracks.size(), codec.frame_size(), S / codec.frame_size());
  for (std::size_t k = 0; k < tracks.size(); ++k) {
    require(tracks[k].size() == S, "tracks differ in length");
    const auto e = codec.encode(tracks[k]);
    auto dst = z.track(k);
    for (std::size_t i = 0; i < e.size(); ++i) dst[i] = e[i] * latent_scale;
  }
  return z;
}

std::vector<Waveform> decode_tracks(const TrackLatents& z, const Codec& codec,
                                    double latent_scale) {
  require(z.channels() == codec.frame_size(), "latent channels != codec frame size");
  std::vector<Waveform> out;
  std::vector<double> scaled(z.channels() * z.frames());
  for (std::size_t k = 0; k < z.tracks(); ++k) {
    const auto src = z.track(k);
    for (std::size_t i = 0; i < scaled.size(); ++i) scaled[i] = src[i] / latent_scale;
    out.push_back(codec.decode(scaled));
  }
  return out;
}

std::vector<std::uint8_t> serialize_dataset(const Dataset& d) {
  const auto& h = d.header;
  binio::Writer w;
  w.magic({kMagic, 4});
  w.u32(kVersion);
  w.u32(h.tracks);
  w.u32(h.sample_rate);
  w.u32(h.length);
  w.u32(h.vocab_size);
  w.u64(d.samples.size());
  for (const auto& s : d.samples) {
    require(s.waveforms.size() == h.tracks, "sample track count does not match the header");
    w.u32(static_cast<std::uint32_t>(s.prompt.content_tokens.size()));
    for (auto id : s.prompt.content_tokens) {
      require(id < h.vocab_size, "prompt token outside the vocabulary");
      w.u32(id);
    }
    w.f64(s.meta.f0);
    w.u32(s.meta.tempo_period);
    w.u32(s.meta.motif);
    w.u64(s.meta.seed);
    for (const auto& track : s.waveforms) {
      require(track.size() == h.length, "sample length does not match the header");
      for (double v : track) w.f32(static_cast<float>(v));
    }
  }
  w.seal();
  return w.take();
}

Dataset deserialize_dataset(std::span<const std::uint8_t> bytes) {
  binio::Reader r(bytes, "dataset");
  r.expect_magic({kMagic, 4});
  const std::uint32_t version = r.u32();
  if (version != kVersion)
    fail(ErrorCode::Format, "dataset: unsupported version " + std::to_string(version));
  Dataset d;
  d.header.tracks = r.u32();
  d.header.sample_rate = r.u32();
  d.header.length = r.u32();
  d.header.vocab_size = r.u32();
  const std::uint64_t count = r.u64();
  const std::size_t record_floor = 4 + 8 + 4 + 4 + 8 +
                                   std::size_t{4} * d.header.tracks * d.header.length;
  if (count > r.remaining() / std::max<std::size_t>(record_floor, 1))
    fail(ErrorCode::Format, "dataset: record count exceeds file size");
  d.samples.resize(count);
  for (auto& s : d.samples) {
    const std::uint32_t ntok = r.u32();
    if (ntok > r.remaining() / 4) fail(ErrorCode::Format, "dataset: truncated record");
    for (std::uint32_t i = 0; i < ntok; ++i) {
      const std::uint32_t id = r.u32();
      if (id >= d.header.vocab_size) fail(ErrorCode::Format, "dataset: token outside vocabulary");
      s.prompt.content_tokens.push_back(id);
    }
    s.meta.f0 = r.f64();
    s.meta.tempo_period = r.u32();
    s.meta.motif = r.u32();
    s.meta.seed = r.u64();
    s.waveforms.assign(d.header.tracks, Waveform(d.header.length));
    for (auto& track : s.waveforms)
      for (double& v : track) v = r.f32();
  }
  r.expect_done();
  return d;
}

void write_dataset(const Dataset& dataset, const std::filesystem::path& path) {
  binio::write_file(path, serialize_dataset(dataset));
}

Dataset read_dataset(const std::filesystem::path& path) {
  return deserialize_dataset(binio::read_file(path));
}

Dataset make_dataset(const DatasetConfig& config, std::vector<StemSample> samples) {
  Dataset d;
  d.header.tracks = DatasetConfig::kTracks;
  d.header.sample_rate = config.sample_rate;
  d.header.length = static_cast<std::uint32_t>(config.segment_length);
  d.header.vocab_size = static_cast<std::uint32_t>(config.vocabulary().size());
  d.samples = std::move(samples);
  return d;
}

}  // namespace stemforge::data
