// Copyright 2026 The StemForge Authors
// SPDX-License-Identifier: Apache-2.0

#include <cmath>
#include <complex>
#include <filesystem>
#include <numbers>

#include "doctest.h"
#include "stemforge/binio.hpp"
#include "stemforge/data.hpp"
#include "stemforge/error.hpp"
#include "stemforge/eval.hpp"
#include "stemforge/rng.hpp"

using namespace stemforge;
using namespace stemforge::data;

namespace {

// Direct O(N^2) DFT magnitude, independent of FFTW.
std::vector<double> naive_magnitude(const std::vector<double>& x) {
  const std::size_t n = x.size();
  std::vector<double> mag(n / 2 + 1);
  for (std::size_t k = 0; k <= n / 2; ++k) {
    std::complex<double> acc = 0.0;
    for (std::size_t t = 0; t < n; ++t)
      acc += x[t] * std::polar(1.0, -2.0 * std::numbers::pi * static_cast<double>(k * t % n) /
                                        static_cast<double>(n));
    mag[k] = std::abs(acc);
  }
  return mag;
}

std::size_t naive_argmax(const std::vector<double>& mag) {
  std::size_t best = 1;
  for (std::size_t k = 2; k < mag.size(); ++k)
    if (mag[k] > mag[best]) best = k;
  return best;
}

std::filesystem::path temp_path(const std::string& name) {
  return std::filesystem::temp_directory_path() / ("stemforge_test_" + name);
}

}  // namespace

TEST_CASE("config parsing") {
  const auto c = DatasetConfig::parse(
      "# desk set\n"
      "sample_rate = 8000\n"
      "num_samples = 3\n"
      "seed = 9\n"
      "f0_buckets = 100, 150.5\n"
      "tempo_buckets = 300,400\n"
      "motif_count = 5\n"
      "frame_size = 16\n"
      "codec_kind = ortho\n"
      "target_rms = 0.2   # louder\n");
  CHECK(c.sample_rate == 8000);
  CHECK(c.num_samples == 3);
  CHECK(c.seed == 9);
  CHECK(c.f0_buckets == std::vector<double>{100.0, 150.5});
  CHECK(c.tempo_buckets == std::vector<std::uint32_t>{300, 400});
  CHECK(c.motif_count == 5);
  CHECK(c.frame_size == 16);
  CHECK(c.codec_kind == CodecKind::OrthoLinear);
  CHECK(c.target_rms == 0.2);
  CHECK(DatasetConfig::parse(c.to_text()).to_text() == c.to_text());
  CHECK_THROWS_AS(DatasetConfig::parse("colour = red\n"), Error);
  CHECK_THROWS_AS(DatasetConfig::parse("sample_rate = fast\n"), Error);
  CHECK_THROWS_AS(DatasetConfig::parse("frame_size = 30\n"), Error);
  CHECK_THROWS_AS(DatasetConfig::parse("f0_buckets = 900\n"), Error);  // 3 f0 above Nyquist
  CHECK_THROWS_AS(DatasetConfig::parse("just words\n"), Error);
}

TEST_CASE("generation is deterministic and in range") {
  DatasetConfig c;
  const auto a = generate_sample(c, 17);
  const auto b = generate_sample(c, 17);
  CHECK(a == b);
  CHECK_FALSE(a == generate_sample(c, 18));
  REQUIRE(a.waveforms.size() == 4);
  for (const auto& t : a.waveforms) {
    CHECK(t.size() == c.segment_length);
    for (double v : t) {
      CHECK(v >= -1.0);
      CHECK(v <= 1.0);
      CHECK(static_cast<double>(static_cast<float>(v)) == v);
    }
    CHECK(rms(t) == doctest::Approx(c.target_rms).epsilon(1e-6));
  }
  CHECK(a.prompt.content_tokens.size() == 3);
  c.num_samples = 6;
  const auto set1 = synthesize(c);
  const auto set2 = synthesize(c);
  CHECK(set1 == set2);
  CHECK(set1[2] == generate_sample(c, c.seed + 2));
}

TEST_CASE("stems have their constructed spectra") {
  // f0 on exact DFT bins: 32 bins * 4000 / 2048 = 62.5 Hz
  DatasetConfig c;
  c.f0_buckets = {62.5};
  const auto s = generate_sample(c, 3);
  const auto bass = naive_magnitude(s.waveforms[0]);
  CHECK(naive_argmax(bass) == 32);
  const auto inst = naive_magnitude(s.waveforms[2]);
  CHECK(naive_argmax(inst) == 64);
  CHECK(inst[64] / inst[96] == doctest::Approx(0.6 / 0.4).epsilon(1e-5));

  // off-bin f0: the bass peak is the bin nearest f0
  DatasetConfig d;
  for (std::uint64_t seed = 1; seed <= 12; ++seed) {
    const auto t = generate_sample(d, seed);
    const double bin = t.meta.f0 * d.segment_length / d.sample_rate;
    const auto mag = naive_magnitude(t.waveforms[0]);
    CHECK(naive_argmax(mag) == static_cast<std::size_t>(std::lround(bin)));
    CHECK(eval::dominant_bin(t.waveforms[0]) == naive_argmax(mag));
  }
}

TEST_CASE("every synthetic sample is coherent by construction") {
  DatasetConfig c;
  c.num_samples = 300;
  c.f0_jitter = 0.03;
  for (const auto& s : synthesize(c)) {
    const auto r = eval::coherence_eval(s.waveforms, c.sample_rate, s.meta);
    INFO("seed " << s.meta.seed << " f0 " << s.meta.f0 << " motif " << s.meta.motif);
    CHECK(r.instrument.pass);
    CHECK(r.melody.pass);
    CHECK(r.drums.pass);
  }
}

TEST_CASE("normalize_loudness") {
  StemSample s;
  SUBCASE("scales to the target") {
    s.waveforms = {{0.5, -0.5, 0.5, -0.5}};
    const auto r = normalize_loudness(s, 0.25);
    for (std::size_t i = 0; i < 4; ++i) CHECK(r.sample.waveforms[0][i] == s.waveforms[0][i] * 0.5);
    CHECK(r.clipped == 0);
  }
  SUBCASE("already at target") {
    s.waveforms = {{0.1, -0.1, 0.1, -0.1}};
    const auto r = normalize_loudness(s, 0.1);
    for (std::size_t i = 0; i < 4; ++i)
      CHECK(std::abs(r.sample.waveforms[0][i] - s.waveforms[0][i]) <= 1e-9);
  }
  SUBCASE("sine of amplitude a") {
    const double a = 0.8, target = 0.1;
    Waveform w(400);
    for (std::size_t n = 0; n < w.size(); ++n)
      w[n] = a * std::sin(2.0 * std::numbers::pi * 5.0 * static_cast<double>(n) / 400.0);
    s.waveforms = {w};
    const auto r = normalize_loudness(s, target);
    const double scale = target * std::sqrt(2.0) / a;
    for (std::size_t n = 0; n < w.size(); ++n)
      CHECK(r.sample.waveforms[0][n] == doctest::Approx(w[n] * scale).epsilon(1e-12));
    CHECK(std::abs(rms(r.sample.waveforms[0]) - target) <= 1e-9);
  }
  SUBCASE("clipping is counted") {
    s.waveforms = {{1.0, 0.0, 0.0, 0.0}};  // rms 0.5; target 0.9 pushes the peak to 1.8
    const auto r = normalize_loudness(s, 0.9);
    CHECK(r.clipped == 1);
    CHECK(r.sample.waveforms[0][0] == 1.0);
  }
  SUBCASE("silent track") {
    s.waveforms = {{0.1, 0.2}, {0.0, 0.0}};
    CHECK_THROWS_AS(normalize_loudness(s, 0.1), Error);
  }
}

TEST_CASE("render_mix") {
  const Waveform w{0.3, -0.1, 0.2, 0.4};
  const auto mix = render_mix({w, w, w, w}, 0.1);
  const double scale = 0.1 / rms(w);
  for (std::size_t i = 0; i < w.size(); ++i) CHECK(mix[i] == doctest::Approx(w[i] * scale));
  const auto s = generate_sample(DatasetConfig{}, 5);
  CHECK(std::abs(rms(render_mix(s.waveforms, 0.1)) - 0.1) <= 1e-9);
  CHECK_THROWS_AS(render_mix({{0.0, 0.0}}, 0.1), Error);
}

TEST_CASE("codecs are exactly invertible") {
  Rng rng(21);
  for (auto kind : {CodecKind::IdentityFrames, CodecKind::OrthoLinear}) {
    const Codec codec(kind, 32, 4);
    const auto& b = codec.basis();
    for (std::size_t i = 0; i < 32; ++i)
      for (std::size_t j = 0; j < 32; ++j) {
        double dot = 0.0;
        for (std::size_t r = 0; r < 32; ++r) dot += b[r * 32 + i] * b[r * 32 + j];
        CHECK(std::abs(dot - (i == j ? 1.0 : 0.0)) <= 1e-10);
      }
    double worst = 0.0, worst_norm = 0.0;
    for (int trial = 0; trial < 1000; ++trial) {
      Waveform x(256);
      rng.fill_normal(x);
      const auto z = codec.encode(x);
      const auto y = codec.decode(z);
      for (std::size_t i = 0; i < x.size(); ++i) worst = std::max(worst, std::abs(x[i] - y[i]));
      for (std::size_t s = 0; s < 8; ++s) {
        double nx = 0.0, nz = 0.0;
        for (std::size_t j = 0; j < 32; ++j) {
          nx += x[s * 32 + j] * x[s * 32 + j];
          nz += z[j * 8 + s] * z[j * 8 + s];
        }
        worst_norm = std::max(worst_norm, std::abs(std::sqrt(nx) - std::sqrt(nz)));
      }
    }
    CHECK(worst < 1e-10);
    CHECK(worst_norm < 1e-10);
    const auto zero = codec.encode(Waveform(64, 0.0));
    for (double v : zero) CHECK(v == 0.0);
    CHECK_THROWS_AS(codec.encode(Waveform(65, 0.0)), Error);
  }
  CHECK(Codec(CodecKind::OrthoLinear, 8, 1).basis() == Codec(CodecKind::OrthoLinear, 8, 1).basis());
  CHECK_FALSE(Codec(CodecKind::OrthoLinear, 8, 1).basis() ==
              Codec(CodecKind::OrthoLinear, 8, 2).basis());
}

TEST_CASE("identity codec layout and latent scaling") {
  const Codec codec(CodecKind::IdentityFrames, 4);
  Waveform x(12);
  for (std::size_t i = 0; i < x.size(); ++i) x[i] = static_cast<double>(i);
  const auto z = codec.encode(x);  // 4 x 3: z[d][s] = x[s * 4 + d]
  CHECK(z[0 * 3 + 1] == 4.0);
  CHECK(z[3 * 3 + 2] == 11.0);
  const auto lat = encode_tracks({x, x}, codec, 10.0);
  CHECK(lat.tracks() == 2);
  CHECK(lat.channels() == 4);
  CHECK(lat.frames() == 3);
  CHECK(lat.at(1, 3, 2) == 110.0);
  const auto back = decode_tracks(lat, codec, 10.0);
  for (std::size_t i = 0; i < x.size(); ++i) CHECK(std::abs(back[1][i] - x[i]) <= 1e-12);
}

TEST_CASE("dataset container round trip and corruption") {
  DatasetConfig c;
  c.num_samples = 3;
  c.segment_length = 256;
  c.tempo_buckets = {64, 100};
  c.frame_size = 16;
  const auto d = make_dataset(c, synthesize(c));
  const auto bytes = serialize_dataset(d);
  CHECK(bytes[0] == 'S');
  CHECK(bytes[3] == 'M');
  CHECK(deserialize_dataset(bytes) == d);
  CHECK(serialize_dataset(deserialize_dataset(bytes)) == bytes);

  const auto path = temp_path("dataset.stem");
  write_dataset(d, path);
  CHECK(read_dataset(path) == d);
  std::filesystem::remove(path);

  auto corrupt = bytes;
  corrupt[corrupt.size() / 2] ^= 0x40;
  CHECK_THROWS_WITH_AS(deserialize_dataset(corrupt), doctest::Contains("CRC"), Error);
  try {
    deserialize_dataset(corrupt);
  } catch (const Error& e) {
    CHECK(e.code() == ErrorCode::Format);
  }

  auto bad_magic = bytes;
  bad_magic[0] = 'X';
  binio::Writer resealed;
  resealed.bytes(std::span(bad_magic).first(bad_magic.size() - 4));
  resealed.seal();
  CHECK_THROWS_WITH_AS(deserialize_dataset(resealed.buffer()), doctest::Contains("magic"), Error);

  // valid CRC over a file whose record is cut short
  binio::Writer truncated;
  truncated.bytes(std::span(bytes).first(bytes.size() - 100));
  truncated.seal();
  CHECK_THROWS_AS(deserialize_dataset(truncated.buffer()), Error);

  const auto empty = make_dataset(c, {});
  CHECK(deserialize_dataset(serialize_dataset(empty)) == empty);
  CHECK(deserialize_dataset(serialize_dataset(empty)).samples.empty());
  CHECK_THROWS_AS(read_dataset(temp_path("does_not_exist")), Error);
}

TEST_CASE("motif ratios") {
  CHECK(motif_ratios(0) == std::vector<double>{1.0, 1.0, 1.0, 1.0});
  CHECK(motif_ratios(5) == std::vector<double>{1.5, 1.25, 1.0, 1.0});
  CHECK(motif_ratios(80) == std::vector<double>{1.5, 1.5, 1.5, 1.5});
}
