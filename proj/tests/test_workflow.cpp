// Copyright 2026 The StemForge Authors
// SPDX-License-Identifier: Apache-2.0

#include <cmath>
#include <cstring>
#include <filesystem>
#include <future>
#include <set>
#include <thread>

#include "doctest.h"
#include "httplib.h"
#include "json.hpp"
#include "stemforge/binio.hpp"
#include "stemforge/error.hpp"
#include "stemforge/workflow.hpp"

using namespace stemforge;
using namespace stemforge::workflow;
using nlohmann::json;

namespace {

data::DatasetConfig small_data() {
  data::DatasetConfig c;
  c.segment_length = 256;
  c.frame_size = 16;
  c.tempo_buckets = {64, 100};
  return c;
}

std::shared_ptr<const Engine> make_engine(std::uint64_t seed = 5) {
  const auto d = small_data();
  nn::DenoiserConfig m;
  m.tracks = 4;
  m.latent_channels = d.frame_size;
  m.frames = d.latent_frames();
  m.hidden = 8;
  m.depth = 1;
  m.time_embed = 4;
  m.vocab = d.vocabulary().size();
  m.prompt_embed = 4;
  m.cond_width = 8;
  const nn::UNet1d model(m);
  Rng rng(seed);
  auto params = model.init_params(rng);
  for (std::size_t i = 0; i < params.size(); ++i)
    for (double& v : params[i].values()) v += 0.05 * rng.normal();
  return std::make_shared<const Engine>(nn::Checkpoint{m, {10, 1e-3, 0.2}, 10.0, params}, d);
}

std::vector<std::uint32_t> content_prompt() {
  const auto v = small_data().vocabulary();
  return v.prompt(1, 2, 1, 3).content_tokens;
}

Waveform sine(double cycles, double amp = 0.3) {
  Waveform w(small_data().segment_length);
  for (std::size_t n = 0; n < w.size(); ++n)
    w[n] = amp * std::sin(2.0 * M_PI * cycles * static_cast<double>(n) / static_cast<double>(w.size()));
  return w;
}

template <typename F>
ErrorCode code_of(F&& f) {
  try {
    f();
  } catch (const Error& e) {
    return e.code();
  }
  FAIL("expected an error");
  return ErrorCode::Tolerance;
}

struct TempDir {
  std::filesystem::path path;
  explicit TempDir(const std::string& name)
      : path(std::filesystem::temp_directory_path() / name) {
    std::filesystem::remove_all(path);
  }
  ~TempDir() { std::filesystem::remove_all(path); }
};

// Header fields of a canonical 44-byte PCM WAVE file.
void check_riff(const std::string& b, std::size_t samples, std::uint32_t rate) {
  REQUIRE(b.size() == 44 + 2 * samples);
  auto u32 = [&](std::size_t at) {
    std::uint32_t v;
    std::memcpy(&v, b.data() + at, 4);
    return v;
  };
  auto u16 = [&](std::size_t at) {
    std::uint16_t v;
    std::memcpy(&v, b.data() + at, 2);
    return v;
  };
  CHECK(b.compare(0, 4, "RIFF") == 0);
  CHECK(u32(4) == b.size() - 8);
  CHECK(b.compare(8, 4, "WAVE") == 0);
  CHECK(b.compare(12, 4, "fmt ") == 0);
  CHECK(u32(16) == 16);
  CHECK(u16(20) == 1);
  CHECK(u16(22) == 1);
  CHECK(u32(24) == rate);
  CHECK(u32(28) == rate * 2);
  CHECK(u16(32) == 2);
  CHECK(u16(34) == 16);
  CHECK(b.compare(36, 4, "data") == 0);
  CHECK(u32(40) == 2 * samples);
}

}  // namespace

TEST_CASE("create session") {
  SessionService svc(make_engine());
  SUBCASE("no uploads") {
    const auto id = svc.create_session(content_prompt());
    const auto s = svc.get(id);
    CHECK(s.locked.empty());
    CHECK(s.candidates.empty());
    CHECK(s.status == SessionStatus::Idle);
    CHECK(s.prompt == content_prompt());
  }
  SUBCASE("upload track 2") {
    const auto id = svc.create_session(content_prompt(), {{2, sine(8)}});
    const auto s = svc.get(id);
    REQUIRE(s.locked.size() == 1);
    CHECK(s.locked.at(2).provenance == Provenance::Uploaded);
  }
  SUBCASE("ten thousand distinct ids") {
    std::set<std::string> ids;
    for (int i = 0; i < 10000; ++i) ids.insert(svc.create_session({}));
    CHECK(ids.size() == 10000);
  }
  SUBCASE("invalid input") {
    const auto v = small_data().vocabulary();
    CHECK(code_of([&] { svc.create_session({v.task_token(1)}); }) == ErrorCode::InvalidInput);
    CHECK(code_of([&] { svc.create_session({v.null_token()}); }) == ErrorCode::InvalidInput);
    CHECK(code_of([&] { svc.create_session({static_cast<std::uint32_t>(v.size())}); }) ==
          ErrorCode::InvalidInput);
    Waveform loud = sine(4);
    loud[3] = 1.5;
    CHECK(code_of([&] { svc.create_session({}, {{0, loud}}); }) == ErrorCode::InvalidInput);
    CHECK(code_of([&] { svc.create_session({}, {{0, Waveform(10, 0.0)}}); }) ==
          ErrorCode::InvalidInput);
    CHECK(code_of([&] { svc.create_session({}, {{4, sine(4)}}); }) == ErrorCode::InvalidInput);
    CHECK(code_of([&] { svc.create_session({}, {{1, sine(4)}, {1, sine(5)}}); }) ==
          ErrorCode::InvalidInput);
    CHECK(svc.session_ids().empty());
  }
  SUBCASE("unknown session") {
    CHECK(code_of([&] { svc.get("nope"); }) == ErrorCode::NotFound);
  }
}

TEST_CASE("generation") {
  SessionService svc(make_engine());
  SUBCASE("joint when nothing is locked") {
    const auto id = svc.create_session(content_prompt());
    const auto c = svc.generate(id, 3, 7.0);
    CHECK(c.targets == 0b1111);
    REQUIRE(c.tracks.size() == 4);
    for (const auto& w : c.tracks) {
      CHECK(w.size() == 256);
      for (double v : w) CHECK(std::isfinite(v));
    }
    CHECK(svc.get(id).locked.empty());
    CHECK(svc.get(id).candidates.size() == 1);
  }
  SUBCASE("conditional generation is deterministic and keeps locked bytes") {
    const auto id = svc.create_session(content_prompt(), {{1, sine(8)}});
    const auto locked = svc.get(id).locked.at(1).samples;
    const auto a = svc.generate(id, 11, 7.0);
    const auto b = svc.generate(id, 11, 7.0);
    CHECK(a.targets == 0b1101);
    CHECK(a.tracks == b.tracks);
    CHECK(a.id != b.id);
    CHECK(std::memcmp(a.tracks[1].data(), locked.data(), locked.size() * sizeof(double)) == 0);
    CHECK(svc.get(id).locked.at(1).samples == locked);
    const auto c = svc.generate(id, 12, 7.0);
    CHECK(c.tracks[0] != a.tracks[0]);
  }
  SUBCASE("locked tracks are immutable across many rounds") {
    const auto id = svc.create_session(content_prompt(), {{0, sine(4)}, {3, sine(12)}});
    const auto before = svc.get(id).locked;
    for (std::uint64_t seed = 0; seed < 5; ++seed) {
      const auto c = svc.generate(id, seed, static_cast<double>(seed));
      CHECK(c.tracks[0] == before.at(0).samples);
      CHECK(c.tracks[3] == before.at(3).samples);
      CHECK(svc.get(id).locked == before);
    }
  }
  SUBCASE("everything locked leaves nothing to generate") {
    const auto id =
        svc.create_session({}, {{0, sine(1)}, {1, sine(2)}, {2, sine(3)}, {3, sine(4)}});
    CHECK(code_of([&] { svc.generate(id, 1, 7.0); }) == ErrorCode::InvalidInput);
    CHECK(svc.get(id).status == SessionStatus::Idle);
  }
  SUBCASE("bad lambda") {
    const auto id = svc.create_session({});
    CHECK(code_of([&] { svc.generate(id, 1, -1.0); }) == ErrorCode::InvalidInput);
    CHECK(code_of([&] { svc.generate(id, 1, std::nan("")); }) == ErrorCode::InvalidInput);
  }
}

TEST_CASE("select, unlock and upload") {
  SessionService svc(make_engine());
  const auto id = svc.create_session(content_prompt());
  const auto joint = svc.generate(id, 1, 7.0);

  SUBCASE("select two of four") {
    const auto s = svc.select(id, joint.id, {0, 2});
    CHECK(s.locked.size() == 2);
    CHECK(s.locked.at(0).provenance == Provenance::Generated);
    CHECK(s.locked.at(0).candidate == joint.id);
    CHECK(s.locked.at(2).samples == joint.tracks[2]);
  }
  SUBCASE("stale candidate leaves the session unchanged") {
    const auto before = svc.get(id);
    CHECK(code_of([&] { svc.select(id, "c99", {0}); }) == ErrorCode::NotFound);
    CHECK(svc.get(id) == before);
  }
  SUBCASE("index conflicts") {
    svc.select(id, joint.id, {1});
    const auto before = svc.get(id);
    CHECK(code_of([&] { svc.select(id, joint.id, {0, 1}); }) == ErrorCode::Conflict);
    CHECK(code_of([&] { svc.select(id, joint.id, {2, 2}); }) == ErrorCode::InvalidInput);
    CHECK(code_of([&] { svc.select(id, joint.id, {4}); }) == ErrorCode::InvalidInput);
    CHECK(code_of([&] { svc.select(id, joint.id, {}); }) == ErrorCode::InvalidInput);
    CHECK(svc.get(id) == before);
  }
  SUBCASE("finishing the set blocks further generation") {
    svc.select(id, joint.id, {0});
    const auto cond = svc.generate(id, 2, 7.0);
    CHECK(cond.targets == 0b1110);
    const auto s = svc.select(id, cond.id, {1, 2, 3});
    CHECK(s.locked.size() == 4);
    CHECK(code_of([&] { svc.generate(id, 3, 7.0); }) == ErrorCode::InvalidInput);
  }
  SUBCASE("unlock makes a track a target again") {
    svc.select(id, joint.id, {0, 1});
    svc.unlock(id, 1);
    CHECK(svc.generate(id, 4, 7.0).targets == 0b1110);
    CHECK(code_of([&] { svc.unlock(id, 1); }) == ErrorCode::InvalidInput);
    CHECK(code_of([&] { svc.unlock(id, 9); }) == ErrorCode::InvalidInput);
  }
  SUBCASE("upload over a generated track") {
    svc.select(id, joint.id, {3});
    const auto s = svc.upload(id, 3, sine(5));
    CHECK(s.locked.at(3).provenance == Provenance::Uploaded);
    CHECK(s.locked.at(3).candidate.empty());
    CHECK(code_of([&] { svc.upload(id, 3, Waveform(100, 0.0)); }) == ErrorCode::InvalidInput);
    CHECK(svc.get(id).locked.at(3).samples == s.locked.at(3).samples);
  }
  SUBCASE("uploads are stored as float32 values") {
    Waveform w = sine(3);
    w[5] = 0.1;
    const auto s = svc.upload(id, 0, w);
    CHECK(s.locked.at(0).samples[5] == static_cast<double>(0.1f));
  }
}

TEST_CASE("mix rendering") {
  SessionService svc(make_engine());
  SUBCASE("identical stems") {
    const auto w = sine(6, 0.5);
    const auto id = svc.create_session({}, {{0, w}, {1, w}, {2, w}, {3, w}});
    const auto mix = svc.render_mix(id);
    const auto stored = svc.get(id).locked.at(0).samples;
    const double scale = 0.1 / data::rms(stored);
    for (std::size_t n = 0; n < mix.size(); ++n) CHECK(mix[n] == doctest::Approx(stored[n] * scale));
  }
  SUBCASE("dataset stems hit the target RMS") {
    const auto sample = data::generate_sample(small_data(), 42);
    std::vector<Upload> ups;
    for (std::size_t k = 0; k < 4; ++k) ups.push_back({k, sample.waveforms[k]});
    const auto id = svc.create_session(sample.prompt.content_tokens, ups);
    const auto mix = svc.render_mix(id);
    CHECK(std::abs(data::rms(mix) - 0.1) < 1e-9);
    CHECK(svc.render_mix(id) == mix);
  }
  SUBCASE("incomplete session") {
    const auto id = svc.create_session({}, {{0, sine(2)}});
    CHECK(code_of([&] { svc.render_mix(id); }) == ErrorCode::IncompleteSession);
  }
}

TEST_CASE("scripted co-composition terminates") {
  SessionService svc(make_engine());
  for (std::size_t per_round : {1u, 2u, 4u}) {
    const auto id = svc.create_session(content_prompt());
    int joint_rounds = 0, cond_rounds = 0;
    std::uint64_t seed = 100;
    while (svc.get(id).locked.empty()) {
      const auto c = svc.generate(id, seed++, 7.0);
      CHECK(c.targets == 0b1111);
      ++joint_rounds;
      std::vector<std::size_t> pick;
      for (std::size_t k = 0; k < per_round; ++k) pick.push_back(k);
      svc.select(id, c.id, pick);
    }
    while (svc.get(id).locked.size() < 4) {
      const auto before = svc.get(id).locked;
      const auto c = svc.generate(id, seed++, 7.0);
      ++cond_rounds;
      for (const auto& [k, t] : before) CHECK(c.tracks[k] == t.samples);
      std::vector<std::size_t> pick;
      for (std::size_t k = 0; k < 4 && pick.size() < per_round; ++k)
        if (c.targets >> k & 1u) pick.push_back(k);
      svc.select(id, c.id, pick);
    }
    CHECK(joint_rounds == 1);
    CHECK(cond_rounds <= 3);
    CHECK(cond_rounds == static_cast<int>((4 - per_round + per_round - 1) / per_round));
    CHECK(svc.render_mix(id).size() == 256);
  }
}

TEST_CASE("single flight") {
  std::promise<void> entered, release;
  auto entered_f = entered.get_future();
  auto release_f = release.get_future().share();
  std::atomic<int> calls{0};
  ServiceOptions opts;
  opts.before_sampling = [&](const std::string&) {
    if (calls++ == 0) {
      entered.set_value();
      release_f.wait();
    }
  };
  SessionService svc(make_engine(), opts);
  const auto id = svc.create_session(content_prompt());
  auto first = std::async(std::launch::async, [&] { return svc.generate(id, 1, 7.0); });
  entered_f.wait();
  CHECK(svc.get(id).status == SessionStatus::Generating);
  int conflicts = 0;
  std::vector<std::thread> others;
  std::atomic<int> other_conflicts{0};
  for (int i = 0; i < 3; ++i)
    others.emplace_back([&] {
      try {
        svc.generate(id, 2, 7.0);
      } catch (const Error& e) {
        if (e.code() == ErrorCode::Conflict) ++other_conflicts;
      }
    });
  for (auto& t : others) t.join();
  conflicts = other_conflicts.load();
  CHECK(code_of([&] { svc.select(id, "c1", {0}); }) == ErrorCode::Conflict);
  CHECK(code_of([&] { svc.upload(id, 0, sine(2)); }) == ErrorCode::Conflict);
  release.set_value();
  const auto c = first.get();
  CHECK(conflicts == 3);
  CHECK(c.id == "c1");
  CHECK(svc.get(id).status == SessionStatus::Idle);
  CHECK(svc.get(id).candidates.size() == 1);
}

TEST_CASE("background generation") {
  ServiceOptions opts;
  opts.async_generation = true;
  SessionService svc(make_engine(), opts);
  const auto id = svc.create_session(content_prompt());
  const auto cid = svc.generate_async(id, 8, 7.0);
  svc.wait_idle();
  const auto s = svc.get(id);
  REQUIRE(s.find_candidate(cid) != nullptr);
  CHECK(s.status == SessionStatus::Idle);

  SessionService sync(make_engine());
  const auto id2 = sync.create_session(content_prompt());
  CHECK(sync.generate(id2, 8, 7.0).tracks == s.find_candidate(cid)->tracks);
}

TEST_CASE("session persistence") {
  SUBCASE("bytes round trip") {
    SessionService svc(make_engine());
    const auto id = svc.create_session(content_prompt(), {{2, sine(7)}});
    const auto c = svc.generate(id, 5, 3.25);
    svc.select(id, c.id, {0});
    svc.generate(id, 6, 7.0);
    const auto s = svc.get(id);
    const auto bytes = serialize_session(s);
    CHECK(deserialize_session(bytes) == s);
    CHECK(serialize_session(deserialize_session(bytes)) == bytes);

    auto bad = bytes;
    bad[bad.size() - 20] ^= 0x01;
    CHECK(code_of([&] { deserialize_session(bad); }) == ErrorCode::Format);
    CHECK(code_of([&] {
            deserialize_session(std::span<const std::uint8_t>(bytes).first(10));
          }) == ErrorCode::Format);
  }
  SUBCASE("session directory survives a restart") {
    TempDir dir("stemforge_sessions_test");
    ServiceOptions opts;
    opts.session_dir = dir.path;
    std::string id;
    Session saved;
    {
      SessionService svc(make_engine(), opts);
      id = svc.create_session(content_prompt());
      const auto c = svc.generate(id, 5, 7.0);
      svc.select(id, c.id, {1, 3});
      saved = svc.get(id);
    }
    SessionService again(make_engine(), opts);
    CHECK(again.get(id) == saved);
    const auto next = again.create_session({});
    CHECK(next != id);
    CHECK(again.session_ids().size() == 2);
  }
}

TEST_CASE("WAV encoding") {
  CHECK(to_pcm16(0.0) == 0);
  CHECK(to_pcm16(1.0) == 32767);
  CHECK(to_pcm16(-1.0) == -32767);
  CHECK(to_pcm16(0.5) == 16384);    // 16383.5 rounds away from zero
  CHECK(to_pcm16(-0.5) == -16384);
  CHECK(to_pcm16(3.0) == 32767);
  CHECK(to_pcm16(-3.0) == -32768);
  const Waveform w{0.0, 0.5, -0.5, 1.0};
  const auto b = encode_wav(w, 4000);
  check_riff(std::string(b.begin(), b.end()), 4, 4000);
  CHECK(b[44 + 2] == 0x00);
  CHECK(b[44 + 3] == 0x40);  // 16384 little-endian
}

TEST_CASE("HTTP API") {
  SessionService svc(make_engine());
  httplib::Server server;
  install_routes(server, svc);
  const int port = server.bind_to_any_port("127.0.0.1");
  REQUIRE(port > 0);
  std::thread loop([&] { server.listen_after_bind(); });
  server.wait_until_ready();
  httplib::Client cli("127.0.0.1", port);

  auto post = [&](const std::string& path, const json& body) {
    return cli.Post(path, body.dump(), "application/json");
  };

  auto r = post("/sessions", {{"prompt_tokens", content_prompt()}, {"uploads", json::array()}});
  REQUIRE(r);
  CHECK(r->status == 201);
  const std::string id = json::parse(r->body)["session_id"];
  const std::string base = "/sessions/" + id;

  r = post(base + "/generate", {{"seed", 9}, {"lambda", 7.0}});
  REQUIRE(r);
  REQUIRE(r->status == 200);
  const auto cand = json::parse(r->body);
  CHECK(cand["tracks"].size() == 4);
  CHECK(cand["targets"].size() == 4);
  const std::string cid = cand["candidate_id"];

  const std::string ref = cand["tracks"][0]["samples_ref"];
  auto wav = cli.Get(ref);
  REQUIRE(wav);
  CHECK(wav->status == 200);
  CHECK(wav->get_header_value("Content-Type") == "audio/wav");
  check_riff(wav->body, 256, 4000);

  r = post(base + "/select", {{"candidate_id", cid}, {"tracks", {0, 1}}});
  REQUIRE(r);
  CHECK(r->status == 200);
  CHECK(json::parse(r->body)["locked"].size() == 2);

  auto t0 = cli.Get(base + "/tracks/0.wav");
  auto t0b = cli.Get(base + "/tracks/0.wav");
  REQUIRE(t0);
  REQUIRE(t0b);
  check_riff(t0->body, 256, 4000);
  CHECK(t0->body == t0b->body);

  SUBCASE("error mapping") {
    auto e = cli.Get("/sessions/missing");
    CHECK(e->status == 404);
    CHECK(json::parse(e->body)["code"] == "not_found");
    e = cli.Get(base + "/tracks/2.wav");
    CHECK(e->status == 404);
    e = cli.Get(base + "/mix.wav");
    CHECK(e->status == 422);
    CHECK(json::parse(e->body)["code"] == "incomplete_session");
    e = post(base + "/select", {{"candidate_id", cid}, {"tracks", {1}}});
    CHECK(e->status == 409);
    CHECK(json::parse(e->body)["code"] == "conflict");
    e = cli.Post(base + "/generate", "{not json", "application/json");
    CHECK(e->status == 400);
    CHECK(json::parse(e->body)["code"] == "invalid_input");
    e = post(base + "/generate", {{"seed", -1}, {"lambda", 7}});
    CHECK(e->status == 400);
    e = post(base + "/generate", {{"lambda", 7}});
    CHECK(e->status == 400);
    e = post(base + "/upload", {{"track", 2}, {"samples", {0.1, 0.2}}});
    CHECK(e->status == 400);
    e = post(base + "/unlock", {{"track", 3}});
    CHECK(e->status == 400);
    e = post("/sessions", {{"prompt_tokens", {0}}});
    CHECK(e->status == 400);
  }
  SUBCASE("finish and download the mix") {
    r = post(base + "/generate", {{"seed", 10}, {"lambda", 7.0}});
    REQUIRE(r->status == 200);
    const std::string c2 = json::parse(r->body)["candidate_id"];
    CHECK(json::parse(r->body)["targets"] == json({2, 3}));
    r = post(base + "/upload", {{"track", 2}, {"samples", sine(3)}});
    CHECK(r->status == 200);
    r = post(base + "/select", {{"candidate_id", c2}, {"tracks", {3}}});
    CHECK(r->status == 200);
    const auto state = json::parse(cli.Get(base)->body);
    CHECK(state["locked"].size() == 4);
    CHECK(state["locked"][2]["provenance"] == "uploaded");
    CHECK(state["locked"][3]["provenance"] == "generated");
    auto m1 = cli.Get(base + "/mix.wav");
    auto m2 = cli.Get(base + "/mix.wav");
    REQUIRE(m1);
    CHECK(m1->status == 200);
    check_riff(m1->body, 256, 4000);
    CHECK(m1->body == m2->body);
    r = post(base + "/unlock", {{"track", 0}});
    CHECK(r->status == 200);
    CHECK(cli.Get(base + "/mix.wav")->status == 422);
  }

  server.stop();
  loop.join();
}

TEST_CASE("HTTP background generation") {
  ServiceOptions opts;
  opts.async_generation = true;
  SessionService svc(make_engine(), opts);
  httplib::Server server;
  install_routes(server, svc);
  const int port = server.bind_to_any_port("127.0.0.1");
  std::thread loop([&] { server.listen_after_bind(); });
  server.wait_until_ready();
  httplib::Client cli("127.0.0.1", port);
  auto r = cli.Post("/sessions", "{}", "application/json");
  const std::string id = json::parse(r->body)["session_id"];
  r = cli.Post("/sessions/" + id + "/generate", R"({"seed": 1, "lambda": 7})", "application/json");
  REQUIRE(r);
  CHECK(r->status == 202);
  const std::string cid = json::parse(r->body)["candidate_id"];
  svc.wait_idle();
  r = cli.Get("/sessions/" + id + "/candidates/" + cid);
  REQUIRE(r);
  CHECK(r->status == 200);
  CHECK(json::parse(r->body)["tracks"].size() == 4);
  server.stop();
  loop.join();
}
