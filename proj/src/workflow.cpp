// Copyright 2026 The StemForge Authors
// SPDX-License-Identifier: Apache-2.0

#include "stemforge/workflow.hpp"

#include <algorithm>
#include <cinttypes>
#include <cmath>
#include <cstdio>
#include <limits>

#include "json.hpp"
#include "stemforge/binio.hpp"

namespace stemforge::workflow {

using nlohmann::json;

namespace {

constexpr char kSessionFormat[] = "stemforge-session";
constexpr int kSessionVersion = 1;

Waveform to_float32(Waveform w) {
  for (double& v : w) v = static_cast<double>(static_cast<float>(v));
  return w;
}

Provenance parse_provenance(const std::string& s) {
  if (s == "generated") return Provenance::Generated;
  if (s == "uploaded") return Provenance::Uploaded;
  fail(ErrorCode::Format, "session: unknown provenance '" + s + "'");
}

nn::NamedTensor waveform_tensor(std::string name, const Waveform& w) {
  nn::NamedTensor t{std::move(name), {w.size()}, {}};
  t.data.reserve(w.size());
  for (double v : w) t.data.push_back(static_cast<float>(v));
  return t;
}

}  // namespace

const char* to_string(Provenance p) {
  return p == Provenance::Generated ? "generated" : "uploaded";
}

const char* to_string(SessionStatus s) { return s == SessionStatus::Idle ? "idle" : "generating"; }

const Candidate* Session::find_candidate(const std::string& cid) const {
  for (const auto& c : candidates)
    if (c.id == cid) return &c;
  return nullptr;
}

std::vector<std::uint8_t> serialize_session(const Session& s) {
  json h;
  h["format"] = kSessionFormat;
  h["version"] = kSessionVersion;
  h["id"] = s.id;
  h["prompt"] = s.prompt;
  h["next_candidate"] = s.next_candidate;
  h["last_error"] = s.last_error;
  h["locked"] = json::array();
  std::vector<nn::NamedTensor> tensors;
  for (const auto& [k, t] : s.locked) {
    h["locked"].push_back({{"track", k}, {"provenance", to_string(t.provenance)},
                           {"candidate", t.candidate}});
    tensors.push_back(waveform_tensor("locked." + std::to_string(k), t.samples));
  }
  h["candidates"] = json::array();
  for (std::size_t i = 0; i < s.candidates.size(); ++i) {
    const auto& c = s.candidates[i];
    h["candidates"].push_back({{"id", c.id},
                               {"seed", c.seed},
                               {"lambda", c.lambda},
                               {"targets", c.targets},
                               {"tracks", c.tracks.size()}});
    for (std::size_t k = 0; k < c.tracks.size(); ++k)
      tensors.push_back(
          waveform_tensor("cand." + std::to_string(i) + "." + std::to_string(k), c.tracks[k]));
  }
  const std::string header = h.dump();
  binio::Writer w;
  w.str(header);
  const auto body = nn::write_container(tensors);
  w.bytes(body);
  return w.take();
}

Session deserialize_session(std::span<const std::uint8_t> bytes) {
  if (bytes.size() < 4) fail(ErrorCode::Format, "session: truncated header");
  const std::uint32_t n = static_cast<std::uint32_t>(bytes[0]) |
                          static_cast<std::uint32_t>(bytes[1]) << 8 |
                          static_cast<std::uint32_t>(bytes[2]) << 16 |
                          static_cast<std::uint32_t>(bytes[3]) << 24;
  if (bytes.size() - 4 < n) fail(ErrorCode::Format, "session: truncated header");
  const auto tensors = nn::read_container(bytes.subspan(4 + n));
  std::map<std::string, const nn::NamedTensor*> by_name;
  for (const auto& t : tensors) by_name[t.name] = &t;
  auto waveform = [&](const std::string& name) {
    const auto it = by_name.find(name);
    if (it == by_name.end() || it->second->shape.size() != 1)
      fail(ErrorCode::Format, "session: missing waveform " + name);
    return Waveform(it->second->data.begin(), it->second->data.end());
  };

  Session s;
  try {
    const json h = json::parse(bytes.begin() + 4, bytes.begin() + 4 + n);
    if (h.at("format") != kSessionFormat || h.at("version") != kSessionVersion)
      fail(ErrorCode::Format, "session: unsupported header");
    s.id = h.at("id").get<std::string>();
    s.prompt = h.at("prompt").get<std::vector<std::uint32_t>>();
    s.next_candidate = h.at("next_candidate").get<std::uint64_t>();
    s.last_error = h.at("last_error").get<std::string>();
    for (const auto& l : h.at("locked")) {
      const auto k = l.at("track").get<std::size_t>();
      s.locked[k] = LockedTrack{waveform("locked." + std::to_string(k)),
                                parse_provenance(l.at("provenance").get<std::string>()),
                                l.at("candidate").get<std::string>()};
    }
    const auto& cands = h.at("candidates");
    for (std::size_t i = 0; i < cands.size(); ++i) {
      const auto& c = cands[i];
      Candidate cand{c.at("id").get<std::string>(), c.at("seed").get<std::uint64_t>(),
                     c.at("lambda").get<double>(), c.at("targets").get<TrackMask>(), {}};
      const auto tracks = c.at("tracks").get<std::size_t>();
      for (std::size_t k = 0; k < tracks; ++k)
        cand.tracks.push_back(waveform("cand." + std::to_string(i) + "." + std::to_string(k)));
      s.candidates.push_back(std::move(cand));
    }
  } catch (const json::exception& e) {
    fail(ErrorCode::Format, std::string("session: bad header: ") + e.what());
  }
  return s;
}

struct SessionService::Entry {
  mutable std::mutex mu;
  Session s;
};

SessionService::SessionService(std::shared_ptr<const Engine> engine, ServiceOptions options)
    : options_(std::move(options)), engine_(std::move(engine)), id_rng_(options_.id_seed) {
  require(engine_ != nullptr, "session service needs an engine");
  if (!options_.session_dir) return;
  std::filesystem::create_directories(*options_.session_dir);
  std::vector<std::filesystem::path> files;
  for (const auto& f : std::filesystem::directory_iterator(*options_.session_dir))
    if (f.path().extension() == ".sess") files.push_back(f.path());
  std::sort(files.begin(), files.end());
  for (const auto& f : files) {
    auto e = std::make_shared<Entry>();
    e->s = deserialize_session(binio::read_file(f));
    std::uint64_t n = 0;
    if (std::sscanf(e->s.id.c_str(), "s%" SCNu64 "-", &n) == 1) counter_ = std::max(counter_, n);
    sessions_[e->s.id] = std::move(e);
  }
}

SessionService::~SessionService() {
  wait_idle();
  std::vector<std::thread> jobs;
  {
    std::lock_guard lock(jobs_mu_);
    jobs.swap(jobs_);
  }
  for (auto& t : jobs) t.join();
}

void SessionService::wait_idle() {
  std::unique_lock lock(jobs_mu_);
  jobs_cv_.wait(lock, [&] { return jobs_running_ == 0; });
}

std::shared_ptr<const Engine> SessionService::engine() const {
  std::lock_guard lock(mu_);
  return engine_;
}

void SessionService::reload(std::shared_ptr<const Engine> engine) {
  require(engine != nullptr, "reload needs an engine");
  std::lock_guard lock(mu_);
  require(engine->tracks() == engine_->tracks() && engine->length() == engine_->length(),
          "reloaded engine must keep the track count and segment length");
  engine_ = std::move(engine);
}

std::shared_ptr<SessionService::Entry> SessionService::entry(const std::string& id) const {
  std::lock_guard lock(mu_);
  const auto it = sessions_.find(id);
  if (it == sessions_.end()) fail(ErrorCode::NotFound, "unknown session '" + id + "'");
  return it->second;
}

std::vector<std::string> SessionService::session_ids() const {
  std::lock_guard lock(mu_);
  std::vector<std::string> ids;
  for (const auto& [id, e] : sessions_) ids.push_back(id);
  return ids;
}

void SessionService::persist(const Session& s) const {
  if (!options_.session_dir) return;
  binio::write_file(*options_.session_dir / (s.id + ".sess"), serialize_session(s));
}

Waveform SessionService::validate_upload(std::size_t track, Waveform samples) const {
  const auto eng = engine();
  require(track < eng->tracks(), "track index " + std::to_string(track) + " out of range");
  require(samples.size() == eng->length(),
          "upload must have " + std::to_string(eng->length()) + " samples, got " +
              std::to_string(samples.size()));
  for (double v : samples)
    require(std::isfinite(v) && v >= -1.0 && v <= 1.0, "upload samples must lie in [-1, 1]");
  return to_float32(std::move(samples));
}

std::string SessionService::create_session(std::vector<std::uint32_t> prompt,
                                           std::vector<Upload> uploads) {
  const auto eng = engine();
  for (auto t : prompt)
    require(t < eng->vocab.size() && !eng->vocab.task_mask(t) && t != eng->vocab.null_token(),
            "prompt token " + std::to_string(t) + " is not a content token");
  Session s;
  s.prompt = std::move(prompt);
  for (auto& u : uploads) {
    require(!s.locked.contains(u.track), "track " + std::to_string(u.track) + " uploaded twice");
    s.locked[u.track] = LockedTrack{validate_upload(u.track, std::move(u.samples)),
                                    Provenance::Uploaded, ""};
  }
  auto e = std::make_shared<Entry>();
  {
    std::lock_guard lock(mu_);
    char buf[48];
    std::snprintf(buf, sizeof buf, "s%06" PRIu64 "-%08" PRIx64, ++counter_,
                  id_rng_.next_u64() & 0xffffffffu);
    s.id = buf;
    e->s = std::move(s);
    sessions_[e->s.id] = e;
  }
  std::lock_guard lock(e->mu);
  persist(e->s);
  return e->s.id;
}

Session SessionService::get(const std::string& id) const {
  const auto e = entry(id);
  std::lock_guard lock(e->mu);
  return e->s;
}

std::pair<std::shared_ptr<SessionService::Entry>, std::string> SessionService::begin_generation(
    const std::string& id) {
  const auto e = entry(id);
  const auto K = engine()->tracks();
  std::lock_guard lock(e->mu);
  if (e->s.status == SessionStatus::Generating)
    fail(ErrorCode::Conflict, "a generation is already running for session " + id);
  require(e->s.locked.size() < K, "every track is locked; nothing to generate");
  e->s.status = SessionStatus::Generating;
  return {e, "c" + std::to_string(e->s.next_candidate++)};
}

Candidate SessionService::run_generation(const std::shared_ptr<Entry>& e,
                                         std::shared_ptr<const Engine> eng,
                                         const std::string& cid, std::uint64_t seed,
                                         double lambda) {
  std::map<std::size_t, LockedTrack> locked;
  std::vector<std::uint32_t> content;
  std::string id;
  {
    std::lock_guard lock(e->mu);
    locked = e->s.locked;
    content = e->s.prompt;
    id = e->s.id;
  }
  try {
    if (options_.before_sampling) options_.before_sampling(id);
    const std::size_t K = eng->tracks();
    TrackMask locked_mask = 0;
    std::map<std::size_t, Waveform> given;
    for (const auto& [k, t] : locked) {
      locked_mask |= TrackMask{1} << k;
      given[k] = t.samples;
    }
    const TrackMask targets = full_mask(K) & ~locked_mask;
    const auto task = diffusion::TaskSpec::from_mask(K, targets, diffusion::TrackRole::Conditional);
    const auto waves = pipeline::generate(*eng, task, given, content, seed, lambda).tracks;

    Candidate c{cid, seed, lambda, targets, {}};
    for (std::size_t k = 0; k < K; ++k)
      c.tracks.push_back(targets >> k & 1u ? to_float32(waves[k]) : locked.at(k).samples);
    for (const auto& w : c.tracks)
      for (double v : w)
        if (!std::isfinite(v)) fail(ErrorCode::Numerical, "generation produced non-finite audio");

    std::lock_guard lock(e->mu);
    e->s.candidates.push_back(c);
    e->s.status = SessionStatus::Idle;
    e->s.last_error.clear();
    persist(e->s);
    return c;
  } catch (const std::exception& ex) {
    std::lock_guard lock(e->mu);
    e->s.status = SessionStatus::Idle;
    e->s.last_error = ex.what();
    throw;
  }
}

Candidate SessionService::generate(const std::string& id, std::uint64_t seed, double lambda) {
  require(std::isfinite(lambda) && lambda >= 0.0, "lambda must be a finite value >= 0");
  auto [e, cid] = begin_generation(id);
  return run_generation(e, engine(), cid, seed, lambda);
}

std::string SessionService::generate_async(const std::string& id, std::uint64_t seed,
                                           double lambda) {
  require(std::isfinite(lambda) && lambda >= 0.0, "lambda must be a finite value >= 0");
  auto [e, cid] = begin_generation(id);
  auto eng = engine();
  std::lock_guard lock(jobs_mu_);
  ++jobs_running_;
  jobs_.emplace_back([this, e = e, eng, cid = cid, seed, lambda] {
    try {
      run_generation(e, eng, cid, seed, lambda);
    } catch (...) {
      // recorded in the session's last_error
    }
    std::lock_guard done(jobs_mu_);
    --jobs_running_;
    jobs_cv_.notify_all();
  });
  return cid;
}

Session SessionService::select(const std::string& id, const std::string& candidate,
                               const std::vector<std::size_t>& tracks) {
  const auto e = entry(id);
  const auto K = engine()->tracks();
  std::lock_guard lock(e->mu);
  if (e->s.status == SessionStatus::Generating)
    fail(ErrorCode::Conflict, "session is generating");
  const Candidate* c = e->s.find_candidate(candidate);
  if (c == nullptr) fail(ErrorCode::NotFound, "unknown candidate '" + candidate + "'");
  require(!tracks.empty(), "select needs at least one track");
  for (std::size_t i = 0; i < tracks.size(); ++i) {
    require(tracks[i] < K, "track index " + std::to_string(tracks[i]) + " out of range");
    require(std::find(tracks.begin(), tracks.begin() + static_cast<long>(i), tracks[i]) ==
                tracks.begin() + static_cast<long>(i),
            "track " + std::to_string(tracks[i]) + " listed twice");
    if (e->s.locked.contains(tracks[i]))
      fail(ErrorCode::Conflict, "track " + std::to_string(tracks[i]) + " is already locked");
  }
  for (auto k : tracks) e->s.locked[k] = LockedTrack{c->tracks[k], Provenance::Generated, c->id};
  persist(e->s);
  return e->s;
}

Session SessionService::unlock(const std::string& id, std::size_t track) {
  const auto e = entry(id);
  std::lock_guard lock(e->mu);
  if (e->s.status == SessionStatus::Generating)
    fail(ErrorCode::Conflict, "session is generating");
  require(e->s.locked.erase(track) == 1, "track " + std::to_string(track) + " is not locked");
  persist(e->s);
  return e->s;
}

Session SessionService::upload(const std::string& id, std::size_t track, Waveform samples) {
  const auto e = entry(id);
  auto w = validate_upload(track, std::move(samples));
  std::lock_guard lock(e->mu);
  if (e->s.status == SessionStatus::Generating)
    fail(ErrorCode::Conflict, "session is generating");
  e->s.locked[track] = LockedTrack{std::move(w), Provenance::Uploaded, ""};
  persist(e->s);
  return e->s;
}

Waveform SessionService::render_mix(const std::string& id) const {
  const auto eng = engine();
  const auto e = entry(id);
  std::vector<Waveform> tracks;
  {
    std::lock_guard lock(e->mu);
    if (e->s.locked.size() < eng->tracks())
      fail(ErrorCode::IncompleteSession, "mix needs all " + std::to_string(eng->tracks()) +
                                             " tracks locked, have " +
                                             std::to_string(e->s.locked.size()));
    for (const auto& [k, t] : e->s.locked) tracks.push_back(t.samples);
  }
  return data::render_mix(tracks, eng->data.target_rms);
}

Waveform SessionService::locked_track(const std::string& id, std::size_t track) const {
  const auto e = entry(id);
  std::lock_guard lock(e->mu);
  const auto it = e->s.locked.find(track);
  if (it == e->s.locked.end())
    fail(ErrorCode::NotFound, "track " + std::to_string(track) + " is not locked");
  return it->second.samples;
}

Waveform SessionService::candidate_track(const std::string& id, const std::string& candidate,
                                         std::size_t track) const {
  const auto e = entry(id);
  std::lock_guard lock(e->mu);
  const Candidate* c = e->s.find_candidate(candidate);
  if (c == nullptr) fail(ErrorCode::NotFound, "unknown candidate '" + candidate + "'");
  if (track >= c->tracks.size())
    fail(ErrorCode::NotFound, "track " + std::to_string(track) + " out of range");
  return c->tracks[track];
}

std::int16_t to_pcm16(double x) {
  if (std::isnan(x)) return 0;
  const double r = std::round(x * 32767.0);  // halves away from zero
  return static_cast<std::int16_t>(std::clamp(r, -32768.0, 32767.0));
}

std::vector<std::uint8_t> encode_wav(std::span<const double> samples, std::uint32_t sample_rate) {
  std::vector<std::uint8_t> out;
  auto u32 = [&](std::uint32_t v) {
    for (int i = 0; i < 4; ++i) out.push_back(static_cast<std::uint8_t>(v >> (8 * i)));
  };
  auto u16 = [&](std::uint16_t v) {
    out.push_back(static_cast<std::uint8_t>(v));
    out.push_back(static_cast<std::uint8_t>(v >> 8));
  };
  auto tag = [&](const char* t) { out.insert(out.end(), t, t + 4); };
  const auto data_bytes = static_cast<std::uint32_t>(samples.size() * 2);
  out.reserve(44 + data_bytes);
  tag("RIFF");
  u32(36 + data_bytes);
  tag("WAVE");
  tag("fmt ");
  u32(16);
  u16(1);  // PCM
  u16(1);  // mono
  u32(sample_rate);
  u32(sample_rate * 2);
  u16(2);
  u16(16);
  tag("data");
  u32(data_bytes);
  for (double x : samples) u16(static_cast<std::uint16_t>(to_pcm16(x)));
  return out;
}

int http_status(ErrorCode code) {
  switch (code) {
    case ErrorCode::NotFound: return 404;
    case ErrorCode::Conflict: return 409;
    case ErrorCode::IncompleteSession: return 422;
    case ErrorCode::Numerical: return 500;
    default: return 400;
  }
}

}  // namespace stemforge::workflow
