// Copyright 2026 The StemForge Authors
// SPDX-License-Identifier: Apache-2.0

#pragma once

// Co-composition sessions: joint generation while nothing is locked, then
// conditional regeneration of the unlocked tracks given the locked ones.

#include <condition_variable>
#include <cstdint>
#include <filesystem>
#include <functional>
#include <map>
#include <memory>
#include <mutex>
#include <optional>
#include <span>
#include <string>
#include <thread>
#include <vector>

#include "stemforge/checkpoint.hpp"
#include "stemforge/data.hpp"
#include "stemforge/denoiser.hpp"
#include "stemforge/diffusion.hpp"
#include "stemforge/error.hpp"
#include "stemforge/pipeline.hpp"
#include "stemforge/prompt.hpp"
#include "stemforge/rng.hpp"

namespace httplib {
class Server;
}

namespace stemforge::workflow {

using data::Waveform;

enum class Provenance { Generated, Uploaded };
const char* to_string(Provenance p);

enum class SessionStatus { Idle, Generating };
const char* to_string(SessionStatus s);

struct LockedTrack {
  Waveform samples;
  Provenance provenance = Provenance::Uploaded;
  std::string candidate;  // set for Generated

  bool operator==(const LockedTrack&) const = default;
};

struct Candidate {
  std::string id;
  std::uint64_t seed = 0;
  double lambda = 0.0;
  TrackMask targets = 0;
  std::vector<Waveform> tracks;  // all K; locked tracks copied unchanged

  bool operator==(const Candidate&) const = default;
};

struct Session {
  std::string id;
  std::vector<std::uint32_t> prompt;  // content tokens
  std::map<std::size_t, LockedTrack> locked;
  std::vector<Candidate> candidates;
  SessionStatus status = SessionStatus::Idle;
  std::uint64_t next_candidate = 1;
  std::string last_error;  // from the latest failed background job

  const Candidate* find_candidate(const std::string& id) const;
  bool operator==(const Session&) const = default;
};

/// Session file: u32 header length | JSON header | STMF waveform container.
/// Waveforms are float32-valued, so the round trip is exact.
std::vector<std::uint8_t> serialize_session(const Session& session);
Session deserialize_session(std::span<const std::uint8_t> bytes);

using pipeline::Engine;

struct Upload {
  std::size_t track = 0;
  Waveform samples;
};

struct ServiceOptions {
  std::optional<std::filesystem::path> session_dir;
  /// Background generation with polling instead of answering in-request.
  bool async_generation = false;
  std::uint64_t id_seed = 0;
  /// Called with the session id after the single-flight guard is taken and
  /// before sampling starts.
  std::function<void(const std::string&)> before_sampling;
};

class SessionService {
 public:
  SessionService(std::shared_ptr<const Engine> engine, ServiceOptions options = {});
  ~SessionService();
  SessionService(const SessionService&) = delete;
  SessionService& operator=(const SessionService&) = delete;

  std::string create_session(std::vector<std::uint32_t> prompt, std::vector<Upload> uploads = {});
  /// Snapshot of the current state.
  Session get(const std::string& id) const;
  std::vector<std::string> session_ids() const;

  /// Joint generation when nothing is locked, else the unlocked tracks
  /// given the locked ones. Conflict while another generation runs.
  Candidate generate(const std::string& id, std::uint64_t seed, double lambda);
  /// Takes the guard, returns the candidate id to poll for, and samples
  /// on a background thread.
  std::string generate_async(const std::string& id, std::uint64_t seed, double lambda);

  Session select(const std::string& id, const std::string& candidate,
                 const std::vector<std::size_t>& tracks);
  Session unlock(const std::string& id, std::size_t track);
  Session upload(const std::string& id, std::size_t track, Waveform samples);

  Waveform render_mix(const std::string& id) const;
  Waveform locked_track(const std::string& id, std::size_t track) const;
  Waveform candidate_track(const std::string& id, const std::string& candidate,
                           std::size_t track) const;

  /// Swaps the model snapshot; running generations keep the old one.
  void reload(std::shared_ptr<const Engine> engine);
  std::shared_ptr<const Engine> engine() const;
  const ServiceOptions& options() const noexcept { return options_; }
  /// Blocks until every background generation has finished.
  void wait_idle();

 private:
  struct Entry;
  std::shared_ptr<Entry> entry(const std::string& id) const;
  std::pair<std::shared_ptr<Entry>, std::string> begin_generation(const std::string& id);
  Candidate run_generation(const std::shared_ptr<Entry>& e, std::shared_ptr<const Engine> engine,
                           const std::string& candidate, std::uint64_t seed, double lambda);
  void persist(const Session& s) const;
  Waveform validate_upload(std::size_t track, Waveform samples) const;

  ServiceOptions options_;
  mutable std::mutex mu_;
  std::shared_ptr<const Engine> engine_;
  std::map<std::string, std::shared_ptr<Entry>> sessions_;
  std::uint64_t counter_ = 0;
  Rng id_rng_;
  std::mutex jobs_mu_;
  std::condition_variable jobs_cv_;
  std::size_t jobs_running_ = 0;
  std::vector<std::thread> jobs_;
};

/// RIFF WAVE, mono, PCM 16-bit little-endian.
std::vector<std::uint8_t> encode_wav(std::span<const double> samples, std::uint32_t sample_rate);
/// round-half-away-from-zero(x * 32767), saturated to the int16 range.
std::int16_t to_pcm16(double x);

/// Registers the REST routes on `server`.
void install_routes(httplib::Server& server, SessionService& service);

/// HTTP status for an error code.
int http_status(ErrorCode code);

}  // namespace stemforge::workflow
