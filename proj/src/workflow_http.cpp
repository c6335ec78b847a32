// Copyright 2026 The StemForge Authors
// SPDX-License-Identifier: Apache-2.0

// REST binding of the session service. Every body is JSON except the WAV
// downloads; errors come back as {"code", "message"}.

#include <string>

#include "httplib.h"
#include "json.hpp"
#include "stemforge/workflow.hpp"

namespace stemforge::workflow {

using nlohmann::json;

namespace {

const char* kJson = "application/json";

json session_json(const Session& s) {
  json j;
  j["session_id"] = s.id;
  j["prompt_tokens"] = s.prompt;
  j["status"] = to_string(s.status);
  j["locked"] = json::array();
  for (const auto& [k, t] : s.locked) {
    json l{{"track", k}, {"provenance", to_string(t.provenance)}};
    if (t.provenance == Provenance::Generated) l["candidate_id"] = t.candidate;
    j["locked"].push_back(std::move(l));
  }
  j["candidates"] = json::array();
  for (const auto& c : s.candidates) j["candidates"].push_back(c.id);
  if (!s.last_error.empty()) j["last_error"] = s.last_error;
  return j;
}

json candidate_json(const std::string& session, const Candidate& c) {
  json j{{"candidate_id", c.id}, {"seed", c.seed}, {"lambda", c.lambda}};
  j["targets"] = json::array();
  j["tracks"] = json::array();
  for (std::size_t k = 0; k < c.tracks.size(); ++k) {
    if (c.targets >> k & 1u) j["targets"].push_back(k);
    j["tracks"].push_back({{"index", k},
                           {"samples_ref", "/sessions/" + session + "/candidates/" + c.id +
                                               "/tracks/" + std::to_string(k) + ".wav"}});
  }
  return j;
}

json parse_body(const httplib::Request& req) {
  json j = json::parse(req.body, nullptr, false);
  if (j.is_discarded()) fail(ErrorCode::InvalidInput, "request body is not valid JSON");
  if (!j.is_object()) fail(ErrorCode::InvalidInput, "request body must be a JSON object");
  return j;
}

const json& field(const json& j, const char* name) {
  const auto it = j.find(name);
  if (it == j.end()) fail(ErrorCode::InvalidInput, std::string("missing field '") + name + "'");
  return *it;
}

std::size_t index_of(const json& v) {
  if (!v.is_number_integer() || v.get<long long>() < 0)
    fail(ErrorCode::InvalidInput, "track indices must be non-negative integers");
  return v.get<std::size_t>();
}

Waveform samples_of(const json& v) {
  if (!v.is_array()) fail(ErrorCode::InvalidInput, "samples must be an array of numbers");
  Waveform w;
  w.reserve(v.size());
  for (const auto& x : v) {
    if (!x.is_number()) fail(ErrorCode::InvalidInput, "samples must be an array of numbers");
    w.push_back(x.get<double>());
  }
  return w;
}

std::size_t path_index(const std::string& s) {
  try {
    std::size_t used = 0;
    const auto k = std::stoull(s, &used);
    if (used == s.size()) return k;
  } catch (const std::exception&) {
  }
  fail(ErrorCode::NotFound, "no track '" + s + "'");
}

void send_error(httplib::Response& res, ErrorCode code, const std::string& message) {
  res.status = http_status(code);
  res.set_content(json{{"code", to_string(code)}, {"message", message}}.dump(), kJson);
}

template <typename F>
httplib::Server::Handler guarded(F f) {
  return [f](const httplib::Request& req, httplib::Response& res) {
    try {
      f(req, res);
    } catch (const Error& e) {
      send_error(res, e.code(), e.what());
    } catch (const json::exception& e) {
      send_error(res, ErrorCode::InvalidInput, e.what());
    } catch (const std::exception& e) {
      res.status = 500;
      res.set_content(json{{"code", "internal"}, {"message", e.what()}}.dump(), kJson);
    }
  };
}

void send_wav(httplib::Response& res, const Waveform& w, std::uint32_t rate) {
  const auto bytes = encode_wav(w, rate);
  res.set_content(std::string(bytes.begin(), bytes.end()), "audio/wav");
}

}  // namespace

void install_routes(httplib::Server& server, SessionService& service) {
  auto* svc = &service;

  server.Post("/sessions", guarded([svc](const httplib::Request& req, httplib::Response& res) {
    const json body = parse_body(req);
    std::vector<std::uint32_t> prompt;
    if (body.contains("prompt_tokens")) {
      const auto& p = body.at("prompt_tokens");
      if (!p.is_array()) fail(ErrorCode::InvalidInput, "prompt_tokens must be an array");
      for (const auto& t : p) prompt.push_back(static_cast<std::uint32_t>(index_of(t)));
    }
    std::vector<Upload> uploads;
    if (body.contains("uploads"))
      for (const auto& u : body.at("uploads"))
        uploads.push_back({index_of(field(u, "track")), samples_of(field(u, "samples"))});
    const auto id = svc->create_session(std::move(prompt), std::move(uploads));
    res.status = 201;
    res.set_content(json{{"session_id", id}}.dump(), kJson);
  }));

  server.Get("/sessions", guarded([svc](const httplib::Request&, httplib::Response& res) {
    res.set_content(json{{"sessions", svc->session_ids()}}.dump(), kJson);
  }));

  server.Get(R"(/sessions/([^/]+))",
             guarded([svc](const httplib::Request& req, httplib::Response& res) {
               res.set_content(session_json(svc->get(req.matches[1])).dump(), kJson);
             }));

  server.Post(R"(/sessions/([^/]+)/generate)",
              guarded([svc](const httplib::Request& req, httplib::Response& res) {
                const json body = parse_body(req);
                const auto& seed = field(body, "seed");
                if (!seed.is_number_unsigned())
                  fail(ErrorCode::InvalidInput, "seed must be a non-negative integer");
                const auto& lambda = field(body, "lambda");
                if (!lambda.is_number()) fail(ErrorCode::InvalidInput, "lambda must be a number");
                const std::string id = req.matches[1];
                if (svc->options().async_generation) {
                  const auto cid =
                      svc->generate_async(id, seed.get<std::uint64_t>(), lambda.get<double>());
                  res.status = 202;
                  res.set_content(json{{"candidate_id", cid}, {"status", "generating"}}.dump(),
                                  kJson);
                  return;
                }
                const auto c = svc->generate(id, seed.get<std::uint64_t>(), lambda.get<double>());
                res.set_content(candidate_json(id, c).dump(), kJson);
              }));

  server.Get(R"(/sessions/([^/]+)/candidates/([^/]+))",
             guarded([svc](const httplib::Request& req, httplib::Response& res) {
               const std::string id = req.matches[1];
               const std::string cid = req.matches[2];
               const auto s = svc->get(id);
               if (const auto* c = s.find_candidate(cid)) {
                 res.set_content(candidate_json(id, *c).dump(), kJson);
               } else if (s.status == SessionStatus::Generating &&
                          cid == "c" + std::to_string(s.next_candidate - 1)) {
                 res.status = 202;
                 res.set_content(json{{"candidate_id", cid}, {"status", "generating"}}.dump(),
                                 kJson);
               } else {
                 fail(ErrorCode::NotFound, "unknown candidate '" + cid + "'");
               }
             }));

  server.Get(R"(/sessions/([^/]+)/candidates/([^/]+)/tracks/([^/]+)\.wav)",
             guarded([svc](const httplib::Request& req, httplib::Response& res) {
               const auto w = svc->candidate_track(req.matches[1], req.matches[2],
                                                   path_index(req.matches[3]));
               send_wav(res, w, svc->engine()->data.sample_rate);
             }));

  server.Post(R"(/sessions/([^/]+)/select)",
              guarded([svc](const httplib::Request& req, httplib::Response& res) {
                const json body = parse_body(req);
                const auto& cid = field(body, "candidate_id");
                if (!cid.is_string()) fail(ErrorCode::InvalidInput, "candidate_id must be a string");
                const auto& list = field(body, "tracks");
                if (!list.is_array()) fail(ErrorCode::InvalidInput, "tracks must be an array");
                std::vector<std::size_t> tracks;
                for (const auto& t : list) tracks.push_back(index_of(t));
                const auto s = svc->select(req.matches[1], cid.get<std::string>(), tracks);
                res.set_content(session_json(s).dump(), kJson);
              }));

  server.Post(R"(/sessions/([^/]+)/unlock)",
              guarded([svc](const httplib::Request& req, httplib::Response& res) {
                const json body = parse_body(req);
                const auto s = svc->unlock(req.matches[1], index_of(field(body, "track")));
                res.set_content(session_json(s).dump(), kJson);
              }));

  server.Post(R"(/sessions/([^/]+)/upload)",
              guarded([svc](const httplib::Request& req, httplib::Response& res) {
                const json body = parse_body(req);
                const auto s = svc->upload(req.matches[1], index_of(field(body, "track")),
                                           samples_of(field(body, "samples")));
                res.set_content(session_json(s).dump(), kJson);
              }));

  server.Get(R"(/sessions/([^/]+)/tracks/([^/]+)\.wav)",
             guarded([svc](const httplib::Request& req, httplib::Response& res) {
               const auto w = svc->locked_track(req.matches[1], path_index(req.matches[2]));
               send_wav(res, w, svc->engine()->data.sample_rate);
             }));

  server.Get(R"(/sessions/([^/]+)/mix\.wav)",
             guarded([svc](const httplib::Request& req, httplib::Response& res) {
               send_wav(res, svc->render_mix(req.matches[1]), svc->engine()->data.sample_rate);
             }));
}

}  // namespace stemforge::workflow
