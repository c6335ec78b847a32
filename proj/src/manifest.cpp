// Copyright 2026 The StemForge Authors
// SPDX-License-Identifier: Apache-2.0

#include "stemforge/manifest.hpp"

#include <openssl/evp.h>

#include <cstdio>

#include "json.hpp"
#include "stemforge/binio.hpp"

namespace stemforge::cli {

std::string git_blob_hash(std::span<const std::uint8_t> bytes) {
  const std::string header = "blob " + std::to_string(bytes.size()) + '\0';
  unsigned char md[EVP_MAX_MD_SIZE];
  unsigned int len = 0;
  EVP_MD_CTX* ctx = EVP_MD_CTX_new();
  EVP_DigestInit_ex(ctx, EVP_sha1(), nullptr);
  EVP_DigestUpdate(ctx, header.data(), header.size());
  EVP_DigestUpdate(ctx, bytes.data(), bytes.size());
  EVP_DigestFinal_ex(ctx, md, &len);
  EVP_MD_CTX_free(ctx);
  std::string hex;
  char buf[3];
  for (unsigned int i = 0; i < len; ++i) {
    std::snprintf(buf, sizeof buf, "%02x", md[i]);
    hex += buf;
  }
  return hex;
}

std::string git_blob_hash(const std::string& text) {
  return git_blob_hash(
      std::span(reinterpret_cast<const std::uint8_t*>(text.data()), text.size()));
}

std::string file_hash(const std::filesystem::path& path) {
  return git_blob_hash(binio::read_file(path));
}

void RunManifest::add_file(const std::filesystem::path& path) {
  inputs["file:" + path.string()] = file_hash(path);
}

void RunManifest::add_option(const std::string& name, const std::string& value) {
  inputs["opt:" + name] = git_blob_hash(value);
}

void RunManifest::add_output(const std::filesystem::path& path) {
  outputs[path.string()] = file_hash(path);
}

std::string RunManifest::input_hash() const {
  std::string listing;
  for (const auto& [k, h] : inputs) listing += k + ' ' + h + '\n';
  return git_blob_hash(listing);
}

std::string RunManifest::to_json() const {
  nlohmann::ordered_json j;
  j["command"] = command;
  j["config"] = config_path;
  j["seed"] = seed;
  j["input_hash"] = input_hash();
  j["inputs"] = inputs;
  j["outputs"] = outputs;
  j["wall_seconds"] = wall_seconds;
  return j.dump(2);
}

}  // namespace stemforge::cli
