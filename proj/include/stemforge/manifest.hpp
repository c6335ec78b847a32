// Copyright 2026 The StemForge Authors
// SPDX-License-Identifier: Apache-2.0

#pragma once

// Run manifests written by every command-line tool.

#include <cstdint>
#include <filesystem>
#include <map>
#include <span>
#include <string>

namespace stemforge::cli {

/// SHA-1 of "blob <size>\0" + bytes, lowercase hex (what `git hash-object` prints).
std::string git_blob_hash(std::span<const std::uint8_t> bytes);
std::string git_blob_hash(const std::string& text);
std::string file_hash(const std::filesystem::path& path);

struct RunManifest {
  std::string command;
  std::string config_path;
  std::uint64_t seed = 0;
  /// Input files and option values, keyed "file:<path>" or "opt:<name>",
  /// mapped to their content hash.
  std::map<std::string, std::string> inputs;
  std::map<std::string, std::string> outputs;  // path -> content hash
  double wall_seconds = 0.0;

  void add_file(const std::filesystem::path& path);
  void add_option(const std::string& name, const std::string& value);
  void add_output(const std::filesystem::path& path);

  /// Hash over the sorted "key hash" lines of `inputs`.
  std::string input_hash() const;
  std::string to_json() const;
};

}  // namespace stemforge::cli
