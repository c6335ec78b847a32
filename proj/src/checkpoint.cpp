// Copyright 2026 The StemForge Authors
// SPDX-License-Identifier: Apache-2.0

#include "stemforge/checkpoint.hpp"

#include <cmath>

#include "stemforge/binio.hpp"
#include "stemforge/error.hpp"

namespace stemforge::nn {

namespace {

constexpr char kMagic[] = "STMF";
constexpr std::uint32_t kVersion = 1;
constexpr std::uint32_t kMaxRank = 8;

}  // namespace

std::vector<std::uint8_t> write_container(const std::vector<NamedTensor>& tensors) {
  binio::Writer w;
  w.magic({kMagic, 4});
  w.u32(kVersion);
  for (const auto& t : tensors) {
    require(shape_size(t.shape) == t.data.size(), "tensor " + t.name + ": shape/data mismatch");
    w.str(t.name);
    w.u32(static_cast<std::uint32_t>(t.shape.size()));
    for (auto d : t.shape) w.u32(static_cast<std::uint32_t>(d));
    for (float v : t.data) w.f32(v);
  }
  w.seal();
  return w.take();
}

std::vector<NamedTensor> read_container(std::span<const std::uint8_t> bytes) {
  binio::Reader r(bytes, "checkpoint");
  r.expect_magic({kMagic, 4});
  const std::uint32_t version = r.u32();
  if (version != kVersion)
    fail(ErrorCode::Format, "checkpoint: unsupported version " + std::to_string(version));
  std::vector<NamedTensor> out;
  while (!r.done()) {
    NamedTensor t;
    t.name = r.str();
    const std::uint32_t rank = r.u32();
    if (rank > kMaxRank) fail(ErrorCode::Format, "checkpoint: tensor rank too large");
    std::size_t count = 1;
    for (std::uint32_t i = 0; i < rank; ++i) {
      t.shape.push_back(r.u32());
      count *= t.shape.back();
      if (count > r.remaining()) fail(ErrorCode::Format, "checkpoint: truncated tensor");
    }
    if (count * 4 > r.remaining()) fail(ErrorCode::Format, "checkpoint: truncated tensor");
    t.data.resize(count);
    for (float& v : t.data) v = r.f32();
    out.push_back(std::move(t));
  }
  return out;
}

diffusion::NoiseSchedule ScheduleSpec::build() const {
  return diffusion::build_schedule(diffusion::ScheduleKind::Linear, num_steps, beta_start,
                                   beta_end);
}

std::vector<std::uint8_t> serialize_checkpoint(const Checkpoint& c) {
  const auto& m = c.model;
  std::vector<NamedTensor> tensors;
  tensors.push_back({"meta.model",
                     {9},
                     {static_cast<float>(m.tracks), static_cast<float>(m.latent_channels),
                      static_cast<float>(m.frames), static_cast<float>(m.hidden),
                      static_cast<float>(m.depth), static_cast<float>(m.time_embed),
                      static_cast<float>(m.vocab), static_cast<float>(m.prompt_embed),
                      static_cast<float>(m.cond_width)}});
  tensors.push_back({"meta.schedule",
                     {3},
                     {static_cast<float>(c.schedule.num_steps),
                      static_cast<float>(c.schedule.beta_start),
                      static_cast<float>(c.schedule.beta_end)}});
  tensors.push_back({"meta.latent_scale", {1}, {static_cast<float>(c.latent_scale)}});
  for (std::size_t i = 0; i < c.params.size(); ++i) {
    const Tensor& t = c.params[i];
    NamedTensor nt{c.params.name(i), t.shape(), {}};
    nt.data.reserve(t.size());
    for (double v : t.values()) nt.data.push_back(static_cast<float>(v));
    tensors.push_back(std::move(nt));
  }
  return write_container(tensors);
}

Checkpoint deserialize_checkpoint(std::span<const std::uint8_t> bytes) {
  const auto tensors = read_container(bytes);
  auto find = [&](const std::string& name, std::size_t size) -> const NamedTensor& {
    for (const auto& t : tensors)
      if (t.name == name) {
        if (t.data.size() != size) fail(ErrorCode::Format, "checkpoint: bad " + name);
        return t;
      }
    fail(ErrorCode::Format, "checkpoint: missing " + name);
  };
  auto count = [](float v) {
    if (!(v >= 0.0f) || v != std::floor(v)) fail(ErrorCode::Format, "checkpoint: bad setting");
    return static_cast<std::size_t>(v);
  };
  Checkpoint c;
  const auto& mm = find("meta.model", 9).data;
  c.model = DenoiserConfig{count(mm[0]), count(mm[1]), count(mm[2]), count(mm[3]), count(mm[4]),
                           count(mm[5]), count(mm[6]), count(mm[7]), count(mm[8])};
  try {
    c.model.validate();
  } catch (const Error& e) {
    fail(ErrorCode::Format, std::string("checkpoint: ") + e.what());
  }
  const auto& ms = find("meta.schedule", 3).data;
  c.schedule = ScheduleSpec{static_cast<int>(count(ms[0])), ms[1], ms[2]};
  c.latent_scale = find("meta.latent_scale", 1).data[0];

  c.params = UNet1d(c.model).empty_params();
  std::size_t matched = 0;
  for (const auto& t : tensors) {
    if (t.name.starts_with("meta.")) continue;
    const auto idx = c.params.find(t.name);
    if (!idx) fail(ErrorCode::Format, "checkpoint: unexpected tensor " + t.name);
    Tensor& dst = c.params[*idx];
    if (dst.shape() != t.shape) fail(ErrorCode::Format, "checkpoint: shape mismatch for " + t.name);
    for (std::size_t i = 0; i < t.data.size(); ++i) dst.values()[i] = t.data[i];
    ++matched;
  }
  if (matched != c.params.size()) fail(ErrorCode::Format, "checkpoint: missing parameters");
  if (!c.params.all_finite()) fail(ErrorCode::Format, "checkpoint: non-finite parameter");
  return c;
}

void save_checkpoint(const Checkpoint& checkpoint, const std::filesystem::path& path) {
  binio::write_file(path, serialize_checkpoint(checkpoint));
}

Checkpoint load_checkpoint(const std::filesystem::path& path) {
  return deserialize_checkpoint(binio::read_file(path));
}

std::filesystem::path ema_path(const std::filesystem::path& path) {
  auto p = path;
  p.replace_extension(".ema.stmf");
  return p;
}

}  // namespace stemforge::nn
