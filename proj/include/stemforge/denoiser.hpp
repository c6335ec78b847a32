// Copyright 2026 The StemForge Authors
// SPDX-License-Identifier: Apache-2.0

#pragma once

// Multi-track 1D U-Net noise predictor.
//
//   z (K*D x S') -> stem conv -> [conv, groupnorm, FiLM, SiLU, +res, stride-2
//   conv] x depth -> mid block (same, then single-head self-attention over
//   frames) -> [nearest x2, concat skip, conv, groupnorm, FiLM, SiLU, +res] x
//   depth -> output conv (zero-initialized) -> eps (K*D x S')
//
// Conditioning: each track's timestep goes through a sinusoid and its own
// linear layer; the K results are concatenated with the mean-pooled prompt
// embedding and passed through a two-layer MLP. Every block derives a
// per-channel scale and shift from that vector.

#include <cstddef>
#include <memory>
#include <optional>
#include <string>
#include <unordered_map>
#include <vector>

#include "stemforge/diffusion.hpp"
#include "stemforge/prompt.hpp"
#include "stemforge/rng.hpp"
#include "stemforge/tensor.hpp"

namespace stemforge::nn {

using diffusion::TimestepVector;

struct DenoiserConfig {
  std::size_t tracks = 4;
  std::size_t latent_channels = 32;
  std::size_t frames = 64;
  std::size_t hidden = 32;
  std::size_t depth = 2;
  std::size_t time_embed = 16;
  std::size_t vocab = 64;
  std::size_t prompt_embed = 16;
  std::size_t cond_width = 64;

  void validate() const;
  std::size_t groups() const noexcept { return hidden < 8 ? hidden : 8; }
  std::size_t io_channels() const noexcept { return tracks * latent_channels; }

  bool operator==(const DenoiserConfig&) const = default;
};

/// Named parameter arrays in registration order.
class ParameterSet {
 public:
  std::size_t add(std::string name, std::vector<std::size_t> shape);

  std::size_t size() const noexcept { return tensors_.size(); }
  Tensor& operator[](std::size_t i) { return tensors_[i]; }
  const Tensor& operator[](std::size_t i) const { return tensors_[i]; }
  Tensor& at(const std::string& name);
  const Tensor& at(const std::string& name) const;
  const std::string& name(std::size_t i) const { return names_[i]; }
  std::optional<std::size_t> find(const std::string& name) const;

  std::size_t scalar_count() const noexcept;
  bool same_layout(const ParameterSet& other) const;
  bool all_finite() const;
  /// Same names and shapes, every value zero.
  ParameterSet zeros_like() const;
  void fill(double value);

  bool operator==(const ParameterSet& other) const {
    return names_ == other.names_ && tensors_ == other.tensors_;
  }

 private:
  std::vector<std::string> names_;
  std::vector<Tensor> tensors_;
  std::unordered_map<std::string, std::size_t> index_;
};

/// [sin(t w_0) .. sin(t w_{h-1}), cos(t w_0) .. cos(t w_{h-1})] with
/// w_i = 10000^(-i/h), h = dim/2.
std::vector<double> sinusoid(int t, std::size_t dim);

class UNet1d {
 public:
  explicit UNet1d(DenoiserConfig config);

  const DenoiserConfig& config() const noexcept { return config_; }

  /// Registers every parameter with its shape, all zero.
  ParameterSet empty_params() const;

  /// Fan-in scaled normal init for convolutions and linear layers,
  /// N(0, 0.02^2) embeddings, unit norm gains, zero biases, and a zero
  /// output convolution and input skip.
  ParameterSet init_params(Rng& rng) const;

  /// Concatenation of the per-track timestep embeddings (K*E values).
  std::vector<double> embed_timesteps(const ParameterSet& params,
                                      const TimestepVector& tvec) const;

  /// Activations kept from forward() for backward().
  struct Trace;

  TrackLatents forward(const ParameterSet& params, const TrackLatents& z,
                       const TimestepVector& tvec,
                       const PromptTokens& prompt) const;
  TrackLatents forward(const ParameterSet& params, const TrackLatents& z,
                       const TimestepVector& tvec, const PromptTokens& prompt,
                       Trace& trace) const;

  /// Accumulates dLoss/dparams into `grads` given dLoss/doutput.
  void backward(const ParameterSet& params, const Trace& trace,
                const TrackLatents& output_grad, ParameterSet& grads) const;

  /// Forward plus backward; returns fresh gradients. Throws a Numerical
  /// error if any gradient is non-finite.
  ParameterSet backward(const ParameterSet& params, const TrackLatents& z,
                        const TimestepVector& tvec, const PromptTokens& prompt,
                        const TrackLatents& output_grad) const;

  struct Layout;

 private:
  DenoiserConfig config_;
  std::shared_ptr<const Layout> layout_;
};

struct UNet1d::Trace {
  struct Block {
    std::vector<double> input;    // conv input
    std::vector<double> normed;   // group-norm output before FiLM
    std::vector<double> xhat;     // normalized activations
    std::vector<double> rstd;     // per group
    std::vector<double> film_out; // pre-activation
    std::vector<double> film;     // [scale; shift]
  };
  struct Attention {
    std::vector<double> input, q, k, v, probs, mixed;
  };

  TimestepVector tvec;
  std::vector<std::uint32_t> prompt_ids;
  std::vector<double> sinusoids;     // K*E
  std::vector<double> cond_in;       // K*E + P
  std::vector<double> hidden_pre;    // fc1 output
  std::vector<double> hidden_act;    // SiLU(fc1)
  std::vector<double> cond_pre;      // fc2 output
  std::vector<double> cond;          // SiLU(fc2)
  std::vector<double> stem_in;
  std::vector<Block> down;
  std::vector<std::vector<double>> skips;
  Block mid;
  Attention attn;
  std::vector<Block> up;
  std::vector<double> out_in;
  std::vector<double> skip_scale;    // K, from the conditioning vector
};

/// Binds a model to an immutable parameter snapshot for sampling.
class Denoiser final : public diffusion::NoisePredictor {
 public:
  Denoiser(UNet1d model, std::shared_ptr<const ParameterSet> params);

  std::size_t tracks() const override { return model_.config().tracks; }
  std::size_t channels() const override { return model_.config().latent_channels; }
  std::size_t frames() const override { return model_.config().frames; }
  TrackLatents predict(const TrackLatents& z, const TimestepVector& tvec,
                       const PromptTokens& prompt) const override;

  const UNet1d& model() const noexcept { return model_; }
  const ParameterSet& params() const noexcept { return *params_; }
  std::shared_ptr<const ParameterSet> snapshot() const noexcept { return params_; }

 private:
  UNet1d model_;
  std::shared_ptr<const ParameterSet> params_;
};

}  // namespace stemforge::nn
