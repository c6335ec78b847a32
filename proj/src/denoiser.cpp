// Copyright 2026 The StemForge Authors
// SPDX-License-Identifier: Apache-2.0

#include "stemforge/denoiser.hpp"

#include <algorithm>
#include <cmath>
#include <string>

#include "stemforge/error.hpp"
#include "stemforge/kernels.hpp"

namespace stemforge::nn {

using Vec = std::vector<double>;
using kernels::Conv1dShape;

namespace {

constexpr double kNormEps = 1e-5;

double sigmoid(double x) { return 1.0 / (1.0 + std::exp(-x)); }

double silu(double x) { return x * sigmoid(x); }

double silu_grad(double x) {
  const double s = sigmoid(x);
  return s * (1.0 + x * (1.0 - s));
}

Vec silu(const Vec& x) {
  Vec y(x.size());
  for (std::size_t i = 0; i < x.size(); ++i) y[i] = silu(x[i]);
  return y;
}

}  // namespace

void DenoiserConfig::validate() const {
  require(tracks >= 1 && latent_channels >= 1 && frames >= 1 && hidden >= 1 &&
              depth >= 1 && time_embed >= 1 && vocab >= 1 && prompt_embed >= 1 &&
              cond_width >= 1,
          "denoiser dimensions must all be >= 1");
  require(time_embed % 2 == 0, "timestep embedding dimension must be even");
  require(frames % (std::size_t{1} << depth) == 0,
          "frame count must be divisible by 2^depth");
  require(hidden % groups() == 0, "hidden width must be divisible by the group count");
}

std::size_t ParameterSet::add(std::string name, std::vector<std::size_t> shape) {
  require(!index_.contains(name), "duplicate parameter name " + name);
  const std::size_t i = tensors_.size();
  index_.emplace(name, i);
  names_.push_back(std::move(name));
  tensors_.emplace_back(std::move(shape));
  return i;
}

std::optional<std::size_t> ParameterSet::find(const std::string& name) const {
  const auto it = index_.find(name);
  if (it == index_.end()) return std::nullopt;
  return it->second;
}

Tensor& ParameterSet::at(const std::string& name) {
  const auto i = find(name);
  if (!i) fail(ErrorCode::NotFound, "no parameter named " + name);
  return tensors_[*i];
}

const Tensor& ParameterSet::at(const std::string& name) const {
  const auto i = find(name);
  if (!i) fail(ErrorCode::NotFound, "no parameter named " + name);
  return tensors_[*i];
}

std::size_t ParameterSet::scalar_count() const noexcept {
  std::size_t n = 0;
  for (const auto& t : tensors_) n += t.size();
  return n;
}

bool ParameterSet::same_layout(const ParameterSet& other) const {
  if (names_ != other.names_) return false;
  for (std::size_t i = 0; i < tensors_.size(); ++i)
    if (tensors_[i].shape() != other.tensors_[i].shape()) return false;
  return true;
}

bool ParameterSet::all_finite() const {
  return std::all_of(tensors_.begin(), tensors_.end(),
                     [](const Tensor& t) { return t.all_finite(); });
}

ParameterSet ParameterSet::zeros_like() const {
  ParameterSet out;
  for (std::size_t i = 0; i < tensors_.size(); ++i)
    out.add(names_[i], tensors_[i].shape());
  return out;
}

void ParameterSet::fill(double value) {
  for (auto& t : tensors_) t.fill(value);
}

std::vector<double> sinusoid(int t, std::size_t dim) {
  const std::size_t half = dim / 2;
  Vec out(dim, 0.0);
  for (std::size_t i = 0; i < half; ++i) {
    const double freq =
        std::exp(-std::log(10000.0) * static_cast<double>(i) / static_cast<double>(half));
    out[i] = std::sin(static_cast<double>(t) * freq);
    out[half + i] = std::cos(static_cast<double>(t) * freq);
  }
  return out;
}

struct UNet1d::Layout {
  struct Block {
    std::size_t conv_w, conv_b, norm_w, norm_b, film_w, film_b;
  };
  std::vector<std::size_t> time_w, time_b;
  std::size_t embedding = 0;
  std::size_t fc1_w = 0, fc1_b = 0, fc2_w = 0, fc2_b = 0;
  std::size_t stem_w = 0, stem_b = 0;
  std::vector<Block> down;
  std::vector<std::size_t> downsample_w, downsample_b;
  Block mid{};
  std::size_t q_w = 0, q_b = 0, k_w = 0, k_b = 0, v_w = 0, v_b = 0, o_w = 0, o_b = 0;
  std::vector<Block> up;
  std::size_t out_w = 0, out_b = 0;
  std::size_t skip_w = 0, skip_b = 0;
};

namespace {

UNet1d::Layout::Block add_block(ParameterSet& p, const std::string& prefix,
                                std::size_t in_ch, std::size_t out_ch,
                                std::size_t cond_width) {
  UNet1d::Layout::Block b{};
  b.conv_w = p.add(prefix + ".conv.weight", {out_ch, in_ch, 3});
  b.conv_b = p.add(prefix + ".conv.bias", {out_ch});
  b.norm_w = p.add(prefix + ".norm.weight", {out_ch});
  b.norm_b = p.add(prefix + ".norm.bias", {out_ch});
  b.film_w = p.add(prefix + ".film.weight", {2 * out_ch, cond_width});
  b.film_b = p.add(prefix + ".film.bias", {2 * out_ch});
  return b;
}

// Registers every tensor; `layout` receives the indices.
ParameterSet register_params(const DenoiserConfig& c, UNet1d::Layout* layout) {
  ParameterSet p;
  UNet1d::Layout l;
  const std::size_t H = c.hidden;
  const std::size_t E = c.time_embed;
  const std::size_t M = c.cond_width;
  for (std::size_t k = 0; k < c.tracks; ++k) {
    l.time_w.push_back(p.add("time." + std::to_string(k) + ".weight", {E, E}));
    l.time_b.push_back(p.add("time." + std::to_string(k) + ".bias", {E}));
  }
  l.embedding = p.add("prompt.embedding", {c.vocab, c.prompt_embed});
  l.fc1_w = p.add("cond.fc1.weight", {M, c.tracks * E + c.prompt_embed});
  l.fc1_b = p.add("cond.fc1.bias", {M});
  l.fc2_w = p.add("cond.fc2.weight", {M, M});
  l.fc2_b = p.add("cond.fc2.bias", {M});
  l.stem_w = p.add("stem.weight", {H, c.io_channels(), 3});
  l.stem_b = p.add("stem.bias", {H});
  for (std::size_t j = 0; j < c.depth; ++j) {
    const std::string prefix = "down." + std::to_string(j);
    l.down.push_back(add_block(p, prefix, H, H, M));
    l.downsample_w.push_back(p.add(prefix + ".downsample.weight", {H, H, 2}));
    l.downsample_b.push_back(p.add(prefix + ".downsample.bias", {H}));
  }
  l.mid = add_block(p, "mid", H, H, M);
  l.q_w = p.add("mid.attn.q.weight", {H, H});
  l.q_b = p.add("mid.attn.q.bias", {H});
  l.k_w = p.add("mid.attn.k.weight", {H, H});
  l.k_b = p.add("mid.attn.k.bias", {H});
  l.v_w = p.add("mid.attn.v.weight", {H, H});
  l.v_b = p.add("mid.attn.v.bias", {H});
  l.o_w = p.add("mid.attn.out.weight", {H, H});
  l.o_b = p.add("mid.attn.out.bias", {H});
  l.up.resize(c.depth);
  for (std::size_t jj = c.depth; jj-- > 0;)
    l.up[jj] = add_block(p, "up." + std::to_string(jj), 2 * H, H, M);
  l.out_w = p.add("out.weight", {c.io_channels(), H, 3});
  l.out_b = p.add("out.bias", {c.io_channels()});
  // per-track scale on the raw input, added to the output
  l.skip_w = p.add("skip.weight", {c.tracks, M});
  l.skip_b = p.add("skip.bias", {c.tracks});
  if (layout) *layout = std::move(l);
  return p;
}

// y = W x + b for a row-major W [out][in].
Vec linear(const Tensor& w, const Tensor& b, const Vec& x) {
  const std::size_t out = w.dim(0);
  const std::size_t in = w.dim(1);
  Vec y(out);
  for (std::size_t o = 0; o < out; ++o) {
    double acc = b[o];
    for (std::size_t i = 0; i < in; ++i) acc += w[o * in + i] * x[i];
    y[o] = acc;
  }
  return y;
}

// Accumulates dW, db; returns dx.
Vec linear_backward(const Tensor& w, const Vec& x, const Vec& dy, Tensor& dw,
                    Tensor& db) {
  const std::size_t out = w.dim(0);
  const std::size_t in = w.dim(1);
  Vec dx(in, 0.0);
  for (std::size_t o = 0; o < out; ++o) {
    db[o] += dy[o];
    for (std::size_t i = 0; i < in; ++i) {
      dw[o * in + i] += dy[o] * x[i];
      dx[i] += w[o * in + i] * dy[o];
    }
  }
  return dx;
}

Conv1dShape conv3(std::size_t in, std::size_t out, std::size_t length) {
  return Conv1dShape{in, out, length, 3, 1, 1};
}

Conv1dShape conv_down(std::size_t channels, std::size_t length) {
  return Conv1dShape{channels, channels, length, 2, 2, 0};
}

Vec conv_forward(const ParameterSet& p, std::size_t w, std::size_t b,
                 const Conv1dShape& s, const Vec& x) {
  Vec y(s.out_channels * s.out_length());
  kernels::conv1d_forward(s, x, p[w].values(), p[b].values(), y);
  return y;
}

Vec conv_backward(const ParameterSet& p, ParameterSet& g, std::size_t w,
                  std::size_t b, const Conv1dShape& s, const Vec& x, const Vec& dy,
                  bool want_dx = true) {
  Vec dx(want_dx ? s.in_channels * s.length : 0);
  kernels::conv1d_backward(s, x, p[w].values(), dy, dx, g[w].values(), g[b].values());
  return dx;
}

void group_norm_forward(const Vec& x, std::size_t channels, std::size_t length,
                        std::size_t groups, const Tensor& gamma, const Tensor& beta,
                        Vec& xhat, Vec& rstd, Vec& y) {
  const std::size_t per = channels / groups;
  const std::size_t n = per * length;
  xhat.assign(x.size(), 0.0);
  y.assign(x.size(), 0.0);
  rstd.assign(groups, 0.0);
  for (std::size_t g = 0; g < groups; ++g) {
    const std::size_t base = g * n;
    double mean = 0.0;
    for (std::size_t i = 0; i < n; ++i) mean += x[base + i];
    mean /= static_cast<double>(n);
    double var = 0.0;
    for (std::size_t i = 0; i < n; ++i) {
      const double d = x[base + i] - mean;
      var += d * d;
    }
    var /= static_cast<double>(n);
    const double r = 1.0 / std::sqrt(var + kNormEps);
    rstd[g] = r;
    for (std::size_t i = 0; i < n; ++i) {
      const std::size_t c = (base + i) / length;
      xhat[base + i] = (x[base + i] - mean) * r;
      y[base + i] = gamma[c] * xhat[base + i] + beta[c];
    }
  }
}

Vec group_norm_backward(const Vec& dy, const Vec& xhat, const Vec& rstd,
                        std::size_t channels, std::size_t length,
                        std::size_t groups, const Tensor& gamma, Tensor& dgamma,
                        Tensor& dbeta) {
  const std::size_t per = channels / groups;
  const std::size_t n = per * length;
  Vec dx(dy.size());
  for (std::size_t c = 0; c < channels; ++c) {
    double sg = 0.0;
    double sb = 0.0;
    for (std::size_t l = 0; l < length; ++l) {
      sg += dy[c * length + l] * xhat[c * length + l];
      sb += dy[c * length + l];
    }
    dgamma[c] += sg;
    dbeta[c] += sb;
  }
  for (std::size_t g = 0; g < groups; ++g) {
    const std::size_t base = g * n;
    double sum1 = 0.0;
    double sum2 = 0.0;
    for (std::size_t i = 0; i < n; ++i) {
      const double dxh = dy[base + i] * gamma[(base + i) / length];
      sum1 += dxh;
      sum2 += dxh * xhat[base + i];
    }
    const double scale = rstd[g] / static_cast<double>(n);
    for (std::size_t i = 0; i < n; ++i) {
      const double dxh = dy[base + i] * gamma[(base + i) / length];
      dx[base + i] = scale * (static_cast<double>(n) * dxh - sum1 - xhat[base + i] * sum2);
    }
  }
  return dx;
}

// conv3 -> group norm -> FiLM(cond) -> SiLU
Vec block_forward(const ParameterSet& p, const UNet1d::Layout::Block& b,
                  std::size_t in_ch, std::size_t out_ch, std::size_t length,
                  std::size_t groups, const Vec& x, const Vec& cond,
                  UNet1d::Trace::Block& tr) {
  tr.input = x;
  const Vec conv = conv_forward(p, b.conv_w, b.conv_b, conv3(in_ch, out_ch, length), x);
  group_norm_forward(conv, out_ch, length, groups, p[b.norm_w], p[b.norm_b], tr.xhat,
                     tr.rstd, tr.normed);
  tr.film = linear(p[b.film_w], p[b.film_b], cond);
  tr.film_out.resize(out_ch * length);
  Vec act(out_ch * length);
  for (std::size_t c = 0; c < out_ch; ++c) {
    const double scale = 1.0 + tr.film[c];
    const double shift = tr.film[out_ch + c];
    for (std::size_t l = 0; l < length; ++l) {
      const std::size_t i = c * length + l;
      tr.film_out[i] = tr.normed[i] * scale + shift;
      act[i] = silu(tr.film_out[i]);
    }
  }
  return act;
}

Vec block_backward(const ParameterSet& p, ParameterSet& g,
                   const UNet1d::Layout::Block& b, std::size_t in_ch,
                   std::size_t out_ch, std::size_t length, std::size_t groups,
                   const Vec& cond, const UNet1d::Trace::Block& tr, const Vec& dact,
                   Vec& dcond) {
  Vec dfilm(2 * out_ch, 0.0);
  Vec dnormed(out_ch * length);
  for (std::size_t c = 0; c < out_ch; ++c) {
    const double scale = 1.0 + tr.film[c];
    double dscale = 0.0;
    double dshift = 0.0;
    for (std::size_t l = 0; l < length; ++l) {
      const std::size_t i = c * length + l;
      const double df = dact[i] * silu_grad(tr.film_out[i]);
      dscale += df * tr.normed[i];
      dshift += df;
      dnormed[i] = df * scale;
    }
    dfilm[c] = dscale;
    dfilm[out_ch + c] = dshift;
  }
  const Vec dc = linear_backward(p[b.film_w], cond, dfilm, g[b.film_w], g[b.film_b]);
  for (std::size_t i = 0; i < dcond.size(); ++i) dcond[i] += dc[i];
  const Vec dconv = group_norm_backward(dnormed, tr.xhat, tr.rstd, out_ch, length,
                                        groups, p[b.norm_w], g[b.norm_w], g[b.norm_b]);
  return conv_backward(p, g, b.conv_w, b.conv_b, conv3(in_ch, out_ch, length),
                       tr.input, dconv);
}

void add_row_bias(Vec& y, const Tensor& b, std::size_t rows, std::size_t length) {
  for (std::size_t r = 0; r < rows; ++r)
    for (std::size_t l = 0; l < length; ++l) y[r * length + l] += b[r];
}

void row_sums_into(const Vec& dy, Tensor& db, std::size_t rows, std::size_t length) {
  for (std::size_t r = 0; r < rows; ++r) {
    double s = 0.0;
    for (std::size_t l = 0; l < length; ++l) s += dy[r * length + l];
    db[r] += s;
  }
}

// 1x1 projection W [H][H] applied per frame.
Vec project(const Tensor& w, const Tensor& b, const Vec& x, std::size_t h,
            std::size_t length) {
  Vec y(h * length);
  kernels::matmul(h, h, length, false, false, w.values(), x, y, false);
  add_row_bias(y, b, h, length);
  return y;
}

void project_backward(const Tensor& w, const Vec& x, const Vec& dy, std::size_t h,
                      std::size_t length, Tensor& dw, Tensor& db, Vec& dx) {
  kernels::matmul(h, length, h, false, true, dy, x, dw.values(), true);
  row_sums_into(dy, db, h, length);
  kernels::matmul(h, h, length, true, false, w.values(), dy, dx, true);
}

}  // namespace

UNet1d::UNet1d(DenoiserConfig config) : config_(config) {
  config_.validate();
  auto layout = std::make_shared<Layout>();
  register_params(config_, layout.get());
  layout_ = std::move(layout);
}

ParameterSet UNet1d::empty_params() const { return register_params(config_, nullptr); }

ParameterSet UNet1d::init_params(Rng& rng) const {
  ParameterSet p = empty_params();
  const Layout& l = *layout_;
  auto fan_in_normal = [&](std::size_t idx, std::size_t fan_in) {
    const double std = 1.0 / std::sqrt(static_cast<double>(fan_in));
    for (double& v : p[idx].values()) v = std * rng.normal();
  };
  const auto& c = config_;
  const std::size_t H = c.hidden;
  for (std::size_t k = 0; k < c.tracks; ++k) fan_in_normal(l.time_w[k], c.time_embed);
  for (double& v : p[l.embedding].values()) v = 0.02 * rng.normal();
  fan_in_normal(l.fc1_w, c.tracks * c.time_embed + c.prompt_embed);
  fan_in_normal(l.fc2_w, c.cond_width);
  fan_in_normal(l.stem_w, c.io_channels() * 3);
  auto init_block = [&](const Layout::Block& b, std::size_t in_ch) {
    fan_in_normal(b.conv_w, in_ch * 3);
    p[b.norm_w].fill(1.0);
    // film weights stay zero: every block starts as an unmodulated norm
  };
  for (std::size_t j = 0; j < c.depth; ++j) {
    init_block(l.down[j], H);
    fan_in_normal(l.downsample_w[j], H * 2);
  }
  init_block(l.mid, H);
  for (std::size_t idx : {l.q_w, l.k_w, l.v_w, l.o_w}) fan_in_normal(idx, H);
  for (std::size_t j = 0; j < c.depth; ++j) init_block(l.up[j], 2 * H);
  return p;
}

std::vector<double> UNet1d::embed_timesteps(const ParameterSet& params,
                                            const TimestepVector& tvec) const {
  require(tvec.steps.size() == config_.tracks, "timestep vector length != track count");
  const std::size_t E = config_.time_embed;
  Vec out;
  out.reserve(config_.tracks * E);
  for (std::size_t k = 0; k < config_.tracks; ++k) {
    require(tvec.steps[k] >= 0, "timesteps must be non-negative");
    const Vec e = linear(params[layout_->time_w[k]], params[layout_->time_b[k]],
                         sinusoid(tvec.steps[k], E));
    out.insert(out.end(), e.begin(), e.end());
  }
  return out;
}

TrackLatents UNet1d::forward(const ParameterSet& params, const TrackLatents& z,
                             const TimestepVector& tvec,
                             const PromptTokens& prompt) const {
  Trace trace;
  return forward(params, z, tvec, prompt, trace);
}

TrackLatents UNet1d::forward(const ParameterSet& params, const TrackLatents& z,
                             const TimestepVector& tvec, const PromptTokens& prompt,
                             Trace& tr) const {
  const auto& c = config_;
  const Layout& l = *layout_;
  require(z.tracks() == c.tracks && z.channels() == c.latent_channels &&
              z.frames() == c.frames,
          "denoiser input shape does not match the model config");
  require(tvec.steps.size() == c.tracks, "timestep vector length != track count");
  const std::size_t H = c.hidden;
  const std::size_t E = c.time_embed;
  const std::size_t G = c.groups();

  tr.tvec = tvec;
  tr.prompt_ids = prompt.ids();
  for (auto id : tr.prompt_ids)
    require(id < c.vocab, "prompt token " + std::to_string(id) + " outside vocabulary");

  // conditioning vector
  tr.sinusoids.clear();
  tr.cond_in.assign(c.tracks * E + c.prompt_embed, 0.0);
  for (std::size_t k = 0; k < c.tracks; ++k) {
    require(tvec.steps[k] >= 0, "timesteps must be non-negative");
    const Vec s = sinusoid(tvec.steps[k], E);
    tr.sinusoids.insert(tr.sinusoids.end(), s.begin(), s.end());
    const Vec e = linear(params[l.time_w[k]], params[l.time_b[k]], s);
    std::copy(e.begin(), e.end(), tr.cond_in.begin() + static_cast<std::ptrdiff_t>(k * E));
  }
  const Tensor& table = params[l.embedding];
  const double inv_tokens = 1.0 / static_cast<double>(tr.prompt_ids.size());
  for (auto id : tr.prompt_ids)
    for (std::size_t d = 0; d < c.prompt_embed; ++d)
      tr.cond_in[c.tracks * E + d] += table[id * c.prompt_embed + d] * inv_tokens;
  tr.hidden_pre = linear(params[l.fc1_w], params[l.fc1_b], tr.cond_in);
  tr.hidden_act = silu(tr.hidden_pre);
  tr.cond_pre = linear(params[l.fc2_w], params[l.fc2_b], tr.hidden_act);
  tr.cond = silu(tr.cond_pre);

  // trunk
  std::size_t L = c.frames;
  tr.stem_in.assign(z.values().begin(), z.values().end());
  Vec h = conv_forward(params, l.stem_w, l.stem_b, conv3(c.io_channels(), H, L), tr.stem_in);

  tr.down.resize(c.depth);
  tr.skips.resize(c.depth);
  for (std::size_t j = 0; j < c.depth; ++j) {
    const Vec a = block_forward(params, l.down[j], H, H, L, G, h, tr.cond, tr.down[j]);
    for (std::size_t i = 0; i < h.size(); ++i) h[i] += a[i];
    tr.skips[j] = h;
    h = conv_forward(params, l.downsample_w[j], l.downsample_b[j], conv_down(H, L), h);
    L /= 2;
  }

  {
    const Vec a = block_forward(params, l.mid, H, H, L, G, h, tr.cond, tr.mid);
    for (std::size_t i = 0; i < h.size(); ++i) h[i] += a[i];
  }

  {
    auto& at = tr.attn;
    at.input = h;
    at.q = project(params[l.q_w], params[l.q_b], h, H, L);
    at.k = project(params[l.k_w], params[l.k_b], h, H, L);
    at.v = project(params[l.v_w], params[l.v_b], h, H, L);
    at.probs.assign(L * L, 0.0);
    kernels::matmul(L, H, L, true, false, at.q, at.k, at.probs, false);
    const double scale = 1.0 / std::sqrt(static_cast<double>(H));
    for (std::size_t i = 0; i < L; ++i) {
      double* row = at.probs.data() + i * L;
      double mx = -INFINITY;
      for (std::size_t j = 0; j < L; ++j) {
        row[j] *= scale;
        mx = std::max(mx, row[j]);
      }
      double sum = 0.0;
      for (std::size_t j = 0; j < L; ++j) {
        row[j] = std::exp(row[j] - mx);
        sum += row[j];
      }
      for (std::size_t j = 0; j < L; ++j) row[j] /= sum;
    }
    at.mixed.assign(H * L, 0.0);
    kernels::matmul(H, L, L, false, true, at.v, at.probs, at.mixed, false);
    const Vec y = project(params[l.o_w], params[l.o_b], at.mixed, H, L);
    for (std::size_t i = 0; i < h.size(); ++i) h[i] += y[i];
  }

  tr.up.resize(c.depth);
  for (std::size_t j = c.depth; j-- > 0;) {
    const std::size_t L2 = L * 2;
    Vec cat(2 * H * L2);
    for (std::size_t ch = 0; ch < H; ++ch)
      for (std::size_t t = 0; t < L2; ++t) cat[ch * L2 + t] = h[ch * L + t / 2];
    std::copy(tr.skips[j].begin(), tr.skips[j].end(),
              cat.begin() + static_cast<std::ptrdiff_t>(H * L2));
    const Vec a = block_forward(params, l.up[j], 2 * H, H, L2, G, cat, tr.cond, tr.up[j]);
    h.assign(cat.begin(), cat.begin() + static_cast<std::ptrdiff_t>(H * L2));
    for (std::size_t i = 0; i < h.size(); ++i) h[i] += a[i];
    L = L2;
  }

  tr.out_in = h;
  const Vec out = conv_forward(params, l.out_w, l.out_b, conv3(H, c.io_channels(), L), h);
  TrackLatents result(c.tracks, c.latent_channels, c.frames);
  std::copy(out.begin(), out.end(), result.values().begin());
  tr.skip_scale = linear(params[l.skip_w], params[l.skip_b], tr.cond);
  const std::size_t per_track = c.latent_channels * c.frames;
  auto r = result.values();
  for (std::size_t k = 0; k < c.tracks; ++k)
    for (std::size_t i = k * per_track; i < (k + 1) * per_track; ++i)
      r[i] += tr.skip_scale[k] * tr.stem_in[i];
  return result;
}

void UNet1d::backward(const ParameterSet& params, const Trace& tr,
                      const TrackLatents& output_grad, ParameterSet& g) const {
  const auto& c = config_;
  const Layout& l = *layout_;
  require(g.same_layout(params), "gradient buffer layout does not match parameters");
  require(output_grad.tracks() == c.tracks && output_grad.channels() == c.latent_channels &&
              output_grad.frames() == c.frames,
          "output gradient shape does not match the model config");
  const std::size_t H = c.hidden;
  const std::size_t E = c.time_embed;
  const std::size_t G = c.groups();
  Vec dcond(c.cond_width, 0.0);

  std::size_t L = c.frames;
  const Vec dout(output_grad.values().begin(), output_grad.values().end());
  {
    const std::size_t per_track = c.latent_channels * c.frames;
    Vec dscale(c.tracks, 0.0);
    for (std::size_t k = 0; k < c.tracks; ++k)
      for (std::size_t i = k * per_track; i < (k + 1) * per_track; ++i)
        dscale[k] += dout[i] * tr.stem_in[i];
    const Vec d = linear_backward(params[l.skip_w], tr.cond, dscale, g[l.skip_w], g[l.skip_b]);
    for (std::size_t m = 0; m < d.size(); ++m) dcond[m] += d[m];
  }
  Vec dh = conv_backward(params, g, l.out_w, l.out_b, conv3(H, c.io_channels(), L),
                         tr.out_in, dout);

  std::vector<Vec> dskips(c.depth);
  for (std::size_t j = 0; j < c.depth; ++j) {
    // h_out = up(h_in) + block(cat(up(h_in), skip))
    const Vec dcat = block_backward(params, g, l.up[j], 2 * H, H, L, G, tr.cond,
                                    tr.up[j], dh, dcond);
    const std::size_t half = L / 2;
    Vec dprev(H * half, 0.0);
    for (std::size_t ch = 0; ch < H; ++ch)
      for (std::size_t t = 0; t < L; ++t)
        dprev[ch * half + t / 2] += dh[ch * L + t] + dcat[ch * L + t];
    dskips[j].assign(dcat.begin() + static_cast<std::ptrdiff_t>(H * L), dcat.end());
    dh = std::move(dprev);
    L = half;
  }

  {
    const auto& at = tr.attn;
    const double scale = 1.0 / std::sqrt(static_cast<double>(H));
    Vec dmixed(H * L, 0.0);
    project_backward(params[l.o_w], at.mixed, dh, H, L, g[l.o_w], g[l.o_b], dmixed);
    Vec dv(H * L, 0.0);
    kernels::matmul(H, L, L, false, false, dmixed, at.probs, dv, false);
    Vec dprobs(L * L, 0.0);
    kernels::matmul(L, H, L, true, false, dmixed, at.v, dprobs, false);
    Vec dscores(L * L);
    for (std::size_t i = 0; i < L; ++i) {
      double dot = 0.0;
      for (std::size_t j = 0; j < L; ++j) dot += at.probs[i * L + j] * dprobs[i * L + j];
      for (std::size_t j = 0; j < L; ++j)
        dscores[i * L + j] = at.probs[i * L + j] * (dprobs[i * L + j] - dot) * scale;
    }
    Vec dq(H * L, 0.0);
    kernels::matmul(H, L, L, false, true, at.k, dscores, dq, false);
    Vec dk(H * L, 0.0);
    kernels::matmul(H, L, L, false, false, at.q, dscores, dk, false);
    Vec dx = dh;  // residual path
    project_backward(params[l.q_w], at.input, dq, H, L, g[l.q_w], g[l.q_b], dx);
    project_backward(params[l.k_w], at.input, dk, H, L, g[l.k_w], g[l.k_b], dx);
    project_backward(params[l.v_w], at.input, dv, H, L, g[l.v_w], g[l.v_b], dx);
    dh = std::move(dx);
  }

  {
    const Vec dx = block_backward(params, g, l.mid, H, H, L, G, tr.cond, tr.mid, dh, dcond);
    for (std::size_t i = 0; i < dh.size(); ++i) dh[i] += dx[i];
  }

  for (std::size_t j = c.depth; j-- > 0;) {
    Vec dskip = conv_backward(params, g, l.downsample_w[j], l.downsample_b[j],
                              conv_down(H, L * 2), tr.skips[j], dh);
    L *= 2;
    for (std::size_t i = 0; i < dskip.size(); ++i) dskip[i] += dskips[j][i];
    const Vec dx = block_backward(params, g, l.down[j], H, H, L, G, tr.cond, tr.down[j],
                                  dskip, dcond);
    for (std::size_t i = 0; i < dskip.size(); ++i) dskip[i] += dx[i];
    dh = std::move(dskip);
  }

  conv_backward(params, g, l.stem_w, l.stem_b, conv3(c.io_channels(), H, L), tr.stem_in,
                dh, false);

  // conditioning MLP
  Vec dpre(c.cond_width);
  for (std::size_t i = 0; i < dpre.size(); ++i) dpre[i] = dcond[i] * silu_grad(tr.cond_pre[i]);
  Vec dhidden = linear_backward(params[l.fc2_w], tr.hidden_act, dpre, g[l.fc2_w], g[l.fc2_b]);
  for (std::size_t i = 0; i < dhidden.size(); ++i) dhidden[i] *= silu_grad(tr.hidden_pre[i]);
  const Vec dcond_in =
      linear_backward(params[l.fc1_w], tr.cond_in, dhidden, g[l.fc1_w], g[l.fc1_b]);

  for (std::size_t k = 0; k < c.tracks; ++k) {
    const Vec s(tr.sinusoids.begin() + static_cast<std::ptrdiff_t>(k * E),
                tr.sinusoids.begin() + static_cast<std::ptrdiff_t>((k + 1) * E));
    const Vec de(dcond_in.begin() + static_cast<std::ptrdiff_t>(k * E),
                 dcond_in.begin() + static_cast<std::ptrdiff_t>((k + 1) * E));
    linear_backward(params[l.time_w[k]], s, de, g[l.time_w[k]], g[l.time_b[k]]);
  }
  Tensor& dtable = g[l.embedding];
  const double inv_tokens = 1.0 / static_cast<double>(tr.prompt_ids.size());
  for (auto id : tr.prompt_ids)
    for (std::size_t d = 0; d < c.prompt_embed; ++d)
      dtable[id * c.prompt_embed + d] += dcond_in[c.tracks * E + d] * inv_tokens;
}

ParameterSet UNet1d::backward(const ParameterSet& params, const TrackLatents& z,
                              const TimestepVector& tvec, const PromptTokens& prompt,
                              const TrackLatents& output_grad) const {
  Trace trace;
  forward(params, z, tvec, prompt, trace);
  ParameterSet grads = params.zeros_like();
  backward(params, trace, output_grad, grads);
  if (!grads.all_finite())
    fail(ErrorCode::Numerical, "non-finite value in denoiser gradients");
  return grads;
}

Denoiser::Denoiser(UNet1d model, std::shared_ptr<const ParameterSet> params)
    : model_(std::move(model)), params_(std::move(params)) {
  require(params_ != nullptr, "denoiser needs a parameter snapshot");
  require(params_->same_layout(model_.empty_params()),
          "parameter snapshot does not match the model layout");
}

TrackLatents Denoiser::predict(const TrackLatents& z, const TimestepVector& tvec,
                               const PromptTokens& prompt) const {
  return model_.forward(*params_, z, tvec, prompt);
}

}  // namespace stemforge::nn
