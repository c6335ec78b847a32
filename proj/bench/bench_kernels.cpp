// Copyright 2026 The StemForge Authors
// SPDX-License-Identifier: Apache-2.0

// Serial reference kernels against their OpenMP versions, plus a full
// denoiser pass at the micro training size.

#include <benchmark/benchmark.h>
#include <omp.h>

#include <vector>

#include "stemforge/denoiser.hpp"
#include "stemforge/kernels.hpp"
#include "stemforge/rng.hpp"

using namespace stemforge;
namespace k = stemforge::kernels;

namespace {

std::vector<double> randn(std::size_t n, std::uint64_t seed) {
  std::vector<double> v(n);
  Rng rng(seed);
  rng.fill_normal(v);
  return v;
}

// args: in channels, out channels, length
k::Conv1dShape conv_shape(const benchmark::State& st) {
  return {static_cast<std::size_t>(st.range(0)), static_cast<std::size_t>(st.range(1)),
          static_cast<std::size_t>(st.range(2)), 3, 1, 1};
}

template <bool Parallel>
void BM_ConvForward(benchmark::State& st) {
  const auto s = conv_shape(st);
  const auto x = randn(s.in_channels * s.length, 1);
  const auto w = randn(s.weight_size(), 2);
  const auto b = randn(s.out_channels, 3);
  std::vector<double> y(s.out_channels * s.out_length());
  for (auto _ : st) {
    if constexpr (Parallel)
      k::omp::conv1d_forward(s, x, w, b, y);
    else
      k::serial::conv1d_forward(s, x, w, b, y);
    benchmark::DoNotOptimize(y.data());
  }
  st.counters["MAC/s"] = benchmark::Counter(
      static_cast<double>(s.weight_size() * s.out_length()), benchmark::Counter::kIsIterationInvariantRate);
  st.counters["threads"] = omp_get_max_threads();
}

template <bool Parallel>
void BM_ConvBackward(benchmark::State& st) {
  const auto s = conv_shape(st);
  const auto x = randn(s.in_channels * s.length, 1);
  const auto w = randn(s.weight_size(), 2);
  const auto dy = randn(s.out_channels * s.out_length(), 3);
  std::vector<double> dx(x.size()), dw(w.size()), db(s.out_channels);
  for (auto _ : st) {
    if constexpr (Parallel)
      k::omp::conv1d_backward(s, x, w, dy, dx, dw, db);
    else
      k::serial::conv1d_backward(s, x, w, dy, dx, dw, db);
    benchmark::DoNotOptimize(dx.data());
  }
  st.counters["threads"] = omp_get_max_threads();
}

template <bool Parallel>
void BM_Matmul(benchmark::State& st) {
  const auto n = static_cast<std::size_t>(st.range(0));
  const auto a = randn(n * n, 1), b = randn(n * n, 2);
  std::vector<double> c(n * n);
  for (auto _ : st) {
    if constexpr (Parallel)
      k::omp::matmul(n, n, n, false, true, a, b, c, false);
    else
      k::serial::matmul(n, n, n, false, true, a, b, c, false);
    benchmark::DoNotOptimize(c.data());
  }
  st.counters["threads"] = omp_get_max_threads();
}

nn::DenoiserConfig micro() {
  nn::DenoiserConfig c;
  c.tracks = 4;
  c.latent_channels = 32;
  c.frames = 64;
  c.hidden = 32;
  c.depth = 2;
  c.time_embed = 16;
  c.vocab = 64;
  c.prompt_embed = 16;
  c.cond_width = 64;
  return c;
}

void BM_DenoiserForward(benchmark::State& st) {
  const nn::UNet1d model(micro());
  Rng rng(4);
  const auto p = model.init_params(rng);
  TrackLatents z(4, 32, 64);
  rng.fill_normal(z.values());
  const nn::TimestepVector tv{{10, 0, 100, 10}};
  const PromptTokens prompt{3, {20, 30, 40}};
  for (auto _ : st) benchmark::DoNotOptimize(model.forward(p, z, tv, prompt));
}

void BM_DenoiserForwardBackward(benchmark::State& st) {
  const nn::UNet1d model(micro());
  Rng rng(4);
  const auto p = model.init_params(rng);
  TrackLatents z(4, 32, 64), g(4, 32, 64);
  rng.fill_normal(z.values());
  rng.fill_normal(g.values());
  const nn::TimestepVector tv{{10, 0, 100, 10}};
  const PromptTokens prompt{3, {20, 30, 40}};
  for (auto _ : st) benchmark::DoNotOptimize(model.backward(p, z, tv, prompt, g));
}

}  // namespace

BENCHMARK(BM_ConvForward<false>)->Name("conv1d_forward/serial")->Args({128, 32, 64})->Args({64, 64, 256});
BENCHMARK(BM_ConvForward<true>)->Name("conv1d_forward/omp")->Args({128, 32, 64})->Args({64, 64, 256});
BENCHMARK(BM_ConvBackward<false>)->Name("conv1d_backward/serial")->Args({128, 32, 64})->Args({64, 64, 256});
BENCHMARK(BM_ConvBackward<true>)->Name("conv1d_backward/omp")->Args({128, 32, 64})->Args({64, 64, 256});
BENCHMARK(BM_Matmul<false>)->Name("matmul/serial")->Arg(64)->Arg(256);
BENCHMARK(BM_Matmul<true>)->Name("matmul/omp")->Arg(64)->Arg(256);
BENCHMARK(BM_DenoiserForward)->Name("denoiser/forward")->Unit(benchmark::kMillisecond);
BENCHMARK(BM_DenoiserForwardBackward)->Name("denoiser/forward_backward")->Unit(benchmark::kMillisecond);

BENCHMARK_MAIN();
