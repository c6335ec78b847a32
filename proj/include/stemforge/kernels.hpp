// Copyright 2026 The StemForge Authors
// SPDX-License-Identifier: Apache-2.0

#pragma once

// Dense kernels behind the denoiser. Each kernel has a plain serial
// reference and an OpenMP version. The OpenMP versions partition work by
// output row so every output element is produced by exactly one thread in
// the serial summation order; results are bit-identical to the reference.

#include <cstddef>
#include <span>

namespace stemforge::kernels {

struct Conv1dShape {
  std::size_t in_channels;
  std::size_t out_channels;
  std::size_t length;  // input length
  std::size_t kernel;
  std::size_t stride = 1;
  std::size_t pad = 0;

  std::size_t out_length() const noexcept {
    return (length + 2 * pad - kernel) / stride + 1;
  }
  std::size_t weight_size() const noexcept {
    return out_channels * in_channels * kernel;
  }
};

namespace serial {

/// y[o][l] = b[o] + sum_{i,k} w[o][i][k] * x[i][l*stride + k - pad]
void conv1d_forward(const Conv1dShape& s, std::span<const double> x,
                    std::span<const double> w, std::span<const double> b,
                    std::span<double> y);

/// dx is overwritten; dw and db are accumulated into.
void conv1d_backward(const Conv1dShape& s, std::span<const double> x,
                     std::span<const double> w, std::span<const double> dy,
                     std::span<double> dx, std::span<double> dw,
                     std::span<double> db);

/// C[m][n] (+)= sum_k op(A)[m][k] * op(B)[k][n]; A is m x k (or k x m when
/// trans_a), B is k x n (or n x k when trans_b).
void matmul(std::size_t m, std::size_t k, std::size_t n, bool trans_a,
            bool trans_b, std::span<const double> a, std::span<const double> b,
            std::span<double> c, bool accumulate);

}  // namespace serial

namespace omp {

void conv1d_forward(const Conv1dShape& s, std::span<const double> x,
                    std::span<const double> w, std::span<const double> b,
                    std::span<double> y);

void conv1d_backward(const Conv1dShape& s, std::span<const double> x,
                     std::span<const double> w, std::span<const double> dy,
                     std::span<double> dx, std::span<double> dw,
                     std::span<double> db);

void matmul(std::size_t m, std::size_t k, std::size_t n, bool trans_a,
            bool trans_b, std::span<const double> a, std::span<const double> b,
            std::span<double> c, bool accumulate);

}  // namespace omp

// The denoiser calls these; they forward to the OpenMP kernels.
using omp::conv1d_backward;
using omp::conv1d_forward;
using omp::matmul;

}  // namespace stemforge::kernels
