// Copyright 2026 The StemForge Authors
// SPDX-License-Identifier: Apache-2.0

#include "stemforge/kernels.hpp"

#include <algorithm>

namespace stemforge::kernels {
namespace {

// Below this many multiply-adds the OpenMP fork costs more than it saves.
constexpr std::size_t kParallelThreshold = 1 << 14;

// Output positions l for which l*stride + k - pad lands inside [0, length).
struct TapRange {
  std::size_t begin;
  std::size_t end;
};

TapRange tap_range(const Conv1dShape& s, std::size_t k) {
  const std::size_t out_len = s.out_length();
  std::size_t begin = 0;
  if (k < s.pad) begin = (s.pad - k + s.stride - 1) / s.stride;
  // largest l with l*stride + k - pad <= length - 1
  const std::ptrdiff_t hi =
      static_cast<std::ptrdiff_t>(s.length) - 1 + static_cast<std::ptrdiff_t>(s.pad) -
      static_cast<std::ptrdiff_t>(k);
  std::size_t end = 0;
  if (hi >= 0) end = std::min(out_len, static_cast<std::size_t>(hi) / s.stride + 1);
  return {begin, std::max(begin, end)};
}

// Kernel 3, stride 1, pad 1 with at least two samples: the taps of the
// interior positions are all in range, so the inner loop is contiguous.
bool is_same3(const Conv1dShape& s) {
  return s.kernel == 3 && s.stride == 1 && s.pad == 1 && s.length >= 2;
}

void conv_forward_row(const Conv1dShape& s, std::size_t o, const double* x,
                      const double* w, const double* b, double* y) {
  const std::size_t out_len = s.out_length();
  double* yo = y + o * out_len;
  std::fill(yo, yo + out_len, b[o]);
  if (is_same3(s)) {
    const std::size_t n = s.length;
    std::size_t i = 0;
    // Two input channels per sweep; each output still adds its terms in
    // (channel, tap) order.
    for (; i + 1 < s.in_channels; i += 2) {
      const double* xa = x + i * n;
      const double* xb = xa + n;
      const double* wa = w + (o * s.in_channels + i) * 3;
      const double* wb = wa + 3;
      const double a0 = wa[0], a1 = wa[1], a2 = wa[2];
      const double b0 = wb[0], b1 = wb[1], b2 = wb[2];
      yo[0] += a1 * xa[0];
      yo[0] += a2 * xa[1];
      yo[0] += b1 * xb[0];
      yo[0] += b2 * xb[1];
      for (std::size_t l = 1; l + 1 < n; ++l) {
        double v = yo[l];
        v += a0 * xa[l - 1];
        v += a1 * xa[l];
        v += a2 * xa[l + 1];
        v += b0 * xb[l - 1];
        v += b1 * xb[l];
        v += b2 * xb[l + 1];
        yo[l] = v;
      }
      yo[n - 1] += a0 * xa[n - 2];
      yo[n - 1] += a1 * xa[n - 1];
      yo[n - 1] += b0 * xb[n - 2];
      yo[n - 1] += b1 * xb[n - 1];
    }
    for (; i < s.in_channels; ++i) {
      const double* xi = x + i * n;
      const double* wo = w + (o * s.in_channels + i) * 3;
      const double w0 = wo[0], w1 = wo[1], w2 = wo[2];
      yo[0] += w1 * xi[0];
      yo[0] += w2 * xi[1];
      for (std::size_t l = 1; l + 1 < n; ++l) {
        double v = yo[l];
        v += w0 * xi[l - 1];
        v += w1 * xi[l];
        v += w2 * xi[l + 1];
        yo[l] = v;
      }
      yo[n - 1] += w0 * xi[n - 2];
      yo[n - 1] += w1 * xi[n - 1];
    }
    return;
  }
  for (std::size_t i = 0; i < s.in_channels; ++i) {
    const double* xi = x + i * s.length;
    const double* wo = w + (o * s.in_channels + i) * s.kernel;
    for (std::size_t k = 0; k < s.kernel; ++k) {
      const double wk = wo[k];
      const TapRange r = tap_range(s, k);
      for (std::size_t l = r.begin; l < r.end; ++l)
        yo[l] += wk * xi[l * s.stride + k - s.pad];
    }
  }
}

void conv_weight_grad_row(const Conv1dShape& s, std::size_t o, const double* x,
                          const double* dy, double* dw, double* db) {
  const std::size_t out_len = s.out_length();
  const double* dyo = dy + o * out_len;
  double bias = 0.0;
#pragma omp simd reduction(+ : bias)
  for (std::size_t l = 0; l < out_len; ++l) bias += dyo[l];
  db[o] += bias;
  if (is_same3(s)) {
    const std::size_t n = s.length;
    for (std::size_t i = 0; i < s.in_channels; ++i) {
      const double* xi = x + i * n;
      double* dwo = dw + (o * s.in_channels + i) * 3;
      double a0 = dyo[n - 1] * xi[n - 2];
      double a1 = dyo[0] * xi[0];
      double a2 = dyo[0] * xi[1];
#pragma omp simd reduction(+ : a0, a1, a2)
      for (std::size_t l = 1; l < n - 1; ++l) {
        a0 += dyo[l] * xi[l - 1];
        a1 += dyo[l] * xi[l];
        a2 += dyo[l] * xi[l + 1];
      }
      a1 += dyo[n - 1] * xi[n - 1];
      dwo[0] += a0;
      dwo[1] += a1;
      dwo[2] += a2;
    }
    return;
  }
  for (std::size_t i = 0; i < s.in_channels; ++i) {
    const double* xi = x + i * s.length;
    double* dwo = dw + (o * s.in_channels + i) * s.kernel;
    for (std::size_t k = 0; k < s.kernel; ++k) {
      const TapRange r = tap_range(s, k);
      double acc = 0.0;
#pragma omp simd reduction(+ : acc)
      for (std::size_t l = r.begin; l < r.end; ++l)
        acc += dyo[l] * xi[l * s.stride + k - s.pad];
      dwo[k] += acc;
    }
  }
}

void conv_input_grad_row(const Conv1dShape& s, std::size_t i, const double* w,
                         const double* dy, double* dx) {
  const std::size_t out_len = s.out_length();
  double* dxi = dx + i * s.length;
  std::fill(dxi, dxi + s.length, 0.0);
  if (is_same3(s)) {
    const std::size_t n = s.length;
    std::size_t o = 0;
    for (; o + 1 < s.out_channels; o += 2) {
      const double* da = dy + o * out_len;
      const double* db2 = da + out_len;
      const double* wa = w + (o * s.in_channels + i) * 3;
      const double* wb = w + ((o + 1) * s.in_channels + i) * 3;
      const double a0 = wa[0], a1 = wa[1], a2 = wa[2];
      const double b0 = wb[0], b1 = wb[1], b2 = wb[2];
      dxi[0] += a0 * da[1];
      dxi[0] += a1 * da[0];
      dxi[0] += b0 * db2[1];
      dxi[0] += b1 * db2[0];
      for (std::size_t j = 1; j + 1 < n; ++j) {
        double v = dxi[j];
        v += a0 * da[j + 1];
        v += a1 * da[j];
        v += a2 * da[j - 1];
        v += b0 * db2[j + 1];
        v += b1 * db2[j];
        v += b2 * db2[j - 1];
        dxi[j] = v;
      }
      dxi[n - 1] += a1 * da[n - 1];
      dxi[n - 1] += a2 * da[n - 2];
      dxi[n - 1] += b1 * db2[n - 1];
      dxi[n - 1] += b2 * db2[n - 2];
    }
    for (; o < s.out_channels; ++o) {
      const double* dyo = dy + o * out_len;
      const double* wo = w + (o * s.in_channels + i) * 3;
      const double w0 = wo[0], w1 = wo[1], w2 = wo[2];
      dxi[0] += w0 * dyo[1];
      dxi[0] += w1 * dyo[0];
      for (std::size_t j = 1; j + 1 < n; ++j) {
        double v = dxi[j];
        v += w0 * dyo[j + 1];
        v += w1 * dyo[j];
        v += w2 * dyo[j - 1];
        dxi[j] = v;
      }
      dxi[n - 1] += w1 * dyo[n - 1];
      dxi[n - 1] += w2 * dyo[n - 2];
    }
    return;
  }
  for (std::size_t o = 0; o < s.out_channels; ++o) {
    const double* dyo = dy + o * out_len;
    const double* wo = w + (o * s.in_channels + i) * s.kernel;
    for (std::size_t k = 0; k < s.kernel; ++k) {
      const double wk = wo[k];
      const TapRange r = tap_range(s, k);
      for (std::size_t l = r.begin; l < r.end; ++l)
        dxi[l * s.stride + k - s.pad] += wk * dyo[l];
    }
  }
}

void matmul_row(std::size_t row, std::size_t m, std::size_t k, std::size_t n,
                bool trans_a, bool trans_b, const double* a, const double* b,
                double* c, bool accumulate) {
  double* crow = c + row * n;
  if (!accumulate) std::fill(crow, crow + n, 0.0);
  if (trans_b) {
    for (std::size_t j = 0; j < n; ++j) {
      double acc = 0.0;
#pragma omp simd reduction(+ : acc)
      for (std::size_t p = 0; p < k; ++p) {
        const double av = trans_a ? a[p * m + row] : a[row * k + p];
        acc += av * b[j * k + p];
      }
      crow[j] += acc;
    }
    return;
  }
  for (std::size_t p = 0; p < k; ++p) {
    const double av = trans_a ? a[p * m + row] : a[row * k + p];
    const double* brow = b + p * n;
    for (std::size_t j = 0; j < n; ++j) crow[j] += av * brow[j];
  }
}

}  // namespace

namespace serial {

void conv1d_forward(const Conv1dShape& s, std::span<const double> x,
                    std::span<const double> w, std::span<const double> b,
                    std::span<double> y) {
  for (std::size_t o = 0; o < s.out_channels; ++o)
    conv_forward_row(s, o, x.data(), w.data(), b.data(), y.data());
}

void conv1d_backward(const Conv1dShape& s, std::span<const double> x,
                     std::span<const double> w, std::span<const double> dy,
                     std::span<double> dx, std::span<double> dw,
                     std::span<double> db) {
  for (std::size_t o = 0; o < s.out_channels; ++o)
    conv_weight_grad_row(s, o, x.data(), dy.data(), dw.data(), db.data());
  if (dx.empty()) return;
  for (std::size_t i = 0; i < s.in_channels; ++i)
    conv_input_grad_row(s, i, w.data(), dy.data(), dx.data());
}

void matmul(std::size_t m, std::size_t k, std::size_t n, bool trans_a,
            bool trans_b, std::span<const double> a, std::span<const double> b,
            std::span<double> c, bool accumulate) {
  for (std::size_t row = 0; row < m; ++row)
    matmul_row(row, m, k, n, trans_a, trans_b, a.data(), b.data(), c.data(),
               accumulate);
}

}  // namespace serial

namespace omp {

void conv1d_forward(const Conv1dShape& s, std::span<const double> x,
                    std::span<const double> w, std::span<const double> b,
                    std::span<double> y) {
  const auto rows = static_cast<std::ptrdiff_t>(s.out_channels);
  const bool big = s.weight_size() * s.out_length() >= kParallelThreshold;
#pragma omp parallel for schedule(static) if (big)
  for (std::ptrdiff_t o = 0; o < rows; ++o)
    conv_forward_row(s, static_cast<std::size_t>(o), x.data(), w.data(),
                     b.data(), y.data());
}

void conv1d_backward(const Conv1dShape& s, std::span<const double> x,
                     std::span<const double> w, std::span<const double> dy,
                     std::span<double> dx, std::span<double> dw,
                     std::span<double> db) {
  const bool big = s.weight_size() * s.out_length() >= kParallelThreshold;
  const auto out_rows = static_cast<std::ptrdiff_t>(s.out_channels);
  const auto in_rows = static_cast<std::ptrdiff_t>(s.in_channels);
  const bool want_dx = !dx.empty();
#pragma omp parallel if (big)
  {
#pragma omp for schedule(static)
    for (std::ptrdiff_t o = 0; o < out_rows; ++o)
      conv_weight_grad_row(s, static_cast<std::size_t>(o), x.data(), dy.data(),
                           dw.data(), db.data());
    if (want_dx) {
#pragma omp for schedule(static)
      for (std::ptrdiff_t i = 0; i < in_rows; ++i)
        conv_input_grad_row(s, static_cast<std::size_t>(i), w.data(), dy.data(),
                            dx.data());
    }
  }
}

void matmul(std::size_t m, std::size_t k, std::size_t n, bool trans_a,
            bool trans_b, std::span<const double> a, std::span<const double> b,
            std::span<double> c, bool accumulate) {
  const auto rows = static_cast<std::ptrdiff_t>(m);
  const bool big = m * k * n >= kParallelThreshold;
#pragma omp parallel for schedule(static) if (big)
  for (std::ptrdiff_t row = 0; row < rows; ++row)
    matmul_row(static_cast<std::size_t>(row), m, k, n, trans_a, trans_b,
               a.data(), b.data(), c.data(), accumulate);
}

}  // namespace omp
}  // namespace stemforge::kernels
