// Copyright 2026 The StemForge Authors
// SPDX-License-Identifier: Apache-2.0

#pragma once

// Spectral measurements, cross-track coherence checks, the Frechet proxy
// distance and chi-square audits of the curriculum samplers.

#include <cstddef>
#include <cstdint>
#include <optional>
#include <span>
#include <string>
#include <vector>

#include "stemforge/data.hpp"

namespace stemforge::eval {

/// |DFT|^2 for bins 0..S/2 of one full-length, unwindowed frame.
std::vector<double> power_spectrum(std::span<const double> x);

/// Index of the strongest bin, DC excluded. Throws on an all-zero input
/// (or one with energy only at DC).
std::size_t dominant_bin(std::span<const double> x);
double dominant_f0(std::span<const double> x, double sample_rate);

inline constexpr std::size_t kFeatureBands = 16;

/// log(band energy + 1e-12) over 16 equal-width bands of bins 1..S/2.
std::vector<double> spectral_features(std::span<const double> x);

/// ||mu_a - mu_b||^2 + tr(S_a + S_b - 2 (S_a S_b)^(1/2)). Each set needs at
/// least `min_count` vectors of equal dimension.
double frechet_proxy(const std::vector<std::vector<double>>& a,
                     const std::vector<std::vector<double>>& b,
                     std::size_t min_count = 32);

struct RatioCheck {
  std::string name;          // e.g. "instrument/bass"
  double measured_hz = 0.0;  // dominant frequency of the checked track
  double reference_hz = 0.0; // dominant frequency of the bass
  double best_ratio = 0.0;   // allowed ratio closest to the measurement
  double error_hz = 0.0;     // |measured - best_ratio * reference|
  double tolerance_hz = 0.0;
  bool pass = false;
};

struct PeriodCheck {
  double estimated = 0.0;  // autocorrelation peak lag, samples
  double expected = 0.0;
  double tolerance = 0.0;
  bool pass = false;
};

struct CoherenceReport {
  std::vector<double> f0_hz;  // per track; NaN for a silent track
  std::vector<bool> silent;
  RatioCheck instrument;
  RatioCheck melody;
  PeriodCheck drums;

  bool all_pass() const { return instrument.pass && melody.pass && drums.pass; }
};

/// Allowed error for ratio r is (1 + r/2) bins: one bin on the checked track
/// plus the bass bin rounding propagated through r.
double ratio_tolerance_hz(double ratio, double bin_hz);

RatioCheck check_ratio(std::string name, std::span<const double> track,
                       std::span<const double> bass, std::span<const double> ratios,
                       double sample_rate);

/// Peak of the unbiased autocorrelation of the squared, mean-removed signal
/// after its first zero crossing (and at least `min_lag`), up to S/2; passes
/// if within max(2, 5%) of a multiple of `period`.
PeriodCheck check_period(std::span<const double> drums, double period,
                         std::size_t min_lag = 16);

/// Tracks ordered bass, drums, instrument, melody.
CoherenceReport coherence_eval(const std::vector<data::Waveform>& tracks,
                               double sample_rate, const data::StemMeta& meta);

struct ChiSquareReport {
  double statistic = 0.0;
  std::size_t dof = 0;
  double critical = 0.0;  // 99% quantile unless another level was requested
  double p_value = 1.0;
  std::size_t draws = 0;
  bool pass = false;
};

/// Pearson goodness of fit. Categories with zero expected probability must
/// have zero counts (otherwise the audit fails) and are left out of the
/// degrees of freedom.
ChiSquareReport chi_square_audit(std::span<const std::size_t> counts,
                                 std::span<const double> probs, double level = 0.99,
                                 std::size_t min_draws = 10000);

struct BinomialBandReport {
  double fraction = 0.0;
  double lower = 0.0;
  double upper = 0.0;
  bool pass = false;
};

/// Fraction of successes against p +- sigmas * sqrt(p (1 - p) / n).
BinomialBandReport binomial_band(std::size_t successes, std::size_t draws, double p,
                                 double sigmas = 3.0);

/// One line of an evaluation report.
struct MetricRecord {
  std::string metric;
  std::string track;
  double value = 0.0;
  double tolerance = 0.0;
  bool pass = false;
};

/// `metric=... track=... value=... tolerance=... pass=...` per line.
std::string to_records(const std::vector<MetricRecord>& records);
/// Header `metric,track,value,tolerance,pass`.
std::string to_csv(const std::vector<MetricRecord>& records);

}  // namespace stemforge::eval
