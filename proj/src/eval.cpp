// Copyright 2026 The StemForge Authors
// SPDX-License-Identifier: Apache-2.0

#include "stemforge/eval.hpp"

#include <fftw3.h>

#include <Eigen/Dense>
#include <boost/math/distributions/chi_squared.hpp>

#include <algorithm>
#include <cmath>
#include <limits>
#include <mutex>
#include <numeric>
#include <sstream>

#include "stemforge/error.hpp"

namespace stemforge::eval {

namespace {

// FFTW planning is not thread-safe.
std::mutex& plan_mutex() {
  static std::mutex m;
  return m;
}

std::string fmt(double v) {
  std::ostringstream s;
  s.precision(10);
  s << v;
  return s.str();
}

}  // namespace

std::vector<double> power_spectrum(std::span<const double> x) {
  require(!x.empty(), "spectrum of an empty signal");
  const int n = static_cast<int>(x.size());
  std::vector<double> in(x.begin(), x.end());
  fftw_complex* out = fftw_alloc_complex(n / 2 + 1);
  fftw_plan plan;
  {
    std::lock_guard lock(plan_mutex());
    plan = fftw_plan_dft_r2c_1d(n, in.data(), out, FFTW_ESTIMATE);
  }
  fftw_execute(plan);
  std::vector<double> p(n / 2 + 1);
  for (int i = 0; i <= n / 2; ++i) p[i] = out[i][0] * out[i][0] + out[i][1] * out[i][1];
  {
    std::lock_guard lock(plan_mutex());
    fftw_destroy_plan(plan);
  }
  fftw_free(out);
  return p;
}

std::size_t dominant_bin(std::span<const double> x) {
  require(x.size() >= 2, "dominant frequency needs at least two samples");
  const auto p = power_spectrum(x);
  const auto it = std::max_element(p.begin() + 1, p.end());
  const double ac = std::accumulate(p.begin() + 1, p.end(), 0.0);
  // a constant signal leaves only rounding residue outside DC
  if (!(ac > 1e-24 * (ac + p[0])) || !std::isfinite(ac))
    fail(ErrorCode::InvalidInput, "dominant frequency of a silent or DC-only signal");
  return static_cast<std::size_t>(it - p.begin());
}

double dominant_f0(std::span<const double> x, double sample_rate) {
  return static_cast<double>(dominant_bin(x)) * sample_rate / static_cast<double>(x.size());
}

std::vector<double> spectral_features(std::span<const double> x) {
  const auto p = power_spectrum(x);
  const std::size_t bins = p.size() - 1;  // 1..S/2
  require(bins >= kFeatureBands, "signal too short for the feature filterbank");
  std::vector<double> f(kFeatureBands, 0.0);
  for (std::size_t b = 0; b < kFeatureBands; ++b) {
    const std::size_t lo = 1 + b * bins / kFeatureBands;
    const std::size_t hi = 1 + (b + 1) * bins / kFeatureBands;
    double e = 0.0;
    for (std::size_t i = lo; i < hi; ++i) e += p[i];
    f[b] = std::log(e + 1e-12);
  }
  return f;
}

double frechet_proxy(const std::vector<std::vector<double>>& a,
                     const std::vector<std::vector<double>>& b, std::size_t min_count) {
  if (a.size() < min_count || b.size() < min_count)
    fail(ErrorCode::InvalidInput, "frechet_proxy needs at least " + std::to_string(min_count) +
                                      " feature vectors per set");
  const std::size_t d = a.front().size();
  require(d > 0, "empty feature vectors");
  auto stats = [d](const std::vector<std::vector<double>>& set) {
    Eigen::MatrixXd m(static_cast<Eigen::Index>(set.size()), static_cast<Eigen::Index>(d));
    for (std::size_t i = 0; i < set.size(); ++i) {
      require(set[i].size() == d, "feature vectors differ in dimension");
      for (std::size_t j = 0; j < d; ++j) {
        require(std::isfinite(set[i][j]), "non-finite feature");
        m(static_cast<Eigen::Index>(i), static_cast<Eigen::Index>(j)) = set[i][j];
      }
    }
    const Eigen::VectorXd mu = m.colwise().mean();
    const Eigen::MatrixXd c = m.rowwise() - mu.transpose();
    const Eigen::MatrixXd cov = (c.transpose() * c) / static_cast<double>(set.size() - 1);
    return std::pair{mu, cov};
  };
  const auto [mu_a, cov_a] = stats(a);
  const auto [mu_b, cov_b] = stats(b);

  auto psd_sqrt = [](const Eigen::MatrixXd& m) {
    Eigen::SelfAdjointEigenSolver<Eigen::MatrixXd> es(m);
    const Eigen::VectorXd ev = es.eigenvalues().cwiseMax(0.0).cwiseSqrt();
    return Eigen::MatrixXd(es.eigenvectors() * ev.asDiagonal() * es.eigenvectors().transpose());
  };
  // tr (S_a S_b)^(1/2) = tr (S_a^(1/2) S_b S_a^(1/2))^(1/2), the inner matrix symmetric PSD
  const Eigen::MatrixXd ra = psd_sqrt(cov_a);
  Eigen::MatrixXd inner = ra * cov_b * ra;
  inner = 0.5 * (inner + inner.transpose());
  Eigen::SelfAdjointEigenSolver<Eigen::MatrixXd> es(inner, Eigen::EigenvaluesOnly);
  const double tr_sqrt = es.eigenvalues().cwiseMax(0.0).cwiseSqrt().sum();
  const double dist =
      (mu_a - mu_b).squaredNorm() + cov_a.trace() + cov_b.trace() - 2.0 * tr_sqrt;
  return std::max(dist, 0.0);
}

double ratio_tolerance_hz(double ratio, double bin_hz) { return (1.0 + ratio / 2.0) * bin_hz; }

RatioCheck check_ratio(std::string name, std::span<const double> track,
                       std::span<const double> bass, std::span<const double> ratios,
                       double sample_rate) {
  require(!ratios.empty(), "no allowed ratios");
  RatioCheck r;
  r.name = std::move(name);
  r.measured_hz = dominant_f0(track, sample_rate);
  r.reference_hz = dominant_f0(bass, sample_rate);
  const double bin = sample_rate / static_cast<double>(track.size());
  double best = std::numeric_limits<double>::infinity();
  for (double ratio : ratios) {
    const double err = std::abs(r.measured_hz - ratio * r.reference_hz);
    const double tol = ratio_tolerance_hz(ratio, bin);
    // rank by error relative to tolerance so a larger ratio is not favored
    if (err / tol < best) {
      best = err / tol;
      r.best_ratio = ratio;
      r.error_hz = err;
      r.tolerance_hz = tol;
    }
  }
  r.pass = r.error_hz <= r.tolerance_hz;
  return r;
}

PeriodCheck check_period(std::span<const double> drums, double period, std::size_t min_lag) {
  const std::size_t n = drums.size();
  require(period > 0.0 && n >= 2 * min_lag + 2, "period check needs a longer signal");
  std::vector<double> e(n);
  double mean = 0.0;
  for (std::size_t i = 0; i < n; ++i) mean += (e[i] = drums[i] * drums[i]);
  mean /= static_cast<double>(n);
  if (!(mean > 0.0)) fail(ErrorCode::InvalidInput, "silent drum track");
  for (double& v : e) v -= mean;
  // unbiased autocorrelation; the search starts past the first zero
  // crossing so the burst's own decay is not taken as its period
  std::vector<double> ac(n / 2 + 1, 0.0);
  for (std::size_t lag = 0; lag <= n / 2; ++lag) {
    double acc = 0.0;
    for (std::size_t i = 0; i + lag < n; ++i) acc += e[i] * e[i + lag];
    ac[lag] = acc / static_cast<double>(n - lag);
  }
  std::size_t start = min_lag;
  while (start < n / 2 && ac[start] > 0.0) ++start;
  std::size_t best_lag = start;
  for (std::size_t lag = start; lag <= n / 2; ++lag)
    if (ac[lag] > ac[best_lag]) best_lag = lag;
  PeriodCheck c;
  c.estimated = static_cast<double>(best_lag);
  c.expected = period;
  c.tolerance = std::max(2.0, 0.05 * period);
  const double multiple = std::max(1.0, std::round(c.estimated / period));
  c.pass = std::abs(c.estimated - multiple * period) <= c.tolerance;
  return c;
}

CoherenceReport coherence_eval(const std::vector<data::Waveform>& tracks,
                               double sample_rate, const data::StemMeta& meta) {
  require(tracks.size() == data::DatasetConfig::kTracks, "coherence needs four tracks");
  CoherenceReport r;
  for (const auto& t : tracks) {
    try {
      r.f0_hz.push_back(dominant_f0(t, sample_rate));
      r.silent.push_back(false);
    } catch (const Error&) {
      r.f0_hz.push_back(std::numeric_limits<double>::quiet_NaN());
      r.silent.push_back(true);
    }
  }
  r.instrument.name = "instrument/bass";
  r.melody.name = "melody/bass";
  if (r.silent[0]) return r;  // nothing to compare against; every check fails
  const double harmonics[] = {2.0, 3.0};
  if (!r.silent[2])
    r.instrument = check_ratio("instrument/bass", tracks[2], tracks[0], harmonics, sample_rate);
  if (!r.silent[3]) {
    auto motif = data::motif_ratios(meta.motif);
    std::sort(motif.begin(), motif.end());
    motif.erase(std::unique(motif.begin(), motif.end()), motif.end());
    r.melody = check_ratio("melody/bass", tracks[3], tracks[0], motif, sample_rate);
  }
  if (!r.silent[1]) r.drums = check_period(tracks[1], meta.tempo_period);
  return r;
}

ChiSquareReport chi_square_audit(std::span<const std::size_t> counts,
                                 std::span<const double> probs, double level,
                                 std::size_t min_draws) {
  require(counts.size() == probs.size() && !counts.empty(), "counts/probabilities mismatch");
  require(level > 0.0 && level < 1.0, "level must be in (0, 1)");
  ChiSquareReport r;
  for (auto c : counts) r.draws += c;
  if (r.draws < min_draws)
    fail(ErrorCode::InvalidInput, "chi-square audit needs at least " + std::to_string(min_draws) +
                                      " draws, got " + std::to_string(r.draws));
  bool impossible = false;
  std::size_t used = 0;
  for (std::size_t i = 0; i < counts.size(); ++i) {
    require(probs[i] >= 0.0, "negative probability");
    if (probs[i] == 0.0) {
      impossible |= counts[i] != 0;
      continue;
    }
    const double expected = probs[i] * static_cast<double>(r.draws);
    const double diff = static_cast<double>(counts[i]) - expected;
    r.statistic += diff * diff / expected;
    ++used;
  }
  r.dof = used > 0 ? used - 1 : 0;
  if (r.dof == 0) {
    r.critical = 0.0;
    r.p_value = impossible ? 0.0 : 1.0;
    r.pass = !impossible;
    return r;
  }
  const boost::math::chi_squared dist(static_cast<double>(r.dof));
  r.critical = boost::math::quantile(dist, level);
  r.p_value = boost::math::cdf(boost::math::complement(dist, r.statistic));
  r.pass = !impossible && r.statistic <= r.critical;
  return r;
}

BinomialBandReport binomial_band(std::size_t successes, std::size_t draws, double p,
                                 double sigmas) {
  require(draws > 0 && successes <= draws, "invalid binomial counts");
  require(p >= 0.0 && p <= 1.0, "probability must be in [0, 1]");
  BinomialBandReport r;
  r.fraction = static_cast<double>(successes) / static_cast<double>(draws);
  const double half = sigmas * std::sqrt(p * (1.0 - p) / static_cast<double>(draws));
  r.lower = p - half;
  r.upper = p + half;
  r.pass = r.fraction >= r.lower && r.fraction <= r.upper;
  return r;
}

std::string to_records(const std::vector<MetricRecord>& records) {
  std::string out;
  for (const auto& m : records)
    out += "metric=" + m.metric + " track=" + (m.track.empty() ? "-" : m.track) +
           " value=" + fmt(m.value) + " tolerance=" + fmt(m.tolerance) +
           " pass=" + (m.pass ? "true" : "false") + "\n";
  return out;
}

std::string to_csv(const std::vector<MetricRecord>& records) {
  std::string out = "metric,track,value,tolerance,pass\n";
  for (const auto& m : records)
    out += m.metric + "," + m.track + "," + fmt(m.value) + "," + fmt(m.tolerance) + "," +
           (m.pass ? "true" : "false") + "\n";
  return out;
}

}  // namespace stemforge::eval
