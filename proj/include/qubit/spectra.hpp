#pragma once

// Spectral analysis of Gamma_1 time series: biased autocorrelation, one-sided
// PSD as the Fourier transform of the autocorrelation, logarithmic binning,
// the a/f + b fit, and band-integrated variances of the two components.

#include <algorithm>
#include <cmath>
#include <complex>
#include <map>
#include <numbers>
#include <numeric>
#include <optional>
#include <span>
#include <string>
#include <vector>

#include "qubit/errors.hpp"
#include "qubit/fft.hpp"
#include "qubit/nlls.hpp"

namespace qubit {

// ---------------------------------------------------------------------------
// Domain types
// ---------------------------------------------------------------------------

/// Analytic (a, b) a synthetic series was generated with.
struct SpectralTruth {
  double a = 0.0;  // s^-2
  double b = 0.0;  // s^-2 / Hz
};

struct Gamma1Series {
  std::vector<double> samples;  // s^-1
  double dt = 0.0;              // s
  double temperature = 0.0;     // K
  std::string qubit_id;
  std::vector<double> times;  // optional sample times (s); empty means uniform
  std::map<std::string, std::string> provenance;
  std::optional<SpectralTruth> truth;
};

inline void validate(const Gamma1Series& s) {
  if (s.samples.size() < 16) {
    throw ValidationError("Gamma1Series: need at least 16 samples, got " +
                          std::to_string(s.samples.size()));
  }
  if (!(s.dt > 0.0)) throw ValidationError("Gamma1Series: dt must be positive");
  for (double v : s.samples) {
    if (!std::isfinite(v) || !(v > 0.0)) {
      throw ValidationError("Gamma1Series: samples must be positive and finite");
    }
  }
  if (!s.times.empty() && s.times.size() != s.samples.size()) {
    throw ValidationError("Gamma1Series: times and samples differ in length");
  }
}

struct NoiseSpectrum {
  std::vector<double> freqs;  // Hz, strictly increasing
  std::vector<double> psd;    // rate^2 / Hz
  std::vector<size_t> counts;  // raw ordinates averaged into each point
  std::string estimator;
  size_t record_length = 0;
  double dt = 0.0;
  int bins_per_decade = 0;  // 0 = unbinned
  size_t clipped = 0;       // negative raw values set to zero

  size_t size() const { return freqs.size(); }
};

struct SpectralFit {
  double a = 0.0;  // rate^2
  double b = 0.0;  // rate^2 / Hz
  double a_se = 0.0;
  double b_se = 0.0;
  double f_min = 0.0;
  double f_max = 0.0;
  double residual_norm = 0.0;
  int iterations = 0;
  bool converged = false;
  std::string scale;  // "log" or "linear"
  size_t points = 0;

  double model(double f) const { return a / f + b; }
};

struct BandVariances {
  double sigma2_tls = 0.0;  // 1/f part, rate^2
  double sigma2_qp = 0.0;   // white part, rate^2
};

class SpectralFitError : public NumericalError {
 public:
  SpectralFitError(const std::string& what, SpectralFit best)
      : NumericalError(what), best_(best) {}
  const SpectralFit& best() const { return best_; }

 private:
  SpectralFit best_;
};

// ---------------------------------------------------------------------------
// Autocorrelation and PSD
// ---------------------------------------------------------------------------

namespace detail {

// Deviations from the sample mean. Differences are taken against the first
// sample before averaging so that a constant series yields exact zeros.
inline std::vector<double> centered(std::span<const double> x) {
  std::vector<double> d(x.size());
  const double ref = x.front();
  for (size_t i = 0; i < x.size(); ++i) d[i] = x[i] - ref;
  const double mean = std::accumulate(d.begin(), d.end(), 0.0) / static_cast<double>(d.size());
  for (auto& v : d) v -= mean;
  return d;
}

}  // namespace detail

/// Biased autocorrelation C(k) = (1/N) sum_t (x_t - m)(x_{t+k} - m),
/// k = 0 .. max_lag, computed through a zero-padded FFT.
inline std::vector<double> autocorrelation(std::span<const double> x, size_t max_lag) {
  const size_t n = x.size();
  if (n == 0 || max_lag >= n) {
    throw ValidationError("autocorrelation: max_lag must be below the series length");
  }
  const auto d = detail::centered(x);
  if (std::all_of(d.begin(), d.end(), [](double v) { return v == 0.0; })) {
    return std::vector<double>(max_lag + 1, 0.0);
  }
  const size_t m = fft::good_size(2 * n);
  std::vector<double> padded(m, 0.0);
  std::copy(d.begin(), d.end(), padded.begin());
  auto spec = fft::rfft(padded);
  for (auto& c : spec) c = std::norm(c);
  const auto corr = fft::irfft(spec, m);
  std::vector<double> out(max_lag + 1);
  for (size_t k = 0; k <= max_lag; ++k) out[k] = corr[k] / static_cast<double>(n);
  return out;
}

inline std::vector<double> autocorrelation(const Gamma1Series& s, size_t max_lag) {
  validate(s);
  return autocorrelation(std::span<const double>(s.samples), max_lag);
}

enum class Estimator {
  kAutocorrelation,  // Fourier transform of the biased autocorrelation
  kWelch,            // Hann-windowed, 50% overlapping segments
  kLombScargle,      // for non-uniform sample times
};

struct SpectrumOptions {
  Estimator estimator = Estimator::kAutocorrelation;
  size_t max_lag = 0;           // 0 = full record (N - 1)
  size_t welch_segment = 0;     // 0 = N / 4
};

/// One-sided PSD from the autocorrelation: S(f_k) = 2 dt sum_m C(m) e^{-2 pi i k m / N}
/// on f_k = k / (N dt), k = 1 .. N/2 (the Nyquist ordinate, when present, is
/// not doubled). With the full lag range this is the periodogram and
/// sum_k S(f_k) / (N dt) equals C(0) exactly. A truncated lag window may
/// produce negative values; they are clipped to zero and counted.
inline NoiseSpectrum psd_from_autocorr(std::span<const double> x, double dt,
                                       size_t max_lag = 0) {
  const size_t n = x.size();
  if (n < 2) throw ValidationError("psd_from_autocorr: series too short");
  if (!(dt > 0.0)) throw ValidationError("psd_from_autocorr: dt must be positive");
  const size_t lag = max_lag == 0 ? n - 1 : std::min(max_lag, n - 1);
  const auto c = autocorrelation(x, lag);
  // Fold the symmetric lag sequence onto a length-N circle.
  std::vector<double> circ(n, 0.0);
  circ[0] = c[0];
  for (size_t m = 1; m <= lag; ++m) {
    circ[m] += c[m];
    circ[n - m] += c[m];
  }
  const auto spec = fft::rfft(circ);
  NoiseSpectrum out;
  out.estimator = lag == n - 1 ? "autocorrelation" : "autocorrelation-lag" + std::to_string(lag);
  out.record_length = n;
  out.dt = dt;
  const size_t half = n / 2;
  for (size_t k = 1; k <= half; ++k) {
    const double twosided = dt * spec[k].real();
    const bool nyquist = (n % 2 == 0) && k == half;
    double v = (nyquist ? 1.0 : 2.0) * twosided;
    if (v < 0.0) {
      // Rounding of an exactly-zero periodogram ordinate is not a lag-window
      // artifact; only count genuinely negative estimates.
      if (v < -1e-12 * dt * std::abs(c[0]) || lag != n - 1) ++out.clipped;
      v = 0.0;
    }
    out.freqs.push_back(static_cast<double>(k) / (static_cast<double>(n) * dt));
    out.psd.push_back(v);
    out.counts.push_back(1);
  }
  return out;
}

inline NoiseSpectrum psd_welch(std::span<const double> x, double dt, size_t segment = 0) {
  const size_t n = x.size();
  size_t seg = segment == 0 ? std::max<size_t>(n / 4, 8) : segment;
  seg = std::min(seg, n);
  const size_t step = std::max<size_t>(seg / 2, 1);
  std::vector<double> window(seg);
  for (size_t i = 0; i < seg; ++i) {
    window[i] = 0.5 * (1.0 - std::cos(2.0 * std::numbers::pi * static_cast<double>(i) /
                                      static_cast<double>(seg)));
  }
  const double wss = std::inner_product(window.begin(), window.end(), window.begin(), 0.0);
  const size_t half = seg / 2;
  std::vector<double> acc(half + 1, 0.0);
  size_t segments = 0;
  std::vector<double> buf(seg);
  for (size_t start = 0; start + seg <= n; start += step) {
    const auto d = detail::centered(x.subspan(start, seg));
    for (size_t i = 0; i < seg; ++i) buf[i] = d[i] * window[i];
    const auto spec = fft::rfft(buf);
    for (size_t k = 0; k <= half; ++k) acc[k] += std::norm(spec[k]);
    ++segments;
  }
  NoiseSpectrum out;
  out.estimator = "welch";
  out.record_length = n;
  out.dt = dt;
  for (size_t k = 1; k <= half; ++k) {
    const bool nyquist = (seg % 2 == 0) && k == half;
    const double v = (nyquist ? 1.0 : 2.0) * dt * acc[k] / (wss * static_cast<double>(segments));
    out.freqs.push_back(static_cast<double>(k) / (static_cast<double>(seg) * dt));
    out.psd.push_back(v);
    out.counts.push_back(segments);
  }
  return out;
}

/// Classical Lomb-Scargle periodogram scaled to a one-sided density on the
/// grid k / T, T = N * mean cadence. On uniform times it reproduces the
/// periodogram.
inline NoiseSpectrum psd_lomb_scargle(std::span<const double> times, std::span<const double> x) {
  const size_t n = x.size();
  if (times.size() != n || n < 2) {
    throw ValidationError("psd_lomb_scargle: need matching times and samples");
  }
  const double span = times.back() - times.front();
  const double dt_mean = span / static_cast<double>(n - 1);
  if (!(dt_mean > 0.0)) throw ValidationError("psd_lomb_scargle: times must increase");
  const auto d = detail::centered(x);
  NoiseSpectrum out;
  out.estimator = "lomb-scargle";
  out.record_length = n;
  out.dt = dt_mean;
  const double total = dt_mean * static_cast<double>(n);
  for (size_t k = 1; k <= n / 2; ++k) {
    const double f = static_cast<double>(k) / total;
    const double w = 2.0 * std::numbers::pi * f;
    double s2 = 0.0, c2 = 0.0;
    for (size_t i = 0; i < n; ++i) {
      s2 += std::sin(2.0 * w * times[i]);
      c2 += std::cos(2.0 * w * times[i]);
    }
    const double tau = std::atan2(s2, c2) / (2.0 * w);
    double yc = 0.0, ys = 0.0, cc = 0.0, ss = 0.0;
    for (size_t i = 0; i < n; ++i) {
      const double ph = w * (times[i] - tau);
      const double c = std::cos(ph), s = std::sin(ph);
      yc += d[i] * c;
      ys += d[i] * s;
      cc += c * c;
      ss += s * s;
    }
    double p = 0.0;
    if (cc > 1e-12 * n) p += yc * yc / cc;
    if (ss > 1e-12 * n) p += ys * ys / ss;
    p *= 0.5;
    // At Nyquist only the cosine term survives and P = |X|^2 / (2N), so the
    // same factor of two gives the periodogram there as well.
    out.freqs.push_back(f);
    out.psd.push_back(2.0 * dt_mean * p);
    out.counts.push_back(1);
  }
  return out;
}

inline NoiseSpectrum psd_from_autocorr(const Gamma1Series& s, const SpectrumOptions& opt = {}) {
  validate(s);
  switch (opt.estimator) {
    case Estimator::kWelch:
      return psd_welch(s.samples, s.dt, opt.welch_segment);
    case Estimator::kLombScargle: {
      if (s.times.empty()) {
        std::vector<double> t(s.samples.size());
        for (size_t i = 0; i < t.size(); ++i) t[i] = s.dt * static_cast<double>(i);
        return psd_lomb_scargle(t, s.samples);
      }
      return psd_lomb_scargle(s.times, s.samples);
    }
    case Estimator::kAutocorrelation:
    default:
      return psd_from_autocorr(std::span<const double>(s.samples), s.dt, opt.max_lag);
  }
}

// ---------------------------------------------------------------------------
// Binning, fitting, variances
// ---------------------------------------------------------------------------

/// Average a spectrum into logarithmic bins: geometric-mean frequency and
/// arithmetic-mean PSD per bin; empty bins are dropped.
inline NoiseSpectrum log_bin(const NoiseSpectrum& s, int bins_per_decade) {
  if (bins_per_decade < 1) throw ValidationError("log_bin: bins_per_decade must be >= 1");
  NoiseSpectrum out = s;
  out.freqs.clear();
  out.psd.clear();
  out.counts.clear();
  out.bins_per_decade = bins_per_decade;
  size_t i = 0;
  while (i < s.size()) {
    const long bin = static_cast<long>(std::floor(std::log10(s.freqs[i]) * bins_per_decade + 1e-9));
    double logsum = 0.0, psdsum = 0.0;
    size_t count = 0, points = 0;
    size_t j = i;
    for (; j < s.size(); ++j) {
      const long bj = static_cast<long>(std::floor(std::log10(s.freqs[j]) * bins_per_decade + 1e-9));
      if (bj != bin) break;
      const size_t w = s.counts.empty() ? 1 : s.counts[j];
      logsum += std::log(s.freqs[j]);
      psdsum += s.psd[j] * static_cast<double>(w);
      count += w;
      ++points;
    }
    out.freqs.push_back(std::exp(logsum / static_cast<double>(points)));
    out.psd.push_back(psdsum / static_cast<double>(count));
    out.counts.push_back(count);
    i = j;
  }
  return out;
}

/// Restrict a spectrum to f_min <= f <= f_max.
inline NoiseSpectrum band_limit(const NoiseSpectrum& s, double f_min, double f_max) {
  NoiseSpectrum out = s;
  out.freqs.clear();
  out.psd.clear();
  out.counts.clear();
  for (size_t i = 0; i < s.size(); ++i) {
    if (s.freqs[i] >= f_min * (1 - 1e-12) && s.freqs[i] <= f_max * (1 + 1e-12)) {
      out.freqs.push_back(s.freqs[i]);
      out.psd.push_back(s.psd[i]);
      out.counts.push_back(s.counts.empty() ? 1 : s.counts[i]);
    }
  }
  return out;
}

struct FitOptions {
  LossScaling scale = LossScaling::kLog;
  // Subtract the mean log of an n-point average of exponential ordinates,
  // psi(n) - ln n, so that log-space fits of periodogram bins are unbiased.
  bool periodogram_bias_correction = false;
  int max_iterations = 200;
};

namespace detail {

// psi(n) - ln(n) for integer n >= 1: -gamma + H_{n-1} - ln n.
inline double log_mean_exponential_bias(size_t n) {
  double h = 0.0;
  for (size_t k = 1; k < n; ++k) h += 1.0 / static_cast<double>(k);
  return -0.57721566490153286061 + h - std::log(static_cast<double>(n));
}

}  // namespace detail

/// Fit S(f) = a/f + b with a, b >= 0. The parameters are normalized by the
/// geometric-mean PSD and frequency of the input so the problem is O(1).
inline SpectralFit fit_one_over_f_plus_white(const NoiseSpectrum& s, const FitOptions& opt = {}) {
  std::vector<double> f, y;
  std::vector<size_t> counts;
  for (size_t i = 0; i < s.size(); ++i) {
    if (opt.scale == LossScaling::kLog && !(s.psd[i] > 0.0)) continue;
    f.push_back(s.freqs[i]);
    y.push_back(s.psd[i]);
    counts.push_back(s.counts.empty() ? 1 : s.counts[i]);
  }
  if (f.size() < 6) {
    throw ValidationError("fit_one_over_f_plus_white: need at least 6 frequency points, got " +
                          std::to_string(f.size()));
  }
  const double decades = std::log10(f.back() / f.front());
  if (decades < 1.5 - 1e-12) {
    throw ValidationError("fit_one_over_f_plus_white: band spans only " + std::to_string(decades) +
                          " decades (need 1.5)");
  }
  const size_t m = f.size();
  double logf = 0.0, logy = 0.0;
  for (size_t i = 0; i < m; ++i) {
    logf += std::log(f[i]);
    logy += std::log(std::max(y[i], 1e-300));
  }
  const double f_ref = std::exp(logf / m);
  const double s_ref = opt.scale == LossScaling::kLog
                           ? std::exp(logy / m)
                           : std::accumulate(y.begin(), y.end(), 0.0) / m;
  Vec inv_f(m), target(m);
  for (size_t i = 0; i < m; ++i) {
    inv_f[i] = f_ref / f[i];
    if (opt.scale == LossScaling::kLog) {
      double t = std::log(y[i] / s_ref);
      if (opt.periodogram_bias_correction) t -= detail::log_mean_exponential_bias(counts[i]);
      target[i] = t;
    } else {
      target[i] = y[i] / s_ref;
    }
  }

  FitProblem p;
  if (opt.scale == LossScaling::kLog) {
    p.residuals = [&](const Vec& k) -> Vec {
      return ((k[0] * inv_f.array() + k[1]).log() - target.array()).matrix();
    };
  } else {
    p.residuals = [&](const Vec& k) -> Vec {
      return (k[0] * inv_f.array() + k[1] - target.array()).matrix();
    };
  }
  p.initial = Vec::Constant(2, 0.5);
  p.lower = Vec::Zero(2);
  p.upper = Vec::Constant(2, std::numeric_limits<double>::infinity());
  p.names = {"a_norm", "b_norm"};
  p.max_iterations = opt.max_iterations;
  const auto r = nlls_solve(p);

  SpectralFit out;
  out.a = r.params[0] * s_ref * f_ref;
  out.b = r.params[1] * s_ref;
  out.a_se = r.standard_errors[0] * s_ref * f_ref;
  out.b_se = r.standard_errors[1] * s_ref;
  out.f_min = f.front();
  out.f_max = f.back();
  out.residual_norm = r.residual_norm;
  out.iterations = r.iterations;
  out.converged = r.converged;
  out.scale = opt.scale == LossScaling::kLog ? "log" : "linear";
  out.points = m;
  if (!r.converged) {
    throw SpectralFitError("fit_one_over_f_plus_white: no convergence after " +
                               std::to_string(r.iterations) + " iterations",
                           out);
  }
  return out;
}

inline BandVariances band_variances(const SpectralFit& fit, double f_min, double f_max) {
  if (!(f_min > 0.0) || !(f_max > f_min)) {
    throw ValidationError("band_variances: need 0 < f_min < f_max");
  }
  return {fit.a * std::log(f_max / f_min), fit.b * (f_max - f_min)};
}

// ---------------------------------------------------------------------------
// Series -> spectrum -> fit -> variances
// ---------------------------------------------------------------------------

struct AnalysisOptions {
  SpectrumOptions spectrum;
  int bins_per_decade = 8;
  std::optional<std::pair<double, double>> band;  // Hz; default from the grid
  // Band the fitted a/f + b is integrated over; default is the measured range,
  // lowest ordinate to Nyquist.
  std::optional<std::pair<double, double>> variance_band;
  FitOptions fit{LossScaling::kLog, true, 200};
};

struct AnalysisResult {
  NoiseSpectrum raw;
  NoiseSpectrum binned;
  SpectralFit fit;
  BandVariances variances;
  double band_min = 0.0;
  double band_max = 0.0;
  double variance_min = 0.0;
  double variance_max = 0.0;
};

/// Default fit band: twice the lowest ordinate up to half the Nyquist frequency.
inline std::pair<double, double> default_band(const NoiseSpectrum& s) {
  if (s.size() < 2) throw ValidationError("default_band: spectrum too short");
  return {2.0 * s.freqs.front(), 0.5 * s.freqs.back()};
}

inline AnalysisResult analyze_series(const Gamma1Series& series, const AnalysisOptions& opt = {}) {
  AnalysisResult out;
  out.raw = psd_from_autocorr(series, opt.spectrum);
  const auto band = opt.band ? *opt.band : default_band(out.raw);
  if (!(band.first > 0.0) || !(band.second > band.first)) {
    throw ValidationError("analyze_series: invalid band");
  }
  out.band_min = band.first;
  out.band_max = band.second;
  auto fitopt = opt.fit;
  if (opt.spectrum.estimator != Estimator::kAutocorrelation || opt.spectrum.max_lag != 0) {
    fitopt.periodogram_bias_correction = false;
  }
  out.binned = log_bin(band_limit(out.raw, band.first, band.second), opt.bins_per_decade);
  out.fit = fit_one_over_f_plus_white(out.binned, fitopt);
  const auto vband =
      opt.variance_band ? *opt.variance_band : std::pair{out.raw.freqs.front(), out.raw.freqs.back()};
  out.variance_min = vband.first;
  out.variance_max = vband.second;
  out.variances = band_variances(out.fit, vband.first, vband.second);
  return out;
}

}  // namespace qubit
