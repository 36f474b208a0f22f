#pragma once

// Stochastic forward models for Gamma_1 time series: telegraph fluctuators
// jittering TLS detunings (1/f part), quasiparticle birth-death numbers (white
// part) and the decay-curve measurement layer. Every path is a pure function
// of its seed.

#include <algorithm>
#include <cmath>
#include <complex>
#include <cstdint>
#include <limits>
#include <numbers>
#include <optional>
#include <random>
#include <string>
#include <vector>

#include "qubit/errors.hpp"
#include "qubit/nlls.hpp"
#include "qubit/physkern.hpp"
#include "qubit/spectra.hpp"
#include "qubit/units.hpp"

namespace qubit {

using Rng = std::mt19937_64;

/// Independent stream seed for task `index` of a run seeded with `master`
/// (SplitMix64 finalizer over the pair).
inline uint64_t derive_seed(uint64_t master, uint64_t index) {
  uint64_t z = master ^ (0x9E3779B97F4A7C15ull * (index + 1));
  z = (z ^ (z >> 30)) * 0xBF58476D1CE4E5B9ull;
  z = (z ^ (z >> 27)) * 0x94D049BB133111EBull;
  return z ^ (z >> 31);
}

namespace detail {

inline double exponential(Rng& rng, double rate) {
  if (!(rate > 0.0)) return std::numeric_limits<double>::infinity();
  return std::exponential_distribution<double>(rate)(rng);
}

inline int64_t poisson(Rng& rng, double mean) {
  if (!(mean > 0.0)) return 0;
  return std::poisson_distribution<int64_t>(mean)(rng);
}

inline int64_t binomial(Rng& rng, int64_t n, double p) {
  if (n <= 0 || !(p > 0.0)) return 0;
  if (p >= 1.0) return n;
  return std::binomial_distribution<int64_t>(n, p)(rng);
}

inline size_t grid_length(double duration, double dt) {
  if (!(dt > 0.0)) throw ValidationError("dt must be positive");
  if (!(duration >= 0.0)) throw ValidationError("duration must be >= 0");
  return static_cast<size_t>(std::floor(duration / dt * (1.0 + 1e-12))) + 1;
}

}  // namespace detail

// ---------------------------------------------------------------------------
// Telegraph fluctuators
// ---------------------------------------------------------------------------

struct TLFProcess {
  double rate_up = 0.0;    // 0 -> 1, Hz
  double rate_down = 0.0;  // 1 -> 0, Hz
  int state = 0;
  double g = 0.0;  // TLS detuning shift in the up state, rad/s

  double occupancy() const { return rate_up / (rate_up + rate_down); }
  double relaxation_rate() const { return rate_up + rate_down; }
};

inline void validate(const TLFProcess& p) {
  if (!(p.rate_up >= 0.0) || !(p.rate_down >= 0.0) || !(p.rate_up + p.rate_down > 0.0)) {
    throw ValidationError("TLFProcess: rates must be >= 0 and not both zero");
  }
  if (p.state != 0 && p.state != 1) throw ValidationError("TLFProcess: state must be 0 or 1");
}

/// Thermal up-state probability of a fluctuator of splitting omega_t.
inline double tlf_up_probability(double omega_t, double t) {
  if (t <= 0.0) return 0.0;
  return 1.0 / (1.0 + std::exp(units::kHbar * omega_t / (units::kBoltzmann * t)));
}

/// Detailed-balance split of the total switching rate at temperature t.
inline TLFProcess tlf_process(const TLFCoupling& c, double t) {
  const double p = tlf_up_probability(c.omega_t, t);
  TLFProcess out;
  out.rate_up = c.switch_rate * p;
  out.rate_down = c.switch_rate * (1.0 - p);
  out.g = c.g;
  return out;
}

/// State of the chain at each (non-decreasing, >= 0) time; the chain starts
/// in p.state at time 0. Switching is event-driven with exact exponential
/// dwell times, so no grid restriction applies.
inline std::vector<uint8_t> telegraph_at_times(const TLFProcess& p, const std::vector<double>& times,
                                               Rng& rng) {
  std::vector<uint8_t> out(times.size());
  int state = p.state;
  auto out_rate = [&](int s) { return s ? p.rate_down : p.rate_up; };
  double next = detail::exponential(rng, out_rate(state));
  for (size_t i = 0; i < times.size(); ++i) {
    while (next <= times[i]) {
      state ^= 1;
      next += detail::exponential(rng, out_rate(state));
    }
    out[i] = static_cast<uint8_t>(state);
  }
  return out;
}

inline std::vector<double> uniform_times(size_t n, double dt) {
  std::vector<double> t(n);
  for (size_t i = 0; i < n; ++i) t[i] = static_cast<double>(i) * dt;
  return t;
}

/// Binary path on the grid 0, dt, ..., duration.
inline std::vector<uint8_t> simulate_telegraph(const TLFProcess& p, double duration, double dt,
                                               uint64_t seed) {
  validate(p);
  const double max_rate = std::max(p.rate_up, p.rate_down);
  if (!(dt * max_rate < 0.1)) {
    throw ValidationError("simulate_telegraph: dt * max rate = " + std::to_string(dt * max_rate) +
                          " must be < 0.1");
  }
  Rng rng(seed);
  return telegraph_at_times(p, uniform_times(detail::grid_length(duration, dt), dt), rng);
}

// ---------------------------------------------------------------------------
// TLS rate paths
// ---------------------------------------------------------------------------

/// Golden-rule loss of a qubit through one TLS: A^2 2 gamma2 / (gamma2^2 + wd^2), s^-1.
inline double tls_rate(double amplitude, double gamma2, double detuning) {
  return amplitude * amplitude * 2.0 * gamma2 / (gamma2 * gamma2 + detuning * detuning);
}

/// TLS loss plus a static background (TLSs that do not fluctuate).
struct TLSNoiseModel {
  TLSEnsemble ensemble;
  double background = 0.0;  // s^-1
};

/// Gamma_TLS at the given times. Each fluctuator starts from its thermal
/// stationary state and uses its own seed stream.
inline std::vector<double> tls_gamma_at_times(const TLSNoiseModel& model, double t,
                                              const std::vector<double>& times, uint64_t seed) {
  validate(model.ensemble);
  std::vector<double> out(times.size(), model.background);
  uint64_t stream = 0;
  std::vector<double> detuning(times.size());
  for (const auto& tls : model.ensemble.tls) {
    std::fill(detuning.begin(), detuning.end(), tls.omega_delta);
    for (const auto& c : tls.tlfs) {
      Rng rng(derive_seed(seed, stream++));
      auto p = tlf_process(c, t);
      p.state = std::bernoulli_distribution(p.occupancy())(rng) ? 1 : 0;
      const auto s = telegraph_at_times(p, times, rng);
      if (c.g == 0.0) continue;
      for (size_t i = 0; i < times.size(); ++i) detuning[i] += c.g * s[i];
    }
    const double g2 = tls.gamma2.at(t);
    for (size_t i = 0; i < times.size(); ++i) out[i] += tls_rate(tls.amplitude, g2, detuning[i]);
  }
  return out;
}

inline std::vector<double> simulate_tls_gamma(const TLSEnsemble& ens, double t, double duration,
                                              double dt, uint64_t seed) {
  return tls_gamma_at_times({ens, 0.0}, t, uniform_times(detail::grid_length(duration, dt), dt),
                            seed);
}

// ---------------------------------------------------------------------------
// Exact second-order statistics
// ---------------------------------------------------------------------------

/// Stationary process described by its autocovariance
///   C(tau) = sum_j variance_j exp(-rate_j |tau|) + white_variance [tau = 0],
/// the last term being independent per sample.
struct ProcessSpectrum {
  double mean = 0.0;
  std::vector<std::pair<double, double>> terms;  // (variance, rate 1/s)
  double white_variance = 0.0;

  double variance() const {
    double v = white_variance;
    for (const auto& [c, l] : terms) v += c;
    return v;
  }

  /// One-sided PSD of the process sampled every dt (aliasing included).
  double sampled_psd(double f, double dt) const {
    const double cw = std::cos(2.0 * std::numbers::pi * f * dt);
    double s = white_variance;
    for (const auto& [c, l] : terms) {
      const double rho = std::exp(-l * dt);
      s += c * (1.0 - rho * rho) / (1.0 - 2.0 * rho * cw + rho * rho);
    }
    return 2.0 * dt * s;
  }

  void add(const ProcessSpectrum& o) {
    mean += o.mean;
    terms.insert(terms.end(), o.terms.begin(), o.terms.end());
    white_variance += o.white_variance;
  }
};

inline constexpr size_t kMaxExactTLFs = 20;

/// Mean and autocovariance of Gamma_TLS. The rate of one TLS is a function of
/// independent two-state chains; expanding it in the product basis
/// (s_i - p_i)/sqrt(p_i (1 - p_i)) makes every coefficient f_S an exponential
/// mode with rate sum_{i in S} lambda_i and weight f_S^2.
inline ProcessSpectrum tls_spectrum(const TLSNoiseModel& model, double t, double drop_tol = 1e-10) {
  validate(model.ensemble);
  ProcessSpectrum out;
  out.mean = model.background;
  for (const auto& tls : model.ensemble.tls) {
    const size_t k = tls.tlfs.size();
    const double g2 = tls.gamma2.at(t);
    if (k > kMaxExactTLFs) {
      throw ValidationError("tls_spectrum: at most " + std::to_string(kMaxExactTLFs) +
                            " fluctuators per TLS");
    }
    const size_t states = size_t{1} << k;
    std::vector<double> v(states);
    for (size_t m = 0; m < states; ++m) {
      double d = tls.omega_delta;
      for (size_t i = 0; i < k; ++i) {
        if (m >> i & 1) d += tls.tlfs[i].g;
      }
      v[m] = tls_rate(tls.amplitude, g2, d);
    }
    std::vector<double> lambda(k), prob(k);
    for (size_t i = 0; i < k; ++i) {
      const auto p = tlf_process(tls.tlfs[i], t);
      prob[i] = p.occupancy();
      lambda[i] = p.relaxation_rate();
      const double w = std::sqrt(prob[i] * (1.0 - prob[i]));
      const size_t bit = size_t{1} << i;
      for (size_t m = 0; m < states; ++m) {
        if (m & bit) continue;
        const double v0 = v[m], v1 = v[m | bit];
        v[m] = (1.0 - prob[i]) * v0 + prob[i] * v1;
        v[m | bit] = w * (v1 - v0);
      }
    }
    out.mean += v[0];
    std::vector<std::pair<double, double>> terms;
    double total = 0.0;
    for (size_t m = 1; m < states; ++m) {
      if (v[m] == 0.0) continue;
      double rate = 0.0;
      for (size_t i = 0; i < k; ++i) {
        if (m >> i & 1) rate += lambda[i];
      }
      terms.emplace_back(v[m] * v[m], rate);
      total += v[m] * v[m];
    }
    // High-order modes of weakly nonlinear couplings are tiny; drop the
    // smallest ones as long as their summed weight stays below drop_tol.
    std::sort(terms.begin(), terms.end(), [](const auto& x, const auto& y) { return x.first < y.first; });
    double dropped = 0.0;
    size_t first = 0;
    while (first < terms.size() && dropped + terms[first].first <= drop_tol * total) {
      dropped += terms[first++].first;
    }
    out.terms.insert(out.terms.end(), terms.begin() + static_cast<std::ptrdiff_t>(first), terms.end());
  }
  return out;
}

/// Rescale the TLS amplitudes so the mean fluctuating loss is
/// fraction * target; the remainder becomes static background.
inline TLSNoiseModel calibrate_tls_model(TLSEnsemble ens, double t, double target,
                                         double fluctuating_fraction) {
  if (!(target >= 0.0)) throw ValidationError("calibrate_tls_model: target must be >= 0");
  if (!(fluctuating_fraction >= 0.0 && fluctuating_fraction <= 1.0)) {
    throw ValidationError("calibrate_tls_model: fraction must lie in [0, 1]");
  }
  TLSNoiseModel model{ens, 0.0};
  const double current = tls_spectrum(model, t).mean;
  const double want = fluctuating_fraction * target;
  if (want > 0.0) {
    if (!(current > 0.0)) {
      throw ValidationError("calibrate_tls_model: ensemble has no loss to scale");
    }
    const double s = std::sqrt(want / current);
    for (auto& tls : model.ensemble.tls) tls.amplitude *= s;
  } else {
    for (auto& tls : model.ensemble.tls) tls.amplitude = 0.0;
  }
  model.background = target - want;
  return model;
}

/// Recipe for a random TLS-TLF ensemble: tls_count identical TLSs, each
/// jittered by tlfs_per_tls fluctuators whose total switching rates are
/// log-uniform in [rate_min, rate_max].
struct TLFEnsembleSpec {
  size_t tls_count = 1;
  size_t tlfs_per_tls = 12;
  double rate_min = 1e-6;  // Hz
  double rate_max = 1e-2;  // Hz
  double amplitude = 1.0;
  double gamma2 = 2.0 * std::numbers::pi * 1e6;       // rad/s
  double omega_delta = 0.0;                          // rad/s
  double g = 2.0 * std::numbers::pi * 1e7;           // rad/s
  double omega_t = 2.0 * std::numbers::pi * 1e6;     // rad/s
  bool stratified = true;  // one rate per equal log-interval, shuffled over TLSs
};

inline TLSEnsemble make_tlf_ensemble(const TLFEnsembleSpec& spec, uint64_t seed) {
  if (!(spec.rate_min > 0.0) || !(spec.rate_max > spec.rate_min)) {
    throw ValidationError("make_tlf_ensemble: need 0 < rate_min < rate_max");
  }
  if (spec.tls_count == 0) throw ValidationError("make_tlf_ensemble: tls_count must be >= 1");
  Rng rng(seed);
  std::uniform_real_distribution<double> unit(0.0, 1.0);
  const size_t n = spec.tls_count * spec.tlfs_per_tls;
  const double l0 = std::log(spec.rate_min);
  const double width = std::log(spec.rate_max) - l0;
  std::vector<double> rates(n);
  for (size_t i = 0; i < n; ++i) {
    const double u = spec.stratified ? (static_cast<double>(i) + unit(rng)) / static_cast<double>(n)
                                     : unit(rng);
    rates[i] = std::exp(l0 + width * u);
  }
  if (spec.stratified) std::shuffle(rates.begin(), rates.end(), rng);
  TLSEnsemble ens;
  for (size_t s = 0; s < spec.tls_count; ++s) {
    TLSEntry e;
    e.amplitude = spec.amplitude;
    e.gamma2 = Linewidth::constant(spec.gamma2);
    e.omega_delta = spec.omega_delta;
    for (size_t i = 0; i < spec.tlfs_per_tls; ++i) {
      e.tlfs.push_back({spec.g, spec.omega_t, rates[s * spec.tlfs_per_tls + i]});
    }
    ens.tls.push_back(std::move(e));
  }
  return ens;
}

// ---------------------------------------------------------------------------
// Quasiparticle number
// ---------------------------------------------------------------------------

struct QPBirthDeath {
  double g_gen = 0.0;   // QP/s
  double tau_r = 1e-3;  // s
  double volume = 1.0;  // um^3
  std::optional<int64_t> initial;  // unset: draw from the stationary law

  double mean() const { return g_gen * tau_r; }
};

inline void validate(const QPBirthDeath& p) {
  if (!(p.g_gen >= 0.0)) throw ValidationError("QPBirthDeath: g_gen must be >= 0");
  if (!(p.tau_r > 0.0)) throw ValidationError("QPBirthDeath: tau_r must be positive");
  if (!(p.volume > 0.0)) throw ValidationError("QPBirthDeath: volume must be positive");
  if (p.initial && *p.initial < 0) throw ValidationError("QPBirthDeath: initial N < 0");
}

enum class QPMode {
  kGillespie,      // event by event
  kExactSkeleton,  // exact transition law between grid points
  kStationary,     // i.i.d. draws from Poisson(mu): grid spacing >> tau_r
};

/// Linear birth-death chain (birth g_gen, death N / tau_r) sampled on the
/// grid 0, dt, ..., duration. Its stationary law is Poisson(g_gen tau_r).
inline std::vector<int64_t> simulate_qp_number(const QPBirthDeath& p, double duration, double dt,
                                               uint64_t seed, QPMode mode = QPMode::kGillespie) {
  validate(p);
  const double mu = p.mean();
  if (!(mu < 1e7)) throw ValidationError("simulate_qp_number: mean QP number must be < 1e7");
  const size_t n = detail::grid_length(duration, dt);
  Rng rng(seed);
  std::vector<int64_t> out(n);
  if (mode == QPMode::kStationary) {
    for (auto& v : out) v = detail::poisson(rng, mu);
    return out;
  }
  int64_t state = p.initial ? *p.initial : detail::poisson(rng, mu);
  if (mode == QPMode::kExactSkeleton) {
    const double keep = std::exp(-dt / p.tau_r);
    const double born = mu * (1.0 - keep);
    out[0] = state;
    for (size_t i = 1; i < n; ++i) {
      state = detail::binomial(rng, state, keep) + detail::poisson(rng, born);
      out[i] = state;
    }
    return out;
  }
  std::uniform_real_distribution<double> unit(0.0, 1.0);
  double t = 0.0;
  for (size_t i = 0; i < n; ++i) {
    const double ti = static_cast<double>(i) * dt;
    for (;;) {
      const double birth = p.g_gen;
      const double death = static_cast<double>(state) / p.tau_r;
      const double total = birth + death;
      if (!(total > 0.0)) {
        t = std::numeric_limits<double>::infinity();
        break;
      }
      const double wait = detail::exponential(rng, total);
      if (t + wait > ti) {
        // Memorylessness: restart the clock at the grid point.
        t = ti;
        break;
      }
      t += wait;
      state += unit(rng) * total < birth ? 1 : -1;
    }
    out[i] = state;
  }
  return out;
}

/// Instantaneous Gamma_QP = eta(T) N / (V n_CP).
inline std::vector<double> gamma_qp_path(const std::vector<int64_t>& n_path, const QPBirthDeath& p,
                                         const QubitParams& q, double t) {
  validate(p);
  const double scale = eta(t, q) / (p.volume * cooper_pair_density(q.delta));
  std::vector<double> out(n_path.size());
  for (size_t i = 0; i < n_path.size(); ++i) out[i] = scale * static_cast<double>(n_path[i]);
  return out;
}

/// Non-equilibrium and thermal QP populations as two independent chains.
struct QPNoiseModel {
  QPModelParams params;
  double tau_r = 1e-3;  // s
  QPMode mode = QPMode::kExactSkeleton;
};

inline std::pair<QPBirthDeath, QPBirthDeath> qp_processes(const QPNoiseModel& m, double t) {
  validate(m.params);
  const double ncp = m.params.n_cp();
  const double mu0 = m.params.x_qp0 * ncp * m.params.v_eff0;
  const double muth = x_qp_thermal(t, m.params.delta) * ncp * m.params.v_eff_th;
  return {QPBirthDeath{mu0 / m.tau_r, m.tau_r, m.params.v_eff0, std::nullopt},
          QPBirthDeath{muth / m.tau_r, m.tau_r, m.params.v_eff_th, std::nullopt}};
}

inline ProcessSpectrum qp_spectrum(const QPNoiseModel& m, const QubitParams& q, double t) {
  const auto [neq, th] = qp_processes(m, t);
  const QubitParams qg = detail::with_gap(q, m.params.delta);
  const double e = eta(t, qg);
  const double ncp = m.params.n_cp();
  ProcessSpectrum out;
  for (const auto& p : {neq, th}) {
    const double s = e / (p.volume * ncp);
    out.mean += s * p.mean();
    if (p.mean() > 0.0) out.terms.emplace_back(s * s * p.mean(), 1.0 / p.tau_r);
  }
  return out;
}

// ---------------------------------------------------------------------------
// Measurement layer
// ---------------------------------------------------------------------------

struct MeasurementConfig {
  int shot_count = 0;               // > 0 adds projection noise P(1-P)/shots
  std::vector<double> decay_times;  // s; empty: decay_points up to decay_span_t1 / Gamma1
  int decay_points = 50;
  double decay_span_t1 = 3.0;
  double readout_noise_std = 0.02;  // population units
  double cadence = 480.0;           // s
  double cadence_jitter = 0.0;      // s, uniform +- jitter on sample times
  double duration = 72.0 * 3600.0;  // s

  size_t samples() const {
    return static_cast<size_t>(std::floor(duration / cadence * (1.0 + 1e-12)));
  }
};

inline void validate(const MeasurementConfig& m) {
  if (!(m.cadence > 0.0)) throw ValidationError("MeasurementConfig: cadence must be positive");
  if (!(m.duration >= 16.0 * m.cadence)) {
    throw ValidationError("MeasurementConfig: duration must cover at least 16 samples");
  }
  if (!(m.readout_noise_std >= 0.0)) throw ValidationError("MeasurementConfig: noise std < 0");
  if (!(m.cadence_jitter >= 0.0 && m.cadence_jitter < 0.5 * m.cadence)) {
    throw ValidationError("MeasurementConfig: jitter must lie in [0, cadence / 2)");
  }
  if (m.shot_count < 0) throw ValidationError("MeasurementConfig: shot_count < 0");
  if (m.decay_times.empty()) {
    if (m.decay_points < 3) throw ValidationError("MeasurementConfig: need >= 3 decay points");
    if (!(m.decay_span_t1 > 0.0)) throw ValidationError("MeasurementConfig: decay span <= 0");
  } else if (m.decay_times.size() < 3) {
    throw ValidationError("MeasurementConfig: need >= 3 decay times");
  }
}

/// Decay-time grid: explicit, or evenly spaced over [0, span / gamma_ref].
inline std::vector<double> decay_grid(const MeasurementConfig& m, double gamma_ref) {
  if (!m.decay_times.empty()) return m.decay_times;
  std::vector<double> t(m.decay_points);
  const double end = m.decay_span_t1 / gamma_ref;
  for (int j = 0; j < m.decay_points; ++j) t[j] = end * j / (m.decay_points - 1);
  return t;
}

namespace detail {

inline double decay_noise_variance(const MeasurementConfig& m, double p) {
  double v = m.readout_noise_std * m.readout_noise_std;
  if (m.shot_count > 0) v += std::clamp(p, 0.0, 1.0) * (1.0 - std::clamp(p, 0.0, 1.0)) / m.shot_count;
  return v;
}

// Weighted log-linear fit on the clearly positive points; starting guess.
inline std::pair<double, double> loglinear_start(const std::vector<double>& t,
                                                 const std::vector<double>& p, double floor) {
  double sw = 0, st = 0, sy = 0, stt = 0, sty = 0;
  size_t used = 0;
  for (size_t j = 0; j < t.size(); ++j) {
    if (!(p[j] > floor)) continue;
    const double w = p[j] * p[j];
    const double y = std::log(p[j]);
    sw += w;
    st += w * t[j];
    sy += w * y;
    stt += w * t[j] * t[j];
    sty += w * t[j] * y;
    ++used;
  }
  const double det = sw * stt - st * st;
  if (used < 2 || !(det > 0.0)) return {1.0, 1.0 / (t.back() - t.front())};
  const double slope = (sw * sty - st * sy) / det;
  const double icpt = (sy - slope * st) / sw;
  const double rate = -slope > 0.0 ? -slope : 1.0 / (t.back() - t.front());
  return {std::exp(icpt), rate};
}

}  // namespace detail

/// Least-squares fit of A exp(-Gamma t) to a measured decay curve.
inline double fit_exponential_decay(const std::vector<double>& t, const std::vector<double>& p,
                                    double noise_floor = 0.0) {
  if (t.size() != p.size() || t.size() < 3) {
    throw ValidationError("fit_exponential_decay: need >= 3 matching points");
  }
  const auto [a0, g0] = detail::loglinear_start(t, p, std::max(3.0 * noise_floor, 1e-12));
  Vec tt(t.size()), pp(p.size());
  for (size_t j = 0; j < t.size(); ++j) {
    tt[j] = t[j] * g0;  // fit in units of the starting rate
    pp[j] = p[j];
  }
  FitProblem prob;
  prob.residuals = [&](const Vec& k) -> Vec {
    return (k[0] * (-k[1] * tt.array()).exp() - pp.array()).matrix();
  };
  prob.initial = Vec(2);
  prob.initial << a0, 1.0;
  prob.names = {"amplitude", "rate"};
  const auto r = nlls_solve(prob);
  const double rate = r.params[1] * g0;
  if (!(rate > 0.0) || !std::isfinite(rate)) {
    throw NumericalError("fit_exponential_decay: fitted rate " + std::to_string(rate) +
                         " is not positive");
  }
  return rate;
}

/// Simulate one relaxation curve P(t) = exp(-Gamma1 t) + noise and fit it.
/// The grid must reach 0.1 / Gamma1; shorter records carry no rate information.
inline double synthesize_decay_and_fit(double gamma1_true, const MeasurementConfig& m,
                                       uint64_t seed, double gamma_ref = 0.0) {
  if (!(gamma1_true > 0.0)) throw ValidationError("synthesize_decay_and_fit: rate must be positive");
  const auto t = decay_grid(m, gamma_ref > 0.0 ? gamma_ref : gamma1_true);
  if (t.size() < 3) throw ValidationError("synthesize_decay_and_fit: need >= 3 decay times");
  const double span = t.back() - t.front();
  if (!(span * gamma1_true >= 0.1)) {
    throw ValidationError("synthesize_decay_and_fit: decay grid spans " +
                          std::to_string(span * gamma1_true) + "/Gamma1 (< 0.1)");
  }
  Rng rng(seed);
  std::normal_distribution<double> unit(0.0, 1.0);
  std::vector<double> p(t.size());
  for (size_t j = 0; j < t.size(); ++j) {
    const double clean = std::exp(-gamma1_true * t[j]);
    p[j] = clean + std::sqrt(detail::decay_noise_variance(m, clean)) * unit(rng);
  }
  return fit_exponential_decay(t, p, m.readout_noise_std);
}

/// Asymptotic variance of the fitted rate (sandwich form for the unweighted
/// fit, exact to first order in the noise) at rate gamma1 on grid t.
inline double decay_fit_variance(double gamma1, const std::vector<double>& t,
                                 const MeasurementConfig& m) {
  Eigen::Matrix2d jtj = Eigen::Matrix2d::Zero();
  Eigen::Matrix2d meat = Eigen::Matrix2d::Zero();
  for (double tj : t) {
    const double e = std::exp(-gamma1 * tj);
    const Eigen::Vector2d j(e, -tj * e);
    jtj += j * j.transpose();
    meat += detail::decay_noise_variance(m, e) * j * j.transpose();
  }
  const Eigen::Matrix2d inv = jtj.inverse();
  return (inv * meat * inv)(1, 1);
}

// ---------------------------------------------------------------------------
// End-to-end experiment
// ---------------------------------------------------------------------------

struct ExperimentOptions {
  bool tls_fluctuations = true;
  bool qp_fluctuations = true;
  bool measurement_noise = true;
  std::optional<std::pair<double, double>> truth_band;  // Hz; default as analysis
  int truth_bins_per_decade = 8;
};

/// Exact spectrum of the measured series: TLS and QP modes plus the white
/// decay-fit scatter, evaluated at the mean rate.
inline ProcessSpectrum experiment_spectrum(const QubitParams& q, const TLSNoiseModel& tls,
                                           const QPNoiseModel& qp, const MeasurementConfig& m,
                                           double t, const ExperimentOptions& opt = {}) {
  ProcessSpectrum s = tls_spectrum(tls, t);
  if (!opt.tls_fluctuations) s.terms.clear();
  auto qs = qp_spectrum(qp, q, t);
  if (!opt.qp_fluctuations) qs.terms.clear();
  s.add(qs);
  if (opt.measurement_noise && (m.readout_noise_std > 0.0 || m.shot_count > 0)) {
    s.white_variance += decay_fit_variance(s.mean, decay_grid(m, s.mean), m);
  }
  return s;
}

/// Expected one-sided periodogram of n samples at spacing dt: the sampled
/// spectrum seen through the record's Fejer window. Each exponential mode
/// sums in closed form, sum_{|m|<n} (n - |m|) z^|m| with z = rho e^{-i w}.
inline NoiseSpectrum expected_periodogram(const ProcessSpectrum& s, size_t n, double dt) {
  NoiseSpectrum out;
  out.estimator = "expected-periodogram";
  out.record_length = n;
  out.dt = dt;
  const double nn = static_cast<double>(n);
  for (size_t k = 1; k <= n / 2; ++k) {
    const double w = 2.0 * std::numbers::pi * static_cast<double>(k) / nn;
    const std::complex<double> phase = std::polar(1.0, -w);
    double total = s.white_variance * nn;
    for (const auto& [c, l] : s.terms) {
      const double rho = std::exp(-l * dt);
      const std::complex<double> z = rho * phase;
      const std::complex<double> one_minus = 1.0 - z;
      const std::complex<double> sum =
          z * (nn * one_minus - (1.0 - std::pow(rho, nn))) / (one_minus * one_minus);
      total += c * (nn + 2.0 * sum.real());
    }
    const bool nyquist = (n % 2 == 0) && k == n / 2;
    out.freqs.push_back(static_cast<double>(k) / (nn * dt));
    out.psd.push_back(std::max((nyquist ? 1.0 : 2.0) * dt * total / nn, 0.0));
    out.counts.push_back(1);
  }
  return out;
}

/// Ground-truth (a, b): the record's expected periodogram projected onto
/// a/f + b exactly as the analysis projects data (band, log bins, log fit).
inline SpectralTruth project_spectrum(const ProcessSpectrum& s, size_t n, double dt,
                                      std::optional<std::pair<double, double>> band = std::nullopt,
                                      int bins_per_decade = 8) {
  if (!(s.variance() > 0.0)) return {0.0, 0.0};
  const NoiseSpectrum raw = expected_periodogram(s, n, dt);
  const auto b = band ? *band : default_band(raw);
  FitOptions fo;
  fo.periodogram_bias_correction = false;
  const auto fit =
      fit_one_over_f_plus_white(log_bin(band_limit(raw, b.first, b.second), bins_per_decade), fo);
  return {fit.a, fit.b};
}

/// Gamma_1 series at the measurement cadence: TLS and QP rates sampled at
/// each tick, passed through a simulated decay curve and fit. The series
/// carries the exact spectral ground truth for round-trip scoring.
inline Gamma1Series simulate_experiment(const QubitParams& q, const TLSNoiseModel& tls,
                                        const QPNoiseModel& qp, const MeasurementConfig& m,
                                        double t, uint64_t seed,
                                        const ExperimentOptions& opt = {}) {
  validate(q);
  validate(m);
  if (!(t > 0.0)) throw ValidationError("simulate_experiment: temperature must be positive");
  const size_t n = m.samples();
  std::vector<double> times = uniform_times(n, m.cadence);
  if (m.cadence_jitter > 0.0) {
    Rng jr(derive_seed(seed, 5));
    std::uniform_real_distribution<double> u(-m.cadence_jitter, m.cadence_jitter);
    for (size_t i = 1; i < n; ++i) times[i] += u(jr);
  }

  const ProcessSpectrum spec = experiment_spectrum(q, tls, qp, m, t, opt);
  const double tls_mean = tls_spectrum(tls, t).mean;
  std::vector<double> gamma(n, tls_mean);
  if (opt.tls_fluctuations) gamma = tls_gamma_at_times(tls, t, times, derive_seed(seed, 1));

  const auto [neq, th] = qp_processes(qp, t);
  const QubitParams qg = detail::with_gap(q, qp.params.delta);
  uint64_t stream = 2;
  for (const auto& proc : {neq, th}) {
    const uint64_t s = derive_seed(seed, stream++);
    if (!opt.qp_fluctuations) {
      const double level = eta(t, qg) * proc.mean() / (proc.volume * qp.params.n_cp());
      for (auto& g : gamma) g += level;
      continue;
    }
    std::vector<int64_t> counts;
    if (m.cadence_jitter > 0.0 && qp.mode != QPMode::kStationary) {
      // Irregular ticks: step the exact transition law tick by tick.
      Rng rng(s);
      const double mu = proc.mean();
      int64_t state = detail::poisson(rng, mu);
      counts.resize(n);
      counts[0] = state;
      for (size_t i = 1; i < n; ++i) {
        const double keep = std::exp(-(times[i] - times[i - 1]) / proc.tau_r);
        state = detail::binomial(rng, state, keep) + detail::poisson(rng, mu * (1.0 - keep));
        counts[i] = state;
      }
    } else {
      counts = simulate_qp_number(proc, m.cadence * static_cast<double>(n - 1), m.cadence, s, qp.mode);
    }
    const auto g = gamma_qp_path(counts, proc, qg, t);
    for (size_t i = 0; i < n; ++i) gamma[i] += g[i];
  }

  Gamma1Series out;
  out.samples.resize(n);
  out.dt = m.cadence;
  out.temperature = t;
  if (m.cadence_jitter > 0.0) out.times = times;
  if (opt.measurement_noise) {
    const uint64_t base = derive_seed(seed, 4);
    for (size_t i = 0; i < n; ++i) {
      out.samples[i] = synthesize_decay_and_fit(gamma[i], m, derive_seed(base, i), spec.mean);
    }
  } else {
    out.samples = gamma;
  }
  for (double v : out.samples) {
    if (!(v > 0.0)) throw NumericalError("simulate_experiment: non-positive Gamma1 sample");
  }
  out.truth = project_spectrum(spec, n, m.cadence, opt.truth_band, opt.truth_bins_per_decade);
  out.provenance["seed"] = std::to_string(seed);
  out.provenance["provenance"] = "synthetic";
  return out;
}

}  // namespace qubit
