#include <gtest/gtest.h>

#include <Eigen/Dense>
#include <algorithm>
#include <boost/math/distributions/chi_squared.hpp>
#include <cmath>
#include <map>
#include <numeric>
#include <vector>

#include "qubit/synth.hpp"

using namespace qubit;

namespace {

QubitParams qubit_b() { return QubitParams::from_ghz(12.0, 0.2, 4.0, 38.2, 0.013, "B"); }

QPNoiseModel qp_b() {
  QPNoiseModel m;
  m.params = {5.5e-8, units::ghz_to_joule(38.2), 0.290, 0.039};
  return m;
}

template <typename T>
double mean_of(const std::vector<T>& v) {
  double s = 0;
  for (auto x : v) s += static_cast<double>(x);
  return s / static_cast<double>(v.size());
}

template <typename T>
double var_of(const std::vector<T>& v) {
  const double m = mean_of(v);
  double s = 0;
  for (auto x : v) s += (static_cast<double>(x) - m) * (static_cast<double>(x) - m);
  return s / static_cast<double>(v.size());
}

double median(std::vector<double> v) {
  std::sort(v.begin(), v.end());
  const size_t n = v.size();
  return n % 2 ? v[n / 2] : 0.5 * (v[n / 2 - 1] + v[n / 2]);
}

// Exact autocovariance of F(s_1..s_k) from the joint transition matrix,
// independent of the product-basis expansion.
double transition_matrix_autocov(const TLSEntry& tls, double t, double tau) {
  const size_t k = tls.tlfs.size();
  const size_t states = size_t{1} << k;
  Eigen::MatrixXd p = Eigen::MatrixXd::Ones(1, 1);
  Eigen::VectorXd pi = Eigen::VectorXd::Ones(1);
  for (size_t i = 0; i < k; ++i) {
    const auto proc = tlf_process(tls.tlfs[i], t);
    const double up = proc.rate_up, down = proc.rate_down, lam = up + down;
    const double e = std::exp(-lam * tau);
    Eigen::Matrix2d pi2;  // rows: from, cols: to; index 0 = down
    pi2 << (down + up * e) / lam, up * (1 - e) / lam, down * (1 - e) / lam, (up + down * e) / lam;
    Eigen::Vector2d st(down / lam, up / lam);
    // Kronecker products with the new fluctuator as the high bit.
    Eigen::MatrixXd np(p.rows() * 2, p.cols() * 2);
    Eigen::VectorXd npi(pi.size() * 2);
    for (int a = 0; a < 2; ++a) {
      for (int b = 0; b < 2; ++b) np.block(a * p.rows(), b * p.cols(), p.rows(), p.cols()) = pi2(a, b) * p;
      npi.segment(a * pi.size(), pi.size()) = st[a] * pi;
    }
    p = np;
    pi = npi;
  }
  Eigen::VectorXd f(states);
  const double g2 = tls.gamma2.at(t);
  for (size_t m = 0; m < states; ++m) {
    double d = tls.omega_delta;
    for (size_t i = 0; i < k; ++i) {
      if (m >> i & 1) d += tls.tlfs[i].g;
    }
    f[m] = tls_rate(tls.amplitude, g2, d);
  }
  const double mean = pi.dot(f);
  double cross = 0;
  for (size_t a = 0; a < states; ++a) {
    for (size_t b = 0; b < states; ++b) cross += pi[a] * p(a, b) * f[a] * f[b];
  }
  return cross - mean * mean;
}

TLSEntry three_tlf_tls() {
  TLSEntry e;
  e.amplitude = 300.0;
  e.gamma2 = Linewidth::constant(2 * std::numbers::pi * 1e6);
  e.omega_delta = 2 * std::numbers::pi * 0.7e6;
  e.tlfs = {{2 * std::numbers::pi * 0.4e6, 2 * std::numbers::pi * 1e9, 0.3},
            {2 * std::numbers::pi * 1.3e6, 2 * std::numbers::pi * 2e9, 0.05},
            {2 * std::numbers::pi * 0.2e6, 2 * std::numbers::pi * 0.5e9, 2.0}};
  return e;
}

}  // namespace

// ---------------------------------------------------------------------------
// Telegraph
// ---------------------------------------------------------------------------

TEST(Telegraph, SymmetricOccupancy) {
  const double r = 0.05, dt = 1.0;
  TLFProcess p{r, r, 0, 0.0};
  const auto path = simulate_telegraph(p, 1e5 - 1, dt, 11);
  ASSERT_EQ(path.size(), 100000u);
  const double occ = mean_of(path);
  // Binomial bound with the Markov-chain effective sample size.
  const double rho = std::exp(-2 * r * dt);
  const double sigma = std::sqrt(0.25 / path.size() * (1 + rho) / (1 - rho));
  EXPECT_NEAR(occ, 0.5, 3 * sigma);
}

TEST(Telegraph, NoUpRateStaysDown) {
  TLFProcess p{0.0, 0.3, 0, 0.0};
  const auto path = simulate_telegraph(p, 1000, 0.1, 1);
  for (auto s : path) EXPECT_EQ(s, 0);
}

TEST(Telegraph, MeanDwellTime) {
  const double down = 0.02, dt = 0.25;
  TLFProcess p{0.03, down, 1, 0.0};
  const auto path = simulate_telegraph(p, 2.2e6, dt, 5);
  std::vector<double> dwell;
  size_t run = 0;
  bool first = true;  // the first run is censored at t = 0
  for (size_t i = 0; i < path.size(); ++i) {
    if (path[i]) {
      ++run;
    } else if (run) {
      if (!first) dwell.push_back(run * dt);
      first = false;
      run = 0;
    } else {
      first = false;
    }
  }
  ASSERT_GE(dwell.size(), 10000u);
  EXPECT_NEAR(mean_of(dwell), 1 / down, 0.05 / down);
}

TEST(Telegraph, StabilityPrecondition) {
  TLFProcess p{1.0, 2.0, 0, 0.0};
  EXPECT_THROW(simulate_telegraph(p, 10, 0.05, 1), ValidationError);
  EXPECT_NO_THROW(simulate_telegraph(p, 10, 0.049, 1));
  EXPECT_THROW(validate(TLFProcess{0.0, 0.0, 0, 0.0}), ValidationError);
}

TEST(Telegraph, Deterministic) {
  TLFProcess p{0.01, 0.02, 0, 0.0};
  EXPECT_EQ(simulate_telegraph(p, 1e4, 1.0, 99), simulate_telegraph(p, 1e4, 1.0, 99));
  EXPECT_NE(simulate_telegraph(p, 1e4, 1.0, 99), simulate_telegraph(p, 1e4, 1.0, 98));
}

TEST(Telegraph, DetailedBalance) {
  const TLFCoupling c{0.0, 2 * std::numbers::pi * 2e9, 0.4};
  const double t = 0.05;
  const auto p = tlf_process(c, t);
  EXPECT_NEAR(p.rate_up + p.rate_down, 0.4, 1e-15);
  const double boltz = std::exp(-units::kHbar * c.omega_t / (units::kBoltzmann * t));
  EXPECT_NEAR(p.rate_up / p.rate_down, boltz, 1e-12 * boltz);
}

// ---------------------------------------------------------------------------
// TLS rate paths and their exact statistics
// ---------------------------------------------------------------------------

TEST(TlsGamma, ZeroCouplingIsConstant) {
  auto e = three_tlf_tls();
  for (auto& f : e.tlfs) f.g = 0.0;
  const auto path = simulate_tls_gamma({{e}}, 0.05, 1000, 1.0, 3);
  for (double v : path) EXPECT_EQ(v, path.front());
  EXPECT_DOUBLE_EQ(path.front(), tls_rate(e.amplitude, e.gamma2.at(0.05), e.omega_delta));
}

TEST(TlsGamma, SingleFluctuatorIsTwoLevel) {
  auto e = three_tlf_tls();
  e.tlfs.resize(1);
  const auto path = simulate_tls_gamma({{e}}, 0.05, 5000, 1.0, 3);
  std::map<double, int> levels;
  for (double v : path) ++levels[v];
  ASSERT_EQ(levels.size(), 2u);
  const double g2 = e.gamma2.at(0.05);
  EXPECT_DOUBLE_EQ(levels.begin()->first,
                   tls_rate(e.amplitude, g2, e.omega_delta + e.tlfs[0].g));
  EXPECT_DOUBLE_EQ(levels.rbegin()->first, tls_rate(e.amplitude, g2, e.omega_delta));
}

TEST(TlsSpectrum, MatchesTransitionMatrixOracle) {
  const auto e = three_tlf_tls();
  for (double t : {0.02, 0.1}) {
    const auto s = tls_spectrum({{{e}}, 0.0}, t, 0.0);
    for (double tau : {0.0, 0.5, 3.0, 20.0}) {
      double model = 0;
      for (auto [c, l] : s.terms) model += c * std::exp(-l * tau);
      const double oracle = transition_matrix_autocov(e, t, tau);
      EXPECT_NEAR(model, oracle, 1e-9 * transition_matrix_autocov(e, t, 0.0)) << t << " " << tau;
    }
  }
}

TEST(TlsSpectrum, MeanMatchesEnumeration) {
  const auto e = three_tlf_tls();
  const double t = 0.04;
  double mean = 0;
  for (int m = 0; m < 8; ++m) {
    double prob = 1, d = e.omega_delta;
    for (int i = 0; i < 3; ++i) {
      const double p = tlf_process(e.tlfs[i], t).occupancy();
      prob *= (m >> i & 1) ? p : 1 - p;
      if (m >> i & 1) d += e.tlfs[i].g;
    }
    mean += prob * tls_rate(e.amplitude, e.gamma2.at(t), d);
  }
  EXPECT_NEAR(tls_spectrum({{{e}}, 5.0}, t).mean, mean + 5.0, 1e-12 * mean);
}

TEST(TlsSpectrum, PathStatisticsMatch) {
  const auto e = three_tlf_tls();
  const TLSNoiseModel model{{{e}}, 0.0};
  const double t = 0.05;
  const auto s = tls_spectrum(model, t);
  std::vector<double> means, vars;
  for (int seed = 0; seed < 20; ++seed) {
    const auto path = tls_gamma_at_times(model, t, uniform_times(20000, 1.0), seed);
    means.push_back(mean_of(path));
    vars.push_back(var_of(path));
  }
  EXPECT_NEAR(mean_of(means), s.mean, 0.01 * s.mean);
  EXPECT_NEAR(mean_of(vars), s.variance(), 0.05 * s.variance());
}

TEST(TlsSpectrum, CalibrationHitsTarget) {
  TLFEnsembleSpec spec;
  spec.tls_count = 6;
  spec.tlfs_per_tls = 2;
  const auto ens = make_tlf_ensemble(spec, 4);
  const auto m = calibrate_tls_model(ens, 0.05, 6.2e3, 0.6);
  EXPECT_NEAR(tls_spectrum(m, 0.05).mean, 6.2e3, 1e-9 * 6.2e3);
  EXPECT_NEAR(m.background, 0.4 * 6.2e3, 1e-9);
  EXPECT_THROW(calibrate_tls_model(ens, 0.05, 1.0, 1.5), ValidationError);
}

TEST(TlsSpectrum, EnsembleRecipe) {
  TLFEnsembleSpec spec;
  spec.tls_count = 5;
  spec.tlfs_per_tls = 4;
  spec.rate_min = 1e-3;
  spec.rate_max = 10.0;
  const auto ens = make_tlf_ensemble(spec, 8);
  ASSERT_EQ(ens.tls.size(), 5u);
  std::vector<double> logs;
  for (const auto& t : ens.tls) {
    ASSERT_EQ(t.tlfs.size(), 4u);
    for (const auto& f : t.tlfs) logs.push_back(std::log10(f.switch_rate));
  }
  std::sort(logs.begin(), logs.end());
  // Stratified: exactly one rate per 0.2-decade stratum.
  for (size_t i = 0; i < logs.size(); ++i) {
    EXPECT_GE(logs[i], -3 + 0.2 * i - 1e-12);
    EXPECT_LE(logs[i], -3 + 0.2 * (i + 1) + 1e-12);
  }
}

TEST(ProcessSpectrumTest, SampledPsdIntegratesToVariance) {
  ProcessSpectrum s;
  s.terms = {{2.0, 0.01}, {0.5, 3.0}, {1.0, 0.4}};
  s.white_variance = 0.25;
  const double dt = 0.7, fn = 0.5 / dt;
  // Simpson rule on [0, f_Nyquist].
  const int n = 20000;
  double sum = 0;
  for (int i = 0; i <= n; ++i) {
    const double w = (i == 0 || i == n) ? 1 : (i % 2 ? 4 : 2);
    sum += w * s.sampled_psd(fn * i / n, dt);
  }
  sum *= fn / n / 3;
  EXPECT_NEAR(sum, s.variance(), 1e-6 * s.variance());
}

TEST(ProcessSpectrumTest, ExpectedPeriodogramMatchesDirectSum) {
  ProcessSpectrum s;
  s.terms = {{2.0, 0.01}, {0.5, 3.0}, {1.0, 0.4}, {0.1, 1e-6}};
  s.white_variance = 0.25;
  for (size_t n : {64u, 65u}) {
    const double dt = 0.7;
    const auto e = expected_periodogram(s, n, dt);
    for (size_t k = 1; k <= n / 2; ++k) {
      long double tot = 0;
      for (long m = -static_cast<long>(n) + 1; m < static_cast<long>(n); ++m) {
        long double c = m == 0 ? s.white_variance : 0;
        for (auto [v, l] : s.terms) c += v * std::exp(-l * dt * std::abs(m));
        tot += (n - std::abs(m)) * c * std::cos(2 * std::numbers::pi_v<long double> * k * m / n);
      }
      const double nyq = (n % 2 == 0 && k == n / 2) ? 1 : 2;
      const double direct = static_cast<double>(nyq * dt * tot / n);
      EXPECT_NEAR(e.psd[k - 1], direct, 1e-10 * std::abs(direct) + 1e-14) << n << " " << k;
    }
  }
}

TEST(ProcessSpectrumTest, ExpectedPeriodogramMatchesMonteCarlo) {
  // Averaged periodograms of simulated AR(1) paths converge to the formula.
  const double rho = 0.8, var = 3.0, dt = 2.0;
  const size_t n = 128;
  ProcessSpectrum s;
  s.terms = {{var, -std::log(rho) / dt}};
  const auto e = expected_periodogram(s, n, dt);
  std::vector<double> acc(n / 2, 0.0);
  Rng rng(3);
  std::normal_distribution<double> nd(0, 1);
  const int reps = 4000;
  for (int r = 0; r < reps; ++r) {
    std::vector<double> x(n);
    x[0] = std::sqrt(var) * nd(rng);
    for (size_t i = 1; i < n; ++i) x[i] = rho * x[i - 1] + std::sqrt(var * (1 - rho * rho)) * nd(rng);
    for (auto& v : x) v += 100;
    const auto p = psd_from_autocorr(std::span<const double>(x), dt);
    for (size_t k = 0; k < acc.size(); ++k) acc[k] += p.psd[k] / reps;
  }
  for (size_t k = 0; k < acc.size(); ++k) {
    EXPECT_NEAR(acc[k], e.psd[k], 5 * e.psd[k] / std::sqrt(reps)) << k;
  }
}

// ---------------------------------------------------------------------------
// Quasiparticle number
// ---------------------------------------------------------------------------

TEST(QpNumber, NoGenerationStaysEmpty) {
  QPBirthDeath p{0.0, 1e-3, 1.0, 0};
  for (auto mode : {QPMode::kGillespie, QPMode::kExactSkeleton, QPMode::kStationary}) {
    const auto n = simulate_qp_number(p, 1.0, 0.01, 1, mode);
    for (auto v : n) EXPECT_EQ(v, 0);
  }
}

TEST(QpNumber, DecaysFromInitialState) {
  QPBirthDeath p{0.0, 0.1, 1.0, 1000};
  const auto n = simulate_qp_number(p, 2.0, 0.1, 2, QPMode::kGillespie);
  EXPECT_EQ(n[0], 1000);
  EXPECT_NEAR(static_cast<double>(n[5]), 1000 * std::exp(-5.0), 5 * std::sqrt(1000 * std::exp(-5.0)));
}

TEST(QpNumber, FanoFactorAllModes) {
  // 1e6 tau_r of stationary samples, spaced 10 tau_r so they are independent.
  const QPBirthDeath p{2000.0, 5e-3, 1.0, std::nullopt};
  for (auto mode : {QPMode::kGillespie, QPMode::kExactSkeleton, QPMode::kStationary}) {
    const auto n = simulate_qp_number(p, 5e-2 * 1e5, 5e-2, 7, mode);
    const double fano = var_of(n) / mean_of(n);
    EXPECT_NEAR(fano, 1.0, 0.05) << static_cast<int>(mode);
    EXPECT_NEAR(mean_of(n), p.mean(), 0.01 * p.mean());
  }
}

// Pearson chi-square p-value of integer samples against Poisson(mu); cells
// are pooled left to right until each expects at least 5 counts, and the last
// cell absorbs the upper tail.
double poisson_chi2_pvalue(const std::vector<int64_t>& n, double mu) {
  std::map<int64_t, double> counts;
  for (auto v : n) ++counts[v];
  const double total = static_cast<double>(n.size());
  std::vector<double> obs_cells, exp_cells;
  double obs = 0, expct = 0, pk = std::exp(-mu), cdf = 0;
  for (int64_t k = 0; (1 - cdf) * total >= 5; ++k) {
    obs += counts.count(k) ? counts[k] : 0;
    expct += pk * total;
    cdf += pk;
    if (expct >= 5) {
      obs_cells.push_back(obs);
      exp_cells.push_back(expct);
      obs = expct = 0;
    }
    pk *= mu / static_cast<double>(k + 1);
  }
  double seen = std::accumulate(obs_cells.begin(), obs_cells.end(), 0.0);
  obs_cells.push_back(total - seen);
  exp_cells.push_back(std::max(total - std::accumulate(exp_cells.begin(), exp_cells.end(), 0.0), 1e-300));
  // Merge a tiny tail cell into its neighbour.
  if (exp_cells.back() < 5) {
    obs_cells[obs_cells.size() - 2] += obs_cells.back();
    exp_cells[exp_cells.size() - 2] += exp_cells.back();
    obs_cells.pop_back();
    exp_cells.pop_back();
  }
  double chi2 = 0;
  for (size_t i = 0; i < obs_cells.size(); ++i) {
    chi2 += (obs_cells[i] - exp_cells[i]) * (obs_cells[i] - exp_cells[i]) / exp_cells[i];
  }
  boost::math::chi_squared dist(static_cast<double>(obs_cells.size() - 1));
  return boost::math::cdf(boost::math::complement(dist, chi2));
}

TEST(QpNumber, PoissonChiSquare) {
  const QPBirthDeath p{800.0, 1e-2, 1.0, std::nullopt};
  for (auto mode : {QPMode::kGillespie, QPMode::kExactSkeleton, QPMode::kStationary}) {
    // Samples 10 tau_r apart are effectively independent.
    const auto n = simulate_qp_number(p, 0.1 * (1e5 - 1), 0.1, 21, mode);
    EXPECT_GT(poisson_chi2_pvalue(n, p.mean()), 0.01) << static_cast<int>(mode);
  }
}

TEST(QpNumber, AutocorrelationTime) {
  const double tau = 0.02;
  const QPBirthDeath p{5000.0, tau, 1.0, std::nullopt};
  const double dt = tau / 10;
  const auto n = simulate_qp_number(p, dt * (2e5 - 1), dt, 3, QPMode::kGillespie);
  std::vector<double> x(n.begin(), n.end());
  const auto c = autocorrelation(x, 40);
  // Integrated autocorrelation time.
  double sum = 0;
  for (size_t k = 1; k < c.size(); ++k) {
    if (c[k] <= 0) break;
    sum += c[k] / c[0];
  }
  const double tau_int = dt * (0.5 + sum);
  // Discrete sum of exp(-k dt / tau) plus one half equals tau to O((dt/tau)^2).
  EXPECT_NEAR(tau_int, tau, 0.1 * tau);
  // And the lag-10 correlation equals e^-1.
  EXPECT_NEAR(c[10] / c[0], std::exp(-1.0), 0.1 * std::exp(-1.0));
}

TEST(QpNumber, TractabilityPrecondition) {
  EXPECT_THROW(simulate_qp_number({1e10, 1e-3, 1.0, std::nullopt}, 1, 1, 1), ValidationError);
  EXPECT_THROW(validate(QPBirthDeath{1.0, 0.0, 1.0, std::nullopt}), ValidationError);
}

TEST(QpPath, ZeroPath) {
  const std::vector<int64_t> zeros(10, 0);
  for (double v : gamma_qp_path(zeros, {1.0, 1.0, 1.0, 0}, qubit_b(), 0.05)) EXPECT_EQ(v, 0.0);
}

TEST(QpPath, MeanAndVarianceLaw) {
  const auto q = qubit_b();
  const double t = 0.08;
  const QPBirthDeath p{20.0 / 1e-3, 1e-3, 0.29, std::nullopt};
  const auto n = simulate_qp_number(p, 480.0 * (20000 - 1), 480.0, 13, QPMode::kExactSkeleton);
  const auto g = gamma_qp_path(n, p, q, t);
  const double scale = eta(t, q) / (p.volume * cooper_pair_density(q.delta));
  EXPECT_NEAR(mean_of(g), scale * p.mean(), 0.02 * scale * p.mean());
  EXPECT_NEAR(var_of(g), scale * scale * p.mean(), 0.10 * scale * scale * p.mean());
}

TEST(QpPath, SpectrumMatchesSigma2Qp) {
  // The two birth-death populations reproduce the Poisson variance law.
  const auto q = qubit_b();
  const auto m = qp_b();
  for (double t : {0.03, 0.12, 0.15}) {
    const auto s = qp_spectrum(m, q, t);
    EXPECT_NEAR(s.variance(), sigma2_qp(t, q, m.params), 1e-12 * sigma2_qp(t, q, m.params));
    EXPECT_NEAR(s.mean, mean_gamma1_qp(t, q, m.params), 1e-12 * s.mean);
  }
}

TEST(QpPath, AliasedWhiteLevel) {
  // tau_r << cadence: the sampled spectrum is flat at 2 dt variance.
  const auto q = qubit_b();
  const auto m = qp_b();
  const auto s = qp_spectrum(m, q, 0.1);
  const double dt = 480.0;
  for (double f : {1e-5, 1e-4, 1e-3}) {
    EXPECT_NEAR(s.sampled_psd(f, dt), 2 * dt * s.variance(), 0.2 * 2 * dt * s.variance());
  }
  // And the periodogram plateau of a QP-only series agrees.
  MeasurementConfig mc;
  mc.duration = 480.0 * 4096;
  ExperimentOptions o;
  o.tls_fluctuations = false;
  o.measurement_noise = false;
  std::vector<double> levels;
  for (int seed = 0; seed < 10; ++seed) {
    const auto ser = simulate_experiment(q, {{}, 6e3}, m, mc, 0.1, seed, o);
    const auto p = psd_from_autocorr(ser);
    levels.push_back(mean_of(p.psd));
  }
  EXPECT_NEAR(mean_of(levels), 2 * dt * s.variance(), 0.2 * 2 * dt * s.variance());
}

// ---------------------------------------------------------------------------
// Measurement layer
// ---------------------------------------------------------------------------

TEST(DecayFit, NoiselessExact) {
  MeasurementConfig m;
  m.readout_noise_std = 0.0;
  for (double g : {1e3, 2.2e4, 3e5}) {
    EXPECT_NEAR(synthesize_decay_and_fit(g, m, 1), g, 1e-9 * g);
  }
}

TEST(DecayFit, NoisyMedianWithinFivePercent) {
  MeasurementConfig m;  // 50 points to 3 / Gamma1, std 0.02
  const double g = 1e4;
  std::vector<double> est;
  for (int seed = 0; seed < 100; ++seed) est.push_back(synthesize_decay_and_fit(g, m, seed));
  EXPECT_NEAR(median(est), g, 0.05 * g);
}

TEST(DecayFit, ShortGridRejected) {
  MeasurementConfig m;
  m.decay_times = {0.0, 1e-6, 2e-6, 3e-6};
  EXPECT_THROW(synthesize_decay_and_fit(1e4, m, 1), ValidationError);  // 0.03 / Gamma1
  m.decay_times = {0.0, 5e-6, 1e-5, 1.5e-5};
  EXPECT_NO_THROW(synthesize_decay_and_fit(1e4, m, 1));  // 0.15 / Gamma1
}

TEST(DecayFit, FisherVarianceMatchesMonteCarlo) {
  MeasurementConfig m;
  m.readout_noise_std = 0.03;
  const double g = 5e3;
  std::vector<double> est;
  for (int seed = 0; seed < 2000; ++seed) est.push_back(synthesize_decay_and_fit(g, m, seed));
  const double predicted = decay_fit_variance(g, decay_grid(m, g), m);
  EXPECT_NEAR(var_of(est), predicted, 0.1 * predicted);
}

TEST(DecayFit, ShotNoiseIncreasesVariance) {
  MeasurementConfig m;
  const auto grid = decay_grid(m, 1e4);
  const double base = decay_fit_variance(1e4, grid, m);
  m.shot_count = 500;
  EXPECT_GT(decay_fit_variance(1e4, grid, m), base);
}

// ---------------------------------------------------------------------------
// End-to-end experiment
// ---------------------------------------------------------------------------

TEST(Experiment, DefaultCadenceGives540Points) {
  MeasurementConfig m;
  EXPECT_EQ(m.samples(), 540u);
  const auto s = simulate_experiment(qubit_b(), {{}, 6.2e3}, qp_b(), m, 0.05, 1);
  EXPECT_EQ(s.samples.size(), 540u);
  EXPECT_DOUBLE_EQ(s.dt, 480.0);
  ASSERT_TRUE(s.truth.has_value());
  for (double v : s.samples) EXPECT_GT(v, 0.0);
}

TEST(Experiment, StaticNoiselessIsConstantMean) {
  ExperimentOptions o;
  o.qp_fluctuations = false;
  o.measurement_noise = false;
  const auto q = qubit_b();
  const auto qp = qp_b();
  TLFEnsembleSpec spec;
  spec.tls_count = 4;
  spec.tlfs_per_tls = 1;
  const auto tls = calibrate_tls_model(make_tlf_ensemble(spec, 1), 0.07, 6.2e3, 1.0);
  o.tls_fluctuations = false;
  const auto s = simulate_experiment(q, tls, qp, MeasurementConfig{}, 0.07, 3, o);
  const double expect = mean_gamma1(0.07, q, 6.2e3, qp.params);
  for (double v : s.samples) EXPECT_NEAR(v, expect, 1e-9 * expect);
}

TEST(Experiment, Deterministic) {
  TLFEnsembleSpec spec;
  spec.tls_count = 6;
  spec.tlfs_per_tls = 1;
  const auto tls = calibrate_tls_model(make_tlf_ensemble(spec, 1), 0.05, 6.2e3, 1.0);
  const auto a = simulate_experiment(qubit_b(), tls, qp_b(), MeasurementConfig{}, 0.05, 77);
  const auto b = simulate_experiment(qubit_b(), tls, qp_b(), MeasurementConfig{}, 0.05, 77);
  const auto c = simulate_experiment(qubit_b(), tls, qp_b(), MeasurementConfig{}, 0.05, 78);
  EXPECT_EQ(a.samples, b.samples);
  EXPECT_NE(a.samples, c.samples);
  EXPECT_EQ(a.truth->a, b.truth->a);
}

TEST(Experiment, HighTemperatureIsWhite) {
  TLFEnsembleSpec spec;
  spec.tls_count = 24;
  spec.tlfs_per_tls = 1;
  spec.rate_min = std::pow(10.0, -5.4);
  spec.rate_max = std::pow(10.0, -1.4);
  const double t = 0.153;
  const auto tls = calibrate_tls_model(make_tlf_ensemble(spec, 2), t, 6.2e3, 1.0);
  const auto s = simulate_experiment(qubit_b(), tls, qp_b(), MeasurementConfig{}, t, 5);
  const auto r = analyze_series(s);
  EXPECT_LT(r.fit.a * std::log(r.band_max / r.band_min),
            0.1 * r.fit.b * (r.band_max - r.band_min));
}

TEST(Experiment, JitteredCadenceCarriesTimes) {
  MeasurementConfig m;
  m.cadence_jitter = 60.0;
  const auto s = simulate_experiment(qubit_b(), {{}, 6.2e3}, qp_b(), m, 0.05, 1);
  ASSERT_EQ(s.times.size(), s.samples.size());
  for (size_t i = 1; i < s.times.size(); ++i) EXPECT_GT(s.times[i], s.times[i - 1]);
  AnalysisOptions o;
  o.spectrum.estimator = Estimator::kLombScargle;
  EXPECT_NO_THROW(analyze_series(s, o));
}

TEST(Experiment, TlsAndQpStreamsIndependent) {
  const auto q = qubit_b();
  TLFEnsembleSpec spec;
  spec.tls_count = 12;
  spec.tlfs_per_tls = 1;
  spec.rate_min = 1e-4;
  spec.rate_max = 1e-2;
  const auto tls = calibrate_tls_model(make_tlf_ensemble(spec, 3), 0.05, 6.2e3, 1.0);
  const auto qp = qp_b();
  MeasurementConfig m;
  ExperimentOptions only_tls, only_qp;
  only_tls.qp_fluctuations = false;
  only_tls.measurement_noise = false;
  only_qp.tls_fluctuations = false;
  only_qp.measurement_noise = false;
  double sum_r = 0;
  const int seeds = 50;
  size_t n = 0;
  for (int seed = 0; seed < seeds; ++seed) {
    const auto a = simulate_experiment(q, tls, qp, m, 0.05, seed, only_tls).samples;
    const auto b = simulate_experiment(q, tls, qp, m, 0.05, seed, only_qp).samples;
    n = a.size();
    const double ma = mean_of(a), mb = mean_of(b);
    double sab = 0, saa = 0, sbb = 0;
    for (size_t i = 0; i < a.size(); ++i) {
      sab += (a[i] - ma) * (b[i] - mb);
      saa += (a[i] - ma) * (a[i] - ma);
      sbb += (b[i] - mb) * (b[i] - mb);
    }
    sum_r += sab / std::sqrt(saa * sbb);
  }
  // The TLS series is strongly autocorrelated; bound with the effective size
  // of a white partner, which is exact because the QP samples are i.i.d.
  const double mean_r = sum_r / seeds;
  EXPECT_LT(std::abs(mean_r), 3.0 / std::sqrt(static_cast<double>(seeds) * n));
}
