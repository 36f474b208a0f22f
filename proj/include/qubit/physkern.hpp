#pragma once

// Closed-form physics of transmon depolarization: the modified Bessel
// function K0, quasiparticle (QP) densities and the QP relaxation rate, the
// QP and TLS contributions to the variance of Gamma_1, and the spectral
// density of a single two-level system (TLS).
//
// All functions are pure. Inputs and outputs are SI (J, s, K, rad/s) except
// effective volumes (um^3) and the Cooper-pair density (um^-3).

#include <cmath>
#include <limits>
#include <numbers>
#include <string>
#include <vector>

#include "qubit/errors.hpp"
#include "qubit/units.hpp"

namespace qubit {

// ---------------------------------------------------------------------------
// Domain types
// ---------------------------------------------------------------------------

struct QubitParams {
  double ej = 0.0;               // Josephson energy, J
  double ec = 0.0;               // charging energy, J
  double omega_q = 0.0;          // transition frequency, rad/s
  double delta = 0.0;            // superconducting gap, J
  double junction_volume = 0.0;  // um^3
  std::string pad_geometry;      // name of a PadGeometry in the run config

  static QubitParams from_ghz(double ej_ghz, double ec_ghz, double fq_ghz,
                              double delta_ghz, double junction_volume_um3,
                              std::string pad_geometry = {}) {
    QubitParams q;
    q.ej = units::ghz_to_joule(ej_ghz);
    q.ec = units::ghz_to_joule(ec_ghz);
    q.omega_q = units::ghz_to_rad_s(fq_ghz);
    q.delta = units::ghz_to_joule(delta_ghz);
    q.junction_volume = junction_volume_um3;
    q.pad_geometry = std::move(pad_geometry);
    return q;
  }
};

inline void validate(const QubitParams& q) {
  if (!(q.ej > 0.0) || !(q.ec > 0.0)) {
    throw ValidationError("QubitParams: E_J and E_C must be positive");
  }
  if (!(q.ej / q.ec > 1.0)) {
    throw ValidationError("QubitParams: E_J/E_C must exceed 1 (transmon regime)");
  }
  if (!(q.omega_q > 0.0)) {
    throw ValidationError("QubitParams: omega_q must be positive");
  }
  if (!(q.delta > units::kHbar * q.omega_q / 2.0)) {
    throw ValidationError("QubitParams: gap must exceed hbar*omega_q/2");
  }
}

/// n_CP = 2 nu0 Delta with nu0 = 1 (eV A^3)^-1, in um^-3.
inline double cooper_pair_density(double delta) {
  return 2.0 * units::kNu0PerJouleUm3 * delta;
}

struct QPModelParams {
  double x_qp0 = 0.0;     // non-equilibrium normalized QP density
  double delta = 0.0;     // gap, J
  double v_eff0 = 1.0;    // um^3
  double v_eff_th = 1.0;  // um^3

  double n_cp() const { return cooper_pair_density(delta); }
};

inline void validate(const QPModelParams& p) {
  if (!(p.x_qp0 >= 0.0)) throw ValidationError("QPModelParams: x_qp0 < 0");
  if (!(p.delta > 0.0)) throw ValidationError("QPModelParams: delta <= 0");
  if (!(p.v_eff0 > 0.0) || !(p.v_eff_th > 0.0)) {
    throw ValidationError("QPModelParams: effective volumes must be positive");
  }
}

/// TLS dephasing linewidth gamma2(T): constant, or linear in T.
struct Linewidth {
  double coefficient = 0.0;  // rad/s, or rad/s per K when linear
  bool linear_in_t = false;

  static Linewidth constant(double gamma2) { return {gamma2, false}; }
  static Linewidth linear(double per_kelvin) { return {per_kelvin, true}; }

  double at(double t) const { return linear_in_t ? coefficient * t : coefficient; }
};

/// Low-frequency two-level fluctuator coupled to a TLS.
struct TLFCoupling {
  double g = 0.0;            // TLS frequency shift when the TLF is up, rad/s
  double omega_t = 0.0;      // TLF splitting, rad/s
  double switch_rate = 0.0;  // total switching rate (up + down), 1/s
};

struct TLSEntry {
  double amplitude = 0.0;  // A: opaque coupling constant
  Linewidth gamma2;
  double omega_delta = 0.0;  // qubit-TLS detuning, rad/s
  std::vector<TLFCoupling> tlfs;
};

struct TLSEnsemble {
  std::vector<TLSEntry> tls;
};

inline void validate(const TLSEnsemble& ens) {
  for (const auto& e : ens.tls) {
    if (!(e.gamma2.coefficient > 0.0)) {
      throw ValidationError("TLSEnsemble: gamma2 must be positive");
    }
    for (const auto& f : e.tlfs) {
      if (!(f.g >= 0.0) || !(f.omega_t > 0.0) || !(f.switch_rate > 0.0)) {
        throw ValidationError(
            "TLSEnsemble: TLF needs g >= 0, omega_t > 0, switch_rate > 0");
      }
    }
  }
}

// ---------------------------------------------------------------------------
// Modified Bessel function K0
// ---------------------------------------------------------------------------

namespace detail {

inline constexpr double kEulerGamma = 0.57721566490153286061;

// exp(x) K0(x) for 0 < x < 2 from the ascending series
//   K0 = -(ln(x/2) + gamma) I0(x) + sum_k H_k (x^2/4)^k / (k!)^2.
inline double k0_scaled_series(double x) {
  const double y = 0.25 * x * x;
  double term = 1.0;  // (x^2/4)^k / (k!)^2
  double i0 = 1.0;
  double tail = 0.0;
  double harmonic = 0.0;
  for (int k = 1; k < 60; ++k) {
    term *= y / (static_cast<double>(k) * k);
    harmonic += 1.0 / k;
    i0 += term;
    tail += harmonic * term;
    if (term < 1e-18 * i0) break;
  }
  const double k0 = -(std::log(0.5 * x) + kEulerGamma) * i0 + tail;
  return std::exp(x) * k0;
}

// exp(x) K0(x) for x >= 2 from Steed's continued fraction (Temme's CF2).
inline double k0_scaled_cf(double x) {
  double b = 2.0 * (1.0 + x);
  double d = 1.0 / b;
  double delh = d;
  double q1 = 0.0;
  double q2 = 1.0;
  const double a1 = 0.25;
  double q = a1;
  double c = a1;
  double a = -a1;
  double s = 1.0 + q * delh;
  for (int i = 2; i < 10000; ++i) {
    a -= 2.0 * (i - 1);
    c = -a * c / i;
    const double qnew = (q1 - b * q2) / a;
    q1 = q2;
    q2 = qnew;
    q += c * qnew;
    b += 2.0;
    d = 1.0 / (b + a * d);
    delh = (b * d - 1.0) * delh;
    const double dels = q * delh;
    s += dels;
    if (std::abs(dels / s) < 1e-17) break;
  }
  return std::sqrt(std::numbers::pi / (2.0 * x)) / s;
}

}  // namespace detail

/// exp(x) * K0(x). Finite for every x > 0; this is the form used by eta(T)
/// so that small temperatures do not overflow exp(hbar*omega/2kT).
inline double bessel_k0_scaled(double x) {
  if (!(x > 0.0)) throw DomainError("bessel_k0: argument must be positive");
  if (std::isinf(x)) return 0.0;
  return x < 2.0 ? detail::k0_scaled_series(x) : detail::k0_scaled_cf(x);
}

struct K0Value {
  double value = 0.0;
  bool underflow = false;  // true when K0(x) is below the smallest normal double
};

inline K0Value bessel_k0_checked(double x) {
  const double scaled = bessel_k0_scaled(x);
  const double log_value = std::log(scaled) - x;
  if (log_value < std::log(std::numeric_limits<double>::min())) {
    return {0.0, true};
  }
  return {scaled * std::exp(-x), false};
}

/// Modified Bessel function of the second kind, order zero.
inline double bessel_k0(double x) { return bessel_k0_checked(x).value; }

// ---------------------------------------------------------------------------
// Quasiparticle densities and rates
// ---------------------------------------------------------------------------

/// Thermal QP density sqrt(2 pi kT / Delta) exp(-Delta / kT); 0 at t = 0.
inline double x_qp_thermal(double t, double delta) {
  if (!(t >= 0.0)) throw DomainError("x_qp_thermal: temperature must be >= 0");
  if (!(delta > 0.0)) throw DomainError("x_qp_thermal: gap must be positive");
  if (t == 0.0) return 0.0;
  const double kt = units::kBoltzmann * t;
  return std::sqrt(2.0 * std::numbers::pi * kt / delta) * std::exp(-delta / kt);
}

inline double x_qp_total(double t, const QPModelParams& p) {
  return p.x_qp0 + x_qp_thermal(t, p.delta);
}

/// Conversion factor from x_QP to Gamma_QP (s^-1):
///   eta = (16 E_J / hbar pi) sqrt(E_C / 8 E_J) sqrt(2 Delta / pi kT)
///         * exp(z) K0(z),  z = hbar omega_q / 2kT.
inline double eta(double t, const QubitParams& q) {
  if (!(t > 0.0)) throw DomainError("eta: temperature must be positive");
  const double kt = units::kBoltzmann * t;
  const double z = units::kHbar * q.omega_q / (2.0 * kt);
  const double prefactor = 16.0 * q.ej / (units::kHbar * std::numbers::pi) *
                           std::sqrt(q.ec / (8.0 * q.ej));
  return prefactor * std::sqrt(2.0 * q.delta / (std::numbers::pi * kt)) *
         bessel_k0_scaled(z);
}

/// The T -> 0+ limit of eta, using exp(z) K0(z) ~ sqrt(pi / 2z).
inline double eta_zero_temperature(const QubitParams& q) {
  const double prefactor = 16.0 * q.ej / (units::kHbar * std::numbers::pi) *
                           std::sqrt(q.ec / (8.0 * q.ej));
  return prefactor * std::sqrt(2.0 * q.delta / (units::kHbar * q.omega_q));
}

inline double gamma_qp(const QubitParams& q, double t, double x_qp) {
  if (!(x_qp >= 0.0)) throw DomainError("gamma_qp: x_qp must be >= 0");
  return eta(t, q) * x_qp;
}

namespace detail {
inline QubitParams with_gap(QubitParams q, double delta) {
  q.delta = delta;
  return q;
}
}  // namespace detail

/// Mean depolarization rate Gamma_TLS + Gamma_QP(T). The gap in `p` is used
/// for both the thermal density and eta, so a single fitted Delta drives the
/// whole model.
inline double mean_gamma1(double t, const QubitParams& q, double gamma_tls,
                          const QPModelParams& p) {
  if (!(gamma_tls >= 0.0)) throw DomainError("mean_gamma1: gamma_tls < 0");
  if (t == 0.0) return gamma_tls + eta_zero_temperature(detail::with_gap(q, p.delta)) * p.x_qp0;
  return gamma_tls + gamma_qp(detail::with_gap(q, p.delta), t, x_qp_total(t, p));
}

/// QP part of mean_gamma1 (used for plotting model components).
inline double mean_gamma1_qp(double t, const QubitParams& q,
                             const QPModelParams& p) {
  return mean_gamma1(t, q, 0.0, p);
}

/// Poisson number-fluctuation variance of Gamma_QP (s^-2):
///   eta^2 (x0 / (n_CP V0) + x_th / (n_CP V_th)).
inline double sigma2_qp(double t, const QubitParams& q, const QPModelParams& p) {
  const double e = eta(t, detail::with_gap(q, p.delta));
  const double ncp = p.n_cp();
  return e * e *
         (p.x_qp0 / (ncp * p.v_eff0) +
          x_qp_thermal(t, p.delta) / (ncp * p.v_eff_th));
}

// ---------------------------------------------------------------------------
// Two-level systems
// ---------------------------------------------------------------------------

/// Thermal weight 1 - tanh^2(hbar omega / 2kT) = 4 p (1 - p) of a fluctuator.
inline double tlf_activity(double omega_t, double t) {
  if (t <= 0.0) return 0.0;
  const double th = std::tanh(units::kHbar * omega_t / (2.0 * units::kBoltzmann * t));
  return 1.0 - th * th;
}

/// Variance contribution of one TLS driven by its fluctuators, s^-2:
///   A^4 16 g2^2 wd^2 / (g2^2 + wd^2)^4 [sum_i g_i^2 (1 - tanh^2)]^2.
/// A^4 times the dimensionless remainder is read as us^-2.
inline double sigma2_tls_single(double t, const TLSEntry& tls) {
  const double g2 = tls.gamma2.at(t);
  const double wd = tls.omega_delta;
  const double denom = g2 * g2 + wd * wd;
  const double lorentz = 16.0 * g2 * g2 * wd * wd / (denom * denom * denom * denom);
  double activity = 0.0;
  for (const auto& f : tls.tlfs) activity += f.g * f.g * tlf_activity(f.omega_t, t);
  const double a2 = tls.amplitude * tls.amplitude;
  return units::per_us2_to_per_s2(a2 * a2 * lorentz * activity * activity);
}

/// Distinct TLSs contribute independently, so their variances add.
inline double sigma2_tls(double t, const TLSEnsemble& ens) {
  if (!(t > 0.0)) throw DomainError("sigma2_tls: temperature must be positive");
  double total = 0.0;
  for (const auto& tls : ens.tls) total += sigma2_tls_single(t, tls);
  return total;
}

/// Single-TLS noise spectral density for a given equilibrium polarization
/// <sigma_z> (hbar = 1 frequency units).
inline double tls_single_psd_polarized(double omega, double omega0, double gamma2,
                                       double sigma_z) {
  const double lp = 2.0 * gamma2 / ((omega - omega0) * (omega - omega0) + gamma2 * gamma2);
  const double lm = 2.0 * gamma2 / ((omega + omega0) * (omega + omega0) + gamma2 * gamma2);
  return 0.5 * (1.0 + sigma_z) * lp + 0.5 * (1.0 - sigma_z) * lm;
}

inline double tls_polarization(double omega0, double t) {
  if (t <= 0.0) return 1.0;
  return std::tanh(units::kHbar * omega0 / (2.0 * units::kBoltzmann * t));
}

inline double tls_single_psd(double omega, double omega0, double gamma2, double t) {
  if (!(gamma2 > 0.0) || !(omega0 > 0.0)) {
    throw DomainError("tls_single_psd: gamma2 and omega0 must be positive");
  }
  if (!(t > 0.0)) throw DomainError("tls_single_psd: temperature must be positive");
  return tls_single_psd_polarized(omega, omega0, gamma2, tls_polarization(omega0, t));
}

}  // namespace qubit
