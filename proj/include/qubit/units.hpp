#pragma once

// SI constants and boundary unit conversions. Everything inside the library
// works in SI (J, s, K, rad/s); the helpers here are the only place where
// GHz, mK, us^-1 and um^3 are turned into SI or back.

#include <numbers>

namespace qubit::units {

inline constexpr double kPlanck = 6.62607015e-34;  // J s (exact)
inline constexpr double kHbar = kPlanck / (2.0 * std::numbers::pi);
inline constexpr double kBoltzmann = 1.380649e-23;   // J/K (exact)
inline constexpr double kElectronVolt = 1.602176634e-19;  // J (exact)

/// Density of states used for n_CP = 2 nu0 Delta: 1 / (eV A^3).
/// 1 A^-3 = 1e12 um^-3.
inline constexpr double kNu0PerJouleUm3 = 1e12 / kElectronVolt;

// Energy quoted as a frequency (E/h or Delta/2pi in GHz) -> Joules.
constexpr double ghz_to_joule(double f_ghz) { return kPlanck * f_ghz * 1e9; }
constexpr double joule_to_ghz(double e) { return e / kPlanck * 1e-9; }

// Angular frequency from omega/2pi in GHz or MHz.
constexpr double ghz_to_rad_s(double f_ghz) {
  return 2.0 * std::numbers::pi * f_ghz * 1e9;
}
constexpr double mhz_to_rad_s(double f_mhz) {
  return 2.0 * std::numbers::pi * f_mhz * 1e6;
}

constexpr double mk_to_k(double t_mk) { return t_mk * 1e-3; }
constexpr double k_to_mk(double t_k) { return t_k * 1e3; }

// Rates: internal s^-1, boundary us^-1.
constexpr double per_us_to_per_s(double r) { return r * 1e6; }
constexpr double per_s_to_per_us(double r) { return r * 1e-6; }

// Rate^2 quantities (variances, and PSD levels per Hz).
constexpr double per_us2_to_per_s2(double v) { return v * 1e12; }
constexpr double per_s2_to_per_us2(double v) { return v * 1e-12; }

}  // namespace qubit::units
