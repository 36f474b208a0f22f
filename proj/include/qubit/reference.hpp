#pragma once

// Reference device parameters: the three measured qubits and the two-TLS
// ensemble used for the local-minimum feature.

#include <string>
#include <vector>

#include "qubit/physkern.hpp"
#include "qubit/units.hpp"

namespace qubit::reference {

struct QubitRow {
  std::string id;
  double x_qp0;
  double delta_ghz;
  double v_eff0;      // um^3
  double v_eff_th;    // um^3
  double gamma_tls_per_us;
};

inline const std::vector<QubitRow>& table_one() {
  static const std::vector<QubitRow> rows = {
      {"A", 1.4e-7, 38.0, 0.062, 0.025, 1.2e-2},
      {"B", 5.5e-8, 38.2, 0.290, 0.039, 6.2e-3},
      {"C", 5.5e-8, 39.6, 0.807, 0.037, 1.6e-3},
  };
  return rows;
}

inline const QubitRow& row(const std::string& id) {
  for (const auto& r : table_one()) {
    if (r.id == id) return r;
  }
  throw ValidationError("no reference qubit " + id);
}

// Circuit parameters are not tabulated; typical transmon values.
inline constexpr double kEjGhz = 12.0;
inline constexpr double kEcGhz = 0.2;
inline constexpr double kFqGhz = 4.0;
inline constexpr double kJunctionVolume = 0.013;  // um^3

inline QubitParams qubit(const QubitRow& r) {
  return QubitParams::from_ghz(kEjGhz, kEcGhz, kFqGhz, r.delta_ghz, kJunctionVolume, r.id);
}

inline QPModelParams qp(const QubitRow& r) {
  return {r.x_qp0, units::ghz_to_joule(r.delta_ghz), r.v_eff0, r.v_eff_th};
}

inline double gamma_tls(const QubitRow& r) { return units::per_us_to_per_s(r.gamma_tls_per_us); }

/// 7..153 mK sweep, 12 points.
inline std::vector<double> temperatures_k() {
  std::vector<double> t;
  for (double mk : {7.0, 20.0, 34.0, 47.0, 60.0, 73.0, 87.0, 100.0, 113.0, 127.0, 140.0, 153.0}) {
    t.push_back(units::mk_to_k(mk));
  }
  return t;
}

/// Two TLSs, each dressed by three TLFs (g/2pi = 10 MHz, omega_t/2pi = 100..300 MHz).
inline TLSEnsemble two_tls() {
  auto tlfs = [] {
    std::vector<TLFCoupling> v;
    for (double wt : {100.0, 200.0, 300.0}) {
      v.push_back({units::mhz_to_rad_s(10.0), units::mhz_to_rad_s(wt), 1.0});
    }
    return v;
  };
  TLSEnsemble e;
  e.tls.push_back({2.1, Linewidth::linear(1e6 / 0.040), units::mhz_to_rad_s(2.0), tlfs()});
  e.tls.push_back({1.0, Linewidth::linear(8e6 / 0.040), units::mhz_to_rad_s(1.0), tlfs()});
  return e;
}

}  // namespace qubit::reference
