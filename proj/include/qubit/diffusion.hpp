#pragma once

// 1D quasiparticle diffusion toward the junction and the pad path average.
//
//   d rho/dt = D d2rho/dx2 - rho/tau + j,   zero flux at x = 0 and x = L
//
// Crank-Nicolson on a cell-centred grid. A unit mass is injected into the
// first two cells at t = 0; the junction density is the time integral of
// rho(L, t), normalised by the same integral for a uniformly spread,
// decaying population (1/L) exp(-t/tau). With this normalisation the
// infinite-horizon fraction is (L/l)/sinh(L/l), l = sqrt(D tau), and 1 for
// tau -> infinity.

#include <algorithm>
#include <atomic>
#include <cmath>
#include <limits>
#include <map>
#include <optional>
#include <string>
#include <thread>
#include <vector>

#include "qubit/errors.hpp"

namespace qubit {

struct PadGeometry {
  std::string name;
  double width = 0.0;   // um, along x
  double height = 0.0;  // um, along y (away from the gap)
  double gap = 0.0;     // um between the two pads
  // Junction sits in the gap; default is the gap centre (origin). The pad
  // occupies x in [-w/2, w/2], y in [gap/2, gap/2 + height].
  double junction_x = 0.0;
  double junction_y = 0.0;
  int points_x = 50;  // injection grid
  int points_y = 50;
};

inline void validate(const PadGeometry& g) {
  if (!(g.width > 0.0) || !(g.height > 0.0) || !(g.gap >= 0.0)) {
    throw ValidationError("PadGeometry " + g.name + ": dimensions must be positive");
  }
  if (g.points_x < 1 || g.points_y < 1) {
    throw ValidationError("PadGeometry " + g.name + ": empty injection grid");
  }
  if (std::abs(g.junction_x) > g.width / 2 || g.junction_y < 0.0 || g.junction_y > g.gap / 2) {
    throw ValidationError("PadGeometry " + g.name + ": junction must sit in the gap next to the pad");
  }
}

struct DiffusionField {
  std::vector<double> rho;  // per um, cell centres
  double dx = 0.0;          // um
  double t = 0.0;           // s
  double d = 0.0;           // um^2/s
  double tau = std::numeric_limits<double>::infinity();  // s
  long clipped = 0;         // negative undershoots set to zero

  double mass() const {
    double m = 0.0;
    for (double r : rho) m += r;
    return m * dx;
  }
  double length() const { return dx * static_cast<double>(rho.size()); }
};

namespace detail {

// Thomas algorithm; a: sub, b: diag, c: super. Overwrites rhs with the solution.
inline void solve_tridiagonal(const std::vector<double>& a, const std::vector<double>& b,
                              const std::vector<double>& c, std::vector<double>& rhs,
                              std::vector<double>& scratch) {
  const size_t n = b.size();
  scratch.resize(n);
  double beta = b[0];
  rhs[0] /= beta;
  for (size_t i = 1; i < n; ++i) {
    scratch[i] = c[i - 1] / beta;
    beta = b[i] - a[i] * scratch[i];
    rhs[i] = (rhs[i] - a[i] * rhs[i - 1]) / beta;
  }
  for (size_t i = n - 1; i-- > 0;) rhs[i] -= scratch[i + 1] * rhs[i + 1];
}

// Neumann Laplacian times u, cell-centred.
inline double laplacian_at(const std::vector<double>& u, size_t i) {
  const size_t n = u.size();
  if (n == 1) return 0.0;
  if (i == 0) return u[1] - u[0];
  if (i == n - 1) return u[n - 2] - u[n - 1];
  return u[i - 1] - 2.0 * u[i] + u[i + 1];
}

// Quadratic with zero slope through the last two centres, evaluated at x = L.
inline double right_boundary_value(const std::vector<double>& rho) {
  const size_t n = rho.size();
  if (n < 2) return rho.back();
  return (9.0 * rho[n - 1] - rho[n - 2]) / 8.0;
}

inline void clip_negative(DiffusionField& f) {
  for (double& r : f.rho) {
    if (r < 0.0) {
      r = 0.0;
      ++f.clipped;
    }
  }
}

}  // namespace detail

/// One Crank-Nicolson step; `source` (per um per s, held constant over the
/// step) may be empty.
inline DiffusionField step_diffusion(DiffusionField f, double dt,
                                     const std::vector<double>& source = {}) {
  if (!(dt > 0.0)) throw ValidationError("step_diffusion: dt must be positive");
  if (!(f.dx > 0.0) || !(f.d >= 0.0) || !(f.tau > 0.0) || f.rho.empty()) {
    throw ValidationError("step_diffusion: malformed field");
  }
  if (!source.empty() && source.size() != f.rho.size()) {
    throw ValidationError("step_diffusion: source size mismatch");
  }
  const size_t n = f.rho.size();
  const double r = f.d * dt / (f.dx * f.dx);
  const double k = std::isinf(f.tau) ? 0.0 : dt / f.tau;
  std::vector<double> a(n), b(n), c(n), rhs(n), scratch;
  for (size_t i = 0; i < n; ++i) {
    const double lo = i > 0 ? 1.0 : 0.0;
    const double hi = i + 1 < n ? 1.0 : 0.0;
    a[i] = -0.5 * r * lo;
    c[i] = -0.5 * r * hi;
    b[i] = 1.0 + 0.5 * r * (lo + hi) + 0.5 * k;
    rhs[i] = f.rho[i] * (1.0 - 0.5 * k) + 0.5 * r * detail::laplacian_at(f.rho, i);
    if (!source.empty()) rhs[i] += dt * source[i];
  }
  detail::solve_tridiagonal(a, b, c, rhs, scratch);
  f.rho = std::move(rhs);
  f.t += dt;
  detail::clip_negative(f);
  return f;
}

// ---------------------------------------------------------------------------
// Junction fraction
// ---------------------------------------------------------------------------

struct DiffusionOptions {
  int cells = 400;            // dx = L / cells
  int growth_every = 40;      // steps between time-step increases
  double growth_factor = 4.0;
  int steps_at_cap = 200;     // dt is capped at t_max / steps_at_cap
  double t_max_factor = 20.0; // default t_max = factor * max(L^2/D, tau)
  bool check_t_max = true;    // also run to 2 t_max and compare
  double t_max_tolerance = 5e-3;
  bool check_grid = false;    // also solve with 2x cells and compare
  double grid_tolerance = 1e-2;
  int threads = 1;            // path_average
};

struct JunctionFraction {
  double fraction = 0.0;
  double fraction_2t = 0.0;  // at 2 t_max (== fraction when unchecked)
  double t_max = 0.0;
  long steps = 0;
  long clipped = 0;
};

inline double default_t_max(double length, double d, double tau, const DiffusionOptions& opt = {}) {
  const double tdiff = length * length / d;
  return opt.t_max_factor * (std::isinf(tau) ? tdiff : std::max(tdiff, tau));
}

namespace detail {

// Integral of (1/L) exp(-t/tau) over [0, t].
inline double reference_integral(double length, double tau, double t) {
  if (std::isinf(tau)) return t / length;
  return tau / length * -std::expm1(-t / tau);
}

// Integral over one step of exp(-t/tau) u(t), u linear between u0 and u1,
// exact in the exponential.
inline double decayed_step_integral(double u0, double u1, double t0, double h, double tau) {
  if (std::isinf(tau)) return 0.5 * h * (u0 + u1);
  const double a = h / tau;
  const double e0 = std::exp(-t0 / tau);
  const double w1 = -std::expm1(-a);  // 1 - e^-a
  const double w2 = a < 1e-4 ? a / 2 - a * a / 3 + a * a * a / 8 : (w1 - a * std::exp(-a)) / a;
  return e0 * tau * (u0 * w1 + (u1 - u0) * w2);
}

// The decay is factored out exactly: rho = exp(-t/tau) u with u obeying pure
// diffusion, so the time step is set by diffusion alone.
inline JunctionFraction junction_solve(double length, double d, double tau, double t_max,
                                       int cells, const DiffusionOptions& opt) {
  DiffusionField f;
  f.rho.assign(static_cast<size_t>(cells), 0.0);
  f.dx = length / cells;
  f.d = d;
  // Unit mass over the first two cells.
  const int inj = std::min(2, cells);
  for (int i = 0; i < inj; ++i) f.rho[static_cast<size_t>(i)] = 1.0 / (inj * f.dx);

  const double horizon = opt.check_t_max ? 2.0 * t_max : t_max;
  const double cap = t_max / opt.steps_at_cap;
  double dt = std::min(f.dx * f.dx / (2.0 * d), cap);
  double integral = 0.0, at_t_max = 0.0;
  double prev = right_boundary_value(f.rho);
  long steps = 0;
  const double eps = 1e-12 * horizon;
  while (f.t < horizon - eps) {
    double h = std::min(dt, horizon - f.t);
    if (f.t < t_max - eps) h = std::min(h, t_max - f.t);
    const double t0 = f.t;
    f = step_diffusion(std::move(f), h);
    const double cur = right_boundary_value(f.rho);
    integral += decayed_step_integral(prev, cur, t0, h, tau);
    prev = cur;
    ++steps;
    if (std::abs(f.t - t_max) <= eps) at_t_max = integral;
    if (steps % opt.growth_every == 0) dt = std::min(dt * opt.growth_factor, cap);
  }
  JunctionFraction out;
  out.t_max = t_max;
  out.steps = steps;
  out.clipped = f.clipped;
  out.fraction = at_t_max / reference_integral(length, tau, t_max);
  out.fraction_2t = opt.check_t_max ? integral / reference_integral(length, tau, horizon)
                                    : out.fraction;
  return out;
}

}  // namespace detail

/// Junction fraction for one straight path of length L (um). t_max <= 0 picks
/// the default horizon.
inline JunctionFraction junction_fraction(double length, double d, double tau, double t_max = 0.0,
                                          const DiffusionOptions& opt = {}) {
  if (!(length > 0.0) || !(d > 0.0) || !(tau > 0.0)) {
    throw ValidationError("x0_at_junction: L, D and tau must be positive");
  }
  if (opt.cells < 4 || opt.growth_every < 1 || !(opt.growth_factor >= 1.0) || opt.steps_at_cap < 1) {
    throw ValidationError("x0_at_junction: bad numerical options");
  }
  if (t_max <= 0.0) t_max = default_t_max(length, d, tau, opt);
  const auto res = detail::junction_solve(length, d, tau, t_max, opt.cells, opt);
  if (opt.check_t_max &&
      std::abs(res.fraction_2t - res.fraction) > opt.t_max_tolerance * std::abs(res.fraction_2t)) {
    throw NumericalError("x0_at_junction: not converged in t_max at L = " + std::to_string(length) +
                         " um (" + std::to_string(res.fraction) + " vs " +
                         std::to_string(res.fraction_2t) + " at 2 t_max); increase t_max");
  }
  if (opt.check_grid) {
    DiffusionOptions o2 = opt;
    o2.check_t_max = false;
    const auto fine = detail::junction_solve(length, d, tau, t_max, 2 * opt.cells, o2);
    if (std::abs(fine.fraction - res.fraction) > opt.grid_tolerance * std::abs(fine.fraction)) {
      throw NumericalError("x0_at_junction: not converged in dx at L = " + std::to_string(length) +
                           " um; increase cells");
    }
  }
  return res;
}

inline double x0_at_junction(double length, double d, double tau, double t_max = 0.0,
                             const DiffusionOptions& opt = {}) {
  return junction_fraction(length, d, tau, t_max, opt).fraction;
}

// ---------------------------------------------------------------------------
// Pad average
// ---------------------------------------------------------------------------

struct FractionMap {
  std::string geometry;
  std::vector<double> xs, ys;          // injection coordinates, um
  std::vector<double> fraction;        // row-major [iy * nx + ix]
  std::vector<double> distance;        // same layout
  double mean = 0.0;

  double at(size_t ix, size_t iy) const { return fraction[iy * xs.size() + ix]; }
};

/// Uniform average of x0_at_junction over the injection grid (cell centres
/// of a points_x * points_y grid over the pad). Each point's path length is
/// its Euclidean distance to the junction. t_max <= 0 uses the per-path default.
inline FractionMap fraction_map(const PadGeometry& g, double d, double tau, double t_max = 0.0,
                                const DiffusionOptions& opt = {}) {
  validate(g);
  FractionMap m;
  m.geometry = g.name;
  const size_t nx = static_cast<size_t>(g.points_x), ny = static_cast<size_t>(g.points_y);
  for (size_t i = 0; i < nx; ++i) m.xs.push_back(-g.width / 2 + (i + 0.5) * g.width / nx);
  for (size_t j = 0; j < ny; ++j) m.ys.push_back(g.gap / 2 + (j + 0.5) * g.height / ny);
  m.distance.resize(nx * ny);
  m.fraction.resize(nx * ny);

  // Mirror-symmetric points share a path length; solve each distinct one once.
  std::map<double, double> unique;
  for (size_t j = 0; j < ny; ++j) {
    for (size_t i = 0; i < nx; ++i) {
      const double len = std::hypot(m.xs[i] - g.junction_x, m.ys[j] - g.junction_y);
      m.distance[j * nx + i] = len;
      unique.emplace(len, 0.0);
    }
  }
  std::vector<std::pair<double, double>> work(unique.begin(), unique.end());
  std::atomic<size_t> next{0};
  std::vector<std::string> errors(static_cast<size_t>(std::max(opt.threads, 1)));
  auto worker = [&](size_t id) {
    try {
      for (size_t k; (k = next++) < work.size();) {
        work[k].second = x0_at_junction(work[k].first, d, tau, t_max, opt);
      }
    } catch (const std::exception& e) {
      errors[id] = e.what();
      next = work.size();
    }
  };
  const size_t nthreads = std::min(static_cast<size_t>(std::max(opt.threads, 1)), work.size());
  if (nthreads <= 1) {
    worker(0);
  } else {
    std::vector<std::thread> pool;
    for (size_t t = 0; t < nthreads; ++t) pool.emplace_back(worker, t);
    for (auto& t : pool) t.join();
  }
  for (const auto& e : errors) {
    if (!e.empty()) throw NumericalError(e);
  }
  for (const auto& [len, frac] : work) unique[len] = frac;

  double sum = 0.0;
  for (size_t k = 0; k < m.fraction.size(); ++k) {
    m.fraction[k] = unique[m.distance[k]];
    sum += m.fraction[k];
  }
  m.mean = sum / static_cast<double>(m.fraction.size());
  return m;
}

inline double path_average(const PadGeometry& g, double d, double tau, double t_max = 0.0,
                           const DiffusionOptions& opt = {}) {
  return fraction_map(g, d, tau, t_max, opt).mean;
}

inline double geometry_ratio(const PadGeometry& a, const PadGeometry& b, double d, double tau,
                             double t_max = 0.0, const DiffusionOptions& opt = {}) {
  return path_average(a, d, tau, t_max, opt) / path_average(b, d, tau, t_max, opt);
}

/// Lifetime tau at fixed D for which geometry_ratio hits `target`; bisection
/// in log tau (the ratio falls monotonically toward 1 as tau grows).
inline double calibrate_lifetime(const PadGeometry& a, const PadGeometry& b, double d,
                                 double target, double tau_lo, double tau_hi,
                                 const DiffusionOptions& opt = {}, double rel_tol = 1e-3) {
  if (!(target > 1.0) || !(tau_lo > 0.0) || !(tau_hi > tau_lo)) {
    throw ValidationError("calibrate_lifetime: need target > 1 and 0 < tau_lo < tau_hi");
  }
  auto ratio = [&](double tau) { return geometry_ratio(a, b, d, tau, 0.0, opt); };
  double lo = std::log(tau_lo), hi = std::log(tau_hi);
  const double r_lo = ratio(tau_lo), r_hi = ratio(tau_hi);
  if (!(r_lo >= target && r_hi <= target)) {
    throw NumericalError("calibrate_lifetime: target ratio not bracketed (" + std::to_string(r_lo) +
                         ", " + std::to_string(r_hi) + ")");
  }
  while (hi - lo > rel_tol) {
    const double mid = 0.5 * (lo + hi);
    (ratio(std::exp(mid)) > target ? lo : hi) = mid;
  }
  return std::exp(0.5 * (lo + hi));
}

}  // namespace qubit
