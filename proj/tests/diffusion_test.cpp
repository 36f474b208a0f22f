#include <gtest/gtest.h>

#include <algorithm>
#include <cmath>
#include <numbers>
#include <random>
#include <vector>

#include "qubit/diffusion.hpp"

using namespace qubit;

namespace {

constexpr double kInf = std::numeric_limits<double>::infinity();

// Free-space Gaussian reflected at x = 0 and x = len: exact zero-flux solution.
double image_gaussian(double x, double x0, double var, double len) {
  double s = 0.0;
  for (int k = -20; k <= 20; ++k) {
    for (double c : {x0 + 2.0 * k * len, -x0 + 2.0 * k * len}) {
      s += std::exp(-(x - c) * (x - c) / (2.0 * var));
    }
  }
  return s / std::sqrt(2.0 * std::numbers::pi * var);
}

DiffusionField gaussian_field(int n, double len, double x0, double var, double d, double tau = kInf) {
  DiffusionField f;
  f.dx = len / n;
  f.d = d;
  f.tau = tau;
  for (int i = 0; i < n; ++i) f.rho.push_back(image_gaussian((i + 0.5) * f.dx, x0, var, len));
  return f;
}

double heat_kernel_error(int n, double dt_over_dx, double var0 = 4e-4) {
  const double len = 1.0, d = 1.0, x0 = 0.5, t_end = len * len / (100.0 * d);
  auto f = gaussian_field(n, len, x0, var0, d);
  const int steps = static_cast<int>(std::lround(t_end / (dt_over_dx * f.dx)));
  const double dt = t_end / steps;
  for (int s = 0; s < steps; ++s) f = step_diffusion(std::move(f), dt);
  double err = 0.0, peak = 0.0;
  for (int i = 0; i < n; ++i) {
    const double exact = image_gaussian((i + 0.5) * f.dx, x0, var0 + 2.0 * d * t_end, len);
    err = std::max(err, std::abs(f.rho[static_cast<size_t>(i)] - exact));
    peak = std::max(peak, exact);
  }
  return err / peak;
}

double sinh_oracle(double len, double ell) { return (len / ell) / std::sinh(len / ell); }

DiffusionOptions coarse() {
  DiffusionOptions o;
  o.cells = 100;
  return o;
}

}  // namespace

TEST(StepDiffusion, UniformFieldUnchanged) {
  DiffusionField f;
  f.rho.assign(64, 3.0);
  f.dx = 0.5;
  f.d = 10.0;
  for (int s = 0; s < 100; ++s) f = step_diffusion(std::move(f), 0.37);
  for (double r : f.rho) EXPECT_NEAR(r, 3.0, 1e-13);
}

TEST(StepDiffusion, MassConservedOverManySteps) {
  auto f = gaussian_field(200, 1.0, 0.3, 1e-3, 1.0);
  const double m0 = f.mass();
  const double dt = f.dx * f.dx;
  for (int s = 0; s < 10000; ++s) f = step_diffusion(std::move(f), dt);
  EXPECT_LT(std::abs(f.mass() - m0) / m0, 1e-10);
  EXPECT_EQ(f.clipped, 0);
}

TEST(StepDiffusion, MassBalanceWithDecayAndSource) {
  auto f = gaussian_field(150, 2.0, 0.7, 1e-2, 0.5, 0.8);
  std::vector<double> j(150);
  for (size_t i = 0; i < j.size(); ++i) j[i] = 1.0 + std::sin(0.1 * static_cast<double>(i));
  double jmass = 0.0;
  for (double v : j) jmass += v * f.dx;
  for (double dt : {1e-4, 1e-3, 1e-2, 0.1}) {
    for (int s = 0; s < 50; ++s) {
      const double m0 = f.mass();
      f = step_diffusion(std::move(f), dt, j);
      const double m1 = f.mass();
      // CN on the decay term: dM = dt (-(M0 + M1) / 2 tau + J)
      const double predicted = dt * (-(m0 + m1) / (2.0 * f.tau) + jmass);
      EXPECT_LT(std::abs((m1 - m0) - predicted), 1e-8 * m1);
    }
  }
}

TEST(StepDiffusion, HeatKernel) {
  EXPECT_LT(heat_kernel_error(400, 0.1), 1e-4);
}

TEST(StepDiffusion, SecondOrderConvergence) {
  std::vector<double> errs;
  // dt ~ dx, so time and space errors fall together.
  for (int n : {50, 100, 200, 400}) errs.push_back(heat_kernel_error(n, 0.05, 2.5e-3));
  for (size_t k = 1; k < errs.size(); ++k) {
    const double order = std::log2(errs[k - 1] / errs[k]);
    EXPECT_GE(order, 1.8) << "refinement " << k << ": " << errs[k - 1] << " -> " << errs[k];
  }
}

TEST(StepDiffusion, Linearity) {
  const int n = 120;
  DiffusionField zero;
  zero.rho.assign(n, 0.0);
  zero.dx = 0.1;
  zero.d = 2.0;
  zero.tau = 5.0;
  std::vector<double> j1(n), j2(n), j12(n);
  for (int i = 0; i < n; ++i) {
    j1[i] = std::exp(-0.05 * i);
    j2[i] = i > 60 ? 2.0 : 0.5;
    j12[i] = j1[i] + j2[i];
  }
  auto a = zero, b = zero, c = zero;
  for (int s = 0; s < 200; ++s) {
    a = step_diffusion(std::move(a), 0.01, j1);
    b = step_diffusion(std::move(b), 0.01, j2);
    c = step_diffusion(std::move(c), 0.01, j12);
  }
  for (int i = 0; i < n; ++i) {
    EXPECT_LT(std::abs(c.rho[i] - (a.rho[i] + b.rho[i])), 1e-10 * c.rho[i]);
  }
}

TEST(StepDiffusion, UndershootsClippedAndCounted) {
  DiffusionField f;
  f.rho.assign(100, 0.0);
  f.rho[0] = f.rho[1] = 1.0;
  f.dx = 1.0;
  f.d = 1.0;
  f = step_diffusion(std::move(f), 200.0);  // far beyond the smoothing regime
  EXPECT_GT(f.clipped, 0);
  for (double r : f.rho) EXPECT_GE(r, 0.0);
}

TEST(StepDiffusion, RejectsBadInput) {
  DiffusionField f;
  f.rho.assign(10, 1.0);
  f.dx = 1.0;
  f.d = 1.0;
  EXPECT_THROW(step_diffusion(f, 0.0), ValidationError);
  EXPECT_THROW(step_diffusion(f, 1.0, std::vector<double>(3, 0.0)), ValidationError);
}

TEST(JunctionFraction, MatchesSinhOracle) {
  const double d = 2.5e8;
  for (double ell : {54.0, 150.0}) {
    const double tau = ell * ell / d;
    for (double len : {10.0, 50.0, 100.0, 300.0}) {
      const auto r = junction_fraction(len, d, tau);
      EXPECT_LT(std::abs(r.fraction / sinh_oracle(len, ell) - 1.0), 1e-3) << ell << " " << len;
      EXPECT_EQ(r.clipped, 0);
    }
  }
}

TEST(JunctionFraction, RatioAgainstRefinedGrid) {
  // l = sqrt(D tau) = 150 um
  const double d = 1e8, tau = 150.0 * 150.0 / d;
  const double r = x0_at_junction(100.0, d, tau) / x0_at_junction(300.0, d, tau);
  DiffusionOptions fine;
  fine.cells = 1600;
  const double r_fine = x0_at_junction(100.0, d, tau, 0.0, fine) / x0_at_junction(300.0, d, tau, 0.0, fine);
  EXPECT_LT(std::abs(r / r_fine - 1.0), 1e-3);
  EXPECT_LT(std::abs(r_fine / (sinh_oracle(100, 150) / sinh_oracle(300, 150)) - 1.0), 1e-4);
}

TEST(JunctionFraction, NoDecayTendsToOne) {
  const double d = 1e8;
  for (double len : {20.0, 200.0, 600.0}) {
    const double tmax = 2000.0 * len * len / d;
    DiffusionOptions o = coarse();
    o.steps_at_cap = 2000;
    EXPECT_NEAR(x0_at_junction(len, d, kInf, tmax, o), 1.0, 1e-3) << len;
  }
}

TEST(JunctionFraction, DecreasingInLength) {
  const double d = 2.5e8, tau = 1e-5;
  double prev = 2.0;
  for (double len = 10.0; len <= 810.0; len += 50.0) {
    const double f = x0_at_junction(len, d, tau, 0.0, coarse());
    EXPECT_LT(f, prev) << len;
    EXPECT_GT(f, 0.0);
    prev = f;
  }
}

TEST(JunctionFraction, ShortHorizonIsNotConverged) {
  const double d = 1e8, len = 200.0;
  EXPECT_THROW(x0_at_junction(len, d, 1.0, 0.05 * len * len / d, coarse()), NumericalError);
  EXPECT_NO_THROW(x0_at_junction(len, d, 1e-4, 0.0, coarse()));
  DiffusionOptions grid = coarse();
  grid.check_grid = true;
  grid.cells = 8;
  grid.grid_tolerance = 1e-6;
  EXPECT_THROW(x0_at_junction(len, d, 1e-4, 0.0, grid), NumericalError);
  EXPECT_THROW(x0_at_junction(-1.0, d, 1e-4), ValidationError);
}

TEST(PathAverage, SinglePointEqualsJunctionFraction) {
  PadGeometry g{"one", 30.0, 40.0, 20.0};
  g.points_x = g.points_y = 1;
  const double d = 2.5e8, tau = 1e-5;
  const double len = std::hypot(0.0, 10.0 + 20.0);
  EXPECT_DOUBLE_EQ(path_average(g, d, tau, 0.0, coarse()), x0_at_junction(len, d, tau, 0.0, coarse()));
}

TEST(PathAverage, InjectionGridConverged) {
  PadGeometry a{"A", 120.0, 510.0, 20.0};
  const double d = 2.5e8, tau = 1.2e-5;
  const double p50 = path_average(a, d, tau, 0.0, coarse());
  a.points_x = a.points_y = 100;
  const double p100 = path_average(a, d, tau, 0.0, coarse());
  EXPECT_LT(std::abs(p50 / p100 - 1.0), 0.01);
}

TEST(PathAverage, SmallPadCollectsMore) {
  PadGeometry a{"A", 120.0, 510.0, 20.0, 0.0, 0.0, 20, 20};
  PadGeometry b{"B", 150.0, 720.0, 150.0, 0.0, 0.0, 20, 20};
  for (double d : {1e8, 5e8}) {
    for (double tau : {1e-6, 1e-5, 1e-4}) {
      EXPECT_GT(path_average(a, d, tau, 0.0, coarse()), path_average(b, d, tau, 0.0, coarse()))
          << d << " " << tau;
    }
  }
}

TEST(PathAverage, FractionMapLayout) {
  PadGeometry a{"A", 120.0, 510.0, 20.0, 0.0, 0.0, 6, 5};
  const auto m = fraction_map(a, 2.5e8, 1e-5, 0.0, coarse());
  ASSERT_EQ(m.xs.size(), 6u);
  ASSERT_EQ(m.ys.size(), 5u);
  ASSERT_EQ(m.fraction.size(), 30u);
  EXPECT_DOUBLE_EQ(m.at(0, 0), m.at(5, 0));  // mirror symmetry
  EXPECT_GT(m.at(2, 0), m.at(2, 4));         // nearer rows collect more
  EXPECT_NEAR(m.distance[0], std::hypot(m.xs[0], m.ys[0]), 1e-12);
}

TEST(PathAverage, ThreadsDoNotChangeResult) {
  PadGeometry b{"B", 150.0, 720.0, 150.0, 0.0, 0.0, 16, 16};
  auto o = coarse();
  const double serial = path_average(b, 2.5e8, 1e-5, 0.0, o);
  o.threads = 4;
  EXPECT_EQ(path_average(b, 2.5e8, 1e-5, 0.0, o), serial);
}

TEST(GeometryRatio, IdenticalGeometriesGiveOne) {
  PadGeometry a{"A", 120.0, 510.0, 20.0, 0.0, 0.0, 10, 10};
  EXPECT_DOUBLE_EQ(geometry_ratio(a, a, 2.5e8, 1e-5, 0.0, coarse()), 1.0);
}

TEST(GeometryRatio, DiffusionSimilarity) {
  PadGeometry a{"A", 120.0, 510.0, 20.0, 0.0, 0.0, 12, 12};
  PadGeometry b{"B", 150.0, 720.0, 150.0, 0.0, 0.0, 12, 12};
  const double d = 2.5e8, tau = 1.1e-5, c = 2.5;
  const double r1 = geometry_ratio(a, b, d, tau, 0.0, coarse());
  for (auto* g : {&a, &b}) {
    g->width *= c;
    g->height *= c;
    g->gap *= c;
  }
  const double r2 = geometry_ratio(a, b, c * c * d, tau, 0.0, coarse());
  EXPECT_LT(std::abs(r2 / r1 - 1.0), 1e-9);
}

TEST(GeometryRatio, CalibrationHitsTarget) {
  PadGeometry a{"A", 120.0, 510.0, 20.0, 0.0, 0.0, 10, 10};
  PadGeometry b{"B", 150.0, 720.0, 150.0, 0.0, 0.0, 10, 10};
  const double d = 2.5e8;
  const double tau = calibrate_lifetime(a, b, d, 2.73, 1e-6, 1e-4, coarse(), 1e-4);
  EXPECT_NEAR(geometry_ratio(a, b, d, tau, 0.0, coarse()), 2.73, 2e-3);
  EXPECT_THROW(calibrate_lifetime(a, b, d, 2.73, 1e-2, 1e-1, coarse()), NumericalError);
}

TEST(GeometryRatio, RejectsBadGeometry) {
  PadGeometry g{"bad", 120.0, -1.0, 20.0};
  EXPECT_THROW(path_average(g, 1e8, 1e-5), ValidationError);
  PadGeometry j{"j", 120.0, 500.0, 20.0, 0.0, 30.0};
  EXPECT_THROW(path_average(j, 1e8, 1e-5), ValidationError);
}
