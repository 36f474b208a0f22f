#pragma once

// Physics fits on temperature sweeps:
//   mean Gamma_1(T)   -> {Gamma_TLS, x_QP^0, Delta} per qubit, x_QP^0 optionally
//                        shared within groups of qubits;
//   sigma^2_QP(T)     -> {V_eff^0, V_eff^th} with x_QP^0 and Delta held fixed.
// Both work on log-residuals with log-parameters, which keeps every physical
// parameter positive.

#include <algorithm>
#include <cmath>
#include <map>
#include <optional>
#include <set>
#include <string>
#include <vector>

#include "qubit/errors.hpp"
#include "qubit/nlls.hpp"
#include "qubit/physkern.hpp"
#include "qubit/units.hpp"

namespace qubit {

struct MeanDataset {
  std::string qubit;
  QubitParams q;
  std::vector<double> temperatures;  // K
  std::vector<double> means;         // s^-1
};

enum class GapUnits { kGhz, kJoule };

struct MeanFitOptions {
  std::vector<std::vector<std::string>> share_x0;  // groups of qubit ids
  GapUnits gap_units = GapUnits::kGhz;
  bool check_identifiability = true;
  double span_split = 0.1;  // K; data must straddle this temperature
  size_t min_points = 5;
  int max_iterations = 500;
  // Starting values; unset entries use the data-driven defaults.
  std::optional<double> delta_init;  // J
};

struct QubitMeanFit {
  std::string qubit;
  double gamma_tls = 0.0;  // s^-1
  double x_qp0 = 0.0;
  double delta = 0.0;  // J
  double gamma_tls_se = 0.0;
  double x_qp0_se = 0.0;
  double delta_se = 0.0;
  Eigen::Matrix3d covariance = Eigen::Matrix3d::Zero();  // (Gamma_TLS, x0, Delta)
  double init_gamma_tls = 0.0;
  double init_x_qp0 = 0.0;
  double init_delta = 0.0;
  std::string share_group;  // empty if x0 is private
};

struct MeanFitResult {
  std::vector<QubitMeanFit> qubits;
  FitResult raw;
  std::vector<std::string> names;  // of raw.params (log-parameters)
  Vec lower, upper;

  const QubitMeanFit& at(const std::string& id) const {
    for (const auto& q : qubits) {
      if (q.qubit == id) return q;
    }
    throw ValidationError("no fit for qubit " + id);
  }
};

namespace detail {

inline void check_mean_dataset(const MeanDataset& d, const MeanFitOptions& opt) {
  if (d.temperatures.size() != d.means.size()) {
    throw ValidationError("fit_mean_vs_temperature: " + d.qubit + ": T and mean differ in length");
  }
  for (size_t i = 0; i < d.means.size(); ++i) {
    if (!(d.temperatures[i] > 0.0) || !(d.means[i] > 0.0) || !std::isfinite(d.means[i])) {
      throw ValidationError("fit_mean_vs_temperature: " + d.qubit +
                            ": temperatures and means must be positive");
    }
  }
  if (!opt.check_identifiability) {
    if (d.means.empty()) throw ValidationError("fit_mean_vs_temperature: empty dataset");
    return;
  }
  if (d.means.size() < opt.min_points) {
    throw ValidationError("fit_mean_vs_temperature: " + d.qubit + " has " +
                          std::to_string(d.means.size()) + " points, need " +
                          std::to_string(opt.min_points));
  }
  const auto [lo, hi] = std::minmax_element(d.temperatures.begin(), d.temperatures.end());
  if (!(*lo < opt.span_split && *hi > opt.span_split)) {
    throw ValidationError("fit_mean_vs_temperature: " + d.qubit +
                          ": temperatures must span below and above " +
                          std::to_string(std::lround(units::k_to_mk(opt.span_split))) +
                          " mK; the gap is unidentifiable otherwise");
  }
}

inline double gap_scale(GapUnits u) {
  return u == GapUnits::kGhz ? units::ghz_to_joule(1.0) : 1.0;
}

// Jacobian of exp() on the diagonal: cov(p) = diag(p) cov(log p) diag(p).
inline Mat log_to_linear_covariance(const Mat& cov_log, const Vec& values) {
  return values.asDiagonal() * cov_log * values.asDiagonal();
}

}  // namespace detail

/// Joint fit of mean_gamma1 over all datasets. Parameter vector:
///   [ln Gamma_TLS per qubit | ln x0 per share slot | ln Delta per qubit],
/// Delta carried in GHz or J according to the options.
inline MeanFitResult fit_mean_vs_temperature(const std::vector<MeanDataset>& data,
                                             const MeanFitOptions& opt = {}) {
  if (data.empty()) throw ValidationError("fit_mean_vs_temperature: no datasets");
  std::set<std::string> ids;
  for (const auto& d : data) {
    validate(d.q);
    detail::check_mean_dataset(d, opt);
    if (!ids.insert(d.qubit).second) {
      throw ValidationError("fit_mean_vs_temperature: duplicate qubit " + d.qubit);
    }
  }

  // Map each qubit to an x0 slot.
  const size_t nq = data.size();
  std::vector<size_t> slot(nq);
  std::vector<std::string> slot_name;
  std::map<std::string, size_t> group_of;
  for (const auto& g : opt.share_x0) {
    std::string name;
    for (const auto& id : g) name += (name.empty() ? "" : "+") + id;
    for (const auto& id : g) {
      if (!ids.count(id)) throw ValidationError("share group names unknown qubit " + id);
      if (group_of.count(id)) throw ValidationError("qubit " + id + " is in two share groups");
      group_of[id] = slot_name.size();
    }
    slot_name.push_back(name);
  }
  std::vector<bool> used(slot_name.size(), false);
  for (size_t i = 0; i < nq; ++i) {
    auto it = group_of.find(data[i].qubit);
    if (it != group_of.end()) {
      slot[i] = it->second;
      used[it->second] = true;
    } else {
      slot[i] = slot_name.size();
      slot_name.push_back("");
      used.push_back(true);
    }
  }
  const size_t nx = slot_name.size();
  const double gscale = detail::gap_scale(opt.gap_units);

  // Data-driven starting values.
  const double delta0 = opt.delta_init ? *opt.delta_init : units::ghz_to_joule(40.0);
  std::vector<double> g_init(nq), x_init(nq);
  for (size_t i = 0; i < nq; ++i) {
    const auto& d = data[i];
    const double mmin = *std::min_element(d.means.begin(), d.means.end());
    const size_t ilow = static_cast<size_t>(
        std::min_element(d.temperatures.begin(), d.temperatures.end()) - d.temperatures.begin());
    const double e = eta(d.temperatures[ilow], detail::with_gap(d.q, delta0));
    g_init[i] = mmin;
    // The minimum may sit at the lowest temperature; keep x0 strictly positive.
    x_init[i] = std::max(d.means[ilow] - g_init[i], 0.05 * mmin) / e;
  }
  std::vector<double> slot_log(nx, 0.0);
  std::vector<int> slot_count(nx, 0);
  for (size_t i = 0; i < nq; ++i) {
    slot_log[slot[i]] += std::log(x_init[i]);
    ++slot_count[slot[i]];
  }

  const Eigen::Index np = static_cast<Eigen::Index>(2 * nq + nx);
  Vec init(np);
  std::vector<std::string> names(np);
  for (size_t i = 0; i < nq; ++i) {
    init[i] = std::log(g_init[i]);
    names[i] = "ln_gamma_tls[" + data[i].qubit + "]";
    init[static_cast<Eigen::Index>(nq + nx + i)] = std::log(delta0 / gscale);
    names[nq + nx + i] = "ln_delta[" + data[i].qubit + "]";
  }
  for (size_t s = 0; s < nx; ++s) {
    init[static_cast<Eigen::Index>(nq + s)] = slot_log[s] / std::max(slot_count[s], 1);
    names[nq + s] = "ln_x0[" + (slot_name[s].empty() ? std::to_string(s) : slot_name[s]) + "]";
  }

  size_t m = 0;
  for (const auto& d : data) m += d.means.size();
  FitProblem prob;
  prob.residuals = [&](const Vec& p) -> Vec {
    Vec r(static_cast<Eigen::Index>(m));
    Eigen::Index k = 0;
    for (size_t i = 0; i < nq; ++i) {
      const auto& d = data[i];
      const double g = std::exp(p[static_cast<Eigen::Index>(i)]);
      const double x0 = std::exp(p[static_cast<Eigen::Index>(nq + slot[i])]);
      const double delta = std::exp(p[static_cast<Eigen::Index>(nq + nx + i)]) * gscale;
      const QPModelParams qp{x0, delta, 1.0, 1.0};
      for (size_t j = 0; j < d.means.size(); ++j) {
        r[k++] = std::log(mean_gamma1(d.temperatures[j], d.q, g, qp)) - std::log(d.means[j]);
      }
    }
    return r;
  };
  prob.initial = init;
  // Generous box keeps exp() finite while never binding on physical data.
  prob.lower = init.array() - 30.0;
  prob.upper = init.array() + 30.0;
  prob.names = names;
  prob.max_iterations = opt.max_iterations;
  const FitResult raw = nlls_solve(prob);

  MeanFitResult out;
  out.raw = raw;
  out.names = names;
  out.lower = prob.lower;
  out.upper = prob.upper;
  for (size_t i = 0; i < nq; ++i) {
    const Eigen::Index ig = static_cast<Eigen::Index>(i);
    const Eigen::Index ix = static_cast<Eigen::Index>(nq + slot[i]);
    const Eigen::Index id = static_cast<Eigen::Index>(nq + nx + i);
    QubitMeanFit f;
    f.qubit = data[i].qubit;
    f.gamma_tls = std::exp(raw.params[ig]);
    f.x_qp0 = std::exp(raw.params[ix]);
    f.delta = std::exp(raw.params[id]) * gscale;
    Mat sub(3, 3);
    const Eigen::Index idx[3] = {ig, ix, id};
    for (int a = 0; a < 3; ++a) {
      for (int b = 0; b < 3; ++b) sub(a, b) = raw.covariance(idx[a], idx[b]);
    }
    Vec vals(3);
    vals << f.gamma_tls, f.x_qp0, f.delta;
    f.covariance = detail::log_to_linear_covariance(sub, vals);
    f.gamma_tls_se = std::sqrt(std::max(f.covariance(0, 0), 0.0));
    f.x_qp0_se = std::sqrt(std::max(f.covariance(1, 1), 0.0));
    f.delta_se = std::sqrt(std::max(f.covariance(2, 2), 0.0));
    f.init_gamma_tls = g_init[i];
    f.init_x_qp0 = std::exp(init[ix]);
    f.init_delta = delta0;
    f.share_group = slot_name[slot[i]];
    out.qubits.push_back(f);
  }
  return out;
}

// ---------------------------------------------------------------------------
// Variance fit
// ---------------------------------------------------------------------------

struct VarianceDataset {
  std::string qubit;
  QubitParams q;
  std::vector<double> temperatures;  // K
  std::vector<double> sigma2_qp;     // s^-2
};

struct VarianceFitOptions {
  int max_iterations = 500;
  std::optional<double> volume_init;  // um^3; default: junction volume
  // V0 is flagged unidentifiable when no data point has at least this share
  // of its modelled variance from non-equilibrium QPs ...
  double plateau_share = 0.5;
  // ... or when its relative standard error exceeds this.
  double max_relative_se = 1.0;
};

struct VarianceFitResult {
  std::string qubit;
  double v_eff0 = 0.0;    // um^3
  double v_eff_th = 0.0;  // um^3
  double v_eff0_se = 0.0;
  double v_eff_th_se = 0.0;
  Eigen::Matrix2d covariance = Eigen::Matrix2d::Zero();
  bool v_eff0_identifiable = true;
  bool v_eff_th_identifiable = true;
  double max_plateau_share = 0.0;
  double init_volume = 0.0;
  FitResult raw;
  std::vector<std::string> names;
  Vec lower, upper;
};

/// Fit of sigma2_qp(T) for {V0, V_th} with x0 and Delta fixed from the mean fit.
inline VarianceFitResult fit_variance_vs_temperature(const VarianceDataset& d, double x_qp0,
                                                     double delta,
                                                     const VarianceFitOptions& opt = {}) {
  validate(d.q);
  if (d.temperatures.size() != d.sigma2_qp.size() || d.temperatures.size() < 2) {
    throw ValidationError("fit_variance_vs_temperature: need >= 2 matching points");
  }
  for (size_t i = 0; i < d.sigma2_qp.size(); ++i) {
    if (!(d.temperatures[i] > 0.0) || !(d.sigma2_qp[i] > 0.0) || !std::isfinite(d.sigma2_qp[i])) {
      throw ValidationError("fit_variance_vs_temperature: " + d.qubit +
                            ": temperatures and variances must be positive");
    }
  }
  if (!(x_qp0 > 0.0) || !(delta > 0.0)) {
    throw ValidationError("fit_variance_vs_temperature: x0 and Delta must be positive");
  }
  const double v0 = opt.volume_init ? *opt.volume_init : d.q.junction_volume;
  if (!(v0 > 0.0)) throw ValidationError("fit_variance_vs_temperature: no initial volume");

  FitProblem prob;
  prob.residuals = [&](const Vec& p) -> Vec {
    const QPModelParams qp{x_qp0, delta, std::exp(p[0]), std::exp(p[1])};
    Vec r(static_cast<Eigen::Index>(d.sigma2_qp.size()));
    for (size_t j = 0; j < d.sigma2_qp.size(); ++j) {
      r[static_cast<Eigen::Index>(j)] =
          std::log(sigma2_qp(d.temperatures[j], d.q, qp)) - std::log(d.sigma2_qp[j]);
    }
    return r;
  };
  prob.initial = Vec::Constant(2, std::log(v0));
  prob.lower = prob.initial.array() - 30.0;
  prob.upper = prob.initial.array() + 30.0;
  prob.names = {"ln_v_eff0", "ln_v_eff_th"};
  prob.max_iterations = opt.max_iterations;
  const FitResult raw = nlls_solve(prob);

  VarianceFitResult out;
  out.qubit = d.qubit;
  out.raw = raw;
  out.names = prob.names;
  out.lower = prob.lower;
  out.upper = prob.upper;
  out.init_volume = v0;
  out.v_eff0 = std::exp(raw.params[0]);
  out.v_eff_th = std::exp(raw.params[1]);
  Vec vals(2);
  vals << out.v_eff0, out.v_eff_th;
  out.covariance = detail::log_to_linear_covariance(raw.covariance, vals);
  out.v_eff0_se = std::sqrt(std::max(out.covariance(0, 0), 0.0));
  out.v_eff_th_se = std::sqrt(std::max(out.covariance(1, 1), 0.0));

  // Share of the modelled variance carried by each population.
  const QPModelParams fitted{x_qp0, delta, out.v_eff0, out.v_eff_th};
  const double ncp = fitted.n_cp();
  double max_neq = 0.0, max_th = 0.0;
  for (double t : d.temperatures) {
    const double neq = x_qp0 / (ncp * out.v_eff0);
    const double th = x_qp_thermal(t, delta) / (ncp * out.v_eff_th);
    max_neq = std::max(max_neq, neq / (neq + th));
    max_th = std::max(max_th, th / (neq + th));
  }
  out.max_plateau_share = max_neq;
  out.v_eff0_identifiable = max_neq >= opt.plateau_share &&
                            !raw.at_bound[0] &&
                            out.v_eff0_se <= opt.max_relative_se * out.v_eff0;
  out.v_eff_th_identifiable = max_th >= opt.plateau_share && !raw.at_bound[1] &&
                              out.v_eff_th_se <= opt.max_relative_se * out.v_eff_th;
  return out;
}

}  // namespace qubit
