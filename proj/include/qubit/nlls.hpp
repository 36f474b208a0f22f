#pragma once

// Bound-constrained Levenberg-Marquardt least squares with a central-difference
// Jacobian. Small dense problems only (a handful of parameters, up to a few
// thousand residuals).

#include <Eigen/Dense>
#include <algorithm>
#include <cmath>
#include <functional>
#include <limits>
#include <sstream>
#include <string>
#include <vector>

#include "qubit/errors.hpp"

namespace qubit {

using Vec = Eigen::VectorXd;
using Mat = Eigen::MatrixXd;

enum class LossScaling {
  kLinear,  // r = model - data
  kLog,     // r = log(model) - log(data)
};

struct FitProblem {
  // Either `residuals` is set, or `model` + `observations` with `loss`.
  std::function<Vec(const Vec&)> residuals;
  std::function<Vec(const Vec&)> model;
  Vec observations;
  LossScaling loss = LossScaling::kLinear;

  Vec initial;
  Vec lower;  // empty -> unbounded
  Vec upper;
  std::vector<std::string> names;

  int max_iterations = 200;
  double gradient_tol = 1e-12;
  double step_tol = 1e-13;
  double cost_tol = 1e-15;
};

struct FitResult {
  Vec params;
  Mat covariance;
  Vec standard_errors;
  double cost = 0.0;  // 0.5 * |r|^2
  double residual_norm = 0.0;
  int iterations = 0;
  int evaluations = 0;
  bool converged = false;
  std::vector<bool> at_bound;
  std::string stop_reason;

  bool any_at_bound() const {
    return std::any_of(at_bound.begin(), at_bound.end(), [](bool b) { return b; });
  }
};

/// Thrown when the iteration budget runs out; carries the best point found.
class NonConvergence : public NumericalError {
 public:
  NonConvergence(const std::string& what, FitResult best)
      : NumericalError(what), best_(std::move(best)) {}
  const FitResult& best() const { return best_; }

 private:
  FitResult best_;
};

namespace detail {

inline std::string describe(const Vec& x, const std::vector<std::string>& names) {
  std::ostringstream os;
  os << "[";
  for (Eigen::Index i = 0; i < x.size(); ++i) {
    if (i) os << ", ";
    if (static_cast<size_t>(i) < names.size()) os << names[i] << "=";
    os << x[i];
  }
  os << "]";
  return os.str();
}

inline bool all_finite(const Vec& v) { return v.allFinite(); }

}  // namespace detail

/// Residual function of a problem, with the loss applied.
inline std::function<Vec(const Vec&)> residual_function(const FitProblem& p) {
  if (p.residuals) return p.residuals;
  if (!p.model) throw ValidationError("FitProblem: no residual or model function");
  if (p.loss == LossScaling::kLinear) {
    return [&p](const Vec& x) -> Vec { return p.model(x) - p.observations; };
  }
  return [&p](const Vec& x) -> Vec {
    return p.model(x).array().log().matrix() - p.observations.array().log().matrix();
  };
}

/// Central-difference Jacobian. Steps are mirrored to one-sided differences
/// where a central step would leave the box.
inline Mat numerical_jacobian(const std::function<Vec(const Vec&)>& f, const Vec& x,
                              const Vec& lower, const Vec& upper,
                              double relative_step = 6.055454452393343e-06 /* eps^(1/3) */,
                              const Vec* f0 = nullptr) {
  const Eigen::Index n = x.size();
  Vec base = f0 ? *f0 : f(x);
  Mat jac(base.size(), n);
  for (Eigen::Index i = 0; i < n; ++i) {
    const double h = relative_step * std::max(std::abs(x[i]), 1e-8);
    const double lo = lower.size() ? lower[i] : -std::numeric_limits<double>::infinity();
    const double hi = upper.size() ? upper[i] : std::numeric_limits<double>::infinity();
    Vec xp = x;
    Vec xm = x;
    if (x[i] + h <= hi && x[i] - h >= lo) {
      xp[i] += h;
      xm[i] -= h;
      jac.col(i) = (f(xp) - f(xm)) / (xp[i] - xm[i]);
    } else if (x[i] + 2 * h <= hi) {
      // forward, second order: (-3 f0 + 4 f1 - f2) / 2h
      xp[i] += h;
      Vec x2 = x;
      x2[i] += 2 * h;
      jac.col(i) = (-3.0 * base + 4.0 * f(xp) - f(x2)) / (2.0 * h);
    } else {
      xm[i] -= h;
      Vec x2 = x;
      x2[i] -= 2 * h;
      jac.col(i) = (3.0 * base - 4.0 * f(xm) + f(x2)) / (2.0 * h);
    }
  }
  return jac;
}

/// Covariance (J^T J)^-1 s^2 over the free parameters; parameters pinned on a
/// bound get zero rows and columns. Near-null directions are inverted with an
/// eigenvalue floor so the result stays finite, symmetric and PSD.
inline Mat covariance_from_jacobian(const Mat& jac, double cost, const std::vector<bool>& fixed) {
  const Eigen::Index m = jac.rows();
  const Eigen::Index n = jac.cols();
  std::vector<Eigen::Index> freeidx;
  for (Eigen::Index i = 0; i < n; ++i) {
    if (!fixed[i]) freeidx.push_back(i);
  }
  Mat cov = Mat::Zero(n, n);
  const Eigen::Index k = static_cast<Eigen::Index>(freeidx.size());
  if (k == 0) return cov;
  Mat jf(m, k);
  for (Eigen::Index j = 0; j < k; ++j) jf.col(j) = jac.col(freeidx[j]);
  const Mat jtj = jf.transpose() * jf;
  Eigen::SelfAdjointEigenSolver<Mat> es(jtj);
  Vec ev = es.eigenvalues();
  const double floor = std::max(ev.maxCoeff(), 1e-300) * 1e-30;
  for (Eigen::Index i = 0; i < ev.size(); ++i) ev[i] = 1.0 / std::max(ev[i], floor);
  const double dof = m > k ? static_cast<double>(m - k) : 1.0;
  const double s2 = 2.0 * cost / dof;
  Mat inv = es.eigenvectors() * ev.asDiagonal() * es.eigenvectors().transpose() * s2;
  inv = 0.5 * (inv + inv.transpose());
  for (Eigen::Index a = 0; a < k; ++a) {
    for (Eigen::Index b = 0; b < k; ++b) cov(freeidx[a], freeidx[b]) = inv(a, b);
  }
  return cov;
}

/// Levenberg-Marquardt with box constraints. Accepted steps never increase the
/// cost. Variables sitting on a bound with the gradient pointing outward are
/// held fixed for the step.
inline FitResult nlls_solve(const FitProblem& problem) {
  const auto f = residual_function(problem);
  const Eigen::Index n = problem.initial.size();
  const double inf = std::numeric_limits<double>::infinity();
  const Vec lower = problem.lower.size() ? problem.lower : Vec::Constant(n, -inf);
  const Vec upper = problem.upper.size() ? problem.upper : Vec::Constant(n, inf);
  if (lower.size() != n || upper.size() != n) {
    throw ValidationError("nlls_solve: bounds do not match parameter count");
  }
  for (Eigen::Index i = 0; i < n; ++i) {
    if (!(problem.initial[i] >= lower[i] && problem.initial[i] <= upper[i])) {
      throw ValidationError("nlls_solve: initial parameters outside bounds " +
                            detail::describe(problem.initial, problem.names));
    }
  }

  FitResult res;
  Vec x = problem.initial;
  Vec r = f(x);
  ++res.evaluations;
  if (!detail::all_finite(r)) {
    throw NumericalError("nlls_solve: non-finite residual at " +
                         detail::describe(x, problem.names));
  }
  double cost = 0.5 * r.squaredNorm();
  double lambda = 1e-3;
  double nu = 2.0;
  bool converged = false;
  std::string reason = "max iterations";
  Mat jac;
  std::vector<bool> fixed(n, false);

  auto projected_gradient_norm = [&](const Vec& g) {
    double m = 0.0;
    for (Eigen::Index i = 0; i < n; ++i) {
      const bool blocked = (x[i] <= lower[i] && g[i] > 0) || (x[i] >= upper[i] && g[i] < 0);
      if (!blocked) m = std::max(m, std::abs(g[i]));
    }
    return m;
  };

  int it = 0;
  bool need_jac = true;
  Vec grad;
  for (; it < problem.max_iterations; ++it) {
    if (need_jac) {
      jac = numerical_jacobian(f, x, lower, upper, 6.055454452393343e-06, &r);
      res.evaluations += static_cast<int>(2 * n);
      if (!jac.allFinite()) {
        throw NumericalError("nlls_solve: non-finite Jacobian at " +
                             detail::describe(x, problem.names));
      }
      grad = jac.transpose() * r;
      need_jac = false;
    }
    if (projected_gradient_norm(grad) <= problem.gradient_tol * std::max(1.0, cost)) {
      converged = true;
      reason = "gradient";
      break;
    }
    for (Eigen::Index i = 0; i < n; ++i) {
      fixed[i] = (x[i] <= lower[i] && grad[i] > 0) || (x[i] >= upper[i] && grad[i] < 0);
    }
    const Mat jtj = jac.transpose() * jac;
    Vec diag = jtj.diagonal();
    const double dmax = std::max(diag.maxCoeff(), 1e-300);
    for (Eigen::Index i = 0; i < n; ++i) diag[i] = std::max(diag[i], 1e-12 * dmax);

    // Inner loop: raise damping until a step lowers the cost.
    bool accepted = false;
    Vec xn;
    Vec rn;
    double costn = cost;
    for (int inner = 0; inner < 60; ++inner) {
      Mat a = jtj;
      Vec b = -grad;
      for (Eigen::Index i = 0; i < n; ++i) {
        a(i, i) += lambda * diag[i];
        if (fixed[i]) {
          a.row(i).setZero();
          a.col(i).setZero();
          a(i, i) = 1.0;
          b[i] = 0.0;
        }
      }
      Eigen::LDLT<Mat> ldlt(a);
      Vec step = ldlt.solve(b);
      if (ldlt.info() != Eigen::Success || !step.allFinite()) {
        lambda *= nu;
        nu *= 2.0;
        continue;
      }
      xn = (x + step).cwiseMax(lower).cwiseMin(upper);
      const Vec actual_step = xn - x;
      if (actual_step.norm() <= problem.step_tol * (x.norm() + problem.step_tol)) {
        converged = true;
        reason = "step";
        break;
      }
      rn = f(xn);
      ++res.evaluations;
      if (!detail::all_finite(rn)) {
        lambda *= nu;
        nu *= 2.0;
        if (inner == 59) {
          throw NumericalError("nlls_solve: non-finite residual at " +
                               detail::describe(xn, problem.names));
        }
        continue;
      }
      costn = 0.5 * rn.squaredNorm();
      const double predicted =
          -(grad.dot(actual_step) + 0.5 * actual_step.dot(jtj * actual_step));
      const double rho = predicted > 0 ? (cost - costn) / predicted : -1.0;
      if (costn < cost) {
        accepted = true;
        if (rho > 0) {
          lambda *= std::max(1.0 / 3.0, 1.0 - std::pow(2.0 * rho - 1.0, 3));
        }
        nu = 2.0;
        break;
      }
      lambda *= nu;
      nu *= 2.0;
    }
    if (converged) break;
    if (!accepted) {
      if (cost == 0.0 || projected_gradient_norm(grad) <= 1e-8 * std::max(1.0, cost)) {
        converged = true;
        reason = "no further decrease";
        break;
      }
      throw NumericalError("nlls_solve: singular or ill-conditioned step at " +
                           detail::describe(x, problem.names));
    }
    const double prev = cost;
    x = xn;
    r = rn;
    cost = costn;
    need_jac = true;
    if (prev - cost <= problem.cost_tol * prev) {
      converged = true;
      reason = "cost";
      ++it;
      break;
    }
  }

  jac = numerical_jacobian(f, x, lower, upper, 6.055454452393343e-06, &r);
  res.params = x;
  res.cost = cost;
  res.residual_norm = std::sqrt(2.0 * cost);
  res.iterations = it;
  res.converged = converged;
  res.stop_reason = reason;
  res.at_bound.assign(n, false);
  for (Eigen::Index i = 0; i < n; ++i) {
    res.at_bound[i] = x[i] <= lower[i] || x[i] >= upper[i];
  }
  res.covariance = covariance_from_jacobian(jac, cost, res.at_bound);
  res.standard_errors = res.covariance.diagonal().cwiseMax(0.0).cwiseSqrt();
  return res;
}

}  // namespace qubit
