#pragma once

// Dense BFGS for small unconstrained problems (parameter dimensions here
// are <= ~10). Strong Wolfe line search with bracketing and zoom.

#include <cmath>
#include <functional>
#include <limits>

#include <Eigen/Core>

namespace dast {

using ObjectiveFn =
    std::function<double(const Eigen::VectorXd&, Eigen::VectorXd&)>;

struct OptimOptions {
  int max_iters = 200;
  double grad_tol = 1e-6;   // infinity norm
  double step_tol = 1e-12;  // infinity norm of the parameter update
  double c1 = 1e-4;
  double c2 = 0.9;
  double max_step_norm = 10.0;  // trust-style cap on a single update
};

struct OptimResult {
  Eigen::VectorXd x;
  double value = 0.0;
  Eigen::VectorXd grad;
  int iterations = 0;
  int evaluations = 0;
  bool converged = false;
};

// Minimises f. Callers maximising a log-likelihood pass its negation.
inline OptimResult minimize_bfgs(const ObjectiveFn& f,
                                 const Eigen::VectorXd& x0,
                                 const OptimOptions& opts = {}) {
  const int n = static_cast<int>(x0.size());
  OptimResult res;
  res.x = x0;
  res.grad.resize(n);
  res.value = f(res.x, res.grad);
  ++res.evaluations;

  Eigen::MatrixXd h_inv = Eigen::MatrixXd::Identity(n, n);

  for (int iter = 0; iter < opts.max_iters; ++iter) {
    res.iterations = iter;
    if (res.grad.lpNorm<Eigen::Infinity>() < opts.grad_tol) {
      res.converged = true;
      return res;
    }

    Eigen::VectorXd dir = -(h_inv * res.grad);
    double dg = dir.dot(res.grad);
    if (!(dg < 0.0) || !dir.allFinite()) {
      h_inv.setIdentity();
      dir = -res.grad;
      dg = dir.dot(res.grad);
    }
    double dir_norm = dir.lpNorm<Eigen::Infinity>();
    if (dir_norm > opts.max_step_norm) {
      dir *= opts.max_step_norm / dir_norm;
      dg = dir.dot(res.grad);
    }

    // strong Wolfe line search (bracket + zoom)
    double f0 = res.value;
    Eigen::VectorXd g_new(n);
    double alpha = 1.0;
    double alpha_prev = 0.0;
    double f_prev = f0;
    double alpha_max = 50.0;
    double a_lo = 0.0, a_hi = 0.0, f_lo = f0;
    bool bracketed = false;
    double f_new = f0;
    Eigen::VectorXd x_new = res.x;

    auto eval = [&](double a) {
      x_new = res.x + a * dir;
      f_new = f(x_new, g_new);
      ++res.evaluations;
      return f_new;
    };

    bool done = false;
    for (int ls = 0; ls < 20 && !done && !bracketed; ++ls) {
      eval(alpha);
      if (!std::isfinite(f_new)) {
        alpha *= 0.25;
        continue;
      }
      if (f_new > f0 + opts.c1 * alpha * dg || (ls > 0 && f_new >= f_prev)) {
        a_lo = alpha_prev;
        f_lo = f_prev;
        a_hi = alpha;
        bracketed = true;
        break;
      }
      double dg_new = g_new.dot(dir);
      if (std::abs(dg_new) <= -opts.c2 * dg) {
        done = true;
        break;
      }
      if (dg_new >= 0.0) {
        a_lo = alpha;
        f_lo = f_new;
        a_hi = alpha_prev;
        bracketed = true;
        break;
      }
      alpha_prev = alpha;
      f_prev = f_new;
      alpha = std::min(2.0 * alpha, alpha_max);
      if (alpha >= alpha_max) {
        done = true;  // accept the long step
        eval(alpha_max);
        break;
      }
    }

    if (bracketed) {
      for (int z = 0; z < 25; ++z) {
        alpha = 0.5 * (a_lo + a_hi);
        eval(alpha);
        if (!std::isfinite(f_new) || f_new > f0 + opts.c1 * alpha * dg ||
            f_new >= f_lo) {
          a_hi = alpha;
        } else {
          double dg_new = g_new.dot(dir);
          if (std::abs(dg_new) <= -opts.c2 * dg) break;
          if (dg_new * (a_hi - a_lo) >= 0.0) a_hi = a_lo;
          a_lo = alpha;
          f_lo = f_new;
        }
        if (std::abs(a_hi - a_lo) < 1e-12) break;
      }
      // make sure we end on the best point evaluated in the zoom
      if (!(f_new <= f_lo)) {
        eval(a_lo > 0.0 ? a_lo : alpha);
      }
    }

    if (!std::isfinite(f_new) || f_new >= f0) {
      // no usable progress along this direction
      h_inv.setIdentity();
      if ((x_new - res.x).lpNorm<Eigen::Infinity>() < opts.step_tol ||
          !std::isfinite(f_new)) {
        res.converged = res.grad.lpNorm<Eigen::Infinity>() < 10 * opts.grad_tol;
        return res;
      }
    }

    Eigen::VectorXd s = x_new - res.x;
    Eigen::VectorXd yv = g_new - res.grad;
    double sy = s.dot(yv);
    if (sy > 1e-12 * s.norm() * yv.norm()) {
      // BFGS inverse update
      Eigen::MatrixXd eye = Eigen::MatrixXd::Identity(n, n);
      double rho = 1.0 / sy;
      h_inv = (eye - rho * s * yv.transpose()) * h_inv *
                  (eye - rho * yv * s.transpose()) +
              rho * s * s.transpose();
    }

    res.x = x_new;
    res.value = f_new;
    res.grad = g_new;
    if (s.lpNorm<Eigen::Infinity>() < opts.step_tol) {
      res.converged = true;
      return res;
    }
  }
  res.converged = res.grad.lpNorm<Eigen::Infinity>() < opts.grad_tol;
  return res;
}

}  // namespace dast
