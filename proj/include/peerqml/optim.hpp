#pragma once

// BFGS minimiser with an Armijo backtracking line search.

#include <cmath>
#include <functional>
#include <limits>

#include <Eigen/Dense>

namespace peerqml {

struct BfgsOptions {
  int max_iter = 200;
  double grad_tol = 1e-6;   // sup-norm of the gradient
  double max_step = 5.0;     // sup-norm cap on the trial step
};

struct BfgsResult {
  Eigen::VectorXd x;
  double f = std::numeric_limits<double>::infinity();
  Eigen::VectorXd grad;
  int iterations = 0;
  bool converged = false;
};

// fg(x, grad) returns f(x) and fills grad; it may return +inf or NaN for
// points outside the domain.
using Objective = std::function<double(const Eigen::VectorXd&, Eigen::VectorXd&)>;

inline BfgsResult bfgs_minimize(const Objective& fg, Eigen::VectorXd x0, const BfgsOptions& opt) {
  const int n = static_cast<int>(x0.size());
  BfgsResult res;
  res.x = std::move(x0);
  res.grad.resize(n);
  res.f = fg(res.x, res.grad);
  if (!std::isfinite(res.f)) return res;
  Eigen::MatrixXd H = Eigen::MatrixXd::Identity(n, n);
  bool scaled = false;
  Eigen::VectorXd gnew(n), xnew(n);
  for (res.iterations = 0; res.iterations < opt.max_iter; ++res.iterations) {
    if (res.grad.lpNorm<Eigen::Infinity>() < opt.grad_tol) {
      res.converged = true;
      break;
    }
    Eigen::VectorXd d = -H * res.grad;
    double slope = res.grad.dot(d);
    if (!(slope < 0.0)) {
      H.setIdentity();
      scaled = false;
      d = -res.grad;
      slope = res.grad.dot(d);
    }
    const double dmax = d.lpNorm<Eigen::Infinity>();
    if (dmax > opt.max_step) {
      d *= opt.max_step / dmax;
      slope *= opt.max_step / dmax;
    }
    double t = 1.0, fnew = 0.0;
    bool accepted = false;
    for (int ls = 0; ls < 60; ++ls) {
      xnew = res.x + t * d;
      fnew = fg(xnew, gnew);
      if (std::isfinite(fnew) && fnew <= res.f + 1e-4 * t * slope) {
        accepted = true;
        break;
      }
      t *= 0.5;
    }
    if (!accepted) break;
    const Eigen::VectorXd s = xnew - res.x;
    const Eigen::VectorXd y = gnew - res.grad;
    const double sy = s.dot(y);
    const double fold = res.f;
    res.x = xnew;
    res.f = fnew;
    res.grad = gnew;
    if (sy > 1e-12 * s.norm() * y.norm()) {
      if (!scaled) {
        H = Eigen::MatrixXd::Identity(n, n) * (sy / y.squaredNorm());
        scaled = true;
      }
      const double rho = 1.0 / sy;
      const Eigen::MatrixXd V = Eigen::MatrixXd::Identity(n, n) - rho * y * s.transpose();
      H = V.transpose() * H * V + rho * s * s.transpose();
    }
    if (std::abs(fold - fnew) <= 1e-16 * std::abs(fnew) && s.lpNorm<Eigen::Infinity>() < 1e-14) break;
  }
  if (res.grad.lpNorm<Eigen::Infinity>() < opt.grad_tol) res.converged = true;
  return res;
}

}  // namespace peerqml
