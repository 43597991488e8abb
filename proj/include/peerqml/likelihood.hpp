#pragma once

// Gaussian log-likelihood of the group-effects model, GLS coefficients, the
// concentrated objective, analytic score and Hessian, and the moment blocks
// chi_r with their optimal weight phi.
//
// Parameter layout of every stacked vector: (lambda, sigma_alpha2,
// sigma_eps2_1..sigma_eps2_J, beta_1..beta_k).

#include <cmath>
#include <limits>
#include <map>
#include <numbers>
#include <string>
#include <utility>
#include <vector>

#include <Eigen/Dense>

#include "blockalg.hpp"
#include "errors.hpp"
#include "model.hpp"

namespace peerqml {

struct Theta {
  double lambda = 0.0;
  double sigma_alpha2 = 0.0;
  Eigen::VectorXd sigma_eps2;  // length J
};

struct Delta {
  Theta theta;
  Eigen::VectorXd beta;  // length k_Z
};

struct MomentVector {
  double chi_w = 0.0;
  double chi_b = 0.0;
  Eigen::VectorXd chi_zw;
  Eigen::VectorXd chi_zb;

  Eigen::VectorXd stacked() const {
    Eigen::VectorXd v(2 + chi_zw.size() + chi_zb.size());
    v << chi_w, chi_b, chi_zw, chi_zb;
    return v;
  }
};

inline int theta_dim(int J) { return 2 + J; }
inline int delta_dim(int J, int k) { return 2 + J + k; }

inline Eigen::VectorXd to_vector(const Delta& d) {
  const int J = static_cast<int>(d.theta.sigma_eps2.size());
  const int k = static_cast<int>(d.beta.size());
  Eigen::VectorXd v(delta_dim(J, k));
  v << d.theta.lambda, d.theta.sigma_alpha2, d.theta.sigma_eps2, d.beta;
  return v;
}

inline Delta delta_from_vector(const Eigen::VectorXd& v, int J) {
  Delta d;
  d.theta.lambda = v(0);
  d.theta.sigma_alpha2 = v(1);
  d.theta.sigma_eps2 = v.segment(2, J);
  d.beta = v.tail(v.size() - 2 - J);
  return d;
}

inline Eigen::VectorXd theta_to_vector(const Theta& t) {
  Eigen::VectorXd v(2 + t.sigma_eps2.size());
  v << t.lambda, t.sigma_alpha2, t.sigma_eps2;
  return v;
}

inline Theta theta_from_vector(const Eigen::VectorXd& v) {
  Theta t;
  t.lambda = v(0);
  t.sigma_alpha2 = v(1);
  t.sigma_eps2 = v.tail(v.size() - 2);
  return t;
}

inline std::vector<std::string> parameter_names(int J, int k) {
  std::vector<std::string> names{"lambda", "sigma_alpha2"};
  for (int j = 1; j <= J; ++j) names.push_back("sigma_eps2_" + std::to_string(j));
  for (int i = 1; i <= k; ++i) names.push_back("beta_" + std::to_string(i));
  return names;
}

inline void check_admissible(const Theta& t) {
  if (!(t.lambda > -1.0 && t.lambda < 1.0)) fail(ErrorKind::domain, "lambda outside (-1, 1)");
  if (!(t.sigma_alpha2 >= 0.0) || !std::isfinite(t.sigma_alpha2)) {
    fail(ErrorKind::domain, "sigma_alpha2 must be finite and >= 0");
  }
  for (int j = 0; j < t.sigma_eps2.size(); ++j) {
    if (!(t.sigma_eps2(j) > 0.0) || !std::isfinite(t.sigma_eps2(j))) {
      fail(ErrorKind::domain, "sigma_eps2 must be finite and > 0");
    }
  }
}

// Sufficient statistics of all groups sharing a size m and a category j.
struct CellStats {
  int m = 2;
  int j = 1;
  int count = 0;
  double yy = 0.0;           // sum of Y''Y''
  double ybar2 = 0.0;        // sum of ybar^2
  Eigen::VectorXd zy_w;      // sum of Z''Y''
  Eigen::VectorXd zy_b;      // sum of zbar' ybar
  Eigen::MatrixXd zz_w;      // sum of Z''Z''
  Eigen::MatrixXd zz_b;      // sum of zbar' zbar
  Eigen::VectorXd zbar_sum;  // sum of zbar'
};

struct Cells {
  int J = 1;
  int k = 1;
  int N = 0;
  int R = 0;
  std::vector<CellStats> cells;  // ordered by (j, m)
};

inline Cells summarize(const Dataset& d) {
  std::map<std::pair<int, int>, CellStats> acc;
  for (const auto& g : d.groups) {
    auto it = acc.find({g.category, g.m});
    if (it == acc.end()) {
      CellStats c;
      c.m = g.m;
      c.j = g.category;
      c.zy_w = Eigen::VectorXd::Zero(d.k_Z);
      c.zy_b = Eigen::VectorXd::Zero(d.k_Z);
      c.zz_w = Eigen::MatrixXd::Zero(d.k_Z, d.k_Z);
      c.zz_b = Eigen::MatrixXd::Zero(d.k_Z, d.k_Z);
      c.zbar_sum = Eigen::VectorXd::Zero(d.k_Z);
      it = acc.emplace(std::make_pair(g.category, g.m), std::move(c)).first;
    }
    CellStats& c = it->second;
    const WithinBetween wb = within_between(g);
    ++c.count;
    c.yy += wb.y_dot.squaredNorm();
    c.ybar2 += wb.y_bar * wb.y_bar;
    c.zy_w += wb.z_dot.transpose() * wb.y_dot;
    c.zy_b += wb.z_bar.transpose() * wb.y_bar;
    c.zz_w += wb.z_dot.transpose() * wb.z_dot;
    c.zz_b += wb.z_bar.transpose() * wb.z_bar;
    c.zbar_sum += wb.z_bar.transpose();
  }
  Cells out;
  out.J = d.J;
  out.k = d.k_Z;
  out.N = d.N;
  out.R = d.R;
  for (auto& [key, c] : acc) out.cells.push_back(std::move(c));
  return out;
}

namespace detail {

// Block coefficients and residual sums of one cell at (lambda, beta).
struct CellTerms {
  GroupBlock S, W, Oinv;
  double A = 0.0;   // sum ||U''||^2
  double B = 0.0;   // sum ubar^2
  double Cw = 0.0;  // sum U''' Y''
  double Cb = 0.0;  // sum ubar ybar
  Eigen::VectorXd gw, gb;  // sum Z''' U'', sum zbar' ubar
};

inline CellTerms cell_terms(const CellStats& c, const Theta& t, const Eigen::VectorXd& beta) {
  CellTerms ct;
  ct.S = structural_block(c.m, t.lambda);
  ct.W = weight_block(c.m);
  ct.Oinv = block_inv(omega_block(c.m, t.sigma_eps2(c.j - 1), t.sigma_alpha2));
  const double p = ct.S.p, s = ct.S.s;
  const double bzyw = beta.dot(c.zy_w), bzyb = beta.dot(c.zy_b);
  const Eigen::VectorXd zzwb = c.zz_w * beta, zzbb = c.zz_b * beta;
  ct.A = p * p * c.yy - 2.0 * p * bzyw + beta.dot(zzwb);
  ct.B = s * s * c.ybar2 - 2.0 * s * bzyb + beta.dot(zzbb);
  ct.Cw = p * c.yy - bzyw;
  ct.Cb = s * c.ybar2 - bzyb;
  ct.gw = p * c.zy_w - zzwb;
  ct.gb = s * c.zy_b - zzbb;
  return ct;
}

// Derivative of Omega with respect to variance parameter i (index into theta
// after lambda): sigma_alpha2 gives (0, m), sigma_eps2_j gives (1, 1) on cells
// of category j.
inline bool omega_derivative(const CellStats& c, int i, double& dp, double& ds) {
  if (i == 0) {
    dp = 0.0;
    ds = c.m;
    return true;
  }
  if (i == c.j) {
    dp = 1.0;
    ds = 1.0;
    return true;
  }
  dp = ds = 0.0;
  return false;
}

}  // namespace detail

inline double log_likelihood(const Cells& cs, const Delta& delta) {
  check_admissible(delta.theta);
  double ll = -0.5 * cs.N * std::log(2.0 * std::numbers::pi);
  for (const auto& c : cs.cells) {
    const auto ct = detail::cell_terms(c, delta.theta, delta.beta);
    const double logdet = 2.0 * block_logdet(ct.S) + block_logdet(ct.Oinv);
    const double quad = ct.Oinv.p * ct.A + ct.Oinv.s * c.m * ct.B;
    ll += 0.5 * c.count * logdet - 0.5 * quad;
  }
  return ll;
}

inline double log_likelihood(const Dataset& d, const Delta& delta) {
  return log_likelihood(summarize(d), delta);
}

inline constexpr double kCollinearityCond = 1e12;

// Condition number of a symmetric positive semidefinite matrix.
inline double sym_condition(const Eigen::MatrixXd& M) {
  Eigen::SelfAdjointEigenSolver<Eigen::MatrixXd> es(M, Eigen::EigenvaluesOnly);
  const auto& ev = es.eigenvalues();
  const double lo = ev.minCoeff(), hi = ev.maxCoeff();
  if (!(lo > 0.0)) return std::numeric_limits<double>::infinity();
  return hi / lo;
}

inline Eigen::VectorXd beta_gls(const Cells& cs, const Theta& t) {
  check_admissible(t);
  Eigen::MatrixXd ZOZ = Eigen::MatrixXd::Zero(cs.k, cs.k);
  Eigen::VectorXd ZOY = Eigen::VectorXd::Zero(cs.k);
  for (const auto& c : cs.cells) {
    const GroupBlock S = structural_block(c.m, t.lambda);
    const GroupBlock Oi = block_inv(omega_block(c.m, t.sigma_eps2(c.j - 1), t.sigma_alpha2));
    ZOZ += Oi.p * c.zz_w + Oi.s * c.m * c.zz_b;
    ZOY += Oi.p * S.p * c.zy_w + Oi.s * c.m * S.s * c.zy_b;
  }
  const double cond = sym_condition(ZOZ);
  if (!(cond <= kCollinearityCond)) {
    fail(ErrorKind::collinearity,
         "collinear regressors: condition number of Z'Omega^-1 Z is " + std::to_string(cond));
  }
  return ZOZ.ldlt().solve(ZOY);
}

inline Eigen::VectorXd beta_gls(const Dataset& d, const Theta& t) {
  return beta_gls(summarize(d), t);
}

inline double concentrated_loglik(const Cells& cs, const Theta& t) {
  return log_likelihood(cs, Delta{t, beta_gls(cs, t)}) / cs.N;
}

inline double concentrated_loglik(const Dataset& d, const Theta& t) {
  return concentrated_loglik(summarize(d), t);
}

inline Eigen::VectorXd score(const Cells& cs, const Delta& delta) {
  check_admissible(delta.theta);
  const int J = cs.J, k = cs.k;
  Eigen::VectorXd g = Eigen::VectorXd::Zero(delta_dim(J, k));
  for (const auto& c : cs.cells) {
    const auto ct = detail::cell_terms(c, delta.theta, delta.beta);
    const double pO = ct.Oinv.p, sO = ct.Oinv.s;
    const GroupBlock SiW = block_mul(block_inv(ct.S), ct.W);
    // -tr[(I - lambda W)^-1 W] + u' Omega^-1 W Y
    g(0) += -c.count * block_trace(SiW) + pO * ct.W.p * ct.Cw + sO * c.m * ct.W.s * ct.Cb;
    for (int i = 0; i <= J; ++i) {
      double dp, ds;
      if (!detail::omega_derivative(c, i, dp, ds)) continue;
      const double tr = (c.m - 1) * pO * dp + sO * ds;
      const double quad = pO * pO * dp * ct.A + sO * sO * ds * c.m * ct.B;
      g(1 + i) += -0.5 * c.count * tr + 0.5 * quad;
    }
    g.tail(k) += pO * ct.gw + sO * c.m * ct.gb;
  }
  return g;
}

inline Eigen::VectorXd score(const Dataset& d, const Delta& delta) {
  return score(summarize(d), delta);
}

inline Eigen::MatrixXd hessian(const Cells& cs, const Delta& delta) {
  check_admissible(delta.theta);
  const int J = cs.J, k = cs.k;
  const int P = delta_dim(J, k), b0 = 2 + J;
  Eigen::MatrixXd H = Eigen::MatrixXd::Zero(P, P);
  for (const auto& c : cs.cells) {
    const auto ct = detail::cell_terms(c, delta.theta, delta.beta);
    const double pO = ct.Oinv.p, sO = ct.Oinv.s;
    const double pW = ct.W.p, sW = ct.W.s;
    const GroupBlock SiW = block_mul(block_inv(ct.S), ct.W);
    // -tr[(I - lambda W)^-2 W^2] - Y'W' Omega^-1 W Y
    H(0, 0) += -c.count * block_trace(block_mul(SiW, SiW)) -
               (pO * pW * pW * c.yy + sO * c.m * sW * sW * c.ybar2);
    // -Z' Omega^-1 W Y
    H.block(b0, 0, k, 1) -= pO * pW * c.zy_w + sO * c.m * sW * c.zy_b;
    H.block(b0, b0, k, k) -= pO * c.zz_w + sO * c.m * c.zz_b;
    for (int i = 0; i <= J; ++i) {
      double dpi, dsi;
      if (!detail::omega_derivative(c, i, dpi, dsi)) continue;
      // -u' Omega^-1 Omega_i Omega^-1 W Y
      H(1 + i, 0) -= pO * pO * dpi * pW * ct.Cw + sO * sO * dsi * c.m * sW * ct.Cb;
      // -Z' Omega^-1 Omega_i Omega^-1 u
      H.block(b0, 1 + i, k, 1) -= pO * pO * dpi * ct.gw + sO * sO * dsi * c.m * ct.gb;
      for (int l = 0; l <= i; ++l) {
        double dpl, dsl;
        if (!detail::omega_derivative(c, l, dpl, dsl)) continue;
        const double tr = (c.m - 1) * pO * pO * dpi * dpl + sO * sO * dsi * dsl;
        const double quad = pO * pO * pO * dpi * dpl * ct.A + sO * sO * sO * dsi * dsl * c.m * ct.B;
        H(1 + i, 1 + l) += 0.5 * c.count * tr - quad;
      }
    }
  }
  H.triangularView<Eigen::StrictlyUpper>() = H.transpose().triangularView<Eigen::StrictlyUpper>();
  return H;
}

inline Eigen::MatrixXd hessian(const Dataset& d, const Delta& delta) {
  return hessian(summarize(d), delta);
}

// Hessian of N * Q_N(theta): the theta block of the full Hessian at
// beta_gls(theta) with the beta directions profiled out.
inline Eigen::MatrixXd concentrated_hessian(const Cells& cs, const Delta& delta) {
  const Eigen::MatrixXd H = hessian(cs, delta);
  const int t = theta_dim(cs.J), k = cs.k;
  const Eigen::MatrixXd Htb = H.block(0, t, t, k);
  return H.topLeftCorner(t, t) - Htb * H.bottomRightCorner(k, k).ldlt().solve(Htb.transpose());
}

inline MomentVector moment_chi(const GroupData& g, const Delta& delta) {
  const WithinBetween wb = within_between(g);
  const Theta& t = delta.theta;
  const double s2 = t.sigma_eps2(g.category - 1);
  const Eigen::VectorXd uw = (g.m - 1 + t.lambda) / (g.m - 1) * wb.y_dot - wb.z_dot * delta.beta;
  const double ub = (1.0 - t.lambda) * wb.y_bar - wb.z_bar.dot(delta.beta);
  MomentVector mv;
  mv.chi_w = uw.squaredNorm() - (g.m - 1) * s2;
  mv.chi_b = ub * ub - t.sigma_alpha2 - s2 / g.m;
  mv.chi_zw = wb.z_dot.transpose() * uw;
  mv.chi_zb = wb.z_bar.transpose() * ub;
  return mv;
}

// Weight phi(m, j) with d lnL_r / d delta = -phi(m_r, D_r) chi_r.
inline Eigen::MatrixXd optimal_weight_phi(int m, int j, const Delta& delta) {
  const Theta& t = delta.theta;
  const int J = static_cast<int>(t.sigma_eps2.size());
  const int k = static_cast<int>(delta.beta.size());
  const double s2 = t.sigma_eps2(j - 1);
  const double psi = s2 + m * t.sigma_alpha2;
  const double lam = t.lambda;
  Eigen::MatrixXd phi = Eigen::MatrixXd::Zero(delta_dim(J, k), 2 + 2 * k);
  phi(0, 0) = 1.0 / ((m - 1 + lam) * s2);
  phi(0, 1) = -m / ((1.0 - lam) * psi);
  phi.block(0, 2, 1, k) = delta.beta.transpose() / ((m - 1 + lam) * s2);
  phi.block(0, 2 + k, 1, k) = -m * delta.beta.transpose() / ((1.0 - lam) * psi);
  phi(1, 1) = -m * m / (2.0 * psi * psi);
  phi(1 + j, 0) = -1.0 / (2.0 * s2 * s2);
  phi(1 + j, 1) = -m / (2.0 * psi * psi);
  phi.block(2 + J, 2, k, k) = -Eigen::MatrixXd::Identity(k, k) / s2;
  phi.block(2 + J, 2 + k, k, k) = -Eigen::MatrixXd::Identity(k, k) * (m / psi);
  return phi;
}

// nu = (1-lambda)^2 ybar^2 - sigma_alpha2 - (m-1+lambda)^2 Y''Y'' / (m (m-1)^3)
inline double moment_nu(const GroupData& g, const Theta& t) {
  const WithinBetween wb = within_between(g);
  const double a = g.m - 1;
  const double sb = 1.0 - t.lambda, sw = a + t.lambda;
  return sb * sb * wb.y_bar * wb.y_bar - t.sigma_alpha2 -
         sw * sw * wb.y_dot.squaredNorm() / (g.m * a * a * a);
}

}  // namespace peerqml
