#pragma once

// Residual-based higher moments, the information and outer-product matrices
// Gamma and Upsilon built from phi(m, j), the sandwich covariance and Wald tests.

#include <cmath>
#include <limits>
#include <sstream>
#include <string>
#include <vector>

#include <Eigen/Dense>

#include "blockalg.hpp"
#include "errors.hpp"
#include "estimate.hpp"
#include "likelihood.hpp"
#include "model.hpp"

namespace peerqml {

struct GroupResidual {
  double u_bar = 0.0;
  Eigen::VectorXd u_dot;
};

struct HigherMoments {
  double mu3_alpha = 0.0;
  double mu4_alpha = 0.0;
  Eigen::VectorXd mu3_eps;
  Eigen::VectorXd mu4_eps;
};

struct VcovResult {
  Eigen::MatrixXd gamma_hat;
  Eigen::MatrixXd upsilon_hat;
  Eigen::MatrixXd sandwich;
  HigherMoments moments;
  std::vector<std::string> warnings;
};

struct WaldResult {
  double stat = 0.0;
  double pvalue = 1.0;
  bool reject05 = false;
};

// u_r = (I - lambda W) Y_r - Z_r beta
inline std::vector<GroupResidual> residuals(const Dataset& d, const Delta& delta) {
  check_admissible(delta.theta);
  std::vector<GroupResidual> out;
  out.reserve(d.R);
  for (const auto& g : d.groups) {
    const Eigen::VectorXd u =
        block_apply(structural_block(g.m, delta.theta.lambda), g.y) - g.z * delta.beta;
    GroupResidual gr;
    gr.u_bar = u.mean();
    gr.u_dot = (u.array() - gr.u_bar).matrix();
    out.push_back(std::move(gr));
  }
  return out;
}

inline HigherMoments estimate_moments34(const Dataset& d, const Delta& delta) {
  const auto res = residuals(d, delta);
  const int J = d.J;
  const double sa2 = delta.theta.sigma_alpha2;
  HigherMoments hm;
  hm.mu3_eps = Eigen::VectorXd::Zero(J);
  hm.mu4_eps = Eigen::VectorXd::Zero(J);
  Eigen::VectorXi count = Eigen::VectorXi::Zero(J);
  std::vector<double> fe3(d.R), fe4(d.R);
  for (int r = 0; r < d.R; ++r) {
    const auto& g = d.groups[r];
    const auto& e = res[r];
    const double m = g.m;
    const double ub = e.u_bar;
    const Eigen::ArrayXd ud = e.u_dot.array();
    if (g.m >= 3) {
      fe3[r] = ud.cube().mean() / (1.0 - 3.0 / m + 2.0 / (m * m));
    } else {
      fe3[r] = (ud.square() * ub).mean() / (1.0 / m - 1.0 / (m * m));
    }
    const double s2 = delta.theta.sigma_eps2(g.category - 1);
    const double m3 = m * m * m;
    fe4[r] = m3 / (m3 - 4.0 * m * m + 6.0 * m - 3.0) *
             (ud.square().square().mean() - 3.0 * (m - 1.0) * (2.0 * m - 3.0) * s2 * s2 / m3);
    hm.mu3_eps(g.category - 1) += fe3[r];
    hm.mu4_eps(g.category - 1) += fe4[r];
    ++count(g.category - 1);
  }
  for (int j = 0; j < J; ++j) {
    if (count(j) > 0) {
      hm.mu3_eps(j) /= count(j);
      hm.mu4_eps(j) /= count(j);
    }
  }
  for (int r = 0; r < d.R; ++r) {
    const auto& g = d.groups[r];
    const double m = g.m, ub = res[r].u_bar;
    const double s2 = delta.theta.sigma_eps2(g.category - 1);
    hm.mu3_alpha += ub * ub * ub - fe3[r] / (m * m);
    hm.mu4_alpha += ub * ub * ub * ub - fe4[r] / (m * m * m) -
                    3.0 * (m - 1.0) * s2 * s2 / (m * m * m) - 6.0 * sa2 * s2 / m;
  }
  hm.mu3_alpha /= d.R;
  hm.mu4_alpha /= d.R;
  return hm;
}

inline HigherMoments gaussian_moments(const Theta& t) {
  HigherMoments hm;
  hm.mu3_alpha = 0.0;
  hm.mu4_alpha = 3.0 * t.sigma_alpha2 * t.sigma_alpha2;
  hm.mu3_eps = Eigen::VectorXd::Zero(t.sigma_eps2.size());
  hm.mu4_eps = 3.0 * t.sigma_eps2.array().square().matrix();
  return hm;
}

namespace detail {

// Psi(m, j): covariance of chi_r summed over the cell and divided by N. The
// Gaussian version drops the excess-kurtosis and third-moment terms.
inline Eigen::MatrixXd cell_psi(const CellStats& c, int N, const Theta& t,
                                const HigherMoments* hm) {
  const int k = static_cast<int>(c.zy_w.size());
  const double m = c.m;
  const double s2 = t.sigma_eps2(c.j - 1);
  const double vb = t.sigma_alpha2 + s2 / m;
  const double w = static_cast<double>(c.count) / N;
  Eigen::MatrixXd psi = Eigen::MatrixXd::Zero(2 + 2 * k, 2 + 2 * k);
  psi(0, 0) = 2.0 * (m - 1.0) * s2 * s2 * w;
  psi(1, 1) = 2.0 * vb * vb * w;
  psi.block(2, 2, k, k) = s2 * c.zz_w / N;
  psi.block(2 + k, 2 + k, k, k) = vb * c.zz_b / N;
  if (hm != nullptr) {
    const double ke = hm->mu4_eps(c.j - 1) - 3.0 * s2 * s2;
    const double ka = hm->mu4_alpha - 3.0 * t.sigma_alpha2 * t.sigma_alpha2;
    psi(0, 0) += ke * w * (m - 1.0) * (m - 1.0) / m;
    psi(0, 1) += ke * w * (m - 1.0) / (m * m);
    psi(1, 0) = psi(0, 1);
    psi(1, 1) += ka * w + ke * w / (m * m * m);
    const Eigen::VectorXd zbar = c.zbar_sum / N;
    const double m3e = hm->mu3_eps(c.j - 1);
    psi.block(2 + k, 0, k, 1) = (m - 1.0) / m * m3e * zbar;
    psi.block(2 + k, 1, k, 1) = (hm->mu3_alpha + m3e / (m * m)) * zbar;
    psi.block(0, 2 + k, 1, k) = psi.block(2 + k, 0, k, 1).transpose();
    psi.block(1, 2 + k, 1, k) = psi.block(2 + k, 1, k, 1).transpose();
  }
  return psi;
}

inline Eigen::MatrixXd assemble(const Cells& cs, const Delta& delta, const HigherMoments* hm) {
  check_admissible(delta.theta);
  const int P = delta_dim(cs.J, cs.k);
  Eigen::MatrixXd M = Eigen::MatrixXd::Zero(P, P);
  for (const auto& c : cs.cells) {
    const Eigen::MatrixXd phi = optimal_weight_phi(c.m, c.j, delta);
    M += phi * cell_psi(c, cs.N, delta.theta, hm) * phi.transpose();
  }
  return 0.5 * (M + M.transpose());
}

}  // namespace detail

inline Eigen::MatrixXd gamma_hat(const Cells& cs, const Delta& delta) {
  return detail::assemble(cs, delta, nullptr);
}

inline Eigen::MatrixXd gamma_hat(const Dataset& d, const Delta& delta) {
  return gamma_hat(summarize(d), delta);
}

inline Eigen::MatrixXd upsilon_hat(const Cells& cs, const Delta& delta, const HigherMoments& hm) {
  return detail::assemble(cs, delta, &hm);
}

inline Eigen::MatrixXd upsilon_hat(const Dataset& d, const Delta& delta, const HigherMoments& hm) {
  return upsilon_hat(summarize(d), delta, hm);
}

// Messages for categories violating mu4 - sigma^4 > mu3^2 / sigma^2.
inline std::vector<std::string> upsilon_pd_warnings(const Theta& t, const HigherMoments& hm) {
  std::vector<std::string> out;
  for (int j = 0; j < t.sigma_eps2.size(); ++j) {
    const double s2 = t.sigma_eps2(j);
    if (!(hm.mu4_eps(j) - s2 * s2 > hm.mu3_eps(j) * hm.mu3_eps(j) / s2)) {
      std::ostringstream os;
      os << "positive-definiteness condition for Upsilon fails in category " << j + 1
         << ": mu4 - sigma^4 <= mu3^2 / sigma^2, Upsilon may be singular";
      out.push_back(os.str());
    }
  }
  return out;
}

inline constexpr double kSingularInfoCond = 1e14;

inline VcovResult sandwich_vcov(const Dataset& d, const Delta& delta) {
  const Cells cs = summarize(d);
  VcovResult v;
  v.moments = estimate_moments34(d, delta);
  v.gamma_hat = gamma_hat(cs, delta);
  v.upsilon_hat = upsilon_hat(cs, delta, v.moments);
  v.warnings = upsilon_pd_warnings(delta.theta, v.moments);
  if (!(sym_condition(v.gamma_hat) <= kSingularInfoCond)) {
    fail(ErrorKind::singular_information, "estimated information matrix Gamma is singular");
  }
  const Eigen::LDLT<Eigen::MatrixXd> ldlt(v.gamma_hat);
  const Eigen::MatrixXd Gi = ldlt.solve(Eigen::MatrixXd::Identity(v.gamma_hat.rows(), v.gamma_hat.cols()));
  Eigen::MatrixXd S = Gi * v.upsilon_hat * Gi / cs.N;
  v.sandwich = 0.5 * (S + S.transpose());
  for (int i = 0; i < v.sandwich.rows(); ++i) {
    if (!(v.sandwich(i, i) > 0.0)) {
      fail(ErrorKind::singular_information,
           "sandwich covariance has a nonpositive diagonal entry at index " + std::to_string(i));
    }
  }
  return v;
}

inline WaldResult wald_test(const Estimate& e, int index, double null_value) {
  if (index < 0 || index >= e.vcov.rows()) {
    fail(ErrorKind::dimension, "wald_test: coordinate out of range");
  }
  const double var = e.vcov(index, index);
  if (!(var > 0.0) || !std::isfinite(var)) {
    fail(ErrorKind::degenerate_test, "wald_test: zero or undefined variance");
  }
  const double diff = to_vector(e.delta)(index) - null_value;
  WaldResult w;
  w.stat = diff * diff / var;
  w.pvalue = std::erfc(std::sqrt(0.5 * w.stat));
  w.reject05 = w.pvalue < 0.05;
  return w;
}

}  // namespace peerqml
