#pragma once

// Closed-form algebra for m x m matrices of the form p I*_m + s J*_m with
// I*_m = I_m - ii'/m and J*_m = ii'/m.

#include <cmath>
#include <string>

#include <Eigen/Dense>

#include "errors.hpp"

namespace peerqml {

struct GroupBlock {
  int m = 2;
  double p = 1.0;
  double s = 1.0;

  bool operator==(const GroupBlock& o) const {
    return m == o.m && p == o.p && s == o.s;
  }
};

inline constexpr double kSingularBlockTol = 1e-300;

inline GroupBlock block_mul(const GroupBlock& a, const GroupBlock& b) {
  if (a.m != b.m) {
    fail(ErrorKind::dimension, "block_mul: size mismatch " +
                                   std::to_string(a.m) + " vs " +
                                   std::to_string(b.m));
  }
  return {a.m, a.p * b.p, a.s * b.s};
}

inline GroupBlock block_inv(const GroupBlock& a) {
  if (std::abs(a.p) < kSingularBlockTol || std::abs(a.s) < kSingularBlockTol) {
    fail(ErrorKind::singular_block, "block_inv: singular block");
  }
  return {a.m, 1.0 / a.p, 1.0 / a.s};
}

inline double block_logdet(const GroupBlock& a) {
  if (!(a.p > 0.0) || !(a.s > 0.0)) {
    fail(ErrorKind::domain, "block_logdet: nonpositive coefficient");
  }
  return (a.m - 1) * std::log(a.p) + std::log(a.s);
}

inline double block_trace(const GroupBlock& a) { return (a.m - 1) * a.p + a.s; }

// v'(p I* + s J*) w through the within/between split.
inline double block_quadform(const GroupBlock& a, const Eigen::VectorXd& v,
                             const Eigen::VectorXd& w) {
  if (v.size() != a.m || w.size() != a.m) {
    fail(ErrorKind::dimension, "block_quadform: length mismatch");
  }
  const double vbar = v.mean();
  const double wbar = w.mean();
  const Eigen::VectorXd vd = v.array() - vbar;
  const Eigen::VectorXd wd = w.array() - wbar;
  return a.p * vd.dot(wd) + a.s * a.m * vbar * wbar;
}

// (p I* + s J*) v
inline Eigen::VectorXd block_apply(const GroupBlock& a, const Eigen::VectorXd& v) {
  if (v.size() != a.m) fail(ErrorKind::dimension, "block_apply: length mismatch");
  const double vbar = v.mean();
  return (a.p * (v.array() - vbar) + a.s * vbar).matrix();
}

// I - lambda W with W = (ii' - I)/(m - 1).
inline GroupBlock structural_block(int m, double lambda) {
  if (m < 2) fail(ErrorKind::dimension, "structural_block: m < 2");
  if (!(lambda > -1.0 && lambda < 1.0)) {
    fail(ErrorKind::domain, "structural_block: lambda outside (-1, 1)");
  }
  return {m, (m - 1 + lambda) / (m - 1), 1.0 - lambda};
}

// W itself: off-diagonal entries 1/(m-1).
inline GroupBlock weight_block(int m) {
  if (m < 2) fail(ErrorKind::dimension, "weight_block: m < 2");
  return {m, -1.0 / (m - 1), 1.0};
}

// sigma_eps2 I + sigma_alpha2 ii'
inline GroupBlock omega_block(int m, double sigma_eps2, double sigma_alpha2) {
  if (m < 2) fail(ErrorKind::dimension, "omega_block: m < 2");
  if (!(sigma_eps2 > 0.0)) fail(ErrorKind::domain, "omega_block: sigma_eps2 <= 0");
  if (!(sigma_alpha2 >= 0.0)) fail(ErrorKind::domain, "omega_block: sigma_alpha2 < 0");
  return {m, sigma_eps2, sigma_eps2 + m * sigma_alpha2};
}

inline constexpr int kMaxDenseSize = 12;

inline Eigen::MatrixXd densify(const GroupBlock& a) {
  if (a.m > kMaxDenseSize) fail(ErrorKind::dimension, "densify: m above dense cap");
  const Eigen::MatrixXd J = Eigen::MatrixXd::Constant(a.m, a.m, 1.0 / a.m);
  const Eigen::MatrixXd I = Eigen::MatrixXd::Identity(a.m, a.m);
  return a.p * (I - J) + a.s * J;
}

// Inverse of densify for matrices in the family.
inline GroupBlock from_dense(const Eigen::MatrixXd& A) {
  const int m = static_cast<int>(A.rows());
  if (m < 2 || A.cols() != m) fail(ErrorKind::dimension, "from_dense: not square m >= 2");
  const double s = A.sum() / m;
  const double p = A.trace() - s;
  return {m, p / (m - 1), s};
}

}  // namespace peerqml
