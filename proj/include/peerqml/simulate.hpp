#pragma once

// Data generating processes of the Monte Carlo designs.

#include <cmath>
#include <cstdint>
#include <numbers>
#include <sstream>
#include <iomanip>
#include <string>
#include <vector>

#include <Eigen/Dense>

#include "errors.hpp"
#include "likelihood.hpp"
#include "model.hpp"
#include "rng.hpp"

namespace peerqml {

enum class SizeDist { uniform_discrete, fixed };
enum class CategoryRule { random_equal_split, by_size };
enum class XMode { x1_eq_x2, x1_neq_x2 };
enum class ErrorDist { normal, skew_normal, student_t6 };

struct Design {
  int R = 100;
  SizeDist size_dist = SizeDist::uniform_discrete;
  int size_lo = 2, size_hi = 6;  // uniform_discrete bounds
  int size_fixed = 4;            // fixed(m)
  int J = 1;
  CategoryRule category_rule = CategoryRule::random_equal_split;
  int size_threshold = 4;        // by_size: category 1 when m >= threshold, else 2
  XMode x_mode = XMode::x1_neq_x2;
  ErrorDist error_dist = ErrorDist::normal;
  std::vector<double> sigma_eps2_by_category{1.0};
  double sigma_alpha2 = 0.25;
  double lambda = 0.5;
  std::vector<double> beta{1.0, 1.0, 1.0, 1.0};  // (const, x1, peer mean of x2, x3)
  bool freeze_z = false;
  int max_group_size = 10000;
  bool covariates = true;  // false: intercept-only simple model, beta has one entry
};

struct SimResult {
  Dataset dataset;
  Delta truth;
};

inline void validate_design(const Design& d) {
  auto bad = [](const std::string& msg) { fail(ErrorKind::schema, "design: " + msg); };
  if (d.R < 1) bad("R must be >= 1");
  if (d.size_dist == SizeDist::uniform_discrete) {
    if (!(2 <= d.size_lo && d.size_lo <= d.size_hi && d.size_hi <= d.max_group_size)) {
      bad("uniform_discrete bounds must satisfy 2 <= lo <= hi <= max_group_size");
    }
  } else if (d.size_fixed < 2 || d.size_fixed > d.max_group_size) {
    bad("fixed size must lie in [2, max_group_size]");
  }
  if (d.J < 1) bad("J must be >= 1");
  if (static_cast<int>(d.sigma_eps2_by_category.size()) != d.J) {
    bad("sigma_eps2_by_category must have J entries");
  }
  for (double s : d.sigma_eps2_by_category) {
    if (!(s > 0.0)) bad("sigma_eps2_by_category entries must be positive");
  }
  if (!(d.sigma_alpha2 >= 0.0)) bad("sigma_alpha2 must be >= 0");
  if (!(d.lambda > -1.0 && d.lambda < 1.0)) bad("lambda must lie in (-1, 1)");
  if (d.covariates && d.beta.size() != 4) bad("beta must have 4 entries (const, x1, x2 peer mean, x3)");
  if (!d.covariates && d.beta.size() != 1) bad("beta must have 1 entry (const) without covariates");
  if (d.category_rule == CategoryRule::by_size && d.J != 2) bad("by_size requires J = 2");
}

inline Delta design_truth(const Design& d) {
  Delta t;
  t.theta.lambda = d.lambda;
  t.theta.sigma_alpha2 = d.sigma_alpha2;
  t.theta.sigma_eps2 = Eigen::Map<const Eigen::VectorXd>(d.sigma_eps2_by_category.data(), d.J);
  t.beta = Eigen::Map<const Eigen::VectorXd>(d.beta.data(), static_cast<Eigen::Index>(d.beta.size()));
  return t;
}

// Skew-normal with shape 0.9/sqrt(1-0.9^2), standardised by its analytic moments.
inline double skew_normal_deviate(Rng& rng) {
  constexpr double delta = 0.9;
  const double z1 = rng.normal(), z2 = rng.normal();
  const double x = delta * std::abs(z1) + std::sqrt(1.0 - delta * delta) * z2;
  const double mean = delta * std::sqrt(2.0 / std::numbers::pi);
  const double var = 1.0 - 2.0 * delta * delta / std::numbers::pi;
  return (x - mean) / std::sqrt(var);
}

// Student t with 6 degrees of freedom scaled to unit variance.
inline double student_t6_deviate(Rng& rng) {
  const double z = rng.normal();
  const double chi2 = -2.0 * std::log(rng.uniform_pos() * rng.uniform_pos() * rng.uniform_pos());
  return z / std::sqrt(chi2 / 6.0) / std::sqrt(6.0 / 4.0);
}

inline Eigen::VectorXd draw_skew_normal(int n, Rng& rng) {
  Eigen::VectorXd v(n);
  for (int i = 0; i < n; ++i) v(i) = skew_normal_deviate(rng);
  return v;
}

inline Eigen::VectorXd draw_student_t6(int n, Rng& rng) {
  Eigen::VectorXd v(n);
  for (int i = 0; i < n; ++i) v(i) = student_t6_deviate(rng);
  return v;
}

inline double standard_deviate(ErrorDist dist, Rng& rng) {
  switch (dist) {
    case ErrorDist::normal: return rng.normal();
    case ErrorDist::skew_normal: return skew_normal_deviate(rng);
    case ErrorDist::student_t6: return student_t6_deviate(rng);
  }
  return 0.0;
}

inline std::string group_id(int r, int R) {
  int width = 6;
  for (int x = R; x >= 1000000; x /= 10) ++width;
  std::ostringstream os;
  os << 'g' << std::setw(width) << std::setfill('0') << r;
  return os.str();
}

inline constexpr std::uint64_t kCategoryStream = 0xFFFFFFFFFFFFFFFFULL;

// Covariates, sizes and categories are drawn from z_seed; disturbances from
// seed. Passing z_seed == seed redraws everything from one seed.
inline SimResult gen_dataset(const Design& design, std::uint64_t seed, std::uint64_t z_seed) {
  validate_design(design);
  const int R = design.R;
  SimResult out;
  out.truth = design_truth(design);
  Dataset& d = out.dataset;
  d.J = design.J;
  d.max_group_size = design.max_group_size;
  const int kx = design.covariates ? 1 : 0;
  if (design.covariates) {
    d.x1_names = {"x1_1"};
    d.x2_names = {"x2_1"};
    d.x3_names = {"x3_1"};
  }
  d.groups.resize(R);

  for (int r = 0; r < R; ++r) {
    Rng cov(substream(substream(z_seed, r), 0));
    GroupData& g = d.groups[r];
    g.id = group_id(r, R);
    g.m = design.size_dist == SizeDist::fixed
              ? design.size_fixed
              : cov.uniform_int(design.size_lo, design.size_hi);
    g.x1.resize(g.m, kx);
    g.x2.resize(g.m, kx);
    g.x3.resize(g.m, kx);
    if (!design.covariates) continue;
    for (int i = 0; i < g.m; ++i) g.x1(i, 0) = cov.normal();
    if (design.x_mode == XMode::x1_eq_x2) {
      g.x2 = g.x1;
    } else {
      for (int i = 0; i < g.m; ++i) g.x2(i, 0) = cov.normal();
    }
    g.x3.setConstant(cov.normal());
  }

  if (design.category_rule == CategoryRule::by_size) {
    for (auto& g : d.groups) g.category = g.m >= design.size_threshold ? 1 : 2;
  } else {
    std::vector<int> order(R);
    for (int r = 0; r < R; ++r) order[r] = r;
    Rng shuffle(substream(z_seed, kCategoryStream));
    for (int r = R - 1; r > 0; --r) std::swap(order[r], order[shuffle.uniform_int(0, r)]);
    for (int pos = 0; pos < R; ++pos) d.groups[order[pos]].category = pos % design.J + 1;
  }

  const double lam = design.lambda;
  const Eigen::VectorXd& beta = out.truth.beta;
  for (int r = 0; r < R; ++r) {
    GroupData& g = d.groups[r];
    Rng err(substream(substream(seed, r), 1));
    const double sa = std::sqrt(design.sigma_alpha2);
    const double se = std::sqrt(design.sigma_eps2_by_category[g.category - 1]);
    const double alpha = sa * standard_deviate(design.error_dist, err);
    Eigen::VectorXd u(g.m);
    for (int i = 0; i < g.m; ++i) u(i) = alpha + se * standard_deviate(design.error_dist, err);
    g.z = build_regressors(g.x1, g.x2, g.x3);
    const Eigen::VectorXd zb = g.z * beta;
    const Eigen::VectorXd v = zb + u;
    const double vbar = v.mean();
    const double ybar = vbar / (1.0 - lam);
    const double scale = (g.m - 1) / (g.m - 1 + lam);
    g.y = (scale * (v.array() - vbar) + ybar).matrix();
  }
  finalize_dataset(d);
  return out;
}

inline SimResult gen_dataset(const Design& design, std::uint64_t seed) {
  return gen_dataset(design, seed, seed);
}

}  // namespace peerqml
