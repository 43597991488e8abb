#pragma once

// QMLE with concentrated beta, Lee's within (conditional) MLE, and the
// conditional-variance Wald estimators of the simple model.

#include <algorithm>
#include <cmath>
#include <limits>
#include <map>
#include <numbers>
#include <string>
#include <vector>

#include <Eigen/Dense>

#include "blockalg.hpp"
#include "errors.hpp"
#include "estimate.hpp"
#include "inference.hpp"
#include "likelihood.hpp"
#include "model.hpp"
#include "optim.hpp"
#include "rng.hpp"

namespace peerqml {

struct FitOptions {
  int max_iter = 200;
  double grad_tol = 1e-6;  // sup-norm of the score over free coordinates
  int multistart = 5;
  double lambda_lo = -0.99, lambda_hi = 0.99;
  double sigma_eps2_lo = 1e-10, sigma_eps2_hi = 1e10;
  // Upper end of the CMLE lambda search; the within likelihood is finite for
  // every lambda above -(m_min - 1).
  double cmle_lambda_hi = 10.0;
  std::uint64_t seed = 1;
  bool force = false;  // fit even when the identification check fails
  bool require_vcov = true;  // false: keep the point estimate when the sandwich fails
};

class NonConvergenceError : public Error {
 public:
  NonConvergenceError(const std::string& what, Estimate best)
      : Error(ErrorKind::non_convergence, what), best_(std::move(best)) {}
  const Estimate& best() const { return best_; }

 private:
  Estimate best_;
};

inline void validate_fit_options(const FitOptions& o) {
  if (!(o.grad_tol > 0.0)) fail(ErrorKind::schema, "fit.grad_tol must be > 0");
  if (o.multistart < 1) fail(ErrorKind::schema, "fit.multistart must be >= 1");
  if (o.max_iter < 1) fail(ErrorKind::schema, "fit.max_iter must be >= 1");
  if (!(-1.0 < o.lambda_lo && o.lambda_lo < o.lambda_hi && o.lambda_hi < 1.0)) {
    fail(ErrorKind::schema, "fit.lambda_bounds must satisfy -1 < lo < hi < 1");
  }
  if (!(0.0 < o.sigma_eps2_lo && o.sigma_eps2_lo < o.sigma_eps2_hi)) {
    fail(ErrorKind::schema, "fit.sigma_eps2_bounds must satisfy 0 < lo < hi");
  }
  if (!(o.cmle_lambda_hi > o.lambda_lo)) {
    fail(ErrorKind::schema, "fit.cmle_lambda_hi must exceed the lower lambda bound");
  }
}

namespace detail {

inline double softplus(double x) { return x > 30.0 ? x : std::log1p(std::exp(x)); }
inline double softplus_inv(double y) {
  if (y <= 1e-300) return -700.0;
  return y > 30.0 ? y : std::log(std::expm1(y));
}
inline double sigmoid(double x) { return 1.0 / (1.0 + std::exp(-x)); }

// Smooth map from unconstrained xi to theta. When pinned, sigma_alpha2 is fixed
// at 0 and xi omits its coordinate.
struct ThetaMap {
  FitOptions opt;
  int J = 1;
  bool pinned = false;

  int dim() const { return (pinned ? 1 : 2) + J; }

  Theta theta(const Eigen::VectorXd& xi, Eigen::VectorXd* jac) const {
    const double c = 0.5 * (opt.lambda_lo + opt.lambda_hi);
    const double h = 0.5 * (opt.lambda_hi - opt.lambda_lo);
    Theta t;
    t.sigma_eps2.resize(J);
    Eigen::VectorXd dj(2 + J);
    const double th = std::tanh(xi(0));
    t.lambda = c + h * th;
    dj(0) = h * (1.0 - th * th);
    int o = 1;
    if (pinned) {
      t.sigma_alpha2 = 0.0;
      dj(1) = 0.0;
    } else {
      t.sigma_alpha2 = softplus(xi(1));
      dj(1) = sigmoid(xi(1));
      o = 2;
    }
    const double blo = std::log(opt.sigma_eps2_lo), bhi = std::log(opt.sigma_eps2_hi);
    for (int j = 0; j < J; ++j) {
      const double b = xi(o + j);
      const double bc = std::clamp(b, blo, bhi);
      t.sigma_eps2(j) = std::exp(bc);
      dj(2 + j) = (b == bc) ? t.sigma_eps2(j) : 0.0;
    }
    if (jac) *jac = dj;
    return t;
  }

  Eigen::VectorXd xi(const Theta& t) const {
    const double c = 0.5 * (opt.lambda_lo + opt.lambda_hi);
    const double h = 0.5 * (opt.lambda_hi - opt.lambda_lo);
    Eigen::VectorXd x(dim());
    x(0) = std::atanh(std::clamp((t.lambda - c) / h, -0.999999, 0.999999));
    int o = 1;
    if (!pinned) {
      x(1) = softplus_inv(t.sigma_alpha2);
      o = 2;
    }
    for (int j = 0; j < J; ++j) x(o + j) = std::log(t.sigma_eps2(j));
    return x;
  }

  // Free theta coordinates as indices into (lambda, sigma_alpha2, sigma_eps2...).
  std::vector<int> free_index() const {
    std::vector<int> f{0};
    if (!pinned) f.push_back(1);
    for (int j = 0; j < J; ++j) f.push_back(2 + j);
    return f;
  }
};

inline bool theta_inside(const Theta& t, const FitOptions& o, bool pinned) {
  if (!(t.lambda > o.lambda_lo && t.lambda < o.lambda_hi)) return false;
  if (!pinned && !(t.sigma_alpha2 >= 0.0)) return false;
  for (int j = 0; j < t.sigma_eps2.size(); ++j) {
    if (!(t.sigma_eps2(j) >= o.sigma_eps2_lo && t.sigma_eps2(j) <= o.sigma_eps2_hi)) return false;
  }
  return true;
}

struct LocalFit {
  Theta theta;
  double nq = -std::numeric_limits<double>::infinity();  // N * Q_N
  int iterations = 0;
  bool wants_negative_alpha = false;
};

inline double safe_nq(const Cells& cs, const Theta& t) {
  try {
    return concentrated_loglik(cs, t) * cs.N;
  } catch (const Error&) {
    return -std::numeric_limits<double>::infinity();
  }
}

// Newton iterations on N * Q_N over the free coordinates.
inline void newton_polish(const Cells& cs, const ThetaMap& map, LocalFit& lf) {
  const auto fr = map.free_index();
  const int nf = static_cast<int>(fr.size());
  for (int it = 0; it < 50; ++it) {
    Delta dl{lf.theta, beta_gls(cs, lf.theta)};
    const Eigen::VectorXd g = score(cs, dl);
    const Eigen::MatrixXd Hc = concentrated_hessian(cs, dl);
    Eigen::VectorXd gf(nf);
    Eigen::MatrixXd Hf(nf, nf);
    for (int a = 0; a < nf; ++a) {
      gf(a) = g(fr[a]);
      for (int b = 0; b < nf; ++b) Hf(a, b) = Hc(fr[a], fr[b]);
    }
    if (gf.lpNorm<Eigen::Infinity>() < 1e-3 * map.opt.grad_tol) break;
    const Eigen::LDLT<Eigen::MatrixXd> ldlt(-Hf);
    if (ldlt.info() != Eigen::Success || !ldlt.isPositive() ||
        (ldlt.vectorD().array() <= 0.0).any()) {
      break;
    }
    const Eigen::VectorXd step = ldlt.solve(gf);
    Eigen::VectorXd tv = theta_to_vector(lf.theta);
    double t = 1.0;
    if (!map.pinned && tv(1) + step(1) < 0.0) {
      lf.wants_negative_alpha = true;
      t = 0.5 * tv(1) / -step(1);
    }
    bool moved = false;
    for (int ls = 0; ls < 40; ++ls) {
      Eigen::VectorXd cand = tv;
      for (int a = 0; a < nf; ++a) cand(fr[a]) += t * step(a);
      const Theta tc = theta_from_vector(cand);
      if (theta_inside(tc, map.opt, map.pinned)) {
        const double nq = safe_nq(cs, tc);
        if (nq >= lf.nq - 1e-12 * std::max(1.0, std::abs(lf.nq))) {
          lf.theta = tc;
          lf.nq = std::max(nq, lf.nq);
          moved = true;
          break;
        }
      }
      t *= 0.5;
    }
    ++lf.iterations;
    if (!moved) break;
  }
}

inline LocalFit local_fit(const Cells& cs, const ThetaMap& map, const Theta& start) {
  Objective fg = [&](const Eigen::VectorXd& xi, Eigen::VectorXd& grad) {
    Eigen::VectorXd jac;
    const Theta t = map.theta(xi, &jac);
    try {
      const Delta dl{t, beta_gls(cs, t)};
      const double ll = log_likelihood(cs, dl);
      const Eigen::VectorXd g = score(cs, dl);
      const auto fr = map.free_index();
      grad.resize(map.dim());
      for (size_t a = 0; a < fr.size(); ++a) grad(a) = -g(fr[a]) * jac(fr[a]);
      return -ll;
    } catch (const Error&) {
      return std::numeric_limits<double>::infinity();
    }
  };
  BfgsOptions bo;
  bo.max_iter = map.opt.max_iter;
  bo.grad_tol = map.opt.grad_tol;
  const BfgsResult br = bfgs_minimize(fg, map.xi(start), bo);
  LocalFit lf;
  lf.iterations = br.iterations;
  if (!std::isfinite(br.f)) return lf;
  lf.theta = map.theta(br.x, nullptr);
  lf.nq = safe_nq(cs, lf.theta);
  if (std::isfinite(lf.nq)) newton_polish(cs, map, lf);
  return lf;
}

// Residual variance of the OLS fit of y on Z, used to scale starting values.
inline double ols_scale(const Cells& cs) {
  Theta t;
  t.lambda = 0.0;
  t.sigma_alpha2 = 0.0;
  t.sigma_eps2 = Eigen::VectorXd::Ones(cs.J);
  const Delta dl{t, beta_gls(cs, t)};
  double rss = 0.0;
  for (const auto& c : cs.cells) {
    const auto ct = cell_terms(c, t, dl.beta);
    rss += ct.A + c.m * ct.B;
  }
  return std::max(rss / cs.N, 1e-300);
}

}  // namespace detail

inline Estimate fit_qmle(const Dataset& d, const FitOptions& opts) {
  validate_fit_options(opts);
  if (!opts.force && !check_identification(d).identified) {
    fail(ErrorKind::identification,
         "the data do not satisfy the identification condition (no size variation within a "
         "category and no size shared by two categories)");
  }
  const Cells cs = summarize(d);
  const int J = d.J;
  const double v = detail::ols_scale(cs);

  detail::ThetaMap map{opts, J, false};
  std::vector<Theta> starts;
  Theta t0;
  t0.lambda = 0.0;
  t0.sigma_alpha2 = 0.2 * v;
  t0.sigma_eps2 = Eigen::VectorXd::Constant(J, std::clamp(0.8 * v, opts.sigma_eps2_lo, opts.sigma_eps2_hi));
  starts.push_back(t0);
  Rng rng(substream(opts.seed, 0));
  for (int s = 1; s < opts.multistart; ++s) {
    Theta t;
    t.lambda = 0.9 * (opts.lambda_lo + (opts.lambda_hi - opts.lambda_lo) * rng.uniform());
    t.sigma_alpha2 = v * rng.uniform();
    t.sigma_eps2.resize(J);
    for (int j = 0; j < J; ++j) {
      t.sigma_eps2(j) = std::clamp(v * (0.05 + 1.45 * rng.uniform()), opts.sigma_eps2_lo, opts.sigma_eps2_hi);
    }
    starts.push_back(t);
  }

  detail::LocalFit best;
  int total_iter = 0;
  for (const auto& st : starts) {
    detail::LocalFit lf = detail::local_fit(cs, map, st);
    total_iter += lf.iterations;
    if (lf.nq > best.nq) best = lf;
  }
  if (!std::isfinite(best.nq)) {
    Estimate e;
    e.estimator = "qmle";
    e.names = parameter_names(J, d.k_Z);
    throw NonConvergenceError("QMLE: no start produced a finite objective", e);
  }

  bool pinned = false;
  if (best.theta.sigma_alpha2 < 1e-4 * v || best.wants_negative_alpha) {
    detail::ThetaMap pmap{opts, J, true};
    Theta st = best.theta;
    st.sigma_alpha2 = 0.0;
    detail::LocalFit pf = detail::local_fit(cs, pmap, st);
    total_iter += pf.iterations;
    if (std::isfinite(pf.nq) && pf.nq >= best.nq - 1e-10 * std::max(1.0, std::abs(best.nq))) {
      best = pf;
      pinned = true;
    }
  }

  Estimate e;
  e.estimator = "qmle";
  e.names = parameter_names(J, d.k_Z);
  e.estimated.assign(e.names.size(), true);
  e.delta = Delta{best.theta, beta_gls(cs, best.theta)};
  e.loglik = log_likelihood(cs, e.delta);
  e.iterations = total_iter;
  e.boundary_sigma_alpha = e.delta.theta.sigma_alpha2 < 1e-10;
  Eigen::VectorXd g = score(cs, e.delta);
  if (pinned) g(1) = 0.0;
  e.converged = g.lpNorm<Eigen::Infinity>() < opts.grad_tol;
  if (e.boundary_sigma_alpha) {
    e.warnings.push_back("sigma_alpha2 estimate is on the boundary 0; Wald inference is nonstandard");
  }
  if (!e.converged) {
    e.vcov = Eigen::MatrixXd::Constant(e.names.size(), e.names.size(), std::numeric_limits<double>::quiet_NaN());
    e.std_err = Eigen::VectorXd::Constant(e.names.size(), std::numeric_limits<double>::quiet_NaN());
    throw NonConvergenceError("QMLE did not reach grad_tol after multistart", e);
  }
  try {
    const VcovResult vr = sandwich_vcov(d, e.delta);
    e.vcov = vr.sandwich;
    e.std_err = vr.sandwich.diagonal().array().sqrt().matrix();
    for (const auto& w : vr.warnings) e.warnings.push_back(w);
  } catch (const Error& err) {
    const bool keep = !opts.require_vcov || e.boundary_sigma_alpha;
    if (!keep || err.kind() != ErrorKind::singular_information) throw;
    const auto P = static_cast<Eigen::Index>(e.names.size());
    e.vcov = Eigen::MatrixXd::Constant(P, P, std::numeric_limits<double>::quiet_NaN());
    e.std_err = Eigen::VectorXd::Constant(P, std::numeric_limits<double>::quiet_NaN());
    e.warnings.push_back(err.what());
  }
  return e;
}

// Within-group likelihood over (lambda, sigma_eps2, beta_w) after removing
// regressors without within-group variation.
struct WithinModel {
  std::vector<int> kept;             // indices into Z columns
  std::vector<int> dropped;
  std::vector<int> sizes;            // distinct m
  std::vector<int> groups_of_size;   // R_m
  std::vector<double> yy;            // sum of Y''Y'' per size
  std::vector<Eigen::VectorXd> zy;   // sum of Z''_w' Y'' per size
  Eigen::MatrixXd A;                 // sum of Z''_w' Z''_w
  int N = 0, R = 0;
  double dof() const { return N - R; }
};

inline WithinModel build_within_model(const Dataset& d) {
  const Cells cs = summarize(d);
  const int k = d.k_Z;
  Eigen::MatrixXd A = Eigen::MatrixXd::Zero(k, k), T = Eigen::MatrixXd::Zero(k, k);
  for (const auto& c : cs.cells) {
    A += c.zz_w;
    T += c.zz_w + c.m * c.zz_b;
  }
  WithinModel wm;
  wm.N = d.N;
  wm.R = d.R;
  for (int col = 0; col < k; ++col) {
    if (!(A(col, col) > 1e-12 * std::max(T(col, col), 1e-300))) {
      wm.dropped.push_back(col);
      continue;
    }
    std::vector<int> trial = wm.kept;
    trial.push_back(col);
    Eigen::MatrixXd S(trial.size(), trial.size());
    for (size_t a = 0; a < trial.size(); ++a) {
      for (size_t b = 0; b < trial.size(); ++b) {
        S(a, b) = A(trial[a], trial[b]) / std::sqrt(A(trial[a], trial[a]) * A(trial[b], trial[b]));
      }
    }
    if (sym_condition(S) <= kCollinearityCond) {
      wm.kept = trial;
    } else {
      wm.dropped.push_back(col);
    }
  }
  std::sort(wm.dropped.begin(), wm.dropped.end());
  const int kw = static_cast<int>(wm.kept.size());
  wm.A.resize(kw, kw);
  for (int a = 0; a < kw; ++a) {
    for (int b = 0; b < kw; ++b) wm.A(a, b) = A(wm.kept[a], wm.kept[b]);
  }
  std::map<int, size_t> pos;
  for (const auto& c : cs.cells) {
    auto it = pos.find(c.m);
    if (it == pos.end()) {
      it = pos.emplace(c.m, wm.sizes.size()).first;
      wm.sizes.push_back(c.m);
      wm.groups_of_size.push_back(0);
      wm.yy.push_back(0.0);
      wm.zy.push_back(Eigen::VectorXd::Zero(kw));
    }
    const size_t p = it->second;
    wm.groups_of_size[p] += c.count;
    wm.yy[p] += c.yy;
    for (int a = 0; a < kw; ++a) wm.zy[p](a) += c.zy_w(wm.kept[a]);
  }
  return wm;
}

namespace detail {

// Q = sum ||phi_m Y'' - Z''_w beta||^2 with derivatives.
struct WithinQuad {
  double Q = 0.0, Ql = 0.0, Qll = 0.0;
  Eigen::VectorXd Qb, g1;
};

inline WithinQuad within_quad(const WithinModel& wm, double lambda, const Eigen::VectorXd& beta) {
  WithinQuad q;
  const int kw = static_cast<int>(beta.size());
  Eigen::VectorXd g = Eigen::VectorXd::Zero(kw);
  q.g1 = Eigen::VectorXd::Zero(kw);
  for (size_t p = 0; p < wm.sizes.size(); ++p) {
    const double a = wm.sizes[p] - 1;
    const double ph = 1.0 + lambda / a;
    const double bz = beta.dot(wm.zy[p]);
    q.Q += ph * ph * wm.yy[p] - 2.0 * ph * bz;
    q.Ql += 2.0 * ph * wm.yy[p] / a - 2.0 * bz / a;
    q.Qll += 2.0 * wm.yy[p] / (a * a);
    g += ph * wm.zy[p];
    q.g1 += wm.zy[p] / a;
  }
  const Eigen::VectorXd Ab = wm.A * beta;
  q.Q += beta.dot(Ab);
  q.Qb = -2.0 * g + 2.0 * Ab;
  return q;
}

inline double within_jacobian(const WithinModel& wm, double lambda, double* d1, double* d2) {
  double v = 0.0, a1 = 0.0, a2 = 0.0;
  for (size_t p = 0; p < wm.sizes.size(); ++p) {
    const double a = wm.sizes[p] - 1, n = wm.groups_of_size[p];
    v += n * a * std::log((a + lambda) / a);
    a1 += n * a / (a + lambda);
    a2 -= n * a / ((a + lambda) * (a + lambda));
  }
  if (d1) *d1 = a1;
  if (d2) *d2 = a2;
  return v;
}

}  // namespace detail

// Parameter vector (lambda, sigma_eps2, beta_w).
inline double within_loglik(const WithinModel& wm, const Eigen::VectorXd& par) {
  const double lam = par(0), s2 = par(1);
  const auto q = detail::within_quad(wm, lam, par.tail(par.size() - 2));
  const double K = wm.dof();
  return detail::within_jacobian(wm, lam, nullptr, nullptr) -
         0.5 * K * std::log(2.0 * std::numbers::pi * s2) - q.Q / (2.0 * s2);
}

inline Eigen::VectorXd within_score(const WithinModel& wm, const Eigen::VectorXd& par) {
  const double lam = par(0), s2 = par(1);
  const auto q = detail::within_quad(wm, lam, par.tail(par.size() - 2));
  double j1;
  detail::within_jacobian(wm, lam, &j1, nullptr);
  Eigen::VectorXd g(par.size());
  g(0) = j1 - q.Ql / (2.0 * s2);
  g(1) = -0.5 * wm.dof() / s2 + q.Q / (2.0 * s2 * s2);
  g.tail(par.size() - 2) = -q.Qb / (2.0 * s2);
  return g;
}

inline Eigen::MatrixXd within_hessian(const WithinModel& wm, const Eigen::VectorXd& par) {
  const double lam = par(0), s2 = par(1);
  const int kw = static_cast<int>(par.size()) - 2;
  const auto q = detail::within_quad(wm, lam, par.tail(kw));
  double j2;
  detail::within_jacobian(wm, lam, nullptr, &j2);
  Eigen::MatrixXd H(par.size(), par.size());
  H(0, 0) = j2 - q.Qll / (2.0 * s2);
  H(0, 1) = H(1, 0) = q.Ql / (2.0 * s2 * s2);
  H(1, 1) = 0.5 * wm.dof() / (s2 * s2) - q.Q / (s2 * s2 * s2);
  H.block(2, 0, kw, 1) = q.g1 / s2;
  H.block(0, 2, 1, kw) = (q.g1 / s2).transpose();
  H.block(2, 1, kw, 1) = q.Qb / (2.0 * s2 * s2);
  H.block(1, 2, 1, kw) = (q.Qb / (2.0 * s2 * s2)).transpose();
  H.block(2, 2, kw, kw) = -wm.A / s2;
  return H;
}

// Profile of the within likelihood in lambda, with beta_w and sigma_eps2 solved out.
struct WithinProfile {
  double value = 0.0, d1 = 0.0, d2 = 0.0;
  Eigen::VectorXd beta;
  double sigma2 = 0.0;
};

inline WithinProfile within_profile(const WithinModel& wm, const Eigen::LDLT<Eigen::MatrixXd>& Al,
                                    double lam) {
  const int kw = static_cast<int>(wm.A.rows());
  double yyp = 0.0, yyl = 0.0, yyll = 0.0;
  Eigen::VectorXd g0 = Eigen::VectorXd::Zero(kw), g1 = Eigen::VectorXd::Zero(kw);
  for (size_t p = 0; p < wm.sizes.size(); ++p) {
    const double a = wm.sizes[p] - 1, ph = 1.0 + lam / a;
    yyp += ph * ph * wm.yy[p];
    yyl += 2.0 * ph * wm.yy[p] / a;
    yyll += 2.0 * wm.yy[p] / (a * a);
    g0 += wm.zy[p];
    g1 += wm.zy[p] / a;
  }
  const Eigen::VectorXd g = g0 + lam * g1;
  WithinProfile pr;
  pr.beta = kw > 0 ? Eigen::VectorXd(Al.solve(g)) : Eigen::VectorXd();
  const Eigen::VectorXd Ag1 = kw > 0 ? Eigen::VectorXd(Al.solve(g1)) : Eigen::VectorXd();
  const double rss = yyp - (kw > 0 ? g.dot(pr.beta) : 0.0);
  const double rss1 = yyl - (kw > 0 ? 2.0 * g1.dot(pr.beta) : 0.0);
  const double rss2 = yyll - (kw > 0 ? 2.0 * g1.dot(Ag1) : 0.0);
  const double K = wm.dof();
  double j1, j2;
  const double jac = detail::within_jacobian(wm, lam, &j1, &j2);
  pr.sigma2 = rss / K;
  pr.value = jac - 0.5 * K * std::log(2.0 * std::numbers::pi * pr.sigma2) - 0.5 * K;
  pr.d1 = j1 - 0.5 * K * rss1 / rss;
  pr.d2 = j2 - 0.5 * K * (rss2 / rss - (rss1 / rss) * (rss1 / rss));
  return pr;
}

inline Estimate fit_cmle(const Dataset& d, const FitOptions& opts) {
  validate_fit_options(opts);
  const WithinModel wm = build_within_model(d);
  double wyy = 0.0;
  for (double v : wm.yy) wyy += v;
  if (!(wyy > 0.0)) fail(ErrorKind::collinearity, "CMLE: the outcome has no within-group variation");
  const Eigen::LDLT<Eigen::MatrixXd> Al(wm.A);

  const double lo = opts.lambda_lo, hi = opts.cmle_lambda_hi;
  const int grid = 400;
  double best_l = lo, best_v = -std::numeric_limits<double>::infinity();
  for (int i = 0; i <= grid; ++i) {
    const double l = lo + (hi - lo) * i / grid;
    const double v = within_profile(wm, Al, l).value;
    if (v > best_v) {
      best_v = v;
      best_l = l;
    }
  }
  // Golden-section refinement inside the neighbouring grid cells, then Newton.
  double a = std::max(lo, best_l - (hi - lo) / grid), b = std::min(hi, best_l + (hi - lo) / grid);
  const double gr = 0.5 * (std::sqrt(5.0) - 1.0);
  double x1 = b - gr * (b - a), x2 = a + gr * (b - a);
  double f1 = within_profile(wm, Al, x1).value, f2 = within_profile(wm, Al, x2).value;
  for (int it = 0; it < 80 && b - a > 1e-12; ++it) {
    if (f1 > f2) {
      b = x2; x2 = x1; f2 = f1; x1 = b - gr * (b - a); f1 = within_profile(wm, Al, x1).value;
    } else {
      a = x1; x1 = x2; f1 = f2; x2 = a + gr * (b - a); f2 = within_profile(wm, Al, x2).value;
    }
  }
  double lam = 0.5 * (a + b);
  int iters = grid + 80;
  for (int it = 0; it < 20; ++it) {
    const auto pr = within_profile(wm, Al, lam);
    if (!(pr.d2 < 0.0)) break;
    const double nl = lam - pr.d1 / pr.d2;
    if (!(nl > lo && nl < hi)) break;
    if (within_profile(wm, Al, nl).value < pr.value - 1e-12 * std::abs(pr.value)) break;
    lam = nl;
    ++iters;
    if (std::abs(pr.d1) < 1e-3 * opts.grad_tol) break;
  }
  const auto pr = within_profile(wm, Al, lam);
  const int kw = static_cast<int>(wm.kept.size());
  Eigen::VectorXd par(2 + kw);
  par << lam, pr.sigma2, pr.beta;

  const int J = d.J, k = d.k_Z, P = delta_dim(J, k);
  const double nan = std::numeric_limits<double>::quiet_NaN();
  Estimate e;
  e.estimator = "cmle";
  e.names = parameter_names(J, k);
  e.estimated.assign(P, false);
  e.estimated[0] = true;
  for (int j = 0; j < J; ++j) e.estimated[2 + j] = true;
  for (int c : wm.kept) e.estimated[2 + J + c] = true;
  for (int c : wm.dropped) e.dropped_columns.push_back(d.z_names[c]);
  e.delta.theta.lambda = lam;
  e.delta.theta.sigma_alpha2 = nan;
  e.delta.theta.sigma_eps2 = Eigen::VectorXd::Constant(J, pr.sigma2);
  e.delta.beta = Eigen::VectorXd::Constant(k, nan);
  for (int a2 = 0; a2 < kw; ++a2) e.delta.beta(wm.kept[a2]) = pr.beta(a2);
  e.loglik = within_loglik(wm, par);
  e.iterations = iters;
  e.converged = within_score(wm, par).lpNorm<Eigen::Infinity>() < opts.grad_tol &&
                lam > lo && lam < hi;
  if (J > 1) e.warnings.push_back("CMLE pools sigma_eps2 across categories");

  // Map (lambda, sigma2, beta_w) onto the full parameter layout.
  std::vector<int> idx{0};
  idx.push_back(-1);  // sigma_eps2, expanded to every category below
  for (int c : wm.kept) idx.push_back(2 + J + c);
  e.vcov = Eigen::MatrixXd::Constant(P, P, nan);
  e.std_err = Eigen::VectorXd::Constant(P, nan);
  const Eigen::MatrixXd nH = -within_hessian(wm, par);
  const Eigen::LDLT<Eigen::MatrixXd> hl(nH);
  if (hl.info() == Eigen::Success && hl.isPositive() && (hl.vectorD().array() > 0.0).all()) {
    const Eigen::MatrixXd V = hl.solve(Eigen::MatrixXd::Identity(nH.rows(), nH.cols()));
    auto expand = [&](int i) {
      std::vector<int> out;
      if (idx[i] >= 0) {
        out.push_back(idx[i]);
      } else {
        for (int j = 0; j < J; ++j) out.push_back(2 + j);
      }
      return out;
    };
    for (int i = 0; i < V.rows(); ++i) {
      for (int l = 0; l < V.cols(); ++l) {
        for (int pi : expand(i)) {
          for (int pl : expand(l)) e.vcov(pi, pl) = V(i, l);
        }
      }
    }
    for (int i = 0; i < P; ++i) {
      if (e.estimated[i]) e.std_err(i) = std::sqrt(e.vcov(i, i));
    }
  } else {
    e.warnings.push_back("CMLE information matrix is not positive definite");
  }
  if (!e.converged) throw NonConvergenceError("CMLE did not reach grad_tol", e);
  return e;
}

// Population or sample moments of one (size, category) cell of the simple model.
struct CvCell {
  int m = 2;
  int j = 1;
  int count = 1;
  double mean_ybar2 = 0.0;  // E[(ybar - mu)^2]
  double mean_yy = 0.0;     // E[Y''Y'']
};

enum class CvSpec { leave_out_mean, full_mean };

struct CvResult {
  double lambda = 0.0;
  double sigma_alpha2 = 0.0;
};

inline constexpr double kWeakIdentTol = 1e-10;

inline CvResult fit_graham_cv(const std::vector<CvCell>& cells, CvSpec spec) {
  std::map<int, std::map<int, const CvCell*>> by_size;
  for (const auto& c : cells) {
    if (c.j != 1 && c.j != 2) fail(ErrorKind::category, "CV estimator requires categories 1 and 2");
    by_size[c.m][c.j] = &c;
  }
  struct Contrast {
    int m;
    double w, num, dv;
  };
  std::vector<Contrast> cons;
  for (const auto& [m, cats] : by_size) {
    if (cats.size() < 2) continue;
    const CvCell& c1 = *cats.at(1);
    const CvCell& c2 = *cats.at(2);
    cons.push_back({m, double(c1.count) * c2.count / (c1.count + c2.count),
                    c1.mean_ybar2 - c2.mean_ybar2, c1.mean_yy - c2.mean_yy});
  }
  if (cons.empty()) {
    fail(ErrorKind::weak_identification, "CV estimator: no group size appears in both categories");
  }
  CvResult res;
  double ntot = 0.0;
  for (const auto& c : cells) ntot += c.count;
  if (spec == CvSpec::leave_out_mean) {
    double dmax = 0.0;
    for (const auto& c : cons) {
      const double a = c.m - 1;
      dmax = std::max(dmax, std::abs(c.dv / (c.m * a * a * a)));
    }
    if (dmax < kWeakIdentTol) {
      fail(ErrorKind::weak_identification, "CV estimator: category variance contrast below tolerance");
    }
    auto F = [&](double lam) {
      double s = 0.0;
      for (const auto& c : cons) {
        const double a = c.m - 1;
        const double h = (a + lam) * (a + lam) / ((1.0 - lam) * (1.0 - lam));
        s += c.w * (c.num - h * c.dv / (c.m * a * a * a));
      }
      return s;
    };
    double lo = -1.0 + 1e-15, hi = 1.0 - 1e-15;
    double flo = F(lo), fhi = F(hi);
    if (!(flo * fhi < 0.0)) {
      fail(ErrorKind::weak_identification, "CV estimator: the Wald equation has no root in (-1, 1)");
    }
    for (int it = 0; it < 200 && hi - lo > 0.0; ++it) {
      const double mid = 0.5 * (lo + hi);
      if (mid == lo || mid == hi) break;
      const double fm = F(mid);
      if ((fm < 0.0) == (flo < 0.0)) {
        lo = mid;
        flo = fm;
      } else {
        hi = mid;
      }
    }
    res.lambda = 0.5 * (lo + hi);
    double acc = 0.0;
    for (const auto& c : cells) {
      const double a = c.m - 1;
      const double sb = 1.0 - res.lambda, sw = a + res.lambda;
      acc += c.count * (sb * sb * c.mean_ybar2 - sw * sw * c.mean_yy / (c.m * a * a * a));
    }
    res.sigma_alpha2 = acc / ntot;
  } else {
    double num = 0.0, den = 0.0;
    for (const auto& c : cons) {
      num += c.w * c.num;
      den += c.w * c.dv / (c.m * (c.m - 1.0));
    }
    if (std::abs(den) < kWeakIdentTol) {
      fail(ErrorKind::weak_identification, "CV estimator: category variance contrast below tolerance");
    }
    const double ratio = num / den;
    if (!(ratio > 0.0)) {
      fail(ErrorKind::weak_identification, "CV estimator: nonpositive variance ratio");
    }
    res.lambda = 1.0 - 1.0 / std::sqrt(ratio);
    double acc = 0.0;
    for (const auto& c : cells) {
      const double sb = 1.0 - res.lambda;
      acc += c.count * (sb * sb * c.mean_ybar2 - c.mean_yy / (c.m * (c.m - 1.0)));
    }
    res.sigma_alpha2 = acc / ntot;
  }
  return res;
}

inline std::vector<CvCell> cv_sample_cells(const Dataset& d) {
  double mu = 0.0;
  for (const auto& g : d.groups) mu += g.y.mean();
  mu /= d.R;
  std::map<std::pair<int, int>, CvCell> acc;
  for (const auto& g : d.groups) {
    const WithinBetween wb = within_between(g);
    auto [it, inserted] = acc.try_emplace({g.m, g.category});
    CvCell& c = it->second;
    if (inserted) c.count = 0;
    c.m = g.m;
    c.j = g.category;
    ++c.count;
    c.mean_ybar2 += (wb.y_bar - mu) * (wb.y_bar - mu);
    c.mean_yy += wb.y_dot.squaredNorm();
  }
  std::vector<CvCell> out;
  for (auto& [key, c] : acc) {
    c.mean_ybar2 /= c.count;
    c.mean_yy /= c.count;
    out.push_back(c);
  }
  return out;
}

inline CvResult fit_graham_cv(const Dataset& d, CvSpec spec) {
  if (d.J != 2) fail(ErrorKind::schema, "CV estimator requires J = 2");
  if (d.k_Z != 1) fail(ErrorKind::schema, "CV estimator requires the simple model without covariates");
  return fit_graham_cv(cv_sample_cells(d), spec);
}

// Solves ((m_r-1+lambda)/(m_s-1+lambda))^2 = ((m_r-1)^2/(m_s-1)^2) varw_s/varw_r,
// with varw = E[Y''Y''/(m-1)].
inline double solve_within_wald(double varw_r, double varw_s, int m_r, int m_s) {
  if (m_r == m_s) fail(ErrorKind::domain, "solve_within_wald: sizes must differ");
  if (m_r < 2 || m_s < 2) fail(ErrorKind::domain, "solve_within_wald: sizes must be >= 2");
  if (!(varw_r > 0.0 && varw_s > 0.0)) fail(ErrorKind::domain, "solve_within_wald: variances must be positive");
  const double ar = m_r - 1, as = m_s - 1;
  const double c = (ar / as) * std::sqrt(varw_s / varw_r);
  const double lam = (c * as - ar) / (1.0 - c);
  if (!(lam > -1.0 && lam < 1.0)) {
    fail(ErrorKind::out_of_range, "solve_within_wald: no root in (-1, 1)");
  }
  return lam;
}

}  // namespace peerqml
