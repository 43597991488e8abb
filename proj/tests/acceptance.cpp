#include <cmath>
#include <cstdio>
#include <string>
#include <thread>

#include "oracles.hpp"
#include "peerqml/estimators.hpp"
#include "peerqml/inference.hpp"
#include "peerqml/mc.hpp"

using namespace peerqml;

namespace {

constexpr std::uint64_t kSeed = 20240101;

int failures = 0;

void report(int id, bool ok, const std::string& detail) {
  std::printf("%s %d: %s\n", ok ? "PASS" : "FAIL", id, detail.c_str());
  std::fflush(stdout);
  if (!ok) ++failures;
}

std::string fmt(const char* f, double a) {
  char buf[64];
  std::snprintf(buf, sizeof buf, f, a);
  return buf;
}

int threads() { return static_cast<int>(std::max(1u, std::thread::hardware_concurrency())); }

McParam lambda_of(const McResult& r, const std::string& est) { return r.summaries.at(est).params.at(0); }

Design baseline(int R) {
  Design d;
  d.R = R;
  return d;
}

void criterion1() {
  const McResult r = run_mc(baseline(100), {"qmle", "cmle"}, 2000, kSeed, threads());
  const McParam q = lambda_of(r, "qmle"), c = lambda_of(r, "cmle");
  const bool ok = std::abs(q.median - 0.498) <= 0.010 && std::abs(q.rob_std_dev / 0.049 - 1.0) <= 0.15 &&
                  q.rejection_rate >= 0.035 && q.rejection_rate <= 0.080 && std::abs(c.median - 0.524) <= 0.03;
  report(1, ok,
         "baseline design R=100: QMLE median " + fmt("%.4f", q.median) + " (0.498 +- 0.010), rob sd " +
             fmt("%.4f", q.rob_std_dev) + " (0.049 +- 15%), rej " + fmt("%.4f", q.rejection_rate) +
             " in [0.035, 0.080]; CMLE median " + fmt("%.4f", c.median) + " (0.524 +- 0.03)");
}

void criterion2() {
  Design d = baseline(50);
  d.x_mode = XMode::x1_eq_x2;
  const McResult r = run_mc(d, {"qmle", "cmle"}, 2000, kSeed, threads());
  const McParam q = lambda_of(r, "qmle"), c = lambda_of(r, "cmle");
  const bool ok = c.median >= 0.55 && c.median <= 0.64 && std::abs(q.median - 0.501) <= 0.015;
  report(2, ok,
         "x1=x2 design R=50: CMLE median " + fmt("%.4f", c.median) + " in [0.55, 0.64]; QMLE median " +
             fmt("%.4f", q.median) + " (0.501 +- 0.015)");
}

void criterion3() {
  Design d = baseline(400);
  d.x_mode = XMode::x1_eq_x2;
  d.error_dist = ErrorDist::student_t6;
  const McResult r = run_mc(d, {"qmle", "cmle"}, 2000, kSeed, threads());
  const McParam q = lambda_of(r, "qmle"), c = lambda_of(r, "cmle");
  const bool ok = q.rejection_rate >= 0.040 && q.rejection_rate <= 0.075 && c.rejection_rate > 0.10;
  report(3, ok,
         "t(6) design R=400: QMLE rej " + fmt("%.4f", q.rejection_rate) + " in [0.040, 0.075]; CMLE rej " +
             fmt("%.4f", c.rejection_rate) + " > 0.10");
}

void criterion4() {
  Design d = baseline(1600);
  d.size_dist = SizeDist::fixed;
  d.size_fixed = 4;
  d.J = 2;
  d.sigma_eps2_by_category = {0.5, 1.5};
  d.x_mode = XMode::x1_eq_x2;
  const McResult r = run_mc(d, {"qmle"}, 1000, kSeed, threads());
  const McParam q = lambda_of(r, "qmle");
  const bool ok = std::abs(q.median - 0.499) <= 0.01 && std::abs(q.rob_std_dev / 0.033 - 1.0) <= 0.20;
  report(4, ok,
         "heteroscedastic fixed m=4, sigma2 {0.5, 1.5}, R=1600: QMLE median " + fmt("%.4f", q.median) +
             " (0.499 +- 0.01), rob sd " + fmt("%.4f", q.rob_std_dev) + " (0.033 +- 20%)");
}

void criterion5() {
  Rng rng(5);
  double es = 0.0, eh = 0.0;
  for (std::uint64_t s = 1; s <= 5; ++s) {
    const Dataset d = oracle::small_dataset(s, 12, 1 + static_cast<int>(s % 2));
    const Cells cs = summarize(d);
    for (int t = 0; t < 20; ++t) {
      const Delta delta = oracle::random_delta(rng, d.J, d.k_Z);
      const Eigen::VectorXd x = to_vector(delta);
      const auto f = [&](const Eigen::VectorXd& v) { return log_likelihood(cs, delta_from_vector(v, d.J)); };
      const auto g = [&](const Eigen::VectorXd& v) { return Eigen::VectorXd(score(cs, delta_from_vector(v, d.J))); };
      es = std::max(es, oracle::max_rel_err(score(cs, delta), oracle::fd_gradient(f, x)));
      eh = std::max(eh, oracle::max_rel_err(hessian(cs, delta), oracle::fd_jacobian(g, x)));
    }
  }
  report(5, es < 1e-6 && eh < 1e-5,
         "finite differences over 5 datasets x 20 deltas: score err " + fmt("%.2e", es) + " < 1e-6, Hessian err " +
             fmt("%.2e", eh) + " < 1e-5");
}

void criterion6() {
  Rng rng(6);
  double worst = 0.0;
  for (std::uint64_t s = 1; s <= 10; ++s) {
    Design des;
    des.R = 50;
    des.J = 1 + static_cast<int>(s % 3);
    des.sigma_eps2_by_category.assign(des.J, 1.0);
    const SimResult sim = gen_dataset(des, 600 + s);
    const Delta delta = s % 2 ? sim.truth : oracle::random_delta(rng, des.J, sim.dataset.k_Z);
    const Eigen::VectorXd g = score(sim.dataset, delta);
    const Eigen::VectorXd pc = oracle::phi_chi_sum(sim.dataset, delta);
    worst = std::max(worst, (g + pc).cwiseAbs().maxCoeff() / g.cwiseAbs().maxCoeff());
  }
  report(6, worst < 1e-8, "score + sum phi chi, relative sup norm " + fmt("%.2e", worst) + " < 1e-8");
}

void criterion7() {
  Rng rng(7);
  double worst = 0.0;
  for (std::uint64_t s = 1; s <= 10; ++s) {
    const Dataset d = oracle::small_dataset(700 + s, 40, 1 + static_cast<int>(s % 3));
    const Delta delta = oracle::random_delta(rng, d.J, d.k_Z);
    const Eigen::MatrixXd G = gamma_hat(d, delta);
    const Eigen::MatrixXd U = upsilon_hat(d, delta, gaussian_moments(delta.theta));
    worst = std::max(worst, (U - G).cwiseAbs().maxCoeff());
  }
  report(7, worst <= 1e-10, "Gaussian upsilon_hat vs gamma_hat, max entry difference " + fmt("%.2e", worst) +
                                " <= 1e-10");
}

void criterion8() {
  const double err = oracle::block_dense_max_err(kSeed, 100);
  report(8, err < 1e-10, "block vs dense multiply/inverse/logdet, m in [2, 8]: max rel err " + fmt("%.2e", err) +
                             " < 1e-10");
}

void criterion9() {
  double worst = 0.0;
  for (double lam : {-0.5, 0.0, 0.5, 0.9}) {
    const double s2 = 1.3, sa2 = 0.25;
    worst = std::max(worst, std::abs(solve_within_wald(oracle::pop_varw(3, lam, s2), oracle::pop_varw(5, lam, s2),
                                                       3, 5) - lam));
    std::vector<CvCell> lo, full;
    for (int m : {3, 4}) {
      for (int j = 1; j <= 2; ++j) {
        const double s = j == 1 ? 0.5 : 1.5;
        lo.push_back(CvCell{m, j, 100, oracle::pop_mean_ybar2(m, lam, s, sa2), oracle::pop_mean_yy(m, lam, s)});
        full.push_back(CvCell{m, j, 100, oracle::pop_mean_ybar2(m, lam, s, sa2), (m - 1) * s});
      }
    }
    const CvResult a = fit_graham_cv(lo, CvSpec::leave_out_mean);
    const CvResult b = fit_graham_cv(full, CvSpec::full_mean);
    worst = std::max({worst, std::abs(a.lambda - lam), std::abs(b.lambda - lam), std::abs(a.sigma_alpha2 - sa2),
                      std::abs(b.sigma_alpha2 - sa2)});
  }
  report(9, worst < 1e-10, "population within-Wald and CV recovery for lambda in {-0.5, 0, 0.5, 0.9}: max err " +
                               fmt("%.2e", worst) + " < 1e-10");
}

void criterion10() {
  const McResult r = run_mc(baseline(400), {"qmle"}, 2000, kSeed, threads());
  const McParam q = lambda_of(r, "qmle");
  const double ratio = q.est_std_dev / q.std_dev;
  report(10, std::abs(ratio - 1.0) <= 0.15,
         "baseline design R=400: QMLE median est sd " + fmt("%.4f", q.est_std_dev) + " vs MC sd " + fmt("%.4f", q.std_dev) +
             " (ratio " + fmt("%.3f", ratio) + ", within 15%)");
}

}  // namespace

int main() {
  criterion1();
  criterion2();
  criterion3();
  criterion4();
  criterion5();
  criterion6();
  criterion7();
  criterion8();
  criterion9();
  criterion10();
  return failures == 0 ? 0 : 1;
}
