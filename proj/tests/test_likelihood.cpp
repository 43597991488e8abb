#include <cmath>
#include <numbers>
#include <random>

#include <gtest/gtest.h>

#include "oracles.hpp"
#include "peerqml/likelihood.hpp"
#include "peerqml/simulate.hpp"

using namespace peerqml;

namespace {

Dataset one_group(const Eigen::VectorXd& y) {
  std::vector<Record> rows;
  for (int i = 0; i < y.size(); ++i) rows.push_back(Record{"g", 1, y(i), {}, {}, {}});
  return build_dataset(rows, Schema{});
}

Delta unit_delta(int k) {
  Delta d;
  d.theta.lambda = 0.0;
  d.theta.sigma_alpha2 = 0.0;
  d.theta.sigma_eps2 = Eigen::VectorXd::Ones(1);
  d.beta = Eigen::VectorXd::Zero(k);
  return d;
}

// Replace outcomes with the reduced form of Z beta at lambda (no disturbance).
Dataset noiseless(Dataset d, double lambda, const Eigen::VectorXd& beta) {
  for (auto& g : d.groups) {
    const Eigen::VectorXd v = g.z * beta;
    const double vbar = v.mean();
    g.y = ((g.m - 1) / (g.m - 1 + lambda) * (v.array() - vbar) + vbar / (1.0 - lambda)).matrix();
  }
  return d;
}

Dataset simple_design_dataset(std::uint64_t seed, int R, double lambda) {
  Design des;
  des.R = R;
  des.covariates = false;
  des.beta = {0.0};
  des.lambda = lambda;
  return gen_dataset(des, seed).dataset;
}

}  // namespace

TEST(LogLikelihood, StandardNormalAtZero) {
  const Dataset d = one_group(Eigen::Vector2d(0, 0));
  EXPECT_NEAR(log_likelihood(d, unit_delta(1)), -std::log(2.0 * std::numbers::pi), 1e-14);
}

TEST(LogLikelihood, UnitResidual) {
  const Dataset d = one_group(Eigen::Vector2d(1, 0));
  EXPECT_NEAR(log_likelihood(d, unit_delta(1)), -std::log(2.0 * std::numbers::pi) - 0.5, 1e-14);
}

TEST(LogLikelihood, AgreesWithDenseOracle) {
  Rng rng(1);
  for (std::uint64_t s = 1; s <= 10; ++s) {
    const Dataset d = oracle::small_dataset(s, 12, 1 + static_cast<int>(s % 2));
    ASSERT_LE(d.N, 60);
    for (int t = 0; t < 5; ++t) {
      const Delta delta = oracle::random_delta(rng, d.J, d.k_Z);
      const double dense = oracle::dense_loglik(d, delta);
      EXPECT_NEAR(log_likelihood(d, delta), dense, 1e-10 * std::abs(dense));
    }
  }
}

TEST(LogLikelihood, InadmissibleThetaIsDomainError) {
  const Dataset d = oracle::small_dataset(3);
  Rng rng(2);
  Delta delta = oracle::random_delta(rng, d.J, d.k_Z);
  delta.theta.lambda = 1.0;
  EXPECT_THROW(log_likelihood(d, delta), Error);
  delta.theta.lambda = 0.2;
  delta.theta.sigma_eps2(0) = 0.0;
  try {
    log_likelihood(d, delta);
    ADD_FAILURE();
  } catch (const Error& e) {
    EXPECT_EQ(e.kind(), ErrorKind::domain);
  }
}

TEST(BetaGls, IdentityCovarianceGivesOls) {
  const Dataset d = oracle::small_dataset(5);
  Theta t;
  t.lambda = 0.0;
  t.sigma_alpha2 = 0.0;
  t.sigma_eps2 = Eigen::VectorXd::Ones(d.J);
  Eigen::MatrixXd Z(d.N, d.k_Z);
  Eigen::VectorXd y(d.N);
  int row = 0;
  for (const auto& g : d.groups) {
    Z.middleRows(row, g.m) = g.z;
    y.segment(row, g.m) = g.y;
    row += g.m;
  }
  const Eigen::VectorXd ols = Z.colPivHouseholderQr().solve(y);
  EXPECT_LT((beta_gls(d, t) - ols).cwiseAbs().maxCoeff(), 1e-10);
}

TEST(BetaGls, NoiselessDataRecoversBeta) {
  Eigen::VectorXd beta(4);
  beta << 0.5, -1.0, 2.0, 0.25;
  const Dataset d = noiseless(oracle::small_dataset(6), 0.4, beta);
  Theta t;
  t.lambda = 0.4;
  t.sigma_alpha2 = 0.3;
  t.sigma_eps2 = Eigen::VectorXd::Constant(d.J, 0.7);
  EXPECT_LT((beta_gls(d, t) - beta).cwiseAbs().maxCoeff(), 1e-10);
}

TEST(BetaGls, AgreesWithDenseOracleAndIsOrthogonal) {
  Rng rng(8);
  for (std::uint64_t s = 1; s <= 8; ++s) {
    const Dataset d = oracle::small_dataset(100 + s);
    const Theta t = oracle::random_delta(rng, d.J, d.k_Z).theta;
    const Eigen::VectorXd b = beta_gls(d, t);
    const Eigen::VectorXd dense = oracle::dense_gls(d, t);
    EXPECT_LT((b - dense).cwiseAbs().maxCoeff(), 1e-10 * std::max(1.0, dense.cwiseAbs().maxCoeff()));
    Eigen::VectorXd zou = Eigen::VectorXd::Zero(d.k_Z);
    double scale = 0.0;
    for (const auto& g : d.groups) {
      const Eigen::MatrixXd Oi = oracle::dense_omega(g.m, t.sigma_eps2(g.category - 1), t.sigma_alpha2).inverse();
      const Eigen::VectorXd sy = oracle::dense_s(g.m, t.lambda) * g.y;
      zou += g.z.transpose() * Oi * (sy - g.z * b);
      scale = std::max(scale, (g.z.transpose() * Oi * sy).cwiseAbs().maxCoeff());
    }
    EXPECT_LT(zou.cwiseAbs().maxCoeff(), 1e-8 * scale);
  }
}

TEST(BetaGls, CollinearRegressorsReported) {
  Dataset d = oracle::small_dataset(9);
  for (auto& g : d.groups) g.z.col(1) = g.z.col(0) * 2.0;
  Theta t;
  t.lambda = 0.1;
  t.sigma_alpha2 = 0.2;
  t.sigma_eps2 = Eigen::VectorXd::Ones(d.J);
  try {
    beta_gls(d, t);
    ADD_FAILURE();
  } catch (const Error& e) {
    EXPECT_EQ(e.kind(), ErrorKind::collinearity);
    EXPECT_NE(std::string(e.what()).find("condition number"), std::string::npos);
  }
}

TEST(ConcentratedLoglik, IdentityWithLogLikelihoodAtGls) {
  Rng rng(10);
  for (std::uint64_t s = 1; s <= 5; ++s) {
    const Dataset d = oracle::small_dataset(200 + s, 30);
    const Theta t = oracle::random_delta(rng, d.J, d.k_Z).theta;
    const double q = concentrated_loglik(d, t);
    const double l = log_likelihood(d, Delta{t, beta_gls(d, t)}) / d.N;
    EXPECT_NEAR(q, l, 1e-12 * std::abs(l));
  }
}

TEST(ConcentratedLoglik, NoiselessQuadraticTermVanishesAtTrueLambda) {
  Eigen::VectorXd beta(4);
  beta << 1, 1, 1, 1;
  const Dataset d = noiseless(oracle::small_dataset(11), 0.5, beta);
  Theta t;
  t.lambda = 0.5;
  t.sigma_alpha2 = 0.25;
  t.sigma_eps2 = Eigen::VectorXd::Ones(d.J);
  const Eigen::VectorXd b = beta_gls(d, t);
  for (const auto& g : d.groups) {
    const Eigen::VectorXd u = oracle::dense_s(g.m, 0.5) * g.y - g.z * b;
    EXPECT_LT(u.cwiseAbs().maxCoeff(), 1e-10);
  }
  // With zero residuals Q_N reduces to its log-determinant part.
  double logdet = -0.5 * d.N * std::log(2.0 * std::numbers::pi);
  for (const auto& g : d.groups) {
    logdet += std::log(oracle::dense_s(g.m, 0.5).determinant()) -
              0.5 * std::log(oracle::dense_omega(g.m, 1.0, 0.25).determinant());
  }
  EXPECT_NEAR(concentrated_loglik(d, t), logdet / d.N, 1e-10);
}

TEST(ConcentratedLoglik, InvariantToPermutations) {
  const Dataset d = oracle::small_dataset(12, 20);
  std::vector<Record> recs = to_records(d);
  std::mt19937 gen(1);
  std::shuffle(recs.begin(), recs.end(), gen);
  Schema s;
  s.x1_names = d.x1_names;
  s.x2_names = d.x2_names;
  s.x3_names = d.x3_names;
  const Dataset e = build_dataset(recs, s);
  Rng rng(3);
  const Theta t = oracle::random_delta(rng, d.J, d.k_Z).theta;
  EXPECT_EQ(concentrated_loglik(d, t), concentrated_loglik(e, t));
  // Without canonical ordering the value still agrees to rounding.
  Dataset f = d;
  std::reverse(f.groups.begin(), f.groups.end());
  for (auto& g : f.groups) {
    g.y.reverseInPlace();
    g.z = g.z.colwise().reverse().eval();
  }
  EXPECT_NEAR(concentrated_loglik(f, t), concentrated_loglik(d, t), 1e-12 * std::abs(concentrated_loglik(d, t)));
}

TEST(Score, MatchesFiniteDifferences) {
  Rng rng(21);
  double worst = 0.0;
  for (std::uint64_t s = 1; s <= 5; ++s) {
    const Dataset d = oracle::small_dataset(300 + s, 12, 2);
    const Cells cs = summarize(d);
    for (int t = 0; t < 20; ++t) {
      const Delta delta = oracle::random_delta(rng, d.J, d.k_Z);
      const auto f = [&](const Eigen::VectorXd& v) { return log_likelihood(cs, delta_from_vector(v, d.J)); };
      const Eigen::VectorXd fd = oracle::fd_gradient(f, to_vector(delta));
      worst = std::max(worst, oracle::max_rel_err(score(cs, delta), fd));
    }
  }
  EXPECT_LT(worst, 1e-6);
}

TEST(Hessian, MatchesFiniteDifferencesOfScore) {
  Rng rng(22);
  double worst = 0.0;
  for (std::uint64_t s = 1; s <= 5; ++s) {
    const Dataset d = oracle::small_dataset(400 + s, 12, 2);
    const Cells cs = summarize(d);
    for (int t = 0; t < 20; ++t) {
      const Delta delta = oracle::random_delta(rng, d.J, d.k_Z);
      const auto f = [&](const Eigen::VectorXd& v) { return score(cs, delta_from_vector(v, d.J)); };
      const Eigen::MatrixXd fd = oracle::fd_jacobian(f, to_vector(delta));
      worst = std::max(worst, oracle::max_rel_err(hessian(cs, delta), fd));
    }
  }
  EXPECT_LT(worst, 1e-5);
}

TEST(Hessian, SymmetricAndBetaBlockIsMinusZOmegaZ) {
  Rng rng(23);
  const Dataset d = oracle::small_dataset(500);
  const Delta delta = oracle::random_delta(rng, d.J, d.k_Z);
  const Eigen::MatrixXd H = hessian(d, delta);
  EXPECT_EQ((H - H.transpose()).cwiseAbs().maxCoeff(), 0.0);
  Eigen::MatrixXd zoz = Eigen::MatrixXd::Zero(d.k_Z, d.k_Z);
  for (const auto& g : d.groups) {
    zoz += g.z.transpose() *
           oracle::dense_omega(g.m, delta.theta.sigma_eps2(g.category - 1), delta.theta.sigma_alpha2).inverse() * g.z;
  }
  const int b0 = 2 + d.J;
  EXPECT_LT((H.bottomRightCorner(d.k_Z, d.k_Z) + zoz).cwiseAbs().maxCoeff(), 1e-10 * zoz.cwiseAbs().maxCoeff());
  // The beta block does not depend on y.
  Dataset e = d;
  for (auto& g : e.groups) g.y *= -3.0;
  EXPECT_LT((hessian(e, delta).block(b0, b0, d.k_Z, d.k_Z) - H.block(b0, b0, d.k_Z, d.k_Z)).cwiseAbs().maxCoeff(),
            1e-12 * zoz.cwiseAbs().maxCoeff());
}

TEST(ConcentratedHessian, MatchesFiniteDifferencesOfQ) {
  Rng rng(24);
  const Dataset d = oracle::small_dataset(600, 20, 2);
  const Cells cs = summarize(d);
  for (int t = 0; t < 5; ++t) {
    const Theta th = oracle::random_delta(rng, d.J, d.k_Z).theta;
    const Delta at{th, beta_gls(cs, th)};
    const auto q = [&](const Eigen::VectorXd& v) { return cs.N * concentrated_loglik(cs, theta_from_vector(v)); };
    const auto grad = [&](const Eigen::VectorXd& v) { return oracle::fd_gradient(q, v, 1e-4); };
    const Eigen::MatrixXd fd = oracle::fd_jacobian(grad, theta_to_vector(th), 1e-4);
    EXPECT_LT(oracle::max_rel_err(concentrated_hessian(cs, at), fd), 1e-4);
    // Envelope: the gradient of N Q_N is the theta part of the score at beta_gls.
    const Eigen::VectorXd g = oracle::fd_gradient(q, theta_to_vector(th));
    EXPECT_LT(oracle::max_rel_err(score(cs, at).head(theta_dim(d.J)), g), 1e-6);
  }
}

TEST(Score, MeanAtTruthIsZero) {
  Design des;
  des.R = 100;
  const Delta truth = design_truth(des);
  const int P = delta_dim(1, 4), reps = 2000;
  Eigen::VectorXd sum = Eigen::VectorXd::Zero(P), sq = Eigen::VectorXd::Zero(P);
  for (int r = 0; r < reps; ++r) {
    const Eigen::VectorXd g = score(gen_dataset(des, substream(77, r)).dataset, truth);
    sum += g;
    sq += g.cwiseProduct(g);
  }
  const Eigen::VectorXd mean = sum / reps;
  const Eigen::VectorXd se = ((sq / reps - mean.cwiseProduct(mean)) / reps).cwiseSqrt();
  for (int i = 0; i < P; ++i) EXPECT_LT(std::abs(mean(i)), 3.0 * se(i)) << "coordinate " << i;
}

TEST(ScoreIdentity, PhiChiReproducesScore) {
  Rng rng(30);
  for (std::uint64_t s = 1; s <= 6; ++s) {
    const Dataset d = oracle::small_dataset(700 + s, 25, 1 + static_cast<int>(s % 3));
    const Delta delta = oracle::random_delta(rng, d.J, d.k_Z);
    const Eigen::VectorXd g = score(d, delta);
    const Eigen::VectorXd pc = oracle::phi_chi_sum(d, delta);
    EXPECT_LT((g + pc).cwiseAbs().maxCoeff() / g.cwiseAbs().maxCoeff(), 1e-8);
  }
}

TEST(OptimalWeight, PlugInEntries) {
  Delta delta = unit_delta(1);
  const Eigen::MatrixXd phi = optimal_weight_phi(2, 1, delta);
  EXPECT_EQ(phi.rows(), 4);
  EXPECT_EQ(phi.cols(), 4);
  EXPECT_DOUBLE_EQ(phi(0, 0), 1.0);
  EXPECT_DOUBLE_EQ(phi(0, 1), -2.0);
  EXPECT_DOUBLE_EQ(phi(1, 1), -2.0);   // -m^2 / (2 psi^2)
  EXPECT_DOUBLE_EQ(phi(2, 0), -0.5);   // -1 / (2 sigma^4)
  EXPECT_DOUBLE_EQ(phi(2, 1), -1.0);   // -m / (2 psi^2)
  EXPECT_DOUBLE_EQ(phi(3, 2), -1.0);
  EXPECT_DOUBLE_EQ(phi(3, 3), -2.0);
}

TEST(OptimalWeight, OtherCategoryRowIsZero) {
  Rng rng(31);
  const Delta delta = oracle::random_delta(rng, 2, 1);
  const Eigen::MatrixXd phi = optimal_weight_phi(3, 2, delta);
  EXPECT_TRUE(phi.row(2).isZero(0.0));
  EXPECT_FALSE(phi.row(3).isZero(0.0));
}

TEST(MomentChi, ZeroWithinDeviations) {
  const Dataset d = one_group(Eigen::Vector3d(2, 2, 2));
  Delta delta = unit_delta(1);
  delta.theta.sigma_eps2(0) = 0.7;
  delta.theta.sigma_alpha2 = 0.1;
  delta.beta(0) = 2.0;
  const MomentVector mv = moment_chi(d.groups[0], delta);
  EXPECT_DOUBLE_EQ(mv.chi_w, -2.0 * 0.7);
  EXPECT_NEAR(mv.chi_b, -0.1 - 0.7 / 3.0, 1e-15);
  EXPECT_EQ(mv.stacked().size(), 4);
}

TEST(MomentChi, SimpleModelHandComputation) {
  const Dataset d = one_group(Eigen::Vector4d(1, 2, 3, 6));
  Delta delta = unit_delta(1);
  delta.theta.lambda = 0.5;
  delta.theta.sigma_alpha2 = 0.2;
  delta.beta(0) = 0.5;
  const MomentVector mv = moment_chi(d.groups[0], delta);
  const double f = 3.5 / 3.0;  // (m - 1 + lambda) / (m - 1)
  EXPECT_NEAR(mv.chi_w, f * f * 14.0 - 3.0, 1e-13);            // Y''Y'' = 4 + 1 + 0 + 9
  EXPECT_NEAR(mv.chi_b, 1.0 * 1.0 - 0.2 - 0.25, 1e-13);         // 0.5 * 3 - 0.5 = 1
  EXPECT_NEAR(mv.chi_zw(0), 0.0, 1e-13);
  EXPECT_NEAR(mv.chi_zb(0), 1.0, 1e-13);
}

TEST(MomentChi, MeanZeroAtTruth) {
  Design des;
  des.R = 100000;
  des.J = 2;
  des.sigma_eps2_by_category = {0.5, 1.5};
  const SimResult sim = gen_dataset(des, 4242);
  const int P = 2 + 2 * 4;
  Eigen::VectorXd sum = Eigen::VectorXd::Zero(P), sq = Eigen::VectorXd::Zero(P);
  for (const auto& g : sim.dataset.groups) {
    const Eigen::VectorXd c = moment_chi(g, sim.truth).stacked();
    sum += c;
    sq += c.cwiseProduct(c);
  }
  const double n = sim.dataset.R;
  const Eigen::VectorXd mean = sum / n;
  const Eigen::VectorXd se = ((sq / n - mean.cwiseProduct(mean)) / n).cwiseSqrt();
  for (int i = 0; i < P; ++i) EXPECT_LE(std::abs(mean(i)), 3.0 * se(i) + 1e-12) << "block " << i;
}

TEST(MomentNu, EqualsChiContrast) {
  const Dataset d = simple_design_dataset(5, 50, 0.3);
  Rng rng(9);
  for (const auto& g : d.groups) {
    Delta delta = oracle::random_delta(rng, 1, 1);
    delta.beta(0) = 0.0;
    const MomentVector mv = moment_chi(g, delta);
    const double nu = moment_nu(g, delta.theta);
    EXPECT_NEAR(nu, mv.chi_b - mv.chi_w / (g.m * (g.m - 1.0)), 1e-12 * std::max(1.0, std::abs(nu)));
  }
}

TEST(MomentNu, ZeroDataGivesMinusSigmaAlpha) {
  const Dataset d = one_group(Eigen::Vector3d(0, 0, 0));
  Theta t;
  t.lambda = 0.3;
  t.sigma_alpha2 = 0.4;
  t.sigma_eps2 = Eigen::VectorXd::Ones(1);
  EXPECT_DOUBLE_EQ(moment_nu(d.groups[0], t), -0.4);
}

TEST(MomentNu, MeanZeroAtTruth) {
  const Dataset d = simple_design_dataset(6, 100000, 0.5);
  Theta t;
  t.lambda = 0.5;
  t.sigma_alpha2 = 0.25;
  t.sigma_eps2 = Eigen::VectorXd::Ones(1);
  double sum = 0.0, sq = 0.0;
  for (const auto& g : d.groups) {
    const double v = moment_nu(g, t);
    sum += v;
    sq += v * v;
  }
  const double n = d.R, mean = sum / n;
  EXPECT_LT(std::abs(mean), 3.0 * std::sqrt((sq / n - mean * mean) / n));
}
