#pragma once

#include <string>
#include <vector>

#include <Eigen/Dense>

#include "likelihood.hpp"

namespace peerqml {

struct Estimate {
  std::string estimator;
  Delta delta;
  Eigen::MatrixXd vcov;       // NaN rows and columns for parameters not estimated
  Eigen::VectorXd std_err;
  std::vector<bool> estimated;
  std::vector<std::string> names;
  double loglik = 0.0;
  bool converged = false;
  int iterations = 0;
  bool boundary_sigma_alpha = false;
  std::vector<std::string> dropped_columns;
  std::vector<std::string> warnings;
};

}  // namespace peerqml
