#pragma once

// Grouped observations, regressor construction with leave-out means, the
// within/between split and the identification checker.

#include <algorithm>
#include <cmath>
#include <map>
#include <numeric>
#include <string>
#include <utility>
#include <vector>

#include <Eigen/Dense>

#include "errors.hpp"

namespace peerqml {

// One individual as read from long-format input.
struct Record {
  std::string group;
  int category = 1;
  double y = 0.0;
  std::vector<double> x1, x2, x3;
};

struct Schema {
  std::vector<std::string> x1_names, x2_names, x3_names;
  int J = 0;                     // 0: infer as the largest category seen
  int max_group_size = 10000;    // upper bound on admissible group sizes
};

struct GroupData {
  std::string id;
  int m = 0;
  int category = 1;
  Eigen::VectorXd y;
  Eigen::MatrixXd z;             // m x k_Z with rows (1, x1, leave-out mean of x2, x3)
  Eigen::MatrixXd x1, x2, x3;    // raw covariates
};

struct Dataset {
  std::vector<GroupData> groups;
  int J = 1;
  int k_Z = 1;
  int N = 0;
  int R = 0;
  int max_group_size = 10000;
  std::vector<std::string> x1_names, x2_names, x3_names;
  std::vector<std::string> z_names;
};

struct WithinBetween {
  Eigen::VectorXd y_dot;
  double y_bar = 0.0;
  Eigen::MatrixXd z_dot;
  Eigen::RowVectorXd z_bar;
};

struct IdentReport {
  std::map<std::pair<int, int>, int> sizes_by_category;  // (m, j) -> R_{m,j}
  bool scenario_a = false;
  bool scenario_b = false;
  bool identified = false;
  std::string note;
};

inline std::vector<std::string> regressor_names(const std::vector<std::string>& x1,
                                                const std::vector<std::string>& x2,
                                                const std::vector<std::string>& x3) {
  std::vector<std::string> out{"const"};
  for (const auto& n : x1) out.push_back(n);
  for (const auto& n : x2) out.push_back("peer_mean(" + n + ")");
  for (const auto& n : x3) out.push_back(n);
  return out;
}

// Leave-out means of each column with divisor m - 1.
inline Eigen::MatrixXd leave_out_mean(const Eigen::MatrixXd& x) {
  const int m = static_cast<int>(x.rows());
  const Eigen::RowVectorXd total = x.colwise().sum();
  Eigen::MatrixXd out(m, x.cols());
  for (int i = 0; i < m; ++i) out.row(i) = (total - x.row(i)) / (m - 1);
  return out;
}

inline Eigen::MatrixXd build_regressors(const Eigen::MatrixXd& x1, const Eigen::MatrixXd& x2,
                                        const Eigen::MatrixXd& x3) {
  const int m = static_cast<int>(x1.rows());
  const int k = 1 + static_cast<int>(x1.cols() + x2.cols() + x3.cols());
  Eigen::MatrixXd z(m, k);
  z.col(0).setOnes();
  int c = 1;
  z.middleCols(c, x1.cols()) = x1;
  c += static_cast<int>(x1.cols());
  if (x2.cols() > 0) z.middleCols(c, x2.cols()) = leave_out_mean(x2);
  c += static_cast<int>(x2.cols());
  z.middleCols(c, x3.cols()) = x3;
  return z;
}

// Sort rows of a group lexicographically by (y, x1, x2, x3) and rebuild z.
inline void canonicalize_group(GroupData& g) {
  std::vector<int> idx(g.m);
  std::iota(idx.begin(), idx.end(), 0);
  auto key_less = [&](int a, int b) {
    if (g.y(a) != g.y(b)) return g.y(a) < g.y(b);
    for (const Eigen::MatrixXd* x : {&g.x1, &g.x2, &g.x3}) {
      for (int c = 0; c < x->cols(); ++c) {
        if ((*x)(a, c) != (*x)(b, c)) return (*x)(a, c) < (*x)(b, c);
      }
    }
    return false;
  };
  std::stable_sort(idx.begin(), idx.end(), key_less);
  auto permute_rows = [&](Eigen::MatrixXd& x) {
    Eigen::MatrixXd out(x.rows(), x.cols());
    for (int i = 0; i < g.m; ++i) out.row(i) = x.row(idx[i]);
    x = std::move(out);
  };
  Eigen::VectorXd y(g.m);
  for (int i = 0; i < g.m; ++i) y(i) = g.y(idx[i]);
  g.y = std::move(y);
  permute_rows(g.x1);
  permute_rows(g.x2);
  permute_rows(g.x3);
  g.z = build_regressors(g.x1, g.x2, g.x3);
}

// Validates group-level invariants, sorts groups by id and fills the totals.
inline void finalize_dataset(Dataset& d) {
  std::sort(d.groups.begin(), d.groups.end(),
            [](const GroupData& a, const GroupData& b) { return a.id < b.id; });
  d.N = 0;
  d.R = static_cast<int>(d.groups.size());
  if (d.R == 0) fail(ErrorKind::parse, "dataset has no groups");
  std::vector<bool> seen(d.J + 1, false);
  for (auto& g : d.groups) {
    if (g.m < 2) fail(ErrorKind::singleton_group, "group '" + g.id + "' has a single member");
    if (g.m > d.max_group_size) {
      fail(ErrorKind::schema, "group '" + g.id + "' exceeds the maximum group size " +
                                  std::to_string(d.max_group_size));
    }
    if (g.category < 1 || g.category > d.J) {
      fail(ErrorKind::category, "group '" + g.id + "' has category " +
                                    std::to_string(g.category) + " outside 1.." +
                                    std::to_string(d.J));
    }
    seen[g.category] = true;
    for (int c = 0; c < g.x3.cols(); ++c) {
      const double ref = g.x3(0, c);
      for (int i = 1; i < g.m; ++i) {
        if (std::abs(g.x3(i, c) - ref) > 1e-9 * std::max(1.0, std::abs(ref))) {
          fail(ErrorKind::schema, "group '" + g.id + "': column " + d.x3_names[c] +
                                      " is not constant within the group");
        }
      }
    }
    canonicalize_group(g);
    d.N += g.m;
  }
  for (int j = 1; j <= d.J; ++j) {
    if (!seen[j]) fail(ErrorKind::category, "category " + std::to_string(j) + " has no group");
  }
  d.z_names = regressor_names(d.x1_names, d.x2_names, d.x3_names);
  d.k_Z = static_cast<int>(d.z_names.size());
}

inline Dataset build_dataset(const std::vector<Record>& rows, const Schema& schema) {
  const size_t k1 = schema.x1_names.size(), k2 = schema.x2_names.size(),
               k3 = schema.x3_names.size();
  std::map<std::string, std::vector<const Record*>> by_group;
  int max_cat = 0;
  for (const auto& r : rows) {
    if (r.x1.size() != k1 || r.x2.size() != k2 || r.x3.size() != k3) {
      fail(ErrorKind::parse, "record of group '" + r.group + "' has missing covariates");
    }
    if (!std::isfinite(r.y)) fail(ErrorKind::parse, "record of group '" + r.group + "' has a missing y");
    for (const auto* v : {&r.x1, &r.x2, &r.x3}) {
      for (double x : *v) {
        if (!std::isfinite(x)) {
          fail(ErrorKind::parse, "record of group '" + r.group + "' has a missing covariate");
        }
      }
    }
    if (r.category < 1) {
      fail(ErrorKind::category, "group '" + r.group + "' has category " + std::to_string(r.category));
    }
    max_cat = std::max(max_cat, r.category);
    by_group[r.group].push_back(&r);
  }
  Dataset d;
  d.J = schema.J > 0 ? schema.J : max_cat;
  d.max_group_size = schema.max_group_size;
  d.x1_names = schema.x1_names;
  d.x2_names = schema.x2_names;
  d.x3_names = schema.x3_names;
  for (const auto& [id, members] : by_group) {
    GroupData g;
    g.id = id;
    g.m = static_cast<int>(members.size());
    g.category = members.front()->category;
    g.y.resize(g.m);
    g.x1.resize(g.m, k1);
    g.x2.resize(g.m, k2);
    g.x3.resize(g.m, k3);
    for (int i = 0; i < g.m; ++i) {
      const Record& r = *members[i];
      if (r.category != g.category) {
        fail(ErrorKind::category, "group '" + id + "' mixes categories");
      }
      g.y(i) = r.y;
      for (size_t c = 0; c < k1; ++c) g.x1(i, c) = r.x1[c];
      for (size_t c = 0; c < k2; ++c) g.x2(i, c) = r.x2[c];
      for (size_t c = 0; c < k3; ++c) g.x3(i, c) = r.x3[c];
    }
    d.groups.push_back(std::move(g));
  }
  finalize_dataset(d);
  return d;
}

inline std::vector<Record> to_records(const Dataset& d) {
  std::vector<Record> out;
  out.reserve(d.N);
  for (const auto& g : d.groups) {
    for (int i = 0; i < g.m; ++i) {
      Record r;
      r.group = g.id;
      r.category = g.category;
      r.y = g.y(i);
      for (int c = 0; c < g.x1.cols(); ++c) r.x1.push_back(g.x1(i, c));
      for (int c = 0; c < g.x2.cols(); ++c) r.x2.push_back(g.x2(i, c));
      for (int c = 0; c < g.x3.cols(); ++c) r.x3.push_back(g.x3(i, c));
      out.push_back(std::move(r));
    }
  }
  return out;
}

inline WithinBetween within_between(const GroupData& g) {
  WithinBetween wb;
  wb.y_bar = g.y.mean();
  wb.y_dot = (g.y.array() - wb.y_bar).matrix();
  wb.z_bar = g.z.colwise().mean();
  wb.z_dot = g.z.rowwise() - wb.z_bar;
  return wb;
}

inline IdentReport check_identification(const Dataset& d) {
  IdentReport rep;
  for (const auto& g : d.groups) ++rep.sizes_by_category[{g.m, g.category}];
  std::map<int, std::vector<int>> sizes_in_cat, cats_of_size;
  for (const auto& [key, count] : rep.sizes_by_category) {
    sizes_in_cat[key.second].push_back(key.first);
    cats_of_size[key.first].push_back(key.second);
  }
  for (const auto& [j, sizes] : sizes_in_cat) rep.scenario_a |= sizes.size() >= 2;
  for (const auto& [m, cats] : cats_of_size) rep.scenario_b |= cats.size() >= 2;
  rep.identified = rep.scenario_a || (rep.scenario_b && d.J >= 2);
  if (rep.scenario_b) {
    rep.note = "scenario_b holds conditional on the category variances differing";
  }
  return rep;
}

}  // namespace peerqml
