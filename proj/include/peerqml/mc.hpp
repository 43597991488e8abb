#pragma once

// Monte Carlo harness: replications, summary statistics and table output.

#include <algorithm>
#include <atomic>
#include <cmath>
#include <cstdint>
#include <iomanip>
#include <limits>
#include <map>
#include <sstream>
#include <string>
#include <thread>
#include <vector>

#include <Eigen/Dense>

#include "errors.hpp"
#include "estimate.hpp"
#include "estimators.hpp"
#include "inference.hpp"
#include "simulate.hpp"

namespace peerqml {

struct McParam {
  std::string name;
  double median = 0.0;
  double rob_std_dev = 0.0;
  double std_dev = 0.0;
  double est_std_dev = std::numeric_limits<double>::quiet_NaN();
  double rejection_rate = std::numeric_limits<double>::quiet_NaN();
};

struct McSummary {
  std::string estimator;
  std::vector<McParam> params;
  int reps_total = 0;
  int reps_converged = 0;
  int reps_boundary = 0;
};

struct RepRecord {
  int rep = 0;
  std::string estimator;
  bool converged = false;
  bool boundary = false;
  std::vector<std::string> names;
  std::vector<bool> estimated;
  Eigen::VectorXd values, std_err, truth;
  std::string error;
};

struct McResult {
  std::map<std::string, McSummary> summaries;
  std::vector<RepRecord> reps;  // ordered by (rep, estimator position)
};

inline const std::vector<std::string>& known_estimators() {
  static const std::vector<std::string> names{"qmle", "cmle", "cv", "cv_full"};
  return names;
}

inline double quantile_linear(const std::vector<double>& sorted, double p) {
  const double h = (sorted.size() - 1) * p;
  const size_t lo = static_cast<size_t>(std::floor(h));
  const size_t hi = std::min(sorted.size() - 1, lo + 1);
  return sorted[lo] + (h - lo) * (sorted[hi] - sorted[lo]);
}

inline double robust_std(std::vector<double> values) {
  if (values.empty()) fail(ErrorKind::domain, "robust_std: empty input");
  std::sort(values.begin(), values.end());
  return (quantile_linear(values, 0.75) - quantile_linear(values, 0.25)) / 1.35;
}

inline double median_of(std::vector<double> values) {
  if (values.empty()) return std::numeric_limits<double>::quiet_NaN();
  std::sort(values.begin(), values.end());
  return quantile_linear(values, 0.5);
}

inline double sample_std(const std::vector<double>& v) {
  if (v.size() < 2) return 0.0;
  double mean = 0.0;
  for (double x : v) mean += x;
  mean /= v.size();
  double ss = 0.0;
  for (double x : v) ss += (x - mean) * (x - mean);
  return std::sqrt(ss / (v.size() - 1));
}

inline RepRecord run_one(const Dataset& d, const Delta& truth, const std::string& est,
                         const FitOptions& opts) {
  RepRecord rec;
  rec.estimator = est;
  rec.truth = to_vector(truth);
  const int P = static_cast<int>(rec.truth.size());
  const double nan = std::numeric_limits<double>::quiet_NaN();
  if (est == "cv" || est == "cv_full") {
    rec.names = {"lambda", "sigma_alpha2"};
    rec.estimated = {true, true};
    rec.values = Eigen::VectorXd::Constant(2, nan);
    rec.std_err = Eigen::VectorXd::Constant(2, nan);
    rec.truth = rec.truth.head(2).eval();
    try {
      const CvResult r = fit_graham_cv(cv_sample_cells(d), est == "cv" ? CvSpec::leave_out_mean
                                                                     : CvSpec::full_mean);
      rec.values << r.lambda, r.sigma_alpha2;
      rec.converged = true;
    } catch (const Error& e) {
      rec.error = e.what();
    }
    return rec;
  }
  rec.names = parameter_names(d.J, d.k_Z);
  rec.estimated.assign(P, est == "qmle");
  rec.values = Eigen::VectorXd::Constant(P, nan);
  rec.std_err = Eigen::VectorXd::Constant(P, nan);
  try {
    FitOptions o = opts;
    o.require_vcov = false;
    const Estimate e = est == "qmle" ? fit_qmle(d, o) : fit_cmle(d, o);
    rec.estimated = e.estimated;
    rec.values = to_vector(e.delta);
    rec.std_err = e.std_err;
    rec.converged = e.converged;
    rec.boundary = e.boundary_sigma_alpha;
  } catch (const NonConvergenceError& e) {
    rec.error = e.what();
    if (!e.best().estimated.empty()) rec.estimated = e.best().estimated;
  } catch (const Error& e) {
    rec.error = e.what();
  }
  return rec;
}

inline McSummary summarize_reps(const std::string& est, const std::vector<const RepRecord*>& recs) {
  McSummary s;
  s.estimator = est;
  s.reps_total = static_cast<int>(recs.size());
  const RepRecord* proto = nullptr;
  for (const auto* r : recs) {
    if (r->converged) {
      ++s.reps_converged;
      if (r->boundary) ++s.reps_boundary;
      if (!proto) proto = r;
    }
  }
  if (!proto && !recs.empty()) proto = recs.front();
  if (!proto) return s;
  for (size_t i = 0; i < proto->names.size(); ++i) {
    if (!proto->estimated[i]) continue;
    std::vector<double> vals, ses;
    int tested = 0, rejected = 0;
    for (const auto* r : recs) {
      if (!r->converged) continue;
      vals.push_back(r->values(i));
      const double se = r->std_err(i);
      if (std::isfinite(se) && se > 0.0) {
        ses.push_back(se);
        const double z = (r->values(i) - r->truth(i)) / se;
        ++tested;
        if (std::erfc(std::abs(z) / std::sqrt(2.0)) < 0.05) ++rejected;
      }
    }
    McParam p;
    p.name = proto->names[i];
    if (!vals.empty()) {
      p.median = median_of(vals);
      p.rob_std_dev = robust_std(vals);
      p.std_dev = sample_std(vals);
    } else {
      p.median = p.rob_std_dev = p.std_dev = std::numeric_limits<double>::quiet_NaN();
    }
    if (!ses.empty()) p.est_std_dev = median_of(ses);
    if (tested > 0) p.rejection_rate = static_cast<double>(rejected) / tested;
    s.params.push_back(p);
  }
  return s;
}

inline constexpr std::uint64_t kFrozenZStream = 0xFFFFFFFFFFFFFFFEULL;

inline McResult run_mc(const Design& design, const std::vector<std::string>& estimators, int reps,
                       std::uint64_t master_seed, int threads, const FitOptions& opts = {}) {
  if (reps < 1) fail(ErrorKind::schema, "reps must be >= 1");
  validate_design(design);
  for (const auto& e : estimators) {
    if (std::find(known_estimators().begin(), known_estimators().end(), e) == known_estimators().end()) {
      fail(ErrorKind::schema, "unknown estimator '" + e + "'");
    }
  }
  const size_t ne = estimators.size();
  McResult out;
  out.reps.resize(static_cast<size_t>(reps) * ne);
  std::atomic<int> next{0};
  auto worker = [&]() {
    for (int k = next++; k < reps; k = next++) {
      const std::uint64_t seed = substream(master_seed, k);
      const std::uint64_t zseed = design.freeze_z ? substream(master_seed, kFrozenZStream) : seed;
      const SimResult sim = gen_dataset(design, seed, zseed);
      for (size_t e = 0; e < ne; ++e) {
        RepRecord rec = run_one(sim.dataset, sim.truth, estimators[e], opts);
        rec.rep = k;
        out.reps[k * ne + e] = std::move(rec);
      }
    }
  };
  const int nt = std::max(1, std::min(threads, reps));
  std::vector<std::thread> pool;
  for (int t = 1; t < nt; ++t) pool.emplace_back(worker);
  worker();
  for (auto& th : pool) th.join();
  for (size_t e = 0; e < ne; ++e) {
    std::vector<const RepRecord*> recs;
    for (int k = 0; k < reps; ++k) recs.push_back(&out.reps[k * ne + e]);
    out.summaries[estimators[e]] = summarize_reps(estimators[e], recs);
  }
  return out;
}

enum class TableFormat { markdown, csv };

inline std::string format_number(double v, int digits, bool fixed) {
  if (std::isnan(v)) return fixed ? "-" : "NaN";
  std::ostringstream os;
  if (fixed) {
    os << std::fixed << std::setprecision(digits) << v;
  } else {
    os << std::setprecision(digits) << v;
  }
  return os.str();
}

// Summaries in the given order; markdown rounds to 3 decimals, CSV keeps 17
// significant digits.
inline std::string emit_table(const std::vector<McSummary>& summaries, TableFormat format) {
  std::ostringstream os;
  if (format == TableFormat::csv) {
    os << "estimator,parameter,median,rob_std_dev,std_dev,est_std_dev,rejection_rate,"
          "reps_total,reps_converged,reps_boundary\n";
    for (const auto& s : summaries) {
      for (const auto& p : s.params) {
        os << s.estimator << ',' << p.name << ',' << format_number(p.median, 17, false) << ','
           << format_number(p.rob_std_dev, 17, false) << ',' << format_number(p.std_dev, 17, false)
           << ',' << format_number(p.est_std_dev, 17, false) << ','
           << format_number(p.rejection_rate, 17, false) << ',' << s.reps_total << ','
           << s.reps_converged << ',' << s.reps_boundary << '\n';
      }
    }
    return os.str();
  }
  for (size_t si = 0; si < summaries.size(); ++si) {
    const auto& s = summaries[si];
    if (si > 0) os << '\n';
    os << "### " << s.estimator << " (reps " << s.reps_total << ", converged " << s.reps_converged
       << ", boundary " << s.reps_boundary << ")\n\n|";
    for (const auto& p : s.params) os << " | " << p.name;
    os << " |\n|---";
    for (size_t i = 0; i < s.params.size(); ++i) os << "|---:";
    os << "|\n";
    const char* labels[] = {"Median", "Rob.Std.Dev.", "Std.Dev.", "Est.Std.Dev.", "Rej."};
    for (int row = 0; row < 5; ++row) {
      os << "| " << labels[row];
      for (const auto& p : s.params) {
        const double v = row == 0   ? p.median
                         : row == 1 ? p.rob_std_dev
                         : row == 2 ? p.std_dev
                         : row == 3 ? p.est_std_dev
                                    : p.rejection_rate;
        os << " | " << format_number(v, 3, true);
      }
      os << " |\n";
    }
  }
  return os.str();
}

inline std::string dump_reps_csv(const McResult& res) {
  std::ostringstream os;
  os << "rep,estimator,converged,boundary,parameter,estimate,std_err,truth,error\n";
  for (const auto& r : res.reps) {
    for (size_t i = 0; i < r.names.size(); ++i) {
      if (!r.estimated[i]) continue;
      std::string err = r.error;
      std::replace(err.begin(), err.end(), ',', ';');
      os << r.rep << ',' << r.estimator << ',' << (r.converged ? 1 : 0) << ',' << (r.boundary ? 1 : 0)
         << ',' << r.names[i] << ',' << format_number(r.values(i), 17, false) << ','
         << format_number(r.std_err(i), 17, false) << ',' << format_number(r.truth(i), 17, false)
         << ',' << err << '\n';
    }
  }
  return os.str();
}

}  // namespace peerqml
