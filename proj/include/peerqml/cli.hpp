#pragma once

// Command-line surface: simulate, estimate, mc and identify subcommands.

#include <algorithm>
#include <cstdint>
#include <iostream>
#include <optional>
#include <sstream>
#include <string>
#include <thread>
#include <vector>

#include <CLI11.hpp>

#include "errors.hpp"
#include "estimators.hpp"
#include "io.hpp"
#include "mc.hpp"
#include "model.hpp"
#include "simulate.hpp"

namespace peerqml {

enum ExitCode : int {
  kExitOk = 0,
  kExitOther = 1,
  kExitSchema = 2,
  kExitIo = 3,
  kExitIdentification = 4,
  kExitNonConvergence = 5,
};

inline int exit_code_for(ErrorKind k) {
  switch (k) {
    case ErrorKind::parse:
    case ErrorKind::schema:
    case ErrorKind::category:
    case ErrorKind::singleton_group:
      return kExitSchema;
    case ErrorKind::io:
      return kExitIo;
    case ErrorKind::identification:
    case ErrorKind::weak_identification:
      return kExitIdentification;
    case ErrorKind::non_convergence:
      return kExitNonConvergence;
    default:
      return kExitOther;
  }
}

struct CliOptions {
  std::string config, data, out, estimator = "qmle", cv_variant = "leave_out_mean", dump_reps, format;
  int J = 0;
  std::optional<int> reps;
  std::optional<std::uint64_t> seed;
  int threads = static_cast<int>(std::max(1u, std::thread::hardware_concurrency()));
  bool force = false;
};

inline void emit(const std::string& path, const std::string& text, std::ostream& out) {
  if (path.empty()) {
    out << text;
  } else {
    write_file(path, text);
  }
}

inline RunConfig load_config(const std::string& path) {
  if (path.empty()) fail(ErrorKind::schema, "--config is required");
  return parse_run_config(read_file(path));
}

inline int cmd_simulate(const CliOptions& o, std::ostream& out) {
  const RunConfig c = load_config(o.config);
  const std::uint64_t seed = o.seed.value_or(c.seed);
  const std::string data_path = o.out.empty() ? c.out_data : o.out;
  if (data_path.empty()) fail(ErrorKind::schema, "/output/data: no output path (use --out)");
  const std::string truth_path = !o.out.empty() || c.out_truth.empty() ? data_path + ".truth.json" : c.out_truth;
  const SimResult sim = gen_dataset(c.design, seed);
  write_file(data_path, dataset_to_csv(sim.dataset));
  write_file(truth_path, dump17(truth_json(c.design, sim.truth, seed)));
  out << "wrote " << sim.dataset.N << " rows in " << sim.dataset.R << " groups to " << data_path << '\n';
  return kExitOk;
}

inline int cmd_estimate(const CliOptions& o, std::ostream& out) {
  if (o.data.empty()) fail(ErrorKind::schema, "--data is required");
  FitOptions fit;
  if (!o.config.empty()) fit = load_config(o.config).fit;
  if (o.seed) fit.seed = *o.seed;
  fit.force = fit.force || o.force;
  fit.require_vcov = false;
  const Dataset d = read_dataset_csv(o.data, o.J);

  if (o.estimator == "cv") {
    const CvSpec spec = o.cv_variant == "full_mean" ? CvSpec::full_mean : CvSpec::leave_out_mean;
    const CvResult r = fit_graham_cv(d, spec);
    json j;
    j["spec_version"] = kSpecVersion;
    j["estimator"] = "cv";
    j["variant"] = o.cv_variant;
    j["N"] = d.N;
    j["R"] = d.R;
    j["J"] = d.J;
    j["parameters"] = json::array({json{{"name", "lambda"}, {"estimate", r.lambda}},
                                   json{{"name", "sigma_alpha2"}, {"estimate", r.sigma_alpha2}}});
    j["identification"] = ident_json(check_identification(d));
    j["warnings"] = json::array();
    emit(o.out, dump17(j), out);
    return kExitOk;
  }

  if (!fit.force && !check_identification(d).identified) {
    fail(ErrorKind::identification,
         "the data do not satisfy the identification condition; rerun with --force to fit anyway");
  }
  try {
    const Estimate e = o.estimator == "cmle" ? fit_cmle(d, fit) : fit_qmle(d, fit);
    emit(o.out, dump17(estimate_json(e, d)), out);
    return kExitOk;
  } catch (const NonConvergenceError& e) {
    Estimate best = e.best();
    best.warnings.push_back(e.what());
    emit(o.out, dump17(estimate_json(best, d)), out);
    throw;
  }
}

inline int cmd_mc(const CliOptions& o, std::ostream& out) {
  RunConfig c = load_config(o.config);
  if (o.reps) c.reps = *o.reps;
  if (c.reps < 1) fail(ErrorKind::schema, "/reps: must be >= 1");
  if (o.seed) c.seed = *o.seed;
  if (o.format == "csv") c.format = TableFormat::csv;
  if (o.format == "markdown") c.format = TableFormat::markdown;
  if (o.threads < 1) fail(ErrorKind::schema, "--threads must be >= 1");
  const McResult res = run_mc(c.design, c.estimators, c.reps, c.seed, o.threads, c.fit);
  std::vector<McSummary> sums;
  for (const auto& name : c.estimators) sums.push_back(res.summaries.at(name));
  emit(o.out.empty() ? c.out_table : o.out, emit_table(sums, c.format), out);
  const std::string dump = o.dump_reps.empty() ? c.out_dump : o.dump_reps;
  if (!dump.empty()) write_file(dump, dump_reps_csv(res));
  return kExitOk;
}

inline int cmd_identify(const CliOptions& o, std::ostream& out) {
  if (o.data.empty()) fail(ErrorKind::schema, "--data is required");
  const Dataset d = read_dataset_csv(o.data, o.J);
  const IdentReport r = check_identification(d);
  out << "| m | category | groups |\n|---:|---:|---:|\n";
  for (const auto& [key, n] : r.sizes_by_category) {
    out << "| " << key.first << " | " << key.second << " | " << n << " |\n";
  }
  out << "scenario_a: " << (r.scenario_a ? "yes" : "no") << '\n';
  out << "scenario_b: " << (r.scenario_b ? "yes" : "no") << '\n';
  if (!r.note.empty()) out << "note: " << r.note << '\n';
  out << "identified: " << (r.identified ? "yes" : "no") << '\n';
  return r.identified ? kExitOk : kExitOther;
}

inline int run_cli(std::vector<std::string> args, std::ostream& out, std::ostream& err) {
  CLI::App app{"peerqml: peer-effects estimation with group random effects"};
  app.require_subcommand(1);
  CliOptions o;
  auto* sim = app.add_subcommand("simulate", "generate a dataset from a design config");
  auto* est = app.add_subcommand("estimate", "fit a model to a CSV dataset");
  auto* mc = app.add_subcommand("mc", "run a Monte Carlo experiment");
  auto* idn = app.add_subcommand("identify", "report the identification check for a dataset");

  for (auto* s : {sim, est, mc}) s->add_option("--config", o.config, "run config JSON");
  for (auto* s : {est, idn}) {
    s->add_option("--data", o.data, "dataset CSV")->required();
    s->add_option("--J", o.J, "number of categories (default: largest category present)");
  }
  for (auto* s : {sim, est, mc}) s->add_option("--out", o.out, "output path (default: stdout or config)");
  for (auto* s : {sim, est, mc}) s->add_option("--seed", o.seed, "seed (overrides the config)");
  sim->get_option("--config")->required();
  mc->get_option("--config")->required();
  est->add_option("--estimator", o.estimator, "qmle, cmle or cv")
      ->check(CLI::IsMember({"qmle", "cmle", "cv"}));
  est->add_option("--cv-variant", o.cv_variant, "leave_out_mean or full_mean")
      ->check(CLI::IsMember({"leave_out_mean", "full_mean"}));
  est->add_flag("--force", o.force, "fit even when the identification check fails");
  mc->add_option("--reps", o.reps, "replications (overrides the config)");
  mc->add_option("--threads", o.threads, "worker threads");
  mc->add_option("--dump-reps", o.dump_reps, "per-replication CSV dump");
  mc->add_option("--format", o.format, "markdown or csv")->check(CLI::IsMember({"markdown", "csv"}));

  std::reverse(args.begin(), args.end());
  try {
    app.parse(args);
  } catch (const CLI::Success& e) {
    app.exit(e, out, err);
    return kExitOk;
  } catch (const CLI::ParseError& e) {
    err << "error: " << e.what() << '\n';
    return kExitSchema;
  }

  try {
    if (sim->parsed()) return cmd_simulate(o, out);
    if (est->parsed()) return cmd_estimate(o, out);
    if (mc->parsed()) return cmd_mc(o, out);
    return cmd_identify(o, out);
  } catch (const Error& e) {
    err << "error: " << e.what() << '\n';
    return exit_code_for(e.kind());
  } catch (const std::exception& e) {
    err << "error: " << e.what() << '\n';
    return kExitOther;
  }
}

}  // namespace peerqml
