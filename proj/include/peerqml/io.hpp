#pragma once

// CSV ingestion and emission of datasets, run-config parsing and JSON output.

#include <algorithm>
#include <charconv>
#include <cmath>
#include <cstdint>
#include <fstream>
#include <iomanip>
#include <limits>
#include <set>
#include <sstream>
#include <string>
#include <vector>

#include <json.hpp>

#include "errors.hpp"
#include "estimators.hpp"
#include "mc.hpp"
#include "model.hpp"
#include "simulate.hpp"

namespace peerqml {

using json = nlohmann::ordered_json;

inline constexpr const char* kSpecVersion = "1.0";

inline std::string read_file(const std::string& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) fail(ErrorKind::io, "cannot open '" + path + "' for reading");
  std::ostringstream os;
  os << in.rdbuf();
  if (in.bad()) fail(ErrorKind::io, "error while reading '" + path + "'");
  return os.str();
}

inline void write_file(const std::string& path, const std::string& content) {
  std::ofstream out(path, std::ios::binary | std::ios::trunc);
  if (!out) fail(ErrorKind::io, "cannot open '" + path + "' for writing");
  out << content;
  out.flush();
  if (!out) fail(ErrorKind::io, "error while writing '" + path + "'");
}

inline std::vector<std::string> split_csv_line(const std::string& line, int lineno) {
  std::vector<std::string> out;
  std::string cur;
  bool quoted = false;
  for (size_t i = 0; i < line.size(); ++i) {
    const char ch = line[i];
    if (quoted) {
      if (ch == '"') {
        if (i + 1 < line.size() && line[i + 1] == '"') {
          cur += '"';
          ++i;
        } else {
          quoted = false;
        }
      } else {
        cur += ch;
      }
    } else if (ch == '"') {
      quoted = true;
    } else if (ch == ',') {
      out.push_back(cur);
      cur.clear();
    } else {
      cur += ch;
    }
  }
  if (quoted) fail(ErrorKind::parse, "line " + std::to_string(lineno) + ": unterminated quote");
  out.push_back(cur);
  return out;
}

inline double parse_double(const std::string& s, int lineno, const std::string& col) {
  double v = 0.0;
  const char* b = s.data();
  const char* e = s.data() + s.size();
  while (b < e && *b == ' ') ++b;
  while (e > b && (e[-1] == ' ' || e[-1] == '\r')) --e;
  if (b < e && *b == '+') ++b;
  const auto res = std::from_chars(b, e, v);
  if (b == e || res.ec != std::errc() || res.ptr != e || !std::isfinite(v)) {
    fail(ErrorKind::parse, "line " + std::to_string(lineno) + ", column " + col +
                               ": missing or invalid number '" + s + "'");
  }
  return v;
}

inline int parse_int(const std::string& s, int lineno, const std::string& col) {
  const double v = parse_double(s, lineno, col);
  if (v != std::floor(v) || std::abs(v) > 1e9) {
    fail(ErrorKind::parse, "line " + std::to_string(lineno) + ", column " + col + ": expected an integer");
  }
  return static_cast<int>(v);
}

struct CsvTable {
  std::vector<Record> records;
  Schema schema;
};

inline CsvTable parse_dataset_csv(const std::string& text) {
  std::istringstream in(text);
  std::string line;
  int lineno = 0;
  std::vector<std::string> header;
  while (std::getline(in, line)) {
    ++lineno;
    if (!line.empty() && line.back() == '\r') line.pop_back();
    if (lineno == 1 && line.size() >= 3 && line.compare(0, 3, "\xEF\xBB\xBF") == 0) line.erase(0, 3);
    if (!line.empty()) {
      header = split_csv_line(line, lineno);
      break;
    }
  }
  if (header.empty()) fail(ErrorKind::parse, "CSV input has no header row");
  int cg = -1, cc = -1, cy = -1;
  std::vector<int> c1, c2, c3;
  CsvTable t;
  std::set<std::string> seen;
  for (int i = 0; i < static_cast<int>(header.size()); ++i) {
    const std::string& h = header[i];
    if (!seen.insert(h).second) fail(ErrorKind::parse, "duplicate column '" + h + "'");
    if (h == "group") cg = i;
    else if (h == "category") cc = i;
    else if (h == "y") cy = i;
    else if (h.rfind("x1_", 0) == 0) { c1.push_back(i); t.schema.x1_names.push_back(h); }
    else if (h.rfind("x2_", 0) == 0) { c2.push_back(i); t.schema.x2_names.push_back(h); }
    else if (h.rfind("x3_", 0) == 0) { c3.push_back(i); t.schema.x3_names.push_back(h); }
    else fail(ErrorKind::parse, "unknown column '" + h + "'");
  }
  if (cg < 0 || cc < 0 || cy < 0) fail(ErrorKind::parse, "CSV header must contain group, category and y");
  while (std::getline(in, line)) {
    ++lineno;
    if (!line.empty() && line.back() == '\r') line.pop_back();
    if (line.empty()) continue;
    const auto f = split_csv_line(line, lineno);
    if (f.size() != header.size()) {
      fail(ErrorKind::parse, "line " + std::to_string(lineno) + ": expected " +
                                 std::to_string(header.size()) + " fields");
    }
    Record r;
    r.group = f[cg];
    if (r.group.empty()) fail(ErrorKind::parse, "line " + std::to_string(lineno) + ": empty group id");
    r.category = parse_int(f[cc], lineno, "category");
    r.y = parse_double(f[cy], lineno, "y");
    for (int i : c1) r.x1.push_back(parse_double(f[i], lineno, header[i]));
    for (int i : c2) r.x2.push_back(parse_double(f[i], lineno, header[i]));
    for (int i : c3) r.x3.push_back(parse_double(f[i], lineno, header[i]));
    t.records.push_back(std::move(r));
  }
  return t;
}

inline Dataset read_dataset_csv(const std::string& path, int J = 0) {
  CsvTable t = parse_dataset_csv(read_file(path));
  t.schema.J = J;
  return build_dataset(t.records, t.schema);
}

inline std::string num17(double v) {
  if (!std::isfinite(v)) return "NaN";
  std::ostringstream os;
  os << std::setprecision(17) << v;
  return os.str();
}

inline std::string csv_field(const std::string& s) {
  if (s.find_first_of(",\"\n") == std::string::npos) return s;
  std::string out = "\"";
  for (char ch : s) {
    if (ch == '"') out += '"';
    out += ch;
  }
  return out + "\"";
}

inline std::string dataset_to_csv(const Dataset& d) {
  std::ostringstream os;
  os << "group,category,y";
  for (const auto& n : d.x1_names) os << ',' << n;
  for (const auto& n : d.x2_names) os << ',' << n;
  for (const auto& n : d.x3_names) os << ',' << n;
  os << '\n';
  for (const auto& r : to_records(d)) {
    os << csv_field(r.group) << ',' << r.category << ',' << num17(r.y);
    for (double x : r.x1) os << ',' << num17(x);
    for (double x : r.x2) os << ',' << num17(x);
    for (double x : r.x3) os << ',' << num17(x);
    os << '\n';
  }
  return os.str();
}

// JSON text with every floating-point number written at 17 significant digits
// and non-finite numbers as null.
inline void dump17_into(const json& j, std::ostringstream& os, int indent, int level) {
  const std::string pad(static_cast<size_t>(indent * (level + 1)), ' ');
  const std::string close(static_cast<size_t>(indent * level), ' ');
  switch (j.type()) {
    case json::value_t::object: {
      if (j.empty()) { os << "{}"; return; }
      os << "{\n";
      size_t i = 0;
      for (auto it = j.begin(); it != j.end(); ++it, ++i) {
        os << pad << json(it.key()).dump() << ": ";
        dump17_into(it.value(), os, indent, level + 1);
        os << (i + 1 < j.size() ? ",\n" : "\n");
      }
      os << close << '}';
      return;
    }
    case json::value_t::array: {
      if (j.empty()) { os << "[]"; return; }
      os << "[\n";
      for (size_t i = 0; i < j.size(); ++i) {
        os << pad;
        dump17_into(j[i], os, indent, level + 1);
        os << (i + 1 < j.size() ? ",\n" : "\n");
      }
      os << close << ']';
      return;
    }
    case json::value_t::number_float: {
      const double v = j.get<double>();
      if (!std::isfinite(v)) { os << "null"; return; }
      std::ostringstream num;
      num << std::setprecision(17) << v;
      std::string s = num.str();
      if (s.find_first_of(".eE") == std::string::npos) s += ".0";
      os << s;
      return;
    }
    default:
      os << j.dump();
  }
}

inline std::string dump17(const json& j) {
  std::ostringstream os;
  dump17_into(j, os, 2, 0);
  os << '\n';
  return os.str();
}

// Run configuration with defaults for every optional key.
struct RunConfig {
  Design design;
  std::vector<std::string> estimators{"qmle"};
  FitOptions fit;
  int reps = 1000;
  std::uint64_t seed = 20240101;
  std::string out_data, out_truth, out_table, out_dump;
  TableFormat format = TableFormat::markdown;
};

namespace detail {

[[noreturn]] inline void schema_error(const std::string& path, const std::string& msg) {
  fail(ErrorKind::schema, path + ": " + msg);
}

inline void allow_keys(const json& j, const std::string& path, std::initializer_list<const char*> keys) {
  if (!j.is_object()) schema_error(path.empty() ? "/" : path, "expected an object");
  for (auto it = j.begin(); it != j.end(); ++it) {
    bool ok = false;
    for (const char* k : keys) ok |= it.key() == k;
    if (!ok) schema_error(path + "/" + it.key(), "unknown key");
  }
}

inline double get_num(const json& j, const std::string& path) {
  if (!j.is_number()) schema_error(path, "expected a number");
  return j.get<double>();
}

inline int get_int(const json& j, const std::string& path) {
  if (!j.is_number_integer()) schema_error(path, "expected an integer");
  const auto v = j.get<std::int64_t>();
  if (v < std::numeric_limits<int>::min() || v > std::numeric_limits<int>::max()) {
    schema_error(path, "integer out of range");
  }
  return static_cast<int>(v);
}

inline std::uint64_t get_u64(const json& j, const std::string& path) {
  if (j.is_number_unsigned()) return j.get<std::uint64_t>();
  if (j.is_number_integer() && j.get<std::int64_t>() >= 0) return static_cast<std::uint64_t>(j.get<std::int64_t>());
  schema_error(path, "expected a nonnegative integer");
}

inline bool get_bool(const json& j, const std::string& path) {
  if (!j.is_boolean()) schema_error(path, "expected a boolean");
  return j.get<bool>();
}

inline std::string get_str(const json& j, const std::string& path) {
  if (!j.is_string()) schema_error(path, "expected a string");
  return j.get<std::string>();
}

inline std::vector<double> get_vec(const json& j, const std::string& path) {
  if (!j.is_array()) schema_error(path, "expected an array of numbers");
  std::vector<double> v;
  for (size_t i = 0; i < j.size(); ++i) v.push_back(get_num(j[i], path + "/" + std::to_string(i)));
  return v;
}

inline Design parse_design(const json& j, const std::string& path) {
  allow_keys(j, path, {"R", "size_dist", "J", "category_rule", "x_mode", "error_dist",
                       "sigma_eps2_by_category", "sigma_alpha2", "lambda", "beta", "freeze_z",
                       "max_group_size", "covariates"});
  Design d;
  if (j.contains("R")) d.R = get_int(j["R"], path + "/R");
  if (j.contains("size_dist")) {
    const json& s = j["size_dist"];
    const std::string p = path + "/size_dist";
    if (!s.is_object() || !s.contains("type")) schema_error(p, "expected an object with a type");
    const std::string type = get_str(s["type"], p + "/type");
    if (type == "uniform_discrete") {
      allow_keys(s, p, {"type", "lo", "hi"});
      d.size_dist = SizeDist::uniform_discrete;
      if (!s.contains("lo") || !s.contains("hi")) schema_error(p, "uniform_discrete needs lo and hi");
      d.size_lo = get_int(s["lo"], p + "/lo");
      d.size_hi = get_int(s["hi"], p + "/hi");
    } else if (type == "fixed") {
      allow_keys(s, p, {"type", "m"});
      d.size_dist = SizeDist::fixed;
      if (!s.contains("m")) schema_error(p, "fixed needs m");
      d.size_fixed = get_int(s["m"], p + "/m");
    } else {
      schema_error(p + "/type", "expected uniform_discrete or fixed");
    }
  }
  if (j.contains("J")) d.J = get_int(j["J"], path + "/J");
  if (j.contains("category_rule")) {
    const json& s = j["category_rule"];
    const std::string p = path + "/category_rule";
    if (!s.is_object() || !s.contains("type")) schema_error(p, "expected an object with a type");
    const std::string type = get_str(s["type"], p + "/type");
    if (type == "random_equal_split") {
      allow_keys(s, p, {"type"});
      d.category_rule = CategoryRule::random_equal_split;
    } else if (type == "by_size") {
      allow_keys(s, p, {"type", "threshold"});
      d.category_rule = CategoryRule::by_size;
      if (!s.contains("threshold")) schema_error(p, "by_size needs threshold");
      d.size_threshold = get_int(s["threshold"], p + "/threshold");
    } else {
      schema_error(p + "/type", "expected random_equal_split or by_size");
    }
  }
  if (j.contains("x_mode")) {
    const std::string v = get_str(j["x_mode"], path + "/x_mode");
    if (v == "x1_eq_x2") d.x_mode = XMode::x1_eq_x2;
    else if (v == "x1_neq_x2") d.x_mode = XMode::x1_neq_x2;
    else schema_error(path + "/x_mode", "expected x1_eq_x2 or x1_neq_x2");
  }
  if (j.contains("error_dist")) {
    const std::string v = get_str(j["error_dist"], path + "/error_dist");
    if (v == "normal") d.error_dist = ErrorDist::normal;
    else if (v == "skew_normal") d.error_dist = ErrorDist::skew_normal;
    else if (v == "student_t6") d.error_dist = ErrorDist::student_t6;
    else schema_error(path + "/error_dist", "expected normal, skew_normal or student_t6");
  }
  if (j.contains("sigma_eps2_by_category")) {
    d.sigma_eps2_by_category = get_vec(j["sigma_eps2_by_category"], path + "/sigma_eps2_by_category");
  } else {
    d.sigma_eps2_by_category.assign(std::max(d.J, 1), 1.0);
  }
  if (j.contains("sigma_alpha2")) d.sigma_alpha2 = get_num(j["sigma_alpha2"], path + "/sigma_alpha2");
  if (j.contains("lambda")) d.lambda = get_num(j["lambda"], path + "/lambda");
  if (j.contains("covariates")) d.covariates = get_bool(j["covariates"], path + "/covariates");
  if (!d.covariates) d.beta = {1.0};
  if (j.contains("beta")) d.beta = get_vec(j["beta"], path + "/beta");
  if (j.contains("freeze_z")) d.freeze_z = get_bool(j["freeze_z"], path + "/freeze_z");
  if (j.contains("max_group_size")) d.max_group_size = get_int(j["max_group_size"], path + "/max_group_size");
  try {
    validate_design(d);
  } catch (const Error& e) {
    schema_error(path, e.what());
  }
  return d;
}

inline FitOptions parse_fit(const json& j, const std::string& path) {
  allow_keys(j, path, {"max_iter", "grad_tol", "multistart", "lambda_bounds", "sigma_eps2_bounds",
                       "cmle_lambda_hi", "seed", "force"});
  FitOptions f;
  if (j.contains("max_iter")) f.max_iter = get_int(j["max_iter"], path + "/max_iter");
  if (j.contains("grad_tol")) f.grad_tol = get_num(j["grad_tol"], path + "/grad_tol");
  if (j.contains("multistart")) f.multistart = get_int(j["multistart"], path + "/multistart");
  auto pair = [&](const char* key, double& lo, double& hi) {
    if (!j.contains(key)) return;
    const auto v = get_vec(j[key], path + "/" + key);
    if (v.size() != 2) schema_error(path + "/" + key, "expected [lo, hi]");
    lo = v[0];
    hi = v[1];
  };
  pair("lambda_bounds", f.lambda_lo, f.lambda_hi);
  pair("sigma_eps2_bounds", f.sigma_eps2_lo, f.sigma_eps2_hi);
  if (j.contains("cmle_lambda_hi")) f.cmle_lambda_hi = get_num(j["cmle_lambda_hi"], path + "/cmle_lambda_hi");
  if (j.contains("seed")) f.seed = get_u64(j["seed"], path + "/seed");
  if (j.contains("force")) f.force = get_bool(j["force"], path + "/force");
  try {
    validate_fit_options(f);
  } catch (const Error& e) {
    schema_error(path, e.what());
  }
  return f;
}

}  // namespace detail

inline RunConfig parse_run_config(const std::string& text) {
  json j;
  try {
    j = json::parse(text);
  } catch (const json::parse_error& e) {
    fail(ErrorKind::parse, std::string("config is not valid JSON: ") + e.what());
  }
  detail::allow_keys(j, "", {"design", "estimators", "fit", "reps", "seed", "output"});
  RunConfig c;
  if (j.contains("design")) {
    c.design = detail::parse_design(j["design"], "/design");
  }
  if (j.contains("estimators")) {
    const json& e = j["estimators"];
    if (!e.is_array() || e.empty()) detail::schema_error("/estimators", "expected a nonempty array");
    c.estimators.clear();
    for (size_t i = 0; i < e.size(); ++i) {
      const std::string p = "/estimators/" + std::to_string(i);
      const std::string name = detail::get_str(e[i], p);
      if (std::find(known_estimators().begin(), known_estimators().end(), name) == known_estimators().end()) {
        detail::schema_error(p, "unknown estimator '" + name + "'");
      }
      c.estimators.push_back(name);
    }
  }
  if (j.contains("fit")) c.fit = detail::parse_fit(j["fit"], "/fit");
  if (j.contains("reps")) {
    c.reps = detail::get_int(j["reps"], "/reps");
    if (c.reps < 1) detail::schema_error("/reps", "must be >= 1");
  }
  if (j.contains("seed")) c.seed = detail::get_u64(j["seed"], "/seed");
  if (j.contains("output")) {
    const json& o = j["output"];
    detail::allow_keys(o, "/output", {"data", "truth", "table", "format", "dump_reps"});
    if (o.contains("data")) c.out_data = detail::get_str(o["data"], "/output/data");
    if (o.contains("truth")) c.out_truth = detail::get_str(o["truth"], "/output/truth");
    if (o.contains("table")) c.out_table = detail::get_str(o["table"], "/output/table");
    if (o.contains("dump_reps")) c.out_dump = detail::get_str(o["dump_reps"], "/output/dump_reps");
    if (o.contains("format")) {
      const std::string f = detail::get_str(o["format"], "/output/format");
      if (f == "markdown") c.format = TableFormat::markdown;
      else if (f == "csv") c.format = TableFormat::csv;
      else detail::schema_error("/output/format", "expected markdown or csv");
    }
  }
  return c;
}

inline json delta_json(const Delta& d) {
  json j;
  j["lambda"] = d.theta.lambda;
  j["sigma_alpha2"] = d.theta.sigma_alpha2;
  j["sigma_eps2"] = json::array();
  for (int i = 0; i < d.theta.sigma_eps2.size(); ++i) j["sigma_eps2"].push_back(d.theta.sigma_eps2(i));
  j["beta"] = json::array();
  for (int i = 0; i < d.beta.size(); ++i) j["beta"].push_back(d.beta(i));
  return j;
}

inline json ident_json(const IdentReport& r) {
  json j;
  j["identified"] = r.identified;
  j["scenario_a"] = r.scenario_a;
  j["scenario_b"] = r.scenario_b;
  if (!r.note.empty()) j["note"] = r.note;
  j["sizes_by_category"] = json::array();
  for (const auto& [key, n] : r.sizes_by_category) {
    j["sizes_by_category"].push_back({{"m", key.first}, {"category", key.second}, {"groups", n}});
  }
  return j;
}

inline json estimate_json(const Estimate& e, const Dataset& d) {
  json j;
  j["spec_version"] = kSpecVersion;
  j["estimator"] = e.estimator;
  j["N"] = d.N;
  j["R"] = d.R;
  j["J"] = d.J;
  j["regressors"] = d.z_names;
  j["parameters"] = json::array();
  const Eigen::VectorXd v = to_vector(e.delta);
  for (size_t i = 0; i < e.names.size(); ++i) {
    json p;
    p["name"] = e.names[i];
    p["estimated"] = e.estimated.empty() ? true : static_cast<bool>(e.estimated[i]);
    p["estimate"] = v.size() > static_cast<Eigen::Index>(i) ? v(i) : std::numeric_limits<double>::quiet_NaN();
    p["std_err"] = e.std_err.size() > static_cast<Eigen::Index>(i) ? e.std_err(i) : std::numeric_limits<double>::quiet_NaN();
    j["parameters"].push_back(p);
  }
  j["vcov"] = json::array();
  for (int r = 0; r < e.vcov.rows(); ++r) {
    json row = json::array();
    for (int c = 0; c < e.vcov.cols(); ++c) row.push_back(e.vcov(r, c));
    j["vcov"].push_back(row);
  }
  j["loglik"] = e.loglik;
  j["converged"] = e.converged;
  j["iterations"] = e.iterations;
  j["boundary_sigma_alpha"] = e.boundary_sigma_alpha;
  j["dropped_columns"] = e.dropped_columns;
  j["identification"] = ident_json(check_identification(d));
  j["warnings"] = e.warnings;
  return j;
}

inline json design_json(const Design& d) {
  json j;
  j["R"] = d.R;
  if (d.size_dist == SizeDist::uniform_discrete) {
    j["size_dist"] = {{"type", "uniform_discrete"}, {"lo", d.size_lo}, {"hi", d.size_hi}};
  } else {
    j["size_dist"] = {{"type", "fixed"}, {"m", d.size_fixed}};
  }
  j["J"] = d.J;
  if (d.category_rule == CategoryRule::random_equal_split) {
    j["category_rule"] = {{"type", "random_equal_split"}};
  } else {
    j["category_rule"] = {{"type", "by_size"}, {"threshold", d.size_threshold}};
  }
  j["x_mode"] = d.x_mode == XMode::x1_eq_x2 ? "x1_eq_x2" : "x1_neq_x2";
  j["error_dist"] = d.error_dist == ErrorDist::normal        ? "normal"
                    : d.error_dist == ErrorDist::skew_normal ? "skew_normal"
                                                             : "student_t6";
  j["sigma_eps2_by_category"] = d.sigma_eps2_by_category;
  j["sigma_alpha2"] = d.sigma_alpha2;
  j["lambda"] = d.lambda;
  j["beta"] = d.beta;
  j["freeze_z"] = d.freeze_z;
  j["max_group_size"] = d.max_group_size;
  j["covariates"] = d.covariates;
  return j;
}

inline json truth_json(const Design& design, const Delta& truth, std::uint64_t seed) {
  json j;
  j["spec_version"] = kSpecVersion;
  j["seed"] = seed;
  j["truth"] = delta_json(truth);
  j["design"] = design_json(design);
  return j;
}

}  // namespace peerqml
