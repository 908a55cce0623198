#pragma once

#include <cmath>
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <limits>
#include <map>
#include <sstream>
#include <string>
#include <vector>

#include "json.hpp"
#include "mocomsi/core/error.hpp"
#include "mocomsi/evaluation/metrics.hpp"
#include "mocomsi/evaluation/stats.hpp"

namespace mocomsi {

inline constexpr double kNaN = std::numeric_limits<double>::quiet_NaN();

struct EvalReport {
  std::string method;  // "grouped" or "baseline"
  std::uint64_t run_seed = 0;
  double threshold = 0.5;
  std::string aggregation = "mean_prob";
  double a_patch = kNaN;    // per patch (extrapolated from groups for the grouped method)
  double a_group = kNaN;    // per group; grouped method only
  double a_patient = kNaN;
  double auc_patch = kNaN;
  double auc_patient = kNaN;
  std::vector<RocPoint> roc_patch;
  std::vector<RocPoint> roc_patient;
  std::size_t n_patients = 0;
  std::size_t n_patches = 0;
  bool balanced = false;
};

namespace detail {
inline nlohmann::json num(double v) { return std::isfinite(v) ? nlohmann::json(v) : nlohmann::json(nullptr); }
inline double num(const nlohmann::json& j) { return j.is_null() ? kNaN : j.get<double>(); }
inline nlohmann::json roc_json(const std::vector<RocPoint>& pts) {
  auto arr = nlohmann::json::array();
  for (const auto& p : pts) arr.push_back({p.fpr, p.tpr, num(p.threshold)});
  return arr;
}
inline std::vector<RocPoint> roc_from(const nlohmann::json& j) {
  std::vector<RocPoint> out;
  for (const auto& p : j) {
    out.push_back({p[0].get<double>(), p[1].get<double>(),
                   p[2].is_null() ? std::numeric_limits<double>::infinity() : p[2].get<double>()});
  }
  return out;
}
}  // namespace detail

inline void to_json(nlohmann::json& j, const EvalReport& r) {
  j = {{"method", r.method},
       {"run_seed", r.run_seed},
       {"threshold", r.threshold},
       {"aggregation", r.aggregation},
       {"balanced", r.balanced},
       {"A_patch", detail::num(r.a_patch)},
       {"A_group", detail::num(r.a_group)},
       {"A_patient", detail::num(r.a_patient)},
       {"auc_patch", detail::num(r.auc_patch)},
       {"auc_patient", detail::num(r.auc_patient)},
       {"n_patients", r.n_patients},
       {"n_patches", r.n_patches},
       {"roc_patch", detail::roc_json(r.roc_patch)},
       {"roc_patient", detail::roc_json(r.roc_patient)}};
}

inline void from_json(const nlohmann::json& j, EvalReport& r) {
  j.at("method").get_to(r.method);
  j.at("run_seed").get_to(r.run_seed);
  j.at("threshold").get_to(r.threshold);
  j.at("aggregation").get_to(r.aggregation);
  r.balanced = j.value("balanced", false);
  r.a_patch = detail::num(j.at("A_patch"));
  r.a_group = detail::num(j.at("A_group"));
  r.a_patient = detail::num(j.at("A_patient"));
  r.auc_patch = detail::num(j.at("auc_patch"));
  r.auc_patient = detail::num(j.at("auc_patient"));
  j.at("n_patients").get_to(r.n_patients);
  j.at("n_patches").get_to(r.n_patches);
  r.roc_patch = detail::roc_from(j.at("roc_patch"));
  r.roc_patient = detail::roc_from(j.at("roc_patient"));
}

inline void write_report(const EvalReport& r, const std::filesystem::path& path) {
  std::ofstream out(path);
  if (!out) throw IngestError("cannot write report: " + path.string());
  out << nlohmann::json(r).dump(2) << '\n';
}

inline EvalReport read_report(const std::filesystem::path& path) {
  std::ifstream in(path);
  if (!in) throw DependencyError("report not found: " + path.string());
  try {
    return nlohmann::json::parse(in).get<EvalReport>();
  } catch (const nlohmann::json::exception& e) {
    throw ParseError("malformed report " + path.string() + ": " + e.what());
  }
}

struct MetricSummary {
  double mean_a = kNaN, std_a = kNaN;
  double mean_b = kNaN, std_b = kNaN;
  TTestResult test;  // a vs b; flag undefined and NaN values when fewer than two runs
};

struct MultiRunSummary {
  std::string method_a, method_b;
  std::size_t runs = 0;
  std::map<std::string, MetricSummary> metrics;  // A_patient, A_patch, auc_patient, auc_patch
  std::vector<std::string> warnings;
};

inline const std::vector<std::string>& summary_metric_names() {
  static const std::vector<std::string> names{"A_patient", "A_patch", "auc_patient", "auc_patch"};
  return names;
}

inline double metric_of(const EvalReport& r, const std::string& name) {
  if (name == "A_patient") return r.a_patient;
  if (name == "A_patch") return r.a_patch;
  if (name == "auc_patient") return r.auc_patient;
  if (name == "auc_patch") return r.auc_patch;
  throw ContractViolation("unknown metric " + name);
}

// Mean and sample std per metric for two methods plus paired t-tests (a - b).
// Runs are paired position by position and must share their seed schedule.
inline MultiRunSummary summarize_runs(const std::vector<EvalReport>& a, const std::vector<EvalReport>& b) {
  if (a.size() != b.size()) {
    throw PairingError("summarize_runs: " + std::to_string(a.size()) + " runs vs " + std::to_string(b.size()));
  }
  if (a.empty()) throw DomainError("summarize_runs: no runs");
  for (std::size_t i = 0; i < a.size(); ++i) {
    if (a[i].run_seed != b[i].run_seed) {
      throw PairingError("summarize_runs: run " + std::to_string(i) + " seeds differ (" + std::to_string(a[i].run_seed) +
                         " vs " + std::to_string(b[i].run_seed) + ")");
    }
  }
  MultiRunSummary s;
  s.method_a = a.front().method;
  s.method_b = b.front().method;
  s.runs = a.size();
  if (s.runs < 2) s.warnings.push_back("single run per method: standard deviations and t-tests omitted");
  for (const auto& name : summary_metric_names()) {
    std::vector<double> xa, xb;
    for (std::size_t i = 0; i < a.size(); ++i) {
      xa.push_back(metric_of(a[i], name));
      xb.push_back(metric_of(b[i], name));
    }
    MetricSummary m;
    m.mean_a = mean_of(xa);
    m.mean_b = mean_of(xb);
    if (s.runs >= 2) {
      m.std_a = sample_std(xa);
      m.std_b = sample_std(xb);
      m.test = paired_t_test(xa, xb);
    } else {
      m.test.flag = TTestFlag::kUndefined;
      m.test.t = m.test.p = kNaN;
    }
    s.metrics[name] = m;
  }
  return s;
}

inline void to_json(nlohmann::json& j, const MultiRunSummary& s) {
  j = {{"method_a", s.method_a}, {"method_b", s.method_b}, {"runs", s.runs}, {"warnings", s.warnings}};
  for (const auto& [name, m] : s.metrics) {
    j["metrics"][name] = {{"mean_a", detail::num(m.mean_a)}, {"std_a", detail::num(m.std_a)},
                          {"mean_b", detail::num(m.mean_b)}, {"std_b", detail::num(m.std_b)},
                          {"t", detail::num(m.test.t)},      {"p", detail::num(m.test.p)},
                          {"df", m.test.df},                 {"flag", to_string(m.test.flag)}};
  }
}

// Table with one row per method, mean +- std per metric, then the paired tests.
inline std::string format_comparison(const MultiRunSummary& s) {
  std::ostringstream out;
  char buf[128];
  auto cell = [&](double mean, double sd) {
    if (std::isnan(sd)) std::snprintf(buf, sizeof buf, "%.3f", mean);
    else std::snprintf(buf, sizeof buf, "%.3f +- %.3f", mean, sd);
    return std::string(buf);
  };
  std::snprintf(buf, sizeof buf, "%-12s", "method");
  out << buf;
  for (const auto& name : summary_metric_names()) {
    std::snprintf(buf, sizeof buf, " | %-16s", name.c_str());
    out << buf;
  }
  out << "\n";
  for (int row = 0; row < 2; ++row) {
    std::snprintf(buf, sizeof buf, "%-12s", (row == 0 ? s.method_a : s.method_b).c_str());
    out << buf;
    for (const auto& name : summary_metric_names()) {
      const auto& m = s.metrics.at(name);
      const auto c = row == 0 ? cell(m.mean_a, m.std_a) : cell(m.mean_b, m.std_b);
      std::snprintf(buf, sizeof buf, " | %-16s", c.c_str());
      out << buf;
    }
    out << "\n";
  }
  out << "runs: " << s.runs << "\n";
  for (const auto& name : summary_metric_names()) {
    const auto& m = s.metrics.at(name);
    if (m.test.flag == TTestFlag::kUndefined && std::isnan(m.test.t)) {
      out << "paired t-test " << name << ": undefined\n";
      continue;
    }
    std::snprintf(buf, sizeof buf, "paired t-test %-11s: t = %.4f, df = %d, p = %.3g%s\n", name.c_str(), m.test.t,
                  m.test.df, m.test.p, m.test.flag == TTestFlag::kInfiniteT ? " (zero-variance differences)" : "");
    out << buf;
  }
  for (const auto& w : s.warnings) out << "warning: " << w << "\n";
  return out.str();
}

}  // namespace mocomsi
