#pragma once

/**
 * @file
 * @brief CSV and line-delimited JSON formats for runs, summaries, detection
 * streams, and control logs.
 *
 * Every file starts with `# key=value` comment lines, the first always being
 * `# config_hash=<hex>`. Numbers are written with 17 significant digits so a
 * read-back is exact.
 */

#include <json.hpp>

#include <algorithm>
#include <cstdio>
#include <istream>
#include <map>
#include <optional>
#include <ostream>
#include <sstream>
#include <string>
#include <vector>

#include "lcv/error.hpp"
#include "lcv/estimation.hpp"
#include "lcv/sim.hpp"

namespace lcv {

inline std::string fmt(double v)
{
  char buf[32];
  std::snprintf(buf, sizeof buf, "%.17g", v);
  return buf;
}

namespace detail {

inline void write_meta(std::ostream& os, const std::vector<std::pair<std::string, std::string>>& meta)
{
  for (const auto& [k, v] : meta) { os << "# " << k << '=' << v << '\n'; }
}

inline void write_header(std::ostream& os, const std::vector<std::string>& cols)
{
  for (std::size_t c = 0; c < cols.size(); ++c) { os << (c ? "," : "") << cols[c]; }
  os << '\n';
}

inline std::vector<std::string> split(const std::string& line, char sep)
{
  std::vector<std::string> out;
  std::string cell;
  std::stringstream ss(line);
  while (std::getline(ss, cell, sep)) { out.push_back(cell); }
  if (!line.empty() && line.back() == sep) { out.emplace_back(); }
  return out;
}

inline double parse_number(const std::string& s, std::size_t line)
{
  try {
    std::size_t used = 0;
    const double v = std::stod(s, &used);
    if (used != s.size()) { throw ParseError(line, "trailing characters in number '" + s + "'"); }
    return v;
  } catch (const std::logic_error&) {
    throw ParseError(line, "expected a number, got '" + s + "'");
  }
}

}  // namespace detail

/// Columns of a run file for an `n`-material system.
inline std::vector<std::string> run_columns(std::size_t n)
{
  std::vector<std::string> cols{"step", "speed", "u"};
  for (const char* prefix : {"station_mass_", "picked_", "exited_"}) {
    for (std::size_t i = 0; i < n; ++i) { cols.push_back(prefix + std::to_string(i)); }
  }
  for (const char* c : {"reward", "cumulative", "solver_iterations", "solver_stop"}) { cols.emplace_back(c); }
  return cols;
}

inline void write_run_csv(std::ostream& os, const RunRecord& rec, std::size_t n)
{
  detail::write_meta(os, {{"config_hash", rec.config_hash},
                          {"seed", std::to_string(rec.seed)},
                          {"controller", rec.controller}});
  detail::write_header(os, run_columns(n));
  for (const auto& r : rec.rows) {
    os << r.step << ',' << fmt(r.speed) << ',' << fmt(r.u);
    for (const auto* v : {&r.station_mass, &r.picked, &r.exited}) {
      for (double x : *v) { os << ',' << fmt(x); }
    }
    os << ',' << fmt(r.reward) << ',' << fmt(r.cumulative) << ',';
    if (r.solver) { os << r.solver->iterations << ',' << to_string(r.solver->reason); }
    else { os << ','; }
    os << '\n';
  }
}

inline const std::vector<std::string>& summary_columns()
{
  static const std::vector<std::string> cols{"seed", "mpc_total_value", "avg_mpc_speed", "baseline_total_value",
                                             "improvement_pct", "mpc_profit_rate", "baseline_profit_rate"};
  return cols;
}

inline void write_summary_csv(std::ostream& os, const PairedSummary& s, const std::string& hash)
{
  detail::write_meta(os, {{"config_hash", hash}});
  detail::write_header(os, summary_columns());
  for (const auto& r : s.rows) {
    os << r.seed << ',' << fmt(r.mpc_total_value) << ',' << fmt(r.avg_mpc_speed) << ',' << fmt(r.baseline_total_value)
       << ',' << fmt(r.improvement_pct) << ',' << fmt(r.mpc_profit_rate) << ',' << fmt(r.baseline_profit_rate) << '\n';
  }
  detail::write_meta(os, {{"runs", std::to_string(s.rows.size())},
                          {"mean_improvement_pct", fmt(s.mean_improvement_pct)},
                          {"median_improvement_pct", fmt(s.median_improvement_pct)},
                          {"mpc_wins", std::to_string(s.mpc_wins)},
                          {"mpc_profit_rate_mean", fmt(s.mpc_profit_rate_mean)},
                          {"mpc_profit_rate_var", fmt(s.mpc_profit_rate_var)},
                          {"baseline_profit_rate_mean", fmt(s.baseline_profit_rate_mean)},
                          {"baseline_profit_rate_var", fmt(s.baseline_profit_rate_var)}});
}

inline void write_estimates_csv(std::ostream& os, const std::vector<EstimateRow>& rows, std::size_t n, const std::string& hash)
{
  detail::write_meta(os, {{"config_hash", hash}});
  std::vector<std::string> cols{"step"};
  for (std::size_t i = 0; i < n; ++i) { cols.push_back("total_" + std::to_string(i)); }
  cols.emplace_back("trace_p");
  detail::write_header(os, cols);
  for (const auto& r : rows) {
    os << r.step;
    for (double t : r.totals) { os << ',' << fmt(t); }
    os << ',' << fmt(r.trace_p) << '\n';
  }
}

// Detection stream: one JSON object per line,
// {"step":k,"material":i,"bbox":[x0,y0,x1,y1]}. Blank lines and lines
// starting with '#' are skipped.

inline void write_detections_jsonl(std::ostream& os, const std::vector<Detection>& dets, const std::string& hash)
{
  os << "# config_hash=" << hash << '\n';
  for (const auto& d : dets) {
    nlohmann::json j{{"step", d.step}, {"material", d.material}, {"bbox", {d.bbox.x0, d.bbox.y0, d.bbox.x1, d.bbox.y1}}};
    os << j.dump() << '\n';
  }
}

inline std::vector<Detection> read_detections_jsonl(std::istream& is)
{
  std::vector<Detection> out;
  std::string line;
  std::size_t no = 0;
  while (std::getline(is, line)) {
    ++no;
    if (line.empty() || line[0] == '#') { continue; }
    nlohmann::json j;
    try {
      j = nlohmann::json::parse(line);
    } catch (const nlohmann::json::parse_error&) {
      throw ParseError(no, "malformed JSON");
    }
    auto uint_field = [&](const char* k) {
      if (!j.is_object() || !j.contains(k) || !j[k].is_number_integer() || j[k].get<long long>() < 0) {
        throw ParseError(no, std::string("missing or invalid '") + k + "'");
      }
      return j[k].get<std::size_t>();
    };
    Detection d;
    d.step = uint_field("step");
    d.material = uint_field("material");
    if (!j.contains("bbox") || !j["bbox"].is_array() || j["bbox"].size() != 4) {
      throw ParseError(no, "'bbox' must be an array of four numbers");
    }
    double c[4];
    for (std::size_t q = 0; q < 4; ++q) {
      if (!j["bbox"][q].is_number()) { throw ParseError(no, "'bbox' must be an array of four numbers"); }
      c[q] = j["bbox"][q].get<double>();
    }
    d.bbox = {c[0], c[1], c[2], c[3]};
    if (!(d.bbox.x1 > d.bbox.x0 && d.bbox.y1 > d.bbox.y0)) { throw ParseError(no, "degenerate bounding box"); }
    out.push_back(d);
  }
  return out;
}

/// Applied controls and known infeed mass per step, plus the speed the run started at.
struct ControlLog
{
  std::optional<double> initial_speed;
  std::vector<double> controls;
  std::vector<std::vector<double>> infeed;
};

inline void write_controls_csv(std::ostream& os, const RunRecord& rec, double initial_speed, std::size_t n)
{
  detail::write_meta(os, {{"config_hash", rec.config_hash}, {"initial_speed", fmt(initial_speed)}});
  std::vector<std::string> cols{"step", "u"};
  for (std::size_t i = 0; i < n; ++i) { cols.push_back("infeed_" + std::to_string(i)); }
  detail::write_header(os, cols);
  for (std::size_t k = 0; k < rec.controls.size(); ++k) {
    os << k << ',' << fmt(rec.controls[k]);
    for (double v : rec.infeed_mass[k]) { os << ',' << fmt(v); }
    os << '\n';
  }
}

inline ControlLog read_controls_csv(std::istream& is, std::size_t n)
{
  ControlLog log;
  std::string line;
  std::size_t no = 0;
  bool header = false;
  while (std::getline(is, line)) {
    ++no;
    if (line.empty()) { continue; }
    if (line[0] == '#') {
      const auto eq = line.find('=');
      if (eq != std::string::npos && line.compare(0, eq, "# initial_speed") == 0) {
        log.initial_speed = detail::parse_number(line.substr(eq + 1), no);
      }
      continue;
    }
    const auto cells = detail::split(line, ',');
    if (!header) {
      if (cells.size() != n + 2 || cells[0] != "step" || cells[1] != "u") {
        throw ParseError(no, "expected header step,u,infeed_0..infeed_" + std::to_string(n - 1));
      }
      header = true;
      continue;
    }
    if (cells.size() != n + 2) { throw ParseError(no, "expected " + std::to_string(n + 2) + " fields"); }
    if (detail::parse_number(cells[0], no) != static_cast<double>(log.controls.size())) {
      throw ParseError(no, "steps must be consecutive from 0");
    }
    log.controls.push_back(detail::parse_number(cells[1], no));
    std::vector<double> inf;
    for (std::size_t i = 0; i < n; ++i) { inf.push_back(detail::parse_number(cells[2 + i], no)); }
    log.infeed.push_back(std::move(inf));
  }
  if (!header && !log.controls.empty()) { throw ParseError(no, "missing header"); }
  return log;
}

/// Generic numeric CSV with `# key=value` metadata.
struct CsvTable
{
  std::map<std::string, std::string> meta;
  std::vector<std::string> columns;
  std::vector<std::vector<double>> rows;

  std::size_t column(const std::string& name) const
  {
    for (std::size_t c = 0; c < columns.size(); ++c) {
      if (columns[c] == name) { return c; }
    }
    throw ParseError(1, "missing column '" + name + "'");
  }
};

/// Reads a CSV whose cells are numbers, or empty / non-numeric in columns listed in `text_columns`.
inline CsvTable read_csv(std::istream& is, const std::vector<std::string>& text_columns = {})
{
  CsvTable t;
  std::string line;
  std::size_t no = 0;
  std::vector<bool> is_text;
  while (std::getline(is, line)) {
    ++no;
    if (line.empty()) { continue; }
    if (line[0] == '#') {
      const auto eq = line.find('=');
      if (eq != std::string::npos && line.size() > 2) { t.meta[line.substr(2, eq - 2)] = line.substr(eq + 1); }
      continue;
    }
    const auto cells = detail::split(line, ',');
    if (t.columns.empty()) {
      t.columns = cells;
      for (const auto& c : cells) {
        is_text.push_back(std::find(text_columns.begin(), text_columns.end(), c) != text_columns.end());
      }
      continue;
    }
    if (cells.size() != t.columns.size()) { throw ParseError(no, "expected " + std::to_string(t.columns.size()) + " fields"); }
    std::vector<double> row(cells.size(), 0.0);
    for (std::size_t c = 0; c < cells.size(); ++c) {
      if (!is_text[c]) { row[c] = detail::parse_number(cells[c], no); }
    }
    t.rows.push_back(std::move(row));
  }
  if (t.columns.empty()) { throw ParseError(no == 0 ? 1 : no, "missing header"); }
  return t;
}

}  // namespace lcv
