// Command-line front end: simulate, experiment, estimate, report.
//
// Exit codes: 0 success, 2 bad input or configuration, 3 runtime failure.

#include <CLI11.hpp>
#include <json.hpp>

#include <algorithm>
#include <cstdint>
#include <filesystem>
#include <fstream>
#include <iostream>
#include <map>
#include <sstream>
#include <string>
#include <vector>

#include "lcv/config.hpp"
#include "lcv/io.hpp"

namespace fs = std::filesystem;
using namespace lcv;

namespace {

constexpr int kInputError = 2;
constexpr int kRuntimeError = 3;

/// Bad command-line usage that CLI11 cannot catch on its own.
struct UsageError : std::runtime_error
{
  using std::runtime_error::runtime_error;
};

struct GlobalOptions
{
  std::string config;
  std::string out;
  bool force{false};
  std::string accounting;
};

/// Files collected in memory and written in one go.
class Output
{
 public:
  Output(std::string dir, bool force) : dir_(std::move(dir)), force_(force) {}

  /// Fails early, before any expensive work, if the destination is taken.
  void check() const
  {
    if (dir_.empty() || force_) { return; }
    if (fs::exists(dir_)) { throw UsageError("output directory exists (use --force): " + dir_); }
  }

  void add(const std::string& name, std::string content) { files_[name] = std::move(content); }

  void commit() const
  {
    if (dir_.empty()) {
      for (const auto& [name, content] : files_) {
        if (!force_ && fs::exists(name)) { throw UsageError("file exists (use --force): " + name); }
      }
      for (const auto& [name, content] : files_) { write(name, content); }
      return;
    }
    const fs::path dst(dir_);
    fs::path tmp = dst;
    tmp += ".partial";
    fs::remove_all(tmp);
    if (dst.has_parent_path()) { fs::create_directories(dst.parent_path()); }
    fs::create_directory(tmp);
    for (const auto& [name, content] : files_) { write(tmp / name, content); }
    if (fs::exists(dst)) {
      if (!force_) { throw UsageError("output directory exists (use --force): " + dir_); }
      fs::remove_all(dst);
    }
    fs::rename(tmp, dst);
  }

 private:
  static void write(const fs::path& p, const std::string& content)
  {
    std::ofstream f(p, std::ios::binary);
    f << content;
    if (!f) { throw std::runtime_error("cannot write " + p.string()); }
  }

  std::string dir_;
  bool force_;
  std::map<std::string, std::string> files_;
};

ConfigBundle load_bundle(const GlobalOptions& g)
{
  if (g.config.empty()) { throw UsageError("--config is required"); }
  std::ifstream in(g.config);
  if (!in) { throw ConfigError("<file>", "cannot open " + g.config); }
  std::stringstream ss;
  ss << in.rdbuf();
  Json doc;
  try {
    doc = Json::parse(ss.str());
  } catch (const Json::parse_error& e) {
    throw ConfigError("<document>", e.what());
  }
  if (!g.accounting.empty()) {
    if (!doc.is_object()) { throw ConfigError("<root>", "expected an object"); }
    doc["mpc"]["accounting"] = g.accounting;
  }
  return parse_config(doc);
}

std::vector<std::uint64_t> parse_seeds(const std::string& spec)
{
  auto number = [&](const std::string& s) {
    if (s.empty() || s.find_first_not_of("0123456789") != std::string::npos) {
      throw UsageError("--seeds expects N or A..B, got '" + spec + "'");
    }
    return static_cast<std::uint64_t>(std::stoull(s));
  };
  const auto dots = spec.find("..");
  if (dots == std::string::npos) { return {number(spec)}; }
  const auto a = number(spec.substr(0, dots));
  const auto b = number(spec.substr(dots + 2));
  if (b < a) { throw UsageError("--seeds range is empty: " + spec); }
  std::vector<std::uint64_t> out;
  for (auto s = a; s <= b; ++s) { out.push_back(s); }
  return out;
}

std::string run_name(std::uint64_t seed, const std::string& controller, const char* kind, const char* ext)
{
  return std::string(kind) + "_" + std::to_string(seed) + "_" + controller + ext;
}

std::string manifest(const std::string& command, const GlobalOptions& g, const ConfigBundle& b,
                     const std::vector<std::uint64_t>& seeds, nlohmann::json extra = nlohmann::json::object())
{
  extra["command"] = command;
  extra["config"] = g.config;
  extra["config_hash"] = b.hash;
  extra["seeds"] = seeds;
  extra["out"] = g.out;
  return extra.dump(2) + "\n";
}

template <class F>
std::string render(F&& f)
{
  std::ostringstream os;
  f(os);
  return os.str();
}

// simulate

struct SimulateOptions
{
  std::uint64_t seed{0};
  std::string controller{"mpc"};
  std::optional<double> speed;
  bool trace{false};
};

int cmd_simulate(const GlobalOptions& g, const SimulateOptions& o)
{
  const auto b = load_bundle(g);
  Controller ctl = Controller::make_mpc();
  if (o.controller == "constant") {
    const double r = o.speed.value_or(b.sim.r_init);
    if (!(r >= b.system.r_min && r <= b.system.r_max)) { throw UsageError("--speed must lie in [r_min, r_max]"); }
    ctl = Controller::constant(r);
  } else if (o.speed) {
    throw UsageError("--speed applies to the constant controller only");
  }
  Output out(g.out, g.force);
  out.check();

  RunOptions ro;
  ro.keep_trace = o.trace;
  const auto rec = run_closed_loop(b, ctl, o.seed, ro);
  const auto n = b.system.n;
  out.add(run_name(o.seed, rec.controller, "run", ".csv"), render([&](auto& os) { write_run_csv(os, rec, n); }));
  if (o.trace) {
    const double r0 = ctl.kind == Controller::Kind::mpc ? b.sim.r_init : ctl.speed;
    out.add(run_name(o.seed, rec.controller, "detections", ".jsonl"),
            render([&](auto& os) { write_detections_jsonl(os, rec.detections, b.hash); }));
    out.add(run_name(o.seed, rec.controller, "controls", ".csv"),
            render([&](auto& os) { write_controls_csv(os, rec, r0, n); }));
    out.add(run_name(o.seed, rec.controller, "estimates", ".csv"),
            render([&](auto& os) { write_estimates_csv(os, rec.estimates, n, b.hash); }));
  }
  if (!g.out.empty()) {
    nlohmann::json extra{{"controller", rec.controller}};
    if (ctl.kind == Controller::Kind::constant) { extra["speed"] = ctl.speed; }
    out.add("manifest.json", manifest("simulate", g, b, {o.seed}, extra));
  }
  out.commit();
  std::cout << "seed=" << o.seed << " controller=" << rec.controller << " total_value=" << fmt(rec.total_value())
            << " average_speed=" << fmt(rec.average_speed()) << "\n";
  return 0;
}

// experiment

int cmd_experiment(const GlobalOptions& g, const std::string& seed_spec, std::size_t jobs)
{
  const auto b = load_bundle(g);
  const auto seeds = parse_seeds(seed_spec);
  Output out(g.out, g.force);
  out.check();

  const auto res = paired_experiment(b, seeds, {}, jobs);
  const auto n = b.system.n;
  for (const auto* runs : {&res.mpc_runs, &res.baseline_runs}) {
    for (const auto& rec : *runs) {
      out.add(run_name(rec.seed, rec.controller, "run", ".csv"), render([&](auto& os) { write_run_csv(os, rec, n); }));
    }
  }
  const auto& s = res.summary;
  out.add("summary.csv", render([&](auto& os) { write_summary_csv(os, s, b.hash); }));
  if (!g.out.empty()) { out.add("manifest.json", manifest("experiment", g, b, seeds, {{"jobs", jobs}})); }
  out.commit();

  for (const auto& r : s.rows) {
    std::cout << "seed=" << r.seed << " mpc=" << fmt(r.mpc_total_value) << " baseline=" << fmt(r.baseline_total_value)
              << " avg_speed=" << fmt(r.avg_mpc_speed) << " improvement_pct=" << fmt(r.improvement_pct) << "\n";
  }
  std::cout << "mean_improvement_pct=" << fmt(s.mean_improvement_pct) << "\n";
  std::cout << "mpc_wins=" << s.mpc_wins << "/" << s.rows.size() << "\n";
  std::cout << "median_improvement_pct=" << fmt(s.median_improvement_pct) << "\n";
  return 0;
}

// estimate

int cmd_estimate(const GlobalOptions& g, const std::string& det_path, const std::string& ctl_path)
{
  const auto b = load_bundle(g);
  Output out(g.out, g.force);
  out.check();

  std::ifstream det_in(det_path);
  if (!det_in) { throw UsageError("cannot open " + det_path); }
  std::ifstream ctl_in(ctl_path);
  if (!ctl_in) { throw UsageError("cannot open " + ctl_path); }
  std::vector<Detection> dets;
  ControlLog log;
  try {
    dets = read_detections_jsonl(det_in);
  } catch (const ParseError& e) {
    throw ParseError(e.line(), det_path + ": " + std::string(e.what()));
  }
  try {
    log = read_controls_csv(ctl_in, b.system.n);
  } catch (const ParseError& e) {
    throw ParseError(e.line(), ctl_path + ": " + std::string(e.what()));
  }
  for (const auto& d : dets) {
    if (d.material >= b.system.n) { throw UsageError("detection material out of range"); }
    if (d.step > log.controls.size()) { throw UsageError("detections extend beyond the control log"); }
  }

  const auto& cfg = b.system;
  const double r0 = log.initial_speed.value_or(b.sim.r_init);
  FilterState init{StateVector::empty(cfg, r0), initial_covariance(cfg, b.sim.p0_mass)};
  const auto states = run_filter(init, group_by_step(dets), log.controls, log.infeed, cfg, b.camera, b.noise);
  std::vector<EstimateRow> rows;
  for (std::size_t k = 0; k < states.size(); ++k) { rows.push_back(detail::estimate_row(k, states[k])); }

  out.add("estimates.csv", render([&](auto& os) { write_estimates_csv(os, rows, cfg.n, b.hash); }));
  if (!g.out.empty()) {
    out.add("manifest.json", manifest("estimate", g, b, {}, {{"detections", det_path}, {"controls", ctl_path}}));
  }
  out.commit();
  std::cout << "steps=" << log.controls.size() << " detections=" << dets.size() << "\n";
  return 0;
}

// report

struct ProfitSample
{
  std::string controller;
  std::uint64_t seed;
  double profit_rate;
};

std::vector<ProfitSample> read_samples(const std::string& path)
{
  std::ifstream in(path);
  if (!in) { throw UsageError("cannot open " + path); }
  CsvTable t;
  try {
    t = read_csv(in, {"solver_iterations", "solver_stop"});
  } catch (const ParseError& e) {
    throw ParseError(e.line(), path + ": " + std::string(e.what()));
  }
  auto col = [&](const std::string& c) {
    try {
      return t.column(c);
    } catch (const ParseError&) {
      throw ParseError(1, path + ": missing column '" + c + "'");
    }
  };
  std::vector<ProfitSample> out;
  const bool is_summary = std::find(t.columns.begin(), t.columns.end(), "mpc_profit_rate") != t.columns.end();
  if (is_summary) {
    const auto cs = col("seed"), cm = col("mpc_profit_rate"), cb = col("baseline_profit_rate");
    for (const auto& r : t.rows) {
      out.push_back({"mpc", static_cast<std::uint64_t>(r[cs]), r[cm]});
      out.push_back({"constant", static_cast<std::uint64_t>(r[cs]), r[cb]});
    }
    return out;
  }
  const auto cc = col("cumulative");
  col("step");
  if (!t.meta.count("controller") || !t.meta.count("seed")) {
    throw ParseError(1, path + ": missing '# controller=' or '# seed=' header");
  }
  const double rate = t.rows.empty() ? 0.0 : t.rows.back()[cc] / static_cast<double>(t.rows.size());
  out.push_back({t.meta["controller"], std::stoull(t.meta["seed"]), rate});
  return out;
}

int cmd_report(const GlobalOptions& g, const std::vector<std::string>& inputs)
{
  Output out(g.out, g.force);
  out.check();
  std::vector<std::string> files;
  for (const auto& p : inputs) {
    if (fs::is_directory(p)) {
      for (const auto& e : fs::directory_iterator(p)) {
        const auto name = e.path().filename().string();
        if (name.rfind("run_", 0) == 0 && e.path().extension() == ".csv") { files.push_back(e.path().string()); }
      }
    } else {
      files.push_back(p);
    }
  }
  std::sort(files.begin(), files.end());
  if (files.empty()) { throw UsageError("no input files"); }

  std::vector<ProfitSample> samples;
  for (const auto& f : files) {
    auto s = read_samples(f);
    samples.insert(samples.end(), s.begin(), s.end());
  }
  std::stable_sort(samples.begin(), samples.end(), [](const auto& a, const auto& b) {
    return a.controller != b.controller ? a.controller < b.controller : a.seed < b.seed;
  });

  std::map<std::string, std::vector<double>> by_kind;
  for (const auto& s : samples) { by_kind[s.controller].push_back(s.profit_rate); }

  std::ostringstream table, rates;
  table << "controller,runs,profit_rate_mean,profit_rate_var\n";
  std::cout << "controller  runs  profit_rate_mean  profit_rate_var\n";
  for (const auto& [kind, v] : by_kind) {
    const auto [mean, var] = mean_and_variance(v);
    table << kind << ',' << v.size() << ',' << fmt(mean) << ',' << fmt(var) << '\n';
    std::cout << kind << "  " << v.size() << "  " << fmt(mean) << "  " << fmt(var) << "\n";
  }
  rates << "controller,seed,profit_rate\n";
  for (const auto& s : samples) { rates << s.controller << ',' << s.seed << ',' << fmt(s.profit_rate) << '\n'; }

  if (!g.out.empty()) {
    out.add("report.csv", table.str());
    out.add("profit_rates.csv", rates.str());
    nlohmann::json m{{"command", "report"}, {"inputs", files}, {"out", g.out}};
    out.add("manifest.json", m.dump(2) + "\n");
    out.commit();
  }
  return 0;
}

void add_globals(CLI::App* sub, GlobalOptions& g, bool needs_config = true)
{
  if (needs_config) { sub->add_option("--config", g.config, "JSON configuration document")->required(); }
  sub->add_option("--out", g.out, "Output directory, created atomically (default: files in the working directory)");
  sub->add_flag("--force", g.force, "Replace an existing output directory or files");
}

}  // namespace

int main(int argc, char** argv)
{
  CLI::App app{"Longitudinal control volume sorting-line simulator and controller"};
  app.require_subcommand(1);

  GlobalOptions g;
  SimulateOptions so;
  std::string seeds = "1..30";
  std::size_t jobs = 1;
  std::string det_path, ctl_path;
  std::vector<std::string> report_inputs;
  const std::vector<std::string> accountings{"prose", "literal"};

  auto* sim = app.add_subcommand("simulate", "Run one closed-loop simulation");
  add_globals(sim, g);
  sim->add_option("--seed", so.seed, "Run seed");
  sim->add_option("--controller", so.controller, "Controller kind")->check(CLI::IsMember({"mpc", "constant"}));
  sim->add_option("--speed", so.speed, "Belt speed for the constant controller (default: sim.r_init)");
  sim->add_option("--accounting", g.accounting, "MPC objective accounting")->check(CLI::IsMember(accountings));
  sim->add_flag("--trace", so.trace, "Also write detections, controls and in-loop estimates for replay");

  auto* exp = app.add_subcommand("experiment", "Paired MPC vs constant-speed experiment over a seed range");
  add_globals(exp, g);
  auto* seeds_opt = exp->add_option("--seeds", seeds, "Seed N or inclusive range A..B")->capture_default_str();
  exp->add_option("--seed", seeds, "Single seed (same as --seeds N)")->excludes(seeds_opt);
  exp->add_option("--accounting", g.accounting, "MPC objective accounting")->check(CLI::IsMember(accountings));
  exp->add_option("--jobs", jobs, "Worker threads; results do not depend on it")->check(CLI::PositiveNumber)->capture_default_str();

  auto* est = app.add_subcommand("estimate", "Replay a detection stream through the Kalman filter");
  add_globals(est, g);
  est->add_option("--detections", det_path, "Line-delimited JSON detections")->required();
  est->add_option("--controls", ctl_path, "Controls CSV written by simulate --trace")->required();

  auto* rep = app.add_subcommand("report", "Profit-rate statistics per controller from run or summary CSVs");
  add_globals(rep, g, false);
  rep->add_option("inputs", report_inputs, "run_*.csv / summary.csv files or directories")->required();

  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& e) {
    const int code = app.exit(e);
    return code == 0 ? 0 : kInputError;
  }

  try {
    if (sim->parsed()) { return cmd_simulate(g, so); }
    if (exp->parsed()) { return cmd_experiment(g, seeds, jobs); }
    if (est->parsed()) { return cmd_estimate(g, det_path, ctl_path); }
    if (rep->parsed()) { return cmd_report(g, report_inputs); }
  } catch (const ConfigError& e) {
    std::cerr << "config error: " << e.what() << "\n";
    return kInputError;
  } catch (const ParseError& e) {
    std::cerr << "input error: " << e.what() << "\n";
    return kInputError;
  } catch (const UsageError& e) {
    std::cerr << "error: " << e.what() << "\n";
    return kInputError;
  } catch (const std::exception& e) {
    std::cerr << "runtime error: " << e.what() << "\n";
    return kRuntimeError;
  }
  return kRuntimeError;
}
