#include <catch_amalgamated.hpp>

#include <cstdio>
#include <filesystem>
#include <fstream>
#include <sstream>
#include <sys/wait.h>

#include "lcv/config.hpp"
#include "lcv/io.hpp"

namespace fs = std::filesystem;
using namespace lcv;
using Catch::Matchers::ContainsSubstring;

namespace {

struct Result
{
  int code{-1};
  std::string output;
};

/// Runs the CLI inside `dir`, capturing stdout and stderr together.
Result run(const fs::path& dir, const std::string& args)
{
  const std::string cmd = "cd '" + dir.string() + "' && '" LCV_BINARY "' " + args + " 2>&1";
  Result r;
  FILE* pipe = popen(cmd.c_str(), "r");
  REQUIRE(pipe != nullptr);
  char buf[4096];
  while (std::fgets(buf, sizeof buf, pipe) != nullptr) { r.output += buf; }
  const int status = pclose(pipe);
  r.code = WIFEXITED(status) ? WEXITSTATUS(status) : -1;
  return r;
}

std::string slurp(const fs::path& p)
{
  std::ifstream in(p, std::ios::binary);
  std::stringstream ss;
  ss << in.rdbuf();
  return ss.str();
}

/// Scratch directory holding a shortened copy of a shipped config as cfg.json.
struct Workspace
{
  fs::path dir;

  explicit Workspace(const std::string& tag, std::size_t steps = 120)
  {
    dir = fs::temp_directory_path() / ("lcv_cli_" + tag + "_" + std::to_string(::getpid()));
    fs::remove_all(dir);
    fs::create_directories(dir);
    auto doc = Json::parse(slurp(fs::path(LCV_CONFIG_DIR) / "three_material.json"));
    doc["sim"]["steps"] = steps;
    write("cfg.json", doc.dump(2));
  }
  ~Workspace() { fs::remove_all(dir); }

  void write(const std::string& name, const std::string& text) const { std::ofstream(dir / name) << text; }
};

}  // namespace

TEST_CASE("help exits cleanly for every command", "[cli]")
{
  Workspace w("help");
  auto r = run(w.dir, "--help");
  CHECK(r.code == 0);
  CHECK_THAT(r.output, ContainsSubstring("experiment"));
  for (const char* sub : {"simulate", "experiment", "estimate", "report"}) {
    r = run(w.dir, std::string(sub) + " --help");
    CHECK(r.code == 0);
    CHECK_THAT(r.output, ContainsSubstring("--out"));
  }
  r = run(w.dir, "simulate --help");
  for (const char* flag : {"--config", "--seed", "--controller", "--speed", "--accounting", "--force"}) {
    CHECK_THAT(r.output, ContainsSubstring(flag));
  }
  CHECK(run(w.dir, "simulate --bogus").code == 2);
  CHECK(run(w.dir, "").code != 0);
}

TEST_CASE("simulate writes a run file and refuses to overwrite", "[cli][simulate]")
{
  Workspace w("sim");
  auto r = run(w.dir, "simulate --config cfg.json --seed 7 --out out");
  REQUIRE(r.code == 0);
  CHECK_THAT(r.output, ContainsSubstring("total_value="));
  REQUIRE(fs::exists(w.dir / "out" / "run_7_mpc.csv"));
  CHECK(fs::exists(w.dir / "out" / "manifest.json"));
  CHECK_FALSE(fs::exists(w.dir / "out.partial"));

  std::ifstream in(w.dir / "out" / "run_7_mpc.csv");
  const auto t = read_csv(in, {"solver_stop"});
  CHECK(t.rows.size() == 120);
  CHECK(t.meta.at("controller") == "mpc");
  CHECK(t.meta.at("config_hash") == load_config((w.dir / "cfg.json").string()).hash);

  const auto before = slurp(w.dir / "out" / "run_7_mpc.csv");
  r = run(w.dir, "simulate --config cfg.json --seed 8 --out out");
  CHECK(r.code == 2);
  CHECK_THAT(r.output, ContainsSubstring("--force"));
  CHECK(slurp(w.dir / "out" / "run_7_mpc.csv") == before);

  r = run(w.dir, "simulate --config cfg.json --seed 8 --out out --force");
  CHECK(r.code == 0);
  CHECK(fs::exists(w.dir / "out" / "run_8_mpc.csv"));
  CHECK_FALSE(fs::exists(w.dir / "out" / "run_7_mpc.csv"));
}

TEST_CASE("constant controller and speed validation", "[cli][simulate]")
{
  Workspace w("const");
  auto r = run(w.dir, "simulate --config cfg.json --seed 3 --controller constant --speed 2.5 --out c");
  REQUIRE(r.code == 0);
  CHECK_THAT(r.output, ContainsSubstring("average_speed=2.5"));
  CHECK(fs::exists(w.dir / "c" / "run_3_constant.csv"));
  CHECK(run(w.dir, "simulate --config cfg.json --controller constant --speed 9 --out d").code == 2);
  CHECK(run(w.dir, "simulate --config cfg.json --controller mpc --speed 2.5 --out d").code == 2);
  CHECK(run(w.dir, "simulate --config cfg.json --controller fast --out d").code == 2);
  CHECK_FALSE(fs::exists(w.dir / "d"));
}

TEST_CASE("config errors exit 2 naming the key", "[cli][config]")
{
  Workspace w("cfgerr");
  auto doc = Json::parse(slurp(w.dir / "cfg.json"));
  doc["stations"][0].erase("span");
  w.write("nospan.json", doc.dump());
  auto r = run(w.dir, "simulate --config nospan.json --out o");
  CHECK(r.code == 2);
  CHECK_THAT(r.output, ContainsSubstring("stations[0].span"));
  CHECK_FALSE(fs::exists(w.dir / "o"));

  w.write("broken.json", "{\"system\": ");
  CHECK(run(w.dir, "simulate --config broken.json --out o").code == 2);
  CHECK(run(w.dir, "simulate --config missing.json --out o").code == 2);
}

TEST_CASE("estimate replays the in-loop filter", "[cli][estimate]")
{
  Workspace w("est");
  REQUIRE(run(w.dir, "simulate --config cfg.json --seed 5 --trace --out s").code == 0);
  const auto det = w.dir / "s" / "detections_5_mpc.jsonl";
  const auto ctl = w.dir / "s" / "controls_5_mpc.csv";
  REQUIRE(fs::exists(det));
  REQUIRE(fs::exists(ctl));
  const auto r = run(w.dir, "estimate --config cfg.json --detections s/detections_5_mpc.jsonl --controls "
                            "s/controls_5_mpc.csv --out e");
  REQUIRE(r.code == 0);

  std::ifstream a(w.dir / "s" / "estimates_5_mpc.csv"), b(w.dir / "e" / "estimates.csv");
  const auto live = read_csv(a), replay = read_csv(b);
  REQUIRE(live.columns == replay.columns);
  REQUIRE(live.rows.size() == replay.rows.size());
  for (std::size_t k = 0; k < live.rows.size(); ++k) {
    for (std::size_t c = 0; c < live.columns.size(); ++c) {
      REQUIRE(std::abs(live.rows[k][c] - replay.rows[k][c]) <= 1e-9);
    }
  }

  auto lines = slurp(det);
  const auto cut = lines.find('\n', lines.find('\n') + 1);
  w.write("trunc.jsonl", lines.substr(0, cut + 1) + lines.substr(cut + 1, 25) + "\n");
  const auto bad = run(w.dir, "estimate --config cfg.json --detections trunc.jsonl --controls s/controls_5_mpc.csv --out f");
  CHECK(bad.code == 2);
  CHECK_THAT(bad.output, ContainsSubstring("line 3"));
  CHECK_FALSE(fs::exists(w.dir / "f"));
}

TEST_CASE("experiment, report, and determinism", "[cli][experiment]")
{
  Workspace w("exp");
  auto r = run(w.dir, "experiment --config cfg.json --seeds 1..3 --out x");
  REQUIRE(r.code == 0);
  CHECK_THAT(r.output, ContainsSubstring("median_improvement_pct="));
  for (const char* f : {"summary.csv", "run_1_mpc.csv", "run_3_constant.csv", "manifest.json"}) {
    CHECK(fs::exists(w.dir / "x" / f));
  }

  REQUIRE(run(w.dir, "experiment --config cfg.json --seeds 1..3 --jobs 2 --out y").code == 0);
  for (const auto& e : fs::directory_iterator(w.dir / "x")) {
    if (e.path().extension() != ".csv") { continue; }
    INFO(e.path().filename().string());
    CHECK(slurp(e.path()) == slurp(w.dir / "y" / e.path().filename()));
  }

  REQUIRE(run(w.dir, "experiment --config cfg.json --seed 2 --out one").code == 0);
  std::ifstream one(w.dir / "one" / "summary.csv");
  CHECK(read_csv(one).rows.size() == 1);

  std::ifstream sum_in(w.dir / "x" / "summary.csv");
  const auto sum = read_csv(sum_in);
  r = run(w.dir, "report x --out rep");
  REQUIRE(r.code == 0);
  std::ifstream rep_in(w.dir / "rep" / "report.csv");
  const auto rep = read_csv(rep_in, {"controller"});
  REQUIRE(rep.rows.size() == 2);
  // Rows are sorted by controller name: constant, then mpc.
  const auto mean = rep.column("profit_rate_mean"), var = rep.column("profit_rate_var");
  CHECK(std::abs(rep.rows[1][mean] - std::stod(sum.meta.at("mpc_profit_rate_mean"))) <= 1e-12);
  CHECK(std::abs(rep.rows[1][var] - std::stod(sum.meta.at("mpc_profit_rate_var"))) <= 1e-12);
  CHECK(std::abs(rep.rows[0][mean] - std::stod(sum.meta.at("baseline_profit_rate_mean"))) <= 1e-12);
  CHECK(std::abs(rep.rows[0][var] - std::stod(sum.meta.at("baseline_profit_rate_var"))) <= 1e-12);

  r = run(w.dir, "report x/summary.csv");
  CHECK(r.code == 0);
  CHECK_THAT(r.output, ContainsSubstring("mpc"));

  w.write("bad.csv", "seed,speed\n1,2\n");
  CHECK(run(w.dir, "report bad.csv").code == 2);
  CHECK(run(w.dir, "experiment --config cfg.json --seeds 3..1 --out z").code == 2);
}
