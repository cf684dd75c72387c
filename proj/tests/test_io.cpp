#include <doctest.h>

#include <cmath>
#include <filesystem>
#include <fstream>
#include <limits>
#include <random>
#include <sstream>

#include "batchreuse/csv.hpp"
#include "batchreuse/errors.hpp"
#include "batchreuse/experiment.hpp"

using namespace batchreuse;
namespace fs = std::filesystem;

namespace {

std::string slurp(const fs::path& p) {
  std::ifstream in(p);
  std::stringstream ss;
  ss << in.rdbuf();
  return ss.str();
}

fs::path scratch(const std::string& name) {
  auto dir = fs::temp_directory_path() / ("batchreuse_test_" + name);
  fs::remove_all(dir);
  fs::create_directories(dir);
  return dir;
}

ConfigError config_error(const std::string& text) {
  try {
    experiment::parse_config(text);
  } catch (const ConfigError& e) {
    return e;
  }
  FAIL("expected a ConfigError");
  return ConfigError("");
}

}  // namespace

TEST_SUITE("io") {

TEST_CASE("doubles round-trip through text") {
  std::mt19937_64 rng(1);
  std::uniform_real_distribution<double> u(-1.0, 1.0);
  for (int i = 0; i < 1000; ++i) {
    double v = u(rng) * std::pow(10.0, (i % 40) - 20);
    CHECK(std::stod(io::format_double(v)) == v);
  }
  CHECK(io::format_double(0.15) == "0.15");
  CHECK(std::isnan(std::stod(io::format_double(std::nan("")))));
}

TEST_CASE("csv round trip and schema") {
  std::vector<io::CsvRow> rows{{0, "full", "teacher", 0.0125, 0.001, 1.5},
                               {1, "fresh", "C1_perp", 1.0 / 3.0, 2e-17, 0.25}};
  std::string text = io::to_csv(rows);
  CHECK(text.substr(0, text.find('\n')) == io::kCsvHeader);
  auto back = io::parse_csv(text);
  REQUIRE(back.size() == 2);
  for (std::size_t i = 0; i < 2; ++i) {
    CHECK(back[i].t == rows[i].t);
    CHECK(back[i].schedule == rows[i].schedule);
    CHECK(back[i].direction == rows[i].direction);
    CHECK(back[i].overlap_mean == rows[i].overlap_mean);
    CHECK(back[i].overlap_std == rows[i].overlap_std);
    CHECK(back[i].loss_mean == rows[i].loss_mean);
  }
  auto dir = scratch("csv");
  io::write_csv(dir / "a.csv", rows);
  CHECK(slurp(dir / "a.csv") == text);
  CHECK(io::read_csv(dir / "a.csv").size() == 2);
}

TEST_CASE("csv reader ignores unknown columns and column order") {
  std::string text =
      "extra,loss_mean,t,direction_name,overlap_std,schedule,overlap_mean,note\n"
      "x,0.5,3,e1,0.01,full,0.2,\n"
      "y,0.25,4,e1,0.02,full,0.3,hello\n";
  auto rows = io::parse_csv(text);
  REQUIRE(rows.size() == 2);
  CHECK(rows[1].t == 4);
  CHECK(rows[1].overlap_mean == 0.3);
  CHECK(rows[0].loss_mean == 0.5);
  CHECK_THROWS(io::parse_csv("t,schedule\n1,full\n"));
}

TEST_CASE("theory projection and its error") {
  Eigen::MatrixXd M(1, 2), se(1, 2);
  M << 0.3, 0.4;
  se << 0.01, 0.01;
  gdsim::NamedDirection all{"teacher", Eigen::MatrixXd::Identity(2, 2)};
  auto t = io::theory_projection(M, se, all);
  CHECK(t.value == doctest::Approx(0.5));
  CHECK(t.std_error == doctest::Approx(0.01));
}

TEST_CASE("config grammar") {
  auto cfg = experiment::parse_config(R"(
preset: fig1_center
eta: 0.2
train:
  d: 300
  runs: 2
  schedules: [full]
dmft:
  samples: 2000
hardness:
  directions: ["custom:1"]
)");
  CHECK(cfg.target == "single:he3");
  CHECK(cfg.eta == 0.2);
  CHECK(cfg.d == 300);
  CHECK(cfg.schedules == std::vector<std::string>{"full"});
  CHECK(cfg.samples == 2000);
  CHECK(cfg.hardness_directions == std::vector<std::string>{"custom:1"});

  auto json = experiment::parse_config(R"({"target": "staircase:2", "p": 2, "directions": "e1, e2"})");
  CHECK(json.target == "staircase:2");
  CHECK(json.directions == std::vector<std::string>{"e1", "e2"});

  auto full = experiment::parse_config("preset: fig1_left\nfull_scale: true\n");
  CHECK(full.d == 5000);
  CHECK(full.runs == 32);
  CHECK(full.samples == 1000000);
  CHECK(experiment::parse_config("preset: fig3\nfull_scale: true\n").d == 10000);
}

TEST_CASE("config errors carry field and line") {
  auto e1 = config_error("target: single:he3\neta: 0.1\ntrain:\n  d: 100\n  bogus: 1\n");
  CHECK(e1.field() == "train.bogus");
  CHECK(e1.line() == 5);
  auto e2 = config_error("eta: fast\n");
  CHECK(e2.field() == "eta");
  CHECK(e2.line() == 1);
  auto e3 = config_error("p: 2\ntarget: single:nope\n");
  CHECK(e3.field() == "target");
  CHECK(e3.line() == 2);
  auto e4 = config_error("engines: [sim, warp]\n");
  CHECK(e4.field() == "engines");
  CHECK(e4.line() == 1);
  auto e5 = config_error("preset: fig9\n");
  CHECK(e5.field() == "preset");
  auto e6 = config_error("a: [1, 2\n");
  CHECK(e6.line() >= 1);
  auto e7 = config_error("target: staircase:2\np: 2\ndirections: [e5]\n");
  CHECK(e7.field() == "directions");
  CHECK(e7.line() == 3);
}

TEST_CASE("every preset parses and validates") {
  for (const auto& info : experiment::list_presets()) {
    CAPTURE(info.name);
    auto cfg = experiment::preset(info.name);
    CHECK_NOTHROW(cfg.validate());
    auto echo = experiment::parse_config(cfg.to_json().dump());
    CHECK(echo.to_json() == cfg.to_json());
  }
  CHECK(experiment::preset("fig1_left").target == "single:tanh");
  CHECK(experiment::preset("fig2_right").target.find("committee") == 0);
  auto f5 = experiment::preset("fig5_minibatch1");
  CHECK(std::find(f5.schedules.begin(), f5.schedules.end(), "sequential:1") != f5.schedules.end());
  auto f4 = experiment::preset("fig4_replacement");
  CHECK(f4.schedules == std::vector<std::string>{"replacement:n/5"});
  auto f3 = experiment::preset("fig3");
  CHECK(f3.p == 4);
  CHECK(f3.alpha == 5.0);
  CHECK(f3.eta == 0.2);
  auto f1 = experiment::preset("fig1_center");
  CHECK(f1.p == 1);
  CHECK(f1.alpha == 3.0);
  CHECK(f1.eta == 0.1);
  CHECK(f1.activation == "relu");
}

TEST_CASE("manifest round trip reproduces the CSVs") {
  auto dir = scratch("manifest");
  auto cfg = experiment::parse_config(R"(
target: sum(single:linear@1; single:he3@2)
p: 2
T: 2
engines: [sim, dmft, one_pass_theory, hardness]
directions: [C1, C1_perp]
train: {d: 200, runs: 2, schedules: [full, fresh], threads: 1}
dmft: {samples: 2000}
hardness: {mc_samples: 20000}
)");
  cfg.output = (dir / "a").string();
  auto first = experiment::run(cfg);
  CHECK(fs::exists(dir / "a" / "manifest.json"));
  for (auto f : {"sim.csv", "dmft.csv", "one_pass_theory.csv", "hardness.json"})
    CHECK(fs::exists(dir / "a" / f));
  auto manifest = nlohmann::json::parse(slurp(dir / "a" / "manifest.json"));
  CHECK(manifest.contains("version"));
  CHECK(manifest.contains("seeds"));
  CHECK(manifest.contains("wall_seconds"));
  CHECK(manifest["csv_header"] == io::kCsvHeader);

  auto again = experiment::load_config(dir / "a" / "manifest.json");
  again.output = (dir / "b").string();
  experiment::run(again);
  for (auto f : {"sim.csv", "dmft.csv", "one_pass_theory.csv"})
    CHECK(slurp(dir / "a" / f) == slurp(dir / "b" / f));

  auto sim = io::read_csv(dir / "a" / "sim.csv");
  CHECK(sim.size() == 2 * 3 * 2);
}

TEST_CASE("hardness report") {
  auto he4 = experiment::hardness_report("single:he4", 8, {});
  CHECK(he4["verdicts"][0]["status"] == "HardUpToK");
  auto prod = experiment::hardness_report("product:1,2,3", 8, {"custom:1,1,1"});
  auto& last = prod["verdicts"].back();
  CHECK(last["status"] == "HardUpToK");
  CHECK(last["symmetry"]["ortho_even"] == true);
  auto st = experiment::hardness_report("staircase:3", 8, {});
  CHECK(st["verdicts"][2]["status"] == "FiniteTLearnable");
  CHECK(st["verdicts"][2]["witness_k"] == 2);
}

TEST_CASE("golden CSVs follow the shared schema") {
  fs::path golden = BATCHREUSE_GOLDEN_DIR;
  int files = 0;
  for (auto& entry : fs::recursive_directory_iterator(golden)) {
    if (entry.path().extension() != ".csv") continue;
    ++files;
    CAPTURE(entry.path().string());
    std::string text = slurp(entry.path());
    CHECK(text.substr(0, text.find('\n')) == io::kCsvHeader);
    auto rows = io::read_csv(entry.path());
    CHECK(!rows.empty());
    for (const auto& r : rows) {
      CHECK(std::isfinite(r.overlap_mean));
      CHECK(r.overlap_std >= 0.0);
    }
    CHECK(io::to_csv(rows) == text);
  }
  CHECK(files >= 4);
  for (auto name : {"fig1_center", "fig2_center"}) {
    auto cfg = experiment::load_config(golden / name / "manifest.json");
    CHECK(cfg.preset == name);
    CHECK(cfg.to_json() == experiment::parse_config(cfg.to_json().dump()).to_json());
  }
}

}  // TEST_SUITE
