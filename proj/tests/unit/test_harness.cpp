#include <doctest.h>

#include <cmath>
#include <filesystem>
#include <fstream>
#include <set>
#include <sstream>

#include <json.hpp>

#include "dnls/chaos.hpp"
#include "dnls/errors.hpp"
#include "dnls/harness.hpp"

using namespace dnls;
namespace fs = std::filesystem;

namespace {

fs::path scratch(const std::string& name) {
  const auto p = fs::temp_directory_path() / ("dnls_harness_" + name);
  fs::remove_all(p);
  return p;
}

ExperimentConfig small_evolve(const fs::path& out) {
  return parse_config(R"({
    "kind": "evolve",
    "model": {"J": 1, "w": 4, "beta": 1},
    "L": 64,
    "time": {"t_end": 40, "dt": 0.05},
    "observe": {"t_first": 1, "per_decade": 8},
    "realizations": 4,
    "seed": 9,
    "out": ")" + out.string() + R"("
  })");
}

std::vector<std::string> lines(const fs::path& p) {
  std::ifstream in(p);
  std::vector<std::string> out;
  for (std::string l; std::getline(in, l);) out.push_back(l);
  return out;
}

}  // namespace

TEST_CASE("derived seeds") {
  CHECK(realization_seed(5, 0) != realization_seed(5, 1));
  CHECK(realization_seed(5, 7) == realization_seed(5, 7));
  std::set<std::uint64_t> seen;
  for (std::uint64_t k = 0; k < 1000000; ++k) seen.insert(realization_seed(12345, k));
  CHECK(seen.size() == 1000000);
}

TEST_CASE("sha256 test vectors") {
  CHECK(sha256_hex("abc") == "ba7816bf8f01cfea414140de5dae2223b00361a396177a9cb410ff61f20015ad");
  CHECK(sha256_hex("") == "e3b0c44298fc1c149afbf4c8996fb92427ae41e4649b934ca495991b7852b855");
}

TEST_CASE("config validation and round trip") {
  CHECK_THROWS_AS(parse_config(R"({"kind": "evolve", "time": {"dt": 0}})"), ConfigError);
  CHECK_THROWS_AS(parse_config(R"({"kind": "evolve", "time": {"dt": -1}})"), ConfigError);
  CHECK_THROWS_AS(parse_config(R"({"kind": "evolve", "speed": 3})"), ConfigError);
  CHECK_THROWS_AS(parse_config(R"({"kind": "evolve", "model": {"J": 1, "gamma": 2}})"), ConfigError);
  CHECK_THROWS_AS(parse_config(R"({"kind": "teleport"})"), ConfigError);
  CHECK_THROWS_AS(parse_config(R"({"kind": "scan"})"), ConfigError);
  CHECK_THROWS_AS(parse_config(R"({"kind": "chaos", "chaos": {"samples": 5}})"), ConfigError);
  CHECK_THROWS_AS(parse_config("{not json"), ConfigError);
  CHECK_THROWS_AS(parse_config(R"({"L": "many"})"), ConfigError);

  const auto c = parse_config(R"({"kind": "pt", "L": 128, "pt": {"betas": [0.05, 0.1], "orders": [2, 3]}})");
  const auto s = serialize_config(c);
  CHECK(serialize_config(parse_config(s)) == s);
  CHECK(parse_config(s).pt.orders == std::vector<int>{2, 3});
}

TEST_CASE("evolve run is deterministic and resumable") {
  const auto a = scratch("evolve_a"), b = scratch("evolve_b");
  const auto ma = run_experiment(small_evolve(a));
  CHECK(ma.exit_code() == 0);
  CHECK(ma.completed == 4);
  CHECK(ma.digests.count("m2_ensemble.csv") == 1);
  CHECK(ma.digests.count("realizations/r00003.csv") == 1);
  CHECK(ma.max_norm_drift < 1e-10);
  CHECK(ma.seeds.size() == 4);

  // same config again, in parallel
  const auto mb = run_experiment(small_evolve(b), {false, 3});
  CHECK(mb.digests == ma.digests);

  // interrupted after two realizations
  for (const char* f : {"r00002.csv", "r00002.json", "r00002_final.csv", "r00003.csv", "r00003.json",
                        "r00003_final.csv"})
    fs::remove(b / "realizations" / f);
  fs::remove(b / "m2_ensemble.csv");
  const auto mr = run_experiment(small_evolve(b), {true, 1});
  CHECK(mr.resumed == 2);
  CHECK(mr.digests == ma.digests);

  // manifest round trip
  const auto back = read_manifest(a / "manifest.json");
  CHECK(back.digests == ma.digests);
  CHECK(back.kind == "evolve");

  std::ostringstream fig1;
  emit_figure_data(a, "fig1", fig1);
  CHECK(fig1.str().rfind("x,density\n", 0) == 0);
  std::istringstream in(fig1.str());
  double total = 0.0;
  std::string line;
  std::getline(in, line);
  while (std::getline(in, line)) total += std::stod(line.substr(line.find(',') + 1));
  CHECK(total == doctest::Approx(1.0).epsilon(1e-10));
  std::ostringstream bad;
  CHECK_THROWS_AS(emit_figure_data(a, "fig4", bad), std::invalid_argument);
  CHECK_THROWS_AS(emit_figure_data(a, "fig9", bad), std::invalid_argument);
}

TEST_CASE("scan emits one M2 series per beta") {
  const auto d = scratch("scan");
  auto c = small_evolve(d);
  c.kind = "scan";
  c.betas = {0.0, 0.1, 1.0};
  c.realizations = 2;
  c.final_snapshot = false;
  const auto m = run_experiment(c);
  CHECK(m.completed == 6);
  std::ostringstream os;
  emit_figure_data(d, "fig2", os);
  std::set<std::string> betas;
  std::istringstream in(os.str());
  std::string line;
  std::getline(in, line);
  CHECK(line == "beta,t,M2");
  while (std::getline(in, line)) betas.insert(line.substr(0, line.find(',')));
  CHECK(betas.size() == 3);
}

TEST_CASE("pt run writes t* table") {
  const auto d = scratch("pt");
  auto c = parse_config(R"({"kind": "pt", "L": 128, "seed": 3,
    "pt": {"betas": [0.05, 0.1], "orders": [1], "t_end": 200, "dt": 0.05}})");
  c.out = d.string();
  const auto m = run_experiment(c);
  CHECK(m.exit_code() == 0);
  const auto t = lines(d / "t_star.csv");
  REQUIRE(t.size() == 3);
  CHECK(t[0] == "beta,order,t_star,extrapolated");
  std::ostringstream os;
  emit_figure_data(d, "fig4", os);
  CHECK(os.str().rfind("inv_beta,log10_t_star,order\n", 0) == 0);
  CHECK(run_experiment(c).digests == m.digests);
}

TEST_CASE("chaos cells and collapse fit") {
  const auto d = scratch("chaos");
  auto c = parse_config(R"({"kind": "chaos", "seed": 4,
    "chaos": {"rho": [0.001], "W": [2], "L": [8], "samples": 20, "T": 200, "n_exp": 1, "beta": 0}})");
  c.out = d.string();
  const auto m = run_experiment(c);
  CHECK(m.exit_code() == 0);
  const auto rec = nlohmann::json::parse(lines(d / "records.jsonl").at(0));
  CHECK(rec["P"].get<double>() == 1.0);
  CHECK(run_experiment(c, {false, 2}).digests == m.digests);

  // collapse fit from planted records
  ScalingFit truth;
  truth.alpha = 1.75;
  truth.zeta = 2.25;
  truth.eta = 5.2;
  truth.c1 = 0.3;
  truth.c2 = 2.0;
  const auto f = scratch("fit");
  fs::create_directories(f);
  {
    std::ofstream os(f / "records.jsonl");
    for (double W : {1.0, 2.0, 4.0, 8.0})
      for (int i = 0; i < 12; ++i) {
        const double rho = std::pow(10.0, -1.0 + 2.0 * i / 11.0) * std::pow(W, 1.75);
        const double P = q_inverse(truth.predict(rho, W));
        os << nlohmann::json{{"rho", rho}, {"W", W}, {"L", 16}, {"P", P}}.dump() << "\n";
      }
  }
  auto fc = parse_config(R"({"kind": "fit", "fit": {"records": "records.jsonl"}})");
  fc.fit.records = (f / "records.jsonl").string();
  fc.out = (f / "out").string();
  const auto fm = run_experiment(fc);
  CHECK(fm.exit_code() == 0);
  std::ifstream in(f / "out" / "fit.json");
  const auto j = nlohmann::json::parse(in);
  CHECK(j["alpha"].get<double>() == doctest::Approx(1.75).epsilon(0.01));
  CHECK(j["zeta"].get<double>() == doctest::Approx(2.25).epsilon(0.01));
  std::ostringstream fig3;
  emit_figure_data(f / "out", "fig3", fig3);
  CHECK(fig3.str().rfind("x,QW_alpha,rho,W\n", 0) == 0);

  // a fit that cannot run is a partial failure
  auto bad = fc;
  bad.out = (f / "bad").string();
  bad.fit.records = (d / "records.jsonl").string();
  CHECK(run_experiment(bad).exit_code() == 3);
}

TEST_CASE("exit codes") {
  RunManifest m;
  m.units = 2;
  m.completed = 2;
  CHECK(m.exit_code() == 0);
  m.completed = 1;
  m.failures = {"1: boom"};
  CHECK(m.exit_code() == 3);
  m.completed = 0;
  m.numerical_failure = true;
  CHECK(m.exit_code() == 4);
}
