#include "dnls/harness.hpp"

#include <algorithm>
#include <atomic>
#include <chrono>
#include <cmath>
#include <cstdio>
#include <fstream>
#include <functional>
#include <iomanip>
#include <mutex>
#include <sstream>
#include <stdexcept>
#include <thread>

#include <json.hpp>
#include <openssl/evp.h>

#include "dnls/chaos.hpp"
#include "dnls/dynamics.hpp"
#include "dnls/errors.hpp"
#include "dnls/observables.hpp"
#include "dnls/perturbation.hpp"
#include "dnls/rng.hpp"

namespace fs = std::filesystem;
using nlohmann::json;

namespace dnls {

std::string version() { return "0.1.0"; }

std::uint64_t realization_seed(std::uint64_t master_seed, std::uint64_t index) {
  return derive_seed(master_seed, index);
}

// ---------------------------------------------------------------------------
// Configuration

namespace {

void reject_unknown(const json& j, std::initializer_list<const char*> keys, const std::string& where) {
  if (!j.is_object()) throw ConfigError(where + ": expected an object");
  for (const auto& [k, v] : j.items())
    if (std::none_of(keys.begin(), keys.end(), [&](const char* s) { return k == s; }))
      throw ConfigError(where + ": unknown key '" + k + "'");
}

template <class T>
void get(const json& j, const char* key, T& out, const std::string& where) {
  if (!j.contains(key)) return;
  try {
    out = j.at(key).get<T>();
  } catch (const json::exception& e) {
    throw ConfigError(where + "." + key + ": " + e.what());
  }
}

ExperimentConfig from_json(const json& j) {
  ExperimentConfig c;
  reject_unknown(j, {"kind", "model", "L", "initial", "time", "observe", "realizations", "betas",
                     "seed", "out", "pt", "chaos", "fit"},
                 "config");
  get(j, "kind", c.kind, "config");
  if (j.contains("model")) {
    const auto& m = j["model"];
    reject_unknown(m, {"J", "w", "beta", "sigma", "boundary"}, "model");
    get(m, "J", c.model.J, "model");
    get(m, "w", c.w, "model");
    get(m, "beta", c.model.beta, "model");
    get(m, "sigma", c.model.sigma, "model");
    std::string b = to_string(c.model.boundary);
    get(m, "boundary", b, "model");
    try {
      c.model.boundary = boundary_from_string(b);
    } catch (const std::exception&) {
      throw ConfigError("model.boundary: expected open or periodic");
    }
  }
  get(j, "L", c.L, "config");
  if (j.contains("initial")) {
    const auto& i = j["initial"];
    reject_unknown(i, {"type", "site", "width", "norm", "random_phases", "mode"}, "initial");
    get(i, "type", c.initial.type, "initial");
    get(i, "site", c.initial.site, "initial");
    get(i, "width", c.initial.width, "initial");
    get(i, "norm", c.initial.norm, "initial");
    get(i, "random_phases", c.initial.random_phases, "initial");
    get(i, "mode", c.initial.mode, "initial");
  }
  if (j.contains("time")) {
    const auto& t = j["time"];
    reject_unknown(t, {"t_end", "dt"}, "time");
    get(t, "t_end", c.t_end, "time");
    get(t, "dt", c.dt, "time");
  }
  if (j.contains("observe")) {
    const auto& o = j["observe"];
    reject_unknown(o, {"t_first", "per_decade", "final_snapshot"}, "observe");
    get(o, "t_first", c.t_first, "observe");
    get(o, "per_decade", c.per_decade, "observe");
    get(o, "final_snapshot", c.final_snapshot, "observe");
  }
  get(j, "realizations", c.realizations, "config");
  get(j, "betas", c.betas, "config");
  get(j, "seed", c.seed, "config");
  get(j, "out", c.out, "config");
  if (j.contains("pt")) {
    const auto& p = j["pt"];
    reject_unknown(p, {"betas", "orders", "t_end", "dt", "threshold", "center_radius", "r_cut",
                       "subtract", "compare_t_end", "compare_dt", "compare_points"},
                   "pt");
    get(p, "betas", c.pt.betas, "pt");
    get(p, "orders", c.pt.orders, "pt");
    get(p, "t_end", c.pt.t_end, "pt");
    get(p, "dt", c.pt.dt, "pt");
    get(p, "threshold", c.pt.threshold, "pt");
    get(p, "center_radius", c.pt.center_radius, "pt");
    get(p, "r_cut", c.pt.r_cut, "pt");
    get(p, "subtract", c.pt.subtract, "pt");
    get(p, "compare_t_end", c.pt.compare_t_end, "pt");
    get(p, "compare_dt", c.pt.compare_dt, "pt");
    get(p, "compare_points", c.pt.compare_points, "pt");
  }
  if (j.contains("chaos")) {
    const auto& h = j["chaos"];
    reject_unknown(h, {"rho", "W", "L", "samples", "T", "dt", "n_exp", "renorm_interval", "beta",
                       "regular_slope"},
                   "chaos");
    get(h, "rho", c.chaos.rho, "chaos");
    get(h, "W", c.chaos.W, "chaos");
    get(h, "L", c.chaos.L, "chaos");
    get(h, "samples", c.chaos.samples, "chaos");
    get(h, "T", c.chaos.T, "chaos");
    get(h, "dt", c.chaos.dt, "chaos");
    get(h, "n_exp", c.chaos.n_exp, "chaos");
    get(h, "renorm_interval", c.chaos.renorm_interval, "chaos");
    get(h, "beta", c.chaos.beta, "chaos");
    get(h, "regular_slope", c.chaos.regular_slope, "chaos");
  }
  if (j.contains("fit")) {
    const auto& f = j["fit"];
    reject_unknown(f, {"records", "L0", "norm", "predict_L", "predict_W"}, "fit");
    get(f, "records", c.fit.records, "fit");
    get(f, "L0", c.fit.L0, "fit");
    get(f, "norm", c.fit.norm, "fit");
    get(f, "predict_L", c.fit.predict_L, "fit");
    get(f, "predict_W", c.fit.predict_W, "fit");
  }
  return c;
}

json to_json(const ExperimentConfig& c) {
  return json{
      {"kind", c.kind},
      {"model",
       {{"J", c.model.J},
        {"w", c.w},
        {"beta", c.model.beta},
        {"sigma", c.model.sigma},
        {"boundary", to_string(c.model.boundary)}}},
      {"L", c.L},
      {"initial",
       {{"type", c.initial.type},
        {"site", c.initial.site},
        {"width", c.initial.width},
        {"norm", c.initial.norm},
        {"random_phases", c.initial.random_phases},
        {"mode", c.initial.mode}}},
      {"time", {{"t_end", c.t_end}, {"dt", c.dt}}},
      {"observe",
       {{"t_first", c.t_first}, {"per_decade", c.per_decade}, {"final_snapshot", c.final_snapshot}}},
      {"realizations", c.realizations},
      {"betas", c.betas},
      {"seed", c.seed},
      {"out", c.out},
      {"pt",
       {{"betas", c.pt.betas},
        {"orders", c.pt.orders},
        {"t_end", c.pt.t_end},
        {"dt", c.pt.dt},
        {"threshold", c.pt.threshold},
        {"center_radius", c.pt.center_radius},
        {"r_cut", c.pt.r_cut},
        {"subtract", c.pt.subtract},
        {"compare_t_end", c.pt.compare_t_end},
        {"compare_dt", c.pt.compare_dt},
        {"compare_points", c.pt.compare_points}}},
      {"chaos",
       {{"rho", c.chaos.rho},
        {"W", c.chaos.W},
        {"L", c.chaos.L},
        {"samples", c.chaos.samples},
        {"T", c.chaos.T},
        {"dt", c.chaos.dt},
        {"n_exp", c.chaos.n_exp},
        {"renorm_interval", c.chaos.renorm_interval},
        {"beta", c.chaos.beta},
        {"regular_slope", c.chaos.regular_slope}}},
      {"fit",
       {{"records", c.fit.records},
        {"L0", c.fit.L0},
        {"norm", c.fit.norm},
        {"predict_L", c.fit.predict_L},
        {"predict_W", c.fit.predict_W}}},
  };
}

void require(bool ok, const std::string& msg) {
  if (!ok) throw ConfigError(msg);
}

}  // namespace

void ExperimentConfig::validate() const {
  static const std::vector<std::string> kinds{"evolve", "pt", "chaos", "scan", "fit"};
  require(std::find(kinds.begin(), kinds.end(), kind) != kinds.end(),
          "kind must be one of evolve, pt, chaos, scan, fit");
  require(model.J > 0.0 && model.sigma > 0.0, "model: J and sigma must be positive");
  require(w >= 0.0, "model.w must be non-negative");
  require(std::isfinite(model.beta), "model.beta must be finite");
  require(!out.empty(), "out must be set");
  if (kind == "evolve" || kind == "scan") {
    require(L >= 2, "L must be >= 2");
    require(dt > 0.0 && std::isfinite(dt), "time.dt must be positive");
    require(t_end > 0.0 && t_end >= dt, "time.t_end must be >= dt");
    require(t_first > 0.0 && t_first <= t_end, "observe.t_first must be in (0, t_end]");
    require(per_decade >= 1, "observe.per_decade must be >= 1");
    require(realizations >= 1, "realizations must be >= 1");
    require(initial.type == "delta" || initial.type == "mode" || initial.type == "patch",
            "initial.type must be delta, mode or patch");
    require(initial.norm > 0.0, "initial.norm must be positive");
    require(initial.site < static_cast<long>(L), "initial.site outside the lattice");
    require(initial.mode < static_cast<long>(L), "initial.mode outside the lattice");
    if (initial.type == "patch")
      require(initial.width >= 1 && initial.width <= L, "initial.width must be in [1, L]");
    if (kind == "scan") require(!betas.empty(), "scan needs a betas grid");
  }
  if (kind == "pt") {
    require(L >= 4, "L must be >= 4");
    require(!pt.betas.empty() && !pt.orders.empty(), "pt.betas and pt.orders must be non-empty");
    for (double b : pt.betas) require(b > 0.0, "pt.betas must be positive");
    for (int o : pt.orders) require(o >= 0 && o <= 8, "pt.orders must be in [0, 8]");
    require(pt.t_end > 0.0 && pt.dt > 0.0, "pt.t_end and pt.dt must be positive");
    require(pt.threshold > 0.0, "pt.threshold must be positive");
    require(pt.subtract >= 0, "pt.subtract must be >= 0");
    require(pt.compare_t_end >= 0.0 && pt.compare_dt > 0.0 && pt.compare_points >= 1,
            "pt comparison settings invalid");
  }
  if (kind == "chaos") {
    require(!chaos.rho.empty() && !chaos.W.empty() && !chaos.L.empty(),
            "chaos.rho, chaos.W and chaos.L must be non-empty");
    for (double r : chaos.rho) require(r > 0.0, "chaos.rho must be positive");
    for (double x : chaos.W) require(x >= 0.0, "chaos.W must be non-negative");
    for (auto l : chaos.L) require(l >= 2, "chaos.L must be >= 2");
    require(chaos.samples >= 20, "chaos.samples must be >= 20");
    require(chaos.dt > 0.0 && chaos.T >= chaos.dt, "chaos.dt and chaos.T invalid");
    require(chaos.n_exp >= 1, "chaos.n_exp must be >= 1");
    require(chaos.renorm_interval > 0.0, "chaos.renorm_interval must be positive");
  }
  if (kind == "fit") require(!fit.records.empty(), "fit.records must name a records file");
}

ExperimentConfig parse_config(const std::string& text) {
  json j;
  try {
    j = json::parse(text);
  } catch (const json::parse_error& e) {
    throw ConfigError(std::string("config: ") + e.what());
  }
  auto c = from_json(j);
  c.validate();
  return c;
}

ExperimentConfig load_config(const fs::path& path) {
  std::ifstream in(path);
  if (!in) throw ConfigError("cannot read config " + path.string());
  std::stringstream ss;
  ss << in.rdbuf();
  auto c = parse_config(ss.str());
  if (c.kind == "fit" && fs::path(c.fit.records).is_relative())
    c.fit.records = (path.parent_path() / c.fit.records).lexically_normal().string();
  return c;
}

std::string serialize_config(const ExperimentConfig& c) { return to_json(c).dump(2); }

// ---------------------------------------------------------------------------
// Digests and files

std::string sha256_hex(const std::string& bytes) {
  unsigned char md[EVP_MAX_MD_SIZE];
  unsigned int len = 0;
  if (EVP_Digest(bytes.data(), bytes.size(), md, &len, EVP_sha256(), nullptr) != 1)
    throw std::runtime_error("sha256: digest failed");
  std::ostringstream os;
  for (unsigned int i = 0; i < len; ++i)
    os << std::hex << std::setw(2) << std::setfill('0') << static_cast<int>(md[i]);
  return os.str();
}

namespace {

std::string read_file(const fs::path& p) {
  std::ifstream in(p, std::ios::binary);
  if (!in) throw std::runtime_error("cannot read " + p.string());
  std::stringstream ss;
  ss << in.rdbuf();
  return ss.str();
}

// Write to a temporary sibling and rename, so a file either exists complete or not at all.
void write_atomic(const fs::path& p, const std::string& bytes) {
  fs::create_directories(p.parent_path());
  const fs::path tmp = p.string() + ".tmp";
  {
    std::ofstream out(tmp, std::ios::binary | std::ios::trunc);
    out << bytes;
    out.flush();
    if (!out) throw std::runtime_error("write failed: " + tmp.string());
  }
  fs::rename(tmp, p);
}

std::string unit_name(const char* prefix, std::size_t i) {
  char buf[32];
  std::snprintf(buf, sizeof buf, "%s%05zu", prefix, i);
  return buf;
}

std::vector<std::vector<double>> read_csv(const std::string& text) {
  std::vector<std::vector<double>> rows;
  std::istringstream in(text);
  std::string line;
  std::getline(in, line);  // header
  while (std::getline(in, line)) {
    if (line.empty()) continue;
    std::vector<double> row;
    std::istringstream ls(line);
    std::string cell;
    while (std::getline(ls, cell, ',')) row.push_back(std::stod(cell));
    rows.push_back(std::move(row));
  }
  return rows;
}

std::string fmt(double v) {
  std::ostringstream os;
  os << std::setprecision(17) << v;
  return os.str();
}

}  // namespace

std::string file_sha256(const fs::path& path) { return sha256_hex(read_file(path)); }

std::map<std::string, std::string> directory_digests(const fs::path& dir) {
  std::map<std::string, std::string> out;
  if (!fs::exists(dir)) return out;
  for (const auto& e : fs::recursive_directory_iterator(dir)) {
    if (!e.is_regular_file()) continue;
    const auto rel = fs::relative(e.path(), dir).generic_string();
    if (rel == "manifest.json" || e.path().extension() == ".tmp") continue;
    out[rel] = file_sha256(e.path());
  }
  return out;
}

int RunManifest::exit_code() const {
  if (failures.empty()) return 0;
  if (completed == 0 && numerical_failure) return 4;
  return 3;
}

void write_manifest(std::ostream& os, const RunManifest& m) {
  json j;
  j["config"] = json::parse(m.config);
  j["kind"] = m.kind;
  j["version"] = m.version;
  j["seeds"] = m.seeds;
  j["units"] = m.units;
  j["completed"] = m.completed;
  j["resumed"] = m.resumed;
  j["failures"] = m.failures;
  j["numerical_failure"] = m.numerical_failure;
  j["wall_seconds"] = m.wall_seconds;
  j["steps"] = m.steps;
  j["max_norm_drift"] = m.max_norm_drift;
  j["max_energy_drift"] = m.max_energy_drift;
  j["max_abs_energy_drift"] = m.max_abs_energy_drift;
  j["digests"] = m.digests;
  os << j.dump(2) << "\n";
}

RunManifest read_manifest(const fs::path& path) {
  const auto j = json::parse(read_file(path));
  RunManifest m;
  m.config = j.at("config").dump(2);
  m.kind = j.at("kind").get<std::string>();
  m.version = j.at("version").get<std::string>();
  m.seeds = j.at("seeds").get<std::vector<std::uint64_t>>();
  m.units = j.at("units").get<std::size_t>();
  m.completed = j.at("completed").get<std::size_t>();
  m.resumed = j.at("resumed").get<std::size_t>();
  m.failures = j.at("failures").get<std::vector<std::string>>();
  m.numerical_failure = j.at("numerical_failure").get<bool>();
  m.wall_seconds = j.at("wall_seconds").get<double>();
  m.steps = j.at("steps").get<std::uint64_t>();
  m.max_norm_drift = j.at("max_norm_drift").get<double>();
  m.max_energy_drift = j.at("max_energy_drift").get<double>();
  m.max_abs_energy_drift = j.at("max_abs_energy_drift").get<double>();
  m.digests = j.at("digests").get<std::map<std::string, std::string>>();
  return m;
}

// ---------------------------------------------------------------------------
// Runs

namespace {

struct UnitResult {
  bool ok = false;
  bool numerical = false;
  std::string error;
};

// Runs `work(i)` for every unit not already on disk. `done(i)` tells whether
// unit i can be read back instead.
void parallel_units(std::size_t n, int workers, const std::function<bool(std::size_t)>& done,
                    const std::function<void(std::size_t)>& work, bool resume,
                    std::vector<UnitResult>& results, std::size_t& resumed) {
  results.assign(n, {});
  std::vector<std::size_t> todo;
  for (std::size_t i = 0; i < n; ++i) {
    if (resume && done(i)) {
      results[i].ok = true;
      ++resumed;
    } else {
      todo.push_back(i);
    }
  }
  std::atomic<std::size_t> next{0};
  const auto loop = [&] {
    for (std::size_t k; (k = next++) < todo.size();) {
      const auto i = todo[k];
      try {
        work(i);
        results[i].ok = true;
      } catch (const NumericalError& e) {
        results[i].numerical = true;
        results[i].error = e.what();
      } catch (const std::exception& e) {
        results[i].error = e.what();
      }
    }
  };
  const int nw = std::max(1, std::min<int>(workers, static_cast<int>(todo.size())));
  if (nw <= 1) {
    loop();
    return;
  }
  std::vector<std::thread> pool;
  for (int w = 0; w < nw; ++w) pool.emplace_back(loop);
  for (auto& t : pool) t.join();
}

std::shared_ptr<const DisorderRealization> realization(const ExperimentConfig& c, std::uint64_t seed,
                                                       std::size_t L) {
  return std::make_shared<DisorderRealization>(generate_disorder(seed, L, c.w));
}

WavepacketState initial_state(const ExperimentConfig& c, const ModelParams& p,
                              std::shared_ptr<const DisorderRealization> r, std::uint64_t seed) {
  const std::size_t L = c.L;
  const auto& ic = c.initial;
  if (ic.type == "delta")
    return delta_state(p, r, ic.site < 0 ? L / 2 : static_cast<std::size_t>(ic.site), ic.norm);
  if (ic.type == "patch") {
    const std::size_t first =
        ic.site < 0 ? (L - ic.width) / 2 : static_cast<std::size_t>(ic.site);
    if (first + ic.width > L) throw ConfigError("initial patch does not fit the lattice");
    return patch_state(p, r, first, ic.width, ic.norm,
                       ic.random_phases ? mix64(seed ^ 0x9E3779B97F4A7C15ULL) | 1 : 0);
  }
  const auto es = diagonalize(build_hamiltonian(*r, p));
  std::size_t mode = 0;
  if (ic.mode >= 0) {
    mode = static_cast<std::size_t>(ic.mode);
  } else {
    double best = std::numeric_limits<double>::infinity();
    for (std::size_t n = 0; n < es.size(); ++n)
      if (std::abs(es.centers[n] - L / 2.0) < best) {
        best = std::abs(es.centers[n] - L / 2.0);
        mode = n;
      }
  }
  return mode_state(p, r, es, mode, ic.norm);
}

// evolve and scan: units are (beta index, realization).
void run_trajectories(const ExperimentConfig& c, const RunOptions& o, RunManifest& m,
                      std::vector<UnitResult>& results) {
  const fs::path out(c.out);
  const std::vector<double> betas = c.kind == "scan" ? c.betas : std::vector<double>{c.model.beta};
  const std::size_t R = c.realizations, n = betas.size() * R;
  for (std::size_t i = 0; i < R; ++i) m.seeds.push_back(realization_seed(c.seed, i));
  const auto name = [&](std::size_t u) {
    const auto b = u / R, i = u % R;
    return (c.kind == "scan" ? unit_name("b", b) + "_" : std::string()) + unit_name("r", i);
  };
  const auto dir = out / "realizations";
  const auto work = [&](std::size_t u) {
    const auto b = u / R, i = u % R;
    ModelParams p = c.model;
    p.beta = betas[b];
    const auto seed = m.seeds[i];
    const auto r = realization(c, seed, c.L);
    auto st = initial_state(c, p, r, seed);
    const auto sched = ObservationSchedule::logarithmic(c.t_first, c.t_end, c.per_decade);
    const auto rec = evolve(st, c.t_end, c.dt, sched);
    std::ostringstream csv;
    write_trajectory_csv(csv, rec);
    if (c.final_snapshot) {
      std::ostringstream snap;
      write_snapshot(snap, st.psi);
      write_atomic(dir / (name(u) + "_final.csv"), snap.str());
    }
    write_atomic(dir / (name(u) + ".csv"), csv.str());
    json meta{{"index", i},        {"beta", betas[b]},
              {"seed", seed},      {"steps", rec.steps},
              {"dt", rec.dt},      {"max_norm_drift", rec.max_norm_drift},
              {"max_energy_drift", rec.max_energy_drift},
              {"max_abs_energy_drift", rec.max_abs_energy_drift}};
    write_atomic(dir / (name(u) + ".json"), meta.dump() + "\n");
  };
  const auto done = [&](std::size_t u) { return fs::exists(dir / (name(u) + ".json")); };
  parallel_units(n, o.workers, done, work, o.resume, results, m.resumed);

  // merge in index order
  std::string records, table = "beta,t,M2_mean,M2_stderr,exponent_running,realizations\n";
  for (std::size_t b = 0; b < betas.size(); ++b) {
    std::vector<MomentSeries> ensemble;
    for (std::size_t i = 0; i < R; ++i) {
      const auto u = b * R + i;
      if (!results[u].ok) {
        records += json{{"index", i}, {"beta", betas[b]}, {"status", "failed"},
                        {"error", results[u].error}}.dump() + "\n";
        continue;
      }
      auto meta = json::parse(read_file(dir / (name(u) + ".json")));
      m.steps += meta["steps"].get<std::uint64_t>();
      m.max_norm_drift = std::max(m.max_norm_drift, meta["max_norm_drift"].get<double>());
      // relative drift is null when E(0) = 0
      if (meta["max_energy_drift"].is_number())
        m.max_energy_drift = std::max(m.max_energy_drift, meta["max_energy_drift"].get<double>());
      m.max_abs_energy_drift =
          std::max(m.max_abs_energy_drift, meta["max_abs_energy_drift"].get<double>());
      meta["status"] = "ok";
      records += meta.dump() + "\n";
      MomentSeries s;
      for (const auto& row : read_csv(read_file(dir / (name(u) + ".csv")))) {
        s.times.push_back(row[0]);
        s.m1.push_back(row[3]);
        s.m2.push_back(row[4]);
        s.participation.push_back(row[5]);
      }
      ensemble.push_back(std::move(s));
    }
    if (ensemble.empty()) continue;
    const auto e = ensemble_average(ensemble);
    const auto ex = running_exponent(e.times, e.m2_mean);
    for (std::size_t k = 0; k < e.times.size(); ++k)
      table += fmt(betas[b]) + ',' + fmt(e.times[k]) + ',' + fmt(e.m2_mean[k]) + ',' +
               fmt(e.m2_stderr[k]) + ',' + fmt(ex[k]) + ',' + std::to_string(e.realizations) + "\n";
  }
  write_atomic(out / "records.jsonl", records);
  write_atomic(out / "m2_ensemble.csv", table);
}

// pt: units are (beta, order) cells on one realization.
void run_pt(const ExperimentConfig& c, const RunOptions& o, RunManifest& m,
            std::vector<UnitResult>& results) {
  const fs::path out(c.out), dir = out / "cells";
  const auto seed = realization_seed(c.seed, 0);
  m.seeds.push_back(seed);
  const auto r = realization(c, seed, c.L);
  ModelParams p0 = c.model;
  const auto es = std::make_shared<EigenSystem>(diagonalize(build_hamiltonian(*r, p0)));
  const int n0 = c.initial.mode >= 0 ? static_cast<int>(c.initial.mode)
                                     : least_resonant_mode(*es, c.L / 2.0, c.pt.center_radius);
  struct Cell {
    double beta;
    int order;
  };
  std::vector<Cell> cells;
  for (int ord : c.pt.orders)
    for (double b : c.pt.betas) cells.push_back({b, ord});
  const auto name = [&](std::size_t u) { return unit_name("c", u) + ".json"; };

  const auto work = [&](std::size_t u) {
    const auto [beta, order] = cells[u];
    const double rc = c.pt.r_cut > 0.0 ? c.pt.r_cut : default_r_cut(*es, n0, order, beta);
    const auto set = retained_modes(*es, n0, rc);
    OverlapTable tab(*es, set);
    const double horizon = std::max(c.pt.t_end, c.pt.compare_t_end);
    const auto ex = expand(*es, tab, n0, beta, order, {0.0, horizon});
    const auto op = remainder_operator(ex);
    RemainderOptions ro;
    ro.dt = c.pt.dt;
    const auto tr = remainder_evolve(op, c.pt.t_end, ro, 2.0 * c.pt.threshold);
    TStar ts = t_star(tr.times, tr.norms, c.pt.threshold);
    std::vector<int> removed;
    if (c.pt.subtract > 0) {
      const auto sub = subtract_dominant_modes(tr, c.pt.subtract, c.pt.threshold);
      ts = sub.t_star;
      for (int k : sub.removed) removed.push_back(ex.modes[k]);
    }
    json j{{"index", u},
           {"beta", beta},
           {"order", order},
           {"initial_mode", n0},
           {"retained", set.size()},
           {"r_cut", rc},
           {"terms", op.flat_terms().size()},
           {"fixed_point_iterations", ex.fixed_point_iterations},
           {"uncancelled_secular", ex.uncancelled_secular},
           {"t_star", std::isfinite(ts.value) ? json(ts.value) : json(nullptr)},
           {"crossed", ts.crossed},
           {"extrapolated", ts.extrapolated},
           {"refused", ts.refused},
           {"degenerate", ts.degenerate},
           {"removed_modes", removed},
           {"remainder_norm_end", tr.norms.back()},
           {"remainder_t_end", tr.times.back()}};
    if (c.pt.compare_t_end > 0.0) {
      ModelParams p = c.model;
      p.beta = beta;
      auto st = mode_state(p, r, *es, static_cast<std::size_t>(n0));
      SplitStepIntegrator integ(p, r, c.pt.compare_dt, SplitStepOptions{false});
      double amp_diff = 0.0, field_diff = 0.0, peak = 0.0;
      for (std::size_t k = 1; k <= c.pt.compare_points; ++k) {
        const double t = c.pt.compare_t_end * static_cast<double>(k) / c.pt.compare_points;
        integ.advance(st, static_cast<std::uint64_t>(std::llround((t - st.t) / c.pt.compare_dt)));
        const auto psi = assemble(ex, st.t);
        for (std::size_t x = 0; x < c.L; ++x) {
          amp_diff = std::max(amp_diff, std::abs(std::abs(psi[x]) - std::abs(st.psi[x])));
          field_diff = std::max(field_diff, std::abs(psi[x] - st.psi[x]));
          peak = std::max(peak, std::abs(st.psi[x]));
        }
      }
      j["compare_t_end"] = c.pt.compare_t_end;
      j["compare_dt"] = c.pt.compare_dt;
      j["max_amplitude_difference"] = amp_diff;
      j["max_field_difference"] = field_diff;
      j["peak_amplitude"] = peak;
      j["relative_amplitude_difference"] = amp_diff / peak;
    }
    write_atomic(dir / name(u), j.dump() + "\n");
  };
  const auto done = [&](std::size_t u) { return fs::exists(dir / name(u)); };
  parallel_units(cells.size(), o.workers, done, work, o.resume, results, m.resumed);

  std::string records;
  std::vector<TStarRow> rows;
  for (std::size_t u = 0; u < cells.size(); ++u) {
    if (!results[u].ok) {
      records += json{{"index", u}, {"beta", cells[u].beta}, {"order", cells[u].order},
                      {"status", "failed"}, {"error", results[u].error}}.dump() + "\n";
      continue;
    }
    auto j = json::parse(read_file(dir / name(u)));
    TStar ts;
    if (!j["t_star"].is_null()) ts.value = j["t_star"].get<double>();
    ts.extrapolated = j["extrapolated"].get<bool>();
    ts.crossed = j["crossed"].get<bool>();
    ts.refused = j["refused"].get<bool>();
    ts.degenerate = j["degenerate"].get<bool>();
    rows.push_back({cells[u].beta, cells[u].order, ts});
    j["status"] = "ok";
    records += j.dump() + "\n";
  }
  std::ostringstream csv;
  write_t_star_csv(csv, rows);
  write_atomic(out / "t_star.csv", csv.str());
  write_atomic(out / "records.jsonl", records);
}

// chaos: units are (rho, W, L) cells.
void run_chaos(const ExperimentConfig& c, const RunOptions& o, RunManifest& m,
               std::vector<UnitResult>& results) {
  const fs::path out(c.out), dir = out / "cells";
  struct Cell {
    double rho, W;
    std::size_t L;
  };
  std::vector<Cell> cells;
  for (double W : c.chaos.W)
    for (double rho : c.chaos.rho)
      for (auto L : c.chaos.L) cells.push_back({rho, W, L});
  for (std::size_t u = 0; u < cells.size(); ++u) m.seeds.push_back(realization_seed(c.seed, u));
  ChaosOptions co;
  co.lyapunov.T = c.chaos.T;
  co.lyapunov.dt = c.chaos.dt;
  co.lyapunov.n_exp = c.chaos.n_exp;
  co.lyapunov.renorm_interval = c.chaos.renorm_interval;
  co.classify.regular_slope = c.chaos.regular_slope;
  co.beta = c.chaos.beta;
  // Cells run one after another with the workers inside each ensemble.
  co.workers = o.workers;
  const auto name = [&](std::size_t u) { return unit_name("c", u) + ".jsonl"; };
  const auto work = [&](std::size_t u) {
    const auto rec = regularity_probability(cells[u].rho, cells[u].W, cells[u].L, c.chaos.samples,
                                            m.seeds[u], co);
    std::ostringstream os;
    write_record_jsonl(os, rec);
    write_atomic(dir / name(u), os.str());
  };
  const auto done = [&](std::size_t u) { return fs::exists(dir / name(u)); };
  parallel_units(cells.size(), 1, done, work, o.resume, results, m.resumed);
  std::string records;
  for (std::size_t u = 0; u < cells.size(); ++u) {
    if (results[u].ok) {
      records += read_file(dir / name(u));
    } else {
      records += json{{"rho", cells[u].rho}, {"W", cells[u].W}, {"L", cells[u].L},
                      {"status", "failed"}, {"error", results[u].error}}.dump() + "\n";
    }
  }
  write_atomic(out / "records.jsonl", records);
}

void run_fit(const ExperimentConfig& c, std::vector<UnitResult>& results) {
  const fs::path out(c.out);
  results.assign(1, {});
  std::vector<json> recs;
  {
    std::istringstream in(read_file(c.fit.records));
    std::string line;
    while (std::getline(in, line))
      if (!line.empty()) {
        auto j = json::parse(line);
        if (!j.contains("status")) recs.push_back(std::move(j));
      }
  }
  std::size_t L0 = c.fit.L0;
  if (L0 == 0) {
    L0 = std::numeric_limits<std::size_t>::max();
    for (const auto& j : recs) L0 = std::min(L0, j["L"].get<std::size_t>());
  }
  std::vector<QPoint> pts;
  for (const auto& j : recs) {
    if (j["L"].get<std::size_t>() != L0) continue;
    const double P = j["P"].get<double>();
    if (P <= 0.0 || P >= 1.0) continue;
    pts.push_back({j["rho"].get<double>(), j["W"].get<double>(), q_transform(P)});
  }
  try {
    const auto fit = collapse_fit(pts);
    std::ostringstream csv;
    write_collapse_csv(csv, pts, fit);
    write_atomic(out / "collapse.csv", csv.str());
    json j{{"L0", L0},           {"points", fit.points},       {"alpha", fit.alpha},
           {"alpha1", fit.alpha1()}, {"zeta", fit.zeta},         {"eta", fit.eta},
           {"c1", fit.c1},       {"c2", fit.c2},               {"alpha_err", fit.alpha_err},
           {"zeta_err", fit.zeta_err}, {"eta_err", fit.eta_err}, {"log_c1_err", fit.log_c1_err},
           {"log_c2_err", fit.log_c2_err}, {"residual", fit.residual}};
    if (c.fit.norm > 0.0 && c.fit.predict_W > 0.0) {
      json pred = json::array();
      for (auto L : c.fit.predict_L)
        pred.push_back({{"L", L},
                        {"P_chaos", p_chaos_fixed_norm(static_cast<double>(L), c.fit.norm,
                                                       c.fit.predict_W, fit,
                                                       static_cast<double>(L0))}});
      j["fixed_norm"] = pred;
    }
    write_atomic(out / "fit.json", j.dump(2) + "\n");
    results[0].ok = true;
  } catch (const NumericalError& e) {
    results[0].numerical = true;
    results[0].error = e.what();
  } catch (const std::invalid_argument& e) {
    results[0].error = e.what();
  }
}

}  // namespace

RunManifest run_experiment(const ExperimentConfig& config, const RunOptions& options) {
  config.validate();
  const auto start = std::chrono::steady_clock::now();
  const fs::path out(config.out);
  fs::create_directories(out);
  RunManifest m;
  m.config = serialize_config(config);
  m.kind = config.kind;
  m.version = version();
  std::vector<UnitResult> results;
  if (config.kind == "evolve" || config.kind == "scan")
    run_trajectories(config, options, m, results);
  else if (config.kind == "pt")
    run_pt(config, options, m, results);
  else if (config.kind == "chaos")
    run_chaos(config, options, m, results);
  else
    run_fit(config, results);
  m.units = results.size();
  for (std::size_t i = 0; i < results.size(); ++i) {
    if (results[i].ok) {
      ++m.completed;
    } else {
      m.failures.push_back(std::to_string(i) + ": " + results[i].error);
      m.numerical_failure = m.numerical_failure || results[i].numerical;
    }
  }
  m.digests = directory_digests(out);
  m.wall_seconds = std::chrono::duration<double>(std::chrono::steady_clock::now() - start).count();
  std::ostringstream os;
  write_manifest(os, m);
  write_atomic(out / "manifest.json", os.str());
  return m;
}

// ---------------------------------------------------------------------------
// Figure data

void emit_figure_data(const fs::path& run_dir, const std::string& figure, std::ostream& os) {
  const auto m = read_manifest(run_dir / "manifest.json");
  const auto need = [&](std::initializer_list<const char*> kinds) {
    if (std::none_of(kinds.begin(), kinds.end(), [&](const char* k) { return m.kind == k; }))
      throw std::invalid_argument("emit " + figure + ": run kind '" + m.kind + "' does not match");
  };
  os << std::setprecision(12);
  if (figure == "fig1") {
    need({"evolve", "scan"});
    fs::path snap;
    for (const auto& e : fs::directory_iterator(run_dir / "realizations")) {
      const auto n = e.path().filename().string();
      if (n.size() > 10 && n.ends_with("_final.csv") && (snap.empty() || e.path() < snap)) snap = e.path();
    }
    if (snap.empty()) throw std::invalid_argument("emit fig1: run has no final snapshot");
    os << "x,density\n";
    for (const auto& row : read_csv(read_file(snap)))
      os << row[0] << ',' << row[1] * row[1] + row[2] * row[2] << '\n';
  } else if (figure == "fig2") {
    need({"evolve", "scan"});
    // Geometric means of M2 in bins of 0.1 decade.
    os << "beta,t,M2\n";
    const auto rows = read_csv(read_file(run_dir / "m2_ensemble.csv"));
    std::size_t i = 0;
    while (i < rows.size()) {
      const double beta = rows[i][0];
      const long bin = std::lround(std::floor(10.0 * std::log10(rows[i][1])));
      double lt = 0.0, lm = 0.0;
      std::size_t n = 0;
      for (; i < rows.size() && rows[i][0] == beta &&
             std::lround(std::floor(10.0 * std::log10(rows[i][1]))) == bin;
           ++i, ++n) {
        lt += std::log(rows[i][1]);
        lm += std::log(rows[i][2]);
      }
      os << beta << ',' << std::exp(lt / n) << ',' << std::exp(lm / n) << '\n';
    }
  } else if (figure == "fig3") {
    need({"fit"});
    os << "x,QW_alpha,rho,W\n";
    for (const auto& row : read_csv(read_file(run_dir / "collapse.csv")))
      os << row[3] << ',' << row[4] << ',' << row[0] << ',' << row[1] << '\n';
  } else if (figure == "fig4") {
    need({"pt"});
    os << "inv_beta,log10_t_star,order\n";
    std::istringstream in(read_file(run_dir / "t_star.csv"));
    std::string line;
    std::getline(in, line);
    while (std::getline(in, line)) {
      std::istringstream ls(line);
      std::string beta, order, ts;
      std::getline(ls, beta, ',');
      std::getline(ls, order, ',');
      std::getline(ls, ts, ',');
      const double t = std::stod(ts);
      if (!std::isfinite(t)) continue;
      os << 1.0 / std::stod(beta) << ',' << std::log10(t) << ',' << order << '\n';
    }
  } else {
    throw std::invalid_argument("emit: unknown figure '" + figure + "' (fig1, fig2, fig3, fig4)");
  }
}

}  // namespace dnls
