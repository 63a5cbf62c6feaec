#pragma once

#include <cstdint>
#include <filesystem>
#include <iosfwd>
#include <map>
#include <string>
#include <vector>

#include "dnls/disorder.hpp"

namespace dnls {

std::string version();

struct InitialCondition {
  std::string type = "delta";  // delta | mode | patch
  long site = -1;              // delta site or patch start; -1 centers it
  std::size_t width = 1;       // patch width
  double norm = 1.0;
  bool random_phases = false;  // patch only
  long mode = -1;              // mode index; -1 picks the mode nearest the center
};

struct PtConfig {
  std::vector<double> betas{0.1};
  std::vector<int> orders{3};
  double t_end = 2000.0;  // remainder horizon
  double dt = 0.02;
  double threshold = 0.1;
  double center_radius = 10.0;  // initial mode search window around L/2
  double r_cut = 0.0;           // 0 selects the default radius
  int subtract = 0;             // dominant modes removed before t*
  double compare_t_end = 0.0;   // > 0 adds a direct integration check
  double compare_dt = 0.01;
  std::size_t compare_points = 200;
};

struct ChaosConfig {
  std::vector<double> rho{0.01};
  std::vector<double> W{2.0};
  std::vector<std::size_t> L{16};
  std::size_t samples = 100;
  double T = 1e5;
  double dt = 0.1;
  int n_exp = 4;
  double renorm_interval = 1.0;
  double beta = 1.0;
  double regular_slope = -0.8;
};

struct FitConfig {
  std::string records;  // JSON-lines file of chaos records
  std::size_t L0 = 0;   // 0 uses the smallest L present
  double norm = 0.0;    // > 0 adds fixed-norm predictions
  std::vector<std::size_t> predict_L;
  double predict_W = 0.0;
};

/// Everything one run needs. Physical quantities in units of J = 1 unless set.
struct ExperimentConfig {
  std::string kind = "evolve";  // evolve | pt | chaos | scan | fit
  ModelParams model;
  double w = 4.0;
  std::size_t L = 1024;
  InitialCondition initial;
  double t_end = 1e4;
  double dt = 0.05;
  double t_first = 1.0;  // first observation
  int per_decade = 10;
  bool final_snapshot = true;
  std::size_t realizations = 1;
  std::vector<double> betas;  // scan grid; evolve uses model.beta
  std::uint64_t seed = 1;
  std::string out = "run";
  PtConfig pt;
  ChaosConfig chaos;
  FitConfig fit;

  /// Throws ConfigError on any violation.
  void validate() const;
};

/// Parses and validates; unknown keys are rejected. Throws ConfigError.
ExperimentConfig parse_config(const std::string& text);
ExperimentConfig load_config(const std::filesystem::path& path);
std::string serialize_config(const ExperimentConfig& c);

struct RunOptions {
  bool resume = false;
  int workers = 1;
};

struct RunManifest {
  std::string config;  // serialized snapshot
  std::string kind;
  std::string version;
  std::vector<std::uint64_t> seeds;
  std::size_t units = 0, completed = 0, resumed = 0;
  std::vector<std::string> failures;  // "index: message"
  bool numerical_failure = false;
  double wall_seconds = 0.0;
  std::uint64_t steps = 0;
  double max_norm_drift = 0.0;
  double max_energy_drift = 0.0;  // relative, over realizations with E(0) != 0
  double max_abs_energy_drift = 0.0;
  std::map<std::string, std::string> digests;  // relative path -> SHA-256

  /// 0 success, 3 partial failure, 4 every unit failed numerically.
  int exit_code() const;
};

/// Per-realization seed, counter-based and stateless.
std::uint64_t realization_seed(std::uint64_t master_seed, std::uint64_t index);

/// Dispatches to the owning module and writes data files plus manifest.json
/// into config.out. Work units are written to their own files and merged in
/// index order, so the bytes do not depend on scheduling. With `resume`,
/// units whose files exist are read back instead of recomputed.
RunManifest run_experiment(const ExperimentConfig& config, const RunOptions& options = {});

void write_manifest(std::ostream& os, const RunManifest& m);
RunManifest read_manifest(const std::filesystem::path& path);

std::string sha256_hex(const std::string& bytes);
std::string file_sha256(const std::filesystem::path& path);
/// Digests of every file under `dir` except manifest.json, keyed by relative path.
std::map<std::string, std::string> directory_digests(const std::filesystem::path& dir);

/// Plot-ready CSV for fig1 (x, density), fig2 (beta, t, M2, log-binned),
/// fig3 (x, QW_alpha, rho, W) or fig4 (inv_beta, log10_t_star, order).
/// Throws std::invalid_argument when the run kind does not match.
void emit_figure_data(const std::filesystem::path& run_dir, const std::string& figure,
                      std::ostream& os);

}  // namespace dnls
