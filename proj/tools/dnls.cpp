#include <cstdlib>
#include <fstream>
#include <iostream>

#include <CLI11.hpp>

#include "dnls/errors.hpp"
#include "dnls/harness.hpp"

namespace {

int workers_from_env() {
  if (const char* s = std::getenv("DNLS_WORKERS")) {
    const int n = std::atoi(s);
    if (n > 0) return n;
  }
  return 1;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"Disordered nonlinear Schroedinger lattice toolkit"};
  app.set_version_flag("--version", dnls::version());
  app.require_subcommand(1);

  std::string config_path, out, run_dir, figure, figure_out;
  std::uint64_t seed = 0;
  bool resume = false;
  int workers = 0;

  for (const char* kind : {"evolve", "pt", "chaos", "scan", "fit"}) {
    auto* sub = app.add_subcommand(kind, std::string("run a ") + kind + " experiment");
    sub->add_option("--config", config_path, "JSON config file")->required()->check(CLI::ExistingFile);
    sub->add_option("--seed", seed, "master seed override");
    sub->add_option("--out", out, "output directory override");
    sub->add_flag("--resume", resume, "keep completed units already on disk");
    sub->add_option("--workers", workers, "parallel workers (default DNLS_WORKERS or 1)")
        ->check(CLI::PositiveNumber);
  }
  auto* emit = app.add_subcommand("emit", "write plot-ready figure data");
  emit->add_option("--run", run_dir, "run output directory")->required()->check(CLI::ExistingDirectory);
  emit->add_option("--figure", figure, "fig1, fig2, fig3 or fig4")->required();
  emit->add_option("--out", figure_out, "output CSV (default stdout)");

  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& e) {
    const int rc = app.exit(e);
    return rc == 0 ? 0 : 2;
  }

  try {
    if (emit->parsed()) {
      if (figure_out.empty()) {
        dnls::emit_figure_data(run_dir, figure, std::cout);
      } else {
        std::ofstream os(figure_out);
        dnls::emit_figure_data(run_dir, figure, os);
      }
      return 0;
    }
    const auto* sub = app.get_subcommands().front();
    auto config = dnls::load_config(config_path);
    if (config.kind != sub->get_name())
      throw dnls::ConfigError("config kind '" + config.kind + "' does not match subcommand '" +
                              sub->get_name() + "'");
    if (sub->count("--seed")) config.seed = seed;
    if (!out.empty()) config.out = out;
    dnls::RunOptions opts;
    opts.resume = resume;
    opts.workers = workers > 0 ? workers : workers_from_env();
    const auto m = dnls::run_experiment(config, opts);
    std::cerr << m.kind << ": " << m.completed << "/" << m.units << " units";
    if (m.resumed) std::cerr << " (" << m.resumed << " resumed)";
    std::cerr << ", " << m.wall_seconds << " s, output " << config.out << "\n";
    for (const auto& f : m.failures) std::cerr << "failed " << f << "\n";
    return m.exit_code();
  } catch (const dnls::ConfigError& e) {
    std::cerr << "config error: " << e.what() << "\n";
    return 2;
  } catch (const std::invalid_argument& e) {
    std::cerr << "error: " << e.what() << "\n";
    return 2;
  } catch (const dnls::NumericalError& e) {
    std::cerr << "numerical failure: " << e.what() << "\n";
    return 4;
  } catch (const std::exception& e) {
    std::cerr << "error: " << e.what() << "\n";
    return 1;
  }
}
