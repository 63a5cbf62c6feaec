#pragma once

#include <cstdint>
#include <iosfwd>
#include <map>
#include <memory>
#include <string>
#include <utility>
#include <vector>

#include "dnls/disorder.hpp"
#include "dnls/kinetic.hpp"

namespace dnls {

/// Lattice field psi(x) at time t together with the model it evolves under.
struct WavepacketState {
  double t = 0.0;
  std::vector<cplx> psi;
  ModelParams params;
  std::shared_ptr<const DisorderRealization> realization;

  std::size_t size() const { return psi.size(); }
  double norm() const;
  /// Throws std::invalid_argument on size mismatch or missing realization.
  void validate() const;
};

// Initial conditions.
WavepacketState delta_state(const ModelParams& p, std::shared_ptr<const DisorderRealization> r,
                            std::size_t site, double norm = 1.0);
WavepacketState mode_state(const ModelParams& p, std::shared_ptr<const DisorderRealization> r,
                           const EigenSystem& es, std::size_t mode, double norm = 1.0);
/// Uniform |psi|^2 on [first, first + width) with total norm `norm`. When
/// `phase_seed` is non-zero the site phases are i.i.d. uniform on [0, 2 pi).
WavepacketState patch_state(const ModelParams& p, std::shared_ptr<const DisorderRealization> r,
                            std::size_t first, std::size_t width, double norm,
                            std::uint64_t phase_seed = 0);

/// Controls the active window used on long open chains: only sites inside
/// [lo, hi) are propagated, and the window grows by `chunk` whenever |psi|
/// within `margin` sites of an edge exceeds `tolerance` times sqrt(N). The
/// exact hopping step spreads roundoff over the whole window, so the
/// tolerance has to sit above that noise floor; amplitudes below it carry a
/// weight |psi|^2 of 1e-20 and do not affect any observable.
struct SplitStepOptions {
  bool active_window = true;
  double window_tolerance = 1e-10;
  std::size_t window_margin = 32;
  std::size_t window_chunk = 64;
  std::size_t check_interval = 64;
};

/// Second-order symmetric split step: half local rotation
/// exp(-i dt/2 (eps_x + beta |psi_x|^{2 sigma})), exact hopping step, half
/// local rotation. Consecutive half rotations are fused inside `advance`.
class SplitStepIntegrator {
 public:
  SplitStepIntegrator(const ModelParams& params, std::shared_ptr<const DisorderRealization> r,
                      double dt, SplitStepOptions options = {});

  /// Applies `steps` composite steps; state.t advances by steps * dt.
  /// Throws NumericalError if a non-finite amplitude appears.
  void advance(WavepacketState& state, std::uint64_t steps);

  double dt() const { return dt_; }
  std::pair<std::size_t, std::size_t> window() const { return {lo_, hi_}; }
  std::uint64_t steps_taken() const { return steps_; }

 private:
  void init_window(const WavepacketState& s);
  void check_window(const WavepacketState& s);
  void round_window();
  void local(cplx* psi, bool half) const;
  const KineticPropagator& kinetic();

  ModelParams params_;
  std::shared_ptr<const DisorderRealization> realization_;
  double dt_;
  SplitStepOptions options_;
  std::size_t L_ = 0;
  std::size_t lo_ = 0, hi_ = 0;
  double tol2_ = 0.0;
  std::vector<cplx> disorder_phase_[2];  // exp(-i h eps_x) for h = dt, dt/2
  bool window_ready_ = false;
  std::uint64_t steps_ = 0;
  std::map<std::size_t, std::unique_ptr<KineticPropagator>> propagators_;
};

/// One composite step. Pre: dt > 0.
WavepacketState step_split(const WavepacketState& state, double dt);

/// Sorted observation times; `evolve` snaps each to the nearest step.
struct ObservationSchedule {
  std::vector<double> times;

  /// `per_decade` log-spaced times from t_first to t_last, both included.
  static ObservationSchedule logarithmic(double t_first, double t_last, int per_decade);
  static ObservationSchedule uniform(double t_first, double t_last, std::size_t count);
};

struct Observation {
  double t = 0.0;
  double norm = 0.0;
  double energy = 0.0;
  double m1 = 0.0;
  double m2 = 0.0;
  double participation = 0.0;
};

struct Snapshot {
  double t = 0.0;
  std::vector<cplx> psi;
};

struct TrajectoryRecord {
  std::vector<Observation> observations;
  std::vector<Snapshot> snapshots;
  double dt = 0.0;
  std::string method = "strang-split local/kinetic/local";
  std::uint64_t steps = 0;
  double initial_norm = 0.0;
  double initial_energy = 0.0;
  double max_norm_drift = 0.0;        // max |N(t) - N(0)| / N(0)
  double max_energy_drift = 0.0;      // max |E(t) - E(0)| / |E(0)|
  double max_abs_energy_drift = 0.0;  // max |E(t) - E(0)|
};

struct EvolveOptions {
  SplitStepOptions stepper;
  bool keep_snapshots = false;
};

/// Evolves `state` in place to t_end and records observables at every
/// scheduled time in (state.t, t_end]; t_end itself is always observed.
/// t_end == state.t leaves the state untouched and returns an empty record.
TrajectoryRecord evolve(WavepacketState& state, double t_end, double dt,
                        const ObservationSchedule& schedule, const EvolveOptions& options = {});

/// Adaptive Runge-Kutta-Fehlberg 7(8) integration of the full equation with
/// absolute and relative local error `tol`. Validation oracle only.
/// Throws NumericalError on step-size underflow.
WavepacketState reference_evolve(const WavepacketState& state, double t_end, double tol);

/// Conserved energy
///   sum_x [-J (psi_{x+1} psi_x^* + c.c.) + eps_x |psi_x|^2
///          + beta/(sigma+1) |psi_x|^{2 sigma + 2}].
double energy(const WavepacketState& state);

/// c_n = exp(+i E_n t) sum_x u_n(x) psi(x, t).
std::vector<cplx> project_to_modes(const WavepacketState& state, const EigenSystem& es);

/// Columns: x, Re psi, Im psi.
void write_snapshot(std::ostream& os, std::span<const cplx> psi);
/// Columns: t, N, E, M1, M2, participation.
void write_trajectory_csv(std::ostream& os, const TrajectoryRecord& rec);

}  // namespace dnls
