#pragma once

#include <cstdint>
#include <iosfwd>
#include <span>
#include <vector>

#include "dnls/disorder.hpp"
#include "dnls/dynamics.hpp"

namespace dnls {

struct Moments {
  double norm = 0.0;
  double m1 = 0.0;             // sum x |psi|^2 / N
  double m2 = 0.0;             // sum (x - m1)^2 |psi|^2 / N
  double participation = 0.0;  // N^2 / sum |psi|^4
};

/// Throws std::invalid_argument for a zero-norm field.
Moments moments(std::span<const cplx> psi);
Moments moments(const WavepacketState& state);

/// Density of the packet's flat region, estimated as N / participation.
double flat_region_density(const Moments& m);

struct MomentSeries {
  std::vector<double> times;
  std::vector<double> m1;
  std::vector<double> m2;
  std::vector<double> participation;
  double norm = 1.0;

  static MomentSeries from_record(const TrajectoryRecord& rec);
};

struct FitWindow {
  double t_min = 0.0;
  double t_max = 0.0;
};

/// Power-law exponent of M2(t) with a 95% confidence interval.
struct ExponentFit {
  double exponent = 0.0;
  double intercept = 0.0;  // log M2 at log t = 0
  double std_error = 0.0;
  double ci_low = 0.0;
  double ci_high = 0.0;
  /// exp(3 * intercept): the constant D in M2^3 = D t, which the
  /// effective-noise law predicts to scale as beta^4.
  double diffusion = 0.0;
  std::size_t points = 0;
  std::size_t realizations = 1;
  bool bootstrap = false;
  FitWindow window;
};

/// Least-squares slope of log M2 against log t inside the window, after
/// resampling onto a log-uniform grid. Requires >= 10 samples in the window
/// and M2 > 0 throughout; throws std::invalid_argument otherwise.
ExponentFit fit_subdiffusion_exponent(std::span<const double> t, std::span<const double> m2,
                                      FitWindow window);

/// Ensemble version: fits the arithmetic mean of M2 over realizations; the
/// CI comes from a percentile bootstrap over realizations.
ExponentFit fit_subdiffusion_exponent(const std::vector<MomentSeries>& ensemble, FitWindow window,
                                      std::size_t bootstrap_samples = 1000,
                                      std::uint64_t seed = 1);

/// Mean and standard error of M2 across realizations at common times.
struct EnsembleMoments {
  std::vector<double> times;
  std::vector<double> m2_mean;
  std::vector<double> m2_stderr;
  std::size_t realizations = 0;
};
EnsembleMoments ensemble_average(const std::vector<MomentSeries>& ensemble);

/// Local slope d log M2 / d log t by centred differences (ends one-sided).
std::vector<double> running_exponent(std::span<const double> t, std::span<const double> m2);

/// Columns: t, M2_mean, M2_stderr, exponent_running.
void write_ensemble_csv(std::ostream& os, const EnsembleMoments& e);

/// Slope of log M2 against log beta at fixed time, beta <= 0 excluded.
struct BetaScaling {
  double slope = 0.0;
  double std_error = 0.0;
  double ci_low = 0.0;
  double ci_high = 0.0;
  std::vector<double> betas_used;
  std::size_t excluded = 0;
  bool consistent_with_four_thirds = false;
};
/// Requires >= 3 positive beta values; throws std::invalid_argument otherwise.
BetaScaling beta_scaling_check(std::span<const double> betas, std::span<const double> m2_at_t);

/// Outermost sites with |psi|^2 above `threshold`, measured from M1.
struct TailFront {
  double left = 0.0;   // M1 - x_left
  double right = 0.0;  // x_right - M1
  std::size_t left_site = 0;
  std::size_t right_site = 0;
};
/// Pre: 0 < threshold < max |psi|^2.
TailFront tail_front(std::span<const cplx> psi, double threshold);

/// Forcing on mode n (local index into the overlap table) built from sampled
/// mode amplitudes c_m(t) (as returned by project_to_modes):
///   F_n(t) = beta sum V_n^{m1 m2 m3} c_m1^* c_m2 c_m3 e^{i(E_n + E_m1 - E_m2 - E_m3) t},
/// restricted to the triples stored in the table.
std::vector<cplx> mode_forcing(std::span<const double> times,
                               const std::vector<std::vector<cplx>>& c_series,
                               const EigenSystem& es, const OverlapTable& overlaps, int n,
                               double beta);

struct Autocorrelation {
  std::vector<double> lags;
  std::vector<cplx> values;       // C(tau) / C(0)
  double c0 = 0.0;                // C(0)
  double integral = 0.0;          // integral of Re C(tau)/C(0) over the window
  double correlation_time = 0.0;  // first lag with |C|/C(0) < 1/e; +inf if none
  bool decaying = false;
  bool window_short = false;      // fewer than 10 correlation times available
};

/// Empirical autocorrelation C(tau) = <F^*(t) F(t + tau)> of a uniformly
/// sampled series (no mean subtraction). A series is classified decaying when
/// |C|/C(0) drops below 1/e and stays below 0.2 beyond five correlation times.
Autocorrelation noise_autocorrelation(std::span<const cplx> f, double dt, std::size_t max_lag);

}  // namespace dnls
