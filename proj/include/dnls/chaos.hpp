#pragma once

#include <cstdint>
#include <iosfwd>
#include <limits>
#include <span>
#include <string>
#include <vector>

#include "dnls/disorder.hpp"

namespace dnls {

/// Parameters after the rescaling by c = 1 / (J (1 + W)) with W = w / 2.
struct RescaledParams {
  double W = 0.0;
  double J = 1.0;     // J' = 1 / (1 + W)
  double w = 0.0;     // w' = w / (J (1 + W)), potential in [-w'/2, w'/2]
  double beta = 0.0;  // beta' = beta / (J (1 + W))
  double norm = 0.0;  // N' = beta' N
  double c = 1.0;

  double density(std::size_t L) const { return norm / static_cast<double>(L); }
};

RescaledParams rescale(double J, double w, double beta, double norm);
/// Multiplies J, w and beta by `c`; the identity at c = 1.
RescaledParams scale_by(const RescaledParams& p, double c);

struct LyapunovOptions {
  double dt = 0.1;
  double T = 1e5;
  int n_exp = 4;
  double renorm_interval = 1.0;
  int points_per_decade = 20;  // running series resolution
  std::uint64_t seed = 1;      // initial tangent vectors
  int max_retries = 5;
};

struct LyapunovResult {
  std::vector<double> exponents;              // descending
  std::vector<double> times;                  // running series sample times
  std::vector<std::vector<double>> running;   // [sample][i]
  double renorm_interval = 0.0;
  int retries = 0;
  double max_lambda() const { return exponents.empty() ? 0.0 : exponents.front(); }
};

/// Tangent dynamics of the split-step map on a ring: i dpsi/dt = -J (psi_{x+1} + psi_{x-1})
/// + eps_x psi + beta |psi|^2 psi. The tangent map is the exact derivative of
/// the numerical map, so the computed spectrum keeps the +/- pairing.
LyapunovResult lyapunov_spectrum(std::span<const cplx> psi0, std::span<const double> eps, double J,
                                 double beta, const LyapunovOptions& options = {});

enum class Regularity { regular, chaotic, indeterminate };
std::string to_string(Regularity r);

struct ClassifyOptions {
  double regular_slope = -0.8;  // log lambda vs log T slope over the last decade
  double plateau_slope = -0.2;
  double min_log_growth = 50.0;  // lambda_max T above this for a plateau to count as chaos
  double bounded_log_growth = 10.0;  // lambda_max T below this is regular whatever the slope
};

struct Classification {
  Regularity verdict = Regularity::indeterminate;
  double slope = 0.0;
  double lambda_max = 0.0;
  double T = 0.0;
};

Classification classify_regular(std::span<const double> times, std::span<const double> lambda_max,
                                const ClassifyOptions& options = {});
Classification classify_regular(const LyapunovResult& r, const ClassifyOptions& options = {});

struct ChaosOptions {
  LyapunovOptions lyapunov;
  ClassifyOptions classify;
  double beta = 1.0;  // nonlinearity in rescaled units; norm is rho L
  int workers = 1;
};

struct ChaosEnsembleRecord {
  double rho = 0.0, W = 0.0;
  std::size_t L = 0;
  std::size_t samples = 0;
  std::size_t regular = 0, chaotic = 0, indeterminate = 0;
  double P = 0.0, ci_low = 0.0, ci_high = 0.0;
  bool low_quality = false;
  std::uint64_t master_seed = 0;
  double T = 0.0;
  std::vector<double> lambda_max;
  std::vector<Regularity> verdicts;
};

struct Interval {
  double low, high;
};
/// Wilson score interval for k successes in n trials.
Interval wilson_interval(std::size_t k, std::size_t n, double z = 1.96);

ChaosEnsembleRecord regularity_probability(double rho, double W, std::size_t L,
                                           std::size_t n_samples, std::uint64_t master_seed,
                                           const ChaosOptions& options = {});

void write_record_jsonl(std::ostream& os, const ChaosEnsembleRecord& r);

struct ScalingR {
  double R = 0.0;
  double ci_low = 0.0, ci_high = 0.0;
  double sigma = 0.0;
  bool boundary = false;  // P = 0
};
ScalingR scaling_R(const ChaosEnsembleRecord& r);
ScalingR scaling_R(double P, double ci_low, double ci_high, std::size_t L);
/// Pairwise |R_i - R_j| <= k sqrt(sigma_i^2 + sigma_j^2).
bool mutually_consistent(std::span<const ScalingR> rs, double k = 2.0);

/// Q = P0 / (1 - P0); +inf at P0 = 1.
double q_transform(double P0);
double q_inverse(double Q);

struct QPoint {
  double rho, W, Q;
};

struct ScalingFit {
  double alpha = 0.0, zeta = 0.0, eta = 0.0, c1 = 0.0, c2 = 0.0;
  double alpha_err = 0.0, zeta_err = 0.0, eta_err = 0.0, log_c1_err = 0.0, log_c2_err = 0.0;
  double residual = 0.0;  // rms of log Q residuals
  std::size_t points = 0;
  double alpha1() const { return alpha; }
  /// q(x) = 1 / (x^zeta / c1 + x^eta / c2).
  double q(double x) const;
  double predict(double rho, double W) const;
};

/// Joint fit of Q = W^-alpha q(rho / W^alpha).
ScalingFit collapse_fit(std::span<const QPoint> points);

void write_collapse_csv(std::ostream& os, std::span<const QPoint> points, const ScalingFit& fit);

/// P_ch ~ L^(1 - zeta) N^zeta W^(alpha (1 - zeta)) / (c1 L0).
double p_chaos_fixed_norm(double L, double norm, double W, const ScalingFit& fit, double L0);

}  // namespace dnls
