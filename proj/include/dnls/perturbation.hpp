#pragma once

#include <cstdint>
#include <iosfwd>
#include <limits>
#include <memory>
#include <span>
#include <vector>

#include <Eigen/Dense>

#include "dnls/disorder.hpp"

namespace dnls {

/// Integer combination of renormalized energies, sum_j coef_j E'_{mode_j}.
/// Interned: equal combinations share an id and id 0 is the empty one.
class PhasePool {
 public:
  PhasePool();

  std::uint32_t zero() const { return 0; }
  /// Id of +/- `a` + `b` (sign applies to a only).
  std::uint32_t add(std::uint32_t a, int sign_a, std::uint32_t b);
  /// Id of E'_n + E'_m1 - E'_m2 - E'_m3.
  std::uint32_t base(int n, int m1, int m2, int m3);
  /// Id of E'_m - E'_n style pairs and other small combinations.
  std::uint32_t from(const std::vector<std::pair<int, int>>& mode_coef);

  const std::vector<std::pair<int, int>>& entries(std::uint32_t id) const { return entries_[id]; }
  std::size_t size() const { return entries_.size(); }
  double frequency(std::uint32_t id, std::span<const double> energies) const;

 private:
  struct Impl;
  std::shared_ptr<Impl> impl_;
  std::vector<std::vector<std::pair<int, int>>> entries_;
};

/// One term a t^p e^{i Phi t} of a coefficient series.
struct Term {
  std::uint32_t phase = 0;
  int power = 0;
  cplx a{};
};
using Series = std::vector<Term>;

struct ExpansionOptions {
  bool cancel_secular = true;
  double prune = 1e-15;  // drop terms with beta^k |a| below this
  /// Iterate E' to a fixed point instead of accumulating it order by order.
  bool self_consistent = true;
  int max_fixed_point_iterations = 200;
  double fixed_point_tolerance = 1e-13;
  /// A change that stops shrinking is accepted below this floor (pruning noise).
  double fixed_point_floor = 1e-6;
};

struct ExpansionState {
  int order = 0;
  double beta = 0.0;
  std::vector<double> t_grid;
  std::vector<int> modes;  // global indices of the retained set
  int initial = 0;         // local index of the initially occupied mode
  Eigen::MatrixXd basis;   // L x retained, columns u_n
  std::vector<double> energies;      // E_n
  std::vector<double> renormalized;  // E'_n
  std::vector<std::vector<double>> corrections;  // [l][n], l = 1..N (row 0 unused)
  std::vector<std::vector<Series>> coeff;        // [k][n]
  std::shared_ptr<PhasePool> phases;
  std::vector<double> omega;  // numeric value of each phase id at the final E'

  bool cancel_secular = true;
  int fixed_point_iterations = 0;
  double fixed_point_change = 0.0;
  double secular_residual = 0.0;  // largest imaginary part left after cancellation
  std::size_t uncancelled_secular = 0;
  std::vector<std::size_t> term_counts;  // per order

  std::size_t size() const { return modes.size(); }
  cplx coefficient(int k, int n, double t) const;
  /// c~_n(t) = sum_k beta^k c_n^(k)(t) for every retained mode.
  std::vector<cplx> truncated(double t) const;
  /// max over the grid of |c_n^(k)(t)|.
  double max_abs(int k, int n) const;
};

/// Retained set: modes whose centers lie within r_cut of the initial mode.
std::vector<int> retained_modes(const EigenSystem& es, int initial_mode, double r_cut);

/// Among modes centered within `radius` of `center`, the one whose strongest
/// first-order response max_n 2|V_n^{000}| / |E_n - E_0| is smallest.
int least_resonant_mode(const EigenSystem& es, double center, double radius);

/// Default truncation radius, grows with the order and with ln(1/beta).
double default_r_cut(const EigenSystem& es, int initial_mode, int order, double beta);

/// Renormalized secular-free expansion through `order` with c_n(0) = delta_{n,initial}.
/// `overlaps` defines the retained set; `initial_mode` is a global index.
ExpansionState expand(const EigenSystem& es, const OverlapTable& overlaps, int initial_mode,
                      double beta, int order, std::vector<double> t_grid,
                      const ExpansionOptions& options = {});

/// psi~(x, t) = sum_n c~_n(t) e^{-i E'_n t} u_n(x) on every lattice site.
std::vector<cplx> assemble(const ExpansionState& ex, double t);

void write_expansion(std::ostream& os, const ExpansionState& ex);

// ---------------------------------------------------------------------------

/// Linearized remainder equation i dQ/dt = W + M Q + Mbar Q*.
class RemainderOperator {
 public:
  explicit RemainderOperator(const ExpansionState& ex);

  std::size_t size() const { return ex_->size(); }
  double beta() const { return ex_->beta; }
  const ExpansionState& expansion() const { return *ex_; }

  Eigen::VectorXcd inhomogeneity(double t) const;
  Eigen::MatrixXcd coupling(double t) const;        // M
  Eigen::MatrixXcd conj_coupling(double t) const;   // Mbar

  /// W, and the site field psi~ used by apply, from precomputed c~ and dc~/dt.
  struct Frame {
    double t = 0.0;
    Eigen::VectorXcd w;
    Eigen::VectorXcd field;  // psi~ on sites
  };
  Frame frame(double t, const Eigen::VectorXcd& c, const Eigen::VectorXcd& dc) const;
  Frame frame(double t) const;
  /// M Q + Mbar Q* evaluated in the site basis.
  Eigen::VectorXcd apply(const Frame& f, const Eigen::VectorXcd& q) const;

  /// c~ as one flat list of terms, beta^k folded into the amplitudes.
  struct FlatTerm {
    int mode;
    int power;
    double omega;
    cplx a;
  };
  const std::vector<FlatTerm>& flat_terms() const { return flat_; }

 private:
  const ExpansionState* ex_;
  Eigen::VectorXd detuning_;  // E_n - E'_n
  std::vector<FlatTerm> flat_;
};

RemainderOperator remainder_operator(const ExpansionState& ex);

struct RemainderOptions {
  double dt = 0.02;
  int sample_every = 50;
  int max_retries = 3;
};

struct RemainderTrajectory {
  std::vector<double> times;
  std::vector<double> norms;
  std::vector<std::vector<double>> mode_abs;  // [sample][n] |Q_n|
  Eigen::VectorXcd final_q;
  double dt = 0.0;
  int retries = 0;
  /// time average of |Q_n| over the samples
  std::vector<double> mean_abs() const;
};

/// RK4 from Q(0) = 0 to t_end; stops early once the norm exceeds stop_above.
RemainderTrajectory remainder_evolve(const RemainderOperator& op, double t_end,
                                     const RemainderOptions& options = {},
                                     double stop_above = std::numeric_limits<double>::infinity());

struct TStar {
  double value = std::numeric_limits<double>::infinity();
  bool crossed = false;
  bool extrapolated = false;
  bool degenerate = false;  // norm identically zero
  bool refused = false;     // tail not monotone, no extrapolation
};

TStar t_star(std::span<const double> times, std::span<const double> norms,
             double threshold = 0.1);

struct DominantSubtraction {
  std::vector<int> removed;  // local indices, largest first
  std::vector<double> norms;
  TStar t_star;
};

DominantSubtraction subtract_dominant_modes(const RemainderTrajectory& traj, int count,
                                            double threshold = 0.1);

struct TStarRow {
  double beta;
  int order;
  TStar t_star;
};
void write_t_star_csv(std::ostream& os, std::span<const TStarRow> rows);

// ---------------------------------------------------------------------------

struct AndersonDarling {
  double a2 = 0.0;
  double a2_star = 0.0;  // small-sample corrected
  bool reject_5pct = false;
};

/// Test of normality with estimated mean and variance.
AndersonDarling anderson_darling_normal(std::vector<double> samples);

struct SmallDenominatorOptions {
  std::size_t L = 64;
  double w = 4.0;
  double J = 1.0;
  int l = 1;
  double s = 0.5;
  std::size_t samples = 10000;
  std::vector<int> coefficients{1};  // c_i drawn uniformly from this set
  std::uint64_t seed = 1;
};

struct SmallDenominatorStats {
  double mean = 0.0;
  double std_error = 0.0;
  double ci_low = 0.0, ci_high = 0.0;
  std::vector<std::size_t> checkpoints;  // sample counts
  std::vector<double> running_mean;
  std::vector<double> running_ci_width;
  bool converging = true;
  std::vector<double> f;  // raw samples
  double f_mean = 0.0, f_std = 0.0;
  AndersonDarling normality;
};

/// Monte-Carlo estimate of <|f_l|^{-s}>, f_l = sum_i c_i E_{n_i} over l distinct
/// eigenvalues of one realization per sample.
SmallDenominatorStats small_denominator_stats(const SmallDenominatorOptions& options);

}  // namespace dnls
