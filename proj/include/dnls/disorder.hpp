#pragma once

#include <array>
#include <complex>
#include <cstdint>
#include <iosfwd>
#include <map>
#include <span>
#include <string>
#include <vector>

#include <Eigen/Dense>

namespace dnls {

using cplx = std::complex<double>;

enum class Boundary { open, periodic };

std::string to_string(Boundary b);
Boundary boundary_from_string(const std::string& s);

/// Hopping J, nonlinearity beta and exponent sigma of the lattice NLSE
///   i dpsi/dt = -J (psi_{x+1} + psi_{x-1}) + eps_x psi + beta |psi|^{2 sigma} psi.
struct ModelParams {
  double J = 1.0;
  double beta = 0.0;
  double sigma = 1.0;
  Boundary boundary = Boundary::open;

  /// Throws std::invalid_argument unless J > 0 and sigma > 0.
  void validate() const;
};

/// One draw of the i.i.d. on-site potential, eps_x uniform on [-w/2, w/2].
struct DisorderRealization {
  std::uint64_t seed = 0;
  std::size_t L = 0;
  double w = 0.0;
  std::vector<double> epsilons;
};

/// Pure function of (seed, L, w); bit-identical on every platform.
DisorderRealization generate_disorder(std::uint64_t seed, std::size_t L, double w);

/// Plain-text exchange format:
///   # dnls-disorder v1
///   # seed <u64> L <n> w <real>
///   one epsilon per line, 17 significant digits.
void write_disorder(std::ostream& os, const DisorderRealization& r);
DisorderRealization read_disorder(std::istream& is);

/// Symmetric tridiagonal operator; periodic lattices add the corner coupling.
struct TridiagonalHamiltonian {
  std::vector<double> diagonal;
  std::vector<double> off_diagonal;  // size L-1, entry (x, x+1)
  double corner = 0.0;               // entry (0, L-1), periodic only
  Boundary boundary = Boundary::open;

  std::size_t size() const { return diagonal.size(); }
  Eigen::MatrixXd dense() const;
  /// out = H in, for real or complex vectors.
  void apply(std::span<const cplx> in, std::span<cplx> out) const;
  void apply(std::span<const double> in, std::span<double> out) const;
};

TridiagonalHamiltonian build_hamiltonian(const DisorderRealization& r, const ModelParams& p);

/// Spectrum and geometry of the linear Anderson problem. Column n of `modes`
/// is u_n(x); energies ascend. Immutable once built.
struct EigenSystem {
  Eigen::VectorXd energies;
  Eigen::MatrixXd modes;
  std::vector<double> centers;          // x_n = sum_x x u_n(x)^2
  std::vector<double> loc_lengths;      // xi_n, +inf when no decay is resolved
  std::vector<double> inverse_lengths;  // gamma_n = 1 / xi_n

  std::size_t size() const { return static_cast<std::size_t>(energies.size()); }
  double orthonormality_residual() const;
  double max_eigen_residual(const TridiagonalHamiltonian& h) const;
};

/// Implicit-shift symmetric QR on the tridiagonal form (dense symmetric
/// solver for periodic boundaries). Throws NumericalError on non-convergence.
EigenSystem diagonalize(const TridiagonalHamiltonian& h);

/// Mean position of u_n^2.
double localization_center(std::span<const double> mode);

/// -1 / slope of a least-squares fit of ln|u(x)| against |x - center| over
/// sites with |x - center| > 2 and |u(x)| > 1e-12. +inf if the slope is not
/// negative or fewer than three sites qualify.
double localization_length(std::span<const double> mode, double center);

// ---------------------------------------------------------------------------
// Four-mode overlap sums V_n^{m1 m2 m3} = sum_x u_n u_m1 u_m2 u_m3.

/// Exact value. Indices are sorted before summing, so every permutation of
/// the quadruple yields the identical floating-point result.
double overlap_sum(const EigenSystem& es, int n, int m1, int m2, int m3);

struct OverlapValue {
  double value = 0.0;
  bool exact = true;  // false when the prefilter skipped the sum
};

/// Prefilter: quadruples whose centers span more than `center_multiple`
/// localization lengths are reported as zero and flagged approximate.
struct OverlapPolicy {
  bool prefilter = true;
  double center_multiple = 8.0;
  double drop_below = 1e-12;      // |V| below this is not stored in tables
  double support_cutoff = 1e-15;  // sites with |u| below this are skipped in tables
};

OverlapValue overlap_sum(const EigenSystem& es, int n, int m1, int m2, int m3,
                         const OverlapPolicy& policy);

/// Sparse table of overlaps on a retained mode set. Indices used by the
/// table are local positions into `mode_set()`.
class OverlapTable {
 public:
  struct Entry {
    int m1, m2, m3;
    double value;
  };

  OverlapTable(const EigenSystem& es, std::vector<int> mode_set, OverlapPolicy policy = {});

  const std::vector<int>& mode_set() const { return modes_; }
  std::size_t size() const { return modes_.size(); }
  const OverlapPolicy& policy() const { return policy_; }

  /// Value for local indices in any order; 0 if not stored.
  double value(int n, int m1, int m2, int m3) const;

  /// Every ordered triple (m1, m2, m3) with a stored value for row n.
  const std::vector<Entry>& row(int n) const { return rows_.at(static_cast<std::size_t>(n)); }

  std::size_t stored_quadruples() const { return sorted_.size(); }
  std::size_t skipped_by_prefilter() const { return skipped_; }

 private:
  std::vector<int> modes_;
  OverlapPolicy policy_;
  std::map<std::array<int, 4>, double> sorted_;
  std::vector<std::vector<Entry>> rows_;
  std::size_t skipped_ = 0;
};

}  // namespace dnls
