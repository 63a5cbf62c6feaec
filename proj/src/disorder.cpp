#include "dnls/disorder.hpp"

#include <algorithm>
#include <cmath>
#include <numeric>
#include <iomanip>
#include <istream>
#include <limits>
#include <ostream>
#include <sstream>
#include <stdexcept>

#include <Eigen/Eigenvalues>

#include "dnls/errors.hpp"
#include "dnls/rng.hpp"

namespace dnls {

std::string to_string(Boundary b) { return b == Boundary::open ? "open" : "periodic"; }

Boundary boundary_from_string(const std::string& s) {
  if (s == "open") return Boundary::open;
  if (s == "periodic") return Boundary::periodic;
  throw std::invalid_argument("unknown boundary '" + s + "' (expected open|periodic)");
}

void ModelParams::validate() const {
  if (!(J > 0.0)) throw std::invalid_argument("hopping J must be positive");
  if (!(sigma > 0.0)) throw std::invalid_argument("nonlinearity exponent sigma must be positive");
  if (!std::isfinite(beta)) throw std::invalid_argument("beta must be finite");
}

DisorderRealization generate_disorder(std::uint64_t seed, std::size_t L, double w) {
  if (L < 1) throw std::invalid_argument("generate_disorder: L must be >= 1");
  if (!(w >= 0.0)) throw std::invalid_argument("generate_disorder: w must be >= 0");
  DisorderRealization r{seed, L, w, std::vector<double>(L)};
  CounterRng rng(seed);
  for (auto& e : r.epsilons) e = w * (rng.uniform() - 0.5);
  return r;
}

void write_disorder(std::ostream& os, const DisorderRealization& r) {
  os << "# dnls-disorder v1\n";
  os << "# seed " << r.seed << " L " << r.L << " w " << std::setprecision(17) << r.w << "\n";
  for (double e : r.epsilons) os << std::setprecision(17) << e << "\n";
}

DisorderRealization read_disorder(std::istream& is) {
  std::string line;
  if (!std::getline(is, line) || line.rfind("# dnls-disorder", 0) != 0)
    throw std::runtime_error("read_disorder: missing '# dnls-disorder' header");
  if (!std::getline(is, line)) throw std::runtime_error("read_disorder: missing parameter line");
  DisorderRealization r;
  {
    std::istringstream hs(line);
    std::string hash, k1, k2, k3;
    if (!(hs >> hash >> k1 >> r.seed >> k2 >> r.L >> k3 >> r.w) || k1 != "seed" || k2 != "L" ||
        k3 != "w")
      throw std::runtime_error("read_disorder: malformed parameter line: " + line);
  }
  r.epsilons.reserve(r.L);
  while (std::getline(is, line)) {
    if (line.empty() || line[0] == '#') continue;
    r.epsilons.push_back(std::stod(line));
  }
  if (r.epsilons.size() != r.L)
    throw std::runtime_error("read_disorder: expected " + std::to_string(r.L) + " values, got " +
                             std::to_string(r.epsilons.size()));
  return r;
}

// ---------------------------------------------------------------------------

Eigen::MatrixXd TridiagonalHamiltonian::dense() const {
  const auto L = static_cast<Eigen::Index>(size());
  Eigen::MatrixXd h = Eigen::MatrixXd::Zero(L, L);
  for (Eigen::Index x = 0; x < L; ++x) h(x, x) = diagonal[x];
  for (Eigen::Index x = 0; x + 1 < L; ++x) h(x, x + 1) = h(x + 1, x) = off_diagonal[x];
  if (boundary == Boundary::periodic && L > 2) {
    h(0, L - 1) += corner;
    h(L - 1, 0) += corner;
  }
  return h;
}

namespace {
template <typename T>
void apply_tridiagonal(const TridiagonalHamiltonian& h, std::span<const T> in, std::span<T> out) {
  const std::size_t L = h.size();
  if (in.size() != L || out.size() != L) throw std::invalid_argument("apply: size mismatch");
  for (std::size_t x = 0; x < L; ++x) {
    T acc = h.diagonal[x] * in[x];
    if (x > 0) acc += h.off_diagonal[x - 1] * in[x - 1];
    if (x + 1 < L) acc += h.off_diagonal[x] * in[x + 1];
    out[x] = acc;
  }
  if (h.boundary == Boundary::periodic && L > 2) {
    out[0] += h.corner * in[L - 1];
    out[L - 1] += h.corner * in[0];
  }
}
}  // namespace

void TridiagonalHamiltonian::apply(std::span<const cplx> in, std::span<cplx> out) const {
  apply_tridiagonal<cplx>(*this, in, out);
}
void TridiagonalHamiltonian::apply(std::span<const double> in, std::span<double> out) const {
  apply_tridiagonal<double>(*this, in, out);
}

TridiagonalHamiltonian build_hamiltonian(const DisorderRealization& r, const ModelParams& p) {
  p.validate();
  if (r.L < 2) throw std::invalid_argument("build_hamiltonian: L must be >= 2");
  TridiagonalHamiltonian h;
  h.boundary = p.boundary;
  h.diagonal = r.epsilons;
  h.off_diagonal.assign(r.L - 1, -p.J);
  // For L = 2 the periodic bond duplicates the open one; keep the simple chain.
  h.corner = (p.boundary == Boundary::periodic && r.L > 2) ? -p.J : 0.0;
  return h;
}

// ---------------------------------------------------------------------------

double localization_center(std::span<const double> mode) {
  double num = 0.0, den = 0.0;
  for (std::size_t x = 0; x < mode.size(); ++x) {
    const double p = mode[x] * mode[x];
    num += static_cast<double>(x) * p;
    den += p;
  }
  return num / den;
}

double localization_length(std::span<const double> mode, double center) {
  std::vector<double> ds, ys;
  for (std::size_t x = 0; x < mode.size(); ++x) {
    const double d = std::abs(static_cast<double>(x) - center);
    const double a = std::abs(mode[x]);
    if (d <= 2.0 || a <= 1e-12) continue;
    ds.push_back(d);
    ys.push_back(std::log(a));
  }
  const double inf = std::numeric_limits<double>::infinity();
  if (ds.size() < 3) return inf;
  const double n = static_cast<double>(ds.size());
  const double md = std::accumulate(ds.begin(), ds.end(), 0.0) / n;
  const double my = std::accumulate(ys.begin(), ys.end(), 0.0) / n;
  double sdd = 0.0, sdy = 0.0;
  for (std::size_t i = 0; i < ds.size(); ++i) {
    sdd += (ds[i] - md) * (ds[i] - md);
    sdy += (ds[i] - md) * (ys[i] - my);
  }
  if (sdd <= 0.0) return inf;
  const double slope = sdy / sdd;
  // Decay slower than 1e-10 per site is indistinguishable from none.
  return slope < -1e-10 ? -1.0 / slope : inf;
}

EigenSystem diagonalize(const TridiagonalHamiltonian& h) {
  const auto L = static_cast<Eigen::Index>(h.size());
  if (L < 1) throw std::invalid_argument("diagonalize: empty operator");
  EigenSystem es;
  Eigen::SelfAdjointEigenSolver<Eigen::MatrixXd> solver;
  if (h.boundary == Boundary::open || L <= 2) {
    Eigen::VectorXd diag = Eigen::Map<const Eigen::VectorXd>(h.diagonal.data(), L);
    Eigen::VectorXd sub = L > 1 ? Eigen::VectorXd(Eigen::Map<const Eigen::VectorXd>(
                                      h.off_diagonal.data(), L - 1))
                                : Eigen::VectorXd();
    solver.computeFromTridiagonal(diag, sub, Eigen::ComputeEigenvectors);
  } else {
    solver.compute(h.dense(), Eigen::ComputeEigenvectors);
  }
  if (solver.info() != Eigen::Success) {
    std::ostringstream msg;
    msg << "diagonalize: symmetric QR did not converge for L=" << L
        << " within the solver's iteration cap (" << 30 * L << " sweeps)";
    throw NumericalError(msg.str());
  }
  es.energies = solver.eigenvalues();
  es.modes = solver.eigenvectors();

  // Fix the sign so the largest component of every mode is positive.
  for (Eigen::Index n = 0; n < L; ++n) {
    Eigen::Index imax = 0;
    es.modes.col(n).cwiseAbs().maxCoeff(&imax);
    if (es.modes(imax, n) < 0.0) es.modes.col(n) *= -1.0;
  }

  es.centers.resize(L);
  es.loc_lengths.resize(L);
  es.inverse_lengths.resize(L);
  for (Eigen::Index n = 0; n < L; ++n) {
    std::span<const double> u(es.modes.col(n).data(), static_cast<std::size_t>(L));
    es.centers[n] = localization_center(u);
    es.loc_lengths[n] = localization_length(u, es.centers[n]);
    es.inverse_lengths[n] = std::isfinite(es.loc_lengths[n]) ? 1.0 / es.loc_lengths[n] : 0.0;
  }
  return es;
}

double EigenSystem::orthonormality_residual() const {
  const auto L = modes.cols();
  return (modes.transpose() * modes - Eigen::MatrixXd::Identity(L, L)).cwiseAbs().maxCoeff();
}

double EigenSystem::max_eigen_residual(const TridiagonalHamiltonian& h) const {
  const Eigen::MatrixXd hd = h.dense();
  double worst = 0.0;
  for (Eigen::Index n = 0; n < modes.cols(); ++n)
    worst = std::max(worst, (hd * modes.col(n) - energies[n] * modes.col(n)).norm());
  return worst;
}

// ---------------------------------------------------------------------------

namespace {

std::array<int, 4> sorted_quad(int n, int m1, int m2, int m3) {
  std::array<int, 4> q{n, m1, m2, m3};
  std::sort(q.begin(), q.end());
  return q;
}

double ordered_product_sum(const Eigen::MatrixXd& u, const std::array<int, 4>& q, Eigen::Index lo,
                           Eigen::Index hi) {
  double s = 0.0;
  for (Eigen::Index x = lo; x < hi; ++x) s += ((u(x, q[0]) * u(x, q[1])) * u(x, q[2])) * u(x, q[3]);
  return s;
}

bool beyond_prefilter(const EigenSystem& es, const std::array<int, 4>& q, double multiple) {
  double cmin = es.centers[q[0]], cmax = cmin, xi = 0.0;
  for (int i : q) {
    cmin = std::min(cmin, es.centers[i]);
    cmax = std::max(cmax, es.centers[i]);
    xi = std::max(xi, es.loc_lengths[i]);
  }
  return std::isfinite(xi) && (cmax - cmin) > multiple * xi;
}

}  // namespace

double overlap_sum(const EigenSystem& es, int n, int m1, int m2, int m3) {
  const auto L = static_cast<int>(es.size());
  for (int i : {n, m1, m2, m3})
    if (i < 0 || i >= L) throw std::out_of_range("overlap_sum: mode index out of range");
  return ordered_product_sum(es.modes, sorted_quad(n, m1, m2, m3), 0, es.modes.rows());
}

OverlapValue overlap_sum(const EigenSystem& es, int n, int m1, int m2, int m3,
                         const OverlapPolicy& policy) {
  const auto q = sorted_quad(n, m1, m2, m3);
  if (policy.prefilter && beyond_prefilter(es, q, policy.center_multiple)) return {0.0, false};
  return {overlap_sum(es, n, m1, m2, m3), true};
}

OverlapTable::OverlapTable(const EigenSystem& es, std::vector<int> mode_set, OverlapPolicy policy)
    : modes_(std::move(mode_set)), policy_(policy), rows_(modes_.size()) {
  const auto R = static_cast<int>(modes_.size());
  const Eigen::Index L = es.modes.rows();
  for (int g : modes_)
    if (g < 0 || g >= static_cast<int>(es.size()))
      throw std::out_of_range("OverlapTable: mode index out of range");

  // Local copy of retained modes and their supports.
  Eigen::MatrixXd u(L, R);
  std::vector<Eigen::Index> lo(R), hi(R);
  for (int a = 0; a < R; ++a) {
    u.col(a) = es.modes.col(modes_[a]);
    Eigen::Index first = L, last = 0;
    for (Eigen::Index x = 0; x < L; ++x)
      if (std::abs(u(x, a)) >= policy_.support_cutoff) {
        first = std::min(first, x);
        last = x + 1;
      }
    lo[a] = first;
    hi[a] = std::max(first, last);
  }

  EigenSystem geom;  // centers and lengths of the retained set, local indexing
  geom.centers.resize(R);
  geom.loc_lengths.resize(R);
  for (int a = 0; a < R; ++a) {
    geom.centers[a] = es.centers[modes_[a]];
    geom.loc_lengths[a] = es.loc_lengths[modes_[a]];
  }

  for (int a = 0; a < R; ++a)
    for (int b = a; b < R; ++b)
      for (int c = b; c < R; ++c)
        for (int d = c; d < R; ++d) {
          const std::array<int, 4> q{a, b, c, d};
          if (policy_.prefilter && beyond_prefilter(geom, q, policy_.center_multiple)) {
            ++skipped_;
            continue;
          }
          const Eigen::Index x0 = std::max({lo[a], lo[b], lo[c], lo[d]});
          const Eigen::Index x1 = std::min({hi[a], hi[b], hi[c], hi[d]});
          if (x1 <= x0) continue;
          const double v = ordered_product_sum(u, q, x0, x1);
          if (std::abs(v) < policy_.drop_below) continue;
          sorted_.emplace(q, v);
        }

  for (const auto& [q, v] : sorted_) {
    std::array<int, 4> p = q;
    do {
      rows_[p[0]].push_back({p[1], p[2], p[3], v});
    } while (std::next_permutation(p.begin(), p.end()));
  }
}

double OverlapTable::value(int n, int m1, int m2, int m3) const {
  auto it = sorted_.find(sorted_quad(n, m1, m2, m3));
  return it == sorted_.end() ? 0.0 : it->second;
}

}  // namespace dnls
