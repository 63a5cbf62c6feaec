#include "dnls/perturbation.hpp"

#include <algorithm>
#include <cmath>
#include <iomanip>
#include <cstdio>
#include <limits>
#include <map>
#include <numeric>
#include <ostream>
#include <stdexcept>
#include <unordered_map>

#include <boost/container_hash/hash.hpp>

#include "dnls/errors.hpp"
#include "dnls/rng.hpp"

namespace dnls {

namespace {

using Key = std::vector<std::int32_t>;

struct KeyHash {
  std::size_t operator()(const Key& k) const { return boost::hash_range(k.begin(), k.end()); }
};

Key pack(const std::vector<std::pair<int, int>>& e) {
  Key k;
  k.reserve(e.size());
  for (auto [m, c] : e) k.push_back(m * 256 + (c + 128));
  return k;
}

std::vector<std::pair<int, int>> normalize(std::vector<std::pair<int, int>> e) {
  std::sort(e.begin(), e.end());
  std::vector<std::pair<int, int>> out;
  for (auto [m, c] : e) {
    if (!out.empty() && out.back().first == m)
      out.back().second += c;
    else
      out.emplace_back(m, c);
    if (out.back().second == 0) out.pop_back();
  }
  for (auto [m, c] : out)
    if (c < -127 || c > 127) throw NumericalError("phase combination coefficient overflow");
  return out;
}

}  // namespace

struct PhasePool::Impl {
  std::unordered_map<Key, std::uint32_t, KeyHash> ids;
  std::unordered_map<std::uint64_t, std::uint32_t> sums;
};

PhasePool::PhasePool() : impl_(std::make_shared<Impl>()) {
  entries_.emplace_back();
  impl_->ids.emplace(Key{}, 0);
}

std::uint32_t PhasePool::from(const std::vector<std::pair<int, int>>& mode_coef) {
  auto e = normalize(mode_coef);
  auto k = pack(e);
  auto it = impl_->ids.find(k);
  if (it != impl_->ids.end()) return it->second;
  const auto id = static_cast<std::uint32_t>(entries_.size());
  entries_.push_back(std::move(e));
  impl_->ids.emplace(std::move(k), id);
  return id;
}

std::uint32_t PhasePool::add(std::uint32_t a, int sign_a, std::uint32_t b) {
  if (a == 0) return b;
  if (b == 0 && sign_a > 0) return a;
  const std::uint64_t key =
      (static_cast<std::uint64_t>(a) << 32 | b) * 2 + (sign_a > 0 ? 1 : 0);
  auto it = impl_->sums.find(key);
  if (it != impl_->sums.end()) return it->second;
  std::vector<std::pair<int, int>> e = entries_[b];
  for (auto [m, c] : entries_[a]) e.emplace_back(m, sign_a > 0 ? c : -c);
  const auto id = from(e);
  impl_->sums.emplace(key, id);
  return id;
}

std::uint32_t PhasePool::base(int n, int m1, int m2, int m3) {
  return from({{n, 1}, {m1, 1}, {m2, -1}, {m3, -1}});
}

double PhasePool::frequency(std::uint32_t id, std::span<const double> energies) const {
  double w = 0.0;
  for (auto [m, c] : entries_[id]) w += c * energies[m];
  return w;
}

// ---------------------------------------------------------------------------

namespace {

double eval_power(double t, int p) { return p == 0 ? 1.0 : std::pow(t, p); }

cplx eval_series(const Series& s, const std::vector<double>& omega, double t) {
  cplx v{};
  for (const auto& term : s)
    v += term.a * eval_power(t, term.power) * std::polar(1.0, omega[term.phase] * t);
  return v;
}

std::uint64_t term_key(std::uint32_t phase, int power) {
  return static_cast<std::uint64_t>(phase) << 8 | static_cast<std::uint64_t>(power);
}

class OrderBuilder {
 public:
  OrderBuilder(const OverlapTable& tab, int initial, double beta, int order,
               const std::vector<double>& energies, const ExpansionOptions& opt, PhasePool& pool)
      : tab_(tab), i0_(initial), beta_(beta), N_(order), E_(energies), opt_(opt), pool_(pool) {
    const int R = static_cast<int>(tab.size());
    base_.resize(R);
    for (int n = 0; n < R; ++n)
      for (const auto& e : tab.row(n)) base_[n].push_back(pool_.base(n, e.m1, e.m2, e.m3));
  }

  struct Result {
    std::vector<std::vector<Series>> coeff;
    std::vector<std::vector<double>> corr;
    double residual = 0.0;
    std::size_t uncancelled = 0;
    std::vector<std::size_t> counts;
  };

  // With `fixed` empty, order k uses E + sum_{l<k} beta^l E^(l); otherwise
  // every order uses `fixed`.
  Result run(const std::vector<double>& fixed) {
    const int R = static_cast<int>(tab_.size());
    Result res;
    res.coeff.assign(N_ + 1, std::vector<Series>(R));
    res.corr.assign(N_ + 1, std::vector<double>(R, 0.0));
    res.coeff[0][i0_].push_back({0, 0, 1.0});
    res.counts.push_back(1);
    for (int k = 1; k <= N_; ++k) {
      if (fixed.empty()) {
        eprime_ = E_;
        for (int l = 1; l < k; ++l)
          for (int n = 0; n < R; ++n) eprime_[n] += std::pow(beta_, l) * res.corr[l][n];
      } else {
        eprime_ = fixed;
      }
      omega_.clear();
      std::size_t count = 0;
      for (int n = 0; n < R; ++n) {
        res.coeff[k][n] = order_for_mode(k, n, res);
        count += res.coeff[k][n].size();
      }
      res.counts.push_back(count);
    }
    return res;
  }

 private:
  double omega(std::uint32_t id) {
    while (omega_.size() <= id)
      omega_.push_back(pool_.frequency(static_cast<std::uint32_t>(omega_.size()), eprime_));
    return omega_[id];
  }

  Series order_for_mode(int k, int n, Result& res) {
    std::unordered_map<std::uint64_t, cplx> acc;
    const auto add_scaled = [&](const Series& s, cplx f) {
      for (const auto& t : s) acc[term_key(t.phase, t.power)] += f * t.a;
    };

    // Lowest order carrying this mode; its energy correction is the unknown.
    int su = -1;
    if (n == i0_) {
      su = 0;
    } else {
      for (int s = 1; s < k; ++s)
        if (!res.coeff[s][n].empty()) {
          su = s;
          break;
        }
    }
    for (int s = 0; s < k; ++s) {
      if (s == su) continue;
      const double e = res.corr[k - s][n];
      if (e != 0.0) add_scaled(res.coeff[s][n], -e);
    }

    const auto& row = tab_.row(n);
    for (std::size_t j = 0; j < row.size(); ++j) {
      const auto& en = row[j];
      const std::uint32_t base = base_[n][j];
      for (int r = 0; r < k; ++r)
        for (int s = 0; r + s < k; ++s) {
          const int l = k - 1 - r - s;
          const Series& A = res.coeff[r][en.m1];
          const Series& B = res.coeff[s][en.m2];
          const Series& C = res.coeff[l][en.m3];
          if (A.empty() || B.empty() || C.empty()) continue;
          for (const auto& b : B)
            for (const auto& c : C) {
              const std::uint32_t bc = pool_.add(base, 1, pool_.add(b.phase, 1, c.phase));
              const cplx vbc = en.value * b.a * c.a;
              for (const auto& a : A) {
                const std::uint32_t id = pool_.add(a.phase, -1, bc);
                acc[term_key(id, a.power + b.power + c.power)] += std::conj(a.a) * vbc;
              }
            }
        }
    }

    const std::uint64_t k0 = term_key(0, 0);
    if (opt_.cancel_secular) {
      const cplx S = acc.count(k0) ? acc[k0] : cplx{};
      if (su == 0) {
        res.corr[k][n] = S.real();
        acc[k0] -= S.real();
      } else if (su > 0) {
        cplx kappa{};
        for (const auto& t : res.coeff[su][n])
          if (t.phase == 0 && t.power == 0) kappa = t.a;
        if (std::abs(kappa) > 0.0) {
          const double e = (S / kappa).real();
          res.corr[k - su][n] = e;
          add_scaled(res.coeff[su][n], -e);
        }
      }
      if (acc.count(k0)) {
        const double left = std::abs(acc[k0]);
        if (left <= 1e-12 * std::max(1.0, std::abs(S))) {
          res.residual = std::max(res.residual, left);
          acc.erase(k0);
        } else {
          ++res.uncancelled;
        }
      }
    }

    // c = -i * integral_0^t of the right-hand side, exact per term.
    std::map<std::uint64_t, cplx> out;
    const cplx mi(0.0, -1.0);
    for (const auto& [key, a] : acc) {
      if (a == cplx{}) continue;
      const auto id = static_cast<std::uint32_t>(key >> 8);
      const int p = static_cast<int>(key & 0xff);
      if (id == 0) {
        out[term_key(0, p + 1)] += mi * a / static_cast<double>(p + 1);
        continue;
      }
      const double w = omega(id);
      if (w == 0.0) throw NumericalError("expand: symbolically distinct phase with zero frequency");
      const cplx iw(0.0, w);
      cplx d = 1.0 / iw, cst = -1.0 / iw;
      for (int q = 1; q <= p; ++q) cst *= -static_cast<double>(q) / iw;
      out[term_key(id, p)] += mi * a * d;
      for (int j = 1; j <= p; ++j) {
        d *= -static_cast<double>(p - j + 1) / iw;
        out[term_key(id, p - j)] += mi * a * d;
      }
      out[term_key(0, 0)] += mi * a * cst;
    }
    Series series;
    const double scale = std::pow(beta_, k);
    cplx at0{};
    for (const auto& [key, a] : out) {
      if (key == k0) continue;
      if (scale * std::abs(a) < opt_.prune && !(scale == 0.0 && a != cplx{})) continue;
      series.push_back({static_cast<std::uint32_t>(key >> 8), static_cast<int>(key & 0xff), a});
      if ((key & 0xff) == 0) at0 += a;
    }
    // The constant absorbs what pruning removed so that c(0) = 0 stays exact.
    if (at0 != cplx{} || out.count(k0)) series.insert(series.begin(), Term{0, 0, -at0});
    return series;
  }

  const OverlapTable& tab_;
  int i0_;
  double beta_;
  int N_;
  const std::vector<double>& E_;
  const ExpansionOptions& opt_;
  PhasePool& pool_;
  std::vector<std::vector<std::uint32_t>> base_;
  std::vector<double> eprime_;
  std::vector<double> omega_;
};

}  // namespace

cplx ExpansionState::coefficient(int k, int n, double t) const {
  return eval_series(coeff.at(k).at(n), omega, t);
}

std::vector<cplx> ExpansionState::truncated(double t) const {
  std::vector<cplx> c(size());
  for (int k = 0; k <= order; ++k) {
    const double bk = std::pow(beta, k);
    if (k > 0 && bk == 0.0) break;
    for (std::size_t n = 0; n < size(); ++n) c[n] += bk * eval_series(coeff[k][n], omega, t);
  }
  return c;
}

double ExpansionState::max_abs(int k, int n) const {
  double m = 0.0;
  for (double t : t_grid) m = std::max(m, std::abs(coefficient(k, n, t)));
  return m;
}

std::vector<int> retained_modes(const EigenSystem& es, int initial_mode, double r_cut) {
  if (initial_mode < 0 || initial_mode >= static_cast<int>(es.size()))
    throw std::out_of_range("retained_modes: initial mode out of range");
  std::vector<int> out;
  const double x0 = es.centers[initial_mode];
  for (std::size_t n = 0; n < es.size(); ++n)
    if (std::abs(es.centers[n] - x0) <= r_cut) out.push_back(static_cast<int>(n));
  return out;
}

int least_resonant_mode(const EigenSystem& es, double center, double radius) {
  int best = -1;
  double best_q = std::numeric_limits<double>::infinity();
  const Eigen::Index L = es.modes.rows();
  for (std::size_t m = 0; m < es.size(); ++m) {
    if (std::abs(es.centers[m] - center) > radius) continue;
    // u_m^3 once, then one dot product per partner mode.
    Eigen::VectorXd cube(L);
    for (Eigen::Index x = 0; x < L; ++x) cube[x] = std::pow(es.modes(x, m), 3);
    double q = 0.0;
    for (std::size_t n = 0; n < es.size(); ++n) {
      if (n == m) continue;
      const double v = es.modes.col(n).dot(cube);
      q = std::max(q, 2.0 * std::abs(v) / std::abs(es.energies[n] - es.energies[m]));
    }
    if (q < best_q) {
      best_q = q;
      best = static_cast<int>(m);
    }
  }
  if (best < 0) throw std::invalid_argument("least_resonant_mode: no mode within radius");
  return best;
}

double default_r_cut(const EigenSystem& es, int initial_mode, int order, double beta) {
  double xi = es.loc_lengths.at(initial_mode);
  if (!std::isfinite(xi)) xi = static_cast<double>(es.size());
  const double lb = beta > 0.0 ? std::max(1.0, std::log(1.0 / beta)) : 1.0;
  return xi * (1.0 + 0.5 * order) * lb;
}

ExpansionState expand(const EigenSystem& es, const OverlapTable& overlaps, int initial_mode,
                      double beta, int order, std::vector<double> t_grid,
                      const ExpansionOptions& options) {
  if (order < 0 || order > 16) throw std::invalid_argument("expand: order must be in [0, 16]");
  if (!std::isfinite(beta)) throw std::invalid_argument("expand: beta must be finite");
  if (t_grid.empty()) throw std::invalid_argument("expand: empty time grid");
  if (!std::is_sorted(t_grid.begin(), t_grid.end()))
    throw std::invalid_argument("expand: time grid must be sorted");
  const auto& set = overlaps.mode_set();
  const auto it = std::find(set.begin(), set.end(), initial_mode);
  if (it == set.end())
    throw std::invalid_argument("expand: overlap table does not contain the initial mode");
  if (overlaps.row(static_cast<int>(it - set.begin())).empty())
    throw std::invalid_argument("expand: overlap table has no quadruples for the initial mode");

  ExpansionState ex;
  ex.order = order;
  ex.beta = beta;
  ex.t_grid = std::move(t_grid);
  ex.modes = set;
  ex.initial = static_cast<int>(it - set.begin());
  ex.cancel_secular = options.cancel_secular;
  const int R = static_cast<int>(set.size());
  ex.basis.resize(es.modes.rows(), R);
  for (int n = 0; n < R; ++n) {
    ex.basis.col(n) = es.modes.col(set[n]);
    ex.energies.push_back(es.energies[set[n]]);
  }
  ex.phases = std::make_shared<PhasePool>();

  OrderBuilder builder(overlaps, ex.initial, beta, order, ex.energies, options, *ex.phases);
  const auto accumulate = [&](const OrderBuilder::Result& r) {
    std::vector<double> e = ex.energies;
    for (int l = 1; l <= order; ++l)
      for (int n = 0; n < R; ++n) e[n] += std::pow(beta, l) * r.corr[l][n];
    return e;
  };
  OrderBuilder::Result res = builder.run({});
  std::vector<double> ep = accumulate(res);
  ex.fixed_point_iterations = 0;
  if (options.self_consistent) {
    // Damped iteration; the mixing halves whenever the change grows. Pruning
    // leaves a small floor, accepted once the change stops shrinking below it.
    bool converged = false;
    double mix = 1.0, previous = std::numeric_limits<double>::infinity();
    for (int iter = 1; iter <= options.max_fixed_point_iterations; ++iter) {
      res = builder.run(ep);
      ex.fixed_point_iterations = iter;
      const auto next = accumulate(res);
      double change = 0.0;
      for (int n = 0; n < R; ++n) change = std::max(change, std::abs(next[n] - ep[n]));
      ex.fixed_point_change = change;
      if (change <= options.fixed_point_tolerance ||
          (change <= options.fixed_point_floor && change >= 0.5 * previous)) {
        converged = true;
        break;
      }
      if (change > previous) mix = std::max(mix * 0.5, 1.0 / 64.0);
      previous = change;
      for (int n = 0; n < R; ++n) ep[n] += mix * (next[n] - ep[n]);
    }
    if (!converged) {
      char msg[96];
      std::snprintf(msg, sizeof msg, "expand: renormalized energies did not converge (change %.3g)",
                    ex.fixed_point_change);
      throw NumericalError(msg);
    }
  }
  ex.renormalized = ep;
  ex.coeff = std::move(res.coeff);
  ex.corrections = std::move(res.corr);
  ex.omega.resize(ex.phases->size());
  for (std::size_t id = 0; id < ex.omega.size(); ++id)
    ex.omega[id] = ex.phases->frequency(static_cast<std::uint32_t>(id), ex.renormalized);
  ex.secular_residual = res.residual;
  ex.uncancelled_secular = res.uncancelled;
  ex.term_counts = std::move(res.counts);
  return ex;
}

std::vector<cplx> assemble(const ExpansionState& ex, double t) {
  if (t < ex.t_grid.front() || t > ex.t_grid.back())
    throw std::out_of_range("assemble: time outside the expansion grid");
  const auto c = ex.truncated(t);
  Eigen::VectorXcd a(static_cast<Eigen::Index>(c.size()));
  for (std::size_t n = 0; n < c.size(); ++n)
    a[n] = c[n] * std::polar(1.0, -ex.renormalized[n] * t);
  const Eigen::VectorXcd psi = ex.basis.cast<cplx>() * a;
  return {psi.data(), psi.data() + psi.size()};
}

void write_expansion(std::ostream& os, const ExpansionState& ex) {
  os << "# dnls-expansion v1\n";
  os << std::setprecision(17);
  os << "order " << ex.order << " beta " << ex.beta << " retained " << ex.size() << " initial "
     << ex.modes[ex.initial] << " cancel_secular " << (ex.cancel_secular ? 1 : 0) << "\n";
  for (std::size_t n = 0; n < ex.size(); ++n) {
    os << "mode " << ex.modes[n] << " E " << ex.energies[n] << " Eprime " << ex.renormalized[n]
       << " corrections";
    for (int l = 1; l <= ex.order; ++l) os << ' ' << ex.corrections[l][n];
    os << "\n";
  }
  for (int k = 0; k <= ex.order; ++k)
    for (std::size_t n = 0; n < ex.size(); ++n)
      for (const auto& t : ex.coeff[k][n]) {
        os << "term " << k << ' ' << ex.modes[n] << ' ' << t.power << ' ' << t.a.real() << ' '
           << t.a.imag() << ' ';
        const auto& e = ex.phases->entries(t.phase);
        if (e.empty()) os << '0';
        for (std::size_t j = 0; j < e.size(); ++j)
          os << (j ? "," : "") << ex.modes[e[j].first] << ':' << e[j].second;
        os << "\n";
      }
}

// ---------------------------------------------------------------------------

RemainderOperator::RemainderOperator(const ExpansionState& ex) : ex_(&ex) {
  const auto R = static_cast<Eigen::Index>(ex.size());
  detuning_.resize(R);
  for (Eigen::Index n = 0; n < R; ++n) detuning_[n] = ex.energies[n] - ex.renormalized[n];
  std::map<std::tuple<int, std::uint32_t, int>, cplx> merged;
  for (int k = 0; k <= ex.order; ++k) {
    const double bk = std::pow(ex.beta, k);
    if (k > 0 && bk == 0.0) break;
    for (std::size_t n = 0; n < ex.size(); ++n)
      for (const auto& t : ex.coeff[k][n])
        merged[{static_cast<int>(n), t.phase, t.power}] += bk * t.a;
  }
  for (const auto& [key, a] : merged) {
    const auto [n, id, p] = key;
    flat_.push_back({n, p, ex.omega[id], a});
  }
}

RemainderOperator remainder_operator(const ExpansionState& ex) { return RemainderOperator(ex); }

RemainderOperator::Frame RemainderOperator::frame(double t, const Eigen::VectorXcd& c,
                                                  const Eigen::VectorXcd& dc) const {
  const auto& ex = *ex_;
  const auto R = static_cast<Eigen::Index>(ex.size());
  Eigen::VectorXcd rot(R);
  for (Eigen::Index n = 0; n < R; ++n) rot[n] = std::polar(1.0, -ex.renormalized[n] * t);
  Frame f;
  f.t = t;
  f.field = ex.basis * c.cwiseProduct(rot);
  Eigen::VectorXcd g(f.field.size());
  for (Eigen::Index x = 0; x < g.size(); ++x) g[x] = std::norm(f.field[x]) * f.field[x];
  const Eigen::VectorXcd proj = ex.basis.transpose() * g;
  const cplx mi(0.0, -1.0);
  f.w.resize(R);
  for (Eigen::Index n = 0; n < R; ++n)
    f.w[n] = detuning_[n] * c[n] + ex.beta * std::conj(rot[n]) * proj[n] + mi * dc[n];
  return f;
}

RemainderOperator::Frame RemainderOperator::frame(double t) const {
  const auto R = static_cast<Eigen::Index>(size());
  Eigen::VectorXcd c = Eigen::VectorXcd::Zero(R), dc = Eigen::VectorXcd::Zero(R);
  for (const auto& ft : flat_) {
    const cplx z = std::polar(1.0, ft.omega * t);
    const double tp = eval_power(t, ft.power);
    c[ft.mode] += ft.a * tp * z;
    const double dtp = ft.power == 0 ? 0.0 : ft.power * eval_power(t, ft.power - 1);
    dc[ft.mode] += ft.a * (dtp + cplx(0.0, ft.omega) * tp) * z;
  }
  return frame(t, c, dc);
}

Eigen::VectorXcd RemainderOperator::inhomogeneity(double t) const { return frame(t).w; }

Eigen::VectorXcd RemainderOperator::apply(const Frame& f, const Eigen::VectorXcd& q) const {
  const auto& ex = *ex_;
  const auto R = static_cast<Eigen::Index>(size());
  Eigen::VectorXcd rot(R);
  for (Eigen::Index n = 0; n < R; ++n) rot[n] = std::polar(1.0, -ex.renormalized[n] * f.t);
  const Eigen::VectorXcd qs = ex.basis * q.cwiseProduct(rot);
  Eigen::VectorXcd r(qs.size());
  for (Eigen::Index x = 0; x < r.size(); ++x) {
    const cplx p = f.field[x];
    r[x] = 2.0 * std::norm(p) * qs[x] + p * p * std::conj(qs[x]);
  }
  const Eigen::VectorXcd proj = ex.basis.transpose() * r;
  Eigen::VectorXcd out(R);
  for (Eigen::Index n = 0; n < R; ++n)
    out[n] = detuning_[n] * q[n] + ex.beta * std::conj(rot[n]) * proj[n];
  return out;
}

Eigen::MatrixXcd RemainderOperator::coupling(double t) const {
  const auto& ex = *ex_;
  const auto f = frame(t);
  const auto R = static_cast<Eigen::Index>(size());
  Eigen::VectorXd dens = f.field.cwiseAbs2();
  Eigen::MatrixXcd M = (ex.basis.transpose() * dens.asDiagonal() * ex.basis).cast<cplx>();
  for (Eigen::Index n = 0; n < R; ++n)
    for (Eigen::Index m = 0; m < R; ++m)
      M(n, m) *= 2.0 * ex.beta *
                 std::polar(1.0, (ex.renormalized[n] - ex.renormalized[m]) * t);
  M.diagonal() += detuning_.cast<cplx>();
  return M;
}

Eigen::MatrixXcd RemainderOperator::conj_coupling(double t) const {
  const auto& ex = *ex_;
  const auto f = frame(t);
  const auto R = static_cast<Eigen::Index>(size());
  const Eigen::VectorXcd sq = f.field.cwiseProduct(f.field);
  const Eigen::MatrixXcd ub = ex.basis.cast<cplx>();
  Eigen::MatrixXcd M = ub.transpose() * sq.asDiagonal() * ub;
  for (Eigen::Index n = 0; n < R; ++n)
    for (Eigen::Index m = 0; m < R; ++m)
      M(n, m) *= ex.beta * std::polar(1.0, (ex.renormalized[n] + ex.renormalized[m]) * t);
  return M;
}

std::vector<double> RemainderTrajectory::mean_abs() const {
  if (mode_abs.empty()) return {};
  std::vector<double> m(mode_abs.front().size(), 0.0);
  for (const auto& row : mode_abs)
    for (std::size_t n = 0; n < m.size(); ++n) m[n] += row[n];
  for (auto& v : m) v /= static_cast<double>(mode_abs.size());
  return m;
}

namespace {

// Evaluates c~ and dc~/dt on a uniform grid by advancing every term's phase.
class GridEvaluator {
 public:
  GridEvaluator(const std::vector<RemainderOperator::FlatTerm>& terms, Eigen::Index R, double h)
      : terms_(terms), R_(R), h_(h), z_(terms.size()), step_(terms.size()) {
    for (std::size_t j = 0; j < terms.size(); ++j) {
      z_[j] = 1.0;
      step_[j] = std::polar(1.0, terms[j].omega * h);
    }
  }

  double t() const { return static_cast<double>(index_) * h_; }

  void advance() {
    ++index_;
    if (index_ % 512 == 0) {
      const double tt = t();
      for (std::size_t j = 0; j < terms_.size(); ++j) z_[j] = std::polar(1.0, terms_[j].omega * tt);
    } else {
      for (std::size_t j = 0; j < terms_.size(); ++j) z_[j] *= step_[j];
    }
  }

  void values(Eigen::VectorXcd& c, Eigen::VectorXcd& dc) const {
    c.setZero(R_);
    dc.setZero(R_);
    const double tt = t();
    for (std::size_t j = 0; j < terms_.size(); ++j) {
      const auto& ft = terms_[j];
      if (ft.power == 0) {
        const cplx v = ft.a * z_[j];
        c[ft.mode] += v;
        dc[ft.mode] += cplx(0.0, ft.omega) * v;
      } else {
        const double tp = std::pow(tt, ft.power);
        const double dtp = ft.power * std::pow(tt, ft.power - 1);
        c[ft.mode] += ft.a * tp * z_[j];
        dc[ft.mode] += ft.a * (dtp + cplx(0.0, ft.omega) * tp) * z_[j];
      }
    }
  }

 private:
  const std::vector<RemainderOperator::FlatTerm>& terms_;
  Eigen::Index R_;
  double h_;
  std::vector<cplx> z_, step_;
  std::size_t index_ = 0;
};

bool run_rk4(const RemainderOperator& op, double t_end, double dt, int sample_every,
             double stop_above, RemainderTrajectory& out) {
  const auto R = static_cast<Eigen::Index>(op.size());
  const auto steps = static_cast<std::size_t>(std::ceil(t_end / dt - 1e-9));
  out = RemainderTrajectory{};
  out.dt = dt;
  GridEvaluator grid(op.flat_terms(), R, 0.5 * dt);
  Eigen::VectorXcd q = Eigen::VectorXcd::Zero(R), c, dc;
  const cplx mi(0.0, -1.0);
  const auto record = [&](double t) {
    out.times.push_back(t);
    out.norms.push_back(q.norm());
    std::vector<double> a(static_cast<std::size_t>(R));
    for (Eigen::Index n = 0; n < R; ++n) a[n] = std::abs(q[n]);
    out.mode_abs.push_back(std::move(a));
  };
  record(0.0);
  grid.values(c, dc);
  auto f0 = op.frame(0.0, c, dc);
  for (std::size_t i = 0; i < steps; ++i) {
    const double t = static_cast<double>(i) * dt;
    grid.advance();
    grid.values(c, dc);
    const auto fh = op.frame(t + 0.5 * dt, c, dc);
    grid.advance();
    grid.values(c, dc);
    auto f1 = op.frame(t + dt, c, dc);
    const Eigen::VectorXcd k1 = mi * (f0.w + op.apply(f0, q));
    const Eigen::VectorXcd k2 = mi * (fh.w + op.apply(fh, q + 0.5 * dt * k1));
    const Eigen::VectorXcd k3 = mi * (fh.w + op.apply(fh, q + 0.5 * dt * k2));
    const Eigen::VectorXcd k4 = mi * (f1.w + op.apply(f1, q + dt * k3));
    q += dt / 6.0 * (k1 + 2.0 * k2 + 2.0 * k3 + k4);
    f0 = std::move(f1);
    const double nrm = q.norm();
    if (!std::isfinite(nrm)) return false;
    const bool last = i + 1 == steps;
    if ((i + 1) % static_cast<std::size_t>(sample_every) == 0 || last || nrm > stop_above) {
      record(t + dt);
      if (nrm > stop_above) break;
    }
  }
  out.final_q = q;
  return true;
}

}  // namespace

RemainderTrajectory remainder_evolve(const RemainderOperator& op, double t_end,
                                     const RemainderOptions& options, double stop_above) {
  if (!(t_end > 0.0)) throw std::invalid_argument("remainder_evolve: t_end must be positive");
  if (!(options.dt > 0.0) || options.sample_every < 1)
    throw std::invalid_argument("remainder_evolve: invalid step options");
  double dt = options.dt;
  RemainderTrajectory out;
  for (int attempt = 0; attempt <= options.max_retries; ++attempt) {
    if (run_rk4(op, t_end, dt, options.sample_every, stop_above, out)) {
      out.retries = attempt;
      return out;
    }
    dt *= 0.5;
  }
  throw NumericalError("remainder_evolve: non-finite remainder after step-size retries");
}

TStar t_star(std::span<const double> times, std::span<const double> norms, double threshold) {
  if (times.size() != norms.size() || times.empty())
    throw std::invalid_argument("t_star: times and norms must be non-empty and equal length");
  TStar r;
  if (std::all_of(norms.begin(), norms.end(), [](double v) { return v == 0.0; })) {
    r.degenerate = true;
    return r;
  }
  for (std::size_t i = 0; i < norms.size(); ++i)
    if (norms[i] >= threshold) {
      r.crossed = true;
      if (i == 0) {
        r.value = times[0];
      } else {
        const double f = (threshold - norms[i - 1]) / (norms[i] - norms[i - 1]);
        r.value = times[i - 1] + f * (times[i] - times[i - 1]);
      }
      return r;
    }
  // Extrapolate a + b t fitted to the running maximum over the second half,
  // only if that envelope still grows in the last quarter.
  const std::size_t n = norms.size(), lo = n / 2;
  std::vector<double> env(norms.begin(), norms.end());
  for (std::size_t i = 1; i < n; ++i) env[i] = std::max(env[i], env[i - 1]);
  if (n - lo < 4 || !(env[n - 1] > env[lo + (n - lo) / 2])) {
    r.refused = true;
    return r;
  }
  double st = 0.0, sn = 0.0;
  for (std::size_t i = lo; i < n; ++i) {
    st += times[i];
    sn += env[i];
  }
  const double mt = st / static_cast<double>(n - lo), mn = sn / static_cast<double>(n - lo);
  double stt = 0.0, stn = 0.0;
  for (std::size_t i = lo; i < n; ++i) {
    stt += (times[i] - mt) * (times[i] - mt);
    stn += (times[i] - mt) * (env[i] - mn);
  }
  const double b = stn / stt;
  if (!(b > 0.0)) {
    r.refused = true;
    return r;
  }
  r.value = mt + (threshold - mn) / b;
  r.extrapolated = true;
  return r;
}

DominantSubtraction subtract_dominant_modes(const RemainderTrajectory& traj, int count,
                                            double threshold) {
  const auto mean = traj.mean_abs();
  const int R = static_cast<int>(mean.size());
  if (count < 0 || count > R)
    throw std::invalid_argument("subtract_dominant_modes: count must be in [0, retained modes]");
  std::vector<int> order(R);
  std::iota(order.begin(), order.end(), 0);
  std::stable_sort(order.begin(), order.end(), [&](int a, int b) { return mean[a] > mean[b]; });
  DominantSubtraction out;
  out.removed.assign(order.begin(), order.begin() + count);
  std::vector<bool> drop(R, false);
  for (int n : out.removed) drop[n] = true;
  for (const auto& row : traj.mode_abs) {
    double s = 0.0;
    for (int n = 0; n < R; ++n)
      if (!drop[n]) s += row[n] * row[n];
    out.norms.push_back(std::sqrt(s));
  }
  if (count == 0) out.norms = traj.norms;
  out.t_star = t_star(traj.times, out.norms, threshold);
  return out;
}

void write_t_star_csv(std::ostream& os, std::span<const TStarRow> rows) {
  os << "beta,order,t_star,extrapolated\n";
  os << std::setprecision(17);
  for (const auto& r : rows)
    os << r.beta << ',' << r.order << ',' << r.t_star.value << ','
       << (r.t_star.extrapolated ? 1 : 0) << "\n";
}

// ---------------------------------------------------------------------------

AndersonDarling anderson_darling_normal(std::vector<double> x) {
  const std::size_t n = x.size();
  if (n < 8) throw std::invalid_argument("anderson_darling_normal: need at least 8 samples");
  const double mean = std::accumulate(x.begin(), x.end(), 0.0) / static_cast<double>(n);
  double var = 0.0;
  for (double v : x) var += (v - mean) * (v - mean);
  var /= static_cast<double>(n - 1);
  if (!(var > 0.0)) throw std::invalid_argument("anderson_darling_normal: zero variance");
  const double sd = std::sqrt(var);
  for (auto& v : x) v = (v - mean) / sd;
  std::sort(x.begin(), x.end());
  const auto log_cdf = [](double z) { return std::log(0.5 * std::erfc(-z / std::sqrt(2.0))); };
  double s = 0.0;
  for (std::size_t i = 0; i < n; ++i)
    s += (2.0 * static_cast<double>(i) + 1.0) * (log_cdf(x[i]) + log_cdf(-x[n - 1 - i]));
  AndersonDarling r;
  const double dn = static_cast<double>(n);
  r.a2 = -dn - s / dn;
  r.a2_star = r.a2 * (1.0 + 0.75 / dn + 2.25 / (dn * dn));
  r.reject_5pct = r.a2_star > 0.752;
  return r;
}

SmallDenominatorStats small_denominator_stats(const SmallDenominatorOptions& o) {
  if (!(o.s > 0.0 && o.s < 1.0)) throw std::invalid_argument("small_denominator_stats: need 0 < s < 1");
  if (o.l < 1 || static_cast<std::size_t>(o.l) > o.L)
    throw std::invalid_argument("small_denominator_stats: need 1 <= l <= L");
  if (o.coefficients.empty())
    throw std::invalid_argument("small_denominator_stats: empty coefficient set");
  if (o.samples < 16) throw std::invalid_argument("small_denominator_stats: need >= 16 samples");
  ModelParams p;
  p.J = o.J;
  SmallDenominatorStats st;
  st.f.reserve(o.samples);
  std::vector<int> idx(o.L);
  double sum = 0.0, sum2 = 0.0;
  std::size_t next_check = 16;
  for (std::size_t i = 0; i < o.samples; ++i) {
    const auto seed = derive_seed(o.seed, i);
    const auto h = build_hamiltonian(generate_disorder(seed, o.L, o.w), p);
    Eigen::VectorXd diag = Eigen::Map<const Eigen::VectorXd>(h.diagonal.data(), h.diagonal.size());
    Eigen::VectorXd off =
        Eigen::Map<const Eigen::VectorXd>(h.off_diagonal.data(), h.off_diagonal.size());
    Eigen::SelfAdjointEigenSolver<Eigen::MatrixXd> solver;
    solver.computeFromTridiagonal(diag, off, Eigen::EigenvaluesOnly);
    const auto& E = solver.eigenvalues();
    CounterRng rng(mix64(seed ^ 0x5DEECE66DULL));
    std::iota(idx.begin(), idx.end(), 0);
    double f = 0.0;
    for (int j = 0; j < o.l; ++j) {
      const auto k = j + static_cast<std::size_t>(rng.below(o.L - j));
      std::swap(idx[j], idx[k]);
      const int c = o.coefficients[rng.below(o.coefficients.size())];
      f += c * E[idx[j]];
    }
    st.f.push_back(f);
    const double v = std::pow(std::abs(f), -o.s);
    sum += v;
    sum2 += v * v;
    const std::size_t n = i + 1;
    if (n == next_check || n == o.samples) {
      const double m = sum / n;
      const double var = std::max(0.0, (sum2 - n * m * m) / (n - 1.0));
      st.checkpoints.push_back(n);
      st.running_mean.push_back(m);
      st.running_ci_width.push_back(2.0 * 1.96 * std::sqrt(var / n));
      while (next_check <= n) next_check *= 4;
    }
  }
  const double n = static_cast<double>(o.samples);
  st.mean = sum / n;
  st.std_error = std::sqrt(std::max(0.0, (sum2 - n * st.mean * st.mean) / (n - 1.0)) / n);
  st.ci_low = st.mean - 1.96 * st.std_error;
  st.ci_high = st.mean + 1.96 * st.std_error;
  // Convergence: the CI must shrink roughly as 1/sqrt(n) between the last
  // two factor-of-four checkpoints, and the mean must stay inside the earlier CI.
  const auto c = st.running_ci_width.size();
  if (c >= 2 && st.checkpoints[c - 1] >= 4 * st.checkpoints[c - 2]) {
    const double ratio = st.running_ci_width[c - 1] / st.running_ci_width[c - 2];
    st.converging = ratio <= 0.75 && std::isfinite(st.mean);
  }
  st.f_mean = std::accumulate(st.f.begin(), st.f.end(), 0.0) / n;
  double var = 0.0;
  for (double v : st.f) var += (v - st.f_mean) * (v - st.f_mean);
  st.f_std = std::sqrt(var / (n - 1.0));
  st.normality = anderson_darling_normal(st.f);
  return st;
}

}  // namespace dnls
