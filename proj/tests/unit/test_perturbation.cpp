#include <doctest.h>

#include <cmath>
#include <sstream>

#include <boost/numeric/odeint.hpp>

#include "dnls/perturbation.hpp"
#include "dnls/rng.hpp"

using namespace dnls;

namespace {

struct Setup {
  std::shared_ptr<EigenSystem> es;
  int n0 = 0;
};

Setup setup(std::uint64_t seed, std::size_t L = 64, double w = 4.0) {
  ModelParams p;
  Setup s;
  s.es = std::make_shared<EigenSystem>(
      diagonalize(build_hamiltonian(generate_disorder(seed, L, w), p)));
  double best = 1e9;
  for (std::size_t n = 0; n < L; ++n)
    if (std::abs(s.es->centers[n] - L / 2.0) < best) {
      best = std::abs(s.es->centers[n] - L / 2.0);
      s.n0 = static_cast<int>(n);
    }
  return s;
}

std::vector<double> grid(double T, int n = 200) {
  std::vector<double> g;
  for (int i = 0; i <= n; ++i) g.push_back(T * i / n);
  return g;
}

std::vector<int> near(const EigenSystem& es, int n0, double r) { return retained_modes(es, n0, r); }

double dist(const std::vector<cplx>& a, const std::vector<cplx>& b) {
  double s = 0.0;
  for (std::size_t i = 0; i < a.size(); ++i) s += std::norm(a[i] - b[i]);
  return std::sqrt(s);
}

int local_index(const ExpansionState& ex, int global) {
  for (std::size_t i = 0; i < ex.size(); ++i)
    if (ex.modes[i] == global) return static_cast<int>(i);
  return -1;
}

}  // namespace

TEST_CASE("phase pool interns integer combinations") {
  PhasePool pool;
  const auto a = pool.base(3, 1, 3, 2);  // E1 - E2
  CHECK(a == pool.from({{1, 1}, {2, -1}}));
  CHECK(pool.base(4, 5, 5, 4) == pool.zero());
  CHECK(pool.add(a, -1, a) == pool.zero());
  CHECK(pool.add(a, 1, a) == pool.from({{1, 2}, {2, -2}}));
  std::vector<double> e{0.0, 0.5, -1.25};
  CHECK(pool.frequency(a, e) == 1.75);
}

TEST_CASE("orders zero and one match the closed forms") {
  const auto s = setup(11);
  const auto& es = *s.es;
  const OverlapTable tab(es, near(es, s.n0, 12.0));
  const auto ex = expand(es, tab, s.n0, 0.0, 1, grid(50.0));
  const double E0 = es.energies[s.n0];
  for (std::size_t n = 0; n < ex.size(); ++n) {
    const int g = ex.modes[n];
    for (double t : {0.0, 1.3, 17.0, 50.0}) {
      CHECK(ex.coefficient(0, static_cast<int>(n), t) == cplx(g == s.n0 ? 1.0 : 0.0));
      if (g == s.n0) continue;
      const double V = overlap_sum(es, g, s.n0, s.n0, s.n0);
      const double d = es.energies[g] - E0;
      const cplx expect = V * (1.0 - std::polar(1.0, d * t)) / d;
      CHECK(std::abs(ex.coefficient(1, static_cast<int>(n), t) - expect) < 1e-12);
    }
  }
  // E_0^(1) = V_0^{000} and the initial mode has no first-order coefficient.
  CHECK(ex.corrections[1][ex.initial] ==
        doctest::Approx(overlap_sum(es, s.n0, s.n0, s.n0, s.n0)).epsilon(1e-12));
  CHECK(ex.max_abs(1, ex.initial) < 1e-14);
  CHECK(ex.uncancelled_secular == 0);
}

TEST_CASE("first order uses self-consistent renormalized energies") {
  const auto s = setup(11);
  const auto& es = *s.es;
  const OverlapTable tab(es, near(es, s.n0, 12.0));
  const double beta = 0.01;
  const auto ex = expand(es, tab, s.n0, beta, 1, grid(50.0));
  const double V0 = overlap_sum(es, s.n0, s.n0, s.n0, s.n0);
  CHECK(ex.renormalized[ex.initial] == doctest::Approx(es.energies[s.n0] + beta * V0));
  const int n = (ex.initial + 1) % static_cast<int>(ex.size());
  const int g = ex.modes[n];
  const double V = overlap_sum(es, g, s.n0, s.n0, s.n0);
  const double d = es.energies[g] - es.energies[s.n0];
  const double dp = ex.renormalized[n] - ex.renormalized[ex.initial];
  CHECK(std::abs(dp - d) > 1e-4);
  const cplx expect = V * (1.0 - std::polar(1.0, dp * 30.0)) / dp;
  CHECK(std::abs(ex.coefficient(1, n, 30.0) - expect) < 1e-12);
  ExpansionOptions acc;
  acc.self_consistent = false;
  const auto ob = expand(es, tab, s.n0, beta, 1, grid(50.0), acc);
  CHECK(std::abs(ob.coefficient(1, n, 0.0)) < 1e-15);
  CHECK(ob.fixed_point_iterations == 0);
}

TEST_CASE("higher orders vanish at t = 0 and stay bounded") {
  const auto s = setup(5);
  const auto& es = *s.es;
  const OverlapTable tab(es, near(es, s.n0, 10.0));
  const auto ex = expand(es, tab, s.n0, 0.05, 3, grid(400.0));
  CHECK(ex.uncancelled_secular == 0);
  CHECK(ex.secular_residual < 1e-12);
  auto longer = ex;
  longer.t_grid = grid(1600.0, 800);
  for (int k = 1; k <= 3; ++k)
    for (std::size_t n = 0; n < ex.size(); ++n) {
      double scale = 0.0;
      for (const auto& t : ex.coeff[k][n]) scale += std::abs(t.a);
      CHECK(std::abs(ex.coefficient(k, static_cast<int>(n), 0.0)) <= 1e-14 * scale);
      for (const auto& t : ex.coeff[k][n]) CHECK(t.power == 0);
      const double a = ex.max_abs(k, static_cast<int>(n));
      const double b = longer.max_abs(k, static_cast<int>(n));
      // no term grows in t, so the envelope cannot scale with the window
      CHECK(b <= 2.0 * a + 1e-12);
    }
}

TEST_CASE("disabling secular cancellation gives linear growth") {
  const auto s = setup(5);
  const auto& es = *s.es;
  const OverlapTable tab(es, near(es, s.n0, 10.0));
  ExpansionOptions off;
  off.cancel_secular = false;
  const auto ex = expand(es, tab, s.n0, 0.05, 2, grid(1000.0), off);
  const double V0 = overlap_sum(es, s.n0, s.n0, s.n0, s.n0);
  CHECK(std::abs(ex.coefficient(1, ex.initial, 1000.0) - cplx(0.0, -V0 * 1000.0)) < 1e-9);
  auto half = ex;
  half.t_grid = grid(500.0);
  const double growth = ex.max_abs(1, ex.initial) / half.max_abs(1, ex.initial);
  CHECK(growth == doctest::Approx(2.0).epsilon(1e-9));
  CHECK(ex.renormalized == ex.energies);
}

TEST_CASE("assembled solution: linear limit, initial condition, order scaling") {
  const auto s = setup(7);
  const auto& es = *s.es;
  const OverlapTable tab(es, near(es, s.n0, 12.0));
  const auto lin = expand(es, tab, s.n0, 0.0, 3, grid(20.0));
  for (double t : {0.0, 3.0, 20.0}) {
    const auto psi = assemble(lin, t);
    for (Eigen::Index x = 0; x < es.modes.rows(); ++x) {
      const cplx expect = es.modes(x, s.n0) * std::polar(1.0, -es.energies[s.n0] * t);
      CHECK(std::abs(psi[x] - expect) < 1e-14);
    }
  }
  CHECK_THROWS_AS(assemble(lin, 20.5), std::out_of_range);

  const auto at0 = assemble(expand(es, tab, s.n0, 0.2, 2, grid(20.0)), 0.0);
  for (Eigen::Index x = 0; x < es.modes.rows(); ++x)
    CHECK(std::abs(at0[x] - es.modes(x, s.n0)) < 1e-14);

  // ||psi_N - psi_{N-1}|| scales as beta^N at fixed t.
  const double t = 4.0;
  for (int N : {1, 2, 3}) {
    std::vector<double> d;
    for (double beta : {0.02, 0.01}) {
      const auto a = assemble(expand(es, tab, s.n0, beta, N, grid(t)), t);
      const auto b = assemble(expand(es, tab, s.n0, beta, N - 1, grid(t)), t);
      d.push_back(dist(a, b));
    }
    CHECK(std::log2(d[0] / d[1]) == doctest::Approx(N).epsilon(0.1));
  }

  // (psi_PT - psi_lin) / beta has a finite limit.
  std::vector<double> r;
  for (double beta : {1e-3, 1e-4}) {
    const auto a = assemble(expand(es, tab, s.n0, beta, 2, grid(t)), t);
    const auto b = assemble(lin, t);
    r.push_back(dist(a, b) / beta);
  }
  CHECK(r[0] == doctest::Approx(r[1]).epsilon(0.01));
  CHECK(r[0] > 0.0);
}

TEST_CASE("expand rejects tables without the initial mode") {
  const auto s = setup(3);
  const auto& es = *s.es;
  const OverlapTable tab(es, {s.n0 + 20, s.n0 + 21});
  CHECK_THROWS_AS(expand(es, tab, s.n0, 0.1, 2, grid(10.0)), std::invalid_argument);
  const OverlapTable ok(es, {s.n0});
  CHECK_THROWS_AS(expand(es, ok, s.n0, 0.1, 2, {}), std::invalid_argument);
}

TEST_CASE("expansion dump is deterministic") {
  const auto s = setup(3);
  const auto& es = *s.es;
  const OverlapTable tab(es, near(es, s.n0, 6.0));
  std::ostringstream a, b;
  write_expansion(a, expand(es, tab, s.n0, 0.1, 2, grid(10.0)));
  write_expansion(b, expand(es, tab, s.n0, 0.1, 2, grid(10.0)));
  CHECK(a.str() == b.str());
  CHECK(a.str().rfind("# dnls-expansion v1\norder 2 beta 0.10000000000000001", 0) == 0);
}

TEST_CASE("remainder operator: zero at beta = 0, lowest order forcing") {
  const auto s = setup(9);
  const auto& es = *s.es;
  const OverlapTable tab(es, near(es, s.n0, 8.0));
  const auto lin = expand(es, tab, s.n0, 0.0, 3, grid(10.0));
  const auto op0 = remainder_operator(lin);
  for (double t : {0.0, 2.5, 9.0}) {
    CHECK(op0.inhomogeneity(t).norm() == 0.0);
    CHECK(op0.coupling(t).norm() == 0.0);
    CHECK(op0.conj_coupling(t).norm() == 0.0);
  }

  const double beta = 0.3;
  const auto ex0 = expand(es, tab, s.n0, beta, 0, grid(10.0));
  const auto op = remainder_operator(ex0);
  const auto W = op.inhomogeneity(3.7);
  for (std::size_t n = 0; n < ex0.size(); ++n) {
    const int g = ex0.modes[n];
    const double V = overlap_sum(es, g, s.n0, s.n0, s.n0);
    const cplx expect = beta * V * std::polar(1.0, (es.energies[g] - es.energies[s.n0]) * 3.7);
    CHECK(std::abs(W[n] - expect) < 1e-13);
  }
  const auto M1 = op.coupling(1.1), M2 = op.coupling(1.1);
  CHECK((M1 - M2).norm() == 0.0);
  CHECK(M1.isApprox(M1.adjoint(), 1e-12));
  const auto B = op.conj_coupling(1.1);
  CHECK(B.isApprox(B.transpose(), 1e-12));
}

TEST_CASE("remainder operator applies like its dense kernels") {
  const auto s = setup(9);
  const auto& es = *s.es;
  const OverlapTable tab(es, near(es, s.n0, 8.0));
  const auto ex = expand(es, tab, s.n0, 0.15, 2, grid(10.0));
  const auto op = remainder_operator(ex);
  CounterRng rng(4);
  Eigen::VectorXcd q(static_cast<Eigen::Index>(ex.size()));
  for (auto& z : q) z = cplx(rng.normal(), rng.normal());
  const double t = 6.3;
  const Eigen::VectorXcd dense = op.coupling(t) * q + op.conj_coupling(t) * q.conjugate();
  CHECK((op.apply(op.frame(t), q) - dense).norm() < 1e-12 * dense.norm());
}

TEST_CASE("inhomogeneity is of order beta^(N+1)") {
  const auto s = setup(9);
  const auto& es = *s.es;
  const OverlapTable tab(es, near(es, s.n0, 8.0));
  for (int N : {0, 1, 2}) {
    std::vector<double> w;
    for (double beta : {0.02, 0.01}) {
      const auto ex = expand(es, tab, s.n0, beta, N, grid(10.0));
      const auto op = remainder_operator(ex);
      double m = 0.0;
      for (double t : {1.0, 3.0, 7.0, 10.0}) m = std::max(m, op.inhomogeneity(t).norm());
      w.push_back(m);
    }
    CHECK(std::log2(w[0] / w[1]) == doctest::Approx(N + 1).epsilon(0.1));
  }
}

TEST_CASE("remainder evolution: zero operator and constant forcing") {
  const auto s = setup(9);
  const auto& es = *s.es;
  const OverlapTable tab(es, near(es, s.n0, 8.0));
  const auto lin = expand(es, tab, s.n0, 0.0, 2, grid(10.0));
  const auto zero = remainder_evolve(remainder_operator(lin), 10.0);
  for (double v : zero.norms) CHECK(v == 0.0);

  // One retained mode at order zero: W = beta V is constant and the coupling
  // is O(beta), so |Q| = |W| t up to O(beta t).
  const OverlapTable one(es, {s.n0});
  const double beta = 1e-7;
  const auto ex = expand(es, one, s.n0, beta, 0, grid(10.0));
  RemainderOptions o;
  o.dt = 0.01;
  o.sample_every = 100;
  const auto tr = remainder_evolve(remainder_operator(ex), 10.0, o);
  const double W = beta * overlap_sum(es, s.n0, s.n0, s.n0, s.n0);
  for (std::size_t i = 0; i < tr.times.size(); ++i)
    CHECK(tr.norms[i] == doctest::Approx(W * tr.times[i]).epsilon(1e-5));
}

TEST_CASE("remainder evolution agrees with an adaptive reference") {
  const auto s = setup(9);
  const auto& es = *s.es;
  const OverlapTable tab(es, near(es, s.n0, 8.0));
  const auto ex = expand(es, tab, s.n0, 0.2, 2, grid(20.0));
  const auto op = remainder_operator(ex);
  RemainderOptions o;
  o.dt = 0.01;
  o.sample_every = 2000;
  const auto tr = remainder_evolve(op, 20.0, o);

  using State = std::vector<cplx>;
  State q(ex.size(), cplx{});
  const auto rhs = [&](const State& x, State& dx, double t) {
    const auto f = op.frame(t);
    const Eigen::VectorXcd v = Eigen::Map<const Eigen::VectorXcd>(x.data(), x.size());
    const Eigen::VectorXcd r = f.w + op.apply(f, v);
    dx.resize(x.size());
    for (std::size_t i = 0; i < x.size(); ++i) dx[i] = cplx(0.0, -1.0) * r[i];
  };
  namespace ode = boost::numeric::odeint;
  ode::integrate_adaptive(ode::make_controlled<ode::runge_kutta_dopri5<State>>(1e-12, 1e-12), rhs,
                          q, 0.0, 20.0, 0.01);
  const Eigen::VectorXcd ref = Eigen::Map<const Eigen::VectorXcd>(q.data(), q.size());
  CHECK(ref.norm() > 0.0);
  CHECK((tr.final_q - ref).norm() < 1e-8 * ref.norm());
  CHECK(tr.norms.back() == doctest::Approx(ref.norm()).epsilon(1e-8));
}

TEST_CASE("t_star crossing, extrapolation and refusal") {
  std::vector<double> t, n;
  for (int i = 0; i <= 100; ++i) {
    t.push_back(10.0 * i);
    n.push_back(2e-4 * t.back());
  }
  auto r = t_star(t, n);
  CHECK(r.crossed);
  CHECK_FALSE(r.extrapolated);
  CHECK(r.value == doctest::Approx(500.0).epsilon(1e-12));

  std::vector<double> t2, n2;
  for (int i = 0; i <= 100; ++i) {
    t2.push_back(i);
    n2.push_back(1e-4 * i);
  }
  r = t_star(t2, n2);
  CHECK(r.extrapolated);
  CHECK_FALSE(r.crossed);
  CHECK(r.value == doctest::Approx(1000.0).epsilon(1e-9));

  std::vector<double> falling(n2.rbegin(), n2.rend());
  r = t_star(t2, falling);
  CHECK(r.refused);
  CHECK(std::isinf(r.value));

  std::vector<double> zeros(t2.size(), 0.0);
  r = t_star(t2, zeros);
  CHECK(r.degenerate);
  CHECK(std::isinf(r.value));

  std::ostringstream os;
  const std::vector<TStarRow> rows{{0.1, 3, r}};
  write_t_star_csv(os, rows);
  CHECK(os.str().rfind("beta,order,t_star,extrapolated\n0.1", 0) == 0);
}

TEST_CASE("dominant mode subtraction edge cases") {
  RemainderTrajectory tr;
  for (int i = 0; i <= 50; ++i) {
    const double t = i;
    tr.times.push_back(t);
    tr.mode_abs.push_back({3e-3 * t, 1e-3 * t, 4e-3 * t});
    tr.norms.push_back(std::sqrt(26.0) * 1e-3 * t);
  }
  const auto same = subtract_dominant_modes(tr, 0);
  CHECK(same.norms == tr.norms);
  CHECK(same.t_star.value == t_star(tr.times, tr.norms).value);
  const auto two = subtract_dominant_modes(tr, 2);
  CHECK(two.removed == std::vector<int>{2, 0});
  CHECK(two.norms.back() == doctest::Approx(0.05));
  CHECK(two.t_star.value == doctest::Approx(100.0));
  const auto all = subtract_dominant_modes(tr, 3);
  CHECK(all.t_star.degenerate);
  CHECK(std::isinf(all.t_star.value));
  CHECK_THROWS_AS(subtract_dominant_modes(tr, 4), std::invalid_argument);
}

TEST_CASE("anderson-darling separates normal from uniform samples") {
  CounterRng rng(17);
  std::vector<double> g(5000), u(5000);
  for (auto& v : g) v = rng.normal();
  for (auto& v : u) v = rng.uniform();
  CHECK_FALSE(anderson_darling_normal(g).reject_5pct);
  CHECK(anderson_darling_normal(u).reject_5pct);
}

TEST_CASE("small denominators: s -> 0 limit and shrinking interval") {
  SmallDenominatorOptions o;
  o.L = 32;
  o.samples = 4096;
  o.s = 1e-6;
  const auto tiny = small_denominator_stats(o);
  CHECK(tiny.mean == doctest::Approx(1.0).epsilon(1e-4));

  o.s = 0.5;
  o.samples = 16384;
  const auto st = small_denominator_stats(o);
  CHECK(std::isfinite(st.mean));
  CHECK(st.ci_low < st.mean);
  CHECK(st.checkpoints.back() == 16384);
  const auto c = st.checkpoints.size();
  REQUIRE(c >= 3);
  const double ratio = st.running_ci_width[c - 1] / st.running_ci_width[c - 2];
  CHECK(ratio > 0.35);
  CHECK(ratio < 0.65);
  CHECK(st.converging);
  const auto again = small_denominator_stats(o);
  CHECK(again.mean == st.mean);
  CHECK_THROWS_AS(small_denominator_stats([] {
                    SmallDenominatorOptions b;
                    b.s = 1.0;
                    return b;
                  }()),
                  std::invalid_argument);
}
