#include <doctest.h>

#include <cmath>
#include <sstream>

#include "dnls/dynamics.hpp"
#include "dnls/errors.hpp"
#include "dnls/observables.hpp"

using namespace dnls;

namespace {

std::shared_ptr<const DisorderRealization> lattice(std::uint64_t seed, std::size_t L, double w) {
  return std::make_shared<const DisorderRealization>(generate_disorder(seed, L, w));
}

ModelParams model(double beta, Boundary b = Boundary::open) {
  ModelParams p;
  p.beta = beta;
  p.boundary = b;
  return p;
}

double max_diff(const std::vector<cplx>& a, const std::vector<cplx>& b) {
  double d = 0.0;
  for (std::size_t i = 0; i < a.size(); ++i) d = std::max(d, std::abs(a[i] - b[i]));
  return d;
}

WavepacketState split_to(WavepacketState s, double t_end, double dt, SplitStepOptions o = {}) {
  SplitStepIntegrator in(s.params, s.realization, dt, o);
  in.advance(s, static_cast<std::uint64_t>(std::llround((t_end - s.t) / dt)));
  return s;
}

}  // namespace

TEST_CASE("free delta spreads ballistically: M2 = 2 t^2") {
  // sum_n n^2 J_n(2t)^2 = 2 t^2 for the clean chain.
  auto s = delta_state(model(0.0), lattice(1, 256, 0.0), 128);
  double sum = 0.0;
  for (int n = -128; n < 128; ++n) sum += n * n * std::pow(std::cyl_bessel_j(std::abs(n), 20.0), 2);
  CHECK(sum == doctest::Approx(200.0).epsilon(1e-9));
  SplitStepIntegrator in(s.params, s.realization, 0.05);
  for (double t : {1.0, 5.0, 10.0, 25.0, 50.0}) {
    in.advance(s, static_cast<std::uint64_t>(std::llround((t - s.t) / 0.05)));
    const auto m = moments(s);
    CHECK(m.m2 == doctest::Approx(2.0 * t * t).epsilon(1e-3));
    CHECK(m.m1 == doctest::Approx(128.0).epsilon(1e-12));
    // Amplitudes are Bessel functions.
    CHECK(std::abs(std::abs(s.psi[131]) - std::abs(std::cyl_bessel_j(3, 2.0 * t))) < 1e-10);
  }
}

TEST_CASE("norm is conserved over a million steps") {
  auto s = delta_state(model(1.0), lattice(3, 64, 4.0), 32);
  const double n0 = s.norm();
  SplitStepIntegrator in(s.params, s.realization, 0.05);
  in.advance(s, 1000000);
  CHECK(std::abs(s.norm() - n0) / n0 <= 1e-10);
  CHECK(s.t == doctest::Approx(50000.0));
}

TEST_CASE("linear eigenstates are stationary") {
  auto r = lattice(4, 40, 4.0);
  ModelParams p = model(0.0);
  const auto es = diagonalize(build_hamiltonian(*r, p));
  auto s = mode_state(p, r, es, 17);
  const auto s0 = s;
  CHECK(energy(s) == doctest::Approx(es.energies[17]).epsilon(1e-12));
  // Splitting the disorder from the hopping perturbs the eigenstate at
  // order dt^2; the defect stays bounded and shrinks fourfold with dt / 2.
  const auto defect = [&](double dt, double t) {
    const auto e = split_to(s0, t, dt);
    double d = 0.0;
    for (std::size_t x = 0; x < e.size(); ++x)
      d = std::max(d, std::abs(std::abs(e.psi[x]) - std::abs(s0.psi[x])));
    return d;
  };
  const double d1 = defect(0.05, 200.0), d2 = defect(0.025, 200.0);
  CHECK(d1 < 1e-3);
  CHECK(d1 / d2 == doctest::Approx(4.0).epsilon(0.1));
  CHECK(defect(0.05, 2000.0) < 2.0 * d1);
  s = split_to(s, 200.0, 0.0005);
  for (std::size_t x = 0; x < s.size(); ++x) CHECK(std::abs(std::abs(s.psi[x]) - std::abs(s0.psi[x])) < 1e-6);
  const auto c = project_to_modes(s, es);
  CHECK(std::abs(std::abs(c[17]) - 1.0) < 1e-6);
}

TEST_CASE("energy of a single occupied site") {
  auto r = std::make_shared<const DisorderRealization>(generate_disorder(1, 9, 0.0));
  for (double beta : {0.0, 0.5, 3.0}) {
    auto s = delta_state(model(beta), r, 4);
    CHECK(energy(s) == doctest::Approx(beta / 2.0));
  }
  ModelParams p = model(2.0);
  p.sigma = 2.0;
  CHECK(energy(delta_state(p, r, 4, 2.0)) == doctest::Approx(2.0 / 3.0 * 8.0));
}

TEST_CASE("hopping energy carries the -J sign") {
  auto r = std::make_shared<const DisorderRealization>(generate_disorder(1, 10, 0.0));
  auto s = delta_state(model(0.0), r, 0);
  s.psi[0] = s.psi[1] = 1.0 / std::sqrt(2.0);
  CHECK(energy(s) == doctest::Approx(-1.0));
}

TEST_CASE("mode projection: Kronecker delta and Parseval") {
  auto r = lattice(5, 30, 3.0);
  ModelParams p = model(0.0);
  const auto es = diagonalize(build_hamiltonian(*r, p));
  const auto c0 = project_to_modes(mode_state(p, r, es, 0), es);
  CHECK(std::abs(c0[0] - 1.0) < 1e-12);
  for (std::size_t n = 1; n < c0.size(); ++n) CHECK(std::abs(c0[n]) < 1e-12);
  auto s = patch_state(model(1.0), r, 10, 6, 2.5, 99);
  s = split_to(s, 7.3, 0.01);
  double parseval = 0.0;
  for (auto z : project_to_modes(s, es)) parseval += std::norm(z);
  CHECK(parseval == doctest::Approx(s.norm()).epsilon(1e-12));
  auto bad = std::make_shared<const DisorderRealization>(generate_disorder(5, 31, 3.0));
  CHECK_THROWS_AS(project_to_modes(delta_state(p, bad, 0), es), std::invalid_argument);
}

TEST_CASE("linear dynamics keeps every |c_n| constant") {
  auto r = lattice(6, 50, 4.0);
  ModelParams p = model(0.0);
  const auto es = diagonalize(build_hamiltonian(*r, p));
  auto s = delta_state(p, r, 25);
  const auto a = project_to_modes(s, es);
  const auto spread = [&](double dt) {
    double d = 0.0;
    for (double t : {50.0, 500.0, 5000.0}) {
      const auto b = project_to_modes(split_to(s, t, dt), es);
      for (std::size_t n = 0; n < a.size(); ++n) d = std::max(d, std::abs(std::abs(a[n]) - std::abs(b[n])));
    }
    return d;
  };
  // Bounded in time, second order in dt.
  const double d1 = spread(0.05), d2 = spread(0.025);
  CHECK(d1 < 1e-3);
  CHECK(d1 / d2 == doctest::Approx(4.0).epsilon(0.15));
  // The exact linear propagator keeps |c_n| fixed to roundoff.
  const auto ref = project_to_modes(reference_evolve(s, 50.0, 1e-12), es);
  for (std::size_t n = 0; n < a.size(); ++n) CHECK(std::abs(std::abs(a[n]) - std::abs(ref[n])) < 1e-10);
}

TEST_CASE("split step matches the exact eigenbasis solution when beta = 0") {
  auto r = lattice(7, 16, 4.0);
  ModelParams p = model(0.0);
  const auto es = diagonalize(build_hamiltonian(*r, p));
  auto s = delta_state(p, r, 8);
  const auto c = project_to_modes(s, es);
  const double t = 20.0;
  std::vector<cplx> exact(16);
  for (int x = 0; x < 16; ++x)
    for (int n = 0; n < 16; ++n) exact[x] += es.modes(x, n) * c[n] * std::polar(1.0, -es.energies[n] * t);
  const auto ref = reference_evolve(s, t, 1e-10);
  CHECK(max_diff(ref.psi, exact) < 1e-8);
  // For beta = 0 the local and kinetic steps commute only up to disorder,
  // so the split solution carries the usual dt^2 error.
  CHECK(max_diff(split_to(s, t, 0.001).psi, exact) < 1e-4);
}

TEST_CASE("split step against the adaptive reference at L=16") {
  auto r = lattice(11, 16, 4.0);
  auto s = delta_state(model(1.0), r, 8);
  const auto ref = reference_evolve(s, 100.0, 1e-10);
  const double err = max_diff(split_to(s, 100.0, 0.01).psi, ref.psi);
  const double err2 = max_diff(split_to(s, 100.0, 0.005).psi, ref.psi);
  MESSAGE("max site error at t=100: dt=0.01 " << err << ", dt=0.005 " << err2);
  CHECK(err <= 2e-3);
  CHECK(err / err2 == doctest::Approx(4.0).epsilon(0.05));
}

TEST_CASE("split step converges at second order") {
  auto r = lattice(12, 16, 4.0);
  auto s = delta_state(model(1.0), r, 8);
  const auto ref = reference_evolve(s, 10.0, 1e-12);
  std::vector<double> dts{0.04, 0.02, 0.01, 0.005}, lx, ly;
  for (double dt : dts) {
    lx.push_back(std::log(dt));
    ly.push_back(std::log(max_diff(split_to(s, 10.0, dt).psi, ref.psi)));
  }
  const double slope = (ly.back() - ly.front()) / (lx.back() - lx.front());
  MESSAGE("convergence slope " << slope);
  CHECK(slope == doctest::Approx(2.0).epsilon(0.1));
}

TEST_CASE("forward then time-reversed evolution returns the initial state") {
  auto r = lattice(13, 64, 4.0);
  auto s = patch_state(model(2.0), r, 28, 8, 4.0, 5);
  const auto s0 = s;
  s = split_to(s, 100.0, 0.05);
  for (auto& z : s.psi) z = std::conj(z);
  s = split_to(s, 200.0, 0.05);
  for (auto& z : s.psi) z = std::conj(z);
  // The scheme is exactly reversible; only roundoff, amplified by the
  // chaotic dynamics, remains.
  CHECK(max_diff(s.psi, s0.psi) < 1e-6);
}

TEST_CASE("active window reproduces the full-lattice evolution") {
  auto r = lattice(14, 4096, 4.0);
  auto s = delta_state(model(1.0), r, 2048);
  SplitStepOptions full;
  full.active_window = false;
  SplitStepIntegrator win(s.params, s.realization, 0.05);
  auto a = s;
  win.advance(a, 4000);
  const auto b = split_to(s, 200.0, 0.05, full);
  CHECK(max_diff(a.psi, b.psi) < 1e-10);
  CHECK(std::abs(moments(a).m2 - moments(b).m2) < 1e-9);
  CHECK(win.window().second - win.window().first < 1024);
}

TEST_CASE("evolve records a strictly increasing schedule with drift summaries") {
  auto r = lattice(15, 128, 4.0);
  auto s = delta_state(model(1.0), r, 64);
  const auto sched = ObservationSchedule::logarithmic(1.0, 1000.0, 10);
  CHECK(sched.times.size() == 31);
  const auto rec = evolve(s, 1000.0, 0.05, sched);
  REQUIRE(rec.observations.size() == 31);
  for (std::size_t i = 1; i < rec.observations.size(); ++i)
    CHECK(rec.observations[i].t > rec.observations[i - 1].t);
  CHECK(rec.observations.back().t == doctest::Approx(1000.0));
  CHECK(rec.steps == 20000);
  CHECK(rec.max_norm_drift < 1e-10);
  CHECK(rec.max_energy_drift < 1e-2);
  std::ostringstream os;
  write_trajectory_csv(os, rec);
  CHECK(os.str().rfind("t,N,E,M1,M2,participation\n", 0) == 0);

  auto same = s;
  const auto empty = evolve(same, same.t, 0.05, sched);
  CHECK(empty.observations.empty());
  CHECK(same.psi == s.psi);
  CHECK_THROWS_AS(evolve(same, same.t - 1.0, 0.05, sched), std::invalid_argument);
}

TEST_CASE("non-finite amplitudes abort with the offending time") {
  auto r = lattice(16, 32, 1.0);
  auto s = delta_state(model(1.0), r, 16);
  s.psi[3] = cplx(std::nan(""), 0.0);
  SplitStepIntegrator in(s.params, s.realization, 0.05);
  CHECK_THROWS_AS(in.advance(s, 100), NumericalError);
}

TEST_CASE("snapshot export has three columns") {
  std::vector<cplx> psi{{1.0, 0.0}, {0.0, -0.5}};
  std::ostringstream os;
  write_snapshot(os, psi);
  CHECK(os.str() == "x,re_psi,im_psi\n0,1,0\n1,0,-0.5\n");
}
