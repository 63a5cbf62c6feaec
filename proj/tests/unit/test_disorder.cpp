#include <doctest.h>

#include <algorithm>
#include <cmath>
#include <numbers>
#include <sstream>

#include "dnls/disorder.hpp"

using namespace dnls;

namespace {

DisorderRealization custom(std::vector<double> eps) {
  DisorderRealization r;
  r.L = eps.size();
  r.epsilons = std::move(eps);
  return r;
}

EigenSystem solve(const DisorderRealization& r, Boundary b = Boundary::open, double J = 1.0) {
  ModelParams p;
  p.J = J;
  p.boundary = b;
  return diagonalize(build_hamiltonian(r, p));
}

// Roots of det(H - lambda) for the 3-site chain by bracketing and bisection.
std::vector<double> cubic_roots(double a, double b, double c) {
  const auto p = [&](double l) { return (a - l) * (b - l) * (c - l) - (a - l) - (c - l); };
  std::vector<double> roots;
  const double lo = -5.0, hi = 5.0;
  const int n = 200000;
  for (int i = 0; i < n; ++i) {
    double x0 = lo + (hi - lo) * i / n, x1 = lo + (hi - lo) * (i + 1) / n;
    if (p(x0) == 0.0) {
      roots.push_back(x0);
      continue;
    }
    if (p(x0) * p(x1) < 0.0) {
      for (int k = 0; k < 200; ++k) {
        const double m = 0.5 * (x0 + x1);
        (p(x0) * p(m) <= 0.0 ? x1 : x0) = m;
      }
      roots.push_back(0.5 * (x0 + x1));
    }
  }
  return roots;
}

}  // namespace

TEST_CASE("disorder draws are bounded and reproducible") {
  const auto a = generate_disorder(42, 8, 4.0);
  const auto b = generate_disorder(42, 8, 4.0);
  CHECK(a.epsilons.size() == 8);
  CHECK(a.epsilons == b.epsilons);
  for (double e : a.epsilons) {
    CHECK(e >= -2.0);
    CHECK(e <= 2.0);
  }
  const auto c = generate_disorder(43, 8, 4.0);
  CHECK(c.epsilons != a.epsilons);
  for (double e : generate_disorder(7, 8, 0.0).epsilons) CHECK(e == 0.0);
}

TEST_CASE("disorder draws look uniform") {
  const auto r = generate_disorder(5, 100000, 2.0);
  double mean = 0.0, var = 0.0;
  for (double e : r.epsilons) mean += e;
  mean /= r.L;
  for (double e : r.epsilons) var += (e - mean) * (e - mean);
  var /= r.L;
  CHECK(std::abs(mean) < 0.01);
  CHECK(var == doctest::Approx(1.0 / 3.0).epsilon(0.01));
}

TEST_CASE("disorder text round trip is exact") {
  const auto r = generate_disorder(123456789, 50, 3.7);
  std::stringstream ss;
  write_disorder(ss, r);
  const auto back = read_disorder(ss);
  CHECK(back.seed == r.seed);
  CHECK(back.L == r.L);
  CHECK(back.w == r.w);
  CHECK(back.epsilons == r.epsilons);
}

TEST_CASE("malformed disorder text is rejected") {
  std::stringstream ss("# dnls-disorder v1\n# seed 1 L 3 w 1\n0.1\n0.2\n");
  CHECK_THROWS(read_disorder(ss));
}

TEST_CASE("two-site chain has eigenvalues -1 and +1") {
  const auto es = solve(custom({0.0, 0.0}));
  CHECK(es.energies[0] == doctest::Approx(-1.0).epsilon(1e-14));
  CHECK(es.energies[1] == doctest::Approx(1.0).epsilon(1e-14));
  // Symmetric mode (1,1)/sqrt2: sum u^4 = 1/2.
  CHECK(overlap_sum(es, 0, 0, 0, 0) == doctest::Approx(0.5).epsilon(1e-14));
}

TEST_CASE("clean ring reproduces the plane-wave spectrum") {
  const auto es = solve(custom(std::vector<double>(8, 0.0)), Boundary::periodic);
  std::vector<double> expect;
  for (int k = 0; k < 8; ++k) expect.push_back(-2.0 * std::cos(2.0 * std::numbers::pi * k / 8.0));
  std::sort(expect.begin(), expect.end());
  for (int k = 0; k < 8; ++k) CHECK(std::abs(es.energies[k] - expect[k]) < 1e-12);
  CHECK(es.orthonormality_residual() < 1e-12);
}

TEST_CASE("clean open chain: sine spectrum and fourth-moment overlap") {
  const std::size_t L = 40;
  const auto es = solve(custom(std::vector<double>(L, 0.0)));
  for (std::size_t k = 0; k < L; ++k) {
    const double e = -2.0 * std::cos(std::numbers::pi * (k + 1) / (L + 1.0));
    CHECK(std::abs(es.energies[k] - e) < 1e-12);
    // sum_x (2/(L+1))^2 sin^4 = 3 / (2 (L+1)) for sine modes
    CHECK(overlap_sum(es, k, k, k, k) == doctest::Approx(1.5 / (L + 1.0)).epsilon(1e-12));
  }
}

TEST_CASE("three-site chain matches the characteristic polynomial") {
  const auto es = solve(custom({0.5, -0.3, 0.1}));
  const auto roots = cubic_roots(0.5, -0.3, 0.1);
  REQUIRE(roots.size() == 3);
  for (int i = 0; i < 3; ++i) CHECK(std::abs(es.energies[i] - roots[i]) < 1e-10);
}

TEST_CASE("hamiltonian is symmetric and applies like its dense form") {
  const auto r = generate_disorder(9, 12, 3.0);
  for (auto b : {Boundary::open, Boundary::periodic}) {
    ModelParams p;
    p.boundary = b;
    p.J = 0.7;
    const auto h = build_hamiltonian(r, p);
    const Eigen::MatrixXd d = h.dense();
    CHECK((d - d.transpose()).norm() == 0.0);
    CHECK(d(0, 1) == -0.7);
    CHECK(d(0, 11) == (b == Boundary::periodic ? -0.7 : 0.0));
    std::vector<double> v(12), out(12);
    for (int i = 0; i < 12; ++i) v[i] = std::sin(1.3 * i + 0.2);
    h.apply(std::span<const double>(v), std::span<double>(out));
    Eigen::VectorXd ref = d * Eigen::Map<Eigen::VectorXd>(v.data(), 12);
    for (int i = 0; i < 12; ++i) CHECK(std::abs(out[i] - ref[i]) < 1e-14);
  }
}

TEST_CASE("anderson eigensystem invariants at L=256") {
  const auto r = generate_disorder(2024, 256, 4.0);
  ModelParams p;
  const auto h = build_hamiltonian(r, p);
  const auto es = diagonalize(h);
  CHECK(es.orthonormality_residual() <= 1e-12);
  CHECK(es.max_eigen_residual(h) <= 1e-10);
  for (Eigen::Index n = 0; n < es.energies.size(); ++n) {
    CHECK(es.energies[n] >= -4.0);
    CHECK(es.energies[n] <= 4.0);
    if (n > 0) CHECK(es.energies[n] >= es.energies[n - 1]);
  }
  for (std::size_t n = 0; n < es.size(); ++n) {
    CHECK(es.centers[n] >= 0.0);
    CHECK(es.centers[n] <= 255.0);
    CHECK(es.loc_lengths[n] > 0.0);
    CHECK(es.inverse_lengths[n] == doctest::Approx(1.0 / es.loc_lengths[n]));
  }
}

TEST_CASE("localization length recovers a planted exponential") {
  const double xi = 3.5;
  const int L = 101, c = 50;
  std::vector<double> u(L);
  double s = 0.0;
  for (int x = 0; x < L; ++x) {
    u[x] = std::exp(-std::abs(x - c) / xi) * (x % 2 ? -1.0 : 1.0);
    s += u[x] * u[x];
  }
  for (auto& v : u) v /= std::sqrt(s);
  const double center = localization_center(u);
  CHECK(center == doctest::Approx(50.0).epsilon(1e-12));
  CHECK(localization_length(u, center) == doctest::Approx(xi).epsilon(1e-10));
  std::vector<double> flat(10, 1.0 / std::sqrt(10.0));
  CHECK(std::isinf(localization_length(flat, localization_center(flat))));
}

TEST_CASE("overlap sums are permutation symmetric bit for bit") {
  const auto es = solve(generate_disorder(77, 64, 2.0));
  int q[4] = {3, 17, 17, 40};
  const double ref = overlap_sum(es, q[0], q[1], q[2], q[3]);
  std::sort(q, q + 4);
  do {
    CHECK(overlap_sum(es, q[0], q[1], q[2], q[3]) == ref);
  } while (std::next_permutation(q, q + 4));
  for (int n = 0; n < 64; n += 7)
    for (int m = 0; m < 64; m += 5) CHECK(std::abs(overlap_sum(es, n, m, n, m)) <= 1.0);
}

TEST_CASE("far-separated modes have negligible overlap and are prefiltered") {
  const auto es = solve(generate_disorder(31, 256, 4.0));
  // Modes with two humps have a mean position between the humps, so a few
  // "far" pairs still overlap; the bound holds for the overwhelming majority.
  int far_pairs = 0, flagged = 0, large = 0;
  for (int n = 0; n < 256; n += 3)
    for (int m = n + 1; m < 256; m += 5) {
      const double xi = std::max(es.loc_lengths[n], es.loc_lengths[m]);
      if (std::abs(es.centers[n] - es.centers[m]) <= 10.0 * xi) continue;
      ++far_pairs;
      if (std::abs(overlap_sum(es, n, n, m, m)) >= 1e-6) ++large;
      CHECK(std::abs(overlap_sum(es, n, n, m, m)) < 1e-3);
      const auto v = overlap_sum(es, n, n, m, m, OverlapPolicy{});
      if (!v.exact) {
        ++flagged;
        CHECK(v.value == 0.0);
      }
    }
  CHECK(far_pairs > 100);
  CHECK(large <= far_pairs / 100);
  CHECK(flagged > 0);
  OverlapPolicy off;
  off.prefilter = false;
  CHECK(overlap_sum(es, 0, 0, 255, 255, off).exact);
}

TEST_CASE("overlap table agrees with direct sums and lists every ordering") {
  const auto es = solve(generate_disorder(8, 48, 3.0));
  std::vector<int> set;
  for (int n = 10; n < 22; ++n) set.push_back(n);
  OverlapPolicy pol;
  pol.prefilter = false;
  pol.drop_below = 0.0;
  pol.support_cutoff = 0.0;
  const OverlapTable t(es, set, pol);
  CHECK(t.size() == set.size());
  const int k = static_cast<int>(set.size());
  for (int n = 0; n < k; ++n) {
    CHECK(t.row(n).size() == static_cast<std::size_t>(k * k * k));
    for (const auto& e : t.row(n)) {
      const double direct = overlap_sum(es, set[n], set[e.m1], set[e.m2], set[e.m3]);
      CHECK(std::abs(e.value - direct) < 1e-15);
      CHECK(t.value(e.m3, n, e.m2, e.m1) == e.value);
    }
  }
}
