#include "dnls/chaos.hpp"

#include <algorithm>
#include <atomic>
#include <cmath>
#include <iomanip>
#include <mutex>
#include <numbers>
#include <numeric>
#include <ostream>
#include <stdexcept>
#include <thread>

#include <Eigen/Dense>
#include <json.hpp>
#include <unsupported/Eigen/NonLinearOptimization>
#include <unsupported/Eigen/NumericalDiff>

#include "dnls/errors.hpp"
#include "dnls/kinetic.hpp"
#include "dnls/rng.hpp"

namespace dnls {

RescaledParams rescale(double J, double w, double beta, double norm) {
  if (!(J > 0.0)) throw std::invalid_argument("rescale: J must be positive");
  RescaledParams p;
  p.W = w / 2.0;
  p.c = 1.0 / (J * (1.0 + p.W));
  p.J = p.c * J;
  p.w = p.c * w;
  p.beta = p.c * beta;
  p.norm = p.beta * norm;
  return p;
}

RescaledParams scale_by(const RescaledParams& p, double c) {
  RescaledParams q = p;
  q.J *= c;
  q.w *= c;
  q.beta *= c;
  q.norm *= c;
  q.c *= c;
  return q;
}

// ---------------------------------------------------------------------------

namespace {

double real_dot(const cplx* a, const cplx* b, std::size_t n) {
  double s = 0.0;
  for (std::size_t i = 0; i < n; ++i) s += a[i].real() * b[i].real() + a[i].imag() * b[i].imag();
  return s;
}

// Half or full local rotation of the trajectory and its exact derivative on
// the tangent vectors.
void local_step(cplx* psi, cplx* tangents, int n_exp, std::size_t L, const double* eps,
                double beta, double h) {
  for (std::size_t x = 0; x < L; ++x) {
    const cplx p = psi[x];
    const double theta = h * (eps[x] + beta * std::norm(p));
    const cplx u = std::polar(1.0, -theta);
    for (int j = 0; j < n_exp; ++j) {
      cplx& d = tangents[j * L + x];
      const double r = p.real() * d.real() + p.imag() * d.imag();
      d = u * (d - cplx(0.0, 2.0 * h * beta * r) * p);
    }
    psi[x] = u * p;
  }
}

bool run_tangent(std::span<const cplx> psi0, std::span<const double> eps, double J, double beta,
                 const LyapunovOptions& o, double renorm_interval, LyapunovResult& out) {
  const std::size_t L = psi0.size();
  const int k = o.n_exp;
  // Trajectory in slot 0, tangent vectors after it.
  KineticPropagator kin(L, J, o.dt, Boundary::periodic, static_cast<std::size_t>(k) + 1);
  std::vector<cplx> buf((k + 1) * L);
  std::copy(psi0.begin(), psi0.end(), buf.begin());
  cplx* psi = buf.data();
  cplx* tan = buf.data() + L;
  CounterRng rng(o.seed);
  for (std::size_t i = 0; i < k * L; ++i) tan[i] = cplx(rng.normal(), rng.normal());
  std::vector<double> sums(k, 0.0);

  const auto orthonormalize = [&](bool accumulate) {
    for (int j = 0; j < k; ++j) {
      cplx* v = tan + j * L;
      for (int i = 0; i < j; ++i) {
        const cplx* u = tan + i * L;
        const double c = real_dot(u, v, L);
        for (std::size_t x = 0; x < L; ++x) v[x] -= c * u[x];
      }
      const double nrm = std::sqrt(real_dot(v, v, L));
      if (!std::isfinite(nrm) || nrm > 1e150 || nrm == 0.0) return false;
      if (accumulate) sums[j] += std::log(nrm);
      for (std::size_t x = 0; x < L; ++x) v[x] /= nrm;
    }
    return true;
  };
  if (!orthonormalize(false)) return false;

  const auto steps_per = std::max<std::uint64_t>(1, std::llround(renorm_interval / o.dt));
  const auto total = static_cast<std::uint64_t>(std::llround(o.T / o.dt));
  out = LyapunovResult{};
  out.renorm_interval = static_cast<double>(steps_per) * o.dt;
  double next_record = out.renorm_interval;
  const double record_factor = std::pow(10.0, 1.0 / o.points_per_decade);
  std::uint64_t done = 0;
  while (done < total) {
    const auto n = std::min(steps_per, total - done);
    for (std::uint64_t s = 0; s < n; ++s) {
      local_step(psi, tan, k, L, eps.data(), beta, 0.5 * o.dt);
      kin.apply(buf.data());
      local_step(psi, tan, k, L, eps.data(), beta, 0.5 * o.dt);
    }
    done += n;
    if (!orthonormalize(true)) return false;
    const double t = static_cast<double>(done) * o.dt;
    if (t >= next_record * (1.0 - 1e-12) || done == total) {
      out.times.push_back(t);
      std::vector<double> lam(k);
      for (int j = 0; j < k; ++j) lam[j] = sums[j] / t;
      out.running.push_back(std::move(lam));
      while (next_record <= t * (1.0 + 1e-12)) next_record *= record_factor;
    }
  }
  for (std::size_t x = 0; x < L; ++x)
    if (!std::isfinite(std::norm(psi[x]))) throw NumericalError("lyapunov_spectrum: trajectory diverged");
  out.exponents = out.running.empty() ? std::vector<double>(k, 0.0) : out.running.back();
  std::sort(out.exponents.begin(), out.exponents.end(), std::greater<>());
  return true;
}

}  // namespace

LyapunovResult lyapunov_spectrum(std::span<const cplx> psi0, std::span<const double> eps, double J,
                                 double beta, const LyapunovOptions& o) {
  if (psi0.size() < 2 || eps.size() != psi0.size())
    throw std::invalid_argument("lyapunov_spectrum: state and potential sizes differ");
  if (o.n_exp < 1 || static_cast<std::size_t>(o.n_exp) > 2 * psi0.size())
    throw std::invalid_argument("lyapunov_spectrum: need 1 <= n_exp <= 2L");
  if (!(o.dt > 0.0) || !(o.T >= o.dt) || !(o.renorm_interval > 0.0))
    throw std::invalid_argument("lyapunov_spectrum: invalid time parameters");
  LyapunovResult out;
  double interval = o.renorm_interval;
  for (int attempt = 0; attempt <= o.max_retries; ++attempt) {
    if (run_tangent(psi0, eps, J, beta, o, interval, out)) {
      out.retries = attempt;
      return out;
    }
    interval *= 0.5;
  }
  throw NumericalError("lyapunov_spectrum: tangent vectors overflow at every renormalization interval");
}

std::string to_string(Regularity r) {
  switch (r) {
    case Regularity::regular: return "regular";
    case Regularity::chaotic: return "chaotic";
    default: return "indeterminate";
  }
}

Classification classify_regular(std::span<const double> times, std::span<const double> lam,
                                const ClassifyOptions& o) {
  if (times.size() != lam.size() || times.empty())
    throw std::invalid_argument("classify_regular: series lengths differ or are empty");
  Classification c;
  c.T = times.back();
  c.lambda_max = lam.back();
  if (c.lambda_max * c.T <= o.bounded_log_growth) {
    c.verdict = Regularity::regular;
    c.slope = -std::numeric_limits<double>::infinity();
    return c;
  }
  double sx = 0, sy = 0, sxx = 0, sxy = 0;
  std::size_t n = 0;
  for (std::size_t i = 0; i < times.size(); ++i) {
    if (times[i] < c.T / 10.0 * (1.0 - 1e-12) || !(lam[i] > 0.0)) continue;
    const double x = std::log(times[i]), y = std::log(lam[i]);
    sx += x;
    sy += y;
    sxx += x * x;
    sxy += x * y;
    ++n;
  }
  if (n < 3) return c;
  c.slope = (n * sxy - sx * sy) / (n * sxx - sx * sx);
  if (c.slope <= o.regular_slope)
    c.verdict = Regularity::regular;
  else if (c.slope >= o.plateau_slope && c.lambda_max * c.T >= o.min_log_growth)
    c.verdict = Regularity::chaotic;
  return c;
}

Classification classify_regular(const LyapunovResult& r, const ClassifyOptions& o) {
  std::vector<double> lam;
  for (const auto& row : r.running) lam.push_back(*std::max_element(row.begin(), row.end()));
  return classify_regular(r.times, lam, o);
}

Interval wilson_interval(std::size_t k, std::size_t n, double z) {
  if (n == 0) return {0.0, 1.0};
  const double p = static_cast<double>(k) / n, z2 = z * z, dn = static_cast<double>(n);
  const double denom = 1.0 + z2 / dn;
  const double center = (p + z2 / (2 * dn)) / denom;
  const double half = z * std::sqrt(p * (1 - p) / dn + z2 / (4 * dn * dn)) / denom;
  return {std::max(0.0, center - half), std::min(1.0, center + half)};
}

ChaosEnsembleRecord regularity_probability(double rho, double W, std::size_t L,
                                           std::size_t n_samples, std::uint64_t master_seed,
                                           const ChaosOptions& o) {
  if (n_samples < 20) throw std::invalid_argument("regularity_probability: need >= 20 samples");
  if (L < 2) throw std::invalid_argument("regularity_probability: L must be >= 2");
  if (!(rho >= 0.0) || !(W >= 0.0))
    throw std::invalid_argument("regularity_probability: rho and W must be non-negative");
  ChaosEnsembleRecord rec;
  rec.rho = rho;
  rec.W = W;
  rec.L = L;
  rec.samples = n_samples;
  rec.master_seed = master_seed;
  rec.T = o.lyapunov.T;
  rec.lambda_max.assign(n_samples, 0.0);
  rec.verdicts.assign(n_samples, Regularity::indeterminate);
  const double Jp = 1.0 / (1.0 + W), wp = 2.0 * W / (1.0 + W);

  const auto run_one = [&](std::size_t i) {
    const auto seed = derive_seed(master_seed, i);
    const auto r = generate_disorder(seed, L, wp);
    CounterRng phases(mix64(seed ^ 0xA5A5A5A5ULL));
    std::vector<cplx> psi(L);
    const double amp = std::sqrt(rho);
    for (auto& z : psi) z = std::polar(amp, 2.0 * std::numbers::pi * phases.uniform());
    LyapunovOptions lo = o.lyapunov;
    lo.seed = mix64(seed ^ 0x5A5A5A5AULL);
    const auto res = lyapunov_spectrum(psi, r.epsilons, Jp, o.beta, lo);
    const auto c = classify_regular(res, o.classify);
    rec.lambda_max[i] = res.max_lambda();
    rec.verdicts[i] = c.verdict;
  };
  const int workers = std::max(1, o.workers);
  if (workers == 1) {
    for (std::size_t i = 0; i < n_samples; ++i) run_one(i);
  } else {
    std::atomic<std::size_t> next{0};
    std::vector<std::thread> pool;
    std::exception_ptr error;
    std::mutex error_mutex;
    for (int w = 0; w < workers; ++w)
      pool.emplace_back([&] {
        for (std::size_t i; (i = next++) < n_samples;) {
          try {
            run_one(i);
          } catch (...) {
            std::lock_guard lock(error_mutex);
            if (!error) error = std::current_exception();
          }
        }
      });
    for (auto& t : pool) t.join();
    if (error) std::rethrow_exception(error);
  }
  for (auto v : rec.verdicts) {
    if (v == Regularity::regular) ++rec.regular;
    else if (v == Regularity::chaotic) ++rec.chaotic;
    else ++rec.indeterminate;
  }
  const std::size_t det = rec.regular + rec.chaotic;
  rec.P = det ? static_cast<double>(rec.regular) / det : 0.0;
  const auto ci = wilson_interval(rec.regular, det);
  rec.ci_low = std::min(ci.low, rec.P);
  rec.ci_high = std::max(ci.high, rec.P);
  rec.low_quality = rec.indeterminate * 5 > n_samples;
  return rec;
}

void write_record_jsonl(std::ostream& os, const ChaosEnsembleRecord& r) {
  nlohmann::json j;
  j["rho"] = r.rho;
  j["W"] = r.W;
  j["L"] = r.L;
  j["samples"] = r.samples;
  j["regular"] = r.regular;
  j["chaotic"] = r.chaotic;
  j["indeterminate"] = r.indeterminate;
  j["P"] = r.P;
  j["ci_low"] = r.ci_low;
  j["ci_high"] = r.ci_high;
  j["low_quality"] = r.low_quality;
  j["master_seed"] = r.master_seed;
  j["T"] = r.T;
  j["lambda_max"] = r.lambda_max;
  std::vector<std::string> v;
  for (auto x : r.verdicts) v.push_back(to_string(x));
  j["verdicts"] = v;
  os << j.dump() << "\n";
}

ScalingR scaling_R(double P, double lo, double hi, std::size_t L) {
  if (L == 0) throw std::invalid_argument("scaling_R: L must be positive");
  ScalingR r;
  const double e = 1.0 / static_cast<double>(L);
  if (P <= 0.0) {
    r.boundary = true;
    r.ci_high = std::pow(hi, e);
    r.sigma = r.ci_high / 2.0;
    return r;
  }
  r.R = std::pow(P, e);
  r.ci_low = std::pow(std::max(lo, 0.0), e);
  r.ci_high = std::pow(std::min(hi, 1.0), e);
  r.sigma = (r.ci_high - r.ci_low) / (2.0 * 1.96);
  return r;
}

ScalingR scaling_R(const ChaosEnsembleRecord& rec) {
  return scaling_R(rec.P, rec.ci_low, rec.ci_high, rec.L);
}

bool mutually_consistent(std::span<const ScalingR> rs, double k) {
  for (std::size_t i = 0; i < rs.size(); ++i)
    for (std::size_t j = i + 1; j < rs.size(); ++j) {
      const double s = std::hypot(rs[i].sigma, rs[j].sigma);
      if (std::abs(rs[i].R - rs[j].R) > k * s) return false;
    }
  return true;
}

double q_transform(double P0) {
  if (!(P0 >= 0.0 && P0 <= 1.0)) throw std::invalid_argument("q_transform: P0 outside [0, 1]");
  if (P0 == 1.0) return std::numeric_limits<double>::infinity();
  return P0 / (1.0 - P0);
}

double q_inverse(double Q) {
  if (!(Q >= 0.0)) throw std::invalid_argument("q_inverse: Q must be non-negative");
  if (std::isinf(Q)) return 1.0;
  return Q / (1.0 + Q);
}

// ---------------------------------------------------------------------------

double ScalingFit::q(double x) const {
  return 1.0 / (std::pow(x, zeta) / c1 + std::pow(x, eta) / c2);
}

double ScalingFit::predict(double rho, double W) const {
  return std::pow(W, -alpha) * q(rho / std::pow(W, alpha));
}

namespace {

// Residuals of log Q for parameters (alpha, zeta, eta, ln c1, ln c2).
struct CollapseFunctor {
  using Scalar = double;
  using InputType = Eigen::VectorXd;
  using ValueType = Eigen::VectorXd;
  using JacobianType = Eigen::MatrixXd;
  enum { InputsAtCompileTime = Eigen::Dynamic, ValuesAtCompileTime = Eigen::Dynamic };

  std::vector<double> lr, lw, lq;
  int inputs() const { return 5; }
  int values() const { return static_cast<int>(lq.size()); }

  int operator()(const Eigen::VectorXd& p, Eigen::VectorXd& f) const {
    for (std::size_t i = 0; i < lq.size(); ++i) {
      const double lx = lr[i] - p[0] * lw[i];
      // log(x^zeta / c1 + x^eta / c2) via log-sum-exp
      const double a = p[1] * lx - p[3], b = p[2] * lx - p[4];
      const double m = std::max(a, b);
      const double lse = m + std::log(std::exp(a - m) + std::exp(b - m));
      f[i] = (-p[0] * lw[i] - lse) - lq[i];
    }
    return 0;
  }
};

}  // namespace

ScalingFit collapse_fit(std::span<const QPoint> points) {
  std::vector<double> Ws;
  CollapseFunctor fn;
  for (const auto& p : points) {
    if (!(p.Q > 0.0) || !std::isfinite(p.Q) || !(p.rho > 0.0) || !(p.W > 0.0)) continue;
    fn.lr.push_back(std::log(p.rho));
    fn.lw.push_back(std::log(p.W));
    fn.lq.push_back(std::log(p.Q));
    if (std::find(Ws.begin(), Ws.end(), p.W) == Ws.end()) Ws.push_back(p.W);
  }
  if (Ws.size() < 3)
    throw std::invalid_argument("collapse_fit: need at least 3 distinct W values");
  for (double W : Ws) {
    const auto n = std::count(fn.lw.begin(), fn.lw.end(), std::log(W));
    if (n < 5) throw std::invalid_argument("collapse_fit: need at least 5 rho values per W");
  }

  // Multistart over the exponents; constants from the data scale.
  const double lq_mean = std::accumulate(fn.lq.begin(), fn.lq.end(), 0.0) / fn.lq.size();
  Eigen::VectorXd best;
  double best_cost = std::numeric_limits<double>::infinity();
  for (double a0 : {1.0, 2.0})
    for (double z0 : {1.0, 3.0})
      for (double e0 : {4.0, 7.0})
        for (double s : {-10.0, 0.0, 10.0}) {
          Eigen::VectorXd p(5);
          p << a0, z0, e0, lq_mean + s, lq_mean - 2.0 * s;
          Eigen::NumericalDiff<CollapseFunctor> nd(fn);
          Eigen::LevenbergMarquardt<Eigen::NumericalDiff<CollapseFunctor>> lm(nd);
          lm.parameters.maxfev = 4000;
          lm.minimize(p);
          Eigen::VectorXd f(fn.values());
          fn(p, f);
          const double cost = f.squaredNorm();
          if (std::isfinite(cost) && cost < best_cost) {
            best_cost = cost;
            best = p;
          }
        }
  if (best.size() == 0) throw NumericalError("collapse_fit: no start converged");
  if (best[1] > best[2]) {  // the two branches are interchangeable; keep zeta < eta
    std::swap(best[1], best[2]);
    std::swap(best[3], best[4]);
  }

  ScalingFit fit;
  fit.alpha = best[0];
  fit.zeta = best[1];
  fit.eta = best[2];
  fit.c1 = std::exp(best[3]);
  fit.c2 = std::exp(best[4]);
  fit.points = fn.lq.size();
  fit.residual = std::sqrt(best_cost / fn.lq.size());

  // Scaled ranges must overlap across W.
  double lo = -std::numeric_limits<double>::infinity(), hi = std::numeric_limits<double>::infinity();
  for (double W : Ws) {
    double mn = std::numeric_limits<double>::infinity(), mx = -mn;
    for (std::size_t i = 0; i < fn.lq.size(); ++i)
      if (fn.lw[i] == std::log(W)) {
        const double lx = fn.lr[i] - fit.alpha * fn.lw[i];
        mn = std::min(mn, lx);
        mx = std::max(mx, lx);
      }
    lo = std::max(lo, mn);
    hi = std::min(hi, mx);
  }
  if (!(lo < hi)) throw std::invalid_argument("collapse_fit: scaled ranges do not overlap");

  Eigen::NumericalDiff<CollapseFunctor> nd(fn);
  Eigen::MatrixXd J(fn.values(), 5);
  nd.df(best, J);
  const double dof = std::max<double>(1.0, static_cast<double>(fn.lq.size()) - 5.0);
  const Eigen::MatrixXd cov = (J.transpose() * J).inverse() * (best_cost / dof);
  fit.alpha_err = std::sqrt(cov(0, 0));
  fit.zeta_err = std::sqrt(cov(1, 1));
  fit.eta_err = std::sqrt(cov(2, 2));
  fit.log_c1_err = std::sqrt(cov(3, 3));
  fit.log_c2_err = std::sqrt(cov(4, 4));
  if (!(fit.zeta > 0.0 && fit.eta > 0.0))
    throw NumericalError("collapse_fit: non-positive asymptotic exponent");
  return fit;
}

void write_collapse_csv(std::ostream& os, std::span<const QPoint> points, const ScalingFit& fit) {
  os << "rho,W,Q,x,QW_alpha,q_fit\n" << std::setprecision(17);
  for (const auto& p : points) {
    const double x = p.rho / std::pow(p.W, fit.alpha);
    os << p.rho << ',' << p.W << ',' << p.Q << ',' << x << ',' << p.Q * std::pow(p.W, fit.alpha)
       << ',' << fit.q(x) << "\n";
  }
}

double p_chaos_fixed_norm(double L, double norm, double W, const ScalingFit& fit, double L0) {
  if (!(L > 0.0 && norm > 0.0 && W > 0.0 && L0 > 0.0 && fit.c1 > 0.0))
    throw std::invalid_argument("p_chaos_fixed_norm: arguments must be positive");
  return std::pow(L, 1.0 - fit.zeta) * std::pow(norm, fit.zeta) *
         std::pow(W, fit.alpha * (1.0 - fit.zeta)) / (fit.c1 * L0);
}

}  // namespace dnls
