#include "dnls/dynamics.hpp"

#include <algorithm>
#include <cmath>
#include <iomanip>
#include <numbers>
#include <ostream>
#include <sstream>
#include <stdexcept>

#include <boost/numeric/odeint.hpp>

#include "dnls/errors.hpp"
#include "dnls/observables.hpp"
#include "dnls/rng.hpp"

namespace dnls {

double WavepacketState::norm() const {
  double n = 0.0;
  for (const auto& z : psi) n += std::norm(z);
  return n;
}

void WavepacketState::validate() const {
  if (!realization) throw std::invalid_argument("WavepacketState: missing disorder realization");
  if (psi.size() != realization->L)
    throw std::invalid_argument("WavepacketState: field size does not match lattice size");
  params.validate();
}

WavepacketState delta_state(const ModelParams& p, std::shared_ptr<const DisorderRealization> r,
                            std::size_t site, double norm) {
  if (!r || site >= r->L) throw std::invalid_argument("delta_state: site outside lattice");
  WavepacketState s{0.0, std::vector<cplx>(r->L), p, std::move(r)};
  s.psi[site] = std::sqrt(norm);
  return s;
}

WavepacketState mode_state(const ModelParams& p, std::shared_ptr<const DisorderRealization> r,
                           const EigenSystem& es, std::size_t mode, double norm) {
  if (!r || es.size() != r->L || mode >= es.size())
    throw std::invalid_argument("mode_state: eigensystem does not match lattice");
  WavepacketState s{0.0, std::vector<cplx>(r->L), p, std::move(r)};
  const double a = std::sqrt(norm);
  for (std::size_t x = 0; x < s.psi.size(); ++x)
    s.psi[x] = a * es.modes(static_cast<Eigen::Index>(x), static_cast<Eigen::Index>(mode));
  return s;
}

WavepacketState patch_state(const ModelParams& p, std::shared_ptr<const DisorderRealization> r,
                            std::size_t first, std::size_t width, double norm,
                            std::uint64_t phase_seed) {
  if (!r || width == 0 || first + width > r->L)
    throw std::invalid_argument("patch_state: patch outside lattice");
  WavepacketState s{0.0, std::vector<cplx>(r->L), p, std::move(r)};
  const double a = std::sqrt(norm / static_cast<double>(width));
  CounterRng rng(phase_seed);
  for (std::size_t x = first; x < first + width; ++x) {
    const double phi = phase_seed != 0 ? 2.0 * std::numbers::pi * rng.uniform() : 0.0;
    s.psi[x] = std::polar(a, phi);
  }
  return s;
}

// ---------------------------------------------------------------------------

SplitStepIntegrator::SplitStepIntegrator(const ModelParams& params,
                                         std::shared_ptr<const DisorderRealization> r, double dt,
                                         SplitStepOptions options)
    : params_(params), realization_(std::move(r)), dt_(dt), options_(options) {
  params_.validate();
  if (!realization_) throw std::invalid_argument("SplitStepIntegrator: missing realization");
  if (!(dt > 0.0)) throw std::invalid_argument("SplitStepIntegrator: dt must be positive");
  L_ = realization_->L;
  if (params_.boundary == Boundary::periodic && L_ < 3)
    throw std::invalid_argument("SplitStepIntegrator: periodic lattice needs L >= 3");
  for (int k = 0; k < 2; ++k) {
    const double h = k == 0 ? dt_ : 0.5 * dt_;
    disorder_phase_[k].resize(L_);
    for (std::size_t x = 0; x < L_; ++x)
      disorder_phase_[k][x] = std::polar(1.0, -h * realization_->epsilons[x]);
  }
}

void SplitStepIntegrator::init_window(const WavepacketState& s) {
  lo_ = 0;
  hi_ = L_;
  const std::size_t pad = options_.window_margin + options_.window_chunk;
  if (options_.active_window && params_.boundary == Boundary::open && L_ > 2 * pad) {
    tol2_ = options_.window_tolerance * options_.window_tolerance * s.norm();
    const double tol2 = tol2_;
    std::size_t first = L_, last = 0;
    for (std::size_t x = 0; x < L_; ++x)
      if (std::norm(s.psi[x]) > tol2) {
        first = std::min(first, x);
        last = x;
      }
    if (first < L_) {
      lo_ = first > pad ? first - pad : 0;
      hi_ = std::min(L_, last + 1 + pad);
      round_window();
    }
  }
  window_ready_ = true;
}

void SplitStepIntegrator::round_window() {
  std::size_t n = hi_ - lo_;
  while (n < L_ && !KineticPropagator::fast_size(n)) ++n;
  const std::size_t extra = n - (hi_ - lo_);
  const std::size_t up = std::min(extra, L_ - hi_);
  hi_ += up;
  lo_ -= extra - up;
}

void SplitStepIntegrator::check_window(const WavepacketState& s) {
  for (std::size_t x = lo_; x < hi_; ++x)
    if (!std::isfinite(s.psi[x].real()) || !std::isfinite(s.psi[x].imag())) {
      throw NumericalError("split step: non-finite amplitude at site " + std::to_string(x));
    }
  if (lo_ == 0 && hi_ == L_) return;
  const double tol2 = tol2_;
  const std::size_t m = std::min(options_.window_margin, hi_ - lo_);
  double left = 0.0, right = 0.0;
  for (std::size_t i = 0; i < m; ++i) {
    left = std::max(left, std::norm(s.psi[lo_ + i]));
    right = std::max(right, std::norm(s.psi[hi_ - 1 - i]));
  }
  const std::size_t before = hi_ - lo_;
  if (left > tol2 && lo_ > 0) lo_ = lo_ > options_.window_chunk ? lo_ - options_.window_chunk : 0;
  if (right > tol2 && hi_ < L_) hi_ = std::min(L_, hi_ + options_.window_chunk);
  if (hi_ - lo_ != before) round_window();
}

namespace {

// exp(-i a) for the nonlinear phase. Small arguments, the common case, use the
// Taylor series, which is exact to double precision for |a| <= 1/4.
inline cplx unit_phase(double a) {
  if (std::abs(a) > 0.25) return {std::cos(a), -std::sin(a)};
  const double a2 = a * a;
  const double c =
      1.0 + a2 * (-1.0 / 2 + a2 * (1.0 / 24 + a2 * (-1.0 / 720 + a2 * (1.0 / 40320 +
      a2 * (-1.0 / 3628800 + a2 * (1.0 / 479001600))))));
  const double s =
      a * (1.0 + a2 * (-1.0 / 6 + a2 * (1.0 / 120 + a2 * (-1.0 / 5040 + a2 * (1.0 / 362880 +
      a2 * (-1.0 / 39916800 + a2 * (1.0 / 6227020800.0)))))));
  return {c, -s};
}

}  // namespace

void SplitStepIntegrator::local(cplx* psi, bool half) const {
  const double h = half ? 0.5 * dt_ : dt_;
  const cplx* ph = disorder_phase_[half ? 1 : 0].data();
  const double hb = h * params_.beta;
  const double sigma = params_.sigma;
  for (std::size_t x = lo_; x < hi_; ++x) {
    const double re = psi[x].real(), im = psi[x].imag();
    const double a2 = re * re + im * im;
    const cplx u = unit_phase(hb * (sigma == 1.0 ? a2 : std::pow(a2, sigma)));
    const double cr = ph[x].real() * u.real() - ph[x].imag() * u.imag();
    const double ci = ph[x].real() * u.imag() + ph[x].imag() * u.real();
    psi[x] = cplx(re * cr - im * ci, re * ci + im * cr);
  }
}

const KineticPropagator& SplitStepIntegrator::kinetic() {
  const std::size_t n = hi_ - lo_;
  auto it = propagators_.find(n);
  if (it == propagators_.end())
    it = propagators_
             .emplace(n, std::make_unique<KineticPropagator>(n, params_.J, dt_, params_.boundary))
             .first;
  return *it->second;
}

void SplitStepIntegrator::advance(WavepacketState& state, std::uint64_t steps) {
  if (steps == 0) return;
  if (state.psi.size() != L_) throw std::invalid_argument("advance: state size mismatch");
  if (!window_ready_) init_window(state);
  cplx* psi = state.psi.data();
  std::size_t since_check = 0;
  local(psi, true);
  for (std::uint64_t i = 0; i < steps; ++i) {
    const KineticPropagator& k = kinetic();
    k.apply(psi + lo_);
    local(psi, i + 1 == steps);
    if (++since_check == options_.check_interval || i + 1 == steps) {
      since_check = 0;
      try {
        check_window(state);
      } catch (const NumericalError&) {
        std::ostringstream msg;
        msg << "split step produced non-finite amplitudes at t=" << std::setprecision(12)
            << state.t + static_cast<double>(i + 1) * dt_;
        throw NumericalError(msg.str());
      }
    }
  }
  steps_ += steps;
  state.t += static_cast<double>(steps) * dt_;
}

WavepacketState step_split(const WavepacketState& state, double dt) {
  state.validate();
  SplitStepOptions opts;
  opts.active_window = false;
  SplitStepIntegrator integrator(state.params, state.realization, dt, opts);
  WavepacketState next = state;
  integrator.advance(next, 1);
  return next;
}

// ---------------------------------------------------------------------------

ObservationSchedule ObservationSchedule::logarithmic(double t_first, double t_last,
                                                     int per_decade) {
  if (!(t_first > 0.0) || !(t_last >= t_first) || per_decade < 1)
    throw std::invalid_argument("logarithmic schedule: need 0 < t_first <= t_last");
  ObservationSchedule s;
  const double l0 = std::log10(t_first), l1 = std::log10(t_last);
  const auto n = static_cast<std::size_t>(std::ceil((l1 - l0) * per_decade - 1e-9));
  for (std::size_t k = 0; k <= n; ++k) {
    const double l = std::min(l1, l0 + static_cast<double>(k) / per_decade);
    s.times.push_back(std::pow(10.0, l));
  }
  if (s.times.back() != t_last) s.times.push_back(t_last);
  return s;
}

ObservationSchedule ObservationSchedule::uniform(double t_first, double t_last, std::size_t count) {
  if (count < 1 || !(t_last >= t_first)) throw std::invalid_argument("uniform schedule");
  ObservationSchedule s;
  for (std::size_t k = 0; k < count; ++k)
    s.times.push_back(count == 1 ? t_last
                                 : t_first + (t_last - t_first) * static_cast<double>(k) /
                                                 static_cast<double>(count - 1));
  return s;
}

TrajectoryRecord evolve(WavepacketState& state, double t_end, double dt,
                        const ObservationSchedule& schedule, const EvolveOptions& options) {
  state.validate();
  if (!(dt > 0.0)) throw std::invalid_argument("evolve: dt must be positive");
  if (t_end < state.t) throw std::invalid_argument("evolve: t_end precedes the current time");
  TrajectoryRecord rec;
  rec.dt = dt;
  if (t_end == state.t) return rec;

  const double t0 = state.t;
  const auto total = static_cast<std::uint64_t>(std::llround((t_end - t0) / dt));
  std::vector<std::uint64_t> marks;
  for (double t : schedule.times) {
    if (t <= t0 || t > t_end) continue;
    const auto k = static_cast<std::uint64_t>(std::llround((t - t0) / dt));
    if (k > 0 && k <= total) marks.push_back(k);
  }
  marks.push_back(total);
  std::sort(marks.begin(), marks.end());
  marks.erase(std::unique(marks.begin(), marks.end()), marks.end());
  if (marks.front() == 0) marks.erase(marks.begin());

  rec.initial_norm = state.norm();
  rec.initial_energy = energy(state);

  SplitStepIntegrator integrator(state.params, state.realization, dt, options.stepper);
  std::uint64_t done = 0;
  for (std::uint64_t k : marks) {
    integrator.advance(state, k - done);
    done = k;
    state.t = t0 + static_cast<double>(k) * dt;
    const Moments m = moments(state.psi);
    Observation ob{state.t, m.norm, energy(state), m.m1, m.m2, m.participation};
    rec.max_norm_drift =
        std::max(rec.max_norm_drift, std::abs(ob.norm - rec.initial_norm) / rec.initial_norm);
    const double de = std::abs(ob.energy - rec.initial_energy);
    rec.max_abs_energy_drift = std::max(rec.max_abs_energy_drift, de);
    rec.max_energy_drift = std::max(rec.max_energy_drift, de / std::abs(rec.initial_energy));
    rec.observations.push_back(ob);
    if (options.keep_snapshots) rec.snapshots.push_back({state.t, state.psi});
  }
  rec.steps = integrator.steps_taken();
  return rec;
}

// ---------------------------------------------------------------------------

namespace {

struct FullRhs {
  const TridiagonalHamiltonian* h;
  double beta;
  double sigma;
  void operator()(const std::vector<cplx>& psi, std::vector<cplx>& dpsi, double /*t*/) const {
    h->apply(std::span<const cplx>(psi), std::span<cplx>(dpsi));
    for (std::size_t x = 0; x < psi.size(); ++x) {
      const double a2 = std::norm(psi[x]);
      const double nl = sigma == 1.0 ? a2 : std::pow(a2, sigma);
      dpsi[x] = cplx(0.0, -1.0) * (dpsi[x] + beta * nl * psi[x]);
    }
  }
};

}  // namespace

WavepacketState reference_evolve(const WavepacketState& state, double t_end, double tol) {
  namespace odeint = boost::numeric::odeint;
  state.validate();
  if (!(tol > 0.0)) throw std::invalid_argument("reference_evolve: tol must be positive");
  if (t_end < state.t) throw std::invalid_argument("reference_evolve: t_end precedes state time");
  WavepacketState out = state;
  if (t_end == state.t) return out;

  const TridiagonalHamiltonian h = build_hamiltonian(*state.realization, state.params);
  FullRhs rhs{&h, state.params.beta, state.params.sigma};
  using stepper_t = odeint::runge_kutta_fehlberg78<std::vector<cplx>>;
  auto stepper = odeint::make_controlled(tol, tol, stepper_t());

  double t = state.t;
  double h_step = std::min(0.01, t_end - t);
  const double h_min = 1e-12 * std::max(1.0, std::abs(t_end));
  while (t < t_end) {
    if (t + h_step > t_end) h_step = t_end - t;
    const auto result = stepper.try_step(rhs, out.psi, t, h_step);
    if (result == odeint::fail) {
      if (h_step < h_min) {
        std::ostringstream msg;
        msg << "reference_evolve: step size underflow (h=" << h_step << ") at t=" << t;
        throw NumericalError(msg.str());
      }
    }
  }
  out.t = t_end;
  return out;
}

double energy(const WavepacketState& s) {
  const auto& eps = s.realization->epsilons;
  const std::size_t L = s.psi.size();
  const double J = s.params.J, beta = s.params.beta, sigma = s.params.sigma;
  double e = 0.0;
  for (std::size_t x = 0; x < L; ++x) {
    const double a2 = std::norm(s.psi[x]);
    e += eps[x] * a2;
    e += beta / (sigma + 1.0) * (sigma == 1.0 ? a2 * a2 : std::pow(a2, sigma + 1.0));
    if (x + 1 < L) e -= 2.0 * J * (s.psi[x + 1] * std::conj(s.psi[x])).real();
  }
  if (s.params.boundary == Boundary::periodic && L > 2)
    e -= 2.0 * J * (s.psi[0] * std::conj(s.psi[L - 1])).real();
  return e;
}

std::vector<cplx> project_to_modes(const WavepacketState& s, const EigenSystem& es) {
  if (s.psi.size() != es.size())
    throw std::invalid_argument("project_to_modes: state length differs from eigensystem size");
  const auto L = static_cast<Eigen::Index>(es.size());
  Eigen::Map<const Eigen::VectorXcd> psi(s.psi.data(), L);
  Eigen::VectorXcd c = es.modes.transpose().cast<cplx>() * psi;
  std::vector<cplx> out(es.size());
  for (Eigen::Index n = 0; n < L; ++n) out[n] = std::polar(1.0, es.energies[n] * s.t) * c[n];
  return out;
}

void write_snapshot(std::ostream& os, std::span<const cplx> psi) {
  os << "x,re_psi,im_psi\n" << std::setprecision(17);
  for (std::size_t x = 0; x < psi.size(); ++x)
    os << x << ',' << psi[x].real() << ',' << psi[x].imag() << '\n';
}

void write_trajectory_csv(std::ostream& os, const TrajectoryRecord& rec) {
  os << "t,N,E,M1,M2,participation\n" << std::setprecision(17);
  for (const auto& o : rec.observations)
    os << o.t << ',' << o.norm << ',' << o.energy << ',' << o.m1 << ',' << o.m2 << ','
       << o.participation << '\n';
}

}  // namespace dnls
