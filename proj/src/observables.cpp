#include "dnls/observables.hpp"

#include <algorithm>
#include <cmath>
#include <iomanip>
#include <limits>
#include <numeric>
#include <ostream>
#include <stdexcept>

#include <boost/math/distributions/students_t.hpp>

#include "dnls/rng.hpp"

namespace dnls {

Moments moments(std::span<const cplx> psi) {
  Moments m;
  double sx = 0.0, s4 = 0.0;
  for (std::size_t x = 0; x < psi.size(); ++x) {
    const double p = std::norm(psi[x]);
    m.norm += p;
    sx += static_cast<double>(x) * p;
    s4 += p * p;
  }
  if (!(m.norm > 0.0)) throw std::invalid_argument("moments: zero-norm state");
  m.m1 = sx / m.norm;
  double s2 = 0.0;
  for (std::size_t x = 0; x < psi.size(); ++x) {
    const double d = static_cast<double>(x) - m.m1;
    s2 += d * d * std::norm(psi[x]);
  }
  m.m2 = s2 / m.norm;
  m.participation = m.norm * m.norm / s4;
  return m;
}

Moments moments(const WavepacketState& state) { return moments(std::span<const cplx>(state.psi)); }

double flat_region_density(const Moments& m) { return m.norm / m.participation; }

MomentSeries MomentSeries::from_record(const TrajectoryRecord& rec) {
  MomentSeries s;
  s.norm = rec.initial_norm;
  for (const auto& o : rec.observations) {
    s.times.push_back(o.t);
    s.m1.push_back(o.m1);
    s.m2.push_back(o.m2);
    s.participation.push_back(o.participation);
  }
  return s;
}

namespace {

struct LineFit {
  double slope = 0.0, intercept = 0.0, slope_se = 0.0;
  std::size_t n = 0;
};

LineFit ols(std::span<const double> x, std::span<const double> y) {
  LineFit f;
  f.n = x.size();
  const double n = static_cast<double>(x.size());
  const double mx = std::accumulate(x.begin(), x.end(), 0.0) / n;
  const double my = std::accumulate(y.begin(), y.end(), 0.0) / n;
  double sxx = 0.0, sxy = 0.0;
  for (std::size_t i = 0; i < x.size(); ++i) {
    sxx += (x[i] - mx) * (x[i] - mx);
    sxy += (x[i] - mx) * (y[i] - my);
  }
  f.slope = sxy / sxx;
  f.intercept = my - f.slope * mx;
  double rss = 0.0;
  for (std::size_t i = 0; i < x.size(); ++i) {
    const double r = y[i] - f.intercept - f.slope * x[i];
    rss += r * r;
  }
  f.slope_se = x.size() > 2 ? std::sqrt(rss / (n - 2.0) / sxx) : 0.0;
  return f;
}

double t_quantile_975(std::size_t dof) {
  boost::math::students_t dist(static_cast<double>(std::max<std::size_t>(dof, 1)));
  return boost::math::quantile(dist, 0.975);
}

// Log-uniform resampling of (log t, log m2) over the window.
void resample(std::span<const double> t, std::span<const double> m2, FitWindow w,
              std::vector<double>& lx, std::vector<double>& ly) {
  if (t.size() != m2.size()) throw std::invalid_argument("exponent fit: series length mismatch");
  if (!(w.t_min > 0.0) || !(w.t_max > w.t_min))
    throw std::invalid_argument("exponent fit: degenerate window");
  std::vector<double> xs, ys;
  for (std::size_t i = 0; i < t.size(); ++i) {
    if (t[i] < w.t_min || t[i] > w.t_max) continue;
    if (!(m2[i] > 0.0)) throw std::invalid_argument("exponent fit: M2 must be positive in window");
    if (!xs.empty() && std::log(t[i]) <= xs.back())
      throw std::invalid_argument("exponent fit: times must increase");
    xs.push_back(std::log(t[i]));
    ys.push_back(std::log(m2[i]));
  }
  if (xs.size() < 10) throw std::invalid_argument("exponent fit: fewer than 10 points in window");
  const std::size_t k = xs.size();
  lx.resize(k);
  ly.resize(k);
  std::size_t j = 0;
  for (std::size_t i = 0; i < k; ++i) {
    const double x = xs.front() + (xs.back() - xs.front()) * static_cast<double>(i) /
                                      static_cast<double>(k - 1);
    while (j + 2 < k && xs[j + 1] < x) ++j;
    const double a = (x - xs[j]) / (xs[j + 1] - xs[j]);
    lx[i] = x;
    ly[i] = (1.0 - a) * ys[j] + a * ys[j + 1];
  }
}

ExponentFit fit_core(std::span<const double> t, std::span<const double> m2, FitWindow w) {
  std::vector<double> lx, ly;
  resample(t, m2, w, lx, ly);
  const LineFit f = ols(lx, ly);
  ExponentFit r;
  r.exponent = f.slope;
  r.intercept = f.intercept;
  r.std_error = f.slope_se;
  const double h = t_quantile_975(f.n - 2) * f.slope_se;
  r.ci_low = f.slope - h;
  r.ci_high = f.slope + h;
  r.diffusion = std::exp(3.0 * f.intercept);
  r.points = f.n;
  r.window = w;
  return r;
}

}  // namespace

ExponentFit fit_subdiffusion_exponent(std::span<const double> t, std::span<const double> m2,
                                      FitWindow window) {
  return fit_core(t, m2, window);
}

ExponentFit fit_subdiffusion_exponent(const std::vector<MomentSeries>& ensemble, FitWindow window,
                                      std::size_t bootstrap_samples, std::uint64_t seed) {
  if (ensemble.empty()) throw std::invalid_argument("exponent fit: empty ensemble");
  const EnsembleMoments avg = ensemble_average(ensemble);
  ExponentFit fit = fit_core(avg.times, avg.m2_mean, window);
  fit.realizations = ensemble.size();
  if (ensemble.size() < 2 || bootstrap_samples < 2) return fit;

  CounterRng rng(seed);
  const std::size_t R = ensemble.size(), T = avg.times.size();
  std::vector<double> slopes;
  slopes.reserve(bootstrap_samples);
  std::vector<double> mean(T);
  for (std::size_t b = 0; b < bootstrap_samples; ++b) {
    std::fill(mean.begin(), mean.end(), 0.0);
    for (std::size_t r = 0; r < R; ++r) {
      const auto& s = ensemble[rng.below(R)];
      for (std::size_t i = 0; i < T; ++i) mean[i] += s.m2[i] / static_cast<double>(R);
    }
    slopes.push_back(fit_core(avg.times, mean, window).exponent);
  }
  std::sort(slopes.begin(), slopes.end());
  const auto pick = [&](double q) {
    const double pos = q * static_cast<double>(slopes.size() - 1);
    const auto i = static_cast<std::size_t>(pos);
    const double a = pos - static_cast<double>(i);
    return i + 1 < slopes.size() ? (1.0 - a) * slopes[i] + a * slopes[i + 1] : slopes[i];
  };
  const double m = std::accumulate(slopes.begin(), slopes.end(), 0.0) / slopes.size();
  double v = 0.0;
  for (double s : slopes) v += (s - m) * (s - m);
  fit.std_error = std::sqrt(v / static_cast<double>(slopes.size() - 1));
  fit.ci_low = std::min(pick(0.025), fit.exponent);
  fit.ci_high = std::max(pick(0.975), fit.exponent);
  fit.bootstrap = true;
  return fit;
}

EnsembleMoments ensemble_average(const std::vector<MomentSeries>& ensemble) {
  if (ensemble.empty()) throw std::invalid_argument("ensemble_average: empty ensemble");
  EnsembleMoments e;
  e.times = ensemble.front().times;
  e.realizations = ensemble.size();
  const std::size_t T = e.times.size();
  for (const auto& s : ensemble)
    if (s.times.size() != T || s.m2.size() != T)
      throw std::invalid_argument("ensemble_average: realizations use different schedules");
  e.m2_mean.assign(T, 0.0);
  e.m2_stderr.assign(T, 0.0);
  const double R = static_cast<double>(ensemble.size());
  for (const auto& s : ensemble)
    for (std::size_t i = 0; i < T; ++i) e.m2_mean[i] += s.m2[i];
  for (auto& v : e.m2_mean) v /= R;
  if (ensemble.size() > 1) {
    for (const auto& s : ensemble)
      for (std::size_t i = 0; i < T; ++i)
        e.m2_stderr[i] += (s.m2[i] - e.m2_mean[i]) * (s.m2[i] - e.m2_mean[i]);
    for (auto& v : e.m2_stderr) v = std::sqrt(v / (R - 1.0) / R);
  }
  return e;
}

std::vector<double> running_exponent(std::span<const double> t, std::span<const double> m2) {
  const std::size_t n = t.size();
  std::vector<double> out(n, std::numeric_limits<double>::quiet_NaN());
  if (n < 2 || m2.size() != n) return out;
  const auto slope = [&](std::size_t a, std::size_t b) {
    if (!(t[a] > 0.0) || !(m2[a] > 0.0) || !(m2[b] > 0.0) || t[b] <= t[a])
      return std::numeric_limits<double>::quiet_NaN();
    return std::log(m2[b] / m2[a]) / std::log(t[b] / t[a]);
  };
  out[0] = slope(0, 1);
  out[n - 1] = slope(n - 2, n - 1);
  for (std::size_t i = 1; i + 1 < n; ++i) out[i] = slope(i - 1, i + 1);
  return out;
}

void write_ensemble_csv(std::ostream& os, const EnsembleMoments& e) {
  const auto ex = running_exponent(e.times, e.m2_mean);
  os << "t,M2_mean,M2_stderr,exponent_running\n" << std::setprecision(12);
  for (std::size_t i = 0; i < e.times.size(); ++i)
    os << e.times[i] << ',' << e.m2_mean[i] << ',' << e.m2_stderr[i] << ',' << ex[i] << '\n';
}

BetaScaling beta_scaling_check(std::span<const double> betas, std::span<const double> m2_at_t) {
  if (betas.size() != m2_at_t.size())
    throw std::invalid_argument("beta_scaling_check: length mismatch");
  BetaScaling out;
  std::vector<double> lx, ly;
  for (std::size_t i = 0; i < betas.size(); ++i) {
    if (!(betas[i] > 0.0) || !(m2_at_t[i] > 0.0)) {
      ++out.excluded;
      continue;
    }
    out.betas_used.push_back(betas[i]);
    lx.push_back(std::log(betas[i]));
    ly.push_back(std::log(m2_at_t[i]));
  }
  if (lx.size() < 3) throw std::invalid_argument("beta_scaling_check: need >= 3 positive beta values");
  const LineFit f = ols(lx, ly);
  out.slope = f.slope;
  out.std_error = f.slope_se;
  const double h = t_quantile_975(f.n - 2) * f.slope_se;
  out.ci_low = f.slope - h;
  out.ci_high = f.slope + h;
  out.consistent_with_four_thirds = out.ci_low <= 4.0 / 3.0 && 4.0 / 3.0 <= out.ci_high;
  return out;
}

TailFront tail_front(std::span<const cplx> psi, double threshold) {
  double peak = 0.0;
  for (const auto& z : psi) peak = std::max(peak, std::norm(z));
  if (!(threshold > 0.0) || !(threshold < peak))
    throw std::invalid_argument("tail_front: threshold must lie in (0, max |psi|^2)");
  const Moments m = moments(psi);
  TailFront f;
  std::size_t first = psi.size(), last = 0;
  for (std::size_t x = 0; x < psi.size(); ++x)
    if (std::norm(psi[x]) > threshold) {
      first = std::min(first, x);
      last = x;
    }
  f.left_site = first;
  f.right_site = last;
  f.left = m.m1 - static_cast<double>(first);
  f.right = static_cast<double>(last) - m.m1;
  return f;
}

std::vector<cplx> mode_forcing(std::span<const double> times,
                               const std::vector<std::vector<cplx>>& c_series,
                               const EigenSystem& es, const OverlapTable& overlaps, int n,
                               double beta) {
  if (times.size() != c_series.size())
    throw std::invalid_argument("mode_forcing: one amplitude vector per time is required");
  if (n < 0 || static_cast<std::size_t>(n) >= overlaps.size())
    throw std::invalid_argument("mode_forcing: overlaps missing for mode " + std::to_string(n));
  for (const auto& c : c_series)
    if (c.size() != es.size())
      throw std::invalid_argument("mode_forcing: amplitude vector does not match eigensystem");
  const auto& modes = overlaps.mode_set();
  for (int g : modes)
    if (g < 0 || static_cast<std::size_t>(g) >= es.size())
      throw std::invalid_argument("mode_forcing: overlap table built on another eigensystem");

  std::vector<cplx> F(times.size());
  if (beta == 0.0) return F;
  const auto& row = overlaps.row(n);
  const double En = es.energies[modes[n]];
  for (std::size_t k = 0; k < times.size(); ++k) {
    const auto& c = c_series[k];
    cplx acc = 0.0;
    for (const auto& e : row) {
      const int g1 = modes[e.m1], g2 = modes[e.m2], g3 = modes[e.m3];
      const double phase = (En + es.energies[g1] - es.energies[g2] - es.energies[g3]) * times[k];
      acc += e.value * std::conj(c[g1]) * c[g2] * c[g3] * std::polar(1.0, phase);
    }
    F[k] = beta * acc;
  }
  return F;
}

Autocorrelation noise_autocorrelation(std::span<const cplx> f, double dt, std::size_t max_lag) {
  if (f.size() < 2) throw std::invalid_argument("noise_autocorrelation: series too short");
  if (!(dt > 0.0)) throw std::invalid_argument("noise_autocorrelation: dt must be positive");
  max_lag = std::min(max_lag, f.size() - 1);
  Autocorrelation a;
  std::vector<cplx> c(max_lag + 1);
  for (std::size_t k = 0; k <= max_lag; ++k) {
    cplx s = 0.0;
    for (std::size_t i = 0; i + k < f.size(); ++i) s += std::conj(f[i]) * f[i + k];
    c[k] = s / static_cast<double>(f.size() - k);
  }
  a.c0 = c[0].real();
  if (!(a.c0 > 0.0)) throw std::invalid_argument("noise_autocorrelation: zero series");
  a.lags.resize(max_lag + 1);
  a.values.resize(max_lag + 1);
  for (std::size_t k = 0; k <= max_lag; ++k) {
    a.lags[k] = static_cast<double>(k) * dt;
    a.values[k] = c[k] / a.c0;
  }
  for (std::size_t k = 1; k <= max_lag; ++k)
    a.integral += 0.5 * dt * (a.values[k - 1].real() + a.values[k].real());

  a.correlation_time = std::numeric_limits<double>::infinity();
  std::size_t k_c = 0;
  for (std::size_t k = 1; k <= max_lag; ++k)
    if (std::abs(a.values[k]) < std::exp(-1.0)) {
      a.correlation_time = a.lags[k];
      k_c = k;
      break;
    }
  if (k_c == 0) {
    a.window_short = true;
    return a;
  }
  a.window_short = a.lags.back() < 10.0 * a.correlation_time;
  const std::size_t beyond = 5 * k_c;
  if (beyond < max_lag) {
    double tail = 0.0;
    for (std::size_t k = beyond; k <= max_lag; ++k) tail = std::max(tail, std::abs(a.values[k]));
    a.decaying = tail < 0.2;
  }
  return a;
}

}  // namespace dnls
