#include "dnls/kinetic.hpp"

#include <algorithm>
#include <cmath>
#include <mutex>
#include <numbers>
#include <stdexcept>

#include <fftw3.h>

namespace dnls {

namespace {
// FFTW planning is not thread-safe; execution is.
std::mutex& planner_mutex() {
  static std::mutex m;
  return m;
}
constexpr unsigned kPlanFlags = FFTW_ESTIMATE;

}  // namespace

std::vector<double> KineticPropagator::hopping_spectrum(std::size_t n, double J, Boundary boundary) {
  std::vector<double> lambda(n);
  for (std::size_t k = 0; k < n; ++k) {
    if (boundary == Boundary::open)
      lambda[k] = -2.0 * J * std::cos(std::numbers::pi * static_cast<double>(k + 1) /
                                      static_cast<double>(n + 1));
    else
      lambda[k] = -2.0 * J * std::cos(2.0 * std::numbers::pi * static_cast<double>(k) /
                                      static_cast<double>(n));
  }
  return lambda;
}

bool KineticPropagator::fast_size(std::size_t n) {
  std::size_t m = n + 1;
  for (std::size_t p : {2, 3, 5, 7})
    while (m % p == 0) m /= p;
  return m == 1;
}

KineticPropagator::KineticPropagator(std::size_t n, double J, double dt, Boundary boundary,
                                     std::size_t batch)
    : n_(n), batch_(batch), boundary_(boundary) {
  if (n == 0 || batch == 0) throw std::invalid_argument("KineticPropagator: empty transform");
  if (boundary == Boundary::periodic && n < 3)
    throw std::invalid_argument("KineticPropagator: periodic ring needs n >= 3");

  m_ = boundary == Boundary::open ? 2 * (n + 1) : n;
  const auto lambda = hopping_spectrum(m_, J, Boundary::periodic);
  phase_.resize(m_);
  for (std::size_t k = 0; k < m_; ++k)
    phase_[k] = std::polar(1.0 / static_cast<double>(m_), -dt * lambda[k]);

  auto* buf = fftw_alloc_complex(m_ * batch);
  if (!buf) throw std::bad_alloc();
  work_ = reinterpret_cast<cplx*>(buf);
  const int mi = static_cast<int>(m_);
  std::lock_guard lock(planner_mutex());
  forward_ = fftw_plan_many_dft(1, &mi, static_cast<int>(batch), buf, nullptr, 1, mi, buf, nullptr,
                                1, mi, FFTW_FORWARD, kPlanFlags);
  backward_ = fftw_plan_many_dft(1, &mi, static_cast<int>(batch), buf, nullptr, 1, mi, buf,
                                 nullptr, 1, mi, FFTW_BACKWARD, kPlanFlags);
  if (!forward_ || !backward_) {
    fftw_free(buf);
    throw std::runtime_error("KineticPropagator: FFTW planning failed");
  }
}

KineticPropagator::~KineticPropagator() {
  std::lock_guard lock(planner_mutex());
  if (forward_) fftw_destroy_plan(static_cast<fftw_plan>(forward_));
  if (backward_) fftw_destroy_plan(static_cast<fftw_plan>(backward_));
  fftw_free(work_);
}

void KineticPropagator::apply(cplx* data) const {
  const bool open = boundary_ == Boundary::open;
  for (std::size_t b = 0; b < batch_; ++b) {
    const cplx* v = data + b * n_;
    cplx* w = work_ + b * m_;
    if (open) {
      // Odd extension: w = (0, v, 0, -reverse(v)).
      w[0] = 0.0;
      w[n_ + 1] = 0.0;
      for (std::size_t x = 0; x < n_; ++x) {
        w[x + 1] = v[x];
        w[m_ - 1 - x] = -v[x];
      }
    } else {
      std::copy(v, v + n_, w);
    }
  }
  fftw_execute(static_cast<fftw_plan>(forward_));
  for (std::size_t b = 0; b < batch_; ++b) {
    cplx* w = work_ + b * m_;
    for (std::size_t k = 0; k < m_; ++k) {
      const double a = w[k].real(), b = w[k].imag();
      const double c = phase_[k].real(), d = phase_[k].imag();
      w[k] = cplx(a * c - b * d, a * d + b * c);
    }
  }
  fftw_execute(static_cast<fftw_plan>(backward_));
  for (std::size_t b = 0; b < batch_; ++b) {
    cplx* v = data + b * n_;
    const cplx* w = work_ + b * m_ + (open ? 1 : 0);
    std::copy(w, w + n_, v);
  }
}

}  // namespace dnls
