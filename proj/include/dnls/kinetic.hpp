#pragma once

#include <cstddef>
#include <vector>

#include "dnls/disorder.hpp"

namespace dnls {

/// Exact propagator exp(-i dt K) of the hopping operator K = -J (shift + shift^T)
/// on a chain of n sites, applied in K's eigenbasis: plane waves for rings,
/// and for open chains the plane waves of the odd extension onto a ring of
/// 2(n+1) sites, whose restriction is the discrete sine basis. Plans are
/// created with FFTW_ESTIMATE so results are reproducible bit-for-bit between
/// runs.
///
/// `batch` contiguous vectors of length n are transformed per call. Not safe
/// for concurrent calls on one instance.
class KineticPropagator {
 public:
  KineticPropagator(std::size_t n, double J, double dt, Boundary boundary, std::size_t batch = 1);
  ~KineticPropagator();
  KineticPropagator(const KineticPropagator&) = delete;
  KineticPropagator& operator=(const KineticPropagator&) = delete;

  void apply(cplx* data) const;

  /// True when 2(n+1) has no prime factor above 7, i.e. the open-chain
  /// transform is fast.
  static bool fast_size(std::size_t n);

  std::size_t size() const { return n_; }
  std::size_t batch() const { return batch_; }

  /// Eigenvalues of K on n sites, in transform order.
  static std::vector<double> hopping_spectrum(std::size_t n, double J, Boundary boundary);

 private:
  std::size_t n_;
  std::size_t batch_;
  Boundary boundary_;
  std::size_t m_;            // transform length
  std::vector<cplx> phase_;  // exp(-i dt lambda_k), transform normalization folded in
  cplx* work_ = nullptr;  // fftw_malloc'd, m_ * batch_
  void* forward_ = nullptr;
  void* backward_ = nullptr;
};

}  // namespace dnls
