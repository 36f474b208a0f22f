#pragma once

// Thin RAII layer over FFTW3 for real-input transforms. FFTW's planner is not
// re-entrant, so plan creation and destruction are serialized; execution is
// not.

#include <fftw3.h>

#include <complex>
#include <cstring>
#include <memory>
#include <mutex>
#include <span>
#include <vector>

namespace qubit::fft {

namespace detail {

inline std::mutex& planner_mutex() {
  static std::mutex m;
  return m;
}

struct PlanDeleter {
  void operator()(fftw_plan_s* p) const {
    std::lock_guard<std::mutex> lock(planner_mutex());
    fftw_destroy_plan(p);
  }
};
using Plan = std::unique_ptr<fftw_plan_s, PlanDeleter>;

struct FreeDeleter {
  void operator()(void* p) const { fftw_free(p); }
};

template <typename T>
std::unique_ptr<T[], FreeDeleter> alloc(size_t n) {
  return std::unique_ptr<T[], FreeDeleter>(static_cast<T*>(fftw_malloc(sizeof(T) * n)));
}

}  // namespace detail

/// Unnormalized forward DFT of real data: X_k = sum_t x_t exp(-2 pi i k t / n),
/// k = 0 .. n/2.
inline std::vector<std::complex<double>> rfft(std::span<const double> x) {
  const size_t n = x.size();
  const size_t m = n / 2 + 1;
  auto in = detail::alloc<double>(n);
  auto out = detail::alloc<fftw_complex>(m);
  detail::Plan plan;
  {
    std::lock_guard<std::mutex> lock(detail::planner_mutex());
    plan.reset(fftw_plan_dft_r2c_1d(static_cast<int>(n), in.get(), out.get(), FFTW_ESTIMATE));
  }
  std::memcpy(in.get(), x.data(), sizeof(double) * n);
  fftw_execute(plan.get());
  std::vector<std::complex<double>> result(m);
  for (size_t k = 0; k < m; ++k) result[k] = {out[k][0], out[k][1]};
  return result;
}

/// Inverse of rfft including the 1/n normalization.
inline std::vector<double> irfft(std::span<const std::complex<double>> spec, size_t n) {
  const size_t m = n / 2 + 1;
  auto in = detail::alloc<fftw_complex>(m);
  auto out = detail::alloc<double>(n);
  detail::Plan plan;
  {
    std::lock_guard<std::mutex> lock(detail::planner_mutex());
    plan.reset(fftw_plan_dft_c2r_1d(static_cast<int>(n), in.get(), out.get(), FFTW_ESTIMATE));
  }
  for (size_t k = 0; k < m; ++k) {
    in[k][0] = spec[k].real();
    in[k][1] = spec[k].imag();
  }
  fftw_execute(plan.get());
  std::vector<double> result(out.get(), out.get() + n);
  for (auto& v : result) v /= static_cast<double>(n);
  return result;
}

/// Smallest size >= n whose only prime factors are 2, 3 and 5.
inline size_t good_size(size_t n) {
  if (n < 2) return 1;
  for (size_t m = n;; ++m) {
    size_t r = m;
    for (size_t p : {2u, 3u, 5u}) {
      while (r % p == 0) r /= p;
    }
    if (r == 1) return m;
  }
}

}  // namespace qubit::fft
