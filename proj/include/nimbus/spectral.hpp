#pragma once

// 2D Fourier analysis on H×W grids: transforms, radial amplitude spectra,
// cumulative spectral energy, energy-ratio cutoffs and circular low-pass masks.
//
// Conventions
//   * forward transform is unnormalized, inverse divides by H·W
//   * coefficient (u, v) has signed frequencies u' ∈ (−H/2, H/2], v' ∈ (−W/2, W/2]
//     and normalized radius r = √((u'/(H/2))² + (v'/(W/2))²), so r = 1 is the axis
//     Nyquist and the corners reach √2 on even grids
//   * "energy" is Fourier magnitude |F|, not power

#include <fftw3.h>

#include <algorithm>
#include <cmath>
#include <complex>
#include <cstddef>
#include <cstring>
#include <mutex>
#include <ostream>
#include <span>
#include <vector>

#include "nimbus/error.hpp"

namespace nimbus::spectral {

using Complex = std::complex<double>;

struct Spectrum2D {
  std::size_t rows = 0;
  std::size_t cols = 0;
  std::vector<Complex> coeffs;  // row-major, unshifted

  const Complex& at(std::size_t u, std::size_t v) const { return coeffs[u * cols + v]; }
  Complex& at(std::size_t u, std::size_t v) { return coeffs[u * cols + v]; }
};

struct SpectralProfile {
  std::vector<double> radii;       // upper edge of each shell, ascending; last == r_max
  std::vector<double> amplitude;   // mean |F| per shell (0 for empty shells)
  std::vector<double> cumulative;  // E(r): running shell totals / grand total
  std::vector<double> shell_mass;  // shell total / grand total
  std::vector<std::size_t> counts;
  bool degenerate = false;  // all-zero spectrum; cumulative forced to 1

  std::size_t size() const { return radii.size(); }
};

namespace detail {

inline std::mutex& planner_mutex() {
  static std::mutex m;
  return m;
}

struct FftwBuffer {
  explicit FftwBuffer(std::size_t n)
      : ptr(static_cast<fftw_complex*>(fftw_malloc(sizeof(fftw_complex) * std::max<std::size_t>(n, 1)))) {}
  ~FftwBuffer() { fftw_free(ptr); }
  FftwBuffer(const FftwBuffer&) = delete;
  FftwBuffer& operator=(const FftwBuffer&) = delete;
  fftw_complex* ptr;
};

inline void transform(std::size_t rows, std::size_t cols, std::vector<Complex>& data, int sign) {
  FftwBuffer in(rows * cols), out(rows * cols);
  fftw_plan plan;
  {
    std::lock_guard lock(planner_mutex());
    plan = fftw_plan_dft_2d(static_cast<int>(rows), static_cast<int>(cols), in.ptr, out.ptr, sign, FFTW_ESTIMATE);
  }
  std::memcpy(in.ptr, data.data(), sizeof(fftw_complex) * rows * cols);
  fftw_execute(plan);
  std::memcpy(data.data(), out.ptr, sizeof(fftw_complex) * rows * cols);
  std::lock_guard lock(planner_mutex());
  fftw_destroy_plan(plan);
}

}  // namespace detail

inline int signed_frequency(std::size_t index, std::size_t n) {
  const auto i = static_cast<long>(index);
  const auto half = static_cast<long>(n / 2);
  return static_cast<int>(i <= half ? i : i - static_cast<long>(n));
}

/// Normalized radius of coefficient (u, v) on a rows×cols grid.
inline double normalized_radius(std::size_t u, std::size_t v, std::size_t rows, std::size_t cols) {
  const double fu = signed_frequency(u, rows) / (rows / 2.0);
  const double fv = signed_frequency(v, cols) / (cols / 2.0);
  return std::sqrt(fu * fu + fv * fv);
}

/// Radius of every coefficient, row-major.
inline std::vector<double> radius_grid(std::size_t rows, std::size_t cols) {
  std::vector<double> r(rows * cols);
  for (std::size_t u = 0; u < rows; ++u)
    for (std::size_t v = 0; v < cols; ++v) r[u * cols + v] = normalized_radius(u, v, rows, cols);
  return r;
}

inline double max_radius(std::size_t rows, std::size_t cols) {
  const auto r = radius_grid(rows, cols);
  return *std::max_element(r.begin(), r.end());
}

template <class T>
Spectrum2D fft2(std::span<const T> x, std::size_t rows, std::size_t cols) {
  if (rows < 2 || cols < 2) throw DomainError("fft2 needs at least a 2x2 grid");
  if (x.size() != rows * cols) throw DomainError("fft2: input size does not match grid");
  Spectrum2D s{rows, cols, std::vector<Complex>(rows * cols)};
  for (std::size_t i = 0; i < x.size(); ++i) {
    const double v = static_cast<double>(x[i]);
    if (!std::isfinite(v)) throw DomainError("fft2: non-finite input");
    s.coeffs[i] = Complex(v, 0.0);
  }
  detail::transform(rows, cols, s.coeffs, FFTW_FORWARD);
  return s;
}

template <class T>
Spectrum2D fft2(const std::vector<T>& x, std::size_t rows, std::size_t cols) {
  return fft2(std::span<const T>(x), rows, cols);
}

/// Inverse transform of a full spectrum (normalized by 1/(H·W)).
inline std::vector<Complex> ifft2_complex(const Spectrum2D& s) {
  std::vector<Complex> data = s.coeffs;
  detail::transform(s.rows, s.cols, data, FFTW_BACKWARD);
  const double inv = 1.0 / static_cast<double>(s.rows * s.cols);
  for (auto& c : data) c *= inv;
  return data;
}

/// Inverse transform keeping the real part (the imaginary residue of a Hermitian spectrum is dropped).
inline std::vector<double> ifft2(const Spectrum2D& s) {
  const auto c = ifft2_complex(s);
  std::vector<double> out(c.size());
  for (std::size_t i = 0; i < c.size(); ++i) out[i] = c[i].real();
  return out;
}

inline SpectralProfile radial_profile(const Spectrum2D& s, std::size_t bins = 0) {
  const std::size_t rows = s.rows, cols = s.cols;
  if (bins == 0) bins = std::max<std::size_t>(1, std::max(rows, cols) / 2);
  const auto radius = radius_grid(rows, cols);
  const double r_max = *std::max_element(radius.begin(), radius.end());
  const double width = r_max / static_cast<double>(bins);

  SpectralProfile p;
  p.radii.resize(bins);
  for (std::size_t i = 0; i < bins; ++i) p.radii[i] = static_cast<double>(i + 1) * width;
  p.radii.back() = r_max;

  std::vector<double> totals(bins, 0.0);
  p.counts.assign(bins, 0);
  for (std::size_t i = 0; i < radius.size(); ++i) {
    auto it = std::upper_bound(p.radii.begin(), p.radii.end(), radius[i]);
    std::size_t shell = static_cast<std::size_t>(it - p.radii.begin());
    if (shell >= bins) shell = bins - 1;  // r == r_max
    totals[shell] += std::abs(s.coeffs[i]);
    ++p.counts[shell];
  }

  double grand = 0.0;
  for (double t : totals) grand += t;
  p.amplitude.resize(bins);
  p.cumulative.resize(bins);
  p.shell_mass.resize(bins);
  double running = 0.0;
  for (std::size_t i = 0; i < bins; ++i) {
    p.amplitude[i] = p.counts[i] ? totals[i] / static_cast<double>(p.counts[i]) : 0.0;
    running += totals[i];
    if (grand > 0.0) {
      p.cumulative[i] = running / grand;
      p.shell_mass[i] = totals[i] / grand;
    }
  }
  if (grand > 0.0) {
    p.cumulative.back() = 1.0;
  } else {
    p.degenerate = true;
    std::fill(p.cumulative.begin(), p.cumulative.end(), 1.0);
  }
  return p;
}

template <class T>
SpectralProfile radial_profile(std::span<const T> x, std::size_t rows, std::size_t cols) {
  return radial_profile(fft2(x, rows, cols));
}

/// Index of the first shell with E(r) ≥ gamma.
inline std::size_t cutoff_shell(const SpectralProfile& p, double gamma) {
  if (!(gamma > 0.0 && gamma <= 1.0)) throw DomainError("energy ratio must lie in (0, 1]");
  for (std::size_t i = 0; i < p.size(); ++i)
    if (p.cumulative[i] >= gamma) return i;
  return p.size() - 1;
}

/// r_γ = min{ r | E(r) ≥ γ }, reported as the shell's upper edge.
inline double cutoff_for_ratio(const SpectralProfile& p, double gamma) {
  return p.radii[cutoff_shell(p, gamma)];
}

/// Zero every coefficient with r ≥ r_cut in place (spectrum-side circle mask).
inline void apply_circle_mask(Spectrum2D& s, double r_cut) {
  for (std::size_t u = 0; u < s.rows; ++u)
    for (std::size_t v = 0; v < s.cols; ++v)
      if (!(normalized_radius(u, v, s.rows, s.cols) < r_cut)) s.at(u, v) = Complex(0.0, 0.0);
}

/// F⁻¹(F(x) ⊙ M(r < r_cut)) on one rows×cols slice, written back in place.
template <class T>
void lowpass_inplace(std::span<T> x, std::size_t rows, std::size_t cols, double r_cut) {
  auto s = fft2(std::span<const T>(x.data(), x.size()), rows, cols);
  apply_circle_mask(s, r_cut);
  const auto y = ifft2(s);
  for (std::size_t i = 0; i < y.size(); ++i) x[i] = static_cast<T>(y[i]);
}

template <class T>
std::vector<T> lowpass(std::span<const T> x, std::size_t rows, std::size_t cols, double r_cut) {
  std::vector<T> out(x.begin(), x.end());
  lowpass_inplace(std::span<T>(out), rows, cols, r_cut);
  return out;
}

/// Low-pass every trailing rows×cols slice of a packed array.
template <class T>
void lowpass_slices(std::span<T> x, std::size_t rows, std::size_t cols, double r_cut) {
  const std::size_t plane = rows * cols;
  if (plane == 0 || x.size() % plane != 0) throw DomainError("lowpass_slices: size not a multiple of the plane");
  for (std::size_t off = 0; off < x.size(); off += plane) lowpass_inplace(x.subspan(off, plane), rows, cols, r_cut);
}

/// Σ|F| over coefficients with r < r_cut divided by Σ|F|.
template <class T>
double retained_fraction(std::span<const T> x, std::size_t rows, std::size_t cols, double r_cut) {
  const auto s = fft2(x, rows, cols);
  double kept = 0.0, total = 0.0;
  for (std::size_t u = 0; u < rows; ++u)
    for (std::size_t v = 0; v < cols; ++v) {
      const double m = std::abs(s.at(u, v));
      total += m;
      if (normalized_radius(u, v, rows, cols) < r_cut) kept += m;
    }
  return total > 0.0 ? kept / total : 1.0;
}

/// Fraction of Σ|F| per band [e_i, e_{i+1}); the last band is closed on the right.
inline std::vector<double> band_energy(const Spectrum2D& s, std::span<const double> edges) {
  if (edges.size() < 2) throw DomainError("band_energy needs at least two edges");
  for (std::size_t i = 1; i < edges.size(); ++i)
    if (!(edges[i] > edges[i - 1])) throw DomainError("band edges must be strictly ascending");
  const std::size_t bands = edges.size() - 1;
  std::vector<double> e(bands, 0.0);
  double total = 0.0;
  for (std::size_t u = 0; u < s.rows; ++u)
    for (std::size_t v = 0; v < s.cols; ++v) {
      const double r = normalized_radius(u, v, s.rows, s.cols);
      if (r < edges.front() || r > edges.back()) continue;
      auto it = std::upper_bound(edges.begin(), edges.end(), r);
      std::size_t b = static_cast<std::size_t>(it - edges.begin());
      b = b == 0 ? 0 : b - 1;
      if (b >= bands) b = bands - 1;
      const double m = std::abs(s.at(u, v));
      e[b] += m;
      total += m;
    }
  if (total > 0.0)
    for (auto& v : e) v /= total;
  return e;
}

template <class T>
std::vector<double> band_energy(std::span<const T> x, std::size_t rows, std::size_t cols,
                                std::span<const double> edges) {
  return band_energy(fft2(x, rows, cols), edges);
}

inline void write_profile_csv(std::ostream& os, const SpectralProfile& p) {
  os << "radius,amplitude,cumulative\n";
  os.precision(10);
  for (std::size_t i = 0; i < p.size(); ++i) os << p.radii[i] << ',' << p.amplitude[i] << ',' << p.cumulative[i] << '\n';
}

}  // namespace nimbus::spectral
