#pragma once

#include <complex>
#include <cstdint>
#include <span>
#include <vector>

#include "hatkit/tensor.hpp"

namespace hatkit::spectral {

// Per-channel complex frequency grid. `shifted` marks the layout: true means
// the zero-frequency bin sits at (H/2, W/2) (floor convention), false means
// it sits at (0, 0).
struct ComplexSpectrum {
  int64_t height = 0;
  int64_t width = 0;
  bool shifted = false;
  std::vector<std::complex<double>> coeff;  // row-major H x W

  std::complex<double>& at(int64_t i, int64_t j) { return coeff[static_cast<size_t>(i * width + j)]; }
  std::complex<double> at(int64_t i, int64_t j) const { return coeff[static_cast<size_t>(i * width + j)]; }
};

enum class MaskMode { Low, High };
// AsWritten keeps the min(.) rule of the filtering definitions, which makes a
// cross-shaped low-pass region and exactly complementary high-pass masks.
// Square swaps min for max in the low-pass rule (the common convention) and
// keeps the corner rule for high-pass.
enum class MaskVariant { AsWritten, Square };

struct FrequencyMask {
  int64_t height = 0;
  int64_t width = 0;
  int64_t filter_size = 0;
  MaskMode mode = MaskMode::Low;
  MaskVariant variant = MaskVariant::AsWritten;
  std::vector<uint8_t> grid;  // values in {0,1}, shifted layout

  uint8_t at(int64_t i, int64_t j) const { return grid[static_cast<size_t>(i * width + j)]; }
  int64_t ones() const;
  bool all_ones() const { return ones() == height * width; }
};

// Unnormalized forward transform X[k] = sum_n x[n] exp(-2*pi*i*k*n/N); the
// inverse carries the 1/(H*W) factor. Radix-2 FFT when the extent is a power
// of two, direct summation otherwise.
ComplexSpectrum dft2(std::span<const double> plane, int64_t height, int64_t width);

// Inverse transform of a (conjugate-symmetric) spectrum back to a real plane.
// The imaginary residue is compared against `tol` relative to the RMS pixel
// magnitude; exceeding it raises SymmetryError.
std::vector<double> idft2_real(const ComplexSpectrum& spectrum, double tol = 1e-5);

// Inverse transform without the realness requirement.
std::vector<std::complex<double>> idft2(const ComplexSpectrum& spectrum);

ComplexSpectrum to_shifted(const ComplexSpectrum& s);
ComplexSpectrum to_natural(const ComplexSpectrum& s);

// 1-D helpers used by the attention decay experiment.
std::vector<std::complex<double>> dft1(std::span<const double> signal);

FrequencyMask make_mask(int64_t height, int64_t width, int64_t filter_size, MaskMode mode,
                        MaskVariant variant = MaskVariant::AsWritten);

// Filter one real plane: shifted spectrum, elementwise mask, inverse. The
// all-ones mask short-circuits to an exact copy so identity filtering is
// bit-exact.
std::vector<double> filter_plane(std::span<const double> plane, const FrequencyMask& mask);

// Filter every channel of an (N, C, H, W) batch in place, in double precision.
template <class T>
void filter_image_inplace(Tensor<T>& image, const FrequencyMask& mask);

template <class T>
Tensor<T> filter_image(const Tensor<T>& image, const FrequencyMask& mask) {
  Tensor<T> out = image;
  filter_image_inplace(out, mask);
  return out;
}

// Real plane whose spectrum is supported on the shifted bin (i, j) and its
// conjugate partner, scaled to the requested l2 norm; `sign` flips the plane.
std::vector<double> fourier_basis_noise(int64_t height, int64_t width, int64_t i, int64_t j,
                                        double l2_norm, double sign);

// Fraction of spectral energy kept by the as-written high-pass mask of size
// `filter_size`, averaged over channels. Image is (C, H, W) or (H, W).
template <class T>
double highfreq_energy_ratio(const Tensor<T>& image, int64_t filter_size);

// Mean over images and channels of log(1 + |coefficient|), shifted layout.
// Batch is (N, C, H, W).
template <class T>
Tensor<double> spectrum_energy_map(const Tensor<T>& batch);

// Theorem-style decay experiment: ratio ||high(A^k v)||_2 / ||low(A^k v)||_2
// for k = 1..k_max, where low keeps only the center bin of the shifted 1-D
// spectrum and high keeps everything else. A zero low component reports +inf.
std::vector<double> attention_lowpass_decay(const Tensor<double>& attention,
                                            const std::vector<double>& v, int k_max);

double spectral_energy(const ComplexSpectrum& s);

}  // namespace hatkit::spectral
