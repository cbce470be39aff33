#include "hatkit/spectral.hpp"

#include <algorithm>
#include <cmath>
#include <limits>

#include "hatkit/errors.hpp"

namespace hatkit::spectral {

namespace {

constexpr double kTwoPi = 6.283185307179586476925286766559;

bool is_pow2(int64_t n) { return n > 0 && (n & (n - 1)) == 0; }

// In-place iterative radix-2 Cooley-Tukey; inverse=false gives the
// unnormalized forward transform. Caller handles 1/N for the inverse.
void fft_pow2(std::complex<double>* a, int64_t n, bool inverse) {
  for (int64_t i = 1, j = 0; i < n; ++i) {
    int64_t bit = n >> 1;
    for (; j & bit; bit >>= 1) j ^= bit;
    j ^= bit;
    if (i < j) std::swap(a[i], a[j]);
  }
  for (int64_t len = 2; len <= n; len <<= 1) {
    double ang = kTwoPi / static_cast<double>(len) * (inverse ? 1.0 : -1.0);
    std::complex<double> wlen(std::cos(ang), std::sin(ang));
    for (int64_t i = 0; i < n; i += len) {
      std::complex<double> w(1.0, 0.0);
      for (int64_t k = 0; k < len / 2; ++k) {
        std::complex<double> u = a[i + k];
        std::complex<double> v = a[i + k + len / 2] * w;
        a[i + k] = u + v;
        a[i + k + len / 2] = u - v;
        w *= wlen;
      }
    }
  }
}

void dft_direct(const std::complex<double>* in, std::complex<double>* out, int64_t n,
                bool inverse) {
  double s = inverse ? 1.0 : -1.0;
  for (int64_t k = 0; k < n; ++k) {
    std::complex<double> acc(0.0, 0.0);
    for (int64_t t = 0; t < n; ++t) {
      double ang = s * kTwoPi * static_cast<double>(k) * static_cast<double>(t) /
                   static_cast<double>(n);
      acc += in[t] * std::complex<double>(std::cos(ang), std::sin(ang));
    }
    out[k] = acc;
  }
}

void transform_1d(std::complex<double>* a, int64_t n, bool inverse) {
  if (n == 1) return;
  if (is_pow2(n)) {
    fft_pow2(a, n, inverse);
  } else {
    std::vector<std::complex<double>> tmp(static_cast<size_t>(n));
    dft_direct(a, tmp.data(), n, inverse);
    std::copy(tmp.begin(), tmp.end(), a);
  }
}

// Unnormalized 2-D transform over rows then columns.
void transform_2d(std::vector<std::complex<double>>& a, int64_t h, int64_t w, bool inverse) {
  for (int64_t i = 0; i < h; ++i) transform_1d(a.data() + i * w, w, inverse);
  std::vector<std::complex<double>> col(static_cast<size_t>(h));
  for (int64_t j = 0; j < w; ++j) {
    for (int64_t i = 0; i < h; ++i) col[static_cast<size_t>(i)] = a[static_cast<size_t>(i * w + j)];
    transform_1d(col.data(), h, inverse);
    for (int64_t i = 0; i < h; ++i) a[static_cast<size_t>(i * w + j)] = col[static_cast<size_t>(i)];
  }
}

// Natural index k -> shifted index (k + floor(n/2)) mod n, so the DC bin
// lands on floor(n/2).
std::vector<std::complex<double>> roll(const std::vector<std::complex<double>>& in, int64_t h,
                                       int64_t w, int64_t dh, int64_t dw) {
  std::vector<std::complex<double>> out(in.size());
  for (int64_t i = 0; i < h; ++i) {
    int64_t si = (i + dh) % h;
    for (int64_t j = 0; j < w; ++j) {
      int64_t sj = (j + dw) % w;
      out[static_cast<size_t>(si * w + sj)] = in[static_cast<size_t>(i * w + j)];
    }
  }
  return out;
}

}  // namespace

int64_t FrequencyMask::ones() const {
  int64_t n = 0;
  for (uint8_t v : grid) n += v;
  return n;
}

ComplexSpectrum dft2(std::span<const double> plane, int64_t height, int64_t width) {
  if (height < 1 || width < 1) throw ValueError("dft2: extents must be >= 1");
  if (static_cast<int64_t>(plane.size()) != height * width)
    throw ShapeError("dft2: plane size does not match extents");
  for (double v : plane)
    if (!(v - v == 0.0)) throw NumericError("non-finite value produced by dft2 input");
  ComplexSpectrum s;
  s.height = height;
  s.width = width;
  s.shifted = false;
  s.coeff.assign(plane.begin(), plane.end());
  transform_2d(s.coeff, height, width, /*inverse=*/false);
  return s;
}

std::vector<std::complex<double>> idft2(const ComplexSpectrum& spectrum) {
  ComplexSpectrum nat = to_natural(spectrum);
  transform_2d(nat.coeff, nat.height, nat.width, /*inverse=*/true);
  double inv = 1.0 / static_cast<double>(nat.height * nat.width);
  for (auto& c : nat.coeff) c *= inv;
  return std::move(nat.coeff);
}

std::vector<double> idft2_real(const ComplexSpectrum& spectrum, double tol) {
  for (const auto& c : spectrum.coeff) {
    double m = std::abs(c);
    if (!(m - m == 0.0)) throw NumericError("non-finite value produced by idft2 input");
  }
  std::vector<std::complex<double>> px = idft2(spectrum);
  double rms = 0.0;
  double max_imag = 0.0;
  for (const auto& c : px) {
    rms += std::norm(c);
    max_imag = std::max(max_imag, std::fabs(c.imag()));
  }
  rms = std::sqrt(rms / static_cast<double>(px.size()));
  if (max_imag > tol * std::max(rms, 1e-30))
    throw SymmetryError("idft2: imaginary residue " + std::to_string(max_imag) +
                        " exceeds tolerance; spectrum is not conjugate-symmetric");
  std::vector<double> out(px.size());
  for (size_t i = 0; i < px.size(); ++i) out[i] = px[i].real();
  return out;
}

ComplexSpectrum to_shifted(const ComplexSpectrum& s) {
  if (s.shifted) return s;
  ComplexSpectrum out = s;
  out.coeff = roll(s.coeff, s.height, s.width, s.height / 2, s.width / 2);
  out.shifted = true;
  return out;
}

ComplexSpectrum to_natural(const ComplexSpectrum& s) {
  if (!s.shifted) return s;
  ComplexSpectrum out = s;
  out.coeff = roll(s.coeff, s.height, s.width, (s.height + 1) / 2, (s.width + 1) / 2);
  out.shifted = false;
  return out;
}

std::vector<std::complex<double>> dft1(std::span<const double> signal) {
  std::vector<std::complex<double>> a(signal.begin(), signal.end());
  transform_1d(a.data(), static_cast<int64_t>(a.size()), /*inverse=*/false);
  return a;
}

FrequencyMask make_mask(int64_t height, int64_t width, int64_t filter_size, MaskMode mode,
                        MaskVariant variant) {
  int64_t m = std::min(height, width);
  if (filter_size < 0 || filter_size > m)
    throw ValueError("make_mask: filter size " + std::to_string(filter_size) +
                     " outside [0, " + std::to_string(m) + "]");
  FrequencyMask mask;
  mask.height = height;
  mask.width = width;
  mask.filter_size = filter_size;
  mask.mode = mode;
  mask.variant = variant;
  mask.grid.assign(static_cast<size_t>(height * width), 0);
  double ch = static_cast<double>(height / 2);
  double cw = static_cast<double>(width / 2);
  // Thresholds are compared in real arithmetic: S/2 for low-pass and
  // (min(H,W)-S)/2 for high-pass.
  double low_thr = static_cast<double>(filter_size) / 2.0;
  double high_thr = static_cast<double>(m - filter_size) / 2.0;
  for (int64_t i = 0; i < height; ++i) {
    double di = std::fabs(static_cast<double>(i) - ch);
    for (int64_t j = 0; j < width; ++j) {
      double dj = std::fabs(static_cast<double>(j) - cw);
      bool keep = false;
      if (mode == MaskMode::Low) {
        double d = (variant == MaskVariant::Square) ? std::max(di, dj) : std::min(di, dj);
        keep = d <= low_thr;
      } else {
        keep = !(std::min(di, dj) <= high_thr);
      }
      mask.grid[static_cast<size_t>(i * width + j)] = keep ? 1 : 0;
    }
  }
  return mask;
}

std::vector<double> filter_plane(std::span<const double> plane, const FrequencyMask& mask) {
  if (static_cast<int64_t>(plane.size()) != mask.height * mask.width)
    throw ShapeError("filter_plane: plane extents do not match mask");
  if (mask.all_ones()) return std::vector<double>(plane.begin(), plane.end());
  ComplexSpectrum s = to_shifted(dft2(plane, mask.height, mask.width));
  for (size_t i = 0; i < s.coeff.size(); ++i)
    if (!mask.grid[i]) s.coeff[i] = std::complex<double>(0.0, 0.0);
  // The mask is symmetric under conjugate reflection, so the product stays
  // conjugate-symmetric; realification cannot fail here.
  return idft2_real(s, 1e-5);
}

template <class T>
void filter_image_inplace(Tensor<T>& image, const FrequencyMask& mask) {
  if (image.rank() < 2) throw ShapeError("filter_image: rank must be >= 2");
  int64_t w = image.shape[static_cast<size_t>(image.rank() - 1)];
  int64_t h = image.shape[static_cast<size_t>(image.rank() - 2)];
  if (h != mask.height || w != mask.width)
    throw ShapeError("filter_image: plane extents " + std::to_string(h) + "x" +
                     std::to_string(w) + " do not match mask");
  if (mask.all_ones()) return;
  int64_t planes = image.numel() / (h * w);
  std::vector<double> buf(static_cast<size_t>(h * w));
  for (int64_t p = 0; p < planes; ++p) {
    T* base = image.data.data() + p * h * w;
    for (int64_t i = 0; i < h * w; ++i) buf[static_cast<size_t>(i)] = static_cast<double>(base[i]);
    std::vector<double> filt = filter_plane(buf, mask);
    for (int64_t i = 0; i < h * w; ++i) base[i] = static_cast<T>(filt[static_cast<size_t>(i)]);
  }
}

template void filter_image_inplace<float>(Tensor<float>&, const FrequencyMask&);
template void filter_image_inplace<double>(Tensor<double>&, const FrequencyMask&);

std::vector<double> fourier_basis_noise(int64_t height, int64_t width, int64_t i, int64_t j,
                                        double l2_norm, double sign) {
  if (i < 0 || i >= height || j < 0 || j >= width)
    throw ValueError("fourier_basis_noise: bin outside the grid");
  if (l2_norm < 0.0) throw ValueError("fourier_basis_noise: l2 norm must be >= 0");
  if (l2_norm == 0.0) return std::vector<double>(static_cast<size_t>(height * width), 0.0);
  ComplexSpectrum s;
  s.height = height;
  s.width = width;
  s.shifted = true;
  s.coeff.assign(static_cast<size_t>(height * width), std::complex<double>(0.0, 0.0));
  int64_t pi = (2 * (height / 2) - i % height + height) % height;
  int64_t pj = (2 * (width / 2) - j % width + width) % width;
  double hw = static_cast<double>(height * width);
  bool self_conjugate = (pi == i && pj == j);
  double amp = self_conjugate ? l2_norm * std::sqrt(hw) : l2_norm * std::sqrt(hw / 2.0);
  s.at(i, j) = std::complex<double>(sign * amp, 0.0);
  if (!self_conjugate) s.at(pi, pj) = std::complex<double>(sign * amp, 0.0);
  return idft2_real(s, 1e-6);
}

double spectral_energy(const ComplexSpectrum& s) {
  double e = 0.0;
  for (const auto& c : s.coeff) e += std::norm(c);
  return e;
}

template <class T>
double highfreq_energy_ratio(const Tensor<T>& image, int64_t filter_size) {
  if (image.rank() != 2 && image.rank() != 3)
    throw ShapeError("highfreq_energy_ratio: expected (H,W) or (C,H,W)");
  int64_t w = image.shape.back();
  int64_t h = image.shape[static_cast<size_t>(image.rank() - 2)];
  int64_t channels = image.rank() == 3 ? image.shape[0] : 1;
  if (filter_size <= 0 || filter_size >= std::min(h, w))
    throw ValueError("highfreq_energy_ratio: filter size must lie strictly inside (0, min(H,W))");
  FrequencyMask mask = make_mask(h, w, filter_size, MaskMode::High, MaskVariant::AsWritten);
  std::vector<double> buf(static_cast<size_t>(h * w));
  double ratio_sum = 0.0;
  for (int64_t c = 0; c < channels; ++c) {
    const T* base = image.data.data() + c * h * w;
    for (int64_t i = 0; i < h * w; ++i) buf[static_cast<size_t>(i)] = static_cast<double>(base[i]);
    ComplexSpectrum s = to_shifted(dft2(buf, h, w));
    double total = 0.0, kept = 0.0;
    for (size_t i = 0; i < s.coeff.size(); ++i) {
      double e = std::norm(s.coeff[i]);
      total += e;
      if (mask.grid[i]) kept += e;
    }
    if (total <= 0.0)
      throw ValueError("highfreq_energy_ratio: all-zero image has no defined ratio");
    ratio_sum += kept / total;
  }
  return ratio_sum / static_cast<double>(channels);
}

template double highfreq_energy_ratio<float>(const Tensor<float>&, int64_t);
template double highfreq_energy_ratio<double>(const Tensor<double>&, int64_t);

template <class T>
Tensor<double> spectrum_energy_map(const Tensor<T>& batch) {
  if (batch.rank() != 4) throw ShapeError("spectrum_energy_map: expected (N,C,H,W)");
  int64_t n = batch.shape[0], c = batch.shape[1], h = batch.shape[2], w = batch.shape[3];
  if (n < 1) throw ValueError("spectrum_energy_map: empty batch");
  Tensor<double> map = Tensor<double>::zeros({h, w});
  std::vector<double> buf(static_cast<size_t>(h * w));
  for (int64_t img = 0; img < n; ++img) {
    for (int64_t ch = 0; ch < c; ++ch) {
      const T* base = batch.data.data() + (img * c + ch) * h * w;
      for (int64_t i = 0; i < h * w; ++i)
        buf[static_cast<size_t>(i)] = static_cast<double>(base[i]);
      ComplexSpectrum s = to_shifted(dft2(buf, h, w));
      for (int64_t i = 0; i < h * w; ++i)
        map.data[static_cast<size_t>(i)] += std::log1p(std::abs(s.coeff[static_cast<size_t>(i)]));
    }
  }
  double inv = 1.0 / static_cast<double>(n * c);
  for (auto& v : map.data) v *= inv;
  return map;
}

template Tensor<double> spectrum_energy_map<float>(const Tensor<float>&);
template Tensor<double> spectrum_energy_map<double>(const Tensor<double>&);

std::vector<double> attention_lowpass_decay(const Tensor<double>& attention,
                                            const std::vector<double>& v, int k_max) {
  if (attention.rank() != 2 || attention.shape[0] != attention.shape[1])
    throw ShapeError("attention_lowpass_decay: A must be square");
  int64_t n = attention.shape[0];
  if (static_cast<int64_t>(v.size()) != n)
    throw ShapeError("attention_lowpass_decay: v length does not match A");
  double vnorm = 0.0;
  for (double x : v) vnorm += x * x;
  if (vnorm == 0.0) throw ValueError("attention_lowpass_decay: v must be nonzero");
  for (int64_t i = 0; i < n; ++i) {
    double row = 0.0;
    for (int64_t j = 0; j < n; ++j) {
      double a = attention.at({i, j});
      if (!(a > 0.0))
        throw ValueError("attention_lowpass_decay: A entries must be positive");
      row += a;
    }
    if (std::fabs(row - 1.0) > 1e-6)
      throw ValueError("attention_lowpass_decay: A is not row-stochastic");
  }
  int64_t center = n / 2;
  std::vector<double> cur(v);
  std::vector<double> next(static_cast<size_t>(n));
  std::vector<double> ratios;
  ratios.reserve(static_cast<size_t>(k_max));
  for (int k = 1; k <= k_max; ++k) {
    for (int64_t i = 0; i < n; ++i) {
      double acc = 0.0;
      for (int64_t j = 0; j < n; ++j) acc += attention.at({i, j}) * cur[static_cast<size_t>(j)];
      next[static_cast<size_t>(i)] = acc;
    }
    cur.swap(next);
    std::vector<std::complex<double>> spec = dft1(cur);
    // Shifted low mask of size 1 keeps only the DC bin (natural index 0);
    // the high mask of size n-1 keeps every other bin.
    double low = std::norm(spec[0]);
    double high = 0.0;
    for (int64_t b = 1; b < n; ++b) high += std::norm(spec[static_cast<size_t>(b)]);
    if (low == 0.0) {
      ratios.push_back(std::numeric_limits<double>::infinity());
    } else {
      ratios.push_back(std::sqrt(high / low));
    }
  }
  return ratios;
}

}  // namespace hatkit::spectral
