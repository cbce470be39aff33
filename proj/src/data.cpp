#include "hatkit/data.hpp"

#include <algorithm>
#include <cmath>
#include <cstring>
#include <filesystem>
#include <fstream>

#include "hatkit/errors.hpp"
#include "hatkit/models.hpp"

namespace hatkit::data {

namespace {

constexpr int64_t kCifarSide = 32;
constexpr int64_t kCifarRecord = 1 + 3 * kCifarSide * kCifarSide;

}  // namespace

void Dataset::validate() const {
  if (images.rank() != 4) throw ShapeError("dataset images must be (N,C,H,W)");
  if (size() == 0) throw ValueError("dataset is empty");
  if (static_cast<int64_t>(labels.size()) != size())
    throw ShapeError("dataset label count does not match image count");
  for (int32_t y : labels)
    if (y < 0 || y >= num_classes)
      throw ValueError("label " + std::to_string(y) + " outside [0, " +
                       std::to_string(num_classes) + ")");
}

Dataset Dataset::subset(const std::vector<int64_t>& indices) const {
  const int64_t c = images.shape[1], h = images.shape[2], w = images.shape[3];
  const int64_t plane = c * h * w;
  Dataset out;
  out.images = Tensor<float>::zeros({static_cast<int64_t>(indices.size()), c, h, w});
  out.labels.reserve(indices.size());
  for (size_t i = 0; i < indices.size(); ++i) {
    int64_t src = indices[i];
    if (src < 0 || src >= size()) throw ValueError("subset index out of range");
    std::memcpy(out.images.data.data() + static_cast<int64_t>(i) * plane,
                images.data.data() + src * plane, static_cast<size_t>(plane) * sizeof(float));
    out.labels.push_back(labels[static_cast<size_t>(src)]);
  }
  out.mean = mean;
  out.stdev = stdev;
  out.num_classes = num_classes;
  out.split = split;
  return out;
}

Dataset Dataset::head(int64_t n) const {
  n = std::min(n, size());
  std::vector<int64_t> idx(static_cast<size_t>(n));
  for (int64_t i = 0; i < n; ++i) idx[static_cast<size_t>(i)] = i;
  return subset(idx);
}

void destandardize(Tensor<float>& images, const std::array<float, 3>& mean,
                   const std::array<float, 3>& stdev) {
  const int64_t n = images.shape[0], c = images.shape[1], plane = images.shape[2] * images.shape[3];
  for (int64_t i = 0; i < n; ++i)
    for (int64_t ch = 0; ch < c; ++ch) {
      float* p = images.data.data() + (i * c + ch) * plane;
      const float m = mean[static_cast<size_t>(ch % 3)];
      const float s = stdev[static_cast<size_t>(ch % 3)];
      for (int64_t k = 0; k < plane; ++k) p[k] = p[k] * s + m;
    }
}

void standardize(Tensor<float>& images, const std::array<float, 3>& mean,
                 const std::array<float, 3>& stdev) {
  const int64_t n = images.shape[0], c = images.shape[1], plane = images.shape[2] * images.shape[3];
  for (int64_t i = 0; i < n; ++i)
    for (int64_t ch = 0; ch < c; ++ch) {
      float* p = images.data.data() + (i * c + ch) * plane;
      const float m = mean[static_cast<size_t>(ch % 3)];
      const float s = stdev[static_cast<size_t>(ch % 3)];
      for (int64_t k = 0; k < plane; ++k) p[k] = (p[k] - m) / s;
    }
}

Dataset parse_cifar_file(const std::string& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw Error("cannot open dataset file: " + path);
  std::string buf((std::istreambuf_iterator<char>(in)), std::istreambuf_iterator<char>());
  if (buf.empty() || buf.size() % static_cast<size_t>(kCifarRecord) != 0)
    throw FormatError(FormatError::Kind::Malformed,
                      "dataset file size " + std::to_string(buf.size()) +
                          " is not a multiple of the 3073-byte record");
  const int64_t n = static_cast<int64_t>(buf.size()) / kCifarRecord;
  Dataset ds;
  ds.images = Tensor<float>::zeros({n, 3, kCifarSide, kCifarSide});
  ds.labels.resize(static_cast<size_t>(n));
  ds.mean = kCifarMean;
  ds.stdev = kCifarStd;
  const int64_t plane = kCifarSide * kCifarSide;
  for (int64_t i = 0; i < n; ++i) {
    const uint8_t* rec = reinterpret_cast<const uint8_t*>(buf.data()) + i * kCifarRecord;
    if (rec[0] > 9)
      throw FormatError(FormatError::Kind::Malformed,
                        "label byte " + std::to_string(rec[0]) + " out of range in " + path);
    ds.labels[static_cast<size_t>(i)] = rec[0];
    for (int64_t ch = 0; ch < 3; ++ch) {
      float* dst = ds.images.data.data() + (i * 3 + ch) * plane;
      const uint8_t* src = rec + 1 + ch * plane;
      const float m = kCifarMean[static_cast<size_t>(ch)];
      const float s = kCifarStd[static_cast<size_t>(ch)];
      for (int64_t k = 0; k < plane; ++k)
        dst[k] = (static_cast<float>(src[k]) / 255.0f - m) / s;
    }
  }
  return ds;
}

Dataset load_cifar10(const std::string& dir, Split split) {
  namespace fs = std::filesystem;
  std::vector<std::string> files;
  if (split == Split::Train) {
    for (int i = 1; i <= 5; ++i)
      files.push_back((fs::path(dir) / ("data_batch_" + std::to_string(i) + ".bin")).string());
  } else {
    files.push_back((fs::path(dir) / "test_batch.bin").string());
  }
  Dataset all;
  bool first = true;
  for (const auto& f : files) {
    Dataset part = parse_cifar_file(f);
    if (first) {
      all = std::move(part);
      first = false;
    } else {
      const int64_t plane = 3 * kCifarSide * kCifarSide;
      int64_t n0 = all.size(), n1 = part.size();
      Tensor<float> merged = Tensor<float>::zeros({n0 + n1, 3, kCifarSide, kCifarSide});
      std::memcpy(merged.data.data(), all.images.data.data(),
                  static_cast<size_t>(n0 * plane) * sizeof(float));
      std::memcpy(merged.data.data() + n0 * plane, part.images.data.data(),
                  static_cast<size_t>(n1 * plane) * sizeof(float));
      all.images = std::move(merged);
      all.labels.insert(all.labels.end(), part.labels.begin(), part.labels.end());
    }
  }
  all.split = split == Split::Train ? "train" : "test";
  all.validate();
  return all;
}

Dataset load_raw_dataset(const std::string& path) {
  models::ModelParams<float> container = models::load_checkpoint(path);
  if (!container.has("images") || !container.has("labels"))
    throw FormatError(FormatError::Kind::Malformed,
                      "raw dataset container must hold tensors 'images' and 'labels'");
  Dataset ds;
  ds.images = container.at("images");
  if (ds.images.rank() != 4) throw ShapeError("raw dataset images must be (N,C,H,W)");
  const Tensor<float>& lab = container.at("labels");
  if (lab.rank() != 1 || lab.shape[0] != ds.images.shape[0])
    throw ShapeError("raw dataset labels must be rank-1 matching the image count");
  ds.labels.reserve(lab.data.size());
  int maxlab = 0;
  for (float v : lab.data) {
    int32_t y = static_cast<int32_t>(std::lround(v));
    ds.labels.push_back(y);
    maxlab = std::max(maxlab, static_cast<int>(y));
  }
  ds.num_classes = std::max(10, maxlab + 1);
  standardize(ds.images, ds.mean, ds.stdev);
  ds.split = "raw";
  ds.validate();
  return ds;
}

void save_raw_dataset(const Dataset& ds, const std::string& path) {
  Tensor<float> imgs = ds.images;
  destandardize(imgs, ds.mean, ds.stdev);
  Tensor<float> labels = Tensor<float>::zeros({ds.size()});
  for (int64_t i = 0; i < ds.size(); ++i)
    labels.data[static_cast<size_t>(i)] = static_cast<float>(ds.labels[static_cast<size_t>(i)]);
  models::ModelParams<float> container;
  container.add("images", std::move(imgs));
  container.add("labels", std::move(labels));
  models::save_checkpoint(container, path);
}

namespace {

// reflect (no edge repetition): -1 -> 1, H -> H-2
int64_t reflect_index(int64_t i, int64_t n) {
  while (i < 0 || i >= n) {
    if (i < 0) i = -i;
    if (i >= n) i = 2 * n - 2 - i;
  }
  return i;
}

}  // namespace

Tensor<float> augment_basic(const Tensor<float>& batch, Rng& rng, const BasicAugmentOptions& opt) {
  if (batch.rank() != 4) throw ShapeError("augment_basic: expected (N,C,H,W)");
  const int64_t n = batch.shape[0], c = batch.shape[1], h = batch.shape[2], w = batch.shape[3];
  Tensor<float> out = Tensor<float>::zeros(batch.shape);
  const int64_t pad = opt.pad;
  for (int64_t img = 0; img < n; ++img) {
    int64_t oy = opt.force_offset_y >= 0 ? opt.force_offset_y
                                         : static_cast<int64_t>(rng.uniform_int(2 * pad + 1));
    int64_t ox = opt.force_offset_x >= 0 ? opt.force_offset_x
                                         : static_cast<int64_t>(rng.uniform_int(2 * pad + 1));
    bool flip = false;
    if (opt.flip) flip = opt.force_flip >= 0 ? opt.force_flip != 0 : (rng.next_u64() & 1) != 0;
    for (int64_t ch = 0; ch < c; ++ch) {
      const float* src = batch.data.data() + (img * c + ch) * h * w;
      float* dst = out.data.data() + (img * c + ch) * h * w;
      for (int64_t y = 0; y < h; ++y) {
        int64_t sy = reflect_index(y + oy - pad, h);
        for (int64_t x = 0; x < w; ++x) {
          int64_t sx = reflect_index(x + ox - pad, w);
          int64_t tx = flip ? (w - 1 - x) : x;
          dst[y * w + tx] = src[sy * w + sx];
        }
      }
    }
  }
  return out;
}

Tensor<float> one_hot(const std::vector<int32_t>& labels, int num_classes) {
  Tensor<float> out =
      Tensor<float>::zeros({static_cast<int64_t>(labels.size()), num_classes});
  for (size_t i = 0; i < labels.size(); ++i) {
    if (labels[i] < 0 || labels[i] >= num_classes)
      throw ValueError("one_hot: label out of range");
    out.data[i * static_cast<size_t>(num_classes) + static_cast<size_t>(labels[i])] = 1.0f;
  }
  return out;
}

MixResult mixup(const Tensor<float>& batch, const std::vector<int32_t>& labels, int num_classes,
                double a, Rng& rng, double force_lambda) {
  if (a <= 0.0) throw ValueError("mixup: beta parameter must be > 0");
  const int64_t n = batch.shape.empty() ? 0 : batch.shape[0];
  if (n < 2) throw ValueError("mixup: batch must hold at least 2 images");
  double lambda = force_lambda >= 0.0 ? force_lambda : rng.beta(a, a);
  // cyclic shift pairing: i pairs with i+k, never with itself
  int64_t k = 1 + static_cast<int64_t>(rng.uniform_int(static_cast<uint64_t>(n - 1)));
  MixResult res;
  res.lambda = lambda;
  res.images = Tensor<float>::zeros(batch.shape);
  Tensor<float> hot = one_hot(labels, num_classes);
  res.soft_labels = Tensor<float>::zeros(hot.shape);
  const int64_t plane = batch.numel() / n;
  const float lf = static_cast<float>(lambda);
  for (int64_t i = 0; i < n; ++i) {
    const int64_t j = (i + k) % n;
    const float* xi = batch.data.data() + i * plane;
    const float* xj = batch.data.data() + j * plane;
    float* dst = res.images.data.data() + i * plane;
    for (int64_t t = 0; t < plane; ++t) dst[t] = lf * xi[t] + (1.0f - lf) * xj[t];
    const float* yi = hot.data.data() + i * num_classes;
    const float* yj = hot.data.data() + j * num_classes;
    float* yd = res.soft_labels.data.data() + i * num_classes;
    for (int t = 0; t < num_classes; ++t) yd[t] = lf * yi[t] + (1.0f - lf) * yj[t];
  }
  return res;
}

CutmixResult cutmix(const Tensor<float>& batch, const std::vector<int32_t>& labels,
                    int num_classes, Rng& rng, double force_lambda, int64_t force_cy,
                    int64_t force_cx) {
  const int64_t n = batch.shape.empty() ? 0 : batch.shape[0];
  if (n < 2) throw ValueError("cutmix: batch must hold at least 2 images");
  const int64_t c = batch.shape[1], h = batch.shape[2], w = batch.shape[3];
  double lambda = force_lambda >= 0.0 ? force_lambda : rng.beta(1.0, 1.0);
  int64_t k = 1 + static_cast<int64_t>(rng.uniform_int(static_cast<uint64_t>(n - 1)));
  double cut = std::sqrt(std::max(0.0, 1.0 - lambda));
  int64_t rh = static_cast<int64_t>(std::lround(static_cast<double>(h) * cut));
  int64_t rw = static_cast<int64_t>(std::lround(static_cast<double>(w) * cut));
  int64_t cy = static_cast<int64_t>(rng.uniform_int(static_cast<uint64_t>(h)));
  int64_t cx = static_cast<int64_t>(rng.uniform_int(static_cast<uint64_t>(w)));
  if (force_cy >= 0) cy = force_cy;
  if (force_cx >= 0) cx = force_cx;
  CutmixResult res;
  res.box_y0 = std::clamp<int64_t>(cy - rh / 2, 0, h);
  res.box_y1 = std::clamp<int64_t>(cy - rh / 2 + rh, 0, h);
  res.box_x0 = std::clamp<int64_t>(cx - rw / 2, 0, w);
  res.box_x1 = std::clamp<int64_t>(cx - rw / 2 + rw, 0, w);
  const int64_t area = (res.box_y1 - res.box_y0) * (res.box_x1 - res.box_x0);
  res.realized_ratio = static_cast<double>(area) / static_cast<double>(h * w);
  res.images = batch;
  res.images.requires_grad = false;
  Tensor<float> hot = one_hot(labels, num_classes);
  res.soft_labels = Tensor<float>::zeros(hot.shape);
  const float ratio = static_cast<float>(res.realized_ratio);
  for (int64_t i = 0; i < n; ++i) {
    const int64_t j = (i + k) % n;
    for (int64_t ch = 0; ch < c; ++ch) {
      const float* src = batch.data.data() + (j * c + ch) * h * w;
      float* dst = res.images.data.data() + (i * c + ch) * h * w;
      for (int64_t y = res.box_y0; y < res.box_y1; ++y)
        for (int64_t x = res.box_x0; x < res.box_x1; ++x) dst[y * w + x] = src[y * w + x];
    }
    const float* yi = hot.data.data() + i * num_classes;
    const float* yj = hot.data.data() + j * num_classes;
    float* yd = res.soft_labels.data.data() + i * num_classes;
    for (int t = 0; t < num_classes; ++t) yd[t] = (1.0f - ratio) * yi[t] + ratio * yj[t];
  }
  return res;
}

namespace {

struct ClassSignature {
  // three low-frequency cosines
  std::array<std::array<double, 3>, 3> low;  // {fi, fj, phase}
  // one class grating with both components in the high-frequency corner band
  double gu = 0.0, gv = 0.0;
};

ClassSignature class_signature(int cls, uint64_t seed) {
  Rng rng(mix64(seed ^ fnv1a64("synthetic-class") ^ (0x9E3779B97F4A7C15ULL * (cls + 1))));
  ClassSignature sig;
  for (auto& comp : sig.low) {
    double fi = 0.0, fj = 0.0;
    while (fi == 0.0 && fj == 0.0) {
      fi = static_cast<double>(static_cast<int64_t>(rng.uniform_int(7)) - 3);
      fj = static_cast<double>(static_cast<int64_t>(rng.uniform_int(7)) - 3);
    }
    comp = {fi, fj, rng.uniform(0.0, 6.283185307179586)};
  }
  // distinct corner-band gratings; components in [11, 15]
  static const int grating_table[10][2] = {{15, 15}, {13, 15}, {15, 13}, {13, -15}, {15, -13},
                                           {11, 13}, {13, 11}, {11, -13}, {13, -11}, {12, 14}};
  sig.gu = grating_table[cls % 10][0];
  sig.gv = grating_table[cls % 10][1];
  return sig;
}

}  // namespace

Dataset make_synthetic(const SyntheticSpec& spec, const std::string& split_tag) {
  if (spec.count <= 0 || spec.num_classes <= 0 || spec.image_size <= 0)
    throw ValueError("make_synthetic: counts and extents must be positive");
  const int64_t s = spec.image_size;
  const int64_t n = spec.count;
  Dataset ds;
  ds.images = Tensor<float>::zeros({n, 3, s, s});
  ds.labels.resize(static_cast<size_t>(n));
  ds.num_classes = spec.num_classes;
  ds.split = split_tag;
  std::vector<ClassSignature> sigs;
  for (int c = 0; c < spec.num_classes; ++c) sigs.push_back(class_signature(c, spec.seed));
  const double tau = 6.283185307179586;
  Rng rng(mix64(spec.seed ^ fnv1a64("synthetic-images") ^ fnv1a64(split_tag)));
  std::vector<double> base(static_cast<size_t>(s * s));
  for (int64_t img = 0; img < n; ++img) {
    const int cls = static_cast<int>(img % spec.num_classes);
    ds.labels[static_cast<size_t>(img)] = cls;
    const ClassSignature& sig = sigs[static_cast<size_t>(cls)];
    // instance jitter
    const double low_gain = spec.low_amp * rng.uniform(0.8, 1.2);
    const double high_gain = spec.high_amp * rng.uniform(0.8, 1.2);
    const double grating_phase = rng.uniform(0.0, tau);
    const double shift_y = rng.uniform(0.0, static_cast<double>(s));
    const double shift_x = rng.uniform(0.0, static_cast<double>(s));
    // 1/f-ish background: a few random cosines with radius-damped amplitude
    struct Bg { double fi, fj, ph, amp; };
    std::array<Bg, 6> bg;
    for (auto& b : bg) {
      b.fi = static_cast<double>(static_cast<int64_t>(rng.uniform_int(31)) - 15);
      b.fj = static_cast<double>(static_cast<int64_t>(rng.uniform_int(31)) - 15);
      b.ph = rng.uniform(0.0, tau);
      double r = std::sqrt(b.fi * b.fi + b.fj * b.fj);
      b.amp = spec.background / (1.0 + r);
    }
    for (int64_t y = 0; y < s; ++y) {
      for (int64_t x = 0; x < s; ++x) {
        const double yy = static_cast<double>(y) + shift_y;
        const double xx = static_cast<double>(x) + shift_x;
        double v = 0.0;
        for (const auto& comp : sig.low)
          v += (low_gain / 3.0) *
               std::cos(tau * (comp[0] * yy + comp[1] * xx) / static_cast<double>(s) + comp[2]);
        v += high_gain * std::cos(tau * (sig.gu * static_cast<double>(y) +
                                         sig.gv * static_cast<double>(x)) /
                                      static_cast<double>(s) +
                                  grating_phase);
        for (const auto& b : bg)
          v += b.amp * std::cos(tau * (b.fi * static_cast<double>(y) +
                                       b.fj * static_cast<double>(x)) /
                                    static_cast<double>(s) +
                                b.ph);
        base[static_cast<size_t>(y * s + x)] = v;
      }
    }
    for (int64_t ch = 0; ch < 3; ++ch) {
      const double tint = rng.uniform(0.85, 1.15);
      float* dst = ds.images.data.data() + (img * 3 + ch) * s * s;
      for (int64_t k = 0; k < s * s; ++k) {
        double v = 0.5 + tint * base[static_cast<size_t>(k)] + spec.noise * rng.normal();
        dst[k] = static_cast<float>(std::clamp(v, 0.0, 1.0));
      }
    }
  }
  standardize(ds.images, ds.mean, ds.stdev);
  ds.validate();
  return ds;
}

}  // namespace hatkit::data
