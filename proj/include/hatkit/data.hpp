#pragma once

#include <array>
#include <cstdint>
#include <string>
#include <vector>

#include "hatkit/rng.hpp"
#include "hatkit/tensor.hpp"

namespace hatkit::data {

// Images are kept standardized: pixel in [0,1] -> (pixel - mean_c) / std_c.
struct Dataset {
  Tensor<float> images;  // (N, C, H, W)
  std::vector<int32_t> labels;
  std::array<float, 3> mean{0.5f, 0.5f, 0.5f};
  std::array<float, 3> stdev{0.25f, 0.25f, 0.25f};
  int num_classes = 10;
  std::string split;

  int64_t size() const { return images.shape.empty() ? 0 : images.shape[0]; }
  void validate() const;
  Dataset subset(const std::vector<int64_t>& indices) const;
  Dataset head(int64_t n) const;
};

enum class Split { Train, Test };

// CIFAR-10 standardization constants (train-set statistics, widely used).
inline constexpr std::array<float, 3> kCifarMean{0.4914f, 0.4822f, 0.4465f};
inline constexpr std::array<float, 3> kCifarStd{0.2470f, 0.2435f, 0.2616f};

// Reads the binary batch files (records of 1 label byte + 3072 plane bytes).
// Train = data_batch_1..5.bin, Test = test_batch.bin.
Dataset load_cifar10(const std::string& dir, Split split);

// Parse one binary batch file; exposed for fixture-driven tests.
Dataset parse_cifar_file(const std::string& path);

// Raw tensor import/export through the checkpoint container, names
// "images" (N,C,H,W, values in [0,1]) and "labels" (N). Standardizes with the
// fixed (0.5, 0.25) constants.
Dataset load_raw_dataset(const std::string& path);
void save_raw_dataset(const Dataset& ds, const std::string& path);

void destandardize(Tensor<float>& images, const std::array<float, 3>& mean,
                   const std::array<float, 3>& stdev);
void standardize(Tensor<float>& images, const std::array<float, 3>& mean,
                 const std::array<float, 3>& stdev);

// Random crop (4px reflect padding) + horizontal flip, per image.
// force_flip/force_center pin the randomness for tests.
struct BasicAugmentOptions {
  int pad = 4;
  bool flip = true;
  int force_flip = -1;       // -1 random, 0 never, 1 always
  int force_offset_y = -1;   // -1 random
  int force_offset_x = -1;
};

Tensor<float> augment_basic(const Tensor<float>& batch, Rng& rng,
                            const BasicAugmentOptions& opt = {});

// (N, num_classes), rows sum to 1.
Tensor<float> one_hot(const std::vector<int32_t>& labels, int num_classes);

struct MixResult {
  Tensor<float> images;
  Tensor<float> soft_labels;
  double lambda = 1.0;
};

// Convex pixel/label mix with lambda ~ Beta(a, a) shared across the batch;
// pairing is a random cyclic shift (fixed-point free). force_lambda >= 0
// overrides the draw.
MixResult mixup(const Tensor<float>& batch, const std::vector<int32_t>& labels, int num_classes,
                double a, Rng& rng, double force_lambda = -1.0);

// Rectangular patch replacement; labels mixed by the realized pixel-area
// ratio after clipping. force_lambda >= 0 overrides the Beta(1,1) draw.
struct CutmixResult {
  Tensor<float> images;
  Tensor<float> soft_labels;
  int64_t box_y0 = 0, box_x0 = 0, box_y1 = 0, box_x1 = 0;  // [y0,y1) x [x0,x1)
  double realized_ratio = 0.0;
};

CutmixResult cutmix(const Tensor<float>& batch, const std::vector<int32_t>& labels,
                    int num_classes, Rng& rng, double force_lambda = -1.0,
                    int64_t force_cy = -1, int64_t force_cx = -1);

// Procedural image set used for fixtures and as the desk fallback when no
// CIFAR-10 directory is available. Each class couples a smooth low-frequency
// layout with a class-specific high-frequency grating, over a 1/f background.
struct SyntheticSpec {
  int64_t count = 512;
  int num_classes = 10;
  int image_size = 32;
  uint64_t seed = 0;
  double low_amp = 0.28;
  double high_amp = 0.16;
  double background = 0.10;
  double noise = 0.03;
};

Dataset make_synthetic(const SyntheticSpec& spec, const std::string& split_tag);

}  // namespace hatkit::data
