#pragma once

#include <string>
#include <vector>

#include "hatkit/data.hpp"
#include "hatkit/hat.hpp"
#include "hatkit/models.hpp"
#include "hatkit/spectral.hpp"

namespace hatkit::eval {

// Top-1 agreement; argmax ties break toward the lowest class index.
int64_t evaluate_correct(const models::Model<float>& model, const data::Dataset& ds,
                         int batch_size = 256);
double evaluate_accuracy(const models::Model<float>& model, const data::Dataset& ds,
                         int batch_size = 256);

struct SweepRecord {
  int64_t filter_size = 0;
  double accuracy = 0.0;
  int64_t count = 0;
};

struct SweepReport {
  std::string model_id;
  spectral::MaskMode mode = spectral::MaskMode::Low;
  spectral::MaskVariant variant = spectral::MaskVariant::AsWritten;
  std::vector<SweepRecord> records;  // filter sizes strictly increasing
};

// Filtering happens on de-standardized pixel values, per channel, then the
// image is re-standardized for the model.
SweepReport filtered_accuracy_sweep(const models::Model<float>& model, const data::Dataset& ds,
                                    spectral::MaskMode mode, const std::vector<int64_t>& sizes,
                                    spectral::MaskVariant variant, int batch_size = 256);

void write_sweep_csv(const std::string& path, const std::vector<SweepReport>& reports,
                     uint64_t config_hash, uint64_t seed);

struct HeatMapCell {
  int fi = 0, fj = 0;  // shifted frequency offsets from the DC bin
  double error_rate = 0.0;
};

struct FourierHeatMap {
  double l2_norm = 0.0;       // pixel units
  int64_t sample_count = 0;
  double clean_error = 0.0;
  uint64_t subset_seed = 0;
  std::vector<HeatMapCell> cells;
};

// Error rate under additive Fourier basis noise at each requested frequency
// offset, over a fixed seed-chosen subset, with a fresh random sign per image
// and channel. `mirror` fills conjugate partners from the computed cell
// instead of re-sampling them.
FourierHeatMap fourier_heatmap(const models::Model<float>& model, const data::Dataset& ds,
                               double l2_norm, const std::vector<std::pair<int, int>>& offsets,
                               int64_t subset_size, uint64_t seed, bool mirror = true,
                               int batch_size = 256);

// The full grid of offsets up to Nyquist on both axes (side+1 values per
// axis, the two extremes aliasing to the same bin).
std::vector<std::pair<int, int>> full_heatmap_offsets(int64_t height, int64_t width);

void write_heatmap_csv(const std::string& path, const FourierHeatMap& map, int64_t height,
                       int64_t width, uint64_t config_hash, uint64_t seed);

struct SpectrumReport {
  Tensor<double> natural_map;       // H x W, shifted layout
  Tensor<double> perturbation_map;  // H x W, shifted layout
  double natural_highfreq_ratio = 0.0;
  double perturbation_highfreq_ratio = 0.0;
  int64_t sample_count = 0;
  int64_t filter_size = 0;
};

// Crafts PGD perturbations for the first `samples` images and reports the
// paired spectrum statistics in pixel units.
SpectrumReport perturbation_spectrum_report(const models::Model<float>& model,
                                            const data::Dataset& ds, const hat::HatConfig& cfg,
                                            int64_t samples, int64_t filter_size,
                                            int batch_size = 64);

void write_spectrum_csv(const std::string& path, const SpectrumReport& report,
                        uint64_t config_hash, uint64_t seed);

}  // namespace hatkit::eval
