#include "hatkit/eval.hpp"

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <cstring>
#include <fstream>
#include <numeric>

#include "hatkit/errors.hpp"
#include "hatkit/rng.hpp"

namespace hatkit::eval {

namespace {

void csv_header(std::ofstream& out, uint64_t config_hash, uint64_t seed) {
  char head[96];
  std::snprintf(head, sizeof(head), "# config_hash=%016llx seed=%llu\n",
                static_cast<unsigned long long>(config_hash),
                static_cast<unsigned long long>(seed));
  out << head;
}

int64_t correct_in_batch(const models::Model<float>& model, const Tensor<float>& images,
                         const int32_t* labels) {
  Tensor<float> logits = models::forward_logits(model, images);
  const int64_t n = logits.shape[0], c = logits.shape[1];
  int64_t ok = 0;
  for (int64_t i = 0; i < n; ++i) {
    const float* row = logits.data.data() + i * c;
    int best = 0;
    for (int64_t j = 1; j < c; ++j)
      if (row[j] > row[best]) best = static_cast<int>(j);
    if (best == labels[i]) ++ok;
  }
  return ok;
}

Tensor<float> slice_images(const Tensor<float>& images, int64_t begin, int64_t end) {
  const int64_t c = images.shape[1], h = images.shape[2], w = images.shape[3];
  const int64_t plane = c * h * w;
  Tensor<float> out = Tensor<float>::zeros({end - begin, c, h, w});
  std::memcpy(out.data.data(), images.data.data() + begin * plane,
              static_cast<size_t>((end - begin) * plane) * sizeof(float));
  return out;
}

}  // namespace

int64_t evaluate_correct(const models::Model<float>& model, const data::Dataset& ds,
                         int batch_size) {
  ds.validate();
  if (model.num_classes() != ds.num_classes)
    throw ValueError("evaluate: model and dataset class counts differ");
  const int64_t n = ds.size();
  int64_t ok = 0;
  for (int64_t begin = 0; begin < n; begin += batch_size) {
    const int64_t end = std::min<int64_t>(n, begin + batch_size);
    Tensor<float> batch = slice_images(ds.images, begin, end);
    ok += correct_in_batch(model, batch, ds.labels.data() + begin);
  }
  return ok;
}

double evaluate_accuracy(const models::Model<float>& model, const data::Dataset& ds,
                         int batch_size) {
  return static_cast<double>(evaluate_correct(model, ds, batch_size)) /
         static_cast<double>(ds.size());
}

SweepReport filtered_accuracy_sweep(const models::Model<float>& model, const data::Dataset& ds,
                                    spectral::MaskMode mode, const std::vector<int64_t>& sizes,
                                    spectral::MaskVariant variant, int batch_size) {
  ds.validate();
  const int64_t h = ds.images.shape[2], w = ds.images.shape[3];
  for (size_t i = 1; i < sizes.size(); ++i)
    if (sizes[i] <= sizes[i - 1]) throw ValueError("sweep sizes must be strictly increasing");
  SweepReport report;
  report.mode = mode;
  report.variant = variant;
  for (int64_t s : sizes) {
    spectral::FrequencyMask mask = spectral::make_mask(h, w, s, mode, variant);
    Tensor<float> filtered = ds.images;
    if (!mask.all_ones()) {
      data::destandardize(filtered, ds.mean, ds.stdev);
      spectral::filter_image_inplace(filtered, mask);
      data::standardize(filtered, ds.mean, ds.stdev);
    }
    data::Dataset copy = ds;
    copy.images = std::move(filtered);
    int64_t ok = evaluate_correct(model, copy, batch_size);
    report.records.push_back({s, static_cast<double>(ok) / static_cast<double>(ds.size()),
                              ds.size()});
  }
  return report;
}

void write_sweep_csv(const std::string& path, const std::vector<SweepReport>& reports,
                     uint64_t config_hash, uint64_t seed) {
  std::ofstream out(path, std::ios::trunc);
  if (!out) throw Error("cannot open sweep csv for writing: " + path);
  csv_header(out, config_hash, seed);
  out << "mode,variant,S,accuracy,n\n";
  for (const auto& rep : reports) {
    const char* mode = rep.mode == spectral::MaskMode::Low ? "low" : "high";
    const char* variant =
        rep.variant == spectral::MaskVariant::AsWritten ? "as_written" : "square";
    for (const auto& rec : rep.records) {
      char line[160];
      std::snprintf(line, sizeof(line), "%s,%s,%lld,%.6f,%lld\n", mode, variant,
                    static_cast<long long>(rec.filter_size), rec.accuracy,
                    static_cast<long long>(rec.count));
      out << line;
    }
  }
}

std::vector<std::pair<int, int>> full_heatmap_offsets(int64_t height, int64_t width) {
  std::vector<std::pair<int, int>> offsets;
  const int hh = static_cast<int>(height / 2), hw = static_cast<int>(width / 2);
  for (int fi = -hh; fi <= hh; ++fi)
    for (int fj = -hw; fj <= hw; ++fj) offsets.emplace_back(fi, fj);
  return offsets;
}

FourierHeatMap fourier_heatmap(const models::Model<float>& model, const data::Dataset& ds,
                               double l2_norm, const std::vector<std::pair<int, int>>& offsets,
                               int64_t subset_size, uint64_t seed, bool mirror, int batch_size) {
  ds.validate();
  if (l2_norm < 0.0) throw ValueError("heatmap: noise norm must be >= 0");
  const int64_t h = ds.images.shape[2], w = ds.images.shape[3], c = ds.images.shape[1];
  SeedSplitter seeds(seed);

  // fixed seed-chosen subset (partial Fisher-Yates)
  const int64_t n = std::min<int64_t>(subset_size, ds.size());
  std::vector<int64_t> pool(static_cast<size_t>(ds.size()));
  std::iota(pool.begin(), pool.end(), 0);
  Rng pick = seeds.rng_for("heatmap-subset");
  for (int64_t i = 0; i < n; ++i) {
    int64_t j = i + static_cast<int64_t>(
                        pick.uniform_int(static_cast<uint64_t>(ds.size() - i)));
    std::swap(pool[static_cast<size_t>(i)], pool[static_cast<size_t>(j)]);
  }
  pool.resize(static_cast<size_t>(n));
  data::Dataset subset = ds.subset(pool);

  FourierHeatMap map;
  map.l2_norm = l2_norm;
  map.sample_count = n;
  map.subset_seed = seed;
  map.clean_error = 1.0 - evaluate_accuracy(model, subset, batch_size);

  // canonical natural bin for an offset
  auto bin_of = [&](int fi, int fj) {
    int64_t si = ((h / 2 + fi) % h + h) % h;
    int64_t sj = ((w / 2 + fj) % w + w) % w;
    return std::make_pair(si, sj);
  };
  auto conj_of = [&](std::pair<int64_t, int64_t> b) {
    return std::make_pair((2 * (h / 2) - b.first % h + h) % h,
                          (2 * (w / 2) - b.second % w + w) % w);
  };

  std::vector<std::pair<int64_t, int64_t>> bins(offsets.size());
  for (size_t i = 0; i < offsets.size(); ++i) bins[i] = bin_of(offsets[i].first, offsets[i].second);

  std::vector<double> cache(static_cast<size_t>(h * w), -1.0);
  map.cells.reserve(offsets.size());
  const int64_t plane = h * w;
  for (size_t idx = 0; idx < offsets.size(); ++idx) {
    const auto [si, sj] = bins[idx];
    double err;
    double& slot = cache[static_cast<size_t>(si * w + sj)];
    double& cslot = cache[static_cast<size_t>(conj_of(bins[idx]).first * w +
                                              conj_of(bins[idx]).second)];
    if (slot >= 0.0) {
      err = slot;
    } else if (mirror && cslot >= 0.0) {
      err = cslot;
      slot = err;
    } else {
      if (l2_norm == 0.0) {
        err = map.clean_error;
      } else {
        std::vector<double> noise =
            spectral::fourier_basis_noise(h, w, si, sj, l2_norm, 1.0);
        Rng sign_rng = seeds.rng_for("heatmap-sign",
                                     static_cast<uint64_t>(si * w + sj));
        int64_t wrong = 0;
        for (int64_t begin = 0; begin < n; begin += batch_size) {
          const int64_t end = std::min<int64_t>(n, begin + batch_size);
          Tensor<float> batch = slice_images(subset.images, begin, end);
          for (int64_t img = 0; img < end - begin; ++img) {
            for (int64_t ch = 0; ch < c; ++ch) {
              const double s = sign_rng.sign() / static_cast<double>(subset.stdev[static_cast<size_t>(ch % 3)]);
              float* p = batch.data.data() + (img * c + ch) * plane;
              for (int64_t e = 0; e < plane; ++e)
                p[e] += static_cast<float>(s * noise[static_cast<size_t>(e)]);
            }
          }
          wrong += (end - begin) - correct_in_batch(model, batch, subset.labels.data() + begin);
        }
        err = static_cast<double>(wrong) / static_cast<double>(n);
      }
      slot = err;
    }
    map.cells.push_back({offsets[idx].first, offsets[idx].second, err});
  }
  return map;
}

void write_heatmap_csv(const std::string& path, const FourierHeatMap& map, int64_t height,
                       int64_t width, uint64_t config_hash, uint64_t seed) {
  std::ofstream out(path, std::ios::trunc);
  if (!out) throw Error("cannot open heatmap csv for writing: " + path);
  csv_header(out, config_hash, seed);
  out << "i,j,error_rate\n";
  for (const auto& cell : map.cells) {
    char line[96];
    std::snprintf(line, sizeof(line), "%lld,%lld,%.6f\n",
                  static_cast<long long>(cell.fi + height / 2),
                  static_cast<long long>(cell.fj + width / 2), cell.error_rate);
    out << line;
  }
}

SpectrumReport perturbation_spectrum_report(const models::Model<float>& model,
                                            const data::Dataset& ds, const hat::HatConfig& cfg,
                                            int64_t samples, int64_t filter_size,
                                            int batch_size) {
  ds.validate();
  const int64_t n = std::min<int64_t>(samples, ds.size());
  data::Dataset subset = ds.head(n);
  const int64_t c = subset.images.shape[1], h = subset.images.shape[2], w = subset.images.shape[3];

  Tensor<float> natural = subset.images;
  data::destandardize(natural, subset.mean, subset.stdev);
  Tensor<float> deltas = Tensor<float>::zeros(subset.images.shape);
  const int64_t plane = c * h * w;
  for (int64_t begin = 0; cfg.k > 0 && begin < n; begin += batch_size) {
    const int64_t end = std::min<int64_t>(n, begin + batch_size);
    Tensor<float> batch = slice_images(subset.images, begin, end);
    std::vector<int32_t> labels(subset.labels.begin() + begin, subset.labels.begin() + end);
    Tensor<float> delta = hat::pgd_craft(model, batch, labels, cfg, subset.stdev);
    std::memcpy(deltas.data.data() + begin * plane, delta.data.data(),
                static_cast<size_t>((end - begin) * plane) * sizeof(float));
  }
  // deltas live in standardized units; scale (no shift) back to pixel units
  for (int64_t img = 0; img < n; ++img)
    for (int64_t ch = 0; ch < c; ++ch) {
      float* p = deltas.data.data() + (img * c + ch) * h * w;
      const float s = subset.stdev[static_cast<size_t>(ch % 3)];
      for (int64_t e = 0; e < h * w; ++e) p[e] *= s;
    }

  SpectrumReport rep;
  rep.sample_count = n;
  rep.filter_size = filter_size;
  rep.natural_map = spectral::spectrum_energy_map(natural);
  rep.perturbation_map = spectral::spectrum_energy_map(deltas);
  double nat_sum = 0.0, pert_sum = 0.0;
  int64_t pert_counted = 0;
  for (int64_t img = 0; img < n; ++img) {
    Tensor<float> one({c, h, w},
                      std::vector<float>(natural.data.begin() + img * plane,
                                         natural.data.begin() + (img + 1) * plane));
    nat_sum += spectral::highfreq_energy_ratio(one, filter_size);
    Tensor<float> od({c, h, w},
                     std::vector<float>(deltas.data.begin() + img * plane,
                                        deltas.data.begin() + (img + 1) * plane));
    double denom = 0.0;
    for (float v : od.data) denom += static_cast<double>(v) * static_cast<double>(v);
    if (denom > 0.0) {
      pert_sum += spectral::highfreq_energy_ratio(od, filter_size);
      ++pert_counted;
    }
  }
  rep.natural_highfreq_ratio = nat_sum / static_cast<double>(n);
  rep.perturbation_highfreq_ratio =
      pert_counted > 0 ? pert_sum / static_cast<double>(pert_counted) : 0.0;
  return rep;
}

void write_spectrum_csv(const std::string& path, const SpectrumReport& report,
                        uint64_t config_hash, uint64_t seed) {
  std::ofstream out(path, std::ios::trunc);
  if (!out) throw Error("cannot open spectrum csv for writing: " + path);
  csv_header(out, config_hash, seed);
  out << "i,j,natural_energy,perturbation_energy\n";
  const int64_t h = report.natural_map.shape[0], w = report.natural_map.shape[1];
  for (int64_t i = 0; i < h; ++i)
    for (int64_t j = 0; j < w; ++j) {
      char line[128];
      std::snprintf(line, sizeof(line), "%lld,%lld,%.6f,%.6f\n", static_cast<long long>(i),
                    static_cast<long long>(j), report.natural_map.at({i, j}),
                    report.perturbation_map.at({i, j}));
      out << line;
    }
}

}  // namespace hatkit::eval
