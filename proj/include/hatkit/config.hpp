#pragma once

#include <cstdint>
#include <string>
#include <utility>
#include <vector>

#include "hatkit/data.hpp"
#include "hatkit/hat.hpp"
#include "hatkit/models.hpp"
#include "hatkit/train.hpp"

namespace hatkit::config {

struct DataConfig {
  std::string kind = "synthetic";  // cifar10 | raw | synthetic
  std::string dir;                 // cifar10 batch directory
  std::string path;                // raw container path
  std::string eval_path;           // optional raw eval container
  int64_t train_limit = 0;         // 0 = all
  int64_t eval_limit = 0;
  int64_t synth_train = 2000;
  int64_t synth_eval = 1000;
  int synth_classes = 10;
};

struct EvalConfig {
  std::vector<int64_t> sweep_sizes{4, 8, 12, 16, 20, 24, 28, 32};
  std::string sweep_mode = "both";    // low | high | both
  std::string mask_variant = "both";  // as_written | square | both
  double heatmap_norm = 15.7 * 32.0 / 224.0;
  int64_t heatmap_subset = 1000;
  bool heatmap_mirror = true;
  int64_t spectrum_samples = 256;
  int64_t spectrum_s = 8;
};

struct DistillConfig {
  bool enabled = false;
  std::string teacher_checkpoint;
  std::string teacher_kind = "cnn";  // vit | cnn
};

struct RunConfig {
  uint64_t seed = 0;
  std::string precision = "f32";  // f32 | f64 (verification utilities)
  int threads = 0;                // 0 = hardware default
  std::string out_dir = "runs/out";
  std::string version;            // echoed for provenance; accepted on re-parse
  std::string checkpoint;         // model input for analysis commands

  DataConfig data;
  std::string model_kind = "vit";  // vit | cnn
  models::ViTConfig vit;
  std::string vit_pooling = "mean";  // mean | class_token
  models::CnnConfig cnn;
  train::TrainConfig train;
  std::string train_method = "baseline";  // baseline | hat
  hat::HatConfig hat;
  std::string hat_freq_mode = "full";
  EvalConfig eval;
  DistillConfig distill;

  void validate_and_fill();  // cross-field resolution (enums, method flags)
};

// Parse a JSON config file (// comments allowed) plus dotted-path overrides
// like {"hat.k", "2"}. Unknown keys are rejected naming the nearest valid key.
RunConfig parse_config(const std::string& file_path,
                       const std::vector<std::pair<std::string, std::string>>& overrides);

// Canonical serialized form; hash and echo are derived from it.
std::string to_canonical_json(const RunConfig& cfg);
uint64_t config_hash(const RunConfig& cfg);
void write_config_echo(const RunConfig& cfg, const std::string& path);

// All valid dotted keys (for CLI flag generation).
const std::vector<std::string>& all_config_keys();

}  // namespace hatkit::config
