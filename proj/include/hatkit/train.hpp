#pragma once

#include <functional>
#include <string>
#include <vector>

#include "hatkit/data.hpp"
#include "hatkit/hat.hpp"
#include "hatkit/models.hpp"

namespace hatkit::train {

enum class Method { Baseline, Hat };

struct TrainConfig {
  Method method = Method::Baseline;
  int epochs = 50;
  int batch_size = 128;
  double lr = 1e-3;
  double weight_decay = 0.05;
  double warmup_epochs = 2.0;
  bool augment = true;        // random crop + horizontal flip
  bool mixup = false;
  double mixup_alpha = 0.8;
  bool cutmix = false;
  bool augment_in_adv = true;  // compose augmentations before the perturbation
  int eval_every = 1;          // 0 = evaluate only after the final epoch
  int64_t eval_limit = 0;      // 0 = the whole eval split
  uint64_t seed = 0;

  void validate() const;
};

struct EpochMetrics {
  int epoch = 0;              // 1-based
  bool adversarial = false;   // phase column: adv | normal
  double train_loss = 0.0;
  double train_acc = 0.0;
  double eval_acc = -1.0;     // -1 when evaluation was skipped this epoch
  double wall_seconds = 0.0;
};

struct TrainResult {
  models::Model<float> model;
  std::vector<EpochMetrics> log;
};

// Adam with decoupled weight decay; 1-D tensors (biases, norm affines, the
// class token) are excluded from decay.
struct AdamW {
  double beta1 = 0.9;
  double beta2 = 0.999;
  double eps = 1e-8;
  double weight_decay = 0.0;
  models::ModelParams<float> m, v;
  int64_t step = 0;

  void init(const models::ModelParams<float>& params);
  void update(models::ModelParams<float>& params, const models::ModelParams<float>& grads,
              double lr);
};

// Linear warmup into cosine decay, measured in optimizer steps.
double lr_at(double base_lr, int64_t step, int64_t warmup_steps, int64_t total_steps);

// Epochs 1..ceil(adv_fraction * epochs) run the accumulated-gradient PGD
// step (Method::Hat only); the rest run plain supervised steps. Deterministic
// for a fixed seed.
TrainResult train(models::Model<float> model, const data::Dataset& train_set,
                  const data::Dataset& eval_set, const TrainConfig& tc,
                  const hat::HatConfig& hc, const models::Model<float>* teacher = nullptr,
                  const std::function<void(const EpochMetrics&)>& on_epoch = nullptr);

void write_metrics_csv(const std::string& path, const std::vector<EpochMetrics>& log,
                       uint64_t config_hash, uint64_t seed);

struct AblationRow {
  std::string strategy;
  double eval_acc = 0.0;
  uint64_t config_hash = 0;
};

// Four runs with a shared seed: baseline, low(S), high(S), full.
std::vector<AblationRow> ablation_matrix(const models::Model<float>& init,
                                         const data::Dataset& train_set,
                                         const data::Dataset& eval_set, const TrainConfig& tc,
                                         const hat::HatConfig& hc);

void write_ablation_csv(const std::string& path, const std::vector<AblationRow>& rows,
                        uint64_t config_hash, uint64_t seed);

}  // namespace hatkit::train
