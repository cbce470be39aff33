#pragma once

#include <array>
#include <optional>
#include <string>
#include <vector>

#include "hatkit/models.hpp"
#include "hatkit/spectral.hpp"
#include "hatkit/tensor.hpp"

namespace hatkit::hat {

enum class FreqMode { Full, High, Low };

// Perturbation strengths are expressed in pre-normalization pixel units
// ("2/255") and rescaled by the per-channel standardization divisor before
// touching standardized tensors.
struct HatConfig {
  double epsilon = 2.0 / 255.0;
  double eta = 1.0 / 255.0;
  int k = 3;
  double alpha = 3.0;
  double beta = 0.01;
  double adv_fraction = 2.0 / 3.0;
  FreqMode freq_mode = FreqMode::Full;
  int freq_s = 8;

  void validate() const;
};

std::string freq_mode_name(FreqMode m);
FreqMode freq_mode_from_name(const std::string& s);

template <class T>
struct HatStepOptions {
  bool record_deltas = false;           // capture delta_0 .. delta_K
  const Tensor<T>* teacher_logits = nullptr;  // switches CE to the distillation loss
  const Tensor<T>* soft_labels = nullptr;     // overrides integer labels when set
};

template <class T>
struct HatStepResult {
  models::ModelParams<T> grads;  // accumulated g_K, aligned with model params
  Tensor<T> delta;               // final delta_K (standardized units)
  std::vector<Tensor<T>> delta_history;
  double clean_loss = 0.0;  // step-1 loss value
  double adv_loss = 0.0;    // last step's weighted loss value
  double kl = 0.0;          // last step's symmetric KL value
};

// One minibatch of the accumulated-gradient PGD scheme:
//   delta_0 = 0
//   t = 1:       grads of L(theta, x + M(delta_0), y)
//   t = 2..K:    grads of (1/(K-1)) * [alpha * L(theta, x + M(delta), y)
//                                      + beta * L_kl(theta, x + M(delta), x)]
//   after each step: g += grad_theta;
//                    delta = clip(delta + eta * sign(grad_delta), -eps, +eps)
// M is the identity (Full) or the configured low/high-pass filter; the raw
// delta variable is what gets clipped. The clean branch of L_kl is recomputed
// inside the same graph so the theta-gradient is exact through both branches.
template <class T>
HatStepResult<T> hat_minibatch(const models::Model<T>& model, const Tensor<T>& images,
                               const std::vector<int32_t>& labels, const HatConfig& cfg,
                               const std::array<float, 3>& channel_stdev,
                               const HatStepOptions<T>& opts = {});

// Crafts the PGD perturbation only (same inner loop, gradients discarded).
template <class T>
Tensor<T> pgd_craft(const models::Model<T>& model, const Tensor<T>& images,
                    const std::vector<int32_t>& labels, const HatConfig& cfg,
                    const std::array<float, 3>& channel_stdev);

}  // namespace hatkit::hat
