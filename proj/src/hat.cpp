#include "hatkit/hat.hpp"

#include <cmath>

#include "hatkit/errors.hpp"
#include "hatkit/losses.hpp"

namespace hatkit::hat {

void HatConfig::validate() const {
  if (!(eta > 0.0)) throw ValueError("hat config: eta must be > 0");
  if (epsilon < 0.0) throw ValueError("hat config: epsilon must be >= 0");
  if (k < 1) throw ValueError("hat config: K must be >= 1");
  if (alpha < 0.0 || beta < 0.0) throw ValueError("hat config: alpha and beta must be >= 0");
  if (adv_fraction < 0.0 || adv_fraction > 1.0)
    throw ValueError("hat config: adv fraction must lie in [0, 1]");
  if (freq_mode != FreqMode::Full && freq_s <= 0)
    throw ValueError("hat config: filter size must be positive for constrained modes");
}

std::string freq_mode_name(FreqMode m) {
  switch (m) {
    case FreqMode::Full: return "full";
    case FreqMode::High: return "high";
    case FreqMode::Low: return "low";
  }
  return "full";
}

FreqMode freq_mode_from_name(const std::string& s) {
  if (s == "full") return FreqMode::Full;
  if (s == "high") return FreqMode::High;
  if (s == "low") return FreqMode::Low;
  throw ValueError("unknown frequency mode '" + s + "' (expected full|high|low)");
}

template <class T>
HatStepResult<T> hat_minibatch(const models::Model<T>& model, const Tensor<T>& images,
                               const std::vector<int32_t>& labels, const HatConfig& cfg,
                               const std::array<float, 3>& channel_stdev,
                               const HatStepOptions<T>& opts) {
  cfg.validate();
  if (images.rank() != 4) throw ShapeError("hat_minibatch: images must be (N,C,H,W)");
  const int64_t n = images.shape[0], c = images.shape[1], h = images.shape[2], w = images.shape[3];
  if (static_cast<int64_t>(labels.size()) != n)
    throw ShapeError("hat_minibatch: label count does not match the batch");

  std::optional<spectral::FrequencyMask> mask;
  if (cfg.freq_mode != FreqMode::Full) {
    mask = spectral::make_mask(h, w, cfg.freq_s,
                               cfg.freq_mode == FreqMode::High ? spectral::MaskMode::High
                                                               : spectral::MaskMode::Low,
                               spectral::MaskVariant::AsWritten);
  }
  std::array<double, 3> eps_scaled{}, eta_scaled{};
  for (int ch = 0; ch < 3; ++ch) {
    eps_scaled[static_cast<size_t>(ch)] = cfg.epsilon / static_cast<double>(channel_stdev[static_cast<size_t>(ch)]);
    eta_scaled[static_cast<size_t>(ch)] = cfg.eta / static_cast<double>(channel_stdev[static_cast<size_t>(ch)]);
  }

  HatStepResult<T> res;
  res.delta = Tensor<T>::zeros(images.shape);
  for (const auto& [name, t] : model.params.entries)
    res.grads.add(name, Tensor<T>::zeros(t.shape));
  if (opts.record_deltas) res.delta_history.push_back(res.delta);

  const int64_t plane = h * w;
  for (int t = 1; t <= cfg.k; ++t) {
    Graph<T> g;
    auto bound = models::bind_params(g, model.params, /*requires_grad=*/true);
    auto x_clean = g.leaf(images.with_grad(false));
    auto delta_leaf = g.leaf(res.delta.with_grad(true));
    auto applied = mask ? g.freq_filter(delta_leaf, *mask) : delta_leaf;
    auto x_adv = g.add(x_clean, applied);
    auto logits_adv = model.forward(g, bound, x_adv);

    typename Graph<T>::Id loss;
    if (t == 1) {
      if (opts.teacher_logits) {
        loss = opts.soft_labels
                   ? losses::distill_loss(g, logits_adv, *opts.soft_labels, *opts.teacher_logits)
                   : losses::distill_loss(g, logits_adv, labels, *opts.teacher_logits);
      } else {
        loss = opts.soft_labels ? losses::ce_loss(g, logits_adv, *opts.soft_labels)
                                : losses::ce_loss(g, logits_adv, labels);
      }
      res.clean_loss = static_cast<double>(g.value(loss).data[0]);
    } else {
      auto logits_clean = model.forward(g, bound, x_clean);
      typename Graph<T>::Id task_loss;
      if (opts.teacher_logits) {
        task_loss = opts.soft_labels
                        ? losses::distill_loss(g, logits_adv, *opts.soft_labels, *opts.teacher_logits)
                        : losses::distill_loss(g, logits_adv, labels, *opts.teacher_logits);
      } else {
        task_loss = opts.soft_labels ? losses::ce_loss(g, logits_adv, *opts.soft_labels)
                                     : losses::ce_loss(g, logits_adv, labels);
      }
      auto kl = losses::symmetric_kl(g, logits_adv, logits_clean);
      res.kl = static_cast<double>(g.value(kl).data[0]);
      auto combined = g.add(g.scale(task_loss, static_cast<T>(cfg.alpha)),
                            g.scale(kl, static_cast<T>(cfg.beta)));
      loss = g.scale(combined, static_cast<T>(1.0 / static_cast<double>(cfg.k - 1)));
      res.adv_loss = static_cast<double>(g.value(loss).data[0]);
    }

    g.backward(loss);

    // g_t = g_{t-1} + grad_theta
    for (size_t pi = 0; pi < bound.ids.size(); ++pi) {
      const Tensor<T>& gp = g.grad(bound.ids[pi]);
      auto& acc = res.grads.entries[pi].second.data;
      for (size_t e = 0; e < acc.size(); ++e) acc[e] += gp.data[e];
    }

    // delta_t = clip(delta_{t-1} + eta * sign(grad_delta), -eps, +eps); sign(0) = 0
    const Tensor<T>& gd = g.grad(delta_leaf);
    for (int64_t img = 0; img < n; ++img) {
      for (int64_t ch = 0; ch < c; ++ch) {
        const double eps_c = eps_scaled[static_cast<size_t>(ch % 3)];
        const double eta_c = eta_scaled[static_cast<size_t>(ch % 3)];
        T* dp = res.delta.data.data() + (img * c + ch) * plane;
        const T* gp = gd.data.data() + (img * c + ch) * plane;
        for (int64_t e = 0; e < plane; ++e) {
          double s = gp[e] > T(0) ? 1.0 : (gp[e] < T(0) ? -1.0 : 0.0);
          double v = static_cast<double>(dp[e]) + eta_c * s;
          dp[e] = static_cast<T>(std::clamp(v, -eps_c, eps_c));
        }
      }
    }
    if (opts.record_deltas) res.delta_history.push_back(res.delta);
  }
  return res;
}

template HatStepResult<float> hat_minibatch<float>(const models::Model<float>&,
                                                   const Tensor<float>&,
                                                   const std::vector<int32_t>&, const HatConfig&,
                                                   const std::array<float, 3>&,
                                                   const HatStepOptions<float>&);
template HatStepResult<double> hat_minibatch<double>(const models::Model<double>&,
                                                     const Tensor<double>&,
                                                     const std::vector<int32_t>&, const HatConfig&,
                                                     const std::array<float, 3>&,
                                                     const HatStepOptions<double>&);

template <class T>
Tensor<T> pgd_craft(const models::Model<T>& model, const Tensor<T>& images,
                    const std::vector<int32_t>& labels, const HatConfig& cfg,
                    const std::array<float, 3>& channel_stdev) {
  return hat_minibatch(model, images, labels, cfg, channel_stdev, {}).delta;
}

template Tensor<float> pgd_craft<float>(const models::Model<float>&, const Tensor<float>&,
                                        const std::vector<int32_t>&, const HatConfig&,
                                        const std::array<float, 3>&);
template Tensor<double> pgd_craft<double>(const models::Model<double>&, const Tensor<double>&,
                                          const std::vector<int32_t>&, const HatConfig&,
                                          const std::array<float, 3>&);

}  // namespace hatkit::hat
