#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include <cmath>

#include "hatkit/errors.hpp"
#include "hatkit/hat.hpp"
#include "hatkit/losses.hpp"
#include "hatkit/models.hpp"
#include "test_support.hpp"

using namespace hatkit;
using namespace hatkit::losses;

namespace {

models::ViTConfig tiny_vit() {
  models::ViTConfig c;
  c.image_size = 8;
  c.patch_size = 4;
  c.embed_dim = 16;
  c.depth = 1;
  c.heads = 2;
  c.num_classes = 4;
  return c;
}

const std::array<float, 3> kStd{0.25f, 0.25f, 0.25f};

template <class T>
double softmax_prob(const std::vector<double>& logits, size_t i) {
  double mx = *std::max_element(logits.begin(), logits.end());
  double denom = 0.0;
  for (double v : logits) denom += std::exp(v - mx);
  return std::exp(logits[i] - mx) / denom;
}

}  // namespace

TEST_CASE("ce loss anchors") {
  {
    Graph<double> g;
    auto logits = g.leaf(Tensor<double>::zeros({2, 7}));
    auto loss = ce_loss(g, logits, std::vector<int32_t>{0, 3});
    CHECK(g.value(loss).data[0] == doctest::Approx(std::log(7.0)).epsilon(1e-12));
  }
  {
    // a 20-margin logit drives the loss below 1e-8
    Graph<double> g;
    auto logits = g.leaf(Tensor<double>({1, 3}, {20.0, 0.0, 0.0}));
    auto loss = ce_loss(g, logits, std::vector<int32_t>{0});
    CHECK(g.value(loss).data[0] < 1e-8);
    CHECK(g.value(loss).data[0] >= 0.0);
  }
  {
    Graph<double> g;
    auto logits = g.leaf(Tensor<double>({1, 3}, {1.0, 2.0, 3.0}));
    auto loss = ce_loss(g, logits, std::vector<int32_t>{2});
    CHECK(g.value(loss).data[0] == doctest::Approx(0.40760596444438).epsilon(1e-10));
  }
}

TEST_CASE("ce loss rejects non-normalized soft labels") {
  Graph<float> g;
  auto logits = g.leaf(Tensor<float>::zeros({1, 3}));
  Tensor<float> bad({1, 3}, {0.5f, 0.5f, 0.2f});
  CHECK_THROWS_AS(ce_loss(g, logits, bad), ValueError);
  Tensor<float> good({1, 3}, {0.25f, 0.25f, 0.5f});
  auto loss = ce_loss(g, logits, good);
  CHECK(g.value(loss).data[0] == doctest::Approx(std::log(3.0)));
}

TEST_CASE("symmetric_kl anchors") {
  {
    Graph<double> g;
    Rng rng(1);
    Tensor<double> x = random_normal<double>({3, 5}, rng);
    auto a = g.leaf(x);
    auto b = g.leaf(x);
    auto kl = symmetric_kl(g, a, b);
    CHECK(std::fabs(g.value(kl).data[0]) < 1e-12);
  }
  {
    Graph<double> g;
    Rng rng(2);
    Tensor<double> x = random_normal<double>({2, 4}, rng);
    Tensor<double> y = random_normal<double>({2, 4}, rng);
    auto v1 = symmetric_kl(g, g.leaf(x), g.leaf(y));
    auto v2 = symmetric_kl(g, g.leaf(y), g.leaf(x));
    CHECK(g.value(v1).data[0] == doctest::Approx(g.value(v2).data[0]).epsilon(1e-12));
  }
  {
    // p = softmax([0,0]) = [.5,.5], q = softmax([0,ln3]) = [.25,.75]
    Graph<double> g;
    auto p = g.leaf(Tensor<double>({1, 2}, {0.0, 0.0}));
    auto q = g.leaf(Tensor<double>({1, 2}, {0.0, std::log(3.0)}));
    auto kl = symmetric_kl(g, p, q);
    const double kl_pq = 0.5 * std::log(0.5 / 0.25) + 0.5 * std::log(0.5 / 0.75);
    const double kl_qp = 0.25 * std::log(0.25 / 0.5) + 0.75 * std::log(0.75 / 0.5);
    CHECK(g.value(kl).data[0] == doctest::Approx(0.5 * (kl_pq + kl_qp)).epsilon(1e-12));
  }
}

TEST_CASE("symmetric_kl survives extreme logits") {
  Graph<float> g;
  auto p = g.leaf(Tensor<float>({1, 2}, {1000.0f, 0.0f}));
  auto q = g.leaf(Tensor<float>({1, 2}, {0.0f, 1000.0f}));
  auto kl = symmetric_kl(g, p, q);
  CHECK(std::isfinite(g.value(kl).data[0]));
}

TEST_CASE("distillation loss cases") {
  {
    // teacher agrees with the label: equals plain CE
    Graph<double> g;
    Tensor<double> logits({1, 3}, {0.2, 1.4, -0.3});
    Tensor<double> teacher({1, 3}, {0.0, 5.0, 0.0});
    auto l1 = distill_loss(g, g.leaf(logits), std::vector<int32_t>{1}, teacher);
    auto l2 = ce_loss(g, g.leaf(logits), std::vector<int32_t>{1});
    CHECK(g.value(l1).data[0] == doctest::Approx(g.value(l2).data[0]).epsilon(1e-12));
  }
  {
    // uniform student logits: ln C regardless of the teacher
    Graph<double> g;
    Tensor<double> teacher({1, 5}, {9.0, 1.0, 2.0, 3.0, 4.0});
    auto loss = distill_loss(g, g.leaf(Tensor<double>::zeros({1, 5})),
                             std::vector<int32_t>{3}, teacher);
    CHECK(g.value(loss).data[0] == doctest::Approx(std::log(5.0)).epsilon(1e-12));
  }
  {
    // disagreeing teacher: average of the two CE terms, by the formula
    Graph<double> g;
    Tensor<double> logits({1, 3}, {1.0, 2.0, 3.0});
    Tensor<double> teacher({1, 3}, {4.0, 0.0, 0.0});  // argmax 0, label 2
    auto loss = distill_loss(g, g.leaf(logits), std::vector<int32_t>{2}, teacher);
    std::vector<double> lv{1.0, 2.0, 3.0};
    double ce_y = -std::log(softmax_prob<double>(lv, 2));
    double ce_t = -std::log(softmax_prob<double>(lv, 0));
    CHECK(g.value(loss).data[0] == doctest::Approx(0.5 * (ce_y + ce_t)).epsilon(1e-10));
  }
  {
    // teacher ties break toward the lowest class index
    Tensor<double> teacher({1, 3}, {2.0, 2.0, 1.0});
    CHECK(hard_decisions(teacher) == std::vector<int32_t>{0});
  }
  {
    Graph<double> g;
    Tensor<double> teacher({1, 4}, {0, 0, 0, 0});
    CHECK_THROWS_AS(
        distill_loss(g, g.leaf(Tensor<double>::zeros({1, 3})), std::vector<int32_t>{0}, teacher),
        ShapeError);
  }
}

TEST_CASE("hat K=1 reduces to the plain clean-CE gradient and one sign step") {
  auto model = models::make_model<double>(models::ModelKind::Vit, tiny_vit(), {}, 21);
  Rng rng(22);
  Tensor<double> images = random_normal<double>({3, 3, 8, 8}, rng);
  std::vector<int32_t> labels{0, 1, 2};
  hat::HatConfig cfg;
  cfg.k = 1;
  hat::HatStepOptions<double> opts;
  opts.record_deltas = true;
  auto res = hat::hat_minibatch(model, images, labels, cfg, kStd, opts);

  // reference: plain CE gradient at clean x
  Graph<double> g;
  auto bound = models::bind_params(g, model.params, true);
  auto logits = model.forward(g, bound, g.leaf(images));
  auto loss = ce_loss(g, logits, labels);
  g.backward(loss);
  for (size_t i = 0; i < bound.ids.size(); ++i) {
    const auto& expect = g.grad(bound.ids[i]);
    const auto& got = res.grads.entries[i].second;
    CHECK(max_abs_diff(expect, got) < 1e-12);
  }
  // the emitted delta is one sign step, bounded by min(eta, eps) in pixel units
  const double bound_px = std::min(cfg.eta, cfg.epsilon);
  for (int64_t img = 0; img < 3; ++img)
    for (int64_t ch = 0; ch < 3; ++ch)
      for (int64_t e = 0; e < 64; ++e) {
        double px = res.delta.at({img, ch, e / 8, e % 8}) * kStd[static_cast<size_t>(ch)];
        CHECK(std::fabs(px) <= bound_px + 1e-12);
      }
}

TEST_CASE("hat step-2 gradient matches a manual two-pass computation (alpha=1, beta=0, K=2)") {
  auto model = models::make_model<double>(models::ModelKind::Vit, tiny_vit(), {}, 23);
  Rng rng(24);
  Tensor<double> images = random_normal<double>({2, 3, 8, 8}, rng);
  std::vector<int32_t> labels{1, 3};
  hat::HatConfig cfg;
  cfg.k = 2;
  cfg.alpha = 1.0;
  cfg.beta = 0.0;
  hat::HatStepOptions<double> opts;
  opts.record_deltas = true;
  auto res = hat::hat_minibatch(model, images, labels, cfg, kStd, opts);
  REQUIRE(res.delta_history.size() == 3);  // delta_0, delta_1, delta_2

  // manual pass 1: clean CE gradient
  models::ModelParams<double> manual;
  for (const auto& [name, t] : model.params.entries) manual.add(name, Tensor<double>::zeros(t.shape));
  {
    Graph<double> g;
    auto bound = models::bind_params(g, model.params, true);
    auto loss = ce_loss(g, model.forward(g, bound, g.leaf(images)), labels);
    g.backward(loss);
    for (size_t i = 0; i < bound.ids.size(); ++i) {
      const auto& gp = g.grad(bound.ids[i]);
      for (size_t e = 0; e < gp.data.size(); ++e) manual.entries[i].second.data[e] += gp.data[e];
    }
  }
  // manual pass 2: adversarial CE at x + delta_1 (K-1 divisor = 1)
  {
    Tensor<double> adv = images;
    const Tensor<double>& d1 = res.delta_history[1];
    for (size_t e = 0; e < adv.data.size(); ++e) adv.data[e] += d1.data[e];
    Graph<double> g;
    auto bound = models::bind_params(g, model.params, true);
    auto loss = ce_loss(g, model.forward(g, bound, g.leaf(adv)), labels);
    g.backward(loss);
    for (size_t i = 0; i < bound.ids.size(); ++i) {
      const auto& gp = g.grad(bound.ids[i]);
      for (size_t e = 0; e < gp.data.size(); ++e) manual.entries[i].second.data[e] += gp.data[e];
    }
  }
  for (size_t i = 0; i < manual.entries.size(); ++i) {
    double scale = std::max(1.0, max_abs(manual.entries[i].second));
    CHECK(max_abs_diff(manual.entries[i].second, res.grads.entries[i].second) / scale < 1e-9);
  }
}

TEST_CASE("delta stays inside the epsilon ball at every PGD step") {
  auto model = models::make_model<float>(models::ModelKind::Vit, tiny_vit(), {}, 25);
  hat::HatConfig cfg;  // paper defaults: eps 2/255, eta 1/255, K 3
  CHECK(cfg.epsilon == doctest::Approx(2.0 / 255.0));
  CHECK(cfg.eta == doctest::Approx(1.0 / 255.0));
  CHECK(cfg.k == 3);
  CHECK(cfg.alpha == doctest::Approx(3.0));
  CHECK(cfg.beta == doctest::Approx(0.01));
  Rng rng(26);
  for (int trial = 0; trial < 10; ++trial) {
    Tensor<float> images = random_normal<float>({4, 3, 8, 8}, rng);
    std::vector<int32_t> labels{0, 1, 2, 3};
    hat::HatStepOptions<float> opts;
    opts.record_deltas = true;
    auto res = hat::hat_minibatch(model, images, labels, cfg, kStd, opts);
    for (const auto& d : res.delta_history)
      for (int64_t img = 0; img < 4; ++img)
        for (int64_t ch = 0; ch < 3; ++ch) {
          const float lim = static_cast<float>(cfg.epsilon) / kStd[static_cast<size_t>(ch)];
          for (int64_t e = 0; e < 64; ++e)
            CHECK(std::fabs(d.at({img, ch, e / 8, e % 8})) <= lim);
        }
  }
}

TEST_CASE("high-frequency constrained perturbations have no low-band energy") {
  auto model = models::make_model<float>(models::ModelKind::Vit, tiny_vit(), {}, 27);
  hat::HatConfig cfg;
  cfg.freq_mode = hat::FreqMode::High;
  cfg.freq_s = 4;
  Rng rng(28);
  Tensor<float> images = random_normal<float>({2, 3, 8, 8}, rng);
  std::vector<int32_t> labels{1, 2};
  auto res = hat::hat_minibatch(model, images, labels, cfg, kStd, {});
  auto mask = spectral::make_mask(8, 8, cfg.freq_s, spectral::MaskMode::High);
  Tensor<float> applied = spectral::filter_image(res.delta, mask);
  // complement (low-band) energy must be a vanishing fraction of the total
  std::vector<double> plane(64);
  for (int64_t img = 0; img < 2; ++img)
    for (int64_t ch = 0; ch < 3; ++ch) {
      for (int64_t e = 0; e < 64; ++e)
        plane[static_cast<size_t>(e)] = applied.at({img, ch, e / 8, e % 8});
      auto spec = spectral::to_shifted(spectral::dft2(plane, 8, 8));
      double total = 0.0, low = 0.0;
      for (int64_t b = 0; b < 64; ++b) {
        double e2 = std::norm(spec.coeff[static_cast<size_t>(b)]);
        total += e2;
        if (!mask.grid[static_cast<size_t>(b)]) low += e2;
      }
      REQUIRE(total > 0.0);
      CHECK(low / total < 1e-6);
    }
}

TEST_CASE("accumulated gradient equals the sum of per-step recomputations") {
  auto model = models::make_model<double>(models::ModelKind::Vit, tiny_vit(), {}, 29);
  Rng rng(30);
  Tensor<double> images = random_normal<double>({2, 3, 8, 8}, rng);
  std::vector<int32_t> labels{2, 0};
  hat::HatConfig cfg;  // K=3, alpha=3, beta=0.01
  hat::HatStepOptions<double> opts;
  opts.record_deltas = true;
  auto res = hat::hat_minibatch(model, images, labels, cfg, kStd, opts);
  REQUIRE(res.delta_history.size() == 4);

  models::ModelParams<double> manual;
  for (const auto& [name, t] : model.params.entries)
    manual.add(name, Tensor<double>::zeros(t.shape));
  for (int t = 1; t <= cfg.k; ++t) {
    const Tensor<double>& frozen = res.delta_history[static_cast<size_t>(t - 1)];
    Graph<double> g;
    auto bound = models::bind_params(g, model.params, true);
    Tensor<double> adv = images;
    for (size_t e = 0; e < adv.data.size(); ++e) adv.data[e] += frozen.data[e];
    auto x_adv = g.leaf(adv);
    Graph<double>::Id loss;
    if (t == 1) {
      loss = ce_loss(g, model.forward(g, bound, x_adv), labels);
    } else {
      auto la = model.forward(g, bound, x_adv);
      auto lc = model.forward(g, bound, g.leaf(images));
      auto combined = g.add(g.scale(ce_loss(g, la, labels), cfg.alpha),
                            g.scale(symmetric_kl(g, la, lc), cfg.beta));
      loss = g.scale(combined, 1.0 / static_cast<double>(cfg.k - 1));
    }
    g.backward(loss);
    for (size_t i = 0; i < bound.ids.size(); ++i) {
      const auto& gp = g.grad(bound.ids[i]);
      for (size_t e = 0; e < gp.data.size(); ++e) manual.entries[i].second.data[e] += gp.data[e];
    }
  }
  for (size_t i = 0; i < manual.entries.size(); ++i) {
    double scale = std::max(1.0, max_abs(manual.entries[i].second));
    CHECK(max_abs_diff(manual.entries[i].second, res.grads.entries[i].second) / scale < 1e-5);
  }
}

TEST_CASE("hat config validation") {
  hat::HatConfig cfg;
  cfg.eta = 0.0;
  CHECK_THROWS_AS(cfg.validate(), ValueError);
  cfg = {};
  cfg.k = 0;
  CHECK_THROWS_AS(cfg.validate(), ValueError);
  cfg = {};
  cfg.adv_fraction = 1.5;
  CHECK_THROWS_AS(cfg.validate(), ValueError);
  cfg = {};
  cfg.alpha = -1.0;
  CHECK_THROWS_AS(cfg.validate(), ValueError);
  CHECK(hat::freq_mode_from_name("high") == hat::FreqMode::High);
  CHECK_THROWS_AS(hat::freq_mode_from_name("sideways"), ValueError);
}
