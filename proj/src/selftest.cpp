#include "hatkit/selftest.hpp"

#include <cmath>
#include <functional>

#include "hatkit/data.hpp"
#include "hatkit/eval.hpp"
#include "hatkit/graph.hpp"
#include "hatkit/hat.hpp"
#include "hatkit/losses.hpp"
#include "hatkit/models.hpp"
#include "hatkit/rng.hpp"
#include "hatkit/spectral.hpp"

namespace hatkit::selftest {

namespace {

using Check = std::function<std::string()>;  // empty string = pass

std::string expect(bool ok, const std::string& msg) { return ok ? "" : msg; }

std::string check_mask_cardinalities() {
  using namespace spectral;
  auto low = make_mask(8, 8, 4, MaskMode::Low, MaskVariant::AsWritten);
  auto low_sq = make_mask(8, 8, 4, MaskMode::Low, MaskVariant::Square);
  auto high = make_mask(8, 8, 4, MaskMode::High, MaskVariant::AsWritten);
  if (low.ones() != 55) return "as-written low S=4 has " + std::to_string(low.ones());
  if (low_sq.ones() != 25) return "square low S=4 has " + std::to_string(low_sq.ones());
  if (high.ones() != 9) return "as-written high S=4 has " + std::to_string(high.ones());
  return "";
}

std::string check_roundtrip(uint64_t seed) {
  Rng rng(seed);
  Tensor<double> img = random_normal<double>({32, 32}, rng);
  auto spec = spectral::dft2(std::span<const double>(img.data), 32, 32);
  auto back = spectral::idft2_real(spec, 1e-10);
  double err = 0.0;
  for (size_t i = 0; i < back.size(); ++i)
    err = std::max(err, std::fabs(back[i] - img.data[i]));
  return expect(err < 1e-10, "roundtrip error " + std::to_string(err));
}

std::string check_parseval(uint64_t seed) {
  Rng rng(seed + 1);
  Tensor<double> img = random_normal<double>({32, 32}, rng);
  auto spec = spectral::dft2(std::span<const double>(img.data), 32, 32);
  double pixel_e = 0.0;
  for (double v : img.data) pixel_e += v * v;
  double coef_e = spectral::spectral_energy(spec) / (32.0 * 32.0);
  double rel = std::fabs(pixel_e - coef_e) / pixel_e;
  return expect(rel < 1e-12, "parseval relative error " + std::to_string(rel));
}

std::string check_complementarity(uint64_t seed) {
  Rng rng(seed + 2);
  Tensor<double> img = random_normal<double>({32, 32}, rng);
  for (int64_t s = 2; s <= 30; s += 2) {
    auto low = spectral::make_mask(32, 32, s, spectral::MaskMode::Low);
    auto high = spectral::make_mask(32, 32, 32 - s, spectral::MaskMode::High);
    auto a = spectral::filter_plane(std::span<const double>(img.data), low);
    auto b = spectral::filter_plane(std::span<const double>(img.data), high);
    for (size_t i = 0; i < a.size(); ++i)
      if (std::fabs(a[i] + b[i] - img.data[i]) > 1e-5)
        return "complementarity violated at S=" + std::to_string(s);
  }
  return "";
}

std::string check_gradcheck(uint64_t seed) {
  Rng rng(seed + 3);
  Tensor<double> x = random_normal<double>({4, 6}, rng);
  auto f = [](Graph<double>& g, Graph<double>::Id in) {
    auto sm = g.softmax(in, -1);
    return g.sum_all(g.mul(sm, sm));
  };
  auto rep = grad_check<double>(f, x, 1e-5, 1e-4);
  return expect(rep.pass, "softmax gradcheck max rel err " + std::to_string(rep.max_rel_error));
}

std::string check_softmax_shift(uint64_t seed) {
  Rng rng(seed + 4);
  Graph<float> g;
  Tensor<float> x = random_normal<float>({8, 10}, rng);
  Tensor<float> shifted = x;
  for (int64_t i = 0; i < 8; ++i)
    for (int64_t j = 0; j < 10; ++j) shifted.data[static_cast<size_t>(i * 10 + j)] += 3.5f;
  auto a = g.softmax(g.leaf(x), -1);
  auto b = g.softmax(g.leaf(shifted), -1);
  double err = max_abs_diff(g.value(a), g.value(b));
  return expect(err < 1e-6, "softmax shift invariance error " + std::to_string(err));
}

std::string check_pgd_clip(uint64_t seed) {
  models::ViTConfig vc;
  vc.image_size = 16;
  vc.patch_size = 4;
  vc.embed_dim = 32;
  vc.depth = 1;
  vc.heads = 2;
  auto model = models::make_model<float>(models::ModelKind::Vit, vc, {}, seed);
  Rng rng(seed + 5);
  Tensor<float> images = random_normal<float>({4, 3, 16, 16}, rng);
  std::vector<int32_t> labels{0, 1, 2, 3};
  hat::HatConfig hc;
  std::array<float, 3> stdev{0.25f, 0.25f, 0.25f};
  hat::HatStepOptions<float> opts;
  opts.record_deltas = true;
  auto res = hat::hat_minibatch(model, images, labels, hc, stdev, opts);
  for (const auto& d : res.delta_history) {
    for (int64_t img = 0; img < 4; ++img)
      for (int64_t ch = 0; ch < 3; ++ch) {
        const float bound = static_cast<float>(hc.epsilon) / stdev[static_cast<size_t>(ch)];
        const float* p = d.data.data() + (img * 3 + ch) * 16 * 16;
        for (int64_t e = 0; e < 16 * 16; ++e)
          if (std::fabs(p[e]) > bound * (1.0f + 1e-6f))
            return "PGD delta exceeds the epsilon ball";
      }
  }
  return "";
}

std::string check_ce_handcase() {
  Graph<float> g;
  auto logits = g.leaf(Tensor<float>({1, 3}, {1.0f, 2.0f, 3.0f}));
  auto loss = losses::ce_loss(g, logits, std::vector<int32_t>{2});
  double v = static_cast<double>(g.value(loss).data[0]);
  return expect(std::fabs(v - 0.40760596444) < 1e-6,
                "ce hand case returned " + std::to_string(v));
}

std::string check_theorem_uniform() {
  const int64_t n = 16;
  Tensor<double> a = Tensor<double>::full({n, n}, 1.0 / static_cast<double>(n));
  std::vector<double> v(static_cast<size_t>(n));
  Rng rng(7);
  for (auto& x : v) x = rng.normal();
  auto ratios = spectral::attention_lowpass_decay(a, v, 3);
  for (double r : ratios)
    if (r != 0.0) return "uniform attention ratio " + std::to_string(r);
  return "";
}

std::string check_checkpoint_roundtrip(uint64_t seed) {
  models::ViTConfig vc;
  vc.image_size = 8;
  vc.patch_size = 4;
  vc.embed_dim = 16;
  vc.depth = 1;
  vc.heads = 2;
  auto params = models::init_vit_params<float>(vc, seed);
  std::string path = "/tmp/hatkit_selftest_ckpt.shat";
  models::save_checkpoint(params, path);
  auto loaded = models::load_checkpoint(path);
  if (loaded.size() != params.size()) return "tensor count changed in roundtrip";
  for (size_t i = 0; i < params.entries.size(); ++i) {
    if (params.entries[i].first != loaded.entries[i].first) return "name order changed";
    if (params.entries[i].second.data != loaded.entries[i].second.data)
      return "data changed in roundtrip";
  }
  std::remove(path.c_str());
  return "";
}

}  // namespace

std::vector<CheckResult> run_all(uint64_t seed) {
  std::vector<std::pair<std::string, Check>> checks = {
      {"mask_cardinalities", check_mask_cardinalities},
      {"dft_roundtrip", [seed] { return check_roundtrip(seed); }},
      {"parseval", [seed] { return check_parseval(seed); }},
      {"mask_complementarity", [seed] { return check_complementarity(seed); }},
      {"autodiff_gradcheck", [seed] { return check_gradcheck(seed); }},
      {"softmax_shift_invariance", [seed] { return check_softmax_shift(seed); }},
      {"pgd_epsilon_ball", [seed] { return check_pgd_clip(seed); }},
      {"ce_hand_case", check_ce_handcase},
      {"theorem_uniform_attention", check_theorem_uniform},
      {"checkpoint_roundtrip", [seed] { return check_checkpoint_roundtrip(seed); }},
  };
  std::vector<CheckResult> results;
  for (auto& [name, fn] : checks) {
    CheckResult r;
    r.name = name;
    try {
      r.detail = fn();
      r.pass = r.detail.empty();
    } catch (const std::exception& e) {
      r.pass = false;
      r.detail = e.what();
    }
    results.push_back(std::move(r));
  }
  return results;
}

}  // namespace hatkit::selftest
