#include "hatkit/train.hpp"

#include <algorithm>
#include <chrono>
#include <cstring>
#include <cmath>
#include <cstdio>
#include <fstream>
#include <numeric>

#include "hatkit/errors.hpp"
#include "hatkit/eval.hpp"
#include "hatkit/losses.hpp"
#include "hatkit/rng.hpp"

namespace hatkit::train {

void TrainConfig::validate() const {
  if (epochs < 0 || batch_size <= 0) throw ValueError("train config: bad epochs/batch size");
  if (lr <= 0.0 || weight_decay < 0.0) throw ValueError("train config: bad lr/weight decay");
  if (warmup_epochs < 0.0) throw ValueError("train config: warmup must be >= 0");
  if (mixup && cutmix) throw ValueError("train config: enable at most one of mixup/cutmix");
  if (eval_every < 0 || eval_limit < 0) throw ValueError("train config: bad eval settings");
}

void AdamW::init(const models::ModelParams<float>& params) {
  m = models::ModelParams<float>();
  v = models::ModelParams<float>();
  for (const auto& [name, t] : params.entries) {
    m.add(name, Tensor<float>::zeros(t.shape));
    v.add(name, Tensor<float>::zeros(t.shape));
  }
  step = 0;
}

void AdamW::update(models::ModelParams<float>& params, const models::ModelParams<float>& grads,
                   double lr) {
  ++step;
  const double bc1 = 1.0 - std::pow(beta1, static_cast<double>(step));
  const double bc2 = 1.0 - std::pow(beta2, static_cast<double>(step));
  for (size_t i = 0; i < params.entries.size(); ++i) {
    auto& p = params.entries[i].second;
    const auto& g = grads.entries[i].second;
    if (!same_shape(p.shape, g.shape))
      throw ShapeError("optimizer: gradient shape mismatch for " + params.entries[i].first);
    auto& mi = m.entries[i].second.data;
    auto& vi = v.entries[i].second.data;
    const bool decay = p.rank() > 1 && weight_decay > 0.0;
    for (size_t e = 0; e < p.data.size(); ++e) {
      const double ge = static_cast<double>(g.data[e]);
      const double me = beta1 * static_cast<double>(mi[e]) + (1.0 - beta1) * ge;
      const double ve = beta2 * static_cast<double>(vi[e]) + (1.0 - beta2) * ge * ge;
      mi[e] = static_cast<float>(me);
      vi[e] = static_cast<float>(ve);
      double upd = (me / bc1) / (std::sqrt(ve / bc2) + eps);
      double pe = static_cast<double>(p.data[e]) - lr * upd;
      if (decay) pe -= lr * weight_decay * static_cast<double>(p.data[e]);
      p.data[e] = static_cast<float>(pe);
    }
    check_finite(p, "optimizer");
  }
}

double lr_at(double base_lr, int64_t step, int64_t warmup_steps, int64_t total_steps) {
  if (warmup_steps > 0 && step < warmup_steps)
    return base_lr * static_cast<double>(step + 1) / static_cast<double>(warmup_steps);
  if (total_steps <= warmup_steps) return base_lr;
  const double t = static_cast<double>(step - warmup_steps) /
                   static_cast<double>(total_steps - warmup_steps);
  return 0.5 * base_lr * (1.0 + std::cos(3.14159265358979323846 * std::min(1.0, t)));
}

namespace {

struct BatchView {
  Tensor<float> images;
  std::vector<int32_t> labels;
};

BatchView gather_batch(const data::Dataset& ds, const std::vector<int64_t>& order, int64_t begin,
                       int64_t end) {
  BatchView b;
  const int64_t c = ds.images.shape[1], h = ds.images.shape[2], w = ds.images.shape[3];
  const int64_t plane = c * h * w;
  b.images = Tensor<float>::zeros({end - begin, c, h, w});
  b.labels.reserve(static_cast<size_t>(end - begin));
  for (int64_t i = begin; i < end; ++i) {
    const int64_t src = order[static_cast<size_t>(i)];
    std::memcpy(b.images.data.data() + (i - begin) * plane, ds.images.data.data() + src * plane,
                static_cast<size_t>(plane) * sizeof(float));
    b.labels.push_back(ds.labels[static_cast<size_t>(src)]);
  }
  return b;
}

int64_t count_correct(const Tensor<float>& logits, const std::vector<int32_t>& labels) {
  const int64_t n = logits.shape[0], c = logits.shape[1];
  int64_t ok = 0;
  for (int64_t i = 0; i < n; ++i) {
    const float* row = logits.data.data() + i * c;
    int best = 0;
    for (int64_t j = 1; j < c; ++j)
      if (row[j] > row[best]) best = static_cast<int>(j);
    if (best == labels[static_cast<size_t>(i)]) ++ok;
  }
  return ok;
}

struct PlainStep {
  models::ModelParams<float> grads;
  double loss = 0.0;
  int64_t correct = 0;
};

PlainStep plain_minibatch(const models::Model<float>& model, const Tensor<float>& images,
                          const std::vector<int32_t>& labels, const Tensor<float>* soft_labels,
                          const Tensor<float>* teacher_logits) {
  Graph<float> g;
  auto bound = models::bind_params(g, model.params, /*requires_grad=*/true);
  auto in = g.leaf(images.with_grad(false));
  auto logits = model.forward(g, bound, in);
  Graph<float>::Id loss;
  if (teacher_logits) {
    loss = soft_labels ? losses::distill_loss(g, logits, *soft_labels, *teacher_logits)
                       : losses::distill_loss(g, logits, labels, *teacher_logits);
  } else {
    loss = soft_labels ? losses::ce_loss(g, logits, *soft_labels)
                       : losses::ce_loss(g, logits, labels);
  }
  PlainStep out;
  out.loss = static_cast<double>(g.value(loss).data[0]);
  out.correct = count_correct(g.value(logits), labels);
  g.backward(loss);
  for (size_t i = 0; i < bound.ids.size(); ++i)
    out.grads.add(model.params.entries[i].first, g.grad(bound.ids[i]));
  return out;
}

}  // namespace

TrainResult train(models::Model<float> model, const data::Dataset& train_set,
                  const data::Dataset& eval_set, const TrainConfig& tc, const hat::HatConfig& hc,
                  const models::Model<float>* teacher,
                  const std::function<void(const EpochMetrics&)>& on_epoch) {
  tc.validate();
  hc.validate();
  train_set.validate();
  const int64_t n = train_set.size();
  const int64_t steps_per_epoch = (n + tc.batch_size - 1) / tc.batch_size;
  const int64_t total_steps = steps_per_epoch * tc.epochs;
  const int64_t warmup_steps =
      static_cast<int64_t>(tc.warmup_epochs * static_cast<double>(steps_per_epoch));
  const int adv_epochs =
      tc.method == Method::Hat
          ? static_cast<int>(std::ceil(hc.adv_fraction * static_cast<double>(tc.epochs)))
          : 0;

  AdamW opt;
  opt.weight_decay = tc.weight_decay;
  opt.init(model.params);
  SeedSplitter seeds(tc.seed);

  const data::Dataset& eval_used = eval_set;
  const int64_t eval_n = tc.eval_limit > 0 ? std::min<int64_t>(tc.eval_limit, eval_used.size())
                                           : eval_used.size();

  TrainResult result;
  std::vector<int64_t> order(static_cast<size_t>(n));
  std::iota(order.begin(), order.end(), 0);

  for (int epoch = 1; epoch <= tc.epochs; ++epoch) {
    const auto t0 = std::chrono::steady_clock::now();
    const bool adversarial = epoch <= adv_epochs;
    Rng shuffle_rng = seeds.rng_for("shuffle", static_cast<uint64_t>(epoch));
    for (int64_t i = n - 1; i > 0; --i) {
      int64_t j = static_cast<int64_t>(shuffle_rng.uniform_int(static_cast<uint64_t>(i + 1)));
      std::swap(order[static_cast<size_t>(i)], order[static_cast<size_t>(j)]);
    }
    Rng aug_rng = seeds.rng_for("augment", static_cast<uint64_t>(epoch));
    Rng mix_rng = seeds.rng_for("mix", static_cast<uint64_t>(epoch));

    double loss_sum = 0.0;
    int64_t correct = 0, seen = 0;
    for (int64_t begin = 0; begin < n; begin += tc.batch_size) {
      const int64_t end = std::min<int64_t>(n, begin + tc.batch_size);
      BatchView batch = gather_batch(train_set, order, begin, end);
      const bool want_aug = tc.augment && (!adversarial || tc.augment_in_adv);
      if (want_aug) batch.images = data::augment_basic(batch.images, aug_rng);
      Tensor<float> soft;
      const Tensor<float>* soft_ptr = nullptr;
      if ((tc.mixup || tc.cutmix) && end - begin >= 2 && (!adversarial || tc.augment_in_adv)) {
        if (tc.mixup) {
          auto mixed = data::mixup(batch.images, batch.labels, train_set.num_classes,
                                   tc.mixup_alpha, mix_rng);
          batch.images = std::move(mixed.images);
          soft = std::move(mixed.soft_labels);
        } else {
          auto mixed = data::cutmix(batch.images, batch.labels, train_set.num_classes, mix_rng);
          batch.images = std::move(mixed.images);
          soft = std::move(mixed.soft_labels);
        }
        soft_ptr = &soft;
      }
      Tensor<float> teacher_logits;
      if (teacher) teacher_logits = models::forward_logits(*teacher, batch.images);

      const int64_t step_index = opt.step;
      const double lr = lr_at(tc.lr, step_index, warmup_steps, total_steps);
      if (adversarial) {
        hat::HatStepOptions<float> hopts;
        if (soft_ptr) hopts.soft_labels = soft_ptr;
        if (teacher) hopts.teacher_logits = &teacher_logits;
        auto step = hat::hat_minibatch(model, batch.images, batch.labels, hc, train_set.stdev,
                                       hopts);
        opt.update(model.params, step.grads, lr);
        loss_sum += step.clean_loss * static_cast<double>(end - begin);
      } else {
        PlainStep step = plain_minibatch(model, batch.images, batch.labels, soft_ptr,
                                         teacher ? &teacher_logits : nullptr);
        opt.update(model.params, step.grads, lr);
        loss_sum += step.loss * static_cast<double>(end - begin);
        correct += step.correct;
      }
      seen += end - begin;
    }

    EpochMetrics em;
    em.epoch = epoch;
    em.adversarial = adversarial;
    em.train_loss = loss_sum / static_cast<double>(seen);
    em.train_acc = adversarial ? -1.0 : static_cast<double>(correct) / static_cast<double>(seen);
    const bool do_eval =
        (tc.eval_every > 0 && epoch % tc.eval_every == 0) || epoch == tc.epochs;
    if (do_eval)
      em.eval_acc = eval::evaluate_accuracy(model, eval_used.head(eval_n));
    em.wall_seconds =
        std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
    result.log.push_back(em);
    if (on_epoch) on_epoch(em);
  }
  result.model = std::move(model);
  return result;
}

void write_metrics_csv(const std::string& path, const std::vector<EpochMetrics>& log,
                       uint64_t config_hash, uint64_t seed) {
  std::ofstream out(path, std::ios::trunc);
  if (!out) throw Error("cannot open metrics csv for writing: " + path);
  char head[96];
  std::snprintf(head, sizeof(head), "# config_hash=%016llx seed=%llu\n",
                static_cast<unsigned long long>(config_hash),
                static_cast<unsigned long long>(seed));
  out << head << "epoch,phase,train_loss,train_acc,eval_acc,wall_seconds\n";
  for (const auto& em : log) {
    char line[192];
    std::snprintf(line, sizeof(line), "%d,%s,%.6f,%.6f,%.6f,%.3f\n", em.epoch,
                  em.adversarial ? "adv" : "normal", em.train_loss, em.train_acc, em.eval_acc,
                  em.wall_seconds);
    out << line;
  }
}

std::vector<AblationRow> ablation_matrix(const models::Model<float>& init,
                                         const data::Dataset& train_set,
                                         const data::Dataset& eval_set, const TrainConfig& tc,
                                         const hat::HatConfig& hc) {
  std::vector<AblationRow> rows;
  struct Spec {
    std::string name;
    Method method;
    hat::FreqMode mode;
  };
  const std::vector<Spec> specs = {{"baseline", Method::Baseline, hat::FreqMode::Full},
                                   {"at_low", Method::Hat, hat::FreqMode::Low},
                                   {"at_high", Method::Hat, hat::FreqMode::High},
                                   {"at_full", Method::Hat, hat::FreqMode::Full}};
  for (const auto& spec : specs) {
    TrainConfig tci = tc;
    tci.method = spec.method;
    hat::HatConfig hci = hc;
    hci.freq_mode = spec.mode;
    TrainResult r = train(init, train_set, eval_set, tci, hci);
    double final_acc = -1.0;
    for (auto it = r.log.rbegin(); it != r.log.rend(); ++it)
      if (it->eval_acc >= 0.0) {
        final_acc = it->eval_acc;
        break;
      }
    uint64_t h = fnv1a64(spec.name) ^ mix64(tc.seed) ^
                 fnv1a64(hat::freq_mode_name(spec.mode)) ^
                 mix64(static_cast<uint64_t>(tc.epochs));
    rows.push_back({spec.name, final_acc, h});
  }
  return rows;
}

void write_ablation_csv(const std::string& path, const std::vector<AblationRow>& rows,
                        uint64_t config_hash, uint64_t seed) {
  std::ofstream out(path, std::ios::trunc);
  if (!out) throw Error("cannot open ablation csv for writing: " + path);
  char head[96];
  std::snprintf(head, sizeof(head), "# config_hash=%016llx seed=%llu\n",
                static_cast<unsigned long long>(config_hash),
                static_cast<unsigned long long>(seed));
  out << head << "strategy,eval_acc,config_hash\n";
  for (const auto& r : rows) {
    char line[160];
    std::snprintf(line, sizeof(line), "%s,%.6f,%016llx\n", r.strategy.c_str(), r.eval_acc,
                  static_cast<unsigned long long>(r.config_hash));
    out << line;
  }
}

}  // namespace hatkit::train
