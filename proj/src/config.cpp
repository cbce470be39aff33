#include "hatkit/config.hpp"

#include <algorithm>
#include <cstdio>
#include <fstream>
#include <json.hpp>

#include "hatkit/errors.hpp"
#include "hatkit/rng.hpp"
#include "hatkit/version.hpp"

namespace hatkit::config {

using json = nlohmann::json;
using ordered_json = nlohmann::ordered_json;

namespace {

int edit_distance(const std::string& a, const std::string& b) {
  std::vector<int> prev(b.size() + 1), cur(b.size() + 1);
  for (size_t j = 0; j <= b.size(); ++j) prev[j] = static_cast<int>(j);
  for (size_t i = 1; i <= a.size(); ++i) {
    cur[0] = static_cast<int>(i);
    for (size_t j = 1; j <= b.size(); ++j) {
      int sub = prev[j - 1] + (a[i - 1] == b[j - 1] ? 0 : 1);
      cur[j] = std::min({prev[j] + 1, cur[j - 1] + 1, sub});
    }
    std::swap(prev, cur);
  }
  return prev[b.size()];
}

const std::vector<std::string> kKeys = {
    "seed", "precision", "threads", "out_dir", "version", "checkpoint",
    "data.kind", "data.dir", "data.path", "data.eval_path", "data.train_limit", "data.eval_limit",
    "data.synth_train", "data.synth_eval", "data.synth_classes",
    "model.kind",
    "vit.image_size", "vit.patch_size", "vit.channels", "vit.embed_dim", "vit.depth",
    "vit.heads", "vit.mlp_ratio", "vit.num_classes", "vit.pooling",
    "cnn.image_size", "cnn.channels", "cnn.stage_widths", "cnn.blocks_per_stage",
    "cnn.num_classes",
    "train.method", "train.epochs", "train.batch_size", "train.lr", "train.weight_decay",
    "train.warmup_epochs", "train.augment", "train.mixup", "train.mixup_alpha", "train.cutmix",
    "train.augment_in_adv", "train.eval_every", "train.eval_limit",
    "hat.epsilon", "hat.eta", "hat.k", "hat.alpha", "hat.beta", "hat.adv_fraction",
    "hat.freq_mode", "hat.freq_s",
    "eval.sweep_sizes", "eval.sweep_mode", "eval.mask_variant", "eval.heatmap_norm",
    "eval.heatmap_subset", "eval.heatmap_mirror", "eval.spectrum_samples", "eval.spectrum_s",
    "distill.enabled", "distill.teacher_checkpoint", "distill.teacher_kind",
};

[[noreturn]] void unknown_key(const std::string& dotted) {
  std::string best = kKeys.front();
  int best_d = edit_distance(dotted, best);
  for (const auto& k : kKeys) {
    int d = edit_distance(dotted, k);
    if (d < best_d) {
      best_d = d;
      best = k;
    }
  }
  throw ConfigError("unknown config key '" + dotted + "' (nearest valid key: '" + best + "')");
}

void collect_leaves(const json& j, const std::string& prefix, std::vector<std::string>& out) {
  if (!j.is_object()) {
    out.push_back(prefix);
    return;
  }
  for (auto it = j.begin(); it != j.end(); ++it) {
    std::string p = prefix.empty() ? it.key() : prefix + "." + it.key();
    collect_leaves(it.value(), p, out);
  }
}

const json* find_path(const json& j, const std::string& dotted) {
  const json* cur = &j;
  size_t pos = 0;
  while (true) {
    size_t dot = dotted.find('.', pos);
    std::string key = dotted.substr(pos, dot == std::string::npos ? std::string::npos : dot - pos);
    if (!cur->is_object() || !cur->contains(key)) return nullptr;
    cur = &(*cur)[key];
    if (dot == std::string::npos) return cur;
    pos = dot + 1;
  }
}

template <class T>
void read_field(const json& j, const std::string& dotted, T& out) {
  const json* v = find_path(j, dotted);
  if (!v) return;
  try {
    out = v->get<T>();
  } catch (const json::exception&) {
    throw ConfigError("config key '" + dotted + "' has the wrong type (got " +
                      std::string(v->type_name()) + ")");
  }
}

void read_string_choice(const json& j, const std::string& dotted, std::string& out,
                        std::initializer_list<const char*> choices) {
  read_field(j, dotted, out);
  for (const char* c : choices)
    if (out == c) return;
  std::string opts;
  for (const char* c : choices) opts += std::string(opts.empty() ? "" : "|") + c;
  throw ConfigError("config key '" + dotted + "' must be one of " + opts + ", got '" + out + "'");
}

json parse_override_value(const std::string& raw) {
  // numbers/bools/arrays parse as JSON; everything else is a string
  json v = json::parse(raw, nullptr, /*allow_exceptions=*/false);
  if (!v.is_discarded()) return v;
  return json(raw);
}

void set_path(json& j, const std::string& dotted, json value) {
  json* cur = &j;
  size_t pos = 0;
  while (true) {
    size_t dot = dotted.find('.', pos);
    std::string key = dotted.substr(pos, dot == std::string::npos ? std::string::npos : dot - pos);
    if (dot == std::string::npos) {
      (*cur)[key] = std::move(value);
      return;
    }
    cur = &(*cur)[key];
    pos = dot + 1;
  }
}

}  // namespace

const std::vector<std::string>& all_config_keys() { return kKeys; }

void RunConfig::validate_and_fill() {
  if (precision != "f32" && precision != "f64")
    throw ConfigError("precision must be f32 or f64");
  if (threads < 0) throw ConfigError("threads must be >= 0");
  if (model_kind != "vit" && model_kind != "cnn")
    throw ConfigError("model.kind must be vit or cnn");
  vit.pooling = vit_pooling == "class_token" ? models::ViTConfig::Pooling::ClassToken
                                             : models::ViTConfig::Pooling::Mean;
  train.method = train_method == "hat" ? train::Method::Hat : train::Method::Baseline;
  try {
    hat.freq_mode = hat::freq_mode_from_name(hat_freq_mode);
    vit.validate();
    cnn.validate();
    train.validate();
    hat.validate();
  } catch (const ValueError& e) {
    throw ConfigError(e.what());
  }
  if (data.kind != "cifar10" && data.kind != "raw" && data.kind != "synthetic")
    throw ConfigError("data.kind must be cifar10, raw, or synthetic");
  if (data.kind == "cifar10" && data.dir.empty())
    throw ConfigError("data.kind=cifar10 requires data.dir");
  if (data.kind == "raw" && data.path.empty())
    throw ConfigError("data.kind=raw requires data.path");
}

RunConfig parse_config(const std::string& file_path,
                       const std::vector<std::pair<std::string, std::string>>& overrides) {
  json merged = json::object();
  if (!file_path.empty()) {
    std::ifstream in(file_path);
    if (!in) throw ConfigError("cannot open config file: " + file_path);
    std::string text((std::istreambuf_iterator<char>(in)), std::istreambuf_iterator<char>());
    json parsed = json::parse(text, nullptr, /*allow_exceptions=*/false,
                              /*ignore_comments=*/true);
    if (parsed.is_discarded()) throw ConfigError("config file is not well-formed JSON");
    if (!parsed.is_object()) throw ConfigError("config root must be an object");
    merged = std::move(parsed);
  }
  for (const auto& [key, raw] : overrides) {
    if (std::find(kKeys.begin(), kKeys.end(), key) == kKeys.end()) unknown_key(key);
    set_path(merged, key, parse_override_value(raw));
  }

  std::vector<std::string> leaves;
  collect_leaves(merged, "", leaves);
  for (const auto& leaf : leaves)
    if (std::find(kKeys.begin(), kKeys.end(), leaf) == kKeys.end()) unknown_key(leaf);

  RunConfig cfg;
  read_field(merged, "seed", cfg.seed);
  read_string_choice(merged, "precision", cfg.precision, {"f32", "f64"});
  read_field(merged, "threads", cfg.threads);
  read_field(merged, "out_dir", cfg.out_dir);
  read_field(merged, "version", cfg.version);
  read_field(merged, "checkpoint", cfg.checkpoint);

  read_string_choice(merged, "data.kind", cfg.data.kind, {"cifar10", "raw", "synthetic"});
  read_field(merged, "data.dir", cfg.data.dir);
  read_field(merged, "data.path", cfg.data.path);
  read_field(merged, "data.eval_path", cfg.data.eval_path);
  read_field(merged, "data.train_limit", cfg.data.train_limit);
  read_field(merged, "data.eval_limit", cfg.data.eval_limit);
  read_field(merged, "data.synth_train", cfg.data.synth_train);
  read_field(merged, "data.synth_eval", cfg.data.synth_eval);
  read_field(merged, "data.synth_classes", cfg.data.synth_classes);

  read_string_choice(merged, "model.kind", cfg.model_kind, {"vit", "cnn"});
  read_field(merged, "vit.image_size", cfg.vit.image_size);
  read_field(merged, "vit.patch_size", cfg.vit.patch_size);
  read_field(merged, "vit.channels", cfg.vit.channels);
  read_field(merged, "vit.embed_dim", cfg.vit.embed_dim);
  read_field(merged, "vit.depth", cfg.vit.depth);
  read_field(merged, "vit.heads", cfg.vit.heads);
  read_field(merged, "vit.mlp_ratio", cfg.vit.mlp_ratio);
  read_field(merged, "vit.num_classes", cfg.vit.num_classes);
  read_string_choice(merged, "vit.pooling", cfg.vit_pooling, {"mean", "class_token"});
  read_field(merged, "cnn.image_size", cfg.cnn.image_size);
  read_field(merged, "cnn.channels", cfg.cnn.channels);
  read_field(merged, "cnn.stage_widths", cfg.cnn.stage_widths);
  read_field(merged, "cnn.blocks_per_stage", cfg.cnn.blocks_per_stage);
  read_field(merged, "cnn.num_classes", cfg.cnn.num_classes);

  read_string_choice(merged, "train.method", cfg.train_method, {"baseline", "hat"});
  read_field(merged, "train.epochs", cfg.train.epochs);
  read_field(merged, "train.batch_size", cfg.train.batch_size);
  read_field(merged, "train.lr", cfg.train.lr);
  read_field(merged, "train.weight_decay", cfg.train.weight_decay);
  read_field(merged, "train.warmup_epochs", cfg.train.warmup_epochs);
  read_field(merged, "train.augment", cfg.train.augment);
  read_field(merged, "train.mixup", cfg.train.mixup);
  read_field(merged, "train.mixup_alpha", cfg.train.mixup_alpha);
  read_field(merged, "train.cutmix", cfg.train.cutmix);
  read_field(merged, "train.augment_in_adv", cfg.train.augment_in_adv);
  read_field(merged, "train.eval_every", cfg.train.eval_every);
  read_field(merged, "train.eval_limit", cfg.train.eval_limit);

  read_field(merged, "hat.epsilon", cfg.hat.epsilon);
  read_field(merged, "hat.eta", cfg.hat.eta);
  read_field(merged, "hat.k", cfg.hat.k);
  read_field(merged, "hat.alpha", cfg.hat.alpha);
  read_field(merged, "hat.beta", cfg.hat.beta);
  read_field(merged, "hat.adv_fraction", cfg.hat.adv_fraction);
  read_string_choice(merged, "hat.freq_mode", cfg.hat_freq_mode, {"full", "high", "low"});
  read_field(merged, "hat.freq_s", cfg.hat.freq_s);

  read_field(merged, "eval.sweep_sizes", cfg.eval.sweep_sizes);
  read_string_choice(merged, "eval.sweep_mode", cfg.eval.sweep_mode, {"low", "high", "both"});
  read_string_choice(merged, "eval.mask_variant", cfg.eval.mask_variant,
                     {"as_written", "square", "both"});
  read_field(merged, "eval.heatmap_norm", cfg.eval.heatmap_norm);
  read_field(merged, "eval.heatmap_subset", cfg.eval.heatmap_subset);
  read_field(merged, "eval.heatmap_mirror", cfg.eval.heatmap_mirror);
  read_field(merged, "eval.spectrum_samples", cfg.eval.spectrum_samples);
  read_field(merged, "eval.spectrum_s", cfg.eval.spectrum_s);

  read_field(merged, "distill.enabled", cfg.distill.enabled);
  read_field(merged, "distill.teacher_checkpoint", cfg.distill.teacher_checkpoint);
  read_string_choice(merged, "distill.teacher_kind", cfg.distill.teacher_kind, {"vit", "cnn"});

  cfg.version = kVersion;
  cfg.validate_and_fill();
  return cfg;
}

std::string to_canonical_json(const RunConfig& cfg) {
  ordered_json j;
  j["seed"] = cfg.seed;
  j["precision"] = cfg.precision;
  j["threads"] = cfg.threads;
  j["out_dir"] = cfg.out_dir;
  j["version"] = cfg.version.empty() ? kVersion : cfg.version;
  j["checkpoint"] = cfg.checkpoint;
  j["data"] = {{"kind", cfg.data.kind},
               {"dir", cfg.data.dir},
               {"path", cfg.data.path},
               {"eval_path", cfg.data.eval_path},
               {"train_limit", cfg.data.train_limit},
               {"eval_limit", cfg.data.eval_limit},
               {"synth_train", cfg.data.synth_train},
               {"synth_eval", cfg.data.synth_eval},
               {"synth_classes", cfg.data.synth_classes}};
  j["model"] = {{"kind", cfg.model_kind}};
  j["vit"] = {{"image_size", cfg.vit.image_size}, {"patch_size", cfg.vit.patch_size},
              {"channels", cfg.vit.channels},     {"embed_dim", cfg.vit.embed_dim},
              {"depth", cfg.vit.depth},           {"heads", cfg.vit.heads},
              {"mlp_ratio", cfg.vit.mlp_ratio},   {"num_classes", cfg.vit.num_classes},
              {"pooling", cfg.vit_pooling}};
  j["cnn"] = {{"image_size", cfg.cnn.image_size},
              {"channels", cfg.cnn.channels},
              {"stage_widths", cfg.cnn.stage_widths},
              {"blocks_per_stage", cfg.cnn.blocks_per_stage},
              {"num_classes", cfg.cnn.num_classes}};
  j["train"] = {{"method", cfg.train_method},
                {"epochs", cfg.train.epochs},
                {"batch_size", cfg.train.batch_size},
                {"lr", cfg.train.lr},
                {"weight_decay", cfg.train.weight_decay},
                {"warmup_epochs", cfg.train.warmup_epochs},
                {"augment", cfg.train.augment},
                {"mixup", cfg.train.mixup},
                {"mixup_alpha", cfg.train.mixup_alpha},
                {"cutmix", cfg.train.cutmix},
                {"augment_in_adv", cfg.train.augment_in_adv},
                {"eval_every", cfg.train.eval_every},
                {"eval_limit", cfg.train.eval_limit}};
  j["hat"] = {{"epsilon", cfg.hat.epsilon}, {"eta", cfg.hat.eta},
              {"k", cfg.hat.k},             {"alpha", cfg.hat.alpha},
              {"beta", cfg.hat.beta},       {"adv_fraction", cfg.hat.adv_fraction},
              {"freq_mode", cfg.hat_freq_mode}, {"freq_s", cfg.hat.freq_s}};
  j["eval"] = {{"sweep_sizes", cfg.eval.sweep_sizes},
               {"sweep_mode", cfg.eval.sweep_mode},
               {"mask_variant", cfg.eval.mask_variant},
               {"heatmap_norm", cfg.eval.heatmap_norm},
               {"heatmap_subset", cfg.eval.heatmap_subset},
               {"heatmap_mirror", cfg.eval.heatmap_mirror},
               {"spectrum_samples", cfg.eval.spectrum_samples},
               {"spectrum_s", cfg.eval.spectrum_s}};
  j["distill"] = {{"enabled", cfg.distill.enabled},
                  {"teacher_checkpoint", cfg.distill.teacher_checkpoint},
                  {"teacher_kind", cfg.distill.teacher_kind}};
  return j.dump(2) + "\n";
}

uint64_t config_hash(const RunConfig& cfg) { return fnv1a64(to_canonical_json(cfg)); }

void write_config_echo(const RunConfig& cfg, const std::string& path) {
  std::ofstream out(path, std::ios::trunc);
  if (!out) throw Error("cannot write config echo: " + path);
  out << to_canonical_json(cfg);
}

}  // namespace hatkit::config
