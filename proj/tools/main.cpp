#include <CLI11.hpp>
#include <cstdio>
#include <cstdlib>
#include <filesystem>
#include <fstream>
#include <string>
#include <vector>

#include "hatkit/config.hpp"
#include "hatkit/errors.hpp"
#include "hatkit/eval.hpp"
#include "hatkit/graph.hpp"
#include "hatkit/selftest.hpp"
#include "hatkit/train.hpp"
#include "hatkit/version.hpp"

namespace fs = std::filesystem;
using namespace hatkit;

namespace {

struct CliState {
  std::string config_file;
  std::vector<std::pair<std::string, std::string>> overrides;
  std::map<std::string, std::string> values;  // storage for auto-registered keys
};

void register_config_flags(CLI::App* cmd, CliState& st) {
  cmd->add_option("--config", st.config_file, "JSON config file (// comments allowed)");
  for (const auto& key : config::all_config_keys()) {
    auto& slot = st.values[key];
    auto* opt = cmd->add_option("--" + key, slot, "");
    opt->group("config overrides");
  }
  cmd->add_option("--out", st.values["out_dir"], "output directory")->group("config overrides");
  cmd->add_option("--seed-alias", st.values["seed"], "")->group("");
}

config::RunConfig resolve_config(CLI::App* cmd, CliState& st) {
  for (const auto& key : config::all_config_keys()) {
    auto it = st.values.find(key);
    if (it == st.values.end()) continue;
    const CLI::Option* opt = cmd->get_option_no_throw("--" + key);
    bool provided = opt && opt->count() > 0;
    if (key == "out_dir") {
      const CLI::Option* alias = cmd->get_option_no_throw("--out");
      provided = provided || (alias && alias->count() > 0);
    }
    if (provided) st.overrides.emplace_back(key, it->second);
  }
  config::RunConfig cfg = config::parse_config(st.config_file, st.overrides);
  if (const char* env = std::getenv("HATKIT_THREADS"); env && cfg.threads == 0)
    cfg.threads = std::atoi(env);
  set_compute_threads(cfg.threads);
  return cfg;
}

fs::path prepare_run_dir(const config::RunConfig& cfg) {
  fs::path dir(cfg.out_dir);
  fs::create_directories(dir);
  config::write_config_echo(cfg, (dir / "config.json").string());
  return dir;
}

data::Dataset load_split(const config::RunConfig& cfg, bool train_split) {
  const auto& d = cfg.data;
  if (d.kind == "cifar10") {
    data::Dataset ds =
        data::load_cifar10(d.dir, train_split ? data::Split::Train : data::Split::Test);
    int64_t limit = train_split ? d.train_limit : d.eval_limit;
    return limit > 0 && limit < ds.size() ? ds.head(limit) : ds;
  }
  if (d.kind == "raw") {
    std::string path = d.path;
    if (!train_split && !d.eval_path.empty()) path = d.eval_path;
    data::Dataset ds = data::load_raw_dataset(path);
    int64_t limit = train_split ? d.train_limit : d.eval_limit;
    return limit > 0 && limit < ds.size() ? ds.head(limit) : ds;
  }
  data::SyntheticSpec spec;
  spec.count = train_split ? d.synth_train : d.synth_eval;
  spec.num_classes = d.synth_classes;
  spec.seed = cfg.seed;
  return data::make_synthetic(spec, train_split ? "train" : "eval");
}

models::Model<float> model_from_config(const config::RunConfig& cfg) {
  SeedSplitter seeds(cfg.seed);
  return models::make_model<float>(
      cfg.model_kind == "vit" ? models::ModelKind::Vit : models::ModelKind::Cnn, cfg.vit,
      cfg.cnn, seeds.seed_for("init"));
}

models::Model<float> load_model(const config::RunConfig& cfg) {
  if (cfg.checkpoint.empty())
    throw ValueError("missing required input: checkpoint (set --checkpoint)");
  models::Model<float> m = model_from_config(cfg);
  m.params = models::load_checkpoint(cfg.checkpoint);
  return m;
}

int cmd_train(const config::RunConfig& cfg) {
  fs::path dir = prepare_run_dir(cfg);
  data::Dataset train_set = load_split(cfg, true);
  data::Dataset eval_set = load_split(cfg, false);
  models::Model<float> model = model_from_config(cfg);

  std::optional<models::Model<float>> teacher;
  if (cfg.distill.enabled) {
    if (cfg.distill.teacher_checkpoint.empty())
      throw ValueError("distillation requires distill.teacher_checkpoint");
    models::Model<float> t = models::make_model<float>(
        cfg.distill.teacher_kind == "vit" ? models::ModelKind::Vit : models::ModelKind::Cnn,
        cfg.vit, cfg.cnn, 0);
    t.params = models::load_checkpoint(cfg.distill.teacher_checkpoint);
    teacher = std::move(t);
  }

  train::TrainConfig tc = cfg.train;
  tc.seed = cfg.seed;
  auto result = train::train(model, train_set, eval_set, tc, cfg.hat,
                             teacher ? &*teacher : nullptr, [](const train::EpochMetrics& em) {
                               std::printf("epoch %3d %-6s loss %.4f acc %.4f eval %.4f (%.1fs)\n",
                                           em.epoch, em.adversarial ? "adv" : "normal",
                                           em.train_loss, em.train_acc, em.eval_acc,
                                           em.wall_seconds);
                               std::fflush(stdout);
                             });
  train::write_metrics_csv((dir / "metrics.csv").string(), result.log, config::config_hash(cfg),
                           cfg.seed);
  models::save_checkpoint(result.model.params, (dir / "model.shat").string());
  double final_acc = -1.0;
  for (auto it = result.log.rbegin(); it != result.log.rend(); ++it)
    if (it->eval_acc >= 0.0) {
      final_acc = it->eval_acc;
      break;
    }
  std::printf("final eval accuracy %.4f; artifacts in %s\n", final_acc, dir.string().c_str());
  return 0;
}

int cmd_eval(const config::RunConfig& cfg) {
  fs::path dir = prepare_run_dir(cfg);
  models::Model<float> model = load_model(cfg);
  data::Dataset eval_set = load_split(cfg, false);
  double acc = eval::evaluate_accuracy(model, eval_set);
  std::ofstream out(dir / "eval.csv", std::ios::trunc);
  char head[96];
  std::snprintf(head, sizeof(head), "# config_hash=%016llx seed=%llu\n",
                static_cast<unsigned long long>(config::config_hash(cfg)),
                static_cast<unsigned long long>(cfg.seed));
  out << head << "n,accuracy\n" << eval_set.size() << "," << acc << "\n";
  std::printf("accuracy %.4f over %lld samples\n", acc, static_cast<long long>(eval_set.size()));
  return 0;
}

int cmd_sweep(const config::RunConfig& cfg) {
  fs::path dir = prepare_run_dir(cfg);
  models::Model<float> model = load_model(cfg);
  data::Dataset eval_set = load_split(cfg, false);
  std::vector<spectral::MaskMode> modes;
  if (cfg.eval.sweep_mode == "low" || cfg.eval.sweep_mode == "both")
    modes.push_back(spectral::MaskMode::Low);
  if (cfg.eval.sweep_mode == "high" || cfg.eval.sweep_mode == "both")
    modes.push_back(spectral::MaskMode::High);
  std::vector<spectral::MaskVariant> variants;
  if (cfg.eval.mask_variant == "as_written" || cfg.eval.mask_variant == "both")
    variants.push_back(spectral::MaskVariant::AsWritten);
  if (cfg.eval.mask_variant == "square" || cfg.eval.mask_variant == "both")
    variants.push_back(spectral::MaskVariant::Square);
  std::vector<eval::SweepReport> reports;
  for (auto mode : modes)
    for (auto variant : variants) {
      if (mode == spectral::MaskMode::High && variant == spectral::MaskVariant::Square)
        continue;  // high-pass has a single (corner) rule
      reports.push_back(
          eval::filtered_accuracy_sweep(model, eval_set, mode, cfg.eval.sweep_sizes, variant));
    }
  eval::write_sweep_csv((dir / "sweep.csv").string(), reports, config::config_hash(cfg),
                        cfg.seed);
  std::printf("wrote %s\n", (dir / "sweep.csv").string().c_str());
  return 0;
}

int cmd_heatmap(const config::RunConfig& cfg) {
  fs::path dir = prepare_run_dir(cfg);
  models::Model<float> model = load_model(cfg);
  data::Dataset eval_set = load_split(cfg, false);
  const int64_t h = eval_set.images.shape[2], w = eval_set.images.shape[3];
  auto offsets = eval::full_heatmap_offsets(h, w);
  auto map = eval::fourier_heatmap(model, eval_set, cfg.eval.heatmap_norm, offsets,
                                   cfg.eval.heatmap_subset, cfg.seed, cfg.eval.heatmap_mirror);
  eval::write_heatmap_csv((dir / "heatmap.csv").string(), map, h, w, config::config_hash(cfg),
                          cfg.seed);
  std::printf("clean error %.4f; wrote %s\n", map.clean_error,
              (dir / "heatmap.csv").string().c_str());
  return 0;
}

int cmd_spectrum(const config::RunConfig& cfg) {
  fs::path dir = prepare_run_dir(cfg);
  models::Model<float> model = load_model(cfg);
  data::Dataset eval_set = load_split(cfg, false);
  auto rep = eval::perturbation_spectrum_report(model, eval_set, cfg.hat,
                                                cfg.eval.spectrum_samples, cfg.eval.spectrum_s);
  eval::write_spectrum_csv((dir / "spectrum.csv").string(), rep, config::config_hash(cfg),
                           cfg.seed);
  std::ofstream sum(dir / "spectrum_summary.csv", std::ios::trunc);
  char head[96];
  std::snprintf(head, sizeof(head), "# config_hash=%016llx seed=%llu\n",
                static_cast<unsigned long long>(config::config_hash(cfg)),
                static_cast<unsigned long long>(cfg.seed));
  sum << head << "S,natural_highfreq_ratio,perturbation_highfreq_ratio,n\n"
      << rep.filter_size << "," << rep.natural_highfreq_ratio << ","
      << rep.perturbation_highfreq_ratio << "," << rep.sample_count << "\n";
  std::printf("highfreq ratio: natural %.4f perturbation %.4f (S=%lld, n=%lld)\n",
              rep.natural_highfreq_ratio, rep.perturbation_highfreq_ratio,
              static_cast<long long>(rep.filter_size), static_cast<long long>(rep.sample_count));
  return 0;
}

int cmd_ablation(const config::RunConfig& cfg) {
  fs::path dir = prepare_run_dir(cfg);
  data::Dataset train_set = load_split(cfg, true);
  data::Dataset eval_set = load_split(cfg, false);
  models::Model<float> model = model_from_config(cfg);
  train::TrainConfig tc = cfg.train;
  tc.seed = cfg.seed;
  auto rows = train::ablation_matrix(model, train_set, eval_set, tc, cfg.hat);
  train::write_ablation_csv((dir / "ablation.csv").string(), rows, config::config_hash(cfg),
                            cfg.seed);
  for (const auto& r : rows) std::printf("%-10s %.4f\n", r.strategy.c_str(), r.eval_acc);
  return 0;
}

int cmd_theorem1(const config::RunConfig& cfg, int64_t n, int kmax, const std::string& matrix) {
  fs::path dir = prepare_run_dir(cfg);
  Tensor<double> a;
  if (matrix == "uniform") {
    a = Tensor<double>::full({n, n}, 1.0 / static_cast<double>(n));
  } else if (matrix == "identity") {
    // strictly positive row-stochastic approximation of the identity
    a = Tensor<double>::full({n, n}, 1e-9);
    for (int64_t i = 0; i < n; ++i)
      a.at({i, i}) = 1.0 - 1e-9 * static_cast<double>(n - 1);
  } else if (matrix == "random") {
    SeedSplitter seeds(cfg.seed);
    Rng rng = seeds.rng_for("theorem1");
    a = Tensor<double>::zeros({n, n});
    for (int64_t i = 0; i < n; ++i) {
      double mx = -1e300;
      for (int64_t j = 0; j < n; ++j) {
        a.at({i, j}) = rng.normal();
        mx = std::max(mx, a.at({i, j}));
      }
      double denom = 0.0;
      for (int64_t j = 0; j < n; ++j) denom += std::exp(a.at({i, j}) - mx);
      for (int64_t j = 0; j < n; ++j) a.at({i, j}) = std::exp(a.at({i, j}) - mx) / denom;
    }
  } else {
    throw ValueError("theorem1: matrix must be random|uniform|identity");
  }
  SeedSplitter seeds(cfg.seed);
  Rng vr = seeds.rng_for("theorem1-v");
  std::vector<double> v(static_cast<size_t>(n));
  for (auto& x : v) x = vr.normal();
  auto ratios = spectral::attention_lowpass_decay(a, v, kmax);
  std::ofstream out(dir / "theorem1.csv", std::ios::trunc);
  char head[96];
  std::snprintf(head, sizeof(head), "# config_hash=%016llx seed=%llu\n",
                static_cast<unsigned long long>(config::config_hash(cfg)),
                static_cast<unsigned long long>(cfg.seed));
  out << head << "k,ratio\n";
  for (size_t k = 0; k < ratios.size(); ++k)
    out << (k + 1) << "," << ratios[k] << "\n";
  std::printf("ratio k=1: %.6g, k=%d: %.6g; wrote %s\n", ratios.front(), kmax, ratios.back(),
              (dir / "theorem1.csv").string().c_str());
  return 0;
}

int cmd_selftest(const config::RunConfig& cfg) {
  auto results = selftest::run_all(cfg.seed);
  int failed = 0;
  for (const auto& r : results) {
    if (r.pass) {
      std::printf("ok   %s\n", r.name.c_str());
    } else {
      std::printf("FAIL %s: %s\n", r.name.c_str(), r.detail.c_str());
      ++failed;
    }
  }
  std::printf("%zu checks, %d failed\n", results.size(), failed);
  return failed == 0 ? 0 : 1;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"frequency analysis and adversarial training toolkit for small vision models"};
  app.set_version_flag("--version", std::string(kVersion));
  app.require_subcommand(1);

  struct Sub {
    CLI::App* cmd;
    CliState st;
  };
  std::map<std::string, Sub> subs;
  for (const char* name : {"train", "eval", "sweep", "heatmap", "spectrum", "ablation",
                           "theorem1", "selftest"}) {
    Sub s;
    s.cmd = app.add_subcommand(name, "");
    subs.emplace(name, std::move(s));
  }
  subs["train"].cmd->description("train a model (baseline or adversarial schedule)");
  subs["eval"].cmd->description("top-1 accuracy of a checkpoint");
  subs["sweep"].cmd->description("filtered-accuracy sweep over filter sizes");
  subs["heatmap"].cmd->description("error-rate heat map under additive basis noise");
  subs["spectrum"].cmd->description("paired spectrum report for images and perturbations");
  subs["ablation"].cmd->description("baseline/low/high/full perturbation comparison");
  subs["theorem1"].cmd->description("attention low-pass decay experiment");
  subs["selftest"].cmd->description("run the built-in invariant suite");
  for (auto& [name, sub] : subs) register_config_flags(sub.cmd, sub.st);

  int64_t t1_n = 64;
  int t1_kmax = 50;
  std::string t1_matrix = "random";
  subs["theorem1"].cmd->add_option("--n", t1_n, "matrix size");
  subs["theorem1"].cmd->add_option("--kmax", t1_kmax, "largest power");
  subs["theorem1"].cmd->add_option("--matrix", t1_matrix, "random|uniform|identity");

  CLI11_PARSE(app, argc, argv);

  try {
    for (auto& [name, sub] : subs) {
      if (!sub.cmd->parsed()) continue;
      config::RunConfig cfg = resolve_config(sub.cmd, sub.st);
      if (name == "train") return cmd_train(cfg);
      if (name == "eval") return cmd_eval(cfg);
      if (name == "sweep") return cmd_sweep(cfg);
      if (name == "heatmap") return cmd_heatmap(cfg);
      if (name == "spectrum") return cmd_spectrum(cfg);
      if (name == "ablation") return cmd_ablation(cfg);
      if (name == "theorem1") return cmd_theorem1(cfg, t1_n, t1_kmax, t1_matrix);
      if (name == "selftest") return cmd_selftest(cfg);
    }
  } catch (const ConfigError& e) {
    std::fprintf(stderr, "error: config: %s\n", e.what());
    return 2;
  } catch (const FormatError& e) {
    std::fprintf(stderr, "error: format: %s\n", e.what());
    return 3;
  } catch (const std::exception& e) {
    std::fprintf(stderr, "error: %s\n", e.what());
    return 1;
  }
  return 0;
}
