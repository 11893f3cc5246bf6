#include "commands.hpp"

#include <chrono>
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <iostream>

#include "cli_config.hpp"
#include "lmrc/attacks.hpp"
#include "lmrc/checkpoint.hpp"
#include "lmrc/masking.hpp"
#include "lmrc/selfcheck.hpp"
#include "lmrc/training.hpp"

namespace lmrc::cli {

namespace fs = std::filesystem;

namespace {

std::string fmt(float v) {
  char buf[32];
  std::snprintf(buf, sizeof(buf), "%.6g", static_cast<double>(v));
  return buf;
}

void write_text(const std::string& path, const std::string& text) {
  std::ofstream f(path, std::ios::binary | std::ios::trunc);
  if (!f) throw ArtifactError(ArtifactError::Kind::Io, "cannot open " + path + " for writing");
  f << text;
}

void run_one_training(const ResolvedRun& resolved) {
  fs::create_directories(resolved.out_dir);
  write_text(resolved.out_dir + "/config.resolved", resolved.canonical_text());

  LoadedData data = load_dataset(resolved.dataset);
  ArchConfig arch = resolved.arch;
  fit_arch_to_data(arch, data);
  auto [train_set, validation] = split_train_validation(data.train, resolved.run.validation_size);

  Classifier model = Classifier::build(arch, resolved.run.seed);
  std::ofstream timing(resolved.out_dir + "/timing.log", std::ios::trunc);

  if (resolved.run.epochs == 0) {
    std::cerr << "warning: epochs = 0, nothing to train\n";
    write_metrics_csv(resolved.out_dir + "/metrics.csv", {});
    return;
  }

  std::cout << "training " << method_name(resolved.run.method) << " on " << resolved.dataset
            << " for " << resolved.run.epochs << " epochs -> " << resolved.out_dir << std::endl;
  TrainResult result =
      train(model, train_set, validation, resolved.run, [&](const MetricsRecord& rec, bool best) {
        std::cout << "epoch " << rec.epoch << "/" << resolved.run.epochs << "  lr " << fmt(rec.lr)
                  << "  loss " << fmt(rec.train_loss) << "  val clean " << fmt(rec.clean_acc)
                  << "%  val robust " << fmt(rec.robust_acc) << "%"
                  << (best ? "  (best)" : "") << std::endl;
        timing << "epoch " << rec.epoch << " wall_seconds " << rec.wall_time << "\n";
        timing.flush();
        if (best) save_checkpoint(model, resolved.out_dir + "/best.ckpt");
      });
  write_metrics_csv(resolved.out_dir + "/metrics.csv", result.history);
  save_checkpoint(model, resolved.out_dir + "/last.ckpt");
  if (result.best_epoch_index >= 0)
    std::cout << "best epoch: " << result.history[result.best_epoch_index].epoch << " (robust "
              << fmt(result.history[result.best_epoch_index].robust_acc) << "%)" << std::endl;
}

}  // namespace

int cmd_train(const std::string& config_path) {
  const auto file = parse_config_file(config_path);
  const std::vector<ResolvedRun> runs = resolve_config(file);
  for (const ResolvedRun& r : runs) run_one_training(r);
  return 0;
}

int cmd_evaluate(const std::string& checkpoint_path, const std::string& config_path,
                 const std::vector<std::string>& modes) {
  const auto file = parse_config_file(config_path);
  const std::vector<ResolvedRun> runs = resolve_config(file);
  if (runs.size() != 1) throw ConfigError("evaluate does not accept sweep configurations");
  const ResolvedRun& resolved = runs.front();

  Classifier model = load_checkpoint(checkpoint_path);
  LoadedData data = load_dataset(resolved.dataset);
  if (data.test.size() == 0) throw ConfigError("dataset '" + resolved.dataset + "' has no test split");
  if (model.config().in_channels != data.test.channels() ||
      model.config().in_h != data.test.height() || model.config().in_w != data.test.width() ||
      model.config().classes != data.classes)
    throw ArtifactError(ArtifactError::Kind::DescriptorMismatch,
                        "checkpoint architecture " + model.config().descriptor() +
                            " does not fit dataset " + resolved.dataset);

  std::string csv = "mode,clean_acc,robust_acc\n";
  for (const std::string& mode_name : modes) {
    const EvalMode mode = eval_mode_from_name(mode_name);
    EvalResult res = evaluate(model, data.test, resolved.run, mode);
    csv += mode_name + "," + fmt(res.clean_acc) + ",";
    if (res.robust_acc) csv += fmt(*res.robust_acc);
    csv += "\n";
  }
  std::cout << csv;
  fs::create_directories(resolved.out_dir);
  write_text(resolved.out_dir + "/report.csv", csv);
  return 0;
}

int cmd_diagnose_latents(const std::string& checkpoint_path, const std::string& config_path,
                         int sample_count) {
  const auto file = parse_config_file(config_path);
  const std::vector<ResolvedRun> runs = resolve_config(file);
  if (runs.size() != 1) throw ConfigError("diagnose-latents does not accept sweep configurations");
  const ResolvedRun& resolved = runs.front();
  const RunConfig& rc = resolved.run;

  Classifier model = load_checkpoint(checkpoint_path);
  LoadedData data = load_dataset(resolved.dataset);
  const int d = model.penultimate_dim();
  const int n = data.test.size();
  if (n == 0) throw ConfigError("dataset '" + resolved.dataset + "' has no test split");

  // attack + counter-attack every candidate batch, collect per-sample latents
  struct Row {
    int id;
    int truth;
    int pred_clean, pred_adv, pred_cca;
    std::vector<float> z_clean, z_adv, z_cca;
  };
  std::vector<Row> rows;
  EvaluationScope eval(model);
  const AugmentationPolicy no_aug;
  AttackSpec cca_spec = rc.cca_attack;
  cca_spec.margin = 0.0f;
  const AttackLoss loss = [&](const Tensor& logits, const std::vector<int>& y) {
    return cross_entropy_with_logits(logits, smooth_targets(y, model.classes(), 0.0f));
  };
  int batch_index = 0;
  for (int start = 0; start < n; start += rc.batch_size) {
    std::vector<int> idx;
    for (int i = start; i < std::min(n, start + rc.batch_size); ++i) idx.push_back(i);
    Batch batch = make_batch(data.test, idx, no_aug, nullptr);
    const std::uint64_t seed = Rng::derive(rc.seed, 0xD1A60000ULL + batch_index);
    ++batch_index;
    Tensor x_adv = pgd(model, batch.x, batch.y, rc.eval_attack, loss, seed);
    Tensor x_cca = cca(model, x_adv, cca_spec, CcaCenter::Observed);
    ParameterFreeze freeze(model);
    Tensor z_clean = model.penultimate(batch.x);
    Tensor z_adv = model.penultimate(x_adv);
    Tensor z_cca = model.penultimate(x_cca);
    auto pc = argmax_labels(model.head(z_clean));
    auto pa = argmax_labels(model.head(z_adv));
    auto px = argmax_labels(model.head(z_cca));
    for (std::size_t i = 0; i < idx.size(); ++i) {
      Row r;
      r.id = idx[i];
      r.truth = batch.y[i];
      r.pred_clean = pc[i];
      r.pred_adv = pa[i];
      r.pred_cca = px[i];
      auto slice = [d, i](const Tensor& z) {
        return std::vector<float>(z.data().begin() + static_cast<std::size_t>(i) * d,
                                  z.data().begin() + static_cast<std::size_t>(i + 1) * d);
      };
      r.z_clean = slice(z_clean);
      r.z_adv = slice(z_adv);
      r.z_cca = slice(z_cca);
      rows.push_back(std::move(r));
    }
    if (static_cast<int>(rows.size()) >= n) break;
  }

  // prefer samples broken by the attack and repaired by the counter-attack
  std::vector<const Row*> selected;
  for (const Row& r : rows) {
    if (static_cast<int>(selected.size()) >= sample_count) break;
    if (r.pred_adv != r.truth && r.pred_cca == r.truth) selected.push_back(&r);
  }
  for (const Row& r : rows) {
    if (static_cast<int>(selected.size()) >= sample_count) break;
    if (std::find(selected.begin(), selected.end(), &r) == selected.end()) selected.push_back(&r);
  }

  std::string csv = "sample_id,variant,predicted_label,true_label,cosine_to_clean";
  for (int i = 0; i < d; ++i) csv += ",z_" + std::to_string(i);
  csv += "\n";
  auto emit = [&](const Row& r, const char* variant, int pred, const std::vector<float>& z,
                  float cosine) {
    csv += std::to_string(r.id);
    csv += ",";
    csv += variant;
    csv += "," + std::to_string(pred) + "," + std::to_string(r.truth) + "," + fmt(cosine);
    for (float v : z) csv += "," + fmt(v);
    csv += "\n";
  };
  for (const Row* r : selected) {
    emit(*r, "clean", r->pred_clean, r->z_clean, 1.0f);
    emit(*r, "adversarial", r->pred_adv, r->z_adv, cosine_similarity(r->z_clean, r->z_adv));
    emit(*r, "cca", r->pred_cca, r->z_cca, cosine_similarity(r->z_clean, r->z_cca));
  }
  fs::create_directories(resolved.out_dir);
  write_text(resolved.out_dir + "/latents.csv", csv);
  std::cout << "wrote " << selected.size() * 3 << " latent rows to " << resolved.out_dir
            << "/latents.csv" << std::endl;
  return 0;
}

int cmd_selftest(std::uint64_t seed, const std::string& inject_fault) {
  if (!inject_fault.empty()) selfcheck::inject_gradcheck_fault(inject_fault);
  const std::string scratch =
      (fs::temp_directory_path() / ("lmrc-selftest-" + std::to_string(::getpid()))).string();
  const auto t0 = std::chrono::steady_clock::now();
  const auto results = selfcheck::run_all(seed, scratch);
  selfcheck::inject_gradcheck_fault("");
  int failures = 0;
  for (const auto& r : results) {
    std::cout << (r.passed ? "[PASS] " : "[FAIL] ") << r.name << " - " << r.detail << std::endl;
    failures += r.passed ? 0 : 1;
  }
  const float secs = std::chrono::duration<float>(std::chrono::steady_clock::now() - t0).count();
  std::cout << (failures ? "selftest FAILED (" : "selftest passed (") << results.size()
            << " checks, " << fmt(secs) << "s)" << std::endl;
  std::error_code ec;
  fs::remove_all(scratch, ec);
  return failures ? 4 : 0;
}

}  // namespace lmrc::cli
