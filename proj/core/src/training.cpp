#include "lmrc/training.hpp"

#include <algorithm>
#include <chrono>
#include <cmath>
#include <cstdio>
#include <fstream>
#include <numeric>

namespace lmrc {

std::string method_name(Method m) {
  switch (m) {
    case Method::Sat: return "sat";
    case Method::LmOracle: return "lm_oracle";
    case Method::LmCca: return "lm_cca";
    case Method::LcCca: return "lc_cca";
    case Method::LcCcaStar: return "lc_cca_star";
    case Method::LcCcaStarDelta: return "lc_cca_star_delta";
  }
  throw ConfigError("unknown method enum value");
}

Method method_from_name(const std::string& name) {
  if (name == "sat") return Method::Sat;
  if (name == "lm_oracle") return Method::LmOracle;
  if (name == "lm_cca") return Method::LmCca;
  if (name == "lc_cca") return Method::LcCca;
  if (name == "lc_cca_star") return Method::LcCcaStar;
  if (name == "lc_cca_star_delta") return Method::LcCcaStarDelta;
  throw ConfigError("unknown method: " + name);
}

std::string eval_mode_name(EvalMode m) {
  switch (m) {
    case EvalMode::Clean: return "clean";
    case EvalMode::Pgd: return "pgd";
    case EvalMode::PgdWithLmOracle: return "pgd_with_lm_oracle";
    case EvalMode::PgdWithLmCca: return "pgd_with_lm_cca";
    case EvalMode::PgdWithLcCca: return "pgd_with_lc_cca";
  }
  throw ConfigError("unknown eval mode enum value");
}

EvalMode eval_mode_from_name(const std::string& name) {
  if (name == "clean") return EvalMode::Clean;
  if (name == "pgd") return EvalMode::Pgd;
  if (name == "pgd_with_lm_oracle") return EvalMode::PgdWithLmOracle;
  if (name == "pgd_with_lm_cca") return EvalMode::PgdWithLmCca;
  if (name == "pgd_with_lc_cca") return EvalMode::PgdWithLcCca;
  throw ConfigError("unknown evaluation mode: " + name);
}

EvalMode eval_mode_for_method(Method m) {
  switch (m) {
    case Method::Sat: return EvalMode::Pgd;
    case Method::LmOracle: return EvalMode::PgdWithLmOracle;
    case Method::LmCca: return EvalMode::PgdWithLmCca;
    case Method::LcCca:
    case Method::LcCcaStar:
    case Method::LcCcaStarDelta: return EvalMode::PgdWithLcCca;
  }
  throw ConfigError("unknown method enum value");
}

int RunConfig::resolved_k(int penultimate_dim) const {
  if (k >= 0) return k;
  return static_cast<int>(std::lround(0.1 * penultimate_dim));
}

void RunConfig::validate(int penultimate_dim) const {
  if (gamma < 0.0f || gamma >= 1.0f) throw ConfigError("gamma must lie in [0, 1)");
  const int kk = resolved_k(penultimate_dim);
  if (kk < 0 || kk > penultimate_dim)
    throw ConfigError("k = " + std::to_string(kk) + " out of range [0, " +
                      std::to_string(penultimate_dim) + "]");
  if (delta < 0.0f) throw ConfigError("delta must be >= 0");
  if (epochs < 0) throw ConfigError("epochs must be >= 0");
  if (batch_size < 1) throw ConfigError("batch_size must be >= 1");
  if (validation_size < 0) throw ConfigError("validation_size must be >= 0");
  if (optimizer.lr <= 0.0f) throw ConfigError("lr must be > 0");
  if (optimizer.momentum < 0.0f || optimizer.momentum >= 1.0f)
    throw ConfigError("momentum must lie in [0, 1)");
  if (optimizer.weight_decay < 0.0f) throw ConfigError("weight_decay must be >= 0");
  int prev = 0;
  for (int e : optimizer.lr_step_epochs) {
    if (e <= prev) throw ConfigError("lr_step_epochs must be strictly increasing");
    if (epochs > 0 && e >= epochs)
      throw ConfigError("lr_step_epochs must be smaller than the epoch count");
    prev = e;
  }
  train_attack.validate();
  eval_attack.validate();
  cca_attack.validate();
}

Tensor smooth_targets(const std::vector<int>& labels, int classes, float gamma) {
  if (classes < 1) throw ConfigError("smooth_targets: classes must be >= 1");
  if (gamma < 0.0f || gamma >= 1.0f) throw ConfigError("smooth_targets: gamma must lie in [0, 1)");
  const int batch = static_cast<int>(labels.size());
  std::vector<float> t(static_cast<std::size_t>(batch) * classes, gamma / classes);
  for (int b = 0; b < batch; ++b) {
    const int y = labels[b];
    if (y < 0 || y >= classes)
      throw ConfigError("smooth_targets: label " + std::to_string(y) + " out of range [0, " +
                        std::to_string(classes) + ")");
    t[static_cast<std::size_t>(b) * classes + y] = (1.0f - gamma) + gamma / classes;
  }
  return Tensor({batch, classes}, std::move(t));
}

Tensor cross_entropy(const Tensor& logits, const Tensor& targets) {
  return cross_entropy_with_logits(logits, targets);
}

SgdOptimizer::SgdOptimizer(Params& params, OptimizerConfig config)
    : params_(params), config_(std::move(config)) {
  velocity_.reserve(params_.size());
  for (auto& [name, p] : params_) velocity_.emplace_back(p.data().size(), 0.0f);
}

void SgdOptimizer::step(float lr) {
  auto& params = params_;
  for (std::size_t i = 0; i < params.size(); ++i) {
    Tensor& p = params[i].second;
    std::vector<float>& w = p.raw_data();
    std::vector<float>& v = velocity_[i];
    const bool has_grad = p.has_grad();
    const std::vector<float>* g = has_grad ? &p.grad() : nullptr;
    for (std::size_t j = 0; j < w.size(); ++j) {
      const float grad = (g ? (*g)[j] : 0.0f) + config_.weight_decay * w[j];
      v[j] = config_.momentum * v[j] + grad;
      w[j] -= lr * v[j];
    }
  }
}

float SgdOptimizer::lr_for_epoch(int epoch) const {
  float lr = config_.lr;
  for (int step : config_.lr_step_epochs)
    if (epoch >= step) lr *= config_.lr_decay;
  return lr;
}

namespace {

float accuracy_percent(const std::vector<int>& predicted, const std::vector<int>& truth) {
  if (predicted.size() != truth.size()) throw ShapeError("accuracy: size mismatch");
  if (predicted.empty()) return 0.0f;
  int correct = 0;
  for (std::size_t i = 0; i < predicted.size(); ++i)
    if (predicted[i] == truth[i]) ++correct;
  return 100.0f * static_cast<float>(correct) / static_cast<float>(predicted.size());
}

AttackLoss plain_ce_loss(int classes) {
  return [classes](const Tensor& logits, const std::vector<int>& labels) {
    return cross_entropy_with_logits(logits, smooth_targets(labels, classes, 0.0f));
  };
}

AttackLoss smoothed_ce_loss(int classes, float gamma) {
  return [classes, gamma](const Tensor& logits, const std::vector<int>& labels) {
    return cross_entropy_with_logits(logits, smooth_targets(labels, classes, gamma));
  };
}

std::vector<std::vector<int>> batch_indices(int n, int batch_size) {
  std::vector<std::vector<int>> out;
  for (int start = 0; start < n; start += batch_size) {
    std::vector<int> idx;
    for (int i = start; i < std::min(n, start + batch_size); ++i) idx.push_back(i);
    out.push_back(std::move(idx));
  }
  return out;
}

AttackSpec cca_spec_for_method(const RunConfig& config) {
  AttackSpec spec = config.cca_attack;
  spec.margin = config.method == Method::LcCcaStarDelta ? config.delta : 0.0f;
  return spec;
}

}  // namespace

EvalResult evaluate(Classifier& model, const Dataset& data, const RunConfig& config, EvalMode mode,
                    const AttackSpec* attack, std::uint64_t seed_salt) {
  EvalResult result;
  if (data.size() == 0) return result;
  const AttackSpec spec = attack ? *attack : config.eval_attack;
  const int classes = model.classes();
  const int kk = config.resolved_k(model.penultimate_dim());
  const AttackLoss attack_loss = plain_ce_loss(classes);
  EvaluationScope eval(model);

  std::vector<int> clean_pred, robust_pred;
  const AugmentationPolicy no_aug;
  int batch_index = 0;
  for (const auto& idx : batch_indices(data.size(), config.batch_size)) {
    Batch batch = make_batch(data, idx, no_aug, nullptr);
    const std::uint64_t attack_seed =
        Rng::derive(config.seed, 0xEA70000ULL + (seed_salt << 16) + batch_index);
    ++batch_index;

    if (mode == EvalMode::Clean) {
      ParameterFreeze freeze(model);
      auto pred = argmax_labels(model.forward(batch.x));
      clean_pred.insert(clean_pred.end(), pred.begin(), pred.end());
      continue;
    }

    Tensor x_adv = pgd(model, batch.x, batch.y, spec, attack_loss, attack_seed);
    ParameterFreeze freeze(model);
    switch (mode) {
      case EvalMode::Pgd: {
        auto cp = argmax_labels(model.forward(batch.x));
        auto rp = argmax_labels(model.forward(x_adv));
        clean_pred.insert(clean_pred.end(), cp.begin(), cp.end());
        robust_pred.insert(robust_pred.end(), rp.begin(), rp.end());
        break;
      }
      case EvalMode::PgdWithLmOracle:
      case EvalMode::PgdWithLmCca: {
        std::vector<LatentMask> masks;
        if (mode == EvalMode::PgdWithLmOracle) {
          masks = oracle_masks(model, batch.x, x_adv, kk);
        } else {
          AttackSpec cca_spec = config.cca_attack;
          cca_spec.margin = 0.0f;
          masks = cca_masks(model, x_adv, cca_spec, kk);
        }
        Tensor keep = keep_matrix(masks);
        auto cp = argmax_labels(model.masked_forward(batch.x, keep));
        auto rp = argmax_labels(model.masked_forward(x_adv, keep));
        clean_pred.insert(clean_pred.end(), cp.begin(), cp.end());
        robust_pred.insert(robust_pred.end(), rp.begin(), rp.end());
        break;
      }
      case EvalMode::PgdWithLcCca: {
        AttackSpec cca_spec = config.cca_attack;
        cca_spec.margin = 0.0f;
        Tensor x_hat_clean = cca(model, batch.x, cca_spec, CcaCenter::Observed);
        Tensor x_hat_adv = cca(model, x_adv, cca_spec, CcaCenter::Observed);
        auto cp = argmax_labels(model.forward(x_hat_clean));
        auto rp = argmax_labels(model.forward(x_hat_adv));
        clean_pred.insert(clean_pred.end(), cp.begin(), cp.end());
        robust_pred.insert(robust_pred.end(), rp.begin(), rp.end());
        break;
      }
      case EvalMode::Clean: break;  // handled above
    }
  }

  result.clean_acc = accuracy_percent(clean_pred, data.labels);
  if (mode != EvalMode::Clean) result.robust_acc = accuracy_percent(robust_pred, data.labels);
  return result;
}

MetricsRecord train_epoch(Classifier& model, const Dataset& train_set, const Dataset& validation,
                          const RunConfig& config, SgdOptimizer& optimizer, int epoch) {
  const auto t0 = std::chrono::steady_clock::now();
  const int classes = model.classes();
  const int kk = config.resolved_k(model.penultimate_dim());
  const float lr = optimizer.lr_for_epoch(epoch);
  const AttackLoss loss_fn = smoothed_ce_loss(classes, config.gamma);

  // deterministic shuffle + augmentation streams for this epoch
  std::vector<int> order(train_set.size());
  std::iota(order.begin(), order.end(), 0);
  Rng shuffle_rng(Rng::derive(config.seed, 0x5F000000ULL + epoch));
  for (int i = train_set.size() - 1; i > 0; --i)
    std::swap(order[i], order[shuffle_rng.uniform_int(i + 1)]);
  Rng augment_rng(Rng::derive(config.seed, 0xA6000000ULL + epoch));

  double loss_sum = 0.0;
  std::int64_t seen = 0;
  int batch_index = 0;
  for (int start = 0; start < train_set.size(); start += config.batch_size) {
    std::vector<int> idx(order.begin() + start,
                         order.begin() + std::min<std::size_t>(train_set.size(),
                                                               start + config.batch_size));
    Batch batch = make_batch(train_set, idx, config.augment, &augment_rng);
    const std::uint64_t attack_seed =
        Rng::derive(config.seed, (static_cast<std::uint64_t>(epoch) << 24) + batch_index);
    ++batch_index;

    Tensor x_adv = pgd(model, batch.x, batch.y, config.train_attack, loss_fn, attack_seed);

    Tensor train_input = x_adv;
    Tensor keep;
    switch (config.method) {
      case Method::Sat: break;
      case Method::LmOracle:
      case Method::LmCca:
        keep = keep_matrix(oracle_masks(model, batch.x, x_adv, kk));
        break;
      case Method::LcCca:
        train_input = cca(model, x_adv, cca_spec_for_method(config), CcaCenter::Observed);
        break;
      case Method::LcCcaStar:
      case Method::LcCcaStarDelta:
        train_input =
            cca(model, x_adv, cca_spec_for_method(config), CcaCenter::Oracle, &batch.x);
        break;
    }

    model.set_mode(Mode::Training);
    model.zero_grads();
    Tensor targets = smooth_targets(batch.y, classes, config.gamma);
    Tensor logits = keep.defined() ? model.masked_forward(train_input, keep)
                                   : model.forward(train_input);
    Tensor loss = cross_entropy_with_logits(logits, targets);
    const float loss_value = loss.item();
    if (!std::isfinite(loss_value)) {
      warnings::bump(warnings::Counter::NonFiniteLoss);
      throw Error("training loss turned non-finite in epoch " + std::to_string(epoch) +
                  ", batch " + std::to_string(batch_index - 1) + " (method " +
                  method_name(config.method) + ")");
    }
    backward(loss);
    optimizer.step(lr);
    loss_sum += static_cast<double>(loss_value) * static_cast<double>(idx.size());
    seen += static_cast<std::int64_t>(idx.size());
  }

  MetricsRecord rec;
  rec.epoch = epoch;
  rec.method = config.method;
  rec.gamma = config.gamma;
  rec.k = kk;
  rec.delta = config.delta;
  rec.seed = config.seed;
  rec.train_loss = seen ? static_cast<float>(loss_sum / static_cast<double>(seen)) : 0.0f;
  rec.lr = lr;
  if (validation.size() > 0) {
    EvalResult vr = evaluate(model, validation, config, eval_mode_for_method(config.method),
                             &config.train_attack, static_cast<std::uint64_t>(epoch));
    rec.clean_acc = vr.clean_acc;
    rec.robust_acc = vr.robust_acc.value_or(vr.clean_acc);
  }
  rec.wall_time =
      std::chrono::duration<float>(std::chrono::steady_clock::now() - t0).count();
  return rec;
}

int select_best(const std::vector<MetricsRecord>& history) {
  if (history.empty()) throw ConfigError("select_best: empty history");
  int best = 0;
  for (int i = 1; i < static_cast<int>(history.size()); ++i)
    if (history[i].robust_acc > history[best].robust_acc) best = i;
  return best;
}

TrainResult train(Classifier& model, const Dataset& train_set, const Dataset& validation,
                  const RunConfig& config, const EpochCallback& on_epoch) {
  config.validate(model.penultimate_dim());
  TrainResult result;
  SgdOptimizer optimizer(model.parameters(), config.optimizer);
  for (int epoch = 1; epoch <= config.epochs; ++epoch) {
    MetricsRecord rec = train_epoch(model, train_set, validation, config, optimizer, epoch);
    const bool is_best = result.best_epoch_index < 0 ||
                         rec.robust_acc > result.history[result.best_epoch_index].robust_acc;
    result.history.push_back(rec);
    if (is_best) result.best_epoch_index = epoch - 1;
    if (on_epoch) on_epoch(rec, is_best);
  }
  return result;
}

std::string metrics_csv_header() {
  return "epoch,method,gamma,k,delta,seed,train_loss,clean_acc,robust_acc,lr,wall_time";
}

namespace {

std::string fmt_float(float v) {
  char buf[32];
  std::snprintf(buf, sizeof(buf), "%.6g", static_cast<double>(v));
  return buf;
}

}  // namespace

std::string metrics_csv_row(const MetricsRecord& r) {
  std::string row = std::to_string(r.epoch);
  row += ',' + method_name(r.method);
  row += ',' + fmt_float(r.gamma);
  row += ',' + std::to_string(r.k);
  row += ',' + fmt_float(r.delta);
  row += ',' + std::to_string(r.seed);
  row += ',' + fmt_float(r.train_loss);
  row += ',' + fmt_float(r.clean_acc);
  row += ',' + fmt_float(r.robust_acc);
  row += ',' + fmt_float(r.lr);
  // wall_time is measured but zeroed on disk: the CSV is part of the
  // byte-identical reproducibility contract. Measured times go to timing.log.
  row += ",0";
  return row;
}

void write_metrics_csv(const std::string& path, const std::vector<MetricsRecord>& history) {
  std::ofstream f(path, std::ios::binary | std::ios::trunc);
  if (!f) throw ArtifactError(ArtifactError::Kind::Io, "cannot open " + path + " for writing");
  f << metrics_csv_header() << '\n';
  for (const auto& r : history) f << metrics_csv_row(r) << '\n';
}

}  // namespace lmrc
