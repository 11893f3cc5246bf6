#pragma once

#include <optional>
#include <string>
#include <vector>

#include "lmrc/attacks.hpp"
#include "lmrc/data.hpp"
#include "lmrc/masking.hpp"
#include "lmrc/model.hpp"

namespace lmrc {

enum class Method { Sat, LmOracle, LmCca, LcCca, LcCcaStar, LcCcaStarDelta };

std::string method_name(Method m);
Method method_from_name(const std::string& name);

struct OptimizerConfig {
  float lr = 0.1f;
  float momentum = 0.9f;
  float weight_decay = 5e-4f;
  std::vector<int> lr_step_epochs = {75, 90};  // 1-based epochs at which lr divides by 10
  float lr_decay = 0.1f;
};

inline AttackSpec make_attack_spec(int steps, bool random_start) {
  AttackSpec s;
  s.steps = steps;
  s.random_start = random_start;
  return s;
}

struct RunConfig {
  Method method = Method::Sat;
  float gamma = 0.0f;  // label smoothing
  int k = -1;          // mask cardinality; -1 resolves to round(0.1 * d)
  float delta = 0.0f;  // oracle-projection margin
  AttackSpec train_attack = make_attack_spec(10, true);
  AttackSpec eval_attack = make_attack_spec(20, true);
  AttackSpec cca_attack = make_attack_spec(10, false);
  OptimizerConfig optimizer;
  int epochs = 120;
  int batch_size = 128;
  std::uint64_t seed = 1;
  int validation_size = 1000;
  AugmentationPolicy augment;

  int resolved_k(int penultimate_dim) const;
  void validate(int penultimate_dim) const;
};

struct MetricsRecord {
  int epoch = 0;  // 1-based
  Method method = Method::Sat;
  float gamma = 0.0f;
  int k = 0;
  float delta = 0.0f;
  std::uint64_t seed = 0;
  float train_loss = 0.0f;
  float clean_acc = 0.0f;   // validation, percent
  float robust_acc = 0.0f;  // validation, percent
  float lr = 0.0f;
  float wall_time = 0.0f;  // measured seconds; serialized as 0 (see metrics_csv_row)
};

/// (1-gamma) on the true class plus gamma/c everywhere, one row per label.
Tensor smooth_targets(const std::vector<int>& labels, int classes, float gamma);

/// Stabilized -sum(targets * log softmax(logits)), averaged over the batch.
Tensor cross_entropy(const Tensor& logits, const Tensor& targets);

/// SGD with momentum and weight decay:
///   g += wd * w;  v = momentum * v + g;  w -= lr * v.
class SgdOptimizer {
 public:
  using Params = std::vector<std::pair<std::string, Tensor>>;
  SgdOptimizer(Params& params, OptimizerConfig config);
  void step(float lr);
  /// Learning rate for a 1-based epoch index under the step schedule.
  float lr_for_epoch(int epoch) const;
  const OptimizerConfig& config() const { return config_; }

 private:
  Params& params_;
  OptimizerConfig config_;
  std::vector<std::vector<float>> velocity_;
};

enum class EvalMode { Clean, Pgd, PgdWithLmOracle, PgdWithLmCca, PgdWithLcCca };

std::string eval_mode_name(EvalMode m);
EvalMode eval_mode_from_name(const std::string& name);

struct EvalResult {
  float clean_acc = 0.0f;
  std::optional<float> robust_acc;
};

/// Accuracy under the given inference pipeline. For the LM modes the mask is
/// derived once per sample from the adversarial observation and applied to
/// both the clean and the adversarial evaluation. `attack` defaults to
/// config.eval_attack; pass config.train_attack for validation selection.
EvalResult evaluate(Classifier& model, const Dataset& data, const RunConfig& config, EvalMode mode,
                    const AttackSpec* attack = nullptr, std::uint64_t seed_salt = 0);

/// The inference pipeline a trained method is evaluated with.
EvalMode eval_mode_for_method(Method m);

/// One pass over the training data with the method's pipeline, then a
/// validation measurement (clean + robust under the training attack).
MetricsRecord train_epoch(Classifier& model, const Dataset& train, const Dataset& validation,
                          const RunConfig& config, SgdOptimizer& optimizer, int epoch);

/// Highest validation robust accuracy; ties resolve to the earliest epoch.
/// Returns a 0-based index into the history.
int select_best(const std::vector<MetricsRecord>& history);

using EpochCallback = std::function<void(const MetricsRecord&, bool is_best)>;

struct TrainResult {
  std::vector<MetricsRecord> history;
  int best_epoch_index = -1;  // 0-based; -1 when no epochs ran
};

TrainResult train(Classifier& model, const Dataset& train_set, const Dataset& validation,
                  const RunConfig& config, const EpochCallback& on_epoch = {});

std::string metrics_csv_header();
std::string metrics_csv_row(const MetricsRecord& r);
void write_metrics_csv(const std::string& path, const std::vector<MetricsRecord>& history);

}  // namespace lmrc
