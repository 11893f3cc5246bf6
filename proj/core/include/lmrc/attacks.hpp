#pragma once

#include <functional>
#include <vector>

#include "lmrc/model.hpp"

namespace lmrc {

/// L-infinity ball geometry and step schedule shared by PGD and CCA.
struct AttackSpec {
  float epsilon = 8.0f / 255.0f;
  float alpha = 2.0f / 255.0f;
  int steps = 10;
  float clamp_lo = 0.0f;
  float clamp_hi = 1.0f;
  bool random_start = false;
  float margin = 0.0f;  // delta, used by the oracle-projected CCA variants

  /// epsilon == 0 denotes the degenerate ball (attack returns its input).
  void validate() const;
};

struct Ball {
  Tensor center;
  float radius = 0.0f;
};

/// Elementwise clamp of x into [center-radius, center+radius], then into
/// [clamp_lo, clamp_hi]. Pure value operation (no graph participation).
Tensor project(const Tensor& x, const Ball& ball, float clamp_lo, float clamp_hi);

/// Called after each attack step with the current iterate (step is 0-based).
using IterateObserver = std::function<void(int step, const Tensor& iterate)>;

/// Scalar attack loss from logits and true labels.
using AttackLoss = std::function<Tensor(const Tensor& logits, const std::vector<int>& labels)>;

/// Iterated sign-gradient ascent on `loss` within the epsilon-ball around x,
/// intersected with the pixel range. Runs the model in evaluation mode with
/// parameters frozen. Samples whose gradient turns non-finite stop at their
/// last valid iterate (warnings::Counter::NonFiniteGradient).
Tensor pgd(Classifier& model, const Tensor& x, const std::vector<int>& labels,
           const AttackSpec& spec, const AttackLoss& loss, std::uint64_t seed,
           const IterateObserver& observer = {});

/// L1 norm of the penultimate activations, summed over the batch.
Tensor compression_loss(Classifier& model, const Tensor& x);
/// Per-sample |z|_1, for diagnostics.
std::vector<float> compression_per_sample(Classifier& model, const Tensor& x);

enum class CcaCenter { Observed, Oracle };

/// Compressive counter-adversarial attack: sign-gradient descent on the
/// penultimate L1 norm, starting from the observed sample. The ball is
/// centered on the observed sample with radius epsilon, or on the supplied
/// clean sample with radius epsilon + margin (training-time oracle variants).
Tensor cca(Classifier& model, const Tensor& x_obs, const AttackSpec& spec, CcaCenter center,
           const Tensor* x_clean = nullptr, const IterateObserver& observer = {});

}  // namespace lmrc
