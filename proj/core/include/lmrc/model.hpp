#pragma once

#include <memory>
#include <string>
#include <utility>
#include <vector>

#include "lmrc/tensor.hpp"

namespace lmrc {

enum class Mode { Training, Evaluation };

/// Architecture selector plus the handful of knobs the builders expose.
/// The canonical descriptor string identifies compatible checkpoints.
struct ArchConfig {
  std::string arch = "small-cnn";  // "small-cnn" | "slim-resnet"
  int in_channels = 1;
  int in_h = 28;
  int in_w = 28;
  int classes = 10;
  int penultimate_dim = 128;  // d
  int width = 8;              // first conv width (small-cnn) / stage-1 width (slim-resnet)
  int blocks_per_stage = 1;   // slim-resnet only

  std::string descriptor() const;
  static ArchConfig from_descriptor(const std::string& text);

  static ArchConfig small_cnn(int in_channels = 1, int in_hw = 28, int classes = 10);
  static ArchConfig slim_resnet(int in_channels = 3, int in_hw = 32, int classes = 10,
                                int width = 32, int blocks_per_stage = 1);
};

namespace layers {
class Layer;
}

/// Layered classifier F = head ∘ body where `head` is the final dense map
/// from the penultimate features (length d) to class scores.
class Classifier {
 public:
  Classifier(Classifier&&) noexcept;
  Classifier& operator=(Classifier&&) noexcept;
  ~Classifier();

  static Classifier build(const ArchConfig& config, std::uint64_t init_seed);

  const ArchConfig& config() const { return config_; }
  int penultimate_dim() const { return config_.penultimate_dim; }
  int classes() const { return config_.classes; }

  Mode mode() const { return mode_; }
  void set_mode(Mode mode) { mode_ = mode; }

  Tensor forward(const Tensor& x);
  /// Activations immediately before the final dense layer, [B,d].
  Tensor penultimate(const Tensor& x);
  /// Final dense layer applied to given penultimate activations.
  Tensor head(const Tensor& z);
  /// forward() with the penultimate activations gated by `keep` ([d] shared
  /// across the batch or [B,d] per sample; entries in {0,1}). The gate is a
  /// constant: gradients flow through z only.
  Tensor masked_forward(const Tensor& x, const Tensor& keep);
  Tensor masked_forward(const Tensor& x, const std::vector<float>& keep);

  /// Named parameters in stable registration order.
  std::vector<std::pair<std::string, Tensor>>& parameters() { return params_; }
  const std::vector<std::pair<std::string, Tensor>>& parameters() const { return params_; }
  /// Non-trainable state (batch-norm running statistics).
  std::vector<std::pair<std::string, Tensor>>& buffers() { return buffers_; }
  const std::vector<std::pair<std::string, Tensor>>& buffers() const { return buffers_; }

  void zero_grads();
  void set_parameters_trainable(bool trainable);

 private:
  Classifier() = default;
  void check_input(const Tensor& x) const;

  ArchConfig config_;
  Mode mode_ = Mode::Training;
  std::vector<std::unique_ptr<layers::Layer>> body_;
  std::unique_ptr<layers::Layer> head_;
  std::vector<std::pair<std::string, Tensor>> params_;
  std::vector<std::pair<std::string, Tensor>> buffers_;
};

/// Temporarily detaches parameters from the autodiff graph; attack loops use
/// this so input gradients do not drag parameter gradients along.
class ParameterFreeze {
 public:
  explicit ParameterFreeze(Classifier& model) : model_(model) {
    model_.set_parameters_trainable(false);
  }
  ~ParameterFreeze() { model_.set_parameters_trainable(true); }
  ParameterFreeze(const ParameterFreeze&) = delete;
  ParameterFreeze& operator=(const ParameterFreeze&) = delete;

 private:
  Classifier& model_;
};

/// Forces evaluation mode for the lifetime of the guard, restoring after.
class EvaluationScope {
 public:
  explicit EvaluationScope(Classifier& model) : model_(model), saved_(model.mode()) {
    model_.set_mode(Mode::Evaluation);
  }
  ~EvaluationScope() { model_.set_mode(saved_); }
  EvaluationScope(const EvaluationScope&) = delete;
  EvaluationScope& operator=(const EvaluationScope&) = delete;

 private:
  Classifier& model_;
  Mode saved_;
};

/// Predicted labels from logits; ties break toward the lowest class index.
std::vector<int> argmax_labels(const Tensor& logits);

}  // namespace lmrc
