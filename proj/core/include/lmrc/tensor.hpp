#pragma once

#include <cstdint>
#include <functional>
#include <memory>
#include <string>
#include <vector>

#include "lmrc/common.hpp"

namespace lmrc {

namespace detail {
struct Node;
}

/// Dense float32 n-d array, optionally participating in a reverse-mode
/// autodiff graph. Copying a Tensor copies the handle, not the storage.
/// Values are immutable once the tensor has been consumed by an operation;
/// raw_data() exists for leaf updates (optimizer steps, attack iterates)
/// between graph builds and requires exclusive access.
class Tensor {
 public:
  Tensor() = default;
  Tensor(Shape shape, std::vector<float> data, bool requires_grad = false);

  static Tensor zeros(Shape shape, bool requires_grad = false);
  static Tensor full(Shape shape, float value, bool requires_grad = false);
  static Tensor scalar(float value);

  bool defined() const { return node_ != nullptr; }
  const Shape& shape() const;
  int rank() const;
  int dim(int i) const;
  std::int64_t size() const;

  const std::vector<float>& data() const;
  std::vector<float>& raw_data();
  float item() const;

  bool requires_grad() const;
  void set_requires_grad(bool value);
  bool has_grad() const;
  const std::vector<float>& grad() const;
  void zero_grad();

  /// Value copy detached from any graph.
  Tensor detached(bool requires_grad = false) const;

  detail::Node* node() const { return node_.get(); }

 private:
  explicit Tensor(std::shared_ptr<detail::Node> node) : node_(std::move(node)) {}
  std::shared_ptr<detail::Node> node_;

  friend Tensor make_op_output(const char* op, Shape shape, std::vector<float> value,
                               std::vector<Tensor> inputs,
                               std::function<void(detail::Node&)> backprop);
  friend void backward(const Tensor& loss);
  friend struct Tape;
};

/// Ordered view of the graph below a root: every node's inputs precede it.
/// backward() walks this order in reverse, visiting each node exactly once.
struct Tape {
  struct Entry {
    std::uint64_t id;
    const char* op;
    std::vector<std::uint64_t> inputs;
  };
  std::vector<Entry> nodes;

  static Tape build(const Tensor& root);
};

/// Populates grad on every requires_grad leaf reachable from `loss`.
/// Repeated calls accumulate. Rejects non-scalar losses.
void backward(const Tensor& loss);

// -- primitive operations ----------------------------------------------------

Tensor matmul(const Tensor& a, const Tensor& b);

/// Cross-correlation with zero padding (no kernel flip).
/// input [B,C,H,W], kernel [O,C,kH,kW], optional bias [O] (pass {} for none).
Tensor conv2d(const Tensor& input, const Tensor& kernel, const Tensor& bias, int stride,
              int padding);

/// x [B,in] * weight[out,in]^T + bias[out] (bias optional).
Tensor dense(const Tensor& x, const Tensor& weight, const Tensor& bias);

Tensor relu(const Tensor& x);
Tensor avgpool2d(const Tensor& x, int window);
Tensor flatten(const Tensor& x);
Tensor add(const Tensor& a, const Tensor& b);
Tensor sub(const Tensor& a, const Tensor& b);
Tensor mul(const Tensor& a, const Tensor& b);
Tensor mul_scalar(const Tensor& x, float s);
Tensor abs(const Tensor& x);
Tensor sum(const Tensor& x);
/// sign(0) = 0. Output is detached (derivative treated as zero everywhere).
Tensor sign(const Tensor& x);
/// Row-wise softmax over the last dimension of [B,c] (or a bare [c] vector).
Tensor softmax(const Tensor& x);
/// Elementwise log; non-positive inputs are clamped to 1e-12 and counted
/// under warnings::Counter::LogClamp.
Tensor log(const Tensor& x);

/// Mean over the batch of -sum(targets * log_softmax(logits)), stabilized
/// with log-sum-exp. logits/targets [B,c] (or bare [c]).
Tensor cross_entropy_with_logits(const Tensor& logits, const Tensor& targets);

/// Batch normalization over [B,C,H,W] per channel. In training mode batch
/// statistics are used and running_mean/running_var (length C, biased
/// variance) are updated in place with `momentum`; in evaluation mode the
/// running statistics are used and the op is a pure function.
Tensor batchnorm2d(const Tensor& x, const Tensor& gamma, const Tensor& beta,
                   Tensor& running_mean, Tensor& running_var, bool training,
                   float momentum = 0.1f, float eps = 1e-5f);

// -- raw kernels (shared by ops; accumulation ascends k for every output) ----

/// C[M,N] += A[M,K] * B[K,N].
void gemm_accumulate(int m_dim, int k_dim, int n_dim, const float* a, const float* b, float* c);
void transpose(int rows, int cols, const float* src, float* dst);

}  // namespace lmrc
