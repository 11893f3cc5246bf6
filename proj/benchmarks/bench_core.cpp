#include <benchmark/benchmark.h>

#include "lmrc/attacks.hpp"
#include "lmrc/masking.hpp"
#include "lmrc/model.hpp"
#include "lmrc/rng.hpp"
#include "lmrc/tensor.hpp"
#include "lmrc/training.hpp"

using namespace lmrc;

namespace {

Tensor random_tensor(Rng& rng, Shape shape, float lo = -1.0f, float hi = 1.0f,
                     bool requires_grad = false) {
  std::vector<float> v(static_cast<std::size_t>(numel(shape)));
  for (auto& e : v) e = rng.uniform(lo, hi);
  return Tensor(std::move(shape), std::move(v), requires_grad);
}

void BM_Gemm(benchmark::State& state) {
  const int n = static_cast<int>(state.range(0));
  Rng rng(1);
  Tensor a = random_tensor(rng, {n, n});
  Tensor b = random_tensor(rng, {n, n});
  for (auto _ : state) {
    Tensor c = matmul(a, b);
    benchmark::DoNotOptimize(c.data().data());
  }
  state.SetItemsProcessed(state.iterations() * 2LL * n * n * n);
}
BENCHMARK(BM_Gemm)->Arg(64)->Arg(128)->Arg(256);

void BM_Conv2dForward(benchmark::State& state) {
  const int batch = static_cast<int>(state.range(0));
  Rng rng(2);
  Tensor x = random_tensor(rng, {batch, 8, 28, 28});
  Tensor k = random_tensor(rng, {16, 8, 3, 3});
  Tensor bias = random_tensor(rng, {16});
  for (auto _ : state) {
    Tensor y = conv2d(x, k, bias, 1, 1);
    benchmark::DoNotOptimize(y.data().data());
  }
}
BENCHMARK(BM_Conv2dForward)->Arg(1)->Arg(32);

void BM_ForwardBackward(benchmark::State& state) {
  Classifier model = Classifier::build(ArchConfig::small_cnn(1, 28, 10), 1);
  Rng rng(3);
  Tensor x = random_tensor(rng, {32, 1, 28, 28}, 0.0f, 1.0f, true);
  std::vector<int> labels(32);
  for (auto& l : labels) l = rng.uniform_int(10);
  for (auto _ : state) {
    model.zero_grads();
    Tensor loss = cross_entropy_with_logits(model.forward(x), smooth_targets(labels, 10, 0.1f));
    backward(loss);
    benchmark::DoNotOptimize(loss.item());
  }
}
BENCHMARK(BM_ForwardBackward);

void BM_Pgd10(benchmark::State& state) {
  Classifier model = Classifier::build(ArchConfig::small_cnn(1, 28, 10), 1);
  Rng rng(4);
  Tensor x = random_tensor(rng, {32, 1, 28, 28}, 0.0f, 1.0f);
  std::vector<int> labels(32);
  for (auto& l : labels) l = rng.uniform_int(10);
  AttackSpec spec;
  spec.epsilon = 0.3f;
  spec.alpha = 0.075f;
  spec.steps = 10;
  spec.random_start = true;
  const AttackLoss loss = [](const Tensor& logits, const std::vector<int>& y) {
    return cross_entropy_with_logits(logits, smooth_targets(y, 10, 0.0f));
  };
  std::uint64_t seed = 0;
  for (auto _ : state) {
    Tensor adv = pgd(model, x, labels, spec, loss, seed++);
    benchmark::DoNotOptimize(adv.data().data());
  }
}
BENCHMARK(BM_Pgd10);

void BM_Cca10(benchmark::State& state) {
  Classifier model = Classifier::build(ArchConfig::small_cnn(1, 28, 10), 1);
  Rng rng(5);
  Tensor x = random_tensor(rng, {32, 1, 28, 28}, 0.0f, 1.0f);
  AttackSpec spec;
  spec.epsilon = 0.3f;
  spec.alpha = 0.075f;
  spec.steps = 10;
  for (auto _ : state) {
    Tensor hat = cca(model, x, spec, CcaCenter::Observed);
    benchmark::DoNotOptimize(hat.data().data());
  }
}
BENCHMARK(BM_Cca10);

void BM_TopKMask(benchmark::State& state) {
  const int d = static_cast<int>(state.range(0));
  Rng rng(6);
  std::vector<float> u(d);
  for (auto& v : u) v = rng.uniform(-1.0f, 1.0f);
  const int k = d / 10;
  for (auto _ : state) {
    LatentMask m = top_k_mask(u, k);
    benchmark::DoNotOptimize(m.bits.data());
  }
}
BENCHMARK(BM_TopKMask)->Arg(128)->Arg(512);

}  // namespace

BENCHMARK_MAIN();
