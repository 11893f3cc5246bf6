#include <doctest.h>

#include <cmath>
#include <limits>

#include "lmrc/attacks.hpp"
#include "lmrc/rng.hpp"
#include "lmrc/training.hpp"

using namespace lmrc;

namespace {

Classifier tiny_model(std::uint64_t seed) {
  ArchConfig cfg = ArchConfig::small_cnn(1, 4, 3);
  cfg.width = 2;
  cfg.penultimate_dim = 6;
  return Classifier::build(cfg, seed);
}

Tensor random_image(Rng& rng, int batch) {
  std::vector<float> v(static_cast<std::size_t>(batch) * 16);
  for (auto& e : v) e = rng.uniform(0.0f, 1.0f);
  return Tensor({batch, 1, 4, 4}, std::move(v));
}

AttackLoss ce_loss(int classes) {
  return [classes](const Tensor& logits, const std::vector<int>& y) {
    return cross_entropy_with_logits(logits, smooth_targets(y, classes, 0.0f));
  };
}

}  // namespace

TEST_SUITE_BEGIN("attacks");

TEST_CASE("project scalar examples") {
  Ball b1{Tensor({1}, {0.5f}), 0.1f};
  CHECK(project(Tensor({1}, {0.7f}), b1, 0.0f, 1.0f).item() == doctest::Approx(0.6f));

  Ball b2{Tensor({1}, {0.05f}), 0.1f};
  CHECK(project(Tensor({1}, {-0.2f}), b2, 0.0f, 1.0f).item() == 0.0f);
}

TEST_CASE("project returns interior points unchanged, bit-exactly") {
  Rng rng(9);
  for (int rep = 0; rep < 200; ++rep) {
    const float c = rng.uniform(0.1f, 0.9f);
    const float eps = rng.uniform(0.01f, 0.1f);
    const float x = c + rng.uniform(-0.9f, 0.9f) * eps;
    if (std::fabs(x - c) > eps || x < 0.0f || x > 1.0f) continue;
    Ball ball{Tensor({1}, {c}), eps};
    CHECK(project(Tensor({1}, {x}), ball, 0.0f, 1.0f).item() == x);
  }
}

TEST_CASE("project is idempotent and lands inside the float ball") {
  Rng rng(10);
  for (int rep = 0; rep < 500; ++rep) {
    const float c = rng.uniform(0.0f, 1.0f);
    const float eps = rng.uniform(1e-4f, 0.5f);
    const float x = rng.uniform(-1.0f, 2.0f);
    Ball ball{Tensor({1}, {c}), eps};
    Tensor once = project(Tensor({1}, {x}), ball, 0.0f, 1.0f);
    Tensor twice = project(once, ball, 0.0f, 1.0f);
    CHECK(once.item() == twice.item());
    CHECK(std::fabs(once.item() - c) <= eps);
    CHECK(once.item() >= 0.0f);
    CHECK(once.item() <= 1.0f);
  }
}

TEST_CASE("project rejects shape mismatches") {
  Ball ball{Tensor({2}, {0.0f, 0.0f}), 0.1f};
  CHECK_THROWS_AS(project(Tensor({3}, {0, 0, 0}), ball, 0, 1), ShapeError);
}

TEST_CASE("attack spec validation") {
  AttackSpec s;
  s.epsilon = -0.1f;
  CHECK_THROWS_AS(s.validate(), ConfigError);
  s = AttackSpec{};
  s.alpha = 0.0f;
  CHECK_THROWS_AS(s.validate(), ConfigError);
  s = AttackSpec{};
  s.clamp_lo = 1.0f;
  s.clamp_hi = 0.0f;
  CHECK_THROWS_AS(s.validate(), ConfigError);
  s = AttackSpec{};
  s.margin = -1.0f;
  CHECK_THROWS_AS(s.validate(), ConfigError);
}

TEST_CASE("pgd with a degenerate ball returns the input") {
  Classifier m = tiny_model(3);
  Rng rng(11);
  Tensor x = random_image(rng, 2);
  AttackSpec spec;
  spec.epsilon = 0.0f;
  spec.steps = 3;
  Tensor out = pgd(m, x, {0, 1}, spec, ce_loss(3), 1);
  CHECK(out.data() == x.data());
}

TEST_CASE("one ascent step on a logistic loss moves against the gradient") {
  // logits [2x, 0], true class 0: dCE/dx = -(1 - p0) * 2 < 0, so the ascent
  // update is x - alpha; with x = 0.5, alpha = 0.1, epsilon = 0.2 -> 0.4
  Tensor w({2, 1}, {2.0f, 0.0f});
  Tensor xs({1, 1}, {0.5f}, true);
  Tensor l = dense(xs, w, {});
  backward(cross_entropy_with_logits(l, Tensor({1, 2}, {1.0f, 0.0f})));
  const float g = xs.grad()[0];
  CHECK(g < 0.0f);
  const float sgn = g > 0 ? 1.0f : -1.0f;
  const float stepped = 0.5f + 0.1f * sgn;
  Ball ball{Tensor({1}, {0.5f}), 0.2f};
  CHECK(project(Tensor({1}, {stepped}), ball, 0, 1).item() == doctest::Approx(0.4f));
}

TEST_CASE("pgd iterates stay in the ball and the range") {
  Classifier m = tiny_model(7);
  Rng rng(12);
  Tensor x = random_image(rng, 3);
  AttackSpec spec;
  spec.epsilon = 0.3f;
  spec.alpha = 0.075f;
  spec.steps = 20;
  spec.random_start = true;
  int iterates = 0;
  Tensor out = pgd(m, x, {0, 1, 2}, spec, ce_loss(3), 99,
                   [&](int, const Tensor& it) {
                     ++iterates;
                     for (std::size_t i = 0; i < it.data().size(); ++i) {
                       const float diff = std::fabs(it.data()[i] - x.data()[i]);
                       CHECK(diff <= std::nextafter(spec.epsilon,
                                                    std::numeric_limits<float>::infinity()));
                       CHECK(it.data()[i] >= 0.0f);
                       CHECK(it.data()[i] <= 1.0f);
                     }
                   });
  CHECK(iterates == 20);
}

TEST_CASE("pgd is deterministic for a fixed seed") {
  Classifier m = tiny_model(15);
  Rng rng(13);
  Tensor x = random_image(rng, 2);
  AttackSpec spec;
  spec.epsilon = 0.2f;
  spec.alpha = 0.05f;
  spec.steps = 5;
  spec.random_start = true;
  Tensor a = pgd(m, x, {0, 1}, spec, ce_loss(3), 42);
  Tensor b = pgd(m, x, {0, 1}, spec, ce_loss(3), 42);
  CHECK(a.data() == b.data());
  Tensor c = pgd(m, x, {0, 1}, spec, ce_loss(3), 43);
  CHECK(a.data() != c.data());
}

TEST_CASE("non-finite gradients freeze the sample and bump the counter") {
  Classifier m = tiny_model(19);
  Rng rng(14);
  Tensor x = random_image(rng, 2);
  AttackSpec spec;
  spec.epsilon = 0.2f;
  spec.alpha = 0.05f;
  spec.steps = 3;
  spec.random_start = false;
  warnings::reset();
  AttackLoss exploding = [](const Tensor& logits, const std::vector<int>&) {
    return mul_scalar(sum(logits), std::numeric_limits<float>::infinity());
  };
  Tensor out = pgd(m, x, {0, 1}, spec, exploding, 1);
  CHECK(out.data() == x.data());  // froze at the last valid iterate (the start)
  CHECK(warnings::count(warnings::Counter::NonFiniteGradient) == 2);
}

TEST_CASE("compression loss equals the L1 norm of the penultimate") {
  CHECK(sum(abs(Tensor({3}, {-2, 5, 0}))).item() == doctest::Approx(7.0f));

  Classifier m = tiny_model(23);
  m.set_mode(Mode::Evaluation);
  Rng rng(15);
  Tensor x = random_image(rng, 2);
  const std::vector<float> per_sample = compression_per_sample(m, x);
  Tensor z = m.penultimate(x);
  const int d = m.penultimate_dim();
  for (int b = 0; b < 2; ++b) {
    float l1 = 0;
    for (int i = 0; i < d; ++i) l1 += std::fabs(z.data()[static_cast<std::size_t>(b) * d + i]);
    CHECK(per_sample[b] == doctest::Approx(l1).epsilon(1e-6));
  }
  ParameterFreeze freeze(m);
  CHECK(compression_loss(m, x).item() ==
        doctest::Approx(per_sample[0] + per_sample[1]).epsilon(1e-5));
}

TEST_CASE("compression loss is zero for a zeroed model") {
  Classifier m = tiny_model(27);
  m.set_mode(Mode::Evaluation);
  for (auto& [name, p] : m.parameters())
    for (float& v : p.raw_data()) v = 0.0f;
  Rng rng(16);
  ParameterFreeze freeze(m);
  CHECK(compression_loss(m, random_image(rng, 2)).item() == 0.0f);
}

TEST_CASE("one cca step descends the L1 subgradient") {
  // d|z|_1/dx = sgn(x) for an identity penultimate; x - alpha*sgn(x) then
  // projection with epsilon = 0.2 gives [0.2, -0.1] from [0.3, -0.2]
  Tensor x({2}, {0.3f, -0.2f}, true);
  backward(sum(abs(x)));
  std::vector<float> stepped(2);
  for (int i = 0; i < 2; ++i) {
    const float g = x.grad()[i];
    const float sgn = g > 0 ? 1.0f : (g < 0 ? -1.0f : 0.0f);
    stepped[i] = x.data()[i] - 0.1f * sgn;
  }
  Ball ball{x.detached(), 0.2f};
  Tensor out = project(Tensor({2}, stepped), ball, -1.0f, 1.0f);
  CHECK(out.data()[0] == doctest::Approx(0.2f));
  CHECK(out.data()[1] == doctest::Approx(-0.1f));
}

TEST_CASE("cca with a degenerate ball returns the observed sample") {
  Classifier m = tiny_model(31);
  Rng rng(17);
  Tensor x = random_image(rng, 1);
  AttackSpec spec;
  spec.epsilon = 0.0f;
  Tensor out = cca(m, x, spec, CcaCenter::Observed);
  CHECK(out.data() == x.data());
}

TEST_CASE("oversized cca steps pin moving coordinates to a ball face") {
  Classifier m = tiny_model(35);
  Rng rng(18);
  std::vector<float> v(16);
  for (auto& e : v) e = rng.uniform(0.3f, 0.7f);
  Tensor x({1, 1, 4, 4}, v);
  AttackSpec spec;
  spec.epsilon = 0.1f;
  spec.alpha = 0.25f;  // > 2 * epsilon
  spec.steps = 4;
  Tensor out = cca(m, x, spec, CcaCenter::Observed);
  for (std::size_t i = 0; i < v.size(); ++i) {
    const float diff = std::fabs(out.data()[i] - v[i]);
    const bool unmoved = diff == 0.0f;
    const bool on_face = diff >= spec.epsilon - 2e-7f && diff <= spec.epsilon + 2e-7f;
    CHECK((unmoved || on_face));
  }
}

TEST_CASE("cca oracle centering uses the clean ball with margin") {
  Classifier m = tiny_model(39);
  Rng rng(19);
  Tensor clean = random_image(rng, 1);
  AttackSpec spec;
  spec.epsilon = 0.1f;
  spec.alpha = 0.05f;
  spec.steps = 6;
  spec.margin = 0.05f;
  // an observation on the ball surface around clean
  Tensor obs = project(random_image(rng, 1), Ball{clean.detached(), spec.epsilon}, 0, 1);
  Tensor out = cca(m, obs, spec, CcaCenter::Oracle, &clean);
  const float limit = spec.epsilon + spec.margin;
  for (std::size_t i = 0; i < out.data().size(); ++i)
    CHECK(std::fabs(out.data()[i] - clean.data()[i]) <=
          std::nextafter(limit, std::numeric_limits<float>::infinity()));
  CHECK_THROWS_AS(cca(m, obs, spec, CcaCenter::Oracle, nullptr), ConfigError);
}

TEST_CASE("cca reduces the compression loss on a trained-ish model") {
  Classifier m = tiny_model(43);
  Rng rng(20);
  Tensor x = random_image(rng, 4);
  AttackSpec spec;
  spec.epsilon = 0.3f;
  spec.alpha = 0.075f;
  spec.steps = 10;
  Tensor x_hat = cca(m, x, spec, CcaCenter::Observed);
  const auto before = compression_per_sample(m, x);
  const auto after = compression_per_sample(m, x_hat);
  for (int b = 0; b < 4; ++b) CHECK(after[b] <= before[b] + 1e-4f);
}

TEST_SUITE_END();
