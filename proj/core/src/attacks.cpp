#include "lmrc/attacks.hpp"

#include <algorithm>
#include <cmath>

#include "lmrc/rng.hpp"

namespace lmrc {

void AttackSpec::validate() const {
  if (epsilon < 0.0f) throw ConfigError("attack epsilon must be >= 0");
  if (alpha <= 0.0f) throw ConfigError("attack alpha must be > 0");
  // steps == 0 is the degenerate no-op attack (the projected input comes back)
  if (steps < 0) throw ConfigError("attack steps must be >= 0");
  if (!(clamp_lo < clamp_hi)) throw ConfigError("attack clamp range must satisfy lo < hi");
  if (margin < 0.0f) throw ConfigError("attack margin must be >= 0");
}

namespace {

constexpr float kInf = std::numeric_limits<float>::infinity();

/// A float u near c + r with float(u - c) <= r. Plain c + r rounds in units
/// of ulp(c), which can overshoot a small radius by many of its own ulps;
/// the correction is at most a couple of nextafter steps.
float ball_upper(float c, float r) {
  float u = c + r;
  while (u - c > r) u = std::nextafterf(u, -kInf);
  return u;
}

float ball_lower(float c, float r) {
  float l = c - r;
  while (l - c < -r) l = std::nextafterf(l, kInf);
  return l;
}

}  // namespace

Tensor project(const Tensor& x, const Ball& ball, float clamp_lo, float clamp_hi) {
  if (x.shape() != ball.center.shape())
    throw ShapeError("project: iterate " + shape_str(x.shape()) + " and ball center " +
                     shape_str(ball.center.shape()) + " differ");
  if (ball.radius < 0.0f) throw ConfigError("ball radius must be >= 0");
  std::vector<float> out(x.data());
  const std::vector<float>& c = ball.center.data();
  const float r = ball.radius;
  for (std::size_t i = 0; i < out.size(); ++i) {
    const float v = out[i];
    const float d = v - c[i];
    // members of the intersection are fixed points, bit-exactly
    if (d <= r && d >= -r && v >= clamp_lo && v <= clamp_hi) continue;
    float p = std::min(v, ball_upper(c[i], r));
    p = std::max(p, ball_lower(c[i], r));
    p = std::min(p, clamp_hi);
    out[i] = std::max(p, clamp_lo);
  }
  return Tensor(x.shape(), std::move(out));
}

namespace {

struct SampleLayout {
  int batch;
  std::size_t stride;  // elements per sample
};

SampleLayout sample_layout(const Tensor& x) {
  const int batch = x.dim(0);
  return {batch, static_cast<std::size_t>(x.size() / batch)};
}

/// Shared sign-step driver for PGD (ascend=+1) and CCA (ascend=-1).
Tensor iterate_attack(Classifier& model, const Tensor& start, const Ball& ball,
                      const AttackSpec& spec, float direction,
                      const std::function<Tensor(const Tensor&)>& loss_of,
                      const IterateObserver& observer) {
  EvaluationScope eval(model);
  ParameterFreeze freeze(model);
  const SampleLayout layout = sample_layout(start);
  std::vector<float> current = project(start, ball, spec.clamp_lo, spec.clamp_hi).data();
  std::vector<char> frozen(layout.batch, 0);

  for (int step = 0; step < spec.steps; ++step) {
    Tensor iterate(start.shape(), current, true);
    Tensor loss = loss_of(iterate);
    backward(loss);
    const std::vector<float>& g = iterate.grad();

    std::vector<float> proposed = current;
    for (int b = 0; b < layout.batch; ++b) {
      if (frozen[b]) continue;
      const std::size_t base = static_cast<std::size_t>(b) * layout.stride;
      bool finite = true;
      for (std::size_t i = 0; i < layout.stride && finite; ++i)
        finite = std::isfinite(g[base + i]);
      if (!finite) {
        frozen[b] = 1;
        warnings::bump(warnings::Counter::NonFiniteGradient);
        continue;
      }
      for (std::size_t i = 0; i < layout.stride; ++i) {
        const float gv = g[base + i];
        const float sgn = gv > 0.0f ? 1.0f : (gv < 0.0f ? -1.0f : 0.0f);
        proposed[base + i] = current[base + i] + direction * spec.alpha * sgn;
      }
    }
    current =
        project(Tensor(start.shape(), std::move(proposed)), ball, spec.clamp_lo, spec.clamp_hi)
            .data();
    if (observer) observer(step, Tensor(start.shape(), current));
  }
  return Tensor(start.shape(), std::move(current));
}

}  // namespace

Tensor pgd(Classifier& model, const Tensor& x, const std::vector<int>& labels,
           const AttackSpec& spec, const AttackLoss& loss, std::uint64_t seed,
           const IterateObserver& observer) {
  spec.validate();
  if (x.dim(0) != static_cast<int>(labels.size()))
    throw ShapeError("pgd: batch size does not match label count");
  if (spec.epsilon == 0.0f) return project(x, Ball{x.detached(), 0.0f}, spec.clamp_lo, spec.clamp_hi);

  Ball ball{x.detached(), spec.epsilon};
  Tensor start = x.detached();
  if (spec.random_start) {
    const SampleLayout layout = sample_layout(x);
    std::vector<float>& s = start.raw_data();
    for (int b = 0; b < layout.batch; ++b) {
      Rng rng(Rng::derive(seed, static_cast<std::uint64_t>(b)));
      const std::size_t base = static_cast<std::size_t>(b) * layout.stride;
      for (std::size_t i = 0; i < layout.stride; ++i)
        s[base + i] += rng.uniform(-spec.epsilon, spec.epsilon);
    }
  }
  return iterate_attack(model, start, ball, spec, +1.0f,
                        [&](const Tensor& it) { return loss(model.forward(it), labels); },
                        observer);
}

Tensor compression_loss(Classifier& model, const Tensor& x) {
  return sum(abs(model.penultimate(x)));
}

std::vector<float> compression_per_sample(Classifier& model, const Tensor& x) {
  EvaluationScope eval(model);
  ParameterFreeze freeze(model);
  Tensor z = model.penultimate(x.detached());
  const int batch = z.dim(0), d = z.dim(1);
  std::vector<float> out(batch, 0.0f);
  for (int b = 0; b < batch; ++b) {
    const float* row = z.data().data() + static_cast<std::size_t>(b) * d;
    for (int i = 0; i < d; ++i) out[b] += std::fabs(row[i]);
  }
  return out;
}

Tensor cca(Classifier& model, const Tensor& x_obs, const AttackSpec& spec, CcaCenter center,
           const Tensor* x_clean, const IterateObserver& observer) {
  spec.validate();
  Ball ball;
  if (center == CcaCenter::Oracle) {
    if (x_clean == nullptr)
      throw ConfigError("cca with oracle centering requires the clean sample");
    ball = Ball{x_clean->detached(), spec.epsilon + spec.margin};
  } else {
    ball = Ball{x_obs.detached(), spec.epsilon};
  }
  if (ball.radius == 0.0f) return project(x_obs, ball, spec.clamp_lo, spec.clamp_hi);
  return iterate_attack(model, x_obs.detached(), ball, spec, -1.0f,
                        [&](const Tensor& it) { return compression_loss(model, it); }, observer);
}

}  // namespace lmrc
