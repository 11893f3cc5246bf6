#include "lmrc/selfcheck.hpp"

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <cstring>
#include <filesystem>
#include <fstream>
#include <functional>
#include <numeric>

#include "lmrc/attacks.hpp"
#include "lmrc/checkpoint.hpp"
#include "lmrc/masking.hpp"
#include "lmrc/model.hpp"
#include "lmrc/rng.hpp"
#include "lmrc/tensor.hpp"

namespace lmrc::selfcheck {

namespace {

std::string g_injected_fault;

// ---- double-precision reference evaluators (independent of the ops) -------

using DVec = std::vector<double>;

DVec ref_matmul(const DVec& a, const DVec& b, int m, int k, int n) {
  DVec c(static_cast<std::size_t>(m) * n, 0.0);
  for (int i = 0; i < m; ++i)
    for (int j = 0; j < n; ++j) {
      double acc = 0.0;
      for (int p = 0; p < k; ++p) acc += a[i * k + p] * b[p * n + j];
      c[i * n + j] = acc;
    }
  return c;
}

struct RefConv {
  int batch, in_ch, in_h, in_w, out_ch, k_h, k_w, stride, pad, out_h, out_w;
};

DVec ref_conv2d(const DVec& x, const DVec& k, const DVec& bias, const RefConv& d) {
  DVec y(static_cast<std::size_t>(d.batch) * d.out_ch * d.out_h * d.out_w, 0.0);
  for (int b = 0; b < d.batch; ++b)
    for (int o = 0; o < d.out_ch; ++o)
      for (int oy = 0; oy < d.out_h; ++oy)
        for (int ox = 0; ox < d.out_w; ++ox) {
          double acc = bias.empty() ? 0.0 : bias[o];
          for (int c = 0; c < d.in_ch; ++c)
            for (int kh = 0; kh < d.k_h; ++kh)
              for (int kw = 0; kw < d.k_w; ++kw) {
                const int iy = oy * d.stride - d.pad + kh;
                const int ix = ox * d.stride - d.pad + kw;
                if (iy < 0 || iy >= d.in_h || ix < 0 || ix >= d.in_w) continue;
                acc += x[((static_cast<std::size_t>(b) * d.in_ch + c) * d.in_h + iy) * d.in_w + ix] *
                       k[((static_cast<std::size_t>(o) * d.in_ch + c) * d.k_h + kh) * d.k_w + kw];
              }
          y[((static_cast<std::size_t>(b) * d.out_ch + o) * d.out_h + oy) * d.out_w + ox] = acc;
        }
  return y;
}

DVec ref_softmax_rows(const DVec& x, int rows, int cols) {
  DVec y(x.size());
  for (int r = 0; r < rows; ++r) {
    double mx = x[r * cols];
    for (int c = 1; c < cols; ++c) mx = std::max(mx, x[r * cols + c]);
    double denom = 0.0;
    for (int c = 0; c < cols; ++c) {
      y[r * cols + c] = std::exp(x[r * cols + c] - mx);
      denom += y[r * cols + c];
    }
    for (int c = 0; c < cols; ++c) y[r * cols + c] /= denom;
  }
  return y;
}

double ref_cross_entropy(const DVec& logits, const DVec& targets, int rows, int cols) {
  double total = 0.0;
  for (int r = 0; r < rows; ++r) {
    double mx = logits[r * cols];
    for (int c = 1; c < cols; ++c) mx = std::max(mx, logits[r * cols + c]);
    double denom = 0.0;
    for (int c = 0; c < cols; ++c) denom += std::exp(logits[r * cols + c] - mx);
    const double lse = mx + std::log(denom);
    double dot = 0.0, mass = 0.0;
    for (int c = 0; c < cols; ++c) {
      dot += targets[r * cols + c] * logits[r * cols + c];
      mass += targets[r * cols + c];
    }
    total += lse * mass - dot;
  }
  return total / rows;
}

struct RefBn {
  int batch, ch, h, w;
  bool training;
  DVec running_mean, running_var;
  double eps = 1e-5;
};

DVec ref_batchnorm(const DVec& x, const DVec& gamma, const DVec& beta, const RefBn& d) {
  const int plane = d.h * d.w;
  const int per_ch = d.batch * plane;
  DVec y(x.size());
  for (int c = 0; c < d.ch; ++c) {
    double mean, var;
    if (d.training) {
      double acc = 0.0;
      for (int b = 0; b < d.batch; ++b)
        for (int i = 0; i < plane; ++i) acc += x[(static_cast<std::size_t>(b) * d.ch + c) * plane + i];
      mean = acc / per_ch;
      double vacc = 0.0;
      for (int b = 0; b < d.batch; ++b)
        for (int i = 0; i < plane; ++i) {
          const double dv = x[(static_cast<std::size_t>(b) * d.ch + c) * plane + i] - mean;
          vacc += dv * dv;
        }
      var = vacc / per_ch;
    } else {
      mean = d.running_mean[c];
      var = d.running_var[c];
    }
    const double inv = 1.0 / std::sqrt(var + d.eps);
    for (int b = 0; b < d.batch; ++b)
      for (int i = 0; i < plane; ++i) {
        const std::size_t at = (static_cast<std::size_t>(b) * d.ch + c) * plane + i;
        y[at] = gamma[c] * ((x[at] - mean) * inv) + beta[c];
      }
  }
  return y;
}

// ---- gradient-check harness ------------------------------------------------

struct GradCase {
  std::vector<Tensor> inputs;  // requires_grad leaves
  Tensor loss;
  // double loss as a pure function of the flattened inputs
  std::function<double(const std::vector<DVec>&)> ref;
};

std::vector<float> random_values(Rng& rng, std::size_t n, float lo, float hi) {
  std::vector<float> v(n);
  for (auto& x : v) x = rng.uniform(lo, hi);
  return v;
}

/// Values kept at least `margin` away from zero (subgradient kinks).
std::vector<float> random_values_off_kink(Rng& rng, std::size_t n, float margin = 1e-2f) {
  std::vector<float> v(n);
  for (auto& x : v) {
    float r = rng.uniform(-1.0f, 1.0f);
    x = r >= 0.0f ? r + margin : r - margin;
  }
  return v;
}

Tensor weights_like(Rng& rng, const Tensor& t) {
  return Tensor(t.shape(), random_values(rng, t.data().size(), -1.0f, 1.0f));
}

double weighted_sum(const DVec& values, const std::vector<float>& weights) {
  double acc = 0.0;
  for (std::size_t i = 0; i < values.size(); ++i) acc += values[i] * weights[i];
  return acc;
}

bool check_case(const GradCase& gc, const std::string& op, std::string& why) {
  backward(gc.loss);
  std::vector<DVec> base;
  for (const Tensor& t : gc.inputs)
    base.emplace_back(t.data().begin(), t.data().end());
  const double h = 1e-3;
  for (std::size_t i = 0; i < gc.inputs.size(); ++i) {
    const std::vector<float>& analytic = gc.inputs[i].grad();
    for (std::size_t j = 0; j < base[i].size(); ++j) {
      std::vector<DVec> plus = base, minus = base;
      plus[i][j] += h;
      minus[i][j] -= h;
      const double fd = (gc.ref(plus) - gc.ref(minus)) / (2.0 * h);
      double an = analytic[j];
      if (op == g_injected_fault) an += 0.05;  // deliberate corruption hook
      const double err = std::fabs(an - fd);
      const double scale = std::max({1e-2, std::fabs(an), std::fabs(fd)});
      if (err > 1e-3 * scale) {
        char buf[160];
        std::snprintf(buf, sizeof(buf),
                      "input %zu element %zu: analytic %.6g vs finite-difference %.6g", i, j, an,
                      fd);
        why = buf;
        return false;
      }
    }
  }
  return true;
}

using CaseBuilder = std::function<GradCase(Rng&)>;

GradCase case_matmul(Rng& rng) {
  const int m = 1 + rng.uniform_int(4), k = 1 + rng.uniform_int(4), n = 1 + rng.uniform_int(4);
  Tensor a({m, k}, random_values(rng, static_cast<std::size_t>(m) * k, -1.5f, 1.5f), true);
  Tensor b({k, n}, random_values(rng, static_cast<std::size_t>(k) * n, -1.5f, 1.5f), true);
  Tensor w = weights_like(rng, Tensor::zeros({m, n}));
  GradCase gc;
  gc.inputs = {a, b};
  gc.loss = sum(mul(matmul(a, b), w));
  gc.ref = [m, k, n, weights = w.data()](const std::vector<DVec>& in) {
    return weighted_sum(ref_matmul(in[0], in[1], m, k, n), weights);
  };
  return gc;
}

GradCase case_conv2d(Rng& rng) {
  RefConv d;
  d.batch = 1 + rng.uniform_int(2);
  d.in_ch = 1 + rng.uniform_int(2);
  d.out_ch = 1 + rng.uniform_int(2);
  d.k_h = 1 + rng.uniform_int(3);
  d.k_w = 1 + rng.uniform_int(3);
  d.stride = 1 + rng.uniform_int(2);
  d.pad = rng.uniform_int(2);
  d.out_h = 1 + rng.uniform_int(3);
  d.out_w = 1 + rng.uniform_int(3);
  d.in_h = (d.out_h - 1) * d.stride + d.k_h - 2 * d.pad;
  d.in_w = (d.out_w - 1) * d.stride + d.k_w - 2 * d.pad;
  if (d.in_h < 1 || d.in_w < 1) {
    d.pad = 0;
    d.in_h = (d.out_h - 1) * d.stride + d.k_h;
    d.in_w = (d.out_w - 1) * d.stride + d.k_w;
  }
  Tensor x({d.batch, d.in_ch, d.in_h, d.in_w},
           random_values(rng, static_cast<std::size_t>(d.batch) * d.in_ch * d.in_h * d.in_w, -1, 1),
           true);
  Tensor k({d.out_ch, d.in_ch, d.k_h, d.k_w},
           random_values(rng, static_cast<std::size_t>(d.out_ch) * d.in_ch * d.k_h * d.k_w, -1, 1),
           true);
  Tensor bias({d.out_ch}, random_values(rng, d.out_ch, -0.5f, 0.5f), true);
  Tensor w = weights_like(rng, Tensor::zeros({d.batch, d.out_ch, d.out_h, d.out_w}));
  GradCase gc;
  gc.inputs = {x, k, bias};
  gc.loss = sum(mul(conv2d(x, k, bias, d.stride, d.pad), w));
  gc.ref = [d, weights = w.data()](const std::vector<DVec>& in) {
    return weighted_sum(ref_conv2d(in[0], in[1], in[2], d), weights);
  };
  return gc;
}

GradCase case_dense(Rng& rng) {
  const int b = 1 + rng.uniform_int(3), in = 1 + rng.uniform_int(5), out = 1 + rng.uniform_int(4);
  Tensor x({b, in}, random_values(rng, static_cast<std::size_t>(b) * in, -1, 1), true);
  Tensor wgt({out, in}, random_values(rng, static_cast<std::size_t>(out) * in, -1, 1), true);
  Tensor bias({out}, random_values(rng, out, -0.5f, 0.5f), true);
  Tensor w = weights_like(rng, Tensor::zeros({b, out}));
  GradCase gc;
  gc.inputs = {x, wgt, bias};
  gc.loss = sum(mul(dense(x, wgt, bias), w));
  gc.ref = [b, in, out, weights = w.data()](const std::vector<DVec>& v) {
    DVec y(static_cast<std::size_t>(b) * out);
    for (int i = 0; i < b; ++i)
      for (int o = 0; o < out; ++o) {
        double acc = v[2][o];
        for (int j = 0; j < in; ++j) acc += v[0][i * in + j] * v[1][o * in + j];
        y[i * out + o] = acc;
      }
    return weighted_sum(y, weights);
  };
  return gc;
}

GradCase case_elementwise(Rng& rng, int which) {
  const int n = 2 + rng.uniform_int(10);
  Tensor x({n}, random_values_off_kink(rng, n), true);
  Tensor w = weights_like(rng, x);
  GradCase gc;
  gc.inputs = {x};
  switch (which) {
    case 0:
      gc.loss = sum(mul(relu(x), w));
      gc.ref = [weights = w.data()](const std::vector<DVec>& v) {
        DVec y(v[0]);
        for (double& e : y) e = e > 0 ? e : 0;
        return weighted_sum(y, weights);
      };
      break;
    case 1:
      gc.loss = sum(mul(abs(x), w));
      gc.ref = [weights = w.data()](const std::vector<DVec>& v) {
        DVec y(v[0]);
        for (double& e : y) e = std::fabs(e);
        return weighted_sum(y, weights);
      };
      break;
    case 2: {
      const float s = rng.uniform(-2.0f, 2.0f);
      gc.loss = sum(mul(mul_scalar(x, s), w));
      gc.ref = [s, weights = w.data()](const std::vector<DVec>& v) {
        DVec y(v[0]);
        for (double& e : y) e *= s;
        return weighted_sum(y, weights);
      };
      break;
    }
    default:
      gc.loss = sum(x);
      gc.ref = [](const std::vector<DVec>& v) {
        double acc = 0;
        for (double e : v[0]) acc += e;
        return acc;
      };
  }
  return gc;
}

GradCase case_binary(Rng& rng, int which) {
  const bool scalar_rhs = rng.uniform() < 0.25f;
  const int n = 2 + rng.uniform_int(8);
  Tensor a({n}, random_values(rng, n, -1, 1), true);
  Tensor b = scalar_rhs ? Tensor({1}, random_values(rng, 1, -1, 1), true)
                        : Tensor({n}, random_values(rng, n, -1, 1), true);
  Tensor w = weights_like(rng, a);
  GradCase gc;
  gc.inputs = {a, b};
  auto combine = [&](auto f, auto rf) {
    gc.loss = sum(mul(f(a, b), w));
    gc.ref = [rf, scalar_rhs, weights = w.data()](const std::vector<DVec>& v) {
      DVec y(v[0].size());
      for (std::size_t i = 0; i < y.size(); ++i)
        y[i] = rf(v[0][i], scalar_rhs ? v[1][0] : v[1][i]);
      return weighted_sum(y, weights);
    };
  };
  if (which == 0)
    combine([](const Tensor& p, const Tensor& q) { return add(p, q); },
            [](double p, double q) { return p + q; });
  else if (which == 1)
    combine([](const Tensor& p, const Tensor& q) { return sub(p, q); },
            [](double p, double q) { return p - q; });
  else
    combine([](const Tensor& p, const Tensor& q) { return mul(p, q); },
            [](double p, double q) { return p * q; });
  return gc;
}

GradCase case_avgpool(Rng& rng) {
  const int b = 1 + rng.uniform_int(2), c = 1 + rng.uniform_int(2);
  const int win = 1 + rng.uniform_int(3);
  const int oh = 1 + rng.uniform_int(3), ow = 1 + rng.uniform_int(3);
  const int h = oh * win, w = ow * win;
  Tensor x({b, c, h, w},
           random_values(rng, static_cast<std::size_t>(b) * c * h * w, -1, 1), true);
  Tensor wt = weights_like(rng, Tensor::zeros({b, c, oh, ow}));
  GradCase gc;
  gc.inputs = {x};
  gc.loss = sum(mul(avgpool2d(x, win), wt));
  gc.ref = [b, c, h, w, oh, ow, win, weights = wt.data()](const std::vector<DVec>& v) {
    DVec y(static_cast<std::size_t>(b) * c * oh * ow, 0.0);
    std::size_t idx = 0;
    for (int bi = 0; bi < b; ++bi)
      for (int ci = 0; ci < c; ++ci)
        for (int oy = 0; oy < oh; ++oy)
          for (int ox = 0; ox < ow; ++ox) {
            double acc = 0;
            for (int dy = 0; dy < win; ++dy)
              for (int dx = 0; dx < win; ++dx)
                acc += v[0][((static_cast<std::size_t>(bi) * c + ci) * h + oy * win + dy) * w +
                            ox * win + dx];
            y[idx++] = acc / (win * win);
          }
    return weighted_sum(y, weights);
  };
  return gc;
}

GradCase case_flatten(Rng& rng) {
  const int b = 1 + rng.uniform_int(2), c = 1 + rng.uniform_int(3), h = 1 + rng.uniform_int(3);
  Tensor x({b, c, h, 2}, random_values(rng, static_cast<std::size_t>(b) * c * h * 2, -1, 1), true);
  Tensor w = weights_like(rng, Tensor::zeros({b, c * h * 2}));
  GradCase gc;
  gc.inputs = {x};
  gc.loss = sum(mul(flatten(x), w));
  gc.ref = [weights = w.data()](const std::vector<DVec>& v) {
    return weighted_sum(v[0], weights);
  };
  return gc;
}

GradCase case_softmax(Rng& rng) {
  const int rows = 1 + rng.uniform_int(3), cols = 2 + rng.uniform_int(5);
  Tensor x({rows, cols}, random_values(rng, static_cast<std::size_t>(rows) * cols, -2, 2), true);
  Tensor w = weights_like(rng, x);
  GradCase gc;
  gc.inputs = {x};
  gc.loss = sum(mul(softmax(x), w));
  gc.ref = [rows, cols, weights = w.data()](const std::vector<DVec>& v) {
    return weighted_sum(ref_softmax_rows(v[0], rows, cols), weights);
  };
  return gc;
}

GradCase case_log(Rng& rng) {
  const int n = 2 + rng.uniform_int(8);
  Tensor x({n}, random_values(rng, n, 0.05f, 2.0f), true);
  Tensor w = weights_like(rng, x);
  GradCase gc;
  gc.inputs = {x};
  gc.loss = sum(mul(lmrc::log(x), w));
  gc.ref = [weights = w.data()](const std::vector<DVec>& v) {
    DVec y(v[0]);
    for (double& e : y) e = std::log(std::max(e, 1e-12));
    return weighted_sum(y, weights);
  };
  return gc;
}

GradCase case_cross_entropy(Rng& rng) {
  const int rows = 1 + rng.uniform_int(3), cols = 2 + rng.uniform_int(5);
  Tensor logits({rows, cols}, random_values(rng, static_cast<std::size_t>(rows) * cols, -2, 2),
                true);
  std::vector<float> t = random_values(rng, static_cast<std::size_t>(rows) * cols, 0.05f, 1.0f);
  for (int r = 0; r < rows; ++r) {
    float mass = 0.0f;
    for (int c = 0; c < cols; ++c) mass += t[r * cols + c];
    for (int c = 0; c < cols; ++c) t[r * cols + c] /= mass;
  }
  Tensor targets({rows, cols}, std::move(t), true);
  GradCase gc;
  gc.inputs = {logits, targets};
  gc.loss = cross_entropy_with_logits(logits, targets);
  gc.ref = [rows, cols](const std::vector<DVec>& v) {
    return ref_cross_entropy(v[0], v[1], rows, cols);
  };
  return gc;
}

GradCase case_batchnorm(Rng& rng, bool training) {
  RefBn d;
  d.batch = 2 + rng.uniform_int(2);
  d.ch = 1 + rng.uniform_int(3);
  d.h = 1 + rng.uniform_int(3);
  d.w = 1 + rng.uniform_int(3);
  d.training = training;
  const std::size_t n = static_cast<std::size_t>(d.batch) * d.ch * d.h * d.w;
  Tensor x({d.batch, d.ch, d.h, d.w}, random_values(rng, n, -1.5f, 1.5f), true);
  Tensor gamma({d.ch}, random_values(rng, d.ch, 0.5f, 1.5f), true);
  Tensor beta({d.ch}, random_values(rng, d.ch, -0.5f, 0.5f), true);
  Tensor rm({d.ch}, random_values(rng, d.ch, -0.5f, 0.5f));
  Tensor rv({d.ch}, random_values(rng, d.ch, 0.5f, 1.5f));
  d.running_mean.assign(rm.data().begin(), rm.data().end());
  d.running_var.assign(rv.data().begin(), rv.data().end());
  Tensor w = weights_like(rng, x);
  GradCase gc;
  gc.inputs = {x, gamma, beta};
  gc.loss = sum(mul(batchnorm2d(x, gamma, beta, rm, rv, training), w));
  gc.ref = [d, weights = w.data()](const std::vector<DVec>& v) {
    return weighted_sum(ref_batchnorm(v[0], v[1], v[2], d), weights);
  };
  return gc;
}

CheckResult run_op_check(const std::string& op, const CaseBuilder& builder, std::uint64_t seed,
                         int reps) {
  CheckResult result;
  result.name = "gradcheck/" + op;
  for (int rep = 0; rep < reps; ++rep) {
    Rng rng(Rng::derive(seed, std::hash<std::string>{}(op) + rep));
    GradCase gc = builder(rng);
    std::string why;
    if (!check_case(gc, op, why)) {
      result.passed = false;
      result.detail = "config " + std::to_string(rep) + ": " + why;
      return result;
    }
  }
  result.passed = true;
  result.detail = std::to_string(reps) + " configurations";
  return result;
}

// ---- geometry helpers -------------------------------------------------------

bool within_one_ulp(float value, float bound) {
  return value <= bound || value <= std::nextafter(bound, std::numeric_limits<float>::infinity());
}

Classifier tiny_model(std::uint64_t seed) {
  ArchConfig cfg = ArchConfig::small_cnn(1, 4, 3);
  cfg.width = 2;
  cfg.penultimate_dim = 6;
  return Classifier::build(cfg, seed);
}

}  // namespace

void inject_gradcheck_fault(const std::string& op_name) { g_injected_fault = op_name; }

std::vector<CheckResult> run_gradient_checks(std::uint64_t seed, int configs_per_op) {
  std::vector<CheckResult> results;
  results.push_back(run_op_check("matmul", case_matmul, seed, configs_per_op));
  results.push_back(run_op_check("conv2d", case_conv2d, seed, configs_per_op));
  results.push_back(run_op_check("dense", case_dense, seed, configs_per_op));
  results.push_back(run_op_check(
      "relu", [](Rng& r) { return case_elementwise(r, 0); }, seed, configs_per_op));
  results.push_back(run_op_check(
      "abs", [](Rng& r) { return case_elementwise(r, 1); }, seed, configs_per_op));
  results.push_back(run_op_check(
      "mul_scalar", [](Rng& r) { return case_elementwise(r, 2); }, seed, configs_per_op));
  results.push_back(run_op_check(
      "sum", [](Rng& r) { return case_elementwise(r, 3); }, seed, configs_per_op));
  results.push_back(run_op_check(
      "add", [](Rng& r) { return case_binary(r, 0); }, seed, configs_per_op));
  results.push_back(run_op_check(
      "sub", [](Rng& r) { return case_binary(r, 1); }, seed, configs_per_op));
  results.push_back(run_op_check(
      "mul", [](Rng& r) { return case_binary(r, 2); }, seed, configs_per_op));
  results.push_back(run_op_check("avgpool2d", case_avgpool, seed, configs_per_op));
  results.push_back(run_op_check("flatten", case_flatten, seed, configs_per_op));
  results.push_back(run_op_check("softmax", case_softmax, seed, configs_per_op));
  results.push_back(run_op_check("log", case_log, seed, configs_per_op));
  results.push_back(run_op_check("cross_entropy", case_cross_entropy, seed, configs_per_op));
  results.push_back(run_op_check(
      "batchnorm2d_train", [](Rng& r) { return case_batchnorm(r, true); }, seed, configs_per_op));
  results.push_back(run_op_check(
      "batchnorm2d_eval", [](Rng& r) { return case_batchnorm(r, false); }, seed, configs_per_op));
  return results;
}

namespace {

std::vector<std::uint8_t> sort_oracle_topk(const std::vector<float>& u, int k) {
  std::vector<int> order(u.size());
  std::iota(order.begin(), order.end(), 0);
  std::sort(order.begin(), order.end(),
            [&u](int a, int b) { return u[a] > u[b] || (u[a] == u[b] && a < b); });
  std::vector<std::uint8_t> bits(u.size(), 0);
  for (int i = 0; i < k; ++i) bits[order[i]] = 1;
  return bits;
}

bool topk_matches(const std::vector<float>& u, int k) {
  const LatentMask mask = top_k_mask(u, k);
  const auto expect = sort_oracle_topk(u, k);
  if (mask.bits != expect) return false;
  int pop = 0;
  for (auto b : mask.bits) pop += b;
  return pop == k;
}

}  // namespace

std::vector<CheckResult> run_topk_checks(std::uint64_t seed, int random_cases) {
  std::vector<CheckResult> results;
  {
    CheckResult r;
    r.name = "topk/exhaustive";
    r.passed = true;
    const float grid[4] = {0.0f, 0.25f, 0.5f, 1.0f};
    long long cases = 0;
    for (int d = 1; d <= 8 && r.passed; ++d) {
      std::vector<float> u(d, grid[0]);
      std::vector<int> digits(d, 0);
      const long long total = 1LL << (2 * d);  // 4^d
      for (long long t = 0; t < total && r.passed; ++t) {
        long long rem = t;
        for (int i = 0; i < d; ++i) {
          u[i] = grid[rem & 3];
          rem >>= 2;
        }
        for (int k = 0; k <= d; ++k, ++cases) {
          if (!topk_matches(u, k)) {
            r.passed = false;
            r.detail = "mismatch at d=" + std::to_string(d) + ", k=" + std::to_string(k);
            break;
          }
        }
      }
    }
    if (r.passed) r.detail = std::to_string(cases) + " exhaustive instances";
    results.push_back(std::move(r));
  }
  {
    CheckResult r;
    r.name = "topk/random";
    r.passed = true;
    Rng rng(Rng::derive(seed, 0x70FF));
    for (int t = 0; t < random_cases; ++t) {
      const int d = 1 + rng.uniform_int(64);
      std::vector<float> u(d);
      for (float& v : u) v = rng.uniform(-2.0f, 2.0f);
      // force tie groups in a third of the cases
      if (d > 2 && rng.uniform() < 0.33f) {
        const float tied = u[rng.uniform_int(d)];
        for (int i = 0; i < d / 2; ++i) u[rng.uniform_int(d)] = tied;
      }
      const int k = rng.uniform_int(d + 1);
      if (!topk_matches(u, k)) {
        r.passed = false;
        r.detail = "mismatch at random case " + std::to_string(t);
        break;
      }
    }
    if (r.passed) r.detail = std::to_string(random_cases) + " random vectors";
    results.push_back(std::move(r));
  }
  return results;
}

std::vector<CheckResult> run_geometry_checks(std::uint64_t seed, int instances) {
  CheckResult r;
  r.name = "geometry/attack_iterates";
  r.passed = true;
  Classifier model = tiny_model(seed);
  for (int t = 0; t < instances && r.passed; ++t) {
    Rng rng(Rng::derive(seed, 0x6E0 + t));
    AttackSpec spec;
    spec.epsilon = rng.uniform(0.01f, 0.4f);
    spec.alpha = rng.uniform(0.005f, 0.3f);
    spec.steps = 1 + rng.uniform_int(4);
    spec.random_start = rng.uniform() < 0.5f;
    const bool use_cca = (t % 2) == 1;
    const int batch = 1 + rng.uniform_int(2);
    std::vector<float> data(static_cast<std::size_t>(batch) * 16);
    for (float& v : data) v = rng.uniform(0.0f, 1.0f);
    Tensor x({batch, 1, 4, 4}, std::move(data));
    std::vector<int> labels(batch);
    for (int& l : labels) l = rng.uniform_int(3);

    auto verify = [&](int step, const Tensor& iterate) {
      const auto& iv = iterate.data();
      const auto& cv = x.data();
      for (std::size_t i = 0; i < iv.size() && r.passed; ++i) {
        const float diff = std::fabs(iv[i] - cv[i]);
        if (!within_one_ulp(diff, spec.epsilon) || iv[i] < spec.clamp_lo ||
            iv[i] > spec.clamp_hi) {
          r.passed = false;
          r.detail = "iterate escaped the ball at instance " + std::to_string(t) + ", step " +
                     std::to_string(step);
        }
      }
      // projection idempotence, bit-exact
      Ball ball{x.detached(), spec.epsilon};
      Tensor once = project(iterate, ball, spec.clamp_lo, spec.clamp_hi);
      Tensor twice = project(once, ball, spec.clamp_lo, spec.clamp_hi);
      if (once.data() != twice.data()) {
        r.passed = false;
        r.detail = "projection not idempotent at instance " + std::to_string(t);
      }
    };

    if (use_cca) {
      cca(model, x, spec, CcaCenter::Observed, nullptr, verify);
    } else {
      auto loss = [&](const Tensor& logits, const std::vector<int>& y) {
        std::vector<float> onehot(static_cast<std::size_t>(logits.dim(0)) * logits.dim(1), 0.0f);
        for (int b = 0; b < logits.dim(0); ++b)
          onehot[static_cast<std::size_t>(b) * logits.dim(1) + y[b]] = 1.0f;
        return cross_entropy_with_logits(logits, Tensor(logits.shape(), std::move(onehot)));
      };
      pgd(model, x, labels, spec, loss, Rng::derive(seed, t), verify);
    }
  }
  if (r.passed) r.detail = std::to_string(instances) + " attack instances";
  return {std::move(r)};
}

std::vector<CheckResult> run_serialization_checks(std::uint64_t seed,
                                                  const std::string& scratch_dir) {
  namespace fs = std::filesystem;
  std::vector<CheckResult> results;
  fs::create_directories(scratch_dir);
  const std::string path = (fs::path(scratch_dir) / "selfcheck.ckpt").string();

  CheckResult r;
  r.name = "serialization/roundtrip";
  r.passed = true;
  try {
    Classifier model = tiny_model(seed);
    save_checkpoint(model, path);
    Classifier loaded = load_checkpoint(path);
    for (std::size_t i = 0; i < model.parameters().size() && r.passed; ++i) {
      if (model.parameters()[i].second.data() != loaded.parameters()[i].second.data()) {
        r.passed = false;
        r.detail = "parameter " + model.parameters()[i].first + " did not round trip";
      }
    }
    if (r.passed) r.detail = "bitwise round trip";
  } catch (const std::exception& e) {
    r.passed = false;
    r.detail = e.what();
  }
  results.push_back(r);

  CheckResult c;
  c.name = "serialization/corruption";
  c.passed = true;
  try {
    std::ifstream f(path, std::ios::binary);
    std::string buf((std::istreambuf_iterator<char>(f)), std::istreambuf_iterator<char>());
    f.close();
    // truncation
    {
      std::ofstream t(path + ".trunc", std::ios::binary);
      t.write(buf.data(), static_cast<std::streamsize>(buf.size() / 2));
    }
    try {
      load_checkpoint(path + ".trunc");
      c.passed = false;
      c.detail = "truncated checkpoint not rejected";
    } catch (const ArtifactError& e) {
      if (e.kind() != ArtifactError::Kind::CrcMismatch) {
        c.passed = false;
        c.detail = "truncation produced the wrong error kind";
      }
    }
    // single payload byte flips
    Rng rng(Rng::derive(seed, 0xC0));
    for (int t = 0; t < 16 && c.passed; ++t) {
      std::string corrupted = buf;
      const std::size_t at = 16 + rng.uniform_int(static_cast<int>(buf.size() - 20));
      corrupted[at] = static_cast<char>(corrupted[at] ^ 0x40);
      const std::string cpath = path + ".bitflip";
      std::ofstream o(cpath, std::ios::binary);
      o.write(corrupted.data(), static_cast<std::streamsize>(corrupted.size()));
      o.close();
      try {
        load_checkpoint(cpath);
        c.passed = false;
        c.detail = "bit flip at offset " + std::to_string(at) + " not rejected";
      } catch (const ArtifactError&) {
      }
    }
    if (c.passed) c.detail = "truncation and bit flips rejected";
  } catch (const std::exception& e) {
    c.passed = false;
    c.detail = e.what();
  }
  results.push_back(c);
  return results;
}

std::vector<CheckResult> run_all(std::uint64_t seed, const std::string& scratch_dir) {
  std::vector<CheckResult> all;
  for (auto&& r : run_gradient_checks(seed)) all.push_back(std::move(r));
  for (auto&& r : run_topk_checks(seed)) all.push_back(std::move(r));
  for (auto&& r : run_geometry_checks(seed)) all.push_back(std::move(r));
  for (auto&& r : run_serialization_checks(seed, scratch_dir)) all.push_back(std::move(r));
  return all;
}

}  // namespace lmrc::selfcheck
