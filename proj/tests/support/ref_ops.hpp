#pragma once

// Naive double-precision reference implementations used as oracles by the
// unit tests. Deliberately written as direct loop transcriptions of the
// operation definitions; they share no code with the library kernels.

#include <algorithm>
#include <cmath>
#include <cstddef>
#include <vector>

namespace refops {

using DVec = std::vector<double>;

inline DVec matmul(const DVec& a, const DVec& b, int m, int k, int n) {
  DVec c(static_cast<std::size_t>(m) * n, 0.0);
  for (int i = 0; i < m; ++i)
    for (int j = 0; j < n; ++j)
      for (int p = 0; p < k; ++p) c[i * n + j] += a[i * k + p] * b[p * n + j];
  return c;
}

inline std::vector<float> matmul_f32(const std::vector<float>& a, const std::vector<float>& b,
                                     int m, int k, int n) {
  std::vector<float> c(static_cast<std::size_t>(m) * n, 0.0f);
  for (int i = 0; i < m; ++i)
    for (int j = 0; j < n; ++j)
      for (int p = 0; p < k; ++p) c[i * n + j] += a[i * k + p] * b[p * n + j];
  return c;
}

struct ConvSpec {
  int batch, in_ch, in_h, in_w;
  int out_ch, k_h, k_w;
  int stride, pad;
  int out_h() const { return (in_h + 2 * pad - k_h) / stride + 1; }
  int out_w() const { return (in_w + 2 * pad - k_w) / stride + 1; }
};

inline DVec conv2d(const DVec& x, const DVec& k, const DVec& bias, const ConvSpec& s) {
  const int oh = s.out_h(), ow = s.out_w();
  DVec y(static_cast<std::size_t>(s.batch) * s.out_ch * oh * ow, 0.0);
  for (int b = 0; b < s.batch; ++b)
    for (int o = 0; o < s.out_ch; ++o)
      for (int oy = 0; oy < oh; ++oy)
        for (int ox = 0; ox < ow; ++ox) {
          double acc = bias.empty() ? 0.0 : bias[o];
          for (int c = 0; c < s.in_ch; ++c)
            for (int kh = 0; kh < s.k_h; ++kh)
              for (int kw = 0; kw < s.k_w; ++kw) {
                const int iy = oy * s.stride - s.pad + kh;
                const int ix = ox * s.stride - s.pad + kw;
                if (iy < 0 || iy >= s.in_h || ix < 0 || ix >= s.in_w) continue;
                acc += x[((static_cast<std::size_t>(b) * s.in_ch + c) * s.in_h + iy) * s.in_w + ix] *
                       k[((static_cast<std::size_t>(o) * s.in_ch + c) * s.k_h + kh) * s.k_w + kw];
              }
          y[((static_cast<std::size_t>(b) * s.out_ch + o) * oh + oy) * ow + ox] = acc;
        }
  return y;
}

inline double cross_entropy(const DVec& logits, const DVec& targets, int rows, int cols) {
  double total = 0.0;
  for (int r = 0; r < rows; ++r) {
    double mx = logits[r * cols];
    for (int c = 1; c < cols; ++c) mx = std::max(mx, logits[r * cols + c]);
    double denom = 0.0;
    for (int c = 0; c < cols; ++c) denom += std::exp(logits[r * cols + c] - mx);
    const double lse = mx + std::log(denom);
    double dot = 0.0;
    for (int c = 0; c < cols; ++c) dot += targets[r * cols + c] * logits[r * cols + c];
    total += lse - dot;
  }
  return total / rows;
}

/// Sort-based top-k selection with ties toward the smaller index.
inline std::vector<std::uint8_t> topk_bits(const std::vector<float>& u, int k) {
  std::vector<int> order(u.size());
  for (std::size_t i = 0; i < u.size(); ++i) order[i] = static_cast<int>(i);
  std::sort(order.begin(), order.end(),
            [&u](int a, int b) { return u[a] > u[b] || (u[a] == u[b] && a < b); });
  std::vector<std::uint8_t> bits(u.size(), 0);
  for (int i = 0; i < k; ++i) bits[order[i]] = 1;
  return bits;
}

}  // namespace refops
