#include "lmrc/tensor.hpp"

#include <algorithm>
#include <atomic>
#include <cmath>
#include <cstring>
#include <sstream>
#include <unordered_set>

namespace lmrc {

std::string shape_str(const Shape& shape) {
  std::ostringstream os;
  os << '[';
  for (std::size_t i = 0; i < shape.size(); ++i) {
    if (i) os << 'x';
    os << shape[i];
  }
  os << ']';
  return os.str();
}

namespace {
std::atomic<std::uint64_t> g_warning_counters[static_cast<int>(warnings::Counter::kCount)];
std::atomic<std::uint64_t> g_next_seq{1};
}  // namespace

namespace warnings {
std::uint64_t count(Counter c) { return g_warning_counters[static_cast<int>(c)].load(); }
void bump(Counter c, std::uint64_t by) { g_warning_counters[static_cast<int>(c)] += by; }
void reset() {
  for (auto& c : g_warning_counters) c = 0;
}
}  // namespace warnings

namespace detail {

struct Node {
  Shape shape;
  std::vector<float> value;
  std::vector<float> grad;
  bool requires_grad = false;
  bool is_leaf = true;
  std::uint64_t seq = 0;
  const char* op = "leaf";
  std::vector<std::shared_ptr<Node>> inputs;
  std::function<void(Node&)> backprop;
};

}  // namespace detail

using detail::Node;

namespace {

std::shared_ptr<Node> make_node(Shape shape, std::vector<float> value, bool requires_grad) {
  if (numel(shape) != static_cast<std::int64_t>(value.size()))
    throw ShapeError("tensor data length " + std::to_string(value.size()) +
                     " does not match shape " + shape_str(shape));
  for (int e : shape)
    if (e <= 0) throw ShapeError("tensor extents must be positive, got " + shape_str(shape));
  auto n = std::make_shared<Node>();
  n->shape = std::move(shape);
  n->value = std::move(value);
  n->requires_grad = requires_grad;
  n->seq = g_next_seq++;
  return n;
}

void ensure_grad(Node& n) {
  if (n.grad.empty()) n.grad.assign(n.value.size(), 0.0f);
}

Node& req(const Tensor& t) {
  if (!t.defined()) throw ShapeError("operation on an undefined tensor");
  return *t.node();
}

}  // namespace

Tensor::Tensor(Shape shape, std::vector<float> data, bool requires_grad)
    : node_(make_node(std::move(shape), std::move(data), requires_grad)) {}

Tensor Tensor::zeros(Shape shape, bool requires_grad) {
  std::vector<float> data(static_cast<std::size_t>(numel(shape)), 0.0f);
  return Tensor(std::move(shape), std::move(data), requires_grad);
}

Tensor Tensor::full(Shape shape, float value, bool requires_grad) {
  std::vector<float> data(static_cast<std::size_t>(numel(shape)), value);
  return Tensor(std::move(shape), std::move(data), requires_grad);
}

Tensor Tensor::scalar(float value) { return Tensor({1}, {value}); }

const Shape& Tensor::shape() const { return req(*this).shape; }
int Tensor::rank() const { return static_cast<int>(req(*this).shape.size()); }
int Tensor::dim(int i) const { return req(*this).shape.at(i); }
std::int64_t Tensor::size() const { return static_cast<std::int64_t>(req(*this).value.size()); }

const std::vector<float>& Tensor::data() const { return req(*this).value; }

std::vector<float>& Tensor::raw_data() {
  Node& n = req(*this);
  if (!n.is_leaf) throw ShapeError("raw_data() is only valid on leaf tensors");
  return n.value;
}

float Tensor::item() const {
  const Node& n = req(*this);
  if (n.value.size() != 1) throw ShapeError("item() requires a scalar, got " + shape_str(n.shape));
  return n.value[0];
}

bool Tensor::requires_grad() const { return req(*this).requires_grad; }

void Tensor::set_requires_grad(bool value) {
  Node& n = req(*this);
  if (!n.is_leaf) throw ShapeError("requires_grad can only be toggled on leaf tensors");
  n.requires_grad = value;
}

bool Tensor::has_grad() const { return !req(*this).grad.empty(); }

const std::vector<float>& Tensor::grad() const {
  const Node& n = req(*this);
  if (n.grad.empty()) throw ShapeError("tensor has no gradient; call backward() first");
  return n.grad;
}

void Tensor::zero_grad() {
  Node& n = req(*this);
  std::fill(n.grad.begin(), n.grad.end(), 0.0f);
}

Tensor Tensor::detached(bool requires_grad) const {
  const Node& n = req(*this);
  return Tensor(n.shape, n.value, requires_grad);
}

Tensor make_op_output(const char* op, Shape shape, std::vector<float> value,
                      std::vector<Tensor> inputs, std::function<void(Node&)> backprop) {
  bool needs = false;
  for (const Tensor& t : inputs) needs = needs || req(t).requires_grad;
  auto node = make_node(std::move(shape), std::move(value), needs);
  node->op = op;
  node->is_leaf = false;
  if (needs) {
    node->inputs.reserve(inputs.size());
    for (const Tensor& t : inputs) node->inputs.push_back(t.node_);
    node->backprop = std::move(backprop);
  }
  return Tensor(std::move(node));
}

namespace {

std::vector<Node*> topo_order(Node* root) {
  std::vector<Node*> order;
  std::unordered_set<Node*> seen;
  std::vector<Node*> stack{root};
  while (!stack.empty()) {
    Node* n = stack.back();
    stack.pop_back();
    if (!seen.insert(n).second) continue;
    order.push_back(n);
    for (auto& in : n->inputs) stack.push_back(in.get());
  }
  // Creation order is a topological order: inputs always predate outputs.
  std::sort(order.begin(), order.end(), [](Node* a, Node* b) { return a->seq < b->seq; });
  return order;
}

}  // namespace

Tape Tape::build(const Tensor& root) {
  Tape tape;
  for (Node* n : topo_order(&req(root))) {
    Tape::Entry e;
    e.id = n->seq;
    e.op = n->op;
    for (auto& in : n->inputs) e.inputs.push_back(in->seq);
    tape.nodes.push_back(std::move(e));
  }
  return tape;
}

void backward(const Tensor& loss) {
  Node& root = req(loss);
  if (root.value.size() != 1)
    throw ShapeError("backward() requires a scalar loss, got " + shape_str(root.shape));
  if (!root.requires_grad) return;
  std::vector<Node*> order = topo_order(&root);
  // interior gradients are per-pass scratch; only leaves accumulate across calls
  for (Node* n : order)
    if (!n->is_leaf && !n->grad.empty()) std::fill(n->grad.begin(), n->grad.end(), 0.0f);
  ensure_grad(root);
  root.grad[0] += 1.0f;
  for (auto it = order.rbegin(); it != order.rend(); ++it) {
    Node* n = *it;
    if (n->is_leaf || !n->backprop || n->grad.empty()) continue;
    n->backprop(*n);
  }
}

// -- kernels ------------------------------------------------------------

void gemm_accumulate(int m_dim, int k_dim, int n_dim, const float* a, const float* b, float* c) {
  for (int m = 0; m < m_dim; ++m) {
    const float* a_row = a + static_cast<std::size_t>(m) * k_dim;
    float* c_row = c + static_cast<std::size_t>(m) * n_dim;
    for (int k = 0; k < k_dim; ++k) {
      const float a_mk = a_row[k];
      const float* b_row = b + static_cast<std::size_t>(k) * n_dim;
      for (int n = 0; n < n_dim; ++n) c_row[n] += a_mk * b_row[n];
    }
  }
}

void transpose(int rows, int cols, const float* src, float* dst) {
  for (int r = 0; r < rows; ++r)
    for (int c = 0; c < cols; ++c)
      dst[static_cast<std::size_t>(c) * rows + r] = src[static_cast<std::size_t>(r) * cols + c];
}

// -- operations ---------------------------------------------------------

Tensor matmul(const Tensor& a, const Tensor& b) {
  if (a.rank() != 2 || b.rank() != 2)
    throw ShapeError("matmul expects rank-2 operands, got " + shape_str(a.shape()) + " and " +
                     shape_str(b.shape()));
  const int m = a.dim(0), k = a.dim(1), n = b.dim(1);
  if (b.dim(0) != k)
    throw ShapeError("matmul inner extents disagree: " + shape_str(a.shape()) + " vs " +
                     shape_str(b.shape()));
  std::vector<float> out(static_cast<std::size_t>(m) * n, 0.0f);
  gemm_accumulate(m, k, n, a.data().data(), b.data().data(), out.data());
  return make_op_output("matmul", {m, n}, std::move(out), {a, b}, [m, k, n](Node& node) {
    Node& na = *node.inputs[0];
    Node& nb = *node.inputs[1];
    if (na.requires_grad) {
      ensure_grad(na);
      std::vector<float> bt(static_cast<std::size_t>(k) * n);
      transpose(k, n, nb.value.data(), bt.data());
      gemm_accumulate(m, n, k, node.grad.data(), bt.data(), na.grad.data());
    }
    if (nb.requires_grad) {
      ensure_grad(nb);
      std::vector<float> at(static_cast<std::size_t>(m) * k);
      transpose(m, k, na.value.data(), at.data());
      gemm_accumulate(k, m, n, at.data(), node.grad.data(), nb.grad.data());
    }
  });
}

namespace {

struct ConvDims {
  int batch, in_ch, in_h, in_w;
  int out_ch, k_h, k_w;
  int stride, pad;
  int out_h, out_w;
  int patch;  // in_ch * k_h * k_w
  int pixels; // out_h * out_w
};

ConvDims conv_dims(const Tensor& input, const Tensor& kernel, int stride, int padding) {
  if (input.rank() != 4 || kernel.rank() != 4)
    throw ShapeError("conv2d expects rank-4 input and kernel, got " + shape_str(input.shape()) +
                     " and " + shape_str(kernel.shape()));
  if (stride < 1) throw ShapeError("conv2d stride must be >= 1");
  if (padding < 0) throw ShapeError("conv2d padding must be >= 0");
  ConvDims d;
  d.batch = input.dim(0);
  d.in_ch = input.dim(1);
  d.in_h = input.dim(2);
  d.in_w = input.dim(3);
  d.out_ch = kernel.dim(0);
  d.k_h = kernel.dim(2);
  d.k_w = kernel.dim(3);
  d.stride = stride;
  d.pad = padding;
  if (kernel.dim(1) != d.in_ch)
    throw ShapeError("conv2d kernel channels " + std::to_string(kernel.dim(1)) +
                     " do not match input channels " + std::to_string(d.in_ch));
  const int span_h = d.in_h + 2 * padding - d.k_h;
  const int span_w = d.in_w + 2 * padding - d.k_w;
  if (span_h < 0 || span_w < 0 || span_h % stride != 0 || span_w % stride != 0)
    throw ShapeError("conv2d output extent is not a positive integer for input " +
                     shape_str(input.shape()) + ", kernel " + shape_str(kernel.shape()) +
                     ", stride " + std::to_string(stride) + ", padding " + std::to_string(padding));
  d.out_h = span_h / stride + 1;
  d.out_w = span_w / stride + 1;
  d.patch = d.in_ch * d.k_h * d.k_w;
  d.pixels = d.out_h * d.out_w;
  return d;
}

void im2col(const ConvDims& d, const float* image, float* col) {
  // col[(c*kH+kh)*kW+kw][oy*outW+ox]
  for (int c = 0; c < d.in_ch; ++c) {
    const float* plane = image + static_cast<std::size_t>(c) * d.in_h * d.in_w;
    for (int kh = 0; kh < d.k_h; ++kh) {
      for (int kw = 0; kw < d.k_w; ++kw) {
        float* row = col + static_cast<std::size_t>((c * d.k_h + kh) * d.k_w + kw) * d.pixels;
        for (int oy = 0; oy < d.out_h; ++oy) {
          const int iy = oy * d.stride - d.pad + kh;
          for (int ox = 0; ox < d.out_w; ++ox) {
            const int ix = ox * d.stride - d.pad + kw;
            row[oy * d.out_w + ox] =
                (iy >= 0 && iy < d.in_h && ix >= 0 && ix < d.in_w)
                    ? plane[static_cast<std::size_t>(iy) * d.in_w + ix]
                    : 0.0f;
          }
        }
      }
    }
  }
}

void col2im_accumulate(const ConvDims& d, const float* col, float* image) {
  for (int c = 0; c < d.in_ch; ++c) {
    float* plane = image + static_cast<std::size_t>(c) * d.in_h * d.in_w;
    for (int kh = 0; kh < d.k_h; ++kh) {
      for (int kw = 0; kw < d.k_w; ++kw) {
        const float* row = col + static_cast<std::size_t>((c * d.k_h + kh) * d.k_w + kw) * d.pixels;
        for (int oy = 0; oy < d.out_h; ++oy) {
          const int iy = oy * d.stride - d.pad + kh;
          if (iy < 0 || iy >= d.in_h) continue;
          for (int ox = 0; ox < d.out_w; ++ox) {
            const int ix = ox * d.stride - d.pad + kw;
            if (ix < 0 || ix >= d.in_w) continue;
            plane[static_cast<std::size_t>(iy) * d.in_w + ix] += row[oy * d.out_w + ox];
          }
        }
      }
    }
  }
}

}  // namespace

Tensor conv2d(const Tensor& input, const Tensor& kernel, const Tensor& bias, int stride,
              int padding) {
  const ConvDims d = conv_dims(input, kernel, stride, padding);
  const bool has_bias = bias.defined();
  if (has_bias && (bias.rank() != 1 || bias.dim(0) != d.out_ch))
    throw ShapeError("conv2d bias must have shape [" + std::to_string(d.out_ch) + "]");

  auto cols = std::make_shared<std::vector<float>>(
      static_cast<std::size_t>(d.batch) * d.patch * d.pixels);
  std::vector<float> out(static_cast<std::size_t>(d.batch) * d.out_ch * d.pixels, 0.0f);
  const float* in_data = input.data().data();
  const float* k_data = kernel.data().data();
  for (int b = 0; b < d.batch; ++b) {
    float* col = cols->data() + static_cast<std::size_t>(b) * d.patch * d.pixels;
    im2col(d, in_data + static_cast<std::size_t>(b) * d.in_ch * d.in_h * d.in_w, col);
    float* out_b = out.data() + static_cast<std::size_t>(b) * d.out_ch * d.pixels;
    if (has_bias) {
      const float* bias_data = bias.data().data();
      for (int o = 0; o < d.out_ch; ++o)
        std::fill(out_b + static_cast<std::size_t>(o) * d.pixels,
                  out_b + static_cast<std::size_t>(o + 1) * d.pixels, bias_data[o]);
    }
    gemm_accumulate(d.out_ch, d.patch, d.pixels, k_data, col, out_b);
  }

  std::vector<Tensor> inputs{input, kernel};
  if (has_bias) inputs.push_back(bias);
  return make_op_output(
      "conv2d", {d.batch, d.out_ch, d.out_h, d.out_w}, std::move(out), std::move(inputs),
      [d, cols, has_bias](Node& node) {
        Node& nin = *node.inputs[0];
        Node& nk = *node.inputs[1];
        Node* nbias = has_bias ? node.inputs[2].get() : nullptr;
        std::vector<float> kt;
        if (nin.requires_grad) {
          kt.resize(static_cast<std::size_t>(d.patch) * d.out_ch);
          transpose(d.out_ch, d.patch, nk.value.data(), kt.data());
          ensure_grad(nin);
        }
        if (nk.requires_grad) ensure_grad(nk);
        if (nbias && nbias->requires_grad) ensure_grad(*nbias);
        std::vector<float> col_t(static_cast<std::size_t>(d.pixels) * d.patch);
        std::vector<float> dcol(static_cast<std::size_t>(d.patch) * d.pixels);
        for (int b = 0; b < d.batch; ++b) {
          const float* g_b = node.grad.data() + static_cast<std::size_t>(b) * d.out_ch * d.pixels;
          const float* col = cols->data() + static_cast<std::size_t>(b) * d.patch * d.pixels;
          if (nbias && nbias->requires_grad) {
            for (int o = 0; o < d.out_ch; ++o) {
              float acc = 0.0f;
              const float* row = g_b + static_cast<std::size_t>(o) * d.pixels;
              for (int p = 0; p < d.pixels; ++p) acc += row[p];
              nbias->grad[o] += acc;
            }
          }
          if (nk.requires_grad) {
            transpose(d.patch, d.pixels, col, col_t.data());
            gemm_accumulate(d.out_ch, d.pixels, d.patch, g_b, col_t.data(), nk.grad.data());
          }
          if (nin.requires_grad) {
            std::fill(dcol.begin(), dcol.end(), 0.0f);
            gemm_accumulate(d.patch, d.out_ch, d.pixels, kt.data(), g_b, dcol.data());
            col2im_accumulate(d, dcol.data(),
                              nin.grad.data() +
                                  static_cast<std::size_t>(b) * d.in_ch * d.in_h * d.in_w);
          }
        }
      });
}

Tensor dense(const Tensor& x, const Tensor& weight, const Tensor& bias) {
  if (x.rank() != 2 || weight.rank() != 2)
    throw ShapeError("dense expects rank-2 input and weight, got " + shape_str(x.shape()) +
                     " and " + shape_str(weight.shape()));
  const int batch = x.dim(0), in = x.dim(1), out = weight.dim(0);
  if (weight.dim(1) != in)
    throw ShapeError("dense weight " + shape_str(weight.shape()) + " does not accept input " +
                     shape_str(x.shape()));
  const bool has_bias = bias.defined();
  if (has_bias && (bias.rank() != 1 || bias.dim(0) != out))
    throw ShapeError("dense bias must have shape [" + std::to_string(out) + "]");

  std::vector<float> wt(static_cast<std::size_t>(in) * out);
  transpose(out, in, weight.data().data(), wt.data());
  std::vector<float> y(static_cast<std::size_t>(batch) * out, 0.0f);
  if (has_bias) {
    const float* b = bias.data().data();
    for (int m = 0; m < batch; ++m)
      std::memcpy(y.data() + static_cast<std::size_t>(m) * out, b, sizeof(float) * out);
  }
  gemm_accumulate(batch, in, out, x.data().data(), wt.data(), y.data());

  std::vector<Tensor> inputs{x, weight};
  if (has_bias) inputs.push_back(bias);
  return make_op_output(
      "dense", {batch, out}, std::move(y), std::move(inputs),
      [batch, in, out, has_bias](Node& node) {
        Node& nx = *node.inputs[0];
        Node& nw = *node.inputs[1];
        Node* nb = has_bias ? node.inputs[2].get() : nullptr;
        if (nx.requires_grad) {
          ensure_grad(nx);
          gemm_accumulate(batch, out, in, node.grad.data(), nw.value.data(), nx.grad.data());
        }
        if (nw.requires_grad) {
          ensure_grad(nw);
          std::vector<float> gt(static_cast<std::size_t>(out) * batch);
          transpose(batch, out, node.grad.data(), gt.data());
          gemm_accumulate(out, batch, in, gt.data(), nx.value.data(), nw.grad.data());
        }
        if (nb && nb->requires_grad) {
          ensure_grad(*nb);
          for (int m = 0; m < batch; ++m) {
            const float* row = node.grad.data() + static_cast<std::size_t>(m) * out;
            for (int n = 0; n < out; ++n) nb->grad[n] += row[n];
          }
        }
      });
}

Tensor relu(const Tensor& x) {
  std::vector<float> y(x.data());
  for (float& v : y) v = v > 0.0f ? v : 0.0f;
  return make_op_output("relu", x.shape(), std::move(y), {x}, [](Node& node) {
    Node& nx = *node.inputs[0];
    if (!nx.requires_grad) return;
    ensure_grad(nx);
    for (std::size_t i = 0; i < node.grad.size(); ++i)
      if (nx.value[i] > 0.0f) nx.grad[i] += node.grad[i];
  });
}

Tensor avgpool2d(const Tensor& x, int window) {
  if (x.rank() != 4) throw ShapeError("avgpool2d expects rank-4 input, got " + shape_str(x.shape()));
  if (window < 1) throw ShapeError("avgpool2d window must be >= 1");
  const int batch = x.dim(0), ch = x.dim(1), h = x.dim(2), w = x.dim(3);
  if (h % window != 0 || w % window != 0)
    throw ShapeError("avgpool2d window " + std::to_string(window) +
                     " does not divide spatial extents of " + shape_str(x.shape()));
  const int oh = h / window, ow = w / window;
  const float inv = 1.0f / static_cast<float>(window * window);
  std::vector<float> y(static_cast<std::size_t>(batch) * ch * oh * ow);
  const float* in = x.data().data();
  std::size_t idx = 0;
  for (int b = 0; b < batch; ++b)
    for (int c = 0; c < ch; ++c) {
      const float* plane = in + (static_cast<std::size_t>(b) * ch + c) * h * w;
      for (int oy = 0; oy < oh; ++oy)
        for (int ox = 0; ox < ow; ++ox) {
          float acc = 0.0f;
          for (int dy = 0; dy < window; ++dy)
            for (int dx = 0; dx < window; ++dx)
              acc += plane[static_cast<std::size_t>(oy * window + dy) * w + ox * window + dx];
          y[idx++] = acc * inv;
        }
    }
  return make_op_output(
      "avgpool2d", {batch, ch, oh, ow}, std::move(y), {x},
      [batch, ch, h, w, oh, ow, window, inv](Node& node) {
        Node& nx = *node.inputs[0];
        if (!nx.requires_grad) return;
        ensure_grad(nx);
        std::size_t idx = 0;
        for (int b = 0; b < batch; ++b)
          for (int c = 0; c < ch; ++c) {
            float* plane = nx.grad.data() + (static_cast<std::size_t>(b) * ch + c) * h * w;
            for (int oy = 0; oy < oh; ++oy)
              for (int ox = 0; ox < ow; ++ox) {
                const float g = node.grad[idx++] * inv;
                for (int dy = 0; dy < window; ++dy)
                  for (int dx = 0; dx < window; ++dx)
                    plane[static_cast<std::size_t>(oy * window + dy) * w + ox * window + dx] += g;
              }
          }
      });
}

Tensor flatten(const Tensor& x) {
  if (x.rank() < 1) throw ShapeError("flatten expects rank >= 1");
  const int batch = x.dim(0);
  const int rest = static_cast<int>(x.size() / batch);
  std::vector<float> y(x.data());
  return make_op_output("flatten", {batch, rest}, std::move(y), {x}, [](Node& node) {
    Node& nx = *node.inputs[0];
    if (!nx.requires_grad) return;
    ensure_grad(nx);
    for (std::size_t i = 0; i < node.grad.size(); ++i) nx.grad[i] += node.grad[i];
  });
}

namespace {

enum class Broadcast { None, LeftScalar, RightScalar };

Broadcast binary_broadcast(const Tensor& a, const Tensor& b, const char* op) {
  if (a.shape() == b.shape()) return Broadcast::None;
  if (a.size() == 1) return Broadcast::LeftScalar;
  if (b.size() == 1) return Broadcast::RightScalar;
  throw ShapeError(std::string(op) + " requires equal shapes or a scalar operand, got " +
                   shape_str(a.shape()) + " and " + shape_str(b.shape()));
}

}  // namespace

Tensor add(const Tensor& a, const Tensor& b) {
  const Broadcast bc = binary_broadcast(a, b, "add");
  const std::vector<float>& av = a.data();
  const std::vector<float>& bv = b.data();
  const std::size_t n = std::max(av.size(), bv.size());
  std::vector<float> y(n);
  for (std::size_t i = 0; i < n; ++i)
    y[i] = (bc == Broadcast::LeftScalar ? av[0] : av[i]) +
           (bc == Broadcast::RightScalar ? bv[0] : bv[i]);
  Shape shape = bc == Broadcast::LeftScalar ? b.shape() : a.shape();
  return make_op_output("add", std::move(shape), std::move(y), {a, b}, [bc](Node& node) {
    Node& na = *node.inputs[0];
    Node& nb = *node.inputs[1];
    if (na.requires_grad) {
      ensure_grad(na);
      if (bc == Broadcast::LeftScalar) {
        float acc = 0.0f;
        for (float g : node.grad) acc += g;
        na.grad[0] += acc;
      } else {
        for (std::size_t i = 0; i < node.grad.size(); ++i) na.grad[i] += node.grad[i];
      }
    }
    if (nb.requires_grad) {
      ensure_grad(nb);
      if (bc == Broadcast::RightScalar) {
        float acc = 0.0f;
        for (float g : node.grad) acc += g;
        nb.grad[0] += acc;
      } else {
        for (std::size_t i = 0; i < node.grad.size(); ++i) nb.grad[i] += node.grad[i];
      }
    }
  });
}

Tensor sub(const Tensor& a, const Tensor& b) {
  const Broadcast bc = binary_broadcast(a, b, "sub");
  const std::vector<float>& av = a.data();
  const std::vector<float>& bv = b.data();
  const std::size_t n = std::max(av.size(), bv.size());
  std::vector<float> y(n);
  for (std::size_t i = 0; i < n; ++i)
    y[i] = (bc == Broadcast::LeftScalar ? av[0] : av[i]) -
           (bc == Broadcast::RightScalar ? bv[0] : bv[i]);
  Shape shape = bc == Broadcast::LeftScalar ? b.shape() : a.shape();
  return make_op_output("sub", std::move(shape), std::move(y), {a, b}, [bc](Node& node) {
    Node& na = *node.inputs[0];
    Node& nb = *node.inputs[1];
    if (na.requires_grad) {
      ensure_grad(na);
      if (bc == Broadcast::LeftScalar) {
        float acc = 0.0f;
        for (float g : node.grad) acc += g;
        na.grad[0] += acc;
      } else {
        for (std::size_t i = 0; i < node.grad.size(); ++i) na.grad[i] += node.grad[i];
      }
    }
    if (nb.requires_grad) {
      ensure_grad(nb);
      if (bc == Broadcast::RightScalar) {
        float acc = 0.0f;
        for (float g : node.grad) acc += g;
        nb.grad[0] -= acc;
      } else {
        for (std::size_t i = 0; i < node.grad.size(); ++i) nb.grad[i] -= node.grad[i];
      }
    }
  });
}

Tensor mul(const Tensor& a, const Tensor& b) {
  const Broadcast bc = binary_broadcast(a, b, "mul");
  const std::vector<float>& av = a.data();
  const std::vector<float>& bv = b.data();
  const std::size_t n = std::max(av.size(), bv.size());
  std::vector<float> y(n);
  for (std::size_t i = 0; i < n; ++i)
    y[i] = (bc == Broadcast::LeftScalar ? av[0] : av[i]) *
           (bc == Broadcast::RightScalar ? bv[0] : bv[i]);
  Shape shape = bc == Broadcast::LeftScalar ? b.shape() : a.shape();
  return make_op_output("mul", std::move(shape), std::move(y), {a, b}, [bc](Node& node) {
    Node& na = *node.inputs[0];
    Node& nb = *node.inputs[1];
    if (na.requires_grad) {
      ensure_grad(na);
      if (bc == Broadcast::LeftScalar) {
        float acc = 0.0f;
        for (std::size_t i = 0; i < node.grad.size(); ++i) acc += node.grad[i] * nb.value[i];
        na.grad[0] += acc;
      } else {
        for (std::size_t i = 0; i < node.grad.size(); ++i)
          na.grad[i] += node.grad[i] * (bc == Broadcast::RightScalar ? nb.value[0] : nb.value[i]);
      }
    }
    if (nb.requires_grad) {
      ensure_grad(nb);
      if (bc == Broadcast::RightScalar) {
        float acc = 0.0f;
        for (std::size_t i = 0; i < node.grad.size(); ++i) acc += node.grad[i] * na.value[i];
        nb.grad[0] += acc;
      } else {
        for (std::size_t i = 0; i < node.grad.size(); ++i)
          nb.grad[i] += node.grad[i] * (bc == Broadcast::LeftScalar ? na.value[0] : na.value[i]);
      }
    }
  });
}

Tensor mul_scalar(const Tensor& x, float s) {
  std::vector<float> y(x.data());
  for (float& v : y) v *= s;
  return make_op_output("mul_scalar", x.shape(), std::move(y), {x}, [s](Node& node) {
    Node& nx = *node.inputs[0];
    if (!nx.requires_grad) return;
    ensure_grad(nx);
    for (std::size_t i = 0; i < node.grad.size(); ++i) nx.grad[i] += s * node.grad[i];
  });
}

Tensor abs(const Tensor& x) {
  std::vector<float> y(x.data());
  for (float& v : y) v = std::fabs(v);
  return make_op_output("abs", x.shape(), std::move(y), {x}, [](Node& node) {
    Node& nx = *node.inputs[0];
    if (!nx.requires_grad) return;
    ensure_grad(nx);
    for (std::size_t i = 0; i < node.grad.size(); ++i) {
      const float v = nx.value[i];
      if (v > 0.0f)
        nx.grad[i] += node.grad[i];
      else if (v < 0.0f)
        nx.grad[i] -= node.grad[i];
    }
  });
}

Tensor sum(const Tensor& x) {
  float acc = 0.0f;
  for (float v : x.data()) acc += v;
  return make_op_output("sum", {1}, {acc}, {x}, [](Node& node) {
    Node& nx = *node.inputs[0];
    if (!nx.requires_grad) return;
    ensure_grad(nx);
    const float g = node.grad[0];
    for (std::size_t i = 0; i < nx.grad.size(); ++i) nx.grad[i] += g;
  });
}

Tensor sign(const Tensor& x) {
  std::vector<float> y(x.data());
  for (float& v : y) v = v > 0.0f ? 1.0f : (v < 0.0f ? -1.0f : 0.0f);
  // Piecewise constant: the output does not join the graph.
  return Tensor(x.shape(), std::move(y));
}

namespace {

struct RowView {
  int rows, cols;
};

RowView row_view(const Tensor& x, const char* op) {
  if (x.rank() == 1) return {1, x.dim(0)};
  if (x.rank() == 2) return {x.dim(0), x.dim(1)};
  throw ShapeError(std::string(op) + " expects a vector or a [B,c] matrix, got " +
                   shape_str(x.shape()));
}

}  // namespace

Tensor softmax(const Tensor& x) {
  const RowView v = row_view(x, "softmax");
  std::vector<float> y(x.data().size());
  const float* in = x.data().data();
  for (int r = 0; r < v.rows; ++r) {
    const float* row = in + static_cast<std::size_t>(r) * v.cols;
    float* out = y.data() + static_cast<std::size_t>(r) * v.cols;
    float mx = row[0];
    for (int c = 1; c < v.cols; ++c) mx = std::max(mx, row[c]);
    float denom = 0.0f;
    for (int c = 0; c < v.cols; ++c) {
      out[c] = std::exp(row[c] - mx);
      denom += out[c];
    }
    const float inv = 1.0f / denom;
    for (int c = 0; c < v.cols; ++c) out[c] *= inv;
  }
  return make_op_output("softmax", x.shape(), std::move(y), {x}, [v](Node& node) {
    Node& nx = *node.inputs[0];
    if (!nx.requires_grad) return;
    ensure_grad(nx);
    for (int r = 0; r < v.rows; ++r) {
      const float* s = node.value.data() + static_cast<std::size_t>(r) * v.cols;
      const float* g = node.grad.data() + static_cast<std::size_t>(r) * v.cols;
      float* dx = nx.grad.data() + static_cast<std::size_t>(r) * v.cols;
      float dot = 0.0f;
      for (int c = 0; c < v.cols; ++c) dot += g[c] * s[c];
      for (int c = 0; c < v.cols; ++c) dx[c] += s[c] * (g[c] - dot);
    }
  });
}

Tensor log(const Tensor& x) {
  constexpr float kFloor = 1e-12f;
  std::vector<float> clamped(x.data());
  std::uint64_t clamps = 0;
  for (float& v : clamped) {
    if (v < kFloor) {
      v = kFloor;
      ++clamps;
    }
  }
  if (clamps) warnings::bump(warnings::Counter::LogClamp, clamps);
  std::vector<float> y(clamped.size());
  for (std::size_t i = 0; i < y.size(); ++i) y[i] = std::log(clamped[i]);
  auto saved = std::make_shared<std::vector<float>>(std::move(clamped));
  return make_op_output("log", x.shape(), std::move(y), {x}, [saved](Node& node) {
    Node& nx = *node.inputs[0];
    if (!nx.requires_grad) return;
    ensure_grad(nx);
    for (std::size_t i = 0; i < node.grad.size(); ++i) nx.grad[i] += node.grad[i] / (*saved)[i];
  });
}

Tensor cross_entropy_with_logits(const Tensor& logits, const Tensor& targets) {
  const RowView v = row_view(logits, "cross_entropy_with_logits");
  if (logits.shape() != targets.shape())
    throw ShapeError("cross_entropy_with_logits requires matching shapes, got " +
                     shape_str(logits.shape()) + " and " + shape_str(targets.shape()));
  const float* l = logits.data().data();
  const float* t = targets.data().data();
  for (int r = 0; r < v.rows; ++r) {
    float mass = 0.0f;
    for (int c = 0; c < v.cols; ++c) mass += t[static_cast<std::size_t>(r) * v.cols + c];
    if (std::fabs(mass - 1.0f) > 1e-3f)
      throw ShapeError("cross_entropy_with_logits targets must sum to 1 per row");
  }
  auto probs = std::make_shared<std::vector<float>>(logits.data().size());
  auto lse = std::make_shared<std::vector<float>>(v.rows);
  float total = 0.0f;
  for (int r = 0; r < v.rows; ++r) {
    const float* row = l + static_cast<std::size_t>(r) * v.cols;
    const float* trow = t + static_cast<std::size_t>(r) * v.cols;
    float* prow = probs->data() + static_cast<std::size_t>(r) * v.cols;
    float mx = row[0];
    for (int c = 1; c < v.cols; ++c) mx = std::max(mx, row[c]);
    float denom = 0.0f;
    for (int c = 0; c < v.cols; ++c) {
      prow[c] = std::exp(row[c] - mx);
      denom += prow[c];
    }
    const float row_lse = mx + std::log(denom);
    (*lse)[r] = row_lse;
    const float inv = 1.0f / denom;
    float dot = 0.0f;
    for (int c = 0; c < v.cols; ++c) {
      prow[c] *= inv;
      dot += trow[c] * row[c];
    }
    total += row_lse - dot;
  }
  total /= static_cast<float>(v.rows);
  return make_op_output(
      "cross_entropy", {1}, {total}, {logits, targets}, [v, probs, lse](Node& node) {
        Node& nl = *node.inputs[0];
        Node& nt = *node.inputs[1];
        const float g = node.grad[0] / static_cast<float>(v.rows);
        if (nl.requires_grad) {
          ensure_grad(nl);
          for (std::size_t i = 0; i < nl.grad.size(); ++i)
            nl.grad[i] += g * ((*probs)[i] - nt.value[i]);
        }
        if (nt.requires_grad) {
          ensure_grad(nt);
          for (int r = 0; r < v.rows; ++r)
            for (int c = 0; c < v.cols; ++c) {
              const std::size_t i = static_cast<std::size_t>(r) * v.cols + c;
              nt.grad[i] += g * ((*lse)[r] - nl.value[i]);
            }
        }
      });
}

Tensor batchnorm2d(const Tensor& x, const Tensor& gamma, const Tensor& beta, Tensor& running_mean,
                   Tensor& running_var, bool training, float momentum, float eps) {
  if (x.rank() != 4) throw ShapeError("batchnorm2d expects rank-4 input, got " + shape_str(x.shape()));
  const int batch = x.dim(0), ch = x.dim(1), h = x.dim(2), w = x.dim(3);
  const int plane = h * w;
  const std::int64_t per_ch = static_cast<std::int64_t>(batch) * plane;
  if (gamma.size() != ch || beta.size() != ch || running_mean.size() != ch ||
      running_var.size() != ch)
    throw ShapeError("batchnorm2d parameter length does not match channel count " +
                     std::to_string(ch));

  auto x_hat = std::make_shared<std::vector<float>>(x.data().size());
  auto inv_std = std::make_shared<std::vector<float>>(ch);
  const float* in = x.data().data();
  const float* g = gamma.data().data();
  const float* be = beta.data().data();

  std::vector<float> mean(ch), var(ch);
  if (training) {
    for (int c = 0; c < ch; ++c) {
      float acc = 0.0f;
      for (int b = 0; b < batch; ++b) {
        const float* p = in + (static_cast<std::size_t>(b) * ch + c) * plane;
        for (int i = 0; i < plane; ++i) acc += p[i];
      }
      mean[c] = acc / static_cast<float>(per_ch);
      float vacc = 0.0f;
      for (int b = 0; b < batch; ++b) {
        const float* p = in + (static_cast<std::size_t>(b) * ch + c) * plane;
        for (int i = 0; i < plane; ++i) {
          const float d = p[i] - mean[c];
          vacc += d * d;
        }
      }
      var[c] = vacc / static_cast<float>(per_ch);
    }
    std::vector<float>& rm = running_mean.raw_data();
    std::vector<float>& rv = running_var.raw_data();
    for (int c = 0; c < ch; ++c) {
      rm[c] = (1.0f - momentum) * rm[c] + momentum * mean[c];
      rv[c] = (1.0f - momentum) * rv[c] + momentum * var[c];
    }
  } else {
    mean = running_mean.data();
    var = running_var.data();
  }

  std::vector<float> y(x.data().size());
  for (int c = 0; c < ch; ++c) (*inv_std)[c] = 1.0f / std::sqrt(var[c] + eps);
  for (int b = 0; b < batch; ++b)
    for (int c = 0; c < ch; ++c) {
      const float* p = in + (static_cast<std::size_t>(b) * ch + c) * plane;
      float* xh = x_hat->data() + (static_cast<std::size_t>(b) * ch + c) * plane;
      float* out = y.data() + (static_cast<std::size_t>(b) * ch + c) * plane;
      const float m = mean[c], is = (*inv_std)[c], gc = g[c], bc = be[c];
      for (int i = 0; i < plane; ++i) {
        xh[i] = (p[i] - m) * is;
        out[i] = gc * xh[i] + bc;
      }
    }

  return make_op_output(
      "batchnorm2d", x.shape(), std::move(y), {x, gamma, beta},
      [batch, ch, plane, per_ch, training, x_hat, inv_std](Node& node) {
        Node& nx = *node.inputs[0];
        Node& ng = *node.inputs[1];
        Node& nb = *node.inputs[2];
        const bool need_x = nx.requires_grad;
        if (need_x) ensure_grad(nx);
        if (ng.requires_grad) ensure_grad(ng);
        if (nb.requires_grad) ensure_grad(nb);
        for (int c = 0; c < ch; ++c) {
          float sum_g = 0.0f, sum_gx = 0.0f;
          for (int b = 0; b < batch; ++b) {
            const std::size_t base = (static_cast<std::size_t>(b) * ch + c) * plane;
            for (int i = 0; i < plane; ++i) {
              const float gv = node.grad[base + i];
              sum_g += gv;
              sum_gx += gv * (*x_hat)[base + i];
            }
          }
          if (ng.requires_grad) ng.grad[c] += sum_gx;
          if (nb.requires_grad) nb.grad[c] += sum_g;
          if (!need_x) continue;
          const float gc = ng.value[c];
          const float is = (*inv_std)[c];
          if (training) {
            const float scale = gc * is / static_cast<float>(per_ch);
            for (int b = 0; b < batch; ++b) {
              const std::size_t base = (static_cast<std::size_t>(b) * ch + c) * plane;
              for (int i = 0; i < plane; ++i) {
                const float gv = node.grad[base + i];
                nx.grad[base + i] +=
                    scale * (static_cast<float>(per_ch) * gv - sum_g - (*x_hat)[base + i] * sum_gx);
              }
            }
          } else {
            const float scale = gc * is;
            for (int b = 0; b < batch; ++b) {
              const std::size_t base = (static_cast<std::size_t>(b) * ch + c) * plane;
              for (int i = 0; i < plane; ++i) nx.grad[base + i] += scale * node.grad[base + i];
            }
          }
        }
      });
}

}  // namespace lmrc
