#include "lmrc/model.hpp"

#include <cmath>
#include <sstream>

#include "lmrc/rng.hpp"

namespace lmrc {

namespace layers {

class Layer {
 public:
  virtual ~Layer() = default;
  virtual Tensor forward(const Tensor& x, Mode mode) = 0;
};

namespace {

Tensor init_conv(int out_ch, int in_ch, int k, Rng& rng) {
  const float stddev = std::sqrt(2.0f / static_cast<float>(in_ch * k * k));
  std::vector<float> w(static_cast<std::size_t>(out_ch) * in_ch * k * k);
  for (float& v : w) v = stddev * rng.normal();
  return Tensor({out_ch, in_ch, k, k}, std::move(w), true);
}

Tensor init_dense(int out, int in, Rng& rng) {
  const float stddev = std::sqrt(2.0f / static_cast<float>(in));
  std::vector<float> w(static_cast<std::size_t>(out) * in);
  for (float& v : w) v = stddev * rng.normal();
  return Tensor({out, in}, std::move(w), true);
}

}  // namespace

using Registry = std::vector<std::pair<std::string, Tensor>>;

class ConvLayer : public Layer {
 public:
  ConvLayer(const std::string& name, int in_ch, int out_ch, int k, int stride, int pad, bool bias,
            Rng& rng, Registry& params)
      : stride_(stride), pad_(pad) {
    weight_ = init_conv(out_ch, in_ch, k, rng);
    params.emplace_back(name + ".weight", weight_);
    if (bias) {
      bias_ = Tensor::zeros({out_ch}, true);
      params.emplace_back(name + ".bias", bias_);
    }
  }
  Tensor forward(const Tensor& x, Mode) override { return conv2d(x, weight_, bias_, stride_, pad_); }

 private:
  Tensor weight_, bias_;
  int stride_, pad_;
};

class BatchNormLayer : public Layer {
 public:
  BatchNormLayer(const std::string& name, int ch, Registry& params, Registry& buffers) {
    gamma_ = Tensor::full({ch}, 1.0f, true);
    beta_ = Tensor::zeros({ch}, true);
    running_mean_ = Tensor::zeros({ch});
    running_var_ = Tensor::full({ch}, 1.0f);
    params.emplace_back(name + ".gamma", gamma_);
    params.emplace_back(name + ".beta", beta_);
    buffers.emplace_back(name + ".running_mean", running_mean_);
    buffers.emplace_back(name + ".running_var", running_var_);
  }
  Tensor forward(const Tensor& x, Mode mode) override {
    return batchnorm2d(x, gamma_, beta_, running_mean_, running_var_, mode == Mode::Training);
  }

 private:
  Tensor gamma_, beta_, running_mean_, running_var_;
};

class ReluLayer : public Layer {
 public:
  Tensor forward(const Tensor& x, Mode) override { return relu(x); }
};

class AvgPoolLayer : public Layer {
 public:
  explicit AvgPoolLayer(int window) : window_(window) {}
  Tensor forward(const Tensor& x, Mode) override { return avgpool2d(x, window_); }

 private:
  int window_;
};

class GlobalAvgPoolLayer : public Layer {
 public:
  Tensor forward(const Tensor& x, Mode) override { return flatten(avgpool2d(x, x.dim(2))); }
};

class FlattenLayer : public Layer {
 public:
  Tensor forward(const Tensor& x, Mode) override { return flatten(x); }
};

class DenseLayer : public Layer {
 public:
  DenseLayer(const std::string& name, int in, int out, Rng& rng, Registry& params) {
    weight_ = init_dense(out, in, rng);
    bias_ = Tensor::zeros({out}, true);
    params.emplace_back(name + ".weight", weight_);
    params.emplace_back(name + ".bias", bias_);
  }
  Tensor forward(const Tensor& x, Mode) override { return dense(x, weight_, bias_); }

 private:
  Tensor weight_, bias_;
};

/// conv-bn-relu-conv-bn with identity (or strided 1x1 conv-bn) skip, relu after add.
class ResidualBlock : public Layer {
 public:
  ResidualBlock(const std::string& name, int in_ch, int out_ch, int stride, Rng& rng,
                Registry& params, Registry& buffers) {
    conv1_ = std::make_unique<ConvLayer>(name + ".conv1", in_ch, out_ch, 3, stride, 1, false, rng,
                                         params);
    bn1_ = std::make_unique<BatchNormLayer>(name + ".bn1", out_ch, params, buffers);
    conv2_ =
        std::make_unique<ConvLayer>(name + ".conv2", out_ch, out_ch, 3, 1, 1, false, rng, params);
    bn2_ = std::make_unique<BatchNormLayer>(name + ".bn2", out_ch, params, buffers);
    if (stride != 1 || in_ch != out_ch) {
      skip_conv_ = std::make_unique<ConvLayer>(name + ".skip", in_ch, out_ch, 1, stride, 0, false,
                                               rng, params);
      skip_bn_ = std::make_unique<BatchNormLayer>(name + ".skip_bn", out_ch, params, buffers);
    }
  }
  Tensor forward(const Tensor& x, Mode mode) override {
    Tensor h = bn1_->forward(conv1_->forward(x, mode), mode);
    h = relu(h);
    h = bn2_->forward(conv2_->forward(h, mode), mode);
    Tensor shortcut = x;
    if (skip_conv_) shortcut = skip_bn_->forward(skip_conv_->forward(x, mode), mode);
    return relu(add(h, shortcut));
  }

 private:
  std::unique_ptr<ConvLayer> conv1_, conv2_, skip_conv_;
  std::unique_ptr<BatchNormLayer> bn1_, bn2_, skip_bn_;
};

}  // namespace layers

std::string ArchConfig::descriptor() const {
  std::ostringstream os;
  os << arch << "(in=" << in_channels << "x" << in_h << "x" << in_w << ",classes=" << classes
     << ",d=" << penultimate_dim << ",width=" << width << ",blocks=" << blocks_per_stage << ")";
  return os.str();
}

ArchConfig ArchConfig::from_descriptor(const std::string& text) {
  ArchConfig c;
  const auto open = text.find('(');
  if (open == std::string::npos || text.back() != ')')
    throw ArtifactError(ArtifactError::Kind::DescriptorMismatch,
                        "unparseable architecture descriptor: " + text);
  c.arch = text.substr(0, open);
  std::string fields = text.substr(open + 1, text.size() - open - 2);
  std::istringstream is(fields);
  std::string kv;
  while (std::getline(is, kv, ',')) {
    const auto eq = kv.find('=');
    if (eq == std::string::npos)
      throw ArtifactError(ArtifactError::Kind::DescriptorMismatch,
                          "unparseable descriptor field: " + kv);
    const std::string key = kv.substr(0, eq);
    const std::string val = kv.substr(eq + 1);
    if (key == "in") {
      if (std::sscanf(val.c_str(), "%dx%dx%d", &c.in_channels, &c.in_h, &c.in_w) != 3)
        throw ArtifactError(ArtifactError::Kind::DescriptorMismatch,
                            "unparseable input extents: " + val);
    } else if (key == "classes") {
      c.classes = std::stoi(val);
    } else if (key == "d") {
      c.penultimate_dim = std::stoi(val);
    } else if (key == "width") {
      c.width = std::stoi(val);
    } else if (key == "blocks") {
      c.blocks_per_stage = std::stoi(val);
    } else {
      throw ArtifactError(ArtifactError::Kind::DescriptorMismatch,
                          "unknown descriptor field: " + key);
    }
  }
  return c;
}

ArchConfig ArchConfig::small_cnn(int in_channels, int in_hw, int classes) {
  ArchConfig c;
  c.arch = "small-cnn";
  c.in_channels = in_channels;
  c.in_h = c.in_w = in_hw;
  c.classes = classes;
  c.penultimate_dim = 128;
  c.width = 8;
  c.blocks_per_stage = 0;
  return c;
}

ArchConfig ArchConfig::slim_resnet(int in_channels, int in_hw, int classes, int width,
                                   int blocks_per_stage) {
  ArchConfig c;
  c.arch = "slim-resnet";
  c.in_channels = in_channels;
  c.in_h = c.in_w = in_hw;
  c.classes = classes;
  c.width = width;
  c.penultimate_dim = 4 * width;
  c.blocks_per_stage = blocks_per_stage;
  return c;
}

Classifier::Classifier(Classifier&&) noexcept = default;
Classifier& Classifier::operator=(Classifier&&) noexcept = default;
Classifier::~Classifier() = default;

Classifier Classifier::build(const ArchConfig& config, std::uint64_t init_seed) {
  using namespace layers;
  Classifier m;
  m.config_ = config;
  Rng rng(Rng::derive(init_seed, 0x1A7E57));

  if (config.arch == "small-cnn") {
    const int w1 = config.width, w2 = 2 * config.width;
    if (config.in_h % 4 != 0 || config.in_w % 4 != 0)
      throw ShapeError("small-cnn needs input extents divisible by 4");
    m.body_.push_back(std::make_unique<ConvLayer>("conv1", config.in_channels, w1, 3, 1, 1, false,
                                                  rng, m.params_));
    m.body_.push_back(std::make_unique<BatchNormLayer>("bn1", w1, m.params_, m.buffers_));
    m.body_.push_back(std::make_unique<ReluLayer>());
    m.body_.push_back(std::make_unique<AvgPoolLayer>(2));
    m.body_.push_back(std::make_unique<ConvLayer>("conv2", w1, w2, 3, 1, 1, false, rng, m.params_));
    m.body_.push_back(std::make_unique<BatchNormLayer>("bn2", w2, m.params_, m.buffers_));
    m.body_.push_back(std::make_unique<ReluLayer>());
    m.body_.push_back(std::make_unique<AvgPoolLayer>(2));
    m.body_.push_back(std::make_unique<FlattenLayer>());
    const int flat = w2 * (config.in_h / 4) * (config.in_w / 4);
    m.body_.push_back(
        std::make_unique<DenseLayer>("fc1", flat, config.penultimate_dim, rng, m.params_));
    m.body_.push_back(std::make_unique<ReluLayer>());
  } else if (config.arch == "slim-resnet") {
    const int w = config.width;
    if (config.penultimate_dim != 4 * w)
      throw ShapeError("slim-resnet penultimate dim must be 4*width");
    m.body_.push_back(std::make_unique<ConvLayer>("stem", config.in_channels, w, 3, 1, 1, false,
                                                  rng, m.params_));
    m.body_.push_back(std::make_unique<BatchNormLayer>("stem_bn", w, m.params_, m.buffers_));
    m.body_.push_back(std::make_unique<ReluLayer>());
    if (config.blocks_per_stage < 1) throw ShapeError("slim-resnet needs blocks_per_stage >= 1");
    int in_ch = w;
    for (int stage = 0; stage < 3; ++stage) {
      const int out_ch = w * (1 << stage);
      for (int blk = 0; blk < config.blocks_per_stage; ++blk) {
        const int stride = (stage > 0 && blk == 0) ? 2 : 1;
        std::ostringstream name;
        name << "stage" << stage + 1 << ".block" << blk + 1;
        m.body_.push_back(std::make_unique<ResidualBlock>(name.str(), in_ch, out_ch, stride, rng,
                                                          m.params_, m.buffers_));
        in_ch = out_ch;
      }
    }
    m.body_.push_back(std::make_unique<GlobalAvgPoolLayer>());
  } else {
    throw ConfigError("unknown architecture: " + config.arch);
  }
  m.head_ = std::make_unique<layers::DenseLayer>("head", config.penultimate_dim, config.classes,
                                                 rng, m.params_);
  return m;
}

void Classifier::check_input(const Tensor& x) const {
  if (x.rank() != 4 || x.dim(1) != config_.in_channels || x.dim(2) != config_.in_h ||
      x.dim(3) != config_.in_w)
    throw ShapeError("input " + shape_str(x.shape()) + " does not match architecture input [Bx" +
                     std::to_string(config_.in_channels) + "x" + std::to_string(config_.in_h) +
                     "x" + std::to_string(config_.in_w) + "]");
}

Tensor Classifier::penultimate(const Tensor& x) {
  check_input(x);
  Tensor h = x;
  for (auto& layer : body_) h = layer->forward(h, mode_);
  return h;
}

Tensor Classifier::head(const Tensor& z) {
  if (z.rank() != 2 || z.dim(1) != config_.penultimate_dim)
    throw ShapeError("head expects [Bx" + std::to_string(config_.penultimate_dim) + "], got " +
                     shape_str(z.shape()));
  return head_->forward(z, mode_);
}

Tensor Classifier::forward(const Tensor& x) { return head(penultimate(x)); }

Tensor Classifier::masked_forward(const Tensor& x, const Tensor& keep) {
  Tensor z = penultimate(x);
  const int d = config_.penultimate_dim;
  Tensor gate = keep;
  if (keep.rank() == 1) {
    if (keep.dim(0) != d)
      throw ShapeError("keep vector length " + std::to_string(keep.dim(0)) +
                       " does not match penultimate dim " + std::to_string(d));
    std::vector<float> tiled(static_cast<std::size_t>(z.dim(0)) * d);
    for (int b = 0; b < z.dim(0); ++b)
      std::copy(keep.data().begin(), keep.data().end(),
                tiled.begin() + static_cast<std::size_t>(b) * d);
    gate = Tensor({z.dim(0), d}, std::move(tiled));
  } else if (keep.rank() != 2 || keep.dim(0) != z.dim(0) || keep.dim(1) != d) {
    throw ShapeError("keep matrix " + shape_str(keep.shape()) + " does not match activations " +
                     shape_str(z.shape()));
  }
  if (gate.requires_grad())
    throw ShapeError("the keep gate is side information and must not require gradients");
  return head(mul(z, gate));
}

Tensor Classifier::masked_forward(const Tensor& x, const std::vector<float>& keep) {
  return masked_forward(x, Tensor({static_cast<int>(keep.size())}, keep));
}

void Classifier::zero_grads() {
  for (auto& [name, p] : params_) p.zero_grad();
}

void Classifier::set_parameters_trainable(bool trainable) {
  for (auto& [name, p] : params_) p.set_requires_grad(trainable);
}

std::vector<int> argmax_labels(const Tensor& logits) {
  if (logits.rank() != 2) throw ShapeError("argmax_labels expects [Bxc]");
  const int batch = logits.dim(0), classes = logits.dim(1);
  std::vector<int> out(batch);
  const float* p = logits.data().data();
  for (int b = 0; b < batch; ++b) {
    const float* row = p + static_cast<std::size_t>(b) * classes;
    int best = 0;
    for (int c = 1; c < classes; ++c)
      if (row[c] > row[best]) best = c;
    out[b] = best;
  }
  return out;
}

}  // namespace lmrc
