#include "lmrc/data.hpp"

#include <algorithm>
#include <cmath>
#include <fstream>

namespace lmrc {

namespace {

constexpr std::uint32_t kImagesMagic = 0x00000803;
constexpr std::uint32_t kLabelsMagic = 0x00000801;

std::string read_file(const std::string& path) {
  std::ifstream f(path, std::ios::binary);
  if (!f) throw DataError(DataError::Kind::Io, "cannot open " + path);
  return std::string((std::istreambuf_iterator<char>(f)), std::istreambuf_iterator<char>());
}

std::uint32_t be32(const std::string& buf, std::size_t pos) {
  std::uint32_t v = 0;
  for (int i = 0; i < 4; ++i)
    v = (v << 8) | static_cast<unsigned char>(buf[pos + i]);
  return v;
}

void put_be32(std::ofstream& f, std::uint32_t v) {
  for (int i = 3; i >= 0; --i) f.put(static_cast<char>((v >> (8 * i)) & 0xFF));
}

}  // namespace

Dataset Dataset::take(int count) const {
  if (count < 0 || count > size()) throw ConfigError("Dataset::take: count out of range");
  Dataset out;
  out.split = split;
  out.classes = classes;
  out.labels.assign(labels.begin(), labels.begin() + count);
  if (count == 0) return out;
  const std::size_t stride = static_cast<std::size_t>(channels()) * height() * width();
  std::vector<float> data(images.data().begin(),
                          images.data().begin() + static_cast<std::size_t>(count) * stride);
  out.images = Tensor({count, channels(), height(), width()}, std::move(data));
  return out;
}

Dataset load_mnist(const std::string& images_path, const std::string& labels_path) {
  const std::string ibuf = read_file(images_path);
  if (ibuf.size() < 16) throw DataError(DataError::Kind::Truncated, images_path + " is truncated");
  if (be32(ibuf, 0) != kImagesMagic)
    throw DataError(DataError::Kind::BadMagic,
                    images_path + " has wrong magic for an IDX image file");
  const std::uint32_t n = be32(ibuf, 4);
  const std::uint32_t h = be32(ibuf, 8);
  const std::uint32_t w = be32(ibuf, 12);
  const std::size_t expected = 16 + static_cast<std::size_t>(n) * h * w;
  if (ibuf.size() != expected)
    throw DataError(DataError::Kind::Truncated,
                    images_path + " payload length does not match header counts");

  const std::string lbuf = read_file(labels_path);
  if (lbuf.size() < 8) throw DataError(DataError::Kind::Truncated, labels_path + " is truncated");
  if (be32(lbuf, 0) != kLabelsMagic)
    throw DataError(DataError::Kind::BadMagic,
                    labels_path + " has wrong magic for an IDX label file");
  const std::uint32_t ln = be32(lbuf, 4);
  if (lbuf.size() != 8 + static_cast<std::size_t>(ln))
    throw DataError(DataError::Kind::Truncated,
                    labels_path + " payload length does not match header count");
  if (ln != n)
    throw DataError(DataError::Kind::CountMismatch,
                    "image count " + std::to_string(n) + " does not match label count " +
                        std::to_string(ln));

  Dataset d;
  d.classes = 10;
  d.labels.resize(n);
  for (std::uint32_t i = 0; i < n; ++i)
    d.labels[i] = static_cast<unsigned char>(lbuf[8 + i]);
  if (n == 0) {
    warnings::bump(warnings::Counter::EmptyDataset);
    return d;
  }
  std::vector<float> pixels(static_cast<std::size_t>(n) * h * w);
  constexpr float kScale = 1.0f / 255.0f;
  for (std::size_t i = 0; i < pixels.size(); ++i)
    pixels[i] = kScale * static_cast<unsigned char>(ibuf[16 + i]);
  d.images = Tensor({static_cast<int>(n), 1, static_cast<int>(h), static_cast<int>(w)},
                    std::move(pixels));
  return d;
}

Dataset load_cifar_binary(const std::vector<std::string>& paths, CifarVariant variant) {
  const std::size_t record =
      variant == CifarVariant::Cifar10 ? 3073 : 3074;  // label byte(s) + 3*32*32
  const int label_offset = variant == CifarVariant::Cifar10 ? 0 : 1;  // fine label
  std::vector<int> labels;
  std::vector<float> pixels;
  constexpr float kScale = 1.0f / 255.0f;
  for (const std::string& path : paths) {
    const std::string buf = read_file(path);
    if (buf.size() % record != 0)
      throw DataError(DataError::Kind::BadRecordSize,
                      path + " length is not a multiple of the record size " +
                          std::to_string(record));
    const std::size_t count = buf.size() / record;
    for (std::size_t i = 0; i < count; ++i) {
      const std::size_t base = i * record;
      labels.push_back(static_cast<unsigned char>(buf[base + label_offset]));
      const std::size_t pix = base + label_offset + 1;
      for (std::size_t p = 0; p < 3072; ++p)
        pixels.push_back(kScale * static_cast<unsigned char>(buf[pix + p]));
    }
  }
  Dataset d;
  d.classes = variant == CifarVariant::Cifar10 ? 10 : 100;
  const int n = static_cast<int>(labels.size());
  d.labels = std::move(labels);
  if (n == 0) {
    warnings::bump(warnings::Counter::EmptyDataset);
    return d;
  }
  d.images = Tensor({n, 3, 32, 32}, std::move(pixels));
  return d;
}

std::pair<Dataset, Dataset> split_train_validation(const Dataset& dataset, int validation_size) {
  const int n = dataset.size();
  if (validation_size < 0 || validation_size >= n)
    throw ConfigError("validation_size " + std::to_string(validation_size) +
                      " must be in [0, dataset size)");
  const int train_n = n - validation_size;
  const std::size_t stride =
      static_cast<std::size_t>(dataset.channels()) * dataset.height() * dataset.width();

  Dataset train = dataset.take(train_n);
  train.split = Split::Train;

  Dataset val;
  val.split = Split::Validation;
  val.classes = dataset.classes;
  val.labels.assign(dataset.labels.begin() + train_n, dataset.labels.end());
  std::vector<float> vdata(dataset.images.data().begin() + static_cast<std::size_t>(train_n) * stride,
                           dataset.images.data().end());
  if (validation_size == 0) {
    val.images = Tensor();
  } else {
    val.images = Tensor({validation_size, dataset.channels(), dataset.height(), dataset.width()},
                        std::move(vdata));
  }
  return {std::move(train), std::move(val)};
}

void flip_horizontal(std::vector<float>& image, int channels, int h, int w) {
  for (int c = 0; c < channels; ++c) {
    float* plane = image.data() + static_cast<std::size_t>(c) * h * w;
    for (int y = 0; y < h; ++y) {
      float* row = plane + static_cast<std::size_t>(y) * w;
      std::reverse(row, row + w);
    }
  }
}

void crop_with_pad(std::vector<float>& image, int channels, int h, int w, int pad, int off_y,
                   int off_x) {
  if (pad == 0) return;
  std::vector<float> out(image.size(), 0.0f);
  for (int c = 0; c < channels; ++c) {
    const float* src = image.data() + static_cast<std::size_t>(c) * h * w;
    float* dst = out.data() + static_cast<std::size_t>(c) * h * w;
    for (int y = 0; y < h; ++y) {
      const int sy = y + off_y - pad;  // coordinate in the unpadded source
      if (sy < 0 || sy >= h) continue;
      for (int x = 0; x < w; ++x) {
        const int sx = x + off_x - pad;
        if (sx < 0 || sx >= w) continue;
        dst[static_cast<std::size_t>(y) * w + x] = src[static_cast<std::size_t>(sy) * w + sx];
      }
    }
  }
  image = std::move(out);
}

Batch make_batch(const Dataset& dataset, const std::vector<int>& indices,
                 const AugmentationPolicy& policy, Rng* rng) {
  const int c = dataset.channels(), h = dataset.height(), w = dataset.width();
  const std::size_t stride = static_cast<std::size_t>(c) * h * w;
  const bool augment = (policy.horizontal_flip || policy.crop_pad > 0) && rng != nullptr;
  std::vector<float> data(indices.size() * stride);
  Batch batch;
  batch.y.reserve(indices.size());
  std::vector<float> scratch(stride);
  for (std::size_t i = 0; i < indices.size(); ++i) {
    const int idx = indices[i];
    batch.y.push_back(dataset.labels.at(idx));
    const float* src = dataset.images.data().data() + static_cast<std::size_t>(idx) * stride;
    std::copy(src, src + stride, scratch.begin());
    if (augment) {
      if (policy.horizontal_flip && rng->uniform() < 0.5f) flip_horizontal(scratch, c, h, w);
      if (policy.crop_pad > 0) {
        const int off_y = rng->uniform_int(2 * policy.crop_pad + 1);
        const int off_x = rng->uniform_int(2 * policy.crop_pad + 1);
        crop_with_pad(scratch, c, h, w, policy.crop_pad, off_y, off_x);
      }
    }
    std::copy(scratch.begin(), scratch.end(), data.begin() + i * stride);
  }
  batch.x = Tensor({static_cast<int>(indices.size()), c, h, w}, std::move(data));
  return batch;
}

namespace {

// Seven-segment style strokes on a 28x28 canvas. Segment corners:
//   A top, B top-right, C bottom-right, D bottom, E bottom-left, F top-left,
//   G middle.
struct Seg {
  float x0, y0, x1, y1;
};

const Seg kSegments[7] = {
    {8, 5, 19, 5},    // A
    {19, 5, 19, 14},  // B
    {19, 14, 19, 23}, // C
    {8, 23, 19, 23},  // D
    {8, 14, 8, 23},   // E
    {8, 5, 8, 14},    // F
    {8, 14, 19, 14},  // G
};

const int kDigitSegments[10] = {
    0b0111111,  // 0: ABCDEF
    0b0000110,  // 1: BC
    0b1011011,  // 2: ABDEG
    0b1001111,  // 3: ABCDG
    0b1100110,  // 4: BCFG
    0b1101101,  // 5: ACDFG
    0b1111101,  // 6: ACDEFG
    0b0000111,  // 7: ABC
    0b1111111,  // 8
    0b1101111,  // 9: ABCDFG
};

void draw_segment(std::vector<float>& img, const Seg& s, float dx, float dy, float intensity) {
  const float x0 = s.x0 + dx, y0 = s.y0 + dy, x1 = s.x1 + dx, y1 = s.y1 + dy;
  const float len = std::hypot(x1 - x0, y1 - y0);
  const int samples = static_cast<int>(len * 3.0f) + 1;
  for (int i = 0; i <= samples; ++i) {
    const float t = static_cast<float>(i) / samples;
    const float cx = x0 + t * (x1 - x0);
    const float cy = y0 + t * (y1 - y0);
    // stamp a thick dot: solid 3x3 with a soft 1-pixel rim
    for (int oy = -2; oy <= 2; ++oy)
      for (int ox = -2; ox <= 2; ++ox) {
        const int px = static_cast<int>(std::lround(cx)) + ox;
        const int py = static_cast<int>(std::lround(cy)) + oy;
        if (px < 0 || px >= 28 || py < 0 || py >= 28) continue;
        const int ring = std::max(std::abs(ox), std::abs(oy));
        const float fall = ring <= 1 ? 1.0f : 0.35f;
        float& p = img[static_cast<std::size_t>(py) * 28 + px];
        p = std::max(p, intensity * fall);
      }
  }
}

}  // namespace

Dataset make_synthetic_digits(int count, std::uint64_t seed, Split split) {
  if (count < 0) throw ConfigError("make_synthetic_digits: count must be >= 0");
  Dataset d;
  d.split = split;
  d.classes = 10;
  if (count == 0) {
    warnings::bump(warnings::Counter::EmptyDataset);
    return d;
  }
  d.labels.resize(count);
  std::vector<float> pixels(static_cast<std::size_t>(count) * 28 * 28, 0.0f);
  for (int i = 0; i < count; ++i) {
    Rng rng(Rng::derive(seed, static_cast<std::uint64_t>(i)));
    const int digit = rng.uniform_int(10);
    d.labels[i] = digit;
    std::vector<float> img(28 * 28, 0.0f);
    const float dx = rng.uniform(-2.0f, 2.0f);
    const float dy = rng.uniform(-2.0f, 2.0f);
    // wide per-sample contrast spread: bright glyphs survive perturbations
    // within the usual 0.3 budget, dim ones can be repainted by an attacker,
    // while everything stays easy to classify unperturbed
    const float intensity = rng.uniform(0.55f, 1.0f);
    for (int s = 0; s < 7; ++s)
      if (kDigitSegments[digit] & (1 << s)) draw_segment(img, kSegments[s], dx, dy, intensity);
    // background speckle plus uniform sensor noise
    for (int s = 0; s < 4; ++s) {
      const int px = rng.uniform_int(28), py = rng.uniform_int(28);
      img[static_cast<std::size_t>(py) * 28 + px] =
          std::max(img[static_cast<std::size_t>(py) * 28 + px], rng.uniform(0.15f, 0.3f));
    }
    float* out = pixels.data() + static_cast<std::size_t>(i) * 28 * 28;
    constexpr float kScale = 1.0f / 255.0f;  // same arithmetic as the IDX loader
    for (int p = 0; p < 28 * 28; ++p) {
      const float noisy = img[p] + rng.uniform(0.0f, 0.05f);
      // quantize to byte resolution so IDX round trips are lossless
      out[p] = kScale * std::round(std::clamp(noisy, 0.0f, 1.0f) * 255.0f);
    }
  }
  d.images = Tensor({count, 1, 28, 28}, std::move(pixels));
  return d;
}

void write_idx_images(const std::string& path, const Dataset& dataset) {
  if (dataset.channels() != 1)
    throw ConfigError("write_idx_images supports single-channel images only");
  std::ofstream f(path, std::ios::binary | std::ios::trunc);
  if (!f) throw DataError(DataError::Kind::Io, "cannot open " + path + " for writing");
  put_be32(f, kImagesMagic);
  put_be32(f, static_cast<std::uint32_t>(dataset.size()));
  put_be32(f, static_cast<std::uint32_t>(dataset.height()));
  put_be32(f, static_cast<std::uint32_t>(dataset.width()));
  for (float v : dataset.images.data())
    f.put(static_cast<char>(std::lround(std::clamp(v, 0.0f, 1.0f) * 255.0f)));
  if (!f) throw DataError(DataError::Kind::Io, "short write to " + path);
}

void write_idx_labels(const std::string& path, const std::vector<int>& labels) {
  std::ofstream f(path, std::ios::binary | std::ios::trunc);
  if (!f) throw DataError(DataError::Kind::Io, "cannot open " + path + " for writing");
  put_be32(f, kLabelsMagic);
  put_be32(f, static_cast<std::uint32_t>(labels.size()));
  for (int l : labels) f.put(static_cast<char>(l));
  if (!f) throw DataError(DataError::Kind::Io, "short write to " + path);
}

}  // namespace lmrc
