#pragma once

#include <string>
#include <utility>
#include <vector>

#include "lmrc/rng.hpp"
#include "lmrc/tensor.hpp"

namespace lmrc {

enum class Split { Train, Validation, Test };

struct Dataset {
  Tensor images;  // [N,C,H,W], values in [0,1]
  std::vector<int> labels;
  Split split = Split::Train;
  int classes = 10;

  int size() const { return images.defined() ? images.dim(0) : 0; }
  int channels() const { return images.dim(1); }
  int height() const { return images.dim(2); }
  int width() const { return images.dim(3); }

  /// First `count` samples, preserving order.
  Dataset take(int count) const;
};

/// IDX-format loaders (big-endian headers, magic 0x00000803 / 0x00000801).
/// Pixels are scaled by 1/255.
Dataset load_mnist(const std::string& images_path, const std::string& labels_path);

enum class CifarVariant { Cifar10, Cifar100 };

/// CIFAR binary batches: 3073-byte records (label + RGB planes) for CIFAR-10,
/// 3074 bytes (coarse + fine label, fine kept) for CIFAR-100.
Dataset load_cifar_binary(const std::vector<std::string>& paths, CifarVariant variant);

/// Validation = last validation_size samples in file order; train = remainder.
std::pair<Dataset, Dataset> split_train_validation(const Dataset& dataset, int validation_size);

struct AugmentationPolicy {
  bool horizontal_flip = false;
  int crop_pad = 0;  // zero-pad then crop back at a random offset
};

struct Batch {
  Tensor x;
  std::vector<int> y;
};

/// Assembles (and optionally augments) the samples at `indices`.
Batch make_batch(const Dataset& dataset, const std::vector<int>& indices,
                 const AugmentationPolicy& policy, Rng* rng);

/// Flip/crop a single image in place; exposed for tests.
void flip_horizontal(std::vector<float>& image, int channels, int h, int w);
void crop_with_pad(std::vector<float>& image, int channels, int h, int w, int pad, int off_y,
                   int off_x);

/// Deterministic desk-scale dataset: 28x28 grayscale digit glyphs with
/// per-sample jitter, blur, and noise. Same (count, seed) => same bytes.
Dataset make_synthetic_digits(int count, std::uint64_t seed, Split split = Split::Train);

/// IDX writers (test fixtures and offline dataset materialization).
void write_idx_images(const std::string& path, const Dataset& dataset);
void write_idx_labels(const std::string& path, const std::vector<int>& labels);

}  // namespace lmrc
