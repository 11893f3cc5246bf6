#pragma once

#include <cstdint>
#include <span>
#include <vector>

#include "lmrc/attacks.hpp"
#include "lmrc/model.hpp"

namespace lmrc {

enum class MaskSource { Oracle, CcaReference };

/// Binary mask over the d penultimate features with exact popcount k.
/// bits[i] == 1 marks a feature selected for removal.
struct LatentMask {
  std::vector<std::uint8_t> bits;
  int k = 0;
  MaskSource source = MaskSource::Oracle;
};

/// sigma_i = |obs_i - ref_i|.
std::vector<float> deviation(std::span<const float> z_ref, std::span<const float> z_obs);

/// Selects the k largest entries of u; ties break toward the smaller index.
LatentMask top_k_mask(std::span<const float> u, int k, MaskSource source = MaskSource::Oracle);

/// 1_d - bits: the gate applied to the penultimate activations.
std::vector<float> keep_vector(const LatentMask& mask);

/// One mask per sample from oracle deviations |z(x_obs) - z(x_clean)|.
std::vector<LatentMask> oracle_masks(Classifier& model, const Tensor& x_clean,
                                     const Tensor& x_obs, int k);

/// One mask per sample with the reference produced by CCA from the observed
/// sample alone (self-supervised).
std::vector<LatentMask> cca_masks(Classifier& model, const Tensor& x_obs, const AttackSpec& spec,
                                  int k);

/// Per-sample masks against a precomputed reference batch z_ref [B,d].
std::vector<LatentMask> masks_from_reference(const Tensor& z_ref, const Tensor& z_obs, int k,
                                             MaskSource source);

/// Stacks keep vectors into a [B,d] gate tensor for masked_forward.
Tensor keep_matrix(const std::vector<LatentMask>& masks);

/// Count of entries with |z_i| > tol.
int sparsity(std::span<const float> z, float tol = 1e-6f);

/// dot(a,b)/(|a||b|); 0 with a warning when either vector is zero.
float cosine_similarity(std::span<const float> a, std::span<const float> b);

/// Diagnostic partition of features into consistent (sigma <= beta) and
/// inconsistent index sets.
struct ConsistencyProfile {
  std::vector<float> sigma;
  float beta = 0.0f;
  std::vector<int> consistent;
  std::vector<int> inconsistent;
};

ConsistencyProfile consistency_profile(std::vector<float> sigma, float beta);

/// Default diagnostic threshold: 0.1 * mean(|z|) over the batch.
float default_beta(const Tensor& z_batch);

}  // namespace lmrc
