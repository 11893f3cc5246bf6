#include "lmrc/masking.hpp"

#include <algorithm>
#include <cmath>
#include <numeric>

namespace lmrc {

std::vector<float> deviation(std::span<const float> z_ref, std::span<const float> z_obs) {
  if (z_ref.size() != z_obs.size())
    throw ShapeError("deviation: vector lengths differ (" + std::to_string(z_ref.size()) +
                     " vs " + std::to_string(z_obs.size()) + ")");
  std::vector<float> sigma(z_ref.size());
  for (std::size_t i = 0; i < sigma.size(); ++i) sigma[i] = std::fabs(z_obs[i] - z_ref[i]);
  return sigma;
}

LatentMask top_k_mask(std::span<const float> u, int k, MaskSource source) {
  const int d = static_cast<int>(u.size());
  if (k < 0 || k > d)
    throw ShapeError("top_k_mask: k = " + std::to_string(k) + " out of range [0, " +
                     std::to_string(d) + "]");
  std::vector<int> order(d);
  std::iota(order.begin(), order.end(), 0);
  auto larger = [&u](int a, int b) { return u[a] > u[b] || (u[a] == u[b] && a < b); };
  if (k > 0 && k < d) std::nth_element(order.begin(), order.begin() + (k - 1), order.end(), larger);
  LatentMask mask;
  mask.bits.assign(d, 0);
  mask.k = k;
  mask.source = source;
  for (int i = 0; i < k; ++i) mask.bits[order[i]] = 1;
  return mask;
}

std::vector<float> keep_vector(const LatentMask& mask) {
  std::vector<float> keep(mask.bits.size());
  for (std::size_t i = 0; i < keep.size(); ++i) keep[i] = mask.bits[i] ? 0.0f : 1.0f;
  return keep;
}

std::vector<LatentMask> masks_from_reference(const Tensor& z_ref, const Tensor& z_obs, int k,
                                             MaskSource source) {
  if (z_ref.shape() != z_obs.shape() || z_ref.rank() != 2)
    throw ShapeError("masks_from_reference expects matching [B,d] activations");
  const int batch = z_ref.dim(0), d = z_ref.dim(1);
  std::vector<LatentMask> masks;
  masks.reserve(batch);
  for (int b = 0; b < batch; ++b) {
    std::span<const float> ref(z_ref.data().data() + static_cast<std::size_t>(b) * d, d);
    std::span<const float> obs(z_obs.data().data() + static_cast<std::size_t>(b) * d, d);
    masks.push_back(top_k_mask(deviation(ref, obs), k, source));
  }
  return masks;
}

std::vector<LatentMask> oracle_masks(Classifier& model, const Tensor& x_clean, const Tensor& x_obs,
                                     int k) {
  EvaluationScope eval(model);
  ParameterFreeze freeze(model);
  Tensor z_ref = model.penultimate(x_clean.detached());
  Tensor z_obs = model.penultimate(x_obs.detached());
  return masks_from_reference(z_ref, z_obs, k, MaskSource::Oracle);
}

std::vector<LatentMask> cca_masks(Classifier& model, const Tensor& x_obs, const AttackSpec& spec,
                                  int k) {
  Tensor x_hat = cca(model, x_obs, spec, CcaCenter::Observed);
  EvaluationScope eval(model);
  ParameterFreeze freeze(model);
  Tensor z_ref = model.penultimate(x_hat);
  Tensor z_obs = model.penultimate(x_obs.detached());
  return masks_from_reference(z_ref, z_obs, k, MaskSource::CcaReference);
}

Tensor keep_matrix(const std::vector<LatentMask>& masks) {
  if (masks.empty()) throw ShapeError("keep_matrix: empty mask list");
  const int batch = static_cast<int>(masks.size());
  const int d = static_cast<int>(masks[0].bits.size());
  std::vector<float> data(static_cast<std::size_t>(batch) * d);
  for (int b = 0; b < batch; ++b) {
    if (static_cast<int>(masks[b].bits.size()) != d)
      throw ShapeError("keep_matrix: inconsistent mask lengths");
    for (int i = 0; i < d; ++i)
      data[static_cast<std::size_t>(b) * d + i] = masks[b].bits[i] ? 0.0f : 1.0f;
  }
  return Tensor({batch, d}, std::move(data));
}

int sparsity(std::span<const float> z, float tol) {
  if (tol < 0.0f) throw ConfigError("sparsity tolerance must be >= 0");
  int count = 0;
  for (float v : z)
    if (std::fabs(v) > tol) ++count;
  return count;
}

float cosine_similarity(std::span<const float> a, std::span<const float> b) {
  if (a.size() != b.size()) throw ShapeError("cosine_similarity: vector lengths differ");
  double dot = 0.0, na = 0.0, nb = 0.0;
  for (std::size_t i = 0; i < a.size(); ++i) {
    dot += static_cast<double>(a[i]) * b[i];
    na += static_cast<double>(a[i]) * a[i];
    nb += static_cast<double>(b[i]) * b[i];
  }
  if (na == 0.0 || nb == 0.0) {
    warnings::bump(warnings::Counter::ZeroVectorCosine);
    return 0.0f;
  }
  return static_cast<float>(dot / (std::sqrt(na) * std::sqrt(nb)));
}

ConsistencyProfile consistency_profile(std::vector<float> sigma, float beta) {
  ConsistencyProfile p;
  p.beta = beta;
  for (int i = 0; i < static_cast<int>(sigma.size()); ++i) {
    if (sigma[i] <= beta)
      p.consistent.push_back(i);
    else
      p.inconsistent.push_back(i);
  }
  p.sigma = std::move(sigma);
  return p;
}

float default_beta(const Tensor& z_batch) {
  double acc = 0.0;
  for (float v : z_batch.data()) acc += std::fabs(v);
  return z_batch.size() ? 0.1f * static_cast<float>(acc / static_cast<double>(z_batch.size()))
                        : 0.0f;
}

}  // namespace lmrc
