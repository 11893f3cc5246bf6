#pragma once

#include <cstdint>
#include <string>
#include <vector>

namespace lmrc::selfcheck {

struct CheckResult {
  std::string name;
  bool passed = false;
  std::string detail;
};

/// Central finite differences in double precision against analytic gradients
/// for every differentiable operation; `configs_per_op` random shapes/values
/// per operation (relative error < 1e-3, kinks perturbed away by 1e-2).
std::vector<CheckResult> run_gradient_checks(std::uint64_t seed, int configs_per_op = 100);

/// top_k_mask against a sort-based oracle: exhaustive over quantized grids
/// for d <= 8 plus `random_cases` random vectors.
std::vector<CheckResult> run_topk_checks(std::uint64_t seed, int random_cases = 10000);

/// Projection idempotence and ball/range membership (<= 1 ulp) for every
/// iterate across `instances` random PGD and CCA attacks.
std::vector<CheckResult> run_geometry_checks(std::uint64_t seed, int instances = 1000);

/// Checkpoint round trips, truncation, and corruption detection.
std::vector<CheckResult> run_serialization_checks(std::uint64_t seed,
                                                  const std::string& scratch_dir);

std::vector<CheckResult> run_all(std::uint64_t seed, const std::string& scratch_dir);

/// Test hook: corrupts the analytic gradient of the named operation inside
/// the gradient-check harness. Empty name clears the fault.
void inject_gradcheck_fault(const std::string& op_name);

}  // namespace lmrc::selfcheck
