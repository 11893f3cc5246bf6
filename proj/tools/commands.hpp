#pragma once

#include <string>
#include <vector>

namespace lmrc::cli {

int cmd_train(const std::string& config_path);
int cmd_evaluate(const std::string& checkpoint_path, const std::string& config_path,
                 const std::vector<std::string>& modes);
int cmd_diagnose_latents(const std::string& checkpoint_path, const std::string& config_path,
                         int sample_count);
int cmd_selftest(std::uint64_t seed, const std::string& inject_fault);

}  // namespace lmrc::cli
