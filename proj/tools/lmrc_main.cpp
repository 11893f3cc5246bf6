#include <CLI11.hpp>
#include <iostream>

#include "commands.hpp"
#include "lmrc/common.hpp"

int main(int argc, char** argv) {
  CLI::App app{"latent-masking robustness toolkit"};
  app.require_subcommand(1);

  std::string config_path, checkpoint_path, inject_fault;
  std::vector<std::string> modes{"clean", "pgd"};
  int sample_count = 4;
  std::uint64_t selftest_seed = 1;

  auto* train = app.add_subcommand("train", "train a model from a config file");
  train->add_option("--config", config_path, "key = value config file")->required();

  auto* eval = app.add_subcommand("evaluate", "evaluate a checkpoint under attack");
  eval->add_option("--checkpoint", checkpoint_path, "checkpoint to evaluate")->required();
  eval->add_option("--config", config_path, "key = value config file")->required();
  eval->add_option("--modes", modes,
                   "evaluation modes (clean, pgd, pgd_with_lm_oracle, pgd_with_lm_cca, "
                   "pgd_with_lc_cca)")
      ->delimiter(',');

  auto* diag = app.add_subcommand("diagnose-latents", "dump penultimate activations to CSV");
  diag->add_option("--checkpoint", checkpoint_path, "checkpoint to inspect")->required();
  diag->add_option("--config", config_path, "key = value config file")->required();
  diag->add_option("--samples", sample_count, "number of test samples to dump");

  auto* self = app.add_subcommand("selftest", "run the built-in verification suites");
  self->add_option("--seed", selftest_seed, "seed for the randomized checks");
  self->add_option("--inject-fault", inject_fault, "corrupt the named op's gradient (testing)")
      ->group("");  // hidden

  CLI11_PARSE(app, argc, argv);

  try {
    if (train->parsed()) return lmrc::cli::cmd_train(config_path);
    if (eval->parsed()) return lmrc::cli::cmd_evaluate(checkpoint_path, config_path, modes);
    if (diag->parsed())
      return lmrc::cli::cmd_diagnose_latents(checkpoint_path, config_path, sample_count);
    if (self->parsed()) return lmrc::cli::cmd_selftest(selftest_seed, inject_fault);
  } catch (const lmrc::ConfigError& e) {
    std::cerr << "config error: " << e.what() << std::endl;
    return 2;
  } catch (const lmrc::ArtifactError& e) {
    std::cerr << "artifact error: " << e.what() << std::endl;
    return 3;
  } catch (const lmrc::DataError& e) {
    std::cerr << "data error: " << e.what() << std::endl;
    return 3;
  } catch (const std::exception& e) {
    std::cerr << "error: " << e.what() << std::endl;
    return 1;
  }
  return 0;
}
