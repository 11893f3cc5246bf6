#pragma once

#include <map>
#include <string>
#include <vector>

#include "lmrc/data.hpp"
#include "lmrc/model.hpp"
#include "lmrc/training.hpp"

namespace lmrc::cli {

/// Flat key = value configuration file ('#' comments, unknown keys rejected).
std::map<std::string, std::string> parse_config_file(const std::string& path);
std::map<std::string, std::string> parse_config_text(const std::string& text);

/// One fully resolved run: training contract plus artifact locations.
struct ResolvedRun {
  std::string preset = "mnist-small";
  std::string dataset = "mnist";
  std::string out_dir = "runs/out";
  ArchConfig arch;
  RunConfig run;

  /// Canonical echo written to out_dir/config.resolved.
  std::string canonical_text() const;
};

/// Expands the configuration into runs (gamma/k/delta accept comma-separated
/// sweep lists; single values yield exactly one run). Sweep runs land in
/// subdirectories of out_dir named after the swept values.
std::vector<ResolvedRun> resolve_config(const std::map<std::string, std::string>& file);

/// Accepts plain decimals and p/q fractions ("8/255").
float parse_float_value(const std::string& key, const std::string& text);

struct LoadedData {
  Dataset train;       // before validation split
  Dataset test;
  int classes = 10;
};

/// Dataset ids: synth[:N[/M]], mnist[:dir], cifar10[:dir], cifar100[:dir].
LoadedData load_dataset(const std::string& id);

/// Adjusts architecture input extents and class count to the dataset.
void fit_arch_to_data(ArchConfig& arch, const LoadedData& data);

}  // namespace lmrc::cli
