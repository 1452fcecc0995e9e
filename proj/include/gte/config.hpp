#pragma once

#include <iosfwd>
#include <map>
#include <string>
#include <vector>

#include "gte/model.hpp"
#include "gte/types.hpp"

namespace gte {

// Flat "key = value" document; '#' lines are comments. Unknown keys are
// rejected against the per-command registry. Round-trips losslessly.
struct RunConfig {
  std::map<std::string, std::string> values;

  bool has(const std::string& key) const { return values.count(key) > 0; }
  std::string get_str(const std::string& key, const std::string& fallback) const;
  Index get_int(const std::string& key, Index fallback) const;
  Real get_real(const std::string& key, Real fallback) const;
  bool get_bool(const std::string& key, bool fallback) const;
  std::vector<Index> get_int_list(const std::string& key,
                                  const std::vector<Index>& fallback) const;
  void set(const std::string& key, const std::string& value) { values[key] = value; }
};

RunConfig parse_config(std::istream& in);
RunConfig load_config(const std::string& path);
std::string serialize_config(const RunConfig& cfg);

// Throws ConfigError naming the first unknown key.
void validate_keys(const RunConfig& cfg, const std::string& command);

// Builds the training configuration; GT_SEED in the environment overrides
// the config seed. Validates divisibility constraints.
TrainConfig to_train_config(const RunConfig& cfg);

// Loads the dataset named by the config: either generated SBM
// (dataset = sbm) or files (dataset = file + edge_list/features/labels).
Dataset load_dataset(const RunConfig& cfg);

}  // namespace gte
