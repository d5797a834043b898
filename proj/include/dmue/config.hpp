#pragma once

// Flat "key = value" configuration with '#' comments. Later assignments
// (and command-line overrides) replace earlier ones.

#include <cstdint>
#include <iosfwd>
#include <map>
#include <stdexcept>
#include <string>
#include <utility>
#include <vector>

#include "dmue/datagen.hpp"
#include "dmue/trainer.hpp"

namespace dmue {

class ConfigError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

struct DataConfig {
  int classes = 4;
  int dim = 16;
  std::size_t samples_per_class = 400;
  std::size_t test_per_class = 100;
  double spread = 1.0;
  double separation = 4.0;
  double confusable_distance = 1.5;
  std::vector<std::pair<int, int>> confusable_pairs = {{0, 1}, {2, 3}};
  double noise_ratio = 0.0;

  SyntheticSpec to_spec(std::uint64_t seed) const;
};

struct ExperimentSettings {
  std::vector<double> ratios = {0.1, 0.2, 0.3};
  std::vector<std::uint64_t> seeds = {1, 2, 3};
  std::string output_dir = ".";
  int jobs = 1;
  double ablation_ratio = 0.3;
};

struct RunConfig {
  DataConfig data;
  TrainConfig train;
  ExperimentSettings experiment;
  bool seed_given = false;
  bool seeds_given = false;
};

/// Ordered key/value pairs as read from text.
using KeyValues = std::vector<std::pair<std::string, std::string>>;

KeyValues parse_key_values(std::istream& in, const std::string& origin = "config");
KeyValues read_key_values(const std::string& path);

/// Every recognised key, in rendering order.
const std::vector<std::string>& config_keys();

/// Throws ConfigError for an unknown key or a malformed value.
void apply_setting(RunConfig& config, const std::string& key, const std::string& value);
void apply_settings(RunConfig& config, const KeyValues& kv);

std::string get_setting(const RunConfig& config, const std::string& key);

/// "# key = value" lines covering every key.
std::string render_config(const RunConfig& config);

/// Dataset for one seed: generated from data, then noise at the given ratio.
Dataset make_dataset(const DataConfig& data, std::uint64_t seed, double noise_ratio);

std::vector<double> parse_double_list(const std::string& text);
std::vector<std::uint64_t> parse_seed_list(const std::string& text);

}  // namespace dmue
