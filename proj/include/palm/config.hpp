#pragma once

// Flat key=value run configuration.

#include "palm/lm.hpp"
#include "palm/trainer.hpp"

#include <cstdint>
#include <stdexcept>
#include <string>
#include <vector>

namespace palm {

enum class Precision { float32, float64 };

class ConfigError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

struct RunConfig {
  ModelConfig model;
  OptimizerConfig optimizer;

  std::string train_path;
  std::string valid_path;
  std::string test_path;
  /// Bracketed gold trees aligned line by line with the text files (supervised mode).
  std::string train_trees;
  std::string valid_trees;
  std::string checkpoint_path = "palm.ckpt";
  std::string metrics_path = "metrics.jsonl";

  int batch_size = 16;
  int eval_batch_size = 10;
  int bptt = 35;
  int epochs = 20;
  int min_count = 1;
  std::uint64_t seed = 1;
  Precision precision = Precision::float32;
  bool shuffle_sentences = false;
  /// Writes wall_time_s into the metrics log; off gives byte-comparable logs.
  bool log_wall_time = true;

  int parse_max_len = 0;  ///< 0 = sentence length
  std::vector<std::string> punctuation_tags;
  int wsj40_max_length = 40;

  RunConfig();
  bool operator==(const RunConfig&) const = default;
};

/// Parses "key = value" lines; lines starting with '#' are comments. Unknown keys and
/// malformed values throw ConfigError naming the line.
RunConfig parse_run_config(const std::string& text);
RunConfig load_run_config(const std::string& path);

/// Every key, in a fixed order; parse_run_config(serialize(c)) == c.
std::string serialize_run_config(const RunConfig& config);

/// Applies a single "key=value" override.
void set_config_value(RunConfig& config, const std::string& key, const std::string& value);

std::string to_string(Precision p);
std::string to_string(AttentionMode m);
std::string to_string(attention::GateMode m);

}  // namespace palm
