#pragma once

// Command implementations behind the `palm` executable. Reports are JSON lines
// written to `out`; progress goes to `log`.

#include "palm/config.hpp"
#include "palm/corpus.hpp"
#include "palm/parser.hpp"
#include "palm/trainer.hpp"

#include <iosfwd>
#include <optional>
#include <stdexcept>
#include <string>
#include <vector>

namespace palm {

enum class TrainMode {
  unsupervised,     ///< U: lambda forced to 0
  supervised,       ///< S: joint loss with oracle span targets
  right_branching,  ///< RB: fixed decreasing-length attention scores
};

TrainMode parse_train_mode(const std::string& s);
std::string to_string(TrainMode m);

class CommandError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

struct MetricRecord {
  int epoch = 0;
  std::string split;
  double nll = 0;
  double ppl = 0;
  double attn_ce = 0;
  double wall_time_s = 0;
};

/// One JSON object per record; wall_time_s omitted when !with_wall_time.
std::string metric_json(const MetricRecord& r, bool with_wall_time);

/// Sentences (and optional aligned gold trees) for one training run.
struct TrainData {
  std::vector<std::string> train_lines;
  std::vector<std::string> valid_lines;
  std::vector<GoldTree> train_trees;  ///< required in supervised mode
  std::vector<GoldTree> valid_trees;  ///< optional; enables held-out attention metrics
};

/// Reads the files named by the config (trees only when configured).
TrainData load_train_data(const RunConfig& config);

struct TrainResult {
  std::vector<MetricRecord> metrics;
  EvalStats final_valid;  ///< evaluation of the saved parameters
  Vocabulary vocab;
  ModelConfig model;
};

/// Trains per config and mode, saves the checkpoint (unless checkpoint_path
/// is empty) and metrics log (unless metrics_path is empty).
TrainResult train_model(const RunConfig& config, TrainMode mode, const TrainData& data, std::ostream* log);

int cmd_train(const RunConfig& config, TrainMode mode, std::ostream& out, std::ostream& log);

struct PplReport {
  double nll = 0;
  double ppl = 0;
  long tokens = 0;
};

/// Evaluates a checkpoint on a corpus; `vocab_path`, when given, must hold
/// exactly the checkpoint's vocabulary.
PplReport eval_ppl(const std::string& checkpoint, const std::vector<std::string>& lines,
                   const std::string& vocab_path = {});
int cmd_eval_ppl(const std::string& checkpoint, const std::string& corpus, const std::string& vocab_path,
                 std::ostream& out, std::ostream& log);

/// One bracketed tree per non-empty input line, in order. Blank lines are
/// skipped with a warning. Sentences are sharded over PALM_THREADS workers.
std::vector<std::string> parse_lines(const std::string& checkpoint, const std::vector<std::string>& lines,
                                     std::optional<int> parse_max_len, std::ostream* log);
int cmd_parse(const std::string& checkpoint, const std::string& input, const std::string& output,
              std::optional<int> parse_max_len, std::ostream& out, std::ostream& log);

struct ParseEvalOptions {
  bool wsj40 = false;
  std::vector<std::string> removed = default_punctuation_tags();
  int max_length = 40;
};

struct ParseEvalReport {
  F1Report f1;
  BranchingStats branching;       ///< over predicted trees
  BranchingStats gold_branching;  ///< over the binary gold trees only
  int counted_sentences = 0;
  int skipped_sentences = 0;
};

/// Aligns predicted (unlabeled) and gold trees, applying WSJ-40 filtering to
/// gold and the matching removals to predictions when requested.
ParseEvalReport evaluate_parses(const std::vector<GoldTree>& pred, const std::vector<GoldTree>& gold,
                                const ParseEvalOptions& options);
std::string parse_report_json(const ParseEvalReport& r);
int cmd_eval_parse(const std::string& pred_path, const std::string& gold_path, const ParseEvalOptions& options,
                   std::ostream& out, std::ostream& log);

int cmd_selftest(std::uint64_t seed, std::ostream& out, std::ostream& log);

/// Worker count from PALM_THREADS (>= 1), capped by `jobs`.
int worker_count(std::size_t jobs);

}  // namespace palm
