#pragma once

// Text and treebank ingestion: vocabularies, continuous token streams,
// bptt windows, bracketed gold trees and oracle span targets.

#include <cstddef>
#include <iosfwd>
#include <map>
#include <set>
#include <stdexcept>
#include <string>
#include <utility>
#include <vector>

namespace palm {

/// Inclusive 1-based token span [first, last].
struct Span {
  int first = 0;
  int last = 0;

  int length() const { return last - first + 1; }
  auto operator<=>(const Span&) const = default;
};

class ParseError : public std::runtime_error {
 public:
  ParseError(const std::string& what, int line)
      : std::runtime_error("line " + std::to_string(line) + ": " + what), line_(line) {}
  int line() const { return line_; }

 private:
  int line_;
};

std::vector<std::string> split_tokens(const std::string& line);
std::vector<std::vector<std::string>> tokenize_lines(const std::vector<std::string>& lines);
std::vector<std::string> read_lines(const std::string& path);

class Vocabulary {
 public:
  static constexpr const char* kUnknown = "<unk>";
  static constexpr const char* kEndOfSentence = "<eos>";

  /// Starts with only the reserved symbols.
  Vocabulary();

  int id(const std::string& token) const;
  const std::string& token(int id) const;
  bool contains(const std::string& token) const { return index_.count(token) != 0; }
  int size() const { return static_cast<int>(tokens_.size()); }
  int unknown_id() const { return unk_; }
  int eos_id() const { return eos_; }
  const std::vector<std::string>& tokens() const { return tokens_; }

  /// Rebuilds from an id-ordered token list; must contain both reserved symbols once.
  static Vocabulary from_tokens(std::vector<std::string> tokens);

  void save(const std::string& path) const;
  static Vocabulary load(const std::string& path);

  bool operator==(const Vocabulary& other) const { return tokens_ == other.tokens_; }

 private:
  void reindex();

  std::vector<std::string> tokens_;
  std::map<std::string, int> index_;
  int unk_ = -1;
  int eos_ = -1;
};

/// Counts whitespace tokens; tokens seen fewer than min_count times map to <unk>.
/// Ids ordered by descending count, ties by token; reserved symbols follow.
Vocabulary build_vocab(const std::vector<std::string>& lines, int min_count);

struct TokenStream {
  std::vector<int> ids;
  std::vector<unsigned char> sentence_end;

  std::size_t size() const { return ids.size(); }
};

TokenStream encode_stream(const std::vector<std::string>& lines, const Vocabulary& vocab);
std::vector<std::string> decode_stream(const TokenStream& stream, const Vocabulary& vocab);

/// One bptt window over `batch` parallel lanes. Arrays are time-major: entry
/// (t, b) lives at t * batch + b.
struct Window {
  int length = 0;
  int batch = 0;
  std::vector<int> inputs;
  std::vector<int> targets;
  /// Stream offset of each input token.
  std::vector<std::size_t> positions;
  /// True for the first window of every lane: carried state must be reset.
  bool starts_lanes = false;

  int input(int t, int b) const { return inputs[static_cast<std::size_t>(t * batch + b)]; }
  int target(int t, int b) const { return targets[static_cast<std::size_t>(t * batch + b)]; }
  std::size_t position(int t, int b) const { return positions[static_cast<std::size_t>(t * batch + b)]; }
};

/// Splits the stream into batch_size contiguous lanes (remainder dropped) and
/// cuts each lane into consecutive windows of bptt_len predictions.
std::vector<Window> make_windows(const TokenStream& stream, int batch_size, int bptt_len);

struct Leaf {
  std::string word;
  std::string tag;  ///< preterminal label, empty when the source had none
};

/// Unlabeled constituency tree. `spans` holds every distinct constituent of
/// length >= 2 (the root included when n >= 2); single tokens are implicit.
struct GoldTree {
  std::vector<Leaf> leaves;
  std::vector<Span> spans;

  int length() const { return static_cast<int>(leaves.size()); }
  std::vector<std::string> words() const;
  /// Constituent spans, optionally with every [i,i].
  std::set<Span> constituents(bool include_leaves) const;
  /// Spans that are neither single tokens nor the whole sentence.
  std::set<Span> nontrivial_spans() const;
  bool is_binary() const;
  /// Verifies contiguity, nesting and root coverage.
  void validate() const;
};

enum class TreeFormat {
  labeled,    ///< PTB style: the first atom of a node with further children is its label
  unlabeled,  ///< every atom is a leaf, e.g. "((a b) c)"
};

/// Reads bracketed trees; unary chains collapse and labels are dropped except
/// preterminal tags. Throws ParseError with the offending line on bad input.
std::vector<GoldTree> read_bracketed(const std::string& text, TreeFormat format = TreeFormat::labeled);
std::vector<GoldTree> read_bracketed_file(const std::string& path, TreeFormat format = TreeFormat::labeled);

/// "((a b) c)" style rendering of a gold tree (n-ary nodes kept).
std::string to_bracketed(const GoldTree& tree);

struct OracleSpanTargets {
  int max_span = 0;
  /// targets[t][i] is the weight of span [t-i, t] (0-based slot for 1-based token t+1).
  std::vector<std::vector<double>> targets;
  std::vector<unsigned char> masked;

  int length() const { return static_cast<int>(targets.size()); }
};

OracleSpanTargets oracle_targets(const GoldTree& tree, int max_span);

/// Oracle targets laid out along a token stream built from the same sentences;
/// end-of-sentence positions are masked.
OracleSpanTargets stream_oracle_targets(const std::vector<GoldTree>& trees, int max_span);

struct FilterResult {
  std::vector<GoldTree> trees;
  /// Index of each kept tree in the input.
  std::vector<std::size_t> kept;
  int dropped_long = 0;
  int dropped_empty = 0;
};

/// Conventional PTB punctuation (and empty-element) preterminal tags.
std::vector<std::string> default_punctuation_tags();

/// True for each leaf whose tag (or word, when untagged) is in `removed`.
std::vector<bool> removal_mask(const GoldTree& tree, const std::vector<std::string>& removed);

/// Removes leaves whose tag (or word, when untagged) is in `removed`, re-indexes
/// spans, and drops sentences with more than max_length remaining tokens.
FilterResult wsj40_filter(const std::vector<GoldTree>& trees, const std::vector<std::string>& removed,
                          int max_length = 40);

/// Removes the given leaf positions (0-based) and re-indexes constituents.
GoldTree remove_leaves(const GoldTree& tree, const std::vector<bool>& drop);

}  // namespace palm
