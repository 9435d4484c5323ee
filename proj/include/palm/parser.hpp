#pragma once

// Greedy top-down decoding of unlabeled binary trees from span scores, plus
// bracket-level evaluation.

#include "palm/corpus.hpp"

#include <set>
#include <string>
#include <vector>

namespace palm {

template <typename T>
class LanguageModel;

/// Binary tree over tokens 1..n. Leaves are nodes with left == right == -1.
class ParseTree {
 public:
  struct Node {
    Span span;
    int left = -1;
    int right = -1;
    bool is_leaf() const { return left < 0; }
  };

  ParseTree() = default;
  /// Builds the tree whose internal nodes are exactly `spans` (must form a
  /// binary bracketing of [1, n] once single tokens are added).
  static ParseTree from_spans(int n, const std::set<Span>& spans);
  static ParseTree from_gold(const GoldTree& tree);

  int length() const { return n_; }
  int root() const { return root_; }
  const std::vector<Node>& nodes() const { return nodes_; }
  const Node& node(int i) const { return nodes_[static_cast<std::size_t>(i)]; }
  int internal_count() const;

  /// Throws unless children partition parents, the root covers [1, n] and
  /// there are n - 1 internal nodes.
  void validate() const;

  /// "((a b) c)"; with no words, leaves print as their 1-based index.
  std::string to_bracketed(const std::vector<std::string>& words = {}) const;

  int add_leaf(int i);
  int add_internal(int left, int right);
  void set_root(int n, int root) {
    n_ = n;
    root_ = root;
  }

 private:
  int n_ = 0;
  int root_ = -1;
  std::vector<Node> nodes_;
};

/// rows[j][k] = score of span [j-k, j]; rows[0] is unused.
struct ScoreMatrix {
  std::vector<std::vector<double>> rows;

  int length() const { return static_cast<int>(rows.size()) - 1; }
  const std::vector<double>& row(int j) const { return rows.at(static_cast<std::size_t>(j)); }
};

/// Recursively splits [i, j] into [i, j-k-1], [j-k, j] with k maximizing
/// s[j][k] over 0 <= k < min(j - i, |s[j]|); ties go to the larger k (longer
/// right span). A row shorter than j caps the right span length.
ParseTree greedy_parse(const ScoreMatrix& scores, int n);

/// s[j][k] = k + 1: the longest right span always wins, so every split peels
/// off the first token.
ScoreMatrix right_branching_scores(int n);

/// Spans of internal nodes; include_trivial adds single tokens and keeps the root.
std::set<Span> tree_brackets(const ParseTree& tree, bool include_trivial);

struct F1Report {
  double precision = 0;  // percentages
  double recall = 0;
  double f1 = 0;
  long matched = 0;
  long predicted = 0;
  long gold = 0;
  int sentences = 0;
};

/// Corpus-level bracket F1 over nontrivial spans (no single tokens, no root).
F1Report unlabeled_f1(const std::vector<ParseTree>& pred, const std::vector<GoldTree>& gold);
F1Report unlabeled_f1(const std::vector<GoldTree>& pred, const std::vector<GoldTree>& gold);

struct BranchingStats {
  double left_percent = 0;
  double right_percent = 0;
  long counted = 0;
  long left = 0;
  long right = 0;
};

/// Over internal nodes spanning >= 3 tokens: a right child that is a single
/// token is a left split, a left child that is a single token a right split.
BranchingStats branching_stats(const std::vector<ParseTree>& trees);

/// Attention scores for every span of a sentence, read from the LM run over
/// "<eos> w_1 .. w_n <eos>". Row j has min(j, parse_max_len) entries
/// (parse_max_len <= 0 means unbounded).
template <typename T>
ScoreMatrix extract_scores(LanguageModel<T>& model, const std::vector<int>& sentence, int eos_id, int parse_max_len);

/// extract_scores + greedy_parse.
template <typename T>
ParseTree parse_sentence(LanguageModel<T>& model, const std::vector<int>& sentence, int eos_id, int parse_max_len);

}  // namespace palm
