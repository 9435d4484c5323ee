#include "palm/parser.hpp"

#include "palm/lm.hpp"

#include <algorithm>
#include <functional>
#include <stdexcept>

namespace palm {

int ParseTree::add_leaf(int i) {
  nodes_.push_back(Node{{i, i}, -1, -1});
  return static_cast<int>(nodes_.size()) - 1;
}

int ParseTree::add_internal(int left, int right) {
  const Span s{node(left).span.first, node(right).span.last};
  nodes_.push_back(Node{s, left, right});
  return static_cast<int>(nodes_.size()) - 1;
}

int ParseTree::internal_count() const {
  return static_cast<int>(std::count_if(nodes_.begin(), nodes_.end(), [](const Node& n) { return !n.is_leaf(); }));
}

void ParseTree::validate() const {
  if (n_ < 1 || root_ < 0) throw std::logic_error("parse tree: empty");
  if (node(root_).span != Span{1, n_}) throw std::logic_error("parse tree: root does not cover [1, n]");
  std::vector<int> seen(static_cast<std::size_t>(n_) + 1, 0);
  int internal = 0;
  std::function<void(int)> walk = [&](int id) {
    const Node& nd = node(id);
    if (nd.is_leaf()) {
      if (nd.span.first != nd.span.last) throw std::logic_error("parse tree: leaf spans several tokens");
      ++seen[static_cast<std::size_t>(nd.span.first)];
      return;
    }
    ++internal;
    const Span l = node(nd.left).span;
    const Span r = node(nd.right).span;
    if (l.first != nd.span.first || r.last != nd.span.last || l.last + 1 != r.first || l.last < l.first ||
        r.last < r.first)
      throw std::logic_error("parse tree: children do not partition their parent");
    walk(nd.left);
    walk(nd.right);
  };
  walk(root_);
  for (int i = 1; i <= n_; ++i)
    if (seen[static_cast<std::size_t>(i)] != 1) throw std::logic_error("parse tree: token not covered exactly once");
  if (internal != n_ - 1) throw std::logic_error("parse tree: internal node count differs from n - 1");
}

std::string ParseTree::to_bracketed(const std::vector<std::string>& words) const {
  auto leaf_text = [&](int i) {
    return words.empty() ? std::to_string(i) : words.at(static_cast<std::size_t>(i - 1));
  };
  if (n_ == 1) return "(" + leaf_text(1) + ")";
  std::string out;
  std::function<void(int)> walk = [&](int id) {
    const Node& nd = node(id);
    if (nd.is_leaf()) {
      out += leaf_text(nd.span.first);
      return;
    }
    out += '(';
    walk(nd.left);
    out += ' ';
    walk(nd.right);
    out += ')';
  };
  walk(root_);
  return out;
}

ParseTree ParseTree::from_spans(int n, const std::set<Span>& spans) {
  if (n < 1) throw std::invalid_argument("parse tree: n must be >= 1");
  ParseTree tree;
  std::function<int(Span)> build = [&](Span s) -> int {
    if (s.length() == 1) return tree.add_leaf(s.first);
    // The left child is the longest constituent (or single token) starting at s.first inside s.
    int split = s.first;
    for (const Span& c : spans)
      if (c.first == s.first && c.last < s.last && c.last > split) split = c.last;
    const Span right{split + 1, s.last};
    if (right.length() > 1 && !spans.count(right))
      throw std::invalid_argument("parse tree: spans do not form a binary bracketing");
    const int l = build({s.first, split});
    const int r = build(right);
    return tree.add_internal(l, r);
  };
  std::set<Span> internal;
  for (const Span& s : spans)
    if (s.length() >= 2) internal.insert(s);
  if (n >= 2 && !internal.count({1, n})) internal.insert({1, n});
  if (static_cast<int>(internal.size()) != n - 1)
    throw std::invalid_argument("parse tree: bracketing is not binary");
  tree.set_root(n, build({1, n}));
  tree.validate();
  return tree;
}

ParseTree ParseTree::from_gold(const GoldTree& tree) {
  if (!tree.is_binary()) throw std::invalid_argument("parse tree: gold tree is not binary");
  return from_spans(tree.length(), tree.constituents(false));
}

ParseTree greedy_parse(const ScoreMatrix& scores, int n) {
  if (n < 1) throw std::invalid_argument("greedy_parse: n must be >= 1");
  ParseTree tree;
  std::function<int(int, int)> split = [&](int i, int j) -> int {
    if (i == j) return tree.add_leaf(i);
    // Rows capped by parse_max_len only offer their scored right spans.
    if (j > scores.length() || scores.row(j).empty())
      throw std::out_of_range("greedy_parse: missing score s[" + std::to_string(j) + "][0]");
    const auto& row = scores.row(j);
    const int options = std::min(j - i, static_cast<int>(row.size()));
    int best = 0;
    for (int k = 1; k < options; ++k)
      if (row[static_cast<std::size_t>(k)] >= row[static_cast<std::size_t>(best)]) best = k;
    const int left = split(i, j - best - 1);
    const int right = split(j - best, j);
    return tree.add_internal(left, right);
  };
  tree.set_root(n, split(1, n));
  return tree;
}

ScoreMatrix right_branching_scores(int n) {
  if (n < 1) throw std::invalid_argument("right_branching_scores: n must be >= 1");
  ScoreMatrix s;
  s.rows.resize(static_cast<std::size_t>(n) + 1);
  for (int j = 1; j <= n; ++j) {
    auto& row = s.rows[static_cast<std::size_t>(j)];
    row.resize(static_cast<std::size_t>(j));
    for (int k = 0; k < j; ++k) row[static_cast<std::size_t>(k)] = static_cast<double>(k + 1);
  }
  return s;
}

std::set<Span> tree_brackets(const ParseTree& tree, bool include_trivial) {
  std::set<Span> out;
  for (const auto& nd : tree.nodes()) {
    if (nd.is_leaf()) {
      if (include_trivial) out.insert(nd.span);
      continue;
    }
    if (!include_trivial && nd.span == Span{1, tree.length()}) continue;
    out.insert(nd.span);
  }
  return out;
}

namespace {

F1Report f1_from_sets(const std::vector<std::set<Span>>& pred, const std::vector<std::set<Span>>& gold) {
  F1Report r;
  for (std::size_t k = 0; k < pred.size(); ++k) {
    r.predicted += static_cast<long>(pred[k].size());
    r.gold += static_cast<long>(gold[k].size());
    for (const auto& s : pred[k]) r.matched += gold[k].count(s) ? 1 : 0;
  }
  r.sentences = static_cast<int>(pred.size());
  r.precision = r.predicted ? 100.0 * static_cast<double>(r.matched) / static_cast<double>(r.predicted) : 0.0;
  r.recall = r.gold ? 100.0 * static_cast<double>(r.matched) / static_cast<double>(r.gold) : 0.0;
  r.f1 = (r.precision + r.recall) > 0 ? 2 * r.precision * r.recall / (r.precision + r.recall) : 0.0;
  return r;
}

void check_lengths(int pred_len, int gold_len, std::size_t k) {
  if (pred_len != gold_len)
    throw std::invalid_argument("unlabeled_f1: sentence " + std::to_string(k + 1) + " has " +
                                std::to_string(pred_len) + " predicted vs " + std::to_string(gold_len) +
                                " gold tokens");
}

}  // namespace

F1Report unlabeled_f1(const std::vector<ParseTree>& pred, const std::vector<GoldTree>& gold) {
  if (pred.size() != gold.size()) throw std::invalid_argument("unlabeled_f1: sentence counts differ");
  std::vector<std::set<Span>> p, g;
  for (std::size_t k = 0; k < pred.size(); ++k) {
    check_lengths(pred[k].length(), gold[k].length(), k);
    p.push_back(tree_brackets(pred[k], false));
    g.push_back(gold[k].nontrivial_spans());
  }
  return f1_from_sets(p, g);
}

F1Report unlabeled_f1(const std::vector<GoldTree>& pred, const std::vector<GoldTree>& gold) {
  if (pred.size() != gold.size()) throw std::invalid_argument("unlabeled_f1: sentence counts differ");
  std::vector<std::set<Span>> p, g;
  for (std::size_t k = 0; k < pred.size(); ++k) {
    check_lengths(pred[k].length(), gold[k].length(), k);
    p.push_back(pred[k].nontrivial_spans());
    g.push_back(gold[k].nontrivial_spans());
  }
  return f1_from_sets(p, g);
}

BranchingStats branching_stats(const std::vector<ParseTree>& trees) {
  BranchingStats st;
  for (const auto& tree : trees) {
    for (const auto& nd : tree.nodes()) {
      if (nd.is_leaf() || nd.span.length() < 3) continue;
      ++st.counted;
      if (tree.node(nd.right).is_leaf()) ++st.left;
      if (tree.node(nd.left).is_leaf()) ++st.right;
    }
  }
  if (st.counted > 0) {
    st.left_percent = 100.0 * static_cast<double>(st.left) / static_cast<double>(st.counted);
    st.right_percent = 100.0 * static_cast<double>(st.right) / static_cast<double>(st.counted);
  }
  return st;
}

template <typename T>
ScoreMatrix extract_scores(LanguageModel<T>& model, const std::vector<int>& sentence, int eos_id, int parse_max_len) {
  const int n = static_cast<int>(sentence.size());
  if (n == 0) throw std::invalid_argument("extract_scores: empty sentence");
  if (model.config().attention_mode == AttentionMode::disabled)
    throw std::invalid_argument("extract_scores: model has attention disabled");
  const int limit = parse_max_len > 0 ? parse_max_len : n + 1;

  Window w;
  w.batch = 1;
  w.starts_lanes = true;
  w.inputs.push_back(eos_id);
  for (int id : sentence) w.inputs.push_back(id);
  w.inputs.push_back(eos_id);
  w.length = static_cast<int>(w.inputs.size());
  w.targets.assign(w.inputs.begin() + 1, w.inputs.end());
  w.targets.push_back(eos_id);
  for (std::size_t p = 0; p < w.inputs.size(); ++p) w.positions.push_back(p);

  ForwardResult<T> res = forward(model, w, CarriedState<T>{}, limit);
  ScoreMatrix s;
  s.rows.resize(static_cast<std::size_t>(n) + 1);
  for (int j = 1; j <= n; ++j) {
    const auto& step = res.attention[static_cast<std::size_t>(j + 1)];
    const int count = std::min(j, limit);
    if (step.span_count() < count) throw std::logic_error("extract_scores: fewer spans than expected");
    auto& row = s.rows[static_cast<std::size_t>(j)];
    for (int k = 0; k < count; ++k) row.push_back(static_cast<double>(step.scores(k, 0)));
  }
  return s;
}

template <typename T>
ParseTree parse_sentence(LanguageModel<T>& model, const std::vector<int>& sentence, int eos_id, int parse_max_len) {
  return greedy_parse(extract_scores(model, sentence, eos_id, parse_max_len), static_cast<int>(sentence.size()));
}

template ScoreMatrix extract_scores<float>(LanguageModel<float>&, const std::vector<int>&, int, int);
template ScoreMatrix extract_scores<double>(LanguageModel<double>&, const std::vector<int>&, int, int);
template ParseTree parse_sentence<float>(LanguageModel<float>&, const std::vector<int>&, int, int);
template ParseTree parse_sentence<double>(LanguageModel<double>&, const std::vector<int>&, int, int);

}  // namespace palm
