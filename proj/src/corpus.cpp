#include "palm/corpus.hpp"

#include <algorithm>
#include <cctype>
#include <fstream>
#include <numeric>
#include <sstream>
#include <unordered_map>

namespace palm {

std::vector<std::string> split_tokens(const std::string& line) {
  std::vector<std::string> out;
  std::istringstream in(line);
  std::string tok;
  while (in >> tok) out.push_back(tok);
  return out;
}

std::vector<std::vector<std::string>> tokenize_lines(const std::vector<std::string>& lines) {
  std::vector<std::vector<std::string>> out;
  out.reserve(lines.size());
  for (const auto& l : lines) out.push_back(split_tokens(l));
  return out;
}

std::vector<std::string> read_lines(const std::string& path) {
  std::ifstream in(path);
  if (!in) throw std::runtime_error("cannot open " + path);
  std::vector<std::string> lines;
  std::string line;
  while (std::getline(in, line)) {
    if (!line.empty() && line.back() == '\r') line.pop_back();
    lines.push_back(line);
  }
  return lines;
}

// ---------------------------------------------------------------------------
// Vocabulary

Vocabulary::Vocabulary() : tokens_{kUnknown, kEndOfSentence} { reindex(); }

void Vocabulary::reindex() {
  index_.clear();
  for (std::size_t i = 0; i < tokens_.size(); ++i) {
    if (!index_.emplace(tokens_[i], static_cast<int>(i)).second)
      throw std::invalid_argument("vocabulary: duplicate token '" + tokens_[i] + "'");
  }
  auto u = index_.find(kUnknown);
  auto e = index_.find(kEndOfSentence);
  if (u == index_.end() || e == index_.end()) throw std::invalid_argument("vocabulary: reserved symbols missing");
  unk_ = u->second;
  eos_ = e->second;
}

int Vocabulary::id(const std::string& token) const {
  auto it = index_.find(token);
  return it == index_.end() ? unk_ : it->second;
}

const std::string& Vocabulary::token(int id) const {
  if (id < 0 || id >= size()) throw std::out_of_range("vocabulary: id " + std::to_string(id));
  return tokens_[static_cast<std::size_t>(id)];
}

Vocabulary Vocabulary::from_tokens(std::vector<std::string> tokens) {
  Vocabulary v;
  v.tokens_ = std::move(tokens);
  v.reindex();
  return v;
}

void Vocabulary::save(const std::string& path) const {
  std::ofstream out(path);
  if (!out) throw std::runtime_error("cannot write " + path);
  for (const auto& t : tokens_) out << t << '\n';
}

Vocabulary Vocabulary::load(const std::string& path) {
  auto lines = read_lines(path);
  while (!lines.empty() && lines.back().empty()) lines.pop_back();
  return from_tokens(std::move(lines));
}

Vocabulary build_vocab(const std::vector<std::string>& lines, int min_count) {
  std::unordered_map<std::string, long> counts;
  long total = 0;
  for (const auto& line : lines) {
    for (auto& tok : split_tokens(line)) {
      ++total;
      if (tok == Vocabulary::kUnknown || tok == Vocabulary::kEndOfSentence) continue;
      ++counts[tok];
    }
  }
  if (total == 0) throw std::invalid_argument("build_vocab: empty corpus");

  std::vector<std::pair<std::string, long>> kept;
  for (auto& [tok, c] : counts)
    if (c >= min_count) kept.emplace_back(tok, c);
  std::sort(kept.begin(), kept.end(), [](const auto& a, const auto& b) {
    return a.second != b.second ? a.second > b.second : a.first < b.first;
  });

  std::vector<std::string> tokens;
  tokens.reserve(kept.size() + 2);
  for (auto& [tok, c] : kept) tokens.push_back(tok);
  tokens.emplace_back(Vocabulary::kUnknown);
  tokens.emplace_back(Vocabulary::kEndOfSentence);
  return Vocabulary::from_tokens(std::move(tokens));
}

// ---------------------------------------------------------------------------
// Streams and windows

TokenStream encode_stream(const std::vector<std::string>& lines, const Vocabulary& vocab) {
  TokenStream s;
  for (const auto& line : lines) {
    for (const auto& tok : split_tokens(line)) {
      s.ids.push_back(vocab.id(tok));
      s.sentence_end.push_back(0);
    }
    s.ids.push_back(vocab.eos_id());
    s.sentence_end.push_back(1);
  }
  return s;
}

std::vector<std::string> decode_stream(const TokenStream& stream, const Vocabulary& vocab) {
  std::vector<std::string> lines;
  std::string cur;
  for (std::size_t i = 0; i < stream.size(); ++i) {
    if (stream.sentence_end[i]) {
      lines.push_back(cur);
      cur.clear();
      continue;
    }
    if (!cur.empty()) cur += ' ';
    cur += vocab.token(stream.ids[i]);
  }
  if (!cur.empty()) lines.push_back(cur);
  return lines;
}

std::vector<Window> make_windows(const TokenStream& stream, int batch_size, int bptt_len) {
  if (bptt_len < 1) throw std::invalid_argument("make_windows: bptt_len must be >= 1");
  if (batch_size < 1) throw std::invalid_argument("make_windows: batch_size must be >= 1");
  if (stream.size() < static_cast<std::size_t>(batch_size) * 2)
    throw std::invalid_argument("make_windows: stream shorter than 2 * batch_size");

  const std::size_t lane_len = stream.size() / static_cast<std::size_t>(batch_size);
  const std::size_t predictions = lane_len - 1;
  std::vector<Window> out;
  for (std::size_t start = 0; start < predictions; start += static_cast<std::size_t>(bptt_len)) {
    const int len = static_cast<int>(std::min<std::size_t>(bptt_len, predictions - start));
    Window w;
    w.length = len;
    w.batch = batch_size;
    w.starts_lanes = start == 0;
    const std::size_t cells = static_cast<std::size_t>(len) * static_cast<std::size_t>(batch_size);
    w.inputs.resize(cells);
    w.targets.resize(cells);
    w.positions.resize(cells);
    for (int t = 0; t < len; ++t) {
      for (int b = 0; b < batch_size; ++b) {
        const std::size_t pos = static_cast<std::size_t>(b) * lane_len + start + static_cast<std::size_t>(t);
        const std::size_t cell = static_cast<std::size_t>(t * batch_size + b);
        w.inputs[cell] = stream.ids[pos];
        w.targets[cell] = stream.ids[pos + 1];
        w.positions[cell] = pos;
      }
    }
    out.push_back(std::move(w));
  }
  return out;
}

// ---------------------------------------------------------------------------
// Trees

std::vector<std::string> GoldTree::words() const {
  std::vector<std::string> out;
  out.reserve(leaves.size());
  for (const auto& l : leaves) out.push_back(l.word);
  return out;
}

std::set<Span> GoldTree::constituents(bool include_leaves) const {
  std::set<Span> out(spans.begin(), spans.end());
  if (include_leaves)
    for (int i = 1; i <= length(); ++i) out.insert({i, i});
  return out;
}

std::set<Span> GoldTree::nontrivial_spans() const {
  std::set<Span> out;
  for (const auto& s : spans)
    if (s.length() >= 2 && !(s.first == 1 && s.last == length())) out.insert(s);
  return out;
}

bool GoldTree::is_binary() const {
  if (length() <= 1) return spans.empty();
  return static_cast<int>(constituents(false).size()) == length() - 1;
}

void GoldTree::validate() const {
  const int n = length();
  if (n == 0) throw std::invalid_argument("tree: no tokens");
  std::set<Span> all(spans.begin(), spans.end());
  if (all.size() != spans.size()) throw std::invalid_argument("tree: duplicate spans");
  for (const auto& s : all) {
    if (s.first < 1 || s.last > n || s.length() < 2) throw std::invalid_argument("tree: span out of range");
  }
  if (n >= 2 && !all.count({1, n})) throw std::invalid_argument("tree: root does not cover the sentence");
  for (const auto& a : all)
    for (const auto& b : all) {
      const bool disjoint = a.last < b.first || b.last < a.first;
      const bool nested = (a.first <= b.first && b.last <= a.last) || (b.first <= a.first && a.last <= b.last);
      if (!disjoint && !nested) throw std::invalid_argument("tree: crossing spans");
    }
}

namespace {

struct RawNode {
  std::string label;
  std::string atom;  // set for leaves
  std::vector<RawNode> children;
  bool is_leaf() const { return children.empty(); }
};

class BracketReader {
 public:
  BracketReader(const std::string& text, TreeFormat format) : text_(text), format_(format) {}

  std::vector<GoldTree> read_all() {
    std::vector<GoldTree> out;
    skip_space();
    while (pos_ < text_.size()) {
      if (text_[pos_] != '(') throw ParseError("expected '(' at start of tree", line_);
      const int start_line = line_;
      RawNode root = read_node(start_line);
      out.push_back(to_tree(root));
      skip_space();
    }
    return out;
  }

 private:
  void skip_space() {
    while (pos_ < text_.size() && std::isspace(static_cast<unsigned char>(text_[pos_]))) {
      if (text_[pos_] == '\n') ++line_;
      ++pos_;
    }
  }

  std::string read_atom() {
    const std::size_t begin = pos_;
    while (pos_ < text_.size() && !std::isspace(static_cast<unsigned char>(text_[pos_])) && text_[pos_] != '(' &&
           text_[pos_] != ')')
      ++pos_;
    return text_.substr(begin, pos_ - begin);
  }

  RawNode read_node(int start_line) {
    ++pos_;  // '('
    std::vector<RawNode> items;
    while (true) {
      skip_space();
      if (pos_ >= text_.size()) throw ParseError("unbalanced brackets: tree opened here is never closed", start_line);
      const char ch = text_[pos_];
      if (ch == ')') {
        ++pos_;
        break;
      }
      if (ch == '(') {
        items.push_back(read_node(line_));
      } else {
        RawNode leaf;
        leaf.atom = read_atom();
        items.push_back(std::move(leaf));
      }
    }
    RawNode node;
    if (items.empty()) throw ParseError("empty bracket pair", line_);
    if (items.size() == 1 && items[0].is_leaf()) {
      // "(w)": a bare leaf.
      return items[0];
    }
    std::size_t first = 0;
    if (format_ == TreeFormat::labeled && items[0].is_leaf()) {
      node.label = items[0].atom;
      first = 1;
    }
    for (std::size_t k = first; k < items.size(); ++k) node.children.push_back(std::move(items[k]));
    return node;
  }

  // Collects leaves and constituent spans; returns the [first,last] covered.
  Span collect(const RawNode& node, GoldTree& tree) {
    if (node.is_leaf()) {
      tree.leaves.push_back({node.atom, ""});
      const int i = tree.length();
      return {i, i};
    }
    const int before = tree.length();
    Span covered{before + 1, before};
    for (const auto& c : node.children) covered.last = collect(c, tree).last;
    if (covered.length() == 1) {
      // Preterminal (or unary chain over one token): keep the lowest label as the tag.
      auto& leaf = tree.leaves.back();
      if (leaf.tag.empty() && !node.label.empty()) leaf.tag = node.label;
    } else if (tree.spans.empty() || tree.spans.back() != covered) {
      tree.spans.push_back(covered);
    }
    return covered;
  }

  GoldTree to_tree(const RawNode& root) {
    GoldTree tree;
    collect(root, tree);
    std::sort(tree.spans.begin(), tree.spans.end());
    tree.spans.erase(std::unique(tree.spans.begin(), tree.spans.end()), tree.spans.end());
    return tree;
  }

  const std::string& text_;
  TreeFormat format_;
  std::size_t pos_ = 0;
  int line_ = 1;
};

}  // namespace

std::vector<GoldTree> read_bracketed(const std::string& text, TreeFormat format) {
  // A stray ')' at top level shows up as a non-'(' start; report it precisely.
  int line = 1;
  int depth = 0;
  for (char ch : text) {
    if (ch == '\n') ++line;
    if (ch == '(') ++depth;
    if (ch == ')' && --depth < 0) throw ParseError("unbalanced brackets: unexpected ')'", line);
  }
  return BracketReader(text, format).read_all();
}

std::vector<GoldTree> read_bracketed_file(const std::string& path, TreeFormat format) {
  std::ifstream in(path);
  if (!in) throw std::runtime_error("cannot open " + path);
  std::stringstream ss;
  ss << in.rdbuf();
  return read_bracketed(ss.str(), format);
}

namespace {

void render(const GoldTree& tree, const std::vector<Span>& sorted, std::size_t& next, Span cur, std::string& out) {
  if (cur.length() == 1) {
    out += tree.leaves[static_cast<std::size_t>(cur.first - 1)].word;
    return;
  }
  out += '(';
  int pos = cur.first;
  bool first = true;
  while (pos <= cur.last) {
    if (!first) out += ' ';
    first = false;
    // Largest constituent starting at pos strictly inside cur.
    Span child{pos, pos};
    for (std::size_t k = next; k < sorted.size(); ++k) {
      const Span& s = sorted[k];
      if (s.first == pos && s.last <= cur.last && s != cur && s.last > child.last) child = s;
    }
    render(tree, sorted, next, child, out);
    pos = child.last + 1;
  }
  out += ')';
}

}  // namespace

std::string to_bracketed(const GoldTree& tree) {
  if (tree.length() == 0) return "()";
  if (tree.length() == 1) return "(" + tree.leaves[0].word + ")";
  std::vector<Span> sorted(tree.spans.begin(), tree.spans.end());
  std::sort(sorted.begin(), sorted.end());
  std::size_t next = 0;
  std::string out;
  render(tree, sorted, next, {1, tree.length()}, out);
  return out;
}

// ---------------------------------------------------------------------------
// Oracle span targets

OracleSpanTargets oracle_targets(const GoldTree& tree, int max_span) {
  if (max_span < 1) throw std::invalid_argument("oracle_targets: max_span must be >= 1");
  const int n = tree.length();
  OracleSpanTargets out;
  out.max_span = max_span;
  out.targets.assign(static_cast<std::size_t>(n), std::vector<double>(static_cast<std::size_t>(max_span), 0.0));
  out.masked.assign(static_cast<std::size_t>(n), 1);
  for (const auto& s : tree.nontrivial_spans()) {
    const int i = s.length() - 1;
    if (i >= max_span) continue;
    out.targets[static_cast<std::size_t>(s.last - 1)][static_cast<std::size_t>(i)] = 1.0;
  }
  for (std::size_t t = 0; t < out.targets.size(); ++t) {
    auto& y = out.targets[t];
    const double mass = std::accumulate(y.begin(), y.end(), 0.0);
    if (mass == 0.0) continue;
    out.masked[t] = 0;
    for (auto& v : y) v /= mass;
  }
  return out;
}

OracleSpanTargets stream_oracle_targets(const std::vector<GoldTree>& trees, int max_span) {
  OracleSpanTargets out;
  out.max_span = max_span;
  const std::vector<double> empty(static_cast<std::size_t>(max_span), 0.0);
  for (const auto& tree : trees) {
    auto y = oracle_targets(tree, max_span);
    for (int t = 0; t < y.length(); ++t) {
      out.targets.push_back(std::move(y.targets[static_cast<std::size_t>(t)]));
      out.masked.push_back(y.masked[static_cast<std::size_t>(t)]);
    }
    out.targets.push_back(empty);
    out.masked.push_back(1);
  }
  return out;
}

// ---------------------------------------------------------------------------
// WSJ-40 filtering

std::vector<std::string> default_punctuation_tags() {
  return {".", ",", ":", "``", "''", "-LRB-", "-RRB-", "#", "$", "-NONE-"};
}

GoldTree remove_leaves(const GoldTree& tree, const std::vector<bool>& drop) {
  const int n = tree.length();
  if (static_cast<int>(drop.size()) != n) throw std::invalid_argument("remove_leaves: mask length");
  // new_index[i] = number of kept leaves among 1..i
  std::vector<int> kept_upto(static_cast<std::size_t>(n) + 1, 0);
  GoldTree out;
  for (int i = 1; i <= n; ++i) {
    const bool keep = !drop[static_cast<std::size_t>(i - 1)];
    kept_upto[static_cast<std::size_t>(i)] = kept_upto[static_cast<std::size_t>(i - 1)] + (keep ? 1 : 0);
    if (keep) out.leaves.push_back(tree.leaves[static_cast<std::size_t>(i - 1)]);
  }
  const int m = out.length();
  std::set<Span> spans;
  for (const auto& s : tree.spans) {
    const int first = kept_upto[static_cast<std::size_t>(s.first - 1)] + 1;
    const int last = kept_upto[static_cast<std::size_t>(s.last)];
    if (last - first + 1 >= 2) spans.insert({first, last});
  }
  if (m >= 2) spans.insert({1, m});
  out.spans.assign(spans.begin(), spans.end());
  return out;
}

std::vector<bool> removal_mask(const GoldTree& tree, const std::vector<std::string>& removed) {
  const std::set<std::string> removed_set(removed.begin(), removed.end());
  std::vector<bool> drop(tree.leaves.size());
  for (std::size_t i = 0; i < tree.leaves.size(); ++i) {
    const auto& leaf = tree.leaves[i];
    drop[i] = removed_set.count(leaf.tag.empty() ? leaf.word : leaf.tag) != 0;
  }
  return drop;
}

FilterResult wsj40_filter(const std::vector<GoldTree>& trees, const std::vector<std::string>& removed,
                          int max_length) {
  FilterResult res;
  for (std::size_t k = 0; k < trees.size(); ++k) {
    GoldTree filtered = remove_leaves(trees[k], removal_mask(trees[k], removed));
    if (filtered.length() == 0) {
      ++res.dropped_empty;
      continue;
    }
    if (filtered.length() > max_length) {
      ++res.dropped_long;
      continue;
    }
    res.trees.push_back(std::move(filtered));
    res.kept.push_back(k);
  }
  return res;
}

}  // namespace palm
