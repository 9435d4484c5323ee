#include "palm/synthetic.hpp"

#include <array>
#include <set>
#include <stdexcept>

namespace palm {

namespace {

struct Lexicon {
  std::array<std::vector<std::string>, 2> det{{{"the", "a", "this", "every"}, {"the", "some", "these", "many"}}};
  std::array<std::vector<std::string>, 2> noun{{{"dog", "cat", "bird", "man", "girl", "child"},
                                                {"dogs", "cats", "birds", "men", "girls", "children"}}};
  std::array<std::vector<std::string>, 2> vt{{{"sees", "likes", "chases", "follows"}, {"see", "like", "chase", "follow"}}};
  std::array<std::vector<std::string>, 2> vi{{{"sleeps", "runs", "sings"}, {"sleep", "run", "sing"}}};
  std::vector<std::string> adj{"big", "small", "old", "happy"};
  std::vector<std::string> prep{"near", "with", "behind"};
};

const Lexicon& lexicon() {
  static const Lexicon lex;
  return lex;
}

class Builder {
 public:
  Builder(const SyntheticConfig& c, std::mt19937_64& rng) : c_(c), rng_(rng) {}

  GoldTree sentence() {
    const int n = number();
    np(n, 0);
    vp(n, 0);
    add(1, last());
    GoldTree t;
    t.leaves = std::move(leaves_);
    t.spans.assign(spans_.begin(), spans_.end());
    return t;
  }

 private:
  bool coin(double p) { return std::uniform_real_distribution<double>(0.0, 1.0)(rng_) < p; }
  int number() { return coin(0.5) ? 1 : 0; }

  const std::string& pick(const std::vector<std::string>& words) {
    return words[std::uniform_int_distribution<std::size_t>(0, words.size() - 1)(rng_)];
  }

  int word(const std::string& w, const std::string& tag) {
    leaves_.push_back({w, tag});
    return static_cast<int>(leaves_.size());
  }

  void add(int first, int last) {
    if (last > first) spans_.insert({first, last});
  }

  // Productions append their words; np also returns the index of its first word.
  int np(int n, int depth) {
    const auto& lex = lexicon();
    const int first = word(pick(lex.det[static_cast<std::size_t>(n)]), "DT");
    nbar(n);
    add(first, last());
    if (depth < c_.max_depth) {
      if (coin(c_.pp_prob)) {
        pp(depth + 1);
        add(first, last());
      } else if (coin(c_.relative_prob)) {
        const int that = word("that", "WDT");
        if (coin(c_.object_relative_prob)) {
          // object gap: that NP[m] Vt[m]
          const int m = number();
          const int inner = np(m, depth + 1);
          word(pick(lex.vt[static_cast<std::size_t>(m)]), m ? "VBP" : "VBZ");
          add(inner, last());
        } else {
          vp(n, depth + 1);
        }
        add(that, last());
        add(first, last());
      }
    }
    return first;
  }

  void nbar(int n) {
    const auto& lex = lexicon();
    if (coin(c_.adjective_prob)) {
      const int first = word(pick(lex.adj), "JJ");
      nbar(n);
      add(first, last());
    } else {
      word(pick(lex.noun[static_cast<std::size_t>(n)]), n ? "NNS" : "NN");
    }
  }

  void pp(int depth) {
    const int first = word(pick(lexicon().prep), "IN");
    np(number(), depth);
    add(first, last());
  }

  void vp(int n, int depth) {
    const auto& lex = lexicon();
    const auto un = static_cast<std::size_t>(n);
    if (coin(c_.transitive_prob)) {
      const int first = word(pick(lex.vt[un]), n ? "VBP" : "VBZ");
      np(number(), depth + 1);
      add(first, last());
    } else {
      word(pick(lex.vi[un]), n ? "VBP" : "VBZ");
    }
  }

  int last() const { return static_cast<int>(leaves_.size()); }

  const SyntheticConfig& c_;
  std::mt19937_64& rng_;
  std::vector<Leaf> leaves_;
  std::set<Span> spans_;
};

}  // namespace

GoldTree generate_sentence(const SyntheticConfig& config, std::mt19937_64& rng) {
  GoldTree t = Builder(config, rng).sentence();
  t.validate();
  return t;
}

std::vector<GoldTree> generate_corpus(const SyntheticConfig& config, int min_tokens, std::mt19937_64& rng) {
  std::vector<GoldTree> out;
  int tokens = 0;
  while (tokens < min_tokens) {
    out.push_back(generate_sentence(config, rng));
    tokens += out.back().length();
  }
  return out;
}

std::vector<std::string> sentence_lines(const std::vector<GoldTree>& trees) {
  std::vector<std::string> lines;
  lines.reserve(trees.size());
  for (const auto& t : trees) {
    std::string line;
    for (const auto& leaf : t.leaves) line += (line.empty() ? "" : " ") + leaf.word;
    lines.push_back(std::move(line));
  }
  return lines;
}

namespace {

void render_tagged(const GoldTree& t, const std::set<Span>& spans, Span node, const std::string& label,
                   std::string& out) {
  if (node.first == node.last) {
    const Leaf& leaf = t.leaves[static_cast<std::size_t>(node.first - 1)];
    out += "(" + (leaf.tag.empty() ? label : leaf.tag) + " " + leaf.word + ")";
    return;
  }
  out += "(" + label;
  for (int p = node.first; p <= node.last;) {
    Span child{p, p};
    for (int q = node.last; q > p; --q) {
      const Span s{p, q};
      if (s != node && spans.count(s)) {
        child = s;
        break;
      }
    }
    out += " ";
    render_tagged(t, spans, child, label, out);
    p = child.last + 1;
  }
  out += ")";
}

}  // namespace

std::string to_tagged_bracketed(const GoldTree& tree, const std::string& label) {
  if (tree.length() == 0) throw std::invalid_argument("to_tagged_bracketed: empty tree");
  const std::set<Span> spans(tree.spans.begin(), tree.spans.end());
  std::string out;
  render_tagged(tree, spans, {1, tree.length()}, label, out);
  if (tree.length() == 1) out = "(" + label + " " + out + ")";
  return out;
}

}  // namespace palm
